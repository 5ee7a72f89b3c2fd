//! Corpora: synthetic generation, file ingestion, vocabularies and splits.

mod grammar;
mod loaders;

use std::collections::{BTreeSet, HashMap};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::parse_ir::{linearize, NodeKind, ParseTree, SourceQuery, TargetSequence, TargetToken};

pub use grammar::{generate_synthetic, GrammarSpec, IntentSpec, LanguagePair, SlotSpec, WordOrder};
pub use loaders::{load_bio, load_jsonl, load_top_tsv, parse_top_line, LoadReport, Skip};

pub const DEFAULT_LANGUAGE: &str = "en";

/// One (query, target) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub query: SourceQuery,
    pub target: TargetSequence,
    pub language_tag: String,
}

impl Example {
    pub fn from_tree(query: SourceQuery, tree: &ParseTree, language_tag: &str) -> crate::error::Result<Self> {
        let target = linearize(tree, &query)?;
        Ok(Example { query, target, language_tag: language_tag.to_string() })
    }
}

#[derive(Serialize, Deserialize)]
struct JsonLine {
    tokens: Vec<String>,
    target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lang: Option<String>,
}

/// Writes the canonical JSON-lines format, one example per line.
pub fn write_jsonl<W: Write>(mut out: W, examples: &[Example]) -> std::io::Result<()> {
    for ex in examples {
        let line = JsonLine {
            tokens: ex.query.tokens().to_vec(),
            target: ex.target.render(),
            lang: (ex.language_tag != DEFAULT_LANGUAGE).then(|| ex.language_tag.clone()),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Shuffles with `seed` and splits off the last `test_count` examples.
pub fn train_test_split(examples: &[Example], test_count: usize, seed: u64) -> (Vec<Example>, Vec<Example>) {
    let mut shuffled = examples.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = shuffled.len().saturating_sub(test_count);
    let test = shuffled.split_off(cut);
    (shuffled, test)
}

/// Tag vocabulary plus the source lexicon.
///
/// Tag ids: specials (`<pad> <unk> <bos> <eos> <no-insert> ]`) first, then
/// labeled closes, intents and slots, each group sorted by name. Pointer tokens
/// never enter the tag vocabulary; in the joint output space pointer `@i` has
/// column `V + i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tags: Vec<TargetToken>,
    tag_index: HashMap<TargetToken, usize>,
    source: Vec<String>,
    source_index: HashMap<String, usize>,
}

pub const SOURCE_PAD: usize = 0;
pub const SOURCE_UNK: usize = 1;

const SPECIALS: [TargetToken; 6] = [
    TargetToken::Pad,
    TargetToken::Unk,
    TargetToken::Bos,
    TargetToken::Eos,
    TargetToken::NoInsert,
    TargetToken::Close,
];

impl Vocabulary {
    fn from_parts(tags: Vec<TargetToken>, source: Vec<String>) -> Self {
        let tag_index = tags.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        let source_index = source.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Vocabulary { tags, tag_index, source, source_index }
    }

    /// Tag vocabulary size `V`.
    pub fn size(&self) -> usize {
        self.tags.len()
    }

    pub fn tags(&self) -> &[TargetToken] {
        &self.tags
    }

    pub fn tag_id(&self, tok: &TargetToken) -> Option<usize> {
        self.tag_index.get(tok).copied()
    }

    pub fn tag(&self, id: usize) -> &TargetToken {
        &self.tags[id]
    }

    pub fn no_insert(&self) -> usize {
        4
    }

    pub fn bos(&self) -> usize {
        2
    }

    pub fn eos(&self) -> usize {
        3
    }

    /// Column of `tok` in the `V + m` joint output space.
    pub fn joint_index(&self, tok: &TargetToken) -> Option<usize> {
        match tok {
            TargetToken::Pointer(i) => Some(self.size() + i),
            other => self.tag_id(other),
        }
    }

    /// Inverse of [`Vocabulary::joint_index`].
    pub fn joint_token(&self, column: usize) -> TargetToken {
        if column < self.size() {
            self.tags[column].clone()
        } else {
            TargetToken::Pointer(column - self.size())
        }
    }

    pub fn source_size(&self) -> usize {
        self.source.len()
    }

    pub fn source_words(&self) -> &[String] {
        &self.source
    }

    pub fn source_id(&self, word: &str) -> usize {
        self.source_index.get(word).copied().unwrap_or(SOURCE_UNK)
    }

    pub fn encode_query(&self, query: &SourceQuery) -> Vec<usize> {
        query.tokens().iter().map(|w| self.source_id(w)).collect()
    }

    pub(crate) fn to_serialized(&self) -> SerializedVocab {
        SerializedVocab {
            tags: self.tags.iter().map(ToString::to_string).collect(),
            source: self.source.clone(),
        }
    }

    pub(crate) fn from_serialized(s: &SerializedVocab) -> crate::error::Result<Self> {
        let tags = s.tags.iter().map(|t| t.parse()).collect::<crate::error::Result<Vec<TargetToken>>>()?;
        if tags.len() < SPECIALS.len() || tags[..SPECIALS.len()] != SPECIALS {
            return Err(crate::error::IrError::BadToken("vocabulary specials out of order".into()));
        }
        Ok(Vocabulary::from_parts(tags, s.source.clone()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct SerializedVocab {
    pub tags: Vec<String>,
    pub source: Vec<String>,
}

/// Collects labels and source words from `examples` in a sorted, order-independent way.
pub fn build_vocab(examples: &[Example]) -> Vocabulary {
    let mut intents = BTreeSet::new();
    let mut slots = BTreeSet::new();
    let mut closes = BTreeSet::new();
    let mut words = BTreeSet::new();
    for ex in examples {
        for tok in ex.target.body() {
            match tok {
                TargetToken::OpenIntent(n) => {
                    intents.insert(n.clone());
                }
                TargetToken::OpenSlot(n) => {
                    slots.insert(n.clone());
                }
                TargetToken::LabeledClose(k, n) => {
                    closes.insert((*k, n.clone()));
                }
                _ => {}
            }
        }
        words.extend(ex.query.tokens().iter().cloned());
    }
    let mut tags: Vec<TargetToken> = SPECIALS.to_vec();
    tags.extend(closes.into_iter().map(|(k, n)| TargetToken::LabeledClose(k, n)));
    tags.extend(intents.into_iter().map(|n| TargetToken::open(NodeKind::Intent, n)));
    tags.extend(slots.into_iter().map(|n| TargetToken::open(NodeKind::Slot, n)));
    let mut source = vec!["<pad>".to_string(), "<unk>".to_string()];
    source.extend(words.into_iter().filter(|w| w != "<pad>" && w != "<unk>"));
    Vocabulary::from_parts(tags, source)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parse_ir::{Child, Node};

    fn ex(tokens: &str, target: &str) -> Example {
        Example {
            query: SourceQuery::from_text(tokens).unwrap(),
            target: TargetSequence::parse_rendering(target).unwrap(),
            language_tag: DEFAULT_LANGUAGE.into(),
        }
    }

    fn corpus() -> Vec<Example> {
        vec![
            ex("a b c", "[IN:X @0 [SL:s1 @1 ] [SL:s2 @2 ] ]"),
            ex("d e", "[IN:Y [SL:s3 @0 ] @1 ]"),
            ex("a", "[IN:X @0 ]"),
        ]
    }

    #[test]
    fn vocab_size_counts_labels_and_specials() {
        let v = build_vocab(&corpus());
        assert_eq!(v.size(), 2 + 3 + 1 + 5);
        assert_eq!(v.tag(v.no_insert()), &TargetToken::NoInsert);
        assert_eq!(v.tag(v.bos()), &TargetToken::Bos);
        assert_eq!(v.tag(v.eos()), &TargetToken::Eos);
        assert!(v.tags().iter().all(|t| !t.is_pointer()));
        assert_eq!(v.joint_index(&TargetToken::Pointer(2)), Some(v.size() + 2));
        assert_eq!(v.joint_token(v.size() + 2), TargetToken::Pointer(2));
        assert_eq!(v.source_id("zzz"), SOURCE_UNK);
        assert_eq!(v.source_size(), 2 + 5);
    }

    #[test]
    fn vocab_is_order_independent() {
        let mut c = corpus();
        let v1 = build_vocab(&c);
        c.reverse();
        assert_eq!(build_vocab(&c), v1);
        let back = Vocabulary::from_serialized(&v1.to_serialized()).unwrap();
        assert_eq!(back, v1);
    }

    #[test]
    fn jsonl_writes_canonical_lines() {
        let tree = ParseTree::new(Node::intent("GREET", vec![Child::Token(0)]));
        let e = Example::from_tree(SourceQuery::from_text("hello").unwrap(), &tree, DEFAULT_LANGUAGE).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &[e]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "{\"tokens\":[\"hello\"],\"target\":\"[IN:GREET @0 ]\"}\n");
    }

    #[test]
    fn split_sizes() {
        let c: Vec<Example> = (0..10).map(|_| corpus()[2].clone()).collect();
        let (tr, te) = train_test_split(&c, 3, 1);
        assert_eq!((tr.len(), te.len()), (7, 3));
    }
}
