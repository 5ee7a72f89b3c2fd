use std::collections::{HashMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Example;
use crate::error::CorpusError;
use crate::parse_ir::{Child, Node, NodeKind, ParseTree, SourceQuery};

/// Surface order applied after a query is drawn from the grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordOrder {
    #[default]
    Identity,
    /// Mirror every node, reversing the whole utterance.
    Reverse,
    /// Reverse each run of adjacent words inside a node, keeping constituents in place.
    ReverseSpans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentSpec {
    pub name: String,
    /// Slot signature.
    pub slots: Vec<String>,
    /// Token patterns; `{NAME}` marks a slot placeholder.
    pub carrier_phrases: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub name: String,
    pub fillers: Vec<Vec<String>>,
    /// Intents that may appear nested inside this slot.
    #[serde(default)]
    pub nested_intents: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarSpec {
    pub intents: Vec<IntentSpec>,
    pub slots: Vec<SlotSpec>,
    pub nesting_depth: usize,
    #[serde(default = "default_nest_probability")]
    pub nest_probability: f64,
    #[serde(default)]
    pub word_order: WordOrder,
    pub vocab: Vec<String>,
    #[serde(default = "default_language")]
    pub language: String,
}

fn default_nest_probability() -> f64 {
    0.35
}

fn default_language() -> String {
    super::DEFAULT_LANGUAGE.to_string()
}

fn placeholder(piece: &str) -> Option<&str> {
    piece.strip_prefix('{').and_then(|p| p.strip_suffix('}'))
}

const INTENTS: [(&str, &[&str]); 8] = [
    ("GET_DIRECTIONS", &["SOURCE", "DESTINATION", "DATE_TIME"]),
    ("GET_WEATHER", &["LOCATION", "DATE_TIME"]),
    ("PLAY_MUSIC", &["ARTIST", "SONG"]),
    ("BOOK_RESTAURANT", &["CUISINE", "PARTY_SIZE", "DATE_TIME", "LOCATION"]),
    ("GET_EVENT", &["EVENT_TYPE", "LOCATION", "DATE_TIME"]),
    ("SEND_MESSAGE", &["CONTACT", "CONTENT"]),
    ("SET_REMINDER", &["TODO", "DATE_TIME"]),
    ("GET_DISTANCE", &["SOURCE", "DESTINATION"]),
];

// (slot, filler pool, nested intents). SOURCE and DESTINATION share a pool.
const SLOTS: [(&str, usize, &[&str]); 12] = [
    ("SOURCE", 0, &[]),
    ("DESTINATION", 0, &["GET_EVENT", "BOOK_RESTAURANT"]),
    ("DATE_TIME", 1, &[]),
    ("LOCATION", 2, &["GET_EVENT"]),
    ("ARTIST", 3, &[]),
    ("SONG", 4, &[]),
    ("CONTACT", 5, &[]),
    ("CONTENT", 6, &["GET_WEATHER", "GET_DISTANCE"]),
    ("CUISINE", 7, &[]),
    ("PARTY_SIZE", 8, &[]),
    ("EVENT_TYPE", 9, &[]),
    ("TODO", 10, &["PLAY_MUSIC", "SEND_MESSAGE"]),
];

const POOLS: usize = 11;
const POOL_WORDS: usize = 13;
const INTENT_WORDS: usize = 5;
const SHARED_WORDS: usize = 17;

/// Deterministic pronounceable pseudo-words, none of which is in `avoid`.
fn pseudo_words(count: usize, consonants: &[&str], vowels: &[&str], rng: &mut ChaCha8Rng, avoid: &HashSet<String>) -> Vec<String> {
    let mut seen: HashSet<String> = avoid.clone();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(consonants.choose(rng).unwrap());
            w.push_str(vowels.choose(rng).unwrap());
        }
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

const CONSONANTS_A: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS_A: [&str; 5] = ["a", "e", "i", "o", "u"];
const CONSONANTS_B: [&str; 9] = ["ch", "sh", "th", "x", "q", "w", "y", "j", "h"];
const VOWELS_B: [&str; 6] = ["ai", "ou", "ee", "oo", "ie", "ua"];

impl Default for GrammarSpec {
    /// 8 intents, 12 slots, nesting depth 2, a 200-word lexicon.
    fn default() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
        let total = POOLS * POOL_WORDS + INTENTS.len() * INTENT_WORDS + SHARED_WORDS;
        let words = pseudo_words(total, &CONSONANTS_A, &VOWELS_A, &mut rng, &HashSet::new());
        let mut it = words.iter().cloned();
        let pools: Vec<Vec<String>> = (0..POOLS).map(|_| it.by_ref().take(POOL_WORDS).collect()).collect();
        let intent_words: Vec<Vec<String>> = (0..INTENTS.len()).map(|_| it.by_ref().take(INTENT_WORDS).collect()).collect();
        let shared: Vec<String> = it.collect();
        // one connector word per slot gives slots a context cue ("from" vs "to")
        let connectors: HashMap<&str, &String> = SLOTS.iter().zip(shared.iter()).map(|(s, w)| (s.0, w)).collect();
        let fillers_shared = &shared[SLOTS.len()..];

        let slots = SLOTS
            .iter()
            .map(|&(name, pool, nested)| {
                let pool = &pools[pool];
                let mut fillers: Vec<Vec<String>> = pool.iter().map(|w| vec![w.clone()]).collect();
                for _ in 0..POOL_WORDS {
                    let a = pool.choose(&mut rng).unwrap().clone();
                    let b = pool.choose(&mut rng).unwrap().clone();
                    if a != b {
                        fillers.push(vec![a, b]);
                    }
                }
                SlotSpec { name: name.into(), fillers, nested_intents: nested.iter().map(|s| s.to_string()).collect() }
            })
            .collect();

        let intents = INTENTS
            .iter()
            .zip(&intent_words)
            .map(|(&(name, sig), own)| {
                let carrier_phrases = (0..3)
                    .map(|_| {
                        let mut phrase = Vec::new();
                        for _ in 0..rng.random_range(1..=2) {
                            phrase.push(own.choose(&mut rng).unwrap().clone());
                        }
                        if rng.random_bool(0.5) {
                            phrase.push(fillers_shared.choose(&mut rng).unwrap().clone());
                        }
                        let mut chosen: Vec<&str> = sig.to_vec();
                        chosen.shuffle(&mut rng);
                        let keep = rng.random_range(1..=chosen.len().min(3));
                        for slot in &chosen[..keep] {
                            phrase.push(connectors[slot].clone());
                            phrase.push(format!("{{{slot}}}"));
                        }
                        if rng.random_bool(0.4) {
                            phrase.push(own.choose(&mut rng).unwrap().clone());
                        }
                        phrase
                    })
                    .collect();
                IntentSpec { name: name.into(), slots: sig.iter().map(|s| s.to_string()).collect(), carrier_phrases }
            })
            .collect();

        GrammarSpec {
            intents,
            slots,
            nesting_depth: 2,
            nest_probability: default_nest_probability(),
            word_order: WordOrder::Identity,
            vocab: words,
            language: default_language(),
        }
    }
}

/// A grammar, its lexicon-swapped counterpart, and the word alignment between them.
#[derive(Debug, Clone)]
pub struct LanguagePair {
    pub a: GrammarSpec,
    pub b: GrammarSpec,
    /// Maps every language-B word to the language-A word it replaces.
    pub b_to_a: HashMap<String, String>,
}

impl GrammarSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let err = |m: String| Err(CorpusError::Grammar(m));
        if self.nesting_depth < 1 {
            return err("nesting_depth must be >= 1".into());
        }
        if self.intents.is_empty() {
            return err("no intents".into());
        }
        if !(0.0..=1.0).contains(&self.nest_probability) {
            return err("nest_probability must be in [0, 1]".into());
        }
        let vocab: HashSet<&str> = self.vocab.iter().map(String::as_str).collect();
        if vocab.is_empty() {
            return err("empty vocab".into());
        }
        if let Some(w) = self.vocab.iter().find(|w| w.is_empty() || w.chars().any(char::is_whitespace)) {
            return err(format!("bad vocab word {w:?}"));
        }
        let slots: HashMap<&str, &SlotSpec> = self.slots.iter().map(|s| (s.name.as_str(), s)).collect();
        let intents: HashSet<&str> = self.intents.iter().map(|i| i.name.as_str()).collect();
        for s in &self.slots {
            if s.fillers.is_empty() || s.fillers.iter().any(Vec::is_empty) {
                return err(format!("slot {} has an empty lexicon or filler", s.name));
            }
            for w in s.fillers.iter().flatten() {
                if !vocab.contains(w.as_str()) {
                    return err(format!("filler word {w:?} of slot {} not in vocab", s.name));
                }
            }
            if let Some(n) = s.nested_intents.iter().find(|n| !intents.contains(n.as_str())) {
                return err(format!("slot {} nests unknown intent {n}", s.name));
            }
        }
        for i in &self.intents {
            if i.carrier_phrases.is_empty() {
                return err(format!("intent {} has no carrier phrases", i.name));
            }
            if let Some(s) = i.slots.iter().find(|s| !slots.contains_key(s.as_str())) {
                return err(format!("intent {} references unknown slot {s}", i.name));
            }
            for phrase in &i.carrier_phrases {
                if phrase.is_empty() {
                    return err(format!("intent {} has an empty carrier phrase", i.name));
                }
                for piece in phrase {
                    match placeholder(piece) {
                        Some(s) if !i.slots.iter().any(|x| x == s) => {
                            return err(format!("intent {} phrase uses {s} outside its signature", i.name));
                        }
                        Some(_) => {}
                        None if !vocab.contains(piece.as_str()) => {
                            return err(format!("carrier word {piece:?} not in vocab"));
                        }
                        None => {}
                    }
                }
            }
        }
        Ok(())
    }

    /// Builds a second language by swapping every surface word for a fresh one and
    /// applying `word_order`. Labels are shared.
    pub fn derive_language(&self, language: &str, seed: u64, word_order: WordOrder) -> LanguagePair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let avoid: HashSet<String> = self.vocab.iter().cloned().collect();
        let fresh = pseudo_words(self.vocab.len(), &CONSONANTS_B, &VOWELS_B, &mut rng, &avoid);
        let a_to_b: HashMap<&str, &String> = self.vocab.iter().map(String::as_str).zip(fresh.iter()).collect();
        let swap = |w: &String| -> String {
            if placeholder(w).is_some() {
                w.clone()
            } else {
                a_to_b.get(w.as_str()).map(|s| (*s).clone()).unwrap_or_else(|| w.clone())
            }
        };
        let mut b = self.clone();
        b.language = language.to_string();
        b.word_order = word_order;
        b.vocab = fresh.clone();
        for s in &mut b.slots {
            s.fillers = s.fillers.iter().map(|f| f.iter().map(&swap).collect()).collect();
        }
        for i in &mut b.intents {
            i.carrier_phrases = i.carrier_phrases.iter().map(|p| p.iter().map(&swap).collect()).collect();
        }
        let b_to_a = a_to_b.iter().map(|(a, b)| ((*b).clone(), a.to_string())).collect();
        LanguagePair { a: self.clone(), b, b_to_a }
    }
}

enum Draft {
    Word(String),
    Node(DraftNode),
}

struct DraftNode {
    kind: NodeKind,
    name: String,
    children: Vec<Draft>,
}

struct Expander<'a> {
    spec: &'a GrammarSpec,
    intents: HashMap<&'a str, &'a IntentSpec>,
    slots: HashMap<&'a str, &'a SlotSpec>,
}

impl Expander<'_> {
    fn intent(&self, name: &str, depth: usize, rng: &mut ChaCha8Rng) -> DraftNode {
        let spec = self.intents[name];
        let phrase = spec.carrier_phrases.choose(rng).unwrap();
        let children = phrase
            .iter()
            .map(|piece| match placeholder(piece) {
                Some(slot) => Draft::Node(self.slot(slot, depth, rng)),
                None => Draft::Word(piece.clone()),
            })
            .collect();
        DraftNode { kind: NodeKind::Intent, name: name.to_string(), children }
    }

    fn slot(&self, name: &str, depth: usize, rng: &mut ChaCha8Rng) -> DraftNode {
        let spec = self.slots[name];
        let nest = depth < self.spec.nesting_depth
            && !spec.nested_intents.is_empty()
            && rng.random_bool(self.spec.nest_probability);
        let children = if nest {
            let inner = spec.nested_intents.choose(rng).unwrap();
            vec![Draft::Node(self.intent(inner, depth + 1, rng))]
        } else {
            spec.fillers.choose(rng).unwrap().iter().cloned().map(Draft::Word).collect()
        };
        DraftNode { kind: NodeKind::Slot, name: name.to_string(), children }
    }
}

fn reorder(node: &mut DraftNode, order: WordOrder) {
    for c in &mut node.children {
        if let Draft::Node(n) = c {
            reorder(n, order);
        }
    }
    match order {
        WordOrder::Identity => {}
        WordOrder::Reverse => node.children.reverse(),
        WordOrder::ReverseSpans => {
            let mut start = 0;
            while start < node.children.len() {
                if matches!(node.children[start], Draft::Word(_)) {
                    let mut end = start;
                    while end < node.children.len() && matches!(node.children[end], Draft::Word(_)) {
                        end += 1;
                    }
                    node.children[start..end].reverse();
                    start = end;
                } else {
                    start += 1;
                }
            }
        }
    }
}

fn freeze(node: DraftNode, words: &mut Vec<String>) -> Node {
    let children = node
        .children
        .into_iter()
        .map(|c| match c {
            Draft::Word(w) => {
                words.push(w);
                Child::Token(words.len() - 1)
            }
            Draft::Node(n) => Child::Node(freeze(n, words)),
        })
        .collect();
    Node { kind: node.kind, name: node.name, children }
}

/// Draws `count` examples; a pure function of `(spec, count, seed)`.
pub fn generate_synthetic(spec: &GrammarSpec, count: usize, seed: u64) -> Result<Vec<Example>, CorpusError> {
    spec.validate()?;
    if count == 0 {
        return Err(CorpusError::Grammar("count must be >= 1".into()));
    }
    let expander = Expander {
        spec,
        intents: spec.intents.iter().map(|i| (i.name.as_str(), i)).collect(),
        slots: spec.slots.iter().map(|s| (s.name.as_str(), s)).collect(),
    };
    let names: Vec<&str> = spec.intents.iter().map(|i| i.name.as_str()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let root = names.choose(&mut rng).unwrap();
            let mut draft = expander.intent(root, 1, &mut rng);
            reorder(&mut draft, spec.word_order);
            let mut words = Vec::new();
            let root = freeze(draft, &mut words);
            let query = SourceQuery::new(words).map_err(|e| CorpusError::Grammar(e.to_string()))?;
            Example::from_tree(query, &ParseTree::new(root), &spec.language)
                .map_err(|e| CorpusError::Grammar(e.to_string()))
        })
        .collect()
}
