//! Parse intermediate representation.
//!
//! A parse is held in two interchangeable shapes: a [`ParseTree`] of intent and
//! slot nodes over source positions, and a flat [`TargetSequence`] in which every
//! source position appears as a pointer token `@n`. The flat form is what the
//! insertion decoder generates; the tree form is what callers consume.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{IrError, MalformedKind, Result};

/// A pre-tokenized utterance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SourceQuery {
    tokens: Vec<String>,
}

impl SourceQuery {
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.is_empty() {
            return Err(IrError::InvalidQuery("empty query".into()));
        }
        if let Some(t) = tokens.iter().find(|t| t.is_empty() || t.chars().any(char::is_whitespace)) {
            return Err(IrError::InvalidQuery(format!("bad token {t:?}")));
        }
        Ok(SourceQuery { tokens })
    }

    /// Splits on whitespace.
    pub fn from_text(text: &str) -> Result<Self> {
        SourceQuery::new(text.split_whitespace())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeKind {
    Intent,
    Slot,
}

impl NodeKind {
    fn prefix(self) -> &'static str {
        match self {
            NodeKind::Intent => "IN:",
            NodeKind::Slot => "SL:",
        }
    }
}

/// One token of a flat target sequence.
///
/// Ordering follows declaration order, which the vocabulary relies on only for
/// specials; label tokens are ordered by name there.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TargetToken {
    Pad,
    Unk,
    Bos,
    Eos,
    NoInsert,
    Close,
    /// Close symbol carrying the label of the node it ends (`labeled_close` mode).
    LabeledClose(NodeKind, String),
    OpenIntent(String),
    OpenSlot(String),
    Pointer(usize),
}

impl TargetToken {
    pub fn open(kind: NodeKind, name: impl Into<String>) -> Self {
        match kind {
            NodeKind::Intent => TargetToken::OpenIntent(name.into()),
            NodeKind::Slot => TargetToken::OpenSlot(name.into()),
        }
    }

    pub fn is_pointer(&self) -> bool {
        matches!(self, TargetToken::Pointer(_))
    }
}

impl fmt::Display for TargetToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetToken::Pad => f.write_str("<pad>"),
            TargetToken::Unk => f.write_str("<unk>"),
            TargetToken::Bos => f.write_str("<bos>"),
            TargetToken::Eos => f.write_str("<eos>"),
            TargetToken::NoInsert => f.write_str("<no-insert>"),
            TargetToken::Close => f.write_str("]"),
            TargetToken::LabeledClose(k, n) => write!(f, "]{}{}", k.prefix(), n),
            TargetToken::OpenIntent(n) => write!(f, "[IN:{n}"),
            TargetToken::OpenSlot(n) => write!(f, "[SL:{n}"),
            TargetToken::Pointer(i) => write!(f, "@{i}"),
        }
    }
}

impl FromStr for TargetToken {
    type Err = IrError;

    fn from_str(s: &str) -> Result<Self> {
        let label = |rest: &str| -> Result<(NodeKind, String)> {
            let (kind, name) = if let Some(n) = rest.strip_prefix("IN:") {
                (NodeKind::Intent, n)
            } else if let Some(n) = rest.strip_prefix("SL:") {
                (NodeKind::Slot, n)
            } else {
                return Err(IrError::BadToken(s.to_string()));
            };
            if name.is_empty() {
                return Err(IrError::BadToken(s.to_string()));
            }
            Ok((kind, name.to_string()))
        };
        Ok(match s {
            "<pad>" => TargetToken::Pad,
            "<unk>" => TargetToken::Unk,
            "<bos>" => TargetToken::Bos,
            "<eos>" => TargetToken::Eos,
            "<no-insert>" => TargetToken::NoInsert,
            "]" => TargetToken::Close,
            _ if s.starts_with('[') => {
                let (k, n) = label(&s[1..])?;
                TargetToken::open(k, n)
            }
            _ if s.starts_with(']') => {
                let (k, n) = label(&s[1..])?;
                TargetToken::LabeledClose(k, n)
            }
            _ if s.starts_with('@') => s[1..]
                .parse::<usize>()
                .map(TargetToken::Pointer)
                .map_err(|_| IrError::BadToken(s.to_string()))?,
            _ => return Err(IrError::BadToken(s.to_string())),
        })
    }
}

/// A flat target wrapped in BOS/EOS.
///
/// Sequences built by [`linearize`] satisfy every structural invariant; sequences
/// built with [`TargetSequence::from_tokens`] are untrusted (e.g. model output)
/// and must go through [`delinearize`] to be validated.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TargetSequence {
    tokens: Vec<TargetToken>,
}

impl TargetSequence {
    pub fn from_tokens(tokens: Vec<TargetToken>) -> Self {
        TargetSequence { tokens }
    }

    /// Wraps a body in BOS/EOS.
    pub fn from_body(body: impl IntoIterator<Item = TargetToken>) -> Self {
        let mut tokens = vec![TargetToken::Bos];
        tokens.extend(body);
        tokens.push(TargetToken::Eos);
        TargetSequence { tokens }
    }

    pub fn tokens(&self) -> &[TargetToken] {
        &self.tokens
    }

    pub fn into_tokens(self) -> Vec<TargetToken> {
        self.tokens
    }

    /// Tokens between BOS and EOS.
    pub fn body(&self) -> &[TargetToken] {
        let n = self.tokens.len();
        if n >= 2 && self.tokens[0] == TargetToken::Bos && self.tokens[n - 1] == TargetToken::Eos {
            &self.tokens[1..n - 1]
        } else {
            &self.tokens
        }
    }

    /// Body length `n` (excludes BOS/EOS).
    pub fn len(&self) -> usize {
        self.body().len()
    }

    pub fn is_empty(&self) -> bool {
        self.body().is_empty()
    }

    /// Canonical human-readable rendering of the body, e.g. `[IN:GREET @0 ]`.
    pub fn render(&self) -> String {
        let parts: Vec<String> = self.body().iter().map(ToString::to_string).collect();
        parts.join(" ")
    }

    /// Inverse of [`TargetSequence::render`]. Does not validate structure.
    pub fn parse_rendering(text: &str) -> Result<Self> {
        let body = text
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<Vec<TargetToken>>>()?;
        Ok(TargetSequence::from_body(body))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Child {
    Node(Node),
    Token(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Node {
    pub kind: NodeKind,
    pub name: String,
    pub children: Vec<Child>,
}

impl Node {
    pub fn intent(name: impl Into<String>, children: Vec<Child>) -> Self {
        Node { kind: NodeKind::Intent, name: name.into(), children }
    }

    pub fn slot(name: impl Into<String>, children: Vec<Child>) -> Self {
        Node { kind: NodeKind::Slot, name: name.into(), children }
    }

    fn depth(&self) -> usize {
        1 + self
            .children
            .iter()
            .map(|c| match c {
                Child::Node(n) => n.depth(),
                Child::Token(_) => 0,
            })
            .max()
            .unwrap_or(0)
    }

    fn collect_tokens(&self, out: &mut Vec<usize>) {
        for c in &self.children {
            match c {
                Child::Node(n) => n.collect_tokens(out),
                Child::Token(i) => out.push(*i),
            }
        }
    }

    fn intent_depth(&self) -> usize {
        let own = usize::from(self.kind == NodeKind::Intent);
        own + self
            .children
            .iter()
            .map(|c| match c {
                Child::Node(n) => n.intent_depth(),
                Child::Token(_) => 0,
            })
            .max()
            .unwrap_or(0)
    }
}

impl From<Node> for Child {
    fn from(n: Node) -> Self {
        Child::Node(n)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ParseTree {
    pub root: Node,
}

impl ParseTree {
    pub fn new(root: Node) -> Self {
        ParseTree { root }
    }

    /// Node depth; a flat intent with slots has depth 2.
    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    /// Number of intent levels along the deepest path.
    pub fn intent_depth(&self) -> usize {
        self.root.intent_depth()
    }

    /// Source positions in left-to-right traversal order.
    pub fn source_indices(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.root.collect_tokens(&mut out);
        out
    }
}

/// Shape of the close symbol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CloseStyle {
    /// One shared `]`.
    #[default]
    Unlabeled,
    /// `]IN:NAME` / `]SL:NAME`.
    Labeled,
}

impl CloseStyle {
    pub fn from_flag(labeled_close: bool) -> Self {
        if labeled_close {
            CloseStyle::Labeled
        } else {
            CloseStyle::Unlabeled
        }
    }
}

fn validate_tree(tree: &ParseTree, m: usize) -> Result<()> {
    if tree.root.kind != NodeKind::Intent {
        return Err(IrError::InvalidTree("root must be an intent".into()));
    }
    let idx = tree.source_indices();
    for (pos, &i) in idx.iter().enumerate() {
        if i >= m {
            return Err(IrError::InvalidTree(format!("index {i} out of range for length {m}")));
        }
        if pos > 0 && idx[pos - 1] >= i {
            return Err(IrError::InvalidTree(format!(
                "index {i} is duplicated or out of order"
            )));
        }
    }
    if idx.len() != m {
        return Err(IrError::InvalidTree(format!(
            "{} of {m} source tokens covered",
            idx.len()
        )));
    }
    Ok(())
}

/// Depth-first, left-to-right serialization with an unlabeled close symbol.
pub fn linearize(tree: &ParseTree, query: &SourceQuery) -> Result<TargetSequence> {
    linearize_with(tree, query, CloseStyle::Unlabeled)
}

pub fn linearize_with(tree: &ParseTree, query: &SourceQuery, close: CloseStyle) -> Result<TargetSequence> {
    validate_tree(tree, query.len())?;
    fn walk(node: &Node, close: CloseStyle, out: &mut Vec<TargetToken>) {
        out.push(TargetToken::open(node.kind, node.name.clone()));
        for c in &node.children {
            match c {
                Child::Node(n) => walk(n, close, out),
                Child::Token(i) => out.push(TargetToken::Pointer(*i)),
            }
        }
        out.push(match close {
            CloseStyle::Unlabeled => TargetToken::Close,
            CloseStyle::Labeled => TargetToken::LabeledClose(node.kind, node.name.clone()),
        });
    }
    let mut body = Vec::new();
    walk(&tree.root, close, &mut body);
    Ok(TargetSequence::from_body(body))
}

/// Rebuilds the tree from an untrusted flat sequence. Accepts either close style.
pub fn delinearize(seq: &TargetSequence, query: &SourceQuery) -> Result<ParseTree> {
    use MalformedKind::*;
    let bad = |k| Err(IrError::MalformedSequence(k));
    let toks = seq.tokens();
    let n = toks.len();
    if n < 2 || toks[0] != TargetToken::Bos || toks[n - 1] != TargetToken::Eos {
        return bad(Unbalanced);
    }
    let body = &toks[1..n - 1];
    if !matches!(body.first(), Some(TargetToken::OpenIntent(_))) {
        return bad(NoRootIntent);
    }
    let m = query.len();
    let mut stack: Vec<Node> = Vec::new();
    let mut root: Option<Node> = None;
    let mut last_ptr: Option<usize> = None;
    let mut covered = 0usize;
    for tok in body {
        if root.is_some() {
            return bad(Unbalanced);
        }
        match tok {
            TargetToken::OpenIntent(name) => stack.push(Node::intent(name.clone(), Vec::new())),
            TargetToken::OpenSlot(name) => stack.push(Node::slot(name.clone(), Vec::new())),
            TargetToken::Close | TargetToken::LabeledClose(..) => {
                let Some(node) = stack.pop() else {
                    return bad(Unbalanced);
                };
                if let TargetToken::LabeledClose(kind, name) = tok {
                    if *kind != node.kind || *name != node.name {
                        return bad(Unbalanced);
                    }
                }
                match stack.last_mut() {
                    Some(parent) => parent.children.push(Child::Node(node)),
                    None => root = Some(node),
                }
            }
            TargetToken::Pointer(i) => {
                let i = *i;
                if i >= m {
                    return bad(PointerOutOfRange);
                }
                if last_ptr.is_some_and(|p| p >= i) {
                    return bad(PointerOrder);
                }
                last_ptr = Some(i);
                covered += 1;
                match stack.last_mut() {
                    Some(parent) => parent.children.push(Child::Token(i)),
                    None => return bad(Unbalanced),
                }
            }
            _ => return bad(Unbalanced),
        }
    }
    match root {
        Some(root) if stack.is_empty() => {
            if covered != m {
                return bad(PointerCoverage);
            }
            Ok(ParseTree { root })
        }
        _ => bad(Unbalanced),
    }
}

/// Converts a flat intent + BIO tag annotation into a depth-2 tree.
///
/// Dangling `I-x` tags (not continuing a `B-x`/`I-x` run) are promoted to `B-x`;
/// the second element of the result counts those repairs.
pub fn bio_to_tree(intent: &str, tags: &[impl AsRef<str>], query: &SourceQuery) -> Result<(ParseTree, usize)> {
    if tags.len() != query.len() {
        return Err(IrError::InvalidBio(format!(
            "{} tags for {} tokens",
            tags.len(),
            query.len()
        )));
    }
    if intent.is_empty() {
        return Err(IrError::InvalidBio("empty intent".into()));
    }
    let mut repairs = 0;
    let mut root = Node::intent(intent, Vec::new());
    let mut open: Option<Node> = None;
    for (i, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        let (begin, label) = if tag == "O" {
            if let Some(slot) = open.take() {
                root.children.push(Child::Node(slot));
            }
            root.children.push(Child::Token(i));
            continue;
        } else if let Some(l) = tag.strip_prefix("B-") {
            (true, l)
        } else if let Some(l) = tag.strip_prefix("I-") {
            (false, l)
        } else {
            return Err(IrError::InvalidBio(format!("unknown tag {tag:?} at {i}")));
        };
        if label.is_empty() {
            return Err(IrError::InvalidBio(format!("empty label at {i}")));
        }
        let continues = !begin && open.as_ref().is_some_and(|s| s.name == label);
        if continues {
            if let Some(s) = open.as_mut() {
                s.children.push(Child::Token(i));
            }
        } else {
            if !begin {
                repairs += 1;
            }
            if let Some(slot) = open.take() {
                root.children.push(Child::Node(slot));
            }
            open = Some(Node::slot(label, vec![Child::Token(i)]));
        }
    }
    if let Some(slot) = open.take() {
        root.children.push(Child::Node(slot));
    }
    Ok((ParseTree::new(root), repairs))
}

/// Token-for-token identity.
pub fn exact_match(pred: &TargetSequence, gold: &TargetSequence) -> bool {
    pred.tokens() == gold.tokens()
}

/// Name of the outermost intent, or `None` when the first content token is not
/// an intent opener.
pub fn intent_of(seq: &TargetSequence) -> Option<&str> {
    match seq.body().first() {
        Some(TargetToken::OpenIntent(name)) => Some(name),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(n: usize) -> SourceQuery {
        SourceQuery::new((0..n).map(|i| format!("w{i}"))).unwrap()
    }

    fn t(s: &str) -> TargetSequence {
        TargetSequence::parse_rendering(s).unwrap()
    }

    #[test]
    fn linearize_single_intent() {
        let tree = ParseTree::new(Node::intent("GREET", vec![Child::Token(0)]));
        let seq = linearize(&tree, &SourceQuery::from_text("hello").unwrap()).unwrap();
        assert_eq!(
            seq.tokens(),
            &[
                TargetToken::Bos,
                TargetToken::OpenIntent("GREET".into()),
                TargetToken::Pointer(0),
                TargetToken::Close,
                TargetToken::Eos
            ]
        );
        assert_eq!(seq.render(), "[IN:GREET @0 ]");
    }

    #[test]
    fn linearize_slot() {
        let tree = ParseTree::new(Node::intent(
            "I",
            vec![
                Child::Token(0),
                Child::Token(1),
                Node::slot("S", vec![Child::Token(2), Child::Token(3)]).into(),
            ],
        ));
        let seq = linearize(&tree, &q(4)).unwrap();
        assert_eq!(seq, t("[IN:I @0 @1 [SL:S @2 @3 ] ]"));
        assert_eq!(seq.len(), 8);
    }

    #[test]
    fn linearize_nested() {
        let tree = ParseTree::new(Node::intent(
            "OUTER",
            vec![
                Child::Token(0),
                Node::slot("S", vec![Node::intent("INNER", vec![Child::Token(1), Child::Token(2)]).into()]).into(),
            ],
        ));
        let seq = linearize(&tree, &q(3)).unwrap();
        let body = seq.body();
        let open_slot = body.iter().position(|x| *x == TargetToken::OpenSlot("S".into())).unwrap();
        let inner = body.iter().position(|x| *x == TargetToken::OpenIntent("INNER".into())).unwrap();
        assert_eq!(seq.render(), "[IN:OUTER @0 [SL:S [IN:INNER @1 @2 ] ] ]");
        // the slot's CLOSE is the second-to-last body token
        assert!(open_slot < inner && inner < body.len() - 2);
        assert_eq!(tree.depth(), 3);
        assert_eq!(tree.intent_depth(), 2);
    }

    #[test]
    fn linearize_rejects_bad_trees() {
        let dup = ParseTree::new(Node::intent("I", vec![Child::Token(0), Child::Token(0)]));
        assert!(matches!(linearize(&dup, &q(2)), Err(IrError::InvalidTree(_))));
        let order = ParseTree::new(Node::intent("I", vec![Child::Token(1), Child::Token(0)]));
        assert!(matches!(linearize(&order, &q(2)), Err(IrError::InvalidTree(_))));
        let range = ParseTree::new(Node::intent("I", vec![Child::Token(0), Child::Token(5)]));
        assert!(matches!(linearize(&range, &q(2)), Err(IrError::InvalidTree(_))));
        let gap = ParseTree::new(Node::intent("I", vec![Child::Token(0)]));
        assert!(matches!(linearize(&gap, &q(2)), Err(IrError::InvalidTree(_))));
        let slot_root = ParseTree::new(Node::slot("S", vec![Child::Token(0)]));
        assert!(matches!(linearize(&slot_root, &q(1)), Err(IrError::InvalidTree(_))));
    }

    #[test]
    fn delinearize_inverse_and_errors() {
        let tree = delinearize(&t("[IN:GREET @0 ]"), &q(1)).unwrap();
        assert_eq!(tree, ParseTree::new(Node::intent("GREET", vec![Child::Token(0)])));

        let cases = [
            ("[IN:I @0 ] ]", MalformedKind::Unbalanced),
            ("[IN:I @0", MalformedKind::Unbalanced),
            ("[IN:I [SL:S @0 ]", MalformedKind::Unbalanced),
            ("@0 [IN:I ]", MalformedKind::NoRootIntent),
            ("", MalformedKind::NoRootIntent),
            ("[SL:S @0 ]", MalformedKind::NoRootIntent),
            ("[IN:I @3 ]", MalformedKind::PointerOutOfRange),
            ("[IN:I @1 @0 ]", MalformedKind::PointerOrder),
            ("[IN:I @0 @0 ]", MalformedKind::PointerOrder),
            ("[IN:I @0 ]", MalformedKind::PointerCoverage),
        ];
        for (text, kind) in cases {
            assert_eq!(
                delinearize(&t(text), &q(2)),
                Err(IrError::MalformedSequence(kind)),
                "{text}"
            );
        }
        let no_bos = TargetSequence::from_tokens(vec![TargetToken::OpenIntent("I".into()), TargetToken::Close]);
        assert_eq!(delinearize(&no_bos, &q(1)), Err(IrError::MalformedSequence(MalformedKind::Unbalanced)));
        let stray = TargetSequence::from_body(vec![
            TargetToken::OpenIntent("I".into()),
            TargetToken::NoInsert,
            TargetToken::Pointer(0),
            TargetToken::Close,
        ]);
        assert_eq!(delinearize(&stray, &q(1)), Err(IrError::MalformedSequence(MalformedKind::Unbalanced)));
    }

    #[test]
    fn labeled_close_round_trip() {
        let tree = ParseTree::new(Node::intent(
            "I",
            vec![Child::Token(0), Node::slot("S", vec![Child::Token(1)]).into()],
        ));
        let seq = linearize_with(&tree, &q(2), CloseStyle::Labeled).unwrap();
        assert_eq!(seq.render(), "[IN:I @0 [SL:S @1 ]SL:S ]IN:I");
        assert_eq!(TargetSequence::parse_rendering(&seq.render()).unwrap(), seq);
        assert_eq!(delinearize(&seq, &q(2)).unwrap(), tree);
        let crossed = t("[IN:I @0 [SL:S @1 ]IN:I ]SL:S");
        assert_eq!(delinearize(&crossed, &q(2)), Err(IrError::MalformedSequence(MalformedKind::Unbalanced)));
    }

    #[test]
    fn bio_conversion() {
        let query = SourceQuery::from_text("fly to boston").unwrap();
        let (tree, repairs) = bio_to_tree("F", &["O", "O", "B-city"], &query).unwrap();
        assert_eq!(repairs, 0);
        assert_eq!(
            tree,
            ParseTree::new(Node::intent(
                "F",
                vec![Child::Token(0), Child::Token(1), Node::slot("city", vec![Child::Token(2)]).into()]
            ))
        );

        let (tree, repairs) = bio_to_tree("F", &["O", "O", "O"], &query).unwrap();
        assert_eq!(repairs, 0);
        assert_eq!(tree.root.children.len(), 3);
        assert_eq!(tree.depth(), 1);

        let (tree, repairs) = bio_to_tree("F", &["I-city", "O", "O"], &query).unwrap();
        assert_eq!(repairs, 1);
        assert_eq!(tree.root.children[0], Node::slot("city", vec![Child::Token(0)]).into());

        // I- with a different label than the open span starts a new slot
        let (tree, repairs) = bio_to_tree("F", &["B-a", "I-b", "I-b"], &query).unwrap();
        assert_eq!(repairs, 1);
        assert_eq!(linearize(&tree, &query).unwrap().render(), "[IN:F [SL:a @0 ] [SL:b @1 @2 ] ]");

        assert!(matches!(bio_to_tree("F", &["O"], &query), Err(IrError::InvalidBio(_))));
        assert!(matches!(bio_to_tree("F", &["O", "X-a", "O"], &query), Err(IrError::InvalidBio(_))));
    }

    #[test]
    fn exact_match_and_intent() {
        let a = t("[IN:PLAY @0 [SL:song @1 ] ]");
        assert!(exact_match(&a, &a.clone()));
        assert!(!exact_match(&a, &t("[IN:PLAY @0 [SL:artist @1 ] ]")));
        assert!(!exact_match(&t("[IN:PLAY @0 [SL:song @1 ]"), &a));
        assert_eq!(intent_of(&a), Some("PLAY"));
        assert_eq!(intent_of(&t("@0 [IN:PLAY ]")), None);
        assert_eq!(intent_of(&t("")), None);
        assert_eq!(intent_of(&t("[IN:OUTER @0 [SL:S [IN:INNER @1 ] ] ]")), Some("OUTER"));
    }

    #[test]
    fn token_text_round_trip() {
        for s in ["[IN:A_B", "[SL:x", "]", "]IN:A", "@12", "<bos>", "<eos>", "<no-insert>", "<pad>", "<unk>"] {
            let tok: TargetToken = s.parse().unwrap();
            assert_eq!(tok.to_string(), s);
        }
        for s in ["[XX:a", "[IN:", "@x", "foo"] {
            assert!(s.parse::<TargetToken>().is_err(), "{s}");
        }
    }

    #[test]
    fn query_validation() {
        assert!(SourceQuery::new(Vec::<String>::new()).is_err());
        assert!(SourceQuery::new(["a b"]).is_err());
        assert_eq!(SourceQuery::from_text(" a  b ").unwrap().len(), 2);
    }
}
