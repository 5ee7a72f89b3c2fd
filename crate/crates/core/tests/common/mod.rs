#![allow(dead_code)]

use std::path::PathBuf;

use insertion_parser::parse_ir::{Child, Node, NodeKind, ParseTree, SourceQuery};
use rand::Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// A random well-formed tree over a fresh query; every source token is covered
/// exactly once, in order.
pub fn random_tree<R: Rng>(rng: &mut R, max_depth: usize) -> (ParseTree, SourceQuery) {
    let mut next = 0;
    let root = random_node(rng, NodeKind::Intent, max_depth, &mut next);
    let root = if next == 0 {
        next = 1;
        Node { children: vec![Child::Token(0)], ..root }
    } else {
        root
    };
    let query = SourceQuery::new((0..next).map(|i| format!("w{}", i % 37))).unwrap();
    (ParseTree::new(root), query)
}

fn random_node<R: Rng>(rng: &mut R, kind: NodeKind, depth: usize, next: &mut usize) -> Node {
    let name = match kind {
        NodeKind::Intent => format!("I{}", rng.random_range(0..6)),
        NodeKind::Slot => format!("S{}", rng.random_range(0..9)),
    };
    let mut children = Vec::new();
    for _ in 0..rng.random_range(0..5) {
        if depth > 1 && rng.random_bool(0.3) {
            let child_kind = match kind {
                NodeKind::Intent => NodeKind::Slot,
                NodeKind::Slot => NodeKind::Intent,
            };
            children.push(Child::Node(random_node(rng, child_kind, depth - 1, next)));
        } else {
            children.push(Child::Token(*next));
            *next += 1;
        }
    }
    Node { kind, name, children }
}
