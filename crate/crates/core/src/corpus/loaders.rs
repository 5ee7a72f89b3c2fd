use std::fs;
use std::path::Path;

use serde::Deserialize;

use super::{Example, JsonLine, DEFAULT_LANGUAGE};
use crate::error::{CorpusError, IrError};
use crate::parse_ir::{bio_to_tree, delinearize, SourceQuery, TargetSequence, TargetToken};

/// A malformed input record that was skipped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skip {
    /// 1-based line number where the record starts.
    pub line: usize,
    pub category: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub examples: Vec<Example>,
    pub skipped: Vec<Skip>,
    /// Dangling `I-` tags promoted to `B-` (BIO input only).
    pub repairs: usize,
}

fn read(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })
}

fn category(e: &IrError) -> String {
    match e {
        IrError::MalformedSequence(k) => k.to_string(),
        IrError::InvalidTree(_) => "invalid-tree".into(),
        IrError::InvalidBio(_) => "invalid-bio".into(),
        IrError::InvalidQuery(_) => "invalid-query".into(),
        IrError::BadToken(_) => "bad-token".into(),
    }
}

/// Parses one TOP bracketed parse against the whitespace tokens of the
/// tokenized utterance. Non-bracket parse tokens must match the utterance
/// tokens in order; each becomes a pointer.
pub fn parse_top_line(tokenized: &str, parse: &str) -> Result<Example, String> {
    let query = SourceQuery::from_text(tokenized).map_err(|e| category(&e))?;
    let mut cursor = 0;
    let mut body = Vec::new();
    for piece in parse.split_whitespace() {
        let tok = if piece == "]" {
            TargetToken::Close
        } else if piece.starts_with("[IN:") || piece.starts_with("[SL:") {
            piece.parse().map_err(|e: IrError| category(&e))?
        } else {
            if query.tokens().get(cursor).map(String::as_str) != Some(piece) {
                return Err("token-mismatch".into());
            }
            cursor += 1;
            TargetToken::Pointer(cursor - 1)
        };
        body.push(tok);
    }
    let target = TargetSequence::from_body(body);
    delinearize(&target, &query).map_err(|e| category(&e))?;
    Ok(Example { query, target, language_tag: DEFAULT_LANGUAGE.into() })
}

/// Loads a TOP-style TSV: raw utterance, tokenized utterance, bracketed parse.
pub fn load_top_tsv(path: impl AsRef<Path>) -> Result<LoadReport, CorpusError> {
    let text = read(path.as_ref())?;
    let mut report = LoadReport::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let result = if cols.len() != 3 {
            Err("columns".to_string())
        } else {
            parse_top_line(cols[1], cols[2])
        };
        match result {
            Ok(ex) => report.examples.push(ex),
            Err(category) => report.skipped.push(Skip { line: i + 1, category }),
        }
    }
    Ok(report)
}

/// Loads blank-line separated blocks of `token<TAB>tag` lines, each headed by
/// `# intent=NAME`.
pub fn load_bio(path: impl AsRef<Path>) -> Result<LoadReport, CorpusError> {
    let text = read(path.as_ref())?;
    let mut report = LoadReport::default();
    let mut block: Vec<(usize, &str)> = Vec::new();
    let lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).chain(std::iter::once((0, "")));
    for (no, line) in lines {
        if !line.trim().is_empty() {
            block.push((no, line));
            continue;
        }
        if block.is_empty() {
            continue;
        }
        let start = block[0].0;
        match bio_block(&block) {
            Ok((ex, repairs)) => {
                report.repairs += repairs;
                report.examples.push(ex);
            }
            Err(category) => report.skipped.push(Skip { line: start, category }),
        }
        block.clear();
    }
    Ok(report)
}

fn bio_block(block: &[(usize, &str)]) -> Result<(Example, usize), String> {
    let (_, header) = block[0];
    let intent = header
        .strip_prefix('#')
        .map(str::trim)
        .and_then(|h| h.strip_prefix("intent="))
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| "missing-intent".to_string())?;
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    for (_, line) in &block[1..] {
        let mut cols = line.split('\t');
        match (cols.next(), cols.next(), cols.next()) {
            (Some(tok), Some(tag), None) if !tok.is_empty() => {
                tokens.push(tok);
                tags.push(tag.trim());
            }
            _ => return Err("columns".into()),
        }
    }
    let query = SourceQuery::new(tokens).map_err(|e| category(&e))?;
    let (tree, repairs) = bio_to_tree(intent, &tags, &query).map_err(|e| category(&e))?;
    let ex = Example::from_tree(query, &tree, DEFAULT_LANGUAGE).map_err(|e| category(&e))?;
    Ok((ex, repairs))
}

/// Loads the canonical JSON-lines corpus format.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<LoadReport, CorpusError> {
    let text = read(path.as_ref())?;
    let mut report = LoadReport::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match jsonl_example(line) {
            Ok(ex) => report.examples.push(ex),
            Err(category) => report.skipped.push(Skip { line: i + 1, category }),
        }
    }
    Ok(report)
}

fn jsonl_example(line: &str) -> Result<Example, String> {
    let rec = JsonLine::deserialize(&mut serde_json::Deserializer::from_str(line)).map_err(|_| "json".to_string())?;
    let query = SourceQuery::new(rec.tokens).map_err(|e| category(&e))?;
    let target = TargetSequence::parse_rendering(&rec.target).map_err(|e| category(&e))?;
    delinearize(&target, &query).map_err(|e| category(&e))?;
    Ok(Example { query, target, language_tag: rec.lang.unwrap_or_else(|| DEFAULT_LANGUAGE.into()) })
}
