use std::path::Path;

use log::warn;

use super::vocab::{VocabMode, Vocabulary};
use super::read_text;
use crate::error::{Error, Result};

/// A passage whose final word is the prediction target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LambadaItem {
    pub context: Vec<usize>,
    pub target: usize,
    /// The target word was out of vocabulary and maps to `<unk>`.
    pub target_oov: bool,
    /// Named-entity flag from the annotation file, when one was given.
    pub entity: Option<bool>,
}

/// Parses one passage per line. Annotation text, when present, holds one
/// `0`/`1` per passage line, matched by line index.
pub fn parse_lambada_items(text: &str, vocab: &Vocabulary, annotations: Option<&str>) -> Result<Vec<LambadaItem>> {
    if vocab.mode() != VocabMode::Word {
        return Err(Error::Config("target-word items need a word vocabulary".into()));
    }
    let records: Vec<&str> = text.lines().collect();
    let flags = match annotations {
        None => None,
        Some(a) => {
            let lines: Vec<&str> = a.lines().collect();
            if lines.len() != records.len() {
                return Err(Error::Data(format!(
                    "annotation file has {} lines for {} passages",
                    lines.len(),
                    records.len()
                )));
            }
            let parsed = lines
                .iter()
                .enumerate()
                .map(|(i, l)| match l.trim() {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    other => Err(Error::Data(format!("annotation line {}: expected 0 or 1, got {other:?}", i + 1))),
                })
                .collect::<Result<Vec<bool>>>()?;
            Some(parsed)
        }
    };
    let mut items = Vec::with_capacity(records.len());
    for (i, line) in records.iter().enumerate() {
        let words: Vec<&str> = line.split_whitespace().collect();
        let Some((last, rest)) = words.split_last() else {
            warn!("passage {} is empty; skipped", i + 1);
            continue;
        };
        if rest.is_empty() {
            warn!("passage {} has no context; skipped", i + 1);
            continue;
        }
        let context = rest.iter().map(|w| vocab.lookup(w)).collect::<Result<Vec<_>>>()?;
        let target_oov = vocab.id(last).is_none();
        items.push(LambadaItem {
            context,
            target: vocab.lookup(last)?,
            target_oov,
            entity: flags.as_ref().map(|f| f[i]),
        });
    }
    Ok(items)
}

pub fn load_lambada_items(path: &Path, vocab: &Vocabulary, annotations: Option<&Path>) -> Result<Vec<LambadaItem>> {
    let text = read_text(path)?;
    let ann = annotations.map(read_text).transpose()?;
    parse_lambada_items(&text, vocab, ann.as_deref())
}
