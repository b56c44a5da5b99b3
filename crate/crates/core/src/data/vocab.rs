use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const EOS_ID: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VocabMode {
    /// Whitespace-separated words with `<eos>` after each line.
    Word,
    /// Unicode scalar values, newlines included.
    Char,
}

impl VocabMode {
    pub fn as_str(self) -> &'static str {
        match self {
            VocabMode::Word => "word",
            VocabMode::Char => "char",
        }
    }
}

impl fmt::Display for VocabMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VocabMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(VocabMode::Word),
            "char" => Ok(VocabMode::Char),
            other => Err(Error::Config(format!("unknown vocab mode {other:?} (expected word|char)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VocabLimit {
    None,
    /// Keep the `k` most frequent non-special tokens.
    TopK(usize),
    /// Keep tokens seen at least this many times.
    MinFreq(u64),
}

/// Dense token ↔ id mapping. Specials come first, then tokens by
/// descending frequency with lexicographic tie-breaking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    mode: VocabMode,
}

fn tokens_of(text: &str, mode: VocabMode) -> Box<dyn Iterator<Item = &str> + '_> {
    match mode {
        VocabMode::Word => Box::new(text.split_whitespace()),
        VocabMode::Char => Box::new(text.char_indices().map(move |(i, c)| &text[i..i + c.len_utf8()])),
    }
}

impl Vocabulary {
    pub fn build(text: &str, mode: VocabMode, limit: VocabLimit) -> Result<Vocabulary> {
        let specials = Self::specials(mode);
        let mut counts: HashMap<&str, u64> = HashMap::new();
        let mut seen_any = false;
        for tok in tokens_of(text, mode) {
            seen_any = true;
            if !specials.contains(&tok) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if !seen_any {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        match limit {
            VocabLimit::None => {}
            VocabLimit::TopK(k) => ranked.truncate(k),
            VocabLimit::MinFreq(m) => ranked.retain(|&(_, c)| c >= m),
        }
        let tokens = specials
            .iter()
            .copied()
            .chain(ranked.into_iter().map(|(t, _)| t))
            .map(str::to_string)
            .collect();
        Vocabulary::from_tokens(tokens, mode)
    }

    fn specials(mode: VocabMode) -> &'static [&'static str] {
        match mode {
            VocabMode::Word => &[PAD, UNK, EOS],
            VocabMode::Char => &[PAD],
        }
    }

    fn from_tokens(tokens: Vec<String>, mode: VocabMode) -> Result<Vocabulary> {
        let specials = Self::specials(mode);
        if tokens.len() < specials.len() || tokens.iter().zip(specials).any(|(t, s)| t != s) {
            return Err(Error::Data(format!("vocabulary must start with {specials:?}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index, mode })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mode(&self) -> VocabMode {
        self.mode
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn unk_id(&self) -> Option<usize> {
        (self.mode == VocabMode::Word).then_some(UNK_ID)
    }

    pub fn eos_id(&self) -> Option<usize> {
        (self.mode == VocabMode::Word).then_some(EOS_ID)
    }

    /// Id of a single token; out-of-vocabulary words map to `<unk>`.
    /// Character vocabularies have no `<unk>`, so unseen characters are an
    /// error.
    pub fn lookup(&self, token: &str) -> Result<usize> {
        match (self.id(token), self.mode) {
            (Some(id), _) => Ok(id),
            (None, VocabMode::Word) => Ok(UNK_ID),
            (None, VocabMode::Char) => Err(Error::Data(format!("character {token:?} is not in the vocabulary"))),
        }
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<&str>> {
        ids.iter()
            .map(|&id| {
                self.token(id).ok_or(Error::Index {
                    op: "decode",
                    index: id,
                    bound: self.len(),
                })
            })
            .collect()
    }

    /// One token per line; line number is the id. Newlines, carriage
    /// returns and backslashes are escaped so character vocabularies survive.
    pub fn export(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            for c in t.chars() {
                match c {
                    '\\' => out.push_str("\\\\"),
                    '\n' => out.push_str("\\n"),
                    '\r' => out.push_str("\\r"),
                    c => out.push(c),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn import(text: &str) -> Result<Vocabulary> {
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let mut tok = String::with_capacity(line.len());
            let mut chars = line.chars();
            while let Some(c) = chars.next() {
                if c != '\\' {
                    tok.push(c);
                    continue;
                }
                match chars.next() {
                    Some('\\') => tok.push('\\'),
                    Some('n') => tok.push('\n'),
                    Some('r') => tok.push('\r'),
                    other => {
                        return Err(Error::Data(format!(
                            "vocabulary line {}: bad escape \\{}",
                            n + 1,
                            other.map(String::from).unwrap_or_default()
                        )))
                    }
                }
            }
            tokens.push(tok);
        }
        let word = tokens.len() >= 3 && tokens[1] == UNK && tokens[2] == EOS;
        Vocabulary::from_tokens(tokens, if word { VocabMode::Word } else { VocabMode::Char })
    }
}

/// Encodes `text` line by line: word mode appends `<eos>` after each line;
/// char mode maps every character, newlines included.
pub fn encode_corpus(text: &str, vocab: &Vocabulary) -> Result<Vec<usize>> {
    match vocab.mode() {
        VocabMode::Word => {
            let mut ids = Vec::new();
            for line in text.lines() {
                for w in line.split_whitespace() {
                    ids.push(vocab.lookup(w)?);
                }
                ids.push(EOS_ID);
            }
            Ok(ids)
        }
        VocabMode::Char => tokens_of(text, VocabMode::Char).map(|c| vocab.lookup(c)).collect(),
    }
}

/// Training-split counts per id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenFrequencyTable {
    counts: Vec<u64>,
}

impl TokenFrequencyTable {
    pub fn from_ids(ids: &[usize], vocab_size: usize) -> Result<TokenFrequencyTable> {
        let mut counts = vec![0u64; vocab_size];
        for &id in ids {
            *counts.get_mut(id).ok_or(Error::Index {
                op: "token_frequency_table",
                index: id,
                bound: vocab_size,
            })? += 1;
        }
        Ok(TokenFrequencyTable { counts })
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts.get(id).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }
}
