//! Vocabulary construction, encoding, contiguous batching and passage
//! loading.

mod batch;
mod lambada;
mod vocab;

pub use batch::{contiguous_batches, Batch, BatchStream};
pub use lambada::{load_lambada_items, parse_lambada_items, LambadaItem};
pub use vocab::{
    encode_corpus, TokenFrequencyTable, VocabLimit, VocabMode, Vocabulary, EOS, EOS_ID, PAD, PAD_ID, UNK, UNK_ID,
};

use std::path::Path;

use crate::error::{Error, Result};

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Encoded train/valid/test streams sharing one vocabulary.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl Corpus {
    /// Builds the vocabulary from the training text (all three texts in
    /// char mode, which has no `<unk>`) and encodes every split.
    pub fn from_texts(train: &str, valid: &str, test: &str, mode: VocabMode, limit: VocabLimit) -> Result<Corpus> {
        let vocab = match mode {
            VocabMode::Word => Vocabulary::build(train, mode, limit)?,
            VocabMode::Char => Vocabulary::build(&[train, valid, test].concat(), mode, limit)?,
        };
        Ok(Corpus {
            train: encode_corpus(train, &vocab)?,
            valid: encode_corpus(valid, &vocab)?,
            test: encode_corpus(test, &vocab)?,
            vocab,
        })
    }

    pub fn frequencies(&self) -> Result<TokenFrequencyTable> {
        TokenFrequencyTable::from_ids(&self.train, self.vocab.len())
    }
}
