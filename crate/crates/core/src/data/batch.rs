use crate::error::{Error, Result};

/// One step of contiguous LM batching: row-major `[batch × seq_len]` ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
}

/// The split is cut into `batch_size` equal contiguous segments (the
/// remainder is dropped) and step `i` reads positions
/// `[i·seq_len, (i+1)·seq_len)` of every segment, targets shifted by one.
/// A final shorter step covers what is left of each segment.
#[derive(Debug, Clone)]
pub struct BatchStream<'a> {
    ids: &'a [usize],
    batch_size: usize,
    seq_len: usize,
    segment_len: usize,
    cursor: usize,
}

pub fn contiguous_batches(ids: &[usize], batch_size: usize, seq_len: usize) -> Result<BatchStream<'_>> {
    if batch_size == 0 || seq_len == 0 {
        return Err(Error::Config("batch_size and seq_len must be positive".into()));
    }
    let need = batch_size * (seq_len + 1);
    if ids.len() < need {
        return Err(Error::Data(format!(
            "split has {} tokens; batch_size {batch_size} with seq_len {seq_len} needs at least {need}",
            ids.len()
        )));
    }
    Ok(BatchStream {
        ids,
        batch_size,
        seq_len,
        segment_len: ids.len() / batch_size,
        cursor: 0,
    })
}

impl BatchStream<'_> {
    /// Steps per pass over the split.
    pub fn steps_per_epoch(&self) -> usize {
        (self.segment_len - 1).div_ceil(self.seq_len)
    }

    pub fn segment_len(&self) -> usize {
        self.segment_len
    }

    /// Step `i mod steps_per_epoch`, independent of the cursor.
    pub fn batch(&self, i: usize) -> Batch {
        let i = i % self.steps_per_epoch();
        let start = i * self.seq_len;
        let len = self.seq_len.min(self.segment_len - 1 - start);
        let mut inputs = Vec::with_capacity(self.batch_size * len);
        let mut targets = Vec::with_capacity(self.batch_size * len);
        for s in 0..self.batch_size {
            let base = s * self.segment_len + start;
            inputs.extend_from_slice(&self.ids[base..base + len]);
            targets.extend_from_slice(&self.ids[base + 1..base + 1 + len]);
        }
        Batch {
            inputs,
            targets,
            batch_size: self.batch_size,
            seq_len: len,
        }
    }

    pub fn reset(&mut self) {
        self.cursor = 0;
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.steps_per_epoch() {
            return None;
        }
        self.cursor += 1;
        Some(self.batch(self.cursor - 1))
    }
}
