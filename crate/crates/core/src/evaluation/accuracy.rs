use std::fmt;

use log::info;
use rayon::prelude::*;

use super::Scorer;
use crate::data::{LambadaItem, TokenFrequencyTable};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Bucket {
    All,
    ContextFrequent,
    LowFrequency,
    Entity,
}

impl Bucket {
    pub const ALL: [Bucket; 4] = [Bucket::All, Bucket::ContextFrequent, Bucket::LowFrequency, Bucket::Entity];

    pub fn as_str(self) -> &'static str {
        match self {
            Bucket::All => "all",
            Bucket::ContextFrequent => "CF",
            Bucket::LowFrequency => "LF",
            Bucket::Entity => "Ent",
        }
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BucketFlags {
    pub context_frequent: bool,
    pub low_frequency: bool,
    pub entity: bool,
}

impl BucketFlags {
    pub fn contains(&self, bucket: Bucket) -> bool {
        match bucket {
            Bucket::All => true,
            Bucket::ContextFrequent => self.context_frequent,
            Bucket::LowFrequency => self.low_frequency,
            Bucket::Entity => self.entity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BucketStats {
    pub bucket: Bucket,
    pub count: usize,
    pub correct: usize,
}

impl BucketStats {
    /// `None` for an empty bucket.
    pub fn accuracy(&self) -> Option<f64> {
        (self.count > 0).then(|| self.correct as f64 / self.count as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryReport {
    pub buckets: Vec<BucketStats>,
}

impl CategoryReport {
    pub fn get(&self, bucket: Bucket) -> Option<&BucketStats> {
        self.buckets.iter().find(|b| b.bucket == bucket)
    }

    /// Columns `bucket`, `count`, `accuracy`; empty buckets print `NA`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("bucket\tcount\taccuracy\n");
        for b in &self.buckets {
            let acc = b.accuracy().map_or("NA".to_string(), |a| a.to_string());
            out.push_str(&format!("{}\t{}\t{acc}\n", b.bucket, b.count));
        }
        out
    }
}

/// First index of the maximum; NaN never wins.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax prediction at the final context position of each item. Contexts
/// longer than `max_context` keep their most recent `max_context` tokens.
pub fn predict_targets<S: Scorer>(scorer: &S, items: &[LambadaItem], max_context: usize) -> Result<Vec<usize>> {
    if items.is_empty() {
        return Err(Error::Data("no target-word items to evaluate".into()));
    }
    if max_context == 0 {
        return Err(Error::Config("max_context must be positive".into()));
    }
    let truncated = items.iter().filter(|i| i.context.len() > max_context).count();
    if truncated > 0 {
        info!("truncated {truncated} of {} contexts to the last {max_context} tokens", items.len());
    }
    let v = scorer.vocab_size();
    items
        .par_iter()
        .enumerate()
        .map(|(n, item)| {
            if item.context.is_empty() {
                return Err(Error::Data(format!("item {n} has an empty context")));
            }
            let ctx = &item.context[item.context.len().saturating_sub(max_context)..];
            let rows = scorer.log_prob_rows(ctx)?;
            Ok(argmax(&rows[(ctx.len() - 1) * v..ctx.len() * v]))
        })
        .collect()
}

fn is_correct(item: &LambadaItem, prediction: usize) -> bool {
    // an out-of-vocabulary target is never credited, even for predicting <unk>
    !item.target_oov && prediction == item.target
}

/// Accuracy over all items (the `all` bucket only).
pub fn target_word_accuracy<S: Scorer>(scorer: &S, items: &[LambadaItem], max_context: usize) -> Result<CategoryReport> {
    let predictions = predict_targets(scorer, items, max_context)?;
    let correct = items.iter().zip(&predictions).filter(|(i, &p)| is_correct(i, p)).count();
    Ok(CategoryReport {
        buckets: vec![BucketStats {
            bucket: Bucket::All,
            count: items.len(),
            correct,
        }],
    })
}

/// Bucket membership. CF: target occurs more than `cf_threshold` times in
/// the context. LF: training-split frequency below `lf_threshold`. Ent: the
/// annotation flag.
pub fn categorize_targets(
    items: &[LambadaItem],
    freq: &TokenFrequencyTable,
    cf_threshold: usize,
    lf_threshold: u64,
) -> Vec<BucketFlags> {
    items
        .iter()
        .map(|item| BucketFlags {
            context_frequent: item.context.iter().filter(|&&t| t == item.target).count() > cf_threshold,
            low_frequency: freq.count(item.target) < lf_threshold,
            entity: item.entity == Some(true),
        })
        .collect()
}

/// Per-bucket accuracy from precomputed predictions.
pub fn category_report(items: &[LambadaItem], predictions: &[usize], flags: &[BucketFlags]) -> Result<CategoryReport> {
    if items.len() != predictions.len() || items.len() != flags.len() {
        return Err(Error::shape("category_report", &[items.len(), predictions.len()], &[flags.len()]));
    }
    let buckets = Bucket::ALL
        .iter()
        .map(|&bucket| {
            let mut stats = BucketStats {
                bucket,
                count: 0,
                correct: 0,
            };
            for ((item, &p), f) in items.iter().zip(predictions).zip(flags) {
                if f.contains(bucket) {
                    stats.count += 1;
                    stats.correct += usize::from(is_correct(item, p));
                }
            }
            stats
        })
        .collect();
    Ok(CategoryReport { buckets })
}
