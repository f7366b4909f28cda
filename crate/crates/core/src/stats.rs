use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::domain::{ExpressionRecord, ScaleClass};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub expression_count: usize,
    pub image_count: usize,
    pub instance_count: usize,
    pub avg_targets_per_expression: f64,
    pub avg_words_per_expression: f64,
    pub scale_histogram: BTreeMap<ScaleClass, usize>,
    pub count_histogram: BTreeMap<usize, usize>,
}

/// Summary statistics over a ground-truth set. Words are whitespace tokens.
pub fn compute_stats(records: &[ExpressionRecord]) -> Result<DatasetStats> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let images: HashSet<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
    let mut scale_histogram: BTreeMap<ScaleClass, usize> = ScaleClass::ALL.iter().map(|&c| (c, 0)).collect();
    let mut count_histogram = BTreeMap::new();
    let mut instance_count = 0;
    let mut words = 0;
    for r in records {
        instance_count += r.targets.len();
        words += r.word_count();
        *count_histogram.entry(r.targets.len()).or_insert(0) += 1;
        for t in &r.targets {
            *scale_histogram.entry(t.bbox.scale_class()).or_insert(0) += 1;
        }
    }
    let n = records.len() as f64;
    Ok(DatasetStats {
        expression_count: records.len(),
        image_count: images.len(),
        instance_count,
        avg_targets_per_expression: instance_count as f64 / n,
        avg_words_per_expression: words as f64 / n,
        scale_histogram,
        count_histogram,
    })
}
