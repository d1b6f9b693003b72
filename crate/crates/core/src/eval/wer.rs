//! Word error rate and the summary statistics reported over utterance sets.

use serde::{Deserialize, Serialize};

use super::EvalError;

/// Lowercased word tokens with surrounding punctuation removed. Apostrophes
/// inside words are kept.
pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .chars()
                .filter(|c| c.is_alphanumeric() || *c == '\'')
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Minimum number of substitutions, insertions and deletions turning `a`
/// into `b`.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let next = (diag + usize::from(x != y)).min(row[j] + 1).min(row[j + 1] + 1);
            diag = row[j + 1];
            row[j + 1] = next;
        }
    }
    row[b.len()]
}

/// Edit distance over reference length. Can exceed 1 when the hypothesis
/// has many insertions.
pub fn wer_tokens<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// WER between two transcripts after [`normalize`].
pub fn wer(reference: &str, hypothesis: &str) -> Result<f64, EvalError> {
    wer_tokens(&normalize(reference), &normalize(hypothesis))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WerStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub median: f64,
    /// Mean of the smallest `ceil(0.75 n)` values.
    pub p75_mean: f64,
    pub count: usize,
}

pub fn wer_stats(values: &[f64]) -> Result<WerStats, EvalError> {
    if values.is_empty() {
        return Err(EvalError::EmptyInput("wer values"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let k = (3 * n).div_ceil(4);
    let p75_mean = sorted[..k].iter().sum::<f64>() / k as f64;
    Ok(WerStats {
        mean,
        std: var.sqrt(),
        median,
        p75_mean,
        count: n,
    })
}
