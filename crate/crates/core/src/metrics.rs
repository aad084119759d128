//! Edit-distance recognition metrics and evaluation reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decode::{decode, DecodeCaps, DecodeTrace, Strategy};
use crate::error::{Error, Result};
use crate::nncore::Model;
use crate::synthdoc::{DatasetSample, Split};
use crate::textcodec::Vocab;

/// Unit-cost edit distance (insertions, deletions, substitutions).
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let above = row[j + 1];
            row[j + 1] = if x == y {
                diag
            } else {
                1 + diag.min(above).min(row[j])
            };
            diag = above;
        }
    }
    row[b.len()]
}

pub fn char_edits(gt: &str, pred: &str) -> usize {
    let a: Vec<char> = gt.chars().collect();
    let b: Vec<char> = pred.chars().collect();
    levenshtein(&a, &b)
}

/// Whitespace tokenization used for word metrics; newline is whitespace and
/// punctuation stays attached to its word.
pub fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

pub fn cer(gt: &str, pred: &str) -> Result<f64> {
    let n = gt.chars().count();
    if n == 0 {
        return Err(Error::UndefinedNormalization);
    }
    Ok(char_edits(gt, pred) as f64 / n as f64)
}

pub fn wer(gt: &str, pred: &str) -> Result<f64> {
    let g = words(gt);
    if g.is_empty() {
        return Err(Error::UndefinedNormalization);
    }
    Ok(levenshtein(&g, &words(pred)) as f64 / g.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub id: String,
    pub cer: f64,
    pub wer: f64,
    pub iterations: usize,
    pub emitted_len: usize,
    pub wall_time: f64,
    pub prediction: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub cer_percent: f64,
    pub wer_percent: f64,
    pub mean_time_s: f64,
    pub mean_iterations: f64,
    pub total_samples: usize,
}

impl Aggregate {
    pub fn from_rows(rows: &[SampleRow]) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = |f: fn(&SampleRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Self {
            cer_percent: 100.0 * mean(|r| r.cer),
            wer_percent: 100.0 * mean(|r| r.wer),
            mean_time_s: mean(|r| r.wall_time),
            mean_iterations: mean(|r| r.iterations as f64),
            total_samples: rows.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// How metrics are averaged and tokenized.
    pub header: ReportHeader,
    pub strategy: String,
    pub per_sample: Vec<SampleRow>,
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub averaging: String,
    pub wer_tokenization: String,
}

impl Default for ReportHeader {
    fn default() -> Self {
        Self {
            averaging: "macro: per-sample rates averaged over samples".into(),
            wer_tokenization: "split on Unicode whitespace (incl. newline), punctuation attached"
                .into(),
        }
    }
}

impl EvalReport {
    pub fn from_rows(strategy: &Strategy, per_sample: Vec<SampleRow>) -> Self {
        let aggregate = Aggregate::from_rows(&per_sample);
        Self {
            header: ReportHeader::default(),
            strategy: strategy.to_string(),
            per_sample,
            aggregate,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,cer,wer,iterations,emitted_len,wall_time\n");
        for r in &self.per_sample {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.id, r.cer, r.wer, r.iterations, r.emitted_len, r.wall_time
            ));
        }
        out
    }
}

/// Checks that every ground-truth character is covered by the model vocabulary.
pub fn check_alphabet<'a>(vocab: &Vocab, texts: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let mut missing = std::collections::BTreeSet::new();
    for t in texts {
        missing.extend(vocab.missing_chars(t));
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::VocabMismatch(format!(
            "dataset characters {missing:?} are not in the checkpoint alphabet"
        )))
    }
}

pub fn row_from_trace(
    id: &str,
    gt: &str,
    prediction: String,
    trace: &DecodeTrace,
) -> Result<SampleRow> {
    Ok(SampleRow {
        id: id.to_string(),
        cer: cer(gt, &prediction)?,
        wer: wer(gt, &prediction)?,
        iterations: trace.iterations,
        emitted_len: trace.emitted.len(),
        wall_time: trace.wall_time,
        prediction,
    })
}

/// Decodes every sample of `split` one at a time and scores it.
pub fn evaluate(
    model: &Model<f32>,
    vocab: &Vocab,
    samples: &[DatasetSample],
    split: Option<Split>,
    strategy: &Strategy,
    caps: &DecodeCaps,
    dataset_dir: &Path,
) -> Result<EvalReport> {
    evaluate_jobs(model, vocab, samples, split, strategy, caps, dataset_dir, 1)
}

/// [`evaluate`] spread over `jobs` worker threads; each sample is still
/// decoded alone and rows keep the sample order.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_jobs(
    model: &Model<f32>,
    vocab: &Vocab,
    samples: &[DatasetSample],
    split: Option<Split>,
    strategy: &Strategy,
    caps: &DecodeCaps,
    dataset_dir: &Path,
    jobs: usize,
) -> Result<EvalReport> {
    let selected: Vec<&DatasetSample> = samples
        .iter()
        .filter(|s| split.is_none_or(|sp| s.split == sp))
        .collect();
    check_alphabet(vocab, selected.iter().map(|s| s.text.as_str()))?;
    let one = |s: &DatasetSample| -> Result<SampleRow> {
        let image = s.load_image(dataset_dir)?;
        let trace = decode(model, &image, strategy, caps)?;
        let prediction = vocab.decode(&trace.emitted)?;
        row_from_trace(&s.file, &s.text, prediction, &trace)
    };
    let jobs = jobs.clamp(1, selected.len().max(1));
    let rows: Vec<SampleRow> = if jobs == 1 {
        selected.iter().map(|s| one(s)).collect::<Result<_>>()?
    } else {
        let chunk = selected.len().div_ceil(jobs);
        let parts: Vec<Result<Vec<SampleRow>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = selected
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || part.iter().map(|s| one(s)).collect::<Result<Vec<_>>>())
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        });
        let mut rows = Vec::with_capacity(selected.len());
        for p in parts {
            rows.extend(p?);
        }
        rows
    };
    Ok(EvalReport::from_rows(strategy, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn levenshtein_examples() {
        assert_eq!(char_edits("abc", "abc"), 0);
        assert_eq!(char_edits("", "ab"), 2);
        assert_eq!(char_edits("ab", ""), 2);
        assert_eq!(char_edits("kitten", "sitting"), 3);
    }

    #[test]
    fn cer_wer_examples() {
        assert_eq!(cer("abcd", "abed").unwrap(), 0.25);
        assert_eq!(wer("a b", "a b").unwrap(), 0.0);
        assert_eq!(wer("a b", "a c").unwrap(), 0.5);
        assert_eq!(wer("a\nb", "a b").unwrap(), 0.0);
        assert!(matches!(cer("", "x"), Err(Error::UndefinedNormalization)));
        assert!(matches!(
            wer(" \n", "x"),
            Err(Error::UndefinedNormalization)
        ));
    }

    #[test]
    fn aggregate_is_mean_of_rows() {
        let rows: Vec<SampleRow> = (0..7)
            .map(|i| SampleRow {
                id: i.to_string(),
                cer: i as f64 * 0.1,
                wer: 0.3,
                iterations: i,
                emitted_len: 3,
                wall_time: 0.5,
                prediction: String::new(),
            })
            .collect();
        let a = Aggregate::from_rows(&rows);
        assert!((a.cer_percent - 30.0).abs() < 1e-12);
        assert!((a.mean_iterations - 3.0).abs() < 1e-12);
        assert_eq!(a.total_samples, 7);
    }

    proptest! {
        #[test]
        fn symmetric_and_triangle(a in "[abc]{0,12}", b in "[abc]{0,12}", c in "[abc]{0,12}") {
            let ab = char_edits(&a, &b);
            prop_assert_eq!(ab, char_edits(&b, &a));
            prop_assert!(char_edits(&a, &c) <= ab + char_edits(&b, &c));
        }

        #[test]
        fn cer_identity_and_empty(gt in "[a-z ]{1,30}") {
            prop_assert_eq!(cer(&gt, &gt).unwrap(), 0.0);
            prop_assert_eq!(cer(&gt, "").unwrap(), 1.0);
        }
    }
}
