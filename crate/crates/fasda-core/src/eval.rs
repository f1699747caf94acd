//! Recognition metrics and evaluation reports.
//!
//! Character accuracy counts how many ground-truth characters survive a
//! minimum-edit-distance alignment between the prediction and the truth.
//! The alignment uses unit insert/delete/substitute costs; when several
//! transitions reach a cell at the same cost, the tie breaks preferring
//! match, then substitute, then delete (dropping a predicted character),
//! then insert (admitting a missed one), which makes the count a pure
//! function of the two strings.

use std::thread;

use thiserror::Error;

use crate::config::ModelConfig;
use crate::data::Dataset;
use crate::decoder::{decode_greedy, decode_label};
use crate::encoder::{encode, image_tensor};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("char_acc requires a non-empty ground truth")]
    EmptyGroundTruth,
    #[error("sequence_accuracy: {preds} predictions vs {gts} ground truths")]
    LengthMismatch { preds: usize, gts: usize },
    #[error("cannot evaluate an empty dataset")]
    EmptyDataset,
    #[error("dataset does not fit the model: {0}")]
    Geometry(String),
    #[error("probe needs at least {need} examples per class, got {got}")]
    ProbeTooSmall { need: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Matched characters in the tie-broken minimum-edit alignment.
pub fn char_matches(pred: &str, gt: &str) -> usize {
    let p: Vec<char> = pred.chars().collect();
    let g: Vec<char> = gt.chars().collect();
    let (n, m) = (p.len(), g.len());
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    let mut dist = vec![0usize; (n + 1) * (m + 1)];
    let mut matched = vec![0usize; (n + 1) * (m + 1)];
    for i in 0..=n {
        dist[idx(i, 0)] = i;
    }
    for j in 0..=m {
        dist[idx(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let eq = p[i - 1] == g[j - 1];
            let diag = dist[idx(i - 1, j - 1)] + usize::from(!eq);
            let del = dist[idx(i - 1, j)] + 1;
            let ins = dist[idx(i, j - 1)] + 1;
            let best = diag.min(del).min(ins);
            dist[idx(i, j)] = best;
            matched[idx(i, j)] = if diag == best {
                matched[idx(i - 1, j - 1)] + usize::from(eq)
            } else if del == best {
                matched[idx(i - 1, j)]
            } else {
                matched[idx(i, j - 1)]
            };
        }
    }
    matched[idx(n, m)]
}

/// Matched characters divided by ground-truth length.
pub fn char_acc(pred: &str, gt: &str) -> Result<f64, EvalError> {
    let len = gt.chars().count();
    if len == 0 {
        return Err(EvalError::EmptyGroundTruth);
    }
    Ok(char_matches(pred, gt) as f64 / len as f64)
}

/// Fraction of exact string matches.
pub fn sequence_accuracy<S: AsRef<str>, T: AsRef<str>>(
    preds: &[S],
    gts: &[T],
) -> Result<f64, EvalError> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            gts: gts.len(),
        });
    }
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, g)| p.as_ref() == g.as_ref())
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// One evaluated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub ground_truth: String,
    pub predicted: String,
    pub matched: usize,
    pub char_acc: f64,
    pub correct: bool,
}

/// Dataset-level evaluation result.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub dataset: String,
    pub n: usize,
    pub sequence_accuracy: f64,
    /// Mean of per-sample matched/|gt| ratios (the headline number).
    pub char_acc: f64,
    /// Total matches over total ground-truth characters (the alternate
    /// aggregation; exposed because corpus-level pooling weights long
    /// labels more).
    pub char_acc_total: f64,
    pub records: Vec<SampleRecord>,
}

impl EvalReport {
    /// One header line then one line per sample.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("id\tground_truth\tpredicted\tmatched\tchar_acc\tcorrect\n");
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{:?}\t{}\n",
                r.id, r.ground_truth, r.predicted, r.matched, r.char_acc, r.correct as u8
            ));
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "dataset            {}\n\
             samples            {}\n\
             sequence accuracy  {:.4}\n\
             char accuracy      {:.4} (mean of per-sample ratios)\n\
             char accuracy      {:.4} (pooled over all characters)\n",
            self.dataset, self.n, self.sequence_accuracy, self.char_acc, self.char_acc_total
        )
    }
}

/// Reject datasets whose rendering geometry or alphabet disagrees with the
/// model configuration.
pub fn check_geometry(cfg: &ModelConfig, data: &Dataset) -> Result<(), EvalError> {
    let meta = &data.meta;
    if meta.height != cfg.height {
        return Err(EvalError::Geometry(format!(
            "image height {} vs configured {}",
            meta.height, cfg.height
        )));
    }
    if meta.glyph_width != cfg.glyph_width {
        return Err(EvalError::Geometry(format!(
            "glyph width {} vs configured {}",
            meta.glyph_width, cfg.glyph_width
        )));
    }
    if meta.alphabet != cfg.alphabet {
        return Err(EvalError::Geometry(format!(
            "alphabet {:?} vs configured {:?}",
            meta.alphabet, cfg.alphabet
        )));
    }
    Ok(())
}

fn eval_one<F: Scalar>(
    cfg: &ModelConfig,
    params: &ParamSet<F>,
    id: &str,
    label: &str,
    image: &crate::data::Image,
) -> Result<SampleRecord, EvalError> {
    let features = encode(cfg, params, &image_tensor(image))?;
    let decoded = decode_greedy(cfg, params, &features, cfg.max_len)?;
    let predicted = decode_label(cfg, &decoded.indices);
    let matched = char_matches(&predicted, label);
    Ok(SampleRecord {
        id: id.to_string(),
        ground_truth: label.to_string(),
        predicted: predicted.clone(),
        matched,
        char_acc: char_acc(&predicted, label)?,
        correct: predicted == label,
    })
}

/// Greedy-decode every sample and aggregate both metrics. With
/// `threads > 1` samples are split into contiguous chunks, each worker
/// rebuilds the parameters from a plain snapshot, and records merge back in
/// dataset order, so the report does not depend on the thread count.
pub fn evaluate<F: Scalar>(
    cfg: &ModelConfig,
    params: &ParamSet<F>,
    data: &Dataset,
    threads: usize,
) -> Result<EvalReport, EvalError> {
    if data.samples.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    check_geometry(cfg, data)?;

    let records: Vec<SampleRecord> = if threads <= 1 {
        data.samples
            .iter()
            .map(|s| eval_one(cfg, params, &s.id, &s.label, &s.image))
            .collect::<Result<_, _>>()?
    } else {
        let raw = params.to_raw();
        let chunk = data.samples.len().div_ceil(threads);
        let results: Vec<Result<Vec<SampleRecord>, EvalError>> = thread::scope(|scope| {
            let handles: Vec<_> = data
                .samples
                .chunks(chunk)
                .map(|samples| {
                    let raw = &raw;
                    scope.spawn(move || {
                        let local = ParamSet::from_raw(raw);
                        samples
                            .iter()
                            .map(|s| eval_one(cfg, &local, &s.id, &s.label, &s.image))
                            .collect()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("eval worker panicked"))
                .collect()
        });
        let mut merged = Vec::with_capacity(data.samples.len());
        for r in results {
            merged.extend(r?);
        }
        merged
    };

    let n = records.len();
    let total_chars: usize = records.iter().map(|r| r.ground_truth.chars().count()).sum();
    let total_matched: usize = records.iter().map(|r| r.matched).sum();
    Ok(EvalReport {
        dataset: data.meta.domain_name.clone(),
        n,
        sequence_accuracy: records.iter().filter(|r| r.correct).count() as f64 / n as f64,
        char_acc: records.iter().map(|r| r.char_acc).sum::<f64>() / n as f64,
        char_acc_total: total_matched as f64 / total_chars as f64,
        records,
    })
}

/// Held-out accuracy of a logistic-regression probe separating two feature
/// clouds. Even indices train the probe, odd indices score it; training is
/// full-batch gradient descent from zero weights on standardized features,
/// so the result is a deterministic function of the inputs. Near 1.0 the
/// clouds are linearly separable; near 0.5 they are indistinguishable.
pub fn linear_probe_accuracy(class_a: &[Vec<f64>], class_b: &[Vec<f64>]) -> Result<f64, EvalError> {
    let need = 2;
    for c in [class_a, class_b] {
        if c.len() < need {
            return Err(EvalError::ProbeTooSmall { need, got: c.len() });
        }
    }
    let dim = class_a[0].len();
    let split = |c: &[Vec<f64>]| -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let train = c.iter().step_by(2).cloned().collect();
        let held = c.iter().skip(1).step_by(2).cloned().collect();
        (train, held)
    };
    let (train_a, held_a) = split(class_a);
    let (train_b, held_b) = split(class_b);

    let mut mean = vec![0.0; dim];
    let mut var = vec![0.0; dim];
    let n_train = (train_a.len() + train_b.len()) as f64;
    for x in train_a.iter().chain(&train_b) {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n_train;
        }
    }
    for x in train_a.iter().chain(&train_b) {
        for ((s, m), v) in var.iter_mut().zip(&mean).zip(x) {
            *s += (v - m) * (v - m) / n_train;
        }
    }
    let scale: Vec<f64> = var.iter().map(|v| 1.0 / v.sqrt().max(1e-6)).collect();
    let std = |x: &[f64]| -> Vec<f64> {
        x.iter()
            .zip(&mean)
            .zip(&scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    };

    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let lr = 0.5;
    for _ in 0..300 {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (x, y) in train_a
            .iter()
            .map(|x| (x, 0.0))
            .chain(train_b.iter().map(|x| (x, 1.0)))
        {
            let x = std(x);
            let z: f64 = w.iter().zip(&x).map(|(wi, xi)| wi * xi).sum::<f64>() + b;
            let p = 1.0 / (1.0 + (-z).exp());
            let err = (p - y) / n_train;
            for (g, xi) in gw.iter_mut().zip(&x) {
                *g += err * xi;
            }
            gb += err;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= lr * g;
        }
        b -= lr * gb;
    }

    let mut hits = 0usize;
    let mut total = 0usize;
    for (x, y) in held_a
        .iter()
        .map(|x| (x, false))
        .chain(held_b.iter().map(|x| (x, true)))
    {
        let x = std(x);
        let z: f64 = w.iter().zip(&x).map(|(wi, xi)| wi * xi).sum::<f64>() + b;
        if (z > 0.0) == y {
            hits += 1;
        }
        total += 1;
    }
    if total == 0 {
        return Err(EvalError::ProbeTooSmall { need, got: 1 });
    }
    Ok(hits as f64 / total as f64)
}
