//! Character-feature pair construction for the domain discriminator.
//!
//! Given the per-character features of one source strip and one target
//! strip, every ordered source-source combination and every source-target
//! combination becomes a pair, split four ways by domain composition and
//! character identity:
//!
//! - group 0: source-source, same character (self-pairs included)
//! - group 1: source-target, same character
//! - group 2: source-source, different characters
//! - group 3: source-target, different characters
//!
//! With `l` source characters and `l'` target characters this yields
//! exactly `l*l` within-source pairs (groups 0 and 2 together) and `l*l'`
//! cross-domain pairs (groups 1 and 3 together).

use crate::config::ModelConfig;
use crate::data::Sample;
use crate::decoder::{decode_teacher_forced, encode_label, CharFeature};
use crate::encoder::{encode, image_tensor};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

pub const NUM_GROUPS: usize = 4;

/// Group indices, also the discriminator's class indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairGroup {
    SourceSame = 0,
    CrossSame = 1,
    SourceDiff = 2,
    CrossDiff = 3,
}

impl PairGroup {
    pub fn index(self) -> usize {
        self as usize
    }

    /// The within-source group a cross-domain group should be mistaken for
    /// when the recognizer tries to fool the discriminator.
    pub fn confusion_target(self) -> Option<PairGroup> {
        match self {
            PairGroup::CrossSame => Some(PairGroup::SourceSame),
            PairGroup::CrossDiff => Some(PairGroup::SourceDiff),
            _ => None,
        }
    }
}

/// One labeled character with its feature vector.
pub struct CharFeat<F: Scalar> {
    pub symbol: char,
    pub feat: Tensor<F>,
}

/// Pairs bucketed by group, in construction order.
pub struct PairBatch<F: Scalar> {
    pub groups: [Vec<(Tensor<F>, Tensor<F>)>; 4],
}

impl<F: Scalar> Default for PairBatch<F> {
    fn default() -> Self {
        PairBatch {
            groups: [Vec::new(), Vec::new(), Vec::new(), Vec::new()],
        }
    }
}

impl<F: Scalar> PairBatch<F> {
    pub fn total(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn counts(&self) -> [usize; 4] {
        [
            self.groups[0].len(),
            self.groups[1].len(),
            self.groups[2].len(),
            self.groups[3].len(),
        ]
    }

    /// Merge another batch into this one, preserving order.
    pub fn extend(&mut self, other: PairBatch<F>) {
        for (dst, src) in self.groups.iter_mut().zip(other.groups) {
            dst.extend(src);
        }
    }
}

/// Teacher-force one labeled strip through the recognizer and collect the
/// chosen per-character feature, plus the recognition loss of the pass.
pub fn extract_char_features<F: Scalar>(
    cfg: &ModelConfig,
    params: &ParamSet<F>,
    sample: &Sample,
    which: CharFeature,
) -> Result<(Vec<CharFeat<F>>, Tensor<F>), TensorError> {
    let label = encode_label(cfg, &sample.label).map_err(|ch| TensorError::Invalid {
        op: "extract_char_features",
        msg: format!("label symbol {ch:?} outside the alphabet"),
    })?;
    let features = encode(cfg, params, &image_tensor(&sample.image))?;
    let pass = decode_teacher_forced(cfg, params, &features, &label)?;
    let per_char = match which {
        CharFeature::Context => pass.char_contexts,
        CharFeature::ContextPlus => pass.char_states,
    };
    let feats = sample
        .label
        .chars()
        .zip(per_char)
        .map(|(symbol, feat)| CharFeat { symbol, feat })
        .collect();
    Ok((feats, pass.loss))
}

/// Build all four groups from one source strip and one target strip.
pub fn sample_pairs<F: Scalar>(source: &[CharFeat<F>], target: &[CharFeat<F>]) -> PairBatch<F> {
    let mut out = PairBatch::default();
    for a in source {
        for b in source {
            let g = if a.symbol == b.symbol {
                PairGroup::SourceSame
            } else {
                PairGroup::SourceDiff
            };
            out.groups[g.index()].push((a.feat.clone(), b.feat.clone()));
        }
        for b in target {
            let g = if a.symbol == b.symbol {
                PairGroup::CrossSame
            } else {
                PairGroup::CrossDiff
            };
            out.groups[g.index()].push((a.feat.clone(), b.feat.clone()));
        }
    }
    out
}

/// Cap each group at `k` pairs, chosen uniformly without replacement;
/// groups at or under the cap pass through intact. Selection order within a
/// group follows the draw order of the partial Fisher-Yates shuffle.
pub fn subsample_balanced<F: Scalar>(batch: PairBatch<F>, k: usize, rng: &mut Rng) -> PairBatch<F> {
    let mut out = PairBatch::default();
    for (gi, group) in batch.groups.into_iter().enumerate() {
        if group.len() <= k {
            out.groups[gi] = group;
            continue;
        }
        let n = group.len();
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + (crate::rng::uniform(rng, 0.0, (n - i) as f64) as usize).min(n - i - 1);
            idx.swap(i, j);
        }
        let mut picked: Vec<Option<(Tensor<F>, Tensor<F>)>> = group.into_iter().map(Some).collect();
        out.groups[gi] = idx[..k]
            .iter()
            .map(|&i| picked[i].take().expect("distinct indices"))
            .collect();
    }
    out
}

/// Within-source and cross-domain probe vector classes, in that order.
pub type ProbeClasses = (Vec<Vec<f64>>, Vec<Vec<f64>>);

/// Concatenated same-character pair vectors for probing how separable the
/// two domains look in feature space: within-source pairs in the first
/// return, cross-domain pairs in the second. Strips are zipped in order, so
/// the output is a deterministic function of the inputs.
pub fn probe_vectors<F: Scalar>(
    cfg: &ModelConfig,
    params: &ParamSet<F>,
    which: CharFeature,
    sources: &[Sample],
    targets: &[Sample],
) -> Result<ProbeClasses, TensorError> {
    let concat = |a: &Tensor<F>, b: &Tensor<F>| -> Vec<f64> {
        a.values()
            .into_iter()
            .chain(b.values())
            .map(crate::scalar::wide)
            .collect()
    };
    let mut within = Vec::new();
    let mut cross = Vec::new();
    for (s, t) in sources.iter().zip(targets) {
        let (sf, _) = extract_char_features(cfg, params, s, which)?;
        let (tf, _) = extract_char_features(cfg, params, t, which)?;
        let pairs = sample_pairs(&sf, &tf);
        for (a, b) in &pairs.groups[PairGroup::SourceSame.index()] {
            within.push(concat(a, b));
        }
        for (a, b) in &pairs.groups[PairGroup::CrossSame.index()] {
            cross.push(concat(a, b));
        }
    }
    Ok((within, cross))
}
