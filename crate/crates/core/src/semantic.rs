//! Candidate semantic enhancement.
//!
//! The analytic logits nominate the top-K classes; only those are scored by
//! cosine similarity between the image's universal embedding and the class's
//! prompt-ensemble text prototype. The sparse score vector is then added to
//! the analytic logits.

use nalgebra::DMatrix;

use crate::calibration::{l2_norm, DEGENERATE_NORM};
use crate::error::{invalid, Error, Result};
use crate::lambda::argmax;
use crate::store::PrototypeBankFile;

pub const DEFAULT_TOP_K: usize = 5;

/// Per-class template means (raw, not normalized).
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    means: DMatrix<f64>,
    template_count: usize,
    class_names: Vec<String>,
}

impl PrototypeBank {
    /// Averages each class's template embeddings.
    pub fn build(bank: &PrototypeBankFile) -> Result<Self> {
        bank.validate()?;
        let (c, p, d) = (bank.class_count, bank.template_count, bank.dim);
        let mut means = DMatrix::zeros(c, d);
        for class in 0..c {
            let mut acc = vec![0.0f64; d];
            for t in 0..p {
                for (a, &v) in acc.iter_mut().zip(bank.template(class, t)) {
                    *a += v as f64;
                }
            }
            for (j, a) in acc.into_iter().enumerate() {
                means[(class, j)] = a / p as f64;
            }
            if l2_norm(means.row(class).clone_owned().as_slice()) <= DEGENERATE_NORM {
                return Err(Error::ZeroNormPrototype {
                    class,
                    template: None,
                });
            }
        }
        Ok(Self {
            means,
            template_count: p,
            class_names: bank.class_names.clone(),
        })
    }

    /// Bank from already-averaged prototypes (one row per class).
    pub fn from_means(means: DMatrix<f64>, class_names: Vec<String>) -> Result<Self> {
        for class in 0..means.nrows() {
            if means.row(class).norm() <= DEGENERATE_NORM {
                return Err(Error::ZeroNormPrototype {
                    class,
                    template: None,
                });
            }
        }
        Ok(Self {
            means,
            template_count: 1,
            class_names,
        })
    }

    pub fn class_count(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn template_count(&self) -> usize {
        self.template_count
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn mean(&self, class: usize) -> Vec<f64> {
        self.means.row(class).iter().copied().collect()
    }
}

/// Indices of the K largest logits, best first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    k: usize,
    indices: Vec<usize>,
}

impl CandidateSet {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn contains(&self, class: usize) -> bool {
        self.indices.contains(&class)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Top-K by logit; equal logits rank the lower class id first.
pub fn top_k(logits: &[f64], k: usize) -> Result<CandidateSet> {
    if logits.is_empty() {
        return Err(invalid("top_k on empty logits"));
    }
    if k == 0 {
        return Err(invalid("top_k needs K >= 1"));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k.min(logits.len()));
    Ok(CandidateSet { k, indices: order })
}

/// Sparse cosine scores: `cos(clip, prototype[classes[i]])` for candidate
/// positions, exactly 0 elsewhere.
///
/// `classes[i]` is the bank row for logit position `i`; pass `None` to use
/// the identity mapping.
pub fn cse_scores(
    clip_feature: &[f64],
    bank: &PrototypeBank,
    candidates: &CandidateSet,
    len: usize,
    classes: Option<&[usize]>,
) -> Result<Vec<f64>> {
    if clip_feature.len() != bank.dim() {
        return Err(Error::DimensionMismatch {
            what: "clip feature",
            expected: bank.dim(),
            got: clip_feature.len(),
        });
    }
    let norm = l2_norm(clip_feature);
    if !norm.is_finite() {
        return Err(Error::NonFinite("clip feature"));
    }
    if norm <= DEGENERATE_NORM {
        return Err(Error::DegenerateFeature {
            norm,
            eps: DEGENERATE_NORM,
        });
    }
    let mut scores = vec![0.0; len];
    for &pos in candidates.indices() {
        if pos >= len {
            return Err(Error::LabelOutOfRange {
                label: pos,
                class_count: len,
            });
        }
        let class = classes.map_or(pos, |m| m[pos]);
        if class >= bank.class_count() {
            return Err(Error::LabelOutOfRange {
                label: class,
                class_count: bank.class_count(),
            });
        }
        let proto = bank.means.row(class);
        let dot: f64 = proto.iter().zip(clip_feature).map(|(p, v)| p * v).sum();
        scores[pos] = (dot / (norm * proto.norm())).clamp(-1.0, 1.0);
    }
    Ok(scores)
}

/// Weights on the two terms of the fused prediction. `(1, 1)` is the plain sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionWeights {
    pub analytic: f64,
    pub semantic: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            analytic: 1.0,
            semantic: 1.0,
        }
    }
}

pub fn fuse_predictions(analytic: &[f64], semantic: &[f64]) -> Result<(Vec<f64>, usize)> {
    fuse_predictions_weighted(analytic, semantic, FusionWeights::default())
}

pub fn fuse_predictions_weighted(
    analytic: &[f64],
    semantic: &[f64],
    weights: FusionWeights,
) -> Result<(Vec<f64>, usize)> {
    if analytic.len() != semantic.len() {
        return Err(Error::DimensionMismatch {
            what: "semantic scores",
            expected: analytic.len(),
            got: semantic.len(),
        });
    }
    if analytic.is_empty() {
        return Err(invalid("cannot fuse empty predictions"));
    }
    let fused: Vec<f64> = analytic
        .iter()
        .zip(semantic)
        .map(|(a, s)| weights.analytic * a + weights.semantic * s)
        .collect();
    let class = argmax(fused.iter().copied());
    Ok((fused, class))
}

/// Full decision-level pass for one sample: top-K, sparse scores, fusion.
pub fn refine(
    analytic: &[f64],
    clip_feature: &[f64],
    bank: &PrototypeBank,
    k: usize,
    classes: Option<&[usize]>,
    weights: FusionWeights,
) -> Result<(Vec<f64>, usize)> {
    let candidates = top_k(analytic, k)?;
    let scores = cse_scores(clip_feature, bank, &candidates, analytic.len(), classes)?;
    fuse_predictions_weighted(analytic, &scores, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(c: usize, p: usize, d: usize, payload: Vec<f32>) -> PrototypeBank {
        PrototypeBank::build(&PrototypeBankFile::new(c, p, d, payload, vec![]).unwrap()).unwrap()
    }

    #[test]
    fn single_template_means_are_templates() {
        let b = bank(2, 1, 2, vec![0.3, 0.4, -1.0, 2.0]);
        assert_eq!(b.mean(0), vec![0.3f32 as f64, 0.4f32 as f64]);
        assert_eq!(b.mean(1), vec![-1.0, 2.0]);
    }

    #[test]
    fn duplicate_templates() {
        let b = bank(1, 2, 2, vec![0.25, 0.5, 0.25, 0.5]);
        assert_eq!(b.mean(0), vec![0.25, 0.5]);
    }

    #[test]
    fn orthogonal_templates_average() {
        let b = bank(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(b.mean(0), vec![0.5, 0.5]);
    }

    #[test]
    fn cancelling_templates_rejected() {
        let f = PrototypeBankFile::new(1, 2, 2, vec![1.0, 0.0, -1.0, 0.0], vec![]).unwrap();
        assert!(matches!(
            PrototypeBank::build(&f),
            Err(Error::ZeroNormPrototype {
                class: 0,
                template: None
            })
        ));
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k(&[0.1, 0.9, 0.5], 2).unwrap().indices(), &[1, 2]);
        assert_eq!(top_k(&[0.5, 0.5, 0.1], 1).unwrap().indices(), &[0]);
        let all = top_k(&[0.3, -0.2, 0.7], 3).unwrap();
        let mut idx = all.indices().to_vec();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2]);
        assert_eq!(top_k(&[1.0, 2.0], 10).unwrap().len(), 2);
        assert!(top_k(&[], 1).is_err());
        assert!(top_k(&[1.0], 0).is_err());
    }

    #[test]
    fn cse_examples() {
        let b = bank(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let both = top_k(&[0.0, 0.0], 2).unwrap();
        assert_eq!(
            cse_scores(&[1.0, 0.0], &b, &both, 2, None).unwrap(),
            vec![1.0, 0.0]
        );

        let only_first = top_k(&[1.0, 0.0], 1).unwrap();
        let s = cse_scores(&[0.0, 3.0], &b, &only_first, 2, None).unwrap();
        assert_eq!(s[1], 0.0, "non-candidate must be exactly zero");

        let parallel = cse_scores(&[0.0, 7.0], &b, &both, 2, None).unwrap();
        assert!((parallel[1] - 1.0).abs() < 1e-15);

        assert!(matches!(
            cse_scores(&[0.0, 0.0], &b, &both, 2, None),
            Err(Error::DegenerateFeature { .. })
        ));
    }

    #[test]
    fn fusion_flips_prediction() {
        let (fused, class) = fuse_predictions(&[1.0, 1.1, 0.5], &[0.9, 0.2, 0.0]).unwrap();
        for (got, want) in fused.iter().zip([1.9, 1.3, 0.5]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert_eq!(class, 0);
        assert_eq!(fuse_predictions(&[1.0, 1.1, 0.5], &[0.0; 3]).unwrap().1, 1);
        assert_eq!(fuse_predictions(&[2.3, 1.9, 0.5], &[0.0; 3]).unwrap().1, 0);
        assert!(fuse_predictions(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mapped_classes() {
        // logit positions 0,1 correspond to bank rows 2,0
        let b = bank(3, 1, 2, vec![1.0, 0.0, 0.5, 0.5, 0.0, 1.0]);
        let cands = top_k(&[0.2, 0.1], 2).unwrap();
        let s = cse_scores(&[0.0, 1.0], &b, &cands, 2, Some(&[2, 0])).unwrap();
        assert_eq!(s, vec![1.0, 0.0]);
    }
}
