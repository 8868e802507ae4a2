//! Regularizer selection by leave-one-out cross-validation.
//!
//! Leave-one-out predictions come from the hat matrix `H = F (FᵀF + λI)⁻¹ Fᵀ`
//! instead of n refits: with in-sample prediction `ŷᵢ` and leverage `hᵢᵢ`,
//! the prediction of the model fitted without sample i is
//! `(ŷᵢ - hᵢᵢ yᵢ) / (1 - hᵢᵢ)`.
//!
//! One symmetric eigendecomposition of the smaller Gram matrix serves the
//! whole grid; each candidate only rescales the spectrum.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::analytic::{GramForm, OneHot};
use crate::error::{invalid, Error, Result};

/// Samples whose leverage reaches `1 - LEVERAGE_GUARD` are excluded.
pub const LEVERAGE_GUARD: f64 = 1e-10;

/// Above this many rows LOOCV runs on a seeded subsample.
pub const DEFAULT_SAMPLE_CAP: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaGrid(Vec<f64>);

impl Default for LambdaGrid {
    /// `10⁻⁸, 10⁻⁷, …, 10⁰`.
    fn default() -> Self {
        Self::decades(-8, 0).unwrap()
    }
}

impl LambdaGrid {
    pub fn new(candidates: Vec<f64>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(invalid("lambda grid is empty"));
        }
        if !candidates.iter().all(|&l| l.is_finite() && l > 0.0) {
            return Err(invalid("lambda candidates must be positive and finite"));
        }
        if !candidates.windows(2).all(|w| w[0] < w[1]) {
            return Err(invalid("lambda grid must be strictly increasing"));
        }
        Ok(Self(candidates))
    }

    /// Powers of ten from `10^lo` to `10^hi` inclusive.
    pub fn decades(lo: i32, hi: i32) -> Result<Self> {
        if lo > hi {
            return Err(invalid(format!("empty decade range {lo}..{hi}")));
        }
        Self::new(
            (lo..=hi)
                .map(|e| format!("1e{e}").parse().unwrap())
                .collect(),
        )
    }

    /// Parses `1e-8..1e0` (decades) or a comma-separated list.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some((lo, hi)) = s.split_once("..") {
            let exp = |v: &str| -> Result<i32> {
                let x: f64 = v
                    .trim()
                    .parse()
                    .map_err(|_| invalid(format!("bad grid bound {v:?}")))?;
                let e = x.log10().round();
                if x <= 0.0 || (10f64.powf(e) - x).abs() > 1e-9 * x {
                    return Err(invalid(format!("grid bound {v:?} is not a power of ten")));
                }
                Ok(e as i32)
            };
            return Self::decades(exp(lo)?, exp(hi)?);
        }
        let vals = s
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| invalid(format!("bad lambda {v:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(vals)
    }

    pub fn candidates(&self) -> &[f64] {
        &self.0
    }
}

/// Leave-one-out outcome for one λ.
#[derive(Debug, Clone)]
pub struct LooScore {
    pub lambda: f64,
    /// Fraction of non-excluded samples whose LOO argmax matches the label.
    pub accuracy: f64,
    /// LOO logits, one row per sample (rows of excluded samples are NaN).
    pub loo_logits: DMatrix<f64>,
    /// Per-sample LOO argmax, `None` where the leverage was degenerate.
    pub predictions: Vec<Option<usize>>,
    pub excluded: Vec<usize>,
}

/// Spectral factorization of the training Gram matrix, shared by every λ.
pub struct LooSolver {
    form: GramForm,
    /// n x m: eigenvectors (dual) or `F V` (primal).
    basis: DMatrix<f64>,
    /// Squared basis entries, for leverages.
    basis_sq: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    /// m x C: `basisᵀ Y`.
    projected_targets: DMatrix<f64>,
    targets: OneHot,
}

impl LooSolver {
    pub fn new(features: &DMatrix<f64>, targets: &OneHot) -> Result<Self> {
        let n = features.nrows();
        if n < 2 {
            return Err(invalid("leave-one-out needs at least two samples"));
        }
        if targets.len() != n {
            return Err(Error::DimensionMismatch {
                what: "target rows",
                expected: n,
                got: targets.len(),
            });
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("loocv features"));
        }
        let form = GramForm::smaller(n, features.ncols());
        let (basis, eigenvalues) = match form {
            GramForm::Dual => {
                let eig = SymmetricEigen::new(features * features.transpose());
                (eig.eigenvectors, eig.eigenvalues)
            }
            GramForm::Primal => {
                let eig = SymmetricEigen::new(features.tr_mul(features));
                (features * eig.eigenvectors, eig.eigenvalues)
            }
        };
        // rounding can leave tiny negative eigenvalues on a PSD matrix
        let eigenvalues = eigenvalues.map(|s| s.max(0.0));
        let basis_sq = basis.map(|v| v * v);
        let projected_targets = basis.tr_mul(&targets.matrix());
        Ok(Self {
            form,
            basis,
            basis_sq,
            eigenvalues,
            projected_targets,
            targets: targets.clone(),
        })
    }

    pub fn form(&self) -> GramForm {
        self.form
    }

    pub fn score(&self, lambda: f64) -> Result<LooScore> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(invalid(format!("lambda must be positive, got {lambda}")));
        }
        // Residuals Y - Ŷ and complements 1 - h. In dual form the basis is
        // complete, so both come straight from the weights λ/(s+λ) instead of
        // subtracting from 1, which keeps tiny λ (near-interpolation) accurate.
        let (residual, complement) = match self.form {
            GramForm::Dual => {
                let weights = self.eigenvalues.map(|s| lambda / (s + lambda));
                let mut scaled = self.projected_targets.clone();
                for (mut row, w) in scaled.row_iter_mut().zip(weights.iter()) {
                    row *= *w;
                }
                (&self.basis * scaled, &self.basis_sq * &weights)
            }
            GramForm::Primal => {
                let gains = self.eigenvalues.map(|s| 1.0 / (s + lambda));
                let mut scaled = self.projected_targets.clone();
                for (mut row, g) in scaled.row_iter_mut().zip(gains.iter()) {
                    row *= *g;
                }
                let fitted = &self.basis * scaled;
                let leverage = &self.basis_sq * &gains;
                (self.targets.matrix() - fitted, leverage.map(|h| 1.0 - h))
            }
        };

        let n = residual.nrows();
        let mut loo_logits = DMatrix::from_element(n, residual.ncols(), f64::NAN);
        let mut predictions = Vec::with_capacity(n);
        let mut excluded = Vec::new();
        let mut correct = 0usize;
        for i in 0..n {
            let m = complement[i];
            if m <= LEVERAGE_GUARD {
                excluded.push(i);
                predictions.push(None);
                continue;
            }
            let label = self.targets.labels()[i];
            // y_i - (y_i - ŷ_i) / (1 - h_ii), equal to (ŷ_i - h_ii y_i) / (1 - h_ii)
            let mut row = residual.row(i) / -m;
            row[label] += 1.0;
            let pred = argmax(row.iter().copied());
            if pred == label {
                correct += 1;
            }
            predictions.push(Some(pred));
            loo_logits.set_row(i, &row);
        }
        let kept = n - excluded.len();
        if kept == 0 {
            return Err(invalid("every sample has degenerate leverage"));
        }
        Ok(LooScore {
            lambda,
            accuracy: correct as f64 / kept as f64,
            loo_logits,
            predictions,
            excluded,
        })
    }
}

/// Index of the largest value; the lowest index wins ties.
pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

pub fn loocv_score(features: &DMatrix<f64>, targets: &OneHot, lambda: f64) -> Result<LooScore> {
    LooSolver::new(features, targets)?.score(lambda)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub lambda: f64,
    pub accuracy: f64,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub scores: Vec<CandidateScore>,
    /// Rows actually used, when the input exceeded the sample cap.
    pub subsample: Option<usize>,
}

/// Best-accuracy candidate; ties go to the larger λ.
pub fn pick_best(scores: &[CandidateScore]) -> Option<f64> {
    let mut best: Option<&CandidateScore> = None;
    for s in scores {
        if best.is_none_or(|b| s.accuracy >= b.accuracy) {
            best = Some(s);
        }
    }
    best.map(|b| b.lambda)
}

pub fn select_lambda(
    features: &DMatrix<f64>,
    targets: &OneHot,
    grid: &LambdaGrid,
) -> Result<LambdaSelection> {
    let solver = LooSolver::new(features, targets)?;
    let scores = grid
        .candidates()
        .iter()
        .map(|&lambda| {
            solver.score(lambda).map(|s| CandidateScore {
                lambda,
                accuracy: s.accuracy,
                excluded: s.excluded.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LambdaSelection {
        lambda: pick_best(&scores).expect("grid is nonempty"),
        scores,
        subsample: None,
    })
}

/// Sorted uniform sample of `cap` distinct indices below `n` (all of them when `n <= cap`).
pub fn subsample_indices(n: usize, cap: usize, seed: u64) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, cap).into_vec();
    idx.sort_unstable();
    idx
}

/// [`select_lambda`] on at most `cap` rows drawn uniformly with `seed`.
pub fn select_lambda_capped(
    features: &DMatrix<f64>,
    targets: &OneHot,
    grid: &LambdaGrid,
    cap: usize,
    seed: u64,
) -> Result<LambdaSelection> {
    let n = features.nrows();
    if cap < 2 {
        return Err(invalid("LOOCV sample cap must be >= 2"));
    }
    if n <= cap {
        return select_lambda(features, targets, grid);
    }
    let idx = subsample_indices(n, cap, seed);
    let sub_features = features.select_rows(idx.iter());
    let sub_targets = OneHot::new(
        idx.iter().map(|&i| targets.labels()[i]).collect(),
        targets.class_count(),
    )?;
    let mut selection = select_lambda(&sub_features, &sub_targets, grid)?;
    selection.subsample = Some(cap);
    Ok(selection)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid() {
        let g = LambdaGrid::default();
        assert_eq!(g.candidates().len(), 9);
        assert_eq!(g.candidates()[0], 1e-8);
        assert_eq!(g.candidates()[8], 1.0);
        assert_eq!(LambdaGrid::parse("1e-8..1e0").unwrap(), g);
        assert_eq!(
            LambdaGrid::parse("0.1, 1, 10").unwrap().candidates(),
            &[0.1, 1.0, 10.0]
        );
    }

    #[test]
    fn grid_validation() {
        assert!(LambdaGrid::new(vec![]).is_err());
        assert!(LambdaGrid::new(vec![1.0, 1.0]).is_err());
        assert!(LambdaGrid::new(vec![0.0, 1.0]).is_err());
        assert!(LambdaGrid::parse("3..1e2").is_err());
    }

    #[test]
    fn tie_break_prefers_larger_lambda() {
        let scores: Vec<_> = [0.9, 0.95, 0.95, 0.8]
            .iter()
            .enumerate()
            .map(|(i, &a)| CandidateScore {
                lambda: 10f64.powi(i as i32 - 3),
                accuracy: a,
                excluded: 0,
            })
            .collect();
        assert_eq!(pick_best(&scores), Some(0.1));
    }

    #[test]
    fn contradictory_duplicates() {
        let f = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 1.0, 0.5]);
        let y = OneHot::new(vec![0, 1], 2).unwrap();
        let s = loocv_score(&f, &y, 1e-4).unwrap();
        assert!(s.accuracy <= 0.5);
    }

    #[test]
    fn needs_two_samples() {
        let f = DMatrix::from_row_slice(1, 1, &[1.0]);
        let y = OneHot::new(vec![0], 1).unwrap();
        assert!(loocv_score(&f, &y, 1.0).is_err());
    }

    #[test]
    fn single_candidate_grid() {
        let f = DMatrix::from_row_slice(3, 1, &[1.0, 1.1, -1.0]);
        let y = OneHot::new(vec![0, 0, 1], 2).unwrap();
        let sel = select_lambda(&f, &y, &LambdaGrid::new(vec![0.3]).unwrap()).unwrap();
        assert_eq!(sel.lambda, 0.3);
        assert_eq!(sel.scores.len(), 1);
    }

    #[test]
    fn degenerate_leverage_is_excluded() {
        // a lone sample on its own axis has leverage 1/(1+λ) -> 1 as λ -> 0
        let f = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let y = OneHot::new(vec![0, 0, 1], 2).unwrap();
        let s = loocv_score(&f, &y, 1e-12).unwrap();
        assert_eq!(s.excluded, vec![2]);
        assert_eq!(s.predictions[2], None);
        assert_eq!(s.accuracy, 1.0);
    }
}
