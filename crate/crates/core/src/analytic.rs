//! Ridge regression in closed form and its recursive least-squares update.
//!
//! The state keeps `R = (Φ + λI)⁻¹` where `Φ = Σ FᵀF` over every absorbed
//! projected feature, and the weights `W = R Σ FᵀY`. A chunk `F` (n x D_B)
//! with one-hot targets `Y` updates them as
//!
//! ```text
//! S  = I + F R Fᵀ
//! R' = R - R Fᵀ S⁻¹ F R
//! W' = W + R' Fᵀ (Y - F W)
//! ```
//!
//! `S` is factorized with Cholesky; it is never inverted.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix};

use crate::error::{invalid, Error, Result};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"VILARLS1";

/// Default number of rows absorbed per RLS step.
pub const DEFAULT_CHUNK_ROWS: usize = 512;

/// Class labels for a batch, materialized as a one-hot matrix on demand.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OneHot {
    labels: Vec<usize>,
    class_count: usize,
}

impl OneHot {
    pub fn new(labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::LabelOutOfRange { label, class_count });
        }
        Ok(Self {
            labels,
            class_count,
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let mut y = DMatrix::zeros(self.labels.len(), self.class_count);
        for (i, &l) in self.labels.iter().enumerate() {
            y[(i, l)] = 1.0;
        }
        y
    }

    /// Rows `start..end` as a new batch.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            labels: self.labels[start..end].to_vec(),
            class_count: self.class_count,
        }
    }
}

fn check_finite(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda > 0.0 {
        Ok(())
    } else {
        Err(invalid(format!(
            "lambda must be positive and finite, got {lambda}"
        )))
    }
}

/// Which normal-equation system a ridge solve factorizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GramForm {
    /// `(FᵀF + λI) W = FᵀY`, a D_B x D_B system.
    Primal,
    /// `W = Fᵀ (FFᵀ + λI)⁻¹ Y`, an n x n system.
    Dual,
}

impl GramForm {
    pub fn smaller(rows: usize, cols: usize) -> Self {
        if rows < cols {
            GramForm::Dual
        } else {
            GramForm::Primal
        }
    }
}

/// Closed-form ridge weights, using whichever Gram matrix is smaller.
pub fn ridge_fit(features: &DMatrix<f64>, targets: &OneHot, lambda: f64) -> Result<DMatrix<f64>> {
    ridge_fit_with(
        features,
        targets,
        lambda,
        GramForm::smaller(features.nrows(), features.ncols()),
    )
}

pub fn ridge_fit_with(
    features: &DMatrix<f64>,
    targets: &OneHot,
    lambda: f64,
    form: GramForm,
) -> Result<DMatrix<f64>> {
    check_lambda(lambda)?;
    if features.nrows() == 0 {
        return Err(invalid("ridge_fit needs at least one row"));
    }
    if features.nrows() != targets.len() {
        return Err(Error::DimensionMismatch {
            what: "target rows",
            expected: features.nrows(),
            got: targets.len(),
        });
    }
    check_finite(features, "ridge features")?;
    let y = targets.matrix();
    match form {
        GramForm::Primal => {
            let mut gram = features.tr_mul(features);
            for i in 0..gram.nrows() {
                gram[(i, i)] += lambda;
            }
            let chol = Cholesky::new(gram).ok_or(Error::SingularSystem {
                rows: features.ncols(),
            })?;
            Ok(chol.solve(&features.tr_mul(&y)))
        }
        GramForm::Dual => {
            let mut gram = features * features.transpose();
            for i in 0..gram.nrows() {
                gram[(i, i)] += lambda;
            }
            let chol = Cholesky::new(gram).ok_or(Error::SingularSystem {
                rows: features.nrows(),
            })?;
            Ok(features.tr_mul(&chol.solve(&y)))
        }
    }
}

/// Inverse regularized autocorrelation and classifier weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticState {
    r: DMatrix<f64>,
    w: DMatrix<f64>,
    lambda: f64,
    samples_seen: u64,
}

impl AnalyticState {
    /// `R = λ⁻¹I`, `W = 0`.
    pub fn new(buffer_dim: usize, class_count: usize, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        if buffer_dim == 0 {
            return Err(invalid("buffer dimension must be >= 1"));
        }
        Ok(Self {
            r: DMatrix::from_diagonal_element(buffer_dim, buffer_dim, 1.0 / lambda),
            w: DMatrix::zeros(buffer_dim, class_count),
            lambda,
            samples_seen: 0,
        })
    }

    pub fn buffer_dim(&self) -> usize {
        self.r.nrows()
    }

    pub fn class_count(&self) -> usize {
        self.w.ncols()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn samples_seen(&self) -> u64 {
        self.samples_seen
    }

    pub fn inverse_correlation(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// Adds zero weight columns for new classes. `R` is untouched.
    pub fn expand_classes(&mut self, new_class_count: usize) -> Result<()> {
        let old = self.class_count();
        if new_class_count < old {
            return Err(invalid(format!(
                "cannot shrink class set from {old} to {new_class_count}"
            )));
        }
        if new_class_count > old {
            let w = std::mem::replace(&mut self.w, DMatrix::zeros(0, 0));
            self.w = w.resize_horizontally(new_class_count, 0.0);
        }
        Ok(())
    }

    /// Absorbs one batch with a single RLS step.
    ///
    /// Inputs are validated and `S` is factorized before anything is
    /// modified, so on error the state is unchanged.
    pub fn rls_update(&mut self, features: &DMatrix<f64>, targets: &OneHot) -> Result<()> {
        let n = features.nrows();
        if n == 0 {
            return Err(invalid("rls_update needs a nonempty batch"));
        }
        if features.ncols() != self.buffer_dim() {
            return Err(Error::DimensionMismatch {
                what: "feature width",
                expected: self.buffer_dim(),
                got: features.ncols(),
            });
        }
        if targets.len() != n {
            return Err(Error::DimensionMismatch {
                what: "target rows",
                expected: n,
                got: targets.len(),
            });
        }
        if let Some(&label) = targets.labels().iter().find(|&&l| l >= self.class_count()) {
            return Err(Error::LabelOutOfRange {
                label,
                class_count: self.class_count(),
            });
        }
        check_finite(features, "rls features")?;

        // R Fᵀ (D_B x n); R is symmetric so this is also (F R)ᵀ.
        let r_ft = &self.r * features.transpose();
        let mut s = features * &r_ft;
        for i in 0..n {
            s[(i, i)] += 1.0;
        }
        let chol = Cholesky::new(s).ok_or(Error::SingularSystem { rows: n })?;

        // gain = R Fᵀ S⁻¹ = R' Fᵀ
        let gain = chol.solve(&r_ft.transpose()).transpose();

        let residual = targets.matrix() - features * &self.w;
        self.r.gemm(-1.0, &gain, &r_ft.transpose(), 1.0);
        symmetrize(&mut self.r);
        self.w.gemm(1.0, &gain, &residual, 1.0);
        self.samples_seen += n as u64;
        Ok(())
    }

    /// Absorbs `features` in consecutive chunks of at most `chunk_rows` rows.
    pub fn rls_update_chunked(
        &mut self,
        features: &DMatrix<f64>,
        targets: &OneHot,
        chunk_rows: usize,
    ) -> Result<()> {
        if chunk_rows == 0 {
            return Err(invalid("chunk size must be >= 1"));
        }
        let n = features.nrows();
        let mut start = 0;
        while start < n {
            let end = (start + chunk_rows).min(n);
            let chunk = features.rows(start, end - start).into_owned();
            self.rls_update(&chunk, &targets.slice(start, end))?;
            start = end;
        }
        Ok(())
    }

    /// Analytic logits `F W`.
    pub fn predict(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if features.ncols() != self.buffer_dim() {
            return Err(Error::DimensionMismatch {
                what: "feature width",
                expected: self.buffer_dim(),
                got: features.ncols(),
            });
        }
        Ok(features * &self.w)
    }

    /// Logits for a single projected feature.
    pub fn predict_row(&self, feature: &[f64]) -> Result<Vec<f64>> {
        if feature.len() != self.buffer_dim() {
            return Err(Error::DimensionMismatch {
                what: "feature width",
                expected: self.buffer_dim(),
                got: feature.len(),
            });
        }
        Ok((0..self.class_count())
            .map(|c| {
                self.w
                    .column(c)
                    .iter()
                    .zip(feature)
                    .map(|(w, f)| w * f)
                    .sum()
            })
            .collect())
    }

    pub fn write_snapshot<W: Write>(&self, mut sink: W) -> Result<()> {
        let d = self.buffer_dim();
        let c = self.class_count();
        sink.write_all(SNAPSHOT_MAGIC)?;
        for v in [d as u64, c as u64, self.samples_seen] {
            sink.write_all(&v.to_le_bytes())?;
        }
        sink.write_all(&self.lambda.to_le_bytes())?;
        let mut row = Vec::with_capacity(8 * d.max(c));
        for m in [&self.r, &self.w] {
            for i in 0..m.nrows() {
                row.clear();
                for v in m.row(i).iter() {
                    row.extend_from_slice(&v.to_le_bytes());
                }
                sink.write_all(&row)?;
            }
        }
        sink.flush()?;
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut source: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut source, &mut magic, "snapshot magic")?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(SNAPSHOT_MAGIC).into_owned(),
                found: String::from_utf8_lossy(&magic).into_owned(),
            });
        }
        let mut word = [0u8; 8];
        let mut next_u64 = |src: &mut R| -> Result<u64> {
            read_exact(src, &mut word, "snapshot header")?;
            Ok(u64::from_le_bytes(word))
        };
        let d = next_u64(&mut source)? as usize;
        let c = next_u64(&mut source)? as usize;
        let samples_seen = next_u64(&mut source)?;
        let lambda = f64::from_bits(next_u64(&mut source)?);
        check_lambda(lambda)?;
        if d == 0 {
            return Err(invalid("snapshot has buffer dimension 0"));
        }
        let mut read_matrix = |rows: usize, cols: usize| -> Result<DMatrix<f64>> {
            let mut bytes = vec![0u8; 8 * rows * cols];
            read_exact(&mut source, &mut bytes, "snapshot matrices")?;
            let vals: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Ok(DMatrix::from_row_slice(rows, cols, &vals))
        };
        let r = read_matrix(d, d)?;
        let w = read_matrix(d, c)?;
        Ok(Self {
            r,
            w,
            lambda,
            samples_seen,
        })
    }

    /// Writes to `path` through a temporary file so a crash never leaves a
    /// half-written snapshot behind.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        {
            let file = File::create(&tmp)?;
            self.write_snapshot(BufWriter::new(file))?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_snapshot(BufReader::new(File::open(path)?))
    }
}

fn read_exact<R: Read>(source: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    source.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(what.to_string()),
        _ => Error::Io(e),
    })
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Largest `|a - b|` over entries.
pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `‖a - b‖_F / ‖b‖_F`, or the absolute norm when `b` is zero.
pub fn relative_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let diff = (a - b).norm();
    let base = b.norm();
    if base == 0.0 {
        diff
    } else {
        diff / base
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, vals: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, vals)
    }

    #[test]
    fn scalar_ridge() {
        let w = ridge_fit(&mat(1, 1, &[1.0]), &OneHot::new(vec![0], 1).unwrap(), 1.0).unwrap();
        assert!((w[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn scalar_rls_matches_ridge() {
        let mut s = AnalyticState::new(1, 1, 1.0).unwrap();
        s.rls_update(&mat(1, 1, &[1.0]), &OneHot::new(vec![0], 1).unwrap())
            .unwrap();
        assert!((s.inverse_correlation()[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((s.weights()[(0, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(s.samples_seen(), 1);
        assert!((s.predict(&mat(1, 1, &[2.0])).unwrap()[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fresh_state() {
        let s = AnalyticState::new(3, 2, 0.5).unwrap();
        assert_eq!(s.inverse_correlation(), &(DMatrix::identity(3, 3) * 2.0));
        assert!(s.weights().iter().all(|&v| v == 0.0));
        let logits = s.predict(&mat(1, 3, &[1.0, 2.0, 3.0])).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bad_lambda() {
        assert!(AnalyticState::new(2, 1, 0.0).is_err());
        assert!(AnalyticState::new(2, 1, -1.0).is_err());
        assert!(ridge_fit(&mat(1, 1, &[1.0]), &OneHot::new(vec![0], 1).unwrap(), 0.0).is_err());
    }

    #[test]
    fn non_finite_rejected_state_unchanged() {
        let mut s = AnalyticState::new(2, 2, 1.0).unwrap();
        let before = s.clone();
        let err = s.rls_update(
            &mat(1, 2, &[f64::NAN, 1.0]),
            &OneHot::new(vec![0], 2).unwrap(),
        );
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(s, before);
        let err = ridge_fit(
            &mat(1, 1, &[f64::INFINITY]),
            &OneHot::new(vec![0], 1).unwrap(),
            1.0,
        );
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn label_out_of_range() {
        let mut s = AnalyticState::new(2, 2, 1.0).unwrap();
        let y = OneHot::new(vec![2], 3).unwrap();
        assert!(matches!(
            s.rls_update(&mat(1, 2, &[1.0, 1.0]), &y),
            Err(Error::LabelOutOfRange {
                label: 2,
                class_count: 2
            })
        ));
        assert!(OneHot::new(vec![3], 3).is_err());
    }

    #[test]
    fn empty_batch_rejected() {
        let mut s = AnalyticState::new(2, 1, 1.0).unwrap();
        assert!(s
            .rls_update(&DMatrix::zeros(0, 2), &OneHot::new(vec![], 1).unwrap())
            .is_err());
    }

    #[test]
    fn expand_pads_zero_columns() {
        let mut s = AnalyticState::new(2, 3, 1.0).unwrap();
        s.rls_update(
            &mat(2, 2, &[1.0, 0.5, -0.3, 2.0]),
            &OneHot::new(vec![0, 2], 3).unwrap(),
        )
        .unwrap();
        let x = mat(1, 2, &[0.7, -1.1]);
        let before = s.predict(&x).unwrap();
        let r_before = s.inverse_correlation().clone();
        s.expand_classes(5).unwrap();
        assert_eq!(s.class_count(), 5);
        assert!(s.weights().columns(3, 2).iter().all(|&v| v == 0.0));
        assert_eq!(s.inverse_correlation(), &r_before);
        let after = s.predict(&x).unwrap();
        for c in 0..3 {
            assert_eq!(after[(0, c)].to_bits(), before[(0, c)].to_bits());
        }
        let snapshot = s.clone();
        s.expand_classes(5).unwrap();
        assert_eq!(s, snapshot);
        assert!(s.expand_classes(4).is_err());
    }

    #[test]
    fn snapshot_roundtrip_bit_exact() {
        let mut s = AnalyticState::new(3, 2, 0.125).unwrap();
        s.rls_update(
            &mat(2, 3, &[0.1, 0.2, 0.3, -0.4, 0.5, 0.6]),
            &OneHot::new(vec![1, 0], 2).unwrap(),
        )
        .unwrap();
        let mut bytes = Vec::new();
        s.write_snapshot(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 8 + 32 + 8 * (9 + 6));
        let back = AnalyticState::read_snapshot(&bytes[..]).unwrap();
        assert_eq!(back, s);
        assert!(AnalyticState::read_snapshot(&bytes[..bytes.len() - 1]).is_err());
    }
}
