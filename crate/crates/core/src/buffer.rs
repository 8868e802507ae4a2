//! Frozen random projection buffer: `F^B = relu(F W^B)`.
//!
//! `W^B` is regenerated from its seed instead of being stored. The entry
//! stream is a ChaCha20 generator (seeded through `SeedableRng::seed_from_u64`)
//! feeding a Marsaglia polar transform, with the logarithm taken from `libm`
//! so the values do not depend on the host's math library. Entries are filled
//! row-major: row `i` is input component `i`.

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{invalid, Error, Result};

/// Default random-feature width.
pub const DEFAULT_BUFFER_DIM: usize = 16384;

fn relu(values: &mut [f64]) {
    for v in values {
        *v = v.max(0.0);
    }
}

/// Standard normal draws in a fixed, platform-independent order.
pub struct GaussianStream {
    rng: ChaCha20Rng,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha20Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Uniform on (-1, 1) with 53 bits of resolution.
    fn symmetric_uniform(&mut self) -> f64 {
        let bits = self.rng.next_u64() >> 11;
        (bits as f64) * (2.0 / (1u64 << 53) as f64) - 1.0
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        loop {
            let u = self.symmetric_uniform();
            let v = self.symmetric_uniform();
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let scale = (-2.0 * libm::log(s) / s).sqrt();
                self.spare = Some(v * scale);
                return u * scale;
            }
        }
    }
}

impl Iterator for GaussianStream {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        Some(self.next_normal())
    }
}

#[derive(Clone)]
pub struct ProjectionBuffer {
    seed: u64,
    input_dim: usize,
    buffer_dim: usize,
    /// input_dim x buffer_dim, row-major.
    weights: Vec<f64>,
}

impl std::fmt::Debug for ProjectionBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProjectionBuffer")
            .field("seed", &self.seed)
            .field("input_dim", &self.input_dim)
            .field("buffer_dim", &self.buffer_dim)
            .finish_non_exhaustive()
    }
}

impl ProjectionBuffer {
    pub fn new(seed: u64, input_dim: usize, buffer_dim: usize) -> Result<Self> {
        if input_dim == 0 || buffer_dim == 0 {
            return Err(invalid(format!(
                "projection buffer dims must be >= 1 (got {input_dim} x {buffer_dim})"
            )));
        }
        let weights = GaussianStream::new(seed)
            .take(input_dim * buffer_dim)
            .collect();
        Ok(Self {
            seed,
            input_dim,
            buffer_dim,
            weights,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn buffer_dim(&self) -> usize {
        self.buffer_dim
    }

    /// Row-major entries of `W^B`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.input_dim, self.buffer_dim, &self.weights)
    }

    /// Projects one fused feature into `out` (length `buffer_dim`).
    pub fn project_into(&self, feature: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_row(feature)?;
        if out.len() != self.buffer_dim {
            return Err(Error::DimensionMismatch {
                what: "projection output",
                expected: self.buffer_dim,
                got: out.len(),
            });
        }
        self.multiply(feature, 1, out);
        relu(out);
        Ok(())
    }

    /// `out = X W^B` for `rows` row-major inputs packed in `x`.
    ///
    /// The GEMM kernel blocks the inner dimension with fixed sizes and
    /// accumulates every output element in the same order whatever the row
    /// count, so a row gives the same bits alone or inside a batch.
    fn multiply(&self, x: &[f64], rows: usize, out: &mut [f64]) {
        let (k, n) = (self.input_dim, self.buffer_dim);
        debug_assert_eq!(x.len(), rows * k);
        debug_assert_eq!(out.len(), rows * n);
        // SAFETY: `x` is rows x k, `weights` is k x n and `out` is rows x n,
        // all row-major and contiguous, so every strided access is in bounds.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                x.as_ptr(),
                k as isize,
                1,
                self.weights.as_ptr(),
                n as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn check_row(&self, feature: &[f64]) -> Result<()> {
        if feature.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                what: "projection input",
                expected: self.input_dim,
                got: feature.len(),
            });
        }
        if !feature.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("projection input"));
        }
        Ok(())
    }

    pub fn project(&self, feature: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.buffer_dim];
        self.project_into(feature, &mut out)?;
        Ok(out)
    }

    /// Projects a batch of rows into an `n x buffer_dim` matrix.
    pub fn project_rows<'a, I>(&self, rows: I) -> Result<DMatrix<f64>>
    where
        I: IntoIterator<Item = &'a [f64]>,
        I::IntoIter: ExactSizeIterator,
    {
        let rows = rows.into_iter();
        let n = rows.len();
        let mut x = Vec::with_capacity(n * self.input_dim);
        for row in rows {
            self.check_row(row)?;
            x.extend_from_slice(row);
        }
        let mut data = vec![0.0; n * self.buffer_dim];
        if n > 0 {
            self.multiply(&x, n, &mut data);
        }
        relu(&mut data);
        Ok(DMatrix::from_row_slice(n, self.buffer_dim, &data))
    }

    /// Projects every row of `features` (n x input_dim).
    pub fn project_matrix(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if features.ncols() != self.input_dim {
            return Err(Error::DimensionMismatch {
                what: "projection input",
                expected: self.input_dim,
                got: features.ncols(),
            });
        }
        let rows: Vec<Vec<f64>> = features
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect();
        self.project_rows(rows.iter().map(Vec::as_slice))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let a = ProjectionBuffer::new(7, 6, 9).unwrap();
        let b = ProjectionBuffer::new(7, 6, 9).unwrap();
        assert_eq!(a.weights(), b.weights());
    }

    #[test]
    fn seeds_differ_almost_everywhere() {
        let a = ProjectionBuffer::new(1, 32, 64).unwrap();
        let b = ProjectionBuffer::new(2, 32, 64).unwrap();
        let differing = a
            .weights()
            .iter()
            .zip(b.weights())
            .filter(|(x, y)| x != y)
            .count();
        assert!(differing as f64 >= 0.99 * a.weights().len() as f64);
    }

    #[test]
    fn batch_rows_match_single_rows_bitwise() {
        // dims beyond the GEMM blocking so every kernel edge case is hit
        let b = ProjectionBuffer::new(9, 300, 700).unwrap();
        let mut g = GaussianStream::new(4);
        for n in [1usize, 2, 3, 5, 8, 17, 64] {
            let rows: Vec<Vec<f64>> = (0..n).map(|_| g.by_ref().take(300).collect()).collect();
            let batch = b.project_rows(rows.iter().map(Vec::as_slice)).unwrap();
            for (i, row) in rows.iter().enumerate() {
                let single = b.project(row).unwrap();
                for (j, v) in single.iter().enumerate() {
                    assert_eq!(
                        v.to_bits(),
                        batch[(i, j)].to_bits(),
                        "n={n} row {i} col {j}"
                    );
                }
            }
        }
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(ProjectionBuffer::new(0, 0, 4).is_err());
        assert!(ProjectionBuffer::new(0, 4, 0).is_err());
    }

    #[test]
    fn zero_input_projects_to_zero() {
        let b = ProjectionBuffer::new(3, 4, 10).unwrap();
        assert!(b.project(&[0.0; 4]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_identity_with_negated_input() {
        let b = ProjectionBuffer::new(11, 5, 40).unwrap();
        let f = [0.3, -1.2, 0.7, 2.0, -0.1];
        let neg: Vec<f64> = f.iter().map(|v| -v).collect();
        let pos = b.project(&f).unwrap();
        let negp = b.project(&neg).unwrap();
        let linear = DMatrix::from_row_slice(1, 5, &f) * b.matrix();
        for j in 0..40 {
            assert!(pos[j] == 0.0 || negp[j] == 0.0, "supports overlap at {j}");
            assert!((pos[j] - negp[j] - linear[(0, j)]).abs() < 1e-12);
        }
    }

    #[test]
    fn width_and_finiteness_checked() {
        let b = ProjectionBuffer::new(3, 4, 10).unwrap();
        assert!(matches!(
            b.project(&[1.0; 3]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            b.project(&[1.0, f64::NAN, 0.0, 0.0]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn gaussian_stream_pinned_prefix() {
        // frozen from the first run; any change here breaks reproducibility of saved runs
        let first: Vec<f64> = GaussianStream::new(1993).take(4).collect();
        let bits: Vec<u64> = first.iter().map(|v| v.to_bits()).collect();
        assert_eq!(
            bits,
            [
                4589216928699647534,
                4593736453989630216,
                4611432022774409163,
                4573233278877607247
            ]
        );
    }
}
