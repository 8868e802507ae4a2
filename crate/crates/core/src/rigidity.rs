//! Subspace geometry for frozen feature extractors, and synthetic streams
//! whose class means drift away from the first task's subspace.
//!
//! A classifier fitted on features confined to a subspace `S₁` can only
//! reproduce the part of a target that lies in `S₁`; the remainder,
//! `‖(I - P)y‖²`, is an error floor that grows with the principal angles
//! between `S₁` and the subspace the new task actually lives in.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::analytic::{ridge_fit, OneHot};
use crate::buffer::GaussianStream;
use crate::error::{invalid, Error, Result};
use crate::lambda::argmax;
use crate::store::{
    save_prototype_bank, write_dataset_file, DatasetHeader, FeatureRecord, PrototypeBankFile,
};

/// Columns whose residual norm falls below this (relative) are rank-deficient.
pub const RANK_TOLERANCE: f64 = 1e-10;
const ORTHONORMAL_TOLERANCE: f64 = 1e-10;

/// Matrix with orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceBasis {
    u: DMatrix<f64>,
}

impl SubspaceBasis {
    /// Modified Gram-Schmidt with a second re-orthogonalization pass.
    /// Fails if any column is (numerically) in the span of the previous ones.
    pub fn orthonormalize(columns: &DMatrix<f64>) -> Result<Self> {
        let (d, r) = columns.shape();
        if r == 0 || r > d {
            return Err(invalid(format!(
                "cannot build rank-{r} basis in dimension {d}"
            )));
        }
        let mut u = DMatrix::<f64>::zeros(d, r);
        for j in 0..r {
            let mut v = columns.column(j).clone_owned();
            let original = v.norm();
            if original == 0.0 || !original.is_finite() {
                return Err(invalid(format!("column {j} is zero or non-finite")));
            }
            for _ in 0..2 {
                for k in 0..j {
                    let q = u.column(k);
                    let proj = q.dot(&v);
                    v.axpy(-proj, &q, 1.0);
                }
            }
            let norm = v.norm();
            if norm <= RANK_TOLERANCE * original {
                return Err(invalid(format!(
                    "column {j} is linearly dependent (relative residual {:e})",
                    norm / original
                )));
            }
            u.set_column(j, &(v / norm));
        }
        Ok(Self { u })
    }

    /// Accepts `u` as-is after checking `UᵀU = I`.
    pub fn from_orthonormal(u: DMatrix<f64>) -> Result<Self> {
        let gram = u.tr_mul(&u);
        let r = u.ncols();
        if r == 0 {
            return Err(invalid("empty basis"));
        }
        let dev = (gram - DMatrix::identity(r, r)).amax();
        // NaN deviations must fail too
        if dev.is_nan() || dev > ORTHONORMAL_TOLERANCE {
            return Err(invalid(format!(
                "basis columns are not orthonormal (max deviation {dev:e})"
            )));
        }
        Ok(Self { u })
    }

    /// Standard basis vectors `e_i` for the given indices.
    pub fn axes(dim: usize, indices: &[usize]) -> Result<Self> {
        let mut u = DMatrix::zeros(dim, indices.len());
        for (j, &i) in indices.iter().enumerate() {
            if i >= dim {
                return Err(invalid(format!(
                    "axis {i} out of range for dimension {dim}"
                )));
            }
            u[(i, j)] = 1.0;
        }
        Self::from_orthonormal(u)
    }

    pub fn ambient_dim(&self) -> usize {
        self.u.nrows()
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.u
    }

    /// `cos(angle) U + sin(angle) V`, the rotation of `self` toward `toward`
    /// in the planes spanned by matching columns. `toward` must be orthogonal
    /// to `self` with the same rank.
    pub fn rotated_toward(&self, toward: &SubspaceBasis, angle: f64) -> Result<Self> {
        if toward.u.shape() != self.u.shape() {
            return Err(Error::DimensionMismatch {
                what: "rotation target rank",
                expected: self.rank(),
                got: toward.rank(),
            });
        }
        // `cos(FRAC_PI_2)` is 6e-17, not 0; an angle within rounding of a
        // right angle must give an exactly orthogonal subspace.
        let snap = |v: f64| if v.abs() < 4.0 * f64::EPSILON { 0.0 } else { v };
        Self::from_orthonormal(&self.u * snap(angle.cos()) + &toward.u * snap(angle.sin()))
    }
}

/// `P = UUᵀ`.
pub fn projector(basis: &SubspaceBasis) -> DMatrix<f64> {
    basis.u.clone() * basis.u.transpose()
}

fn check_dim(basis: &SubspaceBasis, len: usize) -> Result<()> {
    if basis.ambient_dim() != len {
        return Err(Error::DimensionMismatch {
            what: "ambient dimension",
            expected: basis.ambient_dim(),
            got: len,
        });
    }
    Ok(())
}

/// `‖(I - UUᵀ) y‖²`.
pub fn projection_residual(basis: &SubspaceBasis, y: &[f64]) -> Result<f64> {
    check_dim(basis, y.len())?;
    let y = DVector::from_column_slice(y);
    let coords = basis.u.tr_mul(&y);
    let residual = &y - &basis.u * coords;
    Ok(residual.norm_squared())
}

/// Orders the pair so the first basis has rank >= the second.
fn wider_first<'a>(
    a: &'a SubspaceBasis,
    b: &'a SubspaceBasis,
) -> (&'a SubspaceBasis, &'a SubspaceBasis) {
    if a.rank() >= b.rank() {
        (a, b)
    } else {
        (b, a)
    }
}

/// `(I - UUᵀ) V`: the part of `V` outside span `U`. Its singular values are
/// the sines of the principal angles, without the cancellation of `1 - cos²`.
fn outside(wide: &SubspaceBasis, narrow: &SubspaceBasis) -> DMatrix<f64> {
    &narrow.u - &wide.u * wide.u.tr_mul(&narrow.u)
}

/// Principal angles in ascending order (`min(r₁, r₂)` of them).
///
/// Cosines come from the singular values of `U₁ᵀU₂`; angles below 45° are
/// recovered from the sines instead, which keeps small angles accurate.
pub fn principal_angles(a: &SubspaceBasis, b: &SubspaceBasis) -> Result<Vec<f64>> {
    check_dim(a, b.ambient_dim())?;
    let (wide, narrow) = wider_first(a, b);
    let mut cosines: Vec<f64> = wide
        .u
        .tr_mul(&narrow.u)
        .svd(false, false)
        .singular_values
        .iter()
        .map(|s| s.clamp(0.0, 1.0))
        .collect();
    cosines.sort_by(|x, y| y.total_cmp(x));
    let mut sines: Vec<f64> = outside(wide, narrow)
        .svd(false, false)
        .singular_values
        .iter()
        .map(|s| s.clamp(0.0, 1.0))
        .collect();
    sines.sort_by(|x, y| x.total_cmp(y));
    Ok(cosines
        .into_iter()
        .zip(sines)
        .map(|(c, s)| {
            if c > std::f64::consts::FRAC_1_SQRT_2 {
                s.asin()
            } else {
                c.acos()
            }
        })
        .collect())
}

/// `‖sin Θ‖_F = sqrt(Σ (1 - cos² θᵢ))` over the principal angles, evaluated
/// as `‖(I - U₁U₁ᵀ)U₂‖_F` (narrower basis projected off the wider one).
pub fn grassmann_distance(a: &SubspaceBasis, b: &SubspaceBasis) -> Result<f64> {
    check_dim(a, b.ambient_dim())?;
    let (wide, narrow) = wider_first(a, b);
    Ok(outside(wide, narrow).norm())
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            what: "spearman input",
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(invalid("spearman needs at least two points"));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(invalid("spearman undefined for constant input"));
    }
    Ok(cov / (vx * vy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// `rows x cols` standard normal entries, drawn in column-major order.
pub fn gaussian_matrix(rng: &mut GaussianStream, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.next_normal())
}

/// Uniform direction on the unit sphere.
pub fn unit_vector(rng: &mut GaussianStream, dim: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(dim, |_, _| rng.next_normal());
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

/// Random `rank`-dimensional subspace plus an orthogonal partner of equal rank.
pub fn random_subspace_pair(
    rng: &mut GaussianStream,
    dim: usize,
    rank: usize,
) -> Result<(SubspaceBasis, SubspaceBasis)> {
    let both = SubspaceBasis::orthonormalize(&gaussian_matrix(rng, dim, 2 * rank))?;
    let u = both.u.columns(0, rank).into_owned();
    let v = both.u.columns(rank, rank).into_owned();
    Ok((SubspaceBasis { u }, SubspaceBasis { u: v }))
}

/// Parameters of a synthetic drifting task stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticStreamSpec {
    pub class_count: usize,
    pub classes_per_task: usize,
    /// Ambient dimension of the specialized branch.
    pub adapter_dim: usize,
    /// Universal-branch dimension; 0 drops the branch.
    pub clip_dim: usize,
    /// Rank of each task's semantic subspace.
    pub rank: usize,
    /// Per-component standard deviation of specialized-branch noise.
    pub noise: f64,
    /// Per-component standard deviation of universal-branch noise.
    pub clip_noise: f64,
    /// Rotation between consecutive tasks' subspaces, radians.
    pub drift: f64,
    /// Specialized features see only the first task's subspace.
    pub frozen_specialized: bool,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub templates: usize,
    pub template_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticStreamSpec {
    fn default() -> Self {
        Self {
            class_count: 20,
            classes_per_task: 5,
            adapter_dim: 64,
            clip_dim: 32,
            rank: 8,
            noise: 0.05,
            clip_noise: 0.05,
            drift: 0.0,
            frozen_specialized: true,
            train_per_class: 20,
            test_per_class: 10,
            templates: 3,
            template_noise: 0.1,
            seed: 1993,
        }
    }
}

impl SyntheticStreamSpec {
    pub fn task_count(&self) -> usize {
        self.class_count.div_ceil(self.classes_per_task)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.classes_per_task == 0 {
            return Err(invalid(
                "synthetic stream needs classes and classes_per_task >= 1",
            ));
        }
        if self.rank == 0 {
            return Err(invalid("subspace rank must be >= 1"));
        }
        if 2 * self.rank > self.adapter_dim {
            return Err(invalid(format!(
                "rank {} needs an orthogonal partner: adapter_dim {} < {}",
                self.rank,
                self.adapter_dim,
                2 * self.rank
            )));
        }
        if self.clip_dim > 0 && self.rank > self.clip_dim {
            return Err(invalid(format!(
                "rank {} exceeds clip_dim {}",
                self.rank, self.clip_dim
            )));
        }
        if !(self.noise >= 0.0 && self.clip_noise >= 0.0 && self.template_noise >= 0.0) {
            return Err(invalid("noise levels must be >= 0"));
        }
        if !(0.0..=std::f64::consts::FRAC_PI_2).contains(&self.drift) {
            return Err(invalid("drift must lie in [0, pi/2]"));
        }
        if self.train_per_class == 0 {
            return Err(invalid("train_per_class must be >= 1"));
        }
        if self.clip_dim > 0 && self.templates == 0 {
            return Err(invalid(
                "templates must be >= 1 when the universal branch is present",
            ));
        }
        Ok(())
    }
}

/// Output of [`generate_stream`].
#[derive(Debug, Clone)]
pub struct SyntheticStream {
    pub train: Vec<FeatureRecord>,
    pub test: Vec<FeatureRecord>,
    /// Present when the universal branch is.
    pub bank: Option<PrototypeBankFile>,
    /// Subspace holding each task's class means.
    pub task_bases: Vec<SubspaceBasis>,
    pub class_count: usize,
}

impl SyntheticStream {
    pub fn header(&self, records: &[FeatureRecord]) -> DatasetHeader {
        DatasetHeader::describe(records, self.class_count as u32)
    }

    /// Writes `train.bin`, `test.bin` and, if present, `bank.bin` (+ names).
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        write_dataset_file(
            dir.join("train.bin"),
            &self.train,
            &self.header(&self.train),
        )?;
        write_dataset_file(dir.join("test.bin"), &self.test, &self.header(&self.test))?;
        if let Some(bank) = &self.bank {
            save_prototype_bank(dir.join("bank.bin"), bank)?;
        }
        Ok(())
    }
}

/// Draws a task stream. Class `c` belongs to task `c / classes_per_task`;
/// task t's class means live in the first task's subspace rotated by
/// `t * drift`. The universal branch embeds the same latent class codes
/// through one fixed orthonormal map for every task.
pub fn generate_stream(spec: &SyntheticStreamSpec) -> Result<SyntheticStream> {
    spec.validate()?;
    let mut rng = GaussianStream::new(spec.seed);
    let (base, partner) = random_subspace_pair(&mut rng, spec.adapter_dim, spec.rank)?;
    let universal = if spec.clip_dim > 0 {
        Some(SubspaceBasis::orthonormalize(&gaussian_matrix(
            &mut rng,
            spec.clip_dim,
            spec.rank,
        ))?)
    } else {
        None
    };
    let codes: Vec<DVector<f64>> = (0..spec.class_count)
        .map(|_| unit_vector(&mut rng, spec.rank))
        .collect();
    let task_bases = (0..spec.task_count())
        .map(|t| base.rotated_toward(&partner, t as f64 * spec.drift))
        .collect::<Result<Vec<_>>>()?;
    let frozen = projector(&base);

    let sample = |class: usize, rng: &mut GaussianStream| -> FeatureRecord {
        let task = class / spec.classes_per_task;
        let mean = task_bases[task].matrix() * &codes[class];
        let noise = DVector::from_fn(spec.adapter_dim, |_, _| rng.next_normal());
        let mut x = mean + noise * spec.noise;
        if spec.frozen_specialized {
            x = &frozen * x;
        }
        let clip = match &universal {
            Some(q) => {
                let noise = DVector::from_fn(spec.clip_dim, |_, _| rng.next_normal());
                (q.matrix() * &codes[class] + noise * spec.clip_noise)
                    .iter()
                    .map(|&v| v as f32)
                    .collect()
            }
            None => Vec::new(),
        };
        FeatureRecord::new(
            x.iter().map(|&v| v as f32).collect(),
            clip,
            class as u32,
            task as u32,
        )
    };

    let mut train = Vec::with_capacity(spec.class_count * spec.train_per_class);
    let mut test = Vec::with_capacity(spec.class_count * spec.test_per_class);
    for class in 0..spec.class_count {
        for _ in 0..spec.train_per_class {
            train.push(sample(class, &mut rng));
        }
        for _ in 0..spec.test_per_class {
            test.push(sample(class, &mut rng));
        }
    }

    let bank = match &universal {
        Some(q) => {
            let mut payload = Vec::with_capacity(spec.class_count * spec.templates * spec.clip_dim);
            for code in &codes {
                let proto = q.matrix() * code;
                for _ in 0..spec.templates {
                    for v in proto.iter() {
                        payload.push((v + spec.template_noise * rng.next_normal()) as f32);
                    }
                }
            }
            let names = (0..spec.class_count)
                .map(|c| format!("class_{c:03}"))
                .collect();
            Some(PrototypeBankFile::new(
                spec.class_count,
                spec.templates,
                spec.clip_dim,
                payload,
                names,
            )?)
        }
        None => None,
    };

    Ok(SyntheticStream {
        train,
        test,
        bank,
        task_bases,
        class_count: spec.class_count,
    })
}

/// Parameters of the frozen-subspace error sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub ambient_dim: usize,
    pub rank: usize,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise: f64,
    pub lambda: f64,
    pub trials: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ambient_dim: 64,
            rank: 8,
            classes: 10,
            train_per_class: 30,
            test_per_class: 30,
            noise: 0.1,
            lambda: 1e-6,
            trials: 20,
            seed: 1993,
        }
    }
}

/// One row of the sweep, averaged over trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub angle: f64,
    pub grassmann: f64,
    /// Mean `‖(I - P₁) m‖²` over test class means (unit norm).
    pub mean_residual: f64,
    /// Mean squared error `‖y - ŷ‖²` against one-hot targets.
    pub mean_error: f64,
    /// Standard error of `mean_error` across trials.
    pub error_se: f64,
    /// Misclassification rate.
    pub misclassification: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Error on a fresh draw of the first task's own distribution.
    pub task1_error: f64,
    pub task1_error_se: f64,
    pub config: SweepConfig,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "angle_deg,grassmann,mean_residual,mean_error,error_se,misclassification\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.angle.to_degrees(),
                r.grassmann,
                r.mean_residual,
                r.mean_error,
                r.error_se,
                r.misclassification
            ));
        }
        out
    }
}

fn trial_seed(root: u64, trial: usize) -> u64 {
    // splitmix64 step
    let mut z = root.wrapping_add((trial as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct EvalOutcome {
    error: f64,
    misclassified: f64,
}

fn evaluate(weights: &DMatrix<f64>, features: &DMatrix<f64>, labels: &[usize]) -> EvalOutcome {
    let logits = features * weights;
    let mut error = 0.0;
    let mut wrong = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        for (c, v) in row.iter().enumerate() {
            let target = if c == label { 1.0 } else { 0.0 };
            error += (target - v) * (target - v);
        }
        if argmax(row.iter().copied()) != label {
            wrong += 1;
        }
    }
    let n = labels.len() as f64;
    EvalOutcome {
        error: error / n,
        misclassified: wrong as f64 / n,
    }
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// For each angle: fit ridge weights on first-task features expressed in
/// the frozen subspace `S₁`, then evaluate on class data whose means are
/// rotated by that angle away from `S₁`. Every angle reuses the same
/// draws within a trial so the curve isolates the effect of rotation.
pub fn rigidity_sweep(angles: &[f64], config: &SweepConfig) -> Result<SweepResult> {
    if angles.is_empty() {
        return Err(invalid("no angles given"));
    }
    if let Some(a) = angles
        .iter()
        .find(|a| !(0.0..=std::f64::consts::FRAC_PI_2 + 1e-12).contains(*a))
    {
        return Err(invalid(format!("angle {a} outside [0, pi/2]")));
    }
    if config.trials == 0 || config.classes == 0 || config.test_per_class == 0 {
        return Err(invalid("sweep needs trials, classes and test samples >= 1"));
    }
    if 2 * config.rank > config.ambient_dim || config.rank == 0 {
        return Err(invalid("sweep needs 1 <= 2*rank <= ambient_dim"));
    }

    let (d, r, c) = (config.ambient_dim, config.rank, config.classes);
    let mut errors = vec![Vec::with_capacity(config.trials); angles.len()];
    let mut wrong = vec![0.0; angles.len()];
    let mut residuals = vec![0.0; angles.len()];
    let mut task1 = Vec::with_capacity(config.trials);
    let mut grassmann = vec![0.0; angles.len()];

    for trial in 0..config.trials {
        let mut rng = GaussianStream::new(trial_seed(config.seed, trial));
        let (base, partner) = random_subspace_pair(&mut rng, d, r)?;
        let codes: Vec<DVector<f64>> = (0..c).map(|_| unit_vector(&mut rng, r)).collect();

        let draw = |rng: &mut GaussianStream, per_class: usize| {
            let mut noise = Vec::with_capacity(c * per_class);
            let mut labels = Vec::with_capacity(c * per_class);
            for class in 0..c {
                for _ in 0..per_class {
                    noise.push(DVector::from_fn(d, |_, _| rng.next_normal()) * config.noise);
                    labels.push(class);
                }
            }
            (noise, labels)
        };
        // frozen extractor: coordinates of x in S₁
        let frozen_features = |basis: &SubspaceBasis, noise: &[DVector<f64>], labels: &[usize]| {
            let mut f = DMatrix::zeros(labels.len(), r);
            for (i, (n, &l)) in noise.iter().zip(labels).enumerate() {
                let x = basis.matrix() * &codes[l] + n;
                f.set_row(i, &base.matrix().tr_mul(&x).transpose());
            }
            f
        };

        let (train_noise, train_labels) = draw(&mut rng, config.train_per_class);
        let train = frozen_features(&base, &train_noise, &train_labels);
        let weights = ridge_fit(&train, &OneHot::new(train_labels, c)?, config.lambda)?;

        let (heldout_noise, heldout_labels) = draw(&mut rng, config.test_per_class);
        let heldout = frozen_features(&base, &heldout_noise, &heldout_labels);
        task1.push(evaluate(&weights, &heldout, &heldout_labels).error);

        let (test_noise, test_labels) = draw(&mut rng, config.test_per_class);
        for (k, &angle) in angles.iter().enumerate() {
            let rotated = base.rotated_toward(&partner, angle)?;
            let features = frozen_features(&rotated, &test_noise, &test_labels);
            let out = evaluate(&weights, &features, &test_labels);
            errors[k].push(out.error);
            wrong[k] += out.misclassified;
            let res: f64 = codes
                .iter()
                .map(|z| projection_residual(&base, (rotated.matrix() * z).as_slice()))
                .sum::<Result<f64>>()?;
            residuals[k] += res / c as f64;
            grassmann[k] += grassmann_distance(&base, &rotated)?;
        }
    }

    let t = config.trials as f64;
    let rows = angles
        .iter()
        .enumerate()
        .map(|(k, &angle)| {
            let (mean_error, error_se) = mean_and_se(&errors[k]);
            SweepRow {
                angle,
                grassmann: grassmann[k] / t,
                mean_residual: residuals[k] / t,
                mean_error,
                error_se,
                misclassification: wrong[k] / t,
            }
        })
        .collect();
    let (task1_error, task1_error_se) = mean_and_se(&task1);
    Ok(SweepResult {
        rows,
        task1_error,
        task1_error_se,
        config: config.clone(),
    })
}
