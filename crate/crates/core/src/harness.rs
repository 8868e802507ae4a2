//! Task streams, the learning and inference loops, and run reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::analytic::{AnalyticState, OneHot};
use crate::buffer::ProjectionBuffer;
use crate::calibration::ugc_fuse_f32;
use crate::config::{Branches, LambdaSetting, RunConfig, SplitMode};
use crate::error::{invalid, Error, Result};
use crate::lambda::{argmax, select_lambda, subsample_indices, CandidateScore};
use crate::semantic::{refine, FusionWeights, PrototypeBank};
use crate::store::{load_prototype_bank, read_dataset_file, FeatureRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    /// Sorted global class ids.
    pub classes: Vec<u32>,
    pub train: Vec<FeatureRecord>,
    pub test: Vec<FeatureRecord>,
}

/// Ordered tasks over disjoint class sets.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    tasks: Vec<Task>,
}

impl TaskStream {
    /// Builds a stream from explicit class groups, routing each record to
    /// the task owning its label. Records of unlisted classes are dropped.
    pub fn from_groups(
        groups: Vec<Vec<u32>>,
        train: Vec<FeatureRecord>,
        test: Vec<FeatureRecord>,
    ) -> Result<Self> {
        let mut owner = BTreeMap::new();
        for (t, group) in groups.iter().enumerate() {
            for &c in group {
                if owner.insert(c, t).is_some() {
                    return Err(invalid(format!("class {c} appears in more than one task")));
                }
            }
        }
        let mut tasks: Vec<Task> = groups
            .into_iter()
            .map(|mut classes| {
                classes.sort_unstable();
                Task {
                    classes,
                    train: Vec::new(),
                    test: Vec::new(),
                }
            })
            .collect();
        for r in train {
            if let Some(&t) = owner.get(&r.label) {
                tasks[t].train.push(r);
            }
        }
        for r in test {
            if let Some(&t) = owner.get(&r.label) {
                tasks[t].test.push(r);
            }
        }
        Ok(Self { tasks })
    }

    /// Groups classes by the `task_id` carried in the training records.
    pub fn from_task_ids(train: Vec<FeatureRecord>, test: Vec<FeatureRecord>) -> Result<Self> {
        let mut by_task: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
        for r in &train {
            by_task.entry(r.task_id).or_default().insert(r.label);
        }
        let groups = by_task
            .into_values()
            .map(|s| s.into_iter().collect())
            .collect();
        Self::from_groups(groups, train, test)
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Union of the classes of tasks `0..=t`, sorted.
    pub fn seen_classes(&self, t: usize) -> Vec<u32> {
        let mut all: Vec<u32> = self.tasks[..=t]
            .iter()
            .flat_map(|task| task.classes.iter().copied())
            .collect();
        all.sort_unstable();
        all
    }
}

/// Seeded permutation of the class ids, cut into `tasks` contiguous groups.
/// The first `C mod T` groups get one extra class.
pub fn partition_classes(classes: &[u32], tasks: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    if tasks == 0 {
        return Err(invalid("task count must be >= 1"));
    }
    if tasks > classes.len() {
        return Err(invalid(format!(
            "cannot split {} classes into {tasks} tasks",
            classes.len()
        )));
    }
    let mut order = classes.to_vec();
    order.sort_unstable();
    order.dedup();
    if order.len() != classes.len() {
        return Err(invalid("duplicate class ids"));
    }
    order.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    let base = order.len() / tasks;
    let extra = order.len() % tasks;
    let mut groups = Vec::with_capacity(tasks);
    let mut start = 0;
    for t in 0..tasks {
        let size = base + usize::from(t < extra);
        groups.push(order[start..start + size].to_vec());
        start += size;
    }
    Ok(groups)
}

/// Shuffles the classes present in `train` or `test` with `seed` and splits
/// them into `tasks` tasks.
pub fn split_stream(
    train: Vec<FeatureRecord>,
    test: Vec<FeatureRecord>,
    tasks: usize,
    seed: u64,
) -> Result<TaskStream> {
    let classes: BTreeSet<u32> = train.iter().chain(&test).map(|r| r.label).collect();
    let classes: Vec<u32> = classes.into_iter().collect();
    let groups = partition_classes(&classes, tasks, seed)?;
    TaskStream::from_groups(groups, train, test)
}

/// Calibration, branch selection and random projection.
#[derive(Debug, Clone)]
pub struct Featurizer {
    buffer: ProjectionBuffer,
    branches: Branches,
}

impl Featurizer {
    pub fn new(buffer: ProjectionBuffer, branches: Branches) -> Self {
        Self { buffer, branches }
    }

    /// Builds the projection buffer for records with the given branch dims.
    pub fn for_dims(
        adapter_dim: usize,
        clip_dim: usize,
        branches: Branches,
        buffer_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let input_dim = match branches {
            Branches::Dual => adapter_dim + clip_dim,
            Branches::Adapter => adapter_dim,
            Branches::Clip => clip_dim,
        };
        if input_dim == 0 {
            return Err(invalid(format!(
                "{branches:?} selects no feature components"
            )));
        }
        Ok(Self::new(
            ProjectionBuffer::new(seed, input_dim, buffer_dim)?,
            branches,
        ))
    }

    pub fn buffer(&self) -> &ProjectionBuffer {
        &self.buffer
    }

    pub fn fuse(&self, record: &FeatureRecord) -> Result<Vec<f64>> {
        match self.branches {
            Branches::Dual => ugc_fuse_f32(&record.adapter, &record.clip),
            Branches::Adapter => ugc_fuse_f32(&record.adapter, &[]),
            Branches::Clip => ugc_fuse_f32(&[], &record.clip),
        }
    }

    /// Fused and projected rows, `n x buffer_dim`.
    pub fn featurize(&self, records: &[FeatureRecord]) -> Result<DMatrix<f64>> {
        let fused = records
            .iter()
            .map(|r| self.fuse(r))
            .collect::<Result<Vec<_>>>()?;
        self.buffer.project_rows(fused.iter().map(Vec::as_slice))
    }
}

fn labels_of(records: &[FeatureRecord], class_count: usize) -> Result<OneHot> {
    OneHot::new(
        records.iter().map(|r| r.label as usize).collect(),
        class_count,
    )
}

/// λ used for a run and how it was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaChoice {
    pub lambda: f64,
    pub mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<CandidateScore>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample: Option<usize>,
}

/// Resolves λ; `auto` runs LOOCV on the base task's projected features.
pub fn choose_lambda(
    featurizer: &Featurizer,
    base_task: &Task,
    setting: &LambdaSetting,
    seed: u64,
) -> Result<LambdaChoice> {
    match setting {
        LambdaSetting::Fixed(lambda) => Ok(LambdaChoice {
            lambda: *lambda,
            mode: "fixed".into(),
            scores: None,
            subsample: None,
        }),
        LambdaSetting::Auto { grid, cap } => {
            let n = base_task.train.len();
            let idx = subsample_indices(n, *cap, seed);
            let records: Vec<FeatureRecord> =
                idx.iter().map(|&i| base_task.train[i].clone()).collect();
            let class_count = records
                .iter()
                .map(|r| r.label as usize + 1)
                .max()
                .unwrap_or(0);
            let features = featurizer.featurize(&records)?;
            let selection = select_lambda(&features, &labels_of(&records, class_count)?, grid)?;
            Ok(LambdaChoice {
                lambda: selection.lambda,
                mode: "auto".into(),
                scores: Some(selection.scores),
                subsample: (n > *cap).then_some(*cap),
            })
        }
    }
}

/// Expands the class set, then streams the task's training data through
/// RLS in chunks of `chunk_rows`.
pub fn learn_task(
    state: &mut AnalyticState,
    featurizer: &Featurizer,
    task: &Task,
    chunk_rows: usize,
) -> Result<()> {
    if task.train.is_empty() {
        return Err(invalid("task has no training samples"));
    }
    if chunk_rows == 0 {
        return Err(invalid("chunk size must be >= 1"));
    }
    let needed = task
        .train
        .iter()
        .map(|r| r.label as usize + 1)
        .max()
        .unwrap_or(0)
        .max(state.class_count());
    state.expand_classes(needed)?;
    for chunk in task.train.chunks(chunk_rows) {
        let features = featurizer.featurize(chunk)?;
        state.rls_update(&features, &labels_of(chunk, needed)?)?;
    }
    Ok(())
}

/// Learning phase over every task, one pass.
pub fn run_learning(
    stream: &TaskStream,
    featurizer: &Featurizer,
    lambda: f64,
    chunk_rows: usize,
) -> Result<AnalyticState> {
    if stream.is_empty() {
        return Err(invalid("empty task stream"));
    }
    let mut state = AnalyticState::new(featurizer.buffer().buffer_dim(), 0, lambda)?;
    for task in stream.tasks() {
        learn_task(&mut state, featurizer, task, chunk_rows)?;
    }
    Ok(state)
}

/// Decision-level settings for inference.
#[derive(Debug, Clone)]
pub struct InferenceSettings<'a> {
    /// `None` evaluates the analytic logits alone.
    pub bank: Option<&'a PrototypeBank>,
    pub k: usize,
    pub weights: FusionWeights,
    pub chunk_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    /// 1-based stage index.
    pub task: usize,
    pub classes_seen: usize,
    pub test_samples: usize,
    /// Percent.
    pub accuracy: f64,
    pub learn_seconds: f64,
    pub infer_seconds: f64,
}

/// Accuracy over the test data of every class seen through task `t` (0-based),
/// predicting only among those classes.
pub fn run_inference(
    state: &AnalyticState,
    featurizer: &Featurizer,
    stream: &TaskStream,
    t: usize,
    settings: &InferenceSettings<'_>,
) -> Result<StageMetrics> {
    if t >= stream.len() {
        return Err(invalid(format!(
            "stage {t} beyond stream of {}",
            stream.len()
        )));
    }
    let started = Instant::now();
    let seen: Vec<usize> = stream.seen_classes(t).iter().map(|&c| c as usize).collect();
    if let Some(&max) = seen.last() {
        if max >= state.class_count() {
            return Err(invalid(format!(
                "state knows {} classes but class {max} was seen",
                state.class_count()
            )));
        }
    }
    if let Some(bank) = settings.bank {
        if let Some(&max) = seen.last() {
            if max >= bank.class_count() {
                return Err(Error::LabelOutOfRange {
                    label: max,
                    class_count: bank.class_count(),
                });
            }
        }
    }
    let chunk_rows = settings.chunk_rows.max(1);
    let mut correct = 0usize;
    let mut total = 0usize;
    for task in &stream.tasks()[..=t] {
        for chunk in task.test.chunks(chunk_rows) {
            let logits = state.predict(&featurizer.featurize(chunk)?)?;
            for (i, record) in chunk.iter().enumerate() {
                let analytic: Vec<f64> = seen.iter().map(|&c| logits[(i, c)]).collect();
                let pos = match settings.bank {
                    Some(bank) => {
                        let clip: Vec<f64> = record.clip.iter().map(|&v| v as f64).collect();
                        if clip.is_empty() {
                            return Err(invalid("semantic refinement needs the clip branch"));
                        }
                        refine(
                            &analytic,
                            &clip,
                            bank,
                            settings.k,
                            Some(&seen),
                            settings.weights,
                        )?
                        .1
                    }
                    None => argmax(analytic.iter().copied()),
                };
                if seen[pos] == record.label as usize {
                    correct += 1;
                }
                total += 1;
            }
        }
    }
    let accuracy = if total == 0 {
        0.0
    } else {
        100.0 * correct as f64 / total as f64
    };
    Ok(StageMetrics {
        task: t + 1,
        classes_seen: seen.len(),
        test_samples: total,
        accuracy,
        learn_seconds: 0.0,
        infer_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Settings echoed into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub seed: u64,
    pub tasks: usize,
    pub split: SplitMode,
    pub lambda: LambdaChoice,
    pub buffer_dim: usize,
    pub buffer_seed: u64,
    pub buffer_distribution: String,
    pub branches: Branches,
    pub cse_enabled: bool,
    pub cse_k: usize,
    pub fusion_analytic: f64,
    pub fusion_semantic: f64,
    pub chunk_rows: usize,
}

pub const BUFFER_DISTRIBUTION: &str = "normal(0,1) chacha20 polar, row-major";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub stages: Vec<StageMetrics>,
    /// Accuracy after the final task.
    pub last_accuracy: f64,
    /// Mean of the per-stage accuracies.
    pub average_accuracy: f64,
    pub learn_seconds: f64,
    pub infer_seconds: f64,
    pub config: ConfigEcho,
}

impl MetricsReport {
    pub fn new(stages: Vec<StageMetrics>, config: ConfigEcho) -> Result<Self> {
        if stages.is_empty() {
            return Err(invalid("report needs at least one stage"));
        }
        let last_accuracy = stages.last().unwrap().accuracy;
        let average_accuracy = stages.iter().map(|s| s.accuracy).sum::<f64>() / stages.len() as f64;
        Ok(Self {
            learn_seconds: stages.iter().map(|s| s.learn_seconds).sum(),
            infer_seconds: stages.iter().map(|s| s.infer_seconds).sum(),
            stages,
            last_accuracy,
            average_accuracy,
            config,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn stages_csv(&self) -> String {
        let mut out =
            String::from("task,classes_seen,test_samples,accuracy,learn_seconds,infer_seconds\n");
        for s in &self.stages {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.task,
                s.classes_seen,
                s.test_samples,
                s.accuracy,
                s.learn_seconds,
                s.infer_seconds
            ));
        }
        out
    }

    /// Copy with wall-clock fields zeroed, for determinism comparisons.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        r.learn_seconds = 0.0;
        r.infer_seconds = 0.0;
        for s in &mut r.stages {
            s.learn_seconds = 0.0;
            s.infer_seconds = 0.0;
        }
        r
    }
}

/// Writes `report.json` and `stages.csv` into `dir`.
pub fn emit_report(report: &MetricsReport, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let json = dir.join("report.json");
    let csv = dir.join("stages.csv");
    fs::File::create(&json)?.write_all(report.to_json()?.as_bytes())?;
    fs::File::create(&csv)?.write_all(report.stages_csv().as_bytes())?;
    Ok((json, csv))
}

/// Inputs of one experiment, already loaded.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: Vec<FeatureRecord>,
    pub test: Vec<FeatureRecord>,
    pub bank: Option<PrototypeBank>,
}

impl ExperimentData {
    pub fn load(config: &RunConfig) -> Result<Self> {
        let (_, train) = read_dataset_file(&config.train)?;
        let (_, test) = read_dataset_file(&config.test)?;
        let bank = match (&config.bank, config.cse_enabled) {
            (Some(path), true) => Some(PrototypeBank::build(&load_prototype_bank(path)?)?),
            _ => None,
        };
        Ok(Self { train, test, bank })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Progress {
    completed: usize,
    stages: Vec<StageMetrics>,
    config: ConfigEcho,
}

/// One seed end to end: split, pick λ on the base task, then for each task
/// learn and evaluate on everything seen so far.
///
/// With `checkpoint_dir`, the state and finished stages are saved after
/// every task (`state.rls`, `progress.json`); with `resume` a matching
/// checkpoint is picked up and the run continues after its last task.
pub fn run_experiment(
    data: &ExperimentData,
    config: &RunConfig,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<MetricsReport> {
    run_experiment_until(data, config, seed, checkpoint_dir, usize::MAX)
}

/// [`run_experiment`] that stops once `stop_after` tasks are complete
/// (counting tasks restored from a checkpoint). The report covers the
/// stages finished so far; a later call with `resume` continues the run.
pub fn run_experiment_until(
    data: &ExperimentData,
    config: &RunConfig,
    seed: u64,
    checkpoint_dir: Option<&Path>,
    stop_after: usize,
) -> Result<MetricsReport> {
    let stream = match config.split {
        SplitMode::Shuffle => {
            split_stream(data.train.clone(), data.test.clone(), config.tasks, seed)?
        }
        SplitMode::File => TaskStream::from_task_ids(data.train.clone(), data.test.clone())?,
    };
    if let Some(task) = stream.tasks().iter().position(|t| t.train.is_empty()) {
        return Err(invalid(format!(
            "task {} has no training samples",
            task + 1
        )));
    }
    let first = &stream.tasks()[0].train[0];
    let buffer_seed = config.buffer_seed.unwrap_or(seed);
    let featurizer = Featurizer::for_dims(
        first.adapter.len(),
        first.clip.len(),
        config.branches,
        config.buffer_dim,
        buffer_seed,
    )?;
    if config.cse_enabled && data.bank.is_none() {
        return Err(invalid("cse is enabled but no prototype bank was loaded"));
    }

    let lambda = choose_lambda(&featurizer, &stream.tasks()[0], &config.lambda, seed)?;
    let echo = ConfigEcho {
        seed,
        tasks: stream.len(),
        split: config.split,
        lambda: lambda.clone(),
        buffer_dim: config.buffer_dim,
        buffer_seed,
        buffer_distribution: BUFFER_DISTRIBUTION.into(),
        branches: config.branches,
        cse_enabled: config.cse_enabled,
        cse_k: config.cse_k,
        fusion_analytic: config.fusion.analytic,
        fusion_semantic: config.fusion.semantic,
        chunk_rows: config.chunk_rows,
    };
    let settings = InferenceSettings {
        bank: if config.cse_enabled {
            data.bank.as_ref()
        } else {
            None
        },
        k: config.cse_k,
        weights: config.fusion,
        chunk_rows: config.chunk_rows,
    };

    let mut state = AnalyticState::new(config.buffer_dim, 0, lambda.lambda)?;
    let mut stages = Vec::with_capacity(stream.len());
    if let (Some(dir), true) = (checkpoint_dir, config.resume) {
        if let Some((s, p)) = load_checkpoint(dir, &echo)? {
            state = s;
            stages = p.stages;
        }
    }

    for (t, task) in stream
        .tasks()
        .iter()
        .enumerate()
        .skip(stages.len())
        .take(stop_after.saturating_sub(stages.len()))
    {
        let started = Instant::now();
        learn_task(&mut state, &featurizer, task, config.chunk_rows)?;
        let learn_seconds = started.elapsed().as_secs_f64();
        let mut stage = run_inference(&state, &featurizer, &stream, t, &settings)?;
        stage.learn_seconds = learn_seconds;
        stages.push(stage);
        if let Some(dir) = checkpoint_dir {
            save_checkpoint(dir, &state, &stages, &echo)?;
        }
    }
    MetricsReport::new(stages, echo)
}

fn save_checkpoint(
    dir: &Path,
    state: &AnalyticState,
    stages: &[StageMetrics],
    echo: &ConfigEcho,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    state.save(dir.join("state.rls"))?;
    let progress = Progress {
        completed: stages.len(),
        stages: stages.to_vec(),
        config: echo.clone(),
    };
    let tmp = dir.join("progress.json.tmp");
    fs::write(&tmp, serde_json::to_string_pretty(&progress)?)?;
    fs::rename(tmp, dir.join("progress.json"))?;
    Ok(())
}

fn load_checkpoint(dir: &Path, echo: &ConfigEcho) -> Result<Option<(AnalyticState, Progress)>> {
    let progress_path = dir.join("progress.json");
    let state_path = dir.join("state.rls");
    if !progress_path.exists() || !state_path.exists() {
        return Ok(None);
    }
    let progress: Progress = serde_json::from_str(&fs::read_to_string(progress_path)?)?;
    if &progress.config != echo {
        return Err(invalid(
            "checkpoint was written with a different configuration",
        ));
    }
    if progress.completed != progress.stages.len() {
        return Err(invalid("checkpoint progress is inconsistent"));
    }
    Ok(Some((AnalyticState::load(state_path)?, progress)))
}

/// Mean and sample standard deviation of one metric across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub last_accuracy: MeanStd,
    pub average_accuracy: MeanStd,
}

impl SeedSummary {
    pub fn of(reports: &[MetricsReport]) -> Self {
        let last: Vec<f64> = reports.iter().map(|r| r.last_accuracy).collect();
        let avg: Vec<f64> = reports.iter().map(|r| r.average_accuracy).collect();
        Self {
            seeds: reports.iter().map(|r| r.config.seed).collect(),
            last_accuracy: MeanStd::of(&last),
            average_accuracy: MeanStd::of(&avg),
        }
    }
}

/// Runs every configured seed, writing `seed-<s>/{report.json, stages.csv}`
/// (plus checkpoints) and `summary.json` under the output directory.
pub fn run_all_seeds(config: &RunConfig) -> Result<(Vec<MetricsReport>, SeedSummary)> {
    let data = ExperimentData::load(config)?;
    let mut reports = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let dir = config.output.join(format!("seed-{seed}"));
        let checkpoints = dir.join("checkpoint");
        let report = run_experiment(
            &data,
            config,
            seed,
            config.checkpoint.then_some(checkpoints.as_path()),
        )?;
        emit_report(&report, &dir)?;
        reports.push(report);
    }
    let summary = SeedSummary::of(&reports);
    fs::create_dir_all(&config.output)?;
    fs::write(
        config.output.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok((reports, summary))
}
