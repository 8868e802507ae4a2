//! `anacil`: inspect embedding files, pick λ, run incremental experiments,
//! generate synthetic streams and sweep subspace rigidity.

use std::fs::{self, File};
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use anacil_core::analytic::{AnalyticState, OneHot, SNAPSHOT_MAGIC};
use anacil_core::config::Branches;
use anacil_core::harness::{run_all_seeds, Featurizer};
use anacil_core::lambda::{select_lambda_capped, LambdaGrid, DEFAULT_SAMPLE_CAP};
use anacil_core::rigidity::{rigidity_sweep, spearman, SweepConfig, SyntheticStreamSpec};
use anacil_core::store::{
    load_prototype_bank, read_dataset_file, BranchStats, BANK_MAGIC, DATASET_MAGIC,
};
use anacil_core::{generate_stream, RunConfig};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(
    name = "anacil",
    version,
    about = "Analytic class-incremental learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a JSON summary of a dataset, prototype bank or RLS snapshot.
    Inspect { file: PathBuf },
    /// Leave-one-out accuracy for each λ on a dataset's projected features.
    LambdaSearch {
        #[arg(long)]
        data: PathBuf,
        /// `lo..hi` (decades, e.g. 1e-8..1e0) or a comma-separated list.
        #[arg(long, default_value = "1e-8..1e0")]
        grid: String,
        #[arg(long, default_value_t = 2048)]
        buffer_dim: usize,
        #[arg(long, default_value_t = 1993)]
        buffer_seed: u64,
        #[arg(long, default_value = "dual")]
        branches: String,
        /// Rows above this count are subsampled.
        #[arg(long, default_value_t = DEFAULT_SAMPLE_CAP)]
        cap: usize,
        #[arg(long, default_value_t = 1993)]
        seed: u64,
    },
    /// Run an experiment from a key = value config file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate a synthetic stream (train.bin, test.bin, bank.bin) from a JSON spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Frozen-subspace error as the task subspace rotates away.
    Rigidity {
        /// Rotation angles in degrees.
        #[arg(long, value_delimiter = ',', default_value = "0,15,30,45,60,75,90")]
        angles: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 8)]
        rank: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 1993)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Inspect { file } => print_json(&inspect(&file)?),
        Command::LambdaSearch {
            data,
            grid,
            buffer_dim,
            buffer_seed,
            branches,
            cap,
            seed,
        } => print_json(&lambda_search(
            &data,
            &grid,
            buffer_dim,
            buffer_seed,
            branches.parse()?,
            cap,
            seed,
        )?),
        Command::Run { config } => {
            let config = RunConfig::load(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            let (_, summary) = run_all_seeds(&config)?;
            print_json(&json!({
                "output": config.output,
                "summary": summary,
            }))
        }
        Command::Synth { spec, out } => {
            let text =
                fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let spec: SyntheticStreamSpec = serde_json::from_str(&text)?;
            let stream = generate_stream(&spec)?;
            stream.write_to(&out)?;
            fs::write(out.join("spec.json"), serde_json::to_string_pretty(&spec)?)?;
            print_json(&json!({
                "out": out,
                "train_records": stream.train.len(),
                "test_records": stream.test.len(),
                "tasks": spec.task_count(),
                "bank": stream.bank.is_some(),
            }))
        }
        Command::Rigidity {
            angles,
            trials,
            dim,
            rank,
            noise,
            seed,
            out,
        } => {
            let config = SweepConfig {
                ambient_dim: dim,
                rank,
                noise,
                trials,
                seed,
                ..Default::default()
            };
            let radians: Vec<f64> = angles.iter().map(|a| a.to_radians()).collect();
            let sweep = rigidity_sweep(&radians, &config)?;
            fs::write(&out, sweep.to_csv())
                .with_context(|| format!("writing {}", out.display()))?;
            let errors: Vec<f64> = sweep.rows.iter().map(|r| r.mean_error).collect();
            let sines: Vec<f64> = radians.iter().map(|a| a.sin()).collect();
            let rho = if errors.len() >= 2 {
                spearman(&errors, &sines).ok()
            } else {
                None
            };
            print_json(&json!({
                "out": out,
                "spearman_vs_sin": rho,
                "non_decreasing": errors.windows(2).all(|w| w[1] >= w[0]),
                "task1_error": sweep.task1_error,
                "rows": sweep.rows,
            }))
        }
    }
}

fn print_json(value: &Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn inspect(path: &Path) -> Result<Value> {
    let mut magic = [0u8; 8];
    File::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .read_exact(&mut magic)
        .with_context(|| format!("{} is too short to hold a magic", path.display()))?;
    if &magic == DATASET_MAGIC {
        let (header, records) = read_dataset_file(path)?;
        let mut per_class = vec![0usize; header.class_count as usize];
        let mut tasks = std::collections::BTreeMap::<u32, usize>::new();
        for r in &records {
            per_class[r.label as usize] += 1;
            *tasks.entry(r.task_id).or_default() += 1;
        }
        Ok(json!({
            "kind": "dataset",
            "magic": String::from_utf8_lossy(DATASET_MAGIC),
            "header": header,
            "branches": {
                "adapter": BranchStats::from_rows(
                    header.adapter_dim as usize,
                    records.iter().map(|r| r.adapter.as_slice()),
                ),
                "clip": BranchStats::from_rows(
                    header.clip_dim as usize,
                    records.iter().map(|r| r.clip.as_slice()),
                ),
            },
            "records_per_class": per_class,
            "records_per_task": tasks,
        }))
    } else if &magic == BANK_MAGIC {
        let bank = load_prototype_bank(path)?;
        Ok(json!({
            "kind": "prototype_bank",
            "magic": String::from_utf8_lossy(BANK_MAGIC),
            "class_count": bank.class_count,
            "template_count": bank.template_count,
            "dim": bank.dim,
            "class_names": bank.class_names,
        }))
    } else if &magic == SNAPSHOT_MAGIC {
        let state = AnalyticState::read_snapshot(BufReader::new(File::open(path)?))?;
        Ok(json!({
            "kind": "rls_snapshot",
            "magic": String::from_utf8_lossy(SNAPSHOT_MAGIC),
            "buffer_dim": state.buffer_dim(),
            "class_count": state.class_count(),
            "lambda": state.lambda(),
            "samples_seen": state.samples_seen(),
            "weights_frobenius": state.weights().norm(),
        }))
    } else {
        bail!(
            "{}: unrecognized magic {:?}",
            path.display(),
            String::from_utf8_lossy(&magic)
        )
    }
}

fn lambda_search(
    data: &Path,
    grid: &str,
    buffer_dim: usize,
    buffer_seed: u64,
    branches: Branches,
    cap: usize,
    seed: u64,
) -> Result<Value> {
    let grid = LambdaGrid::parse(grid)?;
    let (header, records) = read_dataset_file(data)?;
    let featurizer = Featurizer::for_dims(
        header.adapter_dim as usize,
        header.clip_dim as usize,
        branches,
        buffer_dim,
        buffer_seed,
    )?;
    let features = featurizer.featurize(&records)?;
    let targets = OneHot::new(
        records.iter().map(|r| r.label as usize).collect(),
        header.class_count as usize,
    )?;
    let selection = select_lambda_capped(&features, &targets, &grid, cap, seed)?;
    Ok(json!({
        "data": data,
        "samples": records.len(),
        "subsample": selection.subsample,
        "buffer_dim": buffer_dim,
        "buffer_seed": buffer_seed,
        "selected": selection.lambda,
        "table": selection.scores,
    }))
}
