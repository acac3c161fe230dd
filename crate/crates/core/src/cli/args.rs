use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use crate::baselines::Norm;
use crate::folding::{MergeMode, RepairMode};
use crate::harness::Method;

/// Parses a flag through the same serde names the config file uses.
fn named<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(Value::String(s.to_owned())).map_err(|e| e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "foldkit",
    version,
    about = "Data-free channel folding for small neural networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train/test/calibration datasets.
    MakeData(MakeDataArgs),
    /// Train a catalog network with SGD.
    Train(TrainArgs),
    /// Fold a network and repair its statistics.
    Fold(FoldArgs),
    /// Structured magnitude pruning.
    Prune(PruneArgs),
    /// Print the top-1 accuracy of a network on a dataset.
    Eval(EvalArgs),
    /// Run a method × sparsity × seed grid into a CSV table.
    Sweep(SweepArgs),
    /// Merge two networks of identical architecture.
    Merge(MergeArgs),
    /// Synthesize a batch by Deep Inversion.
    Di(DiArgs),
    /// Render sweep tables and channel-correlation histograms.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON file whose settings override flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MakeDataArgs {
    /// Output directory for train.fdst, test.fdst and calib.fdst.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = "FOLDKIT_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub separation: Option<f64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// mlp-bn, mlp, conv-bn or residual.
    #[arg(long)]
    pub arch: Option<String>,
    /// Hidden width (channel count for conv-bn).
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight decay as `l1:<lambda>` or `l2:<lambda>`.
    #[arg(long)]
    pub decay: Option<String>,
    #[arg(long, env = "FOLDKIT_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct FoldArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// One value for every group, or one value per group in forward order.
    #[arg(long)]
    pub sparsity: Vec<f64>,
    #[arg(long, value_parser = named::<RepairMode>)]
    pub repair: Option<RepairMode>,
    /// Calibration dataset (required by `--repair data`).
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long, env = "FOLDKIT_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub sparsity: Option<f64>,
    #[arg(long, value_parser = named::<Norm>)]
    pub norm: Option<Norm>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Test dataset (accuracy and variance probe).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Calibration dataset for fold-r.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long)]
    pub sparsity: Vec<f64>,
    #[arg(long, value_parser = named::<Method>)]
    pub method: Vec<Method>,
    #[arg(long, env = "FOLDKIT_SEED", value_delimiter = ',')]
    pub seed: Vec<u64>,
    /// Worker threads.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// CSV table; the JSON sidecar goes next to it with a `.json` extension.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    /// The two networks, in order.
    #[arg(long)]
    pub model: Vec<PathBuf>,
    #[arg(long, value_parser = named::<MergeMode>)]
    pub mode: Option<MergeMode>,
    /// Calibration dataset; when given, BatchNorm is recalibrated after merging.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long, env = "FOLDKIT_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct DiArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, env = "FOLDKIT_SEED")]
    pub seed: Option<u64>,
    /// Synthetic batch, written in the dataset format with its target labels.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON with the loss trace.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Sweep CSV tables to render.
    pub tables: Vec<PathBuf>,
    /// Network for the channel-correlation histograms.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Probe dataset for the histograms.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Write the rendered report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

fn nonempty<T: serde::Serialize>(v: &[T]) -> Value {
    if v.is_empty() {
        Value::Null
    } else {
        json!(v)
    }
}

impl MakeDataArgs {
    pub fn overrides(&self) -> Value {
        json!({"out": self.out, "seed": self.seed, "classes": self.classes, "dim": self.dim, "separation": self.separation})
    }
}

impl TrainArgs {
    pub fn overrides(&self) -> Result<Value, String> {
        let decay = match self.decay.as_deref() {
            None => Value::Null,
            Some("none") => json!({"kind": "none"}),
            Some(s) => {
                let (kind, lambda) = s
                    .split_once(':')
                    .ok_or_else(|| format!("--decay {s:?}: expected l1:<lambda> or l2:<lambda>"))?;
                let lambda: f64 = lambda.parse().map_err(|e| format!("--decay {s:?}: {e}"))?;
                json!({"kind": kind, "lambda": lambda})
            }
        };
        Ok(json!({
            "data": self.data, "arch": self.arch, "width": self.width, "out": self.out,
            "train": {"epochs": self.epochs, "lr": self.lr, "seed": self.seed, "weight_decay": decay},
        }))
    }
}

impl FoldArgs {
    pub fn overrides(&self) -> Value {
        json!({
            "model": self.model, "sparsity": nonempty(&self.sparsity), "repair": self.repair, "calib": self.calib,
            "seed": self.seed, "out": self.out, "report": self.report,
        })
    }
}

impl PruneArgs {
    pub fn overrides(&self) -> Value {
        json!({"model": self.model, "sparsity": self.sparsity, "norm": self.norm, "out": self.out, "report": self.report})
    }
}

impl EvalArgs {
    pub fn overrides(&self) -> Value {
        json!({"model": self.model, "data": self.data})
    }
}

impl SweepArgs {
    pub fn overrides(&self) -> Value {
        json!({
            "model": self.model, "data": self.data, "calib": self.calib, "jobs": self.jobs, "out": self.out,
            "grid": {"sparsities": nonempty(&self.sparsity), "methods": nonempty(&self.method), "seeds": nonempty(&self.seed)},
        })
    }
}

impl MergeArgs {
    pub fn overrides(&self) -> Value {
        json!({
            "models": nonempty(&self.model), "mode": self.mode, "calib": self.calib, "seed": self.seed,
            "out": self.out, "report": self.report,
        })
    }
}

impl DiArgs {
    pub fn overrides(&self) -> Value {
        json!({"model": self.model, "out": self.out, "report": self.report, "inversion": {"seed": self.seed}})
    }
}

impl ReportArgs {
    pub fn overrides(&self) -> Value {
        json!({"tables": nonempty(&self.tables), "model": self.model, "data": self.data, "out": self.out})
    }
}
