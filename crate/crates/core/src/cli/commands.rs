use std::fmt::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::args::Command;
use super::{invalid, resolve, runtime, write_json, write_resolved, CliError};
use crate::baselines::{magnitude_prune, Norm, PruneSpec};
use crate::folding::{discover_groups, merge_networks, sparsity_to_k, FoldPlan, MergeMode, RepairMode};
use crate::harness::{
    decode_csv, evaluate, layer_correlation_report, render_sweep_table, sweep_to_files, train, Architecture, Dataset,
    SweepConfig, SweepInputs, SyntheticTask, TrainConfig,
};
use crate::nn::io::{load_dataset, load_model, save_dataset, save_model, write_atomic};
use crate::nn::{bn_recalibrate, Network};
use crate::repair::{deep_inversion, fold_and_repair, DIConfig, RepairInputs};

pub(crate) fn execute(command: Command) -> Result<String, CliError> {
    match command {
        Command::MakeData(a) => make_data(resolve(a.overrides(), a.common.config.as_deref())?),
        Command::Train(a) => train_cmd(resolve(a.overrides().map_err(invalid)?, a.common.config.as_deref())?),
        Command::Fold(a) => fold(resolve(a.overrides(), a.common.config.as_deref())?),
        Command::Prune(a) => prune(resolve(a.overrides(), a.common.config.as_deref())?),
        Command::Eval(a) => eval(resolve(a.overrides(), a.common.config.as_deref())?),
        Command::Sweep(a) => sweep_cmd(resolve(a.overrides(), a.common.config.as_deref())?),
        Command::Merge(a) => merge(resolve(a.overrides(), a.common.config.as_deref())?),
        Command::Di(a) => di(resolve(a.overrides(), a.common.config.as_deref())?),
        Command::Report(a) => report(resolve(a.overrides(), a.common.config.as_deref())?),
    }
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    value.as_deref().ok_or_else(|| invalid(format!("missing --{flag}")))
}

fn model(path: &Path) -> Result<Network, CliError> {
    load_model(path).map_err(runtime)
}

/// Loads a dataset and views it with the network's input shape.
fn dataset_for(path: &Path, net: &Network) -> Result<Dataset, CliError> {
    let data = load_dataset(path).map_err(runtime)?;
    data.reshaped(&net.input_shape).ok_or_else(|| {
        runtime(format!(
            "{}: examples of shape {:?} do not fit network input {:?}",
            path.display(),
            data.input_shape(),
            net.input_shape
        ))
    })
}

fn check_sparsity(s: f64) -> Result<(), CliError> {
    if (0.0..1.0).contains(&s) {
        Ok(())
    } else {
        Err(invalid(format!("sparsity {s} outside [0, 1)")))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct MakeDataConfig {
    out: Option<PathBuf>,
    seed: u64,
    classes: usize,
    dim: usize,
    separation: f64,
    train: usize,
    test: usize,
    calibration: usize,
}

impl Default for MakeDataConfig {
    fn default() -> Self {
        let task = SyntheticTask::default();
        Self {
            out: None,
            seed: task.seed,
            classes: task.classes,
            dim: task.dim,
            separation: task.separation,
            train: 4096,
            test: 1024,
            calibration: 512,
        }
    }
}

fn make_data(c: MakeDataConfig) -> Result<String, CliError> {
    let out = required(&c.out, "out")?;
    if c.classes < 2 || c.dim == 0 || c.separation.is_nan() || c.separation < 0.0 {
        return Err(invalid("need classes >= 2, dim >= 1 and separation >= 0"));
    }
    let task = SyntheticTask {
        classes: c.classes,
        dim: c.dim,
        separation: c.separation,
        seed: c.seed,
    };
    let splits = task.splits(c.train, c.test, c.calibration);
    std::fs::create_dir_all(out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    for (name, data) in [
        ("train", &splits.train),
        ("test", &splits.test),
        ("calib", &splits.calibration),
    ] {
        save_dataset(data, &out.join(format!("{name}.fdst"))).map_err(runtime)?;
    }
    write_json(&out.join("data.config.json"), &c)?;
    Ok(format!("wrote {}\n", out.display()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum ArchKind {
    MlpBn,
    Mlp,
    ConvBn,
    Residual,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainRunConfig {
    data: Option<PathBuf>,
    arch: ArchKind,
    width: usize,
    train: TrainConfig,
    out: Option<PathBuf>,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            data: None,
            arch: ArchKind::MlpBn,
            width: 128,
            train: TrainConfig::default(),
            out: None,
        }
    }
}

fn train_cmd(c: TrainRunConfig) -> Result<String, CliError> {
    let (data_path, out) = (required(&c.data, "data")?, required(&c.out, "out")?);
    if c.width == 0 {
        return Err(invalid("width must be positive"));
    }
    let arch = match c.arch {
        ArchKind::MlpBn => Architecture::MlpBn { width: c.width },
        ArchKind::Mlp => Architecture::Mlp { width: c.width },
        ArchKind::ConvBn => Architecture::ConvBn { channels: c.width },
        ArchKind::Residual => Architecture::Residual { width: c.width },
    };
    let data = load_dataset(data_path).map_err(runtime)?;
    let dim = data.features.row_len();
    let net = arch.build(dim, data.class_count, c.train.seed).map_err(invalid)?;
    let data = data
        .reshaped(&net.input_shape)
        .expect("input shape built from the data");
    let trained = train(&net, &data, &c.train).map_err(|e| match e {
        crate::harness::TrainError::Config(m) => invalid(m),
        e => runtime(e),
    })?;
    save_model(&trained, out).map_err(runtime)?;
    write_resolved(out, &c)?;
    Ok(format!(
        "train_accuracy={}\n",
        evaluate(&trained, &data).map_err(runtime)?
    ))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FoldRunConfig {
    model: Option<PathBuf>,
    sparsity: Vec<f64>,
    repair: RepairMode,
    calib: Option<PathBuf>,
    seed: u64,
    out: Option<PathBuf>,
    report: Option<PathBuf>,
    inversion: DIConfig,
}

impl Default for FoldRunConfig {
    fn default() -> Self {
        Self {
            model: None,
            sparsity: vec![0.5],
            repair: RepairMode::Ar,
            calib: None,
            seed: 0,
            out: None,
            report: None,
            inversion: DIConfig::default(),
        }
    }
}

fn fold(c: FoldRunConfig) -> Result<String, CliError> {
    let (model_path, out) = (required(&c.model, "model")?, required(&c.out, "out")?);
    c.sparsity.iter().try_for_each(|&s| check_sparsity(s))?;
    c.inversion.validate().map_err(invalid)?;
    if c.repair == RepairMode::Data && c.calib.is_none() {
        return Err(invalid("--repair data needs --calib"));
    }
    let net = model(model_path)?;
    let plan = match c.sparsity.as_slice() {
        [] => return Err(invalid("missing --sparsity")),
        [s] => FoldPlan::uniform(*s, c.repair, c.seed),
        many => {
            let groups = discover_groups(&net).map_err(runtime)?.groups;
            if groups.len() != many.len() {
                return Err(invalid(format!(
                    "{} sparsities for {} foldable groups",
                    many.len(),
                    groups.len()
                )));
            }
            let ks = groups
                .iter()
                .zip(many)
                .map(|(g, &s)| sparsity_to_k(g.channels, s))
                .collect::<Result<Vec<_>, _>>()
                .map_err(invalid)?;
            FoldPlan::clusters(ks, c.repair, c.seed)
        }
    };
    let calibration = match &c.calib {
        Some(p) => vec![dataset_for(p, &net)?.features],
        None => Vec::new(),
    };
    let inputs = RepairInputs {
        calibration: &calibration,
        inversion: c.inversion.clone(),
    };
    let (folded, fold_report, summary) = fold_and_repair(&net, &plan, &inputs).map_err(runtime)?;
    save_model(&folded, out).map_err(runtime)?;
    if let Some(r) = &c.report {
        write_json(r, &json!({ "plan": plan, "fold": fold_report, "repair": summary }))?;
    }
    write_resolved(out, &c)?;
    Ok(format!("total_J={}\n", fold_report.total_cost()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PruneRunConfig {
    model: Option<PathBuf>,
    sparsity: f64,
    norm: Norm,
    out: Option<PathBuf>,
    report: Option<PathBuf>,
}

impl Default for PruneRunConfig {
    fn default() -> Self {
        Self {
            model: None,
            sparsity: 0.5,
            norm: Norm::L1,
            out: None,
            report: None,
        }
    }
}

fn prune(c: PruneRunConfig) -> Result<String, CliError> {
    let (model_path, out) = (required(&c.model, "model")?, required(&c.out, "out")?);
    check_sparsity(c.sparsity)?;
    let net = model(model_path)?;
    let (pruned, report) = magnitude_prune(
        &net,
        &PruneSpec {
            sparsity: c.sparsity,
            norm: c.norm,
        },
    )
    .map_err(runtime)?;
    save_model(&pruned, out).map_err(runtime)?;
    if let Some(r) = &c.report {
        write_json(r, &report)?;
    }
    write_resolved(out, &c)?;
    Ok(format!("removed_energy={}\n", report.total_removed_energy()))
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalRunConfig {
    model: Option<PathBuf>,
    data: Option<PathBuf>,
}

fn eval(c: EvalRunConfig) -> Result<String, CliError> {
    let net = model(required(&c.model, "model")?)?;
    let data = dataset_for(required(&c.data, "data")?, &net)?;
    Ok(format!("accuracy={}\n", evaluate(&net, &data).map_err(runtime)?))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SweepRunConfig {
    model: Option<PathBuf>,
    data: Option<PathBuf>,
    calib: Option<PathBuf>,
    jobs: usize,
    out: Option<PathBuf>,
    grid: SweepConfig,
}

impl Default for SweepRunConfig {
    fn default() -> Self {
        Self {
            model: None,
            data: None,
            calib: None,
            jobs: 1,
            out: None,
            grid: SweepConfig::default(),
        }
    }
}

fn sweep_cmd(c: SweepRunConfig) -> Result<String, CliError> {
    let (model_path, data_path, out) = (
        required(&c.model, "model")?,
        required(&c.data, "data")?,
        required(&c.out, "out")?,
    );
    let calib_path = required(&c.calib, "calib")?;
    c.grid.validate().map_err(invalid)?;
    if c.jobs == 0 {
        return Err(invalid("--jobs must be positive"));
    }
    let net = model(model_path)?;
    let test = dataset_for(data_path, &net)?;
    let calibration = dataset_for(calib_path, &net)?;
    let inputs = SweepInputs {
        base: &net,
        test: &test,
        calibration: &calibration,
    };
    let result = sweep_to_files(&inputs, &c.grid, c.jobs, out, &out.with_extension("json")).map_err(runtime)?;
    write_resolved(out, &c)?;
    Ok(format!("rows={}\n", result.rows.len()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct MergeRunConfig {
    models: Vec<PathBuf>,
    mode: MergeMode,
    calib: Option<PathBuf>,
    seed: u64,
    out: Option<PathBuf>,
    report: Option<PathBuf>,
}

impl Default for MergeRunConfig {
    fn default() -> Self {
        Self {
            models: Vec::new(),
            mode: MergeMode::Free,
            calib: None,
            seed: 0,
            out: None,
            report: None,
        }
    }
}

fn merge(c: MergeRunConfig) -> Result<String, CliError> {
    let out = required(&c.out, "out")?;
    let [a, b] = c.models.as_slice() else {
        return Err(invalid("merge needs exactly two --model flags"));
    };
    let (a, b) = (model(a)?, model(b)?);
    let (mut merged, report) = merge_networks(&a, &b, c.mode, c.seed).map_err(runtime)?;
    if let Some(p) = &c.calib {
        if merged.has_batch_norm() {
            merged = bn_recalibrate(&merged, &[dataset_for(p, &merged)?.features]).map_err(runtime)?;
        }
    }
    save_model(&merged, out).map_err(runtime)?;
    if let Some(r) = &c.report {
        write_json(r, &report)?;
    }
    write_resolved(out, &c)?;
    Ok(format!(
        "total_J={}\n",
        report.layers.iter().map(|l| l.cost).sum::<f64>()
    ))
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DiRunConfig {
    model: Option<PathBuf>,
    out: Option<PathBuf>,
    report: Option<PathBuf>,
    inversion: DIConfig,
}

fn di(c: DiRunConfig) -> Result<String, CliError> {
    let (model_path, out) = (required(&c.model, "model")?, required(&c.out, "out")?);
    c.inversion.validate().map_err(invalid)?;
    let net = model(model_path)?;
    let inv = deep_inversion(&net, &c.inversion).map_err(runtime)?;
    let dataset = Dataset {
        features: inv.batch.clone(),
        labels: inv.labels.clone(),
        class_count: net.class_count,
    };
    save_dataset(&dataset, out).map_err(runtime)?;
    if let Some(r) = &c.report {
        write_json(r, &json!({ "config": c.inversion, "loss": inv.loss }))?;
    }
    write_resolved(out, &c)?;
    Ok(format!("final_loss={}\n", inv.loss.last().copied().unwrap_or(f64::NAN)))
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ReportRunConfig {
    tables: Vec<PathBuf>,
    model: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
}

fn report(c: ReportRunConfig) -> Result<String, CliError> {
    if c.tables.is_empty() && c.model.is_none() {
        return Err(invalid(
            "nothing to report: give sweep tables and/or --model with --data",
        ));
    }
    let mut text = String::new();
    for t in &c.tables {
        let bytes = std::fs::read(t).map_err(|e| runtime(format!("{}: {e}", t.display())))?;
        let rows = decode_csv(&bytes).map_err(runtime)?;
        let _ = writeln!(text, "## {}\n", t.display());
        text.push_str(&render_sweep_table(&rows));
    }
    if let Some(m) = &c.model {
        let net = model(m)?;
        let data = dataset_for(required(&c.data, "data")?, &net)?;
        let layers = layer_correlation_report(&net, &data.features).map_err(runtime)?;
        let _ = writeln!(text, "## matched channel correlation ({})\n", m.display());
        let _ = writeln!(
            text,
            "| site | channels | median | histogram (20 bins over [-1, 1]) |\n|---|---|---|---|"
        );
        for l in &layers {
            let bins: Vec<String> = l.histogram.iter().map(usize::to_string).collect();
            let _ = writeln!(
                text,
                "| {} | {} | {:.4} | {} |",
                l.site,
                l.correlations.len(),
                l.median(),
                bins.join(" ")
            );
        }
        text.push('\n');
    }
    match &c.out {
        Some(out) => {
            write_atomic(out, text.as_bytes()).map_err(runtime)?;
            write_resolved(out, &c)?;
            Ok(format!("wrote {}\n", out.display()))
        }
        None => Ok(text),
    }
}
