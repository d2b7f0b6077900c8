use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use combo_core::adapter::Checkpoint;
use combo_core::baselines::{layer_sweep, linear_probe, LayerCurve, LayerMode, LinearProbeConfig, ProbeTarget};
use combo_core::features::{naive_stack_param_count_for, FeatureDataset, Split};
use combo_core::synthgen::generate_to_dir;
use combo_core::training::{evaluate_checkpoint, run_training, score_models, select_and_retrain, ImportanceReport, TrainReport};
use combo_core::{ComboError, Precision, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::plot;

pub const REPORT_FILE: &str = "report.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.cmbc";
pub const SCORES_FILE: &str = "scores.json";

#[derive(Debug, Parser)]
#[command(name = "combo", version, about = "Train and evaluate probing adapters over frozen feature maps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by the config-driven subcommands; each overrides the
/// matching config entry.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub layers: Option<LayerMode>,
    #[arg(long)]
    pub precision: Option<Precision>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset from the config's `synth` section into
    /// --out, or into the config's `dataset` path when --out is absent.
    Synth(Common),
    /// Summarize a dataset's manifest.
    Inspect {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Train the adapter; writes report.json and checkpoint.cmbc to --out.
    Train(Common),
    /// Accuracy of a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: Split,
    },
    /// Rank backbones by group-penalized projection norms.
    Score(Common),
    /// Retrain on the top-n backbones.
    Select {
        #[command(flatten)]
        common: Common,
        #[arg(long = "top-n")]
        top_n: Option<usize>,
        /// Importance report to select from; scored afresh when absent.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Linear-probe sweep over every layer of every backbone.
    Probe(Common),
    /// Render report JSON files as SVG charts into --out.
    Plot {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

/// What a command produced: JSON for stdout and a one-line human summary.
#[derive(Debug)]
pub struct Output {
    pub json: serde_json::Value,
    pub summary: String,
}

/// Exit status for an error: 2 for configuration, 3 for data and format
/// problems, 4 for anything else.
pub fn exit_code(err: &ComboError) -> i32 {
    match err {
        ComboError::Config(_) => 2,
        ComboError::Manifest(_)
        | ComboError::Layout(_)
        | ComboError::Data(_)
        | ComboError::IncompleteBundle { .. }
        | ComboError::Format { .. }
        | ComboError::Io { .. }
        | ComboError::Json { .. } => 3,
        _ => 4,
    }
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(d) = &common.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    if let Some(s) = common.seed {
        cfg.train.seed = s;
        cfg.probe.seed = s;
        cfg.scoring.seeds = vec![s];
        if let Some(spec) = cfg.synth.as_mut() {
            spec.seed = s;
        }
    }
    if let Some(l) = common.lambda {
        cfg.train.lambda_reg = l;
        cfg.scoring.lambda = l;
    }
    if let Some(m) = common.layers {
        cfg.layers = m;
    }
    if let Some(p) = common.precision {
        cfg.train.precision = p;
    }
    Ok(cfg)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> ComboError {
    ComboError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|source| ComboError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable")
}

fn pretty(v: &serde_json::Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

pub fn cmd_synth(common: &Common) -> Result<Output> {
    let cfg = load(common)?;
    let spec = cfg
        .synth
        .as_ref()
        .ok_or_else(|| ComboError::Config("config has no \"synth\" section".into()))?;
    // An explicit --out wins; otherwise the dataset lands where training will look for it.
    let out = match &common.out {
        Some(p) => p.as_path(),
        None => cfg.dataset_dir()?,
    };
    let ds = generate_to_dir(spec, out)?;
    let mut summary = inspect_dataset(&ds);
    summary.summary = format!("wrote {} | {}", out.display(), summary.summary);
    Ok(summary)
}

fn inspect_dataset(ds: &FeatureDataset) -> Output {
    let m = ds.manifest();
    let hash: String = m.hash().iter().map(|b| format!("{b:02x}")).collect();
    let naive = naive_stack_param_count_for(&m.backbones, m.num_classes);
    let json = json!({
        "name": m.name,
        "backbones": m.backbones.len(),
        "num_classes": m.num_classes,
        "num_samples": m.num_samples,
        "protocol": m.protocol,
        "splits": m.splits,
        "total_dim": m.total_dim(),
        "min_tokens": m.min_tokens(),
        "concat_order": m.concat_order,
        "backbone_details": m.backbones,
        "naive_stack_weights": naive.weights,
        "manifest_hash": hash,
    });
    let summary = format!(
        "K={} C={} splits={}/{}/{} D={} T={}",
        m.backbones.len(),
        m.num_classes,
        m.splits.train,
        m.splits.val,
        m.splits.test,
        m.total_dim(),
        m.min_tokens()
    );
    Output { json, summary }
}

pub fn cmd_inspect(dataset: &Path) -> Result<Output> {
    Ok(inspect_dataset(&FeatureDataset::read(dataset)?))
}

fn report_output(report: &TrainReport, out: &Path, extra: &str) -> Output {
    let last = report.epochs.last().expect("at least one epoch");
    Output {
        json: to_json(report),
        summary: format!(
            "{extra}val_acc={:.4} train_loss={:.4} epochs={} -> {}",
            report.final_val_accuracy,
            last.train_loss,
            report.epochs.len(),
            out.display()
        ),
    }
}

fn save_run(out: &Path, report: &TrainReport, checkpoint: &Checkpoint) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write_file(&out.join(REPORT_FILE), &pretty(&to_json(report)))?;
    checkpoint.write(&out.join(CHECKPOINT_FILE))
}

pub fn cmd_train(common: &Common) -> Result<Output> {
    let cfg = load(common)?;
    let ds = FeatureDataset::read(cfg.dataset_dir()?)?;
    let out = cfg.out_path()?;
    let adapter = combo_core::baselines::restrict_layers(&ds, &cfg.adapter, cfg.layers)?;
    let (mut report, checkpoint, wall) = run_training(&ds, &adapter, &cfg.train)?;
    report.run_config = Some(cfg.echo());
    save_run(out, &report, &checkpoint)?;
    Ok(report_output(&report, out, &format!("{:.1}s ", wall.as_secs_f64())))
}

pub fn cmd_eval(common: &Common, checkpoint: Option<&Path>, split: Split) -> Result<Output> {
    let cfg = load(common)?;
    let path = checkpoint
        .or(cfg.checkpoint.as_deref())
        .ok_or_else(|| ComboError::Config("no checkpoint given".into()))?;
    let ds = FeatureDataset::read(cfg.dataset_dir()?)?;
    let ck = Checkpoint::read(path)?;
    let accuracy = evaluate_checkpoint(&ds, &ck, split, cfg.train.precision)?;
    let samples = ds.split_indices(split).len();
    Ok(Output {
        json: json!({
            "checkpoint": path,
            "split": split,
            "samples": samples,
            "accuracy": accuracy,
        }),
        summary: format!("{split:?} accuracy {accuracy:.4} over {samples} samples"),
    })
}

fn score(cfg: &RunConfig, ds: &FeatureDataset) -> Result<ImportanceReport> {
    let mut report = score_models(ds, &cfg.adapter, &cfg.train, &cfg.scoring.seeds, cfg.scoring.lambda)?;
    report.run_config = Some(cfg.echo());
    Ok(report)
}

pub fn cmd_score(common: &Common) -> Result<Output> {
    let cfg = load(common)?;
    let ds = FeatureDataset::read(cfg.dataset_dir()?)?;
    let report = score(&cfg, &ds)?;
    let json = to_json(&report);
    if let Some(out) = &cfg.out {
        write_file(out, &pretty(&json))?;
    }
    Ok(Output {
        summary: format!("ranking {}", report.ranking.join(" > ")),
        json,
    })
}

pub fn cmd_select(common: &Common, top_n: Option<usize>, scores: Option<&Path>) -> Result<Output> {
    let cfg = load(common)?;
    let ds = FeatureDataset::read(cfg.dataset_dir()?)?;
    let out = cfg.out_path()?;
    let n = top_n
        .or(cfg.scoring.top_n)
        .ok_or_else(|| ComboError::Config("no top-n given (--top-n or scoring.top_n)".into()))?;
    let importance = match scores {
        Some(p) => read_json::<ImportanceReport>(p)?,
        None => {
            let r = score(&cfg, &ds)?;
            std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
            write_file(&out.join(SCORES_FILE), &pretty(&to_json(&r)))?;
            r
        }
    };
    let hash: String = ds.manifest().hash().iter().map(|b| format!("{b:02x}")).collect();
    if importance.manifest_hash != hash {
        return Err(ComboError::Manifest("importance report was computed on a different dataset".into()));
    }
    let (mut report, checkpoint, _) = select_and_retrain(&ds, &cfg.adapter, &cfg.train, &importance, n)?;
    report.run_config = Some(cfg.echo());
    save_run(out, &report, &checkpoint)?;
    let chosen = importance.top(n)?.join(",");
    Ok(report_output(&report, out, &format!("selected {chosen} ")))
}

/// Output of `probe`: one curve per backbone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub curves: Vec<LayerCurve>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

fn single_layer_curve(ds: &FeatureDataset, backbone: &str, layer: u32, cfg: &LinearProbeConfig) -> Result<LayerCurve> {
    let r = linear_probe(
        ds,
        &LinearProbeConfig {
            target: Some(ProbeTarget {
                backbone_id: backbone.to_string(),
                layer_id: layer,
            }),
            ..cfg.clone()
        },
    )?;
    Ok(LayerCurve {
        backbone_id: backbone.to_string(),
        rows: vec![r.best.clone()],
        grid: r.per_lr,
        run_config: None,
    })
}

pub fn cmd_probe(common: &Common) -> Result<Output> {
    let cfg = load(common)?;
    let ds = FeatureDataset::read(cfg.dataset_dir()?)?;
    let mut curves = Vec::new();
    let targets: Vec<_> = match &cfg.probe.target {
        Some(t) => vec![(t.backbone_id.clone(), Some(t.layer_id))],
        None => ds.manifest().ordered_backbones().map(|b| (b.backbone_id.clone(), None)).collect(),
    };
    for (id, layer) in targets {
        let meta = ds
            .manifest()
            .backbone(&id)
            .ok_or_else(|| ComboError::Manifest(format!("unknown backbone {id}")))?;
        curves.push(match (layer, meta.layer_ids.as_slice()) {
            (Some(l), _) => single_layer_curve(&ds, &id, l, &cfg.probe)?,
            (None, [only]) => single_layer_curve(&ds, &id, *only, &cfg.probe)?,
            (None, _) => layer_sweep(&ds, &id, &cfg.probe)?,
        });
    }
    let summary = curves
        .iter()
        .map(|c| {
            let best = c.rows.iter().find(|r| r.layer == c.best_layer()).expect("best row");
            format!("{}: best layer {} ({:.3})", c.backbone_id, best.layer, best.val_acc)
        })
        .collect::<Vec<_>>()
        .join("; ");
    let json = to_json(&ProbeReport {
        curves,
        run_config: Some(cfg.echo()),
    });
    if let Some(out) = &cfg.out {
        write_file(out, &pretty(&json))?;
    }
    Ok(Output { json, summary })
}

pub fn cmd_plot(out: &Path, inputs: &[PathBuf]) -> Result<Output> {
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut written = Vec::new();
    for input in inputs {
        let value: serde_json::Value = read_json(input)?;
        let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("plot").to_string();
        let charts: Vec<(String, String)> = if value.get("epochs").is_some() {
            let r: TrainReport = serde_json::from_value(value).map_err(|e| bad_plot(input, e))?;
            vec![(format!("{stem}.svg"), plot::training_curve(&r))]
        } else if value.get("ranking").is_some() {
            let r: ImportanceReport = serde_json::from_value(value).map_err(|e| bad_plot(input, e))?;
            vec![(format!("{stem}.svg"), plot::score_bars(&r))]
        } else if value.get("curves").is_some() {
            let r: ProbeReport = serde_json::from_value(value).map_err(|e| bad_plot(input, e))?;
            r.curves
                .iter()
                .map(|c| (format!("{stem}.{}.svg", c.backbone_id), plot::layer_curve(c)))
                .collect()
        } else {
            return Err(ComboError::Data(format!("{}: not a recognized report", input.display())));
        };
        for (name, svg) in charts {
            let path = out.join(name);
            write_file(&path, svg.as_bytes())?;
            written.push(path);
        }
    }
    Ok(Output {
        summary: format!("wrote {} chart(s) to {}", written.len(), out.display()),
        json: json!({ "written": written }),
    })
}

fn bad_plot(path: &Path, e: serde_json::Error) -> ComboError {
    ComboError::Data(format!("{}: {e}", path.display()))
}

/// Runs one parsed invocation.
pub fn execute(cli: &Cli) -> Result<Output> {
    match &cli.command {
        Command::Synth(c) => cmd_synth(c),
        Command::Inspect { dataset } => cmd_inspect(dataset),
        Command::Train(c) => cmd_train(c),
        Command::Eval { common, checkpoint, split } => cmd_eval(common, checkpoint.as_deref(), *split),
        Command::Score(c) => cmd_score(c),
        Command::Select { common, top_n, scores } => cmd_select(common, *top_n, scores.as_deref()),
        Command::Probe(c) => cmd_probe(c),
        Command::Plot { out, inputs } => cmd_plot(out, inputs),
    }
}
