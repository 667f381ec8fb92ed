use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use irdrop_core::baselines::{CnnModel, GbtModel};
use irdrop_core::bench::{run_bench, write_bench_csv, BenchModel};
use irdrop_core::config::{ModelKind, RunConfig};
use irdrop_core::data::{load_dataset, save_dataset, select_features, split_dataset, Dataset, FeatureSetId};
use irdrop_core::gnn::TrainedModel;
use irdrop_core::graph::{build_graph, degree_rank};
use irdrop_core::metrics::compute_report;
use irdrop_core::pipeline;
use irdrop_core::synth::{synthesize, GenSidecar};

const RESOLVED: &str = "config.resolved.toml";

/// IR-drop estimation on synthetic power grids.
///
/// Output files (all under --out):
///   gen          dataset.csv (net_id,x_um,y_um,resistance_ohm,p_total_w,i_peak_a,
///                i_avg_a,t_rise_s,t_fall_s,tau_s,ir_drop_mv), dataset.gen.json
///   graph-stats  degree_rank_t<threshold>.csv (rank,degree)
///   train        model.json, history.csv (per epoch or per tree)
///   eval         predictions.csv (net_id,pred_mv,label_mv,error_mv),
///                report.json, report.txt
///   predict      predictions.csv (net_id,pred_mv)
///   bench        bench.csv (model,phase,rep,seconds,epochs)
/// Every command also writes config.resolved.toml.
///
/// Exit codes: 0 success, 2 usage, 3 invalid input, 4 numeric failure.
#[derive(Parser)]
#[command(name = "irdrop", version, verbatim_doc_comment)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic circuit and solve it exactly.
    Gen(GenArgs),
    /// Degree-rank tables of the proximity graph at several thresholds.
    GraphStats(GraphStatsArgs),
    /// Train a GNN (gcn, gat, gin) or a baseline (gbt, cnn).
    Train(TrainArgs),
    /// Score a model (or a predictions CSV) against labelled nets.
    Eval(EvalArgs),
    /// Write per-net predictions.
    Predict(PredictArgs),
    /// Time training and prediction of several models against the solver.
    Bench(BenchArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_cells: Option<usize>,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    /// Timing coupling strength.
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    pad_stride: Option<usize>,
    #[arg(long)]
    pin_resistance: Option<f64>,
}

#[derive(Args)]
struct GraphStatsArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated thresholds in µm [default: the configured threshold].
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    thresholds: Option<Vec<f64>>,
}

#[derive(Args)]
struct ModelFlags {
    /// setA or setB.
    #[arg(long)]
    features: Option<FeatureSetId>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    /// Attention heads per hidden GAT layer.
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    n_trees: Option<usize>,
    /// Seed for model initialization (and dropout).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// gcn, gat, gin, gbt or cnn.
    #[arg(long)]
    arch: Option<String>,
    #[command(flatten)]
    flags: ModelFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Trained model JSON.
    #[arg(long, conflicts_with = "predictions")]
    model: Option<PathBuf>,
    /// Existing predictions CSV (net_id,pred_mv) instead of a model.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Nets to score: all, train, val or test.
    #[arg(long, default_value = "all")]
    split: String,
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated models: gcn, gat, gin, gbt, cnn.
    #[arg(long, value_delimiter = ',', default_value = "gcn,gat,gin")]
    arch: Vec<String>,
    #[arg(long, default_value_t = 1)]
    reps: usize,
    #[command(flatten)]
    flags: ModelFlags,
}

#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match e.downcast_ref::<irdrop_core::Error>() {
        Some(core) if core.is_numeric() => 4,
        _ => 3,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::GraphStats(a) => graph_stats(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Bench(a) => bench(a),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.paths.out_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg
        .paths
        .out_dir
        .clone()
        .ok_or_else(|| usage("no output directory: pass --out or set paths.out_dir"))?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn finish_config(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = out_dir(cfg)?;
    cfg.save(dir.join(RESOLVED))?;
    Ok(dir)
}

fn dataset_path(cfg: &mut RunConfig, flag: Option<PathBuf>) -> Result<PathBuf> {
    if let Some(p) = flag {
        cfg.paths.dataset = Some(p);
    }
    cfg.paths
        .dataset
        .clone()
        .ok_or_else(|| usage("no dataset: pass --data or set paths.dataset"))
}

fn read_dataset(path: &Path, cfg: &RunConfig) -> Result<Dataset> {
    load_dataset(path, cfg.synth.vdd_mv).with_context(|| format!("reading {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn gen(a: GenArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    let s = &mut cfg.synth;
    s.seed = a.seed.unwrap_or(s.seed);
    s.n_cells = a.n_cells.unwrap_or(s.n_cells);
    s.rows = a.rows.unwrap_or(s.rows);
    s.cols = a.cols.unwrap_or(s.cols);
    s.kappa = a.kappa.unwrap_or(s.kappa);
    s.pad_stride = a.pad_stride.unwrap_or(s.pad_stride);
    s.pin_resistance_ohm = a.pin_resistance.unwrap_or(s.pin_resistance_ohm);
    let dir = out_dir(&cfg)?;
    cfg.paths.dataset = Some(dir.join("dataset.csv"));
    let dir = finish_config(&cfg)?;
    let circuit = synthesize(&cfg.synth)?;
    save_dataset(&circuit.dataset, dir.join("dataset.csv"))?;
    let sidecar = GenSidecar::new(&cfg.synth, &circuit);
    let mut w = create(&dir.join("dataset.gen.json"))?;
    serde_json::to_writer_pretty(&mut w, &sidecar)?;
    w.flush()?;
    let max_label = circuit.dataset.records().iter().filter_map(|r| r.ir_drop_mv).fold(0.0, f64::max);
    println!(
        "{} nets on a {}x{} grid, max grid drop {:.3} mV, max net drop {:.3} mV, solver residual {:.2e}",
        circuit.dataset.len(),
        cfg.synth.cols,
        cfg.synth.rows,
        sidecar.max_drop_mv,
        max_label,
        sidecar.rel_residual
    );
    Ok(())
}

fn graph_stats(a: GraphStatsArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    let thresholds = a.thresholds.unwrap_or_else(|| vec![cfg.threshold_um]);
    if thresholds.is_empty() {
        return Err(usage("--thresholds needs at least one value"));
    }
    let data = dataset_path(&mut cfg, a.data)?;
    let dir = finish_config(&cfg)?;
    let ds = read_dataset(&data, &cfg)?;
    let features = select_features(&ds, FeatureSetId::SetA)?.values;
    for &t in &thresholds {
        let g = build_graph(&ds, features.clone(), t)?;
        let dr = degree_rank(&g);
        let path = dir.join(format!("degree_rank_t{t}.csv"));
        dr.write_csv(create(&path)?)?;
        println!(
            "threshold {t} µm: {} edges, max degree {}",
            g.n_edges(),
            dr.degrees.first().copied().unwrap_or(0)
        );
    }
    Ok(())
}

fn apply_flags(cfg: &mut RunConfig, f: &ModelFlags) -> Result<()> {
    if let Some(v) = f.features {
        cfg.features = v;
    }
    if let Some(v) = f.threshold {
        cfg.threshold_um = v;
    }
    if let Some(v) = f.epochs {
        cfg.gnn.max_epochs = v;
        cfg.cnn.max_epochs = v;
    }
    if let Some(v) = f.lr {
        cfg.gnn.lr = v;
        cfg.cnn.lr = v;
    }
    if let Some(v) = f.patience {
        cfg.gnn.patience = v;
        cfg.cnn.patience = v;
    }
    if let Some(v) = f.hidden {
        cfg.gnn.hidden_channels = v;
    }
    if let Some(v) = f.layers {
        cfg.gnn.n_layers = v;
    }
    if let Some(v) = f.heads {
        cfg.gnn.gat_heads = v;
    }
    if let Some(v) = f.dropout {
        cfg.gnn.dropout_p = v;
    }
    if let Some(v) = f.n_trees {
        cfg.gbt.n_trees = v;
    }
    if let Some(v) = f.seed {
        cfg.gnn.seed = v;
        cfg.gbt.seed = v;
        cfg.cnn.seed = v;
    }
    if let Some(v) = f.split_seed {
        cfg.split.seed = v;
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(arch) = &a.arch {
        match arch.parse::<BenchModel>().map_err(|e| usage(e.to_string()))? {
            BenchModel::Gnn(a) => {
                cfg.model = ModelKind::Gnn;
                cfg.gnn.arch = a;
            }
            BenchModel::Gbt => cfg.model = ModelKind::Gbt,
            BenchModel::Cnn => cfg.model = ModelKind::Cnn,
        }
    }
    apply_flags(&mut cfg, &a.flags)?;
    let data = dataset_path(&mut cfg, a.data)?;
    let dir = out_dir(&cfg)?;
    cfg.paths.model = Some(dir.join("model.json"));
    let dir = finish_config(&cfg)?;
    let ds = read_dataset(&data, &cfg)?;
    let model_path = dir.join("model.json");
    let history = create(&dir.join("history.csv"))?;
    match cfg.model {
        ModelKind::Gnn => {
            let (m, _) = pipeline::fit_gnn(&ds, cfg.features, &cfg.split, cfg.threshold_um, &cfg.gnn)?;
            m.save(&model_path)?;
            m.write_history_csv(history)?;
            let best = &m.history[m.best_epoch];
            println!(
                "{} {}: {} epochs, best epoch {} (train MAE {:.4} mV, val MAE {}), {:.2} s",
                cfg.gnn.arch,
                cfg.features,
                m.history.len(),
                m.best_epoch,
                best.train_mae_mv,
                fmt_opt(best.val_mae_mv),
                m.train_seconds
            );
        }
        ModelKind::Gbt => {
            let t = Instant::now();
            let (m, _) = pipeline::fit_gbt(&ds, cfg.features, &cfg.split, &cfg.gbt)?;
            m.save(&model_path)?;
            m.write_history_csv(history)?;
            let last = m.history.last().expect("at least one tree");
            println!(
                "gbt {}: {} trees (train MAE {:.4} mV, val MAE {}), {:.2} s",
                cfg.features,
                m.trees.len(),
                last.train_mae,
                fmt_opt(last.val_mae),
                t.elapsed().as_secs_f64()
            );
        }
        ModelKind::Cnn => {
            let (m, _) = pipeline::fit_cnn(&ds, cfg.features, &cfg.split, cfg.tile_um, &cfg.cnn)?;
            m.save(&model_path)?;
            m.write_history_csv(history)?;
            let best = &m.history[m.best_epoch];
            println!(
                "cnn {}: {} epochs, best epoch {} (train MAE {:.4} mV, val MAE {}), {:.2} s",
                cfg.features,
                m.history.len(),
                m.best_epoch,
                best.train_mae_mv,
                fmt_opt(best.val_mae_mv),
                m.train_seconds
            );
        }
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4} mV"))
}

enum AnyModel {
    Gnn(TrainedModel),
    Gbt(GbtModel),
    Cnn(CnnModel),
}

impl AnyModel {
    fn load(path: &Path) -> Result<Self> {
        #[derive(serde::Deserialize)]
        struct Probe {
            format: String,
        }
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let probe: Probe = serde_json::from_str(&text)
            .map_err(irdrop_core::Error::from)
            .with_context(|| format!("{} is not a model file", path.display()))?;
        Ok(match probe.format.as_str() {
            "irdrop-gnn" => AnyModel::Gnn(TrainedModel::load(path)?),
            "irdrop-gbt" => AnyModel::Gbt(GbtModel::load(path)?),
            "irdrop-cnn" => AnyModel::Cnn(CnnModel::load(path)?),
            other => bail!(irdrop_core::Error::Validation(format!("unknown model format `{other}`"))),
        })
    }

    fn predict(&self, ds: &Dataset) -> Result<Vec<f64>> {
        Ok(match self {
            AnyModel::Gnn(m) => pipeline::predict_gnn(m, ds)?,
            AnyModel::Gbt(m) => pipeline::predict_gbt(m, ds)?,
            AnyModel::Cnn(m) => pipeline::predict_cnn(m, ds)?,
        })
    }

    fn train_seconds(&self) -> Option<f64> {
        match self {
            AnyModel::Gnn(m) => Some(m.train_seconds),
            AnyModel::Cnn(m) => Some(m.train_seconds),
            AnyModel::Gbt(_) => None,
        }
    }
}

fn model_path(cfg: &mut RunConfig, flag: Option<PathBuf>) -> Result<PathBuf> {
    if let Some(p) = flag {
        cfg.paths.model = Some(p);
    }
    cfg.paths
        .model
        .clone()
        .ok_or_else(|| usage("no model: pass --model or set paths.model"))
}

fn read_predictions(path: &Path, ds: &Dataset) -> Result<Vec<f64>> {
    #[derive(serde::Deserialize)]
    struct Row {
        net_id: u64,
        pred_mv: f64,
    }
    let mut rd = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut by_id = std::collections::HashMap::new();
    for row in rd.deserialize() {
        let r: Row = row.map_err(irdrop_core::Error::from)?;
        by_id.insert(r.net_id, r.pred_mv);
    }
    ds.net_ids()
        .iter()
        .map(|id| {
            by_id
                .get(id)
                .copied()
                .ok_or_else(|| irdrop_core::Error::Validation(format!("no prediction for net {id}")).into())
        })
        .collect()
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(s) = a.split_seed {
        cfg.split.seed = s;
    }
    let data = dataset_path(&mut cfg, a.data)?;
    let model = match &a.predictions {
        Some(_) => None,
        None => Some(model_path(&mut cfg, a.model)?),
    };
    let dir = finish_config(&cfg)?;
    let ds = read_dataset(&data, &cfg)?;
    let (pred, timing) = match (&a.predictions, model) {
        (Some(p), _) => (read_predictions(p, &ds)?, None),
        (None, Some(mp)) => {
            let model = AnyModel::load(&mp)?;
            let t = Instant::now();
            let pred = model.predict(&ds)?;
            (pred, Some((model.train_seconds(), t.elapsed().as_secs_f64())))
        }
        (None, None) => unreachable!("model path resolved above"),
    };
    let labels = ds.labels().context("evaluation needs ir_drop_mv on every net")?;
    let rows: Vec<usize> = match a.split.as_str() {
        "all" => (0..ds.len()).collect(),
        which => {
            let split = split_dataset(&ds, &cfg.split)?;
            match which {
                "train" => split.train,
                "val" => split.val,
                "test" => split.test,
                other => return Err(usage(format!("--split must be all, train, val or test, got `{other}`"))),
            }
        }
    };
    let p: Vec<f64> = rows.iter().map(|&i| pred[i]).collect();
    let y: Vec<f64> = rows.iter().map(|&i| labels[i]).collect();
    let mut report = compute_report(&p, &y, ds.vdd_mv())?;
    if let Some((train_s, predict_s)) = timing {
        report.train_seconds = train_s;
        report.predict_seconds = Some(predict_s);
    }
    let ids = ds.net_ids();
    let mut w = csv::Writer::from_writer(create(&dir.join("predictions.csv"))?);
    w.write_record(["net_id", "pred_mv", "label_mv", "error_mv"])?;
    for &i in &rows {
        w.write_record([
            ids[i].to_string(),
            pred[i].to_string(),
            labels[i].to_string(),
            (pred[i] - labels[i]).to_string(),
        ])?;
    }
    w.flush()?;
    let mut j = create(&dir.join("report.json"))?;
    serde_json::to_writer_pretty(&mut j, &report)?;
    j.flush()?;
    let text = report.to_text();
    fs::write(dir.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    let data = dataset_path(&mut cfg, a.data)?;
    let mp = model_path(&mut cfg, a.model)?;
    let dir = finish_config(&cfg)?;
    let ds = read_dataset(&data, &cfg)?;
    let pred = AnyModel::load(&mp)?.predict(&ds)?;
    let mut w = csv::Writer::from_writer(create(&dir.join("predictions.csv"))?);
    w.write_record(["net_id", "pred_mv"])?;
    for (id, p) in ds.net_ids().iter().zip(&pred) {
        w.write_record([id.to_string(), p.to_string()])?;
    }
    w.flush()?;
    println!("{} predictions written", pred.len());
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    apply_flags(&mut cfg, &a.flags)?;
    let models = a
        .arch
        .iter()
        .map(|s| s.parse::<BenchModel>().map_err(|e| usage(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    if models.is_empty() {
        return Err(usage("--arch needs at least one model"));
    }
    let dir = finish_config(&cfg)?;
    let rows = run_bench(&cfg, &models, a.reps)?;
    write_bench_csv(&rows, create(&dir.join("bench.csv"))?)?;
    for r in &rows {
        println!("{:<7} {:<8} rep {} {:>10.4} s", r.model, r.phase, r.rep, r.seconds);
    }
    Ok(())
}
