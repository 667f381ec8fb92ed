//! GCN, GAT and GIN node regressors over the net proximity graph.
//!
//! Training is full-graph: every epoch runs one forward pass over all nodes,
//! takes the MAE over the training nodes, and applies one Adam step. Labels
//! are divided by the largest training label so the loss lives near `[0, 1]`;
//! predictions are mapped back to mV.

mod layers;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use layers::{init_params, input_width, GraphOps};

use crate::data::{FeatureSetId, Split};
use crate::error::{Error, Result};
use crate::graph::CircuitGraph;
use crate::preprocess::ScalerParams;
use crate::tensor::{AdamConfig, AdamState, ParamStore, Tape, Tensor};
use layers::{forward, load_params, Mode};

pub const MODEL_FORMAT: &str = "irdrop-gnn";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Gcn,
    Gat,
    Gin,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::Gcn, Arch::Gat, Arch::Gin];
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Gcn => "gcn",
            Arch::Gat => "gat",
            Arch::Gin => "gin",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gcn" => Ok(Arch::Gcn),
            "gat" => Ok(Arch::Gat),
            "gin" => Ok(Arch::Gin),
            _ => Err(Error::Config(format!("unknown architecture `{s}` (expected gcn, gat or gin)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GnnConfig {
    pub arch: Arch,
    pub n_layers: usize,
    pub hidden_channels: usize,
    /// Heads on every GAT layer but the last, which always has one.
    pub gat_heads: usize,
    /// Initial value of the learnable GIN ε.
    pub gin_eps: f64,
    /// Feed `dist / threshold` to GAT attention and GIN messages.
    pub edge_features: bool,
    /// Read out through a linear head over `[last layer ‖ input features]`.
    pub input_skip: bool,
    pub dropout_p: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Epochs without a validation improvement tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for GnnConfig {
    fn default() -> Self {
        GnnConfig {
            arch: Arch::Gcn,
            n_layers: 3,
            hidden_channels: 64,
            gat_heads: 4,
            gin_eps: 0.0,
            edge_features: true,
            input_skip: true,
            dropout_p: 0.5,
            lr: 1e-4,
            weight_decay: 1e-3,
            max_epochs: 1000,
            patience: 100,
            seed: 0,
        }
    }
}

impl GnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::validation("n_layers must be >= 1"));
        }
        if self.hidden_channels == 0 {
            return Err(Error::validation("hidden_channels must be >= 1"));
        }
        if self.gat_heads == 0 {
            return Err(Error::validation("gat_heads must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::validation(format!("dropout_p must be in [0, 1), got {}", self.dropout_p)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::validation(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::validation("weight_decay must be >= 0"));
        }
        if !self.gin_eps.is_finite() {
            return Err(Error::validation("gin_eps must be finite"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Loss of the update step (dropout active), in mV.
    pub train_loss_mv: f64,
    /// Train and validation MAE after the step, evaluation mode, in mV.
    pub train_mae_mv: f64,
    /// `None` when the split has no validation rows.
    pub val_mae_mv: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub format: String,
    pub version: u32,
    pub config: GnnConfig,
    /// Parameters from the best validation epoch.
    pub params: ParamStore,
    pub feature_set: Option<FeatureSetId>,
    pub scaler: Option<ScalerParams>,
    /// Proximity threshold of the training graph.
    pub threshold_um: f64,
    /// Labels were divided by this (mV) during training.
    pub label_scale_mv: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub train_seconds: f64,
}

impl TrainedModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let m: TrainedModel = serde_json::from_reader(f)?;
        if m.format != MODEL_FORMAT || m.version != MODEL_VERSION {
            return Err(Error::validation(format!(
                "not a {MODEL_FORMAT} v{MODEL_VERSION} model (found {} v{})",
                m.format, m.version
            )));
        }
        m.config.validate()?;
        Ok(m)
    }

    pub fn input_width(&self) -> Result<usize> {
        input_width(&self.config, &self.params)
    }

    /// Mean seconds per epoch over the whole run.
    pub fn seconds_per_epoch(&self) -> f64 {
        self.train_seconds / self.history.len().max(1) as f64
    }

    /// History as CSV: `epoch,train_loss_mv,train_mae_mv,val_mae_mv`.
    pub fn write_history_csv(&self, w: impl std::io::Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.history {
            wr.serialize(r)?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn labels_of(graph: &CircuitGraph) -> Result<&[f64]> {
    graph
        .labels
        .as_deref()
        .ok_or_else(|| Error::validation("graph has no IR-drop labels; training needs ir_drop_mv on every net"))
}

fn check_indices(name: &str, idx: &[usize], n: usize) -> Result<()> {
    match idx.iter().find(|&&i| i >= n) {
        Some(bad) => Err(Error::validation(format!("{name} index {bad} out of {n} nodes"))),
        None => Ok(()),
    }
}

fn mae_on(pred: &[f64], target: &[f64], idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return f64::NAN;
    }
    idx.iter().map(|&i| (pred[i] - target[i]).abs()).sum::<f64>() / idx.len() as f64
}

/// Seed of the dropout mask for one epoch.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_add(1)
}

/// Forward pass in evaluation mode; normalized units, one value per node.
pub fn forward_eval(cfg: &GnnConfig, params: &ParamStore, graph: &CircuitGraph, ops: &GraphOps) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = load_params(&mut tape, params);
    let x = tape.constant(Tensor::from_matrix(&graph.features));
    let f = forward(&mut tape, &vars, cfg, ops, x, Mode::Eval)?;
    Ok(tape.value(f.out).data().to_vec())
}

/// Train on `split.train`, early-stop on `split.val` (or on the training MAE
/// when there is no validation set).
pub fn train(graph: &CircuitGraph, split: &Split, cfg: &GnnConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    let labels = labels_of(graph)?;
    let n = graph.n_nodes();
    check_indices("train", &split.train, n)?;
    check_indices("val", &split.val, n)?;
    if split.train.is_empty() {
        return Err(Error::validation("training split is empty"));
    }
    let scale = split.train.iter().map(|&i| labels[i]).fold(0.0, f64::max);
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let target: Vec<f64> = labels.iter().map(|y| y / scale).collect();
    let train_idx = Rc::new(split.train.clone());
    let train_target = Tensor::column(split.train.iter().map(|&i| target[i]).collect());
    let features = Tensor::from_matrix(&graph.features);
    let ops = GraphOps::new(graph);

    let start = Instant::now();
    let mut params = init_params(cfg, graph.features.cols());
    let mut adam = AdamState::new(cfg.adam());
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0, params.clone());
    let mut stale = 0;
    for epoch in 0..cfg.max_epochs {
        let mut tape = Tape::new();
        let vars = load_params(&mut tape, &params);
        let x = tape.constant(features.clone());
        let f = forward(&mut tape, &vars, cfg, &ops, x, Mode::Train { seed: epoch_seed(cfg.seed, epoch) })?;
        let picked = tape.gather_rows(f.out, &train_idx)?;
        let y = tape.constant(train_target.clone());
        let diff = tape.sub(picked, y)?;
        let abs = tape.abs(diff);
        let loss = tape.mean(abs)?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::numeric(format!("loss became {loss_value} at epoch {epoch}")));
        }
        tape.backward(loss)?;
        let grads: BTreeMap<String, Tensor> = vars
            .iter()
            .filter_map(|(name, &v)| tape.grad(v).map(|g| (name.clone(), g)))
            .collect();
        adam.step(&mut params, &grads)?;

        let pred = forward_eval(cfg, &params, graph, &ops)?;
        let train_mae = mae_on(&pred, &target, &split.train);
        let val_mae = mae_on(&pred, &target, &split.val);
        if !train_mae.is_finite() {
            return Err(Error::numeric(format!("predictions became non-finite at epoch {epoch}")));
        }
        history.push(EpochRecord {
            epoch,
            train_loss_mv: loss_value * scale,
            train_mae_mv: train_mae * scale,
            val_mae_mv: (!split.val.is_empty()).then_some(val_mae * scale),
        });
        let watched = if split.val.is_empty() { train_mae } else { val_mae };
        if watched < best.0 {
            best = (watched, epoch, params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                break;
            }
        }
    }
    Ok(TrainedModel {
        format: MODEL_FORMAT.to_string(),
        version: MODEL_VERSION,
        config: cfg.clone(),
        params: best.2,
        feature_set: None,
        scaler: graph.scaler.clone(),
        threshold_um: graph.threshold_um,
        label_scale_mv: scale,
        best_epoch: best.1,
        history,
        train_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Per-node IR drop in mV.
pub fn predict(model: &TrainedModel, graph: &CircuitGraph) -> Result<Vec<f64>> {
    if let (Some(m), Some(g)) = (&model.scaler, &graph.scaler) {
        if m != g {
            return Err(Error::validation(
                "graph was preprocessed with a different scaler than the model was trained with",
            ));
        }
    }
    let width = model.input_width()?;
    if graph.features.cols() != width {
        return Err(Error::shape(
            "predict",
            format!("graph has {} feature columns, model expects {width}", graph.features.cols()),
        ));
    }
    let ops = GraphOps::new(graph);
    let out = forward_eval(&model.config, &model.params, graph, &ops)?;
    Ok(out.into_iter().map(|v| v * model.label_scale_mv).collect())
}

/// Value and parameter gradients of `Σ wᵢ·outᵢ` in evaluation mode, with
/// `out` the normalized per-node output. Used for gradient checking.
pub fn probe_gradients(
    cfg: &GnnConfig,
    params: &ParamStore,
    graph: &CircuitGraph,
    weights: &[f64],
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let ops = GraphOps::new(graph);
    let mut tape = Tape::new();
    let vars = load_params(&mut tape, params);
    let x = tape.constant(Tensor::from_matrix(&graph.features));
    let f = forward(&mut tape, &vars, cfg, &ops, x, Mode::Eval)?;
    let w = tape.constant(Tensor::column(weights.to_vec()));
    let prod = tape.mul(f.out, w)?;
    let loss = tape.sum(prod);
    tape.backward(loss)?;
    let grads = vars
        .iter()
        .map(|(name, &v)| {
            let g = tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()));
            (name.clone(), g)
        })
        .collect();
    Ok((tape.value(loss).item(), grads))
}

/// GAT attention weights in evaluation mode: `[layer][head][edge]` over
/// [`GraphOps::attention_edges`].
pub fn gat_attention(cfg: &GnnConfig, params: &ParamStore, graph: &CircuitGraph) -> Result<Vec<Vec<Vec<f64>>>> {
    if cfg.arch != Arch::Gat {
        return Err(Error::validation("attention weights exist only for GAT"));
    }
    let ops = GraphOps::new(graph);
    let mut tape = Tape::new();
    let vars = load_params(&mut tape, params);
    let x = tape.constant(Tensor::from_matrix(&graph.features));
    let f = forward(&mut tape, &vars, cfg, &ops, x, Mode::Eval)?;
    Ok(f.attention
        .iter()
        .map(|layer| layer.iter().map(|&a| tape.value(a).data().to_vec()).collect())
        .collect())
}
