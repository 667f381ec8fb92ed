//! Convolutional encoder–decoder on tile maps.
//!
//! Encoder: four `conv3×3 → ReLU → maxpool2` stages. Decoder:
//! `convT(k4, s4) → ReLU → conv3×3 → ReLU → convT(k4, s4) → ReLU → conv3×3`
//! to one output channel, which restores the input resolution. The loss is
//! the MAE over labelled tiles.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::raster::{TileGrid, SIZE_MULTIPLE};
use crate::data::{Dataset, FeatureSetId};
use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, AdamState, ParamStore, Tape, Tensor, Var};

pub const CNN_FORMAT: &str = "irdrop-cnn";
pub const CNN_VERSION: u32 = 1;
const UP: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnnConfig {
    /// Output channels of the four encoder stages.
    pub encoder_channels: [usize; 4],
    /// Output channels of the two transposed convolutions.
    pub decoder_channels: [usize; 2],
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Start the last convolution at zero.
    pub zero_init_head: bool,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            encoder_channels: [16, 32, 32, 64],
            decoder_channels: [32, 16],
            lr: 1e-3,
            weight_decay: 0.0,
            max_epochs: 300,
            patience: 50,
            seed: 0,
            zero_init_head: false,
        }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.iter().chain(&self.decoder_channels).any(|&c| c == 0) {
            return Err(Error::validation("channel widths must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::validation(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::validation("weight_decay must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CnnEpoch {
    pub epoch: usize,
    pub train_mae_mv: f64,
    pub val_mae_mv: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnModel {
    pub format: String,
    pub version: u32,
    pub config: CnnConfig,
    pub set_id: FeatureSetId,
    pub tile_um: f64,
    /// Input channels are divided by these before the forward pass.
    pub channel_scale: Vec<f64>,
    pub label_scale_mv: f64,
    pub params: ParamStore,
    pub best_epoch: usize,
    pub history: Vec<CnnEpoch>,
    pub train_seconds: f64,
}

fn conv_w(o: usize, i: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::glorot(&[o, i, k, k], i * k * k, o * k * k, rng)
}

/// Glorot weights and zero biases for `in_channels` input maps.
pub fn init_params(cfg: &CnnConfig, in_channels: usize) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut p = ParamStore::new();
    let mut c = in_channels;
    for (s, &o) in cfg.encoder_channels.iter().enumerate() {
        p.insert(format!("enc{s}.weight"), conv_w(o, c, 3, &mut rng));
        p.insert(format!("enc{s}.bias"), Tensor::zeros(&[o]));
        c = o;
    }
    let [d0, d1] = cfg.decoder_channels;
    // transposed weights are [in, out, k, k]
    p.insert("up0.weight", Tensor::glorot(&[c, d0, UP, UP], c * UP * UP, d0 * UP * UP, &mut rng));
    p.insert("up0.bias", Tensor::zeros(&[d0]));
    p.insert("dec0.weight", conv_w(d0, d0, 3, &mut rng));
    p.insert("dec0.bias", Tensor::zeros(&[d0]));
    p.insert("up1.weight", Tensor::glorot(&[d0, d1, UP, UP], d0 * UP * UP, d1 * UP * UP, &mut rng));
    p.insert("up1.bias", Tensor::zeros(&[d1]));
    let head = if cfg.zero_init_head {
        Tensor::zeros(&[1, d1, 3, 3])
    } else {
        conv_w(1, d1, 3, &mut rng)
    };
    p.insert("head.weight", head);
    p.insert("head.bias", Tensor::zeros(&[1]));
    p
}

fn get(vars: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::validation(format!("missing parameter `{name}`")))
}

fn conv(tape: &mut Tape, vars: &BTreeMap<String, Var>, x: Var, name: &str) -> Result<Var> {
    let y = tape.conv2d_same(x, get(vars, &format!("{name}.weight"))?)?;
    tape.add_channel(y, get(vars, &format!("{name}.bias"))?)
}

fn up(tape: &mut Tape, vars: &BTreeMap<String, Var>, x: Var, name: &str) -> Result<Var> {
    let y = tape.conv_transpose2d(x, get(vars, &format!("{name}.weight"))?, UP, 0)?;
    tape.add_channel(y, get(vars, &format!("{name}.bias"))?)
}

/// `[N, C, H, W] → [N, 1, H, W]`; `H` and `W` must be multiples of 16.
pub fn forward(tape: &mut Tape, vars: &BTreeMap<String, Var>, x: Var) -> Result<Var> {
    match tape.value(x).shape() {
        [_, _, h, w] if h % SIZE_MULTIPLE == 0 && w % SIZE_MULTIPLE == 0 && *h > 0 && *w > 0 => {}
        s => {
            return Err(Error::shape(
                "cnn_forward",
                format!("input must be [N, C, H, W] with H, W multiples of {SIZE_MULTIPLE}, got {s:?}"),
            ))
        }
    }
    let mut h = x;
    for s in 0..4 {
        h = conv(tape, vars, h, &format!("enc{s}"))?;
        h = tape.relu(h);
        h = tape.maxpool2(h)?;
    }
    h = up(tape, vars, h, "up0")?;
    h = tape.relu(h);
    h = conv(tape, vars, h, "dec0")?;
    h = tape.relu(h);
    h = up(tape, vars, h, "up1")?;
    h = tape.relu(h);
    conv(tape, vars, h, "head")
}

fn load_params(tape: &mut Tape, params: &ParamStore) -> BTreeMap<String, Var> {
    params
        .iter()
        .map(|(name, t)| (name.clone(), tape.param(t.clone())))
        .collect()
}

fn scaled_input(grid: &TileGrid, scale: &[f64]) -> Result<Tensor> {
    if grid.channels != scale.len() {
        return Err(Error::shape(
            "cnn_input",
            format!("grid has {} channels, model expects {}", grid.channels, scale.len()),
        ));
    }
    let hw = grid.height * grid.width;
    let data = grid
        .features
        .iter()
        .enumerate()
        .map(|(k, v)| v / scale[k / hw])
        .collect();
    Tensor::new(vec![1, grid.channels, grid.height, grid.width], data)
}

fn masked_mae(pred: &[f64], labels: &[f64], mask: &[f64]) -> f64 {
    let n: f64 = mask.iter().sum();
    if n == 0.0 {
        return f64::NAN;
    }
    pred.iter()
        .zip(labels)
        .zip(mask)
        .map(|((p, y), m)| m * (p - y).abs())
        .sum::<f64>()
        / n
}

/// Train on the labelled tiles of `train`; early-stop on those of `val`
/// (same inputs, disjoint labels) when given.
pub fn cnn_train(train: &TileGrid, val: Option<&TileGrid>, cfg: &CnnConfig) -> Result<CnnModel> {
    cfg.validate()?;
    let n_lab: f64 = train.mask.iter().sum();
    if n_lab == 0.0 {
        return Err(Error::validation("training grid has no labelled tiles"));
    }
    if let Some(v) = val {
        if (v.height, v.width, v.channels) != (train.height, train.width, train.channels) {
            return Err(Error::shape("cnn_train", "validation grid differs in shape"));
        }
    }
    let hw = train.height * train.width;
    let channel_scale: Vec<f64> = (0..train.channels)
        .map(|c| {
            let m = train.features[c * hw..(c + 1) * hw].iter().copied().fold(0.0, f64::max);
            if m > 0.0 {
                m
            } else {
                1.0
            }
        })
        .collect();
    let label_scale = train
        .labels
        .iter()
        .zip(&train.mask)
        .filter(|(_, &m)| m > 0.0)
        .map(|(y, _)| *y)
        .fold(0.0, f64::max);
    let label_scale = if label_scale > 0.0 { label_scale } else { 1.0 };
    let input = scaled_input(train, &channel_scale)?;
    let target = Tensor::new(
        vec![1, 1, train.height, train.width],
        train.labels.iter().map(|y| y / label_scale).collect(),
    )?;
    let mask = Tensor::new(vec![1, 1, train.height, train.width], train.mask.clone())?;

    let start = Instant::now();
    let mut params = init_params(cfg, train.channels);
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    });
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0, params.clone());
    let mut stale = 0;
    for epoch in 0..cfg.max_epochs {
        let mut tape = Tape::new();
        let vars = load_params(&mut tape, &params);
        let x = tape.constant(input.clone());
        let out = forward(&mut tape, &vars, x)?;
        let y = tape.constant(target.clone());
        let m = tape.constant(mask.clone());
        let d = tape.sub(out, y)?;
        let d = tape.abs(d);
        let d = tape.mul(d, m)?;
        let s = tape.sum(d);
        let loss = tape.scale(s, 1.0 / n_lab);
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

        let pred = predict_map_raw(&params, &input)?;
        let pred_mv: Vec<f64> = pred.iter().map(|p| p * label_scale).collect();
        let train_mae = masked_mae(&pred_mv, &train.labels, &train.mask);
        let val_mae = val
            .map(|v| masked_mae(&pred_mv, &v.labels, &v.mask))
            .filter(|m| !m.is_nan());
        history.push(CnnEpoch {
            epoch,
            train_mae_mv: train_mae,
            val_mae_mv: val_mae,
        });
        let watched = val_mae.unwrap_or(train_mae);
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
    Ok(CnnModel {
        format: CNN_FORMAT.to_string(),
        version: CNN_VERSION,
        config: cfg.clone(),
        set_id: train.set_id,
        tile_um: train.tile_um,
        channel_scale,
        label_scale_mv: label_scale,
        params: best.2,
        best_epoch: best.1,
        history,
        train_seconds: start.elapsed().as_secs_f64(),
    })
}

fn predict_map_raw(params: &ParamStore, input: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars: BTreeMap<String, Var> = params
        .iter()
        .map(|(name, t)| (name.clone(), tape.constant(t.clone())))
        .collect();
    let x = tape.constant(input.clone());
    let out = forward(&mut tape, &vars, x)?;
    Ok(tape.value(out).data().to_vec())
}

impl CnnModel {
    /// Predicted drop map in mV, `[H, W]` row-major.
    pub fn predict_map(&self, grid: &TileGrid) -> Result<Vec<f64>> {
        if grid.set_id != self.set_id || grid.tile_um != self.tile_um {
            return Err(Error::validation(format!(
                "grid ({}, {} µm tiles) does not match the model ({}, {} µm tiles)",
                grid.set_id, grid.tile_um, self.set_id, self.tile_um
            )));
        }
        let input = scaled_input(grid, &self.channel_scale)?;
        Ok(predict_map_raw(&self.params, &input)?
            .into_iter()
            .map(|p| p * self.label_scale_mv)
            .collect())
    }

    /// Per-net prediction: the value of the tile each net falls in.
    pub fn predict_per_net(&self, grid: &TileGrid, ds: &Dataset) -> Result<Vec<f64>> {
        let map = self.predict_map(grid)?;
        ds.records()
            .iter()
            .map(|r| {
                let (tr, tc) = grid.tile_of(r.x_um, r.y_um);
                if tr >= grid.height || tc >= grid.width {
                    return Err(Error::validation(format!("net {} lies outside the grid", r.net_id)));
                }
                Ok(map[tr * grid.width + tc])
            })
            .collect()
    }

    /// History as CSV: `epoch,train_mae_mv,val_mae_mv`.
    pub fn write_history_csv(&self, w: impl std::io::Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.history {
            wr.serialize(r)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let m: CnnModel = serde_json::from_reader(f)?;
        if m.format != CNN_FORMAT || m.version != CNN_VERSION {
            return Err(Error::validation(format!(
                "not a {CNN_FORMAT} v{CNN_VERSION} model (found {} v{})",
                m.format, m.version
            )));
        }
        Ok(m)
    }
}

/// Value and parameter gradients of `Σ wᵢ·outᵢ` for a raw input tensor.
/// Used for gradient checking.
pub fn probe_gradients(params: &ParamStore, input: &Tensor, weights: &[f64]) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let vars = load_params(&mut tape, params);
    let x = tape.constant(input.clone());
    let out = forward(&mut tape, &vars, x)?;
    let shape = tape.value(out).shape().to_vec();
    let w = tape.constant(Tensor::new(shape, weights.to_vec())?);
    let prod = tape.mul(out, w)?;
    let loss = tape.sum(prod);
    tape.backward(loss)?;
    let grads = vars
        .iter()
        .map(|(n, &v)| (n.clone(), tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))))
        .collect();
    Ok((tape.value(loss).item(), grads))
}
