//! Wall-clock comparison of the models and the exact solver.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::gnn::Arch;
use crate::pipeline;
use crate::synth::{generate_circuit, solve_ir_drop, synthesize};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchModel {
    Gnn(Arch),
    Gbt,
    Cnn,
}

impl fmt::Display for BenchModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BenchModel::Gnn(a) => a.fmt(f),
            BenchModel::Gbt => f.write_str("gbt"),
            BenchModel::Cnn => f.write_str("cnn"),
        }
    }
}

impl FromStr for BenchModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gbt" => Ok(BenchModel::Gbt),
            "cnn" => Ok(BenchModel::Cnn),
            other => other.parse().map(BenchModel::Gnn),
        }
    }
}

/// One CSV row: `model,phase,rep,seconds,epochs`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub model: String,
    /// `train`, `predict`, or `solve` for the exact solver.
    pub phase: &'static str,
    pub rep: usize,
    pub seconds: f64,
    /// Training epochs (or trees) actually run; empty for other phases.
    pub epochs: Option<usize>,
}

/// Generate the configured circuit, then per repetition time the solver
/// once and every model's training and full-circuit prediction.
pub fn run_bench(cfg: &RunConfig, models: &[BenchModel], reps: usize) -> Result<Vec<BenchRow>> {
    if reps == 0 {
        return Err(Error::validation("bench needs at least one repetition"));
    }
    cfg.validate()?;
    let circuit = synthesize(&cfg.synth)?;
    let ds = &circuit.dataset;
    let (grid, loads) = generate_circuit(&cfg.synth)?;
    let mut rows = Vec::new();
    for rep in 0..reps {
        let t = Instant::now();
        solve_ir_drop(&grid, &loads)?;
        rows.push(BenchRow {
            model: "oracle".into(),
            phase: "solve",
            rep,
            seconds: t.elapsed().as_secs_f64(),
            epochs: None,
        });
        for &m in models {
            let (train_s, epochs, predict_s) = match m {
                BenchModel::Gnn(arch) => {
                    let gnn = crate::gnn::GnnConfig { arch, ..cfg.gnn.clone() };
                    let t = Instant::now();
                    let (model, _) = pipeline::fit_gnn(ds, cfg.features, &cfg.split, cfg.threshold_um, &gnn)?;
                    let train_s = t.elapsed().as_secs_f64();
                    let t = Instant::now();
                    pipeline::predict_gnn(&model, ds)?;
                    (train_s, model.history.len(), t.elapsed().as_secs_f64())
                }
                BenchModel::Gbt => {
                    let t = Instant::now();
                    let (model, _) = pipeline::fit_gbt(ds, cfg.features, &cfg.split, &cfg.gbt)?;
                    let train_s = t.elapsed().as_secs_f64();
                    let t = Instant::now();
                    pipeline::predict_gbt(&model, ds)?;
                    (train_s, model.trees.len(), t.elapsed().as_secs_f64())
                }
                BenchModel::Cnn => {
                    let t = Instant::now();
                    let (model, _) = pipeline::fit_cnn(ds, cfg.features, &cfg.split, cfg.tile_um, &cfg.cnn)?;
                    let train_s = t.elapsed().as_secs_f64();
                    let t = Instant::now();
                    pipeline::predict_cnn(&model, ds)?;
                    (train_s, model.history.len(), t.elapsed().as_secs_f64())
                }
            };
            rows.push(BenchRow {
                model: m.to_string(),
                phase: "train",
                rep,
                seconds: train_s,
                epochs: Some(epochs),
            });
            rows.push(BenchRow {
                model: m.to_string(),
                phase: "predict",
                rep,
                seconds: predict_s,
                epochs: None,
            });
        }
    }
    Ok(rows)
}

pub fn write_bench_csv(rows: &[BenchRow], w: impl std::io::Write) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_contract() {
        let mut cfg = RunConfig::default();
        cfg.synth.rows = 8;
        cfg.synth.cols = 8;
        cfg.synth.pad_stride = 4;
        cfg.synth.n_cells = 20;
        cfg.gnn.max_epochs = 3;
        cfg.gbt.n_trees = 3;
        cfg.cnn.max_epochs = 2;
        let models: Vec<BenchModel> = ["gcn", "gat", "gin", "gbt", "cnn"].iter().map(|s| s.parse().unwrap()).collect();
        let rows = run_bench(&cfg, &models, 2).unwrap();
        assert_eq!(rows.len(), 2 * (1 + 2 * models.len()));
        assert_eq!(rows.iter().filter(|r| r.phase == "solve").count(), 2);
        assert!(rows.iter().all(|r| r.seconds >= 0.0));
        let mut buf = Vec::new();
        write_bench_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("model,phase,rep,seconds,epochs\noracle,solve,0,"));
    }

    #[test]
    fn unknown_model() {
        assert!("mlp".parse::<BenchModel>().is_err());
        assert!(run_bench(&RunConfig::default(), &[], 0).is_err());
    }
}
