//! Seeded synthetic power-distribution grids with attached cell loads.
//!
//! A grid is a `cols × rows` lattice of nodes joined by identical resistive
//! segments. Pads tied to V_DD sit on a regular sub-lattice. Each cell draws
//! an effective static current
//!
//! ```text
//! i_eff = i_avg · (1 + κ · f(t_rise, t_fall, τ)),   f = τ / (τ + (t_rise + t_fall) / 2)
//! ```
//!
//! `f` lies in `[0, 1)`, rises with `τ` and falls with slower edges, so with
//! `κ > 0` the timing columns carry label signal the other features lack.
//!
//! A cell reaches its grid node through a pin resistance, so the drop seen at
//! the cell is the grid-node drop plus `i_eff · R_pin`.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, NetRecord};
use crate::error::{Error, Result};
use crate::solver::{DropSolution, ResistiveNetwork};

/// Number of switching windows a clock period is divided into.
pub const N_WINDOWS: u8 = 20;

/// Lattice position: `ix` along x (columns), `iy` along y (rows).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridNode {
    pub ix: usize,
    pub iy: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdnGrid {
    pub rows: usize,
    pub cols: usize,
    pub pitch_um: f64,
    pub seg_resistance_ohm: f64,
    pub pad_nodes: Vec<GridNode>,
    pub vdd_mv: f64,
    /// Series resistance between a cell and its grid node.
    #[serde(default)]
    pub pin_resistance_ohm: f64,
}

impl PdnGrid {
    pub fn n_nodes(&self) -> usize {
        self.rows * self.cols
    }

    pub fn index(&self, n: GridNode) -> usize {
        n.iy * self.cols + n.ix
    }

    pub fn node(&self, index: usize) -> GridNode {
        GridNode {
            ix: index % self.cols,
            iy: index / self.cols,
        }
    }

    /// Layout position in µm.
    pub fn position_um(&self, n: GridNode) -> (f64, f64) {
        (n.ix as f64 * self.pitch_um, n.iy as f64 * self.pitch_um)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows * self.cols < 2 {
            return Err(Error::validation("grid needs at least 2 nodes"));
        }
        if !(self.seg_resistance_ohm > 0.0 && self.seg_resistance_ohm.is_finite()) {
            return Err(Error::validation("segment resistance must be positive"));
        }
        if !(self.pitch_um > 0.0 && self.pitch_um.is_finite()) {
            return Err(Error::validation("pitch must be positive"));
        }
        if !(self.vdd_mv > 0.0) {
            return Err(Error::validation("vdd_mv must be positive"));
        }
        if !(self.pin_resistance_ohm >= 0.0 && self.pin_resistance_ohm.is_finite()) {
            return Err(Error::validation("pin resistance must be >= 0"));
        }
        if self.pad_nodes.is_empty() {
            return Err(Error::validation("grid needs at least one pad"));
        }
        if let Some(p) = self
            .pad_nodes
            .iter()
            .find(|p| p.ix >= self.cols || p.iy >= self.rows)
        {
            return Err(Error::validation(format!(
                "pad ({}, {}) outside {}x{} grid",
                p.ix, p.iy, self.cols, self.rows
            )));
        }
        Ok(())
    }

    pub fn to_network(&self) -> ResistiveNetwork {
        let mut resistors = Vec::with_capacity(2 * self.n_nodes());
        for iy in 0..self.rows {
            for ix in 0..self.cols {
                let i = iy * self.cols + ix;
                if ix + 1 < self.cols {
                    resistors.push((i, i + 1, self.seg_resistance_ohm));
                }
                if iy + 1 < self.rows {
                    resistors.push((i, i + self.cols, self.seg_resistance_ohm));
                }
            }
        }
        ResistiveNetwork {
            n_nodes: self.n_nodes(),
            resistors,
            pads: self.pad_nodes.iter().map(|&p| self.index(p)).collect(),
        }
    }

    /// Lattice hop distance from every node to its nearest pad.
    pub fn hops_to_pad(&self) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.n_nodes()];
        let mut queue = VecDeque::new();
        for &p in &self.pad_nodes {
            let i = self.index(p);
            if dist[i] != 0 {
                dist[i] = 0;
                queue.push_back(i);
            }
        }
        while let Some(u) = queue.pop_front() {
            let n = self.node(u);
            let mut visit = |v: usize| {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            };
            if n.ix > 0 {
                visit(u - 1);
            }
            if n.ix + 1 < self.cols {
                visit(u + 1);
            }
            if n.iy > 0 {
                visit(u - self.cols);
            }
            if n.iy + 1 < self.rows {
                visit(u + self.cols);
            }
        }
        dist
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellLoad {
    pub grid_node: GridNode,
    pub i_avg_a: f64,
    pub i_peak_a: f64,
    /// Switching window index in `0..N_WINDOWS`.
    pub window: u8,
    pub t_rise_s: f64,
    pub t_fall_s: f64,
    pub tau_s: f64,
    /// Current used by the static solve.
    pub i_eff_a: f64,
}

impl CellLoad {
    pub fn validate(&self) -> Result<()> {
        if !(self.i_avg_a > 0.0 && self.i_peak_a >= self.i_avg_a) {
            return Err(Error::validation(format!(
                "load at ({}, {}): need i_peak >= i_avg > 0",
                self.grid_node.ix, self.grid_node.iy
            )));
        }
        if self.window >= N_WINDOWS {
            return Err(Error::validation(format!("window {} out of range", self.window)));
        }
        if !(self.i_eff_a >= 0.0 && self.i_eff_a.is_finite()) {
            return Err(Error::validation("effective current must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Timing coupling map `f(t_rise, t_fall, τ) = τ / (τ + (t_rise + t_fall)/2)`.
pub fn timing_factor(t_rise_s: f64, t_fall_s: f64, tau_s: f64) -> f64 {
    let denom = tau_s + 0.5 * (t_rise_s + t_fall_s);
    if denom > 0.0 {
        tau_s / denom
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub rows: usize,
    pub cols: usize,
    pub pitch_um: f64,
    pub seg_resistance_ohm: f64,
    pub pin_resistance_ohm: f64,
    pub n_cells: usize,
    pub vdd_mv: f64,
    /// Pads every `pad_stride` nodes in both directions, offset by half a stride.
    pub pad_stride: usize,
    /// Average current range (A), sampled log-uniformly.
    pub i_avg_min_a: f64,
    pub i_avg_max_a: f64,
    /// `i_peak / i_avg`, sampled uniformly.
    pub peak_ratio_min: f64,
    pub peak_ratio_max: f64,
    /// Rise/fall time range (s), sampled log-uniformly.
    pub t_edge_min_s: f64,
    pub t_edge_max_s: f64,
    /// RC response time range (s), sampled log-uniformly.
    pub tau_min_s: f64,
    pub tau_max_s: f64,
    /// Timing coupling strength κ.
    pub kappa: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 1,
            rows: 32,
            cols: 32,
            pitch_um: 2.0,
            seg_resistance_ohm: 0.5,
            pin_resistance_ohm: 5.0,
            n_cells: 500,
            vdd_mv: 800.0,
            pad_stride: 8,
            i_avg_min_a: 2e-4,
            i_avg_max_a: 2e-3,
            peak_ratio_min: 1.5,
            peak_ratio_max: 4.0,
            t_edge_min_s: 5e-12,
            t_edge_max_s: 5e-11,
            tau_min_s: 1e-12,
            tau_max_s: 5e-11,
            kappa: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.rows * self.cols < 2 {
            return Err(Error::validation("grid needs at least 2 nodes"));
        }
        if self.pad_stride == 0 {
            return Err(Error::validation("pad_stride must be >= 1"));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::validation(format!("kappa must be >= 0, got {}", self.kappa)));
        }
        let ranges = [
            ("i_avg", self.i_avg_min_a, self.i_avg_max_a),
            ("peak_ratio", self.peak_ratio_min, self.peak_ratio_max),
            ("t_edge", self.t_edge_min_s, self.t_edge_max_s),
            ("tau", self.tau_min_s, self.tau_max_s),
        ];
        for (name, lo, hi) in ranges {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return Err(Error::validation(format!(
                    "{name} range must satisfy 0 < min <= max, got [{lo}, {hi}]"
                )));
            }
        }
        if self.peak_ratio_min < 1.0 {
            return Err(Error::validation("peak_ratio_min must be >= 1"));
        }
        if self.n_cells > self.rows * self.cols {
            return Err(Error::validation(format!(
                "n_cells = {} exceeds the {}x{} grid",
                self.n_cells, self.cols, self.rows
            )));
        }
        Ok(())
    }

    fn pad_nodes(&self) -> Vec<GridNode> {
        let s = self.pad_stride;
        let offsets = |len: usize| -> Vec<usize> {
            let off = (s / 2).min(len - 1);
            (off..len).step_by(s).collect()
        };
        let xs = offsets(self.cols);
        let ys = offsets(self.rows);
        let mut pads = Vec::with_capacity(xs.len() * ys.len());
        for &iy in &ys {
            for &ix in &xs {
                pads.push(GridNode { ix, iy });
            }
        }
        pads
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi == lo {
        return lo;
    }
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

/// Build a grid and place `n_cells` loads on distinct non-pad nodes.
///
/// Random draws happen in a fixed order (placement, then per-cell currents
/// and timing) and κ is applied afterwards, so circuits that differ only in κ
/// share placements and raw features.
pub fn generate_circuit(config: &SynthConfig) -> Result<(PdnGrid, Vec<CellLoad>)> {
    config.validate()?;
    let grid = PdnGrid {
        rows: config.rows,
        cols: config.cols,
        pitch_um: config.pitch_um,
        seg_resistance_ohm: config.seg_resistance_ohm,
        pad_nodes: config.pad_nodes(),
        vdd_mv: config.vdd_mv,
        pin_resistance_ohm: config.pin_resistance_ohm,
    };
    grid.validate()?;

    let mut is_pad = vec![false; grid.n_nodes()];
    for &p in &grid.pad_nodes {
        is_pad[grid.index(p)] = true;
    }
    let mut free: Vec<usize> = (0..grid.n_nodes()).filter(|&i| !is_pad[i]).collect();
    if config.n_cells > free.len() {
        return Err(Error::validation(format!(
            "n_cells = {} exceeds the {} available non-pad nodes",
            config.n_cells,
            free.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    free.shuffle(&mut rng);
    free.truncate(config.n_cells);

    let loads = free
        .into_iter()
        .map(|idx| {
            let i_avg_a = log_uniform(&mut rng, config.i_avg_min_a, config.i_avg_max_a);
            let ratio = if config.peak_ratio_max > config.peak_ratio_min {
                rng.gen_range(config.peak_ratio_min..config.peak_ratio_max)
            } else {
                config.peak_ratio_min
            };
            let window = rng.gen_range(0..N_WINDOWS);
            let t_rise_s = log_uniform(&mut rng, config.t_edge_min_s, config.t_edge_max_s);
            let t_fall_s = log_uniform(&mut rng, config.t_edge_min_s, config.t_edge_max_s);
            let tau_s = log_uniform(&mut rng, config.tau_min_s, config.tau_max_s);
            let f = timing_factor(t_rise_s, t_fall_s, tau_s);
            CellLoad {
                grid_node: grid.node(idx),
                i_avg_a,
                i_peak_a: i_avg_a * ratio,
                window,
                t_rise_s,
                t_fall_s,
                tau_s,
                i_eff_a: i_avg_a * (1.0 + config.kappa * f),
            }
        })
        .collect();
    Ok((grid, loads))
}

/// Per-node drop (mV) for the grid under the given loads.
pub fn solve_ir_drop(grid: &PdnGrid, loads: &[CellLoad]) -> Result<DropSolution> {
    grid.validate()?;
    let mut injection = vec![0.0; grid.n_nodes()];
    for l in loads {
        l.validate()?;
        if l.grid_node.ix >= grid.cols || l.grid_node.iy >= grid.rows {
            return Err(Error::validation(format!(
                "load at ({}, {}) outside grid",
                l.grid_node.ix, l.grid_node.iy
            )));
        }
        injection[grid.index(l.grid_node)] += l.i_eff_a;
    }
    let sol = grid.to_network().solve(&injection)?;
    if let Some(d) = sol.drops_mv.iter().find(|&&d| d > grid.vdd_mv) {
        return Err(Error::numeric(format!(
            "drop of {d} mV exceeds the {} mV supply",
            grid.vdd_mv
        )));
    }
    Ok(sol)
}

/// One record per load, labelled with the drop at the cell: the grid-node
/// drop plus `i_eff · R_pin`.
///
/// `resistance_ohm` is the hop distance to the nearest pad times the segment
/// resistance, plus the pin resistance; `p_total_w = V_DD · i_avg`.
pub fn derive_net_records(grid: &PdnGrid, loads: &[CellLoad], drops_mv: &[f64]) -> Result<Dataset> {
    if drops_mv.len() != grid.n_nodes() {
        return Err(Error::validation(format!(
            "drop vector has {} entries, grid has {} nodes",
            drops_mv.len(),
            grid.n_nodes()
        )));
    }
    let hops = grid.hops_to_pad();
    let vdd_v = grid.vdd_mv * 1e-3;
    let mut records = Vec::with_capacity(loads.len());
    for (k, l) in loads.iter().enumerate() {
        let idx = grid.index(l.grid_node);
        let (x_um, y_um) = grid.position_um(l.grid_node);
        let drop = drops_mv[idx].max(0.0) + l.i_eff_a * grid.pin_resistance_ohm * 1e3;
        if drop > grid.vdd_mv {
            return Err(Error::numeric(format!(
                "cell {k} sees a {drop} mV drop, above the {} mV supply",
                grid.vdd_mv
            )));
        }
        records.push(NetRecord {
            net_id: k as u64,
            x_um,
            y_um,
            resistance_ohm: hops[idx] as f64 * grid.seg_resistance_ohm + grid.pin_resistance_ohm,
            p_total_w: vdd_v * l.i_avg_a,
            i_peak_a: l.i_peak_a,
            i_avg_a: l.i_avg_a,
            t_rise_s: l.t_rise_s,
            t_fall_s: l.t_fall_s,
            tau_s: l.tau_s,
            ir_drop_mv: Some(drop),
        });
    }
    Dataset::new(records, grid.vdd_mv, "synthetic")
}

/// Generator output bundled with the solve statistics.
#[derive(Debug, Clone)]
pub struct Circuit {
    pub grid: PdnGrid,
    pub loads: Vec<CellLoad>,
    pub solution: DropSolution,
    pub dataset: Dataset,
}

/// Generate, solve and derive records in one go.
pub fn synthesize(config: &SynthConfig) -> Result<Circuit> {
    let (grid, loads) = generate_circuit(config)?;
    let solution = solve_ir_drop(&grid, &loads)?;
    let mut dataset = derive_net_records(&grid, &loads, &solution.drops_mv)?;
    dataset.provenance = format!("synthetic seed={} kappa={}", config.seed, config.kappa);
    Ok(Circuit {
        grid,
        loads,
        solution,
        dataset,
    })
}

/// Metadata written next to a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSidecar {
    pub config: SynthConfig,
    pub n_nodes: usize,
    pub pads: Vec<GridNode>,
    pub solver_iterations: usize,
    pub rel_residual: f64,
    pub total_load_current_a: f64,
    pub pad_current_a: f64,
    pub max_drop_mv: f64,
}

impl GenSidecar {
    pub fn new(config: &SynthConfig, c: &Circuit) -> Self {
        GenSidecar {
            config: config.clone(),
            n_nodes: c.grid.n_nodes(),
            pads: c.grid.pad_nodes.clone(),
            solver_iterations: c.solution.iterations,
            rel_residual: c.solution.rel_residual,
            total_load_current_a: c.loads.iter().map(|l| l.i_eff_a).sum(),
            pad_current_a: c.solution.pad_current_a,
            max_drop_mv: c.solution.drops_mv.iter().copied().fold(0.0, f64::max),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            rows: 8,
            cols: 8,
            n_cells: 20,
            pad_stride: 4,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_circuit(&small()).unwrap();
        let b = generate_circuit(&small()).unwrap();
        assert_eq!(a, b);
        let other = generate_circuit(&SynthConfig { seed: 2, ..small() }).unwrap();
        assert_ne!(a.1, other.1);
    }

    #[test]
    fn distinct_non_pad_placements() {
        let (grid, loads) = generate_circuit(&small()).unwrap();
        let mut nodes: Vec<_> = loads.iter().map(|l| l.grid_node).collect();
        nodes.sort();
        nodes.dedup();
        assert_eq!(nodes.len(), loads.len());
        assert!(nodes.iter().all(|n| !grid.pad_nodes.contains(n)));
    }

    #[test]
    fn no_cells_no_drop() {
        let cfg = SynthConfig { n_cells: 0, ..small() };
        let (grid, loads) = generate_circuit(&cfg).unwrap();
        assert!(loads.is_empty());
        let sol = solve_ir_drop(&grid, &loads).unwrap();
        assert!(sol.drops_mv.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn kappa_changes_only_effective_current() {
        let (_, a) = generate_circuit(&SynthConfig { kappa: 0.0, ..small() }).unwrap();
        let (_, b) = generate_circuit(&SynthConfig { kappa: 0.5, ..small() }).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.grid_node, y.grid_node);
            assert_eq!(x.i_avg_a, y.i_avg_a);
            assert_eq!(x.tau_s, y.tau_s);
            assert_eq!(x.i_eff_a, x.i_avg_a);
            assert!(y.i_eff_a > x.i_eff_a);
        }
    }

    #[test]
    fn capacity_error() {
        let cfg = SynthConfig { rows: 10, cols: 10, n_cells: 10_000, ..SynthConfig::default() };
        assert!(generate_circuit(&cfg).is_err());
        // 100 nodes minus pads cannot host 100 cells either
        let cfg = SynthConfig { rows: 10, cols: 10, n_cells: 100, ..SynthConfig::default() };
        assert!(generate_circuit(&cfg).is_err());
    }

    #[test]
    fn timing_factor_is_monotone() {
        assert!(timing_factor(1e-11, 1e-11, 2e-11) > timing_factor(1e-11, 1e-11, 1e-11));
        assert!(timing_factor(2e-11, 1e-11, 1e-11) < timing_factor(1e-11, 1e-11, 1e-11));
        assert_eq!(timing_factor(0.0, 0.0, 0.0), 0.0);
    }

    fn grid_1d(cols: usize, pitch: f64) -> PdnGrid {
        PdnGrid {
            rows: 1,
            cols,
            pitch_um: pitch,
            seg_resistance_ohm: 1.0,
            pad_nodes: vec![GridNode { ix: 0, iy: 0 }],
            vdd_mv: 800.0,
            pin_resistance_ohm: 0.0,
        }
    }

    fn load_at(ix: usize, iy: usize, i: f64) -> CellLoad {
        CellLoad {
            grid_node: GridNode { ix, iy },
            i_avg_a: i,
            i_peak_a: i,
            window: 0,
            t_rise_s: 0.0,
            t_fall_s: 0.0,
            tau_s: 0.0,
            i_eff_a: i,
        }
    }

    #[test]
    fn record_position_and_power() {
        let grid = PdnGrid {
            rows: 5,
            cols: 5,
            pitch_um: 1.5,
            seg_resistance_ohm: 0.5,
            pad_nodes: vec![GridNode { ix: 0, iy: 0 }],
            vdd_mv: 800.0,
            pin_resistance_ohm: 2.0,
        };
        let loads = vec![load_at(2, 3, 0.01)];
        let sol = solve_ir_drop(&grid, &loads).unwrap();
        let ds = derive_net_records(&grid, &loads, &sol.drops_mv).unwrap();
        let r = &ds.records()[0];
        assert_eq!((r.x_um, r.y_um), (3.0, 4.5));
        assert!((r.p_total_w - 8e-3).abs() < 1e-15);
        assert_eq!(r.resistance_ohm, 5.0 * 0.5 + 2.0);
        // 10 mA through the 2 Ω pin adds 20 mV
        let node = sol.drops_mv[grid.index(GridNode { ix: 2, iy: 3 })];
        assert!((r.ir_drop_mv.unwrap() - (node + 20.0)).abs() < 1e-12);
    }

    #[test]
    fn ladder_through_grid_api() {
        let grid = grid_1d(3, 1.0);
        let loads = vec![load_at(1, 0, 0.01), load_at(2, 0, 0.01)];
        let sol = solve_ir_drop(&grid, &loads).unwrap();
        assert!((sol.drops_mv[1] - 20.0).abs() <= 1e-9);
        assert!((sol.drops_mv[2] - 30.0).abs() <= 1e-9);
    }

    #[test]
    fn mismatched_drop_vector() {
        let grid = grid_1d(3, 1.0);
        assert!(derive_net_records(&grid, &[load_at(1, 0, 0.01)], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn labels_match_solution() {
        let c = synthesize(&SynthConfig { pin_resistance_ohm: 0.0, ..small() }).unwrap();
        for (r, l) in c.dataset.records().iter().zip(&c.loads) {
            assert_eq!(r.ir_drop_mv, Some(c.solution.drops_mv[c.grid.index(l.grid_node)]));
        }
        let c = synthesize(&small()).unwrap();
        for (r, l) in c.dataset.records().iter().zip(&c.loads) {
            let node = c.solution.drops_mv[c.grid.index(l.grid_node)];
            let pin = l.i_eff_a * c.grid.pin_resistance_ohm * 1e3;
            assert!((r.ir_drop_mv.unwrap() - node - pin).abs() <= 1e-12 * (node + pin));
        }
    }

    #[test]
    fn supply_exceeded_at_pin() {
        let mut grid = grid_1d(3, 1.0);
        grid.pin_resistance_ohm = 1e5;
        let loads = vec![load_at(1, 0, 0.01)];
        let sol = solve_ir_drop(&grid, &loads).unwrap();
        let err = derive_net_records(&grid, &loads, &sol.drops_mv).unwrap_err();
        assert!(err.is_numeric());
    }
}
