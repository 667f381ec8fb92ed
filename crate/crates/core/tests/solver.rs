use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use irdrop_core::synth::{solve_ir_drop, CellLoad, GridNode, PdnGrid};

fn load(i: usize, cols: usize, amps: f64) -> CellLoad {
    CellLoad {
        grid_node: GridNode { ix: i % cols, iy: i / cols },
        i_avg_a: amps,
        i_peak_a: 2.0 * amps,
        window: 0,
        t_rise_s: 1e-11,
        t_fall_s: 1e-11,
        tau_s: 1e-11,
        i_eff_a: amps,
    }
}

fn grid(rows: usize, cols: usize, r: f64, pads: &[usize]) -> PdnGrid {
    PdnGrid {
        rows,
        cols,
        pitch_um: 1.0,
        seg_resistance_ohm: r,
        pad_nodes: pads.iter().map(|&i| GridNode { ix: i % cols, iy: i / cols }).collect(),
        vdd_mv: 800.0,
        pin_resistance_ohm: 0.0,
    }
}

/// Node drops (mV) from a dense solve of the reduced Laplacian.
fn dense(g: &PdnGrid, loads: &[CellLoad]) -> Vec<f64> {
    let n = g.rows * g.cols;
    let c = 1.0 / g.seg_resistance_ohm;
    let mut lap = DMatrix::<f64>::zeros(n, n);
    for a in 0..n {
        let (ix, iy) = (a % g.cols, a / g.cols);
        let mut nb = Vec::new();
        if ix + 1 < g.cols {
            nb.push(a + 1);
        }
        if iy + 1 < g.rows {
            nb.push(a + g.cols);
        }
        for b in nb {
            lap[(a, a)] += c;
            lap[(b, b)] += c;
            lap[(a, b)] -= c;
            lap[(b, a)] -= c;
        }
    }
    let pads: Vec<usize> = g.pad_nodes.iter().map(|p| p.iy * g.cols + p.ix).collect();
    let free: Vec<usize> = (0..n).filter(|i| !pads.contains(i)).collect();
    let mut inj = vec![0.0; n];
    for l in loads {
        inj[l.grid_node.iy * g.cols + l.grid_node.ix] += l.i_eff_a;
    }
    let a = DMatrix::from_fn(free.len(), free.len(), |r, c| lap[(free[r], free[c])]);
    let b = DVector::from_iterator(free.len(), free.iter().map(|&i| inj[i]));
    let x = a.lu().solve(&b).unwrap();
    let mut out = vec![0.0; n];
    for (k, &i) in free.iter().enumerate() {
        out[i] = x[k] * 1e3;
    }
    out
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let s = b.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / s
}

#[test]
fn series_ladder() {
    let g = grid(1, 4, 2.0, &[0]);
    let loads = [load(3, 4, 1e-3)];
    let d = solve_ir_drop(&g, &loads).unwrap().drops_mv;
    for (k, want) in [0.0, 2.0, 4.0, 6.0].iter().enumerate() {
        assert!((d[k] - want).abs() < 1e-10, "node {k}: {}", d[k]);
    }
}

#[test]
fn pads_source_all_current() {
    let g = grid(6, 7, 0.3, &[0, 20, 41]);
    let loads: Vec<CellLoad> = [5, 11, 17, 30].iter().map(|&i| load(i, 7, 2e-3)).collect();
    let sol = solve_ir_drop(&g, &loads).unwrap();
    let total = sol.pad_current_a;
    assert!((total - 8e-3).abs() < 1e-12, "pads source {total} A");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matches_dense_and_is_linear(
        rows in 2usize..10,
        cols in 2usize..10,
        r in 0.05f64..3.0,
        seed_loads in prop::collection::vec((0usize..100, 1e-5f64..5e-3), 1..12),
        alpha in 0.1f64..10.0,
    ) {
        let n = rows * cols;
        let g = grid(rows, cols, r, &[0, n - 1]);
        let loads: Vec<CellLoad> = seed_loads
            .iter()
            .map(|&(i, a)| load(1 + i % (n - 2).max(1), cols, a))
            .filter(|l| l.grid_node.iy * cols + l.grid_node.ix != n - 1)
            .collect();
        prop_assume!(!loads.is_empty());
        let got = solve_ir_drop(&g, &loads).unwrap().drops_mv;
        prop_assert!(max_rel(&got, &dense(&g, &loads)) < 1e-8);
        prop_assert!(got.iter().all(|&v| v >= -1e-12));

        let (a, b) = loads.split_at(loads.len() / 2);
        let da = solve_ir_drop(&g, a).unwrap().drops_mv;
        let db = solve_ir_drop(&g, b).unwrap().drops_mv;
        let sum: Vec<f64> = da.iter().zip(&db).map(|(x, y)| x + y).collect();
        prop_assert!(max_rel(&sum, &got) < 1e-8);

        let scaled: Vec<CellLoad> = loads.iter().map(|l| CellLoad { i_eff_a: l.i_eff_a * alpha, ..l.clone() }).collect();
        let ds = solve_ir_drop(&g, &scaled).unwrap().drops_mv;
        let want: Vec<f64> = got.iter().map(|v| v * alpha).collect();
        prop_assert!(max_rel(&ds, &want) < 1e-8);
    }
}
