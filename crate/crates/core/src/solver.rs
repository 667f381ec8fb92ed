//! Static IR-drop solve on a resistive network by nodal analysis.
//!
//! Pad nodes are held at V_DD and eliminated from the system (Dirichlet
//! boundary). The remaining reduced Laplacian `G` is symmetric positive
//! definite whenever every node reaches a pad, and `G·d = i` is solved for the
//! drop vector `d = V_DD − v` with Jacobi-preconditioned conjugate gradient.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Relative residual the solver is required to reach.
pub const REQUIRED_REL_RESIDUAL: f64 = 1e-10;

/// Internal stopping target; tighter than the contract so that the solution
/// error (residual × condition number) stays small on larger grids.
const TARGET_REL_RESIDUAL: f64 = 1e-13;

/// Undirected resistor network with supply pads.
#[derive(Debug, Clone, PartialEq)]
pub struct ResistiveNetwork {
    pub n_nodes: usize,
    /// `(a, b, resistance Ω)`.
    pub resistors: Vec<(usize, usize, f64)>,
    pub pads: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropSolution {
    /// Per-node drop below V_DD, in mV. Pads are exactly 0.
    pub drops_mv: Vec<f64>,
    /// Final `‖G·d − i‖ / ‖i‖` (0 when no current is injected).
    pub rel_residual: f64,
    pub iterations: usize,
    /// Total current delivered by the pads, in A.
    pub pad_current_a: f64,
}

/// Compressed-row symmetric matrix over the non-pad unknowns.
struct Csr {
    row_ptr: Vec<usize>,
    col: Vec<usize>,
    val: Vec<f64>,
}

impl Csr {
    fn mul(&self, x: &[f64], y: &mut [f64]) {
        for (r, out) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                s += self.val[k] * x[self.col[k]];
            }
            *out = s;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ResistiveNetwork {
    fn validate(&self) -> Result<()> {
        if self.pads.is_empty() {
            return Err(Error::validation("network has no supply pad"));
        }
        for &p in &self.pads {
            if p >= self.n_nodes {
                return Err(Error::validation(format!(
                    "pad node {p} out of range (n_nodes = {})",
                    self.n_nodes
                )));
            }
        }
        for &(a, b, r) in &self.resistors {
            if a >= self.n_nodes || b >= self.n_nodes {
                return Err(Error::validation(format!(
                    "resistor ({a}, {b}) references a node out of range"
                )));
            }
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::validation(format!(
                    "resistor ({a}, {b}) has non-positive resistance {r}"
                )));
            }
        }
        Ok(())
    }

    /// Nodes with no resistive path to any pad.
    pub fn floating_nodes(&self) -> Vec<usize> {
        let mut adj = vec![Vec::new(); self.n_nodes];
        for &(a, b, _) in &self.resistors {
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; self.n_nodes];
        let mut queue: VecDeque<usize> = VecDeque::new();
        for &p in &self.pads {
            if !seen[p] {
                seen[p] = true;
                queue.push_back(p);
            }
        }
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        (0..self.n_nodes).filter(|&i| !seen[i]).collect()
    }

    /// Solve for per-node drops given per-node injected load current (A).
    pub fn solve(&self, load_a: &[f64]) -> Result<DropSolution> {
        self.validate()?;
        if load_a.len() != self.n_nodes {
            return Err(Error::validation(format!(
                "load vector has {} entries for {} nodes",
                load_a.len(),
                self.n_nodes
            )));
        }
        if load_a.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("non-finite load current"));
        }
        let floating = self.floating_nodes();
        if !floating.is_empty() {
            let shown: Vec<String> = floating.iter().take(16).map(|n| n.to_string()).collect();
            return Err(Error::numeric(format!(
                "singular system: {} node(s) have no path to a pad (floating component: {}{})",
                floating.len(),
                shown.join(", "),
                if floating.len() > 16 { ", ..." } else { "" }
            )));
        }

        let mut is_pad = vec![false; self.n_nodes];
        for &p in &self.pads {
            is_pad[p] = true;
        }
        let mut unknown = vec![usize::MAX; self.n_nodes];
        let mut free_nodes = Vec::new();
        for i in 0..self.n_nodes {
            if !is_pad[i] {
                unknown[i] = free_nodes.len();
                free_nodes.push(i);
            }
        }
        let m = free_nodes.len();

        // Assemble the reduced Laplacian row by row.
        let mut diag = vec![0.0; m];
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
        for &(a, b, r) in &self.resistors {
            if a == b {
                continue;
            }
            let g = 1.0 / r;
            let (ua, ub) = (unknown[a], unknown[b]);
            if ua != usize::MAX {
                diag[ua] += g;
            }
            if ub != usize::MAX {
                diag[ub] += g;
            }
            if ua != usize::MAX && ub != usize::MAX {
                rows[ua].push((ub, -g));
                rows[ub].push((ua, -g));
            }
        }
        let mut csr = Csr {
            row_ptr: Vec::with_capacity(m + 1),
            col: Vec::new(),
            val: Vec::new(),
        };
        csr.row_ptr.push(0);
        for (r, mut entries) in rows.into_iter().enumerate() {
            entries.push((r, diag[r]));
            entries.sort_by_key(|e| e.0);
            // Parallel resistors collapse into one entry.
            let mut last: Option<usize> = None;
            for (c, v) in entries {
                if last == Some(c) {
                    *csr.val.last_mut().unwrap() += v;
                } else {
                    csr.col.push(c);
                    csr.val.push(v);
                    last = Some(c);
                }
            }
            csr.row_ptr.push(csr.col.len());
        }

        let rhs: Vec<f64> = free_nodes.iter().map(|&n| load_a[n]).collect();
        let (x, iterations, rel_residual) = pcg(&csr, &diag, &rhs)?;

        let mut drops_v = vec![0.0; self.n_nodes];
        for (k, &n) in free_nodes.iter().enumerate() {
            drops_v[n] = x[k];
        }
        let mut pad_current_a = 0.0;
        for &(a, b, r) in &self.resistors {
            match (is_pad[a], is_pad[b]) {
                (true, false) => pad_current_a += drops_v[b] / r,
                (false, true) => pad_current_a += drops_v[a] / r,
                _ => {}
            }
        }
        Ok(DropSolution {
            drops_mv: drops_v.iter().map(|d| d * 1e3).collect(),
            rel_residual,
            iterations,
            pad_current_a,
        })
    }
}

/// Jacobi-preconditioned conjugate gradient. Returns `(x, iterations, rel_residual)`.
fn pcg(a: &Csr, diag: &[f64], b: &[f64]) -> Result<(Vec<f64>, usize, f64)> {
    let n = b.len();
    let b_norm = dot(b, b).sqrt();
    if n == 0 || b_norm == 0.0 {
        return Ok((vec![0.0; n], 0, 0.0));
    }
    let inv_diag: Vec<f64> = diag.iter().map(|d| 1.0 / d).collect();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let max_iter = 20 * n + 100;
    let mut iterations = 0;
    while iterations < max_iter {
        if dot(&r, &r).sqrt() / b_norm <= TARGET_REL_RESIDUAL {
            break;
        }
        a.mul(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::numeric(format!(
                "conjugate gradient breakdown at iteration {iterations} (pᵀAp = {pap})"
            )));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        iterations += 1;
    }
    // Recompute the true residual; the recurrence drifts.
    a.mul(&x, &mut ap);
    let res: f64 = ap
        .iter()
        .zip(b)
        .map(|(ax, bi)| (ax - bi) * (ax - bi))
        .sum::<f64>()
        .sqrt();
    let rel = res / b_norm;
    if !(rel <= REQUIRED_REL_RESIDUAL) {
        return Err(Error::numeric(format!(
            "solver did not converge: relative residual {rel:e} after {iterations} iterations"
        )));
    }
    Ok((x, iterations, rel))
}
