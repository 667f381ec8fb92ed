//! Proximity graph over nets: one node per net, an undirected edge between
//! every pair whose Manhattan distance is within the threshold, and that
//! distance carried as the edge feature.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::preprocess::ScalerParams;
use crate::tensor::SparseMatrix;

/// Default proximity threshold in µm.
pub const DEFAULT_THRESHOLD_UM: f64 = 5.0;

#[inline]
pub fn manhattan(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).abs() + (a.1 - b.1).abs()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CircuitGraph {
    pub node_ids: Vec<u64>,
    pub coords_um: Vec<(f64, f64)>,
    /// Node features, one row per node (normally already preprocessed).
    pub features: Matrix,
    /// Undirected edges `(u, v)` with `u < v`, sorted.
    pub edges: Vec<(usize, usize)>,
    /// Raw Manhattan length of each edge in µm.
    pub edge_dist_um: Vec<f64>,
    pub threshold_um: f64,
    /// Per-node IR drop in mV.
    pub labels: Option<Vec<f64>>,
    /// Preprocessing that produced `features`, when known.
    pub scaler: Option<ScalerParams>,
}

impl CircuitGraph {
    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Edge feature handed to the models: `dist / threshold`.
    pub fn edge_feature(&self) -> Vec<f64> {
        self.edge_dist_um.iter().map(|d| d / self.threshold_um).collect()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_nodes()];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    /// Write the graph (ids, edges, distances, threshold) as JSON.
    pub fn write_json(&self, w: impl Write) -> Result<()> {
        let export = GraphExport {
            threshold_um: self.threshold_um,
            node_ids: self.node_ids.clone(),
            edges: self.edges.clone(),
            edge_dist_um: self.edge_dist_um.clone(),
        };
        serde_json::to_writer_pretty(w, &export)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphExport {
    pub threshold_um: f64,
    pub node_ids: Vec<u64>,
    pub edges: Vec<(usize, usize)>,
    pub edge_dist_um: Vec<f64>,
}

/// All pairs within `threshold_um`, by exhaustive pairwise check.
pub fn proximity_edges(coords: &[(f64, f64)], threshold_um: f64) -> Result<(Vec<(usize, usize)>, Vec<f64>)> {
    if !(threshold_um > 0.0 && threshold_um.is_finite()) {
        return Err(Error::validation(format!(
            "threshold must be positive, got {threshold_um}"
        )));
    }
    if coords.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::validation("non-finite node coordinate"));
    }
    let mut edges = Vec::new();
    let mut dist = Vec::new();
    for u in 0..coords.len() {
        for v in u + 1..coords.len() {
            let d = manhattan(coords[u], coords[v]);
            if d <= threshold_um {
                edges.push((u, v));
                dist.push(d);
            }
        }
    }
    Ok((edges, dist))
}

/// Build the graph for a dataset; `features` must be row-aligned with it.
pub fn build_graph(ds: &Dataset, features: Matrix, threshold_um: f64) -> Result<CircuitGraph> {
    if features.rows() != ds.len() {
        return Err(Error::shape(
            "build_graph",
            format!("{} feature rows for {} nets", features.rows(), ds.len()),
        ));
    }
    let coords: Vec<(f64, f64)> = ds.records().iter().map(|r| (r.x_um, r.y_um)).collect();
    let (edges, edge_dist_um) = proximity_edges(&coords, threshold_um)?;
    let labels = if ds.has_all_labels() && !ds.is_empty() {
        Some(ds.labels()?)
    } else {
        None
    };
    Ok(CircuitGraph {
        node_ids: ds.net_ids(),
        coords_um: coords,
        features,
        edges,
        edge_dist_um,
        threshold_um,
        labels,
        scaler: None,
    })
}

/// Node degrees in descending order, for degree-rank plots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegreeRank {
    pub threshold_um: f64,
    pub degrees: Vec<usize>,
}

impl DegreeRank {
    /// Two-column CSV `rank,degree`, rank starting at 1.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["rank", "degree"])?;
        for (i, d) in self.degrees.iter().enumerate() {
            wr.write_record([(i + 1).to_string(), d.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

pub fn degree_rank(g: &CircuitGraph) -> DegreeRank {
    let mut degrees = g.degrees();
    degrees.sort_unstable_by(|a, b| b.cmp(a));
    DegreeRank {
        threshold_um: g.threshold_um,
        degrees,
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `A` the binary adjacency.
pub fn normalized_adjacency(g: &CircuitGraph) -> SparseMatrix {
    let n = g.n_nodes();
    let deg: Vec<f64> = g.degrees().iter().map(|&d| d as f64 + 1.0).collect();
    let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut triplets = Vec::with_capacity(n + 2 * g.n_edges());
    for i in 0..n {
        triplets.push((i, i, inv_sqrt[i] * inv_sqrt[i]));
    }
    for &(u, v) in &g.edges {
        let w = inv_sqrt[u] * inv_sqrt[v];
        triplets.push((u, v, w));
        triplets.push((v, u, w));
    }
    SparseMatrix::from_triplets(n, n, triplets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::NetRecord;

    fn ds_at(points: &[(f64, f64)]) -> Dataset {
        let records = points
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| NetRecord {
                net_id: i as u64,
                x_um: x,
                y_um: y,
                resistance_ohm: 1.0,
                p_total_w: 0.0,
                i_peak_a: 0.0,
                i_avg_a: 0.0,
                t_rise_s: 0.0,
                t_fall_s: 0.0,
                tau_s: 0.0,
                ir_drop_mv: None,
            })
            .collect();
        Dataset::new(records, 800.0, "").unwrap()
    }

    fn graph_at(points: &[(f64, f64)], t: f64) -> CircuitGraph {
        let ds = ds_at(points);
        build_graph(&ds, Matrix::zeros(points.len(), 1), t).unwrap()
    }

    #[test]
    fn manhattan_examples() {
        assert_eq!(manhattan((0.0, 0.0), (3.0, 4.0)), 7.0);
        assert_eq!(manhattan((1.5, 2.5), (1.5, 2.5)), 0.0);
        assert!((manhattan((0.3, 0.7), (0.5, 0.1)) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn threshold_examples() {
        let g = graph_at(&[(0.0, 0.0), (0.0, 2.0), (5.0, 5.0)], 3.0);
        assert_eq!(g.edges, vec![(0, 1)]);
        assert_eq!(g.edge_dist_um, vec![2.0]);
        assert_eq!(g.edge_feature(), vec![2.0 / 3.0]);

        let g = graph_at(&[(0.0, 0.0), (0.0, 2.0), (5.0, 5.0)], 1.0);
        assert!(g.edges.is_empty());

        let g = graph_at(&[(0.0, 0.0), (0.0, 2.0), (5.0, 5.0), (1.0, 1.0)], 10.0);
        assert_eq!(g.n_edges(), 6);
    }

    #[test]
    fn non_positive_threshold() {
        let ds = ds_at(&[(0.0, 0.0)]);
        assert!(build_graph(&ds, Matrix::zeros(1, 1), 0.0).is_err());
        assert!(build_graph(&ds, Matrix::zeros(1, 1), -1.0).is_err());
    }

    #[test]
    fn degree_rank_examples() {
        let path = graph_at(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)], 1.0);
        assert_eq!(degree_rank(&path).degrees, vec![2, 1, 1]);

        let empty = graph_at(&[(0.0, 0.0), (5.0, 0.0)], 1.0);
        assert_eq!(degree_rank(&empty).degrees, vec![0, 0]);

        let k4 = graph_at(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)], 5.0);
        assert_eq!(degree_rank(&k4).degrees, vec![3, 3, 3, 3]);
    }

    #[test]
    fn degree_rank_csv() {
        let path = graph_at(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)], 1.0);
        let mut out = Vec::new();
        degree_rank(&path).write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "rank,degree\n1,2\n2,1\n3,1\n");
    }

    #[test]
    fn adjacency_small_cases() {
        let single = graph_at(&[(0.0, 0.0)], 1.0);
        assert_eq!(normalized_adjacency(&single).to_dense(), vec![1.0]);

        let pair = graph_at(&[(0.0, 0.0), (1.0, 0.0)], 1.0);
        for v in normalized_adjacency(&pair).to_dense() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn json_export_round_trips() {
        let g = graph_at(&[(0.0, 0.0), (0.0, 2.0), (5.0, 5.0)], 3.0);
        let mut buf = Vec::new();
        g.write_json(&mut buf).unwrap();
        let back: GraphExport = serde_json::from_slice(&buf).unwrap();
        assert_eq!(back.edges, g.edges);
        assert_eq!(back.threshold_um, 3.0);
    }
}
