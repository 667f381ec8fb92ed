//! Parameter layout and forward passes for the three message-passing stacks.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Arch, GnnConfig};
use crate::error::{Error, Result};
use crate::graph::{normalized_adjacency, CircuitGraph};
use crate::tensor::{ParamStore, SparseMatrix, Tape, Tensor, Var};

const GAT_SLOPE: f64 = 0.2;

/// Fixed graph operators shared by every epoch.
#[derive(Debug, Clone)]
pub struct GraphOps {
    pub n_nodes: usize,
    adj: Rc<SparseMatrix>,
    /// Directed edges, both orientations of every undirected edge.
    src: Rc<Vec<usize>>,
    dst: Rc<Vec<usize>>,
    dist: Tensor,
    /// Same with a self loop per node appended (edge feature 0).
    src_loop: Rc<Vec<usize>>,
    dst_loop: Rc<Vec<usize>>,
    dist_loop: Tensor,
}

impl GraphOps {
    pub fn new(g: &CircuitGraph) -> Self {
        let n = g.n_nodes();
        let feat = g.edge_feature();
        let mut src = Vec::with_capacity(2 * g.n_edges());
        let mut dst = Vec::with_capacity(2 * g.n_edges());
        let mut dist = Vec::with_capacity(2 * g.n_edges());
        for (&(u, v), &d) in g.edges.iter().zip(&feat) {
            src.extend([u, v]);
            dst.extend([v, u]);
            dist.extend([d, d]);
        }
        let mut src_loop = src.clone();
        let mut dst_loop = dst.clone();
        let mut dist_loop = dist.clone();
        src_loop.extend(0..n);
        dst_loop.extend(0..n);
        dist_loop.extend(std::iter::repeat_n(0.0, n));
        GraphOps {
            n_nodes: n,
            adj: Rc::new(normalized_adjacency(g)),
            src: Rc::new(src),
            dst: Rc::new(dst),
            dist: Tensor::column(dist),
            src_loop: Rc::new(src_loop),
            dst_loop: Rc::new(dst_loop),
            dist_loop: Tensor::column(dist_loop),
        }
    }

    /// `(source, target)` pairs scored by GAT, self loops last.
    pub fn attention_edges(&self) -> Vec<(usize, usize)> {
        self.src_loop.iter().copied().zip(self.dst_loop.iter().copied()).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Mode {
    Train { seed: u64 },
    Eval,
}

pub(crate) struct Forward {
    /// `[n, 1]` prediction in normalized label units.
    pub out: Var,
    /// GAT only: per layer, per head, one weight per attention edge.
    pub attention: Vec<Vec<Var>>,
}

fn layer_widths(cfg: &GnnConfig, in_width: usize) -> Vec<(usize, usize)> {
    let k = cfg.n_layers;
    (0..k)
        .map(|l| {
            let input = if l == 0 {
                in_width
            } else if cfg.arch == Arch::Gat {
                cfg.gat_heads * cfg.hidden_channels
            } else {
                cfg.hidden_channels
            };
            let output = match cfg.arch {
                Arch::Gin => cfg.hidden_channels,
                _ if l + 1 == k => 1,
                _ => cfg.hidden_channels,
            };
            (input, output)
        })
        .collect()
}

fn heads_at(cfg: &GnnConfig, layer: usize) -> usize {
    if layer + 1 == cfg.n_layers {
        1
    } else {
        cfg.gat_heads
    }
}

/// Glorot weights and zero biases, drawn in name order from `cfg.seed`.
pub fn init_params(cfg: &GnnConfig, in_width: usize) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut p = ParamStore::new();
    for (l, (i, o)) in layer_widths(cfg, in_width).into_iter().enumerate() {
        match cfg.arch {
            Arch::Gcn => {
                p.insert(format!("gcn.{l}.weight"), Tensor::glorot(&[i, o], i, o, &mut rng));
                p.insert(format!("gcn.{l}.bias"), Tensor::zeros(&[o]));
            }
            Arch::Gat => {
                for h in 0..heads_at(cfg, l) {
                    let pre = format!("gat.{l}.head{h}");
                    p.insert(format!("{pre}.weight"), Tensor::glorot(&[i, o], i, o, &mut rng));
                    p.insert(format!("{pre}.att_src"), Tensor::glorot(&[o, 1], o, 1, &mut rng));
                    p.insert(format!("{pre}.att_dst"), Tensor::glorot(&[o, 1], o, 1, &mut rng));
                    if cfg.edge_features {
                        p.insert(format!("{pre}.att_edge"), Tensor::zeros(&[1]));
                    }
                    p.insert(format!("{pre}.bias"), Tensor::zeros(&[o]));
                }
            }
            Arch::Gin => {
                let h = cfg.hidden_channels;
                p.insert(format!("gin.{l}.eps"), Tensor::full(&[1], cfg.gin_eps));
                p.insert(format!("gin.{l}.mlp0.weight"), Tensor::glorot(&[i, h], i, h, &mut rng));
                p.insert(format!("gin.{l}.mlp0.bias"), Tensor::zeros(&[h]));
                p.insert(format!("gin.{l}.mlp1.weight"), Tensor::glorot(&[h, o], h, o, &mut rng));
                p.insert(format!("gin.{l}.mlp1.bias"), Tensor::zeros(&[o]));
                if cfg.edge_features {
                    p.insert(format!("gin.{l}.edge"), Tensor::zeros(&[1, i]));
                }
            }
        }
    }
    let last = if cfg.arch == Arch::Gin { cfg.hidden_channels } else { 1 };
    if cfg.input_skip || cfg.arch == Arch::Gin {
        let i = last + if cfg.input_skip { in_width } else { 0 };
        p.insert("head.weight", Tensor::glorot(&[i, 1], i, 1, &mut rng));
        p.insert("head.bias", Tensor::zeros(&[1]));
    }
    p
}

/// Input feature width a parameter set was built for.
pub fn input_width(cfg: &GnnConfig, params: &ParamStore) -> Result<usize> {
    Ok(params.require(first_weight(cfg.arch))?.dims2("input_width")?.0)
}

fn first_weight(arch: Arch) -> &'static str {
    match arch {
        Arch::Gcn => "gcn.0.weight",
        Arch::Gat => "gat.0.head0.weight",
        Arch::Gin => "gin.0.mlp0.weight",
    }
}

pub(crate) fn load_params(tape: &mut Tape, params: &ParamStore) -> BTreeMap<String, Var> {
    params
        .iter()
        .map(|(name, t)| (name.clone(), tape.param(t.clone())))
        .collect()
}

fn get(vars: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::validation(format!("missing parameter `{name}`")))
}

fn linear(tape: &mut Tape, vars: &BTreeMap<String, Var>, x: Var, pre: &str) -> Result<Var> {
    let h = tape.matmul(x, get(vars, &format!("{pre}.weight"))?)?;
    tape.add_row(h, get(vars, &format!("{pre}.bias"))?)
}

pub(crate) fn forward(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &GnnConfig,
    ops: &GraphOps,
    x: Var,
    mode: Mode,
) -> Result<Forward> {
    let (n, width) = tape.value(x).dims2("gnn_forward")?;
    if n != ops.n_nodes {
        return Err(Error::shape(
            "gnn_forward",
            format!("{n} feature rows for {} nodes", ops.n_nodes),
        ));
    }
    let expected = tape.value(get(vars, first_weight(cfg.arch))?).shape()[0];
    if width != expected {
        return Err(Error::shape(
            "gnn_forward",
            format!("features have {width} columns, model expects {expected}"),
        ));
    }
    let k = cfg.n_layers;
    let mut h = x;
    let mut attention = Vec::new();
    for l in 0..k {
        h = match cfg.arch {
            Arch::Gcn => {
                let xw = tape.matmul(h, get(vars, &format!("gcn.{l}.weight"))?)?;
                let agg = tape.spmm(&ops.adj, xw)?;
                tape.add_row(agg, get(vars, &format!("gcn.{l}.bias"))?)?
            }
            Arch::Gat => {
                let mut heads = Vec::new();
                let mut alphas = Vec::new();
                for hd in 0..heads_at(cfg, l) {
                    let (out, alpha) = gat_head(tape, vars, cfg, ops, h, &format!("gat.{l}.head{hd}"))?;
                    heads.push(out);
                    alphas.push(alpha);
                }
                attention.push(alphas);
                if heads.len() == 1 {
                    heads[0]
                } else {
                    tape.concat_cols(&heads)?
                }
            }
            Arch::Gin => {
                let eps = get(vars, &format!("gin.{l}.eps"))?;
                let edge = if cfg.edge_features {
                    Some(get(vars, &format!("gin.{l}.edge"))?)
                } else {
                    None
                };
                let z = gin_pre_mlp(tape, ops, h, eps, edge)?;
                let z = linear(tape, vars, z, &format!("gin.{l}.mlp0"))?;
                let z = tape.relu(z);
                linear(tape, vars, z, &format!("gin.{l}.mlp1"))?
            }
        };
        let hidden = l + 1 < k || cfg.arch == Arch::Gin;
        if hidden {
            h = tape.relu(h);
        }
        if let (0, true, Mode::Train { seed }) = (l, hidden, mode) {
            h = tape.dropout(h, cfg.dropout_p, true, seed)?;
        }
    }
    if cfg.input_skip {
        h = tape.concat_cols(&[h, x])?;
    }
    if cfg.input_skip || cfg.arch == Arch::Gin {
        h = linear(tape, vars, h, "head")?;
    }
    Ok(Forward { out: h, attention })
}

/// One attention head: returns the aggregated `[n, out]` block and the
/// softmax weights over `ops.attention_edges()`.
fn gat_head(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &GnnConfig,
    ops: &GraphOps,
    h: Var,
    pre: &str,
) -> Result<(Var, Var)> {
    let wh = tape.matmul(h, get(vars, &format!("{pre}.weight"))?)?;
    let s_src = tape.matmul(wh, get(vars, &format!("{pre}.att_src"))?)?;
    let s_dst = tape.matmul(wh, get(vars, &format!("{pre}.att_dst"))?)?;
    let e_src = tape.gather_rows(s_src, &ops.src_loop)?;
    let e_dst = tape.gather_rows(s_dst, &ops.dst_loop)?;
    let mut logit = tape.add(e_src, e_dst)?;
    if cfg.edge_features {
        let d = tape.constant(ops.dist_loop.clone());
        let de = tape.mul_scalar_var(d, get(vars, &format!("{pre}.att_edge"))?)?;
        logit = tape.add(logit, de)?;
    }
    let logit = tape.leaky_relu(logit, GAT_SLOPE);
    let m = ops.src_loop.len();
    let flat = tape.reshape(logit, &[m])?;
    let alpha = tape.segment_softmax(flat, &ops.dst_loop, ops.n_nodes)?;
    let alpha_col = tape.reshape(alpha, &[m, 1])?;
    let msg = tape.gather_rows(wh, &ops.src_loop)?;
    let msg = tape.mul_col(msg, alpha_col)?;
    let agg = tape.scatter_add_rows(msg, &ops.dst_loop, ops.n_nodes)?;
    let out = tape.add_row(agg, get(vars, &format!("{pre}.bias"))?)?;
    Ok((out, alpha))
}

/// `(1 + ε)·h_v + Σ_{u→v} m_u` with `m_u = h_u + d_uv·w_e` when an edge
/// weight row is supplied.
pub(crate) fn gin_pre_mlp(tape: &mut Tape, ops: &GraphOps, h: Var, eps: Var, edge: Option<Var>) -> Result<Var> {
    let scaled = tape.mul_scalar_var(h, eps)?;
    let own = tape.add(h, scaled)?;
    if ops.src.is_empty() {
        return Ok(own);
    }
    let mut msg = tape.gather_rows(h, &ops.src)?;
    if let Some(w) = edge {
        let d = tape.constant(ops.dist.clone());
        let dw = tape.matmul(d, w)?;
        msg = tape.add(msg, dw)?;
    }
    let agg = tape.scatter_add_rows(msg, &ops.dst, ops.n_nodes)?;
    tape.add(own, agg)
}
