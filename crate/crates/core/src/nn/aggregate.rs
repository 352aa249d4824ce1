//! Message passing over the hierarchical keypoint graph.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::layers::{Linear, Mlp};
use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::graph::ServoGraph;

/// Scale on current−target differences in the network inputs; errors near
/// convergence are small next to the absolute coordinates.
pub const ERROR_GAIN: f64 = 5.0;

/// Index arrays derived from a [`ServoGraph`], shared by the layers.
#[derive(Clone, Debug)]
pub struct GraphIndex {
    pub nodes: usize,
    pub intra_src: Rc<[usize]>,
    pub intra_dst: Rc<[usize]>,
    /// Indices of centre nodes, one per cluster.
    pub centers: Rc<[usize]>,
    /// Inter-cluster edges expressed in cluster indices.
    pub inter_src: Rc<[usize]>,
    pub inter_dst: Rc<[usize]>,
    /// Cluster index of each node.
    pub node_cluster: Rc<[usize]>,
    /// Row blocks `(start, len)` per cluster, centre included.
    pub blocks: Vec<(usize, usize)>,
    /// `[g·(x_cur − x_tgt), g·(y_cur − y_tgt), x_tgt, y_tgt]` per node with
    /// `g = ERROR_GAIN`; a linear reparameterization of the raw channels.
    pub positions: Tensor,
    /// `[g·(z_cur − z_tgt), z_tgt]` per node, row-major.
    pub depths: Vec<f64>,
    /// Root-mean-square image error `‖(x, y)_cur − (x, y)_tgt‖` over nodes.
    pub error_rms: f64,
}

impl GraphIndex {
    pub fn new(g: &ServoGraph) -> Self {
        let cluster_of_center: std::collections::HashMap<usize, usize> =
            g.clusters.iter().enumerate().map(|(k, c)| (c.center(), k)).collect();
        let positions = Tensor::from_vec(
            g.nodes.len(),
            4,
            g.nodes
                .iter()
                .flat_map(|n| {
                    let f = &n.features;
                    [ERROR_GAIN * (f[0] - f[2]), ERROR_GAIN * (f[1] - f[3]), f[2], f[3]]
                })
                .collect(),
        )
        .expect("4 channels per node");
        Self {
            nodes: g.nodes.len(),
            intra_src: g.intra_edges.iter().map(|e| e.0).collect(),
            intra_dst: g.intra_edges.iter().map(|e| e.1).collect(),
            centers: g.center_indices().into(),
            inter_src: g.inter_edges.iter().map(|e| cluster_of_center[&e.0]).collect(),
            inter_dst: g.inter_edges.iter().map(|e| cluster_of_center[&e.1]).collect(),
            node_cluster: g.nodes.iter().map(|n| n.cluster).collect(),
            blocks: g.clusters.iter().map(|c| (c.start, c.members + 1)).collect(),
            positions,
            depths: g.nodes.iter().flat_map(|n| [ERROR_GAIN * (n.features[4] - n.features[5]), n.features[5]]).collect(),
            error_rms: (g.nodes.iter().map(|n| (n.features[0] - n.features[2]).powi(2) + (n.features[1] - n.features[3]).powi(2)).sum::<f64>()
                / g.nodes.len().max(1) as f64)
                .sqrt(),
        }
    }

    pub fn clusters(&self) -> usize {
        self.centers.len()
    }
}

/// Attention over intra-cluster edges with relative-position encoding:
/// `δ_ij = P(pos_j − pos_i)`, `α_ij = softmax_j(q_i·(k_j + δ_ij)/√w)`,
/// `out_i = x_i + SiLU(O · Σ_j α_ij (v_j + δ_ij))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntraAggregate {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub pos: Linear,
    pub out: Linear,
    pub width: usize,
}

impl IntraAggregate {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), width, width, false),
            k: Linear::new(store, &format!("{name}.k"), width, width, false),
            v: Linear::new(store, &format!("{name}.v"), width, width, false),
            pos: Linear::new(store, &format!("{name}.pos"), 4, width, true),
            out: Linear::new(store, &format!("{name}.out"), width, width, false),
            width,
        }
    }

    /// Edge-list evaluation; works for any edge set grouped by destination.
    pub fn forward_edges(&self, t: &mut Tape, p: &Bound, gi: &GraphIndex, x: Var) -> Var {
        if gi.intra_src.is_empty() {
            return x;
        }
        let pos = t.constant(gi.positions.clone());
        let pos_src = t.gather_rows(pos, gi.intra_src.clone());
        let pos_dst = t.gather_rows(pos, gi.intra_dst.clone());
        let rel = t.sub(pos_src, pos_dst);
        let delta = self.pos.forward(t, p, rel);

        let q = self.q.forward(t, p, x);
        let k = self.k.forward(t, p, x);
        let v = self.v.forward(t, p, x);
        let q_dst = t.gather_rows(q, gi.intra_dst.clone());
        let k_src = t.gather_rows(k, gi.intra_src.clone());
        let k_src = t.add(k_src, delta);
        let qk = t.mul(q_dst, k_src);
        let score = t.sum_cols(qk);
        let score = t.scale(score, 1.0 / (self.width as f64).sqrt());
        let alpha = t.segment_softmax(score, gi.intra_dst.clone(), gi.nodes);

        let v_src = t.gather_rows(v, gi.intra_src.clone());
        let v_src = t.add(v_src, delta);
        let msg = t.mul_col(v_src, alpha);
        let agg = t.segment_sum(msg, gi.intra_dst.clone(), gi.nodes);
        let upd = self.out.forward(t, p, agg);
        let upd = t.silu(upd);
        t.add(x, upd)
    }

    /// Same result as [`IntraAggregate::forward_edges`] on the builder's
    /// graphs, where each cluster block is complete without self-loops.
    ///
    /// Because `δ_ij = P_j − P_i + b` with `P = pos·W`, the `−P_i + b` part
    /// shifts every score of row `i` equally (cancelled by the softmax) and
    /// adds `b − P_i` to the aggregate, leaving plain masked attention over
    /// `K + P` and `V + P` within each block.
    pub fn forward(&self, t: &mut Tape, p: &Bound, gi: &GraphIndex, x: Var) -> Var {
        if gi.intra_src.is_empty() {
            return x;
        }
        debug_assert_eq!(gi.intra_src.len(), gi.blocks.iter().map(|&(_, n)| n * (n - 1)).sum::<usize>());
        let pos = t.constant(gi.positions.clone());
        let pw = t.matmul(pos, p.var(self.pos.w));
        let q = self.q.forward(t, p, x);
        let k = self.k.forward(t, p, x);
        let v = self.v.forward(t, p, x);
        let k = t.add(k, pw);
        let v = t.add(v, pw);
        let scale = 1.0 / (self.width as f64).sqrt();
        let mut parts = Vec::with_capacity(gi.blocks.len());
        for &(start, len) in &gi.blocks {
            if len < 2 {
                parts.push(t.constant(super::tensor::Tensor::zeros(len, self.width)));
                continue;
            }
            let (qb, kb, vb) = if len == gi.nodes {
                (q, k, v)
            } else {
                (t.slice_rows(q, start, len), t.slice_rows(k, start, len), t.slice_rows(v, start, len))
            };
            let s = t.matmul_nt(qb, kb);
            let s = t.scale(s, scale);
            let mut mask = super::tensor::Tensor::zeros(len, len);
            for i in 0..len {
                mask.set(i, i, f64::NEG_INFINITY);
            }
            let mask = t.constant(mask);
            let s = t.add(s, mask);
            let a = t.softmax_rows(s);
            parts.push(t.matmul(a, vb));
        }
        let agg = if parts.len() == 1 { parts[0] } else { t.concat_rows(&parts) };
        let agg = t.sub(agg, pw);
        let agg = match self.pos.b {
            Some(b) => t.add_row(agg, p.var(b)),
            None => agg,
        };
        let upd = self.out.forward(t, p, agg);
        let upd = t.silu(upd);
        t.add(x, upd)
    }
}

/// Edge convolution between cluster centres:
/// `u_c = max_{c'} MLP([x_c, x_{c'} − x_c])`, added to the centre and to
/// every member of its cluster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterAggregate {
    pub mlp: Mlp,
    pub width: usize,
}

impl InterAggregate {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            mlp: Mlp::new(store, &format!("{name}.mlp"), &[2 * width, width, width]),
            width,
        }
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, gi: &GraphIndex, x: Var) -> Var {
        if gi.inter_src.is_empty() {
            return x;
        }
        let centers = t.gather_rows(x, gi.centers.clone());
        let own = t.gather_rows(centers, gi.inter_dst.clone());
        let other = t.gather_rows(centers, gi.inter_src.clone());
        let diff = t.sub(other, own);
        let edge = t.concat_cols(&[own, diff]);
        let msg = self.mlp.forward(t, p, edge);
        let upd = t.segment_max(msg, &gi.inter_dst, gi.clusters());
        let spread = t.gather_rows(upd, gi.node_cluster.clone());
        t.add(x, spread)
    }
}
