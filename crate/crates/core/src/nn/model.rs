//! The servo network: feature alignment, fusion, intra- then inter-cluster
//! aggregation, global pooling with the depth embedding, a GRU step and a
//! two-branch velocity head.

use serde::{Deserialize, Serialize};

use super::aggregate::{GraphIndex, InterAggregate, IntraAggregate};
use super::fusion::{Fusion, FusionMode};
use super::layers::{FeatureAlign, GruCell, Mlp};
use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{Twist, Vec3};
use crate::graph::ServoGraph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub d_z: usize,
    pub hidden: usize,
    pub head_hidden: usize,
    pub fusion: FusionMode,
    /// Speed limits applied to the emitted twist (m/s, rad/s).
    pub max_linear: f64,
    pub max_angular: f64,
    /// Divide the error channels by the RMS image error and multiply the
    /// twist by it, so the twist vanishes exactly at zero error.
    pub error_scaling: bool,
}

/// RMS image error at which a scaled network's twist equals its head output.
pub const ERROR_SCALE_REF: f64 = 0.1;

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            d_z: 16,
            hidden: 64,
            head_hidden: 64,
            fusion: FusionMode::Cluster,
            max_linear: 0.5,
            max_angular: 1.0,
            error_scaling: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_z == 0 || self.hidden == 0 || self.head_hidden == 0 {
            return Err(Error::InvalidArgument("model widths must be positive".into()));
        }
        if !(self.max_linear > 0.0 && self.max_angular > 0.0) {
            return Err(Error::InvalidArgument("speed limits must be positive".into()));
        }
        Ok(())
    }

    fn pooled_width(&self) -> usize {
        2 * self.d + self.d_z
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServoNet {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub fal_pos: FeatureAlign,
    pub fal_z: FeatureAlign,
    pub fusion: Fusion,
    pub intra: IntraAggregate,
    pub inter: InterAggregate,
    pub gru: GruCell,
    pub head_linear: Mlp,
    pub head_angular: Mlp,
}

/// Tape handles produced by one forward step.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    /// Unclamped `1 × 6` twist `[v, ω]`.
    pub twist: Var,
    pub hidden: Var,
}

impl ServoNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed);
        let s = &mut store;
        let d = config.d;
        let fal_pos = FeatureAlign::new(s, "fal_pos", 4, d)?;
        let fal_z = FeatureAlign::new(s, "fal_z", 2, d)?;
        let fusion = Fusion::new(s, "fusion", config.fusion, d, config.d_z);
        let intra = IntraAggregate::new(s, "intra", 2 * d);
        let inter = InterAggregate::new(s, "inter", 2 * d);
        let gru = GruCell::new(s, "gru", config.pooled_width(), config.hidden);
        let head_in = config.hidden + config.pooled_width();
        let head_linear = Mlp::new(s, "head_linear", &[head_in, config.head_hidden, 3]);
        let head_angular = Mlp::new(s, "head_angular", &[head_in, config.head_hidden, 3]);
        Ok(Self {
            config,
            store,
            fal_pos,
            fal_z,
            fusion,
            intra,
            inter,
            gru,
            head_linear,
            head_angular,
        })
    }

    pub fn zero_hidden(&self) -> Tensor {
        Tensor::zeros(1, self.config.hidden)
    }

    /// Zeroes the last layer of both heads, so the emitted twist is zero.
    pub fn zero_head(&mut self) {
        for head in [&self.head_linear, &self.head_angular] {
            let last = head.layers.last().expect("head has layers");
            for id in last.params() {
                let shape = self.store.get(id).shape();
                self.store.set(id, Tensor::zeros(shape[0], shape[1])).expect("same shape");
            }
        }
    }

    /// Records one step on the tape.
    pub fn forward(&self, t: &mut Tape, p: &Bound, gi: &GraphIndex, hidden: Var) -> Result<StepVars> {
        if gi.nodes == 0 {
            return Err(Error::Unservoable);
        }
        let (coords, depth) = self.inputs(t, gi)?;
        let x_pos = self.fal_pos.forward(t, p, coords)?;
        let x_z = self.fal_z.forward(t, p, depth)?;
        let fused = self.fusion.forward(t, p, x_pos, x_z, &gi.blocks)?;
        let x = self.intra.forward(t, p, gi, fused.fused);
        let x = self.inter.forward(t, p, gi, x);
        let pooled = t.mean_rows(x);
        let g_in = t.concat_cols(&[pooled, fused.phi_z]);
        let h = self.gru.forward(t, p, g_in, hidden);
        let head_in = t.concat_cols(&[h, g_in]);
        let lin = self.head_linear.forward(t, p, head_in);
        let ang = self.head_angular.forward(t, p, head_in);
        let mut twist = t.concat_cols(&[lin, ang]);
        if self.config.error_scaling {
            twist = t.scale(twist, gi.error_rms / ERROR_SCALE_REF);
        }
        Ok(StepVars { twist, hidden: h })
    }

    fn inputs(&self, t: &mut Tape, gi: &GraphIndex) -> Result<(Var, Var)> {
        let mut positions = gi.positions.clone();
        let mut depths = Tensor::from_vec(gi.nodes, 2, gi.depths.clone())?;
        if self.config.error_scaling {
            let k = 1.0 / (super::aggregate::ERROR_GAIN * gi.error_rms.max(1e-9));
            for r in 0..gi.nodes {
                for (m, cols) in [(&mut positions, 0..2), (&mut depths, 0..1)] {
                    for c in cols {
                        let v = m.get(r, c) * k;
                        m.set(r, c, v);
                    }
                }
            }
        }
        Ok((t.constant(positions), t.constant(depths)))
    }

    /// Inference step: clamped twist and the next hidden state.
    pub fn step(&self, graph: &ServoGraph, hidden: &Tensor) -> Result<(Twist, Tensor)> {
        let gi = GraphIndex::new(graph);
        let mut t = Tape::new();
        let p = self.store.bind_constant(&mut t);
        let h = t.constant(hidden.clone());
        let out = self.forward(&mut t, &p, &gi, h)?;
        let v = t.value(out.twist).data();
        let twist = Twist::new(Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5]));
        if !twist.is_finite() {
            return Err(Error::Numerical("network produced a non-finite twist".into()));
        }
        Ok((
            twist.clamp_norms(self.config.max_linear, self.config.max_angular),
            t.value(out.hidden).clone(),
        ))
    }

    /// Multiply-adds spent by the fusion block alone on `graph`.
    pub fn fusion_madds(&self, graph: &ServoGraph) -> Result<u64> {
        let gi = GraphIndex::new(graph);
        let mut t = Tape::new();
        let p = self.store.bind_constant(&mut t);
        let (coords, depth) = self.inputs(&mut t, &gi)?;
        let x_pos = self.fal_pos.forward(&mut t, &p, coords)?;
        let x_z = self.fal_z.forward(&mut t, &p, depth)?;
        let before = t.madds();
        match self.config.fusion {
            FusionMode::Cluster => super::fusion::cluster_cross_attention(&mut t, x_pos, x_z, &gi.blocks)?,
            FusionMode::Full => super::fusion::full_cross_attention(&mut t, x_pos, x_z)?,
            FusionMode::Concat => super::fusion::concat_fusion(&mut t, x_pos, x_z)?,
        };
        Ok(t.madds() - before)
    }
}
