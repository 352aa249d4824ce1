use serde::{Deserialize, Serialize};

use super::params::{Bound, Init, ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// `x · W + b` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, bias: bool) -> Self {
        let w = store.add(&format!("{name}.w"), inputs, outputs, Init::FanIn);
        let b = bias.then(|| store.add(&format!("{name}.b"), 1, outputs, Init::Zeros));
        Self { w, b, inputs, outputs }
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Var {
        let y = t.matmul(x, p.var(self.w));
        match self.b {
            Some(b) => t.add_row(y, p.var(b)),
            None => y,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

/// Linear layers with SiLU between them and no activation after the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` lists every layer width including input and output.
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize]) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, mut x: Var) -> Var {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(t, p, x);
            if i + 1 < self.layers.len() {
                x = t.silu(x);
            }
        }
        x
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }
}

/// Feature alignment: a learned affine map plus SiLU that lifts raw
/// coordinate (2–4 columns) or depth (1–2 columns) channels to width `d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureAlign {
    pub linear: Linear,
}

impl FeatureAlign {
    pub const MAX_INPUTS: usize = 4;

    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, d: usize) -> Result<Self> {
        if inputs == 0 || inputs > Self::MAX_INPUTS || d == 0 {
            return Err(Error::Shape(format!("feature alignment takes 1-4 input columns, got {inputs} -> {d}")));
        }
        Ok(Self {
            linear: Linear::new(store, name, inputs, d, true),
        })
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let cols = t.shape(x)[1];
        if cols != self.linear.inputs {
            return Err(Error::Shape(format!("feature alignment expects {} columns, got {cols}", self.linear.inputs)));
        }
        let y = self.linear.forward(t, p, x);
        Ok(t.silu(y))
    }
}

/// Gated recurrent unit with gate order `(r, z, n)` packed along columns:
/// `r = σ(xW_r + b_r + hU_r + c_r)`, `z` likewise,
/// `n = tanh(xW_n + b_n + r ⊙ (hU_n + c_n))`, `h' = (1 − z) ⊙ n + z ⊙ h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub bx: ParamId,
    pub bh: ParamId,
    pub inputs: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, hidden: usize) -> Self {
        Self {
            wx: store.add(&format!("{name}.wx"), inputs, 3 * hidden, Init::FanIn),
            wh: store.add(&format!("{name}.wh"), hidden, 3 * hidden, Init::FanIn),
            bx: store.add(&format!("{name}.bx"), 1, 3 * hidden, Init::Zeros),
            bh: store.add(&format!("{name}.bh"), 1, 3 * hidden, Init::Zeros),
            inputs,
            hidden,
        }
    }

    /// One step on `1 × inputs` input and `1 × hidden` state.
    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var, h: Var) -> Var {
        let hd = self.hidden;
        let gx = t.matmul(x, p.var(self.wx));
        let gx = t.add_row(gx, p.var(self.bx));
        let gh = t.matmul(h, p.var(self.wh));
        let gh = t.add_row(gh, p.var(self.bh));
        let (xr, xz, xn) = (t.slice_cols(gx, 0, hd), t.slice_cols(gx, hd, hd), t.slice_cols(gx, 2 * hd, hd));
        let (hr, hz, hn) = (t.slice_cols(gh, 0, hd), t.slice_cols(gh, hd, hd), t.slice_cols(gh, 2 * hd, hd));
        let r = t.add(xr, hr);
        let r = t.sigmoid(r);
        let z = t.add(xz, hz);
        let z = t.sigmoid(z);
        let rn = t.mul(r, hn);
        let n = t.add(xn, rn);
        let n = t.tanh(n);
        let keep = t.affine(z, -1.0, 1.0);
        let a = t.mul(keep, n);
        let b = t.mul(z, h);
        t.add(a, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.wx, self.wh, self.bx, self.bh]
    }
}
