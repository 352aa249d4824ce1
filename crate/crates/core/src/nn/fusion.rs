//! Fusion of coordinate features `X_pos` and depth features `X_Z`.
//!
//! Cross attention per block: `S = X_pos · X_Zᵀ`, `A_Z = softmax_rows(S)`,
//! `A_posᵀ = softmax_cols(S)ᵀ = softmax_rows(X_Z · X_posᵀ)`, and the fused
//! block is `[A_Z · X_Z, A_posᵀ · X_pos]`. Cluster attention restricts the
//! blocks to clusters; full attention uses one block over all nodes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::layers::Mlp;
use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    Cluster,
    Full,
    Concat,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Cluster, FusionMode::Full, FusionMode::Concat];
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Cluster => "cluster",
            FusionMode::Full => "full",
            FusionMode::Concat => "concat",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cluster" => Ok(FusionMode::Cluster),
            "full" => Ok(FusionMode::Full),
            "concat" => Ok(FusionMode::Concat),
            _ => Err(Error::InvalidArgument(format!("unknown fusion mode {s:?}"))),
        }
    }
}

/// Fused node features (`n × 2d`, depth half first) and the depth
/// embedding `φ_Z` (`1 × d_z`).
#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    pub fused: Var,
    pub phi_z: Var,
}

fn check_pair(t: &Tape, x_pos: Var, x_z: Var) -> Result<usize> {
    let (a, b) = (t.shape(x_pos), t.shape(x_z));
    if a != b {
        return Err(Error::Shape(format!("fusion inputs differ in shape: {a:?} vs {b:?}")));
    }
    Ok(a[0])
}

fn attend_block(t: &mut Tape, xp: Var, xz: Var) -> Var {
    let score = t.matmul_nt(xp, xz);
    let a_z = t.softmax_rows(score);
    let depth = t.matmul(a_z, xz);
    let score_t = t.matmul_nt(xz, xp);
    let a_pos_t = t.softmax_rows(score_t);
    let pos = t.matmul(a_pos_t, xp);
    t.concat_cols(&[depth, pos])
}

/// Cross attention within each `(start, len)` row block. Blocks must tile
/// the rows in order; empty blocks are skipped.
pub fn cluster_cross_attention(t: &mut Tape, x_pos: Var, x_z: Var, blocks: &[(usize, usize)]) -> Result<Var> {
    let n = check_pair(t, x_pos, x_z)?;
    let mut next = 0;
    for &(start, len) in blocks {
        if start != next {
            return Err(Error::Shape("attention blocks must tile the rows in order".into()));
        }
        next += len;
    }
    if next != n {
        return Err(Error::Shape(format!("attention blocks cover {next} of {n} rows")));
    }
    let mut parts = Vec::with_capacity(blocks.len());
    for &(start, len) in blocks.iter().filter(|b| b.1 > 0) {
        if len == n {
            parts.push(attend_block(t, x_pos, x_z));
        } else {
            let xp = t.slice_rows(x_pos, start, len);
            let xz = t.slice_rows(x_z, start, len);
            parts.push(attend_block(t, xp, xz));
        }
    }
    if parts.is_empty() {
        return Err(Error::InvalidArgument("all attention blocks are empty".into()));
    }
    Ok(if parts.len() == 1 { parts[0] } else { t.concat_rows(&parts) })
}

pub fn full_cross_attention(t: &mut Tape, x_pos: Var, x_z: Var) -> Result<Var> {
    let n = check_pair(t, x_pos, x_z)?;
    if n == 0 {
        return Err(Error::InvalidArgument("full attention over zero nodes".into()));
    }
    cluster_cross_attention(t, x_pos, x_z, &[(0, n)])
}

pub fn concat_fusion(t: &mut Tape, x_pos: Var, x_z: Var) -> Result<Var> {
    check_pair(t, x_pos, x_z)?;
    Ok(t.concat_cols(&[x_z, x_pos]))
}

/// Multiply-adds of one cross-attention evaluation over the given block sizes.
pub fn attention_madds(block_sizes: &[usize], d: usize) -> u64 {
    block_sizes.iter().map(|&n| 4 * (n * n * d) as u64).sum()
}

/// A fusion mode together with the perceptron producing `φ_Z` from the
/// globally mean-pooled depth half.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fusion {
    pub mode: FusionMode,
    pub d: usize,
    pub phi: Mlp,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, name: &str, mode: FusionMode, d: usize, d_z: usize) -> Self {
        Self {
            mode,
            d,
            phi: Mlp::new(store, &format!("{name}.phi"), &[d, d_z, d_z]),
        }
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x_pos: Var, x_z: Var, blocks: &[(usize, usize)]) -> Result<FusionOutput> {
        let fused = match self.mode {
            FusionMode::Cluster => cluster_cross_attention(t, x_pos, x_z, blocks)?,
            FusionMode::Full => full_cross_attention(t, x_pos, x_z)?,
            FusionMode::Concat => concat_fusion(t, x_pos, x_z)?,
        };
        let depth = t.slice_cols(fused, 0, self.d);
        let pooled = t.mean_rows(depth);
        let phi_z = self.phi.forward(t, p, pooled);
        Ok(FusionOutput { fused, phi_z })
    }
}
