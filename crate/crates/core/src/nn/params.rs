//! Named parameter storage, binary serialization and the optimizer.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    /// `U(-1/√fan_in, 1/√fan_in)` with fan-in = rows.
    FanIn,
    Zeros,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

/// Parameters are stored as `f64` but always hold `f32`-representable
/// values, so the `f32` checkpoint format round-trips exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    infos: Vec<ParamInfo>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, ParamId>,
    rng: ChaCha8Rng,
    pub seed: u64,
}

fn to_f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            infos: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }

    /// Registers and initializes a parameter. Panics on a duplicate name,
    /// which is a model-construction bug.
    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let mut t = Tensor::zeros(rows, cols);
        if init == Init::FanIn {
            let bound = 1.0 / (rows.max(1) as f64).sqrt();
            for v in t.data_mut() {
                *v = to_f32_exact(self.rng.random_range(-bound..bound));
            }
        }
        let id = ParamId(self.tensors.len());
        self.infos.push(ParamInfo {
            name: name.to_string(),
            rows,
            cols,
            init,
        });
        self.tensors.push(t);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn infos(&self) -> &[ParamInfo] {
        &self.infos
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Replaces a parameter's values (rounded to `f32`).
    pub fn set(&mut self, id: ParamId, mut value: Tensor) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return Err(Error::Shape(format!(
                "parameter {} expects {:?}, got {:?}",
                self.infos[id.0].name,
                self.tensors[id.0].shape(),
                value.shape()
            )));
        }
        for v in value.data_mut() {
            *v = to_f32_exact(*v);
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn zero_all(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().fill(0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Places every parameter on the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    /// Places every parameter on the tape as a constant (inference).
    pub fn bind_constant(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }

    /// Writes `count`, then per tensor: name, shape and `f32` values (all LE).
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for (info, t) in self.infos.iter().zip(&self.tensors) {
            write_tensor(w, &info.name, t)?;
        }
        Ok(())
    }

    /// Loads values written by [`ParamStore::write_to`] into a store with
    /// the same layout.
    pub fn read_from<R: Read>(&mut self, r: &mut R) -> Result<()> {
        let fmt = |e: std::io::Error| Error::Format(format!("truncated parameter block: {e}"));
        let count = r.read_u32::<LittleEndian>().map_err(fmt)? as usize;
        if count != self.tensors.len() {
            return Err(Error::Format(format!("expected {} tensors, found {count}", self.tensors.len())));
        }
        for i in 0..count {
            let (name, t) = read_tensor(r)?;
            if name != self.infos[i].name || t.shape() != self.tensors[i].shape() {
                return Err(Error::Format(format!(
                    "tensor {i}: expected {} {:?}, found {name} {:?}",
                    self.infos[i].name,
                    self.tensors[i].shape(),
                    t.shape()
                )));
            }
            self.tensors[i] = t;
        }
        Ok(())
    }
}

pub(crate) fn write_tensor<W: Write>(w: &mut W, name: &str, t: &Tensor) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    w.write_u32::<LittleEndian>(t.rows() as u32)?;
    w.write_u32::<LittleEndian>(t.cols() as u32)?;
    for &v in t.data() {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    Ok(())
}

pub(crate) fn read_tensor<R: Read>(r: &mut R) -> Result<(String, Tensor)> {
    let fmt = |e: std::io::Error| Error::Format(format!("truncated tensor: {e}"));
    let len = r.read_u32::<LittleEndian>().map_err(fmt)? as usize;
    if len > 4096 {
        return Err(Error::Format("tensor name too long".into()));
    }
    let mut name = vec![0u8; len];
    r.read_exact(&mut name).map_err(fmt)?;
    let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
    let rows = r.read_u32::<LittleEndian>().map_err(fmt)? as usize;
    let cols = r.read_u32::<LittleEndian>().map_err(fmt)? as usize;
    let mut data = vec![0.0; rows * cols];
    for v in data.iter_mut() {
        *v = r.read_f32::<LittleEndian>().map_err(fmt)? as f64;
    }
    Ok((name, Tensor::from_vec(rows, cols, data)?))
}

/// Parameter variables for one tape.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Binds explicit variables, in parameter order (used by gradient checks).
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// `v ← μv + g; p ← p − lr·v`.
    SgdMomentum,
    /// Bias-corrected Adam with `β₁ = momentum`.
    Adam,
}

/// First-order optimizer over a [`ParamStore`]. State and parameters are
/// rounded to `f32` after every update so checkpoints round-trip exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub velocity: Vec<Tensor>,
    /// Second-moment estimates; empty for SGD.
    pub second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(store: &ParamStore, kind: OptimizerKind, lr: f64, momentum: f64) -> Self {
        let zeros = || store.tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect::<Vec<_>>();
        Self {
            kind,
            lr,
            momentum,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            velocity: zeros(),
            second: if kind == OptimizerKind::Adam { zeros() } else { Vec::new() },
        }
    }

    pub fn sgd(store: &ParamStore, lr: f64, momentum: f64) -> Self {
        Self::new(store, OptimizerKind::SgdMomentum, lr, momentum)
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), store.len());
        self.steps += 1;
        match self.kind {
            OptimizerKind::SgdMomentum => {
                for ((p, v), g) in store.tensors.iter_mut().zip(&mut self.velocity).zip(grads) {
                    for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                        *vv = to_f32_exact(self.momentum * *vv + gv);
                        *pv = to_f32_exact(*pv - self.lr * *vv);
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (self.momentum, self.beta2);
                let c1 = 1.0 - b1.powf(self.steps as f64);
                let c2 = 1.0 - b2.powf(self.steps as f64);
                let tensors = store.tensors.iter_mut().zip(&mut self.velocity).zip(&mut self.second).zip(grads);
                for (((p, m), s), g) in tensors {
                    let cells = p.data_mut().iter_mut().zip(m.data_mut()).zip(s.data_mut()).zip(g.data());
                    for (((pv, mv), sv), gv) in cells {
                        *mv = to_f32_exact(b1 * *mv + (1.0 - b1) * gv);
                        *sv = to_f32_exact(b2 * *sv + (1.0 - b2) * gv * gv);
                        *pv = to_f32_exact(*pv - self.lr * (*mv / c1) / ((*sv / c2).sqrt() + self.eps));
                    }
                }
            }
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_u64::<LittleEndian>(self.steps)?;
        let all: Vec<&Tensor> = self.velocity.iter().chain(&self.second).collect();
        w.write_u32::<LittleEndian>(all.len() as u32)?;
        for (i, t) in all.into_iter().enumerate() {
            write_tensor(w, &format!("state.{i}"), t)?;
        }
        Ok(())
    }

    /// Reads state written by an optimizer of the same kind and layout.
    pub fn read_from<R: Read>(&mut self, r: &mut R) -> Result<()> {
        let trunc = |e: std::io::Error| Error::Format(format!("truncated optimizer block: {e}"));
        self.steps = r.read_u64::<LittleEndian>().map_err(trunc)?;
        let count = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let expected = self.velocity.len() + self.second.len();
        if count != expected {
            return Err(Error::Format(format!("optimizer state has {count} tensors, expected {expected}")));
        }
        for slot in self.velocity.iter_mut().chain(self.second.iter_mut()) {
            let (_, t) = read_tensor(r)?;
            if t.shape() != slot.shape() {
                return Err(Error::Format("optimizer tensor shape mismatch".into()));
            }
            *slot = t;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut a = ParamStore::new(3);
        a.add("w", 5, 7, Init::FanIn);
        a.add("b", 1, 7, Init::Zeros);
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        let mut b = ParamStore::new(99);
        b.add("w", 5, 7, Init::FanIn);
        b.add("b", 1, 7, Init::Zeros);
        assert_ne!(a.tensors(), b.tensors());
        b.read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(a.tensors(), b.tensors());
        let mut again = Vec::new();
        b.write_to(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let mut a = ParamStore::new(0);
        a.add("w", 2, 2, Init::FanIn);
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        let mut b = ParamStore::new(0);
        b.add("w", 2, 3, Init::FanIn);
        assert!(b.read_from(&mut buf.as_slice()).is_err());
        assert!(b.read_from(&mut &buf[..5]).is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let mk = |seed| {
            let mut s = ParamStore::new(seed);
            s.add("w", 16, 4, Init::FanIn);
            s
        };
        assert_eq!(mk(1), mk(1));
        assert_ne!(mk(1).tensors(), mk(2).tensors());
        assert!(mk(1).tensors()[0].data().iter().all(|v| v.abs() < 0.25));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut s = ParamStore::new(4);
        s.add("w", 3, 3, Init::FanIn);
        let before = s.clone();
        let mut opt = Optimizer::sgd(&s, 0.0, 0.9);
        opt.step(&mut s, &[Tensor::filled(3, 3, 1.0)]);
        assert_eq!(s, before);
    }
}
