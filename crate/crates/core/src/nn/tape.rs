//! Reverse-mode differentiation over a linear tape of matrix ops.

use std::rc::Rc;

use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Silu(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Rc<[usize]>),
    SegmentSum(Var, Rc<[usize]>),
    SegmentMax(Var, Vec<usize>),
    SegmentSoftmax(Var, Rc<[usize]>),
    MeanRows(Var),
    SumCols(Var),
}

struct Entry {
    value: Tensor,
    op: Op,
    grad: bool,
}

/// Records forward values and the ops that produced them. Also counts the
/// multiply-adds spent in matrix products.
#[derive(Default)]
pub struct Tape {
    entries: Vec<Entry>,
    madds: u64,
}

/// Gradients indexed by [`Var`]; `None` where nothing flowed.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Multiply-adds performed by matrix products so far.
    pub fn madds(&self) -> u64 {
        self.madds
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.entries[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.entries[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, grad: bool) -> Var {
        self.entries.push(Entry { value, op, grad });
        Var(self.entries.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.entries[v.0].grad)
    }

    /// A value that receives gradients.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A value that does not.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols(), y.rows(), "matmul shape mismatch {:?} x {:?}", x.shape(), y.shape());
        let madds = (x.rows() * x.cols() * y.cols()) as u64;
        let out = gemm_nn(x, y);
        self.madds += madds;
        let g = self.needs(&[a, b]);
        self.push(out, Op::MatMul(a, b), g)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols(), y.cols(), "matmul_nt shape mismatch {:?} x {:?}ᵀ", x.shape(), y.shape());
        let madds = (x.rows() * x.cols() * y.rows()) as u64;
        let out = gemm_nt(x, y);
        self.madds += madds;
        let g = self.needs(&[a, b]);
        self.push(out, Op::MatMulNT(a, b), g)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::from_vec(x.rows(), x.cols(), data).expect("shape preserved");
        let g = self.needs(&[a, b]);
        self.push(out, op, g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |p, q| p * q, Op::Mul(a, b))
    }

    /// Adds the `1 × n` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (x, b) = (self.value(a), self.value(bias));
        assert_eq!(b.shape(), [1, x.cols()], "bias shape mismatch");
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let g = self.needs(&[a, bias]);
        self.push(out, Op::AddRow(a, bias), g)
    }

    /// Scales row `i` of `a` by `col[i]` (`col` is `m × 1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (x, c) = (self.value(a), self.value(col));
        assert_eq!(c.shape(), [x.rows(), 1], "column shape mismatch");
        let mut out = x.clone();
        for r in 0..out.rows() {
            let s = c.data()[r];
            for o in out.row_mut(r) {
                *o *= s;
            }
        }
        let g = self.needs(&[a, col]);
        self.push(out, Op::MulCol(a, col), g)
    }

    /// `scale · a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(a).map(|v| scale * v + shift);
        let g = self.needs(&[a]);
        self.push(out, Op::Affine(a, scale), g)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let g = self.needs(&[a]);
        self.push(out, Op::Sigmoid(a), g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let g = self.needs(&[a]);
        self.push(out, Op::Tanh(a), g)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let g = self.needs(&[a]);
        self.push(out, Op::Silu(a), g)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let g = self.needs(&[a]);
        self.push(out, Op::SoftmaxRows(a), g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        assert!(parts.iter().all(|&p| self.value(p).rows() == rows), "concat_cols row mismatch");
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[c0..c0 + src.len()].copy_from_slice(src);
                c0 += src.len();
            }
        }
        let g = self.needs(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        assert!(parts.iter().all(|&p| self.value(p).cols() == cols), "concat_rows column mismatch");
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_vec(rows, cols, data).expect("sizes add up");
        let g = self.needs(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), g)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(x.rows(), len);
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        let g = self.needs(&[a]);
        self.push(out, Op::SliceCols(a, start), g)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.rows(), "slice_rows out of range");
        let c = x.cols();
        let out = Tensor::from_vec(len, c, x.data()[start * c..(start + len) * c].to_vec()).expect("slice");
        let g = self.needs(&[a]);
        self.push(out, Op::SliceRows(a, start), g)
    }

    /// Row `i` of the output is row `index[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: Rc<[usize]>) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(index.len(), x.cols());
        for (i, &src) in index.iter().enumerate() {
            out.row_mut(i).copy_from_slice(x.row(src));
        }
        let g = self.needs(&[a]);
        self.push(out, Op::GatherRows(a, index), g)
    }

    /// Sums the rows of `a` into `segments` buckets given by `seg[row]`.
    pub fn segment_sum(&mut self, a: Var, seg: Rc<[usize]>, segments: usize) -> Var {
        let x = self.value(a);
        assert_eq!(seg.len(), x.rows(), "segment ids must cover every row");
        let mut out = Tensor::zeros(segments, x.cols());
        for (r, &s) in seg.iter().enumerate() {
            for (o, &v) in out.row_mut(s).iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        let g = self.needs(&[a]);
        self.push(out, Op::SegmentSum(a, seg), g)
    }

    /// Column-wise max within each segment; empty segments yield zero rows.
    pub fn segment_max(&mut self, a: Var, seg: &[usize], segments: usize) -> Var {
        let x = self.value(a);
        assert_eq!(seg.len(), x.rows(), "segment ids must cover every row");
        let c = x.cols();
        let mut arg = vec![usize::MAX; segments * c];
        let mut out = Tensor::zeros(segments, c);
        for (r, &s) in seg.iter().enumerate() {
            for k in 0..c {
                let v = x.get(r, k);
                let slot = s * c + k;
                if arg[slot] == usize::MAX || v > out.data()[slot] {
                    arg[slot] = r;
                    out.data_mut()[slot] = v;
                }
            }
        }
        let g = self.needs(&[a]);
        self.push(out, Op::SegmentMax(a, arg), g)
    }

    /// Softmax of the column vector `a` within each segment.
    pub fn segment_softmax(&mut self, a: Var, seg: Rc<[usize]>, segments: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.cols(), 1, "segment_softmax takes a column vector");
        assert_eq!(seg.len(), x.rows(), "segment ids must cover every row");
        let mut max = vec![f64::NEG_INFINITY; segments];
        for (r, &s) in seg.iter().enumerate() {
            max[s] = max[s].max(x.data()[r]);
        }
        let mut out = x.clone();
        let mut sum = vec![0.0; segments];
        for (r, &s) in seg.iter().enumerate() {
            let e = (out.data()[r] - max[s]).exp();
            out.data_mut()[r] = e;
            sum[s] += e;
        }
        for (r, &s) in seg.iter().enumerate() {
            out.data_mut()[r] /= sum[s];
        }
        let g = self.needs(&[a]);
        self.push(out, Op::SegmentSoftmax(a, seg), g)
    }

    /// `1 × cols` mean over rows.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(1, x.cols());
        for r in 0..x.rows() {
            for (o, &v) in out.data_mut().iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        out.scale_in_place(1.0 / x.rows() as f64);
        let g = self.needs(&[a]);
        self.push(out, Op::MeanRows(a), g)
    }

    /// `rows × 1` sum over columns.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
        let out = Tensor::from_vec(x.rows(), 1, data).expect("column");
        let g = self.needs(&[a]);
        self.push(out, Op::SumCols(a), g)
    }

    /// Back-propagates the given output gradients (`seeds`) through the tape.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.entries.len()];
        for (v, g) in seeds {
            assert_eq!(self.value(*v).shape(), g.shape(), "seed shape mismatch");
            accumulate(&mut grads, *v, g.clone());
        }
        for idx in (0..self.entries.len()).rev() {
            let entry = &self.entries[idx];
            if !entry.grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.entries[v.0].grad
    }

    fn propagate(&self, idx: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &self.entries[idx].value;
        match &self.entries[idx].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, gemm_nt(dy, self.value(b)));
                }
                if self.wants(b) {
                    accumulate(grads, b, gemm_tn(self.value(a), dy));
                }
            }
            &Op::MatMulNT(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, gemm_nn(dy, self.value(b)));
                }
                if self.wants(b) {
                    accumulate(grads, b, gemm_tn(dy, self.value(a)));
                }
            }
            &Op::Add(a, b) => {
                self.send(grads, a, || dy.clone());
                self.send(grads, b, || dy.clone());
            }
            &Op::Sub(a, b) => {
                self.send(grads, a, || dy.clone());
                self.send(grads, b, || dy.map(|v| -v));
            }
            &Op::Mul(a, b) => {
                self.send(grads, a, || hadamard(dy, self.value(b)));
                self.send(grads, b, || hadamard(dy, self.value(a)));
            }
            &Op::AddRow(a, bias) => {
                self.send(grads, a, || dy.clone());
                self.send(grads, bias, || {
                    let mut g = Tensor::zeros(1, dy.cols());
                    for r in 0..dy.rows() {
                        for (o, &v) in g.data_mut().iter_mut().zip(dy.row(r)) {
                            *o += v;
                        }
                    }
                    g
                });
            }
            &Op::MulCol(a, col) => {
                let (x, c) = (self.value(a), self.value(col));
                self.send(grads, a, || {
                    let mut g = dy.clone();
                    for r in 0..g.rows() {
                        let s = c.data()[r];
                        for v in g.row_mut(r) {
                            *v *= s;
                        }
                    }
                    g
                });
                self.send(grads, col, || {
                    let data = (0..x.rows()).map(|r| x.row(r).iter().zip(dy.row(r)).map(|(p, q)| p * q).sum()).collect();
                    Tensor::from_vec(x.rows(), 1, data).expect("column")
                });
            }
            &Op::Affine(a, s) => self.send(grads, a, || dy.map(|v| v * s)),
            &Op::Sigmoid(a) => self.send(grads, a, || zip_map(dy, y, |g, s| g * s * (1.0 - s))),
            &Op::Tanh(a) => self.send(grads, a, || zip_map(dy, y, |g, t| g * (1.0 - t * t))),
            &Op::Silu(a) => self.send(grads, a, || {
                zip_map(dy, self.value(a), |g, x| {
                    let s = sigmoid(x);
                    g * s * (1.0 + x * (1.0 - s))
                })
            }),
            &Op::SoftmaxRows(a) => self.send(grads, a, || {
                let mut g = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, dr) = (y.row(r), dy.row(r));
                    let inner: f64 = yr.iter().zip(dr).map(|(p, q)| p * q).sum();
                    for ((o, &p), &q) in g.row_mut(r).iter_mut().zip(yr).zip(dr) {
                        *o = p * (q - inner);
                    }
                }
                g
            }),
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.send(grads, p, || {
                        let mut g = Tensor::zeros(dy.rows(), w);
                        for r in 0..dy.rows() {
                            g.row_mut(r).copy_from_slice(&dy.row(r)[c0..c0 + w]);
                        }
                        g
                    });
                    c0 += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let [h, w] = self.value(p).shape();
                    self.send(grads, p, || {
                        Tensor::from_vec(h, w, dy.data()[r0 * w..(r0 + h) * w].to_vec()).expect("slice")
                    });
                    r0 += h;
                }
            }
            &Op::SliceCols(a, start) => self.send(grads, a, || {
                let mut g = Tensor::zeros(dy.rows(), self.value(a).cols());
                for r in 0..dy.rows() {
                    g.row_mut(r)[start..start + dy.cols()].copy_from_slice(dy.row(r));
                }
                g
            }),
            &Op::SliceRows(a, start) => self.send(grads, a, || {
                let [h, w] = self.value(a).shape();
                let mut g = Tensor::zeros(h, w);
                g.data_mut()[start * w..start * w + dy.len()].copy_from_slice(dy.data());
                g
            }),
            Op::GatherRows(a, index) => self.send(grads, *a, || {
                let [h, w] = self.value(*a).shape();
                let mut g = Tensor::zeros(h, w);
                for (i, &src) in index.iter().enumerate() {
                    for (o, &v) in g.row_mut(src).iter_mut().zip(dy.row(i)) {
                        *o += v;
                    }
                }
                g
            }),
            Op::SegmentSum(a, seg) => self.send(grads, *a, || {
                let w = dy.cols();
                let mut g = Tensor::zeros(seg.len(), w);
                for (r, &s) in seg.iter().enumerate() {
                    g.row_mut(r).copy_from_slice(dy.row(s));
                }
                g
            }),
            Op::SegmentMax(a, arg) => self.send(grads, *a, || {
                let [h, w] = self.value(*a).shape();
                let mut g = Tensor::zeros(h, w);
                for (slot, &r) in arg.iter().enumerate() {
                    if r != usize::MAX {
                        let k = slot % w;
                        g.data_mut()[r * w + k] += dy.data()[slot];
                    }
                }
                g
            }),
            Op::SegmentSoftmax(a, seg) => self.send(grads, *a, || {
                let segments = seg.iter().copied().max().map_or(0, |m| m + 1);
                let mut inner = vec![0.0; segments];
                for (r, &s) in seg.iter().enumerate() {
                    inner[s] += y.data()[r] * dy.data()[r];
                }
                let data = seg.iter().enumerate().map(|(r, &s)| y.data()[r] * (dy.data()[r] - inner[s])).collect();
                Tensor::from_vec(seg.len(), 1, data).expect("column")
            }),
            &Op::MeanRows(a) => self.send(grads, a, || {
                let [h, w] = self.value(a).shape();
                let mut g = Tensor::zeros(h, w);
                let s = 1.0 / h as f64;
                for r in 0..h {
                    for (o, &v) in g.row_mut(r).iter_mut().zip(dy.data()) {
                        *o = v * s;
                    }
                }
                g
            }),
            &Op::SumCols(a) => self.send(grads, a, || {
                let [h, w] = self.value(a).shape();
                let mut g = Tensor::zeros(h, w);
                for r in 0..h {
                    let v = dy.data()[r];
                    g.row_mut(r).fill(v);
                }
                g
            }),
        }
    }

    fn send(&self, grads: &mut [Option<Tensor>], v: Var, g: impl FnOnce() -> Tensor) {
        if self.wants(v) {
            accumulate(grads, v, g());
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    zip_map(a, b, |p, q| p * q)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("same shape")
}
