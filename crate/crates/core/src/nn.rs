//! Minimal reverse-mode autodiff over dense tensors.
//!
//! Operations are recorded on a [`Tape`] while they are evaluated eagerly;
//! [`Tape::backward`] then walks the tape in reverse. Parameters live in a
//! [`ParamSet`] borrowed by the tape, so forward passes never copy weights.
//! Dense and convolutional layers lower to GEMM via `matrixmultiply`.
//!
//! Everything is generic over [`Real`] so the same model code runs in `f32`
//! for training and in `f64` for finite-difference gradient checks.

use std::cell::RefCell;
use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;

pub trait Real:
    Float + FromPrimitive + ToPrimitive + AddAssign + SubAssign + MulAssign + Default + Debug + Send + Sync + 'static
{
    /// `c = a * b (+ c when accumulate)` with arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
        accumulate: bool,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite value")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows as isize - 1) as usize * rs as usize + (cols as isize - 1) as usize * cs as usize + 1
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
                accumulate: bool,
            ) {
                assert!(rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0 && rsc >= 0 && csc >= 0);
                assert!(a.len() >= extent(m, k, rsa, csa), "gemm: lhs too short");
                assert!(b.len() >= extent(k, n, rsb, csb), "gemm: rhs too short");
                assert!(c.len() >= extent(m, n, rsc, csc), "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: all three operands were bounds-checked above against
                // the strided extents the kernel will touch.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub data: Vec<T>,
    pub shape: Vec<usize>,
}

impl<T: Real> Tensor<T> {
    pub fn new(data: Vec<T>, shape: Vec<usize>) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "tensor data/shape mismatch");
        Tensor { data, shape }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Tensor { data: vec![T::zero(); shape.iter().product()], shape }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { data: vec![v], shape: vec![1] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    /// Number of columns when viewed as `[shape[0], rest]`.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
            shape: self.shape.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new() }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Gradients aligned with a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Grads<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Real> Grads<T> {
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        Grads { tensors: params.tensors.iter().map(|t| vec![T::zero(); t.len()]).collect() }
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.tensors[id.0]
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v.to_f64_lossy().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: T) {
        for g in &mut self.tensors {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
}

/// Initialisers for freshly created parameters.
pub mod init {
    use super::*;

    pub fn uniform<T: Real, R: Rng>(rng: &mut R, shape: Vec<usize>, bound: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64_lossy(rng.gen_range(-bound..=bound))).collect();
        Tensor::new(data, shape)
    }

    /// Unit-variance-preserving uniform init for a layer with `fan_in` inputs.
    pub fn lecun<T: Real, R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
        uniform(rng, shape, (3.0 / fan_in as f64).sqrt())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Upsample { x: Var },
    Add(Var, Var),
    Mul(Var, Var),
    LeakyRelu { x: Var, slope: f64 },
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    AddConst(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Reshape(Var),
    Sum(Var),
    Scale(Var, f64),
    GaussKl { mq: Var, sq: Var, mp: Var, sp: Var },
    GaussNll { mean: Var, target: Vec<T>, sigma: f64 },
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Eager evaluation tape.
pub struct Tape<'p, T: Real> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
    scratch: RefCell<Scratch<T>>,
}

#[derive(Default)]
struct Scratch<T> {
    cols: Vec<T>,
    tmp: Vec<T>,
    dcols: Vec<T>,
}

/// First `n` entries of `v`, growing it if needed. Contents are stale.
fn grow<T: Real>(v: &mut Vec<T>, n: usize) -> &mut [T] {
    if v.len() < n {
        v.resize(n, T::zero());
    }
    &mut v[..n]
}

// cap on im2col scratch (elements) so large batches are processed in chunks
const IM2COL_BUDGET: usize = 1 << 22;
const DIRECT_MAX_OC: usize = 64;

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Tape { params, nodes: Vec::new(), scratch: RefCell::new(Scratch { cols: Vec::new(), tmp: Vec::new(), dcols: Vec::new() }) }
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.value(v).shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data[0]
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param(id), requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// `x [B, I] · wᵀ + b` with `w [O, I]`, `b [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xt, wt) = (self.value(x), self.value(w));
        let (bsz, inp) = (xt.dim(0), xt.row_len());
        let out = wt.dim(0);
        assert_eq!(wt.dim(1), inp, "linear: input width {inp} vs weight {:?}", wt.shape);
        let mut y = vec![T::zero(); bsz * out];
        T::gemm(bsz, inp, out, &xt.data, inp as isize, 1, &wt.data, 1, inp as isize, &mut y, out as isize, 1, false);
        if let Some(b) = b {
            let bt = &self.value(b).data;
            for row in y.chunks_exact_mut(out) {
                for (v, bb) in row.iter_mut().zip(bt) {
                    *v += *bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(y, vec![bsz, out]), Op::Linear { x, w, b }, rg)
    }

    /// 2-D convolution, `x [B, C, H, W]`, `w [O, C, K, K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xt = self.value(x);
        let wt = self.value(w);
        let geo = ConvGeom::new(&xt.shape, &wt.shape, stride, pad);
        let mut y = vec![T::zero(); geo.b * geo.o * geo.hw_out()];
        let mut guard = self.scratch.borrow_mut();
        let Scratch { cols, tmp, .. } = &mut *guard;
        let chunks = if geo.direct() {
            direct_forward(&xt.data, &wt.data, &geo, &mut y);
            Vec::new()
        } else {
            geo.chunks()
        };
        for (b0, b1) in chunks {
            let n = (b1 - b0) * geo.hw_out();
            let cols = grow(cols, geo.ckk() * n);
            im2col(&xt.data, &geo, b0, b1, cols);
            let tmp = grow(tmp, geo.o * n);
            T::gemm(geo.o, geo.ckk(), n, &wt.data, geo.ckk() as isize, 1, cols, n as isize, 1, tmp, n as isize, 1, false);
            let hw = geo.hw_out();
            for img in 0..b1 - b0 {
                for o in 0..geo.o {
                    let src = &tmp[o * n + img * hw..o * n + (img + 1) * hw];
                    let dst = ((b0 + img) * geo.o + o) * hw;
                    y[dst..dst + hw].copy_from_slice(src);
                }
            }
        }
        if let Some(b) = b {
            let bt = &self.value(b).data;
            let hw = geo.hw_out();
            for (i, chunk) in y.chunks_exact_mut(hw).enumerate() {
                let bias = bt[i % geo.o];
                for v in chunk {
                    *v += bias;
                }
            }
        }
        drop(guard);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let shape = vec![geo.b, geo.o, geo.h_out, geo.w_out];
        self.push(Tensor::new(y, shape), Op::Conv2d { x, w, b, stride, pad }, rg)
    }

    /// Nearest-neighbour resize of `[B, C, H, W]` to `[B, C, h, w]`.
    pub fn upsample(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xt = self.value(x);
        let (bc, hi, wi) = (xt.dim(0) * xt.dim(1), xt.dim(2), xt.dim(3));
        let mut y = vec![T::zero(); bc * h * w];
        for p in 0..bc {
            for oy in 0..h {
                let sy = oy * hi / h;
                for ox in 0..w {
                    let sx = ox * wi / w;
                    y[(p * h + oy) * w + ox] = xt.data[(p * hi + sy) * wi + sx];
                }
            }
        }
        let shape = vec![xt.dim(0), xt.dim(1), h, w];
        let rg = self.rg(x);
        self.push(Tensor::new(y, shape), Op::Upsample { x }, rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (at, bt) = (self.value(a), self.value(b));
        assert_eq!(at.len(), bt.len(), "elementwise shape mismatch {:?} vs {:?}", at.shape, bt.shape);
        Tensor::new(at.data.iter().zip(&bt.data).map(|(x, y)| f(*x, *y)).collect(), at.shape.clone())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let xt = self.value(x);
        let t = Tensor::new(xt.data.iter().map(|v| f(*v)).collect(), xt.shape.clone());
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::from_f64_lossy(slope);
        self.unary(x, Op::LeakyRelu { x, slope }, |v| if v > T::zero() { v } else { v * s })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64_lossy(c);
        self.unary(x, Op::AddConst(x), |v| v + c)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let k = T::from_f64_lossy(c);
        self.unary(x, Op::Scale(x, c), |v| v * k)
    }

    /// Concatenate 2-D tensors along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).dim(0);
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).row_len()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); rows * total];
        let mut off = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let t = self.value(*p);
            assert_eq!(t.dim(0), rows, "concat: row mismatch");
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&t.data[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Tensor::new(out, vec![rows, total]), Op::Concat(parts.to_vec()), rg)
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let (rows, w) = (t.dim(0), t.row_len());
        assert!(start + len <= w);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&t.data[r * w + start..r * w + start + len]);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(out, vec![rows, len]), Op::Slice { x, start }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let t = self.value(x);
        let t = Tensor::new(t.data.clone(), shape);
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().fold(T::zero(), |a, b| a + *b);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Σ KL(N(mq, sq²) ‖ N(mp, sp²)) over all elements.
    pub fn gauss_kl(&mut self, mq: Var, sq: Var, mp: Var, sp: Var) -> Var {
        let v = {
            let (a, b, c, d) = (self.value(mq), self.value(sq), self.value(mp), self.value(sp));
            assert!(a.len() == b.len() && b.len() == c.len() && c.len() == d.len());
            (0..a.len()).fold(T::zero(), |acc, i| acc + kl_term(a.data[i], b.data[i], c.data[i], d.data[i]))
        };
        let rg = [mq, sq, mp, sp].iter().any(|v| self.rg(*v));
        self.push(Tensor::scalar(v), Op::GaussKl { mq, sq, mp, sp }, rg)
    }

    /// Σ −log N(target; mean, sigma²) over all elements.
    pub fn gauss_nll(&mut self, mean: Var, target: Vec<T>, sigma: f64) -> Var {
        let m = self.value(mean);
        assert_eq!(m.len(), target.len(), "nll: target length");
        let inv = 0.5 / (sigma * sigma);
        let log_norm = sigma.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln();
        let mut sq = 0.0f64;
        for (a, b) in m.data.iter().zip(&target) {
            sq += (*a - *b).to_f64_lossy().powi(2);
        }
        let v = sq * inv + log_norm * m.len() as f64;
        let rg = self.rg(mean);
        self.push(Tensor::scalar(T::from_f64_lossy(v)), Op::GaussNll { mean, target, sigma }, rg)
    }

    /// Gradients of scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let mut pg = Grads::zeros_like(self.params);
        self.backward_into(loss, &mut pg);
        pg
    }

    pub fn backward_into(&self, loss: Var, pg: &mut Grads<T>) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, g, &mut grads, pg);
        }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.rg(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backward_node(&self, i: usize, g: Vec<T>, grads: &mut [Option<Vec<T>>], pg: &mut Grads<T>) {
        let out = match &self.nodes[i].value {
            Value::Owned(t) => t,
            Value::Param(_) => self.value(Var(i)),
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Param(id) => {
                for (a, b) in pg.tensors[id.0].iter_mut().zip(&g) {
                    *a += *b;
                }
            }
            Op::Linear { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (bsz, inp, o) = (xt.dim(0), xt.row_len(), wt.dim(0));
                if let Some(dx) = self.acc(grads, *x) {
                    T::gemm(bsz, o, inp, &g, o as isize, 1, &wt.data, inp as isize, 1, dx, inp as isize, 1, true);
                }
                if let Some(dw) = self.acc(grads, *w) {
                    T::gemm(o, bsz, inp, &g, 1, o as isize, &xt.data, inp as isize, 1, dw, inp as isize, 1, true);
                }
                if let Some(b) = b {
                    if let Some(db) = self.acc(grads, *b) {
                        for row in g.chunks_exact(o) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += *v;
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let geo = ConvGeom::new(&xt.shape, &wt.shape, *stride, *pad);
                let hw = geo.hw_out();
                if let Some(b) = b {
                    if let Some(db) = self.acc(grads, *b) {
                        for (k, chunk) in g.chunks_exact(hw).enumerate() {
                            let s = chunk.iter().fold(T::zero(), |a, v| a + *v);
                            db[k % geo.o] += s;
                        }
                    }
                }
                let need_dx = self.rg(*x);
                let need_dw = self.rg(*w);
                if geo.direct() {
                    if need_dx {
                        direct_dx(&g, &wt.data, &geo, self.acc(grads, *x).expect("input requires grad"));
                    }
                    if need_dw {
                        direct_dw(&g, &xt.data, &geo, self.acc(grads, *w).expect("weight requires grad"));
                    }
                    return;
                }
                let mut guard = self.scratch.borrow_mut();
                let Scratch { cols, tmp: gy, dcols } = &mut *guard;
                for (b0, b1) in geo.chunks() {
                    let n = (b1 - b0) * hw;
                    let gy = grow(gy, geo.o * n);
                    for img in 0..b1 - b0 {
                        for o in 0..geo.o {
                            let src = ((b0 + img) * geo.o + o) * hw;
                            gy[o * n + img * hw..o * n + (img + 1) * hw].copy_from_slice(&g[src..src + hw]);
                        }
                    }
                    if need_dw {
                        let cols = grow(cols, geo.ckk() * n);
                        im2col(&xt.data, &geo, b0, b1, cols);
                        let dw = self.acc(grads, *w).expect("weight requires grad");
                        T::gemm(geo.o, n, geo.ckk(), gy, n as isize, 1, cols, 1, n as isize, dw, geo.ckk() as isize, 1, true);
                    }
                    if need_dx {
                        let dcols = grow(dcols, geo.ckk() * n);
                        T::gemm(geo.ckk(), geo.o, n, &wt.data, 1, geo.ckk() as isize, gy, n as isize, 1, dcols, n as isize, 1, false);
                        let dx = self.acc(grads, *x).expect("input requires grad");
                        col2im(dcols, &geo, b0, b1, dx);
                    }
                }
            }
            Op::Upsample { x } => {
                let xt = self.value(*x);
                let (bc, hi, wi) = (xt.dim(0) * xt.dim(1), xt.dim(2), xt.dim(3));
                let (h, w) = (out.dim(2), out.dim(3));
                if let Some(dx) = self.acc(grads, *x) {
                    for p in 0..bc {
                        for oy in 0..h {
                            let sy = oy * hi / h;
                            for ox in 0..w {
                                let sx = ox * wi / w;
                                dx[(p * hi + sy) * wi + sx] += g[(p * h + oy) * w + ox];
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.acc(grads, *v) {
                        add_into(d, &g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (at, bt) = (self.value(*a).data.clone(), self.value(*b).data.clone());
                if let Some(d) = self.acc(grads, *a) {
                    for ((d, gg), o) in d.iter_mut().zip(&g).zip(&bt) {
                        *d += *gg * *o;
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for ((d, gg), o) in d.iter_mut().zip(&g).zip(&at) {
                        *d += *gg * *o;
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                let s = T::from_f64_lossy(*slope);
                let xt = self.value(*x);
                if let Some(d) = self.acc(grads, *x) {
                    for ((d, gg), v) in d.iter_mut().zip(&g).zip(&xt.data) {
                        *d += if *v > T::zero() { *gg } else { *gg * s };
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    for ((d, gg), y) in d.iter_mut().zip(&g).zip(&out.data) {
                        *d += *gg * *y * (T::one() - *y);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    for ((d, gg), y) in d.iter_mut().zip(&g).zip(&out.data) {
                        *d += *gg * (T::one() - *y * *y);
                    }
                }
            }
            Op::Softplus(x) => {
                let xt = self.value(*x);
                if let Some(d) = self.acc(grads, *x) {
                    for ((d, gg), v) in d.iter_mut().zip(&g).zip(&xt.data) {
                        *d += *gg * sigmoid(*v);
                    }
                }
            }
            Op::AddConst(x) | Op::Reshape(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    add_into(d, &g);
                }
            }
            Op::Scale(x, c) => {
                let k = T::from_f64_lossy(*c);
                if let Some(d) = self.acc(grads, *x) {
                    for (d, gg) in d.iter_mut().zip(&g) {
                        *d += *gg * k;
                    }
                }
            }
            Op::Concat(parts) => {
                let rows = out.dim(0);
                let total = out.row_len();
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).row_len();
                    if let Some(d) = self.acc(grads, *p) {
                        for r in 0..rows {
                            add_into(&mut d[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::Slice { x, start } => {
                let xt = self.value(*x);
                let (rows, w) = (xt.dim(0), xt.row_len());
                let len = out.row_len();
                if let Some(d) = self.acc(grads, *x) {
                    for r in 0..rows {
                        add_into(&mut d[r * w + start..r * w + start + len], &g[r * len..(r + 1) * len]);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    for v in d.iter_mut() {
                        *v += g[0];
                    }
                }
            }
            Op::GaussKl { mq, sq, mp, sp } => {
                let gs = g[0];
                let (a, b, c, e) = (
                    self.value(*mq).data.clone(),
                    self.value(*sq).data.clone(),
                    self.value(*mp).data.clone(),
                    self.value(*sp).data.clone(),
                );
                let n = a.len();
                let mut dmq = vec![T::zero(); n];
                let mut dsq = vec![T::zero(); n];
                let mut dmp = vec![T::zero(); n];
                let mut dsp = vec![T::zero(); n];
                for k in 0..n {
                    let (m1, s1, m2, s2) = (a[k], b[k], c[k], e[k]);
                    let v2 = s2 * s2;
                    let diff = m1 - m2;
                    dmq[k] = gs * diff / v2;
                    dmp[k] = -dmq[k];
                    dsq[k] = gs * (-T::one() / s1 + s1 / v2);
                    dsp[k] = gs * (T::one() / s2 - (s1 * s1 + diff * diff) / (v2 * s2));
                }
                for (v, d) in [(mq, dmq), (sq, dsq), (mp, dmp), (sp, dsp)] {
                    if let Some(acc) = self.acc(grads, *v) {
                        add_into(acc, &d);
                    }
                }
            }
            Op::GaussNll { mean, target, sigma } => {
                let k = g[0] / T::from_f64_lossy(sigma * sigma);
                let m = self.value(*mean).data.clone();
                if let Some(d) = self.acc(grads, *mean) {
                    for ((d, mv), t) in d.iter_mut().zip(&m).zip(target) {
                        *d += k * (*mv - *t);
                    }
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Real>(v: T) -> T {
    // log(1 + e^v) = max(v, 0) + log1p(e^-|v|)
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

/// KL(N(m1, s1²) ‖ N(m2, s2²)) for one dimension.
pub fn kl_term<T: Real>(m1: T, s1: T, m2: T, s2: T) -> T {
    let half = T::from_f64_lossy(0.5);
    (s2 / s1).ln() + (s1 * s1 + (m1 - m2) * (m1 - m2)) / (T::from_f64_lossy(2.0) * s2 * s2) - half
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(x.len(), 4, "conv input must be [B, C, H, W]");
        assert_eq!(w.len(), 4, "conv weight must be [O, C, K, K]");
        assert_eq!(x[1], w[1], "conv channel mismatch");
        let k = w[2];
        let h_out = (x[2] + 2 * pad - k) / stride + 1;
        let w_out = (x[3] + 2 * pad - k) / stride + 1;
        ConvGeom { b: x[0], c: x[1], h: x[2], w: x[3], o: w[0], k, stride, pad, h_out, w_out }
    }

    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }

    fn hw_out(&self) -> usize {
        self.h_out * self.w_out
    }

    fn chunks(&self) -> Vec<(usize, usize)> {
        let per = (IM2COL_BUDGET / (self.ckk() * self.hw_out()).max(1)).max(1);
        (0..self.b).step_by(per).map(|s| (s, (s + per).min(self.b))).collect()
    }
}

impl ConvGeom {
    /// Output columns `lo..hi` whose input column `ox * stride + k - pad` is in range.
    fn valid_cols(&self, k: usize) -> (usize, usize) {
        let lo = if self.pad > k { (self.pad - k).div_ceil(self.stride) } else { 0 };
        let hi = if self.w + self.pad > k { ((self.w - 1 + self.pad - k) / self.stride + 1).min(self.w_out) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Small same-size 3×3 convolutions run faster as row-wise AXPYs than as
    /// thin GEMMs.
    fn direct(&self) -> bool {
        self.k == 3 && self.stride == 1 && self.pad == 1 && self.o * self.c <= DIRECT_MAX_OC
    }

    #[inline]
    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && iy < self.h as isize).then_some(iy as usize)
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, b0: usize, b1: usize, cols: &mut [T]) {
    let hw = g.hw_out();
    let n = (b1 - b0) * hw;
    // every entry is written below, so stale contents need no clearing
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let (lo, hi) = g.valid_cols(kx);
                let shift = kx as isize - g.pad as isize;
                for img in 0..b1 - b0 {
                    let src = &x[((b0 + img) * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut cols[row * n + img * hw..row * n + (img + 1) * hw];
                    for oy in 0..g.h_out {
                        let d = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                        let Some(iy) = g.input_row(oy, ky) else {
                            d.fill(T::zero());
                            continue;
                        };
                        let srow = &src[iy * g.w..(iy + 1) * g.w];
                        d[..lo].fill(T::zero());
                        d[hi..].fill(T::zero());
                        if lo == hi {
                            continue;
                        }
                        if g.stride == 1 {
                            let s0 = (lo as isize + shift) as usize;
                            d[lo..hi].copy_from_slice(&srow[s0..s0 + hi - lo]);
                        } else {
                            for (ox, v) in d[lo..hi].iter_mut().enumerate() {
                                *v = srow[(ox + lo) * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn axpy<T: Real>(y: &mut [T], x: &[T], a: T) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * *xv;
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = acc.iter().fold(T::zero(), |s, v| s + *v);
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

/// Valid input row for output row `oy` under kernel row `ky` (pad 1).
fn tap_row(oy: usize, ky: usize, h: usize) -> Option<usize> {
    (oy + ky).checked_sub(1).filter(|&r| r < h)
}

fn direct_forward<T: Real>(x: &[T], w: &[T], g: &ConvGeom, y: &mut [T]) {
    let (h, wd) = (g.h, g.w);
    let plane = h * wd;
    for b in 0..g.b {
        for o in 0..g.o {
            let out = &mut y[(b * g.o + o) * plane..][..plane];
            for c in 0..g.c {
                let inp = &x[(b * g.c + c) * plane..][..plane];
                let k = &w[(o * g.c + c) * 9..][..9];
                for ky in 0..3 {
                    for oy in 0..h {
                        let Some(iy) = tap_row(oy, ky, h) else { continue };
                        let irow = &inp[iy * wd..(iy + 1) * wd];
                        let orow = &mut out[oy * wd..(oy + 1) * wd];
                        axpy(&mut orow[1..], &irow[..wd - 1], k[ky * 3]);
                        axpy(orow, irow, k[ky * 3 + 1]);
                        axpy(&mut orow[..wd - 1], &irow[1..], k[ky * 3 + 2]);
                    }
                }
            }
        }
    }
}

fn direct_dx<T: Real>(gy: &[T], w: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (h, wd) = (g.h, g.w);
    let plane = h * wd;
    for b in 0..g.b {
        for c in 0..g.c {
            let dxp = &mut dx[(b * g.c + c) * plane..][..plane];
            for o in 0..g.o {
                let gp = &gy[(b * g.o + o) * plane..][..plane];
                let k = &w[(o * g.c + c) * 9..][..9];
                for ky in 0..3 {
                    for oy in 0..h {
                        let Some(iy) = tap_row(oy, ky, h) else { continue };
                        let grow = &gp[oy * wd..(oy + 1) * wd];
                        let drow = &mut dxp[iy * wd..(iy + 1) * wd];
                        axpy(&mut drow[..wd - 1], &grow[1..], k[ky * 3]);
                        axpy(drow, grow, k[ky * 3 + 1]);
                        axpy(&mut drow[1..], &grow[..wd - 1], k[ky * 3 + 2]);
                    }
                }
            }
        }
    }
}

fn direct_dw<T: Real>(gy: &[T], x: &[T], g: &ConvGeom, dw: &mut [T]) {
    let (h, wd) = (g.h, g.w);
    let plane = h * wd;
    for b in 0..g.b {
        for o in 0..g.o {
            let gp = &gy[(b * g.o + o) * plane..][..plane];
            for c in 0..g.c {
                let inp = &x[(b * g.c + c) * plane..][..plane];
                let k = &mut dw[(o * g.c + c) * 9..][..9];
                for ky in 0..3 {
                    for oy in 0..h {
                        let Some(iy) = tap_row(oy, ky, h) else { continue };
                        let grow = &gp[oy * wd..(oy + 1) * wd];
                        let irow = &inp[iy * wd..(iy + 1) * wd];
                        k[ky * 3] += dot(&grow[1..], &irow[..wd - 1]);
                        k[ky * 3 + 1] += dot(grow, irow);
                        k[ky * 3 + 2] += dot(&grow[..wd - 1], &irow[1..]);
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, b0: usize, b1: usize, dx: &mut [T]) {
    let hw = g.hw_out();
    let n = (b1 - b0) * hw;
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let (lo, hi) = g.valid_cols(kx);
                for img in 0..b1 - b0 {
                    let dst = &mut dx[((b0 + img) * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    let src = &cols[row * n + img * hw..row * n + (img + 1) * hw];
                    for oy in 0..g.h_out {
                        let Some(iy) = g.input_row(oy, ky) else { continue };
                        let s = &src[oy * g.w_out..(oy + 1) * g.w_out];
                        let drow = &mut dst[iy * g.w..(iy + 1) * g.w];
                        if lo == hi {
                            continue;
                        }
                        if g.stride == 1 {
                            let d0 = lo + kx - g.pad;
                            add_into(&mut drow[d0..d0 + hi - lo], &s[lo..hi]);
                        } else {
                            for ox in lo..hi {
                                drow[ox * g.stride + kx - g.pad] += s[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Real>(params: &ParamSet<T>, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update<T: Real>(&mut self, params: &mut ParamSet<T>, grads: &Grads<T>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (pi, t) in params.tensors.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[pi], &mut self.v[pi]);
            for (j, p) in t.data.iter_mut().enumerate() {
                let g = grads.tensors[pi][j].to_f64_lossy();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let upd = self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *p -= T::from_f64_lossy(upd);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        init::uniform(rng, shape, 1.0)
    }

    /// Central finite differences of `f` with respect to every entry of `p`.
    fn check_grad(params: &ParamSet<f64>, f: impl Fn(&mut Tape<f64>) -> Var) {
        let mut tape = Tape::new(params);
        let loss = f(&mut tape);
        let grads = tape.backward(loss);
        let mut work = params.clone();
        for (id, name, t) in params.iter() {
            for j in 0..t.len() {
                let orig = t.data[j];
                let h = 1e-4;
                work.get_mut(id).data[j] = orig + h;
                let up = {
                    let mut tp = Tape::new(&work);
                    let l = f(&mut tp);
                    tp.scalar(l)
                };
                work.get_mut(id).data[j] = orig - h;
                let down = {
                    let mut tp = Tape::new(&work);
                    let l = f(&mut tp);
                    tp.scalar(l)
                };
                work.get_mut(id).data[j] = orig;
                let num = (up - down) / (2.0 * h);
                let ana = grads.get(id)[j];
                let denom = num.abs().max(ana.abs()).max(1e-7);
                assert!((num - ana).abs() / denom < 1e-5, "{name}[{j}]: numeric {num} vs analytic {ana}");
            }
        }
    }

    #[test]
    fn linear_and_activations_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::default();
        let w = ps.add("w", rand_tensor(&mut rng, vec![4, 3]));
        let b = ps.add("b", rand_tensor(&mut rng, vec![4]));
        let x = rand_tensor(&mut rng, vec![2, 3]);
        check_grad(&ps, |t| {
            let xv = t.constant(x.clone());
            let (wv, bv) = (t.param(w), t.param(b));
            let y = t.linear(xv, wv, Some(bv));
            let a = t.tanh(y);
            let s = t.sigmoid(a);
            let sp = t.softplus(y);
            let m = t.mul(s, sp);
            let l = t.leaky_relu(m, 0.1);
            let c = t.concat(&[l, a]);
            let sl = t.slice_cols(c, 2, 4);
            t.sum(sl)
        });
    }

    #[test]
    fn conv_and_upsample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::default();
        let w = ps.add("w", rand_tensor(&mut rng, vec![3, 2, 3, 3]));
        let b = ps.add("b", rand_tensor(&mut rng, vec![3]));
        let x = ps.add("x", rand_tensor(&mut rng, vec![2, 2, 7, 7]));
        check_grad(&ps, |t| {
            let (wv, bv, xv) = (t.param(w), t.param(b), t.param(x));
            let y = t.conv2d(xv, wv, Some(bv), 2, 1);
            assert_eq!(t.shape(y), &[2, 3, 4, 4]);
            let u = t.upsample(y, 7, 9);
            let r = t.reshape(u, vec![2, 3 * 63]);
            let q = t.mul(r, r);
            t.sum(q)
        });
    }

    #[test]
    fn gaussian_terms_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::default();
        let mq = ps.add("mq", rand_tensor(&mut rng, vec![2, 3]));
        let rq = ps.add("rq", rand_tensor(&mut rng, vec![2, 3]));
        let mp = ps.add("mp", rand_tensor(&mut rng, vec![2, 3]));
        let rp = ps.add("rp", rand_tensor(&mut rng, vec![2, 3]));
        let target: Vec<f64> = (0..6).map(|i| i as f64 * 0.1).collect();
        check_grad(&ps, |t| {
            let (a, b, c, d) = (t.param(mq), t.param(rq), t.param(mp), t.param(rp));
            let sb = t.softplus(b);
            let sb = t.add_const(sb, 1e-3);
            let sd = t.softplus(d);
            let sd = t.add_const(sd, 1e-3);
            let kl = t.gauss_kl(a, sb, c, sd);
            let nll = t.gauss_nll(a, target.clone(), 0.3);
            let s = t.add(kl, nll);
            t.scale(s, 0.5)
        });
    }

    #[test]
    fn kl_is_zero_for_identical_gaussians() {
        assert!(kl_term(0.3f64, 0.7, 0.3, 0.7).abs() < 1e-15);
        assert!(kl_term(0.3f64, 0.7, -0.2, 0.5) > 0.0);
    }

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize) -> Vec<f64> {
        let (bn, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let o = w.dim(0);
        let (ho, wo) = ((h - 1) / stride + 1, (wd - 1) / stride + 1);
        let mut out = vec![0.0; bn * o * ho * wo];
        for b in 0..bn {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - 1;
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if (0..h as isize).contains(&iy) && (0..wd as isize).contains(&ix) {
                                        s += w.data[((oc * c + ci) * 3 + ky) * 3 + kx]
                                            * x.data[((b * c + ci) * h + iy as usize) * wd + ix as usize];
                                    }
                                }
                            }
                        }
                        out[((b * o + oc) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // stride 2, stride 1 on the row-wise path, stride 1 on the GEMM path
        for (o, c, stride) in [(2, 3, 2), (3, 4, 1), (40, 16, 1)] {
            let mut ps = ParamSet::default();
            let w = ps.add("w", rand_tensor(&mut rng, vec![o, c, 3, 3]));
            let x = rand_tensor(&mut rng, vec![2, c, 5, 6]);
            let mut t = Tape::new(&ps);
            let xv = t.constant(x.clone());
            let wv = t.param(w);
            let y = t.conv2d(xv, wv, None, stride, 1);
            let want = naive_conv(&x, ps.get(w), stride);
            let got = &t.value(y).data;
            assert_eq!(got.len(), want.len());
            for (g, e) in got.iter().zip(&want) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_size_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::default();
        let w = ps.add("w", rand_tensor(&mut rng, vec![3, 2, 3, 3]));
        let b = ps.add("b", rand_tensor(&mut rng, vec![3]));
        let x = ps.add("x", rand_tensor(&mut rng, vec![2, 2, 3, 3]));
        check_grad(&ps, |t| {
            let (wv, bv, xv) = (t.param(w), t.param(b), t.param(x));
            let u = t.upsample(xv, 5, 6);
            let y = t.conv2d(u, wv, Some(bv), 1, 1);
            let r = t.reshape(y, vec![2, 90]);
            let q = t.mul(r, r);
            t.sum(q)
        });
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut ps = ParamSet::default();
        let p = ps.add("p", Tensor::new(vec![3.0f64, -2.0], vec![2]));
        let mut opt = Adam::new(&ps, 0.1);
        for _ in 0..300 {
            let grads = {
                let mut t = Tape::new(&ps);
                let v = t.param(p);
                let sq = t.mul(v, v);
                let l = t.sum(sq);
                t.backward(l)
            };
            opt.update(&mut ps, &grads);
        }
        assert!(ps.get(p).data.iter().all(|v| v.abs() < 0.05));
    }
}
