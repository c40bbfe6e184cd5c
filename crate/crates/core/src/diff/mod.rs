//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is an eager tape: every op computes its value immediately and
//! records how to push gradients back to its inputs. Nodes are appended in
//! evaluation order, so the tape is already topologically sorted and
//! [`Graph::backward`] is one reverse sweep.
//!
//! Image tensors are `[channels, height, width]`; there is no batch axis,
//! batches are handled by running one graph per example.

mod adam;
mod checkpoint;
mod gradcheck;
mod linalg;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use gradcheck::{check_gradients, rel_error, GradCheck};
pub use checkpoint::{read_checkpoint, write_checkpoint, NamedTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::error::{Error, Result};
use crate::mask;
use crate::wht;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {numel} values, got {}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Handle to a node of one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Forward behaviour of the straight-through sampling node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GumbelMode {
    /// Forward emits the hard draw (`1[soft > 0.5]`, see
    /// [`mask::hard_from_noise`]); backward uses the soft sample's derivative.
    StraightThrough,
    /// Forward emits the soft sample itself.
    Relaxed,
}

/// Denominator of the masked average `Σ m·y / D`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Denominator {
    /// `D = Σ m + ε`.
    Epsilon(f64),
    /// `D = max(Σ m, 1)`.
    UnitFloor,
}

impl Denominator {
    fn eval(self, sum: f64) -> f64 {
        match self {
            Denominator::Epsilon(eps) => sum + eps,
            Denominator::UnitFloor => sum.max(1.0),
        }
    }

    fn slope(self, sum: f64) -> f64 {
        match self {
            Denominator::Epsilon(_) => 1.0,
            Denominator::UnitFloor => {
                if sum > 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        cols: Vec<f64>,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    SumLastAxis(Var),
    Mse(Var, Var),
    Concat(Var, Var),
    Reshape(Var),
    GumbelSt {
        probs: Var,
        soft: Vec<f64>,
        tau: f64,
        s: usize,
    },
    NormalizeMask {
        input: Var,
        alpha: f64,
    },
    MaskedAverage {
        mask: Var,
        values: Vec<f64>,
        s: usize,
        denom: Denominator,
    },
    Wht2d {
        input: Var,
        n: usize,
        scale: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.grads = None;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64, name: &str) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.data(a).iter().map(|&x| f(x)).collect(),
        };
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Div(a, b), |x, y| x / y, "div")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(format!("matmul: incompatible shapes {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        linalg::gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::Matmul(a, b),
            rg,
        ))
    }

    /// Stride-1 convolution with zero padding `k/2`: input `[c_in, h, w]`,
    /// weight `[c_out, c_in, k, k]` (odd `k`), optional bias `[c_out]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if si.len() != 3 || sw.len() != 4 || sw[1] != si[0] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(shape_err(format!("conv2d: input {si:?} incompatible with weight {sw:?}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(shape_err(format!("conv2d: bias shape {:?}", self.shape(b))));
            }
        }
        let (c_in, h, w) = (si[0], si[1], si[2]);
        let (c_out, k) = (sw[0], sw[2]);
        let cols = linalg::im2col(self.data(input), c_in, h, w, k);
        let hw = h * w;
        let mut out = vec![0.0; c_out * hw];
        if let Some(b) = bias {
            for (o, &bv) in out.chunks_exact_mut(hw).zip(self.data(b)) {
                o.fill(bv);
            }
        }
        linalg::gemm(c_out, c_in * k * k, hw, self.data(weight), false, &cols, false, &mut out, 1.0);
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor {
                shape: vec![c_out, h, w],
                data: out,
            },
            Op::Conv2d {
                input,
                weight,
                bias,
                cols,
            },
            rg,
        ))
    }

    /// 2×2 max pooling with stride 2; the first maximum wins ties.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(shape_err(format!("max_pool2: shape {s:?} not [c, even, even]")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / 2, w / 2);
        let x = self.data(input);
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut best = ch * h * w + 2 * y * w + 2 * xo;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ch * h * w + (2 * y + dy) * w + 2 * xo + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(
            Tensor {
                shape: vec![c, ho, wo],
                data: out,
            },
            Op::MaxPool2 { input, argmax },
            rg,
        ))
    }

    /// Nearest-neighbour 2× upsampling of `[c, h, w]`.
    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 {
            return Err(shape_err(format!("upsample2: shape {s:?} not [c, h, w]")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let x = self.data(input);
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xo in 0..2 * w {
                    out[ch * 4 * h * w + y * 2 * w + xo] = x[ch * h * w + (y / 2) * w + xo / 2];
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(
            Tensor {
                shape: vec![c, 2 * h, 2 * w],
                data: out,
            },
            Op::Upsample2(input),
            rg,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), mask::sigmoid)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Sum over the trailing axis: `[.., s] → [..]`.
    pub fn sum_last_axis(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(shape_err(format!("sum_last_axis: shape {s:?} has fewer than 2 axes")));
        }
        let last = *s.last().unwrap();
        let data = self.data(a).chunks_exact(last).map(|c| c.iter().sum()).collect();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: s[..s.len() - 1].to_vec(),
                data,
            },
            Op::SumLastAxis(a),
            rg,
        ))
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let n = self.data(a).len() as f64;
        let v = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(v), Op::Mse(a, b), rg))
    }

    /// Concatenate along the leading (channel) axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(shape_err(format!("concat: shapes {sa:?} and {sb:?}")));
        }
        let mut data = self.data(a).to_vec();
        data.extend_from_slice(self.data(b));
        let mut shape = sa.clone();
        shape[0] += sb[0];
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Concat(a, b), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.data(a).len() {
            return Err(shape_err(format!("reshape: {:?} to {shape:?}", self.shape(a))));
        }
        let value = Tensor {
            shape,
            data: self.data(a).to_vec(),
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Binary-concrete sample of `probs [N]` against logistic noise `[N·s]`,
    /// giving an `[N, s]` mask.
    pub fn gumbel_st(&mut self, probs: Var, s: usize, noise: &[f64], tau: f64, mode: GumbelMode) -> Result<Var> {
        mask::check_tau(tau)?;
        if self.shape(probs).len() != 1 || noise.len() != self.data(probs).len() * s {
            return Err(shape_err(format!(
                "gumbel_st: probs {:?} with {} noise values and s = {s}",
                self.shape(probs),
                noise.len()
            )));
        }
        let n = self.data(probs).len();
        let soft = mask::relaxed_sample(self.data(probs), s, noise, tau);
        let data = match mode {
            GumbelMode::Relaxed => soft.clone(),
            GumbelMode::StraightThrough => mask::hard_from_noise(self.data(probs), s, noise)
                .into_iter()
                .map(f64::from)
                .collect(),
        };
        let rg = self.rg(probs);
        Ok(self.push(
            Tensor {
                shape: vec![n, s],
                data,
            },
            Op::GumbelSt { probs, soft, tau, s },
            rg,
        ))
    }

    /// Budget projection of a probability vector; see [`mask::normalize_probs`].
    pub fn normalize_mask(&mut self, input: Var, alpha: f64) -> Result<Var> {
        if self.shape(input).len() != 1 {
            return Err(shape_err(format!("normalize_mask: shape {:?} not 1D", self.shape(input))));
        }
        let data = mask::normalize_probs(self.data(input), alpha)?;
        let rg = self.rg(input);
        Ok(self.push(Tensor::vector(data), Op::NormalizeMask { input, alpha }, rg))
    }

    /// `zᵢ = Σₛ m[i,s]·y[i,s] / D(Σₛ m[i,s])` for a mask `[N, s]` and constant
    /// measurements `y` of the same size.
    pub fn masked_average(&mut self, mask_var: Var, values: &[f64], denom: Denominator) -> Result<Var> {
        let sh = self.shape(mask_var).to_vec();
        if sh.len() != 2 || values.len() != sh[0] * sh[1] {
            return Err(shape_err(format!(
                "masked_average: mask {sh:?} with {} values",
                values.len()
            )));
        }
        let (n, s) = (sh[0], sh[1]);
        let m = self.data(mask_var);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (mr, yr) = (&m[i * s..(i + 1) * s], &values[i * s..(i + 1) * s]);
            let num: f64 = mr.iter().zip(yr).map(|(a, b)| a * b).sum();
            let den = denom.eval(mr.iter().sum());
            out.push(num / den);
        }
        let rg = self.rg(mask_var);
        Ok(self.push(
            Tensor::vector(out),
            Op::MaskedAverage {
                mask: mask_var,
                values: values.to_vec(),
                s,
                denom,
            },
            rg,
        ))
    }

    /// `scale · H·x` for a field of `n²` values in natural order, keeping the
    /// input's shape.
    pub fn wht2d(&mut self, input: Var, n: usize, scale: f64) -> Result<Var> {
        if !n.is_power_of_two() || self.data(input).len() != n * n {
            return Err(shape_err(format!("wht2d: {:?} is not {n}x{n}", self.shape(input))));
        }
        let mut data = self.data(input).to_vec();
        wht::fwht2d_in_place(&mut data, n);
        data.iter_mut().for_each(|v| *v *= scale);
        let value = Tensor {
            shape: self.shape(input).to_vec(),
            data,
        };
        let rg = self.rg(input);
        Ok(self.push(value, Op::Wht2d { input, n, scale }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.data(loss).len() != 1 {
            return Err(shape_err(format!("backward: loss has shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            self.grads = Some(grads);
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the last backward pass. `None` before [`Graph::backward`],
    /// and for nodes that do not require gradients or do not reach the loss.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if !self.rg(v) {
            return None;
        }
        self.grads.as_ref()?.get(v.0)?.as_deref()
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.rg(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.data.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, d)| *x += d));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, d)| *x += d));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, d)| *x += d));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    for ((x, d), y) in ga.iter_mut().zip(g).zip(vb) {
                        *x += d * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, d), y) in gb.iter_mut().zip(g).zip(va) {
                        *x += d * y;
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    for ((x, d), y) in ga.iter_mut().zip(g).zip(vb) {
                        *x += d / y;
                    }
                });
                acc(*b, &mut |gb| {
                    for (((x, d), num), den) in gb.iter_mut().zip(g).zip(va).zip(vb) {
                        *x -= d * num / (den * den);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, d)| *x += c * d)),
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.data(*a), self.data(*b));
                // dA = G·Bᵀ, dB = Aᵀ·G
                acc(*a, &mut |ga| linalg::gemm(m, n, k, g, false, vb, true, ga, 1.0));
                acc(*b, &mut |gb| linalg::gemm(k, m, n, va, true, g, false, gb, 1.0));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                cols,
            } => {
                let si = self.shape(*input);
                let sw = self.shape(*weight);
                let (c_in, h, w) = (si[0], si[1], si[2]);
                let (c_out, k) = (sw[0], sw[2]);
                let hw = h * w;
                let ckk = c_in * k * k;
                acc(*weight, &mut |gw| linalg::gemm(c_out, hw, ckk, g, false, cols, true, gw, 1.0));
                if let Some(b) = bias {
                    acc(*b, &mut |gb| {
                        for (x, row) in gb.iter_mut().zip(g.chunks_exact(hw)) {
                            *x += row.iter().sum::<f64>();
                        }
                    });
                }
                let wv = self.data(*weight);
                acc(*input, &mut |gi| {
                    let mut dcols = vec![0.0; ckk * hw];
                    linalg::gemm(ckk, c_out, hw, wv, true, g, false, &mut dcols, 0.0);
                    linalg::col2im_add(&dcols, c_in, h, w, k, gi);
                });
            }
            Op::MaxPool2 { input, argmax } => acc(*input, &mut |gi| {
                for (&src, d) in argmax.iter().zip(g) {
                    gi[src] += d;
                }
            }),
            Op::Upsample2(input) => {
                let s = self.shape(*input);
                let (c, h, w) = (s[0], s[1], s[2]);
                acc(*input, &mut |gi| {
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for x in 0..2 * w {
                                gi[ch * h * w + (y / 2) * w + x / 2] += g[ch * 4 * h * w + y * 2 * w + x];
                            }
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let va = self.data(*a);
                acc(*a, &mut |ga| {
                    for ((x, d), v) in ga.iter_mut().zip(g).zip(va) {
                        if *v > 0.0 {
                            *x += d;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let out = &node.value.data;
                acc(*a, &mut |ga| {
                    for ((x, d), s) in ga.iter_mut().zip(g).zip(out) {
                        *x += d * s * (1.0 - s);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = self.data(*a).len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::SumLastAxis(a) => {
                let last = *self.shape(*a).last().unwrap();
                acc(*a, &mut |ga| {
                    for (chunk, d) in ga.chunks_exact_mut(last).zip(g) {
                        chunk.iter_mut().for_each(|x| *x += d);
                    }
                });
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.data(*a), self.data(*b));
                let c = 2.0 * g[0] / va.len() as f64;
                acc(*a, &mut |ga| {
                    for ((x, p), q) in ga.iter_mut().zip(va).zip(vb) {
                        *x += c * (p - q);
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, p), q) in gb.iter_mut().zip(va).zip(vb) {
                        *x -= c * (p - q);
                    }
                });
            }
            Op::Concat(a, b) => {
                let na = self.data(*a).len();
                acc(*a, &mut |ga| ga.iter_mut().zip(&g[..na]).for_each(|(x, d)| *x += d));
                acc(*b, &mut |gb| gb.iter_mut().zip(&g[na..]).for_each(|(x, d)| *x += d));
            }
            Op::Reshape(a) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, d)| *x += d)),
            Op::GumbelSt { probs, soft, tau, s } => {
                let p = self.data(*probs);
                acc(*probs, &mut |gp| {
                    for (i, x) in gp.iter_mut().enumerate() {
                        let pi = p[i];
                        // clamp has zero slope outside [ε, 1−ε]
                        if pi <= mask::PROB_EPS || pi >= 1.0 - mask::PROB_EPS {
                            continue;
                        }
                        let dlogit = 1.0 / (pi * (1.0 - pi));
                        let mut total = 0.0;
                        for j in i * s..(i + 1) * s {
                            total += g[j] * soft[j] * (1.0 - soft[j]) / tau;
                        }
                        *x += total * dlogit;
                    }
                });
            }
            Op::NormalizeMask { input, alpha } => {
                let back = mask::normalize_probs_backward(self.data(*input), *alpha, g);
                acc(*input, &mut |gi| gi.iter_mut().zip(&back).for_each(|(x, d)| *x += d));
            }
            Op::MaskedAverage {
                mask: mv,
                values,
                s,
                denom,
            } => {
                let m = self.data(*mv);
                let z = &node.value.data;
                let s = *s;
                acc(*mv, &mut |gm| {
                    for i in 0..z.len() {
                        let row = &m[i * s..(i + 1) * s];
                        let sum: f64 = row.iter().sum();
                        let den = denom.eval(sum);
                        let slope = denom.slope(sum);
                        for j in i * s..(i + 1) * s {
                            gm[j] += g[i] * (values[j] - z[i] * slope) / den;
                        }
                    }
                });
            }
            Op::Wht2d { input, n, scale } => {
                let mut back = g.to_vec();
                wht::fwht2d_in_place(&mut back, *n);
                acc(*input, &mut |gi| gi.iter_mut().zip(&back).for_each(|(x, d)| *x += scale * d));
            }
        }
    }
}

#[cfg(test)]
mod tests;
