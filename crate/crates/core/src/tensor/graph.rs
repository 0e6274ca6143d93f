use std::sync::atomic::{AtomicU64, Ordering};

use super::conv::{conv2d_backward, conv2d_forward};
use super::{Real, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

enum Op<T: Real> {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        stride: usize,
        padding: usize,
    },
    Relu(usize),
    Sigmoid(usize),
    Add(usize, usize),
    /// Second operand either matches the first or has one channel.
    Mul(usize, usize),
    MaxPool2 {
        input: usize,
        argmax: Vec<usize>,
    },
    Upsample2(usize),
    Sum(usize),
    Scale(usize, T),
    SoftArgmax {
        input: usize,
        beta: T,
        probs: Vec<T>,
    },
    WingLoss {
        pred: usize,
        target: usize,
        w: T,
        eps: T,
    },
    MeanSquaredError {
        pred: usize,
        target: usize,
    },
}

impl<T: Real> Op<T> {
    fn parents(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => vec![input, weight, bias],
            Op::Relu(a) | Op::Sigmoid(a) | Op::Upsample2(a) | Op::Sum(a) | Op::Scale(a, _) => {
                vec![a]
            }
            Op::MaxPool2 { input, .. } | Op::SoftArgmax { input, .. } => vec![input],
            Op::Add(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::WingLoss { pred, target, .. } | Op::MeanSquaredError { pred, target } => {
                vec![pred, target]
            }
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records operations for a single forward pass and runs the matching
/// backward pass.
///
/// Nodes are appended in evaluation order and every op only references
/// earlier nodes, so the recording is acyclic and reverse index order is a
/// reverse topological order.
pub struct Graph<T: Real = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Turns the per-op NaN/Inf scan on or off (on by default in debug builds).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::UnrecordedTensor);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite("forward activation"));
        }
        let index = self.nodes.len();
        self.nodes.push(Node { value, op });
        Ok(Var {
            graph: self.id,
            index,
        })
    }

    /// Records a tensor with no parents (input, target or parameter).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var {
            graph: self.id,
            index,
        }
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.index(v)?].value)
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (i, w, b) = (self.index(input)?, self.index(weight)?, self.index(bias)?);
        let out = conv2d_forward(self.val(i), self.val(w), self.val(b), stride, padding)?;
        self.push(
            out,
            Op::Conv2d {
                input: i,
                weight: w,
                bias: b,
                stride,
                padding,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let i = self.index(x)?;
        let out = self.val(i).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(i))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let i = self.index(x)?;
        let out = self.val(i).map(sigmoid);
        self.push(out, Op::Sigmoid(i))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (va, vb) = (self.val(ia), self.val(ib));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch(format!(
                "add of {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        self.push(out, Op::Add(ia, ib))
    }

    /// Elementwise product; `b` may have a single channel, which is then
    /// broadcast across the channels of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (va, vb) = (self.val(ia), self.val(ib));
        let data = if va.shape() == vb.shape() {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect()
        } else {
            let [n, c, h, w] = broadcast_dims(va.shape(), vb.shape())?;
            let plane = h * w;
            let mut out = Vec::with_capacity(va.numel());
            for ni in 0..n {
                let gate = &vb.data()[ni * plane..(ni + 1) * plane];
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    let xs = &va.data()[base..base + plane];
                    out.extend(xs.iter().zip(gate).map(|(&x, &y)| x * y));
                }
            }
            out
        };
        let out = Tensor::from_vec(va.shape(), data)?;
        self.push(out, Op::Mul(ia, ib))
    }

    /// 2x2 max pooling with stride 2.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let i = self.index(x)?;
        let v = self.val(i);
        let [n, c, h, w] = v.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::OddSpatialSize {
                height: h,
                width: w,
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let src = v.data();
        for nc in 0..n * c {
            let base = nc * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let top = base + 2 * oy * w + 2 * ox;
                    let mut best = top;
                    // first maximum in raster order wins ties
                    for cand in [top + 1, top + w, top + w + 1] {
                        if src[cand] > src[best] {
                            best = cand;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, oh, ow], out)?;
        self.push(out, Op::MaxPool2 { input: i, argmax })
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let i = self.index(x)?;
        let v = self.val(i);
        let [n, c, h, w] = v.dims4()?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for nc in 0..n * c {
            let src = &v.data()[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
            for oy in 0..oh {
                let row = &src[(oy / 2) * w..(oy / 2 + 1) * w];
                for (ox, d) in dst[oy * ow..(oy + 1) * ow].iter_mut().enumerate() {
                    *d = row[ox / 2];
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, oh, ow], out)?;
        self.push(out, Op::Upsample2(i))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let i = self.index(x)?;
        let s: T = self.val(i).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(i))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let i = self.index(x)?;
        let f = T::of(factor);
        let out = self.val(i).map(|v| v * f);
        self.push(out, Op::Scale(i, f))
    }

    /// Expected `(x, y)` grid coordinate under `softmax(beta * h)` for every
    /// channel of an `n x k x h x w` map; output shape `n x k x 2`.
    pub fn soft_argmax(&mut self, heatmaps: Var, beta: f64) -> Result<Var> {
        let i = self.index(heatmaps)?;
        let v = self.val(i);
        let [n, k, h, w] = v.dims4()?;
        let b = T::of(beta);
        let plane = h * w;
        let mut probs = vec![T::zero(); v.numel()];
        let mut coords = Vec::with_capacity(n * k * 2);
        for ch in 0..n * k {
            let src = &v.data()[ch * plane..(ch + 1) * plane];
            let p = &mut probs[ch * plane..(ch + 1) * plane];
            softmax_into(src, b, p);
            let (cx, cy) = expected_coords(p, w);
            coords.push(cx);
            coords.push(cy);
        }
        let out = Tensor::from_vec(&[n, k, 2], coords)?;
        self.push(
            out,
            Op::SoftArgmax {
                input: i,
                beta: b,
                probs,
            },
        )
    }

    /// Mean Wing loss of `pred - target`: `w ln(1 + |x|/eps)` below `w`,
    /// `|x| - C` above, with `C = w - w ln(1 + w/eps)`.
    pub fn wing_loss(&mut self, pred: Var, target: Var, w: f64, eps: f64) -> Result<Var> {
        if !(w > 0.0 && eps > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "wing loss needs w > 0 and eps > 0, got w={w}, eps={eps}"
            )));
        }
        let (ip, it) = (self.index(pred)?, self.index(target)?);
        let (vp, vt) = (self.val(ip), self.val(it));
        if vp.shape() != vt.shape() {
            return Err(Error::ShapeMismatch(format!(
                "wing loss of {:?} against {:?}",
                vp.shape(),
                vt.shape()
            )));
        }
        let total: f64 = vp
            .data()
            .iter()
            .zip(vt.data())
            .map(|(&p, &t)| wing(p.as_f64() - t.as_f64(), w, eps))
            .sum();
        let mean = total / vp.numel() as f64;
        self.push(
            Tensor::scalar(T::of(mean)),
            Op::WingLoss {
                pred: ip,
                target: it,
                w: T::of(w),
                eps: T::of(eps),
            },
        )
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (ip, it) = (self.index(pred)?, self.index(target)?);
        let (vp, vt) = (self.val(ip), self.val(it));
        if vp.shape() != vt.shape() {
            return Err(Error::ShapeMismatch(format!(
                "mse of {:?} against {:?}",
                vp.shape(),
                vt.shape()
            )));
        }
        let total: f64 = vp
            .data()
            .iter()
            .zip(vt.data())
            .map(|(&p, &t)| (p.as_f64() - t.as_f64()).powi(2))
            .sum();
        let mean = total / vp.numel() as f64;
        self.push(
            Tensor::scalar(T::of(mean)),
            Op::MeanSquaredError {
                pred: ip,
                target: it,
            },
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.index(loss)?;
        if self.val(root).numel() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![T::one()]);

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for p in node.op.parents() {
                assert!(p < i, "graph cycle: node {i} depends on later node {p}");
            }
            self.propagate(i, &g, &mut grads)?;
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.map(|g| Tensor::from_vec(node.value.shape(), g).expect("grad shape")))
            .collect();
        Ok(Gradients {
            graph: self.id,
            grads,
        })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let cg = conv2d_backward(
                    self.val(input),
                    self.val(weight),
                    self.val(bias),
                    stride,
                    padding,
                    g,
                )?;
                accumulate(grads, input, cg.input);
                accumulate(grads, weight, cg.weight);
                accumulate(grads, bias, cg.bias);
            }
            &Op::Relu(a) => {
                let x = self.val(a).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                accumulate(grads, a, d);
            }
            &Op::Sigmoid(a) => {
                let y = node.value.data();
                let d = g.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect();
                accumulate(grads, a, d);
            }
            &Op::Add(a, b) => {
                accumulate(grads, a, g.to_vec());
                accumulate(grads, b, g.to_vec());
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.val(a), self.val(b));
                if va.shape() == vb.shape() {
                    let da = g.iter().zip(vb.data()).map(|(&g, &y)| g * y).collect();
                    let db = g.iter().zip(va.data()).map(|(&g, &x)| g * x).collect();
                    accumulate(grads, a, da);
                    accumulate(grads, b, db);
                } else {
                    let [n, c, h, w] = broadcast_dims(va.shape(), vb.shape())?;
                    let plane = h * w;
                    let mut da = vec![T::zero(); va.numel()];
                    let mut db = vec![T::zero(); vb.numel()];
                    for ni in 0..n {
                        let gate = &vb.data()[ni * plane..(ni + 1) * plane];
                        let dgate = &mut db[ni * plane..(ni + 1) * plane];
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            for p in 0..plane {
                                da[base + p] = g[base + p] * gate[p];
                                dgate[p] += g[base + p] * va.data()[base + p];
                            }
                        }
                    }
                    accumulate(grads, a, da);
                    accumulate(grads, b, db);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let mut d = vec![T::zero(); self.val(*input).numel()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    d[src] += gv;
                }
                accumulate(grads, *input, d);
            }
            &Op::Upsample2(a) => {
                let [n, c, h, w] = self.val(a).dims4()?;
                let ow = 2 * w;
                let mut d = vec![T::zero(); n * c * h * w];
                for nc in 0..n * c {
                    let src = &g[nc * 4 * h * w..(nc + 1) * 4 * h * w];
                    let dst = &mut d[nc * h * w..(nc + 1) * h * w];
                    for (idx, &gv) in src.iter().enumerate() {
                        let (oy, ox) = (idx / ow, idx % ow);
                        dst[(oy / 2) * w + ox / 2] += gv;
                    }
                }
                accumulate(grads, a, d);
            }
            &Op::Sum(a) => {
                let d = vec![g[0]; self.val(a).numel()];
                accumulate(grads, a, d);
            }
            &Op::Scale(a, f) => {
                accumulate(grads, a, g.iter().map(|&v| v * f).collect());
            }
            Op::SoftArgmax { input, beta, probs } => {
                let [n, k, h, w] = self.val(*input).dims4()?;
                let plane = h * w;
                let coords = node.value.data();
                let mut d = vec![T::zero(); n * k * plane];
                for ch in 0..n * k {
                    let (gx, gy) = (g[2 * ch], g[2 * ch + 1]);
                    let (cx, cy) = (coords[2 * ch], coords[2 * ch + 1]);
                    let p = &probs[ch * plane..(ch + 1) * plane];
                    let dst = &mut d[ch * plane..(ch + 1) * plane];
                    for (idx, (dv, &pv)) in dst.iter_mut().zip(p).enumerate() {
                        let x = T::of((idx % w) as f64);
                        let y = T::of((idx / w) as f64);
                        *dv = *beta * pv * (gx * (x - cx) + gy * (y - cy));
                    }
                }
                accumulate(grads, *input, d);
            }
            &Op::WingLoss {
                pred,
                target,
                w,
                eps,
            } => {
                let (vp, vt) = (self.val(pred), self.val(target));
                let scale = g[0] / T::of(vp.numel() as f64);
                let dp: Vec<T> = vp
                    .data()
                    .iter()
                    .zip(vt.data())
                    .map(|(&p, &t)| scale * wing_grad(p - t, w, eps))
                    .collect();
                let dt = dp.iter().map(|&v| -v).collect();
                accumulate(grads, pred, dp);
                accumulate(grads, target, dt);
            }
            &Op::MeanSquaredError { pred, target } => {
                let (vp, vt) = (self.val(pred), self.val(target));
                let scale = T::of(2.0) * g[0] / T::of(vp.numel() as f64);
                let dp: Vec<T> = vp
                    .data()
                    .iter()
                    .zip(vt.data())
                    .map(|(&p, &t)| scale * (p - t))
                    .collect();
                let dt = dp.iter().map(|&v| -v).collect();
                accumulate(grads, pred, dp);
                accumulate(grads, target, dt);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], index: usize, delta: Vec<T>) {
    match &mut grads[index] {
        Some(existing) => existing.iter_mut().zip(delta).for_each(|(e, d)| *e += d),
        slot @ None => *slot = Some(delta),
    }
}

fn broadcast_dims(a: &[usize], b: &[usize]) -> Result<[usize; 4]> {
    match (a, b) {
        (&[n, c, h, w], &[bn, 1, bh, bw]) if (n, h, w) == (bn, bh, bw) => Ok([n, c, h, w]),
        _ => Err(Error::ShapeMismatch(format!(
            "cannot broadcast {b:?} against {a:?}"
        ))),
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable `softmax(beta * src)` written into `out`.
pub(crate) fn softmax_into<T: Real>(src: &[T], beta: T, out: &mut [T]) {
    let max = src.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(src) {
        *o = (beta * (v - max)).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

pub(crate) fn expected_coords<T: Real>(probs: &[T], width: usize) -> (T, T) {
    let mut cx = T::zero();
    let mut cy = T::zero();
    for (idx, &p) in probs.iter().enumerate() {
        cx += p * T::of((idx % width) as f64);
        cy += p * T::of((idx / width) as f64);
    }
    (cx, cy)
}

/// Wing loss of a single residual.
pub fn wing(x: f64, w: f64, eps: f64) -> f64 {
    let a = x.abs();
    if a < w {
        w * (1.0 + a / eps).ln()
    } else {
        a - (w - w * (1.0 + w / eps).ln())
    }
}

fn wing_grad<T: Real>(x: T, w: T, eps: T) -> T {
    let a = x.abs();
    let sign = if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    };
    if a < w {
        sign * w / (eps + a)
    } else {
        sign
    }
}

/// Gradients from one backward pass, indexed by [`Var`].
pub struct Gradients<T: Real = f32> {
    graph: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but yields zeros of `shape` when absent.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[-1.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).unwrap().data(), &[0.0, 2.0]);
        let z = g.leaf(t(&[1], &[0.0]));
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).unwrap().data(), &[0.5]);
    }

    #[test]
    fn conv_of_ones_is_nine() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = g.leaf(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).unwrap().shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).unwrap().data(), &[9.0]);
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let data: Vec<f64> = (0..2 * 5 * 4).map(|v| v as f64 * 0.37 - 3.0).collect();
        let input = t(&[1, 2, 5, 4], &data);
        let mut weight = Tensor::zeros(&[2, 2, 1, 1]);
        weight.data_mut()[0] = 1.0;
        weight.data_mut()[3] = 1.0;
        let mut g = Graph::new();
        let x = g.leaf(input.clone());
        let w = g.leaf(weight);
        let b = g.leaf(Tensor::zeros(&[2]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).unwrap(), &input);
    }

    #[test]
    fn conv_shape_errors() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.leaf(Tensor::zeros(&[3, 1, 3, 3]));
        let b = g.leaf(Tensor::zeros(&[3]));
        assert!(matches!(g.conv2d(x, w, b, 1, 1), Err(Error::ShapeMismatch(_))));
        let w = g.leaf(Tensor::zeros(&[3, 2, 7, 7]));
        assert!(matches!(g.conv2d(x, w, b, 1, 1), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn conv_output_size_with_stride() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::full(&[1, 1, 7, 6], 1.0));
        let w = g.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = g.leaf(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 2, 1).unwrap();
        // floor((7 + 2 - 3) / 2) + 1 = 4, floor((6 + 2 - 3) / 2) + 1 = 3
        assert_eq!(g.value(y).unwrap().shape(), &[1, 1, 4, 3]);
    }

    #[test]
    fn pool_then_upsample_of_constant_is_identity() {
        let mut g = Graph::<f32>::new();
        let c = Tensor::full(&[2, 3, 6, 8], 1.25);
        let x = g.leaf(c.clone());
        let p = g.maxpool2(x).unwrap();
        assert_eq!(g.value(p).unwrap().shape(), &[2, 3, 3, 4]);
        let u = g.upsample_nearest2(p).unwrap();
        assert_eq!(g.value(u).unwrap(), &c);
    }

    #[test]
    fn pool_rejects_odd_sizes() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(&[1, 1, 5, 4]));
        assert!(matches!(g.maxpool2(x), Err(Error::OddSpatialSize { .. })));
    }

    #[test]
    fn mul_broadcasts_single_channel() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let a = g.leaf(t(&[1, 1, 1, 2], &[0.5, -1.0]));
        let y = g.mul(x, a).unwrap();
        assert_eq!(g.value(y).unwrap().data(), &[0.5, -2.0, 1.5, -4.0]);
        let bad = g.leaf(t(&[1, 2, 1, 1], &[1.0, 1.0]));
        assert!(g.mul(x, bad).is_err());
    }

    #[test]
    fn wing_loss_examples() {
        let (w, eps) = (10.0, 2.0);
        // both branches at |x| = w
        let log_branch = w * (1.0f64 + w / eps).ln();
        let lin_branch = w - (w - w * (1.0f64 + w / eps).ln());
        assert!((log_branch - lin_branch).abs() < 1e-9);
        assert!((log_branch - 17.917_594_692_280_55).abs() < 1e-9);
        assert!((wing(w, w, eps) - log_branch).abs() < 1e-9);
        assert!((wing(-2.0 * w, w, eps) - (log_branch + w)).abs() < 1e-9);

        let mut g = Graph::<f64>::new();
        let p = g.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let q = g.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let l = g.wing_loss(p, q, w, eps).unwrap();
        assert_eq!(g.value(l).unwrap().item(), 0.0);
        let r = g.leaf(t(&[2], &[0.0, 0.0]));
        assert!(matches!(g.wing_loss(p, r, w, eps), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_half_sum_of_squares_is_input() {
        let vals = [1.5, -2.0, 0.25, 4.0];
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[4], &vals));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let half = g.scale(s, 0.5).unwrap();
        let grads = g.backward(half).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &vals);
    }

    #[test]
    fn foreign_vars_are_rejected() {
        let mut a = Graph::<f32>::new();
        let mut b = Graph::<f32>::new();
        let x = a.leaf(Tensor::scalar(1.0));
        assert!(matches!(b.relu(x), Err(Error::UnrecordedTensor)));
        assert!(matches!(b.backward(x), Err(Error::UnrecordedTensor)));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn finite_check_catches_overflow() {
        let mut g = Graph::<f32>::new();
        g.set_check_finite(true);
        let x = g.leaf(Tensor::scalar(f32::MAX));
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn soft_argmax_one_hot_and_uniform() {
        let mut g = Graph::<f64>::new();
        let mut hot = Tensor::zeros(&[1, 1, 4, 5]);
        hot.data_mut()[2 * 5 + 3] = 1.0;
        let h = g.leaf(hot);
        let c = g.soft_argmax(h, 200.0).unwrap();
        let xy = g.value(c).unwrap().data().to_vec();
        assert!((xy[0] - 3.0).abs() < 1e-9 && (xy[1] - 2.0).abs() < 1e-9);

        let u = g.leaf(Tensor::full(&[1, 1, 4, 5], 0.3));
        let c = g.soft_argmax(u, 1.0).unwrap();
        let xy = g.value(c).unwrap().data().to_vec();
        assert!((xy[0] - 2.0).abs() < 1e-12 && (xy[1] - 1.5).abs() < 1e-12);
    }
}
