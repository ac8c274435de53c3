//! Dynamically recorded computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. Calling
//! [`Graph::backward`] on a one-element node walks the nodes in reverse and
//! returns gradients for every leaf that requires them. Parameters are bound
//! by copying their current value out of a [`ParamStore`]; the resulting
//! gradients are routed back with [`Gradients::accumulate_into`].

use super::kernels::{self, ConvGeometry, Dims4};
use super::params::{ParamId, ParamStore};
use super::tensor::{numel_of, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    Param { store: u64, id: ParamId },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScaled { base: Var, other: Var, scale: Var },
    AddConst(Var),
    MulConst(Var, f32),
    SubScalar { x: Var, s: Var },
    Square(Var),
    Abs(Var),
    MeanAll(Var),
    MeanAxis { x: Var, outer: usize, len: usize, inner: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry, transposed: bool },
    InstanceNorm { x: Var, scale: Var, shift: Var, mean: Vec<f32>, inv_std: Vec<f32> },
    Prelu { x: Var, slope: Var },
    Glu(Var),
    Softplus(Var),
    Softmax(Var),
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    SpectralNorm { w: Var, u: Vec<f32>, v: Vec<f32>, sigma: f32 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    peak_numel: usize,
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf or parameter node, if it received one.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds the gradients of every node bound from `store` into the store's
    /// leaf gradients.
    pub fn accumulate_into(&self, graph: &Graph, store: &mut ParamStore) {
        let tag = store.tag();
        for (node, grad) in graph.nodes.iter().zip(&self.grads) {
            if let (Op::Param { store: s, id }, Some(g)) = (&node.op, grad) {
                if *s == tag {
                    store.leaf_mut(*id).grad.add_assign(g);
                }
            }
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn dims4(op: &'static str, t: &Tensor) -> Result<Dims4> {
    match *t.shape() {
        [b, h, w, c] => Ok(Dims4 { b, h, w, c }),
        ref s => Err(Error::shape(op, format!("expected rank-4 B×T×F×C, got {s:?}"))),
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
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

    /// Largest element count of any single value recorded so far.
    pub fn peak_numel(&self) -> usize {
        self.peak_numel
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.peak_numel = self.peak_numel.max(value.numel());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A free leaf whose gradient is reported by [`Gradients::get`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter. With `trainable == false` the value enters
    /// as a constant and no gradient is computed for it.
    pub fn param(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> Var {
        let value = store.value(id).clone();
        if trainable {
            self.push(
                value,
                Op::Param {
                    store: store.tag(),
                    id,
                },
                true,
            )
        } else {
            self.constant(value)
        }
    }

    /// A copy of `v`'s value with no path back to its inputs.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    fn unary(&self, x: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let t = &self.nodes[x.0].value;
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `base + scale · other` with a one-element `scale`. A zero scale
    /// returns `base` bitwise.
    pub fn add_scaled(&mut self, base: Var, other: Var, scale: Var) -> Result<Var> {
        let s_t = &self.nodes[scale.0].value;
        if !s_t.is_scalar() {
            return Err(Error::shape("add_scaled", format!("scale must have one element, got {:?}", s_t.shape())));
        }
        let s = s_t.item();
        let value = if s == 0.0 {
            same_shape("add_scaled", &self.nodes[base.0].value, &self.nodes[other.0].value)?;
            self.nodes[base.0].value.clone()
        } else {
            self.binary("add_scaled", base, other, |x, y| x + s * y)?
        };
        let rg = self.rg(&[base, other, scale]);
        Ok(self.push(value, Op::AddScaled { base, other, scale }, rg))
    }

    pub fn add_const(&mut self, x: Var, c: f32) -> Var {
        let value = self.unary(x, |v| v + c);
        let rg = self.rg(&[x]);
        self.push(value, Op::AddConst(x), rg)
    }

    pub fn mul_const(&mut self, x: Var, c: f32) -> Var {
        let value = self.unary(x, |v| v * c);
        let rg = self.rg(&[x]);
        self.push(value, Op::MulConst(x, c), rg)
    }

    /// `x − s` with a one-element `s` broadcast over `x`.
    pub fn sub_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let s_t = &self.nodes[s.0].value;
        if !s_t.is_scalar() {
            return Err(Error::shape("sub_scalar", format!("scalar operand has shape {:?}", s_t.shape())));
        }
        let sv = s_t.item();
        let value = self.unary(x, |v| v - sv);
        let rg = self.rg(&[x, s]);
        Ok(self.push(value, Op::SubScalar { x, s }, rg))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.unary(x, |v| v * v);
        let rg = self.rg(&[x]);
        self.push(value, Op::Square(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.unary(x, f32::abs);
        let rg = self.rg(&[x]);
        self.push(value, Op::Abs(x), rg)
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(mean as f32), Op::MeanAll(x), rg)
    }

    /// Mean along `axis`; the axis is removed (a rank-1 input yields `[1]`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("mean_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let data = self.nodes[x.0].value.data();
        let mut out = vec![0.0f32; outer * inner];
        let mut acc = vec![0.0f64; inner];
        for o in 0..outer {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for l in 0..len {
                let row = &data[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += *v as f64;
                }
            }
            for (dst, a) in out[o * inner..(o + 1) * inner].iter_mut().zip(&acc) {
                *dst = (*a / len as f64) as f32;
            }
        }
        let mut out_shape: Vec<usize> = shape.iter().enumerate().filter(|(i, _)| *i != axis).map(|(_, d)| *d).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::MeanAxis { x, outer, len, inner }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let (out_shape, data) = kernels::permute(self.nodes[x.0].value.data(), &shape, perm);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.nodes[first.0].value.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(numel_of(&out_shape));
        for o in 0..outer {
            for p in parts {
                let t = &self.nodes[p.0].value;
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    /// 2-D cross-correlation on `B×T×F×Cin` with kernel `(kh, kw, Cin, Cout)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let src = dims4("conv2d", &self.nodes[x.0].value)?;
        let (oh, ow, cout) = self.check_conv("conv2d", src, w, b, geom, false)?;
        let out = kernels::conv2d_forward(
            self.nodes[x.0].value.data(),
            src,
            self.nodes[w.0].value.data(),
            b.map(|b| self.nodes[b.0].value.data()),
            cout,
            &geom,
            oh,
            ow,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(
            Tensor::from_parts(vec![src.b, oh, ow, cout], out),
            Op::Conv { x, w, b, geom, transposed: false },
            rg,
        ))
    }

    /// Transposed convolution on `B×T×F×Cin`. The kernel has shape
    /// `(kh, kw, Cout, Cin)`: it is the kernel of the forward convolution
    /// this operation is the adjoint of.
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let src = dims4("deconv2d", &self.nodes[x.0].value)?;
        let (oh, ow, cout) = self.check_conv("deconv2d", src, w, b, geom, true)?;
        let out = kernels::deconv2d_forward(
            self.nodes[x.0].value.data(),
            src,
            self.nodes[w.0].value.data(),
            b.map(|b| self.nodes[b.0].value.data()),
            cout,
            &geom,
            oh,
            ow,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(
            Tensor::from_parts(vec![src.b, oh, ow, cout], out),
            Op::Conv { x, w, b, geom, transposed: true },
            rg,
        ))
    }

    fn check_conv(
        &self,
        op: &'static str,
        src: Dims4,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        transposed: bool,
    ) -> Result<(usize, usize, usize)> {
        let ws = self.nodes[w.0].value.shape();
        let [kh, kw, k_a, k_b] = *ws else {
            return Err(Error::shape(op, format!("kernel must be rank 4, got {ws:?}")));
        };
        if (kh, kw) != geom.kernel {
            return Err(Error::shape(op, format!("kernel {ws:?} disagrees with geometry {:?}", geom.kernel)));
        }
        let (cin, cout) = if transposed { (k_b, k_a) } else { (k_a, k_b) };
        if cin != src.c {
            return Err(Error::shape(op, format!("input has {} channels, kernel expects {cin}", src.c)));
        }
        if let Some(b) = b {
            if self.nodes[b.0].value.shape() != [cout] {
                return Err(Error::shape(op, format!("bias shape {:?}, expected [{cout}]", self.nodes[b.0].value.shape())));
            }
        }
        let out = if transposed {
            geom.deconv_out(src.h, src.w)
        } else {
            geom.conv_out(src.h, src.w)
        };
        let (oh, ow) = out.ok_or_else(|| Error::shape(op, format!("invalid output extent for input {}×{} and {geom:?}", src.h, src.w)))?;
        Ok((oh, ow, cout))
    }

    /// Instance normalization over the `T×F` plane of each (item, channel),
    /// followed by a per-channel affine map.
    pub fn instance_norm(&mut self, x: Var, scale: Var, shift: Var, eps: f32) -> Result<Var> {
        let d = dims4("instance_norm", &self.nodes[x.0].value)?;
        let p = d.h * d.w;
        if p < 2 {
            return Err(Error::shape("instance_norm", "normalization plane needs at least two elements"));
        }
        for v in [scale, shift] {
            if self.nodes[v.0].value.shape() != [d.c] {
                return Err(Error::shape("instance_norm", format!("affine shape {:?}, expected [{}]", self.nodes[v.0].value.shape(), d.c)));
            }
        }
        let xd = self.nodes[x.0].value.data();
        let (mean, inv_std) = kernels::instance_stats(xd, d.b, p, d.c, eps as f64);
        let sc = self.nodes[scale.0].value.data();
        let sh = self.nodes[shift.0].value.data();
        let mut out = vec![0.0f32; xd.len()];
        for bi in 0..d.b {
            let st = &mean[bi * d.c..(bi + 1) * d.c];
            let is = &inv_std[bi * d.c..(bi + 1) * d.c];
            let range = bi * p * d.c..(bi + 1) * p * d.c;
            for (orow, xrow) in out[range.clone()].chunks_exact_mut(d.c).zip(xd[range].chunks_exact(d.c)) {
                for c in 0..d.c {
                    orow[c] = (xrow[c] - st[c]) * is[c] * sc[c] + sh[c];
                }
            }
        }
        let rg = self.rg(&[x, scale, shift]);
        Ok(self.push(
            Tensor::from_parts(vec![d.b, d.h, d.w, d.c], out),
            Op::InstanceNorm { x, scale, shift, mean, inv_std },
            rg,
        ))
    }

    /// Parametric ReLU with one slope per channel (last axis).
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let c = *self.nodes[x.0].value.shape().last().unwrap();
        if self.nodes[slope.0].value.shape() != [c] {
            return Err(Error::shape("prelu", format!("slope shape {:?}, expected [{c}]", self.nodes[slope.0].value.shape())));
        }
        let a = self.nodes[slope.0].value.data();
        let t = &self.nodes[x.0].value;
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            for (v, s) in row.iter_mut().zip(a) {
                if *v < 0.0 {
                    *v *= *s;
                }
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x, slope]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Prelu { x, slope }, rg))
    }

    /// Gated linear unit over the last axis: `first half ⊙ σ(second half)`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let c2 = *t.shape().last().unwrap();
        if c2 % 2 != 0 {
            return Err(Error::shape("glu", format!("channel count {c2} is odd")));
        }
        let c = c2 / 2;
        let mut out = Vec::with_capacity(t.numel() / 2);
        for row in t.data().chunks_exact(c2) {
            let (lin, gate) = row.split_at(c);
            out.extend(lin.iter().zip(gate).map(|(l, g)| l * kernels::sigmoid(*g)));
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = c;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Glu(x), rg))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.unary(x, kernels::softplus);
        let rg = self.rg(&[x]);
        self.push(value, Op::Softplus(x), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let n = *t.shape().last().unwrap();
        let value = Tensor::from_parts(t.shape().to_vec(), kernels::softmax_rows(t.data(), n));
        let rg = self.rg(&[x]);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Batched matrix product of rank-3 tensors. With `ta` (`tb`) the
    /// stored operand is the transpose of the logical one.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        let (&[ba, ra, ca], &[bb, rb, cb]) = (sa, sb) else {
            return Err(Error::shape("bmm", format!("operands must be rank 3, got {sa:?} and {sb:?}")));
        };
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if ba != bb || k != k2 {
            return Err(Error::shape("bmm", format!("{sa:?} (t={ta}) × {sb:?} (t={tb})")));
        }
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = vec![0.0f32; ba * m * n];
        for i in 0..ba {
            let av = mat(&ad[i * m * k..(i + 1) * m * k], ra, ca, ta);
            let bv = mat(&bd[i * k * n..(i + 1) * k * n], rb, cb, tb);
            super::gemm::gemm(av, bv, &mut out[i * m * n..(i + 1) * m * n], false);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![ba, m, n], out), Op::Bmm { a, b, ta, tb }, rg))
    }

    /// `w / σ` where `σ = uᵀ W v` for the kernel viewed as a `cout × rest`
    /// matrix `W` (cout is the last axis). `u` and `v` are treated as
    /// constants, as in the standard spectral-normalization gradient.
    pub fn spectral_norm(&mut self, w: Var, u: &[f32], v: &[f32]) -> Result<Var> {
        let t = &self.nodes[w.0].value;
        let cout = *t.shape().last().unwrap();
        let rest = t.numel() / cout;
        if u.len() != cout || v.len() != rest {
            return Err(Error::shape("spectral_norm", format!("u/v lengths {}/{} for kernel {:?}", u.len(), v.len(), t.shape())));
        }
        let sigma = sn_sigma(t.data(), u, v);
        if !(sigma.abs() > 0.0) || !sigma.is_finite() {
            return Err(Error::invalid("spectral_norm: singular value estimate is zero"));
        }
        let value = self.unary(w, |x| x / sigma);
        let rg = self.rg(&[w]);
        Ok(self.push(
            value,
            Op::SpectralNorm { w, u: u.to_vec(), v: v.to_vec(), sigma },
            rg,
        ))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = &self.nodes[loss.0].value;
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        let mut kept: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            match &node.op {
                Op::Constant => {}
                Op::Leaf | Op::Param { .. } => kept[i] = Some(gy),
                _ => self.backward_node(node, &gy, &mut grads),
            }
        }
        Ok(Gradients { grads: kept })
    }

    fn need(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn like(&self, v: Var, data: Vec<f32>) -> Tensor {
        Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), data)
    }

    fn backward_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let g = gy.data();
        match &node.op {
            Op::Constant | Op::Leaf | Op::Param { .. } => unreachable!(),
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.need(v) {
                        accumulate(grads, v, gy.clone());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.need(*a) {
                    accumulate(grads, *a, gy.clone());
                }
                if self.need(*b) {
                    accumulate(grads, *b, self.like(*b, g.iter().map(|v| -v).collect()));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                if self.need(*a) {
                    accumulate(grads, *a, self.like(*a, g.iter().zip(bv).map(|(g, y)| g * y).collect()));
                }
                if self.need(*b) {
                    accumulate(grads, *b, self.like(*b, g.iter().zip(av).map(|(g, x)| g * x).collect()));
                }
            }
            Op::AddScaled { base, other, scale } => {
                let s = self.val(*scale).item();
                if self.need(*base) {
                    accumulate(grads, *base, gy.clone());
                }
                if self.need(*other) {
                    accumulate(grads, *other, self.like(*other, g.iter().map(|v| v * s).collect()));
                }
                if self.need(*scale) {
                    let gs = kernels::dot(g, self.val(*other).data());
                    accumulate(grads, *scale, self.like(*scale, vec![gs as f32]));
                }
            }
            Op::AddConst(x) => accumulate(grads, *x, gy.clone()),
            Op::MulConst(x, c) => accumulate(grads, *x, self.like(*x, g.iter().map(|v| v * c).collect())),
            Op::SubScalar { x, s } => {
                if self.need(*x) {
                    accumulate(grads, *x, gy.clone());
                }
                if self.need(*s) {
                    let total: f64 = g.iter().map(|&v| v as f64).sum();
                    accumulate(grads, *s, self.like(*s, vec![-total as f32]));
                }
            }
            Op::Square(x) => {
                let xv = self.val(*x).data();
                accumulate(grads, *x, self.like(*x, g.iter().zip(xv).map(|(g, x)| 2.0 * g * x).collect()));
            }
            Op::Abs(x) => {
                let xv = self.val(*x).data();
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(g, x)| if *x > 0.0 { *g } else if *x < 0.0 { -*g } else { 0.0 })
                    .collect();
                accumulate(grads, *x, self.like(*x, d));
            }
            Op::MeanAll(x) => {
                let n = self.val(*x).numel();
                let v = g[0] / n as f32;
                accumulate(grads, *x, self.like(*x, vec![v; n]));
            }
            Op::MeanAxis { x, outer, len, inner } => {
                let mut d = vec![0.0f32; outer * len * inner];
                let scale = 1.0 / *len as f32;
                for o in 0..*outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for l in 0..*len {
                        let dst = &mut d[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (dv, sv) in dst.iter_mut().zip(src) {
                            *dv = sv * scale;
                        }
                    }
                }
                accumulate(grads, *x, self.like(*x, d));
            }
            Op::Reshape(x) => accumulate(grads, *x, self.like(*x, g.to_vec())),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (_, d) = kernels::permute(g, gy.shape(), &inv);
                accumulate(grads, *x, self.like(*x, d));
            }
            Op::Concat { parts, axis } => {
                let shape = gy.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = self.val(*p).shape()[*axis] * inner;
                    if self.need(*p) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                        }
                        accumulate(grads, *p, self.like(*p, d));
                    }
                    offset += chunk;
                }
            }
            Op::Conv { x, w, b, geom, transposed } => {
                let xt = self.val(*x);
                let src = dims4("conv", xt).expect("validated in forward");
                let [_, oh, ow, cout] = *gy.shape() else { unreachable!() };
                let f = if *transposed { kernels::deconv2d_backward } else { kernels::conv2d_backward };
                let (gx, gw) = f(g, xt.data(), src, self.val(*w).data(), cout, geom, oh, ow, self.need(*x), self.need(*w));
                if let Some(gx) = gx {
                    accumulate(grads, *x, self.like(*x, gx));
                }
                if let Some(gw) = gw {
                    accumulate(grads, *w, self.like(*w, gw));
                }
                if let Some(b) = b {
                    if self.need(*b) {
                        accumulate(grads, *b, self.like(*b, kernels::bias_grad(g, cout)));
                    }
                }
            }
            Op::InstanceNorm { x, scale, shift, mean, inv_std } => {
                let xt = self.val(*x);
                let d = dims4("instance_norm", xt).expect("validated in forward");
                let p = d.h * d.w;
                let c = d.c;
                let sc = self.val(*scale).data();
                let xd = xt.data();
                let mut gscale = vec![0.0f64; c];
                let mut gshift = vec![0.0f64; c];
                let mut gx = if self.need(*x) { vec![0.0f32; xd.len()] } else { Vec::new() };
                for bi in 0..d.b {
                    let range = bi * p * c..(bi + 1) * p * c;
                    let (xs, gs) = (&xd[range.clone()], &g[range.clone()]);
                    let m = &mean[bi * c..(bi + 1) * c];
                    let is = &inv_std[bi * c..(bi + 1) * c];
                    let mut s1 = vec![0.0f64; c];
                    let mut s2 = vec![0.0f64; c];
                    for (xr, gr) in xs.chunks_exact(c).zip(gs.chunks_exact(c)) {
                        for ci in 0..c {
                            let xhat = ((xr[ci] - m[ci]) * is[ci]) as f64;
                            let gv = gr[ci] as f64;
                            gscale[ci] += gv * xhat;
                            gshift[ci] += gv;
                            let gxhat = gv * sc[ci] as f64;
                            s1[ci] += gxhat;
                            s2[ci] += gxhat * xhat;
                        }
                    }
                    if !gx.is_empty() {
                        let n = p as f64;
                        for ((xr, gr), out) in xs.chunks_exact(c).zip(gs.chunks_exact(c)).zip(gx[range].chunks_exact_mut(c)) {
                            for ci in 0..c {
                                let xhat = ((xr[ci] - m[ci]) * is[ci]) as f64;
                                let gxhat = gr[ci] as f64 * sc[ci] as f64;
                                out[ci] = (is[ci] as f64 / n * (n * gxhat - s1[ci] - xhat * s2[ci])) as f32;
                            }
                        }
                    }
                }
                if !gx.is_empty() {
                    accumulate(grads, *x, self.like(*x, gx));
                }
                if self.need(*scale) {
                    accumulate(grads, *scale, self.like(*scale, gscale.into_iter().map(|v| v as f32).collect()));
                }
                if self.need(*shift) {
                    accumulate(grads, *shift, self.like(*shift, gshift.into_iter().map(|v| v as f32).collect()));
                }
            }
            Op::Prelu { x, slope } => {
                let a = self.val(*slope).data();
                let c = a.len();
                let xd = self.val(*x).data();
                if self.need(*x) {
                    let mut d = g.to_vec();
                    for (drow, xrow) in d.chunks_exact_mut(c).zip(xd.chunks_exact(c)) {
                        for ci in 0..c {
                            if xrow[ci] < 0.0 {
                                drow[ci] *= a[ci];
                            }
                        }
                    }
                    accumulate(grads, *x, self.like(*x, d));
                }
                if self.need(*slope) {
                    let mut ga = vec![0.0f64; c];
                    for (grow, xrow) in g.chunks_exact(c).zip(xd.chunks_exact(c)) {
                        for ci in 0..c {
                            if xrow[ci] < 0.0 {
                                ga[ci] += grow[ci] as f64 * xrow[ci] as f64;
                            }
                        }
                    }
                    accumulate(grads, *slope, self.like(*slope, ga.into_iter().map(|v| v as f32).collect()));
                }
            }
            Op::Glu(x) => {
                let xd = self.val(*x).data();
                let c = *gy.shape().last().unwrap();
                let mut d = vec![0.0f32; xd.len()];
                for ((xrow, grow), drow) in xd.chunks_exact(2 * c).zip(g.chunks_exact(c)).zip(d.chunks_exact_mut(2 * c)) {
                    for ci in 0..c {
                        let lin = xrow[ci];
                        let s = kernels::sigmoid(xrow[c + ci]);
                        drow[ci] = grow[ci] * s;
                        drow[c + ci] = grow[ci] * lin * s * (1.0 - s);
                    }
                }
                accumulate(grads, *x, self.like(*x, d));
            }
            Op::Softplus(x) => {
                let xd = self.val(*x).data();
                accumulate(grads, *x, self.like(*x, g.iter().zip(xd).map(|(g, x)| g * kernels::sigmoid(*x)).collect()));
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *gy.shape().last().unwrap();
                let mut d = vec![0.0f32; y.len()];
                for ((yr, gr), dr) in y.chunks_exact(n).zip(g.chunks_exact(n)).zip(d.chunks_exact_mut(n)) {
                    let s = kernels::dot(yr, gr) as f32;
                    for i in 0..n {
                        dr[i] = yr[i] * (gr[i] - s);
                    }
                }
                accumulate(grads, *x, self.like(*x, d));
            }
            Op::Bmm { a, b, ta, tb } => {
                let [batch, m, n] = *gy.shape() else { unreachable!() };
                let (sa, sb) = (self.val(*a).shape(), self.val(*b).shape());
                let (ra, ca, rb, cb) = (sa[1], sa[2], sb[1], sb[2]);
                let k = if *ta { ra } else { ca };
                let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                if self.need(*a) {
                    let mut d = vec![0.0f32; batch * m * k];
                    for i in 0..batch {
                        let gc = super::gemm::MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n);
                        let bv = mat(&bd[i * k * n..(i + 1) * k * n], rb, cb, *tb);
                        let out = &mut d[i * m * k..(i + 1) * m * k];
                        if *ta {
                            // stored a is k×m: grad = B · gCᵀ
                            super::gemm::gemm(bv, gc.t(), out, false);
                        } else {
                            super::gemm::gemm(gc, bv.t(), out, false);
                        }
                    }
                    accumulate(grads, *a, self.like(*a, d));
                }
                if self.need(*b) {
                    let mut d = vec![0.0f32; batch * k * n];
                    for i in 0..batch {
                        let gc = super::gemm::MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n);
                        let av = mat(&ad[i * m * k..(i + 1) * m * k], ra, ca, *ta);
                        let out = &mut d[i * k * n..(i + 1) * k * n];
                        if *tb {
                            // stored b is n×k: grad = gCᵀ · A
                            super::gemm::gemm(gc.t(), av, out, false);
                        } else {
                            super::gemm::gemm(av.t(), gc, out, false);
                        }
                    }
                    accumulate(grads, *b, self.like(*b, d));
                }
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                let wd = self.val(*w).data();
                let cout = u.len();
                let inner = kernels::dot(g, wd) / (*sigma as f64 * *sigma as f64);
                let mut d = Vec::with_capacity(wd.len());
                for (r, chunk) in g.chunks_exact(cout).enumerate() {
                    for (c, gv) in chunk.iter().enumerate() {
                        d.push((*gv as f64 / *sigma as f64 - inner * u[c] as f64 * v[r] as f64) as f32);
                    }
                }
                accumulate(grads, *w, self.like(*w, d));
            }
        }
    }
}

fn mat(data: &[f32], rows: usize, cols: usize, transposed: bool) -> super::gemm::MatRef<'_> {
    let m = super::gemm::MatRef::new(data, rows, cols);
    if transposed {
        m.t()
    } else {
        m
    }
}

/// `uᵀ W v` for a kernel stored `rest × cout` (so `W[c][r] = w[r·cout + c]`).
pub fn sn_sigma(w: &[f32], u: &[f32], v: &[f32]) -> f32 {
    let cout = u.len();
    let mut s = 0.0f64;
    for (r, row) in w.chunks_exact(cout).enumerate() {
        s += v[r] as f64 * kernels::dot(row, u);
    }
    s as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_power_rule_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.value(y).item(), 9.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let y = g.leaf(Tensor::scalar(5.0));
        let z = g.mul(x, y).unwrap();
        assert_eq!(g.value(z).item(), 10.0);
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 5.0);
        assert_eq!(grads.get(y).unwrap().item(), 2.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_the_operation() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2]));
        let b = g.leaf(Tensor::zeros(&[3]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
    }

    #[test]
    fn param_gradients_accumulate_additively() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.5)).unwrap();
        for _ in 0..2 {
            let mut g = Graph::new();
            let w = g.param(&store, id, true);
            let y = g.mul_const(w, 4.0);
            let grads = g.backward(y).unwrap();
            grads.accumulate_into(&g, &mut store);
        }
        assert_eq!(store.grad(id).item(), 8.0);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.5)).unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, id, false);
        let x = g.leaf(Tensor::scalar(2.0));
        let y = g.mul(w, x).unwrap();
        let grads = g.backward(y).unwrap();
        grads.accumulate_into(&g, &mut store);
        assert_eq!(store.grad(id).item(), 0.0);
        assert_eq!(grads.get(x).unwrap().item(), 1.5);
    }

    #[test]
    fn zero_scale_add_is_bitwise_passthrough() {
        let mut g = Graph::new();
        let base = g.leaf(Tensor::new(&[3], vec![-0.0, 1.0, 2.5]).unwrap());
        let other = g.leaf(Tensor::new(&[3], vec![-4.0, 7.0, -1.0]).unwrap());
        let s = g.leaf(Tensor::scalar(0.0));
        let y = g.add_scaled(base, other, s).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(g.value(y)), bits(g.value(base)));
        let loss = g.mean_all(y);
        let grads = g.backward(loss).unwrap();
        // d/ds mean(base + s·other) = mean(other)
        assert!((grads.get(s).unwrap().item() - (2.0 / 3.0)).abs() < 1e-6);
    }
}
