//! Parameterized building blocks: (de)convolution, instance normalization,
//! PReLU and spectral normalization. GLU and softmax are stateless and live
//! directly on [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{BufferId, ConvGeometry, Graph, ParamId, ParamStore, Tensor, Var};

pub const IN_EPS: f32 = 1e-5;
pub const PRELU_INIT: f32 = 0.25;

/// Parameters of one model bound into a graph, either trainable or frozen.
#[derive(Clone, Copy)]
pub struct Bind<'a> {
    pub store: &'a ParamStore,
    pub trainable: bool,
}

impl<'a> Bind<'a> {
    pub fn trainable(store: &'a ParamStore) -> Self {
        Bind { store, trainable: true }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Bind { store, trainable: false }
    }

    pub fn param(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(self.store, id, self.trainable)
    }
}

/// Uniform `±bound` tensor.
pub fn uniform(shape: &[usize], bound: f32, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
}

/// 2-D convolution or transposed convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2DLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeometry,
    pub transposed: bool,
    pub cin: usize,
    pub cout: usize,
}

impl Conv2DLayer {
    /// Registers `{name}/kernel` and `{name}/bias`, both uniform
    /// `±1/√(kh·kw·cin)`. A transposed layer stores its kernel as
    /// `(kh, kw, cout, cin)`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeometry,
        transposed: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cin == 0 || cout == 0 {
            return Err(Error::invalid(format!("{name}: channel counts must be positive")));
        }
        let (kh, kw) = geom.kernel;
        let bound = 1.0 / ((kh * kw * cin) as f32).sqrt();
        let shape = if transposed { [kh, kw, cout, cin] } else { [kh, kw, cin, cout] };
        let kernel = store.add(format!("{name}/kernel"), uniform(&shape, bound, rng))?;
        let bias = store.add(format!("{name}/bias"), uniform(&[cout], bound, rng))?;
        Ok(Conv2DLayer {
            kernel,
            bias,
            geom,
            transposed,
            cin,
            cout,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: Bind<'_>, x: Var) -> Result<Var> {
        let w = p.param(g, self.kernel);
        self.forward_with_kernel(g, p, x, w)
    }

    /// Forward pass with an externally prepared kernel (e.g. spectrally
    /// normalized).
    pub fn forward_with_kernel(&self, g: &mut Graph, p: Bind<'_>, x: Var, w: Var) -> Result<Var> {
        let b = p.param(g, self.bias);
        if self.transposed {
            g.deconv2d(x, w, Some(b), self.geom)
        } else {
            g.conv2d(x, w, Some(b), self.geom)
        }
    }
}

/// Instance normalization with a per-channel affine map.
#[derive(Clone, Debug)]
pub struct InstanceNormLayer {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl InstanceNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(InstanceNormLayer {
            scale: store.add(format!("{name}/scale"), Tensor::full(&[channels], 1.0))?,
            shift: store.add(format!("{name}/shift"), Tensor::zeros(&[channels]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: Bind<'_>, x: Var) -> Result<Var> {
        let s = p.param(g, self.scale);
        let b = p.param(g, self.shift);
        g.instance_norm(x, s, b, IN_EPS)
    }
}

/// Parametric ReLU with a learned slope per channel.
#[derive(Clone, Debug)]
pub struct PReLULayer {
    pub slope: ParamId,
}

impl PReLULayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(PReLULayer {
            slope: store.add(format!("{name}/slope"), Tensor::full(&[channels], PRELU_INIT))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: Bind<'_>, x: Var) -> Result<Var> {
        let a = p.param(g, self.slope);
        g.prelu(x, a)
    }
}

/// Whether a spectrally normalized forward advances the power iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SnMode {
    PowerIterate,
    Frozen,
}

/// Left singular-vector estimate for one kernel, persisted as a buffer.
///
/// The kernel is viewed as a `cout × rest` matrix `W` with
/// `W[c][r] = kernel[r·cout + c]`.
#[derive(Clone, Debug)]
pub struct SpectralNormState {
    pub u: BufferId,
    pub kernel: ParamId,
    rows: usize,
}

impl SpectralNormState {
    pub fn new(store: &mut ParamStore, name: &str, kernel: ParamId, rng: &mut impl Rng) -> Result<Self> {
        let shape = store.value(kernel).shape();
        let rows = *shape.last().ok_or_else(|| Error::invalid("spectral norm of a scalar"))?;
        let mut u: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(rng)).collect();
        if normalize(&mut u) == 0.0 {
            u.iter_mut().for_each(|v| *v = 1.0 / (rows as f64).sqrt());
        }
        let u = store.add_buffer(format!("{name}/sn_u"), Tensor::new(&[rows], to_f32(&u))?)?;
        Ok(SpectralNormState { u, kernel, rows })
    }

    /// `v = normalize(Wᵀu)` for the stored `u`.
    fn right_vector(&self, w: &[f32], u: &[f64]) -> Result<Vec<f64>> {
        let mut v: Vec<f64> = w
            .chunks_exact(self.rows)
            .map(|row| row.iter().zip(u).map(|(a, b)| *a as f64 * b).sum())
            .collect();
        if normalize(&mut v) == 0.0 {
            return Err(Error::invalid("spectral norm undefined for a zero kernel"));
        }
        Ok(v)
    }

    /// One power-iteration step: `v ← Wᵀu/‖·‖`, `u ← Wv/‖·‖`.
    pub fn power_iterate(&self, store: &mut ParamStore) -> Result<()> {
        let w = store.value(self.kernel).data();
        let u: Vec<f64> = store.buffer(self.u).data().iter().map(|x| *x as f64).collect();
        let v = self.right_vector(w, &u)?;
        let mut nu = vec![0.0f64; self.rows];
        for (row, vr) in w.chunks_exact(self.rows).zip(&v) {
            for (acc, a) in nu.iter_mut().zip(row) {
                *acc += *a as f64 * vr;
            }
        }
        if normalize(&mut nu) == 0.0 {
            return Err(Error::invalid("spectral norm undefined for a zero kernel"));
        }
        store.buffer_mut(self.u).data_mut().copy_from_slice(&to_f32(&nu));
        Ok(())
    }

    /// Current `(u, v)` pair; `v` is derived from the stored `u`.
    pub fn vectors(&self, store: &ParamStore) -> Result<(Vec<f32>, Vec<f32>)> {
        let u64: Vec<f64> = store.buffer(self.u).data().iter().map(|x| *x as f64).collect();
        let v = self.right_vector(store.value(self.kernel).data(), &u64)?;
        Ok((store.buffer(self.u).data().to_vec(), to_f32(&v)))
    }

    /// Singular-value estimate `uᵀWv`.
    pub fn sigma(&self, store: &ParamStore) -> Result<f32> {
        let (u, v) = self.vectors(store)?;
        Ok(crate::numerics::sn_sigma(store.value(self.kernel).data(), &u, &v))
    }

    /// Binds the kernel divided by its singular-value estimate.
    pub fn normalized_kernel(&self, g: &mut Graph, p: Bind<'_>) -> Result<Var> {
        let (u, v) = self.vectors(p.store)?;
        let w = p.param(g, self.kernel);
        g.spectral_norm(w, &u, &v)
    }
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

fn to_f32(x: &[f64]) -> Vec<f32> {
    x.iter().map(|v| *v as f32).collect()
}
