//! Axis-factorized self-attention for `B×T×F×C` feature maps.
//!
//! The time branch attends across frames (a `T×T` map per item), the
//! frequency branch across bins (`F×F`). A stack of such modules is
//! aggregated by a softmax over pooled per-module logits.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Bind, Conv2DLayer};
use crate::numerics::{ConvGeometry, Graph, ParamId, ParamStore, Tensor, Var};

/// Which attention branches a stack is built with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSwitches {
    pub time: bool,
    pub freq: bool,
    pub hierarchy: bool,
}

impl Default for AttentionSwitches {
    fn default() -> Self {
        AttentionSwitches {
            time: true,
            freq: true,
            hierarchy: true,
        }
    }
}

/// One self-attention branch: `Q`, `K` project to `C/8`, `V` keeps `C`.
#[derive(Clone, Debug)]
pub struct AttentionBranch {
    pub query: Conv2DLayer,
    pub key: Conv2DLayer,
    pub value: Conv2DLayer,
    /// Residual weight (α for time, β for frequency), initialized to 0.
    pub weight: ParamId,
}

impl AttentionBranch {
    fn new(store: &mut ParamStore, name: &str, weight_name: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let g = ConvGeometry::pointwise();
        Ok(AttentionBranch {
            query: Conv2DLayer::new(store, &format!("{name}/query"), channels, channels / 8, g, false, rng)?,
            key: Conv2DLayer::new(store, &format!("{name}/key"), channels, channels / 8, g, false, rng)?,
            value: Conv2DLayer::new(store, &format!("{name}/value"), channels, channels, g, false, rng)?,
            weight: store.add(format!("{name}/{weight_name}"), Tensor::zeros(&[1]))?,
        })
    }

    /// Attention along axis 1 of `x: B×L×W×C`. Returns the output
    /// (same shape) and the `B×L×L` attention map.
    pub fn attend(&self, g: &mut Graph, p: Bind<'_>, x: Var) -> Result<(Var, Var)> {
        let [b, l, w, c] = rank4("attention", g.shape(x))?;
        let q = self.query.forward(g, p, x)?;
        let k = self.key.forward(g, p, x)?;
        let v = self.value.forward(g, p, x)?;
        let q = g.reshape(q, &[b, l, w * (c / 8)])?;
        let k = g.reshape(k, &[b, l, w * (c / 8)])?;
        let v = g.reshape(v, &[b, l, w * c])?;
        let scores = g.bmm(q, k, false, true)?;
        let attn = g.softmax(scores);
        let out = g.bmm(attn, v, false, false)?;
        Ok((g.reshape(out, &[b, l, w, c])?, attn))
    }
}

fn rank4(op: &'static str, s: &[usize]) -> Result<[usize; 4]> {
    match *s {
        [b, t, f, c] => {
            if c % 8 != 0 || c == 0 {
                return Err(Error::shape(op, format!("channel count {c} is not a positive multiple of 8")));
            }
            Ok([b, t, f, c])
        }
        _ => Err(Error::shape(op, format!("expected B×T×F×C, got {s:?}"))),
    }
}

/// Attention maps recorded during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct AttentionTrace {
    pub time_maps: Vec<Var>,
    pub freq_maps: Vec<Var>,
    pub hierarchy_weights: Option<Var>,
}

impl AttentionTrace {
    /// Total attention-score entries per batch item across every map.
    pub fn score_entries_per_item(&self, g: &Graph) -> usize {
        self.time_maps
            .iter()
            .chain(&self.freq_maps)
            .map(|v| g.value(*v).numel() / g.shape(*v)[0])
            .sum()
    }
}

/// Time-frequency attention with zero-initialized residual weights:
/// `out = x + α·time(x) + β·freq(x)`.
#[derive(Clone, Debug)]
pub struct ATFAModule {
    pub time: Option<AttentionBranch>,
    pub freq: Option<AttentionBranch>,
    pub channels: usize,
}

impl ATFAModule {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, switches: AttentionSwitches, rng: &mut impl Rng) -> Result<Self> {
        if channels == 0 || channels % 8 != 0 {
            return Err(Error::invalid(format!("attention channels must be a positive multiple of 8, got {channels}")));
        }
        let time = switches
            .time
            .then(|| AttentionBranch::new(store, &format!("{name}/time"), "alpha", channels, rng))
            .transpose()?;
        let freq = switches
            .freq
            .then(|| AttentionBranch::new(store, &format!("{name}/freq"), "beta", channels, rng))
            .transpose()?;
        Ok(ATFAModule { time, freq, channels })
    }

    /// Time branch output and its `B×T×T` map.
    pub fn atab(&self, g: &mut Graph, p: Bind<'_>, x: Var) -> Result<(Var, Var)> {
        let branch = self.time.as_ref().ok_or_else(|| Error::invalid("time attention branch is disabled"))?;
        rank4("atab", g.shape(x))?;
        branch.attend(g, p, x)
    }

    /// Frequency branch output and its `B×F×F` map.
    pub fn afab(&self, g: &mut Graph, p: Bind<'_>, x: Var) -> Result<(Var, Var)> {
        let branch = self.freq.as_ref().ok_or_else(|| Error::invalid("frequency attention branch is disabled"))?;
        rank4("afab", g.shape(x))?;
        let xt = g.permute(x, &[0, 2, 1, 3])?;
        let (out, attn) = branch.attend(g, p, xt)?;
        Ok((g.permute(out, &[0, 2, 1, 3])?, attn))
    }

    pub fn forward(&self, g: &mut Graph, p: Bind<'_>, x: Var, trace: &mut AttentionTrace) -> Result<Var> {
        rank4("atfa", g.shape(x))?;
        let mut out = x;
        if let Some(branch) = &self.time {
            let (a, map) = self.atab(g, p, x)?;
            let alpha = p.param(g, branch.weight);
            out = g.add_scaled(out, a, alpha)?;
            trace.time_maps.push(map);
        }
        if let Some(branch) = &self.freq {
            let (f, map) = self.afab(g, p, x)?;
            let beta = p.param(g, branch.weight);
            out = g.add_scaled(out, f, beta)?;
            trace.freq_maps.push(map);
        }
        Ok(out)
    }
}

/// Hierarchical aggregation of `N` feature maps:
/// `out = F_N + γ·Σ softmax(W_n(pool(F_n)))·F_n`.
#[derive(Clone, Debug)]
pub struct AHAModule {
    pub logits: Vec<Conv2DLayer>,
    pub gamma: ParamId,
}

impl AHAModule {
    pub fn new(store: &mut ParamStore, name: &str, n: usize, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("hierarchical attention needs at least one input"));
        }
        let logits = (0..n)
            .map(|i| Conv2DLayer::new(store, &format!("{name}/w{i}"), channels, 1, ConvGeometry::pointwise(), false, rng))
            .collect::<Result<Vec<_>>>()?;
        let gamma = store.add(format!("{name}/gamma"), Tensor::zeros(&[1]))?;
        Ok(AHAModule { logits, gamma })
    }

    pub fn n(&self) -> usize {
        self.logits.len()
    }

    /// Returns the aggregated output and the `B×1×N` softmax weights.
    pub fn forward(&self, g: &mut Graph, p: Bind<'_>, maps: &[Var]) -> Result<(Var, Var)> {
        if maps.len() != self.n() {
            return Err(Error::invalid(format!("hierarchical attention expects {} maps, got {}", self.n(), maps.len())));
        }
        let shape = g.shape(maps[0]).to_vec();
        let [b, t, f, c] = rank4("aha", &shape)?;
        let mut logits = Vec::with_capacity(maps.len());
        let mut stacked = Vec::with_capacity(maps.len());
        for (w, &m) in self.logits.iter().zip(maps) {
            if g.shape(m) != shape.as_slice() {
                return Err(Error::shape("aha", format!("{:?} vs {shape:?}", g.shape(m))));
            }
            let flat = g.reshape(m, &[b, t * f, c])?;
            let pooled = g.mean_axis(flat, 1)?;
            let pooled = g.reshape(pooled, &[b, 1, 1, c])?;
            logits.push(w.forward(g, p, pooled)?);
            stacked.push(g.reshape(m, &[b, 1, t * f * c])?);
        }
        let logits = g.concat(&logits, 3)?;
        let logits = g.reshape(logits, &[b, 1, maps.len()])?;
        let weights = g.softmax(logits);
        let stacked = g.concat(&stacked, 1)?;
        let agg = g.bmm(weights, stacked, false, false)?;
        let agg = g.reshape(agg, &shape)?;
        let gamma = p.param(g, self.gamma);
        let last = *maps.last().unwrap();
        Ok((g.add_scaled(last, agg, gamma)?, weights))
    }
}

/// A chain of ATFA modules followed (optionally) by AHA over all of their
/// outputs.
#[derive(Clone, Debug)]
pub struct AiaStack {
    pub blocks: Vec<ATFAModule>,
    pub aha: Option<AHAModule>,
}

impl AiaStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        depth: usize,
        channels: usize,
        switches: AttentionSwitches,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::invalid("attention stack depth must be positive"));
        }
        let blocks = (0..depth)
            .map(|i| ATFAModule::new(store, &format!("{name}/atfa{i}"), channels, switches, rng))
            .collect::<Result<Vec<_>>>()?;
        let aha = switches
            .hierarchy
            .then(|| AHAModule::new(store, &format!("{name}/aha"), depth, channels, rng))
            .transpose()?;
        Ok(AiaStack { blocks, aha })
    }

    pub fn forward(&self, g: &mut Graph, p: Bind<'_>, x: Var, trace: &mut AttentionTrace) -> Result<Var> {
        let mut maps = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(g, p, h, trace)?;
            maps.push(h);
        }
        match &self.aha {
            Some(aha) => {
                let (out, w) = aha.forward(g, p, &maps)?;
                trace.hierarchy_weights = Some(w);
                Ok(out)
            }
            None => Ok(h),
        }
    }
}
