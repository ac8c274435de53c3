//! Generator (encoder, attention stack, decoder) and the two-head
//! spectrally normalized discriminator.

use rand::Rng;

use crate::attention::{AiaStack, AttentionSwitches, AttentionTrace};
use crate::error::{Error, Result};
use crate::layers::{Bind, Conv2DLayer, InstanceNormLayer, PReLULayer, SpectralNormState};
use crate::numerics::{Checkpoint, ConvGeometry, Graph, ParamStore, Var};
use crate::signal::N_BINS;

/// Topology of a generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeneratorConfig {
    /// Bottleneck channel count `C` (a multiple of 32).
    pub channels: usize,
    /// Number of ATFA modules.
    pub depth: usize,
    pub switches: AttentionSwitches,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            channels: 64,
            depth: 6,
            switches: AttentionSwitches::default(),
        }
    }
}

fn block_geometry() -> ConvGeometry {
    ConvGeometry::new((3, 5), (1, 2), (1, 2))
}

/// `conv → IN → PReLU → GLU`; the conv emits twice the block's output width.
#[derive(Clone, Debug)]
pub struct GatedBlock {
    pub conv: Conv2DLayer,
    pub norm: InstanceNormLayer,
    pub act: PReLULayer,
}

impl GatedBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, transposed: bool, rng: &mut impl Rng) -> Result<Self> {
        Ok(GatedBlock {
            conv: Conv2DLayer::new(store, &format!("{name}/conv"), cin, 2 * cout, block_geometry(), transposed, rng)?,
            norm: InstanceNormLayer::new(store, &format!("{name}/norm"), 2 * cout)?,
            act: PReLULayer::new(store, &format!("{name}/prelu"), 2 * cout)?,
        })
    }

    fn forward(&self, g: &mut Graph, p: Bind<'_>, x: Var) -> Result<Var> {
        let h = self.conv.forward(g, p, x)?;
        let h = self.norm.forward(g, p, h)?;
        let h = self.act.forward(g, p, h)?;
        g.glu(h)
    }
}

/// Maps `B×T×257×1` compressed magnitudes to the same shape.
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub down: Vec<GatedBlock>,
    pub aia: AiaStack,
    pub up: Vec<GatedBlock>,
    /// Final transposed conv to one channel, followed by softplus.
    pub out: Conv2DLayer,
}

impl Generator {
    pub fn new(config: GeneratorConfig, rng: &mut impl Rng) -> Result<(Self, ParamStore)> {
        let c = config.channels;
        if c == 0 || c % 32 != 0 {
            return Err(Error::invalid(format!("generator channels must be a positive multiple of 32, got {c}")));
        }
        let (c1, c2) = (c / 4, c / 2);
        let mut s = ParamStore::new();
        let down = vec![
            GatedBlock::new(&mut s, "down1", 1, c1, false, rng)?,
            GatedBlock::new(&mut s, "down2", c1, c2, false, rng)?,
            GatedBlock::new(&mut s, "down3", c2, c, false, rng)?,
        ];
        let aia = AiaStack::new(&mut s, "aia", config.depth, c, config.switches, rng)?;
        let up = vec![
            GatedBlock::new(&mut s, "up1", c, c2, true, rng)?,
            GatedBlock::new(&mut s, "up2", c2, c1, true, rng)?,
        ];
        let out = Conv2DLayer::new(&mut s, "up3/conv", c1, 1, block_geometry(), true, rng)?;
        Ok((Generator { config, down, aia, up, out }, s))
    }

    pub fn forward(&self, g: &mut Graph, p: Bind<'_>, x: Var) -> Result<(Var, AttentionTrace)> {
        self.forward_inner(g, p, x, true)
    }

    /// The encoder and decoder without the attention stack.
    pub fn forward_without_attention(&self, g: &mut Graph, p: Bind<'_>, x: Var) -> Result<Var> {
        Ok(self.forward_inner(g, p, x, false)?.0)
    }

    fn forward_inner(&self, g: &mut Graph, p: Bind<'_>, x: Var, attend: bool) -> Result<(Var, AttentionTrace)> {
        check_input("generator", g.shape(x))?;
        let mut h = x;
        for b in &self.down {
            h = b.forward(g, p, h)?;
        }
        let mut trace = AttentionTrace::default();
        if attend {
            h = self.aia.forward(g, p, h, &mut trace)?;
        }
        for b in &self.up {
            h = b.forward(g, p, h)?;
        }
        let h = self.out.forward(g, p, h)?;
        Ok((g.softplus(h), trace))
    }
}

fn check_input(op: &'static str, s: &[usize]) -> Result<()> {
    match *s {
        [b, t, N_BINS, 1] if b > 0 && t > 0 => Ok(()),
        _ => Err(Error::shape(op, format!("expected B×T×{N_BINS}×1, got {s:?}"))),
    }
}

/// Per-item scores from the intermediate and final heads, each of shape `[B]`.
#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorScores {
    pub final_score: Var,
    pub mid_score: Var,
}

/// A spectrally normalized conv with its power-iteration state.
#[derive(Clone, Debug)]
pub struct SnConv {
    pub conv: Conv2DLayer,
    pub sn: SpectralNormState,
}

impl SnConv {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, geom: ConvGeometry, rng: &mut impl Rng) -> Result<Self> {
        let conv = Conv2DLayer::new(store, name, cin, cout, geom, false, rng)?;
        let sn = SpectralNormState::new(store, name, conv.kernel, rng)?;
        Ok(SnConv { conv, sn })
    }

    fn forward(&self, g: &mut Graph, p: Bind<'_>, x: Var) -> Result<Var> {
        let w = self.sn.normalized_kernel(g, p)?;
        self.conv.forward_with_kernel(g, p, x, w)
    }
}

/// Six `3×3` spectrally normalized convs with PReLU, plus `1×1` heads after
/// the third and sixth layer.
#[derive(Clone, Debug)]
pub struct MultiScaleDiscriminator {
    pub layers: Vec<(SnConv, PReLULayer)>,
    pub mid_head: SnConv,
    pub final_head: SnConv,
}

pub const MID_HEAD_AFTER: usize = 3;

impl MultiScaleDiscriminator {
    /// Channel plan `1 → b → 2b → 4b → 8b → 8b → 8b`; layers 1–4 use stride 2.
    pub fn new(base: usize, rng: &mut impl Rng) -> Result<(Self, ParamStore)> {
        if base == 0 {
            return Err(Error::invalid("discriminator width must be positive"));
        }
        let plan = [1, base, 2 * base, 4 * base, 8 * base, 8 * base, 8 * base];
        let mut s = ParamStore::new();
        let mut layers = Vec::with_capacity(6);
        for i in 0..6 {
            let stride = if i < 4 { 2 } else { 1 };
            let geom = ConvGeometry::new((3, 3), (stride, stride), (1, 1));
            let name = format!("conv{}", i + 1);
            let conv = SnConv::new(&mut s, &name, plan[i], plan[i + 1], geom, rng)?;
            let act = PReLULayer::new(&mut s, &format!("{name}/prelu"), plan[i + 1])?;
            layers.push((conv, act));
        }
        let mid_head = SnConv::new(&mut s, "head_mid", plan[MID_HEAD_AFTER], 1, ConvGeometry::pointwise(), rng)?;
        let final_head = SnConv::new(&mut s, "head_final", plan[6], 1, ConvGeometry::pointwise(), rng)?;
        Ok((MultiScaleDiscriminator { layers, mid_head, final_head }, s))
    }

    fn sn_states(&self) -> impl Iterator<Item = &SpectralNormState> {
        self.layers.iter().map(|(c, _)| &c.sn).chain([&self.mid_head.sn, &self.final_head.sn])
    }

    /// Advances every kernel's power iteration by one step.
    pub fn power_iterate(&self, store: &mut ParamStore) -> Result<()> {
        for sn in self.sn_states() {
            sn.power_iterate(store)?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, p: Bind<'_>, x: Var) -> Result<DiscriminatorScores> {
        check_input("discriminator", g.shape(x))?;
        let mut h = x;
        let mut mid = None;
        for (i, (conv, act)) in self.layers.iter().enumerate() {
            h = conv.forward(g, p, h)?;
            h = act.forward(g, p, h)?;
            if i + 1 == MID_HEAD_AFTER {
                mid = Some(head(g, p, &self.mid_head, h)?);
            }
        }
        Ok(DiscriminatorScores {
            final_score: head(g, p, &self.final_head, h)?,
            mid_score: mid.expect("six layers"),
        })
    }
}

fn head(g: &mut Graph, p: Bind<'_>, conv: &SnConv, h: Var) -> Result<Var> {
    let y = conv.forward(g, p, h)?;
    let s = g.shape(y).to_vec();
    let flat = g.reshape(y, &[s[0], s[1] * s[2]])?;
    g.mean_axis(flat, 1)
}

/// Copies every leaf and buffer of `store` into `ckpt` under `prefix/`.
pub fn export_store(ckpt: &mut Checkpoint, prefix: &str, store: &ParamStore) {
    for leaf in store.leaves() {
        ckpt.push_tensor(format!("{prefix}/{}", leaf.name), leaf.value.clone());
    }
    for (name, t) in store.buffers() {
        ckpt.push_tensor(format!("{prefix}/{name}"), t.clone());
    }
}

/// Restores every leaf and buffer of `store` from `ckpt`; all must be present.
pub fn import_store(ckpt: &Checkpoint, prefix: &str, store: &mut ParamStore) -> Result<()> {
    let fetch = |name: &str| {
        ckpt.tensor(&format!("{prefix}/{name}"))
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {prefix}/{name}")))
    };
    let names: Vec<String> = store.leaves().iter().map(|l| l.name.clone()).collect();
    for n in names {
        store.set_value(&n, fetch(&n)?)?;
    }
    let names: Vec<String> = store.buffers().iter().map(|(n, _)| n.clone()).collect();
    for n in names {
        store.set_buffer(&n, fetch(&n)?)?;
    }
    Ok(())
}
