//! Finite-difference verification of every differentiable operation used by
//! the models and losses.
//!
//! Each case pairs a graph construction with an independent `f64` forward
//! from [`reference`]. Analytic gradients from the graph are compared with
//! central differences of the reference, and the two forwards are compared
//! with each other.

pub mod reference;

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AHAModule, ATFAModule, AttentionSwitches, AttentionTrace};
use crate::error::Result;
use crate::layers::{Bind, SpectralNormState, IN_EPS};
use crate::losses::{self, GeneratorTerms};
use crate::numerics::{ConvGeometry, Graph, ParamId, ParamStore, Tensor, Var};
use reference::{central_difference, params_of, Arr, Params};

pub const FD_EPS: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;
/// Agreement required between the `f32` graph forward and the reference.
pub const FORWARD_TOLERANCE: f64 = 1e-5;
/// Inputs feeding a kink are kept at least this far from it.
pub const KINK_MARGIN: f32 = 1e-2;
pub const MAX_DIM: usize = 8;

const KEY_BIASES: &[&str] = &["atfa/time/key/bias", "atfa/freq/key/bias"];

type Build = dyn Fn(&mut Graph, Bind<'_>, &[Var]) -> Result<Var>;
type Reference = dyn Fn(&[Arr], &Params) -> Arr;

/// One operation under test: leaf inputs, optional parameters, the graph
/// construction and its reference forward.
pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub store: ParamStore,
    /// Parameters whose exact gradient is identically zero (a key bias
    /// shifts every score of a query equally, which softmax ignores). They
    /// are checked against the largest gradient norm of the case.
    pub inert: Vec<String>,
    build: Box<Build>,
    reference: Box<Reference>,
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = norm(a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(a.iter().copied()).max(norm(b.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

impl GradCase {
    pub fn new(
        name: &'static str,
        inputs: Vec<Tensor>,
        store: ParamStore,
        build: impl Fn(&mut Graph, Bind<'_>, &[Var]) -> Result<Var> + 'static,
        reference: impl Fn(&[Arr], &Params) -> Arr + 'static,
    ) -> Self {
        GradCase {
            name,
            inputs,
            store,
            inert: Vec::new(),
            build: Box::new(build),
            reference: Box::new(reference),
        }
    }

    pub fn with_inert(mut self, names: &[&str]) -> Self {
        self.inert = names.iter().map(|n| n.to_string()).collect();
        self
    }

    /// Projected scalar `mean(ref(inputs) ⊙ r)`.
    fn projected(&self, inputs: &[Arr], params: &Params, r: &[f64]) -> f64 {
        let out = (self.reference)(inputs, params);
        out.data.iter().zip(r).map(|(a, b)| a * b).sum::<f64>() / out.data.len() as f64
    }

    /// Compares analytic gradients with central differences of the
    /// reference for every input and parameter.
    pub fn check(&self, rng: &mut impl Rng) -> Result<GradCaseResult> {
        let mut g = Graph::new();
        let mut store = self.store.clone();
        store.zero_grad();
        let vars: Vec<Var> = self.inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = (self.build)(&mut g, Bind::trainable(&store), &vars)?;
        let shape = g.shape(out).to_vec();
        let r = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));

        let inputs: Vec<Arr> = self.inputs.iter().map(Arr::from_tensor).collect();
        let params = params_of(&self.store);
        let expected = (self.reference)(&inputs, &params);
        let got: Vec<f64> = g.value(out).data().iter().map(|v| *v as f64).collect();
        let forward_error = if expected.shape == shape {
            relative_error(&got, &expected.data)
        } else {
            f64::INFINITY
        };

        let rv = g.constant(r.clone());
        let prod = g.mul(out, rv)?;
        let loss = g.mean_all(prod);
        let grads = g.backward(loss)?;
        grads.accumulate_into(&g, &mut store);
        let r: Vec<f64> = r.data().iter().map(|v| *v as f64).collect();

        let mut pairs: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
        for (i, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).map_or_else(|| vec![0.0; inputs[i].data.len()], |t| t.data().iter().map(|x| *x as f64).collect());
            let fd = central_difference(
                |d| {
                    let mut xs = inputs.clone();
                    xs[i].data.copy_from_slice(d);
                    self.projected(&xs, &params, &r)
                },
                &inputs[i].data,
                FD_EPS,
            );
            pairs.push((format!("input{i}"), analytic, fd));
        }
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            let name = self.store.leaf(id).name.clone();
            let analytic = store.grad(id).data().iter().map(|x| *x as f64).collect();
            let fd = central_difference(
                |d| {
                    let mut ps = params.clone();
                    ps.get_mut(&name).expect("leaf is in the parameter map").data.copy_from_slice(d);
                    self.projected(&inputs, &ps, &r)
                },
                &params[&name].data,
                FD_EPS,
            );
            pairs.push((name, analytic, fd));
        }

        let scale = pairs
            .iter()
            .filter(|(n, _, _)| !self.inert.contains(n))
            .map(|(_, a, f)| norm(a.iter().copied()).max(norm(f.iter().copied())))
            .fold(0.0, f64::max);
        let mut worst = (0.0f64, String::new());
        let mut checked = 0;
        for (label, analytic, fd) in &pairs {
            let err = if self.inert.contains(label) {
                let n = norm(analytic.iter().copied()).max(norm(fd.iter().copied()));
                if scale > 0.0 {
                    n / scale
                } else {
                    n
                }
            } else {
                relative_error(analytic, fd)
            };
            checked += fd.len();
            if err >= worst.0 || worst.1.is_empty() {
                worst = (err, label.clone());
            }
        }
        Ok(GradCaseResult {
            name: self.name,
            max_rel_error: worst.0,
            worst_tensor: worst.1,
            scalars_checked: checked,
            forward_error,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCaseResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub scalars_checked: usize,
    /// Relative difference between the graph forward and the reference.
    pub forward_error: f64,
}

impl GradCaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE && self.forward_error <= FORWARD_TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub results: Vec<GradCaseResult>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(GradCaseResult::passed)
    }

    pub fn failures(&self) -> Vec<&GradCaseResult> {
        self.results.iter().filter(|r| !r.passed()).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.results {
            let _ = writeln!(
                s,
                "{:<20} grad {:>10.3e} fwd {:>10.3e} {:>6} scalars  worst {:<28} {}",
                r.name,
                r.max_rel_error,
                r.forward_error,
                r.scalars_checked,
                r.worst_tensor,
                if r.passed() { "PASS" } else { "FAIL" }
            );
        }
        s
    }
}

fn dim(rng: &mut impl Rng, lo: usize) -> usize {
    rng.gen_range(lo..=MAX_DIM)
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Pushes values out of `(-margin, margin)`.
pub fn away_from_zero(mut t: Tensor, margin: f32) -> Tensor {
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v < 0.0 { -margin } else { margin };
        }
    }
    t
}

fn random_geometry(rng: &mut impl Rng) -> ConvGeometry {
    let k = (rng.gen_range(1..=3), rng.gen_range(1..=5));
    let s = (rng.gen_range(1..=2), rng.gen_range(1..=2));
    let p = (rng.gen_range(0..=k.0 / 2), rng.gen_range(0..=k.1 / 2));
    ConvGeometry::new(k, s, p)
}

fn conv_case(rng: &mut impl Rng, transposed: bool) -> GradCase {
    let geom = random_geometry(rng);
    let (b, cin, cout) = (dim(rng, 1).min(2), dim(rng, 1).min(4), dim(rng, 1).min(4));
    let (h, w) = (dim(rng, geom.kernel.0.max(2)), dim(rng, geom.kernel.1.max(2)));
    let kshape = if transposed {
        [geom.kernel.0, geom.kernel.1, cout, cin]
    } else {
        [geom.kernel.0, geom.kernel.1, cin, cout]
    };
    let inputs = vec![random(&[b, h, w, cin], rng), random(&kshape, rng), random(&[cout], rng)];
    let name = if transposed { "deconv2d" } else { "conv2d" };
    GradCase::new(
        name,
        inputs,
        ParamStore::new(),
        move |g, _, v| {
            if transposed {
                g.deconv2d(v[0], v[1], Some(v[2]), geom)
            } else {
                g.conv2d(v[0], v[1], Some(v[2]), geom)
            }
        },
        move |x, _| {
            if transposed {
                reference::deconv2d(&x[0], &x[1], Some(&x[2]), geom)
            } else {
                reference::conv2d(&x[0], &x[1], Some(&x[2]), geom)
            }
        },
    )
}

fn spectral_norm_case(rng: &mut impl Rng) -> Result<GradCase> {
    let (cin, cout) = (dim(rng, 2).min(4), dim(rng, 2).min(4));
    let geom = ConvGeometry::new((3, 3), (2, 2), (1, 1));
    let mut store = ParamStore::new();
    let kernel = store.add("kernel", random(&[3, 3, cin, cout], rng))?;
    let sn = SpectralNormState::new(&mut store, "sn", kernel, rng)?;
    for _ in 0..3 {
        sn.power_iterate(&mut store)?;
    }
    let (u, _) = sn.vectors(&store)?;
    let u: Vec<f64> = u.iter().map(|v| *v as f64).collect();
    let x = random(&[1, dim(rng, 3), dim(rng, 3), cin], rng);
    Ok(GradCase::new(
        "spectral_norm_path",
        vec![x],
        store,
        move |g, p, v| {
            let w = sn.normalized_kernel(g, p)?;
            g.conv2d(v[0], w, None, geom)
        },
        move |x, p| reference::conv2d(&x[0], &reference::spectral_normalize(&p["kernel"], &u), None, geom),
    ))
}

fn attention_input(rng: &mut impl Rng) -> Tensor {
    random(&[dim(rng, 1).min(2), dim(rng, 2), dim(rng, 2), 8], rng)
}

fn atfa_module(rng: &mut impl Rng, alpha: f32, beta: f32) -> Result<(ATFAModule, ParamStore)> {
    let mut store = ParamStore::new();
    let m = ATFAModule::new(&mut store, "atfa", 8, AttentionSwitches::default(), rng)?;
    store.set_value("atfa/time/alpha", Tensor::full(&[1], alpha))?;
    store.set_value("atfa/freq/beta", Tensor::full(&[1], beta))?;
    Ok((m, store))
}

fn scores(rng: &mut impl Rng) -> Tensor {
    random(&[dim(rng, 1)], rng)
}

/// Builds every case of the suite from `seed`.
pub fn cases(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut out = vec![conv_case(rng, false), conv_case(rng, true)];

    let c = dim(rng, 1);
    let x = random(&[dim(rng, 1).min(2), dim(rng, 2), dim(rng, 2), c], rng);
    out.push(GradCase::new(
        "instance_norm",
        vec![x, random(&[c], rng), random(&[c], rng)],
        ParamStore::new(),
        |g, _, v| g.instance_norm(v[0], v[1], v[2], IN_EPS),
        |x, _| reference::instance_norm(&x[0], &x[1], &x[2], IN_EPS as f64),
    ));

    let c = dim(rng, 1);
    let x = away_from_zero(random(&[2, dim(rng, 1), dim(rng, 1), c], rng), KINK_MARGIN);
    out.push(GradCase::new(
        "prelu",
        vec![x, random(&[c], rng)],
        ParamStore::new(),
        |g, _, v| g.prelu(v[0], v[1]),
        |x, _| reference::prelu(&x[0], &x[1]),
    ));

    let x = random(&[2, dim(rng, 1), dim(rng, 1), 2 * dim(rng, 1).min(4)], rng);
    out.push(GradCase::new("glu", vec![x], ParamStore::new(), |g, _, v| g.glu(v[0]), |x, _| reference::glu(&x[0])));

    let x = random(&[dim(rng, 1), dim(rng, 1), dim(rng, 2)], rng);
    out.push(GradCase::new(
        "softmax",
        vec![x],
        ParamStore::new(),
        |g, _, v| Ok(g.softmax(v[0])),
        |x, _| reference::softmax(&x[0]),
    ));

    out.push(spectral_norm_case(rng)?);

    // α = β = 0 so each branch is checked on its own
    let (m, store) = atfa_module(rng, 0.0, 0.0)?;
    let m2 = m.clone();
    out.push(
        GradCase::new(
            "atab",
            vec![attention_input(rng)],
            store.clone(),
            move |g, p, v| Ok(m.atab(g, p, v[0])?.0),
            |x, p| reference::atab(&x[0], p, "atfa"),
        )
        .with_inert(KEY_BIASES),
    );
    out.push(
        GradCase::new(
            "afab",
            vec![attention_input(rng)],
            store,
            move |g, p, v| Ok(m2.afab(g, p, v[0])?.0),
            |x, p| reference::afab(&x[0], p, "atfa"),
        )
        .with_inert(KEY_BIASES),
    );

    let (m, store) = atfa_module(rng, 0.7, -0.4)?;
    out.push(
        GradCase::new(
            "atfa",
            vec![attention_input(rng)],
            store,
            move |g, p, v| m.forward(g, p, v[0], &mut AttentionTrace::default()),
            |x, p| reference::atfa(&x[0], p, "atfa"),
        )
        .with_inert(KEY_BIASES),
    );

    let n = rng.gen_range(2..=3);
    let mut store = ParamStore::new();
    let aha = AHAModule::new(&mut store, "aha", n, 8, rng)?;
    store.set_value("aha/gamma", Tensor::full(&[1], 0.6))?;
    let first = attention_input(rng);
    let maps: Vec<Tensor> = (0..n).map(|_| random(first.shape(), rng)).collect();
    out.push(GradCase::new(
        "aha",
        maps,
        store,
        move |g, p, v| Ok(aha.forward(g, p, v)?.0),
        |x, p| reference::aha(x, p, "aha"),
    ));

    out.push(GradCase::new(
        "rals_discriminator",
        vec![scores(rng), scores(rng)],
        ParamStore::new(),
        |g, _, v| losses::rals_discriminator_loss(g, v[0], v[1]),
        |x, _| reference::rals_discriminator(&x[0], &x[1]),
    ));
    out.push(GradCase::new(
        "rals_generator",
        vec![scores(rng), scores(rng)],
        ParamStore::new(),
        |g, _, v| losses::rals_generator_loss(g, v[0], v[1]),
        |x, _| reference::rals_generator(&x[0], &x[1]),
    ));

    let shape = [dim(rng, 1).min(2), dim(rng, 1), dim(rng, 1), 1];
    let pair = |rng: &mut ChaCha8Rng| {
        let a = random(&shape, rng);
        let d = away_from_zero(random(&shape, rng), KINK_MARGIN);
        let b = Tensor::from_fn(&shape, |i| a.data()[i] + d.data()[i]);
        (a, b)
    };
    let ((x, fgx), (y, gfy)) = (pair(rng), pair(rng));
    out.push(GradCase::new(
        "cycle",
        vec![x, fgx, y, gfy],
        ParamStore::new(),
        |g, _, v| losses::cycle_loss(g, v[0], v[1], v[2], v[3]),
        |x, _| reference::paired_l1(&x[0], &x[1], &x[2], &x[3]),
    ));
    let ((x, fx), (y, gy)) = (pair(rng), pair(rng));
    out.push(GradCase::new(
        "identity",
        vec![x, fx, y, gy],
        ParamStore::new(),
        |g, _, v| losses::identity_loss(g, v[0], v[1], v[2], v[3]),
        |x, _| reference::paired_l1(&x[0], &x[1], &x[2], &x[3]),
    ));

    let terms: Vec<Tensor> = (0..4).map(|_| Tensor::scalar(rng.gen_range(0.0..2.0))).collect();
    out.push(GradCase::new(
        "total_generator",
        terms,
        ParamStore::new(),
        |g, _, v| {
            let t = GeneratorTerms {
                rals_xy: v[0],
                rals_yx: v[1],
                cycle: v[2],
                identity: v[3],
            };
            losses::total_generator_loss(g, t, losses::LAMBDA_CYCLE, losses::LAMBDA_ID, true)
        },
        |x, _| reference::total_generator(x, losses::LAMBDA_CYCLE as f64, losses::LAMBDA_ID as f64),
    ));
    Ok(out)
}

/// Runs the full suite.
pub fn run(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let results = cases(seed)?.iter().map(|c| c.check(&mut rng)).collect::<Result<Vec<_>>>()?;
    Ok(GradReport { results })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_covers_every_operation_and_passes() {
        let report = run(3).unwrap();
        let names: Vec<&str> = report.results.iter().map(|r| r.name).collect();
        for n in [
            "conv2d",
            "deconv2d",
            "instance_norm",
            "prelu",
            "glu",
            "softmax",
            "spectral_norm_path",
            "atab",
            "afab",
            "atfa",
            "aha",
            "rals_discriminator",
            "rals_generator",
            "cycle",
            "identity",
            "total_generator",
        ] {
            assert!(names.contains(&n), "missing {n}");
        }
        assert!(report.passed(), "{}", report.to_text());
    }

    fn abs_case(x: Vec<f32>) -> GradCase {
        let n = x.len();
        GradCase::new(
            "abs",
            vec![Tensor::new(&[n], x).unwrap()],
            ParamStore::new(),
            |g, _, v| Ok(g.abs(v[0])),
            |x, _| Arr::new(&x[0].shape, x[0].data.iter().map(|v| v.abs()).collect()),
        )
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // |x| closer to its kink than the step: the central difference
        // straddles 0 and disagrees with the analytic slope
        let r = abs_case(vec![0.0005, 0.5]).check(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(!r.passed());
        let r = abs_case(vec![0.05, -0.5]).check(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn a_mismatched_reference_is_caught() {
        let case = GradCase::new(
            "scaled",
            vec![Tensor::new(&[2], vec![0.3, -0.2]).unwrap()],
            ParamStore::new(),
            |g, _, v| Ok(g.mul_const(v[0], 2.0)),
            |x, _| Arr::new(&x[0].shape, x[0].data.iter().map(|v| 2.001 * v).collect()),
        );
        let r = case.check(&mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(r.forward_error > FORWARD_TOLERANCE && !r.passed());
    }

    #[test]
    fn an_inert_declaration_must_hold() {
        let inputs = vec![Tensor::new(&[2], vec![0.3, -0.2]).unwrap(), Tensor::new(&[2], vec![0.1, 0.4]).unwrap()];
        let case = GradCase::new(
            "sum",
            inputs,
            ParamStore::new(),
            |g, _, v| g.add(v[0], v[1]),
            |x, _| Arr::new(&x[0].shape, x[0].data.iter().zip(&x[1].data).map(|(a, b)| a + b).collect()),
        )
        .with_inert(&["input1"]);
        assert!(!case.check(&mut ChaCha8Rng::seed_from_u64(2)).unwrap().passed());
    }

    #[test]
    fn margin_moves_values_off_zero() {
        let t = away_from_zero(Tensor::new(&[4], vec![0.0, -0.001, 0.5, 0.004]).unwrap(), 0.01);
        assert_eq!(t.data(), &[0.01, -0.01, 0.5, 0.01]);
    }
}
