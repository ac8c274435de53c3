//! Naive `f64` forward implementations of the operations under test.
//!
//! They share no code with the graph kernels; finite differences are taken
//! on these, so the oracle is free of `f32` rounding.

use std::collections::BTreeMap;

use crate::numerics::{ConvGeometry, ParamStore, Tensor};

/// Dense row-major `f64` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?}");
        Arr { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Arr::new(shape, vec![0.0; shape.iter().product()])
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Arr::new(t.shape(), t.data().iter().map(|v| *v as f64).collect())
    }

    pub fn scalar(v: f64) -> Self {
        Arr::new(&[1], vec![v])
    }

    fn dims4(&self) -> [usize; 4] {
        match *self.shape {
            [a, b, c, d] => [a, b, c, d],
            _ => panic!("expected rank 4, got {:?}", self.shape),
        }
    }

    fn at4(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        let [_, b, c, d] = self.dims4();
        self.data[((i * b + j) * c + k) * d + l]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1);
        self.data[0]
    }
}

/// Parameter values by name.
pub type Params = BTreeMap<String, Arr>;

pub fn params_of(store: &ParamStore) -> Params {
    store.leaves().iter().map(|l| (l.name.clone(), Arr::from_tensor(&l.value))).collect()
}

pub fn conv2d(x: &Arr, k: &Arr, bias: Option<&Arr>, g: ConvGeometry) -> Arr {
    let [b, h, w, cin] = x.dims4();
    let [kh, kw, kc, cout] = k.dims4();
    assert_eq!(kc, cin);
    let (sh, sw) = g.stride;
    let (ph, pw) = (g.padding.0 as isize, g.padding.1 as isize);
    let oh = (h + 2 * g.padding.0 - kh) / sh + 1;
    let ow = (w + 2 * g.padding.1 - kw) / sw + 1;
    let mut out = Arr::zeros(&[b, oh, ow, cout]);
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..cout {
                    let mut s = bias.map_or(0.0, |bb| bb.data[o]);
                    for i in 0..kh {
                        for j in 0..kw {
                            let iy = (oy * sh + i) as isize - ph;
                            let ix = (ox * sw + j) as isize - pw;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for c in 0..cin {
                                s += x.at4(bi, iy as usize, ix as usize, c) * k.at4(i, j, c, o);
                            }
                        }
                    }
                    out.data[((bi * oh + oy) * ow + ox) * cout + o] = s;
                }
            }
        }
    }
    out
}

/// Transposed convolution; `k` is `(kh, kw, cout, cin)`.
pub fn deconv2d(x: &Arr, k: &Arr, bias: Option<&Arr>, g: ConvGeometry) -> Arr {
    let [b, h, w, cin] = x.dims4();
    let [kh, kw, cout, kc] = k.dims4();
    assert_eq!(kc, cin);
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let oh = (h - 1) * sh + kh - 2 * ph;
    let ow = (w - 1) * sw + kw - 2 * pw;
    let mut out = Arr::zeros(&[b, oh, ow, cout]);
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                for i in 0..kh {
                    for j in 0..kw {
                        let oy = (y * sh + i) as isize - ph as isize;
                        let ox = (xx * sw + j) as isize - pw as isize;
                        if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                            continue;
                        }
                        for o in 0..cout {
                            let mut s = 0.0;
                            for c in 0..cin {
                                s += x.at4(bi, y, xx, c) * k.at4(i, j, o, c);
                            }
                            out.data[((bi * oh + oy as usize) * ow + ox as usize) * cout + o] += s;
                        }
                    }
                }
            }
        }
    }
    if let Some(bb) = bias {
        for (i, v) in out.data.iter_mut().enumerate() {
            *v += bb.data[i % cout];
        }
    }
    out
}

pub fn instance_norm(x: &Arr, scale: &Arr, shift: &Arr, eps: f64) -> Arr {
    let [b, h, w, c] = x.dims4();
    let p = (h * w) as f64;
    let mut out = x.clone();
    for bi in 0..b {
        for ci in 0..c {
            let vals: Vec<f64> = (0..h * w).map(|q| x.at4(bi, q / w, q % w, ci)).collect();
            let mean = vals.iter().sum::<f64>() / p;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / p;
            let inv = 1.0 / (var + eps).sqrt();
            for q in 0..h * w {
                out.data[((bi * h + q / w) * w + q % w) * c + ci] = (vals[q] - mean) * inv * scale.data[ci] + shift.data[ci];
            }
        }
    }
    out
}

pub fn prelu(x: &Arr, slope: &Arr) -> Arr {
    let c = *x.shape.last().unwrap();
    let data = x.data.iter().enumerate().map(|(i, v)| if *v < 0.0 { v * slope.data[i % c] } else { *v }).collect();
    Arr::new(&x.shape, data)
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn glu(x: &Arr) -> Arr {
    let c2 = *x.shape.last().unwrap();
    let c = c2 / 2;
    let mut data = Vec::with_capacity(x.data.len() / 2);
    for row in x.data.chunks_exact(c2) {
        data.extend((0..c).map(|i| row[i] * sigmoid(row[c + i])));
    }
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = c;
    Arr::new(&shape, data)
}

pub fn softmax(x: &Arr) -> Arr {
    let n = *x.shape.last().unwrap();
    let mut data = Vec::with_capacity(x.data.len());
    for row in x.data.chunks_exact(n) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        data.extend(e.iter().map(|v| v / s));
    }
    Arr::new(&x.shape, data)
}

/// `w / ‖Wᵀu‖` for the kernel viewed as rows of length `cout`.
pub fn spectral_normalize(w: &Arr, u: &[f64]) -> Arr {
    let cout = u.len();
    let sigma = w
        .data
        .chunks_exact(cout)
        .map(|row| row.iter().zip(u).map(|(a, b)| a * b).sum::<f64>().powi(2))
        .sum::<f64>()
        .sqrt();
    Arr::new(&w.shape, w.data.iter().map(|v| v / sigma).collect())
}

fn permute_tf(x: &Arr) -> Arr {
    let [b, t, f, c] = x.dims4();
    let mut out = Arr::zeros(&[b, f, t, c]);
    for bi in 0..b {
        for ti in 0..t {
            for fi in 0..f {
                for ci in 0..c {
                    out.data[((bi * f + fi) * t + ti) * c + ci] = x.at4(bi, ti, fi, ci);
                }
            }
        }
    }
    out
}

/// One self-attention branch along axis 1 of `x: B×L×W×C` with projections
/// read from `params` under `prefix`.
pub fn attend(x: &Arr, params: &Params, prefix: &str) -> Arr {
    let [b, l, w, c] = x.dims4();
    let p = |n: &str| &params[&format!("{prefix}/{n}")];
    let pw = ConvGeometry::pointwise();
    let q = conv2d(x, p("query/kernel"), Some(p("query/bias")), pw);
    let k = conv2d(x, p("key/kernel"), Some(p("key/bias")), pw);
    let v = conv2d(x, p("value/kernel"), Some(p("value/bias")), pw);
    let dq = w * (c / 8);
    let dv = w * c;
    let mut out = Arr::zeros(&[b, l, w, c]);
    for bi in 0..b {
        for i in 0..l {
            let qi = &q.data[(bi * l + i) * dq..(bi * l + i + 1) * dq];
            let scores: Vec<f64> = (0..l)
                .map(|j| {
                    let kj = &k.data[(bi * l + j) * dq..(bi * l + j + 1) * dq];
                    qi.iter().zip(kj).map(|(a, b)| a * b).sum()
                })
                .collect();
            let attn = softmax(&Arr::new(&[l], scores));
            for e in 0..dv {
                out.data[(bi * l + i) * dv + e] = (0..l).map(|j| attn.data[j] * v.data[(bi * l + j) * dv + e]).sum();
            }
        }
    }
    out
}

pub fn atab(x: &Arr, params: &Params, prefix: &str) -> Arr {
    attend(x, params, &format!("{prefix}/time"))
}

pub fn afab(x: &Arr, params: &Params, prefix: &str) -> Arr {
    permute_tf(&attend(&permute_tf(x), params, &format!("{prefix}/freq")))
}

/// `x + α·time(x) + β·freq(x)`.
pub fn atfa(x: &Arr, params: &Params, prefix: &str) -> Arr {
    let alpha = params[&format!("{prefix}/time/alpha")].item();
    let beta = params[&format!("{prefix}/freq/beta")].item();
    let (a, f) = (atab(x, params, prefix), afab(x, params, prefix));
    let data = (0..x.data.len()).map(|i| x.data[i] + alpha * a.data[i] + beta * f.data[i]).collect();
    Arr::new(&x.shape, data)
}

/// `F_N + γ·Σ softmax_n(w_n · pool(F_n) + b_n)·F_n`.
pub fn aha(maps: &[Arr], params: &Params, prefix: &str) -> Arr {
    let [b, t, f, c] = maps[0].dims4();
    let plane = t * f;
    let gamma = params[&format!("{prefix}/gamma")].item();
    let mut out = maps.last().unwrap().clone();
    for bi in 0..b {
        let logits: Vec<f64> = maps
            .iter()
            .enumerate()
            .map(|(n, m)| {
                let w = &params[&format!("{prefix}/w{n}/kernel")];
                let bias = params[&format!("{prefix}/w{n}/bias")].item();
                let pooled = (0..c).map(|ci| (0..plane).map(|q| m.at4(bi, q / f, q % f, ci)).sum::<f64>() / plane as f64);
                pooled.zip(&w.data).map(|(a, b)| a * b).sum::<f64>() + bias
            })
            .collect();
        let weights = softmax(&Arr::new(&[maps.len()], logits));
        let item = plane * c;
        for e in 0..item {
            let agg: f64 = maps.iter().zip(&weights.data).map(|(m, wn)| wn * m.data[bi * item + e]).sum();
            out.data[bi * item + e] += gamma * agg;
        }
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `mean((a − mean(b) − 1)²) + mean((b − mean(a) + 1)²)`.
fn relativistic(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    mean(&a.iter().map(|x| (x - mb - 1.0).powi(2)).collect::<Vec<_>>()) + mean(&b.iter().map(|x| (x - ma + 1.0).powi(2)).collect::<Vec<_>>())
}

pub fn rals_discriminator(real: &Arr, fake: &Arr) -> Arr {
    Arr::scalar(relativistic(&real.data, &fake.data))
}

pub fn rals_generator(real: &Arr, fake: &Arr) -> Arr {
    Arr::scalar(relativistic(&fake.data, &real.data))
}

fn mae(a: &Arr, b: &Arr) -> f64 {
    mean(&a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>())
}

/// `mae(F(G(x)), x) + mae(G(F(y)), y)`; identity has the same form.
pub fn paired_l1(x: &Arr, fx: &Arr, y: &Arr, gy: &Arr) -> Arr {
    Arr::scalar(mae(fx, x) + mae(gy, y))
}

pub fn total_generator(terms: &[Arr], lambda_cycle: f64, lambda_id: f64) -> Arr {
    Arr::scalar(terms[0].item() + terms[1].item() + lambda_cycle * terms[2].item() + lambda_id * terms[3].item())
}

/// Central differences of `f` at `at` with step `eps`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, at: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = at.to_vec();
    (0..at.len())
        .map(|i| {
            probe[i] = at[i] + eps;
            let hi = f(&probe);
            probe[i] = at[i] - eps;
            let lo = f(&probe);
            probe[i] = at[i];
            (hi - lo) / (2.0 * eps)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_conv_is_a_matrix_product() {
        let x = Arr::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let k = Arr::new(&[1, 1, 2, 1], vec![10.0, 1.0]);
        let y = conv2d(&x, &k, Some(&Arr::scalar(0.5)), ConvGeometry::pointwise());
        assert_eq!(y.data, vec![12.5, 34.5]);
    }

    #[test]
    fn stride_two_deconv_spreads_each_input() {
        let x = Arr::new(&[1, 1, 2, 1], vec![1.0, 2.0]);
        let k = Arr::new(&[1, 2, 1, 1], vec![1.0, 10.0]);
        let y = deconv2d(&x, &k, None, ConvGeometry::new((1, 2), (1, 2), (0, 0)));
        assert_eq!(y.data, vec![1.0, 10.0, 2.0, 20.0]);
    }

    #[test]
    fn rals_fixed_points() {
        let ones = Arr::new(&[3], vec![1.0; 3]);
        let zeros = Arr::new(&[3], vec![0.0; 3]);
        assert_eq!(rals_discriminator(&ones, &zeros).item(), 0.0);
        assert_eq!(rals_discriminator(&zeros, &ones).item(), 8.0);
    }

    #[test]
    fn central_difference_of_a_cubic() {
        let g = central_difference(|v| v[0].powi(3), &[2.0], 1e-3);
        assert!((g[0] - 12.0).abs() < 1e-5);
    }
}
