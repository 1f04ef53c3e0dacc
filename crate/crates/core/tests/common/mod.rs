//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use capslab::capsule::{
    dynamic_routing, margin_loss, mask_capsules, no_routing_average, primary_capsules, squash, MarginLossParams,
    RoutingOptions,
};
use capslab::nn::global_avg_pool;
use capslab::{Graph64, Result, Tensor64, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor64 {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor64::new(shape.to_vec(), data).unwrap()
}

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

pub fn mnist_dir() -> PathBuf {
    workspace_root().join("data/mnist")
}

// ---- finite differences -------------------------------------------------

pub type Builder = Box<dyn Fn(&mut Graph64, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor64>,
    pub build: Builder,
}

fn case(name: &'static str, inputs: Vec<Tensor64>, build: impl Fn(&mut Graph64, &[Var]) -> Result<Var> + 'static) -> GradCase {
    GradCase { name, inputs, build: Box::new(build) }
}

/// Scalar loss `sum(y * r)` with a fixed random projection `r`.
fn projected(case: &GradCase, inputs: &[Tensor64], track: bool) -> (Graph64, Vec<Var>, Var) {
    let mut g = Graph64::new();
    let vars: Vec<Var> = inputs.iter().map(|t| if track { g.param(t.clone()) } else { g.constant(t.clone()) }).collect();
    let y = (case.build)(&mut g, &vars).unwrap_or_else(|e| panic!("{}: {e}", case.name));
    let shape = g.shape(y).to_vec();
    let r = uniform(&mut rng(0xfeed), &shape, 0.5, 1.5);
    let r = g.constant(r);
    let prod = g.mul(y, r).unwrap();
    let loss = g.sum_all(prod).unwrap();
    (g, vars, loss)
}

/// Largest gradient error over every input element: relative where the
/// analytic value is at least 1e-8 in magnitude, absolute below.
pub fn gradcheck(case: &GradCase, eps: f64) -> f64 {
    let (mut g, vars, loss) = projected(case, &case.inputs, true);
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor64> =
        vars.iter().zip(&case.inputs).map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor64::zeros(t.shape()))).collect();
    let eval = |inputs: &[Tensor64]| {
        let (g, _, loss) = projected(case, inputs, false);
        g.value(loss).item()
    };
    let mut worst: f64 = 0.0;
    for (k, t) in case.inputs.iter().enumerate() {
        for i in 0..t.len() {
            let mut plus = case.inputs.clone();
            plus[k].data_mut()[i] += eps;
            let mut minus = case.inputs.clone();
            minus[k].data_mut()[i] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic[k].data()[i];
            let err = if a.abs() < 1e-8 { (a - numeric).abs() } else { (a - numeric).abs() / a.abs().max(numeric.abs()) };
            worst = worst.max(err);
        }
    }
    worst
}

/// One case per differentiable operation, plus the composite capsule
/// functions built from them.
pub fn grad_cases() -> Vec<GradCase> {
    let mut r = rng(42);
    let mut u = |shape: &[usize]| uniform(&mut r, shape, -1.0, 1.0);
    let mut r2 = rng(43);
    let mut pos = |shape: &[usize]| uniform(&mut r2, shape, 0.5, 1.5);
    let targets = Tensor64::from_f64(
        [3, 4],
        &[1., 0., 0., 0., 0., 0., 1., 0., 0., 1., 0., 1.],
    )
    .unwrap();
    let bce_t = targets.clone();
    let mut cases = vec![
        case("matmul", vec![u(&[3, 4]), u(&[4, 2])], |g, v| g.matmul(v[0], v[1])),
        case("conv2d stride 1", vec![u(&[2, 2, 6, 6]), u(&[3, 2, 3, 3]), u(&[3])], |g, v| g.conv2d(v[0], v[1], v[2], 1)),
        case("conv2d stride 2", vec![u(&[1, 2, 7, 7]), u(&[2, 2, 3, 3]), u(&[2])], |g, v| g.conv2d(v[0], v[1], v[2], 2)),
        case("capsule_votes", vec![u(&[2, 3, 4]), u(&[3, 4, 5])], |g, v| g.capsule_votes(v[0], v[1])),
        case("capsule_votes shared", vec![u(&[2, 3, 4]), u(&[1, 4, 5])], |g, v| g.capsule_votes(v[0], v[1])),
        case("weighted_sum", vec![u(&[2, 3, 4, 2]), u(&[2, 3, 4])], |g, v| g.weighted_sum(v[0], v[1])),
        case("agreement", vec![u(&[2, 3, 4, 2]), u(&[2, 4, 2])], |g, v| g.agreement(v[0], v[1])),
        case("relu", vec![u(&[4, 5])], |g, v| g.relu(v[0])),
        case("sigmoid", vec![u(&[4, 5])], |g, v| g.sigmoid(v[0])),
        case("square", vec![u(&[4, 5])], |g, v| g.square(v[0])),
        case("ln", vec![pos(&[4, 5])], |g, v| g.ln(v[0])),
        case("add_scalar", vec![u(&[4, 5])], |g, v| g.add_scalar(v[0], 0.3)),
        case("mul_scalar", vec![u(&[4, 5])], |g, v| g.mul_scalar(v[0], -1.7)),
        case("add", vec![u(&[3, 4]), u(&[3, 4])], |g, v| g.add(v[0], v[1])),
        case("sub", vec![u(&[3, 4]), u(&[3, 4])], |g, v| g.sub(v[0], v[1])),
        case("mul", vec![u(&[3, 4]), u(&[3, 4])], |g, v| g.mul(v[0], v[1])),
        case("div", vec![u(&[3, 4]), pos(&[3, 4])], |g, v| g.div(v[0], v[1])),
        case("add_bias", vec![u(&[2, 3, 4]), u(&[4])], |g, v| g.add_bias(v[0], v[1])),
        case("sum axis 1", vec![u(&[2, 3, 4])], |g, v| g.sum(v[0], &[1])),
        case("sum axes 0 2", vec![u(&[2, 3, 4])], |g, v| g.sum(v[0], &[0, 2])),
        case("mean axes 1 2", vec![u(&[2, 3, 4])], |g, v| g.mean(v[0], &[1, 2])),
        case("sum_all", vec![u(&[2, 3, 4])], |g, v| g.sum_all(v[0])),
        case("l2_norm_lastaxis", vec![u(&[3, 5])], |g, v| g.l2_norm_lastaxis(v[0])),
        case("softmax last axis", vec![u(&[3, 5])], |g, v| g.softmax(v[0], 1)),
        case("softmax middle axis", vec![u(&[2, 3, 4])], |g, v| g.softmax(v[0], 1)),
        case("log_softmax", vec![u(&[3, 5])], |g, v| g.log_softmax(v[0], 1)),
        case("reshape", vec![u(&[2, 3, 4])], |g, v| g.reshape(v[0], &[6, 4])),
        case("permute", vec![u(&[2, 3, 4])], |g, v| g.permute(v[0], &[2, 0, 1])),
        case("expand", vec![u(&[2, 3])], |g, v| g.expand(v[0], 1, 4)),
        case("binary_cross_entropy", vec![uniform(&mut rng(44), &[3, 4], 0.1, 0.9)], move |g, v| {
            let t = g.constant(bce_t.clone());
            g.binary_cross_entropy(v[0], t)
        }),
        case("squash", vec![u(&[3, 4])], |g, v| squash(g, v[0])),
        case("primary_capsules", vec![u(&[2, 4, 3, 3])], |g, v| primary_capsules(g, v[0], 2)),
        case("global_avg_pool", vec![u(&[2, 3, 4, 4])], |g, v| global_avg_pool(g, v[0])),
        case("dynamic_routing", vec![u(&[2, 3, 4, 2])], |g, v| {
            let (out, _) = dynamic_routing(g, v[0], None, RoutingOptions::default())?;
            Ok(out.v)
        }),
        case("dynamic_routing with prior", vec![u(&[1, 3, 2, 3]), u(&[1, 3, 2])], |g, v| {
            let opts = RoutingOptions { iterations: 4, ..RoutingOptions::default() };
            let (out, _) = dynamic_routing(g, v[0], Some(v[1]), opts)?;
            Ok(out.lengths)
        }),
        case("no_routing_average", vec![u(&[2, 3, 4, 2])], |g, v| Ok(no_routing_average(g, v[0], true)?.v)),
        case("margin_loss", vec![uniform(&mut rng(45), &[3, 4], 0.0, 1.0)], move |g, v| {
            margin_loss(g, v[0], &targets, &MarginLossParams::default())
        }),
        case("mask_capsules", vec![u(&[2, 3, 4])], |g, v| mask_capsules(g, v[0], &[2, 0])),
        case("conv relu sum", vec![u(&[1, 2, 6, 6]), u(&[2, 2, 3, 3]), u(&[2])], |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 1)?;
            let y = g.relu(y)?;
            g.sum_all(y)
        }),
    ];
    cases.shrink_to_fit();
    cases
}

// ---- convolution ------------------------------------------------------------

/// Direct six-nested-loop valid cross-correlation; bias added after the sum.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv(x: &[f64], w: &[f64], bias: &[f64], b: usize, cin: usize, h: usize, wd: usize, cout: usize, k: usize, s: usize) -> Vec<f64> {
    let ho = (h - k) / s + 1;
    let wo = (wd - k) / s + 1;
    let mut out = vec![0.0; b * cout * ho * wo];
    for n in 0..b {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let xv = x[((n * cin + ci) * h + oy * s + ky) * wd + ox * s + kx];
                                let wv = w[((co * cin + ci) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((n * cout + co) * ho + oy) * wo + ox] = acc + bias[co];
                }
            }
        }
    }
    out
}

// ---- routing ------------------------------------------------------------------

/// Straight-line routing by agreement, one sample at a time:
/// `c = softmax_j(b)`, then for each iteration `s_j = sum_i c_ij u_j|i`,
/// `v_j = squash(s_j)`, `a_ij += u_j|i . v_j`, `c = softmax_j(b + a)`.
/// Returns `(v, c)` with `c` the coefficients of the final iteration.
pub fn routing_oracle(u: &[f64], prior: Option<&[f64]>, bsz: usize, m: usize, n: usize, d: usize, iters: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v_all = Vec::with_capacity(bsz * n * d);
    let mut c_all = Vec::with_capacity(bsz * m * n);
    for b in 0..bsz {
        let vote = |i: usize, j: usize, k: usize| u[((b * m + i) * n + j) * d + k];
        let prior = |i: usize, j: usize| prior.map_or(0.0, |p| p[(b * m + i) * n + j]);
        let softmax_rows = |logits: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            logits
                .iter()
                .map(|row| {
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
                    let mut total = 0.0;
                    for x in &e {
                        total += x;
                    }
                    e.iter().map(|x| x / total).collect()
                })
                .collect()
        };
        let b0: Vec<Vec<f64>> = (0..m).map(|i| (0..n).map(|j| prior(i, j)).collect()).collect();
        let mut c = softmax_rows(&b0);
        let mut agree_sum: Option<Vec<Vec<f64>>> = None;
        let mut v = vec![vec![0.0; d]; n];
        for t in 1..=iters {
            for j in 0..n {
                let mut s = vec![0.0; d];
                for i in 0..m {
                    for k in 0..d {
                        s[k] += vote(i, j, k) * c[i][j];
                    }
                }
                let mut sq = 0.0;
                for x in &s {
                    sq += x * x;
                }
                let norm = sq.sqrt();
                let factor = norm / (norm * norm + 1.0);
                v[j] = s.iter().map(|x| x * factor).collect();
            }
            let agree: Vec<Vec<f64>> = (0..m)
                .map(|i| {
                    (0..n)
                        .map(|j| {
                            let mut a = 0.0;
                            for k in 0..d {
                                a += vote(i, j, k) * v[j][k];
                            }
                            a
                        })
                        .collect()
                })
                .collect();
            agree_sum = Some(match agree_sum {
                None => agree,
                Some(prev) => prev.iter().zip(&agree).map(|(p, a)| p.iter().zip(a).map(|(x, y)| x + y).collect()).collect(),
            });
            if t < iters {
                let acc = agree_sum.as_ref().unwrap();
                let logits = (0..m).map(|i| (0..n).map(|j| b0[i][j] + acc[i][j]).collect()).collect();
                c = softmax_rows(&logits);
            }
        }
        v_all.extend(v.into_iter().flatten());
        c_all.extend(c.into_iter().flatten());
    }
    (v_all, c_all)
}

// ---- compactness ------------------------------------------------------------

/// Direct evaluation of the mean KL divergence between each image's
/// normalised per-dimension variance and the uniform distribution.
pub fn compactness_oracle(per_image: &[Vec<Vec<f64>>]) -> f64 {
    let mut total = 0.0;
    let mut used = 0usize;
    for vecs in per_image {
        let n = vecs.len() as f64;
        let d = vecs[0].len();
        let mut var = vec![0.0; d];
        for (k, slot) in var.iter_mut().enumerate() {
            let mean = vecs.iter().map(|v| v[k]).sum::<f64>() / n;
            *slot = vecs.iter().map(|v| (v[k] - mean) * (v[k] - mean)).sum::<f64>() / n;
        }
        let z: f64 = var.iter().sum();
        if z <= 0.0 {
            continue;
        }
        let mut kl = 0.0;
        for x in &var {
            let p = x / z;
            if p > 0.0 {
                kl += p * (p / (1.0 / d as f64)).ln();
            }
        }
        total += kl;
        used += 1;
    }
    if used == 0 {
        0.0
    } else {
        total / used as f64
    }
}
