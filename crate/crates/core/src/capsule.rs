//! Capsule mathematics: squashing, votes, dynamic routing, margin loss and
//! class-conditional masking.
//!
//! Everything here is built from [`Graph`] operations, so gradients flow
//! through the routing iterations without any hand-written backward code.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{glorot_uniform, ParamStore};
use crate::scalar::Scalar;
use crate::seed::SeedScheme;
use crate::tensor::Tensor;

/// Hyper-parameters of the margin loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginLossParams {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
}

impl Default for MarginLossParams {
    fn default() -> Self {
        MarginLossParams { m_plus: 0.9, m_minus: 0.1, lambda: 0.5 }
    }
}

impl MarginLossParams {
    pub fn validate(&self) -> Result<()> {
        if 0.0 < self.m_minus && self.m_minus < self.m_plus && self.m_plus < 1.0 && self.lambda >= 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("margin loss requires 0 < m- < m+ < 1, got {self:?}")))
        }
    }
}

/// Shape of the transformation matrices between primary and output capsules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformParams {
    pub num_primary: usize,
    pub d_in: usize,
    pub num_classes: usize,
    pub d_out: usize,
    pub shared: bool,
}

impl TransformParams {
    pub fn shape(&self) -> [usize; 3] {
        let rows = if self.shared { 1 } else { self.num_primary };
        [rows, self.d_in, self.num_classes * self.d_out]
    }

    pub fn num_params(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seeds: &SeedScheme, name: &str) -> Result<()> {
        let w = glorot_uniform(seeds, name, &self.shape(), self.d_in, self.num_classes * self.d_out);
        store.insert(name, w)?;
        Ok(())
    }
}

/// `v = s * |s| / (1 + |s|^2)` along the last axis, i.e. direction kept and
/// length mapped to `|s|^2 / (1 + |s|^2)`. The zero vector maps to zero.
pub fn squash<T: Scalar>(g: &mut Graph<T>, s: Var) -> Result<Var> {
    let shape = g.shape(s).to_vec();
    let d = *shape.last().ok_or_else(|| Error::shape("squash", "rank-0 input"))?;
    let norm = g.l2_norm_lastaxis(s)?;
    let sq = g.square(norm)?;
    let den = g.add_scalar(sq, 1.0)?;
    let factor = g.div(norm, den)?;
    let factor = g.expand(factor, shape.len() - 1, d)?;
    g.mul(s, factor)
}

/// Regroups `[B, C, H, W]` feature maps into `[B, M, d_in]` capsules with
/// `M = (C / d_in) * H * W`. Capsule `(group, y, x)` collects channels
/// `group * d_in .. (group + 1) * d_in` at location `(y, x)`.
pub fn primary_capsules<T: Scalar>(g: &mut Graph<T>, maps: Var, d_in: usize) -> Result<Var> {
    let s = g.shape(maps).to_vec();
    if s.len() != 4 || d_in == 0 || s[1] % d_in != 0 {
        return Err(Error::shape("primary_capsules", format!("{s:?} cannot be split into {d_in}-d capsules")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let grouped = g.reshape(maps, &[b, c / d_in, d_in, h, w])?;
    let moved = g.permute(grouped, &[0, 1, 3, 4, 2])?;
    g.reshape(moved, &[b, (c / d_in) * h * w, d_in])
}

/// Inverse of [`primary_capsules`].
pub fn capsules_to_maps<T: Scalar>(g: &mut Graph<T>, caps: Var, channels: usize, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(caps).to_vec();
    if s.len() != 3 || s[2] == 0 || channels % s[2] != 0 || s[1] * s[2] != channels * h * w {
        return Err(Error::shape("capsules_to_maps", format!("{s:?} vs {channels}x{h}x{w}")));
    }
    let (b, d_in) = (s[0], s[2]);
    let split = g.reshape(caps, &[b, channels / d_in, h, w, d_in])?;
    let moved = g.permute(split, &[0, 1, 4, 2, 3])?;
    g.reshape(moved, &[b, channels, h, w])
}

/// Votes `u_i W_ij` for every primary capsule and class: `[B, M, N, d_out]`.
pub fn make_votes<T: Scalar>(g: &mut Graph<T>, caps: Var, w: Var, num_classes: usize, d_out: usize) -> Result<Var> {
    let (sc, sw) = (g.shape(caps).to_vec(), g.shape(w).to_vec());
    if sw.len() != 3 || sw[2] != num_classes * d_out {
        return Err(Error::dim("make_votes", &sc, &sw));
    }
    let flat = g.capsule_votes(caps, w)?;
    g.reshape(flat, &[sc[0], sc[1], num_classes, d_out])
}

/// Intermediate quantities of the routing procedure, as graph handles.
#[derive(Debug, Clone)]
pub struct RoutingState {
    /// Log priors `[B, M, N]`.
    pub b: Var,
    /// Coupling coefficients used at iterations `1..=t`, each `[B, M, N]`.
    pub c_history: Vec<Var>,
    /// Number of completed iterations.
    pub t: usize,
    /// Accumulated agreement over iterations `1..=t`, `[B, M, N]`.
    pub agreement_sum: Var,
}

impl RoutingState {
    pub fn c(&self) -> Var {
        *self.c_history.last().expect("at least one iteration")
    }
}

#[derive(Debug, Clone)]
pub struct OutputCapsules {
    /// `[B, N, d_out]`
    pub v: Var,
    /// `[B, N]`
    pub lengths: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutingOptions {
    pub iterations: usize,
    /// Squash the output capsules at each iteration.
    pub squash: bool,
    /// Treat coupling coefficients as constants for differentiation.
    pub detach_coefficients: bool,
}

impl Default for RoutingOptions {
    fn default() -> Self {
        RoutingOptions { iterations: 3, squash: true, detach_coefficients: false }
    }
}

/// Dynamic routing by agreement over `votes` (`[B, M, N, D]`).
///
/// At iteration `t`: `s_j = sum_i c_ij u_j|i`, `v_j = squash(s_j)`, and the
/// next coefficients are `softmax_j(b_ij + sum_{r<=t} v_j^(r) . u_j|i)`. The
/// first coefficients are `softmax_j(b_ij)`. `b_init` defaults to zeros.
pub fn dynamic_routing<T: Scalar>(
    g: &mut Graph<T>,
    votes: Var,
    b_init: Option<Var>,
    opts: RoutingOptions,
) -> Result<(OutputCapsules, RoutingState)> {
    if opts.iterations < 1 {
        return Err(Error::arg("dynamic_routing", "iterations must be >= 1"));
    }
    let s = g.shape(votes).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("dynamic_routing", format!("votes must be [B, M, N, D], got {s:?}")));
    }
    let (bsz, m, n) = (s[0], s[1], s[2]);
    let b = match b_init {
        Some(b) if g.shape(b) == [bsz, m, n] => b,
        Some(b) => return Err(Error::dim("dynamic_routing", g.shape(b), &[bsz, m, n])),
        None => g.constant(Tensor::zeros([bsz, m, n])),
    };
    let mut c = g.softmax(b, 2)?;
    let mut c_history = Vec::with_capacity(opts.iterations);
    let mut agreement_sum: Option<Var> = None;
    let mut v = votes;
    for t in 1..=opts.iterations {
        if opts.detach_coefficients {
            c = g.detach(c);
        }
        c_history.push(c);
        let s_j = g.weighted_sum(votes, c)?;
        v = if opts.squash { squash(g, s_j)? } else { s_j };
        let agree = g.agreement(votes, v)?;
        let acc = match agreement_sum {
            None => agree,
            Some(prev) => g.add(prev, agree)?,
        };
        agreement_sum = Some(acc);
        if t < opts.iterations {
            let logits = g.add(b, acc)?;
            c = g.softmax(logits, 2)?;
        }
    }
    let lengths = g.l2_norm_lastaxis(v)?;
    let state = RoutingState {
        b,
        c_history,
        t: opts.iterations,
        agreement_sum: agreement_sum.expect("iterations >= 1"),
    };
    Ok((OutputCapsules { v, lengths }, state))
}

/// Uniform average of votes over input capsules, then squashing.
pub fn no_routing_average<T: Scalar>(g: &mut Graph<T>, votes: Var, squash_output: bool) -> Result<OutputCapsules> {
    if g.shape(votes).len() != 4 {
        return Err(Error::shape("no_routing_average", format!("votes must be [B, M, N, D], got {:?}", g.shape(votes))));
    }
    let mean = g.mean(votes, &[1])?;
    let v = if squash_output { squash(g, mean)? } else { mean };
    let lengths = g.l2_norm_lastaxis(v)?;
    Ok(OutputCapsules { v, lengths })
}

/// Margin loss on capsule lengths (`[B, N]`) against multi-hot targets,
/// summed over classes and averaged over the batch.
pub fn margin_loss<T: Scalar>(
    g: &mut Graph<T>,
    lengths: Var,
    targets: &Tensor<T>,
    p: &MarginLossParams,
) -> Result<Var> {
    let s = g.shape(lengths).to_vec();
    if s.len() != 2 || targets.shape() != s.as_slice() {
        return Err(Error::dim("margin_loss", &s, targets.shape()));
    }
    let lam = T::from_f64_lossy(p.lambda);
    let neg_w = targets.map(|t| lam * (T::one() - t));
    let pos_w = g.constant(targets.clone());
    let neg_w = g.constant(neg_w);

    let flipped = g.mul_scalar(lengths, -1.0)?;
    let below = g.add_scalar(flipped, p.m_plus)?;
    let below = g.relu(below)?;
    let below = g.square(below)?;
    let above = g.add_scalar(lengths, -p.m_minus)?;
    let above = g.relu(above)?;
    let above = g.square(above)?;

    let pos = g.mul(pos_w, below)?;
    let neg = g.mul(neg_w, above)?;
    let per_class = g.add(pos, neg)?;
    let per_sample = g.sum(per_class, &[1])?;
    g.mean(per_sample, &[0])
}

/// Zeroes every capsule except `classes[b]` in row `b`, and flattens to
/// `[B, N * d_out]`.
pub fn mask_capsules<T: Scalar>(g: &mut Graph<T>, v: Var, classes: &[usize]) -> Result<Var> {
    let s = g.shape(v).to_vec();
    if s.len() != 3 || classes.len() != s[0] {
        return Err(Error::dim("mask_capsules", &s, &[classes.len()]));
    }
    let (bsz, n, d) = (s[0], s[1], s[2]);
    let mut mask = Tensor::zeros([bsz, n, d]);
    for (b, &k) in classes.iter().enumerate() {
        if k >= n {
            return Err(Error::arg("mask_capsules", format!("class {k} out of range [0, {n})")));
        }
        mask.data_mut()[(b * n + k) * d..(b * n + k + 1) * d].fill(T::one());
    }
    let mask = g.constant(mask);
    let kept = g.mul(v, mask)?;
    g.reshape(kept, &[bsz, n * d])
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(scores: &Tensor<T>) -> Vec<usize> {
    let n = *scores.shape().last().expect("rank >= 1");
    scores
        .data()
        .chunks(n)
        .map(|row| {
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn squash_examples() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::from_f64([3, 2], &[0.0, 0.0, 0.6, 0.8, 1.8, 2.4]).unwrap());
        let v = squash(&mut g, s).unwrap();
        let out = g.value(v).data().to_vec();
        assert_eq!(&out[..2], &[0.0, 0.0]);
        assert!((norm(&out[2..4]) - 0.5).abs() < 1e-15);
        assert!((norm(&out[4..6]) - 0.9).abs() < 1e-15);
        // direction preserved
        assert!((out[2] / out[3] - 0.75).abs() < 1e-15);
        assert!((out[4] / out[5] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn primary_capsules_round_trip() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..2 * 16 * 3 * 3).map(|i| i as f64).collect();
        let maps = g.constant(Tensor::from_f64([2, 16, 3, 3], &data).unwrap());
        let caps = primary_capsules(&mut g, maps, 8).unwrap();
        assert_eq!(g.shape(caps), &[2, 18, 8]);
        // capsule (group 1, y 2, x 0) of image 1, component 5 = channel 13 at (2, 0)
        let idx = ((1 * 18) + (1 * 9 + 2 * 3)) * 8 + 5;
        assert_eq!(g.value(caps).data()[idx], data[((1 * 16 + 13) * 3 + 2) * 3]);
        let back = capsules_to_maps(&mut g, caps, 16, 3, 3).unwrap();
        assert_eq!(g.value(back).data(), data.as_slice());
        assert!(primary_capsules(&mut g, maps, 7).is_err());
    }

    #[test]
    fn identity_transform_replicates_poses() {
        // d_in = N * d_out with W = I: every vote is the capsule itself.
        let mut g = Graph::<f64>::new();
        let poses: Vec<f64> = (0..2 * 3 * 4).map(|i| (i as f64).sin()).collect();
        let caps = g.constant(Tensor::from_f64([2, 3, 4], &poses).unwrap());
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        let w = g.constant(Tensor::from_f64([1, 4, 4], &eye).unwrap());
        let votes = make_votes(&mut g, caps, w, 2, 2).unwrap();
        assert_eq!(g.shape(votes), &[2, 3, 2, 2]);
        assert_eq!(g.value(votes).data(), poses.as_slice());

        let zero_caps = g.constant(Tensor::zeros([2, 3, 4]));
        let wr = g.constant(Tensor::from_f64([3, 4, 4], &[0.3; 48]).unwrap());
        let zv = make_votes(&mut g, zero_caps, wr, 2, 2).unwrap();
        assert!(g.value(zv).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn routing_rejects_zero_iterations() {
        let mut g = Graph::<f64>::new();
        let votes = g.constant(Tensor::zeros([1, 2, 2, 2]));
        let opts = RoutingOptions { iterations: 0, ..Default::default() };
        assert!(matches!(dynamic_routing(&mut g, votes, None, opts), Err(Error::Argument { .. })));
    }

    #[test]
    fn identical_votes_keep_uniform_coefficients() {
        let mut g = Graph::<f64>::new();
        let vote = [0.3, -0.2, 0.5];
        let data: Vec<f64> = (0..2 * 5 * 4).flat_map(|_| vote).collect();
        let votes = g.constant(Tensor::from_f64([2, 5, 4, 3], &data).unwrap());
        let (out, state) =
            dynamic_routing(&mut g, votes, None, RoutingOptions { iterations: 4, ..Default::default() }).unwrap();
        for &c in &state.c_history {
            assert!(g.value(c).data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        }
        // s_j = sum_i (1/N) vote = (M/N) vote
        let common = g.constant(Tensor::from_f64([1, 3], &vote.map(|x| x * 5.0 / 4.0)).unwrap());
        let expect = squash(&mut g, common).unwrap();
        let e = g.value(expect).data().to_vec();
        for row in g.value(out.v).data().chunks(3) {
            for (a, b) in row.iter().zip(&e) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn no_routing_of_identical_and_zero_votes() {
        let mut g = Graph::<f64>::new();
        let vote = [1.0, 2.0];
        let data: Vec<f64> = (0..3 * 2).flat_map(|_| vote).collect();
        let votes = g.constant(Tensor::from_f64([1, 3, 2, 2], &data).unwrap());
        let out = no_routing_average(&mut g, votes, true).unwrap();
        let single = g.constant(Tensor::from_f64([1, 2], &vote).unwrap());
        let sq = squash(&mut g, single).unwrap();
        let e = g.value(sq).data().to_vec();
        for row in g.value(out.v).data().chunks(2) {
            assert_eq!(row, e.as_slice());
        }
        let z = g.constant(Tensor::zeros([2, 4, 3, 2]));
        let zo = no_routing_average(&mut g, z, true).unwrap();
        assert!(g.value(zo.v).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn margin_loss_examples() {
        let cases = [(1.0, 0.9, 0.0), (0.0, 0.1, 0.0), (1.0, 0.4, 0.25), (0.0, 0.5, 0.5 * 0.16)];
        for (t, len, expected) in cases {
            let mut g = Graph::<f64>::new();
            let l = g.constant(Tensor::from_f64([1, 1], &[len]).unwrap());
            let tt = Tensor::from_f64([1, 1], &[t]).unwrap();
            let loss = margin_loss(&mut g, l, &tt, &MarginLossParams::default()).unwrap();
            assert!((g.value(loss).item() - expected).abs() < 1e-15, "T={t} len={len}");
        }
    }

    #[test]
    fn margin_params_validated() {
        assert!(MarginLossParams::default().validate().is_ok());
        assert!(MarginLossParams { m_plus: 0.1, m_minus: 0.9, lambda: 0.5 }.validate().is_err());
    }

    #[test]
    fn masking_examples() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 2).map(|i| i as f64 + 1.0).collect();
        let v = g.constant(Tensor::from_f64([2, 3, 2], &data).unwrap());
        let m = mask_capsules(&mut g, v, &[1, 2]).unwrap();
        let out = g.value(m).data().to_vec();
        assert_eq!(&out[..6], &[0.0, 0.0, 3.0, 4.0, 0.0, 0.0]);
        assert_eq!(&out[6..], &[0.0, 0.0, 0.0, 0.0, 11.0, 12.0]);
        assert!(mask_capsules(&mut g, v, &[0, 3]).is_err());
        let z = g.constant(Tensor::zeros([2, 3, 2]));
        let zm = mask_capsules(&mut g, z, &[0, 0]).unwrap();
        assert!(g.value(zm).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let t = Tensor::<f64>::from_f64([2, 3], &[0.1, 0.1, 0.1, 0.0, 0.5, 0.5]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }
}
