use super::config::{ArchFamily, LossKind, ReconstructionKind, RoutingKind};
use super::spec::{ModelSpec, TRANSFORM_NAME};
use crate::autodiff::{Graph, Var};
use crate::capsule::{self, RoutingOptions, RoutingState};
use crate::error::{Error, Result};
use crate::nn::{global_avg_pool, BoundParams, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    /// Unbounded class scores.
    Logits,
    /// Output-capsule lengths.
    Lengths,
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub kind: ScoreKind,
    /// `[B, N]` logits or lengths.
    pub scores: Var,
    /// `[B, N]` class probabilities.
    pub probs: Var,
    /// `[B, N * d_out]` representation feeding the reconstruction head.
    pub representation: Option<Var>,
    pub routing: Option<RoutingState>,
}

/// Supervision for one batch.
#[derive(Debug, Clone)]
pub struct Targets<T> {
    /// One or two class ids per record.
    pub labels: Vec<Vec<usize>>,
    /// `[B, S * S]` input images (reconstruction target for `normal`).
    pub images: Tensor<T>,
    /// `[B, 2, S * S]` per-digit targets for two-label records.
    pub components: Option<Tensor<T>>,
}

impl<T: Scalar> Targets<T> {
    /// Multi-hot `[B, N]`.
    pub fn multi_hot(&self, n: usize) -> Result<Tensor<T>> {
        let mut t = Tensor::zeros([self.labels.len(), n]);
        for (b, ls) in self.labels.iter().enumerate() {
            for &l in ls {
                if l >= n {
                    return Err(Error::arg("targets", format!("label {l} out of range [0, {n})")));
                }
                t.data_mut()[b * n + l] = T::one();
            }
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub classification: Var,
    /// Unscaled reconstruction error (summed over heads).
    pub reconstruction: Option<Var>,
}

impl ModelSpec {
    /// Classification pass on `[B, 1, S, S]` images.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &BoundParams, images: Var) -> Result<Forward> {
        let cfg = &self.cfg;
        let s = g.shape(images).to_vec();
        if s.len() != 4 || s[1] != 1 || s[2] != cfg.input_size || s[3] != cfg.input_size {
            return Err(Error::dim("model_forward", &s, &[0, 1, cfg.input_size, cfg.input_size]));
        }
        let bsz = s[0];
        let (n, d) = (cfg.num_classes, cfg.d_out);
        let mut h = images;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.apply(g, p, &Self::conv_name(i), h)?;
            h = g.relu(h)?;
        }
        let flat_len: usize = g.shape(h)[1..].iter().product();
        let fc = |g: &mut Graph<T>, i: usize, x: Var| self.fcs[i].apply(g, p, &Self::fc_name(i), x);

        let mut routing = None;
        let (kind, scores, representation) = match cfg.arch_family {
            ArchFamily::ConvnetFc => {
                let mut x = g.reshape(h, &[bsz, flat_len])?;
                for i in 0..2 {
                    x = fc(g, i, x)?;
                    x = g.relu(x)?;
                }
                (ScoreKind::Logits, fc(g, 2, x)?, None)
            }
            ArchFamily::ConvnetAvg => {
                let pooled = global_avg_pool(g, h)?;
                (ScoreKind::Logits, fc(g, 0, pooled)?, None)
            }
            ArchFamily::ConvnetR => {
                let x = g.reshape(h, &[bsz, flat_len])?;
                let rep = fc(g, 0, x)?;
                (ScoreKind::Logits, fc(g, 1, rep)?, Some(rep))
            }
            ArchFamily::ConvnetCr => {
                let x = g.reshape(h, &[bsz, flat_len])?;
                let rep = fc(g, 0, x)?;
                let groups = g.reshape(rep, &[bsz, n, d])?;
                (ScoreKind::Logits, g.sum(groups, &[2])?, Some(rep))
            }
            ArchFamily::ConvnetCrSf => {
                let mut caps = capsule::primary_capsules(g, h, cfg.d_in)?;
                if cfg.squash_enabled {
                    caps = capsule::squash(g, caps)?;
                }
                let x = g.reshape(caps, &[bsz, flat_len])?;
                let pre = fc(g, 0, x)?;
                let mut v = g.reshape(pre, &[bsz, n, d])?;
                if cfg.squash_enabled {
                    v = capsule::squash(g, v)?;
                }
                let lengths = g.l2_norm_lastaxis(v)?;
                (ScoreKind::Lengths, lengths, Some(g.reshape(v, &[bsz, n * d])?))
            }
            ArchFamily::Capsnet => {
                let mut caps = capsule::primary_capsules(g, h, cfg.d_in)?;
                if cfg.squash_enabled {
                    caps = capsule::squash(g, caps)?;
                }
                let w = p.var(TRANSFORM_NAME)?;
                let votes = capsule::make_votes(g, caps, w, n, d)?;
                let out = match cfg.routing {
                    RoutingKind::Dynamic => {
                        let opts = RoutingOptions {
                            iterations: cfg.routing_iterations,
                            squash: cfg.squash_enabled,
                            detach_coefficients: cfg.detach_routing,
                        };
                        let (out, state) = capsule::dynamic_routing(g, votes, None, opts)?;
                        routing = Some(state);
                        out
                    }
                    RoutingKind::None => capsule::no_routing_average(g, votes, cfg.squash_enabled)?,
                };
                (ScoreKind::Lengths, out.lengths, Some(g.reshape(out.v, &[bsz, n * d])?))
            }
        };

        let probs = match (kind, cfg.loss) {
            (_, LossKind::CrossEntropy) => g.softmax(scores, 1)?,
            (ScoreKind::Logits, _) => g.sigmoid(scores)?,
            (ScoreKind::Lengths, _) => scores,
        };
        Ok(Forward { kind, scores, probs, representation, routing })
    }

    /// Reconstruction head: `[B, N * d_out] -> [B, S * S]`.
    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, p: &BoundParams, rep: Var) -> Result<Var> {
        if !self.has_decoder() {
            return Err(Error::Config(format!("{} has no reconstruction head", self.cfg.arch_family)));
        }
        let mut x = rep;
        let last = self.decoder.len() - 1;
        for (i, layer) in self.decoder.iter().enumerate() {
            x = layer.apply(g, p, &Self::decoder_name(i), x)?;
            x = if i == last { g.sigmoid(x)? } else { g.relu(x)? };
        }
        Ok(x)
    }

    /// Decoder input for the given classes: the class-masked representation
    /// under conditional reconstruction, the full representation otherwise.
    pub fn decoder_input<T: Scalar>(&self, g: &mut Graph<T>, rep: Var, classes: &[usize]) -> Result<Var> {
        match self.cfg.reconstruction {
            ReconstructionKind::Conditional => {
                let bsz = g.shape(rep)[0];
                let grouped = g.reshape(rep, &[bsz, self.cfg.num_classes, self.cfg.d_out])?;
                capsule::mask_capsules(g, grouped, classes)
            }
            _ => Ok(rep),
        }
    }

    /// Classification loss plus the scaled reconstruction error.
    pub fn loss<T: Scalar>(&self, g: &mut Graph<T>, p: &BoundParams, fwd: &Forward, targets: &Targets<T>) -> Result<LossParts> {
        let cfg = &self.cfg;
        let n = cfg.num_classes;
        let bsz = g.shape(fwd.scores)[0];
        if targets.labels.len() != bsz {
            return Err(Error::dim("model_loss", &[bsz], &[targets.labels.len()]));
        }
        let hot = targets.multi_hot(n)?;
        let classification = match cfg.loss {
            LossKind::Margin => capsule::margin_loss(g, fwd.probs, &hot, &cfg.margin)?,
            LossKind::BinaryCrossEntropy => {
                let t = g.constant(hot);
                let per = g.binary_cross_entropy(fwd.probs, t)?;
                let per_sample = g.sum(per, &[1])?;
                g.mean(per_sample, &[0])?
            }
            LossKind::CrossEntropy => {
                let mut dist = hot;
                for (row, ls) in dist.data_mut().chunks_mut(n).zip(&targets.labels) {
                    let k = T::from_usize(ls.len()).expect("small count");
                    row.iter_mut().for_each(|x| *x /= k);
                }
                let t = g.constant(dist);
                let logp = g.log_softmax(fwd.scores, 1)?;
                let prod = g.mul(t, logp)?;
                let per_sample = g.sum(prod, &[1])?;
                let mean = g.mean(per_sample, &[0])?;
                g.mul_scalar(mean, -1.0)?
            }
        };

        let reconstruction = match (cfg.reconstruction, fwd.representation) {
            (ReconstructionKind::None, _) => None,
            (_, None) => return Err(Error::Config("reconstruction requested without a representation".into())),
            (ReconstructionKind::Normal, Some(rep)) => {
                let recon = self.decode(g, p, rep)?;
                Some(sse(g, recon, targets.images.clone())?)
            }
            (ReconstructionKind::Conditional, Some(rep)) => {
                let slots = targets.labels.iter().map(Vec::len).max().unwrap_or(0);
                if targets.labels.iter().any(|l| l.len() != slots) {
                    return Err(Error::arg("model_loss", "records in a batch must carry equally many labels"));
                }
                let mut acc: Option<Var> = None;
                for slot in 0..slots {
                    let classes: Vec<usize> = targets.labels.iter().map(|l| l[slot]).collect();
                    let input = self.decoder_input(g, rep, &classes)?;
                    let recon = self.decode(g, p, input)?;
                    let target = if slots == 1 {
                        targets.images.clone()
                    } else {
                        component_slot(targets, slot)?
                    };
                    let err = sse(g, recon, target)?;
                    acc = Some(match acc {
                        None => err,
                        Some(a) => g.add(a, err)?,
                    });
                }
                acc
            }
        };

        let total = match reconstruction {
            Some(r) => {
                let scaled = g.mul_scalar(r, cfg.recon_loss_scale)?;
                g.add(classification, scaled)?
            }
            None => classification,
        };
        Ok(LossParts { total, classification, reconstruction })
    }
}

/// Forward values of one inference pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference<T> {
    pub probs: Tensor<T>,
    pub representation: Option<Tensor<T>>,
}

impl ModelSpec {
    /// Probabilities and representation for `[B, 1, S, S]` images, on a
    /// throw-away graph.
    pub fn infer<T: Scalar>(&self, store: &ParamStore<T>, images: Tensor<T>) -> Result<Inference<T>> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(images);
        let f = self.forward(&mut g, &p, x)?;
        Ok(Inference {
            probs: g.value(f.probs).clone(),
            representation: f.representation.map(|r| g.value(r).clone()),
        })
    }

    /// Decoder output `[B, S * S]` for a decoder-input batch `[B, N * d_out]`.
    pub fn decode_values<T: Scalar>(&self, store: &ParamStore<T>, input: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(input);
        let y = self.decode(&mut g, &p, x)?;
        Ok(g.value(y).clone())
    }
}

/// Sum of squared pixel errors per image, averaged over the batch.
fn sse<T: Scalar>(g: &mut Graph<T>, recon: Var, target: Tensor<T>) -> Result<Var> {
    let t = g.constant(target);
    let diff = g.sub(recon, t)?;
    let sq = g.square(diff)?;
    let per_image = g.sum(sq, &[1])?;
    g.mean(per_image, &[0])
}

fn component_slot<T: Scalar>(targets: &Targets<T>, slot: usize) -> Result<Tensor<T>> {
    let comps = targets
        .components
        .as_ref()
        .ok_or_else(|| Error::arg("model_loss", "two-label records need per-digit reconstruction targets"))?;
    let s = comps.shape();
    if s.len() != 3 || s[1] <= slot {
        return Err(Error::shape("model_loss", format!("components must be [B, 2, P], got {s:?}")));
    }
    let (bsz, k, px) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(bsz * px);
    for b in 0..bsz {
        out.extend_from_slice(&comps.data()[(b * k + slot) * px..(b * k + slot + 1) * px]);
    }
    Tensor::new([bsz, px], out)
}
