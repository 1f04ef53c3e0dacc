//! Semantic compactness: how concentrated the variation of a class
//! representation is when one latent factor of the input is swept.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{apply_affine, AffineParams, ImageRecord, ROTATION_RANGE, SCALE_RANGE, SHEAR_RANGE, TRANSLATE_RANGE};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    Rotation,
    TransX,
    TransY,
    Scale,
    ShearX,
    ShearY,
}

impl Factor {
    pub const ALL: [Factor; 6] = [Factor::Rotation, Factor::TransX, Factor::TransY, Factor::Scale, Factor::ShearX, Factor::ShearY];

    pub fn name(self) -> &'static str {
        match self {
            Factor::Rotation => "rotation",
            Factor::TransX => "trans_x",
            Factor::TransY => "trans_y",
            Factor::Scale => "scale",
            Factor::ShearX => "shear_x",
            Factor::ShearY => "shear_y",
        }
    }

    pub fn range(self) -> (f64, f64) {
        match self {
            Factor::Rotation => ROTATION_RANGE,
            Factor::TransX | Factor::TransY => TRANSLATE_RANGE,
            Factor::Scale => SCALE_RANGE,
            Factor::ShearX | Factor::ShearY => SHEAR_RANGE,
        }
    }

    /// Identity transform with this factor set to `v`. Scale acts on both axes.
    pub fn params(self, v: f64) -> AffineParams {
        let id = AffineParams::IDENTITY;
        match self {
            Factor::Rotation => AffineParams { rotation_deg: v, ..id },
            Factor::TransX => AffineParams { translate_x_px: v, ..id },
            Factor::TransY => AffineParams { translate_y_px: v, ..id },
            Factor::Scale => AffineParams { scale_x: v, scale_y: v, ..id },
            Factor::ShearX => AffineParams { shear_x_deg: v, ..id },
            Factor::ShearY => AffineParams { shear_y_deg: v, ..id },
        }
    }

    /// `n` evenly spaced settings spanning the factor's full range.
    pub fn variations(self, n: usize) -> Result<Vec<AffineParams>> {
        if n < 2 {
            return Err(Error::Config(format!("compactness needs >= 2 variations, got {n}")));
        }
        let (lo, hi) = self.range();
        Ok((0..n).map(|k| self.params(lo + (hi - lo) * k as f64 / (n - 1) as f64)).collect())
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Factor {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Factor::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown factor {s:?}")))
    }
}

pub const DEFAULT_VARIATIONS: usize = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompactnessReport {
    pub factor: Factor,
    /// Mean KL divergence in nats, in `[0, ln d_out]`.
    pub score: f64,
    pub n_images: usize,
    pub n_variations: usize,
    /// Images whose representation did not vary at all.
    pub n_skipped: usize,
    pub d_out: usize,
}

/// `KL(Var / sum(Var) || uniform)` in nats, `0 ln 0 = 0`. `None` when every
/// variance is zero.
pub fn kl_to_uniform(var: &[f64]) -> Option<f64> {
    let total: f64 = var.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let d = var.len() as f64;
    Some(
        var.iter()
            .map(|&v| {
                let q = v / total;
                if q > 0.0 {
                    q * (d * q).ln()
                } else {
                    0.0
                }
            })
            .sum(),
    )
}

/// Population variance of every dimension across `vectors`.
pub fn dimension_variance(vectors: &[Vec<f64>]) -> Vec<f64> {
    let n = vectors.len() as f64;
    let d = vectors[0].len();
    (0..d)
        .map(|j| {
            let mean = vectors.iter().map(|v| v[j]).sum::<f64>() / n;
            vectors.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>() / n
        })
        .collect()
}

/// Mean score over images, given each image's representation vectors across
/// the sweep. Returns `(score, images used, images skipped)`.
pub fn compactness_from_vectors(per_image: &[Vec<Vec<f64>>]) -> (f64, usize, usize) {
    let mut sum = 0.0;
    let (mut used, mut skipped) = (0, 0);
    for vecs in per_image {
        match kl_to_uniform(&dimension_variance(vecs)) {
            Some(s) => {
                sum += s;
                used += 1;
            }
            None => skipped += 1,
        }
    }
    let score = if used == 0 { 0.0 } else { sum / used as f64 };
    (score, used, skipped)
}

/// Sweeps `factor` over every (untransformed, 40x40) image, keeps the
/// ground-truth class's `d_out` group of the representation for each
/// variant, and averages the per-image compactness.
pub fn compactness_score<T: Scalar>(
    spec: &ModelSpec,
    store: &ParamStore<T>,
    images: &[ImageRecord],
    factor: Factor,
    n_variations: usize,
) -> Result<CompactnessReport> {
    let variations = factor.variations(n_variations)?;
    if !spec.cfg.has_representation() {
        return Err(Error::Config(format!("{} has no class representation", spec.cfg.arch_family)));
    }
    let d = spec.cfg.d_out;
    let side = spec.cfg.input_size;
    let per_chunk = (128 / n_variations).max(1);
    let mut per_image = Vec::with_capacity(images.len());
    for chunk in images.chunks(per_chunk) {
        let mut pixels = Vec::with_capacity(chunk.len() * n_variations * side * side);
        for rec in chunk {
            if rec.side != side {
                return Err(Error::Data(format!("image side {} does not match model input {side}", rec.side)));
            }
            for p in &variations {
                pixels.extend(apply_affine(&rec.pixels, side, p).into_iter().map(|v| T::from_f32(v).expect("finite")));
            }
        }
        let batch = Tensor::new([chunk.len() * n_variations, 1, side, side], pixels)?;
        let rep = spec.infer(store, batch)?.representation.expect("checked above");
        let width = rep.shape()[1];
        for (i, rec) in chunk.iter().enumerate() {
            let k = rec.labels[0] as usize;
            let vecs = (0..n_variations)
                .map(|v| {
                    let row = &rep.data()[(i * n_variations + v) * width..][..width];
                    row[k * d..(k + 1) * d].iter().map(|x| x.to_f64().unwrap()).collect()
                })
                .collect();
            per_image.push(vecs);
        }
    }
    let (score, used, skipped) = compactness_from_vectors(&per_image);
    Ok(CompactnessReport { factor, score, n_images: used, n_variations, n_skipped: skipped, d_out: d })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_extremes() {
        let mut one_hot = vec![0.0; 16];
        one_hot[5] = 2.5;
        assert!((kl_to_uniform(&one_hot).unwrap() - 16f64.ln()).abs() < 1e-12);
        assert!(kl_to_uniform(&[0.3; 16]).unwrap().abs() < 1e-12);
        assert_eq!(kl_to_uniform(&[0.0; 16]), None);
    }

    #[test]
    fn rotation_grid_steps_by_four_degrees() {
        let v = Factor::Rotation.variations(11).unwrap();
        let angles: Vec<f64> = v.iter().map(|p| p.rotation_deg).collect();
        assert_eq!(angles, (-5..=5).map(|k| 4.0 * k as f64).collect::<Vec<_>>());
        assert!(Factor::Scale.variations(1).is_err());
        assert!(v.iter().all(AffineParams::in_range));
    }

    #[test]
    fn constant_images_are_skipped() {
        let same = vec![vec![1.0, 2.0]; 3];
        let varied = vec![vec![0.0, 0.0], vec![1.0, 0.0]];
        let (score, used, skipped) = compactness_from_vectors(&[same, varied]);
        assert_eq!((used, skipped), (1, 1));
        assert!((score - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn factor_names_round_trip() {
        for f in Factor::ALL {
            assert_eq!(f.name().parse::<Factor>().unwrap(), f);
        }
    }
}
