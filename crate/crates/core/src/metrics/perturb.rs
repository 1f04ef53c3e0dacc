use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::capsule::argmax_rows;
use crate::data::ImageRecord;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, ReconstructionKind};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSweepSpec {
    /// Index into the `N * d_out` representation.
    pub dimension: usize,
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl PerturbationSweepSpec {
    /// `[-0.2, 0.2]` in steps of 0.05, for squashed capsule representations.
    pub fn capsule_default(dimension: usize) -> Self {
        PerturbationSweepSpec { dimension, lo: -0.2, hi: 0.2, step: 0.05 }
    }

    /// `[-8, 8]` in steps of 2, for unbounded activations.
    pub fn convnet_default(dimension: usize) -> Self {
        PerturbationSweepSpec { dimension, lo: -8.0, hi: 8.0, step: 2.0 }
    }

    pub fn default_for(spec: &ModelSpec, dimension: usize) -> Self {
        if spec.cfg.is_capsule_like() && spec.cfg.squash_enabled {
            Self::capsule_default(dimension)
        } else {
            Self::convnet_default(dimension)
        }
    }

    pub fn validate(&self, width: usize) -> Result<()> {
        if !(self.step > 0.0 && self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi) {
            return Err(Error::Config(format!("bad sweep range [{}, {}] step {}", self.lo, self.hi, self.step)));
        }
        if self.dimension >= width {
            return Err(Error::Config(format!("sweep dimension {} outside [0, {width})", self.dimension)));
        }
        Ok(())
    }

    pub fn columns(&self) -> usize {
        ((self.hi - self.lo) / self.step + 1e-9).floor() as usize + 1
    }

    /// Offsets `lo + k * step`; values within rounding of zero are exactly 0.
    pub fn deltas(&self) -> Vec<f64> {
        (0..self.columns())
            .map(|k| {
                let d = self.lo + k as f64 * self.step;
                if d.abs() < self.step * 1e-9 {
                    0.0
                } else {
                    d
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub predicted: usize,
    pub deltas: Vec<f64>,
    /// Reconstruction of the unperturbed representation.
    pub base: Vec<f32>,
    /// One reconstruction per delta.
    pub columns: Vec<Vec<f32>>,
}

/// Decodes the representation of `image` with one dimension offset by each
/// delta of the sweep. Conditional models mask to the predicted class first.
pub fn perturb_sweep<T: Scalar>(
    spec: &ModelSpec,
    store: &ParamStore<T>,
    image: &ImageRecord,
    sweep: &PerturbationSweepSpec,
) -> Result<SweepResult> {
    if !spec.has_decoder() {
        return Err(Error::Config(format!("{} has no reconstruction head", spec.cfg.arch_family)));
    }
    let width = spec.cfg.representation_width();
    sweep.validate(width)?;
    let side = spec.cfg.input_size;
    let px: Vec<T> = image.pixels.iter().map(|&v| T::from_f32(v).expect("finite")).collect();
    let inf = spec.infer(store, Tensor::new([1, 1, side, side], px)?)?;
    let predicted = argmax_rows(&inf.probs)[0];
    let mut rep = inf.representation.expect("decoder implies representation").into_data();
    if spec.cfg.reconstruction == ReconstructionKind::Conditional {
        let d = spec.cfg.d_out;
        for (j, x) in rep.iter_mut().enumerate() {
            if j / d != predicted {
                *x = T::zero();
            }
        }
    }
    let deltas = sweep.deltas();
    let mut batch = rep.clone();
    for &delta in &deltas {
        let mut row = rep.clone();
        row[sweep.dimension] += T::from_f64_lossy(delta);
        batch.extend(row);
    }
    let out = spec.decode_values(store, Tensor::new([deltas.len() + 1, width], batch)?)?;
    let pixels = side * side;
    let mut rows = out.data().chunks(pixels).map(|c| c.iter().map(|x| x.to_f32().unwrap()).collect::<Vec<f32>>());
    let base = rows.next().expect("base row");
    Ok(SweepResult { predicted, deltas, base, columns: rows.collect() })
}

/// Mean absolute pixel difference.
pub fn mean_abs_change(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>() / a.len() as f64
}

/// Grey-scale grid: `rows[r][c]` is a `side x side` image in `[0, 1]`,
/// separated by `gap` black pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn compose_grid(rows: &[Vec<Vec<f32>>], side: usize, gap: usize) -> Grid {
    let ncols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let width = ncols * side + ncols.saturating_sub(1) * gap;
    let height = rows.len() * side + rows.len().saturating_sub(1) * gap;
    let mut pixels = vec![0u8; width * height];
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            let (oy, ox) = (r * (side + gap), c * (side + gap));
            for y in 0..side {
                for x in 0..side {
                    let v = (img[y * side + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                    pixels[(oy + y) * width + ox + x] = v;
                }
            }
        }
    }
    Grid { width, height, pixels }
}

impl Grid {
    /// Binary PGM (`P5`, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(f), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let fail = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
        let mut w = enc.write_header().map_err(fail)?;
        w.write_image_data(&self.pixels).map_err(fail)?;
        w.finish().map_err(fail)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn column_counts() {
        let s = PerturbationSweepSpec::capsule_default(0);
        assert_eq!(s.columns(), 9);
        assert_eq!(s.deltas()[4], 0.0);
        assert_eq!(PerturbationSweepSpec::convnet_default(0).deltas(), vec![-8.0, -6.0, -4.0, -2.0, 0.0, 2.0, 4.0, 6.0, 8.0]);
        let odd = PerturbationSweepSpec { dimension: 0, lo: 0.0, hi: 1.0, step: 0.3 };
        assert_eq!(odd.columns(), 4);
        assert!(PerturbationSweepSpec { step: 0.0, ..odd }.validate(160).is_err());
        assert!(PerturbationSweepSpec { dimension: 160, ..odd }.validate(160).is_err());
    }

    #[test]
    fn grid_layout_and_pgm_header() {
        let img = vec![1.0f32; 4];
        let g = compose_grid(&[vec![img.clone(), img.clone(), img]], 2, 1);
        assert_eq!((g.width, g.height), (8, 2));
        assert_eq!(&g.pixels[..8], &[255, 255, 0, 255, 255, 0, 255, 255]);
        assert!(g.to_pgm().starts_with(b"P5\n8 2\n255\n"));
    }
}
