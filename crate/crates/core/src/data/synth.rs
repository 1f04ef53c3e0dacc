//! Deterministic dataset synthesis: training canvases, affine test sets and
//! overlapping-digit pairs. Record `i` of every generator draws only from its
//! own `(seed, tag, i)` stream, so records can be produced in any order.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::idx::MnistSet;
use super::record::{ImageRecord, RecordSource};
use crate::error::{Error, Result};
use crate::seed::SeedScheme;

pub const DIGIT_SIDE: usize = 28;
pub const AFFNIST_SIDE: usize = 40;
pub const MULTIMNIST_SIDE: usize = 36;
/// Largest placement offset of a 28x28 digit on a 40x40 canvas.
pub const CANVAS_SLACK: usize = AFFNIST_SIDE - DIGIT_SIDE;
pub const MULTIMNIST_SHIFT: i64 = 4;

/// Copies a `src_side` square image onto a blank `side` canvas with its top
/// left corner at `(x, y)`. Parts falling off the canvas are dropped.
pub fn place(src: &[f32], src_side: usize, side: usize, x: i64, y: i64) -> Vec<f32> {
    let mut out = vec![0.0; side * side];
    for r in 0..src_side {
        let ty = y + r as i64;
        if !(0..side as i64).contains(&ty) {
            continue;
        }
        for c in 0..src_side {
            let tx = x + c as i64;
            if (0..side as i64).contains(&tx) {
                out[ty as usize * side + tx as usize] = src[r * src_side + c];
            }
        }
    }
    out
}

/// A 28x28 digit at a uniformly drawn integer position on a 40x40 canvas.
pub fn make_train_canvas(img28: &[f32], rng: &mut impl Rng) -> (Vec<f32>, (usize, usize)) {
    let x = rng.gen_range(0..=CANVAS_SLACK);
    let y = rng.gen_range(0..=CANVAS_SLACK);
    (place(img28, DIGIT_SIDE, AFFNIST_SIDE, x as i64, y as i64), (x, y))
}

/// A 28x28 digit padded by 6 pixels on every side.
pub fn centered_canvas(img28: &[f32]) -> Vec<f32> {
    let pad = (CANVAS_SLACK / 2) as i64;
    place(img28, DIGIT_SIDE, AFFNIST_SIDE, pad, pad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotation_deg: f64,
    pub shear_x_deg: f64,
    pub shear_y_deg: f64,
    pub scale_x: f64,
    pub scale_y: f64,
    pub translate_x_px: f64,
    pub translate_y_px: f64,
}

pub const ROTATION_RANGE: (f64, f64) = (-20.0, 20.0);
pub const SHEAR_RANGE: (f64, f64) = (-45.0, 45.0);
pub const SCALE_RANGE: (f64, f64) = (0.8, 1.2);
pub const TRANSLATE_RANGE: (f64, f64) = (-8.0, 8.0);

impl Default for AffineParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        rotation_deg: 0.0,
        shear_x_deg: 0.0,
        shear_y_deg: 0.0,
        scale_x: 1.0,
        scale_y: 1.0,
        translate_x_px: 0.0,
        translate_y_px: 0.0,
    };

    pub fn sample(rng: &mut impl Rng) -> Self {
        let mut u = |(lo, hi): (f64, f64)| rng.gen_range(lo..=hi);
        AffineParams {
            rotation_deg: u(ROTATION_RANGE),
            shear_x_deg: u(SHEAR_RANGE),
            shear_y_deg: u(SHEAR_RANGE),
            scale_x: u(SCALE_RANGE),
            scale_y: u(SCALE_RANGE),
            translate_x_px: u(TRANSLATE_RANGE),
            translate_y_px: u(TRANSLATE_RANGE),
        }
    }

    pub fn in_range(&self) -> bool {
        let within = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
        within(self.rotation_deg, ROTATION_RANGE)
            && within(self.shear_x_deg, SHEAR_RANGE)
            && within(self.shear_y_deg, SHEAR_RANGE)
            && within(self.scale_x, SCALE_RANGE)
            && within(self.scale_y, SCALE_RANGE)
            && within(self.translate_x_px, TRANSLATE_RANGE)
            && within(self.translate_y_px, TRANSLATE_RANGE)
    }

    /// Linear part `R * Shear * Scale` acting on `(x, y)` column vectors,
    /// `x` to the right and `y` downwards.
    pub fn linear(&self) -> [[f64; 2]; 2] {
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        let a = self.shear_x_deg.to_radians().tan();
        let b = self.shear_y_deg.to_radians().tan();
        let shear = [[1.0, a], [b, 1.0 + a * b]];
        let rot = [[cos, -sin], [sin, cos]];
        let scale = [[self.scale_x, 0.0], [0.0, self.scale_y]];
        mat_mul(rot, mat_mul(shear, scale))
    }
}

fn mat_mul(p: [[f64; 2]; 2], q: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = p[i][0] * q[0][j] + p[i][1] * q[1][j];
        }
    }
    out
}

/// Inverse-warps a square image about its centre with bilinear sampling.
/// Samples outside the source read as 0; the result is clamped to `[0, 1]`.
pub fn apply_affine(img: &[f32], side: usize, p: &AffineParams) -> Vec<f32> {
    let m = p.linear();
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
    let c = (side as f64 - 1.0) / 2.0;
    let at = |r: i64, col: i64| -> f64 {
        if (0..side as i64).contains(&r) && (0..side as i64).contains(&col) {
            img[r as usize * side + col as usize] as f64
        } else {
            0.0
        }
    };
    let mut out = vec![0.0f32; side * side];
    for yo in 0..side {
        for xo in 0..side {
            let dx = xo as f64 - c - p.translate_x_px;
            let dy = yo as f64 - c - p.translate_y_px;
            let xs = inv[0][0] * dx + inv[0][1] * dy + c;
            let ys = inv[1][0] * dx + inv[1][1] * dy + c;
            let (x0, y0) = (xs.floor(), ys.floor());
            let (fx, fy) = (xs - x0, ys - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
            let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
            let v = top * (1.0 - fy) + bottom * fy;
            out[yo * side + xo] = v.clamp(0.0, 1.0) as f32;
        }
    }
    out
}

pub const TRAIN_CANVAS_TAG: &str = "train_canvas";
pub const AFFNIST_TAG: &str = "affnist";

/// Every digit on a randomly positioned 40x40 canvas. Placement is drawn once
/// per record and stays fixed across epochs.
pub fn gen_train_canvases(digits: &MnistSet, seeds: &SeedScheme) -> Vec<ImageRecord> {
    (0..digits.len())
        .map(|i| {
            let mut rng = seeds.stream(TRAIN_CANVAS_TAG, i as u64);
            let (px, _) = make_train_canvas(&digits.image_f32(i), &mut rng);
            ImageRecord::single(AFFNIST_SIDE, px, digits.label(i))
        })
        .collect()
}

/// Every digit padded to 40x40 with no further transformation.
pub fn gen_centered(digits: &MnistSet) -> Vec<ImageRecord> {
    (0..digits.len())
        .map(|i| ImageRecord::single(AFFNIST_SIDE, centered_canvas(&digits.image_f32(i)), digits.label(i)))
        .collect()
}

/// Affine test set: `variants` warped copies of every padded test digit,
/// record `i * variants + v` holding variant `v` of digit `i`.
pub fn gen_affnist_test(digits: &MnistSet, seeds: &SeedScheme, variants: usize) -> Result<Vec<(ImageRecord, AffineParams)>> {
    if variants == 0 {
        return Err(Error::Config("data.variants_per_test_image must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(digits.len() * variants);
    for i in 0..digits.len() {
        let base = centered_canvas(&digits.image_f32(i));
        for v in 0..variants {
            let idx = (i * variants + v) as u64;
            let p = AffineParams::sample(&mut seeds.stream(AFFNIST_TAG, idx));
            let px = apply_affine(&base, AFFNIST_SIDE, &p);
            out.push((ImageRecord::single(AFFNIST_SIDE, px, digits.label(i)), p));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> &'static str {
        match self {
            Split::Train => "multimnist/train",
            Split::Test => "multimnist/test",
        }
    }
}

/// Overlapping-digit pairs generated on demand. Record `i` overlays digit
/// `i / pairs_per_image`, shifted by up to 4 pixels on a 36x36 canvas, with a
/// digit of a different class from the same split, shifted independently.
#[derive(Debug, Clone)]
pub struct MultiMnist {
    digits: Arc<MnistSet>,
    split: Split,
    pairs_per_image: usize,
    seeds: SeedScheme,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairLayout {
    pub base: usize,
    pub partner: usize,
    pub base_shift: (i64, i64),
    pub partner_shift: (i64, i64),
}

impl MultiMnist {
    pub fn new(digits: Arc<MnistSet>, split: Split, pairs_per_image: usize, seeds: SeedScheme) -> Result<Self> {
        if !(1..=1000).contains(&pairs_per_image) {
            return Err(Error::Config(format!("data.pairs_per_image must be in [1, 1000], got {pairs_per_image}")));
        }
        if digits.rows != DIGIT_SIDE || digits.cols != DIGIT_SIDE {
            return Err(Error::Data(format!("expected 28x28 digits, got {}x{}", digits.rows, digits.cols)));
        }
        let first = digits.labels.first().copied();
        if digits.labels.iter().all(|&l| Some(l) == first) {
            return Err(Error::Data("pairing needs digits of at least two classes".into()));
        }
        Ok(MultiMnist { digits, split, pairs_per_image, seeds })
    }

    pub fn layout(&self, i: usize) -> PairLayout {
        let mut rng = self.seeds.stream(self.split.tag(), i as u64);
        let base = i / self.pairs_per_image;
        let shift = |rng: &mut rand_chacha::ChaCha8Rng| {
            (rng.gen_range(-MULTIMNIST_SHIFT..=MULTIMNIST_SHIFT), rng.gen_range(-MULTIMNIST_SHIFT..=MULTIMNIST_SHIFT))
        };
        let base_shift = shift(&mut rng);
        let partner = loop {
            let j = rng.gen_range(0..self.digits.len());
            if self.digits.label(j) != self.digits.label(base) {
                break j;
            }
        };
        let partner_shift = shift(&mut rng);
        PairLayout { base, partner, base_shift, partner_shift }
    }

    fn shifted(&self, digit: usize, (dx, dy): (i64, i64)) -> Vec<f32> {
        let pad = MULTIMNIST_SHIFT;
        place(&self.digits.image_f32(digit), DIGIT_SIDE, MULTIMNIST_SIDE, pad + dx, pad + dy)
    }
}

/// Pixel-wise maximum of two canvases.
pub fn overlay(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(&x, &y)| x.max(y)).collect()
}

impl RecordSource for MultiMnist {
    fn len(&self) -> usize {
        self.digits.len() * self.pairs_per_image
    }
    fn side(&self) -> usize {
        MULTIMNIST_SIDE
    }
    fn labels_per_record(&self) -> usize {
        2
    }
    fn has_components(&self) -> bool {
        true
    }
    fn get(&self, i: usize) -> ImageRecord {
        let l = self.layout(i);
        let a = self.shifted(l.base, l.base_shift);
        let b = self.shifted(l.partner, l.partner_shift);
        ImageRecord {
            side: MULTIMNIST_SIDE,
            pixels: overlay(&a, &b),
            labels: vec![self.digits.label(l.base), self.digits.label(l.partner)],
            components: Some([a, b]),
        }
    }
}
