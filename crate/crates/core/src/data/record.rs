use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::Targets;
use crate::scalar::Scalar;
use crate::seed::SeedScheme;
use crate::tensor::Tensor;

/// One square grey-scale image with one or two labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub side: usize,
    /// Row-major, values in `[0, 1]`.
    pub pixels: Vec<f32>,
    pub labels: Vec<u8>,
    /// Per-digit images of a two-digit composite.
    pub components: Option<[Vec<f32>; 2]>,
}

impl ImageRecord {
    pub fn single(side: usize, pixels: Vec<f32>, label: u8) -> Self {
        ImageRecord { side, pixels, labels: vec![label], components: None }
    }
}

/// Random-access collection of records, possibly generated on demand.
pub trait RecordSource: Send + Sync {
    fn len(&self) -> usize;
    fn side(&self) -> usize;
    fn labels_per_record(&self) -> usize;
    fn has_components(&self) -> bool;
    fn get(&self, i: usize) -> ImageRecord;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fully materialized records.
#[derive(Debug, Clone, PartialEq)]
pub struct InMemory {
    side: usize,
    labels_per_record: usize,
    has_components: bool,
    records: Vec<ImageRecord>,
}

impl InMemory {
    pub fn new(records: Vec<ImageRecord>) -> Result<Self> {
        let first = records.first().ok_or_else(|| Error::Data("empty dataset".into()))?;
        let (side, lpr, comp) = (first.side, first.labels.len(), first.components.is_some());
        for (i, r) in records.iter().enumerate() {
            if r.side != side || r.labels.len() != lpr || r.components.is_some() != comp || r.pixels.len() != side * side {
                return Err(Error::Data(format!("record {i} is inconsistent with record 0")));
            }
        }
        Ok(InMemory { side, labels_per_record: lpr, has_components: comp, records })
    }

    pub fn from_source(src: &dyn RecordSource) -> Result<Self> {
        InMemory::new((0..src.len()).map(|i| src.get(i)).collect())
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }
}

impl RecordSource for InMemory {
    fn len(&self) -> usize {
        self.records.len()
    }
    fn side(&self) -> usize {
        self.side
    }
    fn labels_per_record(&self) -> usize {
        self.labels_per_record
    }
    fn has_components(&self) -> bool {
        self.has_components
    }
    fn get(&self, i: usize) -> ImageRecord {
        self.records[i].clone()
    }
}

/// Index batches for one epoch: a permutation drawn from the
/// `("shuffle", epoch)` stream, cut into `batch_size` chunks. The final
/// partial batch is kept.
pub fn batch_iter(n: usize, batch_size: usize, seeds: &SeedScheme, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeds.stream("shuffle", epoch));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Sequential batches without shuffling, for evaluation.
pub fn sequential_batches(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..n).collect::<Vec<_>>().chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Images `[B, 1, S, S]` and supervision for the given records.
pub fn make_batch<T: Scalar>(src: &dyn RecordSource, idx: &[usize]) -> (Tensor<T>, Targets<T>) {
    let (s, b) = (src.side(), idx.len());
    let px = s * s;
    let mut images = Vec::with_capacity(b * px);
    let mut labels = Vec::with_capacity(b);
    let mut comps = src.has_components().then(|| Vec::with_capacity(b * 2 * px));
    for &i in idx {
        let r = src.get(i);
        images.extend(r.pixels.iter().map(|&p| T::from_f32(p).expect("finite pixel")));
        labels.push(r.labels.iter().map(|&l| l as usize).collect());
        if let (Some(out), Some(parts)) = (comps.as_mut(), r.components.as_ref()) {
            for part in parts {
                out.extend(part.iter().map(|&p| T::from_f32(p).expect("finite pixel")));
            }
        }
    }
    let flat = Tensor::new([b, px], images).expect("batch shape");
    let x = flat.clone().reshape([b, 1, s, s]).expect("batch shape");
    let components = comps.map(|c| Tensor::new([b, 2, px], c).expect("component shape"));
    (x, Targets { labels, images: flat, components })
}
