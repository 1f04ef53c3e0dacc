//! MNIST ingestion and dataset synthesis.

mod capsds;
mod idx;
mod record;
mod synth;

use std::path::{Path, PathBuf};
use std::sync::Arc;

pub use capsds::{file_sha256, hex, load_capsds, read_capsds, save_capsds, write_capsds, CAPSDS_MAGIC};
pub use idx::{load_mnist_idx, parse_idx_header, parse_mnist, read_maybe_gzip, IdxHeader, MnistSet, IMAGES_MAGIC, LABELS_MAGIC};
pub use record::{batch_iter, make_batch, sequential_batches, ImageRecord, InMemory, RecordSource};
pub use synth::{
    apply_affine, centered_canvas, gen_affnist_test, gen_centered, gen_train_canvases, make_train_canvas, overlay, place,
    AffineParams, MultiMnist, PairLayout, Split, AFFNIST_SIDE, CANVAS_SLACK, DIGIT_SIDE, MULTIMNIST_SHIFT, MULTIMNIST_SIDE,
    ROTATION_RANGE, SCALE_RANGE, SHEAR_RANGE, TRANSLATE_RANGE,
};

use crate::error::{Error, Result};
use crate::seed::SeedScheme;

pub const DATA_DIR_ENV: &str = "CAPSLAB_DATA_DIR";

/// `explicit`, else `$CAPSLAB_DATA_DIR`, else `data/mnist`.
pub fn resolve_data_dir(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data/mnist"))
}

fn find(dir: &Path, stem: &str) -> Result<PathBuf> {
    [format!("{stem}.gz"), stem.to_string()]
        .into_iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::Data(format!("no {stem}[.gz] under {}", dir.display())))
}

/// Loads the standard `train-*` or `t10k-*` IDX pair from `dir`.
pub fn load_split(dir: &Path, split: Split) -> Result<MnistSet> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images = find(dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let labels = find(dir, &format!("{prefix}-labels-idx1-ubyte"))?;
    let set = load_mnist_idx(&images, &labels)?;
    if set.is_empty() {
        return Err(Error::Data(format!("{} holds no images", images.display())));
    }
    Ok(set)
}

/// A training source and named evaluation sources.
#[derive(Clone)]
pub struct TaskData {
    pub train: Arc<dyn RecordSource>,
    pub evals: Vec<(String, Arc<dyn RecordSource>)>,
}

impl TaskData {
    pub fn eval(&self, tag: &str) -> Option<&Arc<dyn RecordSource>> {
        self.evals.iter().find(|(t, _)| t == tag).map(|(_, s)| s)
    }
}

pub const MNIST_TEST: &str = "mnist_test";
pub const AFFNIST_TEST: &str = "affnist_test";
pub const MULTIMNIST_TEST: &str = "multimnist_test";

/// Randomly placed 40x40 training canvases; centred and affine-warped tests.
pub fn affnist_task(train: &MnistSet, test: &MnistSet, seeds: &SeedScheme, variants: usize) -> Result<TaskData> {
    let train_src = InMemory::new(gen_train_canvases(train, seeds))?;
    let centered = InMemory::new(gen_centered(test))?;
    let warped = gen_affnist_test(test, seeds, variants)?.into_iter().map(|(r, _)| r).collect();
    Ok(TaskData {
        train: Arc::new(train_src),
        evals: vec![(MNIST_TEST.into(), Arc::new(centered)), (AFFNIST_TEST.into(), Arc::new(InMemory::new(warped)?))],
    })
}

/// Overlapping pairs generated on demand from each split.
pub fn multimnist_task(
    train: MnistSet,
    test: MnistSet,
    seeds: &SeedScheme,
    train_pairs: usize,
    test_pairs: usize,
) -> Result<TaskData> {
    let tr = MultiMnist::new(Arc::new(train), Split::Train, train_pairs, *seeds)?;
    let te = MultiMnist::new(Arc::new(test), Split::Test, test_pairs, *seeds)?;
    Ok(TaskData { train: Arc::new(tr), evals: vec![(MULTIMNIST_TEST.into(), Arc::new(te))] })
}
