//! Accuracy, semantic compactness and perturbation sweeps.

mod accuracy;
mod compactness;
mod perturb;

pub use accuracy::{accuracy, per_class_accuracy, top2, top2_multitarget_accuracy, EvalResult};
pub use compactness::{
    compactness_from_vectors, compactness_score, dimension_variance, kl_to_uniform, CompactnessReport, Factor,
    DEFAULT_VARIATIONS,
};
pub use perturb::{compose_grid, mean_abs_change, perturb_sweep, Grid, PerturbationSweepSpec, SweepResult};
