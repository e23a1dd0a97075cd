//! Simulation, cross-validated scoring and a Gibbs reference sampler.

mod cv;
mod gibbs;
mod scores;
mod simulate;

pub use cv::{cv_errors, run_cv, CvErrors, CvPlan};
pub use gibbs::{gibbs_oracle, GibbsConfig, GibbsSummary, GIBBS_MAX_DIM};
pub use scores::{crps, ign, interval, interval_half_width, proper_scores, ScoreReport};
pub use simulate::{
    block_design, canonical_hrf, simulate_dataset, ConditionSpec, MaskShape, NoiseSpec, SimulatedData, SimulationSpec,
};
