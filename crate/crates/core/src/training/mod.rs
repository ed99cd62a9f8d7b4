pub mod calibrate;
pub mod dpe;
pub mod eval;
pub mod noise;
pub mod prune;
pub mod quant;
pub mod train;

pub use calibrate::{calibrate_devices, AttenuatorCurve, CalibrationTable};
pub use dpe::{fit_dpe, DpeBudget, DpeFit, DpeModel};
pub use eval::evaluate_on_chip;
pub use noise::{drifted_sigma, inject_noise, NoiseSite};
pub use prune::{prune_sigma_groups, LayerMask, PruneMask, PruneOutcome, PruneReport};
pub use quant::{fake_quantize, fake_quantize_grad, QuantSpec};
pub use train::{
    evaluate, loss_and_sigma_grad, metrics_csv, train, Backend, EpochMetrics, Evaluation, PruneConfig, TrainConfig,
    TrainOutcome, METRICS_HEADER,
};
