//! Butterfly-style k x k photonic unitaries (the B and P units).

mod configure;
mod expressivity;
mod fit;
mod network;

pub use configure::{configure_dft, configure_hadamard, Transform};
pub use expressivity::{
    expressivity_report, fit_bsp, fit_nonneg, fit_sigma_only, nonneg_effective, optimal_sigma, ExpressivityMode,
    ExpressivityReport, ModeStatistics,
};
pub use fit::{fidelity, fit_unitary, haar_unitary, FitBudget, FitResult};
pub use network::{fifty_fifty, ButterflyNetwork, NetworkDescriptor, NetworkHardware, PhaseConfiguration, Routing};
pub(crate) use network::coupler_matrix;
