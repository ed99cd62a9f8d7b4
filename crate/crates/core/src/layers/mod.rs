pub mod blocked;
pub mod conv;
pub mod model;

pub use blocked::{block_product, pad_to_block, BlockedLinear, HardwareTransfer, Padding, SigmaUnit};
pub use conv::{conv_forward, im2col, ConvSpec};
pub use model::{argmax, build_paper_model, default_gain, Layer, OsnnModel};
