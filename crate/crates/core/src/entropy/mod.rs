//! Bit I/O, the arithmetic coder and the models that drive it.

pub mod arith;
pub mod bitio;
pub mod location;
pub mod models;
pub mod residual;

pub use arith::{ac_decode, ac_encode, sequential_entropy, ArithDecoder, ArithEncoder};
pub use bitio::{BitReader, BitWriter};
pub use location::{decode_locations, encode_locations};
pub use models::{AdaptiveModel, ContextModel, ContextTable, DEFAULT_CONTEXT_RANGE};
pub use residual::{decode_inter_residuals, encode_inter_residuals, ResidualModels};
