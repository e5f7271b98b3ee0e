//! The two-stream segmentation network.

pub mod blocks;
pub mod config;
pub mod csdn;
pub mod io;
pub mod params;

pub use blocks::{ForwardOptions, Unit};
pub use config::NetworkConfig;
pub use csdn::{count_parameters, Architecture, BnUpdates, Csdn, CsdnOutput, Trace};
pub use io::{load_weights, load_weights_into, save_weights, weights_from_bytes, weights_to_bytes};
pub use params::{ParamKind, ParameterStore};
