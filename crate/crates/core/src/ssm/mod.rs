//! Selective state-space layers.

pub mod conv1d;
pub mod mamba;
pub mod scan;
pub mod tom;

pub use conv1d::causal_depthwise_conv1d;
pub use mamba::{selective_scan, MambaBlock, MambaBlockSpec, SsmParams};
pub use scan::{scan, DEFAULT_SCAN_CHUNK};
pub use tom::{InterSliceOrder, Tom, TomConfig};
