//! Verification and experiment drivers: brute-force oracles, structural
//! property suites, synthetic data, toy training, benchmarks and heat maps.

pub mod bench;
pub mod data;
pub mod heatmap;
pub mod oracle;
pub mod properties;
pub mod targets;
pub mod toy;
pub mod train;
pub mod weights;
