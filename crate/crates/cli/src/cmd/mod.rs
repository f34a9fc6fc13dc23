pub mod bench;
pub mod checks;
pub mod heatmap;
pub mod profile;
pub mod toy;
