//! Diagnostics for trained models: attention spectra, scree counts, weight
//! histograms, loss landscapes and parameter/FLOP accounting.

pub mod count;
pub mod histogram;
pub mod landscape;
pub mod spectra;
pub mod svd;

pub use count::{count_params_flops, Accounting};
pub use histogram::{weight_histogram, Histogram};
pub use landscape::{loss_landscape, LandscapeGrid, LandscapeOptions};
pub use spectra::{scree_count, spectral_scan, Scree, SpectraReport};
pub use svd::{svd, Svd};
