//! VLAD aggregation of local descriptors, cluster initialisation and
//! PCA-whitening reduction.

mod kmeans;
mod layer;
mod pca;

pub use kmeans::{distortion, kmeans_init};
pub use layer::{estimate_alpha, local_descriptors, NetVlad, VLAD_EPS};
pub use pca::{apply_descriptor_reduction, fit_pca_whitening, PcaWhitening, PCA_EPS};

#[cfg(test)]
mod tests;
