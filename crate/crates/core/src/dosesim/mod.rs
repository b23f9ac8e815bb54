//! Synthetic paired data: phantoms, simulated dose reduction and the
//! on-disk dataset format.

mod dataset;
mod noise;
mod phantom;

pub use dataset::{
    denormalize, generate_dataset, normalize, read_dataset, read_manifest, write_dataset, Dataset,
    DatasetManifest, DatasetPlan, LowDoseFile, Split, VolumeEntry, FORMAT_VERSION, MANIFEST_FILE,
};
pub use noise::{poisson, simulate_low_dose};
pub use phantom::{
    generate_phantom, generate_phantom_detailed, BodySpec, LesionSpec, OrganSpec, Phantom,
    PhantomSpec,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dose reduction factors, in class-index order.
pub const DRF_LEVELS: [u32; 5] = [4, 10, 20, 50, 100];

pub fn drf_class(drf: u32) -> Result<usize> {
    DRF_LEVELS
        .iter()
        .position(|&d| d == drf)
        .ok_or_else(|| Error::invalid(format!("unsupported DRF {drf}; expected one of {DRF_LEVELS:?}")))
}

pub fn drf_value(class: usize) -> Result<u32> {
    DRF_LEVELS
        .get(class)
        .copied()
        .ok_or_else(|| Error::invalid(format!("DRF class {class} out of range")))
}

/// A low-dose scan with its standard-dose target and dose-level label.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumePair {
    pub x: Tensor,
    pub y_s: Tensor,
    pub y_c: usize,
    pub drf: u32,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_order() {
        for (i, d) in DRF_LEVELS.iter().enumerate() {
            assert_eq!(drf_class(*d).unwrap(), i);
            assert_eq!(drf_value(i).unwrap(), *d);
        }
        assert!(drf_class(5).is_err());
        assert!(drf_value(5).is_err());
    }
}
