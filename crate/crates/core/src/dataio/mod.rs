//! Volumes, label maps, MVOL persistence, preprocessing, manifests and splits.

mod manifest;
mod mvol;
mod resample;

use crate::error::{Error, Result};
use crate::volgrad::Tensor;

pub use manifest::{label_frequencies, make_splits, AccessLog, LabelEntry, Manifest, Phase, Split, SplitIndices, Subject};
pub use mvol::{decode, encode_labels, encode_volume, read_labels, read_volume, write_labels, write_volume, Mvol, MAGIC};
pub use resample::{preprocess, resample_isotropic, resize_cube, zero_pad_cube};

fn check_grid(extents: [usize; 3], spacing: [f64; 3], len: usize) -> Result<()> {
    if extents.contains(&0) {
        return Err(Error::InvalidConfig(format!("zero extent in {extents:?}")));
    }
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::InvalidConfig(format!("spacing {spacing:?} must be positive")));
    }
    let n: usize = extents.iter().product();
    if n != len {
        return Err(Error::Shape {
            op: "volume",
            detail: format!("{len} voxels for extents {extents:?}"),
        });
    }
    Ok(())
}

/// Scalar image on a `D×H×W` grid with per-axis spacing in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    extents: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(extents: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        check_grid(extents, spacing, data.len())?;
        Ok(Self { extents, spacing, data })
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// `1×D×H×W` network input.
    pub fn to_tensor(&self) -> Tensor {
        let [d, h, w] = self.extents;
        Tensor::new(vec![1, d, h, w], self.data.clone()).expect("extents match data")
    }
}

/// Integer label image; every stored value is below `num_labels`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    extents: [usize; 3],
    spacing: [f64; 3],
    labels: Vec<u8>,
    num_labels: usize,
}

impl LabelMap {
    pub fn new(extents: [usize; 3], spacing: [f64; 3], labels: Vec<u8>, num_labels: usize) -> Result<Self> {
        check_grid(extents, spacing, labels.len())?;
        if !(1..=256).contains(&num_labels) {
            return Err(Error::InvalidConfig(format!("num_labels {num_labels} outside 1..=256")));
        }
        if let Some(&v) = labels.iter().find(|&&v| v as usize >= num_labels) {
            return Err(Error::InvalidConfig(format!("label {v} is not below num_labels {num_labels}")));
        }
        Ok(Self {
            extents,
            spacing,
            labels,
            num_labels,
        })
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    /// Voxel count per label.
    pub fn counts(&self) -> Vec<u64> {
        let mut c = vec![0u64; self.num_labels];
        for &v in &self.labels {
            c[v as usize] += 1;
        }
        c
    }

    pub fn ground_truth(&self) -> crate::losses::GroundTruth {
        crate::losses::GroundTruth::new(self.extents, self.labels.clone(), self.num_labels).expect("validated on construction")
    }
}
