//! Manifest-backed image access shared by training, evaluation and the CLI.

use rayon::prelude::*;

use crate::dataset::{Alteration, Manifest, RecordLabel};
use crate::image::{load_image, GrayImage, ImageError};
use crate::nn::{preprocess, Scalar, Tensor};
use crate::task::Task;

/// Which records a workflow may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFilter {
    #[default]
    All,
    RealOnly,
}

impl DatasetFilter {
    pub fn keep(self, label: &RecordLabel) -> bool {
        match self {
            DatasetFilter::All => true,
            DatasetFilter::RealOnly => label.alteration == Alteration::Real,
        }
    }
}

/// Decoded images for a fixed list of manifest indices, in that order.
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub indices: Vec<usize>,
    pub images: Vec<GrayImage>,
    pub labels: Vec<RecordLabel>,
}

impl ImageSet {
    /// Loads the given entries in parallel; the result order equals `indices`.
    pub fn load(manifest: &Manifest, indices: &[usize]) -> Result<Self, ImageError> {
        let images = indices.par_iter().map(|&i| load_image(&manifest.image_path(i))).collect::<Result<Vec<_>, _>>()?;
        let labels = indices.iter().map(|&i| manifest.entries[i].label).collect();
        Ok(Self { indices: indices.to_vec(), images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn classes(&self, task: Task) -> Vec<usize> {
        self.labels.iter().map(|l| task.class_of(l)).collect()
    }

    /// Preprocessed (B, 1, h, w) batch of the given positions.
    pub fn batch<T: Scalar>(&self, positions: &[usize], target: (usize, usize)) -> Tensor<T> {
        let items: Vec<Tensor<T>> = positions.par_iter().map(|&p| preprocess(&self.images[p], target)).collect();
        Tensor::stack(&items.iter().collect::<Vec<_>>())
    }
}
