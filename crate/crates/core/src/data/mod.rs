//! Zero-shot datasets: in-memory representation, file manifests, and the
//! synthetic generator used for desk-scale experiments.

mod format;
mod manifest;
mod synthetic;

pub use format::{
    decode_csv, decode_mtxb, encode_csv, encode_mtxb, load_matrix, load_matrix_csv,
    load_matrix_mtxb, save_matrix, save_matrix_csv, save_matrix_mtxb, MatrixFormat, MTXB_MAGIC,
    MTXB_VERSION,
};
pub use manifest::{load_dataset, save_dataset, BlockRef, Blocks, ClassNames, DatasetManifest, Dims, Split};
pub use synthetic::{generate_synthetic, generate_synthetic_with_map, AttributeStyle, PerDim, SyntheticSpec};

use crate::error::{Error, Result};
use crate::numerics::{row_stats, Matrix};

/// Source images with labels, unlabeled target images, and per-category
/// attributes for the disjoint source and target category sets.
///
/// Target labels are kept for evaluation only; training code receives a
/// [`TrainingView`], which has no access to them.
#[derive(Clone, Debug, PartialEq)]
pub struct ZslDataset {
    pub name: String,
    pub split: Split,
    pub source_features: Matrix,
    pub source_labels: Vec<usize>,
    pub target_features: Matrix,
    target_labels: Vec<usize>,
    pub source_attributes: Matrix,
    pub target_attributes: Matrix,
    pub source_classes: Vec<String>,
    pub target_classes: Vec<String>,
}

/// Everything training may look at.
#[derive(Clone, Copy, Debug)]
pub struct TrainingView<'a> {
    pub source_features: &'a Matrix,
    pub source_labels: &'a [usize],
    pub target_features: &'a Matrix,
    pub source_attributes: &'a Matrix,
    pub target_attributes: &'a Matrix,
}

impl<'a> TrainingView<'a> {
    pub fn feature_dim(&self) -> usize {
        self.source_features.cols()
    }

    pub fn attribute_dim(&self) -> usize {
        self.source_attributes.cols()
    }

    pub fn num_source_classes(&self) -> usize {
        self.source_attributes.rows()
    }

    pub fn num_target_classes(&self) -> usize {
        self.target_attributes.rows()
    }
}

fn validation(block: &str, expected: impl ToString, found: impl ToString) -> Error {
    Error::Validation {
        block: block.to_string(),
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

fn shape_str(s: (usize, usize)) -> String {
    format!("{}x{}", s.0, s.1)
}

impl ZslDataset {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        split: Split,
        source_features: Matrix,
        source_labels: Vec<usize>,
        target_features: Matrix,
        target_labels: Vec<usize>,
        source_attributes: Matrix,
        target_attributes: Matrix,
    ) -> Result<Self> {
        let source_classes = (0..source_attributes.rows()).map(|i| format!("source_{i:03}")).collect();
        let target_classes = (0..target_attributes.rows()).map(|i| format!("target_{i:03}")).collect();
        let ds = Self {
            name: name.into(),
            split,
            source_features,
            source_labels,
            target_features,
            target_labels,
            source_attributes,
            target_attributes,
            source_classes,
            target_classes,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn with_class_names(mut self, source: Vec<String>, target: Vec<String>) -> Result<Self> {
        self.source_classes = source;
        self.target_classes = target;
        self.validate()?;
        Ok(self)
    }

    pub fn feature_dim(&self) -> usize {
        self.source_features.cols()
    }

    pub fn attribute_dim(&self) -> usize {
        self.source_attributes.cols()
    }

    pub fn num_source_classes(&self) -> usize {
        self.source_attributes.rows()
    }

    pub fn num_target_classes(&self) -> usize {
        self.target_attributes.rows()
    }

    /// Held-out target labels, for evaluation code only.
    pub fn target_labels(&self) -> &[usize] {
        &self.target_labels
    }

    pub fn training_view(&self) -> TrainingView<'_> {
        TrainingView {
            source_features: &self.source_features,
            source_labels: &self.source_labels,
            target_features: &self.target_features,
            source_attributes: &self.source_attributes,
            target_attributes: &self.target_attributes,
        }
    }

    /// Checks every structural invariant, naming the offending block.
    pub fn validate(&self) -> Result<()> {
        let d = self.source_features.cols();
        let r = self.source_attributes.cols();
        let (ks, kt) = (self.source_attributes.rows(), self.target_attributes.rows());
        if ks == 0 {
            return Err(validation("source_attributes", "at least 1 category", 0));
        }
        if kt == 0 {
            return Err(validation("target_attributes", "at least 1 category", 0));
        }
        if d == 0 || self.source_features.rows() == 0 {
            return Err(validation(
                "source_features",
                "a non-empty matrix",
                shape_str(self.source_features.shape()),
            ));
        }
        if self.target_features.rows() == 0 {
            return Err(validation("target_features", "at least 1 image", 0));
        }
        if self.target_features.cols() != d {
            return Err(validation("target_features", format!("{d} columns"), self.target_features.cols()));
        }
        if self.target_attributes.cols() != r {
            return Err(validation("target_attributes", format!("{r} columns"), self.target_attributes.cols()));
        }
        if self.source_labels.len() != self.source_features.rows() {
            return Err(validation(
                "source_labels",
                format!("{} labels", self.source_features.rows()),
                self.source_labels.len(),
            ));
        }
        if self.target_labels.len() != self.target_features.rows() {
            return Err(validation(
                "target_labels",
                format!("{} labels", self.target_features.rows()),
                self.target_labels.len(),
            ));
        }
        if let Some(&y) = self.source_labels.iter().find(|&&y| y >= ks) {
            return Err(validation("source_labels", format!("labels in [0, {ks})"), y));
        }
        if let Some(&y) = self.target_labels.iter().find(|&&y| y >= kt) {
            return Err(validation("target_labels", format!("labels in [0, {kt})"), y));
        }
        for (block, m) in [
            ("source_features", &self.source_features),
            ("target_features", &self.target_features),
            ("source_attributes", &self.source_attributes),
            ("target_attributes", &self.target_attributes),
        ] {
            if !m.is_finite() {
                return Err(validation(block, "finite values", "NaN or infinity"));
            }
        }
        if self.source_classes.len() != ks {
            return Err(validation("class_names.source", format!("{ks} names"), self.source_classes.len()));
        }
        if self.target_classes.len() != kt {
            return Err(validation("class_names.target", format!("{kt} names"), self.target_classes.len()));
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        format!(
            "dataset {} ({}): N_s={} N_t={} K_s={} K_t={} d={} r={}",
            self.name,
            self.split,
            self.source_features.rows(),
            self.target_features.rows(),
            self.num_source_classes(),
            self.num_target_classes(),
            self.feature_dim(),
            self.attribute_dim(),
        )
    }
}

/// Z-scores every feature dimension with statistics fitted on the source
/// block only, and applies the same transform to the target block.
/// Zero-variance source columns are left untouched.
pub fn standardize_features(mut dataset: ZslDataset) -> Result<ZslDataset> {
    let (mean, var) = row_stats(&dataset.source_features)?;
    let mut skipped = Vec::new();
    let scale: Vec<Option<f64>> = var
        .data()
        .iter()
        .enumerate()
        .map(|(c, &v)| {
            if v > 0.0 {
                Some(1.0 / v.sqrt())
            } else {
                skipped.push(c);
                None
            }
        })
        .collect();
    if !skipped.is_empty() {
        log::warn!("standardize_features: zero-variance source columns left unscaled: {skipped:?}");
    }
    for m in [&mut dataset.source_features, &mut dataset.target_features] {
        for r in 0..m.rows() {
            for ((v, &mu), s) in m.row_mut(r).iter_mut().zip(mean.data()).zip(&scale) {
                if let Some(s) = s {
                    *v = (*v - mu) * s;
                }
            }
        }
    }
    Ok(dataset)
}

/// Scales every attribute vector to unit L2 norm; all-zero vectors stay zero.
pub fn normalize_attributes(mut dataset: ZslDataset) -> ZslDataset {
    for m in [&mut dataset.source_attributes, &mut dataset.target_attributes] {
        for r in 0..m.rows() {
            let row = m.row_mut(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }
    dataset
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ZslDataset {
        ZslDataset::new(
            "tiny",
            Split::Ss,
            Matrix::from_rows(&[[1.0, 5.0], [3.0, 5.0], [2.0, 5.0]]).unwrap(),
            vec![0, 1, 1],
            Matrix::from_rows(&[[10.0, 1.0], [12.0, 2.0]]).unwrap(),
            vec![0, 0],
            Matrix::from_rows(&[[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]]).unwrap(),
            Matrix::from_rows(&[[1.0, 1.0, 1.0]]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn validation_names_block() {
        let ds = tiny();
        let mut bad = ds.clone();
        bad.source_labels[0] = 7;
        let err = bad.validate().unwrap_err().to_string();
        assert!(err.contains("source_labels"), "{err}");
        let mut bad = ds.clone();
        bad.target_features = Matrix::zeros(2, 3);
        assert!(bad.validate().unwrap_err().to_string().contains("target_features"));
        let mut bad = ds;
        bad.target_attributes = Matrix::zeros(0, 3);
        assert!(bad.validate().unwrap_err().to_string().contains("target_attributes"));
    }

    #[test]
    fn standardize_source_block() {
        let mut ds = tiny();
        ds.source_features = Matrix::from_rows(&[[1.0, 5.0], [3.0, 5.0], [2.0, 5.0], [7.0, 5.0]]).unwrap();
        ds.source_labels = vec![0, 1, 1, 0];
        let once = standardize_features(ds.clone()).unwrap();
        let (mean, var) = row_stats(&once.source_features).unwrap();
        assert!(mean.get(0, 0).abs() < 1e-12);
        assert!((var.get(0, 0) - 1.0).abs() < 1e-12);
        // Constant column passes through.
        assert_eq!(once.source_features.get(0, 1), 5.0);
        let twice = standardize_features(once.clone()).unwrap();
        assert!(twice.source_features.max_abs_diff(&once.source_features) < 1e-12);
        // Target statistics are not used: target block keeps its offset.
        let (tmean, _) = row_stats(&once.target_features).unwrap();
        assert!(tmean.get(0, 0).abs() > 1.0);
    }

    #[test]
    fn unit_attributes() {
        let ds = normalize_attributes(tiny());
        for m in [&ds.source_attributes, &ds.target_attributes] {
            for r in 0..m.rows() {
                let n: f64 = m.row(r).iter().map(|v| v * v).sum();
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }
}
