use serde::{Deserialize, Serialize};

use super::{Split, ZslDataset};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngState};

const SYNTH_STREAM: u64 = 0x5359_4e54;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeStyle {
    Binary,
    Continuous,
}

/// A per-dimension value given either as one scalar for every dimension or
/// as an explicit vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerDim {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl PerDim {
    fn expand(&self, d: usize, what: &str) -> Result<Vec<f64>> {
        match self {
            PerDim::Scalar(v) => Ok(vec![*v; d]),
            PerDim::Vector(v) if v.len() == d => Ok(v.clone()),
            PerDim::Vector(v) => Err(Error::Invalid(format!(
                "{what} has {} entries but the feature dimension is {d}",
                v.len()
            ))),
        }
    }
}

/// Parameters of the synthetic zero-shot task.
///
/// Each class has an attribute vector `a`; a hidden linear map `M` (drawn
/// once) places the class prototype at `M a` in feature space, and images
/// are prototypes plus isotropic Gaussian noise. Target images are then
/// shifted per dimension, `x ← scale ⊙ x + offset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub name: String,
    pub num_source_classes: usize,
    pub num_target_classes: usize,
    pub feature_dim: usize,
    pub attribute_dim: usize,
    pub samples_per_class: usize,
    pub attribute_style: AttributeStyle,
    pub noise: f64,
    pub shift_scale: PerDim,
    pub shift_offset: PerDim,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            num_source_classes: 40,
            num_target_classes: 10,
            feature_dim: 64,
            attribute_dim: 16,
            samples_per_class: 50,
            attribute_style: AttributeStyle::Binary,
            noise: 0.3,
            shift_scale: PerDim::Scalar(1.5),
            shift_offset: PerDim::Scalar(1.0),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_source_classes", self.num_source_classes),
            ("num_target_classes", self.num_target_classes),
            ("feature_dim", self.feature_dim),
            ("attribute_dim", self.attribute_dim),
            ("samples_per_class", self.samples_per_class),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Invalid(format!("synthetic spec: {name} must be at least 1")));
            }
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::Invalid(format!("synthetic spec: noise must be >= 0, got {}", self.noise)));
        }
        let total = self.num_source_classes + self.num_target_classes;
        if self.attribute_style == AttributeStyle::Binary
            && self.attribute_dim < 63
            && total as u64 > 1u64 << self.attribute_dim
        {
            return Err(Error::Invalid(format!(
                "synthetic spec: {total} distinct binary attribute vectors do not exist in dimension {}",
                self.attribute_dim
            )));
        }
        self.shift_scale.expand(self.feature_dim, "shift_scale")?;
        self.shift_offset.expand(self.feature_dim, "shift_offset")?;
        Ok(())
    }
}

fn draw_attributes(spec: &SyntheticSpec, rng: &mut RngState) -> Matrix {
    let total = spec.num_source_classes + spec.num_target_classes;
    let r = spec.attribute_dim;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(total);
    while rows.len() < total {
        let candidate: Vec<f64> = match spec.attribute_style {
            AttributeStyle::Binary => (0..r).map(|_| if rng.coin() { 1.0 } else { 0.0 }).collect(),
            AttributeStyle::Continuous => (0..r).map(|_| rng.uniform()).collect(),
        };
        if !rows.contains(&candidate) {
            rows.push(candidate);
        }
    }
    Matrix::from_rows(&rows).expect("rows share the attribute width")
}

fn sample_block(
    prototypes: &Matrix,
    classes: std::ops::Range<usize>,
    per_class: usize,
    noise: f64,
    rng: &mut RngState,
) -> (Matrix, Vec<usize>) {
    let d = prototypes.cols();
    let mut x = Matrix::zeros(classes.len() * per_class, d);
    let mut y = Vec::with_capacity(classes.len() * per_class);
    let mut row = 0;
    for (local, class) in classes.enumerate() {
        for _ in 0..per_class {
            for (v, &p) in x.row_mut(row).iter_mut().zip(prototypes.row(class)) {
                *v = p + noise * rng.normal();
            }
            y.push(local);
            row += 1;
        }
    }
    (x, y)
}

/// Generates the dataset and returns it with the hidden `d x r` map.
pub fn generate_synthetic_with_map(spec: &SyntheticSpec) -> Result<(ZslDataset, Matrix)> {
    spec.validate()?;
    let mut rng = RngState::derive(spec.seed, SYNTH_STREAM);
    let (d, r) = (spec.feature_dim, spec.attribute_dim);
    let ks = spec.num_source_classes;
    let total = ks + spec.num_target_classes;

    let attributes = draw_attributes(spec, &mut rng);
    let mut map = Matrix::zeros(d, r);
    let scale = 1.0 / (r as f64).sqrt();
    for v in map.data_mut() {
        *v = scale * rng.normal();
    }
    // Prototypes as rows: A Mᵀ.
    let prototypes = attributes.matmul(&map.transpose())?;

    let (xs, ys) = sample_block(&prototypes, 0..ks, spec.samples_per_class, spec.noise, &mut rng);
    let (mut xt, yt) = sample_block(&prototypes, ks..total, spec.samples_per_class, spec.noise, &mut rng);
    let shift_scale = spec.shift_scale.expand(d, "shift_scale")?;
    let shift_offset = spec.shift_offset.expand(d, "shift_offset")?;
    for row in 0..xt.rows() {
        for ((v, &s), &o) in xt.row_mut(row).iter_mut().zip(&shift_scale).zip(&shift_offset) {
            *v = s * *v + o;
        }
    }

    let ds = ZslDataset::new(
        spec.name.clone(),
        Split::Ss,
        xs,
        ys,
        xt,
        yt,
        attributes.row_range(0, ks),
        attributes.row_range(ks, total),
    )?;
    Ok((ds, map))
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<ZslDataset> {
    Ok(generate_synthetic_with_map(spec)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_disjoint() {
        let spec = SyntheticSpec {
            samples_per_class: 3,
            ..Default::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_source_classes(), 40);
        assert_eq!(a.num_target_classes(), 10);
        for s in 0..a.num_source_classes() {
            for t in 0..a.num_target_classes() {
                assert_ne!(a.source_attributes.row(s), a.target_attributes.row(t));
            }
        }
        let c = generate_synthetic(&SyntheticSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.source_features, c.source_features);
    }

    #[test]
    fn zero_noise_gives_prototypes() {
        let spec = SyntheticSpec {
            noise: 0.0,
            samples_per_class: 4,
            shift_scale: PerDim::Scalar(1.0),
            shift_offset: PerDim::Scalar(0.0),
            ..Default::default()
        };
        let (ds, map) = generate_synthetic_with_map(&spec).unwrap();
        let protos = ds.source_attributes.matmul(&map.transpose()).unwrap();
        for (i, &y) in ds.source_labels.iter().enumerate() {
            assert_eq!(ds.source_features.row(i), protos.row(y));
        }
        let tprotos = ds.target_attributes.matmul(&map.transpose()).unwrap();
        for (i, &y) in ds.target_labels().iter().enumerate() {
            assert_eq!(ds.target_features.row(i), tprotos.row(y));
        }
    }

    #[test]
    fn impossible_distinctness_rejected() {
        let spec = SyntheticSpec {
            attribute_dim: 3,
            num_source_classes: 6,
            num_target_classes: 3,
            ..Default::default()
        };
        assert!(generate_synthetic(&spec).is_err());
        let bad = SyntheticSpec {
            num_target_classes: 0,
            ..Default::default()
        };
        assert!(generate_synthetic(&bad).is_err());
        let bad = SyntheticSpec {
            shift_scale: PerDim::Vector(vec![1.0; 3]),
            ..Default::default()
        };
        assert!(generate_synthetic(&bad).is_err());
    }

    #[test]
    fn spec_json_defaults_and_vectors() {
        let s: SyntheticSpec = serde_json::from_str(r#"{"seed": 3, "shift_offset": [0.0, 1.0]}"#).unwrap();
        assert_eq!(s.seed, 3);
        assert_eq!(s.shift_offset, PerDim::Vector(vec![0.0, 1.0]));
        assert_eq!(s.num_source_classes, 40);
        assert!(serde_json::from_str::<SyntheticSpec>(r#"{"bogus": 1}"#).is_err());
    }
}
