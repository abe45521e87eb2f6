//! Scoring target images against target categories, refinement by label
//! propagation, and the mean class accuracy metric.

use serde::{Deserialize, Serialize};

use crate::data::ZslDataset;
use crate::error::{Error, Result};
use crate::layers::DomainTag;
use crate::model::{Model, PairBatch};
use crate::numerics::{softmax_rows, Matrix};

/// Images scored per metric-network pass.
const SCORE_CHUNK: usize = 256;

/// Compatibility of every target image with every target category.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    /// Sigmoid scores, `N x K`.
    pub scores: Matrix,
    /// Pre-sigmoid logits, `N x K`.
    pub logits: Matrix,
}

fn pair_all(images: Matrix, encoded: &Matrix, tag: DomainTag) -> PairBatch {
    let k = encoded.rows();
    let n = images.rows();
    PairBatch {
        images,
        attributes: encoded.clone(),
        image_index: (0..n).flat_map(|i| std::iter::repeat(i).take(k)).collect(),
        category_index: (0..n).flat_map(|_| 0..k).collect(),
        labels: None,
        tag,
    }
}

/// Scores `images` against every row of `attributes` in eval mode, using
/// the target domain's normalization statistics.
pub fn score_target(model: &Model, images: &Matrix, attributes: &Matrix) -> Result<ScoreMatrix> {
    if attributes.rows() == 0 {
        return Err(Error::Empty { op: "score_target (no categories)" });
    }
    let encoded = model.encoder.apply(attributes)?;
    let (n, k) = (images.rows(), attributes.rows());
    let mut scores = Matrix::zeros(n, k);
    let mut logits = Matrix::zeros(n, k);
    let mut start = 0;
    while start < n {
        let end = (start + SCORE_CHUNK).min(n);
        let batch = pair_all(images.row_range(start, end), &encoded, DomainTag::Target);
        let out = model.metric.forward_eval(&batch)?;
        scores.data_mut()[start * k..end * k].copy_from_slice(&out.scores);
        logits.data_mut()[start * k..end * k].copy_from_slice(&out.logits);
        start = end;
    }
    Ok(ScoreMatrix { scores, logits })
}

/// Column of the maximum in each row; ties go to the lowest index.
pub fn predict_argmax(scores: &Matrix) -> Vec<usize> {
    (0..scores.rows())
        .map(|r| {
            let mut best = 0;
            for (c, &v) in scores.row(r).iter().enumerate() {
                if v > scores.get(r, best) {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Settings of the label-propagation refinement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelPropagation {
    pub enabled: bool,
    /// Neighbours per image in the kNN graph.
    pub k: usize,
    /// Weight of propagated mass against the initial predictions.
    pub omega: f64,
    pub iters: usize,
}

impl Default for LabelPropagation {
    fn default() -> Self {
        Self {
            enabled: true,
            k: 10,
            omega: 0.9,
            iters: 20,
        }
    }
}

impl LabelPropagation {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Invalid("label propagation k must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.omega) {
            return Err(Error::Invalid(format!(
                "label propagation omega must lie in [0, 1), got {}",
                self.omega
            )));
        }
        Ok(())
    }
}

/// Symmetric sparse matrix stored as per-row `(column, value)` lists.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseAffinity {
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseAffinity {
    pub fn from_dense(m: &Matrix) -> Self {
        let rows = (0..m.rows())
            .map(|r| {
                m.row(r)
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0.0)
                    .map(|(c, &v)| (c, v))
                    .collect()
            })
            .collect();
        Self { rows }
    }

    pub fn to_dense(&self) -> Matrix {
        let n = self.rows.len();
        let mut m = Matrix::zeros(n, n);
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, v) in row {
                m.set(r, c, v);
            }
        }
        m
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, r: usize) -> &[(usize, f64)] {
        &self.rows[r]
    }

    /// `self · x` for a dense `x` with `len()` rows.
    pub fn matmul(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.rows.len() {
            return Err(Error::shape("sparse matmul", (self.rows.len(), self.rows.len()), x.shape()));
        }
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, v) in row {
                let src = x.row(c).to_vec();
                for (o, s) in out.row_mut(r).iter_mut().zip(src) {
                    *o += v * s;
                }
            }
        }
        Ok(out)
    }

    /// `D^{-1/2} W D^{-1/2}` with `D` the row sums; isolated rows stay zero.
    pub fn normalized(&self) -> Self {
        let inv_sqrt: Vec<f64> = self
            .rows
            .iter()
            .map(|row| {
                let d: f64 = row.iter().map(|&(_, v)| v).sum();
                if d > 0.0 {
                    1.0 / d.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let rows = self
            .rows
            .iter()
            .enumerate()
            .map(|(r, row)| row.iter().map(|&(c, v)| (c, inv_sqrt[r] * v * inv_sqrt[c])).collect())
            .collect();
        Self { rows }
    }
}

/// Mutual k-nearest-neighbour graph under cosine similarity.
///
/// Edge weights are `max(cos, 0)`; an edge exists when each endpoint is among
/// the other's `k` nearest neighbours (self excluded, ties to the lower
/// index). All-zero rows have no edges.
pub fn knn_affinity(features: &Matrix, k: usize) -> Result<SparseAffinity> {
    if k == 0 {
        return Err(Error::Invalid("kNN graph needs k >= 1".into()));
    }
    let n = features.rows();
    let mut unit = features.clone();
    let mut zero = vec![false; n];
    for (r, z) in zero.iter_mut().enumerate() {
        let row = unit.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        } else {
            *z = true;
        }
    }
    let mut neighbours: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    for i in 0..n {
        if zero[i] {
            neighbours.push(Vec::new());
            continue;
        }
        let xi = unit.row(i);
        let mut sims: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != i && !zero[j])
            .map(|j| (j, xi.iter().zip(unit.row(j)).map(|(a, b)| a * b).sum()))
            .collect();
        sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        sims.truncate(k);
        neighbours.push(sims);
    }
    let rows = (0..n)
        .map(|i| {
            let mut row: Vec<(usize, f64)> = neighbours[i]
                .iter()
                .filter(|&&(j, _)| neighbours[j].iter().any(|&(m, _)| m == i))
                .map(|&(j, s)| (j, s.max(0.0)))
                .filter(|&(_, w)| w > 0.0)
                .collect();
            row.sort_by_key(|&(j, _)| j);
            row
        })
        .collect();
    Ok(SparseAffinity { rows })
}

/// Iterates `F ← ω S F + (1 − ω) Y0` starting from `F = Y0`.
pub fn propagate(s: &SparseAffinity, y0: &Matrix, omega: f64, iters: usize) -> Result<Matrix> {
    let mut f = y0.clone();
    let base = y0.scale(1.0 - omega);
    for _ in 0..iters {
        f = s.matmul(&f)?.scale(omega).add(&base)?;
    }
    Ok(f)
}

/// Refines image-by-category logits by propagating their row-softmax over a
/// mutual kNN graph of the image features.
pub fn label_propagation(features: &Matrix, logits: &Matrix, params: &LabelPropagation) -> Result<Matrix> {
    params.validate()?;
    if features.rows() != logits.rows() {
        return Err(Error::shape("label_propagation", features.shape(), logits.shape()));
    }
    let s = knn_affinity(features, params.k)?.normalized();
    let y0 = softmax_rows(logits)?;
    propagate(&s, &y0, params.omega, params.iters)
}

/// Mean class accuracy with its per-class terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McaReport {
    pub mca: f64,
    pub per_class: Vec<f64>,
}

/// Mean over classes of the per-class accuracy. Every class must have at
/// least one instance.
pub fn mca(predictions: &[usize], truth: &[usize], num_classes: usize) -> Result<McaReport> {
    if predictions.len() != truth.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    if num_classes == 0 {
        return Err(Error::Empty { op: "mca" });
    }
    let mut total = vec![0usize; num_classes];
    let mut correct = vec![0usize; num_classes];
    for (&p, &t) in predictions.iter().zip(truth) {
        if t >= num_classes {
            return Err(Error::Invalid(format!("label {t} out of range for {num_classes} classes")));
        }
        total[t] += 1;
        if p == t {
            correct[t] += 1;
        }
    }
    if let Some(empty) = total.iter().position(|&n| n == 0) {
        return Err(Error::Invalid(format!("class {empty} has no instances; its accuracy is undefined")));
    }
    let per_class: Vec<f64> = correct.iter().zip(&total).map(|(&c, &n)| c as f64 / n as f64).collect();
    let mca = per_class.iter().sum::<f64>() / num_classes as f64;
    Ok(McaReport { mca, per_class })
}

/// Raw and refined predictions for a dataset's target block.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub scores: ScoreMatrix,
    pub predictions: Vec<usize>,
    pub raw: McaReport,
    /// Label-propagation output, when enabled.
    pub refined_scores: Option<Matrix>,
    pub refined_predictions: Option<Vec<usize>>,
    pub refined: Option<McaReport>,
}

/// Scores the target block, predicts by argmax and measures MCA against the
/// held-out target labels, optionally also after label propagation.
pub fn evaluate_dataset(model: &Model, dataset: &ZslDataset, lp: &LabelPropagation) -> Result<Evaluation> {
    evaluate_with_graph(model, dataset, &dataset.target_features, lp)
}

/// As [`evaluate_dataset`], building the propagation graph from
/// `graph_features` (one row per target image) instead of the scored
/// features, e.g. the features before standardization.
pub fn evaluate_with_graph(
    model: &Model,
    dataset: &ZslDataset,
    graph_features: &Matrix,
    lp: &LabelPropagation,
) -> Result<Evaluation> {
    let scores = score_target(model, &dataset.target_features, &dataset.target_attributes)?;
    let kt = dataset.num_target_classes();
    let predictions = predict_argmax(&scores.logits);
    let raw = mca(&predictions, dataset.target_labels(), kt)?;
    let (refined_scores, refined_predictions, refined) = if lp.enabled {
        let f = label_propagation(graph_features, &scores.logits, lp)?;
        let p = predict_argmax(&f);
        let r = mca(&p, dataset.target_labels(), kt)?;
        (Some(f), Some(p), Some(r))
    } else {
        (None, None, None)
    };
    Ok(Evaluation {
        scores,
        predictions,
        raw,
        refined_scores,
        refined_predictions,
        refined,
    })
}

/// Post-ReLU hidden activations of both metric layers for images paired
/// with one category each, in eval mode under `tag`.
pub fn hidden_activations(
    model: &Model,
    images: &Matrix,
    attributes: &Matrix,
    categories: &[usize],
    tag: DomainTag,
) -> Result<[Matrix; 2]> {
    if categories.len() != images.rows() {
        return Err(Error::Invalid(format!(
            "{} categories for {} images",
            categories.len(),
            images.rows()
        )));
    }
    if let Some(&bad) = categories.iter().find(|&&c| c >= attributes.rows()) {
        return Err(Error::Invalid(format!("category {bad} out of range")));
    }
    let encoded = model.encoder.apply(attributes)?;
    let width = model.metric.width();
    let n = images.rows();
    let mut out = [Matrix::zeros(n, width), Matrix::zeros(n, width)];
    let mut start = 0;
    while start < n {
        let end = (start + SCORE_CHUNK).min(n);
        let batch = PairBatch {
            images: images.row_range(start, end),
            attributes: encoded.clone(),
            image_index: (0..end - start).collect(),
            category_index: categories[start..end].to_vec(),
            labels: None,
            tag,
        };
        let pass = model.metric.evaluate(&batch)?;
        for (dst, src) in out.iter_mut().zip(&pass.hidden) {
            dst.data_mut()[start * width..end * width].copy_from_slice(src.data());
        }
        start = end;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::training::{train, TrainConfig};

    #[test]
    fn argmax_ties_go_low() {
        let m = Matrix::from_rows(&[[0.2, 0.7, 0.7], [0.5, 0.5, 0.1], [-1.0, -2.0, -0.5]]).unwrap();
        assert_eq!(predict_argmax(&m), vec![1, 0, 2]);
    }

    #[test]
    fn mca_examples() {
        let r = mca(&[0, 0, 1, 1, 1], &[0, 0, 0, 1, 1], 2).unwrap();
        let expected = (2.0 / 3.0 + 1.0) / 2.0;
        assert!((r.mca - expected).abs() < 1e-15);
        assert_eq!(r.per_class.len(), 2);
        assert!(mca(&[0, 0], &[0, 0], 2).is_err());
        assert!(mca(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn propagation_of_identity_graph() {
        // With S = 0 the fixed point is (1 - ω) Y0.
        let y0 = Matrix::from_rows(&[[0.2, 0.8], [0.6, 0.4]]).unwrap();
        let s = SparseAffinity::from_dense(&Matrix::zeros(2, 2));
        let f = propagate(&s, &y0, 0.9, 5).unwrap();
        assert!(f.max_abs_diff(&y0.scale(0.1)) < 1e-15);
    }

    #[test]
    fn propagation_matches_dense_oracle() {
        let w = Matrix::from_rows(&[[0.0, 0.5, 0.0], [0.5, 0.0, 1.0], [0.0, 1.0, 0.0]]).unwrap();
        let y0 = Matrix::from_rows(&[[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]]).unwrap();
        let s = SparseAffinity::from_dense(&w).normalized();
        let d: Vec<f64> = (0..3).map(|r| w.row(r).iter().sum()).collect();
        let mut dense = Matrix::zeros(3, 3);
        for r in 0..3 {
            for c in 0..3 {
                dense.set(r, c, w.get(r, c) / (d[r] * d[c]).sqrt());
            }
        }
        assert!(s.to_dense().max_abs_diff(&dense) < 1e-15);
        let mut f = y0.clone();
        for _ in 0..7 {
            f = dense.matmul(&f).unwrap().scale(0.8).add(&y0.scale(0.2)).unwrap();
        }
        assert!(propagate(&s, &y0, 0.8, 7).unwrap().max_abs_diff(&f) < 1e-14);
    }

    #[test]
    fn knn_graph_is_mutual_and_symmetric() {
        let x = Matrix::from_rows(&[
            [1.0, 0.0],
            [0.9, 0.1],
            [0.0, 1.0],
            [0.1, 0.9],
            [0.0, 0.0],
            [-1.0, 0.0],
        ])
        .unwrap();
        let g = knn_affinity(&x, 1).unwrap().to_dense();
        assert_eq!(g, g.transpose());
        assert!(g.get(0, 1) > 0.0 && g.get(2, 3) > 0.0);
        assert_eq!(g.row(4), &[0.0; 6]);
        // Row 5 points away from everything: clipped weights, no edges.
        assert_eq!(g.row(5), &[0.0; 6]);
        for i in 0..6 {
            assert_eq!(g.get(i, i), 0.0);
        }
    }

    #[test]
    fn refinement_repairs_an_outlier() {
        // Two tight clusters; one image of cluster A is mispredicted.
        let x = Matrix::from_rows(&[
            [1.0, 0.0],
            [0.99, 0.05],
            [0.98, -0.05],
            [0.0, 1.0],
            [0.05, 0.99],
            [-0.05, 0.98],
        ])
        .unwrap();
        let logits = Matrix::from_rows(&[[3.0, 0.0], [3.0, 0.0], [0.0, 0.5], [0.0, 3.0], [0.0, 3.0], [0.0, 3.0]])
            .unwrap();
        let params = LabelPropagation { k: 2, ..Default::default() };
        let f = label_propagation(&x, &logits, &params).unwrap();
        assert_eq!(predict_argmax(&f), vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn scoring_shapes_and_hidden_dump() {
        let ds = generate_synthetic(&SyntheticSpec {
            num_source_classes: 5,
            num_target_classes: 3,
            feature_dim: 6,
            attribute_dim: 4,
            samples_per_class: 4,
            ..Default::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            max_iterations: 3,
            encoder_hidden: 5,
            metric_hidden: 7,
            ..Default::default()
        };
        let out = train(&cfg, &ds.training_view()).unwrap();
        let model = &out.trainer.model;
        let s = score_target(model, &ds.target_features, &ds.target_attributes).unwrap();
        assert_eq!(s.scores.shape(), (12, 3));
        for (p, z) in s.scores.data().iter().zip(s.logits.data()) {
            assert!((p - crate::numerics::sigmoid_scalar(*z)).abs() < 1e-15);
        }
        let eval = evaluate_dataset(model, &ds, &LabelPropagation::default()).unwrap();
        assert_eq!(eval.predictions.len(), 12);
        assert!(eval.refined.is_some());
        let h = hidden_activations(model, &ds.target_features, &ds.target_attributes, &eval.predictions, DomainTag::Target)
            .unwrap();
        assert_eq!(h[0].shape(), (12, 7));
        assert!(h[1].data().iter().all(|&v| v >= 0.0));
    }
}
