//! Objective terms with hand-derived gradients.
//!
//! The prediction loss is binary cross-entropy on sigmoid scores with the
//! gradient taken with respect to the logits. The entropy loss acts on the
//! logits of each target image grouped over all target categories. The
//! reconstruction loss is the mean squared L2 distance per attribute block.
//! MMD and the domain classifier are comparators for the alignment ablation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{relu_backward, relu_forward, DomainTag, LinearLayer};
use crate::numerics::{sigmoid_scalar, Matrix, RngState};

/// Distance kept between a score and the boundary of `(0, 1)` inside logs.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub pre: f64,
    pub ent: f64,
    pub rec: f64,
    pub align: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ent: f64,
    pub lambda_rec: f64,
    pub lambda_align: f64,
}

impl LossReport {
    pub fn new(pre: f64, ent: f64, rec: f64, align: Option<f64>, weights: &LossWeights) -> Self {
        let mut report = Self {
            pre,
            ent,
            rec,
            align,
            total: 0.0,
        };
        report.total = total_objective(&report, weights);
        report
    }

    pub fn is_finite(&self) -> bool {
        self.first_non_finite().is_none()
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        let terms = [
            ("pre", self.pre),
            ("ent", self.ent),
            ("rec", self.rec),
            ("align", self.align.unwrap_or(0.0)),
            ("total", self.total),
        ];
        terms.into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }
}

/// `pre + λ_ent·ent + λ_rec·rec (+ λ_align·align)`.
pub fn total_objective(report: &LossReport, weights: &LossWeights) -> f64 {
    report.pre
        + weights.lambda_ent * report.ent
        + weights.lambda_rec * report.rec
        + report.align.map_or(0.0, |a| weights.lambda_align * a)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionLoss {
    pub value: f64,
    /// Gradient with respect to the pre-sigmoid logits: `(ŷ − y) / n`.
    pub d_logits: Vec<f64>,
    /// Number of scores that had to be clamped away from 0 or 1.
    pub clamped: usize,
}

pub fn prediction_loss(scores: &[f64], labels: &[f64]) -> Result<PredictionLoss> {
    if scores.len() != labels.len() {
        return Err(Error::shape("prediction_loss", (scores.len(), 1), (labels.len(), 1)));
    }
    if scores.is_empty() {
        return Err(Error::Empty { op: "prediction_loss" });
    }
    let n = scores.len() as f64;
    let mut value = 0.0;
    let mut clamped = 0;
    let mut d_logits = Vec::with_capacity(scores.len());
    for (&s, &y) in scores.iter().zip(labels) {
        if !s.is_finite() {
            return Err(Error::NonFinite {
                what: "prediction score".into(),
            });
        }
        let p = if s < LOG_CLAMP || s > 1.0 - LOG_CLAMP {
            clamped += 1;
            s.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP)
        } else {
            s
        };
        value -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        d_logits.push((s - y) / n);
    }
    if clamped > 0 {
        log::warn!("prediction_loss: clamped {clamped} score(s) at {LOG_CLAMP} from the boundary");
    }
    Ok(PredictionLoss {
        value: value / n,
        d_logits,
        clamped,
    })
}

/// Shannon entropy (natural log) of `softmax(logits)`, and its gradient with
/// respect to the logits.
pub fn softmax_entropy(logits: &[f64]) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.iter().map(|z| z - max).collect();
    let log_sum = shifted.iter().map(|v| v.exp()).sum::<f64>().ln();
    let log_p: Vec<f64> = shifted.iter().map(|v| v - log_sum).collect();
    let p: Vec<f64> = log_p.iter().map(|v| v.exp()).collect();
    let h: f64 = -p.iter().zip(&log_p).map(|(pi, lp)| pi * lp).sum::<f64>();
    // ∂H/∂z_j = −p_j (ln p_j + H)
    let grad = p.iter().zip(&log_p).map(|(pi, lp)| -pi * (lp + h)).collect();
    (h, grad)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntropyLoss {
    pub value: f64,
    pub d_logits: Vec<f64>,
    /// Entropy of each image's category distribution.
    pub per_image: Vec<f64>,
}

/// Mean softmax entropy over images. `image_group` must list each image's
/// `k_t` logits consecutively.
pub fn entropy_loss(logits: &[f64], image_group: &[usize], k_t: usize) -> Result<EntropyLoss> {
    if logits.len() != image_group.len() {
        return Err(Error::shape("entropy_loss", (logits.len(), 1), (image_group.len(), 1)));
    }
    if k_t == 0 || logits.is_empty() {
        return Err(Error::Empty { op: "entropy_loss" });
    }
    if logits.len() % k_t != 0 {
        return Err(Error::Invalid(format!(
            "{} logits do not split into groups of {k_t}",
            logits.len()
        )));
    }
    let images = logits.len() / k_t;
    for (g, chunk) in image_group.chunks(k_t).enumerate() {
        if chunk.iter().any(|&i| i != chunk[0]) || (g > 0 && chunk[0] == image_group[(g - 1) * k_t]) {
            return Err(Error::Invalid(format!(
                "image group {g} does not contain exactly {k_t} consecutive pairs"
            )));
        }
    }
    let mut per_image = Vec::with_capacity(images);
    let mut d_logits = Vec::with_capacity(logits.len());
    for chunk in logits.chunks(k_t) {
        let (h, g) = softmax_entropy(chunk);
        per_image.push(h);
        d_logits.extend(g.into_iter().map(|v| v / images as f64));
    }
    let value = per_image.iter().sum::<f64>() / images as f64;
    Ok(EntropyLoss {
        value,
        d_logits,
        per_image,
    })
}

/// Mean over rows of `‖a_i − â_i‖²`, with gradient `2(Â − A)/K`.
pub fn reconstruction_loss(attributes: &Matrix, reconstructed: &Matrix) -> Result<(f64, Matrix)> {
    if attributes.shape() != reconstructed.shape() {
        return Err(Error::shape("reconstruction_loss", attributes.shape(), reconstructed.shape()));
    }
    if attributes.rows() == 0 {
        return Err(Error::Empty { op: "reconstruction_loss" });
    }
    let k = attributes.rows() as f64;
    let residual = reconstructed.sub(attributes)?;
    let value = residual.data().iter().map(|v| v * v).sum::<f64>() / k;
    Ok((value, residual.scale(2.0 / k)))
}

/// Source block plus target block of the reconstruction loss.
pub fn attribute_reconstruction_loss(
    source: (&Matrix, &Matrix),
    target: (&Matrix, &Matrix),
) -> Result<(f64, Matrix, Matrix)> {
    let (vs, gs) = reconstruction_loss(source.0, source.1)?;
    let (vt, gt) = reconstruction_loss(target.0, target.1)?;
    Ok((vs + vt, gs, gt))
}

#[derive(Clone, Debug)]
pub struct MmdLoss {
    pub value: f64,
    pub d_source: Matrix,
    pub d_target: Matrix,
}

/// Squared linear-kernel MMD, `‖mean(h_s) − mean(h_t)‖²`.
pub fn mmd_loss(h_s: &Matrix, h_t: &Matrix) -> Result<MmdLoss> {
    if h_s.rows() == 0 || h_t.rows() == 0 {
        return Err(Error::Empty { op: "mmd_loss" });
    }
    if h_s.cols() != h_t.cols() {
        return Err(Error::shape("mmd_loss", h_s.shape(), h_t.shape()));
    }
    let (ns, nt) = (h_s.rows() as f64, h_t.rows() as f64);
    let ms = h_s.column_sums().scale(1.0 / ns);
    let mt = h_t.column_sums().scale(1.0 / nt);
    let diff = ms.sub(&mt)?;
    let value = diff.data().iter().map(|v| v * v).sum();
    let mut d_source = Matrix::zeros(h_s.rows(), h_s.cols());
    let mut d_target = Matrix::zeros(h_t.rows(), h_t.cols());
    for r in 0..h_s.rows() {
        for (o, &d) in d_source.row_mut(r).iter_mut().zip(diff.data()) {
            *o = 2.0 * d / ns;
        }
    }
    for r in 0..h_t.rows() {
        for (o, &d) in d_target.row_mut(r).iter_mut().zip(diff.data()) {
            *o = -2.0 * d / nt;
        }
    }
    Ok(MmdLoss {
        value,
        d_source,
        d_target,
    })
}

/// Single-hidden-layer domain classifier, predicting `P(target | h)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainClassifier {
    pub hidden: LinearLayer,
    pub output: LinearLayer,
}

#[derive(Clone, Debug)]
pub struct AdversarialLoss {
    pub value: f64,
    /// Classifier parameter gradients (descent direction for the classifier).
    pub classifier_grads: Vec<Matrix>,
    /// The classifier's input gradient.
    pub d_input: Matrix,
    /// `−d_input`, what the feature path receives through gradient reversal.
    pub reversed: Matrix,
}

impl DomainClassifier {
    pub fn init(in_dim: usize, hidden: usize, rng: &mut RngState) -> Self {
        Self {
            hidden: LinearLayer::init_uniform(in_dim, hidden, rng),
            output: LinearLayer::init_uniform(hidden, 1, rng),
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("hidden.weight", &self.hidden.weight),
            ("hidden.bias", &self.hidden.bias),
            ("output.weight", &self.output.weight),
            ("output.bias", &self.output.bias),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.hidden.weight,
            &mut self.hidden.bias,
            &mut self.output.weight,
            &mut self.output.bias,
        ]
    }

    pub fn logits(&self, h: &Matrix) -> Result<Vec<f64>> {
        let a = self.hidden.apply(h)?.map(|v| v.max(0.0));
        Ok(self.output.apply(&a)?.into_vec())
    }
}

/// Binary cross-entropy of the domain classifier on a mixed batch (target is
/// the positive class), with gradients for the classifier and the reversed
/// gradient for the features.
pub fn adversarial_domain_loss(
    classifier: &DomainClassifier,
    h: &Matrix,
    tags: &[DomainTag],
) -> Result<AdversarialLoss> {
    if h.rows() != tags.len() {
        return Err(Error::shape("adversarial_domain_loss", h.shape(), (tags.len(), 1)));
    }
    let has = |t: DomainTag| tags.iter().any(|&x| x == t);
    if !has(DomainTag::Source) || !has(DomainTag::Target) {
        return Err(Error::Invalid(
            "adversarial domain loss needs both source and target rows".into(),
        ));
    }
    let (pre, hidden_cache) = classifier.hidden.forward(h)?;
    let (act, relu_cache) = relu_forward(&pre);
    let (z, out_cache) = classifier.output.forward(&act)?;
    let scores: Vec<f64> = z.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    let labels: Vec<f64> = tags
        .iter()
        .map(|t| if *t == DomainTag::Target { 1.0 } else { 0.0 })
        .collect();
    let bce = prediction_loss(&scores, &labels)?;
    let dz = Matrix::column_vector(bce.d_logits);
    let out = classifier.output.backward(&out_cache, &dz)?;
    let d_act = relu_backward(&relu_cache, &out.dx)?;
    let hid = classifier.hidden.backward(&hidden_cache, &d_act)?;
    let reversed = hid.dx.scale(-1.0);
    Ok(AdversarialLoss {
        value: bce.value,
        classifier_grads: vec![hid.d_weight, hid.d_bias, out.d_weight, out.d_bias],
        d_input: hid.dx,
        reversed,
    })
}
