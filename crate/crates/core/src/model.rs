//! Attribute encoder/decoder, semantic-visual pair batches and the shared
//! metric network that scores them.
//!
//! The metric network's first layer acts on concatenated `[x : a']` rows. A
//! pair batch is the full cross product of a few images with a few encoded
//! attribute rows, so the batch is stored in factored form (the distinct image
//! rows, the distinct attribute rows, and one index pair per semantic-visual
//! pair) and the first layer evaluates `W [x : a'] = W_x x + W_a a'` per image
//! and per category before gathering. [`PairBatch::pairs`] materializes the
//! concatenated rows when they are needed explicitly.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    relu_backward, relu_forward, BatchNormLayer, BnCache, DomainTag, DsbnLayer, LinearCache,
    LinearLayer, ReluCache,
};
use crate::numerics::{concat_cols, sigmoid_scalar, Matrix, RngState};

/// How source and target activations are aligned inside the metric network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AlignmentMode {
    /// Domain-specific batch normalization.
    #[serde(rename = "dsbn")]
    Dsbn,
    /// One batch-norm unit per layer, source and target normalized jointly.
    #[serde(rename = "singlebn")]
    SingleBn,
    /// Single BN plus a linear-kernel MMD penalty on the hidden activations.
    #[serde(rename = "mmd")]
    Mmd,
    /// Single BN plus a gradient-reversed domain classifier.
    #[serde(rename = "dann")]
    Dann,
    /// No normalization and no alignment.
    #[serde(rename = "none")]
    None,
}

impl AlignmentMode {
    pub const ALL: [AlignmentMode; 5] = [
        AlignmentMode::Dsbn,
        AlignmentMode::SingleBn,
        AlignmentMode::Mmd,
        AlignmentMode::Dann,
        AlignmentMode::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlignmentMode::Dsbn => "dsbn",
            AlignmentMode::SingleBn => "singlebn",
            AlignmentMode::Mmd => "mmd",
            AlignmentMode::Dann => "dann",
            AlignmentMode::None => "none",
        }
    }

    pub fn code(self) -> u64 {
        match self {
            AlignmentMode::Dsbn => 0,
            AlignmentMode::SingleBn => 1,
            AlignmentMode::Mmd => 2,
            AlignmentMode::Dann => 3,
            AlignmentMode::None => 4,
        }
    }

    pub fn from_code(code: u64) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.code() == code)
    }

    /// Whether the metric network has normalization layers.
    pub fn uses_norm(self) -> bool {
        self != AlignmentMode::None
    }

    fn domain_specific(self) -> bool {
        self == AlignmentMode::Dsbn
    }
}

impl fmt::Display for AlignmentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AlignmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|m| m.name() == lower)
            .ok_or_else(|| Error::Invalid(format!("unknown alignment mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub attribute_dim: usize,
    /// Width of the encoded attributes; equal to `feature_dim` by default.
    pub embed_dim: usize,
    pub encoder_hidden: usize,
    pub metric_hidden: usize,
    pub alignment: AlignmentMode,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("feature_dim", self.feature_dim),
            ("attribute_dim", self.attribute_dim),
            ("embed_dim", self.embed_dim),
            ("encoder_hidden", self.encoder_hidden),
            ("metric_hidden", self.metric_hidden),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// `Linear → ReLU → Linear`, used for both the attribute encoder and decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoLayerMlp {
    pub hidden: LinearLayer,
    pub output: LinearLayer,
}

pub type Encoder = TwoLayerMlp;
pub type Decoder = TwoLayerMlp;

#[derive(Clone, Debug)]
pub struct MlpCache {
    hidden: LinearCache,
    relu: ReluCache,
    output: LinearCache,
}

impl TwoLayerMlp {
    pub fn init(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut RngState) -> Self {
        Self {
            hidden: LinearLayer::init_uniform(in_dim, hidden, rng),
            output: LinearLayer::init_uniform(hidden, out_dim, rng),
        }
    }

    pub fn zeros(in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Self {
            hidden: LinearLayer::zeros(in_dim, hidden),
            output: LinearLayer::zeros(hidden, out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.output.out_dim()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, MlpCache)> {
        let (h, hidden) = self.hidden.forward(x)?;
        let (a, relu) = relu_forward(&h);
        let (y, output) = self.output.forward(&a)?;
        Ok((y, MlpCache { hidden, relu, output }))
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.0)
    }

    /// Returns `dx` and the parameter gradients in [`Self::params`] order.
    pub fn backward(&self, cache: &MlpCache, dy: &Matrix) -> Result<(Matrix, Vec<Matrix>)> {
        let out = self.output.backward(&cache.output, dy)?;
        let dh = relu_backward(&cache.relu, &out.dx)?;
        let hid = self.hidden.backward(&cache.hidden, &dh)?;
        Ok((hid.dx, vec![hid.d_weight, hid.d_bias, out.d_weight, out.d_bias]))
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
}

pub fn encode(encoder: &Encoder, attributes: &Matrix) -> Result<(Matrix, MlpCache)> {
    encoder.forward(attributes)
}

pub fn decode(decoder: &Decoder, encoded: &Matrix) -> Result<(Matrix, MlpCache)> {
    decoder.forward(encoded)
}

/// Semantic-visual pairs in factored form.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    /// Distinct image rows, `m x d`.
    pub images: Matrix,
    /// Encoded attribute rows of the tag's full category set, `K x r'`.
    pub attributes: Matrix,
    /// Image row of each pair.
    pub image_index: Vec<usize>,
    /// Category (attribute row) of each pair.
    pub category_index: Vec<usize>,
    /// 1 for matching pairs, 0 otherwise; source batches only.
    pub labels: Option<Vec<f64>>,
    pub tag: DomainTag,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.image_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_index.is_empty()
    }

    pub fn width(&self) -> usize {
        self.images.cols() + self.attributes.cols()
    }

    /// Image of each pair; the per-image grouping used by the entropy loss.
    pub fn image_group(&self) -> &[usize] {
        &self.image_index
    }

    /// Materialized `[x : a']` rows, one per pair.
    pub fn pairs(&self) -> Matrix {
        let x = self.images.select_rows(&self.image_index);
        let a = self.attributes.select_rows(&self.category_index);
        concat_cols(&x, &a).expect("pair halves have equal row counts")
    }
}

/// Pairs every image in the batch with every category present in the batch.
/// Categories are taken in increasing index order, pairs image-major.
pub fn build_source_pairs(images: &Matrix, labels: &[usize], encoded: &Matrix) -> Result<PairBatch> {
    if images.rows() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} images but {} labels",
            images.rows(),
            labels.len()
        )));
    }
    if images.rows() == 0 {
        return Err(Error::Empty { op: "build_source_pairs" });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= encoded.rows()) {
        return Err(Error::Invalid(format!(
            "label {bad} out of range for {} source categories",
            encoded.rows()
        )));
    }
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    let n = labels.len() * present.len();
    let mut image_index = Vec::with_capacity(n);
    let mut category_index = Vec::with_capacity(n);
    let mut pair_labels = Vec::with_capacity(n);
    for (i, &y) in labels.iter().enumerate() {
        for &c in &present {
            image_index.push(i);
            category_index.push(c);
            pair_labels.push(if c == y { 1.0 } else { 0.0 });
        }
    }
    Ok(PairBatch {
        images: images.clone(),
        attributes: encoded.clone(),
        image_index,
        category_index,
        labels: Some(pair_labels),
        tag: DomainTag::Source,
    })
}

/// Pairs every image with every target category; `K_t` consecutive pairs per
/// image.
pub fn build_target_pairs(images: &Matrix, encoded: &Matrix) -> Result<PairBatch> {
    if encoded.rows() == 0 {
        return Err(Error::Empty { op: "build_target_pairs (no categories)" });
    }
    if images.rows() == 0 {
        return Err(Error::Empty { op: "build_target_pairs (no images)" });
    }
    let k = encoded.rows();
    let n = images.rows() * k;
    let mut image_index = Vec::with_capacity(n);
    let mut category_index = Vec::with_capacity(n);
    for i in 0..images.rows() {
        for c in 0..k {
            image_index.push(i);
            category_index.push(c);
        }
    }
    Ok(PairBatch {
        images: images.clone(),
        attributes: encoded.clone(),
        image_index,
        category_index,
        labels: None,
        tag: DomainTag::Target,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum NormUnit {
    DomainSpecific(DsbnLayer),
    Shared(BatchNormLayer),
}

impl NormUnit {
    fn gamma(&self) -> &Matrix {
        match self {
            NormUnit::DomainSpecific(l) => &l.gamma,
            NormUnit::Shared(l) => &l.gamma,
        }
    }

    fn beta(&self) -> &Matrix {
        match self {
            NormUnit::DomainSpecific(l) => &l.beta,
            NormUnit::Shared(l) => &l.beta,
        }
    }

    fn params_mut(&mut self) -> [&mut Matrix; 2] {
        match self {
            NormUnit::DomainSpecific(l) => [&mut l.gamma, &mut l.beta],
            NormUnit::Shared(l) => [&mut l.gamma, &mut l.beta],
        }
    }

    fn forward_train(&mut self, x: &Matrix, tag: DomainTag) -> Result<(Matrix, BnCache)> {
        match self {
            NormUnit::DomainSpecific(l) => l.forward_train(x, tag),
            NormUnit::Shared(l) => l.forward_train(x, tag),
        }
    }

    fn forward_eval(&self, x: &Matrix, tag: DomainTag) -> Result<Matrix> {
        match self {
            NormUnit::DomainSpecific(l) => l.forward_eval(x, tag),
            NormUnit::Shared(l) => l.forward_eval(x, tag),
        }
    }

    fn backward(&self, cache: &BnCache, dz: &Matrix) -> Result<crate::layers::BnGrads> {
        match self {
            NormUnit::DomainSpecific(l) => l.backward(cache, dz),
            NormUnit::Shared(l) => l.backward(cache, dz),
        }
    }
}

/// Metric network: `Linear → Norm → ReLU → Linear → Norm → ReLU → Linear → sigmoid`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricNet {
    pub input: LinearLayer,
    pub norm1: Option<NormUnit>,
    pub hidden: LinearLayer,
    pub norm2: Option<NormUnit>,
    pub output: LinearLayer,
    feature_dim: usize,
    mode: AlignmentMode,
}

/// Logits and sigmoid scores of one pair batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricOutput {
    pub logits: Vec<f64>,
    pub scores: Vec<f64>,
}

/// Eval-mode pass including the post-ReLU hidden activations.
#[derive(Clone, Debug)]
pub struct EvalPass {
    pub output: MetricOutput,
    pub hidden: [Matrix; 2],
}

#[derive(Clone, Debug)]
struct NormTrace {
    caches: Vec<BnCache>,
}

/// Training-mode forward state for a set of pair batches processed together.
#[derive(Clone, Debug)]
pub struct MetricTrace {
    segments: Vec<(usize, usize)>,
    images: Vec<Matrix>,
    attributes: Vec<Matrix>,
    image_index: Vec<Vec<usize>>,
    category_index: Vec<Vec<usize>>,
    norm1: Option<NormTrace>,
    relu1: ReluCache,
    hidden: LinearCache,
    norm2: Option<NormTrace>,
    relu2: ReluCache,
    output: LinearCache,
    activations: [Matrix; 2],
}

impl MetricTrace {
    /// Post-ReLU activations of both hidden layers, all segments stacked.
    pub fn hidden(&self) -> &[Matrix; 2] {
        &self.activations
    }

    /// Row range of each input batch in the stacked activations.
    pub fn segments(&self) -> &[(usize, usize)] {
        &self.segments
    }
}

#[derive(Clone, Debug)]
pub struct MetricGrads {
    /// Parameter gradients in [`MetricNet::params`] order.
    pub params: Vec<Matrix>,
    /// Gradient with respect to each batch's image rows.
    pub d_images: Vec<Matrix>,
    /// Gradient with respect to each batch's encoded attribute rows.
    pub d_attributes: Vec<Matrix>,
}

impl MetricNet {
    pub fn init(config: &ModelConfig, rng: &mut RngState) -> Result<Self> {
        let width = config.metric_hidden;
        let in_dim = config.feature_dim + config.embed_dim;
        let input = LinearLayer::init_uniform(in_dim, width, rng);
        let hidden = LinearLayer::init_uniform(width, width, rng);
        let output = LinearLayer::init_uniform(width, 1, rng);
        Self::assemble(config, input, hidden, output)
    }

    /// All-zero weights; every pair scores exactly 0.5.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        let width = config.metric_hidden;
        let in_dim = config.feature_dim + config.embed_dim;
        Self::assemble(
            config,
            LinearLayer::zeros(in_dim, width),
            LinearLayer::zeros(width, width),
            LinearLayer::zeros(width, 1),
        )
    }

    fn assemble(
        config: &ModelConfig,
        input: LinearLayer,
        hidden: LinearLayer,
        output: LinearLayer,
    ) -> Result<Self> {
        let make_norm = || -> Result<Option<NormUnit>> {
            let w = config.metric_hidden;
            Ok(match config.alignment {
                AlignmentMode::None => None,
                AlignmentMode::Dsbn => Some(NormUnit::DomainSpecific(DsbnLayer::new(
                    w,
                    config.bn_momentum,
                    config.bn_epsilon,
                )?)),
                _ => Some(NormUnit::Shared(BatchNormLayer::new(
                    w,
                    config.bn_momentum,
                    config.bn_epsilon,
                )?)),
            })
        };
        Ok(Self {
            input,
            norm1: make_norm()?,
            hidden,
            norm2: make_norm()?,
            output,
            feature_dim: config.feature_dim,
            mode: config.alignment,
        })
    }

    pub fn mode(&self) -> AlignmentMode {
        self.mode
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.input.in_dim() - self.feature_dim
    }

    pub fn width(&self) -> usize {
        self.input.out_dim()
    }

    pub fn params(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("input.weight".to_string(), &self.input.weight),
            ("input.bias".to_string(), &self.input.bias),
        ];
        if let Some(n) = &self.norm1 {
            out.push(("norm1.gamma".into(), n.gamma()));
            out.push(("norm1.beta".into(), n.beta()));
        }
        out.push(("hidden.weight".into(), &self.hidden.weight));
        out.push(("hidden.bias".into(), &self.hidden.bias));
        if let Some(n) = &self.norm2 {
            out.push(("norm2.gamma".into(), n.gamma()));
            out.push(("norm2.beta".into(), n.beta()));
        }
        out.push(("output.weight".into(), &self.output.weight));
        out.push(("output.bias".into(), &self.output.bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = vec![&mut self.input.weight, &mut self.input.bias];
        if let Some(n) = &mut self.norm1 {
            out.extend(n.params_mut());
        }
        out.push(&mut self.hidden.weight);
        out.push(&mut self.hidden.bias);
        if let Some(n) = &mut self.norm2 {
            out.extend(n.params_mut());
        }
        out.push(&mut self.output.weight);
        out.push(&mut self.output.bias);
        out
    }

    fn check_batch(&self, batch: &PairBatch) -> Result<()> {
        if batch.images.cols() != self.feature_dim || batch.width() != self.input.in_dim() {
            return Err(Error::shape(
                "metric_forward",
                (batch.len(), batch.width()),
                self.input.weight.shape(),
            ));
        }
        if batch.category_index.len() != batch.image_index.len() {
            return Err(Error::Invalid("pair index vectors differ in length".into()));
        }
        Ok(())
    }

    /// First layer on the factored batch.
    fn pair_linear(&self, batch: &PairBatch) -> Result<Matrix> {
        let w = &self.input.weight;
        let wx_t = w.column_range(0, self.feature_dim).transpose();
        let wa_t = w.column_range(self.feature_dim, w.cols()).transpose();
        let per_image = batch.images.matmul(&wx_t)?;
        let per_category = batch.attributes.matmul(&wa_t)?;
        let width = self.width();
        let mut out = Matrix::zeros(batch.len(), width);
        let bias = self.input.bias.data();
        for (p, (&i, &c)) in batch.image_index.iter().zip(&batch.category_index).enumerate() {
            let (xi, ac) = (per_image.row(i), per_category.row(c));
            for ((o, (&x, &a)), &b) in out.row_mut(p).iter_mut().zip(xi.iter().zip(ac)).zip(bias) {
                *o = x + a + b;
            }
        }
        Ok(out)
    }

    fn norm_train(
        unit: &mut NormUnit,
        x: &Matrix,
        segments: &[(usize, usize)],
        tags: &[DomainTag],
        domain_specific: bool,
    ) -> Result<(Matrix, NormTrace)> {
        if domain_specific {
            let mut outs = Vec::with_capacity(segments.len());
            let mut caches = Vec::with_capacity(segments.len());
            for (&(s, e), &tag) in segments.iter().zip(tags) {
                let (z, c) = unit.forward_train(&x.row_range(s, e), tag)?;
                outs.push(z);
                caches.push(c);
            }
            let refs: Vec<&Matrix> = outs.iter().collect();
            Ok((Matrix::vstack(&refs)?, NormTrace { caches }))
        } else {
            let (z, c) = unit.forward_train(x, tags[0])?;
            Ok((z, NormTrace { caches: vec![c] }))
        }
    }

    fn norm_backward(
        unit: &NormUnit,
        trace: &NormTrace,
        dz: &Matrix,
        segments: &[(usize, usize)],
    ) -> Result<(Matrix, Matrix, Matrix)> {
        if trace.caches.len() == 1 {
            let g = unit.backward(&trace.caches[0], dz)?;
            return Ok((g.dx, g.d_gamma, g.d_beta));
        }
        let width = dz.cols();
        let mut dx_parts = Vec::with_capacity(segments.len());
        let mut d_gamma = Matrix::zeros(1, width);
        let mut d_beta = Matrix::zeros(1, width);
        for (cache, &(s, e)) in trace.caches.iter().zip(segments) {
            let g = unit.backward(cache, &dz.row_range(s, e))?;
            d_gamma.add_assign(&g.d_gamma)?;
            d_beta.add_assign(&g.d_beta)?;
            dx_parts.push(g.dx);
        }
        let refs: Vec<&Matrix> = dx_parts.iter().collect();
        Ok((Matrix::vstack(&refs)?, d_gamma, d_beta))
    }

    /// Training-mode forward over one or more batches.
    ///
    /// With domain-specific normalization each batch is normalized with its
    /// own statistics and updates the running statistics of its tag. With a
    /// shared unit the batches are normalized jointly, as one mixed batch.
    pub fn forward_train(&mut self, batches: &[&PairBatch]) -> Result<(Vec<MetricOutput>, MetricTrace)> {
        if batches.is_empty() {
            return Err(Error::Empty { op: "metric_forward" });
        }
        let mut segments = Vec::with_capacity(batches.len());
        let mut firsts = Vec::with_capacity(batches.len());
        let mut start = 0;
        for b in batches {
            self.check_batch(b)?;
            firsts.push(self.pair_linear(b)?);
            segments.push((start, start + b.len()));
            start += b.len();
        }
        let tags: Vec<DomainTag> = batches.iter().map(|b| b.tag).collect();
        let refs: Vec<&Matrix> = firsts.iter().collect();
        let h1 = Matrix::vstack(&refs)?;
        let specific = self.mode.domain_specific();

        let (n1, norm1) = match &mut self.norm1 {
            Some(unit) => {
                let (z, t) = Self::norm_train(unit, &h1, &segments, &tags, specific)?;
                (z, Some(t))
            }
            None => (h1, None),
        };
        let (a1, relu1) = relu_forward(&n1);
        let (h2, hidden) = self.hidden.forward(&a1)?;
        let (n2, norm2) = match &mut self.norm2 {
            Some(unit) => {
                let (z, t) = Self::norm_train(unit, &h2, &segments, &tags, specific)?;
                (z, Some(t))
            }
            None => (h2, None),
        };
        let (a2, relu2) = relu_forward(&n2);
        let (z, output) = self.output.forward(&a2)?;

        let outputs = segments
            .iter()
            .map(|&(s, e)| {
                let logits = z.data()[s..e].to_vec();
                let scores = logits.iter().map(|&v| sigmoid_scalar(v)).collect();
                MetricOutput { logits, scores }
            })
            .collect();
        let trace = MetricTrace {
            segments,
            images: batches.iter().map(|b| b.images.clone()).collect(),
            attributes: batches.iter().map(|b| b.attributes.clone()).collect(),
            image_index: batches.iter().map(|b| b.image_index.clone()).collect(),
            category_index: batches.iter().map(|b| b.category_index.clone()).collect(),
            norm1,
            relu1,
            hidden,
            norm2,
            relu2,
            output,
            activations: [a1, a2],
        };
        Ok((outputs, trace))
    }

    /// Eval-mode forward with the tag's global statistics. Never mutates.
    pub fn evaluate(&self, batch: &PairBatch) -> Result<EvalPass> {
        self.check_batch(batch)?;
        let h1 = self.pair_linear(batch)?;
        let n1 = match &self.norm1 {
            Some(unit) => unit.forward_eval(&h1, batch.tag)?,
            None => h1,
        };
        let a1 = n1.map(|v| v.max(0.0));
        let h2 = self.hidden.apply(&a1)?;
        let n2 = match &self.norm2 {
            Some(unit) => unit.forward_eval(&h2, batch.tag)?,
            None => h2,
        };
        let a2 = n2.map(|v| v.max(0.0));
        let z = self.output.apply(&a2)?;
        let logits = z.into_vec();
        let scores = logits.iter().map(|&v| sigmoid_scalar(v)).collect();
        Ok(EvalPass {
            output: MetricOutput { logits, scores },
            hidden: [a1, a2],
        })
    }

    pub fn forward_eval(&self, batch: &PairBatch) -> Result<MetricOutput> {
        Ok(self.evaluate(batch)?.output)
    }

    /// Single-batch convenience wrapper over the train and eval paths.
    pub fn forward(&mut self, batch: &PairBatch, train: bool) -> Result<MetricOutput> {
        if train {
            let (mut out, _) = self.forward_train(&[batch])?;
            Ok(out.remove(0))
        } else {
            self.forward_eval(batch)
        }
    }

    /// Backward through a training-mode pass.
    ///
    /// `d_logits` holds one gradient vector per batch. `d_hidden`, when given,
    /// is added to the gradient arriving at the two post-ReLU hidden
    /// activations (stacked like [`MetricTrace::hidden`]).
    pub fn backward(
        &self,
        trace: &MetricTrace,
        d_logits: &[Vec<f64>],
        d_hidden: Option<&[Matrix; 2]>,
    ) -> Result<MetricGrads> {
        if d_logits.len() != trace.segments.len() {
            return Err(Error::Invalid(format!(
                "{} logit gradients for {} batches",
                d_logits.len(),
                trace.segments.len()
            )));
        }
        let total = trace.segments.last().map_or(0, |s| s.1);
        let mut dz = Vec::with_capacity(total);
        for (g, &(s, e)) in d_logits.iter().zip(&trace.segments) {
            if g.len() != e - s {
                return Err(Error::Invalid(format!(
                    "logit gradient of length {} for a batch of {} pairs",
                    g.len(),
                    e - s
                )));
            }
            dz.extend_from_slice(g);
        }
        let dz = Matrix::column_vector(dz);
        let out = self.output.backward(&trace.output, &dz)?;
        let mut da2 = out.dx;
        if let Some(extra) = d_hidden {
            da2.add_assign(&extra[1])?;
        }
        let dn2 = relu_backward(&trace.relu2, &da2)?;
        let (dh2, norm2_grads) = match (&self.norm2, &trace.norm2) {
            (Some(unit), Some(t)) => {
                let (dx, dg, db) = Self::norm_backward(unit, t, &dn2, &trace.segments)?;
                (dx, Some((dg, db)))
            }
            _ => (dn2, None),
        };
        let hid = self.hidden.backward(&trace.hidden, &dh2)?;
        let mut da1 = hid.dx;
        if let Some(extra) = d_hidden {
            da1.add_assign(&extra[0])?;
        }
        let dn1 = relu_backward(&trace.relu1, &da1)?;
        let (dh1, norm1_grads) = match (&self.norm1, &trace.norm1) {
            (Some(unit), Some(t)) => {
                let (dx, dg, db) = Self::norm_backward(unit, t, &dn1, &trace.segments)?;
                (dx, Some((dg, db)))
            }
            _ => (dn1, None),
        };

        // First layer: scatter pair gradients back onto images and categories.
        let width = self.width();
        let w = &self.input.weight;
        let wx = w.column_range(0, self.feature_dim);
        let wa = w.column_range(self.feature_dim, w.cols());
        let mut d_wx = Matrix::zeros(width, self.feature_dim);
        let mut d_wa = Matrix::zeros(width, wa.cols());
        let mut d_images = Vec::with_capacity(trace.segments.len());
        let mut d_attributes = Vec::with_capacity(trace.segments.len());
        for (seg, &(s, _)) in trace.segments.iter().enumerate() {
            let images = &trace.images[seg];
            let attrs = &trace.attributes[seg];
            let mut g_img = Matrix::zeros(images.rows(), width);
            let mut g_cat = Matrix::zeros(attrs.rows(), width);
            for (p, (&i, &c)) in trace.image_index[seg]
                .iter()
                .zip(&trace.category_index[seg])
                .enumerate()
            {
                let g = dh1.row(s + p);
                for (o, &v) in g_img.row_mut(i).iter_mut().zip(g) {
                    *o += v;
                }
                for (o, &v) in g_cat.row_mut(c).iter_mut().zip(g) {
                    *o += v;
                }
            }
            d_wx.add_assign(&g_img.transpose().matmul(images)?)?;
            d_wa.add_assign(&g_cat.transpose().matmul(attrs)?)?;
            d_images.push(g_img.matmul(&wx)?);
            d_attributes.push(g_cat.matmul(&wa)?);
        }
        let d_input_weight = concat_cols(&d_wx, &d_wa)?;
        let d_input_bias = dh1.column_sums();

        let mut params = vec![d_input_weight, d_input_bias];
        if let Some((dg, db)) = norm1_grads {
            params.push(dg);
            params.push(db);
        }
        params.push(hid.d_weight);
        params.push(hid.d_bias);
        if let Some((dg, db)) = norm2_grads {
            params.push(dg);
            params.push(db);
        }
        params.push(out.d_weight);
        params.push(out.d_bias);
        Ok(MetricGrads {
            params,
            d_images,
            d_attributes,
        })
    }

    /// Running statistics of both normalization layers, for inspection.
    pub fn norm_units(&self) -> [Option<&NormUnit>; 2] {
        [self.norm1.as_ref(), self.norm2.as_ref()]
    }

    pub fn norm_units_mut(&mut self) -> [Option<&mut NormUnit>; 2] {
        [self.norm1.as_mut(), self.norm2.as_mut()]
    }
}

/// Encoder, decoder and metric network.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub metric: MetricNet,
}

impl Model {
    pub fn init(config: ModelConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let encoder = TwoLayerMlp::init(config.attribute_dim, config.encoder_hidden, config.embed_dim, rng);
        let decoder = TwoLayerMlp::init(config.embed_dim, config.encoder_hidden, config.attribute_dim, rng);
        let metric = MetricNet::init(&config, rng)?;
        Ok(Self {
            config,
            encoder,
            decoder,
            metric,
        })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            encoder: TwoLayerMlp::zeros(config.attribute_dim, config.encoder_hidden, config.embed_dim),
            decoder: TwoLayerMlp::zeros(config.embed_dim, config.encoder_hidden, config.attribute_dim),
            metric: MetricNet::zeros(&config)?,
            config,
        })
    }

    /// Every trainable parameter with a stable name, in update order.
    pub fn named_params(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = Vec::new();
        for (n, p) in self.encoder.params() {
            out.push((format!("encoder.{n}"), p));
        }
        for (n, p) in self.decoder.params() {
            out.push((format!("decoder.{n}"), p));
        }
        for (n, p) in self.metric.params() {
            out.push((format!("metric.{n}"), p));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.encoder.params_mut();
        out.extend(self.decoder.params_mut());
        out.extend(self.metric.params_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.data().len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error};

    fn config(mode: AlignmentMode) -> ModelConfig {
        ModelConfig {
            feature_dim: 3,
            attribute_dim: 2,
            embed_dim: 3,
            encoder_hidden: 4,
            metric_hidden: 5,
            alignment: mode,
            bn_momentum: 0.9,
            bn_epsilon: 1e-5,
        }
    }

    fn random(rows: usize, cols: usize, rng: &mut RngState) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data_mut() {
            *v = rng.normal();
        }
        m
    }

    #[test]
    fn alignment_mode_parses() {
        for m in AlignmentMode::ALL {
            assert_eq!(m.name().parse::<AlignmentMode>().unwrap(), m);
            assert_eq!(AlignmentMode::from_code(m.code()), Some(m));
        }
        assert!("bogus".parse::<AlignmentMode>().is_err());
    }

    #[test]
    fn zero_encoder_outputs_zero() {
        let enc = TwoLayerMlp::zeros(2, 4, 3);
        let (out, _) = encode(&enc, &Matrix::filled(5, 2, 1.3)).unwrap();
        assert_eq!(out, Matrix::zeros(5, 3));
        let (one, _) = encode(&enc, &Matrix::filled(1, 2, 1.0)).unwrap();
        assert_eq!(one.shape(), (1, 3));
        assert!(encode(&enc, &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn zero_decoder_reconstruction_distance() {
        let dec = TwoLayerMlp::zeros(3, 4, 2);
        let a = Matrix::from_rows(&[[1.0, 2.0], [0.0, -3.0]]).unwrap();
        let (a_hat, _) = decode(&dec, &Matrix::filled(2, 3, 0.7)).unwrap();
        assert_eq!(a_hat, Matrix::zeros(2, 2));
        let d: Vec<f64> = (0..2).map(|r| a.row(r).iter().map(|v| v * v).sum()).collect();
        assert_eq!(d, vec![5.0, 9.0]);
    }

    #[test]
    fn pass_through_decoder() {
        // hidden = [I; -I] then output = [I, -I] reproduces its input through the ReLU.
        let n = 3;
        let mut w1 = Matrix::zeros(2 * n, n);
        let mut w2 = Matrix::zeros(n, 2 * n);
        for i in 0..n {
            w1.set(i, i, 1.0);
            w1.set(n + i, i, -1.0);
            w2.set(i, i, 1.0);
            w2.set(i, n + i, -1.0);
        }
        let dec = TwoLayerMlp {
            hidden: LinearLayer::new(w1, Matrix::zeros(1, 2 * n)).unwrap(),
            output: LinearLayer::new(w2, Matrix::zeros(1, n)).unwrap(),
        };
        let a = Matrix::from_rows(&[[0.5, -1.0, 2.0], [3.0, 0.0, -0.25]]).unwrap();
        assert!(dec.apply(&a).unwrap().max_abs_diff(&a) < 1e-15);
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let mut rng = RngState::new(21);
        let enc = TwoLayerMlp::init(2, 4, 3, &mut rng);
        let a = random(3, 2, &mut rng);
        let proj = random(3, 3, &mut rng);
        let (_, cache) = enc.forward(&a).unwrap();
        let (dx, grads) = enc.backward(&cache, &proj).unwrap();
        let num = finite_diff_grad(|x| enc.apply(x).unwrap().hadamard(&proj).unwrap().sum(), &a, 1e-5).unwrap();
        assert!(relative_error(&dx, &num) < 1e-4);
        let num_w = finite_diff_grad(
            |w| {
                let mut e = enc.clone();
                e.hidden.weight = w.clone();
                e.apply(&a).unwrap().hadamard(&proj).unwrap().sum()
            },
            &enc.hidden.weight,
            1e-5,
        )
        .unwrap();
        assert!(relative_error(&grads[0], &num_w) < 1e-4);
    }

    #[test]
    fn source_pairs_counting() {
        let x = Matrix::from_rows(&[[1.0], [2.0], [3.0]]).unwrap();
        let enc = Matrix::from_rows(&[[0.0]; 6]).unwrap();
        let b = build_source_pairs(&x, &[3, 5, 3], &enc).unwrap();
        assert_eq!(b.len(), 6);
        assert_eq!(b.labels.as_ref().unwrap().iter().sum::<f64>(), 3.0);
        assert_eq!(b.category_index, vec![3, 5, 3, 5, 3, 5]);
        let same = build_source_pairs(&x, &[1, 1, 1], &enc).unwrap();
        assert_eq!(same.len(), 3);
        assert!(same.labels.unwrap().iter().all(|&y| y == 1.0));
        let one = build_source_pairs(&x.row_range(0, 1), &[4], &enc).unwrap();
        assert_eq!((one.len(), one.labels.unwrap()), (1, vec![1.0]));
        assert!(build_source_pairs(&x, &[0, 1, 6], &enc).is_err());
    }

    #[test]
    fn target_pairs_layout() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let a = Matrix::from_rows(&[[10.0], [20.0], [30.0]]).unwrap();
        let b = build_target_pairs(&x, &a).unwrap();
        assert_eq!(b.len(), 6);
        assert_eq!(b.image_group(), &[0, 0, 0, 1, 1, 1]);
        assert!(b.labels.is_none());
        let pairs = b.pairs();
        for p in 0..6 {
            let (i, c) = (p / 3, p % 3);
            let expect = [x.get(i, 0), x.get(i, 1), a.get(c, 0)];
            assert_eq!(pairs.row(p), &expect);
        }
        let single = build_target_pairs(&x.row_range(0, 1), &a.row_range(0, 1)).unwrap();
        assert_eq!(single.len(), 1);
        assert!(build_target_pairs(&x, &Matrix::zeros(0, 1)).is_err());
    }

    #[test]
    fn zero_metric_scores_half() {
        for mode in [AlignmentMode::None, AlignmentMode::Dsbn] {
            let mut net = MetricNet::zeros(&config(mode)).unwrap();
            let mut rng = RngState::new(1);
            let b = build_target_pairs(&random(2, 3, &mut rng), &random(4, 3, &mut rng)).unwrap();
            let out = net.forward(&b, true).unwrap();
            assert!(out.logits.iter().all(|&z| z == 0.0));
            assert!(out.scores.iter().all(|&s| s == 0.5));
        }
    }

    #[test]
    fn factored_first_layer_matches_concatenation() {
        let mut rng = RngState::new(4);
        let net = MetricNet::init(&config(AlignmentMode::None), &mut rng).unwrap();
        let b = build_source_pairs(&random(4, 3, &mut rng), &[0, 2, 2, 1], &random(3, 3, &mut rng)).unwrap();
        let factored = net.pair_linear(&b).unwrap();
        let direct = net.input.apply(&b.pairs()).unwrap();
        assert!(factored.max_abs_diff(&direct) < 1e-12);
    }

    #[test]
    fn eval_requires_trained_statistics() {
        let mut rng = RngState::new(2);
        let net = MetricNet::init(&config(AlignmentMode::Dsbn), &mut rng).unwrap();
        let b = build_target_pairs(&random(2, 3, &mut rng), &random(2, 3, &mut rng)).unwrap();
        assert!(matches!(net.forward_eval(&b), Err(Error::StatsUninitialized(DomainTag::Target))));
    }

    #[test]
    fn source_pass_leaves_target_statistics_untouched() {
        let mut rng = RngState::new(8);
        let mut net = MetricNet::init(&config(AlignmentMode::Dsbn), &mut rng).unwrap();
        let before = net.clone();
        let b = build_source_pairs(&random(4, 3, &mut rng), &[0, 1, 0, 1], &random(2, 3, &mut rng)).unwrap();
        net.forward_train(&[&b]).unwrap();
        for (now, then) in net.norm_units().iter().zip(before.norm_units()) {
            match (now, then) {
                (Some(NormUnit::DomainSpecific(a)), Some(NormUnit::DomainSpecific(b))) => {
                    assert_eq!(a.running(DomainTag::Target), b.running(DomainTag::Target));
                    assert_ne!(a.running(DomainTag::Source), b.running(DomainTag::Source));
                }
                _ => panic!("expected domain-specific units"),
            }
        }
    }

    #[test]
    fn eval_is_row_permutation_equivariant() {
        let mut rng = RngState::new(12);
        let mut net = MetricNet::init(&config(AlignmentMode::Dsbn), &mut rng).unwrap();
        let x = random(4, 3, &mut rng);
        let a = random(3, 3, &mut rng);
        let b = build_target_pairs(&x, &a).unwrap();
        net.forward_train(&[&b]).unwrap();
        let out = net.forward_eval(&b).unwrap();
        let perm = [2, 0, 3, 1];
        let bp = build_target_pairs(&x.select_rows(&perm), &a).unwrap();
        let outp = net.forward_eval(&bp).unwrap();
        for (new_i, &old_i) in perm.iter().enumerate() {
            for c in 0..3 {
                assert_eq!(outp.logits[new_i * 3 + c], out.logits[old_i * 3 + c]);
            }
        }
    }

    fn metric_loss(net: &MetricNet, b: &[&PairBatch], proj: &[Vec<f64>]) -> f64 {
        let mut n = net.clone();
        let (outs, _) = n.forward_train(b).unwrap();
        outs.iter()
            .zip(proj)
            .map(|(o, p)| o.logits.iter().zip(p).map(|(z, w)| z * w).sum::<f64>())
            .sum()
    }

    #[test]
    fn metric_gradients_match_finite_differences() {
        for mode in [AlignmentMode::Dsbn, AlignmentMode::SingleBn, AlignmentMode::None] {
            for seed in 0..5 {
                let mut rng = RngState::new(300 + seed);
                let mut net = MetricNet::init(&config(mode), &mut rng).unwrap();
                // Non-zero biases keep pre-activations off the ReLU kink.
                for b in [&mut net.input.bias, &mut net.hidden.bias] {
                    b.data_mut().iter_mut().for_each(|v| *v = 0.3 * rng.normal());
                }
                let src = build_source_pairs(&random(4, 3, &mut rng), &[0, 1, 1, 2], &random(3, 3, &mut rng)).unwrap();
                let tgt = build_target_pairs(&random(3, 3, &mut rng), &random(2, 3, &mut rng)).unwrap();
                let proj: Vec<Vec<f64>> = [src.len(), tgt.len()]
                    .iter()
                    .map(|&n| (0..n).map(|_| rng.normal()).collect())
                    .collect();
                let probe = net.clone();
                let (_, trace) = net.forward_train(&[&src, &tgt]).unwrap();
                let g = probe.backward(&trace, &proj, None).unwrap();
                for (idx, (name, p)) in probe.params().into_iter().enumerate() {
                    let num = finite_diff_grad(
                        |w| {
                            let mut n = probe.clone();
                            *n.params_mut()[idx] = w.clone();
                            metric_loss(&n, &[&src, &tgt], &proj)
                        },
                        p,
                        1e-5,
                    )
                    .unwrap();
                    if mode.uses_norm() && (name == "input.bias" || name == "hidden.bias") {
                        // Normalization cancels any shift, so these gradients vanish.
                        assert!(g.params[idx].data().iter().all(|v| v.abs() < 1e-9), "{mode} {name}");
                        assert!(num.data().iter().all(|v| v.abs() < 1e-6), "{mode} {name}");
                        continue;
                    }
                    let err = relative_error(&g.params[idx], &num);
                    assert!(err < 1e-4, "{mode} seed {seed} {name}: {err}");
                }
                let num_a = finite_diff_grad(
                    |a| {
                        let mut t = tgt.clone();
                        t.attributes = a.clone();
                        metric_loss(&probe, &[&src, &t], &proj)
                    },
                    &tgt.attributes,
                    1e-5,
                )
                .unwrap();
                assert!(relative_error(&g.d_attributes[1], &num_a) < 1e-4);
            }
        }
    }
}
