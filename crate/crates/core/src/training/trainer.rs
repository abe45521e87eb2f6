use crate::data::TrainingView;
use crate::error::{Error, Result};
use crate::layers::DomainTag;
use crate::losses::{
    adversarial_domain_loss, attribute_reconstruction_loss, entropy_loss, mmd_loss, prediction_loss,
    DomainClassifier, LossReport, LossWeights,
};
use crate::model::{build_source_pairs, build_target_pairs, AlignmentMode, Model};
use crate::numerics::{Matrix, RngState};

use super::adam::Adam;
use super::config::TrainConfig;
use super::sampler::{sample_source_batch, sample_target_batch, EpochSampler};

pub(crate) const INIT_STREAM: u64 = 1;
pub(crate) const CLASSIFIER_STREAM: u64 = 2;
pub(crate) const SOURCE_SAMPLER_STREAM: u64 = 1 << 40;
pub(crate) const TARGET_SAMPLER_STREAM: u64 = 2 << 40;

/// The images drawn for one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationBatch {
    pub source_images: Matrix,
    pub source_labels: Vec<usize>,
    pub target_images: Matrix,
}

/// Loss values and gradients of the full objective for one batch.
#[derive(Clone, Debug)]
pub struct Objective {
    pub report: LossReport,
    /// In [`Model::params_mut`] order.
    pub model_grads: Vec<Matrix>,
    /// Descent gradients of the domain classifier, adversarial mode only.
    pub classifier_grads: Option<Vec<Matrix>>,
}

fn sum_grads(mut a: Vec<Matrix>, b: Vec<Matrix>) -> Result<Vec<Matrix>> {
    for (x, y) in a.iter_mut().zip(&b) {
        x.add_assign(y)?;
    }
    Ok(a)
}

/// Evaluates the objective on `batch` and backpropagates it.
///
/// Runs the metric network in training mode, so normalization running
/// statistics are updated as a side effect; parameters are not touched.
pub fn objective_and_gradients(
    model: &mut Model,
    classifier: Option<&DomainClassifier>,
    view: &TrainingView<'_>,
    batch: &IterationBatch,
    weights: &LossWeights,
) -> Result<Objective> {
    let mode = model.config.alignment;
    let (enc_s, cache_enc_s) = model.encoder.forward(view.source_attributes)?;
    let (enc_t, cache_enc_t) = model.encoder.forward(view.target_attributes)?;

    let src = build_source_pairs(&batch.source_images, &batch.source_labels, &enc_s)?;
    let tgt = build_target_pairs(&batch.target_images, &enc_t)?;
    let (outputs, trace) = model.metric.forward_train(&[&src, &tgt])?;

    let labels = src.labels.as_deref().expect("source pairs carry labels");
    let pre = prediction_loss(&outputs[0].scores, labels)?;
    let ent = entropy_loss(&outputs[1].logits, tgt.image_group(), view.num_target_classes())?;

    let (rec_s, cache_dec_s) = model.decoder.forward(&enc_s)?;
    let (rec_t, cache_dec_t) = model.decoder.forward(&enc_t)?;
    let (rec, g_rec_s, g_rec_t) =
        attribute_reconstruction_loss((view.source_attributes, &rec_s), (view.target_attributes, &rec_t))?;

    let hidden = trace.hidden();
    let (src_rows, tgt_rows) = (trace.segments()[0], trace.segments()[1]);
    let mut classifier_grads = None;
    let (align, d_hidden) = match mode {
        AlignmentMode::Mmd => {
            let mut value = 0.0;
            let mut d = [Matrix::zeros(0, 0), Matrix::zeros(0, 0)];
            for (layer, h) in hidden.iter().enumerate() {
                let m = mmd_loss(&h.row_range(src_rows.0, src_rows.1), &h.row_range(tgt_rows.0, tgt_rows.1))?;
                value += m.value;
                d[layer] = Matrix::vstack(&[&m.d_source, &m.d_target])?.scale(weights.lambda_align);
            }
            (Some(value), Some(d))
        }
        AlignmentMode::Dann => {
            let clf = classifier.ok_or_else(|| {
                Error::Invalid("adversarial alignment needs a domain classifier".into())
            })?;
            let mut tags = vec![DomainTag::Source; src.len()];
            tags.extend(std::iter::repeat(DomainTag::Target).take(tgt.len()));
            let adv = adversarial_domain_loss(clf, &hidden[1], &tags)?;
            let d0 = Matrix::zeros(hidden[0].rows(), hidden[0].cols());
            let d1 = adv.reversed.scale(weights.lambda_align);
            classifier_grads = Some(
                adv.classifier_grads
                    .into_iter()
                    .map(|g| g.scale(weights.lambda_align))
                    .collect(),
            );
            (Some(adv.value), Some([d0, d1]))
        }
        AlignmentMode::Dsbn | AlignmentMode::SingleBn | AlignmentMode::None => (None, None),
    };

    let report = LossReport::new(pre.value, ent.value, rec, align, weights);

    let d_ent: Vec<f64> = ent.d_logits.iter().map(|g| weights.lambda_ent * g).collect();
    let metric_grads = model.metric.backward(&trace, &[pre.d_logits, d_ent], d_hidden.as_ref())?;

    let (dx_dec_s, dec_grads_s) = model.decoder.backward(&cache_dec_s, &g_rec_s.scale(weights.lambda_rec))?;
    let (dx_dec_t, dec_grads_t) = model.decoder.backward(&cache_dec_t, &g_rec_t.scale(weights.lambda_rec))?;
    let decoder_grads = sum_grads(dec_grads_s, dec_grads_t)?;

    let d_enc_s = metric_grads.d_attributes[0].add(&dx_dec_s)?;
    let d_enc_t = metric_grads.d_attributes[1].add(&dx_dec_t)?;
    let (_, enc_grads_s) = model.encoder.backward(&cache_enc_s, &d_enc_s)?;
    let (_, enc_grads_t) = model.encoder.backward(&cache_enc_t, &d_enc_t)?;
    let encoder_grads = sum_grads(enc_grads_s, enc_grads_t)?;

    let mut model_grads = encoder_grads;
    model_grads.extend(decoder_grads);
    model_grads.extend(metric_grads.params);
    Ok(Objective {
        report,
        model_grads,
        classifier_grads,
    })
}

/// Model, optimizer state and sampling state of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: Adam,
    pub classifier: Option<DomainClassifier>,
    pub classifier_optimizer: Option<Adam>,
    pub(crate) source_sampler: EpochSampler,
    pub(crate) target_sampler: EpochSampler,
    pub(crate) iteration: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, view: &TrainingView<'_>) -> Result<Self> {
        config.validate()?;
        let model_config = config.model_config(view.feature_dim(), view.attribute_dim());
        let mut rng = RngState::derive(config.seed, INIT_STREAM);
        let model = Model::init(model_config, &mut rng)?;
        let optimizer = Adam::new(model.named_params().into_iter().map(|(_, p)| p));
        let (classifier, classifier_optimizer) = if config.alignment_mode == AlignmentMode::Dann {
            let mut rng = RngState::derive(config.seed, CLASSIFIER_STREAM);
            let clf = DomainClassifier::init(config.metric_hidden, config.classifier_hidden, &mut rng);
            let opt = Adam::new(clf.params().into_iter().map(|(_, p)| p));
            (Some(clf), Some(opt))
        } else {
            (None, None)
        };
        let source_sampler = EpochSampler::new(view.source_features.rows(), config.seed, SOURCE_SAMPLER_STREAM);
        let target_sampler = EpochSampler::new(view.target_features.rows(), config.seed, TARGET_SAMPLER_STREAM);
        Ok(Self {
            config,
            model,
            optimizer,
            classifier,
            classifier_optimizer,
            source_sampler,
            target_sampler,
            iteration: 0,
        })
    }

    /// Number of completed iterations.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    fn check_view(&self, view: &TrainingView<'_>) -> Result<()> {
        let c = &self.model.config;
        if view.feature_dim() != c.feature_dim || view.attribute_dim() != c.attribute_dim {
            return Err(Error::Invalid(format!(
                "dataset has d={} r={}, model expects d={} r={}",
                view.feature_dim(),
                view.attribute_dim(),
                c.feature_dim,
                c.attribute_dim
            )));
        }
        if view.source_features.rows() != self.source_sampler.len()
            || view.target_features.rows() != self.target_sampler.len()
        {
            return Err(Error::Invalid(format!(
                "dataset has {}/{} source/target images, sampler state was built for {}/{}",
                view.source_features.rows(),
                view.target_features.rows(),
                self.source_sampler.len(),
                self.target_sampler.len()
            )));
        }
        Ok(())
    }

    pub fn next_batch(&mut self, view: &TrainingView<'_>) -> Result<IterationBatch> {
        let b = self.config.batch_size;
        let (source_images, source_labels) = sample_source_batch(&mut self.source_sampler, view, b)?;
        let target_images = sample_target_batch(&mut self.target_sampler, view, b)?;
        Ok(IterationBatch {
            source_images,
            source_labels,
            target_images,
        })
    }

    /// One optimization step. A non-finite loss or gradient aborts with
    /// [`Error::NumericAbort`] before any parameter changes.
    pub fn train_iteration(&mut self, view: &TrainingView<'_>) -> Result<LossReport> {
        self.check_view(view)?;
        let batch = self.next_batch(view)?;
        let weights = self.config.weights();
        let iteration = self.iteration + 1;
        let obj = objective_and_gradients(&mut self.model, self.classifier.as_ref(), view, &batch, &weights)
            .map_err(|e| abort_on_non_finite(e, iteration))?;
        if let Some(term) = obj.report.first_non_finite() {
            return Err(Error::NumericAbort {
                iteration,
                term: term.to_string(),
            });
        }
        let lr = self.config.learning_rate;
        self.optimizer
            .update(self.model.params_mut(), &obj.model_grads, lr)
            .map_err(|e| abort_on_non_finite(e, iteration))?;
        if let (Some(clf), Some(opt), Some(grads)) =
            (&mut self.classifier, &mut self.classifier_optimizer, &obj.classifier_grads)
        {
            opt.update(clf.params_mut(), grads, lr)
                .map_err(|e| abort_on_non_finite(e, iteration))?;
        }
        self.iteration = iteration;
        Ok(obj.report)
    }

    /// Trains until `until` iterations are complete, calling `on_step` after
    /// each one.
    pub fn run_until(
        &mut self,
        view: &TrainingView<'_>,
        until: usize,
        mut on_step: impl FnMut(usize, &LossReport) -> Result<()>,
    ) -> Result<()> {
        let log_every = self.config.log_every.max(1);
        while self.iteration < until {
            let report = self.train_iteration(view)?;
            if self.iteration % log_every == 0 {
                log::info!(
                    "iter {} pre {:.6} ent {:.6} rec {:.6} total {:.6}",
                    self.iteration,
                    report.pre,
                    report.ent,
                    report.rec,
                    report.total
                );
            }
            on_step(self.iteration, &report)?;
        }
        Ok(())
    }
}

fn abort_on_non_finite(err: Error, iteration: usize) -> Error {
    match err {
        Error::NonFinite { what } => Error::NumericAbort { iteration, term: what },
        other => other,
    }
}

/// Result of [`train`]: the final trainer and the per-iteration losses.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub history: Vec<LossReport>,
}

/// Trains from scratch for `config.max_iterations` iterations.
pub fn train(config: &TrainConfig, view: &TrainingView<'_>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), view)?;
    let mut history = Vec::with_capacity(config.max_iterations);
    trainer.run_until(view, config.max_iterations, |_, r| {
        history.push(*r);
        Ok(())
    })?;
    Ok(TrainOutcome { trainer, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_source_classes: 6,
            num_target_classes: 3,
            feature_dim: 8,
            attribute_dim: 5,
            samples_per_class: 6,
            ..Default::default()
        }
    }

    fn small_config(mode: AlignmentMode) -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            max_iterations: 6,
            batch_size: 4,
            lambda_ent: 1e-3,
            alignment_mode: mode,
            encoder_hidden: 6,
            metric_hidden: 7,
            classifier_hidden: 5,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn runs_every_mode_and_is_deterministic() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let view = ds.training_view();
        for mode in AlignmentMode::ALL {
            let a = train(&small_config(mode), &view).unwrap();
            let b = train(&small_config(mode), &view).unwrap();
            assert_eq!(a.history.len(), 6);
            assert_eq!(a.history, b.history, "{mode}");
            assert_eq!(a.trainer.model, b.trainer.model);
            assert_eq!(a.history[0].align.is_some(), matches!(mode, AlignmentMode::Mmd | AlignmentMode::Dann));
        }
    }

    #[test]
    fn loss_decreases_on_fixed_batch() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let view = ds.training_view();
        let mut t = Trainer::new(small_config(AlignmentMode::Dsbn), &view).unwrap();
        let batch = t.next_batch(&view).unwrap();
        let w = t.config.weights();
        let first = objective_and_gradients(&mut t.model, None, &view, &batch, &w).unwrap();
        let mut last = first.report.total;
        for _ in 0..50 {
            let obj = objective_and_gradients(&mut t.model, None, &view, &batch, &w).unwrap();
            last = obj.report.total;
            t.optimizer.update(t.model.params_mut(), &obj.model_grads, 1e-2).unwrap();
        }
        assert!(last < first.report.total, "{last} >= {}", first.report.total);
    }

    #[test]
    fn wrong_dataset_rejected() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let mut t = Trainer::new(small_config(AlignmentMode::None), &ds.training_view()).unwrap();
        let other = generate_synthetic(&SyntheticSpec {
            feature_dim: 9,
            ..small_spec()
        })
        .unwrap();
        assert!(t.train_iteration(&other.training_view()).is_err());
    }

    #[test]
    fn non_finite_input_aborts_with_iteration() {
        let mut ds = generate_synthetic(&small_spec()).unwrap();
        let view = ds.training_view();
        let mut t = Trainer::new(small_config(AlignmentMode::None), &view).unwrap();
        t.train_iteration(&view).unwrap();
        let before = t.model.clone();
        for v in ds.source_attributes.data_mut() {
            *v = 1e300;
        }
        let err = t.train_iteration(&ds.training_view()).unwrap_err();
        assert!(err.is_numeric_abort(), "{err}");
        assert!(err.to_string().contains("iteration 2"), "{err}");
        assert_eq!(t.iteration(), 1);
        assert_eq!(t.model.named_params(), before.named_params());
    }
}
