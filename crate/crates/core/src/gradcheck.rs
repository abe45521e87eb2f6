//! Finite-difference verification of every analytic gradient.
//!
//! Each component builds a small random instance from a seed, computes its
//! analytic gradient, and compares it with central differences of the same
//! scalar objective using the norm-wise [`relative_error`].

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, SyntheticSpec};
use crate::error::{Error, Result};
use crate::layers::{relu_backward, relu_forward, BatchNormLayer, DomainTag, DsbnLayer, LinearLayer};
use crate::losses::{
    adversarial_domain_loss, entropy_loss, mmd_loss, prediction_loss, reconstruction_loss, DomainClassifier,
    LossWeights,
};
use crate::model::{AlignmentMode, TwoLayerMlp};
use crate::numerics::{finite_diff_grad, relative_error, sigmoid_scalar, Matrix, RngState};
use crate::training::{objective_and_gradients, TrainConfig, Trainer};

pub const GRADCHECK_COMPONENTS: [&str; 12] = [
    "linear",
    "relu",
    "bn",
    "dsbn",
    "encoder",
    "decoder",
    "prediction_loss",
    "entropy_loss",
    "reconstruction_loss",
    "mmd_loss",
    "adversarial_classifier",
    "composite",
];

const GRADCHECK_STREAM: u64 = 0x4752_4144;

/// Multiplies one component's analytic gradient by `scale`, to confirm that
/// the check notices a wrong gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fault {
    pub component: String,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub seeds: Vec<u64>,
    pub threshold: f64,
    pub step: f64,
    pub fault: Option<Fault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seeds: (0..20).collect(),
            threshold: 1e-4,
            step: 1e-5,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentResult {
    pub component: String,
    pub max_error: f64,
    pub worst_seed: u64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub threshold: f64,
    pub components: Vec<ComponentResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.passed)
    }
}

fn randn(rng: &mut RngState, rows: usize, cols: usize, scale: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = scale * rng.normal();
    }
    m
}

fn flatten(parts: &[Matrix]) -> Matrix {
    Matrix::row_vector(parts.iter().flat_map(|m| m.data().iter().copied()).collect())
}

fn weighted_sum(y: &Matrix, g: &Matrix) -> f64 {
    y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
}

/// Central differences of `f` with respect to each matrix in `params`.
fn numeric_grads(params: &[Matrix], h: f64, f: impl Fn(&[Matrix]) -> Result<f64>) -> Result<Vec<Matrix>> {
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let mut failure = None;
        let grad = finite_diff_grad(
            |p| {
                let mut probe = params.to_vec();
                probe[i] = p.clone();
                match f(&probe) {
                    Ok(v) => v,
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            &params[i],
            h,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        out.push(grad?);
    }
    Ok(out)
}

fn mlp_from(p: &[Matrix]) -> TwoLayerMlp {
    TwoLayerMlp {
        hidden: LinearLayer {
            weight: p[0].clone(),
            bias: p[1].clone(),
        },
        output: LinearLayer {
            weight: p[2].clone(),
            bias: p[3].clone(),
        },
    }
}

fn mlp_params(m: &TwoLayerMlp) -> Vec<Matrix> {
    m.params().into_iter().map(|(_, p)| p.clone()).collect()
}

/// Analytic and numeric gradients of one component instance.
fn component_grads(component: &str, seed: u64, h: f64) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    let mut rng = RngState::derive(seed, GRADCHECK_STREAM);
    match component {
        "linear" => {
            let layer = LinearLayer::init_uniform(4, 3, &mut rng);
            let x = randn(&mut rng, 5, 4, 1.0);
            let g = randn(&mut rng, 5, 3, 1.0);
            let (_, cache) = layer.forward(&x)?;
            let a = layer.backward(&cache, &g)?;
            let params = [layer.weight.clone(), layer.bias.clone(), x];
            let n = numeric_grads(&params, h, |p| {
                let l = LinearLayer {
                    weight: p[0].clone(),
                    bias: p[1].clone(),
                };
                Ok(weighted_sum(&l.apply(&p[2])?, &g))
            })?;
            Ok((vec![a.d_weight, a.d_bias, a.dx], n))
        }
        "relu" => {
            let x = randn(&mut rng, 6, 4, 1.0).map(|v| v.signum() * (0.1 + v.abs()));
            let g = randn(&mut rng, 6, 4, 1.0);
            let (_, cache) = relu_forward(&x);
            let a = relu_backward(&cache, &g)?;
            let n = numeric_grads(&[x], h, |p| Ok(weighted_sum(&relu_forward(&p[0]).0, &g)))?;
            Ok((vec![a], n))
        }
        "bn" | "dsbn" => {
            let width = 5;
            let x = randn(&mut rng, 6, width, 2.0).map(|v| v + 1.0);
            let g = randn(&mut rng, 6, width, 1.0);
            let gamma = randn(&mut rng, 1, width, 1.0).map(|v| v + 1.0);
            let beta = randn(&mut rng, 1, width, 1.0);
            let tag = if seed % 2 == 0 { DomainTag::Source } else { DomainTag::Target };
            let run = |gamma: &Matrix, beta: &Matrix, x: &Matrix| -> Result<(Matrix, crate::layers::BnGrads)> {
                if component == "bn" {
                    let mut l = BatchNormLayer::new(width, 0.9, 1e-5)?;
                    l.gamma = gamma.clone();
                    l.beta = beta.clone();
                    let (z, cache) = l.forward_train(x, tag)?;
                    let grads = l.backward(&cache, &g)?;
                    Ok((z, grads))
                } else {
                    let mut l = DsbnLayer::new(width, 0.9, 1e-5)?;
                    l.gamma = gamma.clone();
                    l.beta = beta.clone();
                    let (z, cache) = l.forward_train(x, tag)?;
                    let grads = l.backward(&cache, &g)?;
                    Ok((z, grads))
                }
            };
            let (_, a) = run(&gamma, &beta, &x)?;
            let n = numeric_grads(&[gamma, beta, x], h, |p| Ok(weighted_sum(&run(&p[0], &p[1], &p[2])?.0, &g)))?;
            Ok((vec![a.d_gamma, a.d_beta, a.dx], n))
        }
        "encoder" | "decoder" => {
            let (i, o) = if component == "encoder" { (4, 5) } else { (5, 4) };
            let mlp = TwoLayerMlp::init(i, 6, o, &mut rng);
            let x = randn(&mut rng, 3, i, 1.0);
            let g = randn(&mut rng, 3, o, 1.0);
            let (_, cache) = mlp.forward(&x)?;
            let (dx, mut a) = mlp.backward(&cache, &g)?;
            a.push(dx);
            let mut params = mlp_params(&mlp);
            params.push(x);
            let n = numeric_grads(&params, h, |p| Ok(weighted_sum(&mlp_from(p).apply(&p[4])?, &g)))?;
            Ok((a, n))
        }
        "prediction_loss" => {
            let z = randn(&mut rng, 12, 1, 2.0);
            let labels: Vec<f64> = (0..12).map(|_| if rng.coin() { 1.0 } else { 0.0 }).collect();
            let loss = |z: &Matrix| -> Result<_> {
                let scores: Vec<f64> = z.data().iter().map(|&v| sigmoid_scalar(v)).collect();
                prediction_loss(&scores, &labels)
            };
            let a = Matrix::column_vector(loss(&z)?.d_logits);
            let n = numeric_grads(&[z], h, |p| Ok(loss(&p[0])?.value))?;
            Ok((vec![a], n))
        }
        "entropy_loss" => {
            let (images, k) = (4, 3);
            let z = randn(&mut rng, images * k, 1, 1.5);
            let groups: Vec<usize> = (0..images).flat_map(|i| std::iter::repeat(i).take(k)).collect();
            let a = Matrix::column_vector(entropy_loss(z.data(), &groups, k)?.d_logits);
            let n = numeric_grads(&[z], h, |p| Ok(entropy_loss(p[0].data(), &groups, k)?.value))?;
            Ok((vec![a], n))
        }
        "reconstruction_loss" => {
            let target = randn(&mut rng, 4, 5, 1.0);
            let recon = randn(&mut rng, 4, 5, 1.0);
            let (_, a) = reconstruction_loss(&target, &recon)?;
            let n = numeric_grads(&[recon], h, |p| Ok(reconstruction_loss(&target, &p[0])?.0))?;
            Ok((vec![a], n))
        }
        "mmd_loss" => {
            let hs = randn(&mut rng, 5, 4, 1.0);
            let ht = randn(&mut rng, 7, 4, 1.0).map(|v| v + 0.5);
            let m = mmd_loss(&hs, &ht)?;
            let n = numeric_grads(&[hs, ht], h, |p| Ok(mmd_loss(&p[0], &p[1])?.value))?;
            Ok((vec![m.d_source, m.d_target], n))
        }
        "adversarial_classifier" => {
            let clf = DomainClassifier::init(4, 5, &mut rng);
            let hmat = randn(&mut rng, 8, 4, 1.0);
            let tags: Vec<DomainTag> = (0..8)
                .map(|i| if i < 4 { DomainTag::Source } else { DomainTag::Target })
                .collect();
            let adv = adversarial_domain_loss(&clf, &hmat, &tags)?;
            let mut a = adv.classifier_grads;
            a.push(adv.d_input);
            let mut params: Vec<Matrix> = clf.params().into_iter().map(|(_, p)| p.clone()).collect();
            params.push(hmat);
            let n = numeric_grads(&params, h, |p| {
                let c = DomainClassifier {
                    hidden: LinearLayer {
                        weight: p[0].clone(),
                        bias: p[1].clone(),
                    },
                    output: LinearLayer {
                        weight: p[2].clone(),
                        bias: p[3].clone(),
                    },
                };
                Ok(adversarial_domain_loss(&c, &p[4], &tags)?.value)
            })?;
            Ok((a, n))
        }
        "composite" => composite_grads(seed, h),
        other => Err(Error::Invalid(format!(
            "unknown gradcheck component `{other}` (expected one of {})",
            GRADCHECK_COMPONENTS.join(", ")
        ))),
    }
}

/// The full objective on a tiny model, cycling the alignment mode with the
/// seed. In the adversarial mode the feature path descends
/// `total − 2·λ_align·align` (gradient reversal) while the classifier
/// descends `total`.
fn composite_grads(seed: u64, h: f64) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    let mode = AlignmentMode::ALL[(seed % AlignmentMode::ALL.len() as u64) as usize];
    let ds = generate_synthetic(&SyntheticSpec {
        num_source_classes: 4,
        num_target_classes: 3,
        feature_dim: 5,
        attribute_dim: 4,
        samples_per_class: 3,
        seed,
        ..Default::default()
    })?;
    let view = ds.training_view();
    let config = TrainConfig {
        batch_size: 4,
        encoder_hidden: 5,
        metric_hidden: 6,
        classifier_hidden: 4,
        embed_dim: Some(3),
        alignment_mode: mode,
        seed,
        ..Default::default()
    };
    let weights = LossWeights {
        lambda_ent: 0.5,
        lambda_rec: 0.3,
        lambda_align: 0.7,
    };
    let mut trainer = Trainer::new(config, &view)?;
    let batch = trainer.next_batch(&view)?;
    // Zero-initialized biases put all-zero attribute rows exactly on ReLU
    // kinks; move them off so the objective is differentiable at the point.
    let mut rng = RngState::derive(seed, GRADCHECK_STREAM);
    let mut model = trainer.model.clone();
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    for (name, p) in names.iter().zip(model.params_mut()) {
        if name.ends_with(".bias") {
            p.data_mut().iter_mut().for_each(|v| *v += rng.uniform_range(-0.5, 0.5));
        }
    }
    let model = model;
    let mut clf = trainer.classifier.clone();
    if let Some(c) = &mut clf {
        let names: Vec<&str> = c.params().into_iter().map(|(n, _)| n).collect();
        for (name, p) in names.into_iter().zip(c.params_mut()) {
            if name.ends_with("bias") {
                p.data_mut().iter_mut().for_each(|v| *v += rng.uniform_range(-0.5, 0.5));
            }
        }
    }
    let clf = clf;

    let obj = objective_and_gradients(&mut model.clone(), clf.as_ref(), &view, &batch, &weights)?;
    let sign = if mode == AlignmentMode::Dann { -1.0 } else { 1.0 };
    let feature_objective = move |r: &crate::losses::LossReport| {
        r.total + (sign - 1.0) * weights.lambda_align * r.align.unwrap_or(0.0)
    };

    let params: Vec<Matrix> = model.named_params().into_iter().map(|(_, p)| p.clone()).collect();
    let mut numeric = numeric_grads(&params, h, |p| {
        let mut m = model.clone();
        for (dst, src) in m.params_mut().into_iter().zip(p) {
            *dst = src.clone();
        }
        let o = objective_and_gradients(&mut m, clf.as_ref(), &view, &batch, &weights)?;
        Ok(feature_objective(&o.report))
    })?;
    let mut analytic = obj.model_grads;
    if let (Some(c), Some(g)) = (&clf, obj.classifier_grads) {
        let cparams: Vec<Matrix> = c.params().into_iter().map(|(_, p)| p.clone()).collect();
        numeric.extend(numeric_grads(&cparams, h, |p| {
            let mut c2 = c.clone();
            for (dst, src) in c2.params_mut().into_iter().zip(p) {
                *dst = src.clone();
            }
            let o = objective_and_gradients(&mut model.clone(), Some(&c2), &view, &batch, &weights)?;
            Ok(o.report.total)
        })?);
        analytic.extend(g);
    }
    Ok((analytic, numeric))
}

/// Relative error of one component instance, with the analytic gradient
/// multiplied by `fault_scale`.
pub fn check_component(component: &str, seed: u64, step: f64, fault_scale: f64) -> Result<f64> {
    let (analytic, numeric) = component_grads(component, seed, step)?;
    let analytic = flatten(&analytic).scale(fault_scale);
    Ok(relative_error(&analytic, &flatten(&numeric)))
}

/// Checks every component over every seed.
pub fn run_gradcheck(options: &GradcheckOptions) -> Result<GradcheckReport> {
    if let Some(f) = &options.fault {
        if !GRADCHECK_COMPONENTS.contains(&f.component.as_str()) {
            return Err(Error::Invalid(format!("unknown gradcheck component `{}`", f.component)));
        }
    }
    let mut components = Vec::with_capacity(GRADCHECK_COMPONENTS.len());
    for name in GRADCHECK_COMPONENTS {
        let scale = match &options.fault {
            Some(f) if f.component == name => f.scale,
            _ => 1.0,
        };
        let mut max_error = 0.0f64;
        let mut worst_seed = options.seeds.first().copied().unwrap_or(0);
        for &seed in &options.seeds {
            let err = check_component(name, seed, options.step, scale)?;
            if err > max_error || err.is_nan() {
                max_error = err;
                worst_seed = seed;
            }
        }
        let passed = max_error <= options.threshold;
        log::info!("gradcheck {name}: max relative error {max_error:.3e} (seed {worst_seed})");
        components.push(ComponentResult {
            component: name.to_string(),
            max_error,
            worst_seed,
            passed,
        });
    }
    Ok(GradcheckReport {
        threshold: options.threshold,
        components,
    })
}
