//! Training: variational losses, the Adam optimizer, schedules, and the
//! full seeded training loop.
//!
//! Two regimes share the loop:
//!
//! * **Fixed prior** (no latent, discrete, continuous): one joint objective
//!   per step, the negative ELBO
//!   `−(1/K) Σₖ [log p_Z(G⁻¹(x, uₖ)) + log|det ∇G⁻¹|] + β·KL(ν(·|x) ‖ π)`,
//!   with the KL weight β ramping 0 → 1 over the warm-up fraction of the
//!   run so the posterior keeps its input dependence while the per-state
//!   conditionals differentiate.
//! * **Learnable prior** (sequential codes): the KL term drops; the step
//!   objective is the reduced loss (conditional NLL plus the quantization
//!   loss) plus the prior cross-entropy on the detached codes. The two parts
//!   touch disjoint parameters, so one optimizer step on their sum equals
//!   separate steps.
//!
//! Metrics are CSV rows `step,loss,lr,val_nll`; validation NLL (standardized
//! units) is computed every 100 steps and the parameters with the best
//! validation NLL are restored at the end. Non-finite steps are skipped and
//! ten consecutive failures abort the run. Everything is deterministic given
//! the config seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Parameter, Tape, Tensor};
use crate::data::SplitDataset;
use crate::error::{Error, Result};
use crate::flow::FlowStack;
use crate::latent::{
    gumbel_softmax_sample, kl_categorical_uniform, kl_gaussian_standard, reparam_gaussian_sample,
    temperature, vq_quantize, Encoder, LatentSpec, PriorModel,
};

/// Gradients are rescaled when their global norm exceeds this bound.
pub const GRAD_CLIP_NORM: f64 = 10.0;
/// Consecutive non-finite steps tolerated before aborting.
const MAX_BAD_STEPS: usize = 10;
/// Validation cadence in steps.
const VAL_EVERY: usize = 100;

/// Everything the training loop needs besides the dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Monte Carlo sample count for the ELBO.
    pub k: usize,
    pub seed: u64,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Fraction of the run over which the KL weight ramps linearly 0 → 1.
    /// Zero keeps the full KL from the first step. Warm-up stops the
    /// uniform-posterior pull from erasing the posterior's initial input
    /// dependence before the per-state conditionals have differentiated.
    #[serde(default)]
    pub kl_warmup_frac: f64,
    /// True exactly when the latent regime is sequential.
    pub prior_learnable: bool,
    pub latent: Option<LatentSpec>,
    pub depth: usize,
    pub width: usize,
    pub enc_depth: usize,
    pub enc_width: usize,
    /// Informational tag describing the dataset (provenance echo).
    pub dataset: String,
}

impl TrainConfig {
    /// Defaults used by the built-in toy experiments.
    pub fn toy(latent: Option<LatentSpec>, dataset: &str, seed: u64) -> Self {
        let prior_learnable = matches!(latent, Some(LatentSpec::Sequential { .. }));
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 128,
            steps: 2000,
            k: 1,
            seed,
            tau_start: 1.0,
            tau_end: 0.2,
            kl_warmup_frac: 0.25,
            prior_learnable,
            latent,
            depth: 4,
            width: 32,
            enc_depth: 2,
            enc_width: 32,
            dataset: dataset.to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config(format!("K must be >= 1, got {}", self.k)));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.tau_start > 0.0 && self.tau_end > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.kl_warmup_frac) {
            return Err(Error::Config(format!(
                "kl_warmup_frac must lie in [0, 1], got {}",
                self.kl_warmup_frac
            )));
        }
        if self.enc_depth < 1 || self.enc_width < 1 {
            return Err(Error::Config("encoder needs at least one hidden layer of width >= 1".into()));
        }
        if let Some(spec) = &self.latent {
            spec.validate()?;
        }
        let sequential = matches!(self.latent, Some(LatentSpec::Sequential { .. }));
        if self.prior_learnable != sequential {
            return Err(Error::Config(
                "prior_learnable must be set exactly for the sequential latent regime".into(),
            ));
        }
        Ok(())
    }
}

/// The full generative model: conditional flow, posterior encoder, and prior.
/// `encoder` and `prior` are absent for the unconditional baseline.
#[derive(Clone, Debug)]
pub struct NvfModel {
    pub flow: FlowStack,
    pub encoder: Option<Encoder>,
    pub prior: Option<PriorModel>,
    pub latent: Option<LatentSpec>,
}

impl NvfModel {
    pub fn init(
        latent: Option<LatentSpec>,
        data_dim: usize,
        depth: usize,
        width: usize,
        enc_depth: usize,
        enc_width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if let Some(spec) = &latent {
            spec.validate()?;
        }
        let context_dim = latent.as_ref().map_or(0, LatentSpec::context_dim);
        let flow = FlowStack::build(data_dim, context_dim, depth, width, rng);
        let encoder = latent
            .as_ref()
            .map(|l| Encoder::init(l, data_dim, enc_depth, enc_width, rng));
        let prior = latent.as_ref().map(PriorModel::init);
        Ok(NvfModel { flow, encoder, prior, latent })
    }

    pub fn data_dim(&self) -> usize {
        self.flow.data_dim()
    }

    /// Context matrix of width zero, for the unconditional baseline.
    pub fn empty_context(n: usize) -> Tensor {
        Tensor::matrix(n, 0, Vec::new()).unwrap()
    }

    /// All trainable parameters in a stable order (flow, encoder, prior).
    pub fn params(&self) -> Vec<&Parameter> {
        let mut ps = self.flow.params();
        if let Some(enc) = &self.encoder {
            ps.extend(enc.params());
        }
        if let Some(prior) = &self.prior {
            ps.extend(prior.params());
        }
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut ps = self.flow.params_mut();
        if let Some(enc) = &mut self.encoder {
            ps.extend(enc.params_mut());
        }
        if let Some(prior) = &mut self.prior {
            ps.extend(prior.params_mut());
        }
        ps
    }
}

/// Negative ELBO of a batch (mean over rows), for the fixed-prior regimes.
/// `K` latent samples are drawn per row with the regime's sampler; the KL
/// term uses its closed form and is weighted by `beta` (1 recovers the
/// ELBO; the training loop anneals it from 0 during warm-up). The
/// unconditional baseline reduces to the plain negative log-likelihood.
pub fn elbo_loss(
    tape: &Tape,
    model: &NvfModel,
    x: &Tensor,
    k: usize,
    tau: f64,
    beta: f64,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if k < 1 {
        return Err(Error::Config(format!("K must be >= 1, got {k}")));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("the KL weight must lie in [0, 1], got {beta}")));
    }
    let n = x.nrows();
    let (avg_lp, kl) = match (&model.latent, &model.encoder) {
        (None, _) => {
            let lp = model.flow.conditional_log_prob(tape, x, &NvfModel::empty_context(n))?;
            (lp, None)
        }
        (Some(LatentSpec::Discrete { .. }), Some(enc)) => {
            let probs = enc.encode_discrete(tape, x)?;
            let mut acc: Option<Tensor> = None;
            for _ in 0..k {
                // soft relaxation: simplex-valued contexts keep every state's
                // conditioning pathway trained (a hard one-hot would starve
                // states the posterior currently ignores), and the annealed
                // temperature makes late-training contexts near-one-hot
                let context = gumbel_softmax_sample(tape, &probs, tau, false, rng)?;
                let lp = model.flow.conditional_log_prob(tape, x, &context)?;
                acc = Some(match acc {
                    Some(a) => tape.add(&a, &lp)?,
                    None => lp,
                });
            }
            let avg = tape.mul_scalar(&acc.unwrap(), 1.0 / k as f64)?;
            (avg, Some(kl_categorical_uniform(tape, &probs)?))
        }
        (Some(LatentSpec::Continuous { .. }), Some(enc)) => {
            let (mu, log_sigma) = enc.encode_gaussian(tape, x)?;
            let mut acc: Option<Tensor> = None;
            for _ in 0..k {
                let context = reparam_gaussian_sample(tape, &mu, &log_sigma, rng)?;
                let lp = model.flow.conditional_log_prob(tape, x, &context)?;
                acc = Some(match acc {
                    Some(a) => tape.add(&a, &lp)?,
                    None => lp,
                });
            }
            let avg = tape.mul_scalar(&acc.unwrap(), 1.0 / k as f64)?;
            (avg, Some(kl_gaussian_standard(tape, &mu, &log_sigma)?))
        }
        (Some(LatentSpec::Sequential { .. }), _) => {
            return Err(Error::InvalidModel(
                "the sequential regime trains with the reduced loss, not the ELBO".into(),
            ));
        }
        _ => return Err(Error::InvalidModel("latent spec without an encoder".into())),
    };
    let per_row = match kl {
        Some(kl) => tape.sub(&tape.mul_scalar(&kl, beta)?, &avg_lp)?,
        None => tape.neg(&avg_lp)?,
    };
    tape.mean(&per_row)
}

/// KL weight at `step`: a linear ramp from 0 to 1 over the first
/// `warmup_frac` of the run, then 1.
pub fn kl_beta(step: usize, total: usize, warmup_frac: f64) -> f64 {
    let warmup = warmup_frac * total as f64;
    if warmup <= 0.0 {
        return 1.0;
    }
    (step as f64 / warmup).min(1.0)
}

/// Reduced-loss forward pass of the sequential regime: quantized contexts,
/// per-row loss (negative conditional log-likelihood plus quantization
/// loss), and the chosen code sequences. The argmax posterior is
/// deterministic, so one sample represents any K.
fn sequential_parts(
    tape: &Tape,
    model: &NvfModel,
    x: &Tensor,
) -> Result<(Tensor, Vec<Vec<usize>>)> {
    let (enc, m) = match (&model.encoder, &model.latent) {
        (Some(enc), Some(LatentSpec::Sequential { m, .. })) => (enc, *m),
        _ => {
            return Err(Error::InvalidModel(
                "the reduced loss applies only to the sequential regime".into(),
            ))
        }
    };
    let codebook = enc
        .codebook
        .as_ref()
        .ok_or_else(|| Error::InvalidModel("sequential encoder is missing its codebook".into()))?;
    let pre = enc.encode_pre_codes(tape, x)?;
    let q = vq_quantize(tape, &pre, codebook, m)?;
    let lp = model.flow.conditional_log_prob(tape, x, &q.codes)?;
    let per_row = tape.add(&tape.neg(&lp)?, &q.vq_loss)?;
    let loss = tape.mean(&per_row)?;
    let codes = q.indices.chunks(m).map(<[usize]>::to_vec).collect();
    Ok((loss, codes))
}

/// Flow-and-encoder objective of the learnable-prior regime (mean over the
/// batch): negative conditional log-likelihood plus quantization loss. The
/// prior does not appear; it trains separately on the detached codes.
pub fn reduced_loss_theta_phi(tape: &Tape, model: &NvfModel, x: &Tensor) -> Result<Tensor> {
    sequential_parts(tape, model, x).map(|(loss, _)| loss)
}

/// Prior objective: mean negative log prior mass of the posterior's code
/// sequences. Codes are plain indices, so only the prior tables receive
/// gradients.
pub fn prior_loss_beta(tape: &Tape, prior: &PriorModel, codes: &[Vec<usize>]) -> Result<Tensor> {
    let lp = prior.log_prob_sequences(tape, codes)?;
    tape.neg(&tape.mean(&lp)?)
}

/// Adam moments, aligned with a fixed parameter ordering.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &[&Parameter]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update. `grads` must align with `params`.
pub fn adam_step(
    params: &mut [&mut Parameter],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Config(format!(
            "optimizer state for {} parameters applied to {} parameters",
            state.m.len(),
            params.len()
        )));
    }
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = &grads[i];
        if g.len() != p.numel() {
            return Err(Error::Config(format!(
                "gradient of {} values for parameter `{}` of {} values",
                g.len(),
                p.name,
                p.numel()
            )));
        }
        let mut data = p.value.data().to_vec();
        for (j, val) in data.iter_mut().enumerate() {
            let m = &mut state.m[i][j];
            let v = &mut state.v[i][j];
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g[j];
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g[j] * g[j];
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *val -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        p.value = Tensor::from_shape(p.value.shape().to_vec(), data)?;
    }
    Ok(())
}

/// Cosine-annealed learning rate: `η_max · ½(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    lr_max * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// Per-parameter gradient buffers in `params` order (zeros where the loss
/// did not touch a parameter).
pub fn gradient_vectors(params: &[&Parameter], grads: &Gradients) -> Vec<Vec<f64>> {
    params
        .iter()
        .map(|p| grads.param_grad(p).data().to_vec())
        .collect()
}

/// Scale all gradients by `max_norm / norm` when the global norm exceeds
/// `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// One metrics-log row; `val_nll` is present every 100 steps (standardized
/// units).
#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub val_nll: Option<f64>,
}

/// Render metrics rows as the `step,loss,lr,val_nll` CSV.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("step,loss,lr,val_nll\n");
    for r in rows {
        let val = r.val_nll.map(|v| format!("{v:.16e}")).unwrap_or_default();
        out.push_str(&format!("{},{:.16e},{:.16e},{}\n", r.step, r.loss, r.lr, val));
    }
    out
}

fn snapshot(model: &NvfModel) -> Vec<Tensor> {
    model.params().iter().map(|p| p.value.clone()).collect()
}

fn restore(model: &mut NvfModel, values: &[Tensor]) {
    for (p, v) in model.params_mut().into_iter().zip(values) {
        p.value = v.clone();
    }
}

/// Run the full training loop and return the selected model (best validation
/// NLL among the periodic evaluations, or the final parameters if validation
/// never ran) together with the metrics log.
pub fn train(config: &TrainConfig, data: &SplitDataset) -> Result<(NvfModel, Vec<MetricsRow>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = NvfModel::init(
        config.latent.clone(),
        data.data.d(),
        config.depth,
        config.width,
        config.enc_depth,
        config.enc_width,
        &mut rng,
    )?;
    let mut state = AdamState::new(&model.params());
    let mut rows = Vec::with_capacity(config.steps);
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut consecutive_bad = 0usize;
    let train_rows = &data.splits.train;
    if train_rows.is_empty() && config.steps > 0 {
        return Err(Error::Data("empty train split".into()));
    }
    let d = data.data.d();

    for step in 0..config.steps {
        let lr = cosine_lr(step, config.steps, config.learning_rate);
        let tau = temperature(step, config.steps, config.tau_start, config.tau_end);
        let beta = kl_beta(step, config.steps, config.kl_warmup_frac);
        let batch: Vec<usize> = (0..config.batch_size)
            .map(|_| train_rows[rng.random_range(0..train_rows.len())])
            .collect();
        let xb = Tensor::matrix(config.batch_size, d, data.data.gather(&batch))?;

        let tape = Tape::new();
        let loss_result = if config.prior_learnable {
            sequential_parts(&tape, &model, &xb).and_then(|(l1, codes)| {
                let prior = model.prior.as_ref().expect("sequential model has a prior");
                let l2 = prior_loss_beta(&tape, prior, &codes)?;
                tape.add(&l1, &l2)
            })
        } else {
            elbo_loss(&tape, &model, &xb, config.k, tau, beta, &mut rng)
        };

        // a non-finite forward pass is recoverable: skip the step
        let loss = match loss_result {
            Ok(loss) => loss,
            Err(Error::NonFinite { .. }) => {
                consecutive_bad += 1;
                if consecutive_bad >= MAX_BAD_STEPS {
                    return Err(Error::TrainingAborted(format!(
                        "{MAX_BAD_STEPS} consecutive non-finite training steps, last at step {step}"
                    )));
                }
                rows.push(MetricsRow { step, loss: f64::NAN, lr, val_nll: None });
                continue;
            }
            Err(e) => return Err(e),
        };
        let loss_val = loss.item()?;
        let grads = tape.backward(&loss)?;
        let mut gvecs = gradient_vectors(&model.params(), &grads);
        if gvecs.iter().flatten().any(|v| !v.is_finite()) {
            consecutive_bad += 1;
            if consecutive_bad >= MAX_BAD_STEPS {
                return Err(Error::TrainingAborted(format!(
                    "{MAX_BAD_STEPS} consecutive non-finite gradients, last at step {step}"
                )));
            }
            rows.push(MetricsRow { step, loss: loss_val, lr, val_nll: None });
            continue;
        }
        consecutive_bad = 0;
        clip_global_norm(&mut gvecs, GRAD_CLIP_NORM);
        adam_step(&mut model.params_mut(), &gvecs, &mut state, lr)?;

        let val_nll = if (step + 1) % VAL_EVERY == 0 || step + 1 == config.steps {
            let v = crate::density::validation_nll(&model, data, config.seed)?;
            if best.as_ref().map_or(true, |(b, _)| v < *b) {
                best = Some((v, snapshot(&model)));
            }
            Some(v)
        } else {
            None
        };
        rows.push(MetricsRow { step, loss: loss_val, lr, val_nll });
    }

    if let Some((_, values)) = best {
        restore(&mut model, &values);
    }
    Ok((model, rows))
}
