//! Latent posterior families, their samplers, priors, and KL terms.
//!
//! Three latent regimes condition the flow:
//!
//! | regime     | posterior ν(u|x)             | sampler            | prior π(u)            |
//! |------------|------------------------------|--------------------|-----------------------|
//! | discrete   | categorical over s states    | Gumbel-Softmax     | uniform categorical   |
//! | continuous | diagonal Gaussian            | reparameterization | standard Gaussian     |
//! | sequential | deterministic argmax codes   | vector quantization| learnable autoregressive |
//!
//! The posterior is realized by an [`Encoder`] network whose head width
//! depends on the regime. Samplers come in two forms: an `_with_noise`
//! variant taking the noise tensor explicitly (deterministic, used by
//! gradient checks) and an rng wrapper that draws it. The discrete sampler's
//! hard variant feeds the flow a definite one-hot state while gradients
//! follow the relaxed sample (straight-through).

use rand::Rng;
use rand_distr::{Distribution, Gumbel, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameter, Tape, Tensor};
use crate::error::{Error, Result};
use crate::nn::Mlp;

const LN_2PI: f64 = 1.8378770664093453;
/// Posterior probabilities are clamped here before logs; introduces a bias
/// below 1e-10 on degenerate categoricals, documented at the call sites.
const PROB_FLOOR: f64 = 1e-12;
/// log-scale clamp, matching the flow's exponentiation bound.
const LOG_SIGMA_CLAMP: f64 = 30.0;
/// Weight of the commitment term in the quantization loss.
const COMMITMENT_COST: f64 = 0.25;

/// Which latent space conditions the flow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LatentSpec {
    /// `s` states, fed to the flow as one-hot vectors.
    Discrete { s: usize },
    /// `d_u`-dimensional Gaussian code.
    Continuous { d_u: usize },
    /// Length-`m` sequence over an `s`-row codebook of `d_code`-dim vectors,
    /// fed to the flow as the flattened quantized codes.
    Sequential { s: usize, m: usize, d_code: usize },
}

impl LatentSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LatentSpec::Discrete { s } if s < 2 => {
                Err(Error::Config(format!("discrete latent needs s >= 2, got {s}")))
            }
            LatentSpec::Continuous { d_u } if d_u < 1 => {
                Err(Error::Config("continuous latent needs d_u >= 1".into()))
            }
            LatentSpec::Sequential { s, m, d_code } if s < 2 || m < 1 || d_code < 1 => Err(
                Error::Config(format!("sequential latent needs s >= 2, m >= 1, d_code >= 1; got s={s}, m={m}, d_code={d_code}")),
            ),
            _ => Ok(()),
        }
    }

    /// Width of the context vector handed to the flow.
    pub fn context_dim(&self) -> usize {
        match *self {
            LatentSpec::Discrete { s } => s,
            LatentSpec::Continuous { d_u } => d_u,
            LatentSpec::Sequential { m, d_code, .. } => m * d_code,
        }
    }

    /// Width of the encoder head.
    pub fn head_dim(&self) -> usize {
        match *self {
            LatentSpec::Discrete { s } => s,
            LatentSpec::Continuous { d_u } => 2 * d_u,
            LatentSpec::Sequential { m, d_code, .. } => m * d_code,
        }
    }
}

/// Posterior network: data in, regime-specific head out. The head is
/// randomly initialized so the posterior depends on the input from the very
/// first step; a head pinned at zero would make the posterior exactly match
/// the prior for every input, a symmetric saddle that gradient descent
/// cannot leave (the KL gradient vanishes there and every latent state
/// receives identical assignments).
#[derive(Clone, Debug)]
pub struct Encoder {
    pub net: Mlp,
    /// Trainable code vectors `[s, d_code]`; sequential regime only.
    pub codebook: Option<Parameter>,
    spec: LatentSpec,
}

impl Encoder {
    pub fn init(spec: &LatentSpec, data_dim: usize, depth: usize, width: usize, rng: &mut impl Rng) -> Self {
        let mut dims = vec![data_dim];
        dims.extend(std::iter::repeat(width).take(depth));
        dims.push(spec.head_dim());
        let codebook = match *spec {
            LatentSpec::Sequential { s, d_code, .. } => {
                let std = 1.0 / (d_code as f64).sqrt();
                let dist = Normal::new(0.0, std).unwrap();
                let data: Vec<f64> = (0..s * d_code).map(|_| dist.sample(rng)).collect();
                Some(Parameter::new(
                    "encoder.codebook",
                    Tensor::matrix(s, d_code, data).unwrap(),
                ))
            }
            _ => None,
        };
        Encoder {
            net: Mlp::init("encoder", &dims, false, rng),
            codebook,
            spec: spec.clone(),
        }
    }

    pub fn spec(&self) -> &LatentSpec {
        &self.spec
    }

    /// Discrete regime: state probabilities `[n, s]` (softmax of logits).
    pub fn encode_discrete(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let logits = self.net.forward(tape, x)?;
        tape.softmax(&logits)
    }

    /// Continuous regime: posterior mean and log-scale, each `[n, d_u]`.
    pub fn encode_gaussian(&self, tape: &Tape, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let d_u = match self.spec {
            LatentSpec::Continuous { d_u } => d_u,
            _ => return Err(Error::InvalidModel("gaussian encoding requires a continuous latent".into())),
        };
        let head = self.net.forward(tape, x)?;
        let mu = tape.slice_cols(&head, 0, d_u)?;
        let log_sigma = tape.slice_cols(&head, d_u, 2 * d_u)?;
        Ok((mu, log_sigma))
    }

    /// Sequential regime: pre-quantization codes `[n, m·d_code]`.
    pub fn encode_pre_codes(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        self.net.forward(tape, x)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut ps = self.net.params();
        if let Some(cb) = &self.codebook {
            ps.push(cb);
        }
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut ps = self.net.params_mut();
        if let Some(cb) = &mut self.codebook {
            ps.push(cb);
        }
        ps
    }
}

/// One-hot rows `[n, s]` from state indices.
pub fn one_hot(indices: &[usize], s: usize) -> Tensor {
    let mut data = vec![0.0; indices.len() * s];
    for (r, &i) in indices.iter().enumerate() {
        assert!(i < s, "state index {i} out of range for {s} states");
        data[r * s + i] = 1.0;
    }
    Tensor::matrix(indices.len(), s, data).unwrap()
}

/// Relaxed categorical sample `softmax((log probs + g) / τ)` with explicit
/// standard-Gumbel noise `g` (same shape as `probs`). With `hard`, the
/// returned values are the argmax one-hot while gradients follow the relaxed
/// sample. Probabilities are floored at 1e-12 before the log, which biases
/// degenerate categoricals by less than 1e-10.
pub fn gumbel_softmax_with_noise(
    tape: &Tape,
    probs: &Tensor,
    noise: &Tensor,
    temperature: f64,
    hard: bool,
) -> Result<Tensor> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!("gumbel temperature must be positive, got {temperature}")));
    }
    let log_p = tape.log(&tape.clamp(probs, PROB_FLOOR, f64::INFINITY)?)?;
    let perturbed = tape.add(&log_p, noise)?;
    let soft = tape.softmax(&tape.mul_scalar(&perturbed, 1.0 / temperature)?)?;
    if !hard {
        return Ok(soft);
    }
    let (n, s) = (soft.nrows(), soft.ncols());
    let mut indices = Vec::with_capacity(n);
    for r in 0..n {
        let row = &soft.data()[r * s..(r + 1) * s];
        let best = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap();
        indices.push(best);
    }
    tape.straight_through(&soft, &one_hot(&indices, s))
}

/// rng wrapper over [`gumbel_softmax_with_noise`].
pub fn gumbel_softmax_sample(
    tape: &Tape,
    probs: &Tensor,
    temperature: f64,
    hard: bool,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let gumbel = Gumbel::new(0.0, 1.0).unwrap();
    let noise: Vec<f64> = (0..probs.len()).map(|_| gumbel.sample(rng)).collect();
    let noise = Tensor::from_shape(probs.shape().to_vec(), noise).unwrap();
    gumbel_softmax_with_noise(tape, probs, &noise, temperature, hard)
}

/// Reparameterized Gaussian sample `mu + exp(log_sigma) ⊙ eps` with explicit
/// standard-normal noise; log-scale clamped to ±30.
pub fn reparam_gaussian_with_noise(
    tape: &Tape,
    mu: &Tensor,
    log_sigma: &Tensor,
    noise: &Tensor,
) -> Result<Tensor> {
    let sigma = tape.exp(&tape.clamp(log_sigma, -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP)?)?;
    tape.add(mu, &tape.mul(&sigma, noise)?)
}

/// rng wrapper over [`reparam_gaussian_with_noise`].
pub fn reparam_gaussian_sample(
    tape: &Tape,
    mu: &Tensor,
    log_sigma: &Tensor,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let noise: Vec<f64> = (0..mu.len()).map(|_| normal.sample(rng)).collect();
    let noise = Tensor::from_shape(mu.shape().to_vec(), noise).unwrap();
    reparam_gaussian_with_noise(tape, mu, log_sigma, &noise)
}

/// `KL(categorical(probs) ‖ uniform(s)) = Σ p (ln p + ln s)` per row.
pub fn kl_categorical_uniform(tape: &Tape, probs: &Tensor) -> Result<Tensor> {
    let s = probs.ncols();
    let log_p = tape.log(&tape.clamp(probs, PROB_FLOOR, f64::INFINITY)?)?;
    let inner = tape.add_scalar(&log_p, (s as f64).ln())?;
    tape.sum_cols(&tape.mul(probs, &inner)?)
}

/// `KL(N(mu, diag σ²) ‖ N(0, I)) = ½ Σ (μ² + σ² − 1 − 2 ln σ)` per row.
pub fn kl_gaussian_standard(tape: &Tape, mu: &Tensor, log_sigma: &Tensor) -> Result<Tensor> {
    let ls = tape.clamp(log_sigma, -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP)?;
    let two_ls = tape.mul_scalar(&ls, 2.0)?;
    let var = tape.exp(&two_ls)?;
    let mu_sq = tape.mul(mu, mu)?;
    let terms = tape.sub(&tape.add(&mu_sq, &var)?, &tape.add_scalar(&two_ls, 1.0)?)?;
    tape.mul_scalar(&tape.sum_cols(&terms)?, 0.5)
}

/// Result of quantizing a batch of pre-code rows against the codebook.
pub struct Quantized {
    /// Chosen codebook rows, `[n * m]` row-major.
    pub indices: Vec<usize>,
    /// `[n, m·d_code]`; values are the code vectors, gradients pass straight
    /// through to the pre-codes.
    pub codes: Tensor,
    /// Per-row quantization loss `[n]`:
    /// `‖sg(pre) − code‖² + 0.25 ‖pre − sg(code)‖²` summed over positions.
    pub vq_loss: Tensor,
}

/// Nearest-codebook-row quantization (Euclidean; ties take the lowest index).
pub fn vq_quantize(tape: &Tape, pre_codes: &Tensor, codebook: &Parameter, m: usize) -> Result<Quantized> {
    let n = pre_codes.nrows();
    let (s, d_code) = (codebook.value.nrows(), codebook.value.ncols());
    if pre_codes.ncols() != m * d_code {
        return Err(Error::ShapeMismatch {
            op: "vq_quantize",
            detail: format!(
                "pre-codes [{n}, {}] do not match {m} positions of {d_code}-dim codes",
                pre_codes.ncols()
            ),
        });
    }
    let cb = codebook.value.data();
    let pre = pre_codes.data();
    let mut indices = Vec::with_capacity(n * m);
    for r in 0..n {
        for t in 0..m {
            let v = &pre[r * m * d_code + t * d_code..r * m * d_code + (t + 1) * d_code];
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for row in 0..s {
                let c = &cb[row * d_code..(row + 1) * d_code];
                let d: f64 = v.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = row;
                }
            }
            indices.push(best);
        }
    }

    let cb_watched = tape.watch(codebook)?;
    // codebook rows in sequence order, on the tape: [n*m, d_code] -> [n, m*d_code]
    let gathered = tape.gather_rows(&cb_watched, &indices)?;
    let code_rows = tape.reshape(&gathered, &[n, m * d_code])?;
    let codes = tape.straight_through(pre_codes, &code_rows.detach())?;

    // alignment pulls the codebook toward frozen pre-codes; commitment pulls
    // the pre-codes toward frozen codebook rows
    let align = tape.sub(&pre_codes.detach(), &code_rows)?;
    let align_loss = tape.sum_cols(&tape.mul(&align, &align)?)?;
    let commit = tape.sub(pre_codes, &code_rows.detach())?;
    let commit_loss = tape.sum_cols(&tape.mul(&commit, &commit)?)?;
    let vq_loss = tape.add(&align_loss, &tape.mul_scalar(&commit_loss, COMMITMENT_COST)?)?;

    Ok(Quantized { indices, codes, vq_loss })
}

/// Prior over the latent space.
#[derive(Clone, Debug)]
pub enum PriorModel {
    UniformCategorical { s: usize },
    StandardGaussian { d_u: usize },
    /// First-order autoregressive categorical: position 0 uses `initial`
    /// logits `[s]`, position t >= 1 uses row `(t-1)*s + prev_state` of
    /// `transitions` `[(m-1)*s, s]`. (Position 0 is covered by `initial`, so
    /// no transition slot is allocated for it.)
    LearnableSeqCategorical { s: usize, m: usize, initial: Parameter, transitions: Parameter },
}

impl PriorModel {
    /// The matching uninformative (or uniform-initialized learnable) prior.
    pub fn init(spec: &LatentSpec) -> Self {
        match *spec {
            LatentSpec::Discrete { s } => PriorModel::UniformCategorical { s },
            LatentSpec::Continuous { d_u } => PriorModel::StandardGaussian { d_u },
            LatentSpec::Sequential { s, m, .. } => PriorModel::LearnableSeqCategorical {
                s,
                m,
                initial: Parameter::new("prior.initial", Tensor::from_shape(vec![s], vec![0.0; s]).unwrap()),
                transitions: Parameter::new(
                    "prior.transitions",
                    Tensor::matrix((m - 1) * s, s, vec![0.0; (m - 1) * s * s]).unwrap(),
                ),
            },
        }
    }

    /// Log-mass of categorical states, `[n]` from one-hot rows `[n, s]`.
    pub fn log_prob_categorical(&self, one_hot: &Tensor) -> Result<Tensor> {
        match *self {
            PriorModel::UniformCategorical { s } => {
                if one_hot.ncols() != s {
                    return Err(Error::ShapeMismatch {
                        op: "prior_log_prob",
                        detail: format!("one-hot width {} != state count {s}", one_hot.ncols()),
                    });
                }
                let n = one_hot.nrows();
                Ok(Tensor::from_shape(vec![n], vec![-(s as f64).ln(); n]).unwrap())
            }
            _ => Err(Error::InvalidModel("categorical log-prob on a non-categorical prior".into())),
        }
    }

    /// Standard-normal log-density per row of `u: [n, d_u]`.
    pub fn log_prob_gaussian(&self, tape: &Tape, u: &Tensor) -> Result<Tensor> {
        match *self {
            PriorModel::StandardGaussian { d_u } => {
                if u.ncols() != d_u {
                    return Err(Error::ShapeMismatch {
                        op: "prior_log_prob",
                        detail: format!("latent width {} != d_u {d_u}", u.ncols()),
                    });
                }
                let sq = tape.sum_cols(&tape.mul(u, u)?)?;
                tape.add_scalar(&tape.mul_scalar(&sq, -0.5)?, -0.5 * d_u as f64 * LN_2PI)
            }
            _ => Err(Error::InvalidModel("gaussian log-prob on a non-gaussian prior".into())),
        }
    }

    /// `Σ_t log p(u_t | u_{t-1})` for each index sequence; differentiable in
    /// the prior tables.
    pub fn log_prob_sequences(&self, tape: &Tape, seqs: &[Vec<usize>]) -> Result<Tensor> {
        let (s, m, initial, transitions) = match self {
            PriorModel::LearnableSeqCategorical { s, m, initial, transitions } => {
                (*s, *m, initial, transitions)
            }
            _ => return Err(Error::InvalidModel("sequence log-prob on a non-sequential prior".into())),
        };
        for seq in seqs {
            if seq.len() != m || seq.iter().any(|&u| u >= s) {
                return Err(Error::InvalidModel(format!(
                    "sequence {seq:?} invalid for m={m}, s={s}"
                )));
            }
        }
        seq_log_prob_on(tape, &tape.watch(initial)?, &tape.watch(transitions)?, s, m, seqs)
    }

    /// Initial and transition logit tables, for callers that place them on a
    /// tape themselves (sequential prior only).
    pub fn seq_tables(&self) -> Result<(&Parameter, &Parameter)> {
        match self {
            PriorModel::LearnableSeqCategorical { initial, transitions, .. } => {
                Ok((initial, transitions))
            }
            _ => Err(Error::InvalidModel("table access on a non-sequential prior".into())),
        }
    }

    /// Ancestral sample of `n` index sequences (sequential prior only).
    pub fn sample_sequences(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
        let (s, m, initial, transitions) = match self {
            PriorModel::LearnableSeqCategorical { s, m, initial, transitions } => {
                (*s, *m, initial, transitions)
            }
            _ => return Err(Error::InvalidModel("sequence sampling on a non-sequential prior".into())),
        };
        let softmax_row = |logits: &[f64]| -> Vec<f64> {
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.iter().map(|e| e / z).collect()
        };
        let draw = |probs: &[f64], mut r: f64| -> usize {
            for (i, &p) in probs.iter().enumerate() {
                if r < p {
                    return i;
                }
                r -= p;
            }
            probs.len() - 1
        };
        let init_probs = softmax_row(initial.value.data());
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut seq = Vec::with_capacity(m);
            seq.push(draw(&init_probs, rng.random_range(0.0..1.0)));
            for t in 1..m {
                let row = (t - 1) * s + seq[t - 1];
                let logits = &transitions.value.data()[row * s..(row + 1) * s];
                seq.push(draw(&softmax_row(logits), rng.random_range(0.0..1.0)));
            }
            out.push(seq);
        }
        Ok(out)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        match self {
            PriorModel::LearnableSeqCategorical { initial, transitions, .. } => {
                vec![initial, transitions]
            }
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            PriorModel::LearnableSeqCategorical { initial, transitions, .. } => {
                vec![initial, transitions]
            }
            _ => vec![],
        }
    }
}

/// `Σ_t log p(u_t | u_{t-1})` against logit tables already on the tape:
/// `initial: [s]`, `transitions: [(m-1)*s, s]` with row `(t-1)*s + prev`.
pub fn seq_log_prob_on(
    tape: &Tape,
    initial: &Tensor,
    transitions: &Tensor,
    s: usize,
    m: usize,
    seqs: &[Vec<usize>],
) -> Result<Tensor> {
    let n = seqs.len();
    let init_ls = tape.log_softmax(initial)?;
    let first: Vec<usize> = seqs.iter().map(|seq| seq[0]).collect();
    let init_pick = tape.mul(&tape.broadcast_rows(&init_ls, n)?, &one_hot(&first, s))?;
    let mut total = tape.sum_cols(&init_pick)?;
    if m > 1 {
        let trans_ls = tape.log_softmax(transitions)?;
        let mut cond_rows = Vec::with_capacity(n * (m - 1));
        let mut targets = Vec::with_capacity(n * (m - 1));
        for seq in seqs {
            for t in 1..m {
                cond_rows.push((t - 1) * s + seq[t - 1]);
                targets.push(seq[t]);
            }
        }
        let conds = tape.gather_rows(&trans_ls, &cond_rows)?;
        let picked = tape.sum_cols(&tape.mul(&conds, &one_hot(&targets, s))?)?;
        let per_row = tape.sum_cols(&tape.reshape(&picked, &[n, m - 1])?)?;
        total = tape.add(&total, &per_row)?;
    }
    Ok(total)
}

/// Gumbel-Softmax temperature at `step`: linear from `tau_start` to `tau_end`
/// over the first half of training, then held.
pub fn temperature(step: usize, total_steps: usize, tau_start: f64, tau_end: f64) -> f64 {
    let half = (total_steps / 2).max(1);
    if step >= half {
        tau_end
    } else {
        tau_start + (tau_end - tau_start) * step as f64 / half as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(actual: f64, expected: f64, tol: f64) {
        assert!(
            (actual - expected).abs() < tol,
            "expected {expected}, got {actual} (tol {tol})"
        );
    }

    #[test]
    fn zero_weight_encoder_gives_uniform_probs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = LatentSpec::Discrete { s: 4 };
        let mut enc = Encoder::init(&spec, 3, 2, 8, &mut rng);
        let head = enc.net.head_mut();
        head.w.value = Tensor::zeros(head.w.value.shape());
        head.b.value = Tensor::zeros(head.b.value.shape());
        let tape = Tape::new();
        let x = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.0, 0.0, 0.0]).unwrap();
        let probs = enc.encode_discrete(&tape, &x).unwrap();
        for &p in probs.data() {
            assert_close(p, 0.25, 1e-12);
        }
    }

    #[test]
    fn fresh_encoder_probs_depend_on_the_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = LatentSpec::Discrete { s: 4 };
        let enc = Encoder::init(&spec, 3, 2, 8, &mut rng);
        let tape = Tape::new();
        let x = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.0, 0.0, 0.0]).unwrap();
        let probs = enc.encode_discrete(&tape, &x).unwrap();
        let (a, b) = probs.data().split_at(4);
        assert!(
            a.iter().zip(b).any(|(p, q)| (p - q).abs() > 1e-6),
            "two distinct inputs should receive distinct posteriors at init"
        );
    }

    #[test]
    fn softmax_of_pinned_logits() {
        // logits [ln 3, 0] -> [0.75, 0.25]
        let tape = Tape::new();
        let logits = Tensor::matrix(1, 2, vec![3.0f64.ln(), 0.0]).unwrap();
        let probs = tape.softmax(&logits).unwrap();
        assert_close(probs.data()[0], 0.75, 1e-12);
        assert_close(probs.data()[1], 0.25, 1e-12);
    }

    #[test]
    fn encoded_probs_always_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = LatentSpec::Discrete { s: 5 };
        let mut enc = Encoder::init(&spec, 2, 2, 8, &mut rng);
        // randomize beyond the zero head so the logits vary
        let dist = Normal::new(0.0, 1.0).unwrap();
        for p in enc.params_mut() {
            let data: Vec<f64> = (0..p.numel()).map(|_| dist.sample(&mut rng)).collect();
            p.value = Tensor::from_shape(p.value.shape().to_vec(), data).unwrap();
        }
        let tape = Tape::new();
        let n = 1000;
        let x = Tensor::matrix(n, 2, (0..2 * n).map(|_| dist.sample(&mut rng)).collect()).unwrap();
        let probs = enc.encode_discrete(&tape, &x).unwrap();
        for r in 0..n {
            let total: f64 = probs.data()[r * 5..(r + 1) * 5].iter().sum();
            assert_close(total, 1.0, 1e-12);
        }
    }

    #[test]
    fn degenerate_categorical_stays_degenerate() {
        let tape = Tape::new();
        let probs = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = gumbel_softmax_sample(&tape, &probs, 1.0, false, &mut rng).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-10);
        assert!(y.data()[1] < 1e-10);
    }

    #[test]
    fn hard_sample_frequencies_match_the_categorical_law() {
        // argmax of (log p + g) is an exact categorical draw at any temperature
        let tape = Tape::new();
        let target = [0.5, 0.3, 0.2];
        let n = 100_000;
        let probs_data: Vec<f64> = (0..n).flat_map(|_| target).collect();
        let probs = Tensor::matrix(n, 3, probs_data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = gumbel_softmax_sample(&tape, &probs, 0.5, true, &mut rng).unwrap();
        let mut counts = [0.0f64; 3];
        for r in 0..n {
            for k in 0..3 {
                counts[k] += y.data()[r * 3 + k];
            }
        }
        let tv: f64 = counts
            .iter()
            .zip(target)
            .map(|(c, p)| (c / n as f64 - p).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.01, "total variation {tv}");
    }

    #[test]
    fn relaxed_sample_stays_on_the_simplex() {
        let tape = Tape::new();
        let probs = Tensor::matrix(4, 3, vec![1.0 / 3.0; 12]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = gumbel_softmax_sample(&tape, &probs, 1.0, false, &mut rng).unwrap();
        for r in 0..4 {
            let total: f64 = y.data()[r * 3..(r + 1) * 3].iter().sum();
            assert_close(total, 1.0, 1e-12);
        }
    }

    #[test]
    fn relaxed_sample_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gumbel = Gumbel::new(0.0, 1.0).unwrap();
        let noise =
            Tensor::matrix(2, 3, (0..6).map(|_| gumbel.sample(&mut rng)).collect()).unwrap();
        let probs = Tensor::matrix(2, 3, vec![0.6, 0.3, 0.1, 0.2, 0.5, 0.3]).unwrap();
        let weights = Tensor::matrix(2, 3, vec![1.0, -0.5, 2.0, 0.3, 1.1, -0.7]).unwrap();
        let max_rel = crate::autodiff::finite_diff_check(
            |tape, p| {
                let y = gumbel_softmax_with_noise(tape, p, &noise, 0.7, false)?;
                tape.sum(&tape.mul(&y, &weights)?)
            },
            &probs,
            1e-6,
        )
        .unwrap();
        assert!(max_rel < 1e-4, "gradient mismatch {max_rel}");
    }

    #[test]
    fn clamped_scale_collapses_the_gaussian_sample() {
        let tape = Tape::new();
        let mu = Tensor::matrix(1, 2, vec![1.5, -2.0]).unwrap();
        let log_sigma = Tensor::matrix(1, 2, vec![-1e9, -1e9]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let u = reparam_gaussian_sample(&tape, &mu, &log_sigma, &mut rng).unwrap();
        assert_close(u.data()[0], 1.5, 1e-10);
        assert_close(u.data()[1], -2.0, 1e-10);
    }

    #[test]
    fn gaussian_sample_moments_match_the_law() {
        let tape = Tape::new();
        let n = 100_000;
        let mu = Tensor::matrix(n, 1, vec![0.0; n]).unwrap();
        let log_sigma = Tensor::matrix(n, 1, vec![0.0; n]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u = reparam_gaussian_sample(&tape, &mu, &log_sigma, &mut rng).unwrap();
        let mean: f64 = u.data().iter().sum::<f64>() / n as f64;
        let var: f64 = u.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "sample mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "sample variance {var}");
    }

    #[test]
    fn gaussian_sample_gradient_wrt_mean_is_identity() {
        let tape = Tape::new();
        let mu_val = Tensor::matrix(1, 3, vec![0.1, 0.2, 0.3]).unwrap();
        let mu = tape.leaf(&mu_val).unwrap();
        let log_sigma = Tensor::matrix(1, 3, vec![0.4, -0.2, 0.0]).unwrap();
        let noise = Tensor::matrix(1, 3, vec![0.9, -1.2, 0.4]).unwrap();
        let u = reparam_gaussian_with_noise(&tape, &mu, &log_sigma, &noise).unwrap();
        let loss = tape.sum(&u).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let g = grads.wrt(&mu).unwrap();
        for &v in g.data() {
            assert_close(v, 1.0, 1e-12);
        }
    }

    #[test]
    fn categorical_kl_frozen_values() {
        let tape = Tape::new();
        let uniform = Tensor::matrix(1, 4, vec![0.25; 4]).unwrap();
        assert_close(kl_categorical_uniform(&tape, &uniform).unwrap().data()[0], 0.0, 1e-12);

        let point = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        assert_close(kl_categorical_uniform(&tape, &point).unwrap().data()[0], 0.693147, 1e-5);

        let skew = Tensor::matrix(1, 2, vec![0.75, 0.25]).unwrap();
        assert_close(kl_categorical_uniform(&tape, &skew).unwrap().data()[0], 0.130812, 1e-6);
    }

    #[test]
    fn gaussian_kl_frozen_values() {
        let tape = Tape::new();
        let z = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        assert_close(kl_gaussian_standard(&tape, &z, &z).unwrap().data()[0], 0.0, 1e-12);

        let mu1 = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        assert_close(kl_gaussian_standard(&tape, &mu1, &z).unwrap().data()[0], 0.5, 1e-12);

        let ls_half = Tensor::matrix(1, 1, vec![0.5f64.ln()]).unwrap();
        assert_close(kl_gaussian_standard(&tape, &z, &ls_half).unwrap().data()[0], 0.318147, 1e-6);
    }

    #[test]
    fn categorical_kl_agrees_with_monte_carlo() {
        let probs = [0.6, 0.25, 0.15];
        let s = 3.0f64;
        let tape = Tape::new();
        let closed = kl_categorical_uniform(&tape, &Tensor::matrix(1, 3, probs.to_vec()).unwrap())
            .unwrap()
            .data()[0];
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut draws = Vec::with_capacity(n);
        for _ in 0..n {
            let mut r: f64 = rng.random_range(0.0..1.0);
            let mut k = probs.len() - 1;
            for (i, &p) in probs.iter().enumerate() {
                if r < p {
                    k = i;
                    break;
                }
                r -= p;
            }
            draws.push(probs[k].ln() + s.ln());
        }
        let mean: f64 = draws.iter().sum::<f64>() / n as f64;
        let var: f64 = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - closed).abs() < 3.0 * se + 1e-9,
            "mc {mean} vs closed {closed} (se {se})"
        );
    }

    #[test]
    fn gaussian_kl_agrees_with_monte_carlo() {
        let (mu, sigma) = (0.7f64, 0.6f64);
        let tape = Tape::new();
        let closed = kl_gaussian_standard(
            &tape,
            &Tensor::matrix(1, 1, vec![mu]).unwrap(),
            &Tensor::matrix(1, 1, vec![sigma.ln()]).unwrap(),
        )
        .unwrap()
        .data()[0];
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut draws = Vec::with_capacity(n);
        for _ in 0..n {
            let eps: f64 = normal.sample(&mut rng);
            let u = mu + sigma * eps;
            let ln_nu = -0.5 * LN_2PI - sigma.ln() - 0.5 * eps * eps;
            let ln_pi = -0.5 * LN_2PI - 0.5 * u * u;
            draws.push(ln_nu - ln_pi);
        }
        let mean: f64 = draws.iter().sum::<f64>() / n as f64;
        let var: f64 = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - closed).abs() < 3.0 * se,
            "mc {mean} vs closed {closed} (se {se})"
        );
    }

    fn codebook_01() -> Parameter {
        Parameter::new("cb", Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap())
    }

    #[test]
    fn quantization_is_exact_on_codebook_rows() {
        let tape = Tape::new();
        let cb = codebook_01();
        let pre = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let q = vq_quantize(&tape, &pre, &cb, 2).unwrap();
        assert_eq!(q.indices, vec![1, 0]);
        assert_eq!(q.codes.data(), [1.0, 0.0]);
        assert_close(q.vq_loss.data()[0], 0.0, 1e-15);
    }

    #[test]
    fn quantization_loss_hand_value() {
        // pre = 0.4 against codebook {0, 1}: 0.16 + 0.25 * 0.16 = 0.2
        let tape = Tape::new();
        let cb = codebook_01();
        let pre = Tensor::matrix(1, 1, vec![0.4]).unwrap();
        let q = vq_quantize(&tape, &pre, &cb, 1).unwrap();
        assert_eq!(q.indices, vec![0]);
        assert_eq!(q.codes.data(), [0.0]);
        assert_close(q.vq_loss.data()[0], 0.2, 1e-12);
    }

    #[test]
    fn quantization_ties_take_the_lowest_index() {
        let tape = Tape::new();
        let cb = codebook_01();
        let pre = Tensor::matrix(1, 1, vec![0.5]).unwrap();
        let q = vq_quantize(&tape, &pre, &cb, 1).unwrap();
        assert_eq!(q.indices, vec![0]);
    }

    #[test]
    fn quantization_is_idempotent() {
        let tape = Tape::new();
        let cb = Parameter::new(
            "cb",
            Tensor::matrix(3, 2, vec![0.0, 0.1, 1.0, -0.4, -0.8, 0.9]).unwrap(),
        );
        let pre = Tensor::matrix(2, 4, vec![0.2, 0.0, 0.8, -0.3, -0.6, 1.0, 0.1, 0.0]).unwrap();
        let first = vq_quantize(&tape, &pre, &cb, 2).unwrap();
        let second = vq_quantize(&tape, &first.codes.detach(), &cb, 2).unwrap();
        assert_eq!(first.indices, second.indices);
        for &v in second.vq_loss.data() {
            assert_close(v, 0.0, 1e-15);
        }
    }

    #[test]
    fn straight_through_passes_the_identity_gradient() {
        let tape = Tape::new();
        let cb = codebook_01();
        let pre_val = Tensor::matrix(1, 2, vec![0.4, 0.8]).unwrap();
        let pre = tape.leaf(&pre_val).unwrap();
        let q = vq_quantize(&tape, &pre, &cb, 2).unwrap();
        let weights = Tensor::matrix(1, 2, vec![3.0, -2.0]).unwrap();
        let loss = tape.sum(&tape.mul(&q.codes, &weights).unwrap()).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let g = grads.wrt(&pre).unwrap();
        assert_eq!(g.data(), [3.0, -2.0]);
    }

    #[test]
    fn prior_log_prob_frozen_values() {
        let tape = Tape::new();
        let uniform = PriorModel::UniformCategorical { s: 4 };
        let oh = one_hot(&[2], 4);
        assert_close(uniform.log_prob_categorical(&oh).unwrap().data()[0], -1.386294, 1e-6);

        let gauss = PriorModel::StandardGaussian { d_u: 1 };
        let u = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        assert_close(gauss.log_prob_gaussian(&tape, &u).unwrap().data()[0], -0.918939, 1e-6);

        let seq = PriorModel::init(&LatentSpec::Sequential { s: 2, m: 3, d_code: 1 });
        let lp = seq.log_prob_sequences(&tape, &[vec![0, 1, 0]]).unwrap();
        assert_close(lp.data()[0], -2.079442, 1e-6);
    }

    #[test]
    fn sequential_prior_normalizes_over_all_sequences() {
        let (s, m) = (2usize, 4usize); // s^m = 16, m*s = 8 <= 12
        let mut prior = PriorModel::init(&LatentSpec::Sequential { s, m, d_code: 1 });
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let dist = Normal::new(0.0, 1.0).unwrap();
        for p in prior.params_mut() {
            let data: Vec<f64> = (0..p.numel()).map(|_| dist.sample(&mut rng)).collect();
            p.value = Tensor::from_shape(p.value.shape().to_vec(), data).unwrap();
        }
        let mut seqs = Vec::new();
        for code in 0..s.pow(m as u32) {
            let mut seq = Vec::with_capacity(m);
            let mut c = code;
            for _ in 0..m {
                seq.push(c % s);
                c /= s;
            }
            seqs.push(seq);
        }
        let tape = Tape::new();
        let lps = prior.log_prob_sequences(&tape, &seqs).unwrap();
        let mx = lps.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + lps.data().iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        assert_close(lse, 0.0, 1e-9);
    }

    #[test]
    fn sequential_prior_gradients_match_finite_differences() {
        let (s, m) = (3usize, 3usize);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let dist = Normal::new(0.0, 1.0).unwrap();
        let init_base = Tensor::from_shape(vec![s], (0..s).map(|_| dist.sample(&mut rng)).collect()).unwrap();
        let trans_base =
            Tensor::matrix((m - 1) * s, s, (0..(m - 1) * s * s).map(|_| dist.sample(&mut rng)).collect())
                .unwrap();
        let seqs = vec![vec![0, 2, 1], vec![1, 1, 0]];

        let rel_init = crate::autodiff::finite_diff_check(
            |tape, v| {
                let trans = tape.leaf(&trans_base)?;
                tape.sum(&seq_log_prob_on(tape, v, &trans, s, m, &seqs)?)
            },
            &init_base,
            1e-6,
        )
        .unwrap();
        assert!(rel_init < 1e-4, "initial-table gradient mismatch {rel_init}");

        let rel_trans = crate::autodiff::finite_diff_check(
            |tape, v| {
                let init = tape.leaf(&init_base)?;
                tape.sum(&seq_log_prob_on(tape, &init, v, s, m, &seqs)?)
            },
            &trans_base,
            1e-6,
        )
        .unwrap();
        assert!(rel_trans < 1e-4, "transition-table gradient mismatch {rel_trans}");
    }

    #[test]
    fn ancestral_samples_follow_the_prior_tables() {
        // strong self-transition: long runs of the same state dominate
        let s = 2;
        let mut prior = PriorModel::init(&LatentSpec::Sequential { s, m: 2, d_code: 1 });
        if let PriorModel::LearnableSeqCategorical { transitions, .. } = &mut prior {
            transitions.value =
                Tensor::matrix(2, 2, vec![5.0, -5.0, -5.0, 5.0]).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let seqs = prior.sample_sequences(20_000, &mut rng).unwrap();
        let same = seqs.iter().filter(|q| q[0] == q[1]).count() as f64 / 20_000.0;
        assert!(same > 0.99, "self-transition rate {same}");
    }

    #[test]
    fn temperature_schedule_anneals_then_holds() {
        assert_close(temperature(0, 1000, 1.0, 0.5), 1.0, 1e-12);
        assert_close(temperature(250, 1000, 1.0, 0.5), 0.75, 1e-12);
        assert_close(temperature(500, 1000, 1.0, 0.5), 0.5, 1e-12);
        assert_close(temperature(900, 1000, 1.0, 0.5), 0.5, 1e-12);
    }

    #[test]
    fn latent_spec_validation_and_dims() {
        assert!(LatentSpec::Discrete { s: 1 }.validate().is_err());
        assert!(LatentSpec::Sequential { s: 1, m: 2, d_code: 1 }.validate().is_err());
        assert_eq!(LatentSpec::Discrete { s: 6 }.context_dim(), 6);
        assert_eq!(LatentSpec::Continuous { d_u: 3 }.context_dim(), 3);
        assert_eq!(LatentSpec::Sequential { s: 4, m: 5, d_code: 2 }.context_dim(), 10);
        assert_eq!(LatentSpec::Continuous { d_u: 3 }.head_dim(), 6);
    }
}
