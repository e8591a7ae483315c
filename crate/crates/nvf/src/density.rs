//! Density evaluation and sampling for trained models.
//!
//! Each latent regime gets the strongest estimator it admits:
//!
//! | regime       | estimator  | computation                                          |
//! |--------------|------------|------------------------------------------------------|
//! | none         | `exact`    | conditional log-density, no latent to integrate      |
//! | discrete     | `exact`    | logsumexp over all `s` states (exact marginal)       |
//! | sequential   | `topk`     | logsumexp over the K code sequences with the         |
//! |              |            | smallest quantization distance (exact when K = sᵐ)   |
//! | continuous   | `iw-bound` | importance-weighted lower bound, posterior proposals |
//!
//! All evaluation is pure given (model, inputs, seed); batches are processed
//! in bounded chunks so memory does not grow with the dataset.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Tensor};
use crate::data::SplitDataset;
use crate::error::{Error, Result};
use crate::latent::{kl_categorical_uniform, one_hot, LatentSpec};
use crate::training::NvfModel;

const LN_2PI: f64 = 1.8378770664093453;
/// Rows evaluated per tape.
const CHUNK: usize = 1024;
/// Matches the sampler's log-scale clamp so evaluation sees the sampled law.
const LOG_SIGMA_CLAMP: f64 = 30.0;

/// Which marginal-density computation a report used.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Estimator {
    Exact,
    TopK,
    IwBound,
}

impl Estimator {
    pub fn tag(self) -> &'static str {
        match self {
            Estimator::Exact => "exact",
            Estimator::TopK => "topk",
            Estimator::IwBound => "iw-bound",
        }
    }

    fn latent_name(latent: &Option<LatentSpec>) -> &'static str {
        match latent {
            None => "no",
            Some(LatentSpec::Discrete { .. }) => "discrete",
            Some(LatentSpec::Continuous { .. }) => "continuous",
            Some(LatentSpec::Sequential { .. }) => "sequential",
        }
    }

    /// The estimator a latent regime admits.
    pub fn for_latent(latent: &Option<LatentSpec>) -> Estimator {
        match latent {
            None | Some(LatentSpec::Discrete { .. }) => Estimator::Exact,
            Some(LatentSpec::Sequential { .. }) => Estimator::TopK,
            Some(LatentSpec::Continuous { .. }) => Estimator::IwBound,
        }
    }

    /// The estimator a model's latent regime admits.
    pub fn for_model(model: &NvfModel) -> Estimator {
        Self::for_latent(&model.latent)
    }

    /// Default sample/candidate budget per regime: exhaustive estimators need
    /// one pass, top-K uses up to 8 candidates, the importance-weighted bound
    /// uses 16 proposals.
    pub fn default_k(latent: &Option<LatentSpec>) -> usize {
        match latent {
            None | Some(LatentSpec::Discrete { .. }) => 1,
            Some(LatentSpec::Sequential { s, m, .. }) => {
                s.checked_pow(*m as u32).unwrap_or(usize::MAX).min(8)
            }
            Some(LatentSpec::Continuous { .. }) => 16,
        }
    }

    pub fn check(self, model: &NvfModel) -> Result<()> {
        if self == Estimator::for_model(model) {
            Ok(())
        } else {
            Err(Error::EstimatorMismatch {
                estimator: self.tag().to_string(),
                latent: Self::latent_name(&model.latent).to_string(),
            })
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Estimator::Exact),
            "topk" => Ok(Estimator::TopK),
            "iw" | "iw-bound" => Ok(Estimator::IwBound),
            other => Err(Error::Config(format!(
                "unknown estimator `{other}` (expected exact, topk, or iw)"
            ))),
        }
    }
}

fn logsumexp(vals: &[f64]) -> f64 {
    let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + vals.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

fn chunks(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n.div_ceil(CHUNK)).map(move |i| (i * CHUNK, ((i + 1) * CHUNK).min(n)))
}

/// Conditional log-density of each row under a fixed context matrix.
fn conditional_rows(model: &NvfModel, x: &[f64], n: usize, context: &Tensor) -> Result<Vec<f64>> {
    let d = model.data_dim();
    let tape = Tape::new();
    let xt = Tensor::matrix(n, d, x.to_vec())?;
    Ok(model.flow.conditional_log_prob(&tape, &xt, context)?.data().to_vec())
}

/// Per-state conditional log-densities of a discrete-latent model:
/// `out[u][i] = log p(x_i | u)`. Also returns the posterior probabilities.
fn discrete_state_logps(model: &NvfModel, x: &Tensor) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let (enc, s) = match (&model.encoder, &model.latent) {
        (Some(enc), Some(LatentSpec::Discrete { s })) => (enc, *s),
        _ => {
            return Err(Error::InvalidModel(
                "state enumeration requires a discrete latent".into(),
            ))
        }
    };
    let (n, d) = (x.nrows(), x.ncols());
    let mut per_state = vec![Vec::with_capacity(n); s];
    let mut probs = Vec::with_capacity(n * s);
    for (lo, hi) in chunks(n) {
        let rows = hi - lo;
        let tape = Tape::new();
        let xc = Tensor::matrix(rows, d, x.data()[lo * d..hi * d].to_vec())?;
        probs.extend_from_slice(enc.encode_discrete(&tape, &xc)?.data());
        for (u, out) in per_state.iter_mut().enumerate() {
            let context = one_hot(&vec![u; rows], s);
            let lp = model.flow.conditional_log_prob(&tape, &xc, &context)?;
            out.extend_from_slice(lp.data());
        }
    }
    Ok((per_state, probs))
}

/// Exact marginal `log p(x) = logsumexp_u [log π(u) + log p(x|u)]` per row.
/// Applies to discrete-latent models and, trivially, to the unconditional
/// baseline (where it is the flow's own log-density).
pub fn exact_log_density(model: &NvfModel, x: &Tensor) -> Result<Vec<f64>> {
    let (n, d) = (x.nrows(), x.ncols());
    match model.latent {
        None => {
            let mut out = Vec::with_capacity(n);
            for (lo, hi) in chunks(n) {
                let rows = hi - lo;
                out.extend(conditional_rows(
                    model,
                    &x.data()[lo * d..hi * d],
                    rows,
                    &NvfModel::empty_context(rows),
                )?);
            }
            Ok(out)
        }
        Some(LatentSpec::Discrete { s }) => {
            let (per_state, _) = discrete_state_logps(model, x)?;
            let ln_prior = -(s as f64).ln();
            Ok((0..n)
                .map(|i| {
                    let terms: Vec<f64> =
                        per_state.iter().map(|lp| ln_prior + lp[i]).collect();
                    logsumexp(&terms)
                })
                .collect())
        }
        _ => Err(Error::EstimatorMismatch {
            estimator: "exact".into(),
            latent: Estimator::latent_name(&model.latent).to_string(),
        }),
    }
}

/// Exactly-enumerated ELBO per row (discrete latents):
/// `Σ_u ν(u|x) log p(x|u) − KL(ν(·|x) ‖ π)`. Never exceeds the exact
/// marginal, with equality iff the posterior matches the true one.
pub fn enumerated_elbo(model: &NvfModel, x: &Tensor) -> Result<Vec<f64>> {
    let s = match model.latent {
        Some(LatentSpec::Discrete { s }) => s,
        _ => {
            return Err(Error::InvalidModel(
                "ELBO enumeration requires a discrete latent".into(),
            ))
        }
    };
    let n = x.nrows();
    let (per_state, probs) = discrete_state_logps(model, x)?;
    let tape = Tape::new();
    let probs_t = Tensor::matrix(n, s, probs.clone())?;
    let kl = kl_categorical_uniform(&tape, &probs_t)?;
    Ok((0..n)
        .map(|i| {
            let expect: f64 = (0..s).map(|u| probs[i * s + u] * per_state[u][i]).sum();
            expect - kl.data()[i]
        })
        .collect())
}

/// Candidate code sequence in the best-first enumeration.
struct Candidate {
    distance: f64,
    ranks: Vec<usize>,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    // BinaryHeap is a max-heap; reverse so the smallest distance pops first,
    // with lexicographic ranks breaking ties deterministically.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .distance
            .total_cmp(&self.distance)
            .then_with(|| other.ranks.cmp(&self.ranks))
    }
}

/// The `k` code sequences with the smallest total quantization distance to
/// `pre` (row-major `m × d_code` pre-codes of ONE sample), best-first.
fn top_candidates(pre: &[f64], codebook: &[f64], s: usize, m: usize, d_code: usize, k: usize) -> Vec<Vec<usize>> {
    // per position: code indices sorted by distance (ties by index)
    let mut dist = vec![vec![0.0f64; s]; m];
    let mut order = vec![Vec::with_capacity(s); m];
    for t in 0..m {
        let v = &pre[t * d_code..(t + 1) * d_code];
        for (j, dj) in dist[t].iter_mut().enumerate() {
            let c = &codebook[j * d_code..(j + 1) * d_code];
            *dj = v.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
        }
        let mut idx: Vec<usize> = (0..s).collect();
        idx.sort_by(|&a, &b| dist[t][a].total_cmp(&dist[t][b]).then(a.cmp(&b)));
        order[t] = idx;
    }
    let total = |ranks: &[usize]| -> f64 {
        ranks.iter().enumerate().map(|(t, &r)| dist[t][order[t][r]]).sum()
    };
    let mut heap = BinaryHeap::new();
    let mut seen = HashSet::new();
    let start = vec![0usize; m];
    heap.push(Candidate { distance: total(&start), ranks: start.clone() });
    seen.insert(start);
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let cand = heap.pop().expect("candidate budget validated against s^m");
        out.push(cand.ranks.iter().enumerate().map(|(t, &r)| order[t][r]).collect());
        for t in 0..m {
            if cand.ranks[t] + 1 < s {
                let mut next = cand.ranks.clone();
                next[t] += 1;
                if seen.insert(next.clone()) {
                    heap.push(Candidate { distance: total(&next), ranks: next });
                }
            }
        }
    }
    out
}

/// Top-K marginal estimate for sequential latents:
/// `logsumexp over the K best candidates of [log π(v) + log p(x|v)]`.
/// Exact when `K = sᵐ` covers the whole code space.
pub fn topk_log_density(model: &NvfModel, x: &Tensor, k: usize) -> Result<Vec<f64>> {
    let (s, m, d_code) = match model.latent {
        Some(LatentSpec::Sequential { s, m, d_code }) => (s, m, d_code),
        _ => {
            return Err(Error::EstimatorMismatch {
                estimator: "topk".into(),
                latent: Estimator::latent_name(&model.latent).to_string(),
            })
        }
    };
    let space = s.checked_pow(m as u32).unwrap_or(usize::MAX);
    if k == 0 || k > space {
        return Err(Error::CandidateBudget { k, space });
    }
    let enc = model
        .encoder
        .as_ref()
        .ok_or_else(|| Error::InvalidModel("sequential model is missing its encoder".into()))?;
    let codebook = enc
        .codebook
        .as_ref()
        .ok_or_else(|| Error::InvalidModel("sequential encoder is missing its codebook".into()))?;
    let prior = model
        .prior
        .as_ref()
        .ok_or_else(|| Error::InvalidModel("sequential model is missing its prior".into()))?;
    let (n, d) = (x.nrows(), x.ncols());
    let cb = codebook.value.data();
    let mut out = Vec::with_capacity(n);
    // chunk rows so each tape holds at most CHUNK candidate evaluations
    let rows_per_tape = (CHUNK / k).max(1);
    let mut lo = 0;
    while lo < n {
        let hi = (lo + rows_per_tape).min(n);
        let rows = hi - lo;
        let tape = Tape::new();
        let xc = Tensor::matrix(rows, d, x.data()[lo * d..hi * d].to_vec())?;
        let pre = enc.encode_pre_codes(&tape, &xc)?;
        let mut seqs = Vec::with_capacity(rows * k);
        for r in 0..rows {
            let pre_row = &pre.data()[r * m * d_code..(r + 1) * m * d_code];
            seqs.extend(top_candidates(pre_row, cb, s, m, d_code, k));
        }
        // contexts: codebook rows of each candidate, flattened per sequence
        let mut ctx = Vec::with_capacity(rows * k * m * d_code);
        for seq in &seqs {
            for &code in seq {
                ctx.extend_from_slice(&cb[code * d_code..(code + 1) * d_code]);
            }
        }
        let ctx = Tensor::matrix(rows * k, m * d_code, ctx)?;
        let mut x_rep = Vec::with_capacity(rows * k * d);
        for r in 0..rows {
            for _ in 0..k {
                x_rep.extend_from_slice(&x.data()[(lo + r) * d..(lo + r + 1) * d]);
            }
        }
        let x_rep = Tensor::matrix(rows * k, d, x_rep)?;
        let cond = model.flow.conditional_log_prob(&tape, &x_rep, &ctx)?;
        let prior_lp = prior.log_prob_sequences(&tape, &seqs)?;
        for r in 0..rows {
            let terms: Vec<f64> = (0..k)
                .map(|j| prior_lp.data()[r * k + j] + cond.data()[r * k + j])
                .collect();
            out.push(logsumexp(&terms));
        }
        lo = hi;
    }
    Ok(out)
}

/// Importance-weighted lower-bound estimate for continuous latents:
/// `logsumexp_k[log p(x|uₖ) + log π(uₖ) − log ν(uₖ|x)] − ln K` with
/// posterior proposals `uₖ ~ ν(·|x)`.
pub fn iw_log_density_bound(
    model: &NvfModel,
    x: &Tensor,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let d_u = match model.latent {
        Some(LatentSpec::Continuous { d_u }) => d_u,
        _ => {
            return Err(Error::EstimatorMismatch {
                estimator: "iw-bound".into(),
                latent: Estimator::latent_name(&model.latent).to_string(),
            })
        }
    };
    if k == 0 {
        return Err(Error::Config("iw-bound needs K >= 1".into()));
    }
    let enc = model
        .encoder
        .as_ref()
        .ok_or_else(|| Error::InvalidModel("continuous model is missing its encoder".into()))?;
    let (n, d) = (x.nrows(), x.ncols());
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut out = Vec::with_capacity(n);
    for (lo, hi) in chunks(n) {
        let rows = hi - lo;
        let tape = Tape::new();
        let xc = Tensor::matrix(rows, d, x.data()[lo * d..hi * d].to_vec())?;
        let (mu_t, ls_t) = enc.encode_gaussian(&tape, &xc)?;
        let mu = mu_t.data();
        let sigma: Vec<f64> = ls_t
            .data()
            .iter()
            .map(|v| v.clamp(-LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP).exp())
            .collect();
        let mut log_w = vec![Vec::with_capacity(k); rows];
        for _ in 0..k {
            let mut u = Vec::with_capacity(rows * d_u);
            let mut correction = vec![0.0f64; rows]; // log π(u) − log ν(u|x)
            for r in 0..rows {
                for j in 0..d_u {
                    let idx = r * d_u + j;
                    let eps: f64 = normal.sample(rng);
                    let uj = mu[idx] + sigma[idx] * eps;
                    u.push(uj);
                    let ln_nu = -0.5 * LN_2PI - sigma[idx].ln() - 0.5 * eps * eps;
                    let ln_pi = -0.5 * LN_2PI - 0.5 * uj * uj;
                    correction[r] += ln_pi - ln_nu;
                }
            }
            let context = Tensor::matrix(rows, d_u, u)?;
            let cond = model.flow.conditional_log_prob(&tape, &xc, &context)?;
            for r in 0..rows {
                log_w[r].push(cond.data()[r] + correction[r]);
            }
        }
        for w in &log_w {
            out.push(logsumexp(w) - (k as f64).ln());
        }
    }
    Ok(out)
}

/// Dispatch on the estimator after checking it fits the model's regime.
/// `seed` drives the importance sampler; the other estimators ignore it.
pub fn log_density(
    model: &NvfModel,
    x: &Tensor,
    estimator: Estimator,
    k: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    estimator.check(model)?;
    match estimator {
        Estimator::Exact => exact_log_density(model, x),
        Estimator::TopK => topk_log_density(model, x, k),
        Estimator::IwBound => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            iw_log_density_bound(model, x, k, &mut rng)
        }
    }
}

/// Generate `n` rows: `u ~ π`, `z ~ N(0, I)`, `x = G(z, context(u))`.
pub fn sample(model: &NvfModel, n: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let d = model.data_dim();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut out = Vec::with_capacity(n * d);
    for (lo, hi) in chunks(n) {
        let rows = hi - lo;
        let context = match &model.latent {
            None => NvfModel::empty_context(rows),
            Some(LatentSpec::Discrete { s }) => {
                let idx: Vec<usize> = (0..rows).map(|_| rng.random_range(0..*s)).collect();
                one_hot(&idx, *s)
            }
            Some(LatentSpec::Continuous { d_u }) => {
                let u: Vec<f64> = (0..rows * d_u).map(|_| normal.sample(rng)).collect();
                Tensor::matrix(rows, *d_u, u)?
            }
            Some(LatentSpec::Sequential { d_code, .. }) => {
                let prior = model
                    .prior
                    .as_ref()
                    .ok_or_else(|| Error::InvalidModel("sequential model is missing its prior".into()))?;
                let cb = model
                    .encoder
                    .as_ref()
                    .and_then(|e| e.codebook.as_ref())
                    .ok_or_else(|| Error::InvalidModel("sequential encoder is missing its codebook".into()))?;
                let seqs = prior.sample_sequences(rows, rng)?;
                let mut ctx = Vec::new();
                for seq in &seqs {
                    for &code in seq {
                        ctx.extend_from_slice(&cb.value.data()[code * d_code..(code + 1) * d_code]);
                    }
                }
                Tensor::matrix(rows, seq_width(model), ctx)?
            }
        };
        let z: Vec<f64> = (0..rows * d).map(|_| normal.sample(rng)).collect();
        let tape = Tape::new();
        let zt = Tensor::matrix(rows, d, z)?;
        let (x, _) = model.flow.forward(&tape, &zt, &context)?;
        out.extend_from_slice(x.data());
    }
    Ok(out)
}

fn seq_width(model: &NvfModel) -> usize {
    model.latent.as_ref().map_or(0, LatentSpec::context_dim)
}

/// Per-sample log densities with the mean NLL, in nats.
#[derive(Clone, Debug)]
pub struct DensityReport {
    pub logps: Vec<f64>,
    pub mean_nll: f64,
    pub estimator: Estimator,
    pub k: usize,
}

/// Evaluate a dataset (rows already standardized) and report in original
/// data units by adding back the standardization log-Jacobian.
pub fn nll_report(
    model: &NvfModel,
    x: &Tensor,
    log_jacobian: f64,
    estimator: Estimator,
    k: usize,
    seed: u64,
) -> Result<DensityReport> {
    let logps: Vec<f64> = log_density(model, x, estimator, k, seed)?
        .into_iter()
        .map(|lp| lp + log_jacobian)
        .collect();
    let mean_nll = -logps.iter().sum::<f64>() / logps.len().max(1) as f64;
    Ok(DensityReport { logps, mean_nll, estimator, k })
}

/// CSV serialization: `index,logp` rows, then a footer comment with the
/// summary. 17-significant-digit floats round-trip exactly.
pub fn report_csv(report: &DensityReport) -> String {
    let mut out = String::from("index,logp\n");
    for (i, lp) in report.logps.iter().enumerate() {
        out.push_str(&format!("{i},{lp:.16e}\n"));
    }
    out.push_str(&format!(
        "# mean_nll={:.16e} estimator={} K={}\n",
        report.mean_nll,
        report.estimator.tag(),
        report.k
    ));
    out
}

/// Validation NLL in standardized units with the regime's default estimator
/// (used for model selection during training).
pub fn validation_nll(model: &NvfModel, data: &SplitDataset, seed: u64) -> Result<f64> {
    let rows = &data.splits.val;
    if rows.is_empty() {
        return Err(Error::Data("empty validation split".into()));
    }
    let x = Tensor::matrix(rows.len(), data.data.d(), data.data.gather(rows))?;
    let logps = match model.latent {
        None | Some(LatentSpec::Discrete { .. }) => exact_log_density(model, &x)?,
        Some(LatentSpec::Sequential { s, m, .. }) => {
            let space = s.checked_pow(m as u32).unwrap_or(usize::MAX);
            topk_log_density(model, &x, space.min(8))?
        }
        Some(LatentSpec::Continuous { .. }) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x76616c); // fixed eval stream
            iw_log_density_bound(model, &x, 16, &mut rng)?
        }
    };
    Ok(-logps.iter().sum::<f64>() / logps.len() as f64)
}
