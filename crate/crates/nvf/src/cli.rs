//! Command-line front end: `train`, `eval`, `sample`, `grid`, and `oracle`
//! subcommands driven by a JSON run config.
//!
//! Exit codes are a stable contract:
//!
//! | code | meaning                                   |
//! |------|-------------------------------------------|
//! | 0    | success                                   |
//! | 1    | usage, config, or data error              |
//! | 2    | training aborted (non-finite loss)        |
//! | 3    | transport-oracle closed-form mismatch     |
//!
//! Every command is deterministic given its flags and config: all randomness
//! flows from explicit seeds.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::checkpoint;
use crate::data::{
    gen_gmm1d, gen_gmm2d, gen_two_moons, load_csv, standardize_and_split, Dataset,
    StandardizeStats,
};
use crate::density::{self, Estimator};
use crate::error::{Error, Result};
use crate::latent::LatentSpec;
use crate::oracle::{transport_jacobian, GmmSpec};
use crate::training::{self, metrics_csv, TrainConfig};

/// Tolerance for the oracle's direct-form comparison (relative).
const ORACLE_REL_TOL: f64 = 1e-4;
/// Tolerance for the oracle's log-form comparison (absolute), used when the
/// direct form is withheld as unrepresentable.
const ORACLE_LOG_ABS_TOL: f64 = 1e-3;

/// Synthetic data source or an external CSV file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Generator {
    /// Equal-weight 1-D pair `½N(−μ, σ²) + ½N(μ, σ²)`.
    Gmm1d { n: usize, mu: f64, sigma: f64 },
    /// 2-D mixture with shared isotropic noise.
    Gmm2d { n: usize, centers: Vec<[f64; 2]>, sigma: f64, weights: Vec<f64> },
    /// Two interleaving half-circles.
    TwoMoons { n: usize, noise: f64 },
    /// Externally prepared numeric CSV.
    Csv { path: String },
}

impl Generator {
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        match self {
            Generator::Gmm1d { n, mu, sigma } => gen_gmm1d(*n, *mu, *sigma, seed),
            Generator::Gmm2d { n, centers, sigma, weights } => {
                gen_gmm2d(*n, centers, *sigma, weights, seed)
            }
            Generator::TwoMoons { n, noise } => gen_two_moons(*n, *noise, seed),
            Generator::Csv { path } => load_csv(Path::new(path)),
        }
    }

    /// One-line provenance tag echoed into configs and checkpoints.
    pub fn describe(&self) -> String {
        match self {
            Generator::Gmm1d { n, mu, sigma } => format!("gmm1d(n={n}, mu={mu}, sigma={sigma})"),
            Generator::Gmm2d { n, centers, sigma, .. } => {
                format!("gmm2d(n={n}, components={}, sigma={sigma})", centers.len())
            }
            Generator::TwoMoons { n, noise } => format!("two_moons(n={n}, noise={noise})"),
            Generator::Csv { path } => format!("csv({path})"),
        }
    }
}

fn default_fractions() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

/// `data` section: source, split fractions, and the shuffle/generator seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub generator: Generator,
    #[serde(default = "default_fractions")]
    pub fractions: [f64; 3],
    #[serde(default)]
    pub seed: u64,
}

fn default_depth() -> usize {
    4
}
fn default_width() -> usize {
    32
}
fn default_enc_depth() -> usize {
    2
}
fn default_enc_width() -> usize {
    32
}

/// `model` section: latent regime and network sizes.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Absent for the unconditional baseline flow.
    #[serde(default)]
    pub latent: Option<LatentSpec>,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_enc_depth")]
    pub enc_depth: usize,
    #[serde(default = "default_enc_width")]
    pub enc_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent: None,
            depth: default_depth(),
            width: default_width(),
            enc_depth: default_enc_depth(),
            enc_width: default_enc_width(),
        }
    }
}

fn default_learning_rate() -> f64 {
    1e-3
}
fn default_batch_size() -> usize {
    128
}
fn default_steps() -> usize {
    2000
}
fn default_train_k() -> usize {
    1
}
fn default_tau_start() -> f64 {
    1.0
}
fn default_tau_end() -> f64 {
    0.2
}
fn default_kl_warmup_frac() -> f64 {
    0.25
}

/// `train` section: optimizer and schedule settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Monte Carlo sample count for the ELBO.
    #[serde(default = "default_train_k")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tau_start")]
    pub tau_start: f64,
    #[serde(default = "default_tau_end")]
    pub tau_end: f64,
    /// Fraction of the run over which the KL weight ramps 0 → 1.
    #[serde(default = "default_kl_warmup_frac")]
    pub kl_warmup_frac: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            learning_rate: default_learning_rate(),
            batch_size: default_batch_size(),
            steps: default_steps(),
            k: default_train_k(),
            seed: 0,
            tau_start: default_tau_start(),
            tau_end: default_tau_end(),
            kl_warmup_frac: default_kl_warmup_frac(),
        }
    }
}

/// `eval` section: estimator override and its sample/candidate budget.
/// Defaults follow the latent regime (exact, top-8, or 16 proposals).
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default)]
    pub estimator: Option<String>,
    #[serde(default)]
    pub k: Option<usize>,
}

/// The full JSON run config. Unknown keys anywhere are rejected.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Flatten the sections into the training loop's config.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            steps: self.train.steps,
            k: self.train.k,
            seed: self.train.seed,
            tau_start: self.train.tau_start,
            tau_end: self.train.tau_end,
            kl_warmup_frac: self.train.kl_warmup_frac,
            prior_learnable: matches!(self.model.latent, Some(LatentSpec::Sequential { .. })),
            latent: self.model.latent.clone(),
            depth: self.model.depth,
            width: self.model.width,
            enc_depth: self.model.enc_depth,
            enc_width: self.model.enc_width,
            dataset: self.data.generator.describe(),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "nvf",
    version,
    about = "Density estimation with conditional normalizing flows and variational latent representations",
    after_help = "Config defaults: data.fractions [0.8, 0.1, 0.1]; data.seed 0; \
model {latent: none, depth 4, width 32, enc_depth 2, enc_width 32}; \
train {learning_rate 1e-3, batch_size 128, steps 2000, k 1, seed 0, tau_start 1.0, tau_end 0.2, kl_warmup_frac 0.25}; \
eval {estimator from the latent regime (exact | topk | iw), k 1 | min(8, s^m) | 16}."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a JSON config and write a checkpoint.
    Train {
        /// JSON run config path.
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint output path; metrics CSV goes to this path + ".log".
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint's test NLL and write a per-sample report.
    Eval {
        /// Checkpoint path.
        #[arg(long)]
        model: PathBuf,
        /// Data to evaluate: a JSON run config (its test split is used) or a
        /// CSV file (all rows are used).
        #[arg(long)]
        data: String,
        /// exact | topk | iw. Defaults to the checkpoint's latent regime.
        #[arg(long)]
        estimator: Option<String>,
        /// Candidate / proposal count for topk or iw.
        #[arg(long)]
        k: Option<usize>,
        /// Report CSV output path.
        #[arg(long)]
        report: PathBuf,
    },
    /// Draw samples from a checkpoint into a CSV file (original data units).
    Sample {
        /// Checkpoint path.
        #[arg(long)]
        model: PathBuf,
        /// Number of samples.
        #[arg(short, long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sample CSV output path (no header, one row per sample).
        #[arg(long)]
        out: PathBuf,
    },
    /// Export a 2-D log-density grid as CSV rows `x,y,logp`.
    #[command(allow_negative_numbers = true)]
    Grid {
        /// Checkpoint path (2-D models only).
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        xmin: f64,
        #[arg(long)]
        xmax: f64,
        #[arg(long)]
        ymin: f64,
        #[arg(long)]
        ymax: f64,
        /// Grid resolution per axis.
        #[arg(long)]
        res: usize,
        /// Grid CSV output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the analytic transport Jacobian against its closed form.
    #[command(allow_negative_numbers = true)]
    Oracle {
        /// Component separation of the target mixture ½N(−μ,σ²) + ½N(μ,σ²).
        #[arg(long)]
        mu: f64,
        /// Shared component scale.
        #[arg(long)]
        sigma: f64,
        /// 1: from N(0,1); 2: from the half-separation mixture ½N(∓μ/2,σ²).
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        case: u8,
    },
}

/// Parse `args` (argv[0] included) and run. Returns the process exit code.
pub fn run_from_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            eprint!("{e}");
            return 1;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::TrainingAborted(_) => 2,
                Error::Oracle(_) => 3,
                _ => 1,
            }
        }
    }
}

pub fn run_from_env() -> u8 {
    run_from_args(std::env::args_os())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out } => cmd_train(&config, &out),
        Command::Eval { model, data, estimator, k, report } => {
            cmd_eval(&model, &data, estimator.as_deref(), k, &report)
        }
        Command::Sample { model, n, seed, out } => cmd_sample(&model, n, seed, &out),
        Command::Grid { model, xmin, xmax, ymin, ymax, res, out } => {
            cmd_grid(&model, [xmin, xmax, ymin, ymax], res, &out)
        }
        Command::Oracle { mu, sigma, case } => cmd_oracle(mu, sigma, case),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn cmd_train(config_path: &Path, out: &Path) -> Result<()> {
    let run = RunConfig::from_path(config_path)?;
    let tc = run.train_config();
    tc.validate()?;
    let dataset = run.data.generator.generate(run.data.seed)?;
    let split = standardize_and_split(&dataset, run.data.fractions, run.data.seed)?;
    let (model, metrics) = training::train(&tc, &split)?;
    checkpoint::save(&model, Some(&split.stats), &tc, out)?;
    let log_path = PathBuf::from(format!("{}.log", out.display()));
    write_file(&log_path, &metrics_csv(&metrics))?;
    let val = density::validation_nll(&model, &split, tc.seed)?;
    println!("final validation NLL: {val:.6} nats (standardized units)");
    println!("checkpoint: {}", out.display());
    Ok(())
}

/// Resolve `--data`: a `.json` run config contributes its test split; any
/// other path is read as a CSV whose rows are all evaluated. Rows are
/// standardized with the checkpoint's statistics.
fn resolve_eval_rows(
    spec: &str,
    stats: Option<&StandardizeStats>,
) -> Result<(Vec<f64>, usize, f64)> {
    let (raw, n, d_orig) = if spec.ends_with(".json") {
        let run = RunConfig::from_path(Path::new(spec))?;
        let dataset = run.data.generator.generate(run.data.seed)?;
        let split = standardize_and_split(&dataset, run.data.fractions, run.data.seed)?;
        let rows = dataset.gather(&split.splits.test);
        (rows, split.splits.test.len(), dataset.d())
    } else {
        let dataset = load_csv(Path::new(spec))?;
        (dataset.data().to_vec(), dataset.n(), dataset.d())
    };
    match stats {
        Some(stats) => Ok((stats.apply(&raw, d_orig)?, n, stats.log_jacobian)),
        None => Ok((raw, n, 0.0)),
    }
}

fn cmd_eval(
    model_path: &Path,
    data_spec: &str,
    estimator: Option<&str>,
    k: Option<usize>,
    report_path: &Path,
) -> Result<()> {
    let (model, stats, tc) = checkpoint::load(model_path)?;
    let (rows, n, log_jacobian) = resolve_eval_rows(data_spec, stats.as_ref())?;
    if n == 0 {
        return Err(Error::Data(format!("{data_spec}: no rows to evaluate")));
    }
    let d = rows.len() / n;
    if d != model.data_dim() {
        return Err(Error::Config(format!(
            "data has {d} columns after standardization but the model expects {}",
            model.data_dim()
        )));
    }
    let est = match estimator {
        Some(name) => name.parse::<Estimator>()?,
        None => Estimator::for_latent(&model.latent),
    };
    let k = k.unwrap_or_else(|| Estimator::default_k(&model.latent));
    let x = Tensor::matrix(n, d, rows)?;
    let report = density::nll_report(&model, &x, log_jacobian, est, k, tc.seed)?;
    write_file(report_path, &density::report_csv(&report))?;
    println!(
        "mean NLL: {:.6} nats over {n} rows (estimator={}, K={k})",
        report.mean_nll,
        est.tag()
    );
    Ok(())
}

fn cmd_sample(model_path: &Path, n: usize, seed: u64, out: &Path) -> Result<()> {
    let (model, stats, _) = checkpoint::load(model_path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let standardized = density::sample(&model, n, &mut rng)?;
    let rows = match &stats {
        Some(stats) => stats.invert(&standardized),
        None => standardized,
    };
    let d = model.data_dim();
    let mut csv = String::new();
    for row in rows.chunks(d) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    write_file(out, &csv)?;
    println!("wrote {n} samples to {}", out.display());
    Ok(())
}

fn cmd_grid(model_path: &Path, bounds: [f64; 4], res: usize, out: &Path) -> Result<()> {
    let [xmin, xmax, ymin, ymax] = bounds;
    if res < 1 {
        return Err(Error::Config("grid resolution must be >= 1".into()));
    }
    if !(xmin <= xmax && ymin <= ymax) {
        return Err(Error::Config("grid bounds must satisfy min <= max".into()));
    }
    let (model, stats, _) = checkpoint::load(model_path)?;
    if model.data_dim() != 2 {
        return Err(Error::Config(format!(
            "grid export needs a 2-D model, this one has {} dimensions",
            model.data_dim()
        )));
    }
    let est = Estimator::for_latent(&model.latent);
    if est == Estimator::IwBound {
        return Err(Error::Config(
            "grid export needs an exact or top-K density; the continuous regime only offers a stochastic lower bound".into(),
        ));
    }
    let axis = |lo: f64, hi: f64| -> Vec<f64> {
        if res == 1 {
            vec![0.5 * (lo + hi)]
        } else {
            (0..res).map(|i| lo + (hi - lo) * i as f64 / (res - 1) as f64).collect()
        }
    };
    let xs = axis(xmin, xmax);
    let ys = axis(ymin, ymax);
    let mut points = Vec::with_capacity(res * res * 2);
    for y in &ys {
        for x in &xs {
            points.push(*x);
            points.push(*y);
        }
    }
    let (standardized, log_jacobian) = match &stats {
        Some(stats) => (stats.apply(&points, 2)?, stats.log_jacobian),
        None => (points.clone(), 0.0),
    };
    let xt = Tensor::matrix(res * res, 2, standardized)?;
    let k = Estimator::default_k(&model.latent);
    let logps = density::log_density(&model, &xt, est, k, 0)?;
    let mut csv = String::from("x,y,logp\n");
    for (i, lp) in logps.iter().enumerate() {
        let (x, y) = (points[2 * i], points[2 * i + 1]);
        csv.push_str(&format!("{x:.16e},{y:.16e},{:.16e}\n", lp + log_jacobian));
    }
    write_file(out, &csv)?;
    println!("wrote {res}x{res} grid to {}", out.display());
    Ok(())
}

fn cmd_oracle(mu: f64, sigma: f64, case: u8) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("--sigma must be positive and finite, got {sigma}")));
    }
    if !mu.is_finite() {
        return Err(Error::Config(format!("--mu must be finite, got {mu}")));
    }
    let target = GmmSpec::symmetric_pair(mu, sigma)?;
    let (source_desc, source, closed_log) = match case {
        1 => ("N(0, 1)".to_string(), GmmSpec::standard_normal(), sigma.ln() + mu * mu / (2.0 * sigma * sigma)),
        2 => (
            format!("0.5 N(-{0}, {1}^2) + 0.5 N({0}, {1}^2)", mu / 2.0, sigma),
            GmmSpec::symmetric_pair(mu / 2.0, sigma)?,
            3.0 * mu * mu / (8.0 * sigma * sigma),
        ),
        _ => return Err(Error::Config(format!("case must be 1 or 2, got {case}"))),
    };
    let closed_direct = if case == 1 { sigma * (closed_log - sigma.ln()).exp() } else { closed_log.exp() };
    let jac = transport_jacobian(&source, &target, 0.0)?;

    println!("transport at z=0: {source_desc} -> 0.5 N(-{mu}, {sigma}^2) + 0.5 N({mu}, {sigma}^2)");
    println!("numeric log dG/dz:      {:.10}", jac.log);
    println!("closed-form log value:  {closed_log:.10}");
    match jac.direct {
        Some(direct) => {
            println!("numeric dG/dz:          {direct:.10}");
            println!("closed-form value:      {closed_direct:.10}");
            let rel = (direct - closed_direct).abs() / closed_direct.abs().max(f64::MIN_POSITIVE);
            if rel > ORACLE_REL_TOL {
                return Err(Error::Oracle(format!(
                    "numeric Jacobian {direct:.10} deviates from closed form {closed_direct:.10} (relative error {rel:.3e} > {ORACLE_REL_TOL:.0e})"
                )));
            }
            println!("agreement: relative error {rel:.3e} within {ORACLE_REL_TOL:.0e}");
        }
        None => {
            println!("numeric dG/dz:          unrepresentable (target density underflows; log form is authoritative)");
            let err = (jac.log - closed_log).abs();
            if err > ORACLE_LOG_ABS_TOL {
                return Err(Error::Oracle(format!(
                    "log-form Jacobian {:.10} deviates from closed form {closed_log:.10} (absolute error {err:.3e} > {ORACLE_LOG_ABS_TOL:.0e})",
                    jac.log
                )));
            }
            println!("agreement: log-form error {err:.3e} within {ORACLE_LOG_ABS_TOL:.0e}");
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_documented_defaults() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{"data": {"generator": {"kind": "gmm1d", "n": 64, "mu": 2.0, "sigma": 0.1}}}"#,
        )
        .unwrap();
        assert_eq!(cfg.data.fractions, [0.8, 0.1, 0.1]);
        assert_eq!(cfg.data.seed, 0);
        assert!(cfg.model.latent.is_none());
        assert_eq!((cfg.model.depth, cfg.model.width), (4, 32));
        assert_eq!((cfg.model.enc_depth, cfg.model.enc_width), (2, 32));
        assert_eq!(cfg.train.learning_rate, 1e-3);
        assert_eq!(cfg.train.batch_size, 128);
        assert_eq!(cfg.train.steps, 2000);
        assert_eq!(cfg.train.k, 1);
        assert_eq!((cfg.train.tau_start, cfg.train.tau_end), (1.0, 0.2));
        assert!(cfg.eval.estimator.is_none());
    }

    #[test]
    fn unknown_keys_are_rejected_everywhere() {
        let cases = [
            r#"{"data": {"generator": {"kind": "gmm1d", "n": 1, "mu": 0.0, "sigma": 1.0}}, "extra": 1}"#,
            r#"{"data": {"generator": {"kind": "gmm1d", "n": 1, "mu": 0.0, "sigma": 1.0}, "typo": 2}}"#,
            r#"{"data": {"generator": {"kind": "gmm1d", "n": 1, "mu": 0.0, "sigma": 1.0, "oops": 3}}}"#,
            r#"{"data": {"generator": {"kind": "gmm1d", "n": 1, "mu": 0.0, "sigma": 1.0}}, "train": {"lr": 0.1}}"#,
        ];
        for case in cases {
            assert!(serde_json::from_str::<RunConfig>(case).is_err(), "accepted: {case}");
        }
    }

    #[test]
    fn latent_spec_parses_inside_the_model_section() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{
                "data": {"generator": {"kind": "two_moons", "n": 128, "noise": 0.05}},
                "model": {"latent": {"kind": "sequential", "s": 8, "m": 10, "d_code": 4}},
                "train": {"steps": 5}
            }"#,
        )
        .unwrap();
        let tc = cfg.train_config();
        assert!(tc.prior_learnable);
        assert_eq!(tc.steps, 5);
        assert_eq!(
            tc.latent,
            Some(LatentSpec::Sequential { s: 8, m: 10, d_code: 4 })
        );
        assert!(tc.dataset.starts_with("two_moons"));
    }

    #[test]
    fn generators_dispatch_and_are_seed_deterministic() {
        let gen: Generator = serde_json::from_str(
            r#"{"kind": "gmm2d", "n": 16, "centers": [[0.0, 0.0], [4.0, 4.0]], "sigma": 0.3, "weights": [0.5, 0.5]}"#,
        )
        .unwrap();
        let a = gen.generate(7).unwrap();
        let b = gen.generate(7).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!((a.n(), a.d()), (16, 2));
        assert_eq!(gen.describe(), "gmm2d(n=16, components=2, sigma=0.3)");
    }

    #[test]
    fn help_and_usage_errors_map_to_the_exit_contract() {
        assert_eq!(run_from_args(["nvf", "--help"]), 0);
        assert_eq!(run_from_args(["nvf", "--version"]), 0);
        assert_eq!(run_from_args(["nvf", "no-such-command"]), 1);
        assert_eq!(run_from_args(["nvf", "train"]), 1); // missing required flags
        assert_eq!(run_from_args(["nvf", "oracle", "--mu", "1", "--sigma", "0.5", "--case", "9"]), 1);
    }

    #[test]
    fn oracle_cases_agree_with_their_closed_forms() {
        assert_eq!(
            run_from_args(["nvf", "oracle", "--mu", "1", "--sigma", "0.5", "--case", "1"]),
            0
        );
        assert_eq!(
            run_from_args(["nvf", "oracle", "--mu", "1", "--sigma", "0.5", "--case", "2"]),
            0
        );
        // log-form regime: the direct ratio is withheld
        assert_eq!(
            run_from_args(["nvf", "oracle", "--mu", "2", "--sigma", "0.1", "--case", "1"]),
            0
        );
        // degenerate mixture: Jacobian reduces to sigma
        assert_eq!(
            run_from_args(["nvf", "oracle", "--mu", "0", "--sigma", "0.7", "--case", "1"]),
            0
        );
        // invalid sigma is a usage error, not an oracle mismatch
        assert_eq!(
            run_from_args(["nvf", "oracle", "--mu", "1", "--sigma", "-1", "--case", "1"]),
            1
        );
    }
}
