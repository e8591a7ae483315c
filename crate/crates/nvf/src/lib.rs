//! Density estimation with conditional normalizing flows and variational
//! latent representations.
//!
//! The model family couples an invertible flow `G(z, u)` with a latent
//! variable `u` carrying multi-modal structure: a variational posterior
//! proposes `u` per data point, the flow models the conditional density
//! `p(x | u)` by change of variables, and a prior over `u` (fixed or learned)
//! closes the marginal. Training maximizes an evidence lower bound; exact
//! enumeration, top-K enumeration, or importance-weighted bounds recover the
//! marginal density at evaluation time depending on the latent family.
//!
//! Subsystems:
//!
//! | module      | contents                                                    |
//! |-------------|-------------------------------------------------------------|
//! | `autodiff`  | reverse-mode tape, tensors, gradient checking               |
//! | `nn`        | plain MLPs used by conditioners and encoders                |
//! | `flow`      | invertible layers and their stacked composition             |
//! | `latent`    | posteriors, priors, samplers, vector quantization           |
//! | `training`  | losses, Adam, schedules, the training loop                  |
//! | `density`   | marginal density estimators, sampling, reports              |
//! | `oracle`    | closed-form mixture transport diagnostics                   |
//! | `data`      | generators, CSV loading, standardization, splits            |
//! | `checkpoint`| binary model serialization                                  |
//! | `cli`       | config parsing and the `nvf` command implementations        |

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod density;
pub mod error;
pub mod flow;
pub mod latent;
pub mod nn;
pub mod oracle;
pub mod training;

pub use error::{Error, Result};
