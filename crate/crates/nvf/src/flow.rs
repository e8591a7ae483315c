//! Conditional invertible transforms with exact log-determinants.
//!
//! A [`FlowStack`] composes three layer kinds into a map `x = G(z, u)`:
//!
//! | layer              | forward                          | log-det            |
//! |--------------------|----------------------------------|--------------------|
//! | reverse permutation| coordinate reversal              | 0                  |
//! | LU linear          | `x = P L U z`                    | `Σ log U_ii`       |
//! | affine coupling    | `x_b = z_b ⊙ exp(s) + t`         | `Σ s`              |
//!
//! The coupling conditioner sees the pass-through block concatenated with a
//! context vector `u`, which is how conditioning enters the transport map.
//! Its scale output is bounded to `(-5, 5)` by a scaled tanh before
//! exponentiation: a deliberately restricted Jacobian, so that an
//! unconditional stack cannot stretch volume without bound and the benefit
//! of conditioning is measurable. All layers operate on row-batched inputs
//! `[n, d]` with a per-row log-determinant `[n]`, and every forward or
//! inverse pass is differentiable with respect to parameters and context.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Parameter, Tape, Tensor};
use crate::error::{Error, Result};
use crate::nn::Mlp;

const LN_2PI: f64 = 1.8378770664093453;
/// Bound on the log-diagonal of the LU layer before exponentiation.
const LOG_DIAG_CLAMP: f64 = 30.0;
/// The coupling scale is `SCALE_BOUND * tanh(raw)`.
const SCALE_BOUND: f64 = 5.0;

/// Invertible linear map `x = P L U z` with `P` a fixed permutation, `L`
/// unit-lower-triangular, and `U` upper-triangular with positive diagonal
/// `exp(log_diag)`.
#[derive(Clone, Debug)]
pub struct LuLinear {
    /// Strictly-lower entries are the trainable part of `L`.
    pub l: Parameter,
    /// Strictly-upper entries are the trainable part of `U`.
    pub u: Parameter,
    /// Log of the diagonal of `U`, clamped to ±30 before exp.
    pub log_diag: Parameter,
    perm: Vec<usize>,
    p_mat: Tensor,
    mask_l: Tensor,
    mask_u: Tensor,
    eye: Tensor,
}

impl LuLinear {
    /// Identity-valued parameters with a random fixed permutation.
    pub fn init(name: &str, d: usize, rng: &mut impl Rng) -> Self {
        let mut perm: Vec<usize> = (0..d).collect();
        perm.shuffle(rng);
        Self::with_permutation(name, d, perm)
    }

    /// Identity-valued parameters with the given permutation (used by tests
    /// and checkpoint restore).
    pub fn with_permutation(name: &str, d: usize, perm: Vec<usize>) -> Self {
        assert_eq!(perm.len(), d, "permutation length must equal dimension");
        let mut mask_l = vec![0.0; d * d];
        let mut mask_u = vec![0.0; d * d];
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
            for j in 0..i {
                mask_l[i * d + j] = 1.0;
            }
            for j in i + 1..d {
                mask_u[i * d + j] = 1.0;
            }
        }
        let mut lu = LuLinear {
            l: Parameter::new(format!("{name}.l"), Tensor::matrix(d, d, vec![0.0; d * d]).unwrap()),
            u: Parameter::new(format!("{name}.u"), Tensor::matrix(d, d, vec![0.0; d * d]).unwrap()),
            log_diag: Parameter::new(format!("{name}.log_diag"), Tensor::from_shape(vec![d], vec![0.0; d]).unwrap()),
            perm: Vec::new(),
            p_mat: Tensor::matrix(d, d, vec![0.0; d * d]).unwrap(),
            mask_l: Tensor::matrix(d, d, mask_l).unwrap(),
            mask_u: Tensor::matrix(d, d, mask_u).unwrap(),
            eye: Tensor::matrix(d, d, eye).unwrap(),
        };
        lu.set_permutation(perm);
        lu
    }

    /// Replace the fixed permutation (checkpoint restore).
    pub fn set_permutation(&mut self, perm: Vec<usize>) {
        let d = perm.len();
        let mut p = vec![0.0; d * d];
        for (i, &src) in perm.iter().enumerate() {
            assert!(src < d, "permutation entry out of range");
            p[i * d + src] = 1.0;
        }
        self.p_mat = Tensor::matrix(d, d, p).unwrap();
        self.perm = perm;
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    /// Effective `U = strict_upper(u) + diag(exp(log_diag))` on the tape.
    fn effective_u(&self, tape: &Tape) -> Result<Tensor> {
        let uw = tape.watch(&self.u)?;
        let ld = tape.watch(&self.log_diag)?;
        let ld_c = tape.clamp(&ld, -LOG_DIAG_CLAMP, LOG_DIAG_CLAMP)?;
        let diag = tape.diag(&tape.exp(&ld_c)?)?;
        tape.add(&tape.mul(&self.mask_u, &uw)?, &diag)
    }

    /// Per-row sum of the clamped log-diagonal, broadcast to `[n]`.
    fn logdet(&self, tape: &Tape, n: usize, negate: bool) -> Result<Tensor> {
        let ld = tape.watch(&self.log_diag)?;
        let ld_c = tape.clamp(&ld, -LOG_DIAG_CLAMP, LOG_DIAG_CLAMP)?;
        let total = tape.sum(&ld_c)?;
        let total = if negate { tape.neg(&total)? } else { total };
        tape.broadcast_rows(&total, n)
    }

    fn forward(&self, tape: &Tape, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let lw = tape.watch(&self.l)?;
        let l_eff = tape.add(&self.eye, &tape.mul(&self.mask_l, &lw)?)?;
        let u_eff = self.effective_u(tape)?;
        let m = tape.matmul(&self.p_mat, &tape.matmul(&l_eff, &u_eff)?)?;
        let x = tape.matmul(z, &tape.transpose(&m)?)?;
        Ok((x, self.logdet(tape, z.nrows(), false)?))
    }

    fn inverse(&self, tape: &Tape, x: &Tensor) -> Result<(Tensor, Tensor)> {
        // rows are column vectors: P^{-1} x == x @ P for a permutation matrix
        let w = tape.matmul(x, &self.p_mat)?;
        let y = tape.solve_lower_unit(&tape.watch(&self.l)?, &w)?;
        let z = tape.solve_upper(&self.effective_u(tape)?, &y)?;
        Ok((z, self.logdet(tape, x.nrows(), true)?))
    }
}

/// Affine coupling: the first `a` coordinates pass through and parameterize
/// an elementwise affine map of the rest, conditioned on the context.
#[derive(Clone, Debug)]
pub struct AffineCoupling {
    d: usize,
    a: usize,
    /// Conditioner; outputs `[raw_scale, shift]`, `2 (d - a)` wide.
    pub net: Mlp,
}

impl AffineCoupling {
    /// Splits at `a = d / 2`; for `d = 1` the pass-through block is empty and
    /// the single coordinate is driven by the context alone (or by constants
    /// when there is no context). The conditioner head starts at zero so the
    /// layer begins as the identity.
    pub fn init(name: &str, d: usize, context_dim: usize, width: usize, rng: &mut impl Rng) -> Self {
        assert!(d >= 1, "coupling needs at least one coordinate");
        let a = d / 2;
        let dims = [a + context_dim, width, width, 2 * (d - a)];
        AffineCoupling {
            d,
            a,
            net: Mlp::init(name, &dims, true, rng),
        }
    }

    pub fn split_index(&self) -> usize {
        self.a
    }

    /// Bounded scale and shift from the pass-through block and context.
    fn scale_shift(&self, tape: &Tape, passthrough: &Tensor, context: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = tape.concat_cols(&[passthrough, context])?;
        let out = self.net.forward(tape, &h)?;
        let b = self.d - self.a;
        let raw = tape.slice_cols(&out, 0, b)?;
        let t = tape.slice_cols(&out, b, 2 * b)?;
        let s = tape.mul_scalar(&tape.tanh(&raw)?, SCALE_BOUND)?;
        Ok((s, t))
    }

    fn forward(&self, tape: &Tape, z: &Tensor, context: &Tensor) -> Result<(Tensor, Tensor)> {
        let z1 = tape.slice_cols(z, 0, self.a)?;
        let z2 = tape.slice_cols(z, self.a, self.d)?;
        let (s, t) = self.scale_shift(tape, &z1, context)?;
        let x2 = tape.add(&tape.mul(&z2, &tape.exp(&s)?)?, &t)?;
        let x = tape.concat_cols(&[&z1, &x2])?;
        Ok((x, tape.sum_cols(&s)?))
    }

    fn inverse(&self, tape: &Tape, x: &Tensor, context: &Tensor) -> Result<(Tensor, Tensor)> {
        let x1 = tape.slice_cols(x, 0, self.a)?;
        let x2 = tape.slice_cols(x, self.a, self.d)?;
        let (s, t) = self.scale_shift(tape, &x1, context)?;
        let z2 = tape.mul(&tape.sub(&x2, &t)?, &tape.exp(&tape.neg(&s)?)?)?;
        let z = tape.concat_cols(&[&x1, &z2])?;
        Ok((z, tape.neg(&tape.sum_cols(&s)?)?))
    }
}

/// One invertible layer.
#[derive(Clone, Debug)]
pub enum FlowLayer {
    ReversePermutation,
    LuLinear(LuLinear),
    AffineCoupling(AffineCoupling),
}

impl FlowLayer {
    /// `z: [n, d] -> (x: [n, d], logdet: [n])`.
    pub fn forward(&self, tape: &Tape, z: &Tensor, context: &Tensor) -> Result<(Tensor, Tensor)> {
        match self {
            FlowLayer::ReversePermutation => {
                let x = tape.reverse_cols(z)?;
                Ok((x, Tensor::from_shape(vec![z.nrows()], vec![0.0; z.nrows()]).unwrap()))
            }
            FlowLayer::LuLinear(lu) => lu.forward(tape, z),
            FlowLayer::AffineCoupling(c) => c.forward(tape, z, context),
        }
    }

    /// Exact inverse; logdet is the negative of the forward logdet at the
    /// corresponding point.
    pub fn inverse(&self, tape: &Tape, x: &Tensor, context: &Tensor) -> Result<(Tensor, Tensor)> {
        match self {
            FlowLayer::ReversePermutation => {
                let z = tape.reverse_cols(x)?;
                Ok((z, Tensor::from_shape(vec![x.nrows()], vec![0.0; x.nrows()]).unwrap()))
            }
            FlowLayer::LuLinear(lu) => lu.inverse(tape, x),
            FlowLayer::AffineCoupling(c) => c.inverse(tape, x, context),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        match self {
            FlowLayer::ReversePermutation => vec![],
            FlowLayer::LuLinear(lu) => vec![&lu.l, &lu.u, &lu.log_diag],
            FlowLayer::AffineCoupling(c) => c.net.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            FlowLayer::ReversePermutation => vec![],
            FlowLayer::LuLinear(lu) => vec![&mut lu.l, &mut lu.u, &mut lu.log_diag],
            FlowLayer::AffineCoupling(c) => c.net.params_mut(),
        }
    }
}

/// Ordered composition of invertible layers over a standard-normal base.
#[derive(Clone, Debug)]
pub struct FlowStack {
    pub layers: Vec<FlowLayer>,
    data_dim: usize,
    context_dim: usize,
}

impl FlowStack {
    pub fn new(layers: Vec<FlowLayer>, data_dim: usize, context_dim: usize) -> Self {
        FlowStack { layers, data_dim, context_dim }
    }

    /// The standard block `[reverse, LU linear, coupling]` repeated `depth`
    /// times; `width` sizes the coupling conditioners.
    pub fn build(data_dim: usize, context_dim: usize, depth: usize, width: usize, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(3 * depth);
        for block in 0..depth {
            layers.push(FlowLayer::ReversePermutation);
            layers.push(FlowLayer::LuLinear(LuLinear::init(
                &format!("flow.{block}.linear"),
                data_dim,
                rng,
            )));
            layers.push(FlowLayer::AffineCoupling(AffineCoupling::init(
                &format!("flow.{block}.coupling"),
                data_dim,
                context_dim,
                width,
                rng,
            )));
        }
        FlowStack { layers, data_dim, context_dim }
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    /// Fixed permutations of the LU layers, in stack order (for checkpoints).
    pub fn permutations(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                FlowLayer::LuLinear(lu) => Some(lu.permutation().to_vec()),
                _ => None,
            })
            .collect()
    }

    /// Restore the fixed permutations saved by [`Self::permutations`].
    pub fn set_permutations(&mut self, perms: &[Vec<usize>]) {
        let mut it = perms.iter();
        for layer in &mut self.layers {
            if let FlowLayer::LuLinear(lu) = layer {
                lu.set_permutation(it.next().expect("one permutation per LU layer").clone());
            }
        }
        assert!(it.next().is_none(), "more permutations than LU layers");
    }

    fn check_input(&self, v: &Tensor, context: &Tensor, who: &'static str) -> Result<()> {
        if v.shape() != [v.nrows(), self.data_dim] || context.shape() != [v.nrows(), self.context_dim] {
            return Err(Error::ShapeMismatch {
                op: who,
                detail: format!(
                    "expected [n, {}] with context [n, {}], got {:?} and {:?}",
                    self.data_dim,
                    self.context_dim,
                    v.shape(),
                    context.shape()
                ),
            });
        }
        Ok(())
    }

    /// Sampling direction: `z -> x`, accumulating per-row log-determinants.
    pub fn forward(&self, tape: &Tape, z: &Tensor, context: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(z, context, "flow_forward")?;
        let n = z.nrows();
        let mut cur = z.clone();
        let mut total = Tensor::from_shape(vec![n], vec![0.0; n]).unwrap();
        for layer in &self.layers {
            let (next, ld) = layer.forward(tape, &cur, context)?;
            total = tape.add(&total, &ld)?;
            cur = next;
        }
        Ok((cur, total))
    }

    /// Density direction: `x -> z`, layers inverted in reverse order.
    pub fn inverse(&self, tape: &Tape, x: &Tensor, context: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(x, context, "flow_inverse")?;
        let n = x.nrows();
        let mut cur = x.clone();
        let mut total = Tensor::from_shape(vec![n], vec![0.0; n]).unwrap();
        for layer in self.layers.iter().rev() {
            let (next, ld) = layer.inverse(tape, &cur, context)?;
            total = tape.add(&total, &ld)?;
            cur = next;
        }
        Ok((cur, total))
    }

    /// `log p(x | context)` under the standard-normal base: per row,
    /// `-d/2 ln 2π - ½|z|² + log|det ∇x G⁻¹|`.
    pub fn conditional_log_prob(&self, tape: &Tape, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (z, logdet) = self.inverse(tape, x, context)?;
        let sq = tape.sum_cols(&tape.mul(&z, &z)?)?;
        let base = tape.add_scalar(
            &tape.mul_scalar(&sq, -0.5)?,
            -0.5 * self.data_dim as f64 * LN_2PI,
        )?;
        tape.add(&base, &logdet)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}
