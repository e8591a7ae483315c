//! Small fully-connected networks used as coupling conditioners and
//! posterior encoders.
//!
//! Everything is expressed through the reverse-mode tape: a forward pass
//! borrows the parameters onto the tape with `watch`, so one `backward`
//! call yields gradients for every layer. Zero-width inputs are legal — a
//! `Linear` with `in_dim == 0` degenerates to its bias, which is how
//! unconditional conditioners (no pass-through block, no context) stay
//! uniform with the general case.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Parameter, Tape, Tensor};
use crate::error::Result;

/// Affine map `x W + b` with `W: [in, out]`, `b: [out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Parameter,
    pub b: Parameter,
}

impl Linear {
    /// He-style initialization (`std = sqrt(2 / in_dim)`), zero bias.
    pub fn init(name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let std = if in_dim > 0 { (2.0 / in_dim as f64).sqrt() } else { 0.0 };
        let dist = Normal::new(0.0, std.max(f64::MIN_POSITIVE)).unwrap();
        let w: Vec<f64> = (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect();
        Linear {
            w: Parameter::new(format!("{name}.w"), Tensor::matrix(in_dim, out_dim, w).unwrap()),
            b: Parameter::new(format!("{name}.b"), Tensor::from_shape(vec![out_dim], vec![0.0; out_dim]).unwrap()),
        }
    }

    /// All-zero weights and bias; the layer outputs exactly zero.
    pub fn init_zero(name: &str, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            w: Parameter::new(
                format!("{name}.w"),
                Tensor::matrix(in_dim, out_dim, vec![0.0; in_dim * out_dim]).unwrap(),
            ),
            b: Parameter::new(format!("{name}.b"), Tensor::from_shape(vec![out_dim], vec![0.0; out_dim]).unwrap()),
        }
    }

    /// `x: [n, in] -> [n, out]`.
    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let w = tape.watch(&self.w)?;
        let b = tape.watch(&self.b)?;
        let y = tape.matmul(x, &w)?;
        let bias = tape.broadcast_rows(&b, x.nrows())?;
        tape.add(&y, &bias)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Multilayer perceptron with relu between layers and a linear head.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`; when `final_zero` the head starts at
    /// zero so the whole network initially outputs zero.
    pub fn init(name: &str, dims: &[usize], final_zero: bool, rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "an mlp needs at least input and output dims");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            let layer_name = format!("{name}.{i}");
            let last = i == dims.len() - 2;
            layers.push(if last && final_zero {
                Linear::init_zero(&layer_name, dims[i], dims[i + 1])
            } else {
                Linear::init(&layer_name, dims[i], dims[i + 1], rng)
            });
        }
        Mlp { layers }
    }

    /// `x: [n, in] -> [n, out]`.
    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, &h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(&h)?;
            }
        }
        Ok(h)
    }

    /// The final layer, exposed so tests can pin constant outputs via its bias.
    pub fn head_mut(&mut self) -> &mut Linear {
        self.layers.last_mut().unwrap()
    }

    /// Layer `i`, exposed so tests can build exact hand-specified networks.
    pub fn layer_mut(&mut self, i: usize) -> &mut Linear {
        &mut self.layers[i]
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}
