//! Small learned building blocks shared by the encoder, fusion and decoder.

use crate::autodiff::{DiffArray, ParamStore};
use crate::error::Result;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Gaussian init scaled by fan-in.
pub fn init_weight(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> DiffArray {
    init_weight_gain(rng, rows, cols, 1.0)
}

/// Fan-in Gaussian init with an extra gain factor. A small gain on a
/// coordinate-regression head keeps initial outputs near the bias.
pub fn init_weight_gain(rng: &mut ChaCha12Rng, rows: usize, cols: usize, gain: f64) -> DiffArray {
    let std = gain * (2.0 / rows as f64).sqrt();
    let data: Vec<f32> = (0..rows * cols)
        .map(|_| {
            // Box-Muller keeps the value stream independent of rand_distr internals.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            (z * std) as f32
        })
        .collect();
    DiffArray::leaf(data, &[rows, cols]).expect("init shape")
}

/// Affine map `x·W + b` with `W: [in×out]`, `b: [out]`.
pub struct Linear {
    pub w: DiffArray,
    pub b: DiffArray,
}

impl Linear {
    pub fn new(rng: &mut ChaCha12Rng, in_dim: usize, out_dim: usize) -> Self {
        Self::new_with_gain(rng, in_dim, out_dim, 1.0)
    }

    pub fn new_with_gain(rng: &mut ChaCha12Rng, in_dim: usize, out_dim: usize, gain: f64) -> Self {
        Linear {
            w: init_weight_gain(rng, in_dim, out_dim, gain),
            b: DiffArray::leaf(vec![0.0; out_dim], &[out_dim]).expect("bias shape"),
        }
    }

    pub fn forward(&self, x: &DiffArray) -> Result<DiffArray> {
        x.matmul(&self.w)?.add_row_bias(&self.b)
    }

    pub fn register(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        store.register(format!("{prefix}.w"), self.w.clone())?;
        store.register(format!("{prefix}.b"), self.b.clone())
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }
}

/// Two affine maps with a LeakyReLU between them.
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
    pub slope: f32,
}

impl Mlp2 {
    pub fn new(rng: &mut ChaCha12Rng, in_dim: usize, hidden: usize, out_dim: usize, slope: f32) -> Self {
        Mlp2 {
            l1: Linear::new(rng, in_dim, hidden),
            l2: Linear::new(rng, hidden, out_dim),
            slope,
        }
    }

    pub fn forward(&self, x: &DiffArray) -> Result<DiffArray> {
        self.l2.forward(&self.l1.forward(x)?.leaky_relu(self.slope))
    }

    pub fn register(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        self.l1.register(store, &format!("{prefix}.l1"))?;
        self.l2.register(store, &format!("{prefix}.l2"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_applies_bias() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let lin = Linear::new(&mut rng, 2, 3);
        lin.b.set_data(&[1.0, 2.0, 3.0]);
        lin.w.set_data(&[0.0; 6]);
        let x = DiffArray::from_vec(vec![5.0, -5.0], &[1, 2]).unwrap();
        assert_eq!(lin.forward(&x).unwrap().to_vec(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let mut a = ChaCha12Rng::seed_from_u64(7);
        let mut b = ChaCha12Rng::seed_from_u64(7);
        assert_eq!(
            init_weight(&mut a, 4, 5).to_vec(),
            init_weight(&mut b, 4, 5).to_vec()
        );
    }
}
