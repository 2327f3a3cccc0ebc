//! Adam optimizer, the stepped learning-rate schedule, and global-norm
//! gradient clipping.

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam. Moment buffers are keyed by parameter position in
/// the store, so the store layout must stay fixed across steps.
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update from the gradients currently stored on the
    /// parameters. Parameters without a gradient are left unchanged.
    pub fn step(&mut self, params: &ParamStore, lr: f32) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.array.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer state tracks {} parameters, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as f32;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for (i, p) in params.iter().enumerate() {
            let Some(grad) = p.array.grad() else { continue };
            let mut data = p.array.to_vec();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * g;
                v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
            p.array.set_data(&data);
        }
        Ok(())
    }
}

/// Stepped decay: `lr0 · factor^(number of drop epochs <= epoch)`.
pub fn lr_schedule(epoch: usize, lr0: f32, drop_epochs: &[usize], factor: f32) -> f32 {
    let drops = drop_epochs.iter().filter(|&&d| d <= epoch).count();
    lr0 * factor.powi(drops as i32)
}

/// Scale all gradients down when their global L2 norm exceeds `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(params: &ParamStore, max_norm: f32) -> f32 {
    let mut total = 0.0f64;
    for p in params.iter() {
        if let Some(g) = p.array.grad() {
            for v in g {
                total += (v as f64) * (v as f64);
            }
        }
    }
    let norm = total.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for p in params.iter() {
            if let Some(g) = p.array.grad() {
                let scaled: Vec<f32> = g.iter().map(|&v| v * scale).collect();
                p.array.zero_grad();
                p.array.accum_grad(&scaled);
            }
        }
    }
    norm
}
