//! Decoder: pools fused tokens to a shape code, regresses a dense point
//! set from learned query seeds, and merges it with an FPS subsample of
//! the observed partial cloud.

use crate::autodiff::{DiffArray, ParamStore};
use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, PointCloud};
use crate::layers::{init_weight, Linear};
use crate::losses::{pool_global, Pooling};
use rand_chacha::ChaCha12Rng;

#[derive(Clone, Copy, Debug)]
pub struct DecoderConfig {
    /// Points regressed by the network.
    pub m_gen: usize,
    /// Total output size; the remainder comes from the partial cloud.
    pub n_c: usize,
    /// Width of each learned query seed.
    pub seed_dim: usize,
    /// Hidden width of the coordinate regressor.
    pub hidden: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { m_gen: 1024, n_c: 2048, seed_dim: 32, hidden: 256 }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_gen == 0 || self.m_gen > self.n_c {
            return Err(Error::Config(format!(
                "decoder needs 1 <= m_gen <= n_c, got m_gen={} n_c={}",
                self.m_gen, self.n_c
            )));
        }
        Ok(())
    }
}

pub struct Decoder {
    pub cfg: DecoderConfig,
    /// `[m_gen × seed_dim]` learned query seeds.
    pub seeds: DiffArray,
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
    pub slope: f32,
}

impl Decoder {
    pub fn new(rng: &mut ChaCha12Rng, latent_dim: usize, cfg: DecoderConfig, slope: f32) -> Result<Self> {
        cfg.validate()?;
        // The layer feeding the coordinate head is kept narrow: each output
        // coordinate moves with the L1 norm of its input activations under
        // sign-like optimizer steps, so a wide head makes points jitter by
        // more than the point spacing. The head itself is damped so fresh
        // models emit points near the origin.
        let bottleneck = (cfg.hidden / 8).max(8);
        Ok(Decoder {
            cfg,
            seeds: init_weight(rng, cfg.m_gen, cfg.seed_dim),
            l1: Linear::new(rng, latent_dim + cfg.seed_dim, cfg.hidden),
            l2: Linear::new(rng, cfg.hidden, bottleneck),
            l3: Linear::new_with_gain(rng, bottleneck, 3, 0.1),
            slope,
        })
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        store.register("decoder.seeds", self.seeds.clone())?;
        self.l1.register(store, "decoder.l1")?;
        self.l2.register(store, "decoder.l2")?;
        self.l3.register(store, "decoder.l3")
    }

    /// Fused tokens `[T×D] -> [m_gen×3]` coordinates.
    pub fn decode(&self, fused_tokens: &DiffArray) -> Result<DiffArray> {
        let code = pool_global(fused_tokens, Pooling::Max)?; // [1×D]
        let tiled = code.tile_rows(self.cfg.m_gen)?;
        let x = DiffArray::concat(&[tiled, self.seeds.clone()], 1)?;
        let h = self.l1.forward(&x)?.leaky_relu(self.slope);
        let h = self.l2.forward(&h)?.leaky_relu(self.slope);
        self.l3.forward(&h)
    }
}

/// Merge generated coordinates with an FPS subsample of the partial
/// cloud. The observed subset is copied bit-exactly and carries no
/// gradient; the result always has `n_c` points, generated rows first.
pub fn merge(generated: &DiffArray, partial: &PointCloud, n_c: usize) -> Result<DiffArray> {
    let m_gen = match generated.shape() {
        [m, 3] => *m,
        other => {
            return Err(Error::Contract(format!(
                "generated set must be [M×3], got {other:?}"
            )))
        }
    };
    if m_gen > n_c {
        return Err(Error::Config(format!(
            "generated count {m_gen} exceeds output size {n_c}"
        )));
    }
    let observed = n_c - m_gen;
    if observed == 0 {
        return generated.reshape(&[m_gen, 3]);
    }
    if observed > partial.len() {
        return Err(Error::Config(format!(
            "need {observed} observed points but the partial cloud has {}",
            partial.len()
        )));
    }
    let keep = farthest_point_sample(partial, observed, 0)?;
    let mut obs_data = Vec::with_capacity(observed * 3);
    for &i in &keep {
        obs_data.extend_from_slice(&partial.points[i]);
    }
    let observed_arr = DiffArray::from_vec(obs_data, &[observed, 3])?;
    DiffArray::concat(&[generated.clone(), observed_arr], 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng() -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(41)
    }

    fn tiny_decoder(r: &mut ChaCha12Rng) -> Decoder {
        Decoder::new(r, 8, DecoderConfig { m_gen: 8, n_c: 16, seed_dim: 4, hidden: 8 }, 0.2)
            .unwrap()
    }

    fn random_tokens(r: &mut ChaCha12Rng, t: usize, d: usize) -> DiffArray {
        DiffArray::from_vec((0..t * d).map(|_| r.gen_range(-1.0..1.0)).collect(), &[t, d]).unwrap()
    }

    #[test]
    fn decode_output_shape() {
        let mut r = rng();
        let dec = tiny_decoder(&mut r);
        let out = dec.decode(&random_tokens(&mut r, 12, 8)).unwrap();
        assert_eq!(out.shape(), &[8, 3]);
    }

    #[test]
    fn decode_zero_final_layer_puts_points_at_bias() {
        let mut r = rng();
        let dec = tiny_decoder(&mut r);
        dec.l3.w.set_data(&vec![0.0; dec.l3.w.numel()]);
        dec.l3.b.set_data(&[0.25, -0.5, 1.0]);
        let out = dec.decode(&random_tokens(&mut r, 12, 8)).unwrap();
        for row in out.to_vec().chunks(3) {
            assert_eq!(row, &[0.25, -0.5, 1.0]);
        }
    }

    #[test]
    fn decode_invariant_to_token_permutation_under_max_pool() {
        let mut r = rng();
        let dec = tiny_decoder(&mut r);
        let tokens = random_tokens(&mut r, 10, 8);
        let data = tokens.to_vec();
        let mut perm: Vec<usize> = (0..10).collect();
        perm.rotate_left(3);
        let mut permuted = Vec::new();
        for &p in &perm {
            permuted.extend_from_slice(&data[p * 8..(p + 1) * 8]);
        }
        let shuffled = DiffArray::from_vec(permuted, &[10, 8]).unwrap();
        assert_eq!(dec.decode(&tokens).unwrap().to_vec(), dec.decode(&shuffled).unwrap().to_vec());
    }

    #[test]
    fn merge_all_generated_when_m_equals_n() {
        let gen = DiffArray::from_vec((0..24).map(|i| i as f32).collect(), &[8, 3]).unwrap();
        let partial = PointCloud::new(vec![[9.0; 3]]).unwrap();
        let out = merge(&gen, &partial, 8).unwrap();
        assert_eq!(out.to_vec(), gen.to_vec());
    }

    #[test]
    fn merge_observed_points_are_bit_exact() {
        use crate::geometry::farthest_point_sample;
        let mut r = rng();
        let gen = random_tokens(&mut r, 4, 3);
        let pts: Vec<[f32; 3]> = (0..10)
            .map(|_| [r.gen::<f32>() * 0.7, r.gen::<f32>(), r.gen::<f32>() * 1.3])
            .collect();
        let partial = PointCloud::new(pts.clone()).unwrap();
        let out = merge(&gen, &partial, 10).unwrap();
        assert_eq!(out.shape(), &[10, 3]);
        let keep = farthest_point_sample(&partial, 6, 0).unwrap();
        let d = out.to_vec();
        for (row, &i) in keep.iter().enumerate() {
            for axis in 0..3 {
                assert_eq!(d[(4 + row) * 3 + axis].to_bits(), pts[i][axis].to_bits());
            }
        }
    }

    #[test]
    fn merge_default_split_takes_1024_observed() {
        let mut r = rng();
        let gen = random_tokens(&mut r, 1024, 3);
        let pts: Vec<[f32; 3]> = (0..2048)
            .map(|_| [r.gen::<f32>(), r.gen::<f32>(), r.gen::<f32>()])
            .collect();
        let partial = PointCloud::new(pts).unwrap();
        let out = merge(&gen, &partial, 2048).unwrap();
        assert_eq!(out.shape(), &[2048, 3]);
    }

    #[test]
    fn merge_rejects_short_partial() {
        let gen = DiffArray::from_vec(vec![0.0; 6], &[2, 3]).unwrap();
        let partial = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(merge(&gen, &partial, 8), Err(Error::Config(_))));
    }

    #[test]
    fn merge_passes_gradient_to_generated_only() {
        let gen = DiffArray::leaf(vec![0.5; 6], &[2, 3]).unwrap();
        let partial = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let out = merge(&gen, &partial, 4).unwrap();
        out.sum().backward().unwrap();
        assert_eq!(gen.grad().unwrap(), vec![1.0; 6]);
    }
}
