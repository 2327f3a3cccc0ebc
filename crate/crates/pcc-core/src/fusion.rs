//! Multi-scale cross-modal fusion: project global, local and image tokens
//! to a unified width, run five attention interactions, and concatenate
//! the outputs in a fixed order.

use crate::autodiff::{DiffArray, ParamStore};
use crate::error::{Error, Result};
use crate::layers::Linear;
use rand_chacha::ChaCha12Rng;

/// Scaled dot-product attention with learned Q/K/V/output maps and a
/// configurable head count. Self-attention is the special case where the
/// query set and key/value set coincide.
pub struct AttentionLayer {
    pub dim: usize,
    pub heads: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl AttentionLayer {
    pub fn new(rng: &mut ChaCha12Rng, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {dim} not divisible by {heads} heads"
            )));
        }
        // Damped query/key maps start the attention near-uniform and the
        // damped mix keeps fresh fused tokens small; both steady the first
        // optimization steps.
        Ok(AttentionLayer {
            dim,
            heads,
            wq: Linear::new_with_gain(rng, dim, dim, 0.5),
            wk: Linear::new_with_gain(rng, dim, dim, 0.5),
            wv: Linear::new(rng, dim, dim),
            wo: Linear::new_with_gain(rng, dim, dim, 0.25),
        })
    }

    pub fn register(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        self.wq.register(store, &format!("{prefix}.wq"))?;
        self.wk.register(store, &format!("{prefix}.wk"))?;
        self.wv.register(store, &format!("{prefix}.wv"))?;
        self.wo.register(store, &format!("{prefix}.wo"))
    }

    /// Returns the attended output `[M×D]` and the head-averaged attention
    /// map `[M×N]` (row-stochastic).
    pub fn forward(
        &self,
        query_set: &DiffArray,
        key_value_set: &DiffArray,
    ) -> Result<(DiffArray, DiffArray)> {
        let m = query_set.shape()[0];
        let n = key_value_set.shape()[0];
        if query_set.shape()[1] != self.dim || key_value_set.shape()[1] != self.dim {
            return Err(Error::dimension(
                "attention input width",
                &[self.dim],
                query_set.shape(),
            ));
        }
        let q = self.wq.forward(query_set)?;
        let k = self.wk.forward(key_value_set)?;
        let v = self.wv.forward(key_value_set)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut head_outputs = Vec::with_capacity(self.heads);
        let mut map_sum: Option<DiffArray> = None;
        for h in 0..self.heads {
            let qh = q.slice_cols(h * dh, dh)?;
            let kh = k.slice_cols(h * dh, dh)?;
            let vh = v.slice_cols(h * dh, dh)?;
            let logits = qh.matmul(&kh.transpose2()?)?.scale(scale);
            let attn = logits.softmax_rows()?;
            head_outputs.push(attn.matmul(&vh)?);
            map_sum = Some(match map_sum {
                Some(acc) => acc.add(&attn)?,
                None => attn,
            });
        }
        let mixed = self.wo.forward(&DiffArray::concat(&head_outputs, 1)?)?;
        let map = map_sum.unwrap().scale(1.0 / self.heads as f32);
        debug_assert_eq!(map.shape(), &[m, n]);
        Ok((mixed, map))
    }
}

/// Which attention interactions run and in what concatenation order.
/// The full set is `[gg, gl, ll, Ig, Il]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionVariant {
    /// All five interactions.
    Full,
    /// Local branch removed: `[gg, Ig]`.
    NoLocal,
    /// Attention replaced by projection + concatenation.
    NoAttention,
    /// Image branch removed: `[gg, gl, ll]`.
    NoImage,
}

/// The five attended blocks plus the flat token sequence the decoder eats.
pub struct FusedFeatures {
    pub gg: Option<DiffArray>,
    pub gl: Option<DiffArray>,
    pub ll: Option<DiffArray>,
    pub ig: Option<DiffArray>,
    pub il: Option<DiffArray>,
    /// Blocks concatenated in the fixed order `[gg, gl, ll, Ig, Il]`
    /// (present blocks only).
    pub concatenated: DiffArray,
}

/// Head-averaged row-stochastic attention maps, one per interaction.
pub struct AttentionMaps {
    pub gg: DiffArray,
    pub gl: DiffArray,
    pub ll: DiffArray,
    pub ig: DiffArray,
    pub il: DiffArray,
}

impl AttentionMaps {
    /// Export names paired with maps, in the fixed interaction order.
    pub fn named(&self) -> [(&'static str, &DiffArray); 5] {
        [
            ("att_gg", &self.gg),
            ("att_ll", &self.ll),
            ("att_gl", &self.gl),
            ("att_Ig", &self.ig),
            ("att_Il", &self.il),
        ]
    }
}

pub struct FusionModule {
    pub dim: usize,
    pub variant: FusionVariant,
    /// Residual connection around each attention output (off by default).
    pub residual: bool,
    pub proj_global: Linear,
    pub proj_local: Option<Linear>,
    pub proj_image: Option<Linear>,
    pub att_gg: Option<AttentionLayer>,
    pub att_ll: Option<AttentionLayer>,
    pub att_gl: Option<AttentionLayer>,
    pub att_ig: Option<AttentionLayer>,
    pub att_il: Option<AttentionLayer>,
}

/// Unified-width projections of the three token sets.
pub struct ProjectedSets {
    pub global: DiffArray,
    pub local: Option<DiffArray>,
    pub image: Option<DiffArray>,
}

impl FusionModule {
    pub fn new(
        rng: &mut ChaCha12Rng,
        dim: usize,
        global_in: usize,
        local_in: usize,
        image_in: usize,
        heads: usize,
        variant: FusionVariant,
        residual: bool,
    ) -> Result<Self> {
        let with_local = !matches!(variant, FusionVariant::NoLocal);
        let with_image = !matches!(variant, FusionVariant::NoImage);
        let with_attention = !matches!(variant, FusionVariant::NoAttention);
        let proj_global = Linear::new(rng, global_in, dim);
        let proj_local = with_local.then(|| Linear::new(rng, local_in, dim));
        let proj_image = with_image.then(|| Linear::new(rng, image_in, dim));
        let mut layer = || AttentionLayer::new(rng, dim, heads);
        Ok(FusionModule {
            dim,
            variant,
            residual,
            proj_global,
            proj_local,
            proj_image,
            att_gg: with_attention.then(&mut layer).transpose()?,
            att_ll: (with_attention && with_local).then(&mut layer).transpose()?,
            att_gl: (with_attention && with_local).then(&mut layer).transpose()?,
            att_ig: (with_attention && with_image).then(&mut layer).transpose()?,
            att_il: (with_attention && with_local && with_image)
                .then(&mut layer)
                .transpose()?,
        })
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        self.proj_global.register(store, "fusion.proj_g")?;
        if let Some(p) = &self.proj_local {
            p.register(store, "fusion.proj_l")?;
        }
        if let Some(p) = &self.proj_image {
            p.register(store, "fusion.proj_i")?;
        }
        for (name, layer) in [
            ("fusion.att_gg", &self.att_gg),
            ("fusion.att_ll", &self.att_ll),
            ("fusion.att_gl", &self.att_gl),
            ("fusion.att_ig", &self.att_ig),
            ("fusion.att_il", &self.att_il),
        ] {
            if let Some(l) = layer {
                l.register(store, name)?;
            }
        }
        Ok(())
    }

    /// Independent linear maps into the unified latent space.
    pub fn project(
        &self,
        global: &DiffArray,
        local: Option<&DiffArray>,
        image: Option<&DiffArray>,
    ) -> Result<ProjectedSets> {
        let g = self.proj_global.forward(global)?;
        let l = match (&self.proj_local, local) {
            (Some(p), Some(x)) => Some(p.forward(x)?),
            (None, _) => None,
            (Some(_), None) => {
                return Err(Error::Contract("fusion expects local features".into()))
            }
        };
        let i = match (&self.proj_image, image) {
            (Some(p), Some(x)) => Some(p.forward(x)?),
            (None, _) => None,
            (Some(_), None) => {
                return Err(Error::Contract("fusion expects image features".into()))
            }
        };
        Ok(ProjectedSets { global: g, local: l, image: i })
    }

    fn attend(
        &self,
        layer: &AttentionLayer,
        query: &DiffArray,
        kv: &DiffArray,
    ) -> Result<(DiffArray, DiffArray)> {
        let (out, map) = layer.forward(query, kv)?;
        let out = if self.residual { out.add(query)? } else { out };
        Ok((out, map))
    }

    /// Run the configured interactions over already-projected sets.
    pub fn fuse_projected(
        &self,
        sets: &ProjectedSets,
    ) -> Result<(FusedFeatures, Option<AttentionMaps>)> {
        if matches!(self.variant, FusionVariant::NoAttention) {
            let mut parts = vec![sets.global.clone()];
            if let Some(l) = &sets.local {
                parts.push(l.clone());
            }
            if let Some(i) = &sets.image {
                parts.push(i.clone());
            }
            let concatenated = DiffArray::concat(&parts, 0)?;
            return Ok((
                FusedFeatures {
                    gg: None,
                    gl: None,
                    ll: None,
                    ig: None,
                    il: None,
                    concatenated,
                },
                None,
            ));
        }
        let g = &sets.global;
        let mut maps = Vec::with_capacity(5);
        let (gg, m_gg) = self.attend(self.att_gg.as_ref().unwrap(), g, g)?;
        maps.push(m_gg);
        let mut blocks = vec![gg.clone()];
        let mut gl = None;
        let mut ll = None;
        let mut ig = None;
        let mut il = None;
        if let Some(l) = &sets.local {
            let (v, m) = self.attend(self.att_gl.as_ref().unwrap(), g, l)?;
            blocks.push(v.clone());
            gl = Some(v);
            maps.push(m);
            let (v, m) = self.attend(self.att_ll.as_ref().unwrap(), l, l)?;
            blocks.push(v.clone());
            ll = Some(v);
            maps.push(m);
        }
        if let Some(i) = &sets.image {
            let (v, m) = self.attend(self.att_ig.as_ref().unwrap(), g, i)?;
            blocks.push(v.clone());
            ig = Some(v);
            maps.push(m);
            if let Some(l) = &sets.local {
                let (v, m) = self.attend(self.att_il.as_ref().unwrap(), l, i)?;
                blocks.push(v.clone());
                il = Some(v);
                maps.push(m);
            }
        }
        let concatenated = DiffArray::concat(&blocks, 0)?;
        let maps = if maps.len() == 5 {
            let mut it = maps.into_iter();
            Some(AttentionMaps {
                gg: it.next().unwrap(),
                gl: it.next().unwrap(),
                ll: it.next().unwrap(),
                ig: it.next().unwrap(),
                il: it.next().unwrap(),
            })
        } else {
            None
        };
        Ok((
            FusedFeatures { gg: Some(gg), gl, ll, ig, il, concatenated },
            maps,
        ))
    }

    /// Project and fuse in one step.
    pub fn fuse(
        &self,
        global: &DiffArray,
        local: Option<&DiffArray>,
        image: Option<&DiffArray>,
    ) -> Result<(FusedFeatures, Option<AttentionMaps>)> {
        let sets = self.project(global, local, image)?;
        self.fuse_projected(&sets)
    }

    /// Number of fused tokens for given input counts, per variant.
    pub fn token_count(&self, n_g: usize, n_l: usize, n_i: usize) -> usize {
        match self.variant {
            FusionVariant::Full => 3 * n_g + 2 * n_l,
            FusionVariant::NoLocal => 2 * n_g,
            FusionVariant::NoAttention => n_g + n_l + n_i,
            FusionVariant::NoImage => 2 * n_g + n_l,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng() -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(31)
    }

    fn random_array(r: &mut ChaCha12Rng, rows: usize, cols: usize) -> DiffArray {
        DiffArray::from_vec(
            (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect(),
            &[rows, cols],
        )
        .unwrap()
    }

    #[test]
    fn attention_rejects_bad_head_count() {
        assert!(AttentionLayer::new(&mut rng(), 10, 3).is_err());
        assert!(AttentionLayer::new(&mut rng(), 12, 3).is_ok());
    }

    #[test]
    fn attention_single_key_copies_value_row() {
        let mut r = rng();
        let layer = AttentionLayer::new(&mut r, 8, 2).unwrap();
        let q = random_array(&mut r, 5, 8);
        let kv = random_array(&mut r, 1, 8);
        let (out, map) = layer.forward(&q, &kv).unwrap();
        // Softmax over one key is 1, so every query receives V(post-mix).
        let v = layer.wv.forward(&kv).unwrap();
        let expect = layer.wo.forward(&v).unwrap().to_vec();
        let got = out.to_vec();
        for row in 0..5 {
            for j in 0..8 {
                assert!((got[row * 8 + j] - expect[j]).abs() < 1e-5);
            }
        }
        assert!(map.to_vec().iter().all(|&w| (w - 1.0).abs() < 1e-6));
    }

    #[test]
    fn attention_identical_keys_identical_queries_give_identical_rows() {
        let mut r = rng();
        let layer = AttentionLayer::new(&mut r, 8, 2).unwrap();
        let q_row: Vec<f32> = (0..8).map(|i| i as f32 * 0.1).collect();
        let mut qdata = q_row.clone();
        qdata.extend_from_slice(&q_row);
        let q = DiffArray::from_vec(qdata, &[2, 8]).unwrap();
        let kv_row: Vec<f32> = (0..8).map(|i| (i as f32 * 0.3).sin()).collect();
        let mut kvdata = Vec::new();
        for _ in 0..4 {
            kvdata.extend_from_slice(&kv_row);
        }
        let kv = DiffArray::from_vec(kvdata, &[4, 8]).unwrap();
        let (out, map) = layer.forward(&q, &kv).unwrap();
        let d = out.to_vec();
        assert_eq!(&d[0..8], &d[8..16]);
        // All keys identical: uniform weights.
        assert!(map.to_vec().iter().all(|&w| (w - 0.25).abs() < 1e-6));
    }

    #[test]
    fn attention_weights_match_directly_recomputed_softmax() {
        let mut r = rng();
        let layer = AttentionLayer::new(&mut r, 6, 1).unwrap();
        let q = random_array(&mut r, 4, 6);
        let kv = random_array(&mut r, 3, 6);
        let (_, map) = layer.forward(&q, &kv).unwrap();
        // Recompute in f64 from the layer's own projections.
        let qp = layer.wq.forward(&q).unwrap().to_vec();
        let kp = layer.wk.forward(&kv).unwrap().to_vec();
        let scale = 1.0 / 6.0f64.sqrt();
        let mut expect = vec![0.0f64; 4 * 3];
        for i in 0..4 {
            let mut row = [0.0f64; 3];
            for j in 0..3 {
                let mut dot = 0.0f64;
                for d in 0..6 {
                    dot += qp[i * 6 + d] as f64 * kp[j * 6 + d] as f64;
                }
                row[j] = dot * scale;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            for j in 0..3 {
                expect[i * 3 + j] = (row[j] - max).exp() / denom;
            }
        }
        for (got, want) in map.to_vec().iter().zip(&expect) {
            assert!((*got as f64 - want).abs() < 1e-6);
        }
    }

    fn full_module(r: &mut ChaCha12Rng) -> FusionModule {
        FusionModule::new(r, 8, 8, 8, 8, 2, FusionVariant::Full, false).unwrap()
    }

    #[test]
    fn fused_token_count_and_order() {
        let mut r = rng();
        let module = full_module(&mut r);
        let g = random_array(&mut r, 4, 8);
        let l = random_array(&mut r, 6, 8);
        let i = random_array(&mut r, 3, 8);
        let (fused, maps) = module.fuse(&g, Some(&l), Some(&i)).unwrap();
        // 3·N_g + 2·N_l
        assert_eq!(fused.concatenated.shape(), &[3 * 4 + 2 * 6, 8]);
        // Fixed order [gg, gl, ll, Ig, Il]: block boundaries match the parts.
        let cat = fused.concatenated.to_vec();
        let blocks = [
            fused.gg.as_ref().unwrap(),
            fused.gl.as_ref().unwrap(),
            fused.ll.as_ref().unwrap(),
            fused.ig.as_ref().unwrap(),
            fused.il.as_ref().unwrap(),
        ];
        let mut offset = 0;
        for b in blocks {
            let d = b.to_vec();
            assert_eq!(&cat[offset..offset + d.len()], d.as_slice());
            offset += d.len();
        }
        let maps = maps.unwrap();
        assert_eq!(maps.ig.shape(), &[4, 3]);
        assert_eq!(maps.il.shape(), &[6, 3]);
        assert_eq!(maps.gl.shape(), &[4, 6]);
    }

    #[test]
    fn default_counts_give_1408_tokens() {
        let mut r = rng();
        let module = full_module(&mut r);
        assert_eq!(module.token_count(128, 512, 49), 1408);
    }

    #[test]
    fn attention_maps_are_row_stochastic() {
        let mut r = rng();
        let module = full_module(&mut r);
        let g = random_array(&mut r, 5, 8);
        let l = random_array(&mut r, 7, 8);
        let i = random_array(&mut r, 4, 8);
        let (_, maps) = module.fuse(&g, Some(&l), Some(&i)).unwrap();
        for (_, map) in maps.unwrap().named() {
            let d = map.to_vec();
            let cols = map.shape()[1];
            for row in d.chunks(cols) {
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&w| w >= 0.0));
            }
        }
    }

    #[test]
    fn zero_image_with_zero_value_bias_zeroes_image_blocks_only() {
        let mut r = rng();
        let module = full_module(&mut r);
        let g = random_array(&mut r, 4, 8);
        let l = random_array(&mut r, 5, 8);
        let zero_i = DiffArray::from_vec(vec![0.0; 3 * 8], &[3, 8]).unwrap();
        // Zero the image projection bias and the V/O biases of the
        // image-facing layers so a zero image yields exactly zero blocks.
        module.proj_image.as_ref().unwrap().b.set_data(&[0.0; 8]);
        for layer in [module.att_ig.as_ref().unwrap(), module.att_il.as_ref().unwrap()] {
            layer.wv.b.set_data(&[0.0; 8]);
            layer.wo.b.set_data(&[0.0; 8]);
        }
        let (with_zero, _) = module.fuse(&g, Some(&l), Some(&zero_i)).unwrap();
        assert!(with_zero.ig.unwrap().to_vec().iter().all(|&v| v.abs() < 1e-6));
        assert!(with_zero.il.unwrap().to_vec().iter().all(|&v| v.abs() < 1e-6));
        // Geometry blocks are independent of the image input.
        let other_i = random_array(&mut r, 3, 8);
        let (with_other, _) = module.fuse(&g, Some(&l), Some(&other_i)).unwrap();
        assert_eq!(with_zero.gg.unwrap().to_vec(), with_other.gg.unwrap().to_vec());
        assert_eq!(with_zero.gl.unwrap().to_vec(), with_other.gl.unwrap().to_vec());
        assert_eq!(with_zero.ll.unwrap().to_vec(), with_other.ll.unwrap().to_vec());
    }

    #[test]
    fn identity_projection_passes_input_through() {
        let mut r = rng();
        let module = full_module(&mut r);
        let mut identity = vec![0.0f32; 64];
        for i in 0..8 {
            identity[i * 8 + i] = 1.0;
        }
        module.proj_global.w.set_data(&identity);
        module.proj_global.b.set_data(&[0.0; 8]);
        let g = random_array(&mut r, 4, 8);
        let sets = module.project(&g, None, None);
        // Full variant expects local+image, so project via a narrower module.
        assert!(sets.is_err());
        let narrow = FusionModule::new(&mut r, 8, 8, 8, 8, 2, FusionVariant::NoLocal, false).unwrap();
        narrow.proj_global.w.set_data(&identity);
        narrow.proj_global.b.set_data(&[0.0; 8]);
        let sets = narrow.project(&g, None, Some(&random_array(&mut r, 2, 8))).unwrap();
        assert_eq!(sets.global.to_vec(), g.to_vec());
    }

    #[test]
    fn permuting_local_rows_permutes_ll_and_gl_map_columns() {
        let mut r = rng();
        let module = full_module(&mut r);
        let g = random_array(&mut r, 3, 8);
        let l = random_array(&mut r, 5, 8);
        let i = random_array(&mut r, 2, 8);
        let perm = [4usize, 0, 3, 1, 2];
        let ld = l.to_vec();
        let mut permuted = Vec::new();
        for &p in &perm {
            permuted.extend_from_slice(&ld[p * 8..(p + 1) * 8]);
        }
        let lp = DiffArray::from_vec(permuted, &[5, 8]).unwrap();
        let (fa, ma) = module.fuse(&g, Some(&l), Some(&i)).unwrap();
        let (fb, mb) = module.fuse(&g, Some(&lp), Some(&i)).unwrap();
        let (ma, mb) = (ma.unwrap(), mb.unwrap());
        // F_ll rows permute identically.
        let (a, b) = (fa.ll.unwrap().to_vec(), fb.ll.unwrap().to_vec());
        for (row, &p) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!((b[row * 8 + j] - a[p * 8 + j]).abs() < 1e-5);
            }
        }
        // Columns of the gl attention map permute identically.
        let (mga, mgb) = (ma.gl.to_vec(), mb.gl.to_vec());
        for q in 0..3 {
            for (col, &p) in perm.iter().enumerate() {
                assert!((mgb[q * 5 + col] - mga[q * 5 + p]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn gradients_from_gg_only_loss_skip_image_branch() {
        let mut r = rng();
        let module = full_module(&mut r);
        let mut store = ParamStore::new();
        module.register(&mut store).unwrap();
        let g = random_array(&mut r, 4, 8);
        let l = random_array(&mut r, 5, 8);
        let i = random_array(&mut r, 3, 8);
        let (fused, _) = module.fuse(&g, Some(&l), Some(&i)).unwrap();
        let loss = fused.gg.unwrap().sum();
        loss.backward().unwrap();
        for p in store.iter() {
            let grad = p.array.grad();
            let touched = grad.map(|g| g.iter().any(|&v| v != 0.0)).unwrap_or(false);
            if p.name.starts_with("fusion.proj_i") || p.name.starts_with("fusion.att_i") {
                assert!(!touched, "image-branch parameter {} received gradient", p.name);
            }
            if p.name.starts_with("fusion.att_gg") || p.name == "fusion.proj_g.w" {
                assert!(touched, "parameter {} expected gradient", p.name);
            }
        }
    }

    #[test]
    fn variant_token_counts_match_structure() {
        let mut r = rng();
        let cases = [
            (FusionVariant::Full, 3 * 4 + 2 * 6),
            (FusionVariant::NoLocal, 2 * 4),
            (FusionVariant::NoAttention, 4 + 6 + 3),
            (FusionVariant::NoImage, 2 * 4 + 6),
        ];
        for (variant, expect) in cases {
            let module = FusionModule::new(&mut r, 8, 8, 8, 8, 2, variant, false).unwrap();
            let g = random_array(&mut r, 4, 8);
            let l = random_array(&mut r, 6, 8);
            let i = random_array(&mut r, 3, 8);
            let local = (!matches!(variant, FusionVariant::NoLocal)).then_some(&l);
            let image = (!matches!(variant, FusionVariant::NoImage)).then_some(&i);
            let (fused, _) = module.fuse(&g, local, image).unwrap();
            assert_eq!(fused.concatenated.shape()[0], expect, "variant {variant:?}");
            assert_eq!(module.token_count(4, 6, 3), expect);
        }
    }
}
