//! End-to-end completion model: encoder, image branch, fusion, decoder,
//! and the parameter registry that backs checkpoints.

use crate::autodiff::{load_checkpoint, load_into, save_checkpoint, DiffArray, ParamStore};
use crate::decoder::{merge, Decoder, DecoderConfig};
use crate::encoder::{EncoderConfig, HierarchicalEncoder};
use crate::error::{Error, Result};
use crate::fusion::{AttentionMaps, FusionModule, FusionVariant};
use crate::geometry::PointCloud;
use crate::image::{ImageFeatures, ImageInput, PatchEncoder};
use crate::losses::{pool_global, Pooling};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::path::Path;

/// Structural ablations mirroring the four deletion studies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Ablation {
    #[default]
    None,
    /// Local feature branch removed; fusion sees only the global set.
    NoLocal,
    /// Attention replaced by projection + concatenation.
    NoFusionAttention,
    /// Contrastive term dropped from the objective.
    NoContrastive,
    /// Image branch removed entirely.
    NoImage,
}

impl Ablation {
    pub fn parse(name: &str) -> Result<Ablation> {
        match name {
            "none" => Ok(Ablation::None),
            "no_local" => Ok(Ablation::NoLocal),
            "no_mscf" => Ok(Ablation::NoFusionAttention),
            "no_closs" => Ok(Ablation::NoContrastive),
            "no_image" => Ok(Ablation::NoImage),
            other => Err(Error::Config(format!(
                "unknown ablation {other:?} (expected none|no_local|no_mscf|no_closs|no_image)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoLocal => "no_local",
            Ablation::NoFusionAttention => "no_mscf",
            Ablation::NoContrastive => "no_closs",
            Ablation::NoImage => "no_image",
        }
    }

    fn fusion_variant(&self) -> FusionVariant {
        match self {
            Ablation::NoLocal => FusionVariant::NoLocal,
            Ablation::NoFusionAttention => FusionVariant::NoAttention,
            Ablation::NoImage => FusionVariant::NoImage,
            _ => FusionVariant::Full,
        }
    }

    pub fn uses_image(&self) -> bool {
        !matches!(self, Ablation::NoImage)
    }

    pub fn uses_contrastive(&self) -> bool {
        // The contrastive term needs image features, so it disappears with
        // them as well as when explicitly ablated.
        !matches!(self, Ablation::NoContrastive | Ablation::NoImage)
    }
}

/// Which image backend feeds the fusion stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ImageBackend {
    /// Trainable patch-grid encoder over raw pixels.
    Patch,
    /// Features precomputed elsewhere (PCF files or the data generator).
    #[default]
    Precomputed,
}

impl ImageBackend {
    pub fn parse(name: &str) -> Result<ImageBackend> {
        match name {
            "patch" => Ok(ImageBackend::Patch),
            "precomputed" => Ok(ImageBackend::Precomputed),
            other => Err(Error::Config(format!(
                "unknown image backend {other:?} (expected patch|precomputed)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ImageBackend::Patch => "patch",
            ImageBackend::Precomputed => "precomputed",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub heads: usize,
    pub residual: bool,
    pub image_backend: ImageBackend,
    /// Image feature width entering fusion.
    pub image_dim: usize,
    /// Patch-backend geometry.
    pub image_size: usize,
    pub patch: usize,
    pub image_trainable: bool,
    pub ablation: Ablation,
    pub pooling: Pooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            heads: 4,
            residual: false,
            image_backend: ImageBackend::Precomputed,
            image_dim: 192,
            image_size: 224,
            patch: 32,
            image_trainable: true,
            ablation: Ablation::None,
            pooling: Pooling::Max,
        }
    }
}

impl ModelConfig {
    /// Small widths for synthetic desk-scale runs.
    pub fn desk_scale() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                k1: 16,
                embed_dim: 32,
                level1_width: 64,
                level2_width: 64,
                local_count: 128,
                global_count: 32,
                latent_dim: 64,
                groups: 4,
                slope: 0.2,
                bands: 4,
            },
            decoder: DecoderConfig { m_gen: 256, n_c: 512, seed_dim: 32, hidden: 128 },
            heads: 4,
            residual: false,
            image_backend: ImageBackend::Precomputed,
            image_dim: 64,
            image_size: 32,
            patch: 8,
            image_trainable: true,
            ablation: Ablation::None,
            pooling: Pooling::Max,
        }
    }
}

/// One model input: a partial cloud plus whichever image form the backend
/// expects.
pub struct Sample {
    pub partial: PointCloud,
    pub pixels: Option<ImageInput>,
    pub features: Option<ImageFeatures>,
}

/// Forward products needed by the trainer and the diagnostics exporters.
pub struct ForwardOutput {
    /// `[n_c × 3]` completed cloud (generated rows first).
    pub completed: DiffArray,
    /// Pooled projected global vector, `[1×D]`.
    pub pooled_global: DiffArray,
    /// Pooled projected image vector when the image branch is live.
    pub pooled_image: Option<DiffArray>,
    pub fused_token_count: usize,
    pub attention_maps: Option<AttentionMaps>,
}

pub struct CompletionModel {
    pub cfg: ModelConfig,
    pub encoder: HierarchicalEncoder,
    pub patch_encoder: Option<PatchEncoder>,
    pub fusion: FusionModule,
    pub decoder: Decoder,
    pub params: ParamStore,
}

impl CompletionModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let encoder = HierarchicalEncoder::new(&mut rng, cfg.encoder.clone())?;
        let patch_encoder = if cfg.ablation.uses_image() && cfg.image_backend == ImageBackend::Patch
        {
            let mut enc = PatchEncoder::new(&mut rng, cfg.patch, cfg.image_dim)?;
            enc.trainable = cfg.image_trainable;
            Some(enc)
        } else {
            None
        };
        let d = cfg.encoder.latent_dim;
        let fusion = FusionModule::new(
            &mut rng,
            d,
            d,
            d,
            cfg.image_dim,
            cfg.heads,
            cfg.ablation.fusion_variant(),
            cfg.residual,
        )?;
        let decoder = Decoder::new(&mut rng, d, cfg.decoder, cfg.encoder.slope)?;

        let mut params = ParamStore::new();
        encoder.register(&mut params, !matches!(cfg.ablation, Ablation::NoLocal))?;
        if let Some(pe) = &patch_encoder {
            pe.register(&mut params, "image.patch")?;
        }
        fusion.register(&mut params)?;
        decoder.register(&mut params)?;
        Ok(CompletionModel { cfg, encoder, patch_encoder, fusion, decoder, params })
    }

    /// Resolve the image tokens for a sample according to the backend.
    fn image_tokens(&self, sample: &Sample) -> Result<Option<DiffArray>> {
        if !self.cfg.ablation.uses_image() {
            return Ok(None);
        }
        match self.cfg.image_backend {
            ImageBackend::Patch => {
                let pe = self.patch_encoder.as_ref().expect("patch backend built");
                let img = sample.pixels.as_ref().ok_or_else(|| {
                    Error::Data("sample has no pixels but the model uses the patch backend".into())
                })?;
                Ok(Some(pe.encode(img)?.tokens))
            }
            ImageBackend::Precomputed => {
                let f = sample.features.as_ref().ok_or_else(|| {
                    Error::Data("sample has no precomputed image features".into())
                })?;
                if f.dim() != self.cfg.image_dim {
                    return Err(Error::dimension(
                        "image feature width",
                        &[self.cfg.image_dim],
                        f.tokens.shape(),
                    ));
                }
                Ok(Some(f.tokens.clone()))
            }
        }
    }

    pub fn forward(&self, sample: &Sample) -> Result<ForwardOutput> {
        let hier = self.encoder.encode(&sample.partial)?;
        let image = self.image_tokens(sample)?;
        let local = (!matches!(self.cfg.ablation, Ablation::NoLocal)).then_some(&hier.local);
        let sets = self.fusion.project(&hier.global, local, image.as_ref())?;
        let pooled_global = pool_global(&sets.global, self.cfg.pooling)?;
        let pooled_image = match &sets.image {
            Some(i) => Some(pool_global(i, self.cfg.pooling)?),
            None => None,
        };
        let (fused, attention_maps) = self.fusion.fuse_projected(&sets)?;
        let generated = self.decoder.decode(&fused.concatenated)?;
        let completed = merge(&generated, &sample.partial, self.cfg.decoder.n_c)?;
        Ok(ForwardOutput {
            completed,
            pooled_global,
            pooled_image,
            fused_token_count: fused.concatenated.shape()[0],
            attention_maps,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.params, path)
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        load_into(&self.params, load_checkpoint(path)?)
    }

    /// Snapshot of all parameter values, in registry order.
    pub fn snapshot(&self) -> Vec<Vec<f32>> {
        self.params.iter().map(|p| p.array.to_vec()).collect()
    }

    pub fn restore(&self, snapshot: &[Vec<f32>]) {
        for (p, s) in self.params.iter().zip(snapshot) {
            p.array.set_data(s);
        }
    }

    /// FNV-1a hash over the exact parameter bytes; changes iff any value does.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params.iter() {
            for v in p.array.data().iter() {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x1000_0000_01b3);
                }
            }
        }
        h
    }
}

/// Detect the ablation structure a checkpoint was trained with, from its
/// parameter-name set.
pub fn detect_ablation(names: &[String]) -> Ablation {
    let has = |prefix: &str| names.iter().any(|n| n.starts_with(prefix));
    if !has("fusion.proj_i") {
        return Ablation::NoImage;
    }
    if !has("fusion.proj_l") {
        return Ablation::NoLocal;
    }
    if !has("fusion.att_gg") {
        return Ablation::NoFusionAttention;
    }
    Ablation::None
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                k1: 4,
                embed_dim: 8,
                level1_width: 8,
                level2_width: 8,
                local_count: 16,
                global_count: 4,
                latent_dim: 8,
                groups: 2,
                slope: 0.2,
                bands: 1,
            },
            decoder: DecoderConfig { m_gen: 8, n_c: 16, seed_dim: 4, hidden: 8 },
            heads: 2,
            residual: false,
            image_backend: ImageBackend::Precomputed,
            image_dim: 8,
            image_size: 8,
            patch: 4,
            image_trainable: true,
            ablation: Ablation::None,
            pooling: Pooling::Max,
        }
    }

    fn tiny_sample(seed: u64) -> Sample {
        let mut r = ChaCha12Rng::seed_from_u64(seed);
        let partial = PointCloud::new(
            (0..40)
                .map(|_| {
                    [
                        r.gen::<f32>() * 2.0 - 1.0,
                        r.gen::<f32>() * 2.0 - 1.0,
                        r.gen::<f32>() * 2.0 - 1.0,
                    ]
                })
                .collect(),
        )
        .unwrap();
        let tokens = DiffArray::from_vec(
            (0..6 * 8).map(|_| r.gen_range(-1.0..1.0)).collect(),
            &[6, 8],
        )
        .unwrap();
        Sample {
            partial,
            pixels: None,
            features: Some(ImageFeatures { tokens }),
        }
    }

    #[test]
    fn forward_shapes_full_model() {
        let model = CompletionModel::new(tiny_config(), 7).unwrap();
        let out = model.forward(&tiny_sample(1)).unwrap();
        assert_eq!(out.completed.shape(), &[16, 3]);
        // 3·N_g + 2·N_l = 3·4 + 2·16
        assert_eq!(out.fused_token_count, 44);
        assert!(out.pooled_image.is_some());
        assert!(out.attention_maps.is_some());
    }

    #[test]
    fn ablation_param_sets_differ_structurally() {
        let mut cfg = tiny_config();
        let full: std::collections::BTreeSet<String> =
            CompletionModel::new(cfg.clone(), 1).unwrap().params.names().into_iter().collect();
        cfg.ablation = Ablation::NoImage;
        let no_image: std::collections::BTreeSet<String> =
            CompletionModel::new(cfg.clone(), 1).unwrap().params.names().into_iter().collect();
        cfg.ablation = Ablation::NoLocal;
        let no_local: std::collections::BTreeSet<String> =
            CompletionModel::new(cfg.clone(), 1).unwrap().params.names().into_iter().collect();
        cfg.ablation = Ablation::NoFusionAttention;
        let no_att: std::collections::BTreeSet<String> =
            CompletionModel::new(cfg, 1).unwrap().params.names().into_iter().collect();

        assert!(full.iter().any(|n| n.starts_with("fusion.att_il")));
        assert!(no_image.iter().all(|n| !n.contains("proj_i") && !n.contains("att_i")));
        assert!(no_local
            .iter()
            .all(|n| !n.contains("proj_l") && !n.contains("att_ll") && !n.contains("att_gl")));
        assert!(no_att.iter().all(|n| !n.contains(".att_")));
        assert!(no_image.is_subset(&full));
        assert!(no_att.is_subset(&full));
    }

    #[test]
    fn detect_ablation_from_names() {
        let mut cfg = tiny_config();
        for ablation in [
            Ablation::None,
            Ablation::NoLocal,
            Ablation::NoFusionAttention,
            Ablation::NoImage,
        ] {
            cfg.ablation = ablation;
            let names = CompletionModel::new(cfg.clone(), 1).unwrap().params.names();
            assert_eq!(detect_ablation(&names), ablation);
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_forward() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.hgck");
        let model = CompletionModel::new(tiny_config(), 3).unwrap();
        let sample = tiny_sample(2);
        let before = model.forward(&sample).unwrap().completed.to_vec();
        model.save(&path).unwrap();
        let other = CompletionModel::new(tiny_config(), 999).unwrap();
        other.load(&path).unwrap();
        let after = other.forward(&sample).unwrap().completed.to_vec();
        assert_eq!(before, after);
    }

    #[test]
    fn same_seed_same_init() {
        let a = CompletionModel::new(tiny_config(), 5).unwrap();
        let b = CompletionModel::new(tiny_config(), 5).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let c = CompletionModel::new(tiny_config(), 6).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn patch_backend_feeds_fusion_like_precomputed() {
        // Provider contract: either image backend yields tokens the fusion
        // stage consumes with no code change.
        let mut cfg = tiny_config();
        cfg.image_backend = ImageBackend::Patch;
        cfg.image_size = 8;
        cfg.patch = 4;
        let model = CompletionModel::new(cfg, 7).unwrap();
        assert!(model.params.get("image.patch.proj.w").is_some());
        let mut sample = tiny_sample(1);
        sample.features = None;
        sample.pixels = Some(
            crate::image::ImageInput::new(8, 8, vec![0.25; 8 * 8 * 3]).unwrap(),
        );
        let out = model.forward(&sample).unwrap();
        assert_eq!(out.completed.shape(), &[16, 3]);
        assert_eq!(out.fused_token_count, 44);
        assert!(out.pooled_image.is_some());
        // Pixels missing under the patch backend is a data error.
        sample.pixels = None;
        assert!(matches!(model.forward(&sample), Err(Error::Data(_))));
    }

    #[test]
    fn no_image_forward_ignores_missing_features() {
        let mut cfg = tiny_config();
        cfg.ablation = Ablation::NoImage;
        let model = CompletionModel::new(cfg, 7).unwrap();
        let mut sample = tiny_sample(1);
        sample.features = None;
        let out = model.forward(&sample).unwrap();
        assert_eq!(out.completed.shape(), &[16, 3]);
        assert!(out.pooled_image.is_none());
        // 2·N_g + N_l
        assert_eq!(out.fused_token_count, 2 * 4 + 16);
    }
}
