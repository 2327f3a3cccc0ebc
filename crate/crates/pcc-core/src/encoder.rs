//! Hierarchical graph-attention encoder.
//!
//! A shared per-point MLP embeds raw coordinates, then two rounds of
//! graph-descriptor feature extraction and score-based downsampling
//! reduce the cloud to a local level and a global level. Each level is
//! projected to a shared latent width.

use crate::autodiff::{DiffArray, ParamStore};
use crate::error::{Error, Result};
use crate::geometry::{knn_graph, positional_encoding, PointCloud};
use crate::layers::{Linear, Mlp2};
use rand_chacha::ChaCha12Rng;

/// Graph descriptor settings.
#[derive(Clone, Copy, Debug)]
pub struct GdConfig {
    pub k1: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub groups: usize,
    pub slope: f32,
}

impl GdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k1 == 0 {
            return Err(Error::Config("graph descriptor needs K1 >= 1".into()));
        }
        if self.groups == 0 || self.out_dim % self.groups != 0 {
            return Err(Error::Config(format!(
                "graph descriptor width {} not divisible by {} groups",
                self.out_dim, self.groups
            )));
        }
        Ok(())
    }
}

/// Per-point neighborhood feature extractor: edge features
/// `[p_i − p_j, f_i, f_j]` pass through a learned per-edge map,
/// group normalization and LeakyReLU, then max over neighbors.
pub struct GraphDescriptor {
    pub cfg: GdConfig,
    pub phi: Linear,
    pub norm_scale: DiffArray,
    pub norm_shift: DiffArray,
    pub eps: f32,
}

impl GraphDescriptor {
    pub fn new(rng: &mut ChaCha12Rng, cfg: GdConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(GraphDescriptor {
            cfg,
            phi: Linear::new(rng, 3 + 2 * cfg.in_dim, cfg.out_dim),
            norm_scale: DiffArray::leaf(vec![1.0; cfg.out_dim], &[cfg.out_dim])?,
            norm_shift: DiffArray::leaf(vec![0.0; cfg.out_dim], &[cfg.out_dim])?,
            eps: 1e-5,
        })
    }

    pub fn register(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        self.phi.register(store, &format!("{prefix}.phi"))?;
        store.register(format!("{prefix}.norm.scale"), self.norm_scale.clone())?;
        store.register(format!("{prefix}.norm.shift"), self.norm_shift.clone())
    }

    /// `coords`: the cloud the graph is built on; `feats`: `[N×in_dim]`.
    pub fn forward(&self, coords: &PointCloud, feats: &DiffArray) -> Result<DiffArray> {
        let n = coords.len();
        if feats.shape() != [n, self.cfg.in_dim] {
            return Err(Error::dimension(
                "graph descriptor features",
                &[n, self.cfg.in_dim],
                feats.shape(),
            ));
        }
        let graph = knn_graph(coords, self.cfg.k1)?;
        let k = graph.k;
        let center_idx: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(k)).collect();
        let offsets = DiffArray::from_vec(graph.offsets.clone(), &[n * k, 3])?;
        let f_center = feats.gather_rows(&center_idx)?;
        let f_neighbor = feats.gather_rows(&graph.indices)?;
        let edges = DiffArray::concat(&[offsets, f_center, f_neighbor], 1)?;
        let mapped = self.phi.forward(&edges)?;
        let normed =
            mapped.group_norm(self.cfg.groups, self.eps, &self.norm_scale, &self.norm_shift)?;
        let activated = normed.leaky_relu(self.cfg.slope);
        activated
            .reshape(&[n, k, self.cfg.out_dim])?
            .max_over_neighbors()
    }
}

/// Learned scalar scoring followed by top-M selection. Selected features
/// are gated by the sigmoid of their score so the scorer is trainable;
/// selection preserves original index order.
pub struct AttentionDownsample {
    pub score: Mlp2,
}

pub struct DownsampleOutput {
    pub coords: PointCloud,
    pub feats: DiffArray,
    /// Boundary-anchored gate values of the selected rows, `[M×1]`.
    pub gates: DiffArray,
    /// Indices into the input rows, ascending.
    pub selected: Vec<usize>,
}

impl AttentionDownsample {
    pub fn new(rng: &mut ChaCha12Rng, dim: usize, slope: f32) -> Self {
        let hidden = (dim / 2).max(1);
        let mut score = Mlp2::new(rng, dim, hidden, 1, slope);
        // Wide score spread at init keeps the top-M cut away from ties, so
        // small parameter steps rarely churn the selected set.
        score.l2 = crate::layers::Linear::new_with_gain(rng, hidden, 1, 4.0);
        AttentionDownsample { score }
    }

    pub fn register(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        self.score.register(store, &format!("{prefix}.score"))
    }

    pub fn forward(
        &self,
        coords: &PointCloud,
        feats: &DiffArray,
        m: usize,
    ) -> Result<DownsampleOutput> {
        let n = coords.len();
        if m >= n {
            return Err(Error::Config(format!(
                "downsample target M={m} must be smaller than N={n}"
            )));
        }
        if m == 0 {
            return Err(Error::Config("downsample target must be positive".into()));
        }
        let scores = self.score.forward(feats)?; // [N×1]
        let (selected, threshold_idx) = select_top_m(&scores.data(), m);
        let gathered = feats.gather_rows(&selected)?;
        // Gates are anchored at the selection boundary: a point entering or
        // leaving the top-M does so with weight ~0, so the composite stays
        // continuous in the scorer's parameters while ψ keeps its gradient.
        let threshold = scores.gather_rows(&[threshold_idx])?.tile_rows(selected.len())?;
        let gates = scores.gather_rows(&selected)?.sub(&threshold)?.sigmoid();
        let gated = gathered.scale_rows(&gates)?;
        let coords = PointCloud {
            points: selected.iter().map(|&i| coords.points[i]).collect(),
            id: coords.id.clone(),
        };
        Ok(DownsampleOutput { coords, feats: gated, gates, selected })
    }
}

/// Top-M selection plus the index of the best excluded point (the gate
/// anchor). Selected indices come back ascending.
pub fn select_top_m(scores: &[f32], m: usize) -> (Vec<usize>, usize) {
    debug_assert!(m < scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let threshold_idx = order[m];
    let mut selected: Vec<usize> = order[..m].to_vec();
    selected.sort_unstable();
    (selected, threshold_idx)
}

/// Top-M by score, ties broken toward the lower index; the result is
/// sorted ascending so downstream rows keep the original point order.
pub fn top_m_indices(scores: &[f32], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut selected: Vec<usize> = order[..m].to_vec();
    selected.sort_unstable();
    selected
}

/// Concatenates features with the sinusoidal coordinate encoding and maps
/// back to the level width.
pub struct PositionalMlp {
    pub mlp: Mlp2,
    pub bands: usize,
}

impl PositionalMlp {
    pub fn new(rng: &mut ChaCha12Rng, dim: usize, bands: usize, slope: f32) -> Self {
        let in_dim = dim + 3 * 2 * bands;
        PositionalMlp {
            mlp: Mlp2::new(rng, in_dim, dim, dim, slope),
            bands,
        }
    }

    pub fn register(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        self.mlp.register(store, prefix)
    }

    pub fn forward(&self, feats: &DiffArray, coords: &PointCloud) -> Result<DiffArray> {
        if feats.shape()[0] != coords.len() {
            return Err(Error::dimension(
                "positional mlp rows",
                &[coords.len()],
                feats.shape(),
            ));
        }
        let enc = positional_encoding(&coords.points, self.bands);
        let cat = DiffArray::concat(&[feats.clone(), enc], 1)?;
        self.mlp.forward(&cat)
    }
}

/// Encoder hyperparameters.
#[derive(Clone, Debug)]
pub struct EncoderConfig {
    pub k1: usize,
    /// Width of the shared per-point embedding.
    pub embed_dim: usize,
    /// Feature widths of the two descriptor levels.
    pub level1_width: usize,
    pub level2_width: usize,
    /// Token counts after each downsampling stage.
    pub local_count: usize,
    pub global_count: usize,
    /// Shared latent width after per-level projection.
    pub latent_dim: usize,
    pub groups: usize,
    pub slope: f32,
    pub bands: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            k1: 16,
            embed_dim: 64,
            level1_width: 128,
            level2_width: 256,
            local_count: 512,
            global_count: 128,
            latent_dim: 192,
            groups: 4,
            slope: 0.2,
            bands: 4,
        }
    }
}

/// Two-level encoder output with the coordinates each level kept.
pub struct HierarchicalFeatures {
    /// `[local_count × latent]` local feature set.
    pub local: DiffArray,
    pub local_coords: PointCloud,
    /// Indices of local tokens into the input cloud.
    pub local_indices: Vec<usize>,
    /// `[global_count × latent]` global feature set.
    pub global: DiffArray,
    pub global_coords: PointCloud,
    /// Indices of global tokens into the input cloud.
    pub global_indices: Vec<usize>,
}

pub struct HierarchicalEncoder {
    pub cfg: EncoderConfig,
    pub embed: Mlp2,
    pub gd1: GraphDescriptor,
    pub gad1: AttentionDownsample,
    pub pos1: PositionalMlp,
    pub gd2: GraphDescriptor,
    pub gad2: AttentionDownsample,
    pub pos2: PositionalMlp,
    pub proj_local: Linear,
    pub proj_global: Linear,
}

impl HierarchicalEncoder {
    pub fn new(rng: &mut ChaCha12Rng, cfg: EncoderConfig) -> Result<Self> {
        if cfg.global_count >= cfg.local_count {
            return Err(Error::Config(format!(
                "global count {} must be below local count {}",
                cfg.global_count, cfg.local_count
            )));
        }
        if cfg.bands == 0 {
            return Err(Error::Config("positional encoding needs bands >= 1".into()));
        }
        let embed = Mlp2::new(rng, 3, cfg.embed_dim, cfg.embed_dim, cfg.slope);
        let gd1 = GraphDescriptor::new(
            rng,
            GdConfig {
                k1: cfg.k1,
                in_dim: cfg.embed_dim,
                out_dim: cfg.level1_width,
                groups: cfg.groups,
                slope: cfg.slope,
            },
        )?;
        let gad1 = AttentionDownsample::new(rng, cfg.level1_width, cfg.slope);
        let pos1 = PositionalMlp::new(rng, cfg.level1_width, cfg.bands, cfg.slope);
        let gd2 = GraphDescriptor::new(
            rng,
            GdConfig {
                k1: cfg.k1,
                in_dim: cfg.level1_width,
                out_dim: cfg.level2_width,
                groups: cfg.groups,
                slope: cfg.slope,
            },
        )?;
        let gad2 = AttentionDownsample::new(rng, cfg.level2_width, cfg.slope);
        let pos2 = PositionalMlp::new(rng, cfg.level2_width, cfg.bands, cfg.slope);
        let proj_local = Linear::new(rng, cfg.level1_width, cfg.latent_dim);
        let proj_global = Linear::new(rng, cfg.level2_width, cfg.latent_dim);
        Ok(HierarchicalEncoder {
            cfg,
            embed,
            gd1,
            gad1,
            pos1,
            gd2,
            gad2,
            pos2,
            proj_local,
            proj_global,
        })
    }

    /// Register every parameter. `with_local_proj` is false for the
    /// ablation that drops the local feature branch.
    pub fn register(&self, store: &mut ParamStore, with_local_proj: bool) -> Result<()> {
        self.embed.register(store, "encoder.embed")?;
        self.gd1.register(store, "encoder.gd1")?;
        self.gad1.register(store, "encoder.gad1")?;
        self.pos1.register(store, "encoder.pos1")?;
        self.gd2.register(store, "encoder.gd2")?;
        self.gad2.register(store, "encoder.gad2")?;
        self.pos2.register(store, "encoder.pos2")?;
        if with_local_proj {
            self.proj_local.register(store, "encoder.proj_l")?;
        }
        self.proj_global.register(store, "encoder.proj_g")
    }

    /// Shared per-point embedding of raw coordinates.
    pub fn pointwise_embed(&self, cloud: &PointCloud) -> Result<DiffArray> {
        self.embed.forward(&cloud.to_array())
    }

    pub fn encode(&self, cloud: &PointCloud) -> Result<HierarchicalFeatures> {
        let cfg = &self.cfg;
        if cloud.len() < 2 * cfg.global_count {
            return Err(Error::Config(format!(
                "encoder needs at least {} points, got {}",
                2 * cfg.global_count,
                cloud.len()
            )));
        }
        if cfg.local_count >= cloud.len() {
            return Err(Error::Config(format!(
                "local target {} must be below the cloud size {}",
                cfg.local_count,
                cloud.len()
            )));
        }
        let f0 = self.pointwise_embed(cloud)?;
        let f1 = self.gd1.forward(cloud, &f0)?;
        let level1 = self.gad1.forward(cloud, &f1, cfg.local_count)?;
        let f1p = self.pos1.forward(&level1.feats, &level1.coords)?;

        let f2 = self.gd2.forward(&level1.coords, &f1p)?;
        let level2 = self.gad2.forward(&level1.coords, &f2, cfg.global_count)?;
        // Gate the post-positional global tokens as well: the positional
        // channels of a reselected point would otherwise enter at full
        // weight and make the encoder discontinuous in the scorer.
        let f2p = self
            .pos2
            .forward(&level2.feats, &level2.coords)?
            .scale_rows(&level2.gates)?;

        let local = self.proj_local.forward(&f1p)?;
        let global = self.proj_global.forward(&f2p)?;
        let global_indices: Vec<usize> =
            level2.selected.iter().map(|&i| level1.selected[i]).collect();
        Ok(HierarchicalFeatures {
            local,
            local_coords: level1.coords,
            local_indices: level1.selected,
            global,
            global_coords: level2.coords,
            global_indices,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(11)
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        use rand::Rng;
        let mut r = ChaCha12Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    [
                        r.gen::<f32>() * 2.0 - 1.0,
                        r.gen::<f32>() * 2.0 - 1.0,
                        r.gen::<f32>() * 2.0 - 1.0,
                    ]
                })
                .collect(),
        )
        .unwrap()
    }

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
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
        }
    }

    #[test]
    fn embed_is_permutation_equivariant() {
        let enc = HierarchicalEncoder::new(&mut rng(), tiny_config()).unwrap();
        let cloud = random_cloud(10, 3);
        let perm: Vec<usize> = vec![7, 2, 9, 0, 5, 1, 8, 3, 6, 4];
        let permuted = PointCloud::new(perm.iter().map(|&i| cloud.points[i]).collect()).unwrap();
        let a = enc.pointwise_embed(&cloud).unwrap();
        let b = enc.pointwise_embed(&permuted).unwrap();
        let (da, db) = (a.to_vec(), b.to_vec());
        let c = a.shape()[1];
        for (row, &src) in perm.iter().enumerate() {
            for j in 0..c {
                assert!((db[row * c + j] - da[src * c + j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn embed_zero_weights_gives_bias() {
        let enc = HierarchicalEncoder::new(&mut rng(), tiny_config()).unwrap();
        enc.embed.l1.w.set_data(&vec![0.0; enc.embed.l1.w.numel()]);
        enc.embed.l2.w.set_data(&vec![0.0; enc.embed.l2.w.numel()]);
        enc.embed.l2.b.set_data(&vec![0.5; enc.embed.l2.b.numel()]);
        let out = enc.pointwise_embed(&random_cloud(5, 1)).unwrap();
        assert!(out.to_vec().iter().all(|&v| (v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn gd_offsets_are_translation_invariant() {
        let mut r = rng();
        let gd = GraphDescriptor::new(
            &mut r,
            GdConfig { k1: 2, in_dim: 4, out_dim: 8, groups: 2, slope: 0.2 },
        )
        .unwrap();
        let cloud = random_cloud(6, 9);
        let shifted = PointCloud::new(
            cloud.points.iter().map(|p| [p[0] + 5.0, p[1] - 3.0, p[2] + 0.25]).collect(),
        )
        .unwrap();
        let feats =
            DiffArray::from_vec((0..24).map(|i| i as f32 * 0.1).collect(), &[6, 4]).unwrap();
        let a = gd.forward(&cloud, &feats).unwrap();
        let b = gd.forward(&shifted, &feats).unwrap();
        for (x, y) in a.to_vec().iter().zip(b.to_vec()) {
            assert!((x - y).abs() < 2e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn gd_duplicate_points_depend_only_on_features() {
        // K1=1 with coincident points: offsets are zero and f_i == f_j, so
        // both rows see identical edge features.
        let mut r = rng();
        let gd = GraphDescriptor::new(
            &mut r,
            GdConfig { k1: 1, in_dim: 2, out_dim: 4, groups: 2, slope: 0.2 },
        )
        .unwrap();
        let cloud = PointCloud::new(vec![[0.5, 0.5, 0.5], [0.5, 0.5, 0.5]]).unwrap();
        let feats = DiffArray::from_vec(vec![1.0, 2.0, 1.0, 2.0], &[2, 2]).unwrap();
        let out = gd.forward(&cloud, &feats).unwrap();
        let d = out.to_vec();
        assert_eq!(&d[0..4], &d[4..8]);
    }

    #[test]
    fn gd_rejects_k_ge_n() {
        let mut r = rng();
        let gd = GraphDescriptor::new(
            &mut r,
            GdConfig { k1: 8, in_dim: 2, out_dim: 4, groups: 2, slope: 0.2 },
        )
        .unwrap();
        let cloud = random_cloud(4, 2);
        let feats = DiffArray::from_vec(vec![0.0; 8], &[4, 2]).unwrap();
        assert!(matches!(gd.forward(&cloud, &feats), Err(Error::Config(_))));
    }

    #[test]
    fn top_m_decreasing_scores_select_prefix() {
        let scores: Vec<f32> = (0..8).map(|i| -(i as f32)).collect();
        assert_eq!(top_m_indices(&scores, 3), vec![0, 1, 2]);
    }

    #[test]
    fn top_m_drops_min_score_point() {
        let scores = vec![0.3, -0.9, 0.5, 0.1];
        assert_eq!(top_m_indices(&scores, 3), vec![0, 2, 3]);
    }

    #[test]
    fn top_m_matches_sort_oracle() {
        use rand::Rng;
        let mut r = ChaCha12Rng::seed_from_u64(42);
        for _ in 0..50 {
            let n = r.gen_range(2..40);
            let m = r.gen_range(1..n);
            let scores: Vec<f32> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            let mut expect = order[..m].to_vec();
            expect.sort_unstable();
            assert_eq!(top_m_indices(&scores, m), expect);
        }
    }

    #[test]
    fn downsample_rejects_m_ge_n() {
        let mut r = rng();
        let gad = AttentionDownsample::new(&mut r, 4, 0.2);
        let cloud = random_cloud(4, 2);
        let feats = DiffArray::from_vec(vec![0.0; 16], &[4, 4]).unwrap();
        assert!(gad.forward(&cloud, &feats, 4).is_err());
        assert!(gad.forward(&cloud, &feats, 3).is_ok());
    }

    #[test]
    fn gating_monotonicity_raising_score_keeps_selection() {
        let scores = vec![0.5, 0.2, 0.9, -0.3, 0.1];
        for m in 1..5 {
            let base = top_m_indices(&scores, m);
            for i in 0..scores.len() {
                if base.contains(&i) {
                    let mut boosted = scores.clone();
                    boosted[i] += 1.0;
                    assert!(top_m_indices(&boosted, m).contains(&i));
                }
            }
        }
    }

    #[test]
    fn positional_mlp_zero_weights_constant_bias() {
        let mut r = rng();
        let pos = PositionalMlp::new(&mut r, 4, 2, 0.2);
        pos.mlp.l1.w.set_data(&vec![0.0; pos.mlp.l1.w.numel()]);
        pos.mlp.l2.w.set_data(&vec![0.0; pos.mlp.l2.w.numel()]);
        pos.mlp.l2.b.set_data(&[9.0, 8.0, 7.0, 6.0]);
        let cloud = random_cloud(3, 4);
        let feats = DiffArray::from_vec(vec![0.1; 12], &[3, 4]).unwrap();
        let out = pos.forward(&feats, &cloud).unwrap();
        assert_eq!(
            out.to_vec(),
            vec![9.0, 8.0, 7.0, 6.0, 9.0, 8.0, 7.0, 6.0, 9.0, 8.0, 7.0, 6.0]
        );
    }

    #[test]
    fn positional_mlp_width_independent_of_bands() {
        let mut r = rng();
        for bands in [1usize, 3, 5] {
            let pos = PositionalMlp::new(&mut r, 6, bands, 0.2);
            let cloud = random_cloud(4, 7);
            let feats = DiffArray::from_vec(vec![0.2; 24], &[4, 6]).unwrap();
            assert_eq!(pos.forward(&feats, &cloud).unwrap().shape(), &[4, 6]);
        }
    }

    #[test]
    fn encode_shapes_and_nesting() {
        let enc = HierarchicalEncoder::new(&mut rng(), tiny_config()).unwrap();
        let cloud = random_cloud(64, 5);
        let h = enc.encode(&cloud).unwrap();
        assert_eq!(h.local.shape(), &[16, 8]);
        assert_eq!(h.global.shape(), &[4, 8]);
        // Nested selection: global ⊆ local ⊆ input.
        for &g in &h.global_indices {
            assert!(h.local_indices.contains(&g));
        }
        for (&g, p) in h.global_indices.iter().zip(&h.global_coords.points) {
            assert_eq!(cloud.points[g], *p);
        }
        for (&l, p) in h.local_indices.iter().zip(&h.local_coords.points) {
            assert_eq!(cloud.points[l], *p);
        }
    }

    #[test]
    fn encode_rejects_small_clouds() {
        let enc = HierarchicalEncoder::new(&mut rng(), tiny_config()).unwrap();
        let cloud = random_cloud(7, 5);
        assert!(matches!(enc.encode(&cloud), Err(Error::Config(_))));
    }

    #[test]
    fn encode_permutation_keeps_selected_coordinate_multiset() {
        let enc = HierarchicalEncoder::new(&mut rng(), tiny_config()).unwrap();
        let cloud = random_cloud(48, 8);
        let mut perm: Vec<usize> = (0..48).collect();
        perm.reverse();
        let permuted = PointCloud::new(perm.iter().map(|&i| cloud.points[i]).collect()).unwrap();
        let sort_points = |mut pts: Vec<[f32; 3]>| {
            pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            pts
        };
        let a = enc.encode(&cloud).unwrap();
        let b = enc.encode(&permuted).unwrap();
        assert_eq!(
            sort_points(a.global_coords.points.clone()),
            sort_points(b.global_coords.points.clone())
        );
        assert_eq!(
            sort_points(a.local_coords.points.clone()),
            sort_points(b.local_coords.points.clone())
        );
    }
}
