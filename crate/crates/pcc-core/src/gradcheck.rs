//! Finite-difference gradient verification.
//!
//! Every learned block is rebuilt here as a plain f64 forward pass,
//! independent of the autodiff tape. Central differences over that
//! reference are compared against the engine's analytic gradients at
//! reduced widths. Isolated array ops are held to 1e-4, composite blocks
//! and the full pipeline to 1e-3.

use crate::autodiff::{DiffArray, ParamStore};
use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{
    select_top_m, AttentionDownsample, EncoderConfig, GdConfig, GraphDescriptor,
    HierarchicalEncoder, PositionalMlp,
};
use crate::error::{Error, Result};
use crate::fusion::{AttentionLayer, FusionModule, FusionVariant};
use crate::geometry::{farthest_point_sample, knn_graph, PointCloud};
use crate::image::{grid_position_term, ImageInput, PatchEncoder};
use crate::layers::Mlp2;
use crate::losses::{contrastive_loss, pool_global, ContrastiveBatch, Pooling};
use crate::model::{Ablation, CompletionModel, ImageBackend, ModelConfig, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

pub const OP_THRESHOLD: f64 = 1e-4;
pub const BLOCK_THRESHOLD: f64 = 1e-3;

fn fd_step() -> f64 {
    std::env::var("PCC_FD_STEP")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1e-4)
}

// ── f64 reference kernels ────────────────────────────────────────────

fn ref_linear(x: &[f64], rows: usize, w: &[f64], in_dim: usize, out_dim: usize, b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * out_dim];
    for i in 0..rows {
        for j in 0..out_dim {
            let mut s = b[j];
            for k in 0..in_dim {
                s += x[i * in_dim + k] * w[k * out_dim + j];
            }
            out[i * out_dim + j] = s;
        }
    }
    out
}

fn ref_leaky(x: &mut [f64], slope: f64) {
    for v in x {
        if *v < 0.0 {
            *v *= slope;
        }
    }
}

fn ref_sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn ref_softmax_rows(x: &mut [f64], rows: usize, cols: usize) {
    for i in 0..rows {
        let row = &mut x[i * cols..(i + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            denom += *v;
        }
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
}

fn ref_group_norm(
    x: &[f64],
    n: usize,
    c: usize,
    groups: usize,
    eps: f64,
    scale: &[f64],
    shift: &[f64],
) -> Vec<f64> {
    let gsize = c / groups;
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        for g in 0..groups {
            let base = i * c + g * gsize;
            let xs = &x[base..base + gsize];
            let mu: f64 = xs.iter().sum::<f64>() / gsize as f64;
            let var: f64 = xs.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / gsize as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for off in 0..gsize {
                out[base + off] = (xs[off] - mu) * inv * scale[g * gsize + off] + shift[g * gsize + off];
            }
        }
    }
    out
}

fn ref_max_over_k(x: &[f64], n: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        for j in 0..c {
            let mut best = x[i * k * c + j];
            for kk in 1..k {
                let v = x[(i * k + kk) * c + j];
                if v > best {
                    best = v;
                }
            }
            out[i * c + j] = best;
        }
    }
    out
}

fn ref_max_rows(x: &[f64], n: usize, c: usize) -> Vec<f64> {
    ref_max_over_k(x, 1, n, c)
}

// ── Parameter plumbing ───────────────────────────────────────────────

/// Flat f64 view of a parameter store with named slices.
pub struct Theta {
    pub flat: Vec<f64>,
    ranges: Vec<(String, usize, usize)>,
}

impl Theta {
    pub fn from_store(store: &ParamStore) -> Theta {
        let mut flat = Vec::new();
        let mut ranges = Vec::new();
        for p in store.iter() {
            let start = flat.len();
            flat.extend(p.array.data().iter().map(|&v| v as f64));
            ranges.push((p.name.clone(), start, flat.len()));
        }
        Theta { flat, ranges }
    }

    pub fn slice<'a>(&'a self, name: &str) -> &'a [f64] {
        for (n, a, b) in &self.ranges {
            if n == name {
                return &self.flat[*a..*b];
            }
        }
        panic!("unknown parameter {name}");
    }

    fn with_flat(&self, flat: &[f64]) -> Theta {
        Theta { flat: flat.to_vec(), ranges: self.ranges.clone() }
    }
}

fn collect_engine_grads(store: &ParamStore) -> Vec<f64> {
    let mut out = Vec::new();
    for p in store.iter() {
        match p.array.grad() {
            Some(g) => out.extend(g.iter().map(|&v| v as f64)),
            None => out.extend(std::iter::repeat(0.0).take(p.array.numel())),
        }
    }
    out
}

fn central_differences(f: &mut dyn FnMut(&[f64]) -> f64, theta0: &[f64], limit: usize) -> Vec<(usize, f64)> {
    let h = fd_step();
    let mut theta = theta0.to_vec();
    let count = theta.len().min(limit);
    let stride = (theta.len() + count - 1) / count;
    let mut out = Vec::with_capacity(count);
    let mut idx = 0;
    while idx < theta.len() {
        let saved = theta[idx];
        theta[idx] = saved + h;
        let up = f(&theta);
        theta[idx] = saved - h;
        let down = f(&theta);
        theta[idx] = saved;
        out.push((idx, (up - down) / (2.0 * h)));
        idx += stride;
    }
    out
}

fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

// ── Report ───────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    /// Components skipped because the difference quotient was step-size
    /// dependent (the evaluation point straddles a max/LeakyReLU kink).
    pub kink_excluded: usize,
    pub max_rel_err: f64,
    pub threshold: f64,
}

impl BlockReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}

pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(BlockReport::passed)
    }

    pub fn failing(&self) -> Vec<&BlockReport> {
        self.blocks.iter().filter(|b| !b.passed()).collect()
    }

    pub fn text(&self) -> String {
        let mut out = format!(
            "{:<24} {:>8} {:>6} {:>13} {:>11} {:>7}\n",
            "block", "checked", "kinks", "max_rel_err", "threshold", "status"
        );
        for b in &self.blocks {
            out.push_str(&format!(
                "{:<24} {:>8} {:>6} {:>13.3e} {:>11.0e} {:>7}\n",
                b.name,
                b.checked,
                b.kink_excluded,
                b.max_rel_err,
                b.threshold,
                if b.passed() { "ok" } else { "FAIL" }
            ));
        }
        out.push_str(if self.passed() { "gradient check passed\n" } else { "gradient check FAILED\n" });
        out
    }
}

#[derive(Default)]
pub struct GradCheckOptions {
    /// Test hook: scale the named block's analytic gradients so the
    /// mismatch is detected and attributed.
    pub corrupt_block: Option<String>,
    /// Cap on FD evaluations per block.
    pub max_components: Option<usize>,
}

struct BlockCase {
    name: &'static str,
    threshold: f64,
    store: ParamStore,
    engine_loss: Box<dyn Fn() -> Result<DiffArray>>,
    reference_loss: Box<dyn FnMut(&Theta) -> f64>,
}

fn rng(tag: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(0x6ead_c0de ^ tag)
}

fn random_vec(r: &mut ChaCha12Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| r.gen_range(-scale..scale)).collect()
}

fn random_cloud(r: &mut ChaCha12Rng, n: usize) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)])
            .collect(),
    )
    .expect("cloud")
}

/// Weighted sum turns a block output into a scalar without flattening the
/// gradient structure the way a plain sum would.
fn weighted_loss(out: &DiffArray, weights: &[f32]) -> Result<DiffArray> {
    let w = DiffArray::from_vec(weights.to_vec(), out.shape())?;
    Ok(out.mul(&w)?.sum())
}

fn weighted_ref(out: &[f64], weights: &[f32]) -> f64 {
    out.iter().zip(weights).map(|(&o, &w)| o * w as f64).sum()
}

fn run_case(case: &mut BlockCase, opts: &GradCheckOptions) -> Result<BlockReport> {
    let limit = opts.max_components.unwrap_or(2000);
    let loss = (case.engine_loss)()?;
    case.store.zero_grads();
    loss.backward()?;
    let mut analytic = collect_engine_grads(&case.store);
    if opts.corrupt_block.as_deref() == Some(case.name) {
        for g in &mut analytic {
            *g = *g * 1.5 + 0.05;
        }
    }
    let theta0 = Theta::from_store(&case.store);
    // Forward parity guards the reference against drifting from the engine.
    let ref_at_origin = (case.reference_loss)(&theta0);
    let engine_value = loss.value() as f64;
    let parity = (ref_at_origin - engine_value).abs() / engine_value.abs().max(1.0);
    if parity > 1e-3 {
        return Err(Error::Contract(format!(
            "gradcheck reference for {} diverges from the engine forward: {} vs {}",
            case.name, ref_at_origin, engine_value
        )));
    }
    let mut eval = |flat: &[f64]| (case.reference_loss)(&theta0.with_flat(flat));
    let fds = central_differences(&mut eval, &theta0.flat, limit);
    // Gradients are stored in f32 and assembled from sums of f32 products,
    // so components have an absolute noise floor proportional to the
    // block's gradient scale. Deep blocks accumulate more rounding than a
    // single op. The comparison therefore uses an absolute floor under the
    // relative threshold: effective error is |fd-an| / max(|fd|, |an|,
    // atol/threshold), which matches "within atol or within rel threshold".
    let linf = analytic.iter().fold(0.0f64, |a, &g| a.max(g.abs()));
    let atol = if case.threshold <= OP_THRESHOLD { 1e-6 } else { 1e-5 } * linf.max(1.0);
    let denom_floor = atol / case.threshold;
    let h = fd_step();
    let mut single = |theta: &mut Vec<f64>, idx: usize, step: f64| -> f64 {
        let saved = theta[idx];
        theta[idx] = saved + step;
        let up = eval(theta);
        theta[idx] = saved - step;
        let down = eval(theta);
        theta[idx] = saved;
        (up - down) / (2.0 * step)
    };
    let effective_rel =
        |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(denom_floor);
    let mut theta = theta0.flat.clone();
    let mut max_rel = 0.0f64;
    let mut kink_excluded = 0usize;
    for (idx, fd) in &fds {
        let an = analytic[*idx];
        let mut rel = effective_rel(*fd, an);
        if rel >= case.threshold {
            // Refine: a smooth function gives a step-stable quotient; a
            // straddled max/LeakyReLU kink does not and is excluded per
            // the tolerance contract.
            let f1 = single(&mut theta, *idx, h / 4.0);
            let f2 = single(&mut theta, *idx, h / 16.0);
            let stable = (f1 - f2).abs() <= 0.02 * f1.abs().max(f2.abs()).max(denom_floor);
            if stable {
                rel = effective_rel(f2, an);
            } else {
                kink_excluded += 1;
                continue;
            }
        }
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(BlockReport {
        name: case.name.to_string(),
        checked: fds.len(),
        kink_excluded,
        max_rel_err: max_rel,
        threshold: case.threshold,
    })
}

// ── Reference mirrors of the learned blocks ──────────────────────────

fn ref_mlp2(
    theta: &Theta,
    prefix: &str,
    x: &[f64],
    rows: usize,
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
    slope: f64,
) -> Vec<f64> {
    let mut h = ref_linear(
        x,
        rows,
        theta.slice(&format!("{prefix}.l1.w")),
        in_dim,
        hidden,
        theta.slice(&format!("{prefix}.l1.b")),
    );
    ref_leaky(&mut h, slope);
    ref_linear(
        &h,
        rows,
        theta.slice(&format!("{prefix}.l2.w")),
        hidden,
        out_dim,
        theta.slice(&format!("{prefix}.l2.b")),
    )
}

#[allow(clippy::too_many_arguments)]
fn ref_graph_descriptor(
    theta: &Theta,
    prefix: &str,
    cloud: &PointCloud,
    feats: &[f64],
    in_dim: usize,
    out_dim: usize,
    cfg: GdConfig,
) -> Vec<f64> {
    let graph = knn_graph(cloud, cfg.k1).expect("ref knn");
    let n = cloud.len();
    let k = cfg.k1;
    let edge_w = 3 + 2 * in_dim;
    let mut edges = vec![0.0f64; n * k * edge_w];
    for i in 0..n {
        for kk in 0..k {
            let e = (i * k + kk) * edge_w;
            let j = graph.indices[i * k + kk];
            for a in 0..3 {
                edges[e + a] = graph.offsets[(i * k + kk) * 3 + a] as f64;
            }
            for c in 0..in_dim {
                edges[e + 3 + c] = feats[i * in_dim + c];
                edges[e + 3 + in_dim + c] = feats[j * in_dim + c];
            }
        }
    }
    let mapped = ref_linear(
        &edges,
        n * k,
        theta.slice(&format!("{prefix}.phi.w")),
        edge_w,
        out_dim,
        theta.slice(&format!("{prefix}.phi.b")),
    );
    let mut normed = ref_group_norm(
        &mapped,
        n * k,
        out_dim,
        cfg.groups,
        1e-5,
        theta.slice(&format!("{prefix}.norm.scale")),
        theta.slice(&format!("{prefix}.norm.shift")),
    );
    ref_leaky(&mut normed, cfg.slope as f64);
    ref_max_over_k(&normed, n, k, out_dim)
}

/// Scores, selection, and anchored gating; returns (selected, gated feats).
fn ref_downsample(
    theta: &Theta,
    prefix: &str,
    feats: &[f64],
    n: usize,
    dim: usize,
    m: usize,
    slope: f64,
) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let hidden = (dim / 2).max(1);
    let scores = ref_mlp2(theta, &format!("{prefix}.score"), feats, n, dim, hidden, 1, slope);
    let scores_f32: Vec<f32> = scores.iter().map(|&v| v as f32).collect();
    let (selected, threshold_idx) = select_top_m(&scores_f32, m);
    let thr = scores[threshold_idx];
    let mut gated = vec![0.0f64; m * dim];
    let mut gates = vec![0.0f64; m];
    for (row, &i) in selected.iter().enumerate() {
        let gate = ref_sigmoid(scores[i] - thr);
        gates[row] = gate;
        for c in 0..dim {
            gated[row * dim + c] = feats[i * dim + c] * gate;
        }
    }
    (selected, gated, gates)
}

fn ref_positional(
    theta: &Theta,
    prefix: &str,
    feats: &[f64],
    coords: &PointCloud,
    dim: usize,
    bands: usize,
    slope: f64,
) -> Vec<f64> {
    let n = coords.len();
    let enc_w = 3 * 2 * bands;
    let mut cat = vec![0.0f64; n * (dim + enc_w)];
    for i in 0..n {
        cat[i * (dim + enc_w)..i * (dim + enc_w) + dim]
            .copy_from_slice(&feats[i * dim..(i + 1) * dim]);
        let mut off = dim;
        for &c in &coords.points[i] {
            for b in 0..bands {
                let arg = 2.0f64.powi(b as i32) * std::f64::consts::PI * c as f64;
                // Match the engine: the angle is rounded to f32 first.
                let arg32 = arg as f32;
                cat[i * (dim + enc_w) + off] = (arg32.sin()) as f64;
                cat[i * (dim + enc_w) + off + 1] = (arg32.cos()) as f64;
                off += 2;
            }
        }
    }
    ref_mlp2(theta, prefix, &cat, n, dim + enc_w, dim, dim, slope)
}

struct RefEncoderOut {
    local: Vec<f64>,
    global: Vec<f64>,
}

fn ref_encode(theta: &Theta, cloud: &PointCloud, cfg: &EncoderConfig) -> RefEncoderOut {
    let n = cloud.len();
    let slope = cfg.slope as f64;
    let coords_flat: Vec<f64> = cloud.points.iter().flatten().map(|&v| v as f64).collect();
    let f0 = ref_mlp2(
        theta,
        "encoder.embed",
        &coords_flat,
        n,
        3,
        cfg.embed_dim,
        cfg.embed_dim,
        slope,
    );
    let gd_cfg1 = GdConfig {
        k1: cfg.k1,
        in_dim: cfg.embed_dim,
        out_dim: cfg.level1_width,
        groups: cfg.groups,
        slope: cfg.slope,
    };
    let f1 = ref_graph_descriptor(theta, "encoder.gd1", cloud, &f0, cfg.embed_dim, cfg.level1_width, gd_cfg1);
    let (sel1, gated1, _) =
        ref_downsample(theta, "encoder.gad1", &f1, n, cfg.level1_width, cfg.local_count, slope);
    let coords1 = PointCloud {
        points: sel1.iter().map(|&i| cloud.points[i]).collect(),
        id: None,
    };
    let f1p = ref_positional(theta, "encoder.pos1", &gated1, &coords1, cfg.level1_width, cfg.bands, slope);

    let gd_cfg2 = GdConfig {
        k1: cfg.k1,
        in_dim: cfg.level1_width,
        out_dim: cfg.level2_width,
        groups: cfg.groups,
        slope: cfg.slope,
    };
    let f2 = ref_graph_descriptor(theta, "encoder.gd2", &coords1, &f1p, cfg.level1_width, cfg.level2_width, gd_cfg2);
    let (sel2, gated2, gates2) = ref_downsample(
        theta,
        "encoder.gad2",
        &f2,
        cfg.local_count,
        cfg.level2_width,
        cfg.global_count,
        slope,
    );
    let coords2 = PointCloud {
        points: sel2.iter().map(|&i| coords1.points[i]).collect(),
        id: None,
    };
    let mut f2p = ref_positional(theta, "encoder.pos2", &gated2, &coords2, cfg.level2_width, cfg.bands, slope);
    for (row, &g) in gates2.iter().enumerate() {
        for c in 0..cfg.level2_width {
            f2p[row * cfg.level2_width + c] *= g;
        }
    }

    let local = ref_linear(
        &f1p,
        cfg.local_count,
        theta.slice("encoder.proj_l.w"),
        cfg.level1_width,
        cfg.latent_dim,
        theta.slice("encoder.proj_l.b"),
    );
    let global = ref_linear(
        &f2p,
        cfg.global_count,
        theta.slice("encoder.proj_g.w"),
        cfg.level2_width,
        cfg.latent_dim,
        theta.slice("encoder.proj_g.b"),
    );
    RefEncoderOut { local, global }
}

fn ref_attention(
    theta: &Theta,
    prefix: &str,
    query: &[f64],
    m: usize,
    kv: &[f64],
    n: usize,
    dim: usize,
    heads: usize,
) -> Vec<f64> {
    let q = ref_linear(query, m, theta.slice(&format!("{prefix}.wq.w")), dim, dim, theta.slice(&format!("{prefix}.wq.b")));
    let k = ref_linear(kv, n, theta.slice(&format!("{prefix}.wk.w")), dim, dim, theta.slice(&format!("{prefix}.wk.b")));
    let v = ref_linear(kv, n, theta.slice(&format!("{prefix}.wv.w")), dim, dim, theta.slice(&format!("{prefix}.wv.b")));
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads_out = vec![0.0f64; m * dim];
    for h in 0..heads {
        let col = h * dh;
        let mut logits = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut dot = 0.0;
                for d in 0..dh {
                    dot += q[i * dim + col + d] * k[j * dim + col + d];
                }
                logits[i * n + j] = dot * scale;
            }
        }
        ref_softmax_rows(&mut logits, m, n);
        for i in 0..m {
            for d in 0..dh {
                let mut s = 0.0;
                for j in 0..n {
                    s += logits[i * n + j] * v[j * dim + col + d];
                }
                heads_out[i * dim + col + d] = s;
            }
        }
    }
    ref_linear(&heads_out, m, theta.slice(&format!("{prefix}.wo.w")), dim, dim, theta.slice(&format!("{prefix}.wo.b")))
}

fn ref_pool_max(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    ref_max_rows(x, n, d)
}

fn ref_contrastive(g: &[f64], v: &[f64], b: usize, d: usize, tau: f64) -> f64 {
    let norm_rows = |x: &[f64]| -> Vec<f64> {
        let mut out = x.to_vec();
        for i in 0..b {
            let norm: f64 = (0..d).map(|j| x[i * d + j] * x[i * d + j]).sum::<f64>().sqrt();
            for j in 0..d {
                out[i * d + j] /= norm;
            }
        }
        out
    };
    let gn = norm_rows(g);
    let vn = norm_rows(v);
    let mut sim = vec![0.0f64; b * b];
    for i in 0..b {
        for j in 0..b {
            let mut dot = 0.0;
            for k in 0..d {
                dot += gn[i * d + k] * vn[j * d + k];
            }
            sim[i * b + j] = dot / tau;
        }
    }
    let log_softmax_diag_sum = |s: &[f64], transpose: bool| -> f64 {
        let mut total = 0.0;
        for i in 0..b {
            let row: Vec<f64> = (0..b)
                .map(|j| if transpose { s[j * b + i] } else { s[i * b + j] })
                .collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            total += row[i] - lse;
        }
        total
    };
    -0.5 * (log_softmax_diag_sum(&sim, false) + log_softmax_diag_sum(&sim, true))
}

fn ref_chamfer(p: &[f64], np: usize, q: &[f64], nq: usize) -> f64 {
    let term = |a: &[f64], na: usize, b: &[f64], nb: usize| -> f64 {
        let mut total = 0.0;
        for i in 0..na {
            let mut best = f64::INFINITY;
            for j in 0..nb {
                let mut d = 0.0;
                for axis in 0..3 {
                    let diff = a[i * 3 + axis] - b[j * 3 + axis];
                    d += diff * diff;
                }
                if d < best {
                    best = d;
                }
            }
            total += best;
        }
        total / na as f64
    };
    term(p, np, q, nq) + term(q, nq, p, np)
}

fn ref_decode(theta: &Theta, fused: &[f64], tokens: usize, dim: usize, cfg: &DecoderConfig, slope: f64) -> Vec<f64> {
    let code = ref_pool_max(fused, tokens, dim);
    let seeds = theta.slice("decoder.seeds");
    let in_w = dim + cfg.seed_dim;
    let mut x = vec![0.0f64; cfg.m_gen * in_w];
    for i in 0..cfg.m_gen {
        x[i * in_w..i * in_w + dim].copy_from_slice(&code);
        x[i * in_w + dim..(i + 1) * in_w]
            .copy_from_slice(&seeds[i * cfg.seed_dim..(i + 1) * cfg.seed_dim]);
    }
    let bottleneck = (cfg.hidden / 8).max(8);
    let mut h = ref_linear(&x, cfg.m_gen, theta.slice("decoder.l1.w"), in_w, cfg.hidden, theta.slice("decoder.l1.b"));
    ref_leaky(&mut h, slope);
    let mut h = ref_linear(&h, cfg.m_gen, theta.slice("decoder.l2.w"), cfg.hidden, bottleneck, theta.slice("decoder.l2.b"));
    ref_leaky(&mut h, slope);
    ref_linear(&h, cfg.m_gen, theta.slice("decoder.l3.w"), bottleneck, 3, theta.slice("decoder.l3.b"))
}

// ── Case builders ────────────────────────────────────────────────────

fn case_pointwise_embed() -> BlockCase {
    let mut r = rng(1);
    let cloud = random_cloud(&mut r, 12);
    let embed = Mlp2::new(&mut r, 3, 6, 6, 0.2);
    let mut store = ParamStore::new();
    embed.register(&mut store, "embed").unwrap();
    let weights = random_vec(&mut r, 12 * 6, 1.0);
    let cloud2 = cloud.clone();
    let w2 = weights.clone();
    BlockCase {
        name: "pointwise_embed",
        threshold: BLOCK_THRESHOLD,
        store,
        engine_loss: Box::new(move || weighted_loss(&embed.forward(&cloud2.to_array())?, &weights)),
        reference_loss: Box::new(move |theta| {
            let coords: Vec<f64> = cloud.points.iter().flatten().map(|&v| v as f64).collect();
            let out = ref_mlp2(theta, "embed", &coords, 12, 3, 6, 6, 0.2);
            weighted_ref(&out, &w2)
        }),
    }
}

fn case_graph_descriptor() -> BlockCase {
    let mut r = rng(2);
    let cloud = random_cloud(&mut r, 10);
    let cfg = GdConfig { k1: 3, in_dim: 4, out_dim: 6, groups: 2, slope: 0.2 };
    let gd = GraphDescriptor::new(&mut r, cfg).unwrap();
    let feats = random_vec(&mut r, 10 * 4, 1.0);
    let mut store = ParamStore::new();
    gd.register(&mut store, "gd").unwrap();
    let weights = random_vec(&mut r, 10 * 6, 1.0);
    let cloud2 = cloud.clone();
    let feats2 = feats.clone();
    let w2 = weights.clone();
    BlockCase {
        name: "graph_descriptor",
        threshold: BLOCK_THRESHOLD,
        store,
        engine_loss: Box::new(move || {
            let f = DiffArray::from_vec(feats2.clone(), &[10, 4])?;
            weighted_loss(&gd.forward(&cloud2, &f)?, &weights)
        }),
        reference_loss: Box::new(move |theta| {
            let f64s: Vec<f64> = feats.iter().map(|&v| v as f64).collect();
            let out = ref_graph_descriptor(theta, "gd", &cloud, &f64s, 4, 6, cfg);
            weighted_ref(&out, &w2)
        }),
    }
}

fn case_attention_downsample() -> BlockCase {
    let mut r = rng(3);
    let cloud = random_cloud(&mut r, 12);
    let gad = AttentionDownsample::new(&mut r, 6, 0.2);
    let feats = random_vec(&mut r, 12 * 6, 1.0);
    let mut store = ParamStore::new();
    gad.register(&mut store, "gad").unwrap();
    let weights = random_vec(&mut r, 5 * 6, 1.0);
    let cloud2 = cloud.clone();
    let feats2 = feats.clone();
    let w2 = weights.clone();
    BlockCase {
        name: "attention_downsample",
        threshold: BLOCK_THRESHOLD,
        store,
        engine_loss: Box::new(move || {
            let f = DiffArray::from_vec(feats2.clone(), &[12, 6])?;
            weighted_loss(&gad.forward(&cloud2, &f, 5)?.feats, &weights)
        }),
        reference_loss: Box::new(move |theta| {
            let f64s: Vec<f64> = feats.iter().map(|&v| v as f64).collect();
            let (_, gated, _) = ref_downsample(theta, "gad", &f64s, 12, 6, 5, 0.2);
            weighted_ref(&gated, &w2)
        }),
    }
}

fn case_add_positional() -> BlockCase {
    let mut r = rng(4);
    let cloud = random_cloud(&mut r, 9);
    let pos = PositionalMlp::new(&mut r, 6, 2, 0.2);
    let feats = random_vec(&mut r, 9 * 6, 1.0);
    let mut store = ParamStore::new();
    pos.register(&mut store, "pos").unwrap();
    let weights = random_vec(&mut r, 9 * 6, 1.0);
    let cloud2 = cloud.clone();
    let feats2 = feats.clone();
    let w2 = weights.clone();
    BlockCase {
        name: "add_positional",
        threshold: BLOCK_THRESHOLD,
        store,
        engine_loss: Box::new(move || {
            let f = DiffArray::from_vec(feats2.clone(), &[9, 6])?;
            weighted_loss(&pos.forward(&f, &cloud2)?, &weights)
        }),
        reference_loss: Box::new(move |theta| {
            let f64s: Vec<f64> = feats.iter().map(|&v| v as f64).collect();
            let out = ref_positional(theta, "pos", &f64s, &cloud, 6, 2, 0.2);
            weighted_ref(&out, &w2)
        }),
    }
}

fn tiny_encoder_config() -> EncoderConfig {
    EncoderConfig {
        k1: 4,
        embed_dim: 6,
        level1_width: 6,
        level2_width: 6,
        local_count: 16,
        global_count: 4,
        latent_dim: 6,
        groups: 2,
        slope: 0.2,
        bands: 1,
    }
}

fn case_encoder() -> BlockCase {
    let mut r = rng(5);
    let cfg = tiny_encoder_config();
    let cloud = random_cloud(&mut r, 40);
    let enc = HierarchicalEncoder::new(&mut r, cfg.clone()).unwrap();
    let mut store = ParamStore::new();
    enc.register(&mut store, true).unwrap();
    let w_local = random_vec(&mut r, 16 * 6, 1.0);
    let w_global = random_vec(&mut r, 4 * 6, 1.0);
    let cloud2 = cloud.clone();
    let (wl2, wg2) = (w_local.clone(), w_global.clone());
    BlockCase {
        name: "encoder",
        threshold: BLOCK_THRESHOLD,
        store,
        engine_loss: Box::new(move || {
            let h = enc.encode(&cloud2)?;
            weighted_loss(&h.local, &w_local)?.add(&weighted_loss(&h.global, &w_global)?)
        }),
        reference_loss: Box::new(move |theta| {
            let out = ref_encode(theta, &cloud, &cfg);
            weighted_ref(&out.local, &wl2) + weighted_ref(&out.global, &wg2)
        }),
    }
}

fn case_patch_encode() -> BlockCase {
    let mut r = rng(6);
    let enc = PatchEncoder::new(&mut r, 8, 6).unwrap();
    let pixels: Vec<f32> = (0..16 * 16 * 3).map(|_| r.gen::<f32>()).collect();
    let img = ImageInput::new(16, 16, pixels.clone()).unwrap();
    let mut store = ParamStore::new();
    enc.register(&mut store, "image.patch").unwrap();
    let weights = random_vec(&mut r, 4 * 6, 1.0);
    let w2 = weights.clone();
    BlockCase {
        name: "patch_encode",
        threshold: BLOCK_THRESHOLD,
        store,
        engine_loss: Box::new(move || weighted_loss(&enc.encode(&img)?.tokens, &weights)),
        reference_loss: Box::new(move |theta| {
            // 2×2 patch grid of 8×8×3 patches.
            let mut flat = vec![0.0f64; 4 * 192];
            for gr in 0..2 {
                for gc in 0..2 {
                    let t = gr * 2 + gc;
                    let mut off = 0;
                    for py in 0..8 {
                        for px in 0..8 {
                            let y = gr * 8 + py;
                            let x = gc * 8 + px;
                            for ch in 0..3 {
                                flat[t * 192 + off] = pixels[(y * 16 + x) * 3 + ch] as f64;
                                off += 1;
                            }
                        }
                    }
                }
            }
            let mut out = ref_linear(
                &flat,
                4,
                theta.slice("image.patch.proj.w"),
                192,
                6,
                theta.slice("image.patch.proj.b"),
            );
            for (o, p) in out.iter_mut().zip(grid_position_term(2, 2, 6)) {
                *o += p as f64;
            }
            weighted_ref(&out, &w2)
        }),
    }
}

fn case_attention_layer() -> BlockCase {
    let mut r = rng(7);
    let layer = AttentionLayer::new(&mut r, 6, 2).unwrap();
    let q = random_vec(&mut r, 5 * 6, 1.0);
    let kv = random_vec(&mut r, 7 * 6, 1.0);
    let mut store = ParamStore::new();
    layer.register(&mut store, "att").unwrap();
    let weights = random_vec(&mut r, 5 * 6, 1.0);
    let (q2, kv2, w2) = (q.clone(), kv.clone(), weights.clone());
    BlockCase {
        name: "attention",
        threshold: BLOCK_THRESHOLD,
        store,
        engine_loss: Box::new(move || {
            let qa = DiffArray::from_vec(q2.clone(), &[5, 6])?;
            let ka = DiffArray::from_vec(kv2.clone(), &[7, 6])?;
            weighted_loss(&layer.forward(&qa, &ka)?.0, &weights)
        }),
        reference_loss: Box::new(move |theta| {
            let qd: Vec<f64> = q.iter().map(|&v| v as f64).collect();
            let kd: Vec<f64> = kv.iter().map(|&v| v as f64).collect();
            let out = ref_attention(theta, "att", &qd, 5, &kd, 7, 6, 2);
            weighted_ref(&out, &w2)
        }),
    }
}

fn case_fusion() -> BlockCase {
    let mut r = rng(8);
    let module = FusionModule::new(&mut r, 6, 6, 6, 6, 2, FusionVariant::Full, false).unwrap();
    let g = random_vec(&mut r, 4 * 6, 1.0);
    let l = random_vec(&mut r, 6 * 6, 1.0);
    let i = random_vec(&mut r, 3 * 6, 1.0);
    let mut store = ParamStore::new();
    module.register(&mut store).unwrap();
    let tokens = 3 * 4 + 2 * 6;
    let weights = random_vec(&mut r, tokens * 6, 1.0);
    let (g2, l2, i2, w2) = (g.clone(), l.clone(), i.clone(), weights.clone());
    BlockCase {
        name: "fusion_five_way",
        threshold: BLOCK_THRESHOLD,
        store,
        engine_loss: Box::new(move || {
            let ga = DiffArray::from_vec(g2.clone(), &[4, 6])?;
            let la = DiffArray::from_vec(l2.clone(), &[6, 6])?;
            let ia = DiffArray::from_vec(i2.clone(), &[3, 6])?;
            let (fused, _) = module.fuse(&ga, Some(&la), Some(&ia))?;
            weighted_loss(&fused.concatenated, &weights)
        }),
        reference_loss: Box::new(move |theta| {
            let out = ref_fuse_full(theta, &g, 4, &l, 6, &i, 3, 6, 2);
            weighted_ref(&out, &w2)
        }),
    }
}

#[allow(clippy::too_many_arguments)]
fn ref_fuse_full(
    theta: &Theta,
    g: &[f32],
    ng: usize,
    l: &[f32],
    nl: usize,
    img: &[f32],
    ni: usize,
    dim: usize,
    heads: usize,
) -> Vec<f64> {
    let to64 = |x: &[f32]| -> Vec<f64> { x.iter().map(|&v| v as f64).collect() };
    let gp = ref_linear(&to64(g), ng, theta.slice("fusion.proj_g.w"), dim, dim, theta.slice("fusion.proj_g.b"));
    let lp = ref_linear(&to64(l), nl, theta.slice("fusion.proj_l.w"), dim, dim, theta.slice("fusion.proj_l.b"));
    let ip = ref_linear(&to64(img), ni, theta.slice("fusion.proj_i.w"), dim, dim, theta.slice("fusion.proj_i.b"));
    let gg = ref_attention(theta, "fusion.att_gg", &gp, ng, &gp, ng, dim, heads);
    let gl = ref_attention(theta, "fusion.att_gl", &gp, ng, &lp, nl, dim, heads);
    let ll = ref_attention(theta, "fusion.att_ll", &lp, nl, &lp, nl, dim, heads);
    let ig = ref_attention(theta, "fusion.att_ig", &gp, ng, &ip, ni, dim, heads);
    let il = ref_attention(theta, "fusion.att_il", &lp, nl, &ip, ni, dim, heads);
    let mut out = Vec::new();
    for block in [gg, gl, ll, ig, il] {
        out.extend(block);
    }
    out
}

fn case_pool_contrastive() -> BlockCase {
    let mut r = rng(9);
    let g = random_vec(&mut r, 5 * 6, 1.0);
    let v = random_vec(&mut r, 4 * 6, 1.0);
    let mut store = ParamStore::new();
    let g_leaf = DiffArray::leaf(g.clone(), &[5, 6]).unwrap();
    let v_leaf = DiffArray::leaf(v.clone(), &[4, 6]).unwrap();
    store.register("closs.g_tokens", g_leaf.clone()).unwrap();
    store.register("closs.v_tokens", v_leaf.clone()).unwrap();
    BlockCase {
        name: "pool_contrastive",
        threshold: BLOCK_THRESHOLD,
        store,
        engine_loss: Box::new(move || {
            // A two-pair batch: pooled halves of each token set.
            let g1 = pool_global(&g_leaf.gather_rows(&[0, 1, 2])?, Pooling::Max)?;
            let g2 = pool_global(&g_leaf.gather_rows(&[3, 4])?, Pooling::Max)?;
            let v1 = pool_global(&v_leaf.gather_rows(&[0, 1])?, Pooling::Max)?;
            let v2 = pool_global(&v_leaf.gather_rows(&[2, 3])?, Pooling::Max)?;
            let batch = ContrastiveBatch::new(
                DiffArray::concat(&[g1, g2], 0)?,
                DiffArray::concat(&[v1, v2], 0)?,
                0.5,
            )?;
            contrastive_loss(&batch)
        }),
        reference_loss: Box::new(move |theta| {
            let gt = theta.slice("closs.g_tokens");
            let vt = theta.slice("closs.v_tokens");
            let g1 = ref_pool_max(&gt[0..18], 3, 6);
            let g2 = ref_pool_max(&gt[18..30], 2, 6);
            let v1 = ref_pool_max(&vt[0..12], 2, 6);
            let v2 = ref_pool_max(&vt[12..24], 2, 6);
            let mut gm = g1;
            gm.extend(g2);
            let mut vm = v1;
            vm.extend(v2);
            ref_contrastive(&gm, &vm, 2, 6, 0.5)
        }),
    }
}

fn case_decoder() -> BlockCase {
    let mut r = rng(10);
    let cfg = DecoderConfig { m_gen: 32, n_c: 32, seed_dim: 4, hidden: 16 };
    let dec = Decoder::new(&mut r, 6, cfg, 0.2).unwrap();
    let fused = random_vec(&mut r, 10 * 6, 1.0);
    let mut store = ParamStore::new();
    dec.register(&mut store).unwrap();
    let weights = random_vec(&mut r, 32 * 3, 1.0);
    let (fused2, w2) = (fused.clone(), weights.clone());
    BlockCase {
        name: "decoder",
        threshold: BLOCK_THRESHOLD,
        store,
        engine_loss: Box::new(move || {
            let f = DiffArray::from_vec(fused2.clone(), &[10, 6])?;
            weighted_loss(&dec.decode(&f)?, &weights)
        }),
        reference_loss: Box::new(move |theta| {
            let fd: Vec<f64> = fused.iter().map(|&v| v as f64).collect();
            let out = ref_decode(theta, &fd, 10, 6, &cfg, 0.2);
            weighted_ref(&out, &w2)
        }),
    }
}

fn case_total_loss_coords() -> BlockCase {
    let mut r = rng(11);
    let pred = random_vec(&mut r, 12 * 3, 0.8);
    let gt_cloud = random_cloud(&mut r, 15);
    let g = random_vec(&mut r, 2 * 6, 1.0);
    let v = random_vec(&mut r, 2 * 6, 1.0);
    let mut store = ParamStore::new();
    let pred_leaf = DiffArray::leaf(pred.clone(), &[12, 3]).unwrap();
    store.register("pred.coords", pred_leaf.clone()).unwrap();
    let gt2 = gt_cloud.clone();
    let (g2, v2) = (g.clone(), v.clone());
    BlockCase {
        name: "total_loss_coords",
        threshold: BLOCK_THRESHOLD,
        store,
        engine_loss: Box::new(move || {
            let batch = ContrastiveBatch::new(
                DiffArray::from_vec(g2.clone(), &[2, 6])?,
                DiffArray::from_vec(v2.clone(), &[2, 6])?,
                0.07,
            )?;
            crate::losses::total_loss(&pred_leaf, &gt2.to_array(), Some(&batch), 0.8, 0.2)
        }),
        reference_loss: Box::new(move |theta| {
            let p = theta.slice("pred.coords");
            let q: Vec<f64> = gt_cloud.points.iter().flatten().map(|&x| x as f64).collect();
            let cd = ref_chamfer(p, 12, &q, 15);
            let gg: Vec<f64> = g.iter().map(|&x| x as f64).collect();
            let vv: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            0.8 * cd + 0.2 * ref_contrastive(&gg, &vv, 2, 6, 0.07)
        }),
    }
}

fn case_full_model() -> BlockCase {
    let mut r = rng(12);
    let cfg = ModelConfig {
        encoder: tiny_encoder_config(),
        decoder: DecoderConfig { m_gen: 8, n_c: 16, seed_dim: 4, hidden: 8 },
        heads: 2,
        residual: false,
        image_backend: ImageBackend::Precomputed,
        image_dim: 6,
        image_size: 8,
        patch: 4,
        image_trainable: true,
        ablation: Ablation::None,
        pooling: Pooling::Max,
    };
    let model = CompletionModel::new(cfg.clone(), 99).unwrap();
    let cloud = random_cloud(&mut r, 40);
    let feats = random_vec(&mut r, 4 * 6, 1.0);
    let gt = random_cloud(&mut r, 20);
    let mut store = ParamStore::new();
    for p in model.params.iter() {
        store.register(p.name.clone(), p.array.clone()).unwrap();
    }
    let cloud2 = cloud.clone();
    let feats2 = feats.clone();
    let gt2 = gt.clone();
    BlockCase {
        name: "full_model",
        threshold: BLOCK_THRESHOLD,
        store,
        engine_loss: Box::new(move || {
            let sample = Sample {
                partial: cloud2.clone(),
                pixels: None,
                features: Some(crate::image::ImageFeatures {
                    tokens: DiffArray::from_vec(feats2.clone(), &[4, 6])?,
                }),
            };
            let out = model.forward(&sample)?;
            let batch = ContrastiveBatch::new(
                out.pooled_global.clone(),
                out.pooled_image.clone().expect("image branch"),
                0.07,
            )?;
            crate::losses::total_loss(&out.completed, &gt2.to_array(), Some(&batch), 0.8, 0.2)
        }),
        reference_loss: Box::new(move |theta| {
            let enc = ref_encode(theta, &cloud, &cfg.encoder);
            let dim = cfg.encoder.latent_dim;
            let to64 = |x: &[f32]| -> Vec<f64> { x.iter().map(|&v| v as f64).collect() };
            let gp = ref_linear(&enc.global, 4, theta.slice("fusion.proj_g.w"), dim, dim, theta.slice("fusion.proj_g.b"));
            let lp = ref_linear(&enc.local, 16, theta.slice("fusion.proj_l.w"), dim, dim, theta.slice("fusion.proj_l.b"));
            let ip = ref_linear(&to64(&feats), 4, theta.slice("fusion.proj_i.w"), dim, dim, theta.slice("fusion.proj_i.b"));
            let pooled_g = ref_pool_max(&gp, 4, dim);
            let pooled_i = ref_pool_max(&ip, 4, dim);
            let heads = cfg.heads;
            let gg = ref_attention(theta, "fusion.att_gg", &gp, 4, &gp, 4, dim, heads);
            let gl = ref_attention(theta, "fusion.att_gl", &gp, 4, &lp, 16, dim, heads);
            let ll = ref_attention(theta, "fusion.att_ll", &lp, 16, &lp, 16, dim, heads);
            let ig = ref_attention(theta, "fusion.att_ig", &gp, 4, &ip, 4, dim, heads);
            let il = ref_attention(theta, "fusion.att_il", &lp, 16, &ip, 4, dim, heads);
            let mut fused = Vec::new();
            let tokens = 3 * 4 + 2 * 16;
            for block in [gg, gl, ll, ig, il] {
                fused.extend(block);
            }
            let decoded = ref_decode(theta, &fused, tokens, dim, &cfg.decoder, cfg.encoder.slope as f64);
            // Merge with the FPS-selected observed points.
            let observed = cfg.decoder.n_c - cfg.decoder.m_gen;
            let keep = farthest_point_sample(&cloud, observed, 0).unwrap();
            let mut completed = decoded;
            for &i in &keep {
                for axis in 0..3 {
                    completed.push(cloud.points[i][axis] as f64);
                }
            }
            let gt64: Vec<f64> = gt.points.iter().flatten().map(|&x| x as f64).collect();
            let cd = ref_chamfer(&completed, cfg.decoder.n_c, &gt64, gt.len());
            let closs = ref_contrastive(&pooled_g, &pooled_i, 1, dim, 0.07);
            0.8 * cd + 0.2 * closs
        }),
    }
}

// ── Isolated op cases ────────────────────────────────────────────────
//
// Each case registers leaf arrays in its store and captures clones of the
// same handles (shared storage) in the engine closure.

fn op_cases() -> Vec<BlockCase> {
    let mut r = rng(100);
    let mut cases = Vec::new();

    // matmul: grad to both factors.
    {
        let a = DiffArray::leaf(random_vec(&mut r, 12, 1.0), &[3, 4]).unwrap();
        let b = DiffArray::leaf(random_vec(&mut r, 8, 1.0), &[4, 2]).unwrap();
        let w = random_vec(&mut r, 6, 1.0);
        let mut store = ParamStore::new();
        store.register("a", a.clone()).unwrap();
        store.register("b", b.clone()).unwrap();
        let w2 = w.clone();
        cases.push(BlockCase {
            name: "op_matmul",
            threshold: OP_THRESHOLD,
            store,
            engine_loss: Box::new(move || weighted_loss(&a.matmul(&b)?, &w)),
            reference_loss: Box::new(move |theta| {
                let a = theta.slice("a");
                let b = theta.slice("b");
                let mut out = vec![0.0f64; 6];
                for i in 0..3 {
                    for j in 0..2 {
                        for k in 0..4 {
                            out[i * 2 + j] += a[i * 4 + k] * b[k * 2 + j];
                        }
                    }
                }
                weighted_ref(&out, &w2)
            }),
        });
    }

    // softmax over rows (Jacobian-vector check).
    {
        let x = DiffArray::leaf(random_vec(&mut r, 20, 2.0), &[4, 5]).unwrap();
        let w = random_vec(&mut r, 20, 1.0);
        let mut store = ParamStore::new();
        store.register("x", x.clone()).unwrap();
        let w2 = w.clone();
        cases.push(BlockCase {
            name: "op_softmax_rows",
            threshold: OP_THRESHOLD,
            store,
            engine_loss: Box::new(move || weighted_loss(&x.softmax_rows()?, &w)),
            reference_loss: Box::new(move |theta| {
                let mut x = theta.slice("x").to_vec();
                ref_softmax_rows(&mut x, 4, 5);
                weighted_ref(&x, &w2)
            }),
        });
    }

    // group norm including affine params; group size 4 keeps the
    // normalization away from the two-element degeneracy.
    {
        let x = DiffArray::leaf(random_vec(&mut r, 48, 1.5), &[6, 8]).unwrap();
        let scale = DiffArray::leaf(random_vec(&mut r, 8, 1.0), &[8]).unwrap();
        let shift = DiffArray::leaf(random_vec(&mut r, 8, 1.0), &[8]).unwrap();
        let w = random_vec(&mut r, 48, 1.0);
        let mut store = ParamStore::new();
        store.register("x", x.clone()).unwrap();
        store.register("scale", scale.clone()).unwrap();
        store.register("shift", shift.clone()).unwrap();
        let w2 = w.clone();
        cases.push(BlockCase {
            name: "op_group_norm",
            threshold: OP_THRESHOLD,
            store,
            engine_loss: Box::new(move || {
                weighted_loss(&x.group_norm(2, 1e-5, &scale, &shift)?, &w)
            }),
            reference_loss: Box::new(move |theta| {
                let out = ref_group_norm(
                    theta.slice("x"),
                    6,
                    8,
                    2,
                    1e-5,
                    theta.slice("scale"),
                    theta.slice("shift"),
                );
                weighted_ref(&out, &w2)
            }),
        });
    }

    // leaky relu on inputs kept away from the kink.
    {
        let data: Vec<f32> = (0..16)
            .map(|i| {
                let v = (i as f32 * 0.37).sin();
                if v.abs() < 0.05 {
                    v + 0.1
                } else {
                    v
                }
            })
            .collect();
        let x = DiffArray::leaf(data, &[16]).unwrap();
        let w = random_vec(&mut r, 16, 1.0);
        let mut store = ParamStore::new();
        store.register("x", x.clone()).unwrap();
        let w2 = w.clone();
        cases.push(BlockCase {
            name: "op_leaky_relu",
            threshold: OP_THRESHOLD,
            store,
            engine_loss: Box::new(move || weighted_loss(&x.leaky_relu(0.2), &w)),
            reference_loss: Box::new(move |theta| {
                let mut x = theta.slice("x").to_vec();
                ref_leaky(&mut x, 0.2);
                weighted_ref(&x, &w2)
            }),
        });
    }

    // max over neighbors (exhaustive-scan reference).
    {
        let x = DiffArray::leaf(random_vec(&mut r, 6 * 4 * 8, 1.0), &[6, 4, 8]).unwrap();
        let w = random_vec(&mut r, 6 * 8, 1.0);
        let mut store = ParamStore::new();
        store.register("x", x.clone()).unwrap();
        let w2 = w.clone();
        cases.push(BlockCase {
            name: "op_max_over_neighbors",
            threshold: OP_THRESHOLD,
            store,
            engine_loss: Box::new(move || weighted_loss(&x.max_over_neighbors()?, &w)),
            reference_loss: Box::new(move |theta| {
                let out = ref_max_over_k(theta.slice("x"), 6, 4, 8);
                weighted_ref(&out, &w2)
            }),
        });
    }

    // concat splits gradients back to all parts.
    {
        let a = DiffArray::leaf(random_vec(&mut r, 6, 1.0), &[3, 2]).unwrap();
        let b = DiffArray::leaf(random_vec(&mut r, 9, 1.0), &[3, 3]).unwrap();
        let w = random_vec(&mut r, 15, 1.0);
        let mut store = ParamStore::new();
        store.register("a", a.clone()).unwrap();
        store.register("b", b.clone()).unwrap();
        let w2 = w.clone();
        cases.push(BlockCase {
            name: "op_concat",
            threshold: OP_THRESHOLD,
            store,
            engine_loss: Box::new(move || {
                weighted_loss(&DiffArray::concat(&[a.clone(), b.clone()], 1)?, &w)
            }),
            reference_loss: Box::new(move |theta| {
                let a = theta.slice("a");
                let b = theta.slice("b");
                let mut out = Vec::with_capacity(15);
                for i in 0..3 {
                    out.extend_from_slice(&a[i * 2..(i + 1) * 2]);
                    out.extend_from_slice(&b[i * 3..(i + 1) * 3]);
                }
                weighted_ref(&out, &w2)
            }),
        });
    }

    cases
}

fn all_cases() -> Vec<BlockCase> {
    let mut cases = op_cases();
    cases.push(case_pointwise_embed());
    cases.push(case_graph_descriptor());
    cases.push(case_attention_downsample());
    cases.push(case_add_positional());
    cases.push(case_encoder());
    cases.push(case_patch_encode());
    cases.push(case_attention_layer());
    cases.push(case_fusion());
    cases.push(case_pool_contrastive());
    cases.push(case_decoder());
    cases.push(case_total_loss_coords());
    cases.push(case_full_model());
    cases
}

/// Diagnostic: print the worst FD-vs-analytic components of one case.
pub fn debug_dump_case(name: &str, top: usize) {
    let mut cases = all_cases();
    let case = cases.iter_mut().find(|c| c.name == name).expect("case name");
    let loss = (case.engine_loss)().unwrap();
    case.store.zero_grads();
    loss.backward().unwrap();
    let analytic = collect_engine_grads(&case.store);
    let theta0 = Theta::from_store(&case.store);
    let mut eval = |flat: &[f64]| (case.reference_loss)(&theta0.with_flat(flat));
    println!(
        "case {name}: engine loss {} ref loss {}",
        loss.value(),
        eval(&theta0.flat.clone())
    );
    let fds = central_differences(&mut eval, &theta0.flat, usize::MAX);
    let mut rows: Vec<(f64, usize, f64, f64)> = fds
        .iter()
        .map(|&(idx, fd)| (relative_error(fd, analytic[idx]), idx, fd, analytic[idx]))
        .collect();
    rows.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let ranges: Vec<(String, usize, usize)> = {
        let mut v = Vec::new();
        let mut off = 0;
        for p in case.store.iter() {
            v.push((p.name.clone(), off, off + p.array.numel()));
            off += p.array.numel();
        }
        v
    };
    for (rel, idx, fd, an) in rows.into_iter().take(top) {
        let pname = ranges
            .iter()
            .find(|(_, a, b)| idx >= *a && idx < *b)
            .map(|(n, a, _)| format!("{n}[{}]", idx - a))
            .unwrap_or_default();
        println!("  rel {rel:.3e}  fd {fd:+.6e}  analytic {an:+.6e}  at {pname}");
    }
}

/// Run the whole suite. Block order is fixed; every block appears once.
pub fn run(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut cases = all_cases();
    let mut blocks = Vec::with_capacity(cases.len());
    for case in &mut cases {
        blocks.push(run_case(case, opts)?);
    }
    Ok(GradCheckReport { blocks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_random_init_passes() {
        let report = run(&GradCheckOptions::default()).unwrap();
        assert!(report.passed(), "\n{}", report.text());
    }

    #[test]
    fn corrupted_block_is_named() {
        let opts = GradCheckOptions {
            corrupt_block: Some("decoder".into()),
            max_components: Some(50),
        };
        let report = run(&opts).unwrap();
        assert!(!report.passed());
        let failing = report.failing();
        assert_eq!(failing.len(), 1);
        assert_eq!(failing[0].name, "decoder");
    }

    #[test]
    fn report_lists_every_block_once() {
        let opts = GradCheckOptions { corrupt_block: None, max_components: Some(5) };
        let report = run(&opts).unwrap();
        let mut names: Vec<&str> = report.blocks.iter().map(|b| b.name.as_str()).collect();
        let before = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), before);
        for expected in [
            "op_matmul",
            "op_softmax_rows",
            "op_group_norm",
            "encoder",
            "fusion_five_way",
            "decoder",
            "full_model",
        ] {
            assert!(names.contains(&expected), "missing {expected}");
        }
    }
}
