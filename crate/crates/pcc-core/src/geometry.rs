//! Non-learned geometric primitives: kNN graphs, farthest-point sampling,
//! sinusoidal positional encoding, Chamfer distance and F-score.
//!
//! Neighbor search, sampling and the exact metrics accumulate in f64 so
//! orderings and reported values are stable; the differentiable Chamfer
//! path runs on the f32 engine.

use crate::autodiff::DiffArray;
use crate::error::{Error, Result};

/// Ordered set of 3D coordinates in model space.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
    pub id: Option<String>,
}

impl PointCloud {
    pub fn new(points: Vec<[f32; 3]>) -> Result<PointCloud> {
        if points.is_empty() {
            return Err(Error::Contract("point cloud must contain at least one point".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point cloud contains non-finite coordinates".into()));
        }
        Ok(PointCloud { points, id: None })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = Some(id.into());
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Flattened `[N×3]` constant array.
    pub fn to_array(&self) -> DiffArray {
        let data: Vec<f32> = self.points.iter().flatten().copied().collect();
        DiffArray::from_vec(data, &[self.points.len(), 3]).expect("cloud shape")
    }

    /// Rebuild a cloud from an `[N×3]` array.
    pub fn from_array(arr: &DiffArray) -> Result<PointCloud> {
        match arr.shape() {
            [n, 3] => {
                let d = arr.data();
                let points = (0..*n).map(|i| [d[i * 3], d[i * 3 + 1], d[i * 3 + 2]]).collect();
                drop(d);
                PointCloud::new(points)
            }
            other => Err(Error::Contract(format!("expected [N×3] array, got {other:?}"))),
        }
    }
}

fn dist2(a: [f32; 3], b: [f32; 3]) -> f64 {
    let dx = a[0] as f64 - b[0] as f64;
    let dy = a[1] as f64 - b[1] as f64;
    let dz = a[2] as f64 - b[2] as f64;
    dx * dx + dy * dy + dz * dz
}

/// K nearest neighbors per point, self excluded. Rows are sorted by
/// ascending distance, ties by ascending index.
#[derive(Clone, Debug)]
pub struct NeighborGraph {
    pub k: usize,
    /// `N×K` neighbor indices, row-major.
    pub indices: Vec<usize>,
    /// `N×K×3` relative positions `p_i − p_j` (center minus neighbor).
    pub offsets: Vec<f32>,
}

impl NeighborGraph {
    pub fn neighbor_row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }
}

/// Exact Euclidean kNN by exhaustive scan.
pub fn knn_graph(cloud: &PointCloud, k: usize) -> Result<NeighborGraph> {
    let n = cloud.len();
    if k >= n {
        return Err(Error::Config(format!(
            "kNN needs K < N, got K={k} with {n} points"
        )));
    }
    if k == 0 {
        return Err(Error::Config("kNN needs K >= 1".into()));
    }
    let mut indices = Vec::with_capacity(n * k);
    let mut offsets = Vec::with_capacity(n * k * 3);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        scratch.clear();
        for j in 0..n {
            if j != i {
                scratch.push((dist2(cloud.points[i], cloud.points[j]), j));
            }
        }
        scratch.select_nth_unstable_by(k - 1, |a, b| {
            a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
        });
        let head = &mut scratch[..k];
        head.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, j) in head.iter() {
            indices.push(j);
            for axis in 0..3 {
                offsets.push(cloud.points[i][axis] - cloud.points[j][axis]);
            }
        }
    }
    Ok(NeighborGraph { k, indices, offsets })
}

/// Greedy max-min selection of M indices. The first element is `start`;
/// ties pick the lowest index.
pub fn farthest_point_sample(cloud: &PointCloud, m: usize, start: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if m == 0 || m > n {
        return Err(Error::Config(format!(
            "FPS needs 1 <= M <= N, got M={m} with {n} points"
        )));
    }
    if start >= n {
        return Err(Error::Config(format!(
            "FPS start index {start} out of range for {n} points"
        )));
    }
    let mut selected = Vec::with_capacity(m);
    selected.push(start);
    let mut min_d2: Vec<f64> = (0..n).map(|j| dist2(cloud.points[start], cloud.points[j])).collect();
    for _ in 1..m {
        let mut best = 0usize;
        let mut best_d = f64::NEG_INFINITY;
        for (j, &d) in min_d2.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = j;
            }
        }
        selected.push(best);
        for (j, slot) in min_d2.iter_mut().enumerate() {
            let d = dist2(cloud.points[best], cloud.points[j]);
            if d < *slot {
                *slot = d;
            }
        }
    }
    Ok(selected)
}

/// Sinusoidal encoding: per coordinate `c` and band `b` in `0..bands`,
/// the pair `[sin(2^b·π·c), cos(2^b·π·c)]`, giving `3·2·bands` channels.
pub fn positional_encoding(coords: &[[f32; 3]], bands: usize) -> DiffArray {
    debug_assert!(bands >= 1);
    let width = 3 * 2 * bands;
    let mut data = Vec::with_capacity(coords.len() * width);
    for p in coords {
        for &c in p {
            for b in 0..bands {
                let arg = (2.0f64.powi(b as i32) * std::f64::consts::PI * c as f64) as f32;
                data.push(arg.sin());
                data.push(arg.cos());
            }
        }
    }
    DiffArray::from_vec(data, &[coords.len(), width]).expect("encoding shape")
}

fn nearest_indices(from: &[[f32; 3]], to: &[[f32; 3]]) -> Vec<usize> {
    from.iter()
        .map(|&p| {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (j, &q) in to.iter().enumerate() {
                let d = dist2(p, q);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Exact L2 Chamfer distance: mean squared nearest-neighbor distance in
/// both directions, summed (no halving). f64 accumulation.
pub fn chamfer_l2_exact(p: &PointCloud, q: &PointCloud) -> f64 {
    let term = |a: &[[f32; 3]], b: &[[f32; 3]]| -> f64 {
        let mut total = 0.0f64;
        for &x in a {
            let mut best = f64::INFINITY;
            for &y in b {
                let d = dist2(x, y);
                if d < best {
                    best = d;
                }
            }
            total += best;
        }
        total / a.len() as f64
    };
    term(&p.points, &q.points) + term(&q.points, &p.points)
}

/// Differentiable L2 Chamfer distance between `[N×3]` arrays. Nearest
/// neighbors are matched exactly; the gradient flows through the
/// coordinates of the matched pairs.
pub fn chamfer_l2(p: &DiffArray, q: &DiffArray) -> Result<DiffArray> {
    let pc = PointCloud::from_array(p)?;
    let qc = PointCloud::from_array(q)?;
    let p_to_q = nearest_indices(&pc.points, &qc.points);
    let q_to_p = nearest_indices(&qc.points, &pc.points);
    let term = |a: &DiffArray, b: &DiffArray, nn: &[usize]| -> Result<DiffArray> {
        let matched = b.gather_rows(nn)?;
        let diff = a.sub(&matched)?;
        Ok(diff.mul(&diff)?.sum().scale(1.0 / nn.len() as f32))
    };
    term(p, q, &p_to_q)?.add(&term(q, p, &q_to_p)?)
}

/// F-score at unsquared Euclidean threshold `d`: harmonic mean of the
/// fraction of P within `d` of Q and the symmetric fraction; 0 when both
/// fractions are 0.
pub fn f_score(p: &PointCloud, q: &PointCloud, d: f64) -> Result<f64> {
    if d <= 0.0 {
        return Err(Error::Config(format!("F-score threshold must be positive, got {d}")));
    }
    let frac_within = |a: &[[f32; 3]], b: &[[f32; 3]]| -> f64 {
        let hits = a
            .iter()
            .filter(|&&x| b.iter().any(|&y| dist2(x, y).sqrt() <= d))
            .count();
        hits as f64 / a.len() as f64
    };
    let prec = frac_within(&p.points, &q.points);
    let rec = frac_within(&q.points, &p.points);
    if prec + rec == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * prec * rec / (prec + rec))
}
