//! Operation kernels and their backward closures.

use super::DiffArray;
use crate::error::{Error, Result};

fn sgemm_rm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    ta: bool,
    b: &[f32],
    tb: bool,
    out: &mut [f32],
) {
    // Row-major matmul with optional transposed views, out = A·B.
    // When `ta` is set, `a` holds the k×m matrix whose transpose is used.
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl DiffArray {
    fn dims2(&self, context: &str) -> Result<(usize, usize)> {
        match self.shape() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Contract(format!(
                "{context}: expected a 2-D array, got shape {other:?}"
            ))),
        }
    }

    /// Standard matrix product `[M×K]·[K×N] -> [M×N]`.
    pub fn matmul(&self, rhs: &DiffArray) -> Result<DiffArray> {
        let (m, k) = self.dims2("matmul lhs")?;
        let (k2, n) = rhs.dims2("matmul rhs")?;
        if k != k2 {
            return Err(Error::dimension("matmul inner extents", self.shape(), rhs.shape()));
        }
        let mut out = vec![0.0f32; m * n];
        sgemm_rm(m, k, n, &self.data(), false, &rhs.data(), false, &mut out);
        let (a, b) = (self.clone(), rhs.clone());
        Ok(DiffArray::from_op(
            out,
            vec![m, n],
            vec![self.clone(), rhs.clone()],
            Box::new(move |dout| {
                if a.requires_grad() {
                    let mut da = vec![0.0f32; m * k];
                    // dA = dOut · Bᵀ
                    sgemm_rm(m, n, k, dout, false, &b.data(), true, &mut da);
                    a.accum_grad(&da);
                }
                if b.requires_grad() {
                    let mut db = vec![0.0f32; k * n];
                    // dB = Aᵀ · dOut
                    sgemm_rm(k, m, n, &a.data(), true, dout, false, &mut db);
                    b.accum_grad(&db);
                }
            }),
        ))
    }

    /// 2-D transpose.
    pub fn transpose2(&self) -> Result<DiffArray> {
        let (r, c) = self.dims2("transpose")?;
        let x = self.data();
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        drop(x);
        let src = self.clone();
        Ok(DiffArray::from_op(
            out,
            vec![c, r],
            vec![self.clone()],
            Box::new(move |dout| {
                let mut dx = vec![0.0f32; r * c];
                for j in 0..c {
                    for i in 0..r {
                        dx[i * c + j] = dout[j * r + i];
                    }
                }
                src.accum_grad(&dx);
            }),
        ))
    }

    /// Same data, new shape. Gradient passes through unchanged.
    pub fn reshape(&self, shape: &[usize]) -> Result<DiffArray> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::dimension("reshape element count", self.shape(), shape));
        }
        let src = self.clone();
        Ok(DiffArray::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(move |dout| src.accum_grad(dout)),
        ))
    }

    /// Channel- or token-wise concatenation; slices are recoverable and the
    /// gradient splits back to the parts.
    pub fn concat(parts: &[DiffArray], axis: usize) -> Result<DiffArray> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero parts".into()));
        }
        let rank = parts[0].shape().len();
        if axis >= rank {
            return Err(Error::Contract(format!(
                "concat axis {axis} out of range for rank {rank}"
            )));
        }
        for p in parts {
            if p.shape().len() != rank {
                return Err(Error::dimension("concat rank", parts[0].shape(), p.shape()));
            }
            for (d, (&a, &b)) in parts[0].shape().iter().zip(p.shape()).enumerate() {
                if d != axis && a != b {
                    return Err(Error::dimension(
                        format!("concat non-axis extent {d}"),
                        parts[0].shape(),
                        p.shape(),
                    ));
                }
            }
        }
        let mut shape = parts[0].shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let total: usize = shape.iter().product();

        let mut out = Vec::with_capacity(total);
        let chunk_lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        for o in 0..outer {
            for (p, &chunk) in parts.iter().zip(&chunk_lens) {
                let d = p.data();
                out.extend_from_slice(&d[o * chunk..(o + 1) * chunk]);
            }
        }
        let captured: Vec<DiffArray> = parts.to_vec();
        let row: usize = chunk_lens.iter().sum();
        Ok(DiffArray::from_op(
            out,
            shape,
            parts.to_vec(),
            Box::new(move |dout| {
                let mut offset = 0usize;
                for (p, &chunk) in captured.iter().zip(&chunk_lens) {
                    if p.requires_grad() {
                        let mut dp = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let start = o * row + offset;
                            dp.extend_from_slice(&dout[start..start + chunk]);
                        }
                        p.accum_grad(&dp);
                    }
                    offset += chunk;
                }
            }),
        ))
    }

    /// Column slice of a 2-D array: `[M×C] -> [M×len]`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<DiffArray> {
        let (r, c) = self.dims2("slice_cols")?;
        if start + len > c {
            return Err(Error::Contract(format!(
                "slice_cols [{start}, {start}+{len}) out of range for {c} columns"
            )));
        }
        let x = self.data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&x[i * c + start..i * c + start + len]);
        }
        drop(x);
        let src = self.clone();
        Ok(DiffArray::from_op(
            out,
            vec![r, len],
            vec![self.clone()],
            Box::new(move |dout| {
                let mut dx = vec![0.0f32; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len]
                        .copy_from_slice(&dout[i * len..(i + 1) * len]);
                }
                src.accum_grad(&dx);
            }),
        ))
    }

    /// Row selection of a 2-D array; rows may repeat. Gradient scatter-adds.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<DiffArray> {
        let (r, c) = self.dims2("gather_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::Contract(format!(
                "gather_rows index {bad} out of range for {r} rows"
            )));
        }
        let x = self.data();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&x[i * c..(i + 1) * c]);
        }
        drop(x);
        let src = self.clone();
        let idx: Vec<usize> = indices.to_vec();
        Ok(DiffArray::from_op(
            out,
            vec![indices.len(), c],
            vec![self.clone()],
            Box::new(move |dout| {
                let mut dx = vec![0.0f32; r * c];
                for (m, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[i * c + j] += dout[m * c + j];
                    }
                }
                src.accum_grad(&dx);
            }),
        ))
    }

    /// Diagonal of a square matrix as a `[M]` vector.
    pub fn diag_part(&self) -> Result<DiffArray> {
        let (r, c) = self.dims2("diag_part")?;
        if r != c {
            return Err(Error::dimension("diag_part square", self.shape(), self.shape()));
        }
        let x = self.data();
        let out: Vec<f32> = (0..r).map(|i| x[i * c + i]).collect();
        drop(x);
        let src = self.clone();
        Ok(DiffArray::from_op(
            out,
            vec![r],
            vec![self.clone()],
            Box::new(move |dout| {
                let mut dx = vec![0.0f32; r * c];
                for i in 0..r {
                    dx[i * c + i] = dout[i];
                }
                src.accum_grad(&dx);
            }),
        ))
    }

    fn binary_same_shape(
        &self,
        rhs: &DiffArray,
        context: &str,
        fwd: impl Fn(f32, f32) -> f32,
        bwd: impl Fn(&DiffArray, &DiffArray, &[f32]) + 'static,
    ) -> Result<DiffArray> {
        if self.shape() != rhs.shape() {
            return Err(Error::dimension(context, self.shape(), rhs.shape()));
        }
        let out: Vec<f32> = self
            .data()
            .iter()
            .zip(rhs.data().iter())
            .map(|(&a, &b)| fwd(a, b))
            .collect();
        let (a, b) = (self.clone(), rhs.clone());
        Ok(DiffArray::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), rhs.clone()],
            Box::new(move |dout| bwd(&a, &b, dout)),
        ))
    }

    pub fn add(&self, rhs: &DiffArray) -> Result<DiffArray> {
        self.binary_same_shape(rhs, "add", |a, b| a + b, |a, b, dout| {
            if a.requires_grad() {
                a.accum_grad(dout);
            }
            if b.requires_grad() {
                b.accum_grad(dout);
            }
        })
    }

    pub fn sub(&self, rhs: &DiffArray) -> Result<DiffArray> {
        self.binary_same_shape(rhs, "sub", |a, b| a - b, |a, b, dout| {
            if a.requires_grad() {
                a.accum_grad(dout);
            }
            if b.requires_grad() {
                let neg: Vec<f32> = dout.iter().map(|&g| -g).collect();
                b.accum_grad(&neg);
            }
        })
    }

    /// Element-wise product.
    pub fn mul(&self, rhs: &DiffArray) -> Result<DiffArray> {
        self.binary_same_shape(rhs, "mul", |a, b| a * b, |a, b, dout| {
            if a.requires_grad() {
                let da: Vec<f32> = dout.iter().zip(b.data().iter()).map(|(&g, &v)| g * v).collect();
                a.accum_grad(&da);
            }
            if b.requires_grad() {
                let db: Vec<f32> = dout.iter().zip(a.data().iter()).map(|(&g, &v)| g * v).collect();
                b.accum_grad(&db);
            }
        })
    }

    pub fn scale(&self, c: f32) -> DiffArray {
        let out: Vec<f32> = self.data().iter().map(|&v| v * c).collect();
        let src = self.clone();
        DiffArray::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |dout| {
                let dx: Vec<f32> = dout.iter().map(|&g| g * c).collect();
                src.accum_grad(&dx);
            }),
        )
    }

    /// Broadcast add of a `[C]` bias to every row of `[M×C]`.
    pub fn add_row_bias(&self, bias: &DiffArray) -> Result<DiffArray> {
        let (m, c) = self.dims2("add_row_bias")?;
        if bias.numel() != c {
            return Err(Error::dimension("add_row_bias width", self.shape(), bias.shape()));
        }
        let x = self.data();
        let b = bias.data();
        let mut out = Vec::with_capacity(m * c);
        for i in 0..m {
            for j in 0..c {
                out.push(x[i * c + j] + b[j]);
            }
        }
        drop(x);
        drop(b);
        let (src, bsrc) = (self.clone(), bias.clone());
        Ok(DiffArray::from_op(
            out,
            vec![m, c],
            vec![self.clone(), bias.clone()],
            Box::new(move |dout| {
                if src.requires_grad() {
                    src.accum_grad(dout);
                }
                if bsrc.requires_grad() {
                    let mut db = vec![0.0f32; c];
                    for i in 0..m {
                        for j in 0..c {
                            db[j] += dout[i * c + j];
                        }
                    }
                    bsrc.accum_grad(&db);
                }
            }),
        ))
    }

    /// Multiply each row of `[M×C]` by a per-row factor (`[M]` or `[M×1]`).
    pub fn scale_rows(&self, factors: &DiffArray) -> Result<DiffArray> {
        let (m, c) = self.dims2("scale_rows")?;
        if factors.numel() != m {
            return Err(Error::dimension("scale_rows factor count", self.shape(), factors.shape()));
        }
        let x = self.data();
        let s = factors.data();
        let mut out = Vec::with_capacity(m * c);
        for i in 0..m {
            for j in 0..c {
                out.push(x[i * c + j] * s[i]);
            }
        }
        drop(x);
        drop(s);
        let (src, fsrc) = (self.clone(), factors.clone());
        Ok(DiffArray::from_op(
            out,
            vec![m, c],
            vec![self.clone(), factors.clone()],
            Box::new(move |dout| {
                if src.requires_grad() {
                    let s = fsrc.data();
                    let mut dx = Vec::with_capacity(m * c);
                    for i in 0..m {
                        for j in 0..c {
                            dx.push(dout[i * c + j] * s[i]);
                        }
                    }
                    drop(s);
                    src.accum_grad(&dx);
                }
                if fsrc.requires_grad() {
                    let x = src.data();
                    let mut ds = vec![0.0f32; m];
                    for i in 0..m {
                        for j in 0..c {
                            ds[i] += dout[i * c + j] * x[i * c + j];
                        }
                    }
                    drop(x);
                    fsrc.accum_grad(&ds);
                }
            }),
        ))
    }

    /// Repeat a `[1×C]` row M times.
    pub fn tile_rows(&self, m: usize) -> Result<DiffArray> {
        let (one, c) = self.dims2("tile_rows")?;
        if one != 1 {
            return Err(Error::Contract(format!(
                "tile_rows expects a single row, got shape {:?}",
                self.shape()
            )));
        }
        let x = self.data();
        let mut out = Vec::with_capacity(m * c);
        for _ in 0..m {
            out.extend_from_slice(&x);
        }
        drop(x);
        let src = self.clone();
        Ok(DiffArray::from_op(
            out,
            vec![m, c],
            vec![self.clone()],
            Box::new(move |dout| {
                let mut dx = vec![0.0f32; c];
                for i in 0..m {
                    for j in 0..c {
                        dx[j] += dout[i * c + j];
                    }
                }
                src.accum_grad(&dx);
            }),
        ))
    }

    /// Per-row sum: `[M×C] -> [M×1]`.
    pub fn row_sum(&self) -> Result<DiffArray> {
        let (m, c) = self.dims2("row_sum")?;
        let x = self.data();
        let out: Vec<f32> = (0..m).map(|i| x[i * c..(i + 1) * c].iter().sum()).collect();
        drop(x);
        let src = self.clone();
        Ok(DiffArray::from_op(
            out,
            vec![m, 1],
            vec![self.clone()],
            Box::new(move |dout| {
                let mut dx = Vec::with_capacity(m * c);
                for i in 0..m {
                    dx.extend(std::iter::repeat(dout[i]).take(c));
                }
                src.accum_grad(&dx);
            }),
        ))
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum(&self) -> DiffArray {
        let total: f32 = self.data().iter().sum();
        let n = self.numel();
        let src = self.clone();
        DiffArray::from_op(
            vec![total],
            Vec::new(),
            vec![self.clone()],
            Box::new(move |dout| {
                let dx = vec![dout[0]; n];
                src.accum_grad(&dx);
            }),
        )
    }

    /// Mean of all elements, as a rank-0 scalar.
    pub fn mean(&self) -> DiffArray {
        let n = self.numel();
        self.sum().scale(1.0 / n as f32)
    }

    fn unary(
        &self,
        fwd: impl Fn(f32) -> f32,
        make_bwd: impl Fn(Vec<f32>, Vec<f32>) -> Box<dyn Fn(&[f32]) -> Vec<f32>>,
    ) -> DiffArray {
        let x = self.to_vec();
        let out: Vec<f32> = x.iter().map(|&v| fwd(v)).collect();
        let local = make_bwd(x, out.clone());
        let src = self.clone();
        DiffArray::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |dout| {
                let dx = local(dout);
                src.accum_grad(&dx);
            }),
        )
    }

    /// `x if x >= 0 else slope·x`; the gradient at the kink uses the x >= 0 branch.
    pub fn leaky_relu(&self, slope: f32) -> DiffArray {
        self.unary(
            |v| if v >= 0.0 { v } else { slope * v },
            |x, _| {
                Box::new(move |dout| {
                    dout.iter()
                        .zip(&x)
                        .map(|(&g, &v)| if v >= 0.0 { g } else { slope * g })
                        .collect()
                })
            },
        )
    }

    pub fn sigmoid(&self) -> DiffArray {
        self.unary(
            |v| 1.0 / (1.0 + (-v).exp()),
            |_, y| {
                Box::new(move |dout| {
                    dout.iter().zip(&y).map(|(&g, &s)| g * s * (1.0 - s)).collect()
                })
            },
        )
    }

    pub fn sqrt(&self) -> DiffArray {
        self.unary(
            |v| v.sqrt(),
            |_, y| {
                Box::new(move |dout| {
                    dout.iter().zip(&y).map(|(&g, &s)| g * 0.5 / s).collect()
                })
            },
        )
    }

    /// Element-wise reciprocal.
    pub fn recip(&self) -> DiffArray {
        self.unary(
            |v| 1.0 / v,
            |_, y| {
                Box::new(move |dout| {
                    dout.iter().zip(&y).map(|(&g, &r)| -g * r * r).collect()
                })
            },
        )
    }

    /// Row-wise softmax of `[M×N]`, stabilized by row-max subtraction.
    pub fn softmax_rows(&self) -> Result<DiffArray> {
        let (m, n) = self.dims2("softmax_rows")?;
        let x = self.data();
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("softmax_rows input contains NaN".into()));
        }
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f32;
            for j in 0..n {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                denom += e;
            }
            for j in 0..n {
                out[i * n + j] /= denom;
            }
        }
        drop(x);
        let saved = out.clone();
        let src = self.clone();
        Ok(DiffArray::from_op(
            out,
            vec![m, n],
            vec![self.clone()],
            Box::new(move |dout| {
                let mut dx = vec![0.0f32; m * n];
                for i in 0..m {
                    let s = &saved[i * n..(i + 1) * n];
                    let g = &dout[i * n..(i + 1) * n];
                    let dot: f32 = s.iter().zip(g).map(|(&sv, &gv)| sv * gv).sum();
                    for j in 0..n {
                        dx[i * n + j] = s[j] * (g[j] - dot);
                    }
                }
                src.accum_grad(&dx);
            }),
        ))
    }

    /// Row-wise log-softmax of `[M×N]`.
    pub fn log_softmax_rows(&self) -> Result<DiffArray> {
        let (m, n) = self.dims2("log_softmax_rows")?;
        let x = self.data();
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("log_softmax_rows input contains NaN".into()));
        }
        let mut out = vec![0.0f32; m * n];
        let mut soft = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f32;
            for j in 0..n {
                denom += (row[j] - max).exp();
            }
            let lse = max + denom.ln();
            for j in 0..n {
                out[i * n + j] = row[j] - lse;
                soft[i * n + j] = (row[j] - lse).exp();
            }
        }
        drop(x);
        let src = self.clone();
        Ok(DiffArray::from_op(
            out,
            vec![m, n],
            vec![self.clone()],
            Box::new(move |dout| {
                let mut dx = vec![0.0f32; m * n];
                for i in 0..m {
                    let g = &dout[i * n..(i + 1) * n];
                    let gsum: f32 = g.iter().sum();
                    for j in 0..n {
                        dx[i * n + j] = g[j] - soft[i * n + j] * gsum;
                    }
                }
                src.accum_grad(&dx);
            }),
        ))
    }

    /// Per-(point, channel) maximum over the neighbor axis: `[N×K×C] -> [N×C]`.
    /// The gradient routes to argmax entries only; ties pick the lowest
    /// neighbor index.
    pub fn max_over_neighbors(&self) -> Result<DiffArray> {
        let (n, k, c) = match self.shape() {
            [n, k, c] => (*n, *k, *c),
            other => {
                return Err(Error::Contract(format!(
                    "max_over_neighbors expects [N×K×C], got {other:?}"
                )))
            }
        };
        if k == 0 {
            return Err(Error::Contract("max over an empty neighborhood".into()));
        }
        let x = self.data();
        let mut out = vec![0.0f32; n * c];
        let mut arg = vec![0u32; n * c];
        for i in 0..n {
            for j in 0..c {
                let mut best = x[i * k * c + j];
                let mut best_k = 0u32;
                for kk in 1..k {
                    let v = x[(i * k + kk) * c + j];
                    if v > best {
                        best = v;
                        best_k = kk as u32;
                    }
                }
                out[i * c + j] = best;
                arg[i * c + j] = best_k;
            }
        }
        drop(x);
        let src = self.clone();
        Ok(DiffArray::from_op(
            out,
            vec![n, c],
            vec![self.clone()],
            Box::new(move |dout| {
                let mut dx = vec![0.0f32; n * k * c];
                for i in 0..n {
                    for j in 0..c {
                        let kk = arg[i * c + j] as usize;
                        dx[(i * k + kk) * c + j] += dout[i * c + j];
                    }
                }
                src.accum_grad(&dx);
            }),
        ))
    }

    /// Group normalization over `[N×C]` with a per-channel affine map.
    /// Each sample's channel groups are normalized to mean 0 / variance 1
    /// (biased variance) before scale and shift.
    pub fn group_norm(
        &self,
        groups: usize,
        eps: f32,
        scale: &DiffArray,
        shift: &DiffArray,
    ) -> Result<DiffArray> {
        let (n, c) = self.dims2("group_norm")?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!(
                "group_norm: {c} channels not divisible by {groups} groups"
            )));
        }
        if scale.numel() != c || shift.numel() != c {
            return Err(Error::dimension("group_norm affine width", &[c], scale.shape()));
        }
        let gsize = c / groups;
        let x = self.data();
        let sc = scale.data();
        let sh = shift.data();
        let mut normed = vec![0.0f32; n * c]; // saved pre-affine values
        let mut inv_std = vec![0.0f32; n * groups];
        let mut out = vec![0.0f32; n * c];
        for i in 0..n {
            for g in 0..groups {
                let base = i * c + g * gsize;
                let xs = &x[base..base + gsize];
                let mu: f32 = xs.iter().sum::<f32>() / gsize as f32;
                let var: f32 = xs.iter().map(|&v| (v - mu) * (v - mu)).sum::<f32>() / gsize as f32;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[i * groups + g] = inv;
                for (off, &v) in xs.iter().enumerate() {
                    let y = (v - mu) * inv;
                    normed[base + off] = y;
                    out[base + off] = y * sc[g * gsize + off] + sh[g * gsize + off];
                }
            }
        }
        drop(x);
        drop(sc);
        drop(sh);
        let (src, scale_p, shift_p) = (self.clone(), scale.clone(), shift.clone());
        Ok(DiffArray::from_op(
            out,
            vec![n, c],
            vec![self.clone(), scale.clone(), shift.clone()],
            Box::new(move |dout| {
                if scale_p.requires_grad() {
                    let mut dsc = vec![0.0f32; c];
                    for i in 0..n {
                        for j in 0..c {
                            dsc[j] += dout[i * c + j] * normed[i * c + j];
                        }
                    }
                    scale_p.accum_grad(&dsc);
                }
                if shift_p.requires_grad() {
                    let mut dsh = vec![0.0f32; c];
                    for i in 0..n {
                        for j in 0..c {
                            dsh[j] += dout[i * c + j];
                        }
                    }
                    shift_p.accum_grad(&dsh);
                }
                if src.requires_grad() {
                    let sc = scale_p.data();
                    let mut dx = vec![0.0f32; n * c];
                    for i in 0..n {
                        for g in 0..groups {
                            let base = i * c + g * gsize;
                            let inv = inv_std[i * groups + g];
                            // dy = dout ⊙ scale within the group
                            let mut dy_mean = 0.0f32;
                            let mut dyy_mean = 0.0f32;
                            for off in 0..gsize {
                                let dy = dout[base + off] * sc[g * gsize + off];
                                dy_mean += dy;
                                dyy_mean += dy * normed[base + off];
                            }
                            dy_mean /= gsize as f32;
                            dyy_mean /= gsize as f32;
                            for off in 0..gsize {
                                let dy = dout[base + off] * sc[g * gsize + off];
                                dx[base + off] =
                                    inv * (dy - dy_mean - normed[base + off] * dyy_mean);
                            }
                        }
                    }
                    drop(sc);
                    src.accum_grad(&dx);
                }
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(data: Vec<f32>, shape: &[usize]) -> DiffArray {
        DiffArray::from_vec(data, shape).unwrap()
    }

    #[test]
    fn matmul_identity_passes_through() {
        let eye = arr(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let x = arr(vec![3.0, -1.0, 0.5, 7.0], &[2, 2]);
        assert_eq!(eye.matmul(&x).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn matmul_hand_sum() {
        let a = arr(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = arr(vec![1.0, 1.0], &[2, 1]);
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_extents() {
        let a = arr(vec![0.0; 6], &[2, 3]);
        let b = arr(vec![0.0; 8], &[4, 2]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn softmax_symmetric_row_is_uniform() {
        let x = arr(vec![0.0, 0.0, 0.0], &[1, 3]);
        let s = x.softmax_rows().unwrap().to_vec();
        for v in s {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_survives_large_magnitudes() {
        let x = arr(vec![1000.0, 0.0], &[1, 2]);
        let s = x.softmax_rows().unwrap().to_vec();
        assert!((s[0] - 1.0).abs() < 1e-6);
        assert!(s[1].abs() < 1e-6);
        // Rows at magnitude 1e4 still sum to one.
        let big = arr(vec![1.0e4, -1.0e4, 5.0e3, 0.0], &[2, 2]);
        for row in big.softmax_rows().unwrap().to_vec().chunks(2) {
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = arr(vec![f32::NAN, 0.0], &[1, 2]);
        assert!(x.softmax_rows().is_err());
        assert!(arr(vec![f32::NAN, 0.0], &[1, 2]).log_softmax_rows().is_err());
    }

    #[test]
    fn leaky_relu_values_and_kink_gradient() {
        let x = DiffArray::leaf(vec![2.0, -1.0, -3.0], &[3]).unwrap();
        let y = x.leaky_relu(0.2);
        let v = y.to_vec();
        assert_eq!(v[0], 2.0);
        assert!((v[1] + 0.2).abs() < 1e-7);
        y.sum().backward().unwrap();
        let g = x.grad().unwrap();
        assert_eq!(g[0], 1.0);
        // Gradient at x = −3 is the slope.
        assert!((g[2] - 0.2).abs() < 1e-7);
    }

    #[test]
    fn group_norm_constant_input_clamps_to_zero() {
        let x = arr(vec![5.0; 8], &[2, 4]);
        let scale = arr(vec![1.0; 4], &[4]);
        let shift = arr(vec![0.0; 4], &[4]);
        let out = x.group_norm(2, 1e-5, &scale, &shift).unwrap().to_vec();
        assert!(out.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn group_norm_zero_scale_returns_shift() {
        let x = arr(vec![0.1, 0.9, -0.4, 0.2], &[1, 4]);
        let scale = arr(vec![0.0; 4], &[4]);
        let shift = arr(vec![7.0; 4], &[4]);
        let out = x.group_norm(2, 1e-5, &scale, &shift).unwrap().to_vec();
        assert!(out.iter().all(|v| (v - 7.0).abs() < 1e-7));
    }

    #[test]
    fn group_norm_statistics_pre_affine() {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha12Rng::seed_from_u64(9);
        let (n, c, groups) = (8usize, 16usize, 4usize);
        let gsize = c / groups;
        let x = arr((0..n * c).map(|_| r.gen_range(-2.0..2.0)).collect(), &[n, c]);
        let scale = arr(vec![1.0; c], &[c]);
        let shift = arr(vec![0.0; c], &[c]);
        let out = x.group_norm(groups, 1e-5, &scale, &shift).unwrap().to_vec();
        for i in 0..n {
            for g in 0..groups {
                let vals = &out[i * c + g * gsize..i * c + (g + 1) * gsize];
                let mu: f32 = vals.iter().sum::<f32>() / gsize as f32;
                let var: f32 = vals.iter().map(|&v| (v - mu) * (v - mu)).sum::<f32>() / gsize as f32;
                assert!(mu.abs() < 1e-5, "group mean {mu}");
                assert!((var - 1.0).abs() < 1e-3, "group variance {var}");
            }
        }
    }

    #[test]
    fn group_norm_rejects_indivisible_groups() {
        let x = arr(vec![0.0; 6], &[1, 6]);
        let affine = arr(vec![1.0; 6], &[6]);
        assert!(x.group_norm(4, 1e-5, &affine, &affine).is_err());
    }

    #[test]
    fn max_over_neighbors_k1_is_identity() {
        let x = arr(vec![3.0, -1.0, 0.25, 9.0], &[2, 1, 2]);
        assert_eq!(x.max_over_neighbors().unwrap().to_vec(), vec![3.0, -1.0, 0.25, 9.0]);
    }

    #[test]
    fn max_over_neighbors_routes_gradient_to_argmax() {
        let x = DiffArray::leaf(vec![1.0, 5.0, 3.0], &[1, 3, 1]).unwrap();
        let y = x.max_over_neighbors().unwrap();
        assert_eq!(y.to_vec(), vec![5.0]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn max_over_neighbors_matches_scan_oracle() {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha12Rng::seed_from_u64(77);
        let (n, k, c) = (6usize, 4usize, 8usize);
        let data: Vec<f32> = (0..n * k * c).map(|_| r.gen_range(-3.0..3.0)).collect();
        let x = arr(data.clone(), &[n, k, c]);
        let out = x.max_over_neighbors().unwrap().to_vec();
        for i in 0..n {
            for j in 0..c {
                let mut best = f32::NEG_INFINITY;
                for kk in 0..k {
                    best = best.max(data[(i * k + kk) * c + j]);
                }
                assert_eq!(out[i * c + j], best);
            }
        }
    }

    #[test]
    fn max_over_neighbors_ties_pick_lowest_index() {
        let x = DiffArray::leaf(vec![2.0, 2.0, 1.0], &[1, 3, 1]).unwrap();
        let y = x.max_over_neighbors().unwrap();
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_single_part_is_identity() {
        let x = arr(vec![1.0, 2.0, 3.0], &[3]);
        assert_eq!(DiffArray::concat(&[x.clone()], 0).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn concat_widths_add_up() {
        let a = arr(vec![0.0; 8], &[4, 2]);
        let b = arr(vec![1.0; 12], &[4, 3]);
        assert_eq!(DiffArray::concat(&[a, b], 1).unwrap().shape(), &[4, 5]);
    }

    #[test]
    fn concat_gradient_splits_to_ones() {
        let a = DiffArray::leaf(vec![0.5; 4], &[2, 2]).unwrap();
        let b = DiffArray::leaf(vec![0.5; 6], &[2, 3]).unwrap();
        DiffArray::concat(&[a.clone(), b.clone()], 1)
            .unwrap()
            .sum()
            .backward()
            .unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0; 4]);
        assert_eq!(b.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn concat_rejects_mismatched_extents() {
        let a = arr(vec![0.0; 8], &[4, 2]);
        let b = arr(vec![0.0; 6], &[3, 2]);
        assert!(DiffArray::concat(&[a, b], 1).is_err());
    }

    #[test]
    fn slice_cols_recovers_concat_parts() {
        let a = arr(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = arr(vec![5.0, 6.0], &[2, 1]);
        let cat = DiffArray::concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(cat.slice_cols(0, 2).unwrap().to_vec(), a.to_vec());
        assert_eq!(cat.slice_cols(2, 1).unwrap().to_vec(), b.to_vec());
    }
}
