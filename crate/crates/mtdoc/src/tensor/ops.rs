//! Differentiable operations on [`Tape`].

use super::{Ctx, Tape, Var};
use crate::error::{Error, Result};
use ndarray::ArrayView2;

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn as2(v: &[f64], r: usize, c: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((r, c), v).expect("row-major view")
}

fn mm(a: &[f64], (m, k): (usize, usize), b: &[f64], n: usize) -> Vec<f64> {
    as2(a, m, k).dot(&as2(b, k, n)).into_raw_vec()
}

/// a[m×k] × b[n×k]ᵀ → [m×n]
fn mm_nt(a: &[f64], (m, k): (usize, usize), b: &[f64], n: usize) -> Vec<f64> {
    as2(a, m, k).dot(&as2(b, n, k).t()).into_raw_vec()
}

/// a[k×m]ᵀ × b[k×n] → [m×n]
fn mm_tn(a: &[f64], (k, m): (usize, usize), b: &[f64], n: usize) -> Vec<f64> {
    as2(a, k, m).t().dot(&as2(b, k, n)).into_raw_vec()
}

fn dims2(v: &Var, op: &'static str) -> Result<(usize, usize)> {
    match v.shape.as_slice() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::dim(op, format!("expected rank-2, got {other:?}"))),
    }
}

fn softmax_slice(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

impl Tape {
    /// Element-wise sum; shapes must match.
    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        if a.shape != b.shape {
            return Err(Error::dim("add", format!("{:?} vs {:?}", a.shape, b.shape)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.iter().zip(&bv).map(|(x, y)| x + y).collect();
        Ok(self.push(
            out,
            a.shape.clone(),
            vec![a.id, b.id],
            Some(Box::new(|ctx: &Ctx| {
                vec![ctx.grad.to_vec(), ctx.grad.to_vec()]
            })),
        ))
    }

    /// a[m×n] + row vector b[n], broadcast over rows.
    pub fn add_row(&self, a: &Var, b: &Var) -> Result<Var> {
        let (m, n) = dims2(a, "add_row")?;
        if b.len() != n {
            return Err(Error::dim(
                "add_row",
                format!("row len {} vs cols {}", b.len(), n),
            ));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = av;
        for r in 0..m {
            for c in 0..n {
                out[r * n + c] += bv[c];
            }
        }
        Ok(self.push(
            out,
            a.shape.clone(),
            vec![a.id, b.id],
            Some(Box::new(move |ctx: &Ctx| {
                let mut db = vec![0.0; n];
                for r in 0..m {
                    for c in 0..n {
                        db[c] += ctx.grad[r * n + c];
                    }
                }
                vec![ctx.grad.to_vec(), db]
            })),
        ))
    }

    /// Hadamard product.
    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        if a.shape != b.shape {
            return Err(Error::dim("mul", format!("{:?} vs {:?}", a.shape, b.shape)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.iter().zip(&bv).map(|(x, y)| x * y).collect();
        Ok(self.push(
            out,
            a.shape.clone(),
            vec![a.id, b.id],
            Some(Box::new(|ctx: &Ctx| {
                let (a, _) = ctx.inputs[0];
                let (b, _) = ctx.inputs[1];
                let da = ctx.grad.iter().zip(b).map(|(g, y)| g * y).collect();
                let db = ctx.grad.iter().zip(a).map(|(g, x)| g * x).collect();
                vec![da, db]
            })),
        ))
    }

    pub fn scale(&self, a: &Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        self.push(
            out,
            a.shape.clone(),
            vec![a.id],
            Some(Box::new(move |ctx: &Ctx| {
                vec![ctx.grad.iter().map(|g| g * c).collect()]
            })),
        )
    }

    pub fn reshape(&self, a: &Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != a.len() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} to {:?}", a.shape, shape),
            ));
        }
        Ok(self.push(
            self.value(a),
            shape,
            vec![a.id],
            Some(Box::new(|ctx: &Ctx| vec![ctx.grad.to_vec()])),
        ))
    }

    /// Standard matrix product a[m×k] × b[k×n].
    pub fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        let (m, k) = dims2(a, "matmul")?;
        let (k2, n) = dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner extents {k} vs {k2}"),
            ));
        }
        let out = mm(&self.value(a), (m, k), &self.value(b), n);
        Ok(self.push(
            out,
            vec![m, n],
            vec![a.id, b.id],
            Some(Box::new(move |ctx: &Ctx| {
                let (av, _) = ctx.inputs[0];
                let (bv, _) = ctx.inputs[1];
                // dA = G × Bᵀ; dB = Aᵀ × G
                let da = mm_nt(ctx.grad, (m, n), bv, k);
                let db = mm_tn(av, (m, k), ctx.grad, n);
                vec![da, db]
            })),
        ))
    }

    /// a[m×k] × b[n×k]ᵀ → [m×n].
    pub fn matmul_nt(&self, a: &Var, b: &Var) -> Result<Var> {
        let (m, k) = dims2(a, "matmul_nt")?;
        let (n, k2) = dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul_nt",
                format!("inner extents {k} vs {k2}"),
            ));
        }
        let out = mm_nt(&self.value(a), (m, k), &self.value(b), n);
        Ok(self.push(
            out,
            vec![m, n],
            vec![a.id, b.id],
            Some(Box::new(move |ctx: &Ctx| {
                let (av, _) = ctx.inputs[0];
                let (bv, _) = ctx.inputs[1];
                // C = A×Bᵀ: dA = G × B; dB = Gᵀ × A
                let da = mm(ctx.grad, (m, n), bv, k);
                let db = mm_tn(ctx.grad, (m, n), av, k);
                vec![da, db]
            })),
        ))
    }

    /// Numerically stable softmax along `axis` (max-subtraction). Rank-1
    /// tensors use axis 0; rank-2 tensors accept axis 0 (columns) or 1 (rows).
    pub fn softmax(&self, x: &Var, axis: usize) -> Result<Var> {
        let (rows, cols, row_major) = match x.shape.as_slice() {
            [_n] if axis == 0 => (1, x.len(), true),
            [r, c] if axis == 1 => (*r, *c, true),
            [r, c] if axis == 0 => (*c, *r, false),
            _ => {
                return Err(Error::dim(
                    "softmax",
                    format!("axis {axis} invalid for shape {:?}", x.shape),
                ))
            }
        };
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        let mut slice_in = vec![0.0; cols];
        let mut slice_out = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                let idx = if row_major { r * cols + c } else { c * rows + r };
                slice_in[c] = xv[idx];
            }
            softmax_slice(&slice_in, &mut slice_out);
            for c in 0..cols {
                let idx = if row_major { r * cols + c } else { c * rows + r };
                out[idx] = slice_out[c];
            }
        }
        Ok(self.push(
            out,
            x.shape.clone(),
            vec![x.id],
            Some(Box::new(move |ctx: &Ctx| {
                // dx_i = s_i (g_i − Σ_j g_j s_j), per slice
                let mut dx = vec![0.0; ctx.grad.len()];
                for r in 0..rows {
                    let mut dot = 0.0;
                    for c in 0..cols {
                        let idx = if row_major { r * cols + c } else { c * rows + r };
                        dot += ctx.grad[idx] * ctx.out[idx];
                    }
                    for c in 0..cols {
                        let idx = if row_major { r * cols + c } else { c * rows + r };
                        dx[idx] = ctx.out[idx] * (ctx.grad[idx] - dot);
                    }
                }
                vec![dx]
            })),
        ))
    }

    /// Row-wise layer normalization with learned affine. `x` is [m×d] or [d].
    pub fn layer_norm(&self, x: &Var, gain: &Var, bias: &Var) -> Result<Var> {
        let (m, d) = match x.shape.as_slice() {
            [d] => (1, *d),
            [m, d] => (*m, *d),
            other => return Err(Error::dim("layer_norm", format!("rank {:?}", other))),
        };
        if gain.len() != d || bias.len() != d {
            return Err(Error::dim(
                "layer_norm",
                format!("gain/bias len {}/{} vs d {}", gain.len(), bias.len(), d),
            ));
        }
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let mut out = vec![0.0; xv.len()];
        for r in 0..m {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for c in 0..d {
                out[r * d + c] = (row[c] - mu) * inv_std * gv[c] + bv[c];
            }
        }
        Ok(self.push(
            out,
            x.shape.clone(),
            vec![x.id, gain.id, bias.id],
            Some(Box::new(move |ctx: &Ctx| {
                let (xv, _) = ctx.inputs[0];
                let (gv, _) = ctx.inputs[1];
                let mut dx = vec![0.0; xv.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..m {
                    let row = &xv[r * d..(r + 1) * d];
                    let g = &ctx.grad[r * d..(r + 1) * d];
                    let mu = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mu) * inv_std).collect();
                    let dxhat: Vec<f64> = (0..d).map(|c| g[c] * gv[c]).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for c in 0..d {
                        dx[r * d + c] =
                            inv_std * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
                        dgain[c] += g[c] * xhat[c];
                        dbias[c] += g[c];
                    }
                }
                vec![dx, dgain, dbias]
            })),
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: &Var) -> Var {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
        const A: f64 = 0.044715;
        let xv = self.value(x);
        let out = xv
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (C * (v + A * v.powi(3))).tanh()))
            .collect();
        self.push(
            out,
            x.shape.clone(),
            vec![x.id],
            Some(Box::new(|ctx: &Ctx| {
                let (xv, _) = ctx.inputs[0];
                let dx = ctx
                    .grad
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| {
                        let u = C * (v + A * v.powi(3));
                        let t = u.tanh();
                        let du = C * (1.0 + 3.0 * A * v * v);
                        g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                vec![dx]
            })),
        )
    }

    pub fn sum_all(&self, x: &Var) -> Var {
        let s = self.value(x).iter().sum();
        let n = x.len();
        self.push(
            vec![s],
            vec![1],
            vec![x.id],
            Some(Box::new(move |ctx: &Ctx| vec![vec![ctx.grad[0]; n]])),
        )
    }

    /// Summed cross-entropy: Σ_i (logsumexp(logits_i) − logits_i[target_i]).
    pub fn cross_entropy_sum(&self, logits: &Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = dims2(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::dim(
                "cross_entropy",
                format!("{n} rows vs {} targets", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index(format!(
                "cross_entropy target {bad} out of range 0..{c}"
            )));
        }
        let lv = self.value(logits);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &lv[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let targets = targets.to_vec();
        Ok(self.push(
            vec![total],
            vec![1],
            vec![logits.id],
            Some(Box::new(move |ctx: &Ctx| {
                let (lv, _) = ctx.inputs[0];
                let g = ctx.grad[0];
                let mut dl = vec![0.0; lv.len()];
                let mut sm = vec![0.0; c];
                for (i, &t) in targets.iter().enumerate() {
                    let row = &lv[i * c..(i + 1) * c];
                    softmax_slice(row, &mut sm);
                    for j in 0..c {
                        dl[i * c + j] = g * (sm[j] - if j == t { 1.0 } else { 0.0 });
                    }
                }
                vec![dl]
            })),
        ))
    }

    /// Mean cross-entropy over rows.
    pub fn cross_entropy(&self, logits: &Var, targets: &[usize]) -> Result<Var> {
        let n = targets.len().max(1);
        let sum = self.cross_entropy_sum(logits, targets)?;
        Ok(self.scale(&sum, 1.0 / n as f64))
    }

    /// Rows of `x` at `indices` (with repetition allowed).
    pub fn gather_rows(&self, x: &Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = dims2(x, "gather_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::Index(format!(
                "gather_rows index {bad} out of range 0..{r}"
            )));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let n = indices.len();
        let indices = indices.to_vec();
        Ok(self.push(
            out,
            vec![n, c],
            vec![x.id],
            Some(Box::new(move |ctx: &Ctx| {
                let (xv, _) = ctx.inputs[0];
                let mut dx = vec![0.0; xv.len()];
                for (row, &i) in indices.iter().enumerate() {
                    for j in 0..c {
                        dx[i * c + j] += ctx.grad[row * c + j];
                    }
                }
                vec![dx]
            })),
        ))
    }

    /// Vertical stack; all parts must share the column count.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat_rows", "no parts"));
        }
        let c = dims2(&parts[0], "concat_rows")?.1;
        let mut out = Vec::new();
        let mut rows = 0;
        let mut row_counts = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, pc) = dims2(p, "concat_rows")?;
            if pc != c {
                return Err(Error::dim("concat_rows", format!("cols {pc} vs {c}")));
            }
            out.extend_from_slice(&self.value(p));
            rows += r;
            row_counts.push(r);
        }
        Ok(self.push(
            out,
            vec![rows, c],
            parts.iter().map(|p| p.id).collect(),
            Some(Box::new(move |ctx: &Ctx| {
                let mut offset = 0;
                row_counts
                    .iter()
                    .map(|&r| {
                        let g = ctx.grad[offset..offset + r * c].to_vec();
                        offset += r * c;
                        g
                    })
                    .collect()
            })),
        ))
    }

    /// Horizontal stack; all parts must share the row count.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat_cols", "no parts"));
        }
        let r = dims2(&parts[0], "concat_cols")?.0;
        let mut col_counts = Vec::with_capacity(parts.len());
        let mut total_cols = 0;
        for p in parts {
            let (pr, pc) = dims2(p, "concat_cols")?;
            if pr != r {
                return Err(Error::dim("concat_cols", format!("rows {pr} vs {r}")));
            }
            col_counts.push(pc);
            total_cols += pc;
        }
        let values: Vec<Vec<f64>> = parts.iter().map(|p| self.value(p)).collect();
        let mut out = Vec::with_capacity(r * total_cols);
        for row in 0..r {
            for (p, &pc) in values.iter().zip(&col_counts) {
                out.extend_from_slice(&p[row * pc..(row + 1) * pc]);
            }
        }
        let counts = col_counts.clone();
        Ok(self.push(
            out,
            vec![r, total_cols],
            parts.iter().map(|p| p.id).collect(),
            Some(Box::new(move |ctx: &Ctx| {
                let mut grads: Vec<Vec<f64>> =
                    counts.iter().map(|&pc| Vec::with_capacity(r * pc)).collect();
                for row in 0..r {
                    let mut offset = row * total_cols;
                    for (g, &pc) in grads.iter_mut().zip(&counts) {
                        g.extend_from_slice(&ctx.grad[offset..offset + pc]);
                        offset += pc;
                    }
                }
                grads
            })),
        ))
    }

    /// Columns [start, start+len) of a rank-2 tensor.
    pub fn slice_cols(&self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(x, "slice_cols")?;
        if start + len > c {
            return Err(Error::dim(
                "slice_cols",
                format!("{start}+{len} exceeds {c} cols"),
            ));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for row in 0..r {
            out.extend_from_slice(&xv[row * c + start..row * c + start + len]);
        }
        Ok(self.push(
            out,
            vec![r, len],
            vec![x.id],
            Some(Box::new(move |ctx: &Ctx| {
                let mut dx = vec![0.0; r * c];
                for row in 0..r {
                    for j in 0..len {
                        dx[row * c + start + j] = ctx.grad[row * len + j];
                    }
                }
                vec![dx]
            })),
        ))
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::Tape;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y} (tol {tol})");
        }
    }

    #[test]
    fn matmul_identity() {
        let t = Tape::new();
        let a = t.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        let i = t.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        let c = t.matmul(&a, &i).unwrap();
        assert_eq!(t.value(&c), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_dot_product() {
        // [[1,2]] × [[3],[4]] = [[11]]
        let t = Tape::new();
        let a = t.constant(vec![1.0, 2.0], vec![1, 2]).unwrap();
        let b = t.constant(vec![3.0, 4.0], vec![2, 1]).unwrap();
        let c = t.matmul(&a, &b).unwrap();
        assert_eq!(t.value(&c), vec![11.0]);
    }

    #[test]
    fn matmul_zero_matrix() {
        let t = Tape::new();
        let z = t.constant(vec![0.0; 4], vec![2, 2]).unwrap();
        let b = t.constant(vec![5.0, -1.0, 2.0, 7.0], vec![2, 2]).unwrap();
        let c = t.matmul(&z, &b).unwrap();
        assert_eq!(t.value(&c), vec![0.0; 4]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let t = Tape::new();
        let a = t.constant(vec![0.0; 6], vec![2, 3]).unwrap();
        let b = t.constant(vec![0.0; 4], vec![2, 2]).unwrap();
        assert!(t.matmul(&a, &b).is_err());
    }

    #[test]
    fn softmax_symmetry_and_oracle() {
        let t = Tape::new();
        let x = t.constant(vec![0.0, 0.0], vec![2]).unwrap();
        let s = t.softmax(&x, 0).unwrap();
        assert_eq!(t.value(&s), vec![0.5, 0.5]);

        // exp/sum oracle for [1,2,3]
        let x = t.constant(vec![1.0, 2.0, 3.0], vec![3]).unwrap();
        let s = t.softmax(&x, 0).unwrap();
        let exps: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let z: f64 = exps.iter().sum();
        let expect: Vec<f64> = exps.iter().map(|e| e / z).collect();
        assert_close(&t.value(&s), &expect, 1e-12);
        assert_close(&[0.09003057, 0.24472847, 0.66524096], &t.value(&s), 1e-7);
    }

    #[test]
    fn softmax_mask_limit() {
        let t = Tape::new();
        let x = t.constant(vec![0.0, -1e9], vec![2]).unwrap();
        let s = t.softmax(&x, 0).unwrap();
        let v = t.value(&s);
        assert!(v[1] < 1e-300);
        assert!((v[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tape::new();
        let x = t
            .constant(vec![3.0, -2.0, 0.5, 10.0, 9.0, 8.0], vec![2, 3])
            .unwrap();
        let s = t.softmax(&x, 1).unwrap();
        let v = t.value(&s);
        for r in 0..2 {
            let sum: f64 = v[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            assert!(v[r * 3..(r + 1) * 3].iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn softmax_axis0_matches_transposed_rows() {
        let t = Tape::new();
        let x = t
            .constant(vec![1.0, 4.0, 2.0, 3.0, 0.0, -1.0], vec![3, 2])
            .unwrap();
        let s0 = t.softmax(&x, 0).unwrap();
        let v = t.value(&s0);
        // each column sums to 1
        for c in 0..2 {
            let sum: f64 = (0..3).map(|r| v[r * 2 + c]).sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let t = Tape::new();
        let gain = t.constant(vec![1.0, 1.0], vec![2]).unwrap();
        let bias = t.constant(vec![0.0, 0.0], vec![2]).unwrap();

        // constant row → all zeros (epsilon handles zero variance)
        let x = t.constant(vec![5.0, 5.0], vec![2]).unwrap();
        let y = t.layer_norm(&x, &gain, &bias).unwrap();
        assert_close(&t.value(&y), &[0.0, 0.0], 1e-12);

        // row [1,-1] → mean 0, population std 1 → ≈[1,-1]
        let x = t.constant(vec![1.0, -1.0], vec![2]).unwrap();
        let y = t.layer_norm(&x, &gain, &bias).unwrap();
        assert_close(&t.value(&y), &[1.0, -1.0], 1e-4);

        // gain 0 → bias
        let g0 = t.constant(vec![0.0, 0.0], vec![2]).unwrap();
        let b = t.constant(vec![7.0, -3.0], vec![2]).unwrap();
        let x = t.constant(vec![0.3, 9.1], vec![2]).unwrap();
        let y = t.layer_norm(&x, &g0, &b).unwrap();
        assert_eq!(t.value(&y), vec![7.0, -3.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let t = Tape::new();
        // uniform logits, c=4 → ln 4
        let logits = t.constant(vec![0.0; 4], vec![1, 4]).unwrap();
        let ce = t.cross_entropy(&logits, &[2]).unwrap();
        assert!((t.scalar_value(&ce) - 4.0f64.ln()).abs() < 1e-12);

        // confident correct → ≈ 0
        let logits = t.constant(vec![20.0, 0.0, 0.0], vec![1, 3]).unwrap();
        let ce = t.cross_entropy(&logits, &[0]).unwrap();
        assert!(t.scalar_value(&ce) < 1e-8);

        // mean invariance over identical rows
        let one = t.constant(vec![1.0, 2.0, 0.5], vec![1, 3]).unwrap();
        let two = t
            .constant(vec![1.0, 2.0, 0.5, 1.0, 2.0, 0.5], vec![2, 3])
            .unwrap();
        let ce1 = t.cross_entropy(&one, &[1]).unwrap();
        let ce2 = t.cross_entropy(&two, &[1, 1]).unwrap();
        assert!((t.scalar_value(&ce1) - t.scalar_value(&ce2)).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let t = Tape::new();
        let logits = t.constant(vec![0.0; 3], vec![1, 3]).unwrap();
        assert!(t.cross_entropy(&logits, &[3]).is_err());
    }

    #[test]
    fn gather_concat_slice_round_trip() {
        let t = Tape::new();
        let x = t
            .constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![3, 2])
            .unwrap();
        let g = t.gather_rows(&x, &[2, 0]).unwrap();
        assert_eq!(t.value(&g), vec![5.0, 6.0, 1.0, 2.0]);

        let c = t.concat_rows(&[g.clone(), g.clone()]).unwrap();
        assert_eq!(c.shape, vec![4, 2]);

        let cc = t.concat_cols(&[g.clone(), g.clone()]).unwrap();
        assert_eq!(t.value(&cc), vec![5.0, 6.0, 5.0, 6.0, 1.0, 2.0, 1.0, 2.0]);

        let s = t.slice_cols(&cc, 2, 2).unwrap();
        assert_eq!(t.value(&s), t.value(&g));
    }
}
