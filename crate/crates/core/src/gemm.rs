//! Matrix multiplication kernels.
//!
//! Everything funnels through one strided kernel. Tokenwise layers keep
//! their `T` weight matrices packed in one buffer and issue the `T` small
//! products as a single pass over a table of per-group offsets
//! (`run_grouped`); [`grouped_matmul`] is the same dispatch over separate
//! tensors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A strided read-only view of a matrix inside a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Operand<'a> {
    pub data: &'a [f64],
    pub off: usize,
    /// Stride between consecutive rows.
    pub rs: usize,
    /// Stride between consecutive columns.
    pub cs: usize,
}

impl<'a> Operand<'a> {
    pub fn row_major(data: &'a [f64], off: usize, cols: usize) -> Self {
        Self { data, off, rs: cols, cs: 1 }
    }

    /// The transpose of a row-major `rows × cols` block.
    pub fn transposed(data: &'a [f64], off: usize, cols: usize) -> Self {
        Self { data, off, rs: 1, cs: cols }
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[self.off + i * self.rs + j * self.cs]
    }
}

/// `c[i, j] (+)= Σ_p a[i, p] · b[p, j]` for an `m × k` by `k × n` product.
///
/// `c` is written row-major at `c_off` with row stride `c_rs`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: Operand<'_>,
    b: Operand<'_>,
    c: &mut [f64],
    c_off: usize,
    c_rs: usize,
    accumulate: bool,
) {
    if !accumulate {
        for i in 0..m {
            c[c_off + i * c_rs..c_off + i * c_rs + n].fill(0.0);
        }
    }
    if k > 0 && n > 0 && a.cs == 1 && a.rs == k && b.cs == 1 && b.rs == n && c_rs == n {
        // Fully contiguous operands: exact slices let the compiler drop
        // bounds checks and vectorize the row update.
        let a = &a.data[a.off..a.off + m * k];
        let b = &b.data[b.off..b.off + k * n];
        for (arow, crow) in a.chunks_exact(k).zip(c[c_off..c_off + m * n].chunks_exact_mut(n)) {
            for (aip, brow) in arow.iter().zip(b.chunks_exact(n)) {
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += aip * bv;
                }
            }
        }
    } else if b.cs == 1 {
        // b rows contiguous: broadcast a[i,p] across a row of b.
        for i in 0..m {
            let crow = &mut c[c_off + i * c_rs..c_off + i * c_rs + n];
            for p in 0..k {
                let aip = a.get(i, p);
                let start = b.off + p * b.rs;
                let brow = &b.data[start..start + n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += aip * bv;
                }
            }
        }
    } else if b.rs == 1 && a.cs == 1 {
        // b columns contiguous (transposed operand): dot-product form.
        for i in 0..m {
            let arow = &a.data[a.off + i * a.rs..a.off + i * a.rs + k];
            for j in 0..n {
                let bcol = &b.data[b.off + j * b.cs..b.off + j * b.cs + k];
                let dot: f64 = arow.iter().zip(bcol).map(|(x, y)| x * y).sum();
                c[c_off + i * c_rs + j] += dot;
            }
        }
    } else {
        for i in 0..m {
            for p in 0..k {
                let aip = a.get(i, p);
                for j in 0..n {
                    c[c_off + i * c_rs + j] += aip * b.get(p, j);
                }
            }
        }
    }
}

/// Geometry of one product inside a grouped dispatch.
#[derive(Clone, Copy, Debug)]
pub(crate) struct GemmGroup {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_off: usize,
    pub a_rs: usize,
    pub a_cs: usize,
    pub b_off: usize,
    pub b_rs: usize,
    pub b_cs: usize,
    pub c_off: usize,
    pub c_rs: usize,
}

/// Runs every group against shared packed buffers in one pass.
pub(crate) fn run_grouped(groups: &[GemmGroup], a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    for g in groups {
        gemm(
            g.m,
            g.k,
            g.n,
            Operand { data: a, off: g.a_off, rs: g.a_rs, cs: g.a_cs },
            Operand { data: b, off: g.b_off, rs: g.b_rs, cs: g.b_cs },
            c,
            g.c_off,
            g.c_rs,
            accumulate,
        );
    }
}

fn matrix_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Config(format!("{what} must be 2-D, got shape {s:?}"))),
    }
}

/// Plain matrix product of an `m × n` and an `n × p` tensor.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, n) = matrix_dims(a, "matmul lhs")?;
    let (n2, p) = matrix_dims(b, "matmul rhs")?;
    if n != n2 {
        return Err(Error::Config(format!(
            "matmul inner dimensions differ: {m}x{n} · {n2}x{p}"
        )));
    }
    let mut out = vec![0.0; m * p];
    gemm(
        m,
        n,
        p,
        Operand::row_major(a.data(), 0, n),
        Operand::row_major(b.data(), 0, p),
        &mut out,
        0,
        p,
        false,
    );
    Tensor::new(vec![m, p], out)
}

/// Multiplies `lhs[i] · rhs[i]` for every `i` in a single dispatch.
///
/// All shapes are validated up front, then one pass over the group table
/// runs the products straight from the callers' buffers into the outputs.
/// Results equal per-pair [`matmul`] calls exactly; an empty input yields an
/// empty output.
pub fn grouped_matmul(lhs: &[Tensor], rhs: &[Tensor]) -> Result<Vec<Tensor>> {
    if lhs.len() != rhs.len() {
        return Err(Error::Config(format!(
            "grouped_matmul got {} lhs and {} rhs matrices",
            lhs.len(),
            rhs.len()
        )));
    }
    let mut dims = Vec::with_capacity(lhs.len());
    for (idx, (a, b)) in lhs.iter().zip(rhs).enumerate() {
        let (m, k) = matrix_dims(a, "grouped_matmul lhs")?;
        let (k2, n) = matrix_dims(b, "grouped_matmul rhs")?;
        if k != k2 {
            return Err(Error::Config(format!(
                "grouped_matmul pair {idx}: inner dimensions differ ({m}x{k} · {k2}x{n})"
            )));
        }
        dims.push((m, k, n));
    }
    lhs.iter()
        .zip(rhs)
        .zip(dims)
        .map(|((a, b), (m, k, n))| {
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, Operand::row_major(a.data(), 0, k), Operand::row_major(b.data(), 0, n), &mut out, 0, n, false);
            Tensor::new(vec![m, n], out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, n) = (a.shape()[0], a.shape()[1]);
        let p = b.shape()[1];
        Tensor::from_fn(&[m, p], |idx| {
            let (i, j) = (idx / p, idx % p);
            (0..n).map(|q| a.at(&[i, q]) * b.at(&[q, j])).sum()
        })
    }

    #[test]
    fn identity_product() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&a, &Tensor::eye(2)).unwrap(), a);
    }

    #[test]
    fn zero_row_annihilates() {
        let a = t(&[1, 2], &[0.0, 0.0]);
        let b = t(&[2, 1], &[5.0, 7.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[0.0]);
    }

    #[test]
    fn matches_triple_loop() {
        let a = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin());
        let b = Tensor::from_fn(&[4, 2], |i| (i as f64 * 1.3).cos());
        let diff = matmul(&a, &b).unwrap().max_abs_diff(&triple_loop(&a, &b)).unwrap();
        assert!(diff <= 1e-12);
    }

    #[test]
    fn mismatch_is_config_error() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Config(_))));
    }

    #[test]
    fn grouped_identity_pairs() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = t(&[2, 2], &[-1.0, 0.5, 2.0, 8.0]);
        let out = grouped_matmul(&[x.clone(), y.clone()], &[Tensor::eye(2), Tensor::eye(2)]).unwrap();
        assert_eq!(out, vec![x, y]);
    }

    #[test]
    fn grouped_empty_and_singleton() {
        assert!(grouped_matmul(&[], &[]).unwrap().is_empty());
        let a = Tensor::from_fn(&[3, 5], |i| i as f64 - 4.0);
        let b = Tensor::from_fn(&[5, 2], |i| 0.5 * i as f64);
        assert_eq!(grouped_matmul(std::slice::from_ref(&a), std::slice::from_ref(&b)).unwrap()[0], matmul(&a, &b).unwrap());
    }

    #[test]
    fn grouped_names_offending_pair() {
        let ok = Tensor::zeros(&[2, 2]);
        let bad = Tensor::zeros(&[3, 2]);
        let err = grouped_matmul(&[ok.clone(), ok.clone()], &[ok, bad]).unwrap_err();
        assert!(err.to_string().contains("pair 1"), "{err}");
    }

    #[test]
    fn transposed_operand_paths_agree() {
        let a = Tensor::from_fn(&[3, 4], |i| (i as f64).sqrt() - 1.0);
        let bt = Tensor::from_fn(&[2, 4], |i| 0.25 * i as f64 - 0.7);
        let mut c = vec![0.0; 6];
        gemm(3, 4, 2, Operand::row_major(a.data(), 0, 4), Operand::transposed(bt.data(), 0, 4), &mut c, 0, 2, false);
        let b = Tensor::from_fn(&[4, 2], |i| bt.at(&[i % 2, i / 2]));
        let want = triple_loop(&a, &b);
        for (x, y) in c.iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
