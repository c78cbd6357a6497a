//! Forward math kernels and their vector-Jacobian products.
//!
//! Feature matrices are laid out channels-by-locations: an `[r, c]` matrix
//! holds `r` channels and `c` spatial locations, so "per-location" operations
//! (channel layernorm, per-vector normalization) act on columns. Graph ops in
//! [`crate::numeric::graph`] call these kernels for both passes.

use crate::error::{Error, Result};
use crate::numeric::scalar::{c as sc, Scalar};
use crate::numeric::tensor::Tensor;

fn want_rank2<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    if x.rank() != 2 {
        return Err(Error::shape(format!("{what}: expected rank 2, got {:?}", x.shape())));
    }
    Ok((x.shape()[0], x.shape()[1]))
}

fn want_vec<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<usize> {
    if x.rank() != 1 {
        return Err(Error::shape(format!("{what}: expected rank 1, got {:?}", x.shape())));
    }
    Ok(x.shape()[0])
}

pub fn scale<T: Scalar>(x: &Tensor<T>, k: T) -> Result<Tensor<T>> {
    x.map(|v| v * k)
}

/// `[m,k] × [k,n] → [m,n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, ka) = want_rank2(a, "matmul lhs")?;
    let (kb, n) = want_rank2(b, "matmul rhs")?;
    if ka != kb {
        return Err(Error::shape(format!("matmul: {m}x{ka} × {kb}x{n}")));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..ka {
            let av = ad[i * ka + p];
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn matmul_vjp<T: Scalar>(
    g: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, k) = want_rank2(a, "matmul lhs")?;
    let (_, n) = want_rank2(b, "matmul rhs")?;
    let gd = g.data();
    let ad = a.data();
    let bd = b.data();
    let mut da = vec![T::zero(); m * k];
    let mut db = vec![T::zero(); k * n];
    for i in 0..m {
        for j in 0..n {
            let gv = gd[i * n + j];
            for p in 0..k {
                da[i * k + p] = da[i * k + p] + gv * bd[p * n + j];
                db[p * n + j] = db[p * n + j] + ad[i * k + p] * gv;
            }
        }
    }
    Ok((Tensor::new(vec![m, k], da)?, Tensor::new(vec![k, n], db)?))
}

/// Adds `bias[i]` to every entry of row `i`.
pub fn add_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, cols) = want_rank2(x, "add_bias input")?;
    let br = want_vec(bias, "add_bias bias")?;
    if br != r {
        return Err(Error::shape(format!("add_bias: {r} rows vs bias len {br}")));
    }
    let xd = x.data();
    let bd = bias.data();
    Tensor::from_fn(vec![r, cols], |i| xd[i] + bd[i / cols])
}

/// Gradient of [`add_bias`] for the bias: row sums of `g`.
pub fn add_bias_vjp_bias<T: Scalar>(g: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, cols) = want_rank2(g, "add_bias grad")?;
    let gd = g.data();
    let mut out = vec![T::zero(); r];
    for i in 0..r {
        for j in 0..cols {
            out[i] = out[i] + gd[i * cols + j];
        }
    }
    Tensor::new(vec![r], out)
}

/// Per-row mean over columns: `[r,c] → [r]`.
pub fn mean_axis1<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, cols) = want_rank2(x, "mean_axis1")?;
    if cols == 0 {
        return Err(Error::invalid("mean_axis1: empty second axis"));
    }
    let xd = x.data();
    let inv = T::one() / sc::<T>(cols as f64);
    let mut out = vec![T::zero(); r];
    for i in 0..r {
        for j in 0..cols {
            out[i] = out[i] + xd[i * cols + j];
        }
        out[i] = out[i] * inv;
    }
    Tensor::new(vec![r], out)
}

pub fn mean_axis1_vjp<T: Scalar>(g: &Tensor<T>, cols: usize) -> Result<Tensor<T>> {
    let r = want_vec(g, "mean_axis1 grad")?;
    let inv = T::one() / sc::<T>(cols as f64);
    let gd = g.data();
    Tensor::from_fn(vec![r, cols], |i| gd[i / cols] * inv)
}

/// Normalizes each column of `[r,c]` to zero mean and unit variance over its
/// `r` entries, then applies the per-row affine `gamma`, `beta`. This is
/// channel layernorm when rows are channels and columns are locations.
pub fn layernorm_cols<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (r, cols) = want_rank2(x, "layernorm input")?;
    if want_vec(gamma, "layernorm gamma")? != r || want_vec(beta, "layernorm beta")? != r {
        return Err(Error::shape(format!(
            "layernorm: {r} channels vs gamma {:?} beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    if eps <= T::zero() {
        return Err(Error::invalid(format!("layernorm: eps must be positive, got {eps}")));
    }
    if r == 0 {
        return Err(Error::invalid("layernorm: zero channels"));
    }
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let invr = T::one() / sc::<T>(r as f64);
    let mut out = vec![T::zero(); r * cols];
    for j in 0..cols {
        let mut mean = T::zero();
        for i in 0..r {
            mean = mean + xd[i * cols + j];
        }
        mean = mean * invr;
        let mut var = T::zero();
        for i in 0..r {
            let d = xd[i * cols + j] - mean;
            var = var + d * d;
        }
        var = var * invr;
        let inv_std = T::one() / (var + eps).sqrt();
        for i in 0..r {
            let xhat = (xd[i * cols + j] - mean) * inv_std;
            out[i * cols + j] = gd[i] * xhat + bd[i];
        }
    }
    Tensor::new(vec![r, cols], out)
}

/// VJP of [`layernorm_cols`]: returns (dx, dgamma, dbeta).
pub fn layernorm_cols_vjp<T: Scalar>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (r, cols) = want_rank2(x, "layernorm input")?;
    let xd = x.data();
    let gd = g.data();
    let gam = gamma.data();
    let invr = T::one() / sc::<T>(r as f64);
    let mut dx = vec![T::zero(); r * cols];
    let mut dgamma = vec![T::zero(); r];
    let mut dbeta = vec![T::zero(); r];
    let mut xhat = vec![T::zero(); r];
    for j in 0..cols {
        let mut mean = T::zero();
        for i in 0..r {
            mean = mean + xd[i * cols + j];
        }
        mean = mean * invr;
        let mut var = T::zero();
        for i in 0..r {
            let d = xd[i * cols + j] - mean;
            var = var + d * d;
        }
        var = var * invr;
        let inv_std = T::one() / (var + eps).sqrt();
        let mut mean_h = T::zero();
        let mut mean_hx = T::zero();
        for i in 0..r {
            xhat[i] = (xd[i * cols + j] - mean) * inv_std;
            let h = gam[i] * gd[i * cols + j];
            mean_h = mean_h + h;
            mean_hx = mean_hx + h * xhat[i];
        }
        mean_h = mean_h * invr;
        mean_hx = mean_hx * invr;
        for i in 0..r {
            let h = gam[i] * gd[i * cols + j];
            dx[i * cols + j] = inv_std * (h - mean_h - xhat[i] * mean_hx);
            dgamma[i] = dgamma[i] + gd[i * cols + j] * xhat[i];
            dbeta[i] = dbeta[i] + gd[i * cols + j];
        }
    }
    Ok((
        Tensor::new(vec![r, cols], dx)?,
        Tensor::new(vec![r], dgamma)?,
        Tensor::new(vec![r], dbeta)?,
    ))
}

/// Layer normalization across channels at every spatial location of a
/// `[C, H, W]` tensor, with per-channel affine parameters of length `C`.
pub fn channel_layernorm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(Error::shape(format!(
            "channel_layernorm: expected [C,H,W], got {:?}",
            x.shape()
        )));
    }
    let (ch, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let flat = x.reshaped(vec![ch, h * w])?;
    layernorm_cols(&flat, gamma, beta, eps)?.reshaped(vec![ch, h, w])
}

/// `x / ‖x‖₂`, with the zero vector mapped to itself.
pub fn l2_normalize_vec<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    want_vec(x, "l2_normalize")?;
    let norm = x.data().iter().map(|&v| v * v).sum::<T>().sqrt();
    if norm == T::zero() {
        return Ok(x.clone());
    }
    x.map(|v| v / norm)
}

pub fn l2_normalize_vec_vjp<T: Scalar>(g: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = want_vec(x, "l2_normalize")?;
    let norm = x.data().iter().map(|&v| v * v).sum::<T>().sqrt();
    if norm == T::zero() {
        return Ok(Tensor::zeros(vec![n]));
    }
    let y: Vec<T> = x.data().iter().map(|&v| v / norm).collect();
    let gy: T = g.data().iter().zip(y.iter()).map(|(&a, &b)| a * b).sum();
    Tensor::new(
        vec![n],
        g.data()
            .iter()
            .zip(y.iter())
            .map(|(&gi, &yi)| (gi - gy * yi) / norm)
            .collect(),
    )
}

/// Normalizes each column of `[r,c]` to unit L2 norm; zero columns stay zero.
pub fn l2_normalize_cols<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, cols) = want_rank2(x, "l2_normalize_cols")?;
    let xd = x.data();
    let mut out = vec![T::zero(); r * cols];
    for j in 0..cols {
        let mut sq = T::zero();
        for i in 0..r {
            sq = sq + xd[i * cols + j] * xd[i * cols + j];
        }
        let norm = sq.sqrt();
        if norm == T::zero() {
            continue;
        }
        for i in 0..r {
            out[i * cols + j] = xd[i * cols + j] / norm;
        }
    }
    Tensor::new(vec![r, cols], out)
}

pub fn l2_normalize_cols_vjp<T: Scalar>(g: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, cols) = want_rank2(x, "l2_normalize_cols")?;
    let xd = x.data();
    let gd = g.data();
    let mut out = vec![T::zero(); r * cols];
    for j in 0..cols {
        let mut sq = T::zero();
        for i in 0..r {
            sq = sq + xd[i * cols + j] * xd[i * cols + j];
        }
        let norm = sq.sqrt();
        if norm == T::zero() {
            continue;
        }
        let mut gy = T::zero();
        for i in 0..r {
            gy = gy + gd[i * cols + j] * xd[i * cols + j] / norm;
        }
        for i in 0..r {
            let yi = xd[i * cols + j] / norm;
            out[i * cols + j] = (gd[i * cols + j] - gy * yi) / norm;
        }
    }
    Tensor::new(vec![r, cols], out)
}

/// Row vector times matrix: `[r] × [r,c] → [c]`.
pub fn vecmat<T: Scalar>(v: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
    let n = want_vec(v, "vecmat vector")?;
    let (r, cols) = want_rank2(m, "vecmat matrix")?;
    if n != r {
        return Err(Error::shape(format!("vecmat: vector len {n} vs {r} rows")));
    }
    let vd = v.data();
    let md = m.data();
    let mut out = vec![T::zero(); cols];
    for i in 0..r {
        for j in 0..cols {
            out[j] = out[j] + vd[i] * md[i * cols + j];
        }
    }
    Tensor::new(vec![cols], out)
}

pub fn vecmat_vjp<T: Scalar>(
    g: &Tensor<T>,
    v: &Tensor<T>,
    m: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let n = want_vec(v, "vecmat vector")?;
    let (_, cols) = want_rank2(m, "vecmat matrix")?;
    let gd = g.data();
    let vd = v.data();
    let md = m.data();
    let mut dv = vec![T::zero(); n];
    let mut dm = vec![T::zero(); n * cols];
    for i in 0..n {
        for j in 0..cols {
            dv[i] = dv[i] + md[i * cols + j] * gd[j];
            dm[i * cols + j] = vd[i] * gd[j];
        }
    }
    Ok((Tensor::new(vec![n], dv)?, Tensor::new(vec![n, cols], dm)?))
}

pub fn dot<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    let n = want_vec(a, "dot lhs")?;
    if want_vec(b, "dot rhs")? != n {
        return Err(Error::shape("dot: length mismatch".to_string()));
    }
    Ok(a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).sum())
}

pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> T {
    x.data().iter().copied().sum()
}

/// Maximum entry and its flat index; ties resolve to the smallest row-major
/// index (winner-takes-all subgradient convention).
pub fn max_all<T: Scalar>(x: &Tensor<T>) -> Result<(T, usize)> {
    if x.is_empty() {
        return Err(Error::invalid("max over empty tensor"));
    }
    let d = x.data();
    let mut best = d[0];
    let mut idx = 0usize;
    for (i, &v) in d.iter().enumerate().skip(1) {
        if v > best {
            best = v;
            idx = i;
        }
    }
    Ok((best, idx))
}

fn lse<T: Scalar>(row: impl Iterator<Item = T> + Clone) -> T {
    let m = row.clone().fold(T::neg_infinity(), |a, b| a.max(b));
    let s = row.map(|v| (v - m).exp()).sum::<T>();
    m + s.ln()
}

/// Symmetric InfoNCE over a square score matrix.
///
/// Rows are anchors in one modality, columns in the other; entry `(i, i)` is
/// the positive. Both directions are averaged:
/// `L = ½·meanᵢ[LSEⱼ(S/τ)ᵢⱼ − (S/τ)ᵢᵢ] + ½·meanⱼ[LSEᵢ(S/τ)ᵢⱼ − (S/τ)ⱼⱼ]`.
pub fn infonce<T: Scalar>(s: &Tensor<T>, tau: T) -> Result<T> {
    let (n, m) = want_rank2(s, "infonce scores")?;
    if n != m || n == 0 {
        return Err(Error::shape(format!("infonce: expected square non-empty, got {n}x{m}")));
    }
    if tau <= T::zero() {
        return Err(Error::invalid(format!("infonce: temperature must be positive, got {tau}")));
    }
    let d = s.data();
    let a = |i: usize, j: usize| d[i * n + j] / tau;
    let mut loss_rows = T::zero();
    let mut loss_cols = T::zero();
    for i in 0..n {
        loss_rows = loss_rows + lse((0..n).map(|j| a(i, j))) - a(i, i);
        loss_cols = loss_cols + lse((0..n).map(|j| a(j, i))) - a(i, i);
    }
    let inv_n = T::one() / sc::<T>(n as f64);
    let half = sc::<T>(0.5);
    let out = half * inv_n * (loss_rows + loss_cols);
    if !out.is_finite() {
        return Err(Error::non_finite("infonce loss".to_string()));
    }
    Ok(out)
}

/// Gradient of [`infonce`] with respect to the score matrix.
pub fn infonce_grad<T: Scalar>(s: &Tensor<T>, tau: T) -> Result<Tensor<T>> {
    let (n, _) = want_rank2(s, "infonce scores")?;
    let d = s.data();
    let a = |i: usize, j: usize| d[i * n + j] / tau;
    let row_lse: Vec<T> = (0..n).map(|i| lse((0..n).map(|j| a(i, j)))).collect();
    let col_lse: Vec<T> = (0..n).map(|j| lse((0..n).map(|i| a(i, j)))).collect();
    let coef = T::one() / (sc::<T>(2.0 * n as f64) * tau);
    Tensor::from_fn(vec![n, n], |flat| {
        let (i, j) = (flat / n, flat % n);
        let p_row = (a(i, j) - row_lse[i]).exp();
        let p_col = (a(i, j) - col_lse[j]).exp();
        let diag = if i == j { sc::<T>(2.0) } else { T::zero() };
        coef * (p_row + p_col - diag)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded(seed: u64, n: usize) -> Vec<f64> {
        use rand::Rng;
        let mut r = crate::rng::derive_rng(seed, &[crate::rng::tag("kernel-test")]);
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn layernorm_constant_channels_collapse_to_beta() {
        // every location's channel vector is constant -> normalized to 0
        let x = Tensor::full(vec![4, 3], 2.5).unwrap();
        let gamma = Tensor::full(vec![4], 1.0).unwrap();
        let beta = Tensor::new(vec![4], vec![0.0, 1.0, -1.0, 0.5]).unwrap();
        let y = layernorm_cols(&x, &gamma, &beta, 1e-5).unwrap();
        for j in 0..3 {
            for i in 0..4 {
                assert_eq!(y.at2(i, j), beta.data()[i]);
            }
        }
    }

    #[test]
    fn layernorm_preserves_already_normalized_input() {
        // channel vectors with exact zero mean and unit population variance
        let x = Tensor::<f64>::new(vec![2, 3], vec![1.0, 1.0, 1.0, -1.0, -1.0, -1.0]).unwrap();
        let gamma = Tensor::full(vec![2], 1.0).unwrap();
        let beta = Tensor::zeros(vec![2]);
        let y = layernorm_cols(&x, &gamma, &beta, 1e-12).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((*a - *b).abs() < 1e-6);
        }
    }

    #[test]
    fn channel_layernorm_matches_per_location_oracle() {
        let x = Tensor::new(vec![4, 2, 2], seeded(1, 16)).unwrap();
        let gamma = Tensor::new(vec![4], vec![1.0, 0.5, 2.0, -1.0]).unwrap();
        let beta = Tensor::new(vec![4], vec![0.1, 0.0, -0.2, 0.3]).unwrap();
        let eps = 1e-5;
        let y = channel_layernorm(&x, &gamma, &beta, eps).unwrap();
        for h in 0..2 {
            for w in 0..2 {
                let at = |c: usize| x.data()[(c * 2 + h) * 2 + w];
                let mean = (0..4).map(at).sum::<f64>() / 4.0;
                let var = (0..4).map(|c| (at(c) - mean).powi(2)).sum::<f64>() / 4.0;
                for c in 0..4 {
                    let xhat = (at(c) - mean) / (var + eps).sqrt();
                    let want = gamma.data()[c] * xhat + beta.data()[c];
                    let got = y.data()[(c * 2 + h) * 2 + w];
                    assert!((got - want).abs() < 1e-12, "({c},{h},{w}): {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn channel_layernorm_rejects_bad_args() {
        let x = Tensor::new(vec![4, 2, 2], seeded(2, 16)).unwrap();
        let gamma = Tensor::full(vec![4], 1.0).unwrap();
        let beta = Tensor::zeros(vec![4]);
        assert!(channel_layernorm(&x, &gamma, &beta, 0.0).is_err());
        assert!(channel_layernorm(&x, &gamma, &beta, -1e-5).is_err());
        let short = Tensor::zeros(vec![3]);
        assert!(channel_layernorm(&x, &short, &beta, 1e-5).is_err());
        let flat = Tensor::new(vec![4, 4], seeded(3, 16)).unwrap();
        assert!(channel_layernorm(&flat, &gamma, &beta, 1e-5).is_err());
    }

    /// With gamma = 1, beta = 0 every location is normalized to mean ~0 and
    /// variance var/(var+eps), i.e. within eps/var of 1.
    #[test]
    fn layernorm_moments_property() {
        for seed in 0..50u64 {
            let c = 4 + (seed as usize % 5);
            let x = Tensor::new(vec![c, 6], seeded(100 + seed, c * 6)).unwrap();
            let gamma = Tensor::full(vec![c], 1.0).unwrap();
            let beta = Tensor::zeros(vec![c]);
            let eps = 1e-5;
            let y = layernorm_cols(&x, &gamma, &beta, eps).unwrap();
            for j in 0..6 {
                let col: Vec<f64> = (0..c).map(|i| y.at2(i, j)).collect();
                let xin: Vec<f64> = (0..c).map(|i| x.at2(i, j)).collect();
                let in_mean = xin.iter().sum::<f64>() / c as f64;
                let in_var = xin.iter().map(|v| (v - in_mean).powi(2)).sum::<f64>() / c as f64;
                let mean = col.iter().sum::<f64>() / c as f64;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                assert!(mean.abs() < 1e-9, "mean {mean}");
                if in_var > 1e-3 {
                    assert!((var - 1.0).abs() <= eps / in_var + 1e-12, "var {var} for input var {in_var}");
                }
            }
        }
    }

    #[test]
    fn max_all_first_winner_on_ties() {
        let x = Tensor::new(vec![2, 3], vec![0.0, 5.0, 1.0, 5.0, 2.0, 3.0]).unwrap();
        assert_eq!(max_all(&x).unwrap(), (5.0, 1));
        assert!(max_all(&Tensor::<f64>::zeros(vec![0])).is_err());
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![4, 2]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn l2_normalize_unit_norm_or_zero() {
        let v = Tensor::new(vec![3], vec![3.0, 0.0, 4.0]).unwrap();
        let n = l2_normalize_vec(&v).unwrap();
        assert!((n.data().iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        let z = Tensor::<f64>::zeros(vec![3]);
        assert_eq!(l2_normalize_vec(&z).unwrap().data(), &[0.0, 0.0, 0.0]);
    }
}
