//! Spectral and max-norm quantities for dense matrices.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative threshold below which a singular value is treated as zero.
pub const RANK_TOL: f64 = 1e-8;

/// A singular triple `(sigma, u, v)` with `M v = sigma u`.
#[derive(Debug, Clone)]
pub struct SingularTriple {
    pub sigma: f64,
    pub u: DVector<f64>,
    pub v: DVector<f64>,
}

/// Largest singular value, computed as the square root of the top eigenvalue
/// of the smaller Gram matrix.
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let gram = smaller_gram(m);
    let eig = SymmetricEigen::new(gram);
    eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max).max(0.0).sqrt()
}

/// Sum of singular values.
pub fn nuclear_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().iter().sum()
}

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    let mut sv: Vec<f64> = m.clone().singular_values().iter().cloned().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

/// Number of singular values above `RANK_TOL * sigma_1`.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let sv = singular_values(m);
    match sv.first() {
        Some(&s1) if s1 > 0.0 => sv.iter().filter(|&&s| s > RANK_TOL * s1).count(),
        _ => 0,
    }
}

/// The `k` leading singular triples, obtained from the eigendecomposition of
/// the smaller Gram matrix. Triples with zero singular value are omitted.
pub fn top_singular_triples(m: &DMatrix<f64>, k: usize) -> Vec<SingularTriple> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let wide = rows < cols;
    let gram = smaller_gram(m);
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());

    let mut out = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let lambda = eig.eigenvalues[idx].max(0.0);
        let sigma = lambda.sqrt();
        if sigma <= f64::EPSILON * 16.0 {
            break;
        }
        let w = eig.eigenvectors.column(idx).into_owned();
        // For a tall matrix the Gram is MᵀM and `w` is a right vector; for a
        // wide one it is MMᵀ and `w` is a left vector.
        let (u, v) = if wide {
            let v = m.transpose() * &w / sigma;
            (w, v)
        } else {
            let u = m * &w / sigma;
            (u, w)
        };
        out.push(SingularTriple { sigma, u, v });
    }
    out
}

fn smaller_gram(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() < m.ncols() {
        m * m.transpose()
    } else {
        m.transpose() * m
    }
}

/// Entrywise ℓ∞ norm.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Maximum row ℓ₂ norm (the 2→∞ operator norm).
pub fn max_row_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|r| r.norm()).fold(0.0_f64, f64::max)
}

/// Frobenius inner product.
pub fn inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.dot(b)
}

/// Certified max-norm product of an explicit factorization `U Vᵀ`.
pub fn factor_product_bound(u: &DMatrix<f64>, v: &DMatrix<f64>) -> f64 {
    max_row_norm(u) * max_row_norm(v)
}

/// Two explicit trivial factorizations `I·M` and `M·I` give the max norm
/// upper bound `min(max column norm, max row norm)`.
pub fn trivial_max_norm_bound(m: &DMatrix<f64>) -> f64 {
    let row = max_row_norm(m);
    let col = m.column_iter().map(|c| c.norm()).fold(0.0_f64, f64::max);
    row.min(col)
}

/// Lower and upper bounds on the max norm of `m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaxNormBounds {
    pub lower: f64,
    pub upper: f64,
}

/// Brackets `‖M‖_max` between `‖M‖_*/√(nm)` and the smallest of
/// `√rank·‖M‖_∞`, `‖M‖_*`, the trivial factorizations and a short local
/// search over balanced SVD factors `(U₀R)(V₀R⁻ᵀ)ᵀ`.
///
/// `rank_hint` sets the factor width of the local search (clamped to the
/// numerical rank); any truncation residual is charged to the certificate.
pub fn max_norm_bound(m: &DMatrix<f64>, rank_hint: usize) -> MaxNormBounds {
    let (n, k) = m.shape();
    if n == 0 || k == 0 || max_abs(m) == 0.0 {
        return MaxNormBounds { lower: 0.0, upper: 0.0 };
    }
    let nuc = nuclear_norm(m);
    let lower = nuc / ((n * k) as f64).sqrt();

    let rank = numerical_rank(m);
    let mut upper = nuc.min(trivial_max_norm_bound(m));
    upper = upper.min((rank as f64).sqrt() * max_abs(m));
    let width = if rank_hint == 0 { rank } else { rank_hint.min(rank) };
    upper = upper.min(local_factor_search(m, width.max(1), 200));

    // the lower bound is exact arithmetic on the same singular values; guard
    // against a last-ulp inversion when the sandwich collapses
    MaxNormBounds {
        lower: lower.min(upper),
        upper,
    }
}

/// Hill-climbing over invertible `R` in `M = (U₀R)(V₀R⁻ᵀ)ᵀ`, starting from the
/// balanced SVD factors `U₀ = U√Σ`, `V₀ = V√Σ` truncated at `rank`.
fn local_factor_search(m: &DMatrix<f64>, rank: usize, iters: usize) -> f64 {
    let svd = m.clone().svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return f64::INFINITY,
    };
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap()
    });
    let r = rank.min(order.len());
    let mut u0 = DMatrix::zeros(m.nrows(), r);
    let mut v0 = DMatrix::zeros(m.ncols(), r);
    for (j, &idx) in order.iter().take(r).enumerate() {
        let s = svd.singular_values[idx].sqrt();
        u0.set_column(j, &(u.column(idx) * s));
        v0.set_column(j, &(vt.row(idx).transpose() * s));
    }
    let score = |rm: &DMatrix<f64>| -> f64 {
        match rm.clone().try_inverse() {
            Some(inv) => factor_product_bound(&(&u0 * rm), &(&v0 * inv.transpose())),
            None => f64::INFINITY,
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x6d61_786e);
    let mut best_r = DMatrix::<f64>::identity(r, r);
    let mut best = score(&best_r);
    let mut step = 0.3;
    for _ in 0..iters {
        let perturb = DMatrix::from_fn(r, r, |_, _| rng.random_range(-1.0..1.0) * step);
        let cand = &best_r + &best_r * perturb;
        let val = score(&cand);
        if val < best {
            best = val;
            best_r = cand;
        } else {
            step *= 0.98;
        }
    }
    // exact product U Vᵀ is m only up to rounding; add the residual's trivial
    // factorization so the returned value stays a certificate
    let inv = best_r.clone().try_inverse().unwrap_or_else(|| DMatrix::identity(r, r));
    let uf = &u0 * &best_r;
    let vf = &v0 * inv.transpose();
    let resid = m - &uf * vf.transpose();
    best + trivial_max_norm_bound(&resid)
}
