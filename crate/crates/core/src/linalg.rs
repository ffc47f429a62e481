//! Dense complex linear algebra helpers shared across the engine.
//!
//! Vectors live on the lattice with the measure-weighted inner product
//! `<u, v> = h * sum conj(u_i) v_i`; two-point kernels are stored as plain
//! matrices of kernel values and every contraction carries an explicit `h`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;

pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

pub const I: C64 = C64 { re: 0.0, im: 1.0 };

pub fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

/// Measure-weighted inner product `h * sum conj(u) v`.
pub fn inner(h: f64, u: &CVec, v: &CVec) -> C64 {
    u.dotc(v) * c(h)
}

pub fn norm(h: f64, u: &CVec) -> f64 {
    (h * u.norm_squared()).sqrt()
}

/// Kernel-value contraction `(K v)(x) = h * sum_y K(x,y) v(y)`.
pub fn apply_kernel(h: f64, k: &CMat, v: &CVec) -> CVec {
    (k * v) * c(h)
}

/// Kernel composition `(A B)(x,y) = h * sum_z A(x,z) B(z,y)`.
pub fn compose_kernels(h: f64, a: &CMat, b: &CMat) -> CMat {
    (a * b) * c(h)
}

/// Full two-slot contraction `h^2 * sum_{x,y} K(x,y) R(x,y)` (no conjugation).
pub fn pair_kernels(h: f64, k: &CMat, r: &CMat) -> C64 {
    let mut acc = C64::default();
    for x in 0..k.nrows() {
        for y in 0..k.ncols() {
            acc += k[(x, y)] * r[(x, y)];
        }
    }
    acc * c(h * h)
}

/// Projects `v` onto the orthogonal complement of the unit vector `phi`.
pub fn project_out(h: f64, phi: &CVec, v: &CVec) -> CVec {
    v - phi * inner(h, phi, v)
}

/// Hermitian part `(K + K^dagger)/2` together with the size of the correction.
pub fn hermitize(k: &CMat) -> (CMat, f64) {
    let sym = (k + k.adjoint()) * c(0.5);
    let dev = (k - &sym).norm();
    (sym, dev)
}

pub fn hermiticity_deviation(k: &CMat) -> f64 {
    (k - k.adjoint()).norm() * 0.5
}

/// Spectral norm of the operator whose kernel values are `k` (operator form is `h*k`).
pub fn kernel_spectral_norm(h: f64, k: &CMat) -> f64 {
    let op = k * c(h);
    op.svd(false, false).singular_values.max()
}

/// Trace norm (sum of singular values) of the operator with kernel values `k`.
pub fn kernel_trace_norm(h: f64, k: &CMat) -> f64 {
    let op = k * c(h);
    op.svd(false, false).singular_values.sum()
}

/// Condition number estimate from the SVD.
pub fn cond(m: &CMat) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let smin = sv.min();
    if smin == 0.0 {
        f64::INFINITY
    } else {
        sv.max() / smin
    }
}

pub fn solve(m: &CMat, rhs: &CMat) -> Option<CMat> {
    m.clone().lu().solve(rhs)
}

/// `exp(-i H t) v` for Hermitian `H` via Pade scaling-and-squaring.
pub fn evolve_dense(hmat: &CMat, v: &CVec, t: f64) -> CVec {
    let gen = hmat * C64::new(0.0, -t);
    gen.exp() * v
}

/// `exp(-i H t) v` by Lanczos propagation with step-size control, given the
/// Hermitian matrix-vector product `apply`.
///
/// `krylov_dim` ~ 30 is plenty for the spectra met here; steps are halved
/// until the a-posteriori residual estimate passes.
pub fn evolve_lanczos<F>(apply: F, v: &CVec, t: f64, krylov_dim: usize, tol: f64) -> CVec
where
    F: Fn(&CVec) -> CVec,
{
    let mut state = v.clone();
    let mut remaining = t;
    let mut dt = t;
    let max_halvings = 40;
    while remaining.abs() > 1e-300 {
        if dt.abs() > remaining.abs() {
            dt = remaining;
        }
        let mut halved = 0;
        loop {
            let (next, err) = lanczos_step(&apply, &state, dt, krylov_dim);
            if err <= tol * state.norm() || halved >= max_halvings {
                state = next;
                remaining -= dt;
                if err <= 0.1 * tol * state.norm() {
                    dt *= 2.0; // cheap growth; clamped at loop head
                }
                break;
            }
            dt *= 0.5;
            halved += 1;
        }
    }
    state
}

fn lanczos_step<F>(apply: &F, v: &CVec, dt: f64, m: usize) -> (CVec, f64)
where
    F: Fn(&CVec) -> CVec,
{
    let n = v.len();
    let m = m.min(n);
    let beta0 = v.norm();
    if beta0 == 0.0 {
        return (v.clone(), 0.0);
    }
    let mut basis: Vec<CVec> = Vec::with_capacity(m);
    basis.push(v / c(beta0));
    let mut alphas = Vec::with_capacity(m);
    let mut betas = Vec::with_capacity(m);
    let mut used = m;
    for j in 0..m {
        let mut w = apply(&basis[j]);
        let a = basis[j].dotc(&w);
        w -= &basis[j] * a;
        if j > 0 {
            let b = c(betas[j - 1]);
            w -= &basis[j - 1] * b;
        }
        // full reorthogonalization: cheap at these sizes, kills drift
        for q in &basis {
            let overlap = q.dotc(&w);
            w -= q * overlap;
        }
        alphas.push(a.re);
        let b = w.norm();
        if j + 1 < m {
            if b < 1e-14 {
                used = j + 1;
                break;
            }
            betas.push(b);
            basis.push(w / c(b));
        } else {
            betas.push(b);
        }
    }
    let k = used.min(alphas.len());
    let mut tri = DMatrix::<f64>::zeros(k, k);
    for j in 0..k {
        tri[(j, j)] = alphas[j];
        if j + 1 < k {
            tri[(j, j + 1)] = betas[j];
            tri[(j + 1, j)] = betas[j];
        }
    }
    let eig = tri.symmetric_eigen();
    // exp(-i dt T) e_1 through the eigenbasis of the tridiagonal
    let mut small = DVector::<C64>::zeros(k);
    for a in 0..k {
        let mut acc = C64::default();
        for lam in 0..k {
            let phase = C64::new(0.0, -dt * eig.eigenvalues[lam]).exp();
            acc += c(eig.eigenvectors[(a, lam)] * eig.eigenvectors[(0, lam)]) * phase;
        }
        small[a] = acc;
    }
    let mut out = CVec::zeros(n);
    for (j, q) in basis.iter().take(k).enumerate() {
        out += q * (small[j] * c(beta0));
    }
    let err = if k < alphas.len() || k == 0 {
        0.0
    } else {
        (betas[k - 1] * small[k - 1].norm() * beta0).abs()
    };
    (out, err)
}

/// Least squares fit of `ln y` against `ln x`; returns (slope, stderr).
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> crate::error::Result<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(crate::error::Error::Invalid(
            "slope fit needs at least 3 matched points".into(),
        ));
    }
    if xs.iter().chain(ys.iter()).any(|&v| v <= 0.0) {
        return Err(crate::error::Error::Invalid(
            "slope fit requires positive data".into(),
        ));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let stderr = (ss_res / (n - 2.0) / sxx).sqrt();
    Ok((slope, stderr))
}
