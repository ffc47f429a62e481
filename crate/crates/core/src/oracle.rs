//! Brute-force ground truth: the N-particle Hamiltonian on the bosonic
//! occupation basis, exact evolution, correlators, chaos distances, special
//! observables, and residuals of candidate asymptotic states.

use crate::error::{Error, Result};
use crate::fock::{factorial, occ_basis, OccBasis, SymmetricState};
use crate::lattice::{HamiltonianSpec, LatticeSpec, OneParticleState, PBodyKernel};
use crate::linalg::{c, CMat, CVec};
use num_complex::Complex64 as C64;
use std::sync::Arc;

pub const DEFAULT_DIM_CAP: usize = 20_000;
/// Above this dimension the dense matrix exponential is abandoned for Lanczos.
pub const DENSE_EVOLVE_CAP: usize = 2_000;

enum Storage {
    Dense(CMat),
    Sparse(Vec<Vec<(usize, C64)>>),
}

/// N-particle operator on the symmetric occupation basis.
pub struct ExactOperator {
    pub lattice: LatticeSpec,
    pub n_particles: usize,
    pub basis: Arc<OccBasis>,
    storage: Storage,
}

impl ExactOperator {
    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn apply(&self, v: &CVec) -> CVec {
        match &self.storage {
            Storage::Dense(m) => m * v,
            Storage::Sparse(rows) => {
                let mut out = CVec::zeros(v.len());
                for (i, row) in rows.iter().enumerate() {
                    let mut acc = C64::default();
                    for &(j, val) in row {
                        acc += val * v[j];
                    }
                    out[i] = acc;
                }
                out
            }
        }
    }

    pub fn dense(&self) -> CMat {
        match &self.storage {
            Storage::Dense(m) => m.clone(),
            Storage::Sparse(rows) => {
                let d = rows.len();
                let mut m = CMat::zeros(d, d);
                for (i, row) in rows.iter().enumerate() {
                    for &(j, val) in row {
                        m[(i, j)] += val;
                    }
                }
                m
            }
        }
    }

    pub fn hermiticity_deviation(&self) -> f64 {
        let m = self.dense();
        crate::linalg::hermiticity_deviation(&m)
    }

    pub fn expectation(&self, psi: &SymmetricState) -> C64 {
        psi.amp.dotc(&self.apply(&psi.amp))
    }
}

struct Accumulator {
    dense: Option<CMat>,
    sparse: Option<Vec<Vec<(usize, C64)>>>,
}

impl Accumulator {
    fn new(dim: usize) -> Self {
        if dim <= DENSE_EVOLVE_CAP {
            Self { dense: Some(CMat::zeros(dim, dim)), sparse: None }
        } else {
            Self { dense: None, sparse: Some(vec![Vec::new(); dim]) }
        }
    }

    fn add(&mut self, row: usize, col: usize, val: C64) {
        if let Some(m) = &mut self.dense {
            m[(row, col)] += val;
        } else if let Some(rows) = &mut self.sparse {
            rows[row].push((col, val));
        }
    }

    fn finish(self) -> Storage {
        match (self.dense, self.sparse) {
            (Some(m), _) => Storage::Dense(m),
            (_, Some(mut rows)) => {
                for row in &mut rows {
                    row.sort_by_key(|&(j, _)| j);
                    let mut merged: Vec<(usize, C64)> = Vec::with_capacity(row.len());
                    for &(j, v) in row.iter() {
                        if let Some(last) = merged.last_mut() {
                            if last.0 == j {
                                last.1 += v;
                                continue;
                            }
                        }
                        merged.push((j, v));
                    }
                    *row = merged;
                }
                Storage::Sparse(rows)
            }
            _ => unreachable!("accumulator holds exactly one storage"),
        }
    }
}

fn ladder_fall(n: &[u8], k: &[u8]) -> Option<f64> {
    // product of sqrt(n_x (n_x-1) .. (n_x-k_x+1))
    let mut prod = 1.0f64;
    for (nx, kx) in n.iter().zip(k) {
        if kx > nx {
            return None;
        }
        for step in 0..*kx {
            prod *= (nx - step) as f64;
        }
    }
    Some(prod.sqrt())
}

fn ladder_raise(n: &[u8], k: &[u8]) -> f64 {
    let mut prod = 1.0f64;
    for (nx, kx) in n.iter().zip(k) {
        for step in 0..*kx {
            prod *= (nx + step + 1) as f64;
        }
    }
    prod.sqrt()
}

/// Adds `coeff * sum_{x,y} T(x;y) b+_{x_1}..b+_{x_p} b-_{y_1}..b-_{y_p}`
/// (pattern-compressed, `T` block-symmetric kernel values already carrying
/// the `h^p` measure factor in `coeff`).
fn add_normal_ordered(
    acc: &mut Accumulator,
    basis: &OccBasis,
    kernel: &PBodyKernel,
    lattice: &LatticeSpec,
    coeff: f64,
) {
    let m = lattice.m;
    let h = lattice.h;
    match kernel {
        PBodyKernel::OneBody(a) => {
            // h * sum (A/h) b+ b- = sum A[x][y] b+_x b-_y
            for (col, n) in basis.states.iter().enumerate() {
                for y in 0..m {
                    if n[y] == 0 {
                        continue;
                    }
                    for x in 0..m {
                        if a[(x, y)] == C64::default() {
                            continue;
                        }
                        let mut dst = n.clone();
                        dst[y] -= 1;
                        dst[x] += 1;
                        let row = basis.index_of(&dst);
                        let factor = ((n[y] as f64) * (dst[x] as f64)).sqrt();
                        acc.add(row, col, a[(x, y)] * c(coeff * factor));
                    }
                }
            }
        }
        PBodyKernel::TwoBodyMult(v) => {
            // diagonal: sum_{x,y} V(x,y) n_x (n_y - delta_{xy})
            for (col, n) in basis.states.iter().enumerate() {
                let mut s = 0.0;
                for x in 0..m {
                    for y in 0..m {
                        let pair = n[x] as f64 * (n[y] as f64 - if x == y { 1.0 } else { 0.0 });
                        s += v[(x, y)] * pair;
                    }
                }
                acc.add(col, col, c(coeff * s));
            }
        }
        PBodyKernel::Dense { p, vals } => {
            let p = *p;
            let dim = m.pow(p as u32);
            let create_basis = occ_basis(m, p);
            let scale = h.powi(p as i32);
            for (col, n) in basis.states.iter().enumerate() {
                for kann in create_basis.states.iter() {
                    let fall = match ladder_fall(n, kann) {
                        Some(f) => f,
                        None => continue,
                    };
                    let mult_ann =
                        factorial(p) / kann.iter().map(|&x| factorial(x as usize)).product::<f64>();
                    let mut mid = n.clone();
                    for x in 0..m {
                        mid[x] -= kann[x];
                    }
                    // representative linear index of the annihilation tuple
                    let ylin = occupation_representative_lin(kann, m);
                    for kcre in create_basis.states.iter() {
                        let mult_cre = factorial(p)
                            / kcre.iter().map(|&x| factorial(x as usize)).product::<f64>();
                        let raise = ladder_raise(&mid, kcre);
                        let mut dst = mid.clone();
                        for x in 0..m {
                            dst[x] += kcre[x];
                        }
                        let row = basis.index_of(&dst);
                        let xlin = occupation_representative_lin(kcre, m);
                        let t = vals[xlin * dim + ylin];
                        if t == C64::default() {
                            continue;
                        }
                        acc.add(row, col, t * c(coeff * scale * mult_ann * mult_cre * fall * raise));
                    }
                }
            }
        }
    }
}

fn occupation_representative_lin(k: &[u8], m: usize) -> usize {
    let mut lin = 0usize;
    for (site, &count) in k.iter().enumerate() {
        for _ in 0..count {
            lin = lin * m + site;
        }
    }
    lin
}

/// Assembles `H_N = sum_l N^{1-l} H_l^N` on the symmetric occupation basis.
pub fn assemble_hamiltonian(spec: &HamiltonianSpec, n_particles: usize) -> Result<ExactOperator> {
    assemble_with_weights(spec, n_particles, true)
}

/// Assembles a special observable `A_N` of the correlator class: same p-body
/// structure, but without the level weights `N^{1-l}`.
pub fn assemble_observable(
    lattice: &LatticeSpec,
    kernels: &[PBodyKernel],
    n_particles: usize,
) -> Result<ExactOperator> {
    let spec = HamiltonianSpec {
        lattice: *lattice,
        hbar: 1.0,
        mass: 1.0,
        schrodinger: None,
        levels: vec![kernels.to_vec()],
    };
    assemble_with_weights(&spec, n_particles, false)
}

fn assemble_with_weights(
    spec: &HamiltonianSpec,
    n_particles: usize,
    level_weights: bool,
) -> Result<ExactOperator> {
    let lattice = spec.lattice;
    let basis = occ_basis(lattice.m, n_particles);
    if basis.len() > DEFAULT_DIM_CAP {
        return Err(Error::DimensionCap { dim: basis.len(), cap: DEFAULT_DIM_CAP });
    }
    let nn = n_particles as f64;
    let mut acc = Accumulator::new(basis.len());
    for (l, kernels) in spec.levels.iter().enumerate() {
        let level_weight = if level_weights {
            nn.powi(1 - l as i32)
        } else {
            1.0
        };
        for kernel in kernels {
            let p = kernel.body_order();
            let coeff = level_weight / (nn.powi(p as i32) * factorial(p));
            add_normal_ordered(&mut acc, &basis, kernel, &lattice, coeff);
        }
    }
    Ok(ExactOperator { lattice, n_particles, basis, storage: acc.finish() })
}

/// `exp(-i H T) psi0`: dense scaling-and-squaring below the dimension cap,
/// Lanczos with step control above it. Unitarity enforced to 1e-10.
pub fn evolve_exact(op: &ExactOperator, psi0: &SymmetricState, t: f64) -> Result<SymmetricState> {
    if psi0.amp.len() != op.dim() {
        return Err(Error::Invalid("state dimension does not match operator".into()));
    }
    let amp = if op.dim() <= DENSE_EVOLVE_CAP {
        crate::linalg::evolve_dense(&op.dense(), &psi0.amp, t)
    } else {
        crate::linalg::evolve_lanczos(|v| op.apply(v), &psi0.amp, t, 30, 1e-12)
    };
    let drift = (amp.norm() - psi0.amp.norm()).abs();
    if drift > 1e-10 {
        return Err(Error::NormDrift { drift, tol: 1e-10 });
    }
    Ok(SymmetricState {
        lattice: psi0.lattice,
        n_particles: psi0.n_particles,
        basis: psi0.basis.clone(),
        amp,
    })
}

/// k-particle correlation tensor with unit trace for a unit state.
#[derive(Clone, Debug)]
pub struct CorrelatorTensor {
    pub k: usize,
    pub m: usize,
    /// dense values, index `lin(x_1..x_k) * m^k + lin(y_1..y_k)`
    pub vals: Vec<C64>,
}

impl CorrelatorTensor {
    /// The correlator as a one-body-style kernel-value matrix (k = 1 only).
    pub fn as_matrix(&self) -> CMat {
        assert_eq!(self.k, 1, "matrix view is for k = 1");
        CMat::from_fn(self.m, self.m, |x, y| self.vals[x * self.m + y])
    }

    pub fn trace(&self, h: f64) -> C64 {
        let dim = self.m.pow(self.k as u32);
        let mut acc = C64::default();
        for lin in 0..dim {
            acc += self.vals[lin * dim + lin];
        }
        acc * c(h.powi(self.k as i32))
    }
}

/// Partial trace over `N - k` particles in occupation combinatorics:
/// `R_k(x; y) = (N-k)!/N! h^{-k} <Psi| b+_{y..} b-_{x..} |Psi>`.
pub fn correlator_k(psi: &SymmetricState, k: usize) -> Result<CorrelatorTensor> {
    let n_particles = psi.n_particles;
    if k > n_particles {
        return Err(Error::Invalid(format!(
            "correlator order {k} exceeds particle number {n_particles}"
        )));
    }
    let m = psi.lattice.m;
    let h = psi.lattice.h;
    let basis = &psi.basis;
    let patterns = occ_basis(m, k);
    let front = factorial(n_particles - k) / factorial(n_particles) / h.powi(k as i32);
    // pattern-level expectation values
    let mut pattern_vals =
        vec![C64::default(); patterns.len() * patterns.len()];
    for (col, n) in basis.states.iter().enumerate() {
        if psi.amp[col] == C64::default() {
            continue;
        }
        for (ai, ka) in patterns.states.iter().enumerate() {
            let fall = match ladder_fall(n, ka) {
                Some(f) => f,
                None => continue,
            };
            let mut mid = n.clone();
            for x in 0..m {
                mid[x] -= ka[x];
            }
            for (ci, kc) in patterns.states.iter().enumerate() {
                let raise = ladder_raise(&mid, kc);
                let mut dst = mid.clone();
                for x in 0..m {
                    dst[x] += kc[x];
                }
                let row = basis.index_of(&dst);
                // <Psi| b+(kc) b-(ka) |Psi> with creation pattern kc = y-block
                pattern_vals[ci * patterns.len() + ai] +=
                    psi.amp[row].conj() * psi.amp[col] * c(fall * raise);
            }
        }
    }
    let dim = m.pow(k as u32);
    let mut vals = vec![C64::default(); dim * dim];
    for xlin in 0..dim {
        let xocc = lin_occupation(xlin, k, m);
        let xi = patterns.index_of(&xocc);
        for ylin in 0..dim {
            let yocc = lin_occupation(ylin, k, m);
            let yi = patterns.index_of(&yocc);
            vals[xlin * dim + ylin] = pattern_vals[yi * patterns.len() + xi] * c(front);
        }
    }
    Ok(CorrelatorTensor { k, m, vals })
}

fn lin_occupation(mut lin: usize, k: usize, m: usize) -> Vec<u8> {
    let mut occ = vec![0u8; m];
    for _ in 0..k {
        occ[lin % m] += 1;
        lin /= m;
    }
    occ
}

/// Best product-state approximation: returns
/// `(min_c ||Psi - c phi^N||, c) = (sqrt(1 - |<phi^N, Psi>|^2), <phi^N, Psi>)`.
pub fn chaos_distance(psi: &SymmetricState, phi: &OneParticleState) -> (f64, C64) {
    let product = SymmetricState::product_state(psi.lattice, phi, psi.n_particles);
    let overlap = product.inner(psi);
    let dist_sq = (1.0 - overlap.norm_sqr()).max(0.0);
    (dist_sq.sqrt(), overlap)
}

/// Mean of a special observable built from `A^{(p)}` kernels (Eq.-3 class).
pub fn special_observable_mean(
    psi: &SymmetricState,
    kernels: &[PBodyKernel],
    lattice: &LatticeSpec,
) -> Result<C64> {
    for kernel in kernels {
        if kernel.body_order() > psi.n_particles {
            return Err(Error::Invalid(
                "observable body order exceeds particle number".into(),
            ));
        }
    }
    let op = assemble_observable(lattice, kernels, psi.n_particles)?;
    Ok(op.expectation(psi))
}

/// `|| i (Psi(t+d) - Psi(t-d)) / 2d - H Psi(t) ||` with `d` halved until the
/// value is stable to two significant digits.
pub fn residual_norm(
    op: &ExactOperator,
    state_at: &dyn Fn(f64) -> SymmetricState,
    t: f64,
    delta0: f64,
    delta_min: f64,
) -> Result<f64> {
    let eval = |delta: f64| -> f64 {
        let plus = state_at(t + delta);
        let minus = state_at(t - delta);
        let center = state_at(t);
        let deriv = (&plus.amp - &minus.amp) * C64::new(0.0, 1.0 / (2.0 * delta));
        (deriv - op.apply(&center.amp)).norm()
    };
    let mut delta = delta0;
    let mut prev = eval(delta);
    loop {
        let next_delta = delta / 2.0;
        if next_delta < delta_min {
            return Ok(prev);
        }
        let next = eval(next_delta);
        if (next - prev).abs() <= 5e-3 * next.abs().max(1e-300) {
            return Ok(next);
        }
        delta = next_delta;
        prev = next;
        if delta < 1e-12 {
            return Err(Error::NonConvergentStencil);
        }
    }
}

/// Trace distance between the k=1 correlator and the projector onto `phi`.
pub fn correlator_product_distance(
    psi: &SymmetricState,
    phi: &OneParticleState,
) -> Result<f64> {
    let corr = correlator_k(psi, 1)?;
    let m = psi.lattice.m;
    let target = CMat::from_fn(m, m, |x, y| phi.amp[x] * phi.amp[y].conj());
    let diff = corr.as_matrix() - target;
    Ok(crate::linalg::kernel_trace_norm(psi.lattice.h, &diff))
}
