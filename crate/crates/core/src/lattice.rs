//! Discretized measure space, one-particle states, and the leveled family of
//! p-body Hamiltonian kernels with their classical functionals.

use crate::error::{Error, Result};
use crate::linalg::{c, CMat, CVec};
use num_complex::Complex64 as C64;
use rand::Rng;

pub const DEFAULT_NORM_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    Periodic1D,
    Abstract,
}

/// Finite realization of the measure space: `m` sites of uniform weight `h`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatticeSpec {
    pub m: usize,
    pub h: f64,
    pub topology: Topology,
}

impl LatticeSpec {
    pub fn new(m: usize, h: f64, topology: Topology) -> Result<Self> {
        if m < 2 {
            return Err(Error::Invalid(format!("site count {m} < 2")));
        }
        if !(h > 0.0) {
            return Err(Error::Invalid(format!("site weight {h} must be positive")));
        }
        Ok(Self { m, h, topology })
    }

    pub fn unit(m: usize) -> Self {
        Self { m, h: 1.0, topology: Topology::Periodic1D }
    }

    pub fn inner(&self, u: &CVec, v: &CVec) -> C64 {
        crate::linalg::inner(self.h, u, v)
    }

    pub fn norm(&self, u: &CVec) -> f64 {
        crate::linalg::norm(self.h, u)
    }
}

/// One-particle amplitude vector; `phi^t`, `u^t`, `v^t` and `chi` all live here.
#[derive(Clone, Debug, PartialEq)]
pub struct OneParticleState {
    pub amp: CVec,
}

impl OneParticleState {
    pub fn new(amp: CVec) -> Self {
        Self { amp }
    }

    pub fn norm(&self, lattice: &LatticeSpec) -> f64 {
        lattice.norm(&self.amp)
    }

    pub fn normalized(&self, lattice: &LatticeSpec) -> OneParticleState {
        let n = self.norm(lattice);
        OneParticleState { amp: &self.amp / c(n) }
    }

    pub fn check_unit(&self, lattice: &LatticeSpec, tol: f64) -> Result<()> {
        let drift = (self.norm(lattice) - 1.0).abs();
        if drift > tol {
            return Err(Error::NormDrift { drift, tol });
        }
        Ok(())
    }
}

/// A p-body kernel. Dense tensors hold kernel values `K(x_1..x_p; y_1..y_p)`;
/// contractions carry one factor of `h` per integrated slot. Multiplicative
/// two-body potentials keep their implicit delta structure.
#[derive(Clone, Debug)]
pub enum PBodyKernel {
    /// One-body operator in matrix form: kernel values are `a[x][y] / h`.
    OneBody(CMat),
    /// Two-body multiplicative potential `v(x,y)` (real symmetric), kernel
    /// values `v(x,y) delta(x-x') delta(y-y') / h^2`.
    TwoBodyMult(nalgebra::DMatrix<f64>),
    /// Dense kernel values, index layout `lin(x_1..x_p)*m^p + lin(y_1..y_p)`.
    Dense { p: usize, vals: Vec<C64> },
}

impl PBodyKernel {
    pub fn body_order(&self) -> usize {
        match self {
            PBodyKernel::OneBody(_) => 1,
            PBodyKernel::TwoBodyMult(_) => 2,
            PBodyKernel::Dense { p, .. } => *p,
        }
    }

    /// Enforces Hermiticity (and block permutation symmetry for dense kernels)
    /// by symmetrization; returns the size of the applied correction.
    pub fn symmetrized(self, m: usize) -> (Self, f64) {
        match self {
            PBodyKernel::OneBody(a) => {
                let (sym, dev) = crate::linalg::hermitize(&a);
                (PBodyKernel::OneBody(sym), dev)
            }
            PBodyKernel::TwoBodyMult(v) => {
                let sym = (&v + v.transpose()) * 0.5;
                let dev = (&v - &sym).norm();
                (PBodyKernel::TwoBodyMult(sym), dev)
            }
            PBodyKernel::Dense { p, vals } => {
                let block = symmetrize_blocks(&vals, p, m);
                let herm = hermitize_dense(&block, p, m);
                let dev: f64 = vals
                    .iter()
                    .zip(&herm)
                    .map(|(a, b)| (a - b).norm_sqr())
                    .sum::<f64>()
                    .sqrt();
                (PBodyKernel::Dense { p, vals: herm }, dev)
            }
        }
    }

    pub fn hermiticity_deviation(&self, m: usize) -> f64 {
        match self {
            PBodyKernel::OneBody(a) => crate::linalg::hermiticity_deviation(a),
            PBodyKernel::TwoBodyMult(v) => (v - v.transpose()).norm() * 0.5,
            PBodyKernel::Dense { p, vals } => {
                let herm = hermitize_dense(vals, *p, m);
                vals.iter()
                    .zip(&herm)
                    .map(|(a, b)| (a - b).norm_sqr())
                    .sum::<f64>()
                    .sqrt()
            }
        }
    }

    /// Dense kernel values as a flat tensor (delta structure materialized).
    pub fn to_dense(&self, lattice: &LatticeSpec) -> Vec<C64> {
        let m = lattice.m;
        let h = lattice.h;
        match self {
            PBodyKernel::OneBody(a) => {
                let mut vals = vec![C64::default(); m * m];
                for x in 0..m {
                    for y in 0..m {
                        vals[x * m + y] = a[(x, y)] / c(h);
                    }
                }
                vals
            }
            PBodyKernel::TwoBodyMult(v) => {
                // block-symmetrized delta structure: acts identically on
                // symmetric functions but is slot-symmetric entrywise, which
                // the partial contractions rely on
                let mm = m * m;
                let mut vals = vec![C64::default(); mm * mm];
                for x1 in 0..m {
                    for x2 in 0..m {
                        let xl = x1 * m + x2;
                        let xs = x2 * m + x1;
                        vals[xl * mm + xl] += c(0.5 * v[(x1, x2)] / (h * h));
                        vals[xl * mm + xs] += c(0.5 * v[(x1, x2)] / (h * h));
                    }
                }
                vals
            }
            PBodyKernel::Dense { vals, .. } => vals.clone(),
        }
    }
}

fn multi_unrank(mut lin: usize, p: usize, m: usize) -> Vec<usize> {
    let mut idx = vec![0usize; p];
    for slot in (0..p).rev() {
        idx[slot] = lin % m;
        lin /= m;
    }
    idx
}

fn multi_rank(idx: &[usize], m: usize) -> usize {
    idx.iter().fold(0, |acc, &i| acc * m + i)
}

fn permutations(p: usize) -> Vec<Vec<usize>> {
    let mut perms = vec![vec![]];
    for k in 0..p {
        let mut next = Vec::new();
        for perm in &perms {
            for pos in 0..=perm.len() {
                let mut q = perm.clone();
                q.insert(pos, k);
                next.push(q);
            }
        }
        perms = next;
    }
    perms
}

fn symmetrize_blocks(vals: &[C64], p: usize, m: usize) -> Vec<C64> {
    let perms = permutations(p);
    let dim = m.pow(p as u32);
    let mut out = vec![C64::default(); dim * dim];
    let weight = c(1.0 / (perms.len() * perms.len()) as f64);
    for xl in 0..dim {
        let xs = multi_unrank(xl, p, m);
        for yl in 0..dim {
            let ys = multi_unrank(yl, p, m);
            let mut acc = C64::default();
            for px in &perms {
                let xp: Vec<usize> = px.iter().map(|&k| xs[k]).collect();
                for py in &perms {
                    let yp: Vec<usize> = py.iter().map(|&k| ys[k]).collect();
                    acc += vals[multi_rank(&xp, m) * dim + multi_rank(&yp, m)];
                }
            }
            out[xl * dim + yl] = acc * weight;
        }
    }
    out
}

fn hermitize_dense(vals: &[C64], p: usize, m: usize) -> Vec<C64> {
    let dim = m.pow(p as u32);
    let mut out = vec![C64::default(); dim * dim];
    for xl in 0..dim {
        for yl in 0..dim {
            out[xl * dim + yl] = (vals[xl * dim + yl] + vals[yl * dim + xl].conj()) * c(0.5);
        }
    }
    out
}

/// Second functional derivatives of a classical functional at `phi`, stored as
/// kernel values: `pm = d2/dphi* dphi`, `pp = d2/dphi* dphi*`, `mm = d2/dphi dphi`.
#[derive(Clone, Debug)]
pub struct HessianBlocks {
    pub pm: CMat,
    pub pp: CMat,
    pub mm: CMat,
}

/// Leveled family of p-body kernels; level `l` carries global weight `N^{1-l}`.
#[derive(Clone, Debug)]
pub struct HamiltonianSpec {
    pub lattice: LatticeSpec,
    pub hbar: f64,
    pub mass: f64,
    /// Builder data kept for serialization when the spec came from
    /// `build_schrodinger_spec`.
    pub schrodinger: Option<SchrodingerData>,
    pub levels: Vec<Vec<PBodyKernel>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchrodingerData {
    pub u: Vec<f64>,
    pub v: nalgebra::DMatrix<f64>,
}

impl HamiltonianSpec {
    /// Assembles a spec from raw kernels, enforcing Hermiticity by
    /// symmetrization (warns when the correction is significant).
    pub fn from_kernels(lattice: LatticeSpec, levels: Vec<Vec<PBodyKernel>>) -> Self {
        let levels = levels
            .into_iter()
            .map(|lv| {
                lv.into_iter()
                    .map(|k| {
                        let (sym, dev) = k.symmetrized(lattice.m);
                        if dev > 1e-10 {
                            log::warn!("kernel symmetrization correction {dev:.3e}");
                        }
                        sym
                    })
                    .collect()
            })
            .collect();
        Self { lattice, hbar: 1.0, mass: 1.0, schrodinger: None, levels }
    }

    pub fn top_level(&self) -> usize {
        self.levels.len().saturating_sub(1)
    }

    pub fn max_body_order(&self) -> usize {
        self.levels
            .iter()
            .flat_map(|lv| lv.iter().map(|k| k.body_order()))
            .max()
            .unwrap_or(0)
    }

    pub fn kernels_at(&self, level: usize) -> &[PBodyKernel] {
        self.levels.get(level).map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// `H_l(phi*, phi) = sum_p (1/p!) <phi^p, H_l^(p) phi^p>` with measure weights.
    pub fn classical_functional(&self, level: usize, phi: &OneParticleState) -> Result<f64> {
        let val = self.classical_functional_complex(level, phi);
        let tol = 1e-12 * (1.0 + val.norm());
        if val.im.abs() > tol {
            return Err(Error::ImaginaryResidue(val.im.abs()));
        }
        Ok(val.re)
    }

    pub fn classical_functional_complex(&self, level: usize, phi: &OneParticleState) -> C64 {
        let h = self.lattice.h;
        let m = self.lattice.m;
        let mut acc = C64::default();
        for kernel in self.kernels_at(level) {
            match kernel {
                PBodyKernel::OneBody(a) => {
                    acc += crate::linalg::inner(h, &phi.amp, &(a * &phi.amp));
                }
                PBodyKernel::TwoBodyMult(v) => {
                    let dens: Vec<f64> = phi.amp.iter().map(|z| z.norm_sqr()).collect();
                    let mut s = 0.0;
                    for x in 0..m {
                        for y in 0..m {
                            s += v[(x, y)] * dens[x] * dens[y];
                        }
                    }
                    acc += c(0.5 * h * h * s);
                }
                PBodyKernel::Dense { p, vals } => {
                    acc += dense_functional(vals, *p, m, h, &phi.amp);
                }
            }
        }
        acc
    }

    /// `dH_l/dphi*(x)` with the measure-weight convention
    /// `d/de H(phi + e*delta) = 2 Re <grad, delta>`.
    pub fn grad_phi_star(&self, level: usize, phi: &OneParticleState) -> CVec {
        let h = self.lattice.h;
        let m = self.lattice.m;
        let mut grad = CVec::zeros(m);
        for kernel in self.kernels_at(level) {
            match kernel {
                PBodyKernel::OneBody(a) => grad += a * &phi.amp,
                PBodyKernel::TwoBodyMult(v) => {
                    let dens: Vec<f64> = phi.amp.iter().map(|z| z.norm_sqr()).collect();
                    for x in 0..m {
                        let w: f64 = (0..m).map(|y| h * v[(x, y)] * dens[y]).sum();
                        grad[x] += c(w) * phi.amp[x];
                    }
                }
                PBodyKernel::Dense { p, vals } => {
                    grad += dense_grad(vals, *p, m, h, &phi.amp);
                }
            }
        }
        grad
    }

    /// Kernel-value matrices of the three second functional derivatives.
    pub fn hessian_blocks(&self, level: usize, phi: &OneParticleState) -> HessianBlocks {
        let h = self.lattice.h;
        let m = self.lattice.m;
        let mut pm = CMat::zeros(m, m);
        let mut pp = CMat::zeros(m, m);
        for kernel in self.kernels_at(level) {
            match kernel {
                PBodyKernel::OneBody(a) => {
                    pm += a / c(h);
                }
                PBodyKernel::TwoBodyMult(v) => {
                    let dens: Vec<f64> = phi.amp.iter().map(|z| z.norm_sqr()).collect();
                    for x in 0..m {
                        let w: f64 = (0..m).map(|z| h * v[(x, z)] * dens[z]).sum();
                        pm[(x, x)] += c(w / h);
                        for y in 0..m {
                            pm[(x, y)] += c(v[(x, y)]) * phi.amp[x] * phi.amp[y].conj();
                            pp[(x, y)] += c(v[(x, y)]) * phi.amp[x] * phi.amp[y];
                        }
                    }
                }
                PBodyKernel::Dense { p, vals } => {
                    let (dpm, dpp) = dense_hessian(vals, *p, m, h, &phi.amp);
                    pm += dpm;
                    pp += dpp;
                }
            }
        }
        let mm = pp.map(|z| z.conj());
        HessianBlocks { pm, pp, mm }
    }
}

fn dense_functional(vals: &[C64], p: usize, m: usize, h: f64, phi: &CVec) -> C64 {
    let dim = m.pow(p as u32);
    let mut acc = C64::default();
    for xl in 0..dim {
        let xs = multi_unrank(xl, p, m);
        let cx: C64 = xs.iter().map(|&x| phi[x].conj()).product();
        for yl in 0..dim {
            let ys = multi_unrank(yl, p, m);
            let cy: C64 = ys.iter().map(|&y| phi[y]).product();
            acc += cx * vals[xl * dim + yl] * cy;
        }
    }
    let fact: f64 = (1..=p).map(|k| k as f64).product();
    acc * c(h.powi(2 * p as i32) / fact)
}

fn dense_grad(vals: &[C64], p: usize, m: usize, h: f64, phi: &CVec) -> CVec {
    let dim = m.pow(p as u32);
    let mut grad = CVec::zeros(m);
    for xl in 0..dim {
        let xs = multi_unrank(xl, p, m);
        let cx_tail: C64 = xs[1..].iter().map(|&x| phi[x].conj()).product();
        for yl in 0..dim {
            let ys = multi_unrank(yl, p, m);
            let cy: C64 = ys.iter().map(|&y| phi[y]).product();
            grad[xs[0]] += cx_tail * vals[xl * dim + yl] * cy;
        }
    }
    let fact: f64 = (1..=p.saturating_sub(1)).map(|k| k as f64).product();
    grad * c(h.powi(2 * p as i32 - 1) / fact)
}

fn dense_hessian(vals: &[C64], p: usize, m: usize, h: f64, phi: &CVec) -> (CMat, CMat) {
    let dim = m.pow(p as u32);
    let mut pm = CMat::zeros(m, m);
    let mut pp = CMat::zeros(m, m);
    // each free-slot pair is pinned to the first slot of its block; block
    // symmetry supplies the p*p slot choices, giving p^2/p! = p/(p-1)!
    let fact1: f64 = (1..=p.saturating_sub(1)).map(|k| k as f64).product();
    let scale_pm = c(h.powi(2 * p as i32 - 2) / fact1);
    for xl in 0..dim {
        let xs = multi_unrank(xl, p, m);
        let cx_tail: C64 = xs[1..].iter().map(|&x| phi[x].conj()).product();
        for yl in 0..dim {
            let ys = multi_unrank(yl, p, m);
            let cy_tail: C64 = ys[1..].iter().map(|&y| phi[y]).product();
            let t = vals[xl * dim + yl];
            pm[(xs[0], ys[0])] += cx_tail * t * cy_tail * c(p as f64) * scale_pm;
            if p >= 2 {
                let cx_tail2: C64 = xs[2..].iter().map(|&x| phi[x].conj()).product();
                let cy_full: C64 = ys.iter().map(|&y| phi[y]).product();
                let fact2: f64 = (1..=p - 2).map(|k| k as f64).product();
                pp[(xs[0], xs[1])] +=
                    cx_tail2 * t * cy_full * c(h.powi(2 * p as i32 - 2) / fact2);
            }
        }
    }
    (pm, pp)
}

/// Periodic second-difference Laplacian stencil divided by `h^2`, as an
/// operator matrix.
pub fn discrete_laplacian(lattice: &LatticeSpec) -> CMat {
    let m = lattice.m;
    let h2 = lattice.h * lattice.h;
    let mut a = CMat::zeros(m, m);
    for x in 0..m {
        a[(x, x)] += c(-2.0 / h2);
        a[(x, (x + 1) % m)] += c(1.0 / h2);
        a[(x, (x + m - 1) % m)] += c(1.0 / h2);
    }
    a
}

/// Level-0 spec of the multiparticle Schroedinger problem: one-body kernel
/// `(1/hbar)(-hbar^2/2m Laplacian + U)` and two-body multiplicative kernel
/// `(1/hbar) V`.
pub fn build_schrodinger_spec(
    u: &[f64],
    v: &nalgebra::DMatrix<f64>,
    hbar: f64,
    mass: f64,
    lattice: LatticeSpec,
) -> Result<HamiltonianSpec> {
    let m = lattice.m;
    if u.len() != m || v.nrows() != m || v.ncols() != m {
        return Err(Error::Invalid("U/V dimensions do not match the lattice".into()));
    }
    if !(hbar > 0.0) || !(mass > 0.0) {
        return Err(Error::Invalid("hbar and mass must be positive".into()));
    }
    let asym = (v - v.transpose()).norm();
    if asym > 1e-12 {
        return Err(Error::Invalid(format!("pair potential not symmetric: {asym:.3e}")));
    }
    let mut one_body = match lattice.topology {
        Topology::Periodic1D => discrete_laplacian(&lattice) * c(-hbar / (2.0 * mass)),
        Topology::Abstract => CMat::zeros(m, m),
    };
    for x in 0..m {
        one_body[(x, x)] += c(u[x] / hbar);
    }
    let kernels = vec![
        PBodyKernel::OneBody(one_body),
        PBodyKernel::TwoBodyMult(v / hbar),
    ];
    Ok(HamiltonianSpec {
        lattice,
        hbar,
        mass,
        schrodinger: Some(SchrodingerData { u: u.to_vec(), v: v.clone() }),
        levels: vec![kernels],
    })
}

/// Deterministic random dense spec for oracle tests and seeded scenarios.
/// Levels get one dense kernel per body order up to `p_max`; amplitudes decay
/// with the body order to keep flows well inside tolerance budgets.
pub fn random_dense_spec<R: Rng>(
    lattice: LatticeSpec,
    level_count: usize,
    p_max: usize,
    amplitude: f64,
    rng: &mut R,
) -> HamiltonianSpec {
    let m = lattice.m;
    let mut levels = Vec::new();
    for _ in 0..level_count {
        let mut kernels = Vec::new();
        for p in 1..=p_max {
            let dim = m.pow(p as u32);
            let scale = amplitude / (p as f64 * p as f64);
            let vals: Vec<C64> = (0..dim * dim)
                .map(|_| C64::new(rng.gen_range(-scale..scale), rng.gen_range(-scale..scale)))
                .collect();
            kernels.push(PBodyKernel::Dense { p, vals });
        }
        levels.push(kernels);
    }
    HamiltonianSpec::from_kernels(lattice, levels)
}

pub fn random_unit_state<R: Rng>(lattice: &LatticeSpec, rng: &mut R) -> OneParticleState {
    let amp = CVec::from_fn(lattice.m, |_, _| {
        C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    });
    OneParticleState::new(amp).normalized(lattice)
}
