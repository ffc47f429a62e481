//! Hartree flow, the variation-system propagator pair, the Riccati/Moebius
//! transport of the pairing kernel, action and scalar phases, and germ-vector
//! transport.

use crate::error::{Error, Result};
use crate::lattice::{HamiltonianSpec, LatticeSpec, OneParticleState};
use crate::linalg::{c, CMat, CVec, I};
use num_complex::Complex64 as C64;

#[derive(Clone, Copy, Debug)]
pub struct FlowConfig {
    pub dt: f64,
    pub t_end: f64,
    pub norm_tol: f64,
    pub constraint_tol: f64,
    pub reproject_every: usize,
}

impl FlowConfig {
    pub fn new(dt: f64, t_end: f64) -> Self {
        Self { dt, t_end, norm_tol: 1e-7, constraint_tol: 1e-7, reproject_every: 200 }
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }
}

/// Linear canonical (Bogoliubov-type) transformation solving the variation
/// system around the Hartree trajectory, `A^0 = I`, `B^0 = 0`.
#[derive(Clone, Debug)]
pub struct PropagatorPair {
    pub a: CMat,
    pub b: CMat,
    pub t: f64,
}

impl PropagatorPair {
    pub fn identity(m: usize) -> Self {
        Self { a: CMat::identity(m, m), b: CMat::zeros(m, m), t: 0.0 }
    }

    /// Max residual of `A^dag A - B^T conj(B) = I` and `A^dag B = B^T conj(A)`.
    pub fn canonical_residual(&self) -> f64 {
        let m = self.a.nrows();
        let r1 = self.a.adjoint() * &self.a
            - self.b.transpose() * self.b.map(|z| z.conj())
            - CMat::identity(m, m);
        let r2 = self.a.adjoint() * &self.b - self.b.transpose() * self.a.map(|z| z.conj());
        r1.norm().max(r2.norm())
    }

    /// Composition: `other` after `self`.
    pub fn then(&self, other: &PropagatorPair) -> PropagatorPair {
        PropagatorPair {
            a: &other.a * &self.a + &other.b * self.b.map(|z| z.conj()),
            b: &other.a * &self.b + &other.b * self.a.map(|z| z.conj()),
            t: self.t + other.t,
        }
    }
}

/// Full mean-field + germ trajectory point.
#[derive(Clone, Debug)]
pub struct GermState {
    pub t: f64,
    pub phi: OneParticleState,
    pub pair: PropagatorPair,
    /// pairing kernel values `R(x,y)`, symmetric
    pub r: CMat,
    pub s_phase: f64,
    pub c_phase: C64,
    pub germ_vecs: Vec<(OneParticleState, OneParticleState)>,
}

impl GermState {
    pub fn constraint_residual(&self, lattice: &LatticeSpec) -> f64 {
        constraint_residual(&self.r, &self.phi, lattice.h)
    }

    pub fn pairing_norm(&self, lattice: &LatticeSpec) -> f64 {
        let m = crate::fock::pairing_kernel(&self.r, &self.phi);
        crate::linalg::kernel_spectral_norm(lattice.h, &m)
    }

    pub fn check_invariants(&self, lattice: &LatticeSpec, cfg: &FlowConfig) -> Result<()> {
        self.phi.check_unit(lattice, cfg.norm_tol)?;
        let sym = (&self.r - self.r.transpose()).norm();
        if sym > 1e-9 {
            return Err(Error::Invalid(format!("R asymmetric by {sym:.3e}")));
        }
        let constraint = self.constraint_residual(lattice);
        if constraint > cfg.constraint_tol {
            return Err(Error::Invalid(format!(
                "pairing constraint drift {constraint:.3e}"
            )));
        }
        let mn = self.pairing_norm(lattice);
        if mn >= 1.0 - 1e-6 {
            return Err(Error::PairingNorm(mn));
        }
        Ok(())
    }
}

/// `|| h sum_y R(x,y) phi*(y) + phi(x) ||` over sites.
pub fn constraint_residual(r: &CMat, phi: &OneParticleState, h: f64) -> f64 {
    let contracted = crate::linalg::apply_kernel(h, r, &phi.amp.map(|z| z.conj()));
    (contracted + &phi.amp).norm()
}

/// Initial pairing kernel of pure product data: `R = -phi (x) phi`.
pub fn product_initial_r(phi: &OneParticleState) -> CMat {
    let m = phi.amp.len();
    CMat::from_fn(m, m, |x, y| -phi.amp[x] * phi.amp[y])
}

// ---------------------------------------------------------------------------
// RK4 stepping over packed complex state vectors
// ---------------------------------------------------------------------------

pub(crate) fn rk4_step<F>(f: &F, t: f64, y: &CVec, dt: f64) -> CVec
where
    F: Fn(f64, &CVec) -> CVec,
{
    let k1 = f(t, y);
    let k2 = f(t + dt / 2.0, &(y + &k1 * c(dt / 2.0)));
    let k3 = f(t + dt / 2.0, &(y + &k2 * c(dt / 2.0)));
    let k4 = f(t + dt, &(y + &k3 * c(dt)));
    y + (k1 + k2 * c(2.0) + k3 * c(2.0) + k4) * c(dt / 6.0)
}

#[derive(Clone, Debug)]
pub struct HartreeTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<OneParticleState>,
    pub dt: f64,
}

impl HartreeTrajectory {
    pub fn last(&self) -> &OneParticleState {
        self.states.last().expect("trajectory nonempty")
    }

    pub fn at_step(&self, k: usize) -> &OneParticleState {
        &self.states[k]
    }
}

/// Classical RK4 trajectory of `i dphi/dt = dH_0/dphi*`.
pub fn integrate_hartree(
    spec: &HamiltonianSpec,
    phi0: &OneParticleState,
    cfg: &FlowConfig,
) -> Result<HartreeTrajectory> {
    phi0.check_unit(&spec.lattice, 1e-9)?;
    let deriv = |_t: f64, y: &CVec| -> CVec {
        let phi = OneParticleState::new(y.clone());
        spec.grad_phi_star(0, &phi) * (-I)
    };
    let steps = cfg.steps();
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut y = phi0.amp.clone();
    times.push(0.0);
    states.push(phi0.clone());
    for k in 0..steps {
        let t = k as f64 * cfg.dt;
        y = rk4_step(&deriv, t, &y, cfg.dt);
        if cfg.reproject_every > 0 && (k + 1) % cfg.reproject_every == 0 {
            let n = crate::linalg::norm(spec.lattice.h, &y);
            y /= c(n);
        }
        let state = OneParticleState::new(y.clone());
        let drift = (state.norm(&spec.lattice) - 1.0).abs();
        if drift > cfg.norm_tol {
            return Err(Error::NormDrift { drift, tol: cfg.norm_tol });
        }
        times.push((k + 1) as f64 * cfg.dt);
        states.push(state);
    }
    Ok(HartreeTrajectory { times, states, dt: cfg.dt })
}

fn pack_phi_ab(phi: &CVec, a: &CMat, b: &CMat) -> CVec {
    let m = phi.len();
    let mut y = CVec::zeros(m + 2 * m * m);
    y.rows_mut(0, m).copy_from(phi);
    for col in 0..m {
        for row in 0..m {
            y[m + col * m + row] = a[(row, col)];
            y[m + m * m + col * m + row] = b[(row, col)];
        }
    }
    y
}

fn unpack_phi_ab(y: &CVec, m: usize) -> (CVec, CMat, CMat) {
    let phi = y.rows(0, m).into_owned();
    let mut a = CMat::zeros(m, m);
    let mut b = CMat::zeros(m, m);
    for col in 0..m {
        for row in 0..m {
            a[(row, col)] = y[m + col * m + row];
            b[(row, col)] = y[m + m * m + col * m + row];
        }
    }
    (phi, a, b)
}

fn phi_ab_derivative(spec: &HamiltonianSpec, y: &CVec) -> CVec {
    let m = spec.lattice.m;
    let h = spec.lattice.h;
    let (phi_amp, a, b) = unpack_phi_ab(y, m);
    let phi = OneParticleState::new(phi_amp);
    let grad = spec.grad_phi_star(0, &phi);
    let blocks = spec.hessian_blocks(0, &phi);
    let kpm = &blocks.pm * c(h);
    let kpp = &blocks.pp * c(h);
    let da = (&kpm * &a + &kpp * b.map(|z| z.conj())) * (-I);
    let db = (&kpm * &b + &kpp * a.map(|z| z.conj())) * (-I);
    pack_phi_ab(&(grad * (-I)), &da, &db)
}

/// Integrates the block variation system `i d/dt (A B; conj B conj A) = ...`
/// with the Hessian evaluated along the co-integrated Hartree flow.
pub fn evolve_variation(
    spec: &HamiltonianSpec,
    traj: &HartreeTrajectory,
    cfg: &FlowConfig,
) -> Result<Vec<PropagatorPair>> {
    let m = spec.lattice.m;
    let deriv = |_t: f64, y: &CVec| phi_ab_derivative(spec, y);
    let mut y = pack_phi_ab(&traj.states[0].amp, &CMat::identity(m, m), &CMat::zeros(m, m));
    let steps = cfg.steps();
    let mut out = Vec::with_capacity(steps + 1);
    out.push(PropagatorPair::identity(m));
    for k in 0..steps {
        let t = k as f64 * cfg.dt;
        y = rk4_step(&deriv, t, &y, cfg.dt);
        let (phi_amp, a, b) = unpack_phi_ab(&y, m);
        // the co-integrated flow retraces the stored trajectory exactly
        debug_assert!((&phi_amp - &traj.states[k + 1].amp).norm() < 1e-9);
        let _ = phi_amp;
        let pair = PropagatorPair { a, b, t: (k + 1) as f64 * cfg.dt };
        let residual = pair.canonical_residual();
        if residual > 1e-5 {
            return Err(Error::CanonicalIdentity(residual));
        }
        out.push(pair);
    }
    Ok(out)
}

/// Riccati solution as a Moebius transform of the initial kernel:
/// `R^t = (B + A R0)(conj(A) + conj(B) R0)^{-1}` in operator form.
pub fn riccati_moebius(pair: &PropagatorPair, r0: &CMat, lattice: &LatticeSpec) -> Result<CMat> {
    let h = lattice.h;
    let r0_op = r0 * c(h);
    let num = &pair.b + &pair.a * &r0_op;
    let den = pair.a.map(|z| z.conj()) + pair.b.map(|z| z.conj()) * &r0_op;
    let condition = crate::linalg::cond(&den);
    if condition > 1e12 {
        return Err(Error::SingularMoebius(condition));
    }
    let den_inv = crate::linalg::solve(&den, &CMat::identity(den.nrows(), den.ncols()))
        .ok_or(Error::SingularMoebius(f64::INFINITY))?;
    let r_op = num * den_inv;
    Ok(r_op / c(h))
}

/// Enforces symmetry and the pairing constraint on a transported kernel:
/// symmetrize, then project the pairing part onto the complement of `phi`.
pub fn reproject_r(r: &CMat, phi: &OneParticleState, lattice: &LatticeSpec) -> CMat {
    let h = lattice.h;
    let m = lattice.m;
    let sym = (r + r.transpose()) * c(0.5);
    let pairing = crate::fock::pairing_kernel(&sym, phi);
    let proj = CMat::from_fn(m, m, |x, z| {
        let delta = if x == z { c(1.0) } else { C64::default() };
        delta - c(h) * phi.amp[x] * phi.amp[z].conj()
    });
    let cleaned = &proj * pairing * proj.transpose();
    CMat::from_fn(m, m, |x, y| cleaned[(x, y)] - phi.amp[x] * phi.amp[y])
}

/// One joint RK4 step of the direct Riccati flow
/// `i dR/dt = K_pp + K_pm R + R K_pm^T + R conj(K_pp) R`
/// with the Hessian bound to the co-advanced Hartree state.
pub fn riccati_ode_step(
    spec: &HamiltonianSpec,
    phi: &OneParticleState,
    r: &CMat,
    dt: f64,
) -> CMat {
    let m = spec.lattice.m;
    let h = spec.lattice.h;
    let pack = |phi: &CVec, r: &CMat| -> CVec {
        let mut y = CVec::zeros(m + m * m);
        y.rows_mut(0, m).copy_from(phi);
        for colx in 0..m {
            for row in 0..m {
                y[m + colx * m + row] = r[(row, colx)];
            }
        }
        y
    };
    let unpack = |y: &CVec| -> (CVec, CMat) {
        let phi = y.rows(0, m).into_owned();
        let mut r = CMat::zeros(m, m);
        for colx in 0..m {
            for row in 0..m {
                r[(row, colx)] = y[m + colx * m + row];
            }
        }
        (phi, r)
    };
    let deriv = |_t: f64, y: &CVec| -> CVec {
        let (phi_amp, r) = unpack(y);
        let phi = OneParticleState::new(phi_amp);
        let grad = spec.grad_phi_star(0, &phi);
        let blocks = spec.hessian_blocks(0, &phi);
        // kernel-value equation with explicit measure factors
        let dr = (&blocks.pp
            + (&blocks.pm * &r) * c(h)
            + (&r * blocks.pm.transpose()) * c(h)
            + (&r * blocks.pp.map(|z| z.conj()) * &r) * c(h * h))
            * (-I);
        pack(&(grad * (-I)), &dr)
    };
    let y = pack(&phi.amp, r);
    let (_, r_next) = unpack(&rk4_step(&deriv, 0.0, &y, dt));
    r_next
}

/// `S^t = int_0^t [ i (phi, dphi/dt) - H_0 ] dtau` by composite trapezoid.
/// The integrand is evaluated analytically along the flow.
pub fn action_phase(spec: &HamiltonianSpec, traj: &HartreeTrajectory) -> Result<Vec<f64>> {
    let mut integrand = Vec::with_capacity(traj.states.len());
    for phi in &traj.states {
        let grad = spec.grad_phi_star(0, phi);
        // i (phi, dphi/dt) = <phi, grad> for the Hartree flow
        let val = crate::linalg::inner(spec.lattice.h, &phi.amp, &grad)
            - c(spec.classical_functional(0, phi)?);
        if val.im.abs() > 1e-10 {
            return Err(Error::ImaginaryResidue(val.im.abs()));
        }
        integrand.push(val.re);
    }
    Ok(trapezoid_accumulate_real(&integrand, traj.dt))
}

fn trapezoid_accumulate_real(vals: &[f64], dt: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(vals.len());
    let mut acc = 0.0;
    out.push(0.0);
    for k in 1..vals.len() {
        acc += 0.5 * dt * (vals[k - 1] + vals[k]);
        out.push(acc);
    }
    out
}

fn trapezoid_accumulate(vals: &[C64], dt: f64) -> Vec<C64> {
    let mut out = Vec::with_capacity(vals.len());
    let mut acc = C64::default();
    out.push(acc);
    for k in 1..vals.len() {
        acc += (vals[k - 1] + vals[k]) * c(0.5 * dt);
        out.push(acc);
    }
    out
}

/// `c^t = exp(-i int_0^t [ (1/2) sum h^2 K_mm R + H_1 ] dtau)`.
/// The modulus is not constrained in general; it is logged for inspection.
pub fn scalar_phase(
    spec: &HamiltonianSpec,
    traj: &HartreeTrajectory,
    riccati: &[CMat],
) -> Result<Vec<C64>> {
    if riccati.len() != traj.states.len() {
        return Err(Error::Invalid("phase needs matching trajectory grids".into()));
    }
    let h = spec.lattice.h;
    let mut integrand = Vec::with_capacity(riccati.len());
    for (phi, r) in traj.states.iter().zip(riccati) {
        let blocks = spec.hessian_blocks(0, phi);
        let mut val = crate::linalg::pair_kernels(h, &blocks.mm, r) * c(0.5);
        if spec.levels.len() > 1 {
            val += spec.classical_functional_complex(1, phi);
        }
        integrand.push(val);
    }
    let accum = trapezoid_accumulate(&integrand, traj.dt);
    let phases: Vec<C64> = accum.iter().map(|z| (-I * z).exp()).collect();
    if let Some(last) = phases.last() {
        log::debug!("scalar phase modulus at horizon: {}", last.norm());
    }
    Ok(phases)
}

/// Transports a germ vector pair: `u^t = A u0 + B v0`, `v^t = conj(B) u0 + conj(A) v0`.
pub fn transport_germ_vectors(
    pair: &PropagatorPair,
    u0: &OneParticleState,
    v0: &OneParticleState,
) -> (OneParticleState, OneParticleState) {
    let u = &pair.a * &u0.amp + &pair.b * &v0.amp;
    let v = pair.b.map(|z| z.conj()) * &u0.amp + pair.a.map(|z| z.conj()) * &v0.amp;
    (OneParticleState::new(u), OneParticleState::new(v))
}

/// Joint mean-field + germ integration: Hartree flow, propagator pair,
/// Moebius-transported pairing kernel, action and scalar phases, and
/// transported germ vectors (one GermState per grid point).
pub fn integrate_germ_flow(
    spec: &HamiltonianSpec,
    phi0: &OneParticleState,
    r0: &CMat,
    germ_vecs0: &[(OneParticleState, OneParticleState)],
    cfg: &FlowConfig,
) -> Result<Vec<GermState>> {
    let lattice = spec.lattice;
    if constraint_residual(r0, phi0, lattice.h) > cfg.constraint_tol {
        return Err(Error::Invalid("initial R violates the pairing constraint".into()));
    }
    let traj = integrate_hartree(spec, phi0, cfg)?;
    let pairs = evolve_variation(spec, &traj, cfg)?;
    let mut riccati = Vec::with_capacity(pairs.len());
    for (k, pair) in pairs.iter().enumerate() {
        let mut r = riccati_moebius(pair, r0, &lattice)?;
        if cfg.reproject_every > 0 && k % cfg.reproject_every == 0 {
            r = reproject_r(&r, &traj.states[k], &lattice);
        }
        riccati.push(r);
    }
    let s_phases = action_phase(spec, &traj)?;
    let c_phases = scalar_phase(spec, &traj, &riccati)?;
    let mut out = Vec::with_capacity(pairs.len());
    for k in 0..pairs.len() {
        let germ_vecs = germ_vecs0
            .iter()
            .map(|(u0, v0)| transport_germ_vectors(&pairs[k], u0, v0))
            .collect();
        let state = GermState {
            t: traj.times[k],
            phi: traj.states[k].clone(),
            pair: pairs[k].clone(),
            r: riccati[k].clone(),
            s_phase: s_phases[k],
            c_phase: c_phases[k],
            germ_vecs,
        };
        state.check_invariants(&lattice, cfg)?;
        out.push(state);
    }
    Ok(out)
}
