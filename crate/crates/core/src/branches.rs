//! Operator-valued extension: internal finite-dimensional space, eigen-branch
//! tracking of the operator symbol, branch Hartree flows, the Berry-type
//! phase, branch asymptotics and superpositions, and the two concrete
//! examples (two-level coupling, extra particle).

use crate::error::{Error, Result};
use crate::fock::{canonical_embed, germ_vacuum, occ_basis, OccBasis, SymmetricState};
use crate::lattice::{
    discrete_laplacian, HamiltonianSpec, HessianBlocks, LatticeSpec, OneParticleState,
    PBodyKernel,
};
use crate::linalg::{c, inner, CMat, CVec, I};
use crate::meanfield::{riccati_moebius, rk4_step, FlowConfig, GermState, PropagatorPair};
use num_complex::Complex64 as C64;
use std::sync::Arc;

pub const DEFAULT_GAP_MIN: f64 = 1e-6;

/// Internal (l^2-truncated) space dimension.
#[derive(Clone, Copy, Debug)]
pub struct InternalSpace {
    pub d: usize,
}

impl InternalSpace {
    pub fn new(d: usize) -> Result<Self> {
        if d < 1 {
            return Err(Error::Invalid("internal dimension must be at least 1".into()));
        }
        Ok(Self { d })
    }
}

/// Kernel with d x d Hermitian-matrix-valued coefficients.
#[derive(Clone, Debug)]
pub enum OvKernel {
    /// scalar kernel tensored with the internal identity
    ScalarTimesId(PBodyKernel),
    /// phi-independent internal operator (a p = 0 term)
    InternalOnly(CMat),
    /// one-body kernel diagonal in the lattice site with a d x d matrix per
    /// site: kernel values `delta(x-y) B(x) / h`
    SiteDiagonal(Vec<CMat>),
    /// general one-body kernel values: a d x d block per site pair
    DenseOneBody(Vec<Vec<CMat>>),
}

#[derive(Clone, Debug)]
pub struct OperatorValuedSpec {
    pub internal: InternalSpace,
    pub lattice: LatticeSpec,
    pub levels: Vec<Vec<OvKernel>>,
}

impl OperatorValuedSpec {
    pub fn d(&self) -> usize {
        self.internal.d
    }

    /// The operator symbol `H_0(phi*, phi)` in the internal space.
    pub fn h0_internal(&self, phi: &OneParticleState) -> Result<CMat> {
        let out = self.hl_internal(0, phi);
        let dev = crate::linalg::hermiticity_deviation(&out);
        if dev > 1e-12 * (1.0 + out.norm()) {
            return Err(Error::NonHermitian(dev));
        }
        Ok((&out + out.adjoint()) * c(0.5))
    }

    pub fn hl_internal(&self, level: usize, phi: &OneParticleState) -> CMat {
        let d = self.d();
        let h = self.lattice.h;
        let m = self.lattice.m;
        let mut out = CMat::zeros(d, d);
        let Some(kernels) = self.levels.get(level) else {
            return out;
        };
        for kernel in kernels {
            match kernel {
                OvKernel::ScalarTimesId(k) => {
                    let spec = self.scalar_wrapper(level, k);
                    let val = spec.classical_functional_complex(0, phi);
                    out += CMat::identity(d, d) * val;
                }
                OvKernel::InternalOnly(t) => out += t,
                OvKernel::SiteDiagonal(bs) => {
                    for (x, b) in bs.iter().enumerate() {
                        out += b * c(h * phi.amp[x].norm_sqr());
                    }
                }
                OvKernel::DenseOneBody(kv) => {
                    for x in 0..m {
                        for y in 0..m {
                            out += &kv[x][y] * (phi.amp[x].conj() * phi.amp[y] * c(h * h));
                        }
                    }
                }
            }
        }
        out
    }

    fn scalar_wrapper(&self, _level: usize, k: &PBodyKernel) -> HamiltonianSpec {
        HamiltonianSpec {
            lattice: self.lattice,
            hbar: 1.0,
            mass: 1.0,
            schrodinger: None,
            levels: vec![vec![k.clone()]],
        }
    }

    /// Matrix-valued gradient `d H_0 / d phi*(x)` per site.
    pub fn grad_internal(&self, phi: &OneParticleState) -> Vec<CMat> {
        let d = self.d();
        let h = self.lattice.h;
        let m = self.lattice.m;
        let mut out = vec![CMat::zeros(d, d); m];
        for kernel in self.levels.first().map(|v| v.as_slice()).unwrap_or(&[]) {
            match kernel {
                OvKernel::ScalarTimesId(k) => {
                    let spec = self.scalar_wrapper(0, k);
                    let grad = spec.grad_phi_star(0, phi);
                    for x in 0..m {
                        out[x] += CMat::identity(d, d) * grad[x];
                    }
                }
                OvKernel::InternalOnly(_) => {}
                OvKernel::SiteDiagonal(bs) => {
                    for x in 0..m {
                        out[x] += &bs[x] * phi.amp[x];
                    }
                }
                OvKernel::DenseOneBody(kv) => {
                    for x in 0..m {
                        for y in 0..m {
                            out[x] += &kv[x][y] * (phi.amp[y] * c(h));
                        }
                    }
                }
            }
        }
        out
    }

    /// Matrix-valued second derivatives (kernel values):
    /// `pm(x,y) = d2 H_0 / dphi*(x) dphi(y)`, `pp(x,y) = d2/dphi* dphi*`.
    pub fn hessian_internal(&self, phi: &OneParticleState) -> (Vec<Vec<CMat>>, Vec<Vec<CMat>>) {
        let d = self.d();
        let h = self.lattice.h;
        let m = self.lattice.m;
        let mut pm = vec![vec![CMat::zeros(d, d); m]; m];
        let mut pp = vec![vec![CMat::zeros(d, d); m]; m];
        for kernel in self.levels.first().map(|v| v.as_slice()).unwrap_or(&[]) {
            match kernel {
                OvKernel::ScalarTimesId(k) => {
                    let spec = self.scalar_wrapper(0, k);
                    let blocks = spec.hessian_blocks(0, phi);
                    for x in 0..m {
                        for y in 0..m {
                            pm[x][y] += CMat::identity(d, d) * blocks.pm[(x, y)];
                            pp[x][y] += CMat::identity(d, d) * blocks.pp[(x, y)];
                        }
                    }
                }
                OvKernel::InternalOnly(_) => {}
                OvKernel::SiteDiagonal(bs) => {
                    for x in 0..m {
                        pm[x][x] += &bs[x] * c(1.0 / h);
                    }
                }
                OvKernel::DenseOneBody(kv) => {
                    for x in 0..m {
                        for y in 0..m {
                            pm[x][y] += &kv[x][y];
                        }
                    }
                }
            }
        }
        (pm, pp)
    }
}

/// Eigenpair of the internal symbol with gauge continuity.
///
/// `prev` selects the branch by maximal overlap and fixes the phase so
/// `<prev, zeta>` is real positive; the first call selects by index in
/// ascending eigenvalue order and makes the largest-magnitude component real.
pub fn eigenbranch(
    h0: &CMat,
    branch_id: usize,
    prev: Option<&CVec>,
    gap_min: f64,
) -> Result<(f64, CVec, f64)> {
    let d = h0.nrows();
    let eig = h0.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let pick = match prev {
        None => order[branch_id],
        Some(prev) => {
            let mut best = 0usize;
            let mut best_overlap = -1.0;
            for j in 0..d {
                let overlap = eig.eigenvectors.column(j).dotc(prev).norm();
                if overlap > best_overlap {
                    best_overlap = overlap;
                    best = j;
                }
            }
            best
        }
    };
    let lambda = eig.eigenvalues[pick];
    let mut gap = f64::INFINITY;
    for j in 0..d {
        if j != pick {
            gap = gap.min((eig.eigenvalues[j] - lambda).abs());
        }
    }
    if d > 1 && gap < gap_min {
        return Err(Error::GapCollapse { gap, gap_min });
    }
    let mut zeta = eig.eigenvectors.column(pick).into_owned();
    match prev {
        Some(prev) => {
            let overlap = prev.dotc(&zeta);
            if overlap.norm() > 0.0 {
                zeta *= (overlap / c(overlap.norm())).conj();
            }
        }
        None => {
            let (mut idx, mut mag) = (0usize, 0.0f64);
            for (i, z) in zeta.iter().enumerate() {
                if z.norm() > mag {
                    mag = z.norm();
                    idx = i;
                }
            }
            let phase = zeta[idx] / c(zeta[idx].norm());
            zeta /= phase;
        }
    }
    Ok((lambda, zeta, gap))
}

/// Reduced resolvent `(H_0 - lambda)^{-1} (1 - Pi)` on the complement of the
/// tracked eigenvector (pseudo-inversion through the eigenbasis).
pub fn reduced_resolvent(h0: &CMat, lambda: f64, zeta: &CVec, gap_min: f64) -> Result<CMat> {
    let d = h0.nrows();
    let eig = h0.clone().symmetric_eigen();
    let mut out = CMat::zeros(d, d);
    for j in 0..d {
        let overlap = eig.eigenvectors.column(j).dotc(zeta).norm();
        if overlap > 0.5 {
            continue; // the tracked branch itself
        }
        let denom = eig.eigenvalues[j] - lambda;
        if denom.abs() < gap_min {
            return Err(Error::GapCollapse { gap: denom.abs(), gap_min });
        }
        let col = eig.eigenvectors.column(j);
        out += (col * col.adjoint()) / c(denom);
    }
    Ok(out)
}

/// Scalar derivative data of the tracked eigenvalue functional at one point.
pub struct BranchDerivatives {
    pub lambda: f64,
    pub zeta: CVec,
    pub gap: f64,
    /// `d lambda / d phi*(x)` (Hellmann-Feynman)
    pub grad: CVec,
    /// second derivatives of the eigenvalue functional, kernel values
    pub blocks: HessianBlocks,
}

/// Gradient and Hessian of the branch eigenvalue by Hellmann-Feynman plus the
/// reduced-resolvent correction of second-order perturbation theory.
pub fn branch_derivatives(
    spec: &OperatorValuedSpec,
    phi: &OneParticleState,
    branch_id: usize,
    prev: Option<&CVec>,
    gap_min: f64,
) -> Result<BranchDerivatives> {
    let m = spec.lattice.m;
    let h0 = spec.h0_internal(phi)?;
    let (lambda, zeta, gap) = eigenbranch(&h0, branch_id, prev, gap_min)?;
    let res = reduced_resolvent(&h0, lambda, &zeta, gap_min * 0.5)?;
    let dstar = spec.grad_internal(phi);
    let dm: Vec<CMat> = dstar.iter().map(|mat| mat.adjoint()).collect();
    let grad = CVec::from_fn(m, |x, _| (zeta.adjoint() * &dstar[x] * &zeta)[(0, 0)]);
    let (kpm_mat, kpp_mat) = spec.hessian_internal(phi);
    let sandwich = |a: &CMat, b: &CMat| -> C64 { (zeta.adjoint() * a * &res * b * &zeta)[(0, 0)] };
    let mut pm = CMat::zeros(m, m);
    let mut pp = CMat::zeros(m, m);
    for x in 0..m {
        for y in 0..m {
            // d2 lambda / da db = <H_ab> - <H_b^dag G H_a> - <H_a G H_b>
            pm[(x, y)] = (zeta.adjoint() * &kpm_mat[x][y] * &zeta)[(0, 0)]
                - sandwich(&dstar[y], &dstar[x])
                - sandwich(&dstar[x], &dm[y]);
            pp[(x, y)] = (zeta.adjoint() * &kpp_mat[x][y] * &zeta)[(0, 0)]
                - sandwich(&dm[y], &dstar[x])
                - sandwich(&dstar[x], &dstar[y]);
        }
    }
    let mm = pp.map(|z| z.conj());
    Ok(BranchDerivatives {
        lambda,
        zeta,
        gap,
        grad,
        blocks: HessianBlocks { pm, pp, mm },
    })
}

/// One point of a branch trajectory: mean-field data and the internal
/// eigen-branch bundle.
#[derive(Clone, Debug)]
pub struct BranchPoint {
    pub t: f64,
    pub phi: OneParticleState,
    pub pair: PropagatorPair,
    pub r: CMat,
    pub s_phase: f64,
    pub lambda: f64,
    pub zeta: CVec,
    pub gap: f64,
}

impl BranchPoint {
    pub fn as_germ_state(&self, c_phase: C64) -> GermState {
        GermState {
            t: self.t,
            phi: self.phi.clone(),
            pair: self.pair.clone(),
            r: self.r.clone(),
            s_phase: self.s_phase,
            c_phase,
            germ_vecs: Vec::new(),
        }
    }
}

/// Integrates the Hartree-like flow of an isolated eigen-branch together with
/// the germ data (A, B, R, S) driven by the branch Hessian.
pub fn branch_hartree_flow(
    spec: &OperatorValuedSpec,
    branch_id: usize,
    phi0: &OneParticleState,
    r0: &CMat,
    cfg: &FlowConfig,
    gap_min: f64,
) -> Result<Vec<BranchPoint>> {
    let lattice = spec.lattice;
    let m = lattice.m;
    let h = lattice.h;
    phi0.check_unit(&lattice, 1e-9)?;
    // state: phi | A | B | S
    let pack = |phi: &CVec, a: &CMat, b: &CMat, s: C64| -> CVec {
        let mut y = CVec::zeros(m + 2 * m * m + 1);
        y.rows_mut(0, m).copy_from(phi);
        for col in 0..m {
            for row in 0..m {
                y[m + col * m + row] = a[(row, col)];
                y[m + m * m + col * m + row] = b[(row, col)];
            }
        }
        y[m + 2 * m * m] = s;
        y
    };
    let unpack = |y: &CVec| -> (CVec, CMat, CMat, C64) {
        let phi = y.rows(0, m).into_owned();
        let mut a = CMat::zeros(m, m);
        let mut b = CMat::zeros(m, m);
        for col in 0..m {
            for row in 0..m {
                a[(row, col)] = y[m + col * m + row];
                b[(row, col)] = y[m + m * m + col * m + row];
            }
        }
        (phi, a, b, y[m + 2 * m * m])
    };
    let mut prev_zeta: Option<CVec> = None;
    let mut y = pack(&phi0.amp, &CMat::identity(m, m), &CMat::zeros(m, m), C64::default());
    let steps = cfg.steps();
    let mut out = Vec::with_capacity(steps + 1);

    let mut make_point = |y: &CVec, t: f64, prev: &mut Option<CVec>| -> Result<BranchPoint> {
        let (phi_amp, a, b, s) = unpack(y);
        let phi = OneParticleState::new(phi_amp);
        let der = branch_derivatives(spec, &phi, branch_id, prev.as_ref(), gap_min)?;
        *prev = Some(der.zeta.clone());
        let pair = PropagatorPair { a, b, t };
        let r = riccati_moebius(&pair, r0, &lattice)?;
        Ok(BranchPoint {
            t,
            phi,
            pair,
            r,
            s_phase: s.re,
            lambda: der.lambda,
            zeta: der.zeta,
            gap: der.gap,
        })
    };

    out.push(make_point(&y, 0.0, &mut prev_zeta)?);
    for k in 0..steps {
        let t = k as f64 * cfg.dt;
        let gauge = prev_zeta.clone();
        let deriv = |_t: f64, y: &CVec| -> CVec {
            let (phi_amp, a, b, _s) = unpack(y);
            let phi = OneParticleState::new(phi_amp);
            let der = branch_derivatives(spec, &phi, branch_id, gauge.as_ref(), gap_min)
                .expect("branch stays isolated within a step");
            let kpm = &der.blocks.pm * c(h);
            let kpp = &der.blocks.pp * c(h);
            let da = (&kpm * &a + &kpp * b.map(|z| z.conj())) * (-I);
            let db = (&kpm * &b + &kpp * a.map(|z| z.conj())) * (-I);
            let ds = c(inner(h, &phi.amp, &der.grad).re - der.lambda);
            pack(&(&der.grad * (-I)), &da, &db, ds)
        };
        y = rk4_step(&deriv, t, &y, cfg.dt);
        out.push(make_point(&y, (k + 1) as f64 * cfg.dt, &mut prev_zeta)?);
    }
    Ok(out)
}

/// The Berry-type phase pieces along a branch trajectory.
pub struct GammaTrajectory {
    /// the full phase integrand `Gamma^t = gamma^t - (1/2) sum K_mm M^t`
    pub gamma_total: Vec<C64>,
    /// cumulative integral `int_0^t Gamma dtau`
    pub accumulated: Vec<C64>,
}

/// Accumulates the branch phase: Berry term by finite differences of the
/// gauge-fixed eigenvector, second-derivative sandwich terms, and the
/// reduced-resolvent term.
pub fn gamma_phase(
    spec: &OperatorValuedSpec,
    traj: &[BranchPoint],
    branch_id: usize,
    gap_min: f64,
) -> Result<GammaTrajectory> {
    let lattice = spec.lattice;
    let m = lattice.m;
    let h = lattice.h;
    let n = traj.len();
    if n < 3 {
        return Err(Error::Invalid("gamma needs at least three trajectory points".into()));
    }
    let dt = traj[1].t - traj[0].t;
    let mut gamma_total = Vec::with_capacity(n);
    for k in 0..n {
        let point = &traj[k];
        let phi = &point.phi;
        let zeta = &point.zeta;
        // Berry term i <zeta, dzeta/dt>, one-sided second order at the ends
        let dzeta: CVec = if k == 0 {
            (&traj[1].zeta * c(4.0) - &traj[2].zeta - &traj[0].zeta * c(3.0)) / c(2.0 * dt)
        } else if k == n - 1 {
            (&traj[k].zeta * c(3.0) - &traj[k - 1].zeta * c(4.0) + &traj[k - 2].zeta)
                / c(2.0 * dt)
        } else {
            (&traj[k + 1].zeta - &traj[k - 1].zeta) / c(2.0 * dt)
        };
        let berry = I * zeta.dotc(&dzeta) * c(h).powi(0);
        let der = branch_derivatives(spec, phi, branch_id, Some(zeta), gap_min)?;
        let h0 = spec.h0_internal(phi)?;
        let res = reduced_resolvent(&h0, der.lambda, zeta, gap_min * 0.5)?;
        let (kpm_mat, kpp_mat) = spec.hessian_internal(phi);
        let dstar = spec.grad_internal(phi);
        // (1/2) int phi(x) [d2 H_0/dphi dphi](x,y) phi(y): matrix-valued mm
        // block is the conjugate of the pp block
        let mut mid = CMat::zeros(spec.d(), spec.d());
        for x in 0..m {
            for y in 0..m {
                let mm_block = kpp_mat[x][y].map(|z| z.conj());
                mid += mm_block * (phi.amp[x] * phi.amp[y] * c(0.5 * h * h));
                // minus the mixed-derivative difference term
                let mixed_matrix = kpm_mat[y][x].adjoint(); // d2 H0/dphi(x) dphi*(y)
                let mixed_scalar = der.blocks.pm[(y, x)].conj();
                let diff = mixed_matrix
                    - CMat::identity(spec.d(), spec.d()) * mixed_scalar;
                mid -= diff * (phi.amp[x] * phi.amp[y].conj() * c(0.5 * h * h));
            }
        }
        if spec.levels.len() > 1 {
            mid -= spec.hl_internal(1, phi);
        }
        let sandwich = (zeta.adjoint() * &mid * zeta)[(0, 0)];
        // + h sum_x <zeta, D*(x) G D*(x) zeta>
        let mut resolvent_term = C64::default();
        for x in 0..m {
            resolvent_term += (zeta.adjoint() * &dstar[x] * &res * &dstar[x] * zeta)[(0, 0)];
        }
        resolvent_term *= c(h);
        let gamma = berry + sandwich + resolvent_term;
        // Gamma = gamma - (1/2) sum K_mm M (scalar branch Hessian)
        let pairing = crate::fock::pairing_kernel(&point.r, phi);
        let correction = crate::linalg::pair_kernels(h, &der.blocks.mm, &pairing) * c(0.5);
        gamma_total.push(gamma - correction);
    }
    let mut accumulated = Vec::with_capacity(n);
    let mut acc = C64::default();
    accumulated.push(acc);
    for k in 1..n {
        acc += (gamma_total[k - 1] + gamma_total[k]) * c(0.5 * dt);
        accumulated.push(acc);
    }
    Ok(GammaTrajectory { gamma_total, accumulated })
}

/// Element of `internal (x) SymmetricState`: amplitudes indexed
/// `[internal * dim + occupation]`.
#[derive(Clone, Debug)]
pub struct InternalSymState {
    pub d: usize,
    pub lattice: LatticeSpec,
    pub n_particles: usize,
    pub basis: Arc<OccBasis>,
    pub amp: CVec,
}

impl InternalSymState {
    pub fn zeros(d: usize, lattice: LatticeSpec, n_particles: usize) -> Self {
        let basis = occ_basis(lattice.m, n_particles);
        let amp = CVec::zeros(d * basis.len());
        Self { d, lattice, n_particles, basis, amp }
    }

    pub fn norm(&self) -> f64 {
        self.amp.norm()
    }

    pub fn distance(&self, other: &InternalSymState) -> f64 {
        (&self.amp - &other.amp).norm()
    }

    pub fn normalized(&self) -> Self {
        let mut out = self.clone();
        out.amp /= c(out.norm());
        out
    }

    /// `zeta (x) Psi` from an internal vector and a symmetric state.
    pub fn product(zeta: &CVec, sym: &SymmetricState) -> Self {
        let d = zeta.len();
        let dim = sym.amp.len();
        let mut amp = CVec::zeros(d * dim);
        for i in 0..d {
            for b in 0..dim {
                amp[i * dim + b] = zeta[i] * sym.amp[b];
            }
        }
        Self {
            d,
            lattice: sym.lattice,
            n_particles: sym.n_particles,
            basis: sym.basis.clone(),
            amp,
        }
    }

    /// k = 1 correlator summed over the internal index (kernel values).
    pub fn correlator1(&self) -> CMat {
        let m = self.lattice.m;
        let h = self.lattice.h;
        let dim = self.basis.len();
        let n = self.n_particles as f64;
        let mut out = CMat::zeros(m, m);
        for i in 0..self.d {
            for (col, occ) in self.basis.states.iter().enumerate() {
                let amp = self.amp[i * dim + col];
                if amp == C64::default() {
                    continue;
                }
                for x in 0..m {
                    if occ[x] == 0 {
                        continue;
                    }
                    for y in 0..m {
                        let mut dst = occ.clone();
                        dst[x] -= 1;
                        dst[y] += 1;
                        let row = self.basis.index_of(&dst);
                        let factor = ((occ[x] as f64) * (dst[y] as f64)).sqrt();
                        out[(x, y)] +=
                            self.amp[i * dim + row].conj() * amp * c(factor / (n * h));
                    }
                }
            }
        }
        out
    }
}

/// Exact operator on `internal (x) Sym^N`.
pub struct OvExactOperator {
    pub d: usize,
    pub lattice: LatticeSpec,
    pub n_particles: usize,
    pub basis: Arc<OccBasis>,
    pub matrix: CMat,
}

impl OvExactOperator {
    pub fn apply(&self, v: &CVec) -> CVec {
        &self.matrix * v
    }
}

/// Assembles the operator-valued Hamiltonian on the internal-tensor-symmetric
/// basis.
pub fn assemble_ov_hamiltonian(
    spec: &OperatorValuedSpec,
    n_particles: usize,
) -> Result<OvExactOperator> {
    let d = spec.d();
    let lattice = spec.lattice;
    let basis = occ_basis(lattice.m, n_particles);
    let dim = basis.len();
    let total = d * dim;
    if total > crate::oracle::DEFAULT_DIM_CAP {
        return Err(Error::DimensionCap { dim: total, cap: crate::oracle::DEFAULT_DIM_CAP });
    }
    let nn = n_particles as f64;
    let mut matrix = CMat::zeros(total, total);
    for (l, kernels) in spec.levels.iter().enumerate() {
        let level_weight = nn.powi(1 - l as i32);
        for kernel in kernels {
            match kernel {
                OvKernel::ScalarTimesId(k) => {
                    let scalar = HamiltonianSpec {
                        lattice,
                        hbar: 1.0,
                        mass: 1.0,
                        schrodinger: None,
                        levels: {
                            let mut levels = vec![vec![]; l];
                            levels.push(vec![k.clone()]);
                            levels
                        },
                    };
                    let op = crate::oracle::assemble_hamiltonian(&scalar, n_particles)?;
                    let block = op.dense();
                    for i in 0..d {
                        for r in 0..dim {
                            for cidx in 0..dim {
                                matrix[(i * dim + r, i * dim + cidx)] += block[(r, cidx)];
                            }
                        }
                    }
                }
                OvKernel::InternalOnly(t) => {
                    for i in 0..d {
                        for j in 0..d {
                            if t[(i, j)] == C64::default() {
                                continue;
                            }
                            for b in 0..dim {
                                matrix[(i * dim + b, j * dim + b)] +=
                                    t[(i, j)] * c(level_weight);
                            }
                        }
                    }
                }
                OvKernel::SiteDiagonal(bs) => {
                    // weight N^{1-l} / N for the p = 1 kernel
                    let w = level_weight / nn;
                    for (col, occ) in basis.states.iter().enumerate() {
                        for (x, b) in bs.iter().enumerate() {
                            if occ[x] == 0 {
                                continue;
                            }
                            for i in 0..d {
                                for j in 0..d {
                                    matrix[(i * dim + col, j * dim + col)] +=
                                        b[(i, j)] * c(w * occ[x] as f64);
                                }
                            }
                        }
                    }
                }
                OvKernel::DenseOneBody(kv) => {
                    let w = level_weight / nn;
                    let m = lattice.m;
                    for (col, occ) in basis.states.iter().enumerate() {
                        for y in 0..m {
                            if occ[y] == 0 {
                                continue;
                            }
                            for x in 0..m {
                                let mut dst = occ.clone();
                                dst[y] -= 1;
                                dst[x] += 1;
                                let row = basis.index_of(&dst);
                                let ladder = ((occ[y] as f64) * (dst[x] as f64)).sqrt();
                                let block = &kv[x][y] * c(w * lattice.h * ladder);
                                for i in 0..d {
                                    for j in 0..d {
                                        matrix[(i * dim + row, j * dim + col)] += block[(i, j)];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let dev = crate::linalg::hermiticity_deviation(&matrix);
    if dev > 1e-10 * (1.0 + matrix.norm()) {
        return Err(Error::NonHermitian(dev));
    }
    Ok(OvExactOperator { d, lattice, n_particles, basis, matrix })
}

pub fn evolve_ov_exact(
    op: &OvExactOperator,
    state: &InternalSymState,
    t: f64,
) -> Result<InternalSymState> {
    if state.amp.len() != op.matrix.nrows() {
        return Err(Error::Invalid("state dimension mismatch".into()));
    }
    let amp = crate::linalg::evolve_dense(&op.matrix, &state.amp, t);
    let drift = (amp.norm() - state.amp.norm()).abs();
    if drift > 1e-10 {
        return Err(Error::NormDrift { drift, tol: 1e-10 });
    }
    Ok(InternalSymState {
        d: state.d,
        lattice: state.lattice,
        n_particles: state.n_particles,
        basis: state.basis.clone(),
        amp,
    })
}

/// `ctilde^t e^{iNS^t} (zeta^t (x) K^N Phi_{R^t})` for one branch.
pub fn assemble_branch_asymptotic(
    spec: &OperatorValuedSpec,
    point: &BranchPoint,
    gamma_accum: C64,
    n_particles: usize,
) -> Result<InternalSymState> {
    let lattice = spec.lattice;
    let g = germ_vacuum(&point.r, &point.phi, &lattice, 1e-10)?;
    let (g, _) = g.truncated(n_particles);
    let mut sym = canonical_embed(&g, &point.phi, n_particles)?;
    let phase =
        (I * gamma_accum).exp() * C64::new(0.0, n_particles as f64 * point.s_phase).exp();
    sym.amp *= phase;
    Ok(InternalSymState::product(&point.zeta, &sym))
}

/// Weighted superposition of branch asymptotics; the weights project the
/// initial internal vector onto the branch eigenvectors at t = 0.
pub fn superpose_branches(states: &[(C64, InternalSymState)]) -> Result<InternalSymState> {
    let first = &states
        .first()
        .ok_or_else(|| Error::Invalid("empty superposition".into()))?
        .1;
    let mut out = InternalSymState::zeros(first.d, first.lattice, first.n_particles);
    for (w, s) in states {
        if s.amp.len() != out.amp.len() {
            return Err(Error::Invalid("superposition dimension mismatch".into()));
        }
        out.amp += &s.amp * *w;
    }
    Ok(out)
}

pub fn branch_weights(zetas0: &[CVec], zeta_init: &CVec) -> Result<Vec<C64>> {
    let weights: Vec<C64> = zetas0.iter().map(|z| z.dotc(zeta_init)).collect();
    let total: f64 = weights.iter().map(|w| w.norm_sqr()).sum();
    if (total - zeta_init.norm_squared()).abs() > 1e-8 * zeta_init.norm_squared() {
        return Err(Error::Invalid(
            "initial internal vector is not in the span of the branch eigenvectors".into(),
        ));
    }
    Ok(weights)
}

/// Two-level coupling: the scalar Schroedinger data on the identity plus a
/// site-diagonal 2 x 2 Hermitian coupling.
pub fn build_two_level(scalar: &HamiltonianSpec, b: &[CMat]) -> Result<OperatorValuedSpec> {
    let m = scalar.lattice.m;
    if b.len() != m {
        return Err(Error::Invalid("need one coupling matrix per site".into()));
    }
    for mat in b {
        if mat.nrows() != 2 || mat.ncols() != 2 {
            return Err(Error::Invalid("two-level coupling must be 2 x 2".into()));
        }
        if crate::linalg::hermiticity_deviation(mat) > 1e-12 {
            return Err(Error::NonHermitian(crate::linalg::hermiticity_deviation(mat)));
        }
    }
    let mut level0: Vec<OvKernel> = scalar
        .kernels_at(0)
        .iter()
        .map(|k| OvKernel::ScalarTimesId(k.clone()))
        .collect();
    level0.push(OvKernel::SiteDiagonal(b.to_vec()));
    Ok(OperatorValuedSpec {
        internal: InternalSpace::new(2)?,
        lattice: scalar.lattice,
        levels: vec![level0],
    })
}

/// Extra-particle system: the internal space is the discretized coordinate of
/// one additional particle of mass `Mass/N`, coupled to the condensate
/// through `V(x, y)`.
pub fn build_extra_particle(
    scalar: &HamiltonianSpec,
    u_extra: &[f64],
    v_coupling: &nalgebra::DMatrix<f64>,
    mass_extra: f64,
    y_sites: usize,
) -> Result<OperatorValuedSpec> {
    if y_sites < 1 || y_sites > 8 {
        return Err(Error::Invalid("extra-particle grid must have 1..=8 sites".into()));
    }
    let m = scalar.lattice.m;
    if u_extra.len() != y_sites || v_coupling.nrows() != m || v_coupling.ncols() != y_sites {
        return Err(Error::Invalid("extra-particle data dimensions mismatch".into()));
    }
    let hbar = scalar.hbar;
    // internal operator: (1/hbar)(-hbar^2/2M Laplacian_y + U(y))
    let y_lattice = LatticeSpec::new(y_sites.max(2), 1.0, crate::lattice::Topology::Periodic1D)?;
    let mut internal = if y_sites >= 2 {
        discrete_laplacian(&y_lattice) * c(-hbar / (2.0 * mass_extra))
    } else {
        CMat::zeros(1, 1)
    };
    let mut internal_full = CMat::zeros(y_sites, y_sites);
    for i in 0..y_sites {
        for j in 0..y_sites {
            if i < internal.nrows() && j < internal.ncols() {
                internal_full[(i, j)] = internal[(i, j)];
            }
        }
    }
    for (i, u) in u_extra.iter().enumerate() {
        internal_full[(i, i)] += c(u / hbar);
    }
    internal = internal_full;
    // coupling: site-diagonal in x with internal diag(V(x, .)/hbar)
    let coupling: Vec<CMat> = (0..m)
        .map(|x| {
            CMat::from_fn(y_sites, y_sites, |i, j| {
                if i == j {
                    c(v_coupling[(x, i)] / hbar)
                } else {
                    C64::default()
                }
            })
        })
        .collect();
    let mut level0: Vec<OvKernel> = scalar
        .kernels_at(0)
        .iter()
        .map(|k| OvKernel::ScalarTimesId(k.clone()))
        .collect();
    level0.push(OvKernel::InternalOnly(internal));
    level0.push(OvKernel::SiteDiagonal(coupling));
    Ok(OperatorValuedSpec {
        internal: InternalSpace::new(y_sites)?,
        lattice: scalar.lattice,
        levels: vec![level0],
    })
}
