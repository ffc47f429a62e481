//! Leading asymptotic state assembly, the operators of the 1/sqrt(N)
//! expansion, and transport of the first-order correction.

use crate::error::{Error, Result};
use crate::fock::{
    apply_creation, apply_creation_tensor, apply_raw_creation_vec, canonical_embed, factorial,
    germ_vacuum, germ_vacuum_fixed_rank, occ_basis, project_fphi, FockVector, SymTensor,
    SymmetricState,
};
use crate::lattice::{HamiltonianSpec, LatticeSpec, OneParticleState};
use crate::linalg::{c, inner, CMat, CVec, I};
use crate::meanfield::{riccati_moebius, rk4_step, FlowConfig, GermState, PropagatorPair};
use num_complex::Complex64 as C64;

pub const DEFAULT_GERM_TOL: f64 = 1e-10;

// ---------------------------------------------------------------------------
// leading asymptotics
// ---------------------------------------------------------------------------

/// `c^t e^{iNS^t} K^N(Lambda^+ .. Lambda^+ Phi_{R^t})`; with no creation
/// operators this is the leading-order wave function.
pub fn assemble_leading(
    spec: &HamiltonianSpec,
    germ: &GermState,
    creations: &[(OneParticleState, OneParticleState)],
    n_particles: usize,
) -> Result<SymmetricState> {
    let lattice = spec.lattice;
    let mut g = germ_vacuum(&germ.r, &germ.phi, &lattice, DEFAULT_GERM_TOL)?;
    for (u, v) in creations {
        g = apply_creation(u, v, &g)?;
    }
    let (g, dropped) = g.truncated(n_particles);
    if dropped > 1e-6 * g.norm_sqr() {
        log::warn!("embedding truncation dropped {:.3e} of squared norm", dropped);
    }
    let mut state = canonical_embed(&g, &germ.phi, n_particles)?;
    let phase = germ.c_phase * C64::new(0.0, n_particles as f64 * germ.s_phase).exp();
    state.amp *= phase;
    Ok(state)
}

// ---------------------------------------------------------------------------
// H'_j operators
// ---------------------------------------------------------------------------

/// A contracted kernel with free creation slots (rank `rc`, x-block) and free
/// annihilation slots (rank `ra`, y-block), dense layout
/// `vals[xlin * m^ra + ylin]`.
#[derive(Clone, Debug)]
struct BiTensor {
    rc: usize,
    ra: usize,
    m: usize,
    vals: Vec<C64>,
}

/// One normal-ordered term `scalar * a+^rc [npoly(n)] a-^ra`; the number
/// polynomial acts between the strings (on the post-annihilation rank).
#[derive(Clone, Debug)]
struct HTerm {
    bi: BiTensor,
    npoly: Vec<f64>,
    scalar: C64,
}

/// The coefficient operators `H'_j` of `H'_N = sum_j N^{1-j/2} H'_j`, bound to
/// one mean-field point. Kernel terms (from commuting `H_N` through the
/// canonical operator) are kept apart from the flow terms (from `dK/dt`): the
/// kernel part alone satisfies the exact finite-N identity
/// `H_N K^N g = K^N sum_j N^{1-j/2} Hk'_j g`.
pub struct HPrimeSet {
    kernel_terms: Vec<Vec<HTerm>>,
    flow_terms: Vec<Vec<HTerm>>,
}

impl HPrimeSet {
    pub fn j_max(&self) -> usize {
        self.kernel_terms.len() - 1
    }
}

fn poly_eval(p: &[f64], x: f64) -> f64 {
    p.iter().rev().fold(0.0, |acc, &ck| acc * x + ck)
}

/// Coefficients of `prod_{r=0}^{q-1} (1 - (x + offset + r) t)` as polynomials
/// in `x`, one per power of `t`.
///
/// The number-operator product of the commutation formula counts condensate
/// slots already displaced by the creation string, so a term with `rc`
/// creation operators carries `offset = rc` relative to the rank the product
/// is evaluated at (the post-annihilation rank). This is pinned by the exact
/// finite-N identity `H_N K^N g = K^N Hk' g`.
fn number_product_expansion(q: usize, offset: usize) -> Vec<Vec<f64>> {
    let mut coeffs: Vec<Vec<f64>> = vec![vec![1.0]];
    for r in 0..q {
        // multiply by (1 - (x + offset + r) t)
        let mut next: Vec<Vec<f64>> = vec![Vec::new(); coeffs.len() + 1];
        for (j, poly) in coeffs.iter().enumerate() {
            add_poly(&mut next[j], poly, 1.0);
            // -(x + offset + r) * poly contributes at t^{j+1}
            let mut shifted = vec![0.0];
            shifted.extend_from_slice(poly); // x * poly
            add_poly(&mut next[j + 1], &shifted, -1.0);
            add_poly(&mut next[j + 1], poly, -((offset + r) as f64));
        }
        coeffs = next;
    }
    coeffs
}

fn add_poly(dst: &mut Vec<f64>, src: &[f64], scale: f64) {
    if dst.len() < src.len() {
        dst.resize(src.len(), 0.0);
    }
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s * scale;
    }
}

fn multi_unrank(mut lin: usize, rank: usize, m: usize) -> Vec<usize> {
    let mut idx = vec![0usize; rank];
    for slot in (0..rank).rev() {
        idx[slot] = lin % m;
        lin /= m;
    }
    idx
}

/// Contracts a dense p-body kernel with `p - rc` condensate factors on the
/// x-block and `p - ra` on the y-block (each bound slot carries one `h`).
fn contract_kernel(
    kernel_vals: &[C64],
    p: usize,
    m: usize,
    h: f64,
    phi: &CVec,
    rc: usize,
    ra: usize,
) -> BiTensor {
    let dim_free_x = m.pow(rc as u32);
    let dim_free_y = m.pow(ra as u32);
    let dim_bound_x = m.pow((p - rc) as u32);
    let dim_bound_y = m.pow((p - ra) as u32);
    let dim_y = m.pow(p as u32);
    let scale = c(h.powi((2 * p - rc - ra) as i32));
    let mut vals = vec![C64::default(); dim_free_x * dim_free_y];
    for xf in 0..dim_free_x {
        for xb in 0..dim_bound_x {
            let xs = multi_unrank(xb, p - rc, m);
            let cx: C64 = xs.iter().map(|&x| phi[x].conj()).product();
            let xlin = xf * dim_bound_x + xb;
            for yf in 0..dim_free_y {
                let mut acc = C64::default();
                for yb in 0..dim_bound_y {
                    let ys = multi_unrank(yb, p - ra, m);
                    let cy: C64 = ys.iter().map(|&y| phi[y]).product();
                    acc += kernel_vals[xlin * dim_y + yf * dim_bound_y + yb] * cy;
                }
                vals[xf * dim_free_y + yf] += cx * acc;
            }
        }
    }
    for v in &mut vals {
        *v *= scale;
    }
    BiTensor { rc, ra, m, vals }
}

/// Projects every free slot of a BiTensor against the condensate mode:
/// creation slots with `delta - h phi phi*`, annihilation slots with the
/// conjugate projector.
fn project_bitensor(bi: &BiTensor, phi: &CVec, h: f64) -> BiTensor {
    let m = bi.m;
    let mut vals = bi.vals.clone();
    let dim_x = m.pow(bi.rc as u32);
    let dim_y = m.pow(bi.ra as u32);
    // creation slots
    for slot in 0..bi.rc {
        let stride = m.pow((bi.rc - 1 - slot) as u32) * dim_y;
        let mut next = vec![C64::default(); vals.len()];
        for lin in 0..vals.len() {
            let x = (lin / stride) % m;
            let base = lin - x * stride;
            let mut acc = C64::default();
            for z in 0..m {
                let p = if x == z { c(1.0) } else { C64::default() }
                    - c(h) * phi[x] * phi[z].conj();
                acc += p * vals[base + z * stride];
            }
            next[lin] = acc;
        }
        vals = next;
    }
    // annihilation slots
    for slot in 0..bi.ra {
        let stride = m.pow((bi.ra - 1 - slot) as u32);
        let mut next = vec![C64::default(); vals.len()];
        for lin in 0..vals.len() {
            let y = (lin / stride) % m;
            let base = lin - y * stride;
            let mut acc = C64::default();
            for z in 0..m {
                let p = if y == z { c(1.0) } else { C64::default() }
                    - c(h) * phi[y].conj() * phi[z];
                acc += p * vals[base + z * stride];
            }
            next[lin] = acc;
        }
        vals = next;
    }
    let _ = dim_x;
    BiTensor { rc: bi.rc, ra: bi.ra, m, vals }
}

fn rank1_creation(m: usize, w: &CVec) -> BiTensor {
    BiTensor { rc: 1, ra: 0, m, vals: w.iter().copied().collect() }
}

fn rank1_annihilation(m: usize, w: &CVec) -> BiTensor {
    BiTensor { rc: 0, ra: 1, m, vals: w.iter().copied().collect() }
}

fn scalar_term(m: usize, z: C64, npoly: Vec<f64>) -> HTerm {
    HTerm { bi: BiTensor { rc: 0, ra: 0, m, vals: vec![c(1.0)] }, npoly, scalar: z }
}

/// Builds `H'_0 .. H'_{j_max}` at the mean-field point `phi` by expanding the
/// commutation formula in powers of `1/sqrt(N)`.
pub fn hprime_build(spec: &HamiltonianSpec, phi: &OneParticleState, j_max: usize) -> Result<HPrimeSet> {
    let lattice = spec.lattice;
    let m = lattice.m;
    let h = lattice.h;
    let mut flow_terms: Vec<Vec<HTerm>> = (0..=j_max).map(|_| Vec::new()).collect();
    let mut kernel_terms: Vec<Vec<HTerm>> = (0..=j_max).map(|_| Vec::new()).collect();

    let grad = spec.grad_phi_star(0, phi);
    let phidot = &grad * (-I);
    let h0 = spec.classical_functional(0, phi)?;
    let pairing = inner(h, &phi.amp, &phidot); // (phi, dphi/dt)
    let ds_dt = inner(h, &phi.amp, &grad).re - h0;

    // flow terms: N dS/dt - iN(phi,phidot)(1 - n/N)
    //             - i sqrt(N) a+_phi[phidot] + i sqrt(N)(1 - n/N) a-_phi[phidot]
    flow_terms[0].push(scalar_term(m, c(ds_dt), vec![1.0]));
    flow_terms[0].push(scalar_term(m, -I * pairing, vec![1.0]));
    if j_max >= 1 {
        flow_terms[1].push(HTerm {
            bi: project_bitensor(&rank1_creation(m, &phidot), &phi.amp, h),
            npoly: vec![1.0],
            scalar: -I,
        });
        flow_terms[1].push(HTerm {
            bi: project_bitensor(&rank1_annihilation(m, &phidot.map(|z| z.conj())), &phi.amp, h),
            npoly: vec![1.0],
            scalar: I,
        });
    }
    if j_max >= 2 {
        flow_terms[2].push(scalar_term(m, I * pairing, vec![0.0, 1.0]));
    }
    if j_max >= 3 {
        flow_terms[3].push(HTerm {
            bi: project_bitensor(&rank1_annihilation(m, &phidot.map(|z| z.conj())), &phi.amp, h),
            npoly: vec![0.0, 1.0],
            scalar: -I,
        });
    }

    // kernel terms: j = 2l + rc + ra + 2 j_prod
    for (l, kernels) in spec.levels.iter().enumerate() {
        for kernel in kernels {
            let p = kernel.body_order();
            let dense = kernel.to_dense(&lattice);
            for rc in 0..=p {
                let expansion = number_product_expansion(p - rc, rc);
                for ra in 0..=p {
                    let front = factorial(p)
                        / (factorial(rc)
                            * factorial(p - rc)
                            * factorial(ra)
                            * factorial(p - ra));
                    let contracted = contract_kernel(&dense, p, m, h, &phi.amp, rc, ra);
                    let projected = project_bitensor(&contracted, &phi.amp, h);
                    for (j_prod, npoly) in expansion.iter().enumerate() {
                        let j = 2 * l + rc + ra + 2 * j_prod;
                        if j > j_max {
                            continue;
                        }
                        kernel_terms[j].push(HTerm {
                            bi: projected.clone(),
                            npoly: npoly.clone(),
                            scalar: c(front),
                        });
                    }
                }
            }
        }
    }
    Ok(HPrimeSet { kernel_terms, flow_terms })
}

fn apply_hterm(g: &FockVector, term: &HTerm) -> Result<FockVector> {
    let lattice = g.lattice;
    let m = lattice.m;
    let h = lattice.h;
    let rc = term.bi.rc;
    let ra = term.bi.ra;
    let create_patterns = occ_basis(m, rc);
    let ann_patterns = occ_basis(m, ra);
    let dim_y = m.pow(ra as u32);
    let top = g.n_max() + rc;
    let mut out = FockVector::zero(lattice, g.base_phi.clone());
    out.ensure_rank(top.saturating_sub(if ra > g.n_max() { ra } else { 0 }))?;
    out.ensure_rank(if g.n_max() + rc >= ra { g.n_max() + rc - ra } else { 0 })?;
    let scale = h.powf((rc + ra) as f64 / 2.0);
    for (n, comp) in g.comps.iter().enumerate() {
        if n < ra {
            continue;
        }
        let poly = c(poly_eval(&term.npoly, (n - ra) as f64));
        if poly == C64::default() {
            continue;
        }
        let target_rank = n - ra + rc;
        let target = occ_basis(m, target_rank);
        let mut amps_out = vec![C64::default(); target.len()];
        let amps_in: Vec<C64> = (0..comp.vals.len())
            .map(|i| comp.vals[i] * c(comp.amp_factor(i, h)))
            .collect();
        for (i, k) in comp.basis.states.iter().enumerate() {
            if amps_in[i] == C64::default() {
                continue;
            }
            for (ai, ka) in ann_patterns.states.iter().enumerate() {
                if ka.iter().zip(k).any(|(a, b)| a > b) {
                    continue;
                }
                let mut fall = 1.0f64;
                let mut mid = k.clone();
                for x in 0..m {
                    for step in 0..ka[x] {
                        fall *= (k[x] - step) as f64;
                    }
                    mid[x] -= ka[x];
                }
                let fall = fall.sqrt();
                let mult_a =
                    factorial(ra) / ka.iter().map(|&x| factorial(x as usize)).product::<f64>();
                let ylin = occ_representative_lin(ka, m);
                for (ci, kc) in create_patterns.states.iter().enumerate() {
                    let _ = ci;
                    let xlin = occ_representative_lin(kc, m);
                    let tval = term.bi.vals[xlin * dim_y + ylin];
                    if tval == C64::default() {
                        continue;
                    }
                    let mult_c = factorial(rc)
                        / kc.iter().map(|&x| factorial(x as usize)).product::<f64>();
                    let mut raise = 1.0f64;
                    let mut dst = mid.clone();
                    for x in 0..m {
                        for step in 0..kc[x] {
                            raise *= (mid[x] + step + 1) as f64;
                        }
                        dst[x] += kc[x];
                    }
                    let raise = raise.sqrt();
                    let ti = target.index_of(&dst);
                    amps_out[ti] += amps_in[i]
                        * tval
                        * poly
                        * term.scalar
                        * c(scale * mult_a * mult_c * fall * raise);
                }
            }
        }
        for (i, amp) in amps_out.iter().enumerate() {
            let f = out.comps[target_rank].amp_factor(i, h);
            out.comps[target_rank].vals[i] += amp / c(f);
        }
    }
    Ok(out)
}

fn occ_representative_lin(k: &[u8], m: usize) -> usize {
    let mut lin = 0usize;
    for (site, &count) in k.iter().enumerate() {
        for _ in 0..count {
            lin = lin * m + site;
        }
    }
    lin
}

/// Applies the expansion coefficient operator `H'_j` at the germ point.
pub fn hprime_apply(
    spec: &HamiltonianSpec,
    phi: &OneParticleState,
    j: usize,
    g: &FockVector,
) -> Result<FockVector> {
    let set = hprime_build(spec, phi, j)?;
    hprime_apply_set(&set, j, g)
}

pub fn hprime_apply_set(set: &HPrimeSet, j: usize, g: &FockVector) -> Result<FockVector> {
    if j >= set.kernel_terms.len() {
        return Err(Error::OrderOutOfRange(j));
    }
    let mut out = FockVector::zero(g.lattice, g.base_phi.clone());
    for term in set.kernel_terms[j].iter().chain(&set.flow_terms[j]) {
        let contrib = apply_hterm(g, term)?;
        out.axpy(c(1.0), &contrib);
    }
    Ok(out)
}

/// Applies only the kernel part of `H'_j` (no `dK/dt` flow terms).
pub fn hprime_apply_kernel_part(set: &HPrimeSet, j: usize, g: &FockVector) -> Result<FockVector> {
    if j >= set.kernel_terms.len() {
        return Err(Error::OrderOutOfRange(j));
    }
    let mut out = FockVector::zero(g.lattice, g.base_phi.clone());
    for term in &set.kernel_terms[j] {
        let contrib = apply_hterm(g, term)?;
        out.axpy(c(1.0), &contrib);
    }
    Ok(out)
}

/// `i D_t` applied by a 5-point stencil in `t` plus the connection term
/// `i a^+[phi] a^-_phi[dphi/dt]` that keeps the subspace moving with `phi`.
pub fn apply_idt_stencil(
    states: &[FockVector; 5],
    phidot: &CVec,
    phi: &CVec,
    dt: f64,
) -> Result<FockVector> {
    let lattice = states[2].lattice;
    let h = lattice.h;
    let mut deriv = FockVector::zero(lattice, states[2].base_phi.clone());
    let weights = [1.0, -8.0, 0.0, 8.0, -1.0];
    for (state, w) in states.iter().zip(weights) {
        if w != 0.0 {
            deriv.axpy(c(w / (12.0 * dt)), state);
        }
    }
    // a^-_phi[phidot] then raw a^+[phi]
    let m = lattice.m;
    let mut ann = SymTensor::zeros(m, 1);
    for x in 0..m {
        let mut k = vec![0u8; m];
        k[x] = 1;
        let idx = ann.basis.index_of(&k);
        ann.vals[idx] = phidot[x].conj();
    }
    let lowered = crate::fock::apply_annihilation_tensor(&states[2], &ann)?;
    let connection = apply_raw_creation_vec(&lowered, phi)?;
    let mut out = deriv;
    out.axpy(c(1.0), &connection);
    out.scale(I);
    Ok(out)
}

// ---------------------------------------------------------------------------
// correction transport
// ---------------------------------------------------------------------------

/// Orthonormal basis of the complement of `phi` (h-weighted inner product).
/// `phi` is normalized internally: stage states of an RK4 sweep drift off the
/// unit sphere by O(dt) and the projector needs the direction only.
fn orthogonal_modes(phi: &CVec, h: f64) -> Vec<CVec> {
    let m = phi.len();
    let unit = phi / c(crate::linalg::norm(h, phi));
    let mut modes: Vec<CVec> = Vec::new();
    for x in 0..m {
        let mut v = CVec::zeros(m);
        v[x] = c(1.0);
        v = crate::linalg::project_out(h, &unit, &v);
        for q in &modes {
            v -= q * inner(h, q, &v);
        }
        let n = crate::linalg::norm(h, &v);
        if n > 1e-6 {
            modes.push(v / c(n));
        }
    }
    debug_assert_eq!(modes.len(), m - 1);
    modes
}

/// Symmetric tensors spanning the rank-n constrained component space:
/// symmetrized products of the orthogonal modes.
fn monomial_tensor_basis(modes: &[CVec], m: usize, n: usize) -> Vec<SymTensor> {
    if n == 0 {
        return vec![SymTensor::scalar(m, c(1.0))];
    }
    let mode_basis = occ_basis(modes.len(), n);
    let mut out = Vec::with_capacity(mode_basis.len());
    for combo in &mode_basis.states {
        // dense symmetrized product of the chosen modes
        let mut chosen: Vec<&CVec> = Vec::new();
        for (mode, &count) in combo.iter().enumerate() {
            for _ in 0..count {
                chosen.push(&modes[mode]);
            }
        }
        let dim = m.pow(n as u32);
        let mut dense = vec![C64::default(); dim];
        let perms = permutations_of(n);
        for lin in 0..dim {
            let xs = multi_unrank(lin, n, m);
            let mut acc = C64::default();
            for perm in &perms {
                let mut prod = c(1.0);
                for (slot, &which) in perm.iter().enumerate() {
                    prod *= chosen[which][xs[slot]];
                }
                acc += prod;
            }
            dense[lin] = acc / c(perms.len() as f64);
        }
        out.push(SymTensor::from_dense(m, n, &dense));
    }
    out
}

fn permutations_of(n: usize) -> Vec<Vec<usize>> {
    let mut perms = vec![vec![]];
    for k in 0..n {
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

fn fock_to_flat(g: &FockVector, max_rank: usize) -> CVec {
    let h = g.lattice.h;
    let mut vals = Vec::new();
    for n in 0..=max_rank {
        if let Some(comp) = g.comps.get(n) {
            for i in 0..comp.vals.len() {
                vals.push(comp.vals[i] * c(comp.amp_factor(i, h)));
            }
        } else {
            vals.extend(std::iter::repeat(C64::default()).take(occ_basis(g.lattice.m, n).len()));
        }
    }
    CVec::from_vec(vals)
}

/// Expands a Fock vector over the creation-monomial frame
/// `{ int w_n a+^n Phi_R }`: returns the coefficient tensors, least squares
/// over the shared truncation window.
pub fn match_monomial_basis(
    rhs: &FockVector,
    vacuum: &FockVector,
    n0: usize,
    tol: f64,
) -> Result<Vec<SymTensor>> {
    let lattice = rhs.lattice;
    let m = lattice.m;
    let h = lattice.h;
    let modes = orthogonal_modes(&vacuum.base_phi.amp, h);
    let max_rank = vacuum.n_max().min(rhs.n_max());
    let mut columns: Vec<CVec> = Vec::new();
    let mut layout: Vec<(usize, usize)> = Vec::new(); // (rank n, basis index)
    let mut bases: Vec<Vec<SymTensor>> = Vec::new();
    for n in 0..=n0 {
        let basis = monomial_tensor_basis(&modes, m, n);
        for (bi, tensor) in basis.iter().enumerate() {
            let col = apply_creation_tensor(vacuum, tensor)?;
            columns.push(fock_to_flat(&col, max_rank));
            layout.push((n, bi));
        }
        bases.push(basis);
    }
    let rows = columns[0].len();
    let mut mat = CMat::zeros(rows, columns.len());
    for (j, col) in columns.iter().enumerate() {
        mat.column_mut(j).copy_from(col);
    }
    let rhs_flat = fock_to_flat(rhs, max_rank);
    let svd = mat.clone().svd(true, true);
    let coeffs = svd
        .solve(&rhs_flat, 1e-12)
        .map_err(|e| Error::Invalid(format!("least squares failed: {e}")))?;
    let residual = (&mat * &coeffs - &rhs_flat).norm();
    let scale = rhs_flat.norm().max(1e-12);
    if residual > tol * scale {
        return Err(Error::BasisMatch(residual / scale));
    }
    let mut out: Vec<SymTensor> = (0..=n0).map(|n| SymTensor::zeros(m, n)).collect();
    for (j, &(n, bi)) in layout.iter().enumerate() {
        let tensor = &bases[n][bi];
        for (i, v) in tensor.vals.iter().enumerate() {
            out[n].vals[i] += coeffs[j] * v;
        }
    }
    Ok(out)
}

/// Germ trajectory point extended with the action/scalar phases integrated at
/// RK4 accuracy and the first-correction coefficient tensors.
#[derive(Clone, Debug)]
pub struct CorrectedGermState {
    pub germ: GermState,
    /// coefficients of `g_1 = sum_n int w_n a+^n Phi_R` (unnormalized monomials)
    pub w: Vec<SymTensor>,
}

impl CorrectedGermState {
    /// Materializes `g_1^t` as a Fock vector over the germ vacuum.
    pub fn first_correction(&self, lattice: &LatticeSpec, vac_rank: usize) -> Result<FockVector> {
        let vac = germ_vacuum_fixed_rank(&self.germ.r, &self.germ.phi, lattice, vac_rank)?;
        let mut out = FockVector::zero(*lattice, self.germ.phi.clone());
        for tensor in &self.w {
            let contrib = apply_creation_tensor(&vac, tensor)?;
            out.axpy(c(1.0), &contrib);
        }
        Ok(out)
    }

    /// `e^{iNS} K^N (g_0 + N^{-1/2} g_1)` with `g_0 = c^t Phi_{R^t}`.
    pub fn assemble(
        &self,
        lattice: &LatticeSpec,
        n_particles: usize,
        order: usize,
    ) -> Result<SymmetricState> {
        let mut g = germ_vacuum(&self.germ.r, &self.germ.phi, lattice, DEFAULT_GERM_TOL)?;
        g.scale(self.germ.c_phase);
        if order >= 2 {
            let g1 = self.first_correction(lattice, g.n_max())?;
            g.axpy(c(1.0 / (n_particles as f64).sqrt()), &g1);
        }
        let (g, _) = g.truncated(n_particles);
        let mut state = canonical_embed(&g, &self.germ.phi, n_particles)?;
        state.amp *= C64::new(0.0, n_particles as f64 * self.germ.s_phase).exp();
        Ok(state)
    }
}

struct CorrectionLayout {
    m: usize,
    n0: usize,
    comp_sizes: Vec<usize>,
}

impl CorrectionLayout {
    fn new(m: usize, n0: usize) -> Self {
        let comp_sizes = (0..=n0).map(|n| occ_basis(m, n).len()).collect();
        Self { m, n0, comp_sizes }
    }

    fn w_len(&self) -> usize {
        self.comp_sizes.iter().sum()
    }

    fn germ_len(&self) -> usize {
        self.m + 2 * self.m * self.m + 2
    }

    fn pack(&self, phi: &CVec, a: &CMat, b: &CMat, s: C64, logc: C64, w: &[SymTensor]) -> CVec {
        let m = self.m;
        let mut y = CVec::zeros(self.germ_len() + self.w_len());
        y.rows_mut(0, m).copy_from(phi);
        for col in 0..m {
            for row in 0..m {
                y[m + col * m + row] = a[(row, col)];
                y[m + m * m + col * m + row] = b[(row, col)];
            }
        }
        y[m + 2 * m * m] = s;
        y[m + 2 * m * m + 1] = logc;
        let mut offset = self.germ_len();
        for tensor in w {
            for v in &tensor.vals {
                y[offset] = *v;
                offset += 1;
            }
        }
        y
    }

    #[allow(clippy::type_complexity)]
    fn unpack(&self, y: &CVec) -> (CVec, CMat, CMat, C64, C64, Vec<SymTensor>) {
        let m = self.m;
        let phi = y.rows(0, m).into_owned();
        let mut a = CMat::zeros(m, m);
        let mut b = CMat::zeros(m, m);
        for col in 0..m {
            for row in 0..m {
                a[(row, col)] = y[m + col * m + row];
                b[(row, col)] = y[m + m * m + col * m + row];
            }
        }
        let s = y[m + 2 * m * m];
        let logc = y[m + 2 * m * m + 1];
        let mut w = Vec::with_capacity(self.n0 + 1);
        let mut offset = self.germ_len();
        for (n, &size) in self.comp_sizes.iter().enumerate() {
            let mut tensor = SymTensor::zeros(m, n);
            for i in 0..size {
                tensor.vals[i] = y[offset + i];
            }
            offset += size;
            w.push(tensor);
        }
        (phi, a, b, s, logc, w)
    }
}

/// Joint RK4 flow of mean field, propagator pair, phases, and the
/// first-correction coefficients driven by the source `H'_3 g_0`.
///
/// `w0` gives the initial correction coefficients (zero for pure germ data);
/// `n0` bounds the coefficient rank; `vac_rank` pins the germ-vacuum
/// truncation used for source extraction.
pub fn integrate_corrected_flow(
    spec: &HamiltonianSpec,
    phi0: &OneParticleState,
    r0: &CMat,
    w0: Option<Vec<SymTensor>>,
    cfg: &FlowConfig,
    n0: usize,
    vac_rank: usize,
    with_source: bool,
) -> Result<Vec<CorrectedGermState>> {
    let lattice = spec.lattice;
    let m = lattice.m;
    let h = lattice.h;
    let layout = CorrectionLayout::new(m, n0);
    let w_init = w0.unwrap_or_else(|| (0..=n0).map(|n| SymTensor::zeros(m, n)).collect());
    if w_init.len() != n0 + 1 {
        return Err(Error::Invalid("initial correction layout mismatch".into()));
    }

    let deriv = |_t: f64, y: &CVec| -> CVec {
        let (phi_amp, a, b, _s, logc, w) = layout.unpack(y);
        let phi = OneParticleState::new(phi_amp);
        let grad = spec.grad_phi_star(0, &phi);
        let blocks = spec.hessian_blocks(0, &phi);
        let kpm = &blocks.pm * c(h);
        let kpp = &blocks.pp * c(h);
        let da = (&kpm * &a + &kpp * b.map(|z| z.conj())) * (-I);
        let db = (&kpm * &b + &kpp * a.map(|z| z.conj())) * (-I);
        let pair = PropagatorPair { a: a.clone(), b: b.clone(), t: 0.0 };
        let r = riccati_moebius(&pair, r0, &lattice).expect("Moebius transport");
        // dS/dt and d(log c)/dt along the flow
        let h0 = spec.classical_functional(0, &phi).expect("real functional");
        let ds = c(inner(h, &phi.amp, &grad).re - h0);
        let mut dlogc_int = crate::linalg::pair_kernels(h, &blocks.mm, &r) * c(0.5);
        if spec.levels.len() > 1 {
            dlogc_int += spec.classical_functional_complex(1, &phi);
        }
        let dlogc = -I * dlogc_int;
        // transport of the coefficient tensors
        let slot_op = &blocks.pm * c(h) + (&r * blocks.mm.clone()) * c(h * h);
        let mut dw: Vec<SymTensor> = Vec::with_capacity(n0 + 1);
        let chi = if with_source {
            let vac = germ_vacuum_fixed_rank(&r, &phi, &lattice, vac_rank)
                .expect("pairing norm below one");
            let mut g0 = vac.clone();
            g0.scale(logc.exp());
            let set = hprime_build(spec, &phi, 3).expect("H' expansion");
            let source = hprime_apply_set(&set, 3, &g0).expect("H'_3 application");
            Some(
                match_monomial_basis(&source, &vac, n0, 1e-5)
                    .expect("source expressible over the monomial frame"),
            )
        } else {
            None
        };
        for n in 0..=n0 {
            // i dw_n/dt = i dlogc/dt w_n + sum_slots (Kpm + R Kmm) w_n
            //             + (n+1)(n+2)/2 * C2[w_{n+2}] + chi_n
            let mut rhs = crate::fock::apply_one_body_sum(&w[n], &slot_op);
            for (i, v) in w[n].vals.iter().enumerate() {
                rhs.vals[i] += I * dlogc * v;
            }
            if n + 2 <= n0 {
                let coeff = ((n + 1) * (n + 2)) as f64 / 2.0;
                let contracted = contract_two_slots(&w[n + 2], &blocks.mm, h);
                for (i, v) in contracted.vals.iter().enumerate() {
                    rhs.vals[i] += c(coeff) * v;
                }
            }
            if let Some(chi) = &chi {
                for (i, v) in chi[n].vals.iter().enumerate() {
                    rhs.vals[i] += v;
                }
            }
            let mut dwn = SymTensor::zeros(m, n);
            for (i, v) in rhs.vals.iter().enumerate() {
                dwn.vals[i] = -I * v;
            }
            dw.push(dwn);
        }
        layout.pack(&(grad * (-I)), &da, &db, ds, dlogc, &dw)
    };

    let mut y = layout.pack(
        &phi0.amp,
        &CMat::identity(m, m),
        &CMat::zeros(m, m),
        C64::default(),
        C64::default(),
        &w_init,
    );
    let steps = cfg.steps();
    let mut out = Vec::with_capacity(steps + 1);
    let snapshot = |y: &CVec, t: f64| -> Result<CorrectedGermState> {
        let (phi_amp, a, b, s, logc, mut w) = layout.unpack(y);
        let phi = OneParticleState::new(phi_amp);
        let pair = PropagatorPair { a, b, t };
        let r = riccati_moebius(&pair, r0, &lattice)?;
        // hygiene: drop pure-gauge condensate components of the coefficients
        for tensor in w.iter_mut().skip(1) {
            *tensor = crate::fock::project_slots_creation(tensor, &phi.amp, h);
        }
        Ok(CorrectedGermState {
            germ: GermState {
                t,
                phi,
                pair,
                r,
                s_phase: s.re,
                c_phase: logc.exp(),
                germ_vecs: Vec::new(),
            },
            w,
        })
    };
    out.push(snapshot(&y, 0.0)?);
    for k in 0..steps {
        let t = k as f64 * cfg.dt;
        y = rk4_step(&deriv, t, &y, cfg.dt);
        out.push(snapshot(&y, (k + 1) as f64 * cfg.dt)?);
    }
    Ok(out)
}

/// `C2[w](x_1..x_n) = h^2 sum_{y1,y2} K(y1,y2) w(y1,y2,x_1..x_n)`.
fn contract_two_slots(w: &SymTensor, kernel: &CMat, h: f64) -> SymTensor {
    let m = w.basis.m;
    let n = w.n;
    assert!(n >= 2);
    let mut out = SymTensor::zeros(m, n - 2);
    for (j, occ) in out.basis.states.iter().enumerate() {
        let mut acc = C64::default();
        for y1 in 0..m {
            for y2 in 0..m {
                let mut src = occ.clone();
                src[y1] += 1;
                src[y2] += 1;
                acc += kernel[(y1, y2)] * w.vals[w.basis.index_of(&src)];
            }
        }
        out.vals[j] = acc * c(h * h);
    }
    out
}

/// Transport of the first-order correction along a germ trajectory.
///
/// The coefficient functions are advanced per the two-slot transport equation
/// with the source extracted from `H'_3 g_0` by monomial-frame matching.
pub fn transport_first_correction(
    spec: &HamiltonianSpec,
    germ0: &GermState,
    g0_1: Option<&FockVector>,
    cfg: &FlowConfig,
    n0: usize,
    vac_rank: usize,
) -> Result<Vec<CorrectedGermState>> {
    let lattice = spec.lattice;
    let w0 = match g0_1 {
        None => None,
        Some(g) => {
            let vac = germ_vacuum_fixed_rank(&germ0.r, &germ0.phi, &lattice, vac_rank)?;
            Some(match_monomial_basis(g, &vac, n0, 1e-6)?)
        }
    };
    integrate_corrected_flow(spec, &germ0.phi, &germ0.r, w0, cfg, n0, vac_rank, true)
}

/// Fock-side residual of the expansion identity
/// `(i D_t - H'_2) g_l = H'_3 g_{l-1}` at trajectory index `k` (5-point
/// stencil; the trajectory spacing is the stencil step).
pub fn expansion_residual(
    spec: &HamiltonianSpec,
    flow: &[CorrectedGermState],
    k: usize,
    order: usize,
    vac_rank: usize,
) -> Result<f64> {
    let lattice = spec.lattice;
    let dt = flow[1].germ.t - flow[0].germ.t;
    let state = &flow[k];
    let phi = &state.germ.phi;
    let grad = spec.grad_phi_star(0, phi);
    let phidot = &grad * (-I);
    let g_at = |j: usize| -> Result<FockVector> {
        let s = &flow[j];
        match order {
            0 => {
                let mut g = germ_vacuum_fixed_rank(&s.germ.r, &s.germ.phi, &lattice, vac_rank)?;
                g.scale(s.germ.c_phase);
                Ok(g)
            }
            1 => s.first_correction(&lattice, vac_rank),
            _ => Err(Error::OrderOutOfRange(order)),
        }
    };
    let states = [
        g_at(k - 2)?,
        g_at(k - 1)?,
        g_at(k)?,
        g_at(k + 1)?,
        g_at(k + 2)?,
    ];
    let idt = apply_idt_stencil(&states, &phidot, &phi.amp, dt)?;
    let set = hprime_build(spec, phi, 3)?;
    let h2g = hprime_apply_set(&set, 2, &states[2])?;
    let mut residual = idt;
    residual.axpy(c(-1.0), &h2g);
    if order == 1 {
        let mut g0 = germ_vacuum_fixed_rank(&state.germ.r, phi, &lattice, vac_rank)?;
        g0.scale(state.germ.c_phase);
        let source = hprime_apply_set(&set, 3, &g0)?;
        residual.axpy(c(-1.0), &source);
    }
    // the truncation boundary cannot cancel; measure below it
    let (below, _) = residual.truncated(vac_rank.saturating_sub(2));
    Ok(below.norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_schrodinger_spec, random_unit_state, LatticeSpec, PBodyKernel};
    use crate::meanfield::{integrate_germ_flow, product_initial_r};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hartree_spec(seed: u64, m: usize, vscale: f64) -> (HamiltonianSpec, OneParticleState) {
        let lattice = LatticeSpec::unit(m);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v =
            nalgebra::DMatrix::<f64>::from_fn(m, m, |_, _| rng.gen_range(0.4..1.2) * vscale);
        v = (&v + v.transpose()) * 0.5;
        let u: Vec<f64> = (0..m).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let spec = build_schrodinger_spec(&u, &v, 1.0, 1.0, lattice).unwrap();
        let phi = random_unit_state(&lattice, &mut rng);
        (spec, phi)
    }

    fn random_fock(spec: &HamiltonianSpec, phi: &OneParticleState, seed: u64) -> FockVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = FockVector::zero(spec.lattice, phi.clone());
        g.ensure_rank(4).unwrap();
        for t in g.comps.iter_mut() {
            for v in t.vals.iter_mut() {
                *v = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            }
        }
        project_fphi(&g)
    }

    #[test]
    fn hprime_kernel_part_reproduces_exact_hamiltonian() {
        // exact finite-N identity: H_N K^N g = K^N sum_j N^{1-j/2} Hk'_j g
        let (spec, phi) = hartree_spec(78, 2, 1.0);
        let mut g = random_fock(&spec, &phi, 79);
        let (gt, _) = g.truncated(2);
        g = gt;
        let n = 8usize;
        let set = hprime_build(&spec, &phi, 8).unwrap();
        let mut image = FockVector::zero(spec.lattice, phi.clone());
        for j in 0..=8usize {
            let weight = (n as f64).powf(1.0 - j as f64 / 2.0);
            let part = hprime_apply_kernel_part(&set, j, &g).unwrap();
            image.axpy(c(weight), &part);
        }
        let lhs = {
            let op = crate::oracle::assemble_hamiltonian(&spec, n).unwrap();
            let embedded = canonical_embed(&g, &phi, n).unwrap();
            let mut out = embedded.clone();
            out.amp = op.apply(&embedded.amp);
            out
        };
        let rhs = canonical_embed(&image.truncated(n).0, &phi, n).unwrap();
        let diff = (&lhs.amp - &rhs.amp).norm();
        assert!(
            diff < 1e-10 * lhs.amp.norm().max(1.0),
            "commutation identity violated: {diff:.3e}"
        );
    }

    #[test]
    fn hprime_zero_and_one_nullify_on_flow() {
        let (spec, phi) = hartree_spec(80, 3, 1.0);
        let g = random_fock(&spec, &phi, 81);
        let h0g = hprime_apply(&spec, &phi, 0, &g).unwrap();
        assert!(h0g.norm() <= 1e-9 * g.norm(), "H'_0 g = {}", h0g.norm());
        let h1g = hprime_apply(&spec, &phi, 1, &g).unwrap();
        assert!(h1g.norm() <= 1e-9 * g.norm(), "H'_1 g = {}", h1g.norm());
    }

    #[test]
    fn hprime_two_matches_quadratic_sandwich() {
        // H'_2 on the flow reduces to the explicit quadratic form; check the
        // scalar part against H_1 - (1/2) int phi phi K_mm and hermiticity of
        // the action on a random vector via inner products
        let (spec, phi) = hartree_spec(82, 3, 1.0);
        let g = random_fock(&spec, &phi, 83);
        let set = hprime_build(&spec, &phi, 2).unwrap();
        let h2g = hprime_apply_set(&set, 2, &g).unwrap();
        // independent assembly from hessian blocks
        let h = spec.lattice.h;
        let blocks = spec.hessian_blocks(0, &phi);
        let scalar = {
            let mut acc = C64::default();
            for x in 0..3 {
                for y in 0..3 {
                    acc += phi.amp[x] * blocks.mm[(x, y)] * phi.amp[y] * c(h * h);
                }
            }
            -acc * c(0.5)
        };
        // + (1/2) a+ K_pp a+ + a+ K_pm a- + (1/2) a- K_mm a-
        let m = spec.lattice.m;
        let dim = m * m;
        let mut pp = vec![C64::default(); dim];
        let mut pm = vec![C64::default(); dim];
        let mut mm = vec![C64::default(); dim];
        for x in 0..m {
            for y in 0..m {
                pp[x * m + y] = blocks.pp[(x, y)] * c(h * h);
                pm[x * m + y] = blocks.pm[(x, y)] * c(h * h);
                mm[x * m + y] = blocks.mm[(x, y)] * c(h * h);
            }
        }
        let term = |bi: BiTensor, scalar: C64| HTerm { bi, npoly: vec![1.0], scalar };
        let mk = |rc: usize, ra: usize, vals: Vec<C64>| {
            project_bitensor(&BiTensor { rc, ra, m, vals }, &phi.amp, h)
        };
        let mut expect = FockVector::zero(spec.lattice, phi.clone());
        for t in [
            term(mk(2, 0, pp.clone()), c(0.5)),
            term(mk(1, 1, pm.clone()), c(1.0)),
            term(mk(0, 2, mm.clone()), c(0.5)),
        ] {
            // measure factors: tensors above absorbed h^2 while the generic
            // machinery supplies h per free slot; rescale accordingly
            let mut tt = t.clone();
            for v in tt.bi.vals.iter_mut() {
                *v /= c(h * h);
            }
            let contrib = apply_hterm(&g, &tt).unwrap();
            expect.axpy(c(1.0), &contrib);
        }
        let mut scaled = g.clone();
        scaled.scale(scalar);
        expect.axpy(c(1.0), &scaled);
        let mut diff = expect.clone();
        diff.axpy(c(-1.0), &h2g);
        assert!(
            diff.norm() < 1e-10 * g.norm().max(1.0),
            "H'_2 mismatch {:.3e}",
            diff.norm()
        );
    }

    #[test]
    fn lemma14_identity_leading_order() {
        let (spec, phi0) = hartree_spec(84, 3, 1.0);
        let cfg = FlowConfig { reproject_every: 0, ..FlowConfig::new(1e-3, 0.2) };
        let r0 = product_initial_r(&phi0);
        let flow =
            integrate_corrected_flow(&spec, &phi0, &r0, None, &cfg, 1, 10, false).unwrap();
        for k in [50usize, 100, 150] {
            let res = expansion_residual(&spec, &flow, k, 0, 10).unwrap();
            let scale = flow[k].germ.c_phase.norm();
            assert!(res < 1e-6 * scale.max(1.0), "Lemma 14 residual {res:.3e} at {k}");
        }
    }

    #[test]
    fn first_correction_stays_zero_without_interaction_source() {
        // V = 0 eigenstate flow: H'_3 source vanishes so w stays zero
        let lattice = LatticeSpec::unit(3);
        let v = nalgebra::DMatrix::<f64>::zeros(3, 3);
        let spec = build_schrodinger_spec(&[0.4, -0.1, 0.2], &v, 1.0, 1.0, lattice).unwrap();
        let a = match &spec.levels[0][0] {
            PBodyKernel::OneBody(a) => a.clone(),
            _ => unreachable!(),
        };
        let eig = a.symmetric_eigen();
        let phi0 =
            OneParticleState::new(eig.eigenvectors.column(0).into_owned()).normalized(&lattice);
        let r0 = product_initial_r(&phi0);
        let cfg = FlowConfig::new(1e-3, 0.2);
        let flow = integrate_corrected_flow(&spec, &phi0, &r0, None, &cfg, 3, 8, true).unwrap();
        let wnorm: f64 = flow
            .last()
            .unwrap()
            .w
            .iter()
            .map(|t| t.norm_sqr(1.0))
            .sum::<f64>()
            .sqrt();
        assert!(wnorm < 1e-9, "correction grew without a source: {wnorm:.3e}");
    }

    #[test]
    fn transported_correction_satisfies_expansion_identity() {
        let (spec, phi0) = hartree_spec(85, 2, 1.0);
        let r0 = product_initial_r(&phi0);
        let cfg = FlowConfig { reproject_every: 0, ..FlowConfig::new(1e-3, 0.1) };
        let flow = integrate_corrected_flow(&spec, &phi0, &r0, None, &cfg, 3, 12, true).unwrap();
        let k = 50usize;
        let res = expansion_residual(&spec, &flow, k, 1, 12).unwrap();
        let scale = flow[k]
            .first_correction(&spec.lattice, 12)
            .unwrap()
            .norm()
            .max(1e-6);
        assert!(
            res < 2e-5 * scale.max(1.0) + 2e-6,
            "(iD_t - H'_2) g_1 = H'_3 g_0 residual {res:.3e}, scale {scale:.3e}"
        );
    }

    #[test]
    fn zero_hamiltonian_freezes_correction() {
        let lattice = LatticeSpec::unit(2);
        let spec = HamiltonianSpec::from_kernels(lattice, vec![vec![]]);
        let mut rng = ChaCha8Rng::seed_from_u64(86);
        let phi0 = random_unit_state(&lattice, &mut rng);
        let r0 = product_initial_r(&phi0);
        // seed a nonzero coefficient
        let modes = orthogonal_modes(&phi0.amp, 1.0);
        let mut w0: Vec<SymTensor> = (0..=1).map(|n| SymTensor::zeros(2, n)).collect();
        let seeded = monomial_tensor_basis(&modes, 2, 1);
        w0[1] = seeded[0].clone();
        let cfg = FlowConfig::new(1e-3, 0.3);
        let flow =
            integrate_corrected_flow(&spec, &phi0, &r0, Some(w0.clone()), &cfg, 1, 6, true)
                .unwrap();
        let last = flow.last().unwrap();
        for (a, b) in last.w[1].vals.iter().zip(&w0[1].vals) {
            assert!((a - b).norm() < 1e-12, "coefficients drifted");
        }
    }

    #[test]
    fn assemble_leading_product_initial_data() {
        let (spec, phi0) = hartree_spec(87, 3, 1.0);
        let r0 = product_initial_r(&phi0);
        let germ = GermState {
            t: 0.0,
            phi: phi0.clone(),
            pair: PropagatorPair::identity(3),
            r: r0,
            s_phase: 0.0,
            c_phase: c(1.0),
            germ_vecs: Vec::new(),
        };
        let n = 6;
        let state = assemble_leading(&spec, &germ, &[], n).unwrap();
        let product = SymmetricState::product_state(spec.lattice, &phi0, n);
        assert!(state.distance(&product) < 1e-12);
    }

    #[test]
    fn linear_case_leading_asymptotics_is_exact() {
        let lattice = LatticeSpec::unit(3);
        let v = nalgebra::DMatrix::<f64>::zeros(3, 3);
        let spec = build_schrodinger_spec(&[0.3, -0.2, 0.5], &v, 1.0, 1.0, lattice).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(88);
        let phi0 = random_unit_state(&lattice, &mut rng);
        let r0 = product_initial_r(&phi0);
        let cfg = FlowConfig::new(1e-3, 0.7);
        let germ = integrate_germ_flow(&spec, &phi0, &r0, &[], &cfg).unwrap();
        let n = 5;
        let asym = assemble_leading(&spec, germ.last().unwrap(), &[], n).unwrap();
        let op = crate::oracle::assemble_hamiltonian(&spec, n).unwrap();
        let product = SymmetricState::product_state(lattice, &phi0, n);
        let exact = crate::oracle::evolve_exact(&op, &product, 0.7).unwrap();
        assert!(
            exact.distance(&asym) < 1e-7,
            "linear case should be exact: {:.3e}",
            exact.distance(&asym)
        );
    }
}
