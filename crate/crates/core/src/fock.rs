//! Truncated Fock space over the lattice, the subspace orthogonal to the
//! condensate mode, the germ vacuum built from perfect pairings, and the
//! multiparticle canonical operator into the symmetric N-particle sector.

use crate::error::{Error, Result};
use crate::lattice::{LatticeSpec, OneParticleState};
use crate::linalg::{c, CMat, CVec};
use num_complex::Complex64 as C64;
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

/// Hard cap on the tensor rank a `FockVector` may grow to.
pub const MAX_RANK: usize = 32;

pub fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Occupation multi-indices `k` with `sum k = n` over `m` sites, ordered
/// lexicographically. Shared and cached per `(m, n)`.
#[derive(Debug)]
pub struct OccBasis {
    pub m: usize,
    pub n: usize,
    pub states: Vec<Vec<u8>>,
    index: HashMap<Vec<u8>, usize>,
}

impl OccBasis {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn index_of(&self, occ: &[u8]) -> usize {
        self.index[occ]
    }

    pub fn try_index_of(&self, occ: &[u8]) -> Option<usize> {
        self.index.get(occ).copied()
    }
}

fn enumerate_occupations(m: usize, n: usize) -> Vec<Vec<u8>> {
    fn rec(sites_left: usize, budget: u8, prefix: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
        if sites_left == 1 {
            let mut full = prefix.clone();
            full.push(budget);
            out.push(full);
            return;
        }
        for first in (0..=budget).rev() {
            prefix.push(first);
            rec(sites_left - 1, budget - first, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(m, n as u8, &mut Vec::new(), &mut out);
    out.sort();
    out
}

pub fn occ_basis(m: usize, n: usize) -> Arc<OccBasis> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<OccBasis>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap();
    guard
        .entry((m, n))
        .or_insert_with(|| {
            let states = enumerate_occupations(m, n);
            let index = states
                .iter()
                .enumerate()
                .map(|(i, s)| (s.clone(), i))
                .collect();
            Arc::new(OccBasis { m, n, states, index })
        })
        .clone()
}

/// Symmetric rank-`n` tensor over `m` sites in occupation-compressed storage:
/// `vals[i]` is the tensor value at any index tuple with occupation
/// `basis.states[i]`.
#[derive(Clone, Debug)]
pub struct SymTensor {
    pub n: usize,
    pub basis: Arc<OccBasis>,
    pub vals: Vec<C64>,
}

impl SymTensor {
    pub fn zeros(m: usize, n: usize) -> Self {
        let basis = occ_basis(m, n);
        let vals = vec![C64::default(); basis.len()];
        Self { n, basis, vals }
    }

    pub fn scalar(m: usize, value: C64) -> Self {
        let basis = occ_basis(m, 0);
        Self { n: 0, basis, vals: vec![value] }
    }

    /// `sum |g_n|^2` with measure weights: `h^n sum_tuples |g|^2`.
    pub fn norm_sqr(&self, h: f64) -> f64 {
        let n = self.n;
        self.basis
            .states
            .iter()
            .zip(&self.vals)
            .map(|(k, v)| {
                let mult = factorial(n) / k.iter().map(|&x| factorial(x as usize)).product::<f64>();
                h.powi(n as i32) * mult * v.norm_sqr()
            })
            .sum()
    }

    /// Orthonormal-basis amplitude of occupation `k`:
    /// `amp[k] = h^{n/2} sqrt(n!/prod k!) * value[k]`.
    pub fn amp_factor(&self, idx: usize, h: f64) -> f64 {
        let k = &self.basis.states[idx];
        let mult = factorial(self.n) / k.iter().map(|&x| factorial(x as usize)).product::<f64>();
        h.powf(self.n as f64 / 2.0) * mult.sqrt()
    }

    pub fn to_dense(&self) -> Vec<C64> {
        let m = self.basis.m;
        let dim = m.pow(self.n as u32);
        let mut out = vec![C64::default(); dim];
        for lin in 0..dim {
            let occ = dense_index_occupation(lin, self.n, m);
            out[lin] = self.vals[self.basis.index_of(&occ)];
        }
        out
    }

    pub fn from_dense(m: usize, n: usize, dense: &[C64]) -> Self {
        let basis = occ_basis(m, n);
        let mut vals = vec![C64::default(); basis.len()];
        let mut counts = vec![0usize; basis.len()];
        let dim = m.pow(n as u32);
        for lin in 0..dim {
            let occ = dense_index_occupation(lin, n, m);
            let i = basis.index_of(&occ);
            vals[i] += dense[lin];
            counts[i] += 1;
        }
        for (v, &cnt) in vals.iter_mut().zip(&counts) {
            *v /= c(cnt as f64);
        }
        Self { n, basis, vals }
    }
}

fn dense_index_occupation(mut lin: usize, n: usize, m: usize) -> Vec<u8> {
    let mut occ = vec![0u8; m];
    for _ in 0..n {
        occ[lin % m] += 1;
        lin /= m;
    }
    occ
}

/// Truncated element of the Fock space based at `phi`; component `comps[n]`
/// is the symmetric n-point tensor `g_n`.
#[derive(Clone, Debug)]
pub struct FockVector {
    pub lattice: LatticeSpec,
    pub base_phi: OneParticleState,
    pub comps: Vec<SymTensor>,
}

impl FockVector {
    pub fn vacuum(lattice: LatticeSpec, phi: OneParticleState) -> Self {
        Self {
            lattice,
            base_phi: phi,
            comps: vec![SymTensor::scalar(lattice.m, c(1.0))],
        }
    }

    pub fn zero(lattice: LatticeSpec, phi: OneParticleState) -> Self {
        Self {
            lattice,
            base_phi: phi,
            comps: vec![SymTensor::scalar(lattice.m, C64::default())],
        }
    }

    pub fn n_max(&self) -> usize {
        self.comps.len() - 1
    }

    pub fn ensure_rank(&mut self, n: usize) -> Result<()> {
        if n > MAX_RANK {
            return Err(Error::TruncationOverflow { needed: n, cap: MAX_RANK });
        }
        while self.comps.len() <= n {
            self.comps.push(SymTensor::zeros(self.lattice.m, self.comps.len()));
        }
        Ok(())
    }

    pub fn norm_sqr(&self) -> f64 {
        self.comps.iter().map(|t| t.norm_sqr(self.lattice.h)).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn inner(&self, other: &FockVector) -> C64 {
        let h = self.lattice.h;
        let mut acc = C64::default();
        for n in 0..self.comps.len().min(other.comps.len()) {
            let a = &self.comps[n];
            let b = &other.comps[n];
            for i in 0..a.vals.len() {
                let f = a.amp_factor(i, h);
                acc += a.vals[i].conj() * b.vals[i] * c(f * f);
            }
        }
        acc
    }

    pub fn scale(&mut self, z: C64) {
        for t in &mut self.comps {
            for v in &mut t.vals {
                *v *= z;
            }
        }
    }

    pub fn axpy(&mut self, z: C64, other: &FockVector) {
        let max = self.comps.len().max(other.comps.len()) - 1;
        self.ensure_rank(max).expect("rank within cap");
        for (n, t) in other.comps.iter().enumerate() {
            for (i, v) in t.vals.iter().enumerate() {
                self.comps[n].vals[i] += z * v;
            }
        }
    }

    /// Drops components above `max_rank` (the canonical operator at particle
    /// number `N` never sees ranks beyond `N`); returns the result together
    /// with the squared norm that was discarded.
    pub fn truncated(&self, max_rank: usize) -> (FockVector, f64) {
        let mut out = self.clone();
        let mut dropped = 0.0;
        while out.comps.len() > max_rank + 1 {
            let t = out.comps.pop().unwrap();
            dropped += t.norm_sqr(self.lattice.h);
        }
        (out, dropped)
    }

    /// Largest violation of the orthogonality condition
    /// `h sum_x phi*(x) g_n(x, rest) = 0`.
    pub fn orthogonality_residual(&self) -> f64 {
        let h = self.lattice.h;
        let m = self.lattice.m;
        let phi = &self.base_phi.amp;
        let mut worst: f64 = 0.0;
        for t in self.comps.iter().skip(1) {
            let reduced = occ_basis(m, t.n - 1);
            for r in &reduced.states {
                let mut acc = C64::default();
                for x in 0..m {
                    let mut full = r.clone();
                    full[x] += 1;
                    acc += phi[x].conj() * t.vals[t.basis.index_of(&full)] * c(h);
                }
                worst = worst.max(acc.norm());
            }
        }
        worst
    }
}

// ---------------------------------------------------------------------------
// ladder machinery (orthonormal-amplitude space)
// ---------------------------------------------------------------------------

fn value_to_amp(t: &SymTensor, h: f64) -> Vec<C64> {
    (0..t.vals.len())
        .map(|i| t.vals[i] * c(t.amp_factor(i, h)))
        .collect()
}

fn amp_to_value(m: usize, n: usize, amps: &[C64], h: f64) -> SymTensor {
    let mut t = SymTensor::zeros(m, n);
    for i in 0..amps.len() {
        let f = t.amp_factor(i, h);
        t.vals[i] = amps[i] / c(f);
    }
    t
}

/// Applies a smeared creation string
/// `int dx T(x_1..x_r) a^+_phi(x_1)..a^+_phi(x_r)` to `g`.
///
/// The tensor slots are projected against `phi` internally, so `T` need not
/// satisfy the orthogonality constraint beforehand.
pub fn apply_creation_tensor(g: &FockVector, tensor: &SymTensor) -> Result<FockVector> {
    let h = g.lattice.h;
    let m = g.lattice.m;
    let r = tensor.n;
    if r == 0 {
        let mut out = g.clone();
        out.scale(tensor.vals[0]);
        return Ok(out);
    }
    let proj = project_slots_creation(tensor, &g.base_phi.amp, h);
    let mut out = FockVector::zero(g.lattice, g.base_phi.clone());
    out.ensure_rank(g.n_max() + r)?;
    let scale = h.powf(r as f64 / 2.0);
    for (n, comp) in g.comps.iter().enumerate() {
        let amps_in = value_to_amp(comp, h);
        let target = occ_basis(m, n + r);
        let mut amps_out = vec![C64::default(); target.len()];
        for (i, k) in comp.basis.states.iter().enumerate() {
            if amps_in[i] == C64::default() {
                continue;
            }
            for (j, kp) in proj.basis.states.iter().enumerate() {
                let tval = proj.vals[j];
                if tval == C64::default() {
                    continue;
                }
                let mult = factorial(r)
                    / kp.iter().map(|&x| factorial(x as usize)).product::<f64>();
                let mut ladder = 1.0;
                let mut dst = k.clone();
                for x in 0..m {
                    for step in 0..kp[x] {
                        ladder *= (k[x] + step + 1) as f64;
                    }
                    dst[x] += kp[x];
                }
                let ti = target.index_of(&dst);
                amps_out[ti] += amps_in[i] * tval * c(scale * mult * ladder.sqrt());
            }
        }
        let t = amp_to_value(m, n + r, &amps_out, h);
        for (i, v) in t.vals.iter().enumerate() {
            out.comps[n + r].vals[i] += v;
        }
    }
    Ok(out)
}

/// Applies a smeared annihilation string
/// `int dy S(y_1..y_s) a^-_phi(y_1)..a^-_phi(y_s)` to `g` (linear in `S`).
pub fn apply_annihilation_tensor(g: &FockVector, tensor: &SymTensor) -> Result<FockVector> {
    let h = g.lattice.h;
    let m = g.lattice.m;
    let s = tensor.n;
    if s == 0 {
        let mut out = g.clone();
        out.scale(tensor.vals[0]);
        return Ok(out);
    }
    let proj = project_slots_annihilation(tensor, &g.base_phi.amp, h);
    let mut out = FockVector::zero(g.lattice, g.base_phi.clone());
    out.ensure_rank(g.n_max().saturating_sub(s))?;
    let scale = h.powf(s as f64 / 2.0);
    for (n, comp) in g.comps.iter().enumerate() {
        if n < s {
            continue;
        }
        let amps_in = value_to_amp(comp, h);
        let target = occ_basis(m, n - s);
        let mut amps_out = vec![C64::default(); target.len()];
        for (i, k) in comp.basis.states.iter().enumerate() {
            if amps_in[i] == C64::default() {
                continue;
            }
            for (j, kp) in proj.basis.states.iter().enumerate() {
                let sval = proj.vals[j];
                if sval == C64::default() {
                    continue;
                }
                if kp.iter().zip(k).any(|(a, b)| a > b) {
                    continue;
                }
                let mult = factorial(s)
                    / kp.iter().map(|&x| factorial(x as usize)).product::<f64>();
                let mut ladder = 1.0;
                let mut dst = k.clone();
                for x in 0..m {
                    for step in 0..kp[x] {
                        ladder *= (k[x] - step) as f64;
                    }
                    dst[x] -= kp[x];
                }
                let ti = target.index_of(&dst);
                amps_out[ti] += amps_in[i] * sval * c(scale * mult * ladder.sqrt());
            }
        }
        let t = amp_to_value(m, n - s, &amps_out, h);
        for (i, v) in t.vals.iter().enumerate() {
            out.comps[n - s].vals[i] += v;
        }
    }
    Ok(out)
}

/// Multiplies component `n` by `f(n)`; with `g` in the constrained subspace
/// this is any diagonal function of the number operator.
pub fn apply_number_function(g: &FockVector, f: impl Fn(usize) -> C64) -> FockVector {
    let mut out = g.clone();
    for (n, t) in out.comps.iter_mut().enumerate() {
        let z = f(n);
        for v in &mut t.vals {
            *v *= z;
        }
    }
    out
}

/// Unprojected smeared creation `a^+[w] = int a^+(x) w(x) dx` (rank 1).
pub fn apply_raw_creation_vec(g: &FockVector, w: &CVec) -> Result<FockVector> {
    let h = g.lattice.h;
    let m = g.lattice.m;
    let mut out = FockVector::zero(g.lattice, g.base_phi.clone());
    out.ensure_rank(g.n_max() + 1)?;
    let scale = h.sqrt();
    for (n, comp) in g.comps.iter().enumerate() {
        let amps_in = value_to_amp(comp, h);
        let target = occ_basis(m, n + 1);
        let mut amps_out = vec![C64::default(); target.len()];
        for (i, k) in comp.basis.states.iter().enumerate() {
            if amps_in[i] == C64::default() {
                continue;
            }
            for x in 0..m {
                if w[x] == C64::default() {
                    continue;
                }
                let mut dst = k.clone();
                dst[x] += 1;
                let ti = target.index_of(&dst);
                amps_out[ti] += amps_in[i] * w[x] * c(scale * (dst[x] as f64).sqrt());
            }
        }
        let t = amp_to_value(m, n + 1, &amps_out, h);
        for (i, v) in t.vals.iter().enumerate() {
            out.comps[n + 1].vals[i] += v;
        }
    }
    Ok(out)
}

fn slot_matrix_creation(phi: &CVec, h: f64) -> CMat {
    // a^+_phi(x) = int a^+(z) [delta(z-x) - h phi(z) phi*(x)] dz
    let m = phi.len();
    CMat::from_fn(m, m, |z, x| {
        let delta = if z == x { c(1.0) } else { C64::default() };
        delta - c(h) * phi[z] * phi[x].conj()
    })
}

fn slot_matrix_annihilation(phi: &CVec, h: f64) -> CMat {
    // a^-_phi(y) = int a^-(z) [delta(z-y) - h phi*(z) phi(y)] dz
    let m = phi.len();
    CMat::from_fn(m, m, |z, y| {
        let delta = if z == y { c(1.0) } else { C64::default() };
        delta - c(h) * phi[z].conj() * phi[y]
    })
}

pub fn project_slots_creation(t: &SymTensor, phi: &CVec, h: f64) -> SymTensor {
    apply_matrix_all_slots(t, &slot_matrix_creation(phi, h))
}

pub fn project_slots_annihilation(t: &SymTensor, phi: &CVec, h: f64) -> SymTensor {
    apply_matrix_all_slots(t, &slot_matrix_annihilation(phi, h))
}

/// Applies the same one-slot matrix `P` (plain matvec per slot) to every slot.
pub fn apply_matrix_all_slots(t: &SymTensor, p: &CMat) -> SymTensor {
    let m = t.basis.m;
    let n = t.n;
    if n == 0 {
        return t.clone();
    }
    let mut dense = t.to_dense();
    let dim = m.pow(n as u32);
    for slot in 0..n {
        let stride = m.pow((n - 1 - slot) as u32);
        let mut next = vec![C64::default(); dim];
        for lin in 0..dim {
            let x = (lin / stride) % m;
            let base = lin - x * stride;
            let mut acc = C64::default();
            for y in 0..m {
                acc += p[(x, y)] * dense[base + y * stride];
            }
            next[lin] = acc;
        }
        dense = next;
    }
    SymTensor::from_dense(m, n, &dense)
}

/// Applies `sum_slots O_slot` (the one-body operator lifted to the symmetric
/// tensor by acting in each slot once): `out(..x..) = sum_y O(x,y) g(..y..)`
/// summed over slots.
pub fn apply_one_body_sum(t: &SymTensor, o: &CMat) -> SymTensor {
    let m = t.basis.m;
    let mut out = SymTensor::zeros(m, t.n);
    if t.n == 0 {
        return out;
    }
    for (j, occ) in out.basis.states.iter().enumerate() {
        let mut acc = C64::default();
        for x in 0..m {
            if occ[x] == 0 {
                continue;
            }
            for y in 0..m {
                let mut src = occ.clone();
                src[x] -= 1;
                src[y] += 1;
                acc += c(occ[x] as f64) * o[(x, y)] * t.vals[t.basis.index_of(&src)];
            }
        }
        out.vals[j] = acc;
    }
    out
}

// ---------------------------------------------------------------------------
// germ vacuum
// ---------------------------------------------------------------------------

fn hafnian_memo(occ: &[u8], m_kernel: &CMat, memo: &mut HashMap<Vec<u8>, C64>) -> C64 {
    let total: u32 = occ.iter().map(|&v| v as u32).sum();
    if total == 0 {
        return c(1.0);
    }
    if let Some(v) = memo.get(occ) {
        return *v;
    }
    let first = occ.iter().position(|&v| v > 0).unwrap();
    let mut acc = C64::default();
    // pair one slot at `first` with every other slot
    if occ[first] >= 2 {
        let mut rest = occ.to_vec();
        rest[first] -= 2;
        acc += c((occ[first] - 1) as f64)
            * m_kernel[(first, first)]
            * hafnian_memo(&rest, m_kernel, memo);
    }
    for y in first + 1..occ.len() {
        if occ[y] == 0 {
            continue;
        }
        let mut rest = occ.to_vec();
        rest[first] -= 1;
        rest[y] -= 1;
        acc +=
            c(occ[y] as f64) * m_kernel[(first, y)] * hafnian_memo(&rest, m_kernel, memo);
    }
    memo.insert(occ.to_vec(), acc);
    acc
}

/// The germ vacuum: even components are perfect-pairing sums of the kernel
/// `M = R + phi (x) phi`, odd components vanish. Unnormalized.
///
/// The truncation order starts at 8 and grows until the last kept component
/// carries less than `tol` of the total squared norm.
pub fn germ_vacuum(r: &CMat, phi: &OneParticleState, lattice: &LatticeSpec, tol: f64) -> Result<FockVector> {
    let m = lattice.m;
    let h = lattice.h;
    let m_kernel = pairing_kernel(r, phi);
    let m_norm = crate::linalg::kernel_spectral_norm(h, &m_kernel);
    if m_norm >= 1.0 {
        return Err(Error::PairingNorm(m_norm));
    }
    let mut out = FockVector::zero(*lattice, phi.clone());
    out.comps[0].vals[0] = c(1.0);
    let mut memo: HashMap<Vec<u8>, C64> = HashMap::new();
    let mut total = 1.0f64;
    let mut n_max = 8usize;
    let mut n = 2usize;
    loop {
        if n > n_max {
            let last = out.comps.last().unwrap().norm_sqr(h);
            if last < tol * total {
                break;
            }
            n_max += 2;
            if n_max > MAX_RANK {
                return Err(Error::TruncationOverflow { needed: n_max, cap: MAX_RANK });
            }
        }
        out.ensure_rank(n)?;
        let norm_factor = factorial(n).sqrt();
        let basis = occ_basis(m, n);
        for (i, k) in basis.states.iter().enumerate() {
            out.comps[n].vals[i] = hafnian_memo(k, &m_kernel, &mut memo) / c(norm_factor);
        }
        total += out.comps[n].norm_sqr(h);
        n += 2;
    }
    Ok(out)
}

/// Germ vacuum with a caller-pinned truncation rank (stencil comparisons need
/// matching ranks across nearby trajectory points).
pub fn germ_vacuum_fixed_rank(
    r: &CMat,
    phi: &OneParticleState,
    lattice: &LatticeSpec,
    n_max: usize,
) -> Result<FockVector> {
    let m = lattice.m;
    let m_kernel = pairing_kernel(r, phi);
    let m_norm = crate::linalg::kernel_spectral_norm(lattice.h, &m_kernel);
    if m_norm >= 1.0 {
        return Err(Error::PairingNorm(m_norm));
    }
    let mut out = FockVector::zero(*lattice, phi.clone());
    out.comps[0].vals[0] = c(1.0);
    out.ensure_rank(n_max)?;
    let mut memo: HashMap<Vec<u8>, C64> = HashMap::new();
    let mut n = 2usize;
    while n <= n_max {
        let norm_factor = factorial(n).sqrt();
        let basis = occ_basis(m, n);
        for (i, k) in basis.states.iter().enumerate() {
            out.comps[n].vals[i] = hafnian_memo(k, &m_kernel, &mut memo) / c(norm_factor);
        }
        n += 2;
    }
    Ok(out)
}

/// `M(x,y) = R(x,y) + phi(x) phi(y)` (kernel values).
pub fn pairing_kernel(r: &CMat, phi: &OneParticleState) -> CMat {
    let m = phi.amp.len();
    CMat::from_fn(m, m, |x, y| r[(x, y)] + phi.amp[x] * phi.amp[y])
}

// ---------------------------------------------------------------------------
// germ creation operator
// ---------------------------------------------------------------------------

/// The complex-germ creation operator
/// `Lambda^{phi+}_{u,v} = int [a^+_phi(x) v*(x) - a^-_phi(x) u*(x)] dx`.
pub fn apply_creation(
    u: &OneParticleState,
    v: &OneParticleState,
    g: &FockVector,
) -> Result<FockVector> {
    let m = g.lattice.m;
    let mut create = SymTensor::zeros(m, 1);
    let mut annihilate = SymTensor::zeros(m, 1);
    for x in 0..m {
        let kx = vec_unit(m, x);
        create.vals[create.basis.index_of(&kx)] = v.amp[x].conj();
        annihilate.vals[annihilate.basis.index_of(&kx)] = u.amp[x].conj();
    }
    let mut out = apply_creation_tensor(g, &create)?;
    let lowered = apply_annihilation_tensor(g, &annihilate)?;
    out.axpy(c(-1.0), &lowered);
    Ok(out)
}

fn vec_unit(m: usize, x: usize) -> Vec<u8> {
    let mut k = vec![0u8; m];
    k[x] = 1;
    k
}

/// Re-enforces the orthogonality constraint by projecting every slot of every
/// component orthogonal to `phi`; idempotent.
pub fn project_fphi(g: &FockVector) -> FockVector {
    let h = g.lattice.h;
    let phi = &g.base_phi.amp;
    // g'(x, rest) = g(x, rest) - phi(x) * h * sum_z phi*(z) g(z, rest)
    let p = slot_matrix_creation(phi, h);
    let mut out = g.clone();
    for t in out.comps.iter_mut().skip(1) {
        *t = apply_matrix_all_slots(t, &p);
    }
    out
}

// ---------------------------------------------------------------------------
// symmetric N-particle states and the canonical operator
// ---------------------------------------------------------------------------

/// Amplitudes over the bosonic occupation-number basis for fixed `(N, M)`.
#[derive(Clone, Debug)]
pub struct SymmetricState {
    pub lattice: LatticeSpec,
    pub n_particles: usize,
    pub basis: Arc<OccBasis>,
    pub amp: CVec,
}

impl SymmetricState {
    pub fn zeros(lattice: LatticeSpec, n_particles: usize) -> Self {
        let basis = occ_basis(lattice.m, n_particles);
        let amp = CVec::zeros(basis.len());
        Self { lattice, n_particles, basis, amp }
    }

    pub fn norm(&self) -> f64 {
        self.amp.norm()
    }

    pub fn inner(&self, other: &SymmetricState) -> C64 {
        self.amp.dotc(&other.amp)
    }

    pub fn normalized(&self) -> SymmetricState {
        let mut out = self.clone();
        let n = out.norm();
        out.amp /= c(n);
        out
    }

    /// Product state `phi^{(x) N}`.
    pub fn product_state(lattice: LatticeSpec, phi: &OneParticleState, n: usize) -> Self {
        let g = FockVector::vacuum(lattice, phi.clone());
        canonical_embed(&g, phi, n).expect("vacuum embeds for any N")
    }

    pub fn distance(&self, other: &SymmetricState) -> f64 {
        (&self.amp - &other.amp).norm()
    }
}

/// The multiparticle canonical operator: dresses each p-particle excitation
/// `g_p` with `N - p` condensate factors.
///
/// `amp(n) = h^{N/2} sum_p sqrt(N! p! / N^p)
///           sum_{k <= n, |k| = p} g_p[k] sqrt(prod n_x!) / (prod k_x! (n_x-k_x)!)
///           prod phi(x)^{n_x - k_x}`
pub fn canonical_embed(
    g: &FockVector,
    phi: &OneParticleState,
    n_particles: usize,
) -> Result<SymmetricState> {
    if n_particles < g.n_max() {
        return Err(Error::TooFewParticles { n: n_particles, n_max: g.n_max() });
    }
    let lattice = g.lattice;
    let m = lattice.m;
    let h = lattice.h;
    let mut out = SymmetricState::zeros(lattice, n_particles);
    let basis = out.basis.clone();
    let nn = n_particles as f64;
    let h_pow = h.powf(n_particles as f64 / 2.0);
    for (bi, occ) in basis.states.iter().enumerate() {
        let mut acc = C64::default();
        for (p, comp) in g.comps.iter().enumerate() {
            let front = (factorial(n_particles) * factorial(p) / nn.powi(p as i32)).sqrt();
            for (ki, k) in comp.basis.states.iter().enumerate() {
                let gval = comp.vals[ki];
                if gval == C64::default() {
                    continue;
                }
                if k.iter().zip(occ).any(|(a, b)| a > b) {
                    continue;
                }
                let mut weight = 1.0f64;
                let mut cond = c(1.0);
                for x in 0..m {
                    let nx = occ[x] as usize;
                    let kx = k[x] as usize;
                    weight *= factorial(nx).sqrt() / (factorial(kx) * factorial(nx - kx));
                    cond *= phi.amp[x].powu((nx - kx) as u32);
                }
                acc += gval * cond * c(front * weight);
            }
        }
        out.amp[bi] = acc * c(h_pow);
    }
    Ok(out)
}

/// Squared norm of the canonical embedding without building it:
/// `sum_p N!/(N^p (N-p)!) ||g_p||^2`.
pub fn norm_formula(g: &FockVector, n_particles: usize) -> f64 {
    let h = g.lattice.h;
    let nn = n_particles as f64;
    g.comps
        .iter()
        .enumerate()
        .map(|(p, t)| {
            if p > n_particles {
                return 0.0;
            }
            let coeff = factorial(n_particles)
                / (nn.powi(p as i32) * factorial(n_particles - p));
            coeff * t.norm_sqr(h)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{random_unit_state, LatticeSpec, Topology};
    use crate::linalg::inner;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_r_in_w(
        lattice: &LatticeSpec,
        phi: &OneParticleState,
        strength: f64,
        rng: &mut ChaCha8Rng,
    ) -> CMat {
        // R = -phi x phi + (projected symmetric noise): stays in W_phi
        let m = lattice.m;
        let h = lattice.h;
        let raw = CMat::from_fn(m, m, |_, _| {
            C64::new(rng.gen_range(-strength..strength), rng.gen_range(-strength..strength))
        });
        let sym = (&raw + raw.transpose()) * c(0.5);
        // project both slots orthogonal to phi*: P m P^T with P = 1 - h phi phi^dag
        let p = CMat::from_fn(m, m, |x, z| {
            let delta = if x == z { c(1.0) } else { C64::default() };
            delta - c(h) * phi.amp[x] * phi.amp[z].conj()
        });
        let noise = &p * sym * p.transpose();
        let mut r = CMat::from_fn(m, m, |x, y| -phi.amp[x] * phi.amp[y]);
        r += noise;
        r
    }

    #[test]
    fn occupation_basis_is_lexicographic_and_complete() {
        let b = occ_basis(3, 4);
        assert_eq!(b.len(), 15); // C(4+2,2)
        let mut sorted = b.states.clone();
        sorted.sort();
        assert_eq!(sorted, b.states);
        for (i, s) in b.states.iter().enumerate() {
            assert_eq!(b.index_of(s), i);
        }
    }

    #[test]
    fn germ_vacuum_at_m_zero_is_bare_vacuum() {
        let lattice = LatticeSpec::unit(3);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let phi = random_unit_state(&lattice, &mut rng);
        let r = CMat::from_fn(3, 3, |x, y| -phi.amp[x] * phi.amp[y]);
        let g = germ_vacuum(&r, &phi, &lattice, 1e-14).unwrap();
        assert!((g.comps[0].vals[0] - c(1.0)).norm() < 1e-15);
        for t in g.comps.iter().skip(1) {
            assert!(t.norm_sqr(1.0) < 1e-28);
        }
    }

    #[test]
    fn germ_vacuum_pair_component_is_m_over_sqrt2() {
        let lattice = LatticeSpec::new(3, 0.8, Topology::Abstract).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let phi = random_unit_state(&lattice, &mut rng);
        let r = random_r_in_w(&lattice, &phi, 0.3, &mut rng);
        let g = germ_vacuum(&r, &phi, &lattice, 1e-12).unwrap();
        let m_kernel = pairing_kernel(&r, &phi);
        for (i, k) in g.comps[2].basis.states.iter().enumerate() {
            let (x, y) = {
                let mut sites = Vec::new();
                for (site, &count) in k.iter().enumerate() {
                    for _ in 0..count {
                        sites.push(site);
                    }
                }
                (sites[0], sites[1])
            };
            let expect = m_kernel[(x, y)] / c(2.0f64.sqrt());
            assert!((g.comps[2].vals[i] - expect).norm() < 1e-13);
        }
        // odd components identically zero
        assert!(g.comps[1].norm_sqr(lattice.h) == 0.0);
        assert!(g.comps[3].norm_sqr(lattice.h) == 0.0);
    }

    #[test]
    fn germ_vacuum_rank4_matches_three_pairings() {
        let lattice = LatticeSpec::unit(2);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let phi = random_unit_state(&lattice, &mut rng);
        let r = random_r_in_w(&lattice, &phi, 0.4, &mut rng);
        let g = germ_vacuum(&r, &phi, &lattice, 1e-12).unwrap();
        let mk = pairing_kernel(&r, &phi);
        // brute force over all 2^4 index tuples
        let dense = g.comps[4].to_dense();
        for lin in 0..16usize {
            let xs: Vec<usize> = (0..4).map(|s| (lin >> s) & 1).collect();
            let brute = (mk[(xs[0], xs[1])] * mk[(xs[2], xs[3])]
                + mk[(xs[0], xs[2])] * mk[(xs[1], xs[3])]
                + mk[(xs[0], xs[3])] * mk[(xs[1], xs[2])])
                / c(factorial(4).sqrt());
            let got = dense[xs[0] + 2 * xs[1] + 4 * xs[2] + 8 * xs[3]];
            assert!((got - brute).norm() < 1e-12, "lin {lin}");
        }
        // automatic orthogonality from the constraint on R
        assert!(g.orthogonality_residual() < 1e-12);
    }

    #[test]
    fn germ_vacuum_rejects_pairing_norm_at_least_one() {
        let lattice = LatticeSpec::unit(2);
        let phi = OneParticleState::new(CVec::from_vec(vec![c(1.0), c(0.0)]));
        let mut r = CMat::from_fn(2, 2, |x, y| -phi.amp[x] * phi.amp[y]);
        r[(1, 1)] = c(1.2); // pairing entry beyond the unit ball
        assert!(matches!(
            germ_vacuum(&r, &phi, &lattice, 1e-10),
            Err(Error::PairingNorm(_))
        ));
    }

    #[test]
    fn creation_on_vacuum_gives_projected_component() {
        let lattice = LatticeSpec::new(3, 0.7, Topology::Abstract).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let phi = random_unit_state(&lattice, &mut rng);
        let vac = FockVector::vacuum(lattice, phi.clone());
        let v = random_unit_state(&lattice, &mut rng);
        let u = OneParticleState::new(CVec::zeros(3));
        let out = apply_creation(&u, &v, &vac).unwrap();
        // comps[1] = v* - phi (phi, v*)
        let vstar = v.amp.map(|z| z.conj());
        let expect = &vstar - &phi.amp * inner(lattice.h, &phi.amp, &vstar);
        for x in 0..3 {
            let k = vec_unit(3, x);
            let got = out.comps[1].vals[out.comps[1].basis.index_of(&k)];
            assert!((got - expect[x]).norm() < 1e-13);
        }
        assert!(out.orthogonality_residual() < 1e-13);

        // v* parallel to phi and u = 0 annihilates
        let vpar = OneParticleState::new(phi.amp.map(|z| z.conj() * c(1.7)));
        let killed = apply_creation(&u, &vpar, &vac).unwrap();
        assert!(killed.norm() < 1e-13);
    }

    #[test]
    fn canonical_embed_of_vacuum_is_product_state() {
        let lattice = LatticeSpec::unit(2);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let phi = random_unit_state(&lattice, &mut rng);
        let state = SymmetricState::product_state(lattice, &phi, 5);
        for (i, occ) in state.basis.states.iter().enumerate() {
            let mut expect = c((factorial(5)
                / occ.iter().map(|&x| factorial(x as usize)).product::<f64>())
            .sqrt());
            for x in 0..2 {
                expect *= phi.amp[x].powu(occ[x] as u32);
            }
            assert!((state.amp[i] - expect).norm() < 1e-13);
        }
        assert!((state.norm() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn canonical_embed_single_excitation_formula() {
        let lattice = LatticeSpec::unit(2);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let phi = random_unit_state(&lattice, &mut rng);
        let chi = {
            let raw = random_unit_state(&lattice, &mut rng);
            OneParticleState::new(crate::linalg::project_out(1.0, &phi.amp, &raw.amp))
        };
        let mut g = FockVector::zero(lattice, phi.clone());
        g.ensure_rank(1).unwrap();
        for x in 0..2 {
            let i = g.comps[1].basis.index_of(&vec_unit(2, x));
            g.comps[1].vals[i] = chi.amp[x];
        }
        let n = 4;
        let state = canonical_embed(&g, &phi, n).unwrap();
        // brute force (1/sqrt(N)) sum_i chi(x_i) prod_{j != i} phi(x_j)
        let dim = 2usize.pow(n as u32);
        let mut dense = vec![C64::default(); dim];
        for lin in 0..dim {
            let xs: Vec<usize> = (0..n).map(|s| (lin >> s) & 1).collect();
            let mut acc = C64::default();
            for i in 0..n {
                let mut term = chi.amp[xs[i]];
                for (j, &xj) in xs.iter().enumerate() {
                    if j != i {
                        term *= phi.amp[xj];
                    }
                }
                acc += term;
            }
            dense[lin] = acc / c((n as f64).sqrt());
        }
        // compare occupation amplitudes
        for (bi, occ) in state.basis.states.iter().enumerate() {
            // find one representative tuple
            let mut tuple = Vec::new();
            for (site, &count) in occ.iter().enumerate() {
                for _ in 0..count {
                    tuple.push(site);
                }
            }
            let lin: usize = tuple.iter().enumerate().map(|(s, &x)| x << s).sum();
            let mult = factorial(n)
                / occ.iter().map(|&x| factorial(x as usize)).product::<f64>();
            let expect = dense[lin] * c(mult.sqrt());
            assert!((state.amp[bi] - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn canonical_embed_matches_full_tensor_brute_force() {
        let lattice = LatticeSpec::unit(2);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let phi = random_unit_state(&lattice, &mut rng);
        // random g with n_max = 2 in F_phi
        let mut g = FockVector::zero(lattice, phi.clone());
        g.ensure_rank(2).unwrap();
        for t in g.comps.iter_mut().skip(1) {
            for v in t.vals.iter_mut() {
                *v = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            }
        }
        g.comps[0].vals[0] = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let g = project_fphi(&g);
        assert!(g.orthogonality_residual() < 1e-14);

        let n = 4;
        let state = canonical_embed(&g, &phi, n).unwrap();
        let dim = 2usize.pow(n as u32);
        let mut dense = vec![C64::default(); dim];
        let d1 = g.comps[1].to_dense();
        let d2 = g.comps[2].to_dense();
        for lin in 0..dim {
            let xs: Vec<usize> = (0..n).map(|s| (lin >> s) & 1).collect();
            let mut acc = g.comps[0].vals[0]
                * xs.iter().map(|&x| phi.amp[x]).product::<C64>();
            // p = 1
            for i in 0..n {
                let mut term = d1[xs[i]];
                for (j, &xj) in xs.iter().enumerate() {
                    if j != i {
                        term *= phi.amp[xj];
                    }
                }
                acc += term * c((1.0f64 / n as f64).sqrt());
            }
            // p = 2
            for i in 0..n {
                for j in i + 1..n {
                    let mut term = d2[xs[i] + 2 * xs[j]];
                    for (l, &xl) in xs.iter().enumerate() {
                        if l != i && l != j {
                            term *= phi.amp[xl];
                        }
                    }
                    acc += term * c((factorial(2) / (n as f64).powi(2)).sqrt());
                }
            }
            dense[lin] = acc;
        }
        for (bi, occ) in state.basis.states.iter().enumerate() {
            let mut tuple = Vec::new();
            for (site, &count) in occ.iter().enumerate() {
                for _ in 0..count {
                    tuple.push(site);
                }
            }
            let lin: usize = tuple.iter().enumerate().map(|(s, &x)| x << s).sum();
            let mult = factorial(n)
                / occ.iter().map(|&x| factorial(x as usize)).product::<f64>();
            let expect = dense[lin] * c(mult.sqrt());
            assert!(
                (state.amp[bi] - expect).norm() < 1e-12,
                "occ {occ:?}: {} vs {}",
                state.amp[bi],
                expect
            );
        }
    }

    #[test]
    fn norm_formula_matches_embedded_norm() {
        let lattice = LatticeSpec::new(2, 1.3, Topology::Abstract).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let phi = random_unit_state(&lattice, &mut rng);
            let mut g = FockVector::zero(lattice, phi.clone());
            g.ensure_rank(2).unwrap();
            g.comps[0].vals[0] = C64::new(rng.gen_range(-1.0..1.0), 0.2);
            for t in g.comps.iter_mut().skip(1) {
                for v in t.vals.iter_mut() {
                    *v = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                }
            }
            let g = project_fphi(&g);
            let n = 6;
            let direct = canonical_embed(&g, &phi, n).unwrap().norm().powi(2);
            let formula = norm_formula(&g, n);
            assert!((direct - formula).abs() < 1e-12 * (1.0 + formula));
            // vacuum normalizes to 1
            let vac = FockVector::vacuum(lattice, phi.clone());
            assert!((norm_formula(&vac, n) - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn embedding_norm_monotone_toward_fock_norm() {
        let lattice = LatticeSpec::unit(2);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let phi = random_unit_state(&lattice, &mut rng);
        let mut g = FockVector::zero(lattice, phi.clone());
        g.ensure_rank(2).unwrap();
        g.comps[0].vals[0] = c(0.7);
        for t in g.comps.iter_mut().skip(1) {
            for v in t.vals.iter_mut() {
                *v = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            }
        }
        let g = project_fphi(&g);
        let full = g.norm_sqr();
        let mut prev = 0.0;
        for n in 2..=16 {
            let val = norm_formula(&g, n);
            assert!(val <= full + 1e-12, "bounded by (g,g)");
            assert!(val >= prev - 1e-12, "monotone in N");
            prev = val;
        }
        assert!((full - prev) / full < 0.35, "approaches (g,g)");
    }

    #[test]
    fn germ_annihilator_kills_germ_vacuum() {
        let lattice = LatticeSpec::unit(3);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let phi = random_unit_state(&lattice, &mut rng);
        let r = random_r_in_w(&lattice, &phi, 0.25, &mut rng);
        let g = germ_vacuum(&r, &phi, &lattice, 1e-14).unwrap();
        let tail = g.comps.last().unwrap().norm_sqr(lattice.h).sqrt();
        for _ in 0..5 {
            let v = random_unit_state(&lattice, &mut rng);
            // u = R v (kernel contraction with measure weight)
            let u = OneParticleState::new(crate::linalg::apply_kernel(lattice.h, &r, &v.amp));
            // int [a^+_phi u - a^-_phi v] applied to the germ vacuum
            let m = lattice.m;
            let mut create = SymTensor::zeros(m, 1);
            let mut annihilate = SymTensor::zeros(m, 1);
            for x in 0..m {
                let k = vec_unit(m, x);
                create.vals[create.basis.index_of(&k)] = u.amp[x];
                annihilate.vals[annihilate.basis.index_of(&k)] = v.amp[x];
            }
            let mut res = apply_creation_tensor(&g, &create).unwrap();
            let lowered = apply_annihilation_tensor(&g, &annihilate).unwrap();
            res.axpy(c(-1.0), &lowered);
            // everything cancels except the truncation boundary
            let mut below = 0.0;
            for t in res.comps.iter().take(g.n_max()) {
                below += t.norm_sqr(lattice.h);
            }
            assert!(
                below.sqrt() <= 20.0 * tail + 1e-12,
                "annihilation residual {} vs tail {}",
                below.sqrt(),
                tail
            );
        }
    }

    #[test]
    fn project_fphi_is_idempotent_and_kills_phi_component() {
        let lattice = LatticeSpec::unit(3);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let phi = random_unit_state(&lattice, &mut rng);
        let mut g = FockVector::zero(lattice, phi.clone());
        g.ensure_rank(3).unwrap();
        for t in g.comps.iter_mut().skip(1) {
            for v in t.vals.iter_mut() {
                *v = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            }
        }
        let p1 = project_fphi(&g);
        assert!(p1.orthogonality_residual() < 1e-14);
        let p2 = project_fphi(&p1);
        let mut diff = 0.0f64;
        for n in 0..=p1.n_max() {
            for (a, b) in p1.comps[n].vals.iter().zip(&p2.comps[n].vals) {
                diff = diff.max((a - b).norm());
            }
        }
        assert!(diff < 1e-14, "projection idempotent");

        // g1 = phi projects to zero
        let mut gphi = FockVector::zero(lattice, phi.clone());
        gphi.ensure_rank(1).unwrap();
        for x in 0..3 {
            let i = gphi.comps[1].basis.index_of(&vec_unit(3, x));
            gphi.comps[1].vals[i] = phi.amp[x];
        }
        let killed = project_fphi(&gphi);
        assert!(killed.norm() < 1e-14);
    }

    #[test]
    fn creation_string_matches_component_formula() {
        // a^+[w] on a random vector: (a^+[w] g)_n = (1/sqrt n) sum_i w(x_i) g_{n-1}(rest)
        let lattice = LatticeSpec::new(2, 0.9, Topology::Abstract).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let phi = random_unit_state(&lattice, &mut rng);
        let mut g = FockVector::zero(lattice, phi.clone());
        g.ensure_rank(2).unwrap();
        for t in g.comps.iter_mut() {
            for v in t.vals.iter_mut() {
                *v = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            }
        }
        let g = project_fphi(&g);
        let w_raw = random_unit_state(&lattice, &mut rng);
        let w = crate::linalg::project_out(lattice.h, &phi.amp, &w_raw.amp);
        let mut tensor = SymTensor::zeros(2, 1);
        for x in 0..2 {
            tensor.vals[tensor.basis.index_of(&vec_unit(2, x))] = w[x];
        }
        let out = apply_creation_tensor(&g, &tensor).unwrap();
        for n in 1..=3usize {
            let dense_prev = g.comps.get(n - 1).map(|t| t.to_dense());
            let dense_out = out.comps[n].to_dense();
            let dim = 2usize.pow(n as u32);
            for lin in 0..dim {
                let xs: Vec<usize> = (0..n).map(|s| (lin / 2usize.pow(s as u32)) % 2).collect();
                let mut expect = C64::default();
                if let Some(prev) = &dense_prev {
                    for i in 0..n {
                        let rest_lin: usize = xs
                            .iter()
                            .enumerate()
                            .filter(|(j, _)| *j != i)
                            .map(|(_, &x)| x)
                            .enumerate()
                            .map(|(s, x)| x * 2usize.pow(s as u32))
                            .sum();
                        expect += w[xs[i]] * prev[rest_lin];
                    }
                    expect /= c((n as f64).sqrt());
                }
                assert!(
                    (dense_out[lin] - expect).norm() < 1e-12,
                    "n {n} lin {lin}: {:?} vs {:?}",
                    dense_out[lin],
                    expect
                );
            }
        }
    }
}
