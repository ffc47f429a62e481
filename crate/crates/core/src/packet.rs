//! Semiclassical analog on phase space: classical Hamiltonian flow, the
//! variation system, the alpha-Riccati germ matrix, Gaussian packets, and an
//! hbar-sweep comparison against a split-step grid reference.

use crate::error::{Error, Result};
use crate::linalg::{c, CMat, CVec, I};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use rustfft::FftPlanner;

pub type RVec = DVector<f64>;
pub type RMat = DMatrix<f64>;

/// Smooth classical Hamiltonian through value/gradient/Hessian callbacks.
pub struct ClassicalHamiltonian {
    pub dim: usize,
    pub value: Box<dyn Fn(&RVec, &RVec) -> f64 + Sync>,
    pub grad_p: Box<dyn Fn(&RVec, &RVec) -> RVec + Sync>,
    pub grad_q: Box<dyn Fn(&RVec, &RVec) -> RVec + Sync>,
    pub hess_pp: Box<dyn Fn(&RVec, &RVec) -> RMat + Sync>,
    pub hess_pq: Box<dyn Fn(&RVec, &RVec) -> RMat + Sync>,
    pub hess_qq: Box<dyn Fn(&RVec, &RVec) -> RMat + Sync>,
}

impl ClassicalHamiltonian {
    /// `H = |P|^2 / 2m + V(Q)` in one dimension.
    pub fn separable_1d(
        mass: f64,
        potential: impl Fn(f64) -> f64 + Sync + Clone + 'static,
        potential_d1: impl Fn(f64) -> f64 + Sync + 'static,
        potential_d2: impl Fn(f64) -> f64 + Sync + 'static,
    ) -> Self {
        Self {
            dim: 1,
            value: Box::new(move |p, q| p[0] * p[0] / (2.0 * mass) + potential(q[0])),
            grad_p: Box::new(move |p, _| RVec::from_vec(vec![p[0] / mass])),
            grad_q: Box::new(move |_, q| RVec::from_vec(vec![potential_d1(q[0])])),
            hess_pp: Box::new(move |_, _| RMat::from_element(1, 1, 1.0 / mass)),
            hess_pq: Box::new(|_, _| RMat::zeros(1, 1)),
            hess_qq: Box::new(move |_, q| RMat::from_element(1, 1, potential_d2(q[0]))),
        }
    }

    /// Quartic-perturbed oscillator `V = q^2/2 + eps q^4`.
    pub fn quartic_oscillator(eps: f64) -> Self {
        Self::separable_1d(
            1.0,
            move |q| 0.5 * q * q + eps * q.powi(4),
            move |q| q + 4.0 * eps * q.powi(3),
            move |q| 1.0 + 12.0 * eps * q * q,
        )
    }

    /// Checks the gradient callbacks against finite differences of the value.
    pub fn check_consistency(&self, p: &RVec, q: &RVec) -> Result<()> {
        let eps = 1e-5;
        for i in 0..self.dim {
            let mut pp = p.clone();
            pp[i] += eps;
            let mut pm = p.clone();
            pm[i] -= eps;
            let fd = ((self.value)(&pp, q) - (self.value)(&pm, q)) / (2.0 * eps);
            let an = (self.grad_p)(p, q)[i];
            if (fd - an).abs() > 1e-4 * (1.0 + an.abs()) {
                return Err(Error::Invalid(format!(
                    "grad_p callback inconsistent at slot {i}: fd {fd} vs {an}"
                )));
            }
            let mut qp = q.clone();
            qp[i] += eps;
            let mut qm = q.clone();
            qm[i] -= eps;
            let fd = ((self.value)(p, &qp) - (self.value)(p, &qm)) / (2.0 * eps);
            let an = (self.grad_q)(p, q)[i];
            if (fd - an).abs() > 1e-4 * (1.0 + an.abs()) {
                return Err(Error::Invalid(format!(
                    "grad_q callback inconsistent at slot {i}: fd {fd} vs {an}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ClassicalPoint {
    pub p: RVec,
    pub q: RVec,
    pub s: f64,
}

/// Complex germ matrix `alpha`, symmetric with positive-definite imaginary part.
#[derive(Clone, Debug)]
pub struct GermMatrix {
    pub alpha: CMat,
}

impl GermMatrix {
    pub fn new(alpha: CMat) -> Result<Self> {
        let sym = (&alpha - alpha.transpose()).norm();
        if sym > 1e-10 {
            return Err(Error::Invalid(format!("alpha not symmetric: {sym:.3e}")));
        }
        let g = Self { alpha };
        if g.im_min_eigenvalue() <= 0.0 {
            return Err(Error::Invalid("Im alpha must be positive definite".into()));
        }
        Ok(g)
    }

    pub fn identity_times_i(n: usize) -> Self {
        Self { alpha: CMat::identity(n, n) * I }
    }

    pub fn im_min_eigenvalue(&self) -> f64 {
        let n = self.alpha.nrows();
        let im = RMat::from_fn(n, n, |i, j| self.alpha[(i, j)].im);
        let sym = (&im + im.transpose()) * 0.5;
        sym.symmetric_eigen().eigenvalues.min()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PacketFlowConfig {
    pub dt: f64,
    pub t_end: f64,
}

impl PacketFlowConfig {
    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }
}

/// One point of the transported packet data.
#[derive(Clone, Debug)]
pub struct PacketPoint {
    pub t: f64,
    pub point: ClassicalPoint,
    /// variation columns (complex): alpha = dp * dq^{-1}
    pub dq: CMat,
    pub dp: CMat,
    /// accumulated log of the scalar prefactor
    pub logc: C64,
}

impl PacketPoint {
    pub fn alpha(&self) -> Result<CMat> {
        let cond = crate::linalg::cond(&self.dq);
        if cond > 1e12 {
            return Err(Error::Invalid(format!(
                "variation block dQ singular (cond {cond:.3e}): caustic through the germ"
            )));
        }
        let inv = crate::linalg::solve(&self.dq, &CMat::identity(self.dq.nrows(), self.dq.ncols()))
            .ok_or_else(|| Error::Invalid("dQ not invertible".into()))?;
        Ok(&self.dp * inv)
    }
}

/// RK4 trajectory of the Hamiltonian system with the action accumulated
/// alongside: `dS/dt = P . dQ/dt - H`.
pub fn classical_flow(
    ham: &ClassicalHamiltonian,
    x0: &ClassicalPoint,
    cfg: &PacketFlowConfig,
) -> Result<Vec<ClassicalPoint>> {
    ham.check_consistency(&x0.p, &x0.q)?;
    let flow = integrate_packet_raw(ham, x0, None, cfg)?;
    Ok(flow.into_iter().map(|pt| pt.point).collect())
}

/// Joint RK4 transport of `(Q, P, S, dQ, dP, log c)`.
///
/// The germ matrix is carried through the linear variation system; the scalar
/// prefactor obeys `d log c/dt = -(1/2) tr(H_PP alpha + H_PQ)`.
pub fn integrate_packet(
    ham: &ClassicalHamiltonian,
    x0: &ClassicalPoint,
    alpha0: &GermMatrix,
    cfg: &PacketFlowConfig,
) -> Result<Vec<PacketPoint>> {
    ham.check_consistency(&x0.p, &x0.q)?;
    let flow = integrate_packet_raw(ham, x0, Some(alpha0), cfg)?;
    // germ positivity along the way
    for pt in flow.iter().step_by(50.max(flow.len() / 64)) {
        let alpha = pt.alpha()?;
        let germ = GermMatrix { alpha: (&alpha + alpha.transpose()) * c(0.5) };
        if germ.im_min_eigenvalue() <= 0.0 {
            return Err(Error::Invalid(format!(
                "Im alpha lost positivity at t = {}",
                pt.t
            )));
        }
    }
    Ok(flow)
}

fn integrate_packet_raw(
    ham: &ClassicalHamiltonian,
    x0: &ClassicalPoint,
    alpha0: Option<&GermMatrix>,
    cfg: &PacketFlowConfig,
) -> Result<Vec<PacketPoint>> {
    let n = ham.dim;
    // packed state: Q | P | S | dQ | dP | logc (complex storage)
    let pack = |q: &CVec, p: &CVec, s: C64, dq: &CMat, dp: &CMat, logc: C64| -> CVec {
        let mut y = CVec::zeros(2 * n + 1 + 2 * n * n + 1);
        for i in 0..n {
            y[i] = q[i];
            y[n + i] = p[i];
        }
        y[2 * n] = s;
        for col in 0..n {
            for row in 0..n {
                y[2 * n + 1 + col * n + row] = dq[(row, col)];
                y[2 * n + 1 + n * n + col * n + row] = dp[(row, col)];
            }
        }
        y[2 * n + 1 + 2 * n * n] = logc;
        y
    };
    let unpack = |y: &CVec| -> (RVec, RVec, C64, CMat, CMat, C64) {
        let q = RVec::from_fn(n, |i, _| y[i].re);
        let p = RVec::from_fn(n, |i, _| y[n + i].re);
        let mut dq = CMat::zeros(n, n);
        let mut dp = CMat::zeros(n, n);
        for col in 0..n {
            for row in 0..n {
                dq[(row, col)] = y[2 * n + 1 + col * n + row];
                dp[(row, col)] = y[2 * n + 1 + n * n + col * n + row];
            }
        }
        (q, p, y[2 * n], dq, dp, y[2 * n + 1 + 2 * n * n])
    };
    let deriv = |_t: f64, y: &CVec| -> CVec {
        let (q, p, _s, dq, dp, _logc) = unpack(y);
        let hp = (ham.grad_p)(&p, &q);
        let hq = (ham.grad_q)(&p, &q);
        let hpp = (ham.hess_pp)(&p, &q).map(|v| c(v));
        let hpq = (ham.hess_pq)(&p, &q).map(|v| c(v));
        let hqq = (ham.hess_qq)(&p, &q).map(|v| c(v));
        let dq_dot = &hpp * &dp + &hpq * &dq;
        let dp_dot = -(hpq.transpose() * &dp + &hqq * &dq);
        let h_val = (ham.value)(&p, &q);
        let ds = c(p.dot(&hp) - h_val);
        // d log c/dt = -(1/2) tr(H_PP alpha + H_PQ), alpha = dp dq^{-1}
        let dlogc = if let Some(inv) =
            crate::linalg::solve(&dq, &CMat::identity(n, n))
        {
            let alpha = &dp * inv;
            -(&hpp * alpha + &hpq).trace() * c(0.5)
        } else {
            C64::default()
        };
        pack(
            &hp.map(|v| c(v)),
            &hq.map(|v| c(-v)),
            ds,
            &dq_dot,
            &dp_dot,
            dlogc,
        )
    };
    let (dq0, dp0) = match alpha0 {
        Some(a) => (CMat::identity(n, n), a.alpha.clone()),
        None => (CMat::identity(n, n), CMat::identity(n, n) * I),
    };
    let mut y = pack(
        &x0.q.map(|v| c(v)),
        &x0.p.map(|v| c(v)),
        c(x0.s),
        &dq0,
        &dp0,
        C64::default(),
    );
    let steps = cfg.steps();
    let mut out = Vec::with_capacity(steps + 1);
    let snapshot = |y: &CVec, t: f64| -> PacketPoint {
        let (q, p, s, dq, dp, logc) = unpack(y);
        PacketPoint { t, point: ClassicalPoint { p, q, s: s.re }, dq, dp, logc }
    };
    out.push(snapshot(&y, 0.0));
    for k in 0..steps {
        y = crate::meanfield::rk4_step(&deriv, k as f64 * cfg.dt, &y, cfg.dt);
        out.push(snapshot(&y, (k + 1) as f64 * cfg.dt));
    }
    Ok(out)
}

/// One RK4 step of the direct matrix Riccati equation
/// `dalpha/dt = -H_QQ - H_QP alpha - alpha H_PQ - alpha H_PP alpha`,
/// co-advancing the classical point (cross-check for the linear transport).
pub fn alpha_riccati_step(
    ham: &ClassicalHamiltonian,
    point: &ClassicalPoint,
    alpha: &CMat,
    dt: f64,
) -> (ClassicalPoint, CMat) {
    let n = ham.dim;
    let pack = |q: &RVec, p: &RVec, a: &CMat| -> CVec {
        let mut y = CVec::zeros(2 * n + n * n);
        for i in 0..n {
            y[i] = c(q[i]);
            y[n + i] = c(p[i]);
        }
        for col in 0..n {
            for row in 0..n {
                y[2 * n + col * n + row] = a[(row, col)];
            }
        }
        y
    };
    let unpack = |y: &CVec| -> (RVec, RVec, CMat) {
        let q = RVec::from_fn(n, |i, _| y[i].re);
        let p = RVec::from_fn(n, |i, _| y[n + i].re);
        let mut a = CMat::zeros(n, n);
        for col in 0..n {
            for row in 0..n {
                a[(row, col)] = y[2 * n + col * n + row];
            }
        }
        (q, p, a)
    };
    let deriv = |_t: f64, y: &CVec| -> CVec {
        let (q, p, a) = unpack(y);
        let hp = (ham.grad_p)(&p, &q).map(|v| c(v));
        let hq = (ham.grad_q)(&p, &q).map(|v| c(-v));
        let hpp = (ham.hess_pp)(&p, &q).map(|v| c(v));
        let hpq = (ham.hess_pq)(&p, &q).map(|v| c(v));
        let hqq = (ham.hess_qq)(&p, &q).map(|v| c(v));
        let da = -(&hqq + hpq.transpose() * &a + &a * &hpq + &a * &hpp * &a);
        let mut dy = CVec::zeros(2 * n + n * n);
        for i in 0..n {
            dy[i] = hp[i];
            dy[n + i] = hq[i];
        }
        for col in 0..n {
            for row in 0..n {
                dy[2 * n + col * n + row] = da[(row, col)];
            }
        }
        dy
    };
    let y = pack(&point.q, &point.p, alpha);
    let y1 = crate::meanfield::rk4_step(&deriv, 0.0, &y, dt);
    let (q, p, a) = unpack(&y1);
    (ClassicalPoint { p, q, s: point.s }, a)
}

// ---------------------------------------------------------------------------
// grid wavefunctions
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct Grid1D {
    pub length: f64,
    pub points: usize,
}

impl Grid1D {
    pub fn dx(&self) -> f64 {
        self.length / self.points as f64
    }

    pub fn x(&self, j: usize) -> f64 {
        -0.5 * self.length + j as f64 * self.dx()
    }

    pub fn norm(&self, psi: &CVec) -> f64 {
        (self.dx() * psi.norm_squared()).sqrt()
    }

    pub fn distance(&self, a: &CVec, b: &CVec) -> f64 {
        (self.dx() * (a - b).norm_squared()).sqrt()
    }
}

/// Samples the normalized packet
/// `c exp((i/hbar)(S + P (x - Q))) g_alpha((x - Q)/sqrt(hbar))` on the grid.
pub fn gaussian_packet(
    point: &ClassicalPoint,
    alpha: &CMat,
    hbar: f64,
    grid: &Grid1D,
) -> Result<CVec> {
    let width = (hbar / alpha[(0, 0)].im).sqrt();
    let ppw = width / grid.dx();
    if ppw < 8.0 {
        return Err(Error::UnderResolvedGrid { points_per_width: ppw });
    }
    let a = alpha[(0, 0)];
    let q = point.q[0];
    let p = point.p[0];
    let mut psi = CVec::zeros(grid.points);
    for j in 0..grid.points {
        let dxq = grid.x(j) - q;
        let phase = C64::new(0.0, (point.s + p * dxq) / hbar);
        let germ = C64::new(0.0, 0.5 / hbar) * a * c(dxq * dxq);
        psi[j] = (phase + germ).exp();
    }
    let n = grid.norm(&psi);
    Ok(psi / c(n))
}

/// The transported packet including the accumulated complex prefactor phase.
pub fn packet_with_phase(
    pt: &PacketPoint,
    hbar: f64,
    grid: &Grid1D,
) -> Result<CVec> {
    let alpha = pt.alpha()?;
    let mut psi = gaussian_packet(&pt.point, &alpha, hbar, grid)?;
    let phase = pt.logc.exp();
    psi *= phase / c(phase.norm());
    Ok(psi)
}

/// Second-order split-step spectral propagator on a periodic box.
pub struct SplitStep {
    pub grid: Grid1D,
    pub hbar: f64,
    pub mass: f64,
    potential: Vec<f64>,
}

impl SplitStep {
    pub fn new(
        grid: Grid1D,
        hbar: f64,
        mass: f64,
        potential: impl Fn(f64) -> f64,
    ) -> Self {
        let potential = (0..grid.points).map(|j| potential(grid.x(j))).collect();
        Self { grid, hbar, mass, potential }
    }

    pub fn evolve(&self, psi0: &CVec, t_end: f64, dt: f64) -> Result<CVec> {
        let n = self.grid.points;
        let steps = (t_end / dt).round() as usize;
        let dt = t_end / steps as f64;
        let mut planner = FftPlanner::<f64>::new();
        let fft = planner.plan_fft_forward(n);
        let ifft = planner.plan_fft_inverse(n);
        let half_v: Vec<C64> = self
            .potential
            .iter()
            .map(|v| C64::new(0.0, -v * dt / (2.0 * self.hbar)).exp())
            .collect();
        let kin: Vec<C64> = (0..n)
            .map(|j| {
                let k_idx = if j <= n / 2 { j as f64 } else { j as f64 - n as f64 };
                let k = 2.0 * std::f64::consts::PI * k_idx / self.grid.length;
                C64::new(0.0, -self.hbar * k * k * dt / (2.0 * self.mass)).exp()
            })
            .collect();
        let mut buf: Vec<C64> = psi0.iter().copied().collect();
        let scale = 1.0 / n as f64;
        for _ in 0..steps {
            for (v, h) in buf.iter_mut().zip(&half_v) {
                *v *= h;
            }
            fft.process(&mut buf);
            for (v, k) in buf.iter_mut().zip(&kin) {
                *v *= k;
            }
            ifft.process(&mut buf);
            for (v, h) in buf.iter_mut().zip(&half_v) {
                *v *= h * c(scale);
            }
        }
        let out = CVec::from_vec(buf);
        let drift = (self.grid.norm(&out) - self.grid.norm(&psi0.clone())).abs();
        if drift > 1e-9 {
            return Err(Error::NormDrift { drift, tol: 1e-9 });
        }
        // periodic box must stay effectively infinite
        let edge = out[0].norm().max(out[n - 1].norm());
        if edge > 1e-8 {
            log::warn!("boundary amplitude {edge:.3e}: box too small");
        }
        Ok(out)
    }
}

/// One row of the hbar-convergence table.
#[derive(Clone, Debug)]
pub struct HbarRow {
    pub hbar: f64,
    pub l2_error: f64,
    pub im_alpha_min: f64,
    pub energy_drift: f64,
}

/// Packet-vs-grid L2 error per hbar for a separable Hamiltonian.
pub fn hbar_convergence(
    ham: &ClassicalHamiltonian,
    potential: impl Fn(f64) -> f64 + Copy,
    x0: &ClassicalPoint,
    alpha0: &GermMatrix,
    hbar_list: &[f64],
    t_end: f64,
    grid: Grid1D,
    grid_dt: f64,
) -> Result<Vec<HbarRow>> {
    let cfg = PacketFlowConfig { dt: 1e-3, t_end };
    let flow = integrate_packet(ham, x0, alpha0, &cfg)?;
    let last = flow.last().unwrap();
    let e0 = (ham.value)(&x0.p, &x0.q);
    let e1 = (ham.value)(&last.point.p, &last.point.q);
    let alpha_t = last.alpha()?;
    let im_min = GermMatrix { alpha: (&alpha_t + alpha_t.transpose()) * c(0.5) }
        .im_min_eigenvalue();
    let mut rows = Vec::with_capacity(hbar_list.len());
    for &hbar in hbar_list {
        let psi0 = {
            let mut psi = gaussian_packet(&flow[0].point, &alpha0.alpha, hbar, &grid)?;
            let phase = flow[0].logc.exp();
            psi *= phase / c(phase.norm());
            psi
        };
        let solver = SplitStep::new(grid, hbar, 1.0, potential);
        let reference = solver.evolve(&psi0, t_end, grid_dt)?;
        let packet = packet_with_phase(last, hbar, &grid)?;
        rows.push(HbarRow {
            hbar,
            l2_error: grid.distance(&packet, &reference),
            im_alpha_min: im_min,
            energy_drift: (e1 - e0).abs(),
        });
    }
    Ok(rows)
}
