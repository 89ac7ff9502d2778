//! Iterative fit of (C, Σ) to a moment pair by minimizing
//!
//! ```text
//! V = ‖Q⁰(C,Σ) − Q̂⁰‖²_F + ‖Qτ(C,Σ) − Q̂τ‖²_F
//! ```
//!
//! [`UpdateRule::LevenbergMarquardt`] (the default) takes damped Gauss-Newton
//! steps on the residual (Q⁰ − Q̂⁰, Qτ − Q̂τ), solving each step by conjugate
//! gradients with Jacobian-vector products. [`UpdateRule::Gradient`] runs
//! projected L-BFGS on the exact gradient of V. [`UpdateRule::MomentMatching`]
//! applies the fixed-rate heuristic updates
//! `ΔJ = [(Q⁰)⁻¹(ΔQ⁰ + ΔQτ expm(−Jᵀτ))]ᵀ/τ` and `ΔΣ = −JΔQ⁰ − ΔQ⁰Jᵀ`, scaled by
//! the configured learning rates.
//!
//! Gradient of V. With E = expm(Jᵀτ), D⁰ = Q⁰ − Q̂⁰ and Dτ = Q⁰E − Q̂τ, let P
//! solve the adjoint Lyapunov equation `JᵀP + PJ + sym(D⁰ + DτEᵀ) = 0`. Then
//! `∂V/∂J = 2(2PQ⁰ + τ·L(Jτ, Q⁰Dτ)ᵀ)` and `∂V/∂Σᵢᵢ = 2Pᵢᵢ`, where L is the
//! Fréchet derivative of the exponential.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::{Estimate, Method};
use crate::error::{Error, Result};
use crate::matfun::{mat_exp, ExpmFrechet, LyapunovSolver};
use crate::model::{jacobian_of, MomentPair};

/// Lower bound on fitted noise variances.
pub const SIGMA_FLOOR: f64 = 1e-6;

const EPS_ACTIVE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateRule {
    Gradient,
    LevenbergMarquardt,
    MomentMatching,
}

/// Starting point of the fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitInit {
    /// C = 0, Σ = I.
    Zero,
    /// Moments estimate projected onto the constraints, shrunk until stable.
    Moments,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovFitConfig {
    pub init: FitInit,
    /// Step size on J for the moment-matching rule.
    pub learning_rate_j: f64,
    /// Step size on Σ for the moment-matching rule.
    pub learning_rate_sigma: f64,
    pub max_iters: usize,
    /// Stop after this many iterations without a significant improvement of the best V.
    pub stop_patience: usize,
    /// Relative decrease of the best V that counts as an improvement.
    pub min_rel_improvement: f64,
    pub tau_x_init: f64,
    /// Binary structural adjacency; connectivity outside it is held at 0.
    pub mask: Option<DMatrix<f64>>,
    /// Keep off-diagonal connectivity ≥ 0.
    pub nonnegative: bool,
    pub update: UpdateRule,
    /// L-BFGS history length.
    pub memory: usize,
    /// Conjugate-gradient iterations per Levenberg-Marquardt step.
    pub cg_iters: usize,
    /// Relative residual at which the inner conjugate-gradient solve stops.
    pub cg_tol: f64,
}

impl Default for LyapunovFitConfig {
    fn default() -> Self {
        LyapunovFitConfig {
            init: FitInit::Moments,
            learning_rate_j: 1e-4,
            learning_rate_sigma: 1e-3,
            max_iters: 1000,
            stop_patience: 100,
            min_rel_improvement: 1e-3,
            tau_x_init: 1.0,
            mask: None,
            nonnegative: true,
            update: UpdateRule::LevenbergMarquardt,
            memory: 10,
            cg_iters: 10,
            cg_tol: 0.1,
        }
    }
}

impl LyapunovFitConfig {
    pub fn validate(&self, m: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate_j > 0.0 && self.learning_rate_sigma > 0.0) {
            return bad("learning rates must be > 0".into());
        }
        if self.max_iters == 0 || self.stop_patience == 0 || self.memory == 0 {
            return bad("max_iters, stop_patience and memory must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.min_rel_improvement) {
            return bad(format!("min_rel_improvement must be in [0, 1), got {}", self.min_rel_improvement));
        }
        if !(self.tau_x_init > 0.0 && self.tau_x_init.is_finite()) {
            return bad(format!("tau_x_init must be > 0, got {}", self.tau_x_init));
        }
        if let Some(mask) = &self.mask {
            if mask.shape() != (m, m) {
                return bad(format!("mask is {}x{}, expected {m}x{m}", mask.nrows(), mask.ncols()));
            }
            if mask.iter().any(|v| *v != 0.0 && *v != 1.0) {
                return bad("mask entries must be 0 or 1".into());
            }
            if (0..m).any(|i| mask[(i, i)] != 0.0) {
                return bad("mask diagonal must be 0".into());
            }
        }
        Ok(())
    }
}

struct Problem<'a> {
    target: &'a MomentPair,
    tau_x: f64,
    m: usize,
    /// Free connectivity entries (off-diagonal, inside the mask), column-major.
    free: Vec<(usize, usize)>,
}

struct ModelState {
    j: DMatrix<f64>,
    solver: LyapunovSolver,
    q0: DMatrix<f64>,
    /// expm(Jτ) and its Fréchet derivative.
    expm: ExpmFrechet,
    /// expm(Jᵀτ)
    e: DMatrix<f64>,
    d0: DMatrix<f64>,
    d1: DMatrix<f64>,
    v: f64,
}

impl<'a> Problem<'a> {
    fn new(target: &'a MomentPair, cfg: &LyapunovFitConfig) -> Self {
        let m = target.node_count();
        let mut free = Vec::new();
        for j in 0..m {
            for i in 0..m {
                let allowed = cfg.mask.as_ref().map_or(true, |mask| mask[(i, j)] == 1.0);
                if i != j && allowed {
                    free.push((i, j));
                }
            }
        }
        Problem { target, tau_x: cfg.tau_x_init, m, free }
    }

    fn unpack(&self, z: &DVector<f64>) -> (DMatrix<f64>, Vec<f64>) {
        let mut c = DMatrix::zeros(self.m, self.m);
        for (k, &(i, j)) in self.free.iter().enumerate() {
            c[(i, j)] = z[k];
        }
        let sigma = z.rows(self.free.len(), self.m).iter().copied().collect();
        (c, sigma)
    }

    /// Model moments at (C, Σ); `None` when J is not stable.
    fn state(&self, c: &DMatrix<f64>, sigma: &[f64]) -> Option<ModelState> {
        let j = jacobian_of(c, self.tau_x);
        let solver = LyapunovSolver::new(&j).ok()?;
        let s = DMatrix::from_diagonal(&DVector::from_column_slice(sigma));
        let q0 = solver.solve(&s).ok()?;
        let expm = ExpmFrechet::new(&(&j * self.target.tau)).ok()?;
        let e = expm.exp().transpose();
        let d0 = &q0 - &self.target.q0;
        let d1 = &q0 * &e - &self.target.qtau;
        let v = d0.norm_squared() + d1.norm_squared();
        if !v.is_finite() {
            return None;
        }
        Some(ModelState { j, solver, q0, expm, e, d0, d1, v })
    }

    fn evaluate(&self, z: &DVector<f64>) -> Option<ModelState> {
        let (c, sigma) = self.unpack(z);
        self.state(&c, &sigma)
    }

    /// V and its gradient with respect to the packed variables.
    #[cfg(test)]
    fn value_grad(&self, z: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        let st = self.evaluate(z)?;
        Some((st.v, self.gradient(&st)?))
    }

    fn gradient(&self, st: &ModelState) -> Option<DVector<f64>> {
        let mut g = self.vjp(st, &st.d0, &st.d1)?;
        g *= 2.0;
        Some(g)
    }

    /// Residual Jacobian transposed times (W⁰, Wτ), packed like the variables.
    fn vjp(&self, st: &ModelState, w0: &DMatrix<f64>, w1: &DMatrix<f64>) -> Option<DVector<f64>> {
        let tau = self.target.tau;
        let g = w0 + w1 * st.e.transpose();
        let gs = (&g + g.transpose()) * 0.5;
        let p = st.solver.solve_adjoint(&gs).ok()?;
        let l = st.expm.apply(&(&st.q0 * w1)).ok()?;
        let grad_j = &p * &st.q0 * 2.0 + l.transpose() * tau;
        let nc = self.free.len();
        let mut out = DVector::zeros(nc + self.m);
        for (k, &(i, j)) in self.free.iter().enumerate() {
            out[k] = grad_j[(i, j)];
        }
        for i in 0..self.m {
            out[nc + i] = p[(i, i)];
        }
        if out.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some(out)
    }

    /// Directional derivative (dQ⁰, dQτ) of the model moments along packed `dz`.
    fn jvp(&self, st: &ModelState, dz: &DVector<f64>) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        let tau = self.target.tau;
        let (dc, ds) = self.unpack(dz);
        let dq = &dc * &st.q0;
        let mut rhs = &dq + dq.transpose();
        for (i, v) in ds.iter().enumerate() {
            rhs[(i, i)] += v;
        }
        let dq0 = st.solver.solve(&rhs).ok()?;
        let l = st.expm.apply(&(dc * tau)).ok()?;
        let dq1 = &dq0 * &st.e + &st.q0 * l.transpose();
        Some((dq0, dq1))
    }

    fn lower_bounds(&self, nonnegative: bool) -> DVector<f64> {
        let nc = self.free.len();
        let c_floor = if nonnegative { 0.0 } else { f64::NEG_INFINITY };
        DVector::from_fn(nc + self.m, |k, _| if k < nc { c_floor } else { SIGMA_FLOOR })
    }

    fn zero_start(&self) -> DVector<f64> {
        let nc = self.free.len();
        DVector::from_fn(nc + self.m, |k, _| if k < nc { 0.0 } else { 1.0 })
    }

    fn initial(&self, init: FitInit, lb: &DVector<f64>) -> DVector<f64> {
        let zero = self.zero_start();
        if init == FitInit::Zero {
            return zero;
        }
        let Ok(est) = super::moments_estimate(self.target) else {
            return zero;
        };
        let nc = self.free.len();
        let mut z = zero.clone();
        for (k, &(i, j)) in self.free.iter().enumerate() {
            z[k] = est.c_hat[(i, j)];
        }
        for i in 0..self.m {
            let s = est.sigma_hat[i];
            z[nc + i] = if s.is_finite() { s } else { 1.0 };
        }
        project(&mut z, lb);
        // Shrink the connectivity until J is stable.
        for _ in 0..60 {
            let (c, _) = self.unpack(&z);
            let ok = crate::matfun::RealSchur::new(&jacobian_of(&c, self.tau_x))
                .map(|s| s.spectral_abscissa() < 0.0)
                .unwrap_or(false);
            if ok && self.evaluate(&z).is_some() {
                return z;
            }
            for k in 0..nc {
                z[k] *= 0.9;
            }
        }
        zero
    }

    fn estimate(&self, z: &DVector<f64>, v: f64, iterations: usize) -> Estimate {
        let (c, sigma) = self.unpack(z);
        let j = jacobian_of(&c, self.tau_x);
        Estimate {
            j_hat: j.map(|v| Complex64::new(v, 0.0)),
            c_hat: c,
            sigma_hat: sigma,
            sigma_offdiag_residual: 0.0,
            tau_x_hat: self.tau_x,
            imag_ratio: 0.0,
            method: Method::Lyapunov,
            iterations,
            fit_value: Some(v),
        }
    }
}

/// Tracks the best iterate and the patience counter.
struct Progress {
    best_v: f64,
    best_z: DVector<f64>,
    anchor_v: f64,
    anchor_iter: usize,
    initial_v: f64,
    trace: Vec<f64>,
}

impl Progress {
    fn new(v: f64, z: &DVector<f64>) -> Self {
        Progress { best_v: v, best_z: z.clone(), anchor_v: v, anchor_iter: 0, initial_v: v, trace: vec![v] }
    }

    /// Record the iterate reached after iteration `it`; returns true when patience is exhausted.
    fn record(&mut self, it: usize, v: f64, z: &DVector<f64>, cfg: &LyapunovFitConfig) -> bool {
        self.trace.push(v);
        if v < self.best_v {
            self.best_v = v;
            self.best_z.copy_from(z);
        }
        if v < self.anchor_v * (1.0 - cfg.min_rel_improvement) {
            self.anchor_v = v;
            self.anchor_iter = it;
        }
        it - self.anchor_iter >= cfg.stop_patience
    }
}

/// Fit (C, Σ) to `moments`. Returns the iterate with the lowest V.
pub fn lyapunov_fit(moments: &MomentPair, cfg: &LyapunovFitConfig) -> Result<Estimate> {
    moments.validate()?;
    let m = moments.node_count();
    cfg.validate(m)?;
    let problem = Problem::new(moments, cfg);
    match cfg.update {
        UpdateRule::Gradient => fit_gradient(&problem, cfg),
        UpdateRule::LevenbergMarquardt => fit_levenberg_marquardt(&problem, cfg),
        UpdateRule::MomentMatching => fit_moment_matching(&problem, cfg),
    }
}

fn project(z: &mut DVector<f64>, lb: &DVector<f64>) {
    for (v, l) in z.iter_mut().zip(lb.iter()) {
        if *v < *l {
            *v = *l;
        }
    }
}

fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

fn fit_gradient(problem: &Problem, cfg: &LyapunovFitConfig) -> Result<Estimate> {
    let lb = problem.lower_bounds(cfg.nonnegative);
    let mut z = problem.initial(cfg.init, &lb);
    let unstable_start = || Error::Unstable { max_real: -1.0 / problem.tau_x };
    let st = problem.evaluate(&z).ok_or_else(unstable_start)?;
    let mut v = st.v;
    let mut g = problem.gradient(&st).ok_or_else(unstable_start)?;
    let mut progress = Progress::new(v, &z);
    let mut history: VecDeque<(DVector<f64>, DVector<f64>)> = VecDeque::with_capacity(cfg.memory);
    let scale = problem.target.q0.norm_squared().max(f64::MIN_POSITIVE);
    let n = z.len();
    let mut iterations = 0;
    let mut stalled = false;
    let mut evaluations = 1usize;

    for it in 1..=cfg.max_iters {
        iterations = it;
        let active: Vec<bool> = (0..n).map(|k| z[k] <= lb[k] + 1e-12 && g[k] > 0.0).collect();
        let mask_active = |mut w: DVector<f64>| {
            for k in 0..n {
                if active[k] {
                    w[k] = 0.0;
                }
            }
            w
        };

        // Two-loop recursion on the free variables.
        let mut q = mask_active(g.clone());
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y) in history.iter().rev() {
            let rho = 1.0 / y.dot(s);
            let a = rho * s.dot(&q);
            q.axpy(-a, y, 1.0);
            alphas.push((a, rho));
        }
        let gamma = match history.back() {
            Some((s, y)) => s.dot(y) / y.dot(y),
            None => 1.0 / max_abs(&g).max(f64::MIN_POSITIVE),
        };
        let mut r = q * gamma;
        for ((s, y), (a, rho)) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * y.dot(&r);
            r.axpy(a - b, s, 1.0);
        }
        let mut d = -mask_active(r);
        if g.dot(&d) >= 0.0 {
            history.clear();
            d = -mask_active(g.clone()) / max_abs(&g).max(f64::MIN_POSITIVE);
        }

        // Projected Armijo backtracking; unstable trial points count as V = ∞.
        // Steps shrink to the minimizer of the quadratic through V(0), V'(0)
        // and V(step), kept within [0.1, 0.5] of the rejected step.
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let mut zt = &z + &d * step;
            project(&mut zt, &lb);
            evaluations += 1;
            let slope = g.dot(&(&zt - &z));
            let mut next = 0.5 * step;
            if let Some(st) = problem.evaluate(&zt) {
                if st.v <= v + 1e-4 * slope {
                    if let Some(gt) = problem.gradient(&st) {
                        accepted = Some((zt, st.v, gt));
                        break;
                    }
                } else {
                    let curvature = st.v - v - slope;
                    if curvature > 0.0 {
                        next = (-slope * step / (2.0 * curvature)).clamp(0.1 * step, 0.5 * step);
                    }
                }
            }
            step = next;
        }
        let Some((zt, vt, gt)) = accepted else {
            if !history.is_empty() {
                history.clear();
                continue;
            }
            stalled = true;
            break;
        };

        let s = &zt - &z;
        let y = &gt - &g;
        if s.dot(&y) > 1e-12 * y.dot(&y) {
            if history.len() == cfg.memory {
                history.pop_front();
            }
            history.push_back((s, y));
        }
        z = zt;
        v = vt;
        g = gt;

        if progress.record(it, v, &z, cfg) {
            break;
        }
        let mut pz = &z - &g;
        project(&mut pz, &lb);
        if max_abs(&(pz - &z)) < 1e-13 || v <= 1e-28 * scale {
            break;
        }
    }

    if stalled && progress.best_v >= progress.initial_v {
        let mut pz = &z - &g;
        project(&mut pz, &lb);
        if max_abs(&(pz - &z)) > 1e-13 {
            return Err(Error::Convergence { iterations, trace: progress.trace });
        }
    }
    log::debug!("lyapunov fit: {iterations} iterations, {evaluations} evaluations, V = {:e}", progress.best_v);
    Ok(problem.estimate(&progress.best_z, progress.best_v, iterations))
}

/// Projected Levenberg-Marquardt. Each step solves
/// (JᵣᵀJᵣ + μI) δ = −Jᵣᵀr on the variables not held at a bound, by conjugate
/// gradients with matrix-free products.
fn fit_levenberg_marquardt(problem: &Problem, cfg: &LyapunovFitConfig) -> Result<Estimate> {
    let lb = problem.lower_bounds(cfg.nonnegative);
    let mut z = problem.initial(cfg.init, &lb);
    let unstable_start = || Error::Unstable { max_real: -1.0 / problem.tau_x };
    let mut st = problem.evaluate(&z).ok_or_else(unstable_start)?;
    let mut g = problem.vjp(&st, &st.d0, &st.d1).ok_or_else(unstable_start)?;
    let mut progress = Progress::new(st.v, &z);
    let n = z.len();
    let scale = problem.target.q0.norm_squared().max(f64::MIN_POSITIVE);
    let mut mu = 1e-3 * scale;
    let mu_min = 1e-12 * scale;
    let mut nu = 2.0;
    let mut iterations = 0;
    let mut products = 0usize;

    for it in 1..=cfg.max_iters {
        iterations = it;
        // Variables within eps of their bound and pushed against it are held fixed.
        let eps = {
            let mut pz = &z - &g;
            project(&mut pz, &lb);
            (&z - pz).norm().min(EPS_ACTIVE)
        };
        let free: Vec<bool> = (0..n).map(|k| !(z[k] <= lb[k] + eps.max(1e-12) && g[k] > 0.0)).collect();
        let restrict = |mut w: DVector<f64>| {
            for k in 0..n {
                if !free[k] {
                    w[k] = 0.0;
                }
            }
            w
        };
        let b = -restrict(g.clone());
        if max_abs(&b) == 0.0 {
            break;
        }

        let mut accepted = false;
        for _ in 0..30 {
            // CG on (JᵀJ + μI) δ = b.
            let apply = |v: &DVector<f64>| -> Option<DVector<f64>> {
                let (a0, a1) = problem.jvp(&st, v)?;
                let mut out = restrict(problem.vjp(&st, &a0, &a1)?);
                out.axpy(mu, v, 1.0);
                Some(out)
            };
            let mut delta = DVector::zeros(n);
            let mut r = b.clone();
            let mut zr = r.clone();
            let mut p = zr.clone();
            let mut rz = r.dot(&zr);
            let b_norm = r.norm();
            for _ in 0..cfg.cg_iters {
                let Some(ap) = apply(&p) else { break };
                products += 1;
                let pap = p.dot(&ap);
                if pap <= 0.0 {
                    break;
                }
                let alpha = rz / pap;
                delta.axpy(alpha, &p, 1.0);
                r.axpy(-alpha, &ap, 1.0);
                if r.norm() <= cfg.cg_tol * b_norm {
                    break;
                }
                zr = r.clone();
                let rz_new = r.dot(&zr);
                p = &zr + &p * (rz_new / rz);
                rz = rz_new;
            }
            // Try the projected step first. Clamping can break cancellations
            // inside δ, so fall back to the feasible fraction of δ itself.
            let mut projected = &z + &delta;
            project(&mut projected, &lb);
            let alpha = (0..n)
                .filter(|&k| delta[k] < 0.0)
                .map(|k| (z[k] - lb[k]) / -delta[k])
                .fold(1.0_f64, f64::min);
            let mut candidates = vec![projected];
            if alpha < 1.0 && alpha > 0.0 {
                let mut truncated = &z + &delta * alpha;
                project(&mut truncated, &lb);
                candidates.push(truncated);
            }
            for zt in candidates {
                let step = &zt - &z;
                // Predicted decrease of ½V under the linearized residual.
                let pred = match problem.jvp(&st, &step) {
                    Some((a0, a1)) => -(g.dot(&step) + 0.5 * (a0.norm_squared() + a1.norm_squared())),
                    None => 0.0,
                };
                if !(pred > 0.0) {
                    continue;
                }
                let Some(nst) = problem.evaluate(&zt) else { continue };
                if nst.v >= st.v {
                    continue;
                }
                let rho = 0.5 * (st.v - nst.v) / pred;
                if rho <= 1e-4 {
                    continue;
                }
                let Some(ng) = problem.vjp(&nst, &nst.d0, &nst.d1) else { continue };
                mu = (mu * (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0)).max(mu_min);
                nu = 2.0;
                z = zt;
                st = nst;
                g = ng;
                accepted = true;
                break;
            }
            if accepted {
                break;
            }
            mu *= nu;
            nu *= 2.0;
        }
        if !accepted {
            log::debug!("lyapunov fit (LM): no acceptable step at iteration {it}, mu = {mu:e}, |g| = {:e}", b.norm());
            break;
        }
        if progress.record(it, st.v, &z, cfg) {
            break;
        }
        if st.v <= 1e-28 * scale {
            break;
        }
    }
    log::debug!("lyapunov fit (LM): {iterations} iterations, {products} CG products, V = {:e}", progress.best_v);
    Ok(problem.estimate(&progress.best_z, progress.best_v, iterations))
}

fn fit_moment_matching(problem: &Problem, cfg: &LyapunovFitConfig) -> Result<Estimate> {
    let lb = problem.lower_bounds(cfg.nonnegative);
    let nc = problem.free.len();
    let tau = problem.target.tau;
    let mut z = problem.initial(cfg.init, &lb);
    let (c0, s0) = problem.unpack(&z);
    let mut st = problem.state(&c0, &s0).ok_or(Error::Unstable { max_real: -1.0 / problem.tau_x })?;
    let mut progress = Progress::new(st.v, &z);
    let mut iterations = 0;

    for it in 1..=cfg.max_iters {
        iterations = it;
        let dq0 = -&st.d0;
        let dq1 = -&st.d1;
        let e_inv = mat_exp(&(st.j.transpose() * -tau))?;
        let inner = &dq0 + &dq1 * e_inv;
        let q0_inv = st.q0.clone().lu().solve(&inner).ok_or(Error::Singular {
            magnitude: 0.0,
            context: "model covariance during Lyapunov fit".into(),
        })?;
        let dj = q0_inv.transpose() / tau;
        let ds = -(&st.j * &dq0 + &dq0 * st.j.transpose());
        let mut dz = DVector::zeros(z.len());
        for (k, &(i, j)) in problem.free.iter().enumerate() {
            dz[k] = cfg.learning_rate_j * dj[(i, j)];
        }
        for i in 0..problem.m {
            dz[nc + i] = cfg.learning_rate_sigma * ds[(i, i)];
        }

        // One halving of the step is allowed when the update leaves the stable set.
        let mut next = None;
        for scale in [1.0, 0.5] {
            let mut zt = &z + &dz * scale;
            project(&mut zt, &lb);
            let (c, s) = problem.unpack(&zt);
            if let Some(sn) = problem.state(&c, &s) {
                next = Some((zt, sn));
                break;
            }
        }
        let Some((zt, sn)) = next else {
            let (c, _) = problem.unpack(&(&z + &dz * 0.5));
            let max_real = crate::matfun::RealSchur::new(&jacobian_of(&c, problem.tau_x))
                .map(|s| s.spectral_abscissa())
                .unwrap_or(f64::NAN);
            return Err(Error::Unstable { max_real });
        };
        z = zt;
        st = sn;

        let done = progress.record(it, st.v, &z, cfg);
        if it == 10 * cfg.stop_patience && progress.best_v >= progress.initial_v {
            return Err(Error::Convergence { iterations: it, trace: progress.trace });
        }
        if done {
            break;
        }
    }
    if progress.best_v >= progress.initial_v {
        return Err(Error::Convergence { iterations, trace: progress.trace });
    }
    Ok(problem.estimate(&progress.best_z, progress.best_v, iterations))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::accuracy;
    use crate::model::{theoretical_moments, MomentKind, ModelParams};
    use crate::synth::{draw_stable_params, NetworkConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(m: usize, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        draw_stable_params(&NetworkConfig::new(m, 0.3, 0), 1.0, &mut rng).unwrap().0
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = params(4, 1);
        let target = theoretical_moments(&p, 1.0).unwrap();
        // Perturb the target so the gradient is not zero at the test point.
        let target = MomentPair { q0: &target.q0 * 1.1, qtau: &target.qtau * 0.9, ..target };
        let cfg = LyapunovFitConfig { nonnegative: false, ..Default::default() };
        let prob = Problem::new(&target, &cfg);
        let n = prob.free.len() + 4;
        let z = DVector::from_fn(n, |k, _| if k < prob.free.len() { 0.05 * (k % 3) as f64 } else { 0.8 + 0.1 * (k % 2) as f64 });
        let (_, g) = prob.value_grad(&z).unwrap();
        let h = 1e-6;
        for k in 0..n {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[k] += h;
            zm[k] -= h;
            let fd = (prob.value_grad(&zp).unwrap().0 - prob.value_grad(&zm).unwrap().0) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6 * (1.0 + g[k].abs()), "k={k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn noiseless_fit_recovers_connectivity() {
        // Near-critical draws make every optimizer crawl; take a well-damped one.
        let p = (0..)
            .map(|seed| params(6, seed))
            .find(|p| crate::matfun::RealSchur::new(&p.jacobian()).unwrap().spectral_abscissa() < -0.2)
            .unwrap();
        let target = theoretical_moments(&p, 1.0).unwrap();
        for update in [UpdateRule::LevenbergMarquardt, UpdateRule::Gradient] {
            let cfg = LyapunovFitConfig {
                init: FitInit::Zero,
                update,
                max_iters: 10_000,
                min_rel_improvement: 0.0,
                ..Default::default()
            };
            let est = lyapunov_fit(&target, &cfg).unwrap();
            let (ac, asg) = accuracy(&p, &est).unwrap();
            assert!(ac > 0.99 && asg > 0.99, "{update:?}: {ac} {asg} it={} v={:?}", est.iterations, est.fit_value);
            assert!(est.fit_value.unwrap() < 1e-6 * target.q0.norm_squared());
            assert!(est.c_hat.iter().all(|v| *v >= 0.0));
            assert!((0..6).all(|i| est.c_hat[(i, i)] == 0.0));
            assert_eq!(est.imag_ratio, 0.0);
        }
    }

    #[test]
    fn mask_is_respected() {
        let p = params(6, 3);
        let target = theoretical_moments(&p, 1.0).unwrap();
        let mask = p.connectivity().map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let cfg = LyapunovFitConfig { mask: Some(mask.clone()), max_iters: 300, ..Default::default() };
        let est = lyapunov_fit(&target, &cfg).unwrap();
        for (c, mk) in est.c_hat.iter().zip(mask.iter()) {
            if *mk == 0.0 {
                assert_eq!(*c, 0.0);
            }
        }
    }

    #[test]
    fn moment_matching_rule_decreases_v() {
        let p = params(5, 4);
        let target = theoretical_moments(&p, 1.0).unwrap();
        let cfg = LyapunovFitConfig { update: UpdateRule::MomentMatching, max_iters: 500, ..Default::default() };
        let est = lyapunov_fit(&target, &cfg).unwrap();
        let prob = Problem::new(&target, &cfg);
        let v0 = prob.value_grad(&prob.zero_start()).unwrap().0;
        assert!(est.fit_value.unwrap() < v0);
        assert!(est.c_hat.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn config_validation() {
        let target = MomentPair {
            q0: DMatrix::identity(2, 2),
            qtau: DMatrix::identity(2, 2) * 0.3,
            tau: 1.0,
            kind: MomentKind::Empirical,
        };
        let bad = [
            LyapunovFitConfig { learning_rate_j: 0.0, ..Default::default() },
            LyapunovFitConfig { max_iters: 0, ..Default::default() },
            LyapunovFitConfig { mask: Some(DMatrix::identity(2, 2)), ..Default::default() },
            LyapunovFitConfig { mask: Some(DMatrix::from_element(3, 3, 0.0)), ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(lyapunov_fit(&target, &cfg), Err(Error::Config(_))));
        }
    }
}
