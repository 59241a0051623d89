//! Expansion of the perturbation `(V, Gamma)` in powers of sigma: the
//! first- and second-order paths, orbital drift and norm predictions.
//!
//! Mild convolutions are stepped as linear SPDEs with the Crank-Nicolson
//! semigroup of `L_tw`. Basis sums are split in fixed-size chunks that may run
//! in parallel and are merged in chunk order, so results do not depend on the
//! thread count.

use std::sync::Arc;

use rayon::prelude::*;

use crate::banded::BandLu;
use crate::error::{Error, Result};
use crate::grid::Profile;
use crate::model::{ModelSpec, MAX_COMP};
use crate::noise::{basis_eigendata, Basis, CovarianceKernel, NoiseSampler};
use crate::phase::PhaseContext;
use crate::simulator::implicit_matrix;
use crate::stochastic::StochWaveResult;
use crate::wave::{deinterleave, interleave, interleaved_weights, Semigroup, WavePair};

#[derive(Clone, Copy, Debug)]
pub struct ExpansionConfig {
    pub k_max: usize,
    /// Step for pure-semigroup quadratures.
    pub dt_sg: f64,
    /// Integration horizon for the `[0, inf)` integrals; `None` picks
    /// `max(20, 8/beta)` (or 40 without a spectral gap).
    pub t_int: Option<f64>,
    /// Basis elements per work unit.
    pub chunk: usize,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        Self {
            k_max: 150,
            dt_sg: 1e-3,
            t_int: None,
            chunk: 8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExpansionContext {
    pub model: ModelSpec,
    pub kernel: Arc<CovarianceKernel>,
    /// Deterministic wave; supplies `L_tw` and `psi_tw`.
    pub wave: WavePair,
    pub sigma: f64,
    /// Profile the expansion is taken around (`Phi_sigma`, or `Phi_0`).
    pub base: Profile,
    pub base_c: f64,
    pub dbase: Profile,
    /// `<base', psi>`
    pub pairing: f64,
    g_base: Profile,
    pub basis: Basis,
    pub cfg: ExpansionConfig,
}

impl ExpansionContext {
    pub fn new(model: ModelSpec, kernel: Arc<CovarianceKernel>, wave: WavePair, cfg: ExpansionConfig) -> Result<Self> {
        if cfg.k_max < 1 || cfg.chunk < 1 || !(cfg.dt_sg > 0.0) {
            return Err(Error::InvalidParameter("expansion config".into()));
        }
        if kernel.grid() != wave.grid() {
            return Err(Error::GridMismatch);
        }
        let basis = basis_eigendata(wave.grid(), &kernel, cfg.k_max)?;
        let base = wave.phi.clone();
        let c = wave.c;
        let mut ctx = Self {
            g_base: model.g_profile(&base),
            dbase: model.d1(&base),
            pairing: 1.0,
            model,
            kernel,
            wave,
            sigma: 0.0,
            base,
            base_c: c,
            basis,
            cfg,
        };
        ctx.pairing = ctx.dbase.dot(&ctx.wave.psi);
        Ok(ctx)
    }

    /// Expands around the instantaneous stochastic wave instead of `Phi_0`.
    pub fn with_stochastic_wave(mut self, sw: &StochWaveResult) -> Result<Self> {
        if sw.phi.grid() != self.wave.grid() {
            return Err(Error::GridMismatch);
        }
        self.base = sw.phi.clone();
        self.base_c = sw.c;
        self.sigma = sw.sigma;
        self.g_base = self.model.g_profile(&self.base);
        self.dbase = self.model.d1(&self.base);
        self.pairing = self.dbase.dot(&self.wave.psi);
        if !(self.pairing.abs() >= 1e-6) {
            return Err(Error::PhasePairingDegenerate(self.pairing));
        }
        Ok(self)
    }

    pub fn psi(&self) -> &Profile {
        &self.wave.psi
    }

    pub fn t_int(&self) -> f64 {
        match (self.cfg.t_int, self.wave.beta()) {
            (Some(t), _) => t,
            (None, Some(b)) if b > 0.0 => (8.0 / b).max(20.0),
            _ => 40.0,
        }
    }

    /// `base_c v' + rho v'' + Df(base) v` with zero ghosts.
    pub fn lin_apply(&self, v: &Profile) -> Result<Profile> {
        let mut r = self.model.df_apply(&self.base, v);
        r.axpy(self.base_c, &v.first_difference()?);
        let d2 = v.second_difference()?;
        let len = v.grid().len();
        for (c, rho) in self.model.rho.iter().enumerate() {
            for (a, b) in r.values_mut()[c * len..(c + 1) * len]
                .iter_mut()
                .zip(&d2.values()[c * len..(c + 1) * len])
            {
                *a += rho * b;
            }
        }
        Ok(r)
    }

    /// `-<psi, g w>/P`, the leading phase increment.
    pub fn b0(&self, w: &Profile) -> f64 {
        -self.gw_psi(w) / self.pairing
    }

    fn gw_psi(&self, w: &Profile) -> f64 {
        let wts = self.base.grid().weights();
        let len = wts.len();
        let (g, p, wv) = (self.g_base.values(), self.wave.psi.values(), w.values());
        let mut s = 0.0;
        for j in 0..g.len() {
            s += wts[j % len] * g[j] * wv[j] * p[j];
        }
        s
    }

    fn times_g(&self, w: &Profile) -> Profile {
        let mut r = w.clone();
        for (a, b) in r.values_mut().iter_mut().zip(self.g_base.values()) {
            *a *= b;
        }
        r
    }

    /// `S_sigma(0) w = g w - base' <psi, g w>/P`.
    pub fn s_sigma0(&self, w: &Profile) -> Profile {
        let mut r = self.times_g(w);
        r.axpy(-self.gw_psi(w) / self.pairing, &self.dbase);
        r
    }

    /// `1/2 D^2 f[v, v] - 1/2 base' <D^2 f[v, v], psi>/P`.
    pub fn r2(&self, v: &Profile) -> Profile {
        let mut d = self.model.d2f_apply(&self.base, v, v);
        d.scale(0.5);
        let s = d.dot(&self.wave.psi) / self.pairing;
        d.axpy(-s, &self.dbase);
        d
    }

    /// `-1/2 <D^2 f[v, v], psi>`.
    pub fn a2(&self, v: &Profile) -> f64 {
        -0.5 * self.model.d2f_apply(&self.base, v, v).dot(&self.wave.psi)
    }

    /// First-order noise operator `S^(1)(v)[w]`.
    pub fn s1(&self, v: &Profile, w: &Profile) -> Result<Profile> {
        let p = self.pairing;
        let mut dgw = self.model.dg_apply(&self.base, v);
        for (a, b) in dgw.values_mut().iter_mut().zip(w.values()) {
            *a *= b;
        }
        let dv = v.first_difference()?;
        let gw = self.gw_psi(w);
        let dgw_psi = dgw.dot(&self.wave.psi);
        let dv_psi = dv.dot(&self.wave.psi);
        let mut r = dgw;
        r.axpy(-gw / p, &dv);
        r.axpy(-dgw_psi / p + dv_psi * gw / (p * p), &self.dbase);
        Ok(r)
    }

    /// `b^(1)(v)[w]`.
    pub fn b1(&self, v: &Profile, w: &Profile) -> Result<f64> {
        let p = self.pairing;
        let mut dgw = self.model.dg_apply(&self.base, v);
        for (a, b) in dgw.values_mut().iter_mut().zip(w.values()) {
            *a *= b;
        }
        let dv = v.first_difference()?;
        Ok(-dgw.dot(&self.wave.psi) / p + dv.dot(&self.wave.psi) * self.gw_psi(w) / (p * p))
    }

    /// `(lambda_k, S_sigma(0) e_k)` for every basis element and noisy component.
    pub fn basis_inputs(&self) -> Vec<(f64, Profile)> {
        let grid = *self.base.grid();
        let n = self.model.n();
        let len = grid.len();
        let mut out = Vec::new();
        for (f, &lam) in self.basis.functions.iter().zip(&self.basis.lambdas) {
            for a in 0..n {
                if !self.model.kinetics.noisy(a) {
                    continue;
                }
                let mut w = Profile::zeros(grid, n);
                w.values_mut()[a * len..(a + 1) * len].copy_from_slice(f);
                out.push((lam, self.s_sigma0(&w)));
            }
        }
        out
    }

    pub fn phase_context(&self, k_up: f64) -> PhaseContext {
        PhaseContext {
            model: self.model.clone(),
            kernel: self.kernel.clone(),
            phi: self.base.clone(),
            c: self.base_c,
            sigma: self.sigma,
            psi: self.wave.psi.clone(),
            phi_ref: self.wave.phi.clone(),
            k_up,
        }
    }

    /// `Var(Gamma^(1)(t))/t = <q * (g psi), g psi>/P^2`.
    pub fn phase_variance_rate(&self) -> Result<f64> {
        let gpsi = self.times_g(&self.wave.psi);
        let q = self.kernel.convolve_q(&gpsi)?;
        Ok(q.dot(&gpsi) / (self.pairing * self.pairing))
    }
}

struct SweepAcc {
    norm_rate: Vec<f64>,
    gamma2_rate: Vec<f64>,
    /// Trapezoid integral of `sum_k lambda_k 1/2 D^2 f[S I_k, S I_k]`, interleaved.
    k_int: Vec<f64>,
    k_series: Option<Vec<Vec<f64>>>,
}

impl SweepAcc {
    fn new(steps: usize, dim: usize, series: bool) -> Self {
        Self {
            norm_rate: vec![0.0; steps + 1],
            gamma2_rate: vec![0.0; steps + 1],
            k_int: vec![0.0; dim],
            k_series: series.then(|| vec![vec![0.0; dim]; steps + 1]),
        }
    }

    fn merge(&mut self, other: SweepAcc) {
        add_to(&mut self.norm_rate, &other.norm_rate);
        add_to(&mut self.gamma2_rate, &other.gamma2_rate);
        add_to(&mut self.k_int, &other.k_int);
        if let (Some(a), Some(b)) = (self.k_series.as_mut(), other.k_series) {
            for (x, y) in a.iter_mut().zip(&b) {
                add_to(x, y);
            }
        }
    }
}

fn add_to(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

fn trapezoid(values: &[f64], dt: f64) -> f64 {
    match values.len() {
        0 | 1 => 0.0,
        n => dt * (values.iter().sum::<f64>() - 0.5 * (values[0] + values[n - 1])),
    }
}

fn cumulative_trapezoid(values: &[f64], dt: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            acc += 0.5 * dt * (values[i - 1] + v);
        }
        out.push(acc);
    }
    out
}

/// Sweeps `s -> S(s) S_sigma(0) e_k` over the basis on `[0, horizon]`.
fn sweep(ctx: &ExpansionContext, horizon: f64, dt: f64, series: bool) -> Result<(SweepAcc, f64)> {
    if !(horizon > 0.0 && dt > 0.0) {
        return Err(Error::InvalidParameter(format!("horizon = {horizon}, dt = {dt}")));
    }
    let steps = (horizon / dt).ceil().max(1.0) as usize;
    let dt = horizon / steps as f64;
    let sg = ctx.wave.semigroup(dt)?;
    let grid = *ctx.base.grid();
    let n = ctx.model.n();
    let dim = n * grid.len();
    let w = interleaved_weights(&grid, n);
    let wpsi: Vec<f64> = interleave(&ctx.wave.psi).iter().zip(&w).map(|(a, b)| a * b).collect();
    let base = interleave(&ctx.base);
    let inputs = ctx.basis_inputs();
    let chunks: Vec<&[(f64, Profile)]> = inputs.chunks(ctx.cfg.chunk).collect();
    let work = |chunk: &&[(f64, Profile)]| -> SweepAcc {
        let mut acc = SweepAcc::new(steps, dim, series);
        let mut tmp = vec![0.0; dim];
        let mut d2 = vec![0.0; dim];
        let mut r = [0.0; MAX_COMP];
        for (lam, input) in chunk.iter() {
            let mut v = interleave(input);
            for s in 0..=steps {
                let (mut nr, mut gr) = (0.0, 0.0);
                for i in 0..grid.len() {
                    let u = &base[i * n..(i + 1) * n];
                    let vi = &v[i * n..(i + 1) * n];
                    ctx.model.kinetics.d2f(u, vi, vi, &mut r[..n]);
                    for a in 0..n {
                        let j = i * n + a;
                        d2[j] = 0.5 * r[a];
                        nr += w[j] * v[j] * v[j];
                        gr += wpsi[j] * d2[j];
                    }
                }
                acc.norm_rate[s] += lam * nr;
                acc.gamma2_rate[s] -= lam * gr;
                let tw = if s == 0 || s == steps { 0.5 * dt } else { dt };
                for (k, d) in acc.k_int.iter_mut().zip(&d2) {
                    *k += lam * tw * d;
                }
                if let Some(ks) = acc.k_series.as_mut() {
                    for (k, d) in ks[s].iter_mut().zip(&d2) {
                        *k += lam * d;
                    }
                }
                if s < steps {
                    sg.step_with(&mut v, &mut tmp);
                }
            }
        }
        acc
    };
    let mut total = SweepAcc::new(steps, dim, series);
    let batch = if series {
        rayon::current_num_threads().max(1)
    } else {
        chunks.len().max(1)
    };
    for group in chunks.chunks(batch) {
        let parts: Vec<SweepAcc> = group.par_iter().map(work).collect();
        for p in parts {
            total.merge(p);
        }
    }
    Ok((total, dt))
}

/// Predicted `E||V^(1)(t)||^2` on the sweep mesh.
pub fn predicted_v1_norm_curve(ctx: &ExpansionContext, t: f64, dt: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let (acc, dt) = sweep(ctx, t, dt, false)?;
    let times = (0..acc.norm_rate.len()).map(|i| i as f64 * dt).collect();
    Ok((times, cumulative_trapezoid(&acc.norm_rate, dt)))
}

/// `int_0^t sum_k lambda_k ||S(s) S_sigma(0) e_k||^2 ds`.
pub fn predicted_v1_norm(ctx: &ExpansionContext, t: f64) -> Result<f64> {
    if t == 0.0 {
        return Ok(0.0);
    }
    let (_, v) = predicted_v1_norm_curve(ctx, t, ctx.cfg.dt_sg)?;
    Ok(*v.last().unwrap_or(&0.0))
}

#[derive(Clone, Debug)]
pub struct DriftEstimate {
    pub value: f64,
    pub horizon: f64,
    /// Estimated size of the neglected tail `int_T^inf`.
    pub tail_bound: f64,
    /// Decay rate used for the tail bound.
    pub decay_rate: f64,
}

#[derive(Clone, Debug)]
pub struct OrbitalDrift {
    pub c_od: DriftEstimate,
    /// `V^od`
    pub shape: Profile,
    /// `<psi, projected integrand>` before inversion.
    pub integrand_pairing: f64,
    /// Bordered multiplier of the inversion.
    pub multiplier: f64,
    /// `lim E||V^(1)||^2` on the same horizon.
    pub v1_norm_limit: f64,
}

fn tail(rate: &[f64], dt: f64, beta: Option<f64>) -> (f64, f64) {
    let m = rate.len();
    let horizon = (m - 1) as f64 * dt;
    let peak = rate.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    if let Some(b) = beta.filter(|b| *b > 0.0) {
        return (peak * (-b * horizon).exp() / b, b);
    }
    let q = |a: usize, b: usize| rate[a..b].iter().fold(0.0f64, |x, y| x.max(y.abs()));
    let (m1, m2) = (q(m / 2, 3 * m / 4), q(3 * m / 4, m));
    let r = (m1 / m2).ln() / (horizon / 4.0);
    if r.is_finite() && r > 0.0 {
        (m2 / r, r)
    } else {
        (f64::INFINITY, 0.0)
    }
}

/// `c^od`, `V^od` and the saturated first-order norm from one basis sweep.
pub fn orbital_drift(ctx: &ExpansionContext) -> Result<OrbitalDrift> {
    let horizon = ctx.t_int();
    let (acc, dt) = sweep(ctx, horizon, ctx.cfg.dt_sg, false)?;
    let (tail_bound, decay_rate) = tail(&acc.gamma2_rate, dt, ctx.wave.beta());
    let c_od = DriftEstimate {
        value: trapezoid(&acc.gamma2_rate, dt),
        horizon,
        tail_bound,
        decay_rate,
    };
    let grid = *ctx.base.grid();
    let n = ctx.model.n();
    let mut k = deinterleave(&acc.k_int, grid, n);
    let s = k.dot(&ctx.wave.psi) / ctx.pairing;
    k.axpy(-s, &ctx.dbase);
    let integrand_pairing = k.dot(&ctx.wave.psi);
    let (u, multiplier) = ctx.wave.fredholm()?.solve(&k)?;
    Ok(OrbitalDrift {
        c_od,
        shape: u.scaled(-1.0),
        integrand_pairing,
        multiplier,
        v1_norm_limit: trapezoid(&acc.norm_rate, dt),
    })
}

/// `c^od_{sigma;2} = lim t^{-1} E[Gamma^(2)(t)]`.
pub fn expected_gamma2_rate(ctx: &ExpansionContext) -> Result<DriftEstimate> {
    Ok(orbital_drift(ctx)?.c_od)
}

/// `V^od_{sigma;2} = lim E[V^(2)(t)]`.
pub fn orbital_drift_shape(ctx: &ExpansionContext) -> Result<Profile> {
    Ok(orbital_drift(ctx)?.shape)
}

/// `E[V^(2)(t)]` and `E[Gamma^(2)(t)]` at `t`.
pub fn expected_second_order(ctx: &ExpansionContext, t: f64, dt: f64) -> Result<(Profile, f64)> {
    let (acc, dt) = sweep(ctx, t, dt, true)?;
    let grid = *ctx.base.grid();
    let n = ctx.model.n();
    let series = acc.k_series.unwrap_or_default();
    let wpsi: Vec<f64> = interleave(&ctx.wave.psi)
        .iter()
        .zip(interleaved_weights(&grid, n))
        .map(|(a, b)| a * b)
        .collect();
    let db = interleave(&ctx.dbase);
    // J(s) = int_0^s projected K, then y' = L y + J.
    let sg = ctx.wave.semigroup(dt)?;
    let dim = n * grid.len();
    let mut j_prev = vec![0.0; dim];
    let mut j_cur = vec![0.0; dim];
    let mut k_prev: Vec<f64> = project(&series[0], &wpsi, &db, ctx.pairing);
    let mut y = vec![0.0; dim];
    let mut src = vec![0.0; dim];
    let mut tmp = vec![0.0; dim];
    for ks in series.iter().skip(1) {
        let k_cur = project(ks, &wpsi, &db, ctx.pairing);
        for i in 0..dim {
            j_cur[i] = j_prev[i] + 0.5 * dt * (k_prev[i] + k_cur[i]);
            src[i] = 0.5 * dt * (j_prev[i] + j_cur[i]);
        }
        sg.step_with_source(&mut y, &src, &mut tmp);
        std::mem::swap(&mut j_prev, &mut j_cur);
        k_prev = k_cur;
    }
    let g2 = cumulative_trapezoid(&cumulative_trapezoid(&acc.gamma2_rate, dt), dt);
    Ok((deinterleave(&y, grid, n), *g2.last().unwrap_or(&0.0)))
}

fn project(k: &[f64], wpsi: &[f64], db: &[f64], p: f64) -> Vec<f64> {
    let s: f64 = k.iter().zip(wpsi).map(|(a, b)| a * b).sum::<f64>() / p;
    k.iter().zip(db).map(|(a, b)| a - s * b).collect()
}

/// One realisation of the expansion paths, sampled every `record_every` steps.
#[derive(Clone, Debug, Default)]
pub struct ExpansionPath {
    pub times: Vec<f64>,
    pub v1: Vec<Profile>,
    pub v2: Vec<Profile>,
    pub gamma1: Vec<f64>,
    pub gamma2: Vec<f64>,
    /// `Gamma_apx - c_sigma t - sigma Gamma1 - sigma^2 Gamma2`, when requested.
    pub gamma3: Vec<f64>,
    pub v1_l2sq: Vec<f64>,
    pub v2_l2sq: Vec<f64>,
    pub seed: u64,
    pub stream: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct PathOptions {
    pub dt: f64,
    pub t_end: f64,
    pub record_every: usize,
    pub second_order: bool,
    /// Amplitude sigma for the cubic estimator; `None` skips it.
    pub cubic_sigma: Option<f64>,
    pub keep_profiles: bool,
    pub k_up: f64,
}

impl Default for PathOptions {
    fn default() -> Self {
        Self {
            dt: 1e-2,
            t_end: 20.0,
            record_every: 10,
            second_order: true,
            cubic_sigma: None,
            keep_profiles: false,
            k_up: 10.0,
        }
    }
}

enum Scheme {
    /// Crank-Nicolson semigroup of `L_tw` with explicit noise.
    Semigroup(Semigroup, Vec<f64>),
    /// The simulator's linearly implicit step, one factor per component.
    Imex(Vec<BandLu>),
}

/// Streams `(V1, V2, Gamma1, Gamma2)` forward with shared increments.
pub struct PathStepper<'a> {
    ctx: &'a ExpansionContext,
    scheme: Scheme,
    dt: f64,
    pub v1: Profile,
    pub v2: Profile,
    /// Stochastic-integral part of `V2`, mean zero.
    pub v2_mart: Profile,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma_apx: f64,
    phase: Option<(PhaseContext, f64)>,
}

impl<'a> PathStepper<'a> {
    pub fn new(ctx: &'a ExpansionContext, dt: f64, cubic_sigma: Option<f64>, k_up: f64) -> Result<Self> {
        let grid = *ctx.base.grid();
        let n = ctx.model.n();
        Self::build(
            ctx,
            dt,
            cubic_sigma,
            k_up,
            Scheme::Semigroup(ctx.wave.semigroup(dt)?, vec![0.0; n * grid.len()]),
        )
    }

    /// Discretised like the wave-frame simulator, so that on shared
    /// increments the simulated `V` agrees with `sigma V1 + sigma^2 V2` up to
    /// `O(sigma^3)` at every step size.
    pub fn imex(ctx: &'a ExpansionContext, dt: f64, cubic_sigma: Option<f64>, k_up: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt = {dt}")));
        }
        let grid = *ctx.base.grid();
        let lus = ctx
            .model
            .rho
            .iter()
            .map(|&r| implicit_matrix(&grid, dt, r, ctx.base_c, false).factor())
            .collect::<Result<Vec<_>>>()?;
        Self::build(ctx, dt, cubic_sigma, k_up, Scheme::Imex(lus))
    }

    fn build(ctx: &'a ExpansionContext, dt: f64, cubic_sigma: Option<f64>, k_up: f64, scheme: Scheme) -> Result<Self> {
        let grid = *ctx.base.grid();
        let n = ctx.model.n();
        Ok(Self {
            ctx,
            scheme,
            dt,
            v1: Profile::zeros(grid, n),
            v2: Profile::zeros(grid, n),
            v2_mart: Profile::zeros(grid, n),
            gamma1: 0.0,
            gamma2: 0.0,
            gamma_apx: 0.0,
            phase: cubic_sigma.map(|s| (ctx.phase_context(k_up), s)),
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    fn advance(&mut self, v: &mut Profile) {
        let Scheme::Semigroup(sg, tmp) = &mut self.scheme else {
            return;
        };
        let grid = *v.grid();
        let n = v.ncomp();
        let mut x = interleave(v);
        sg.step_with(&mut x, tmp);
        *v = deinterleave(&x, grid, n);
    }

    /// Advances by one step driven by the increment `dw`.
    pub fn step(&mut self, dw: &Profile, second_order: bool) -> Result<()> {
        let ctx = self.ctx;
        let dt = self.dt;
        if let Some((pc, s)) = &self.phase {
            let mut v = self.v1.scaled(*s);
            v.axpy(s * s, &self.v2);
            let ev = pc.evaluate(&ctx.base.add(&v))?;
            self.gamma_apx += ev.a * dt + s * ev.b_apply(dw);
        }
        if let Scheme::Imex(lus) = &mut self.scheme {
            let lus = std::mem::take(lus);
            let r = self.step_imex(&lus, dw, second_order);
            self.scheme = Scheme::Imex(lus);
            return r;
        }
        if second_order {
            let s1 = ctx.s1(&self.v1, dw)?;
            let mut inc = ctx.r2(&self.v1);
            inc.scale(dt);
            inc.axpy(1.0, &s1);
            self.gamma2 += ctx.a2(&self.v1) * dt + ctx.b1(&self.v1, dw)?;
            let mut v2 = self.v2.add(&inc);
            self.advance(&mut v2);
            self.v2 = v2;
            let mut vm = self.v2_mart.add(&s1);
            self.advance(&mut vm);
            self.v2_mart = vm;
        }
        self.gamma1 += ctx.b0(dw);
        self.v1.axpy(1.0, &ctx.s_sigma0(dw));
        let mut v1 = self.v1.clone();
        self.advance(&mut v1);
        self.v1 = v1;
        if !(self.v1.is_finite() && self.v2.is_finite()) {
            return Err(Error::NonFinite("expansion path"));
        }
        Ok(())
    }

    fn step_imex(&mut self, lus: &[BandLu], dw: &Profile, second_order: bool) -> Result<()> {
        let ctx = self.ctx;
        let (dt, p) = (self.dt, ctx.pairing);
        let psi = &ctx.wave.psi;
        let solve = |r: &mut Profile| {
            for (c, lu) in lus.iter().enumerate() {
                lu.solve(r.component_mut(c));
            }
        };
        let lv1 = ctx.lin_apply(&self.v1)?;
        let lv1_psi = lv1.dot(psi);
        let a1 = -lv1_psi / p;
        if second_order {
            let s1 = ctx.s1(&self.v1, dw)?;
            let dv1 = self.v1.first_difference()?;
            let mut d2 = ctx.model.d2f_apply(&ctx.base, &self.v1, &self.v1);
            d2.scale(0.5);
            let lv2 = ctx.lin_apply(&self.v2)?;
            let a2 = -(d2.dot(psi) + lv2.dot(psi)) / p + lv1_psi * dv1.dot(psi) / (p * p);
            let mut r = lv2;
            r.axpy(1.0, &d2);
            r.axpy(a2, &ctx.dbase);
            r.axpy(a1, &dv1);
            r.scale(dt);
            r.axpy(1.0, &s1);
            solve(&mut r);
            self.v2.axpy(1.0, &r);
            self.gamma2 += a2 * dt + ctx.b1(&self.v1, dw)?;
            let mut r = ctx.lin_apply(&self.v2_mart)?;
            let am = -r.dot(psi) / p;
            r.axpy(am, &ctx.dbase);
            r.scale(dt);
            r.axpy(1.0, &s1);
            solve(&mut r);
            self.v2_mart.axpy(1.0, &r);
        }
        let mut r = lv1;
        r.axpy(a1, &ctx.dbase);
        r.scale(dt);
        r.axpy(1.0, &ctx.s_sigma0(dw));
        solve(&mut r);
        self.v1.axpy(1.0, &r);
        self.gamma1 += a1 * dt + ctx.b0(dw);
        if !(self.v1.is_finite() && self.v2.is_finite()) {
            return Err(Error::NonFinite("expansion path"));
        }
        Ok(())
    }

    pub fn gamma3(&self, t: f64) -> f64 {
        match &self.phase {
            Some((_, s)) => self.gamma_apx - s * self.gamma1 - s * s * self.gamma2,
            None => {
                let _ = t;
                0.0
            }
        }
    }
}

/// Runs one realisation of the expansion paths.
pub fn evolve_paths(ctx: &ExpansionContext, sampler: &mut NoiseSampler, opts: &PathOptions) -> Result<ExpansionPath> {
    if !(opts.dt > 0.0 && opts.t_end >= 0.0) || opts.record_every == 0 {
        return Err(Error::InvalidParameter("path options".into()));
    }
    let steps = (opts.t_end / opts.dt).ceil() as usize;
    let mut st = match opts.cubic_sigma {
        Some(_) => PathStepper::imex(ctx, opts.dt, opts.cubic_sigma, opts.k_up)?,
        None => PathStepper::new(ctx, opts.dt, None, opts.k_up)?,
    };
    let grid = *ctx.base.grid();
    let mut dw = Profile::zeros(grid, ctx.model.n());
    let mut path = ExpansionPath::default();
    let record = |st: &PathStepper, t: f64, path: &mut ExpansionPath| {
        path.times.push(t);
        path.gamma1.push(st.gamma1);
        path.gamma2.push(st.gamma2);
        path.gamma3.push(st.gamma3(t));
        path.v1_l2sq.push(st.v1.norm_sq());
        path.v2_l2sq.push(st.v2.norm_sq());
        if opts.keep_profiles {
            path.v1.push(st.v1.clone());
            path.v2.push(st.v2.clone());
        }
    };
    record(&st, 0.0, &mut path);
    for s in 1..=steps {
        sampler.fill_increment(opts.dt, &mut dw);
        st.step(&dw, opts.second_order)?;
        if s % opts.record_every == 0 || s == steps {
            record(&st, s as f64 * opts.dt, &mut path);
        }
    }
    Ok(path)
}

/// First-order path with every increment kept so that the second order can be
/// replayed on the same noise.
#[derive(Clone, Debug)]
pub struct FirstOrderPath {
    pub dt: f64,
    pub times: Vec<f64>,
    pub v1: Vec<Profile>,
    pub gamma1: Vec<f64>,
    pub increments: Vec<Profile>,
}

pub fn evolve_first_order(
    ctx: &ExpansionContext,
    sampler: &mut NoiseSampler,
    t_end: f64,
    dt: f64,
) -> Result<FirstOrderPath> {
    if !(dt > 0.0 && t_end >= 0.0) {
        return Err(Error::InvalidParameter("first-order mesh".into()));
    }
    let steps = (t_end / dt).ceil() as usize;
    let mut st = PathStepper::new(ctx, dt, None, f64::INFINITY)?;
    let mut out = FirstOrderPath {
        dt,
        times: vec![0.0],
        v1: vec![st.v1.clone()],
        gamma1: vec![0.0],
        increments: Vec::with_capacity(steps),
    };
    for s in 1..=steps {
        let dw = sampler.sample_increment(dt);
        st.step(&dw, false)?;
        out.times.push(s as f64 * dt);
        out.v1.push(st.v1.clone());
        out.gamma1.push(st.gamma1);
        out.increments.push(dw);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SecondOrderPath {
    pub times: Vec<f64>,
    pub v2: Vec<Profile>,
    pub gamma2: Vec<f64>,
}

/// Second order driven by the increments and `V^(1)` of `first`; `dt` must
/// match the first-order mesh.
pub fn evolve_second_order(ctx: &ExpansionContext, first: &FirstOrderPath, dt: f64) -> Result<SecondOrderPath> {
    if (dt - first.dt).abs() > 1e-12 * first.dt || first.v1.len() != first.increments.len() + 1 {
        return Err(Error::MeshMismatch(format!("dt {dt} vs first-order dt {}", first.dt)));
    }
    let mut st = PathStepper::new(ctx, dt, None, f64::INFINITY)?;
    let mut out = SecondOrderPath {
        times: first.times.clone(),
        v2: vec![st.v2.clone()],
        gamma2: vec![0.0],
    };
    for (v1, dw) in first.v1.iter().zip(&first.increments) {
        st.v1 = v1.clone();
        st.step(dw, true)?;
        out.v2.push(st.v2.clone());
        out.gamma2.push(st.gamma2);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct CubicEstimate {
    pub value: f64,
    pub stderr: f64,
    pub realisations: usize,
    /// Fewer than 100 realisations.
    pub underpowered: bool,
}

/// `(2/T) int_{T/2}^T t^{-1} E[Gamma3(t)] dt / sigma^3` from recorded paths.
pub fn gamma3_rate(paths: &[ExpansionPath], sigma: f64) -> Result<CubicEstimate> {
    if paths.is_empty() || !(sigma > 0.0) {
        return Err(Error::InvalidParameter("gamma3_rate needs paths and sigma > 0".into()));
    }
    let per_path: Vec<f64> = paths
        .iter()
        .map(|p| {
            let t_end = *p.times.last().unwrap_or(&0.0);
            let (mut num, mut den) = (0.0, 0.0);
            for i in 1..p.times.len() {
                let (t0, t1) = (p.times[i - 1], p.times[i]);
                if t0 < 0.5 * t_end || t0 <= 0.0 {
                    continue;
                }
                let h = t1 - t0;
                num += 0.5 * h * (p.gamma3[i - 1] / t0 + p.gamma3[i] / t1);
                den += h;
            }
            if den > 0.0 {
                num / den / sigma.powi(3)
            } else {
                0.0
            }
        })
        .collect();
    let n = per_path.len() as f64;
    let mean = per_path.iter().sum::<f64>() / n;
    let var = if n > 1.0 {
        per_path.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(CubicEstimate {
        value: mean,
        stderr: (var / n).sqrt(),
        realisations: per_path.len(),
        underpowered: per_path.len() < 100,
    })
}

/// Runs `realisations` cubic-estimator paths (stream `r` of `seed`) in
/// parallel and reduces them in stream order.
pub fn cubic_estimate(
    ctx: &ExpansionContext,
    sigma: f64,
    realisations: usize,
    seed: u64,
    opts: &PathOptions,
) -> Result<CubicEstimate> {
    let opts = PathOptions {
        cubic_sigma: Some(sigma),
        second_order: true,
        keep_profiles: false,
        ..*opts
    };
    let active: Vec<bool> = (0..ctx.model.n()).map(|a| ctx.model.kinetics.noisy(a)).collect();
    let paths: Vec<ExpansionPath> = (0..realisations as u64)
        .into_par_iter()
        .map(|r| {
            let mut s = NoiseSampler::new(ctx.kernel.clone(), seed, r, active.clone());
            evolve_paths(ctx, &mut s, &opts)
        })
        .collect::<Result<_>>()?;
    gamma3_rate(&paths, sigma)
}
