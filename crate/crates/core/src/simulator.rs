//! Semi-implicit Euler-Maruyama for the full SPDE, in the lab frame (`U` with
//! the phase `Gamma` tracked alongside) or the co-moving wave frame (`V`).

use serde::{Deserialize, Serialize};

use crate::banded::{BandLu, BandMatrix};
use crate::error::{Error, Result};
use crate::grid::{Grid, Profile};
use crate::phase::{PhaseContext, PhaseEval};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    Lab,
    Wave,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub t_end: f64,
    pub frame: Frame,
    pub record_every: usize,
    pub keep_snapshots: bool,
    pub initial_gamma: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 1e-2,
            t_end: 20.0,
            frame: Frame::Wave,
            record_every: 10,
            keep_snapshots: false,
            initial_gamma: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SimState {
    pub t: f64,
    pub steps: usize,
    /// `U` (lab frame) or `V` (wave frame).
    pub u: Profile,
    pub gamma: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct StepInfo {
    pub a: f64,
    pub b_hs_sq: f64,
    pub chi_high: f64,
    pub chi_low: f64,
    /// `b[dW]`
    pub b_dw: f64,
}

#[derive(Clone, Debug, Default)]
pub struct SimPath {
    pub times: Vec<f64>,
    pub snapshots: Vec<Profile>,
    pub gamma: Vec<f64>,
    pub v_l2sq: Vec<f64>,
    pub a: Vec<f64>,
    pub b_hs_sq: Vec<f64>,
    pub tracking_failed_at: Option<f64>,
}

/// `I - dt (d * D2 + e * D1)` per component with zero ghosts (`fold = false`)
/// or constant extension (`fold = true`).
pub(crate) fn implicit_matrix(grid: &Grid, dt: f64, d: f64, e: f64, fold: bool) -> BandMatrix {
    let n = grid.len();
    let st = grid.stencil();
    let r = st.radius();
    let (h, h2) = (1.0 / grid.dx(), 1.0 / (grid.dx() * grid.dx()));
    let mut m = BandMatrix::zeros(n, r, r);
    for i in 0..n {
        m.add(i, i, 1.0);
        for k in 0..=2 * r {
            let c = -dt * (d * st.d2()[k] * h2 + e * st.d1()[k] * h);
            let j = i as isize + k as isize - r as isize;
            if (0..n as isize).contains(&j) {
                m.add(i, j as usize, c);
            } else if fold {
                m.add(i, if j < 0 { 0 } else { n - 1 }, c);
            }
        }
    }
    m
}

/// `v''` with constant extension, written as differences so constants map to
/// exactly zero.
fn d2_flat(grid: &Grid, v: &[f64], out: &mut [f64]) {
    let n = v.len();
    let st = grid.stencil();
    let r = st.radius() as isize;
    let h2 = 1.0 / (grid.dx() * grid.dx());
    for i in 0..n {
        let mut s = 0.0;
        for (k, c) in st.d2().iter().enumerate() {
            let j = (i as isize + k as isize - r).clamp(0, n as isize - 1) as usize;
            s += c * (v[j] - v[i]);
        }
        out[i] = s * h2;
    }
}

/// Reconstructs `V = U(. + Gamma) - Phi_sigma`.
pub fn reconstruct_v_from_lab(ctx: &PhaseContext, u: &Profile, gamma: f64) -> Result<Profile> {
    Ok(ctx.model.shift(u, -gamma)?.sub(&ctx.phi))
}

pub struct Simulator {
    pub ctx: PhaseContext,
    pub frame: Frame,
    dt: f64,
    lab_lu: Vec<BandLu>,
}

impl Simulator {
    pub fn new(ctx: PhaseContext, frame: Frame, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt = {dt}")));
        }
        if !(ctx.k_up >= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "k_up = {} must be at least 1",
                ctx.k_up
            )));
        }
        let grid = *ctx.phi.grid();
        let lab_lu = match frame {
            Frame::Lab => ctx
                .model
                .rho
                .iter()
                .map(|r| implicit_matrix(&grid, dt, *r, 0.0, true).factor())
                .collect::<Result<_>>()?,
            Frame::Wave => Vec::new(),
        };
        Ok(Self { ctx, frame, dt, lab_lu })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn grid(&self) -> &Grid {
        self.ctx.phi.grid()
    }

    /// Start from `Phi_sigma + perturbation` placed at `gamma0`.
    pub fn initial_state(&self, perturbation: Option<&Profile>, gamma0: f64) -> Result<SimState> {
        let grid = *self.grid();
        let n = self.ctx.model.n();
        let v = match perturbation {
            Some(p) => p.clone(),
            None => Profile::zeros(grid, n),
        };
        let u = match self.frame {
            Frame::Wave => v,
            Frame::Lab => self.ctx.model.shift(&self.ctx.phi.add(&v), gamma0)?,
        };
        Ok(SimState {
            t: 0.0,
            steps: 0,
            u,
            gamma: gamma0,
        })
    }

    /// Perturbation `V` of the current state.
    pub fn v_of(&self, st: &SimState) -> Result<Profile> {
        match self.frame {
            Frame::Wave => Ok(st.u.clone()),
            Frame::Lab => reconstruct_v_from_lab(&self.ctx, &st.u, st.gamma),
        }
    }

    /// Advances one step with increment `dw`.
    pub fn step(&self, st: &mut SimState, dw: &Profile) -> Result<StepInfo> {
        let blown = |st: &SimState| !st.u.is_finite() || !st.gamma.is_finite() || st.u.max_abs() > 1e8;
        if blown(st) {
            return Err(Error::BlowUp(st.t));
        }
        let info = match self.frame {
            Frame::Lab => self.step_lab(st, dw),
            Frame::Wave => self.step_wave(st, dw),
        };
        st.t += self.dt;
        st.steps += 1;
        if blown(st) {
            return Err(Error::BlowUp(st.t));
        }
        info
    }

    fn info(ev: &PhaseEval, b_dw: f64) -> StepInfo {
        StepInfo {
            a: ev.a,
            b_hs_sq: ev.b_hs_sq,
            chi_high: ev.chi_high,
            chi_low: ev.chi_low,
            b_dw,
        }
    }

    fn step_lab(&self, st: &mut SimState, dw: &Profile) -> Result<StepInfo> {
        let ctx = &self.ctx;
        let m = &ctx.model;
        let grid = *self.grid();
        let len = grid.len();
        let (dt, sigma) = (self.dt, ctx.sigma);
        let u = &st.u;
        // Phase functionals on the pulled-back state; the noise pairs with
        // psi moved to the lab position.
        let ev = ctx.evaluate(&m.shift(u, -st.gamma)?)?;
        let psi_lab = ctx.psi.shift(st.gamma)?;
        let g = m.g_profile(u);
        let mut gpsi = g.clone();
        for (a, b) in gpsi.values_mut().iter_mut().zip(psi_lab.values()) {
            *a *= b;
        }
        let b_dw = ev.b_scale * gpsi.dot(dw);
        let mut rhs = m.f_profile(u);
        if sigma != 0.0 {
            rhs.axpy(sigma * sigma, &m.h_profile(ctx.kernel.q_at_zero(), u)?);
        }
        rhs.scale(dt);
        let mut d2 = vec![0.0; len];
        for c in 0..m.n() {
            d2_flat(&grid, u.component(c), &mut d2);
            let r = rhs.component_mut(c);
            for (x, y) in r.iter_mut().zip(&d2) {
                *x += dt * m.rho[c] * y;
            }
        }
        if sigma != 0.0 {
            for ((x, gv), w) in rhs.values_mut().iter_mut().zip(g.values()).zip(dw.values()) {
                *x += sigma * gv * w;
            }
        }
        for c in 0..m.n() {
            self.lab_lu[c].solve(rhs.component_mut(c));
        }
        st.u.axpy(1.0, &rhs);
        st.gamma += (ctx.c + ev.a) * dt + sigma * b_dw;
        Ok(Self::info(&ev, b_dw))
    }

    fn step_wave(&self, st: &mut SimState, dw: &Profile) -> Result<StepInfo> {
        let ctx = &self.ctx;
        let m = &ctx.model;
        let grid = *self.grid();
        let (dt, sigma) = (self.dt, ctx.sigma);
        let u = ctx.phi.add(&st.u);
        let ev = ctx.evaluate(&u)?;
        let b_dw = ev.b_apply(dw);
        let mut rhs = ev.drift.clone();
        rhs.axpy(ev.a, &ev.du);
        rhs.scale(dt);
        if sigma != 0.0 {
            let g = m.g_profile(&u);
            for ((x, gv), w) in rhs.values_mut().iter_mut().zip(g.values()).zip(dw.values()) {
                *x += sigma * gv * w;
            }
            rhs.axpy(sigma * b_dw, &ev.du);
        }
        let extra = 0.5 * sigma * sigma * ev.b_hs_sq;
        for c in 0..m.n() {
            let lu = implicit_matrix(&grid, dt, m.rho[c] + extra, ctx.c, false).factor()?;
            lu.solve(rhs.component_mut(c));
        }
        st.u.axpy(1.0, &rhs);
        st.gamma += (ctx.c + ev.a) * dt + sigma * b_dw;
        Ok(Self::info(&ev, b_dw))
    }
}

/// Runs a full path, drawing increments from `next_dw`.
pub fn simulate(
    sim: &Simulator,
    cfg: &SimConfig,
    init: SimState,
    mut next_dw: impl FnMut(&mut Profile),
) -> Result<(SimPath, SimState)> {
    if cfg.record_every == 0 || !(cfg.t_end >= 0.0) {
        return Err(Error::InvalidParameter("simulation config".into()));
    }
    let steps = (cfg.t_end / sim.dt()).ceil() as usize;
    let mut st = init;
    let mut path = SimPath::default();
    let mut dw = Profile::zeros(*sim.grid(), sim.ctx.model.n());
    let mut last = StepInfo {
        a: 0.0,
        b_hs_sq: 0.0,
        chi_high: 1.0,
        chi_low: 1.0,
        b_dw: 0.0,
    };
    let record = |st: &SimState, info: &StepInfo, path: &mut SimPath| -> Result<()> {
        let v = sim.v_of(st)?;
        path.times.push(st.t);
        path.gamma.push(st.gamma);
        path.v_l2sq.push(v.norm_sq());
        path.a.push(info.a);
        path.b_hs_sq.push(info.b_hs_sq);
        if cfg.keep_snapshots {
            path.snapshots.push(match sim.frame {
                Frame::Wave => v,
                Frame::Lab => st.u.clone(),
            });
        }
        Ok(())
    };
    record(&st, &last, &mut path)?;
    for s in 1..=steps {
        next_dw(&mut dw);
        last = sim.step(&mut st, &dw)?;
        if last.chi_high < 1.0 && path.tracking_failed_at.is_none() {
            path.tracking_failed_at = Some(st.t);
        }
        if s % cfg.record_every == 0 || s == steps {
            record(&st, &last, &mut path)?;
        }
    }
    Ok((path, st))
}
