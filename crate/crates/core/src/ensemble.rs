//! Monte-Carlo ensembles of the wave-frame (or lab-frame) SPDE with the
//! expansion paths driven by the same increments, and the estimators built on
//! them.
//!
//! Realisation `r` uses noise stream `r` of `base_seed`. Realisations are
//! grouped in fixed blocks; block sums are merged in a fixed pairwise tree, so
//! the statistics do not depend on scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::{ExpansionContext, PathStepper};
use crate::grid::Profile;
use crate::noise::NoiseSampler;
use crate::simulator::{SimConfig, Simulator};
use crate::stats::{linear_fit, loglog_fit, tree_reduce, LinearFit, Moments, Summary};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub realizations: usize,
    pub base_seed: u64,
    pub sim: SimConfig,
    /// Time at which mean profiles are collected.
    pub t_eval: Option<f64>,
    /// Order of the expansion paths run alongside (0, 1 or 2).
    pub expansion_order: usize,
    /// Discount of the stability functional.
    pub stability_eps: f64,
    pub k_up: f64,
    pub block: usize,
    /// Forces every realisation onto stream 0 (determinism smoke test).
    #[serde(default)]
    pub same_stream: bool,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self {
            realizations: 500,
            base_seed: 1,
            sim: SimConfig::default(),
            t_eval: None,
            expansion_order: 2,
            stability_eps: 0.1,
            k_up: 10.0,
            block: 16,
            same_stream: false,
        }
    }
}

const SERIES: usize = 10;
const S_GAMMA_DEV: usize = 0;
const S_GAMMA_RED: usize = 1;
const S_GAMMA1: usize = 2;
const S_V: usize = 3;
const S_VRES: usize = 4;
const S_SUP: usize = 5;
const S_N: usize = 6;
const S_NRES: usize = 7;
const S_V1: usize = 8;
const S_V2: usize = 9;

#[derive(Clone, Debug, Default)]
struct Acc {
    series: Vec<Moments>,
    speed: Moments,
    profile: Moments,
    profile_reduced: Moments,
    failures: usize,
    tracking_failures: usize,
}

impl Acc {
    fn new(points: usize, dim: usize) -> Self {
        Self {
            series: (0..SERIES).map(|_| Moments::new(points)).collect(),
            speed: Moments::new(1),
            profile: Moments::new(dim),
            profile_reduced: Moments::new(dim),
            failures: 0,
            tracking_failures: 0,
        }
    }

    fn merge(mut self, other: Acc) -> Acc {
        for (a, b) in self.series.iter_mut().zip(&other.series) {
            a.merge(b);
        }
        self.speed.merge(&other.speed);
        self.profile.merge(&other.profile);
        self.profile_reduced.merge(&other.profile_reduced);
        self.failures += other.failures;
        self.tracking_failures += other.tracking_failures;
        self
    }
}

#[derive(Clone, Debug)]
pub struct EnsembleStats {
    pub sigma: f64,
    pub c_sigma: f64,
    pub phi_sigma: Profile,
    pub times: Vec<f64>,
    pub requested: usize,
    pub effective: usize,
    /// Blow-ups and errors, excluded.
    pub failures: usize,
    /// Paths whose tracking cutoff fired, excluded.
    pub tracking_failures: usize,
    /// More than 10% of the realisations excluded.
    pub invalid: bool,
    /// `Gamma - c_sigma t`
    pub gamma_dev: Summary,
    /// `Gamma - c_sigma t - sigma Gamma1`
    pub gamma_reduced: Summary,
    pub gamma1: Summary,
    pub v_l2sq: Summary,
    /// `||V - sigma V1 - sigma^2 V2||^2`
    pub vres_l2sq: Summary,
    pub sup_v_l2sq: Summary,
    pub stability: Summary,
    pub stability_res: Summary,
    pub v1_l2sq: Summary,
    pub v2_l2sq: Summary,
    /// Per-realisation speed estimator; see [`observed_limiting_speed`].
    pub speed: (f64, f64),
    /// `E[V(t_eval)]` and its standard error.
    pub v_mean: Option<(Profile, Profile)>,
    /// Same with `sigma V1 + sigma^2 V2_mart` subtracted.
    pub v_mean_reduced: Option<(Profile, Profile)>,
}

/// Discounted stability functional
/// `N(t) = ||V(t)||^2 + int_0^t e^{-eps (t-s)} ||V(s)||_{H1}^2 ds` on a mesh.
pub fn stability_functional(times: &[f64], l2sq: &[f64], h1sq: &[f64], eps: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(times.len());
    let mut acc = 0.0;
    for i in 0..times.len() {
        if i > 0 {
            let h = times[i] - times[i - 1];
            acc = acc * (-eps * h).exp() + 0.5 * h * (h1sq[i - 1] * (-eps * h).exp() + h1sq[i]);
        }
        out.push(l2sq[i] + acc);
    }
    out
}

/// First time `n` exceeds `eta`, or `t_end`.
pub fn stopping_time(times: &[f64], n: &[f64], eta: f64, t_end: f64) -> f64 {
    times
        .iter()
        .zip(n)
        .find(|(_, v)| **v > eta)
        .map(|(t, _)| *t)
        .unwrap_or(t_end)
}

struct Realisation {
    series: Vec<Vec<f64>>,
    speed: f64,
    profile: Option<(Vec<f64>, Vec<f64>)>,
    tracking_failed: bool,
}

fn run_one(
    ctx: &ExpansionContext,
    sim: &Simulator,
    spec: &EnsembleSpec,
    stream: u64,
    points: usize,
) -> Result<Realisation> {
    let sigma = ctx.sigma;
    let dt = spec.sim.dt;
    let steps = (spec.sim.t_end / dt).ceil() as usize;
    let every = spec.sim.record_every;
    let eval_step = spec.t_eval.map(|t| (t / dt).round() as usize);
    let active: Vec<bool> = (0..ctx.model.n()).map(|a| ctx.model.kinetics.noisy(a)).collect();
    let mut sampler = NoiseSampler::new(ctx.kernel.clone(), spec.base_seed, stream, active);
    let mut st = sim.initial_state(None, spec.sim.initial_gamma)?;
    let mut ex = PathStepper::imex(ctx, dt, None, spec.k_up)?;
    let mut dw = Profile::zeros(*ctx.base.grid(), ctx.model.n());
    let mut series: Vec<Vec<f64>> = (0..SERIES).map(|_| Vec::with_capacity(points)).collect();
    let (mut sup, mut n_acc, mut nres_acc) = (0.0f64, 0.0, 0.0);
    let decay = (-spec.stability_eps * dt).exp();
    let mut prev_h1 = (0.0, 0.0);
    let mut profile = None;
    let mut tracking_failed = false;
    for s in 0..=steps {
        if s > 0 {
            sampler.fill_increment(dt, &mut dw);
            let info = sim.step(&mut st, &dw)?;
            if info.chi_high < 1.0 {
                tracking_failed = true;
            }
            if spec.expansion_order >= 1 {
                ex.step(&dw, spec.expansion_order >= 2)?;
            }
        }
        let v = sim.v_of(&st)?;
        let mut vres = v.clone();
        vres.axpy(-sigma, &ex.v1);
        vres.axpy(-sigma * sigma, &ex.v2);
        let (l2, h1) = (v.norm_sq(), v.h1_norm_sq());
        let (l2r, h1r) = (vres.norm_sq(), vres.h1_norm_sq());
        sup = sup.max(l2);
        if s > 0 {
            n_acc = n_acc * decay + 0.5 * dt * (prev_h1.0 * decay + h1);
            nres_acc = nres_acc * decay + 0.5 * dt * (prev_h1.1 * decay + h1r);
        }
        prev_h1 = (h1, h1r);
        if Some(s) == eval_step {
            let mut red = v.clone();
            red.axpy(-sigma, &ex.v1);
            red.axpy(-sigma * sigma, &ex.v2_mart);
            profile = Some((v.values().to_vec(), red.into_values()));
        }
        if s % every == 0 || s == steps {
            let t = s as f64 * dt;
            let dev = st.gamma - spec.sim.initial_gamma - ctx.base_c * t;
            let row = [
                dev,
                dev - sigma * ex.gamma1,
                ex.gamma1,
                l2,
                l2r,
                sup,
                l2 + n_acc,
                l2r + nres_acc,
                ex.v1.norm_sq(),
                ex.v2.norm_sq(),
            ];
            for (col, x) in series.iter_mut().zip(row) {
                col.push(x);
            }
        }
    }
    let t_end = steps as f64 * dt;
    let times: Vec<f64> = (0..points).map(|i| mesh_time(i, every, steps, dt)).collect();
    let speed = late_average(&times, &series[S_GAMMA_RED], t_end);
    Ok(Realisation {
        series,
        speed,
        profile,
        tracking_failed,
    })
}

fn mesh_time(i: usize, every: usize, steps: usize, dt: f64) -> f64 {
    ((i * every).min(steps)) as f64 * dt
}

/// `(2/T) int_{T/2}^T y(t)/t dt` by the trapezoid rule on the mesh.
fn late_average(times: &[f64], y: &[f64], t_end: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 1..times.len() {
        let (t0, t1) = (times[i - 1], times[i]);
        if t0 < 0.5 * t_end || t0 <= 0.0 {
            continue;
        }
        num += 0.5 * (t1 - t0) * (y[i - 1] / t0 + y[i] / t1);
        den += t1 - t0;
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Runs the ensemble around the expansion base (`Phi_sigma`, `c_sigma`,
/// sigma taken from `ctx`).
pub fn run_ensemble(ctx: &ExpansionContext, spec: &EnsembleSpec) -> Result<EnsembleStats> {
    if spec.realizations < 2 || spec.block == 0 || spec.sim.record_every == 0 {
        return Err(Error::InvalidParameter("ensemble needs R >= 2, block >= 1".into()));
    }
    if spec.expansion_order > 2 {
        return Err(Error::InvalidParameter("expansion order above 2".into()));
    }
    let dt = spec.sim.dt;
    let steps = (spec.sim.t_end / dt).ceil() as usize;
    let every = spec.sim.record_every;
    let points = steps.div_ceil(every) + 1;
    let sim = Simulator::new(ctx.phase_context(spec.k_up), spec.sim.frame, dt)?;
    let dim = ctx.base.values().len();
    let blocks: Vec<(usize, usize)> = (0..spec.realizations)
        .step_by(spec.block)
        .map(|s| (s, (s + spec.block).min(spec.realizations)))
        .collect();
    let parts: Vec<Acc> = blocks
        .par_iter()
        .map(|&(lo, hi)| {
            let mut acc = Acc::new(points, dim);
            for r in lo..hi {
                let stream = if spec.same_stream { 0 } else { r as u64 };
                match run_one(ctx, &sim, spec, stream, points) {
                    Ok(real) if real.tracking_failed => acc.tracking_failures += 1,
                    Ok(real) => {
                        for (m, s) in acc.series.iter_mut().zip(&real.series) {
                            m.push(s);
                        }
                        acc.speed.push(&[real.speed]);
                        if let Some((p, q)) = &real.profile {
                            acc.profile.push(p);
                            acc.profile_reduced.push(q);
                        }
                    }
                    Err(_) => acc.failures += 1,
                }
            }
            acc
        })
        .collect();
    let acc = tree_reduce(parts, Acc::merge).unwrap_or_else(|| Acc::new(points, dim));
    let effective = acc.speed.n;
    let excluded = acc.failures + acc.tracking_failures;
    let grid = *ctx.base.grid();
    let n = ctx.model.n();
    let to_profiles = |m: &Moments| -> Result<Option<(Profile, Profile)>> {
        if m.n == 0 {
            return Ok(None);
        }
        let s = m.summary();
        Ok(Some((
            Profile::from_values(grid, n, s.mean)?,
            Profile::from_values(grid, n, s.stderr)?,
        )))
    };
    let sp = acc.speed.summary();
    Ok(EnsembleStats {
        sigma: ctx.sigma,
        c_sigma: ctx.base_c,
        phi_sigma: ctx.base.clone(),
        times: (0..points).map(|i| mesh_time(i, every, steps, dt)).collect(),
        requested: spec.realizations,
        effective,
        failures: acc.failures,
        tracking_failures: acc.tracking_failures,
        invalid: excluded * 10 > spec.realizations,
        gamma_dev: acc.series[S_GAMMA_DEV].summary(),
        gamma_reduced: acc.series[S_GAMMA_RED].summary(),
        gamma1: acc.series[S_GAMMA1].summary(),
        v_l2sq: acc.series[S_V].summary(),
        vres_l2sq: acc.series[S_VRES].summary(),
        sup_v_l2sq: acc.series[S_SUP].summary(),
        stability: acc.series[S_N].summary(),
        stability_res: acc.series[S_NRES].summary(),
        v1_l2sq: acc.series[S_V1].summary(),
        v2_l2sq: acc.series[S_V2].summary(),
        speed: (
            sp.mean.first().copied().unwrap_or(f64::NAN),
            sp.stderr.first().copied().unwrap_or(f64::NAN),
        ),
        v_mean: to_profiles(&acc.profile)?,
        v_mean_reduced: to_profiles(&acc.profile_reduced)?,
    })
}

/// `c_sigma + (2/T) int_{T/2}^T t^{-1} E[Gamma - c_sigma t - sigma Gamma1] dt`
/// with its standard error.
pub fn observed_limiting_speed(stats: &EnsembleStats) -> (f64, f64) {
    (stats.c_sigma + stats.speed.0, stats.speed.1)
}

/// `Phi_sigma + E[V(t_eval)]` with the mean-zero parts subtracted.
pub fn observed_limiting_shape(stats: &EnsembleStats) -> Option<Profile> {
    stats.v_mean_reduced.as_ref().map(|(m, _)| stats.phi_sigma.add(m))
}

/// Slope of `Var(Gamma(t))` against `t` on `[t_lo, t_end]`.
pub fn phase_diffusion_fit(stats: &EnsembleStats, t_lo: f64) -> Option<LinearFit> {
    let (x, y): (Vec<f64>, Vec<f64>) = stats
        .times
        .iter()
        .zip(&stats.gamma_dev.var)
        .filter(|(t, _)| **t >= t_lo)
        .map(|(t, v)| (*t, *v))
        .unzip();
    linear_fit(&x, &y)
}

#[derive(Clone, Debug)]
pub struct ScalingReport {
    pub v_l2sq: Option<LinearFit>,
    pub vres_l2sq: Option<LinearFit>,
    pub sup_v_l2sq: Option<LinearFit>,
}

/// Log-log exponents in sigma at the mesh point closest to `t_eval`.
pub fn scaling_report(runs: &[&EnsembleStats], t_eval: f64) -> Result<ScalingReport> {
    if runs.len() < 4 {
        return Err(Error::InvalidParameter(
            "scaling needs at least four sigma values".into(),
        ));
    }
    let sig: Vec<f64> = runs.iter().map(|r| r.sigma).collect();
    let (lo, hi) = sig
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(a, b), s| (a.min(*s), b.max(*s)));
    if !(hi >= 10.0 * lo) {
        return Err(Error::InvalidParameter("sigma grid must span a decade".into()));
    }
    let pick = |f: &dyn Fn(&EnsembleStats) -> &Summary| -> Option<LinearFit> {
        let y: Vec<f64> = runs
            .iter()
            .map(|r| {
                let i = nearest(&r.times, t_eval);
                f(r).mean[i]
            })
            .collect();
        loglog_fit(&sig, &y)
    };
    Ok(ScalingReport {
        v_l2sq: pick(&|r| &r.v_l2sq),
        vres_l2sq: pick(&|r| &r.vres_l2sq),
        sup_v_l2sq: pick(&|r| &r.sup_v_l2sq),
    })
}

fn nearest(times: &[f64], t: f64) -> usize {
    let mut best = 0;
    for (i, s) in times.iter().enumerate() {
        if (s - t).abs() < (times[best] - t).abs() {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug)]
pub struct SupTrend {
    pub log_fit: LinearFit,
    pub linear_fit: LinearFit,
}

/// Compares log-t and linear-t fits of `E[sup_{s<=t} ||V(s)||^2]` on
/// `[t_lo, t_hi]`.
pub fn running_sup_stat(stats: &EnsembleStats, t_lo: f64, t_hi: f64) -> Option<SupTrend> {
    let (t, y): (Vec<f64>, Vec<f64>) = stats
        .times
        .iter()
        .zip(&stats.sup_v_l2sq.mean)
        .filter(|(t, _)| **t >= t_lo && **t <= t_hi && **t > 0.0)
        .map(|(t, v)| (*t, *v))
        .unzip();
    let lt: Vec<f64> = t.iter().map(|x| x.ln()).collect();
    Some(SupTrend {
        log_fit: linear_fit(&lt, &y)?,
        linear_fit: linear_fit(&t, &y)?,
    })
}

/// Sizes the global worker pool; only the first call has an effect.
pub fn configure_threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::expansion::ExpansionConfig;
    use crate::grid::Grid;
    use crate::model::{Interpretation, ModelSpec};
    use crate::noise::CovarianceKernel;
    use crate::stochastic::{solve_instantaneous_wave, StochNewtonOptions};
    use crate::wave::{nagumo_wave, NewtonOptions};

    fn ctx(sigma: f64) -> ExpansionContext {
        let m = ModelSpec::nagumo(0.25, 1.0, Interpretation::Ito).unwrap();
        let g = Grid::dirichlet(40.0, 256).unwrap();
        let w = nagumo_wave(&m, &g, NewtonOptions::default()).unwrap();
        let k = Arc::new(CovarianceKernel::gaussian(1.0, g).unwrap());
        let sw = solve_instantaneous_wave(&m, &k, &w, sigma, &StochNewtonOptions::default()).unwrap();
        let cfg = ExpansionConfig {
            k_max: 10,
            ..Default::default()
        };
        ExpansionContext::new(m, k, w, cfg)
            .unwrap()
            .with_stochastic_wave(&sw)
            .unwrap()
    }

    fn spec(r: usize) -> EnsembleSpec {
        EnsembleSpec {
            realizations: r,
            sim: SimConfig {
                t_end: 1.0,
                record_every: 10,
                ..Default::default()
            },
            t_eval: Some(1.0),
            block: 3,
            ..Default::default()
        }
    }

    #[test]
    fn expansion_residual_is_third_order() {
        let mut sp = spec(4);
        sp.sim.t_end = 5.0;
        let last = |s: f64| {
            let st = run_ensemble(&ctx(s), &sp).unwrap();
            (*st.v_l2sq.mean.last().unwrap(), *st.vres_l2sq.mean.last().unwrap())
        };
        let (v1, r1) = last(0.05);
        let (v2, r2) = last(0.1);
        let (pv, pr) = ((v2 / v1).log2(), (r2 / r1).log2());
        assert!((pv - 2.0).abs() < 0.1, "{pv}");
        assert!((pr - 6.0).abs() < 0.4, "{pr}");
    }

    #[test]
    fn zero_noise_has_zero_variance() {
        let s = run_ensemble(&ctx(0.0), &spec(4)).unwrap();
        assert!(s.gamma_dev.var.iter().all(|v| *v < 1e-20));
        assert!((observed_limiting_speed(&s).0 - s.c_sigma).abs() < 1e-8);
        let phi = observed_limiting_shape(&s).unwrap();
        assert!(phi.sub(&s.phi_sigma).max_abs() < 1e-8);
    }

    #[test]
    fn forced_identical_streams_give_identical_paths() {
        let mut sp = spec(2);
        sp.same_stream = true;
        let s = run_ensemble(&ctx(0.2), &sp).unwrap();
        assert!(s.gamma_dev.var.iter().all(|v| *v < 1e-24));
        assert!(s.v_l2sq.mean.last().unwrap() > &0.0);
    }

    #[test]
    fn thread_count_invariance() {
        let c = ctx(0.2);
        let sp = spec(7);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| run_ensemble(&c, &sp).unwrap());
        let b = four.install(|| run_ensemble(&c, &sp).unwrap());
        assert_eq!(a.gamma_dev, b.gamma_dev);
        assert_eq!(a.speed.0.to_bits(), b.speed.0.to_bits());
        assert_eq!(a.effective + a.failures + a.tracking_failures, 7);
    }

    #[test]
    fn stability_functional_properties() {
        let t: Vec<f64> = (0..=100).map(|i| i as f64 * 0.1).collect();
        let zero = vec![0.0; t.len()];
        let n0 = stability_functional(&t, &zero, &zero, 0.5);
        assert!(n0.iter().all(|v| *v == 0.0));
        assert_eq!(stopping_time(&t, &n0, 1.0, 10.0), 10.0);
        let l2: Vec<f64> = t.iter().map(|x| (x * 0.7).sin().powi(2)).collect();
        let h1: Vec<f64> = l2.iter().map(|v| 2.0 * v + 0.1).collect();
        let a = stability_functional(&t, &l2, &h1, 0.1);
        let b = stability_functional(&t, &l2, &h1, 1.0);
        assert!(a.iter().zip(&b).all(|(x, y)| x >= y));
    }
}
