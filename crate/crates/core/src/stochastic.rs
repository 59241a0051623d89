//! Instantaneous stochastic waves: the residual `F_sigma`, its Newton-Krylov
//! solution, the second-order expansion and the small-noise-expansion waves.

use crate::banded::BorderedSolver;
use crate::error::{Error, Result};
use crate::grid::{Grid, Profile};
use crate::model::ModelSpec;
use crate::noise::CovarianceKernel;
use crate::wave::{assemble_operator, deinterleave, interleave, interleaved_weights, residual_f0, WavePair};

/// Pieces of the second-order correction at a profile `Phi`.
#[derive(Clone, Debug)]
pub struct NoiseTerms {
    /// `<Phi', psi>`
    pub pairing: f64,
    /// `g(Phi)^T psi`
    pub gpsi: Profile,
    /// `q * (g^T psi)`
    pub q_gpsi: Profile,
    /// `<q * (g^T psi), g^T psi>`
    pub b: f64,
    /// `g Q g^T psi`
    pub gqg: Profile,
}

pub fn noise_terms(model: &ModelSpec, kernel: &CovarianceKernel, psi: &Profile, phi: &Profile) -> Result<NoiseTerms> {
    let dphi = model.d1(phi);
    let pairing = dphi.inner_product(psi)?;
    if !(pairing.abs() >= 1e-6) {
        return Err(Error::PhasePairingDegenerate(pairing));
    }
    let g = model.g_profile(phi);
    let mut gpsi = g.clone();
    for (a, b) in gpsi.values_mut().iter_mut().zip(psi.values()) {
        *a *= b;
    }
    let q_gpsi = kernel.convolve_q(&gpsi)?;
    let b = q_gpsi.dot(&gpsi);
    let mut gqg = g;
    for (a, b) in gqg.values_mut().iter_mut().zip(q_gpsi.values()) {
        *a *= b;
    }
    Ok(NoiseTerms {
        pairing,
        gpsi,
        q_gpsi,
        b,
        gqg,
    })
}

/// `F_{0;2}(Phi) = 1/2 B/P^2 Phi'' - (g Q g^T psi)'/P + h(Phi)`.
pub fn f02(model: &ModelSpec, kernel: &CovarianceKernel, psi: &Profile, phi: &Profile) -> Result<Profile> {
    let t = noise_terms(model, kernel, psi, phi)?;
    let p = t.pairing;
    let mut r = model.d2(phi);
    r.scale(0.5 * t.b / (p * p));
    r.axpy(-1.0 / p, &t.gqg.first_difference()?);
    r.axpy(1.0, &model.h_profile(kernel.q_at_zero(), phi)?);
    Ok(r)
}

/// `F_sigma(Phi, c) = F_0(Phi, c) + sigma^2 F_{0;2}(Phi)`.
pub fn f_sigma(
    model: &ModelSpec,
    kernel: &CovarianceKernel,
    psi: &Profile,
    phi: &Profile,
    c: f64,
    sigma: f64,
) -> Result<Profile> {
    let mut r = residual_f0(model, phi, c);
    if sigma != 0.0 {
        r.axpy(sigma * sigma, &f02(model, kernel, psi, phi)?);
    } else {
        noise_terms(model, kernel, psi, phi)?;
    }
    Ok(r)
}

/// Directional derivative of `F_sigma` at `(phi, c)` along `(v, dc)`.
#[allow(clippy::too_many_arguments)]
pub fn f_sigma_jv(
    model: &ModelSpec,
    kernel: &CovarianceKernel,
    psi: &Profile,
    phi: &Profile,
    c: f64,
    sigma: f64,
    v: &Profile,
    dc: f64,
) -> Result<Profile> {
    let n = model.n();
    let dphi = model.d1(phi);
    let dv = v.first_difference()?;
    let mut r = v.second_difference()?;
    for a in 0..n {
        r.component_mut(a).iter_mut().for_each(|x| *x *= model.rho[a]);
    }
    r.axpy(c, &dv);
    r.axpy(1.0, &model.df_apply(phi, v));
    r.axpy(dc, &dphi);
    if sigma == 0.0 {
        return Ok(r);
    }
    let s2 = sigma * sigma;
    let t = noise_terms(model, kernel, psi, phi)?;
    let p = t.pairing;
    let dp = dv.dot(psi);
    let dg = model.dg_apply(phi, v);
    let mut dgpsi = dg.clone();
    for (a, b) in dgpsi.values_mut().iter_mut().zip(psi.values()) {
        *a *= b;
    }
    let db = 2.0 * t.q_gpsi.dot(&dgpsi);
    let q_dgpsi = kernel.convolve_q(&dgpsi)?;
    let g = model.g_profile(phi);
    let mut dgqg = dg;
    for ((a, qg), (gv, qd)) in dgqg
        .values_mut()
        .iter_mut()
        .zip(t.q_gpsi.values())
        .zip(g.values().iter().zip(q_dgpsi.values()))
    {
        *a = *a * qg + gv * qd;
    }
    let d2phi = model.d2(phi);
    let gqg_x = t.gqg.first_difference()?;
    r.axpy(s2 * 0.5 * (db / (p * p) - 2.0 * t.b * dp / (p * p * p)), &d2phi);
    r.axpy(s2 * 0.5 * t.b / (p * p), &v.second_difference()?);
    r.axpy(-s2 / p, &dgqg.first_difference()?);
    r.axpy(s2 * dp / (p * p), &gqg_x);
    r.axpy(s2, &model.dh_apply(kernel.q_at_zero(), phi, v));
    Ok(r)
}

#[derive(Clone, Copy, Debug)]
pub struct StochNewtonOptions {
    pub tol: f64,
    pub step_tol: f64,
    pub max_iter: usize,
    pub max_sigma_step: f64,
    pub gmres_restart: usize,
    pub gmres_max_iter: usize,
}

impl Default for StochNewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            step_tol: 1e-12,
            max_iter: 50,
            max_sigma_step: 0.1,
            gmres_restart: 40,
            gmres_max_iter: 400,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StochWaveResult {
    pub sigma: f64,
    pub phi: Profile,
    pub c: f64,
    pub newton_steps: usize,
    pub residual: f64,
}

/// Restarted, right-preconditioned GMRES for `A x = b`, `x0 = 0`.
pub fn gmres(
    apply: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    precond: &dyn Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    restart: usize,
    max_iter: usize,
    rtol: f64,
) -> Result<(Vec<f64>, f64)> {
    let n = b.len();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let bnorm = norm(b);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok((x, 0.0));
    }
    let mut total = 0;
    let mut rel = 1.0;
    while total < max_iter {
        let ax = apply(&x)?;
        let r: Vec<f64> = b.iter().zip(&ax).map(|(a, c)| a - c).collect();
        let beta = norm(&r);
        rel = beta / bnorm;
        if rel <= rtol {
            break;
        }
        let m = restart.min(max_iter - total);
        let mut v: Vec<Vec<f64>> = vec![r.iter().map(|t| t / beta).collect()];
        let mut z: Vec<Vec<f64>> = Vec::with_capacity(m);
        let mut h = vec![vec![0.0; m]; m + 1];
        let (mut cs, mut sn) = (vec![0.0; m], vec![0.0; m]);
        let mut gvec = vec![0.0; m + 1];
        gvec[0] = beta;
        let mut k_used = 0;
        for j in 0..m {
            let zj = precond(&v[j]);
            let mut w = apply(&zj)?;
            z.push(zj);
            for i in 0..=j {
                let d: f64 = v[i].iter().zip(&w).map(|(a, b)| a * b).sum();
                h[i][j] = d;
                w.iter_mut().zip(&v[i]).for_each(|(a, b)| *a -= d * b);
            }
            let hn = norm(&w);
            h[j + 1][j] = hn;
            for i in 0..j {
                let t = cs[i] * h[i][j] + sn[i] * h[i + 1][j];
                h[i + 1][j] = -sn[i] * h[i][j] + cs[i] * h[i + 1][j];
                h[i][j] = t;
            }
            let d = h[j][j].hypot(h[j + 1][j]);
            cs[j] = h[j][j] / d;
            sn[j] = h[j + 1][j] / d;
            h[j][j] = d;
            h[j + 1][j] = 0.0;
            gvec[j + 1] = -sn[j] * gvec[j];
            gvec[j] *= cs[j];
            k_used = j + 1;
            total += 1;
            rel = gvec[j + 1].abs() / bnorm;
            if rel <= rtol || hn == 0.0 {
                break;
            }
            v.push(w.iter().map(|t| t / hn).collect());
        }
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let mut s = gvec[i];
            for (k, yk) in y.iter().enumerate().take(k_used).skip(i + 1) {
                s -= h[i][k] * yk;
            }
            y[i] = s / h[i][i];
        }
        for (yi, zi) in y.iter().zip(&z) {
            x.iter_mut().zip(zi).for_each(|(a, b)| *a += yi * b);
        }
        if rel <= rtol {
            break;
        }
    }
    Ok((x, rel))
}

/// Newton-Krylov solve of `F_sigma(Phi, c) = 0`, `<Phi - Phi_0, psi> = 0`
/// from a given starting pair.
fn newton_from(
    model: &ModelSpec,
    kernel: &CovarianceKernel,
    wave: &WavePair,
    sigma: f64,
    start: (&Profile, f64),
    opts: &StochNewtonOptions,
) -> Result<StochWaveResult> {
    let grid = *wave.grid();
    let n = model.n();
    let psi = &wave.psi;
    let w = interleaved_weights(&grid, n);
    let cpsi: Vec<f64> = interleave(psi).iter().zip(&w).map(|(a, b)| a * b).collect();
    let mut phi = start.0.clone();
    let mut c = start.1;
    let s2 = sigma * sigma;
    let q0 = kernel.q_at_zero();
    let mut res = f64::INFINITY;
    for it in 0..=opts.max_iter {
        let f = f_sigma(model, kernel, psi, &phi, c, sigma)?;
        let ph = phi.sub(&wave.phi).dot(psi);
        res = f.max_abs().max(ph.abs());
        if !res.is_finite() {
            break;
        }
        if res <= opts.tol {
            return Ok(StochWaveResult {
                sigma,
                phi,
                c,
                newton_steps: it,
                residual: res,
            });
        }
        if it == opts.max_iter {
            break;
        }
        // Local part of the Jacobian: diffusion augmented by the Phi'' term.
        let t = noise_terms(model, kernel, psi, &phi)?;
        let extra = s2 * 0.5 * t.b / (t.pairing * t.pairing);
        let diff: Vec<f64> = model.rho.iter().map(|r| r + extra).collect();
        let mut h_diag = vec![0.0; n * grid.len()];
        if model.mu() != 0.0 && s2 != 0.0 {
            let ones = Profile::from_fn(grid, n, |_, _| 1.0);
            h_diag = interleave(&model.dh_apply(q0, &phi, &ones));
        }
        let jac = assemble_operator(&grid, n, &diff, c, |i, out| {
            let u = model.at(&phi, i);
            model.kinetics.df(&u[..n], out);
            for a in 0..n {
                out[a * n + a] += s2 * h_diag[i * n + a];
            }
        })?;
        let dphi = interleave(&model.d1(&phi));
        let pre = BorderedSolver::new(&jac, &dphi, &cpsi).map_err(|_| Error::DegenerateJacobian)?;
        let dim = n * grid.len();
        let precond = |r: &[f64]| -> Vec<f64> {
            let mut u = r[..dim].to_vec();
            let s = pre.solve(&mut u, r[dim]);
            u.push(s);
            u
        };
        let mut apply = |z: &[f64]| -> Result<Vec<f64>> {
            let v = deinterleave(&z[..dim], grid, n);
            let jv = f_sigma_jv(model, kernel, psi, &phi, c, sigma, &v, z[dim])?;
            let mut out = interleave(&jv);
            out.push(v.dot(psi));
            Ok(out)
        };
        let mut rhs: Vec<f64> = interleave(&f).iter().map(|x| -x).collect();
        rhs.push(-ph);
        let (dz, _) = gmres(
            &mut apply,
            &precond,
            &rhs,
            opts.gmres_restart,
            opts.gmres_max_iter,
            1e-13,
        )?;
        let step = dz.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        phi.axpy(1.0, &deinterleave(&dz[..dim], grid, n));
        c += dz[dim];
        if !phi.is_finite() || !c.is_finite() {
            break;
        }
        if step <= opts.step_tol {
            let f = f_sigma(model, kernel, psi, &phi, c, sigma)?;
            let ph = phi.sub(&wave.phi).dot(psi);
            res = f.max_abs().max(ph.abs());
            if res <= opts.tol * 10.0 {
                return Ok(StochWaveResult {
                    sigma,
                    phi,
                    c,
                    newton_steps: it + 1,
                    residual: res,
                });
            }
        }
    }
    Err(Error::NewtonDiverged {
        iterations: opts.max_iter,
        residual: res,
        last_sigma: sigma,
    })
}

/// Solves for `(Phi_sigma, c_sigma)`; falls back to continuation in sigma
/// with a secant predictor when Newton from `(Phi_0, c_0)` fails.
pub fn solve_instantaneous_wave(
    model: &ModelSpec,
    kernel: &CovarianceKernel,
    wave: &WavePair,
    sigma: f64,
    opts: &StochNewtonOptions,
) -> Result<StochWaveResult> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!("sigma = {sigma}")));
    }
    if let Ok(r) = newton_from(model, kernel, wave, sigma, (&wave.phi, wave.c), opts) {
        return Ok(r);
    }
    let mut prev: Option<StochWaveResult> = None;
    let mut cur = StochWaveResult {
        sigma: 0.0,
        phi: wave.phi.clone(),
        c: wave.c,
        newton_steps: 0,
        residual: 0.0,
    };
    let mut h = opts.max_sigma_step;
    while cur.sigma < sigma {
        let target = (cur.sigma + h).min(sigma);
        let (guess_phi, guess_c) = match &prev {
            Some(p) if cur.sigma > p.sigma => {
                let t = (target - cur.sigma) / (cur.sigma - p.sigma);
                let mut g = cur.phi.clone();
                g.axpy(t, &cur.phi.sub(&p.phi));
                (g, cur.c + t * (cur.c - p.c))
            }
            _ => (cur.phi.clone(), cur.c),
        };
        match newton_from(model, kernel, wave, target, (&guess_phi, guess_c), opts) {
            Ok(r) => {
                prev = Some(std::mem::replace(&mut cur, r));
                h = (h * 1.5).min(opts.max_sigma_step);
            }
            Err(e) => {
                h *= 0.5;
                if h < 1e-3 {
                    return Err(match e {
                        Error::NewtonDiverged {
                            iterations, residual, ..
                        } => Error::NewtonDiverged {
                            iterations,
                            residual,
                            last_sigma: cur.sigma,
                        },
                        other => other,
                    });
                }
            }
        }
    }
    Ok(cur)
}

#[derive(Clone, Debug)]
pub struct SecondOrder {
    pub c02: f64,
    pub phi02: Profile,
    /// Bordered multiplier; zero up to round-off when the right-hand side is
    /// compatible.
    pub multiplier: f64,
    /// `<F_{0;2} + c_{0;2} Phi', psi>`
    pub compatibility: f64,
}

/// `c_{0;2} = -<F_{0;2}(Phi_0), psi>` and `Phi_{0;2}` from
/// `L Phi_{0;2} = -F_{0;2} - c_{0;2} Phi_0'`.
pub fn expand_second_order(model: &ModelSpec, kernel: &CovarianceKernel, wave: &WavePair) -> Result<SecondOrder> {
    let f = f02(model, kernel, &wave.psi, &wave.phi)?;
    let c02 = -f.dot(&wave.psi);
    let mut rhs = f.scaled(-1.0);
    rhs.axpy(-c02, &wave.dphi);
    let compatibility = -rhs.dot(&wave.psi);
    let (phi02, multiplier) = wave.fredholm()?.solve(&rhs)?;
    Ok(SecondOrder {
        c02,
        phi02,
        multiplier,
        compatibility,
    })
}

#[derive(Clone, Debug)]
pub struct SneWave {
    pub phi: Profile,
    pub c: f64,
    pub a_eff: f64,
}

/// Small-noise-expansion wave of the Stratonovich Nagumo equation (rho = 1).
pub fn sne_wave(grid: &Grid, a: f64, sigma: f64, q0: f64) -> Result<SneWave> {
    let s = sigma * sigma * q0;
    if !(s < 1.0) {
        return Err(Error::SneOutOfRange(s));
    }
    let a_eff = (2.0 * a - s) / (2.0 - 2.0 * s);
    if !(0.0..=1.0).contains(&a_eff) {
        return Err(Error::InvalidParameter(format!("a_eff = {a_eff} outside [0, 1]")));
    }
    let k = (1.0 - s).sqrt() / (2.0 * 2f64.sqrt());
    let phi = Profile::from_fn(*grid, 1, |_, x| 0.5 * (1.0 - (k * x).tanh()));
    let c = (2.0 * (1.0 - s)).sqrt() * (0.5 - a_eff);
    Ok(SneWave { phi, c, a_eff })
}
