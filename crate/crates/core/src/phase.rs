//! Phase functionals `a` and `b` of the stochastic phase equation, guarded by
//! smooth cutoffs.

use std::sync::Arc;

use crate::error::Result;
use crate::grid::Profile;
use crate::model::ModelSpec;
use crate::noise::CovarianceKernel;

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// `1/4` below `1/4`, identity above `1/2`, smoothstep blend in between.
pub fn cutoff_low(theta: f64) -> f64 {
    if theta <= 0.25 {
        0.25
    } else if theta >= 0.5 {
        theta
    } else {
        let s = smoothstep((theta - 0.25) / 0.25);
        0.25 * (1.0 - s) + theta * s
    }
}

/// `1` up to `k_up`, `0` from `k_up + 1`.
pub fn cutoff_high(theta: f64, k_up: f64) -> f64 {
    1.0 - smoothstep(theta - k_up)
}

/// Everything needed to evaluate the phase functionals around a wave
/// `(Phi_sigma, c_sigma)` with fixed adjoint `psi`.
#[derive(Clone, Debug)]
pub struct PhaseContext {
    pub model: ModelSpec,
    pub kernel: Arc<CovarianceKernel>,
    pub phi: Profile,
    pub c: f64,
    pub sigma: f64,
    pub psi: Profile,
    pub phi_ref: Profile,
    pub k_up: f64,
}

#[derive(Clone, Debug)]
pub struct PhaseEval {
    pub a: f64,
    pub chi_low: f64,
    pub chi_high: f64,
    /// `<U', psi>`
    pub pairing: f64,
    /// `||b||_HS^2`
    pub b_hs_sq: f64,
    /// `g(U)^T psi`
    pub gpsi: Profile,
    /// `b[w] = b_scale <g^T psi, w>`
    pub b_scale: f64,
    /// `K_sigma(U, 0, c_sigma)`
    pub drift: Profile,
    pub du: Profile,
}

impl PhaseEval {
    pub fn b_apply(&self, w: &Profile) -> f64 {
        self.b_scale * self.gpsi.dot(w)
    }
}

impl PhaseContext {
    /// Evaluates the functionals at `U` (wave coordinates).
    pub fn evaluate(&self, u: &Profile) -> Result<PhaseEval> {
        self.evaluate_with_psi(u, &self.psi)
    }

    /// Same, with the noise pairing done against `psi_b` (the shifted adjoint
    /// in lab coordinates).
    pub fn evaluate_with_psi(&self, u: &Profile, psi_b: &Profile) -> Result<PhaseEval> {
        let m = &self.model;
        let du = m.d1(u);
        let pairing = du.dot(&self.psi);
        let chi_l = 1.0 / cutoff_low(pairing);
        let chi_h = cutoff_high(u.sub(&self.phi_ref).norm(), self.k_up);
        let g = m.g_profile(u);
        let mut gpsi = g.clone();
        for (a, b) in gpsi.values_mut().iter_mut().zip(psi_b.values()) {
            *a *= b;
        }
        let s2 = self.sigma * self.sigma;
        let q_gpsi = self.kernel.convolve_q(&gpsi)?;
        let bb = q_gpsi.dot(&gpsi);
        let b_hs_sq = chi_h.powi(4) * chi_l * chi_l * bb;
        // K_sigma = c U' + rho U'' + f + sigma^2 (h + 1/2 |b|^2 U'' + K_C').
        let d2 = m.d2(u);
        let mut k = m.f_profile(u);
        k.axpy(self.c, &du);
        let len = u.grid().len();
        for a in 0..m.n() {
            let r = m.rho[a];
            for (kv, dv) in k.values_mut()[a * len..(a + 1) * len]
                .iter_mut()
                .zip(&d2.values()[a * len..(a + 1) * len])
            {
                *kv += r * dv;
            }
        }
        if s2 != 0.0 {
            k.axpy(s2, &m.h_profile(self.kernel.q_at_zero(), u)?);
            k.axpy(s2 * 0.5 * b_hs_sq, &d2);
            let mut kc = g;
            for (a, b) in kc.values_mut().iter_mut().zip(q_gpsi.values()) {
                *a *= b;
            }
            k.axpy(-s2 * chi_h * chi_h * chi_l, &kc.first_difference()?);
        }
        let a = -chi_l * k.dot(&self.psi);
        Ok(PhaseEval {
            a,
            chi_low: chi_l,
            chi_high: chi_h,
            pairing,
            b_hs_sq,
            gpsi,
            b_scale: -chi_h * chi_h * chi_l,
            drift: k,
            du,
        })
    }
}
