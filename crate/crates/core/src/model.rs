//! Reaction-diffusion models: kinetics, noise coefficient, equilibria.

use std::fmt::Debug;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Profile;

/// Largest supported number of components.
pub const MAX_COMP: usize = 4;

/// Pointwise kinetics of an n-component system with diagonal noise coefficient
/// `g(u) = diag(g_1(u), .., g_n(u))`.
///
/// Matrices are row-major `n x n`, entry `[a * n + b] = d(.)_a / du_b`.
pub trait Kinetics: Send + Sync + Debug {
    fn name(&self) -> &str;
    fn n(&self) -> usize;
    fn f(&self, u: &[f64], out: &mut [f64]);
    fn df(&self, u: &[f64], out: &mut [f64]);
    /// D^2 f(u)[v, w].
    fn d2f(&self, u: &[f64], v: &[f64], w: &[f64], out: &mut [f64]);
    fn g(&self, u: &[f64], out: &mut [f64]);
    fn dg(&self, u: &[f64], out: &mut [f64]);
    /// d^2 g_a / du_a^2, used by the derivative of the Stratonovich correction.
    fn d2g_diag(&self, u: &[f64], out: &mut [f64]);
    /// Whether component `a` receives noise at all.
    fn noisy(&self, a: usize) -> bool {
        let _ = a;
        true
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpretation {
    Ito,
    Stratonovich,
}

impl Interpretation {
    pub fn mu(self) -> f64 {
        match self {
            Interpretation::Ito => 0.0,
            Interpretation::Stratonovich => 1.0,
        }
    }
}

/// Scalar Nagumo kinetics `f = u(1-u)(u-a)`, `g = u(1-u)`.
#[derive(Clone, Debug)]
pub struct Nagumo {
    pub a: f64,
}

impl Kinetics for Nagumo {
    fn name(&self) -> &str {
        "nagumo"
    }
    fn n(&self) -> usize {
        1
    }
    fn f(&self, u: &[f64], out: &mut [f64]) {
        let x = u[0];
        out[0] = x * (1.0 - x) * (x - self.a);
    }
    fn df(&self, u: &[f64], out: &mut [f64]) {
        let x = u[0];
        out[0] = -3.0 * x * x + 2.0 * (1.0 + self.a) * x - self.a;
    }
    fn d2f(&self, u: &[f64], v: &[f64], w: &[f64], out: &mut [f64]) {
        out[0] = (-6.0 * u[0] + 2.0 * (1.0 + self.a)) * v[0] * w[0];
    }
    fn g(&self, u: &[f64], out: &mut [f64]) {
        out[0] = u[0] * (1.0 - u[0]);
    }
    fn dg(&self, u: &[f64], out: &mut [f64]) {
        out[0] = 1.0 - 2.0 * u[0];
    }
    fn d2g_diag(&self, _u: &[f64], out: &mut [f64]) {
        out[0] = -2.0;
    }
}

/// FitzHugh-Nagumo kinetics
/// `f = (u(1-u)(u-a) - w, eps (u - gamma w))`, `g = diag(u, 0)`.
#[derive(Clone, Debug)]
pub struct FitzHughNagumo {
    pub a: f64,
    pub epsilon: f64,
    pub gamma: f64,
}

impl Kinetics for FitzHughNagumo {
    fn name(&self) -> &str {
        "fhn"
    }
    fn n(&self) -> usize {
        2
    }
    fn f(&self, u: &[f64], out: &mut [f64]) {
        let (x, w) = (u[0], u[1]);
        out[0] = x * (1.0 - x) * (x - self.a) - w;
        out[1] = self.epsilon * (x - self.gamma * w);
    }
    fn df(&self, u: &[f64], out: &mut [f64]) {
        let x = u[0];
        out[0] = -3.0 * x * x + 2.0 * (1.0 + self.a) * x - self.a;
        out[1] = -1.0;
        out[2] = self.epsilon;
        out[3] = -self.epsilon * self.gamma;
    }
    fn d2f(&self, u: &[f64], v: &[f64], w: &[f64], out: &mut [f64]) {
        out[0] = (-6.0 * u[0] + 2.0 * (1.0 + self.a)) * v[0] * w[0];
        out[1] = 0.0;
    }
    fn g(&self, u: &[f64], out: &mut [f64]) {
        out[0] = u[0];
        out[1] = 0.0;
    }
    fn dg(&self, _u: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        out[1] = 0.0;
        out[2] = 0.0;
        out[3] = 0.0;
    }
    fn d2g_diag(&self, _u: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = 0.0;
    }
    fn noisy(&self, a: usize) -> bool {
        a == 0
    }
}

#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub kinetics: Arc<dyn Kinetics>,
    /// Diagonal diffusion coefficients.
    pub rho: Vec<f64>,
    pub interpretation: Interpretation,
    /// Limits at x -> -inf and x -> +inf.
    pub u_minus: Vec<f64>,
    pub u_plus: Vec<f64>,
}

impl ModelSpec {
    pub fn nagumo(a: f64, rho: f64, interpretation: Interpretation) -> Result<Self> {
        if !(a > 0.0 && a < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "nagumo detuning a = {a} outside (0, 1)"
            )));
        }
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::InvalidParameter(format!("rho = {rho}")));
        }
        Ok(Self {
            kinetics: Arc::new(Nagumo { a }),
            rho: vec![rho],
            interpretation,
            u_minus: vec![1.0],
            u_plus: vec![0.0],
        })
    }

    /// `rho_w` is the diffusion of the recovery variable, `epsilon` its rate.
    pub fn fhn(a: f64, rho_w: f64, epsilon: f64, gamma: f64, interpretation: Interpretation) -> Result<Self> {
        if !(a > 0.0 && a < 1.0) {
            return Err(Error::InvalidParameter(format!("fhn a = {a} outside (0, 1)")));
        }
        if !(rho_w > 0.0 && epsilon > 0.0 && gamma > 0.0) {
            return Err(Error::InvalidParameter(
                "fhn rho_w, epsilon, gamma must be positive".into(),
            ));
        }
        Ok(Self {
            kinetics: Arc::new(FitzHughNagumo { a, epsilon, gamma }),
            rho: vec![1.0, rho_w],
            interpretation,
            u_minus: vec![0.0, 0.0],
            u_plus: vec![0.0, 0.0],
        })
    }

    pub fn custom(
        kinetics: Arc<dyn Kinetics>,
        rho: Vec<f64>,
        interpretation: Interpretation,
        u_minus: Vec<f64>,
        u_plus: Vec<f64>,
    ) -> Result<Self> {
        let n = kinetics.n();
        if n == 0 || n > MAX_COMP || rho.len() != n || u_minus.len() != n || u_plus.len() != n {
            return Err(Error::InvalidParameter("component counts disagree".into()));
        }
        if rho.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::InvalidParameter("rho must be strictly positive".into()));
        }
        Ok(Self {
            kinetics,
            rho,
            interpretation,
            u_minus,
            u_plus,
        })
    }

    pub fn n(&self) -> usize {
        self.kinetics.n()
    }

    pub fn mu(&self) -> f64 {
        self.interpretation.mu()
    }

    pub fn with_interpretation(&self, interpretation: Interpretation) -> Self {
        let mut m = self.clone();
        m.interpretation = interpretation;
        m
    }

    /// Checks `f(u_pm) = g(u_pm) = 0`, diagonal noise, positive diffusion and
    /// the derivative callbacks against central differences.
    pub fn check_hypotheses(&self) -> Result<()> {
        let n = self.n();
        if self.rho.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::Hypothesis("diffusion matrix not strictly positive".into()));
        }
        let mut f = [0.0; MAX_COMP];
        let mut g = [0.0; MAX_COMP];
        for u in [&self.u_minus, &self.u_plus] {
            self.kinetics.f(u, &mut f[..n]);
            self.kinetics.g(u, &mut g[..n]);
            let r: f64 = f[..n].iter().chain(&g[..n]).map(|v| v.abs()).sum();
            if r > 1e-12 {
                return Err(Error::Hypothesis(format!("equilibrium residual {r:e} at {u:?}")));
            }
        }
        // Derivative consistency at a few deterministic sample points.
        let h = 1e-5;
        for s in 0..7 {
            let mut u = [0.0; MAX_COMP];
            for (a, ua) in u.iter_mut().enumerate().take(n) {
                let t = ((s * 7 + a * 3) % 11) as f64 / 10.0;
                *ua = self.u_minus[a] + t * (self.u_plus[a] - self.u_minus[a]) + 0.1 * (t - 0.5);
            }
            let mut jac = [0.0; MAX_COMP * MAX_COMP];
            self.kinetics.df(&u[..n], &mut jac[..n * n]);
            let mut gj = [0.0; MAX_COMP * MAX_COMP];
            self.kinetics.dg(&u[..n], &mut gj[..n * n]);
            for b in 0..n {
                let (mut up, mut um) = (u, u);
                up[b] += h;
                um[b] -= h;
                let (mut fp, mut fm) = ([0.0; MAX_COMP], [0.0; MAX_COMP]);
                self.kinetics.f(&up[..n], &mut fp[..n]);
                self.kinetics.f(&um[..n], &mut fm[..n]);
                let (mut gp, mut gm) = ([0.0; MAX_COMP], [0.0; MAX_COMP]);
                self.kinetics.g(&up[..n], &mut gp[..n]);
                self.kinetics.g(&um[..n], &mut gm[..n]);
                let mut e = [0.0; MAX_COMP];
                e[b] = 1.0;
                let mut d2 = [0.0; MAX_COMP];
                let (mut jp, mut jm) = ([0.0; MAX_COMP * MAX_COMP], [0.0; MAX_COMP * MAX_COMP]);
                self.kinetics.df(&up[..n], &mut jp[..n * n]);
                self.kinetics.df(&um[..n], &mut jm[..n * n]);
                for a in 0..n {
                    let fd = (fp[a] - fm[a]) / (2.0 * h);
                    let an = jac[a * n + b];
                    if (fd - an).abs() > 1e-5 * (1.0 + an.abs()) {
                        return Err(Error::Hypothesis(format!("Df[{a}][{b}] inconsistent with f")));
                    }
                    let gd = (gp[a] - gm[a]) / (2.0 * h);
                    if (gd - gj[a * n + b]).abs() > 1e-5 * (1.0 + gd.abs()) {
                        return Err(Error::Hypothesis(format!("Dg[{a}][{b}] inconsistent with g")));
                    }
                }
                // D2f[e_b, e_c] against differences of Df
                for c in 0..n {
                    let mut ec = [0.0; MAX_COMP];
                    ec[c] = 1.0;
                    self.kinetics.d2f(&u[..n], &e[..n], &ec[..n], &mut d2[..n]);
                    for a in 0..n {
                        let fd = (jp[a * n + c] - jm[a * n + c]) / (2.0 * h);
                        if (fd - d2[a]).abs() > 1e-5 * (1.0 + fd.abs()) {
                            return Err(Error::Hypothesis(format!("D2f inconsistent with Df at ({a},{b},{c})")));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Node values of all components at grid index `i`.
    #[inline]
    pub fn at(&self, p: &Profile, i: usize) -> [f64; MAX_COMP] {
        let mut u = [0.0; MAX_COMP];
        let n = p.grid().len();
        let v = p.values();
        for (c, uc) in u.iter_mut().enumerate().take(p.ncomp()) {
            *uc = v[c * n + i];
        }
        u
    }

    fn map_pointwise(&self, u: &Profile, mut op: impl FnMut(&[f64], &mut [f64])) -> Profile {
        let n = self.n();
        let len = u.grid().len();
        let mut out = Profile::zeros(*u.grid(), n);
        let mut r = [0.0; MAX_COMP];
        for i in 0..len {
            let ui = self.at(u, i);
            op(&ui[..n], &mut r[..n]);
            let o = out.values_mut();
            for c in 0..n {
                o[c * len + i] = r[c];
            }
        }
        out
    }

    pub fn f_profile(&self, u: &Profile) -> Profile {
        self.map_pointwise(u, |x, o| self.kinetics.f(x, o))
    }

    /// Diagonal entries of g(U) as a profile.
    pub fn g_profile(&self, u: &Profile) -> Profile {
        self.map_pointwise(u, |x, o| self.kinetics.g(x, o))
    }

    /// Df(U)[v].
    pub fn df_apply(&self, u: &Profile, v: &Profile) -> Profile {
        let n = self.n();
        let len = u.grid().len();
        let mut out = Profile::zeros(*u.grid(), n);
        let mut jac = [0.0; MAX_COMP * MAX_COMP];
        for i in 0..len {
            let ui = self.at(u, i);
            let vi = self.at(v, i);
            self.kinetics.df(&ui[..n], &mut jac[..n * n]);
            let o = out.values_mut();
            for a in 0..n {
                o[a * len + i] = (0..n).map(|b| jac[a * n + b] * vi[b]).sum();
            }
        }
        out
    }

    /// D^2 f(U)[v, w].
    pub fn d2f_apply(&self, u: &Profile, v: &Profile, w: &Profile) -> Profile {
        let n = self.n();
        let len = u.grid().len();
        let mut out = Profile::zeros(*u.grid(), n);
        let mut r = [0.0; MAX_COMP];
        for i in 0..len {
            let ui = self.at(u, i);
            let vi = self.at(v, i);
            let wi = self.at(w, i);
            self.kinetics.d2f(&ui[..n], &vi[..n], &wi[..n], &mut r[..n]);
            let o = out.values_mut();
            for a in 0..n {
                o[a * len + i] = r[a];
            }
        }
        out
    }

    /// Dg(U)[v] as diagonal entries.
    pub fn dg_apply(&self, u: &Profile, v: &Profile) -> Profile {
        let n = self.n();
        let len = u.grid().len();
        let mut out = Profile::zeros(*u.grid(), n);
        let mut jac = [0.0; MAX_COMP * MAX_COMP];
        for i in 0..len {
            let ui = self.at(u, i);
            let vi = self.at(v, i);
            self.kinetics.dg(&ui[..n], &mut jac[..n * n]);
            let o = out.values_mut();
            for a in 0..n {
                o[a * len + i] = (0..n).map(|b| jac[a * n + b] * vi[b]).sum();
            }
        }
        out
    }

    fn check_diagonal_noise(&self, u: &Profile) -> Result<()> {
        let n = self.n();
        let mut jac = [0.0; MAX_COMP * MAX_COMP];
        for i in 0..u.grid().len() {
            let ui = self.at(u, i);
            self.kinetics.dg(&ui[..n], &mut jac[..n * n]);
            for a in 0..n {
                for b in 0..n {
                    if a != b && jac[a * n + b] != 0.0 {
                        return Err(Error::UnsupportedCorrection);
                    }
                }
            }
        }
        Ok(())
    }

    /// `1/2 q(0) g_a'(U) g_a(U)` per component, without the interpretation
    /// factor.
    pub fn ito_stratonovich_correction(&self, q0: f64, u: &Profile) -> Result<Profile> {
        self.check_diagonal_noise(u)?;
        let n = self.n();
        let mut jac = [0.0; MAX_COMP * MAX_COMP];
        let mut g = [0.0; MAX_COMP];
        Ok(self.map_pointwise(u, |x, o| {
            self.kinetics.dg(x, &mut jac[..n * n]);
            self.kinetics.g(x, &mut g[..n]);
            for a in 0..n {
                o[a] = 0.5 * q0 * jac[a * n + a] * g[a];
            }
        }))
    }

    /// Drift correction `h(U) = mu * 1/2 q(0) g' g` entering the Ito form.
    pub fn h_profile(&self, q0: f64, u: &Profile) -> Result<Profile> {
        if self.mu() == 0.0 {
            return Ok(Profile::zeros(*u.grid(), self.n()));
        }
        let mut h = self.ito_stratonovich_correction(q0, u)?;
        h.scale(self.mu());
        Ok(h)
    }

    /// Dh(U)[v] for diagonal noise.
    pub fn dh_apply(&self, q0: f64, u: &Profile, v: &Profile) -> Profile {
        let n = self.n();
        let len = u.grid().len();
        let mut out = Profile::zeros(*u.grid(), n);
        if self.mu() == 0.0 {
            return out;
        }
        let mut jac = [0.0; MAX_COMP * MAX_COMP];
        let mut g = [0.0; MAX_COMP];
        let mut g2 = [0.0; MAX_COMP];
        for i in 0..len {
            let ui = self.at(u, i);
            self.kinetics.dg(&ui[..n], &mut jac[..n * n]);
            self.kinetics.g(&ui[..n], &mut g[..n]);
            self.kinetics.d2g_diag(&ui[..n], &mut g2[..n]);
            let o = out.values_mut();
            for a in 0..n {
                let d = g2[a] * g[a] + jac[a * n + a] * jac[a * n + a];
                o[a * len + i] = self.mu() * 0.5 * q0 * d * v.values()[a * len + i];
            }
        }
        out
    }

    /// U' with ghost values `u_minus`, `u_plus`.
    pub fn d1(&self, u: &Profile) -> Profile {
        let g = *u.grid();
        let len = g.len();
        let mut out = Profile::zeros(g, u.ncomp());
        for c in 0..u.ncomp() {
            let (l, r) = ghost(self, c);
            g.d1_with_ghosts(u.component(c), l, r, &mut out.values_mut()[c * len..(c + 1) * len]);
        }
        out
    }

    /// U'' with ghost values `u_minus`, `u_plus`.
    pub fn d2(&self, u: &Profile) -> Profile {
        let g = *u.grid();
        let len = g.len();
        let mut out = Profile::zeros(g, u.ncomp());
        for c in 0..u.ncomp() {
            let (l, r) = ghost(self, c);
            g.d2_with_ghosts(u.component(c), l, r, &mut out.values_mut()[c * len..(c + 1) * len]);
        }
        out
    }

    /// `T_gamma U = U(x - gamma)` with the model limits as extension.
    pub fn shift(&self, u: &Profile, gamma: f64) -> Result<Profile> {
        let g = *u.grid();
        let len = g.len();
        let mut out = Profile::zeros(g, u.ncomp());
        for c in 0..u.ncomp() {
            let (l, r) = ghost(self, c);
            g.shift_with_ghosts(
                u.component(c),
                gamma,
                l,
                r,
                &mut out.values_mut()[c * len..(c + 1) * len],
            )?;
        }
        Ok(out)
    }

    /// Profile equal to `u_minus` / `u_plus` left and right of zero.
    pub fn step_profile(&self, grid: crate::grid::Grid) -> Profile {
        Profile::from_fn(
            grid,
            self.n(),
            |c, x| if x < 0.0 { self.u_minus[c] } else { self.u_plus[c] },
        )
    }
}

fn ghost(m: &ModelSpec, c: usize) -> (f64, f64) {
    if c < m.u_minus.len() {
        (m.u_minus[c], m.u_plus[c])
    } else {
        (0.0, 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    #[test]
    fn builtin_models_pass_hypotheses() {
        ModelSpec::nagumo(0.25, 1.0, Interpretation::Ito)
            .unwrap()
            .check_hypotheses()
            .unwrap();
        ModelSpec::fhn(0.1, 0.01, 0.01, 5.0, Interpretation::Ito)
            .unwrap()
            .check_hypotheses()
            .unwrap();
        assert!(ModelSpec::nagumo(1.2, 1.0, Interpretation::Ito).is_err());
    }

    #[test]
    fn nagumo_correction_closed_form() {
        let m = ModelSpec::nagumo(0.25, 1.0, Interpretation::Stratonovich).unwrap();
        let g = Grid::dirichlet(10.0, 64).unwrap();
        let u = Profile::from_fn(g, 1, |_, x| 0.5 * (1.0 + (x / 3.0).tanh()));
        let h = m.ito_stratonovich_correction(0.5, &u).unwrap();
        for i in 0..64 {
            let x = u.values()[i];
            let want = 0.25 * (1.0 - 2.0 * x) * x * (1.0 - x);
            assert!((h.values()[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn fhn_correction_w_component_zero() {
        let m = ModelSpec::fhn(0.1, 0.01, 0.01, 5.0, Interpretation::Stratonovich).unwrap();
        let g = Grid::dirichlet(10.0, 32).unwrap();
        let u = Profile::from_fn(g, 2, |c, x| if c == 0 { (-x * x).exp() } else { 0.1 });
        let h = m.ito_stratonovich_correction(0.5, &u).unwrap();
        assert!(h.component(1).iter().all(|v| *v == 0.0));
        for i in 0..32 {
            assert!((h.component(0)[i] - 0.25 * u.component(0)[i]).abs() < 1e-15);
        }
    }

    #[derive(Debug)]
    struct Coupled;
    impl Kinetics for Coupled {
        fn name(&self) -> &str {
            "coupled"
        }
        fn n(&self) -> usize {
            2
        }
        fn f(&self, _: &[f64], o: &mut [f64]) {
            o.fill(0.0)
        }
        fn df(&self, _: &[f64], o: &mut [f64]) {
            o.fill(0.0)
        }
        fn d2f(&self, _: &[f64], _: &[f64], _: &[f64], o: &mut [f64]) {
            o.fill(0.0)
        }
        fn g(&self, u: &[f64], o: &mut [f64]) {
            o[0] = u[1];
            o[1] = 0.0;
        }
        fn dg(&self, _: &[f64], o: &mut [f64]) {
            o.copy_from_slice(&[0.0, 1.0, 0.0, 0.0]);
        }
        fn d2g_diag(&self, _: &[f64], o: &mut [f64]) {
            o.fill(0.0)
        }
    }

    #[test]
    fn coupled_noise_rejected() {
        let m = ModelSpec::custom(
            Arc::new(Coupled),
            vec![1.0, 1.0],
            Interpretation::Stratonovich,
            vec![0.0; 2],
            vec![0.0; 2],
        )
        .unwrap();
        let g = Grid::dirichlet(10.0, 32).unwrap();
        let u = Profile::zeros(g, 2);
        assert!(matches!(
            m.ito_stratonovich_correction(0.5, &u),
            Err(Error::UnsupportedCorrection)
        ));
    }

    #[test]
    fn constant_g_gives_zero_correction() {
        #[derive(Debug)]
        struct Additive;
        impl Kinetics for Additive {
            fn name(&self) -> &str {
                "additive"
            }
            fn n(&self) -> usize {
                1
            }
            fn f(&self, _: &[f64], o: &mut [f64]) {
                o[0] = 0.0
            }
            fn df(&self, _: &[f64], o: &mut [f64]) {
                o[0] = 0.0
            }
            fn d2f(&self, _: &[f64], _: &[f64], _: &[f64], o: &mut [f64]) {
                o[0] = 0.0
            }
            fn g(&self, _: &[f64], o: &mut [f64]) {
                o[0] = 2.0
            }
            fn dg(&self, _: &[f64], o: &mut [f64]) {
                o[0] = 0.0
            }
            fn d2g_diag(&self, _: &[f64], o: &mut [f64]) {
                o[0] = 0.0
            }
        }
        let m = ModelSpec::custom(
            Arc::new(Additive),
            vec![1.0],
            Interpretation::Stratonovich,
            vec![0.0],
            vec![0.0],
        )
        .unwrap();
        let g = Grid::dirichlet(10.0, 32).unwrap();
        let u = Profile::from_fn(g, 1, |_, x| x.sin());
        let h = m.ito_stratonovich_correction(0.5, &u).unwrap();
        assert!(h.values().iter().all(|v| *v == 0.0));
    }
}
