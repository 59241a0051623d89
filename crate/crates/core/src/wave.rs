//! Deterministic travelling waves, the linearisation about them, the adjoint
//! eigenfunction, spectral projection, semigroup and bordered solves.
//!
//! Operators act on interleaved vectors (`index = node * n + component`), which
//! keeps multi-component operators banded.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::banded::{BandLu, BandMatrix, BorderedSolver};
use crate::error::{Error, Result};
use crate::grid::{BoundaryMode, Grid, Profile};
use crate::model::{ModelSpec, MAX_COMP};

pub fn interleave(p: &Profile) -> Vec<f64> {
    let n = p.ncomp();
    let len = p.grid().len();
    let mut out = vec![0.0; n * len];
    for c in 0..n {
        for (i, v) in p.component(c).iter().enumerate() {
            out[i * n + c] = *v;
        }
    }
    out
}

pub fn deinterleave(v: &[f64], grid: Grid, n: usize) -> Profile {
    let len = grid.len();
    let mut p = Profile::zeros(grid, n);
    let vals = p.values_mut();
    for i in 0..len {
        for c in 0..n {
            vals[c * len + i] = v[i * n + c];
        }
    }
    p
}

/// Interleaved quadrature weights.
pub fn interleaved_weights(grid: &Grid, n: usize) -> Vec<f64> {
    let mut w = Vec::with_capacity(grid.len() * n);
    for i in 0..grid.len() {
        for _ in 0..n {
            w.push(grid.weight(i));
        }
    }
    w
}

/// Assembles `diag(diff) d_xx + adv d_x + J(x_i)` with zero ghosts.
/// `jac(i, out)` fills the row-major `n x n` block at node `i`.
pub fn assemble_operator(
    grid: &Grid,
    n: usize,
    diff: &[f64],
    adv: f64,
    mut jac: impl FnMut(usize, &mut [f64]),
) -> Result<BandMatrix> {
    if grid.boundary() == BoundaryMode::Periodic {
        return Err(Error::InvalidParameter("banded operators need a Dirichlet grid".into()));
    }
    let len = grid.len();
    let st = grid.stencil();
    let r = st.radius();
    let (d1, d2) = (st.d1(), st.d2());
    let dx = grid.dx();
    let band = r * n + n - 1;
    let mut m = BandMatrix::zeros(len * n, band, band);
    let mut block = [0.0; MAX_COMP * MAX_COMP];
    for i in 0..len {
        for k in 0..=2 * r {
            let j = i as isize + k as isize - r as isize;
            if j < 0 || j >= len as isize {
                continue;
            }
            let j = j as usize;
            for a in 0..n {
                let v = diff[a] * d2[k] / (dx * dx) + adv * d1[k] / dx;
                if v != 0.0 {
                    m.add(i * n + a, j * n + a, v);
                }
            }
        }
        block[..n * n].fill(0.0);
        jac(i, &mut block[..n * n]);
        for a in 0..n {
            for b in 0..n {
                if block[a * n + b] != 0.0 {
                    m.add(i * n + a, i * n + b, block[a * n + b]);
                }
            }
        }
    }
    Ok(m)
}

/// `rho U'' + c U' + f(U)` with the model limits as ghost values.
pub fn residual_f0(model: &ModelSpec, u: &Profile, c: f64) -> Profile {
    let mut r = model.d2(u);
    let n = model.n();
    let len = u.grid().len();
    for a in 0..n {
        r.component_mut(a).iter_mut().for_each(|v| *v *= model.rho[a]);
    }
    r.axpy(c, &model.d1(u));
    r.axpy(1.0, &model.f_profile(u));
    debug_assert_eq!(r.values().len(), n * len);
    r
}

/// The linear operator `rho d_xx + c d_x + Df(Phi)` and its discrete adjoint
/// `W^{-1} L^T W` with respect to the weighted inner product.
#[derive(Clone, Debug)]
pub struct Linearization {
    grid: Grid,
    n: usize,
    mat: BandMatrix,
    adj: BandMatrix,
}

impl Linearization {
    pub fn assemble(model: &ModelSpec, phi: &Profile, c: f64) -> Result<Self> {
        let n = model.n();
        let grid = *phi.grid();
        let mat = assemble_operator(&grid, n, &model.rho, c, |i, out| {
            let u = model.at(phi, i);
            model.kinetics.df(&u[..n], out);
        })?;
        let w = interleaved_weights(&grid, n);
        let mut adj = mat.transpose();
        let winv: Vec<f64> = w.iter().map(|v| 1.0 / v).collect();
        adj.scale_rows(&winv);
        adj.scale_cols(&w);
        Ok(Self { grid, n, mat, adj })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }
    pub fn ncomp(&self) -> usize {
        self.n
    }
    pub fn matrix(&self) -> &BandMatrix {
        &self.mat
    }
    pub fn adjoint_matrix(&self) -> &BandMatrix {
        &self.adj
    }

    pub fn apply(&self, v: &Profile) -> Profile {
        let x = interleave(v);
        let mut y = vec![0.0; x.len()];
        self.mat.matvec(&x, &mut y);
        deinterleave(&y, self.grid, self.n)
    }

    pub fn apply_adjoint(&self, v: &Profile) -> Profile {
        let x = interleave(v);
        let mut y = vec![0.0; x.len()];
        self.adj.matvec(&x, &mut y);
        deinterleave(&y, self.grid, self.n)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 50,
        }
    }
}

/// Closed-form Nagumo front `1/2 (1 - tanh(x / (2 sqrt(2 rho))))` and speed
/// `sqrt(2 rho) (1/2 - a)`.
pub fn nagumo_explicit(grid: &Grid, a: f64, rho: f64) -> Result<(Profile, f64)> {
    if !(a > 0.0 && a < 1.0) {
        return Err(Error::InvalidParameter(format!("a = {a} outside (0, 1)")));
    }
    if !(rho > 0.0) {
        return Err(Error::InvalidParameter(format!("rho = {rho}")));
    }
    let s = (2.0 * rho).sqrt();
    let phi = Profile::from_fn(*grid, 1, |_, x| 0.5 * (1.0 - (x / (2.0 * s)).tanh()));
    Ok((phi, s * (0.5 - a)))
}

/// Newton iteration for `rho Phi'' + c Phi' + f(Phi) = 0` with the phase
/// condition `<Phi - guess, guess'> = 0`.
pub fn solve_wave_bvp(model: &ModelSpec, guess: &Profile, guess_c: f64, opts: NewtonOptions) -> Result<(Profile, f64)> {
    let grid = *guess.grid();
    let n = model.n();
    if guess.ncomp() != n {
        return Err(Error::GridMismatch);
    }
    let gd = model.d1(guess);
    let w = interleaved_weights(&grid, n);
    let cvec: Vec<f64> = interleave(&gd).iter().zip(&w).map(|(a, b)| a * b).collect();
    let mut u = guess.clone();
    let mut c = guess_c;
    let mut last = f64::INFINITY;
    for it in 0..=opts.max_iter {
        let f = residual_f0(model, &u, c);
        let ph = u.sub(guess).dot(&gd);
        let res = f.max_abs().max(ph.abs());
        if !res.is_finite() {
            return Err(Error::NewtonDiverged {
                iterations: it,
                residual: res,
                last_sigma: 0.0,
            });
        }
        last = res;
        if res <= opts.tol {
            return Ok((u, c));
        }
        if it == opts.max_iter {
            break;
        }
        let lin = Linearization::assemble(model, &u, c)?;
        let b = interleave(&model.d1(&u));
        let solver = BorderedSolver::new(&lin.mat, &b, &cvec).map_err(|_| Error::DegenerateJacobian)?;
        let mut r: Vec<f64> = interleave(&f).iter().map(|v| -v).collect();
        let dc = solver.solve(&mut r, -ph);
        u.axpy(1.0, &deinterleave(&r, grid, n));
        c += dc;
    }
    Err(Error::NewtonDiverged {
        iterations: opts.max_iter,
        residual: last,
        last_sigma: 0.0,
    })
}

/// Options for building a pulse by co-moving time relaxation.
#[derive(Clone, Copy, Debug)]
pub struct RelaxOptions {
    pub dt: f64,
    pub steps: usize,
    pub recentre_every: usize,
    pub c_guess: f64,
    /// Target position of the pulse front, as a fraction of L.
    pub front_at: f64,
}

impl Default for RelaxOptions {
    fn default() -> Self {
        Self {
            dt: 0.05,
            steps: 16000,
            recentre_every: 200,
            c_guess: 0.45,
            front_at: 0.5,
        }
    }
}

/// Relaxes a box initial condition in a frame moving with a running speed
/// estimate; the first component's rightmost 1/2-crossing is pinned.
pub fn relax_pulse(model: &ModelSpec, grid: &Grid, opts: RelaxOptions) -> Result<(Profile, f64)> {
    let n = model.n();
    let len = grid.len();
    let x0 = opts.front_at * grid.half_length();
    let mut u = Profile::from_fn(
        *grid,
        n,
        |c, x| if c == 0 && (x - x0 + 3.0).abs() < 3.0 { 1.0 } else { 0.0 },
    );
    let mut c = opts.c_guess;
    let dt = opts.dt;
    let build = |c: f64| -> Result<BandLu> {
        let a = assemble_operator(grid, n, &model.rho, c, |_, _| {})?;
        a.affine(-dt, 1.0).factor()
    };
    let mut lu = build(c)?;
    for step in 0..opts.steps {
        let f = model.f_profile(&u);
        let mut rhs = interleave(&u);
        let fi = interleave(&f);
        for (r, fv) in rhs.iter_mut().zip(&fi) {
            *r += dt * fv;
        }
        lu.solve(&mut rhs);
        u = deinterleave(&rhs, *grid, n);
        if !u.is_finite() {
            return Err(Error::BlowUp(step as f64 * dt));
        }
        if (step + 1) % opts.recentre_every == 0 {
            let u0 = u.component(0);
            let Some(j) = (0..len - 1).rev().find(|&j| u0[j] > 0.5) else {
                return Err(Error::NewtonDiverged {
                    iterations: step,
                    residual: f64::NAN,
                    last_sigma: 0.0,
                });
            };
            let xf = grid.x(j) + (u0[j] - 0.5) / (u0[j] - u0[j + 1]) * grid.dx();
            let sh = xf - x0;
            let mut shifted = Profile::zeros(*grid, n);
            for cc in 0..n {
                let src = u.component(cc).to_vec();
                grid.shift_with_ghosts(&src, -sh, src[0], 0.0, shifted.component_mut(cc))?;
            }
            u = shifted;
            c += sh / (opts.recentre_every as f64 * dt);
            lu = build(c)?;
        }
    }
    Ok((u, c))
}

/// Adjoint null vector `psi` of `L*`, normalised so `<Phi', psi> = 1`.
pub fn adjoint_eigenfunction(lin: &Linearization, dphi: &Profile) -> Result<Profile> {
    let grid = *lin.grid();
    let n = lin.ncomp();
    let w = interleaved_weights(&grid, n);
    let b = interleave(dphi);
    let c: Vec<f64> = b.iter().zip(&w).map(|(x, y)| x * y).collect();
    let solver = BorderedSolver::new(&lin.adj, &b, &c)
        .map_err(|_| Error::NonSimpleKernel("bordered adjoint system singular".into()))?;
    let mut r = vec![0.0; b.len()];
    solver.solve(&mut r, 1.0);
    let psi = deinterleave(&r, grid, n);
    if !psi.is_finite() {
        return Err(Error::NonSimpleKernel("non-finite adjoint eigenfunction".into()));
    }
    Ok(psi)
}

/// Closed form `e^{c x / rho} Phi'` for scalar waves, normalised against `Phi'`.
pub fn scalar_psi_closed_form(dphi: &Profile, c: f64, rho: f64) -> Result<(Profile, f64)> {
    let grid = *dphi.grid();
    let raw = Profile::from_fn(grid, 1, |_, x| (c * x / rho).exp());
    let mut psi = raw.clone();
    for (p, d) in psi.values_mut().iter_mut().zip(dphi.values()) {
        *p *= d;
    }
    let pair = dphi.dot(&psi);
    if pair.abs() < 1e-300 {
        return Err(Error::PhasePairingDegenerate(pair));
    }
    psi.scale(1.0 / pair);
    Ok((psi, 1.0 / pair))
}

#[derive(Clone, Debug, Serialize)]
pub struct Spectrum {
    /// Eigenvalue closest to zero.
    pub lambda0: f64,
    /// Rightmost eigenvalues found, sorted by decreasing real part, `(re, im)`.
    pub eigenvalues: Vec<(f64, f64)>,
    /// Minus the largest real part away from the translational eigenvalue.
    pub beta: f64,
}

/// A deterministic wave with its adjoint eigenfunction.
#[derive(Clone, Debug)]
pub struct WavePair {
    pub phi: Profile,
    pub c: f64,
    pub dphi: Profile,
    pub psi: Profile,
    /// Normalisation constant of the scalar closed form, if scalar.
    pub kappa: Option<f64>,
    pub spectrum: Option<Spectrum>,
    lin: Linearization,
}

impl WavePair {
    pub fn new(model: &ModelSpec, phi: Profile, c: f64) -> Result<Self> {
        let dphi = model.d1(&phi);
        let lin = Linearization::assemble(model, &phi, c)?;
        let psi = adjoint_eigenfunction(&lin, &dphi)?;
        let kappa = if model.n() == 1 {
            scalar_psi_closed_form(&dphi, c, model.rho[0]).ok().map(|r| r.1)
        } else {
            None
        };
        Ok(Self {
            phi,
            c,
            dphi,
            psi,
            kappa,
            spectrum: None,
            lin,
        })
    }

    pub fn grid(&self) -> &Grid {
        self.phi.grid()
    }
    pub fn ncomp(&self) -> usize {
        self.phi.ncomp()
    }
    pub fn linearization(&self) -> &Linearization {
        &self.lin
    }

    /// `P v = <psi, v> Phi'`.
    pub fn spectral_projection(&self, v: &Profile) -> Profile {
        self.dphi.scaled(self.psi.dot(v))
    }

    /// `(I - P) v`.
    pub fn complement(&self, v: &Profile) -> Profile {
        let mut r = v.clone();
        r.axpy(-self.psi.dot(v), &self.dphi);
        r
    }

    pub fn with_spectrum(mut self, krylov: usize) -> Result<Self> {
        self.spectrum = Some(spectrum(&self.lin, 0.05, krylov)?);
        Ok(self)
    }

    pub fn beta(&self) -> Option<f64> {
        self.spectrum.as_ref().map(|s| s.beta)
    }

    pub fn semigroup(&self, dt: f64) -> Result<Semigroup> {
        Semigroup::new(&self.lin, dt)
    }

    pub fn fredholm(&self) -> Result<FredholmSolver> {
        FredholmSolver::new(&self.lin, &self.dphi, &self.psi)
    }

    /// `S(t) v0` by Crank-Nicolson with step close to `dt`.
    pub fn semigroup_apply(&self, v0: &Profile, t: f64, dt: f64) -> Result<Profile> {
        if !(t >= 0.0 && dt > 0.0) {
            return Err(Error::InvalidParameter(format!("t = {t}, dt = {dt}")));
        }
        if t == 0.0 {
            return Ok(v0.clone());
        }
        let steps = (t / dt).ceil().max(1.0) as usize;
        let sg = Semigroup::new(&self.lin, t / steps as f64)?;
        let mut v = interleave(v0);
        for _ in 0..steps {
            sg.step(&mut v);
        }
        Ok(deinterleave(&v, *self.grid(), self.ncomp()))
    }
}

/// Solves the deterministic Nagumo wave by Newton from the closed form and
/// attaches the adjoint eigenfunction.
pub fn nagumo_wave(model: &ModelSpec, grid: &Grid, opts: NewtonOptions) -> Result<WavePair> {
    let a = nagumo_detuning(model)?;
    let (guess, c) = nagumo_explicit(grid, a, model.rho[0])?;
    let (phi, c) = solve_wave_bvp(model, &guess, c, opts)?;
    WavePair::new(model, phi, c)
}

fn nagumo_detuning(model: &ModelSpec) -> Result<f64> {
    // f(u) = u(1-u)(u-a) has f'(0) = -a.
    let mut d = [0.0];
    model.kinetics.df(&[0.0], &mut d);
    Ok(-d[0])
}

/// FHN pulse: co-moving relaxation followed by Newton polishing.
pub fn fhn_wave(model: &ModelSpec, grid: &Grid, relax: RelaxOptions, opts: NewtonOptions) -> Result<WavePair> {
    let (guess, c) = relax_pulse(model, grid, relax)?;
    let (phi, c) = solve_wave_bvp(model, &guess, c, opts)?;
    WavePair::new(model, phi, c)
}

/// Crank-Nicolson stepper for `v_t = L v` on interleaved vectors.
#[derive(Clone, Debug)]
pub struct Semigroup {
    lu: BandLu,
    plus: BandMatrix,
    dt: f64,
    scratch_len: usize,
}

impl Semigroup {
    pub fn new(lin: &Linearization, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt = {dt}")));
        }
        let lu = lin.mat.affine(-0.5 * dt, 1.0).factor()?;
        let plus = lin.mat.affine(0.5 * dt, 1.0);
        Ok(Self {
            lu,
            plus,
            dt,
            scratch_len: lin.mat.n(),
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn step(&self, v: &mut [f64]) {
        let mut tmp = vec![0.0; self.scratch_len];
        self.plus.matvec(v, &mut tmp);
        self.lu.solve(&mut tmp);
        v.copy_from_slice(&tmp);
    }

    /// One step reusing a caller-provided buffer.
    pub fn step_with(&self, v: &mut [f64], tmp: &mut [f64]) {
        self.plus.matvec(v, tmp);
        self.lu.solve(tmp);
        v.copy_from_slice(tmp);
    }

    /// One step of `v_t = L v + s(t)` with the trapezoidal source
    /// `dt/2 (s_n + s_{n+1})` passed in as `src`.
    pub fn step_with_source(&self, v: &mut [f64], src: &[f64], tmp: &mut [f64]) {
        self.plus.matvec(v, tmp);
        for (t, s) in tmp.iter_mut().zip(src) {
            *t += s;
        }
        self.lu.solve(tmp);
        v.copy_from_slice(tmp);
    }

    pub fn len(&self) -> usize {
        self.scratch_len
    }

    pub fn is_empty(&self) -> bool {
        self.scratch_len == 0
    }
}

/// Solves `L u + s Phi' = rhs`, `<psi, u> = 0`.
#[derive(Clone, Debug)]
pub struct FredholmSolver {
    inner: BorderedSolver,
    grid: Grid,
    n: usize,
}

impl FredholmSolver {
    pub fn new(lin: &Linearization, dphi: &Profile, psi: &Profile) -> Result<Self> {
        let grid = *lin.grid();
        let n = lin.ncomp();
        let w = interleaved_weights(&grid, n);
        let b = interleave(dphi);
        let c: Vec<f64> = interleave(psi).iter().zip(&w).map(|(x, y)| x * y).collect();
        let inner = BorderedSolver::new(lin.matrix(), &b, &c)?;
        Ok(Self { inner, grid, n })
    }

    pub fn solve(&self, rhs: &Profile) -> Result<(Profile, f64)> {
        if !rhs.is_finite() {
            return Err(Error::NonFinite("bordered right-hand side"));
        }
        let mut r = interleave(rhs);
        let s = self.inner.solve(&mut r, 0.0);
        Ok((deinterleave(&r, self.grid, self.n), s))
    }
}

/// Rightmost eigenvalues of `L` by shift-invert Arnoldi around `shift`.
pub fn spectrum(lin: &Linearization, shift: f64, krylov: usize) -> Result<Spectrum> {
    let a = lin.matrix();
    let dim = a.n();
    let k = krylov.min(dim).max(4);
    let lu = a.affine(1.0, -shift).factor()?;
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(k + 1);
    let mut h = DMatrix::<f64>::zeros(k + 1, k);
    let mut v: Vec<f64> = (0..dim).map(|i| 1.0 + 0.1 * ((i * 7919) % 13) as f64).collect();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= nv);
    q.push(v);
    let mut m = k;
    for j in 0..k {
        let mut w = q[j].clone();
        lu.solve(&mut w);
        // Modified Gram-Schmidt, twice for stability.
        for _ in 0..2 {
            for (i, qi) in q.iter().enumerate() {
                let d: f64 = qi.iter().zip(&w).map(|(a, b)| a * b).sum();
                h[(i, j)] += d;
                w.iter_mut().zip(qi).for_each(|(x, y)| *x -= d * y);
            }
        }
        let nw = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        h[(j + 1, j)] = nw;
        if nw < 1e-14 {
            m = j + 1;
            break;
        }
        w.iter_mut().for_each(|x| *x /= nw);
        q.push(w);
    }
    let hm = h.view((0, 0), (m, m)).into_owned();
    let mu = hm.complex_eigenvalues();
    let mut eig: Vec<(f64, f64)> = mu
        .iter()
        .filter(|z| z.norm() > 1e-12)
        .map(|z| {
            let l = z.inv();
            (l.re + shift, l.im)
        })
        .collect();
    eig.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (i0, _) = eig
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 .0.hypot(a.1 .1)).total_cmp(&b.1 .0.hypot(b.1 .1)))
        .ok_or_else(|| Error::NonSimpleKernel("no eigenvalues found".into()))?;
    let lambda0 = eig[i0].0;
    let beta = -eig
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != i0)
        .map(|(_, e)| e.0)
        .fold(f64::NEG_INFINITY, f64::max);
    // Keep the well-resolved part: eigenvalues near the shift.
    eig.truncate(12);
    Ok(Spectrum {
        lambda0,
        eigenvalues: eig,
        beta,
    })
}
