//! Translation-invariant covariance kernels, square-root kernels, the
//! cosine/sine noise basis and a circulant-embedding Wiener increment sampler.
//!
//! Fourier convention: `f_hat(k) = int f(x) e^{-ikx} dx`.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BoundaryMode, Grid, Profile};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelKind {
    /// `q(x) = exp(-pi x^2 / (4 zeta^2)) / (2 zeta)`.
    Gaussian { zeta: f64 },
    /// `q(x) = exp(-|x| / ell) / (2 ell)`.
    Exponential { ell: f64 },
    /// `q(x) = (1 - |x|/w)_+ / w`.
    Tent { width: f64 },
    /// Linear interpolation of `(lag, value)` samples in |x|, zero beyond.
    Tabulated { lags: Vec<f64>, values: Vec<f64> },
}

impl KernelKind {
    pub fn eval(&self, x: f64) -> f64 {
        let ax = x.abs();
        match self {
            KernelKind::Gaussian { zeta } => (-PI * x * x / (4.0 * zeta * zeta)).exp() / (2.0 * zeta),
            KernelKind::Exponential { ell } => (-ax / ell).exp() / (2.0 * ell),
            KernelKind::Tent { width } => (1.0 - ax / width).max(0.0) / width,
            KernelKind::Tabulated { lags, values } => {
                if lags.is_empty() || ax > *lags.last().unwrap() {
                    return 0.0;
                }
                let j = lags.partition_point(|l| *l <= ax);
                if j == 0 {
                    return values[0];
                }
                if j >= lags.len() {
                    return *values.last().unwrap();
                }
                let t = (ax - lags[j - 1]) / (lags[j] - lags[j - 1]);
                values[j - 1] + t * (values[j] - values[j - 1])
            }
        }
    }

    /// Parses two whitespace-separated columns `lag value`; `#` starts a comment.
    pub fn tabulated_from_str(text: &str) -> Result<Self> {
        let mut rows: Vec<(f64, f64)> = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace().map(str::parse::<f64>);
            match (it.next(), it.next()) {
                (Some(Ok(l)), Some(Ok(v))) if l.is_finite() && v.is_finite() => rows.push((l.abs(), v)),
                _ => {
                    return Err(Error::Config(format!(
                        "kernel table line {}: expected two numbers",
                        ln + 1
                    )))
                }
            }
        }
        if rows.is_empty() {
            return Err(Error::Config("empty kernel table".into()));
        }
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(KernelKind::Tabulated {
            lags: rows.iter().map(|r| r.0).collect(),
            values: rows.iter().map(|r| r.1).collect(),
        })
    }
}

/// A covariance kernel sampled on a grid, with its Fourier data.
///
/// The kernel lives on a periodic lag grid of `M` points: `M = 2(N-1)` for
/// Dirichlet grids (an exact embedding of all pairwise lags) and `M = N` for
/// periodic grids.
#[derive(Clone)]
pub struct CovarianceKernel {
    kind: KernelKind,
    grid: Grid,
    m: usize,
    lag_values: Vec<f64>,
    q_hat: Vec<f64>,
    wavenumbers: Vec<f64>,
    lag_hat: Vec<Complex64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for CovarianceKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CovarianceKernel")
            .field("kind", &self.kind)
            .field("n", &self.grid.len())
            .field("m", &self.m)
            .finish()
    }
}

impl CovarianceKernel {
    pub fn new(kind: KernelKind, grid: Grid) -> Result<Self> {
        match &kind {
            KernelKind::Gaussian { zeta } if !(*zeta > 0.0) => {
                return Err(Error::InvalidParameter(format!("zeta = {zeta}")))
            }
            KernelKind::Exponential { ell } if !(*ell > 0.0) => {
                return Err(Error::InvalidParameter(format!("ell = {ell}")))
            }
            KernelKind::Tent { width } if !(*width > 0.0) => {
                return Err(Error::InvalidParameter(format!("width = {width}")))
            }
            KernelKind::Tabulated { lags, values } if lags.len() != values.len() || lags.is_empty() => {
                return Err(Error::InvalidParameter(
                    "tabulated kernel needs matching non-empty columns".into(),
                ))
            }
            _ => {}
        }
        let n = grid.len();
        let m = match grid.boundary() {
            BoundaryMode::DirichletOnX => 2 * (n - 1),
            BoundaryMode::Periodic => n,
        };
        let dx = grid.dx();
        let lag_values: Vec<f64> = (0..m)
            .map(|j| {
                let s = if j <= m / 2 { j as f64 } else { j as f64 - m as f64 };
                kind.eval(s * dx)
            })
            .collect();
        if lag_values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kernel values"));
        }
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(m);
        let inv = planner.plan_fft_inverse(m);
        let mut lag_hat: Vec<Complex64> = lag_values.iter().map(|v| Complex64::new(*v, 0.0)).collect();
        fwd.process(&mut lag_hat);
        let maxq = lag_hat.iter().fold(0.0f64, |a, z| a.max(z.re.abs())) * dx;
        let maxim = lag_hat.iter().fold(0.0f64, |a, z| a.max(z.im.abs())) * dx;
        if maxq == 0.0 {
            return Err(Error::InvalidParameter("kernel vanishes on the grid".into()));
        }
        if maxim > 1e-10 * maxq {
            return Err(Error::InvalidParameter(format!(
                "kernel not symmetric: imaginary residue {maxim:e}"
            )));
        }
        let mut q_hat = Vec::with_capacity(m);
        let mut min = f64::INFINITY;
        for z in &lag_hat {
            let v = z.re * dx;
            min = min.min(v);
            q_hat.push(v.max(0.0));
        }
        if min < -1e-12 * maxq {
            return Err(Error::NotPositiveSemidefinite { min, max: maxq });
        }
        let period = m as f64 * dx;
        let wavenumbers = (0..m)
            .map(|j| {
                let s = if j <= m / 2 { j as f64 } else { j as f64 - m as f64 };
                2.0 * PI * s / period
            })
            .collect();
        Ok(Self {
            kind,
            grid,
            m,
            lag_values,
            q_hat,
            wavenumbers,
            lag_hat,
            fwd,
            inv,
        })
    }

    pub fn gaussian(zeta: f64, grid: Grid) -> Result<Self> {
        Self::new(KernelKind::Gaussian { zeta }, grid)
    }

    pub fn kind(&self) -> &KernelKind {
        &self.kind
    }
    pub fn grid(&self) -> &Grid {
        &self.grid
    }
    pub fn period_len(&self) -> usize {
        self.m
    }
    pub fn q_at_zero(&self) -> f64 {
        self.lag_values[0]
    }
    /// q at lag `j * dx`, j in 0..M (periodised).
    pub fn lag_values(&self) -> &[f64] {
        &self.lag_values
    }
    pub fn eval(&self, x: f64) -> f64 {
        self.kind.eval(x)
    }

    /// `(k, q_hat(k))` on the periodised lag grid, negative round-off clamped.
    pub fn kernel_fourier(&self) -> (&[f64], &[f64]) {
        (&self.wavenumbers, &self.q_hat)
    }

    /// Lag-space samples of the kernel `p` of `sqrt(Q)`, same layout as
    /// `lag_values`.
    pub fn sqrt_kernel(&self) -> Vec<f64> {
        let dx = self.grid.dx();
        let mut z: Vec<Complex64> = self.sqrt_q_hat().into_iter().map(|v| Complex64::new(v, 0.0)).collect();
        self.inv.process(&mut z);
        let s = 1.0 / (self.m as f64 * dx);
        z.iter().map(|c| c.re * s).collect()
    }

    /// `sqrt(q_hat)` with round-off level entries set to zero, so that the
    /// square root does not amplify them.
    pub fn sqrt_q_hat(&self) -> Vec<f64> {
        let max = self.q_hat.iter().fold(0.0f64, |a, v| a.max(*v));
        self.q_hat
            .iter()
            .map(|v| if *v > 1e-14 * max { v.sqrt() } else { 0.0 })
            .collect()
    }

    /// Circular convolution `dx * sum_m a_m b_{n-m}` of two lag arrays.
    pub fn lag_convolution(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut za: Vec<Complex64> = a.iter().map(|v| Complex64::new(*v, 0.0)).collect();
        let mut zb: Vec<Complex64> = b.iter().map(|v| Complex64::new(*v, 0.0)).collect();
        self.fwd.process(&mut za);
        self.fwd.process(&mut zb);
        for (x, y) in za.iter_mut().zip(&zb) {
            *x *= *y;
        }
        self.inv.process(&mut za);
        let s = self.grid.dx() / self.m as f64;
        za.iter().map(|c| c.re * s).collect()
    }

    /// `(Qv)(x_i) = sum_j q(x_i - x_j) w_j v_j` with quadrature weights `w_j`.
    pub fn convolve(&self, v: &[f64]) -> Vec<f64> {
        let n = self.grid.len();
        let mut z = vec![Complex64::new(0.0, 0.0); self.m];
        for i in 0..n {
            z[i].re = v[i] * self.grid.weight(i);
        }
        self.fwd.process(&mut z);
        for (x, y) in z.iter_mut().zip(&self.lag_hat) {
            *x *= *y;
        }
        self.inv.process(&mut z);
        let s = 1.0 / self.m as f64;
        z[..n].iter().map(|c| c.re * s).collect()
    }

    /// Componentwise `q * v`.
    pub fn convolve_q(&self, v: &Profile) -> Result<Profile> {
        if *v.grid() != self.grid {
            return Err(Error::GridMismatch);
        }
        let n = self.grid.len();
        let mut out = Profile::zeros(self.grid, v.ncomp());
        for c in 0..v.ncomp() {
            let r = self.convolve(v.component(c));
            out.values_mut()[c * n..(c + 1) * n].copy_from_slice(&r);
        }
        Ok(out)
    }

    /// Continuum transform at wavenumber `k`: closed form for the Gaussian,
    /// otherwise the nearest sample of the discrete transform.
    pub fn q_hat_at(&self, k: f64) -> f64 {
        if let KernelKind::Gaussian { zeta } = self.kind {
            return (-zeta * zeta * k * k / PI).exp();
        }
        let period = self.m as f64 * self.grid.dx();
        let j = (k.abs() * period / (2.0 * PI)).round() as usize;
        if j < self.m {
            self.q_hat[j]
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parity {
    Cos,
    Sin,
}

/// Cosine/sine basis on [-L, L] with the approximate eigenvalues of Q.
#[derive(Clone, Debug)]
pub struct Basis {
    pub labels: Vec<(usize, Parity)>,
    pub functions: Vec<Vec<f64>>,
    pub lambdas: Vec<f64>,
}

impl Basis {
    pub fn len(&self) -> usize {
        self.functions.len()
    }
    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }
}

/// `e_{k,c} = cos(pi k x / L)/sqrt(L)`, `e_{k,s} = sin(pi k x / L)/sqrt(L)` for
/// `1 <= k <= k_max`, plus `e_0 = 1/sqrt(2L)`.
pub fn basis_eigendata(grid: &Grid, kernel: &CovarianceKernel, k_max: usize) -> Result<Basis> {
    if k_max < 1 {
        return Err(Error::InvalidParameter("k_max must be at least 1".into()));
    }
    let l = grid.half_length();
    let xs = grid.xs();
    let mut labels = Vec::new();
    let mut functions = Vec::new();
    let mut lambdas = Vec::new();
    for k in 0..=k_max {
        let kc = PI * k as f64 / l;
        let lam = match kernel.kind() {
            KernelKind::Gaussian { zeta } => (-PI * (k * k) as f64 * zeta * zeta / (l * l)).exp(),
            _ => kernel.q_hat_at(kc),
        };
        if k == 0 {
            labels.push((0, Parity::Cos));
            functions.push(vec![1.0 / (2.0 * l).sqrt(); xs.len()]);
            lambdas.push(lam);
            continue;
        }
        for par in [Parity::Cos, Parity::Sin] {
            let f: Vec<f64> = xs
                .iter()
                .map(|x| match par {
                    Parity::Cos => (kc * x).cos(),
                    Parity::Sin => (kc * x).sin(),
                } / l.sqrt())
                .collect();
            labels.push((k, par));
            functions.push(f);
            lambdas.push(lam);
        }
    }
    Ok(Basis {
        labels,
        functions,
        lambdas,
    })
}

/// Stepwise generator of spatially correlated Wiener increments.
///
/// Each call draws one field per active component from an exact circulant
/// embedding; the real and imaginary parts of one complex FFT give two
/// independent fields, the second is kept for the next request.
pub struct NoiseSampler {
    kernel: Arc<CovarianceKernel>,
    sqrt_eig: Vec<f64>,
    rng: ChaCha8Rng,
    active: Vec<bool>,
    spare: Option<Vec<f64>>,
    buf: Vec<Complex64>,
}

impl NoiseSampler {
    /// `seed` picks the generator, `stream` an independent sub-stream (one per
    /// realisation).
    pub fn new(kernel: Arc<CovarianceKernel>, seed: u64, stream: u64, active: Vec<bool>) -> Self {
        let m = kernel.period_len();
        let dx = kernel.grid().dx();
        // Eigenvalues of the circulant covariance are q_hat/dx.
        let s = (dx * m as f64).sqrt();
        let sqrt_eig = kernel.sqrt_q_hat().iter().map(|v| v / s).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self {
            kernel,
            sqrt_eig,
            rng,
            active,
            spare: None,
            buf: vec![Complex64::new(0.0, 0.0); m],
        }
    }

    pub fn components(&self) -> usize {
        self.active.len()
    }

    pub fn kernel(&self) -> &Arc<CovarianceKernel> {
        &self.kernel
    }

    fn next_field(&mut self, out: &mut [f64]) {
        if let Some(s) = self.spare.take() {
            out.copy_from_slice(&s);
            return;
        }
        for (z, a) in self.buf.iter_mut().zip(&self.sqrt_eig) {
            let re: f64 = StandardNormal.sample(&mut self.rng);
            let im: f64 = StandardNormal.sample(&mut self.rng);
            *z = Complex64::new(re * a, im * a);
        }
        self.kernel.fwd.process(&mut self.buf);
        let n = out.len();
        for i in 0..n {
            out[i] = self.buf[i].re;
        }
        self.spare = Some(self.buf[..n].iter().map(|z| z.im).collect());
    }

    /// Writes one increment over `dt` into `out` (inactive components are zero).
    pub fn fill_increment(&mut self, dt: f64, out: &mut Profile) {
        let n = self.kernel.grid().len();
        let sd = dt.sqrt();
        let mut field = vec![0.0; n];
        for c in 0..self.active.len() {
            let dst = &mut out.values_mut()[c * n..(c + 1) * n];
            if self.active[c] {
                self.next_field(&mut field);
                for (d, f) in dst.iter_mut().zip(&field) {
                    *d = f * sd;
                }
            } else {
                dst.fill(0.0);
            }
        }
    }

    pub fn sample_increment(&mut self, dt: f64) -> Profile {
        let mut p = Profile::zeros(*self.kernel.grid(), self.active.len());
        self.fill_increment(dt, &mut p);
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kernel(n: usize) -> CovarianceKernel {
        CovarianceKernel::gaussian(1.0, Grid::dirichlet(40.0, n).unwrap()).unwrap()
    }

    #[test]
    fn gaussian_transform_matches_closed_form() {
        let k = kernel(2048);
        let (ks, qh) = k.kernel_fourier();
        let kmax = PI / (4.0 * k.grid().dx());
        for (kk, q) in ks.iter().zip(qh) {
            if kk.abs() <= kmax {
                assert!((q - (-kk * kk / PI).exp()).abs() < 1e-6);
            }
        }
        assert!((k.q_at_zero() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sqrt_kernel_squares_to_q() {
        let k = kernel(2048);
        let p = k.sqrt_kernel();
        let pp = k.lag_convolution(&p, &p);
        let err = pp
            .iter()
            .zip(k.lag_values())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= 1e-10, "{err}");
        // Gaussian shape with exponent -pi x^2 / (2 zeta^2).
        let dx = k.grid().dx();
        for j in [0usize, 10, 25, 40] {
            let x = j as f64 * dx;
            let want = (-PI * x * x / 2.0).exp() / 2f64.sqrt();
            assert!((p[j] - want).abs() < 1e-7, "j={j} {} {want}", p[j]);
        }
    }

    #[test]
    fn tent_transform_nonnegative() {
        let g = Grid::dirichlet(40.0, 512).unwrap();
        let k = CovarianceKernel::new(KernelKind::Tent { width: 2.0 }, g).unwrap();
        assert!(k.kernel_fourier().1.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn indefinite_kernel_rejected() {
        let g = Grid::dirichlet(40.0, 512).unwrap();
        let kind = KernelKind::Tabulated {
            lags: vec![0.0, 1.0, 2.0, 3.0],
            values: vec![1.0, -1.0, -1.0, 0.0],
        };
        assert!(matches!(
            CovarianceKernel::new(kind, g),
            Err(Error::NotPositiveSemidefinite { .. })
        ));
    }

    #[test]
    fn narrow_gaussian_is_flat_over_resolved_band() {
        let g = Grid::dirichlet(40.0, 1024).unwrap();
        let k = CovarianceKernel::gaussian(0.02, g).unwrap();
        let (ks, qh) = k.kernel_fourier();
        for (kk, q) in ks.iter().zip(qh) {
            if kk.abs() < 5.0 {
                assert!((q / qh[0] - 1.0).abs() < 0.02);
            }
        }
    }

    #[test]
    fn convolution_symmetric_and_psd() {
        let k = kernel(512);
        let g = *k.grid();
        let v: Vec<f64> = (0..512)
            .map(|i| ((i * 37 % 101) as f64 / 50.0 - 1.0) * (g.x(i) / 10.0).cos())
            .collect();
        let w: Vec<f64> = (0..512).map(|i| (i * 53 % 97) as f64 / 48.0 - 1.0).collect();
        let qv = k.convolve(&v);
        let qw = k.convolve(&w);
        let a = g.dot(&qv, &w);
        let b = g.dot(&v, &qw);
        assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
        assert!(g.dot(&qv, &v) >= -1e-10 * g.dot(&v, &v));
    }

    #[test]
    fn basis_normalised_and_lambda0() {
        let k = kernel(2048);
        let b = basis_eigendata(k.grid(), &k, 10).unwrap();
        assert_eq!(b.lambdas[0], 1.0);
        for f in &b.functions {
            let n = k.grid().dot(f, f);
            assert!((n - 1.0).abs() < 1e-3, "{n}");
        }
    }

    #[test]
    fn equal_seeds_identical_streams() {
        let k = Arc::new(kernel(256));
        let mut a = NoiseSampler::new(k.clone(), 7, 3, vec![true]);
        let mut b = NoiseSampler::new(k.clone(), 7, 3, vec![true]);
        for _ in 0..5 {
            assert_eq!(a.sample_increment(0.01), b.sample_increment(0.01));
        }
        let mut c = NoiseSampler::new(k, 7, 4, vec![true]);
        assert_ne!(a.sample_increment(0.01), c.sample_increment(0.01));
    }
}
