//! Banded matrices, LU with partial pivoting, and bordered solves.
//!
//! Storage follows the LAPACK `gbtrf` layout: column-major with
//! `ldab = 2*kl + ku + 1` rows, the top `kl` rows reserved for fill-in.

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    ldab: usize,
    ab: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let ldab = 2 * kl + ku + 1;
        Self {
            n,
            kl,
            ku,
            ldab,
            ab: vec![0.0; ldab * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn kl(&self) -> usize {
        self.kl
    }
    pub fn ku(&self) -> usize {
        self.ku
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        j * self.ldab + (self.kl + self.ku + i - j)
    }

    #[inline]
    pub fn in_band(&self, i: usize, j: usize) -> bool {
        i < self.n && j < self.n && i + self.ku >= j && j + self.kl >= i
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if self.in_band(i, j) {
            self.ab[self.idx(i, j)]
        } else {
            0.0
        }
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        assert!(self.in_band(i, j), "({i},{j}) outside band");
        let k = self.idx(i, j);
        self.ab[k] = v;
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        assert!(self.in_band(i, j), "({i},{j}) outside band");
        let k = self.idx(i, j);
        self.ab[k] += v;
    }

    /// y = A x
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate().take(self.n) {
            let lo = i.saturating_sub(self.kl);
            let hi = (i + self.ku).min(self.n - 1);
            let mut s = 0.0;
            for (j, xj) in x.iter().enumerate().take(hi + 1).skip(lo) {
                s += self.ab[self.idx(i, j)] * xj;
            }
            *yi = s;
        }
    }

    pub fn transpose(&self) -> BandMatrix {
        let mut t = BandMatrix::zeros(self.n, self.ku, self.kl);
        for j in 0..self.n {
            let lo = j.saturating_sub(self.ku);
            let hi = (j + self.kl).min(self.n - 1);
            for i in lo..=hi {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    /// Row scaling A <- D A.
    pub fn scale_rows(&mut self, d: &[f64]) {
        for j in 0..self.n {
            let lo = j.saturating_sub(self.ku);
            let hi = (j + self.kl).min(self.n - 1);
            for (i, di) in d.iter().enumerate().take(hi + 1).skip(lo) {
                let k = self.idx(i, j);
                self.ab[k] *= di;
            }
        }
    }

    /// Column scaling A <- A D.
    pub fn scale_cols(&mut self, d: &[f64]) {
        for (j, dj) in d.iter().enumerate().take(self.n) {
            let lo = j.saturating_sub(self.ku);
            let hi = (j + self.kl).min(self.n - 1);
            for i in lo..=hi {
                let k = self.idx(i, j);
                self.ab[k] *= dj;
            }
        }
    }

    /// a*A + b*I
    pub fn affine(&self, a: f64, b: f64) -> BandMatrix {
        let mut m = self.clone();
        m.ab.iter_mut().for_each(|v| *v *= a);
        for i in 0..self.n {
            m.add(i, i, b);
        }
        m
    }

    pub fn max_abs_diag(&self) -> f64 {
        (0..self.n).fold(0.0, |m, i| m.max(self.get(i, i).abs()))
    }

    pub fn factor(&self) -> Result<BandLu> {
        BandLu::new(self.clone())
    }
}

#[derive(Clone, Debug)]
pub struct BandLu {
    m: BandMatrix,
    ipiv: Vec<usize>,
}

impl BandLu {
    fn new(mut m: BandMatrix) -> Result<Self> {
        let n = m.n;
        let kl = m.kl;
        let ku = m.ku;
        let scale = m.ab.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if scale == 0.0 || !scale.is_finite() {
            return Err(Error::DegenerateJacobian);
        }
        let mut ipiv = vec![0; n];
        let mut ju = 0usize;
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            let mut p = 0;
            let mut best = m.ab[m.idx(j, j)].abs();
            for r in 1..=km {
                let v = m.ab[m.idx(j + r, j)].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            ipiv[j] = j + p;
            if best <= 1e-300 || best < scale * 1e-15 {
                return Err(Error::DegenerateJacobian);
            }
            ju = ju.max((j + ku + p).min(n - 1));
            if p != 0 {
                for col in j..=ju {
                    let a = m.idx(j, col);
                    let b = m.idx(j + p, col);
                    m.ab.swap(a, b);
                }
            }
            let piv = m.ab[m.idx(j, j)];
            for r in 1..=km {
                let k = m.idx(j + r, j);
                m.ab[k] /= piv;
            }
            for col in j + 1..=ju {
                let t = m.ab[m.idx(j, col)];
                if t != 0.0 {
                    for r in 1..=km {
                        let l = m.ab[m.idx(j + r, j)];
                        let k = m.idx(j + r, col);
                        m.ab[k] -= l * t;
                    }
                }
            }
        }
        Ok(Self { m, ipiv })
    }

    pub fn n(&self) -> usize {
        self.m.n
    }

    /// Solves A x = b in place.
    pub fn solve(&self, b: &mut [f64]) {
        let m = &self.m;
        let n = m.n;
        let kl = m.kl;
        for j in 0..n {
            let p = self.ipiv[j];
            if p != j {
                b.swap(j, p);
            }
            let km = kl.min(n - 1 - j);
            let bj = b[j];
            if bj != 0.0 {
                for r in 1..=km {
                    b[j + r] -= m.ab[m.idx(j + r, j)] * bj;
                }
            }
        }
        let kuu = m.kl + m.ku;
        for j in (0..n).rev() {
            b[j] /= m.ab[m.idx(j, j)];
            let bj = b[j];
            if bj != 0.0 {
                let lo = j.saturating_sub(kuu);
                for i in lo..j {
                    b[i] -= m.ab[m.idx(i, j)] * bj;
                }
            }
        }
    }
}

/// Solver for `[[A, b], [c^T, 0]] [u; s] = [r; t]` with banded, possibly
/// singular, `A`.
///
/// `A` is regularised by a diagonal bump `alpha e_j e_j^T` at the node where
/// `|b_j c_j|` is largest; the bump is removed again through a 2x2 Schur
/// complement, so the result is exact up to round-off.
#[derive(Clone, Debug)]
pub struct BorderedSolver {
    lu: BandLu,
    c: Vec<f64>,
    j: usize,
    alpha: f64,
    yb: Vec<f64>,
    ye: Vec<f64>,
    cyb: f64,
    cye: f64,
}

impl BorderedSolver {
    pub fn new(a: &BandMatrix, b: &[f64], c: &[f64]) -> Result<Self> {
        let n = a.n();
        let mut j = 0;
        let mut best = -1.0;
        for i in 0..n {
            let v = (b[i] * c[i]).abs();
            if v > best {
                best = v;
                j = i;
            }
        }
        if best <= 0.0 {
            return Err(Error::BorderedSingular);
        }
        let alpha = a.max_abs_diag().max(1.0);
        let mut ar = a.clone();
        ar.add(j, j, alpha);
        let lu = ar.factor().map_err(|_| Error::BorderedSingular)?;
        let mut yb = b.to_vec();
        lu.solve(&mut yb);
        let mut ye = vec![0.0; n];
        ye[j] = 1.0;
        lu.solve(&mut ye);
        let cyb = dot(c, &yb);
        let cye = dot(c, &ye);
        let s = Self {
            lu,
            c: c.to_vec(),
            j,
            alpha,
            yb,
            ye,
            cyb,
            cye,
        };
        let det = s.det();
        let size = (s.yb[j].abs() + (1.0 - alpha * s.ye[j]).abs()) * (s.cyb.abs() + (alpha * s.cye).abs());
        if !det.is_finite() || det.abs() <= 1e-13 * size {
            return Err(Error::BorderedSingular);
        }
        Ok(s)
    }

    fn det(&self) -> f64 {
        let a11 = self.yb[self.j];
        let a12 = 1.0 - self.alpha * self.ye[self.j];
        let a21 = self.cyb;
        let a22 = -self.alpha * self.cye;
        a11 * a22 - a12 * a21
    }

    /// Returns (u, s). `u` overwrites `r`.
    pub fn solve(&self, r: &mut [f64], t: f64) -> f64 {
        self.lu.solve(r);
        let j = self.j;
        let a11 = self.yb[j];
        let a12 = 1.0 - self.alpha * self.ye[j];
        let a21 = self.cyb;
        let a22 = -self.alpha * self.cye;
        let r1 = r[j];
        let r2 = dot(&self.c, r) - t;
        let det = a11 * a22 - a12 * a21;
        let s = (r1 * a22 - a12 * r2) / det;
        let tau = (a11 * r2 - a21 * r1) / det;
        let at = self.alpha * tau;
        for i in 0..r.len() {
            r[i] += -s * self.yb[i] + at * self.ye[i];
        }
        s
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
