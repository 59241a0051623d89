//! Moment accumulators with deterministic merging, and least-squares fits.

/// Running sums for mean and unbiased variance of a series of samples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub n: usize,
    pub sum: Vec<f64>,
    pub sum_sq: Vec<f64>,
}

impl Moments {
    pub fn new(len: usize) -> Self {
        Self {
            n: 0,
            sum: vec![0.0; len],
            sum_sq: vec![0.0; len],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.n += 1;
        for ((s, q), v) in self.sum.iter_mut().zip(self.sum_sq.iter_mut()).zip(x) {
            *s += v;
            *q += v * v;
        }
    }

    pub fn merge(&mut self, other: &Moments) {
        if self.sum.is_empty() {
            self.sum = vec![0.0; other.sum.len()];
            self.sum_sq = vec![0.0; other.sum.len()];
        }
        self.n += other.n;
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.sum_sq.iter_mut().zip(&other.sum_sq) {
            *a += b;
        }
    }

    pub fn summary(&self) -> Summary {
        let n = self.n as f64;
        let mean: Vec<f64> = self
            .sum
            .iter()
            .map(|s| if n > 0.0 { s / n } else { f64::NAN })
            .collect();
        let var: Vec<f64> = self
            .sum_sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                if n > 1.0 {
                    ((q - n * m * m) / (n - 1.0)).max(0.0)
                } else {
                    f64::NAN
                }
            })
            .collect();
        let stderr = var.iter().map(|v| (v / n).sqrt()).collect();
        Summary { mean, var, stderr }
    }
}

/// Mean, unbiased variance and standard error of the mean, per entry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub stderr: Vec<f64>,
}

/// Combines `items` pairwise in a fixed tree over their order.
pub fn tree_reduce<T>(mut items: Vec<T>, merge: impl Fn(T, T) -> T) -> Option<T> {
    if items.is_empty() {
        return None;
    }
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(merge(a, b)),
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
    pub r2: f64,
}

impl LinearFit {
    /// 95% interval of the slope under a normal approximation.
    pub fn slope_interval(&self) -> (f64, f64) {
        (
            self.slope - 1.96 * self.slope_stderr,
            self.slope + 1.96 * self.slope_stderr,
        )
    }
}

/// Ordinary least squares `y = intercept + slope x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<LinearFit> {
    let n = x.len().min(y.len());
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let mx = x[..n].iter().sum::<f64>() / nf;
    let my = y[..n].iter().sum::<f64>() / nf;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (dx, dy) = (x[i] - mx, y[i] - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse = (syy - slope * sxy).max(0.0);
    let slope_stderr = if n > 2 { (sse / (nf - 2.0) / sxx).sqrt() } else { 0.0 };
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    Some(LinearFit {
        slope,
        intercept,
        slope_stderr,
        r2,
    })
}

/// Fit of `log y` against `log x`; non-positive entries are skipped.
pub fn loglog_fit(x: &[f64], y: &[f64]) -> Option<LinearFit> {
    let (lx, ly): (Vec<f64>, Vec<f64>) = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .unzip();
    linear_fit(&lx, &ly)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn moments_match_two_pass() {
        let data = [[1.0, 2.0], [3.0, -1.0], [4.0, 0.5], [-2.0, 0.0]];
        let mut m = Moments::new(2);
        for d in &data {
            m.push(d);
        }
        let s = m.summary();
        assert!((s.mean[0] - 1.5).abs() < 1e-15);
        let var0 = data.iter().map(|d| (d[0] - 1.5f64).powi(2)).sum::<f64>() / 3.0;
        assert!((s.var[0] - var0).abs() < 1e-12);
        assert!((s.stderr[0] - (var0 / 4.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn exact_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v - 1.0).collect();
        let f = linear_fit(&x, &y).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-14 && (f.intercept + 1.0).abs() < 1e-14);
        assert!((f.r2 - 1.0).abs() < 1e-14);
        let p = loglog_fit(&[1.0, 10.0, 100.0], &[3.0, 300.0, 30000.0]).unwrap();
        assert!((p.slope - 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn tree_reduce_sums_any_split(v in proptest::collection::vec(-1e3f64..1e3, 1..64)) {
            let total = tree_reduce(v.iter().map(|x| vec![*x]).collect(), |mut a, b| { a.extend(b); a }).unwrap();
            prop_assert_eq!(total, v.clone());
            let mut whole = Moments::new(1);
            let mut parts: Vec<Moments> = Vec::new();
            for x in &v {
                whole.push(&[*x]);
                let mut p = Moments::new(1);
                p.push(&[*x]);
                parts.push(p);
            }
            let merged = tree_reduce(parts, |mut a, b| { a.merge(&b); a }).unwrap();
            prop_assert_eq!(merged.n, whole.n);
            prop_assert!((merged.sum[0] - whole.sum[0]).abs() <= 1e-9 * (1.0 + whole.sum_sq[0].sqrt()));
        }
    }
}
