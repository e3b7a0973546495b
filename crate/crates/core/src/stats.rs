//! Summary statistics with compensated summation.

use statrs::distribution::{ContinuousCDF, Normal};

/// Neumaier-compensated sum.
pub fn sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut s = 0.0f64;
    let mut c = 0.0f64;
    for v in values {
        let t = s + v;
        if s.abs() >= v.abs() {
            c += (s - t) + v;
        } else {
            c += (v - t) + s;
        }
        s = t;
    }
    s + c
}

/// Running mean stored as an anchor plus a compensated sum of deviations, so a
/// constant stream averages to that constant exactly.
#[derive(Clone, Debug, Default)]
pub struct MeanAccumulator {
    anchor: Option<f64>,
    s: f64,
    c: f64,
    n: u64,
}

impl MeanAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, v: f64) {
        let a = *self.anchor.get_or_insert(v);
        let d = v - a;
        let t = self.s + d;
        if self.s.abs() >= d.abs() {
            self.c += (self.s - t) + d;
        } else {
            self.c += (d - t) + self.s;
        }
        self.s = t;
        self.n += 1;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        match self.anchor {
            None => f64::NAN,
            Some(a) => a + (self.s + self.c) / self.n as f64,
        }
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    sum(values.iter().copied()) / values.len() as f64
}

/// Unbiased sample variance; NaN below two values.
pub fn variance(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return f64::NAN;
    }
    let m = mean(values);
    sum(values.iter().map(|v| (v - m) * (v - m))) / (values.len() - 1) as f64
}

pub fn sd(values: &[f64]) -> f64 {
    variance(values).sqrt()
}

/// Linear-interpolation quantile (type 7), ignoring NaN.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Summary of a sample: mean, sd and the standard error of the mean.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub se: f64,
    pub median: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len();
        let s = sd(values);
        Summary {
            n,
            mean: mean(values),
            sd: s,
            se: s / (n as f64).sqrt(),
            median: median(values),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_beats_naive() {
        let v = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(sum(v), 2.0);
    }

    #[test]
    fn accumulator_constant_is_exact() {
        let mut acc = MeanAccumulator::new();
        for _ in 0..7 {
            acc.add(0.1);
        }
        assert_eq!(acc.mean(), 0.1);
        assert_eq!(acc.count(), 7);
        let mut acc = MeanAccumulator::new();
        for v in [1.0, 2.0, 4.0] {
            acc.add(v);
        }
        assert!((acc.mean() - 7.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn moments() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mean(&v), 2.5);
        assert!((variance(&v) - 5.0 / 3.0).abs() < 1e-15);
        assert_eq!(median(&v), 2.5);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    }

    #[test]
    fn normal_quantile_known() {
        assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-9);
    }
}
