//! Small numerically careful reductions shared by the estimators.

/// Neumaier-compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.comp += (self.sum - t) + value;
        } else {
            self.comp += (value - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for KahanSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = KahanSum::new();
        for v in iter {
            acc.add(v);
        }
        acc
    }
}

pub fn sum(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().collect::<KahanSum>().total()
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    sum(values.iter().copied()) / values.len() as f64
}

/// A Monte Carlo point estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn new(value: f64, stderr: f64) -> Self {
        Self { value, stderr }
    }

    /// `|self - target| <= k * stderr`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.value - target).abs() <= k * self.stderr
    }
}

/// Sample mean and standard error of the mean (unbiased variance).
pub fn mean_stderr(values: &[f64]) -> Estimate {
    let n = values.len();
    if n == 0 {
        return Estimate::new(f64::NAN, f64::NAN);
    }
    let m = mean(values);
    if n == 1 {
        return Estimate::new(m, 0.0);
    }
    let ss = sum(values.iter().map(|v| (v - m) * (v - m)));
    let var = ss / (n - 1) as f64;
    Estimate::new(m, (var / n as f64).sqrt())
}

/// Streaming first and second moment accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct Moments {
    pub count: u64,
    sum: KahanSum,
    sum_sq: KahanSum,
}

impl Moments {
    #[inline]
    pub fn push(&mut self, value: f64) {
        self.count += 1;
        self.sum.add(value);
        self.sum_sq.add(value * value);
    }

    pub fn merge(&mut self, other: &Moments) {
        self.count += other.count;
        self.sum.add(other.sum.total());
        self.sum_sq.add(other.sum_sq.total());
    }

    pub fn mean(&self) -> f64 {
        self.sum.total() / self.count as f64
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        let n = self.count as f64;
        let m = self.mean();
        ((self.sum_sq.total() - n * m * m) / (n - 1.0)).max(0.0)
    }

    pub fn estimate(&self) -> Estimate {
        Estimate::new(self.mean(), (self.variance() / self.count as f64).sqrt())
    }
}
