//! Running moments and correlation summaries.

/// Mean and variance accumulator (Welford, with pairwise merge).
///
/// `+inf` observations are counted separately so one impossible word does
/// not poison the finite moments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    count: u64,
    mean: f64,
    m2: f64,
    infinite: u64,
}

impl Moments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        if x == f64::INFINITY {
            self.infinite += 1;
            return;
        }
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Folds `other` in. Results depend on merge order, so callers merge in
    /// a fixed order.
    pub fn merge(&mut self, other: &Moments) {
        self.infinite += other.infinite;
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            self.count = other.count;
            self.mean = other.mean;
            self.m2 = other.m2;
            return;
        }
        let n_a = self.count as f64;
        let n_b = other.count as f64;
        let n = n_a + n_b;
        let delta = other.mean - self.mean;
        self.mean += delta * n_b / n;
        self.m2 += other.m2 + delta * delta * n_a * n_b / n;
        self.count += other.count;
    }

    /// Observations including infinite ones.
    pub fn total(&self) -> u64 {
        self.count + self.infinite
    }

    pub fn finite_count(&self) -> u64 {
        self.count
    }

    pub fn infinite_count(&self) -> u64 {
        self.infinite
    }

    /// Mean over all observations; `+inf` if any was infinite.
    pub fn mean(&self) -> f64 {
        if self.infinite > 0 {
            f64::INFINITY
        } else if self.count == 0 {
            f64::NAN
        } else {
            self.mean
        }
    }

    pub fn finite_mean(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.mean
        }
    }

    /// Unbiased sample variance of the finite observations; 0 with fewer than two.
    pub fn finite_variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / (self.count - 1) as f64).max(0.0)
        }
    }

    pub fn finite_stdev(&self) -> f64 {
        self.finite_variance().sqrt()
    }

    /// Standard error of the mean, `+inf` if any observation was infinite.
    pub fn stderr(&self) -> f64 {
        if self.infinite > 0 {
            f64::INFINITY
        } else if self.count == 0 {
            f64::NAN
        } else {
            self.finite_stdev() / (self.count as f64).sqrt()
        }
    }
}

/// Pearson sample correlation. `NaN` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    if x.len() < 2 {
        return f64::NAN;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

/// 1-based ranks; ties share their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&average_ranks(x), &average_ranks(y))
}
