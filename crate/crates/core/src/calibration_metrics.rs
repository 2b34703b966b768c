//! Predictive quality and calibration: NLL, quantile reliability for
//! regression, confidence reliability for classification, ECE and MCE.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::atomic::write_atomic;
use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 10;
pub const MIN_REGRESSION_POINTS: usize = 30;
pub const CSV_HEADER: [&str; 3] = ["level", "observed", "weight"];

/// Mean negative log predictive density. `zero_probability` counts targets
/// that received no predictive mass; any such target makes `value` infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nll {
    pub value: f64,
    pub zero_probability: usize,
}

fn finish_nll(terms: impl Iterator<Item = f64>, n: usize) -> Nll {
    let mut sum = 0.0;
    let mut zero = 0;
    for t in terms {
        if t == f64::INFINITY {
            zero += 1;
        }
        sum += t;
    }
    Nll { value: sum / n as f64, zero_probability: zero }
}

pub fn classification_nll(probs: &[Vec<f64>], labels: &[usize]) -> Result<Nll> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::InvalidArgument(format!("{} predictions for {} labels", probs.len(), labels.len())));
    }
    for (p, &l) in probs.iter().zip(labels) {
        if l >= p.len() {
            return Err(Error::InvalidArgument(format!("label {l} outside {} classes", p.len())));
        }
    }
    Ok(finish_nll(probs.iter().zip(labels).map(|(p, &l)| -p[l].ln()), labels.len()))
}

/// `−ln N(y; μ, σ²)`.
pub fn gaussian_nll(mean: f64, std: f64, y: f64) -> f64 {
    let z = (y - mean) / std;
    0.5 * z * z + std.ln() + 0.5 * (2.0 * PI).ln()
}

/// NLL under an equal-weight mixture of `N(sₖ, σ²)` per target.
pub fn mixture_nll(samples: &[Vec<f64>], sigma: f64, targets: &[f64]) -> Result<Nll> {
    if samples.len() != targets.len() || targets.is_empty() {
        return Err(Error::InvalidArgument(format!("{} predictives for {} targets", samples.len(), targets.len())));
    }
    if !(sigma > 0.0) || samples.iter().any(|s| s.is_empty()) {
        return Err(Error::InvalidArgument("mixture needs a positive scale and at least one component".into()));
    }
    let terms = samples.iter().zip(targets).map(|(s, &y)| {
        let logs: Vec<f64> = s.iter().map(|&m| -gaussian_nll(m, sigma, y)).collect();
        let mx = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logs.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
        -(lse - (s.len() as f64).ln())
    });
    Ok(finish_nll(terms, targets.len()))
}

/// Linear-interpolation order statistic of an ascending sample.
pub fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityCurve {
    pub levels: Vec<f64>,
    pub observed: Vec<f64>,
    pub bin_weights: Vec<f64>,
}

impl ReliabilityCurve {
    pub fn new(levels: Vec<f64>, observed: Vec<f64>, bin_weights: Vec<f64>) -> Result<Self> {
        let c = Self { levels, observed, bin_weights };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.levels.len();
        if n == 0 || self.observed.len() != n || self.bin_weights.len() != n {
            return Err(Error::InvalidArgument("curve columns must be non-empty and of equal length".into()));
        }
        if self.levels.windows(2).any(|w| !(w[0] < w[1])) || self.levels.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::InvalidArgument("levels must increase strictly within [0, 1]".into()));
        }
        if self.observed.iter().any(|o| !(0.0..=1.0).contains(o)) || self.bin_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidArgument("observed values must lie in [0, 1] and weights be non-negative".into()));
        }
        let total: f64 = self.bin_weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("weights sum to {total}")));
        }
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        for i in 0..self.levels.len() {
            w.write_record([self.levels[i].to_string(), self.observed[i].to_string(), self.bin_weights[i].to_string()]).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("ascii"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(csv_err)?;
        if header.iter().ne(CSV_HEADER) {
            return Err(Error::InvalidArgument(format!("unexpected reliability header {header:?}")));
        }
        let (mut levels, mut observed, mut weights) = (vec![], vec![], vec![]);
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let num = |i: usize| rec.get(i).and_then(|s| s.parse::<f64>().ok()).ok_or_else(|| Error::InvalidArgument(format!("bad reliability row {rec:?}")));
            levels.push(num(0)?);
            observed.push(num(1)?);
            weights.push(num(2)?);
        }
        Self::new(levels, observed, weights)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv()?.as_bytes())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv: {e}"))
}

/// Quantile coverage: at each level `p`, the fraction of targets at or below
/// the predictive `p`-quantile. Levels 0 and 1 map to 0 and 1.
pub fn regression_reliability(samples: &[Vec<f64>], targets: &[f64], levels: &[f64]) -> Result<ReliabilityCurve> {
    if samples.len() != targets.len() {
        return Err(Error::InvalidArgument(format!("{} predictives for {} targets", samples.len(), targets.len())));
    }
    if targets.len() < MIN_REGRESSION_POINTS {
        return Err(Error::InvalidArgument(format!("{} points, at least {MIN_REGRESSION_POINTS} required", targets.len())));
    }
    if samples.iter().any(|s| s.is_empty()) {
        return Err(Error::InvalidArgument("every point needs predictive samples".into()));
    }
    let sorted: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.sort_by(f64::total_cmp);
            s
        })
        .collect();
    let n = targets.len() as f64;
    let observed = levels
        .iter()
        .map(|&p| match p {
            0.0 => 0.0,
            1.0 => 1.0,
            _ => sorted.iter().zip(targets).filter(|(s, &y)| y <= empirical_quantile(s, p)).count() as f64 / n,
        })
        .collect();
    let w = 1.0 / levels.len().max(1) as f64;
    ReliabilityCurve::new(levels.to_vec(), observed, vec![w; levels.len()])
}

/// `n` evenly spaced levels in `[0, 1]` including both ends.
pub fn uniform_levels(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

/// Equal-width bins over max-probability. Occupied bins report their mean
/// confidence as level; empty bins sit at their center with zero weight.
pub fn classification_reliability(probs: &[Vec<f64>], labels: &[usize], n_bins: usize) -> Result<ReliabilityCurve> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} predictions for {} labels", probs.len(), labels.len())));
    }
    if n_bins == 0 {
        return Err(Error::InvalidArgument("at least one bin required".into()));
    }
    let mut conf_sum = vec![0.0; n_bins];
    let mut correct = vec![0usize; n_bins];
    let mut count = vec![0usize; n_bins];
    for (p, &l) in probs.iter().zip(labels) {
        let total: f64 = p.iter().sum();
        if p.is_empty() || p.iter().any(|x| !(0.0..=1.0 + 1e-9).contains(x)) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument("predictions must lie on the probability simplex".into()));
        }
        let (arg, conf) = argmax(p);
        let b = ((conf * n_bins as f64).floor() as usize).min(n_bins - 1);
        conf_sum[b] += conf;
        count[b] += 1;
        if arg == l {
            correct[b] += 1;
        }
    }
    let n = probs.len() as f64;
    let mut levels = Vec::with_capacity(n_bins);
    let mut observed = Vec::with_capacity(n_bins);
    let mut weights = Vec::with_capacity(n_bins);
    for b in 0..n_bins {
        if count[b] == 0 {
            levels.push((b as f64 + 0.5) / n_bins as f64);
            observed.push(0.0);
            weights.push(0.0);
        } else {
            levels.push((conf_sum[b] / count[b] as f64).min(1.0));
            observed.push(correct[b] as f64 / count[b] as f64);
            weights.push(count[b] as f64 / n);
        }
    }
    ReliabilityCurve::new(levels, observed, weights)
}

/// Index and value of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> (usize, f64) {
    p.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
}

/// `(ECE, MCE)` over bins with positive weight.
pub fn ece_mce(curve: &ReliabilityCurve) -> (f64, f64) {
    let mut ece = 0.0;
    let mut mce: f64 = 0.0;
    for i in 0..curve.levels.len() {
        if curve.bin_weights[i] > 0.0 {
            let gap = (curve.observed[i] - curve.levels[i]).abs();
            ece += curve.bin_weights[i] * gap;
            mce = mce.max(gap);
        }
    }
    (ece, mce)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn nll_examples() {
        let perfect = classification_nll(&[vec![0.0, 1.0, 0.0]], &[1]).unwrap();
        assert_eq!(perfect.value, 0.0);
        let uniform = classification_nll(&[vec![0.2; 5]], &[3]).unwrap();
        assert!((uniform.value - 5f64.ln()).abs() < 1e-12);
        assert!((uniform.value - 1.6094).abs() < 1e-4);
        let g = mixture_nll(&[vec![2.5]], 1.0, &[2.5]).unwrap();
        assert!((g.value - 0.5 * (2.0 * PI).ln()).abs() < 1e-12);
        assert!((g.value - 0.9189).abs() < 1e-4);
    }

    #[test]
    fn zero_probability_is_flagged_not_clamped() {
        let n = classification_nll(&[vec![1.0, 0.0], vec![0.5, 0.5]], &[1, 0]).unwrap();
        assert_eq!(n.value, f64::INFINITY);
        assert_eq!(n.zero_probability, 1);
    }

    #[test]
    fn mixture_of_identical_components_is_single_gaussian() {
        let m = mixture_nll(&[vec![0.3; 7]], 0.7, &[1.1]).unwrap();
        assert!((m.value - gaussian_nll(0.3, 0.7, 1.1)).abs() < 1e-12);
    }

    #[test]
    fn quantile_interpolates() {
        let s = [1.0, 2.0, 4.0];
        assert_eq!(empirical_quantile(&s, 0.0), 1.0);
        assert_eq!(empirical_quantile(&s, 0.75), 3.0);
        assert_eq!(empirical_quantile(&s, 1.0), 4.0);
    }

    #[test]
    fn calibrated_simulation_hugs_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let mut samples = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for _ in 0..n {
            let mu: f64 = rng.random_range(-3.0..3.0);
            let d = Normal::new(mu, 0.5).unwrap();
            samples.push((0..200).map(|_| d.sample(&mut rng)).collect::<Vec<f64>>());
            targets.push(d.sample(&mut rng));
        }
        let c = regression_reliability(&samples, &targets, &uniform_levels(11)).unwrap();
        for (l, o) in c.levels.iter().zip(&c.observed) {
            assert!((l - o).abs() <= 0.03, "{l} → {o}");
        }
    }

    #[test]
    fn point_masses_give_degenerate_coverage() {
        let targets: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let below: Vec<Vec<f64>> = targets.iter().map(|y| vec![y - 1.0]).collect();
        let above: Vec<Vec<f64>> = targets.iter().map(|y| vec![y + 1.0]).collect();
        let levels = [0.1, 0.5, 0.9];
        assert!(regression_reliability(&above, &targets, &levels).unwrap().observed.iter().all(|&o| o == 1.0));
        assert!(regression_reliability(&below, &targets, &levels).unwrap().observed.iter().all(|&o| o == 0.0));
        let ends = regression_reliability(&below, &targets, &[0.0, 1.0]).unwrap();
        assert_eq!(ends.observed, vec![0.0, 1.0]);
        assert!(regression_reliability(&below[..10], &targets[..10], &levels).is_err());
    }

    #[test]
    fn confident_and_correct_fills_one_bin() {
        let probs = vec![vec![1.0, 0.0]; 20];
        let c = classification_reliability(&probs, &[0; 20], 10).unwrap();
        assert_eq!(c.bin_weights.iter().filter(|&&w| w > 0.0).count(), 1);
        assert_eq!(c.observed[9], 1.0);
        assert_eq!(ece_mce(&c), (0.0, 0.0));
    }

    #[test]
    fn counted_bin() {
        let probs = vec![vec![0.55, 0.45]; 100];
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i >= 52)).collect();
        let c = classification_reliability(&probs, &labels, 10).unwrap();
        assert!((c.observed[5] - 0.52).abs() < 1e-12);
        let (ece, mce) = ece_mce(&c);
        assert!((ece - 0.03).abs() < 1e-12 && (mce - 0.03).abs() < 1e-12);
        assert_eq!(c.bin_weights.iter().filter(|&&w| w == 0.0).count(), 9);
    }

    #[test]
    fn ece_mce_examples() {
        let c = ReliabilityCurve::new(vec![0.25, 0.75], vec![0.35, 0.45], vec![0.5, 0.5]).unwrap();
        let (ece, mce) = ece_mce(&c);
        assert!((ece - 0.2).abs() < 1e-12 && (mce - 0.3).abs() < 1e-12);
        let c = ReliabilityCurve::new(vec![0.6], vec![0.6], vec![1.0]).unwrap();
        assert_eq!(ece_mce(&c), (0.0, 0.0));
        let c = ReliabilityCurve::new(vec![0.6], vec![0.4], vec![1.0]).unwrap();
        let (ece, mce) = ece_mce(&c);
        assert!((ece - 0.2).abs() < 1e-12 && ece == mce);
    }

    #[test]
    fn curve_validation() {
        assert!(ReliabilityCurve::new(vec![0.5, 0.4], vec![0.5, 0.5], vec![0.5, 0.5]).is_err());
        assert!(ReliabilityCurve::new(vec![0.5], vec![1.5], vec![1.0]).is_err());
        assert!(ReliabilityCurve::new(vec![0.5], vec![0.5], vec![0.7]).is_err());
        assert!(classification_reliability(&[], &[], 10).is_err());
        assert!(classification_reliability(&[vec![0.7, 0.7]], &[0], 10).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let probs: Vec<Vec<f64>> = (0..300)
            .map(|_| {
                let a: f64 = rng.random();
                vec![a, 1.0 - a]
            })
            .collect();
        let labels: Vec<usize> = (0..300).map(|_| rng.random_range(0..2)).collect();
        let c = classification_reliability(&probs, &labels, 10).unwrap();
        let text = c.to_csv().unwrap();
        assert!(text.starts_with("level,observed,weight\n"));
        let back = ReliabilityCurve::from_csv(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(ece_mce(&back), ece_mce(&c));
    }

    fn random_probs(rng: &mut ChaCha8Rng, n: usize, k: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
        let probs = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>().powi(3)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            })
            .collect();
        (probs, (0..n).map(|_| rng.random_range(0..k)).collect())
    }

    proptest! {
        #[test]
        fn ece_bounded_by_mce(seed in 0u64..10_000, n in 1usize..400, k in 2usize..6, bins in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, l) = random_probs(&mut rng, n, k);
            let (ece, mce) = ece_mce(&classification_reliability(&p, &l, bins).unwrap());
            prop_assert!(0.0 <= ece && ece <= mce + 1e-15 && mce <= 1.0);
        }

        #[test]
        fn coverage_invariant_under_increasing_maps(seed in 0u64..10_000, a in 0.1..10.0f64, b in -5.0..5.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples: Vec<Vec<f64>> = (0..40).map(|_| (0..9).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let targets: Vec<f64> = (0..40).map(|_| rng.random_range(-2.0..2.0)).collect();
            let levels = uniform_levels(9);
            let base = regression_reliability(&samples, &targets, &levels).unwrap();

            let affine = |x: f64| a * x + b;
            let ts: Vec<Vec<f64>> = samples.iter().map(|s| s.iter().map(|&x| affine(x)).collect()).collect();
            let tt: Vec<f64> = targets.iter().map(|&y| affine(y)).collect();
            let moved = regression_reliability(&ts, &tt, &levels).unwrap();
            prop_assert_eq!(&base.observed, &moved.observed);

            // A nonlinear map can only move targets that fall strictly inside
            // an interpolation gap.
            let cube = |x: f64| x * x * x + x;
            let cs: Vec<Vec<f64>> = samples.iter().map(|s| s.iter().map(|&x| cube(x)).collect()).collect();
            let ct: Vec<f64> = targets.iter().map(|&y| cube(y)).collect();
            let bent = regression_reliability(&cs, &ct, &levels).unwrap();
            for (li, &p) in levels.iter().enumerate() {
                let in_gap = samples.iter().zip(&targets).filter(|(s, &y)| {
                    let mut s = s.to_vec();
                    s.sort_by(f64::total_cmp);
                    let h = (s.len() - 1) as f64 * p;
                    let (lo, hi) = (s[h.floor() as usize], s[h.ceil() as usize]);
                    lo < y && y < hi
                }).count();
                prop_assert!((base.observed[li] - bent.observed[li]).abs() * 40.0 <= in_gap as f64 + 1e-9);
            }
        }
    }
}
