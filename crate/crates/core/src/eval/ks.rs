//! Two-sample Kolmogorov–Smirnov test.
//!
//! Small samples (`n·m ≤ 10000`) get the exact permutation p-value by
//! counting monotone lattice paths; ties are honored by testing the CDF gap
//! only where a run of equal pooled values ends. Larger samples use the
//! asymptotic Kolmogorov series with the effective-size correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_SAMPLE: usize = 5;
const EXACT_LIMIT: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
    pub m: usize,
}

/// Pooled sample sorted, with 0 marking `a` and 1 marking `b`, plus the
/// index one past the end of every tie group.
fn pooled(a: &[f64], b: &[f64]) -> (Vec<u8>, Vec<usize>) {
    let mut all: Vec<(f64, u8)> = a.iter().map(|&x| (x, 0)).chain(b.iter().map(|&x| (x, 1))).collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut ends = Vec::new();
    for k in 1..=all.len() {
        if k == all.len() || all[k].0 != all[k - 1].0 {
            ends.push(k);
        }
    }
    (all.into_iter().map(|(_, l)| l).collect(), ends)
}

/// Supremum of `|F_a − F_b|` evaluated at tie-group ends.
pub fn ks_statistic(labels: &[u8], ends: &[usize], n: usize, m: usize) -> f64 {
    let (mut i, mut j, mut k, mut d) = (0usize, 0usize, 0usize, 0.0f64);
    for &e in ends {
        while k < e {
            if labels[k] == 0 {
                i += 1
            } else {
                j += 1
            }
            k += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    d
}

/// `Q(λ) = 2 Σ_{k≥1} (−1)^{k−1} e^{−2k²λ²}`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=1000 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-12 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}


/// Exact `P(D ≥ d)` under random relabeling of the pooled sample with the
/// tie structure `ends`.
fn exact_p(d: f64, ends: &[usize], n: usize, m: usize) -> f64 {
    if d <= 0.0 {
        return 1.0;
    }
    let total = n + m;
    let mut boundary = vec![false; total + 1];
    for &e in ends {
        boundary[e] = true;
    }
    let violates = |i: usize, j: usize| (i as f64 / n as f64 - j as f64 / m as f64).abs() >= d - 1e-12;
    // Path probabilities: each full labeling is equally likely, so a path
    // prefix reaching (i, j) has weight C(k, i)·(ways to finish)/C(total, n);
    // the log-space completion factor keeps the sum exact in f64 range.
    let mut ln_fact = vec![0.0f64; total + 1];
    for v in 1..=total {
        ln_fact[v] = ln_fact[v - 1] + (v as f64).ln();
    }
    let ln_choose = |a: usize, b: usize| ln_fact[a] - ln_fact[b] - ln_fact[a - b];
    let ln_total = ln_choose(total, n);
    let mut ways = vec![0.0f64; n + 1];
    ways[0] = 1.0;
    let mut p = 0.0;
    for k in 1..=total {
        let mut next = vec![0.0f64; n + 1];
        let lo = k.saturating_sub(m);
        for i in lo..=k.min(n) {
            let j = k - i;
            let mut w = 0.0;
            if i > 0 {
                w += ways[i - 1];
            }
            if j > 0 && i < k {
                w += ways[i];
            }
            next[i] = w;
        }
        if boundary[k] {
            for i in lo..=k.min(n) {
                let j = k - i;
                if next[i] > 0.0 && violates(i, j) {
                    let rest = ln_choose(total - k, n - i);
                    p += (next[i].ln() + rest - ln_total).exp();
                    next[i] = 0.0;
                }
            }
        }
        ways = next;
    }
    p.clamp(0.0, 1.0)
}

pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    let (n, m) = (a.len(), b.len());
    if n < MIN_SAMPLE || m < MIN_SAMPLE {
        return Err(Error::arg(format!("KS test needs at least {MIN_SAMPLE} values per sample, got {n} and {m}")));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::arg("KS test samples must be finite"));
    }
    let (labels, ends) = pooled(a, b);
    let d = ks_statistic(&labels, &ends, n, m);
    let p_value = if n * m <= EXACT_LIMIT {
        exact_p(d, &ends, n, m)
    } else {
        let ne = (n * m) as f64 / (n + m) as f64;
        let s = ne.sqrt();
        kolmogorov_q(d * (s + 0.12 + 0.11 / s))
    };
    Ok(KsResult { statistic: d, p_value, n, m })
}

/// Pooled labels and tie-group ends, exposed for permutation oracles.
pub fn pooled_layout(a: &[f64], b: &[f64]) -> (Vec<u8>, Vec<usize>) {
    pooled(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_disjoint() {
        let a: Vec<f64> = (0..10).map(|x| x as f64).collect();
        let r = ks_two_sample(&a, &a).unwrap();
        assert_eq!((r.statistic, r.p_value), (0.0, 1.0));
        let a: Vec<f64> = (0..20).map(|x| x as f64 / 20.0).collect();
        let b: Vec<f64> = (0..20).map(|x| 2.0 + x as f64 / 20.0).collect();
        let r = ks_two_sample(&a, &b).unwrap();
        assert_eq!(r.statistic, 1.0);
        assert!(r.p_value < 1e-6);
        // Only the two fully separated labelings reach D = 1.
        let expected = 2.0 / 137_846_528_820.0;
        assert!((r.p_value - expected).abs() / expected < 1e-9);
        assert!(ks_two_sample(&a[..4], &b).is_err());
    }

    #[test]
    fn small_case_by_enumeration() {
        // n = m = 5: enumerate all 252 labelings directly.
        let a = [0.1, 0.4, 0.45, 0.8, 0.9];
        let b = [0.2, 0.3, 0.5, 0.6, 0.7];
        let r = ks_two_sample(&a, &b).unwrap();
        let (_, ends) = pooled(&a, &b);
        let mut hits = 0usize;
        let mut count = 0usize;
        for mask in 0u32..(1 << 10) {
            if mask.count_ones() != 5 {
                continue;
            }
            count += 1;
            let lab: Vec<u8> = (0..10).map(|k| ((mask >> k) & 1) as u8).collect();
            if ks_statistic(&lab, &ends, 5, 5) >= r.statistic - 1e-12 {
                hits += 1;
            }
        }
        assert_eq!(count, 252);
        assert!((r.p_value - hits as f64 / 252.0).abs() < 1e-12);
    }

    #[test]
    fn ties_only_tested_at_group_ends() {
        let a = [1.0, 1.0, 1.0, 2.0, 2.0];
        let b = [1.0, 1.0, 2.0, 2.0, 2.0];
        let r = ks_two_sample(&a, &b).unwrap();
        assert!((r.statistic - 0.2).abs() < 1e-15);
        assert!(r.p_value > 0.9);
    }

    #[test]
    fn kolmogorov_series_values() {
        assert_eq!(kolmogorov_q(0.0), 1.0);
        // Q(1) from the alternating series, summed independently to convergence.
        let q1: f64 = 2.0 * (1..50).map(|k: i32| (-1f64).powi(k - 1) * (-2.0 * (k * k) as f64).exp()).sum::<f64>();
        assert!((kolmogorov_q(1.0) - q1).abs() < 1e-12);
        assert!(kolmogorov_q(3.0) < 1e-6);
    }

    #[test]
    fn large_samples_use_asymptotics() {
        let a: Vec<f64> = (0..200).map(|x| x as f64).collect();
        let b: Vec<f64> = (0..200).map(|x| x as f64 + 30.0).collect();
        let r = ks_two_sample(&a, &b).unwrap();
        assert!((r.statistic - 0.15).abs() < 1e-12);
        let s = (100.0f64).sqrt();
        assert!((r.p_value - kolmogorov_q(0.15 * (s + 0.12 + 0.11 / s))).abs() < 1e-15);
    }
}
