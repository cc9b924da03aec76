//! Convergence diagnostics: rank-normalized split R-hat and bulk ESS.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticError {
    #[error("R-hat needs at least 2 chains of at least 4 draws (got {chains} x {draws})")]
    InsufficientDraws { chains: usize, draws: usize },
    #[error("chains have unequal lengths")]
    RaggedChains,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rhat {
    pub value: f64,
    /// Every draw in every chain is identical; `value` is reported as 1.
    pub degenerate: bool,
}

fn check_shape(chains: &[&[f64]]) -> Result<usize, DiagnosticError> {
    let n = chains.first().map_or(0, |c| c.len());
    if chains.len() < 2 || n < 4 {
        return Err(DiagnosticError::InsufficientDraws {
            chains: chains.len(),
            draws: n,
        });
    }
    if chains.iter().any(|c| c.len() != n) {
        return Err(DiagnosticError::RaggedChains);
    }
    Ok(n)
}

/// Halves each chain, dropping the middle draw of odd-length chains.
fn split(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Classic potential scale reduction on already-split chains.
fn psrf(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len() as f64;
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let grand = mean(&means);
    let b = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

/// Replaces every draw by the normal score of its pooled rank; ties share
/// their average rank.
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let total: usize = chains.iter().map(Vec::len).sum();
    let mut idx: Vec<(f64, usize, usize)> = Vec::with_capacity(total);
    for (ci, c) in chains.iter().enumerate() {
        for (di, &x) in c.iter().enumerate() {
            idx.push((x, ci, di));
        }
    }
    idx.sort_by(|a, b| a.0.total_cmp(&b.0));
    let normal = Normal::standard();
    let s = total as f64;
    let mut out: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && idx[j + 1].0 == idx[i].0 {
            j += 1;
        }
        // 1-based average rank of the tie block
        let rank = (i + j) as f64 / 2.0 + 1.0;
        let z = normal.inverse_cdf((rank - 0.375) / (s + 0.25));
        for &(_, ci, di) in &idx[i..=j] {
            out[ci][di] = z;
        }
        i = j + 1;
    }
    out
}

/// Rank-normalized split R-hat: the largest of the bulk, folded and raw
/// split statistics. Rank normalization bounds the bulk statistic for chains
/// that do not overlap at all, so the raw statistic is kept as a floor.
pub fn compute_rhat(chains: &[&[f64]]) -> Result<Rhat, DiagnosticError> {
    check_shape(chains)?;
    let first = chains[0][0];
    if chains.iter().all(|c| c.iter().all(|&x| x == first)) {
        return Ok(Rhat {
            value: 1.0,
            degenerate: true,
        });
    }
    let owned: Vec<Vec<f64>> = chains.iter().map(|c| c.to_vec()).collect();
    let bulk = psrf(&split(&rank_normalize(&owned)));

    let mut pooled: Vec<f64> = owned.iter().flatten().copied().collect();
    pooled.sort_by(f64::total_cmp);
    let median = crate::math::quantile_sorted(&pooled, 0.5);
    let folded: Vec<Vec<f64>> = owned
        .iter()
        .map(|c| c.iter().map(|x| (x - median).abs()).collect())
        .collect();
    let tail = psrf(&split(&rank_normalize(&folded)));
    let raw = psrf(&split(&owned));
    Ok(Rhat {
        value: bulk.max(tail).max(raw),
        degenerate: false,
    })
}

/// Effective sample size of already-split chains, using Geyer's initial
/// monotone sequence on the multi-chain autocorrelation.
fn ess_of(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains[0].len();
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let autocov = |c: &[f64], mu: f64, lag: usize| -> f64 {
        (0..n - lag).map(|t| (c[t] - mu) * (c[t + lag] - mu)).sum::<f64>() / n as f64
    };
    let mean_autocov = |lag: usize| -> f64 {
        chains
            .iter()
            .zip(&means)
            .map(|(c, &mu)| autocov(c, mu, lag))
            .sum::<f64>()
            / m as f64
    };
    let nf = n as f64;
    let gamma0 = mean_autocov(0);
    let w = gamma0 * nf / (nf - 1.0);
    if w == 0.0 {
        return f64::NAN;
    }
    let grand = mean(&means);
    let b_over_n = if m > 1 {
        means.iter().map(|x| (x - grand).powi(2)).sum::<f64>() / (m as f64 - 1.0)
    } else {
        0.0
    };
    let var_plus = (nf - 1.0) / nf * w + b_over_n;
    let rho = |lag: usize| 1.0 - (w - mean_autocov(lag)) / var_plus;

    let mut rho_prev_pair = f64::INFINITY;
    let mut sum_pairs = 0.0;
    let mut t = 0;
    while t + 1 < n {
        let pair = if t == 0 { 1.0 + rho(1) } else { rho(t) + rho(t + 1) };
        if pair < 0.0 {
            break;
        }
        let pair = pair.min(rho_prev_pair);
        sum_pairs += pair;
        rho_prev_pair = pair;
        t += 2;
    }
    let tau = (-1.0 + 2.0 * sum_pairs).max(1.0 / (m as f64 * nf).log10().max(1.0));
    m as f64 * nf / tau
}

/// Bulk effective sample size (rank-normalized, split chains).
pub fn bulk_ess(chains: &[&[f64]]) -> Result<f64, DiagnosticError> {
    check_shape(chains)?;
    let owned: Vec<Vec<f64>> = chains.iter().map(|c| c.to_vec()).collect();
    let first = owned[0][0];
    if owned.iter().flatten().all(|&x| x == first) {
        return Ok(f64::NAN);
    }
    Ok(ess_of(&split(&rank_normalize(&owned))))
}

/// Effective sample size on the raw scale, for Monte Carlo standard errors
/// of means.
pub fn mean_ess(chains: &[&[f64]]) -> Result<f64, DiagnosticError> {
    check_shape(chains)?;
    let owned: Vec<Vec<f64>> = chains.iter().map(|c| c.to_vec()).collect();
    Ok(ess_of(&split(&owned)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn normal_chain(seed: u64, n: usize, mu: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| mu + crate::math::std_normal(&mut rng)).collect()
    }

    #[test]
    fn constant_chains_are_degenerate() {
        let c = vec![0.5; 100];
        let r = compute_rhat(&[&c, &c, &c, &c]).unwrap();
        assert_eq!(r.value, 1.0);
        assert!(r.degenerate);
    }

    #[test]
    fn same_distribution_is_near_one() {
        let chains: Vec<Vec<f64>> = (0..4).map(|s| normal_chain(s, 1000, 0.0)).collect();
        let refs: Vec<&[f64]> = chains.iter().map(Vec::as_slice).collect();
        let r = compute_rhat(&refs).unwrap();
        assert!(r.value < 1.02, "{}", r.value);
        assert!(!r.degenerate);
        let ess = bulk_ess(&refs).unwrap();
        assert!(ess > 3000.0, "{ess}");
    }

    #[test]
    fn separated_chains_flagged() {
        let a = normal_chain(1, 1000, 0.0);
        let b = normal_chain(2, 1000, 10.0);
        let r = compute_rhat(&[&a, &b]).unwrap();
        assert!(r.value > 2.0, "{}", r.value);
    }

    #[test]
    fn too_few_draws() {
        let c = vec![1.0, 2.0, 3.0];
        assert!(matches!(
            compute_rhat(&[&c, &c]),
            Err(DiagnosticError::InsufficientDraws { .. })
        ));
        let d = vec![1.0; 10];
        assert!(matches!(
            compute_rhat(&[&d]),
            Err(DiagnosticError::InsufficientDraws { .. })
        ));
    }

    #[test]
    fn autocorrelated_chain_has_low_ess() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut x = 0.0;
                (0..1000)
                    .map(|_| {
                        x = 0.95 * x + crate::math::std_normal(&mut rng);
                        x
                    })
                    .collect()
            })
            .collect();
        let refs: Vec<&[f64]> = chains.iter().map(Vec::as_slice).collect();
        // AR(1) with phi=0.95 has tau = 39
        let ess = mean_ess(&refs).unwrap();
        assert!(ess > 40.0 && ess < 250.0, "{ess}");
    }
}
