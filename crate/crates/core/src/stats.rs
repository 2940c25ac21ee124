//! Rank correlation used by the perplexity / pass-rate analysis.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{PrepoError, Result};

/// 1-based ranks; tied values share the mean of the positions they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
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

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(PrepoError::SizeMismatch(format!("{} vs {} values", x.len(), y.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(PrepoError::Undefined("one variable is constant".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spearman {
    pub rho: f64,
    /// Two-sided p-value from the t approximation
    /// `t = ρ √((n-2)/(1-ρ²))`, `n-2` degrees of freedom. Approximate.
    pub p_value: f64,
    pub n: usize,
}

/// Spearman correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Spearman> {
    if x.len() != y.len() {
        return Err(PrepoError::SizeMismatch(format!("{} vs {} values", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(PrepoError::Undefined(format!("need at least 3 pairs, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(PrepoError::Domain("NaN in correlation input".into()));
    }
    let rho = pearson(&average_ranks(x), &average_ranks(y))?;
    let n = x.len();
    let df = (n - 2) as f64;
    let p_value = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok(Spearman { rho, p_value, n })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_with_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
        assert_eq!(average_ranks(&[1.0, 1.0, 1.0]), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn monotone_examples() {
        let x = [1.0, 2.0, 3.0];
        assert_eq!(spearman(&x, &[0.9, 0.5, 0.1]).unwrap().rho, -1.0);
        assert_eq!(spearman(&x, &[0.1, 0.5, 0.9]).unwrap().rho, 1.0);
    }

    #[test]
    fn constant_axis_is_undefined() {
        assert!(matches!(
            spearman(&[1.0, 2.0, 3.0], &[0.5, 0.5, 0.5]),
            Err(PrepoError::Undefined(_))
        ));
        assert!(spearman(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn p_value_reference() {
        // n = 10, ρ = 0.5: t = 0.5·√(8/0.75) = 1.632993, two-sided p ≈ 0.14120
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y = [0.0, 4.0, 1.0, 6.0, 2.0, 3.0, 9.0, 5.0, 7.0, 8.0];
        let s = spearman(&x, &y).unwrap();
        let d2: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
        let closed = 1.0 - 6.0 * d2 / (10.0 * 99.0);
        assert!((s.rho - closed).abs() < 1e-12);
        assert!(s.p_value > 0.0 && s.p_value < 1.0);
    }
}
