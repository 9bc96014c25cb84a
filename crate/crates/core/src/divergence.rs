//! Row-wise KL divergence and the symmetric matrix KL (m-KL).

use serde::{Deserialize, Serialize};

use crate::attention::Matrix;
use crate::error::{dim_err, Error, Result};

/// Lower clamp applied to the second argument inside the logarithm.
pub const KL_EPSILON: f64 = 1e-12;

/// Tolerance on a row summing to one before it counts as a distribution.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-6;

/// A symmetric matrix-KL value in nats.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct DivergenceValue {
    #[serde(rename = "mkl")]
    pub value: f64,
}

impl From<DivergenceValue> for f64 {
    fn from(d: DivergenceValue) -> f64 {
        d.value
    }
}

fn check_distribution(row: &[f64], what: &str) -> Result<()> {
    if let Some(k) = row.iter().position(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Domain(format!(
            "{what} entry {k} is {} (must be a finite non-negative probability)",
            row[k]
        )));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(Error::Domain(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

/// `KL(p || q) = sum_k p_k ln(p_k / max(q_k, eps))`, with `0 ln 0 = 0`.
pub fn kl_row(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(dim_err(format!(
            "kl_row length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    Ok(kl_row_unchecked(p, q))
}

pub(crate) fn kl_row_unchecked(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pk, _)| pk > 0.0)
        .map(|(&pk, &qk)| pk * (pk.ln() - qk.max(KL_EPSILON).ln()))
        .sum()
}

/// Symmetric matrix KL: `sum_i KL(s_i || s'_i) + KL(s'_i || s_i)` over rows.
pub fn mkl(s: &Matrix, s_prime: &Matrix) -> Result<DivergenceValue> {
    if s.shape() != s_prime.shape() {
        return Err(dim_err(format!(
            "mkl shape mismatch: {:?} vs {:?}",
            s.shape(),
            s_prime.shape()
        )));
    }
    let mut total = 0.0;
    for i in 0..s.rows() {
        let (a, b) = (s.row(i), s_prime.row(i));
        check_distribution(a, &format!("row {i} of s"))?;
        check_distribution(b, &format!("row {i} of s'"))?;
        total += kl_row_unchecked(a, b) + kl_row_unchecked(b, a);
    }
    Ok(DivergenceValue { value: total })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn identical_rows_have_zero_kl() {
        assert_eq!(kl_row(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
    }

    #[test]
    fn kl_row_matches_direct_summation() {
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        let got = kl_row(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.5108).abs() < 1e-4);
    }

    #[test]
    fn zero_probability_terms_drop_out() {
        let got = kl_row(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((got - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn epsilon_keeps_one_hot_disagreement_finite() {
        let got = kl_row(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((got + KL_EPSILON.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_row_errors() {
        assert!(matches!(kl_row(&[1.0], &[0.5, 0.5]), Err(Error::Dimension(_))));
        assert!(matches!(
            kl_row(&[1.5, -0.5], &[0.5, 0.5]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(kl_row(&[0.5, 0.6], &[0.5, 0.5]), Err(Error::Domain(_))));
    }

    #[test]
    fn mkl_examples() {
        let a = m(&[&[0.2, 0.3, 0.5], &[0.6, 0.1, 0.3]]);
        assert_eq!(mkl(&a, &a).unwrap().value, 0.0);

        let s = m(&[&[0.5, 0.5]]);
        let t = m(&[&[0.9, 0.1]]);
        let fwd = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        let bwd = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        let got = mkl(&s, &t).unwrap().value;
        assert!((got - (fwd + bwd)).abs() < 1e-15);
        assert!((got - 0.8789).abs() < 1e-4);
    }

    #[test]
    fn mkl_errors() {
        let a = m(&[&[0.5, 0.5]]);
        assert!(matches!(
            mkl(&a, &m(&[&[1.0]])),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            mkl(&a, &m(&[&[0.7, 0.7]])),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn serializes_as_mkl_field() {
        let v = DivergenceValue { value: 0.25 };
        assert_eq!(serde_json::to_string(&v).unwrap(), r#"{"mkl":0.25}"#);
    }
}
