//! Cross-modal attention congruence losses.
//!
//! Each intra-modal block is compared with the opposite modality's block
//! carried through the cross-modal block ("change of basis"):
//!
//! * language side: `m-KL(softmax(S_LV S_VV S_LVᵀ), softmax(S_LL))`
//! * vision side:   `m-KL(softmax(S_VL S_LL S_VLᵀ), softmax(S_VV))`
//!
//! The closed-form triple products are equal to an explicit soft
//! cross-modal equivalence sum, `sum_p sum_k S_VL[i,p] S_LL[p,k] S_VL[j,k]`:
//! the attention from the language counterpart of visual token `i` to the
//! language counterpart of visual token `j`, weighted over every possible
//! pairing. [`soft_equivalence_oracle_v`] evaluates that sum by brute-force
//! loops and serves as the reference for the closed form. The hard
//! (argmax) equivalence is the special case of one-hot cross-modal rows.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{argmax, matmul, row_softmax, BlockPartition, Matrix};
use crate::divergence::mkl;
use crate::error::{Error, Result};
use crate::sampling;

/// The two directed congruence losses and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CacrLoss {
    pub loss_l: f64,
    pub loss_v: f64,
    pub total: f64,
}

impl CacrLoss {
    pub fn new(loss_l: f64, loss_v: f64) -> Self {
        Self {
            loss_l,
            loss_v,
            total: loss_l + loss_v,
        }
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0.0)
    }
}

/// How the soft-equivalence oracle aggregates the weighted products.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Plain weighted sum; equal to the closed-form triple product.
    #[default]
    Sum,
    /// Weighted sum divided by the number of summed terms. Differs from
    /// the closed form by a uniform factor, which softmax does not ignore.
    Mean,
}

/// `S_LV · S_VV · S_LVᵀ`, the vision block expressed over language indices.
pub fn change_of_basis_l(p: &BlockPartition) -> Result<Matrix> {
    conjugate(&p.s_lv, &p.s_vv)
}

/// `S_VL · S_LL · S_VLᵀ`, the language block expressed over visual indices.
pub fn change_of_basis_v(p: &BlockPartition) -> Result<Matrix> {
    conjugate(&p.s_vl, &p.s_ll)
}

fn conjugate(cross: &Matrix, intra: &Matrix) -> Result<Matrix> {
    matmul(&matmul(cross, intra)?, &cross.transpose())
}

/// Language-side congruence loss.
pub fn cacr_l(p: &BlockPartition) -> Result<f64> {
    let projected = row_softmax(&change_of_basis_l(p)?)?;
    let own = row_softmax(&p.s_ll)?;
    Ok(mkl(&projected, &own)?.value)
}

/// Vision-side congruence loss.
pub fn cacr_v(p: &BlockPartition) -> Result<f64> {
    let projected = row_softmax(&change_of_basis_v(p)?)?;
    let own = row_softmax(&p.s_vv)?;
    Ok(mkl(&projected, &own)?.value)
}

pub fn cacr_total(p: &BlockPartition) -> Result<CacrLoss> {
    Ok(CacrLoss::new(cacr_l(p)?, cacr_v(p)?))
}

/// Congruence loss averaged over attention heads of the same layer.
pub fn cacr_mean_over_heads(heads: &[BlockPartition]) -> Result<CacrLoss> {
    if heads.is_empty() {
        return Err(Error::Data("no attention heads supplied".into()));
    }
    let n = heads.len() as f64;
    let mut l = 0.0;
    let mut v = 0.0;
    for h in heads {
        let c = cacr_total(h)?;
        l += c.loss_l;
        v += c.loss_v;
    }
    Ok(CacrLoss::new(l / n, v / n))
}

/// Brute-force soft cross-modal equivalence target on the vision side.
pub fn soft_equivalence_oracle_v(p: &BlockPartition) -> Matrix {
    soft_equivalence_oracle_v_with(p, Aggregation::Sum)
}

pub fn soft_equivalence_oracle_v_with(p: &BlockPartition, agg: Aggregation) -> Matrix {
    soft_equivalence_loops(&p.s_vl, &p.s_ll, agg)
}

/// Brute-force soft cross-modal equivalence target on the language side.
pub fn soft_equivalence_oracle_l(p: &BlockPartition) -> Matrix {
    soft_equivalence_oracle_l_with(p, Aggregation::Sum)
}

pub fn soft_equivalence_oracle_l_with(p: &BlockPartition, agg: Aggregation) -> Matrix {
    soft_equivalence_loops(&p.s_lv, &p.s_vv, agg)
}

// out[i][j] = sum_p sum_k cross[i][p] * intra[p][k] * cross[j][k]
fn soft_equivalence_loops(cross: &Matrix, intra: &Matrix, agg: Aggregation) -> Matrix {
    let n_out = cross.rows();
    let n_in = intra.rows();
    let norm = match agg {
        Aggregation::Sum => 1.0,
        Aggregation::Mean => 1.0 / (n_in * n_in) as f64,
    };
    let mut out = Matrix::zeros(n_out, n_out);
    for i in 0..n_out {
        for j in 0..n_out {
            let mut acc = 0.0;
            for p in 0..n_in {
                for k in 0..n_in {
                    let weight = cross.get(i, p) * cross.get(j, k);
                    acc += weight * intra.get(p, k);
                }
            }
            out.set(i, j, acc * norm);
        }
    }
    out
}

/// Hard (argmax) equivalence target on the vision side:
/// `out[i][j] = S_LL[k_i][k_j]` with `k_i = argmax S_VL[i]`.
pub fn hard_equivalence_v(p: &BlockPartition) -> Matrix {
    hard_lookup(&p.s_vl, &p.s_ll)
}

/// Hard equivalence target on the language side.
pub fn hard_equivalence_l(p: &BlockPartition) -> Matrix {
    hard_lookup(&p.s_lv, &p.s_vv)
}

fn hard_lookup(cross: &Matrix, intra: &Matrix) -> Matrix {
    let picks: Vec<usize> = (0..cross.rows()).map(|i| argmax(cross.row(i))).collect();
    Matrix::from_fn(picks.len(), picks.len(), |i, j| intra.get(picks[i], picks[j]))
}

/// Per-token argmax counterpart in the opposite modality.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrespondenceMap {
    pub lang_to_vis: Vec<usize>,
    pub vis_to_lang: Vec<usize>,
}

impl CorrespondenceMap {
    pub fn n_lang(&self) -> usize {
        self.lang_to_vis.len()
    }

    pub fn n_vis(&self) -> usize {
        self.vis_to_lang.len()
    }

    /// Checks that every index points inside the opposite modality.
    pub fn validate(&self, n_lang: usize, n_vis: usize) -> Result<()> {
        if self.lang_to_vis.len() != n_lang || self.vis_to_lang.len() != n_vis {
            return Err(Error::Dimension(format!(
                "correspondence covers {}/{} tokens, expected {n_lang}/{n_vis}",
                self.lang_to_vis.len(),
                self.vis_to_lang.len()
            )));
        }
        if let Some(&k) = self.lang_to_vis.iter().find(|&&k| k >= n_vis) {
            return Err(Error::Dimension(format!(
                "language token maps to visual index {k} >= {n_vis}"
            )));
        }
        if let Some(&k) = self.vis_to_lang.iter().find(|&&k| k >= n_lang) {
            return Err(Error::Dimension(format!(
                "visual token maps to language index {k} >= {n_lang}"
            )));
        }
        Ok(())
    }
}

pub fn argmax_correspondence(p: &BlockPartition) -> CorrespondenceMap {
    let rows = |m: &Matrix| (0..m.rows()).map(|i| argmax(m.row(i))).collect::<Vec<_>>();
    CorrespondenceMap {
        lang_to_vis: rows(&p.s_lv),
        vis_to_lang: rows(&p.s_vl),
    }
}

/// Normwise relative error `||a - b||_F / ||b||_F` (0 when both vanish).
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = b.frobenius_norm();
    if diff == 0.0 {
        0.0
    } else if scale == 0.0 {
        f64::INFINITY
    } else {
        diff / scale
    }
}

/// Outcome of comparing the brute-force oracle with the closed form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheckReport {
    pub cases: usize,
    pub seed: u64,
    pub max_rel_err_v: f64,
    pub max_rel_err_l: f64,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Tolerance on the oracle/closed-form relative error.
pub const ORACLE_TOLERANCE: f64 = 1e-10;

/// Compares loop oracle and closed form on `cases` random partitions with
/// `N_L, N_V` in `[1, 8]` and entries in `[-3, 3]`. Case `c` draws from
/// [`sampling::case_rng`]`(seed, c)`, so the result does not depend on how
/// cases are scheduled across threads.
pub fn oracle_check(cases: usize, seed: u64) -> Result<OracleCheckReport> {
    let errors: Vec<(f64, f64)> = (0..cases)
        .into_par_iter()
        .map(|c| {
            let mut rng = sampling::case_rng(seed, c as u64);
            let n_lang = rng.gen_range(1..=8);
            let n_vis = rng.gen_range(1..=8);
            let p = sampling::random_partition(&mut rng, n_lang, n_vis, 3.0);
            let ev = relative_error(&soft_equivalence_oracle_v(&p), &change_of_basis_v(&p)?);
            let el = relative_error(&soft_equivalence_oracle_l(&p), &change_of_basis_l(&p)?);
            Ok((ev, el))
        })
        .collect::<Result<_>>()?;
    let max_v = errors.iter().map(|e| e.0).fold(0.0, f64::max);
    let max_l = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let max = max_v.max(max_l);
    Ok(OracleCheckReport {
        cases,
        seed,
        max_rel_err_v: max_v,
        max_rel_err_l: max_l,
        max_rel_err: max,
        tolerance: ORACLE_TOLERANCE,
        pass: max < ORACLE_TOLERANCE,
    })
}
