//! Analytic gradients of the congruence loss with respect to the raw
//! (pre-softmax) score blocks, and a central finite-difference checker.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{matmul, row_softmax, row_softmax_backward, BlockPartition, Matrix};
use crate::congruence::CacrLoss;
use crate::divergence::{mkl, KL_EPSILON};
use crate::error::{dim_err, Error, Result};
use crate::extended::{cacr_total_dd, DoubleDouble};
use crate::sampling;

/// Names one of the four blocks of a partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockId {
    LL,
    LV,
    VL,
    VV,
}

impl BlockId {
    pub const ALL: [BlockId; 4] = [BlockId::LL, BlockId::LV, BlockId::VL, BlockId::VV];

    pub fn of(self, p: &BlockPartition) -> &Matrix {
        match self {
            BlockId::LL => &p.s_ll,
            BlockId::LV => &p.s_lv,
            BlockId::VL => &p.s_vl,
            BlockId::VV => &p.s_vv,
        }
    }

    pub fn of_mut(self, p: &mut BlockPartition) -> &mut Matrix {
        match self {
            BlockId::LL => &mut p.s_ll,
            BlockId::LV => &mut p.s_lv,
            BlockId::VL => &mut p.s_vl,
            BlockId::VV => &mut p.s_vv,
        }
    }
}

/// Gradient of a scalar loss with respect to each score block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockGradients {
    pub d_s_ll: Matrix,
    pub d_s_lv: Matrix,
    pub d_s_vl: Matrix,
    pub d_s_vv: Matrix,
}

impl BlockGradients {
    pub fn zeros_like(p: &BlockPartition) -> Self {
        Self {
            d_s_ll: Matrix::zeros(p.n_lang(), p.n_lang()),
            d_s_lv: Matrix::zeros(p.n_lang(), p.n_vis()),
            d_s_vl: Matrix::zeros(p.n_vis(), p.n_lang()),
            d_s_vv: Matrix::zeros(p.n_vis(), p.n_vis()),
        }
    }

    pub fn block(&self, id: BlockId) -> &Matrix {
        match id {
            BlockId::LL => &self.d_s_ll,
            BlockId::LV => &self.d_s_lv,
            BlockId::VL => &self.d_s_vl,
            BlockId::VV => &self.d_s_vv,
        }
    }

    pub fn add(&self, other: &BlockGradients) -> Result<BlockGradients> {
        Ok(BlockGradients {
            d_s_ll: self.d_s_ll.add(&other.d_s_ll)?,
            d_s_lv: self.d_s_lv.add(&other.d_s_lv)?,
            d_s_vl: self.d_s_vl.add(&other.d_s_vl)?,
            d_s_vv: self.d_s_vv.add(&other.d_s_vv)?,
        })
    }

    pub fn scale(&self, k: f64) -> BlockGradients {
        BlockGradients {
            d_s_ll: self.d_s_ll.scale(k),
            d_s_lv: self.d_s_lv.scale(k),
            d_s_vl: self.d_s_vl.scale(k),
            d_s_vv: self.d_s_vv.scale(k),
        }
    }

    /// Euclidean norm over all four blocks.
    pub fn norm(&self) -> f64 {
        BlockId::ALL
            .iter()
            .map(|&b| self.block(b).frobenius_norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Gradient with respect to the joint score matrix, language first.
    pub fn to_joint(&self) -> Matrix {
        let as_partition = BlockPartition {
            s_ll: self.d_s_ll.clone(),
            s_lv: self.d_s_lv.clone(),
            s_vl: self.d_s_vl.clone(),
            s_vv: self.d_s_vv.clone(),
        };
        as_partition.reassemble().scores().clone()
    }
}

/// Gradient of the symmetric matrix KL with respect to both arguments,
/// consistent with the epsilon clamp and the `0 ln 0 = 0` convention.
fn mkl_backward(p: &Matrix, q: &Matrix) -> (Matrix, Matrix) {
    let directed = |a: f64, b: f64| -> f64 {
        // d/da [a ln a - a ln max(b, eps) + b ln b - b ln max(a, eps)]
        let mut g = 0.0;
        if a > 0.0 {
            g += a.ln() + 1.0 - b.max(KL_EPSILON).ln();
        }
        if b > 0.0 && a > KL_EPSILON {
            g -= b / a;
        }
        g
    };
    let gp = Matrix::from_fn(p.rows(), p.cols(), |i, j| directed(p.get(i, j), q.get(i, j)));
    let gq = Matrix::from_fn(p.rows(), p.cols(), |i, j| directed(q.get(i, j), p.get(i, j)));
    (gp, gq)
}

/// Value and block gradients of one directed congruence term,
/// `m-KL(softmax(C A Cᵀ), softmax(B))`, where `C` is the cross block,
/// `A` the opposite intra block and `B` the own intra block.
struct SideGrad {
    value: f64,
    d_cross: Matrix,
    d_other_intra: Matrix,
    d_own_intra: Matrix,
}

fn side(cross: &Matrix, other_intra: &Matrix, own_intra: &Matrix) -> Result<SideGrad> {
    let cross_t = cross.transpose();
    let cross_a = matmul(cross, other_intra)?;
    let projected = matmul(&cross_a, &cross_t)?;
    let p = row_softmax(&projected)?;
    let q = row_softmax(own_intra)?;
    let value = mkl(&p, &q)?.value;

    let (gp, gq) = mkl_backward(&p, &q);
    let d_proj = row_softmax_backward(&p, &gp);
    let d_own_intra = row_softmax_backward(&q, &gq);

    // projected = C A Cᵀ
    // dC = G C Aᵀ + Gᵀ C A,  dA = Cᵀ G C
    let d_cross = matmul(&matmul(&d_proj, cross)?, &other_intra.transpose())?
        .add(&matmul(&d_proj.transpose(), &cross_a)?)?;
    let d_other_intra = matmul(&matmul(&cross_t, &d_proj)?, cross)?;
    Ok(SideGrad {
        value,
        d_cross,
        d_other_intra,
        d_own_intra,
    })
}

/// Gradient of the language-side loss alone.
pub fn cacr_l_gradients(p: &BlockPartition) -> Result<(f64, BlockGradients)> {
    let s = side(&p.s_lv, &p.s_vv, &p.s_ll)?;
    let mut g = BlockGradients::zeros_like(p);
    g.d_s_lv = s.d_cross;
    g.d_s_vv = s.d_other_intra;
    g.d_s_ll = s.d_own_intra;
    Ok((s.value, g))
}

/// Gradient of the vision-side loss alone.
pub fn cacr_v_gradients(p: &BlockPartition) -> Result<(f64, BlockGradients)> {
    let s = side(&p.s_vl, &p.s_ll, &p.s_vv)?;
    let mut g = BlockGradients::zeros_like(p);
    g.d_s_vl = s.d_cross;
    g.d_s_ll = s.d_other_intra;
    g.d_s_vv = s.d_own_intra;
    Ok((s.value, g))
}

/// Loss and its gradient in a single pass.
pub fn cacr_value_and_gradients(p: &BlockPartition) -> Result<(CacrLoss, BlockGradients)> {
    let (l, gl) = cacr_l_gradients(p)?;
    let (v, gv) = cacr_v_gradients(p)?;
    let grads = gl.add(&gv)?;
    if !BlockId::ALL.iter().all(|&b| grads.block(b).is_finite()) {
        return Err(Error::Domain("congruence gradient is not finite".into()));
    }
    Ok((CacrLoss::new(l, v), grads))
}

/// Exact gradient of the total congruence loss with respect to every block.
pub fn cacr_gradients(p: &BlockPartition) -> Result<BlockGradients> {
    Ok(cacr_value_and_gradients(p)?.1)
}

/// Central difference of the total loss in one score entry,
/// `(L(x + h) - L(x - h)) / 2h`.
///
/// Both loss evaluations run in double-double precision so that partials
/// far smaller than `ulp(L) / h` remain visible; the divisor is the exact
/// distance between the two perturbed `f64` entries.
pub fn finite_difference(p: &BlockPartition, block: BlockId, i: usize, j: usize, h: f64) -> Result<f64> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Domain(format!("step h must be positive, got {h}")));
    }
    let (rows, cols) = block.of(p).shape();
    if i >= rows || j >= cols {
        return Err(dim_err(format!(
            "probe ({i}, {j}) outside {block:?} block of shape {rows}x{cols}"
        )));
    }
    let mut work = p.clone();
    let x = block.of(p).get(i, j);
    block.of_mut(&mut work).set(i, j, x + h);
    let plus = cacr_total_dd(&work);
    block.of_mut(&mut work).set(i, j, x - h);
    let minus = cacr_total_dd(&work);
    let step = DoubleDouble::new(x + h) - DoubleDouble::new(x - h);
    Ok(((plus - minus) / step).to_f64())
}

/// Relative disagreement used throughout the gradient checks.
pub fn gradient_rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1e-8)
}

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub cases: usize,
    pub probes_per_case: usize,
    pub seed: u64,
    pub step: f64,
    pub worst_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Probes `probes` random entries on each of `cases` random partitions
/// (`N_L, N_V` in `[1, 6]`, entries in `[-2, 2]`) and reports the worst
/// relative disagreement between analytic and central-difference partials.
pub fn gradcheck(cases: usize, probes: usize, seed: u64) -> Result<GradcheckReport> {
    let worst = (0..cases)
        .into_par_iter()
        .map(|c| {
            let mut rng = sampling::case_rng(seed, c as u64);
            let n_lang = rng.gen_range(1..=6);
            let n_vis = rng.gen_range(1..=6);
            let p = sampling::random_partition(&mut rng, n_lang, n_vis, 2.0);
            let grads = cacr_gradients(&p)?;
            let mut worst = 0.0_f64;
            for _ in 0..probes {
                let block = BlockId::ALL[rng.gen_range(0..4)];
                let (rows, cols) = block.of(&p).shape();
                let (i, j) = (rng.gen_range(0..rows), rng.gen_range(0..cols));
                let numeric = finite_difference(&p, block, i, j, GRADCHECK_STEP)?;
                let analytic = grads.block(block).get(i, j);
                worst = worst.max(gradient_rel_error(analytic, numeric));
            }
            Ok(worst)
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(GradcheckReport {
        cases,
        probes_per_case: probes,
        seed,
        step: GRADCHECK_STEP,
        worst_rel_err: worst,
        tolerance: GRADCHECK_TOLERANCE,
        pass: worst < GRADCHECK_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use crate::sampling::{permutation_fixed_point, random_partition};

    fn scalar(ll: f64, lv: f64, vl: f64, vv: f64) -> BlockPartition {
        let one = |v| Matrix::new(1, 1, vec![v]).unwrap();
        BlockPartition::new(one(ll), one(lv), one(vl), one(vv)).unwrap()
    }

    #[test]
    fn scalar_case_has_zero_gradient() {
        let p = scalar(0.4, -1.2, 2.0, 0.9);
        assert_eq!(cacr_gradients(&p).unwrap().norm(), 0.0);
        for b in BlockId::ALL {
            assert_eq!(finite_difference(&p, b, 0, 0, 1e-5).unwrap(), 0.0);
        }
    }

    #[test]
    fn gradient_vanishes_at_permutation_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in 2..=5 {
            let p = permutation_fixed_point(&mut rng, n, 1.0);
            let g = cacr_gradients(&p).unwrap();
            assert!(g.norm() < 1e-8, "n={n} norm={}", g.norm());
        }
    }

    #[test]
    fn analytic_matches_finite_differences_on_every_entry() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let p = random_partition(&mut rng, 3, 4, 1.0);
        let g = cacr_gradients(&p).unwrap();
        for b in BlockId::ALL {
            let (rows, cols) = b.of(&p).shape();
            for i in 0..rows {
                for j in 0..cols {
                    let fd = finite_difference(&p, b, i, j, 1e-5).unwrap();
                    let an = g.block(b).get(i, j);
                    assert!(
                        gradient_rel_error(an, fd) < 1e-4,
                        "{b:?}[{i},{j}] analytic {an} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn side_gradients_sum_to_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_partition(&mut rng, 4, 3, 1.5);
        let (_, gl) = cacr_l_gradients(&p).unwrap();
        let (_, gv) = cacr_v_gradients(&p).unwrap();
        let total = cacr_gradients(&p).unwrap();
        let sum = gl.add(&gv).unwrap();
        for b in BlockId::ALL {
            for (x, y) in sum.block(b).data().iter().zip(total.block(b).data()) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn symmetric_instance_has_mirrored_finite_differences() {
        // Swapping the two language tokens (and nothing else) maps this
        // partition onto itself, so the loss is invariant under the swap and
        // the partials at swapped S_LL positions coincide.
        let s_ll = Matrix::from_rows(&[[0.3, -0.8], [-0.8, 0.3]]).unwrap();
        let s_lv = Matrix::from_rows(&[[0.5, 1.0, -0.2], [0.5, 1.0, -0.2]]).unwrap();
        let s_vl = s_lv.transpose();
        let s_vv = Matrix::from_rows(&[[0.1, 0.4, -0.3], [0.2, -0.5, 0.7], [0.9, 0.0, 0.6]])
            .unwrap();
        let p = BlockPartition::new(s_ll, s_lv, s_vl, s_vv).unwrap();
        let a = finite_difference(&p, BlockId::LL, 0, 1, 1e-5).unwrap();
        let b = finite_difference(&p, BlockId::LL, 1, 0, 1e-5).unwrap();
        assert!((a.abs() - b.abs()).abs() < 1e-8, "{a} vs {b}");
        let c = finite_difference(&p, BlockId::LL, 0, 0, 1e-5).unwrap();
        let d = finite_difference(&p, BlockId::LL, 1, 1, 1e-5).unwrap();
        assert!((c.abs() - d.abs()).abs() < 1e-8, "{c} vs {d}");
    }

    #[test]
    fn finite_difference_errors() {
        let p = scalar(0.0, 0.0, 0.0, 0.0);
        assert!(matches!(
            finite_difference(&p, BlockId::LV, 1, 0, 1e-5),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            finite_difference(&p, BlockId::LV, 0, 0, 0.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn joint_gradient_layout_matches_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_partition(&mut rng, 2, 3, 1.0);
        let g = cacr_gradients(&p).unwrap();
        let joint = g.to_joint();
        assert_eq!(joint.get(0, 2), g.d_s_lv.get(0, 0));
        assert_eq!(joint.get(2, 1), g.d_s_vl.get(0, 1));
        assert_eq!(joint.get(4, 4), g.d_s_vv.get(2, 2));
    }

    #[test]
    fn small_gradcheck_passes() {
        let r = gradcheck(10, 50, 1).unwrap();
        assert!(r.pass, "{r:?}");
    }
}
