//! Random partition generators shared by the property suites, the CLI
//! checks and the examples.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::attention::{matmul, BlockPartition, Matrix};

pub fn random_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, range: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-range..=range))
}

/// Partition with every entry uniform in `[-range, range]`.
pub fn random_partition<R: Rng + ?Sized>(
    rng: &mut R,
    n_lang: usize,
    n_vis: usize,
    range: f64,
) -> BlockPartition {
    BlockPartition {
        s_ll: random_matrix(rng, n_lang, n_lang, range),
        s_lv: random_matrix(rng, n_lang, n_vis, range),
        s_vl: random_matrix(rng, n_vis, n_lang, range),
        s_vv: random_matrix(rng, n_vis, n_vis, range),
    }
}

/// Matrix whose rows are one-hot at uniformly drawn columns.
pub fn one_hot_rows<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    let hot: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..cols)).collect();
    Matrix::from_fn(rows, cols, |i, j| f64::from(hot[i] == j))
}

/// Random intra-modal blocks with one-hot cross-modal rows.
pub fn one_hot_partition<R: Rng + ?Sized>(
    rng: &mut R,
    n_lang: usize,
    n_vis: usize,
    range: f64,
) -> BlockPartition {
    BlockPartition {
        s_ll: random_matrix(rng, n_lang, n_lang, range),
        s_lv: one_hot_rows(rng, n_lang, n_vis),
        s_vl: one_hot_rows(rng, n_vis, n_lang),
        s_vv: random_matrix(rng, n_vis, n_vis, range),
    }
}

pub fn permutation_matrix(perm: &[usize]) -> Matrix {
    Matrix::from_fn(perm.len(), perm.len(), |i, j| f64::from(perm[i] == j))
}

/// Partition at which both congruence losses vanish: `S_LV = P`,
/// `S_VL = Pᵀ` and `S_VV = Pᵀ S_LL P` for a random permutation `P`.
pub fn permutation_fixed_point<R: Rng + ?Sized>(rng: &mut R, n: usize, range: f64) -> BlockPartition {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let p = permutation_matrix(&perm);
    let pt = p.transpose();
    let s_ll = random_matrix(rng, n, n, range);
    let s_vv = matmul(&matmul(&pt, &s_ll).expect("square"), &p).expect("square");
    BlockPartition {
        s_ll,
        s_lv: p,
        s_vl: pt,
        s_vv,
    }
}

/// Generator for case `case` of a seeded randomized suite: ChaCha8 keyed by
/// `seed` on stream `case`. Cases are independent of scheduling order.
pub fn case_rng(seed: u64, case: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(case);
    rng
}
