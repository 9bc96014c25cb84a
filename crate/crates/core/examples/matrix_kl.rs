//! Row KL divergence and the symmetric matrix KL used by the congruence
//! loss.
//!
//! ```bash
//! cargo run -p congruence-lab --example matrix_kl
//! ```

use congruence_lab::{kl_row, mkl, row_softmax, Matrix};

fn main() -> congruence_lab::Result<()> {
    let p = [0.5, 0.5];
    let q = [0.9, 0.1];
    println!("KL(p||q) = {:.4}", kl_row(&p, &q)?);
    println!("KL(q||p) = {:.4}", kl_row(&q, &p)?);

    let a = Matrix::from_rows(&[[0.5, 0.5], [1.0, 0.0]])?;
    let b = Matrix::from_rows(&[[0.9, 0.1], [0.5, 0.5]])?;
    let ab = mkl(&a, &b)?.value;
    let ba = mkl(&b, &a)?.value;
    println!("m-KL(A,B) = {ab:.6}, m-KL(B,A) = {ba:.6}");

    // softmax of shifted logits: same distribution, zero divergence
    let s = Matrix::from_rows(&[[1.0, 2.0, 3.0]])?;
    let shifted = Matrix::from_rows(&[[11.0, 12.0, 13.0]])?;
    let d = mkl(&row_softmax(&s)?, &row_softmax(&shifted)?)?;
    println!("m-KL(softmax(S), softmax(S + 10)) = {:.3e}", d.value);
    println!("{}", serde_json::to_string(&d).expect("serializable"));
    Ok(())
}
