//! Splits a joint language+vision score matrix into its four modality
//! blocks and normalizes rows with a stable softmax.
//!
//! ```bash
//! cargo run -p congruence-lab --example partition_softmax
//! ```

use congruence_lab::{partition, row_softmax, AttentionBundle, Matrix};

fn show(name: &str, m: &Matrix) {
    println!("{name} ({}x{}):", m.rows(), m.cols());
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:8.4}")).collect();
        println!("  [{}]", row.join(" "));
    }
}

fn main() -> congruence_lab::Result<()> {
    // two words followed by three image regions
    let scores = Matrix::from_rows(&[
        [2.0, 0.5, 1.5, -1.0, 0.0],
        [0.1, 1.0, -0.5, 2.0, 0.3],
        [1.2, -0.4, 0.8, 0.2, 0.0],
        [-0.3, 1.7, 0.0, 1.1, 0.4],
        [0.0, 0.0, 0.2, 0.2, 0.9],
    ])?;
    let bundle = AttentionBundle::new(2, 3, scores)?;
    let blocks = partition(&bundle);
    show("S_LL", &blocks.s_ll);
    show("S_LV", &blocks.s_lv);
    show("S_VL", &blocks.s_vl);
    show("S_VV", &blocks.s_vv);
    show("softmax(S_VV)", &row_softmax(&blocks.s_vv)?);

    // large logits stay finite thanks to max subtraction
    let big = Matrix::from_rows(&[[1000.0, 999.0, -1000.0]])?;
    show("softmax([1000, 999, -1000])", &row_softmax(&big)?);

    assert_eq!(blocks.reassemble(), bundle);
    Ok(())
}
