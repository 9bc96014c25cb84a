//! Soft cross-modal equivalence: the brute-force weighted sum against the
//! closed-form triple product, and the hard argmax rule as its one-hot
//! special case.
//!
//! ```bash
//! cargo run --release -p congruence-lab --example soft_vs_hard -- 1000 1
//! ```

use congruence_lab::congruence::{
    change_of_basis_v, hard_equivalence_v, oracle_check, relative_error,
    soft_equivalence_oracle_v,
};
use congruence_lab::sampling::{case_rng, one_hot_partition, random_partition};

fn main() -> congruence_lab::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<u64>().expect("numeric argument"));
    let cases = args.next().unwrap_or(1000) as usize;
    let seed = args.next().unwrap_or(1);

    let p = random_partition(&mut case_rng(seed, 0), 3, 4, 3.0);
    let looped = soft_equivalence_oracle_v(&p);
    let closed = change_of_basis_v(&p)?;
    println!("one dense partition: relative error {:.2e}", relative_error(&looped, &closed));

    let one_hot = one_hot_partition(&mut case_rng(seed, 1), 3, 4, 3.0);
    let hard = hard_equivalence_v(&one_hot);
    let soft = change_of_basis_v(&one_hot)?;
    println!("one-hot cross rows: hard == soft is {}", hard == soft);

    let dense_hard = hard_equivalence_v(&p);
    println!(
        "dense cross rows: hard vs soft relative error {:.3}",
        relative_error(&dense_hard, &closed)
    );

    let report = oracle_check(cases, seed)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
    Ok(())
}
