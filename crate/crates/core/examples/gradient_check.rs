//! Verifies analytic congruence gradients against central differences.
//!
//! ```bash
//! cargo run --release -p congruence-lab --example gradient_check -- 200 100 1
//! ```

use congruence_lab::gradients::gradcheck;

fn main() -> congruence_lab::Result<()> {
    let args: Vec<u64> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("numeric argument"))
        .collect();
    let cases = args.first().copied().unwrap_or(200) as usize;
    let probes = args.get(1).copied().unwrap_or(100) as usize;
    let seed = args.get(2).copied().unwrap_or(1);

    let report = gradcheck(cases, probes, seed)?;
    println!(
        "{} partitions x {} probes, h = {:e}: worst relative error {:.3e} ({})",
        report.cases,
        report.probes_per_case,
        report.step,
        report.worst_rel_err,
        if report.pass { "pass" } else { "FAIL" }
    );
    Ok(())
}
