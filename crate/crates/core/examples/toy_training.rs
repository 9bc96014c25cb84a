//! Trains the one-layer encoder with and without the congruence term and
//! compares held-out congruence and Winoground-style scores.
//!
//! ```bash
//! cargo run --release -p congruence-lab --example toy_training -- 2000 3e-3 1e-5
//! ```
//!
//! Arguments: steps, learning rate, maximum congruence weight.

use congruence_lab::toy::eval::winoground_style_eval;
use congruence_lab::toy::train::{evaluation_scenes, train, TrainConfig};

fn main() -> congruence_lab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: f64| args.get(i).map_or(default, |a| a.parse().expect("number"));
    let config = TrainConfig {
        steps: arg(0, 500.0) as usize,
        learning_rate: arg(1, 3e-3),
        cacr_weight_max: arg(2, 1e-5),
        ..TrainConfig::default()
    };
    let eval_set = evaluation_scenes(&config, 1024)?;

    for use_cacr in [false, true] {
        let started = std::time::Instant::now();
        let (model, log) = train(&config, use_cacr)?;
        let (first, last) = (log.first().expect("row"), log.last().expect("row"));
        let scores = winoground_style_eval(&model.params, &eval_set)?;
        println!(
            "cacr {:3}: {:5.1}s  itm {:.3} -> {:.3}  congruence {:.2} -> {:.2}  \
             held-out acc {:.3}  text {:.3} image {:.3} group {:.3}",
            if use_cacr { "on" } else { "off" },
            started.elapsed().as_secs_f64(),
            first.itm_loss,
            last.itm_loss,
            first.congruence,
            last.congruence,
            last.holdout_acc,
            scores.text_score,
            scores.image_score,
            scores.group_score,
        );
    }
    Ok(())
}
