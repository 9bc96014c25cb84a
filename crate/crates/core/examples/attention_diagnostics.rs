//! Argmax-correspondence entropy, a per-bundle congruence report and the
//! entropy/score correlation probe, on attention from a briefly trained
//! toy encoder.
//!
//! ```bash
//! cargo run --release -p congruence-lab --example attention_diagnostics
//! ```

use congruence_lab::analysis::{argmax_entropy, congruence_report, correlation_probe};
use congruence_lab::congruence::argmax_correspondence;
use congruence_lab::toy::model::forward;
use congruence_lab::toy::train::{evaluation_scenes, train, TrainConfig};

fn main() -> congruence_lab::Result<()> {
    let config = TrainConfig {
        steps: 200,
        learning_rate: 3e-3,
        cacr_weight_max: 1e-5,
        ..TrainConfig::default()
    };
    let (model, _) = train(&config, true)?;
    let scenes = evaluation_scenes(&config, 24)?;

    let mut bundles = Vec::new();
    let mut entropies = Vec::new();
    let mut logits = Vec::new();
    for s in scenes.iter().filter(|s| s.label == 1) {
        let out = forward(&model.params, &s.lang_tokens, &s.vis_tokens)?;
        let mut e = argmax_entropy(&argmax_correspondence(&out.bundle.partition()))?;
        e.id = format!("scene{:02}", s.id);
        entropies.push(e);
        logits.push(out.match_logit);
        bundles.push((format!("scene{:02}", s.id), out.bundle));
    }

    let report = congruence_report(&bundles)?;
    report.write_csv(std::io::stdout())?;
    println!("mean:   {:?}", report.mean);
    println!("median: {:?}", report.median);

    let probe = correlation_probe(&entropies, &logits)?;
    println!(
        "entropy vs match logit over {} scenes: lang->vis {:?}, vis->lang {:?}",
        probe.n, probe.lang_to_vis, probe.vis_to_lang
    );
    Ok(())
}
