//! Training loop: image-text matching with sampled negatives, plus the
//! congruence term under an exponential warmup.
//!
//! Row `t` of the metrics log describes the parameters after `t` updates:
//! the two loss columns are the objective terms on the minibatch that
//! update `t + 1` consumes, the other two are held-out measurements.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Matrix;
use crate::congruence::cacr_total;
use crate::error::{Error, Result};
use crate::gradients::cacr_value_and_gradients;
use crate::sampling::case_rng;

use super::model::{backward, forward, EncoderParams};
use super::scenes::{SceneWorld, ToyScene, WorldConfig};

const INIT_STREAM: u64 = u64::MAX;
const BATCH_STREAM: u64 = u64::MAX - 1;
const HOLDOUT_SEED_SALT: u64 = 0x6a09_e667_f3bc_c908;
const EVAL_SEED_SALT: u64 = 0xbb67_ae85_84ca_a73b;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub negatives_per_positive: usize,
    pub cacr_weight_max: f64,
    /// Warmup time constant in steps; `None` means `steps / 5`.
    pub warmup_tau: Option<f64>,
    pub steps: usize,
    pub seed: u64,
    /// Number of positive training scenes.
    pub train_scenes: usize,
    /// Number of positive held-out scenes.
    pub holdout_scenes: usize,
    pub world: WorldConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 4,
            negatives_per_positive: 31,
            cacr_weight_max: 1.0,
            warmup_tau: None,
            steps: 2000,
            seed: 0,
            train_scenes: 256,
            holdout_scenes: 64,
            world: WorldConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive and finite, got {v}")))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        positive("cacr_weight_max", self.cacr_weight_max)?;
        if let Some(tau) = self.warmup_tau {
            positive("warmup_tau", tau)?;
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("negatives_per_positive", self.negatives_per_positive),
            ("holdout_scenes", self.holdout_scenes),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.train_scenes < 2 {
            return Err(Error::Config(format!(
                "train_scenes must be at least 2 so random negatives exist, got {}",
                self.train_scenes
            )));
        }
        Ok(())
    }

    pub fn tau(&self) -> f64 {
        self.warmup_tau
            .unwrap_or((self.steps as f64 / 5.0).max(1.0))
    }

    /// Congruence weight applied at update `t`.
    pub fn warmup_weight(&self, t: usize) -> f64 {
        self.cacr_weight_max * (1.0 - (-(t as f64) / self.tau()).exp())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub itm_loss: f64,
    pub cacr_loss: f64,
    /// Mean total congruence loss over held-out positive pairs.
    pub congruence: f64,
    /// Fraction of held-out images whose true caption outscores the
    /// swapped one.
    pub holdout_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(w);
        for row in &self.rows {
            writer
                .serialize(row)
                .map_err(|e| Error::Data(format!("writing metrics: {e}")))?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn first(&self) -> Option<&MetricsRow> {
        self.rows.first()
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: EncoderParams,
    pub world: WorldConfig,
}

/// Train and held-out positives for a config, in generation order.
pub fn datasets(config: &TrainConfig) -> Result<(Vec<ToyScene>, Vec<ToyScene>)> {
    let world = SceneWorld::new(config.world.clone())?;
    let train = world.generate(config.train_scenes, config.seed);
    let holdout = world.generate(config.holdout_scenes, config.seed ^ HOLDOUT_SEED_SALT);
    Ok((train, holdout))
}

/// A third, larger split for group scoring: `count` images drawn from the
/// same world, disjoint in seed from both training and held-out scenes.
pub fn evaluation_scenes(config: &TrainConfig, count: usize) -> Result<Vec<ToyScene>> {
    if count == 0 {
        return Err(Error::Config("evaluation scene count must be at least 1".into()));
    }
    let world = SceneWorld::new(config.world.clone())?;
    Ok(world.generate(count, config.seed ^ EVAL_SEED_SALT))
}

fn bce_with_logit(logit: f64, label: f64) -> (f64, f64) {
    // log(1 + e^x) - y x, computed without overflow
    let loss = logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p();
    let prob = 1.0 / (1.0 + (-logit).exp());
    (loss, prob - label)
}

/// Held-out congruence and pairwise accuracy for fixed parameters.
pub fn holdout_metrics(params: &EncoderParams, holdout: &[ToyScene]) -> Result<(f64, f64)> {
    let mut congruence = 0.0;
    let mut correct = 0usize;
    let mut n = 0usize;
    for pair in holdout.chunks(2) {
        let [pos, neg] = pair else {
            return Err(Error::Data("held-out scene without its swapped caption".into()));
        };
        let p = forward(params, &pos.lang_tokens, &pos.vis_tokens)?;
        let q = forward(params, &neg.lang_tokens, &neg.vis_tokens)?;
        congruence += cacr_total(&p.bundle.partition())?.total;
        if p.match_logit > q.match_logit {
            correct += 1;
        }
        n += 1;
    }
    Ok((congruence / n as f64, correct as f64 / n as f64))
}

struct Adam {
    m: EncoderParams,
    v: EncoderParams,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(like: &EncoderParams) -> Self {
        let z = EncoderParams::zeros(like.vocab(), like.width);
        Self {
            m: z.clone(),
            v: z,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut EncoderParams, grads: &EncoderParams, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .zip(grads.tensors());
        for (((p, m), v), g) in tensors {
            for i in 0..p.len() {
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

struct BatchResult {
    itm_loss: f64,
    cacr_loss: f64,
    grads: EncoderParams,
}

fn batch_step(
    params: &EncoderParams,
    train: &[ToyScene],
    batch: &[usize],
    negatives: &[Vec<usize>],
    cacr_weight: f64,
) -> Result<BatchResult> {
    let mut grads = EncoderParams::zeros(params.vocab(), params.width);
    let n_pairs: usize = negatives.iter().map(|n| n.len() + 1).sum();
    let mut itm_loss = 0.0;
    let mut cacr_loss = 0.0;
    for (&pos_idx, negs) in batch.iter().zip(negatives) {
        let pos = &train[pos_idx];
        let captions = std::iter::once((&pos.lang_tokens, 1.0))
            .chain(negs.iter().map(|&c| (&train[c].lang_tokens, 0.0)));
        for (caption, label) in captions {
            let out = forward(params, caption, &pos.vis_tokens)?;
            let (loss, d_logit) = bce_with_logit(out.match_logit, label);
            itm_loss += loss / n_pairs as f64;
            let mut extra: Option<Matrix> = None;
            if label == 1.0 {
                let (value, g) = cacr_value_and_gradients(&out.bundle.partition())?;
                cacr_loss += value.total / batch.len() as f64;
                if cacr_weight > 0.0 {
                    extra = Some(g.to_joint().scale(cacr_weight / batch.len() as f64));
                }
            }
            let g = backward(params, &out.cache, d_logit / n_pairs as f64, extra.as_ref())?;
            grads.add_scaled(&g, 1.0);
        }
    }
    Ok(BatchResult {
        itm_loss,
        cacr_loss,
        grads,
    })
}

/// Draws positives and their negatives: the swapped caption first, then
/// captions of other training scenes.
fn draw_batch<R: Rng>(
    rng: &mut R,
    train: &[ToyScene],
    positives: &[usize],
    config: &TrainConfig,
) -> (Vec<usize>, Vec<Vec<usize>>) {
    let batch: Vec<usize> = (0..config.batch_size)
        .map(|_| *positives.choose(rng).expect("non-empty"))
        .collect();
    let negatives = batch
        .iter()
        .map(|&p| {
            let mut negs = vec![p + 1];
            while negs.len() < config.negatives_per_positive {
                let c = *positives.choose(rng).expect("non-empty");
                if train[c].id != train[p].id && train[c].lang_tokens != train[p].lang_tokens {
                    negs.push(c);
                }
            }
            negs
        })
        .collect();
    (batch, negatives)
}

/// Trains one arm. Deterministic for a fixed config.
pub fn train(config: &TrainConfig, use_cacr: bool) -> Result<(TrainedModel, MetricsLog)> {
    config.validate()?;
    let world = SceneWorld::new(config.world.clone())?;
    let (train, holdout) = datasets(config)?;
    let positives: Vec<usize> = (0..train.len()).filter(|&i| train[i].label == 1).collect();

    let mut params = EncoderParams::init(
        &mut case_rng(config.seed, INIT_STREAM),
        world.vocabulary().size(),
        world.width(),
    );
    let mut adam = Adam::new(&params);
    let mut rng = case_rng(config.seed, BATCH_STREAM);
    let mut log = MetricsLog::default();

    for t in 0..=config.steps {
        let (batch, negatives) = draw_batch(&mut rng, &train, &positives, config);
        let weight = if use_cacr { config.warmup_weight(t) } else { 0.0 };
        let diverged = |e: Error| match e {
            Error::Domain(detail) => Error::Diverged { step: t, detail },
            other => other,
        };
        let result = batch_step(&params, &train, &batch, &negatives, weight).map_err(diverged)?;
        let (congruence, holdout_acc) = holdout_metrics(&params, &holdout).map_err(diverged)?;
        let row = MetricsRow {
            step: t,
            itm_loss: result.itm_loss,
            cacr_loss: result.cacr_loss,
            congruence,
            holdout_acc,
        };
        if ![row.itm_loss, row.cacr_loss, row.congruence].iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged {
                step: t,
                detail: format!(
                    "itm_loss={} cacr_loss={} congruence={}",
                    row.itm_loss, row.cacr_loss, row.congruence
                ),
            });
        }
        log.rows.push(row);
        if t == config.steps {
            break;
        }
        adam.step(&mut params, &result.grads, config.learning_rate);
        if !params.is_finite() {
            return Err(Error::Diverged {
                step: t + 1,
                detail: "parameters became non-finite".into(),
            });
        }
    }
    Ok((
        TrainedModel {
            params,
            world: config.world.clone(),
        },
        log,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(steps: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-2,
            negatives_per_positive: 3,
            steps,
            train_scenes: 16,
            holdout_scenes: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn warmup_starts_at_zero_and_is_monotone() {
        let c = TrainConfig {
            cacr_weight_max: 7.0,
            steps: 100,
            ..TrainConfig::default()
        };
        assert_eq!(c.warmup_weight(0), 0.0);
        assert_eq!(c.tau(), 20.0);
        let w: Vec<f64> = (0..=100).map(|t| c.warmup_weight(t)).collect();
        assert!(w.windows(2).all(|p| p[1] >= p[0]));
        assert!(w[100] > 0.99 * 7.0 && w[100] < 7.0);
    }

    #[test]
    fn zero_steps_logs_initialization() {
        let c = small(0);
        let (model, log) = train(&c, false).unwrap();
        assert_eq!(log.rows.len(), 1);
        let (train_set, holdout) = datasets(&c).unwrap();
        let init = EncoderParams::init(
            &mut case_rng(c.seed, INIT_STREAM),
            model.params.vocab(),
            model.params.width,
        );
        assert_eq!(model.params, init);
        let (cong, acc) = holdout_metrics(&init, &holdout).unwrap();
        let row = &log.rows[0];
        assert_eq!((row.congruence, row.holdout_acc), (cong, acc));
        // zero matching head: every logit is 0, so BCE is ln 2
        assert!((row.itm_loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(row.cacr_loss > 0.0);
        assert!(!train_set.is_empty());
    }

    #[test]
    fn cacr_has_no_effect_while_weight_is_zero() {
        let c = small(1);
        let (a, _) = train(&c, true).unwrap();
        let (b, _) = train(&c, false).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let c = small(5);
        let (ma, la) = train(&c, true).unwrap();
        let (mb, lb) = train(&c, true).unwrap();
        assert_eq!(ma.params, mb.params);
        assert_eq!(la.to_csv_string().unwrap(), lb.to_csv_string().unwrap());
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let c = small(0);
        let (train_set, _) = datasets(&c).unwrap();
        let positives: Vec<usize> = (0..train_set.len()).step_by(2).collect();
        let mut rng = case_rng(3, 0);
        let mut params = EncoderParams::init(&mut rng, 11, 16);
        for w in params.itm_weights.iter_mut() {
            *w = rng.gen_range(-0.5..0.5);
        }
        let (batch, negs) = draw_batch(&mut rng, &train_set, &positives, &c);
        let weight = 0.7;
        let objective = |p: &EncoderParams| {
            let r = batch_step(p, &train_set, &batch, &negs, weight).unwrap();
            r.itm_loss + weight * r.cacr_loss
        };
        let grads = batch_step(&params, &train_set, &batch, &negs, weight).unwrap().grads;
        let h = 1e-6;
        let mut probe_rng = case_rng(3, 1);
        for _ in 0..40 {
            let t = probe_rng.gen_range(0..6);
            let idx = probe_rng.gen_range(0..params.tensors()[t].len());
            let orig = params.tensors()[t][idx];
            params.tensors_mut()[t][idx] = orig + h;
            let plus = objective(&params);
            params.tensors_mut()[t][idx] = orig - h;
            let minus = objective(&params);
            params.tensors_mut()[t][idx] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let an = grads.tensors()[t][idx];
            assert!(
                (an - fd).abs() <= 1e-5 * (1.0 + fd.abs()),
                "tensor {t}[{idx}]: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn divergence_is_reported() {
        let c = TrainConfig {
            learning_rate: 1e300,
            ..small(3)
        };
        match train(&c, true) {
            Err(Error::Diverged { step, .. }) => assert!(step >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            train_scenes: 1,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_json_defaults_fill_missing_fields() {
        let c: TrainConfig = serde_json::from_str(r#"{"steps": 10, "seed": 3}"#).unwrap();
        assert_eq!(c.steps, 10);
        assert_eq!(c.learning_rate, 5e-5);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"stepz": 1}"#).is_err());
    }
}
