//! Winoground-style text/image/group scoring over scene groups.
//!
//! A group holds two images `I0`, `I1` and their captions `C0`, `C1`, where
//! each caption is the other with its entity words swapped. With `s` the
//! matching score:
//!
//! ```text
//! text  = s(C0,I0) > s(C1,I0)  and  s(C1,I1) > s(C0,I1)
//! image = s(C0,I0) > s(C0,I1)  and  s(C1,I1) > s(C1,I0)
//! group = text and image
//! ```

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::model::{forward, EncoderParams};
use super::scenes::ToyScene;

/// Anything that scores a caption against an image.
pub trait PairScorer: Sync {
    fn score(&self, lang: &[usize], vis: &[Vec<f64>]) -> Result<f64>;
}

impl PairScorer for EncoderParams {
    fn score(&self, lang: &[usize], vis: &[Vec<f64>]) -> Result<f64> {
        Ok(forward(self, lang, vis)?.match_logit)
    }
}

impl<F> PairScorer for F
where
    F: Fn(&[usize], &[Vec<f64>]) -> f64 + Sync,
{
    fn score(&self, lang: &[usize], vis: &[Vec<f64>]) -> Result<f64> {
        Ok(self(lang, vis))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WinogroundScores {
    pub text_score: f64,
    pub image_score: f64,
    pub group_score: f64,
    pub groups: usize,
}

struct Group<'a> {
    caption: [&'a [usize]; 2],
    image: [&'a [Vec<f64>]; 2],
}

fn collect_groups(scenes: &[ToyScene]) -> Result<Vec<Group<'_>>> {
    let mut by_group: BTreeMap<usize, [Option<&ToyScene>; 2]> = BTreeMap::new();
    for s in scenes.iter().filter(|s| s.label == 1) {
        let v = s.image_variant as usize;
        if v > 1 {
            return Err(Error::Data(format!(
                "scene {} has image variant {v}; expected 0 or 1",
                s.id
            )));
        }
        let slot = &mut by_group.entry(s.group).or_default()[v];
        if slot.is_some() {
            return Err(Error::Data(format!(
                "group {} has two matching captions for image variant {v}",
                s.group
            )));
        }
        *slot = Some(s);
    }
    if by_group.is_empty() {
        return Err(Error::Data("no matching caption/image pairs to evaluate".into()));
    }
    by_group
        .into_iter()
        .map(|(g, pair)| match pair {
            [Some(a), Some(b)] => Ok(Group {
                caption: [&a.lang_tokens, &b.lang_tokens],
                image: [&a.vis_tokens, &b.vis_tokens],
            }),
            _ => Err(Error::Data(format!(
                "group {g} lacks its image-swapped counterpart"
            ))),
        })
        .collect()
}

pub fn winoground_style_eval<S: PairScorer + ?Sized>(
    scorer: &S,
    scenes: &[ToyScene],
) -> Result<WinogroundScores> {
    let groups = collect_groups(scenes)?;
    let outcomes: Vec<(bool, bool)> = groups
        .par_iter()
        .map(|g| {
            let s = |c: usize, i: usize| scorer.score(g.caption[c], g.image[i]);
            let (c0i0, c1i0, c0i1, c1i1) = (s(0, 0)?, s(1, 0)?, s(0, 1)?, s(1, 1)?);
            let text = c0i0 > c1i0 && c1i1 > c0i1;
            let image = c0i0 > c0i1 && c1i1 > c1i0;
            Ok((text, image))
        })
        .collect::<Result<_>>()?;
    let n = outcomes.len() as f64;
    let frac = |f: &dyn Fn(&(bool, bool)) -> bool| outcomes.iter().filter(|o| f(o)).count() as f64 / n;
    Ok(WinogroundScores {
        text_score: frac(&|o| o.0),
        image_score: frac(&|o| o.1),
        group_score: frac(&|o| o.0 && o.1),
        groups: outcomes.len(),
    })
}
