//! Synthetic relational scenes with caption-swapped hard negatives.
//!
//! A caption reads `<subject> <relation> <object> [. ...]`; the matching
//! image holds one visual token per mentioned entity plus distractors. The
//! relation is carried by geometry: the subject sits on the positive side of
//! the relation's axis, the object on the negative side. Swapping the two
//! entity words gives a caption with the same bag of words that no longer
//! describes the image.
//!
//! Scenes come in groups of two images that differ only in which entity is
//! the subject, so every group supports text, image and group scoring.
//!
//! Visual feature layout for a model width `d`:
//!
//! ```text
//! [0, d-4)   entity subspace: unit centroid of the entity + noise
//! d-4, d-3   geometry: vertical, horizontal offset + noise
//! d-2        modality flag (1.0)
//! d-1        unused (0.0)
//! ```

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::case_rng;

pub const DEFAULT_WIDTH: usize = 16;
pub const DEFAULT_ENTITIES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    Above,
    LeftOf,
}

impl RelationKind {
    /// Unit offset of the subject along `(vertical, horizontal)`.
    fn axis(self) -> (f64, f64) {
        match self {
            RelationKind::Above => (1.0, 0.0),
            RelationKind::LeftOf => (0.0, 1.0),
        }
    }
}

/// Directed relation that holds in an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub kind: RelationKind,
    pub subject: usize,
    pub object: usize,
}

/// One caption/image pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyScene {
    pub id: usize,
    /// Groups of two images with mirrored relations.
    pub group: usize,
    pub image_variant: u8,
    pub lang_tokens: Vec<usize>,
    pub vis_tokens: Vec<Vec<f64>>,
    /// `(language index, visual index)` for every entity word.
    pub correspondence: Vec<(usize, usize)>,
    pub relation: Relation,
    /// 1 when the caption describes the image, 0 for the swapped caption.
    pub label: u8,
}

impl ToyScene {
    pub fn n_lang(&self) -> usize {
        self.lang_tokens.len()
    }

    pub fn n_vis(&self) -> usize {
        self.vis_tokens.len()
    }
}

/// Symbol table shared by generator and model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub n_entities: usize,
}

impl Vocabulary {
    pub fn relation_symbol(&self, kind: RelationKind) -> usize {
        self.n_entities
            + match kind {
                RelationKind::Above => 0,
                RelationKind::LeftOf => 1,
            }
    }

    pub fn filler_symbol(&self) -> usize {
        self.n_entities + 2
    }

    pub fn size(&self) -> usize {
        self.n_entities + 3
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub width: usize,
    pub n_entities: usize,
    /// Standard deviation of the per-dimension feature noise.
    pub noise: f64,
    /// Seeds the entity centroids; scenes drawn from worlds with the same
    /// seed share their visual vocabulary.
    pub world_seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            width: DEFAULT_WIDTH,
            n_entities: DEFAULT_ENTITIES,
            noise: 0.1,
            world_seed: 0x0005_eed0_fa11,
        }
    }
}

/// Entity centroids plus generation parameters.
#[derive(Debug, Clone)]
pub struct SceneWorld {
    config: WorldConfig,
    centroids: Vec<Vec<f64>>,
}

impl SceneWorld {
    pub fn new(config: WorldConfig) -> Result<Self> {
        if config.width < 8 {
            return Err(Error::Config(format!(
                "scene width must be at least 8, got {}",
                config.width
            )));
        }
        if config.n_entities < 2 + 4 {
            return Err(Error::Config(format!(
                "need at least 6 entities for subject, object and distractors, got {}",
                config.n_entities
            )));
        }
        if config.noise.is_nan() || config.noise < 0.0 {
            return Err(Error::Config(format!("noise must be >= 0, got {}", config.noise)));
        }
        let mut rng = case_rng(config.world_seed, 0);
        let dims = config.width - 4;
        let centroids = (0..config.n_entities)
            .map(|_| {
                let v: Vec<f64> = (0..dims).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        Ok(Self { config, centroids })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary {
            n_entities: self.config.n_entities,
        }
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    /// Same world with a different noise level (same centroids).
    pub fn with_noise(&self, noise: f64) -> Self {
        Self {
            config: WorldConfig {
                noise,
                ..self.config.clone()
            },
            centroids: self.centroids.clone(),
        }
    }

    fn visual_token(&self, rng: &mut ChaCha8Rng, entity: usize, geometry: (f64, f64)) -> Vec<f64> {
        let d = self.config.width;
        let noise = self.config.noise;
        let mut jitter = || -> f64 {
            let z: f64 = StandardNormal.sample(&mut *rng);
            noise * z
        };
        let mut v = vec![0.0; d];
        for (slot, c) in v.iter_mut().zip(&self.centroids[entity]) {
            *slot = c + jitter();
        }
        v[d - 4] = geometry.0 + jitter();
        v[d - 3] = geometry.1 + jitter();
        v[d - 2] = 1.0;
        v
    }

    /// `count` positive scenes, each followed by its caption-swapped
    /// negative. Scene `k` belongs to group `k / 2` as image variant
    /// `k % 2`, so an even `count` yields complete groups.
    pub fn generate(&self, count: usize, seed: u64) -> Vec<ToyScene> {
        let vocab = self.vocabulary();
        let mut out = Vec::with_capacity(2 * count);
        for group in 0..count.div_ceil(2) {
            let mut rng = case_rng(seed, group as u64);
            let mut entities: Vec<usize> = (0..self.config.n_entities).collect();
            entities.shuffle(&mut rng);
            let (a, b) = (entities[0], entities[1]);
            let n_distractors = rng.gen_range(1..=4);
            let distractors = entities[2..2 + n_distractors].to_vec();
            let kind = if rng.gen_bool(0.5) {
                RelationKind::Above
            } else {
                RelationKind::LeftOf
            };
            let n_fillers = rng.gen_range(0..=3);
            let caption = |subj: usize, obj: usize| {
                let mut t = vec![subj, vocab.relation_symbol(kind), obj];
                t.extend(std::iter::repeat_n(vocab.filler_symbol(), n_fillers));
                t
            };
            let captions = [caption(a, b), caption(b, a)];

            for variant in 0..2u8 {
                let k = 2 * group + variant as usize;
                if k >= count {
                    break;
                }
                let (subject, object) = if variant == 0 { (a, b) } else { (b, a) };
                let (ax, ay) = kind.axis();
                let mut objects: Vec<(usize, (f64, f64))> =
                    vec![(subject, (ax, ay)), (object, (-ax, -ay))];
                objects.extend(distractors.iter().map(|&e| (e, (0.0, 0.0))));
                objects.shuffle(&mut rng);
                let vis_tokens: Vec<Vec<f64>> = objects
                    .iter()
                    .map(|&(e, g)| self.visual_token(&mut rng, e, g))
                    .collect();
                let vis_index = |e: usize| objects.iter().position(|o| o.0 == e).expect("present");
                let relation = Relation {
                    kind,
                    subject,
                    object,
                };
                for (label, caption) in [(1u8, &captions[variant as usize]), (0u8, &captions[1 - variant as usize])] {
                    let correspondence = vec![(0, vis_index(caption[0])), (2, vis_index(caption[2]))];
                    out.push(ToyScene {
                        id: k,
                        group,
                        image_variant: variant,
                        lang_tokens: caption.clone(),
                        vis_tokens: vis_tokens.clone(),
                        correspondence,
                        relation,
                        label,
                    });
                }
            }
        }
        out
    }
}

/// Scenes from the default world.
pub fn generate_scenes(count: usize, seed: u64) -> Result<Vec<ToyScene>> {
    if count == 0 {
        return Err(Error::Config("scene count must be at least 1".into()));
    }
    Ok(SceneWorld::new(WorldConfig::default())?.generate(count, seed))
}
