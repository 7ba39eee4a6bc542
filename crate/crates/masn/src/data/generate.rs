//! Episode synthesis.
//!
//! Generation is split in two phases. [`episode_plan`] draws everything
//! answer-relevant: the queried prototype, which object slots receive planted
//! patterns, the question tokens, candidates, and the ground-truth answer.
//! [`generate_episode`] then materializes feature tensors around that plan.
//! The split lets tests recount planted occurrences independently of the
//! tensors.
//!
//! Noise for the appearance stream, the motion stream, the plan, and the box
//! geometry comes from separate deterministic RNG streams. Resampling one
//! stream's noise (via [`generate_episode_salted`]) leaves the others
//! bit-identical, which is what makes cue isolation testable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Answer, CueMode, Episode, GeneratorConfig, ObjectFeatureSet, Question, TaskKind};
use crate::error::Result;
use crate::tensor::Tensor;

/// Magnitude of a planted prototype component.
const PROTO_SCALE: f64 = 2.0;
/// Magnitude of a planted attribute component.
const ATTR_SCALE: f64 = 2.0;
/// Standard deviation of the background noise in object features.
const NOISE_STD: f64 = 0.5;
/// How strongly a frame's global feature echoes the plants it contains.
const GLOBAL_ECHO: f64 = 0.8;

// Token layout: 0 is reserved padding, 1 marks a query, then prototype names,
// then class names, then filler.
const TOK_QUERY: u32 = 1;
const TOK_NAMES_START: u32 = 2;

fn proto_token(p: usize) -> u32 {
    TOK_NAMES_START + p as u32
}

fn class_token(config: &GeneratorConfig, c: usize) -> u32 {
    TOK_NAMES_START + config.n_prototypes as u32 + c as u32
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlantStream {
    Appearance,
    Motion,
}

/// One planted pattern: prototype `proto` (optionally carrying attribute
/// `attr`) added into object slot `slot` of one stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Plant {
    pub stream: PlantStream,
    pub slot: usize,
    pub proto: usize,
    pub attr: Option<usize>,
}

/// Everything answer-relevant about an episode, before tensors exist.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodePlan {
    pub query_proto: usize,
    pub plants: Vec<Plant>,
    pub answer: Answer,
    pub tokens: Vec<u32>,
    pub candidates: Vec<Vec<u32>>,
}

impl EpisodePlan {
    /// Recount occurrences of the queried prototype in one stream. For count
    /// episodes this is the ground truth by construction.
    pub fn occurrences(&self, stream: PlantStream) -> usize {
        self.plants
            .iter()
            .filter(|p| p.stream == stream && p.proto == self.query_proto)
            .count()
    }
}

fn sub_rng(seed: u64, lane: u64, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (lane + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(salt);
    rng
}

/// Fixed prototype / attribute vector banks. Deterministic in the bank sizes
/// and feature width alone, so every dataset with the same dimensions shares
/// them and the question-to-pattern mapping stays learnable across files.
fn banks(config: &GeneratorConfig) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xBA5E_BA5E);
    let mut draw = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..config.d_in).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect()
    };
    let protos = draw(config.n_prototypes);
    let attrs = draw(config.n_classes);
    (protos, attrs)
}

/// Draw `count` distinct slots from `0..k`, in deterministic order.
fn distinct_slots(rng: &mut ChaCha8Rng, k: usize, count: usize) -> Vec<usize> {
    debug_assert!(count <= k);
    let mut pool: Vec<usize> = (0..k).collect();
    for i in 0..count {
        let j = rng.random_range(i..k);
        pool.swap(i, j);
    }
    pool.truncate(count);
    pool
}

fn question_tokens(config: &GeneratorConfig, rng: &mut ChaCha8Rng, proto: usize) -> Vec<u32> {
    let mut tokens = vec![TOK_QUERY, proto_token(proto)];
    let filler_start = 2 + config.n_prototypes + config.n_classes;
    if filler_start < config.vocab {
        for _ in 0..rng.random_range(0..=2usize) {
            tokens.push(rng.random_range(filler_start..config.vocab) as u32);
        }
    }
    tokens
}

/// Plant the queried prototype with an attribute, plus one distractor
/// prototype when the config leaves room for it.
fn plan_attribute_plants(
    config: &GeneratorConfig,
    rng: &mut ChaCha8Rng,
    stream: PlantStream,
    query_proto: usize,
    attr: usize,
    plants: &mut Vec<Plant>,
) {
    let k = config.objects_total();
    let n_query = 2.min(k);
    let want_distractor = config.n_prototypes > 1 && k > n_query;
    let slots = distinct_slots(rng, k, n_query + usize::from(want_distractor));
    for &slot in &slots[..n_query] {
        plants.push(Plant { stream, slot, proto: query_proto, attr: Some(attr) });
    }
    if want_distractor {
        let mut other = rng.random_range(0..config.n_prototypes - 1);
        if other >= query_proto {
            other += 1;
        }
        let mut other_attr = rng.random_range(0..config.n_classes - 1);
        if other_attr >= attr {
            other_attr += 1;
        }
        plants.push(Plant {
            stream,
            slot: slots[n_query],
            proto: other,
            attr: Some(other_attr),
        });
    }
}

fn plan_count_plants(
    config: &GeneratorConfig,
    rng: &mut ChaCha8Rng,
    stream: PlantStream,
    query_proto: usize,
    count: usize,
    plants: &mut Vec<Plant>,
) {
    let k = config.objects_total();
    for slot in distinct_slots(rng, k, count) {
        plants.push(Plant { stream, slot, proto: query_proto, attr: None });
    }
}

/// Multiple-choice candidates: M distinct class names, one of them correct.
fn plan_candidates(
    config: &GeneratorConfig,
    rng: &mut ChaCha8Rng,
    correct_class: usize,
) -> (Vec<Vec<u32>>, usize) {
    let mut classes: Vec<usize> = (0..config.n_classes).collect();
    for i in 0..config.m_choices {
        let j = rng.random_range(i..config.n_classes);
        classes.swap(i, j);
    }
    classes.truncate(config.m_choices);
    if !classes.contains(&correct_class) {
        let pos = rng.random_range(0..config.m_choices);
        classes[pos] = correct_class;
    }
    let correct = classes.iter().position(|&c| c == correct_class).expect("inserted above");
    let candidates = classes.iter().map(|&c| vec![class_token(config, c)]).collect();
    (candidates, correct)
}

/// Phase one of generation: deterministic in `(config, seed)`.
pub fn episode_plan(config: &GeneratorConfig, seed: u64) -> Result<EpisodePlan> {
    config.validate()?;
    let mut rng = sub_rng(seed, 0, 0);
    let query_proto = rng.random_range(0..config.n_prototypes);
    let tokens = question_tokens(config, &mut rng, query_proto);
    let mut plants = Vec::new();

    let (answer, candidates) = match config.task {
        TaskKind::OpenEnded | TaskKind::MultipleChoice => {
            let class = match config.cue {
                CueMode::Appearance => {
                    let c = rng.random_range(0..config.n_classes);
                    plan_attribute_plants(config, &mut rng, PlantStream::Appearance, query_proto, c, &mut plants);
                    c
                }
                CueMode::Motion => {
                    let c = rng.random_range(0..config.n_classes);
                    plan_attribute_plants(config, &mut rng, PlantStream::Motion, query_proto, c, &mut plants);
                    c
                }
                CueMode::Mixed => {
                    let ca = rng.random_range(0..config.n_classes);
                    let cm = rng.random_range(0..config.n_classes);
                    plan_attribute_plants(config, &mut rng, PlantStream::Appearance, query_proto, ca, &mut plants);
                    plan_attribute_plants(config, &mut rng, PlantStream::Motion, query_proto, cm, &mut plants);
                    (ca + cm) % config.n_classes
                }
            };
            if config.task == TaskKind::MultipleChoice {
                let (candidates, correct) = plan_candidates(config, &mut rng, class);
                (Answer::Choice(correct), candidates)
            } else {
                (Answer::Class(class), Vec::new())
            }
        }
        TaskKind::Count => {
            let (lo, hi) = config.count_range;
            let total = rng.random_range(lo..=hi) as usize;
            match config.cue {
                CueMode::Appearance => {
                    plan_count_plants(config, &mut rng, PlantStream::Appearance, query_proto, total, &mut plants)
                }
                CueMode::Motion => {
                    plan_count_plants(config, &mut rng, PlantStream::Motion, query_proto, total, &mut plants)
                }
                CueMode::Mixed => {
                    let in_a = rng.random_range(0..=total);
                    plan_count_plants(config, &mut rng, PlantStream::Appearance, query_proto, in_a, &mut plants);
                    plan_count_plants(config, &mut rng, PlantStream::Motion, query_proto, total - in_a, &mut plants);
                }
            }
            (Answer::Count(total as i64), Vec::new())
        }
    };

    Ok(EpisodePlan { query_proto, plants, answer, tokens, candidates })
}

fn noise_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect()
}

pub fn generate_episode(config: &GeneratorConfig, seed: u64) -> Result<Episode> {
    generate_episode_salted(config, seed, 0, 0)
}

/// Generate with explicit noise salts. `a_salt` reseeds the appearance-stream
/// noise (objects and global rows), `m_salt` the motion-stream noise; plan,
/// plants and boxes are unaffected. Salt 0 is the canonical episode.
pub fn generate_episode_salted(
    config: &GeneratorConfig,
    seed: u64,
    a_salt: u64,
    m_salt: u64,
) -> Result<Episode> {
    let plan = episode_plan(config, seed)?;
    let (protos, attrs) = banks(config);
    let k = config.objects_total();
    let d_in = config.d_in;
    let t = config.t_frames;

    let mut rng_a = sub_rng(seed, 1, a_salt);
    let mut rng_m = sub_rng(seed, 2, m_salt);
    let mut rng_geo = sub_rng(seed, 3, 0);

    let mut objects_a = noise_matrix(&mut rng_a, k, d_in, NOISE_STD);
    let mut global_a = noise_matrix(&mut rng_a, t, d_in, NOISE_STD);
    let mut objects_m = noise_matrix(&mut rng_m, k, d_in, NOISE_STD);
    let mut global_m = noise_matrix(&mut rng_m, t, d_in, NOISE_STD);

    for plant in &plan.plants {
        let (objects, global) = match plant.stream {
            PlantStream::Appearance => (&mut objects_a, &mut global_a),
            PlantStream::Motion => (&mut objects_m, &mut global_m),
        };
        let frame = plant.slot / config.n_objects;
        for c in 0..d_in {
            let mut v = PROTO_SCALE * protos[plant.proto][c];
            if let Some(attr) = plant.attr {
                v += ATTR_SCALE * attrs[attr][c];
            }
            objects[plant.slot * d_in + c] += v;
            global[frame * d_in + c] += GLOBAL_ECHO * v;
        }
    }

    let mut boxes = Vec::with_capacity(k * 4);
    for _ in 0..k {
        let x1: f64 = rng_geo.random_range(0.0..0.7);
        let y1: f64 = rng_geo.random_range(0.0..0.7);
        let x2 = (x1 + rng_geo.random_range(0.1..0.3)).min(1.0);
        let y2 = (y1 + rng_geo.random_range(0.1..0.3)).min(1.0);
        boxes.extend_from_slice(&[x1, y1, x2, y2]);
    }

    let features = ObjectFeatureSet {
        t_frames: t,
        n_objects: config.n_objects,
        objects_a: Tensor::matrix(k, d_in, objects_a)?,
        objects_m: Tensor::matrix(k, d_in, objects_m)?,
        boxes: Tensor::matrix(k, 4, boxes)?,
        frame_index: (0..k).map(|i| i / config.n_objects).collect(),
        global_a: Tensor::matrix(t, d_in, global_a)?,
        global_m: Tensor::matrix(t, d_in, global_m)?,
    };
    features.validate_canonical()?;

    let question = Question {
        tokens: plan.tokens.clone(),
        task: config.task,
        answer: plan.answer.clone(),
        candidates: plan.candidates.clone(),
    };
    question.validate(config.vocab)?;

    Ok(Episode { features, question })
}
