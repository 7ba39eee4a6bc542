//! Synthetic episode pipeline.
//!
//! Episodes stand in for extracted video features: two per-object feature
//! streams (appearance and motion), per-object boxes and frame indices, and
//! per-frame global features, paired with a tokenized question. The generator
//! plants prototype patterns into one or both streams so that the ground-truth
//! answer provably depends on a chosen cue.

pub mod format;
mod generate;

pub use generate::{episode_plan, generate_episode, generate_episode_salted, EpisodePlan, Plant};

use serde::{Deserialize, Serialize};

use crate::error::{MasnError, Result};
use crate::tensor::Tensor;

/// Which stream carries the answer-determining patterns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CueMode {
    Appearance,
    Motion,
    Mixed,
}

impl std::fmt::Display for CueMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CueMode::Appearance => "appearance",
            CueMode::Motion => "motion",
            CueMode::Mixed => "mixed",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Count,
    OpenEnded,
    MultipleChoice,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TaskKind::Count => "count",
            TaskKind::OpenEnded => "open_ended",
            TaskKind::MultipleChoice => "multiple_choice",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for TaskKind {
    type Err = MasnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "count" => Ok(TaskKind::Count),
            "open_ended" => Ok(TaskKind::OpenEnded),
            "multiple_choice" => Ok(TaskKind::MultipleChoice),
            other => Err(MasnError::InvalidArgument(format!("unknown task kind: {other}"))),
        }
    }
}

impl std::str::FromStr for CueMode {
    type Err = MasnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "appearance" => Ok(CueMode::Appearance),
            "motion" => Ok(CueMode::Motion),
            "mixed" => Ok(CueMode::Mixed),
            other => Err(MasnError::InvalidArgument(format!("unknown cue mode: {other}"))),
        }
    }
}

/// Generator configuration; also serves as the dataset header schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Frames per episode (T).
    pub t_frames: usize,
    /// Objects per frame (N); the paper-scale default is 10.
    pub n_objects: usize,
    /// Raw feature width of the synthetic streams.
    pub d_in: usize,
    /// Question token vocabulary size.
    pub vocab: usize,
    pub cue: CueMode,
    pub task: TaskKind,
    /// Number of distinct prototype patterns the questions can name.
    pub n_prototypes: usize,
    /// Open-ended answer classes / attribute signatures.
    pub n_classes: usize,
    /// Candidate count for multiple-choice questions.
    pub m_choices: usize,
    /// Inclusive answer range for the counting task.
    pub count_range: (i64, i64),
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            t_frames: 4,
            n_objects: 10,
            d_in: 16,
            vocab: 32,
            cue: CueMode::Appearance,
            task: TaskKind::OpenEnded,
            n_prototypes: 4,
            n_classes: 4,
            m_choices: 4,
            count_range: (1, 5),
        }
    }
}

impl GeneratorConfig {
    pub fn objects_total(&self) -> usize {
        self.t_frames * self.n_objects
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_frames == 0 || self.n_objects == 0 || self.d_in == 0 {
            return Err(MasnError::InvalidArgument(
                "t_frames, n_objects and d_in must be >= 1".into(),
            ));
        }
        if self.vocab < 4 {
            return Err(MasnError::InvalidArgument("vocab must be >= 4".into()));
        }
        if self.n_prototypes == 0 || self.n_classes < 2 {
            return Err(MasnError::InvalidArgument(
                "need at least one prototype and two answer classes".into(),
            ));
        }
        // Token layout: [marker, query] + prototype names + attribute names.
        if self.vocab < 2 + self.n_prototypes + self.n_classes {
            return Err(MasnError::InvalidArgument(format!(
                "vocab {} too small for {} prototypes + {} classes",
                self.vocab, self.n_prototypes, self.n_classes
            )));
        }
        if self.m_choices < 2 {
            return Err(MasnError::InvalidArgument("m_choices must be >= 2".into()));
        }
        if self.m_choices > self.n_classes {
            return Err(MasnError::InvalidArgument(
                "m_choices cannot exceed n_classes (candidates name distinct classes)".into(),
            ));
        }
        if self.count_range.0 < 0 || self.count_range.0 > self.count_range.1 {
            return Err(MasnError::InvalidArgument(format!(
                "bad count range {:?}",
                self.count_range
            )));
        }
        if self.count_range.1 as usize > self.objects_total() {
            return Err(MasnError::InvalidArgument(format!(
                "count range {:?} exceeds K = {}",
                self.count_range,
                self.objects_total()
            )));
        }
        Ok(())
    }
}

/// Per-video object features for both streams plus per-frame global features.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectFeatureSet {
    pub t_frames: usize,
    pub n_objects: usize,
    /// Appearance object features, K x d_in.
    pub objects_a: Tensor,
    /// Motion object features, K x d_in.
    pub objects_m: Tensor,
    /// Normalized boxes (x1, y1, x2, y2), K x 4.
    pub boxes: Tensor,
    /// Frame index per object, length K.
    pub frame_index: Vec<usize>,
    /// Per-frame global appearance features, T x d_in.
    pub global_a: Tensor,
    /// Per-frame global motion features, T x d_in.
    pub global_m: Tensor,
}

impl ObjectFeatureSet {
    pub fn objects_total(&self) -> usize {
        self.t_frames * self.n_objects
    }

    pub fn d_in(&self) -> usize {
        self.objects_a.cols()
    }

    /// Structural checks every consumer relies on: shapes, box ordering,
    /// frame indices in range.
    pub fn validate(&self) -> Result<()> {
        let k = self.objects_total();
        let d_in = self.d_in();
        let check_shape = |name: &str, t: &Tensor, rows: usize, cols: usize| -> Result<()> {
            if t.shape() != [rows, cols] {
                return Err(MasnError::Shape(format!(
                    "{name}: expected [{rows}, {cols}], got {:?}",
                    t.shape()
                )));
            }
            Ok(())
        };
        check_shape("objects_a", &self.objects_a, k, d_in)?;
        check_shape("objects_m", &self.objects_m, k, d_in)?;
        check_shape("boxes", &self.boxes, k, 4)?;
        check_shape("global_a", &self.global_a, self.t_frames, d_in)?;
        check_shape("global_m", &self.global_m, self.t_frames, d_in)?;
        if self.frame_index.len() != k {
            return Err(MasnError::Shape(format!(
                "frame_index length {} != K = {k}",
                self.frame_index.len()
            )));
        }
        for (i, &f) in self.frame_index.iter().enumerate() {
            if f >= self.t_frames {
                return Err(MasnError::Shape(format!(
                    "object {i} has frame index {f} >= T = {}",
                    self.t_frames
                )));
            }
        }
        for i in 0..k {
            let b = self.boxes.row(i);
            let ok = 0.0 <= b[0] && b[0] < b[2] && b[2] <= 1.0 && 0.0 <= b[1] && b[1] < b[3] && b[3] <= 1.0;
            if !ok {
                return Err(MasnError::Shape(format!("object {i} has invalid box {b:?}")));
            }
        }
        Ok(())
    }

    /// Additionally require the canonical storage layout: object k sits in
    /// frame k / N. Generated and on-disk episodes satisfy this; in-memory
    /// permuted views (used by invariance tests) intentionally do not.
    pub fn validate_canonical(&self) -> Result<()> {
        self.validate()?;
        for (i, &f) in self.frame_index.iter().enumerate() {
            if f != i / self.n_objects {
                return Err(MasnError::Shape(format!(
                    "object {i} carries frame {f}, expected {}",
                    i / self.n_objects
                )));
            }
        }
        Ok(())
    }

    /// Reorder objects by `perm` (new index -> old index), keeping all
    /// per-object arrays aligned. Frame indices travel with their objects.
    pub fn permuted(&self, perm: &[usize]) -> Result<ObjectFeatureSet> {
        let k = self.objects_total();
        if perm.len() != k {
            return Err(MasnError::InvalidArgument(format!(
                "permutation length {} != K = {k}",
                perm.len()
            )));
        }
        let mut seen = vec![false; k];
        for &p in perm {
            if p >= k || seen[p] {
                return Err(MasnError::InvalidArgument("not a permutation".into()));
            }
            seen[p] = true;
        }
        let gather = |t: &Tensor| -> Tensor {
            let cols = t.cols();
            let mut data = Vec::with_capacity(k * cols);
            for &p in perm {
                data.extend_from_slice(t.row(p));
            }
            Tensor::matrix(k, cols, data).expect("permuted rows stay finite")
        };
        Ok(ObjectFeatureSet {
            t_frames: self.t_frames,
            n_objects: self.n_objects,
            objects_a: gather(&self.objects_a),
            objects_m: gather(&self.objects_m),
            boxes: gather(&self.boxes),
            frame_index: perm.iter().map(|&p| self.frame_index[p]).collect(),
            global_a: self.global_a.clone(),
            global_m: self.global_m.clone(),
        })
    }
}

/// Ground-truth answer, by task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Answer {
    Count(i64),
    Class(usize),
    Choice(usize),
}

/// A tokenized question with its answer and (for multiple choice) candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct Question {
    pub tokens: Vec<u32>,
    pub task: TaskKind,
    pub answer: Answer,
    /// Candidate token sequences; empty unless the task is multiple choice.
    pub candidates: Vec<Vec<u32>>,
}

impl Question {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(MasnError::InvalidArgument("question must have L >= 1 tokens".into()));
        }
        let in_vocab = |tokens: &[u32]| tokens.iter().all(|&t| (t as usize) < vocab);
        if !in_vocab(&self.tokens) {
            return Err(MasnError::Shape("question token outside vocab".into()));
        }
        match (&self.task, &self.answer) {
            (TaskKind::Count, Answer::Count(_)) => {}
            (TaskKind::OpenEnded, Answer::Class(_)) => {}
            (TaskKind::MultipleChoice, Answer::Choice(correct)) => {
                if self.candidates.len() < 2 {
                    return Err(MasnError::InvalidArgument(
                        "multiple choice needs M >= 2 candidates".into(),
                    ));
                }
                if *correct >= self.candidates.len() {
                    return Err(MasnError::InvalidArgument(
                        "correct choice index out of range".into(),
                    ));
                }
                for c in &self.candidates {
                    if c.is_empty() || !in_vocab(c) {
                        return Err(MasnError::Shape("bad candidate token sequence".into()));
                    }
                }
            }
            _ => {
                return Err(MasnError::InvalidArgument(
                    "answer kind does not match task kind".into(),
                ))
            }
        }
        if self.task != TaskKind::MultipleChoice && !self.candidates.is_empty() {
            return Err(MasnError::InvalidArgument(
                "candidates are only valid for multiple choice".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub features: ObjectFeatureSet,
    pub question: Question,
}

/// An in-memory dataset: the generator config it was built from plus episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn generate(config: &GeneratorConfig, count: usize, seed: u64) -> Result<Dataset> {
        config.validate()?;
        let episodes = (0..count)
            .map(|i| generate_episode(config, seed.wrapping_add(i as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { config: config.clone(), episodes })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }
}
