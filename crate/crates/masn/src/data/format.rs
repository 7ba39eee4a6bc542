//! On-disk episode container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic      8 bytes   b"MASNEP01" (last two bytes are the format version)
//! header_len u32
//! header     JSON      GeneratorConfig fields + episode_count
//! episodes   binary    fixed field order per episode, f64/u32/i64 LE
//! ```
//!
//! Round-trips are bit-exact: floats are stored as raw IEEE-754 bits. Loading
//! validates the container against the header (shapes, token ranges, box
//! ordering, frame layout) and reports distinct error kinds for bad magic,
//! version drift, truncation, and content inconsistencies.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Answer, Dataset, Episode, GeneratorConfig, ObjectFeatureSet, Question, TaskKind};
use crate::error::{MasnError, Result};
use crate::tensor::Tensor;

pub const EPISODE_MAGIC: &[u8; 6] = b"MASNEP";
pub const EPISODE_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("format error: bad magic, not an episode/checkpoint container")]
    BadMagic,

    #[error("version mismatch: file version {found}, supported {supported}")]
    Version { found: u16, supported: u16 },

    #[error("truncated file: needed {needed} more bytes while reading {what}")]
    Truncated { what: &'static str, needed: usize },

    #[error("shape inconsistency: {0}")]
    Inconsistent(String),

    #[error("format error: invalid header json: {0}")]
    HeaderJson(#[from] serde_json::Error),
}

/// Self-describing header stored as JSON after the magic.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetHeader {
    #[serde(flatten)]
    pub config: GeneratorConfig,
    pub episode_count: usize,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn u32s(&mut self, vs: impl IntoIterator<Item = u32>) {
        for v in vs {
            self.u32(v);
        }
    }
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8]) -> Self {
        Reader { cur: Cursor::new(data) }
    }

    fn bytes(&mut self, n: usize, what: &'static str) -> std::result::Result<Vec<u8>, FormatError> {
        let mut out = vec![0u8; n];
        self.cur
            .read_exact(&mut out)
            .map_err(|_| FormatError::Truncated { what, needed: n })?;
        Ok(out)
    }

    fn u32(&mut self, what: &'static str) -> std::result::Result<u32, FormatError> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn i64(&mut self, what: &'static str) -> std::result::Result<i64, FormatError> {
        let b = self.bytes(8, what)?;
        Ok(i64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &'static str) -> std::result::Result<Vec<f64>, FormatError> {
        let b = self.bytes(n * 8, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn u32s(&mut self, n: usize, what: &'static str) -> std::result::Result<Vec<u32>, FormatError> {
        let b = self.bytes(n * 4, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn at_end(&mut self) -> bool {
        let mut probe = [0u8; 1];
        matches!(self.cur.read(&mut probe), Ok(0))
    }
}

/// Serialize a dataset into the container byte format.
pub fn encode_episodes(dataset: &Dataset) -> Result<Vec<u8>> {
    dataset.config.validate()?;
    let header = DatasetHeader {
        config: dataset.config.clone(),
        episode_count: dataset.episodes.len(),
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut w = Writer::new();
    w.buf.extend_from_slice(EPISODE_MAGIC);
    w.buf.extend_from_slice(&EPISODE_VERSION.to_le_bytes());
    w.u32(header_json.len() as u32);
    w.buf.extend_from_slice(&header_json);

    for episode in &dataset.episodes {
        episode.features.validate_canonical()?;
        episode.question.validate(dataset.config.vocab)?;
        let q = &episode.question;
        w.u32(q.tokens.len() as u32);
        w.u32s(q.tokens.iter().copied());
        match (&q.task, &q.answer) {
            (TaskKind::Count, Answer::Count(v)) => w.i64(*v),
            (TaskKind::OpenEnded, Answer::Class(c)) => w.u32(*c as u32),
            (TaskKind::MultipleChoice, Answer::Choice(correct)) => {
                w.u32(*correct as u32);
                w.u32(q.candidates.len() as u32);
                for cand in &q.candidates {
                    w.u32(cand.len() as u32);
                    w.u32s(cand.iter().copied());
                }
            }
            _ => {
                return Err(MasnError::InvalidArgument(
                    "episode answer kind does not match dataset task".into(),
                ))
            }
        }
        let f = &episode.features;
        w.f64s(f.boxes.data());
        w.u32s(f.frame_index.iter().map(|&i| i as u32));
        w.f64s(f.objects_a.data());
        w.f64s(f.objects_m.data());
        w.f64s(f.global_a.data());
        w.f64s(f.global_m.data());
    }
    Ok(w.buf)
}

/// Parse a container from bytes. This is the untrusted-input entry point; it
/// never panics on malformed data.
pub fn decode_episodes(bytes: &[u8]) -> std::result::Result<Dataset, FormatError> {
    let mut r = Reader::new(bytes);
    let magic = r.bytes(6, "magic")?;
    if magic != EPISODE_MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = u16::from_le_bytes(r.bytes(2, "version")?.try_into().expect("2 bytes"));
    if version != EPISODE_VERSION {
        return Err(FormatError::Version { found: version, supported: EPISODE_VERSION });
    }
    let header_len = r.u32("header length")? as usize;
    if header_len > bytes.len() {
        return Err(FormatError::Truncated { what: "header", needed: header_len });
    }
    let header_bytes = r.bytes(header_len, "header")?;
    let header: DatasetHeader = serde_json::from_slice(&header_bytes)?;
    let config = header.config.clone();
    config
        .validate()
        .map_err(|e| FormatError::Inconsistent(format!("header: {e}")))?;

    let k = config.objects_total();
    let d_in = config.d_in;
    let t = config.t_frames;
    let mut episodes = Vec::with_capacity(header.episode_count);

    for idx in 0..header.episode_count {
        let l = r.u32("question length")? as usize;
        if l == 0 {
            return Err(FormatError::Inconsistent(format!("episode {idx}: empty question")));
        }
        let tokens = r.u32s(l, "question tokens")?;
        let (answer, candidates) = match config.task {
            TaskKind::Count => (Answer::Count(r.i64("count answer")?), Vec::new()),
            TaskKind::OpenEnded => (Answer::Class(r.u32("class answer")? as usize), Vec::new()),
            TaskKind::MultipleChoice => {
                let correct = r.u32("correct choice")? as usize;
                let m = r.u32("candidate count")? as usize;
                if m != config.m_choices {
                    return Err(FormatError::Inconsistent(format!(
                        "episode {idx}: {m} candidates, header says {}",
                        config.m_choices
                    )));
                }
                let mut candidates = Vec::with_capacity(m);
                for _ in 0..m {
                    let cl = r.u32("candidate length")? as usize;
                    if cl == 0 || cl > 1024 {
                        return Err(FormatError::Inconsistent(format!(
                            "episode {idx}: candidate length {cl}"
                        )));
                    }
                    candidates.push(r.u32s(cl, "candidate tokens")?);
                }
                (Answer::Choice(correct), candidates)
            }
        };

        let boxes = r.f64s(k * 4, "boxes")?;
        let frame_index: Vec<usize> =
            r.u32s(k, "frame indices")?.into_iter().map(|v| v as usize).collect();
        let objects_a = r.f64s(k * d_in, "appearance objects")?;
        let objects_m = r.f64s(k * d_in, "motion objects")?;
        let global_a = r.f64s(t * d_in, "appearance globals")?;
        let global_m = r.f64s(t * d_in, "motion globals")?;

        let tensor = |rows: usize, cols: usize, data: Vec<f64>, what: &str| {
            Tensor::matrix(rows, cols, data)
                .map_err(|e| FormatError::Inconsistent(format!("episode {idx} {what}: {e}")))
        };
        let features = ObjectFeatureSet {
            t_frames: t,
            n_objects: config.n_objects,
            objects_a: tensor(k, d_in, objects_a, "objects_a")?,
            objects_m: tensor(k, d_in, objects_m, "objects_m")?,
            boxes: tensor(k, 4, boxes, "boxes")?,
            frame_index,
            global_a: tensor(t, d_in, global_a, "global_a")?,
            global_m: tensor(t, d_in, global_m, "global_m")?,
        };
        features
            .validate_canonical()
            .map_err(|e| FormatError::Inconsistent(format!("episode {idx}: {e}")))?;

        let question = Question { tokens, task: config.task, answer, candidates };
        question
            .validate(config.vocab)
            .map_err(|e| FormatError::Inconsistent(format!("episode {idx}: {e}")))?;

        episodes.push(Episode { features, question });
    }

    if !r.at_end() {
        return Err(FormatError::Inconsistent("trailing bytes after last episode".into()));
    }
    Ok(Dataset { config, episodes })
}

pub fn write_episodes(path: &Path, dataset: &Dataset) -> Result<()> {
    let bytes = encode_episodes(dataset)?;
    crate::harness::atomic_write(path, &bytes)
}

pub fn load_episodes(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| MasnError::io(path.display().to_string(), e))?;
    Ok(decode_episodes(&bytes)?)
}
