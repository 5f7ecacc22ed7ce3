//! Embedding bundles: the binary `EMB1` container, tab-separated pair
//! manifests, caption-candidate selection, and a synthetic generator that
//! stands in for upstream encoders.
//!
//! `EMB1` layout, little-endian throughout:
//!
//! ```text
//! magic "EMB1" | u32 dim | u32 n_audio | u32 n_text | u32 n_pairs
//! per audio:  u32 id_len | id bytes | u32 frames | frames*dim f32
//! per text:   u32 id_len | id bytes | dim f32
//! per pair:   u32 id_len | text id  | u32 id_len | audio id
//! ```
//!
//! Values are stored as `f32`; all in-memory compute stays `f64`.

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::objective::cosine_similarity;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::HashSet;
use std::path::Path;

const MAGIC: &[u8; 4] = b"EMB1";

/// Precomputed embeddings plus relevance pairs; the input universe for
/// training and evaluation. Audio items are `frames x dim`, text items
/// `1 x dim`, and each pair is `(text_id, audio_id)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    pub dim: usize,
    pub audio: Vec<(String, Matrix)>,
    pub text: Vec<(String, Matrix)>,
    pub pairs: Vec<(String, String)>,
}

impl EmbeddingBundle {
    pub fn validate(&self) -> Result<()> {
        let mut audio_ids = HashSet::new();
        for (id, frames) in &self.audio {
            if frames.cols() != self.dim {
                return Err(Error::Validation(format!(
                    "audio item `{id}` has dimension {}, bundle dimension is {}",
                    frames.cols(),
                    self.dim
                )));
            }
            if frames.rows() == 0 {
                return Err(Error::Validation(format!(
                    "audio item `{id}` has zero frames"
                )));
            }
            if !audio_ids.insert(id.as_str()) {
                return Err(Error::Validation(format!("duplicate audio id `{id}`")));
            }
        }
        let mut text_ids = HashSet::new();
        for (id, vector) in &self.text {
            if vector.rows() != 1 || vector.cols() != self.dim {
                return Err(Error::Validation(format!(
                    "text item `{id}` must be 1x{}, got {}",
                    self.dim,
                    vector.shape_string()
                )));
            }
            if !text_ids.insert(id.as_str()) {
                return Err(Error::Validation(format!("duplicate text id `{id}`")));
            }
        }
        for (text_id, audio_id) in &self.pairs {
            if !text_ids.contains(text_id.as_str()) {
                return Err(Error::Validation(format!(
                    "pair references unknown text id `{text_id}`"
                )));
            }
            if !audio_ids.contains(audio_id.as_str()) {
                return Err(Error::Validation(format!(
                    "pair references unknown audio id `{audio_id}`"
                )));
            }
        }
        Ok(())
    }

    pub fn audio_by_id(&self, id: &str) -> Option<&Matrix> {
        self.audio.iter().find(|(i, _)| i == id).map(|(_, m)| m)
    }

    pub fn text_by_id(&self, id: &str) -> Option<&Matrix> {
        self.text.iter().find(|(i, _)| i == id).map(|(_, m)| m)
    }

    /// Replace the pair list, revalidating id references.
    pub fn with_pairs(mut self, pairs: Vec<(String, String)>) -> Result<Self> {
        self.pairs = pairs;
        self.validate()?;
        Ok(self)
    }
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| Error::Validation(format!("count {v} exceeds the u32 format limit")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(buf, s.len())?;
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_matrix_f32(buf: &mut Vec<u8>, m: &Matrix) {
    for v in m.data() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

/// Serialize a bundle to the `EMB1` byte layout.
pub fn bundle_to_bytes(bundle: &EmbeddingBundle) -> Result<Vec<u8>> {
    bundle.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, bundle.dim)?;
    put_u32(&mut buf, bundle.audio.len())?;
    put_u32(&mut buf, bundle.text.len())?;
    put_u32(&mut buf, bundle.pairs.len())?;
    for (id, frames) in &bundle.audio {
        put_str(&mut buf, id)?;
        put_u32(&mut buf, frames.rows())?;
        put_matrix_f32(&mut buf, frames);
    }
    for (id, vector) in &bundle.text {
        put_str(&mut buf, id)?;
        put_matrix_f32(&mut buf, vector);
    }
    for (text_id, audio_id) in &bundle.pairs {
        put_str(&mut buf, text_id)?;
        put_str(&mut buf, audio_id)?;
    }
    Ok(buf)
}

pub fn write_bundle(bundle: &EmbeddingBundle, path: impl AsRef<Path>) -> Result<()> {
    let bytes = bundle_to_bytes(bundle)?;
    std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path.as_ref(), e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!(
                    "truncated while reading {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)?;
        let offset = self.pos as u64;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format {
            offset,
            message: format!("{what} is not valid UTF-8"),
        })
    }

    fn matrix_f32(&mut self, rows: usize, cols: usize, what: &str) -> Result<Matrix> {
        let bytes = self.take(rows * cols * 4, what)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Matrix::from_vec(rows, cols, data)
    }
}

/// Parse a bundle from `EMB1` bytes, validating every invariant.
pub fn bundle_from_bytes(bytes: &[u8]) -> Result<EmbeddingBundle> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(magic),
                "EMB1"
            ),
        });
    }
    let dim = cur.u32("dim")?;
    let n_audio = cur.u32("audio count")?;
    let n_text = cur.u32("text count")?;
    let n_pairs = cur.u32("pair count")?;

    let mut audio = Vec::with_capacity(n_audio);
    for _ in 0..n_audio {
        let id = cur.string("audio id")?;
        let frames = cur.u32("frame count")?;
        let m = cur.matrix_f32(frames, dim, "audio frames")?;
        audio.push((id, m));
    }
    let mut text = Vec::with_capacity(n_text);
    for _ in 0..n_text {
        let id = cur.string("text id")?;
        let m = cur.matrix_f32(1, dim, "text vector")?;
        text.push((id, m));
    }
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let text_id = cur.string("pair text id")?;
        let audio_id = cur.string("pair audio id")?;
        pairs.push((text_id, audio_id));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            offset: cur.pos as u64,
            message: format!("{} unexpected trailing bytes", bytes.len() - cur.pos),
        });
    }
    let bundle = EmbeddingBundle {
        dim,
        audio,
        text,
        pairs,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<EmbeddingBundle> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    bundle_from_bytes(&bytes)
}

/// Parse a tab-separated pair manifest: one `text_id<TAB>audio_id` per line,
/// UTF-8, LF line endings. Blank lines are skipped.
pub fn parse_pairs_tsv(content: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(text_id), Some(audio_id), None) =
            (fields.next(), fields.next(), fields.next())
        else {
            return Err(Error::Format {
                offset: 0,
                message: format!(
                    "pair manifest line {} must be `text_id<TAB>audio_id`: {line:?}",
                    lineno + 1
                ),
            });
        };
        pairs.push((text_id.to_string(), audio_id.to_string()));
    }
    Ok(pairs)
}

pub fn read_pairs_tsv(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let content =
        std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    parse_pairs_tsv(&content)
}

/// An original caption embedding plus alternative candidates to choose from.
#[derive(Debug, Clone)]
pub struct CandidateCaptionSet {
    pub original: (String, Matrix),
    pub candidates: Vec<(String, Matrix)>,
}

/// Pick the candidate most cosine-similar to the original caption; ties go
/// to the lexicographically smallest id.
pub fn select_caption(set: &CandidateCaptionSet) -> Result<String> {
    if set.candidates.is_empty() {
        return Err(Error::Contract(
            "caption selection needs at least one candidate".into(),
        ));
    }
    let mut best: Option<(&str, f64)> = None;
    for (id, vector) in &set.candidates {
        let sim = cosine_similarity(&set.original.1, vector)?;
        let better = match best {
            None => true,
            Some((best_id, best_sim)) => {
                sim > best_sim || (sim == best_sim && id.as_str() < best_id)
            }
        };
        if better {
            best = Some((id, sim));
        }
    }
    Ok(best.expect("nonempty candidates").0.to_string())
}

/// Deterministic synthetic bundle: one unit-norm anchor per item, audio
/// frames and the paired text are independent Gaussian perturbations of that
/// anchor scaled by `noise`. Stored values are rounded through `f32` so a
/// disk round-trip reproduces the bundle exactly.
pub fn generate_synthetic(
    num_items: usize,
    dim: usize,
    frames: usize,
    noise: f64,
    seed: u64,
) -> Result<EmbeddingBundle> {
    if num_items < 2 {
        return Err(Error::Config(format!(
            "synthetic bundles need at least 2 items, got {num_items}"
        )));
    }
    if dim == 0 || frames == 0 {
        return Err(Error::Config(
            "synthetic dimension and frame count must be positive".into(),
        ));
    }
    if noise.is_nan() || noise < 0.0 {
        return Err(Error::Config(format!("noise must be >= 0, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let draw = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n).map(|_| normal.sample(rng)).collect()
    };

    let mut audio = Vec::with_capacity(num_items);
    let mut text = Vec::with_capacity(num_items);
    let mut pairs = Vec::with_capacity(num_items);
    for i in 0..num_items {
        let mut anchor = draw(dim, &mut rng);
        let norm = anchor.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut anchor {
            *v /= norm;
        }
        let quantize = |v: f64| (v as f32) as f64;
        let mut frame_data = Vec::with_capacity(frames * dim);
        for _ in 0..frames {
            let jitter = draw(dim, &mut rng);
            for (a, j) in anchor.iter().zip(jitter) {
                frame_data.push(quantize(a + noise * j));
            }
        }
        let jitter = draw(dim, &mut rng);
        let text_data: Vec<f64> = anchor
            .iter()
            .zip(jitter)
            .map(|(a, j)| quantize(a + noise * j))
            .collect();

        let audio_id = format!("a{i:04}");
        let text_id = format!("t{i:04}");
        audio.push((audio_id.clone(), Matrix::from_vec(frames, dim, frame_data)?));
        text.push((text_id.clone(), Matrix::from_vec(1, dim, text_data)?));
        pairs.push((text_id, audio_id));
    }
    let bundle = EmbeddingBundle {
        dim,
        audio,
        text,
        pairs,
    };
    bundle.validate()?;
    Ok(bundle)
}
