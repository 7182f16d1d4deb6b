//! Per-frame token streams, instruction encodings, sub-clip partitioning and
//! the `RWFS` feature-stream file format.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::{ChaCha8Rng, ChaCha20Rng};
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::format::{checked_product, Reader, Writer};
use crate::tensor::Matrix;

pub const STREAM_MAGIC: &[u8; 4] = b"RWFS";

/// Ordered per-frame token matrices, each `tokens_per_frame × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTokenStream {
    tokens_per_frame: usize,
    dim: usize,
    frames: Vec<Matrix>,
    /// Nominal sampling rate; informational only.
    pub fps: f64,
}

impl FrameTokenStream {
    pub fn new(frames: Vec<Matrix>, fps: f64) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidArgument("a stream needs at least one frame".into()))?;
        let (p, d) = first.shape();
        if p == 0 || d == 0 {
            return Err(Error::InvalidArgument("frames must have at least one token and one channel".into()));
        }
        for (i, f) in frames.iter().enumerate() {
            if f.shape() != (p, d) {
                return Err(Error::shape("FrameTokenStream", format!("frame {i} is {:?}, expected {p}x{d}", f.shape())));
            }
            f.ensure_finite("FrameTokenStream")?;
        }
        Ok(FrameTokenStream {
            tokens_per_frame: p,
            dim: d,
            frames,
            fps,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.tokens_per_frame
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frames(&self) -> &[Matrix] {
        &self.frames
    }

    pub fn frame(&self, index: usize) -> &Matrix {
        &self.frames[index]
    }

    /// The first `frames` frames (breakpoint processing).
    pub fn truncated(&self, frames: usize) -> Result<Self> {
        if frames == 0 || frames > self.frames.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot truncate a {}-frame stream to {frames}",
                self.frames.len()
            )));
        }
        Ok(FrameTokenStream {
            frames: self.frames[..frames].to_vec(),
            ..self.clone()
        })
    }

    pub fn subclips(&self, frames_per_clip: usize) -> Result<Vec<SubClip<'_>>> {
        Ok(split_into_subclips(self.frames.len(), frames_per_clip)?
            .into_iter()
            .enumerate()
            .map(|(index, range)| SubClip {
                index,
                frames: &self.frames[range.clone()],
                range,
            })
            .collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(STREAM_MAGIC);
        w.count(self.frames.len())?;
        w.count(self.tokens_per_frame)?;
        w.count(self.dim)?;
        for f in &self.frames {
            w.f32s(f.data())?;
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, STREAM_MAGIC)?;
        let (t, p, d) = (r.count()?, r.count()?, r.count()?);
        if t == 0 || p == 0 || d == 0 {
            return Err(Error::Malformed(format!("stream dimensions {t}x{p}x{d} must be non-zero")));
        }
        checked_product(&[t, p, d, 4])?;
        let mut frames = Vec::with_capacity(t);
        for _ in 0..t {
            frames.push(Matrix::new(p, d, r.f32s(p * d)?)?);
        }
        r.expect_end()?;
        FrameTokenStream::new(frames, 1.0)
    }
}

pub fn save_stream(stream: &FrameTokenStream, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, stream.to_bytes()?)?;
    Ok(())
}

pub fn load_stream(path: impl AsRef<Path>) -> Result<FrameTokenStream> {
    FrameTokenStream::from_bytes(&fs::read(path)?)
}

/// A contiguous block of frames processed as one read-perceive-write unit.
#[derive(Clone, Debug)]
pub struct SubClip<'a> {
    pub index: usize,
    pub range: Range<usize>,
    pub frames: &'a [Matrix],
}

impl SubClip<'_> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// `ceil(total / per_clip)` ranges tiling `[0, total)`; the last may be short.
pub fn split_into_subclips(total: usize, per_clip: usize) -> Result<Vec<Range<usize>>> {
    if total == 0 || per_clip == 0 {
        return Err(Error::InvalidArgument(format!(
            "sub-clip split needs frames >= 1 and frames-per-clip >= 1 (got {total}, {per_clip})"
        )));
    }
    Ok((0..total)
        .step_by(per_clip)
        .map(|start| start..(start + per_clip).min(total))
        .collect())
}

/// Deterministic stand-in for a visual encoder.
///
/// Token `(frame, token)` is drawn from a ChaCha20 keystream keyed by `seed`,
/// with stream id `frame` and word offset `token · dim`, so every value depends
/// on `(seed, frame, token, channel)` only. Values are uniform in `[-3, 3)` and
/// exactly representable as `f32`.
pub fn synth_stream(seed: u64, frames: usize, tokens_per_frame: usize, dim: usize) -> Result<FrameTokenStream> {
    if frames == 0 || tokens_per_frame == 0 || dim == 0 {
        return Err(Error::InvalidArgument("synth_stream dimensions must be >= 1".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        rng.set_stream(f as u64);
        let mut m = Matrix::zeros(tokens_per_frame, dim);
        for t in 0..tokens_per_frame {
            rng.set_word_pos((t * dim) as u128);
            for v in m.row_mut(t) {
                *v = unit_to_range(rng.next_u32());
            }
        }
        out.push(m);
    }
    FrameTokenStream::new(out, 1.0)
}

fn unit_to_range(word: u32) -> f64 {
    // 24 high bits -> [0, 1) exactly in f32, then affine to [-3, 3)
    let unit = (word >> 8) as f32 / (1u32 << 24) as f32;
    (unit * 6.0 - 3.0) as f64
}

/// Instruction token matrix and its row mean.
#[derive(Clone, Debug, PartialEq)]
pub struct InstructionEncoding {
    tokens: Matrix,
    mean: Vec<f64>,
}

impl InstructionEncoding {
    /// Wraps an arbitrary token matrix (possibly with zero rows).
    pub fn from_tokens(tokens: Matrix) -> Result<Self> {
        tokens.ensure_finite("InstructionEncoding")?;
        let mean = tokens.row_mean();
        Ok(InstructionEncoding { tokens, mean })
    }

    pub fn empty(dim: usize) -> Self {
        InstructionEncoding {
            tokens: Matrix::zeros(0, dim),
            mean: vec![0.0; dim],
        }
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }
}

/// Deterministic stand-in for a text encoder: one unit-norm row per
/// whitespace-delimited word, seeded by the word's SHA-256 digest.
pub fn encode_instruction(text: &str, dim: usize) -> Result<InstructionEncoding> {
    if dim == 0 {
        return Err(Error::InvalidArgument("instruction dim must be >= 1".into()));
    }
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return Err(Error::InvalidArgument("instruction text is empty".into()));
    }
    let mut tokens = Matrix::zeros(words.len(), dim);
    for (i, word) in words.iter().enumerate() {
        word_embedding(word, tokens.row_mut(i));
    }
    InstructionEncoding::from_tokens(tokens)
}

fn word_embedding(word: &str, out: &mut [f64]) {
    let digest = Sha256::digest(word.as_bytes());
    let seed: [u8; 32] = digest.into();
    let mut rng = ChaCha8Rng::from_seed(seed);
    loop {
        for v in out.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-6 {
            out.iter_mut().for_each(|v| *v /= norm);
            return;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn split_examples() {
        assert_eq!(split_into_subclips(64, 16).unwrap(), vec![0..16, 16..32, 32..48, 48..64]);
        assert_eq!(split_into_subclips(10, 16).unwrap(), vec![0..10]);
        let clips = split_into_subclips(548, 16).unwrap();
        assert_eq!(clips.len(), 35);
        assert_eq!(clips.iter().filter(|r| r.len() == 16).count(), 34);
        assert_eq!(clips.last().unwrap().len(), 4);
        assert!(split_into_subclips(0, 16).is_err());
        assert!(split_into_subclips(5, 0).is_err());
    }

    proptest! {
        #[test]
        fn subclips_tile_exactly(total in 1usize..2000, per in 1usize..64) {
            let clips = split_into_subclips(total, per).unwrap();
            prop_assert_eq!(clips.len(), total.div_ceil(per));
            let mut next = 0;
            for (i, r) in clips.iter().enumerate() {
                prop_assert_eq!(r.start, next);
                if i + 1 < clips.len() {
                    prop_assert_eq!(r.len(), per);
                }
                next = r.end;
            }
            prop_assert_eq!(next, total);
        }

        #[test]
        fn stream_bytes_round_trip(seed in any::<u64>(), t in 1usize..5, p in 1usize..5, d in 1usize..6) {
            let s = synth_stream(seed, t, p, d).unwrap();
            let bytes = s.to_bytes().unwrap();
            let back = FrameTokenStream::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &s);
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn synth_is_deterministic_and_bounded() {
        let a = synth_stream(7, 2, 1, 4).unwrap();
        let b = synth_stream(7, 2, 1, 4).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        let c = synth_stream(8, 2, 1, 4).unwrap();
        assert_ne!(a, c);
        let big = synth_stream(1, 4, 8, 16).unwrap();
        for f in big.frames() {
            assert!(f.data().iter().all(|v| (-3.0..=3.0).contains(v)));
        }
    }

    #[test]
    fn synth_prefix_stable() {
        let long = synth_stream(42, 10, 3, 5).unwrap();
        let short = synth_stream(42, 6, 3, 5).unwrap();
        assert_eq!(long.frame(5), short.frame(5));
        // token values do not depend on the token count either
        let wider = synth_stream(42, 10, 4, 5).unwrap();
        assert_eq!(wider.frame(5).slice_rows(0, 3), *long.frame(5));
    }

    #[test]
    fn load_errors_are_distinct() {
        let s = synth_stream(3, 2, 2, 2).unwrap();
        let mut bytes = s.to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert_eq!(FrameTokenStream::from_bytes(&bad).unwrap_err().code(), "format.bad_magic");
        bytes.truncate(bytes.len() - 3);
        assert_eq!(FrameTokenStream::from_bytes(&bytes).unwrap_err().code(), "format.truncated");
        let mut nan = s.to_bytes().unwrap();
        let at = nan.len() - 4;
        nan[at..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert_eq!(FrameTokenStream::from_bytes(&nan).unwrap_err().code(), "tensor.non_finite");
        let mut v2 = s.to_bytes().unwrap();
        v2[4] = 2;
        assert_eq!(FrameTokenStream::from_bytes(&v2).unwrap_err().code(), "format.version");
    }

    #[test]
    fn save_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.rwfs");
        let s = synth_stream(9, 3, 4, 8).unwrap();
        save_stream(&s, &path).unwrap();
        assert_eq!(load_stream(&path).unwrap(), s);
    }

    #[test]
    fn repeated_word_gives_identical_rows() {
        let enc = encode_instruction("a a a", 16).unwrap();
        assert_eq!(enc.tokens().rows(), 3);
        assert_eq!(enc.tokens().row(0), enc.tokens().row(1));
        assert_eq!(enc.tokens().row(0), enc.tokens().row(2));
        for (m, r) in enc.mean().iter().zip(enc.tokens().row(0)) {
            assert!((m - r).abs() < 1e-15);
        }
    }

    #[test]
    fn rows_are_unit_norm() {
        let enc = encode_instruction("describe the video", 32).unwrap();
        assert_eq!(enc.tokens().rows(), 3);
        for row in enc.tokens().row_iter() {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn word_swap_preserves_mean() {
        let a = encode_instruction("red car   turns left", 24).unwrap();
        let b = encode_instruction("left car turns red", 24).unwrap();
        assert_ne!(a.tokens(), b.tokens());
        let mut ra: Vec<Vec<f64>> = a.tokens().row_iter().map(<[f64]>::to_vec).collect();
        let mut rb: Vec<Vec<f64>> = b.tokens().row_iter().map(<[f64]>::to_vec).collect();
        ra.sort_by(|x, y| x[0].total_cmp(&y[0]));
        rb.sort_by(|x, y| x[0].total_cmp(&y[0]));
        assert_eq!(ra, rb);
        for (x, y) in a.mean().iter().zip(b.mean()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_instruction_rejected() {
        assert!(encode_instruction("   \n\t", 8).is_err());
    }
}
