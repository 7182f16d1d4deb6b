//! The memory bank, the raw feature buffer, and the learnable read/write
//! interfaces between them and the perceiver.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::format::{checked_product, Reader, Writer};
use crate::stream::STREAM_MAGIC;
use crate::tensor::{attention, f32_round, AttentionParams, Matrix, Parameters};

pub const BANK_MAGIC: &[u8; 4] = b"RWMB";

/// Compact tokens written for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry {
    pub frame_index: u32,
    pub subclip_index: u32,
    /// `W × d`.
    pub tokens: Matrix,
}

/// Temporally ordered memory: exactly `W` tokens per processed frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    tokens_per_frame: usize,
    dim: usize,
    entries: Vec<MemoryEntry>,
}

impl MemoryBank {
    pub fn new(tokens_per_frame: usize, dim: usize) -> Self {
        MemoryBank {
            tokens_per_frame,
            dim,
            entries: Vec::new(),
        }
    }

    pub fn with_capacity(tokens_per_frame: usize, dim: usize, frames: usize) -> Self {
        MemoryBank {
            tokens_per_frame,
            dim,
            entries: Vec::with_capacity(frames),
        }
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.tokens_per_frame
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.tokens_per_frame * self.entries.len()
    }

    pub fn append(&mut self, entry: MemoryEntry) -> Result<()> {
        entry
            .tokens
            .ensure_shape(self.tokens_per_frame, self.dim, "MemoryBank::append")?;
        entry.tokens.ensure_finite("MemoryBank::append")?;
        if let Some(last) = self.entries.last() {
            if entry.frame_index <= last.frame_index {
                return Err(Error::OutOfOrder {
                    last: last.frame_index,
                    got: entry.frame_index,
                });
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    /// All memory tokens stacked in frame order, `(W·T) × d`.
    pub fn flattened(&self) -> Matrix {
        Matrix::vstack(self.entries.iter().map(|e| &e.tokens), self.dim)
            .expect("entries are validated on append")
    }

    /// Copy with every token rounded to `f32`, i.e. exactly what
    /// [`MemoryBank::to_bytes`] persists.
    pub fn rounded_to_f32(&self) -> MemoryBank {
        let mut out = self.clone();
        for e in &mut out.entries {
            e.tokens.data_mut().iter_mut().for_each(|v| *v = f32_round(*v));
        }
        out
    }

    /// Heap bytes held by token payloads.
    pub fn byte_size(&self) -> usize {
        self.entries.iter().map(|e| e.tokens.byte_size()).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(BANK_MAGIC);
        w.count(self.entries.len())?;
        w.count(self.tokens_per_frame)?;
        w.count(self.dim)?;
        for e in &self.entries {
            w.u32(e.frame_index);
            w.u32(e.subclip_index);
            w.f32s(e.tokens.data())?;
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, BANK_MAGIC)?;
        let (n, w, d) = (r.count()?, r.count()?, r.count()?);
        if w == 0 || d == 0 {
            return Err(Error::Malformed(format!("bank dimensions W={w} d={d} must be non-zero")));
        }
        checked_product(&[n, w, d, 4])?;
        let mut bank = MemoryBank::with_capacity(w, d, n.min(bytes.len()));
        for _ in 0..n {
            let frame_index = r.u32()?;
            let subclip_index = r.u32()?;
            let tokens = Matrix::new(w, d, r.f32s(w * d)?)?;
            bank.append(MemoryEntry {
                frame_index,
                subclip_index,
                tokens,
            })
            .map_err(|e| match e {
                Error::OutOfOrder { .. } => Error::Malformed(e.to_string()),
                other => other,
            })?;
        }
        r.expect_end()?;
        Ok(bank)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        MemoryBank::from_bytes(&fs::read(path)?)
    }
}

/// Learnable read/write queries and their attention blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryBank {
    /// `N_R × d`; also the perceiver's initial queries.
    pub read_queries: Matrix,
    /// `W × d`.
    pub write_queries: Matrix,
    pub read_attention: AttentionParams,
    pub write_attention: AttentionParams,
}

impl QueryBank {
    pub fn init(cfg: &RunConfig, rng: &mut impl Rng) -> Self {
        let mut normal = |rows: usize| {
            Matrix::from_fn(rows, cfg.dim, |_, _| {
                f32_round(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            })
        };
        let read_queries = normal(cfg.n_read);
        let write_queries = normal(cfg.n_write);
        QueryBank {
            read_queries,
            write_queries,
            read_attention: AttentionParams::init(cfg.dim, cfg.heads, 0.02, rng),
            write_attention: AttentionParams::init(cfg.dim, cfg.heads, 0.02, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.read_queries.cols()
    }

    pub fn n_read(&self) -> usize {
        self.read_queries.rows()
    }

    pub fn n_write(&self) -> usize {
        self.write_queries.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.n_read() == 0 || self.n_write() == 0 {
            return Err(Error::shape("QueryBank", "read and write query counts must be >= 1"));
        }
        self.write_queries.ensure_shape(self.n_write(), d, "QueryBank")?;
        for att in [&self.read_attention, &self.write_attention] {
            att.validate()?;
            if att.dim() != d {
                return Err(Error::shape("QueryBank", "attention dim differs from query dim"));
            }
        }
        Ok(())
    }
}

impl Parameters for QueryBank {
    fn slices(&self) -> Vec<&[f64]> {
        let mut out = vec![self.read_queries.data(), self.write_queries.data()];
        out.extend(self.read_attention.slices());
        out.extend(self.write_attention.slices());
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.read_queries.data_mut(), self.write_queries.data_mut()];
        out.extend(self.read_attention.slices_mut());
        out.extend(self.write_attention.slices_mut());
        out
    }
}

/// Retrieves context for the next sub-clip.
///
/// An empty bank yields the read queries unchanged. Otherwise the read queries
/// cross-attend over every memory token, with the queries added back when
/// `residual` is set.
pub fn read_context(bank: &MemoryBank, queries: &QueryBank, residual: bool) -> Result<Matrix> {
    if bank.is_empty() {
        return Ok(queries.read_queries.clone());
    }
    let keys = bank.flattened();
    let attended = attention(&queries.read_queries, &keys, &keys, &queries.read_attention)?;
    if residual {
        queries.read_queries.add(&attended)
    } else {
        Ok(attended)
    }
}

/// Compresses one frame's perceived queries into `W` memory tokens.
pub fn write_frame(
    perceived: &Matrix,
    queries: &QueryBank,
    frame_index: u32,
    subclip_index: u32,
) -> Result<MemoryEntry> {
    if perceived.cols() != queries.dim() || perceived.rows() != queries.n_read() {
        return Err(Error::shape(
            "write_frame",
            format!(
                "perceived is {:?}, expected {}x{}",
                perceived.shape(),
                queries.n_read(),
                queries.dim()
            ),
        ));
    }
    let tokens = attention(&queries.write_queries, perceived, perceived, &queries.write_attention)?;
    Ok(MemoryEntry {
        frame_index,
        subclip_index,
        tokens,
    })
}

enum Backing {
    Memory(Vec<(u32, Matrix)>),
    Spill {
        data_path: PathBuf,
        file: Option<File>,
        index: Vec<(u32, u64)>,
        next_offset: u64,
    },
}

/// Raw per-frame encoder tokens, kept aside for detailed second-stage lookup.
///
/// Either held in memory or spilled to a single file of one-frame `RWFS`
/// records plus a text manifest.
pub struct FeatureBuffer {
    tokens_per_frame: usize,
    dim: usize,
    backing: Backing,
}

impl fmt::Debug for FeatureBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeatureBuffer")
            .field("tokens_per_frame", &self.tokens_per_frame)
            .field("dim", &self.dim)
            .field("frames", &self.len())
            .field("spilled", &matches!(self.backing, Backing::Spill { .. }))
            .finish()
    }
}

pub const MANIFEST_HEADER: &str = "RWBM-MANIFEST 1";

impl FeatureBuffer {
    pub fn in_memory(tokens_per_frame: usize, dim: usize) -> Self {
        FeatureBuffer {
            tokens_per_frame,
            dim,
            backing: Backing::Memory(Vec::new()),
        }
    }

    pub fn in_memory_with_capacity(tokens_per_frame: usize, dim: usize, frames: usize) -> Self {
        FeatureBuffer {
            tokens_per_frame,
            dim,
            backing: Backing::Memory(Vec::with_capacity(frames)),
        }
    }

    /// Creates (truncating) `data_path` as the spill file.
    pub fn spill(tokens_per_frame: usize, dim: usize, data_path: impl AsRef<Path>) -> Result<Self> {
        let data_path = data_path.as_ref().to_path_buf();
        let file = File::create(&data_path)?;
        Ok(FeatureBuffer {
            tokens_per_frame,
            dim,
            backing: Backing::Spill {
                data_path,
                file: Some(file),
                index: Vec::new(),
                next_offset: 0,
            },
        })
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.tokens_per_frame
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        match &self.backing {
            Backing::Memory(v) => v.len(),
            Backing::Spill { index, .. } => index.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token_count(&self) -> usize {
        self.tokens_per_frame * self.len()
    }

    pub fn frame_indices(&self) -> Vec<u32> {
        match &self.backing {
            Backing::Memory(v) => v.iter().map(|(i, _)| *i).collect(),
            Backing::Spill { index, .. } => index.iter().map(|(i, _)| *i).collect(),
        }
    }

    /// Resident heap bytes of stored payloads (zero when spilled).
    pub fn resident_bytes(&self) -> usize {
        match &self.backing {
            Backing::Memory(v) => v.iter().map(|(_, m)| m.byte_size()).sum(),
            Backing::Spill { .. } => 0,
        }
    }

    fn last_index(&self) -> Option<u32> {
        match &self.backing {
            Backing::Memory(v) => v.last().map(|(i, _)| *i),
            Backing::Spill { index, .. } => index.last().map(|(i, _)| *i),
        }
    }

    pub fn store(&mut self, frame_index: u32, raw: &Matrix) -> Result<()> {
        raw.ensure_shape(self.tokens_per_frame, self.dim, "FeatureBuffer::store")?;
        raw.ensure_finite("FeatureBuffer::store")?;
        if let Some(last) = self.last_index() {
            if frame_index <= last {
                return Err(Error::OutOfOrder {
                    last,
                    got: frame_index,
                });
            }
        }
        match &mut self.backing {
            Backing::Memory(v) => v.push((frame_index, raw.clone())),
            Backing::Spill {
                file,
                index,
                next_offset,
                ..
            } => {
                if let Some(&bad) = raw.data().iter().find(|&&v| f32_round(v) != v) {
                    return Err(Error::NotF32Exact(bad));
                }
                let mut w = Writer::new(STREAM_MAGIC);
                w.u32(1);
                w.count(self.tokens_per_frame)?;
                w.count(self.dim)?;
                w.f32s(raw.data())?;
                let record = w.finish();
                let f = file
                    .as_mut()
                    .ok_or_else(|| Error::InvalidArgument("spill buffer opened read-only".into()))?;
                f.write_all(&record)?;
                index.push((frame_index, *next_offset));
                *next_offset += record.len() as u64;
            }
        }
        Ok(())
    }

    pub fn retrieve(&self, frame_index: u32) -> Result<Matrix> {
        match &self.backing {
            Backing::Memory(v) => v
                .binary_search_by_key(&frame_index, |(i, _)| *i)
                .map(|pos| v[pos].1.clone())
                .map_err(|_| Error::MissingFrame(frame_index)),
            Backing::Spill {
                data_path, index, ..
            } => {
                let pos = index
                    .binary_search_by_key(&frame_index, |(i, _)| *i)
                    .map_err(|_| Error::MissingFrame(frame_index))?;
                let offset = index[pos].1;
                let len = 20 + self.tokens_per_frame * self.dim * 4;
                let mut f = File::open(data_path)?;
                f.seek(SeekFrom::Start(offset))?;
                let mut bytes = Vec::with_capacity(len);
                f.take(len as u64).read_to_end(&mut bytes)?;
                let mut r = Reader::open(&bytes, STREAM_MAGIC)?;
                let (t, p, d) = (r.count()?, r.count()?, r.count()?);
                if (t, p, d) != (1, self.tokens_per_frame, self.dim) {
                    return Err(Error::Malformed(format!(
                        "buffer record for frame {frame_index} is {t}x{p}x{d}"
                    )));
                }
                Matrix::new(p, d, r.f32s(p * d)?)
            }
        }
    }

    /// Manifest text: header, `data=`/`P=`/`d=` lines, then one
    /// `frame_index offset` pair per line. `data` is written relative to the
    /// manifest's directory when possible.
    pub fn manifest_text(&self, manifest_dir: Option<&Path>) -> Result<String> {
        let Backing::Spill {
            data_path, index, ..
        } = &self.backing
        else {
            return Err(Error::InvalidArgument("only spilled buffers have a manifest".into()));
        };
        let data = manifest_dir
            .and_then(|dir| data_path.strip_prefix(dir).ok())
            .unwrap_or(data_path);
        let mut s = format!(
            "{MANIFEST_HEADER}\ndata={}\nP={}\nd={}\n",
            data.display(),
            self.tokens_per_frame,
            self.dim
        );
        for (frame, offset) in index {
            s.push_str(&format!("{frame} {offset}\n"));
        }
        Ok(s)
    }

    pub fn write_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = self.manifest_text(path.parent())?;
        let mut f = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        f.write_all(text.as_bytes())?;
        Ok(())
    }

    /// Opens a spilled buffer read-only from its manifest.
    pub fn open_manifest(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(Error::Malformed(format!("{} is not a buffer manifest", path.display())));
        }
        let mut field = |key: &str| -> Result<String> {
            lines
                .next()
                .and_then(|l| l.strip_prefix(key))
                .map(str::to_owned)
                .ok_or_else(|| Error::Malformed(format!("manifest missing {key}")))
        };
        let data = field("data=")?;
        let p: usize = field("P=")?.parse().map_err(|_| Error::Malformed("manifest P".into()))?;
        let d: usize = field("d=")?.parse().map_err(|_| Error::Malformed("manifest d".into()))?;
        let mut index = Vec::new();
        for line in lines {
            let (f, o) = line
                .split_once(' ')
                .ok_or_else(|| Error::Malformed(format!("manifest line {line:?}")))?;
            let frame: u32 = f.parse().map_err(|_| Error::Malformed(format!("manifest frame {f:?}")))?;
            let offset: u64 = o.parse().map_err(|_| Error::Malformed(format!("manifest offset {o:?}")))?;
            if index.last().is_some_and(|&(last, _)| frame <= last) {
                return Err(Error::Malformed("manifest frame indices must increase".into()));
            }
            index.push((frame, offset));
        }
        let data_path = match path.parent() {
            Some(dir) if Path::new(&data).is_relative() => dir.join(&data),
            _ => PathBuf::from(&data),
        };
        let next_offset = index.last().map_or(0, |&(_, o)| o + (20 + p * d * 4) as u64);
        Ok(FeatureBuffer {
            tokens_per_frame: p,
            dim: d,
            backing: Backing::Spill {
                data_path,
                file: None,
                index,
                next_offset,
            },
        })
    }
}

const TABLE_REFERENCE_FRAMES: usize = 548;
const TABLE_REFERENCE_TOKENS: usize = 1184;

/// Token and byte accounting for a processed stream.
#[derive(Clone, Debug, PartialEq)]
pub struct AccountingReport {
    pub frames: usize,
    pub memory_token_count: usize,
    pub buffer_token_count: usize,
    /// Frames that contribute pooled tokens: `min(Kc, L, T)`.
    pub selected_frames: usize,
    pub llm_input_length: usize,
    /// Elements of the largest read-attention score matrix, `N_R × W·T` per head.
    pub peak_transient_scores: usize,
    pub memory_bytes_f32: usize,
    pub buffer_bytes_f32: usize,
    pub llm_input_bytes_f32: usize,
    pub peak_transient_bytes_f32: usize,
    /// Formula value at the 548-frame reference length under this config.
    pub reference_formula_length: usize,
}

/// Reported counts follow `W·T + 1 + p·min(Kc, L, T)`.
pub fn accounting_report(bank: &MemoryBank, buffer: &FeatureBuffer, cfg: &RunConfig) -> AccountingReport {
    let frames = bank.len();
    let w = bank.tokens_per_frame();
    let d = bank.dim();
    let llm_len = |t: usize| w * t + 1 + cfg.pool_tokens * cfg.centers.min(cfg.top_l).min(t);
    let selected = cfg.centers.min(cfg.top_l).min(frames);
    let scores = cfg.n_read * w * frames;
    AccountingReport {
        frames,
        memory_token_count: bank.token_count(),
        buffer_token_count: buffer.token_count(),
        selected_frames: selected,
        llm_input_length: llm_len(frames),
        peak_transient_scores: scores,
        memory_bytes_f32: bank.token_count() * d * 4,
        buffer_bytes_f32: buffer.token_count() * buffer.dim() * 4,
        llm_input_bytes_f32: llm_len(frames) * d * 4,
        peak_transient_bytes_f32: scores * 4,
        reference_formula_length: llm_len(TABLE_REFERENCE_FRAMES),
    }
}

impl AccountingReport {
    /// `key=value` lines followed by the published-figure note.
    pub fn to_text(&self) -> String {
        format!(
            "frames={}\nmemory_tokens={}\nbuffer_tokens={}\nselected_frames={}\nllm_input_length={}\n\
             peak_transient_scores={}\nmemory_bytes_f32={}\nbuffer_bytes_f32={}\nllm_input_bytes_f32={}\n\
             peak_transient_bytes_f32={}\n{}\n",
            self.frames,
            self.memory_token_count,
            self.buffer_token_count,
            self.selected_frames,
            self.llm_input_length,
            self.peak_transient_scores,
            self.memory_bytes_f32,
            self.buffer_bytes_f32,
            self.llm_input_bytes_f32,
            self.peak_transient_bytes_f32,
            self.discrepancy_note(),
        )
    }

    pub fn discrepancy_note(&self) -> String {
        let diff = self.reference_formula_length as i64 - TABLE_REFERENCE_TOKENS as i64;
        format!(
            "note=the published token count for a {TABLE_REFERENCE_FRAMES}-frame video is {TABLE_REFERENCE_TOKENS} \
             under an undocumented counting convention; W*T+1+p*Kc gives {} at {TABLE_REFERENCE_FRAMES} frames \
             with this config (difference {diff:+})",
            self.reference_formula_length
        )
    }
}
