//! End-to-end runs: Stage 1, frame selection, assembly, and the artifacts
//! written to an output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::assembly::{assemble, LLMInputSequence};
use crate::config::RunConfig;
use crate::dfs::{dfs_select, pool_frames, CandidateRecord, DfsParams, SelectionResult};
use crate::error::{Error, Result};
use crate::memory::{accounting_report, AccountingReport, FeatureBuffer, MemoryBank};
use crate::perceiver::{process_stream_into, ModelParams, Stage1Trace};
use crate::stream::{encode_instruction, FrameTokenStream, InstructionEncoding};

pub const CONFIG_FILE: &str = "config.txt";
pub const INSTRUCTION_FILE: &str = "instruction.txt";
pub const PARAMS_FILE: &str = "params.rwpm";
pub const BANK_FILE: &str = "memory.rwmb";
pub const BUFFER_DATA_FILE: &str = "buffer.rwfs";
pub const BUFFER_MANIFEST_FILE: &str = "buffer.manifest";
pub const SELECTION_FILE: &str = "selection.rwsl";
pub const SELECTION_REPORT_FILE: &str = "selection.tsv";
pub const LLM_INPUT_FILE: &str = "llm_input.rwli";
pub const ACCOUNTING_FILE: &str = "accounting.txt";

impl From<&RunConfig> for DfsParams {
    fn from(cfg: &RunConfig) -> Self {
        DfsParams {
            top_l: cfg.top_l,
            knn_k: cfg.knn_k,
            centers: cfg.centers,
            pool_tokens: cfg.pool_tokens,
            repr: cfg.z_repr,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SelectMode {
    #[default]
    Dfs,
    /// Evenly spaced frames, ignoring the instruction.
    Uniform,
}

impl FromStr for SelectMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dfs" => Ok(SelectMode::Dfs),
            "uniform" => Ok(SelectMode::Uniform),
            other => Err(Error::Config(format!("unknown selection mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct PipelineOptions {
    /// Process only frames `< breakpoint`.
    pub breakpoint: Option<usize>,
    pub select: SelectMode,
    /// Load parameters instead of seeding them from the config.
    pub checkpoint: Option<PathBuf>,
}

/// Everything a run produced, as written to disk.
#[derive(Debug)]
pub struct PipelineOutput {
    pub model: ModelParams,
    pub bank: MemoryBank,
    pub selection: SelectionResult,
    pub sequence: LLMInputSequence,
    pub accounting: AccountingReport,
    pub trace: Stage1Trace,
}

pub fn load_or_init_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<ModelParams> {
    let model = match checkpoint {
        Some(path) => ModelParams::load(path, cfg)?,
        None => ModelParams::init(cfg),
    };
    model.validate(cfg)?;
    Ok(model)
}

/// `floor(i·T/Kc)` for `i < min(Kc, T)`, as positions into the bank.
pub fn uniform_positions(frames: usize, centers: usize) -> Vec<usize> {
    let k = centers.min(frames);
    (0..k).map(|i| i * frames / k).collect()
}

pub fn uniform_select(
    bank: &MemoryBank,
    buffer: &FeatureBuffer,
    centers: usize,
    pool_tokens: usize,
) -> Result<SelectionResult> {
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    if centers == 0 {
        return Err(Error::InvalidArgument("Kc must be >= 1".into()));
    }
    let frames: Vec<u32> = uniform_positions(bank.len(), centers)
        .into_iter()
        .map(|i| bank.entries()[i].frame_index)
        .collect();
    let pooled = pool_frames(buffer, &frames, pool_tokens)?;
    Ok(SelectionResult {
        records: frames
            .iter()
            .map(|&f| CandidateRecord {
                frame_index: f,
                relevance: None,
                density: None,
                distance: None,
                weighted: None,
                chosen: true,
            })
            .collect(),
        centers: frames,
        pooled,
        diagnostics: None,
    })
}

pub fn select_frames(
    bank: &MemoryBank,
    buffer: &FeatureBuffer,
    instruction: &InstructionEncoding,
    cfg: &RunConfig,
    mode: SelectMode,
) -> Result<SelectionResult> {
    match mode {
        SelectMode::Dfs => dfs_select(bank, buffer, instruction, DfsParams::from(cfg)),
        SelectMode::Uniform => uniform_select(bank, buffer, cfg.centers, cfg.pool_tokens),
    }
}

/// Runs every stage and writes the artifacts into `out_dir`.
///
/// Stage 2 and assembly read the bank and pooled tokens at the `f32`
/// precision they are stored with, so rerunning `select` or `assemble` from
/// the files reproduces the same bytes.
pub fn run_pipeline(
    cfg: &RunConfig,
    stream: &FrameTokenStream,
    instruction_text: &str,
    out_dir: impl AsRef<Path>,
    options: &PipelineOptions,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let stream = match options.breakpoint {
        Some(0) => return Err(Error::InvalidArgument("breakpoint must be >= 1 frame".into())),
        Some(n) if n < stream.frame_count() => stream.truncated(n)?,
        _ => stream.clone(),
    };
    if stream.dim() != cfg.dim {
        return Err(Error::Config(format!(
            "stream dim {} does not match model.d = {}",
            stream.dim(),
            cfg.dim
        )));
    }
    let instruction = encode_instruction(instruction_text, cfg.dim)?;
    let model = load_or_init_model(cfg, options.checkpoint.as_deref())?;

    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(CONFIG_FILE), cfg.to_text())?;
    fs::write(out_dir.join(INSTRUCTION_FILE), format!("{}\n", instruction_text.trim()))?;
    model.save(out_dir.join(PARAMS_FILE))?;

    let mut buffer = FeatureBuffer::spill(stream.tokens_per_frame(), stream.dim(), out_dir.join(BUFFER_DATA_FILE))?;
    let (bank, trace) =
        process_stream_into(&stream, &instruction, &model, cfg.subclip_frames, cfg.residual_read, &mut buffer)?;
    let bank = bank.rounded_to_f32();
    bank.save(out_dir.join(BANK_FILE))?;
    buffer.write_manifest(out_dir.join(BUFFER_MANIFEST_FILE))?;

    let selection = select_frames(&bank, &buffer, &instruction, cfg, options.select)?.rounded_to_f32();
    write_selection(&selection, cfg.dim, out_dir.join(SELECTION_FILE))?;

    let sequence = assemble(&bank, &selection, &model.separator)?;
    sequence.save(out_dir.join(LLM_INPUT_FILE))?;

    let accounting = accounting_report(&bank, &buffer, cfg);
    if accounting.llm_input_length != sequence.len() {
        return Err(Error::InvalidArgument(format!(
            "assembled {} rows but accounting predicts {}",
            sequence.len(),
            accounting.llm_input_length
        )));
    }
    fs::write(out_dir.join(ACCOUNTING_FILE), accounting.to_text())?;

    Ok(PipelineOutput {
        model,
        bank,
        selection,
        sequence,
        accounting,
        trace,
    })
}

/// Writes `selection.rwsl` at `path` and its report next to it.
pub fn write_selection(selection: &SelectionResult, dim: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    selection.save(path, dim)?;
    fs::write(path.with_extension("tsv"), selection.report())?;
    Ok(())
}

/// Re-derives the accounting of a finished run directory from its artifacts.
pub fn report_dir(out_dir: impl AsRef<Path>) -> Result<String> {
    let dir = out_dir.as_ref();
    let cfg = RunConfig::parse(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
    let bank = MemoryBank::load(dir.join(BANK_FILE))?;
    let buffer = FeatureBuffer::open_manifest(dir.join(BUFFER_MANIFEST_FILE))?;
    let selection = SelectionResult::load(dir.join(SELECTION_FILE))?;
    let sequence = LLMInputSequence::load(dir.join(LLM_INPUT_FILE))?;
    let accounting = accounting_report(&bank, &buffer, &cfg);
    let centers: Vec<String> = selection.centers.iter().map(u32::to_string).collect();
    Ok(format!(
        "{}selected={}\nllm_input_rows={} (memory {} + separator 1 + selected {})\n",
        accounting.to_text(),
        centers.join(","),
        sequence.len(),
        sequence.memory_rows(),
        sequence.selected_rows()
    ))
}
