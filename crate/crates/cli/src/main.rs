use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rewind_core::assembly::assemble;
use rewind_core::check::{self_check, Suite};
use rewind_core::dfs::SelectionResult;
use rewind_core::pipeline::{
    load_or_init_model, report_dir, run_pipeline, select_frames, write_selection, PipelineOptions, SelectMode,
};
use rewind_core::stream::{encode_instruction, load_stream, save_stream, synth_stream};
use rewind_core::{Error, FeatureBuffer, MemoryBank, RunConfig};

#[derive(Parser)]
#[command(name = "rewind", version, about = "Streaming memory and frame selection over frame-token streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic RWFS stream.
    Synth {
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        tokens_per_frame: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        fps: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage and write all artifacts into a directory.
    Process {
        #[arg(long)]
        stream: PathBuf,
        #[command(flatten)]
        instruction: InstructionArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
        /// Process only frames before this index.
        #[arg(long)]
        breakpoint: Option<usize>,
        #[arg(long, default_value = "dfs", value_parser = parse_mode)]
        select: SelectMode,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Select frames from a saved bank and feature buffer.
    Select {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        buffer_manifest: PathBuf,
        #[command(flatten)]
        instruction: InstructionArgs,
        #[command(flatten)]
        config: ConfigArgs,
        /// Selection file; the report is written next to it with a `.tsv` extension.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "dfs", value_parser = parse_mode)]
        mode: SelectMode,
    },
    /// Build the LLM input sequence from a bank and a selection.
    Assemble {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        selection: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Source of the separator row; seeded from the config when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the accounting of a finished run directory.
    Report {
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run a built-in verification suite.
    Check {
        #[arg(long, value_parser = parse_suite)]
        suite: Suite,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct InstructionArgs {
    #[arg(long)]
    instruction: Option<String>,
    #[arg(long)]
    instruction_file: Option<PathBuf>,
}

impl InstructionArgs {
    fn text(&self) -> anyhow::Result<String> {
        match (&self.instruction, &self.instruction_file) {
            (Some(t), _) => Ok(t.clone()),
            (None, Some(p)) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display())),
            (None, None) => bail!("an instruction is required"),
        }
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value config file; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set dfs.Kc=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set {o:?}: expected KEY=VALUE")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_mode(s: &str) -> Result<SelectMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn check_bank_dims(bank: &MemoryBank, cfg: &RunConfig) -> Result<(), Error> {
    if bank.dim() != cfg.dim || bank.tokens_per_frame() != cfg.n_write {
        return Err(Error::Config(format!(
            "bank is {}x{} per frame, config expects {}x{}",
            bank.tokens_per_frame(),
            bank.dim(),
            cfg.n_write,
            cfg.dim
        )));
    }
    Ok(())
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Synth {
            frames,
            tokens_per_frame,
            dim,
            seed,
            fps,
            out,
        } => {
            let mut stream = synth_stream(seed, frames, tokens_per_frame, dim)?;
            stream.fps = fps;
            ensure_parent(&out)?;
            save_stream(&stream, &out)?;
            println!("wrote {frames} frames of {tokens_per_frame}x{dim} to {}", out.display());
        }
        Command::Process {
            stream,
            instruction,
            config,
            out_dir,
            breakpoint,
            select,
            checkpoint,
        } => {
            let cfg = config.load()?;
            let stream = load_stream(&stream).with_context(|| format!("loading {}", stream.display()))?;
            let options = PipelineOptions {
                breakpoint,
                select,
                checkpoint,
            };
            let out = run_pipeline(&cfg, &stream, &instruction.text()?, &out_dir, &options)?;
            let centers: Vec<String> = out.selection.centers.iter().map(u32::to_string).collect();
            println!(
                "processed {} frames: {} memory tokens, selected [{}], llm input {} rows -> {}",
                out.bank.len(),
                out.bank.token_count(),
                centers.join(","),
                out.sequence.len(),
                out_dir.display()
            );
        }
        Command::Select {
            bank,
            buffer_manifest,
            instruction,
            config,
            out,
            mode,
        } => {
            let cfg = config.load()?;
            let bank = MemoryBank::load(&bank).with_context(|| format!("loading {}", bank.display()))?;
            check_bank_dims(&bank, &cfg)?;
            let buffer = FeatureBuffer::open_manifest(&buffer_manifest)
                .with_context(|| format!("opening {}", buffer_manifest.display()))?;
            let instruction = encode_instruction(&instruction.text()?, cfg.dim)?;
            let selection = select_frames(&bank, &buffer, &instruction, &cfg, mode)?.rounded_to_f32();
            ensure_parent(&out)?;
            write_selection(&selection, cfg.dim, &out)?;
            let centers: Vec<String> = selection.centers.iter().map(u32::to_string).collect();
            println!("selected [{}] -> {}", centers.join(","), out.display());
        }
        Command::Assemble {
            bank,
            selection,
            config,
            checkpoint,
            out,
        } => {
            let cfg = config.load()?;
            let bank = MemoryBank::load(&bank).with_context(|| format!("loading {}", bank.display()))?;
            check_bank_dims(&bank, &cfg)?;
            let selection =
                SelectionResult::load(&selection).with_context(|| format!("loading {}", selection.display()))?;
            let model = load_or_init_model(&cfg, checkpoint.as_deref())?;
            let sequence = assemble(&bank, &selection, &model.separator)?;
            ensure_parent(&out)?;
            sequence.save(&out)?;
            println!(
                "assembled {} rows (memory {}, separator 1, selected {}) -> {}",
                sequence.len(),
                sequence.memory_rows(),
                sequence.selected_rows(),
                out.display()
            );
        }
        Command::Report { out_dir } => print!("{}", report_dir(&out_dir)?),
        Command::Check { suite } => {
            let report = self_check(suite);
            println!("{report}");
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage problems are configuration errors
            return ExitCode::from(if e.use_stderr() { 3 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            // core errors already embed their source's message
            let mut parts: Vec<String> = Vec::new();
            for c in e.chain() {
                let msg = c.to_string();
                if !parts.last().is_some_and(|prev| prev.contains(&msg)) {
                    parts.push(msg);
                }
            }
            eprintln!("error: {}", parts.join(": "));
            let code = e
                .chain()
                .find_map(|c| c.downcast_ref::<Error>())
                .map_or(1, Error::exit_code);
            if let Some(core) = e.chain().find_map(|c| c.downcast_ref::<Error>()) {
                eprintln!("code: {}", core.code());
            }
            ExitCode::from(code as u8)
        }
    }
}
