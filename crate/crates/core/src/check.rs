//! Built-in self-check suites with per-property pass/fail lines.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::dfs::{dfs_select, dpc_knn_select, CandidateSet, DfsParams};
use crate::error::{Error, Result};
use crate::perceiver::{process_stream, ModelParams};
use crate::pipeline::uniform_select;
use crate::stream::{encode_instruction, synth_stream, FrameTokenStream};
use crate::tensor::{attention_forward, f32_round, AttentionParams, Matrix};
use crate::verify;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Grads,
    Oracle,
    Linearity,
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grads" => Ok(Suite::Grads),
            "oracle" => Ok(Suite::Oracle),
            "linearity" => Ok(Suite::Linearity),
            other => Err(Error::Config(format!("unknown check suite {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckReport {
    pub lines: Vec<CheckLine>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.passed)
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.lines {
            writeln!(f, "{l}")?;
        }
        let failed = self.lines.iter().filter(|l| !l.passed).count();
        write!(f, "{} checks, {failed} failed", self.lines.len())
    }
}

pub fn self_check(suite: Suite) -> CheckReport {
    let lines = match suite {
        Suite::Grads => gradient_checks(100, 1e-5),
        Suite::Oracle => vec![attention_oracle_check(200), softmax_row_check(200), dpc_oracle_check(500)],
        Suite::Linearity => vec![linearity_check(&[16, 64, 256])],
    };
    CheckReport { lines }
}

fn line(name: &str, passed: bool, detail: String) -> CheckLine {
    CheckLine {
        name: name.to_owned(),
        passed,
        detail,
    }
}

/// One line per kernel: worst relative error over `seeds` instances.
pub fn gradient_checks(seeds: u64, tol: f64) -> Vec<CheckLine> {
    type Kernel = fn(u64) -> Result<f64>;
    let kernels: [(&str, Kernel); 4] = [
        ("grad.attention", verify::attention_grad_error),
        ("grad.layer_norm", verify::layer_norm_grad_error),
        ("grad.ffn", verify::ffn_grad_error),
        ("grad.perceiver_layer", verify::perceiver_layer_grad_error),
    ];
    kernels
        .iter()
        .map(|&(name, kernel)| {
            let mut worst = 0.0f64;
            for seed in 0..seeds {
                match kernel(seed) {
                    Ok(e) => worst = worst.max(e),
                    Err(e) => return line(name, false, format!("seed {seed}: {e}")),
                }
            }
            line(
                name,
                worst < tol,
                format!("max rel err {worst:.3e} over {seeds} seeds (tol {tol:e}, h {:e})", verify::FD_STEP),
            )
        })
        .collect()
}

fn random_attention_instance(seed: u64) -> (Matrix, Matrix, Matrix, AttentionParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = [1, 2, 4][rng.random_range(0..3)];
    let d = heads * rng.random_range(1..=4);
    let nq = rng.random_range(1..=6);
    let nk = rng.random_range(1..=8);
    let mut m = |r: usize| Matrix::from_fn(r, d, |_, _| rng.random_range(-2.0..2.0));
    let (q, k, v) = (m(nq), m(nk), m(nk));
    let p = AttentionParams::init(d, heads, 0.7, &mut rng);
    (q, k, v, p)
}

pub fn attention_oracle_check(instances: u64) -> CheckLine {
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let (q, k, v, p) = random_attention_instance(seed);
        match attention_forward(&q, &k, &v, &p) {
            Ok((out, _)) => worst = worst.max(out.max_abs_diff(&verify::loop_attention(&q, &k, &v, &p))),
            Err(e) => return line("oracle.attention", false, format!("seed {seed}: {e}")),
        }
    }
    line(
        "oracle.attention",
        worst <= 1e-10,
        format!("max abs diff {worst:.3e} over {instances} instances (tol 1e-10)"),
    )
}

pub fn softmax_row_check(instances: u64) -> CheckLine {
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let (q, k, v, p) = random_attention_instance(seed);
        let Ok((_, cache)) = attention_forward(&q, &k, &v, &p) else {
            return line("oracle.softmax_rows", false, format!("seed {seed} failed"));
        };
        for w in &cache.weights {
            for row in w.row_iter() {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    line(
        "oracle.softmax_rows",
        worst <= 1e-12,
        format!("max |row sum - 1| {worst:.3e} over {instances} instances (tol 1e-12)"),
    )
}

pub fn dpc_oracle_check(instances: u64) -> CheckLine {
    let mut matched = 0;
    let mut first_mismatch = None;
    for seed in 0..instances {
        let inst = verify::random_dpc_instance(seed);
        let set = CandidateSet {
            frame_indices: inst.frames.clone(),
            relevance: vec![0.0; inst.frames.len()],
            points: inst.points.clone(),
            target: inst.frames.len(),
        };
        let want = verify::dpc_oracle(&inst.points, &inst.frames, inst.knn_k, inst.centers);
        match dpc_knn_select(&set, inst.knn_k, inst.centers) {
            Ok(got) if got.centers == want.centers => matched += 1,
            _ => {
                first_mismatch.get_or_insert(seed);
            }
        }
    }
    let mut detail = format!("{matched}/{instances} instances match exactly");
    if let Some(seed) = first_mismatch {
        detail.push_str(&format!(" (first mismatch: seed {seed})"));
    }
    line("oracle.dpc_knn", matched == instances, detail)
}

/// Configuration for quick Stage-1 runs: default memory layout, small model.
pub fn small_stage1_config() -> RunConfig {
    RunConfig {
        dim: 16,
        heads: 2,
        layers: 2,
        n_read: 8,
        ..RunConfig::default()
    }
}

pub fn linearity_check(lengths: &[usize]) -> CheckLine {
    let cfg = small_stage1_config();
    let model = ModelParams::init(&cfg);
    let Ok(instruction) = encode_instruction("what happens next", cfg.dim) else {
        return line("linearity.memory_tokens", false, "instruction encoding failed".into());
    };
    let mut parts = Vec::new();
    let mut ok = true;
    for &t in lengths {
        let counts = synth_stream(cfg.seed, t, 4, cfg.dim)
            .and_then(|s| process_stream(&s, &instruction, &model, cfg.subclip_frames, cfg.residual_read));
        match counts {
            Ok((bank, _, _)) => {
                let expect = cfg.n_write * t;
                ok &= bank.token_count() == expect;
                parts.push(format!("T={t}: {} (W*T={expect})", bank.token_count()));
            }
            Err(e) => {
                ok = false;
                parts.push(format!("T={t}: {e}"));
            }
        }
    }
    line("linearity.memory_tokens", ok, parts.join(", "))
}

/// Parameters under which every memory token is `mean(Q_R) + layers·mean(P̂_t)`:
/// all attention is uniform averaging with identity value/output maps,
/// feed-forwards and the temporal and read value maps are zero.
pub fn probe_model(cfg: &RunConfig) -> ModelParams {
    let d = cfg.dim;
    let averaging = |value: Matrix| AttentionParams {
        heads: cfg.heads,
        w_q: Matrix::zeros(d, d),
        w_k: Matrix::zeros(d, d),
        w_v: value,
        w_o: Matrix::identity(d),
        ln_gain: vec![1.0; d],
        ln_bias: vec![0.0; d],
    };
    let mut model = ModelParams::init(cfg);
    model.queries.read_attention = averaging(Matrix::zeros(d, d));
    model.queries.write_attention = averaging(Matrix::identity(d));
    for layer in &mut model.perceiver.layers {
        layer.cross = averaging(Matrix::identity(d));
        layer.temporal = averaging(Matrix::zeros(d, d));
        let hidden = layer.ffn.hidden();
        layer.ffn.w1 = Matrix::zeros(d, hidden);
        layer.ffn.w2 = Matrix::zeros(hidden, d);
        layer.ffn.b1.fill(0.0);
        layer.ffn.b2.fill(0.0);
    }
    model
}

/// One constructed stream: a contiguous segment whose tokens carry the
/// instruction direction, everything else small noise.
#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    pub segment: std::ops::Range<u32>,
    pub dfs_centers: Vec<u32>,
    pub uniform_centers: Vec<u32>,
    pub dfs_inside: usize,
    pub uniform_inside: usize,
    /// `ceil(Kc · segment / T) + 1`.
    pub uniform_bound: usize,
}

pub const PROBE_INSTRUCTION: &str = "when does the red car pass the gate";

pub fn probe_config() -> RunConfig {
    RunConfig {
        dim: 32,
        heads: 4,
        layers: 8,
        n_read: 32,
        pool_tokens: 8,
        ..RunConfig::default()
    }
}

pub fn segment_probe(instance: u64, frames: usize, tokens_per_frame: usize) -> Result<ProbeOutcome> {
    let cfg = RunConfig {
        seed: instance,
        ..probe_config()
    };
    let d = cfg.dim;
    let instruction = encode_instruction(PROBE_INSTRUCTION, d)?;
    let norm = instruction.mean().iter().map(|v| v * v).sum::<f64>().sqrt();
    let direction: Vec<f64> = instruction.mean().iter().map(|v| v / norm).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(instance ^ 0x5eed);
    let len = rng.random_range(cfg.top_l..=cfg.top_l + cfg.top_l / 2).min(frames);
    let start = rng.random_range(0..=frames - len);
    let segment = start..start + len;
    let stream_frames: Vec<Matrix> = (0..frames)
        .map(|t| {
            let lift = if segment.contains(&t) { 2.0 } else { 0.0 };
            Matrix::from_fn(tokens_per_frame, d, |_, c| {
                f32_round(rng.random_range(-0.5..0.5) + lift * direction[c])
            })
        })
        .collect();
    let stream = FrameTokenStream::new(stream_frames, 1.0)?;

    let model = probe_model(&cfg);
    let (bank, buffer, _) = process_stream(&stream, &instruction, &model, cfg.subclip_frames, cfg.residual_read)?;
    let dfs = dfs_select(&bank, &buffer, &instruction, DfsParams::from(&cfg))?;
    let uniform = uniform_select(&bank, &buffer, cfg.centers, cfg.pool_tokens)?;
    let seg = start as u32..(start + len) as u32;
    let inside = |c: &[u32]| c.iter().filter(|f| seg.contains(f)).count();
    Ok(ProbeOutcome {
        dfs_inside: inside(&dfs.centers),
        uniform_inside: inside(&uniform.centers),
        uniform_bound: (cfg.centers * len).div_ceil(frames) + 1,
        segment: seg,
        dfs_centers: dfs.centers,
        uniform_centers: uniform.centers,
    })
}

/// DFS must place at least `min_inside` centres in the segment while uniform
/// sampling stays within its stride bound, on every instance.
pub fn dfs_vs_uniform_check(instances: u64, frames: usize, min_inside: usize) -> CheckLine {
    let mut ok = true;
    let mut parts = Vec::new();
    for i in 0..instances {
        match segment_probe(i, frames, 8) {
            Ok(o) => {
                ok &= o.dfs_inside >= min_inside && o.uniform_inside <= o.uniform_bound;
                parts.push(format!(
                    "[{}..{}) dfs {}/8 uniform {}<= {}",
                    o.segment.start, o.segment.end, o.dfs_inside, o.uniform_inside, o.uniform_bound
                ));
            }
            Err(e) => {
                ok = false;
                parts.push(format!("instance {i}: {e}"));
            }
        }
    }
    line("harness.dfs_vs_uniform", ok, parts.join("; "))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_parse() {
        assert_eq!("grads".parse::<Suite>().unwrap(), Suite::Grads);
        assert!("fast".parse::<Suite>().is_err());
    }

    #[test]
    fn quick_suites_pass() {
        let lines = [
            attention_oracle_check(20),
            softmax_row_check(20),
            dpc_oracle_check(50),
            linearity_check(&[16, 40]),
        ];
        for l in &lines {
            assert!(l.passed, "{l}");
        }
        assert!(gradient_checks(2, 1e-5).iter().all(|l| l.passed));
    }

    #[test]
    fn probe_memory_follows_frame_means() {
        let cfg = RunConfig {
            layers: 2,
            ..probe_config()
        };
        let model = probe_model(&cfg);
        let stream = synth_stream(1, 4, 8, cfg.dim).unwrap();
        let instr = encode_instruction("a b", cfg.dim).unwrap();
        let (bank, _, _) = process_stream(&stream, &instr, &model, 4, true).unwrap();
        let q_mean = model.queries.read_queries.row_mean();
        for (t, e) in bank.entries().iter().enumerate() {
            let kv = Matrix::vstack([stream.frame(t), instr.tokens()], cfg.dim).unwrap();
            let kv_mean = kv.row_mean();
            for w in 0..2 {
                for c in 0..cfg.dim {
                    let expect = q_mean[c] + 2.0 * kv_mean[c];
                    assert!((e.tokens.get(w, c) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn probe_separates_dfs_from_uniform() {
        let o = segment_probe(0, 300, 8).unwrap();
        assert!(o.dfs_inside >= 6, "{o:?}");
        assert!(o.uniform_inside <= o.uniform_bound, "{o:?}");
    }
}
