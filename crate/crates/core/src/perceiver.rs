//! Instruction-aware perceiver block and the Stage-1 read-perceive-write loop.
//!
//! Each layer runs three pre-norm residual sublayers over the per-frame query
//! states of one sub-clip:
//!
//! 1. cross-attention, per frame, from the states to that frame's tokens with
//!    the instruction rows appended;
//! 2. temporal self-attention, per query index, across the frames of the clip
//!    (bidirectional);
//! 3. a position-wise `d → 4d → d` feed-forward with SiLU.
//!
//! Only queries are normalized in the cross sublayer; frame and instruction
//! tokens enter the keys/values as-is.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::config::{RunConfig, TemporalMode};
use crate::error::{Error, Result};
use crate::format::{Reader, Writer};
use crate::memory::{read_context, write_frame, FeatureBuffer, MemoryBank, QueryBank};
use crate::stream::{FrameTokenStream, InstructionEncoding, SubClip};
use crate::tensor::{
    attention_backward, attention_forward, f32_round, layer_norm_backward, layer_norm_forward,
    AttentionCache, AttentionParams, LayerNormCache, Matrix, Parameters, LAYER_NORM_EPS,
};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RWPM";

/// Position-wise feed-forward with its own pre-norm.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
    /// `d × hidden`.
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// `hidden × d`.
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl FeedForward {
    pub fn init(dim: usize, hidden: usize, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be positive");
        let w1 = Matrix::from_fn(dim, hidden, |_, _| f32_round(normal.sample(rng)));
        let w2 = Matrix::from_fn(hidden, dim, |_, _| f32_round(normal.sample(rng)));
        FeedForward {
            ln_gain: vec![1.0; dim],
            ln_bias: vec![0.0; dim],
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: vec![0.0; dim],
        }
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        FeedForward {
            ln_gain: vec![0.0; dim],
            ln_bias: vec![0.0; dim],
            w1: Matrix::zeros(dim, hidden),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(hidden, dim),
            b2: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    /// The sublayer term `W2·silu(W1·LN(x) + b1) + b2`, without the residual.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_cached(x).map(|(y, _)| y)
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, FfnCache)> {
        let (normed, ln) = layer_norm_forward(x, &self.ln_gain, &self.ln_bias, LAYER_NORM_EPS)?;
        let mut pre = normed.matmul(&self.w1)?;
        for r in 0..pre.rows() {
            for (v, b) in pre.row_mut(r).iter_mut().zip(&self.b1) {
                *v += b;
            }
        }
        let mut act = pre.clone();
        act.data_mut().iter_mut().for_each(|v| *v = silu(*v));
        let mut out = act.matmul(&self.w2)?;
        for r in 0..out.rows() {
            for (v, b) in out.row_mut(r).iter_mut().zip(&self.b2) {
                *v += b;
            }
        }
        Ok((
            out,
            FfnCache {
                ln,
                normed,
                pre,
                act,
            },
        ))
    }

    /// Returns `dx` and accumulates parameter gradients into `grads`.
    pub fn backward(&self, cache: &FfnCache, dy: &Matrix, grads: &mut FeedForward) -> Result<Matrix> {
        grads.w2.add_assign(&cache.act.t_matmul(dy)?)?;
        for row in dy.row_iter() {
            for (g, v) in grads.b2.iter_mut().zip(row) {
                *g += v;
            }
        }
        let mut dpre = dy.matmul_t(&self.w2)?;
        for (g, &z) in dpre.data_mut().iter_mut().zip(cache.pre.data()) {
            *g *= silu_grad(z);
        }
        grads.w1.add_assign(&cache.normed.t_matmul(&dpre)?)?;
        for row in dpre.row_iter() {
            for (g, v) in grads.b1.iter_mut().zip(row) {
                *g += v;
            }
        }
        let dnormed = dpre.matmul_t(&self.w1)?;
        let (dx, dgain, dbias) = layer_norm_backward(&cache.ln, &self.ln_gain, &dnormed);
        add_vec(&mut grads.ln_gain, &dgain);
        add_vec(&mut grads.ln_bias, &dbias);
        Ok(dx)
    }
}

impl Parameters for FeedForward {
    fn slices(&self) -> Vec<&[f64]> {
        vec![&self.ln_gain, &self.ln_bias, self.w1.data(), &self.b1, self.w2.data(), &self.b2]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.ln_gain,
            &mut self.ln_bias,
            self.w1.data_mut(),
            &mut self.b1,
            self.w2.data_mut(),
            &mut self.b2,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct FfnCache {
    ln: LayerNormCache,
    normed: Matrix,
    pre: Matrix,
    act: Matrix,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn add_vec(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

fn add_attention_grads(acc: &mut AttentionParams, g: &AttentionParams) -> Result<()> {
    acc.w_q.add_assign(&g.w_q)?;
    acc.w_k.add_assign(&g.w_k)?;
    acc.w_v.add_assign(&g.w_v)?;
    acc.w_o.add_assign(&g.w_o)?;
    add_vec(&mut acc.ln_gain, &g.ln_gain);
    add_vec(&mut acc.ln_bias, &g.ln_bias);
    Ok(())
}

/// One layer of the perceiver stack.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceiverLayer {
    pub cross: AttentionParams,
    pub temporal: AttentionParams,
    pub ffn: FeedForward,
}

impl PerceiverLayer {
    pub fn init(dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        PerceiverLayer {
            cross: AttentionParams::init(dim, heads, 0.02, rng),
            temporal: AttentionParams::init(dim, heads, 0.02, rng),
            ffn: FeedForward::init(dim, 4 * dim, 0.02, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.cross.dim();
        PerceiverLayer {
            cross: AttentionParams::zeros(d, self.cross.heads),
            temporal: AttentionParams::zeros(d, self.temporal.heads),
            ffn: FeedForward::zeros(d, self.ffn.hidden()),
        }
    }
}

impl Parameters for PerceiverLayer {
    fn slices(&self) -> Vec<&[f64]> {
        let mut out = self.cross.slices();
        out.extend(self.temporal.slices());
        out.extend(self.ffn.slices());
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.cross.slices_mut();
        out.extend(self.temporal.slices_mut());
        out.extend(self.ffn.slices_mut());
        out
    }
}

/// The layer stack plus the placement of its temporal sublayer.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceiverParams {
    pub layers: Vec<PerceiverLayer>,
    /// In [`TemporalMode::Final`] only the last layer's temporal weights are
    /// used, once, after the stack.
    pub temporal: TemporalMode,
}

impl PerceiverParams {
    pub fn init(cfg: &RunConfig, rng: &mut impl Rng) -> Self {
        PerceiverParams {
            layers: (0..cfg.layers).map(|_| PerceiverLayer::init(cfg.dim, cfg.heads, rng)).collect(),
            temporal: cfg.temporal,
        }
    }

    pub fn dim(&self) -> usize {
        self.layers[0].cross.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::shape("PerceiverParams", "at least one layer is required"))?;
        let d = first.cross.dim();
        for layer in &self.layers {
            layer.cross.validate()?;
            layer.temporal.validate()?;
            if layer.cross.dim() != d || layer.temporal.dim() != d || layer.ffn.dim() != d {
                return Err(Error::shape("PerceiverParams", "all layers must share one dim"));
            }
        }
        Ok(())
    }

    fn temporal_in_layers(&self) -> bool {
        self.temporal == TemporalMode::PerLayer
    }
}

impl Parameters for PerceiverParams {
    fn slices(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.slices()).collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.slices_mut()).collect()
    }
}

/// Refined per-frame queries for one sub-clip.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceivedClip {
    pub subclip_index: usize,
    /// One `N_Q × d` matrix per frame.
    pub frames: Vec<Matrix>,
}

/// Key/value sets for a clip: each frame's tokens with the instruction appended.
pub fn extended_tokens(frames: &[Matrix], instruction: &InstructionEncoding) -> Result<Vec<Matrix>> {
    let d = instruction.dim();
    frames
        .iter()
        .map(|f| Matrix::vstack([f, instruction.tokens()], d))
        .collect()
}

fn gather_query(states: &[Matrix], q: usize) -> Matrix {
    let d = states[0].cols();
    let mut data = Vec::with_capacity(states.len() * d);
    for s in states {
        data.extend_from_slice(s.row(q));
    }
    Matrix::new(states.len(), d, data).expect("gathered shape")
}

fn scatter_add(states: &mut [Matrix], q: usize, delta: &Matrix) {
    for (j, s) in states.iter_mut().enumerate() {
        for (v, dv) in s.row_mut(q).iter_mut().zip(delta.row(j)) {
            *v += dv;
        }
    }
}

#[derive(Clone, Debug)]
struct CrossCache {
    ln: LayerNormCache,
    attn: AttentionCache,
}

#[derive(Clone, Debug)]
pub struct TemporalCache {
    per_query: Vec<(LayerNormCache, AttentionCache)>,
}

/// Forward intermediates for one layer.
#[derive(Clone, Debug)]
pub struct LayerCache {
    cross: Vec<CrossCache>,
    temporal: Option<TemporalCache>,
    ffn: Vec<FfnCache>,
}

fn temporal_forward(states: &mut [Matrix], params: &AttentionParams) -> Result<TemporalCache> {
    let n_q = states[0].rows();
    let mut per_query = Vec::with_capacity(n_q);
    // all query indices read the pre-sublayer states
    let snapshot: Vec<Matrix> = (0..n_q).map(|q| gather_query(states, q)).collect();
    for (q, seq) in snapshot.iter().enumerate() {
        let (normed, ln) = layer_norm_forward(seq, &params.ln_gain, &params.ln_bias, LAYER_NORM_EPS)?;
        let (attended, cache) = attention_forward(&normed, &normed, &normed, params)?;
        scatter_add(states, q, &attended);
        per_query.push((ln, cache));
    }
    Ok(TemporalCache { per_query })
}

fn temporal_backward(
    cache: &TemporalCache,
    params: &AttentionParams,
    d_states: &mut [Matrix],
    grads: &mut AttentionParams,
) -> Result<()> {
    let upstream: Vec<Matrix> = (0..cache.per_query.len()).map(|q| gather_query(d_states, q)).collect();
    for (q, ((ln, attn), d_out)) in cache.per_query.iter().zip(&upstream).enumerate() {
        let g = attention_backward(attn, params, d_out)?;
        add_attention_grads(grads, &g.params)?;
        let mut d_normed = g.dq;
        d_normed.add_assign(&g.dk)?;
        d_normed.add_assign(&g.dv)?;
        let (dx, dgain, dbias) = layer_norm_backward(ln, &params.ln_gain, &d_normed);
        add_vec(&mut grads.ln_gain, &dgain);
        add_vec(&mut grads.ln_bias, &dbias);
        scatter_add(d_states, q, &dx);
    }
    Ok(())
}

/// Runs one layer in place over the clip's per-frame states.
pub fn layer_forward(
    layer: &PerceiverLayer,
    states: &mut [Matrix],
    kv: &[Matrix],
    temporal: bool,
) -> Result<LayerCache> {
    if states.len() != kv.len() || states.is_empty() {
        return Err(Error::shape("layer_forward", "need one key set per frame and at least one frame"));
    }
    let mut cross = Vec::with_capacity(states.len());
    for (s, keys) in states.iter_mut().zip(kv) {
        let (normed, ln) = layer_norm_forward(s, &layer.cross.ln_gain, &layer.cross.ln_bias, LAYER_NORM_EPS)?;
        let (attended, attn) = attention_forward(&normed, keys, keys, &layer.cross)?;
        s.add_assign(&attended)?;
        cross.push(CrossCache { ln, attn });
    }
    let temporal = if temporal {
        Some(temporal_forward(states, &layer.temporal)?)
    } else {
        None
    };
    let mut ffn = Vec::with_capacity(states.len());
    for s in states.iter_mut() {
        let (delta, cache) = layer.ffn.forward_cached(s)?;
        s.add_assign(&delta)?;
        ffn.push(cache);
    }
    Ok(LayerCache { cross, temporal, ffn })
}

/// Gradients flowing out of one layer.
#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub d_states: Vec<Matrix>,
    pub d_kv: Vec<Matrix>,
    pub params: PerceiverLayer,
}

pub fn layer_backward(layer: &PerceiverLayer, cache: &LayerCache, d_out: &[Matrix]) -> Result<LayerGrads> {
    let mut grads = layer.zeros_like();
    let mut d_states: Vec<Matrix> = d_out.to_vec();
    for (ds, fc) in d_states.iter_mut().zip(&cache.ffn) {
        let dx = layer.ffn.backward(fc, ds, &mut grads.ffn)?;
        ds.add_assign(&dx)?;
    }
    if let Some(tc) = &cache.temporal {
        temporal_backward(tc, &layer.temporal, &mut d_states, &mut grads.temporal)?;
    }
    let mut d_kv = Vec::with_capacity(d_states.len());
    for (ds, cc) in d_states.iter_mut().zip(&cache.cross) {
        let g = attention_backward(&cc.attn, &layer.cross, ds)?;
        add_attention_grads(&mut grads.cross, &g.params)?;
        let (dx, dgain, dbias) = layer_norm_backward(&cc.ln, &layer.cross.ln_gain, &g.dq);
        add_vec(&mut grads.cross.ln_gain, &dgain);
        add_vec(&mut grads.cross.ln_bias, &dbias);
        ds.add_assign(&dx)?;
        let mut dkv = g.dk;
        dkv.add_assign(&g.dv)?;
        d_kv.push(dkv);
    }
    Ok(LayerGrads {
        d_states,
        d_kv,
        params: grads,
    })
}

/// Forward intermediates for the whole stack.
#[derive(Clone, Debug)]
pub struct StackCache {
    layers: Vec<LayerCache>,
    final_temporal: Option<TemporalCache>,
}

/// Runs the full stack from `context` broadcast to every frame.
pub fn stack_forward(
    params: &PerceiverParams,
    context: &Matrix,
    kv: &[Matrix],
) -> Result<(Vec<Matrix>, StackCache)> {
    let mut states = vec![context.clone(); kv.len()];
    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        layers.push(layer_forward(layer, &mut states, kv, params.temporal_in_layers())?);
    }
    let final_temporal = if params.temporal == TemporalMode::Final {
        let last = params.layers.last().expect("validated non-empty");
        Some(temporal_forward(&mut states, &last.temporal)?)
    } else {
        None
    };
    Ok((
        states,
        StackCache {
            layers,
            final_temporal,
        },
    ))
}

/// Gradients of the stack with respect to the shared context, the key sets
/// and every layer parameter.
#[derive(Clone, Debug)]
pub struct StackGrads {
    pub d_context: Matrix,
    pub d_kv: Vec<Matrix>,
    pub params: PerceiverParams,
}

pub fn stack_backward(params: &PerceiverParams, cache: &StackCache, d_out: &[Matrix]) -> Result<StackGrads> {
    let mut grads = PerceiverParams {
        layers: params.layers.iter().map(PerceiverLayer::zeros_like).collect(),
        temporal: params.temporal,
    };
    let mut d_states = d_out.to_vec();
    if let Some(tc) = &cache.final_temporal {
        let last = params.layers.len() - 1;
        temporal_backward(tc, &params.layers[last].temporal, &mut d_states, &mut grads.layers[last].temporal)?;
    }
    let mut d_kv: Option<Vec<Matrix>> = None;
    for (i, (layer, lc)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        let g = layer_backward(layer, lc, &d_states)?;
        d_states = g.d_states;
        match d_kv.as_mut() {
            None => d_kv = Some(g.d_kv),
            Some(acc) => {
                for (a, dk) in acc.iter_mut().zip(&g.d_kv) {
                    a.add_assign(dk)?;
                }
            }
        }
        // final-mode temporal grads already sit in the last slot
        let slot = &mut grads.layers[i];
        slot.cross = g.params.cross;
        slot.ffn = g.params.ffn;
        add_attention_grads(&mut slot.temporal, &g.params.temporal)?;
    }
    let mut d_context = Matrix::zeros(d_out[0].rows(), d_out[0].cols());
    for ds in &d_states {
        d_context.add_assign(ds)?;
    }
    Ok(StackGrads {
        d_context,
        d_kv: d_kv.unwrap_or_default(),
        params: grads,
    })
}

/// Perceives one sub-clip starting every frame from the shared read context.
pub fn perceive_subclip(
    clip: &SubClip<'_>,
    context: &Matrix,
    instruction: &InstructionEncoding,
    params: &PerceiverParams,
) -> Result<PerceivedClip> {
    let d = params.dim();
    if clip.is_empty() {
        return Err(Error::InvalidArgument("cannot perceive an empty sub-clip".into()));
    }
    if context.cols() != d || context.rows() == 0 {
        return Err(Error::shape("perceive_subclip", format!("context is {:?}, need N_Q x {d}", context.shape())));
    }
    if instruction.dim() != d {
        return Err(Error::shape("perceive_subclip", format!("instruction dim {} != {d}", instruction.dim())));
    }
    if let Some(f) = clip.frames.iter().find(|f| f.cols() != d) {
        return Err(Error::shape("perceive_subclip", format!("frame dim {} != {d}", f.cols())));
    }
    let kv = extended_tokens(clip.frames, instruction)?;
    let mut states = vec![context.clone(); kv.len()];
    for layer in &params.layers {
        layer_forward(layer, &mut states, &kv, params.temporal_in_layers())?;
    }
    if params.temporal == TemporalMode::Final {
        temporal_forward(&mut states, &params.layers[params.layers.len() - 1].temporal)?;
    }
    Ok(PerceivedClip {
        subclip_index: clip.index,
        frames: states,
    })
}

/// Every learnable tensor of a run, in checkpoint order: queries and their
/// attention blocks, the perceiver stack, then the separator row.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub queries: QueryBank,
    pub perceiver: PerceiverParams,
    pub separator: Vec<f64>,
}

impl ModelParams {
    /// Seeded initialization; identical `cfg` gives identical parameters.
    pub fn init(cfg: &RunConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let queries = QueryBank::init(cfg, &mut rng);
        let perceiver = PerceiverParams::init(cfg, &mut rng);
        let separator = (0..cfg.dim)
            .map(|_| f32_round(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)))
            .collect();
        ModelParams {
            queries,
            perceiver,
            separator,
        }
    }

    pub fn validate(&self, cfg: &RunConfig) -> Result<()> {
        self.queries.validate()?;
        self.perceiver.validate()?;
        let dims = (
            self.queries.dim(),
            self.queries.n_read(),
            self.queries.n_write(),
            self.perceiver.layers.len(),
            self.perceiver.dim(),
        );
        if dims != (cfg.dim, cfg.n_read, cfg.n_write, cfg.layers, cfg.dim) {
            return Err(Error::Config(format!("parameters {dims:?} do not match the run config")));
        }
        if self.separator.len() != cfg.dim {
            return Err(Error::Config("separator length differs from model.d".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(CHECKPOINT_MAGIC);
        w.count(self.queries.dim())?;
        w.count(self.queries.read_attention.heads)?;
        w.count(self.perceiver.layers.len())?;
        w.count(self.queries.n_read())?;
        w.count(self.queries.n_write())?;
        w.count(self.perceiver.layers[0].ffn.hidden())?;
        for s in self.slices() {
            w.f32s(s)?;
        }
        Ok(w.finish())
    }

    /// Loads weights; the temporal placement comes from `cfg`.
    pub fn from_bytes(bytes: &[u8], cfg: &RunConfig) -> Result<Self> {
        let mut r = Reader::open(bytes, CHECKPOINT_MAGIC)?;
        let header: Vec<usize> = (0..6).map(|_| r.count()).collect::<Result<_>>()?;
        let [d, heads, layers, n_read, n_write, hidden] = header[..] else {
            unreachable!()
        };
        if (d, heads, layers, n_read, n_write) != (cfg.dim, cfg.heads, cfg.layers, cfg.n_read, cfg.n_write)
            || hidden != 4 * d
        {
            return Err(Error::Config(format!(
                "checkpoint dims d={d} heads={heads} layers={layers} n_read={n_read} n_write={n_write} \
                 hidden={hidden} do not match the run config"
            )));
        }
        let mut model = ModelParams::init(cfg);
        let n = model.param_count();
        let flat = r.f32s(n)?;
        r.expect_end()?;
        model.load_flat(&flat);
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, cfg: &RunConfig) -> Result<Self> {
        ModelParams::from_bytes(&fs::read(path)?, cfg)
    }
}

impl Parameters for ModelParams {
    fn slices(&self) -> Vec<&[f64]> {
        let mut out = self.queries.slices();
        out.extend(self.perceiver.slices());
        out.push(&self.separator);
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.queries.slices_mut();
        out.extend(self.perceiver.slices_mut());
        out.push(&mut self.separator);
        out
    }
}

/// Observations made while running Stage 1.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Stage1Trace {
    /// Bank length seen by each read, one per sub-clip.
    pub reads: Vec<usize>,
    /// Bank plus resident buffer bytes after each sub-clip.
    pub resident_bytes: Vec<usize>,
}

/// Runs the read-perceive-write cycle over every sub-clip, storing raw frames
/// into `buffer` and compact entries into the returned bank.
pub fn process_stream_into(
    stream: &FrameTokenStream,
    instruction: &InstructionEncoding,
    model: &ModelParams,
    subclip_frames: usize,
    residual_read: bool,
    buffer: &mut FeatureBuffer,
) -> Result<(MemoryBank, Stage1Trace)> {
    if stream.dim() != model.queries.dim() {
        return Err(Error::shape(
            "process_stream",
            format!("stream dim {} != model dim {}", stream.dim(), model.queries.dim()),
        ));
    }
    let mut bank = MemoryBank::with_capacity(model.queries.n_write(), stream.dim(), stream.frame_count());
    let mut trace = Stage1Trace::default();
    for clip in stream.subclips(subclip_frames)? {
        trace.reads.push(bank.len());
        let context = read_context(&bank, &model.queries, residual_read)?;
        let perceived = perceive_subclip(&clip, &context, instruction, &model.perceiver)?;
        drop(context);
        for (offset, state) in perceived.frames.iter().enumerate() {
            let frame_index = frame_u32(clip.range.start + offset)?;
            buffer.store(frame_index, &clip.frames[offset])?;
            bank.append(write_frame(state, &model.queries, frame_index, clip.index as u32)?)?;
        }
        trace.resident_bytes.push(bank.byte_size() + buffer.resident_bytes());
    }
    Ok((bank, trace))
}

/// Stage 1 with an in-memory feature buffer.
pub fn process_stream(
    stream: &FrameTokenStream,
    instruction: &InstructionEncoding,
    model: &ModelParams,
    subclip_frames: usize,
    residual_read: bool,
) -> Result<(MemoryBank, FeatureBuffer, Stage1Trace)> {
    let mut buffer =
        FeatureBuffer::in_memory_with_capacity(stream.tokens_per_frame(), stream.dim(), stream.frame_count());
    let (bank, trace) = process_stream_into(stream, instruction, model, subclip_frames, residual_read, &mut buffer)?;
    Ok((bank, buffer, trace))
}

fn frame_u32(i: usize) -> Result<u32> {
    u32::try_from(i).map_err(|_| Error::InvalidArgument(format!("frame index {i} exceeds u32")))
}
