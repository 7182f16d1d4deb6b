//! Dynamic frame selection over a completed memory bank.
//!
//! Frames are first ranked by their best scaled dot product with the mean
//! instruction vector; the top `L` become candidates. Candidates are then
//! ranked by density-peaks clustering (local density from the `K` nearest
//! neighbours times the squared distance to the nearest denser candidate) and
//! the top `Kc` centres have their buffered raw tokens pooled to `p` rows.
//!
//! All ties break toward the smaller frame index.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::ZRepr;
use crate::error::{Error, Result};
use crate::format::{checked_product, Reader, Writer};
use crate::memory::{FeatureBuffer, MemoryBank};
use crate::stream::InstructionEncoding;
use crate::tensor::{dot, f32_round, Matrix};

pub const SELECTION_MAGIC: &[u8; 4] = b"RWSL";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameScore {
    pub frame_index: u32,
    pub relevance: f64,
}

/// Top-`L` frames with one representation vector each, in ranking order.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub frame_indices: Vec<u32>,
    pub relevance: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    pub target: usize,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.frame_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_indices.is_empty()
    }
}

/// Per-candidate clustering quantities, aligned with the candidate order.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterDiagnostics {
    pub density: Vec<f64>,
    pub distance: Vec<f64>,
    pub weighted: Vec<f64>,
    /// Chosen centres in ranking order (highest weighted density first).
    pub centers: Vec<u32>,
}

/// One line of the selection report.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateRecord {
    pub frame_index: u32,
    pub relevance: Option<f64>,
    pub density: Option<f64>,
    pub distance: Option<f64>,
    pub weighted: Option<f64>,
    pub chosen: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult {
    /// Ascending frame order.
    pub centers: Vec<u32>,
    /// One `p × d` matrix per centre, aligned with `centers`.
    pub pooled: Vec<Matrix>,
    pub records: Vec<CandidateRecord>,
    pub diagnostics: Option<ClusterDiagnostics>,
}

/// Per frame, `max_w (Ī · m_{t,w}) / sqrt(d)`.
pub fn frame_relevance(bank: &MemoryBank, instruction_mean: &[f64]) -> Result<Vec<FrameScore>> {
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    let d = bank.dim();
    if instruction_mean.len() != d {
        return Err(Error::shape(
            "frame_relevance",
            format!("instruction mean has {} entries, bank dim is {d}", instruction_mean.len()),
        ));
    }
    let scale = 1.0 / (d as f64).sqrt();
    Ok(bank
        .entries()
        .iter()
        .map(|e| FrameScore {
            frame_index: e.frame_index,
            relevance: e
                .tokens
                .row_iter()
                .map(|t| dot(instruction_mean, t) * scale)
                .fold(f64::NEG_INFINITY, f64::max),
        })
        .collect())
}

fn by_score_then_frame(a: (f64, u32), b: (f64, u32)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Frame representation used for clustering.
pub fn frame_point(tokens: &Matrix, repr: ZRepr) -> Vec<f64> {
    match repr {
        ZRepr::Mean => tokens.row_mean(),
        ZRepr::Concat => tokens.data().to_vec(),
    }
}

/// The `min(L, |scores|)` most relevant frames.
pub fn select_top_l(bank: &MemoryBank, scores: &[FrameScore], top_l: usize, repr: ZRepr) -> Result<CandidateSet> {
    if top_l == 0 {
        return Err(Error::InvalidArgument("L must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        by_score_then_frame(
            (scores[a].relevance, scores[a].frame_index),
            (scores[b].relevance, scores[b].frame_index),
        )
    });
    order.truncate(top_l);
    let entries = bank.entries();
    let mut set = CandidateSet {
        frame_indices: Vec::with_capacity(order.len()),
        relevance: Vec::with_capacity(order.len()),
        points: Vec::with_capacity(order.len()),
        target: top_l,
    };
    for i in order {
        let s = scores[i];
        let pos = entries
            .binary_search_by_key(&s.frame_index, |e| e.frame_index)
            .map_err(|_| Error::MissingFrame(s.frame_index))?;
        set.frame_indices.push(s.frame_index);
        set.relevance.push(s.relevance);
        set.points.push(frame_point(&entries[pos].tokens, repr));
    }
    Ok(set)
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `σ_l = exp(−(1/K) Σ_{k ∈ KNN(l)} ‖z_k − z_l‖²)` over the other candidates,
/// with `K` clamped to `|Z| − 1`. Neighbour distances are summed in ascending
/// order.
pub fn local_density(points: &[Vec<f64>], k: usize) -> Result<Vec<f64>> {
    if points.len() < 2 {
        return Err(Error::InvalidArgument("local density needs at least two candidates".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    let k = k.min(points.len() - 1);
    let mut dists = Vec::with_capacity(points.len() - 1);
    Ok(points
        .iter()
        .enumerate()
        .map(|(l, zl)| {
            dists.clear();
            dists.extend(
                points
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != l)
                    .map(|(_, zj)| squared_distance(zj, zl)),
            );
            dists.sort_unstable_by(f64::total_cmp);
            let sum: f64 = dists[..k].iter().sum();
            (-sum / k as f64).exp()
        })
        .collect())
}

/// `ρ_l = min_{σ_j > σ_l} ‖z_j − z_l‖²`, or `max_j ‖z_j − z_l‖²` when no
/// candidate is strictly denser.
pub fn distance_index(points: &[Vec<f64>], density: &[f64]) -> Result<Vec<f64>> {
    if points.len() != density.len() {
        return Err(Error::shape("distance_index", "one density per candidate"));
    }
    Ok(points
        .iter()
        .enumerate()
        .map(|(l, zl)| {
            let mut nearest_denser = f64::INFINITY;
            let mut farthest = 0.0f64;
            for (j, zj) in points.iter().enumerate() {
                if j == l {
                    continue;
                }
                let dist = squared_distance(zj, zl);
                farthest = farthest.max(dist);
                if density[j] > density[l] {
                    nearest_denser = nearest_denser.min(dist);
                }
            }
            if nearest_denser.is_finite() {
                nearest_denser
            } else {
                farthest
            }
        })
        .collect())
}

/// Ranks candidates by `σ·ρ` and keeps the top `min(Kc, |Z|)`.
pub fn dpc_knn_select(candidates: &CandidateSet, k: usize, centers: usize) -> Result<ClusterDiagnostics> {
    if centers == 0 {
        return Err(Error::InvalidArgument("Kc must be >= 1".into()));
    }
    match candidates.len() {
        0 => return Err(Error::EmptyBank),
        1 => {
            return Ok(ClusterDiagnostics {
                density: vec![1.0],
                distance: vec![0.0],
                weighted: vec![0.0],
                centers: candidates.frame_indices.clone(),
            })
        }
        _ => {}
    }
    let density = local_density(&candidates.points, k)?;
    let distance = distance_index(&candidates.points, &density)?;
    let weighted: Vec<f64> = density.iter().zip(&distance).map(|(s, r)| s * r).collect();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        by_score_then_frame(
            (weighted[a], candidates.frame_indices[a]),
            (weighted[b], candidates.frame_indices[b]),
        )
    });
    let chosen = order
        .into_iter()
        .take(centers)
        .map(|i| candidates.frame_indices[i])
        .collect();
    Ok(ClusterDiagnostics {
        density,
        distance,
        weighted,
        centers: chosen,
    })
}

/// Contiguous-group mean pooling of token rows: `p` groups whose sizes differ
/// by at most one, larger groups first.
pub fn pool_tokens(raw: &Matrix, p: usize) -> Result<Matrix> {
    let total = raw.rows();
    if p == 0 || p > total {
        return Err(Error::InvalidArgument(format!(
            "cannot pool {total} tokens into {p} (need 1 <= p <= {total})"
        )));
    }
    let (base, extra) = (total / p, total % p);
    let mut out = Matrix::zeros(p, raw.cols());
    let mut start = 0;
    for g in 0..p {
        let size = base + usize::from(g < extra);
        let row = out.row_mut(g);
        for r in start..start + size {
            for (o, v) in row.iter_mut().zip(raw.row(r)) {
                *o += v;
            }
        }
        row.iter_mut().for_each(|v| *v /= size as f64);
        start += size;
    }
    Ok(out)
}

/// Parameters of one selection pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DfsParams {
    pub top_l: usize,
    pub knn_k: usize,
    pub centers: usize,
    pub pool_tokens: usize,
    pub repr: ZRepr,
}

pub fn dfs_select(
    bank: &MemoryBank,
    buffer: &FeatureBuffer,
    instruction: &InstructionEncoding,
    params: DfsParams,
) -> Result<SelectionResult> {
    let scores = frame_relevance(bank, instruction.mean())?;
    let candidates = select_top_l(bank, &scores, params.top_l, params.repr)?;
    let diagnostics = dpc_knn_select(&candidates, params.knn_k, params.centers)?;
    let mut centers = diagnostics.centers.clone();
    centers.sort_unstable();
    let pooled = pool_frames(buffer, &centers, params.pool_tokens)?;

    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by_key(|&i| candidates.frame_indices[i]);
    let records = order
        .into_iter()
        .map(|i| {
            let f = candidates.frame_indices[i];
            CandidateRecord {
                frame_index: f,
                relevance: Some(candidates.relevance[i]),
                density: Some(diagnostics.density[i]),
                distance: Some(diagnostics.distance[i]),
                weighted: Some(diagnostics.weighted[i]),
                chosen: centers.binary_search(&f).is_ok(),
            }
        })
        .collect();
    Ok(SelectionResult {
        centers,
        pooled,
        records,
        diagnostics: Some(diagnostics),
    })
}

pub(crate) fn pool_frames(buffer: &FeatureBuffer, frames: &[u32], p: usize) -> Result<Vec<Matrix>> {
    frames
        .iter()
        .map(|&f| pool_tokens(&buffer.retrieve(f)?, p))
        .collect()
}

impl SelectionResult {
    pub fn pool_tokens(&self) -> usize {
        self.pooled.first().map_or(0, Matrix::rows)
    }

    /// Copy with pooled values rounded to `f32`, i.e. what `to_bytes` stores.
    pub fn rounded_to_f32(&self) -> SelectionResult {
        let mut out = self.clone();
        for m in &mut out.pooled {
            m.data_mut().iter_mut().for_each(|v| *v = f32_round(*v));
        }
        out
    }

    /// `RWSL`: count, p, d, then per centre `u32 frame_index` and `p·d` f32.
    pub fn to_bytes(&self, dim: usize) -> Result<Vec<u8>> {
        let p = self.pool_tokens();
        let mut w = Writer::new(SELECTION_MAGIC);
        w.count(self.centers.len())?;
        w.count(p)?;
        w.count(dim)?;
        for (f, m) in self.centers.iter().zip(&self.pooled) {
            m.ensure_shape(p, dim, "SelectionResult::to_bytes")?;
            w.u32(*f);
            w.f32s(m.data())?;
        }
        Ok(w.finish())
    }

    /// Restores centres and pooled tokens; the report records are not stored.
    pub fn from_bytes(bytes: &[u8]) -> Result<SelectionResult> {
        let mut r = Reader::open(bytes, SELECTION_MAGIC)?;
        let (n, p, d) = (r.count()?, r.count()?, r.count()?);
        if d == 0 || (n > 0 && p == 0) {
            return Err(Error::Malformed(format!("selection dims p={p} d={d}")));
        }
        checked_product(&[n, p, d, 4])?;
        let mut centers = Vec::new();
        let mut pooled = Vec::new();
        for _ in 0..n {
            let f = r.u32()?;
            if centers.last().is_some_and(|&last| f <= last) {
                return Err(Error::Malformed("selection centres must be strictly ascending".into()));
            }
            centers.push(f);
            pooled.push(Matrix::new(p, d, r.f32s(p * d)?)?);
        }
        r.expect_end()?;
        Ok(SelectionResult {
            records: centers
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
            centers,
            pooled,
            diagnostics: None,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, dim: usize) -> Result<()> {
        fs::write(path, self.to_bytes(dim)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        SelectionResult::from_bytes(&fs::read(path)?)
    }

    /// Tab-separated report, one candidate per line in ascending frame order:
    /// `frame_index relevance sigma rho weighted chosen`; `-` marks values the
    /// selection mode does not compute.
    pub fn report(&self) -> String {
        let mut s = String::from("# frame_index\trelevance\tsigma\trho\tweighted\tchosen\n");
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_owned(), |x| format!("{x:e}"));
        for r in &self.records {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.frame_index,
                fmt(r.relevance),
                fmt(r.density),
                fmt(r.distance),
                fmt(r.weighted),
                u8::from(r.chosen)
            );
        }
        s
    }
}
