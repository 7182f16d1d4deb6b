//! Independent brute-force references and finite-difference checks used by
//! the self-check suites and the test harnesses.

#![allow(clippy::needless_range_loop)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ZRepr;
use crate::dfs::DfsParams;
use crate::error::Result;
use crate::memory::{FeatureBuffer, MemoryBank};
use crate::perceiver::{layer_backward, layer_forward, FeedForward, PerceiverLayer};
use crate::stream::InstructionEncoding;
use crate::tensor::{
    attention_backward, attention_forward, dot, grad_check, layer_norm_backward, layer_norm_forward,
    AttentionParams, Matrix, Parameters, LAYER_NORM_EPS,
};

/// Finite-difference step used by every gradient check.
pub const FD_STEP: f64 = 1e-5;

fn project(x: &[f64], w: &Matrix) -> Vec<f64> {
    (0..w.cols())
        .map(|j| {
            let mut acc = 0.0;
            for (t, xv) in x.iter().enumerate() {
                acc += xv * w.get(t, j);
            }
            acc
        })
        .collect()
}

/// Multi-head attention written as explicit loops over rows, heads and keys.
pub fn loop_attention(q: &Matrix, k: &Matrix, v: &Matrix, p: &AttentionParams) -> Matrix {
    let d = p.dim();
    let dh = d / p.heads;
    let ks: Vec<Vec<f64>> = k.row_iter().map(|r| project(r, &p.w_k)).collect();
    let vs: Vec<Vec<f64>> = v.row_iter().map(|r| project(r, &p.w_v)).collect();
    let mut out = Matrix::zeros(q.rows(), d);
    for i in 0..q.rows() {
        let qi = project(q.row(i), &p.w_q);
        let mut concat = vec![0.0; d];
        for h in 0..p.heads {
            let cols = h * dh..(h + 1) * dh;
            let mut logits = Vec::with_capacity(ks.len());
            for kj in &ks {
                let mut s = 0.0;
                for c in cols.clone() {
                    s += qi[c] * kj[c];
                }
                logits.push(s / (dh as f64).sqrt());
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = weights.iter().sum();
            for (j, w) in weights.iter().enumerate() {
                for c in cols.clone() {
                    concat[c] += w / z * vs[j][c];
                }
            }
        }
        let o = project(&concat, &p.w_o);
        out.row_mut(i).copy_from_slice(&o);
    }
    out
}

/// Reference clustering result.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleClusters {
    pub density: Vec<f64>,
    pub distance: Vec<f64>,
    pub centers: Vec<u32>,
}

/// Density-peaks selection from a full distance matrix and a stable sort.
pub fn dpc_oracle(points: &[Vec<f64>], frames: &[u32], k: usize, centers: usize) -> OracleClusters {
    let n = points.len();
    if n == 1 {
        return OracleClusters {
            density: vec![1.0],
            distance: vec![0.0],
            centers: frames.to_vec(),
        };
    }
    let dim = points[0].len();
    let mut dist = vec![vec![0.0; n]; n];
    for l in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for c in 0..dim {
                let diff = points[j][c] - points[l][c];
                s += diff * diff;
            }
            dist[l][j] = s;
        }
    }
    let k = k.min(n - 1);
    let mut density = vec![0.0; n];
    for l in 0..n {
        let mut row: Vec<f64> = (0..n).filter(|&j| j != l).map(|j| dist[l][j]).collect();
        row.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        let mut s = 0.0;
        for v in &row[..k] {
            s += v;
        }
        density[l] = (-s / k as f64).exp();
    }
    let mut distance = vec![0.0; n];
    for l in 0..n {
        let denser: Vec<f64> = (0..n).filter(|&j| density[j] > density[l]).map(|j| dist[l][j]).collect();
        distance[l] = if denser.is_empty() {
            (0..n).filter(|&j| j != l).map(|j| dist[l][j]).fold(0.0, f64::max)
        } else {
            denser.into_iter().fold(f64::INFINITY, f64::min)
        };
    }
    // stable sort on frame index first, then on score
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| frames[i]);
    order.sort_by(|&a, &b| (density[b] * distance[b]).partial_cmp(&(density[a] * distance[a])).expect("finite"));
    OracleClusters {
        centers: order.into_iter().take(centers).map(|i| frames[i]).collect(),
        density,
        distance,
    }
}

/// A random clustering instance: candidate points, their frame indices,
/// `K` and `Kc`. Variants engineer duplicated points and equal densities.
pub struct DpcInstance {
    pub points: Vec<Vec<f64>>,
    pub frames: Vec<u32>,
    pub knn_k: usize,
    pub centers: usize,
}

pub fn random_dpc_instance(seed: u64) -> DpcInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=64usize);
    let dim = rng.random_range(1..=16usize);
    let points: Vec<Vec<f64>> = match seed % 4 {
        // continuous
        0 => (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
        // duplicated points
        1 => {
            let base: Vec<Vec<f64>> = (0..n.div_ceil(3))
                .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            (0..n).map(|_| base[rng.random_range(0..base.len())].clone()).collect()
        }
        // coarse lattice: many equal distances and densities
        2 => (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(0..3) as f64).collect())
            .collect(),
        // equally spaced points on a line
        _ => (0..n).map(|i| (0..dim).map(|c| if c == 0 { i as f64 * 0.25 } else { 0.0 }).collect()).collect(),
    };
    let mut frames: Vec<u32> = (0..n as u32 * 3).collect();
    frames.shuffle(&mut rng);
    frames.truncate(n);
    DpcInstance {
        points,
        frames,
        knn_k: rng.random_range(1..=8),
        centers: rng.random_range(1..=10),
    }
}

/// Reference Stage-2 selection written directly over bank entries.
pub fn monolithic_dfs(
    bank: &MemoryBank,
    buffer: &FeatureBuffer,
    instruction: &InstructionEncoding,
    params: DfsParams,
) -> Result<(Vec<u32>, Vec<Matrix>)> {
    let d = bank.dim();
    let mean = instruction.mean();
    let mut scored: Vec<(f64, u32, Vec<f64>)> = Vec::new();
    for e in bank.entries() {
        let mut best = f64::NEG_INFINITY;
        for r in 0..e.tokens.rows() {
            let mut s = 0.0;
            for c in 0..d {
                s += mean[c] * e.tokens.get(r, c);
            }
            best = best.max(s / (d as f64).sqrt());
        }
        let z = match params.repr {
            ZRepr::Mean => (0..d)
                .map(|c| {
                    let mut s = 0.0;
                    for r in 0..e.tokens.rows() {
                        s += e.tokens.get(r, c);
                    }
                    s / e.tokens.rows() as f64
                })
                .collect(),
            ZRepr::Concat => e.tokens.data().to_vec(),
        };
        scored.push((best, e.frame_index, z));
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite"));
    scored.truncate(params.top_l);
    let points: Vec<Vec<f64>> = scored.iter().map(|s| s.2.clone()).collect();
    let frames: Vec<u32> = scored.iter().map(|s| s.1).collect();
    let mut centers = dpc_oracle(&points, &frames, params.knn_k, params.centers).centers;
    centers.sort();
    let mut pooled = Vec::new();
    for &f in &centers {
        let raw = buffer.retrieve(f)?;
        let p = params.pool_tokens;
        let mut out = Matrix::zeros(p, d);
        let mut start = 0;
        for g in 0..p {
            let size = raw.rows() / p + usize::from(g < raw.rows() % p);
            for c in 0..d {
                let mut s = 0.0;
                for r in start..start + size {
                    s += raw.get(r, c);
                }
                out.set(g, c, s / size as f64);
            }
            start += size;
        }
        pooled.push(out);
    }
    Ok((centers, pooled))
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn perturb(p: &mut impl Parameters, std: f64, rng: &mut ChaCha8Rng) {
    let normal = Normal::new(0.0, std).expect("valid std");
    let mut flat = p.flatten();
    flat.iter_mut().for_each(|v| *v += normal.sample(rng));
    p.load_flat(&flat);
}

fn concat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

fn matrices_flat(ms: &[Matrix]) -> Vec<f64> {
    ms.iter().flat_map(|m| m.data().iter().copied()).collect()
}

fn unflatten(flat: &[f64], rows: usize, cols: usize) -> Vec<Matrix> {
    flat.chunks(rows * cols)
        .map(|c| Matrix::new(rows, cols, c.to_vec()).expect("chunk shape"))
        .collect()
}

/// Worst relative error of the attention reverse pass over parameters,
/// queries, keys and values for a seeded instance.
pub fn attention_grad_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, heads, nq, nk) = (8, 2, 3, 5);
    let mut p = AttentionParams::init(d, heads, 0.5, &mut rng);
    perturb(&mut p, 0.1, &mut rng);
    let q = random_matrix(nq, d, &mut rng);
    let k = random_matrix(nk, d, &mut rng);
    let v = random_matrix(nk, d, &mut rng);
    let cot = random_matrix(nq, d, &mut rng);
    let np = p.param_count();
    let (_, cache) = attention_forward(&q, &k, &v, &p)?;
    let g = attention_backward(&cache, &p, &cot)?;
    let theta = concat(&[&p.flatten(), q.data(), k.data(), v.data()]);
    let analytic = concat(&[&g.params.flatten(), g.dq.data(), g.dk.data(), g.dv.data()]);
    grad_check(
        |t| {
            let mut pp = p.clone();
            pp.load_flat(&t[..np]);
            let mut at = np;
            let mut take = |rows: usize| {
                let m = Matrix::new(rows, d, t[at..at + rows * d].to_vec()).expect("shape");
                at += rows * d;
                m
            };
            let (q, k, v) = (take(nq), take(nk), take(nk));
            let (out, _) = attention_forward(&q, &k, &v, &pp).expect("valid instance");
            dot(out.data(), cot.data())
        },
        &theta,
        &analytic,
        FD_STEP,
    )
}

pub fn layer_norm_grad_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, d) = (4, 8);
    let x = random_matrix(rows, d, &mut rng);
    let gain: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..1.5)).collect();
    let bias: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
    let cot = random_matrix(rows, d, &mut rng);
    let (_, cache) = layer_norm_forward(&x, &gain, &bias, LAYER_NORM_EPS)?;
    let (dx, dgain, dbias) = layer_norm_backward(&cache, &gain, &cot);
    let theta = concat(&[x.data(), &gain, &bias]);
    let analytic = concat(&[dx.data(), &dgain, &dbias]);
    let n = rows * d;
    grad_check(
        |t| {
            let x = Matrix::new(rows, d, t[..n].to_vec()).expect("shape");
            let (y, _) = layer_norm_forward(&x, &t[n..n + d], &t[n + d..], LAYER_NORM_EPS).expect("valid");
            dot(y.data(), cot.data())
        },
        &theta,
        &analytic,
        FD_STEP,
    )
}

pub fn ffn_grad_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, d) = (3, 8);
    let mut ffn = FeedForward::init(d, 4 * d, 0.5, &mut rng);
    perturb(&mut ffn, 0.1, &mut rng);
    let x = random_matrix(rows, d, &mut rng);
    let cot = random_matrix(rows, d, &mut rng);
    let (_, cache) = ffn.forward_cached(&x)?;
    let mut grads = FeedForward::zeros(d, 4 * d);
    let dx = ffn.backward(&cache, &cot, &mut grads)?;
    let np = ffn.param_count();
    let theta = concat(&[&ffn.flatten(), x.data()]);
    let analytic = concat(&[&grads.flatten(), dx.data()]);
    grad_check(
        |t| {
            let mut f = ffn.clone();
            f.load_flat(&t[..np]);
            let x = Matrix::new(rows, d, t[np..].to_vec()).expect("shape");
            dot(f.forward(&x).expect("valid").data(), cot.data())
        },
        &theta,
        &analytic,
        FD_STEP,
    )
}

/// Full perceiver layer (cross-attention, temporal attention, feed-forward)
/// over a three-frame clip, checked against parameters, states and keys.
pub fn perceiver_layer_grad_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, heads, nq, nk, frames) = (8, 2, 4, 5, 3);
    let mut layer = PerceiverLayer::init(d, heads, &mut rng);
    perturb(&mut layer, 0.3, &mut rng);
    let states: Vec<Matrix> = (0..frames).map(|_| random_matrix(nq, d, &mut rng)).collect();
    let kv: Vec<Matrix> = (0..frames).map(|_| random_matrix(nk, d, &mut rng)).collect();
    let cot: Vec<Matrix> = (0..frames).map(|_| random_matrix(nq, d, &mut rng)).collect();
    let mut fwd = states.clone();
    let cache = layer_forward(&layer, &mut fwd, &kv, true)?;
    let g = layer_backward(&layer, &cache, &cot)?;
    let np = layer.param_count();
    let ns = frames * nq * d;
    let theta = concat(&[&layer.flatten(), &matrices_flat(&states), &matrices_flat(&kv)]);
    let analytic = concat(&[&g.params.flatten(), &matrices_flat(&g.d_states), &matrices_flat(&g.d_kv)]);
    grad_check(
        |t| {
            let mut l = layer.clone();
            l.load_flat(&t[..np]);
            let mut s = unflatten(&t[np..np + ns], nq, d);
            let k = unflatten(&t[np + ns..], nk, d);
            layer_forward(&l, &mut s, &k, true).expect("valid");
            s.iter().zip(&cot).map(|(a, b)| dot(a.data(), b.data())).sum()
        },
        &theta,
        &analytic,
        FD_STEP,
    )
}
