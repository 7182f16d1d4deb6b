use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::norm::{softmax_in_place, softmax_rows_backward};
use crate::tensor::{Matrix, Parameters};

/// Projection weights of one multi-head attention block.
///
/// `ln_gain`/`ln_bias` belong to the pre-norm that wraps the block when it is
/// used as a residual sublayer; [`attention`] itself does not apply them.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub heads: usize,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
}

impl AttentionParams {
    pub fn new(heads: usize, w_q: Matrix, w_k: Matrix, w_v: Matrix, w_o: Matrix) -> Result<Self> {
        let d = w_q.rows();
        let params = AttentionParams {
            heads,
            w_q,
            w_k,
            w_v,
            w_o,
            ln_gain: vec![1.0; d],
            ln_bias: vec![0.0; d],
        };
        params.validate()?;
        Ok(params)
    }

    /// Seeded normal projections (std `std`, values rounded to f32), unit norm gain.
    pub fn init(dim: usize, heads: usize, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be positive");
        let mut draw = || Matrix::from_fn(dim, dim, |_, _| f32_round(normal.sample(rng)));
        let (w_q, w_k, w_v, w_o) = (draw(), draw(), draw(), draw());
        AttentionParams {
            heads,
            w_q,
            w_k,
            w_v,
            w_o,
            ln_gain: vec![1.0; dim],
            ln_bias: vec![0.0; dim],
        }
    }

    pub fn zeros(dim: usize, heads: usize) -> Self {
        AttentionParams {
            heads,
            w_q: Matrix::zeros(dim, dim),
            w_k: Matrix::zeros(dim, dim),
            w_v: Matrix::zeros(dim, dim),
            w_o: Matrix::zeros(dim, dim),
            ln_gain: vec![0.0; dim],
            ln_bias: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.heads == 0 || d == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::shape(
                "AttentionParams",
                format!("dim {d} is not divisible by {} heads", self.heads),
            ));
        }
        for (name, w) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v), ("w_o", &self.w_o)] {
            if w.shape() != (d, d) {
                return Err(Error::shape("AttentionParams", format!("{name} is {:?}, want {d}x{d}", w.shape())));
            }
            w.ensure_finite("AttentionParams")?;
        }
        if self.ln_gain.len() != d || self.ln_bias.len() != d {
            return Err(Error::shape("AttentionParams", "layer-norm vectors must have length d"));
        }
        Ok(())
    }
}

impl Parameters for AttentionParams {
    fn slices(&self) -> Vec<&[f64]> {
        vec![
            self.w_q.data(),
            self.w_k.data(),
            self.w_v.data(),
            self.w_o.data(),
            &self.ln_gain,
            &self.ln_bias,
        ]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w_q.data_mut(),
            self.w_k.data_mut(),
            self.w_v.data_mut(),
            self.w_o.data_mut(),
            &mut self.ln_gain,
            &mut self.ln_bias,
        ]
    }
}

pub(crate) fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

/// Forward intermediates kept for the reverse pass.
#[derive(Clone, Debug)]
pub struct AttentionCache {
    q_in: Matrix,
    k_in: Matrix,
    v_in: Matrix,
    q_proj: Matrix,
    k_proj: Matrix,
    v_proj: Matrix,
    /// One `rows(q) × rows(k)` row-stochastic matrix per head.
    pub weights: Vec<Matrix>,
    concat: Matrix,
}

/// Multi-head scaled dot-product attention with output projection.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix, params: &AttentionParams) -> Result<Matrix> {
    attention_forward(q, k, v, params).map(|(out, _)| out)
}

pub fn attention_forward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    params: &AttentionParams,
) -> Result<(Matrix, AttentionCache)> {
    let d = params.dim();
    if q.cols() != d || k.cols() != d || v.cols() != d {
        return Err(Error::shape(
            "attention",
            format!("q/k/v columns {}/{}/{} must equal d={d}", q.cols(), k.cols(), v.cols()),
        ));
    }
    if k.rows() != v.rows() {
        return Err(Error::shape("attention", format!("k has {} rows, v has {}", k.rows(), v.rows())));
    }
    if k.rows() == 0 {
        return Err(Error::EmptyKeys);
    }
    let q_proj = q.matmul(&params.w_q)?;
    let k_proj = k.matmul(&params.w_k)?;
    let v_proj = v.matmul(&params.w_v)?;
    let dh = params.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat = Matrix::zeros(q.rows(), d);
    let mut weights = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let lo = h * dh;
        let mut scores = Matrix::zeros(q.rows(), k.rows());
        for i in 0..q.rows() {
            let qi = &q_proj.row(i)[lo..lo + dh];
            let srow = scores.row_mut(i);
            for (j, s) in srow.iter_mut().enumerate() {
                let kj = &k_proj.row(j)[lo..lo + dh];
                *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_in_place(srow);
        }
        for i in 0..q.rows() {
            let out = &mut concat.row_mut(i)[lo..lo + dh];
            for (j, &w) in scores.row(i).iter().enumerate() {
                let vj = &v_proj.row(j)[lo..lo + dh];
                for (o, &x) in out.iter_mut().zip(vj) {
                    *o += w * x;
                }
            }
        }
        weights.push(scores);
    }
    let out = concat.matmul(&params.w_o)?;
    let cache = AttentionCache {
        q_in: q.clone(),
        k_in: k.clone(),
        v_in: v.clone(),
        q_proj,
        k_proj,
        v_proj,
        weights,
        concat,
    };
    Ok((out, cache))
}

/// Input and parameter gradients of one attention call.
#[derive(Clone, Debug)]
pub struct AttentionGrads {
    pub dq: Matrix,
    pub dk: Matrix,
    pub dv: Matrix,
    /// Projection gradients; the layer-norm slots stay zero.
    pub params: AttentionParams,
}

pub fn attention_backward(
    cache: &AttentionCache,
    params: &AttentionParams,
    d_out: &Matrix,
) -> Result<AttentionGrads> {
    let d = params.dim();
    let dh = params.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut grads = AttentionParams::zeros(d, params.heads);
    grads.w_o = cache.concat.t_matmul(d_out)?;
    let d_concat = d_out.matmul_t(&params.w_o)?;

    let mut dq_proj = Matrix::zeros(cache.q_proj.rows(), d);
    let mut dk_proj = Matrix::zeros(cache.k_proj.rows(), d);
    let mut dv_proj = Matrix::zeros(cache.v_proj.rows(), d);
    for h in 0..params.heads {
        let lo = h * dh;
        let hi = lo + dh;
        let a = &cache.weights[h];
        let dc = d_concat.slice_cols(lo, hi);
        let vh = cache.v_proj.slice_cols(lo, hi);
        let kh = cache.k_proj.slice_cols(lo, hi);
        let qh = cache.q_proj.slice_cols(lo, hi);
        let da = dc.matmul_t(&vh)?;
        dv_proj.set_cols(lo, &a.t_matmul(&dc)?);
        let ds = softmax_rows_backward(a, &da).scale(scale);
        dq_proj.set_cols(lo, &ds.matmul(&kh)?);
        dk_proj.set_cols(lo, &ds.t_matmul(&qh)?);
    }
    grads.w_q = cache.q_in.t_matmul(&dq_proj)?;
    grads.w_k = cache.k_in.t_matmul(&dk_proj)?;
    grads.w_v = cache.v_in.t_matmul(&dv_proj)?;
    Ok(AttentionGrads {
        dq: dq_proj.matmul_t(&params.w_q)?,
        dk: dk_proj.matmul_t(&params.w_k)?,
        dv: dv_proj.matmul_t(&params.w_v)?,
        params: grads,
    })
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn params(d: usize, heads: usize, rng: &mut ChaCha8Rng) -> AttentionParams {
        AttentionParams::init(d, heads, 0.5, rng)
    }

    /// Nested-loop reference: no matrix helpers, explicit head slicing.
    fn loop_oracle(q: &Matrix, k: &Matrix, v: &Matrix, p: &AttentionParams) -> Matrix {
        let d = p.dim();
        let dh = d / p.heads;
        let proj = |x: &Matrix, w: &Matrix| {
            let mut out = vec![vec![0.0; d]; x.rows()];
            for i in 0..x.rows() {
                for j in 0..d {
                    for t in 0..d {
                        out[i][j] += x.get(i, t) * w.get(t, j);
                    }
                }
            }
            out
        };
        let (qp, kp, vp) = (proj(q, &p.w_q), proj(k, &p.w_k), proj(v, &p.w_v));
        let mut concat = vec![vec![0.0; d]; q.rows()];
        for h in 0..p.heads {
            for i in 0..q.rows() {
                let mut logits = vec![0.0; k.rows()];
                for j in 0..k.rows() {
                    for c in h * dh..(h + 1) * dh {
                        logits[j] += qp[i][c] * kp[j][c];
                    }
                    logits[j] /= (dh as f64).sqrt();
                }
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for j in 0..k.rows() {
                    let w = (logits[j] - m).exp() / z;
                    for c in h * dh..(h + 1) * dh {
                        concat[i][c] += w * vp[j][c];
                    }
                }
            }
        }
        let mut out = Matrix::zeros(q.rows(), d);
        for i in 0..q.rows() {
            for j in 0..d {
                let mut s = 0.0;
                for t in 0..d {
                    s += concat[i][t] * p.w_o.get(t, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = params(8, 2, &mut rng);
        let q = random(3, 8, &mut rng);
        let k = random(5, 8, &mut rng);
        let v = random(5, 8, &mut rng);
        let out = attention(&q, &k, &v, &p).unwrap();
        assert!(out.max_abs_diff(&loop_oracle(&q, &k, &v, &p)) < 1e-10);
    }

    #[test]
    fn single_key_returns_projected_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = params(8, 4, &mut rng);
        let q = random(3, 8, &mut rng);
        let k = random(1, 8, &mut rng);
        let v = random(1, 8, &mut rng);
        let out = attention(&q, &k, &v, &p).unwrap();
        let expect = v.matmul(&p.w_v).unwrap().matmul(&p.w_o).unwrap();
        for r in 0..3 {
            for c in 0..8 {
                assert!((out.get(r, c) - expect.get(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = params(8, 2, &mut rng);
        let q = random(2, 8, &mut rng);
        let key = random(1, 8, &mut rng);
        let k = Matrix::vstack([&key, &key, &key, &key], 8).unwrap();
        let v = random(4, 8, &mut rng);
        let out = attention(&q, &k, &v, &p).unwrap();
        let mean = Matrix::new(1, 8, v.row_mean()).unwrap();
        let expect = mean.matmul(&p.w_v).unwrap().matmul(&p.w_o).unwrap();
        for r in 0..2 {
            for c in 0..8 {
                assert!((out.get(r, c) - expect.get(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn head_weights_are_row_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = params(8, 4, &mut rng);
        let q = random(3, 8, &mut rng);
        let k = random(7, 8, &mut rng);
        let (_, cache) = attention_forward(&q, &k, &k, &p).unwrap();
        assert_eq!(cache.weights.len(), 4);
        for w in &cache.weights {
            for row in w.row_iter() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }
    }

    #[test]
    fn key_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = params(8, 2, &mut rng);
        let q = random(3, 8, &mut rng);
        let k = random(5, 8, &mut rng);
        let v = random(5, 8, &mut rng);
        let perm = [3, 0, 4, 1, 2];
        let kp = Matrix::from_fn(5, 8, |r, c| k.get(perm[r], c));
        let vp = Matrix::from_fn(5, 8, |r, c| v.get(perm[r], c));
        let a = attention(&q, &k, &v, &p).unwrap();
        let b = attention(&q, &kp, &vp, &p).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn empty_keys_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = params(4, 2, &mut rng);
        let q = random(2, 4, &mut rng);
        let k = Matrix::zeros(0, 4);
        assert!(matches!(attention(&q, &k, &k, &p), Err(Error::EmptyKeys)));
    }

    #[test]
    fn indivisible_heads_rejected() {
        let p = AttentionParams::new(
            3,
            Matrix::identity(4),
            Matrix::identity(4),
            Matrix::identity(4),
            Matrix::identity(4),
        );
        assert!(p.is_err());
    }
}
