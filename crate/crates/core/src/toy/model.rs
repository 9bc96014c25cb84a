//! One-layer, single-head joint self-attention encoder with an
//! image-text matching head, and its hand-written backward pass.
//!
//! ```text
//! X = [lang embeddings + positional code ; visual tokens]     (N x d)
//! S = (X Wq)(X Wk)ᵀ          raw scores, no 1/sqrt(d) scaling
//! H = softmax_rows(S) (X Wv)
//! logit = w · mean_rows(H) + b
//! ```
//!
//! Visual tokens carry no positional code, so permuting them permutes the
//! visual rows and columns of `S` and leaves the logit unchanged.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{matmul, row_softmax, row_softmax_backward, AttentionBundle, Matrix};
use crate::error::{dim_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub width: usize,
    /// `vocab x width`
    pub token_embeddings: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub itm_weights: Vec<f64>,
    pub itm_bias: f64,
}

impl EncoderParams {
    pub fn zeros(vocab: usize, width: usize) -> Self {
        Self {
            width,
            token_embeddings: Matrix::zeros(vocab, width),
            w_q: Matrix::zeros(width, width),
            w_k: Matrix::zeros(width, width),
            w_v: Matrix::zeros(width, width),
            itm_weights: vec![0.0; width],
            itm_bias: 0.0,
        }
    }

    /// Gaussian initialization: embeddings with std `0.5`, projections with
    /// std `1/sqrt(width)`, zero head.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, vocab: usize, width: usize) -> Self {
        let emb = Normal::new(0.0, 0.5).expect("valid std");
        let proj = Normal::new(0.0, 1.0 / (width as f64).sqrt()).expect("valid std");
        let mut draw = |rows, cols, dist: &Normal<f64>| {
            Matrix::from_fn(rows, cols, |_, _| dist.sample(&mut *rng))
        };
        Self {
            width,
            token_embeddings: draw(vocab, width, &emb),
            w_q: draw(width, width, &proj),
            w_k: draw(width, width, &proj),
            w_v: draw(width, width, &proj),
            itm_weights: vec![0.0; width],
            itm_bias: 0.0,
        }
    }

    pub fn vocab(&self) -> usize {
        self.token_embeddings.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.width;
        let checks = [
            ("token_embeddings", self.token_embeddings.cols(), d),
            ("w_q rows", self.w_q.rows(), d),
            ("w_q cols", self.w_q.cols(), d),
            ("w_k rows", self.w_k.rows(), d),
            ("w_k cols", self.w_k.cols(), d),
            ("w_v rows", self.w_v.rows(), d),
            ("w_v cols", self.w_v.cols(), d),
            ("itm_weights", self.itm_weights.len(), d),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(dim_err(format!("{name} is {got}, expected width {want}")));
            }
        }
        if !self.itm_bias.is_finite() || self.itm_weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("matching head has non-finite entries".into()));
        }
        Ok(())
    }

    /// Flat views of every trainable tensor, in a fixed order.
    pub(crate) fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.token_embeddings.data_mut(),
            self.w_q.data_mut(),
            self.w_k.data_mut(),
            self.w_v.data_mut(),
            &mut self.itm_weights,
            std::slice::from_mut(&mut self.itm_bias),
        ]
    }

    pub(crate) fn tensors(&self) -> [&[f64]; 6] {
        [
            self.token_embeddings.data(),
            self.w_q.data(),
            self.w_k.data(),
            self.w_v.data(),
            &self.itm_weights,
            std::slice::from_ref(&self.itm_bias),
        ]
    }

    pub(crate) fn add_scaled(&mut self, other: &EncoderParams, k: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += k * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Fixed sinusoidal code added to the language token at `pos`.
pub fn positional_code(pos: usize, width: usize) -> Vec<f64> {
    (0..width)
        .map(|i| {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / width as f64);
            let angle = pos as f64 * freq;
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub attention: Matrix,
    pub pooled: Vec<f64>,
    lang_tokens: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub bundle: AttentionBundle,
    pub match_logit: f64,
    pub cache: ForwardCache,
}

fn embed(params: &EncoderParams, lang: &[usize], vis: &[Vec<f64>]) -> Result<Matrix> {
    let d = params.width;
    if lang.is_empty() || vis.is_empty() {
        return Err(dim_err("caption and image must both be non-empty"));
    }
    if let Some(&t) = lang.iter().find(|&&t| t >= params.vocab()) {
        return Err(dim_err(format!(
            "token id {t} outside vocabulary of {}",
            params.vocab()
        )));
    }
    if let Some(v) = vis.iter().find(|v| v.len() != d) {
        return Err(dim_err(format!(
            "visual token has width {}, model width is {d}",
            v.len()
        )));
    }
    let n_lang = lang.len();
    let mut x = Matrix::zeros(n_lang + vis.len(), d);
    for (i, &tok) in lang.iter().enumerate() {
        let pe = positional_code(i, d);
        for (c, slot) in x.row_mut(i).iter_mut().enumerate() {
            *slot = params.token_embeddings.get(tok, c) + pe[c];
        }
    }
    for (j, feat) in vis.iter().enumerate() {
        x.row_mut(n_lang + j).copy_from_slice(feat);
    }
    Ok(x)
}

/// Runs the encoder on one caption/image pair.
pub fn forward(params: &EncoderParams, lang: &[usize], vis: &[Vec<f64>]) -> Result<ForwardOutput> {
    let x = embed(params, lang, vis)?;
    let q = matmul(&x, &params.w_q)?;
    let k = matmul(&x, &params.w_k)?;
    let v = matmul(&x, &params.w_v)?;
    let scores = matmul(&q, &k.transpose())?;
    let attention = row_softmax(&scores)?;
    let h = matmul(&attention, &v)?;
    let n = h.rows() as f64;
    let pooled: Vec<f64> = (0..h.cols())
        .map(|c| (0..h.rows()).map(|r| h.get(r, c)).sum::<f64>() / n)
        .collect();
    let match_logit = pooled
        .iter()
        .zip(&params.itm_weights)
        .map(|(a, b)| a * b)
        .sum::<f64>()
        + params.itm_bias;
    let bundle = AttentionBundle::new(lang.len(), vis.len(), scores)?;
    Ok(ForwardOutput {
        bundle,
        match_logit,
        cache: ForwardCache {
            input: x,
            q,
            k,
            v,
            attention,
            pooled,
            lang_tokens: lang.to_vec(),
        },
    })
}

/// Parameter gradient given `d loss / d logit` and an optional extra
/// gradient on the raw score matrix (the regularizer's contribution).
pub fn backward(
    params: &EncoderParams,
    cache: &ForwardCache,
    d_logit: f64,
    d_scores_extra: Option<&Matrix>,
) -> Result<EncoderParams> {
    let d = params.width;
    let n = cache.input.rows();
    let mut grads = EncoderParams::zeros(params.vocab(), d);

    grads.itm_bias = d_logit;
    grads.itm_weights = cache.pooled.iter().map(|p| d_logit * p).collect();

    // H = A V, every row of H feeds the mean pool equally
    let d_h_row: Vec<f64> = params.itm_weights.iter().map(|w| d_logit * w / n as f64).collect();
    let d_h = Matrix::from_fn(n, d, |_, c| d_h_row[c]);
    let d_attention = matmul(&d_h, &cache.v.transpose())?;
    let d_v = matmul(&cache.attention.transpose(), &d_h)?;

    let mut d_scores = row_softmax_backward(&cache.attention, &d_attention);
    if let Some(extra) = d_scores_extra {
        if extra.shape() != d_scores.shape() {
            return Err(dim_err(format!(
                "score gradient is {:?}, expected {:?}",
                extra.shape(),
                d_scores.shape()
            )));
        }
        d_scores.add_assign(extra);
    }

    // S = Q Kᵀ
    let d_q = matmul(&d_scores, &cache.k)?;
    let d_k = matmul(&d_scores.transpose(), &cache.q)?;

    let x_t = cache.input.transpose();
    grads.w_q = matmul(&x_t, &d_q)?;
    grads.w_k = matmul(&x_t, &d_k)?;
    grads.w_v = matmul(&x_t, &d_v)?;

    let d_x = matmul(&d_q, &params.w_q.transpose())?
        .add(&matmul(&d_k, &params.w_k.transpose())?)?
        .add(&matmul(&d_v, &params.w_v.transpose())?)?;
    for (i, &tok) in cache.lang_tokens.iter().enumerate() {
        for c in 0..d {
            grads.token_embeddings.add_at(tok, c, d_x.get(i, c));
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::case_rng;

    fn toy_inputs(seed: u64) -> (EncoderParams, Vec<usize>, Vec<Vec<f64>>) {
        let mut rng = case_rng(seed, 0);
        let params = {
            let mut p = EncoderParams::init(&mut rng, 6, 4);
            for w in p.itm_weights.iter_mut() {
                *w = rng.gen_range(-1.0..1.0);
            }
            p.itm_bias = 0.3;
            p
        };
        let lang = vec![2, 0, 5];
        let vis = (0..3)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        (params, lang, vis)
    }

    #[test]
    fn zero_params_give_uniform_attention_and_bias_logit() {
        let mut p = EncoderParams::zeros(5, 4);
        p.itm_bias = -0.7;
        let out = forward(&p, &[0, 1], &[vec![1.0; 4], vec![0.5; 4], vec![-1.0; 4]]).unwrap();
        assert!(out.bundle.scores().data().iter().all(|&s| s == 0.0));
        assert!(out.cache.attention.data().iter().all(|&a| (a - 0.2).abs() < 1e-15));
        assert_eq!(out.match_logit, -0.7);
    }

    #[test]
    fn permuting_visual_tokens_permutes_scores_and_keeps_logit() {
        let (p, lang, vis) = toy_inputs(1);
        let perm = [2, 0, 1];
        let permuted: Vec<_> = perm.iter().map(|&i| vis[i].clone()).collect();
        let a = forward(&p, &lang, &vis).unwrap();
        let b = forward(&p, &lang, &permuted).unwrap();
        let (pa, pb) = (a.bundle.partition(), b.bundle.partition());
        for i in 0..3 {
            for j in 0..3 {
                assert!((pb.s_vv.get(i, j) - pa.s_vv.get(perm[i], perm[j])).abs() < 1e-12);
            }
        }
        assert!((a.match_logit - b.match_logit).abs() < 1e-12);
    }

    // Straight-line recomputation of S for one fixed pair.
    #[test]
    fn scores_match_reference_computation() {
        let (p, lang, vis) = toy_inputs(2);
        let out = forward(&p, &lang, &vis).unwrap();
        let d = 4;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (i, &t) in lang.iter().enumerate() {
            let pe = positional_code(i, d);
            rows.push((0..d).map(|c| p.token_embeddings.get(t, c) + pe[c]).collect());
        }
        rows.extend(vis.iter().cloned());
        let project = |x: &[f64], w: &Matrix| -> Vec<f64> {
            (0..d).map(|c| (0..d).map(|r| x[r] * w.get(r, c)).sum()).collect()
        };
        for i in 0..rows.len() {
            for j in 0..rows.len() {
                let qi = project(&rows[i], &p.w_q);
                let kj = project(&rows[j], &p.w_k);
                let s: f64 = qi.iter().zip(&kj).map(|(a, b)| a * b).sum();
                assert!((out.bundle.scores().get(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn positional_code_is_sinusoidal() {
        assert_eq!(positional_code(0, 4), vec![0.0, 1.0, 0.0, 1.0]);
        let pe = positional_code(3, 4);
        assert!((pe[0] - 3f64.sin()).abs() < 1e-15);
        assert!((pe[3] - (3.0 / 100.0f64).cos()).abs() < 1e-15);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let p = EncoderParams::zeros(3, 4);
        assert!(forward(&p, &[3], &[vec![0.0; 4]]).is_err());
        assert!(forward(&p, &[0], &[vec![0.0; 5]]).is_err());
        assert!(forward(&p, &[], &[vec![0.0; 4]]).is_err());
    }

    // Loss used below: logit + sum(G ∘ S) for a fixed matrix G, which
    // exercises both the head path and the extra score gradient.
    #[test]
    fn backward_matches_finite_differences() {
        let (p, lang, vis) = toy_inputs(3);
        let n = lang.len() + vis.len();
        let g = Matrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.1 - 0.2);
        let loss = |q: &EncoderParams| -> f64 {
            let out = forward(q, &lang, &vis).unwrap();
            let s = out.bundle.scores();
            out.match_logit
                + s.data().iter().zip(g.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let out = forward(&p, &lang, &vis).unwrap();
        let grads = backward(&p, &out.cache, 1.0, Some(&g)).unwrap();
        let h = 1e-6;
        let mut work = p.clone();
        for t in 0..6 {
            let len = work.tensors()[t].len();
            for idx in 0..len {
                let orig = work.tensors()[t][idx];
                work.tensors_mut()[t][idx] = orig + h;
                let plus = loss(&work);
                work.tensors_mut()[t][idx] = orig - h;
                let minus = loss(&work);
                work.tensors_mut()[t][idx] = orig;
                let fd = (plus - minus) / (2.0 * h);
                let an = grads.tensors()[t][idx];
                assert!(
                    (an - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "tensor {t} index {idx}: analytic {an} vs fd {fd}"
                );
            }
        }
    }
}
