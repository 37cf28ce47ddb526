//! Multi-head self-attention over packed segments, with optional low-rank
//! adapters on the query/key/value projections and a key/value cache for
//! incremental decoding.
//!
//! Batch and incremental paths share [`attend_head`], so a row computed
//! either way goes through the same floating-point operations in the same
//! order.

use rand::Rng;

use crate::linear::{Linear, LoraAdapter};
use crate::mat::{axpy, dot};
use crate::{impl_module, Mat, Module, Param, Real};

/// A packed batch is a list of `(start_row, len)` segments; attention never
/// crosses a segment boundary.
pub type Segment = (usize, usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMask {
    Causal,
    Bidirectional,
}

/// Adapter set for one attention layer. Only query, key and value carry
/// adapters; the output projection never does.
#[derive(Clone, Debug)]
pub struct QkvLora<S> {
    pub q: LoraAdapter<S>,
    pub k: LoraAdapter<S>,
    pub v: LoraAdapter<S>,
}

impl_module!(QkvLora, q, k, v);

impl<S: Real> QkvLora<S> {
    pub fn new<R: Rng + ?Sized>(dim: usize, rank: usize, alpha: f64, rng: &mut R) -> Self {
        Self {
            q: LoraAdapter::new(dim, dim, rank, alpha, rng),
            k: LoraAdapter::new(dim, dim, rank, alpha, rng),
            v: LoraAdapter::new(dim, dim, rank, alpha, rng),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Attention<S> {
    pub wq: Linear<S>,
    pub wk: Linear<S>,
    pub wv: Linear<S>,
    pub wo: Linear<S>,
    heads: usize,
}

impl<S: Real> Module<S> for Attention<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param<S>)) {
        self.wq.visit(&crate::join_name(prefix, "wq"), f);
        self.wk.visit(&crate::join_name(prefix, "wk"), f);
        self.wv.visit(&crate::join_name(prefix, "wv"), f);
        self.wo.visit(&crate::join_name(prefix, "wo"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.wq.visit_mut(&crate::join_name(prefix, "wq"), f);
        self.wk.visit_mut(&crate::join_name(prefix, "wk"), f);
        self.wv.visit_mut(&crate::join_name(prefix, "wv"), f);
        self.wo.visit_mut(&crate::join_name(prefix, "wo"), f);
    }
}

#[derive(Clone, Debug)]
pub struct AttentionCache<S> {
    x: Mat<S>,
    q: Mat<S>,
    k: Mat<S>,
    v: Mat<S>,
    probs: Vec<S>,
    ctx: Mat<S>,
    lora_xa: Option<[Mat<S>; 3]>,
}

/// Growing key/value rows for one attention layer.
#[derive(Clone, Debug)]
pub struct KvCache<S> {
    pub k: Mat<S>,
    pub v: Mat<S>,
}

impl<S: Real> KvCache<S> {
    pub fn new(dim: usize) -> Self {
        Self {
            k: Mat::zeros(0, dim),
            v: Mat::zeros(0, dim),
        }
    }

    pub fn len(&self) -> usize {
        self.k.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.k.rows() == 0
    }
}

/// Softmax attention of one query head over `keys[range]`. Pushes the
/// probabilities onto `probs` and writes the context into `out`.
#[allow(clippy::too_many_arguments)]
#[inline]
pub fn attend_head<S: Real>(
    q: &[S],
    keys: &Mat<S>,
    values: &Mat<S>,
    range: std::ops::Range<usize>,
    off: usize,
    hd: usize,
    scale: S,
    probs: &mut Vec<S>,
    out: &mut [S],
) {
    let qh = &q[off..off + hd];
    let first = probs.len();
    let mut max = S::neg_infinity();
    for j in range.clone() {
        let s = dot(qh, &keys.row(j)[off..off + hd]) * scale;
        if s > max {
            max = s;
        }
        probs.push(s);
    }
    let mut sum = S::zero();
    for p in &mut probs[first..] {
        *p = (*p - max).exp();
        sum += *p;
    }
    let inv = S::one() / sum;
    let oh = &mut out[off..off + hd];
    oh.iter_mut().for_each(|x| *x = S::zero());
    for (idx, j) in range.enumerate() {
        let p = probs[first + idx] * inv;
        probs[first + idx] = p;
        axpy(p, &values.row(j)[off..off + hd], oh);
    }
}

impl<S: Real> Attention<S> {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, out_std: f64, rng: &mut R) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim must be divisible by heads");
        Self {
            wq: Linear::init(dim, dim, false, rng),
            wk: Linear::init(dim, dim, false, rng),
            wv: Linear::init(dim, dim, false, rng),
            wo: Linear::new(dim, dim, false, out_std, rng),
            heads,
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn dim(&self) -> usize {
        self.wq.in_dim()
    }

    fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    fn scale(&self) -> S {
        S::one() / S::of(self.head_dim() as f64).sqrt()
    }

    fn project(&self, x: &Mat<S>, lora: Option<&QkvLora<S>>) -> (Mat<S>, Mat<S>, Mat<S>, Option<[Mat<S>; 3]>) {
        let mut q = self.wq.forward(x);
        let mut k = self.wk.forward(x);
        let mut v = self.wv.forward(x);
        let xa = lora.map(|l| {
            let (dq, xq) = l.q.forward(x);
            let (dk, xk) = l.k.forward(x);
            let (dv, xv) = l.v.forward(x);
            q.add_assign(&dq);
            k.add_assign(&dk);
            v.add_assign(&dv);
            [xq, xk, xv]
        });
        (q, k, v, xa)
    }

    pub fn forward(
        &self,
        x: &Mat<S>,
        segments: &[Segment],
        mask: AttnMask,
        lora: Option<&QkvLora<S>>,
    ) -> (Mat<S>, AttentionCache<S>) {
        let (q, k, v, lora_xa) = self.project(x, lora);
        let hd = self.head_dim();
        let scale = self.scale();
        let mut ctx = Mat::zeros(x.rows(), x.cols());
        let mut probs = Vec::new();
        for &(start, len) in segments {
            for i in 0..len {
                let row = start + i;
                let end = match mask {
                    AttnMask::Causal => row + 1,
                    AttnMask::Bidirectional => start + len,
                };
                for h in 0..self.heads {
                    attend_head(q.row(row), &k, &v, start..end, h * hd, hd, scale, &mut probs, ctx.row_mut(row));
                }
            }
        }
        let y = self.wo.forward(&ctx);
        let cache = AttentionCache {
            x: x.clone(),
            q,
            k,
            v,
            probs,
            ctx,
            lora_xa,
        };
        (y, cache)
    }

    pub fn backward(
        &mut self,
        cache: &AttentionCache<S>,
        dy: &Mat<S>,
        segments: &[Segment],
        mask: AttnMask,
        lora: Option<&mut QkvLora<S>>,
    ) -> Mat<S> {
        let dctx = self.wo.backward(&cache.ctx, dy, true).expect("dx requested");
        let hd = self.head_dim();
        let scale = self.scale();
        let n = cache.x.rows();
        let d = cache.x.cols();
        let mut dq = Mat::zeros(n, d);
        let mut dk = Mat::zeros(n, d);
        let mut dv = Mat::zeros(n, d);
        let mut cursor = 0usize;
        let mut dp = Vec::new();
        for &(start, len) in segments {
            for i in 0..len {
                let row = start + i;
                let end = match mask {
                    AttnMask::Causal => row + 1,
                    AttnMask::Bidirectional => start + len,
                };
                let nk = end - start;
                for h in 0..self.heads {
                    let off = h * hd;
                    let p = &cache.probs[cursor..cursor + nk];
                    cursor += nk;
                    let dout = &dctx.row(row)[off..off + hd];
                    dp.clear();
                    let mut pdp = S::zero();
                    for (idx, j) in (start..end).enumerate() {
                        let g = dot(dout, &cache.v.row(j)[off..off + hd]);
                        pdp += p[idx] * g;
                        dp.push(g);
                    }
                    let qrow = &cache.q.row(row)[off..off + hd];
                    for (idx, j) in (start..end).enumerate() {
                        let ds = p[idx] * (dp[idx] - pdp) * scale;
                        axpy(ds, &cache.k.row(j)[off..off + hd], &mut dq.row_mut(row)[off..off + hd]);
                        axpy(ds, qrow, &mut dk.row_mut(j)[off..off + hd]);
                        axpy(p[idx], dout, &mut dv.row_mut(j)[off..off + hd]);
                    }
                }
            }
        }
        let mut dx = self.wq.backward(&cache.x, &dq, true).expect("dx");
        dx.add_assign(&self.wk.backward(&cache.x, &dk, true).expect("dx"));
        dx.add_assign(&self.wv.backward(&cache.x, &dv, true).expect("dx"));
        if let (Some(l), Some(xa)) = (lora, &cache.lora_xa) {
            dx.add_assign(&l.q.backward(&cache.x, &xa[0], &dq));
            dx.add_assign(&l.k.backward(&cache.x, &xa[1], &dk));
            dx.add_assign(&l.v.backward(&cache.x, &xa[2], &dv));
        }
        dx
    }

    /// Causal attention for rows appended after everything already in `kv`.
    pub fn forward_incremental(&self, x: &Mat<S>, kv: &mut KvCache<S>, lora: Option<&QkvLora<S>>) -> Mat<S> {
        let (q, k, v, _) = self.project(x, lora);
        let base = kv.len();
        kv.k.append_rows(&k);
        kv.v.append_rows(&v);
        let hd = self.head_dim();
        let scale = self.scale();
        let mut ctx = Mat::zeros(x.rows(), x.cols());
        let mut probs = Vec::new();
        for i in 0..x.rows() {
            for h in 0..self.heads {
                probs.clear();
                attend_head(q.row(i), &kv.k, &kv.v, 0..base + i + 1, h * hd, hd, scale, &mut probs, ctx.row_mut(i));
            }
        }
        self.wo.forward(&ctx)
    }
}
