//! Pre-norm transformer block: RMSNorm, attention, RMSNorm, SwiGLU.

use rand::Rng;

use crate::attention::{AttentionCache, KvCache, QkvLora, Segment};
use crate::linear::{Linear, RmsNorm};
use crate::{impl_module, AttnMask, Attention, Mat, Real};

#[derive(Clone, Debug)]
pub struct SwiGlu<S> {
    pub gate: Linear<S>,
    pub up: Linear<S>,
    pub down: Linear<S>,
}

impl_module!(SwiGlu, gate, up, down);

#[derive(Clone, Debug)]
pub struct SwiGluCache<S> {
    x: Mat<S>,
    a: Mat<S>,
    b: Mat<S>,
    h: Mat<S>,
}

fn sigmoid<S: Real>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

impl<S: Real> SwiGlu<S> {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, out_std: f64, rng: &mut R) -> Self {
        Self {
            gate: Linear::init(dim, hidden, false, rng),
            up: Linear::init(dim, hidden, false, rng),
            down: Linear::new(hidden, dim, false, out_std, rng),
        }
    }

    pub fn forward(&self, x: &Mat<S>) -> (Mat<S>, SwiGluCache<S>) {
        let a = self.gate.forward(x);
        let b = self.up.forward(x);
        let mut h = Mat::zeros(a.rows(), a.cols());
        for ((hv, av), bv) in h.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
            *hv = *av * sigmoid(*av) * *bv;
        }
        let y = self.down.forward(&h);
        (
            y,
            SwiGluCache {
                x: x.clone(),
                a,
                b,
                h,
            },
        )
    }

    pub fn backward(&mut self, c: &SwiGluCache<S>, dy: &Mat<S>) -> Mat<S> {
        let dh = self.down.backward(&c.h, dy, true).expect("dx");
        let mut da = Mat::zeros(dh.rows(), dh.cols());
        let mut db = Mat::zeros(dh.rows(), dh.cols());
        for i in 0..dh.len() {
            let a = c.a.data()[i];
            let b = c.b.data()[i];
            let g = dh.data()[i];
            let s = sigmoid(a);
            da.data_mut()[i] = g * b * s * (S::one() + a * (S::one() - s));
            db.data_mut()[i] = g * a * s;
        }
        let mut dx = self.gate.backward(&c.x, &da, true).expect("dx");
        dx.add_assign(&self.up.backward(&c.x, &db, true).expect("dx"));
        dx
    }
}

#[derive(Clone, Debug)]
pub struct TransformerBlock<S> {
    pub attn_norm: RmsNorm<S>,
    pub attn: Attention<S>,
    pub ffn_norm: RmsNorm<S>,
    pub ffn: SwiGlu<S>,
}

impl_module!(TransformerBlock, attn_norm, attn, ffn_norm, ffn);

#[derive(Clone, Debug)]
pub struct BlockCache<S> {
    x: Mat<S>,
    inv1: Vec<S>,
    attn: AttentionCache<S>,
    mid: Mat<S>,
    inv2: Vec<S>,
    ffn: SwiGluCache<S>,
}

impl<S: Real> TransformerBlock<S> {
    /// `depth` is the total number of residual blocks in the stack; output
    /// projections are scaled down by it.
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, hidden: usize, depth: usize, rng: &mut R) -> Self {
        let out_std = 1.0 / (dim as f64).sqrt() / ((2 * depth.max(1)) as f64).sqrt();
        Self {
            attn_norm: RmsNorm::new(dim),
            attn: Attention::new(dim, heads, out_std, rng),
            ffn_norm: RmsNorm::new(dim),
            ffn: SwiGlu::new(dim, hidden, out_std * (dim as f64 / hidden as f64).sqrt(), rng),
        }
    }

    pub fn forward(
        &self,
        x: &Mat<S>,
        segments: &[Segment],
        mask: AttnMask,
        lora: Option<&QkvLora<S>>,
    ) -> (Mat<S>, BlockCache<S>) {
        let (n1, inv1) = self.attn_norm.forward(x);
        let (a, attn) = self.attn.forward(&n1, segments, mask, lora);
        let mid = x.add(&a);
        let (n2, inv2) = self.ffn_norm.forward(&mid);
        let (f, ffn) = self.ffn.forward(&n2);
        let y = mid.add(&f);
        (
            y,
            BlockCache {
                x: x.clone(),
                inv1,
                attn,
                mid,
                inv2,
                ffn,
            },
        )
    }

    pub fn backward(
        &mut self,
        c: &BlockCache<S>,
        dy: &Mat<S>,
        segments: &[Segment],
        mask: AttnMask,
        lora: Option<&mut QkvLora<S>>,
    ) -> Mat<S> {
        let dn2 = self.ffn.backward(&c.ffn, dy);
        let mut dmid = self.ffn_norm.backward(&c.mid, &c.inv2, &dn2);
        dmid.add_assign(dy);
        let dn1 = self.attn.backward(&c.attn, &dmid, segments, mask, lora);
        let mut dx = self.attn_norm.backward(&c.x, &c.inv1, &dn1);
        dx.add_assign(&dmid);
        dx
    }

    pub fn forward_incremental(&self, x: &Mat<S>, kv: &mut KvCache<S>, lora: Option<&QkvLora<S>>) -> Mat<S> {
        let (n1, _) = self.attn_norm.forward(x);
        let a = self.attn.forward_incremental(&n1, kv, lora);
        let mid = x.add(&a);
        let (n2, _) = self.ffn_norm.forward(&mid);
        let (f, _) = self.ffn.forward(&n2);
        mid.add(&f)
    }
}
