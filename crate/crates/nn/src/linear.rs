//! Affine maps, low-rank adapters, embeddings and RMS normalisation.

use rand::Rng;

use crate::mat::gemm;
use crate::{impl_module, Mat, Param, Real};

/// `y = x W + b` with `W` stored as `in x out`.
#[derive(Clone, Debug)]
pub struct Linear<S> {
    pub weight: Param<S>,
    pub bias: Option<Param<S>>,
}

impl_module!(Linear, weight, bias);

impl<S: Real> Linear<S> {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, bias: bool, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Param::normal(input, output, std, rng),
            bias: bias.then(|| Param::zeros(1, output)),
        }
    }

    /// Fan-in scaled Gaussian init.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, bias: bool, rng: &mut R) -> Self {
        Self::new(input, output, bias, 1.0 / (input as f64).sqrt(), rng)
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn forward(&self, x: &Mat<S>) -> Mat<S> {
        let mut y = x.matmul(&self.weight.value);
        if let Some(b) = &self.bias {
            let bias = b.value.row(0);
            for r in 0..y.rows() {
                for (v, bv) in y.row_mut(r).iter_mut().zip(bias) {
                    *v += *bv;
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients that are enabled and returns `dL/dx`
    /// when `want_dx` is set.
    pub fn backward(&mut self, x: &Mat<S>, dy: &Mat<S>, want_dx: bool) -> Option<Mat<S>> {
        if self.weight.requires_grad {
            gemm(S::one(), x, true, dy, false, S::one(), &mut self.weight.grad);
        }
        if let Some(b) = &mut self.bias {
            if b.requires_grad {
                let g = b.grad.row_mut(0);
                for r in 0..dy.rows() {
                    for (gv, d) in g.iter_mut().zip(dy.row(r)) {
                        *gv += *d;
                    }
                }
            }
        }
        want_dx.then(|| {
            let mut dx = Mat::zeros(dy.rows(), self.in_dim());
            gemm(S::one(), dy, false, &self.weight.value, true, S::zero(), &mut dx);
            dx
        })
    }
}

/// Low-rank update `scale * (x A) B` added to a frozen projection.
#[derive(Clone, Debug)]
pub struct LoraAdapter<S> {
    /// `in x rank`, Gaussian init.
    pub a: Param<S>,
    /// `rank x out`, zero init so a fresh adapter is an exact identity.
    pub b: Param<S>,
    pub scale: f64,
}

impl_module!(LoraAdapter, a, b);

impl<S: Real> LoraAdapter<S> {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rank: usize, alpha: f64, rng: &mut R) -> Self {
        Self {
            a: Param::normal(input, rank, 1.0 / (input as f64).sqrt(), rng),
            b: Param::zeros(rank, output),
            scale: alpha / rank as f64,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.value.cols()
    }

    /// Returns `(delta, x A)`.
    pub fn forward(&self, x: &Mat<S>) -> (Mat<S>, Mat<S>) {
        let xa = x.matmul(&self.a.value);
        let mut delta = Mat::zeros(x.rows(), self.b.value.cols());
        gemm(S::of(self.scale), &xa, false, &self.b.value, false, S::zero(), &mut delta);
        (delta, xa)
    }

    pub fn backward(&mut self, x: &Mat<S>, xa: &Mat<S>, dy: &Mat<S>) -> Mat<S> {
        let s = S::of(self.scale);
        if self.b.requires_grad {
            gemm(s, xa, true, dy, false, S::one(), &mut self.b.grad);
        }
        let mut dxa = Mat::zeros(dy.rows(), self.rank());
        gemm(s, dy, false, &self.b.value, true, S::zero(), &mut dxa);
        if self.a.requires_grad {
            gemm(S::one(), x, true, &dxa, false, S::one(), &mut self.a.grad);
        }
        let mut dx = Mat::zeros(dy.rows(), self.a.value.rows());
        gemm(S::one(), &dxa, false, &self.a.value, true, S::zero(), &mut dx);
        dx
    }

    /// Folds the adapter into `base`: `W + scale * A B`.
    pub fn merge_into(&self, base: &Linear<S>) -> Linear<S> {
        let mut merged = base.clone();
        gemm(
            S::of(self.scale),
            &self.a.value,
            false,
            &self.b.value,
            false,
            S::one(),
            &mut merged.weight.value,
        );
        merged
    }
}

/// Lookup table of `vocab x dim` rows.
#[derive(Clone, Debug)]
pub struct Embedding<S> {
    pub table: Param<S>,
}

impl_module!(Embedding, table);

impl<S: Real> Embedding<S> {
    pub fn new<R: Rng + ?Sized>(vocab: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        Self {
            table: Param::normal(vocab, dim, std, rng),
        }
    }

    pub fn vocab(&self) -> usize {
        self.table.value.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.value.cols()
    }

    pub fn row(&self, id: usize) -> &[S] {
        self.table.value.row(id)
    }

    pub fn forward(&self, ids: &[usize]) -> Mat<S> {
        self.table.value.select_rows(ids)
    }

    pub fn backward(&mut self, ids: &[usize], dy: &Mat<S>) {
        if self.table.requires_grad {
            self.table.grad.scatter_add_rows(ids, dy);
        }
    }
}

/// Root-mean-square normalisation with a learned gain.
#[derive(Clone, Debug)]
pub struct RmsNorm<S> {
    pub gain: Param<S>,
}

impl_module!(RmsNorm, gain);

pub const RMS_EPS: f64 = 1e-5;

impl<S: Real> RmsNorm<S> {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Param::filled(1, dim, S::one()),
        }
    }

    pub fn forward_row(&self, x: &[S], out: &mut [S]) -> S {
        let d = S::of(x.len() as f64);
        let ms = x.iter().map(|v| *v * *v).sum::<S>() / d;
        let inv = S::one() / (ms + S::of(RMS_EPS)).sqrt();
        for ((o, v), g) in out.iter_mut().zip(x).zip(self.gain.value.row(0)) {
            *o = *v * inv * *g;
        }
        inv
    }

    /// Returns the output and each row's inverse RMS.
    pub fn forward(&self, x: &Mat<S>) -> (Mat<S>, Vec<S>) {
        let mut y = Mat::zeros(x.rows(), x.cols());
        let mut inv = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            inv.push(self.forward_row(x.row(r), y.row_mut(r)));
        }
        (y, inv)
    }

    pub fn backward(&mut self, x: &Mat<S>, inv: &[S], dy: &Mat<S>) -> Mat<S> {
        let d = x.cols();
        let dn = S::of(d as f64);
        let mut dx = Mat::zeros(x.rows(), d);
        let want_gain = self.gain.requires_grad;
        for r in 0..x.rows() {
            let xr = x.row(r);
            let dyr = dy.row(r);
            let ir = inv[r];
            let g = self.gain.value.row(0);
            let mut proj = S::zero();
            for i in 0..d {
                proj += g[i] * dyr[i] * xr[i];
            }
            let coef = ir * ir * ir * proj / dn;
            let dxr = dx.row_mut(r);
            for i in 0..d {
                dxr[i] = ir * g[i] * dyr[i] - coef * xr[i];
            }
            if want_gain {
                let gg = self.gain.grad.row_mut(0);
                for i in 0..d {
                    gg[i] += dyr[i] * xr[i] * ir;
                }
            }
        }
        dx
    }
}
