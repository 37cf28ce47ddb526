//! Residual-bottleneck connector: turns encoder output into embeddings the
//! backbone can consume in place of its semantic-token embeddings.
//!
//! Main branch: `softmax(logits) @ table`, a soft lookup into the backbone's
//! semantic embedding table (or a connector-owned table). Residual branch:
//! `up(down(states))` through `residual_dim` units, carrying what the softmax
//! discards. `residual_dim = 0` removes the branch.

use rand::Rng;
use streamconv_nn::loss::softmax_rows;
use streamconv_nn::{gemm, impl_module, Linear, Mat, Param, Real};

use crate::error::{arg, Result};

#[derive(Clone, Debug)]
pub struct Connector<S> {
    /// Present only when not reusing the backbone's table.
    pub table: Option<Param<S>>,
    pub down: Option<Linear<S>>,
    pub up: Option<Linear<S>>,
}

impl_module!(Connector, table, down, up);

#[derive(Clone, Debug)]
pub struct ConnectorOutput<S> {
    pub embeddings: Mat<S>,
}

pub struct ConnectorCache<S> {
    probs: Mat<S>,
    states: Mat<S>,
    bottleneck: Option<Mat<S>>,
}

impl<S: Real> Connector<S> {
    /// The down-projection is fan-in scaled Gaussian; the up-projection starts
    /// at zero, so a fresh residual branch leaves the soft lookup untouched
    /// and fine-tuning only admits what it finds useful.
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        unit_dim: usize,
        vocab: usize,
        residual_dim: usize,
        own_table: bool,
        rng: &mut R,
    ) -> Self {
        let (down, up) = if residual_dim == 0 {
            (None, None)
        } else {
            (
                Some(Linear::new(state_dim, residual_dim, false, 1.0 / (state_dim as f64).sqrt(), rng)),
                Some(Linear::new(residual_dim, unit_dim, false, 0.0, rng)),
            )
        };
        Self {
            table: own_table.then(|| Param::normal(vocab, unit_dim, 1.0, rng)),
            down,
            up,
        }
    }

    pub fn residual_dim(&self) -> usize {
        self.down.as_ref().map_or(0, |d| d.out_dim())
    }

    fn table<'a>(&'a self, backbone_table: &'a Mat<S>) -> &'a Mat<S> {
        self.table.as_ref().map_or(backbone_table, |t| &t.value)
    }

    pub fn main_branch(&self, logits: &Mat<S>, backbone_table: &Mat<S>) -> (Mat<S>, Mat<S>) {
        let probs = softmax_rows(logits);
        let out = probs.matmul(self.table(backbone_table));
        (out, probs)
    }

    pub fn residual_branch(&self, states: &Mat<S>) -> Option<(Mat<S>, Mat<S>)> {
        let (down, up) = (self.down.as_ref()?, self.up.as_ref()?);
        let b = down.forward(states);
        let r = up.forward(&b);
        Some((r, b))
    }

    pub fn connect(&self, states: &Mat<S>, logits: &Mat<S>, backbone_table: &Mat<S>) -> Result<(ConnectorOutput<S>, ConnectorCache<S>)> {
        let table = self.table(backbone_table);
        if logits.cols() != table.rows() {
            return arg(format!(
                "connector logits have width {}, table has {} rows",
                logits.cols(),
                table.rows()
            ));
        }
        if states.rows() != logits.rows() {
            return arg("connector states and logits disagree on row count");
        }
        if let Some(d) = &self.down {
            if d.in_dim() != states.cols() {
                return arg(format!("connector expects {}-wide states, got {}", d.in_dim(), states.cols()));
            }
        }
        let (mut out, probs) = self.main_branch(logits, backbone_table);
        let bottleneck = self.residual_branch(states).map(|(r, b)| {
            out.add_assign(&r);
            b
        });
        Ok((
            ConnectorOutput { embeddings: out },
            ConnectorCache {
                probs,
                states: states.clone(),
                bottleneck,
            },
        ))
    }

    /// Returns `(d states, d logits)`. Table gradients go to the connector's
    /// own table, or to `backbone_table` when it is reused and trainable.
    pub fn backward(&mut self, cache: &ConnectorCache<S>, ds: &Mat<S>, backbone_table: &mut Param<S>) -> (Mat<S>, Mat<S>) {
        let table = self.table.as_mut().unwrap_or(backbone_table);
        let mut dp = Mat::zeros(ds.rows(), table.value.rows());
        gemm(S::one(), ds, false, &table.value, true, S::zero(), &mut dp);
        if table.requires_grad {
            gemm(S::one(), &cache.probs, true, ds, false, S::one(), &mut table.grad);
        }
        let mut dlogits = Mat::zeros(dp.rows(), dp.cols());
        for r in 0..dp.rows() {
            let p = cache.probs.row(r);
            let g = dp.row(r);
            let inner: S = p.iter().zip(g).map(|(a, b)| *a * *b).sum();
            for ((o, pi), gi) in dlogits.row_mut(r).iter_mut().zip(p).zip(g) {
                *o = *pi * (*gi - inner);
            }
        }
        let mut dstates = Mat::zeros(cache.states.rows(), cache.states.cols());
        if let (Some(down), Some(up), Some(b)) = (self.down.as_mut(), self.up.as_mut(), &cache.bottleneck) {
            let db = up.backward(b, ds, true).expect("dx");
            dstates = down.backward(&cache.states, &db, true).expect("dx");
        }
        (dstates, dlogits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(residual: usize) -> (Connector<f64>, Mat<f64>, Mat<f64>, Mat<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = Connector::new(6, 4, 5, residual, false, &mut rng);
        let table = Param::<f64>::normal(5, 4, 1.0, &mut rng).value;
        let states = Param::<f64>::normal(3, 6, 1.0, &mut rng).value;
        let logits = Param::<f64>::normal(3, 5, 2.0, &mut rng).value;
        (c, table, states, logits)
    }

    #[test]
    fn softmax_rows_are_stochastic() {
        let (c, table, _, logits) = setup(2);
        let (_, probs) = c.main_branch(&logits, &table);
        for r in 0..probs.rows() {
            let s: f64 = probs.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(probs.row(r).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn disabled_residual_is_exactly_the_main_branch() {
        let (c, table, states, logits) = setup(0);
        assert!(c.down.is_none() && c.up.is_none());
        let (out, _) = c.connect(&states, &logits, &table).unwrap();
        assert_eq!(out.embeddings, c.main_branch(&logits, &table).0);
    }

    #[test]
    fn one_hot_logits_select_a_table_row() {
        let (c, table, states, _) = setup(0);
        let logits = Mat::from_fn(3, 5, |_, j| if j == 2 { 1000.0 } else { 0.0 });
        let (out, _) = c.connect(&states, &logits, &table).unwrap();
        for r in 0..3 {
            for (a, b) in out.embeddings.row(r).iter().zip(table.row(2)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_an_argument_error() {
        let (c, table, states, _) = setup(2);
        assert!(c.connect(&states, &Mat::zeros(3, 4), &table).is_err());
        assert!(c.connect(&Mat::zeros(3, 5), &Mat::zeros(3, 5), &table).is_err());
    }

    #[test]
    fn fresh_residual_branch_is_an_exact_no_op() {
        let (c, table, states, logits) = setup(3);
        let (out, _) = c.connect(&states, &logits, &table).unwrap();
        assert_eq!(out.embeddings, c.main_branch(&logits, &table).0);
        let (_, b) = c.residual_branch(&states).unwrap();
        assert!(b.frobenius() > 0.0);
    }
}
