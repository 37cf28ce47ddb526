//! Minimal CPU toolkit for small transformers: dense matrices, layers with
//! hand-written backward passes, attention with low-rank adapters and a
//! key/value cache, losses and an AdamW optimiser.
//!
//! Every layer is generic over [`Real`], so models train in `f32` and the
//! same code can be checked against finite differences in `f64`.

mod attention;
mod block;
mod linear;
pub mod loss;
mod mat;
pub mod optim;
mod param;
mod real;

pub use attention::{attend_head, AttnMask, Attention, AttentionCache, KvCache, QkvLora, Segment};
pub use block::{BlockCache, SwiGlu, SwiGluCache, TransformerBlock};
pub use linear::{Embedding, Linear, LoraAdapter, RmsNorm};
pub use mat::{axpy, dot, gemm, Mat};
pub use param::{join_name, Module, Param};
pub use real::Real;
