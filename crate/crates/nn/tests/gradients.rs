use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use streamconv_nn::{AttnMask, KvCache, Mat, Module, Param, QkvLora, TransformerBlock};

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat<f64> {
    Param::<f64>::normal(rows, cols, 1.0, rng).value
}

/// Loss = sum(y * w) so dL/dy = w.
fn block_loss(block: &TransformerBlock<f64>, lora: Option<&QkvLora<f64>>, x: &Mat<f64>, w: &Mat<f64>, segs: &[(usize, usize)], mask: AttnMask) -> f64 {
    let (y, _) = block.forward(x, segs, mask, lora);
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn check_block(mask: AttnMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut block = TransformerBlock::<f64>::new(8, 2, 12, 2, &mut rng);
    let mut lora = QkvLora::<f64>::new(8, 2, 1.0, &mut rng);
    // non-zero B so adapter gradients are exercised
    lora.visit_mut("", &mut |_, p| {
        for v in p.value.data_mut() {
            if *v == 0.0 {
                *v = 0.3;
            }
        }
    });
    let segs = [(0, 3), (3, 4)];
    let x = random_mat(&mut rng, 7, 8);
    let w = random_mat(&mut rng, 7, 8);

    let (_, cache) = block.forward(&x, &segs, mask, Some(&lora));
    block.zero_grad();
    lora.zero_grad();
    let dx = block.backward(&cache, &w, &segs, mask, Some(&mut lora));

    let eps = 1e-6;
    // input gradient
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += eps;
        let mut xm = x.clone();
        xm.data_mut()[i] -= eps;
        let num = (block_loss(&block, Some(&lora), &xp, &w, &segs, mask) - block_loss(&block, Some(&lora), &xm, &w, &segs, mask)) / (2.0 * eps);
        let ana = dx.data()[i];
        assert!((num - ana).abs() <= 1e-6 + 1e-5 * num.abs().max(ana.abs()), "dx[{i}] {num} vs {ana}");
    }

    // parameter gradients: block then adapters
    let mut grads = Vec::new();
    block.visit("", &mut |n, p| grads.push((format!("block.{n}"), p.grad.clone())));
    lora.visit("", &mut |n, p| grads.push((format!("lora.{n}"), p.grad.clone())));
    let mut idx = 0;
    for (name, g) in &grads {
        for e in 0..g.len() {
            let eval = |delta: f64, block: &mut TransformerBlock<f64>, lora: &mut QkvLora<f64>| {
                let target = name.clone();
                let mut f = |n: &str, p: &mut Param<f64>| {
                    if n == target.split_once('.').unwrap().1 {
                        p.value.data_mut()[e] += delta;
                    }
                };
                if name.starts_with("block.") {
                    block.visit_mut("", &mut f);
                } else {
                    lora.visit_mut("", &mut f);
                }
            };
            eval(eps, &mut block, &mut lora);
            let lp = block_loss(&block, Some(&lora), &x, &w, &segs, mask);
            eval(-2.0 * eps, &mut block, &mut lora);
            let lm = block_loss(&block, Some(&lora), &x, &w, &segs, mask);
            eval(eps, &mut block, &mut lora);
            let num = (lp - lm) / (2.0 * eps);
            let ana = g.data()[e];
            assert!((num - ana).abs() <= 1e-6 + 1e-5 * num.abs().max(ana.abs()), "{name}[{e}] {num} vs {ana}");
            idx += 1;
        }
    }
    assert!(idx > 500);
}

#[test]
fn causal_block_gradients_match_finite_differences() {
    check_block(AttnMask::Causal);
}

#[test]
fn bidirectional_block_gradients_match_finite_differences() {
    check_block(AttnMask::Bidirectional);
}

#[test]
fn incremental_rows_equal_batch_rows_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let block = TransformerBlock::<f32>::new(16, 4, 32, 1, &mut rng);
    let x = Param::<f32>::normal(9, 16, 1.0, &mut rng).value;
    let (full, _) = block.forward(&x, &[(0, 9)], AttnMask::Causal, None);
    let mut kv = KvCache::new(16);
    let mut rows = Vec::new();
    // feed in uneven chunks
    for (a, b) in [(0, 1), (1, 4), (4, 5), (5, 9)] {
        let y = block.forward_incremental(&x.slice_rows(a, b), &mut kv, None);
        for r in 0..y.rows() {
            rows.push(y.row(r).to_vec());
        }
    }
    for (r, row) in rows.iter().enumerate() {
        assert_eq!(row.as_slice(), full.row(r), "row {r}");
    }
}

#[test]
fn zero_initialised_adapter_is_exact_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let block = TransformerBlock::<f32>::new(16, 4, 32, 1, &mut rng);
    let lora = QkvLora::<f32>::new(16, 4, 1.0, &mut rng);
    let x = Param::<f32>::normal(6, 16, 1.0, &mut rng).value;
    let (a, _) = block.forward(&x, &[(0, 6)], AttnMask::Causal, None);
    let (b, _) = block.forward(&x, &[(0, 6)], AttnMask::Causal, Some(&lora));
    assert_eq!(a, b);
}
