use proptest::prelude::*;
use simpletron::attention::{
    attention_forward, simple_attention_head, softmax_attention_head, AttentionConfig,
    AttentionKind, AttentionParams, MaskMode, ScaleMode,
};
use simpletron::tensor::{alloc_stats, finite_difference_gradient, no_grad, relative_error, reset_alloc_peak};
use simpletron::{Element, Rng, Tensor};

fn random<T: Element>(rng: &mut Rng, rows: usize, cols: usize) -> Tensor<T> {
    Tensor::from_f64(
        &(0..rows * cols).map(|_| rng.normal()).collect::<Vec<_>>(),
        &[rows, cols],
    )
    .unwrap()
}

/// `(Q Kᵀ) V` by explicit loops, the association the simple head avoids.
fn quadratic_oracle<T: Element>(q: &[T], k: &[T], v: &[T], l: usize, d: usize) -> Vec<T> {
    let mut scores = vec![T::zero(); l * l];
    for i in 0..l {
        for j in 0..l {
            let mut acc = T::zero();
            for e in 0..d {
                acc += q[i * d + e] * k[j * d + e];
            }
            scores[i * l + j] = acc;
        }
    }
    let mut out = vec![T::zero(); l * d];
    for i in 0..l {
        for j in 0..l {
            let s = scores[i * l + j];
            for e in 0..d {
                out[i * d + e] += s * v[j * d + e];
            }
        }
    }
    out
}

fn max_rel_diff<T: Element>(a: &[T], b: &[T]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x.widen() - y.widen()).abs())
        .fold(0.0, f64::max);
    let scale = b.iter().map(|x| x.widen().abs()).fold(0.0, f64::max);
    diff / scale.max(f64::MIN_POSITIVE)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn simple_head_equals_quadratic_association(
        l in 1usize..=96,
        d in 1usize..=32,
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let (q, k, v) = (random::<f32>(&mut rng, l, d), random::<f32>(&mut rng, l, d), random::<f32>(&mut rng, l, d));
        let got = simple_attention_head(&q, &k, &v, 1.0, None).unwrap().to_vec();
        let want = quadratic_oracle(&q.to_vec(), &k.to_vec(), &v.to_vec(), l, d);
        prop_assert!(max_rel_diff(&got, &want) <= 1e-4);

        let (q, k, v) = (q.cast::<f64>(), k.cast::<f64>(), v.cast::<f64>());
        let got = simple_attention_head(&q, &k, &v, 1.0, None).unwrap().to_vec();
        let want = quadratic_oracle(&q.to_vec(), &k.to_vec(), &v.to_vec(), l, d);
        prop_assert!(max_rel_diff(&got, &want) <= 1e-10);
    }
}

#[test]
fn simple_head_at_l64_d16_matches_oracle_with_scale() {
    let mut rng = Rng::new(64);
    let (l, d) = (64, 16);
    let (q, k, v) = (random::<f32>(&mut rng, l, d), random::<f32>(&mut rng, l, d), random::<f32>(&mut rng, l, d));
    let s = 1.0 / (l as f64).sqrt();
    let got = simple_attention_head(&q, &k, &v, s, None).unwrap().to_vec();
    let want: Vec<f32> = quadratic_oracle(&q.to_vec(), &k.to_vec(), &v.to_vec(), l, d)
        .into_iter()
        .map(|x| x * s as f32)
        .collect();
    assert!(max_rel_diff(&got, &want) <= 1e-4);
}

#[test]
fn simple_forward_matches_association_oracle_through_heads() {
    let mut rng = Rng::new(10);
    let (l, de, heads) = (12, 8, 4);
    let p = AttentionParams::<f64>::init(de, de, true, &mut rng);
    let x = random::<f64>(&mut rng, l, de);
    let cfg = AttentionConfig::new(AttentionKind::Simple, heads);
    let got = attention_forward(&x, &p, &cfg, None).unwrap().to_vec();

    // Oracle: explicit projections, per-head (QKᵀ)V, concat, output layer.
    let proj = |lin: &simpletron::attention::Linear<f64>| {
        x.matmul(&lin.weight).unwrap().add_row_bias(&lin.bias).unwrap().to_vec()
    };
    let (qd, kd, vd) = (proj(&p.q), proj(&p.k), proj(&p.v));
    let d = de / heads;
    let mut merged = vec![0.0; l * de];
    for h in 0..heads {
        let col = |m: &[f64]| -> Vec<f64> {
            (0..l).flat_map(|i| m[i * de + h * d..i * de + (h + 1) * d].to_vec()).collect()
        };
        let out = quadratic_oracle(&col(&qd), &col(&kd), &col(&vd), l, d);
        for i in 0..l {
            for e in 0..d {
                merged[i * de + h * d + e] = out[i * d + e] / (l as f64).sqrt();
            }
        }
    }
    let merged = Tensor::from_vec(merged, &[l, de]).unwrap();
    let want = p.out.as_ref().unwrap().forward(&merged).unwrap().to_vec();
    assert!(max_rel_diff(&got, &want) <= 1e-4);
}

#[test]
fn more_heads_change_the_output() {
    let mut rng = Rng::new(11);
    let p = AttentionParams::<f64>::init(8, 8, true, &mut rng);
    let x = random::<f64>(&mut rng, 10, 8);
    for kind in [AttentionKind::Simple, AttentionKind::Softmax] {
        let one = attention_forward(&x, &p, &AttentionConfig::new(kind, 1), None).unwrap();
        let four = attention_forward(&x, &p, &AttentionConfig::new(kind, 4), None).unwrap();
        assert!(max_rel_diff(&one.to_vec(), &four.to_vec()) > 1e-3, "{kind:?}");
    }
}

#[test]
fn simple_attention_is_not_linear_in_its_input() {
    let mut rng = Rng::new(12);
    let p = AttentionParams::<f64>::init(6, 6, false, &mut rng);
    let mut cfg = AttentionConfig::new(AttentionKind::Simple, 2);
    cfg.use_output_linear = false;
    cfg.scale = ScaleMode::None;
    let x1 = random::<f64>(&mut rng, 5, 6);
    let x2 = random::<f64>(&mut rng, 5, 6);
    let f = |x: &Tensor<f64>| attention_forward(x, &p, &cfg, None).unwrap();
    let lhs = f(&x1.add(&x2).unwrap()).to_vec();
    let rhs = f(&x1).add(&f(&x2)).unwrap().to_vec();
    assert!(max_rel_diff(&lhs, &rhs) > 1e-2);
}

#[test]
fn padding_leaves_real_positions_unchanged() {
    let mut rng = Rng::new(13);
    let (l, pad, de) = (7, 5, 8);
    let p = AttentionParams::<f64>::init(de, de, true, &mut rng);
    let x = random::<f64>(&mut rng, l, de);
    let junk = random::<f64>(&mut rng, pad, de).scale(3.0);
    let padded = Tensor::concat_rows(&[x.clone(), junk]).unwrap();
    let mask: Vec<bool> = (0..l + pad).map(|i| i < l).collect();
    for kind in [AttentionKind::Simple, AttentionKind::Softmax] {
        let cfg = AttentionConfig::new(kind, 2);
        let plain = attention_forward(&x, &p, &cfg, None).unwrap().to_vec();
        let masked = attention_forward(&padded, &p, &cfg, Some(&mask)).unwrap().to_vec();
        let diff = plain
            .iter()
            .zip(&masked[..l * de])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-6, "{kind:?}: {diff}");

        // With masking switched off the padding leaks in.
        let mut open = cfg;
        open.mask_mode = MaskMode::None;
        let leaked = attention_forward(&padded, &p, &open, Some(&mask)).unwrap().to_vec();
        assert!(plain.iter().zip(&leaked).any(|(a, b)| (a - b).abs() > 1e-6));
    }
}

#[test]
fn gradients_of_both_kinds_match_finite_differences() {
    let mut rng = Rng::new(14);
    let (l, d) = (6, 4);
    for kind in [AttentionKind::Simple, AttentionKind::Softmax] {
        let p = AttentionParams::<f64>::init(d, d, true, &mut rng);
        p.q.bias.update_data(|b| b.iter_mut().for_each(|v| *v = 0.1 * rng.normal()));
        let x = Tensor::parameter((0..l * d).map(|_| rng.normal()).collect(), &[l, d]).unwrap();
        let cfg = AttentionConfig::new(kind, 2);
        let weights: Vec<f64> = (0..l * d).map(|i| (i as f64 * 0.37).sin()).collect();
        let w = Tensor::from_vec(weights, &[l, d]).unwrap();
        let loss = || attention_forward(&x, &p, &cfg, None).unwrap().mul(&w).unwrap().sum();

        let leaves = [
            &x,
            &p.q.weight,
            &p.q.bias,
            &p.k.weight,
            &p.v.weight,
            &p.v.bias,
            &p.out.as_ref().unwrap().weight,
        ];
        loss().backward().unwrap();
        for (i, t) in leaves.iter().enumerate() {
            let analytic = t.grad().unwrap();
            let numeric = finite_difference_gradient(|_| loss().item(), t, 1e-5);
            let err = relative_error(&analytic, &numeric.to_vec());
            assert!(err <= 1e-4, "{kind:?} leaf {i}: {err:e}");
        }
    }
}

#[test]
fn simple_head_memory_is_linear_and_softmax_is_quadratic() {
    let (l, d) = (2048, 64);
    let mut rng = Rng::new(15);
    let (q, k, v) = (random::<f32>(&mut rng, l, d), random::<f32>(&mut rng, l, d), random::<f32>(&mut rng, l, d));
    let measure = |kind: AttentionKind| {
        no_grad(|| {
            reset_alloc_peak();
            let base = alloc_stats().current_bytes;
            let out = match kind {
                AttentionKind::Simple => simple_attention_head(&q, &k, &v, 0.1, None),
                AttentionKind::Softmax => softmax_attention_head(&q, &k, &v, 0.1, None),
            }
            .unwrap();
            drop(out);
            (alloc_stats().peak_bytes - base) / std::mem::size_of::<f32>()
        })
    };
    let simple = measure(AttentionKind::Simple);
    let softmax = measure(AttentionKind::Softmax);
    assert!(simple < 10 * l * d, "simple peak {simple} numbers");
    assert!(softmax > l * l, "softmax peak {softmax} numbers");
}
