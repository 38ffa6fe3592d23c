//! Acceptance criteria, run in order by a custom harness that prints one
//! PASS/FAIL line per criterion. Arguments select criteria by substring:
//! `cargo test --test acceptance -- ac3 ac6`.

use std::ops::ControlFlow;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use simpletron::attention::{simple_attention_head, softmax_attention_head, AttentionKind};
use simpletron::bench::{bench_scaling, write_std_csv, BenchConfig, PointStatus};
use simpletron::model::{gradcheck_model, HeadKind, Model, ModelConfig, Variant};
use simpletron::optim::{evaluate, train, ScheduleConfig, TrainConfig};
use simpletron::tasks::{batch, gen_listops, gen_majority_classification, Dataset, ListOpsSpec, MajoritySpec, LISTOPS_VOCAB};
use simpletron::tensor::{cross_entropy_mean, embedding_lookup, finite_difference_gradient, relative_error, Activation};
use simpletron::transfer::{
    convert_attention_kind, export_checkpoint, freeze, import_checkpoint, reinit_trainable, Checkpoint, FreezeSet,
    Strictness,
};
use simpletron::{Element, Rng, Tensor};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

// ------------------------------------------------------------------ AC1

/// `(Q Kᵀ) V` by loops in the working precision.
fn quadratic<T: Element>(q: &[T], k: &[T], v: &[T], l: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); l * d];
    for i in 0..l {
        for j in 0..l {
            let mut s = T::zero();
            for e in 0..d {
                s += q[i * d + e] * k[j * d + e];
            }
            for e in 0..d {
                out[i * d + e] += s * v[j * d + e];
            }
        }
    }
    out
}

/// Max abs difference relative to the largest reference entry.
fn association_gap<T: Element>(q: &[f64], k: &[f64], v: &[f64], l: usize, d: usize) -> f64 {
    let t = |x: &[f64]| Tensor::<T>::from_f64(x, &[l, d]).unwrap();
    let (q, k, v) = (t(q), t(k), t(v));
    let linear = simple_attention_head(&q, &k, &v, 1.0, None).unwrap().to_f64_vec();
    let reference: Vec<f64> = quadratic(&q.to_vec(), &k.to_vec(), &v.to_vec(), l, d)
        .iter()
        .map(|x| x.widen())
        .collect();
    let scale = reference.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    linear.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale
}

fn ac1() -> Verdict {
    let mut rng = Rng::new(1001);
    let (mut worst32, mut worst64) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (l, d) = (1 + rng.below(256), 1 + rng.below(64));
        let mut draw = || (0..l * d).map(|_| rng.normal()).collect::<Vec<_>>();
        let (q, k, v) = (draw(), draw(), draw());
        worst32 = worst32.max(association_gap::<f32>(&q, &k, &v, l, d));
        worst64 = worst64.max(association_gap::<f64>(&q, &k, &v, l, d));
    }
    verdict(
        worst32 <= 1e-4 && worst64 <= 1e-10,
        format!("1000 cases, worst f32 {worst32:.2e} (≤ 1e-4), f64 {worst64:.2e} (≤ 1e-10)"),
    )
}

// ------------------------------------------------------------------ AC2

fn weighted_sum(t: &Tensor<f64>) -> Tensor<f64> {
    let w: Vec<f64> = (0..t.len()).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
    t.mul(&Tensor::from_vec(w, t.shape()).unwrap()).unwrap().sum()
}

/// Worst relative error over the inputs of `f`, each drawn with `shapes`.
fn op_error(seed: u64, shapes: &[&[usize]], f: impl Fn(&[Tensor<f64>]) -> Tensor<f64>) -> f64 {
    let mut rng = Rng::new(seed);
    let inputs: Vec<Tensor<f64>> = shapes
        .iter()
        .map(|s| Tensor::parameter((0..s.iter().product()).map(|_| rng.normal()).collect(), s).unwrap())
        .collect();
    let loss = || weighted_sum(&f(&inputs));
    loss().backward().unwrap();
    inputs
        .iter()
        .map(|t| {
            let numeric = finite_difference_gradient(|_| loss().item(), t, 1e-5).to_vec();
            relative_error(&t.grad().unwrap(), &numeric)
        })
        .fold(0.0, f64::max)
}

fn ac2() -> Verdict {
    let mask = [true, false, true, true, false];
    type OpFn = Box<dyn Fn(&[Tensor<f64>]) -> Tensor<f64>>;
    let ops: Vec<(&str, Vec<&[usize]>, OpFn)> = vec![
        ("matmul", vec![&[3, 4], &[4, 5]], Box::new(|x| x[0].matmul(&x[1]).unwrap())),
        ("transpose", vec![&[3, 4]], Box::new(|x| x[0].transpose().unwrap())),
        ("add", vec![&[3, 4], &[3, 4]], Box::new(|x| x[0].add(&x[1]).unwrap())),
        ("sub", vec![&[3, 4], &[3, 4]], Box::new(|x| x[0].sub(&x[1]).unwrap())),
        ("mul", vec![&[3, 4], &[3, 4]], Box::new(|x| x[0].mul(&x[1]).unwrap())),
        ("add_row_bias", vec![&[3, 4], &[4]], Box::new(|x| x[0].add_row_bias(&x[1]).unwrap())),
        ("scale", vec![&[3, 4]], Box::new(|x| x[0].scale(-0.7))),
        ("sum", vec![&[3, 4]], Box::new(|x| x[0].sum())),
        ("mean", vec![&[3, 4]], Box::new(|x| x[0].mean())),
        ("softmax", vec![&[3, 5]], Box::new(|x| x[0].softmax_lastdim())),
        ("softmax_masked", vec![&[3, 5]], Box::new(move |x| x[0].softmax_masked(Some(&mask)))),
        (
            "layer_norm",
            vec![&[3, 6], &[6], &[6]],
            Box::new(|x| x[0].layer_norm(&x[1], &x[2], 1e-5).unwrap()),
        ),
        ("gelu", vec![&[3, 4]], Box::new(|x| x[0].activation(Activation::Gelu))),
        ("relu", vec![&[3, 4]], Box::new(|x| x[0].activation(Activation::Relu))),
        (
            "dropout",
            vec![&[3, 4]],
            Box::new(|x| x[0].dropout(0.3, true, &mut Rng::new(5)).unwrap()),
        ),
        ("slice_cols", vec![&[3, 6]], Box::new(|x| x[0].slice_cols(2, 3).unwrap())),
        (
            "concat_cols",
            vec![&[3, 2], &[3, 4]],
            Box::new(|x| Tensor::concat_cols(&[x[0].clone(), x[1].clone()]).unwrap()),
        ),
        (
            "concat_rows",
            vec![&[2, 3], &[4, 3]],
            Box::new(|x| Tensor::concat_rows(&[x[0].clone(), x[1].clone()]).unwrap()),
        ),
        ("select_rows", vec![&[4, 3]], Box::new(|x| x[0].select_rows(&[2, 0, 2]).unwrap())),
        ("mask_rows", vec![&[5, 3]], Box::new(move |x| x[0].mask_rows(&mask).unwrap())),
        ("reshape", vec![&[3, 4]], Box::new(|x| x[0].reshape(&[2, 6]).unwrap())),
        ("embedding", vec![&[6, 4]], Box::new(|x| embedding_lookup(&x[0], &[1, 3, 1, 5]).unwrap())),
        (
            "cross_entropy",
            vec![&[4, 5]],
            Box::new(|x| cross_entropy_mean(&x[0], &[0, 4, 2, 2]).unwrap()),
        ),
        (
            "simple_head",
            vec![&[5, 3], &[5, 3], &[5, 3]],
            Box::new(move |x| simple_attention_head(&x[0], &x[1], &x[2], 0.4, Some(&mask)).unwrap()),
        ),
        (
            "softmax_head",
            vec![&[5, 3], &[5, 3], &[5, 3]],
            Box::new(move |x| softmax_attention_head(&x[0], &x[1], &x[2], 0.6, Some(&mask)).unwrap()),
        ),
    ];
    let mut failures = Vec::new();
    let mut worst_op = 0.0f64;
    for (i, (name, shapes, f)) in ops.iter().enumerate() {
        let err = op_error(200 + i as u64, shapes, f);
        worst_op = worst_op.max(err);
        if err > 1e-4 {
            failures.push(format!("{name} {err:.1e}"));
        }
    }

    let mut worst_model = 0.0f64;
    let mut checked = 0;
    let mut configs: Vec<ModelConfig> = Variant::ALL.iter().map(|&v| tiny_model(v)).collect();
    configs.push(ModelConfig {
        head: HeadKind::Pair,
        ..tiny_model(Variant::SimpleRes)
    });
    for (i, cfg) in configs.iter().enumerate() {
        for row in gradcheck_model(cfg, 6, 300 + i as u64).unwrap() {
            checked += 1;
            if row.abs_err > 1e-9 {
                worst_model = worst_model.max(row.rel_err);
            }
            if !row.passes(1e-4) {
                failures.push(format!("{} {} {:.1e}", cfg.variant.name(), row.name, row.rel_err));
            }
        }
    }
    verdict(
        failures.is_empty(),
        format!(
            "{} ops worst {worst_op:.1e}; {checked} model tensors over {} configs worst {worst_model:.1e}{}",
            ops.len(),
            configs.len(),
            if failures.is_empty() { String::new() } else { format!("; failed: {}", failures.join(", ")) }
        ),
    )
}

fn tiny_model(variant: Variant) -> ModelConfig {
    ModelConfig {
        n_blocks: 2,
        n_heads: 2,
        d_embed: 8,
        d_hidden: 8,
        d_mlp: 16,
        vocab_size: 12,
        max_len: 7,
        n_classes: 3,
        dropout_p: 0.0,
        ..ModelConfig::new(variant)
    }
}

// ------------------------------------------------------------------ AC3

fn ac3() -> Verdict {
    let sweep = |kind, lengths: Vec<usize>| {
        let report = bench_scaling(&BenchConfig::new(vec![kind], lengths, 3)).unwrap();
        report.slopes[0].1.unwrap_or(f64::NAN)
    };
    let simple = sweep(AttentionKind::Simple, vec![1024, 2048, 4096, 8192, 16384]);
    let softmax = sweep(AttentionKind::Softmax, vec![256, 512, 1024, 2048, 4096]);

    let mut cfg = BenchConfig::new(vec![AttentionKind::Simple, AttentionKind::Softmax], vec![512, 1024, 2048], 3);
    cfg.timing = false;
    let report = bench_scaling(&cfg).unwrap();
    let peak = |kind| {
        let r = report.records.iter().find(|r| r.kind == kind && r.len == 2048).unwrap();
        assert_eq!(r.status, PointStatus::Ok);
        r.peak_bytes
    };
    let (ps, pm) = (peak(AttentionKind::Simple), peak(AttentionKind::Softmax));
    let floor = 4 * 2048 * 2048;
    verdict(
        (0.8..=1.3).contains(&simple) && (1.7..=2.3).contains(&softmax) && pm >= floor && 10 * ps <= pm,
        format!(
            "slope simple {simple:.3} in [0.8, 1.3], softmax {softmax:.3} in [1.7, 2.3]; \
             peak at L=2048 simple {ps} B, softmax {pm} B (floor {floor} B, ratio {:.1})",
            pm as f64 / ps as f64
        ),
    )
}

// ------------------------------------------------------------------ AC4

fn desk_model(variant: Variant, vocab: usize, max_len: usize, classes: usize) -> ModelConfig {
    ModelConfig {
        n_blocks: 2,
        n_heads: 4,
        d_embed: 64,
        d_hidden: 64,
        d_mlp: 128,
        vocab_size: vocab,
        max_len,
        n_classes: classes,
        ..ModelConfig::new(variant)
    }
}

/// Trains with periodic evaluation and stops once `done(accuracy)`.
/// Returns the best held-out accuracy and the steps run.
fn train_until(
    model: &Model<f32>,
    data: &Dataset,
    test: &Dataset,
    steps: usize,
    eval_every: usize,
    seed: u64,
    done: impl Fn(f64) -> bool,
) -> (f64, usize) {
    let mut tc = TrainConfig::new(ScheduleConfig::desk(steps));
    tc.eval_every = eval_every;
    let mut best = 0.0f64;
    let h = train(model, data, Some(test), &tc, &Rng::new(seed), |info| match info.eval {
        Some(e) => {
            best = best.max(e.accuracy);
            if done(e.accuracy) {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        }
        None => ControlFlow::Continue(()),
    })
    .unwrap();
    (best, h.steps_run)
}

fn ac4() -> Verdict {
    let spec = MajoritySpec::new(34, 256, 4);
    let mut runs = Vec::new();
    for seed in 0..3u64 {
        let mut rng = Rng::new(400 + seed);
        let data = gen_majority_classification(&spec, 10_000, &mut rng).unwrap();
        let test = gen_majority_classification(&spec, 1000, &mut rng).unwrap();
        let m = Model::<f32>::new(desk_model(Variant::SimpleRes, 34, 257, 4), &mut rng.split(1)).unwrap();
        runs.push(train_until(&m, &data, &test, 2000, 50, 410 + seed, |a| a >= 0.95));
    }
    let mut accs: Vec<f64> = runs.iter().map(|r| r.0).collect();
    accs.sort_by(f64::total_cmp);
    let majority = accs[1];

    let spec = ListOpsSpec::default();
    let mut rng = Rng::new(1);
    let data = gen_listops(&spec, 20_000, &mut rng).unwrap();
    let test = gen_listops(&spec, 500, &mut rng).unwrap();
    let m = Model::<f32>::new(desk_model(Variant::SimpleRes, LISTOPS_VOCAB, 129, 10), &mut Rng::new(2)).unwrap();
    let (listops, listops_steps) = train_until(&m, &data, &test, 5000, 250, 3, |a| a > 0.35);

    verdict(
        majority >= 0.95 && listops > 0.35,
        format!(
            "majority median {majority:.3} (runs {}); listops {listops:.3} after {listops_steps} steps (> 0.350)",
            runs.iter().map(|(a, s)| format!("{a:.3}@{s}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

// ------------------------------------------------------------------ AC5

fn bits(m: &Model<f32>, names: &[String]) -> Vec<Vec<u32>> {
    m.named_parameters()
        .into_iter()
        .filter(|(n, _)| names.contains(n))
        .map(|(_, t)| t.to_vec().iter().map(|x| x.to_bits()).collect())
        .collect()
}

fn ac5() -> Verdict {
    let spec = MajoritySpec::new(34, 64, 4);
    let mut rng = Rng::new(500);
    let data = gen_majority_classification(&spec, 6000, &mut rng).unwrap();
    let test = gen_majority_classification(&spec, 1000, &mut rng).unwrap();
    let steps = 300;
    let tc = TrainConfig::new(ScheduleConfig::desk(steps));
    let run = |m: &Model<f32>| {
        train(m, &data, None, &tc, &Rng::new(54), |_| ControlFlow::Continue(())).unwrap();
        evaluate(m, &test, 64).unwrap().accuracy
    };

    let cfg = desk_model(Variant::Simple, 34, 65, 4);
    let source = Model::<f32>::new(cfg.clone(), &mut Rng::new(51)).unwrap();
    let source_acc = run(&source);

    let moved = convert_attention_kind(&source, AttentionKind::Softmax).unwrap();
    let frozen = freeze(&moved, &FreezeSet::qkv()).unwrap();
    reinit_trainable(&moved, &mut Rng::new(53)).unwrap();
    let before = bits(&moved, &frozen);
    let moved_acc = run(&moved);
    let intact = bits(&moved, &frozen) == before && before == bits(&source, &frozen);

    let scratch_cfg = ModelConfig {
        attention: AttentionKind::Softmax,
        scale: AttentionKind::Softmax.default_scale(),
        ..cfg
    };
    let scratch = Model::<f32>::new(scratch_cfg, &mut Rng::new(55)).unwrap();
    let scratch_acc = run(&scratch);

    verdict(
        moved_acc >= 0.95 * scratch_acc && intact,
        format!(
            "simple source {source_acc:.3}; transferred softmax {moved_acc:.3} vs scratch softmax {scratch_acc:.3} \
             (need ≥ {:.3}) at {steps} steps; {} frozen tensors {}",
            0.95 * scratch_acc,
            frozen.len(),
            if intact { "bit-identical" } else { "CHANGED" }
        ),
    )
}

// ------------------------------------------------------------------ AC6

/// Tensors per block from the layer list: q, k, v (and the output layer
/// when present) with weight and bias, two norms and two MLP layers.
fn tensors_per_block(v: Variant) -> usize {
    let linears = 3 + usize::from(v.output_linear()) + 2;
    2 * linears + 2 * 2
}

fn ac6() -> Verdict {
    let mut problems = Vec::new();
    for v in Variant::ALL {
        for head in [HeadKind::Single, HeadKind::Pair] {
            let cfg = ModelConfig {
                head,
                ..tiny_model(v)
            };
            let a = Model::<f32>::new(cfg.clone(), &mut Rng::new(60)).unwrap();
            let b = Model::<f32>::new(cfg.clone(), &mut Rng::new(61)).unwrap();
            let first = export_checkpoint(&a).to_bytes();
            import_checkpoint(&Checkpoint::from_bytes(&first).unwrap(), &b, Strictness::Strict).unwrap();
            if export_checkpoint(&b).to_bytes() != first {
                problems.push(format!("{} {head:?} f32 round trip", v.name()));
            }
            let a = Model::<f64>::new(cfg.clone(), &mut Rng::new(62)).unwrap();
            let b = Model::<f64>::new(cfg, &mut Rng::new(63)).unwrap();
            let first = export_checkpoint(&a).to_bytes();
            import_checkpoint(&Checkpoint::from_bytes(&first).unwrap(), &b, Strictness::Strict).unwrap();
            if export_checkpoint(&b).to_bytes() != first {
                problems.push(format!("{} {head:?} f64 round trip", v.name()));
            }
        }

        let n = 4;
        let per = tensors_per_block(v);
        let with_blocks = |k: usize, seed| {
            Model::<f32>::new(ModelConfig { n_blocks: k, ..tiny_model(v) }, &mut Rng::new(seed)).unwrap()
        };
        let deep = with_blocks(n, 64);
        for k in 0..=n {
            let shallow = with_blocks(k, 65);
            let up = import_checkpoint(&export_checkpoint(&shallow), &deep, Strictness::Subset).unwrap();
            let down = import_checkpoint(&export_checkpoint(&deep), &shallow, Strictness::Subset).unwrap();
            let want = 4 + k * per;
            if up.filled.len() != want || up.unfilled.len() != (n - k) * per || !up.ignored.is_empty() {
                problems.push(format!("{} {k}-block into {n}-block filled {}", v.name(), up.filled.len()));
            }
            if down.filled.len() != want || down.ignored.len() != (n - k) * per || !down.unfilled.is_empty() {
                problems.push(format!("{} first {k} of {n} blocks filled {}", v.name(), down.filled.len()));
            }
        }
    }
    verdict(
        problems.is_empty(),
        if problems.is_empty() {
            "round trips bitwise identical for 4 variants × 2 heads × 2 dtypes; subset counts exact for k = 0..4".into()
        } else {
            problems.join("; ")
        },
    )
}

// ------------------------------------------------------------------ AC7

fn ac7() -> Verdict {
    let spec = MajoritySpec::new(34, 32, 4);
    let mut rng = Rng::new(700);
    let data = gen_majority_classification(&spec, 8000, &mut rng).unwrap();
    let test = gen_majority_classification(&spec, 500, &mut rng).unwrap();
    let probe = batch(&test.examples[..64], 33).unwrap();
    let mut rows = Vec::new();
    let mut ratios = Vec::new();
    let mut accs = Vec::new();
    for variant in [Variant::Simple, Variant::SimpleRes] {
        let cfg = ModelConfig {
            n_blocks: 8,
            n_heads: 4,
            d_embed: 32,
            d_hidden: 32,
            d_mlp: 64,
            vocab_size: 34,
            max_len: 33,
            n_classes: 4,
            ..ModelConfig::new(variant)
        };
        let m = Model::<f32>::new(cfg, &mut Rng::new(701)).unwrap();
        let tc = TrainConfig::new(ScheduleConfig::desk(2000));
        train(&m, &data, None, &tc, &Rng::new(702), |_| ControlFlow::Continue(())).unwrap();
        accs.push(evaluate(&m, &test, 64).unwrap().accuracy);
        let stds = m.attention_std(&probe).unwrap();
        let deep = stds[4..].iter().sum::<f64>() / 4.0;
        ratios.push(deep / stds[0]);
        rows.push((variant.name().to_string(), stds));
    }
    let path = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("depth_std.csv");
    write_std_csv(&rows, std::fs::File::create(&path).unwrap()).unwrap();
    verdict(
        ratios[0] < ratios[1],
        format!(
            "mean std of blocks 5-8 over block 1: simple {:.3e} < simple_res {:.3e} (accuracy {:.3} / {:.3}); \
             per-block std in {}",
            ratios[0],
            ratios[1],
            accs[0],
            accs[1],
            path.display()
        ),
    )
}

// ------------------------------------------------------------------ AC8

fn ac8() -> Verdict {
    let mut checked = 0;
    let mut problems = Vec::new();
    for n_blocks in [0, 1, 2, 3, 8] {
        for (d, heads) in [(4, 1), (8, 2), (16, 4), (64, 4), (96, 8)] {
            for (vocab, classes) in [(12, 2), (34, 10)] {
                let count = |variant| {
                    let cfg = ModelConfig {
                        n_blocks,
                        n_heads: heads,
                        d_embed: d,
                        d_hidden: d,
                        d_mlp: 2 * d,
                        vocab_size: vocab,
                        max_len: 17,
                        n_classes: classes,
                        ..ModelConfig::new(variant)
                    };
                    Model::<f32>::new(cfg, &mut Rng::new(8)).unwrap().parameter_count()
                };
                let gap = n_blocks * (d * d + d);
                let (simple, res, resl) = (count(Variant::Simple), count(Variant::SimpleRes), count(Variant::SimpleResL));
                checked += 1;
                if resl - simple != gap || resl - res != gap {
                    problems.push(format!("N={n_blocks} D={d}: {resl} - {simple}/{res} ≠ {gap}"));
                }
            }
        }
    }
    verdict(
        problems.is_empty(),
        if problems.is_empty() {
            format!("{checked} configurations, gap = N·(D_hid·D_E + D_E) exactly")
        } else {
            problems.join("; ")
        },
    )
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, &str, fn() -> Verdict); 8] = [
        ("ac1", "associativity", ac1),
        ("ac2", "gradients", ac2),
        ("ac3", "complexity", ac3),
        ("ac4", "desk-scale learning", ac4),
        ("ac5", "attention transfer", ac5),
        ("ac6", "checkpoint", ac6),
        ("ac7", "depth pathology", ac7),
        ("ac8", "parameter accounting", ac8),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| id.contains(f.as_str()) || name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!v.pass);
        println!(
            "{} {id} {name}: {} [{:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
