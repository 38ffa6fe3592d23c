use std::ops::ControlFlow;

use simpletron::attention::{project_qkv, AttentionKind, ScaleMode};
use simpletron::model::{HeadKind, Model, ModelConfig, Variant};
use simpletron::optim::{train, ScheduleConfig, TrainConfig};
use simpletron::tasks::{gen_majority_classification, MajoritySpec};
use simpletron::transfer::{
    convert_attention_kind, export_checkpoint, freeze, import_bytes, import_checkpoint, Checkpoint, Entry,
    FreezeSet, Strictness,
};
use simpletron::{Error, Rng};

fn cfg(variant: Variant, blocks: usize) -> ModelConfig {
    ModelConfig {
        n_blocks: blocks,
        n_heads: 2,
        d_embed: 8,
        d_hidden: 8,
        d_mlp: 16,
        vocab_size: 14,
        max_len: 17,
        n_classes: 3,
        dropout_p: 0.0,
        ..ModelConfig::new(variant)
    }
}

fn bits(v: Vec<f32>) -> Vec<u32> {
    v.into_iter().map(f32::to_bits).collect()
}

fn snapshot(m: &Model<f32>) -> Vec<(String, Vec<u32>)> {
    m.named_parameters().into_iter().map(|(n, t)| (n, bits(t.to_vec()))).collect()
}

#[test]
fn export_import_export_is_bitwise_identical() {
    for v in Variant::ALL {
        let a = Model::<f32>::new(cfg(v, 2), &mut Rng::new(1)).unwrap();
        let b = Model::<f32>::new(cfg(v, 2), &mut Rng::new(2)).unwrap();
        let bytes = export_checkpoint(&a).to_bytes();
        let report = import_bytes(&bytes, &b, Strictness::Strict).unwrap();
        assert!(report.unfilled.is_empty() && report.ignored.is_empty());
        assert_eq!(export_checkpoint(&b).to_bytes(), bytes);
        let ids = [3, 4, 5, 6];
        assert_eq!(bits(a.classify(&ids, None).unwrap().to_vec()), bits(b.classify(&ids, None).unwrap().to_vec()));
    }
}

#[test]
fn file_round_trip() {
    let m = Model::<f64>::new(cfg(Variant::SimpleResL, 1), &mut Rng::new(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.strn");
    export_checkpoint(&m).save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), export_checkpoint(&m));
}

#[test]
fn entry_count_matches_tensor_formula() {
    for v in Variant::ALL {
        for blocks in [0, 1, 3] {
            for head in [HeadKind::Single, HeadKind::Pair] {
                let c = ModelConfig { head, ..cfg(v, blocks) };
                let m = Model::<f32>::new(c, &mut Rng::new(0)).unwrap();
                // q, k, v, two norms and two MLP layers; out layer when present.
                let per_block = 2 * 3 + 2 * 2 + 2 * 2 + if v.output_linear() { 2 } else { 0 };
                let head_tensors = if head == HeadKind::Pair { 4 } else { 2 };
                assert_eq!(export_checkpoint(&m).entries.len(), 2 + blocks * per_block + head_tensors);
            }
        }
    }
}

#[test]
fn empty_stack_exports_embeddings_and_head() {
    let m = Model::<f32>::new(cfg(Variant::Simple, 0), &mut Rng::new(0)).unwrap();
    assert_eq!(export_checkpoint(&m).names(), vec!["embed.tok", "embed.pos", "head.weight", "head.bias"]);
}

#[test]
fn canonical_names_for_one_block() {
    let m = Model::<f32>::new(cfg(Variant::Vanilla, 1), &mut Rng::new(0)).unwrap();
    let names = export_checkpoint(&m).names().join(" ");
    assert_eq!(
        names,
        "embed.tok embed.pos \
         block.0.attn.q.weight block.0.attn.q.bias block.0.attn.k.weight block.0.attn.k.bias \
         block.0.attn.v.weight block.0.attn.v.bias block.0.attn.out.weight block.0.attn.out.bias \
         block.0.ln1.gamma block.0.ln1.beta block.0.mlp.0.weight block.0.mlp.0.bias \
         block.0.mlp.1.weight block.0.mlp.1.bias block.0.ln2.gamma block.0.ln2.beta \
         head.weight head.bias"
    );
}

#[test]
fn subset_import_reports_unfilled_names() {
    let src = Model::<f32>::new(cfg(Variant::SimpleRes, 3), &mut Rng::new(1)).unwrap();
    let mut ck = export_checkpoint(&src);
    ck.entries.retain(|e| e.name.starts_with("block.0."));
    let dst = Model::<f32>::new(cfg(Variant::SimpleRes, 3), &mut Rng::new(2)).unwrap();
    let before = snapshot(&dst);
    let report = import_checkpoint(&ck, &dst, Strictness::Subset).unwrap();
    assert_eq!(report.filled.len(), ck.entries.len());
    let all: Vec<String> = dst.named_parameters().into_iter().map(|(n, _)| n).collect();
    let others: Vec<String> = all.iter().filter(|n| !n.starts_with("block.0.")).cloned().collect();
    assert_eq!(report.unfilled, others);
    let source = snapshot(&src);
    for (((name, after), (_, prior)), (_, from)) in snapshot(&dst).iter().zip(&before).zip(&source) {
        let want = if name.starts_with("block.0.") { from } else { prior };
        assert_eq!(after, want, "{name}");
    }
    assert!(matches!(import_checkpoint(&ck, &dst, Strictness::Strict), Err(Error::Format(_))));
}

#[test]
fn first_k_blocks_of_a_deeper_model() {
    let deep = Model::<f32>::new(cfg(Variant::SimpleResL, 4), &mut Rng::new(1)).unwrap();
    let shallow = Model::<f32>::new(cfg(Variant::SimpleResL, 2), &mut Rng::new(2)).unwrap();
    let report = import_checkpoint(&export_checkpoint(&deep), &shallow, Strictness::Subset).unwrap();
    assert_eq!(report.filled.len(), shallow.cfg.tensor_count());
    assert_eq!(report.ignored.len(), 2 * 16);
    assert!(report.ignored.iter().all(|n| n.starts_with("block.2.") || n.starts_with("block.3.")));
    assert!(import_checkpoint(&export_checkpoint(&deep), &shallow, Strictness::Strict).is_err());
}

#[test]
fn truncated_or_corrupt_files_leave_the_model_untouched() {
    let src = Model::<f32>::new(cfg(Variant::Simple, 1), &mut Rng::new(1)).unwrap();
    let dst = Model::<f32>::new(cfg(Variant::Simple, 1), &mut Rng::new(2)).unwrap();
    let before = snapshot(&dst);
    let bytes = export_checkpoint(&src).to_bytes();
    for cut in [3, 11, 40, bytes.len() / 2, bytes.len() - 1] {
        let r = import_bytes(&bytes[..cut], &dst, Strictness::Subset);
        assert!(matches!(r, Err(Error::Format(_))), "cut at {cut}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(import_bytes(&extra, &dst, Strictness::Subset), Err(Error::Format(_))));
    assert_eq!(snapshot(&dst), before);
}

#[test]
fn shape_mismatch_names_the_tensor_and_writes_nothing() {
    let src = Model::<f32>::new(cfg(Variant::Simple, 1), &mut Rng::new(1)).unwrap();
    let wide = ModelConfig {
        d_mlp: 20,
        ..cfg(Variant::Simple, 1)
    };
    let dst = Model::<f32>::new(wide, &mut Rng::new(2)).unwrap();
    let before = snapshot(&dst);
    match import_checkpoint(&export_checkpoint(&src), &dst, Strictness::Subset) {
        Err(Error::TensorShape { name, .. }) => assert_eq!(name, "block.0.mlp.0.weight"),
        other => panic!("{other:?}"),
    }
    assert_eq!(snapshot(&dst), before);
}

#[test]
fn strict_rejects_extras_and_subset_ignores_them() {
    let m = Model::<f32>::new(cfg(Variant::Simple, 1), &mut Rng::new(1)).unwrap();
    let mut ck = export_checkpoint(&m);
    ck.entries.push(Entry {
        name: "extra.thing".into(),
        dtype: simpletron::DType::F32,
        shape: vec![2],
        data: vec![0; 8],
    });
    assert!(matches!(import_checkpoint(&ck, &m, Strictness::Strict), Err(Error::Format(_))));
    let report = import_checkpoint(&ck, &m, Strictness::Subset).unwrap();
    assert_eq!(report.ignored, vec!["extra.thing".to_string()]);
}

#[test]
fn cross_precision_import_rounds_values() {
    let src = Model::<f64>::new(cfg(Variant::Simple, 1), &mut Rng::new(1)).unwrap();
    let dst = Model::<f32>::new(cfg(Variant::Simple, 1), &mut Rng::new(2)).unwrap();
    import_checkpoint(&export_checkpoint(&src), &dst, Strictness::Strict).unwrap();
    let a = src.params.tok_embed.to_vec();
    let b = dst.params.tok_embed.to_vec();
    assert!(a.iter().zip(&b).all(|(x, y)| *x as f32 == *y));
}

#[test]
fn kind_conversion_keeps_bytes_and_changes_outputs() {
    let m = Model::<f32>::new(cfg(Variant::SimpleResL, 2), &mut Rng::new(4)).unwrap();
    let soft = convert_attention_kind(&m, AttentionKind::Softmax).unwrap();
    assert_eq!(soft.cfg.scale, ScaleMode::InvSqrtD);
    assert_eq!(export_checkpoint(&soft).to_bytes(), export_checkpoint(&m).to_bytes());

    let x = m.params.tok_embed.select_rows(&[2, 3, 4, 5]).unwrap();
    let (q1, k1, v1) = project_qkv(&x, &m.params.blocks[0].attn).unwrap();
    let (q2, k2, v2) = project_qkv(&x, &soft.params.blocks[0].attn).unwrap();
    for (a, b) in [(q1, q2), (k1, k2), (v1, v2)] {
        assert_eq!(bits(a.to_vec()), bits(b.to_vec()));
    }

    let ids = [3, 4, 5, 6, 7];
    let simple_out = m.classify(&ids, None).unwrap().to_vec();
    let soft_out = soft.classify(&ids, None).unwrap().to_vec();
    assert!(simple_out.iter().zip(&soft_out).any(|(a, b)| (a - b).abs() > 1e-6));

    let back = convert_attention_kind(&soft, AttentionKind::Simple).unwrap();
    assert_eq!(back.cfg.scale, ScaleMode::InvSqrtL);
    assert_eq!(bits(back.classify(&ids, None).unwrap().to_vec()), bits(simple_out));
}

#[test]
fn conversion_copies_rather_than_shares() {
    let m = Model::<f32>::new(cfg(Variant::Simple, 1), &mut Rng::new(4)).unwrap();
    let soft = convert_attention_kind(&m, AttentionKind::Softmax).unwrap();
    soft.params.head.weight.update_data(|d| d.fill(0.0));
    assert!(m.params.head.weight.to_vec().iter().any(|&x| x != 0.0));
}

#[test]
fn conversion_rejects_width_mismatch_without_output_layer() {
    let wide = ModelConfig {
        d_hidden: 12,
        ..cfg(Variant::SimpleResL, 1)
    };
    let m = Model::<f32>::new(wide, &mut Rng::new(0)).unwrap();
    let mut broken = m.clone();
    broken.cfg.variant = Variant::Simple;
    assert!(matches!(convert_attention_kind(&broken, AttentionKind::Softmax), Err(Error::Config(_))));
}

fn majority() -> simpletron::tasks::Dataset {
    gen_majority_classification(&MajoritySpec::new(14, 16, 3), 200, &mut Rng::new(5)).unwrap()
}

#[test]
fn frozen_qkv_tensors_survive_training_bitwise() {
    let m = Model::<f32>::new(cfg(Variant::SimpleRes, 2), &mut Rng::new(6)).unwrap();
    let frozen = freeze(&m, &FreezeSet::qkv()).unwrap();
    assert_eq!(frozen.len(), 2 * 6);
    let before = snapshot(&m);
    train(&m, &majority(), None, &TrainConfig::new(ScheduleConfig::desk(100)), &Rng::new(7), |_| {
        ControlFlow::Continue(())
    })
    .unwrap();
    for ((name, after), (_, prior)) in snapshot(&m).iter().zip(&before) {
        let is_frozen = frozen.contains(name);
        assert_eq!(after == prior, is_frozen, "{name}");
    }
}

#[test]
fn freezing_everything_makes_training_a_no_op() {
    let m = Model::<f32>::new(cfg(Variant::SimpleRes, 1), &mut Rng::new(6)).unwrap();
    freeze(&m, &FreezeSet::new(["*"])).unwrap();
    assert_eq!(m.trainable_parameter_count(), 0);
    let before = snapshot(&m);
    train(&m, &majority(), None, &TrainConfig::new(ScheduleConfig::desk(10)), &Rng::new(7), |_| {
        ControlFlow::Continue(())
    })
    .unwrap();
    assert_eq!(snapshot(&m), before);
}

#[test]
fn qkv_freeze_removes_the_analytic_parameter_count() {
    for v in Variant::ALL {
        let c = ModelConfig {
            d_hidden: if v.output_linear() { 12 } else { 8 },
            ..cfg(v, 3)
        };
        let m = Model::<f32>::new(c.clone(), &mut Rng::new(0)).unwrap();
        let before = m.trainable_parameter_count();
        freeze(&m, &FreezeSet::qkv()).unwrap();
        let removed = c.n_blocks * 3 * (c.d_embed * c.d_hidden + c.d_hidden);
        assert_eq!(before - m.trainable_parameter_count(), removed, "{v:?}");
    }
}

#[test]
fn patterns_that_match_nothing_are_errors() {
    let m = Model::<f32>::new(cfg(Variant::Simple, 1), &mut Rng::new(0)).unwrap();
    match freeze(&m, &FreezeSet::new(["*.atn.q.*"])) {
        Err(Error::FreezeNoMatch(p)) => assert_eq!(p, "*.atn.q.*"),
        other => panic!("{other:?}"),
    }
    assert_eq!(m.trainable_parameter_count(), m.parameter_count());
    // Simple models have no output layer to freeze.
    assert!(freeze(&m, &FreezeSet::new(["*.attn.out.*"])).is_err());
}
