use proptest::prelude::*;
use simpletron::tasks::{
    batch, gen_listops, gen_majority_classification, gen_matching_pairs, listops_tokens_to_string,
    read_dataset, uniform_sequences, unbatch, write_dataset, Example, ListOpsSpec, MajoritySpec,
};
use simpletron::{Error, Rng};

/// Stack evaluator over the bracket string form, sharing no code with the
/// generator or its parser.
fn stack_eval(s: &str) -> u32 {
    let mut stack: Vec<(String, Vec<u32>)> = vec![("ROOT".into(), vec![])];
    for word in s.split_whitespace() {
        if let Some(op) = word.strip_prefix('[') {
            stack.push((op.to_string(), vec![]));
        } else if word == "]" {
            let (op, mut args) = stack.pop().unwrap();
            let v = match op.as_str() {
                "MAX" => *args.iter().max().unwrap(),
                "MIN" => *args.iter().min().unwrap(),
                "MED" => {
                    args.sort();
                    args[(args.len() - 1) / 2]
                }
                "SM" => args.iter().sum::<u32>() % 10,
                other => panic!("operator {other}"),
            };
            stack.last_mut().unwrap().1.push(v);
        } else {
            stack.last_mut().unwrap().1.push(word.parse().unwrap());
        }
    }
    assert_eq!(stack.len(), 1);
    stack[0].1[0]
}

#[test]
fn listops_labels_match_an_independent_evaluator() {
    let spec = ListOpsSpec::default();
    let ds = gen_listops(&spec, 2000, &mut Rng::new(1)).unwrap();
    for e in &ds.examples {
        let text = listops_tokens_to_string(&e.tokens);
        assert_eq!(stack_eval(&text) as usize, e.label, "{text}");
        assert!(e.tokens.len() <= spec.max_length);
    }
    // Every digit occurs as a label.
    assert!(ds.label_counts().iter().all(|&c| c > 0));
}

#[test]
fn generators_are_pure_functions_of_the_seed() {
    let spec = ListOpsSpec::default();
    assert_eq!(
        gen_listops(&spec, 50, &mut Rng::new(9)).unwrap(),
        gen_listops(&spec, 50, &mut Rng::new(9)).unwrap()
    );
    assert_ne!(
        gen_listops(&spec, 50, &mut Rng::new(9)).unwrap(),
        gen_listops(&spec, 50, &mut Rng::new(10)).unwrap()
    );
    let m = MajoritySpec::new(34, 64, 4);
    assert_eq!(
        gen_majority_classification(&m, 50, &mut Rng::new(3)).unwrap(),
        gen_majority_classification(&m, 50, &mut Rng::new(3)).unwrap()
    );
}

#[test]
fn majority_labels_are_uniform() {
    let n = 10_000;
    let spec = MajoritySpec::new(34, 32, 4);
    let ds = gen_majority_classification(&spec, n, &mut Rng::new(2)).unwrap();
    let p = 0.25;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for c in ds.label_counts() {
        assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "{c}");
    }
    for e in &ds.examples {
        assert_eq!(spec.plurality(&e.tokens), Some(e.label));
    }
}

#[test]
fn matching_labels_are_balanced_and_negatives_differ() {
    let n = 10_000;
    let ds = gen_matching_pairs(uniform_sequences(2..34, 32), 2..34, 0.1, n, &mut Rng::new(4)).unwrap();
    let positives = ds.examples.iter().filter(|e| e.label == 1).count();
    let sigma = (n as f64 * 0.25).sqrt();
    assert!((positives as f64 - n as f64 / 2.0).abs() <= 3.0 * sigma);
    for e in &ds.examples {
        let b = e.tokens_b.as_ref().unwrap();
        let changed = e.tokens.iter().zip(b).filter(|(x, y)| x != y).count();
        if e.label == 1 {
            assert!(changed <= 3);
        } else {
            assert!(changed > 0, "identical negative pair");
        }
    }
}

#[test]
fn impossible_specs_are_rejected() {
    let tight = ListOpsSpec {
        max_length: 2,
        ..ListOpsSpec::default()
    };
    assert!(matches!(gen_listops(&tight, 1, &mut Rng::new(0)), Err(Error::Config(_))));
    let uneven = MajoritySpec::new(13, 8, 4);
    assert!(matches!(gen_majority_classification(&uneven, 1, &mut Rng::new(0)), Err(Error::Config(_))));
    let bad_rate = gen_matching_pairs(uniform_sequences(2..5, 4), 2..5, 1.0, 1, &mut Rng::new(0));
    assert!(bad_rate.is_err());
}

#[test]
fn equal_lengths_give_full_masks() {
    let ex: Vec<_> = (0..4).map(|i| Example::single(vec![2 + i; 6], 0)).collect();
    let b = batch(&ex, 7).unwrap();
    assert!(b.mask.iter().flatten().all(|&m| m));
    assert_eq!(b.width(), 7);
}

#[test]
fn pair_batches_pad_each_side_separately() {
    let ex = vec![
        Example {
            tokens: vec![2, 3],
            tokens_b: Some(vec![4, 5, 6, 7]),
            label: 1,
        },
        Example {
            tokens: vec![8, 9, 10],
            tokens_b: Some(vec![11]),
            label: 0,
        },
    ];
    let b = batch(&ex, 8).unwrap();
    assert_eq!(b.width(), 4);
    assert_eq!(b.pair.as_ref().unwrap().ids[1], vec![0, 11, 1, 1, 1]);
    assert_eq!(unbatch(&b), ex);
    assert!(batch(&[ex[0].clone(), Example::single(vec![2], 0)], 8).is_err());
}

proptest! {
    #[test]
    fn batch_round_trip(
        seqs in prop::collection::vec((prop::collection::vec(2u32..50, 1..20), 0usize..5), 1..8)
    ) {
        let ex: Vec<Example> = seqs.into_iter().map(|(t, l)| Example::single(t, l)).collect();
        let b = batch(&ex, 21).unwrap();
        for (row, mask) in b.ids.iter().zip(&b.mask) {
            prop_assert_eq!(row[0], 0);
            let real = mask.iter().filter(|&&m| m).count();
            prop_assert!(mask[..real].iter().all(|&m| m));
            prop_assert!(row[real..].iter().all(|&t| t == 1));
        }
        prop_assert_eq!(unbatch(&b), ex.clone());

        let mut buf = Vec::new();
        let ds = simpletron::tasks::Dataset { examples: ex.clone(), n_classes: 5, vocab_size: 50 };
        write_dataset(&ds, &mut buf).unwrap();
        prop_assert_eq!(read_dataset(buf.as_slice()).unwrap().examples, ex);
    }
}

#[test]
fn text_format_is_stable() {
    let ex = vec![
        Example::single(vec![12, 2, 4, 16], 4),
        Example::single(vec![7], 5),
    ];
    let ds = simpletron::tasks::Dataset {
        examples: ex,
        n_classes: 10,
        vocab_size: 17,
    };
    let mut buf = Vec::new();
    write_dataset(&ds, &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "4\t12 2 4 16\n5\t7\n");
}
