use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::ops::ControlFlow;
use std::path::Path;

use simpletron::bench::{bench_scaling, write_bench_csv, write_metrics_csv, write_std_csv, BenchConfig};
use simpletron::model::{gradcheck_model, HeadKind, Model, ModelConfig};
use simpletron::optim::{evaluate, train as train_model, AdamWConfig, ScheduleConfig, TrainConfig};
use simpletron::tasks::{
    batch, gen_listops, gen_majority_classification, gen_matching_pairs, read_dataset, uniform_sequences, Dataset,
    ListOpsSpec, MajoritySpec,
};
use simpletron::transfer::{
    convert_attention_kind, export_checkpoint, freeze, import_checkpoint, reinit_trainable, Checkpoint, FreezeSet,
    Strictness,
};
use simpletron::{DType, Element, Rng};

use crate::config::{sidecar_path, ModelFile, RunConfig};
use crate::{usage, CliError};

type Outcome = Result<i32, CliError>;

/// Seed streams, kept apart so that changing one stage leaves the others.
const DATA_STREAM: u64 = 10;
const INIT_STREAM: u64 = 20;
const REINIT_STREAM: u64 = 30;
const TRAIN_STREAM: u64 = 40;

pub fn generate(cfg: &RunConfig, n: usize, rng: &mut Rng) -> Result<Dataset, CliError> {
    let ds = match cfg.task.as_str() {
        "majority" => {
            let spec = MajoritySpec {
                bias: cfg.majority_bias,
                ..MajoritySpec::new(cfg.vocab, cfg.length, cfg.classes)
            };
            gen_majority_classification(&spec, n, rng)?
        }
        "listops" => {
            let spec = ListOpsSpec {
                max_depth: cfg.listops_depth,
                max_args: cfg.listops_args,
                max_length: cfg.listops_max_length,
            };
            gen_listops(&spec, n, rng)?
        }
        "matching" => {
            if cfg.vocab < 3 {
                return Err(usage("matching needs vocab of at least 3"));
            }
            let symbols = 2..cfg.vocab as u32;
            gen_matching_pairs(uniform_sequences(symbols.clone(), cfg.length), symbols, cfg.match_rate, n, rng)?
        }
        other => return Err(usage(format!("unknown task `{other}` (majority, listops or matching)"))),
    };
    Ok(ds)
}

fn read_data_file(path: &str) -> Result<Dataset, CliError> {
    let f = File::open(path).map_err(|e| usage(format!("{path}: {e}")))?;
    Ok(read_dataset(BufReader::new(f))?)
}

/// Training and held-out sets, from files or generated from the seed.
fn load_data(cfg: &RunConfig, seed: Option<u64>) -> Result<(Dataset, Dataset), CliError> {
    let (train, test) = match (&cfg.data, &cfg.test_data) {
        (Some(d), Some(t)) => (read_data_file(d)?, read_data_file(t)?),
        (Some(d), None) => {
            let ds = read_data_file(d)?;
            if ds.len() <= cfg.n_test {
                return Err(usage(format!("{d} has {} examples, not more than n_test = {}", ds.len(), cfg.n_test)));
            }
            ds.split_tail(cfg.n_test)
        }
        (None, Some(_)) => return Err(usage("test_data given without data")),
        (None, None) => {
            let seed = seed.ok_or_else(|| usage("generated data needs --seed"))?;
            let mut rng = Rng::new(seed).split(DATA_STREAM);
            generate(cfg, cfg.n + cfg.n_test, &mut rng)?.split_tail(cfg.n_test)
        }
    };
    if train.is_pair() != test.is_pair() {
        return Err(usage("training and held-out data disagree on single vs pair examples"));
    }
    Ok((train, test))
}

fn model_config(cfg: &RunConfig, train: &Dataset, test: &Dataset) -> Result<ModelConfig, CliError> {
    let attention = cfg.attention.unwrap_or(cfg.variant.default_attention());
    let m = ModelConfig {
        variant: cfg.variant,
        attention,
        scale: cfg.scale.unwrap_or(attention.default_scale()),
        mask_mode: cfg.mask,
        n_blocks: cfg.blocks,
        n_heads: cfg.heads,
        d_embed: cfg.d_embed,
        d_hidden: cfg.d_hidden,
        d_mlp: cfg.d_mlp,
        vocab_size: train.vocab_size.max(test.vocab_size).max(3),
        max_len: train.max_true_length().max(test.max_true_length()) + 1,
        n_classes: train.n_classes.max(test.n_classes).max(2),
        dropout_p: cfg.dropout,
        activation: cfg.activation,
        skip_landing: cfg.skip_landing,
        head: if train.is_pair() { HeadKind::Pair } else { HeadKind::Single },
        ..ModelConfig::new(cfg.variant)
    };
    m.validate()?;
    Ok(m)
}

fn train_config(cfg: &RunConfig) -> Result<TrainConfig, CliError> {
    let mut sc = match cfg.schedule.as_str() {
        "desk" => {
            let mut s = ScheduleConfig::desk(cfg.steps);
            if let Some(w) = cfg.warmup {
                s.warmup_steps = w;
                s.base_lr = 1e-3 * (w.max(1) as f64).sqrt();
            }
            s
        }
        "classification" => ScheduleConfig::paper_classification(),
        "matching" => ScheduleConfig::paper_matching(),
        "listops" => ScheduleConfig::paper_listops(),
        other => return Err(usage(format!("unknown schedule `{other}`"))),
    };
    sc.total_steps = cfg.steps;
    if let Some(w) = cfg.warmup {
        sc.warmup_steps = w;
    }
    if let Some(lr) = cfg.lr {
        sc.base_lr = lr;
    }
    sc.batch_size = cfg.batch_size;
    sc.accumulation = cfg.accumulation;
    sc.validate()?;
    let mut tc = TrainConfig::new(sc);
    tc.adamw = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    tc.clip_norm = cfg.clip;
    tc.eval_every = cfg.eval_every;
    Ok(tc)
}

fn create(path: &str) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Output file, or stdout when no path is given.
fn sink(path: Option<&str>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

pub fn train(cfg: &RunConfig) -> Outcome {
    let seed = cfg.require_seed("train")?;
    let out = cfg.out.as_deref().ok_or_else(|| usage("train needs --out"))?;
    let (train_ds, test_ds) = load_data(cfg, Some(seed))?;
    let mut mf = match &cfg.model_config {
        Some(p) => ModelFile::load(Path::new(p))?,
        None => ModelFile {
            model: model_config(cfg, &train_ds, &test_ds)?,
            dtype: cfg.dtype,
            freeze: None,
        },
    };
    if cfg.freeze.is_some() {
        mf.freeze = cfg.freeze.clone();
    }
    eprintln!(
        "train: {} examples, {} held out, {} classes, max length {}",
        train_ds.len(),
        test_ds.len(),
        mf.model.n_classes,
        mf.model.max_len - 1
    );
    match mf.dtype {
        DType::F32 => train_typed::<f32>(cfg, &mf, seed, &train_ds, &test_ds, out),
        DType::F64 => train_typed::<f64>(cfg, &mf, seed, &train_ds, &test_ds, out),
    }
}

fn train_typed<T: Element>(
    cfg: &RunConfig,
    mf: &ModelFile,
    seed: u64,
    train_ds: &Dataset,
    test_ds: &Dataset,
    out: &str,
) -> Outcome {
    let root = Rng::new(seed);
    let model = Model::<T>::new(mf.model.clone(), &mut root.split(INIT_STREAM))?;
    if let Some(p) = &cfg.init {
        let report = import_checkpoint(&Checkpoint::load(p)?, &model, Strictness::Subset)?;
        eprintln!(
            "init: {} tensors loaded, {} kept fresh, {} ignored",
            report.filled.len(),
            report.unfilled.len(),
            report.ignored.len()
        );
    }
    if let Some(f) = &mf.freeze {
        let frozen = freeze(&model, &FreezeSet::parse(f))?;
        eprintln!("froze {} tensors", frozen.len());
    }
    if cfg.reinit {
        reinit_trainable(&model, &mut root.split(REINIT_STREAM))?;
    }
    let tc = train_config(cfg)?;
    let history = train_model(&model, train_ds, Some(test_ds), &tc, &root.split(TRAIN_STREAM), |info| {
        if let Some(e) = info.eval {
            eprintln!(
                "step {:>6}  lr {:.3e}  loss {:.4}  eval_loss {:.4}  eval_acc {:.4}",
                info.step, info.lr, info.loss, e.loss, e.accuracy
            );
            if cfg.target_accuracy.is_some_and(|t| e.accuracy >= t) {
                return ControlFlow::Break(());
            }
        }
        ControlFlow::Continue(())
    })?;
    export_checkpoint(&model).save(out)?;
    mf.save(Path::new(&sidecar_path(out)))?;
    let mut w = create(&format!("{out}.metrics.csv"))?;
    write_metrics_csv(&history.rows, &mut w)?;
    w.flush()?;
    let result = evaluate(&model, test_ds, tc.eval_batch_size)?;
    println!(
        "steps {}  test_accuracy {:.4}  test_loss {:.4}",
        history.steps_run, result.accuracy, result.loss
    );
    Ok(0)
}

fn load_model_file(cfg: &RunConfig, checkpoint: &str) -> Result<ModelFile, CliError> {
    let path = cfg.model_config.clone().unwrap_or_else(|| sidecar_path(checkpoint));
    ModelFile::load(Path::new(&path))
}

fn load_model<T: Element>(mf: &ModelFile, checkpoint: &str) -> Result<Model<T>, CliError> {
    let model = Model::<T>::new(mf.model.clone(), &mut Rng::new(0))?;
    import_checkpoint(&Checkpoint::load(checkpoint)?, &model, Strictness::Strict)?;
    Ok(model)
}

pub fn eval(cfg: &RunConfig) -> Outcome {
    let input = cfg.input.as_deref().ok_or_else(|| usage("eval needs --in"))?;
    let mf = load_model_file(cfg, input)?;
    let (_, test_ds) = load_data(cfg, cfg.seed)?;
    match mf.dtype {
        DType::F32 => eval_typed(cfg, &load_model::<f32>(&mf, input)?, &test_ds),
        DType::F64 => eval_typed(cfg, &load_model::<f64>(&mf, input)?, &test_ds),
    }
}

fn eval_typed<T: Element>(cfg: &RunConfig, model: &Model<T>, test_ds: &Dataset) -> Outcome {
    let result = evaluate(model, test_ds, 64)?;
    println!("examples {}  accuracy {:.4}  loss {:.4}", test_ds.len(), result.accuracy, result.loss);
    if let Some(p) = &cfg.std_out {
        let probe = batch(&test_ds.examples[..test_ds.len().min(64)], model.cfg.max_len)?;
        let stds = model.attention_std(&probe)?;
        let mut w = create(p)?;
        write_std_csv(&[(model.cfg.variant.name().to_string(), stds)], &mut w)?;
        w.flush()?;
    }
    Ok(0)
}

pub fn bench(cfg: &RunConfig) -> Outcome {
    let seed = cfg.require_seed("bench")?;
    let bc = BenchConfig {
        d_embed: cfg.d_embed,
        n_heads: cfg.heads,
        repeats: cfg.repeats,
        timing: cfg.timing,
        memory_budget_bytes: cfg.memory_budget_mb << 20,
        ..BenchConfig::new(cfg.kinds.clone(), cfg.lengths.clone(), seed)
    };
    let report = bench_scaling(&bc)?;
    let mut w = sink(cfg.out.as_deref())?;
    write_bench_csv(&report.records, &mut w)?;
    w.flush()?;
    for (kind, slope) in &report.slopes {
        match slope {
            Some(s) => eprintln!("slope {} {s:.3}", kind.name()),
            None => eprintln!("slope {} n/a", kind.name()),
        }
    }
    Ok(0)
}

pub fn transfer(cfg: &RunConfig) -> Outcome {
    let input = cfg.input.as_deref().ok_or_else(|| usage("transfer needs --in"))?;
    let out = cfg.out.as_deref().ok_or_else(|| usage("transfer needs --out"))?;
    let kind = cfg.to_kind.ok_or_else(|| usage("transfer needs --to-kind"))?;
    let mf = load_model_file(cfg, input)?;
    match mf.dtype {
        DType::F32 => transfer_typed(cfg, &load_model::<f32>(&mf, input)?, kind, mf.dtype, out),
        DType::F64 => transfer_typed(cfg, &load_model::<f64>(&mf, input)?, kind, mf.dtype, out),
    }
}

fn transfer_typed<T: Element>(
    cfg: &RunConfig,
    model: &Model<T>,
    kind: simpletron::attention::AttentionKind,
    dtype: DType,
    out: &str,
) -> Outcome {
    let converted = convert_attention_kind(model, kind)?;
    if let Some(f) = &cfg.freeze {
        let frozen = freeze(&converted, &FreezeSet::parse(f))?;
        eprintln!("transfer: {} tensors will stay frozen when training from {out}", frozen.len());
    }
    export_checkpoint(&converted).save(out)?;
    let mf = ModelFile {
        model: converted.cfg.clone(),
        dtype,
        freeze: cfg.freeze.clone(),
    };
    mf.save(Path::new(&sidecar_path(out)))?;
    println!(
        "{} -> {}: {} tensors written to {out}",
        model.cfg.attention.name(),
        kind.name(),
        converted.named_parameters().len()
    );
    Ok(0)
}

pub fn gen_data(cfg: &RunConfig) -> Outcome {
    let seed = cfg.require_seed("gen-data")?;
    let ds = generate(cfg, cfg.n, &mut Rng::new(seed).split(DATA_STREAM))?;
    let mut w = sink(cfg.out.as_deref())?;
    simpletron::tasks::write_dataset(&ds, &mut w)?;
    w.flush()?;
    if let Some(p) = &cfg.out {
        eprintln!("wrote {} examples to {p}", ds.len());
    }
    Ok(0)
}

pub fn gradcheck(cfg: &RunConfig, width: usize, seq_len: usize, tol: f64) -> Outcome {
    let attention = cfg.attention.unwrap_or(cfg.variant.default_attention());
    let heads = if width % cfg.heads == 0 { cfg.heads } else { 1 };
    let m = ModelConfig {
        attention,
        scale: cfg.scale.unwrap_or(attention.default_scale()),
        mask_mode: cfg.mask,
        n_blocks: cfg.blocks,
        n_heads: heads,
        d_embed: width,
        d_hidden: width,
        d_mlp: 2 * width,
        vocab_size: 12,
        max_len: seq_len + 1,
        n_classes: 3,
        activation: cfg.activation,
        skip_landing: cfg.skip_landing,
        ..ModelConfig::new(cfg.variant)
    };
    m.validate()?;
    let rows = gradcheck_model(&m, seq_len, cfg.seed.unwrap_or(0))?;
    let mut failed = 0;
    for r in &rows {
        let ok = r.passes(tol);
        failed += usize::from(!ok);
        println!(
            "{:<28} rel {:.3e}  abs {:.3e}  {}",
            r.name,
            r.rel_err,
            r.abs_err,
            if ok { "ok" } else { "FAIL" }
        );
    }
    println!("{} of {} tensors within {tol:e}", rows.len() - failed, rows.len());
    Ok(if failed == 0 { 0 } else { 2 })
}
