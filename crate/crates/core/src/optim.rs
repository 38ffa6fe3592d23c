//! AdamW, the warmup × inverse-square-root schedule, and the train/eval loops.

use std::collections::HashMap;
use std::ops::ControlFlow;
use std::time::Instant;

use crate::model::Model;
use crate::tasks::{batch, Batch, Dataset};
use crate::tensor::{cross_entropy_mean, no_grad, Element, Rng, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// Only weight matrices decay; biases, norms and embeddings do not.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

#[derive(Debug, Clone)]
pub struct OptimizerState<T: Element> {
    pub cfg: AdamWConfig,
    /// Number of steps taken so far.
    pub t: u64,
    moments: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        OptimizerState {
            cfg,
            t: 0,
            moments: HashMap::new(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<(&[T], &[T])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// One decoupled-decay Adam update of every parameter that requires grad:
///
/// ```text
/// m ← β₁m + (1−β₁)g        v ← β₂v + (1−β₂)g²
/// p ← p − lr·( m̂/(√v̂ + eps) + wd·p )
/// ```
pub fn adamw_step<T: Element>(params: &[(String, Tensor<T>)], st: &mut OptimizerState<T>, lr: f64) -> Result<()> {
    let trainable: Vec<_> = params.iter().filter(|(_, p)| p.requires_grad()).collect();
    let grads = trainable
        .iter()
        .map(|(name, p)| p.grad().ok_or_else(|| Error::MissingGrad(name.clone())))
        .collect::<Result<Vec<_>>>()?;
    st.t += 1;
    let c = st.cfg;
    let bc1 = 1.0 - c.beta1.powi(st.t as i32);
    let bc2 = 1.0 - c.beta2.powi(st.t as i32);
    let (b1, b2) = (T::cast(c.beta1), T::cast(c.beta2));
    let (one, lr_t) = (T::one(), T::cast(lr));
    for ((name, p), g) in trainable.into_iter().zip(grads) {
        let (m, v) = st
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![T::zero(); p.len()], vec![T::zero(); p.len()]));
        let wd = T::cast(if decays(name) { c.weight_decay } else { 0.0 });
        p.update_data(|data| {
            for i in 0..data.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / T::cast(bc1);
                let v_hat = v[i] / T::cast(bc2);
                data[i] = data[i] - lr_t * (m_hat / (v_hat.sqrt() + T::cast(c.eps)) + wd * data[i]);
            }
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub accumulation: usize,
    pub batch_size: usize,
}

impl ScheduleConfig {
    /// Long-sequence classification at full scale.
    pub fn paper_classification() -> Self {
        ScheduleConfig {
            base_lr: 0.05,
            warmup_steps: 8000,
            total_steps: 20_000,
            accumulation: 1,
            batch_size: 32,
        }
    }

    pub fn paper_matching() -> Self {
        ScheduleConfig {
            total_steps: 15_000,
            ..Self::paper_classification()
        }
    }

    pub fn paper_listops() -> Self {
        ScheduleConfig {
            base_lr: 0.005,
            warmup_steps: 1000,
            total_steps: 15_000,
            accumulation: 1,
            batch_size: 32,
        }
    }

    /// Short runs: peak learning rate 1e-3 reached after 200 steps.
    pub fn desk(total_steps: usize) -> Self {
        let warmup = 200.min(total_steps.max(1));
        ScheduleConfig {
            base_lr: 1e-3 * (warmup as f64).sqrt(),
            warmup_steps: warmup,
            total_steps,
            accumulation: 1,
            batch_size: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.accumulation == 0 || self.batch_size == 0 {
            return Err(Error::Config("accumulation and batch_size must be at least 1".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// `base · min(1, step/warmup) / √max(step, warmup)`; steps count from 1.
pub fn lr_at_step(step: usize, sc: &ScheduleConfig) -> Result<f64> {
    if step == 0 {
        return Err(Error::ZeroStep);
    }
    let (s, w) = (step as f64, sc.warmup_steps as f64);
    let ramp = if sc.warmup_steps == 0 { 1.0 } else { (s / w).min(1.0) };
    Ok(sc.base_lr * ramp / s.max(w).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub schedule: ScheduleConfig,
    pub adamw: AdamWConfig,
    /// Rescale gradients to this global L2 norm when exceeded.
    pub clip_norm: Option<f64>,
    /// Evaluate on the held-out set every this many steps (0: never).
    pub eval_every: usize,
    pub eval_batch_size: usize,
    /// Attach per-block attention std to evaluation rows.
    pub diagnostics: bool,
}

impl TrainConfig {
    pub fn new(schedule: ScheduleConfig) -> Self {
        TrainConfig {
            schedule,
            adamw: AdamWConfig::default(),
            clip_norm: None,
            eval_every: 0,
            eval_batch_size: 64,
            diagnostics: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub loss: f64,
}

/// What a training hook sees after each optimizer step.
#[derive(Debug, Clone)]
pub struct StepInfo {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
    pub eval: Option<EvalResult>,
    pub block_std: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub rows: Vec<MetricRow>,
    pub steps_run: usize,
}

impl TrainHistory {
    pub fn last_eval(&self) -> Option<&MetricRow> {
        self.rows.iter().rev().find(|r| r.split == "eval")
    }

    pub fn best_eval_accuracy(&self) -> Option<f64> {
        self.rows.iter().filter(|r| r.split == "eval").map(|r| r.accuracy).reduce(f64::max)
    }
}

fn correct<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let data = logits.data();
    let c = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &label)| {
            let row = &data[i * c..(i + 1) * c];
            let arg = (0..c).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            arg == label
        })
        .count()
}

/// Backpropagates `mean_loss / k` for each of the `k` micro-batches, so the
/// accumulated gradient equals that of their union. Returns the mean loss
/// and accuracy over all examples.
pub fn accumulate_gradients<T: Element>(
    model: &Model<T>,
    micro_batches: &[Batch],
    mut dropout: Option<&mut Rng>,
) -> Result<(f64, f64)> {
    let k = micro_batches.len();
    let (mut loss_sum, mut hits, mut n) = (0.0, 0, 0);
    for b in micro_batches {
        let logits = model.logits(b, dropout.as_deref_mut())?;
        let loss = cross_entropy_mean(&logits, &b.labels)?;
        loss_sum += loss.item().widen() * b.len() as f64;
        hits += correct(&logits, &b.labels);
        n += b.len();
        // Nothing to differentiate when every parameter is frozen.
        if loss.requires_grad() {
            loss.scale(T::cast(1.0 / k as f64)).backward()?;
        }
    }
    Ok((loss_sum / n as f64, hits as f64 / n as f64))
}

fn clip_gradients<T: Element>(params: &[(String, Tensor<T>)], max_norm: f64) {
    let norm = params
        .iter()
        .filter_map(|(_, p)| p.grad())
        .flatten()
        .map(|g| g.widen() * g.widen())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::cast(max_norm / norm);
        for (_, p) in params {
            p.update_grad(|g| g.iter_mut().for_each(|x| *x = *x * s));
        }
    }
}

/// Cycles through a dataset in reshuffled epochs.
struct Sampler {
    order: Vec<usize>,
    cursor: usize,
    rng: Rng,
}

impl Sampler {
    fn new(n: usize, rng: Rng) -> Self {
        Sampler {
            order: (0..n).collect(),
            cursor: n,
            rng,
        }
    }

    fn next(&mut self, k: usize) -> Vec<usize> {
        (0..k)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.rng.shuffle(&mut self.order);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

/// Runs `cfg.schedule.total_steps` optimizer steps unless a hook breaks
/// early. Each step draws `accumulation` micro-batches of `batch_size`
/// examples. Frozen parameters (not requiring grad) are never touched.
pub fn train<T: Element>(
    model: &Model<T>,
    data: &Dataset,
    held_out: Option<&Dataset>,
    cfg: &TrainConfig,
    rng: &Rng,
    mut hook: impl FnMut(&StepInfo) -> ControlFlow<()>,
) -> Result<TrainHistory> {
    if data.is_empty() || held_out.is_some_and(Dataset::is_empty) {
        return Err(Error::EmptyDataset);
    }
    let sc = &cfg.schedule;
    sc.validate()?;
    let params = model.named_parameters();
    let mut state = OptimizerState::new(cfg.adamw);
    let mut sampler = Sampler::new(data.len(), rng.split(1));
    let mut dropout = rng.split(2);
    let max_len = model.cfg.max_len;
    let start = Instant::now();
    let mut history = TrainHistory::default();
    let probe = match held_out {
        Some(h) if cfg.diagnostics => Some(batch(&h.examples[..h.len().min(16)], max_len)?),
        _ => None,
    };

    for step in 1..=sc.total_steps {
        let lr = lr_at_step(step, sc)?;
        let micro = (0..sc.accumulation)
            .map(|_| {
                let picked: Vec<_> = sampler.next(sc.batch_size).into_iter().map(|i| data.examples[i].clone()).collect();
                batch(&picked, max_len)
            })
            .collect::<Result<Vec<_>>>()?;
        let (loss, accuracy) = accumulate_gradients(model, &micro, Some(&mut dropout))?;
        if let Some(max_norm) = cfg.clip_norm {
            clip_gradients(&params, max_norm);
        }
        adamw_step(&params, &mut state, lr)?;
        model.zero_grad();

        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        history.rows.push(MetricRow {
            step,
            split: "train".into(),
            loss,
            accuracy,
            lr,
            wall_ms,
        });
        let mut info = StepInfo {
            step,
            lr,
            loss,
            accuracy,
            eval: None,
            block_std: None,
        };
        let eval_now = cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == sc.total_steps);
        if let (Some(h), true) = (held_out, eval_now) {
            let r = evaluate(model, h, cfg.eval_batch_size)?;
            history.rows.push(MetricRow {
                step,
                split: "eval".into(),
                loss: r.loss,
                accuracy: r.accuracy,
                lr,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
            info.eval = Some(r);
            if let Some(p) = &probe {
                info.block_std = Some(model.attention_std(p)?);
            }
        }
        history.steps_run = step;
        if hook(&info).is_break() {
            break;
        }
    }
    Ok(history)
}

/// Accuracy and mean cross-entropy with dropout off and no graph recorded.
pub fn evaluate<T: Element>(model: &Model<T>, data: &Dataset, batch_size: usize) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    no_grad(|| {
        let (mut loss_sum, mut hits) = (0.0, 0);
        for chunk in data.examples.chunks(batch_size.max(1)) {
            let b = batch(chunk, model.cfg.max_len)?;
            let logits = model.logits(&b, None)?;
            loss_sum += cross_entropy_mean(&logits, &b.labels)?.item().widen() * b.len() as f64;
            hits += correct(&logits, &b.labels);
        }
        Ok(EvalResult {
            accuracy: hits as f64 / data.len() as f64,
            loss: loss_sum / data.len() as f64,
        })
    })
}
