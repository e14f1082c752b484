//! Teacher pretraining on full clips and joint student training of the
//! captioner and end detector.

mod loss;
mod optim;

pub use loss::{
    caption_ce_loss, caption_objective, combined_loss, detection_label, detection_loss, distill_kl_loss,
    sample_emission_time, smoothed_target, word_accuracy,
};
pub use optim::{Adam, AdamConfig};

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::compute::{softmax_in_place, Graph, ParamStore};
use crate::data::{EventData, FramePeriods, Until};
use crate::error::{config_err, contract_err, Error, Result};
use crate::eval::{corpus_bleu, corpus_eval, window_word_accuracy, HistoryRow};
use crate::model::{is_detector_param, Model, ModelConfig, DETECTOR_PREFIX};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub sim_threshold: f64,
    pub label_smoothing: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Threshold and beam width of the per-epoch validation run.
    pub eval_threshold: f64,
    pub eval_beam: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0 / 3.0,
            beta: 1.0 / 3.0,
            gamma: 1.0 / 3.0,
            sim_threshold: 0.6,
            label_smoothing: 0.1,
            adam: AdamConfig::default(),
            batch_size: 16,
            epochs: 20,
            seed: 0,
            checkpoint_every: 5,
            eval_threshold: 0.5,
            eval_beam: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(config_err!("loss weights must be nonnegative, got {w:?}"));
        }
        if !(self.sim_threshold > 0.0 && self.sim_threshold <= 1.0) {
            return Err(config_err!("similarity threshold S={} must lie in (0, 1]", self.sim_threshold));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(config_err!("label smoothing {} must lie in [0, 1)", self.label_smoothing));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) || self.adam.clip <= 0.0 {
            return Err(config_err!("learning rate and clip norm must be positive"));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(config_err!("epochs must be at least 1"));
        }
        if !(self.eval_threshold > 0.0 && self.eval_threshold < 1.0) {
            return Err(config_err!("eval threshold {} must lie in (0, 1)", self.eval_threshold));
        }
        if self.eval_beam == 0 {
            return Err(config_err!("eval beam width must be at least 1"));
        }
        Ok(())
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub best: Model<f32>,
    pub best_epoch: usize,
    pub history: Vec<HistoryRow>,
}

/// Loss components of one event, already weighted into `total`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EventLosses {
    pub ce: f64,
    pub kl: f64,
    pub d: f64,
    pub total: f64,
}

type Grads = HashMap<String, Vec<f32>>;

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn dists_of(ls: &crate::compute::Tensor<f32>) -> Vec<Vec<f64>> {
    (0..ls.rows())
        .map(|r| {
            let mut row: Vec<f64> = ls.row(r).iter().map(|&x| x as f64).collect();
            softmax_in_place(&mut row);
            row
        })
        .collect()
}

/// Forward and backward pass of the caption objective on one window, plus
/// the detector loss when `label` is given.
#[allow(clippy::too_many_arguments)]
fn event_grads(
    model: &Model<f32>,
    audio: &crate::compute::Tensor<f32>,
    visual: &crate::compute::Tensor<f32>,
    reference: &[usize],
    teacher: Option<&[Vec<f64>]>,
    label: Option<u8>,
    cfg: &TrainConfig,
    dropout_seed: u64,
) -> Result<(Grads, EventLosses)> {
    let mut g = Graph::training(model.config.dropout, dropout_seed);
    let (input, target) = model.forcing_pair(reference)?;
    let enc = model.encode_in(&mut g, audio, visual, None, None)?;
    let logits = model.decoder_logits_in(&mut g, &enc, &input)?;
    let ls = g.log_softmax(logits)?;
    let (alpha, beta) = if label.is_some() { (cfg.alpha, cfg.beta) } else { (1.0, 0.0) };
    let mut total = caption_objective(&mut g, ls, &target, teacher, cfg.label_smoothing, alpha, beta)?;
    let probs = dists_of(g.value(ls));
    let mut losses = EventLosses {
        ce: caption_ce_loss(&probs, &target, cfg.label_smoothing)?,
        kl: match teacher {
            Some(t) => distill_kl_loss(t, &probs)?,
            None => 0.0,
        },
        ..EventLosses::default()
    };
    if let Some(d) = label {
        let p = model.detect_in(&mut g, &enc)?;
        let bce = g.bce(p, d as f64)?;
        losses.d = g.value(bce).data()[0] as f64;
        let weighted = g.scale(bce, cfg.gamma as f32);
        total = g.add(total, weighted)?;
    }
    losses.total = g.value(total).data()[0] as f64;
    if !losses.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {}", losses.total)));
    }
    g.backward(total)?;
    Ok((g.param_grads(), losses))
}

/// Sums per-event gradients in event order and averages them.
fn reduce(results: Vec<(Grads, EventLosses)>) -> (Grads, EventLosses, usize) {
    let n = results.len();
    let mut sum: Grads = HashMap::new();
    let mut l = EventLosses::default();
    for (grads, el) in results {
        for (k, v) in grads {
            match sum.get_mut(&k) {
                Some(acc) => acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b),
                None => {
                    sum.insert(k, v);
                }
            }
        }
        l.ce += el.ce;
        l.kl += el.kl;
        l.d += el.d;
        l.total += el.total;
    }
    let inv = 1.0 / n.max(1) as f32;
    sum.values_mut().for_each(|v| v.iter_mut().for_each(|x| *x *= inv));
    (sum, l, n)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64, u64::MAX)));
    idx
}

fn training_error(what: &str, epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::Numeric(m) | Error::Training(m) => Error::Training(format!("{what} epoch {epoch} step {step}: {m}")),
        e => e,
    }
}

/// Greedy or beam captions of full windows.
pub fn full_window_captions(
    model: &Model<f32>,
    events: &[EventData],
    periods: FramePeriods,
    beam: usize,
) -> Result<Vec<Vec<usize>>> {
    events
        .par_iter()
        .map(|ev| {
            let w = ev.window(Until::Full, periods)?;
            model.decode(&model.encode(&w.audio, &w.visual)?, beam)
        })
        .collect()
}

/// Validation metrics of an offline captioner on full windows.
pub fn offline_metrics(model: &Model<f32>, events: &[EventData], periods: FramePeriods, beam: usize) -> Result<(f64, f64, f64)> {
    let caps = full_window_captions(model, events, periods, beam)?;
    let pairs: Vec<(Vec<usize>, Vec<usize>)> =
        caps.into_iter().zip(events).map(|(c, e)| (c, e.record.caption.clone())).collect();
    let accs: Vec<f64> = events
        .par_iter()
        .map(|ev| window_word_accuracy(model, ev, Until::Full, periods))
        .collect::<Result<_>>()?;
    Ok((
        corpus_bleu(&pairs, 3),
        corpus_bleu(&pairs, 4),
        accs.iter().sum::<f64>() / accs.len() as f64,
    ))
}

fn check_split(train: &[EventData], valid: &[EventData], c: &ModelConfig) -> Result<()> {
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Data("training and validation splits must be nonempty".into()));
    }
    for ev in train.iter().chain(valid) {
        if ev.clip.audio.cols() != c.d_audio || ev.clip.visual.cols() != c.d_visual {
            return Err(Error::Data(format!(
                "event {}: features {}x{} do not match model widths {}x{}",
                ev.record.id,
                ev.clip.audio.cols(),
                ev.clip.visual.cols(),
                c.d_audio,
                c.d_visual
            )));
        }
        if ev.record.caption.is_empty() || ev.record.caption.len() >= c.max_decode_len {
            return Err(Error::Data(format!(
                "event {}: caption of {} tokens does not fit max_decode_len {}",
                ev.record.id,
                ev.record.caption.len(),
                c.max_decode_len
            )));
        }
    }
    Ok(())
}

/// Trains the captioner on full windows with label-smoothed cross entropy.
/// The detector parameters exist but are left untouched. `on_epoch` sees
/// the model after every epoch.
pub fn train_teacher(
    train: &[EventData],
    valid: &[EventData],
    config: ModelConfig,
    cfg: &TrainConfig,
    periods: FramePeriods,
    mut on_epoch: impl FnMut(usize, &Model<f32>, &HistoryRow) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    config.validate()?;
    check_split(train, valid, &config)?;
    let mut model = Model::<f32>::init(config, cfg.seed)?;
    let windows = train
        .iter()
        .map(|ev| ev.window(Until::Full, periods))
        .collect::<Result<Vec<_>>>()?;
    let mut adam = Adam::new(cfg.adam.clone());
    let mut history = Vec::new();
    let mut best: Option<(f64, f64, usize, Model<f32>)> = None;
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut sum_ce = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<(Grads, EventLosses)> = batch
                .par_iter()
                .map(|&i| {
                    let w = &windows[i];
                    event_grads(
                        &model,
                        &w.audio,
                        &w.visual,
                        &train[i].record.caption,
                        None,
                        None,
                        cfg,
                        mix(cfg.seed, epoch as u64, i as u64),
                    )
                })
                .collect::<Result<_>>()
                .map_err(|e| training_error("teacher", epoch, step + 1, e))?;
            let (grads, l, _) = reduce(results);
            sum_ce += l.ce;
            adam.update(&mut model.params, &grads)
                .map_err(|e| training_error("teacher", epoch, step + 1, e))?;
        }
        let (bleu3, bleu4, word_acc) = offline_metrics(&model, valid, periods, cfg.eval_beam)?;
        let row = HistoryRow {
            epoch,
            latency_ratio: 1.0,
            bleu3,
            bleu4,
            word_acc,
            loss_ce: sum_ce / train.len() as f64,
            loss_kl: 0.0,
            loss_d: 0.0,
        };
        on_epoch(epoch, &model, &row)?;
        if best.as_ref().is_none_or(|b| (bleu4, word_acc) > (b.0, b.1)) {
            best = Some((bleu4, word_acc, epoch, model.clone()));
        }
        history.push(row);
    }
    let (_, _, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome { model, best, best_epoch, history })
}

/// Student initialization: the teacher's captioner with a fresh detector.
pub fn student_from_teacher(teacher: &Model<f32>, seed: u64) -> Result<Model<f32>> {
    let det = Model::<f32>::init_detector(&teacher.config, seed)?;
    let mut params = ParamStore::new();
    for (name, t) in teacher.params.iter() {
        if is_detector_param(name) {
            let fresh = det
                .get(name)
                .ok_or_else(|| contract_err!("detector parameter {name} missing from fresh init"))?;
            params.insert(name, fresh.clone())?;
        } else {
            params.insert(name, t.clone())?;
        }
    }
    debug_assert!(params.names().iter().any(|n| n.starts_with(DETECTOR_PREFIX)));
    Model::from_parts(teacher.config.clone(), params)
}

/// Teacher-forced agreement of `model` with `reference` on a window.
pub fn sim_word_accuracy(model: &Model<f32>, reference: &[usize], enc: &crate::model::Encodings<f32>) -> Result<f64> {
    let tf = model.teacher_forced_predictions(reference, enc)?;
    let (_, target) = model.forcing_pair(reference)?;
    word_accuracy(&tf.argmax, &target)
}

/// Jointly trains captioner and detector with `α·CE + β·KL + γ·BCE` on
/// windows truncated at a fresh `T_o` per event and epoch. Every training
/// record must carry its teacher caption.
pub fn train_student(
    train: &[EventData],
    valid: &[EventData],
    teacher: &Model<f32>,
    cfg: &TrainConfig,
    periods: FramePeriods,
    mut on_epoch: impl FnMut(usize, &Model<f32>, &HistoryRow) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_split(train, valid, &teacher.config)?;
    let teacher_caps: Vec<&Vec<usize>> = train
        .iter()
        .map(|ev| {
            ev.record
                .teacher_caption
                .as_ref()
                .ok_or_else(|| contract_err!("event {} has no cached teacher caption", ev.record.id))
        })
        .collect::<Result<_>>()?;
    let teacher_dists: Vec<Vec<Vec<f64>>> = train
        .par_iter()
        .map(|ev| {
            let w = ev.window(Until::Full, periods)?;
            let enc = teacher.encode(&w.audio, &w.visual)?;
            Ok(teacher.teacher_forced_predictions(&ev.record.caption, &enc)?.dists)
        })
        .collect::<Result<_>>()?;
    let mut model = student_from_teacher(teacher, cfg.seed)?;
    let mut adam = Adam::new(cfg.adam.clone());
    let mut history = Vec::new();
    let mut best: Option<(f64, f64, usize, Model<f32>)> = None;
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut sums = EventLosses::default();
        let mut seen = 0usize;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<Option<(Grads, EventLosses)>> = batch
                .par_iter()
                .map(|&i| {
                    let ev = &train[i];
                    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed ^ 0x5eed, epoch as u64, i as u64));
                    let Some(t_o) = sample_emission_time(ev.record.t_start, ev.record.t_end, periods.visual, &mut rng)
                    else {
                        return Ok(None);
                    };
                    let w = ev.window(Until::At(t_o), periods)?;
                    let enc = model.encode(&w.audio, &w.visual)?;
                    let sim_gt = sim_word_accuracy(&model, &ev.record.caption, &enc)?;
                    let tc = teacher_caps[i];
                    let sim_t = if tc.is_empty() || tc.len() >= model.config.max_decode_len {
                        0.0
                    } else {
                        sim_word_accuracy(&model, tc, &enc)?
                    };
                    let d = detection_label(sim_gt, sim_t, cfg.sim_threshold);
                    event_grads(
                        &model,
                        &w.audio,
                        &w.visual,
                        &ev.record.caption,
                        Some(&teacher_dists[i]),
                        Some(d),
                        cfg,
                        mix(cfg.seed, epoch as u64, i as u64),
                    )
                    .map(Some)
                })
                .collect::<Result<_>>()
                .map_err(|e| training_error("student", epoch, step + 1, e))?;
            let (grads, l, n) = reduce(results.into_iter().flatten().collect());
            if n == 0 {
                continue;
            }
            seen += n;
            sums.ce += l.ce;
            sums.kl += l.kl;
            sums.d += l.d;
            adam.update(&mut model.params, &grads)
                .map_err(|e| training_error("student", epoch, step + 1, e))?;
        }
        let ce = corpus_eval(&model, valid, periods, cfg.eval_threshold, cfg.eval_beam)?;
        let n = seen.max(1) as f64;
        let row = HistoryRow {
            epoch,
            latency_ratio: ce.row.latency_ratio,
            bleu3: ce.row.bleu3,
            bleu4: ce.row.bleu4,
            word_acc: ce.row.word_acc,
            loss_ce: sums.ce / n,
            loss_kl: sums.kl / n,
            loss_d: sums.d / n,
        };
        on_epoch(epoch, &model, &row)?;
        // Highest BLEU-4, ties broken by lower latency.
        if best.as_ref().is_none_or(|b| (row.bleu4, -row.latency_ratio) > (b.0, b.1)) {
            best = Some((row.bleu4, -row.latency_ratio, epoch, model.clone()));
        }
        history.push(row);
    }
    let (_, _, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome { model, best, best_epoch, history })
}
