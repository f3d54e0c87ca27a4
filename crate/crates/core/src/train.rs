//! Objective, schedule, optimization loop and evaluation.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Adam, Grads, ParamStore, Tape};
use crate::config::{Ablation, Config, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{LossTerms, Model};
use crate::scene::Record;

/// `l_ref + λ1·l_t + λ2·l_v + λ3·(l_br + l_nr)`.
pub fn total_loss(l_ref: f64, l_t: f64, l_v: f64, l_br: f64, l_nr: f64, cfg: &TrainConfig) -> f64 {
    l_ref + cfg.lambda1 * l_t + cfg.lambda2 * l_v + cfg.lambda3 * (l_br + l_nr)
}

/// `lr0 · decay^d`, `d` = number of decay epochs `decay_start, decay_start +
/// decay_every, ..., ≤ decay_end` that are `≤ epoch`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let events = (cfg.decay_start..=cfg.decay_end).step_by(cfg.decay_every).filter(|&e| e <= epoch).count();
    cfg.lr0 * cfg.decay.powi(events as i32)
}

/// Component means over a set of records.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub reference: f64,
    pub text: f64,
    pub visual: f64,
    pub binary: f64,
    pub nary: f64,
}

impl LossBreakdown {
    fn add(&mut self, o: &LossBreakdown) {
        self.total += o.total;
        self.reference += o.reference;
        self.text += o.text;
        self.visual += o.visual;
        self.binary += o.binary;
        self.nary += o.nary;
    }

    fn scaled(mut self, s: f64) -> Self {
        for v in [&mut self.total, &mut self.reference, &mut self.text, &mut self.visual, &mut self.binary, &mut self.nary] {
            *v *= s;
        }
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    /// Wall clock; never serialized, so saved artifacts stay reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

fn record_loss(tape: &mut Tape, terms: &LossTerms, cfg: &TrainConfig) -> (crate::autograd::Var, LossBreakdown) {
    let mut parts = vec![(terms.reference, 1.0), (terms.text, cfg.lambda1), (terms.visual, cfg.lambda2)];
    parts.extend(terms.binary.map(|b| (b, cfg.lambda3)));
    parts.extend(terms.nary.map(|n| (n, cfg.lambda3)));
    let loss = tape.weighted_sum(&parts);
    let v = |x: Option<crate::autograd::Var>| x.map_or(0.0, |x| tape.value(x).item());
    let b = LossBreakdown {
        total: tape.value(loss).item(),
        reference: tape.value(terms.reference).item(),
        text: tape.value(terms.text).item(),
        visual: tape.value(terms.visual).item(),
        binary: v(terms.binary),
        nary: v(terms.nary),
    };
    (loss, b)
}

/// Gradient and loss of one record on a training tape.
pub fn record_gradient(
    model: &Model,
    params: &ParamStore,
    record: &Record,
    cfg: &TrainConfig,
    dropout_seed: u64,
) -> Result<(Grads, LossBreakdown, bool)> {
    let mut tape = Tape::training(params, dropout_seed);
    let out = model.forward(&mut tape, record, cfg.ablation)?;
    let terms = out.losses.expect("training tape yields losses");
    let (loss, breakdown) = record_loss(&mut tape, &terms, cfg);
    if !breakdown.total.is_finite() {
        return Err(Error::Divergence(format!("non-finite loss {breakdown:?} on scene seed {}", record.scene.seed)));
    }
    let correct = out.prediction == record.scene.target_id;
    Ok((tape.backward(loss).params, breakdown, correct))
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Trainer state that survives checkpointing.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub params: ParamStore,
    pub optimizer: Adam,
    pub epochs_done: usize,
    pub history: Vec<EpochStats>,
}

impl TrainState {
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.train.validate()?;
        let (model, params) = Model::new(cfg.model.clone(), cfg.gen.vocabulary()?)?;
        let optimizer = Adam::new(&params);
        Ok(Self { model, params, optimizer, epochs_done: 0, history: Vec::new() })
    }

    /// Order of training records for `epoch`, from a stream keyed by
    /// `(seed, epoch)`.
    pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64)));
        order
    }

    /// One pass over `train`. Per-record gradients are computed in parallel
    /// and summed in batch order, so results do not depend on the worker count.
    pub fn run_epoch(&mut self, train: &[Record], cfg: &TrainConfig) -> Result<(LossBreakdown, f64, usize)> {
        let epoch = self.epochs_done;
        let lr = lr_at(epoch, cfg);
        let order = Self::epoch_order(cfg.seed, epoch, train.len());
        let mut sum = LossBreakdown::default();
        let mut correct = 0usize;
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps > 0 && self.optimizer.steps() >= cfg.max_steps as u64 {
                break;
            }
            let results: Vec<Result<(Grads, LossBreakdown, bool)>> = batch
                .par_iter()
                .map(|&i| {
                    let seed = mix(mix(cfg.seed, epoch as u64), i as u64);
                    record_gradient(&self.model, &self.params, &train[i], cfg, seed)
                })
                .collect();
            let mut grads = self.params.zero_grads();
            for r in results {
                let (g, b, ok) = r?;
                grads.add_assign(&g);
                sum.add(&b);
                correct += usize::from(ok);
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.is_finite() {
                return Err(Error::Divergence(format!("non-finite gradient in epoch {epoch}")));
            }
            self.optimizer.step(&mut self.params, &grads, lr);
            steps += batch.len();
        }
        self.epochs_done += 1;
        let n = steps.max(1) as f64;
        Ok((sum.scaled(1.0 / n), correct as f64 / n, steps))
    }
}

/// Trains for `cfg.train.epochs` epochs (continuing from `state`), scoring
/// `val` after each epoch when given. `on_epoch` sees every finished epoch.
pub fn train(
    state: &mut TrainState,
    train_set: &[Record],
    val_set: Option<&[Record]>,
    cfg: &Config,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<()> {
    if train_set.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    while state.epochs_done < cfg.train.epochs {
        let start = Instant::now();
        let epoch = state.epochs_done;
        let lr = lr_at(epoch, &cfg.train);
        let (loss, train_acc, _) = state.run_epoch(train_set, &cfg.train)?;
        let val_acc = match val_set {
            Some(v) if !v.is_empty() => {
                Some(evaluate(&state.model, &state.params, v, cfg.train.ablation, cfg.train.hard_threshold)?.overall_acc)
            }
            _ => None,
        };
        let stats = EpochStats { epoch, lr, loss, train_acc, val_acc, seconds: start.elapsed().as_secs_f64() };
        on_epoch(&stats);
        state.history.push(stats);
        if cfg.train.max_steps > 0 && state.optimizer.steps() >= cfg.train.max_steps as u64 {
            break;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneResult {
    pub index: usize,
    pub predicted: usize,
    pub target: usize,
    pub rn: usize,
    pub distractors: usize,
    pub target_in_graph: bool,
    pub text_class_correct: bool,
}

impl SceneResult {
    pub fn correct(&self) -> bool {
        self.predicted == self.target
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub count: usize,
    pub overall_acc: f64,
    /// `None` when the split is empty.
    pub hard_acc: Option<f64>,
    pub easy_acc: Option<f64>,
    pub rn_ge2_acc: Option<f64>,
    pub rn_le1_acc: Option<f64>,
    pub hard_count: usize,
    pub easy_count: usize,
    pub rn_ge2_count: usize,
    pub rn_le1_count: usize,
    pub hard_threshold: usize,
    pub text_class_acc: f64,
    pub target_in_graph_rate: f64,
    pub history: Vec<EpochStats>,
    pub scenes: Vec<SceneResult>,
}

fn accuracy<'a>(rs: impl Iterator<Item = &'a SceneResult>) -> (Option<f64>, usize) {
    let (mut hit, mut n) = (0usize, 0usize);
    for r in rs {
        n += 1;
        hit += usize::from(r.correct());
    }
    ((n > 0).then(|| hit as f64 / n as f64), n)
}

impl EvalReport {
    /// Aggregates per-scene results; every accuracy is recomputable from `scenes`.
    pub fn from_scenes(label: impl Into<String>, scenes: Vec<SceneResult>, hard_threshold: usize) -> Self {
        let (overall, count) = accuracy(scenes.iter());
        let (hard_acc, hard_count) = accuracy(scenes.iter().filter(|s| s.distractors >= hard_threshold));
        let (easy_acc, easy_count) = accuracy(scenes.iter().filter(|s| s.distractors < hard_threshold));
        let (rn_ge2_acc, rn_ge2_count) = accuracy(scenes.iter().filter(|s| s.rn >= 2));
        let (rn_le1_acc, rn_le1_count) = accuracy(scenes.iter().filter(|s| s.rn <= 1));
        let frac = |f: &dyn Fn(&SceneResult) -> bool| {
            if count == 0 {
                0.0
            } else {
                scenes.iter().filter(|s| f(s)).count() as f64 / count as f64
            }
        };
        Self {
            label: label.into(),
            count,
            overall_acc: overall.unwrap_or(0.0),
            hard_acc,
            easy_acc,
            rn_ge2_acc,
            rn_le1_acc,
            hard_count,
            easy_count,
            rn_ge2_count,
            rn_le1_count,
            hard_threshold,
            text_class_acc: frac(&|s| s.text_class_correct),
            target_in_graph_rate: frac(&|s| s.target_in_graph),
            history: Vec::new(),
            scenes,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Evaluation-mode predictions for every record, in parallel over scenes.
pub fn predict(model: &Model, params: &ParamStore, records: &[Record], ablation: Ablation) -> Result<Vec<SceneResult>> {
    records
        .par_iter()
        .enumerate()
        .map(|(index, r)| {
            let mut tape = Tape::new(params);
            let out = model.forward(&mut tape, r, ablation)?;
            let target = r.scene.target_id;
            Ok(SceneResult {
                index,
                predicted: out.prediction,
                target,
                rn: r.utterance.rn,
                distractors: r.scene.distractor_count(),
                target_in_graph: out.graph.as_ref().is_none_or(|g| g.contains(target)),
                text_class_correct: model.class_index(&r.utterance.target_category).ok() == Some(out.text_class),
            })
        })
        .collect()
}

pub fn evaluate(
    model: &Model,
    params: &ParamStore,
    records: &[Record],
    ablation: Ablation,
    hard_threshold: usize,
) -> Result<EvalReport> {
    let scenes = predict(model, params, records, ablation)?;
    Ok(EvalReport::from_scenes(ablation.name(), scenes, hard_threshold))
}
