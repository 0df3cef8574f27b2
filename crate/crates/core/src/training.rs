//! Multi-task training with validation-based model selection, and benign
//! evaluation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::{Transcript, Utterance};
use crate::decode::{joint_greedy_decode, DEFAULT_MAX_LEN};
use crate::error::{Error, Result};
use crate::losses::{ctc_loss, dec_loss, dis_loss, LossBreakdown, LossVars, MtlWeights};
use crate::metrics::{accent_accuracy, corpus_wer, WerStats};
use crate::model::{ctc_head, discriminate, encode, Bound, Gradients, ModelConfig, ModelParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Fixed-step stochastic gradient descent.
    Sgd,
    /// Adam with β = (0.9, 0.999), ε = 1e-8.
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub weights: MtlWeights,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: MtlWeights {
                lambda_t_a: 1.0,
                lambda_t_c: 0.0,
                lambda_i_c: 0.0,
            },
            epochs: 30,
            learning_rate: 1e-3,
            batch_size: 8,
            optimizer: Optimizer::Adam,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean training-batch losses; components with zero weight are not
/// computed during training and stay `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLosses {
    pub l_ctc: Option<f64>,
    pub l_dec: Option<f64>,
    pub l_dis: Option<f64>,
    pub l_mtl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: TrainLosses,
    pub valid: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were returned.
    pub selected_epoch: usize,
}

const LOG_HEADER: &str = "epoch,train_l_ctc,train_l_dec,train_l_dis,train_l_mtl,\
valid_l_ctc,valid_l_dec,valid_l_dis,valid_l_mtl,selected";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{LOG_HEADER}");
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                e.epoch,
                opt(e.train.l_ctc),
                opt(e.train.l_dec),
                opt(e.train.l_dis),
                e.train.l_mtl,
                e.valid.l_ctc,
                e.valid.l_dec,
                e.valid.l_dis,
                e.valid.l_mtl,
                u8::from(e.epoch == self.selected_epoch),
            );
        }
        out
    }

    pub fn best_valid(&self) -> Option<f64> {
        self.epochs.iter().map(|e| e.valid.l_mtl).min_by(f64::total_cmp)
    }
}

/// Component losses of one utterance on `tape`. Components whose weight is
/// zero are still computed when `all` is set, for logging; they never enter
/// the objective.
fn utterance_losses(tape: &mut Tape, m: &Bound, u: &Utterance, w: &MtlWeights, all: bool) -> Result<LossVars> {
    let x = tape.constant(u.features.clone());
    let h = encode(tape, m, x)?;
    let ctc = if all || w.ctc_coef() > 0.0 {
        let lp = ctc_head(tape, m, h)?;
        Some(ctc_loss(tape, lp, &u.transcript)?)
    } else {
        None
    };
    let dec = if all || w.dec_coef() > 0.0 {
        Some(dec_loss(tape, m, h, &u.transcript)?)
    } else {
        None
    };
    let dis = if all || w.dis_coef() > 0.0 {
        Some(dis_loss(tape, m, h, u.accent)?)
    } else {
        None
    };
    Ok(LossVars { ctc, dec, dis })
}

/// Adds one utterance's objective gradient into `grads`; returns the
/// losses of the weighted components.
pub fn accumulate_gradient(
    params: &ModelParams,
    u: &Utterance,
    w: &MtlWeights,
    grads: &mut Gradients,
) -> Result<TrainLosses> {
    let mut tape = Tape::new();
    let m = Bound::new(params, &mut tape, true);
    let parts = utterance_losses(&mut tape, &m, u, w, false)?;
    let obj = parts.mtl_objective(&mut tape, w)?;
    tape.backward(obj)?;
    m.collect_grads(&tape, grads);
    let val = |v: Option<crate::autodiff::Var>| v.map(|v| tape.value(v).item());
    Ok(TrainLosses {
        l_ctc: val(parts.ctc),
        l_dec: val(parts.dec),
        l_dis: val(parts.dis),
        l_mtl: tape.value(obj).item(),
    })
}

fn mean_train(items: &[TrainLosses]) -> TrainLosses {
    let n = items.len() as f64;
    let mean =
        |f: fn(&TrainLosses) -> Option<f64>| -> Option<f64> { items.iter().map(f).sum::<Option<f64>>().map(|s| s / n) };
    TrainLosses {
        l_ctc: mean(|t| t.l_ctc),
        l_dec: mean(|t| t.l_dec),
        l_dis: mean(|t| t.l_dis),
        l_mtl: items.iter().map(|t| t.l_mtl).sum::<f64>() / n,
    }
}

/// Mean component losses over `utts`, without gradients.
pub fn mean_losses(params: &ModelParams, utts: &[Utterance], w: &MtlWeights) -> Result<LossBreakdown> {
    if utts.is_empty() {
        return Err(Error::Empty("utterances"));
    }
    let per: Vec<LossBreakdown> = utts
        .par_iter()
        .map(|u| {
            let mut tape = Tape::new();
            let m = Bound::new(params, &mut tape, false);
            let parts = utterance_losses(&mut tape, &m, u, w, true)?;
            Ok(parts.breakdown(&tape, w))
        })
        .collect::<Result<_>>()?;
    Ok(mean_breakdown(&per))
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len() as f64;
    let mut acc = LossBreakdown::default();
    for b in items {
        acc.l_ctc += b.l_ctc / n;
        acc.l_dec += b.l_dec / n;
        acc.l_dis += b.l_dis / n;
        acc.l_asr += b.l_asr / n;
        acc.l_mtl += b.l_mtl / n;
    }
    acc
}

struct AdamState {
    m: Gradients,
    v: Gradients,
    t: i32,
}

fn apply_update(params: &mut ModelParams, grads: &Gradients, cfg: &TrainConfig, adam: &mut Option<AdamState>) {
    match (cfg.optimizer, adam) {
        (Optimizer::Sgd, _) => {
            for (name, p) in params.iter_mut() {
                let g = grads.get(name).expect("same layout");
                for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *pv -= cfg.learning_rate * gv;
                }
            }
        }
        (Optimizer::Adam, state) => {
            let st = state.get_or_insert_with(|| AdamState {
                m: Gradients::zeros_like(params),
                v: Gradients::zeros_like(params),
                t: 0,
            });
            st.t += 1;
            let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
            let c1 = 1.0 - b1.powi(st.t);
            let c2 = 1.0 - b2.powi(st.t);
            for (name, p) in params.iter_mut() {
                let g = grads.get(name).expect("same layout").data();
                let m = st.m.get_mut(name).expect("same layout").data_mut();
                for (mi, gi) in m.iter_mut().zip(g) {
                    *mi = b1 * *mi + (1.0 - b1) * gi;
                }
                let v = st.v.get_mut(name).expect("same layout").data_mut();
                for (vi, gi) in v.iter_mut().zip(g) {
                    *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                }
                let (m, v) = (st.m.get(name).unwrap().data(), st.v.get(name).unwrap().data());
                for ((pv, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
                    *pv -= cfg.learning_rate * (mi / c1) / ((vi / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Train from a fresh initialisation and return the parameters from the
/// epoch with the lowest validation `l_mtl` (earliest on ties).
pub fn train_mtl(
    model: &ModelConfig,
    cfg: &TrainConfig,
    train: &[Utterance],
    valid: &[Utterance],
) -> Result<(ModelParams, TrainLog)> {
    train_mtl_with(model, cfg, train, valid, |_| {})
}

/// [`train_mtl`] with a callback after each epoch.
pub fn train_mtl_with(
    model: &ModelConfig,
    cfg: &TrainConfig,
    train: &[Utterance],
    valid: &[Utterance],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut params = ModelParams::init(model)?;
    let mut grads = Gradients::zeros_like(&params);
    let mut adam = None;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainLog::default();
    let mut best: Option<(f64, ModelParams)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut seen = Vec::with_capacity(train.len());
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            grads.zero();
            for &i in batch {
                let diverged = |_| Error::Diverged { epoch, batch: b };
                let l = accumulate_gradient(&params, &train[i], &cfg.weights, &mut grads).map_err(|e| match e {
                    Error::NonFinite { .. } => diverged(()),
                    other => other,
                })?;
                if !l.l_mtl.is_finite() {
                    return Err(Error::Diverged { epoch, batch: b });
                }
                seen.push(l);
            }
            let scale = 1.0 / batch.len() as f64;
            let mut g = grads.clone();
            for (name, _) in grads.iter() {
                g.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            apply_update(&mut params, &g, cfg, &mut adam);
            if !params.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
        }
        if valid.is_empty() {
            return Err(Error::Empty("validation set"));
        }
        let batches = order.len().div_ceil(cfg.batch_size);
        let valid_losses = mean_losses(&params, valid, &cfg.weights).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Diverged { epoch, batch: batches },
            other => other,
        })?;
        if !valid_losses.l_mtl.is_finite() {
            return Err(Error::Diverged { epoch, batch: batches });
        }
        let entry = EpochLog {
            epoch,
            train: mean_train(&seen),
            valid: valid_losses,
        };
        on_epoch(&entry);
        if best.as_ref().is_none_or(|(v, _)| valid_losses.l_mtl < *v) {
            best = Some((valid_losses.l_mtl, params.clone()));
            log.selected_epoch = epoch;
        }
        log.epochs.push(entry);
    }
    let (_, chosen) = best.expect("at least one epoch");
    Ok((chosen, log))
}

/// Benign predictions and scores for one split.
#[derive(Clone, Debug, PartialEq)]
pub struct BenignEval {
    pub wer: WerStats,
    pub accent_acc: f64,
    pub hypotheses: Vec<Transcript>,
    pub accents: Vec<usize>,
}

/// Joint-decode every utterance with `λ(i)_C` from `weights` and classify
/// its accent; WER is pooled over the split.
pub fn evaluate_benign(params: &ModelParams, utts: &[Utterance], weights: &MtlWeights) -> Result<BenignEval> {
    if utts.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let out: Vec<(Transcript, usize)> = utts
        .par_iter()
        .map(|u| {
            let mut tape = Tape::new();
            let m = Bound::new(params, &mut tape, false);
            let x = tape.constant(u.features.clone());
            let h = encode(&mut tape, &m, x)?;
            let hyp = joint_greedy_decode(&mut tape, &m, h, weights, DEFAULT_MAX_LEN)?.hypothesis;
            let lp = discriminate(&mut tape, &m, h)?;
            let accent = argmax(tape.value(lp));
            Ok((hyp, accent))
        })
        .collect::<Result<_>>()?;
    let (hypotheses, accents): (Vec<_>, Vec<_>) = out.into_iter().unzip();
    let wer = corpus_wer(
        utts.iter()
            .zip(&hypotheses)
            .map(|(u, h)| (&u.transcript.0[..], &h.0[..])),
    )?;
    let gold: Vec<usize> = utts.iter().map(|u| u.accent).collect();
    Ok(BenignEval {
        wer,
        accent_acc: accent_accuracy(&accents, &gold)?,
        hypotheses,
        accents,
    })
}

fn argmax(t: &Tensor) -> usize {
    let d = t.data();
    (0..d.len()).fold(0, |b, i| if d[i] > d[b] { i } else { b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DataConfig, LenRange, SpeechWorld};

    fn small_model(vocab: usize, feat: usize) -> ModelConfig {
        ModelConfig {
            feat_dim: feat,
            enc_hidden: 8,
            dec_hidden: 8,
            attn_dim: 6,
            vocab_size: vocab,
            disc_hidden: 6,
            ..Default::default()
        }
    }

    fn tiny_data(n: usize) -> (SpeechWorld, Vec<Utterance>) {
        let cfg = DataConfig::default();
        let world = SpeechWorld::from_config(&cfg).unwrap();
        let split = world.gen_dataset(3, n, 2, 2, LenRange::new(1, 3).unwrap()).unwrap();
        (world, split.train)
    }

    fn one_batch_grads(w: MtlWeights) -> Gradients {
        let (world, utts) = tiny_data(3);
        let p = ModelParams::init(&small_model(world.vocab.n_words(), world.feat_dim())).unwrap();
        let mut g = Gradients::zeros_like(&p);
        for u in &utts {
            accumulate_gradient(&p, u, &w, &mut g).unwrap();
        }
        g
    }

    #[test]
    fn asr_only_training_leaves_discriminator_untouched() {
        let g = one_batch_grads(MtlWeights::new(1.0, 1.0).unwrap());
        assert!(g.all_zero("disc."));
        assert!(g.all_zero("dec."));
        assert!(!g.all_zero("ctc."));
    }

    #[test]
    fn decoder_only_training_leaves_ctc_untouched() {
        let g = one_batch_grads(MtlWeights::new(1.0, 0.0).unwrap());
        assert!(g.all_zero("ctc."));
        assert!(g.all_zero("disc."));
        assert!(!g.all_zero("dec."));
    }

    #[test]
    fn discriminator_only_training_leaves_asr_heads_untouched() {
        let g = one_batch_grads(MtlWeights::new(0.0, 0.5).unwrap());
        assert!(g.all_zero("ctc."));
        assert!(g.all_zero("dec."));
        assert!(!g.all_zero("disc."));
        assert!(!g.all_zero("enc."));
    }

    #[test]
    fn training_is_reproducible_and_selects_best_epoch() {
        let (world, utts) = tiny_data(6);
        let model = small_model(world.vocab.n_words(), world.feat_dim());
        let cfg = TrainConfig {
            weights: MtlWeights::new(0.8, 0.5).unwrap(),
            epochs: 4,
            learning_rate: 0.05,
            batch_size: 4,
            ..Default::default()
        };
        let (valid, train) = utts.split_at(2);
        let a = train_mtl(&model, &cfg, train, valid).unwrap();
        let b = train_mtl(&model, &cfg, train, valid).unwrap();
        assert_eq!(a, b);
        let (params, log) = a;
        assert_eq!(log.epochs.len(), 4);
        let chosen = &log.epochs[log.selected_epoch - 1];
        assert_eq!(Some(chosen.valid.l_mtl), log.best_valid());
        let again = mean_losses(&params, valid, &cfg.weights).unwrap();
        assert_eq!(again.l_mtl, chosen.valid.l_mtl);
        assert_eq!(log.to_csv().lines().count(), 5);
    }

    #[test]
    fn divergence_is_reported_with_position() {
        let (world, utts) = tiny_data(4);
        let model = small_model(world.vocab.n_words(), world.feat_dim());
        let cfg = TrainConfig {
            learning_rate: 1e300,
            epochs: 3,
            batch_size: 2,
            ..Default::default()
        };
        assert!(matches!(
            train_mtl(&model, &cfg, &utts[..2], &utts[2..]),
            Err(Error::Diverged { epoch: 1, .. })
        ));
    }

    #[test]
    fn invalid_training_config_is_rejected() {
        let bad = [
            TrainConfig {
                epochs: 0,
                ..Default::default()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
    }
}
