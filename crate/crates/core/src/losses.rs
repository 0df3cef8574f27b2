//! Task losses and their weighted multi-task composition.
//!
//! All losses are per-token means: CTC divides the sequence negative
//! log-likelihood by the label count, the decoder averages over its output
//! steps (labels plus eos). This keeps the λ mixes on a common scale.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{discriminate, Bound, DecoderState};

/// Finite stand-in for `log 0` inside the recorded CTC recursion.
const LOG_ZERO: f64 = -1e30;

/// Training and inference mixing weights, each in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtlWeights {
    /// ASR vs. accent discriminator during training.
    pub lambda_t_a: f64,
    /// CTC vs. decoder during training.
    pub lambda_t_c: f64,
    /// CTC vs. decoder at inference (and in the attack objective).
    pub lambda_i_c: f64,
}

impl MtlWeights {
    /// Inference weight defaults to the training CTC weight.
    pub fn new(lambda_t_a: f64, lambda_t_c: f64) -> Result<Self> {
        Self::with_inference(lambda_t_a, lambda_t_c, lambda_t_c)
    }

    pub fn with_inference(lambda_t_a: f64, lambda_t_c: f64, lambda_i_c: f64) -> Result<Self> {
        let w = MtlWeights {
            lambda_t_a,
            lambda_t_c,
            lambda_i_c,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_t_a", self.lambda_t_a),
            ("lambda_t_c", self.lambda_t_c),
            ("lambda_i_c", self.lambda_i_c),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name}={v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Same training weights with the CTC head dropped at inference.
    pub fn drop_ctc(self) -> Self {
        MtlWeights {
            lambda_i_c: 0.0,
            ..self
        }
    }

    pub fn ctc_coef(&self) -> f64 {
        self.lambda_t_a * self.lambda_t_c
    }

    pub fn dec_coef(&self) -> f64 {
        self.lambda_t_a * (1.0 - self.lambda_t_c)
    }

    pub fn dis_coef(&self) -> f64 {
        1.0 - self.lambda_t_a
    }
}

/// Component and composed losses in nats.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ctc: f64,
    pub l_dec: f64,
    pub l_dis: f64,
    pub l_asr: f64,
    pub l_mtl: f64,
}

pub fn asr_loss(weights: &MtlWeights, l_ctc: f64, l_dec: f64) -> f64 {
    weights.lambda_t_c * l_ctc + (1.0 - weights.lambda_t_c) * l_dec
}

pub fn mtl_loss(weights: &MtlWeights, l_ctc: f64, l_dec: f64, l_dis: f64) -> LossBreakdown {
    let l_asr = asr_loss(weights, l_ctc, l_dec);
    LossBreakdown {
        l_ctc,
        l_dec,
        l_dis,
        l_asr,
        l_mtl: weights.lambda_t_a * l_asr + (1.0 - weights.lambda_t_a) * l_dis,
    }
}

/// Smallest frame count that can emit `labels` under CTC: one frame per
/// label plus a separating blank between equal neighbours.
pub fn ctc_min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_ctc_target(frames: usize, classes: usize, labels: &[usize]) -> Result<usize> {
    let blank = classes - 1;
    if let Some(&bad) = labels.iter().find(|&&l| l >= blank) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: blank,
        });
    }
    let required = ctc_min_frames(labels);
    if frames < required {
        return Err(Error::InfeasibleAlignment {
            frames,
            labels: labels.len(),
            required,
        });
    }
    Ok(blank)
}

/// CTC loss by the log-space forward recursion over the blank-extended label
/// sequence, recorded op by op so the tape differentiates it.
///
/// `logp` is `T × C` with blank in the last column.
pub fn ctc_loss(tape: &mut Tape, logp: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logp).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::shape("ctc_loss", format!("log-probs {shape:?}")));
    }
    let (frames, classes) = (shape[0], shape[1]);
    let blank = check_ctc_target(frames, classes, labels)?;

    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(blank);
    for &l in labels {
        ext.push(l);
        ext.push(blank);
    }
    let states = ext.len();
    // pad[0] is log 0 and pad[s + 1] = alpha[s].
    let shift_one: Vec<usize> = (0..states).collect();
    let skip: Vec<usize> = (0..states)
        .map(|s| {
            if s >= 2 && ext[s] != blank && ext[s] != ext[s - 2] {
                s - 1
            } else {
                0
            }
        })
        .collect();
    let has_skip = skip.iter().any(|&i| i != 0);

    let emit = tape.gather(logp, &ext)?;
    let start = tape.constant(Tensor::vector(
        (0..states).map(|s| if s < 2 { 0.0 } else { LOG_ZERO }).collect(),
    ));
    let log_zero = tape.constant(Tensor::vector(vec![LOG_ZERO]));

    let first = tape.row(emit, 0)?;
    let mut alpha = tape.add(first, start)?;
    for t in 1..frames {
        let pad = tape.concat(&[log_zero, alpha])?;
        let from_prev = tape.gather(pad, &shift_one)?;
        let mut routes = vec![alpha, from_prev];
        if has_skip {
            routes.push(tape.gather(pad, &skip)?);
        }
        let stacked = tape.stack(&routes)?;
        let merged = tape.logsumexp(stacked, 0)?;
        let e = tape.row(emit, t)?;
        alpha = tape.add(merged, e)?;
    }
    let tail: Vec<usize> = if states > 1 {
        vec![states - 1, states - 2]
    } else {
        vec![0]
    };
    let ends = tape.gather(alpha, &tail)?;
    let log_lik = tape.logsumexp(ends, 0)?;
    tape.scale(log_lik, -1.0 / labels.len().max(1) as f64)
}

/// Brute-force CTC loss by enumerating every frame-level path.
///
/// Same normalisation and error contract as [`ctc_loss`]; limited to
/// `C^T <= 10^6` paths.
pub fn ctc_brute_force(logp: &Tensor, labels: &[usize]) -> Result<f64> {
    if logp.rank() != 2 || logp.rows() == 0 {
        return Err(Error::shape("ctc_brute_force", format!("{:?}", logp.shape())));
    }
    let (frames, classes) = (logp.rows(), logp.cols());
    let paths = (classes as u128).checked_pow(frames as u32).unwrap_or(u128::MAX);
    if paths > 1_000_000 {
        return Err(Error::TooLarge { paths });
    }
    let blank = classes - 1;
    if let Some(&bad) = labels.iter().find(|&&l| l >= blank) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: blank,
        });
    }
    let mut total = 0.0;
    let mut path = vec![0usize; frames];
    let mut collapsed = Vec::with_capacity(frames);
    for _ in 0..paths {
        collapsed.clear();
        let mut prev = None;
        for &c in &path {
            if c != blank && prev != Some(c) {
                collapsed.push(c);
            }
            prev = Some(c);
        }
        if collapsed == labels {
            let lp: f64 = path.iter().enumerate().map(|(t, &c)| logp.row(t)[c]).sum();
            total += lp.exp();
        }
        // Odometer increment.
        for slot in path.iter_mut().rev() {
            *slot += 1;
            if *slot < classes {
                break;
            }
            *slot = 0;
        }
    }
    if total == 0.0 {
        return Err(Error::InfeasibleAlignment {
            frames,
            labels: labels.len(),
            required: ctc_min_frames(labels),
        });
    }
    Ok(-total.ln() / labels.len().max(1) as f64)
}

/// Teacher-forced decoder loss: mean negative log-likelihood of
/// `labels` followed by eos, each step conditioned on the gold prefix.
pub fn dec_loss(tape: &mut Tape, m: &Bound, h: Var, labels: &[usize]) -> Result<Var> {
    let special = m.config().special();
    if let Some(&bad) = labels.iter().find(|&&l| l >= special) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: special,
        });
    }
    let mut state = DecoderState::start(tape, m, h)?;
    let mut picked = Vec::with_capacity(labels.len() + 1);
    let inputs = std::iter::once(special).chain(labels.iter().copied());
    let targets = labels.iter().copied().chain(std::iter::once(special));
    for (input, target) in inputs.zip(targets) {
        let out = state.step(tape, m, input)?;
        picked.push(tape.gather(out.log_probs, &[target])?);
    }
    let all = tape.concat(&picked)?;
    let mean = tape.mean(all)?;
    tape.neg(mean)
}

/// Cross-entropy of the accent discriminator.
pub fn dis_loss(tape: &mut Tape, m: &Bound, h: Var, accent: usize) -> Result<Var> {
    let classes = m.config().n_accents;
    if accent >= classes {
        return Err(Error::LabelOutOfRange { label: accent, classes });
    }
    let lp = discriminate(tape, m, h)?;
    let picked = tape.gather(lp, &[accent])?;
    let picked = tape.reshape(picked, vec![])?;
    tape.neg(picked)
}

/// Component loss nodes for one utterance; `None` when not computed.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossVars {
    pub ctc: Option<Var>,
    pub dec: Option<Var>,
    pub dis: Option<Var>,
}

impl LossVars {
    /// Weighted training objective; terms with zero coefficient are left out
    /// so their heads receive exactly zero gradient.
    pub fn mtl_objective(&self, tape: &mut Tape, w: &MtlWeights) -> Result<Var> {
        let terms = [
            (self.ctc, w.ctc_coef(), "ctc"),
            (self.dec, w.dec_coef(), "dec"),
            (self.dis, w.dis_coef(), "dis"),
        ];
        let mut acc: Option<Var> = None;
        for (var, coef, name) in terms {
            if coef == 0.0 {
                continue;
            }
            let var = var.ok_or_else(|| Error::InvalidConfig(format!("{name} loss needed for weights {w:?}")))?;
            let scaled = tape.scale(var, coef)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, scaled)?,
                None => scaled,
            });
        }
        match acc {
            Some(a) => Ok(a),
            None => Ok(tape.constant(Tensor::scalar(0.0))),
        }
    }

    pub fn breakdown(&self, tape: &Tape, w: &MtlWeights) -> LossBreakdown {
        let val = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        mtl_loss(w, val(self.ctc), val(self.dec), val(self.dis))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{fd_gradient, relative_error};
    use crate::model::{ctc_head, encode, ModelConfig, ModelParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    fn uniform(frames: usize, classes: usize) -> Tensor {
        Tensor::full(vec![frames, classes], -(classes as f64).ln())
    }

    fn ctc_value(logp: &Tensor, y: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let lp = tape.constant(logp.clone());
        let l = ctc_loss(&mut tape, lp, y)?;
        Ok(tape.value(l).item())
    }

    fn random_logp(rng: &mut ChaCha8Rng, frames: usize, classes: usize) -> Tensor {
        let mut tape = Tape::new();
        let raw = Tensor::matrix(
            frames,
            classes,
            (0..frames * classes).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let v = tape.constant(raw);
        let lp = tape.log_softmax(v, 1).unwrap();
        tape.value(lp).clone()
    }

    #[test]
    fn single_frame_single_label() {
        let v = ctc_value(&uniform(1, 2), &[0]).unwrap();
        assert!((v - LN_2).abs() < 1e-12);
        assert!((ctc_brute_force(&uniform(1, 2), &[0]).unwrap() - LN_2).abs() < 1e-12);
    }

    #[test]
    fn two_frames_single_label() {
        // a·a, a·blank, blank·a each have probability 1/4.
        let expected = -(0.75f64).ln();
        assert!((ctc_value(&uniform(2, 2), &[0]).unwrap() - expected).abs() < 1e-12);
        assert!((ctc_brute_force(&uniform(2, 2), &[0]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn recursion_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..40 {
            let frames = rng.random_range(1..=5);
            let classes = 4;
            let len = rng.random_range(0..=2);
            let y: Vec<usize> = (0..len).map(|_| rng.random_range(0..3)).collect();
            let lp = random_logp(&mut rng, frames, classes);
            match (ctc_value(&lp, &y), ctc_brute_force(&lp, &y)) {
                (Ok(a), Ok(b)) => assert!((a - b).abs() < 1e-9, "{a} vs {b}"),
                (Err(Error::InfeasibleAlignment { .. }), Err(Error::InfeasibleAlignment { .. })) => {}
                other => panic!("disagreement for {y:?} over {frames} frames: {other:?}"),
            }
        }
    }

    #[test]
    fn infeasible_target_is_an_error_in_both() {
        let lp = uniform(2, 3);
        assert!(matches!(
            ctc_value(&lp, &[0, 0]),
            Err(Error::InfeasibleAlignment { required: 3, .. })
        ));
        assert!(matches!(
            ctc_brute_force(&lp, &[0, 1, 0]),
            Err(Error::InfeasibleAlignment { .. })
        ));
        assert!(ctc_value(&lp, &[2]).is_err());
    }

    #[test]
    fn brute_force_refuses_large_instances() {
        assert!(matches!(
            ctc_brute_force(&uniform(12, 4), &[0]),
            Err(Error::TooLarge { .. })
        ));
    }

    #[test]
    fn ctc_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let raw = Tensor::matrix(6, 4, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let y = [1, 1, 2];
        let f = |x: &Tensor, grad: bool| {
            let mut tape = Tape::new();
            let v = tape.leaf(x.clone(), grad);
            let lp = tape.log_softmax(v, 1).unwrap();
            let l = ctc_loss(&mut tape, lp, &y).unwrap();
            if grad {
                tape.backward(l).unwrap();
            }
            (tape.value(l).item(), tape.grad(v).cloned())
        };
        let g = f(&raw, true).1.unwrap();
        let n = fd_gradient(|x| Ok(f(x, false).0), &raw, 1e-5).unwrap();
        assert!(relative_error(g.data(), n.data()) < 1e-6);
    }

    #[test]
    fn composition_boundaries() {
        let (c, d, z) = (1.3, 2.9, 0.4);
        let w = MtlWeights::new(1.0, 1.0).unwrap();
        assert_eq!(mtl_loss(&w, c, d, z).l_mtl, c);
        let w = MtlWeights::new(1.0, 0.0).unwrap();
        assert_eq!(mtl_loss(&w, c, d, z).l_mtl, d);
        let w = MtlWeights::new(0.7, 0.5).unwrap();
        let b = mtl_loss(&w, 2.0, 4.0, 1.0);
        assert!((b.l_mtl - 2.4).abs() < 1e-12);
        assert!((b.l_asr - 3.0).abs() < 1e-12);
        assert_eq!(w.lambda_i_c, 0.5);
        assert_eq!(w.drop_ctc().lambda_i_c, 0.0);
    }

    #[test]
    fn weights_outside_unit_interval_are_rejected() {
        assert!(MtlWeights::new(1.1, 0.0).is_err());
        assert!(MtlWeights::with_inference(0.5, 0.5, -0.1).is_err());
        assert!(MtlWeights::new(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn mtl_loss_is_linear_in_each_lambda() {
        let (c, d, z) = (0.8, 2.2, 1.7);
        for fixed in [0.0, 0.4, 1.0] {
            let along_a: Vec<f64> = [0.0, 0.5, 1.0]
                .iter()
                .map(|&a| mtl_loss(&MtlWeights::new(a, fixed).unwrap(), c, d, z).l_mtl)
                .collect();
            assert!((along_a[1] - 0.5 * (along_a[0] + along_a[2])).abs() < 1e-12);
            let along_c: Vec<f64> = [0.0, 0.5, 1.0]
                .iter()
                .map(|&cc| mtl_loss(&MtlWeights::new(fixed, cc).unwrap(), c, d, z).l_mtl)
                .collect();
            assert!((along_c[1] - 0.5 * (along_c[0] + along_c[2])).abs() < 1e-12);
        }
    }

    fn tiny_model() -> ModelParams {
        ModelParams::init(&ModelConfig {
            feat_dim: 3,
            enc_hidden: 4,
            dec_hidden: 4,
            attn_dim: 3,
            vocab_size: 3,
            disc_hidden: 3,
            seed: 5,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn uniform_decoder_costs_log_vocab_per_step() {
        let mut p = tiny_model();
        for name in ["dec.out_state", "dec.out_ctx", "dec.out_b"] {
            p.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let m = Bound::new(&p, &mut tape, false);
        let h = tape.constant(Tensor::full(vec![3, 4], 0.2));
        for y in [vec![], vec![1], vec![0, 2, 2]] {
            let l = dec_loss(&mut tape, &m, h, &y).unwrap();
            assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_decoder_costs_nothing() {
        // Output bias dominating towards the gold token at every step.
        let mut p = tiny_model();
        for name in ["dec.out_state", "dec.out_ctx", "dec.out_b"] {
            p.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        p.get_mut("dec.out_b").unwrap().data_mut()[3] = 800.0;
        let mut tape = Tape::new();
        let m = Bound::new(&p, &mut tape, false);
        let h = tape.constant(Tensor::full(vec![3, 4], 0.2));
        let l = dec_loss(&mut tape, &m, h, &[]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn discriminator_loss_cases() {
        let mut p = tiny_model();
        p.get_mut("disc.4.w")
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        p.get_mut("disc.4.b")
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let mut tape = Tape::new();
        let m = Bound::new(&p, &mut tape, false);
        let h = tape.constant(Tensor::full(vec![3, 4], 0.2));
        let l = dis_loss(&mut tape, &m, h, 1).unwrap();
        assert!((tape.value(l).item() - LN_2).abs() < 1e-12);
        assert!(dis_loss(&mut tape, &m, h, 2).is_err());

        p.get_mut("disc.4.b").unwrap().data_mut()[0] = 900.0;
        let mut tape = Tape::new();
        let m = Bound::new(&p, &mut tape, false);
        let h = tape.constant(Tensor::full(vec![3, 4], 0.2));
        let l = dis_loss(&mut tape, &m, h, 0).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    /// Every component and the composed objective, differentiated w.r.t.
    /// the input and all parameters.
    #[test]
    fn loss_gradients_match_finite_differences() {
        let p = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = Tensor::matrix(5, 3, (0..15).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let y = [2, 0];
        let w = MtlWeights::new(0.6, 0.3).unwrap();
        for which in 0..4 {
            let eval = |params: &ModelParams, x: &Tensor, grad: bool| {
                let mut tape = Tape::new();
                let m = Bound::new(params, &mut tape, grad);
                let xv = tape.leaf(x.clone(), grad);
                let h = encode(&mut tape, &m, xv).unwrap();
                let lp = ctc_head(&mut tape, &m, h).unwrap();
                let parts = LossVars {
                    ctc: Some(ctc_loss(&mut tape, lp, &y).unwrap()),
                    dec: Some(dec_loss(&mut tape, &m, h, &y).unwrap()),
                    dis: Some(dis_loss(&mut tape, &m, h, 1).unwrap()),
                };
                let loss = match which {
                    0 => parts.ctc.unwrap(),
                    1 => parts.dec.unwrap(),
                    2 => parts.dis.unwrap(),
                    _ => parts.mtl_objective(&mut tape, &w).unwrap(),
                };
                if grad {
                    tape.backward(loss).unwrap();
                }
                let mut grads = crate::model::Gradients::zeros_like(params);
                m.collect_grads(&tape, &mut grads);
                (tape.value(loss).item(), tape.grad(xv).cloned(), grads)
            };
            let (_, gx, gp) = eval(&p, &x0, true);
            let nx = fd_gradient(|x| Ok(eval(&p, x, false).0), &x0, 1e-5).unwrap();
            assert!(relative_error(gx.unwrap().data(), nx.data()) < 1e-6);
            for name in ["enc.0.fwd.w_in", "ctc.w", "dec.att_v", "dec.embed", "disc.0.w"] {
                let base = p.get(name).unwrap().clone();
                let n = fd_gradient(
                    |t| {
                        let mut q = p.clone();
                        *q.get_mut(name).unwrap() = t.clone();
                        Ok(eval(&q, &x0, false).0)
                    },
                    &base,
                    1e-5,
                )
                .unwrap();
                let err = relative_error(gp.get(name).unwrap().data(), n.data());
                assert!(err < 1e-6, "loss {which}, param {name}: {err}");
            }
        }
    }

    #[test]
    fn breakdown_identities_hold() {
        let p = tiny_model();
        let mut tape = Tape::new();
        let m = Bound::new(&p, &mut tape, false);
        let x = tape.constant(Tensor::full(vec![4, 3], 0.3));
        let h = encode(&mut tape, &m, x).unwrap();
        let lp = ctc_head(&mut tape, &m, h).unwrap();
        let parts = LossVars {
            ctc: Some(ctc_loss(&mut tape, lp, &[1]).unwrap()),
            dec: Some(dec_loss(&mut tape, &m, h, &[1]).unwrap()),
            dis: Some(dis_loss(&mut tape, &m, h, 0).unwrap()),
        };
        let w = MtlWeights::new(0.8, 0.3).unwrap();
        let obj = parts.mtl_objective(&mut tape, &w).unwrap();
        let b = parts.breakdown(&tape, &w);
        assert!((b.l_asr - (0.3 * b.l_ctc + 0.7 * b.l_dec)).abs() < 1e-12);
        assert!((b.l_mtl - (0.8 * b.l_asr + 0.2 * b.l_dis)).abs() < 1e-12);
        assert!((tape.value(obj).item() - b.l_mtl).abs() < 1e-12);
    }
}
