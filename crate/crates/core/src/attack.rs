//! Targeted L2 projected-gradient attack on the input features.
//!
//! Each iteration moves the perturbation by exactly `alpha` against the
//! gradient of the inference loss towards the target transcription, then
//! projects it back onto the L2 ball of radius `epsilon` around the clean
//! input. The perturbation starts at zero, so runs are deterministic.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::losses::{ctc_loss, ctc_min_frames, dec_loss, MtlWeights};
use crate::model::{ctc_head, encode, Bound, ModelParams};

/// Default step count and snapshot schedule.
pub const DEFAULT_STEPS: usize = 200;
pub const DEFAULT_REPORT_AT: [usize; 4] = [10, 50, 100, 200];

/// Default L2 radius in feature units; the step defaults to a fortieth of it.
pub const DEFAULT_EPSILON: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    /// Only `lambda_i_c` enters the attack objective.
    pub weights: MtlWeights,
    pub report_at: Vec<usize>,
}

impl AttackConfig {
    /// Radius `epsilon`, step `epsilon / 40`, default snapshots up to `steps`.
    pub fn with_radius(epsilon: f64, weights: MtlWeights, steps: usize) -> Result<Self> {
        let cfg = AttackConfig {
            epsilon,
            alpha: epsilon / 40.0,
            steps,
            weights,
            report_at: DEFAULT_REPORT_AT.iter().copied().filter(|&s| s <= steps).collect(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Radius at a tenth of the median clean-feature norm of `test`, step at
    /// a fortieth of the radius.
    pub fn calibrated(test: &[Utterance], weights: MtlWeights, steps: usize) -> Result<Self> {
        Self::with_radius(0.1 * median_feature_norm(test)?, weights, steps)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!("epsilon={} must be > 0", self.epsilon)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha={} must be >= 0", self.alpha)));
        }
        if self.report_at.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("report_at must be strictly increasing".into()));
        }
        if let Some(&s) = self.report_at.iter().find(|&&s| s > self.steps) {
            return Err(Error::InvalidConfig(format!(
                "report step {s} beyond {} steps",
                self.steps
            )));
        }
        Ok(())
    }
}

/// Median Frobenius norm of the feature matrices.
pub fn median_feature_norm(utts: &[Utterance]) -> Result<f64> {
    if utts.is_empty() {
        return Err(Error::Empty("utterances for epsilon calibration"));
    }
    let mut norms: Vec<f64> = utts.iter().map(|u| u.features.l2_norm()).collect();
    norms.sort_by(f64::total_cmp);
    let n = norms.len();
    Ok(if n % 2 == 1 {
        norms[n / 2]
    } else {
        0.5 * (norms[n / 2 - 1] + norms[n / 2])
    })
}

/// Whether the attack objective is defined for a `frames`-long input.
pub fn target_feasible(target: &[usize], frames: usize, weights: &MtlWeights) -> bool {
    weights.lambda_i_c == 0.0 || frames >= ctc_min_frames(target)
}

/// Inference-weighted loss towards `target` recorded on `tape`:
/// `λ·L_CTC + (1−λ)·L_DEC` with `λ = λ(i)_C`; zero-weight terms are omitted.
pub fn adv_loss(tape: &mut Tape, m: &Bound, x: Var, target: &[usize], weights: &MtlWeights) -> Result<Var> {
    weights.validate()?;
    let lambda = weights.lambda_i_c;
    let h = encode(tape, m, x)?;
    let ctc = if lambda > 0.0 {
        let lp = ctc_head(tape, m, h)?;
        let l = ctc_loss(tape, lp, target)?;
        Some(tape.scale(l, lambda)?)
    } else {
        None
    };
    let dec = if lambda < 1.0 {
        let l = dec_loss(tape, m, h, target)?;
        Some(tape.scale(l, 1.0 - lambda)?)
    } else {
        None
    };
    match (ctc, dec) {
        (Some(a), Some(b)) => tape.add(a, b),
        (Some(a), None) | (None, Some(a)) => Ok(a),
        (None, None) => unreachable!("lambda covers at least one head"),
    }
}

/// `L_ADV` at `x` and its gradient w.r.t. `x`; parameters are constants.
pub fn adv_loss_grad(
    params: &ModelParams,
    x: &Tensor,
    target: &[usize],
    weights: &MtlWeights,
) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let m = Bound::new(params, &mut tape, false);
    let xv = tape.leaf(x.clone(), true);
    let loss = adv_loss(&mut tape, &m, xv, target, weights)?;
    tape.backward(loss)?;
    let grad = tape.grad(xv).cloned().expect("input is a gradient leaf");
    Ok((tape.value(loss).item(), grad))
}

/// `L_ADV` at `x` without gradient tracking.
pub fn adv_loss_value(params: &ModelParams, x: &Tensor, target: &[usize], weights: &MtlWeights) -> Result<f64> {
    let mut tape = Tape::new();
    let m = Bound::new(params, &mut tape, false);
    let xv = tape.constant(x.clone());
    let loss = adv_loss(&mut tape, &m, xv, target, weights)?;
    Ok(tape.value(loss).item())
}

/// `delta · min(1, ε / ‖delta‖₂)`.
pub fn project_l2(delta: &Tensor, epsilon: f64) -> Tensor {
    let norm = delta.l2_norm();
    if norm <= epsilon {
        return delta.clone();
    }
    let s = epsilon / norm;
    delta.map(|v| v * s)
}

/// Result of one PGD iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct PgdStep {
    pub delta: Tensor,
    /// `L_ADV(x + delta)` before the update.
    pub loss: f64,
    /// L2 norm of the unprojected move; `alpha` unless the gradient vanished.
    pub step_norm: f64,
    /// Set when the gradient is exactly zero; `delta` is then unchanged.
    pub flat: bool,
}

/// One normalised-gradient descent step on `L_ADV`, followed by projection.
pub fn pgd_step(
    params: &ModelParams,
    x: &Tensor,
    delta: &Tensor,
    target: &[usize],
    cfg: &AttackConfig,
) -> Result<PgdStep> {
    if x.shape() != delta.shape() {
        return Err(Error::shape(
            "pgd_step",
            format!("{:?} vs {:?}", x.shape(), delta.shape()),
        ));
    }
    let x_adv = x.zip_map(delta, |a, b| a + b)?;
    let (loss, g) = adv_loss_grad(params, &x_adv, target, &cfg.weights)?;
    Ok(match descent_update(delta, &g, cfg.alpha, cfg.epsilon)? {
        Some((delta, step_norm)) => PgdStep {
            delta,
            loss,
            step_norm,
            flat: false,
        },
        None => PgdStep {
            delta: delta.clone(),
            loss,
            step_norm: 0.0,
            flat: true,
        },
    })
}

/// `project_l2(delta − α·g/‖g‖₂, ε)` with the unprojected move's norm, or
/// `None` when `g` is exactly zero.
pub fn descent_update(delta: &Tensor, g: &Tensor, alpha: f64, epsilon: f64) -> Result<Option<(Tensor, f64)>> {
    let g_norm = g.l2_norm();
    if g_norm == 0.0 {
        return Ok(None);
    }
    let scale = alpha / g_norm;
    let step = g.map(|v| -scale * v);
    let moved = delta.zip_map(&step, |d, s| d + s)?;
    Ok(Some((project_l2(&moved, epsilon), step.l2_norm())))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationResult {
    pub x_adv: Tensor,
    pub delta: Tensor,
    /// `L_ADV` before each iteration and after the last one.
    pub loss_trace: Vec<f64>,
    /// `‖delta‖₂` after each iteration.
    pub delta_norms: Vec<f64>,
    /// `x_adv` at each requested step; steps after an early stop repeat the
    /// final perturbation.
    pub snapshots: BTreeMap<usize, Tensor>,
    /// Iterations actually taken (fewer than `steps` after a zero gradient).
    pub iterations: usize,
}

pub fn pgd_attack(
    params: &ModelParams,
    x: &Tensor,
    target: &[usize],
    cfg: &AttackConfig,
) -> Result<PerturbationResult> {
    cfg.validate()?;
    let mut delta = Tensor::zeros(x.shape().to_vec());
    let mut loss_trace = Vec::with_capacity(cfg.steps + 1);
    let mut delta_norms = Vec::with_capacity(cfg.steps);
    let mut snapshots = BTreeMap::new();
    let mut iterations = 0;
    let mut pending = cfg.report_at.iter().copied().peekable();
    let mut flat = false;
    for step in 0..=cfg.steps {
        while pending.peek() == Some(&step) {
            snapshots.insert(step, x.zip_map(&delta, |a, b| a + b)?);
            pending.next();
        }
        if step == cfg.steps || flat {
            continue;
        }
        let s = pgd_step(params, x, &delta, target, cfg)?;
        loss_trace.push(s.loss);
        if s.flat {
            flat = true;
            continue;
        }
        delta = s.delta;
        delta_norms.push(delta.l2_norm());
        iterations += 1;
    }
    let x_adv = x.zip_map(&delta, |a, b| a + b)?;
    if !flat {
        loss_trace.push(adv_loss_value(params, &x_adv, target, &cfg.weights)?);
    }
    Ok(PerturbationResult {
        x_adv,
        delta,
        loss_trace,
        delta_norms,
        snapshots,
        iterations,
    })
}
