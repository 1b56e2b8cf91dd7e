//! l-infinity white-box attacks, adversarial training batches, and robust
//! and transfer accuracy.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::diffgraph::Tensor;
use crate::error::{Error, Result};
use crate::rng::{mix, stream_rng, tags};
use crate::supernet::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    Mim,
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::Mim => "mim",
        })
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd" => Ok(AttackKind::Pgd),
            "mim" => Ok(AttackKind::Mim),
            _ => Err(Error::domain(format!("unknown attack `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub momentum_decay: f64,
    pub random_start: bool,
    pub input_range: (f64, f64),
    pub seed: u64,
}

impl Default for AttackConfig {
    /// PGD, `eps = 8/255`, 7 steps of `2/255`, random start.
    fn default() -> Self {
        Self {
            kind: AttackKind::Pgd,
            epsilon: 8.0 / 255.0,
            steps: 7,
            step_size: 2.0 / 255.0,
            momentum_decay: 1.0,
            random_start: true,
            input_range: (0.0, 1.0),
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            kind: AttackKind::Fgsm,
            epsilon,
            steps: 1,
            step_size: epsilon,
            random_start: false,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(Error::domain(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.step_size >= 0.0) {
            return Err(Error::domain(format!("step_size must be >= 0, got {}", self.step_size)));
        }
        if self.kind != AttackKind::Fgsm && self.steps == 0 {
            return Err(Error::domain("iterative attacks need steps >= 1"));
        }
        if !(self.input_range.0 <= self.input_range.1) {
            return Err(Error::domain("input_range must have lo <= hi"));
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clamp into the eps-ball around `x`, then into the box.
fn project(adv: &mut Tensor, x: &Tensor, eps: f64, (lo, hi): (f64, f64)) {
    Zip::from(adv).and(x).for_each(|a, &x0| {
        *a = a.clamp(x0 - eps, x0 + eps).clamp(lo, hi);
    });
}

fn check_dims(model: &dyn Model, x: &Tensor, y: &[usize]) -> Result<()> {
    if x.ncols() != model.input_dim() || x.nrows() != y.len() {
        return Err(Error::shape(
            "attack",
            format!("batch {:?} with {} labels for a {}-input model", x.dim(), y.len(), model.input_dim()),
        ));
    }
    Ok(())
}

/// `clip(x + eps * sign(grad), input_range)`.
pub fn fgsm(model: &dyn Model, x: &Tensor, y: &[usize], epsilon: f64, input_range: (f64, f64)) -> Result<Tensor> {
    check_dims(model, x, y)?;
    let (_, g) = model.loss_grad(x, y)?;
    let mut adv = x.clone();
    Zip::from(&mut adv).and(&g).for_each(|a, &gi| {
        *a = (*a + epsilon * sign(gi)).clamp(input_range.0, input_range.1);
    });
    Ok(adv)
}

fn random_start(x: &Tensor, cfg: &AttackConfig) -> Tensor {
    let mut rng = stream_rng(cfg.seed, tags::ATTACK_START, 0);
    let mut adv = x.mapv(|v| v + cfg.epsilon * (2.0 * rng.random::<f64>() - 1.0));
    project(&mut adv, x, cfg.epsilon, cfg.input_range);
    adv
}

/// Projected sign-gradient ascent. Each step adds `step_size * sign(grad)`,
/// clamps to the eps-ball around `x`, then clamps to the input box.
pub fn pgd(model: &dyn Model, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    check_dims(model, x, y)?;
    let mut adv = if cfg.random_start && cfg.epsilon > 0.0 {
        random_start(x, cfg)
    } else {
        x.clone()
    };
    for _ in 0..cfg.steps {
        let (_, g) = model.loss_grad(&adv, y)?;
        Zip::from(&mut adv).and(&g).for_each(|a, &gi| *a += cfg.step_size * sign(gi));
        project(&mut adv, x, cfg.epsilon, cfg.input_range);
    }
    Ok(adv)
}

/// Momentum iterative method: `g <- decay g + grad / |grad|_1` per example,
/// then a projected step along `sign(g)`. Examples whose gradient is zero
/// keep their momentum unchanged. Starts at `x`.
pub fn mim(model: &dyn Model, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    check_dims(model, x, y)?;
    let mut adv = x.clone();
    let mut momentum: Tensor = Array2::zeros(x.dim());
    for _ in 0..cfg.steps {
        let (_, g) = model.loss_grad(&adv, y)?;
        for (mut m, gr) in momentum.rows_mut().into_iter().zip(g.rows()) {
            let l1: f64 = gr.iter().map(|v| v.abs()).sum();
            if l1 > 0.0 {
                Zip::from(&mut m).and(&gr).for_each(|mi, &gi| *mi = cfg.momentum_decay * *mi + gi / l1);
            }
        }
        Zip::from(&mut adv).and(&momentum).for_each(|a, &mi| *a += cfg.step_size * sign(mi));
        project(&mut adv, x, cfg.epsilon, cfg.input_range);
    }
    Ok(adv)
}

/// Dispatches on `cfg.kind`. FGSM uses `cfg.epsilon` and ignores steps.
pub fn attack(model: &dyn Model, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    match cfg.kind {
        AttackKind::Fgsm => fgsm(model, x, y, cfg.epsilon, cfg.input_range),
        AttackKind::Pgd => pgd(model, x, y, cfg),
        AttackKind::Mim => mim(model, x, y, cfg),
    }
}

/// Adversarial batch for one training step.
#[derive(Debug, Clone)]
pub struct AdvBatch {
    pub x_adv: Tensor,
    pub clean_loss: f64,
    pub adv_loss: f64,
}

/// Generates the training attack on a batch and reports the loss before
/// and after; the caller steps its optimizer on `x_adv`.
pub fn adv_train_step(model: &dyn Model, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<AdvBatch> {
    let (clean_loss, _) = model.loss_grad(x, y)?;
    if cfg.epsilon == 0.0 {
        return Ok(AdvBatch {
            x_adv: x.clone(),
            clean_loss,
            adv_loss: clean_loss,
        });
    }
    let x_adv = attack(model, x, y, cfg)?;
    let (adv_loss, _) = model.loss_grad(&x_adv, y)?;
    Ok(AdvBatch {
        x_adv,
        clean_loss,
        adv_loss,
    })
}

/// One row of an evaluation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub attack: String,
    pub epsilon: f64,
    pub steps: usize,
    pub seed: u64,
    pub clean_acc: f64,
    pub adv_acc: f64,
}

const EVAL_BATCH: usize = 256;

fn batch_cfg(cfg: &AttackConfig, batch: usize) -> AttackConfig {
    AttackConfig {
        seed: mix(&[cfg.seed, batch as u64]),
        ..*cfg
    }
}

/// Accuracy of `target` on examples attacked through `source`.
fn attacked_accuracy(source: &dyn Model, target: &dyn Model, data: &Dataset, cfg: &AttackConfig) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let order: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0.0;
    for (b, batch) in data.batches(&order, EVAL_BATCH).iter().enumerate() {
        let adv = if cfg.epsilon == 0.0 {
            batch.x.clone()
        } else {
            attack(source, &batch.x, &batch.y, &batch_cfg(cfg, b))?
        };
        correct += target.accuracy(&adv, &batch.y)? * batch.len() as f64;
    }
    Ok(correct / data.len() as f64)
}

/// Clean and adversarial accuracy under `cfg`, deterministic per seed.
pub fn robust_accuracy(model: &dyn Model, data: &Dataset, cfg: &AttackConfig) -> Result<ResultRow> {
    cfg.validate()?;
    let clean_acc = model.accuracy(&data.x, &data.y)?;
    let adv_acc = if cfg.epsilon == 0.0 {
        clean_acc
    } else {
        attacked_accuracy(model, model, data, cfg)?
    };
    Ok(ResultRow {
        attack: cfg.kind.to_string(),
        epsilon: cfg.epsilon,
        steps: if cfg.kind == AttackKind::Fgsm { 1 } else { cfg.steps },
        seed: cfg.seed,
        clean_acc,
        adv_acc,
    })
}

/// The 0.01..=0.07 perturbation grid used for sweeps.
pub fn epsilon_grid() -> Vec<f64> {
    (1..=7).map(|k| k as f64 / 100.0).collect()
}

/// Robust accuracy at each `epsilon`, keeping `step_size = epsilon / 4`
/// for iterative attacks.
pub fn epsilon_sweep(model: &dyn Model, data: &Dataset, base: &AttackConfig, eps: &[f64]) -> Result<Vec<ResultRow>> {
    eps.iter()
        .map(|&e| {
            let cfg = AttackConfig {
                epsilon: e,
                step_size: if base.kind == AttackKind::Fgsm { e } else { e / 4.0 },
                ..*base
            };
            robust_accuracy(model, data, &cfg)
        })
        .collect()
}

/// Robust accuracy at each iteration count.
pub fn steps_sweep(model: &dyn Model, data: &Dataset, base: &AttackConfig, steps: &[usize]) -> Result<Vec<ResultRow>> {
    steps
        .iter()
        .map(|&s| robust_accuracy(model, data, &AttackConfig { steps: s, ..*base }))
        .collect()
}

/// Accuracy of `target` on adversarial examples generated against
/// `source`.
pub fn transfer_eval(source: &dyn Model, target: &dyn Model, data: &Dataset, cfg: &AttackConfig) -> Result<f64> {
    cfg.validate()?;
    if source.input_dim() != target.input_dim() || source.classes() != target.classes() {
        return Err(Error::shape(
            "transfer_eval",
            format!(
                "source {}->{} vs target {}->{}",
                source.input_dim(),
                source.classes(),
                target.input_dim(),
                target.classes()
            ),
        ));
    }
    attacked_accuracy(source, target, data, cfg)
}
