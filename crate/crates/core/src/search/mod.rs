//! Constrained architecture search.
//!
//! Weights and architecture distributions are optimized alternately. The
//! architecture objective is the augmented Lagrangian
//! `CE + theta c + (rho/2) c^2` of the confidence constraint
//! `c = mu + Phi^-1(eta) var - ln(lambda*) <= 0` on the log-normal network
//! bound, and `theta` follows projected dual ascent.

mod config;
mod optim;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{DualSchedule, LambdaStar, RetrainConfig, SearchConfig};
pub use optim::{clip_global_norm, Adam, SgdMomentum};

use crate::attacks::{adv_train_step, attack};
use crate::dataio::{self, split_halves, Dataset};
use crate::diffgraph::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::lognormal::{normal_quantile, BoundDist};
use crate::rng::mix;
use crate::supernet::{
    bound_graph, constant_c, discretize, ln_sampled_bound, network_bound_dist, sample_arch, sample_constants,
    sample_reparam, ArchDistribution, ArchParamIds, ArchSample, Genotype, Lambdas, Network, Supernet, SupernetWeights,
    WeightIds,
};

/// Dual variable and penalty of the augmented Lagrangian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmmState {
    pub theta: f64,
    pub rho: f64,
}

/// `mu + Phi^-1(eta) var - ln(lambda_star)`; `-inf` for the zero bound.
pub fn constraint_value(bound: &BoundDist, eta: f64, lambda_star: f64) -> Result<f64> {
    if !(lambda_star > 0.0) {
        return Err(Error::domain(format!("lambda_star must be > 0, got {lambda_star}")));
    }
    let q = normal_quantile(eta)?;
    Ok(match bound.params() {
        None => f64::NEG_INFINITY,
        Some(p) => p.mu() + q * p.var() - lambda_star.ln(),
    })
}

/// Graph node for the constraint value given the bound's `mu` and `var`.
pub fn constraint_node(g: &mut Graph, mu: NodeId, var: NodeId, eta: f64, lambda_star: f64) -> Result<NodeId> {
    let q = normal_quantile(eta)?;
    let qv = g.scale(var, q);
    let s = g.add(mu, qv)?;
    Ok(g.add_const(s, -lambda_star.ln()))
}

/// `ce + theta c + (rho/2) c^2` inside the graph.
pub fn augmented_lagrangian(g: &mut Graph, ce: NodeId, c: NodeId, state: &AdmmState) -> Result<NodeId> {
    let lin = g.scale(c, state.theta);
    let sq = g.mul(c, c)?;
    let pen = g.scale(sq, 0.5 * state.rho);
    let l = g.add(ce, lin)?;
    g.add(l, pen)
}

/// `theta <- max(0, theta + rho c)`; without `clamp` the multiplier may go
/// negative.
pub fn dual_step(state: &AdmmState, c: f64, clamp: bool) -> AdmmState {
    let theta = state.theta + state.rho * c;
    AdmmState {
        theta: if clamp { theta.max(0.0) } else { theta },
        rho: state.rho,
    }
}

/// One row of the search history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub ce: f64,
    pub c: f64,
    pub theta: f64,
    pub mu: f64,
    pub var: f64,
    pub prob_bound_le_lambda: f64,
}

pub const CHECKPOINT_VERSION: u32 = 1;

const CHECKPOINT_KEYS: &[&str] = &[
    "config",
    "epoch",
    "weights",
    "dist",
    "admm",
    "weight_opt",
    "arch_opt",
    "lambda_star",
    "history",
];

/// Everything needed to continue a search exactly. Random streams are
/// addressed by `(seed, epoch, step)`, so no generator state is stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    pub config: SearchConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub weights: SupernetWeights,
    pub dist: ArchDistribution,
    pub admm: AdmmState,
    pub weight_opt: SgdMomentum,
    pub arch_opt: Adam,
    pub lambda_star: f64,
    pub history: Vec<HistoryRow>,
}

impl SearchState {
    pub fn init(config: &SearchConfig, lambda_star: f64) -> Result<Self> {
        config.validate()?;
        let weights = SupernetWeights::init(&config.supernet, config.seed, config.weight_gain)?;
        let dist = ArchDistribution::new(&config.supernet, config.arch_init)?;
        let weight_opt = SgdMomentum::new(
            config.weight_lr,
            config.weight_momentum,
            config.weight_decay,
            &weights.tensors(),
        );
        let arch_opt = Adam::new(config.arch_lr, config.arch_weight_decay, &dist.tensors());
        Ok(Self {
            config: config.clone(),
            epoch: 0,
            weights,
            dist,
            admm: AdmmState {
                theta: 0.0,
                rho: config.rho,
            },
            weight_opt,
            arch_opt,
            lambda_star,
            history: Vec::new(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        dataio::save_versioned(path, CHECKPOINT_VERSION, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        dataio::load_versioned(path, CHECKPOINT_VERSION, CHECKPOINT_KEYS)
    }

    pub fn lambdas(&self) -> Lambdas {
        Lambdas::compute_with(
            &self.config.supernet,
            &self.weights,
            self.config.lambda_iters,
            self.config.lambda_tol,
        )
    }

    /// Log-normal network bound at the current weights.
    pub fn bound(&self) -> Result<BoundDist> {
        let c = constant_c(&self.weights);
        network_bound_dist(&self.config.supernet, &self.dist, &self.lambdas(), c)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub ce: f64,
    pub c: f64,
    /// `ln` of the sampled bound of the architecture draw used.
    pub ln_bound: f64,
}

fn ensure_finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} = {v}")))
    }
}

/// One SGD step on the weights under a fresh architecture draw.
pub fn weight_step(net: &Supernet, state: &mut SearchState, batch: &Dataset, stream: u64) -> Result<f64> {
    let cfg = &state.config;
    let sample = sample_arch(net.spec(), &state.dist, cfg.seed, stream);
    let mut g = Graph::new();
    let w = WeightIds::register(&mut g, &state.weights, true);
    let arch = sample_constants(&mut g, &sample);
    let x = g.constant(batch.x.clone());
    let z = net.forward(&mut g, &w, &arch, x)?;
    let loss = g.softmax_cross_entropy(z, &batch.y)?;
    let ce = ensure_finite(g.scalar(loss), "weight-step loss")?;
    g.backward(loss)?;
    let mut grads: Vec<_> = w.all().iter().map(|id| g.grad(*id).cloned()).collect();
    clip_global_norm(&mut grads, cfg.grad_clip);
    let mut params = state.weights.tensors_mut();
    state.weight_opt.step(&mut params, &grads);
    Ok(ce)
}

/// One architecture step: a reparameterized forward pass on `batch`, the
/// augmented Lagrangian built on top of it, and an Adam step on all
/// distribution parameters.
///
/// Both the `mu` and the `log_sigma` gradients are taken at the pre-step
/// point, so the `mu` update sees the old `sigma` and vice versa.
pub fn arch_step(net: &Supernet, state: &mut SearchState, batch: &Dataset, lambdas: &Lambdas, stream: u64) -> Result<StepStats> {
    let spec = net.spec();
    let cfg = &state.config;
    let sample = sample_arch(spec, &state.dist, cfg.seed, stream);
    let x_in = if cfg.arch_adversarial {
        let model = Network::new(spec.clone(), state.weights.clone(), sample.clone())?;
        let acfg = crate::attacks::AttackConfig {
            seed: mix(&[cfg.seed, stream]),
            ..cfg.attack
        };
        attack(&model, &batch.x, &batch.y, &acfg)?
    } else {
        batch.x.clone()
    };
    let mut g = Graph::new();
    let ids = ArchParamIds::register(&mut g, &state.dist);
    let w = WeightIds::register(&mut g, &state.weights, false);
    let arch = sample_reparam(&mut g, spec, &ids, &sample)?;
    let x = g.constant(x_in);
    let z = net.forward(&mut g, &w, &arch, x)?;
    let ce_node = g.softmax_cross_entropy(z, &batch.y)?;
    let ce = ensure_finite(g.scalar(ce_node), "arch-step loss")?;
    let cc = constant_c(&state.weights);
    let ln_bound = ln_sampled_bound(spec, &sample, lambdas, cc);

    let (root, c) = if cfg.constrained() || state.admm.theta != 0.0 || !cfg.detach_unconstrained {
        match bound_graph(&mut g, spec, &ids, lambdas, cc)? {
            Some(b) => {
                let c_node = constraint_node(&mut g, b.mu, b.var, cfg.eta, state.lambda_star)?;
                let c = ensure_finite(g.scalar(c_node), "constraint")?;
                (augmented_lagrangian(&mut g, ce_node, c_node, &state.admm)?, c)
            }
            None => (ce_node, f64::NEG_INFINITY),
        }
    } else {
        let bound = network_bound_dist(spec, &state.dist, lambdas, cc)?;
        (ce_node, constraint_value(&bound, cfg.eta, state.lambda_star)?)
    };
    g.backward(root)?;
    let grads: Vec<_> = ids.all().iter().map(|id| g.grad(*id).cloned()).collect();
    let mut params = state.dist.tensors_mut();
    state.arch_opt.step(&mut params, &grads);
    if !state.dist.is_finite() {
        return Err(Error::NonFinite("architecture parameters".into()));
    }
    Ok(StepStats { ce, c, ln_bound })
}

/// Data split into the weight half and the architecture half.
#[derive(Debug, Clone)]
pub struct SearchData {
    pub weight_half: Dataset,
    pub arch_half: Dataset,
}

impl SearchData {
    pub fn new(train: &Dataset, seed: u64) -> Self {
        let (weight_half, arch_half) = split_halves(train, seed);
        Self { weight_half, arch_half }
    }
}

/// Runs one epoch: interleaved weight and architecture steps over the two
/// halves, dual updates per the schedule. Returns the mean CE of the
/// architecture steps and the log sampled bound of each step.
fn run_epoch(net: &Supernet, state: &mut SearchState, data: &SearchData) -> Result<(f64, Vec<f64>)> {
    let cfg = state.config.clone();
    let e = state.epoch as u64;
    let w_order = dataio::shuffled(data.weight_half.len(), cfg.seed, 2 * e);
    let a_order = dataio::shuffled(data.arch_half.len(), cfg.seed, 2 * e + 1);
    let w_batches = data.weight_half.batches(&w_order, cfg.batch_size);
    let a_batches = data.arch_half.batches(&a_order, cfg.batch_size);
    let steps = w_batches.len().max(a_batches.len());
    let mut ce_sum = 0.0;
    let mut ce_n = 0;
    let mut bounds = Vec::with_capacity(steps);
    for k in 0..steps {
        if let Some(b) = w_batches.get(k) {
            weight_step(net, state, b, mix(&[e, k as u64, 0]))?;
        }
        if let Some(b) = a_batches.get(k) {
            let lambdas = state.lambdas();
            let s = arch_step(net, state, b, &lambdas, mix(&[e, k as u64, 1]))?;
            ce_sum += s.ce;
            ce_n += 1;
            bounds.push(s.ln_bound);
            if cfg.dual_schedule == DualSchedule::ArchStep && cfg.constrained() && s.c.is_finite() {
                state.admm = dual_step(&state.admm, s.c, cfg.dual_clamp);
            }
        }
    }
    if cfg.dual_schedule == DualSchedule::Epoch && cfg.constrained() {
        let c = constraint_value(&state.bound()?, cfg.eta, state.lambda_star)?;
        if c.is_finite() {
            state.admm = dual_step(&state.admm, c, cfg.dual_clamp);
        }
    }
    Ok((if ce_n > 0 { ce_sum / ce_n as f64 } else { f64::NAN }, bounds))
}

fn history_row(state: &SearchState, ce: f64) -> Result<HistoryRow> {
    let cfg = &state.config;
    let bound = state.bound()?;
    let c = constraint_value(&bound, cfg.eta, state.lambda_star)?;
    let (mu, var) = bound.params().map_or((f64::NEG_INFINITY, 0.0), |p| (p.mu(), p.var()));
    Ok(HistoryRow {
        epoch: state.epoch,
        ce,
        c,
        theta: state.admm.theta,
        mu,
        var,
        prob_bound_le_lambda: bound.cdf(state.lambda_star),
    })
}

/// Chooses `lambda*` by running unconstrained epochs from the initial state
/// and taking a quantile of the sampled bounds.
pub fn calibrate_lambda_star(config: &SearchConfig, data: &SearchData) -> Result<f64> {
    match config.lambda_star {
        LambdaStar::Fixed { value } => Ok(value),
        LambdaStar::Calibrate { epochs, quantile } => {
            let cfg = SearchConfig {
                epochs,
                ..config.unconstrained()
            };
            let net = Supernet::new(cfg.supernet.clone())?;
            let mut state = SearchState::init(&cfg, 1.0)?;
            let mut logs = Vec::new();
            for _ in 0..epochs {
                let (_, b) = run_epoch(&net, &mut state, data)?;
                logs.extend(b);
                state.epoch += 1;
            }
            logs.retain(|v| v.is_finite());
            if logs.is_empty() {
                return Err(Error::domain("calibration saw no finite bounds"));
            }
            logs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            let pos = quantile * (logs.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let v = logs[lo] + (pos - lo as f64) * (logs[hi] - logs[lo]);
            Ok(v.exp())
        }
    }
}

/// Result of a search run.
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub genotype: Genotype,
    pub state: SearchState,
}

/// Output locations used by [`search_loop`].
#[derive(Debug, Clone)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn checkpoint(&self, epoch: usize) -> PathBuf {
        self.0.join("checkpoints").join(format!("epoch_{epoch:03}.json"))
    }

    pub fn abort_checkpoint(&self) -> PathBuf {
        self.0.join("checkpoints").join("abort.json")
    }

    pub fn history(&self) -> PathBuf {
        self.0.join("history.csv")
    }

    pub fn genotype(&self) -> PathBuf {
        self.0.join("genotype.json")
    }
}

/// Full search: calibrate `lambda*` if asked, then run `config.epochs`
/// epochs, checkpointing after each one when `out` is given, and
/// discretize.
pub fn search_loop(config: &SearchConfig, train: &Dataset, out: Option<&RunDir>) -> Result<SearchOutcome> {
    config.validate()?;
    let data = SearchData::new(train, config.seed);
    let lambda_star = calibrate_lambda_star(config, &data)?;
    log::info!("lambda* = {lambda_star:.6}");
    let state = SearchState::init(config, lambda_star)?;
    continue_search(state, &data, out)
}

/// Continues a search from `state` until `state.config.epochs`.
pub fn continue_search(mut state: SearchState, data: &SearchData, out: Option<&RunDir>) -> Result<SearchOutcome> {
    let net = Supernet::new(state.config.supernet.clone())?;
    if let Some(dir) = out {
        fs::create_dir_all(dir.0.join("checkpoints")).map_err(|e| Error::io(&dir.0, e))?;
    }
    while state.epoch < state.config.epochs {
        let before = state.clone();
        let result = run_epoch(&net, &mut state, data).and_then(|(ce, _)| {
            ensure_finite(ce, "epoch loss")?;
            state.epoch += 1;
            let row = history_row(&state, ce)?;
            for v in [row.c, row.theta, row.mu, row.var] {
                if !v.is_finite() && v != f64::NEG_INFINITY {
                    return Err(Error::NonFinite(format!("history at epoch {}", row.epoch)));
                }
            }
            Ok(row)
        });
        let row = match result {
            Ok(r) => r,
            Err(e) => {
                if let Some(dir) = out {
                    before.save(dir.abort_checkpoint())?;
                }
                return Err(e);
            }
        };
        log::info!(
            "epoch {} ce {:.4} c {:.4} theta {:.5} mu {:.4} var {:.4} pr {:.3}",
            row.epoch,
            row.ce,
            row.c,
            row.theta,
            row.mu,
            row.var,
            row.prob_bound_le_lambda
        );
        state.history.push(row);
        if let Some(dir) = out {
            state.save(dir.checkpoint(state.epoch))?;
            dataio::write_csv(dir.history(), &state.history)?;
        }
    }
    let genotype = discretize(&state.config.supernet, &state.dist, state.config.scoring, state.config.seed);
    if let Some(dir) = out {
        genotype.save(dir.genotype())?;
        dataio::write_csv(dir.history(), &state.history)?;
    }
    Ok(SearchOutcome { genotype, state })
}

/// One row of a retraining curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone)]
pub struct RetrainOutcome {
    pub network: Network,
    pub curve: Vec<TrainRow>,
}

pub const MODEL_VERSION: u32 = 1;

const MODEL_KEYS: &[&str] = &["spec", "genotype", "weights"];

/// A retrained discrete network on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub spec: crate::supernet::SupernetSpec,
    pub genotype: Genotype,
    pub weights: SupernetWeights,
}

impl SavedModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        dataio::save_versioned(path, MODEL_VERSION, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        dataio::load_versioned(path, MODEL_VERSION, MODEL_KEYS)
    }

    pub fn network(&self) -> Result<Network> {
        Network::discrete(self.spec.clone(), self.weights.clone(), &self.genotype)
    }
}

/// Trains the discrete network of `genotype` from fresh weights on the
/// whole training set, optionally on PGD examples.
pub fn retrain(
    genotype: &Genotype,
    config: &SearchConfig,
    adversarial: bool,
    train: &Dataset,
    test: Option<&Dataset>,
) -> Result<RetrainOutcome> {
    config.validate()?;
    let spec = config.supernet.clone();
    let rc = &config.retrain;
    let net = Supernet::new(spec.clone())?;
    genotype.validate(&spec)?;
    let arch: ArchSample = genotype.as_sample(&spec);
    let mut weights = SupernetWeights::init(&spec, mix(&[config.seed, 1]), config.weight_gain)?;
    let mut opt = SgdMomentum::new(rc.lr, rc.momentum, rc.weight_decay, &weights.tensors());
    let mut curve = Vec::with_capacity(rc.epochs);
    for epoch in 0..rc.epochs {
        // Cosine decay of the step size.
        opt.lr = 0.5 * rc.lr * (1.0 + (std::f64::consts::PI * epoch as f64 / rc.epochs as f64).cos());
        let order = dataio::shuffled(train.len(), mix(&[config.seed, 2]), epoch as u64);
        let mut loss_sum = 0.0;
        let batches = train.batches(&order, rc.batch_size);
        for (k, b) in batches.iter().enumerate() {
            let x_in = if adversarial {
                let model = Network::new(spec.clone(), weights.clone(), arch.clone())?;
                let acfg = crate::attacks::AttackConfig {
                    seed: mix(&[config.seed, epoch as u64, k as u64]),
                    ..rc.attack
                };
                adv_train_step(&model, &b.x, &b.y, &acfg)?.x_adv
            } else {
                b.x.clone()
            };
            let mut g = Graph::new();
            let w = WeightIds::register(&mut g, &weights, true);
            let a = sample_constants(&mut g, &arch);
            let x = g.constant(x_in);
            let z = net.forward(&mut g, &w, &a, x)?;
            let loss = g.softmax_cross_entropy(z, &b.y)?;
            loss_sum += ensure_finite(g.scalar(loss), "retrain loss")?;
            g.backward(loss)?;
            let mut grads: Vec<_> = w.all().iter().map(|id| g.grad(*id).cloned()).collect();
            clip_global_norm(&mut grads, rc.grad_clip);
            let mut params = weights.tensors_mut();
            opt.step(&mut params, &grads);
        }
        let model = Network::new(spec.clone(), weights.clone(), arch.clone())?;
        let train_acc = crate::supernet::Model::accuracy(&model, &train.x, &train.y)?;
        let test_acc = match test {
            Some(t) => crate::supernet::Model::accuracy(&model, &t.x, &t.y)?,
            None => f64::NAN,
        };
        let row = TrainRow {
            epoch: epoch + 1,
            loss: loss_sum / batches.len().max(1) as f64,
            train_acc,
            test_acc,
        };
        log::info!("retrain epoch {} loss {:.4} train {:.4} test {:.4}", row.epoch, row.loss, row.train_acc, row.test_acc);
        curve.push(row);
    }
    Ok(RetrainOutcome {
        network: Network::new(spec, weights, arch)?,
        curve,
    })
}
