//! The federated round loop: client sampling, local updates under a chosen
//! objective, and sample-weighted delta aggregation.
//!
//! Every random draw is keyed by `(master_seed, round, client, epoch)`, so a
//! run is bit-reproducible whether or not the participants of a round train
//! in parallel.

use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    class_priors, loss_cal, loss_ce, loss_dis, loss_feded, loss_logit, prox_term, ClassPrior, LossResult,
};
use crate::metrics::{evaluate, summarize_runs, RoundReport, RunSummary};
use crate::nn::{sgd_step, Mlp, OptimizerState};
use crate::partition::Partition;
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::scalar::Scalar;

/// Local training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Method {
    /// Plain cross-entropy.
    FedAvg,
    /// Cross-entropy plus `(μ/2)‖ω − ω_g‖²`.
    FedProx { mu: f64 },
    /// Prior-calibrated cross-entropy only.
    Calibrated,
    /// Calibration, empty-class distillation weighted by `lambda`, and logit
    /// suppression.
    FedEd { lambda: f64 },
    /// Calibration and logit suppression.
    FedEdNoDis,
    /// Calibration and distillation.
    FedEdNoLogit { lambda: f64 },
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::FedAvg => "fedavg".into(),
            Method::FedProx { mu } => format!("fedprox(mu={mu})"),
            Method::Calibrated => "calibrated".into(),
            Method::FedEd { lambda } => format!("feded(lambda={lambda})"),
            Method::FedEdNoDis => "feded_no_dis".into(),
            Method::FedEdNoLogit { lambda } => format!("feded_no_logit(lambda={lambda})"),
        }
    }

    fn validate(&self) -> Result<()> {
        let (name, v) = match *self {
            Method::FedProx { mu } => ("mu", mu),
            Method::FedEd { lambda } | Method::FedEdNoLogit { lambda } => ("lambda", lambda),
            _ => return Ok(()),
        };
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::Config(format!(
                "{name} must be finite and non-negative, got {v}"
            )));
        }
        Ok(())
    }
}

/// Denominator of the aggregation weights `|D_i| / denominator`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationWeights {
    /// Sum of the participants' sample counts: weights sum to one.
    #[default]
    Participants,
    /// Total sample count over all clients, literally as in the delta update.
    /// Under partial participation the step shrinks by the unsampled share.
    AllClients,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub rounds: usize,
    pub clients: usize,
    pub participation_rate: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub method: Method,
    /// Multiplier on the logit suppression term. The standard objective
    /// uses 1; anything else is an extension.
    pub logit_weight: f64,
    pub master_seed: u64,
    /// Hidden layer widths; input and output widths come from the data.
    pub hidden_widths: Vec<usize>,
    pub aggregation: AggregationWeights,
    /// Train the participants of a round on the rayon pool.
    pub parallel: bool,
    /// Record every participant's post-update class-wise test accuracy.
    pub diagnostics: bool,
    /// Record wall-clock time per round (makes reports non-reproducible).
    pub record_timing: bool,
}

impl Default for FedConfig {
    /// MNIST settings: 10 clients, full participation, 50 rounds of 5 local
    /// epochs, SGD at 0.01 with momentum 0.9, batch 64, weight decay 1e-5.
    fn default() -> Self {
        Self {
            rounds: 50,
            clients: 10,
            participation_rate: 1.0,
            local_epochs: 5,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-5,
            method: Method::FedEd { lambda: 0.1 },
            logit_weight: 1.0,
            master_seed: 0,
            hidden_widths: vec![256, 128],
            aggregation: AggregationWeights::Participants,
            parallel: false,
            diagnostics: false,
            record_timing: false,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rounds", self.rounds),
            ("clients", self.clients),
            ("local_epochs", self.local_epochs),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.participation_rate > 0.0 && self.participation_rate <= 1.0) {
            return Err(Error::Config(format!(
                "participation_rate must lie in (0, 1], got {}",
                self.participation_rate
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be finite and non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(self.logit_weight >= 0.0 && self.logit_weight.is_finite()) {
            return Err(Error::Config(format!(
                "logit_weight must be finite and non-negative, got {}",
                self.logit_weight
            )));
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::Config("hidden_widths must all be positive".into()));
        }
        self.method.validate()
    }

    /// `max(⌊R·N⌋, 1)`. A tiny tolerance keeps e.g. `0.7 · 10` at 7.
    pub fn participants_per_round(&self) -> usize {
        participants_per_round(self.clients, self.participation_rate)
    }
}

fn participants_per_round(clients: usize, rate: f64) -> usize {
    ((rate * clients as f64 + 1e-9).floor() as usize).clamp(1, clients)
}

/// One client's view of the federation.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub indices: Vec<usize>,
    pub prior: ClassPrior,
}

impl ClientState {
    pub fn sample_count(&self) -> usize {
        self.indices.len()
    }
}

pub fn build_clients<T: Scalar>(partition: &Partition, train: &Dataset<T>) -> Result<Vec<ClientState>> {
    if partition.num_classes() != train.num_classes() {
        return Err(Error::Shape(format!(
            "partition covers {} classes, dataset has {}",
            partition.num_classes(),
            train.num_classes()
        )));
    }
    partition
        .clients()
        .iter()
        .enumerate()
        .map(|(id, indices)| {
            let labels: Vec<usize> = indices
                .iter()
                .map(|&i| {
                    train.labels().get(i).copied().ok_or_else(|| {
                        Error::Partition(format!("client {id}: index {i} outside the dataset"))
                    })
                })
                .collect::<Result<_>>()?;
            Ok(ClientState {
                id,
                indices: indices.clone(),
                prior: class_priors(&labels, train.num_classes())?,
            })
        })
        .collect()
}

/// Clients taking part in round `round`, ascending. Uniform without
/// replacement; deterministic in `(master_seed, round)`.
pub fn select_clients(clients: usize, rate: f64, round: usize, master_seed: u64) -> Vec<usize> {
    let m = participants_per_round(clients, rate);
    if m == clients {
        return (0..clients).collect();
    }
    let mut rng = stream_rng(Stream::ClientSelection, &[master_seed, round as u64]);
    let mut chosen = index::sample(&mut rng, clients, m).into_vec();
    chosen.sort_unstable();
    chosen
}

/// Result of one client's LocalUpdate.
#[derive(Debug, Clone)]
pub struct LocalOutcome<T> {
    pub model: Mlp<T>,
    pub mean_loss: f64,
    pub steps: usize,
}

/// Minibatch objective for `method`, excluding the FedProx proximal term.
fn batch_objective<T: Scalar>(
    method: Method,
    logit_weight: f64,
    teacher: &Mlp<T>,
    logits: &ndarray::Array2<T>,
    features: &ndarray::Array2<T>,
    labels: &[usize],
    prior: &ClassPrior,
) -> Result<LossResult<T>> {
    let (distill, suppress) = match method {
        Method::FedAvg | Method::FedProx { .. } => return loss_ce(logits.view(), labels),
        Method::Calibrated => (None, false),
        Method::FedEd { lambda } => (Some(lambda), true),
        Method::FedEdNoDis => (None, true),
        Method::FedEdNoLogit { lambda } => (Some(lambda), false),
    };
    if let (Some(lambda), true) = (distill, suppress && logit_weight == 1.0) {
        let teacher_logits = teacher.logits(features.view())?;
        return loss_feded(logits.view(), teacher_logits.view(), labels, prior, T::of(lambda));
    }
    let mut out = loss_cal(logits.view(), labels, prior)?;
    if let Some(lambda) = distill {
        let teacher_logits = teacher.logits(features.view())?;
        let dis = loss_dis(logits.view(), teacher_logits.view(), prior.empty_classes())?;
        out.accumulate(T::of(lambda), &dis);
    }
    if suppress {
        out.accumulate(T::of(logit_weight), &loss_logit(logits.view(), labels, prior)?);
    }
    Ok(out)
}

/// Trains a copy of `global` on the client's data for `local_epochs` epochs.
///
/// The round-start `global` doubles as the frozen distillation teacher and
/// the proximal anchor. Momentum buffers start from zero every round.
pub fn local_update<T: Scalar>(
    global: &Mlp<T>,
    client: &ClientState,
    train: &Dataset<T>,
    config: &FedConfig,
    round: usize,
) -> Result<LocalOutcome<T>> {
    let mut local = global.clone();
    let mut opt = OptimizerState::new(
        &local,
        T::of(config.learning_rate),
        T::of(config.momentum),
        T::of(config.weight_decay),
    )?;
    let mut loss_sum = 0.0;
    let mut steps = 0;
    for epoch in 0..config.local_epochs {
        let seed = derive_seed(&[config.master_seed, client.id as u64, round as u64, epoch as u64]);
        for (b, batch) in batch_iter(train, &client.indices, config.batch_size, seed)?.enumerate() {
            let batch = batch?;
            let (logits, cache) = local.forward(batch.features.view())?;
            let loss = batch_objective(
                config.method,
                config.logit_weight,
                global,
                &logits,
                &batch.features,
                &batch.labels,
                &client.prior,
            )?;
            let mut grads = local.backward(&cache, loss.dlogits.view())?;
            let mut value = loss.value.as_f64();
            if let Method::FedProx { mu } = config.method {
                let (prox, prox_grad) = prox_term(&local, global, T::of(mu))?;
                value += prox.as_f64();
                grads.add_scaled(T::one(), &prox_grad)?;
            }
            if !value.is_finite() {
                return Err(Error::Divergence {
                    client: client.id,
                    round,
                    epoch,
                    batch: b,
                    loss: value,
                });
            }
            sgd_step(&mut local, &grads, &mut opt)?;
            loss_sum += value;
            steps += 1;
        }
    }
    if !local.is_finite() {
        return Err(Error::Divergence {
            client: client.id,
            round,
            epoch: config.local_epochs.saturating_sub(1),
            batch: steps,
            loss: f64::NAN,
        });
    }
    Ok(LocalOutcome {
        model: local,
        mean_loss: loss_sum / steps.max(1) as f64,
        steps,
    })
}

/// `ω ← ω + Σ_i (|D_i| / denominator) · (ω_i − ω)`, summed in the order
/// given.
pub fn aggregate<T: Scalar>(
    global: &Mlp<T>,
    locals: &[(&Mlp<T>, usize)],
    denominator: usize,
) -> Result<Mlp<T>> {
    if denominator == 0 {
        return Err(Error::Usage("aggregation denominator is zero".into()));
    }
    let mut next = global.clone();
    for (local, count) in locals {
        let weight = T::of(*count as f64 / denominator as f64);
        next.add_scaled_delta(weight, local, global)?;
    }
    Ok(next)
}

/// Initial global model for a run: widths `[d, hidden..., C]`.
pub fn initial_model<T: Scalar>(config: &FedConfig, input: usize, classes: usize) -> Result<Mlp<T>> {
    let mut widths = vec![input];
    widths.extend_from_slice(&config.hidden_widths);
    widths.push(classes);
    Mlp::init(&widths, config.master_seed)
}

#[derive(Debug, Clone)]
pub struct ExperimentRun<T> {
    pub reports: Vec<RoundReport>,
    pub final_model: Mlp<T>,
}

impl<T> ExperimentRun<T> {
    pub fn final_accuracy(&self) -> f64 {
        self.reports.last().map_or(f64::NAN, |r| r.global_accuracy)
    }
}

pub fn run_experiment<T: Scalar>(
    config: &FedConfig,
    train: &Dataset<T>,
    test: &Dataset<T>,
    partition: &Partition,
) -> Result<Vec<RoundReport>> {
    run_experiment_from(config, train, test, partition, None).map(|r| r.reports)
}

/// Full run, optionally starting from a given global model instead of a
/// freshly initialised one.
pub fn run_experiment_from<T: Scalar>(
    config: &FedConfig,
    train: &Dataset<T>,
    test: &Dataset<T>,
    partition: &Partition,
    start: Option<Mlp<T>>,
) -> Result<ExperimentRun<T>> {
    config.validate()?;
    if partition.num_clients() != config.clients {
        return Err(Error::Config(format!(
            "partition has {} clients, config expects {}",
            partition.num_clients(),
            config.clients
        )));
    }
    if train.dim() != test.dim() || train.num_classes() != test.num_classes() {
        return Err(Error::Shape("train and test splits disagree in shape".into()));
    }
    let clients = build_clients(partition, train)?;
    let total: usize = clients.iter().map(ClientState::sample_count).sum();
    let mut global = match start {
        Some(m) => {
            if m.input_width() != train.dim() || m.num_classes() != train.num_classes() {
                return Err(Error::Shape("starting model does not fit the dataset".into()));
            }
            m
        }
        None => initial_model(config, train.dim(), train.num_classes())?,
    };

    let mut reports = Vec::with_capacity(config.rounds);
    for round in 1..=config.rounds {
        let started = Instant::now();
        let chosen = select_clients(
            config.clients,
            config.participation_rate,
            round,
            config.master_seed,
        );
        let train_one = |&i: &usize| local_update(&global, &clients[i], train, config, round);
        let outcomes: Vec<LocalOutcome<T>> = if config.parallel {
            chosen.par_iter().map(train_one).collect::<Result<_>>()?
        } else {
            chosen.iter().map(train_one).collect::<Result<_>>()?
        };

        let client_classwise = if config.diagnostics {
            let mut per_client = vec![None; config.clients];
            for (&i, o) in chosen.iter().zip(&outcomes) {
                per_client[i] = Some(evaluate(&o.model, test)?.classwise_accuracy);
            }
            Some(per_client)
        } else {
            None
        };

        let denominator = match config.aggregation {
            AggregationWeights::Participants => chosen.iter().map(|&i| clients[i].sample_count()).sum(),
            AggregationWeights::AllClients => total,
        };
        let locals: Vec<(&Mlp<T>, usize)> = chosen
            .iter()
            .zip(&outcomes)
            .map(|(&i, o)| (&o.model, clients[i].sample_count()))
            .collect();
        global = aggregate(&global, &locals, denominator)?;

        let eval = evaluate(&global, test)?;
        let steps: usize = outcomes.iter().map(|o| o.steps).sum();
        let loss_total: f64 = outcomes.iter().map(|o| o.mean_loss * o.steps as f64).sum();
        reports.push(RoundReport {
            round,
            global_accuracy: eval.global_accuracy,
            classwise_accuracy: eval.classwise_accuracy,
            mean_train_loss: loss_total / steps.max(1) as f64,
            client_classwise,
            wall_time: config.record_timing.then(|| started.elapsed().as_secs_f64()),
        });
    }
    Ok(ExperimentRun {
        reports,
        final_model: global,
    })
}

/// Mean post-update accuracy on each participant's empty classes, averaged
/// over every (round, client) pair with at least one empty class. `None`
/// without diagnostics or empty classes.
pub fn empty_class_retention(reports: &[RoundReport], partition: &Partition) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in reports {
        for (k, acc) in r.client_classwise.as_ref()?.iter().enumerate() {
            let Some(acc) = acc else { continue };
            let empty: Vec<usize> = partition.count_matrix()[k]
                .iter()
                .enumerate()
                .filter(|(_, &c)| c == 0)
                .map(|(c, _)| c)
                .collect();
            if empty.is_empty() {
                continue;
            }
            sum += empty.iter().map(|&c| acc[c]).sum::<f64>() / empty.len() as f64;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// One independent repetition: a master seed and the partition used with it.
#[derive(Debug, Clone, Copy)]
pub struct Trial<'a> {
    pub seed: u64,
    pub partition: &'a Partition,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantResult {
    pub label: String,
    pub method: Method,
    pub final_accuracies: Vec<f64>,
    pub summary: RunSummary,
    pub empty_class_retention: Option<f64>,
    /// Per-trial round reports, in trial order.
    #[serde(skip)]
    pub runs: Vec<Vec<RoundReport>>,
}

/// Runs `config` with its method replaced by each of `methods`, once per
/// trial, and collects final accuracies.
pub fn compare_methods<T: Scalar>(
    base: &FedConfig,
    methods: &[(String, Method)],
    train: &Dataset<T>,
    test: &Dataset<T>,
    trials: &[Trial<'_>],
) -> Result<Vec<VariantResult>> {
    if trials.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    methods
        .iter()
        .map(|(label, method)| {
            let mut runs = Vec::with_capacity(trials.len());
            let mut retention = Vec::new();
            for trial in trials {
                let config = FedConfig {
                    method: *method,
                    master_seed: trial.seed,
                    ..base.clone()
                };
                let reports = run_experiment(&config, train, test, trial.partition)?;
                if let Some(r) = empty_class_retention(&reports, trial.partition) {
                    retention.push(r);
                }
                runs.push(reports);
            }
            let finals: Vec<f64> = runs
                .iter()
                .map(|r| r.last().map_or(f64::NAN, |x| x.global_accuracy))
                .collect();
            Ok(VariantResult {
                label: label.clone(),
                method: *method,
                summary: summarize_runs(&finals)?,
                final_accuracies: finals,
                empty_class_retention: (retention.len() == trials.len())
                    .then(|| retention.iter().sum::<f64>() / retention.len() as f64),
                runs,
            })
        })
        .collect()
}

fn distillation_weight(method: Method) -> f64 {
    match method {
        Method::FedEd { lambda } | Method::FedEdNoLogit { lambda } => lambda,
        _ => 0.1,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub distillation: bool,
    pub logit_suppression: bool,
    pub result: VariantResult,
    /// Mean accuracy minus the first row's.
    pub delta_over_first: f64,
}

/// The four combinations of the two extra terms on top of calibration:
/// neither, suppression only, distillation only, both.
pub fn run_ablation_suite<T: Scalar>(
    base: &FedConfig,
    train: &Dataset<T>,
    test: &Dataset<T>,
    trials: &[Trial<'_>],
) -> Result<Vec<AblationRow>> {
    let lambda = distillation_weight(base.method);
    let grid = [
        (false, false, Method::Calibrated),
        (false, true, Method::FedEdNoDis),
        (true, false, Method::FedEdNoLogit { lambda }),
        (true, true, Method::FedEd { lambda }),
    ];
    let methods: Vec<(String, Method)> = grid.iter().map(|g| (g.2.label(), g.2)).collect();
    let results = compare_methods(base, &methods, train, test, trials)?;
    let first = results[0].summary.mean;
    Ok(grid
        .iter()
        .zip(results)
        .map(|(&(distillation, logit_suppression, _), result)| AblationRow {
            distillation,
            logit_suppression,
            delta_over_first: result.summary.mean - first,
            result,
        })
        .collect())
}

pub const DEFAULT_LAMBDA_GRID: [f64; 5] = [0.05, 0.1, 0.25, 0.5, 1.0];

pub fn run_lambda_sweep<T: Scalar>(
    base: &FedConfig,
    lambdas: &[f64],
    train: &Dataset<T>,
    test: &Dataset<T>,
    trials: &[Trial<'_>],
) -> Result<Vec<VariantResult>> {
    let methods: Vec<(String, Method)> = lambdas
        .iter()
        .map(|&lambda| (format!("lambda={lambda}"), Method::FedEd { lambda }))
        .collect();
    compare_methods(base, &methods, train, test, trials)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};
    use crate::partition::dirichlet_partition;

    fn toy() -> (Dataset<f64>, Dataset<f64>) {
        gen_synthetic(&SyntheticSpec {
            classes: 3,
            dim: 4,
            per_class: 20,
            spread: 1.0,
            separation: 2.0,
            seed: 5,
        })
        .unwrap()
    }

    fn small_config(method: Method) -> FedConfig {
        FedConfig {
            rounds: 2,
            clients: 3,
            local_epochs: 2,
            batch_size: 8,
            hidden_widths: vec![5],
            method,
            master_seed: 11,
            ..FedConfig::default()
        }
    }

    fn flat(m: &Mlp<f64>) -> Vec<f64> {
        m.to_flat()
    }

    #[test]
    fn selection_sizes_and_determinism() {
        for t in 1..5 {
            assert_eq!(select_clients(10, 1.0, t, 3), (0..10).collect::<Vec<_>>());
        }
        assert_eq!(select_clients(10, 0.05, 1, 3).len(), 1);
        assert_eq!(select_clients(10, 0.7, 1, 3).len(), 7);
        let a = select_clients(20, 0.3, 3, 9);
        assert_eq!(a, select_clients(20, 0.3, 3, 9));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(a.iter().all(|&i| i < 20));
        let varies = (1..20).any(|t| select_clients(20, 0.3, t, 9) != a);
        assert!(varies);
    }

    #[test]
    fn config_validation() {
        assert!(FedConfig::default().validate().is_ok());
        let bad = [
            FedConfig {
                rounds: 0,
                ..FedConfig::default()
            },
            FedConfig {
                participation_rate: 0.0,
                ..FedConfig::default()
            },
            FedConfig {
                participation_rate: 1.5,
                ..FedConfig::default()
            },
            FedConfig {
                momentum: 1.0,
                ..FedConfig::default()
            },
            FedConfig {
                learning_rate: f64::NAN,
                ..FedConfig::default()
            },
            FedConfig {
                logit_weight: -1.0,
                ..FedConfig::default()
            },
            FedConfig {
                method: Method::FedEd { lambda: -0.1 },
                ..FedConfig::default()
            },
            FedConfig {
                method: Method::FedProx { mu: f64::INFINITY },
                ..FedConfig::default()
            },
            FedConfig {
                hidden_widths: vec![3, 0],
                ..FedConfig::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn zero_learning_rate_returns_global() {
        let (train, _) = toy();
        let part = dirichlet_partition(train.labels(), 3, 3, 0.5, 1).unwrap();
        let clients = build_clients(&part, &train).unwrap();
        for method in [
            Method::FedAvg,
            Method::FedProx { mu: 0.01 },
            Method::FedEd { lambda: 0.1 },
        ] {
            let config = FedConfig {
                learning_rate: 0.0,
                ..small_config(method)
            };
            let global = initial_model::<f64>(&config, 4, 3).unwrap();
            let out = local_update(&global, &clients[0], &train, &config, 1).unwrap();
            assert_eq!(flat(&out.model), flat(&global));
            assert!(out.steps > 0);
        }
    }

    #[test]
    fn without_empty_classes_distillation_is_inert() {
        let (train, _) = toy();
        let all: Vec<usize> = (0..train.len()).collect();
        let part = Partition::new(vec![all], train.labels(), 3).unwrap();
        let clients = build_clients(&part, &train).unwrap();
        assert!(clients[0].prior.empty_classes().is_empty());
        let base = FedConfig {
            clients: 1,
            ..small_config(Method::FedEdNoDis)
        };
        let global = initial_model::<f64>(&base, 4, 3).unwrap();
        let reference = local_update(&global, &clients[0], &train, &base, 1).unwrap();
        for lambda in [0.0, 0.1, 7.0] {
            let config = FedConfig {
                method: Method::FedEd { lambda },
                ..base.clone()
            };
            let out = local_update(&global, &clients[0], &train, &config, 1).unwrap();
            assert_eq!(flat(&out.model), flat(&reference.model));
        }
    }

    #[test]
    fn single_step_matches_finite_difference_descent() {
        let (train, _) = toy();
        let idx: Vec<usize> = (0..train.len()).step_by(3).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| train.labels()[i]).collect();
        let client = ClientState {
            id: 0,
            prior: class_priors(&labels, 3).unwrap(),
            indices: idx.clone(),
        };
        let eta = 0.05;
        let config = FedConfig {
            clients: 1,
            local_epochs: 1,
            batch_size: idx.len(),
            learning_rate: eta,
            momentum: 0.0,
            weight_decay: 0.0,
            ..small_config(Method::FedAvg)
        };
        let global = initial_model::<f64>(&config, 4, 3).unwrap();
        let out = local_update(&global, &client, &train, &config, 1).unwrap();
        assert_eq!(out.steps, 1);

        let batch = train.gather(&idx).unwrap();
        let objective = |w: &[f64]| {
            let m = global.with_flat(w).unwrap();
            loss_ce(m.logits(batch.features.view()).unwrap().view(), &batch.labels)
                .unwrap()
                .value
        };
        let w0 = flat(&global);
        let h = 1e-6;
        for (k, (&w, &after)) in w0.iter().zip(&flat(&out.model)).enumerate() {
            let (mut up, mut down) = (w0.clone(), w0.clone());
            up[k] += h;
            down[k] -= h;
            let g = (objective(&up) - objective(&down)) / (2.0 * h);
            assert!((after - (w - eta * g)).abs() < 1e-8, "param {k}");
        }
    }

    #[test]
    fn aggregation_oracles() {
        let g = Mlp::<f64>::init(&[3, 2], 1).unwrap();
        let locals: Vec<Mlp<f64>> = (2..5).map(|s| Mlp::init(&[3, 2], s).unwrap()).collect();

        let mean = aggregate(&g, &[(&locals[0], 10), (&locals[1], 10), (&locals[2], 10)], 30).unwrap();
        for (k, v) in flat(&mean).iter().enumerate() {
            let m = locals.iter().map(|l| flat(l)[k]).sum::<f64>() / 3.0;
            assert!((v - m).abs() < 1e-14);
        }

        let same = aggregate(&g, &[(&g, 4), (&g, 6)], 10).unwrap();
        assert_eq!(flat(&same), flat(&g));

        let weighted = aggregate(&g, &[(&locals[0], 5), (&locals[1], 3), (&locals[2], 2)], 10).unwrap();
        let gw = flat(&g);
        for (k, v) in flat(&weighted).iter().enumerate() {
            let expect = gw[k]
                + 0.5 * (flat(&locals[0])[k] - gw[k])
                + 0.3 * (flat(&locals[1])[k] - gw[k])
                + 0.2 * (flat(&locals[2])[k] - gw[k]);
            assert!((v - expect).abs() < 1e-14);
        }
        assert!(matches!(aggregate(&g, &[], 0), Err(Error::Usage(_))));
    }

    #[test]
    fn frozen_model_keeps_initial_accuracy() {
        let (train, test) = toy();
        let part = dirichlet_partition(train.labels(), 3, 3, 0.5, 1).unwrap();
        let config = FedConfig {
            rounds: 1,
            learning_rate: 0.0,
            ..small_config(Method::FedEd { lambda: 0.1 })
        };
        let reports = run_experiment(&config, &train, &test, &part).unwrap();
        let initial = evaluate(&initial_model::<f64>(&config, 4, 3).unwrap(), &test).unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].round, 1);
        assert_eq!(reports[0].global_accuracy, initial.global_accuracy);
    }

    /// Centralised reference: one model, the same seeded batches, and for
    /// FedED a teacher snapshot taken at the start of every round.
    fn centralised(config: &FedConfig, train: &Dataset<f64>, prior: &ClassPrior) -> Mlp<f64> {
        let all: Vec<usize> = (0..train.len()).collect();
        let mut model = initial_model::<f64>(config, train.dim(), train.num_classes()).unwrap();
        for round in 1..=config.rounds {
            let teacher = model.clone();
            let mut opt =
                OptimizerState::new(&model, config.learning_rate, config.momentum, config.weight_decay)
                    .unwrap();
            for epoch in 0..config.local_epochs {
                let seed = derive_seed(&[config.master_seed, 0, round as u64, epoch as u64]);
                for batch in batch_iter(train, &all, config.batch_size, seed).unwrap() {
                    let batch = batch.unwrap();
                    let (logits, cache) = model.forward(batch.features.view()).unwrap();
                    let loss = match config.method {
                        Method::FedAvg => loss_ce(logits.view(), &batch.labels).unwrap(),
                        Method::FedEd { lambda } => {
                            let tl = teacher.logits(batch.features.view()).unwrap();
                            loss_feded(logits.view(), tl.view(), &batch.labels, prior, lambda).unwrap()
                        }
                        _ => unreachable!(),
                    };
                    let grads = model.backward(&cache, loss.dlogits.view()).unwrap();
                    sgd_step(&mut model, &grads, &mut opt).unwrap();
                }
            }
        }
        model
    }

    #[test]
    fn single_client_matches_centralised_training() {
        let (train, test) = toy();
        let all: Vec<usize> = (0..train.len()).collect();
        let part = Partition::new(vec![all], train.labels(), 3).unwrap();
        let prior = class_priors(train.labels(), 3).unwrap();
        for method in [Method::FedAvg, Method::FedEd { lambda: 0.3 }] {
            let config = FedConfig {
                clients: 1,
                rounds: 3,
                ..small_config(method)
            };
            let run = run_experiment_from(&config, &train, &test, &part, None).unwrap();
            let reference = centralised(&config, &train, &prior);
            for (a, b) in flat(&run.final_model).iter().zip(flat(&reference)) {
                assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn teacher_is_round_start_model() {
        // A client that lacks class 2: distillation is active, and matching
        // the centralised reference requires the teacher snapshot.
        let (train, test) = toy();
        let idx: Vec<usize> = (0..train.len()).filter(|&i| train.labels()[i] != 2).collect();
        let sub = train.subset(&idx).unwrap();
        let all: Vec<usize> = (0..sub.len()).collect();
        let part = Partition::new(vec![all], sub.labels(), 3).unwrap();
        let prior = class_priors(sub.labels(), 3).unwrap();
        assert_eq!(prior.empty_classes(), &[2]);
        let config = FedConfig {
            clients: 1,
            rounds: 2,
            ..small_config(Method::FedEd { lambda: 5.0 })
        };
        let run = run_experiment_from(&config, &sub, &test, &part, None).unwrap();
        let reference = centralised(&config, &sub, &prior);
        for (a, b) in flat(&run.final_model).iter().zip(flat(&reference)) {
            assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn parallel_and_sequential_runs_agree() {
        let (train, test) = toy();
        let part = dirichlet_partition(train.labels(), 3, 3, 0.3, 2).unwrap();
        let config = FedConfig {
            participation_rate: 0.7,
            diagnostics: true,
            ..small_config(Method::FedEd { lambda: 0.1 })
        };
        let seq = run_experiment(&config, &train, &test, &part).unwrap();
        let par = run_experiment(
            &FedConfig {
                parallel: true,
                ..config.clone()
            },
            &train,
            &test,
            &part,
        )
        .unwrap();
        assert_eq!(seq, par);
        assert_eq!(seq, run_experiment(&config, &train, &test, &part).unwrap());
    }

    #[test]
    fn all_clients_weighting_shrinks_partial_rounds() {
        let (train, test) = toy();
        let part = dirichlet_partition(train.labels(), 3, 3, 0.5, 4).unwrap();
        let config = FedConfig {
            rounds: 1,
            participation_rate: 0.34,
            aggregation: AggregationWeights::AllClients,
            ..small_config(Method::FedAvg)
        };
        let run = run_experiment_from(&config, &train, &test, &part, None).unwrap();
        let chosen = select_clients(3, 0.34, 1, config.master_seed);
        assert_eq!(chosen.len(), 1);
        let clients = build_clients(&part, &train).unwrap();
        let global = initial_model::<f64>(&config, 4, 3).unwrap();
        let local = local_update(&global, &clients[chosen[0]], &train, &config, 1).unwrap();
        let share = clients[chosen[0]].sample_count() as f64 / train.len() as f64;
        for ((a, g), l) in flat(&run.final_model)
            .iter()
            .zip(flat(&global))
            .zip(flat(&local.model))
        {
            assert!((a - (g + share * (l - g))).abs() < 1e-14);
        }
    }

    #[test]
    fn run_rejects_mismatched_partition() {
        let (train, test) = toy();
        let part = dirichlet_partition(train.labels(), 3, 2, 0.5, 1).unwrap();
        let err = run_experiment(&small_config(Method::FedAvg), &train, &test, &part).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn divergence_is_reported_with_location() {
        let (train, test) = toy();
        let part = dirichlet_partition(train.labels(), 3, 3, 0.5, 1).unwrap();
        let config = FedConfig {
            learning_rate: 1e6,
            momentum: 0.0,
            rounds: 50,
            ..small_config(Method::FedAvg)
        };
        match run_experiment(&config, &train, &test, &part) {
            Err(Error::Divergence { round, .. }) => assert!(round >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn retention_averages_empty_classes_of_participants() {
        let labels = [0, 0, 1, 1, 2, 2];
        let part = Partition::new(vec![vec![0, 1], vec![2, 3, 4, 5]], &labels, 3).unwrap();
        let report = |clients| RoundReport {
            round: 1,
            global_accuracy: 0.0,
            classwise_accuracy: vec![0.0; 3],
            mean_train_loss: 0.0,
            client_classwise: clients,
            wall_time: None,
        };
        let r = report(Some(vec![Some(vec![1.0, 0.2, 0.4]), Some(vec![0.9, 1.0, 1.0])]));
        // Client 0 lacks {1, 2}: 0.3. Client 1 lacks {0}: 0.9.
        assert!((empty_class_retention(&[r], &part).unwrap() - 0.6).abs() < 1e-12);
        let r = report(Some(vec![None, Some(vec![0.5, 1.0, 1.0])]));
        assert_eq!(empty_class_retention(&[r], &part), Some(0.5));
        assert_eq!(empty_class_retention(&[report(None)], &part), None);
    }
}
