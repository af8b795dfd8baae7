//! Local training objectives.
//!
//! Every logit-space loss returns the minibatch value together with its exact
//! gradient with respect to each logit, ready to be handed to
//! [`Mlp::backward`](crate::nn::Mlp::backward).
//!
//! * [`loss_ce`]: plain softmax cross-entropy.
//! * [`loss_cal`]: cross-entropy on prior-shifted logits `f[c] + ln p(c)`,
//!   normalised over the classes the client has actually seen.
//! * [`loss_dis`]: KL divergence from the frozen global model to the local
//!   model, both softmaxes restricted to the client's empty classes.
//! * [`loss_logit`]: prior-weighted log-mean-exp of each class's logit over
//!   the batch samples that do not carry that label.
//! * [`loss_feded`]: `cal + λ·dis + logit`.
//! * [`prox_term`]: `(μ/2)‖ω − ω_g‖²` in parameter space.

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Gradients, Mlp};
use crate::numerics::{lse_unchecked, softmax_unchecked};
use crate::scalar::Scalar;

/// Empirical label distribution of one client's training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior {
    counts: Vec<usize>,
    p: Vec<f64>,
    empty: Vec<usize>,
}

impl ClassPrior {
    pub fn from_counts(counts: Vec<usize>) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::Config(
                "class prior needs at least one labelled sample".into(),
            ));
        }
        let p = counts.iter().map(|&n| n as f64 / total as f64).collect();
        let empty = counts
            .iter()
            .enumerate()
            .filter(|(_, &n)| n == 0)
            .map(|(c, _)| c)
            .collect();
        Ok(Self { counts, p, empty })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Class frequencies `p(c)`.
    pub fn p(&self) -> &[f64] {
        &self.p
    }

    /// Ascending indices of classes with no samples.
    pub fn empty_classes(&self) -> &[usize] {
        &self.empty
    }

    pub fn is_empty_class(&self, c: usize) -> bool {
        self.counts[c] == 0
    }
}

pub fn class_priors(labels: &[usize], num_classes: usize) -> Result<ClassPrior> {
    if labels.is_empty() {
        return Err(Error::Config("class prior of an empty label list".into()));
    }
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        if y >= num_classes {
            return Err(Error::Config(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        counts[y] += 1;
    }
    ClassPrior::from_counts(counts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult<T> {
    pub value: T,
    pub dlogits: Array2<T>,
}

impl<T: Scalar> LossResult<T> {
    fn zero(batch: usize, classes: usize) -> Self {
        Self {
            value: T::zero(),
            dlogits: Array2::zeros((batch, classes)),
        }
    }

    pub(crate) fn accumulate(&mut self, weight: T, other: &LossResult<T>) {
        self.value = self.value + weight * other.value;
        self.dlogits.scaled_add(weight, &other.dlogits);
    }
}

fn check_batch<T: Scalar>(logits: &ArrayView2<T>, labels: &[usize]) -> Result<()> {
    let (b, c) = logits.dim();
    if b == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if labels.len() != b {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {b} logit rows",
            labels.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Shape(format!("label {y} out of range for {c} logits")));
    }
    Ok(())
}

fn check_prior<T: Scalar>(logits: &ArrayView2<T>, prior: &ClassPrior) -> Result<()> {
    if prior.num_classes() != logits.ncols() {
        return Err(Error::Shape(format!(
            "prior covers {} classes, logits have {}",
            prior.num_classes(),
            logits.ncols()
        )));
    }
    Ok(())
}

/// Mean softmax cross-entropy.
pub fn loss_ce<T: Scalar>(logits: ArrayView2<T>, labels: &[usize]) -> Result<LossResult<T>> {
    check_batch(&logits, labels)?;
    let (b, c) = logits.dim();
    let inv_b = T::one() / T::of(b as f64);
    let mut out = LossResult::zero(b, c);
    for (row, (&y, mut grad)) in logits
        .outer_iter()
        .zip(labels.iter().zip(out.dlogits.outer_iter_mut()))
    {
        let row = row.to_vec();
        out.value = out.value + (lse_unchecked(&row) - row[y]) * inv_b;
        for (g, q) in grad.iter_mut().zip(softmax_unchecked(&row)) {
            *g = q * inv_b;
        }
        grad[y] = grad[y] - inv_b;
    }
    Ok(out)
}

/// Prior-calibrated cross-entropy.
///
/// `−(1/B) Σ_b [ln p(y_b) + f_b[y_b] − ln Σ_{c∉O} p(c)·e^{f_b[c]}]`. Empty
/// classes have zero weight in the partition function, so their logits get
/// no gradient at all.
pub fn loss_cal<T: Scalar>(
    logits: ArrayView2<T>,
    labels: &[usize],
    prior: &ClassPrior,
) -> Result<LossResult<T>> {
    check_batch(&logits, labels)?;
    check_prior(&logits, prior)?;
    if let Some(&y) = labels.iter().find(|&&y| prior.is_empty_class(y)) {
        return Err(Error::Consistency(format!(
            "batch label {y} is an empty class of the client's prior"
        )));
    }
    let (b, c) = logits.dim();
    let observed: Vec<usize> = (0..c).filter(|&k| !prior.is_empty_class(k)).collect();
    let log_p: Vec<T> = observed.iter().map(|&k| T::of(prior.p()[k].ln())).collect();
    let inv_b = T::one() / T::of(b as f64);

    let mut out = LossResult::zero(b, c);
    let mut shifted = vec![T::zero(); observed.len()];
    for (row, (&y, mut grad)) in logits
        .outer_iter()
        .zip(labels.iter().zip(out.dlogits.outer_iter_mut()))
    {
        for ((s, &k), &lp) in shifted.iter_mut().zip(&observed).zip(&log_p) {
            *s = row[k] + lp;
        }
        let target = T::of(prior.p()[y].ln()) + row[y];
        out.value = out.value + (lse_unchecked(&shifted) - target) * inv_b;
        for (&k, q) in observed.iter().zip(softmax_unchecked(&shifted)) {
            grad[k] = q * inv_b;
        }
        grad[y] = grad[y] - inv_b;
    }
    Ok(out)
}

/// Empty-class distillation: `(1/B) Σ_b KL(q_g ‖ q)` with both softmaxes
/// taken over the classes in `empty` only.
///
/// `global_logits` come from the frozen round-start model and are treated as
/// constants. With fewer than two empty classes the restricted softmax is
/// identically one and the loss vanishes.
pub fn loss_dis<T: Scalar>(
    local_logits: ArrayView2<T>,
    global_logits: ArrayView2<T>,
    empty: &[usize],
) -> Result<LossResult<T>> {
    let (b, c) = local_logits.dim();
    if global_logits.dim() != (b, c) {
        return Err(Error::Shape(format!(
            "local logits {:?} vs global logits {:?}",
            local_logits.dim(),
            global_logits.dim()
        )));
    }
    if b == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if let Some(&o) = empty.iter().find(|&&o| o >= c) {
        return Err(Error::Shape(format!(
            "empty class {o} out of range for {c} logits"
        )));
    }
    let empty: Vec<usize> = empty
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut out = LossResult::zero(b, c);
    if empty.len() <= 1 {
        return Ok(out);
    }
    let inv_b = T::one() / T::of(b as f64);
    let mut local = vec![T::zero(); empty.len()];
    let mut global = vec![T::zero(); empty.len()];
    for ((lrow, grow), mut grad) in local_logits
        .outer_iter()
        .zip(global_logits.outer_iter())
        .zip(out.dlogits.outer_iter_mut())
    {
        for (i, &o) in empty.iter().enumerate() {
            local[i] = lrow[o];
            global[i] = grow[o];
        }
        let (lse_l, lse_g) = (lse_unchecked(&local), lse_unchecked(&global));
        let q = softmax_unchecked(&local);
        let qg = softmax_unchecked(&global);
        let mut kl = T::zero();
        for i in 0..empty.len() {
            // ln q_g − ln q, from log-softmax to stay finite for tiny q.
            let log_ratio = (global[i] - lse_g) - (local[i] - lse_l);
            kl = kl + qg[i] * log_ratio;
            grad[empty[i]] = (q[i] - qg[i]) * inv_b;
        }
        out.value = out.value + kl * inv_b;
    }
    Ok(out)
}

/// Logit suppression.
///
/// For each observed class `c` the batch term is
/// `L_c = ln((1/B) Σ_b 1{y_b ≠ c}·e^{f_b[c]})` and the loss is
/// `Σ_{c∉O} p(c)·L_c`. A class whose indicator set is empty in this batch
/// (every sample carries label `c`) is skipped.
pub fn loss_logit<T: Scalar>(
    logits: ArrayView2<T>,
    labels: &[usize],
    prior: &ClassPrior,
) -> Result<LossResult<T>> {
    check_batch(&logits, labels)?;
    check_prior(&logits, prior)?;
    let (b, c) = logits.dim();
    let ln_b = T::of(b as f64).ln();
    let mut out = LossResult::zero(b, c);
    let mut column: Vec<T> = Vec::with_capacity(b);
    let mut rows: Vec<usize> = Vec::with_capacity(b);
    for k in (0..c).filter(|&k| !prior.is_empty_class(k)) {
        column.clear();
        rows.clear();
        for (i, &y) in labels.iter().enumerate() {
            if y != k {
                rows.push(i);
                column.push(logits[[i, k]]);
            }
        }
        if rows.is_empty() {
            continue;
        }
        let weight = T::of(prior.p()[k]);
        out.value = out.value + weight * (lse_unchecked(&column) - ln_b);
        for (&i, s) in rows.iter().zip(softmax_unchecked(&column)) {
            out.dlogits[[i, k]] = weight * s;
        }
    }
    Ok(out)
}

/// Combined objective `cal + λ·dis + logit`, with the global model's logits
/// on the same batch as the distillation teacher.
pub fn loss_feded<T: Scalar>(
    local_logits: ArrayView2<T>,
    global_logits: ArrayView2<T>,
    labels: &[usize],
    prior: &ClassPrior,
    lambda: T,
) -> Result<LossResult<T>> {
    if lambda.is_nan() || lambda < T::zero() {
        return Err(Error::Config(format!(
            "distillation weight must be non-negative, got {lambda}"
        )));
    }
    let mut total = loss_cal(local_logits, labels, prior)?;
    let dis = loss_dis(local_logits, global_logits, prior.empty_classes())?;
    let logit = loss_logit(local_logits, labels, prior)?;
    total.accumulate(lambda, &dis);
    total.accumulate(T::one(), &logit);
    Ok(total)
}

/// Proximal penalty `(μ/2)‖ω − ω_g‖²` and its gradient `μ(ω − ω_g)`.
pub fn prox_term<T: Scalar>(params: &Mlp<T>, global: &Mlp<T>, mu: T) -> Result<(T, Gradients<T>)> {
    let sq = params.squared_distance(global)?;
    let mut grad = Gradients::zeros_like(params);
    grad.add_scaled_difference(mu, params, global)?;
    Ok((mu / T::of(2.0) * sq, grad))
}
