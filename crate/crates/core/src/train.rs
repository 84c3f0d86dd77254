//! Step-synchronous multi-source training.
//!
//! Every source trains its own copy of the encoder from the shared
//! initialization `theta0`. At each global step the driver first freezes the
//! mean update vector over all sources, then lets each source
//!
//! 1. measure its mean confidence on its own batch (the adaptive threshold),
//! 2. admit foreign samples from the other sources' same-step batches whose
//!    confidence under this source's model is strictly above that threshold,
//! 3. take one AdamW step on cross-entropy plus the weighted sign-alignment
//!    hinge against the frozen mean update vector,
//! 4. fold the new parameters into a Beta-weighted running average.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BatchStream, Dataset, Sample};
use crate::error::{HamError, Result};
use crate::eval::sign_conflict_rate;
use crate::model::CosineClassifier;
use crate::params::{lin_comb, per_layer_dot, update_vector, ParamSet};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignMode {
    /// One hinge per layer on the inner product of the two layer updates.
    LayerDot,
    /// Per-coordinate hinge on the product of matching entries, averaged
    /// within each layer.
    Elementwise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarmonyConfig {
    pub lambda: f64,
    pub sign_mode: SignMode,
    pub beta: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Adaptive source enrichment on/off.
    pub sae: bool,
    pub seed: u64,
    /// Keep a parameter snapshot every this many steps (0 = final only); the
    /// best-model baseline selects among them.
    pub snapshot_every: usize,
}

impl Default for HarmonyConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            sign_mode: SignMode::LayerDot,
            beta: 0.5,
            steps: 500,
            batch_size: 24,
            lr: 1e-3,
            weight_decay: 0.1,
            sae: true,
            seed: 0,
            snapshot_every: 50,
        }
    }
}

impl HarmonyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(HamError::config("train.lambda", "must lie in [0, 1]"));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(HamError::config("train.beta", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(HamError::config("train.batch_size", "must be >= 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(HamError::config("train.lr", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(HamError::config("train.weight_decay", "must be >= 0"));
        }
        Ok(())
    }
}

/// Unnormalized symmetric Beta(beta, beta) density at `(t + 0.5) / (n_steps + 1)`.
/// The normalizing constant cancels in the weighted average.
pub fn beta_weight(t: usize, n_steps: usize, beta: f64) -> f64 {
    let x = (t as f64 + 0.5) / (n_steps as f64 + 1.0);
    x.powf(beta - 1.0) * (1.0 - x).powf(beta - 1.0)
}

/// Mean confidence (max class probability) of `params` over `batch`.
pub fn adaptive_threshold(clf: &CosineClassifier, params: &ParamSet, batch: &[&Sample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(HamError::Domain("adaptive threshold of an empty batch".into()));
    }
    let mut total = 0.0;
    for s in batch {
        total += clf.confidence(params, &s.x)?;
    }
    Ok(total / batch.len() as f64)
}

/// Native batch followed by admitted foreign samples.
#[derive(Debug, Clone)]
pub struct Enriched<'a> {
    pub batch: Vec<&'a Sample>,
    /// `(foreign batch index, position within it)` of each admitted sample.
    pub admitted: Vec<(usize, usize)>,
}

/// Admits every foreign sample whose confidence under `params` is strictly
/// above `tau`, in `(batch, position)` order, keeping its own label.
pub fn enrich_batch<'a>(
    clf: &CosineClassifier,
    params: &ParamSet,
    native: &[&'a Sample],
    foreign: &[&[&'a Sample]],
    tau: f64,
) -> Result<Enriched<'a>> {
    let mut batch = native.to_vec();
    let mut admitted = Vec::new();
    for (j, other) in foreign.iter().enumerate() {
        for (k, s) in other.iter().enumerate() {
            if clf.confidence(params, &s.x)? > tau {
                batch.push(s);
                admitted.push((j, k));
            }
        }
    }
    Ok(Enriched { batch, admitted })
}

/// Hinge penalty on update directions that oppose the (constant) mean update
/// `v_bar`, and its gradient with respect to the source parameters.
pub fn sign_loss_and_grad(v_i: &ParamSet, v_bar: &ParamSet, mode: SignMode) -> Result<(f64, ParamSet)> {
    v_i.check_congruent(v_bar)?;
    let n_layers = v_i.len().max(1) as f64;
    let mut grads = v_i.zeros_like();
    let mut loss = 0.0;
    match mode {
        SignMode::LayerDot => {
            for (l, (_, dot)) in per_layer_dot(v_i, v_bar)?.into_iter().enumerate() {
                if dot < 0.0 {
                    loss -= dot;
                    for (g, vb) in grads.layer_mut(l).values_mut().iter_mut().zip(v_bar.layer(l).values()) {
                        *g = -vb / n_layers;
                    }
                }
            }
        }
        SignMode::Elementwise => {
            for l in 0..v_i.len() {
                let (a, b) = (v_i.layer(l).values(), v_bar.layer(l).values());
                let scale = 1.0 / (n_layers * a.len() as f64);
                let g = grads.layer_mut(l).values_mut();
                let mut layer_loss = 0.0;
                for j in 0..a.len() {
                    let prod = a[j] * b[j];
                    if prod < 0.0 {
                        layer_loss -= prod;
                        g[j] = -b[j] * scale;
                    }
                }
                loss += layer_loss / a.len() as f64;
            }
        }
    }
    Ok((loss / n_layers, grads))
}

/// The sign-alignment term of the objective for one source.
#[derive(Debug, Clone, Copy)]
pub struct SignTerm<'a> {
    pub theta0: &'a ParamSet,
    pub v_bar: &'a ParamSet,
    pub mode: SignMode,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct LossParts {
    pub ce_loss: f64,
    pub sign_loss: f64,
    pub lambda: f64,
    /// Gradient of `ce_loss + lambda * sign_loss`.
    pub grads: ParamSet,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.ce_loss + self.lambda * self.sign_loss
    }
}

pub fn total_loss_and_grad(
    clf: &CosineClassifier,
    params: &ParamSet,
    batch: &[(&[f64], usize)],
    sign: Option<&SignTerm<'_>>,
) -> Result<LossParts> {
    let (ce_loss, mut grads) = clf.ce_loss_and_grad(params, batch)?;
    let Some(term) = sign else {
        return Ok(LossParts {
            ce_loss,
            sign_loss: 0.0,
            lambda: 0.0,
            grads,
        });
    };
    let v_i = update_vector(params, term.theta0)?;
    let (sign_loss, sign_grads) = sign_loss_and_grad(&v_i, term.v_bar, term.mode)?;
    if term.lambda != 0.0 {
        grads.axpy(term.lambda, &sign_grads)?;
    }
    Ok(LossParts {
        ce_loss,
        sign_loss,
        lambda: term.lambda,
        grads,
    })
}

/// AdamW moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// Adam with decoupled weight decay:
/// `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)`.
pub fn adamw_step(state: &mut AdamState, params: &mut ParamSet, grads: &ParamSet, lr: f64, weight_decay: f64) -> Result<()> {
    params.check_congruent(grads)?;
    params.check_congruent(&state.m)?;
    state.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for l in 0..params.len() {
        let g = grads.layer(l).values();
        let m = state.m.layer_mut(l).values_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = ADAM_BETA1 * *mj + (1.0 - ADAM_BETA1) * gj;
        }
        let v = state.v.layer_mut(l).values_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = ADAM_BETA2 * *vj + (1.0 - ADAM_BETA2) * gj * gj;
        }
        let (m, v) = (state.m.layer(l).values(), state.v.layer(l).values());
        for (j, p) in params.layer_mut(l).values_mut().iter_mut().enumerate() {
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *p -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * *p);
        }
    }
    Ok(())
}

/// Normalized online weighted average of parameter snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct MovingAverage {
    pub params: ParamSet,
    pub weight_sum: f64,
}

impl MovingAverage {
    /// Starts at `initial` carrying weight `gamma0` (0 defers to the first
    /// positive weight).
    pub fn new(initial: &ParamSet, gamma0: f64) -> Self {
        Self {
            params: initial.clone(),
            weight_sum: gamma0.max(0.0),
        }
    }

    /// `avg' = (W / W') avg + (gamma / W') theta`, `W' = W + gamma`.
    pub fn update(&mut self, gamma: f64, theta: &ParamSet) -> Result<()> {
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(HamError::Domain(format!("moving-average weight {gamma} is not >= 0")));
        }
        let total = self.weight_sum + gamma;
        if total == 0.0 {
            self.params.check_congruent(theta)?;
            return Ok(());
        }
        let keep = self.weight_sum / total;
        let take = gamma / total;
        self.params = self.params.zip_map(theta, |a, b| keep * a + take * b)?;
        self.weight_sum = total;
        Ok(())
    }
}

/// One source's state during training.
#[derive(Debug, Clone)]
pub struct SourceTrainer {
    pub source_id: usize,
    pub params: ParamSet,
    pub opt: AdamState,
    pub average: MovingAverage,
    batches: BatchStream,
    snapshots: Vec<(usize, ParamSet)>,
}

impl SourceTrainer {
    pub fn new(source_id: usize, theta0: &ParamSet, n_samples: usize, config: &HarmonyConfig) -> Result<Self> {
        Ok(Self {
            source_id,
            params: theta0.clone(),
            opt: AdamState::new(theta0),
            average: MovingAverage::new(theta0, beta_weight(0, config.steps, config.beta)),
            batches: BatchStream::new(n_samples, config.batch_size, stream_seed(config.seed, source_id))?,
            snapshots: Vec::new(),
        })
    }

    pub fn ma_update(&mut self, gamma: f64) -> Result<()> {
        self.average.update(gamma, &self.params)
    }
}

/// Independent batch-order stream per source.
fn stream_seed(seed: u64, source: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(source as u64 + 1);
    rand::RngCore::next_u64(&mut rng)
}

/// One JSON-lines training-log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub source: usize,
    pub ce_loss: f64,
    pub sign_loss: f64,
    pub tau: f64,
    pub admitted: usize,
    pub admitted_corrupted: usize,
    pub sign_conflict_rate: f64,
    /// Foreign samples offered to this source this step (diagnostics only).
    #[serde(skip)]
    pub foreign_offered: usize,
    #[serde(skip)]
    pub foreign_corrupted_offered: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Run the per-source phase of each step on the rayon pool.
    pub parallel: bool,
    /// Record the frozen mean update vector of every step.
    pub keep_mean_updates: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Beta-weighted trajectory average per source.
    pub averaged: Vec<ParamSet>,
    /// Parameters after the last step per source.
    pub finals: Vec<ParamSet>,
    /// `(step, params)` snapshots per source; always ends with the final step.
    pub snapshots: Vec<Vec<(usize, ParamSet)>>,
    pub log: Vec<StepRecord>,
    /// Frozen mean update vector per step, when requested.
    pub mean_updates: Vec<ParamSet>,
}

/// Runs all sources for `config.steps` global steps from the shared `theta0`.
///
/// `sources[i]` is the training split of source `i`. Samples' `corrupted`
/// flags are only counted for the log; they never affect training.
pub fn train_all(
    clf: &CosineClassifier,
    theta0: &ParamSet,
    sources: &[&Dataset],
    config: &HarmonyConfig,
    options: &TrainOptions,
) -> Result<TrainOutput> {
    config.validate()?;
    clf.config().check_params(theta0)?;
    if sources.is_empty() {
        return Err(HamError::Domain("training needs at least one source".into()));
    }
    let mut trainers = sources
        .iter()
        .enumerate()
        .map(|(i, ds)| SourceTrainer::new(i, theta0, ds.len(), config))
        .collect::<Result<Vec<_>>>()?;
    let n_sources = sources.len();
    let mut log = Vec::with_capacity(config.steps * n_sources);
    let mut mean_updates = Vec::new();

    for step in 1..=config.steps {
        // phase (a): freeze the mean update vector and draw every batch
        let updates = trainers
            .iter()
            .map(|t| update_vector(&t.params, theta0))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&ParamSet> = updates.iter().collect();
        let v_bar = lin_comb(&vec![1.0 / n_sources as f64; n_sources], &refs)?;
        let batches: Vec<Vec<&Sample>> = trainers
            .iter_mut()
            .zip(sources)
            .map(|(t, ds)| {
                t.batches
                    .next_batch()
                    .into_iter()
                    .map(|j| &ds.samples()[j])
                    .collect()
            })
            .collect();
        let gamma = beta_weight(step, config.steps, config.beta);
        let ctx = StepContext {
            step,
            gamma,
            theta0,
            v_bar: &v_bar,
            batches: &batches,
        };

        // phase (b): independent per-source updates
        let records: Vec<Result<StepRecord>> = if options.parallel {
            trainers
                .par_iter_mut()
                .zip(updates.par_iter())
                .map(|(t, v_i)| source_step(clf, config, &ctx, t, v_i))
                .collect()
        } else {
            trainers
                .iter_mut()
                .zip(&updates)
                .map(|(t, v_i)| source_step(clf, config, &ctx, t, v_i))
                .collect()
        };
        for r in records {
            log.push(r?);
        }
        if options.keep_mean_updates {
            mean_updates.push(v_bar);
        }
        if config.snapshot_every > 0 && step % config.snapshot_every == 0 && step != config.steps {
            for t in &mut trainers {
                t.snapshots.push((step, t.params.clone()));
            }
        }
    }

    let mut out = TrainOutput {
        averaged: Vec::with_capacity(n_sources),
        finals: Vec::with_capacity(n_sources),
        snapshots: Vec::with_capacity(n_sources),
        log,
        mean_updates,
    };
    for mut t in trainers {
        t.snapshots.push((config.steps, t.params.clone()));
        out.averaged.push(t.average.params);
        out.finals.push(t.params);
        out.snapshots.push(t.snapshots);
    }
    Ok(out)
}

/// Read-only view shared by every source within one global step.
struct StepContext<'a> {
    step: usize,
    gamma: f64,
    theta0: &'a ParamSet,
    v_bar: &'a ParamSet,
    batches: &'a [Vec<&'a Sample>],
}

fn source_step(
    clf: &CosineClassifier,
    config: &HarmonyConfig,
    ctx: &StepContext<'_>,
    trainer: &mut SourceTrainer,
    v_i: &ParamSet,
) -> Result<StepRecord> {
    let i = trainer.source_id;
    let native = &ctx.batches[i];
    let tau = adaptive_threshold(clf, &trainer.params, native)?;
    let foreign: Vec<&[&Sample]> = ctx
        .batches
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, b)| b.as_slice())
        .collect();
    let enriched = if config.sae {
        enrich_batch(clf, &trainer.params, native, &foreign, tau)?
    } else {
        Enriched {
            batch: native.clone(),
            admitted: Vec::new(),
        }
    };
    let admitted_corrupted = enriched
        .admitted
        .iter()
        .filter(|&&(j, k)| foreign[j][k].corrupted)
        .count();
    let conflict = sign_conflict_rate(v_i, ctx.v_bar)?;

    let examples: Vec<(&[f64], usize)> = enriched.batch.iter().map(|s| (s.x.as_slice(), s.y)).collect();
    let sign = SignTerm {
        theta0: ctx.theta0,
        v_bar: ctx.v_bar,
        mode: config.sign_mode,
        lambda: config.lambda,
    };
    let parts = total_loss_and_grad(clf, &trainer.params, &examples, Some(&sign))?;
    if !parts.ce_loss.is_finite() || !parts.sign_loss.is_finite() || !parts.grads.is_finite() {
        return Err(HamError::Numerical {
            step: ctx.step,
            source_id: i,
            detail: format!(
                "ce_loss={} sign_loss={} tau={tau} batch={} admitted={}",
                parts.ce_loss,
                parts.sign_loss,
                enriched.batch.len(),
                enriched.admitted.len()
            ),
        });
    }
    adamw_step(&mut trainer.opt, &mut trainer.params, &parts.grads, config.lr, config.weight_decay)?;
    trainer.ma_update(ctx.gamma)?;

    Ok(StepRecord {
        step: ctx.step,
        source: i,
        ce_loss: parts.ce_loss,
        sign_loss: parts.sign_loss,
        tau,
        admitted: enriched.admitted.len(),
        admitted_corrupted,
        sign_conflict_rate: conflict,
        foreign_offered: foreign.iter().map(|b| b.len()).sum(),
        foreign_corrupted_offered: foreign.iter().flat_map(|b| b.iter()).filter(|s| s.corrupted).count(),
    })
}
