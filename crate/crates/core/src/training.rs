//! Training loops.
//!
//! * [`train_deeplde`]: the network predicts `x`, the completion map supplies
//!   `z`, SGD minimizes `f(y) + lambda^T max(G y - h, 0)` and `lambda`
//!   ascends on the summed violation after every outer iteration.
//! * [`train_ldf`]: same loop, but the network predicts all of `y` and the
//!   equalities are priced by a second multiplier `mu` on `|h_d(y)|`.
//! * [`train_supervised`]: plain MSE regression onto reference solutions.
//!
//! A run is `warmup_iterations` epochs with `lambda` frozen, then
//! `outer_iterations` rounds of `I_t` epochs each, where `I_t` starts at
//! `inner_iterations` and grows by `inner_increment` per round while the
//! dual step shrinks as `rho0 / (1 + step_decay * t)`.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::completion::{Completer, Completion};
use crate::error::{check_dim, Error, Result};
use crate::exec;
use crate::network::{adam_step, AdamState, Mlp, Mode};
use crate::numerics::norm_inf;
use crate::problems::{Dataset, ProblemInstance, SplitKind};
use crate::reporting::{aggregate_predictions, Aggregate};

/// Samples per work unit when fanning a minibatch out. Fixed so that the
/// summation order, and hence every bit of the result, does not depend on
/// the number of threads.
const CHUNK: usize = 16;
/// A run aborts once mean `|y|` in a minibatch exceeds this.
pub const DIVERGENCE_Y_BOUND: f64 = 1e6;
/// Fraction of failed Newton completions per epoch that aborts the run.
pub const MAX_NEWTON_FAILURE_RATE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Outer (dual) iterations.
    #[serde(alias = "T")]
    pub outer_iterations: usize,
    /// Inner epochs in the first outer iteration.
    #[serde(alias = "I")]
    pub inner_iterations: usize,
    /// Epochs before the first dual update.
    #[serde(alias = "I_w")]
    pub warmup_iterations: usize,
    /// Added to the inner epoch count after each outer iteration.
    #[serde(alias = "beta")]
    pub inner_increment: usize,
    /// Dual step decay: `rho_t = rho0 / (1 + step_decay * t)`.
    #[serde(alias = "gamma")]
    pub step_decay: f64,
    #[serde(alias = "eta")]
    pub learning_rate: f64,
    pub rho0: f64,
    pub s0: f64,
    pub lambda0: f64,
    pub mu0: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden_width: usize,
    pub dropout_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            outer_iterations: 15,
            inner_iterations: 25,
            warmup_iterations: 100,
            inner_increment: 5,
            step_decay: 0.01,
            learning_rate: 1e-3,
            rho0: 0.1,
            s0: 0.5,
            lambda0: 0.1,
            mu0: 0.1,
            batch_size: 200,
            seed: 0,
            hidden_width: crate::network::DEFAULT_HIDDEN,
            dropout_rate: crate::network::DEFAULT_DROPOUT,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.hidden_width == 0 {
            return bad("hidden_width must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.step_decay >= 0.0) {
            return bad("step_decay must be non-negative");
        }
        if !(self.rho0 > 0.0 && self.s0 > 0.0) {
            return bad("rho0 and s0 must be positive");
        }
        if !(self.lambda0 >= 0.0) {
            return bad("lambda0 must be non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if self.inner_increment == 0 && self.step_decay == 0.0 && self.outer_iterations > 0 {
            log::warn!("inner_increment and step_decay are both zero; the dual schedule has no convergence guarantee");
        }
        Ok(())
    }

    /// `I_w + sum_{t=1}^{T} (I + beta (t - 1))`
    pub fn total_epochs(&self) -> usize {
        self.warmup_iterations
            + (1..=self.outer_iterations)
                .map(|t| self.inner_iterations + self.inner_increment * (t - 1))
                .sum::<usize>()
    }

    /// Parses flat `key = value` lines over the defaults. Blank lines and
    /// `#` comments are skipped; keys are the field names above.
    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut base = serde_json::to_value(Self::default())?;
        let obj = base.as_object_mut().expect("config serializes to an object");
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let value: serde_json::Value = serde_json::from_str(value.trim()).map_err(|_| {
                Error::InvalidConfig(format!("line {}: `{}` is not a number", lineno + 1, value.trim()))
            })?;
            obj.insert(canonical_key(key.trim()).to_string(), value);
        }
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_key_values(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        for (k, v) in v.as_object().unwrap() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Overrides one key, as from a command-line flag.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut text = self.to_key_values();
        let _ = writeln!(text, "{key} = {value}");
        *self = Self::from_key_values(&text)?;
        Ok(())
    }
}

fn canonical_key(key: &str) -> &str {
    match key {
        "T" => "outer_iterations",
        "I" => "inner_iterations",
        "I_w" => "warmup_iterations",
        "beta" => "inner_increment",
        "gamma" => "step_decay",
        "eta" => "learning_rate",
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LagrangeState {
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub rho: f64,
    pub s: f64,
    /// Completed outer iterations.
    pub t: usize,
    /// Inner epochs in the next outer iteration.
    pub inner_iterations: usize,
}

impl LagrangeState {
    pub fn new(cfg: &TrainConfig, n_eq: usize, n_ineq: usize) -> Self {
        Self {
            lambda: vec![cfg.lambda0; n_ineq],
            mu: vec![cfg.mu0; n_eq],
            rho: cfg.rho0,
            s: cfg.s0,
            t: 0,
            inner_iterations: cfg.inner_iterations,
        }
    }

    pub fn lambda_l1(&self) -> f64 {
        self.lambda.iter().map(|v| v.abs()).sum()
    }
}

/// Advances the schedule past one outer iteration.
pub fn schedule_update(cfg: &TrainConfig, state: &mut LagrangeState) {
    state.t += 1;
    state.inner_iterations += cfg.inner_increment;
    let decay = 1.0 + cfg.step_decay * state.t as f64;
    state.rho = cfg.rho0 / decay;
    state.s = cfg.s0 / decay;
}

/// `r_t = eta |D| I_t / rho_t` with `I_t = I_0 + beta t` and
/// `rho_t = rho0 / (1 + gamma t)`: learning-rate-weighted SGD steps per
/// outer iteration relative to the dual step.
pub fn convergence_ratio(cfg: &TrainConfig, dataset_size: usize, t: usize) -> f64 {
    let t = t as f64;
    let inner = cfg.inner_iterations as f64 + cfg.inner_increment as f64 * t;
    // Dividing by rho_t written out as a product keeps the zero-increment and
    // zero-decay cases exact.
    cfg.learning_rate * dataset_size as f64 * (1.0 + cfg.step_decay * t) * inner / cfg.rho0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[serde(rename = "deeplde")]
    DeepLde,
    Ldf,
    #[serde(rename = "sl")]
    Supervised,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Self::DeepLde => "deeplde",
            Self::Ldf => "ldf",
            Self::Supervised => "sl",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "deeplde" => Some(Self::DeepLde),
            "ldf" => Some(Self::Ldf),
            "sl" => Some(Self::Supervised),
            _ => None,
        }
    }

    pub fn output_dim(self, instance: &ProblemInstance) -> usize {
        match self {
            Self::DeepLde => instance.n_free(),
            Self::Ldf | Self::Supervised => instance.n,
        }
    }

    pub fn embeds_equalities(self) -> bool {
        self == Self::DeepLde
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Inner,
    Outer,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Warmup => "warmup",
            Self::Inner => "inner",
            Self::Outer => "outer",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// Inner epochs completed so far.
    pub epoch: usize,
    pub phase: Phase,
    pub obj_mean: f64,
    pub eq_max: f64,
    pub eq_mean: f64,
    pub ineq_max: f64,
    pub ineq_mean: f64,
    pub lambda_l1: f64,
    pub rho: f64,
    /// Wall clock since the run started.
    pub seconds: f64,
}

pub const RUNLOG_HEADER: &str = "epoch,phase,obj_mean,eq_max,eq_mean,ineq_max,ineq_mean,lambda_l1,rho,seconds";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub method: Option<Method>,
    pub records: Vec<EpochRecord>,
    pub total_inner_epochs: usize,
    pub newton_failures: usize,
    pub final_lambda: Vec<f64>,
    pub final_mu: Vec<f64>,
    /// Mean training loss of every inner epoch, in order.
    pub train_loss: Vec<f64>,
}

impl RunLog {
    pub fn to_csv(&self) -> String {
        self.csv_with(true)
    }

    /// The CSV without the wall-clock column values (zeros in their place).
    pub fn to_csv_untimed(&self) -> String {
        self.csv_with(false)
    }

    fn csv_with(&self, timed: bool) -> String {
        let mut out = String::from(RUNLOG_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.phase.as_str(),
                r.obj_mean,
                r.eq_max,
                r.eq_mean,
                r.ineq_max,
                r.ineq_mean,
                r.lambda_l1,
                r.rho,
                if timed { r.seconds } else { 0.0 }
            );
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn inner_records(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(|r| r.phase != Phase::Outer)
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochStats {
    /// Mean per-sample training loss over the pass (train mode).
    pub loss_mean: f64,
    pub obj_mean: f64,
    pub steps: usize,
    pub newton_failures: usize,
}

/// Per-sample value and parameter gradient of the embedded Lagrangian
/// `f(y) + lambda^T max(G y - h, 0)`, with `y` completed from `x`.
#[derive(Clone, Debug)]
pub struct LagrangianValue {
    pub value: f64,
    pub objective: f64,
    /// Partial derivative over the `x` block of `y`.
    pub dl_dx: Vec<f64>,
    /// Partial derivative over the `z` block of `y`.
    pub dl_dz: Vec<f64>,
    pub completion: Completion,
}

/// Value and gradient over all of `y` of `f(y) + lambda^T max(G y - h, 0)`.
/// The subgradient of `max(u, 0)` at `u = 0` is taken as zero.
fn penalized_objective(instance: &ProblemInstance, y: &[f64], lambda: &[f64]) -> Result<(f64, f64, Vec<f64>)> {
    let obj = instance.objective(y)?;
    let mut grad = instance.objective_grad(y)?;
    let slack = instance.ineq_slack(y)?;
    let mut value = obj;
    let mut weights = vec![0.0; slack.len()];
    for ((w, s), l) in weights.iter_mut().zip(&slack).zip(lambda) {
        if *s > 0.0 {
            value += l * s;
            *w = *l;
        }
    }
    if weights.iter().any(|&w| w != 0.0) {
        let gt = instance.g.matvec_t(&weights);
        grad.iter_mut().zip(&gt).for_each(|(g, v)| *g += v);
    }
    Ok((value, obj, grad))
}

/// Embedded Lagrangian at prediction `x` using a prebuilt completer.
pub fn lagrangian_e_with(
    completer: &Completer,
    instance: &ProblemInstance,
    d: &[f64],
    x: &[f64],
    lambda: &[f64],
    z_init: Option<&[f64]>,
) -> Result<LagrangianValue> {
    check_dim("lagrangian lambda", instance.n_ineq, lambda.len())?;
    if lambda.iter().any(|&l| l < 0.0) {
        return Err(Error::InvalidConfig("multipliers must be non-negative".into()));
    }
    let completion = completer.complete(d, x, z_init)?;
    let (value, objective, grad) = penalized_objective(instance, &completion.y, lambda)?;
    let (dl_dx, dl_dz) = completer.gather(&grad);
    Ok(LagrangianValue {
        value,
        objective,
        dl_dx,
        dl_dz,
        completion,
    })
}

/// Embedded Lagrangian at prediction `x`.
pub fn lagrangian_e(instance: &ProblemInstance, d: &[f64], x: &[f64], lambda: &[f64]) -> Result<LagrangianValue> {
    lagrangian_e_with(&Completer::new(instance)?, instance, d, x, lambda, None)
}

/// `f(y) + lambda^T max(G y - h, 0) + mu^T |h_d(y)|` and its gradient over
/// `y`, with the subgradient of `|u|` at zero taken as zero.
pub fn lagrangian_full(
    instance: &ProblemInstance,
    d: &[f64],
    y: &[f64],
    lambda: &[f64],
    mu: &[f64],
) -> Result<(f64, f64, Vec<f64>)> {
    check_dim("lagrangian mu", instance.n_eq, mu.len())?;
    let (mut value, obj, mut grad) = penalized_objective(instance, y, lambda)?;
    let h = instance.eq_residual(d, y)?;
    let mut weights = vec![0.0; h.len()];
    for ((w, hi), m) in weights.iter_mut().zip(&h).zip(mu) {
        value += m * hi.abs();
        *w = if *hi > 0.0 {
            *m
        } else if *hi < 0.0 {
            -*m
        } else {
            0.0
        };
    }
    if weights.iter().any(|&w| w != 0.0) {
        let jt = instance.eq_jacobian(y)?.matvec_t(&weights);
        grad.iter_mut().zip(&jt).for_each(|(g, v)| *g += v);
    }
    Ok((value, obj, grad))
}

/// Outcome of one sample in a minibatch.
enum SampleOutcome {
    Ok {
        loss: f64,
        objective: f64,
        y_abs_mean: f64,
        z: Option<Vec<f64>>,
    },
    NewtonFailed,
}

struct ChunkResult {
    grad: Vec<f64>,
    loss: f64,
    objective: f64,
    y_abs_mean: f64,
    ok: usize,
    failed: usize,
    warm: Vec<(usize, Vec<f64>)>,
}

/// Shared state of a training run: the data, the method, the completion
/// map and the Newton warm-start cache (one slot per sample index).
pub struct Trainer<'a> {
    dataset: &'a Dataset,
    method: Method,
    completer: Option<Completer>,
    labels: Option<&'a [Vec<f64>]>,
    cfg: TrainConfig,
    warm: Vec<Option<Vec<f64>>>,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, method: Method, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let completer = match method {
            Method::DeepLde => Some(Completer::new(&dataset.instance)?),
            _ => None,
        };
        Ok(Self {
            dataset,
            method,
            completer,
            labels: None,
            cfg,
            warm: vec![None; dataset.samples.len()],
        })
    }

    pub fn with_labels(mut self, labels: &'a [Vec<f64>]) -> Result<Self> {
        check_dim("labels", self.dataset.samples.len(), labels.len())?;
        for l in labels {
            check_dim("label", self.dataset.instance.n, l.len())?;
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn completer(&self) -> Option<&Completer> {
        self.completer.as_ref()
    }

    fn instance(&self) -> &ProblemInstance {
        &self.dataset.instance
    }

    /// Fresh network with the configured architecture.
    pub fn init_model<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Mlp> {
        Mlp::with_two_hidden(
            self.instance().n_eq,
            self.cfg.hidden_width,
            self.method.output_dim(self.instance()),
            self.cfg.dropout_rate,
            rng,
        )
    }

    /// Loss and its gradient over the network output for one sample.
    fn output_loss(
        &self,
        idx: usize,
        out: &[f64],
        state: &LagrangeState,
    ) -> Result<(f64, f64, Vec<f64>, Option<Vec<f64>>)> {
        let inst = self.instance();
        let d = &self.dataset.samples[idx];
        match self.method {
            Method::DeepLde => {
                let completer = self.completer.as_ref().expect("deeplde trainer has a completer");
                let lag = lagrangian_e_with(completer, inst, d, out, &state.lambda, self.warm[idx].as_deref())?;
                let total = completer.chain(&lag.completion, &lag.dl_dx, &lag.dl_dz)?;
                let z = (!completer.is_linear()).then(|| lag.completion.z.clone());
                Ok((lag.value, lag.objective, total, z))
            }
            Method::Ldf => {
                let (value, obj, grad) = lagrangian_full(inst, d, out, &state.lambda, &state.mu)?;
                Ok((value, obj, grad, None))
            }
            Method::Supervised => {
                let labels = self.labels.ok_or_else(|| Error::InvalidConfig("supervised training needs labels".into()))?;
                let label = &labels[idx];
                let n = out.len() as f64;
                let mut loss = 0.0;
                let grad = out
                    .iter()
                    .zip(label)
                    .map(|(o, l)| {
                        loss += (o - l) * (o - l) / n;
                        2.0 * (o - l) / n
                    })
                    .collect();
                Ok((loss, inst.objective(out)?, grad, None))
            }
        }
    }

    fn process_chunk(&self, model: &Mlp, batch: &[usize], seeds: &[u64], state: &LagrangeState) -> Result<ChunkResult> {
        let mut res = ChunkResult {
            grad: vec![0.0; model.num_params()],
            loss: 0.0,
            objective: 0.0,
            y_abs_mean: 0.0,
            ok: 0,
            failed: 0,
            warm: Vec::new(),
        };
        for (&idx, &seed) in batch.iter().zip(seeds) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (out, tape) = model.forward(&self.dataset.samples[idx], Mode::Train, &mut rng)?;
            let outcome = match self.output_loss(idx, &out, state) {
                Ok((loss, objective, dl_dout, z)) => {
                    model.backward_into(&tape, &dl_dout, &mut res.grad)?;
                    SampleOutcome::Ok {
                        loss,
                        objective,
                        y_abs_mean: out.iter().map(|v| v.abs()).sum::<f64>() / out.len().max(1) as f64,
                        z,
                    }
                }
                Err(Error::NewtonDiverged { .. } | Error::SingularMatrix { .. }) => SampleOutcome::NewtonFailed,
                Err(e) => return Err(e),
            };
            match outcome {
                SampleOutcome::Ok { loss, objective, y_abs_mean, z } => {
                    res.loss += loss;
                    res.objective += objective;
                    res.y_abs_mean += y_abs_mean;
                    res.ok += 1;
                    if let Some(z) = z {
                        res.warm.push((idx, z));
                    }
                }
                SampleOutcome::NewtonFailed => res.failed += 1,
            }
        }
        Ok(res)
    }

    /// One shuffled pass over the training split with minibatch Adam steps.
    /// `epoch` only labels a divergence error.
    pub fn inner_epoch<R: Rng + ?Sized>(
        &mut self,
        model: &mut Mlp,
        adam: &mut AdamState,
        state: &LagrangeState,
        rng: &mut R,
        epoch: usize,
    ) -> Result<EpochStats> {
        let mut order: Vec<usize> = self.dataset.indices(SplitKind::Train).collect();
        order.shuffle(rng);
        let mut stats = EpochStats::default();
        let (mut loss_sum, mut obj_sum, mut counted) = (0.0, 0.0, 0usize);
        for batch in order.chunks(self.cfg.batch_size) {
            let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
            let n_chunks = batch.len().div_ceil(CHUNK);
            let this = &*self;
            let frozen: &Mlp = model;
            let results = exec::map_indexed(n_chunks, |c| {
                let lo = c * CHUNK;
                let hi = (lo + CHUNK).min(batch.len());
                this.process_chunk(frozen, &batch[lo..hi], &seeds[lo..hi], state)
            });
            let mut grad = vec![0.0; model.num_params()];
            let (mut b_loss, mut b_obj, mut b_abs, mut ok, mut failed) = (0.0, 0.0, 0.0, 0usize, 0usize);
            let mut warm_updates = Vec::new();
            for r in results {
                let r = r?;
                grad.iter_mut().zip(&r.grad).for_each(|(g, v)| *g += v);
                b_loss += r.loss;
                b_obj += r.objective;
                b_abs += r.y_abs_mean;
                ok += r.ok;
                failed += r.failed;
                warm_updates.extend(r.warm);
            }
            for (idx, z) in warm_updates {
                self.warm[idx] = Some(z);
            }
            stats.newton_failures += failed;
            if failed > 0 {
                log::debug!("epoch {epoch}: skipped {failed} samples whose completion failed");
            }
            if ok == 0 {
                continue;
            }
            if !b_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    reason: "non-finite loss".into(),
                });
            }
            if b_abs / ok as f64 > DIVERGENCE_Y_BOUND {
                return Err(Error::Diverged {
                    epoch,
                    reason: format!("mean |y| exceeded {DIVERGENCE_Y_BOUND:e}"),
                });
            }
            let inv = 1.0 / ok as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            adam_step(model, adam, &grad, self.cfg.learning_rate)?;
            loss_sum += b_loss;
            obj_sum += b_obj;
            counted += ok;
            stats.steps += 1;
        }
        let train_len = order.len();
        if train_len > 0 && stats.newton_failures as f64 > MAX_NEWTON_FAILURE_RATE * train_len as f64 {
            return Err(Error::Diverged {
                epoch,
                reason: format!(
                    "{} of {} completions failed",
                    stats.newton_failures, train_len
                ),
            });
        }
        if counted > 0 {
            stats.loss_mean = loss_sum / counted as f64;
            stats.obj_mean = obj_sum / counted as f64;
        }
        Ok(stats)
    }

    /// Eval-mode prediction of the full decision vector for sample `idx`.
    fn predict_full(&self, model: &Mlp, idx: usize, z_init: Option<&[f64]>) -> Result<Vec<f64>> {
        let d = &self.dataset.samples[idx];
        let out = model.predict(d)?;
        match &self.completer {
            Some(c) => Ok(c.complete(d, &out, z_init)?.y),
            None => Ok(out),
        }
    }

    /// Summed violations over the training split in eval mode:
    /// `(sum max(Gy - h, 0), sum |h_d(y)|)`.
    fn summed_violations(&self, model: &Mlp) -> Result<(Vec<f64>, Vec<f64>)> {
        let inst = self.instance();
        let idx: Vec<usize> = self.dataset.indices(SplitKind::Train).collect();
        let n_chunks = idx.len().div_ceil(CHUNK);
        let parts = exec::map_indexed(n_chunks, |c| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut r = vec![0.0; inst.n_ineq];
            let mut s = vec![0.0; inst.n_eq];
            for &i in &idx[c * CHUNK..((c + 1) * CHUNK).min(idx.len())] {
                let y = self.predict_full(model, i, self.warm[i].as_deref())?;
                for (acc, v) in r.iter_mut().zip(inst.ineq_violation(&y)?) {
                    *acc += v;
                }
                for (acc, v) in s.iter_mut().zip(inst.eq_residual(&self.dataset.samples[i], &y)?) {
                    *acc += v.abs();
                }
            }
            Ok((r, s))
        });
        let mut r = vec![0.0; inst.n_ineq];
        let mut s = vec![0.0; inst.n_eq];
        for part in parts {
            let (pr, ps) = part?;
            r.iter_mut().zip(&pr).for_each(|(a, b)| *a += b);
            s.iter_mut().zip(&ps).for_each(|(a, b)| *a += b);
        }
        Ok((r, s))
    }

    /// `lambda += rho * sum_D max(G y - h, 0)`; for LDF also
    /// `mu += s * sum_D |h_d(y)|`. Network in eval mode.
    pub fn dual_update(&self, model: &Mlp, state: &mut LagrangeState) -> Result<()> {
        let (r, s) = self.summed_violations(model)?;
        apply_dual_step(&mut state.lambda, state.rho, &r);
        if self.method == Method::Ldf {
            apply_dual_step(&mut state.mu, state.s, &s);
        }
        Ok(())
    }

    /// Eval-mode aggregates over a split.
    pub fn evaluate_split(&self, model: &Mlp, kind: SplitKind) -> Result<Aggregate> {
        let idx: Vec<usize> = self.dataset.indices(kind).collect();
        let ys = exec::map_indexed(idx.len(), |k| self.predict_full(model, idx[k], None));
        let ys = ys.into_iter().collect::<Result<Vec<_>>>()?;
        aggregate_predictions(self.instance(), self.dataset.part(kind), &ys)
    }

    fn record(&self, model: &Mlp, epoch: usize, phase: Phase, state: &LagrangeState, start: &Instant) -> Result<EpochRecord> {
        let agg = self.evaluate_split(model, SplitKind::Test)?;
        Ok(EpochRecord {
            epoch,
            phase,
            obj_mean: agg.obj_mean,
            eq_max: agg.eq_max,
            eq_mean: agg.eq_mean,
            ineq_max: agg.ineq_max,
            ineq_mean: agg.ineq_mean,
            lambda_l1: state.lambda_l1(),
            rho: state.rho,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Runs the full primal-dual schedule (or plain epochs for supervised).
    pub fn run(&mut self) -> Result<(Mlp, RunLog)> {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut model = self.init_model(&mut rng)?;
        let mut adam = AdamState::for_model(&model);
        let inst = self.instance();
        let mut state = LagrangeState::new(&self.cfg, inst.n_eq, inst.n_ineq);
        let mut log = RunLog {
            method: Some(self.method),
            ..RunLog::default()
        };
        let mut epoch = 0;

        let mut run_epoch = |this: &mut Self, model: &mut Mlp, state: &LagrangeState, phase: Phase, log: &mut RunLog, epoch: &mut usize| -> Result<()> {
            *epoch += 1;
            let stats = this.inner_epoch(model, &mut adam, state, &mut rng, *epoch)?;
            log.newton_failures += stats.newton_failures;
            log.train_loss.push(stats.loss_mean);
            let rec = this.record(model, *epoch, phase, state, &start)?;
            log.records.push(rec);
            Ok(())
        };

        if self.method == Method::Supervised {
            for _ in 0..self.cfg.total_epochs() {
                run_epoch(self, &mut model, &state, Phase::Inner, &mut log, &mut epoch)?;
            }
        } else {
            for _ in 0..self.cfg.warmup_iterations {
                run_epoch(self, &mut model, &state, Phase::Warmup, &mut log, &mut epoch)?;
            }
            for _ in 0..self.cfg.outer_iterations {
                for _ in 0..state.inner_iterations {
                    run_epoch(self, &mut model, &state, Phase::Inner, &mut log, &mut epoch)?;
                }
                self.dual_update(&model, &mut state)?;
                schedule_update(&self.cfg, &mut state);
                let mut rec = match log.records.last() {
                    Some(prev) => prev.clone(),
                    None => self.record(&model, epoch, Phase::Outer, &state, &start)?,
                };
                rec.phase = Phase::Outer;
                rec.epoch = epoch;
                rec.lambda_l1 = state.lambda_l1();
                rec.rho = state.rho;
                rec.seconds = start.elapsed().as_secs_f64();
                log.records.push(rec);
            }
        }
        log.total_inner_epochs = epoch;
        log.final_lambda = state.lambda;
        log.final_mu = if self.method == Method::Ldf { state.mu } else { Vec::new() };
        Ok((model, log))
    }
}

/// `v += step * increment`, the increments being non-negative violation sums.
pub fn apply_dual_step(v: &mut [f64], step: f64, increment: &[f64]) {
    v.iter_mut().zip(increment).for_each(|(a, b)| *a += step * b);
}

/// Standalone dual ascent step over the training split of `dataset`.
pub fn dual_update(dataset: &Dataset, model: &Mlp, lambda: &mut [f64], rho: f64) -> Result<()> {
    let method = if model.output_dim() == dataset.instance.n_free() && dataset.instance.n_eq > 0 {
        Method::DeepLde
    } else {
        Method::Ldf
    };
    let trainer = Trainer::new(dataset, method, TrainConfig::default())?;
    let (r, _) = trainer.summed_violations(model)?;
    apply_dual_step(lambda, rho, &r);
    Ok(())
}

pub fn train_deeplde(dataset: &Dataset, cfg: &TrainConfig) -> Result<(Mlp, RunLog)> {
    Trainer::new(dataset, Method::DeepLde, cfg.clone())?.run()
}

pub fn train_ldf(dataset: &Dataset, cfg: &TrainConfig) -> Result<(Mlp, RunLog)> {
    Trainer::new(dataset, Method::Ldf, cfg.clone())?.run()
}

pub fn train_supervised(dataset: &Dataset, labels: &[Vec<f64>], cfg: &TrainConfig) -> Result<(Mlp, RunLog)> {
    Trainer::new(dataset, Method::Supervised, cfg.clone())?
        .with_labels(labels)?
        .run()
}

/// Eval-mode embedded Lagrangian and its gradient over every network
/// parameter for a single input.
pub fn lagrangian_param_grad(
    model: &Mlp,
    completer: &Completer,
    instance: &ProblemInstance,
    d: &[f64],
    lambda: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (x, tape) = model.forward(d, Mode::Eval, &mut rng)?;
    let lag = lagrangian_e_with(completer, instance, d, &x, lambda, None)?;
    let total = completer.chain(&lag.completion, &lag.dl_dx, &lag.dl_dz)?;
    Ok((lag.value, model.backward(&tape, &total)?))
}

/// Largest absolute entry of `y`, used in divergence diagnostics.
pub fn max_abs(y: &[f64]) -> f64 {
    norm_inf(y)
}
