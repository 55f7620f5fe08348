//! Optimization, evaluation and the ablation harness.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ForecastDataset, Split};
use crate::dynamics::{MaskMode, NfeCounter};
use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig, ModelParams};
use crate::stats::{Summary, HISTOGRAM_BINS};
use crate::tensor::{Tape, Tensor, Var};

/// Targets with `|y|` below this (original units) are left out of MAPE.
pub const MAPE_EPSILON: f64 = 1e-3;

/// Model variants compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoLte,
    NoCompensation,
    NoMask,
    ManifoldPenalty,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Self::Full,
        Self::NoLte,
        Self::NoCompensation,
        Self::NoMask,
        Self::ManifoldPenalty,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoLte => "no_lte",
            Self::NoCompensation => "no_compensation",
            Self::NoMask => "no_mask",
            Self::ManifoldPenalty => "manifold_penalty",
        }
    }

    pub fn mask_mode(self) -> MaskMode {
        match self {
            Self::Full | Self::ManifoldPenalty => MaskMode::Lte,
            Self::NoLte => MaskMode::Learned,
            Self::NoCompensation => MaskMode::Off,
            Self::NoMask => MaskMode::UniformOne,
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Weight of the truncation-error penalty. Only the manifold-penalty
    /// variant may set it; zero there reproduces `full`.
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub steps: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub clip_norm: f64,
}

impl TrainConfig {
    pub fn new(variant: Variant) -> Self {
        TrainConfig {
            variant,
            lambda: 0.0,
            lr: 1e-3,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            steps: 4,
            patience: 10,
            clip_norm: 5.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Validation(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.lambda > 0.0 && self.variant != Variant::ManifoldPenalty {
            return Err(Error::Validation(format!(
                "lambda = {} is only meaningful for the manifold_penalty variant, not `{}`",
                self.lambda,
                self.variant.as_str()
            )));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Validation(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Validation("batch size and steps must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Validation(format!("clip norm must be > 0, got {}", self.clip_norm)));
        }
        Ok(())
    }

    /// `base` with the mask mode and step count this run trains with.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            mask_mode: self.variant.mask_mode(),
            steps: self.steps,
            ..base.clone()
        }
    }

    /// Copy of `self` for another variant; `penalty` is used only by the manifold-penalty arm.
    pub fn for_variant(&self, variant: Variant, penalty: f64) -> TrainConfig {
        TrainConfig {
            variant,
            lambda: if variant == Variant::ManifoldPenalty { penalty } else { 0.0 },
            ..self.clone()
        }
    }
}

/// Mean absolute error plus, when `lambda > 0`, `lambda · mean(E)` over every
/// step and stream.
pub fn loss(tape: &mut Tape, y_hat: Var, y: Var, lte: &[Var], lambda: f64) -> Result<Var> {
    let task = tape.mean_abs_error(y_hat, y)?;
    if lambda == 0.0 || lte.is_empty() {
        return Ok(task);
    }
    let mut total = tape.mean(lte[0])?;
    for &e in &lte[1..] {
        let m = tape.mean(e)?;
        total = tape.add(total, m)?;
    }
    let penalty = tape.scale(total, lambda / lte.len() as f64)?;
    tape.add(task, penalty)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Update `params` in place with `grads`, given in `for_each_mut` order.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Vec<f64>]) -> Result<()> {
        let mut bad = None;
        let mut i = 0;
        params.for_each_mut(|name, t| {
            if bad.is_some() {
                return;
            }
            match grads.get(i) {
                Some(g) if g.len() != t.numel() => {
                    bad = Some(Error::dim("adam_step", format!("gradient for {name} has {} values", g.len())))
                }
                Some(g) if g.iter().any(|v| !v.is_finite()) => {
                    bad = Some(Error::Numeric {
                        op: format!("gradient of {name}"),
                        step: None,
                    })
                }
                None => bad = Some(Error::Contract(format!("no gradient for {name}"))),
                _ => {}
            }
            i += 1;
        });
        if let Some(e) = bad {
            return Err(e);
        }
        if i != grads.len() {
            return Err(Error::Contract(format!("{} gradients for {i} parameters", grads.len())));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut i = 0;
        params.for_each_mut(|_, t| {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for (k, p) in t.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            i += 1;
        });
        Ok(())
    }
}

/// Rescale `grads` so their joint L2 norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
}

impl MetricReport {
    /// Metrics over paired values. MAPE skips targets with `|y| <` [`MAPE_EPSILON`]
    /// and is zero when every target is skipped.
    pub fn compute(pred: &[f64], target: &[f64]) -> Result<Self> {
        if pred.len() != target.len() {
            return Err(Error::dim("metrics", format!("{} predictions, {} targets", pred.len(), target.len())));
        }
        if pred.is_empty() {
            return Err(Error::Contract("metrics over an empty split".into()));
        }
        let mut acc = MetricAccumulator::default();
        acc.extend(pred, target);
        Ok(acc.finish())
    }
}

#[derive(Debug, Default, Clone)]
struct MetricAccumulator {
    n: usize,
    abs: f64,
    sq: f64,
    pct: f64,
    pct_n: usize,
}

impl MetricAccumulator {
    fn extend(&mut self, pred: &[f64], target: &[f64]) {
        for (&p, &y) in pred.iter().zip(target) {
            let d = p - y;
            self.n += 1;
            self.abs += d.abs();
            self.sq += d * d;
            if y.abs() >= MAPE_EPSILON {
                self.pct += (d / y).abs();
                self.pct_n += 1;
            }
        }
    }

    fn finish(&self) -> MetricReport {
        let n = self.n as f64;
        MetricReport {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            mape: if self.pct_n == 0 { 0.0 } else { 100.0 * self.pct / self.pct_n as f64 },
        }
    }
}

/// Mask values gathered over one split, split by whether the window's input
/// range saw a logged shock at that node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub all: Summary,
    pub shock: Option<Summary>,
    pub non_shock: Option<Summary>,
}

/// Outcome of a pass over one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: MetricReport,
    pub masks: MaskStats,
}

/// Forecast every window of `split`, returning metrics in original units and
/// the mask distribution of both streams over all steps.
pub fn evaluate(
    params: &ModelParams,
    cfg: &ModelConfig,
    dataset: &ForecastDataset,
    split: Split,
    batch_size: usize,
) -> Result<Evaluation> {
    let windows = dataset.windows(split);
    if windows.is_empty() {
        return Err(Error::Contract("evaluate on an empty split".into()));
    }
    check_compatible(cfg, dataset)?;
    let a_hat = dataset.graph.normalize_adjacency();
    let (mean0, std0) = (dataset.scaler.mean[0], dataset.scaler.std[0]);
    let shocked = shock_windows(dataset, windows);
    let n = dataset.n_nodes();

    let batch_size = batch_size.max(1);
    let mut acc = MetricAccumulator::default();
    let (mut all, mut shock, mut calm) = (Vec::new(), Vec::new(), Vec::new());
    for (chunk_idx, starts) in windows.chunks(batch_size).enumerate() {
        let (x, y) = dataset.batch(starts)?;
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let xv = tape.constant(x);
        let av = tape.constant(a_hat.clone());
        let out = forward(&mut tape, xv, av, &vars, cfg, &NfeCounter::new())?;
        let pred: Vec<f64> = tape.data(out.y_hat).iter().map(|v| v * std0 + mean0).collect();
        let target: Vec<f64> = y.data().iter().map(|v| v * std0 + mean0).collect();
        acc.extend(&pred, &target);

        for evo in out.evolutions() {
            for &m in &evo.masks {
                let data = tape.data(m);
                all.extend_from_slice(data);
                if let Some(flags) = &shocked {
                    let width = data.len() / (starts.len() * n);
                    for (cell, row) in data.chunks(width).enumerate() {
                        let (b, node) = (cell / n, cell % n);
                        let w = chunk_idx * batch_size + b;
                        if flags[w * n + node] {
                            shock.extend_from_slice(row);
                        } else {
                            calm.extend_from_slice(row);
                        }
                    }
                }
            }
        }
    }
    let masks = MaskStats {
        all: Summary::of(&all),
        shock: shocked.as_ref().map(|_| Summary::of(&shock)),
        non_shock: shocked.as_ref().map(|_| Summary::of(&calm)),
    };
    Ok(Evaluation {
        metrics: acc.finish(),
        masks,
    })
}

/// `flags[w·N + n]` is set when node `n` had a logged shock inside the input range of window `w`.
fn shock_windows(dataset: &ForecastDataset, windows: &[usize]) -> Option<Vec<bool>> {
    let events = dataset.events.as_ref()?;
    let n = dataset.n_nodes();
    let hits: HashSet<(usize, usize)> = events.iter().map(|e| (e.node, e.t)).collect();
    let span = dataset.layout.window;
    Some(
        windows
            .iter()
            .flat_map(|&s| (0..n).map(move |node| (s, node)))
            .map(|(s, node)| (s..s + span).any(|t| hits.contains(&(node, t))))
            .collect(),
    )
}

fn check_compatible(cfg: &ModelConfig, dataset: &ForecastDataset) -> Result<()> {
    let layout = &dataset.layout;
    if cfg.n_nodes != dataset.n_nodes()
        || cfg.in_dim != dataset.in_dim()
        || cfg.window != layout.window
        || cfg.horizon != layout.horizon
    {
        return Err(Error::Validation(format!(
            "model expects N={}, D={}, T={}, T'={} but dataset has N={}, D={}, T={}, T'={}",
            cfg.n_nodes,
            cfg.in_dim,
            cfg.window,
            cfg.horizon,
            dataset.n_nodes(),
            dataset.in_dim(),
            layout.window,
            layout.horizon
        )));
    }
    Ok(())
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub m_mean: f64,
    pub m_std: f64,
    pub m_p95: f64,
}

pub fn history_to_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_mae,m_mean,m_std,m_p95\n");
    for r in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch, r.train_loss, r.val_mae, r.m_mean, r.m_std, r.m_p95
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model configuration actually trained.
    pub config: ModelConfig,
    /// Parameters of the epoch with the lowest validation MAE.
    pub params: ModelParams,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Validation metrics of the initial parameters.
    pub baseline: MetricReport,
}

/// Gradient of the training loss on one batch, in `for_each_mut` order.
pub fn batch_gradient(
    params: &ModelParams,
    cfg: &ModelConfig,
    a_hat: &Tensor,
    x: Tensor,
    y: Tensor,
    lambda: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let xv = tape.constant(x);
    let yv = tape.constant(y);
    let av = tape.constant(a_hat.clone());
    let out = forward(&mut tape, xv, av, &vars, cfg, &NfeCounter::new())?;
    let lte: Vec<Var> = out.evolutions().iter().flat_map(|e| e.lte.iter().copied()).collect();
    let l = loss(&mut tape, out.y_hat, yv, &lte, lambda)?;
    tape.backward(l)?;
    let mut grads = Vec::new();
    vars.map(|_, &v| {
        grads.push(
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(v).numel()]),
        )
    });
    Ok((tape.value(l).item()?, grads))
}

/// Train from a seeded initialization with Adam, shuffled mini-batches and
/// early stopping on validation MAE.
pub fn train(dataset: &ForecastDataset, base: &ModelConfig, tc: &TrainConfig) -> Result<TrainOutcome> {
    tc.validate()?;
    let cfg = tc.model_config(base);
    cfg.validate()?;
    check_compatible(&cfg, dataset)?;
    let mut train_windows = dataset.windows(Split::Train).to_vec();
    if train_windows.is_empty() || dataset.windows(Split::Val).is_empty() {
        return Err(Error::Validation("training needs non-empty train and validation splits".into()));
    }

    let mut params = ModelParams::init(&cfg, tc.seed)?;
    let baseline = evaluate(&params, &cfg, dataset, Split::Val, tc.batch_size)?.metrics;
    let a_hat = dataset.graph.normalize_adjacency();
    let mut adam = Adam::new(tc.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut best = (baseline.mae, params.clone(), 0);
    let mut history = Vec::new();
    let mut stale = 0;

    for epoch in 1..=tc.epochs {
        train_windows.shuffle(&mut rng);
        let mut total = 0.0;
        let batches = train_windows.chunks(tc.batch_size);
        let n_batches = batches.len();
        for (batch, starts) in batches.enumerate() {
            let diverged = |e: Error| match e {
                Error::Numeric { .. } => Error::Diverged { epoch, batch },
                other => other,
            };
            let (x, y) = dataset.batch(starts)?;
            let (l, mut grads) = batch_gradient(&params, &cfg, &a_hat, x, y, tc.lambda).map_err(diverged)?;
            clip_global_norm(&mut grads, tc.clip_norm);
            adam.step(&mut params, &grads)?;
            total += l;
        }
        let val = evaluate(&params, &cfg, dataset, Split::Val, tc.batch_size)
            .map_err(|e| match e {
                Error::Numeric { .. } => Error::Diverged { epoch, batch: n_batches },
                other => other,
            })?;
        history.push(EpochRecord {
            epoch,
            train_loss: total / n_batches as f64,
            val_mae: val.metrics.mae,
            m_mean: val.masks.all.mean,
            m_std: val.masks.all.std,
            m_p95: val.masks.all.p95,
        });
        if val.metrics.mae < best.0 {
            best = (val.metrics.mae, params.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= tc.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        config: cfg,
        params: best.1,
        best_epoch: best.2,
        history,
        baseline,
    })
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub params: usize,
    pub test: MetricReport,
}

pub fn ablation_header() -> &'static str {
    "variant,params,mae,mape,rmse\n"
}

impl AblationRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}\n",
            self.variant.as_str(),
            self.params,
            self.test.mae,
            self.test.mape,
            self.test.rmse
        )
    }
}

/// Train one variant with the shared seed and score it on the test split.
pub fn ablate_variant(
    dataset: &ForecastDataset,
    base: &ModelConfig,
    tc: &TrainConfig,
    variant: Variant,
    penalty: f64,
) -> Result<(AblationRow, TrainOutcome)> {
    let tc = tc.for_variant(variant, penalty);
    let outcome = train(dataset, base, &tc)?;
    let test = evaluate(&outcome.params, &outcome.config, dataset, Split::Test, tc.batch_size)?;
    let row = AblationRow {
        variant,
        params: outcome.params.param_count(),
        test: test.metrics,
    };
    Ok((row, outcome))
}

/// Mask statistics of one arm of the collapse experiment.
#[derive(Debug, Clone)]
pub struct CollapseArm {
    pub lambda: f64,
    pub masks: MaskStats,
    pub test: MetricReport,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct CollapseReport {
    pub full: CollapseArm,
    pub penalty: Vec<CollapseArm>,
}

/// Band the penalty arm's mask mean must fall into to count as collapsed.
pub const COLLAPSE_BAND: (f64, f64) = (0.48, 0.52);

impl CollapseArm {
    pub fn collapsed_against(&self, full: &CollapseArm) -> bool {
        let m = &self.masks.all;
        (COLLAPSE_BAND.0..=COLLAPSE_BAND.1).contains(&m.mean) && m.std < full.masks.all.std
    }
}

impl CollapseReport {
    /// First penalty arm whose mask collapsed.
    pub fn collapsed_arm(&self) -> Option<&CollapseArm> {
        self.penalty.iter().find(|a| a.collapsed_against(&self.full))
    }

    /// Whether the full arm's masks sit higher at shocked cells.
    pub fn shock_contrast(&self) -> Option<(f64, f64)> {
        let m = &self.full.masks;
        Some((m.shock.as_ref()?.mean, m.non_shock.as_ref()?.mean))
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let line = |out: &mut String, name: &str, arm: &CollapseArm| {
            let s = &arm.masks.all;
            let _ = writeln!(
                out,
                "{name} lambda={} m_mean={} m_std={} m_p95={} count={}",
                arm.lambda, s.mean, s.std, s.p95, s.count
            );
        };
        line(&mut out, "full", &self.full);
        for arm in &self.penalty {
            line(&mut out, "manifold_penalty", arm);
        }
        if let (Some(s), Some(c)) = (&self.full.masks.shock, &self.full.masks.non_shock) {
            let _ = writeln!(
                out,
                "full shock_mean={} shock_p95={} non_shock_mean={}",
                s.mean, s.p95, c.mean
            );
        }
        for arm in &self.penalty {
            let _ = writeln!(
                out,
                "lambda={} collapsed={}",
                arm.lambda,
                arm.collapsed_against(&self.full)
            );
        }
        let _ = writeln!(
            out,
            "verdict {}",
            if self.collapsed_arm().is_some() { "PASS" } else { "FAIL" }
        );
        out
    }
}

/// CSV `bin_lo,bin_hi,count` of a mask histogram over `[0, 1]`.
pub fn histogram_to_csv(summary: &Summary) -> String {
    let mut out = String::from("bin_lo,bin_hi,count\n");
    let w = 1.0 / HISTOGRAM_BINS as f64;
    for (i, c) in summary.histogram.iter().enumerate() {
        let _ = writeln!(out, "{},{},{c}", i as f64 * w, (i + 1) as f64 * w);
    }
    out
}

/// Train `full` and one manifold-penalty arm per λ with identical seeds, then
/// compare their test-split mask distributions.
pub fn collapse_experiment(
    dataset: &ForecastDataset,
    base: &ModelConfig,
    tc: &TrainConfig,
    lambdas: &[f64],
) -> Result<CollapseReport> {
    if dataset.events.is_none() {
        return Err(Error::Validation("collapse experiment needs a shock event log".into()));
    }
    if lambdas.is_empty() {
        return Err(Error::Validation("collapse experiment needs at least one lambda".into()));
    }
    let arm = |variant: Variant, lambda: f64| -> Result<CollapseArm> {
        let tc = tc.for_variant(variant, lambda);
        let outcome = train(dataset, base, &tc)?;
        let eval = evaluate(&outcome.params, &outcome.config, dataset, Split::Test, tc.batch_size)?;
        Ok(CollapseArm {
            lambda,
            masks: eval.masks,
            test: eval.metrics,
            history: outcome.history,
        })
    };
    let full = arm(Variant::Full, 0.0)?;
    let penalty = lambdas
        .iter()
        .map(|&l| arm(Variant::ManifoldPenalty, l))
        .collect::<Result<Vec<_>>>()?;
    Ok(CollapseReport { full, penalty })
}
