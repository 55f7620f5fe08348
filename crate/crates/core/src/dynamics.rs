//! Hybrid continuous/discrete latent evolution.
//!
//! Each integration step evaluates the shared vector field twice, reading a
//! first-order (Euler) and a second-order (midpoint RK2) estimate off the
//! same stage values. Their elementwise gap is the local truncation error,
//! which is squashed into a mask in `[0.5, 1)` that gates a per-step
//! discrete compensator:
//!
//! ```text
//! k1 = f(h)               h_euler = h + Δt·k1
//! k2 = f(h + Δt/2·k1)     h_rk2   = h + Δt·k2
//! E  = |h_rk2 − h_euler|  M = σ(E)
//! h' = h_rk2 + M ⊙ tanh(h·W_g[t] + b_g[t])
//! ```

use std::cell::Cell;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{Summary, HISTOGRAM_BINS};
use crate::tensor::{Tape, Tensor, Var};

/// Weight and bias of one affine map `x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine<T = Tensor> {
    pub weight: T,
    pub bias: T,
}

impl<T> Affine<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Affine<U> {
        Affine {
            weight: f("weight", &self.weight),
            bias: f("bias", &self.bias),
        }
    }
}

impl Affine<Tensor> {
    pub fn zeros(width: usize) -> Self {
        Affine {
            weight: Tensor::zeros(&[width, width]),
            bias: Tensor::zeros(&[width]),
        }
    }
}

/// Parameters of the continuous vector field, shared by every step and both stages.
pub type VectorFieldParams<T = Tensor> = Affine<T>;

/// One independent affine map per integration step.
#[derive(Debug, Clone, PartialEq)]
pub struct PerStep<T = Tensor> {
    pub per_step: Vec<Affine<T>>,
}

/// Discrete jump operator `g(h) = tanh(h·W_g[t] + b_g[t])`, untied across steps.
pub type CompensatorParams<T = Tensor> = PerStep<T>;

/// Mask generator for the ablation that replaces the truncation error with a learned map.
pub type LearnedMaskParams<T = Tensor> = PerStep<T>;

impl<T> PerStep<T> {
    pub fn steps(&self) -> usize {
        self.per_step.len()
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> PerStep<U> {
        PerStep {
            per_step: self
                .per_step
                .iter()
                .enumerate()
                .map(|(i, a)| a.map(|name, t| f(&format!("{i}.{name}"), t)))
                .collect(),
        }
    }
}

/// How the compensator is gated during evolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// `M = σ(E)` from the solver discrepancy.
    Lte,
    /// `M ≡ 1`: compensation applied everywhere.
    UniformOne,
    /// `M = σ(h·W_m[t] + b_m[t])`, no truncation error involved.
    Learned,
    /// No compensator; the step is plain RK2.
    Off,
}

impl MaskMode {
    pub const ALL: [MaskMode; 4] = [Self::Lte, Self::UniformOne, Self::Learned, Self::Off];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Lte => "lte",
            Self::UniformOne => "uniform_one",
            Self::Learned => "learned",
            Self::Off => "off",
        }
    }

    pub fn uses_compensator(self) -> bool {
        self != Self::Off
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown mask mode `{s}`")))
    }
}

/// Counts vector-field evaluations.
#[derive(Debug, Default)]
pub struct NfeCounter(Cell<usize>);

impl NfeCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self) -> usize {
        self.0.get()
    }

    fn bump(&self) {
        self.0.set(self.0.get() + 1);
    }
}

/// Per-step diagnostics of one evolved stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub step: usize,
    /// Vector-field evaluations spent in this step.
    pub nfe: usize,
    pub e_mean: f64,
    pub e_max: f64,
    pub m_mean: f64,
    pub m_std: f64,
    pub m_p95: f64,
    pub mask_histogram: [u64; HISTOGRAM_BINS],
}

impl StepTrace {
    fn new(step: usize, nfe: usize, lte: &[f64], mask: &[f64]) -> Self {
        let m = Summary::of(mask);
        StepTrace {
            step,
            nfe,
            e_mean: crate::stats::mean(lte),
            e_max: lte.iter().copied().fold(0.0, f64::max),
            m_mean: m.mean,
            m_std: m.std,
            m_p95: m.p95,
            mask_histogram: m.histogram,
        }
    }
}

/// CSV rendering: `step,nfe,e_mean,e_max,m_mean,m_std,m_p95,hist_0..hist_19`.
pub fn traces_to_csv(traces: &[StepTrace]) -> String {
    let mut out = String::from("step,nfe,e_mean,e_max,m_mean,m_std,m_p95");
    for i in 0..HISTOGRAM_BINS {
        let _ = write!(out, ",hist_{i}");
    }
    out.push('\n');
    for t in traces {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{}",
            t.step, t.nfe, t.e_mean, t.e_max, t.m_mean, t.m_std, t.m_p95
        );
        for c in t.mask_histogram {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvolveConfig {
    pub steps: usize,
    pub mask_mode: MaskMode,
    /// Let gradients flow from the mask back into the truncation error.
    pub mask_grad: bool,
    /// Approximate fast path: skip the compensator on nodes whose mask stays
    /// below `0.5 + τ` in every channel. `None` keeps the exact dense update.
    pub sparsity: Option<f64>,
}

impl EvolveConfig {
    pub fn new(steps: usize, mask_mode: MaskMode) -> Self {
        EvolveConfig {
            steps,
            mask_mode,
            mask_grad: false,
            sparsity: None,
        }
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }
}

/// Parameters of one stream, already recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct StreamVars<'a> {
    pub field: &'a VectorFieldParams<Var>,
    pub compensator: Option<&'a CompensatorParams<Var>>,
    pub learned_mask: Option<&'a LearnedMaskParams<Var>>,
}

/// Result of evolving one stream for `S` steps.
#[derive(Debug, Clone)]
pub struct Evolution {
    pub h_final: Var,
    /// State after each step (`states[i]` is the output of step `i`).
    pub states: Vec<Var>,
    /// Truncation error of each step, attached to the tape.
    pub lte: Vec<Var>,
    /// Mask of each step. Under `MaskMode::Off` this is `σ(E)` for diagnostics only.
    pub masks: Vec<Var>,
    pub traces: Vec<StepTrace>,
}

/// `f(h) = (A·h)·W_f + b_f` for `h: [B, N, C]`. Counts as one NFE.
pub fn vector_field(
    tape: &mut Tape,
    h: Var,
    a_op: Var,
    params: &VectorFieldParams<Var>,
    nfe: &NfeCounter,
) -> Result<Var> {
    nfe.bump();
    let shape = tape.shape(h).to_vec();
    let mixed = tape.propagate(a_op, h)?;
    let out = affine_rows(tape, mixed, params)?;
    debug_assert_eq!(tape.shape(out), &shape[..]);
    Ok(out)
}

/// Apply `x·W + b` to the trailing axis of a `[.., C]` tensor.
fn affine_rows(tape: &mut Tape, x: Var, p: &Affine<Var>) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let c = *shape.last().ok_or_else(|| Error::dim("affine", "scalar input"))?;
    let rows = tape.value(x).numel() / c;
    let flat = tape.reshape(x, &[rows, c])?;
    let y = tape.matmul(flat, p.weight)?;
    let y = tape.add_bias(y, p.bias)?;
    let out_c = tape.shape(y)[1];
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = out_c;
    tape.reshape(y, &out_shape)
}

/// One embedded Euler/RK2 step sharing the first stage. Returns `(h_euler, h_rk2)`.
pub fn embedded_dual_step(
    tape: &mut Tape,
    h: Var,
    dt: f64,
    a_op: Var,
    params: &VectorFieldParams<Var>,
    nfe: &NfeCounter,
) -> Result<(Var, Var)> {
    if !(dt > 0.0) {
        return Err(Error::Contract(format!("step size must be > 0, got {dt}")));
    }
    let k1 = vector_field(tape, h, a_op, params, nfe)?;
    let dk1 = tape.scale(k1, dt)?;
    let h_euler = tape.add(h, dk1)?;
    let half = tape.scale(k1, dt / 2.0)?;
    let mid = tape.add(h, half)?;
    let k2 = vector_field(tape, mid, a_op, params, nfe)?;
    let dk2 = tape.scale(k2, dt)?;
    let h_rk2 = tape.add(h, dk2)?;
    Ok((h_euler, h_rk2))
}

/// `E = |h_rk2 − h_euler|`.
pub fn local_truncation_error(tape: &mut Tape, h_euler: Var, h_rk2: Var) -> Result<Var> {
    let diff = tape.sub(h_rk2, h_euler)?;
    tape.abs(diff)
}

/// `M = σ(E)` for a non-negative error tensor, giving values in `[0.5, 1)`.
pub fn attention_mask(tape: &mut Tape, e: Var) -> Result<Var> {
    if tape.data(e).iter().any(|&v| v < 0.0) {
        return Err(Error::Contract("attention mask input must be non-negative".into()));
    }
    tape.sigmoid(e)
}

/// `h_rk2 + M ⊙ tanh(h_t·W_g[step] + b_g[step])`.
///
/// With `sparsity = Some(τ)` the jump is evaluated only for nodes where some
/// mask channel reaches `0.5 + τ`; other nodes get no jump at all, which is
/// an approximation because the dense mask never drops below 0.5.
pub fn compensate(
    tape: &mut Tape,
    h_t: Var,
    h_rk2: Var,
    mask: Var,
    step: usize,
    params: &CompensatorParams<Var>,
    sparsity: Option<f64>,
) -> Result<Var> {
    let p = params.per_step.get(step).ok_or_else(|| {
        Error::Contract(format!(
            "compensator step {step} out of range for {} steps",
            params.steps()
        ))
    })?;
    if tape.shape(h_t) != tape.shape(h_rk2) || tape.shape(mask) != tape.shape(h_rk2) {
        return Err(Error::dim(
            "compensate",
            format!(
                "h_t {:?}, h_rk2 {:?}, mask {:?}",
                tape.shape(h_t),
                tape.shape(h_rk2),
                tape.shape(mask)
            ),
        ));
    }
    let Some(tau) = sparsity else {
        let pre = affine_rows(tape, h_t, p)?;
        let jump = tape.tanh(pre)?;
        let gated = tape.hadamard(mask, jump)?;
        return tape.add(h_rk2, gated);
    };

    let shape = tape.shape(h_t).to_vec();
    let c = *shape.last().unwrap();
    let rows = tape.value(h_t).numel() / c;
    let active: Vec<usize> = tape
        .data(mask)
        .chunks(c)
        .enumerate()
        .filter(|(_, r)| r.iter().any(|&m| m >= 0.5 + tau))
        .map(|(i, _)| i)
        .collect();
    if active.is_empty() {
        return Ok(h_rk2);
    }
    let h_flat = tape.reshape(h_t, &[rows, c])?;
    let m_flat = tape.reshape(mask, &[rows, c])?;
    let h_sel = tape.gather_rows(h_flat, &active)?;
    let m_sel = tape.gather_rows(m_flat, &active)?;
    let pre = affine_rows(tape, h_sel, p)?;
    let jump = tape.tanh(pre)?;
    let gated = tape.hadamard(m_sel, jump)?;
    let scattered = tape.scatter_rows(gated, &active, rows)?;
    let scattered = tape.reshape(scattered, &shape)?;
    tape.add(h_rk2, scattered)
}

/// Run `cfg.steps` hybrid steps of size `1/steps` from `h0`.
pub fn evolve(
    tape: &mut Tape,
    h0: Var,
    a_op: Var,
    stream: StreamVars<'_>,
    cfg: &EvolveConfig,
    nfe: &NfeCounter,
) -> Result<Evolution> {
    if cfg.steps == 0 {
        return Err(Error::Contract("evolve needs at least one step".into()));
    }
    let dt = cfg.dt();
    let compensator = if cfg.mask_mode.uses_compensator() {
        let c = stream
            .compensator
            .ok_or_else(|| Error::Contract(format!("mask mode `{}` needs a compensator", cfg.mask_mode.as_str())))?;
        if c.steps() != cfg.steps {
            return Err(Error::Contract(format!(
                "compensator has {} steps, evolution runs {}",
                c.steps(),
                cfg.steps
            )));
        }
        Some(c)
    } else {
        None
    };
    let learned = if cfg.mask_mode == MaskMode::Learned {
        let l = stream
            .learned_mask
            .ok_or_else(|| Error::Contract("learned mask mode needs mask parameters".into()))?;
        if l.steps() != cfg.steps {
            return Err(Error::Contract(format!(
                "learned mask has {} steps, evolution runs {}",
                l.steps(),
                cfg.steps
            )));
        }
        Some(l)
    } else {
        None
    };

    let mut h = h0;
    let mut out = Evolution {
        h_final: h0,
        states: Vec::with_capacity(cfg.steps),
        lte: Vec::with_capacity(cfg.steps),
        masks: Vec::with_capacity(cfg.steps),
        traces: Vec::with_capacity(cfg.steps),
    };
    for step in 0..cfg.steps {
        let before = nfe.get();
        let next = (|| -> Result<Var> {
            let (h_euler, h_rk2) = embedded_dual_step(tape, h, dt, a_op, stream.field, nfe)?;
            let e = local_truncation_error(tape, h_euler, h_rk2)?;
            let mask = match cfg.mask_mode {
                MaskMode::Lte | MaskMode::Off => {
                    let src = if cfg.mask_grad && cfg.mask_mode == MaskMode::Lte {
                        e
                    } else {
                        tape.detach(e)
                    };
                    attention_mask(tape, src)?
                }
                MaskMode::UniformOne => {
                    let shape = tape.shape(h).to_vec();
                    tape.constant(Tensor::full(&shape, 1.0))
                }
                MaskMode::Learned => {
                    let p = &learned.expect("checked above").per_step[step];
                    let pre = affine_rows(tape, h, p)?;
                    tape.sigmoid(pre)?
                }
            };
            out.lte.push(e);
            out.masks.push(mask);
            match compensator {
                Some(c) => compensate(tape, h, h_rk2, mask, step, c, cfg.sparsity),
                None => Ok(h_rk2),
            }
        })()
        .map_err(|err| err.at_step(step))?;
        let e = *out.lte.last().unwrap();
        let m = *out.masks.last().unwrap();
        out.traces
            .push(StepTrace::new(step, nfe.get() - before, tape.data(e), tape.data(m)));
        out.states.push(next);
        h = next;
    }
    out.h_final = h;
    Ok(out)
}

/// Two-node trajectories recorded by [`topology_witness`]. Index 0 is the
/// initial state, index `i` the state after step `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct WitnessRun {
    pub node0: Vec<f64>,
    pub node1: Vec<f64>,
}

impl WitnessRun {
    fn gaps(&self) -> impl Iterator<Item = f64> + '_ {
        self.node0.iter().zip(&self.node1).map(|(a, b)| a - b)
    }

    pub fn max_gap(&self) -> f64 {
        self.gaps().fold(0.0, |m, g| m.max(g.abs()))
    }

    /// Whether `node0 − node1` changes strict sign along the trajectory.
    pub fn crosses(&self) -> bool {
        let signs: Vec<f64> = self.gaps().filter(|g| *g != 0.0).map(f64::signum).collect();
        signs.windows(2).any(|w| w[0] != w[1])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,node0,node1\n");
        for (i, (a, b)) in self.node0.iter().zip(&self.node1).enumerate() {
            let _ = writeln!(out, "{i},{a},{b}");
        }
        out
    }
}

/// Constructed instance separating continuous flows from the hybrid update.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologyWitness {
    /// Identical states on a symmetric two-node graph, compensation off.
    pub off_identical: WitnessRun,
    /// Ordered states `1.0 < 1.1` on decoupled nodes, compensation off.
    pub off_ordered: WitnessRun,
    /// The same ordered states with a compensator whose jump changes sign at 1.05.
    pub on_ordered: WitnessRun,
}

impl TopologyWitness {
    pub fn passed(&self) -> bool {
        self.off_identical.max_gap() == 0.0 && !self.off_ordered.crosses() && self.on_ordered.crosses()
    }
}

/// Scalar states, field `f(h) = −0.5·h + 0.1`. The compensator
/// `tanh(−50·h + 52.5)` pushes states below 1.05 up and states above it
/// down, so the lower node overtakes the upper one.
pub fn topology_witness(steps: usize) -> Result<TopologyWitness> {
    let run = |op: Tensor, h0: [f64; 2], mode: MaskMode| -> Result<WitnessRun> {
        let mut tape = Tape::new();
        let a = tape.constant(op);
        let h = tape.constant(Tensor::new(&[1, 2, 1], h0.to_vec())?);
        let field = Affine {
            weight: tape.constant(Tensor::new(&[1, 1], vec![-0.5])?),
            bias: tape.constant(Tensor::new(&[1], vec![0.1])?),
        };
        let jump = PerStep {
            per_step: (0..steps)
                .map(|_| -> Result<Affine<Var>> {
                    Ok(Affine {
                        weight: tape.constant(Tensor::new(&[1, 1], vec![-50.0])?),
                        bias: tape.constant(Tensor::new(&[1], vec![52.5])?),
                    })
                })
                .collect::<Result<_>>()?,
        };
        let stream = StreamVars {
            field: &field,
            compensator: Some(&jump),
            learned_mask: None,
        };
        let evo = evolve(&mut tape, h, a, stream, &EvolveConfig::new(steps, mode), &NfeCounter::new())?;
        let mut out = WitnessRun {
            node0: vec![h0[0]],
            node1: vec![h0[1]],
        };
        for s in evo.states {
            out.node0.push(tape.data(s)[0]);
            out.node1.push(tape.data(s)[1]);
        }
        Ok(out)
    };
    let symmetric = Tensor::full(&[2, 2], 0.5);
    Ok(TopologyWitness {
        off_identical: run(symmetric, [0.8, 0.8], MaskMode::Off)?,
        off_ordered: run(Tensor::eye(2), [1.0, 1.1], MaskMode::Off)?,
        on_ordered: run(Tensor::eye(2), [1.0, 1.1], MaskMode::Lte)?,
    })
}
