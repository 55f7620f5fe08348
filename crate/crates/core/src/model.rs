//! The forecasting model: input projection plus node embeddings form one
//! initial latent, two streams evolve it over the static and the adaptive
//! adjacency, and a linear head maps the concatenated final states to all
//! horizons at once.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    evolve, Affine, CompensatorParams, EvolveConfig, Evolution, LearnedMaskParams, MaskMode,
    NfeCounter, PerStep, StreamVars, VectorFieldParams,
};
use crate::error::{Error, Result};
use crate::graph::{adaptive_adjacency, NodeEmbeddings};
use crate::tensor::{Tape, Tensor, Var};

pub const NUM_STREAMS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_nodes: usize,
    pub in_dim: usize,
    /// Observed ticks per window (T).
    pub window: usize,
    /// Forecast ticks per window (T′).
    pub horizon: usize,
    pub proj_dim: usize,
    pub embed_dim: usize,
    pub steps: usize,
    pub mask_mode: MaskMode,
    #[serde(default)]
    pub mask_grad: bool,
    #[serde(default)]
    pub sparsity: Option<f64>,
}

impl ModelConfig {
    pub fn new(n_nodes: usize, in_dim: usize, window: usize, horizon: usize) -> Self {
        ModelConfig {
            n_nodes,
            in_dim,
            window,
            horizon,
            proj_dim: 30,
            embed_dim: 10,
            steps: 4,
            mask_mode: MaskMode::Lte,
            mask_grad: false,
            sparsity: None,
        }
    }

    /// Latent width `d_h = proj_dim + embed_dim`.
    pub fn hidden(&self) -> usize {
        self.proj_dim + self.embed_dim
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    pub fn evolve_config(&self) -> EvolveConfig {
        EvolveConfig {
            steps: self.steps,
            mask_mode: self.mask_mode,
            mask_grad: self.mask_grad,
            sparsity: self.sparsity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_nodes", self.n_nodes),
            ("in_dim", self.in_dim),
            ("window", self.window),
            ("horizon", self.horizon),
            ("proj_dim", self.proj_dim),
            ("embed_dim", self.embed_dim),
            ("steps", self.steps),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Validation(format!("model {name} must be positive")));
            }
        }
        if let Some(tau) = self.sparsity {
            if !(0.0..0.5).contains(&tau) {
                return Err(Error::Validation(format!("sparsity threshold {tau} outside [0, 0.5)")));
            }
        }
        Ok(())
    }
}

/// Parameters of one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamParams<T = Tensor> {
    pub field: VectorFieldParams<T>,
    pub compensator: Option<CompensatorParams<T>>,
    pub learned_mask: Option<LearnedMaskParams<T>>,
}

impl<T> StreamParams<T> {
    fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> StreamParams<U> {
        StreamParams {
            field: self.field.map(|n, t| f(&format!("{prefix}.field.{n}"), t)),
            compensator: self
                .compensator
                .as_ref()
                .map(|c| c.map(|n, t| f(&format!("{prefix}.compensator.{n}"), t))),
            learned_mask: self
                .learned_mask
                .as_ref()
                .map(|c| c.map(|n, t| f(&format!("{prefix}.learned_mask.{n}"), t))),
        }
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}.field.weight"), &mut self.field.weight);
        f(&format!("{prefix}.field.bias"), &mut self.field.bias);
        for (group, params) in [("compensator", &mut self.compensator), ("learned_mask", &mut self.learned_mask)] {
            if let Some(p) = params {
                for (i, a) in p.per_step.iter_mut().enumerate() {
                    f(&format!("{prefix}.{group}.{i}.weight"), &mut a.weight);
                    f(&format!("{prefix}.{group}.{i}.bias"), &mut a.bias);
                }
            }
        }
    }
}

impl StreamParams<Var> {
    pub fn vars(&self) -> StreamVars<'_> {
        StreamVars {
            field: &self.field,
            compensator: self.compensator.as_ref(),
            learned_mask: self.learned_mask.as_ref(),
        }
    }
}

/// All learnable parameters. `T = Tensor` holds values; `T = Var` holds the
/// same structure recorded on a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = Tensor> {
    /// `[(T·D), proj_dim]`
    pub w_input: T,
    /// `[N, d_e]`
    pub e_node: T,
    /// Stream over the static normalized adjacency.
    pub spatial: StreamParams<T>,
    /// Stream over the adaptive adjacency.
    pub topological: StreamParams<T>,
    /// `[2·d_h, T′]`
    pub w_out: T,
    /// `[T′]`
    pub b_out: T,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> ModelParams<U> {
        ModelParams {
            w_input: f("w_input", &self.w_input),
            e_node: f("e_node", &self.e_node),
            spatial: self.spatial.map("spatial", &mut f),
            topological: self.topological.map("topological", &mut f),
            w_out: f("w_out", &self.w_out),
            b_out: f("b_out", &self.b_out),
        }
    }

    /// Visit every parameter in a fixed order.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut T)) {
        f("w_input", &mut self.w_input);
        f("e_node", &mut self.e_node);
        self.spatial.for_each_mut("spatial", &mut f);
        self.topological.for_each_mut("topological", &mut f);
        f("w_out", &mut self.w_out);
        f("b_out", &mut self.b_out);
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.map(|n, _| names.push(n.to_string()));
        names
    }
}

impl ModelParams<Tensor> {
    /// Random initialization. Every parameter draws from its own stream keyed
    /// by name, so variants that share a parameter also share its initial value.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden();
        let shapes = Self::zeros(cfg);
        let mut params = shapes.map(|name, t| {
            let shape = t.shape().to_vec();
            let scale = if name.ends_with("bias") || name == "b_out" {
                0.0
            } else if name == "e_node" {
                0.5
            } else {
                1.0 / (shape[0] as f64).sqrt()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(name_key(name));
            let data = (0..t.numel())
                .map(|_| scale * rng.random_range(-1.0..1.0))
                .collect();
            Tensor::new(&shape, data).expect("shape from template")
        });
        debug_assert_eq!(params.spatial.field.weight.shape(), &[d, d]);
        params.for_each_mut(|_, t| t.requires_grad = true);
        Ok(params)
    }

    /// All-zero parameters with the shapes implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.hidden();
        let stream = || StreamParams {
            field: Affine::zeros(d),
            compensator: cfg.mask_mode.uses_compensator().then(|| PerStep {
                per_step: (0..cfg.steps).map(|_| Affine::zeros(d)).collect(),
            }),
            learned_mask: (cfg.mask_mode == MaskMode::Learned).then(|| PerStep {
                per_step: (0..cfg.steps).map(|_| Affine::zeros(d)).collect(),
            }),
        };
        ModelParams {
            w_input: Tensor::zeros(&[cfg.window * cfg.in_dim, cfg.proj_dim]),
            e_node: Tensor::zeros(&[cfg.n_nodes, cfg.embed_dim]),
            spatial: stream(),
            topological: stream(),
            w_out: Tensor::zeros(&[2 * d, cfg.horizon]),
            b_out: Tensor::zeros(&[cfg.horizon]),
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.map(|_, t| n += t.numel());
        n
    }

    pub fn node_embeddings(&self) -> Result<NodeEmbeddings> {
        NodeEmbeddings::new(self.e_node.clone())
    }

    pub fn register(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.map(|_, t| tape.leaf(t.clone()))
    }

    /// Write a checkpoint: magic line, config as JSON, then one
    /// `param <name> <rank> <dims..>` header followed by a line of values per parameter.
    pub fn save(&self, cfg: &ModelConfig, path: &Path) -> Result<()> {
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(out, "config {}", serde_json::to_string(cfg).expect("config serializes"));
        self.map(|name, t| {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let _ = writeln!(out, "param {name} {} {}", dims.len(), dims.join(" "));
            let vals: Vec<String> = t.data().iter().map(f64::to_string).collect();
            let _ = writeln!(out, "{}", vals.join(" "));
        });
        let _ = writeln!(out, "end");
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(ModelConfig, Self)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let err = |line: usize, detail: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            col: None,
            detail,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l == CHECKPOINT_MAGIC => {}
            _ => return Err(err(1, format!("missing `{CHECKPOINT_MAGIC}` header"))),
        }
        let (ln, cfg_line) = lines.next().ok_or_else(|| err(2, "missing config".into()))?;
        let cfg: ModelConfig = cfg_line
            .strip_prefix("config ")
            .ok_or_else(|| err(ln, "expected `config` line".into()))
            .and_then(|j| serde_json::from_str(j).map_err(|e| err(ln, e.to_string())))?;
        cfg.validate()?;

        let mut loaded = std::collections::BTreeMap::new();
        loop {
            let (ln, header) = lines.next().ok_or_else(|| err(0, "missing `end`".into()))?;
            if header == "end" {
                break;
            }
            let fields: Vec<&str> = header.split_whitespace().collect();
            if fields.len() < 3 || fields[0] != "param" {
                return Err(err(ln, format!("bad parameter header `{header}`")));
            }
            let rank: usize = fields[2].parse().map_err(|_| err(ln, "bad rank".into()))?;
            let shape: Vec<usize> = fields[3..]
                .iter()
                .map(|s| s.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| err(ln, "bad dimension".into()))?;
            if shape.len() != rank {
                return Err(err(ln, format!("rank {rank} but {} dims", shape.len())));
            }
            let (vln, values) = lines.next().ok_or_else(|| err(ln + 1, "missing values".into()))?;
            let data: Vec<f64> = values
                .split_whitespace()
                .map(|s| s.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| err(vln, "bad value".into()))?;
            loaded.insert(fields[1].to_string(), Tensor::new(&shape, data)?);
        }

        let mut params = Self::zeros(&cfg);
        let mut missing = Vec::new();
        params.for_each_mut(|name, slot| match loaded.remove(name) {
            Some(t) if t.shape() == slot.shape() => *slot = t.with_grad(),
            Some(t) => missing.push(format!("{name} (shape {:?}, expected {:?})", t.shape(), slot.shape())),
            None => missing.push(name.to_string()),
        });
        if !missing.is_empty() {
            return Err(Error::Validation(format!("checkpoint parameters missing or mis-shaped: {}", missing.join(", "))));
        }
        if let Some(extra) = loaded.keys().next() {
            return Err(Error::Validation(format!("checkpoint has unexpected parameter `{extra}`")));
        }
        Ok((cfg, params))
    }
}

const CHECKPOINT_MAGIC: &str = "LTEODE-CHECKPOINT v1";

/// FNV-1a of a parameter name, used as an RNG stream id.
fn name_key(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Initial latents of the two streams. Both start from the same tensor.
#[derive(Debug, Clone, Copy)]
pub struct DualStreamState {
    pub h_s: Var,
    pub h_k: Var,
}

/// Flatten `(T, D)` per node, project to `proj_dim`, and append the node
/// embeddings: `[B, N, T, D] → [B, N, d_h]`.
pub fn initialize_state(tape: &mut Tape, x: Var, params: &ModelParams<Var>, cfg: &ModelConfig) -> Result<DualStreamState> {
    let shape = tape.shape(x).to_vec();
    let expected = [cfg.n_nodes, cfg.window, cfg.in_dim];
    if shape.len() != 4 || shape[1..] != expected {
        return Err(Error::dim(
            "initialize_state",
            format!("input {shape:?}, expected [B, {}, {}, {}]", expected[0], expected[1], expected[2]),
        ));
    }
    let (b, n) = (shape[0], shape[1]);
    let flat = tape.reshape(x, &[b * n, cfg.window * cfg.in_dim])?;
    let proj = tape.matmul(flat, params.w_input)?;
    let proj = tape.reshape(proj, &[b, n, cfg.proj_dim])?;
    let emb = tape.repeat_batch(params.e_node, b)?;
    let h0 = tape.concat_channels(proj, emb)?;
    Ok(DualStreamState { h_s: h0, h_k: h0 })
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B, N, T′]` in scaled units.
    pub y_hat: Var,
    pub spatial: Evolution,
    pub topological: Evolution,
}

impl ForwardOutput {
    pub fn evolutions(&self) -> [&Evolution; NUM_STREAMS] {
        [&self.spatial, &self.topological]
    }
}

/// Full forward pass. `a_hat` is the normalized static adjacency.
pub fn forward(
    tape: &mut Tape,
    x: Var,
    a_hat: Var,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
    nfe: &NfeCounter,
) -> Result<ForwardOutput> {
    let state = initialize_state(tape, x, params, cfg)?;
    let ecfg = cfg.evolve_config();
    let spatial = evolve(tape, state.h_s, a_hat, params.spatial.vars(), &ecfg, nfe)?;
    let a_adapt = adaptive_adjacency(tape, params.e_node)?;
    let topological = evolve(tape, state.h_k, a_adapt, params.topological.vars(), &ecfg, nfe)?;

    let joint = tape.concat_channels(spatial.h_final, topological.h_final)?;
    let shape = tape.shape(joint).to_vec();
    let (b, n, c) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(joint, &[b * n, c])?;
    let y = tape.matmul(flat, params.w_out)?;
    let y = tape.add_bias(y, params.b_out)?;
    let y_hat = tape.reshape(y, &[b, n, cfg.horizon])?;
    Ok(ForwardOutput {
        y_hat,
        spatial,
        topological,
    })
}

/// Closed-form FLOP estimate for one sample (`B = 1`), counted as 2 × the
/// multiply-accumulates of the matrix products. Elementwise work and
/// activations are not counted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlopReport {
    /// Vector-field evaluations: `2·S` per stream.
    pub solver: u64,
    /// Compensator and learned-mask products.
    pub mask_compensation: u64,
    /// Input projection, adaptive adjacency and regression head.
    pub fixed: u64,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.solver + self.mask_compensation + self.fixed
    }
}

pub fn flop_report(cfg: &ModelConfig, n_nodes: usize) -> FlopReport {
    let (n, d, s) = (n_nodes as u64, cfg.hidden() as u64, cfg.steps as u64);
    let streams = NUM_STREAMS as u64;
    let nfe_macs = n * n * d + n * d * d;
    let solver = 2 * (2 * s * streams * nfe_macs);
    let per_step_affine = n * d * d;
    let mut extra = 0;
    if cfg.mask_mode.uses_compensator() {
        extra += per_step_affine;
    }
    if cfg.mask_mode == MaskMode::Learned {
        extra += per_step_affine;
    }
    let mask_compensation = 2 * s * streams * extra;
    let projection = n * (cfg.window * cfg.in_dim) as u64 * cfg.proj_dim as u64;
    let adjacency = n * n * cfg.embed_dim as u64;
    let head = n * 2 * d * cfg.horizon as u64;
    FlopReport {
        solver,
        mask_compensation,
        fixed: 2 * (projection + adjacency + head),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(mask_mode: MaskMode) -> ModelConfig {
        ModelConfig {
            proj_dim: 4,
            embed_dim: 2,
            steps: 2,
            mask_mode,
            ..ModelConfig::new(2, 1, 3, 2)
        }
    }

    #[test]
    fn state_shape() {
        let cfg = tiny(MaskMode::Lte);
        let params = ModelParams::init(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, 2, 3, 1]));
        let st = initialize_state(&mut tape, x, &vars, &cfg).unwrap();
        assert_eq!(tape.shape(st.h_s), &[1, 2, 6]);
        assert_eq!(st.h_s, st.h_k);
    }

    #[test]
    fn zero_input_and_projection_leave_embeddings() {
        let cfg = tiny(MaskMode::Lte);
        let mut params = ModelParams::init(&cfg, 2).unwrap();
        params.w_input = Tensor::zeros(params.w_input.shape());
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let x = tape.constant(Tensor::full(&[2, 2, 3, 1], 0.7));
        let st = initialize_state(&mut tape, x, &vars, &cfg).unwrap();
        let h = tape.data(st.h_s);
        let e = params.e_node.data();
        for b in 0..2 {
            for n in 0..2 {
                let row = &h[(b * 2 + n) * 6..(b * 2 + n + 1) * 6];
                assert_eq!(&row[..4], &[0.0; 4]);
                assert_eq!(&row[4..], &e[n * 2..n * 2 + 2]);
            }
        }
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let cfg = tiny(MaskMode::Lte);
        let params = ModelParams::init(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 1]));
        assert!(matches!(
            initialize_state(&mut tape, x, &vars, &cfg),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn parameter_sets_per_mode() {
        let count = |m| ModelParams::init(&tiny(m), 0).unwrap().param_count();
        let off = count(MaskMode::Off);
        let lte = count(MaskMode::Lte);
        assert!(off < lte);
        assert_eq!(lte, count(MaskMode::UniformOne));
        assert!(lte < count(MaskMode::Learned));
        let p = ModelParams::init(&tiny(MaskMode::Off), 0).unwrap();
        assert!(p.spatial.compensator.is_none() && p.topological.compensator.is_none());
    }

    #[test]
    fn shared_parameters_share_initialization() {
        let full = ModelParams::init(&tiny(MaskMode::Lte), 9).unwrap();
        let off = ModelParams::init(&tiny(MaskMode::Off), 9).unwrap();
        assert_eq!(full.spatial.field, off.spatial.field);
        assert_eq!(full.w_out, off.w_out);
        assert_ne!(full.spatial.field.weight, full.topological.field.weight);
    }

    #[test]
    fn flops_linear_in_steps() {
        let mut cfg = tiny(MaskMode::Lte);
        cfg.steps = 1;
        let one = flop_report(&cfg, 2);
        cfg.steps = 2;
        let two = flop_report(&cfg, 2);
        assert_eq!(two.solver, 2 * one.solver);
        assert_eq!(two.mask_compensation, 2 * one.mask_compensation);
        assert_eq!(two.fixed, one.fixed);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny(MaskMode::Learned);
        let params = ModelParams::init(&cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        params.save(&cfg, &path).unwrap();
        let (cfg2, params2) = ModelParams::load(&path).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(params, params2);
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, "nope\n").unwrap();
        assert!(matches!(ModelParams::load(&path), Err(Error::Parse { .. })));
    }
}
