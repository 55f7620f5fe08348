//! Synthetic shock series, chronological windowing, z-score scaling and the
//! wide-CSV interchange format.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SpatialGraph;
use crate::tensor::Tensor;

/// Parameters of the synthetic generator. One feature channel per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShockScenario {
    pub n_nodes: usize,
    pub total_t: usize,
    /// Constant offset of every node.
    pub level: f64,
    /// Amplitude of the periodic drive.
    pub amplitude: f64,
    /// Period of the drive in ticks.
    pub period: f64,
    /// Diffusion coefficient α in `s += α(Â − I)s`.
    pub diffusion: f64,
    /// Expected shocks per node per 100 ticks.
    pub shock_rate: f64,
    pub shock_min: f64,
    pub shock_max: f64,
    /// e-folding time of a shock in ticks.
    pub shock_decay: f64,
    pub seed: u64,
}

impl Default for ShockScenario {
    fn default() -> Self {
        ShockScenario {
            n_nodes: 20,
            total_t: 2000,
            level: 50.0,
            amplitude: 20.0,
            period: 48.0,
            diffusion: 0.2,
            shock_rate: 1.0,
            shock_min: 20.0,
            shock_max: 60.0,
            shock_decay: 6.0,
            seed: 7,
        }
    }
}

impl ShockScenario {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("amplitude", self.amplitude),
            ("diffusion", self.diffusion),
            ("shock_rate", self.shock_rate),
            ("shock_min", self.shock_min),
            ("shock_max", self.shock_max),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Validation(format!("scenario {name} must be a finite value >= 0, got {v}")));
            }
        }
        if self.n_nodes == 0 || self.total_t == 0 {
            return Err(Error::Validation("scenario needs nodes and ticks".into()));
        }
        if self.shock_min > self.shock_max {
            return Err(Error::Validation("shock_min exceeds shock_max".into()));
        }
        if !(self.period > 0.0) || !(self.shock_decay > 0.0) {
            return Err(Error::Validation("period and shock_decay must be > 0".into()));
        }
        if self.shock_rate > 100.0 {
            return Err(Error::Validation("shock_rate is per 100 ticks and cannot exceed 100".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShockEvent {
    pub t: usize,
    pub node: usize,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSeries {
    /// `[total_t, N, 1]`
    pub series: Tensor,
    pub events: Vec<ShockEvent>,
}

/// Draw shock events and simulate the series. Fully determined by `scenario.seed`.
pub fn generate_shock_series(scenario: &ShockScenario, graph: &SpatialGraph) -> Result<SyntheticSeries> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let p = scenario.shock_rate / 100.0;
    let mut events = Vec::new();
    for t in 0..scenario.total_t {
        for node in 0..scenario.n_nodes {
            if rng.random::<f64>() < p {
                let magnitude = if scenario.shock_max > scenario.shock_min {
                    rng.random_range(scenario.shock_min..scenario.shock_max)
                } else {
                    scenario.shock_min
                };
                events.push(ShockEvent { t, node, magnitude });
            }
        }
    }
    let series = simulate(scenario, graph, &events)?;
    Ok(SyntheticSeries { series, events })
}

/// Deterministic part of the generator:
///
/// `s(t+1) = s(t) + α(Â − I)s(t) + [d(t+1) − d(t)] + [z(t+1) − z(t)]`
///
/// where `d_n(t) = amplitude·sin(2πt/period + 2πn/N)` is the periodic drive
/// and `z_n(t) = Σ m·exp(−(t − t₀)/decay)` sums the events at node `n`.
pub fn simulate(scenario: &ShockScenario, graph: &SpatialGraph, events: &[ShockEvent]) -> Result<Tensor> {
    let (n, total) = (scenario.n_nodes, scenario.total_t);
    if graph.n_nodes() != n {
        return Err(Error::Validation(format!(
            "scenario has {n} nodes, graph has {}",
            graph.n_nodes()
        )));
    }
    let mut kicks = vec![0.0; total * n];
    for e in events {
        if e.t >= total || e.node >= n {
            return Err(Error::Validation(format!("shock event {e:?} outside the series")));
        }
        kicks[e.t * n + e.node] += e.magnitude;
    }
    let a_hat = graph.normalize_adjacency();
    let a = a_hat.data();
    let omega = 2.0 * std::f64::consts::PI / scenario.period;
    let drive = |t: usize, node: usize| {
        let phase = 2.0 * std::f64::consts::PI * node as f64 / n as f64;
        scenario.amplitude * (omega * t as f64 + phase).sin()
    };
    let decay = (-1.0 / scenario.shock_decay).exp();

    let mut z: Vec<f64> = kicks[..n].to_vec();
    let mut s: Vec<f64> = (0..n).map(|i| scenario.level + drive(0, i) + z[i]).collect();
    let mut out = Vec::with_capacity(total * n);
    out.extend_from_slice(&s);
    for t in 0..total.saturating_sub(1) {
        let mut next = s.clone();
        for i in 0..n {
            if scenario.diffusion != 0.0 {
                let mixed: f64 = (0..n).map(|j| a[i * n + j] * s[j]).sum();
                next[i] += scenario.diffusion * (mixed - s[i]);
            }
            next[i] += drive(t + 1, i) - drive(t, i);
            let z_next = z[i] * decay + kicks[(t + 1) * n + i];
            next[i] += z_next - z[i];
            z[i] = z_next;
        }
        s = next;
        out.extend_from_slice(&s);
    }
    Tensor::new(&[total, n, 1], out)
}

/// Start offsets of sliding windows of `window + horizon` ticks inside a
/// segment of `len` ticks.
pub fn make_windows(len: usize, window: usize, horizon: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 || window == 0 || horizon == 0 {
        return Err(Error::Validation("window, horizon and stride must be positive".into()));
    }
    if len < window + horizon {
        return Err(Error::Validation(format!(
            "segment of {len} ticks is shorter than window {window} + horizon {horizon}"
        )));
    }
    let count = (len - window - horizon) / stride + 1;
    Ok((0..count).map(|i| i * stride).collect())
}

/// Per-channel z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    /// Fit on ticks `range` of a `[T, N, D]` series.
    pub fn fit(raw: &Tensor, range: Range<usize>) -> Result<Self> {
        let (_, n, d) = series_dims(raw)?;
        if range.is_empty() {
            return Err(Error::Validation("cannot fit scaler on an empty range".into()));
        }
        let rows = &raw.data()[range.start * n * d..range.end * n * d];
        let count = (rows.len() / d) as f64;
        let mut mean = vec![0.0; d];
        for chunk in rows.chunks(d) {
            mean.iter_mut().zip(chunk).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; d];
        for chunk in rows.chunks(d) {
            for c in 0..d {
                var[c] += (chunk[c] - mean[c]).powi(2);
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / count).sqrt()).collect();
        if let Some(c) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::Validation(format!("feature channel {c} has zero variance")));
        }
        Ok(Scaler { mean, std })
    }

    pub fn transform(&self, raw: &Tensor) -> Result<Tensor> {
        self.apply(raw, |v, m, s| (v - m) / s)
    }

    pub fn inverse(&self, scaled: &Tensor) -> Result<Tensor> {
        self.apply(scaled, |v, m, s| v * s + m)
    }

    pub fn inverse_channel(&self, value: f64, channel: usize) -> f64 {
        value * self.std[channel] + self.mean[channel]
    }

    fn apply(&self, t: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let d = self.mean.len();
        if t.channels() != d {
            return Err(Error::dim("scaler", format!("{:?} with {d} channels", t.shape())));
        }
        let data = t
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().enumerate().map(|(c, &v)| f(v, self.mean[c], self.std[c])))
            .collect();
        Tensor::new(t.shape(), data)
    }
}

fn series_dims(raw: &Tensor) -> Result<(usize, usize, usize)> {
    match raw.shape() {
        &[t, n, d] => Ok((t, n, d)),
        s => Err(Error::dim("series", format!("expected [T, N, D], got {s:?}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn idx(self) -> usize {
        self as usize
    }
}

/// Windowing parameters shared by every split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowLayout {
    pub window: usize,
    pub horizon: usize,
    pub stride: usize,
    /// Train/validation/test proportions of the timeline.
    pub ratios: [f64; 3],
}

impl WindowLayout {
    pub fn new(window: usize, horizon: usize) -> Self {
        WindowLayout {
            window,
            horizon,
            stride: 1,
            ratios: [0.6, 0.2, 0.2],
        }
    }
}

/// A scaled series cut chronologically into train/validation/test segments,
/// each carrying its own windows.
#[derive(Debug, Clone)]
pub struct ForecastDataset {
    pub graph: SpatialGraph,
    /// `[T, N, D]` in original units.
    pub raw: Tensor,
    /// `[T, N, D]` after z-scoring with train statistics.
    pub scaled: Tensor,
    pub scaler: Scaler,
    pub layout: WindowLayout,
    /// Tick range of each split.
    pub bounds: [Range<usize>; 3],
    /// Absolute start tick of each window, per split.
    pub windows: [Vec<usize>; 3],
    pub events: Option<Vec<ShockEvent>>,
}

impl ForecastDataset {
    pub fn new(graph: SpatialGraph, raw: Tensor, layout: WindowLayout) -> Result<Self> {
        let (total, n, _) = series_dims(&raw)?;
        if n != graph.n_nodes() {
            return Err(Error::Validation(format!(
                "series has {n} nodes, graph has {}",
                graph.n_nodes()
            )));
        }
        let sum: f64 = layout.ratios.iter().sum();
        if layout.ratios.iter().any(|&r| !(r > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!("split ratios {:?} must be positive and sum to 1", layout.ratios)));
        }
        let train_end = (total as f64 * layout.ratios[0]).round() as usize;
        let val_end = (total as f64 * (layout.ratios[0] + layout.ratios[1])).round() as usize;
        let bounds = [0..train_end, train_end..val_end, val_end..total];
        let mut windows: [Vec<usize>; 3] = Default::default();
        for (slot, range) in windows.iter_mut().zip(&bounds) {
            *slot = make_windows(range.len(), layout.window, layout.horizon, layout.stride)?
                .into_iter()
                .map(|s| s + range.start)
                .collect();
        }
        let scaler = Scaler::fit(&raw, bounds[0].clone())?;
        let scaled = scaler.transform(&raw)?;
        Ok(ForecastDataset {
            graph,
            raw,
            scaled,
            scaler,
            layout,
            bounds,
            windows,
            events: None,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.raw.shape()[1]
    }

    pub fn in_dim(&self) -> usize {
        self.raw.shape()[2]
    }

    pub fn windows(&self, split: Split) -> &[usize] {
        &self.windows[split.idx()]
    }

    pub fn bounds(&self, split: Split) -> Range<usize> {
        self.bounds[split.idx()].clone()
    }

    /// Materialize windows starting at `starts`: `x: [B, N, T, D]` and
    /// `y: [B, N, T′]` (channel 0), both scaled.
    pub fn batch(&self, starts: &[usize]) -> Result<(Tensor, Tensor)> {
        let (total, n, d) = series_dims(&self.scaled)?;
        let (tw, th) = (self.layout.window, self.layout.horizon);
        let s = self.scaled.data();
        let mut x = Vec::with_capacity(starts.len() * n * tw * d);
        let mut y = Vec::with_capacity(starts.len() * n * th);
        for &start in starts {
            if start + tw + th > total {
                return Err(Error::Contract(format!("window at {start} runs past the series end")));
            }
            for node in 0..n {
                for t in start..start + tw {
                    let at = (t * n + node) * d;
                    x.extend_from_slice(&s[at..at + d]);
                }
                for t in start + tw..start + tw + th {
                    y.push(s[(t * n + node) * d]);
                }
            }
        }
        Ok((
            Tensor::new(&[starts.len(), n, tw, d], x)?,
            Tensor::new(&[starts.len(), n, th], y)?,
        ))
    }

    /// `(node, tick)` cells hit by a logged shock.
    pub fn shock_cells(&self) -> Option<std::collections::HashSet<(usize, usize)>> {
        self.events
            .as_ref()
            .map(|ev| ev.iter().map(|e| (e.node, e.t)).collect())
    }
}

/// Neighbours per side of the ring lattice the synthetic generator runs on.
pub const SYNTHETIC_RING_K: usize = 2;

/// Generate a shock series on a ring lattice and wrap it, event log included.
pub fn synthetic_dataset(scenario: &ShockScenario, layout: WindowLayout) -> Result<ForecastDataset> {
    let graph = SpatialGraph::ring_lattice(scenario.n_nodes, SYNTHETIC_RING_K)?;
    let out = generate_shock_series(scenario, &graph)?;
    let mut ds = ForecastDataset::new(graph, out.series, layout)?;
    ds.events = Some(out.events);
    Ok(ds)
}

/// Sidecar describing a wide-CSV series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesMetadata {
    pub n_nodes: usize,
    pub in_dim: usize,
    pub tick_seconds: f64,
    /// Relative paths resolve against the metadata file's directory.
    pub edge_list_path: PathBuf,
}

impl SeriesMetadata {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            col: Some(e.column()),
            detail: e.to_string(),
        })?;
        for key in ["n_nodes", "in_dim", "tick_seconds", "edge_list_path"] {
            if value.get(key).is_none() {
                return Err(Error::Validation(format!("metadata {} is missing key `{key}`", path.display())));
            }
        }
        serde_json::from_value(value).map_err(|e| Error::Validation(format!("metadata {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("metadata serializes") + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn edge_list(&self, meta_path: &Path) -> PathBuf {
        if self.edge_list_path.is_absolute() {
            self.edge_list_path.clone()
        } else {
            meta_path
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join(&self.edge_list_path)
        }
    }
}

/// Header `t,node0_f0,…` and one row per tick.
pub fn series_to_csv(raw: &Tensor) -> Result<String> {
    let (total, n, d) = series_dims(raw)?;
    let mut out = String::from("t");
    for node in 0..n {
        for f in 0..d {
            let _ = write!(out, ",node{node}_f{f}");
        }
    }
    out.push('\n');
    for (t, row) in raw.data().chunks(n * d).enumerate().take(total) {
        let _ = write!(out, "{t}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_series_csv(raw: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, series_to_csv(raw)?).map_err(|e| Error::io(path, e))
}

/// Parse a wide-CSV series into `[T, N, D]`.
pub fn read_series_csv(path: &Path, n_nodes: usize, in_dim: usize) -> Result<Tensor> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let columns = n_nodes * in_dim + 1;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.len() != columns {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            col: None,
            detail: format!("header has {} columns, expected {columns}", header.len()),
        });
    }
    let mut data = Vec::new();
    let mut ticks = 0;
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != columns {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                col: None,
                detail: format!("row has {} columns, expected {columns}", record.len()),
            });
        }
        for (col, cell) in record.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line,
                col: Some(col + 1),
                detail: format!("non-numeric cell `{cell}`"),
            })?;
            if col > 0 {
                data.push(v);
            }
        }
        ticks += 1;
    }
    if ticks == 0 {
        return Err(Error::Validation(format!("{} contains no rows", path.display())));
    }
    Tensor::new(&[ticks, n_nodes, in_dim], data)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::Parse {
            path: path.to_path_buf(),
            line,
            col: None,
            detail: format!("{kind:?}"),
        },
    }
}

pub fn events_to_csv(events: &[ShockEvent]) -> String {
    let mut out = String::from("t,node,magnitude\n");
    for e in events {
        let _ = writeln!(out, "{},{},{}", e.t, e.node, e.magnitude);
    }
    out
}

pub fn read_events_csv(path: &Path) -> Result<Vec<ShockEvent>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut events = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let cell = |col: usize| {
            record.get(col).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line,
                col: Some(col + 1),
                detail: "missing field".into(),
            })
        };
        let bad = |col: usize| Error::Parse {
            path: path.to_path_buf(),
            line,
            col: Some(col + 1),
            detail: "not a number".into(),
        };
        events.push(ShockEvent {
            t: cell(0)?.parse().map_err(|_| bad(0))?,
            node: cell(1)?.parse().map_err(|_| bad(1))?,
            magnitude: cell(2)?.parse().map_err(|_| bad(2))?,
        });
    }
    Ok(events)
}

/// Load a wide-CSV series plus its metadata sidecar and edge list, then window and scale it.
pub fn load_external_csv(series_path: &Path, meta_path: &Path, layout: WindowLayout) -> Result<ForecastDataset> {
    let meta = SeriesMetadata::load(meta_path)?;
    let graph = SpatialGraph::load(&meta.edge_list(meta_path), meta.n_nodes)?;
    let raw = read_series_csv(series_path, meta.n_nodes, meta.in_dim)?;
    ForecastDataset::new(graph, raw, layout)
}
