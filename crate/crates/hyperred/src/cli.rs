//! Command-line pipeline: six stages from snapshot generation to the report.
//!
//! Each stage is an ordinary function taking the experiment configuration, so
//! integration tests drive the pipeline in-process; the binary is a thin
//! `clap` wrapper. Stages are idempotent: when every output file already
//! exists the stage skips itself unless `--force` is given, and a stage
//! invoked before its inputs exist fails with the command that produces them.
//!
//! Artifacts live under the configured output directory:
//!
//! ```text
//! snapshots/<case>.hrsnap + meta.json      (generate)
//! reduction/basis.hrsnap, <case>.reduced.hrsnap, meta.json   (reduce)
//! tpwl/model.hrsnap + meta.json            (build-tpwl)
//! train/<variant>/init_<k>/{model.hrsnap, history.csv, summary.json}
//! solve/<surrogate>/<case>.json            (solve)
//! report/{steps,summary,training,spectrum}.csv   (report)
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive;
use crate::dataset::{split_indices, SnapshotSet, SplitPlan};
use crate::error::{Error, Result};
use crate::eval::{self, CaseSummary, StepError};
use crate::hypersolver::{solve_reduced, ReducedSystem, SolveTrace, StepRecord, SurrogateModel};
use crate::pann::{IcnnArch, PannModel, Standardizer};
use crate::reduction;
use crate::refmodel::{solve_full, LoadCase, NewtonSettings, RegimeLabel, TrussModel};
use crate::tpwl;
use crate::training::{
    self, Aggregation, BalanceKind, BalanceStrategy, HessianRamp, TrainSettings,
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Cantilever lattice geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    /// Columns of nodes along the span (the first column is clamped).
    pub columns: usize,
    /// Rows of nodes across the depth.
    pub rows: usize,
    pub bay_width: f64,
    pub story_height: f64,
    /// EA, shared by every bar.
    pub axial_rigidity: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        // At this scale the full load bends the tip to ~25% of the span, well
        // into the geometrically stiffening regime, while 2x the load still
        // converges — leaving headroom for the extrapolation studies.
        GeometryConfig {
            columns: 13,
            rows: 3,
            bay_width: 1.0,
            story_height: 1.0,
            axial_rigidity: 1000.0,
        }
    }
}

/// Point-load schedule driving every case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadingConfig {
    /// Loaded node's column; defaults to the free-end column.
    pub node_column: Option<usize>,
    /// Loaded node's row; defaults to the middle row.
    pub node_row: Option<usize>,
    /// 0 = x, 1 = y.
    pub component: usize,
    /// Point the load against the chosen axis (gravity-style).
    pub downward: bool,
    /// Magnitude reached at the end of the training schedule.
    pub max_force: f64,
    /// Load increments per case; each case records `steps + 1` states
    /// (the rest state plus one per increment).
    pub steps: usize,
}

impl Default for LoadingConfig {
    fn default() -> Self {
        LoadingConfig {
            node_column: None,
            node_row: None,
            component: 1,
            downward: true,
            max_force: 12.0,
            steps: 100,
        }
    }
}

/// Newton controls shared by the full-order and reduced continuations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let d = NewtonSettings::default();
        SolverConfig {
            tolerance: d.tolerance,
            max_iterations: d.max_iterations,
        }
    }
}

impl SolverConfig {
    pub fn newton(&self) -> NewtonSettings {
        NewtonSettings {
            tolerance: self.tolerance,
            max_iterations: self.max_iterations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReductionConfig {
    /// Retained basis vectors.
    pub rank: usize,
}

impl Default for ReductionConfig {
    fn default() -> Self {
        ReductionConfig { rank: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TpwlConfig {
    /// Fraction of training samples kept as linearization points.
    pub fraction: f64,
    /// Weight decay rate.
    pub beta: f64,
}

impl Default for TpwlConfig {
    fn default() -> Self {
        TpwlConfig {
            fraction: 0.5,
            beta: tpwl::DEFAULT_BETA,
        }
    }
}

/// One training run recipe: a balancing strategy under a short name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantConfig {
    /// Directory-safe identifier, unique among variants.
    pub name: String,
    /// One of `plain-sum`, `hessian-only`, `static` (with `weights`),
    /// `static-intuitive`, `static-maximum`, `static-stddev`,
    /// `dynamic-pinn`, `dynamic-same-scale`.
    pub kind: String,
    /// Fixed (energy, force, tangent) weights; required by `static`.
    #[serde(default)]
    pub weights: Option<[f64; 3]>,
    /// Epoch window over which the tangent weight fades in.
    #[serde(default)]
    pub ramp_start: Option<usize>,
    #[serde(default)]
    pub ramp_end: Option<usize>,
    /// `weighted-sum` (default) or `non-conflicting`.
    #[serde(default)]
    pub aggregation: Option<String>,
    /// Smoothing factor of the gradient-norm moving average.
    #[serde(default)]
    pub ema: Option<f64>,
}

impl VariantConfig {
    fn named(name: &str, kind: &str) -> VariantConfig {
        VariantConfig {
            name: name.into(),
            kind: kind.into(),
            weights: None,
            ramp_start: None,
            ramp_end: None,
            aggregation: None,
            ema: None,
        }
    }

    /// Resolves the strategy, rejecting unknown names and half-given ramps.
    pub fn strategy(&self) -> Result<BalanceStrategy> {
        let kind = match self.kind.as_str() {
            "plain-sum" => BalanceKind::PlainSum,
            "hessian-only" => BalanceKind::HessianOnly,
            "static" => match self.weights {
                Some(w) => BalanceKind::StaticWeights(w),
                None => {
                    return Err(Error::input(format!(
                        "variant {}: kind `static` needs `weights = [e, f, k]`",
                        self.name
                    )))
                }
            },
            "static-intuitive" => BalanceKind::StaticWeights(training::static_intuitive()),
            "static-maximum" => BalanceKind::StaticWeights(training::static_maximum()),
            "static-stddev" => BalanceKind::StaticWeights(training::static_stddev()),
            "dynamic-pinn" => BalanceKind::DynamicPinn,
            "dynamic-same-scale" => BalanceKind::DynamicSameScale,
            other => {
                return Err(Error::input(format!(
                    "variant {}: unknown balancing kind `{other}`",
                    self.name
                )))
            }
        };
        if self.kind != "static" && self.weights.is_some() {
            return Err(Error::input(format!(
                "variant {}: `weights` only applies to kind `static`",
                self.name
            )));
        }
        let mut strategy = BalanceStrategy::new(kind);
        strategy.ramp = match (self.ramp_start, self.ramp_end) {
            (None, None) => None,
            (Some(s), Some(e)) => Some(HessianRamp::new(s, e)?),
            _ => {
                return Err(Error::input(format!(
                    "variant {}: ramp_start and ramp_end must be given together",
                    self.name
                )))
            }
        };
        strategy.aggregation = match self.aggregation.as_deref() {
            None | Some("weighted-sum") => Aggregation::WeightedSum,
            Some("non-conflicting") => Aggregation::NonConflicting,
            Some(other) => {
                return Err(Error::input(format!(
                    "variant {}: unknown aggregation `{other}`",
                    self.name
                )))
            }
        };
        if let Some(a) = self.ema {
            strategy.ema_alpha = a;
        }
        Ok(strategy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Base seed; the data split and each initialization derive from it.
    pub seed: u64,
    /// Independent restarts per variant; the best validation run is kept.
    pub initializations: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Hidden width of the convex network.
    pub width: usize,
    /// Number of hidden layers.
    pub hidden_layers: usize,
    pub variants: Vec<VariantConfig>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            seed: 2024,
            initializations: 3,
            // Demo-scale: keeps the default pipeline under ~half an hour;
            // raise for publication-grade fits.
            epochs: 4000,
            learning_rate: 1e-3,
            width: 50,
            hidden_layers: 3,
            variants: vec![
                VariantConfig::named("plain-sum", "plain-sum"),
                VariantConfig::named("same-scale", "dynamic-same-scale"),
                VariantConfig::named("pinn", "dynamic-pinn"),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Root directory of all pipeline artifacts.
    pub directory: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            directory: "runs/experiment".into(),
        }
    }
}

/// Whole-experiment configuration, read from TOML; every field has a default
/// so an empty file (or no file) runs the reference experiment.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub geometry: GeometryConfig,
    pub loading: LoadingConfig,
    pub solver: SolverConfig,
    pub reduction: ReductionConfig,
    pub tpwl: TpwlConfig,
    pub training: TrainingConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// Parses a TOML document.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Format {
            path: "<config>".into(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (defaults when `None`), applies `--smoke`, validates.
    pub fn load(path: Option<&Path>, smoke: bool) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p)?;
                let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::Format {
                    path: p.display().to_string(),
                    detail: e.to_string(),
                })?;
                cfg
            }
            None => ExperimentConfig::default(),
        };
        if smoke {
            cfg.apply_smoke();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Shrinks the experiment for end-to-end checks: the same physics on a
    /// coarser schedule with a smaller network and fewer, shorter runs.
    pub fn apply_smoke(&mut self) {
        self.loading.steps = 20;
        self.training.initializations = 2;
        self.training.epochs = 6000;
        self.training.learning_rate = 1e-2;
        self.training.width = 16;
        self.training.hidden_layers = 2;
    }

    /// Loaded node index, after defaulting to the middle of the free end.
    pub fn load_node(&self) -> (usize, usize) {
        let column = self
            .loading
            .node_column
            .unwrap_or(self.geometry.columns.saturating_sub(1));
        let row = self.loading.node_row.unwrap_or(self.geometry.rows / 2);
        (column, row)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        if g.columns < 2 || g.rows < 2 {
            return Err(Error::input("lattice needs at least 2 columns and 2 rows"));
        }
        if !(g.bay_width > 0.0) || !(g.story_height > 0.0) {
            return Err(Error::input("bay width and story height must be positive"));
        }
        if !(g.axial_rigidity > 0.0) {
            return Err(Error::input("axial rigidity must be positive"));
        }
        let (column, row) = self.load_node();
        if column == 0 || column >= g.columns || row >= g.rows {
            return Err(Error::input(format!(
                "loaded node ({column}, {row}) is clamped or outside the {}x{} lattice",
                g.columns, g.rows
            )));
        }
        if self.loading.component > 1 {
            return Err(Error::input("load component must be 0 (x) or 1 (y)"));
        }
        if !(self.loading.max_force > 0.0) {
            return Err(Error::input("max force must be positive"));
        }
        if self.loading.steps < 2 {
            return Err(Error::input("need at least 2 load steps"));
        }
        if !(self.solver.tolerance > 0.0) || self.solver.max_iterations == 0 {
            return Err(Error::input("solver tolerance and iteration cap must be positive"));
        }
        if self.reduction.rank == 0 {
            return Err(Error::input("reduced rank must be at least 1"));
        }
        if !(self.tpwl.fraction > 0.0 && self.tpwl.fraction <= 1.0) {
            return Err(Error::input("linearization fraction must lie in (0, 1]"));
        }
        if !(self.tpwl.beta > 0.0) {
            return Err(Error::input("weight decay rate must be positive"));
        }
        let t = &self.training;
        if t.initializations == 0 || t.epochs == 0 || t.width == 0 || t.hidden_layers == 0 {
            return Err(Error::input(
                "initializations, epochs, width, and hidden layers must be positive",
            ));
        }
        if !(t.learning_rate > 0.0) {
            return Err(Error::input("learning rate must be positive"));
        }
        if t.variants.is_empty() {
            return Err(Error::input("at least one training variant is required"));
        }
        for (i, v) in t.variants.iter().enumerate() {
            if v.name.is_empty()
                || !v
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
            {
                return Err(Error::input(format!(
                    "variant {i}: name must be non-empty and use [a-zA-Z0-9_-]"
                )));
            }
            if t.variants[..i].iter().any(|w| w.name == v.name) {
                return Err(Error::input(format!("duplicate variant name `{}`", v.name)));
            }
            v.strategy()?;
        }
        if self.output.directory.is_empty() {
            return Err(Error::input("output directory must be non-empty"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Artifact layout
// ---------------------------------------------------------------------------

/// Resolves every artifact path under the configured output root.
pub struct Paths {
    root: PathBuf,
}

impl Paths {
    pub fn new(cfg: &ExperimentConfig) -> Paths {
        Paths {
            root: PathBuf::from(&cfg.output.directory),
        }
    }

    pub fn snapshot(&self, case: &str) -> PathBuf {
        self.root.join("snapshots").join(format!("{case}.hrsnap"))
    }
    pub fn snapshots_meta(&self) -> PathBuf {
        self.root.join("snapshots").join("meta.json")
    }
    pub fn basis(&self) -> PathBuf {
        self.root.join("reduction").join("basis.hrsnap")
    }
    pub fn reduced(&self, case: &str) -> PathBuf {
        self.root
            .join("reduction")
            .join(format!("{case}.reduced.hrsnap"))
    }
    pub fn reduction_meta(&self) -> PathBuf {
        self.root.join("reduction").join("meta.json")
    }
    pub fn tpwl(&self) -> PathBuf {
        self.root.join("tpwl").join("model.hrsnap")
    }
    pub fn tpwl_meta(&self) -> PathBuf {
        self.root.join("tpwl").join("meta.json")
    }
    pub fn run_dir(&self, variant: &str, init: usize) -> PathBuf {
        self.root
            .join("train")
            .join(variant)
            .join(format!("init_{init}"))
    }
    pub fn pann_model(&self, variant: &str, init: usize) -> PathBuf {
        self.run_dir(variant, init).join("model.hrsnap")
    }
    pub fn history(&self, variant: &str, init: usize) -> PathBuf {
        self.run_dir(variant, init).join("history.csv")
    }
    pub fn train_summary(&self, variant: &str, init: usize) -> PathBuf {
        self.run_dir(variant, init).join("summary.json")
    }
    pub fn trace(&self, surrogate: &str, case: &str) -> PathBuf {
        self.root
            .join("solve")
            .join(surrogate)
            .join(format!("{case}.json"))
    }
    pub fn steps_csv(&self) -> PathBuf {
        self.root.join("report").join("steps.csv")
    }
    pub fn summary_csv(&self) -> PathBuf {
        self.root.join("report").join("summary.csv")
    }
    pub fn training_csv(&self) -> PathBuf {
        self.root.join("report").join("training.csv")
    }
    pub fn spectrum_csv(&self) -> PathBuf {
        self.root.join("report").join("spectrum.csv")
    }
}

/// Errors with the producing command when `path` does not exist yet.
fn require(path: &Path, command: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.display().to_string(),
            command: command.into(),
        })
    }
}

fn all_exist(paths: &[PathBuf]) -> bool {
    paths.iter().all(|p| p.exists())
}

/// Writes a CSV file, creating parent directories.
fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = String::with_capacity(header.len() + 1 + rows.len() * 64);
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Load cases
// ---------------------------------------------------------------------------

/// Names of the four studied cases, in pipeline order.
pub const CASE_NAMES: [&str; 4] = [
    "interp",
    "extrap-forward",
    "extrap-reverse-near",
    "extrap-reverse-far",
];

/// Builds the lattice, the four load cases, and the observed dof (the loaded
/// dof, i.e. tip deflection along the load axis).
///
/// The training case ramps 0 → F; the extrapolation cases continue F → 2F
/// and mirror both windows to negative loads. Every case starts from rest.
pub fn build_cases(cfg: &ExperimentConfig) -> Result<(TrussModel, Vec<LoadCase>, usize)> {
    let g = &cfg.geometry;
    let model = TrussModel::cantilever_lattice(
        g.columns,
        g.rows,
        g.bay_width,
        g.story_height,
        g.axial_rigidity,
    )?;
    let (column, row) = cfg.load_node();
    let node = column * g.rows + row;
    let mut b = model.point_load_matrix(node, cfg.loading.component)?;
    if cfg.loading.downward {
        b.neg_mut();
    }
    let output_dof = model
        .free_index(node, cfg.loading.component)
        .ok_or_else(|| Error::input("loaded dof is constrained"))?;

    let f = cfg.loading.max_force;
    let steps = cfg.loading.steps;
    let ramp = |offset: f64, sign: f64| -> Vec<DVector<f64>> {
        (1..=steps)
            .map(|t| {
                DVector::from_element(1, sign * (offset + f * t as f64 / steps as f64))
            })
            .collect()
    };

    let case = |name: &str, label: RegimeLabel, magnitudes: Vec<DVector<f64>>| LoadCase {
        name: name.into(),
        label,
        input_matrix: b.clone(),
        magnitudes,
    };
    let cases = vec![
        case("interp", RegimeLabel::Interpolation, ramp(0.0, 1.0)),
        case(
            "extrap-forward",
            RegimeLabel::ExtrapolationForward,
            ramp(f, 1.0),
        ),
        case(
            "extrap-reverse-near",
            RegimeLabel::ExtrapolationReverse,
            ramp(0.0, -1.0),
        ),
        case(
            "extrap-reverse-far",
            RegimeLabel::ExtrapolationReverse,
            ramp(f, -1.0),
        ),
    ];
    Ok((model, cases, output_dof))
}

// ---------------------------------------------------------------------------
// Continuation traces on disk
// ---------------------------------------------------------------------------

/// One load step of a stored trace. Non-finite sentinels (the all-NaN state
/// after a divergence) are encoded as `null` so the JSON round-trips.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceStepFile {
    pub step: usize,
    pub load: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub residual: Option<f64>,
    pub x_r: Option<Vec<f64>>,
}

/// A continuation trace as written by `solve` and read back by `report`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceFile {
    pub surrogate: String,
    pub case: String,
    pub reduced_dim: usize,
    pub diverged_at: Option<usize>,
    pub steps: Vec<TraceStepFile>,
}

impl TraceFile {
    pub fn from_trace(surrogate: &str, case: &str, r: usize, trace: &SolveTrace) -> TraceFile {
        let steps = trace
            .steps
            .iter()
            .map(|s| TraceStepFile {
                step: s.step,
                load: s.load.iter().copied().collect(),
                converged: s.converged,
                iterations: s.iterations,
                residual: s.residual.is_finite().then_some(s.residual),
                x_r: s
                    .x_r
                    .iter()
                    .all(|v| v.is_finite())
                    .then(|| s.x_r.iter().copied().collect()),
            })
            .collect();
        TraceFile {
            surrogate: surrogate.into(),
            case: case.into(),
            reduced_dim: r,
            diverged_at: trace.diverged_at,
            steps,
        }
    }

    pub fn into_trace(self) -> SolveTrace {
        let r = self.reduced_dim;
        let steps = self
            .steps
            .into_iter()
            .map(|s| StepRecord {
                step: s.step,
                load: DVector::from_vec(s.load),
                converged: s.converged,
                iterations: s.iterations,
                residual: s.residual.unwrap_or(f64::NAN),
                x_r: s
                    .x_r
                    .map(DVector::from_vec)
                    .unwrap_or_else(|| DVector::from_element(r, f64::NAN)),
            })
            .collect();
        SolveTrace {
            steps,
            diverged_at: self.diverged_at,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let value = serde_json::to_value(self).map_err(|e| Error::Format {
            path: path.display().to_string(),
            detail: format!("cannot serialize trace: {e}"),
        })?;
        archive::write_json(path, &value)
    }

    pub fn read(path: &Path) -> Result<TraceFile> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            detail: format!("cannot parse trace: {e}"),
        })
    }
}

// ---------------------------------------------------------------------------
// Stage: generate
// ---------------------------------------------------------------------------

/// Solves every full-order case and stores the snapshot sets.
pub fn run_generate(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let paths = Paths::new(cfg);
    let (model, cases, _) = build_cases(cfg)?;
    let mut outputs: Vec<PathBuf> = cases.iter().map(|c| paths.snapshot(&c.name)).collect();
    outputs.push(paths.snapshots_meta());
    if !force && all_exist(&outputs) {
        println!("generate: snapshots already present, skipping (--force to redo)");
        return Ok(());
    }

    let settings = cfg.solver.newton();
    let sets: Vec<SnapshotSet> = cases
        .par_iter()
        .map(|case| solve_full(&model, case, &settings))
        .collect::<Result<_>>()?;

    let mut case_meta = Vec::new();
    for set in &sets {
        let path = paths.snapshot(&set.name);
        archive::save_snapshots(&path, set)?;
        case_meta.push(json!({
            "name": set.name,
            "regime": set.label.as_str(),
            "states": set.len(),
            "fingerprint": archive::file_fingerprint(&path)?,
        }));
        println!(
            "generate: {} — {} states, final load {}",
            set.name,
            set.len(),
            set.scalar_load(set.len() - 1)
        );
    }
    let meta = json!({
        "geometry_fingerprint": model.fingerprint(),
        "free_dofs": model.n(),
        "cases": case_meta,
    });
    archive::write_json(&paths.snapshots_meta(), &meta)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Stage: reduce
// ---------------------------------------------------------------------------

/// Computes the POD basis from all cases and projects each one.
pub fn run_reduce(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let paths = Paths::new(cfg);
    let mut outputs = vec![paths.basis(), paths.reduction_meta()];
    outputs.extend(CASE_NAMES.iter().map(|c| paths.reduced(c)));
    if !force && all_exist(&outputs) {
        println!("reduce: basis and projections already present, skipping");
        return Ok(());
    }

    let mut sets = Vec::new();
    for name in CASE_NAMES {
        let path = paths.snapshot(name);
        require(&path, "generate")?;
        sets.push(archive::load_snapshots(&path)?);
    }
    let refs: Vec<&SnapshotSet> = sets.iter().collect();
    let matrix = crate::dataset::snapshot_matrix(&refs)?;
    let spectrum = reduction::normalized_spectrum(&matrix)?;
    let basis = reduction::compute_basis(&matrix, cfg.reduction.rank)?;
    if basis.rank_warning {
        println!(
            "reduce: warning — rank {} exceeds the numerical rank of the snapshots",
            basis.r()
        );
    }
    archive::save_basis(&paths.basis(), &basis)?;
    for set in &sets {
        let projected = reduction::project(&basis, set)?;
        archive::save_reduced(&paths.reduced(&set.name), &projected)?;
    }
    let meta = json!({
        "rank": basis.r(),
        "free_dofs": basis.n(),
        "snapshots": matrix.ncols(),
        "cumulative_energy": basis.cumulative_energy,
        "rank_warning": basis.rank_warning,
        "spectrum": spectrum,
    });
    archive::write_json(&paths.reduction_meta(), &meta)?;
    println!(
        "reduce: rank {} captures {:.6} of snapshot energy ({} snapshots)",
        basis.r(),
        basis.cumulative_energy,
        matrix.ncols()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// Stage: build-tpwl
// ---------------------------------------------------------------------------

/// Assembles the piecewise-linear surrogate from the training projections.
pub fn run_build_tpwl(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let paths = Paths::new(cfg);
    let outputs = [paths.tpwl(), paths.tpwl_meta()];
    if !force && all_exist(&outputs) {
        println!("build-tpwl: model already present, skipping");
        return Ok(());
    }

    let reduced_path = paths.reduced("interp");
    require(&reduced_path, "reduce")?;
    let data = archive::load_reduced(&reduced_path)?;
    let model = tpwl::build(&data, cfg.tpwl.fraction, cfg.tpwl.beta)?;
    archive::save_tpwl(&paths.tpwl(), &model)?;
    let meta = json!({
        "points": model.points.len(),
        "samples": data.len(),
        "beta": model.beta,
        "epsilon": model.epsilon,
        "source_indices": model.source_indices,
    });
    archive::write_json(&paths.tpwl_meta(), &meta)?;
    println!(
        "build-tpwl: {} linearization points from {} training samples",
        model.points.len(),
        data.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// Stage: train
// ---------------------------------------------------------------------------

/// Seed for initialization `k`; shared across variants so every strategy
/// starts from identical networks.
fn init_seed(base: u64, init: usize) -> u64 {
    base.wrapping_add(init as u64)
}

/// Trains every (variant, initialization) pair on the training projections.
pub fn run_train(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let paths = Paths::new(cfg);
    let t = &cfg.training;
    let tasks: Vec<(usize, usize)> = (0..t.variants.len())
        .flat_map(|v| (0..t.initializations).map(move |k| (v, k)))
        .collect();
    let outputs: Vec<PathBuf> = tasks
        .iter()
        .flat_map(|&(v, k)| {
            let name = &t.variants[v].name;
            [
                paths.pann_model(name, k),
                paths.history(name, k),
                paths.train_summary(name, k),
            ]
        })
        .collect();
    if !force && all_exist(&outputs) {
        println!("train: all runs already present, skipping");
        return Ok(());
    }

    let reduced_path = paths.reduced("interp");
    require(&reduced_path, "reduce")?;
    let data = archive::load_reduced(&reduced_path)?;
    let k_rest = data.k_r[0]
        .clone()
        .ok_or_else(|| Error::input("training data has no rest tangent"))?;
    let plan = SplitPlan::new(t.seed);

    let lines: Vec<String> = tasks
        .par_iter()
        .map(|&(v, k)| -> Result<String> {
            let variant = &t.variants[v];
            let strategy = variant.strategy()?;
            let (train_idx, val_idx) = split_indices(data.len(), &plan, k)?;
            let train_set = data.subset(&train_idx)?;
            let val_set = data.subset(&val_idx)?;
            let standardizer = Standardizer::fit(&train_set.x_r)?;
            let arch = IcnnArch {
                input_dim: data.r,
                width: t.width,
                hidden_layers: t.hidden_layers,
            };
            let seed = init_seed(t.seed, k);
            let mut model = PannModel::glorot(arch, standardizer, seed)?;
            model.apply_physical_quadratic(&k_rest)?;
            let settings = TrainSettings {
                epochs: t.epochs,
                learning_rate: t.learning_rate,
                strategy,
            };
            let run = training::train(&train_set, &val_set, model, &settings)?;

            archive::save_pann(&paths.pann_model(&variant.name, k), &run.model)?;
            let rows: Vec<String> = run
                .history
                .iter()
                .map(|h| {
                    format!(
                        "{},{},{},{},{},{},{},{},{},{}",
                        h.epoch,
                        h.train[0],
                        h.train[1],
                        h.train[2],
                        h.val[0],
                        h.val[1],
                        h.val[2],
                        h.weights[0],
                        h.weights[1],
                        h.weights[2]
                    )
                })
                .collect();
            write_csv(
                &paths.history(&variant.name, k),
                "epoch,train_energy,train_force,train_tangent,\
                 val_energy,val_force,val_tangent,\
                 weight_energy,weight_force,weight_tangent",
                &rows,
            )?;
            let summary = json!({
                "variant": variant.name,
                "init": k,
                "seed": seed,
                "epochs": t.epochs,
                "train_samples": train_set.len(),
                "val_samples": val_set.len(),
                "best_epoch": run.best_epoch,
                "best_val_force_loss": run.best_val_lf,
                "failure": run.failure,
            });
            archive::write_json(&paths.train_summary(&variant.name, k), &summary)?;

            let note = match &run.failure {
                Some(f) => format!(" (stopped early: {f})"),
                None => String::new(),
            };
            Ok(format!(
                "train: {}/init_{} — best val force loss {:.3e} at epoch {}{}",
                variant.name, k, run.best_val_lf, run.best_epoch, note
            ))
        })
        .collect::<Result<_>>()?;
    for line in lines {
        println!("{line}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Stage: solve
// ---------------------------------------------------------------------------

/// Initialization with the lowest validation force loss; ties keep the
/// earliest index so reruns pick the same model.
fn best_init(paths: &Paths, variant: &str, initializations: usize) -> Result<usize> {
    let mut best: Option<(f64, usize)> = None;
    for k in 0..initializations {
        let path = paths.train_summary(variant, k);
        require(&path, "train")?;
        let text = fs::read_to_string(&path)?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            detail: format!("cannot parse training summary: {e}"),
        })?;
        let lf = value
            .get("best_val_force_loss")
            .and_then(|v| v.as_f64())
            .unwrap_or(f64::INFINITY);
        if best.is_none_or(|(b, _)| lf < b) {
            best = Some((lf, k));
        }
    }
    best.map(|(_, k)| k)
        .ok_or_else(|| Error::input(format!("variant {variant} has no finished runs")))
}

/// Loads every surrogate under its report name: `tpwl`, then one
/// `pann-<variant>` per variant (its best initialization).
fn load_surrogates(cfg: &ExperimentConfig, paths: &Paths) -> Result<Vec<(String, SurrogateModel)>> {
    let tpwl_path = paths.tpwl();
    require(&tpwl_path, "build-tpwl")?;
    let mut surrogates = vec![(
        "tpwl".to_string(),
        SurrogateModel::Tpwl(archive::load_tpwl(&tpwl_path)?),
    )];
    for variant in &cfg.training.variants {
        let k = best_init(paths, &variant.name, cfg.training.initializations)?;
        let model_path = paths.pann_model(&variant.name, k);
        require(&model_path, "train")?;
        surrogates.push((
            format!("pann-{}", variant.name),
            SurrogateModel::Pann(archive::load_pann(&model_path)?),
        ));
    }
    Ok(surrogates)
}

/// Runs the reduced Newton continuation for every surrogate and case.
pub fn run_solve(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let paths = Paths::new(cfg);
    let surrogates = load_surrogates(cfg, &paths)?;
    let outputs: Vec<PathBuf> = surrogates
        .iter()
        .flat_map(|(name, _)| CASE_NAMES.iter().map(|c| paths.trace(name, c)))
        .collect();
    if !force && all_exist(&outputs) {
        println!("solve: traces already present, skipping");
        return Ok(());
    }

    let basis_path = paths.basis();
    require(&basis_path, "reduce")?;
    let basis = archive::load_basis(&basis_path)?;
    let (_, cases, _) = build_cases(cfg)?;
    let b_r = basis.v.transpose() * &cases[0].input_matrix;
    let settings = cfg.solver.newton();

    let jobs: Vec<(usize, usize)> = (0..surrogates.len())
        .flat_map(|s| (0..cases.len()).map(move |c| (s, c)))
        .collect();
    let lines: Vec<String> = jobs
        .par_iter()
        .map(|&(s, c)| -> Result<String> {
            let (name, surrogate) = &surrogates[s];
            let case = &cases[c];
            let system = ReducedSystem {
                surrogate: surrogate.clone(),
                b_r: b_r.clone(),
            };
            let trace = solve_reduced(&system, &case.magnitudes, &settings)?;
            let converged = trace.steps.iter().filter(|s| s.converged).count();
            let file = TraceFile::from_trace(name, &case.name, basis.r(), &trace);
            file.write(&paths.trace(name, &case.name))?;
            let note = match trace.diverged_at {
                Some(step) => format!(" (diverged at step {step})"),
                None => String::new(),
            };
            Ok(format!(
                "solve: {name} / {} — {converged}/{} steps converged{note}",
                case.name,
                trace.steps.len()
            ))
        })
        .collect::<Result<_>>()?;
    for line in lines {
        println!("{line}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Stage: report
// ---------------------------------------------------------------------------

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

fn median_cell(f: &Option<crate::eval::FiveNumber>) -> String {
    match f {
        Some(f) => format!("{:9.3e}", f.median),
        None => format!("{:>9}", "-"),
    }
}

/// Compares every stored trace with its full-order reference and writes the
/// report tables.
pub fn run_report(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let paths = Paths::new(cfg);
    let outputs = [
        paths.steps_csv(),
        paths.summary_csv(),
        paths.training_csv(),
        paths.spectrum_csv(),
    ];
    if !force && all_exist(&outputs) {
        println!("report: tables already present, skipping");
        return Ok(());
    }

    let basis_path = paths.basis();
    require(&basis_path, "reduce")?;
    let basis = archive::load_basis(&basis_path)?;
    let surrogates = load_surrogates(cfg, &paths)?;
    let (_, _, output_dof) = build_cases(cfg)?;

    let mut references = Vec::new();
    for name in CASE_NAMES {
        let path = paths.snapshot(name);
        require(&path, "generate")?;
        references.push(archive::load_snapshots(&path)?);
    }
    let tpwl_sources: Vec<usize> = match &surrogates[0].1 {
        SurrogateModel::Tpwl(m) => m.source_indices.clone(),
        SurrogateModel::Pann(_) => Vec::new(),
    };

    let mut step_rows: Vec<String> = Vec::new();
    let mut summary_rows: Vec<String> = Vec::new();
    let mut table: Vec<(String, CaseSummary)> = Vec::new();
    for (name, surrogate) in &surrogates {
        for reference in &references {
            let trace_path = paths.trace(name, &reference.name);
            require(&trace_path, "solve")?;
            let trace = TraceFile::read(&trace_path)?.into_trace();
            // Steps the surrogate was linearized at are flagged and left out
            // of the quartiles; only the piecewise-linear model on its own
            // training case has such steps.
            let excluded: &[usize] = if name == "tpwl" && reference.name == "interp" {
                &tpwl_sources
            } else {
                &[]
            };
            let rows: Vec<StepError> =
                eval::evaluate_case(reference, &basis, surrogate, &trace, excluded, output_dof)?;
            for r in &rows {
                step_rows.push(format!(
                    "{},{},{},{},{},{},{},{},{},{}",
                    name,
                    r.case,
                    r.regime.as_str(),
                    r.step,
                    r.load,
                    r.state,
                    r.force,
                    r.output,
                    r.diverged,
                    r.excluded
                ));
            }
            let summary = eval::summarize_case(&rows)?;
            let mut row = format!(
                "{},{},{},{},{},{}",
                name,
                summary.case,
                summary.regime.as_str(),
                summary.steps,
                summary.diverged,
                summary.excluded
            );
            for metric in [&summary.state, &summary.force, &summary.output] {
                match metric {
                    Some(f) => {
                        write!(row, ",{},{},{},{},{}", f.min, f.q1, f.median, f.q3, f.max)
                            .expect("writing to a String cannot fail");
                    }
                    None => row.push_str(",,,,,"),
                }
            }
            summary_rows.push(row);
            table.push((name.clone(), summary));
        }
    }
    write_csv(
        &paths.steps_csv(),
        "surrogate,case,regime,step,load,state_error,force_error,output_error,diverged,excluded",
        &step_rows,
    )?;
    write_csv(
        &paths.summary_csv(),
        "surrogate,case,regime,steps,diverged,excluded,\
         state_min,state_q1,state_median,state_q3,state_max,\
         force_min,force_q1,force_median,force_q3,force_max,\
         output_min,output_q1,output_median,output_q3,output_max",
        &summary_rows,
    )?;

    // Training table: one row per run, straight from the summaries.
    let mut training_rows = Vec::new();
    for variant in &cfg.training.variants {
        for k in 0..cfg.training.initializations {
            let path = paths.train_summary(&variant.name, k);
            require(&path, "train")?;
            let text = fs::read_to_string(&path)?;
            let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Format {
                path: path.display().to_string(),
                detail: format!("cannot parse training summary: {e}"),
            })?;
            let best_epoch = v.get("best_epoch").and_then(|x| x.as_u64()).unwrap_or(0);
            let lf = v.get("best_val_force_loss").and_then(|x| x.as_f64());
            let failure = v
                .get("failure")
                .and_then(|x| x.as_str())
                .unwrap_or("")
                .to_string();
            training_rows.push(format!(
                "{},{},{},{},{}",
                variant.name,
                k,
                best_epoch,
                fmt_opt(lf),
                failure
            ));
        }
    }
    write_csv(
        &paths.training_csv(),
        "variant,init,best_epoch,best_val_force_loss,failure",
        &training_rows,
    )?;

    // Spectrum table from the reduction sidecar.
    let meta_path = paths.reduction_meta();
    require(&meta_path, "reduce")?;
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(&meta_path)?)
        .map_err(|e| Error::Format {
            path: meta_path.display().to_string(),
            detail: format!("cannot parse reduction sidecar: {e}"),
        })?;
    let spectrum: Vec<f64> = meta
        .get("spectrum")
        .and_then(|s| s.as_array())
        .map(|a| a.iter().filter_map(|v| v.as_f64()).collect())
        .unwrap_or_default();
    let mut cumulative = 0.0;
    let spectrum_rows: Vec<String> = spectrum
        .iter()
        .enumerate()
        .map(|(i, s)| {
            cumulative += s;
            format!("{i},{s},{cumulative}")
        })
        .collect();
    write_csv(
        &paths.spectrum_csv(),
        "index,sigma_normalized,cumulative_energy",
        &spectrum_rows,
    )?;

    println!(
        "{:<16} {:<22} {:>6} {:>5}  {:>9}  {:>9}  {:>9}",
        "surrogate", "case", "steps", "div", "state", "force", "output"
    );
    for (name, s) in &table {
        println!(
            "{:<16} {:<22} {:>6} {:>5}  {}  {}  {}",
            name,
            s.case,
            s.steps,
            s.diverged,
            median_cell(&s.state),
            median_cell(&s.force),
            median_cell(&s.output)
        );
    }
    println!("report: median relative errors over converged steps; tables under report/");
    Ok(())
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

/// Snapshot-to-report pipeline for hyperreduced truss surrogates.
#[derive(Debug, Parser)]
#[command(name = "hyperred", version, about)]
pub struct Cli {
    /// TOML experiment configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Recompute stage outputs even when they already exist.
    #[arg(long, global = true)]
    pub force: bool,
    /// Shrink the experiment for a quick end-to-end run.
    #[arg(long, global = true)]
    pub smoke: bool,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the full-order load cases and store snapshot sets.
    Generate,
    /// Compute the POD basis and project every case onto it.
    Reduce,
    /// Assemble the piecewise-linear surrogate from the training case.
    BuildTpwl,
    /// Train the convex network surrogate, all variants and restarts.
    Train,
    /// Run reduced Newton continuations for every surrogate and case.
    Solve,
    /// Compare traces with the full-order reference and tabulate errors.
    Report,
}

/// Runs one pipeline stage against a loaded configuration.
pub fn run_stage(command: &Command, cfg: &ExperimentConfig, force: bool) -> Result<()> {
    match command {
        Command::Generate => run_generate(cfg, force),
        Command::Reduce => run_reduce(cfg, force),
        Command::BuildTpwl => run_build_tpwl(cfg, force),
        Command::Train => run_train(cfg, force),
        Command::Solve => run_solve(cfg, force),
        Command::Report => run_report(cfg, force),
    }
}

/// Binary entry point: parse arguments, run the stage, exit non-zero on error.
pub fn main_entry() {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        // Ignore failure: the global pool can only be set once per process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    let result = ExperimentConfig::load(cli.config.as_deref(), cli.smoke)
        .and_then(|cfg| run_stage(&cli.command, &cfg, cli.force));
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
