//! Run configuration: the published schema behind the command line tool.
//!
//! A run is described by one TOML file. Every table rejects unknown keys, so
//! a misspelled tolerance name fails the parse instead of silently running
//! with a default. Numbers are 64-bit floats throughout.
//!
//! Sections:
//!
//! ```text
//! [model.affine]   general builtin family: affine dynamics in
//!                  (x, y, z, r, v) with an optional bounded nonlinearity
//!                  and diagonal-quadratic costs
//! [model.lq]       scalar linear-quadratic family with a Riccati reference
//! [numerics]       grid, paths, seed, regression, Picard, optimizer knobs
//! [output]         directory and emitted formats
//! [control]        initial control, or the control under verification
//! [bench]          named benchmark fixture for the bench command
//! ```
//!
//! Command line flags (`--seed`, `--paths`, `--steps`, `--out`) override the
//! file values; the resolved configuration is what every report embeds.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::benchmarks::LqBenchmark;
use crate::error::{Error, Result};
use crate::fbsde::{PicardParams, RegressionBasis, SolverParams};
use crate::model::{
    AffineMap, AffineModel, ControlSet, Dimensions, DriverTerminal, FiltrationSpec, MarkSpace,
    ProblemSpec, QuadraticCost, StateTerminal, TerminalSpec,
};
use crate::optimizer::{OptimizerConfig, StepRule};

/// Complete run description as parsed from the config file plus any flag
/// overrides.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Problem description. Optional because bench runs carry their own
    /// committed fixtures; the other commands require it.
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub numerics: NumericsConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub control: ControlConfig,
    pub bench: Option<BenchConfig>,
}

/// Builtin model family, keyed by family name.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelConfig {
    Affine(AffineConfig),
    Lq(LqConfig),
}

/// General affine family. Omitted coefficient blocks are zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineConfig {
    pub dimensions: DimsConfig,
    pub horizon: f64,
    /// Initial state a, length n.
    pub initial: Vec<f64>,
    pub marks: Option<MarksConfig>,
    #[serde(default)]
    pub nonlinearity: f64,
    #[serde(default)]
    pub drift: MapConfig,
    #[serde(default)]
    pub diffusion: MapConfig,
    #[serde(default)]
    pub jump: MapConfig,
    #[serde(default)]
    pub driver: MapConfig,
    #[serde(default)]
    pub cost: CostConfig,
    #[serde(default)]
    pub terminal: TerminalConfig,
    pub control_set: ControlSet,
    #[serde(default = "full_filtration")]
    pub filtration: FiltrationSpec,
}

fn full_filtration() -> FiltrationSpec {
    FiltrationSpec::Full
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimsConfig {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub k: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarksConfig {
    pub atoms: Vec<f64>,
    pub weights: Vec<f64>,
}

/// One affine coefficient map. Matrices are row-major nested arrays; the r
/// block is one matrix per mark.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapConfig {
    pub constant: Option<Vec<f64>>,
    pub x: Option<Vec<Vec<f64>>>,
    pub y: Option<Vec<Vec<f64>>>,
    pub z: Option<Vec<Vec<f64>>>,
    pub r: Option<Vec<Vec<Vec<f64>>>>,
    pub v: Option<Vec<Vec<f64>>>,
}

/// Diagonal-quadratic cost weights; omitted vectors are zero.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub qx: Option<Vec<f64>>,
    pub qy: Option<Vec<f64>>,
    pub qz: Option<Vec<f64>>,
    pub qr: Option<Vec<f64>>,
    pub qv: Option<Vec<f64>>,
    pub lx: Option<Vec<f64>>,
    pub ly: Option<Vec<f64>>,
    pub lv: Option<Vec<f64>>,
    #[serde(default)]
    pub constant: f64,
    pub q_phi: Option<Vec<f64>>,
    pub p_phi: Option<Vec<f64>>,
    #[serde(default)]
    pub c_phi: f64,
    pub q_h: Option<Vec<f64>>,
    pub p_h: Option<Vec<f64>>,
    #[serde(default)]
    pub c_h: f64,
}

/// Terminal condition of the backward component.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalConfig {
    /// xi = 0.
    Zero,
    /// Noise-driven xi (control independent).
    Driver {
        constant: Option<Vec<f64>>,
        brownian: Option<Vec<Vec<f64>>>,
        counts: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        squash: f64,
    },
    /// State-coupled xi; leaves the certified setting and must be
    /// acknowledged explicitly.
    State {
        linear: Vec<Vec<f64>>,
        constant: Option<Vec<f64>>,
        #[serde(default)]
        squash: f64,
        acknowledged: bool,
    },
}

impl Default for TerminalConfig {
    fn default() -> Self {
        TerminalConfig::Zero
    }
}

/// Scalar linear-quadratic family. Field defaults are the canonical
/// benchmark parameters, so `[model.lq]` alone selects the reference
/// problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LqConfig {
    pub initial: f64,
    pub horizon: f64,
    pub drift_x: f64,
    pub drift_v: f64,
    pub diffusion_x: f64,
    pub diffusion_v: f64,
    pub jump_x: f64,
    pub jump_v: f64,
    pub weight: f64,
    pub state_weight: f64,
    pub control_weight: f64,
    pub terminal_weight: f64,
    pub filtration: FiltrationSpec,
}

impl Default for LqConfig {
    fn default() -> Self {
        let lq = LqBenchmark::canonical();
        LqConfig {
            initial: lq.initial,
            horizon: lq.horizon,
            drift_x: lq.drift_x,
            drift_v: lq.drift_v,
            diffusion_x: lq.diffusion_x,
            diffusion_v: lq.diffusion_v,
            jump_x: lq.jump_x,
            jump_v: lq.jump_v,
            weight: lq.weight,
            state_weight: lq.state_weight,
            control_weight: lq.control_weight,
            terminal_weight: lq.terminal_weight,
            filtration: FiltrationSpec::Full,
        }
    }
}

impl LqConfig {
    pub fn benchmark(&self) -> LqBenchmark {
        LqBenchmark {
            initial: self.initial,
            horizon: self.horizon,
            drift_x: self.drift_x,
            drift_v: self.drift_v,
            diffusion_x: self.diffusion_x,
            diffusion_v: self.diffusion_v,
            jump_x: self.jump_x,
            jump_v: self.jump_v,
            weight: self.weight,
            state_weight: self.state_weight,
            control_weight: self.control_weight,
            terminal_weight: self.terminal_weight,
        }
    }
}

/// Numerical knobs shared by every command.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericsConfig {
    /// Grid steps N.
    pub steps: usize,
    /// Monte Carlo paths P.
    pub paths: usize,
    pub seed: u64,
    pub basis_degree: usize,
    pub ridge: f64,
    pub picard: PicardConfig,
    pub optimizer: OptimizerSection,
    /// Stationarity residual the verify command accepts as optimal. Looser
    /// than the optimizer stopping tolerance because a continuous-time
    /// optimum carries an O(dt) residual floor on the grid.
    pub verify_tolerance: f64,
    /// Probe directions for the directional-derivative agreement check.
    pub directions: usize,
}

impl Default for NumericsConfig {
    fn default() -> Self {
        let solver = SolverParams::default();
        let opt = OptimizerConfig::default();
        NumericsConfig {
            steps: 64,
            paths: 4096,
            seed: 0,
            basis_degree: solver.basis.degree,
            ridge: solver.basis.ridge,
            picard: PicardConfig::default(),
            optimizer: OptimizerSection {
                step_size: opt.step_size,
                step_rule: StepRuleConfig::Halving,
                max_iterations: opt.max_iterations,
                tolerance: opt.tolerance,
            },
            verify_tolerance: 1e-3,
            directions: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PicardConfig {
    pub max_sweeps: usize,
    pub tol: f64,
    pub damping: f64,
}

impl Default for PicardConfig {
    fn default() -> Self {
        let p = PicardParams::default();
        PicardConfig { max_sweeps: p.max_sweeps, tol: p.tol, damping: p.damping }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub step_size: f64,
    pub step_rule: StepRuleConfig,
    pub max_iterations: usize,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRuleConfig {
    Fixed,
    Halving,
}

/// Output destination and formats.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub formats: Vec<OutputFormat>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("out"), formats: vec![OutputFormat::Csv] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    /// Trajectory, control and iteration tables.
    Csv,
    /// Binary dump of the driving noise batch.
    Scenario,
}

/// Where the run takes its control from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlConfig {
    /// Zero control.
    Zero,
    /// Shared constant value, length k.
    Constant { value: Vec<f64> },
    /// Control table written by an earlier run.
    Csv { path: PathBuf },
    /// Riccati feedback of the lq family; requires `[model.lq]`.
    Riccati,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig::Zero
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub name: String,
}

/// Flag overrides; `None` keeps the file value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Invalid(format!("config: {e}")))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        Self::from_str(&text)
    }

    /// Applies flag overrides in place; flags win over file values.
    pub fn apply_overrides(&mut self, over: &Overrides) {
        if let Some(seed) = over.seed {
            self.numerics.seed = seed;
        }
        if let Some(paths) = over.paths {
            self.numerics.paths = paths;
        }
        if let Some(steps) = over.steps {
            self.numerics.steps = steps;
        }
        if let Some(out) = &over.out {
            self.output.dir = out.clone();
        }
    }

    /// Builds the problem description, or lists why it is invalid.
    pub fn build_problem(&self) -> Result<ProblemSpec> {
        let model = self
            .model
            .as_ref()
            .ok_or_else(|| Error::Invalid("this command requires a [model] section".into()))?;
        let spec = match model {
            ModelConfig::Affine(cfg) => build_affine(cfg)?,
            ModelConfig::Lq(cfg) => cfg.benchmark().spec(cfg.filtration),
        };
        let violations = spec.validate();
        if !violations.is_empty() {
            let lines: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Err(Error::Invalid(lines.join("; ")));
        }
        Ok(spec)
    }

    pub fn solver_params(&self) -> Result<SolverParams> {
        let params = SolverParams {
            basis: RegressionBasis {
                degree: self.numerics.basis_degree,
                ridge: self.numerics.ridge,
            },
            picard: PicardParams {
                max_sweeps: self.numerics.picard.max_sweeps,
                tol: self.numerics.picard.tol,
                damping: self.numerics.picard.damping,
            },
        };
        params.validate()?;
        Ok(params)
    }

    pub fn optimizer_config(&self) -> Result<OptimizerConfig> {
        let section = &self.numerics.optimizer;
        let config = OptimizerConfig {
            step_size: section.step_size,
            step_rule: match section.step_rule {
                StepRuleConfig::Fixed => StepRule::Fixed,
                StepRuleConfig::Halving => StepRule::HalvingOnIncrease,
            },
            max_iterations: section.max_iterations,
            tolerance: section.tolerance,
            solver: self.solver_params()?,
        };
        config.validate()?;
        Ok(config)
    }

    /// Numerics sanity independent of the model.
    pub fn validate_numerics(&self) -> Result<()> {
        if self.numerics.steps == 0 {
            return Err(Error::Invalid("numerics.steps must be positive".into()));
        }
        if self.numerics.paths < 2 {
            return Err(Error::Invalid("numerics.paths must be at least 2".into()));
        }
        if !(self.numerics.verify_tolerance > 0.0) {
            return Err(Error::Invalid("numerics.verify_tolerance must be positive".into()));
        }
        if self.numerics.directions == 0 {
            return Err(Error::Invalid("numerics.directions must be positive".into()));
        }
        self.solver_params()?;
        Ok(())
    }
}

fn vector(values: &Option<Vec<f64>>, len: usize, what: &str) -> Result<DVector<f64>> {
    match values {
        None => Ok(DVector::zeros(len)),
        Some(v) if v.len() == len => Ok(DVector::from_column_slice(v)),
        Some(v) => {
            Err(Error::Shape(format!("{what}: expected length {len}, got {}", v.len())))
        }
    }
}

fn matrix(
    values: &Option<Vec<Vec<f64>>>,
    rows: usize,
    cols: usize,
    what: &str,
) -> Result<DMatrix<f64>> {
    match values {
        None => Ok(DMatrix::zeros(rows, cols)),
        Some(table) => {
            if table.len() != rows || table.iter().any(|r| r.len() != cols) {
                return Err(Error::Shape(format!("{what}: expected a {rows} x {cols} table")));
            }
            let flat: Vec<f64> = table.iter().flatten().copied().collect();
            Ok(DMatrix::from_row_slice(rows, cols, &flat))
        }
    }
}

fn affine_map(
    cfg: &MapConfig,
    rows: usize,
    dims: &Dimensions,
    marks: usize,
    what: &str,
) -> Result<AffineMap> {
    let r_mat = match &cfg.r {
        None => (0..marks).map(|_| DMatrix::zeros(rows, dims.m)).collect(),
        Some(list) => {
            if list.len() != marks {
                return Err(Error::Shape(format!("{what}.r: expected {marks} matrices")));
            }
            let mut out = Vec::with_capacity(marks);
            for (j, table) in list.iter().enumerate() {
                out.push(matrix(
                    &Some(table.clone()),
                    rows,
                    dims.m,
                    &format!("{what}.r[{j}]"),
                )?);
            }
            out
        }
    };
    Ok(AffineMap {
        constant: vector(&cfg.constant, rows, &format!("{what}.constant"))?,
        x_mat: matrix(&cfg.x, rows, dims.n, &format!("{what}.x"))?,
        y_mat: matrix(&cfg.y, rows, dims.m, &format!("{what}.y"))?,
        z_mat: matrix(&cfg.z, rows, dims.m * dims.d, &format!("{what}.z"))?,
        r_mat,
        v_mat: matrix(&cfg.v, rows, dims.k, &format!("{what}.v"))?,
    })
}

fn build_affine(cfg: &AffineConfig) -> Result<ProblemSpec> {
    let dims = Dimensions {
        n: cfg.dimensions.n,
        m: cfg.dimensions.m,
        d: cfg.dimensions.d,
        k: cfg.dimensions.k,
    };
    let marks = match &cfg.marks {
        None => MarkSpace::none(),
        Some(m) => MarkSpace::new(m.atoms.clone(), m.weights.clone())?,
    };
    let mm = marks.len();

    let mut model = AffineModel::zeros(dims, marks.clone());
    model.drift = affine_map(&cfg.drift, dims.n, &dims, mm, "drift")?;
    model.diffusion = affine_map(&cfg.diffusion, dims.n * dims.d, &dims, mm, "diffusion")?;
    model.jump = affine_map(&cfg.jump, dims.n, &dims, mm, "jump")?;
    model.driver = affine_map(&cfg.driver, dims.m, &dims, mm, "driver")?;
    model.nonlin_scale = cfg.nonlinearity;
    model.cost = QuadraticCost {
        qx: vector(&cfg.cost.qx, dims.n, "cost.qx")?,
        qy: vector(&cfg.cost.qy, dims.m, "cost.qy")?,
        qz: vector(&cfg.cost.qz, dims.m * dims.d, "cost.qz")?,
        qr: vector(&cfg.cost.qr, dims.m, "cost.qr")?,
        qv: vector(&cfg.cost.qv, dims.k, "cost.qv")?,
        lx: vector(&cfg.cost.lx, dims.n, "cost.lx")?,
        ly: vector(&cfg.cost.ly, dims.m, "cost.ly")?,
        lv: vector(&cfg.cost.lv, dims.k, "cost.lv")?,
        constant: cfg.cost.constant,
        q_phi: vector(&cfg.cost.q_phi, dims.n, "cost.q_phi")?,
        p_phi: vector(&cfg.cost.p_phi, dims.n, "cost.p_phi")?,
        c_phi: cfg.cost.c_phi,
        q_h: vector(&cfg.cost.q_h, dims.m, "cost.q_h")?,
        p_h: vector(&cfg.cost.p_h, dims.m, "cost.p_h")?,
        c_h: cfg.cost.c_h,
    };

    let terminal = match &cfg.terminal {
        TerminalConfig::Zero => TerminalSpec::zero(&dims, &marks),
        TerminalConfig::Driver { constant, brownian, counts, squash } => {
            TerminalSpec::Driver(DriverTerminal {
                constant: vector(constant, dims.m, "terminal.constant")?,
                brownian: matrix(brownian, dims.m, dims.d, "terminal.brownian")?,
                counts: matrix(counts, dims.m, mm, "terminal.counts")?,
                squash: *squash,
            })
        }
        TerminalConfig::State { linear, constant, squash, acknowledged } => {
            TerminalSpec::State(StateTerminal {
                linear: matrix(&Some(linear.clone()), dims.m, dims.n, "terminal.linear")?,
                constant: vector(constant, dims.m, "terminal.constant")?,
                squash: *squash,
                acknowledged: *acknowledged,
            })
        }
    };

    if cfg.initial.len() != dims.n {
        return Err(Error::Shape(format!(
            "initial: expected length {}, got {}",
            dims.n,
            cfg.initial.len()
        )));
    }

    Ok(ProblemSpec {
        dims,
        horizon: cfg.horizon,
        initial: DVector::from_column_slice(&cfg.initial),
        marks,
        control_set: cfg.control_set.clone(),
        filtration: cfg.filtration,
        terminal,
        coefficients: std::sync::Arc::new(model),
    })
}
