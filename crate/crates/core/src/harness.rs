//! Experiment presets, JSON configuration, convergence / robustness /
//! work-precision drivers and CSV / VTK writers.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::HarnessError;
use crate::field::{normalize, ProjectionParams, VectorField};
use crate::grid::{l2_distance, BoundaryData, FaceBc, Grid};
use crate::integrators::{run, Observer, Problem, RunOutput, RunTrace, Scheme, SchemeParams, SnapshotObserver};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Convergence41,
    #[serde(rename = "llg_blowup42")]
    LlgBlowup42,
    PointDefect43,
    TwistedNematic44,
    Custom,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Convergence41,
        Preset::LlgBlowup42,
        Preset::PointDefect43,
        Preset::TwistedNematic44,
        Preset::Custom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Convergence41 => "convergence41",
            Preset::LlgBlowup42 => "llg_blowup42",
            Preset::PointDefect43 => "point_defect43",
            Preset::TwistedNematic44 => "twisted_nematic44",
            Preset::Custom => "custom",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, HarnessError> {
        let key = name.to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|p| p.name() == key)
            .ok_or_else(|| HarnessError::UnknownPreset(name.to_string()))
    }
}

/// Grid on `[lower, lower + length]^dim` with `k` intervals per axis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    pub dim: usize,
    pub k: usize,
    pub lower: f64,
    pub length: f64,
    /// `[axis0 low, axis0 high, axis1 low, ...]`.
    pub faces: Vec<FaceBc>,
}

impl GridSpec {
    pub fn build(&self) -> Result<Grid, HarnessError> {
        if self.k == 0 {
            return Err(HarnessError::Config("grid needs at least one interval".into()));
        }
        Ok(Grid::new(
            self.dim,
            self.k + 1,
            self.length / self.k as f64,
            [self.lower; 3],
            self.faces.clone(),
        )?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitialData {
    /// `(0.3 sin πx sin πy, 0.3 sin 3πx sin πy, 1 + 0.2 cos 2πx cos 2πy)`, normalized.
    Convergence41,
    /// `(2x₁A, 2x₂A, A² - |x|²)/(A² + |x|²)` with `A = (1 - 2|x|)⁴` inside the
    /// disc `|x| < 1/2`, and `(0, 0, -1)` outside.
    Blowup42,
    /// Trigonometric field of the point-defect example, normalized.
    PointDefect43,
    /// Unit vectors from normalized standard-normal triples.
    RandomUnit { seed: u64 },
    Constant { value: [f64; 3] },
}

fn blowup42(x: [f64; 3]) -> [f64; 3] {
    let r2 = x[0] * x[0] + x[1] * x[1];
    let r = r2.sqrt();
    if r >= 0.5 {
        return [0.0, 0.0, -1.0];
    }
    let a = (1.0 - 2.0 * r).powi(4);
    let d = a * a + r2;
    [2.0 * x[0] * a / d, 2.0 * x[1] * a / d, (a * a - r2) / d]
}

impl InitialData {
    /// Raw (possibly non-unit) field; see [`initial_field`].
    pub fn sample(&self, grid: &Grid) -> VectorField {
        use std::f64::consts::PI;
        match self {
            InitialData::Convergence41 => VectorField::from_fn(grid, |x| {
                [
                    0.3 * (PI * x[0]).sin() * (PI * x[1]).sin(),
                    0.3 * (3.0 * PI * x[0]).sin() * (PI * x[1]).sin(),
                    1.0 + 0.2 * (2.0 * PI * x[0]).cos() * (2.0 * PI * x[1]).cos(),
                ]
            }),
            InitialData::Blowup42 => VectorField::from_fn(grid, blowup42),
            InitialData::PointDefect43 => VectorField::from_fn(grid, |p| {
                let (x, y, z) = (p[0], p[1], p[2]);
                [
                    (2.0 * PI * x).sin() + 2.0 + 0.5 * (6.0 * PI * y).sin() + 0.2 * (4.0 * PI * z).sin(),
                    (2.0 * PI * x).cos() + 2.0 + 0.5 * (6.0 * PI * y).cos() + 0.2 * (4.0 * PI * z).cos(),
                    (2.0 * PI * x).sin() + 6.0 * (6.0 * PI * y).cos() + (4.0 * PI * z).cos(),
                ]
            }),
            InitialData::RandomUnit { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let n = grid.n_nodes();
                let mut f = VectorField::zeros(n);
                for i in 0..n {
                    loop {
                        let v: [f64; 3] = [
                            StandardNormal.sample(&mut rng),
                            StandardNormal.sample(&mut rng),
                            StandardNormal.sample(&mut rng),
                        ];
                        if crate::field::norm3(v) > 1e-8 {
                            f.set_node(i, v);
                            break;
                        }
                    }
                }
                f
            }
            InitialData::Constant { value } => VectorField::constant(grid.n_nodes(), *value),
        }
    }
}

/// How reference solutions are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ReferencePolicy {
    Bdf4 { tau: f64 },
    /// Any scheme run at a much smaller step.
    SelfRefined { scheme: Scheme, tau: f64 },
}

impl ReferencePolicy {
    pub fn params(&self, base: &SchemeParams) -> SchemeParams {
        match self {
            ReferencePolicy::Bdf4 { tau } => SchemeParams {
                scheme: Scheme::bdf4(),
                tau: *tau,
                ..base.clone()
            },
            ReferencePolicy::SelfRefined { scheme, tau } => SchemeParams {
                scheme: scheme.clone(),
                tau: *tau,
                ..base.clone()
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub grid: GridSpec,
    pub initial: InitialData,
    pub params: SchemeParams,
    pub t_end: f64,
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub reference: ReferencePolicy,
}

fn neumann_faces(dim: usize) -> Vec<FaceBc> {
    vec![FaceBc::Neumann; 2 * dim]
}

/// Seed of the random initial field of the twisted-nematic preset.
pub const TWISTED_NEMATIC_SEED: u64 = 0x5eed_0044;

/// Default SIP1 implicitness.
pub const SIP1_THETA: f64 = 1.0;

pub fn preset(name: &str) -> Result<ExperimentConfig, HarnessError> {
    Ok(preset_config(Preset::from_name(name)?))
}

pub fn preset_config(p: Preset) -> ExperimentConfig {
    match p {
        Preset::Convergence41 => ExperimentConfig {
            preset: p,
            grid: GridSpec {
                dim: 2,
                k: 64,
                lower: -0.5,
                length: 1.0,
                faces: neumann_faces(2),
            },
            initial: InitialData::Convergence41,
            params: SchemeParams::new(Scheme::prk2(), 3.2e-4, ProjectionParams::new(1.0, 1.0)),
            t_end: 0.01024,
            snapshot_times: vec![],
            output_dir: None,
            reference: ReferencePolicy::Bdf4 { tau: 1e-6 },
        },
        Preset::LlgBlowup42 => ExperimentConfig {
            preset: p,
            grid: GridSpec {
                dim: 2,
                k: 24,
                lower: -0.5,
                length: 1.0,
                faces: neumann_faces(2),
            },
            initial: InitialData::Blowup42,
            params: SchemeParams::new(Scheme::prk2(), 1e-4, ProjectionParams::new(1.0, 1.0)),
            t_end: 0.1,
            snapshot_times: vec![0.0, 0.02, 0.04, 0.048, 0.049, 0.1],
            output_dir: None,
            reference: ReferencePolicy::Bdf4 { tau: 1e-6 },
        },
        Preset::PointDefect43 => ExperimentConfig {
            preset: p,
            grid: GridSpec {
                dim: 3,
                k: 24,
                lower: 0.0,
                length: 1.0,
                faces: vec![
                    FaceBc::Dirichlet {
                        data: BoundaryData::Radial { center: [0.5; 3] },
                    };
                    6
                ],
            },
            initial: InitialData::PointDefect43,
            params: SchemeParams::new(Scheme::prk2(), 1e-3, ProjectionParams::new(1.0, 0.0)),
            t_end: 0.6,
            snapshot_times: vec![0.0, 0.015, 0.05, 0.6],
            output_dir: None,
            reference: ReferencePolicy::Bdf4 { tau: 1e-5 },
        },
        Preset::TwistedNematic44 => {
            let mut faces = neumann_faces(3);
            faces[4] = FaceBc::Dirichlet {
                data: BoundaryData::Constant { value: [1.0, 0.0, 0.0] },
            };
            faces[5] = FaceBc::Dirichlet {
                data: BoundaryData::Constant { value: [0.0, 1.0, 0.0] },
            };
            ExperimentConfig {
                preset: p,
                grid: GridSpec {
                    dim: 3,
                    k: 24,
                    lower: 0.0,
                    length: 1.0,
                    faces,
                },
                initial: InitialData::RandomUnit {
                    seed: TWISTED_NEMATIC_SEED,
                },
                params: SchemeParams::new(Scheme::prk2(), 5e-3, ProjectionParams::new(1.0, 0.0)),
                t_end: 0.5,
                snapshot_times: vec![0.0, 0.05, 0.15, 0.5],
                output_dir: None,
                reference: ReferencePolicy::Bdf4 { tau: 1e-5 },
            }
        }
        Preset::Custom => ExperimentConfig {
            preset: p,
            grid: GridSpec {
                dim: 2,
                k: 16,
                lower: 0.0,
                length: 1.0,
                faces: neumann_faces(2),
            },
            initial: InitialData::Constant { value: [0.0, 0.0, 1.0] },
            params: SchemeParams::new(Scheme::prk2(), 1e-3, ProjectionParams::new(1.0, 0.0)),
            t_end: 0.01,
            snapshot_times: vec![],
            output_dir: None,
            reference: ReferencePolicy::Bdf4 { tau: 1e-5 },
        },
    }
}

/// Normalized initial field with Dirichlet values imposed.
pub fn initial_field(cfg: &ExperimentConfig, problem: &Problem) -> Result<VectorField, HarnessError> {
    let mut f = normalize(&cfg.initial.sample(&problem.grid))?;
    if problem.grid.has_dirichlet() {
        problem.apply_boundary(&mut f);
        f = normalize(&f)?;
    }
    Ok(f)
}

fn steps_of(t: f64, tau: f64) -> Result<usize, HarnessError> {
    crate::integrators::step_count(t, tau)
        .ok_or_else(|| HarnessError::Config(format!("time {t} is not a multiple of the step {tau}")))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.grid.build()?;
        self.params.validate()?;
        steps_of(self.t_end, self.params.tau)?;
        for &t in &self.snapshot_times {
            if t < 0.0 || t > self.t_end * (1.0 + 1e-12) {
                return Err(HarnessError::Config(format!("snapshot time {t} outside [0, {}]", self.t_end)));
            }
            steps_of(t, self.params.tau)?;
        }
        Ok(())
    }

    pub fn problem(&self) -> Result<Problem, HarnessError> {
        Ok(Problem::new(self.grid.build()?))
    }
}

/// Outcome of a configured run.
#[derive(Debug)]
pub struct ExperimentOutput {
    pub output: RunOutput,
    pub snapshots: Vec<(usize, f64, VectorField)>,
    pub files: Vec<PathBuf>,
}

/// Runs the configured scheme; writes `trace.csv` and snapshot VTK files
/// when an output directory is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, HarnessError> {
    cfg.validate()?;
    let problem = cfg.problem()?;
    let m0 = initial_field(cfg, &problem)?;
    let steps = cfg
        .snapshot_times
        .iter()
        .map(|&t| steps_of(t, cfg.params.tau))
        .collect::<Result<Vec<_>, _>>()?;
    let mut snaps = SnapshotObserver::at_steps(steps);
    let output = run(&problem, &m0, &cfg.params, cfg.t_end, &mut [&mut snaps])?;
    let mut files = Vec::new();
    if let Some(dir) = &cfg.output_dir {
        fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
            path: dir.clone(),
            source,
        })?;
        let trace_path = dir.join("trace.csv");
        emit_trace_csv(&output.trace, &trace_path)?;
        files.push(trace_path);
        for (step, _, field) in &snaps.snapshots {
            let path = dir.join(format!("m_{step:06}.vtk"));
            emit_field_vtk(field, &problem.grid, &path)?;
            files.push(path);
        }
    }
    Ok(ExperimentOutput {
        output,
        snapshots: snaps.snapshots,
        files,
    })
}

/// Reference fields at each of `times` (ascending), computed in one run.
pub fn reference_solutions(cfg: &ExperimentConfig, times: &[f64]) -> Result<Vec<VectorField>, HarnessError> {
    reference_solutions_with_beta(cfg, times, cfg.params.projection.beta)
}

/// As [`reference_solutions`], with the projection's `β` replaced.
pub fn reference_solutions_with_beta(
    cfg: &ExperimentConfig,
    times: &[f64],
    beta: f64,
) -> Result<Vec<VectorField>, HarnessError> {
    let problem = cfg.problem()?;
    let m0 = initial_field(cfg, &problem)?;
    let mut params = cfg.reference.params(&cfg.params);
    params.projection.beta = beta;
    let t_max = times.iter().copied().fold(0.0, f64::max);
    let steps = times
        .iter()
        .map(|&t| steps_of(t, params.tau))
        .collect::<Result<Vec<_>, _>>()?;
    let mut snaps = SnapshotObserver::at_steps(steps.clone());
    let out = run(&problem, &m0, &params, t_max, &mut [&mut snaps])?;
    if let Some(e) = out.failure {
        return Err(e.into());
    }
    Ok(steps
        .iter()
        .map(|s| {
            snaps
                .snapshots
                .iter()
                .find(|(k, _, _)| k == s)
                .map(|(_, _, f)| f.clone())
                .expect("snapshot recorded")
        })
        .collect())
}

/// Reference fields at fixed times, one family per projection `β`.
///
/// LM2 only supports `β = 0`, so it is compared against a reference of the
/// same model rather than the configured one.
#[derive(Debug, Clone, Default)]
pub struct ReferenceSet {
    times: Vec<f64>,
    families: Vec<(f64, Vec<VectorField>)>,
}

impl ReferenceSet {
    pub fn new(times: &[f64]) -> Self {
        Self {
            times: times.to_vec(),
            families: Vec::new(),
        }
    }

    /// Computes every family the given schemes need.
    pub fn compute(cfg: &ExperimentConfig, times: &[f64], schemes: &[(String, Scheme)]) -> Result<Self, HarnessError> {
        let mut set = Self::new(times);
        set.ensure(cfg, schemes)?;
        Ok(set)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn insert(&mut self, beta: f64, fields: Vec<VectorField>) -> Result<(), HarnessError> {
        if fields.len() != self.times.len() {
            return Err(HarnessError::Config(format!(
                "{} reference fields for {} times",
                fields.len(),
                self.times.len()
            )));
        }
        self.families.retain(|(b, _)| *b != beta);
        self.families.push((beta, fields));
        Ok(())
    }

    pub fn get(&self, beta: f64, time: f64) -> Option<&VectorField> {
        let idx = self.times.iter().position(|&t| t == time)?;
        self.families.iter().find(|(b, _)| *b == beta).map(|(_, f)| &f[idx])
    }

    fn ensure(&mut self, cfg: &ExperimentConfig, schemes: &[(String, Scheme)]) -> Result<(), HarnessError> {
        let mut sorted = self.times.clone();
        sorted.sort_by(f64::total_cmp);
        for (_, scheme) in schemes {
            let beta = cell_params(cfg, scheme, cfg.params.tau).projection.beta;
            if self.families.iter().any(|(b, _)| *b == beta) {
                continue;
            }
            let fields = reference_solutions_with_beta(cfg, &sorted, beta)?;
            let ordered = self
                .times
                .iter()
                .map(|t| fields[sorted.iter().position(|s| s == t).unwrap()].clone())
                .collect();
            self.families.push((beta, ordered));
        }
        Ok(())
    }
}

fn prepared_references(
    cfg: &ExperimentConfig,
    times: &[f64],
    schemes: &[(String, Scheme)],
    given: Option<&ReferenceSet>,
) -> Result<ReferenceSet, HarnessError> {
    let mut set = match given {
        Some(r) => {
            if times.iter().any(|t| !r.times.contains(t)) {
                return Err(HarnessError::Config("reference set lacks a requested time".into()));
            }
            r.clone()
        }
        None => ReferenceSet::new(times),
    };
    set.ensure(cfg, schemes)?;
    Ok(set)
}

/// Scheme names accepted by the drivers and the CLI.
pub fn scheme_by_name(name: &str) -> Result<Scheme, HarnessError> {
    match name.to_ascii_lowercase().replace('-', "_").as_str() {
        "prk2" | "prk" => Ok(Scheme::prk2()),
        "prk_alt" | "prk2_alt" | "alt" => Ok(Scheme::prk2_alt()),
        "sip1" => Ok(Scheme::sip1(SIP1_THETA)),
        "lm2" => Ok(Scheme::lm2()),
        "bdf4" => Ok(Scheme::bdf4()),
        other => Err(HarnessError::Config(format!("unknown scheme '{other}'"))),
    }
}

/// Parameters for a named scheme; LM2 always runs with `β = 0`.
fn cell_params(cfg: &ExperimentConfig, scheme: &Scheme, tau: f64) -> SchemeParams {
    let mut p = SchemeParams {
        scheme: scheme.clone(),
        tau,
        ..cfg.params.clone()
    };
    if matches!(scheme, Scheme::Lm2 { .. }) {
        p.projection.beta = 0.0;
    }
    p
}

/// Formats with 17 significant digits; round-trips through `str::parse`.
pub fn fmt17(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "NaN".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub scheme: String,
    pub tau: f64,
    pub error: Option<f64>,
    pub order: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
}

impl ConvergenceTable {
    pub fn for_scheme<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a ConvergenceRow> + 'a {
        self.rows.iter().filter(move |r| r.scheme == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("scheme,tau,error,order\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.scheme,
                fmt17(r.tau),
                r.error.map(fmt17).unwrap_or_else(|| "NaN".into()),
                r.order.map(fmt17).unwrap_or_default()
            );
        }
        s
    }
}

/// `log2(previous / current)` between consecutive finite errors.
pub fn observed_orders(errors: &[Option<f64>]) -> Vec<Option<f64>> {
    let mut out = vec![None; errors.len()];
    for j in 1..errors.len() {
        if let (Some(a), Some(b)) = (errors[j - 1], errors[j]) {
            out[j] = Some((a / b).log2());
        }
    }
    out
}

fn run_error(problem: &Problem, m0: &VectorField, p: &SchemeParams, t: f64, reference: &VectorField) -> Option<f64> {
    match run(problem, m0, p, t, &mut []) {
        Ok(out) if out.completed() => l2_distance(out.field.as_slice(), reference.as_slice(), &problem.grid).ok(),
        Ok(out) => {
            log::warn!("{} at tau = {}: {}", p.scheme.label(), p.tau, out.failure.unwrap());
            None
        }
        Err(e) => {
            log::warn!("{} at tau = {}: {e}", p.scheme.label(), p.tau);
            None
        }
    }
}

/// Errors at `cfg.t_end` for `τ = tau0 / 2^j`, `j = 0..=n_halvings`,
/// against the configured reference policy (or `references`, when given).
pub fn convergence_driver(
    cfg: &ExperimentConfig,
    schemes: &[(String, Scheme)],
    tau0: f64,
    n_halvings: usize,
    references: Option<&ReferenceSet>,
) -> Result<ConvergenceTable, HarnessError> {
    let problem = cfg.problem()?;
    let m0 = initial_field(cfg, &problem)?;
    let refs = prepared_references(cfg, &[cfg.t_end], schemes, references)?;
    let taus: Vec<f64> = (0..=n_halvings).map(|j| tau0 / 2f64.powi(j as i32)).collect();
    let cells: Vec<(usize, usize)> = (0..schemes.len()).flat_map(|s| (0..taus.len()).map(move |j| (s, j))).collect();
    let errors: Vec<Option<f64>> = cells
        .par_iter()
        .map(|&(s, j)| {
            let p = cell_params(cfg, &schemes[s].1, taus[j]);
            let reference = refs.get(p.projection.beta, cfg.t_end).unwrap();
            run_error(&problem, &m0, &p, cfg.t_end, reference)
        })
        .collect();
    let mut table = ConvergenceTable::default();
    for (s, (name, _)) in schemes.iter().enumerate() {
        let errs = &errors[s * taus.len()..(s + 1) * taus.len()];
        let orders = observed_orders(errs);
        for j in 0..taus.len() {
            table.rows.push(ConvergenceRow {
                scheme: name.clone(),
                tau: taus[j],
                error: errs[j],
                order: orders[j],
            });
        }
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RobustnessCell {
    Error(f64),
    /// The run failed at or before this checkpoint.
    Failed,
    /// After a failure.
    Skipped,
}

impl std::fmt::Display for RobustnessCell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RobustnessCell::Error(e) => f.write_str(&fmt17(*e)),
            RobustnessCell::Failed => f.write_str("NAN"),
            RobustnessCell::Skipped => f.write_str("--"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessRow {
    pub scheme: String,
    pub tau: f64,
    pub cells: Vec<RobustnessCell>,
    /// Time of the failing step, if any.
    pub failed_at: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RobustnessTable {
    pub checkpoints: Vec<f64>,
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("scheme,tau,failed_at");
        for t in &self.checkpoints {
            let _ = write!(s, ",T={}", fmt17(*t));
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(
                s,
                "{},{},{}",
                r.scheme,
                fmt17(r.tau),
                r.failed_at.map(fmt17).unwrap_or_default()
            );
            for c in &r.cells {
                let _ = write!(s, ",{c}");
            }
            s.push('\n');
        }
        s
    }
}

/// One run per `(scheme, τ)`, sampling the error at each checkpoint.
pub fn robustness_driver(
    cfg: &ExperimentConfig,
    schemes: &[(String, Scheme)],
    taus: &[f64],
    checkpoints: &[f64],
    references: Option<&ReferenceSet>,
) -> Result<RobustnessTable, HarnessError> {
    let mut checkpoints = checkpoints.to_vec();
    checkpoints.sort_by(f64::total_cmp);
    if schemes.is_empty() || taus.is_empty() {
        return Ok(RobustnessTable {
            checkpoints,
            rows: vec![],
        });
    }
    for &tau in taus {
        for &t in &checkpoints {
            steps_of(t, tau)?;
        }
    }
    let problem = cfg.problem()?;
    let m0 = initial_field(cfg, &problem)?;
    let refs = prepared_references(cfg, &checkpoints, schemes, references)?;
    let t_max = checkpoints.last().copied().unwrap_or(0.0);
    let cells: Vec<(usize, usize)> = (0..schemes.len()).flat_map(|s| (0..taus.len()).map(move |j| (s, j))).collect();
    let rows: Vec<RobustnessRow> = cells
        .par_iter()
        .map(|&(s, j)| {
            let p = cell_params(cfg, &schemes[s].1, taus[j]);
            let steps: Vec<usize> = checkpoints.iter().map(|&t| steps_of(t, p.tau).unwrap()).collect();
            let mut snaps = SnapshotObserver::at_steps(steps.clone());
            let (failed_at, completed_steps) = match run(&problem, &m0, &p, t_max, &mut [&mut snaps]) {
                Ok(out) => match &out.failure {
                    Some(crate::error::RunError::Step { step, time, .. }) => (Some(*time), *step - 1),
                    Some(_) => (Some(0.0), 0),
                    None => (None, usize::MAX),
                },
                Err(_) => (Some(0.0), 0),
            };
            let mut failed = false;
            let cells = steps
                .iter()
                .enumerate()
                .map(|(c, &k)| {
                    if failed {
                        RobustnessCell::Skipped
                    } else if k > completed_steps {
                        failed = true;
                        RobustnessCell::Failed
                    } else {
                        let f = &snaps.snapshots.iter().find(|(sk, _, _)| *sk == k).unwrap().2;
                        let e = l2_distance(f.as_slice(), refs.get(p.projection.beta, checkpoints[c]).unwrap().as_slice(), &problem.grid).unwrap();
                        if e.is_finite() {
                            RobustnessCell::Error(e)
                        } else {
                            failed = true;
                            RobustnessCell::Failed
                        }
                    }
                })
                .collect();
            RobustnessRow {
                scheme: schemes[s].0.clone(),
                tau: taus[j],
                cells,
                failed_at,
            }
        })
        .collect();
    Ok(RobustnessTable { checkpoints, rows })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkPrecisionRow {
    pub scheme: String,
    pub tau: f64,
    pub t_end: f64,
    pub seconds: f64,
    pub error: Option<f64>,
}

pub fn work_precision_csv(rows: &[WorkPrecisionRow]) -> String {
    let mut s = String::from("scheme,tau,T,seconds,error\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.scheme,
            fmt17(r.tau),
            fmt17(r.t_end),
            fmt17(r.seconds),
            r.error.map(fmt17).unwrap_or_else(|| "NaN".into())
        );
    }
    s
}

/// Timed runs for every `(T, scheme, τ)`; runs execute one at a time so the
/// timings do not compete for cores.
pub fn work_precision_driver(
    cfg: &ExperimentConfig,
    schemes: &[(String, Scheme)],
    taus: &[f64],
    t_list: &[f64],
    references: Option<&ReferenceSet>,
) -> Result<Vec<WorkPrecisionRow>, HarnessError> {
    let problem = cfg.problem()?;
    let m0 = initial_field(cfg, &problem)?;
    let refs = prepared_references(cfg, t_list, schemes, references)?;
    let mut rows = Vec::new();
    for &t_end in t_list {
        for (name, scheme) in schemes {
            for &tau in taus {
                let p = cell_params(cfg, scheme, tau);
                let started = Instant::now();
                let reference = refs.get(p.projection.beta, t_end).unwrap();
                let error = run_error(&problem, &m0, &p, t_end, reference);
                rows.push(WorkPrecisionRow {
                    scheme: name.clone(),
                    tau,
                    t_end,
                    seconds: started.elapsed().as_secs_f64(),
                    error,
                });
            }
        }
    }
    Ok(rows)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

/// Legacy ASCII VTK structured-points file with vector attribute `m`.
pub fn field_vtk(field: &VectorField, grid: &Grid) -> String {
    let n = grid.nodes_per_axis();
    let mut dims = [1usize; 3];
    for d in dims.iter_mut().take(grid.dim()) {
        *d = n;
    }
    let lo = grid.lower();
    let origin = [lo[0], if grid.dim() > 1 { lo[1] } else { 0.0 }, if grid.dim() > 2 { lo[2] } else { 0.0 }];
    let mut s = String::new();
    let _ = writeln!(s, "# vtk DataFile Version 3.0");
    let _ = writeln!(s, "unitflow field");
    let _ = writeln!(s, "ASCII");
    let _ = writeln!(s, "DATASET STRUCTURED_POINTS");
    let _ = writeln!(s, "DIMENSIONS {} {} {}", dims[0], dims[1], dims[2]);
    let _ = writeln!(s, "ORIGIN {} {} {}", fmt17(origin[0]), fmt17(origin[1]), fmt17(origin[2]));
    let h = fmt17(grid.h());
    let _ = writeln!(s, "SPACING {h} {h} {h}");
    let _ = writeln!(s, "POINT_DATA {}", field.n_nodes());
    let _ = writeln!(s, "VECTORS m double");
    for i in 0..field.n_nodes() {
        let v = field.node(i);
        let _ = writeln!(s, "{} {} {}", fmt17(v[0]), fmt17(v[1]), fmt17(v[2]));
    }
    s
}

pub fn emit_field_vtk(field: &VectorField, grid: &Grid, path: &Path) -> Result<(), HarnessError> {
    if field.n_nodes() != grid.n_nodes() {
        return Err(HarnessError::Config(format!(
            "field has {} nodes, grid has {}",
            field.n_nodes(),
            grid.n_nodes()
        )));
    }
    write_text(path, &field_vtk(field, grid))
}

pub const TRACE_HEADER: &str = "step,t,energy,energy_pre_projection,min_len_pre,max_unit_dev,solver_iters_total,wall_ms";

pub fn trace_csv(trace: &RunTrace) -> String {
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for r in &trace.records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.step,
            fmt17(r.time),
            fmt17(r.energy),
            fmt17(r.energy_pre_projection),
            fmt17(r.min_len_pre),
            fmt17(r.max_unit_dev),
            r.solver_iters_total(),
            fmt17(r.wall_ms)
        );
    }
    s
}

pub fn emit_trace_csv(trace: &RunTrace, path: &Path) -> Result<(), HarnessError> {
    write_text(path, &trace_csv(trace))
}

/// Parses a trace CSV back into rows of numbers (one `Vec<f64>` per step).
pub fn parse_trace_csv(text: &str) -> Result<Vec<Vec<f64>>, HarnessError> {
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(HarnessError::Config("unexpected trace header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| v.parse::<f64>().map_err(|e| HarnessError::Config(format!("bad number '{v}': {e}"))))
                .collect()
        })
        .collect()
}

/// Records one component of one node after every step.
#[derive(Debug, Clone)]
pub struct NodeObserver {
    pub node: usize,
    pub component: usize,
    pub samples: Vec<(f64, f64)>,
}

impl NodeObserver {
    pub fn new(node: usize, component: usize) -> Self {
        Self {
            node,
            component,
            samples: Vec::new(),
        }
    }

    /// First time at which the value drops below zero, if it does.
    pub fn first_negative(&self) -> Option<f64> {
        self.samples.iter().find(|(_, v)| *v < 0.0).map(|(t, _)| *t)
    }
}

impl Observer for NodeObserver {
    fn observe(&mut self, _step: usize, time: f64, field: &VectorField) {
        self.samples.push((time, field.node(self.node)[self.component]));
    }
}

/// Index of the node at the centre of a grid with an even interval count.
pub fn center_node(grid: &Grid) -> usize {
    let c = (grid.nodes_per_axis() - 1) / 2;
    grid.node_index([c; 3])
}

/// Time at which the centre spin's third component first becomes negative.
pub fn blowup_time(cfg: &ExperimentConfig) -> Result<(Option<f64>, RunOutput), HarnessError> {
    let problem = cfg.problem()?;
    let m0 = initial_field(cfg, &problem)?;
    let mut obs = NodeObserver::new(center_node(&problem.grid), 2);
    let out = run(&problem, &m0, &cfg.params, cfg.t_end, &mut [&mut obs])?;
    Ok((obs.first_negative(), out))
}

/// In-plane angles `atan2(m2, m1)` along the vertical line through the
/// centre of a 3-D grid, bottom to top.
pub fn midline_angles(field: &VectorField, grid: &Grid) -> Vec<f64> {
    let n = grid.nodes_per_axis();
    let c = (n - 1) / 2;
    (0..n)
        .map(|k| {
            let v = field.node(grid.node_index([c, c, k]));
            v[1].atan2(v[0])
        })
        .collect()
}
