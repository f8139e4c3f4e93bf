//! Experiment configuration: TOML or JSON with one schema, validated before
//! any numerical work or file output starts.

use std::path::{Path, PathBuf};

use fraclab_core::evolve::Equation;
use fraclab_core::grid::{BumpSpec, Grid, Interval, TimeGrid};
use fraclab_core::inverse::{LambdaRule, Penalty};
use fraclab_core::nonlinearity::NonlinearitySpec;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    SolveHeat,
    SolveWave,
    Dn,
    Linearize,
    Runge,
    Recover,
    Verify,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::SolveHeat => "solve-heat",
            Task::SolveWave => "solve-wave",
            Task::Dn => "dn",
            Task::Linearize => "linearize",
            Task::Runge => "runge",
            Task::Recover => "recover",
            Task::Verify => "verify",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Box half-width `L`; the lower limit when `fit_boundary` is set.
    pub halfwidth: f64,
    pub points: usize,
    pub omega: [f64; 2],
    pub w: [f64; 2],
    pub v: [f64; 2],
    /// Place ∂Ω at the calibrated sub-cell offset for the operator order.
    #[serde(default)]
    pub fit_boundary: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub horizon: f64,
    pub steps: usize,
}

/// Nonlinearity given inline or as a path to a JSON spec file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NonlinearityRef {
    Path(PathBuf),
    Inline(NonlinearitySpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub s: f64,
    pub equation: Equation,
    /// Absent: the linear equation (`q = 0`).
    #[serde(default)]
    pub nonlinearity: Option<NonlinearityRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveConfig {
    /// Exterior bumps, summed.
    pub exterior: Vec<BumpSpec>,
    /// Constant potential `a`; linear problems only.
    #[serde(default)]
    pub potential: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DnConfig {
    /// One DN record per bump.
    pub inputs: Vec<BumpSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearizeConfig {
    pub inputs: Vec<BumpSpec>,
    /// Index sets into `inputs`.
    pub sets: Vec<Vec<usize>>,
    pub epsilons: Vec<f64>,
}

/// Target `r(t, x) = t^power (1 - x²)₊² cos(frequency · x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RungeTarget {
    pub power: f64,
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RungeConfig {
    /// Potential `a(x) = Σ_j potential[j] x^j`.
    #[serde(default)]
    pub potential: Vec<f64>,
    /// Nested `(centers, windows)` basis sizes; each must divide the largest.
    pub sizes: Vec<[usize; 2]>,
    pub targets: Vec<RungeTarget>,
    /// Absent: the basis default.
    #[serde(default)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    /// Hidden forward model built from `[model]`.
    Synthetic,
    /// DN records in `records`, keyed by input hash.
    Records,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoverConfig {
    pub order: usize,
    pub tuples: usize,
    pub amplitude: f64,
    pub epsilon: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_rule")]
    pub lambda_rule: LambdaRule,
    #[serde(default)]
    pub penalty: Penalty,
    #[serde(default = "yes")]
    pub time_independent: bool,
    pub oracle: OracleKind,
    /// Synthetic oracle lattice: `refine · (N - 1) + 1` points; 1 is the
    /// inverse-crime setting.
    #[serde(default = "one")]
    pub oracle_refine: usize,
    #[serde(default)]
    pub records: Option<PathBuf>,
    /// Store every synthetic measurement under `<out>/records`.
    #[serde(default)]
    pub record: bool,
    /// Standard deviation of additive DN noise; `--noise` overrides.
    #[serde(default)]
    pub noise: f64,
}

fn default_lambda() -> f64 {
    1e-8
}

fn default_rule() -> LambdaRule {
    LambdaRule::QuasiOptimal
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    /// Subset of suite sections; empty runs all.
    #[serde(default)]
    pub sections: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub task: Option<Task>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub time: Option<TimeConfig>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub solve: Option<SolveConfig>,
    #[serde(default)]
    pub dn: Option<DnConfig>,
    #[serde(default)]
    pub linearize: Option<LinearizeConfig>,
    #[serde(default)]
    pub runge: Option<RungeConfig>,
    #[serde(default)]
    pub recover: Option<RecoverConfig>,
    #[serde(default)]
    pub verify: Option<VerifyConfig>,
}

/// Configs bundled with the binary, used when `--config` is omitted.
pub fn bundled(task: Task) -> &'static str {
    match task {
        Task::SolveHeat => include_str!("../configs/solve_heat.toml"),
        Task::SolveWave => include_str!("../configs/solve_wave.toml"),
        Task::Dn => include_str!("../configs/dn.toml"),
        Task::Linearize => include_str!("../configs/linearize.toml"),
        Task::Runge => include_str!("../configs/runge.toml"),
        Task::Recover => include_str!("../configs/recover_heat.toml"),
        Task::Verify => include_str!("../configs/verify.toml"),
    }
}

/// Data files the bundled configs refer to.
fn bundled_file(name: &Path) -> Option<&'static str> {
    match name.to_str()? {
        "truth_heat.json" => Some(include_str!("../configs/truth_heat.json")),
        "truth_wave.json" => Some(include_str!("../configs/truth_wave.json")),
        _ => None,
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str, json: bool) -> Result<Self, ConfigError> {
        if json {
            serde_json::from_str(text).map_err(|e| bad(format!("config: {e}")))
        } else {
            toml::from_str(text).map_err(|e| bad(format!("config: {e}")))
        }
    }

    /// Read `path` (`.json` as JSON, anything else as TOML) and resolve file
    /// references against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad(format!("cannot read config {}: {e}", path.display())))?;
        let json = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let mut cfg = Self::parse(&text, json)?;
        cfg.resolve_paths(Some(path.parent().unwrap_or(Path::new(""))))?;
        Ok(cfg)
    }

    /// Replace a nonlinearity file reference by its contents and resolve the
    /// record directory against `base`, the config's directory. Bundled
    /// configs (`base = None`) may only reference bundled files.
    pub fn resolve_paths(&mut self, base: Option<&Path>) -> Result<(), ConfigError> {
        if let Some(model) = self.model.as_mut() {
            if let Some(NonlinearityRef::Path(p)) = &model.nonlinearity {
                let (full, text) = match base {
                    Some(base) => {
                        let full = base.join(p);
                        let text = std::fs::read_to_string(&full).map_err(|e| {
                            bad(format!("nonlinearity file {}: {e}", full.display()))
                        })?;
                        (full, text)
                    }
                    None => {
                        let text = bundled_file(p).ok_or_else(|| {
                            bad(format!("no bundled nonlinearity file {}", p.display()))
                        })?;
                        (p.clone(), text.to_string())
                    }
                };
                let spec = NonlinearitySpec::from_json(&text)
                    .map_err(|e| bad(format!("nonlinearity file {}: {e}", full.display())))?;
                model.nonlinearity = Some(NonlinearityRef::Inline(spec));
            }
        }
        if let (Some(rec), Some(base)) = (self.recover.as_mut(), base) {
            if let Some(dir) = rec.records.as_mut() {
                *dir = base.join(&*dir);
            }
        }
        Ok(())
    }

    /// Settle the task against the subcommand and check every block the task
    /// needs.
    pub fn validate(&mut self, requested: Option<Task>) -> Result<Task, ConfigError> {
        let task = match (requested, self.task) {
            (Some(r), Some(c)) if r != c => {
                return Err(bad(format!(
                    "config is for task {:?} but {:?} was requested",
                    c.name(),
                    r.name()
                )))
            }
            (Some(r), _) => r,
            (None, Some(c)) => c,
            (None, None) => return Err(bad("no task given in the config or on the command line")),
        };
        self.task = Some(task);
        if task == Task::Verify {
            let sections = &self.verify.get_or_insert_with(Default::default).sections;
            for s in sections {
                if !fraclab_core::verify::SECTIONS.contains(&s.as_str()) {
                    return Err(bad(format!(
                        "unknown verify section {s:?}; known: {}",
                        fraclab_core::verify::SECTIONS.join(", ")
                    )));
                }
            }
            return Ok(task);
        }
        let grid = self
            .grid
            .as_ref()
            .ok_or_else(|| bad("missing [grid] block"))?;
        for (name, iv) in [("omega", grid.omega), ("w", grid.w), ("v", grid.v)] {
            if !(iv[0] < iv[1]) || !iv.iter().all(|v| v.is_finite()) {
                return Err(bad(format!(
                    "grid.{name} must be an interval lo < hi, got {iv:?}"
                )));
            }
        }
        if !(grid.halfwidth > 0.0) {
            return Err(bad("grid.halfwidth must be positive"));
        }
        let time = self.time.ok_or_else(|| bad("missing [time] block"))?;
        if !(time.horizon > 0.0) || time.steps == 0 {
            return Err(bad(
                "time.horizon must be positive and time.steps at least 1",
            ));
        }
        let model = self
            .model
            .as_ref()
            .ok_or_else(|| bad("missing [model] block"))?;
        if !(model.s > 0.0 && model.s < 1.0) {
            return Err(bad(format!("model.s must lie in (0, 1), got {}", model.s)));
        }
        if model.equation == Equation::Wave && model.s <= 0.5 {
            return Err(bad(format!(
                "the wave equation needs 1/2 < s < 1 (H^s must embed in L∞ for the \
                 semilinear well-posedness and recovery theory in one dimension); got s = {}",
                model.s
            )));
        }
        let expect = |eq: Equation| -> Result<(), ConfigError> {
            if model.equation != eq {
                return Err(bad(format!(
                    "task {} needs model.equation = {:?}",
                    task.name(),
                    eq.name()
                )));
            }
            Ok(())
        };
        match task {
            Task::SolveHeat | Task::SolveWave => {
                expect(if task == Task::SolveHeat {
                    Equation::Heat
                } else {
                    Equation::Wave
                })?;
                let solve = self
                    .solve
                    .as_ref()
                    .ok_or_else(|| bad("missing [solve] block"))?;
                if solve.potential != 0.0 && model.nonlinearity.is_some() {
                    return Err(bad("solve.potential applies to linear problems only"));
                }
            }
            Task::Dn => {
                let dn = self.dn.as_ref().ok_or_else(|| bad("missing [dn] block"))?;
                if dn.inputs.is_empty() {
                    return Err(bad("dn.inputs is empty"));
                }
            }
            Task::Linearize => {
                let lin = self
                    .linearize
                    .as_ref()
                    .ok_or_else(|| bad("missing [linearize] block"))?;
                if model.nonlinearity.is_none() {
                    return Err(bad("linearize needs model.nonlinearity"));
                }
                for set in &lin.sets {
                    if set.is_empty() || set.iter().any(|&i| i >= lin.inputs.len()) {
                        return Err(bad(format!(
                            "linearize set {set:?} must be non-empty indices into {} inputs",
                            lin.inputs.len()
                        )));
                    }
                }
                if lin.epsilons.is_empty() || lin.epsilons.iter().any(|e| !(*e > 0.0)) {
                    return Err(bad("linearize.epsilons must be positive"));
                }
            }
            Task::Runge => {
                let r = self
                    .runge
                    .as_ref()
                    .ok_or_else(|| bad("missing [runge] block"))?;
                let [ns, nt] = *r
                    .sizes
                    .iter()
                    .max_by_key(|s| s[0] * s[1])
                    .ok_or_else(|| bad("runge.sizes is empty"))?;
                if r.sizes
                    .iter()
                    .any(|s| s[0] == 0 || s[1] == 0 || s[0] > ns || s[1] > nt)
                {
                    return Err(bad(
                        "runge.sizes must be positive and nested in the largest size",
                    ));
                }
                if r.targets.is_empty() {
                    return Err(bad("runge.targets is empty"));
                }
            }
            Task::Recover => {
                let r = self
                    .recover
                    .as_ref()
                    .ok_or_else(|| bad("missing [recover] block"))?;
                if r.order < 2 {
                    return Err(bad("recover.order must be at least 2"));
                }
                if r.oracle_refine == 0 {
                    return Err(bad("recover.oracle_refine must be at least 1"));
                }
                if !(r.noise >= 0.0) {
                    return Err(bad("recover.noise must be nonnegative"));
                }
                match r.oracle {
                    OracleKind::Synthetic if model.nonlinearity.is_none() => {
                        return Err(bad(
                            "a synthetic oracle needs model.nonlinearity as ground truth",
                        ))
                    }
                    OracleKind::Records => match &r.records {
                        Some(dir) if dir.is_dir() => {}
                        Some(dir) => {
                            return Err(bad(format!(
                                "recover.records directory {} does not exist",
                                dir.display()
                            )))
                        }
                        None => return Err(bad("oracle = \"records\" needs recover.records")),
                    },
                    _ => {}
                }
            }
            Task::Verify => unreachable!(),
        }
        Ok(task)
    }

    pub fn grid(&self) -> fraclab_core::Result<Grid> {
        let g = self.grid.as_ref().expect("validated");
        self.grid_with(g.points)
    }

    /// The configured geometry with `points` lattice points.
    pub fn grid_with(&self, points: usize) -> fraclab_core::Result<Grid> {
        let g = self.grid.as_ref().expect("validated");
        let iv = |a: [f64; 2]| Interval::new(a[0], a[1]);
        if g.fit_boundary {
            let s = self.model.as_ref().expect("validated").s;
            let theta = fraclab_core::fracop::boundary_offset(s)?;
            Grid::fitted(g.halfwidth, points, iv(g.omega), iv(g.w), iv(g.v), theta)
        } else {
            Grid::new(g.halfwidth, points, iv(g.omega), iv(g.w), iv(g.v))
        }
    }

    pub fn time_grid(&self) -> fraclab_core::Result<TimeGrid> {
        let t = self.time.expect("validated");
        TimeGrid::new(t.horizon, t.steps)
    }

    pub fn nonlinearity(&self) -> Option<&NonlinearitySpec> {
        match self.model.as_ref()?.nonlinearity.as_ref()? {
            NonlinearityRef::Inline(spec) => Some(spec),
            NonlinearityRef::Path(_) => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_configs_parse_and_validate() {
        for task in [
            Task::SolveHeat,
            Task::SolveWave,
            Task::Dn,
            Task::Linearize,
            Task::Runge,
            Task::Recover,
            Task::Verify,
        ] {
            let mut cfg = ExperimentConfig::parse(bundled(task), false).unwrap();
            cfg.resolve_paths(None).unwrap();
            assert!(task != Task::Recover || cfg.nonlinearity().is_some());
            assert_eq!(cfg.validate(Some(task)).unwrap(), task, "{}", task.name());
        }
    }

    #[test]
    fn wave_below_one_half_is_rejected() {
        let mut cfg = ExperimentConfig::parse(bundled(Task::SolveWave), false).unwrap();
        cfg.model.as_mut().unwrap().s = 0.4;
        let err = cfg.validate(None).unwrap_err();
        assert!(err.0.contains("1/2 < s < 1"), "{err}");
    }

    #[test]
    fn json_and_toml_share_the_schema() {
        let cfg = ExperimentConfig::parse(bundled(Task::Recover), false).unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::parse(&json, true).unwrap(), cfg);
    }

    #[test]
    fn mismatched_task_is_rejected() {
        let mut cfg = ExperimentConfig::parse(bundled(Task::Recover), false).unwrap();
        assert!(cfg.validate(Some(Task::Runge)).is_err());
    }
}
