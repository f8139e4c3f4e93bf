//! Task orchestration. Artifacts are staged in a private directory and moved
//! into the output directory file by file (rename is atomic) only after the
//! task succeeded; `manifest.json` is written last.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use fraclab_core::evolve::Equation;
use fraclab_core::fracop::FracOperator;
use fraclab_core::grid::{ExteriorInput, Grid, SpaceTimeField, TimeGrid};
use fraclab_core::heat::{solve_linear, solve_nonlinear, HeatProblem};
use fraclab_core::inverse::{
    recover_all, relative_error_on_omega, DnOracle, FileOracle, InversionSetup, JetEstimate,
    NoiseSpec, RecordingOracle, RecoveryConfig, SyntheticOracle,
};
use fraclab_core::io;
use fraclab_core::linearize::{dn_map, dn_of_input, mixed_difference_dn, LinearizedFamily, Model};
use fraclab_core::nonlinearity::{Coefficient, PolynomialQ};
use fraclab_core::runge::{approximate, tensor_basis, ControlBasis};
use fraclab_core::spectral::ext_norm;
use fraclab_core::verify::{self, Outcome};
use fraclab_core::wave::{solve_linear_wave, solve_nonlinear_wave, WaveProblem};
use fraclab_core::{par, Error};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, OracleKind, Task};

/// Failure of a run after the configuration was accepted.
#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Module(#[from] Error),
    #[error("{failed} verification check(s) failed")]
    Verification { failed: usize },
    #[error("jet recovery stopped at order {k}: {message}")]
    Recovery {
        k: usize,
        kind: String,
        message: String,
    },
}

impl RunError {
    pub fn kind(&self) -> &str {
        match self {
            RunError::Module(e) => e.kind(),
            RunError::Verification { .. } => "VerificationFailed",
            RunError::Recovery { kind, .. } => kind,
        }
    }
}

type Result<T> = std::result::Result<T, RunError>;

/// Entry of `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    /// `solution`, `dn`, `linearize`, `runge-residuals`, `jet`, `report`, ...
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub provenance: Value,
    pub files: Vec<ManifestEntry>,
}

pub const MANIFEST: &str = "manifest.json";

/// Output staging area of one run.
pub struct Artifacts {
    out: PathBuf,
    staging: PathBuf,
    provenance: Value,
    files: Vec<ManifestEntry>,
}

impl Artifacts {
    fn new(out: &Path, provenance: Value) -> Result<Self> {
        fs::create_dir_all(out).map_err(Error::from)?;
        let staging = out.join(format!(".staging-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(Error::from)?;
        }
        fs::create_dir_all(&staging).map_err(Error::from)?;
        Ok(Self {
            out: out.to_path_buf(),
            staging,
            provenance,
            files: Vec::new(),
        })
    }

    fn path(&mut self, name: &str, kind: &str) -> PathBuf {
        self.files.push(ManifestEntry {
            path: name.to_string(),
            kind: kind.to_string(),
        });
        self.staging.join(name)
    }

    fn csv(&mut self, name: &str, kind: &str, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
        let path = self.path(name, kind);
        Ok(io::write_csv(&path, Some(&self.provenance), header, rows)?)
    }

    /// `value` with the provenance header as its first field.
    fn json<T: Serialize>(&mut self, name: &str, kind: &str, value: &T) -> Result<()> {
        let path = self.path(name, kind);
        let body = serde_json::to_value(value).map_err(Error::from)?;
        Ok(io::write_json(
            &path,
            &json!({ "provenance": self.provenance, "data": body }),
        )?)
    }

    fn text(&mut self, name: &str, kind: &str, text: &str) -> Result<()> {
        let path = self.path(name, kind);
        Ok(io::atomic_write(&path, text.as_bytes())?)
    }

    fn dn(
        &mut self,
        stem: &str,
        data: &fraclab_core::linearize::DNData,
        grid: &Grid,
    ) -> Result<()> {
        self.files.push(ManifestEntry {
            path: format!("{stem}.csv"),
            kind: "dn".into(),
        });
        let (dir, base) = split(&self.staging.join(stem));
        Ok(io::write_dn(
            &dir,
            &base,
            data,
            |i| grid.x(i),
            Some(&self.provenance),
        )?)
    }

    /// Move every staged file into place, then write the manifest.
    fn commit(self) -> Result<PathBuf> {
        move_tree(&self.staging, &self.out)?;
        fs::remove_dir_all(&self.staging).map_err(Error::from)?;
        let manifest = Manifest {
            provenance: self.provenance,
            files: self.files,
        };
        io::write_json(&self.out.join(MANIFEST), &manifest)?;
        Ok(self.out)
    }

    fn discard(self) {
        let _ = fs::remove_dir_all(&self.staging);
    }
}

fn split(path: &Path) -> (PathBuf, String) {
    (
        path.parent().map(Path::to_path_buf).unwrap_or_default(),
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
    )
}

fn move_tree(from: &Path, to: &Path) -> Result<()> {
    fs::create_dir_all(to).map_err(Error::from)?;
    let mut entries: Vec<_> = fs::read_dir(from)
        .map_err(Error::from)?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(Error::from)?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let target = to.join(entry.file_name());
        if entry.file_type().map_err(Error::from)?.is_dir() {
            move_tree(&entry.path(), &target)?;
        } else {
            fs::rename(entry.path(), &target).map_err(Error::from)?;
        }
    }
    Ok(())
}

/// Provenance header shared by every artifact of a run. It depends only on
/// the resolved configuration, never on the output location or thread count.
pub fn provenance(cfg: &ExperimentConfig, task: Task) -> Result<Value> {
    let mut hashed = cfg.clone();
    hashed.out = None;
    Ok(json!({
        "tool": "fraclab",
        "version": env!("CARGO_PKG_VERSION"),
        "core_version": fraclab_core::VERSION,
        "task": task.name(),
        "seed": cfg.seed,
        "config_hash": io::hash_json(&hashed)?,
    }))
}

/// Run `task`; on success return the output directory.
pub fn run(cfg: &ExperimentConfig, task: Task, out: &Path) -> Result<PathBuf> {
    let mut art = Artifacts::new(out, provenance(cfg, task)?)?;
    let result = match task {
        Task::SolveHeat | Task::SolveWave => solve(cfg, &mut art),
        Task::Dn => dn(cfg, &mut art),
        Task::Linearize => linearize(cfg, &mut art),
        Task::Runge => runge(cfg, &mut art),
        Task::Recover => recover(cfg, &mut art),
        Task::Verify => verify_suite(cfg, &mut art),
    };
    match result {
        // Verification and recovery failures still leave their reports.
        Ok(()) => art.commit(),
        Err(e @ (RunError::Verification { .. } | RunError::Recovery { .. })) => {
            art.commit()?;
            Err(e)
        }
        Err(e) => {
            art.discard();
            Err(e)
        }
    }
}

struct Setting {
    grid: Grid,
    tg: TimeGrid,
    op: FracOperator,
    equation: Equation,
    q: Option<PolynomialQ>,
}

fn setting(cfg: &ExperimentConfig) -> Result<Setting> {
    let grid = cfg.grid()?;
    let tg = cfg.time_grid()?;
    let model = cfg.model.as_ref().expect("validated");
    let op = FracOperator::assemble(&grid, model.s)?;
    let q = cfg
        .nonlinearity()
        .map(|spec| spec.build(&grid))
        .transpose()?;
    Ok(Setting {
        grid,
        tg,
        op,
        equation: model.equation,
        q,
    })
}

impl Setting {
    /// Forward model; without a nonlinearity the linear equation with no
    /// smallness limit.
    fn model(&self) -> Result<Model> {
        let q = self
            .q
            .clone()
            .unwrap_or_else(|| PolynomialQ::zero(2, f64::MAX));
        Ok(Model::new(&self.op, Arc::new(q), self.equation, &self.tg)?)
    }

    fn field_header(&self) -> Vec<String> {
        std::iter::once("t".to_string())
            .chain((0..self.grid.n_points).map(|i| format!("x={:?}", self.grid.x(i))))
            .collect()
    }

    fn field_rows(&self, u: &SpaceTimeField) -> Vec<Vec<f64>> {
        (0..self.tg.n_times())
            .map(|k| {
                std::iter::once(self.tg.t(k))
                    .chain(u.row(k).iter().copied())
                    .collect()
            })
            .collect()
    }
}

fn solve(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let st = setting(cfg)?;
    let sc = cfg.solve.as_ref().expect("validated");
    let input = ExteriorInput {
        terms: sc.exterior.iter().map(|b| (1.0, *b)).collect(),
    };
    let f = input.sample(&st.grid, &st.tg)?;
    let (u, trace) = match (&st.q, st.equation) {
        (Some(q), Equation::Heat) => {
            let sol = solve_nonlinear(&st.op, q, &f, &st.tg)?;
            (sol.u, Some(sol.trace))
        }
        (Some(q), Equation::Wave) => {
            let sol = solve_nonlinear_wave(&st.op, q, &f, &st.tg)?;
            (sol.u, Some(sol.trace))
        }
        (None, eq) => {
            let a = SpaceTimeField::from_fn(&st.grid, &st.tg, |_, _| sc.potential);
            let u = match eq {
                Equation::Heat => solve_linear(
                    &HeatProblem::new(&st.op)
                        .with_exterior(f.clone())
                        .with_potential(a),
                    &st.tg,
                )?,
                Equation::Wave => {
                    solve_linear_wave(
                        &WaveProblem::new(&st.op)
                            .with_exterior(f.clone())
                            .with_potential(a),
                        &st.tg,
                    )?
                    .u
                }
            };
            (u, None)
        }
    };
    art.csv("u.csv", "solution", &st.field_header(), &st.field_rows(&u))?;
    let dn = dn_map(&u, &st.op, &st.tg)?;
    art.dn("dn", &dn, &st.grid)?;
    art.json(
        "solution.json",
        "solution-meta",
        &json!({
            "equation": st.equation.name(),
            "s": st.op.s,
            "grid": st.grid,
            "time": st.tg,
            "input": input,
            "linear": st.q.is_none(),
            "picard": trace,
            "sup_norm": u.sup_norm(),
            "ext_norm": ext_norm(&f, &st.op, &st.tg)?,
            "finite": u.is_finite(),
        }),
    )
}

fn dn(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let st = setting(cfg)?;
    let model = st.model()?;
    let model_hash = io::hash_json(&(cfg.model.as_ref(), &st.grid, &st.tg))?;
    let inputs: Vec<ExteriorInput> = cfg
        .dn
        .as_ref()
        .expect("validated")
        .inputs
        .iter()
        .map(|b| ExteriorInput::single(*b))
        .collect();
    let records = par::try_map_range(inputs.len(), |j| {
        let mut d = dn_of_input(&model, &inputs[j].sample(&st.grid, &st.tg)?)?;
        d.provenance.input_hash = Some(io::hash_json(&inputs[j])?);
        d.provenance.model_hash = Some(model_hash.clone());
        Ok::<_, Error>(d)
    })?;
    let mut index = Vec::new();
    for (input, d) in inputs.iter().zip(&records) {
        let stem = d.provenance.input_hash.clone().expect("set above");
        art.dn(&format!("records/{stem}"), d, &st.grid)?;
        index.push(json!({ "record": format!("records/{stem}"), "input": input, "l2": d.l2() }));
    }
    art.json("dn.json", "dn-index", &index)
}

fn set_name(set: &[usize]) -> String {
    set.iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join("-")
}

/// Least-squares slope of `log e` against `log ε`.
fn observed_order(eps: &[f64], err: &[f64]) -> f64 {
    let xs: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
    let ys: Vec<f64> = err.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx > 0.0 {
        sxy / sxx
    } else {
        f64::NAN
    }
}

fn linearize(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let st = setting(cfg)?;
    let lc = cfg.linearize.as_ref().expect("validated");
    let model = st.model()?;
    let q = st.q.as_ref().expect("validated");
    let inputs = lc
        .inputs
        .iter()
        .map(|b| b.sample(&st.grid, &st.tg))
        .collect::<fraclab_core::Result<Vec<_>>>()?;
    let mut family = LinearizedFamily::new(&model.prop, inputs.clone())?;
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for set in &lc.sets {
        let exact = dn_map(family.ensure(&model.prop, q, set)?, &st.op, &st.tg)?;
        art.dn(&format!("lin_{}", set_name(set)), &exact, &st.grid)?;
        let errs = lc
            .epsilons
            .iter()
            .map(|&e| {
                let md = mixed_difference_dn(&model, &inputs, set, e)?;
                Ok(md.difference(&exact)?.l2() / exact.l2())
            })
            .collect::<fraclab_core::Result<Vec<f64>>>()?;
        for (e, r) in lc.epsilons.iter().zip(&errs) {
            rows.push(vec![set.len() as f64, rows.len() as f64, *e, *r]);
        }
        summary.push(json!({
            "set": set,
            "epsilons": lc.epsilons,
            "relative_errors": errs,
            "observed_order": if errs.len() > 1 { Some(observed_order(&lc.epsilons, &errs)) } else { None },
        }));
    }
    let header = ["set_size", "row", "epsilon", "relative_error"].map(String::from);
    art.csv("linearize.csv", "linearize", &header, &rows)?;
    art.json("linearize.json", "linearize-summary", &summary)
}

fn runge(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let st = setting(cfg)?;
    let rc = cfg.runge.as_ref().expect("validated");
    let potential = (!rc.potential.is_empty()).then(|| {
        SpaceTimeField::from_fn(&st.grid, &st.tg, |_, x| {
            rc.potential.iter().rev().fold(0.0, |acc, c| acc * x + c)
        })
    });
    let [ns, nt] = *rc
        .sizes
        .iter()
        .max_by_key(|s| s[0] * s[1])
        .expect("validated");
    let specs = tensor_basis(&st.op, &st.tg, ns, nt)?;
    let full = ControlBasis::assemble(&st.op, potential.as_ref(), &st.tg, specs.clone())?;
    let targets: Vec<SpaceTimeField> = rc
        .targets
        .iter()
        .map(|t| {
            SpaceTimeField::from_fn(&st.grid, &st.tg, |time, x| {
                time.powf(t.power) * (1.0 - x * x).max(0.0).powi(2) * (t.frequency * x).cos()
            })
        })
        .collect();
    let mut rows = Vec::new();
    let mut fits = Vec::new();
    for &[a, b] in &rc.sizes {
        let idx: Vec<usize> = (0..b)
            .flat_map(|jt| (0..a).map(move |js| jt * ns + js))
            .collect();
        let basis = full.subset(&idx)?;
        let approx = targets
            .iter()
            .map(|r| approximate(&st.op, &st.tg, r, &basis, rc.lambda))
            .collect::<fraclab_core::Result<Vec<_>>>()?;
        let mut row = vec![idx.len() as f64];
        row.extend(approx.iter().map(|a| a.relative_residual()));
        rows.push(row);
        fits.push(json!({ "size": [a, b], "indices": idx, "fits": approx }));
    }
    let header: Vec<String> = std::iter::once("K".to_string())
        .chain((0..targets.len()).map(|j| format!("target_{j}")))
        .collect();
    art.csv("runge_residuals.csv", "runge-residuals", &header, &rows)?;
    art.json(
        "runge.json",
        "runge-fits",
        &json!({ "basis": specs, "targets": rc.targets, "results": fits }),
    )
}

fn recover(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let st = setting(cfg)?;
    let rc = cfg.recover.as_ref().expect("validated");
    let model_cfg = cfg.model.as_ref().expect("validated");
    let setup = InversionSetup::new(&st.op, &st.tg, st.equation)?;
    let mut config = RecoveryConfig::standard(
        &st.grid,
        &st.tg,
        st.equation,
        rc.order,
        rc.tuples,
        rc.amplitude,
        rc.epsilon,
        rc.lambda,
    );
    config.time_independent = rc.time_independent;
    for oc in config.orders.iter_mut() {
        oc.lambda_rule = rc.lambda_rule;
        oc.penalty = rc.penalty;
    }
    let oracle: Box<dyn DnOracle> = match rc.oracle {
        OracleKind::Synthetic => {
            let truth = cfg.nonlinearity().expect("validated");
            let points = rc.oracle_refine * (st.grid.n_points - 1) + 1;
            let oracle_grid = cfg.grid_with(points)?;
            let mut o = SyntheticOracle::from_spec(
                truth,
                model_cfg.s,
                st.equation,
                &oracle_grid,
                &st.tg,
                &st.grid,
                &st.tg,
            )?;
            if rc.noise > 0.0 {
                o = o.with_noise(NoiseSpec {
                    sigma: rc.noise,
                    seed: cfg.seed,
                });
            }
            Box::new(o)
        }
        OracleKind::Records => Box::new(FileOracle::new(rc.records.as_ref().expect("validated"))?),
    };
    if rc.record {
        art.files.push(ManifestEntry {
            path: "records".into(),
            kind: "dn-records".into(),
        });
    }
    let est = if rc.record {
        let rec = RecordingOracle {
            inner: oracle.as_ref(),
            dir: art.staging.join("records"),
            grid: st.grid.clone(),
        };
        recover_all(&rec, &setup, &config)?
    } else {
        recover_all(oracle.as_ref(), &setup, &config)?
    };
    write_estimate(cfg, &st, &config, oracle.as_ref(), &est, art)?;
    match est.failure {
        Some(f) => Err(RunError::Recovery {
            k: f.k,
            kind: f.kind,
            message: f.message,
        }),
        None => Ok(()),
    }
}

fn write_estimate(
    cfg: &ExperimentConfig,
    st: &Setting,
    config: &RecoveryConfig,
    oracle: &dyn DnOracle,
    est: &JetEstimate,
    art: &mut Artifacts,
) -> Result<()> {
    let rc = cfg.recover.as_ref().expect("validated");
    let truth = match rc.oracle {
        OracleKind::Synthetic => st.q.as_ref(),
        OracleKind::Records => None,
    };
    let mut errors = Vec::new();
    for jet in &est.jets {
        let true_values = truth.and_then(|q| match q.coefficient(jet.k) {
            Some(Coefficient::Space(v)) => Some(v.clone()),
            _ => None,
        });
        let sensitivity = est
            .diagnostics
            .iter()
            .find(|d| d.k == jet.k)
            .map(|d| d.sensitivity.clone());
        if jet.time_independent {
            let mut header = vec!["x".to_string(), "recovered".to_string()];
            if true_values.is_some() {
                header.push("truth".into());
            }
            if sensitivity.is_some() {
                header.push("sensitivity".into());
            }
            let rows: Vec<Vec<f64>> = st
                .grid
                .omega
                .iter()
                .map(|i| {
                    let mut r = vec![st.grid.x(i), jet.values[i]];
                    r.extend(true_values.as_ref().map(|t| t[i]));
                    r.extend(sensitivity.as_ref().map(|s| s[i]));
                    r
                })
                .collect();
            art.csv(&format!("jet_c{}.csv", jet.k), "jet", &header, &rows)?;
            if let Some(t) = &true_values {
                let err = relative_error_on_omega(&jet.values, t, &st.grid);
                errors.push(json!({ "k": jet.k, "relative_l2_error": err }));
            }
        } else {
            let field = SpaceTimeField {
                n_times: st.tg.n_times(),
                n_points: st.grid.n_points,
                values: jet.values.clone(),
                support_mask: Some(st.grid.omega),
            };
            art.csv(
                &format!("jet_c{}.csv", jet.k),
                "jet-spacetime",
                &st.field_header(),
                &st.field_rows(&field),
            )?;
        }
    }
    art.json(
        "jets.json",
        "jet-estimate",
        &json!({ "oracle": oracle.describe(), "config": config, "estimate": est }),
    )?;
    let mut report = String::new();
    report.push_str(&format!("oracle: {}\n", oracle.describe()));
    for d in &est.diagnostics {
        let inv = &d.inversion;
        report.push_str(&format!(
            "c{}: eps {:.3e} ({} tuples, inverse crime: {}), lambda {:.3e} (relative {:.1e}, {:?}), \
             residual {:.3e} / data {:.3e}, rank {}/{}, condition {} (regularized {}), method {}\n",
            d.k,
            d.epsilon,
            d.n_tuples,
            d.inverse_crime,
            inv.lambda,
            inv.lambda_relative,
            inv.rule,
            inv.residual,
            inv.data_norm,
            inv.rank.map_or("n/a".to_string(), |r| r.to_string()),
            inv.n_unknowns,
            fmt_opt(inv.condition),
            fmt_opt(inv.regularized_condition),
            inv.method,
        ));
    }
    for e in &errors {
        report.push_str(&format!(
            "c{}: relative L2(omega) error against ground truth {:.4}\n",
            e["k"],
            e["relative_l2_error"].as_f64().unwrap_or(f64::NAN)
        ));
    }
    if let Some(f) = &est.failure {
        report.push_str(&format!(
            "stopped at c{}: {} ({})\n",
            f.k, f.kind, f.message
        ));
    }
    art.json(
        "diagnostics.json",
        "diagnostics",
        &json!({ "diagnostics": est.diagnostics, "errors_vs_truth": errors }),
    )?;
    art.text("report.txt", "report", &report)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".to_string(), |c| format!("{c:.3e}"))
}

fn verify_suite(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let requested = &cfg.verify.as_ref().expect("validated").sections;
    let sections: Vec<&str> = if requested.is_empty() {
        verify::SECTIONS.to_vec()
    } else {
        requested.iter().map(String::as_str).collect()
    };
    let mut outcomes: Vec<Outcome> = Vec::new();
    let mut text = String::new();
    for name in sections {
        let lines = verify::run_section(name, cfg.seed).unwrap_or_else(|e| {
            vec![Outcome {
                criterion: name.to_string(),
                label: format!("section {name} aborted"),
                measured: f64::NAN,
                bound: f64::NAN,
                at_least: false,
                passed: false,
                detail: format!("{}: {e}", e.kind()),
            }]
        });
        for o in lines {
            println!("{}", o.line());
            text.push_str(&o.line());
            text.push('\n');
            outcomes.push(o);
        }
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    text.push_str(&format!("{} checks, {failed} failed\n", outcomes.len()));
    art.text("verify.txt", "report", &text)?;
    art.json("verify.json", "verify", &outcomes)?;
    if failed > 0 {
        Err(RunError::Verification { failed })
    } else {
        Ok(())
    }
}
