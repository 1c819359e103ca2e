//! Run artifacts and sweep wrapping: execute a configured scenario into a run
//! directory (report.json, terms.csv, manifest.json) and drive convergence
//! studies from configs carrying a [sweep] table.
//!
//! Outputs are deterministic functions of (config, seed): worlds are keyed by
//! (seed, world index), aggregation is a pure reduction, and serialization
//! preserves field order, so bytes do not depend on the worker count.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{EngineError, Result};
use crate::scenario::{execute, Formula, RunOutcome, ScenarioConfig};
use crate::verifier::report::{ConvergenceResult, VerificationReport};
use crate::verifier::sweep::convergence_study;

/// Paths and outcome of one materialized run.
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub report_path: PathBuf,
    pub terms_path: Option<PathBuf>,
    pub manifest_path: PathBuf,
    pub report: VerificationReport,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Serialize)]
struct EngineInfo {
    name: &'static str,
    version: &'static str,
}

#[derive(Serialize)]
struct Manifest<'a> {
    name: &'a str,
    formula: &'a str,
    mode: &'a str,
    seed: u64,
    threshold: f64,
    engine: EngineInfo,
    /// Exact echo of the executed config (TOML); re-parses to an equivalent
    /// ScenarioConfig.
    config: String,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

/// Run inside a dedicated thread pool when a worker count is given;
/// results are identical at any pool size.
pub fn execute_with_workers(cfg: &ScenarioConfig, workers: Option<usize>) -> Result<RunOutcome> {
    match workers {
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w.max(1))
                .build()
                .map_err(|e| EngineError::Config(format!("worker pool: {e}")))?;
            pool.install(|| execute(cfg))
        }
        None => execute(cfg),
    }
}

/// Execute a config and materialize report.json, terms.csv and manifest.json
/// in the run directory (precedence: `out_dir` argument, then `output.dir`
/// in the config, then `runs/<name>-<formula>`).
pub fn run_to_dir(
    cfg: &ScenarioConfig,
    out_dir: Option<&Path>,
    workers: Option<usize>,
) -> Result<RunArtifacts> {
    let outcome = execute_with_workers(cfg, workers)?;
    let dir: PathBuf = match out_dir {
        Some(d) => d.to_path_buf(),
        None => match &cfg.output.dir {
            Some(d) => PathBuf::from(d),
            None => PathBuf::from("runs").join(format!("{}-{}", cfg.name, cfg.formula)),
        },
    };
    fs::create_dir_all(&dir)?;

    let report_path = dir.join("report.json");
    let mut report_json = serde_json::to_string_pretty(&outcome.report)
        .map_err(|e| EngineError::Config(format!("report serialization: {e}")))?;
    report_json.push('\n');
    write_atomic(&report_path, report_json.as_bytes())?;

    let terms_path = match &outcome.curves {
        Some(curves) => {
            let p = dir.join("terms.csv");
            let mut buf = Vec::new();
            curves.write_csv(&mut buf)?;
            write_atomic(&p, &buf)?;
            Some(p)
        }
        None => None,
    };

    let manifest_path = dir.join("manifest.json");
    let manifest = Manifest {
        name: &cfg.name,
        formula: &outcome.report.formula,
        mode: &outcome.report.mode,
        seed: cfg.seed,
        threshold: outcome.threshold,
        engine: EngineInfo {
            name: "iwl-core",
            version: env!("CARGO_PKG_VERSION"),
        },
        config: toml::to_string(cfg)
            .map_err(|e| EngineError::Config(format!("config echo: {e}")))?,
    };
    let mut manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| EngineError::Config(format!("manifest serialization: {e}")))?;
    manifest_json.push('\n');
    write_atomic(&manifest_path, manifest_json.as_bytes())?;

    let pass = outcome.report.pass.unwrap_or(false);
    Ok(RunArtifacts {
        dir,
        report_path,
        terms_path,
        manifest_path,
        report: outcome.report,
        threshold: outcome.threshold,
        pass,
    })
}

/// Outcome of a config-driven convergence study.
#[derive(Debug)]
pub struct SweepArtifacts {
    pub result: ConvergenceResult,
    /// False only when the config pinned slope bounds and the fit violates them.
    pub pass: bool,
    pub path: Option<PathBuf>,
}

/// Run the convergence study described by the config's [sweep] table and,
/// when an output directory resolves, write sweep.json there.
pub fn run_sweep(
    cfg: &ScenarioConfig,
    out_dir: Option<&Path>,
    workers: Option<usize>,
) -> Result<SweepArtifacts> {
    let sweep = cfg.sweep.as_ref().ok_or_else(|| {
        EngineError::Config("sweep needs a [sweep] table in the config".into())
    })?;
    // Formula validation up front so level runs cannot half-succeed.
    Formula::parse(&cfg.formula)?;
    let span = cfg.sizes.t_end - cfg.sizes.t_start;

    // Per level: the x-value used in the fit and the modified config.
    let mut xs = Vec::with_capacity(sweep.levels.len());
    let mut configs = Vec::with_capacity(sweep.levels.len());
    for &level in &sweep.levels {
        if !(level > 0.0) || !level.is_finite() {
            return Err(EngineError::Config(
                "sweep.levels must be positive and finite".into(),
            ));
        }
        let mut c = cfg.clone();
        match sweep.parameter.as_str() {
            "dt" => {
                let n_steps = level.round() as usize;
                c.sizes.n_steps = n_steps.max(1);
                xs.push(span / c.sizes.n_steps as f64);
            }
            "n_particles" => {
                c.sizes.n_particles = level.round() as usize;
                xs.push(level.round());
            }
            "n_worlds" => {
                c.sizes.n_worlds = level.round() as usize;
                xs.push(level.round());
            }
            other => {
                return Err(EngineError::Config(format!(
                    "sweep.parameter '{other}' must be dt|n_particles|n_worlds"
                )))
            }
        }
        configs.push(c);
    }

    let se_aggregate = sweep.parameter == "n_worlds";
    let mut idx = 0usize;
    let result = convergence_study(sweep.parameter.clone(), &xs, |_x| {
        let level_cfg = &configs[idx];
        idx += 1;
        let outcome = execute_with_workers(level_cfg, workers)?;
        if se_aggregate {
            Ok(outcome.report.se)
        } else {
            let residuals: Vec<f64> = outcome
                .report
                .breakdowns
                .iter()
                .map(|b| b.residual())
                .collect();
            Ok(crate::stats::rms(&residuals))
        }
    })?;

    let pass = sweep.slope_min.map_or(true, |lo| result.slope >= lo)
        && sweep.slope_max.map_or(true, |hi| result.slope <= hi);

    let dir: Option<PathBuf> = match out_dir {
        Some(d) => Some(d.to_path_buf()),
        None => cfg.output.dir.as_ref().map(PathBuf::from),
    };
    let path = match dir {
        Some(d) => {
            fs::create_dir_all(&d)?;
            let p = d.join("sweep.json");
            let mut json = serde_json::to_string_pretty(&result)
                .map_err(|e| EngineError::Config(format!("sweep serialization: {e}")))?;
            json.push('\n');
            write_atomic(&p, json.as_bytes())?;
            Some(p)
        }
        None => None,
    };
    Ok(SweepArtifacts { result, pass, path })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::parse_config;

    fn temp_dir(tag: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("iwl-runner-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&d);
        d
    }

    const CONFIG: &str = r#"
name = "bm-second-moment"
formula = "thm3"
mode = "mc-law"
seed = 9

[dynamics]
template = "bm"

[field]
f0 = [{ psi = "second-moment" }]

[sizes]
n_steps = 30
n_particles = 40
n_worlds = 6
n_tilde = 40
"#;

    #[test]
    fn run_writes_all_artifacts_and_is_deterministic() {
        let cfg = parse_config(CONFIG).unwrap();
        let d1 = temp_dir("a");
        let d2 = temp_dir("b");
        let a = run_to_dir(&cfg, Some(&d1), Some(1)).unwrap();
        let b = run_to_dir(&cfg, Some(&d2), Some(4)).unwrap();
        for (x, y) in [
            (&a.report_path, &b.report_path),
            (a.terms_path.as_ref().unwrap(), b.terms_path.as_ref().unwrap()),
            (&a.manifest_path, &b.manifest_path),
        ] {
            let bx = fs::read(x).unwrap();
            let by = fs::read(y).unwrap();
            assert!(!bx.is_empty());
            assert_eq!(bx, by, "{} differs across worker counts", x.display());
        }
        let _ = fs::remove_dir_all(&d1);
        let _ = fs::remove_dir_all(&d2);
    }

    #[test]
    fn manifest_config_echo_reparses() {
        let cfg = parse_config(CONFIG).unwrap();
        let d = temp_dir("echo");
        let a = run_to_dir(&cfg, Some(&d), None).unwrap();
        let manifest: serde_json::Value =
            serde_json::from_slice(&fs::read(&a.manifest_path).unwrap()).unwrap();
        let echoed = manifest["config"].as_str().unwrap();
        let reparsed = parse_config(echoed).unwrap();
        assert_eq!(toml::to_string(&reparsed).unwrap(), echoed);
        let _ = fs::remove_dir_all(&d);
    }

    #[test]
    fn sweep_config_fits_clt_slope() {
        let text = format!(
            "{CONFIG}\n[sweep]\nparameter = \"n_worlds\"\nlevels = [8, 64, 512]\nslope_min = -0.65\nslope_max = -0.35\n"
        );
        let cfg = parse_config(&text).unwrap();
        let out = run_sweep(&cfg, None, None).unwrap();
        assert!(out.pass, "slope {}", out.result.slope);
        assert!(out.path.is_none());
    }

    #[test]
    fn sweep_without_table_is_a_config_error() {
        let cfg = parse_config(CONFIG).unwrap();
        assert!(matches!(
            run_sweep(&cfg, None, None).unwrap_err(),
            EngineError::Config(_)
        ));
    }
}
