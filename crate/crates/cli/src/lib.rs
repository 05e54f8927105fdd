//! Configuration-driven experiment runner.

// `!(a < b)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
mod experiments;
pub mod manifest;
pub mod report;

use std::path::{Path, PathBuf};

use spde_core::ensemble::with_threads;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::manifest::{emit_manifest, Manifest};
use crate::report::{Artifacts, Report};

/// Overrides the output directory of every run.
pub const OUT_DIR_ENV: &str = "SPDE_OUT_DIR";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{module}: {message}")]
    Numerics { module: &'static str, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    /// 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Output directory given on the command line; wins over everything else.
    pub out: Option<PathBuf>,
    /// Worker threads (0 = one per core). Never changes the results.
    pub threads: usize,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub report: Report,
    pub manifest: Manifest,
    pub out_dir: PathBuf,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

/// Flag, then environment, then the config file, then `out/<experiment>`.
pub fn resolve_out_dir(cfg: &RunConfig, flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(cfg.experiment.name()))
}

/// Validate, execute, write artifacts and the manifest.
pub fn run(cfg: &RunConfig, opts: &RunOptions) -> Result<RunOutcome, RunError> {
    cfg.validate()?;
    let out_dir = resolve_out_dir(cfg, opts.out.as_deref());
    let mut artifacts = Artifacts::new(&out_dir)?;
    let mut report = Report::default();
    let couplings = with_threads(opts.threads, || experiments::execute(cfg, &mut artifacts, &mut report))?;
    let mut manifest = Manifest::new(cfg);
    manifest.artifacts = artifacts.entries;
    manifest.couplings = couplings;
    emit_manifest(&out_dir, &manifest)?;
    Ok(RunOutcome { report, manifest, out_dir })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::read_manifest;

    fn opts(dir: &Path) -> RunOptions {
        RunOptions { out: Some(dir.to_path_buf()), threads: 1 }
    }

    #[test]
    fn empty_run_has_an_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::defaults(config::Experiment::KernelChecks);
        let path = emit_manifest(dir.path(), &Manifest::new(&cfg)).unwrap();
        let m = read_manifest(&path).unwrap();
        assert!(m.artifacts.is_empty() && m.couplings.is_empty());
        assert_eq!(m.experiment, "kernel-checks");
        assert_eq!(m.config_hash.len(), 64);
    }

    #[test]
    fn identical_runs_give_identical_manifests() {
        let cfg = RunConfig::from_toml("experiment = \"moment-report\"\nnx = 8\nnt = 32\nseeds = \"0..40\"\n").unwrap();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let first = run(&cfg, &opts(a.path())).unwrap();
        let second = run(&cfg, &RunOptions { threads: 3, ..opts(b.path()) }).unwrap();
        assert!(first.manifest.same_run(&second.manifest));
        assert!(!first.manifest.artifacts.is_empty());
        for e in &first.manifest.artifacts {
            assert_eq!(std::fs::read(a.path().join(&e.file)).unwrap(), std::fs::read(b.path().join(&e.file)).unwrap());
        }
        assert_eq!(read_manifest(&a.path().join(manifest::MANIFEST_FILE)).unwrap(), first.manifest);
        let other = RunConfig { seeds: "0..41".parse().unwrap(), ..cfg };
        assert_ne!(Manifest::new(&other).config_hash, first.manifest.config_hash);
    }

    #[test]
    fn refinement_runs_record_their_couplings() {
        let cfg = RunConfig::from_toml("experiment = \"sup-density\"\nnx = 4\nnt = 8\nseeds = \"0..120\"\n").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let outcome = run(&cfg, &opts(dir.path())).unwrap();
        let c = &outcome.manifest.couplings;
        assert_eq!(c.len(), 2);
        assert_eq!((c[0].parent, c[0].child), ([4, 8], [8, 32]));
        assert_eq!((c[1].parent, c[1].child), ([8, 32], [16, 128]));
        assert!(c.iter().all(|c| c.seeds == "0..120"));
        assert_eq!(outcome.report.checks.len(), 3);
    }

    #[test]
    fn output_directory_precedence() {
        let mut cfg = RunConfig::defaults(config::Experiment::KernelChecks);
        assert_eq!(resolve_out_dir(&cfg, None), Path::new("out/kernel-checks"));
        cfg.out = Some("from-config".into());
        assert_eq!(resolve_out_dir(&cfg, None), Path::new("from-config"));
        std::env::set_var(OUT_DIR_ENV, "from-env");
        assert_eq!(resolve_out_dir(&cfg, None), Path::new("from-env"));
        assert_eq!(resolve_out_dir(&cfg, Some(Path::new("from-flag"))), Path::new("from-flag"));
        std::env::remove_var(OUT_DIR_ENV);
    }

    #[test]
    fn exit_codes() {
        let bad = RunConfig::from_toml("experiment = \"kernel-checks\"\nnx = 1\n").unwrap_err();
        assert_eq!(RunError::from(bad).exit_code(), 2);
        assert_eq!(RunError::Numerics { module: "solver", message: String::new() }.exit_code(), 1);
    }
}
