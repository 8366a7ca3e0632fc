use std::path::PathBuf;

use clap::Args;
use lwm_core::model::{check_model_gradients, ModelConfig};
use lwm_core::tensor::GradCheckConfig;
use serde_json::json;

use crate::config::resolve_seed;
use crate::error::{CliError, CliResult};
use crate::manifest::{ensure_writable, sidecar, write_atomic, RunManifest};

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Optional JSON report (a manifest is written next to it).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

pub fn run(args: &GradcheckArgs, argv: &[String]) -> CliResult<()> {
    let seed = resolve_seed(args.seed, None)?;
    let model = ModelConfig::micro();
    let gc = GradCheckConfig::default();
    if let Some(out) = &args.out {
        ensure_writable(&[out.clone(), sidecar(out, "manifest.json")], args.force)?;
    }
    let r = check_model_gradients(&model, seed, &gc)?;
    let verdict = if r.passed { "pass" } else { "FAIL" };
    println!(
        "gradcheck {verdict}: max relative error {:.3e} over {} parameters (tolerance {:.0e})",
        r.max_rel_error, r.checked, r.tol
    );
    if let Some(out) = &args.out {
        let report = json!({
            "max_rel_error": r.max_rel_error,
            "worst": r.worst,
            "checked": r.checked,
            "tol": r.tol,
            "passed": r.passed,
        });
        write_atomic(out, serde_json::to_string_pretty(&report)?.as_bytes())?;
        let mut m = RunManifest::new(
            "gradcheck",
            argv,
            seed,
            &json!({ "model": model, "step": gc.step, "floor": gc.floor, "tol": gc.tol }),
        )?;
        m.output(out)?;
        m.write(&sidecar(out, "manifest.json"))?;
    }
    if r.passed {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "max relative error {:.3e} ≥ {:.0e}",
            r.max_rel_error, r.tol
        )))
    }
}
