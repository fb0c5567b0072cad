//! `gradcheck`: verify reverse-mode gradients against central differences.

use anyhow::Result;
use clap::Args;

use super::NumericalFailure;
use crate::gradcheck::{check_loss, check_ops, LOSS_TOL, OPS_TOL};

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Check only the per-primitive gradients, skipping the full-objective
    /// parameter sweep
    #[arg(long)]
    pub quick: bool,
}

pub fn run(args: &GradcheckArgs, seed: u64) -> Result<()> {
    let checks = check_ops(seed)?;
    let mut failed = Vec::new();
    for c in &checks {
        let verdict = if c.max_rel < OPS_TOL { "ok" } else { "FAIL" };
        println!("{:<18} max rel {:.3e}  {verdict}", c.name, c.max_rel);
        if c.max_rel >= OPS_TOL {
            failed.push(c.name);
        }
    }
    if !failed.is_empty() {
        return Err(NumericalFailure(format!(
            "primitive gradients exceed {OPS_TOL:e}: {failed:?}"
        ))
        .into());
    }
    println!("{} primitives within {OPS_TOL:e}", checks.len());

    if args.quick {
        return Ok(());
    }

    println!("sweeping the full objective over every parameter...");
    let loss = check_loss(seed)?;
    println!(
        "objective: worst rel {:.3e} over {} coordinates",
        loss.worst_rel, loss.checked
    );
    if loss.worst_rel >= LOSS_TOL {
        return Err(NumericalFailure(format!(
            "objective gradient error {:.3e} exceeds {LOSS_TOL:e}",
            loss.worst_rel
        ))
        .into());
    }
    println!("objective gradients within {LOSS_TOL:e}");
    Ok(())
}
