//! `eval`.

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use vdes_core::eval::{aggregate, read_predictions_csv, render_table, runs_from_predictions, RunResult, TableRow};

use crate::fsutil;

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Test predictions: `run_id,sample_id,true_label,pred_label[,prob]`.
    #[arg(long)]
    pub preds: PathBuf,
    /// Validation predictions in the same format.
    #[arg(long)]
    pub val_preds: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Append one line per run.
    #[arg(long)]
    pub per_run: bool,
    /// Row name in the table.
    #[arg(long, default_value = "model")]
    pub name: String,
}

fn runs(path: &PathBuf) -> Result<Vec<RunResult>> {
    let preds = read_predictions_csv(fsutil::open_file(path)?).with_context(|| format!("cannot parse {}", path.display()))?;
    Ok(runs_from_predictions(&preds)?)
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let test_runs = runs(&args.preds)?;
    let val_runs = args.val_preds.as_ref().map(runs).transpose()?;
    let validation = val_runs.as_deref().map(aggregate).transpose()?;
    let row = TableRow::new(args.name.clone(), validation, aggregate(&test_runs)?)?;
    let mut text = render_table(&[row]);
    if args.per_run {
        let _ = writeln!(text, "\n# per run (test)");
        for r in &test_runs {
            let _ = writeln!(text, "run {}: acc {:.2} f1 {:.2}", r.run_id, 100.0 * r.accuracy, 100.0 * r.f1);
        }
    }
    fsutil::write_bytes(&args.out, text.as_bytes())?;
    print!("{text}");
    Ok(())
}
