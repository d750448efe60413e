use segkit::gradcheck::{run_suite, Suite, TOLERANCE};

use super::{create_dir, write_text};
use crate::error::{CliError, CliResult};
use crate::record::Recorder;
use crate::GradcheckArgs;

pub fn gradcheck(a: GradcheckArgs, argv: Vec<String>) -> CliResult<()> {
    let suite: Suite = a.module.parse()?;
    let outcomes = run_suite(suite, a.broken.as_deref())?;
    let mut table = String::from("op\ttrials\tcoords\tworst_rel_error\tstatus\n");
    for o in &outcomes {
        let status = if o.passed() { "ok" } else { "FAIL" };
        println!("{:<24} {:>3} trials {:>6} coords  worst {:.3e}  {status}", o.op, o.trials, o.coords_checked, o.worst_rel_error);
        table.push_str(&format!("{}\t{}\t{}\t{:e}\t{status}\n", o.op, o.trials, o.coords_checked, o.worst_rel_error));
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_text(&out.join("gradcheck.tsv"), &table)?;
        let mut rec = Recorder::new("gradcheck", argv, out, true);
        rec.output_tree()?;
        rec.finish()?;
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.op.as_str()).collect();
    if failed.is_empty() {
        println!("all {} ops within relative error {TOLERANCE:e}", outcomes.len());
        Ok(())
    } else {
        Err(CliError::check(format!("gradient check failed for: {}", failed.join(", "))))
    }
}
