use std::io::Write;

use clap::Args;
use ucoh_core::verify::{run_suite, VerifyOptions, VerifyReport};
use ucoh_tensor::Precision;

use crate::{say, CliError, CliResult};

#[derive(Clone, Debug, Default, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run the gradient check with single-precision finite differences.
    #[arg(long)]
    pub reduced_precision: bool,
    /// Skip the kernel softmax; the kernel check must then fail.
    #[arg(long)]
    pub corrupt_softmax: bool,
}

pub fn cmd_verify(args: &VerifyArgs, out: &mut dyn Write) -> CliResult<VerifyReport> {
    let report = run_suite(&VerifyOptions {
        seed: args.seed,
        precision: if args.reduced_precision { Precision::F32 } else { Precision::F64 },
        corrupt_softmax: args.corrupt_softmax,
    });
    for c in &report.checks {
        say(out, format!("{} {:<26} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail))?;
    }
    if report.passed() {
        say(out, "all checks passed")?;
        Ok(report)
    } else {
        Err(CliError::Verify(report.failed().into_iter().map(String::from).collect()))
    }
}
