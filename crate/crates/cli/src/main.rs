mod args;
mod commands;
mod output;

use std::fs::File;
use std::io::BufWriter;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;

use args::{Cli, Command};
use commands::Failure;

fn run(cli: &Cli, argv: &[String]) -> Result<ExitCode, Failure> {
    let common = cli.command.common();
    if let Some(jobs) = common.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| Failure::Config(e.to_string()))?;
    }
    let start = Instant::now();
    let outcome = match &cli.command {
        Command::Fig2(a) => commands::fig2(a),
        Command::Fig3(a) => commands::fig3(a),
        Command::Fig4(a) => commands::fig4(a),
        Command::Fig5(a) => commands::fig5(a),
        Command::LocalBound(a) => commands::local_bound(a),
        Command::Noise(a) => commands::noise(a),
        Command::SmallPhi(a) => commands::small_phi(a),
        Command::SmoothCheck(a) => commands::smooth_check(a),
        Command::Validate(a) => commands::validate(a),
        Command::Sweep(a) => commands::sweep_command(a),
    }?;

    let io = |e: std::io::Error| Failure::Config(format!("cannot write output: {e}"));
    match &common.output {
        Some(path) => {
            let file = File::create(path).map_err(io)?;
            outcome
                .table
                .write(BufWriter::new(file))
                .map_err(|e| io(e.into()))?;
            output::write_manifest(
                path,
                cli.command.name(),
                argv,
                &cli.command,
                common.seed,
                start.elapsed(),
                outcome.table.rows.len(),
            )
            .map_err(io)?;
        }
        None => outcome
            .table
            .write(std::io::stdout().lock())
            .map_err(|e| io(e.into()))?,
    }

    if outcome.unconverged.is_empty() {
        return Ok(ExitCode::SUCCESS);
    }
    eprintln!("{} point(s) did not converge:", outcome.unconverged.len());
    for p in &outcome.unconverged {
        eprintln!("  {p}");
    }
    Ok(ExitCode::from(3))
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let merged = match args::merge_config(argv.clone()) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("configuration error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(&merged) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version go to stdout with status 0; clap decides.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli, &argv) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
