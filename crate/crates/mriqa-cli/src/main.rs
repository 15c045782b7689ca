mod args;
mod commands;

use clap::Parser;
use mriqa::error::Error;

fn main() {
    std::process::exit(run());
}

/// Exit codes: 0 success, 1 usage, 2 I/O, 3 data/format.
fn run() -> i32 {
    let cli = match args::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };

    let threads = if cli.deterministic {
        Some(1)
    } else {
        cli.threads
    };
    if let Some(n) = threads {
        // ignore failure: the pool can only be initialized once
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }

    match dispatch(&cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!(
                "{}",
                serde_json::json!({ "error": err.to_string(), "kind": err.kind() })
            );
            match err {
                Error::Io { .. } => 2,
                _ => 3,
            }
        }
    }
}

fn dispatch(cli: &args::Cli) -> mriqa::Result<()> {
    let ctx = commands::build_ctx(cli)?;
    match &cli.command {
        args::Command::Mask(a) => commands::run_mask(&ctx, a),
        args::Command::Synth(a) => commands::run_synth(&ctx, a),
        args::Command::Train(a) => commands::run_train(&ctx, a),
        args::Command::Score(a) => commands::run_score(&ctx, a, cli.seed),
        args::Command::Eval(a) => commands::run_eval(&ctx, a, cli.seed),
        args::Command::Info(a) => commands::run_info(a),
    }
}
