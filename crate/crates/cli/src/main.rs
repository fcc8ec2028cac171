use clap::Parser;
use pulsecool_cli::{execute, init_logging, Cli, EXIT_CONFIG, EXIT_OK};

fn main() {
    init_logging();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match execute(&cli.command) {
        Ok(summary) => {
            log::info!("wrote {} files to {}", summary.outputs.len(), summary.out_dir.display());
        }
        Err(e) => {
            log::error!("{e}");
            std::process::exit(e.exit_code());
        }
    }
}
