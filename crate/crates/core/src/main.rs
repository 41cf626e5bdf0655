use clap::Parser;
use dgp::cli::{run, write_report, Cli};

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let code = match run(&cli).and_then(|r| write_report(&r, cli.report.as_deref()).map_err(Into::into)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("dgp: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}
