use clap::Parser;
use pvadv_cli::{Cli, dispatch, exit_code, merge_config_into_args};

fn main() {
    let argv: Vec<String> = std::env::args().collect();
    let argv = match merge_config_into_args(argv) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            // clap handles help/version printing; usage errors exit 2
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = dispatch(&cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
