use std::path::PathBuf;
use std::process::ExitCode;

use handprint::commands;
use handprint::config::parse_config;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(command) = args.first().cloned() else {
        eprint!("{}", commands::usage());
        return ExitCode::from(2);
    };
    if command == "--help" || command == "-h" || command == "help" {
        print!("{}", commands::usage());
        return ExitCode::SUCCESS;
    }

    // extract --config FILE; everything else is a key override
    let mut config_file: Option<PathBuf> = None;
    let mut flags: Vec<String> = Vec::new();
    let mut i = 1;
    while i < args.len() {
        if args[i] == "--config" {
            let Some(path) = args.get(i + 1) else {
                eprintln!("config error: --config needs a path");
                return ExitCode::from(2);
            };
            config_file = Some(PathBuf::from(path));
            i += 2;
        } else if let Some(path) = args[i].strip_prefix("--config=") {
            config_file = Some(PathBuf::from(path));
            i += 1;
        } else {
            flags.push(args[i].clone());
            i += 1;
        }
    }

    let cfg = match parse_config(config_file.as_deref(), &flags) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match commands::run(&command, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
