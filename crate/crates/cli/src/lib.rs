//! Command-line front end for the `ddgauss` library.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod run;

pub use config::{parse_config, RunConfig};
pub use run::{run, Outcome, RunError};

/// Parses, runs and reports; returns the process exit code.
pub fn main_with_args<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    if argv.iter().any(|a| a == "--help" || a == "-h") {
        println!("{}", config::cli().render_help());
        return run::EXIT_OK;
    }
    if argv.iter().any(|a| a == "--version" || a == "-V") {
        println!("ddgauss {}", env!("CARGO_PKG_VERSION"));
        return run::EXIT_OK;
    }
    let cfg = match parse_config(argv) {
        Ok(c) => c,
        Err(errors) => {
            let v = serde_json::json!({ "error": { "kind": "validation", "messages": errors } });
            eprintln!("{v}");
            return run::EXIT_VALIDATION;
        }
    };
    match run(&cfg) {
        Ok(out) => {
            for a in &out.artifacts {
                println!("{}", a.display());
            }
            if let Some(c) = &out.check {
                println!("check {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.detail);
            }
            out.exit_code()
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
