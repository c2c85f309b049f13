mod args;
mod commands;
mod config;

use std::fmt;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, FromArgMatches};

use args::Cli;

/// Invalid flag or config combination detected by the CLI itself.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Category {
    Usage,
    Input,
    Runtime,
}

impl Category {
    fn name(self) -> &'static str {
        match self {
            Category::Usage => "usage",
            Category::Input => "input",
            Category::Runtime => "runtime",
        }
    }

    fn code(self) -> u8 {
        match self {
            Category::Usage => 2,
            Category::Input => 3,
            Category::Runtime => 4,
        }
    }
}

fn classify(err: &anyhow::Error) -> Category {
    use clipit_core::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return Category::Usage;
        }
        if cause.is::<toml::de::Error>() || cause.is::<std::io::Error>() {
            return Category::Input;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::ConfigInvalid(_) | E::RankExceedsCorpus { .. } | E::InvalidPValue(_) => Category::Usage,
                E::NonFiniteLoss | E::NonFinite(_) | E::ZeroVector | E::InvalidDistribution { .. } => {
                    Category::Runtime
                }
                _ => Category::Input,
            };
        }
    }
    Category::Runtime
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(Category::Usage.code());
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error[usage]: {}", one_line(&e.to_string()));
            return ExitCode::from(Category::Usage.code());
        }
    };
    match commands::run(&cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = classify(&e);
            eprintln!("error[{}]: {}", cat.name(), one_line(&format!("{e:#}")));
            ExitCode::from(cat.code())
        }
    }
}
