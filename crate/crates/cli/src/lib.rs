//! Command-line orchestration of the mask-prior pipeline: dataset
//! generation, base segmentor training, prior training, refinement,
//! evaluation and ablations.

pub mod ablate;
pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::Command;

use crate::config::{command, Key, Resolved};
use crate::error::{CliError, CliResult};

type Runner = fn(&Resolved) -> CliResult<()>;

const SUBCOMMANDS: &[(&str, &str, &[Key], Runner)] = &[
    ("gen-data", "Generate a synthetic scene dataset", commands::GEN_DATA, commands::gen_data),
    ("train-base", "Train the base segmentor", commands::TRAIN_BASE, commands::train_base_cmd),
    ("train-prior", "Train the diffusion mask prior", commands::TRAIN_PRIOR, commands::train_prior),
    ("refine", "Refine base predictions with a trained prior", commands::REFINE, commands::refine_cmd),
    ("eval", "Score predicted label maps against ground truth", commands::EVAL, commands::eval_cmd),
    ("ablate", "Train and compare the variants of one design choice", commands::ABLATE, |r| {
        ablate::ablate(r).map(|_| ())
    }),
];

fn cli() -> Command {
    SUBCOMMANDS.iter().fold(
        Command::new("maskprior")
            .about("Diffusion mask-prior refinement for semantic segmentation")
            .subcommand_required(true)
            .arg_required_else_help(true),
        |cmd, (name, about, keys, _)| cmd.subcommand(command(name, about, keys)),
    )
}

/// Parse `argv` (program name first), write `<out>/config.resolved` and run
/// the subcommand. Help and version requests print and succeed.
pub fn dispatch<I, T>(argv: I) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match cli().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            return Err(CliError::Usage(format!("missing subcommand\n{}", cli().render_usage())));
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            return Err(CliError::Usage(first));
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let (_, _, keys, run) = SUBCOMMANDS.iter().find(|(n, ..)| *n == name).expect("registered subcommand");
    let resolved = Resolved::from_matches(name, keys, sub)?;
    resolved.write(&resolved.path("out"))?;
    run(&resolved)
}
