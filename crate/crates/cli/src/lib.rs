//! Command-line harness: dataset generation, reference solvers, training and
//! evaluation, each writing a reproducible run directory.

pub mod commands;
pub mod error;
pub mod output;
pub mod settings;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::Parser;

use crate::error::{CliError, Result};
use crate::output::{output_dir, Manifest, Staging, MANIFEST};
use crate::settings::{resolve, Cli, Command, RunConfig};

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli) {
        Ok(dir) => {
            println!("wrote {}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<PathBuf> {
    let (run, default_name) = match cli.command {
        Command::Rerun(a) => {
            let manifest = Manifest::load(&a.manifest)?;
            let name = format!("{}-rerun", manifest.run.default_dir_name());
            (manifest.run, name)
        }
        command => {
            let mut run = resolve(command, cli.config.as_deref())?.expect("non-rerun command");
            canonicalize_inputs(&mut run)?;
            let name = run.default_dir_name();
            (run, name)
        }
    };
    let target = output_dir(cli.out.as_deref(), &default_name);
    let workers = match cli.workers {
        Some(0) => return Err(CliError::Usage("--workers must be at least 1".into())),
        Some(w) => w,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let staging = Staging::new(&target, cli.force)?;
    let files = pool.install(|| commands::execute(&run, &staging))?;
    staging.write_json(MANIFEST, &Manifest::new(run, workers, &files))?;
    staging.commit()
}

fn canonical(path: &Path) -> Result<PathBuf> {
    path.canonicalize().map_err(|e| CliError::io(path, e))
}

fn canonicalize_inputs(run: &mut RunConfig) -> Result<()> {
    match run {
        RunConfig::Solve(s) => s.dataset = canonical(&s.dataset)?,
        RunConfig::Eval(e) => {
            e.dataset = canonical(&e.dataset)?;
            if let Some(c) = &mut e.checkpoint {
                *c = canonical(c)?;
            }
        }
        RunConfig::Generate(_) | RunConfig::Train(_) => {}
    }
    Ok(())
}
