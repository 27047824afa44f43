//! Command-line driver for the cell search pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use nasu::cli;
use nasu::config::RunConfig;
use nasu::error::{Error, Result};

const USAGE: &str = "\
usage: nasu <command> [options]

commands:
  synth        generate the synthetic layered dataset
  preprocess   apply morphology and crop/flip augmentation
  search       run the alternating cell search
  derive       extract genotypes from a search checkpoint
  retrain      train the derived network from scratch
  eval         evaluate a retrained checkpoint on the test split
  report       build comparison tables from run directories

options:
  --config <file>    key=value run configuration
  --seed <u64>       override the configured seed
  --out <dir>        output directory (required except report default '.')
  --resume <ckpt>    resume search/retrain from a checkpoint
  --paper-faithful   apply the full-scale reference hyper-parameters

report usage: nasu report [--out <dir>] <run_dir>...

exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric divergence
";

struct Args {
    command: String,
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    resume: Option<PathBuf>,
    paper_faithful: bool,
    positional: Vec<PathBuf>,
}

fn parse_args(argv: &[String]) -> Result<Args> {
    let command = argv.first().cloned().ok_or_else(|| Error::config(format!("missing command\n{USAGE}")))?;
    let mut args = Args {
        command,
        config: None,
        seed: None,
        out: None,
        resume: None,
        paper_faithful: false,
        positional: Vec::new(),
    };
    let mut it = argv[1..].iter();
    while let Some(arg) = it.next() {
        match arg.as_str() {
            "--config" => {
                let v = it.next().ok_or_else(|| Error::config("--config requires a value"))?;
                args.config = Some(PathBuf::from(v));
            }
            "--out" => {
                let v = it.next().ok_or_else(|| Error::config("--out requires a value"))?;
                args.out = Some(PathBuf::from(v));
            }
            "--resume" => {
                let v = it.next().ok_or_else(|| Error::config("--resume requires a value"))?;
                args.resume = Some(PathBuf::from(v));
            }
            "--seed" => {
                let v = it.next().ok_or_else(|| Error::config("--seed requires a value"))?;
                args.seed = Some(v.parse().map_err(|_| Error::config(format!("invalid seed '{v}'")))?);
            }
            "--paper-faithful" => args.paper_faithful = true,
            other if other.starts_with("--") => {
                return Err(Error::config(format!("unknown flag '{other}'\n{USAGE}")));
            }
            other => args.positional.push(PathBuf::from(other)),
        }
    }
    Ok(args)
}

fn run(argv: &[String]) -> Result<()> {
    let args = parse_args(argv)?;
    if args.command == "help" || args.command == "--help" {
        print!("{USAGE}");
        return Ok(());
    }

    let mut cfg = match &args.config {
        Some(path) => RunConfig::parse_file(path)?,
        None => RunConfig::default(),
    };
    if args.paper_faithful {
        cfg.apply_paper_faithful();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }

    let require_out = || {
        args.out
            .clone()
            .ok_or_else(|| Error::config(format!("{} requires --out <dir>", args.command)))
    };

    let summary = match args.command.as_str() {
        "synth" => cli::cmd_synth(&cfg, &require_out()?)?,
        "preprocess" => cli::cmd_preprocess(&cfg, &require_out()?)?,
        "search" => cli::cmd_search(&cfg, &require_out()?, args.resume.as_deref())?,
        "derive" => cli::cmd_derive(&cfg, &require_out()?)?,
        "retrain" => cli::cmd_retrain(&cfg, &require_out()?, args.resume.as_deref())?,
        "eval" => cli::cmd_eval(&cfg, &require_out()?)?,
        "report" => {
            if args.positional.is_empty() {
                return Err(Error::config("report requires at least one run directory"));
            }
            let out = args.out.clone().unwrap_or_else(|| PathBuf::from("."));
            cli::cmd_report(&args.positional, &out)?
        }
        other => return Err(Error::config(format!("unknown command '{other}'\n{USAGE}"))),
    };
    println!("{summary}");
    Ok(())
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match run(&argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
