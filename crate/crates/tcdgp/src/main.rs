use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use tcdgp::config::{build_config, CliArgs, ConfigError, SimConfig};
use tcdgp::run_scenario;

fn main() -> ExitCode {
    let cli = CliArgs::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            if let ConfigError::Cli(e) = &err {
                // clap renders its own message (also covers --help).
                e.print().ok();
                return ExitCode::from(2);
            }
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

fn execute(cli: CliArgs) -> Result<(), ConfigError> {
    let (config, seeds, notices) = build_config(cli)?;
    for notice in notices {
        eprintln!("notice: {notice}");
    }
    match seeds {
        None => run_once(config),
        Some((first, last)) => run_sweep(config, first, last),
    }
}

fn run_once(config: SimConfig) -> Result<(), ConfigError> {
    let out = config.output_path.clone();
    let format = config.output_format;
    let report = run_scenario(&config);
    report.emit(out.as_deref(), format).map_err(io_error(&out))?;
    eprintln!(
        "{} ({:.2}s wall clock)",
        report.summary_line(),
        report.runtime_seconds
    );
    Ok(())
}

/// One isolated engine per seed, fanned out over worker threads; reports are
/// written per seed and their summaries printed in seed order afterwards.
fn run_sweep(config: SimConfig, first: u64, last: u64) -> Result<(), ConfigError> {
    let seeds: Vec<u64> = (first..=last).collect();
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(seeds.len().max(1));

    let mut summaries: Vec<(u64, Result<String, String>)> = Vec::with_capacity(seeds.len());
    for chunk in seeds.chunks(workers) {
        let handles: Vec<_> = chunk
            .iter()
            .map(|&seed| {
                let mut run_config = config.clone();
                run_config.seed = seed;
                run_config.output_path = config
                    .output_path
                    .as_ref()
                    .map(|path| seed_suffixed_path(path, seed));
                std::thread::spawn(move || {
                    let out = run_config.output_path.clone();
                    let format = run_config.output_format;
                    let report = run_scenario(&run_config);
                    // Without --out a sweep prints summaries only; full
                    // reports from parallel runs would interleave.
                    if let Some(path) = &out {
                        if let Err(e) = report.emit(Some(path), format) {
                            return (seed, Err(format!("cannot write {}: {e}", path.display())));
                        }
                    }
                    (seed, Ok(report.summary_line()))
                })
            })
            .collect();
        for handle in handles {
            summaries.push(handle.join().expect("worker thread panicked"));
        }
    }

    summaries.sort_by_key(|(seed, _)| *seed);
    let mut failed = None;
    for (seed, outcome) in summaries {
        match outcome {
            Ok(line) => println!("{line}"),
            Err(msg) => {
                eprintln!("error: seed {seed}: {msg}");
                failed = Some(seed);
            }
        }
    }
    match failed {
        None => Ok(()),
        Some(_) => Err(ConfigError::InvalidValue {
            field: "out",
            reason: "one or more sweep reports could not be written".into(),
        }),
    }
}

fn seed_suffixed_path(path: &std::path::Path, seed: u64) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let ext = path.extension().and_then(|s| s.to_str());
    let name = match ext {
        Some(ext) => format!("{stem}-seed{seed}.{ext}"),
        None => format!("{stem}-seed{seed}"),
    };
    path.with_file_name(name)
}

fn io_error(path: &Option<PathBuf>) -> impl Fn(std::io::Error) -> ConfigError + '_ {
    move |source| ConfigError::Io {
        path: path.clone().unwrap_or_else(|| PathBuf::from("<stdout>")),
        source,
    }
}
