use std::process::ExitCode;

use anyhow::{anyhow, Context};
use onglab::cli::{self, known_keys};
use onglab::metrics::percent;

const USAGE: &str = "usage: onglab [--config FILE] [--key value ...]

Runs continual-learning experiments and writes one result directory per
(variant, seed) under --out (default $ONGLAB_OUT, else ./results).

examples:
  onglab --benchmark synthetic --tasks 2 --variant sgd
  onglab --benchmark permuted --tasks 5 --variant ogd,ogd+,ong --seed 0,1,2 \\
         --train-subset 5000 --mnist-images train-images-idx3-ubyte.gz \\
         --mnist-labels train-labels-idx1-ubyte.gz";

fn tagged(e: onglab::Error) -> anyhow::Error {
    anyhow!("[{}] {e}", e.module_tag())
}

fn try_main() -> anyhow::Result<ExitCode> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--help" || a == "-h") {
        println!("{USAGE}\n\nkeys: {}", known_keys().join(", "));
        return Ok(ExitCode::SUCCESS);
    }
    let config = cli::parse_args(&args).map_err(tagged).context("invalid configuration")?;
    eprintln!(
        "running {} benchmark, {} task(s), {} run(s) into {}",
        config.benchmark,
        config.tasks,
        config.variants.len() * config.seeds.len(),
        config.out.display()
    );
    let outcomes = cli::run(&config).map_err(tagged).context("experiment failed")?;
    print!("{}", cli::format_summary(&outcomes));
    if config.seeds.len() > 1 {
        for (variant, (am, asd, fm, fsd)) in cli::aggregate(&outcomes) {
            println!(
                "{variant:<8} mean over seeds: accuracy {} ± {}  forgetting {} ± {}",
                percent(am),
                percent(asd),
                percent(fm),
                percent(fsd)
            );
        }
    }
    let failed: Vec<_> = outcomes.iter().filter_map(|o| o.error.as_ref().map(|e| (o, e))).collect();
    for (o, e) in &failed {
        eprintln!("run {} seed {} failed: {e} (partial results in {})", o.variant, o.seed, o.dir.display());
    }
    Ok(if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn main() -> ExitCode {
    match try_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
