use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use pegbench::bench::{localize_csv, write_snapshot, Bench};
use pegbench::collector::{read_dataset, write_dataset};
use pegbench::config::BenchConfig;
use pegbench::regressor::{load_params, save_params, ModelParams};
use pegbench::Error;

/// Peg-in-hole insertion benchmark.
#[derive(Parser)]
#[command(name = "pegbench", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// JSON config; defaults are used for anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file; a `<out>.config.json` snapshot is written next to it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Trials per evaluated condition (offsets for localize-demo).
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Backward data collection on the configured task.
    Collect,
    /// Train a policy (collects first unless --data is given).
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Headline evaluation.
    Eval {
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Success rate against training-set size.
    Curve {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Location, color and shape generalization.
    Generalize {
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Fine-tuning versus training from scratch on a new task.
    Transfer {
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Localize a multi-socket board, then insert every plug.
    Assembly {
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Localization from random board displacements.
    LocalizeDemo,
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::Collect => "collect",
            Cmd::Train { .. } => "train",
            Cmd::Eval { .. } => "eval",
            Cmd::Curve { .. } => "curve",
            Cmd::Generalize { .. } => "generalize",
            Cmd::Transfer { .. } => "transfer",
            Cmd::Assembly { .. } => "assembly",
            Cmd::LocalizeDemo => "localize-demo",
        }
    }

    fn default_out(&self) -> &'static str {
        match self {
            Cmd::Collect => "dataset.bin",
            Cmd::Train { .. } => "params.bin",
            Cmd::Eval { .. } => "eval.csv",
            Cmd::Curve { .. } => "curve.csv",
            Cmd::Generalize { .. } => "generalize.csv",
            Cmd::Transfer { .. } => "transfer.csv",
            Cmd::Assembly { .. } => "assembly.csv",
            Cmd::LocalizeDemo => "localize.csv",
        }
    }
}

fn load_config(cli: &Cli) -> Result<BenchConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => BenchConfig::load(p)?,
        None => BenchConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(n) = cli.trials {
        if n == 0 {
            return Err(Error::Config("--trials must be at least 1".into()));
        }
        cfg.eval.trials = n;
        cfg.curve.trials = n;
        cfg.generalize.trials = n;
        cfg.transfer.trials = n;
    }
    Ok(cfg)
}

fn params_arg(p: &Option<PathBuf>) -> Result<Option<ModelParams>, Error> {
    p.as_deref().map(load_params).transpose().map_err(Error::from)
}

fn inputs(paths: &[(&str, &Option<PathBuf>)]) -> serde_json::Value {
    let mut m = serde_json::Map::new();
    for (k, v) in paths {
        if let Some(p) = v {
            m.insert((*k).into(), json!(p.display().to_string()));
        }
    }
    serde_json::Value::Object(m)
}

fn snapshot(cmd: &str, cfg: &BenchConfig, inputs: serde_json::Value) -> serde_json::Value {
    json!({ "command": cmd, "inputs": inputs, "config": cfg })
}

fn run(cli: Cli) -> Result<PathBuf, Error> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let cfg = load_config(&cli)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(cli.cmd.default_out()));
    let bench = Bench::new(cfg)?;
    let cfg = &bench.cfg;
    let name = cli.cmd.name();
    let read = |p: &Path| read_dataset(p).map_err(Error::from);
    match &cli.cmd {
        Cmd::Collect => {
            let data = bench.collect(&cfg.task)?;
            write_dataset(&data, &out)?;
            write_snapshot(&out, &snapshot(name, cfg, inputs(&[])))?;
            eprintln!("{} samples from {} trials", data.len(), cfg.collect.n_p);
        }
        Cmd::Train { data } => {
            let d = match data {
                Some(p) => read(p)?,
                None => bench.collect(&cfg.task)?,
            };
            let (params, losses) = bench.train_with_curve(&d)?;
            save_params(&params, &out)?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in losses.iter().enumerate() {
                csv.push_str(&format!("{i},{l:.6}\n"));
            }
            let mut loss_path = out.clone().into_os_string();
            loss_path.push(".loss.csv");
            std::fs::write(loss_path, csv)?;
            write_snapshot(&out, &snapshot(name, cfg, inputs(&[("data", data)])))?;
            eprintln!("trained on {} samples, final loss {:.6}", d.len(), losses.last().copied().unwrap_or(0.0));
        }
        Cmd::Eval { params, data } => {
            let (p, n) = match params_arg(params)? {
                Some(p) => (p, None),
                None => {
                    let d = match data {
                        Some(path) => read(path)?,
                        None => bench.collect(&cfg.task)?,
                    };
                    (bench.train(&d, true)?, Some(d.len()))
                }
            };
            let mut r = bench.eval(&p, n)?;
            r.config = snapshot(name, cfg, inputs(&[("params", params), ("data", data)]));
            r.write(&out)?;
            eprint!("{}", r.to_csv());
        }
        Cmd::Curve { data } => {
            let d = data.as_deref().map(read).transpose()?;
            let mut r = bench.curve(d)?;
            r.config = snapshot(name, cfg, inputs(&[("data", data)]));
            r.write(&out)?;
        }
        Cmd::Generalize { params } => {
            let mut r = bench.generalize(params_arg(params)?)?;
            r.config = snapshot(name, cfg, inputs(&[("params", params)]));
            r.write(&out)?;
        }
        Cmd::Transfer { params } => {
            let mut r = bench.transfer(params_arg(params)?)?;
            r.config = snapshot(name, cfg, inputs(&[("params", params)]));
            r.write(&out)?;
        }
        Cmd::Assembly { params } => {
            let mut r = bench.assembly(params_arg(params)?)?;
            r.config = snapshot(name, cfg, inputs(&[("params", params)]));
            r.write(&out)?;
        }
        Cmd::LocalizeDemo => {
            let rows = bench.localize_demo(cli.trials.unwrap_or(20))?;
            std::fs::write(&out, localize_csv(&rows))?;
            let mut s = snapshot(name, cfg, inputs(&[]));
            s["offsets"] = json!(rows.len());
            write_snapshot(&out, &s)?;
        }
    }
    Ok(out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(out) => {
            eprintln!("wrote {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
