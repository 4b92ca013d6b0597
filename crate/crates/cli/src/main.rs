use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use moe_operator::autodiff::{default_shapes, grad_check, grad_check_all, OpKind};
use moe_operator::checkpoint::{inspect, load_checkpoint, save_checkpoint, Checkpoint};
use moe_operator::data::{read_dataset, write_dataset, write_meta, Dataset, DatasetSchema, Dtype, Family, GenSpec, Trajectory};
use moe_operator::model::rollout;
use moe_operator::tensor::Tensor;
use moe_operator::train::{
    prepare_dataset, train_epochs, EpochMetrics, RunConfig, TrainState, METRICS_HEADER,
};
use moe_operator::{Error, Result};

#[derive(Parser)]
#[command(name = "moe-op", version, about = "Nested mixture-of-experts neural operator for PDE fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a trajectory dataset from a JSON recipe.
    GenData {
        #[arg(long)]
        family: Family,
        /// JSON with `template`, `count` and `seed`.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "f32")]
        dtype: DtypeArg,
    },
    /// Train from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stop after this many epochs (the checkpoint can be resumed).
        #[arg(long)]
        until: Option<usize>,
    },
    /// One-step and rollout L2RE with the persistence baseline.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        data: Vec<PathBuf>,
        #[arg(long, default_value_t = 1)]
        rollout: usize,
        #[arg(long)]
        report_routing: bool,
        /// Datasets carry a trailing mask channel.
        #[arg(long)]
        mask: bool,
    },
    /// Autoregressive rollout from each trajectory's first window.
    Rollout {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        dump: PathBuf,
        #[arg(long)]
        mask: bool,
    },
    /// Image-level expert usage per family as CSV.
    RoutingStats {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        mask: bool,
    },
    /// Finite-difference check of registered op adjoints.
    GradCheck {
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Print a checkpoint's header summary.
    InspectCkpt { path: PathBuf },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::GenData {
            family,
            spec,
            out,
            dtype,
        } => {
            let mut recipe: GenSpec = serde_json::from_str(&read_text(&spec)?)?;
            recipe.template.family = family;
            let ds = recipe.generate()?;
            let dtype = match dtype {
                DtypeArg::F32 => Dtype::F32,
                DtypeArg::F64 => Dtype::F64,
            };
            write_dataset(&out, &ds, dtype)?;
            write_meta(&out, &recipe)?;
            println!(
                "wrote {} {} trajectories of {:?} to {}",
                ds.trajectories.len(),
                family.name(),
                ds.dims,
                out.display()
            );
        }
        Command::Train { config, out, until } => train(&config, &out, until)?,
        Command::Eval {
            ckpt,
            data,
            rollout,
            report_routing,
            mask,
        } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let data = load_for(&ckpt, &data, mask)?;
            let report = moe_operator::train::evaluate(&ckpt.params, &ckpt.config, &data, rollout)?;
            println!("samples: {}", report.samples);
            println!("one_step_l2re: {}", report.one_step_l2re);
            println!("persistence_l2re: {}", report.persistence_l2re);
            for (s, v) in report.rollout_l2re.iter().enumerate() {
                println!("rollout_l2re[{}]: {v}", s + 1);
            }
            for f in &report.families {
                println!(
                    "{}: one_step {} persistence {} ({} samples)",
                    f.family.name(),
                    f.one_step_l2re,
                    f.persistence_l2re,
                    f.samples
                );
            }
            if report_routing {
                print_routing(&report.routing_report());
            }
        }
        Command::Rollout {
            ckpt,
            data,
            steps,
            dump,
            mask,
        } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let ds = load_for(&ckpt, std::slice::from_ref(&data), mask)?.remove(0);
            let history = ckpt.config.history;
            let mut trajs = Vec::with_capacity(ds.trajectories.len());
            for traj in &ds.trajectories {
                let window: Vec<Tensor> = (0..history)
                    .map(|t| traj.frame(t)?.reshape(&batch_of_one(ds.dims)))
                    .collect::<Result<_>>()?;
                let frames = rollout(&window, &ckpt.params, &ckpt.config, steps)?;
                let stacked = Tensor::stack(&frames.iter().collect::<Vec<_>>())?;
                let [_, c, h, w] = ds.dims;
                trajs.push(Trajectory {
                    family: ds.family,
                    data: stacked.reshape(&[steps, c, h, w])?,
                });
            }
            fs::create_dir_all(&dump)?;
            let stem = data.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let path = dump.join(format!("{stem}.rollout.pded"));
            let out = if trajs.is_empty() {
                Dataset::empty(ds.family, [steps, ds.dims[1], ds.dims[2], ds.dims[3]])
            } else {
                Dataset::new(ds.family, trajs)?
            };
            write_dataset(&path, &out, Dtype::F64)?;
            println!("wrote {} rollouts of {steps} steps to {}", out.trajectories.len(), path.display());
        }
        Command::RoutingStats { ckpt, data, mask } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let data = load_for(&ckpt, &data, mask)?;
            let report = moe_operator::train::evaluate(&ckpt.params, &ckpt.config, &data, 0)?;
            print_routing(&report.routing_report());
        }
        Command::GradCheck { op, tol } => {
            let reports = match op {
                Some(name) => {
                    let kind = OpKind::from_name(&name)?;
                    vec![grad_check(kind, &default_shapes(kind), tol)]
                }
                None => grad_check_all(tol),
            };
            let mut failed = 0;
            for r in &reports {
                let status = if r.passed { "PASS" } else { "FAIL" };
                print!("{status} {:<18} max_rel_err {:.3e}", r.name, r.max_rel_err);
                if let Some(m) = &r.message {
                    print!(" ({m})");
                }
                println!();
                failed += usize::from(!r.passed);
            }
            println!("{} of {} ops passed at tol {tol:e}", reports.len() - failed, reports.len());
            if failed > 0 {
                return Ok(ExitCode::from(4));
            }
        }
        Command::InspectCkpt { path } => {
            let summary = inspect(&path)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

fn batch_of_one(dims: [usize; 4]) -> [usize; 4] {
    [1, dims[1], dims[2], dims[3]]
}

fn load_for(ckpt: &Checkpoint, paths: &[PathBuf], mask: bool) -> Result<Vec<Dataset>> {
    let c = ckpt.config.channels;
    paths
        .iter()
        .map(|p| {
            let ds = read_dataset(p)?;
            let schema = (ds.dims[1] != c || mask).then(|| DatasetSchema {
                c_max: c - usize::from(mask),
                mask,
            });
            prepare_dataset(ds, schema.as_ref(), &ckpt.config)
        })
        .collect()
}

fn print_routing(report: &moe_operator::train::RoutingReport) {
    print!("{}", report.to_csv());
    for (a, b, d) in &report.tv {
        eprintln!("tv_distance {} {} {d:.4}", a.name(), b.name());
    }
}

fn train(config: &Path, out: &Path, until: Option<usize>) -> Result<()> {
    let mut cfg: RunConfig = serde_json::from_str(&read_text(config)?)?;
    cfg.out_dir = Some(out.to_path_buf());
    cfg.validate()?;
    let data = cfg.load_datasets()?;
    fs::create_dir_all(out)?;
    let metrics_path = out.join("metrics.csv");
    let ckpt_path = out.join("model.ckpt");

    let mut state = match (&cfg.resume, &cfg.init_checkpoint) {
        (Some(path), _) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.config != cfg.model {
                return Err(Error::Config("resume checkpoint was trained with a different model config".into()));
            }
            if ckpt.seed.master != cfg.seed {
                return Err(Error::Config("resume checkpoint was trained with a different seed".into()));
            }
            ckpt.into_state(cfg.adam)
        }
        (None, Some(path)) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.config != cfg.model {
                return Err(Error::Config("init checkpoint has a different model config".into()));
            }
            TrainState::from_params(ckpt.params, &cfg)
        }
        (None, None) => TrainState::fresh(&cfg)?,
    };

    // keep rows for epochs already completed, then append
    let mut rows = Vec::new();
    if state.epoch > 0 {
        if let Ok(text) = fs::read_to_string(&metrics_path) {
            rows.extend(text.lines().skip(1).take(state.epoch).map(str::to_owned));
        }
    }
    let mut file = fs::File::create(&metrics_path)?;
    writeln!(file, "{METRICS_HEADER}")?;
    for r in &rows {
        writeln!(file, "{r}")?;
    }
    let stop = until.unwrap_or(cfg.epochs).min(cfg.epochs);
    let _: Vec<EpochMetrics> = train_epochs(&cfg, &data, &mut state, stop, |m, _| {
        writeln!(file, "{}", m.csv_row())?;
        file.flush()?;
        eprintln!(
            "epoch {} lr {:.3e} l2re {:.5} aux_image {:.4} aux_token {:.4} total {:.5}",
            m.epoch, m.lr, m.l2re, m.aux_image, m.aux_token, m.total
        );
        Ok(())
    })?;
    save_checkpoint(&ckpt_path, &Checkpoint::from_state(cfg.model, &state, cfg.seed))?;
    println!(
        "trained to epoch {} ({} optimizer steps); checkpoint {}",
        state.epoch,
        state.step,
        ckpt_path.display()
    );
    Ok(())
}
