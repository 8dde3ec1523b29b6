//! Command-line surface: dataset generation, training, evaluation,
//! single-sequence segmentation, and training-curve reporting.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 when training
//! halts on divergence, 1 on any other failure.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use config::RunConfig;
use snlds_core::data::Dataset;
use snlds_core::eval::score_sequence;
use snlds_core::nn::Graph;
use snlds_core::train::{posterior_marginals, train, Model};

#[derive(Parser)]
#[command(name = "snlds", version, about = "Switching dynamical system segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset container (plus sidecar metadata).
    Generate {
        /// Run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Generator seed.
        #[arg(long)]
        seed: u64,
        /// Output container path.
        #[arg(long)]
        out: PathBuf,
        /// Override data.num_sequences.
        #[arg(long)]
        count: Option<usize>,
        /// Override data.sequence_length.
        #[arg(long)]
        steps: Option<usize>,
        /// Also write a CSV export next to the container.
        #[arg(long)]
        csv: bool,
    },
    /// Train a model; writes checkpoints and a metrics CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Output directory (defaults to the config's output_dir).
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Override train.total_steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Resume from a checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Step count already completed by the resumed checkpoint.
        #[arg(long)]
        start_step: Option<usize>,
    },
    /// Score a checkpoint against a labeled dataset.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset container to score on (defaults to generating the
        /// config's held-out split).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report CSV path (defaults to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also dump per-sequence posterior marginals as CSV.
        #[arg(long)]
        dump_marginals: Option<PathBuf>,
        /// Transition temperature at evaluation time.
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        /// Seed recorded in the report (defaults to the config seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Decode one sequence into discrete regime labels.
    Segment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Which sequence of the container to decode.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Output CSV path (defaults to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
    },
    /// Apply the log-relative transform to a metrics CSV's nll column.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            classify_error(&err)
        }
    };
    std::process::exit(code);
}

fn classify_error(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(core) = cause.downcast_ref::<snlds_core::Error>() {
            if matches!(core, snlds_core::Error::Config(_)) {
                return 2;
            }
        }
        // Config parse failures arrive as toml errors.
        if cause.is::<toml::de::Error>() {
            return 2;
        }
        if cause.to_string().starts_with("unknown ") {
            return 2;
        }
    }
    1
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Generate {
            config,
            seed,
            out,
            count,
            steps,
            csv,
        } => cmd_generate(&config, seed, &out, count, steps, csv),
        Command::Train {
            config,
            seed,
            out_dir,
            steps,
            resume,
            start_step,
        } => cmd_train(&config, seed, out_dir, steps, resume, start_step),
        Command::Evaluate {
            config,
            checkpoint,
            data,
            out,
            dump_marginals,
            tau,
            seed,
        } => cmd_evaluate(&config, &checkpoint, data, out, dump_marginals, tau, seed),
        Command::Segment {
            config,
            checkpoint,
            data,
            index,
            out,
            tau,
        } => cmd_segment(&config, &checkpoint, &data, index, out, tau),
        Command::Report { metrics, out } => cmd_report(&metrics, out),
    }
}

fn out_writer(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::fs::File::create(p)?),
        None => Box::new(std::io::stdout()),
    })
}

fn cmd_generate(
    config_path: &Path,
    seed: u64,
    out: &Path,
    count: Option<usize>,
    steps: Option<usize>,
    csv: bool,
) -> Result<i32> {
    let cfg = RunConfig::load(config_path)?;
    let count = count.unwrap_or(cfg.data.num_sequences);
    let steps = steps.unwrap_or(cfg.data.sequence_length);
    if cfg.data.generator == "file" {
        bail!("unknown generator \"file\" for generate; pick bouncing_ball or vehicle");
    }
    let data = if count == 0 {
        Dataset::default()
    } else {
        cfg.data.generate(&cfg.data.generator, seed, steps, count)?
    };
    data.save(out)?;

    // Sidecar metadata: enough to regenerate the file exactly.
    let meta = format!(
        "generator = {:?}\nseed = {}\ncount = {}\nsequence_length = {}\nnoise_std = {}\nformat_version = 1\n",
        cfg.data.generator,
        seed,
        count,
        steps,
        cfg.data
            .noise_std
            .map(|v| v.to_string())
            .unwrap_or_else(|| "\"default\"".into()),
    );
    std::fs::write(out.with_extension("meta.toml"), meta)?;

    if csv {
        let mut file = std::fs::File::create(out.with_extension("csv"))?;
        data.write_csv(&mut file)?;
    }
    eprintln!("wrote {} trajectories to {}", data.len(), out.display());
    Ok(0)
}

fn cmd_train(
    config_path: &Path,
    seed: u64,
    out_dir: Option<PathBuf>,
    steps: Option<usize>,
    resume: Option<PathBuf>,
    start_step: Option<usize>,
) -> Result<i32> {
    let cfg = RunConfig::load(config_path)?;
    let out_dir = out_dir.or(cfg.output_dir.clone());

    let model_cfg = cfg.model.to_model_config()?;
    let inf_cfg = cfg.inference.to_inference_config(&model_cfg);
    let method = cfg.train.method()?;
    let alignment = cfg.eval.alignment()?;
    let mut train_cfg = cfg.train.to_train_config(seed, alignment);
    if let Some(s) = steps {
        train_cfg.total_steps = s;
    }
    if let Some(s) = start_step {
        train_cfg.start_step = s;
    }

    let mut model = Model::new(model_cfg, inf_cfg, method, seed)?;
    if let Some(ckpt) = &resume {
        model
            .load_weights(ckpt)
            .with_context(|| format!("resuming from {}", ckpt.display()))?;
    }

    let (train_data, eval_data) = cfg.data.build(seed)?;
    if let Some(dir) = &out_dir {
        std::fs::create_dir_all(dir)?;
        // Keep the run reproducible: file the exact configuration alongside
        // the outputs.
        std::fs::copy(config_path, dir.join("config.toml"))?;
    }

    let outcome = train(
        &mut model,
        &train_data,
        eval_data.as_ref(),
        &train_cfg,
        out_dir.as_deref(),
    )?;

    if let Some(last) = outcome.metrics.last() {
        eprintln!(
            "step {}: nll {:.6}, elbo {:.6}{}",
            last.step,
            last.nll,
            last.elbo,
            match last.f1_frame {
                Some(f1) => format!(", frame F1 {f1:.4}"),
                None => String::new(),
            }
        );
    }
    if let Some(step) = outcome.diverged_at {
        eprintln!("training diverged at step {step}; rolled back to the last good state");
        return Ok(3);
    }
    Ok(0)
}

fn load_model_for(cfg: &RunConfig, checkpoint: &Path, seed: u64) -> Result<Model> {
    let model_cfg = cfg.model.to_model_config()?;
    let inf_cfg = cfg.inference.to_inference_config(&model_cfg);
    let mut model = Model::new(model_cfg, inf_cfg, cfg.train.method()?, seed)?;
    model
        .load_weights(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    Ok(model)
}

fn cmd_evaluate(
    config_path: &Path,
    checkpoint: &Path,
    data_path: Option<PathBuf>,
    out: Option<PathBuf>,
    dump_marginals: Option<PathBuf>,
    tau: f64,
    seed: Option<u64>,
) -> Result<i32> {
    let cfg = RunConfig::load(config_path)?;
    let seed = seed.or(cfg.seed).unwrap_or(0);
    let model = load_model_for(&cfg, checkpoint, seed)?;
    let alignment = cfg.eval.alignment()?;

    let (dataset_name, data) = match &data_path {
        Some(p) => (p.display().to_string(), Dataset::load(p)?),
        None => {
            let (_, eval) = cfg.data.build(seed)?;
            let eval = eval.context("config has no held-out split to evaluate on")?;
            (format!("{}(held-out)", cfg.data.generator), eval)
        }
    };
    if data.is_empty() {
        bail!("evaluation dataset is empty");
    }

    let mut tolerances = cfg.eval.tolerances.clone();
    for required in [0usize, 5] {
        if !tolerances.contains(&required) {
            tolerances.push(required);
        }
    }

    let mut g = Graph::new();
    let mut frame_sum = 0.0;
    let mut tol_sums = vec![0.0; tolerances.len()];
    let mut counted = 0usize;
    let mut marginal_rows: Vec<String> = Vec::new();
    for (idx, traj) in data.trajectories.iter().enumerate() {
        let labels = traj
            .labels
            .as_ref()
            .context("evaluation data has no ground-truth labels")?;
        g.clear();
        let post = posterior_marginals(&mut g, &model, traj, tau)?;
        let result = score_sequence(
            &post.gamma1,
            model.gen.config.num_states,
            labels,
            alignment,
            &tolerances,
        )?;
        frame_sum += result.f1_frame;
        for (i, (_, f1)) in result.f1_switch.iter().enumerate() {
            tol_sums[i] += f1;
        }
        counted += 1;
        if dump_marginals.is_some() {
            let k = model.gen.config.num_states;
            for t in 0..traj.steps {
                for state in 0..k {
                    marginal_rows.push(format!(
                        "{idx},{t},{state},{}",
                        post.gamma1[t * k + state]
                    ));
                }
            }
        }
    }

    let n = counted as f64;
    let f1_at = |tol: usize| -> f64 {
        tolerances
            .iter()
            .position(|&t| t == tol)
            .map(|i| tol_sums[i] / n)
            .unwrap_or(f64::NAN)
    };

    let mut w = out_writer(&out)?;
    writeln!(
        w,
        "dataset,model,seed,f1_frame,f1_switch_tol0,f1_switch_tol5,alignment_mode"
    )?;
    writeln!(
        w,
        "{},{},{},{},{},{},{}",
        dataset_name,
        checkpoint.display(),
        seed,
        frame_sum / n,
        f1_at(0),
        f1_at(5),
        alignment
    )?;

    if let Some(path) = dump_marginals {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "sequence,t,k,gamma")?;
        for row in marginal_rows {
            writeln!(file, "{row}")?;
        }
    }
    Ok(0)
}

fn cmd_segment(
    config_path: &Path,
    checkpoint: &Path,
    data_path: &Path,
    index: usize,
    out: Option<PathBuf>,
    tau: f64,
) -> Result<i32> {
    let cfg = RunConfig::load(config_path)?;
    let model = load_model_for(&cfg, checkpoint, cfg.seed.unwrap_or(0))?;
    let data = Dataset::load(data_path)?;
    let traj = data
        .trajectories
        .get(index)
        .with_context(|| format!("dataset has {} sequences, asked for {index}", data.len()))?;

    let mut g = Graph::new();
    let post = posterior_marginals(&mut g, &model, traj, tau)?;
    let labels = snlds_core::eval::decode(&post.gamma1, model.gen.config.num_states);

    let mut w = out_writer(&out)?;
    writeln!(w, "t,label")?;
    for (t, l) in labels.iter().enumerate() {
        writeln!(w, "{t},{l}")?;
    }
    Ok(0)
}

fn cmd_report(metrics_path: &Path, out: Option<PathBuf>) -> Result<i32> {
    let text = std::fs::read_to_string(metrics_path)?;
    let mut lines = text.lines();
    let header = lines.next().context("metrics file is empty")?;
    let columns: Vec<&str> = header.split(',').collect();
    let step_col = columns
        .iter()
        .position(|&c| c == "step")
        .context("metrics file lacks a step column")?;
    let nll_col = columns
        .iter()
        .position(|&c| c == "nll")
        .context("metrics file lacks an nll column")?;

    let mut steps = Vec::new();
    let mut nlls = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        steps.push(
            fields
                .get(step_col)
                .context("short row")?
                .parse::<u64>()
                .context("bad step value")?,
        );
        nlls.push(
            fields
                .get(nll_col)
                .context("short row")?
                .parse::<f64>()
                .context("bad nll value")?,
        );
    }
    let transformed = snlds_core::train::log_relative_nll(&nlls);
    let mut w = out_writer(&out)?;
    writeln!(w, "step,log_rel_nll")?;
    for (s, v) in steps.iter().zip(&transformed) {
        writeln!(w, "{s},{v}")?;
    }
    Ok(0)
}
