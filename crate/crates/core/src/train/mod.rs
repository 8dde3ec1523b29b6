//! Training loops for the marginalized model and the Gumbel-Softmax
//! baseline: batched objective assembly, annealing of the regularizer
//! weight and transition temperature, Adam updates with global-norm
//! clipping, periodic metrics and checkpoints, and divergence handling.

pub mod adam;
pub mod objective;
pub mod schedule;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{Dataset, Trajectory};
use crate::error::{Error, Result};
use crate::eval::{score_sequence, Alignment};
use crate::hmm::DiscretePosterior;
use crate::inference::{InferenceConfig, InferenceParams};
use crate::model::{GenerativeParams, ModelConfig};
use crate::nn::{GradientMap, Graph, ParamStore};

pub use adam::{adam_step, AdamState, StepOutcome};
pub use objective::{
    collapsed_objective_value, elbo_terms, gumbel_elbo_terms, sample_gumbel_softmax,
    standard_gumbel, ElboTerms, GumbelHeadParams, GumbelTerms,
};
pub use schedule::{AnnealSchedule, LrSchedule};

/// Which estimator trains the model.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Method {
    /// Exact marginalization of the discrete states.
    Marginalized,
    /// Relaxed discrete states via Gumbel-Softmax.
    GumbelSoftmax,
}

/// A generative/inference parameter bundle sharing one store.
pub struct Model {
    pub method: Method,
    pub store: ParamStore,
    pub gen: GenerativeParams,
    pub inf: InferenceParams,
    pub gumbel_head: Option<GumbelHeadParams>,
}

impl Model {
    pub fn new(
        model_cfg: ModelConfig,
        inf_cfg: InferenceConfig,
        method: Method,
        seed: u64,
    ) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let gen = GenerativeParams::init(&mut store, model_cfg, &mut rng)?;
        let feature_dim = 2 * inf_cfg.encoder_units;
        let state_head_hidden = inf_cfg.state_head_hidden.clone();
        let inf = InferenceParams::init(&mut store, inf_cfg, &mut rng)?;
        let gumbel_head = match method {
            Method::Marginalized => None,
            Method::GumbelSoftmax => Some(GumbelHeadParams::init(
                &mut store,
                feature_dim,
                gen.config.num_states,
                &state_head_hidden,
                gen.config.hidden_activation,
                &mut rng,
            )?),
        };
        Ok(Model {
            method,
            store,
            gen,
            inf,
            gumbel_head,
        })
    }

    /// Overwrite all weights from a checkpoint file (matched by name).
    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let loaded = ParamStore::load(path)?;
        self.store.copy_values_from(&loaded)
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub total_steps: usize,
    /// First step index; nonzero when resuming from a checkpoint.
    pub start_step: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub learning_rate: LrSchedule,
    /// Regularizer weight schedule; floor 0.
    pub beta: AnnealSchedule,
    /// Transition temperature schedule; floor 1.
    pub tau: AnnealSchedule,
    /// Relaxation temperature schedule for the Gumbel-Softmax baseline.
    pub gumbel_tau: AnnealSchedule,
    pub clip_norm: f64,
    pub metrics_every: usize,
    /// Checkpoint cadence in steps; 0 saves only the final state.
    pub checkpoint_every: usize,
    pub eval_alignment: Alignment,
}

impl TrainConfig {
    /// Plain fixed-rate configuration with regularization off.
    pub fn basic(total_steps: usize, batch_size: usize, lr: f64, seed: u64) -> Self {
        TrainConfig {
            total_steps,
            start_step: 0,
            batch_size,
            seed,
            learning_rate: LrSchedule::constant(lr),
            beta: AnnealSchedule::constant(0.0),
            tau: AnnealSchedule::constant(1.0),
            gumbel_tau: AnnealSchedule::constant(1.0),
            clip_norm: 5.0,
            metrics_every: 500,
            checkpoint_every: 0,
            eval_alignment: Alignment::Permutation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if self.metrics_every == 0 {
            return Err(Error::config("metrics cadence must be positive"));
        }
        if self.start_step > self.total_steps {
            return Err(Error::config("start step exceeds total steps"));
        }
        self.learning_rate.validate()?;
        self.beta.validate()?;
        self.tau.validate()?;
        self.gumbel_tau.validate()?;
        if self.beta.floor < 0.0 {
            return Err(Error::config("the regularizer weight cannot go negative"));
        }
        if self.tau.floor < 1.0 {
            return Err(Error::config("the transition temperature floor is 1"));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    /// Mean per-frame negative log-likelihood estimate over the step batch.
    pub nll: f64,
    /// Mean per-frame bound estimate (`log_z + entropy` for the
    /// marginalized path, the relaxed bound for the baseline).
    pub elbo: f64,
    /// Mean per-frame regularizer value.
    pub ce: f64,
    pub beta: f64,
    pub tau: f64,
    pub f1_frame: Option<f64>,
    pub f1_switch: Option<f64>,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "step,nll,elbo,ce,beta,tau,f1_frame,f1_switch";

    pub fn to_csv(&self) -> String {
        let opt = |v: &Option<f64>| v.map(|f| f.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.nll,
            self.elbo,
            self.ce,
            self.beta,
            self.tau,
            opt(&self.f1_frame),
            opt(&self.f1_switch)
        )
    }
}

/// Result of a training run.
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
    /// Step at which the objective went non-finite, if it did; the model is
    /// rolled back to the last good state.
    pub diverged_at: Option<usize>,
    /// Steps whose updates were skipped over non-finite gradients.
    pub skipped_updates: usize,
    pub checkpoints: Vec<(usize, PathBuf)>,
}

fn draw_noise(rng: &mut ChaCha8Rng, steps: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..steps)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

fn draw_gumbel(rng: &mut ChaCha8Rng, steps: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..steps)
        .map(|_| (0..dim).map(|_| standard_gumbel(rng)).collect())
        .collect()
}

struct BatchStats {
    log_z: f64,
    elbo: f64,
    ce: f64,
    frames: f64,
    sequences: usize,
}

impl BatchStats {
    fn new() -> Self {
        BatchStats {
            log_z: 0.0,
            elbo: 0.0,
            ce: 0.0,
            frames: 0.0,
            sequences: 0,
        }
    }

    fn finite(&self) -> bool {
        self.log_z.is_finite() && self.elbo.is_finite() && self.ce.is_finite()
    }
}

/// Forward/backward over one batch; returns accumulated gradients and
/// monitoring statistics, or `None` when the objective went non-finite.
#[allow(clippy::too_many_arguments)]
fn batch_pass(
    g: &mut Graph,
    model: &Model,
    data: &Dataset,
    rng: &mut ChaCha8Rng,
    cfg: &TrainConfig,
    beta: f64,
    tau: f64,
    relax_tau: f64,
    with_grad: bool,
) -> Result<Option<(GradientMap, BatchStats)>> {
    let h = model.gen.config.latent_dim;
    let k = model.gen.config.num_states;
    let mut gmap = GradientMap::zeros(&model.store);
    let mut stats = BatchStats::new();
    for _ in 0..cfg.batch_size {
        let idx = rng.random_range(0..data.len());
        let traj = &data.trajectories[idx];
        let noise = draw_noise(rng, traj.steps, h);
        g.clear();
        let (objective, log_z, ce_v) = match model.method {
            Method::Marginalized => {
                let terms = elbo_terms(g, &model.store, &model.gen, &model.inf, traj, &noise, tau)?;
                let mut obj = g.add(terms.surrogate, terms.entropy);
                if beta != 0.0 {
                    let penalty = g.scale(terms.ce, beta);
                    obj = g.sub(obj, penalty);
                }
                let entropy_v = g.value_scalar(terms.entropy);
                let ce_v = g.value_scalar(terms.ce);
                stats.elbo += (terms.log_z + entropy_v) / traj.steps as f64;
                (obj, terms.log_z, ce_v)
            }
            Method::GumbelSoftmax => {
                let head = model
                    .gumbel_head
                    .as_ref()
                    .ok_or_else(|| Error::config("baseline model lacks its state head"))?;
                let gumbel_noise = draw_gumbel(rng, traj.steps, k);
                let terms = gumbel_elbo_terms(
                    g,
                    &model.store,
                    &model.gen,
                    &model.inf,
                    head,
                    traj,
                    &noise,
                    &gumbel_noise,
                    relax_tau,
                    tau,
                )?;
                let bound = g.value_scalar(terms.objective);
                stats.elbo += bound / traj.steps as f64;
                (terms.objective, terms.log_joint, 0.0)
            }
        };
        stats.log_z += log_z / traj.steps as f64;
        stats.ce += ce_v / traj.steps as f64;
        stats.frames += traj.steps as f64;
        stats.sequences += 1;

        let obj_v = g.value_scalar(objective);
        if !obj_v.is_finite() {
            return Ok(None);
        }
        if with_grad {
            let scale = -1.0 / (cfg.batch_size as f64 * traj.steps as f64);
            let root = g.scale(objective, scale);
            g.backward(root)?;
            g.accumulate_param_gradients(&mut gmap);
        }
    }
    Ok(Some((gmap, stats)))
}

fn metrics_from(
    step: usize,
    stats: &BatchStats,
    beta: f64,
    tau: f64,
    f1: Option<(f64, f64)>,
) -> MetricsRow {
    let n = stats.sequences.max(1) as f64;
    MetricsRow {
        step,
        nll: -stats.log_z / n,
        elbo: stats.elbo / n,
        ce: stats.ce / n,
        beta,
        tau,
        f1_frame: f1.map(|v| v.0),
        f1_switch: f1.map(|v| v.1),
    }
}

/// Smoothed posterior over discrete states for one sequence, decoding with
/// the posterior-mean latent path (zero reparameterization noise).
pub fn posterior_marginals(
    g: &mut Graph,
    model: &Model,
    traj: &Trajectory,
    tau: f64,
) -> Result<DiscretePosterior> {
    let noise = vec![vec![0.0; model.gen.config.latent_dim]; traj.steps];
    let terms = elbo_terms(g, &model.store, &model.gen, &model.inf, traj, &noise, tau)?;
    Ok(terms.posterior)
}

/// Mean frame-wise F1 and switching-point F1 (tolerance 0) over a labeled
/// dataset.
pub fn mean_f1(
    model: &Model,
    data: &Dataset,
    alignment: Alignment,
    tau: f64,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::usage("cannot evaluate on an empty dataset"));
    }
    let mut g = Graph::new();
    let mut frame = 0.0;
    let mut switch = 0.0;
    let mut counted = 0usize;
    for traj in &data.trajectories {
        let labels = traj
            .labels
            .as_ref()
            .ok_or_else(|| Error::usage("evaluation data has no ground-truth labels"))?;
        g.clear();
        let post = posterior_marginals(&mut g, model, traj, tau)?;
        let result = score_sequence(
            &post.gamma1,
            model.gen.config.num_states,
            labels,
            alignment,
            &[0],
        )?;
        frame += result.f1_frame;
        switch += result.f1_switch[0].1;
        counted += 1;
    }
    Ok((frame / counted as f64, switch / counted as f64))
}

/// Run the configured training loop. Checkpoints and a metrics CSV are
/// written under `out_dir` when provided; metrics are always returned.
///
/// Runs are deterministic given the seed: identical seeds produce
/// bit-identical metric logs.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    eval_data: Option<&Dataset>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::config("training data is empty"));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model.store);
    let mut g = Graph::new();
    let mut metrics: Vec<MetricsRow> = Vec::new();
    let mut checkpoints = Vec::new();
    let mut last_good = model.store.clone();
    let mut diverged_at = None;
    let mut skipped_updates = 0usize;

    // The metrics log is append-only: rows land as they are produced.
    let mut metrics_file = match out_dir {
        Some(dir) => {
            let mut f = std::fs::File::create(dir.join("metrics.csv"))?;
            writeln!(f, "{}", MetricsRow::CSV_HEADER)?;
            Some(f)
        }
        None => None,
    };
    let push_row = move |metrics: &mut Vec<MetricsRow>,
                             file: &mut Option<std::fs::File>,
                             row: MetricsRow|
          -> Result<()> {
        if let Some(f) = file {
            writeln!(f, "{}", row.to_csv())?;
            f.flush()?;
        }
        metrics.push(row);
        Ok(())
    };

    let mut step = cfg.start_step;
    while step < cfg.total_steps {
        let beta = cfg.beta.value(step);
        let tau = cfg.tau.value(step);
        let relax_tau = cfg.gumbel_tau.value(step);

        let pass = batch_pass(
            &mut g, model, data, &mut rng, cfg, beta, tau, relax_tau, true,
        )?;
        let (gmap, stats) = match pass {
            Some(v) => v,
            None => {
                model.store = last_good.clone();
                diverged_at = Some(step);
                break;
            }
        };

        if step % cfg.metrics_every == 0 {
            let f1 = match eval_data {
                Some(eval) if !eval.is_empty() => {
                    Some(mean_f1(model, eval, cfg.eval_alignment, tau)?)
                }
                _ => None,
            };
            push_row(
                &mut metrics,
                &mut metrics_file,
                metrics_from(step, &stats, beta, tau, f1),
            )?;
            if stats.finite() {
                last_good = model.store.clone();
            }
        }

        let lr = cfg.learning_rate.value(step);
        match adam_step(&mut model.store, &gmap, &mut adam, lr, cfg.clip_norm) {
            StepOutcome::Applied { .. } => {}
            StepOutcome::SkippedNonFinite => skipped_updates += 1,
        }
        step += 1;

        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            if let Some(dir) = out_dir {
                let path = dir.join(format!("checkpoint_{step:08}.bin"));
                model.store.save(&path)?;
                checkpoints.push((step, path));
            }
        }
    }

    // Closing metrics row at the final step, on a fresh probe batch.
    if diverged_at.is_none() && !metrics.iter().any(|m| m.step == cfg.total_steps) {
        let beta = cfg.beta.value(cfg.total_steps);
        let tau = cfg.tau.value(cfg.total_steps);
        let relax_tau = cfg.gumbel_tau.value(cfg.total_steps);
        if let Some((_, stats)) = batch_pass(
            &mut g, model, data, &mut rng, cfg, beta, tau, relax_tau, false,
        )? {
            let f1 = match eval_data {
                Some(eval) if !eval.is_empty() => {
                    Some(mean_f1(model, eval, cfg.eval_alignment, tau)?)
                }
                _ => None,
            };
            push_row(
                &mut metrics,
                &mut metrics_file,
                metrics_from(cfg.total_steps, &stats, beta, tau, f1),
            )?;
        }
    }

    if let Some(dir) = out_dir {
        let final_path = dir.join("checkpoint_final.bin");
        model.store.save(&final_path)?;
        checkpoints.push((cfg.total_steps, final_path));
    }

    Ok(TrainOutcome {
        metrics,
        diverged_at,
        skipped_updates,
        checkpoints,
    })
}

/// The monitoring transform for training curves:
/// `ln(nll - min(nll) + 1)` applied to a series of negative log-likelihoods.
pub fn log_relative_nll(nlls: &[f64]) -> Vec<f64> {
    let min = nlls.iter().copied().fold(f64::INFINITY, f64::min);
    nlls.iter().map(|v| (v - min + 1.0).ln()).collect()
}
