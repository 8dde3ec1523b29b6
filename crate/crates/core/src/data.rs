//! Seeded trajectory generators with ground-truth regime labels, and the
//! on-disk dataset container.
//!
//! Both generators derive an independent counter-based random substream per
//! trajectory from `(seed, index)`, so datasets are bit-identical for a
//! given seed no matter how generation is scheduled.
//!
//! # Container format
//!
//! Little-endian binary, one length-prefixed record per trajectory:
//!
//! ```text
//! magic    8 bytes  b"SNLDSDS1"
//! version  u32      currently 1
//! count    u64
//! record   repeated count times:
//!     record_len u64   bytes that follow in this record
//!     steps      u32
//!     obs_dim    u32
//!     has_labels u8
//!     x          steps*obs_dim f64, row-major
//!     labels     steps u8 (present when has_labels = 1)
//! ```

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Poisson};
use rayon::prelude::*;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SNLDSDS1";
const VERSION: u32 = 1;

/// One observed sequence, optionally with ground-truth regime labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub steps: usize,
    pub obs_dim: usize,
    /// Row-major `steps x obs_dim` observations.
    pub x: Vec<f64>,
    pub labels: Option<Vec<u8>>,
}

impl Trajectory {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.x[t * self.obs_dim..(t + 1) * self.obs_dim]
    }
}

/// A set of trajectories sharing dimensions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.trajectories.len() as u64).to_le_bytes())?;
        for traj in &self.trajectories {
            let has_labels = traj.labels.is_some() as u8;
            let record_len =
                4 + 4 + 1 + 8 * traj.x.len() + if has_labels == 1 { traj.steps } else { 0 };
            w.write_all(&(record_len as u64).to_le_bytes())?;
            w.write_all(&(traj.steps as u32).to_le_bytes())?;
            w.write_all(&(traj.obs_dim as u32).to_le_bytes())?;
            w.write_all(&[has_labels])?;
            for v in &traj.x {
                w.write_all(&v.to_le_bytes())?;
            }
            if let Some(labels) = &traj.labels {
                w.write_all(labels)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let file = std::fs::File::open(path)?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("not a dataset container (bad magic)"));
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)?;
        if u32::from_le_bytes(buf4) != VERSION {
            return Err(Error::format("unsupported dataset version"));
        }
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8)?;
        let count = u64::from_le_bytes(buf8) as usize;
        let mut trajectories = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut buf8)?;
            let record_len = u64::from_le_bytes(buf8) as usize;
            r.read_exact(&mut buf4)?;
            let steps = u32::from_le_bytes(buf4) as usize;
            r.read_exact(&mut buf4)?;
            let obs_dim = u32::from_le_bytes(buf4) as usize;
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            let has_labels = flag[0] == 1;
            let expected = 4 + 4 + 1 + 8 * steps * obs_dim + if has_labels { steps } else { 0 };
            if record_len != expected {
                return Err(Error::format(format!(
                    "record length {record_len} does not match header ({expected})"
                )));
            }
            let mut x = vec![0.0f64; steps * obs_dim];
            let mut fbuf = [0u8; 8];
            for v in x.iter_mut() {
                r.read_exact(&mut fbuf)?;
                *v = f64::from_le_bytes(fbuf);
            }
            let labels = if has_labels {
                let mut l = vec![0u8; steps];
                r.read_exact(&mut l)?;
                Some(l)
            } else {
                None
            };
            trajectories.push(Trajectory {
                steps,
                obs_dim,
                x,
                labels,
            });
        }
        Ok(Dataset { trajectories })
    }

    /// Plain-text export for inspection: one row per frame,
    /// `traj,t,x_0,...,x_{D-1}[,label]`.
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        let labeled = self.trajectories.iter().any(|t| t.labels.is_some());
        let dim = self.trajectories.first().map(|t| t.obs_dim).unwrap_or(0);
        write!(out, "traj,t")?;
        for d in 0..dim {
            write!(out, ",x{d}")?;
        }
        if labeled {
            write!(out, ",label")?;
        }
        writeln!(out)?;
        for (i, traj) in self.trajectories.iter().enumerate() {
            for t in 0..traj.steps {
                write!(out, "{i},{t}")?;
                for v in traj.row(t) {
                    write!(out, ",{v}")?;
                }
                if labeled {
                    match &traj.labels {
                        Some(l) => write!(out, ",{}", l[t])?,
                        None => write!(out, ",")?,
                    }
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}

// ---------------------------------------------------------------------------
// Bouncing ball
// ---------------------------------------------------------------------------

/// Settings for the one-dimensional bouncing ball: constant-speed motion
/// between walls at 0 and `wall_gap` with elastic reflection, observed with
/// additive Gaussian noise. Regime 0 moves down, regime 1 moves up.
#[derive(Clone, Debug)]
pub struct BouncingBallConfig {
    pub wall_gap: f64,
    pub max_speed: f64,
    pub noise_std: f64,
}

impl Default for BouncingBallConfig {
    fn default() -> Self {
        BouncingBallConfig {
            wall_gap: 10.0,
            max_speed: 0.5,
            noise_std: 0.1,
        }
    }
}

/// Generate `count` bouncing-ball trajectories of length `steps`.
pub fn gen_bouncing_ball(
    seed: u64,
    steps: usize,
    count: usize,
    cfg: &BouncingBallConfig,
) -> Result<Dataset> {
    if steps < 2 {
        return Err(Error::config("bouncing ball needs at least 2 steps"));
    }
    let trajectories: Vec<Trajectory> = (0..count as u64)
        .into_par_iter()
        .map(|i| bouncing_ball_one(substream(seed, i), steps, cfg))
        .collect();
    Ok(Dataset { trajectories })
}

fn bouncing_ball_one(mut rng: ChaCha8Rng, steps: usize, cfg: &BouncingBallConfig) -> Trajectory {
    let gap = cfg.wall_gap;
    let mut pos = rng.random_range(0.0..gap);
    let mut vel = rng.random_range(-cfg.max_speed..cfg.max_speed);
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("valid std");

    let mut x = Vec::with_capacity(steps);
    let mut labels = Vec::with_capacity(steps);
    for _ in 0..steps {
        let obs = if cfg.noise_std > 0.0 {
            pos + rng.sample(noise)
        } else {
            pos
        };
        x.push(obs);
        labels.push(if vel > 0.0 { 1u8 } else { 0u8 });
        // Advance, mirroring any overshoot back inside the walls.
        pos += vel;
        if pos >= gap {
            pos = 2.0 * gap - pos;
            vel = -vel;
        } else if pos <= 0.0 {
            pos = -pos;
            vel = -vel;
        }
    }
    Trajectory {
        steps,
        obs_dim: 1,
        x,
        labels: Some(labels),
    }
}

// ---------------------------------------------------------------------------
// Planar vehicle paths (straight segments and constant-rate turns)
// ---------------------------------------------------------------------------

/// Regime labels for the planar vehicle task.
pub const VEHICLE_STRAIGHT: u8 = 0;
pub const VEHICLE_LEFT: u8 = 1;
pub const VEHICLE_RIGHT: u8 = 2;

/// Settings for the planar vehicle generator. Speed and turn rate are drawn
/// per trajectory; regime durations are Poisson with the given mean. The
/// position is integrated exactly over unit time steps, so turn segments
/// lie on circles of radius `speed / turn_rate`.
#[derive(Clone, Debug)]
pub struct VehicleConfig {
    pub speed_range: (f64, f64),
    /// Range of `turn_rate / (2 pi)`.
    pub turn_frequency_range: (f64, f64),
    pub mean_duration: f64,
    pub noise_std: f64,
}

impl Default for VehicleConfig {
    fn default() -> Self {
        VehicleConfig {
            speed_range: (0.1, 0.5),
            turn_frequency_range: (0.1, 0.15),
            mean_duration: 25.0,
            noise_std: 0.05,
        }
    }
}

/// Generate `count` planar vehicle trajectories of length `steps`, observed
/// as noisy `(x, y)` positions starting from the origin.
pub fn gen_vehicle(seed: u64, steps: usize, count: usize, cfg: &VehicleConfig) -> Result<Dataset> {
    if steps < 2 {
        return Err(Error::config("vehicle paths need at least 2 steps"));
    }
    let trajectories: Vec<Trajectory> = (0..count as u64)
        .into_par_iter()
        .map(|i| vehicle_one(substream(seed, i), steps, cfg))
        .collect();
    Ok(Dataset { trajectories })
}

fn vehicle_one(mut rng: ChaCha8Rng, steps: usize, cfg: &VehicleConfig) -> Trajectory {
    let speed = rng.random_range(cfg.speed_range.0..cfg.speed_range.1);
    let turn_rate =
        2.0 * std::f64::consts::PI
            * rng.random_range(cfg.turn_frequency_range.0..cfg.turn_frequency_range.1);
    let mut heading = rng.random_range(0.0..2.0 * std::f64::consts::PI);
    let poisson = Poisson::new(cfg.mean_duration).expect("valid mean");
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("valid std");

    let mut x = Vec::with_capacity(steps * 2);
    let mut labels = Vec::with_capacity(steps);
    let (mut px, mut py) = (0.0f64, 0.0f64);
    let mut regime = rng.random_range(0..3u8);
    let mut remaining = (rng.sample(poisson) as usize).max(1);
    for _ in 0..steps {
        if cfg.noise_std > 0.0 {
            x.push(px + rng.sample(noise));
            x.push(py + rng.sample(noise));
        } else {
            x.push(px);
            x.push(py);
        }
        labels.push(regime);

        // Exact unit-step integration of the motion equations.
        let rate = match regime {
            VEHICLE_LEFT => turn_rate,
            VEHICLE_RIGHT => -turn_rate,
            _ => 0.0,
        };
        if rate == 0.0 {
            px += speed * heading.cos();
            py += speed * heading.sin();
        } else {
            let next = heading + rate;
            px += speed / rate * (next.sin() - heading.sin());
            py -= speed / rate * (next.cos() - heading.cos());
            heading = next;
        }

        remaining -= 1;
        if remaining == 0 {
            // New regime, never repeating the current one.
            let shift = rng.random_range(1..3u8);
            regime = (regime + shift) % 3;
            remaining = (rng.sample(poisson) as usize).max(1);
        }
    }
    Trajectory {
        steps,
        obs_dim: 2,
        x,
        labels: Some(labels),
    }
}

// ---------------------------------------------------------------------------
// Fixed-regime variants used by physical-invariant tests
// ---------------------------------------------------------------------------

/// Noise-free vehicle path with a fixed regime, for oracle checks.
pub fn vehicle_fixed_regime(
    regime: u8,
    steps: usize,
    speed: f64,
    turn_rate: f64,
    heading0: f64,
) -> Trajectory {
    let mut x = Vec::with_capacity(steps * 2);
    let (mut px, mut py) = (0.0f64, 0.0f64);
    let mut heading = heading0;
    for _ in 0..steps {
        x.push(px);
        x.push(py);
        let rate = match regime {
            VEHICLE_LEFT => turn_rate,
            VEHICLE_RIGHT => -turn_rate,
            _ => 0.0,
        };
        if rate == 0.0 {
            px += speed * heading.cos();
            py += speed * heading.sin();
        } else {
            let next = heading + rate;
            px += speed / rate * (next.sin() - heading.sin());
            py -= speed / rate * (next.cos() - heading.cos());
            heading = next;
        }
    }
    Trajectory {
        steps,
        obs_dim: 2,
        x,
        labels: Some(vec![regime; steps]),
    }
}
