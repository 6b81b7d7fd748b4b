use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsoConfig {
    /// Number of generations `G`.
    pub n_gen: usize,
    pub n_pop: usize,
    pub w_max: f64,
    pub w_min: f64,
    pub c1_init: f64,
    pub c2_init: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// `(lo, hi)` per dimension.
    pub bounds: Vec<(f64, f64)>,
    /// Per-dimension speed limit as a fraction of the bound range.
    pub velocity_clamp: f64,
    pub seed: u64,
}

impl PsoConfig {
    /// Swarm settings with the given search box.
    pub fn with_bounds(bounds: Vec<(f64, f64)>) -> Self {
        Self {
            n_gen: 15,
            n_pop: 20,
            w_max: 0.99,
            w_min: 0.1,
            c1_init: 2.0,
            c2_init: 2.0,
            lambda1: 30.0,
            lambda2: 3.0,
            bounds,
            velocity_clamp: 0.2,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_gen < 1 {
            return Err(Error::invalid("pso.n_gen", "must be >= 1"));
        }
        if self.n_pop < 1 {
            return Err(Error::invalid("pso.n_pop", "must be >= 1"));
        }
        if !(self.w_max > self.w_min && self.w_min > 0.0) {
            return Err(Error::invalid("pso.w_max", "need w_max > w_min > 0"));
        }
        if !(self.lambda2 != 0.0 && self.lambda1.is_finite() && self.lambda2.is_finite()) {
            return Err(Error::invalid("pso.lambda2", "must be finite and non-zero"));
        }
        if self.bounds.is_empty() || self.bounds.iter().any(|&(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo < hi)) {
            return Err(Error::invalid("pso.bounds", "need lo < hi in every dimension"));
        }
        if !(self.velocity_clamp > 0.0) {
            return Err(Error::invalid("pso.velocity_clamp", "must be > 0"));
        }
        Ok(())
    }

    fn v_max(&self, d: usize) -> f64 {
        let (lo, hi) = self.bounds[d];
        self.velocity_clamp * (hi - lo)
    }
}

/// Exponentially decreasing inertia weight for generation `g`.
pub fn inertia_weight(g: usize, cfg: &PsoConfig) -> f64 {
    let frac = g as f64 / cfg.n_gen as f64;
    cfg.w_min + (cfg.w_max - cfg.lambda1 * (cfg.w_max + cfg.w_min) * frac).exp() / cfg.lambda2
}

/// Acceleration step `α = −β` for generation `g`, over half-open bands
/// `[0, .20)`, `[.20, .35)`, `[.35, .75)`, `[.75, 1]` of `g/G`.
pub fn acceleration_step(g: usize, n_gen: usize) -> f64 {
    // integer comparisons keep the band edges exact
    let pct = |p: usize| g * 100 < p * n_gen;
    if pct(20) {
        0.05
    } else if pct(35) {
        0.02
    } else if pct(75) {
        -0.035
    } else {
        -0.0015
    }
}

/// Shifts weight between the cognitive and social pulls; `c1 + c2` is conserved.
pub fn update_accelerations(c1: f64, c2: f64, g: usize, cfg: &PsoConfig) -> (f64, f64) {
    let alpha = acceleration_step(g, cfg.n_gen);
    (c1 + alpha, c2 - alpha)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub position: Vec<f64>,
    pub velocity: Vec<f64>,
    pub pbest_pos: Vec<f64>,
    /// `+∞` until the first finite evaluation.
    pub pbest_cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Swarm {
    pub particles: Vec<Particle>,
    pub gbest_pos: Vec<f64>,
    pub gbest_cost: f64,
    pub c1: f64,
    pub c2: f64,
    /// Independent RNG stream id (e.g. the grid index in a sweep).
    pub stream: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG for one particle in one generation, independent of scheduling order.
pub fn particle_rng(seed: u64, stream: u64, particle: usize, generation: u64) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    for word in [stream, particle as u64, generation] {
        h = splitmix64(h ^ word);
    }
    ChaCha8Rng::seed_from_u64(h)
}

const INIT_GENERATION: u64 = u64::MAX;

/// Objective that may stop early: given a cutoff it must return the exact
/// cost when that cost is `<= cutoff`, and any value above the cutoff
/// otherwise. Swarm bookkeeping only compares costs against personal bests,
/// so pruned runs follow the same trajectory as exact ones.
pub trait BoundedObjective: Sync {
    fn eval(&self, x: &[f64], cutoff: f64) -> f64;
}

impl<F: Fn(&[f64], f64) -> f64 + Sync> BoundedObjective for F {
    fn eval(&self, x: &[f64], cutoff: f64) -> f64 {
        self(x, cutoff)
    }
}

struct Exact<'a, F>(&'a F);

impl<F: Fn(&[f64]) -> f64 + Sync> BoundedObjective for Exact<'_, F> {
    fn eval(&self, x: &[f64], _cutoff: f64) -> f64 {
        (self.0)(x)
    }
}

fn evaluate_all<F: BoundedObjective + ?Sized>(positions: &[Vec<f64>], cutoffs: &[f64], fitness: &F) -> Vec<f64> {
    positions
        .par_iter()
        .zip(cutoffs.par_iter())
        .map(|(p, &c)| fitness.eval(p, c))
        .collect()
}

impl Swarm {
    /// Uniform positions in the box and uniform velocities within the speed
    /// limit. `seeds` replace the first particles' positions.
    pub fn initialize<F>(cfg: &PsoConfig, stream: u64, seeds: &[Vec<f64>], fitness: &F) -> Result<Self>
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        Self::initialize_bounded(cfg, stream, seeds, &Exact(fitness))
    }

    pub fn initialize_bounded<F: BoundedObjective + ?Sized>(cfg: &PsoConfig, stream: u64, seeds: &[Vec<f64>], fitness: &F) -> Result<Self> {
        cfg.validate()?;
        let dim = cfg.bounds.len();
        let mut particles: Vec<Particle> = (0..cfg.n_pop)
            .map(|i| {
                let mut rng = particle_rng(cfg.seed, stream, i, INIT_GENERATION);
                let mut position: Vec<f64> = cfg.bounds.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect();
                let velocity = (0..dim)
                    .map(|d| {
                        let vm = cfg.v_max(d);
                        rng.random_range(-vm..=vm)
                    })
                    .collect();
                if let Some(s) = seeds.get(i) {
                    position = clamp_to_bounds(s, &cfg.bounds);
                }
                Particle {
                    pbest_pos: position.clone(),
                    position,
                    velocity,
                    pbest_cost: f64::INFINITY,
                }
            })
            .collect();
        let positions: Vec<Vec<f64>> = particles.iter().map(|p| p.position.clone()).collect();
        let costs = evaluate_all(&positions, &vec![f64::INFINITY; positions.len()], fitness);
        for (p, &c) in particles.iter_mut().zip(&costs) {
            if c.is_finite() {
                p.pbest_cost = c;
            } else {
                log::warn!("non-finite fitness at initial position {:?}", p.position);
            }
        }
        let mut swarm = Swarm {
            gbest_pos: particles[0].position.clone(),
            gbest_cost: f64::INFINITY,
            particles,
            c1: cfg.c1_init,
            c2: cfg.c2_init,
            stream,
        };
        swarm.refresh_gbest();
        Ok(swarm)
    }

    fn refresh_gbest(&mut self) {
        for p in &self.particles {
            if p.pbest_cost < self.gbest_cost {
                self.gbest_cost = p.pbest_cost;
                self.gbest_pos = p.pbest_pos.clone();
            }
        }
    }
}

fn clamp_to_bounds(x: &[f64], bounds: &[(f64, f64)]) -> Vec<f64> {
    x.iter().zip(bounds).map(|(&v, &(lo, hi))| v.clamp(lo, hi)).collect()
}

/// Moves every particle with explicit coefficients and re-evaluates.
///
/// Velocities use the global best from the start of the step; personal and
/// global bests change only on strict improvement.
pub fn pso_step_with<F>(swarm: &mut Swarm, fitness: &F, g: usize, w: f64, c1: f64, c2: f64, cfg: &PsoConfig)
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    step_bounded(swarm, &Exact(fitness), g, w, c1, c2, cfg);
}

#[allow(clippy::too_many_arguments)]
fn step_bounded<F: BoundedObjective + ?Sized>(swarm: &mut Swarm, fitness: &F, g: usize, w: f64, c1: f64, c2: f64, cfg: &PsoConfig) {
    let gbest = swarm.gbest_pos.clone();
    for (i, p) in swarm.particles.iter_mut().enumerate() {
        let mut rng = particle_rng(cfg.seed, swarm.stream, i, g as u64);
        for d in 0..p.position.len() {
            let r1: f64 = rng.random();
            let r2: f64 = rng.random();
            let vm = cfg.v_max(d);
            let v = w * p.velocity[d] + c1 * r1 * (p.pbest_pos[d] - p.position[d]) + c2 * r2 * (gbest[d] - p.position[d]);
            p.velocity[d] = v.clamp(-vm, vm);
            let (lo, hi) = cfg.bounds[d];
            p.position[d] = (p.position[d] + p.velocity[d]).clamp(lo, hi);
        }
    }
    let positions: Vec<Vec<f64>> = swarm.particles.iter().map(|p| p.position.clone()).collect();
    let cutoffs: Vec<f64> = swarm.particles.iter().map(|p| p.pbest_cost).collect();
    let costs = evaluate_all(&positions, &cutoffs, fitness);
    for (p, &c) in swarm.particles.iter_mut().zip(&costs) {
        if !c.is_finite() {
            log::warn!("non-finite fitness at {:?}; particle skipped", p.position);
            continue;
        }
        if c < p.pbest_cost {
            p.pbest_cost = c;
            p.pbest_pos = p.position.clone();
        }
    }
    swarm.refresh_gbest();
}

/// One generation with the scheduled inertia weight and accelerations.
pub fn pso_step<F>(swarm: &mut Swarm, fitness: &F, g: usize, cfg: &PsoConfig)
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    pso_step_bounded(swarm, &Exact(fitness), g, cfg);
}

pub fn pso_step_bounded<F: BoundedObjective + ?Sized>(swarm: &mut Swarm, fitness: &F, g: usize, cfg: &PsoConfig) {
    let w = inertia_weight(g, cfg);
    step_bounded(swarm, fitness, g, w, swarm.c1, swarm.c2, cfg);
    let (c1, c2) = update_accelerations(swarm.c1, swarm.c2, g, cfg);
    swarm.c1 = c1;
    swarm.c2 = c2;
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsoOutcome {
    pub best_position: Vec<f64>,
    pub best_cost: f64,
    /// Global best cost after initialisation and after each generation.
    pub history: Vec<f64>,
    /// `(c1, c2)` in effect at each generation.
    pub accelerations: Vec<(f64, f64)>,
}

/// Full optimisation run over `cfg.n_gen` generations.
pub fn run_pso<F>(cfg: &PsoConfig, stream: u64, seeds: &[Vec<f64>], fitness: &F) -> Result<PsoOutcome>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    run_pso_bounded(cfg, stream, seeds, &Exact(fitness))
}

/// [`run_pso`] with an objective that can abandon hopeless evaluations.
pub fn run_pso_bounded<F: BoundedObjective + ?Sized>(cfg: &PsoConfig, stream: u64, seeds: &[Vec<f64>], fitness: &F) -> Result<PsoOutcome> {
    let mut swarm = Swarm::initialize_bounded(cfg, stream, seeds, fitness)?;
    let mut history = vec![swarm.gbest_cost];
    let mut accelerations = Vec::with_capacity(cfg.n_gen);
    for g in 0..cfg.n_gen {
        accelerations.push((swarm.c1, swarm.c2));
        pso_step_bounded(&mut swarm, fitness, g, cfg);
        history.push(swarm.gbest_cost);
    }
    Ok(PsoOutcome {
        best_position: swarm.gbest_pos,
        best_cost: swarm.gbest_cost,
        history,
        accelerations,
    })
}
