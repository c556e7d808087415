//! Block-wise evolutionary scale search and finite-difference gradient
//! baselines.
//!
//! The evolutionary core ([`evolve`]) and the gradient core ([`minimize_fd`])
//! work on plain `f64` vectors and a fitness closure, so the same code drives
//! both the transformer search and the synthetic surfaces in
//! [`crate::landscape`].

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Fitness;
use crate::model::{BlockScales, Model};

/// Lower clamp applied to every perturbed or optimized scale.
pub const MIN_SCALE: f64 = 1e-8;

/// Central finite-difference step of the gradient baselines.
pub const FD_STEP: f64 = 1e-6;

/// Mutation range used for a given weight bit-width when none is set.
pub fn default_epsilon(weight_bits: u8) -> f64 {
    if weight_bits >= 8 {
        1e-3
    } else {
        1e-4
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSettings {
    pub passes: usize,
    pub population: usize,
    pub cycles: usize,
    pub samples: usize,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for SearchSettings {
    fn default() -> Self {
        Self {
            passes: 10,
            population: 15,
            cycles: 3,
            samples: 10,
            epsilon: 1e-4,
            seed: 0,
        }
    }
}

impl SearchSettings {
    /// Default settings with the mutation range matched to `weight_bits`.
    pub fn for_bits(weight_bits: u8, seed: u64) -> Self {
        Self {
            epsilon: default_epsilon(weight_bits),
            seed,
            ..Self::default()
        }
    }

    /// Zero passes or cycles are accepted and mean "do nothing".
    pub fn validate(&self) -> Result<()> {
        if self.population == 0 {
            return Err(Error::param("population must be at least 1"));
        }
        if self.samples == 0 || self.samples > self.population {
            return Err(Error::param(format!(
                "tournament size {} must lie in 1..={}",
                self.samples, self.population
            )));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::param(format!(
                "epsilon {} must be positive",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Fitness evaluations spent on one block visit (the incumbent is reused).
    pub fn evaluations_per_visit(&self) -> usize {
        if self.cycles == 0 {
            0
        } else {
            self.population - 1 + self.cycles
        }
    }
}

/// Uniform ε-ball perturbation, clamped to [`MIN_SCALE`].
pub fn perturb_values(values: &[f64], epsilon: f64, rng: &mut impl Rng) -> Vec<f64> {
    values
        .iter()
        .map(|&v| (v + epsilon * (2.0 * rng.random::<f64>() - 1.0)).max(MIN_SCALE))
        .collect()
}

/// [`perturb_values`] on a block's scale vector.
pub fn perturb(scales: &BlockScales, epsilon: f64, rng: &mut impl Rng) -> Result<BlockScales> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::param(format!("epsilon {epsilon} must be positive")));
    }
    let start: Vec<f64> = scales.values().iter().map(|&v| v as f64).collect();
    let moved = perturb_values(&start, epsilon, rng);
    scales.with_values(to_f32(&moved))
}

fn to_f32(values: &[f64]) -> Vec<f32> {
    values.iter().map(|&v| v as f32).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub scales: Vec<f64>,
    /// Negated loss: higher is better.
    pub fitness: f64,
    /// −1 for the seeded population.
    pub birth_cycle: i64,
    pub id: usize,
}

/// Candidates in insertion order.
#[derive(Debug, Clone)]
pub struct Population {
    members: Vec<Candidate>,
    capacity: usize,
}

impl Population {
    pub fn new(capacity: usize) -> Self {
        Self {
            members: Vec::with_capacity(capacity + 1),
            capacity,
        }
    }

    pub fn members(&self) -> &[Candidate] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn insert(&mut self, c: Candidate) {
        self.members.push(c);
    }

    /// Highest fitness; the oldest wins a tie.
    pub fn best(&self) -> &Candidate {
        let mut best = &self.members[0];
        for c in &self.members[1..] {
            if c.fitness > best.fitness {
                best = c;
            }
        }
        best
    }

    /// Removes the lowest-fitness member. The newest goes on a tie, so an
    /// incumbent is only dropped when something strictly beats it.
    pub fn remove_worst(&mut self) -> Candidate {
        let mut worst = 0;
        for (i, c) in self.members.iter().enumerate() {
            if c.fitness <= self.members[worst].fitness {
                worst = i;
            }
        }
        self.members.remove(worst)
    }

    /// Tournament of `samples` draws with replacement; the first drawn wins a tie.
    pub fn select_parent(&self, samples: usize, rng: &mut impl Rng) -> &Candidate {
        let mut best = &self.members[rng.random_range(0..self.members.len())];
        for _ in 1..samples {
            let c = &self.members[rng.random_range(0..self.members.len())];
            if c.fitness > best.fitness {
                best = c;
            }
        }
        best
    }
}

/// One fitness evaluation as seen by [`evolve`]'s observer.
#[derive(Debug, Clone, Copy)]
pub struct Evaluation<'a> {
    pub cycle: i64,
    pub candidate: &'a Candidate,
    pub best_fitness: f64,
}

/// One evolutionary run from `start`, whose fitness is already known.
///
/// The population is seeded with `start` plus `population − 1` perturbations
/// of it. Each cycle runs a tournament, perturbs the winner, evaluates and
/// inserts the child, then drops the worst member. With zero cycles nothing is
/// evaluated and the population holds only `start`.
pub fn evolve<F, O>(
    start: &[f64],
    start_fitness: f64,
    settings: &SearchSettings,
    rng: &mut impl Rng,
    mut fitness: F,
    mut observe: O,
) -> Result<Population>
where
    F: FnMut(&[f64]) -> Result<f64>,
    O: FnMut(Evaluation<'_>),
{
    settings.validate()?;
    let mut pop = Population::new(settings.population);
    pop.insert(Candidate {
        scales: start.to_vec(),
        fitness: start_fitness,
        birth_cycle: -1,
        id: 0,
    });
    if settings.cycles == 0 {
        return Ok(pop);
    }
    let mut next_id = 1;
    let mut evaluate =
        |scales: Vec<f64>, cycle: i64, pop: &mut Population, id: usize| -> Result<()> {
            let f = fitness(&scales)?;
            if !f.is_finite() {
                return Err(Error::NonFinite(format!("fitness {f} for candidate {id}")));
            }
            pop.insert(Candidate {
                scales,
                fitness: f,
                birth_cycle: cycle,
                id,
            });
            observe(Evaluation {
                cycle,
                candidate: pop.members.last().expect("just inserted"),
                best_fitness: pop.best().fitness,
            });
            Ok(())
        };
    while pop.len() < settings.population {
        let child = perturb_values(start, settings.epsilon, rng);
        evaluate(child, -1, &mut pop, next_id)?;
        next_id += 1;
    }
    for cycle in 0..settings.cycles {
        let parent = pop.select_parent(settings.samples, rng);
        let child = perturb_values(&parent.scales, settings.epsilon, rng);
        evaluate(child, cycle as i64, &mut pop, next_id)?;
        next_id += 1;
        pop.remove_worst();
    }
    Ok(pop)
}

/// One line of the search trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub pass: usize,
    pub block: usize,
    /// −1 while seeding the population.
    pub cycle: i64,
    pub candidate_id: usize,
    pub fitness: f64,
    pub best_fitness: f64,
    /// Milliseconds since the run started, or 0 when timing is off.
    pub wall_ms: f64,
}

pub const TRACE_HEADER: &str = "pass,block,cycle,candidate_id,fitness,best_fitness,wall_ms";

pub fn write_trace_csv(rows: &[TraceRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{:.3}",
            r.pass, r.block, r.cycle, r.candidate_id, r.fitness, r.best_fitness, r.wall_ms
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SearchReport {
    pub trace: Vec<TraceRow>,
    /// Fitness evaluations, including the one initial score.
    pub evaluations: usize,
    /// Calibration loss before and after (lower is better).
    pub initial_score: f64,
    pub final_score: f64,
}

struct Visit<'a> {
    fitness: &'a Fitness,
    settings: &'a SearchSettings,
    clock: Option<Instant>,
    evaluations: usize,
    trace: Vec<TraceRow>,
}

impl Visit<'_> {
    /// Searches one block and installs the winner. Returns its fitness.
    fn block(
        &mut self,
        model: &mut Model,
        block: usize,
        pass: usize,
        incumbent: f64,
        rng: &mut ChaCha8Rng,
        sink: &mut dyn FnMut(&TraceRow),
    ) -> Result<f64> {
        let session = self.fitness.session(model, block)?;
        let start: Vec<f64> = model
            .block_scales(block)?
            .values()
            .iter()
            .map(|&v| v as f64)
            .collect();
        let (clock, trace, evaluations) = (self.clock, &mut self.trace, &mut self.evaluations);
        let pop = evolve(
            &start,
            incumbent,
            self.settings,
            rng,
            |scales| {
                *evaluations += 1;
                model.set_block_scales(block, &to_f32(scales))?;
                Ok(-session.score(model)?)
            },
            |e| {
                let row = TraceRow {
                    pass,
                    block,
                    cycle: e.cycle,
                    candidate_id: e.candidate.id,
                    fitness: e.candidate.fitness,
                    best_fitness: e.best_fitness,
                    wall_ms: clock.map_or(0.0, |c| c.elapsed().as_secs_f64() * 1e3),
                };
                sink(&row);
                trace.push(row);
            },
        )?;
        let best = pop.best();
        model.set_block_scales(block, &to_f32(&best.scales))?;
        Ok(best.fitness)
    }
}

/// Searches the scales of one block and installs the best candidate.
pub fn search_block(
    model: &mut Model,
    fitness: &Fitness,
    block: usize,
    settings: &SearchSettings,
) -> Result<BlockScales> {
    settings.validate()?;
    let incumbent = -fitness.session(model, block)?.score(model)?;
    let mut visit = Visit {
        fitness,
        settings,
        clock: None,
        evaluations: 1,
        trace: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    visit.block(model, block, 0, incumbent, &mut rng, &mut |_| {})?;
    model.block_scales(block)
}

/// [`run_traced`] without timing or a row sink.
pub fn run(
    model: &mut Model,
    fitness: &Fitness,
    settings: &SearchSettings,
) -> Result<SearchReport> {
    run_traced(model, fitness, settings, false, &mut |_| {})
}

/// `passes` sequential sweeps over blocks `0..B`, each a [`search_block`].
///
/// The incumbent's fitness carries over between visits: the model only
/// changes when a visit installs its winner, whose fitness is already known.
/// Total evaluations are therefore `1 + B·P·(K − 1 + C)`. `sink` sees every
/// trace row as it is produced. Wall-clock columns stay 0 unless `timing` is
/// set, so traces are reproducible byte for byte.
pub fn run_traced(
    model: &mut Model,
    fitness: &Fitness,
    settings: &SearchSettings,
    timing: bool,
    sink: &mut dyn FnMut(&TraceRow),
) -> Result<SearchReport> {
    settings.validate()?;
    let initial_score = fitness.score(model)?;
    let mut visit = Visit {
        fitness,
        settings,
        clock: timing.then(Instant::now),
        evaluations: 1,
        trace: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut incumbent = -initial_score;
    for pass in 0..settings.passes {
        for block in 0..model.blocks().len() {
            incumbent = visit.block(model, block, pass, incumbent, &mut rng, sink)?;
        }
    }
    Ok(SearchReport {
        trace: visit.trace,
        evaluations: visit.evaluations,
        initial_score,
        final_score: -incumbent,
    })
}

/// Outcome of [`minimize_es`].
#[derive(Debug, Clone)]
pub struct EsRun {
    pub params: Vec<f64>,
    pub loss: f64,
    pub evaluations: usize,
}

/// Minimizes `loss` with the evolutionary core under a fixed evaluation
/// budget. The start point's evaluation counts toward the budget, so the
/// search runs `budget − population` cycles. `settings.cycles` and
/// `settings.passes` are ignored.
pub fn minimize_es<F>(
    start: &[f64],
    budget: usize,
    settings: &SearchSettings,
    mut loss: F,
) -> Result<EsRun>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if budget <= settings.population {
        return Err(Error::param(format!(
            "budget {budget} must exceed the population {}",
            settings.population
        )));
    }
    let settings = SearchSettings {
        cycles: budget - settings.population,
        ..*settings
    };
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let start_fitness = -loss(start)?;
    let mut evaluations = 1;
    let pop = evolve(
        start,
        start_fitness,
        &settings,
        &mut rng,
        |x| {
            evaluations += 1;
            Ok(-loss(x)?)
        },
        |_| {},
    )?;
    let best = pop.best();
    Ok(EsRun {
        params: best.scales.clone(),
        loss: -best.fitness,
        evaluations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
    AdamW,
}

impl Optimizer {
    pub const ALL: [Optimizer; 3] = [Optimizer::Sgd, Optimizer::Adam, Optimizer::AdamW];
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
            Optimizer::AdamW => "adamw",
        })
    }
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            "adamw" => Ok(Optimizer::AdamW),
            other => Err(Error::param(format!("unknown optimizer {other:?}"))),
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const WEIGHT_DECAY: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientSettings {
    pub optimizer: Optimizer,
    pub steps: usize,
    pub lr: f64,
    /// Coordinates differentiated per step; `None` means all of them.
    #[serde(default)]
    pub coordinates: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl GradientSettings {
    pub fn new(optimizer: Optimizer, steps: usize, lr: f64) -> Self {
        Self {
            optimizer,
            steps,
            lr,
            coordinates: None,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::param("gradient baseline needs at least one step"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::param(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if self.coordinates == Some(0) {
            return Err(Error::param("coordinate subsample must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GradientRun {
    pub params: Vec<f64>,
    /// Loss at the start and after every step.
    pub losses: Vec<f64>,
    /// Finite-difference probes only; the loss trace is not counted.
    pub probe_evaluations: usize,
}

/// Minimizes `loss` with central finite differences and the chosen update.
///
/// With `coordinates = Some(m)` each step differentiates `m` coordinates drawn
/// without replacement; the rest see a zero gradient (their Adam moments still
/// decay). Parameters are clamped to [`MIN_SCALE`] after every step.
pub fn minimize_fd<F>(
    start: &[f64],
    settings: &GradientSettings,
    mut loss: F,
) -> Result<GradientRun>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    settings.validate()?;
    let n = start.len();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut x = start.to_vec();
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let mut grad = vec![0.0; n];
    let mut losses = vec![loss(&x)?];
    let mut probes = 0;
    let mut probe = x.clone();
    for step in 1..=settings.steps {
        grad.fill(0.0);
        let coords: Vec<usize> = match settings.coordinates {
            Some(k) if k < n => rand::seq::index::sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for &i in &coords {
            probe[i] = x[i] + FD_STEP;
            let up = loss(&probe)?;
            probe[i] = x[i] - FD_STEP;
            let down = loss(&probe)?;
            probe[i] = x[i];
            probes += 2;
            grad[i] = (up - down) / (2.0 * FD_STEP);
        }
        let t = step as i32;
        for i in 0..n {
            let g = grad[i];
            match settings.optimizer {
                Optimizer::Sgd => x[i] -= settings.lr * g,
                Optimizer::Adam | Optimizer::AdamW => {
                    if settings.optimizer == Optimizer::AdamW {
                        x[i] -= settings.lr * WEIGHT_DECAY * x[i];
                    }
                    m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                    v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
                    let m_hat = m[i] / (1.0 - BETA1.powi(t));
                    let v_hat = v[i] / (1.0 - BETA2.powi(t));
                    x[i] -= settings.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
            x[i] = x[i].max(MIN_SCALE);
            probe[i] = x[i];
        }
        losses.push(loss(&x)?);
    }
    Ok(GradientRun {
        params: x,
        losses,
        probe_evaluations: probes,
    })
}

/// Gradient descent on one block's scales against the calibration fitness.
/// Installs the final scales and returns the run.
pub fn gradient_baseline(
    model: &mut Model,
    fitness: &Fitness,
    block: usize,
    settings: &GradientSettings,
) -> Result<GradientRun> {
    let session = fitness.session(model, block)?;
    let start: Vec<f64> = model
        .block_scales(block)?
        .values()
        .iter()
        .map(|&v| v as f64)
        .collect();
    let run = minimize_fd(&start, settings, |x| {
        model.set_block_scales(block, &to_f32(x))?;
        session.score(model)
    })?;
    model.set_block_scales(block, &to_f32(&run.params))?;
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::losses::LossKind;
    use crate::model::ViTConfig;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn perturbation_follows_the_uniform_law() {
        let eps = 1e-3;
        let mut r = rng(1);
        let start = vec![1.0f64; 1000];
        let mut devs = Vec::with_capacity(100_000);
        for _ in 0..100 {
            let moved = perturb_values(&start, eps, &mut r);
            devs.extend(moved.iter().map(|m| m - 1.0));
        }
        let n = devs.len() as f64;
        let max = devs.iter().fold(0.0f64, |a, d| a.max(d.abs()));
        let mean = devs.iter().sum::<f64>() / n;
        let var = devs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
        assert!(max <= eps);
        // Standard error of the mean is eps/sqrt(3n), about 1.8e-6 here.
        assert!(mean.abs() < 1e-5, "mean {mean}");
        let expect = eps * eps / 3.0;
        assert!(
            (var / expect - 1.0).abs() < 0.05,
            "variance {var} vs {expect}"
        );
    }

    #[test]
    fn perturbation_clamps_to_positive() {
        let mut r = rng(2);
        for _ in 0..1000 {
            let moved = perturb_values(&[1e-9], 1e-4, &mut r);
            assert!(moved[0] >= MIN_SCALE);
        }
    }

    #[test]
    fn vanishing_epsilon_leaves_scales() {
        let mut r = rng(3);
        let start = [0.5, 0.25, 0.07];
        assert_eq!(perturb_values(&start, 1e-30, &mut r), start.to_vec());
    }

    #[test]
    fn block_scale_perturbation_keeps_layout() {
        let model = Model::init(ViTConfig::default(), 1).unwrap();
        let scales = model.block_scales(0).unwrap();
        let moved = perturb(&scales, 1e-4, &mut rng(4)).unwrap();
        assert_eq!(moved.segments(), scales.segments());
        for (a, b) in moved.values().iter().zip(scales.values()) {
            assert!((a - b).abs() as f64 <= 1e-4 + f32::EPSILON as f64 * b.abs() as f64);
        }
        assert!(perturb(&scales, 0.0, &mut rng(4)).is_err());
    }

    #[test]
    fn settings_validation() {
        assert!(SearchSettings::default().validate().is_ok());
        let bad = |f: fn(&mut SearchSettings)| {
            let mut s = SearchSettings::default();
            f(&mut s);
            s.validate().is_err()
        };
        assert!(bad(|s| s.population = 0));
        assert!(bad(|s| s.samples = 0));
        assert!(bad(|s| s.samples = 16));
        assert!(bad(|s| s.epsilon = 0.0));
        assert!(bad(|s| s.epsilon = f64::NAN));
        assert_eq!(SearchSettings::for_bits(8, 0).epsilon, 1e-3);
        assert_eq!(SearchSettings::for_bits(4, 0).epsilon, 1e-4);
        assert_eq!(SearchSettings::for_bits(3, 0).epsilon, 1e-4);
    }

    #[test]
    fn population_tie_rules() {
        let c = |id, fitness| Candidate {
            scales: vec![],
            fitness,
            birth_cycle: -1,
            id,
        };
        let mut pop = Population::new(3);
        pop.insert(c(0, 1.0));
        pop.insert(c(1, 1.0));
        pop.insert(c(2, 0.5));
        pop.insert(c(3, 0.5));
        assert_eq!(pop.best().id, 0);
        assert_eq!(pop.remove_worst().id, 3);
        assert_eq!(pop.remove_worst().id, 2);
        assert_eq!(pop.remove_worst().id, 1);
    }

    fn toy(target: &[f64]) -> impl Fn(&[f64]) -> Result<f64> + '_ {
        move |x| {
            Ok(-x
                .iter()
                .zip(target)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>())
        }
    }

    #[test]
    fn toy_fitness_improves_within_three_cycles() {
        let settings = SearchSettings {
            cycles: 3,
            epsilon: 1e-2,
            ..SearchSettings::default()
        };
        let mut wins = 0;
        for seed in 0..10 {
            let mut r = rng(seed);
            let start = vec![1.0; 2];
            let target: Vec<f64> = start
                .iter()
                .map(|s| s + 1e-2 * (2.0 * r.random::<f64>() - 1.0))
                .collect();
            let f = toy(&target);
            let f0 = f(&start).unwrap();
            let pop = evolve(&start, f0, &settings, &mut r, &f, |_| {}).unwrap();
            if pop.best().fitness > f0 {
                wins += 1;
            }
        }
        assert!(wins >= 9, "{wins}/10");
    }

    #[test]
    fn zero_cycles_returns_start_without_evaluating() {
        let settings = SearchSettings {
            cycles: 0,
            ..SearchSettings::default()
        };
        let mut calls = 0;
        let pop = evolve(
            &[0.3, 0.4],
            -1.0,
            &settings,
            &mut rng(0),
            |_| {
                calls += 1;
                Ok(0.0)
            },
            |_| {},
        )
        .unwrap();
        assert_eq!(calls, 0);
        assert_eq!(pop.best().scales, vec![0.3, 0.4]);
    }

    #[test]
    fn non_finite_fitness_is_an_error() {
        let settings = SearchSettings::default();
        let err = evolve(
            &[1.0],
            0.0,
            &settings,
            &mut rng(0),
            |_| Ok(f64::NAN),
            |_| {},
        );
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn elitism_and_population_size(
            seed in 0u64..1000,
            k in 1usize..8,
            cycles in 0usize..12,
            dim in 1usize..6,
        ) {
            let settings = SearchSettings {
                population: k,
                samples: k.min(3),
                cycles,
                epsilon: 0.05,
                ..SearchSettings::default()
            };
            let start = vec![0.5; dim];
            let target = vec![0.55; dim];
            let f = |x: &[f64]| -> Result<f64> {
                // Rugged on purpose so plenty of children are worse.
                Ok(toy(&target)(x)? + 0.01 * x.iter().map(|v| (40.0 * v).sin()).sum::<f64>())
            };
            let f0 = f(&start).unwrap();
            let mut bests = vec![];
            let mut evaluations = 0;
            let pop = evolve(&start, f0, &settings, &mut rng(seed), f, |e| {
                evaluations += 1;
                bests.push((e.cycle, e.best_fitness));
            }).unwrap();
            let expect_size = if cycles == 0 { 1 } else { k };
            prop_assert_eq!(pop.len(), expect_size);
            prop_assert_eq!(evaluations, settings.evaluations_per_visit());
            prop_assert!(pop.best().fitness >= f0);
            for w in bests.windows(2) {
                prop_assert!(w[1].1 >= w[0].1);
            }
            // Seeds sit within ε of the start; each cycle adds at most ε more.
            let bound = (cycles as f64 + 1.0) * settings.epsilon + 1e-12;
            for c in pop.members() {
                for (a, b) in c.scales.iter().zip(&start) {
                    prop_assert!((a - b).abs() <= bound);
                }
            }
        }
    }

    fn tiny_setup(seed: u64, count: usize) -> (Model, Fitness) {
        let cfg = ViTConfig {
            embed_dim: 16,
            heads: 2,
            blocks: 2,
            tokens: 4,
            classes: 4,
            ..ViTConfig::default()
        };
        let data = synth_dataset(count, cfg.tokens, cfg.embed_dim, cfg.classes, seed, 4.0).unwrap();
        let fp_cfg = ViTConfig {
            weight_bits: 32,
            activation_bits: 32,
            ..cfg
        };
        let fp = Model::init_calibrated(fp_cfg, seed, Some(data.samples())).unwrap();
        let q = Model::init_calibrated(cfg, seed, Some(data.samples())).unwrap();
        let fitness = Fitness::new(&fp, &data, 8, LossKind::InfoNce, 0.1).unwrap();
        (q, fitness)
    }

    fn small_settings(seed: u64) -> SearchSettings {
        SearchSettings {
            passes: 2,
            population: 4,
            cycles: 2,
            samples: 2,
            epsilon: 1e-3,
            seed,
        }
    }

    #[test]
    fn run_counts_evaluations_and_keeps_elitism() {
        let (mut model, fitness) = tiny_setup(5, 32);
        let settings = small_settings(9);
        let report = run(&mut model, &fitness, &settings).unwrap();
        let per_visit = settings.evaluations_per_visit();
        assert_eq!(report.trace.len(), 2 * 2 * per_visit);
        assert_eq!(report.evaluations, 1 + report.trace.len());
        assert!(report.final_score <= report.initial_score);
        for w in report.trace.windows(2) {
            assert!(w[1].best_fitness >= w[0].best_fitness);
        }
        // The carried-over fitness is the installed model's actual score.
        assert_eq!(fitness.score(&model).unwrap(), report.final_score);
    }

    #[test]
    fn run_is_deterministic() {
        let settings = small_settings(3);
        let (mut a, fitness) = tiny_setup(6, 32);
        let mut b = a.clone();
        let ra = run(&mut a, &fitness, &settings).unwrap();
        let rb = run(&mut b, &fitness, &settings).unwrap();
        assert_eq!(ra.trace, rb.trace);
        assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn zero_passes_leave_the_model_untouched() {
        let (mut model, fitness) = tiny_setup(7, 16);
        let before = model.content_hash();
        let settings = SearchSettings {
            passes: 0,
            ..small_settings(0)
        };
        let report = run(&mut model, &fitness, &settings).unwrap();
        assert!(report.trace.is_empty());
        assert_eq!(report.evaluations, 1);
        assert_eq!(model.content_hash(), before);
    }

    #[test]
    fn search_block_touches_only_its_block() {
        let (mut model, fitness) = tiny_setup(8, 16);
        let other = model.block_scales(0).unwrap();
        let before = -fitness.score(&model).unwrap();
        let scales = search_block(&mut model, &fitness, 1, &small_settings(1)).unwrap();
        assert_eq!(model.block_scales(0).unwrap(), other);
        assert_eq!(model.block_scales(1).unwrap(), scales);
        assert!(-fitness.score(&model).unwrap() >= before);
        assert!(search_block(&mut model, &fitness, 2, &small_settings(1)).is_err());
    }

    #[test]
    fn trace_csv_layout() {
        let rows = vec![TraceRow {
            pass: 0,
            block: 1,
            cycle: -1,
            candidate_id: 2,
            fitness: -0.5,
            best_fitness: -0.25,
            wall_ms: 0.0,
        }];
        let mut out = Vec::new();
        write_trace_csv(&rows, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text, format!("{TRACE_HEADER}\n0,1,-1,2,-0.5,-0.25,0.000\n"));
    }

    #[test]
    fn es_minimizer_spends_its_budget() {
        let loss = |x: &[f64]| Ok(x.iter().map(|a| (a - 0.5).powi(2)).sum::<f64>());
        let settings = SearchSettings {
            epsilon: 0.05,
            ..SearchSettings::default()
        };
        let run = minimize_es(&[1.0, 0.2], 200, &settings, loss).unwrap();
        assert_eq!(run.evaluations, 200);
        assert!(run.loss < 0.34 * 1e-2, "{}", run.loss);
        assert_eq!(loss(&run.params).unwrap(), run.loss);
        assert!(minimize_es(&[1.0], 15, &settings, loss).is_err());
    }

    #[test]
    fn optimizer_names_round_trip() {
        for o in Optimizer::ALL {
            assert_eq!(o.to_string().parse::<Optimizer>().unwrap(), o);
        }
        assert!("rmsprop".parse::<Optimizer>().is_err());
    }

    #[test]
    fn sgd_converges_on_a_quadratic() {
        let target = [0.3, 0.7, 1.1, 0.05];
        let loss = |x: &[f64]| {
            Ok(x.iter()
                .zip(&target)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>())
        };
        let settings = GradientSettings::new(Optimizer::Sgd, 100, 0.1);
        let run = minimize_fd(&[1.0; 4], &settings, loss).unwrap();
        for (a, b) in run.params.iter().zip(&target) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
        assert_eq!(run.losses.len(), 101);
        assert_eq!(run.probe_evaluations, 100 * 2 * 4);
    }

    #[test]
    fn adam_and_adamw_descend() {
        let loss = |x: &[f64]| Ok(x.iter().map(|a| (a - 0.5).powi(2)).sum::<f64>());
        for o in [Optimizer::Adam, Optimizer::AdamW] {
            let run = minimize_fd(&[1.0; 3], &GradientSettings::new(o, 200, 0.01), loss).unwrap();
            assert!(
                run.losses.last().unwrap() < &1e-3,
                "{o}: {:?}",
                run.losses.last()
            );
        }
    }

    #[test]
    fn adamw_decay_pulls_toward_zero_on_a_flat_loss() {
        let run = minimize_fd(
            &[1.0],
            &GradientSettings::new(Optimizer::AdamW, 10, 0.1),
            |_| Ok(0.0),
        )
        .unwrap();
        assert!((run.params[0] - 0.999f64.powi(10)).abs() < 1e-12);
    }

    #[test]
    fn coordinate_subsampling_counts_probes() {
        let settings = GradientSettings {
            coordinates: Some(2),
            ..GradientSettings::new(Optimizer::Sgd, 5, 0.1)
        };
        let run = minimize_fd(&[1.0; 6], &settings, |x| Ok(x.iter().sum())).unwrap();
        assert_eq!(run.probe_evaluations, 5 * 2 * 2);
        let moved = run.params.iter().filter(|v| **v != 1.0).count();
        assert!((2..=6).contains(&moved));
    }

    #[test]
    fn gradient_settings_validation() {
        let loss = |_: &[f64]| Ok(0.0);
        assert!(minimize_fd(&[1.0], &GradientSettings::new(Optimizer::Sgd, 0, 0.1), loss).is_err());
        assert!(minimize_fd(&[1.0], &GradientSettings::new(Optimizer::Sgd, 1, 0.0), loss).is_err());
    }

    #[test]
    fn gradient_baseline_installs_its_result() {
        let (mut model, fitness) = tiny_setup(9, 16);
        let settings = GradientSettings {
            coordinates: Some(4),
            ..GradientSettings::new(Optimizer::Adam, 2, 1e-4)
        };
        let run = gradient_baseline(&mut model, &fitness, 0, &settings).unwrap();
        let installed = model.block_scales(0).unwrap();
        let expect: Vec<f32> = run.params.iter().map(|&v| v as f32).collect();
        assert_eq!(installed.values(), &expect[..]);
        assert_eq!(fitness.score(&model).unwrap(), *run.losses.last().unwrap());
    }
}
