//! Loss-landscape probes around a block's scales, a roughness measure, and
//! synthetic egg-carton surfaces for optimizer comparisons.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::Fitness;
use crate::model::Model;
use crate::search::{
    minimize_es, minimize_fd, GradientSettings, Optimizer, SearchSettings, MIN_SCALE,
};

/// One probe axis: a single scale coordinate or an explicit direction.
#[derive(Debug, Clone, PartialEq)]
pub enum Direction {
    Coordinate(usize),
    /// Normalized to unit length before use.
    Vector(Vec<f64>),
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Direction::Coordinate(i) => write!(f, "e{i}"),
            Direction::Vector(v) => write!(f, "vector[{}]", v.len()),
        }
    }
}

impl Direction {
    fn unit(&self, len: usize) -> Result<Vec<f64>> {
        match self {
            Direction::Coordinate(i) => {
                if *i >= len {
                    return Err(Error::param(format!(
                        "direction index {i} out of range for {len} scales"
                    )));
                }
                let mut u = vec![0.0; len];
                u[*i] = 1.0;
                Ok(u)
            }
            Direction::Vector(v) => {
                if v.len() != len {
                    return Err(Error::dim(format!(
                        "direction has {} entries, block has {len}",
                        v.len()
                    )));
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if !(norm.is_finite() && norm > 0.0) {
                    return Err(Error::param("direction vector must be finite and nonzero"));
                }
                Ok(v.iter().map(|x| x / norm).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSpec {
    pub block: usize,
    pub direction_a: Direction,
    pub direction_b: Direction,
    pub half_range: f64,
    /// Odd, so the center cell is the unperturbed model.
    pub steps: usize,
}

impl ProbeSpec {
    fn validate(&self) -> Result<()> {
        if self.steps < 3 || self.steps % 2 == 0 {
            return Err(Error::param(format!(
                "grid steps {} must be odd and at least 3",
                self.steps
            )));
        }
        if !(self.half_range.is_finite() && self.half_range > 0.0) {
            return Err(Error::param(format!(
                "half range {} must be positive",
                self.half_range
            )));
        }
        Ok(())
    }

    /// Symmetric offsets with an exact zero in the middle.
    pub fn offsets(&self) -> Vec<f64> {
        let n = self.steps as f64 - 1.0;
        (0..self.steps)
            .map(|i| self.half_range * (2.0 * i as f64 - n) / n)
            .collect()
    }
}

/// The two weight-scale coordinates used when no direction is given.
///
/// Weight points are ranked by the variance of their per-channel scales; the
/// largest-scale channel of the top two points gives the two axes.
pub fn default_directions(model: &Model, block: usize) -> Result<(Direction, Direction)> {
    let scales = model.block_scales(block)?;
    let mut ranked: Vec<(f64, usize)> = scales
        .segments()
        .iter()
        .filter(|s| s.point.is_weight())
        .map(|s| {
            let vals = &scales.values()[s.offset..s.offset + s.len];
            let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / vals.len() as f64;
            let var =
                vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            let top = (0..vals.len()).fold(0, |b, i| if vals[i] > vals[b] { i } else { b });
            (var, s.offset + top)
        })
        .collect();
    // Stable sort keeps canonical order among equal variances.
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    match ranked.as_slice() {
        [a, b, ..] => Ok((Direction::Coordinate(a.1), Direction::Coordinate(b.1))),
        _ => Err(Error::param("block has fewer than two weight points")),
    }
}

/// `steps × steps` losses; row `i` is offset `a_offsets[i]`, column `j` is
/// offset `b_offsets[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeGrid {
    pub steps: usize,
    pub values: Vec<f64>,
    pub a_offsets: Vec<f64>,
    pub b_offsets: Vec<f64>,
    /// Written as `# key: value` comment lines.
    pub metadata: Vec<(String, String)>,
}

impl LandscapeGrid {
    /// Grid from a function on `[lo, hi]²`, used for analytic surfaces.
    pub fn from_fn(steps: usize, lo: f64, hi: f64, f: impl Fn(f64, f64) -> f64) -> Self {
        let axis: Vec<f64> = (0..steps)
            .map(|i| lo + (hi - lo) * i as f64 / (steps as f64 - 1.0))
            .collect();
        let mut values = Vec::with_capacity(steps * steps);
        for &a in &axis {
            for &b in &axis {
                values.push(f(a, b));
            }
        }
        Self {
            steps,
            values,
            a_offsets: axis.clone(),
            b_offsets: axis,
            metadata: Vec::new(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.steps + j]
    }

    pub fn center(&self) -> f64 {
        let c = self.steps / 2;
        self.get(c, c)
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        for (k, v) in &self.metadata {
            writeln!(out, "# {k}: {v}")?;
        }
        write!(out, "a\\b")?;
        for b in &self.b_offsets {
            write!(out, ",{b}")?;
        }
        writeln!(out)?;
        for (i, a) in self.a_offsets.iter().enumerate() {
            write!(out, "{a}")?;
            for j in 0..self.steps {
                write!(out, ",{}", self.get(i, j))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// Binary 8-bit PGM, min-max normalized. A constant grid is all black.
    pub fn write_pgm(&self, mut out: impl Write) -> std::io::Result<()> {
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self
            .values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        write!(out, "P5\n{} {}\n255\n", self.steps, self.steps)?;
        let pixels: Vec<u8> = self
            .values
            .iter()
            .map(|v| {
                if span > 0.0 {
                    ((v - lo) / span * 255.0).round() as u8
                } else {
                    0
                }
            })
            .collect();
        out.write_all(&pixels)
    }
}

/// Evaluates `fitness` on a grid of scale perturbations of one block.
///
/// Each cell sets `Δ + a·u + b·v` (clamped to stay positive) and scores the
/// model. The block's original scales are restored before returning, also on
/// error.
pub fn probe(model: &mut Model, fitness: &Fitness, spec: &ProbeSpec) -> Result<LandscapeGrid> {
    spec.validate()?;
    let original = model.block_scales(spec.block)?;
    let len = original.len();
    let u = spec.direction_a.unit(len)?;
    let v = spec.direction_b.unit(len)?;
    let cos: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    if cos.abs() >= 1.0 - 1e-12 {
        return Err(Error::param("probe directions must be distinct"));
    }
    let base: Vec<f64> = original.values().iter().map(|&x| x as f64).collect();
    let offsets = spec.offsets();
    let session = fitness.session(model, spec.block)?;
    let mut values = Vec::with_capacity(spec.steps * spec.steps);
    let mut cell = vec![0.0f32; len];
    let mut sweep = || -> Result<()> {
        for &a in &offsets {
            for &b in &offsets {
                for (k, c) in cell.iter_mut().enumerate() {
                    *c = (base[k] + a * u[k] + b * v[k]).max(MIN_SCALE) as f32;
                }
                model.set_block_scales(spec.block, &cell)?;
                values.push(session.score(model)?);
            }
        }
        Ok(())
    };
    let outcome = sweep();
    model.set_block_scales(spec.block, original.values())?;
    outcome?;
    let metadata = vec![
        ("block".into(), spec.block.to_string()),
        (
            "direction_a".into(),
            describe(model, spec.block, &spec.direction_a),
        ),
        (
            "direction_b".into(),
            describe(model, spec.block, &spec.direction_b),
        ),
        ("half_range".into(), spec.half_range.to_string()),
        ("steps".into(), spec.steps.to_string()),
        ("loss".into(), fitness.loss().to_string()),
        ("model_hash".into(), model.content_hash()),
    ];
    Ok(LandscapeGrid {
        steps: spec.steps,
        values,
        b_offsets: offsets.clone(),
        a_offsets: offsets,
        metadata,
    })
}

fn describe(model: &Model, block: usize, d: &Direction) -> String {
    let located = match d {
        Direction::Coordinate(i) => model.block_scales(block).ok().and_then(|s| s.locate(*i)),
        Direction::Vector(_) => None,
    };
    match located {
        Some((point, channel)) => format!("{d} ({point}[{channel}])"),
        None => d.to_string(),
    }
}

/// Fraction of interior cells that are strict extrema among their eight
/// neighbours. Plateaus and monotone surfaces score 0.
pub fn roughness(grid: &LandscapeGrid) -> f64 {
    let n = grid.steps;
    if n < 3 {
        return 0.0;
    }
    let mut extrema = 0usize;
    for i in 1..n - 1 {
        for j in 1..n - 1 {
            let c = grid.get(i, j);
            let (mut above, mut below) = (true, true);
            for di in [0, 1, 2] {
                for dj in [0, 1, 2] {
                    if di == 1 && dj == 1 {
                        continue;
                    }
                    let nb = grid.get(i + di - 1, j + dj - 1);
                    above &= c > nb;
                    below &= c < nb;
                }
            }
            if above || below {
                extrema += 1;
            }
        }
    }
    extrema as f64 / ((n - 2) * (n - 2)) as f64
}

/// `f(Δ) = q·‖Δ − Δ*‖² + a·Σ sin²(ω·δᵢ)` with every `δ*ᵢ` a multiple of
/// `π/ω`, so `Δ*` is the exact global minimum with `f(Δ*) = 0` (up to the
/// rounding of `sin(kπ)`).
#[derive(Debug, Clone, PartialEq)]
pub struct EggCarton {
    pub omega: f64,
    pub amplitude: f64,
    pub quadratic: f64,
    optimum: Vec<f64>,
}

/// Multiples of `π/ω` drawn for the optimum.
const OPTIMUM_MULTIPLES: std::ops::Range<u32> = 5..20;

impl EggCarton {
    /// Optimum coordinates are `kπ/ω` with `k` drawn uniformly from 5..20.
    pub fn new(dim: usize, omega: f64, amplitude: f64, quadratic: f64, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::param("egg carton needs at least one dimension"));
        }
        if !(omega.is_finite() && omega > 0.0) {
            return Err(Error::param(format!("frequency {omega} must be positive")));
        }
        if !(amplitude >= 0.0 && quadratic >= 0.0) {
            return Err(Error::param(
                "amplitude and quadratic weight must be non-negative",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let optimum = (0..dim)
            .map(|_| rng.random_range(OPTIMUM_MULTIPLES) as f64 * PI / omega)
            .collect();
        Ok(Self {
            omega,
            amplitude,
            quadratic,
            optimum,
        })
    }

    pub fn dim(&self) -> usize {
        self.optimum.len()
    }

    pub fn optimum(&self) -> &[f64] {
        &self.optimum
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let mut quad = 0.0;
        let mut ripple = 0.0;
        for (xi, oi) in x.iter().zip(&self.optimum) {
            quad += (xi - oi).powi(2);
            ripple += (self.omega * xi).sin().powi(2);
        }
        self.quadratic * quad + self.amplitude * ripple
    }

    /// The optimum shifted by `U(−spread, spread)` per coordinate.
    pub fn start_point(&self, spread: f64, rng: &mut impl Rng) -> Vec<f64> {
        self.optimum
            .iter()
            .map(|o| (o + spread * (2.0 * rng.random::<f64>() - 1.0)).max(MIN_SCALE))
            .collect()
    }
}

/// Final losses of one paired ES-versus-gradient run.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerComparison {
    pub start: f64,
    pub es: f64,
    /// In [`Optimizer::ALL`] order.
    pub gradient: Vec<(Optimizer, f64)>,
    /// Evaluations given to ES: steps × 2 × dim.
    pub budget: usize,
}

/// Settings for [`compare_optimizers`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComparisonSettings {
    pub steps: usize,
    pub lr: f64,
    pub epsilon: f64,
    /// Start-point offset around the optimum.
    pub spread: f64,
    pub seed: u64,
}

impl Default for ComparisonSettings {
    fn default() -> Self {
        Self {
            steps: 50,
            lr: 1e-3,
            epsilon: 1e-3,
            spread: 0.5,
            seed: 0,
        }
    }
}

/// Runs ES and the three gradient optimizers from one shared start point.
///
/// The gradient methods take `steps` full central-difference steps; ES gets
/// the same number of function evaluations. The step sizes are matched
/// (`lr` and `epsilon` default to the same value).
pub fn compare_optimizers(
    surface: &EggCarton,
    settings: &ComparisonSettings,
) -> Result<OptimizerComparison> {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let start = surface.start_point(settings.spread, &mut rng);
    let loss = |x: &[f64]| Ok(surface.value(x));
    let budget = settings.steps * 2 * surface.dim();
    let es_settings = SearchSettings {
        epsilon: settings.epsilon,
        seed: settings.seed.wrapping_add(1),
        ..SearchSettings::default()
    };
    let es = minimize_es(&start, budget, &es_settings, loss)?;
    let gradient = Optimizer::ALL
        .into_iter()
        .map(|o| {
            let run = minimize_fd(
                &start,
                &GradientSettings::new(o, settings.steps, settings.lr),
                loss,
            )?;
            Ok((o, *run.losses.last().expect("at least one step")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OptimizerComparison {
        start: surface.value(&start),
        es: es.loss,
        gradient,
        budget,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::losses::LossKind;
    use crate::model::ViTConfig;
    use crate::search::{minimize_fd, GradientSettings};

    #[test]
    fn plane_and_constant_are_smooth() {
        assert_eq!(
            roughness(&LandscapeGrid::from_fn(21, -1.0, 1.0, |x, y| x + y)),
            0.0
        );
        assert_eq!(
            roughness(&LandscapeGrid::from_fn(21, -1.0, 1.0, |_, _| 3.0)),
            0.0
        );
    }

    #[test]
    fn product_of_sines_matches_analytic_layout() {
        // sin(3πx) has six extrema on (−1, 1), at ±1/6, ±1/2 and ±5/6. On the
        // 0.1-spaced grid each is a strict 1-D extremum at the nearest node,
        // and the product is a strict 2-D extremum exactly where both factors
        // are: 6 × 6 of the 19 × 19 interior cells.
        let grid = LandscapeGrid::from_fn(21, -1.0, 1.0, |x, y| {
            (3.0 * PI * x).sin() * (3.0 * PI * y).sin()
        });
        assert_eq!(roughness(&grid), 36.0 / 361.0);
    }

    #[test]
    fn offsets_are_symmetric_with_exact_center() {
        let spec = ProbeSpec {
            block: 0,
            direction_a: Direction::Coordinate(0),
            direction_b: Direction::Coordinate(1),
            half_range: 1e-3,
            steps: 21,
        };
        let o = spec.offsets();
        assert_eq!(o[10], 0.0);
        assert_eq!(o[0], -1e-3);
        assert_eq!(o[20], 1e-3);
        for i in 0..21 {
            assert_eq!(o[i], -o[20 - i]);
        }
    }

    #[test]
    fn csv_and_pgm_layout() {
        let mut grid = LandscapeGrid::from_fn(3, 0.0, 1.0, |x, y| x + 2.0 * y);
        grid.metadata.push(("seed".into(), "4".into()));
        let mut csv = Vec::new();
        grid.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# seed: 4");
        assert_eq!(lines[1], "a\\b,0,0.5,1");
        assert_eq!(lines[2], "0,0,1,2");
        assert_eq!(lines[4], "1,1,2,3");
        let mut pgm = Vec::new();
        grid.write_pgm(&mut pgm).unwrap();
        assert!(pgm.starts_with(b"P5\n3 3\n255\n"));
        let px = &pgm[pgm.len() - 9..];
        assert_eq!(px[0], 0);
        assert_eq!(px[8], 255);
        assert_eq!(px[4], 128);
    }

    #[test]
    fn egg_carton_quadratic_only() {
        let s = EggCarton::new(5, 40.0, 0.0, 1.0, 3).unwrap();
        assert_eq!(s.value(s.optimum()), 0.0);
        let mut off = s.optimum().to_vec();
        off[2] += 0.1;
        assert!((s.value(&off) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn egg_carton_one_dimensional_minima() {
        // q = 0, one dimension: local minima of sin²(ωx) at kπ/ω.
        let omega = 7.0;
        let s = EggCarton::new(1, omega, 1.0, 0.0, 0).unwrap();
        let h = 1e-4;
        let xs: Vec<f64> = (0..=20_000).map(|i| i as f64 * h).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| s.value(&[x])).collect();
        let minima: Vec<f64> = (1..xs.len() - 1)
            .filter(|&i| ys[i] < ys[i - 1] && ys[i] < ys[i + 1])
            .map(|i| xs[i])
            .collect();
        assert_eq!(minima.len(), 4); // kπ/7 for k = 1..=4 inside (0, 2)
        for (k, m) in minima.iter().enumerate() {
            assert!((m - (k + 1) as f64 * PI / omega).abs() <= h);
        }
    }

    #[test]
    fn egg_carton_minima_count_at_omega_20() {
        // On [0, 1]², minima of sin²(20x) + sin²(20y) sit at (jπ/20, kπ/20);
        // j, k = 1..=6 are interior, so 36 strict grid minima.
        let s = EggCarton::new(2, 20.0, 1.0, 0.0, 0).unwrap();
        let grid = LandscapeGrid::from_fn(401, 0.0, 1.0, |x, y| s.value(&[x, y]));
        let n = grid.steps;
        let mut minima = 0;
        for i in 1..n - 1 {
            for j in 1..n - 1 {
                let c = grid.get(i, j);
                let lower = (0..3).all(|di| {
                    (0..3).all(|dj| (di == 1 && dj == 1) || c < grid.get(i + di - 1, j + dj - 1))
                });
                minima += lower as usize;
            }
        }
        assert_eq!(minima, 36);
    }

    #[test]
    fn egg_carton_optimum_matches_brute_force() {
        let s = EggCarton::new(2, 6.0, 1.0, 0.3, 11).unwrap();
        let (lo, hi, n) = (0.0, 12.0, 2401);
        let step = (hi - lo) / (n as f64 - 1.0);
        let grid = LandscapeGrid::from_fn(n, lo, hi, |x, y| s.value(&[x, y]));
        let arg = (0..grid.values.len()).fold(0, |b, i| {
            if grid.values[i] < grid.values[b] {
                i
            } else {
                b
            }
        });
        let found = [grid.a_offsets[arg / n], grid.b_offsets[arg % n]];
        for (f, o) in found.iter().zip(s.optimum()) {
            assert!((f - o).abs() <= step, "{f} vs {o}");
        }
        assert!(s.value(s.optimum()) < 1e-28);
    }

    #[test]
    fn egg_carton_validation() {
        assert!(EggCarton::new(0, 1.0, 1.0, 1.0, 0).is_err());
        assert!(EggCarton::new(1, 0.0, 1.0, 1.0, 0).is_err());
        assert!(EggCarton::new(1, 1.0, -1.0, 1.0, 0).is_err());
    }

    #[test]
    fn gradient_stalls_on_a_symmetric_peak_while_es_escapes() {
        let s = EggCarton::new(2, 20.0, 1.0, 0.0, 0).unwrap();
        let peak = vec![PI / 2.0 / 20.0 + 5.0 * PI / 20.0; 2];
        let loss = |x: &[f64]| Ok(s.value(x));
        let top = s.value(&peak);
        let sgd = minimize_fd(
            &peak,
            &GradientSettings::new(Optimizer::Sgd, 20, 1e-3),
            loss,
        )
        .unwrap();
        for (a, b) in sgd.params.iter().zip(&peak) {
            assert!((a - b).abs() < 1e-9);
        }
        let settings = SearchSettings {
            epsilon: 1e-2,
            ..SearchSettings::default()
        };
        let es = minimize_es(&peak, 80, &settings, loss).unwrap();
        assert!(es.loss < top - 1e-3, "{} vs {top}", es.loss);
    }

    #[test]
    fn comparison_runs_with_equal_budgets() {
        let s = EggCarton::new(4, 40.0, 1.0, 0.1, 1).unwrap();
        let settings = ComparisonSettings {
            steps: 5,
            ..ComparisonSettings::default()
        };
        let c = compare_optimizers(&s, &settings).unwrap();
        assert_eq!(c.budget, 5 * 2 * 4);
        assert_eq!(c.gradient.len(), 3);
        assert!(c.es <= c.start);
        assert_eq!(c, compare_optimizers(&s, &settings).unwrap());
    }

    fn setup(bits: u8) -> (Model, Fitness) {
        let cfg = ViTConfig {
            embed_dim: 16,
            heads: 2,
            blocks: 2,
            tokens: 4,
            classes: 4,
            weight_bits: bits,
            activation_bits: if bits == 32 { 32 } else { 8 },
            ..ViTConfig::default()
        };
        let data = synth_dataset(48, cfg.tokens, cfg.embed_dim, cfg.classes, 3, 4.0).unwrap();
        let calib = data.slice(0..16).unwrap();
        let eval = data.slice(16..48).unwrap();
        let fp = Model::init_calibrated(
            ViTConfig {
                weight_bits: 32,
                activation_bits: 32,
                ..cfg
            },
            2,
            Some(calib.samples()),
        )
        .unwrap();
        let q = Model::init_calibrated(cfg, 2, Some(calib.samples())).unwrap();
        (
            q,
            Fitness::new(&fp, &eval, 8, LossKind::InfoNce, 0.1).unwrap(),
        )
    }

    fn spec(model: &Model, steps: usize, half_range: f64) -> ProbeSpec {
        let (a, b) = default_directions(model, 1).unwrap();
        ProbeSpec {
            block: 1,
            direction_a: a,
            direction_b: b,
            half_range,
            steps,
        }
    }

    #[test]
    fn probe_restores_model_and_centers_on_it() {
        let (mut model, fitness) = setup(4);
        let before = model.content_hash();
        let s = spec(&model, 5, 1e-2);
        let grid = probe(&mut model, &fitness, &s).unwrap();
        assert_eq!(model.content_hash(), before);
        assert_eq!(grid.center(), fitness.score(&model).unwrap());
        assert_eq!(grid.values.len(), 25);
        assert!(grid.values.iter().all(|v| v.is_finite()));
        assert!(grid
            .metadata
            .iter()
            .any(|(k, v)| k == "model_hash" && *v == before));
    }

    #[test]
    fn tiny_range_grid_is_flat() {
        let (mut model, fitness) = setup(4);
        let s = spec(&model, 3, 1e-300);
        let grid = probe(&mut model, &fitness, &s).unwrap();
        assert!(grid.values.iter().all(|v| *v == grid.center()));
    }

    #[test]
    fn passthrough_landscape_is_flat() {
        let (mut model, fitness) = setup(32);
        let s = spec(&model, 5, 1e-2);
        let grid = probe(&mut model, &fitness, &s).unwrap();
        assert_eq!(roughness(&grid), 0.0);
    }

    #[test]
    fn probe_rejects_bad_specs() {
        let (mut model, fitness) = setup(4);
        let before = model.content_hash();
        let mut s = spec(&model, 4, 1e-2);
        assert!(probe(&mut model, &fitness, &s).is_err());
        s.steps = 5;
        s.direction_b = s.direction_a.clone();
        assert!(probe(&mut model, &fitness, &s).is_err());
        s.direction_b = Direction::Coordinate(100_000);
        assert!(probe(&mut model, &fitness, &s).is_err());
        s.direction_b = Direction::Vector(vec![0.0; 3]);
        assert!(probe(&mut model, &fitness, &s).is_err());
        s.half_range = 0.0;
        assert!(probe(&mut model, &fitness, &s).is_err());
        assert_eq!(model.content_hash(), before);
    }

    #[test]
    fn default_directions_pick_weight_coordinates() {
        let (model, _) = setup(4);
        let (a, b) = default_directions(&model, 0).unwrap();
        let scales = model.block_scales(0).unwrap();
        for d in [a, b] {
            let Direction::Coordinate(i) = d else {
                panic!("expected a coordinate")
            };
            assert!(scales.locate(i).unwrap().0.is_weight());
        }
    }
}
