//! Statistics-matching synthesis.
//!
//! Starting from the source plus seeded Gaussian noise in the periphery, the
//! canvas is moved downhill on
//!
//! ```text
//! loss = (1 / R) * sum_r sum_k ((stat_rk(canvas) - target_rk) / max(|target_rk|, 1e-3))^2
//! ```
//!
//! with a backtracking line search that halves the step until the loss
//! strictly decreases. Every candidate is projected back into `[0, 1]` and has
//! its fovea reset to the source, so the loss sequence is nonincreasing and
//! the fovea is preserved exactly.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::imagekit::Image;
use crate::pooling::PoolingLayout;
use crate::texstats::{
    self, build_pyramid_with, region_windows, stats_vjp, RegionWindows, StatSchema, StatVector, StatsConfig,
};
use crate::{Error, Result, Scalar};

pub const DEFAULT_NOISE_SIGMA: f64 = 0.2;
pub const NORMALIZER_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    pub noise_sigma: f64,
    /// Largest per-pixel change of the first trial step.
    pub initial_step: f64,
    /// Line search gives up once the trial step falls below this.
    pub min_step: f64,
    /// History length of the quasi-Newton direction; 0 gives steepest descent.
    pub memory: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            max_iters: 400,
            tol: 1e-10,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            initial_step: 0.05,
            min_step: 1e-12,
            memory: 0,
        }
    }
}

/// Optimizer state after a run.
#[derive(Debug, Clone)]
pub struct SynthState<T> {
    pub canvas: Image<T>,
    pub iteration: usize,
    pub loss: f64,
    pub loss_history: Vec<f64>,
    pub rng_seed: u64,
    pub converged: bool,
}

/// Targets bound to a layout with precomputed per-level windows.
pub struct Problem<T> {
    layout: PoolingLayout,
    config: StatsConfig,
    windows: Vec<RegionWindows>,
    targets: Vec<Vec<T>>,
    normalizers: Vec<Vec<T>>,
    schema: Arc<StatSchema>,
}

impl<T: Scalar> Problem<T> {
    pub fn new(layout: &PoolingLayout, targets: &[StatVector<T>]) -> Result<Self> {
        let schema = targets
            .first()
            .map(|t| t.schema.clone())
            .unwrap_or_else(|| Arc::new(StatSchema::new(StatsConfig::default())));
        if targets.len() != layout.len() {
            return Err(Error::SchemaMismatch(format!(
                "{} targets for {} regions",
                targets.len(),
                layout.len()
            )));
        }
        for (i, t) in targets.iter().enumerate() {
            if t.schema != schema || t.region_id != i {
                return Err(Error::SchemaMismatch(format!("target {i} is not aligned with the layout")));
            }
        }
        let config = schema.config;
        let windows = layout
            .regions
            .iter()
            .map(|r| region_windows(r, layout.height(), layout.width(), &config))
            .collect();
        let floor = T::lit(NORMALIZER_FLOOR);
        Ok(Self {
            layout: layout.clone(),
            config,
            windows,
            targets: targets.iter().map(|t| t.values.clone()).collect(),
            normalizers: targets
                .iter()
                .map(|t| t.values.iter().map(|v| v.abs().max(floor)).collect())
                .collect(),
            schema,
        })
    }

    pub fn layout(&self) -> &PoolingLayout {
        &self.layout
    }

    fn check_canvas(&self, canvas: &Image<T>) -> Result<()> {
        if canvas.channels() != 1 {
            return Err(Error::BadChannelCount {
                expected: "1",
                got: canvas.channels(),
            });
        }
        if canvas.height() != self.layout.height() || canvas.width() != self.layout.width() {
            return Err(Error::DimensionMismatch("canvas does not match layout".into()));
        }
        Ok(())
    }

    fn region_stats(&self, canvas: &Image<T>) -> Result<(texstats::Pyramid<T>, Vec<Vec<T>>)> {
        let pyr = build_pyramid_with(canvas, self.config)?;
        let stats = self
            .windows
            .iter()
            .enumerate()
            .map(|(i, w)| texstats::region_stats_windows(&pyr, w, i, &self.schema).map(|s| s.values))
            .collect::<Result<Vec<_>>>()?;
        Ok((pyr, stats))
    }

    fn loss_of(&self, stats: &[Vec<T>], iteration: usize) -> Result<f64> {
        let scale = 1.0 / self.targets.len().max(1) as f64;
        let mut loss = 0.0;
        for (r, ((s, t), n)) in stats.iter().zip(&self.targets).zip(&self.normalizers).enumerate() {
            for (k, ((&sv, &tv), &nv)) in s.iter().zip(t).zip(n).enumerate() {
                let term = ((sv - tv) / nv).as_f64();
                if !term.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        iteration,
                        region: r,
                        statistic: self.schema.entries[k].name(),
                        value: sv.as_f64(),
                    });
                }
                loss += scale * term * term;
            }
        }
        Ok(loss)
    }

    pub fn loss(&self, canvas: &Image<T>) -> Result<f64> {
        self.check_canvas(canvas)?;
        let (_, stats) = self.region_stats(canvas)?;
        self.loss_of(&stats, 0)
    }

    /// Loss and its gradient with respect to every canvas pixel; fovea
    /// gradients are zero.
    pub fn loss_and_grad(&self, canvas: &Image<T>) -> Result<(f64, Image<T>)> {
        self.loss_and_grad_at(canvas, 0)
    }

    fn loss_and_grad_at(&self, canvas: &Image<T>, iteration: usize) -> Result<(f64, Image<T>)> {
        self.check_canvas(canvas)?;
        let (pyr, stats) = self.region_stats(canvas)?;
        let loss = self.loss_of(&stats, iteration)?;
        let scale = T::lit(2.0 / self.targets.len().max(1) as f64);
        let upstream: Vec<Vec<T>> = stats
            .iter()
            .zip(&self.targets)
            .zip(&self.normalizers)
            .map(|((s, t), n)| {
                s.iter()
                    .zip(t)
                    .zip(n)
                    .map(|((&sv, &tv), &nv)| scale * (sv - tv) / (nv * nv))
                    .collect()
            })
            .collect();
        let mut grad = stats_vjp(&pyr, &self.windows, &upstream);
        zero_fovea(&mut grad, &self.layout);
        Ok((loss, grad))
    }
}

fn zero_fovea<T: Scalar>(img: &mut Image<T>, layout: &PoolingLayout) {
    let fix = *layout.fixation();
    for y in 0..img.height() {
        for x in 0..img.width() {
            if fix.in_fovea(y, x) {
                img.set(y, x, 0, T::zero());
            }
        }
    }
}

fn clamp_fovea<T: Scalar>(img: &mut Image<T>, src: &Image<T>, layout: &PoolingLayout) {
    let fix = *layout.fixation();
    for y in 0..img.height() {
        for x in 0..img.width() {
            if fix.in_fovea(y, x) {
                img.set(y, x, 0, src.get(y, x, 0));
            }
        }
    }
}

/// Loss and gradient for a canvas against per-region targets.
pub fn loss_and_grad<T: Scalar>(
    canvas: &Image<T>,
    layout: &PoolingLayout,
    targets: &[StatVector<T>],
) -> Result<(f64, Image<T>)> {
    Problem::new(layout, targets)?.loss_and_grad(canvas)
}

/// Initial canvas: the source with seeded Gaussian noise added outside the fovea.
pub fn initial_canvas<T: Scalar>(src: &Image<T>, layout: &PoolingLayout, seed: u64, sigma: f64) -> Image<T> {
    let mut canvas = src.clone();
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        let fix = *layout.fixation();
        for y in 0..canvas.height() {
            for x in 0..canvas.width() {
                let n = normal.sample(&mut rng);
                if !fix.in_fovea(y, x) {
                    let v = canvas.get(y, x, 0).as_f64() + n;
                    canvas.set(y, x, 0, T::lit(v));
                }
            }
        }
    }
    canvas.clamp_unit();
    canvas
}

pub fn synthesize<T: Scalar>(
    src: &Image<T>,
    layout: &PoolingLayout,
    targets: &[StatVector<T>],
    opts: &SynthOptions,
) -> Result<SynthState<T>> {
    let problem = Problem::new(layout, targets)?;
    problem.check_canvas(src)?;
    let mut canvas = initial_canvas(src, layout, opts.seed, opts.noise_sigma);
    let (mut loss, mut grad) = problem.loss_and_grad_at(&canvas, 0)?;
    let mut history = vec![loss];
    let mut lbfgs = Lbfgs::new(opts.memory);
    // steepest-descent step carried across iterations
    let mut sd_step = f64::NAN;
    let mut iteration = 0;
    let mut converged = loss < opts.tol;
    while !converged && iteration < opts.max_iters {
        let mut dir = lbfgs.direction(grad.data());
        let quasi_newton = lbfgs.len() > 0 && dot(&dir, grad.data()) > 0.0;
        if !quasi_newton {
            dir = grad.data().to_vec();
        }
        let dir_max = dir.iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs()));
        if dir_max == 0.0 {
            converged = true;
            break;
        }
        let mut step = if quasi_newton {
            1.0
        } else if sd_step.is_nan() {
            opts.initial_step / dir_max
        } else {
            sd_step
        };
        let mut accepted = None;
        while step * dir_max >= opts.min_step {
            let mut cand = canvas.clone();
            for (c, &d) in cand.data_mut().iter_mut().zip(&dir) {
                *c = *c - T::lit(step) * d;
            }
            cand.clamp_unit();
            clamp_fovea(&mut cand, src, layout);
            let cand_loss = problem.loss(&cand).map_err(|e| at_iteration(e, iteration + 1))?;
            if cand_loss < loss {
                accepted = Some((cand, cand_loss));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, _)) = accepted else {
            break;
        };
        iteration += 1;
        let (new_loss, new_grad) = problem.loss_and_grad_at(&cand, iteration)?;
        lbfgs.push(canvas.data(), cand.data(), grad.data(), new_grad.data());
        canvas = cand;
        loss = new_loss;
        grad = new_grad;
        history.push(loss);
        if !quasi_newton {
            sd_step = 2.0 * step;
        }
        converged = loss < opts.tol;
    }
    Ok(SynthState {
        canvas,
        iteration,
        loss,
        loss_history: history,
        rng_seed: opts.seed,
        converged,
    })
}

fn at_iteration(e: Error, iteration: usize) -> Error {
    match e {
        Error::NonFiniteLoss {
            region,
            statistic,
            value,
            ..
        } => Error::NonFiniteLoss {
            iteration,
            region,
            statistic,
            value,
        },
        other => other,
    }
}

/// Limited-memory BFGS two-loop recursion over the most recent curvature pairs.
struct Lbfgs<T> {
    memory: usize,
    pairs: std::collections::VecDeque<(Vec<T>, Vec<T>, f64)>,
}

impl<T: Scalar> Lbfgs<T> {
    fn new(memory: usize) -> Self {
        Self {
            memory,
            pairs: Default::default(),
        }
    }

    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn push(&mut self, x0: &[T], x1: &[T], g0: &[T], g1: &[T]) {
        if self.memory == 0 {
            return;
        }
        let s: Vec<T> = x1.iter().zip(x0).map(|(&a, &b)| a - b).collect();
        let y: Vec<T> = g1.iter().zip(g0).map(|(&a, &b)| a - b).collect();
        let sy = dot(&s, &y);
        // projection onto the box can break the curvature condition
        if sy <= 1e-12 * dot(&y, &y).max(f64::MIN_POSITIVE) {
            return;
        }
        if self.pairs.len() == self.memory {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
    }

    fn direction(&self, g: &[T]) -> Vec<T> {
        let mut q: Vec<f64> = g.iter().map(|v| v.as_f64()).collect();
        if self.pairs.is_empty() {
            return g.to_vec();
        }
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * s.iter().zip(&q).map(|(a, b)| a.as_f64() * b).sum::<f64>();
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi.as_f64();
            }
            alphas.push(a);
        }
        let (s, y, _) = self.pairs.back().expect("non-empty");
        let gamma = dot(s, y) / dot(y, y);
        for qi in &mut q {
            *qi *= gamma;
        }
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * y.iter().zip(&q).map(|(a, b)| a.as_f64() * b).sum::<f64>();
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si.as_f64();
            }
        }
        q.into_iter().map(T::lit).collect()
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum()
}
