//! Maximization of Bell values over measurement settings, state angle and
//! white-noise weight, and parameter sweeps built on top of it.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bell::{
    ch_from_statistics, chsh_from_joints, golden_section_max, local_bound_closed_form,
    local_bound_for_model, LocalSearchConfig, SettingsQuad,
};
use crate::counting::{
    detection_probabilities, plus_statistics, CompiledOutcomes, PlusStatistics, PoissonSource,
    SourceModel,
};
use crate::detectors::ResponseFunction;
use crate::error::{Error, Result};
use crate::quantum::{Outcome, TwoQubitState};
use crate::rng;

/// Two-qubit states the optimizer can vary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StateFamily {
    /// `cos θ |00> + sin θ |11>`.
    Pure { theta: f64 },
    /// `w |ψθ><ψθ| + (1 − w) 1/4`.
    PureWithNoise { theta: f64, w: f64 },
    Singlet,
    Werner { w: f64 },
}

impl StateFamily {
    pub fn state(&self) -> Result<TwoQubitState> {
        match *self {
            Self::Pure { theta } => Ok(TwoQubitState::pure_state(theta)),
            Self::PureWithNoise { theta, w } => TwoQubitState::pure_state(theta).add_white_noise(w),
            Self::Singlet => Ok(TwoQubitState::singlet()),
            Self::Werner { w } => TwoQubitState::werner(w),
        }
    }

    pub fn theta(&self) -> Option<f64> {
        match *self {
            Self::Pure { theta } | Self::PureWithNoise { theta, .. } => Some(theta),
            Self::Singlet | Self::Werner { .. } => None,
        }
    }

    /// Same family with a new angle; errors for the singlet families.
    pub fn with_theta(&self, theta: f64) -> Result<Self> {
        match *self {
            Self::Pure { .. } => Ok(Self::Pure { theta }),
            Self::PureWithNoise { w, .. } => Ok(Self::PureWithNoise { theta, w }),
            _ => Err(Error::InvalidScenario(
                "the state angle can only be varied for pure-state families".into(),
            )),
        }
    }

    /// Same state with white-noise weight `w` in front of it.
    pub fn with_weight(&self, w: f64) -> Self {
        match *self {
            Self::Pure { theta } | Self::PureWithNoise { theta, .. } => Self::PureWithNoise { theta, w },
            Self::Singlet | Self::Werner { .. } => Self::Werner { w },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Functional {
    Ch,
    PostselectedChsh,
}

/// One experimental configuration: state, source, detectors and the Bell
/// functional to evaluate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub state: StateFamily,
    pub source: SourceModel,
    pub response_a: ResponseFunction,
    pub response_b: ResponseFunction,
    pub functional: Functional,
    /// Optimize over the whole Bloch sphere instead of the x–z plane.
    pub full_sphere: bool,
}

impl Scenario {
    /// Identical detectors on both sides, settings in the x–z plane.
    pub fn new(
        state: StateFamily,
        source: SourceModel,
        response: ResponseFunction,
        functional: Functional,
    ) -> Self {
        Self {
            state,
            source,
            response_a: response.clone(),
            response_b: response,
            functional,
            full_sphere: false,
        }
    }

    pub fn with_state(&self, state: StateFamily) -> Self {
        Self {
            state,
            ..self.clone()
        }
    }

    /// Smallest photon number either party can detect.
    pub fn threshold(&self) -> u32 {
        self.response_a.threshold().min(self.response_b.threshold())
    }

    pub fn dimension(&self) -> usize {
        if self.full_sphere {
            8
        } else {
            4
        }
    }

    pub fn settings_from_angles(&self, x: &[f64]) -> SettingsQuad {
        if self.full_sphere {
            SettingsQuad::from_spherical(std::array::from_fn(|k| x[k]))
        } else {
            SettingsQuad::from_xz_angles(std::array::from_fn(|k| x[k]))
        }
    }

    /// Functional value at `settings`.
    pub fn evaluate(&self, settings: &SettingsQuad) -> Result<f64> {
        let engine = Engine::new(self)?;
        engine.evaluate(&self.state.state()?, settings)
    }

    /// Bound a local model would have to exceed, and whether that bound is
    /// an assumption rather than a derived value.
    ///
    /// CH needs no bound beyond 0. Post-selected CHSH with `M = N` perfect
    /// steps uses the closed form; other fixed pair numbers search local
    /// i.i.d. pairs fed through the same detectors. Poisson sources fall back
    /// to the closed form at the threshold and raise the caveat flag.
    pub fn local_bound(&self, config: &LocalSearchConfig) -> Result<LocalBoundInfo> {
        match (self.functional, &self.source) {
            (Functional::Ch, _) => Ok(LocalBoundInfo {
                value: 0.0,
                assumed: false,
            }),
            (Functional::PostselectedChsh, SourceModel::Poisson(_)) => Ok(LocalBoundInfo {
                value: local_bound_closed_form(self.threshold()),
                assumed: true,
            }),
            (Functional::PostselectedChsh, SourceModel::FixedPairs(m)) => {
                let n = self.response_a.threshold();
                let matched = self.response_a.is_perfect_step()
                    && self.response_b.is_perfect_step()
                    && self.response_b.threshold() == n
                    && *m == n;
                let value = if matched {
                    local_bound_closed_form(n)
                } else {
                    local_bound_for_model(&self.source, &self.response_a, &self.response_b, config)?.value
                };
                Ok(LocalBoundInfo {
                    value,
                    assumed: false,
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalBoundInfo {
    pub value: f64,
    /// Poisson source: the `M = N` closed form is assumed, not derived.
    pub assumed: bool,
}

/// State-independent precomputation for repeated evaluations.
enum Engine {
    FixedCh {
        pairs: u32,
        compiled: CompiledOutcomes,
        response_a: ResponseFunction,
        response_b: ResponseFunction,
    },
    FixedChsh(CompiledOutcomes),
    PoissonCh {
        source: SourceModel,
        response_a: ResponseFunction,
        response_b: ResponseFunction,
    },
    PoissonChsh {
        source: SourceModel,
        response_a: ResponseFunction,
        response_b: ResponseFunction,
    },
}

impl Engine {
    fn new(scenario: &Scenario) -> Result<Self> {
        let (fa, fb) = (scenario.response_a.clone(), scenario.response_b.clone());
        Ok(match (&scenario.source, scenario.functional) {
            (SourceModel::FixedPairs(m), Functional::Ch) => Self::FixedCh {
                pairs: *m,
                compiled: CompiledOutcomes::new(*m, &fa, &fb),
                response_a: fa,
                response_b: fb,
            },
            (SourceModel::FixedPairs(m), Functional::PostselectedChsh) => {
                Self::FixedChsh(CompiledOutcomes::new(*m, &fa, &fb))
            }
            (SourceModel::Poisson(_), Functional::Ch) => Self::PoissonCh {
                source: scenario.source.clone(),
                response_a: fa,
                response_b: fb,
            },
            (SourceModel::Poisson(p), Functional::PostselectedChsh) => {
                // Only rounds with at least a threshold's worth of pairs can be
                // conclusive, so truncate relative to their mass.
                let source = SourceModel::Poisson(PoissonSource::conditioned(p.mu(), scenario.threshold())?);
                Self::PoissonChsh {
                    source,
                    response_a: fa,
                    response_b: fb,
                }
            }
        })
    }

    fn evaluate(&self, state: &TwoQubitState, settings: &SettingsQuad) -> Result<f64> {
        let pp = settings.pair_probabilities(state);
        match self {
            Self::FixedCh {
                pairs,
                compiled,
                response_a,
                response_b,
            } => {
                let stats = std::array::from_fn(|i| {
                    std::array::from_fn(|j| {
                        let p = &pp[i][j];
                        let (pa, pb) = if i == 0 && j == 0 {
                            (
                                crate::counting::marginal_fire_probability(
                                    *pairs,
                                    response_a,
                                    p.marginal_a(Outcome::Plus),
                                ),
                                crate::counting::marginal_fire_probability(
                                    *pairs,
                                    response_b,
                                    p.marginal_b(Outcome::Plus),
                                ),
                            )
                        } else {
                            (0.0, 0.0)
                        };
                        PlusStatistics {
                            p_plus_a: pa,
                            p_plus_b: pb,
                            p_plus_plus: compiled.evaluate(p)[0][0],
                        }
                    })
                });
                Ok(ch_from_statistics(&stats))
            }
            Self::FixedChsh(compiled) => chsh_from_joints(&pp.map(|row| row.map(|p| compiled.evaluate(&p)))),
            Self::PoissonCh {
                source,
                response_a,
                response_b,
            } => {
                let stats = pp.map(|row| row.map(|p| plus_statistics(source, response_a, response_b, &p)));
                Ok(ch_from_statistics(&stats))
            }
            Self::PoissonChsh {
                source,
                response_a,
                response_b,
            } => chsh_from_joints(
                &pp.map(|row| row.map(|p| detection_probabilities(source, response_a, response_b, &p).joint)),
            ),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Random restarts for a full settings search (the warm start is extra).
    pub random_starts: usize,
    /// Random restarts added to warm starts inside nested searches.
    pub refine_starts: usize,
    pub seed: u64,
    /// Grid point index; selects an independent random stream.
    pub stream: u64,
    /// Nelder–Mead budget per start.
    pub max_evaluations: usize,
    /// Best two starts must agree to within this.
    pub agreement: f64,
    /// Coarse θ grid points on `[0, π/4]` before golden-section refinement.
    pub theta_grid: usize,
    pub theta_tolerance: f64,
    pub noise_tolerance: f64,
    pub local: LocalSearchConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            random_starts: 32,
            refine_starts: 4,
            seed: 0x5eed,
            stream: 0,
            max_evaluations: 4000,
            agreement: 1e-6,
            theta_grid: 7,
            theta_tolerance: 1e-6,
            noise_tolerance: 1e-4,
            local: LocalSearchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub starts: usize,
    /// Best start minus second-best start.
    pub spread: f64,
    pub evaluations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub best_value: f64,
    pub optimal_settings: SettingsQuad,
    /// Optimizer coordinates of `optimal_settings`.
    pub angles: Vec<f64>,
    pub optimal_theta: Option<f64>,
    pub local_bound: f64,
    /// True when `local_bound` is assumed rather than derived.
    pub bound_caveat: bool,
    pub noise_resistance: Option<f64>,
    pub diagnostics: Diagnostics,
}

impl ScenarioResult {
    pub fn violation(&self) -> f64 {
        self.best_value - self.local_bound
    }
}

struct Search {
    value: f64,
    angles: Vec<f64>,
    diagnostics: Diagnostics,
}

fn warm_start(dim: usize) -> Vec<f64> {
    let xz = [0.0, FRAC_PI_2, FRAC_PI_4, -FRAC_PI_4];
    if dim == 4 {
        xz.to_vec()
    } else {
        xz.iter().flat_map(|&t| [t, 0.0]).collect()
    }
}

fn random_angles(dim: usize, r: &mut impl Rng) -> Vec<f64> {
    if dim == 4 {
        (0..4).map(|_| r.gen_range(-PI..PI)).collect()
    } else {
        (0..4)
            .flat_map(|_| {
                let polar = (1.0 - 2.0 * r.gen::<f64>()).acos();
                [polar, r.gen_range(-PI..PI)]
            })
            .collect()
    }
}

/// Multi-start settings search. Random start `k` draws from stream
/// `(seed, stream, offset + k)`.
fn search_settings(
    scenario: &Scenario,
    engine: &Engine,
    state: &TwoQubitState,
    warm: &[Vec<f64>],
    random: usize,
    offset: u64,
    config: &OptimizerConfig,
) -> Search {
    let dim = scenario.dimension();
    let mut starts: Vec<Vec<f64>> = warm.to_vec();
    for k in 0..random {
        let mut r = rng::stream(config.seed, config.stream, offset + k as u64);
        starts.push(random_angles(dim, &mut r));
    }
    let objective = |x: &[f64]| {
        engine
            .evaluate(state, &scenario.settings_from_angles(x))
            .unwrap_or(f64::NEG_INFINITY)
    };
    let mut runs: Vec<(f64, Vec<f64>, usize)> = starts
        .iter()
        .map(|x0| {
            let (x, fx, evals) = nelder_mead_max(&objective, x0, 0.3, config.max_evaluations);
            (fx, x, evals)
        })
        .collect();
    let evaluations = runs.iter().map(|r| r.2).sum();
    runs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let spread = if runs.len() > 1 { runs[0].0 - runs[1].0 } else { 0.0 };
    let best = runs.swap_remove(0);
    Search {
        value: best.0,
        angles: best.1,
        diagnostics: Diagnostics {
            starts: starts.len(),
            spread,
            evaluations,
            converged: spread <= config.agreement,
        },
    }
}

/// Derivative-free maximization of `f` from `x0`, restarted from its own
/// optimum until a restart stops improving. Returns `(x, f(x), evaluations)`.
pub fn nelder_mead_max(
    f: &impl Fn(&[f64]) -> f64,
    x0: &[f64],
    step: f64,
    max_evaluations: usize,
) -> (Vec<f64>, f64, usize) {
    let mut evals = 0;
    let mut x = x0.to_vec();
    let mut fx = f64::NEG_INFINITY;
    for _ in 0..4 {
        let (nx, nf, used) = nelder_mead_once(f, &x, step, max_evaluations.saturating_sub(evals));
        evals += used;
        let improved = nf > fx + 1e-14 * nf.abs().max(1.0);
        if nf >= fx {
            x = nx;
            fx = nf;
        }
        if !improved || evals >= max_evaluations {
            break;
        }
    }
    (x, fx, evals)
}

fn nelder_mead_once(
    f: &impl Fn(&[f64]) -> f64,
    x0: &[f64],
    step: f64,
    budget: usize,
) -> (Vec<f64>, f64, usize) {
    let n = x0.len();
    let evals = std::cell::Cell::new(0usize);
    // Minimize the negated objective.
    let g = |x: &[f64]| {
        evals.set(evals.get() + 1);
        -f(x)
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let v = g(x0);
    simplex.push((x0.to_vec(), v));
    for k in 0..n {
        let mut x = x0.to_vec();
        x[k] += step;
        let v = g(&x);
        simplex.push((x, v));
    }
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0].1, simplex[n].1);
        let size = simplex[1..]
            .iter()
            .map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if (worst - best).abs() <= 1e-14 * best.abs().max(1.0) || size < 1e-10 {
            break;
        }
        if evals.get() >= budget {
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|k| simplex[..n].iter().map(|(x, _)| x[k]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n].0)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };
        let xr = along(1.0);
        let fr = g(&xr);
        if fr < simplex[0].1 {
            let xe = along(2.0);
            let fe = g(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[n].1 {
                let xc = along(0.5);
                let fc = g(&xc);
                (xc, fc)
            } else {
                let xc = along(-0.5);
                let fc = g(&xc);
                (xc, fc)
            };
            if fc < fr.min(simplex[n].1) {
                simplex[n] = (xc, fc);
            } else {
                let x_best = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    let x: Vec<f64> = entry.0.iter().zip(&x_best).map(|(a, b)| b + 0.5 * (a - b)).collect();
                    let v = g(&x);
                    *entry = (x, v);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, v) = simplex.swap_remove(0);
    (x, -v, evals.get())
}

fn result_from_search(
    scenario: &Scenario,
    search: Search,
    bound: LocalBoundInfo,
    theta: Option<f64>,
) -> ScenarioResult {
    ScenarioResult {
        best_value: search.value,
        optimal_settings: scenario.settings_from_angles(&search.angles),
        angles: search.angles,
        optimal_theta: theta,
        local_bound: bound.value,
        bound_caveat: bound.assumed,
        noise_resistance: None,
        diagnostics: search.diagnostics,
    }
}

fn ensure_finite(search: &Search) -> Result<()> {
    if search.value.is_finite() {
        Ok(())
    } else {
        Err(Error::NoConclusiveEvents(0.0))
    }
}

/// Maximizes the functional over measurement settings for the scenario's
/// state: `random_starts` random starts plus the standard CHSH settings.
pub fn maximize_settings(scenario: &Scenario, config: &OptimizerConfig) -> Result<ScenarioResult> {
    let bound = scenario.local_bound(&config.local)?;
    maximize_settings_with_bound(scenario, bound, config)
}

fn maximize_settings_with_bound(
    scenario: &Scenario,
    bound: LocalBoundInfo,
    config: &OptimizerConfig,
) -> Result<ScenarioResult> {
    let engine = Engine::new(scenario)?;
    let state = scenario.state.state()?;
    let warm = [warm_start(scenario.dimension())];
    let search = search_settings(scenario, &engine, &state, &warm, config.random_starts, 0, config);
    ensure_finite(&search)?;
    Ok(result_from_search(scenario, search, bound, scenario.state.theta()))
}

/// Maximizes over settings and the state angle `θ ∈ [0, π/4]`: a coarse grid
/// with full multi-start searches, then golden-section refinement around the
/// best grid point with searches warm-started from its settings.
pub fn maximize_over_theta(scenario: &Scenario, config: &OptimizerConfig) -> Result<ScenarioResult> {
    let bound = scenario.local_bound(&config.local)?;
    maximize_over_theta_with_bound(scenario, bound, config)
}

fn maximize_over_theta_with_bound(
    scenario: &Scenario,
    bound: LocalBoundInfo,
    config: &OptimizerConfig,
) -> Result<ScenarioResult> {
    scenario.state.with_theta(0.0)?;
    let engine = Engine::new(scenario)?;
    let dim = scenario.dimension();
    let points = config.theta_grid.max(3);
    let grid: Vec<f64> = (0..points)
        .map(|k| FRAC_PI_4 * k as f64 / (points - 1) as f64)
        .collect();
    let mut evaluations = 0;
    let mut coarse = Vec::with_capacity(points);
    for &theta in &grid {
        let state = scenario.state.with_theta(theta)?.state()?;
        let search = search_settings(
            scenario,
            &engine,
            &state,
            &[warm_start(dim)],
            config.random_starts,
            0,
            config,
        );
        evaluations += search.diagnostics.evaluations;
        coarse.push(search);
    }
    let k = (0..points)
        .max_by(|&x, &y| coarse[x].value.total_cmp(&coarse[y].value).then(y.cmp(&x)))
        .unwrap_or(0);
    let mut best_theta = grid[k];
    let mut best = coarse.swap_remove(k);
    ensure_finite(&best)?;
    let lo = grid[k.saturating_sub(1)];
    let hi = grid[(k + 1).min(points - 1)];
    let warm = vec![best.angles.clone(), warm_start(dim)];
    let mut probe = 0u64;
    let mut refined: Option<(f64, Search)> = None;
    golden_section_max(lo, hi, config.theta_tolerance, |theta| {
        probe += 1;
        let state = match scenario.state.with_theta(theta).and_then(|s| s.state()) {
            Ok(s) => s,
            Err(_) => return f64::NEG_INFINITY,
        };
        let search = search_settings(
            scenario,
            &engine,
            &state,
            &warm,
            config.refine_starts,
            1_000_000 * probe,
            config,
        );
        evaluations += search.diagnostics.evaluations;
        let value = search.value;
        if refined.as_ref().map_or(true, |(_, s)| value > s.value) {
            refined = Some((theta, search));
        }
        value
    });
    if let Some((theta, search)) = refined {
        if search.value > best.value {
            best_theta = theta;
            // Keep the full multi-start spread as the convergence diagnostic.
            best = Search {
                diagnostics: best.diagnostics.clone(),
                ..search
            };
        }
    }
    best.diagnostics.evaluations = evaluations;
    Ok(result_from_search(
        &scenario.with_state(scenario.state.with_theta(best_theta)?),
        best,
        bound,
        Some(best_theta),
    ))
}

/// Values this close to the bound are rounding noise, not violations.
pub const VIOLATION_MARGIN: f64 = 1e-12;

fn violates(value: f64, bound: f64) -> bool {
    value > bound + VIOLATION_MARGIN
}

/// Critical weight `w*`: the scenario's state mixed as `w ρ + (1 − w) 1/4`
/// violates the applicable bound for `w > w*` and not below. The amount of
/// white noise tolerated is `1 − w*`.
///
/// Each bisection probe re-optimizes the settings, warm-started from the best
/// settings found at the noiseless end.
pub fn noise_resistance(scenario: &Scenario, config: &OptimizerConfig) -> Result<f64> {
    let bound = scenario.local_bound(&config.local)?;
    noise_resistance_with_bound(scenario, bound, config)
}

fn noise_resistance_with_bound(
    scenario: &Scenario,
    bound: LocalBoundInfo,
    config: &OptimizerConfig,
) -> Result<f64> {
    let engine = Engine::new(scenario)?;
    let noiseless = scenario.with_state(scenario.state.with_weight(1.0));
    let top = maximize_settings_with_bound(&noiseless, bound, config)?;
    if !violates(top.best_value, bound.value) {
        return Err(Error::NoViolation {
            value: top.best_value,
            bound: bound.value,
        });
    }
    let warm = vec![top.angles.clone(), warm_start(scenario.dimension())];
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut probe = 0u64;
    while hi - lo > config.noise_tolerance {
        probe += 1;
        let mid = 0.5 * (lo + hi);
        let state = scenario.state.with_weight(mid).state()?;
        let search = search_settings(
            scenario,
            &engine,
            &state,
            &warm,
            config.refine_starts,
            2_000_000 * probe,
            config,
        );
        if violates(search.value, bound.value) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// `(φ, CH)` along the small-angle settings family for the maximally
/// entangled state with `M = N` pairs and a perfect threshold at `N`, with
/// the least-squares fit `CH ≈ c φ² + d φ⁴`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmallPhiReport {
    pub threshold: u32,
    pub rows: Vec<(f64, f64)>,
    pub fitted_coefficient: f64,
    /// `3N / 2^(N+1)`.
    pub predicted_coefficient: f64,
    pub relative_error: f64,
}

pub fn verify_small_phi_family(n: u32, phis: &[f64]) -> Result<SmallPhiReport> {
    if phis.iter().filter(|&&p| p != 0.0).count() < 2 {
        return Err(Error::InvalidGrid("need at least two non-zero angles".into()));
    }
    let scenario = Scenario::new(
        StateFamily::Pure { theta: FRAC_PI_4 },
        SourceModel::fixed(n)?,
        ResponseFunction::perfect_step(n)?,
        Functional::Ch,
    );
    let engine = Engine::new(&scenario)?;
    let state = scenario.state.state()?;
    let rows = phis
        .iter()
        .map(|&phi| Ok((phi, engine.evaluate(&state, &SettingsQuad::small_angle_family(phi))?)))
        .collect::<Result<Vec<_>>>()?;
    // Normal equations for ch = c x + d x², x = φ².
    let (mut s11, mut s12, mut s22, mut t1, mut t2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(phi, ch) in &rows {
        let x = phi * phi;
        s11 += x * x;
        s12 += x * x * x;
        s22 += x * x * x * x;
        t1 += x * ch;
        t2 += x * x * ch;
    }
    let det = s11 * s22 - s12 * s12;
    let fitted = if det.abs() > 1e-300 * s11 * s22 && det > 0.0 {
        (t1 * s22 - t2 * s12) / det
    } else {
        t1 / s11
    };
    let predicted = 3.0 * n as f64 / 2f64.powi(n as i32 + 1);
    Ok(SmallPhiReport {
        threshold: n,
        rows,
        fitted_coefficient: fitted,
        predicted_coefficient: predicted,
        relative_error: ((fitted - predicted) / predicted).abs(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParameter {
    Theta,
    /// Threshold of both parties' detectors.
    Threshold,
    Mu,
    /// Fixed pair number.
    Pairs,
    /// Efficiency at threshold of a smooth step.
    Eta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SweepOptions {
    pub optimize_theta: bool,
    pub noise_resistance: bool,
}

/// Scenario at one grid value of `parameter`.
pub fn apply_parameter(template: &Scenario, parameter: SweepParameter, value: f64) -> Result<Scenario> {
    let mut s = template.clone();
    let as_count = |v: f64| -> Result<u32> {
        if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
            Ok(v as u32)
        } else {
            Err(Error::InvalidGrid(format!("{v} is not a non-negative integer")))
        }
    };
    match parameter {
        SweepParameter::Theta => s.state = s.state.with_theta(value)?,
        SweepParameter::Mu => s.source = SourceModel::poisson(value)?,
        SweepParameter::Pairs => s.source = SourceModel::fixed(as_count(value)?)?,
        SweepParameter::Threshold => {
            let n = as_count(value)?;
            s.response_a = with_threshold(&s.response_a, n)?;
            s.response_b = with_threshold(&s.response_b, n)?;
        }
        SweepParameter::Eta => {
            s.response_a = ResponseFunction::smooth_step(s.response_a.threshold(), value)?;
            s.response_b = ResponseFunction::smooth_step(s.response_b.threshold(), value)?;
        }
    }
    Ok(s)
}

fn with_threshold(response: &ResponseFunction, n: u32) -> Result<ResponseFunction> {
    match response {
        ResponseFunction::PerfectStep { .. } => ResponseFunction::perfect_step(n),
        ResponseFunction::SmoothStep { eta, .. } => ResponseFunction::smooth_step(n, *eta),
        ResponseFunction::SCurve(_) => Err(Error::InvalidScenario(
            "cannot move the threshold of a tabulated response".into(),
        )),
    }
}

/// Evaluates one scenario per grid value. Grid points run in parallel, each
/// with its own random stream, so the output does not depend on scheduling.
/// A failing point yields an `Err` entry without stopping the sweep.
pub fn sweep(
    template: &Scenario,
    parameter: SweepParameter,
    grid: &[f64],
    options: SweepOptions,
    config: &OptimizerConfig,
) -> Result<Vec<Result<ScenarioResult>>> {
    check_grid(grid)?;
    Ok(grid
        .par_iter()
        .enumerate()
        .map(|(k, &value)| {
            let point = OptimizerConfig {
                stream: k as u64,
                ..config.clone()
            };
            let scenario = apply_parameter(template, parameter, value)?;
            evaluate_point(&scenario, options, &point)
        })
        .collect())
}

/// Full optimization of one scenario as configured by `options`.
pub fn evaluate_point(
    scenario: &Scenario,
    options: SweepOptions,
    config: &OptimizerConfig,
) -> Result<ScenarioResult> {
    let bound = scenario.local_bound(&config.local)?;
    let mut result = if options.optimize_theta {
        maximize_over_theta_with_bound(scenario, bound, config)?
    } else {
        maximize_settings_with_bound(scenario, bound, config)?
    };
    if options.noise_resistance {
        let at = match result.optimal_theta {
            Some(theta) => scenario.with_state(scenario.state.with_theta(theta)?),
            None => scenario.clone(),
        };
        result.noise_resistance = match noise_resistance_with_bound(&at, bound, config) {
            Ok(w) => Some(w),
            Err(Error::NoViolation { .. }) => None,
            Err(e) => return Err(e),
        };
    }
    Ok(result)
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidGrid("grid is empty".into()));
    }
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidGrid("grid values must be finite".into()));
    }
    let up = grid.windows(2).all(|w| w[1] > w[0]);
    let down = grid.windows(2).all(|w| w[1] < w[0]);
    if !(up || down) {
        return Err(Error::InvalidGrid("grid must be strictly monotone".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothCheckRow {
    pub eta: f64,
    pub best_value: f64,
    pub optimal_theta: f64,
    pub bound: f64,
    /// `best_value − bound`; positive means a violation.
    pub margin: f64,
    pub converged: bool,
}

/// Maximal post-selected CHSH over settings and θ for `M` pairs on detectors
/// with a smooth step at `N`, against the local bound of i.i.d. local pairs
/// through the same detectors, for each `η`.
pub fn smooth_threshold_no_violation_check(
    n: u32,
    m: u32,
    etas: &[f64],
    config: &OptimizerConfig,
) -> Result<Vec<SmoothCheckRow>> {
    if m <= n {
        return Err(Error::InvalidScenario(format!(
            "the smooth-threshold check needs M > N, got M = {m}, N = {n}"
        )));
    }
    etas.par_iter()
        .enumerate()
        .map(|(k, &eta)| {
            let point = OptimizerConfig {
                stream: k as u64,
                ..config.clone()
            };
            let scenario = Scenario::new(
                StateFamily::Pure { theta: FRAC_PI_4 },
                SourceModel::fixed(m)?,
                ResponseFunction::smooth_step(n, eta)?,
                Functional::PostselectedChsh,
            );
            let result = maximize_over_theta(&scenario, &point)?;
            Ok(SmoothCheckRow {
                eta,
                best_value: result.best_value,
                optimal_theta: result.optimal_theta.unwrap_or(FRAC_PI_4),
                bound: result.local_bound,
                margin: result.violation(),
                converged: result.diagnostics.converged,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bell::singlet_chsh_closed_form;
    use std::f64::consts::{FRAC_1_SQRT_2, SQRT_2};

    fn quick() -> OptimizerConfig {
        OptimizerConfig {
            random_starts: 8,
            theta_grid: 5,
            noise_tolerance: 1e-5,
            ..Default::default()
        }
    }

    fn step_scenario(state: StateFamily, n: u32, m: u32, functional: Functional) -> Scenario {
        Scenario::new(
            state,
            SourceModel::fixed(m).unwrap(),
            ResponseFunction::perfect_step(n).unwrap(),
            functional,
        )
    }

    #[test]
    fn nelder_mead_finds_smooth_maximum() {
        let f = |x: &[f64]| -(x[0] - 1.0).powi(2) - 3.0 * (x[1] + 0.5).powi(2) + 2.0;
        let (x, fx, _) = nelder_mead_max(&f, &[0.0, 0.0], 0.3, 2000);
        assert!((fx - 2.0).abs() < 1e-12);
        assert!((x[0] - 1.0).abs() < 1e-6 && (x[1] + 0.5).abs() < 1e-6);
    }

    #[test]
    fn tsirelson_ch_for_single_pair() {
        let s = step_scenario(StateFamily::Pure { theta: FRAC_PI_4 }, 1, 1, Functional::Ch);
        let r = maximize_settings(&s, &quick()).unwrap();
        assert!((r.best_value - (SQRT_2 - 1.0) / 2.0).abs() < 1e-6, "{}", r.best_value);
        assert!(r.diagnostics.converged);
        let again = s.evaluate(&r.optimal_settings).unwrap();
        assert!((again - r.best_value).abs() < 1e-9);
    }

    #[test]
    fn postselected_singlet_matches_closed_form() {
        for n in 1..=3 {
            let s = step_scenario(StateFamily::Singlet, n, n, Functional::PostselectedChsh);
            let r = maximize_settings(&s, &quick()).unwrap();
            assert!((r.best_value - singlet_chsh_closed_form(n)).abs() < 1e-6, "n = {n}");
            assert_eq!(r.local_bound, local_bound_closed_form(n));
        }
    }

    #[test]
    fn product_state_never_violates_ch() {
        for n in 1..=3 {
            let s = step_scenario(StateFamily::Pure { theta: 0.0 }, n, n, Functional::Ch);
            let r = maximize_settings(&s, &quick()).unwrap();
            assert!(r.best_value <= 1e-12, "n = {n}: {}", r.best_value);
        }
    }

    #[test]
    fn warm_start_dominance() {
        let s = step_scenario(StateFamily::Pure { theta: 0.6 }, 2, 3, Functional::Ch);
        let r = maximize_settings(&s, &quick()).unwrap();
        assert!(r.best_value >= s.evaluate(&SettingsQuad::tsirelson()).unwrap());
    }

    #[test]
    fn full_sphere_does_not_lose_to_plane() {
        let mut s = step_scenario(StateFamily::Pure { theta: 0.6 }, 2, 2, Functional::Ch);
        let plane = maximize_settings(&s, &quick()).unwrap();
        s.full_sphere = true;
        let sphere = maximize_settings(&s, &quick()).unwrap();
        assert_eq!(sphere.angles.len(), 8);
        assert!(sphere.best_value >= plane.best_value - 1e-9);
    }

    #[test]
    fn single_pair_optimum_is_maximally_entangled() {
        let s = step_scenario(StateFamily::Pure { theta: 0.3 }, 1, 1, Functional::Ch);
        let r = maximize_over_theta(&s, &quick()).unwrap();
        assert!((r.optimal_theta.unwrap() - FRAC_PI_4).abs() < 1e-3);
    }

    #[test]
    fn two_pair_optimum_is_less_entangled() {
        let s = step_scenario(StateFamily::Pure { theta: 0.3 }, 2, 2, Functional::Ch);
        let r = maximize_over_theta(&s, &quick()).unwrap();
        assert!(r.optimal_theta.unwrap() < FRAC_PI_4 - 1e-3);
        assert!(r.best_value > 0.0);
    }

    #[test]
    fn werner_noise_resistance_for_one_pair() {
        let s = step_scenario(StateFamily::Singlet, 1, 1, Functional::PostselectedChsh);
        let w = noise_resistance(&s, &quick()).unwrap();
        assert!((w - FRAC_1_SQRT_2).abs() < 1e-4, "{w}");
        let probe = |w: f64| maximize_settings(&s.with_state(StateFamily::Werner { w }), &quick()).unwrap();
        assert!(probe(w + 1e-3).violation() > 0.0);
        assert!(probe(w - 1e-3).violation() <= 0.0);
    }

    #[test]
    fn product_state_reports_no_violation() {
        let s = step_scenario(StateFamily::Pure { theta: 0.0 }, 1, 1, Functional::Ch);
        assert!(matches!(noise_resistance(&s, &quick()), Err(Error::NoViolation { .. })));
    }

    #[test]
    fn small_phi_fit() {
        let r = verify_small_phi_family(1, &[0.0, 0.01, 0.02, 0.03]).unwrap();
        assert!(r.rows[0].1.abs() < 1e-15);
        assert!(r.relative_error < 1e-3);
        let single = verify_small_phi_family(1, &[0.02, 0.01]).unwrap();
        assert!((single.rows[0].1 - 3.0e-4).abs() < 1e-6);
        assert!(verify_small_phi_family(1, &[0.01]).is_err());
    }

    #[test]
    fn sweep_is_deterministic_and_isolates_failures() {
        let s = step_scenario(StateFamily::Pure { theta: 0.5 }, 1, 1, Functional::Ch);
        let grid = [0.5, 1.0, 2.0];
        let run = || sweep(&s, SweepParameter::Pairs, &grid, SweepOptions::default(), &quick()).unwrap();
        let a = run();
        assert!(a[0].is_err());
        assert!(a[1].is_ok() && a[2].is_ok());
        assert_eq!(a[1], run()[1]);
        assert!(sweep(&s, SweepParameter::Theta, &[], SweepOptions::default(), &quick()).is_err());
        assert!(sweep(&s, SweepParameter::Theta, &[0.1, 0.3, 0.2], SweepOptions::default(), &quick()).is_err());
    }

    #[test]
    fn serial_and_parallel_sweeps_agree() {
        let s = step_scenario(StateFamily::Pure { theta: 0.5 }, 2, 2, Functional::Ch);
        let grid = [0.3, 0.5, 0.7];
        let parallel = sweep(&s, SweepParameter::Theta, &grid, SweepOptions::default(), &quick()).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let serial =
            pool.install(|| sweep(&s, SweepParameter::Theta, &grid, SweepOptions::default(), &quick()).unwrap());
        assert_eq!(parallel, serial);
    }

    #[test]
    fn parameters_apply() {
        let s = step_scenario(StateFamily::Pure { theta: 0.5 }, 2, 2, Functional::Ch);
        let t = apply_parameter(&s, SweepParameter::Threshold, 3.0).unwrap();
        assert_eq!(t.response_b.threshold(), 3);
        assert!(apply_parameter(&s, SweepParameter::Threshold, 2.5).is_err());
        let e = apply_parameter(&s, SweepParameter::Eta, 0.4).unwrap();
        assert_eq!(e.response_a, ResponseFunction::smooth_step(2, 0.4).unwrap());
        let m = apply_parameter(&s, SweepParameter::Mu, 3.0).unwrap();
        assert!(matches!(m.source, SourceModel::Poisson(_)));
        assert!(apply_parameter(&s.with_state(StateFamily::Singlet), SweepParameter::Theta, 0.2).is_err());
    }

    #[test]
    fn smooth_check_requires_more_pairs_than_threshold() {
        assert!(smooth_threshold_no_violation_check(2, 2, &[0.5], &quick()).is_err());
    }
}
