//! CH and post-selected CHSH functionals, closed forms for the singlet and
//! local bounds for N i.i.d. copies of a local distribution.

use std::f64::consts::FRAC_1_SQRT_2;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::counting::{CompiledOutcomes, DetectionProbabilities, PlusStatistics, SourceModel};
use crate::detectors::ResponseFunction;
use crate::error::{Error, Result};
use crate::quantum::{pair_probabilities, Outcome, PairProbabilities, Setting, TwoQubitState};
use crate::rng;

/// Conditioning mass below which post-selected correlators are undefined.
pub const CONDITIONING_FLOOR: f64 = 1e-300;

/// Sign of each `E(A_i, B_j)` term in CHSH.
pub const CHSH_SIGNS: [[f64; 2]; 2] = [[1.0, 1.0], [1.0, -1.0]];

/// Measurement settings `A1, A2` for Alice and `B1, B2` for Bob.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SettingsQuad {
    pub a: [Setting; 2],
    pub b: [Setting; 2],
}

impl SettingsQuad {
    /// `A1 = σz, A2 = σx, B1 = (σz + σx)/√2, B2 = (σz − σx)/√2`.
    pub fn tsirelson() -> Self {
        Self::from_xz_angles([
            0.0,
            std::f64::consts::FRAC_PI_2,
            std::f64::consts::FRAC_PI_4,
            -std::f64::consts::FRAC_PI_4,
        ])
    }

    /// `[A1, A2, B1, B2]` angles from the z axis in the x–z plane.
    pub fn from_xz_angles(angles: [f64; 4]) -> Self {
        Self {
            a: [Setting::from_xz_angle(angles[0]), Setting::from_xz_angle(angles[1])],
            b: [Setting::from_xz_angle(angles[2]), Setting::from_xz_angle(angles[3])],
        }
    }

    /// `[polar, azimuth]` pairs for `A1, A2, B1, B2`.
    pub fn from_spherical(angles: [f64; 8]) -> Self {
        let s = |k: usize| Setting::from_spherical(angles[2 * k], angles[2 * k + 1]);
        Self {
            a: [s(0), s(1)],
            b: [s(2), s(3)],
        }
    }

    /// `A1 = σz, A2 = cos2φ σz + sin2φ σx, B1 = cosφ σz + sinφ σx,
    /// B2 = cosφ σz − sinφ σx`.
    pub fn small_angle_family(phi: f64) -> Self {
        Self::from_xz_angles([0.0, 2.0 * phi, phi, -phi])
    }

    /// Every direction reversed.
    pub fn flipped(&self) -> Self {
        Self {
            a: self.a.map(|s| s.flipped()),
            b: self.b.map(|s| s.flipped()),
        }
    }

    /// Alice's settings become Bob's and vice versa.
    pub fn swap_parties(&self) -> Self {
        Self {
            a: self.b,
            b: self.a,
        }
    }

    /// Single-pair distributions for all four setting pairs.
    pub fn pair_probabilities(&self, state: &TwoQubitState) -> [[PairProbabilities; 2]; 2] {
        std::array::from_fn(|i| std::array::from_fn(|j| pair_probabilities(state, &self.a[i], &self.b[j])))
    }
}

/// `P++(A1B1) + P++(A1B2) + P++(A2B1) − P++(A2B2) − P+(A1) − P+(B1)`, indexed
/// `[i][j]` for setting pair `(A_i, B_j)`.
pub fn ch_value(p: &[[DetectionProbabilities; 2]; 2]) -> f64 {
    ch_from_statistics(&p.map(|row| row.map(|d| PlusStatistics::from(&d))))
}

pub fn ch_from_statistics(p: &[[PlusStatistics; 2]; 2]) -> f64 {
    let mut ch = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            ch += CHSH_SIGNS[i][j] * p[i][j].p_plus_plus;
        }
    }
    ch - p[0][0].p_plus_a - p[0][0].p_plus_b
}

/// `E = sum alpha beta P(alpha beta) / sum P(alpha beta)` over conclusive
/// coincidences.
pub fn postselected_correlator(p: &DetectionProbabilities) -> Result<f64> {
    correlator_from_joint(&p.joint)
}

fn correlator_from_joint(joint: &[[f64; 2]; 2]) -> Result<f64> {
    let mass = joint[0][0] + joint[0][1] + joint[1][0] + joint[1][1];
    if !(mass >= CONDITIONING_FLOOR) {
        return Err(Error::NoConclusiveEvents(mass));
    }
    Ok((joint[0][0] + joint[1][1] - joint[0][1] - joint[1][0]) / mass)
}

/// `|E11 + E12 + E21 − E22|`.
pub fn chsh_value(e11: f64, e12: f64, e21: f64, e22: f64) -> f64 {
    (e11 + e12 + e21 - e22).abs()
}

/// Post-selected CHSH value from detection probabilities indexed `[i][j]`.
pub fn postselected_chsh(p: &[[DetectionProbabilities; 2]; 2]) -> Result<f64> {
    chsh_from_joints(&p.map(|row| row.map(|d| d.joint)))
}

pub(crate) fn chsh_from_joints(joints: &[[[[f64; 2]; 2]; 2]; 2]) -> Result<f64> {
    let e = |i: usize, j: usize| correlator_from_joint(&joints[i][j]);
    Ok(chsh_value(e(0, 0)?, e(0, 1)?, e(1, 0)?, e(1, 1)?))
}

/// Post-selected singlet correlator for `n` pairs and threshold `n`:
/// `[(1 − a·b)^n − (1 + a·b)^n] / [(1 − a·b)^n + (1 + a·b)^n]`.
pub fn singlet_correlator_closed_form(n: u32, a_dot_b: f64) -> f64 {
    let lo = (1.0 - a_dot_b).powi(n as i32);
    let hi = (1.0 + a_dot_b).powi(n as i32);
    (lo - hi) / (lo + hi)
}

/// Post-selected singlet CHSH at the standard optimal settings,
/// `4 [(1+1/√2)^n − (1−1/√2)^n] / [(1+1/√2)^n + (1−1/√2)^n]`.
pub fn singlet_chsh_closed_form(n: u32) -> f64 {
    // Divide through by (1+1/√2)^n so large n neither overflows nor cancels.
    let r = ((1.0 - FRAC_1_SQRT_2) / (1.0 + FRAC_1_SQRT_2)).powi(n as i32);
    4.0 * (1.0 - r) / (1.0 + r)
}

/// `4 − S(n)` for the singlet closed form, without cancellation.
pub fn singlet_chsh_deficit(n: u32) -> f64 {
    let r = ((1.0 - FRAC_1_SQRT_2) / (1.0 + FRAC_1_SQRT_2)).powi(n as i32);
    8.0 * r / (1.0 + r)
}

/// `S(n) − L(n)`, the singlet's margin over the i.i.d. local bound, without
/// cancellation. Both values round to 4 in `f64` well before `n = 50`.
pub fn singlet_violation_margin(n: u32) -> f64 {
    let rs = ((1.0 - FRAC_1_SQRT_2) / (1.0 + FRAC_1_SQRT_2)).powi(n as i32);
    let rl = (1.0f64 / 3.0).powi(n as i32);
    8.0 * (rl - rs) / ((1.0 + rs) * (1.0 + rl))
}

/// `4 (3^n − 1) / (3^n + 1)`.
pub fn local_bound_closed_form(n: u32) -> f64 {
    if n <= 30 {
        // 3^n is exact in f64 here.
        let p = 3f64.powi(n as i32);
        return 4.0 * (p - 1.0) / (p + 1.0);
    }
    let r = (1.0f64 / 3.0).powi(n as i32);
    4.0 * (1.0 - r) / (1.0 + r)
}

/// Single-copy two-input/two-output distribution `p(alpha beta | i j)`,
/// indexed `[i][j]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub cells: [[PairProbabilities; 2]; 2],
}

impl CorrelationTable {
    /// Bob's outcomes relabelled `+ <-> -` for every setting.
    pub fn flip_b(&self) -> Self {
        Self {
            cells: self.cells.map(|row| row.map(|p| p.flip_b())),
        }
    }

    /// `p(alpha = beta | i j)`.
    pub fn agreement(&self, i: usize, j: usize) -> f64 {
        let t = self.cells[i][j].table();
        t[0][0] + t[1][1]
    }

    /// Post-selected CHSH when each party clicks only if all `n` copies give
    /// the same outcome, so that `P(alpha beta) = p(alpha beta)^n`.
    pub fn n_copy_postselected_chsh(&self, n: u32) -> Result<f64> {
        let joints = self.cells.map(|row| {
            row.map(|p| p.table().map(|r| r.map(|v| v.powi(n as i32))))
        });
        chsh_from_joints(&joints)
    }
}

/// Convex weights over the 16 deterministic local strategies.
///
/// Strategy `k` assigns `α(A1), α(A2), β(B1), β(B2)` from bits 0..4 of `k`;
/// a clear bit means `+`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalStrategyMixture {
    weights: [f64; 16],
}

impl LocalStrategyMixture {
    pub fn new(weights: [f64; 16]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidScenario(format!(
                "mixture weights must be non-negative and sum to 1 (sum = {total})"
            )));
        }
        Ok(Self { weights })
    }

    pub fn deterministic(strategy: usize) -> Self {
        let mut weights = [0.0; 16];
        weights[strategy] = 1.0;
        Self { weights }
    }

    /// Uniform mixture of the eight deterministic strategies with
    /// `E11 + E12 + E21 − E22 = 2`.
    pub fn chsh_facet_center() -> Self {
        let mut weights = [0.0; 16];
        for (k, w) in weights.iter_mut().enumerate() {
            let [a1, a2, b1, b2] = Self::strategy(k).map(Outcome::sign);
            if a1 * b1 + a1 * b2 + a2 * b1 - a2 * b2 == 2.0 {
                *w = 0.125;
            }
        }
        Self { weights }
    }

    /// `[α(A1), α(A2), β(B1), β(B2)]`.
    pub fn strategy(k: usize) -> [Outcome; 4] {
        std::array::from_fn(|bit| {
            if k >> bit & 1 == 0 {
                Outcome::Plus
            } else {
                Outcome::Minus
            }
        })
    }

    pub fn weights(&self) -> &[f64; 16] {
        &self.weights
    }

    pub fn table(&self) -> CorrelationTable {
        table_from_weights(&self.weights)
    }
}

fn table_from_weights(weights: &[f64; 16]) -> CorrelationTable {
    let mut cells = [[[[0.0; 2]; 2]; 2]; 2];
    for (k, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let s = LocalStrategyMixture::strategy(k);
        for i in 0..2 {
            for j in 0..2 {
                cells[i][j][s[i].index()][s[2 + j].index()] += w;
            }
        }
    }
    CorrelationTable {
        cells: cells.map(|row| row.map(PairProbabilities::from_table_unchecked)),
    }
}

/// Werner state at `w = 1/√2` measured at the standard optimal settings, with
/// Bob's outcomes relabelled so the table is written in correlated form.
pub fn werner_optimal_distribution() -> CorrelationTable {
    let state = TwoQubitState::werner(FRAC_1_SQRT_2).expect("weight is in range");
    let quad = SettingsQuad::tsirelson();
    CorrelationTable {
        cells: quad.pair_probabilities(&state),
    }
    .flip_b()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalSearchConfig {
    pub random_starts: usize,
    pub seed: u64,
    pub max_sweeps: usize,
    /// Stop once a full sweep improves the objective by less than this.
    pub tolerance: f64,
    /// Starts within this of the best count as agreeing with it.
    pub agreement: f64,
}

impl Default for LocalSearchConfig {
    fn default() -> Self {
        Self {
            random_starts: 64,
            seed: 0x5eed,
            max_sweeps: 400,
            tolerance: 1e-13,
            agreement: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalBound {
    pub value: f64,
    pub mixture: LocalStrategyMixture,
    pub starts: usize,
    /// Best value minus the second best start's value.
    pub spread: f64,
    /// Starts that ended within `agreement` of the best value.
    pub agreeing_starts: usize,
    pub evaluations: usize,
    pub converged: bool,
}

/// Maximal post-selected CHSH over `n` i.i.d. copies of a local distribution,
/// each party clicking only when all copies agree.
pub fn local_bound_numeric(n: u32, config: &LocalSearchConfig) -> Result<LocalBound> {
    if n == 0 || n > 6 {
        return Err(Error::InvalidScenario(format!(
            "numeric local bound supports 1 <= N <= 6, got {n}"
        )));
    }
    Ok(maximize_over_mixtures(config, |table| {
        table.n_copy_postselected_chsh(n).unwrap_or(0.0)
    }))
}

/// Maximal post-selected CHSH over i.i.d. local pairs fed through the same
/// detectors and source as a quantum scenario.
pub fn local_bound_for_model(
    source: &SourceModel,
    response_a: &ResponseFunction,
    response_b: &ResponseFunction,
    config: &LocalSearchConfig,
) -> Result<LocalBound> {
    let SourceModel::FixedPairs(m) = source else {
        return Err(Error::InvalidScenario(
            "model local bound is defined for fixed pair numbers only".into(),
        ));
    };
    let compiled = CompiledOutcomes::new(*m, response_a, response_b);
    Ok(maximize_over_mixtures(config, |table| {
        let joints = table.cells.map(|row| row.map(|p| compiled.evaluate(&p)));
        chsh_from_joints(&joints).unwrap_or(0.0)
    }))
}

/// Multi-start pairwise-transfer coordinate ascent on the 16-weight simplex.
///
/// Starts: the 16 vertices, the CHSH facet center and `random_starts`
/// uniform draws from the simplex.
pub fn maximize_over_mixtures<F>(config: &LocalSearchConfig, objective: F) -> LocalBound
where
    F: Fn(&CorrelationTable) -> f64 + Sync,
{
    let mut starts: Vec<[f64; 16]> = (0..16)
        .map(|k| *LocalStrategyMixture::deterministic(k).weights())
        .collect();
    starts.push(*LocalStrategyMixture::chsh_facet_center().weights());
    for s in 0..config.random_starts {
        let mut r = rng::stream(config.seed, 0, s as u64);
        let mut w: [f64; 16] = std::array::from_fn(|_| -(1.0 - r.gen::<f64>()).ln());
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= total);
        starts.push(w);
    }

    let runs: Vec<(f64, [f64; 16], usize)> = starts
        .par_iter()
        .map(|w0| coordinate_ascent(*w0, config, &objective))
        .collect();

    let mut order: Vec<usize> = (0..runs.len()).collect();
    order.sort_by(|&x, &y| runs[y].0.total_cmp(&runs[x].0).then(x.cmp(&y)));
    let best = &runs[order[0]];
    let second = runs.get(order.get(1).copied().unwrap_or(order[0])).map_or(best.0, |r| r.0);
    let spread = best.0 - second;
    let agreeing_starts = runs.iter().filter(|r| best.0 - r.0 <= config.agreement).count();
    LocalBound {
        value: best.0,
        mixture: LocalStrategyMixture { weights: best.1 },
        starts: runs.len(),
        spread,
        agreeing_starts,
        evaluations: runs.iter().map(|r| r.2).sum(),
        converged: spread <= config.agreement,
    }
}

fn coordinate_ascent<F>(mut w: [f64; 16], config: &LocalSearchConfig, objective: &F) -> (f64, [f64; 16], usize)
where
    F: Fn(&CorrelationTable) -> f64,
{
    let mut evals = 0usize;
    let mut eval = |w: &[f64; 16]| {
        evals += 1;
        objective(&table_from_weights(w))
    };
    let mut current = eval(&w);
    for _ in 0..config.max_sweeps {
        let start = current;
        for i in 0..16 {
            for j in (i + 1)..16 {
                let total = w[i] + w[j];
                if total <= 0.0 {
                    continue;
                }
                let at = |share: f64, w: &[f64; 16]| {
                    let mut trial = *w;
                    trial[i] = share;
                    trial[j] = total - share;
                    trial
                };
                let (share, value) = golden_section_max(0.0, total, 1e-10 * total.max(1e-3), |s| eval(&at(s, &w)));
                let mut best = (w[i], current);
                for candidate in [(share, value), (0.0, eval(&at(0.0, &w))), (total, eval(&at(total, &w)))] {
                    if candidate.1 > best.1 {
                        best = candidate;
                    }
                }
                if best.1 > current {
                    w = at(best.0, &w);
                    current = best.1;
                }
            }
        }
        if current - start < config.tolerance {
            break;
        }
    }
    (current, w, evals)
}

/// Golden-section search for a maximum of `f` on `[lo, hi]`.
pub fn golden_section_max(mut lo: f64, mut hi: f64, tol: f64, mut f: impl FnMut(f64) -> f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 >= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}
