//! Exact detection probabilities when a source emits several independent
//! pairs and each party's two detectors are threshold detectors.
//!
//! A party whose `+` detector receives `n+` photons and whose `-` detector
//! receives `n-` photons outputs
//!
//! * `+` with probability `Θ(n+)` (a double click counts as `+`),
//! * `-` with probability `Θ(n-) (1 - Θ(n+))`,
//! * nothing (inconclusive) otherwise.

use serde::{Deserialize, Serialize};

use crate::detectors::ResponseFunction;
use crate::error::{Error, Result};
use crate::quantum::{Outcome, PairProbabilities};

/// Largest pair count accepted by [`enumerate_oracle`].
pub const ORACLE_MAX_PAIRS: u32 = 8;

/// Truncated Poisson tail mass allowed when choosing the largest pair count.
pub const POISSON_TAIL: f64 = 1e-10;

/// Pair counts above this use log-space multinomial weights.
const EXACT_WEIGHT_MAX: u32 = 20;

/// Number of pairs emitted per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SourceModel {
    FixedPairs(u32),
    Poisson(PoissonSource),
}

impl SourceModel {
    pub fn fixed(pairs: u32) -> Result<Self> {
        if pairs == 0 {
            return Err(Error::InvalidSource("a fixed source must emit at least one pair".into()));
        }
        Ok(Self::FixedPairs(pairs))
    }

    pub fn poisson(mu: f64) -> Result<Self> {
        PoissonSource::new(mu).map(Self::Poisson)
    }

    /// `(M, p_M)` for every pair count the source can emit.
    pub fn pair_weights(&self) -> Vec<(u32, f64)> {
        match self {
            Self::FixedPairs(m) => vec![(*m, 1.0)],
            Self::Poisson(p) => p.weights(),
        }
    }

    pub fn max_pairs(&self) -> u32 {
        match self {
            Self::FixedPairs(m) => *m,
            Self::Poisson(p) => p.max_pairs,
        }
    }
}

/// Poisson pair-number distribution `p_M = e^-mu mu^M / M!` truncated at
/// `max_pairs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonSource {
    mu: f64,
    max_pairs: u32,
}

impl PoissonSource {
    /// Truncates at the smallest `M` whose tail mass is below [`POISSON_TAIL`].
    pub fn new(mu: f64) -> Result<Self> {
        Self::conditioned(mu, 0)
    }

    /// Truncates at the smallest `M` whose tail is below [`POISSON_TAIL`]
    /// times the probability of emitting at least `min_pairs` pairs.
    ///
    /// Post-selected quantities only see rounds with at least the threshold
    /// number of pairs, so the truncation has to be relative to that mass.
    pub fn conditioned(mu: f64, min_pairs: u32) -> Result<Self> {
        if !(mu > 0.0) || !mu.is_finite() {
            return Err(Error::InvalidSource(format!(
                "mean pair number must be positive and finite, got {mu}"
            )));
        }
        let cap = (mu + 12.0 * mu.sqrt() + 20.0).ceil() as u32 + min_pairs;
        let pmf = poisson_pmf(mu, cap as usize + 64);
        let reachable: f64 = pmf[min_pairs as usize..].iter().sum();
        let mut tail: f64 = pmf.iter().sum::<f64>();
        let mut max_pairs = cap;
        for (m, p) in pmf.iter().enumerate().take(cap as usize + 1) {
            tail -= p;
            if m as u32 >= min_pairs && tail.max(0.0) < POISSON_TAIL * reachable {
                // Recompute the tail directly; the running difference loses
                // relative precision once it is tiny.
                let exact: f64 = pmf[m + 1..].iter().sum();
                if exact < POISSON_TAIL * reachable {
                    max_pairs = m as u32;
                    break;
                }
            }
        }
        Ok(Self { mu, max_pairs })
    }

    /// Explicit truncation; the caller is responsible for the tail mass.
    pub fn truncated(mu: f64, max_pairs: u32) -> Result<Self> {
        let mut src = Self::new(mu)?;
        src.max_pairs = max_pairs;
        Ok(src)
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn max_pairs(&self) -> u32 {
        self.max_pairs
    }

    pub fn weights(&self) -> Vec<(u32, f64)> {
        poisson_pmf(self.mu, self.max_pairs as usize)
            .into_iter()
            .enumerate()
            .map(|(m, p)| (m as u32, p))
            .collect()
    }

    /// Mass beyond `max_pairs`.
    pub fn tail_mass(&self) -> f64 {
        let extra = (self.mu + 12.0 * self.mu.sqrt() + 80.0).ceil() as usize;
        let pmf = poisson_pmf(self.mu, self.max_pairs as usize + extra);
        pmf[self.max_pairs as usize + 1..].iter().sum()
    }
}

/// `e^-mu mu^k / k!` for `k = 0..=kmax`.
pub fn poisson_pmf(mu: f64, kmax: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(kmax + 1);
    // Start in log space so large means do not underflow `e^-mu`.
    let mut log_p = -mu;
    for k in 0..=kmax {
        if k > 0 {
            log_p += mu.ln() - (k as f64).ln();
        }
        out.push(log_p.exp());
    }
    out
}

/// Poisson-weighted average `sum_M p_M f(M)` over the truncation window.
pub fn poisson_mix(source: &PoissonSource, mut per_pairs: impl FnMut(u32) -> f64) -> f64 {
    source
        .weights()
        .into_iter()
        .map(|(m, p)| if p == 0.0 { 0.0 } else { p * per_pairs(m) })
        .sum()
}

/// Firing probabilities of each party's `+` detector and the coincidence
/// probabilities for every outcome pair, for one setting pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionProbabilities {
    pub p_plus_a: f64,
    pub p_plus_b: f64,
    /// Indexed by `[alpha.index()][beta.index()]`. Need not sum to one.
    pub joint: [[f64; 2]; 2],
}

impl DetectionProbabilities {
    pub fn get(&self, alpha: Outcome, beta: Outcome) -> f64 {
        self.joint[alpha.index()][beta.index()]
    }

    /// Probability that both parties give a conclusive result.
    pub fn conclusive_mass(&self) -> f64 {
        self.joint.iter().flatten().sum()
    }
}

/// The three numbers the CH functional needs for one setting pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlusStatistics {
    pub p_plus_a: f64,
    pub p_plus_b: f64,
    pub p_plus_plus: f64,
}

impl From<&DetectionProbabilities> for PlusStatistics {
    fn from(p: &DetectionProbabilities) -> Self {
        Self {
            p_plus_a: p.p_plus_a,
            p_plus_b: p.p_plus_b,
            p_plus_plus: p.get(Outcome::Plus, Outcome::Plus),
        }
    }
}

/// Probability that one party outputs `outcome` given the photon counts at
/// its two detectors; `response` is tabulated on at least `0..=n_plus + n_minus`.
#[inline]
fn party_weight(response: &[f64], n_plus: usize, n_minus: usize, outcome: Outcome) -> f64 {
    match outcome {
        Outcome::Plus => response[n_plus],
        Outcome::Minus => response[n_minus] * (1.0 - response[n_plus]),
    }
}

/// `ln 0!, ..., ln n!`.
fn ln_factorials(n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n + 1];
    for k in 1..=n {
        out[k] = out[k - 1] + (k as f64).ln();
    }
    out
}

/// `0!, ..., n!` as floats; exact up to 20!.
fn factorials(n: usize) -> Vec<f64> {
    let mut out = vec![1.0; n + 1];
    for k in 1..=n {
        out[k] = out[k - 1] * k as f64;
    }
    out
}

fn powers(p: f64, n: usize) -> Vec<f64> {
    let mut out = vec![1.0; n + 1];
    for k in 1..=n {
        out[k] = out[k - 1] * p;
    }
    out
}

/// Multinomial probability of category counts `counts` summing to `m`.
struct MultinomialWeights {
    m: usize,
    exact: bool,
    fact: Vec<f64>,
    ln_fact: Vec<f64>,
    pow: Vec<Vec<f64>>,
    ln_p: Vec<f64>,
}

impl MultinomialWeights {
    fn new(m: u32, probs: &[f64]) -> Self {
        let m = m as usize;
        let exact = m as u32 <= EXACT_WEIGHT_MAX;
        Self {
            m,
            exact,
            fact: if exact { factorials(m) } else { Vec::new() },
            ln_fact: if exact { Vec::new() } else { ln_factorials(m) },
            pow: if exact {
                probs.iter().map(|&p| powers(p, m)).collect()
            } else {
                Vec::new()
            },
            ln_p: probs.iter().map(|p| p.ln()).collect(),
        }
    }

    #[inline]
    fn weight(&self, counts: &[usize]) -> f64 {
        if self.exact {
            let mut w = self.fact[self.m];
            for (i, &n) in counts.iter().enumerate() {
                w *= self.pow[i][n] / self.fact[n];
            }
            w
        } else {
            let mut log_w = self.ln_fact[self.m];
            for (i, &n) in counts.iter().enumerate() {
                if n > 0 {
                    if self.ln_p[i] == f64::NEG_INFINITY {
                        return 0.0;
                    }
                    log_w += n as f64 * self.ln_p[i] - self.ln_fact[n];
                }
            }
            log_w.exp()
        }
    }
}

/// Probability that the `+` detector fires when `pairs` photons each reach it
/// independently with probability `p_plus`.
pub fn marginal_fire_probability(pairs: u32, response: &ResponseFunction, p_plus: f64) -> f64 {
    let m = pairs as usize;
    let theta = response.table(pairs);
    let weights = MultinomialWeights::new(pairs, &[p_plus, 1.0 - p_plus]);
    let mut acc = 0.0;
    for n_plus in 0..=m {
        if theta[n_plus] == 0.0 {
            continue;
        }
        acc += theta[n_plus] * weights.weight(&[n_plus, m - n_plus]);
    }
    acc
}

/// All four coincidence probabilities for `pairs` pairs, summing the
/// multinomial over compositions `(n++, n+-, n-+, n--)` of `pairs` in
/// lexicographic order.
pub fn outcome_probabilities(
    pairs: u32,
    response_a: &ResponseFunction,
    response_b: &ResponseFunction,
    pp: &PairProbabilities,
) -> [[f64; 2]; 2] {
    let m = pairs as usize;
    let theta_a = response_a.table(pairs);
    let theta_b = response_b.table(pairs);
    let t = pp.table();
    let weights = MultinomialWeights::new(pairs, &[t[0][0], t[0][1], t[1][0], t[1][1]]);
    let mut out = [[0.0; 2]; 2];
    for npp in 0..=m {
        for npm in 0..=(m - npp) {
            let a_plus = npp + npm;
            let ga = [
                party_weight(&theta_a, a_plus, m - a_plus, Outcome::Plus),
                party_weight(&theta_a, a_plus, m - a_plus, Outcome::Minus),
            ];
            if ga[0] == 0.0 && ga[1] == 0.0 {
                continue;
            }
            for nmp in 0..=(m - npp - npm) {
                let nmm = m - npp - npm - nmp;
                let b_plus = npp + nmp;
                let gb = [
                    party_weight(&theta_b, b_plus, m - b_plus, Outcome::Plus),
                    party_weight(&theta_b, b_plus, m - b_plus, Outcome::Minus),
                ];
                if gb[0] == 0.0 && gb[1] == 0.0 {
                    continue;
                }
                let w = weights.weight(&[npp, npm, nmp, nmm]);
                if w == 0.0 {
                    continue;
                }
                for (i, gai) in ga.iter().enumerate() {
                    for (j, gbj) in gb.iter().enumerate() {
                        out[i][j] += w * gai * gbj;
                    }
                }
            }
        }
    }
    out
}

/// Probability that Alice outputs `alpha` and Bob outputs `beta` when the
/// source emits exactly `pairs` pairs.
pub fn outcome_probability(
    pairs: u32,
    response_a: &ResponseFunction,
    response_b: &ResponseFunction,
    pp: &PairProbabilities,
    alpha: Outcome,
    beta: Outcome,
) -> f64 {
    outcome_probabilities(pairs, response_a, response_b, pp)[alpha.index()][beta.index()]
}

/// Brute-force reference for [`outcome_probability`]: sums over all `4^pairs`
/// per-pair outcome assignments.
pub fn enumerate_oracle(
    pairs: u32,
    response_a: &ResponseFunction,
    response_b: &ResponseFunction,
    pp: &PairProbabilities,
    alpha: Outcome,
    beta: Outcome,
) -> Result<f64> {
    if pairs > ORACLE_MAX_PAIRS {
        return Err(Error::EnumerationTooLarge {
            got: pairs,
            max: ORACLE_MAX_PAIRS,
        });
    }
    let m = pairs as usize;
    let cells = [
        (Outcome::Plus, Outcome::Plus),
        (Outcome::Plus, Outcome::Minus),
        (Outcome::Minus, Outcome::Plus),
        (Outcome::Minus, Outcome::Minus),
    ];
    let mut acc = 0.0;
    for code in 0..4usize.pow(pairs) {
        let mut c = code;
        let mut prob = 1.0;
        let (mut a_plus, mut b_plus) = (0u32, 0u32);
        for _ in 0..m {
            let (x, y) = cells[c % 4];
            c /= 4;
            prob *= pp.get(x, y);
            a_plus += (x == Outcome::Plus) as u32;
            b_plus += (y == Outcome::Plus) as u32;
        }
        let fire = |f: &ResponseFunction, n_plus: u32, outcome: Outcome| {
            let plus = f.evaluate(n_plus);
            let minus = f.evaluate(pairs - n_plus);
            match outcome {
                Outcome::Plus => plus,
                Outcome::Minus => minus * (1.0 - plus),
            }
        };
        acc += prob * fire(response_a, a_plus, alpha) * fire(response_b, b_plus, beta);
    }
    Ok(acc)
}

/// [`outcome_probabilities`] for a fixed pair count and fixed responses, with
/// the response weights and multinomial coefficients folded into one term per
/// contributing composition. Evaluating a new pair distribution then only
/// costs the monomials.
#[derive(Debug, Clone)]
pub struct CompiledOutcomes {
    pairs: u32,
    terms: Vec<CompiledTerm>,
}

#[derive(Debug, Clone)]
struct CompiledTerm {
    counts: [usize; 4],
    coef: [[f64; 2]; 2],
}

impl CompiledOutcomes {
    pub fn new(pairs: u32, response_a: &ResponseFunction, response_b: &ResponseFunction) -> Self {
        let m = pairs as usize;
        let theta_a = response_a.table(pairs);
        let theta_b = response_b.table(pairs);
        let ln_fact = ln_factorials(m);
        let fact = factorials(m);
        let mut terms = Vec::new();
        for npp in 0..=m {
            for npm in 0..=(m - npp) {
                for nmp in 0..=(m - npp - npm) {
                    let nmm = m - npp - npm - nmp;
                    let a_plus = npp + npm;
                    let b_plus = npp + nmp;
                    let multinomial = if pairs <= EXACT_WEIGHT_MAX {
                        fact[m] / (fact[npp] * fact[npm] * fact[nmp] * fact[nmm])
                    } else {
                        (ln_fact[m] - ln_fact[npp] - ln_fact[npm] - ln_fact[nmp] - ln_fact[nmm])
                            .exp()
                    };
                    let mut coef = [[0.0; 2]; 2];
                    let mut any = false;
                    for alpha in Outcome::BOTH {
                        for beta in Outcome::BOTH {
                            let g = party_weight(&theta_a, a_plus, m - a_plus, alpha)
                                * party_weight(&theta_b, b_plus, m - b_plus, beta);
                            coef[alpha.index()][beta.index()] = multinomial * g;
                            any |= g != 0.0;
                        }
                    }
                    if any {
                        terms.push(CompiledTerm {
                            counts: [npp, npm, nmp, nmm],
                            coef,
                        });
                    }
                }
            }
        }
        Self { pairs, terms }
    }

    pub fn pairs(&self) -> u32 {
        self.pairs
    }

    pub fn evaluate(&self, pp: &PairProbabilities) -> [[f64; 2]; 2] {
        let m = self.pairs as usize;
        let t = pp.table();
        let pow = [
            powers(t[0][0], m),
            powers(t[0][1], m),
            powers(t[1][0], m),
            powers(t[1][1], m),
        ];
        let mut out = [[0.0; 2]; 2];
        for term in &self.terms {
            let [a, b, c, d] = term.counts;
            let mono = pow[0][a] * pow[1][b] * pow[2][c] * pow[3][d];
            if mono == 0.0 {
                continue;
            }
            for i in 0..2 {
                for j in 0..2 {
                    out[i][j] += term.coef[i][j] * mono;
                }
            }
        }
        out
    }
}

/// Distribution of `(n+ at Alice, n+ at Bob)` for `pairs` pairs, built one pair
/// at a time. `dist[a][b]` for `a, b` in `0..=pairs`.
pub struct JointCounts {
    pairs: u32,
    dist: Vec<Vec<f64>>,
    pp: [[f64; 2]; 2],
}

impl JointCounts {
    pub fn new(pp: &PairProbabilities) -> Self {
        Self {
            pairs: 0,
            dist: vec![vec![1.0]],
            pp: pp.table(),
        }
    }

    pub fn pairs(&self) -> u32 {
        self.pairs
    }

    pub fn get(&self, a_plus: usize, b_plus: usize) -> f64 {
        self.dist[a_plus][b_plus]
    }

    /// Adds one more pair.
    pub fn step(&mut self) {
        let n = self.pairs as usize + 1;
        let [[ppp, ppm], [pmp, pmm]] = self.pp;
        let mut next = vec![vec![0.0; n + 1]; n + 1];
        for (a, row) in self.dist.iter().enumerate() {
            for (b, &q) in row.iter().enumerate() {
                if q == 0.0 {
                    continue;
                }
                next[a + 1][b + 1] += ppp * q;
                next[a + 1][b] += ppm * q;
                next[a][b + 1] += pmp * q;
                next[a][b] += pmm * q;
            }
        }
        self.dist = next;
        self.pairs += 1;
    }

    /// Coincidence probabilities for the current pair count.
    pub fn outcome_probabilities(&self, theta_a: &[f64], theta_b: &[f64]) -> [[f64; 2]; 2] {
        let m = self.pairs as usize;
        let mut out = [[0.0; 2]; 2];
        for a in 0..=m {
            let ga = [
                party_weight(theta_a, a, m - a, Outcome::Plus),
                party_weight(theta_a, a, m - a, Outcome::Minus),
            ];
            if ga == [0.0, 0.0] {
                continue;
            }
            let mut inner = [0.0; 2];
            for b in 0..=m {
                let q = self.dist[a][b];
                if q == 0.0 {
                    continue;
                }
                inner[0] += q * party_weight(theta_b, b, m - b, Outcome::Plus);
                inner[1] += q * party_weight(theta_b, b, m - b, Outcome::Minus);
            }
            for i in 0..2 {
                for j in 0..2 {
                    out[i][j] += ga[i] * inner[j];
                }
            }
        }
        out
    }
}

/// Detection probabilities for one setting pair under `source`.
pub fn detection_probabilities(
    source: &SourceModel,
    response_a: &ResponseFunction,
    response_b: &ResponseFunction,
    pp: &PairProbabilities,
) -> DetectionProbabilities {
    let pa = pp.marginal_a(Outcome::Plus);
    let pb = pp.marginal_b(Outcome::Plus);
    match source {
        SourceModel::FixedPairs(m) => DetectionProbabilities {
            p_plus_a: marginal_fire_probability(*m, response_a, pa),
            p_plus_b: marginal_fire_probability(*m, response_b, pb),
            joint: outcome_probabilities(*m, response_a, response_b, pp),
        },
        SourceModel::Poisson(src) => {
            let theta_a = response_a.table(src.max_pairs);
            let theta_b = response_b.table(src.max_pairs);
            let mut counts = JointCounts::new(pp);
            let mut joint = [[0.0; 2]; 2];
            for (m, weight) in src.weights() {
                while counts.pairs() < m {
                    counts.step();
                }
                if weight == 0.0 {
                    continue;
                }
                let cell = counts.outcome_probabilities(&theta_a, &theta_b);
                for i in 0..2 {
                    for j in 0..2 {
                        joint[i][j] += weight * cell[i][j];
                    }
                }
            }
            DetectionProbabilities {
                p_plus_a: poisson_mix(src, |m| marginal_fire_probability(m, response_a, pa)),
                p_plus_b: poisson_mix(src, |m| marginal_fire_probability(m, response_b, pb)),
                joint,
            }
        }
    }
}

/// `P+(A)`, `P+(B)` and `P++` under `source`.
///
/// For a Poisson source the counts `n_ab` are independent Poisson variables
/// with means `mu p_ab`, which reduces the `(+,+)` sum to two nested sums; this
/// evaluates the untruncated mixture.
pub fn plus_statistics(
    source: &SourceModel,
    response_a: &ResponseFunction,
    response_b: &ResponseFunction,
    pp: &PairProbabilities,
) -> PlusStatistics {
    match source {
        SourceModel::FixedPairs(_) => {
            PlusStatistics::from(&detection_probabilities(source, response_a, response_b, pp))
        }
        SourceModel::Poisson(src) => {
            let mu = src.mu;
            let t = pp.table();
            let both = truncated_pmf(mu * t[0][0]);
            let only_a = truncated_pmf(mu * t[0][1]);
            let only_b = truncated_pmf(mu * t[1][0]);
            let fire_given = |response: &ResponseFunction, others: &[f64], base: usize| {
                others
                    .iter()
                    .enumerate()
                    .map(|(k, p)| p * response.evaluate((base + k) as u32))
                    .sum::<f64>()
            };
            let mut p_plus_plus = 0.0;
            for (x, px) in both.iter().enumerate() {
                let fa = fire_given(response_a, &only_a, x);
                if fa == 0.0 {
                    continue;
                }
                p_plus_plus += px * fa * fire_given(response_b, &only_b, x);
            }
            let pa = pp.marginal_a(Outcome::Plus);
            let pb = pp.marginal_b(Outcome::Plus);
            PlusStatistics {
                p_plus_a: fire_given(response_a, &truncated_pmf(mu * pa), 0),
                p_plus_b: fire_given(response_b, &truncated_pmf(mu * pb), 0),
                p_plus_plus,
            }
        }
    }
}

/// Poisson pmf out to where the remaining mass is below 1e-18.
fn truncated_pmf(lambda: f64) -> Vec<f64> {
    if lambda <= 0.0 {
        return vec![1.0];
    }
    if lambda > 500.0 {
        // `e^-lambda` would underflow; fall back to log space.
        let kmax = (lambda + 12.0 * lambda.sqrt() + 30.0).ceil() as usize;
        return poisson_pmf(lambda, kmax);
    }
    let mut pmf = Vec::with_capacity((lambda + 6.0 * lambda.sqrt() + 20.0) as usize);
    let mut p = (-lambda).exp();
    let mut k = 0.0;
    loop {
        pmf.push(p);
        k += 1.0;
        // Past the mode the tail is bounded by a geometric series.
        if k > lambda && p * k / (k - lambda) < 1e-18 {
            break;
        }
        p *= lambda / k;
    }
    pmf
}
