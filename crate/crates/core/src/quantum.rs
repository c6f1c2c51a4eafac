//! Two-qubit states, qubit projective measurements and single-pair outcome
//! probabilities.
//!
//! Basis ordering is `|q_A q_B>` with index `2 * q_A + q_B`, so Alice's qubit
//! is the most significant one.

use std::f64::consts::FRAC_1_SQRT_2;

use nalgebra::{Matrix2, Matrix4, SymmetricEigen, Vector4};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix2c = Matrix2<Complex64>;
pub type Matrix4c = Matrix4<Complex64>;

const TRACE_TOL: f64 = 1e-12;
const HERMITIAN_TOL: f64 = 1e-12;
const EIGEN_FLOOR: f64 = -1e-10;
const UNIT_NORM_TOL: f64 = 1e-12;

/// Binary measurement result of one party.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Plus,
    Minus,
}

impl Outcome {
    pub const BOTH: [Outcome; 2] = [Outcome::Plus, Outcome::Minus];

    /// `+1` or `-1`.
    pub fn sign(self) -> f64 {
        match self {
            Outcome::Plus => 1.0,
            Outcome::Minus => -1.0,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Outcome::Plus => 0,
            Outcome::Minus => 1,
        }
    }

    pub fn flipped(self) -> Outcome {
        match self {
            Outcome::Plus => Outcome::Minus,
            Outcome::Minus => Outcome::Plus,
        }
    }
}

/// A projective qubit measurement, given by the unit Bloch vector of its `+`
/// eigenstate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Setting {
    bloch: [f64; 3],
}

impl Setting {
    pub fn new(bloch: [f64; 3]) -> Result<Self> {
        let norm = bloch.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::NonUnitSetting(norm));
        }
        Ok(Self { bloch })
    }

    /// Direction in the x–z plane at `angle` from the z axis towards x.
    pub fn from_xz_angle(angle: f64) -> Self {
        Self {
            bloch: [angle.sin(), 0.0, angle.cos()],
        }
    }

    pub fn from_spherical(polar: f64, azimuth: f64) -> Self {
        let s = polar.sin();
        Self {
            bloch: [s * azimuth.cos(), s * azimuth.sin(), polar.cos()],
        }
    }

    pub fn sigma_x() -> Self {
        Self::from_xz_angle(std::f64::consts::FRAC_PI_2)
    }

    pub fn sigma_z() -> Self {
        Self::from_xz_angle(0.0)
    }

    pub fn bloch(&self) -> [f64; 3] {
        self.bloch
    }

    pub fn dot(&self, other: &Setting) -> f64 {
        self.bloch
            .iter()
            .zip(other.bloch.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    /// The opposite direction; swaps the roles of the two outcomes.
    pub fn flipped(&self) -> Self {
        Self {
            bloch: self.bloch.map(|c| -c),
        }
    }
}

/// `(1 + s a·σ) / 2`.
pub fn projector(setting: &Setting, sign: Outcome) -> Matrix2c {
    let [x, y, z] = setting.bloch;
    let s = sign.sign();
    let half = 0.5;
    Matrix2c::new(
        Complex64::new(half * (1.0 + s * z), 0.0),
        Complex64::new(half * s * x, -half * s * y),
        Complex64::new(half * s * x, half * s * y),
        Complex64::new(half * (1.0 - s * z), 0.0),
    )
}

/// A validated two-qubit density matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoQubitState {
    rho: Matrix4c,
}

impl TwoQubitState {
    /// Validates trace, Hermiticity and positivity.
    pub fn from_density_matrix(rho: Matrix4c) -> Result<Self> {
        let trace = rho.trace();
        if (trace.re - 1.0).abs() > TRACE_TOL || trace.im.abs() > TRACE_TOL {
            return Err(Error::InvalidState(format!("trace is {trace}")));
        }
        for i in 0..4 {
            for j in 0..4 {
                if (rho[(i, j)] - rho[(j, i)].conj()).norm() > HERMITIAN_TOL {
                    return Err(Error::InvalidState(format!(
                        "not Hermitian at ({i}, {j})"
                    )));
                }
            }
        }
        let min_eig = SymmetricEigen::new(rho)
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig < EIGEN_FLOOR {
            return Err(Error::InvalidState(format!(
                "negative eigenvalue {min_eig:e}"
            )));
        }
        Ok(Self { rho })
    }

    fn from_pure(amplitudes: Vector4<Complex64>) -> Self {
        Self {
            rho: amplitudes * amplitudes.adjoint(),
        }
    }

    /// `cos(theta)|00> + sin(theta)|11>`.
    pub fn pure_state(theta: f64) -> Self {
        let c = Complex64::new(theta.cos(), 0.0);
        let s = Complex64::new(theta.sin(), 0.0);
        let zero = Complex64::new(0.0, 0.0);
        Self::from_pure(Vector4::new(c, zero, zero, s))
    }

    /// `(|01> - |10>) / sqrt(2)`.
    pub fn singlet() -> Self {
        let h = Complex64::new(FRAC_1_SQRT_2, 0.0);
        let zero = Complex64::new(0.0, 0.0);
        Self::from_pure(Vector4::new(zero, h, -h, zero))
    }

    pub fn maximally_mixed() -> Self {
        Self {
            rho: Matrix4c::identity() * Complex64::new(0.25, 0.0),
        }
    }

    /// Singlet mixed with white noise, `w |psi-><psi-| + (1 - w) 1/4`.
    pub fn werner(w: f64) -> Result<Self> {
        Self::singlet().add_white_noise(w)
    }

    /// `w rho + (1 - w) 1/4`.
    pub fn add_white_noise(&self, w: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::InvalidWeight(w));
        }
        let noise = Matrix4c::identity() * Complex64::new(0.25 * (1.0 - w), 0.0);
        Ok(Self {
            rho: self.rho * Complex64::new(w, 0.0) + noise,
        })
    }

    pub fn rho(&self) -> &Matrix4c {
        &self.rho
    }

    pub fn trace(&self) -> f64 {
        self.rho.trace().re
    }

    pub fn purity(&self) -> f64 {
        (self.rho * self.rho).trace().re
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.rho)
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }

    /// Partial trace over Bob.
    pub fn reduced_a(&self) -> Matrix2c {
        let mut out = Matrix2c::zeros();
        for i in 0..2 {
            for j in 0..2 {
                out[(i, j)] = self.rho[(2 * i, 2 * j)] + self.rho[(2 * i + 1, 2 * j + 1)];
            }
        }
        out
    }

    /// Partial trace over Alice.
    pub fn reduced_b(&self) -> Matrix2c {
        let mut out = Matrix2c::zeros();
        for i in 0..2 {
            for j in 0..2 {
                out[(i, j)] = self.rho[(i, j)] + self.rho[(2 + i, 2 + j)];
            }
        }
        out
    }

    /// Exchanges the two qubits.
    pub fn swap_parties(&self) -> Self {
        let perm = |k: usize| (k % 2) * 2 + k / 2;
        let mut rho = Matrix4c::zeros();
        for i in 0..4 {
            for j in 0..4 {
                rho[(perm(i), perm(j))] = self.rho[(i, j)];
            }
        }
        Self { rho }
    }
}

/// `tr[(A^alpha ⊗ B^beta) rho]`.
pub fn joint_probability(
    state: &TwoQubitState,
    a: &Setting,
    b: &Setting,
    alpha: Outcome,
    beta: Outcome,
) -> f64 {
    let op = projector(a, alpha).kronecker(&projector(b, beta));
    trace_of_product(&op, &state.rho).clamp(0.0, 1.0)
}

fn trace_of_product(x: &Matrix4c, y: &Matrix4c) -> f64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for k in 0..4 {
        for l in 0..4 {
            acc += x[(k, l)] * y[(l, k)];
        }
    }
    acc.re
}

/// Single-pair outcome distribution for one setting pair, indexed by
/// `[alpha.index()][beta.index()]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairProbabilities {
    p: [[f64; 2]; 2],
}

impl PairProbabilities {
    /// Checks entries lie in [0, 1] and sum to one.
    pub fn new(p: [[f64; 2]; 2]) -> Result<Self> {
        let total: f64 = p.iter().flatten().sum();
        if p.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidState(format!(
                "pair probabilities {p:?} are not a distribution"
            )));
        }
        Ok(Self { p })
    }

    /// Skips validation; for tables built from already-normalized weights.
    pub(crate) fn from_table_unchecked(p: [[f64; 2]; 2]) -> Self {
        Self { p }
    }

    pub fn uniform() -> Self {
        Self { p: [[0.25; 2]; 2] }
    }

    pub fn get(&self, alpha: Outcome, beta: Outcome) -> f64 {
        self.p[alpha.index()][beta.index()]
    }

    pub fn table(&self) -> [[f64; 2]; 2] {
        self.p
    }

    pub fn marginal_a(&self, alpha: Outcome) -> f64 {
        let row = self.p[alpha.index()];
        row[0] + row[1]
    }

    pub fn marginal_b(&self, beta: Outcome) -> f64 {
        self.p[0][beta.index()] + self.p[1][beta.index()]
    }

    pub fn total(&self) -> f64 {
        self.p.iter().flatten().sum()
    }

    /// Relabels `+ <-> -` on both sides.
    pub fn flip_both(&self) -> Self {
        let p = self.p;
        Self {
            p: [[p[1][1], p[1][0]], [p[0][1], p[0][0]]],
        }
    }

    /// Relabels `+ <-> -` on Bob's side only.
    pub fn flip_b(&self) -> Self {
        let p = self.p;
        Self {
            p: [[p[0][1], p[0][0]], [p[1][1], p[1][0]]],
        }
    }

    /// Correlation `sum alpha beta p(alpha, beta)`.
    pub fn correlator(&self) -> f64 {
        self.p[0][0] + self.p[1][1] - self.p[0][1] - self.p[1][0]
    }
}

pub fn pair_probabilities(state: &TwoQubitState, a: &Setting, b: &Setting) -> PairProbabilities {
    let mut p = [[0.0; 2]; 2];
    for alpha in Outcome::BOTH {
        for beta in Outcome::BOTH {
            p[alpha.index()][beta.index()] = joint_probability(state, a, b, alpha, beta);
        }
    }
    PairProbabilities { p }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_4, FRAC_PI_8, PI};

    fn random_setting(rng: &mut impl Rng) -> Setting {
        let polar = (1.0 - 2.0 * rng.gen::<f64>()).acos();
        Setting::from_spherical(polar, rng.gen_range(0.0..2.0 * PI))
    }

    /// Wootters concurrence from the eigenvalues of `rho (σy⊗σy) rho* (σy⊗σy)`,
    /// obtained as the spectrum of the Hermitian `√rho ρ̃ √rho`.
    fn concurrence(state: &TwoQubitState) -> f64 {
        let rho = *state.rho();
        #[rustfmt::skip]
        let yy = Matrix4c::from_row_slice(&[
            0.0, 0.0, 0.0, -1.0,
            0.0, 0.0, 1.0, 0.0,
            0.0, 1.0, 0.0, 0.0,
            -1.0, 0.0, 0.0, 0.0,
        ].map(|v: f64| Complex64::new(v, 0.0)));
        let flipped = yy * rho.map(|c| c.conj()) * yy;
        let eig = SymmetricEigen::new(rho);
        let sqrt_vals = eig.eigenvalues.map(|v| Complex64::new(v.max(0.0).sqrt(), 0.0));
        let sqrt_rho = eig.eigenvectors * Matrix4c::from_diagonal(&sqrt_vals) * eig.eigenvectors.adjoint();
        let r = sqrt_rho * flipped * sqrt_rho;
        let r = (r + r.adjoint()) * Complex64::new(0.5, 0.0);
        let mut lambdas: Vec<f64> = SymmetricEigen::new(r)
            .eigenvalues
            .iter()
            .map(|v| v.max(0.0).sqrt())
            .collect();
        lambdas.sort_by(|a, b| b.partial_cmp(a).unwrap());
        (lambdas[0] - lambdas[1] - lambdas[2] - lambdas[3]).max(0.0)
    }

    #[test]
    fn product_state_at_zero_angle() {
        let s = TwoQubitState::pure_state(0.0);
        assert!((s.rho()[(0, 0)].re - 1.0).abs() < 1e-15);
        assert!((s.purity() - 1.0).abs() < 1e-12);
        assert!(concurrence(&s) < 1e-7);
    }

    #[test]
    fn maximally_entangled_reduced_state() {
        let s = TwoQubitState::pure_state(FRAC_PI_4);
        let ra = s.reduced_a();
        let rb = s.reduced_b();
        for (i, j) in [(0, 0), (1, 1)] {
            assert!((ra[(i, j)].re - 0.5).abs() < 1e-12);
            assert!((rb[(i, j)].re - 0.5).abs() < 1e-12);
        }
        assert!(ra[(0, 1)].norm() < 1e-12 && rb[(0, 1)].norm() < 1e-12);
    }

    #[test]
    fn concurrence_at_pi_over_eight() {
        let s = TwoQubitState::pure_state(FRAC_PI_8);
        assert!((concurrence(&s) - FRAC_1_SQRT_2).abs() < 1e-7);
    }

    #[test]
    fn singlet_is_pure_and_anticorrelated() {
        let s = TwoQubitState::singlet();
        assert!((s.trace() - 1.0).abs() < 1e-12);
        assert!((s.purity() - 1.0).abs() < 1e-12);
        let a = Setting::from_xz_angle(0.7);
        assert!(joint_probability(&s, &a, &a, Outcome::Plus, Outcome::Plus) < 1e-15);
    }

    #[test]
    fn singlet_matches_closed_form() {
        let s = TwoQubitState::singlet();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let a = random_setting(&mut rng);
            let b = random_setting(&mut rng);
            for alpha in Outcome::BOTH {
                for beta in Outcome::BOTH {
                    let expected = (1.0 - alpha.sign() * beta.sign() * a.dot(&b)) / 4.0;
                    let got = joint_probability(&s, &a, &b, alpha, beta);
                    assert!((got - expected).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn white_noise_limits() {
        let s = TwoQubitState::pure_state(0.3);
        assert_eq!(s.add_white_noise(1.0).unwrap(), s);
        let mixed = s.add_white_noise(0.0).unwrap();
        assert!((mixed.rho() - TwoQubitState::maximally_mixed().rho()).norm() < 1e-15);
        assert_eq!(s.add_white_noise(1.5), Err(Error::InvalidWeight(1.5)));
        assert!(s.add_white_noise(-0.1).is_err());
    }

    #[test]
    fn werner_at_critical_weight() {
        let w = TwoQubitState::werner(FRAC_1_SQRT_2).unwrap();
        let q = crate::bell::SettingsQuad::tsirelson();
        let mut s = 0.0;
        for (i, j, sign) in [(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, -1.0)] {
            s += sign * pair_probabilities(&w, &q.a[i], &q.b[j]).correlator();
        }
        assert!((s.abs() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn projector_examples() {
        let p = projector(&Setting::sigma_z(), Outcome::Plus);
        assert!((p - Matrix2c::new(1.0.into(), 0.0.into(), 0.0.into(), 0.0.into())).norm() < 1e-15);
        let m = projector(&Setting::sigma_x(), Outcome::Minus);
        let expected = Matrix2c::new(0.5.into(), (-0.5).into(), (-0.5).into(), 0.5.into());
        assert!((m - expected).norm() < 1e-15);
    }

    #[test]
    fn projector_is_idempotent_and_complete() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let a = random_setting(&mut rng);
            let p = projector(&a, Outcome::Plus);
            let m = projector(&a, Outcome::Minus);
            assert!((p * p - p).norm() < 1e-12);
            assert!((p.trace().re - 1.0).abs() < 1e-12);
            assert!((p + m - Matrix2c::identity()).norm() < 1e-12);
        }
    }

    #[test]
    fn maximally_mixed_is_uniform() {
        let s = TwoQubitState::maximally_mixed();
        let pp = pair_probabilities(&s, &Setting::from_xz_angle(0.2), &Setting::from_spherical(1.0, 2.0));
        for row in pp.table() {
            for v in row {
                assert!((v - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn pair_probabilities_examples() {
        let s = TwoQubitState::singlet();
        let pp = pair_probabilities(&s, &Setting::sigma_z(), &Setting::sigma_x());
        for row in pp.table() {
            for v in row {
                assert!((v - 0.25).abs() < 1e-12);
            }
        }
        let prod = TwoQubitState::pure_state(0.0);
        let z = Setting::sigma_z();
        let pp = pair_probabilities(&prod, &z, &z);
        assert!((pp.get(Outcome::Plus, Outcome::Plus) - 1.0).abs() < 1e-15);
        assert!(pp.get(Outcome::Minus, Outcome::Minus).abs() < 1e-15);
    }

    #[test]
    fn pure_state_marginal_along_z() {
        for k in 0..=20 {
            let theta = k as f64 * FRAC_PI_4 / 20.0;
            let s = TwoQubitState::pure_state(theta);
            let pp = pair_probabilities(&s, &Setting::sigma_z(), &Setting::sigma_x());
            assert!((pp.marginal_a(Outcome::Plus) - theta.cos().powi(2)).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_invalid_matrices() {
        let mut m = TwoQubitState::maximally_mixed().rho().clone();
        m[(0, 0)] = Complex64::new(0.5, 0.0);
        assert!(TwoQubitState::from_density_matrix(m).is_err());
        let mut m = TwoQubitState::maximally_mixed().rho().clone();
        m[(0, 1)] = Complex64::new(0.1, 0.0);
        assert!(TwoQubitState::from_density_matrix(m).is_err());
        let mut m = Matrix4c::zeros();
        m[(0, 0)] = Complex64::new(1.5, 0.0);
        m[(1, 1)] = Complex64::new(-0.5, 0.0);
        assert!(TwoQubitState::from_density_matrix(m).is_err());
        assert!(TwoQubitState::from_density_matrix(*TwoQubitState::singlet().rho()).is_ok());
    }

    #[test]
    fn setting_norm_is_checked() {
        assert!(Setting::new([1.0, 0.0, 0.0]).is_ok());
        assert!(matches!(Setting::new([1.0, 1.0, 0.0]), Err(Error::NonUnitSetting(_))));
    }

    #[test]
    fn swap_parties_transposes_probabilities() {
        let s = TwoQubitState::pure_state(0.4).add_white_noise(0.8).unwrap();
        let a = Setting::from_xz_angle(0.3);
        let b = Setting::from_xz_angle(1.9);
        let p = pair_probabilities(&s, &a, &b);
        let q = pair_probabilities(&s.swap_parties(), &b, &a);
        for alpha in Outcome::BOTH {
            for beta in Outcome::BOTH {
                assert!((p.get(alpha, beta) - q.get(beta, alpha)).abs() < 1e-12);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn state_strategy() -> impl Strategy<Value = TwoQubitState> {
            prop_oneof![
                (0.0..PI).prop_map(TwoQubitState::pure_state),
                (0.0..=1.0f64).prop_map(|w| TwoQubitState::werner(w).unwrap()),
                (0.0..PI, 0.0..=1.0f64)
                    .prop_map(|(t, w)| TwoQubitState::pure_state(t).add_white_noise(w).unwrap()),
            ]
        }

        fn setting_strategy() -> impl Strategy<Value = Setting> {
            (0.0..PI, 0.0..2.0 * PI).prop_map(|(p, a)| Setting::from_spherical(p, a))
        }

        proptest! {
            #[test]
            fn generated_states_are_valid(s in state_strategy()) {
                prop_assert!(TwoQubitState::from_density_matrix(*s.rho()).is_ok());
            }

            #[test]
            fn probabilities_normalized_and_no_signaling(
                s in state_strategy(),
                a1 in setting_strategy(), a2 in setting_strategy(),
                b1 in setting_strategy(), b2 in setting_strategy(),
            ) {
                let grid = [[pair_probabilities(&s, &a1, &b1), pair_probabilities(&s, &a1, &b2)],
                            [pair_probabilities(&s, &a2, &b1), pair_probabilities(&s, &a2, &b2)]];
                for row in &grid {
                    for pp in row {
                        prop_assert!((pp.total() - 1.0).abs() < 1e-12);
                    }
                }
                for i in 0..2 {
                    prop_assert!((grid[i][0].marginal_a(Outcome::Plus) - grid[i][1].marginal_a(Outcome::Plus)).abs() < 1e-12);
                }
                for j in 0..2 {
                    prop_assert!((grid[0][j].marginal_b(Outcome::Plus) - grid[1][j].marginal_b(Outcome::Plus)).abs() < 1e-12);
                }
            }
        }
    }
}
