use bellthresh::bell::{local_bound_closed_form, SettingsQuad};
use bellthresh::counting::SourceModel;
use bellthresh::detectors::ResponseFunction;
use bellthresh::optimize::{Functional, Scenario, StateFamily};
use bellthresh::quantum::TwoQubitState;
use proptest::prelude::*;

fn angles() -> impl Strategy<Value = [f64; 4]> {
    prop::array::uniform4(-std::f64::consts::PI..std::f64::consts::PI)
}

fn scenario(state: StateFamily, m: u32, n: u32, eta: f64, functional: Functional) -> Scenario {
    let response = if eta >= 1.0 {
        ResponseFunction::perfect_step(n).unwrap()
    } else {
        ResponseFunction::smooth_step(n, eta).unwrap()
    };
    Scenario::new(state, SourceModel::fixed(m).unwrap(), response, functional)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn outcome_probabilities_form_a_subdistribution(
        a in angles(),
        theta in 0.0..std::f64::consts::FRAC_PI_2,
        m in 1u32..7,
        n in 1u32..7,
        eta in 0.05..1.0f64,
    ) {
        let state = TwoQubitState::pure_state(theta);
        let f = ResponseFunction::smooth_step(n, eta).unwrap();
        let source = SourceModel::fixed(m).unwrap();
        let q = SettingsQuad::from_xz_angles(a);
        for row in q.pair_probabilities(&state) {
            for pp in row {
                let d = bellthresh::counting::detection_probabilities(&source, &f, &f, &pp);
                let mass = d.conclusive_mass();
                prop_assert!(d.joint.iter().flatten().all(|&p| (-1e-15..=1.0 + 1e-15).contains(&p)));
                prop_assert!(mass <= 1.0 + 1e-12);
                prop_assert!(d.p_plus_a >= d.joint[0].iter().sum::<f64>() - 1e-12);
            }
        }
    }

    #[test]
    fn product_states_never_violate_ch(a in angles(), m in 1u32..6, n in 1u32..6) {
        let s = scenario(StateFamily::Pure { theta: 0.0 }, m, n, 1.0, Functional::Ch);
        let ch = s.evaluate(&SettingsQuad::from_xz_angles(a)).unwrap();
        prop_assert!(ch <= 1e-12, "CH = {ch}");
    }

    #[test]
    fn separable_werner_states_never_violate_ch(a in angles(), w in 0.0..=0.5f64, n in 1u32..5) {
        let s = scenario(StateFamily::Werner { w }, n, n, 1.0, Functional::Ch);
        let ch = s.evaluate(&SettingsQuad::from_xz_angles(a)).unwrap();
        prop_assert!(ch <= 1e-12, "CH = {ch}");
    }

    #[test]
    fn product_states_respect_the_postselected_bound(a in angles(), n in 1u32..5) {
        let s = scenario(StateFamily::Pure { theta: 0.0 }, n, n, 1.0, Functional::PostselectedChsh);
        if let Ok(value) = s.evaluate(&SettingsQuad::from_xz_angles(a)) {
            prop_assert!(value <= local_bound_closed_form(n) + 1e-12, "S = {value}");
        }
    }
}
