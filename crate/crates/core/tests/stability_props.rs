//! Frozen-loop stability analysis against closed-loop eigenvalues.

use nalgebra::Matrix3;
use proptest::prelude::*;

use pinn_pid::analysis::{open_loop_response, routh_hurwitz, stability_margin, FrequencyGrid, FrozenLoop};
use pinn_pid::dynamics::MsdParams;

fn eigen_stable(p: &MsdParams, kp: f64, ki: f64, kd: f64) -> bool {
    let (a2, a1, a0) = ((p.damping + kd) / p.mass, (p.stiffness + kp) / p.mass, ki / p.mass);
    let companion = Matrix3::new(0.0, 1.0, 0.0, 0.0, 0.0, 1.0, -a0, -a1, -a2);
    companion.complex_eigenvalues().iter().all(|z| z.re < 0.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn margin_sign_matches_eigenvalues(kp in 0.0f64..5.0, ki in 0.0f64..5.0, kd in 0.0f64..5.0) {
        let p = MsdParams::default();
        prop_assume!(routh_hurwitz(&p, kp, ki, kd).abs() > 1e-6);
        let lp = FrozenLoop { plant: p.clone(), kp, ki, kd };
        let margin = stability_margin(&lp, &FrequencyGrid::default());
        prop_assert_eq!(margin > 0.0, eigen_stable(&p, kp, ki, kd), "margin {}", margin);
    }

    #[test]
    fn routh_value_is_affine_in_each_gain(
        g in prop::array::uniform3(0.0f64..5.0), h in 0.0f64..5.0, w in 0.0f64..1.0, axis in 0usize..3,
    ) {
        let p = MsdParams::default();
        let at = |v: f64| {
            let mut k = g;
            k[axis] = v;
            routh_hurwitz(&p, k[0], k[1], k[2])
        };
        let mixed = at(w * g[axis] + (1.0 - w) * h);
        prop_assert!((mixed - (w * at(g[axis]) + (1.0 - w) * at(h))).abs() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn stable_margin_bounds_sampled_distance(kp in 0.0f64..5.0, ki in 0.01f64..5.0, kd in 0.0f64..5.0, w in 0.01f64..100.0) {
        let p = MsdParams::default();
        prop_assume!(routh_hurwitz(&p, kp, ki, kd) > 1e-6);
        let lp = FrozenLoop { plant: p, kp, ki, kd };
        let margin = stability_margin(&lp, &FrequencyGrid::default());
        let l = open_loop_response(&lp, w).unwrap();
        prop_assert!(margin <= (l + 1.0).norm() + 1e-9, "margin {} above |1 + L| {} at {}", margin, (l + 1.0).norm(), w);
    }
}
