use dtbc_core::coeffs::Physics;
use dtbc_core::dtbc::{dst_forward, dst_inverse, kernel_sequence, mode_coefficients, transverse_eigenpairs};
use dtbc_core::fem::{assemble, interpolate};
use dtbc_core::coeffs::CoefficientField;
use dtbc_core::linalg::C64;
use dtbc_core::mesh::{SpaceMesh, TimeMesh, TransverseAxis};
use dtbc_core::stepper::{BoundaryMode, Integrator};
use proptest::prelude::*;

fn physics(n: usize) -> impl Strategy<Value = Physics> {
    (0.2..3.0f64, 0.2..3.0f64, prop::collection::vec(0.2..3.0f64, n), -10.0..10.0f64)
        .prop_map(|(hbar, rho_inf, b_inf, v_inf)| Physics { hbar, rho_inf, b_inf, v_inf })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sine_transform_round_trip(cells in 2usize..80, seed in any::<u64>()) {
        let v: Vec<C64> = (1..cells)
            .map(|j| C64::new(((j as u64 ^ seed) % 97) as f64 / 97.0, ((j as u64).wrapping_mul(seed) % 89) as f64 / 89.0))
            .collect();
        let back = dst_inverse(&dst_forward(&v, cells).unwrap(), cells).unwrap();
        for (a, b) in v.iter().zip(&back) {
            prop_assert!((a - b).norm() < 1e-13);
        }
    }

    #[test]
    fn mode_invariants(p in physics(2), tau in 1e-4..1.0f64, h1 in 1e-3..1.0f64, cells in 2usize..40, extent in 0.3..4.0f64, pick in 0.0..1.0f64) {
        let axis = TransverseAxis { extent, cells };
        let q = 1 + ((cells - 1) as f64 * pick) as usize % (cells - 1);
        let (lambda, sigma) = transverse_eigenpairs(&axis, q).unwrap();
        prop_assert!(sigma > 1.0 / 3.0 && sigma < 1.0 && lambda > 0.0);
        let mc = mode_coefficients(&p, tau, h1, &[(lambda, sigma)]);
        prop_assert!((mc.kappa.norm() - 1.0).abs() < 1e-14);
        prop_assert!(mc.mu.abs() < 1.0);
        prop_assert!(mc.a.im > 0.0);
        prop_assert!(mc.arg_alpha > 0.0 && mc.arg_alpha < 2.0 * std::f64::consts::PI);
    }

    #[test]
    fn kernel_decays(p in physics(1), tau in 1e-3..1.0f64, h1 in 1e-2..1.0f64) {
        let mc = mode_coefficients(&p, tau, h1, &[]);
        let r = kernel_sequence(&mc, 400);
        // |R^m| ≤ |c1| and decays like m^{-3/2}
        let c = mc.c1.norm();
        for v in &r {
            prop_assert!(v.norm() <= c * (1.0 + 1e-12));
        }
        prop_assert!(r[400].norm() < c * 0.01);
    }

    #[test]
    fn truncated_steps_are_unitary(p in physics(1), steps in 1usize..30, k0 in -5.0..5.0f64) {
        let mesh = SpaceMesh::uniform(1, 2.0, 2.5, 0.1, &[]).unwrap();
        let field = CoefficientField::constant(p, &mesh).unwrap();
        let forms = assemble(&mesh, &field).unwrap();
        let psi0 = interpolate(&move |x: [f64; 2]| C64::from_polar((-x[0] * x[0] * 4.0).exp(), k0 * x[0]), &mesh);
        let n0 = forms.l2rho(&psi0);
        let time = TimeMesh::uniform(0.3, steps).unwrap();
        let mut it = Integrator::new(forms.clone(), dtbc_core::coeffs::Forcing::zero(), time, BoundaryMode::DirichletTruncated, psi0).unwrap();
        while !it.is_done() {
            it.advance().unwrap();
        }
        prop_assert!((forms.l2rho(it.current()) - n0).abs() < 1e-12 * n0);
    }

    #[test]
    fn transparent_runs_stay_below_the_initial_norm(p in physics(1), steps in 1usize..40, k0 in -8.0..8.0f64) {
        let mesh = SpaceMesh::uniform(1, 2.0, 2.5, 0.1, &[]).unwrap();
        let field = CoefficientField::constant(p, &mesh).unwrap();
        let forms = assemble(&mesh, &field).unwrap();
        let mut psi0 = interpolate(&move |x: [f64; 2]| C64::from_polar((-x[0] * x[0] * 4.0).exp(), k0 * x[0]), &mesh);
        dtbc_core::stepper::restrict_to_core_layer(&mesh, &mut psi0);
        let n0 = forms.l2rho(&psi0);
        let time = TimeMesh::uniform(0.8, steps).unwrap();
        let mut it = Integrator::new(forms.clone(), dtbc_core::coeffs::Forcing::zero(), time, BoundaryMode::Dtbc, psi0).unwrap();
        while !it.is_done() {
            it.advance().unwrap();
            let n = forms.l2rho(it.current());
            // single steps may gain a little (backflow), the running bound may not
            prop_assert!(n <= n0 * (1.0 + 1e-12));
        }
    }
}
