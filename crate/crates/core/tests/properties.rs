//! Property-based invariants.

mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use stochabs_core::gaussian::{interval_probability, JointGaussian};
use stochabs_core::kalman::riccati_schedule;
use stochabs_core::linalg;
use stochabs_core::model::{satisfies, Bounds, SpecBounds, Specification};

proptest! {
    /// Law of total variance: Sigma_xx = Var(X|Y) + S_xy S_yy^{-1} S_yx.
    #[test]
    fn conditioning_law_of_total_variance(seed in 0u64..5000) {
        let mut rng = common::rng(seed);
        let nx = 2usize;
        let ny = 2usize;
        let d = nx + ny;
        let cov = common::random_pd(&mut rng, d, 0.5);
        let mean = common::random_vector(&mut rng, d);
        let joint = JointGaussian::new(
            vec![("x".into(), nx), ("y".into(), ny)],
            mean,
            cov.clone(),
        ).unwrap();
        let conditional = joint.condition("y", &DVector::zeros(ny)).unwrap();

        let sigma_xx = cov.view((0, 0), (nx, nx)).into_owned();
        let sigma_xy = cov.view((0, nx), (nx, ny)).into_owned();
        let sigma_yy = cov.view((nx, nx), (ny, ny)).into_owned();
        let explained = &sigma_xy
            * linalg::spd_solve(&sigma_yy, &sigma_xy.transpose()).unwrap();
        let total = conditional.covariance() + explained;
        let rel = linalg::max_abs(&(&total - &sigma_xx))
            / (1.0 + linalg::max_abs(&sigma_xx));
        prop_assert!(rel <= 1e-10, "law of total variance violated: {rel:.3e}");
    }

    /// Complement identity and monotonicity of interval probabilities.
    #[test]
    fn interval_probability_complement_and_monotonicity(
        mean in -10.0f64..10.0,
        variance in 0.0f64..25.0,
        a in -20.0f64..20.0,
        width in 0.0f64..40.0,
        wider in 0.0f64..10.0,
    ) {
        let b = a + width;
        let inside = interval_probability(mean, variance, a, b).unwrap();
        let below = interval_probability(mean, variance, f64::NEG_INFINITY, a).unwrap();
        let above = interval_probability(mean, variance, b, f64::INFINITY).unwrap();
        // The three pieces double-count the closed endpoints only for
        // point masses sitting exactly on a boundary; skip that case.
        if variance > 0.0 {
            prop_assert!((inside + below + above - 1.0).abs() <= 1e-14);
        }
        let widened = interval_probability(mean, variance, a, b + wider).unwrap();
        prop_assert!(widened >= inside - 1e-15, "not monotone in the upper bound");
        let full = interval_probability(mean, variance, f64::NEG_INFINITY, f64::INFINITY).unwrap();
        prop_assert_eq!(full, 1.0);
    }

    /// Shrinking a box never turns an unsatisfied specification satisfied.
    #[test]
    fn satisfies_is_monotone_in_boxes(
        seed in 0u64..5000,
        half_width in 0.1f64..3.0,
        shrink in 0.0f64..1.0,
    ) {
        let mut rng = common::rng(seed);
        let horizon = 6usize;
        let outputs: Vec<DVector<f64>> =
            (0..=horizon).map(|_| common::random_vector(&mut rng, 2)).collect();
        let wide = Specification::new(
            (1, horizon),
            SpecBounds::Constant(vec![
                Bounds::new(-half_width, half_width).unwrap(),
                Bounds::new(-half_width, half_width).unwrap(),
            ]),
            0.5,
        ).unwrap();
        let narrow_hw = half_width * (1.0 - shrink);
        let narrow = Specification::new(
            (1, horizon),
            SpecBounds::Constant(vec![
                Bounds::new(-narrow_hw, narrow_hw).unwrap(),
                Bounds::new(-narrow_hw, narrow_hw).unwrap(),
            ]),
            0.5,
        ).unwrap();
        let wide_ok = satisfies(&wide, &outputs).unwrap();
        let narrow_ok = satisfies(&narrow, &outputs).unwrap();
        prop_assert!(!narrow_ok || wide_ok, "shrinking turned false into true");
    }

    /// Riccati recursion keeps the PSD order and the gain identity on
    /// randomized observed systems.
    #[test]
    fn riccati_invariants_randomized(seed in 0u64..300) {
        let mut rng = common::rng(seed);
        let obs = common::random_observed(&mut rng);
        let horizon = 8;
        let schedule = riccati_schedule(&obs, horizon).unwrap();
        let q = obs.q();
        for t in 0..=horizon {
            let gap = &schedule.a_priori[t] - &schedule.a_posteriori[t];
            prop_assert!(linalg::is_psd(&gap, 1e-9), "PSD order violated at t = {t}");
            let ck = &obs.obs.c * &schedule.gains[t];
            prop_assert!(
                linalg::max_abs(&(ck - DMatrix::identity(q, q))) <= 1e-10,
                "gain identity violated at t = {t}"
            );
        }
    }

    /// Model files survive a serialize -> parse round trip bit for bit.
    #[test]
    fn model_file_roundtrip_bits(seed in 0u64..2000) {
        let mut rng = common::rng(seed);
        let n = 3usize;
        let a = common::random_matrix(&mut rng, n, n);
        let qw = common::random_pd(&mut rng, n, 0.3);
        let sigma0 = common::random_pd(&mut rng, n, 0.3);
        let file = stochabs_core::format::ModelFile {
            format_version: stochabs_core::format::FORMAT_VERSION.to_string(),
            system: stochabs_core::format::SystemBlock {
                a: stochabs_core::format::matrix_to_rows(&a),
                b: vec![vec![0.0]; n],
                h: vec![vec![1.0, 0.0, 0.0]],
                qw: stochabs_core::format::matrix_to_rows(&qw),
                mu0: common::random_vector(&mut rng, n).iter().copied().collect(),
                sigma0: stochabs_core::format::matrix_to_rows(&sigma0),
            },
            observation: None,
            spec: None,
            policy: None,
            seed,
        };
        let reparsed = stochabs_core::format::ModelFile::parse(&file.to_json()).unwrap();
        for (r1, r2) in file.system.a.iter().zip(&reparsed.system.a) {
            for (v1, v2) in r1.iter().zip(r2) {
                prop_assert_eq!(v1.to_bits(), v2.to_bits());
            }
        }
        for (r1, r2) in file.system.qw.iter().zip(&reparsed.system.qw) {
            for (v1, v2) in r1.iter().zip(r2) {
                prop_assert_eq!(v1.to_bits(), v2.to_bits());
            }
        }
        prop_assert_eq!(file.model_hash(), reparsed.model_hash());
    }
}
