//! Property tests for the numerical building blocks.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use twotime::linalg::{matrix_exp, solve_lyapunov, spectral_report, Matrix};
use twotime::schedule::{Scale, StepSchedule};
use twotime::stats::{autocov_estimate, empirical_cov, ks_test_1d, rate_slope, std_normal_cdf, VerdictContext};
use twotime::trajectory::{build_path, FddSamples};

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

/// A random matrix shifted so that every eigenvalue has real part at least `margin`.
fn stable_drift(rng: &mut ChaCha8Rng, d: usize, margin: f64) -> Matrix {
    let a = gaussian(rng, d, d);
    let shift = margin - spectral_report(&a).unwrap().min_real_part.min(0.0);
    a.add(&Matrix::identity(d).scale(shift)).unwrap()
}

fn psd(rng: &mut ChaCha8Rng, d: usize) -> Matrix {
    let r = gaussian(rng, d, d);
    r.matmul(&r.transpose()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lyapunov_solution_has_small_residual(d in 1usize..=8, seed: u64, margin in 0.05f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = stable_drift(&mut rng, d, margin);
        let c = psd(&mut rng, d);
        let sigma = solve_lyapunov(&b, &c).unwrap();
        let lhs = b.matmul(&sigma).unwrap().add(&sigma.matmul(&b.transpose()).unwrap()).unwrap();
        let resid = lhs.sub(&c).unwrap().frobenius_norm();
        prop_assert!(resid < 1e-10 * (1.0 + c.frobenius_norm()), "residual {resid}");
        prop_assert!(sigma.asymmetry() <= 1e-12);
        prop_assert!(sigma.min_symmetric_eigenvalue().unwrap() >= -1e-10);
    }

    #[test]
    fn matrix_exp_semigroup(d in 1usize..=6, seed: u64, s in 0.0f64..1.0, frac in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = gaussian(&mut rng, d, d);
        // Keep ‖M‖(s+t) ≤ 10.
        let total = 10.0 / m.frobenius_norm().max(1e-12) * s;
        let (s, t) = (total * frac, total * (1.0 - frac));
        let lhs = matrix_exp(&m, s).unwrap().matmul(&matrix_exp(&m, t).unwrap()).unwrap();
        let rhs = matrix_exp(&m, s + t).unwrap();
        let err = lhs.sub(&rhs).unwrap().frobenius_norm();
        prop_assert!(err <= 1e-10 * rhs.frobenius_norm().max(1.0), "err {err}");
    }

    #[test]
    fn spectrum_invariant_under_transpose(d in 1usize..=8, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = gaussian(&mut rng, d, d);
        let a = spectral_report(&m).unwrap().real_parts;
        let b = spectral_report(&m.transpose()).unwrap().real_parts;
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-10 * (1.0 + x.abs()), "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn locate_brackets_time(a in 0.5f64..=1.0, db in 0.0f64..0.5, n in 1usize..5_000, t in 0.0f64..3.0) {
        let b = (a + db).min(1.0);
        let s = StepSchedule::polynomial(1.0, a, 1.0, b).unwrap();
        for scale in [Scale::Alpha, Scale::Beta] {
            let (m, floor) = s.locate(scale, n, t).unwrap();
            prop_assert!(m >= n);
            prop_assert!(floor <= t);
            prop_assert!(t < floor + s.step(scale, m).unwrap());
            prop_assert_eq!(floor, s.gamma_sum(scale, n, m).unwrap());
        }
    }

    #[test]
    fn locate_inverts_partial_sums(a in 0.5f64..=1.0, n in 1usize..2_000, k in 0usize..3_000) {
        let s = StepSchedule::polynomial(0.7, a, 1.3, 1.0).unwrap();
        for scale in [Scale::Alpha, Scale::Beta] {
            let g = s.gamma_sum(scale, n, n + k).unwrap();
            prop_assert_eq!(s.locate(scale, n, g).unwrap(), (n + k, g));
        }
    }

    #[test]
    fn locate_is_monotone(n in 1usize..3_000, t1 in 0.0f64..2.0, dt in 0.0f64..2.0) {
        let s = StepSchedule::polynomial(1.0, 0.6, 1.0, 0.9).unwrap();
        for scale in [Scale::Alpha, Scale::Beta] {
            let (m1, _) = s.locate(scale, n, t1).unwrap();
            let (m2, _) = s.locate(scale, n, t1 + dt).unwrap();
            prop_assert!(m1 <= m2);
        }
    }

    #[test]
    fn empirical_cov_is_permutation_invariant(seed: u64, r in 2usize..60, d in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = gaussian(&mut rng, r, d);
        let mut order: Vec<usize> = (0..r).collect();
        for i in (1..r).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let permuted: Vec<Vec<f64>> = order.iter().map(|&i| m.row(i).to_vec()).collect();
        let p = Matrix::from_rows(&permuted).unwrap();
        let a = empirical_cov(&m).unwrap().matrix;
        let b = empirical_cov(&p).unwrap().matrix;
        prop_assert!(a.max_abs_diff(&b) <= 1e-12 * (1.0 + a.frobenius_norm()));
    }

    #[test]
    fn rate_slope_is_one_for_proportional_inputs(a in 0.1f64..1.0, c in 1e-6f64..1e6, k in 4usize..12) {
        let s = StepSchedule::polynomial(1.0, a, 1.0, 1.0).unwrap();
        let ns: Vec<usize> = (0..k).map(|i| 1usize << (i + 4)).collect();
        let steps: Vec<f64> = ns.iter().map(|&n| s.step(Scale::Alpha, n).unwrap()).collect();
        let norms: Vec<f64> = steps.iter().map(|st| c * st).collect();
        let fit = rate_slope(&ns, &norms, &steps).unwrap();
        prop_assert!((fit.slope - 1.0).abs() < 1e-12, "slope {}", fit.slope);
    }

    #[test]
    fn autocov_at_zero_lag_equals_empirical_cov(seed: u64, r in 2usize..80, d in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let times = vec![0.0, 0.5];
        let rows: Vec<Vec<f64>> = (0..r)
            .map(|_| (0..2 * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let f = FddSamples::from_rows(times, d, rows);
        for k in 0..2 {
            prop_assert_eq!(autocov_estimate(&f, k, k).unwrap(), empirical_cov(&f.slice(k)).unwrap().matrix);
        }
    }

    #[test]
    fn path_anchors_are_exact_and_segments_linear(seed: u64, len in 2usize..40, n in 1usize..500, u in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = StepSchedule::polynomial(1.0, 0.6, 1.0, 0.9).unwrap();
        let values: Vec<Vec<f64>> = (0..len)
            .map(|_| vec![rng.sample(StandardNormal), rng.sample(StandardNormal)])
            .collect();
        let path = build_path(Scale::Beta, n, values.clone(), &s).unwrap();
        for (t, v) in path.anchor_times().iter().zip(&values) {
            prop_assert_eq!(&path.eval(*t).unwrap(), v);
        }
        // Within a segment the path moves at the segment slope.
        let k = ((len - 1) as f64 * u).floor() as usize % (len - 1);
        let t0 = path.anchor_times()[k];
        let h = s.step(Scale::Beta, n + k).unwrap();
        let eps = 0.25 * h;
        let t = t0 + 0.5 * h;
        let a = path.eval(t).unwrap();
        let b = path.eval(t + eps).unwrap();
        for c in 0..2 {
            let slope = (values[k + 1][c] - values[k][c]) / h;
            prop_assert!((b[c] - a[c] - slope * eps).abs() <= 1e-9 * (1.0 + slope.abs()));
        }
    }
}

#[test]
fn n_beta_is_nondecreasing_up_to_a_million() {
    for b in [0.5, 0.75, 0.9, 1.0] {
        let s = StepSchedule::polynomial(1.0, 0.5, 2.0, b).unwrap();
        let mut prev = 0.0;
        for n in 0..=1_000_000usize {
            let v = n as f64 * s.step(Scale::Beta, n).unwrap();
            assert!(v >= prev, "b = {b}, n = {n}");
            prev = v;
        }
    }
}

#[test]
fn lyapunov_hundred_instances_fast() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..100 {
        let d = 1 + i % 8;
        let b = stable_drift(&mut rng, d, 0.1);
        let c = psd(&mut rng, d);
        let sigma = solve_lyapunov(&b, &c).unwrap();
        let lhs = b.matmul(&sigma).unwrap().add(&sigma.matmul(&b.transpose()).unwrap()).unwrap();
        assert!(lhs.sub(&c).unwrap().frobenius_norm() < 1e-10 * (1.0 + c.frobenius_norm()));
    }
    assert!(start.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn ks_p_values_are_uniform_under_the_null() {
    let mut below = 0;
    for trial in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let z: Vec<f64> = (0..500).map(|_| rng.sample(StandardNormal)).collect();
        let v = ks_test_1d("null", &z, std_normal_cdf, VerdictContext::default()).unwrap();
        if v.p_value.unwrap() < 0.01 {
            below += 1;
        }
    }
    assert!((1..=8).contains(&below), "{below} of 200 below 0.01");
}
