use perfowave::geometry::{build_perforated_domain, domain_l2_norm, zero_extend};
use perfowave::lab::{energy_distance, ks_statistic};
use perfowave::micro::pseudo_transform;
use perfowave::noise::{trace, SineBasis, StreamId, WienerSampler};
use perfowave::{AxisBox, CovarianceSpec, MicroState, UnitCellSpec, WaveSystem};
use proptest::prelude::*;

fn naive_energy_distance(a: &[f64], b: &[f64]) -> f64 {
    let mean_abs = |x: &[f64], y: &[f64]| {
        let s: f64 = x
            .iter()
            .flat_map(|p| y.iter().map(move |q| (p - q).abs()))
            .sum();
        s / (x.len() * y.len()) as f64
    };
    2.0 * mean_abs(a, b) - mean_abs(a, a) - mean_abs(b, b)
}

fn holed_cell() -> UnitCellSpec {
    UnitCellSpec::unit_square(Some(
        AxisBox::new(vec![0.25, 0.25], vec![0.75, 0.75]).unwrap(),
    ))
    .unwrap()
}

fn sample() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, 1..40)
}

proptest! {
    #[test]
    fn energy_distance_matches_naive_and_is_symmetric(a in sample(), b in sample()) {
        let fast = energy_distance(&a, &b).unwrap();
        let naive = naive_energy_distance(&a, &b).max(0.0);
        prop_assert!((fast - naive).abs() <= 1e-9 * (1.0 + naive));
        let swapped = energy_distance(&b, &a).unwrap();
        prop_assert!((fast - swapped).abs() <= 1e-12 * (1.0 + fast));
        prop_assert!(energy_distance(&a, &a).unwrap() <= 1e-12);
    }

    #[test]
    fn energy_distance_is_shift_invariant(a in sample(), b in sample(), c in -5.0f64..5.0) {
        let sa: Vec<f64> = a.iter().map(|x| x + c).collect();
        let sb: Vec<f64> = b.iter().map(|x| x + c).collect();
        let d0 = energy_distance(&a, &b).unwrap();
        let d1 = energy_distance(&sa, &sb).unwrap();
        prop_assert!((d0 - d1).abs() <= 1e-9 * (1.0 + d0));
    }

    #[test]
    fn ks_statistic_is_a_probability(a in sample(), b in sample()) {
        let ks = ks_statistic(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&ks));
        prop_assert_eq!(ks_statistic(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn zero_extension_is_linear_and_isometric(
        seed in prop::collection::vec(-1.0f64..1.0, 1..8),
        alpha in -3.0f64..3.0,
    ) {
        let (_, grid, _) = build_perforated_domain(&AxisBox::unit(2), 0.25, &holed_cell(), 1.0 / 16.0).unwrap();
        let n = grid.domain_nodes().len();
        let f: Vec<f64> = (0..n).map(|i| seed[i % seed.len()] * (i as f64).sin()).collect();
        let g: Vec<f64> = (0..n).map(|i| seed[(i + 1) % seed.len()] * (i as f64).cos()).collect();
        let combo: Vec<f64> = f.iter().zip(&g).map(|(x, y)| alpha * x + y).collect();
        let ef = zero_extend(&f, &grid).unwrap();
        let eg = zero_extend(&g, &grid).unwrap();
        let ec = zero_extend(&combo, &grid).unwrap();
        for k in 0..ec.len() {
            prop_assert!((ec[k] - (alpha * ef[k] + eg[k])).abs() <= 1e-12);
        }
        prop_assert!((grid.l2_norm(&ef) - domain_l2_norm(&f, &grid)).abs() <= 1e-12);
    }

    #[test]
    fn pseudo_transform_round_trips(r in 0.0f64..0.99, scale in -2.0f64..2.0) {
        let sys = WaveSystem::perforated(&AxisBox::unit(2), 0.25, &holed_cell(), 1.0 / 16.0).unwrap();
        let mut s = MicroState::zeros(&sys);
        s.u.iter_mut().enumerate().for_each(|(i, x)| *x = scale * (0.1 * i as f64).sin());
        s.v.iter_mut().enumerate().for_each(|(i, x)| *x = (0.3 * i as f64).cos());
        s.delta.iter_mut().enumerate().for_each(|(i, x)| *x = scale * i as f64 * 0.01);
        s.theta.iter_mut().for_each(|x| *x = 0.5);
        let back = pseudo_transform(&s, r).inverse();
        for (x, y) in back.v.iter().zip(&s.v).chain(back.theta.iter().zip(&s.theta)) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        prop_assert_eq!(&back.u, &s.u);
    }
}

#[test]
fn increments_have_the_prescribed_mode_variances() {
    let spec = CovarianceSpec::explicit(vec![0.8, 0.3, 0.05]).unwrap();
    let dt = 0.01;
    let n = 20_000;
    let mut sum2 = [0.0; 3];
    let mut cross = 0.0;
    let mut sampler = WienerSampler::new(spec.clone(), 11, StreamId::new(0, 0, 1));
    for _ in 0..n {
        let c = sampler.next_coefficients(dt);
        for i in 0..3 {
            sum2[i] += c[i] * c[i];
        }
        cross += c[0] * c[1];
    }
    for i in 0..3 {
        let var = sum2[i] / n as f64;
        let want = spec.eigenvalues()[i] * dt;
        // standard error of a chi-square mean is sqrt(2/n) relative
        assert!(
            (var / want - 1.0).abs() < 5.0 * (2.0 / n as f64).sqrt(),
            "mode {i}: {var} vs {want}"
        );
    }
    let corr = cross / n as f64 / (0.8f64 * 0.3).sqrt() / dt;
    assert!(corr.abs() < 5.0 / (n as f64).sqrt(), "correlation {corr}");
}

#[test]
fn mean_square_at_unit_time_matches_trace() {
    let outer = AxisBox::unit(2);
    let spec = CovarianceSpec::power_law(0.5, 2.0, 8).unwrap();
    let (_, grid, _) = build_perforated_domain(
        &outer,
        0.5,
        &UnitCellSpec::unit_square(None).unwrap(),
        1.0 / 32.0,
    )
    .unwrap();
    let basis = SineBasis::new(&outer, spec.modes()).tabulate(&grid, grid.unknown_nodes());
    let weights = grid.unknown_weights();
    let (paths, steps) = (2000, 10);
    let mut acc = 0.0;
    for p in 0..paths {
        let mut sampler = WienerSampler::new(spec.clone(), 3, StreamId::new(0, p, 1));
        let mut w = vec![0.0; basis.len()];
        for _ in 0..steps {
            let dw = sampler
                .sample_increment(1.0 / steps as f64, &basis)
                .unwrap();
            w.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
        }
        acc += w
            .iter()
            .zip(&weights)
            .map(|(x, wt)| wt * x * x)
            .sum::<f64>();
    }
    let mean = acc / paths as f64;
    let tr = trace(&spec);
    assert!(
        (mean / tr - 1.0).abs() < 0.08,
        "E|W(1)|^2 = {mean}, trace {tr}"
    );
}

#[test]
fn distinct_streams_are_uncorrelated_and_scaling_is_quadratic() {
    let spec = CovarianceSpec::explicit(vec![1.0]).unwrap();
    let n = 20_000;
    let mut a = WienerSampler::new(spec.clone(), 5, StreamId::new(0, 0, 1));
    let mut b = WienerSampler::new(spec.clone(), 5, StreamId::new(0, 0, 2));
    let mut c = WienerSampler::new(spec.scaled(3.0), 5, StreamId::new(0, 0, 1));
    let (mut ab, mut ratio_ok) = (0.0, true);
    for _ in 0..n {
        let (x, y, z) = (
            a.next_coefficients(1.0)[0],
            b.next_coefficients(1.0)[0],
            c.next_coefficients(1.0)[0],
        );
        ab += x * y;
        ratio_ok &= (z - 3.0 * x).abs() <= 1e-12 * (1.0 + z.abs());
    }
    assert!((ab / n as f64).abs() < 5.0 / (n as f64).sqrt());
    assert!(ratio_ok, "scaled spec must reuse the same normals");
}
