use proptest::prelude::*;

use nalgebra::DMatrix;
use tqte::dataset::make_folds;
use tqte::inference::{bootstrap_sups, critical_value, multiplier_band, qte_pointwise, BandwidthRule, MultiplierKind};
use tqte::onestep::{
    drift_parts, drift_value, estimate_nos_values, estimate_oracle_values, estimate_sa, estimate_sa_values,
    uncentered_signal, CandidateNuisances,
};
use tqte::distribution::MonotoneCdf;
use tqte::oracle::{DiscreteLaw, RandomLawOptions};
use tqte::pipeline::{fit_nuisances, NuisanceConfig, Nuisances};
use tqte::{Arm, FoldAssignment, Observation, TauGrid, ThresholdGrid, TwoSampleDataset};

fn finite_grid() -> ThresholdGrid {
    ThresholdGrid::new(vec![0.5, 1.5, 2.5, 3.5]).unwrap()
}

#[test]
fn fitted_influence_values_are_centered() {
    let law = DiscreteLaw::random(3, &RandomLawOptions::default());
    let ds = law.sample(600, 3).unwrap();
    let folds = make_folds(&ds.strata(), 3, 3).unwrap();
    let fitted = fit_nuisances(&ds, &folds, &finite_grid(), &NuisanceConfig::default(), 3).unwrap();
    for arm in Arm::BOTH {
        let est = estimate_sa(&ds, &folds, &fitted, arm).unwrap();
        let phi = est.influence.unwrap();
        for j in 0..phi.ncols() {
            let mean = phi.column(j).sum() / phi.nrows() as f64;
            assert!(mean.abs() < 1e-10, "column {j}: {mean}");
        }
    }
}

#[test]
fn oracle_estimate_is_the_mean_signal() {
    let law = DiscreteLaw::random(4, &RandomLawOptions::default());
    let ds = law.sample(500, 4).unwrap();
    let grid = finite_grid();
    let folds = FoldAssignment::single(ds.n());
    for arm in Arm::BOTH {
        let v = law.oracle_nuisances(&grid).values(&ds, &folds, arm).unwrap();
        let est = estimate_oracle_values(&ds, &v, false).unwrap();
        let gamma = uncentered_signal(&ds, &v).unwrap();
        for j in 0..grid.len() {
            let mean = gamma.column(j).sum() / ds.n() as f64;
            assert!((mean - est.raw[j]).abs() < 1e-12);
        }
        assert_eq!(estimate_sa_values(&ds, &v).unwrap().raw, est.raw);
    }
}

#[test]
fn surrogate_term_vanishes_when_m_equals_g() {
    let law = DiscreteLaw::random(5, &RandomLawOptions::default());
    let ds = law.sample(400, 5).unwrap();
    let grid = finite_grid();
    let v = law
        .oracle_nuisances(&grid)
        .values(&ds, &FoldAssignment::single(ds.n()), Arm::Treated)
        .unwrap()
        .without_surrogate();
    let sa = estimate_sa_values(&ds, &v).unwrap();
    let nos = estimate_nos_values(&ds, &v).unwrap();
    assert_eq!(sa.raw, nos.raw);
    assert_eq!(sa.influence, nos.influence);
}

#[test]
fn perturbing_a_held_out_unit_leaves_fold_models_unchanged() {
    let law = DiscreteLaw::random(6, &RandomLawOptions::default());
    let ds = law.sample(400, 6).unwrap();
    let folds = make_folds(&ds.strata(), 2, 6).unwrap();
    let grid = finite_grid();
    let cfg = NuisanceConfig::default();
    let base = fit_nuisances(&ds, &folds, &grid, &cfg, 6).unwrap();
    // Change the outcome of a validated unit in fold 0.
    let mut obs = ds.observations().to_vec();
    let i = (0..ds.n())
        .find(|&i| folds.fold_of(i) == 0 && ds.get(i).m() == Some(true))
        .unwrap();
    let moved_arm = ds.get(i).as_source().unwrap().arm;
    if let Observation::Source(rec) = &mut obs[i] {
        rec.y = Some(rec.y.unwrap() + 10.0);
        rec.x[0] += 0.25;
    }
    let changed = TwoSampleDataset::new(obs, ds.p(), ds.q()).unwrap();
    let refit = fit_nuisances(&changed, &folds, &grid, &cfg, 6).unwrap();
    for arm in Arm::BOTH {
        assert_eq!(base.arm_fit(0, arm), refit.arm_fit(0, arm));
    }
    assert_ne!(base.arm_fit(1, moved_arm), refit.arm_fit(1, moved_arm));
    for probe in ds.observations() {
        assert_eq!(base.omega_value(0, probe.x()).to_bits(), refit.omega_value(0, probe.x()).to_bits());
    }
}

#[test]
fn omega_averages_one_over_training_sources() {
    let law = DiscreteLaw::random(7, &RandomLawOptions::default());
    let ds = law.sample(500, 7).unwrap();
    let folds = make_folds(&ds.strata(), 4, 7).unwrap();
    let fitted = fit_nuisances(&ds, &folds, &finite_grid(), &NuisanceConfig::default(), 7).unwrap();
    for k in 0..folds.k() {
        let w: Vec<f64> = folds
            .training(k)
            .into_iter()
            .filter(|&i| ds.get(i).is_source())
            .map(|i| fitted.omega_value(k, ds.get(i).x()))
            .collect();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!((mean - 1.0).abs() < 1e-10);
    }
}

#[test]
fn expected_oracle_estimate_is_monotone_in_y() {
    let law = DiscreteLaw::random(8, &RandomLawOptions::default());
    let grid = ThresholdGrid::new(vec![0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
    let oracle = law.oracle_nuisances(&grid);
    let reps = 200;
    let r = reps as f64;
    let mut mean = vec![0.0; grid.len()];
    let mut second = vec![0.0; grid.len()];
    for seed in 0..reps {
        let ds = law.sample(1000, 800 + seed).unwrap();
        let v = oracle.values(&ds, &FoldAssignment::single(ds.n()), Arm::Control).unwrap();
        for (j, e) in estimate_oracle_values(&ds, &v, false).unwrap().raw.into_iter().enumerate() {
            mean[j] += e / r;
            second[j] += e * e / r;
        }
    }
    assert!(mean.windows(2).all(|w| w[0] <= w[1]), "{mean:?}");
    for (j, &y) in grid.points().iter().enumerate() {
        let mc_se = ((second[j] - mean[j] * mean[j]).max(0.0) / r).sqrt();
        let gap = (mean[j] - law.true_psi(Arm::Control, y).unwrap()).abs();
        assert!(gap <= 4.0 * mc_se + 1e-12, "y = {y}: gap {gap} vs MC se {mc_se}");
    }
}

#[test]
fn efficiency_gain_is_nonnegative_under_x_only_validation() {
    let opts = RandomLawOptions {
        rho_x: true,
        ..RandomLawOptions::default()
    };
    for seed in 0..50 {
        let law = DiscreteLaw::random(seed, &opts);
        for arm in Arm::BOTH {
            for y in [0.0, 1.0, 2.0, 3.0] {
                assert!(law.efficiency_gain(arm, y).unwrap() >= 0.0);
            }
        }
    }
}

#[test]
fn band_critical_value_is_deterministic_and_wider_than_pointwise() {
    let law = DiscreteLaw::random(9, &RandomLawOptions { ny: None, ..RandomLawOptions::default() });
    let ds = law.sample(2000, 9).unwrap();
    let grid = ThresholdGrid::uniform(-3.0, 3.0, 61).unwrap();
    let oracle = law.oracle_nuisances(&grid);
    let folds = FoldAssignment::single(ds.n());
    let est: Vec<_> = Arm::BOTH
        .iter()
        .map(|&a| estimate_oracle_values(&ds, &oracle.values(&ds, &folds, a).unwrap(), false).unwrap())
        .collect();
    let cdfs: Vec<_> = est
        .iter()
        .map(|e| MonotoneCdf::project(e.grid.clone(), &e.raw).unwrap())
        .collect();
    let taus = TauGrid::range(0.2, 0.8, 0.1).unwrap();
    let qte = qte_pointwise(&est[1], &est[0], &cdfs[1], &cdfs[0], &taus, 0.05, &BandwidthRule::Iqr).unwrap();
    let a = multiplier_band(&qte, 1000, 0.05, 42, MultiplierKind::Gaussian).unwrap();
    let b = multiplier_band(&qte, 1000, 0.05, 42, MultiplierKind::Gaussian).unwrap();
    assert_eq!(a.critical.to_bits(), b.critical.to_bits());
    assert!(a.critical >= 1.96 - 0.05);
    let (sups, _) = bootstrap_sups(&qte.influence, 1000, 42, MultiplierKind::Gaussian).unwrap();
    let c: Vec<f64> = [0.01, 0.05, 0.10].iter().map(|&al| critical_value(&sups, al).unwrap()).collect();
    assert!(c[0] >= c[1] && c[1] >= c[2]);
    for l in 0..taus.len() {
        assert!(qte.se[l] >= 0.0 && qte.lo[l] <= qte.delta[l] && qte.delta[l] <= qte.hi[l]);
    }
}

#[test]
fn studentized_single_column_sup_is_half_normal() {
    let phi = DMatrix::from_fn(300, 1, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 });
    let (sups, _) = bootstrap_sups(&phi, 20_000, 1, MultiplierKind::Gaussian).unwrap();
    let c = critical_value(&sups, 0.05).unwrap();
    assert!((c - 1.96).abs() < 0.06, "{c}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn drift_identity_holds_for_random_candidates(law_seed in 0u64..10_000, shift in -0.2f64..0.2, scale in 0.5f64..2.0, arm_bit: bool, y in 0u8..4) {
        let law = DiscreteLaw::random(law_seed, &RandomLawOptions::default());
        let arm = if arm_bit { Arm::Treated } else { Arm::Control };
        let y = y as f64;
        let mut c = CandidateNuisances::truth(&law, arm, y);
        for row in &mut c.m {
            for v in row.iter_mut() {
                *v = (*v + shift).clamp(0.0, 1.0);
            }
        }
        for v in &mut c.omega {
            *v *= scale;
        }
        for v in &mut c.e {
            *v = (*v * scale).clamp(0.05, 0.95);
        }
        let d = drift_parts(&c, &law, arm, y).unwrap();
        prop_assert!((d.direct - d.identity).abs() <= 1e-10);
        prop_assert!(drift_value(&CandidateNuisances::truth(&law, arm, y), &law, arm, y).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn identification_representations_agree(law_seed in any::<u64>(), y in 0u8..5) {
        let law = DiscreteLaw::random(law_seed, &RandomLawOptions::default());
        for arm in Arm::BOTH {
            prop_assert!(law.true_psi(arm, y as f64).is_ok());
            let (mean, v) = law.eif_moments(arm, y as f64).unwrap();
            prop_assert!(mean.abs() <= 1e-12 && v >= 0.0);
        }
    }
}
