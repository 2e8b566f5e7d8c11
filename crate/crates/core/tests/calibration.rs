//! Monte Carlo behaviour of the tests and the dimension estimator, plus the
//! bundled AIS fixture.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use subdim_core::bootstrap::{derive_seed, stream};
use subdim_core::fobi::{fobi_asymptotic, fobi_fit};
use subdim_core::pca::{pca_asymptotic, pca_fit, PcaScatter, PcaStatistic};
use subdim_core::sim::{simulate_model, Model, SimulationSpec};
use subdim_core::sir::{sir_asymptotic, sir_fit};
use subdim_core::{estimate_dimension, load_table, DataTable, LevelSource, Sigma1Variant, Strategy};

#[test]
fn fobi_gaussian_null_of_no_signal() {
    let reps = 500;
    let rejections = (0..reps)
        .into_par_iter()
        .filter(|&r| {
            let rng = &mut stream(derive_seed(41, 0, 0), r);
            let x = DataTable::from_matrix(DMatrix::from_fn(2000, 4, |_, _| rng.sample(StandardNormal))).unwrap();
            let fit = fobi_fit(&x).unwrap();
            fobi_asymptotic(&x, &fit, 0, Sigma1Variant::Ica).unwrap().p_value <= 0.05
        })
        .count();
    let rate = rejections as f64 / reps as f64;
    assert!((rate - 0.05).abs() <= 0.025, "rate {rate}");
}

#[test]
fn sir_tail_mean_below_noise_block_mean() {
    // the noise coordinates of the standardized model span a fixed
    // (p - q)-subspace; the smallest eigenvalues average no more than any
    // compression of R onto it
    let (p, q) = (6, 2);
    let mut spec = SimulationSpec::new(Model::SirM1, p, 1000, 1);
    spec.master_seed = 9;
    let hits = (0..500)
        .into_par_iter()
        .filter(|&rep| {
            let (x, y) = simulate_model(&spec, rep).unwrap();
            let fit = sir_fit(&x, y.as_deref().unwrap(), 10).unwrap();
            (q + 1..p).all(|k| {
                let block: f64 = (q..q + p - k).map(|j| fit.r[(j, j)]).sum::<f64>() / (p - k) as f64;
                fit.tk(k).unwrap() <= block + 1e-12
            })
        })
        .count();
    assert!(hits as f64 / 500.0 >= 0.99, "{hits}/500");
}

#[test]
fn sir_asymptotic_pvalues_grow_past_true_dimension() {
    let mut spec = SimulationSpec::new(Model::SirM2, 5, 2000, 1);
    spec.master_seed = 4;
    let (x, y) = simulate_model(&spec, 0).unwrap();
    let fit = sir_fit(&x, y.as_deref().unwrap(), 10).unwrap();
    assert!(sir_asymptotic(&x, &fit, 0).unwrap().p_value < 1e-6);
    assert!(sir_asymptotic(&x, &fit, 1).unwrap().p_value < 1e-3);
}

#[test]
fn bottom_up_recovers_pca_dimension() {
    let mut spec = SimulationSpec::new(Model::PcaM1, 6, 2000, 1);
    spec.master_seed = 77;
    let estimates: Vec<usize> = (0..200)
        .into_par_iter()
        .map(|rep| {
            let (x, _) = simulate_model(&spec, rep).unwrap();
            let fit = pca_fit(&x, PcaScatter::Cov).unwrap();
            let test = |k| {
                let r = pca_asymptotic(&x, &fit, k, PcaStatistic::T)?;
                Ok((r.statistic, r.p_value))
            };
            estimate_dimension(test, 6, Strategy::BottomUp, LevelSource::Fixed(0.05), x.n())
                .unwrap()
                .q_hat
        })
        .collect();
    let hits = estimates.iter().filter(|&&q| q == 3).count();
    assert!(hits >= 180, "q_hat = 3 in {hits}/200");
}

#[test]
fn ais_fixture_structure() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/ais.csv");
    let (x, y) = load_table(path, Some("lbm")).unwrap();
    assert_eq!((x.n(), x.p()), (202, 8));
    let x = DataTable::new(x.matrix().map(f64::ln), x.column_names().to_vec()).unwrap();
    let fit = sir_fit(&x, &y.unwrap(), 10).unwrap();
    assert_eq!(fit.slices.counts, vec![21, 20, 20, 20, 20, 20, 22, 26, 15, 18]);
    assert_eq!(fit.h(), 10);
    let tail = &fit.eigen.values[2..];
    let t2 = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!((fit.tk(2).unwrap() - t2).abs() < 1e-14);
    // mean of the rounded published tail eigenvalues
    assert!((t2 - 0.0417).abs() < 0.005, "{t2}");
}
