use num_complex::Complex;
use wicklab::lattice::Domain;
use wicklab::noise::Noise;
use wicklab::qft::{connected_cumulant, random_xis, rp_gram, QftModel};
use wicklab::Error;

#[test]
fn json_round_trip_preserves_the_model() {
    let m = QftModel::build(Noise::Poisson, &Domain::unit(1).unwrap(), 2, 4, true).unwrap();
    let back = QftModel::from_json(&m.to_json()).unwrap();
    for xi in random_xis(4, 20, 5) {
        let xi: Vec<Complex<f64>> = xi.iter().map(|&x| Complex::new(x, 0.0)).collect();
        let (a, b) = (m.model.log_phi(&xi).unwrap(), back.model.log_phi(&xi).unwrap());
        assert!((a - b).norm() <= 1e-12 * (1.0 + a.norm()));
    }
}

#[test]
fn coarsened_model_matches_a_direct_build() {
    let domain = Domain::unit(2).unwrap();
    let fine = QftModel::build(Noise::Gauss, &domain, 2, 4, true).unwrap();
    let direct = QftModel::build(Noise::Gauss, &domain, 1, 8, true).unwrap();
    let coarse = fine.model.coarsen(1).unwrap();
    for xi in random_xis(4, 20, 9) {
        let xi: Vec<Complex<f64>> = xi.iter().map(|&x| Complex::new(x, 0.0)).collect();
        let (a, b) = (coarse.sa(&xi).unwrap(), direct.model.sa(&xi).unwrap());
        assert!((a - b).norm() <= 1e-12 * (1.0 + b.norm()));
    }
}

#[test]
fn cumulant_decays_with_distance() {
    let m = QftModel::build(Noise::Gamma, &Domain::unit(1).unwrap(), 3, 4, false).unwrap();
    let near = connected_cumulant(&m.model, &[0, 1]).unwrap();
    let far = connected_cumulant(&m.model, &[0, 4]).unwrap();
    assert!(near > far && far > 0.0);
}

#[test]
fn quartic_models_are_refused_by_the_gram_check() {
    let m = QftModel::build(Noise::Gauss, &Domain::unit(1).unwrap(), 2, 4, true).unwrap();
    assert!(matches!(rp_gram(&m.model, 1, 0), Err(Error::Precondition(_))));
}
