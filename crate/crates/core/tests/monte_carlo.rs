use wicklab::condexp::martingale_mc;
use wicklab::lattice::{make_partition, Domain};
use wicklab::noise::Noise;
use wicklab::scalar::{rat_int, Real};
use wicklab::wick::{renormalized_power, wick_power};

#[test]
fn unrenormalized_cube_is_rejected() {
    let fine = make_partition(&Domain::unit(1).unwrap(), 1).unwrap();
    for noise in Noise::ALL {
        let coarse = wick_power(noise, 3, &rat_int(1)).unwrap().map(|c| c.as_f64());
        let r = martingale_mc(noise, &fine, 0, 0, |x| x.values[0].powi(3), |p| coarse.eval(&p.values[0]), 11, 20_000).unwrap();
        assert!(r.max_abs_z > 4.0, "{noise}: plain cube should fail, max |z| = {}", r.max_abs_z);
    }
}

#[test]
fn renormalized_cube_pooled_discrepancy_is_small() {
    let fine = make_partition(&Domain::unit(1).unwrap(), 1).unwrap();
    for noise in Noise::ALL {
        let a = renormalized_power(noise, 3, &fine.cell_volume()).unwrap().map(|c| c.as_f64());
        let coarse = wick_power(noise, 3, &rat_int(1)).unwrap().map(|c| c.as_f64());
        let r = martingale_mc(noise, &fine, 0, 0, |x| a.eval(&x.values[0]), |p| coarse.eval(&p.values[0]), 12, 20_000).unwrap();
        assert!(r.pooled_z.abs() <= 4.0, "{noise}: pooled z {}", r.pooled_z);
    }
}
