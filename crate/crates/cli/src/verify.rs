//! Named verification checks, grouped into suites. `verify-all` and the
//! acceptance tests both run these.

use num_complex::Complex;
use num_traits::{One, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use wicklab::algebra::{MultiPoly, Poly1, SquareMatrix};
use wicklab::combinat::{diagonalize_generator, falling_factorial, poisson_generator, stirling1_table, stirling2_table, stirling_identity_check};
use wicklab::condexp::{cond_exp_closed, cond_exp_oracle, cond_exp_poly, martingale_mc, MonomialSpec};
use wicklab::lattice::{make_partition, Domain};
use wicklab::noise::{check_derivative_closure, Noise};
use wicklab::qft::{cm_check, cm_probe_points, connected_cumulant, discrete_green, propagator_kernel, quartic_kernel, quartic_s_check, random_xis, rp_gram, QftModel};
use wicklab::rmatrix::r_matrix;
use wicklab::scalar::{powi, rat, rat_int, real, GaussRational, Rational, Real};
use wicklab::wick::{renormalized_power, t_transform_mc, wick_power, wick_product_eval, wick_product_independence_check, Placement, WickAlgebra};
use wicklab::Result;

pub const DEFAULT_SEED: u64 = 20240611;
pub const MC_SAMPLES: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub status: &'static str,
    pub max_residual: f64,
    pub samples: u64,
    pub detail: String,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.status == "pass"
    }
}

fn check(name: &str, body: impl FnOnce() -> Result<(bool, f64, u64, String)>) -> CheckResult {
    match body() {
        Ok((ok, max_residual, samples, detail)) => CheckResult {
            name: name.to_string(),
            status: if ok { "pass" } else { "fail" },
            max_residual,
            samples,
            detail,
        },
        Err(e) => CheckResult { name: name.to_string(), status: "fail", max_residual: f64::NAN, samples: 0, detail: e.to_string() },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub seed: u64,
    pub quick: bool,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Every suite; `quick` skips the Monte Carlo ones.
pub fn run_all(quick: bool, seed: u64) -> Report {
    let mut checks = exact_suite();
    checks.extend(oracle_suite(seed));
    checks.extend(wick_suite());
    checks.extend(s_homomorphism_suite(seed));
    checks.extend(qft_suite(seed));
    if !quick {
        checks.extend(mc_suite(seed, MC_SAMPLES));
    }
    checks.sort_by(|a, b| a.name.cmp(&b.name));
    let passed = checks.iter().all(CheckResult::passed);
    Report { seed, quick, passed, checks }
}

fn sample_lambdas() -> Vec<Rational> {
    vec![rat(1, 2), rat(1, 3), rat(2, 3), rat_int(1), rat(3, 2), rat_int(2), rat(5, 7), rat(7, 4), rat_int(5), rat(1, 16)]
}

fn count(bools: impl IntoIterator<Item = bool>) -> (u64, u64) {
    bools.into_iter().fold((0, 0), |(n, bad), ok| (n + 1, bad + u64::from(!ok)))
}

fn exact_verdict(n: u64, bad: u64, what: &str) -> (bool, f64, u64, String) {
    (bad == 0, bad as f64, n, format!("{bad} of {n} {what} differ"))
}

/// Stirling identities, the falling-factorial bridge, the generator
/// diagonalization and first-order R matrices, all exact.
pub fn exact_suite() -> Vec<CheckResult> {
    vec![
        check("combinat.stirling_inversion", || {
            let (s1, s2) = (stirling1_table(20), stirling2_table(20));
            let (n, bad) = count((0..=20).flat_map(|k| {
                let (s1, s2) = (&s1, &s2);
                (0..=20).map(move |l| {
                    let a: num_bigint::BigInt = (0..=20).map(|j| &s2[k][j] * &s1[j][l]).sum();
                    let b: num_bigint::BigInt = (0..=20).map(|j| &s1[k][j] * &s2[j][l]).sum();
                    let delta = num_bigint::BigInt::from(u8::from(k == l));
                    a == delta && b == delta
                })
            }));
            Ok(exact_verdict(n, bad, "entries of the two products"))
        }),
        check("combinat.stirling_identity", || {
            let (n, bad) = count((0..=15).map(stirling_identity_check));
            Ok(exact_verdict(n, bad, "orders"))
        }),
        check("combinat.falling_factorial_bridge", || {
            let s1 = stirling1_table(12);
            let mut results = Vec::new();
            for a in [rat_int(1), rat(1, 2), rat_int(3), rat(2, 5)] {
                for s in 0..=12usize {
                    let ax = Poly1::monomial(a.clone(), 1);
                    let bridge = (0..=s).fold(Poly1::zero(), |acc, l| {
                        &acc + &ax.pow(l as u32).scale(&Rational::from_integer(s1[s][l].clone()))
                    });
                    let lhs = falling_factorial(s, &a).scale(&powi(&a, s as i64));
                    let unit = falling_factorial(s, &rat_int(1)).compose(&ax);
                    results.push(lhs == bridge && unit == bridge);
                }
            }
            let (n, bad) = count(results);
            Ok(exact_verdict(n, bad, "(a, s) pairs"))
        }),
        check("combinat.generator_diagonalization", || {
            let mut results = Vec::new();
            for n in 0..=10 {
                let a = poisson_generator(n)?;
                let g = diagonalize_generator(n)?;
                let spectrum = SquareMatrix::diagonal((0..=n).map(|j| real(rat_int(j as i64))).collect());
                let diag_ok = a.is_lower_triangular() && (0..=n).all(|j| *a.get(j, j) == real(rat_int(j as i64)));
                results.push(g.d == spectrum);
                results.push(diag_ok);
                results.push(&a * &g.u == &g.u * &g.d);
                results.push(&(&g.u * &g.d) * &g.u_inv == a);
                results.push(&g.u * &g.u_inv == SquareMatrix::<GaussRational>::identity(n + 1));
            }
            let (n, bad) = count(results);
            Ok(exact_verdict(n, bad, "matrix identities for n ≤ 10"))
        }),
        check("rmatrix.first_order", || {
            let mut results = Vec::new();
            for noise in Noise::ALL {
                for lam in sample_lambdas() {
                    let expected = SquareMatrix::diagonal(vec![GaussRational::one(), real(lam.recip())]);
                    results.push(r_matrix(noise, 1, &lam)? == expected);
                }
            }
            let (n, bad) = count(results);
            Ok(exact_verdict(n, bad, "first-order R matrices"))
        }),
        check("noise.derivative_closure", || {
            let mut worst = 0.0f64;
            let mut n = 0;
            for noise in Noise::ALL {
                for k in 0..=8 {
                    for lam in [rat(1, 3), rat_int(1), rat(5, 2)] {
                        worst = worst.max(check_derivative_closure(noise, k, &lam)?.residual);
                        n += 1;
                    }
                }
            }
            Ok((worst <= 1e-10, worst, n, "closed-form derivatives on ξ ∈ [-3, 3]".into()))
        }),
    ]
}

fn random_volume(rng: &mut ChaCha8Rng) -> Rational {
    rat(rng.random_range(1..=6), rng.random_range(1..=8))
}

/// Closed-form conditional expectations against the conditional-law
/// oracle, plus the named anchors.
pub fn oracle_suite(seed: u64) -> Vec<CheckResult> {
    vec![
        check("condexp.oracle_equivalence", || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut results = Vec::new();
            for noise in Noise::ALL {
                for _ in 0..60 {
                    let cells = rng.random_range(1..=3usize);
                    let vols: Vec<Rational> = (0..cells).map(|_| random_volume(&mut rng)).collect();
                    let covered = vols.iter().fold(Rational::zero(), |a, v| a + v);
                    let parent = if rng.random_bool(0.3) { covered } else { covered + random_volume(&mut rng) };
                    for _ in 0..3 {
                        let mut exps = vec![0u32; cells];
                        let total = rng.random_range(0..=6u32);
                        for _ in 0..total {
                            exps[rng.random_range(0..cells)] += 1;
                        }
                        let spec = MonomialSpec::new(exps, vols.clone(), parent.clone())?;
                        let closed = cond_exp_closed(noise, &spec)?;
                        let degree_ok = closed.degree().unwrap_or(0) == spec.degree() as usize;
                        results.push(degree_ok && closed == cond_exp_oracle(noise, &spec)?);
                    }
                }
            }
            let (n, bad) = count(results);
            Ok(exact_verdict(n, bad, "monomials (60 volume configurations per noise)"))
        }),
        check("condexp.anchors", || {
            let mut results = Vec::new();
            for (q, p) in [(rat(1, 4), rat_int(1)), (rat(1, 3), rat(5, 2))] {
                let one = MonomialSpec::new(vec![2], vec![q.clone()], p.clone())?;
                let poisson = Poly1::new(vec![rat_int(0), q.recip() - p.recip(), rat_int(1)]);
                let gauss = Poly1::new(vec![q.recip() - p.recip(), rat_int(0), rat_int(1)]);
                results.push(cond_exp_closed(Noise::Poisson, &one)? == poisson);
                results.push(cond_exp_closed(Noise::Gauss, &one)? == gauss);
                let half = q.clone() / rat_int(2);
                let two = MonomialSpec::new(vec![1, 1], vec![half.clone(), half], p.clone())?;
                let gamma = Poly1::monomial(p.clone() / (p.clone() + rat_int(1)), 2);
                results.push(cond_exp_closed(Noise::Gamma, &two)? == gamma);
            }
            let (n, bad) = count(results);
            Ok(exact_verdict(n, bad, "anchor polynomials"))
        }),
    ]
}

/// Martingale property of renormalized powers and placement independence of
/// Wick products.
pub fn wick_suite() -> Vec<CheckResult> {
    vec![
        check("wick.martingale", || {
            let mut results = Vec::new();
            for noise in Noise::ALL {
                for (q, p) in [(rat(1, 2), rat_int(1)), (rat(1, 16), rat(1, 4)), (rat(2, 7), rat(3, 2))] {
                    for k in 0..=8 {
                        let fine = renormalized_power(noise, k, &q)?;
                        results.push(cond_exp_poly(noise, &fine, &q, &p)? == wick_power(noise, k, &p)?);
                    }
                }
            }
            let (n, bad) = count(results);
            Ok(exact_verdict(n, bad, "(noise, volumes, k) cases"))
        }),
        check("wick.placement_independence", || {
            let mut ok = true;
            let mut worst = 0.0f64;
            let mut n = 0;
            let mut fewest = usize::MAX;
            let v = rat(1, 4);
            for noise in Noise::ALL {
                for m in 1..=5usize {
                    for others in 0..=2usize {
                        if m + others > 6 {
                            continue;
                        }
                        let mut cells = vec![(0usize, v.clone()); m];
                        cells.extend((1..=others).map(|c| (c, v.clone())));
                        let strategies = Placement::strategies(m);
                        fewest = fewest.min(strategies.len());
                        let diff = wick_product_independence_check(noise, &cells, &strategies)?;
                        ok &= if noise == Noise::Gauss { diff <= 1e-10 } else { diff == 0.0 };
                        worst = worst.max(diff);
                        n += 1;
                    }
                }
            }
            Ok((ok && fewest >= 10, worst, n, format!("at least {fewest} placements per product")))
        }),
        check("wick.repeated_cells", || {
            let mut results = Vec::new();
            let v = rat(3, 8);
            for noise in Noise::ALL {
                for m in 1..=6 {
                    let got = wick_product_eval(noise, &vec![(0, v.clone()); m], &Placement::Equal)?;
                    results.push(got == MultiPoly::from_univariate(0, &wick_power(noise, m, &v)?));
                }
            }
            let (n, bad) = count(results);
            Ok(exact_verdict(n, bad, "Wick powers"))
        }),
    ]
}

fn random_poly(rng: &mut ChaCha8Rng, vars: usize, degree: u32) -> MultiPoly<Rational> {
    let mut p = MultiPoly::zero();
    for _ in 0..rng.random_range(1..=5) {
        let d0 = rng.random_range(0..=degree);
        let d1 = if vars > 1 { rng.random_range(0..=degree - d0) } else { 0 };
        let mut m = MultiPoly::constant(rat(rng.random_range(-5..=5), rng.random_range(1..=4)));
        for _ in 0..d0 {
            m = m.mul(&MultiPoly::var(0));
        }
        for _ in 0..d1 {
            m = m.mul(&MultiPoly::var(1));
        }
        p = p.add(&m);
    }
    p
}

/// `S(a ⋄ b) = S(a) S(b)` for random polynomials of degree ≤ 3.
pub fn s_homomorphism_suite(seed: u64) -> Vec<CheckResult> {
    vec![check("wick.s_homomorphism", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut worst = 0.0f64;
        let mut n = 0;
        for noise in Noise::ALL {
            let alg = WickAlgebra::new(noise, vec![rat(1, 4), rat(1, 2)])?;
            for _ in 0..100 {
                let a = random_poly(&mut rng, 2, 3);
                let b = random_poly(&mut rng, 2, 3);
                let ab = alg.wick_mul(&a, &b)?;
                let xi = [Complex::new(rng.random_range(-1.5..1.5), 0.0), Complex::new(rng.random_range(-1.5..1.5), 0.0)];
                let lhs = alg.s_transform(&ab, &xi)?;
                let rhs = alg.s_transform(&a, &xi)? * alg.s_transform(&b, &xi)?;
                worst = worst.max((lhs - rhs).norm());
                n += 1;
            }
        }
        Ok((worst <= 1e-10, worst, n, "absolute |S(a⋄b) − S(a)S(b)|".into()))
    })]
}

fn unit(d: usize) -> Result<Domain> {
    Domain::unit(d)
}

/// Green function, kernels, cumulants, reflection positivity and complete
/// monotonicity at desk scale.
pub fn qft_suite(seed: u64) -> Vec<CheckResult> {
    vec![
        check("qft.green", || {
            let (mut res, mut rows, mut min) = (0.0f64, 0.0f64, f64::INFINITY);
            let mut n = 0;
            for d in 1..=2 {
                for level in 0..=3u32 {
                    let g = discrete_green(&unit(d)?, 4 << level, 1.0)?;
                    res = res.max(g.residual());
                    rows = rows.max((g.row_sum() - 1.0).abs());
                    min = min.min(g.min_entry());
                    n += 1;
                }
            }
            let ok = res <= 1e-8 && rows <= 1e-10 && min > 0.0;
            Ok((ok, res.max(rows), n, format!("residual {res:e}, row-sum error {rows:e}, smallest entry {min:e}")))
        }),
        check("qft.kernel_compatibility", || {
            let mut worst = 0.0f64;
            let mut n = 0;
            for (order, d, level) in [(2usize, 1usize, 3u32), (2, 2, 3), (4, 1, 3), (4, 2, 2)] {
                let build = if order == 2 { propagator_kernel } else { quartic_kernel };
                let fine = build(&make_partition(&unit(d)?, level as i64)?, 4)?;
                for steps in 1..=2u32 {
                    let coarse = make_partition(&unit(d)?, (level - steps) as i64)?;
                    let direct = build(&coarse, 4 << steps)?;
                    worst = worst.max(fine.coarsen(level - steps)?.relative_difference(&direct)?);
                    n += 1;
                }
            }
            Ok((worst <= 1e-12, worst, n, "relative block-sum error, orders 2 and 4".into()))
        }),
        check("qft.quartic_sa", || {
            let (mut value, mut diff) = (f64::NEG_INFINITY, 0.0f64);
            let mut n = 0;
            for (d, level) in [(1usize, 3u32), (2, 2)] {
                let m = QftModel::build(Noise::Gauss, &unit(d)?, level, 4, true)?;
                let cells = m.model.partition.num_cells();
                let r = quartic_s_check(&m, &random_xis(cells, 1000, seed.wrapping_add(d as u64)))?;
                value = value.max(r.max_value).max(r.sa_at_zero);
                diff = diff.max(r.max_route_diff);
                n += r.samples as u64;
            }
            Ok((value <= 0.0 && diff <= 1e-10, diff, n, format!("largest quartic Sa {value:e}")))
        }),
        check("qft.reference_independence", || {
            let mut worst = 0.0f64;
            let mut n = 0;
            for (d, level) in [(1usize, 3u32), (2, 2)] {
                let m = QftModel::build(Noise::Gauss, &unit(d)?, level, 4, false)?;
                let alpha = m.model.alpha2.as_ref().expect("free field has a kernel");
                let vol = m.model.partition.cell_volume().as_f64();
                let cells = m.model.partition.num_cells();
                let others = [m.with_noise(Noise::Poisson), m.with_noise(Noise::Gamma)];
                for a in 0..cells {
                    for b in a + 1..cells {
                        let g = connected_cumulant(&m.model, &[a, b])?;
                        worst = worst.max((g - 2.0 * alpha.entry(&[a, b]) / (vol * vol)).abs());
                        for o in &others {
                            worst = worst.max((connected_cumulant(&o.model, &[a, b])? - g).abs());
                        }
                        n += 1;
                    }
                }
            }
            Ok((worst <= 1e-10, worst, n, "two-cell cumulants, Gauss vs Poisson vs Gamma".into()))
        }),
        check("qft.reflection_positivity", || {
            let mut min = f64::INFINITY;
            let mut n = 0;
            for (d, level) in [(1usize, 1u32), (1, 2), (1, 3), (2, 1), (2, 2)] {
                let m = QftModel::build(Noise::Gauss, &unit(d)?, level, 4, false)?;
                for axis in 0..d {
                    for degree in 1..=2 {
                        min = min.min(rp_gram(&m.model, degree, axis)?.min_eigenvalue);
                        n += 1;
                    }
                }
                let reference = wicklab::wick::ModelSpec::new(Noise::Gauss, m.model.partition.clone(), None, None)?;
                min = min.min(rp_gram(&reference, 2, 0)?.min_eigenvalue);
                n += 1;
            }
            Ok((min >= -1e-10, min.min(0.0).abs(), n, format!("smallest Gram eigenvalue {min:e}")))
        }),
        check("qft.complete_monotonicity", || {
            let mut ok = true;
            let mut min = f64::INFINITY;
            let mut n = 0;
            for noise in [Noise::Poisson, Noise::Gamma] {
                for (d, level) in [(1usize, 3u32), (2, 2)] {
                    let m = QftModel::build(noise, &unit(d)?, level, 4, false)?;
                    let cells = m.model.partition.num_cells();
                    let r = cm_check(&m.model, 3, &cm_probe_points(cells, 12, seed))?;
                    ok &= r.passed;
                    min = min.min(r.min_signed_value);
                    n += (r.derivatives_checked * r.points) as u64;
                }
            }
            Ok((ok, min.min(0.0).abs(), n, format!("smallest signed derivative ratio {min:e}")))
        }),
    ]
}

/// Monte Carlo martingale and T-transform checks.
pub fn mc_suite(seed: u64, samples: usize) -> Vec<CheckResult> {
    let fine = || make_partition(&Domain::unit(1)?, 1);
    let mut out = Vec::new();
    for noise in Noise::ALL {
        for k in 1..=3usize {
            let name = format!("mc.martingale.{noise}.power{k}");
            out.push(check(&name, || {
                let fine = fine()?;
                let (q, p) = (fine.cell_volume(), rat_int(1));
                let a_fine = renormalized_power(noise, k, &q)?.map(|c| c.as_f64());
                let a_coarse = wick_power(noise, k, &p)?.map(|c| c.as_f64());
                let r = martingale_mc(
                    noise,
                    &fine,
                    0,
                    0,
                    |x| a_fine.eval(&x.values[0]),
                    |px| a_coarse.eval(&px.values[0]),
                    seed.wrapping_add(k as u64),
                    samples,
                )?;
                let flagged = r.bins.iter().filter(|b| b.flagged).count();
                let worst = r.max_abs_z.max(r.pooled_z.abs());
                Ok((worst <= 4.0, worst, r.samples as u64, format!("{} bins ({flagged} flagged), pooled z {:.3}", r.bins.len(), r.pooled_z)))
            }));
        }
        out.push(check(&format!("mc.t_transform.{noise}"), || {
            let part = fine()?;
            let alg = WickAlgebra::for_partition(noise, &part);
            let x0 = MultiPoly::var(0);
            let square = MultiPoly::from_univariate(0, &wick_power(noise, 2, &part.cell_volume())?);
            let probes = [[0.5, 0.0], [-0.7, 0.3], [1.1, -0.4], [0.2, 0.9], [-1.3, -1.0]];
            let mut worst = 0.0f64;
            for (i, xi) in probes.iter().enumerate() {
                for a in [&x0, &square] {
                    let est = t_transform_mc(a, &part, noise, xi, seed.wrapping_add(100 + i as u64), samples)?;
                    let xs: Vec<Complex<f64>> = xi.iter().map(|&v| Complex::new(v, 0.0)).collect();
                    let s = alg.s_transform(a, &xs)?;
                    let zr = if est.ratio_se.0 > 0.0 { (est.ratio.re - s.re).abs() / est.ratio_se.0 } else { 0.0 };
                    let zi = if est.ratio_se.1 > 0.0 { (est.ratio.im - s.im).abs() / est.ratio_se.1 } else { 0.0 };
                    worst = worst.max(zr).max(zi);
                }
            }
            Ok((worst <= 4.0, worst, (probes.len() * 2 * samples) as u64, "standard errors between T/μ̂ and S".into()))
        }));
    }
    out
}
