use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use wicklab::combinat::{hermite_var, stirling1_signed, stirling1_table, stirling2, stirling2_table};
use wicklab::condexp::{cond_exp_closed, cond_exp_oracle, martingale_mc, MonomialSpec};
use wicklab::lattice::{make_partition, Domain};
use wicklab::noise::{sample_field, Noise};
use wicklab::qft::{cm_check, cm_probe_points, connected_cumulant, quartic_s_check, random_xis, rp_gram, QftModel};
use wicklab::rmatrix::{r_matrix, r_matrix_pair};
use wicklab::scalar::{format_rational, parse_rational, GaussRational, Rational, Real};
use wicklab::wick::{renormalized_power, wick_power, wick_product_eval, wick_product_independence_check, Placement};
use wicklab::{Error, Poly1, SquareMatrix};
use wicklab_cli::verify::{run_all, DEFAULT_SEED};

#[derive(Parser)]
#[command(name = "wicklab", version, about = "Wick products, conditional expectations and lattice field checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Noise field sampling.
    #[command(subcommand)]
    Noise(NoiseCmd),
    /// Conditional expectations of cell monomials.
    #[command(subcommand)]
    Condexp(CondexpCmd),
    /// Stirling numbers and Hermite polynomials.
    #[command(subcommand)]
    Combinat(CombinatCmd),
    /// Basis-change matrices.
    #[command(subcommand)]
    Rmatrix(RmatrixCmd),
    /// Wick powers and products.
    #[command(subcommand)]
    Wick(WickCmd),
    /// Free and quartic lattice models.
    #[command(subcommand)]
    Qft(QftCmd),
    /// Run every verification suite and write a JSON report.
    VerifyAll {
        /// Skip the Monte Carlo checks.
        #[arg(long)]
        quick: bool,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum NoiseCmd {
    /// One noise field on the dyadic partition, as JSON.
    Sample {
        #[arg(long)]
        noise: Noise,
        #[arg(long, default_value_t = 1)]
        dim: usize,
        #[arg(long, default_value_t = 2)]
        level: i64,
        #[arg(long, default_value = "1")]
        side: String,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum CondexpCmd {
    /// Compare the closed form with the conditional-law oracle.
    Verify {
        #[arg(long)]
        noise: Noise,
        /// Comma-separated exponents, one per child cell.
        #[arg(long, value_delimiter = ',')]
        exps: Vec<u32>,
        /// Comma-separated child volumes.
        #[arg(long, value_delimiter = ',')]
        volumes: Vec<String>,
        #[arg(long)]
        parent: String,
    },
    /// Monte Carlo martingale check of a renormalized power, one bin per row.
    Mc {
        #[arg(long)]
        noise: Noise,
        #[arg(long, default_value_t = 1)]
        power: usize,
        #[arg(long, default_value_t = 1)]
        dim: usize,
        #[arg(long, default_value_t = 1)]
        level: i64,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value_t = 4.0)]
        max_z: f64,
    },
}

#[derive(Subcommand)]
enum CombinatCmd {
    /// One Stirling number with `--k` and `--l`, or the table up to `--n`.
    Stirling {
        #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=2))]
        kind: u8,
        #[arg(long, requires = "l", conflicts_with = "n")]
        k: Option<usize>,
        #[arg(long, requires = "k")]
        l: Option<usize>,
        #[arg(long, required_unless_present = "k")]
        n: Option<usize>,
    },
    /// Coefficients of the Hermite polynomial with the given variance.
    Hermite {
        #[arg(long)]
        n: usize,
        #[arg(long, alias = "var", default_value = "1")]
        variance: String,
    },
}

#[derive(Subcommand)]
enum RmatrixCmd {
    /// `R(λ)`, or `R(μ, λ)` when `--mu` is given.
    Show {
        #[arg(long)]
        noise: Noise,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        lambda: String,
        #[arg(long)]
        mu: Option<String>,
    },
}

#[derive(Subcommand)]
enum WickCmd {
    /// Coefficients of the Wick powers 0..=n, one row per power.
    Table {
        #[arg(long)]
        noise: Noise,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value = "1")]
        volume: String,
        /// Renormalized powers instead of Wick powers.
        #[arg(long)]
        renormalized: bool,
    },
    /// Wick product of cell variables under every placement strategy.
    CheckProduct {
        #[arg(long)]
        noise: Noise,
        /// Comma-separated cell indices; repeats are allowed.
        #[arg(long, value_delimiter = ',')]
        cells: Vec<usize>,
        #[arg(long, default_value = "1/4")]
        volume: String,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// Model JSON written by `qft build`; overrides the build options.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = Noise::Gauss)]
    noise: Noise,
    #[arg(long, default_value_t = 1)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    level: u32,
    #[arg(long, default_value_t = 4)]
    subgrid: usize,
    #[arg(long)]
    quartic: bool,
}

impl ModelArgs {
    fn load(&self) -> Result<QftModel, CliError> {
        match &self.model {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
                let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
                Ok(QftModel::from_json(&v)?)
            }
            None => Ok(QftModel::build(self.noise, &Domain::unit(self.dim)?, self.level, self.subgrid, self.quartic)?),
        }
    }
}

#[derive(Subcommand)]
enum QftCmd {
    /// Build a free or quartic model and print it as JSON.
    Build {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Connected cumulant of 2 to 4 distinct cells.
    Npoint {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',')]
        cells: Vec<usize>,
    },
    /// Smallest eigenvalue of the reflection Gram matrix.
    Rp {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 2)]
        degree: usize,
        #[arg(long, default_value_t = 0)]
        axis: usize,
        #[arg(long, default_value_t = 1e-10)]
        tolerance: f64,
    },
    /// Sign pattern of mixed derivatives of the Laplace-domain factor.
    Cm {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 3)]
        order: usize,
        #[arg(long, default_value_t = 12)]
        points: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Quartic Sa ≤ 0 on random ξ, by contraction and by direct sum.
    CheckQuartic {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value_t = 1e-10)]
        tolerance: f64,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

type Outcome = Result<bool, CliError>;

fn rational(s: &str) -> Result<Rational, CliError> {
    Ok(parse_rational(s)?)
}

fn poly_json(p: &Poly1<Rational>) -> Value {
    Value::Array(p.coeffs().iter().map(|c| Value::String(format_rational(c))).collect())
}

fn matrix_json(m: &SquareMatrix<GaussRational>) -> Value {
    Value::Array(
        m.rows()
            .map(|row| Value::Array(row.iter().map(|z| json!({"re": format_rational(&z.re), "im": format_rational(&z.im)})).collect()))
            .collect(),
    )
}

fn emit(v: &Value) {
    let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(v).expect("json serializes"));
}

fn write_out(text: &str, out: &Option<PathBuf>) -> Result<(), CliError> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display()))),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| CliError::Usage(e.to_string())),
    }
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Noise(NoiseCmd::Sample { noise, dim, level, side, seed }) => {
            let domain = Domain::new(dim, rational(&side)?)?;
            let field = sample_field(&make_partition(&domain, level)?, noise, seed);
            emit(&field.to_json());
            Ok(true)
        }
        Command::Condexp(CondexpCmd::Verify { noise, exps, volumes, parent }) => {
            let volumes = volumes.iter().map(|v| rational(v)).collect::<Result<Vec<_>, _>>()?;
            let spec = MonomialSpec::new(exps, volumes, rational(&parent)?)?;
            let closed = cond_exp_closed(noise, &spec)?;
            let oracle = cond_exp_oracle(noise, &spec)?;
            let agree = closed == oracle;
            emit(&json!({"closed": poly_json(&closed), "oracle": poly_json(&oracle), "agree": agree}));
            Ok(agree)
        }
        Command::Condexp(CondexpCmd::Mc { noise, power, dim, level, samples, seed, max_z }) => {
            if level < 1 {
                return Err(CliError::Usage("--level must be at least 1".into()));
            }
            let fine = make_partition(&Domain::unit(dim)?, level)?;
            let coarse_level = (level - 1) as u32;
            let coarse_vol = make_partition(&Domain::unit(dim)?, level - 1)?.cell_volume();
            let a_fine = renormalized_power(noise, power, &fine.cell_volume())?.map(|c| c.as_f64());
            let a_coarse = wick_power(noise, power, &coarse_vol)?.map(|c| c.as_f64());
            let r = martingale_mc(noise, &fine, coarse_level, 0, |x| a_fine.eval(&x.values[0]), |px| a_coarse.eval(&px.values[0]), seed, samples)?;
            println!("lower,count,mean,std_error,z,flagged");
            for b in &r.bins {
                println!("{},{},{},{},{},{}", b.lower, b.count, b.mean, b.std_error, b.z, b.flagged);
            }
            println!("pooled,{},,,{},", r.samples, r.pooled_z);
            Ok(r.max_abs_z <= max_z && r.pooled_z.abs() <= max_z)
        }
        Command::Combinat(CombinatCmd::Stirling { kind, k, l, n }) => {
            if let (Some(k), Some(l)) = (k, l) {
                let v = if kind == 1 { stirling1_signed(k, l)? } else { stirling2(k, l)? };
                emit(&json!({"kind": kind, "k": k, "l": l, "value": v.to_string()}));
                return Ok(true);
            }
            let n = n.unwrap_or(0);
            if n > wicklab::combinat::MAX_STIRLING {
                return Err(CliError::Usage(format!("--n at most {}", wicklab::combinat::MAX_STIRLING)));
            }
            let table = if kind == 1 { stirling1_table(n) } else { stirling2_table(n) };
            let rows: Vec<Value> = table.iter().map(|r| Value::Array(r.iter().map(|v| Value::String(v.to_string())).collect())).collect();
            emit(&json!({"kind": kind, "n": n, "table": rows}));
            Ok(true)
        }
        Command::Combinat(CombinatCmd::Hermite { n, variance }) => {
            emit(&json!({"n": n, "variance": variance, "coefficients": poly_json(&hermite_var(n, &rational(&variance)?))}));
            Ok(true)
        }
        Command::Rmatrix(RmatrixCmd::Show { noise, k, lambda, mu }) => {
            let lam = rational(&lambda)?;
            let m = match &mu {
                Some(mu) => r_matrix_pair(noise, k, &rational(mu)?, &lam)?,
                None => r_matrix(noise, k, &lam)?,
            };
            emit(&json!({"noise": noise.name(), "k": k, "lambda": format_rational(&lam), "mu": mu.as_deref().map(rational).transpose()?.map(|m| format_rational(&m)), "entries": matrix_json(&m)}));
            Ok(true)
        }
        Command::Wick(WickCmd::Table { noise, n, volume, renormalized }) => {
            let vol = rational(&volume)?;
            let header: Vec<String> = std::iter::once("n".to_string()).chain((0..=n).map(|j| format!("x^{j}"))).collect();
            println!("{}", header.join(","));
            for m in 0..=n {
                let p = if renormalized { renormalized_power(noise, m, &vol)? } else { wick_power(noise, m, &vol)? };
                let row: Vec<String> = std::iter::once(m.to_string()).chain((0..=n).map(|j| format_rational(&p.coeff(j)))).collect();
                println!("{}", row.join(","));
            }
            Ok(true)
        }
        Command::Wick(WickCmd::CheckProduct { noise, cells, volume }) => {
            if cells.is_empty() {
                return Err(CliError::Usage("--cells must name at least one cell".into()));
            }
            let vol = rational(&volume)?;
            let factors: Vec<(usize, Rational)> = cells.iter().map(|&c| (c, vol.clone())).collect();
            let repeats = cells.iter().map(|c| cells.iter().filter(|d| *d == c).count()).max().unwrap_or(1);
            let strategies = Placement::strategies(repeats);
            let diff = wick_product_independence_check(noise, &factors, &strategies)?;
            let product = wick_product_eval(noise, &factors, &Placement::Equal)?;
            let terms: Vec<Value> = product
                .terms()
                .map(|(m, c)| json!({"monomial": m.factors().iter().map(|&(v, e)| json!([v, e])).collect::<Vec<_>>(), "coefficient": format_rational(c)}))
                .collect();
            let ok = if noise == Noise::Gauss { diff <= 1e-10 } else { diff == 0.0 };
            emit(&json!({"noise": noise.name(), "placements": strategies.len(), "max_difference": diff, "product": terms}));
            Ok(ok)
        }
        Command::Qft(cmd) => run_qft(cmd),
        Command::VerifyAll { quick, seed, out } => {
            let report = run_all(quick, seed);
            write_out(&report.to_json(), &out)?;
            for c in report.checks.iter().filter(|c| !c.passed()) {
                eprintln!("FAIL {}: {}", c.name, c.detail);
            }
            Ok(report.passed)
        }
    }
}

fn run_qft(cmd: QftCmd) -> Outcome {
    match cmd {
        QftCmd::Build { model, out } => {
            let m = model.load()?;
            let mut text = serde_json::to_string(&m.to_json()).expect("json serializes");
            text.push('\n');
            write_out(&text, &out)?;
            Ok(true)
        }
        QftCmd::Npoint { model, cells } => {
            let m = model.load()?;
            let value = connected_cumulant(&m.model, &cells)?;
            emit(&json!({"cells": cells, "cumulant": value}));
            Ok(true)
        }
        QftCmd::Rp { model, degree, axis, tolerance } => {
            let m = model.load()?;
            let r = rp_gram(&m.model, degree, axis)?;
            emit(&json!({"basis_size": r.basis_size, "min_eigenvalue": r.min_eigenvalue}));
            Ok(r.min_eigenvalue >= -tolerance)
        }
        QftCmd::Cm { model, order, points, seed } => {
            let m = model.load()?;
            let cells = m.model.partition.num_cells();
            let r = cm_check(&m.model, order, &cm_probe_points(cells, points, seed))?;
            emit(&json!({"passed": r.passed, "derivatives_checked": r.derivatives_checked, "points": r.points, "min_signed_value": r.min_signed_value}));
            Ok(r.passed)
        }
        QftCmd::CheckQuartic { model, count, seed, tolerance } => {
            let m = model.load()?;
            let cells = m.model.partition.num_cells();
            let r = quartic_s_check(&m, &random_xis(cells, count, seed))?;
            emit(&json!({"samples": r.samples, "max_value": r.max_value, "max_route_diff": r.max_route_diff, "sa_at_zero": r.sa_at_zero}));
            Ok(r.max_value <= 0.0 && r.max_route_diff <= tolerance)
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("WICKLAB_THREADS") {
        let n: usize = v.parse().map_err(|_| CliError::Usage(format!("WICKLAB_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(CliError::Usage("WICKLAB_THREADS must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match configure_threads().and_then(|_| run(cli)) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
