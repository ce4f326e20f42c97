use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gvacl::bench::{render_table, run_bench, BenchConfig};
use gvacl::csv_io::{read_long, write_long};
use gvacl::logistic::{fit_logistic_experimental, DEFAULT_NODES};
use gvacl::simulate::CovariateLaw;
use gvacl::{fit, simulate, standard_errors, Family, FitConfig, FitResult, Method, MgfSpec, SimSpec};
use serde_json::{json, Map, Value};

const DEFAULT_ALPHA: f64 = 0.8;

#[derive(Parser)]
#[command(name = "gvacl", version, about = "Variational fits for crossed random-effect GLMs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Poisson,
    Gamma,
    Logistic,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum MethodArg {
    Gva,
    Gvacl,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Gva => Method::FullGva,
            MethodArg::Gvacl => Method::Gvacl,
        }
    }
}

#[derive(clap::Args)]
struct FamilyOpts {
    #[arg(long, value_enum)]
    family: FamilyArg,
    /// Gamma shape (known); defaults to 0.8.
    #[arg(long)]
    alpha: Option<f64>,
}

impl FamilyOpts {
    fn resolve(&self) -> Result<Family, Failure> {
        match (self.family, self.alpha) {
            (FamilyArg::Gamma, alpha) => Family::gamma(alpha.unwrap_or(DEFAULT_ALPHA)).map_err(Failure::usage),
            (_, Some(_)) => Err(Failure::Usage("--alpha only applies to --family gamma".into())),
            (FamilyArg::Poisson, None) => Ok(Family::Poisson),
            (FamilyArg::Logistic, None) => Ok(Family::LogisticExperimental),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a grid and write it as long-format CSV plus a truth sidecar.
    Simulate {
        #[command(flatten)]
        family: FamilyOpts,
        #[arg(long)]
        m: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = -2.0, allow_hyphen_values = true)]
        beta0: f64,
        #[arg(long, default_value_t = -2.0, allow_hyphen_values = true)]
        beta1: f64,
        #[arg(long, default_value_t = 0.5)]
        sigma_u: f64,
        #[arg(long, default_value_t = 0.5)]
        sigma_v: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV path; the sidecar goes next to it as `<stem>.truth.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a long-format CSV and print the result as JSON.
    Fit {
        #[arg(long, value_enum)]
        method: MethodArg,
        #[command(flatten)]
        family: FamilyOpts,
        #[arg(long)]
        data: PathBuf,
        /// Divide responses and covariates by this before fitting.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        /// Exit with status 4 when the optimizer does not converge.
        #[arg(long)]
        strict: bool,
        /// Truth sidecar; defaults to `<stem>.truth.json` next to the data if present.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        max_iters: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeated simulate-and-fit runs on the reference design.
    Bench {
        #[command(flatten)]
        family: FamilyOpts,
        #[arg(long)]
        m: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "gva,gvacl")]
        methods: Vec<MethodArg>,
        /// Worker threads; defaults to the available parallelism.
        #[arg(long)]
        jobs: Option<usize>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    NotConverged,
}

impl Failure {
    fn usage(e: impl ToString) -> Self {
        Failure::Usage(e.to_string())
    }

    fn data(e: impl ToString) -> Self {
        Failure::Data(e.to_string())
    }

    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::NotConverged => 4,
        }
    }
}

impl From<gvacl::Error> for Failure {
    fn from(e: gvacl::Error) -> Self {
        use gvacl::Error as E;
        match e {
            E::UnsupportedFamily(_) | E::InvalidParameter(_) => Failure::usage(e),
            _ => Failure::data(e),
        }
    }
}

fn sidecar_path(csv: &Path) -> PathBuf {
    let stem = csv.file_stem().map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned());
    csv.with_file_name(format!("{stem}.truth.json"))
}

fn effect_summary(values: &[f64]) -> Value {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)
    } else {
        0.0
    };
    json!({"count": values.len(), "mean": mean, "variance": var})
}

fn write_json(value: &Value, out: Option<&Path>) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    match out {
        Some(path) => std::fs::write(path, text + "\n").map_err(Failure::data),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    family: Family,
    m: usize,
    n: usize,
    beta0: f64,
    beta1: f64,
    sigma_u: f64,
    sigma_v: f64,
    seed: u64,
    out: &Path,
) -> Result<(), Failure> {
    let spec = SimSpec {
        family,
        m,
        n,
        beta: vec![beta0, beta1],
        sigma_u,
        sigma_v,
        covariate_law: CovariateLaw::Normal { mean: 1.0, sd: 1.0 },
        seed,
    };
    let sim = simulate(&spec).map_err(Failure::usage)?;
    let file = File::create(out).map_err(|e| Failure::data(format!("{}: {e}", out.display())))?;
    let mut w = BufWriter::new(file);
    write_long(&sim.data, &mut w)?;
    w.flush().map_err(Failure::data)?;
    let truth = json!({
        "truth": {"beta0": beta0, "beta1": beta1, "sigma_u": sigma_u, "sigma_v": sigma_v},
        "spec": spec,
        "realized": {"u": effect_summary(&sim.u), "v": effect_summary(&sim.v)},
    });
    let sidecar = sidecar_path(out);
    write_json(&truth, Some(&sidecar))?;
    log::info!("wrote {} and {}", out.display(), sidecar.display());
    Ok(())
}

fn estimates_json(r: &FitResult) -> Map<String, Value> {
    let mut est = Map::new();
    for (k, b) in r.estimates.beta.iter().enumerate() {
        est.insert(format!("beta{k}"), json!(b));
    }
    est.insert("sigma_u".into(), json!(r.estimates.sigma2_u.sqrt()));
    est.insert("sigma_v".into(), json!(r.estimates.sigma2_v.sqrt()));
    est
}

fn fit_json(r: &FitResult, data: &gvacl::Dataset, scale: f64, truth: Option<&Value>) -> Value {
    let estimates = estimates_json(r);
    let se = match r.family {
        Family::LogisticExperimental => json!(null),
        family => {
            let mgf = (family == Family::Poisson && data.p() == 1)
                .then(|| MgfSpec::empirical(data).ok())
                .flatten();
            match standard_errors(&r.estimates, family, data.m(), data.n(), mgf.as_ref()) {
                Ok(s) => json!({
                    "beta0": s.se_beta0,
                    "beta1": s.se_beta1,
                    "sigma_u": s.se_sigma_u,
                    "sigma_v": s.se_sigma_v,
                    "basis": s.basis,
                }),
                Err(e) => json!({"error": e.to_string()}),
            }
        }
    };
    let trace = &r.elbo_trace;
    let mut out = json!({
        "method": r.method.label(),
        "family": r.family.name(),
        "estimates": estimates,
        "se": se,
        "diagnostics": {
            "iters": r.iters,
            "converged": r.converged,
            "elbo_final": r.elbo_final(),
            "wall_time_s": r.wall_time,
            "elbo_start": trace[0],
            "trace_length": trace.len(),
            "stop": r.stop,
            "scheme": r.scheme,
            "grad_max_norm": r.grad_max_norm,
            "boundary": r.boundary,
            "init_fallback": r.init_fallback,
        },
        "scale": scale,
        "alpha": r.family.shape(),
        "grid": {"m": data.m(), "n": data.n(), "p": data.p()},
    });
    let obj = out.as_object_mut().expect("object");
    if let Some(raw) = &r.raw_composite {
        obj.insert("raw_composite".into(), json!(raw));
    }
    if let Some(tag) = &r.experimental {
        obj.insert("experimental".into(), json!(tag));
    }
    if let Some(t) = truth.and_then(|t| t.get("truth")).and_then(Value::as_object) {
        let deltas: Map<String, Value> = estimates
            .iter()
            .filter_map(|(k, v)| {
                let truth = t.get(k)?.as_f64()?;
                Some((k.clone(), json!(v.as_f64()? - truth)))
            })
            .collect();
        obj.insert("truth".into(), Value::Object(t.clone()));
        obj.insert("deltas".into(), Value::Object(deltas));
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn cmd_fit(
    method: Method,
    family: Family,
    data_path: &Path,
    scale: f64,
    strict: bool,
    truth: Option<PathBuf>,
    max_iters: usize,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let file = File::open(data_path).map_err(|e| Failure::data(format!("{}: {e}", data_path.display())))?;
    let data = read_long(BufReader::new(file), family)
        .map_err(|e| Failure::data(format!("{}: {e}", data_path.display())))?;
    let data = data.rescaled(scale).map_err(Failure::usage)?;
    let config = FitConfig {
        max_iters,
        ..FitConfig::new(method)
    };
    let result = match (family, method) {
        (Family::LogisticExperimental, Method::Gvacl) => fit_logistic_experimental(&data, &config, DEFAULT_NODES)?,
        _ => fit(&data, &config)?,
    };
    let truth_path = truth.or_else(|| Some(sidecar_path(data_path)).filter(|p| p.exists()));
    let truth = match truth_path {
        Some(p) => {
            let text = std::fs::read_to_string(&p).map_err(|e| Failure::data(format!("{}: {e}", p.display())))?;
            Some(serde_json::from_str::<Value>(&text).map_err(|e| Failure::data(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    write_json(&fit_json(&result, &data, scale, truth.as_ref()), out)?;
    if strict && !result.converged {
        return Err(Failure::NotConverged);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    family: Family,
    m: usize,
    n: usize,
    reps: usize,
    seed: u64,
    methods: Vec<Method>,
    jobs: Option<usize>,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |k| k.get()));
    let config = BenchConfig {
        design: SimSpec::reference(family, m, n, 0),
        reps,
        seed,
        methods,
        jobs,
        fit: FitConfig::new(Method::Gvacl),
    };
    let report = run_bench(&config)?;
    eprint!("{}", render_table(&report));
    write_json(&serde_json::to_value(&report).expect("serializable"), out)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate {
            family,
            m,
            n,
            beta0,
            beta1,
            sigma_u,
            sigma_v,
            seed,
            out,
        } => cmd_simulate(family.resolve()?, m, n, beta0, beta1, sigma_u, sigma_v, seed, &out),
        Command::Fit {
            method,
            family,
            data,
            scale,
            strict,
            truth,
            max_iters,
            out,
        } => cmd_fit(method.into(), family.resolve()?, &data, scale, strict, truth, max_iters, out.as_deref()),
        Command::Bench {
            family,
            m,
            n,
            reps,
            seed,
            methods,
            jobs,
            out,
        } => {
            let family = family.resolve()?;
            if family == Family::LogisticExperimental {
                return Err(Failure::Usage("bench supports poisson and gamma".into()));
            }
            let mut methods: Vec<Method> = methods.into_iter().map(Method::from).collect();
            methods.dedup();
            cmd_bench(family, m, n, reps, seed, methods, jobs, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(msg) => eprintln!("error: {msg}"),
                Failure::Data(msg) => eprintln!("data error: {msg}"),
                Failure::NotConverged => eprintln!("error: fit did not converge"),
            }
            ExitCode::from(f.code())
        }
    }
}
