//! Repeated simulate-and-fit runs with Monte Carlo summaries.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::Family;
use crate::fit::{fit, FitConfig, Method};
use crate::inference::{standard_errors, MgfSpec};
use crate::simulate::{replicate_seed, simulate, CovariateLaw, SimSpec};

/// Parameters summarized in a report, in table order.
pub const PARAMETERS: [&str; 4] = ["beta0", "beta1", "sigma_u", "sigma_v"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Design shared by every replicate; its seed is replaced per replicate.
    pub design: SimSpec,
    pub reps: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub jobs: usize,
    pub fit: FitConfig,
}

/// One fitted replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub index: usize,
    pub seed: u64,
    pub converged: bool,
    /// `beta0, beta1, sigma_u, sigma_v` (NaN when a slope is absent).
    pub estimates: [f64; 4],
    /// Plug-in SEs in the same order; NaN when unavailable.
    pub se: [f64; 4],
    pub wall_time: f64,
    pub iters: usize,
    pub error: Option<String>,
}

/// Running mean and variance (Welford).
#[derive(Debug, Clone, Copy, Default)]
pub struct Welford {
    count: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then_some(self.mean)
    }

    /// Sample standard deviation; undefined below two values.
    pub fn sd(&self) -> Option<f64> {
        (self.count > 1).then(|| (self.m2 / (self.count - 1) as f64).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub truth: Option<f64>,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    /// Mean of the plug-in standard errors.
    pub mese: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub replicates: usize,
    pub converged: usize,
    pub failures: usize,
    pub errors: usize,
    pub params: Vec<ParamSummary>,
    pub mean_time_s: Option<f64>,
    pub outcomes: Vec<ReplicateOutcome>,
}

impl MethodSummary {
    pub fn param(&self, name: &str) -> Option<&ParamSummary> {
        self.params.iter().find(|p| p.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub family: Family,
    pub m: usize,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub methods: Vec<MethodSummary>,
}

impl BenchReport {
    pub fn method(&self, method: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == method)
    }
}

fn covariate_mgf(design: &SimSpec) -> Option<MgfSpec> {
    match &design.covariate_law {
        CovariateLaw::Normal { mean, sd } if design.beta.len() == 2 => Some(MgfSpec::Normal { mean: *mean, sd: *sd }),
        _ => None,
    }
}

fn run_replicate(config: &BenchConfig, index: usize) -> Vec<ReplicateOutcome> {
    let seed = replicate_seed(config.seed, index as u64);
    let spec = SimSpec {
        seed,
        ..config.design.clone()
    };
    let mgf = covariate_mgf(&spec);
    let failed = |error: String| ReplicateOutcome {
        index,
        seed,
        converged: false,
        estimates: [f64::NAN; 4],
        se: [f64::NAN; 4],
        wall_time: 0.0,
        iters: 0,
        error: Some(error),
    };
    let data = match simulate(&spec) {
        Ok(s) => s.data,
        Err(e) => return config.methods.iter().map(|_| failed(e.to_string())).collect(),
    };
    config
        .methods
        .iter()
        .map(|&method| {
            let cfg = FitConfig {
                method,
                ..config.fit.clone()
            };
            match fit(&data, &cfg) {
                Ok(r) => {
                    let est = &r.estimates;
                    let slope = est.slopes().first().copied().unwrap_or(f64::NAN);
                    let se = standard_errors(est, data.family(), data.m(), data.n(), mgf.as_ref()).ok();
                    ReplicateOutcome {
                        index,
                        seed,
                        converged: r.converged,
                        estimates: [est.intercept(), slope, est.sigma2_u.sqrt(), est.sigma2_v.sqrt()],
                        se: se.map_or([f64::NAN; 4], |s| {
                            [s.se_beta0, s.se_beta1.unwrap_or(f64::NAN), s.se_sigma_u, s.se_sigma_v]
                        }),
                        wall_time: r.wall_time,
                        iters: r.iters,
                        error: None,
                    }
                }
                Err(e) => failed(e.to_string()),
            }
        })
        .collect()
}

/// Summaries over converged replicates only, in replicate order.
pub fn summarize(method: Method, truth: [Option<f64>; 4], outcomes: Vec<ReplicateOutcome>) -> MethodSummary {
    let ok: Vec<&ReplicateOutcome> = outcomes.iter().filter(|o| o.converged).collect();
    let params = PARAMETERS
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let mut est = Welford::default();
            let mut se = Welford::default();
            for o in &ok {
                if o.estimates[k].is_finite() {
                    est.push(o.estimates[k]);
                }
                if o.se[k].is_finite() {
                    se.push(o.se[k]);
                }
            }
            ParamSummary {
                name: name.to_string(),
                truth: truth[k],
                mean: est.mean(),
                sd: est.sd(),
                mese: se.mean(),
            }
        })
        .collect();
    let mut time = Welford::default();
    ok.iter().for_each(|o| time.push(o.wall_time));
    MethodSummary {
        method,
        replicates: outcomes.len(),
        converged: ok.len(),
        failures: outcomes.len() - ok.len(),
        errors: outcomes.iter().filter(|o| o.error.is_some()).count(),
        params,
        mean_time_s: time.mean(),
        outcomes,
    }
}

pub fn run_bench(config: &BenchConfig) -> Result<BenchReport> {
    config.design.validate()?;
    if config.reps == 0 || config.methods.is_empty() {
        return Err(Error::InvalidParameter("bench needs reps >= 1 and at least one method".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    let per_rep: Vec<Vec<ReplicateOutcome>> =
        pool.install(|| (0..config.reps).into_par_iter().map(|r| run_replicate(config, r)).collect());
    let d = &config.design;
    let truth = [
        Some(d.beta[0]),
        d.beta.get(1).copied(),
        Some(d.sigma_u),
        Some(d.sigma_v),
    ];
    let methods = config
        .methods
        .iter()
        .enumerate()
        .map(|(k, &method)| summarize(method, truth, per_rep.iter().map(|rep| rep[k].clone()).collect()))
        .collect();
    Ok(BenchReport {
        family: d.family,
        m: d.m,
        n: d.n,
        reps: config.reps,
        seed: config.seed,
        methods,
    })
}

fn cell(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

/// Text table laid out as Mean(SD) and MESE per parameter, one block per
/// method, plus mean fit time.
pub fn render_table(report: &BenchReport) -> String {
    let mut out = format!(
        "{} (m, n) = ({}, {}), {} replicates\n",
        report.family.name(),
        report.m,
        report.n,
        report.reps
    );
    out.push_str(&format!("{:<8}{:<10}{:>16}{:>8}\n", "method", "param", "Mean(SD)", "MESE"));
    for s in &report.methods {
        for p in &s.params {
            if p.mean.is_none() && p.name == "beta1" {
                continue;
            }
            let ms = format!("{}({})", cell(p.mean), cell(p.sd));
            out.push_str(&format!("{:<8}{:<10}{:>16}{:>8}\n", s.method.label(), p.name, ms, cell(p.mese)));
        }
        out.push_str(&format!(
            "{:<8}{:<10}{:>16}\n",
            s.method.label(),
            "time(s)",
            s.mean_time_s.map_or_else(|| "-".into(), |t| format!("{t:.3}"))
        ));
        if s.failures > 0 {
            out.push_str(&format!("{:<8}failures: {} of {}\n", s.method.label(), s.failures, s.replicates));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welford_matches_two_pass() {
        let v: Vec<f64> = (0..1000).map(|k| ((k * 7919) % 1013) as f64 * 1e-3 + 1e6).collect();
        let mut w = Welford::default();
        v.iter().for_each(|&x| w.push(x));
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        assert!((w.mean().unwrap() - mean).abs() < 1e-12 * mean.abs());
        assert!((w.sd().unwrap() - var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn single_value_has_no_sd() {
        let mut w = Welford::default();
        w.push(2.0);
        assert_eq!(w.mean(), Some(2.0));
        assert_eq!(w.sd(), None);
    }

    fn small_config(reps: usize, jobs: usize) -> BenchConfig {
        BenchConfig {
            design: SimSpec::reference(Family::Poisson, 12, 10, 0),
            reps,
            seed: 99,
            methods: vec![Method::Gvacl, Method::FullGva],
            jobs,
            fit: FitConfig::new(Method::Gvacl),
        }
    }

    #[test]
    fn one_replicate_reports_null_sd() {
        let r = run_bench(&small_config(1, 1)).unwrap();
        let g = r.method(Method::Gvacl).unwrap();
        assert!(g.params.iter().all(|p| p.sd.is_none()));
        assert!(g.param("beta1").unwrap().mean.is_some());
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["methods"][0]["params"][0]["sd"].is_null());
    }

    #[test]
    fn statistics_do_not_depend_on_job_count() {
        let mut a = run_bench(&small_config(6, 1)).unwrap();
        let mut b = run_bench(&small_config(6, 3)).unwrap();
        for r in [&mut a, &mut b] {
            for s in r.methods.iter_mut() {
                s.mean_time_s = None;
                s.outcomes.iter_mut().for_each(|o| o.wall_time = 0.0);
            }
        }
        assert_eq!(a, b);
        let table = render_table(&a);
        assert!(table.contains("gvacl") && table.contains("Mean(SD)"));
    }
}
