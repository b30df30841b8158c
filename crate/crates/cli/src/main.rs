//! `acgibbs` command-line front end.
//!
//! Exit codes: 0 success, 2 config or input error, 3 numerical or integrity failure,
//! 64 usage error.

use std::io::Write;
use std::path::{Path as FsPath, PathBuf};
use std::process::ExitCode;

use acgibbs::energy_min::{minimize_energy, verify_energy_lemma, Constraint, EnergyLemma, EnergyProblem, LemmaParams};
use acgibbs::experiments::{
    check_aggregate, load_result, run_experiment, save_result, write_tables, ExperimentConfig, ExperimentId,
};
use acgibbs::gibbs_sampler::{diagnostics, run_chains, SamplerConfig};
use acgibbs::path_domain::export_csv;
use acgibbs::persistence::save_ensemble;
use acgibbs::potential::{optimal_profile, well_constants};
use acgibbs::reflections::{invariance_test, ReflectionSpec, Statistic};
use acgibbs::transfer_oracle::{
    build_transfer, event_probability_exact, marginal, window_sites, AcceptAll, Confinement, EventAutomaton,
    LayerCounter, Orientation, StateGrid, Threshold, TransferOptions,
};
use acgibbs::{Error, Grid, Potential, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

const EXIT_USAGE: u8 = 64;
const THREADS_ENV: &str = "AC_GIBBS_THREADS";

#[derive(Parser, Debug)]
#[command(name = "acgibbs", version, about = "Sampler, transfer oracle and energy minimizer for the 1-D Allen-Cahn measure")]
struct Cli {
    /// JSON config; for `experiment` its fields are laid over the experiment's defaults,
    /// for `sample` it is a full sampler config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads; the AC_GIBBS_THREADS environment variable takes precedence.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Surface tension, half-excursion constant and decay rate, plus the optimal profile.
    Constants {
        /// `quartic` or a CSV table `u,V`.
        #[arg(long, default_value = "quartic")]
        potential: String,
        #[arg(long, default_value_t = 10.0)]
        half_width: f64,
        #[arg(long, default_value_t = 0.01)]
        dx: f64,
    },
    /// Run sampler chains and write the ensemble to the output directory.
    Sample(SampleArgs),
    /// Exact event probability or marginal from the transfer oracle.
    Oracle(OracleArgs),
    /// Statistical invariance test of a reflection on a sampled ensemble.
    ReflectTest(ReflectArgs),
    /// Constrained energy minimization or an energy-inequality sweep.
    Minimize(MinimizeArgs),
    /// Run one of the experiments and write its JSON record.
    Experiment {
        /// layer_scaling, uniformity, onepoint_tail, ld_check or bulk_and_hitting.
        id: String,
    },
    /// Aggregate experiment records into CSV tables and .dat plot files.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct Domain {
    #[arg(long, default_value_t = 0.1, allow_hyphen_values = true)]
    eps: f64,
    /// Domain half-length.
    #[arg(long = "L", alias = "l", default_value_t = 5.0, allow_hyphen_values = true)]
    l: f64,
    #[arg(long, default_value_t = 0.05, allow_hyphen_values = true)]
    dx: f64,
    #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
    u_minus: f64,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    u_plus: f64,
}

impl Domain {
    fn grid(&self) -> Result<Grid> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::config("eps", "must be positive and finite"));
        }
        if !(self.l > 0.0) {
            return Err(Error::config("L", "must be positive"));
        }
        Grid::symmetric(self.l, self.dx)
    }
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[command(flatten)]
    domain: Domain,
    #[arg(long, default_value_t = 20_000)]
    sweeps: usize,
    #[arg(long, default_value_t = 1_000)]
    burn_in: usize,
    #[arg(long, default_value_t = 10)]
    thin: usize,
    #[arg(long, default_value_t = 1)]
    chains: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EventKind {
    ThreeDeltaLayers,
    Threshold,
    Band,
    Whole,
    Marginal,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[arg(long, value_enum)]
    event: EventKind,
    #[command(flatten)]
    domain: Domain,
    #[arg(long, default_value_t = 0.2)]
    delta: f64,
    /// Point of a threshold event or marginal.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    x: f64,
    #[arg(long, default_value_t = 0.5, allow_hyphen_values = true)]
    level: f64,
    /// Threshold `u ≤ level` instead of `u ≥ level`.
    #[arg(long)]
    below: bool,
    #[arg(long, num_args = 2, value_names = ["A", "B"], allow_hyphen_values = true)]
    window: Option<Vec<f64>>,
    #[arg(long, allow_hyphen_values = true)]
    lo: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    hi: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Transform {
    BetweenZeros,
    BetweenHits,
    FixedWindow,
}

#[derive(Args, Debug)]
struct ReflectArgs {
    #[arg(long, value_enum)]
    transform: Transform,
    #[command(flatten)]
    domain: Domain,
    /// Stored paths per chain.
    #[arg(long, default_value_t = 2_500)]
    paths: usize,
    #[arg(long, default_value_t = 300)]
    thin: usize,
    #[arg(long, default_value_t = 4)]
    chains: usize,
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    #[arg(long, default_value_t = 0.2)]
    delta: f64,
}

#[derive(Args, Debug)]
struct MinimizeArgs {
    /// Sweep one inequality (e.g. `wasted-excursion`) instead of a single problem.
    #[arg(long, conflicts_with = "constraint")]
    lemma: Option<String>,
    /// Constraint as JSON, e.g. `{"type":"threshold","x":0,"level":0.5,"above":true}`.
    #[arg(long)]
    constraint: Option<String>,
    #[command(flatten)]
    domain: Domain,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn configure_threads(flag: Option<usize>) -> Result<()> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::config(THREADS_ENV, "must be a positive integer"))?,
        ),
        Err(_) => flag,
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::config("threads", "must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config("threads", e.to_string()))?;
    }
    Ok(())
}

fn print(v: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(v)?) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn load_potential(spec: &str) -> Result<Potential> {
    if spec == "quartic" {
        Ok(Potential::quartic())
    } else {
        Potential::from_csv(FsPath::new(spec), false)
    }
}

fn run(cli: Cli) -> Result<()> {
    configure_threads(cli.threads)?;
    let seed = cli.seed.unwrap_or(1);
    let out = cli.out_dir.as_path();
    match cli.command {
        Command::Constants {
            potential,
            half_width,
            dx,
        } => {
            let pot = load_potential(&potential)?;
            let wc = well_constants(&pot, 64)?;
            let profile = optimal_profile(&pot, half_width, dx)?;
            let mut v = json!({
                "c0": wc.c0,
                "c1": wc.c1,
                "decay_rate": wc.decay_rate,
                "profile": {"half_width": half_width, "dx": dx, "u_at_1": profile.value_at(1.0)},
            });
            if pot.is_quartic() {
                let n = (2.0 * half_width / dx).round() as usize;
                let sup = (0..=n)
                    .map(|i| -half_width + i as f64 * dx)
                    .map(|x| (profile.value_at(x) - (x / 2f64.sqrt()).tanh()).abs())
                    .fold(0.0, f64::max);
                v["profile"]["sup_distance_to_tanh"] = json!(sup);
            }
            print(&v)
        }
        Command::Sample(a) => {
            let cfg = match &cli.config {
                Some(f) => {
                    let cfg: SamplerConfig = serde_json::from_str(&std::fs::read_to_string(f)?)
                        .map_err(|e| Error::config("config", e.to_string()))?;
                    cfg
                }
                None => {
                    let d = &a.domain;
                    let mut c = SamplerConfig::new(d.grid()?, d.u_minus, d.u_plus, d.eps, a.sweeps, seed);
                    c.burn_in = a.burn_in;
                    c.thin = a.thin;
                    c
                }
            };
            cfg.validate()?;
            let pot = Potential::quartic();
            let ens = run_chains(&cfg, &pot, a.chains)?;
            std::fs::create_dir_all(out)?;
            let stem = out.join("ensemble");
            save_ensemble(&stem, &ens)?;
            let diag = diagnostics(&ens, 0.0)?;
            print(&json!({
                "paths": ens.len(),
                "chains": a.chains,
                "config_hash": ens.meta.config_hash,
                "oracle_only": ens.meta.oracle_only,
                "diagnostics": diag,
                "archive": stem.with_extension("bin"),
            }))
        }
        Command::Oracle(a) => oracle(&a),
        Command::ReflectTest(a) => reflect_test(&a, seed),
        Command::Minimize(a) => minimize(&a, out),
        Command::Experiment { id } => {
            let id = ExperimentId::parse(&id)
                .ok_or_else(|| Error::config("experiment", format!("unknown experiment `{id}`")))?;
            let mut overrides = match &cli.config {
                Some(f) => serde_json::from_str(&std::fs::read_to_string(f)?)
                    .map_err(|e| Error::config("config", e.to_string()))?,
                None => json!({}),
            };
            if let Some(obj) = overrides.as_object_mut() {
                if let Some(s) = cli.seed {
                    obj.insert("seed".into(), json!(s));
                }
                obj.insert("out_dir".into(), json!(out));
            }
            let cfg = ExperimentConfig::with_overrides(id, &overrides)?;
            let result = run_experiment(&cfg, &Potential::quartic())?;
            let file = save_result(out, &result)?;
            print(&json!({
                "experiment": id.name(),
                "pass": result.pass,
                "config_hash": result.config_hash,
                "record": file,
                "checks": result.checks,
                "fits": result.fits,
            }))
        }
        Command::Report { inputs } => {
            let results = inputs.iter().map(|f| load_result(f)).collect::<Result<Vec<_>>>()?;
            check_aggregate(&results)?;
            let files = write_tables(&results, out)?;
            print(&json!({ "written": files }))
        }
    }
}

fn oracle(a: &OracleArgs) -> Result<()> {
    let d = &a.domain;
    let grid = d.grid()?;
    let pot = Potential::quartic();
    let model = build_transfer(d.eps, grid, &pot, StateGrid::for_noise(d.eps, d.dx, None, 1.0)?)?;
    let bc = (d.u_minus, d.u_plus);
    let site = || {
        grid.index_of(a.x)
            .ok_or_else(|| Error::config("x", "must be a grid node inside the domain"))
    };
    let automaton: Box<dyn EventAutomaton> = match a.event {
        EventKind::Marginal => {
            let t = marginal(&model, bc, &[site()?])?;
            return print(&json!({
                "event": "marginal",
                "x": a.x,
                "mean": t.mean(0),
                "variance": t.variance(0),
                "log_z": t.log_z,
            }));
        }
        EventKind::ThreeDeltaLayers => {
            if !(a.delta > 0.0 && a.delta < 0.5) {
                return Err(Error::config("delta", "must lie in (0, 1/2)"));
            }
            Box::new(LayerCounter {
                level: 1.0 - a.delta,
                at_least: 3,
                orientation: Orientation::Both,
            })
        }
        EventKind::Threshold => {
            let s = site()?;
            Box::new(Threshold {
                sites: (s, s),
                level: a.level,
                above: !a.below,
            })
        }
        EventKind::Band => {
            let w = a
                .window
                .as_ref()
                .ok_or_else(|| Error::config("window", "band events need --window A B"))?;
            Box::new(Confinement {
                sites: window_sites(&grid, w[0], w[1])?,
                lo: a.lo.unwrap_or(f64::NEG_INFINITY),
                hi: a.hi.unwrap_or(f64::INFINITY),
            })
        }
        EventKind::Whole => Box::new(AcceptAll),
    };
    let p = event_probability_exact(&model, bc, automaton.as_ref(), TransferOptions::default())?;
    print(&serde_json::to_value(&p)?)
}

fn reflect_test(a: &ReflectArgs, seed: u64) -> Result<()> {
    let d = &a.domain;
    let l = d.l;
    let spec = match a.transform {
        Transform::BetweenZeros => ReflectionSpec::between_zeros((-l, l), a.delta),
        Transform::BetweenHits => ReflectionSpec::between_hits((-0.9 * l, -0.5 * l), (0.5 * l, 0.9 * l)),
        Transform::FixedWindow => ReflectionSpec::FixedWindow {
            a: -0.7 * l,
            b: -0.3 * l,
        },
    };
    let burn = 2_000;
    let mut cfg = SamplerConfig::new(d.grid()?, d.u_minus, d.u_plus, d.eps, burn + a.thin * a.paths, seed);
    cfg.burn_in = burn;
    cfg.thin = a.thin;
    let pot = Potential::quartic();
    let ens = run_chains(&cfg, &pot, a.chains)?;
    let stats = Statistic::battery(a.delta, -0.5 * l);
    let noise = matches!(a.transform, Transform::BetweenHits).then_some((d.eps, seed));
    let report = invariance_test(&spec, &ens.paths, &stats, a.alpha, noise)?;
    print(&serde_json::to_value(&report)?)
}

fn minimize(a: &MinimizeArgs, out: &FsPath) -> Result<()> {
    let pot = Potential::quartic();
    if let Some(name) = &a.lemma {
        let lemma = EnergyLemma::parse(name).ok_or_else(|| {
            let known: Vec<&str> = EnergyLemma::ALL.iter().map(|l| l.name()).collect();
            Error::config("lemma", format!("unknown inequality `{name}`; known: {}", known.join(", ")))
        })?;
        let report = verify_energy_lemma(lemma, &LemmaParams::default(), &pot)?;
        return print(&serde_json::to_value(&report)?);
    }
    let constraint: Constraint = match &a.constraint {
        Some(s) => serde_json::from_str(s).map_err(|e| Error::config("constraint", e.to_string()))?,
        None => Constraint::None,
    };
    let d = &a.domain;
    let problem = EnergyProblem::new(d.grid()?, d.u_minus, d.u_plus, constraint);
    let r = minimize_energy(&problem, &pot)?;
    std::fs::create_dir_all(out)?;
    let file = out.join("argmin.csv");
    export_csv(&r.argmin, &file)?;
    print(&json!({
        "energy": r.energy,
        "gap": r.gap,
        "reference_energy": r.reference_energy,
        "iterations": r.iterations,
        "residual": r.residual,
        "converged": r.converged,
        "witnesses": r.witnesses,
        "argmin": file,
    }))
}
