//! Command-line front end: argument parsing, orchestration and report
//! serialisation.
//!
//! Exit codes: 0 on success, 1 for bad input or configuration, 2 for I/O
//! and internal failures.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize, Serializer};
use serde_json::{json, Value};

use crate::centrality::{rank_all_with, AgentScore, CentralityKind};
use crate::dynamics::{
    consensus_run, property_suite, run, InitialOpinions, Sampling, SimulationConfig, StubbornnessSchedule,
    SuiteConfig, VerbalizationModel,
};
use crate::error::{Error, Result};
use crate::graph::{
    classify_stubborn, load_network, load_network_files, validate, AgentId, Interval, Network, ProbabilitySource,
};
use crate::linsys::{assemble, Block, Solver, SolverConfig, SystemMatrices};
use crate::placement::{
    baseline_place_with, brute_force_place, greedy_place_with, CandidatePool, Objective, Ordering, PlacementProblem,
};
use crate::synth::{power_law_network, random_network, symmetric_network, PowerLawSpec};

/// Environment variable holding the default worker count.
pub const THREADS_ENV: &str = "STUBBORN_THREADS";

pub const TOOL: &str = "stubborn";

#[derive(Parser, Debug)]
#[command(name = "stubborn", version, about = "Opinion equilibria, influence centrality and agent placement")]
pub struct Cli {
    /// Worker threads; 0 uses one per core. Does not affect results.
    #[arg(long, global = true, env = THREADS_ENV, default_value_t = 0)]
    pub threads: usize,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Write the report to this file instead of standard output.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Include wall-clock time in the report.
    #[arg(long, global = true)]
    pub timings: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

fn value_name<T: ValueEnum, S: Serializer>(v: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(v.to_possible_value().expect("no skipped variants").get_name())
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Equilibrium opinions of the non-stubborn agents.
    Solve(SolveArgs),
    /// Influence centrality of every agent.
    Centrality(CentralityArgs),
    /// Choose agents for a new stubborn agent to reach.
    Optimize(OptimizeArgs),
    /// Monte Carlo simulation of the opinion process.
    Simulate(SimulateArgs),
    /// Structural checks plus simulated convergence properties.
    Validate(ValidateArgs),
    /// Mark agents stubborn by opinion interval and write the agent table.
    ClassifyStubborn(ClassifyArgs),
    /// Write a synthetic network.
    Generate(GenerateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProbArg {
    /// Use the prob column.
    Given,
    /// Derive probabilities from posting rates.
    Rates,
}

#[derive(Args, Debug, Serialize)]
pub struct NetworkArgs {
    #[arg(long)]
    pub edges: PathBuf,
    #[arg(long)]
    pub agents: PathBuf,
    #[arg(long, value_enum, default_value_t = ProbArg::Given)]
    #[serde(serialize_with = "value_name")]
    pub probabilities: ProbArg,
}

#[derive(Args, Debug, Serialize)]
pub struct SolverArgs {
    /// Systems with at least this many rows use the iterative solver.
    #[arg(long, default_value_t = 50_000)]
    pub direct_threshold: usize,
    #[arg(long, default_value_t = 1e-10)]
    pub tolerance: f64,
}

impl SolverArgs {
    fn config(&self) -> SolverConfig {
        SolverConfig { direct_threshold: self.direct_threshold, tolerance: self.tolerance, ..SolverConfig::default() }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct SolveArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub network: NetworkArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub solver: SolverArgs,
    /// Also write G and F in MatrixMarket format into this directory.
    #[arg(long)]
    pub dump_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct CentralityArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub network: NetworkArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub solver: SolverArgs,
    /// Rank stubborn and non-stubborn agents together.
    #[arg(long)]
    pub mix: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RateArg {
    /// Mean posting rate of the non-stubborn agents.
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    Mean,
    Threshold,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Greedy,
    Outdeg,
    Rate,
    Hic,
    Brute,
}

#[derive(Args, Debug, Serialize)]
pub struct OptimizeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub network: NetworkArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub solver: SolverArgs,
    /// Number of targets.
    #[arg(long)]
    pub k: usize,
    /// Probability with which each target hears the placed agent.
    #[arg(long, required_unless_present = "rate", conflicts_with = "rate")]
    pub p: Option<f64>,
    /// Derive the probability from posting rates instead of --p.
    #[arg(long, value_enum)]
    #[serde(serialize_with = "opt_value_name")]
    pub rate: Option<RateArg>,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Mean)]
    #[serde(serialize_with = "value_name")]
    pub objective: ObjectiveArg,
    /// Threshold of the threshold objective.
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    /// Candidate pool: `all` or the number of most central agents.
    #[arg(long, default_value = "1000")]
    pub pool: String,
    #[arg(long, value_enum, default_value_t = MethodArg::Greedy)]
    #[serde(serialize_with = "value_name")]
    pub method: MethodArg,
    /// Opinion of the placed agent.
    #[arg(long, default_value_t = 1.0)]
    pub theta_agent: f64,
    /// Recorded in the report; the optimisation itself is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn opt_value_name<T: ValueEnum, S: Serializer>(v: &Option<T>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(v) => value_name(v, s),
        None => s.serialize_none(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScheduleArg {
    /// ω(t) = c / (t + offset + 1)^delta
    PowerLaw,
    /// ω(t) = w
    Constant,
}

#[derive(Args, Debug, Serialize)]
pub struct ScheduleArgs {
    #[arg(long, value_enum, default_value_t = ScheduleArg::PowerLaw)]
    #[serde(serialize_with = "value_name")]
    pub schedule: ScheduleArg,
    #[arg(long, default_value_t = 1.0)]
    pub c: f64,
    #[arg(long, default_value_t = 1.0)]
    pub offset: f64,
    #[arg(long, default_value_t = 1.0)]
    pub delta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub w: f64,
}

impl ScheduleArgs {
    fn schedule(&self) -> StubbornnessSchedule {
        match self.schedule {
            ScheduleArg::PowerLaw => StubbornnessSchedule::power_law(self.c, self.offset, self.delta),
            ScheduleArg::Constant => StubbornnessSchedule::constant(self.w),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VerbalizationArg {
    Exact,
    Bernoulli,
}

impl From<VerbalizationArg> for VerbalizationModel {
    fn from(v: VerbalizationArg) -> Self {
        match v {
            VerbalizationArg::Exact => VerbalizationModel::Exact,
            VerbalizationArg::Bernoulli => VerbalizationModel::Bernoulli,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub network: NetworkArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long, default_value_t = 100_000)]
    pub steps: u64,
    #[arg(long, default_value_t = 100)]
    pub replicas: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = VerbalizationArg::Bernoulli)]
    #[serde(serialize_with = "value_name")]
    pub verbalization: VerbalizationArg,
    /// Sample every this many steps instead of logarithmically.
    #[arg(long)]
    pub sample_every: Option<u64>,
    /// Logarithmic samples per decade.
    #[arg(long, default_value_t = 10)]
    pub per_decade: u32,
    /// Start every non-stubborn agent here instead of at its listed opinion.
    #[arg(long)]
    pub initial: Option<f64>,
    /// Check the consensus hypotheses first (network without stubborn agents).
    #[arg(long)]
    pub consensus: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct ValidateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub network: NetworkArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long, default_value_t = 100_000)]
    pub steps: u64,
    #[arg(long, default_value_t = 200)]
    pub replicas: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = VerbalizationArg::Bernoulli)]
    #[serde(serialize_with = "value_name")]
    pub verbalization: VerbalizationArg,
    /// Absolute tolerance on replica means.
    #[arg(long, default_value_t = 0.02)]
    pub band: f64,
}

fn parse_interval(s: &str) -> std::result::Result<Interval, String> {
    let (lo, hi) = s.split_once(',').ok_or_else(|| format!("expected LO,HI, got '{s}'"))?;
    let num = |x: &str| x.trim().parse::<f64>().map_err(|_| format!("'{x}' is not a number"));
    Ok(Interval::new(num(lo)?, num(hi)?))
}

#[derive(Args, Debug, Serialize)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub agents: PathBuf,
    /// Optional edge table, checked for consistency with the agents.
    #[arg(long)]
    pub edges: Option<PathBuf>,
    /// Opinions in this closed interval become stubborn (LO,HI).
    #[arg(long, value_parser = parse_interval)]
    pub low: Interval,
    #[arg(long, value_parser = parse_interval)]
    pub high: Interval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GenerateKind {
    /// Shuffled random graph with chosen stubborn count.
    Random,
    /// Preferential-attachment follower graph with rate-derived probabilities.
    PowerLaw,
    /// Graph whose non-stubborn block is symmetric.
    Symmetric,
}

#[derive(Args, Debug, Serialize)]
pub struct GenerateArgs {
    #[arg(long, value_enum)]
    #[serde(serialize_with = "value_name")]
    pub kind: GenerateKind,
    /// Number of agents (non-stubborn agents for `symmetric`).
    #[arg(long)]
    pub n: usize,
    /// Stubborn agents (`random`, `symmetric`).
    #[arg(long, default_value_t = 2)]
    pub stubborn: usize,
    /// Mean extra in-edges per agent (`random`).
    #[arg(long, default_value_t = 2.0)]
    pub extra_edges: f64,
    /// Accounts each newcomer follows (`power-law`).
    #[arg(long, default_value_t = 3)]
    pub follows: usize,
    #[arg(long, default_value_t = 0.2)]
    pub follow_back: f64,
    #[arg(long, default_value_t = 0.05)]
    pub stubborn_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory receiving edges.csv and agents.csv.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub elapsed_ms: f64,
}

/// Serialised output of every subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Every option that affects the result; enough to re-run.
    pub config: Value,
    pub result: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

/// Rounds to 12 significant digits.
pub fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.11e}").parse().expect("formatted float parses")
}

fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else {
        round_sig(x).to_string()
    }
}

fn round_value(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(x) = n.as_f64() {
                *v = json!(round_sig(x));
            }
        }
        Value::Array(a) => a.iter_mut().for_each(round_value),
        Value::Object(m) => m.values_mut().for_each(round_value),
        _ => {}
    }
}

enum CsvBody {
    Table { header: Vec<&'static str>, rows: Vec<Vec<String>> },
    Raw(Vec<u8>),
}

struct Output {
    result: Value,
    csv: CsvBody,
}

fn table(header: Vec<&'static str>, rows: Vec<Vec<String>>) -> CsvBody {
    CsvBody::Table { header, rows }
}

fn check_input(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Config(format!("input file {} does not exist", path.display())));
    }
    Ok(())
}

fn load(args: &NetworkArgs) -> Result<Network> {
    check_input(&args.edges)?;
    check_input(&args.agents)?;
    let source = match args.probabilities {
        ProbArg::Given => ProbabilitySource::Given,
        ProbArg::Rates => ProbabilitySource::FromRates,
    };
    load_network_files(&args.edges, &args.agents, source)
}

fn labels(net: &Network, ids: &[AgentId]) -> Vec<String> {
    ids.iter().map(|&a| net.label(a).to_owned()).collect()
}

fn cmd_solve(args: &SolveArgs) -> Result<Output> {
    let net = load(&args.network)?;
    let sys = assemble(&net)?;
    let sol = Solver::new(&sys, None, args.solver.config())?.equilibrium(sys.stubborn_opinions())?;
    let theta = sol.clamped();
    if let Some(dir) = &args.dump_dir {
        dump_matrices(&net, &sys, dir)?;
    }
    let value_of = |a: AgentId| match sys.row_of(a) {
        Some(r) => theta[r],
        None => net.stubborn_opinion(a).unwrap_or(0.0),
    };
    let agents: Vec<Value> = net
        .agents()
        .map(|a| json!({ "id": net.label(a), "stubborn": net.is_stubborn(a), "theta": value_of(a) }))
        .collect();
    let mean = if theta.is_empty() { Value::Null } else { json!(theta.iter().sum::<f64>() / theta.len() as f64) };
    let rows = net
        .agents()
        .map(|a| vec![net.label(a).to_owned(), u8::from(net.is_stubborn(a)).to_string(), fmt_num(value_of(a))])
        .collect();
    Ok(Output {
        result: json!({
            "agents": agents,
            "mean_nonstubborn": mean,
            "residual_norm": sol.residual_norm,
            "solver": sol.stats,
        }),
        csv: table(vec!["id", "stubborn", "theta"], rows),
    })
}

fn dump_matrices(net: &Network, sys: &SystemMatrices, dir: &Path) -> Result<()> {
    let io_err = |path: PathBuf| move |source| Error::Io { path: path.clone(), source };
    fs::create_dir_all(dir).map_err(io_err(dir.to_path_buf()))?;
    for (name, block) in [("G.mtx", Block::G), ("F.mtx", Block::F)] {
        let path = dir.join(name);
        let f = File::create(&path).map_err(io_err(path.clone()))?;
        sys.write_matrix_market(block, io::BufWriter::new(f)).map_err(io_err(path))?;
    }
    let path = dir.join("index.csv");
    let mut s = String::from("block,index,id\n");
    for (i, &a) in sys.v1().iter().enumerate() {
        s += &format!("row,{},{}\n", i + 1, net.label(a));
    }
    for (i, &a) in sys.v0().iter().enumerate() {
        s += &format!("column,{},{}\n", i + 1, net.label(a));
    }
    fs::write(&path, s).map_err(io_err(path))
}

fn kind_name(k: CentralityKind) -> &'static str {
    match k {
        CentralityKind::Stubborn => "stubborn",
        CentralityKind::Nonstubborn => "nonstubborn",
    }
}

fn cmd_centrality(args: &CentralityArgs) -> Result<Output> {
    let net = load(&args.network)?;
    let sys = assemble(&net)?;
    let report = rank_all_with(&sys, args.solver.config())?;
    let entry = |s: &AgentScore| json!({ "id": net.label(s.agent), "kind": kind_name(s.kind), "score": s.score });
    let ranked = report.ranked(args.mix);
    let rows = ranked
        .iter()
        .map(|s| vec![net.label(s.agent).to_owned(), kind_name(s.kind).to_owned(), fmt_num(s.score)])
        .collect();
    let result = if args.mix {
        json!({ "ranking": ranked.iter().map(entry).collect::<Vec<_>>(), "nonstubborn_omitted": report.nonstubborn_omitted })
    } else {
        json!({
            "stubborn": report.stubborn.iter().map(entry).collect::<Vec<_>>(),
            "nonstubborn": report.nonstubborn.iter().map(entry).collect::<Vec<_>>(),
            "nonstubborn_omitted": report.nonstubborn_omitted,
        })
    };
    Ok(Output { result, csv: table(vec!["id", "kind", "score"], rows) })
}

fn parse_pool(s: &str) -> Result<CandidatePool> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(CandidatePool::All);
    }
    s.parse::<usize>()
        .map(CandidatePool::TopHic)
        .map_err(|_| Error::Config(format!("--pool must be 'all' or a positive integer, got '{s}'")))
}

fn cmd_optimize(args: &OptimizeArgs) -> Result<Output> {
    let net = load(&args.network)?;
    let sys = assemble(&net)?;
    let p = match (args.p, args.rate) {
        (Some(p), _) => p,
        (None, Some(RateArg::Mean)) => {
            let z = net.rate_scale().ok_or_else(|| {
                Error::config("--rate mean needs rate-derived probabilities (--probabilities rates)")
            })?;
            let mean = net
                .mean_nonstubborn_rate()
                .ok_or_else(|| Error::config("no non-stubborn agent has a posting rate"))?;
            mean / z
        }
        (None, None) => return Err(Error::config("one of --p or --rate is required")),
    };
    let objective = match args.objective {
        ObjectiveArg::Mean => Objective::MeanShift,
        ObjectiveArg::Threshold => Objective::ThresholdCount { tau: args.tau },
    };
    let problem = PlacementProblem::new(args.k, p)
        .with_objective(objective)
        .with_pool(parse_pool(&args.pool)?)
        .with_theta_agent(args.theta_agent);
    let cfg = args.solver.config();
    let res = match args.method {
        MethodArg::Greedy => greedy_place_with(&net, &sys, &problem, cfg)?,
        MethodArg::Outdeg => baseline_place_with(&net, &sys, &problem, Ordering::OutDegree, cfg)?,
        MethodArg::Rate => baseline_place_with(&net, &sys, &problem, Ordering::PostingRate, cfg)?,
        MethodArg::Hic => baseline_place_with(&net, &sys, &problem, Ordering::Hic, cfg)?,
        MethodArg::Brute => brute_force_place(&net, &sys, &problem)?,
    };
    let targets = labels(&net, &res.targets);
    let final_theta: Vec<Value> =
        sys.v1().iter().zip(&res.final_theta).map(|(&a, &t)| json!({ "id": net.label(a), "theta": t })).collect();
    let mut rows = Vec::with_capacity(targets.len() + 1);
    for (i, v) in res.objective_values.iter().enumerate() {
        let target = if i == 0 { String::new() } else { targets[i - 1].clone() };
        rows.push(vec![i.to_string(), target, fmt_num(*v)]);
    }
    Ok(Output {
        result: json!({
            "method": res.method,
            "p_agent": p,
            "targets": targets,
            "objective_values": res.objective_values,
            "gains": res.gains,
            "notes": res.notes,
            "final_theta": final_theta,
        }),
        csv: table(vec!["prefix", "target", "objective"], rows),
    })
}

fn cmd_simulate(args: &SimulateArgs) -> Result<Output> {
    let net = load(&args.network)?;
    let sampling = match args.sample_every {
        Some(interval) => Sampling::Every { interval },
        None => Sampling::Logarithmic { per_decade: args.per_decade },
    };
    let initial = match args.initial {
        Some(value) => InitialOpinions::Constant { value },
        None => InitialOpinions::default(),
    };
    let cfg = SimulationConfig::new(args.steps, args.replicas, args.seed)
        .with_sampling(sampling)
        .with_verbalization(args.verbalization.into())
        .with_initial(initial);
    let schedule = args.schedule.schedule();
    let trace = if args.consensus { consensus_run(&net, &schedule, &cfg)? } else { run(&net, &schedule, &cfg)? };
    let rows = trace
        .samples
        .iter()
        .map(|s| {
            vec![
                s.t.to_string(),
                fmt_num(s.mean),
                fmt_num(s.var),
                s.dist_to_eq.map(fmt_num).unwrap_or_default(),
                fmt_num(s.centering_norm),
            ]
        })
        .collect();
    let mut result = serde_json::to_value(&trace).map_err(|e| Error::Numerical(e.to_string()))?;
    result["agents"] = json!(labels(&net, &trace.agents));
    Ok(Output { result, csv: table(vec!["t", "mean", "var", "dist_to_eq", "centering_norm"], rows) })
}

fn cmd_validate(args: &ValidateArgs) -> Result<Output> {
    let net = load(&args.network)?;
    let structure = validate(&net);
    let mut suite = SuiteConfig::new(args.steps, args.replicas, args.seed);
    suite.schedule = args.schedule.schedule();
    suite.verbalization = args.verbalization.into();
    suite.band = args.band;
    suite.schedule.check(net.n_agents())?;
    let verdicts = property_suite(&net, &suite)?;
    let rows = verdicts
        .iter()
        .map(|v| {
            let status = serde_json::to_value(v.status).expect("enum serialises");
            vec![v.property.clone(), status.as_str().unwrap_or_default().to_owned(), v.detail.clone()]
        })
        .collect();
    let violations: Vec<Value> = structure
        .row_sum_violations
        .iter()
        .map(|&(a, s)| json!({ "id": net.label(a), "sum": s }))
        .collect();
    Ok(Output {
        result: json!({
            "structure": {
                "valid": structure.is_valid(),
                "row_sum_violations": violations,
                "unreachable_nonstubborn": labels(&net, &structure.unreachable_nonstubborn),
                "isolated_components": structure.isolated_components,
            },
            "verdicts": verdicts,
        }),
        csv: table(vec!["property", "status", "detail"], rows),
    })
}

fn cmd_classify(args: &ClassifyArgs) -> Result<Output> {
    check_input(&args.agents)?;
    let agents = fs::read(&args.agents).map_err(|source| Error::Io { path: args.agents.clone(), source })?;
    let edges = match &args.edges {
        Some(p) => {
            check_input(p)?;
            fs::read(p).map_err(|source| Error::Io { path: p.clone(), source })?
        }
        None => b"src,dst,prob\n".to_vec(),
    };
    let net = load_network(edges.as_slice(), agents.as_slice(), ProbabilitySource::Given)?;
    let opinions: Vec<Option<f64>> = net.agents().map(|a| net.opinion(a)).collect();
    let partition = classify_stubborn(&opinions, args.low, args.high)?;
    let out = net.with_partition(&partition)?;
    let mut buf = Vec::new();
    out.write_agents(&mut buf)?;
    let stubborn: Vec<Value> =
        partition.stubborn.iter().map(|&(a, o)| json!({ "id": net.label(a), "opinion": o })).collect();
    Ok(Output {
        result: json!({
            "stubborn": stubborn,
            "n_stubborn": partition.stubborn.len(),
            "n_agents": net.n_agents(),
        }),
        csv: CsvBody::Raw(buf),
    })
}

fn cmd_generate(args: &GenerateArgs) -> Result<Output> {
    let net = match args.kind {
        GenerateKind::Random => random_network(args.n, args.stubborn, args.extra_edges, args.seed)?,
        GenerateKind::Symmetric => symmetric_network(args.n, args.stubborn, args.seed)?,
        GenerateKind::PowerLaw => {
            let spec = PowerLawSpec {
                follows: args.follows,
                follow_back: args.follow_back,
                stubborn_fraction: args.stubborn_fraction,
                ..PowerLawSpec::new(args.n)
            };
            power_law_network(&spec, args.seed)?
        }
    };
    let dir = &args.out_dir;
    fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.clone(), source })?;
    let edges = dir.join("edges.csv");
    let agents = dir.join("agents.csv");
    let create = |p: &Path| File::create(p).map_err(|source| Error::Io { path: p.to_path_buf(), source });
    net.write_edges(io::BufWriter::new(create(&edges)?))?;
    net.write_agents(io::BufWriter::new(create(&agents)?))?;
    let rows = vec![
        vec!["edges".to_owned(), edges.display().to_string(), net.n_edges().to_string()],
        vec!["agents".to_owned(), agents.display().to_string(), net.n_agents().to_string()],
    ];
    Ok(Output {
        result: json!({
            "edges": edges.display().to_string(),
            "agents": agents.display().to_string(),
            "n_agents": net.n_agents(),
            "n_edges": net.n_edges(),
            "n_stubborn": net.n_stubborn(),
        }),
        csv: table(vec!["table", "path", "rows"], rows),
    })
}

fn execute(command: &Command) -> Result<(String, Value, Output)> {
    let echo = |v: std::result::Result<Value, serde_json::Error>| v.map_err(|e| Error::Numerical(e.to_string()));
    Ok(match command {
        Command::Solve(a) => ("solve".into(), echo(serde_json::to_value(a))?, cmd_solve(a)?),
        Command::Centrality(a) => ("centrality".into(), echo(serde_json::to_value(a))?, cmd_centrality(a)?),
        Command::Optimize(a) => ("optimize".into(), echo(serde_json::to_value(a))?, cmd_optimize(a)?),
        Command::Simulate(a) => ("simulate".into(), echo(serde_json::to_value(a))?, cmd_simulate(a)?),
        Command::Validate(a) => ("validate".into(), echo(serde_json::to_value(a))?, cmd_validate(a)?),
        Command::ClassifyStubborn(a) => ("classify-stubborn".into(), echo(serde_json::to_value(a))?, cmd_classify(a)?),
        Command::Generate(a) => ("generate".into(), echo(serde_json::to_value(a))?, cmd_generate(a)?),
    })
}

fn render(cli: &Cli, command: String, config: Value, output: Output, elapsed: f64) -> Result<Vec<u8>> {
    match cli.format {
        Format::Json => {
            let mut report = Report {
                tool: TOOL.into(),
                version: env!("CARGO_PKG_VERSION").into(),
                command,
                config,
                result: output.result,
                timing: cli.timings.then_some(Timing { elapsed_ms: elapsed }),
            };
            round_value(&mut report.config);
            round_value(&mut report.result);
            let mut buf = serde_json::to_vec_pretty(&report).map_err(|e| Error::Numerical(e.to_string()))?;
            buf.push(b'\n');
            Ok(buf)
        }
        Format::Csv => match output.csv {
            CsvBody::Raw(buf) => Ok(buf),
            CsvBody::Table { header, rows } => {
                let mut wr = csv::Writer::from_writer(Vec::new());
                let csv_err = |e: csv::Error| Error::Numerical(format!("csv writer: {e}"));
                wr.write_record(&header).map_err(csv_err)?;
                for r in rows {
                    wr.write_record(&r).map_err(csv_err)?;
                }
                wr.into_inner().map_err(|e| Error::Numerical(format!("csv writer: {e}")))
            }
        },
    }
}

fn exit_code(e: &Error) -> i32 {
    if e.is_user_error() {
        1
    } else {
        2
    }
}

/// Parses `args` (including the program name), runs the command and writes
/// the report to `--output` or `out`. Diagnostics go to `err`.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(err, "error: cannot start worker pool: {e}");
            return 2;
        }
    };
    let start = Instant::now();
    let result = pool.install(|| execute(&cli.command));
    let elapsed = start.elapsed().as_secs_f64() * 1e3;
    let bytes = result.and_then(|(command, config, output)| render(&cli, command, config, output, elapsed));
    let bytes = match bytes {
        Ok(b) => b,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return exit_code(&e);
        }
    };
    let written = match &cli.output {
        Some(path) => fs::write(path, &bytes).map_err(|source| Error::Io { path: path.clone(), source }),
        None => out.write_all(&bytes).and_then(|_| out.flush()).map_err(|source| Error::Io {
            path: "<stdout>".into(),
            source,
        }),
    };
    match written {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}

/// Entry point of the binary: [`run_with`] on the process streams.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(args, &mut io::stdout().lock(), &mut io::stderr().lock())
}
