use std::collections::HashSet;
use std::fmt::Debug;
use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, Context};
use keepalive_core::agent::{load_model, save_model, train, write_training_log, AgentError, DqnPolicy, TrainedModel};
use keepalive_core::engine::{self, ActionSet, CostScales, SimConfig, SimRun};
use keepalive_core::metrics::{self, SimReport};
use keepalive_core::policies::{
    CarbonMin, FixedPolicy, LatencyMin, OraclePolicy, Policy, PsoParams, PsoPolicy, WeightedGreedy,
};
use keepalive_core::trace::{
    annotate, build_cold_table, generate_trace, read_trace, split_by_pod, write_trace, ArrivalModel,
    ColdStartTable, ColdTableOptions, Invocation, SyntheticSpec, TraceSplit,
};
use keepalive_core::CarbonTimeline;
use rayon::prelude::*;

use crate::config::{RunConfig, Slice};
use crate::output::{write_atomic, write_text};
use crate::{data, usage, Cli, CliError, CliResult, Command, Failure, GenTraceArgs, ModelKind, SimOverrides};

pub fn dispatch(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global().map_err(usage)?;
    }
    let Cli { config, output_dir, verbosity, command, .. } = cli;
    match command {
        Command::GenTrace(args) => {
            init_logging(verbosity.as_deref().unwrap_or("info"));
            return gen_trace(&args);
        }
        Command::ExampleConfig => {
            print!("{}", crate::config::EXAMPLE);
            return Ok(());
        }
        _ => {}
    }
    let path = config.ok_or_else(|| usage(anyhow!("this command needs --config <FILE>")))?;
    let mut cfg = RunConfig::load(&path).map_err(|e| match e.downcast_ref::<std::io::Error>() {
        Some(_) => data(e),
        None => usage(e),
    })?;
    init_logging(verbosity.as_deref().unwrap_or(&cfg.output.verbosity));
    set("output.dir", &mut cfg.output.dir, output_dir);
    match command {
        Command::GenTrace(_) | Command::ExampleConfig => unreachable!("handled above"),
        Command::Simulate(a) => {
            set("policy.name", &mut cfg.policy.name, a.policy);
            set("policy.k", &mut cfg.policy.k, a.k);
            set("policy.model", &mut cfg.policy.model, a.model.map(Some));
            apply_sim(&mut cfg, a.sim);
            simulate(cfg, a.outcomes, a.profile)
        }
        Command::Train(a) => {
            set("train.episodes", &mut cfg.train.episodes, a.episodes);
            apply_sim(&mut cfg, a.sim);
            cmd_train(cfg)
        }
        Command::Compare(a) => {
            set("policy.model", &mut cfg.policy.model, a.model.map(Some));
            apply_sim(&mut cfg, a.sim);
            compare(cfg, &a.policies)
        }
        Command::Sweep(a) => {
            set("policy.name", &mut cfg.policy.name, a.policy);
            set("policy.k", &mut cfg.policy.k, a.k);
            set("policy.model", &mut cfg.policy.model, a.model.map(Some));
            apply_sim(&mut cfg, SimOverrides { lambda: None, seed: a.seed, slice: a.slice });
            sweep(cfg, &a.lambda_grid)
        }
        Command::OracleGap(a) => {
            set("policy.model", &mut cfg.policy.model, a.model.map(Some));
            apply_sim(&mut cfg, a.sim);
            oracle_gap(cfg)
        }
    }
}

fn init_logging(level: &str) {
    let _ = env_logger::Builder::new().parse_filters(level).format_timestamp(None).try_init();
}

/// Flag values win over the file; every effective override is logged.
fn set<T: PartialEq + Debug>(key: &str, slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        if *slot != v {
            log::info!("override {key}: {slot:?} -> {v:?}");
            *slot = v;
        }
    }
}

fn apply_sim(cfg: &mut RunConfig, o: SimOverrides) {
    set("sim.lambda_carbon", &mut cfg.sim.lambda_carbon, o.lambda);
    set("sim.seed", &mut cfg.sim.seed, o.seed);
    set("sim.slice", &mut cfg.sim.slice, o.slice);
}

fn agent_error(e: AgentError) -> CliError {
    let kind = match e {
        AgentError::Diverged { .. } => Failure::Diverged,
        AgentError::Config(_) | AgentError::ActionCount { .. } => Failure::Usage,
        _ => Failure::Data,
    };
    CliError { kind, error: e.into() }
}

fn gen_trace(a: &GenTraceArgs) -> CliResult<()> {
    let need = |v: Option<f64>, flag: &str| v.ok_or_else(|| usage(anyhow!("--model {:?} needs {flag}", a.model)));
    let arrival = match a.model {
        ModelKind::Deterministic => ArrivalModel::Deterministic { interval_s: need(a.interval, "--interval")? },
        ModelKind::Poisson => ArrivalModel::Poisson { rate_hz: need(a.rate, "--rate")? },
        ModelKind::Bimodal => ArrivalModel::Bimodal {
            burst_rate_hz: need(a.burst_rate, "--burst-rate")?,
            lull_rate_hz: need(a.lull_rate, "--lull-rate")?,
            period_s: need(a.period, "--period")?,
        },
    };
    let spec = SyntheticSpec {
        n_functions: a.functions,
        n_pods_per_function: a.pods,
        duration_s: a.duration,
        arrival,
        seed: a.seed,
        ..Default::default()
    };
    let trace = generate_trace(&spec).map_err(usage)?;
    match &a.out {
        Some(p) => write_atomic(p, |w| Ok(write_trace(w, &trace.invocations)?)).map_err(data)?,
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write_trace(&mut lock, &trace.invocations).map_err(data)?;
            lock.flush().map_err(data)?;
        }
    }
    if let Some(p) = &a.cold_log {
        write_atomic(p, |w| Ok(trace.cold_table.write_as_log(w)?)).map_err(data)?;
    }
    log::info!("generated {} invocations", trace.invocations.len());
    Ok(())
}

struct Data {
    split: TraceSplit,
    all: Vec<Invocation>,
    sim: SimConfig,
}

impl Data {
    fn slice(&self, s: Slice) -> CliResult<&[Invocation]> {
        let part = match s {
            Slice::All => &self.all,
            Slice::Train => &self.split.train,
            Slice::Validation => &self.split.validation,
            Slice::Test => &self.split.test,
        };
        if part.is_empty() {
            return Err(data(anyhow!("the {s:?} slice is empty; adjust trace.split or sim.slice")));
        }
        Ok(part)
    }
}

fn load_data(cfg: &RunConfig) -> CliResult<Data> {
    let mut all = match (&cfg.trace.path, &cfg.trace.synthetic) {
        (Some(p), _) => read_trace(p).map_err(data)?,
        (None, Some(spec)) => generate_trace(spec).map_err(usage)?.invocations,
        (None, None) => return Err(usage(anyhow!("no trace configured"))),
    };
    let mut split = split_by_pod(&all, cfg.trace.split, cfg.split_seed()).map_err(|e| match e {
        keepalive_core::trace::TraceError::Empty => data(e),
        _ => usage(e),
    })?;
    if cfg.trace.path.is_some() {
        // the latency table is derived from the training pods only
        let table = match &cfg.trace.cold_log {
            Some(log) => {
                let opts = ColdTableOptions { statistic: cfg.trace.cold_statistic, default_ms: cfg.trace.cold_default_ms };
                build_cold_table(&split.train, log, &opts).map_err(data)?
            }
            None => ColdStartTable::fallback_only(cfg.trace.cold_default_ms).map_err(usage)?,
        };
        for part in [&mut all, &mut split.train, &mut split.validation, &mut split.test] {
            annotate(part, &table);
        }
    }
    log::info!(
        "trace: {} invocations; split {}/{}/{}",
        all.len(),
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );

    let timeline = match &cfg.carbon.timeline {
        Some(p) => {
            let t = CarbonTimeline::read_csv(p).map_err(data)?;
            let origin = cfg.carbon.trace_epoch_ms.unwrap_or_else(|| t.first_ms());
            t.rebased(origin)
        }
        None => CarbonTimeline::constant(cfg.carbon.constant_ci).map_err(usage)?,
    };
    let profile = cfg.carbon.energy_profile().map_err(usage)?;
    let mut sim = SimConfig::new(profile, timeline);
    sim.actions = ActionSet::new(cfg.sim.actions.clone()).map_err(usage)?;
    sim.network_const_ms = cfg.sim.network_const_ms;
    sim.lambda_carbon = cfg.sim.lambda_carbon;
    sim.window_w = cfg.sim.window_w;
    sim.seed = cfg.sim.seed;
    sim.empty_history_prior = cfg.sim.empty_history_prior;
    sim.ci_mode = cfg.carbon.ci_mode;
    sim.scales = CostScales::from_training(&split.train, &sim.profile, &sim.timeline, cfg.sim.scale_reference_k_s)
        .map_err(data)?;
    sim.validate().map_err(usage)?;
    Ok(Data { split, all, sim })
}

/// A policy named on the command line or in the config.
#[derive(Debug, Clone, PartialEq)]
enum Spec {
    Fixed(f64),
    LatencyMin,
    CarbonMin,
    WeightedGreedy,
    Pso,
    Oracle,
    Rl,
}

const SPEC_NAMES: &str = "fixed[:K], latency_min, carbon_min, weighted_greedy, pso, oracle, rl";

fn parse_spec(s: &str, default_k: f64) -> CliResult<Spec> {
    let s = s.trim();
    let (name, arg) = match s.split_once(':') {
        Some((n, a)) => (n, Some(a)),
        None => (s, None),
    };
    let spec = match name {
        "fixed" => {
            let k = match arg {
                Some(a) => a.parse().map_err(|_| usage(anyhow!("bad fixed timeout `{a}`")))?,
                None => default_k,
            };
            return Ok(Spec::Fixed(k));
        }
        "latency_min" => Spec::LatencyMin,
        "carbon_min" => Spec::CarbonMin,
        "weighted_greedy" => Spec::WeightedGreedy,
        "pso" => Spec::Pso,
        "oracle" => Spec::Oracle,
        "rl" => Spec::Rl,
        _ => return Err(usage(anyhow!("unknown policy `{s}`; expected one of {SPEC_NAMES}"))),
    };
    if arg.is_some() {
        return Err(usage(anyhow!("policy `{name}` takes no argument")));
    }
    Ok(spec)
}

fn build_policy(spec: &Spec, cfg: &RunConfig, sim: &SimConfig, model: Option<&TrainedModel>) -> CliResult<Box<dyn Policy>> {
    Ok(match spec {
        Spec::Fixed(k) => Box::new(FixedPolicy::new(*k, &sim.actions).map_err(usage)?),
        Spec::LatencyMin => Box::new(LatencyMin),
        Spec::CarbonMin => Box::new(CarbonMin),
        Spec::WeightedGreedy => Box::new(WeightedGreedy),
        Spec::Pso => Box::new(
            PsoPolicy::new(PsoParams {
                swarm: cfg.policy.pso_swarm,
                iters: cfg.policy.pso_iters,
                seed: cfg.policy_seed(),
                ..Default::default()
            })
            .map_err(usage)?,
        ),
        Spec::Oracle => Box::new(OraclePolicy),
        Spec::Rl => Box::new(DqnPolicy::new(model.ok_or_else(|| usage(anyhow!("policy `rl` needs a model")))?.clone())),
    })
}

fn require_model(cfg: &RunConfig, sim: &SimConfig) -> CliResult<TrainedModel> {
    let path = cfg
        .policy
        .model
        .as_ref()
        .ok_or_else(|| usage(anyhow!("policy `rl` needs --model <FILE> or policy.model")))?;
    load_model(path, Some(sim.actions.len()))
        .with_context(|| format!("loading model {}", path.display()))
        .map_err(|e| match e.downcast_ref::<AgentError>() {
            Some(AgentError::ActionCount { .. }) => usage(e),
            _ => data(e),
        })
}

fn run_sim(trace: &[Invocation], policy: &mut dyn Policy, sim: &SimConfig) -> CliResult<SimRun> {
    let name = policy.name();
    engine::run(trace, policy, sim).with_context(|| format!("simulating `{name}`")).map_err(data)
}

fn resolve(cfg: &mut RunConfig) -> CliResult<()> {
    cfg.resolve().map_err(usage)
}

fn write_resolved(cfg: &RunConfig) -> CliResult<()> {
    let text = cfg.to_toml().map_err(data)?;
    write_text(&cfg.output.dir.join("resolved_config.toml"), &text).map_err(data)
}

fn write_report(path: &Path, r: &SimReport) -> CliResult<()> {
    write_atomic(path, |w| Ok(metrics::write_report_json(w, r)?)).map_err(data)
}

fn summary(r: &SimReport) -> String {
    format!(
        "{}: invocations {} cold_starts {} keep_alive_g {:.6} total_g {:.6} mean_latency_s {:.4} weighted_cost {:.6}",
        r.policy,
        r.invocations,
        r.cold_start_count,
        r.keep_alive_carbon_g,
        r.total_carbon_g,
        r.mean_e2e_latency_s,
        r.weighted_cost
    )
}

fn simulate(mut cfg: RunConfig, outcomes: bool, profile: bool) -> CliResult<()> {
    resolve(&mut cfg)?;
    let spec = parse_spec(&cfg.policy.name, cfg.policy.k)?;
    let d = load_data(&cfg)?;
    let model = if spec == Spec::Rl { Some(require_model(&cfg, &d.sim)?) } else { None };
    let trace = d.slice(cfg.sim.slice)?;
    let mut policy = build_policy(&spec, &cfg, &d.sim, model.as_ref())?;
    let run = run_sim(trace, policy.as_mut(), &d.sim)?;
    let dir = &cfg.output.dir;
    write_resolved(&cfg)?;
    write_report(&dir.join("report.json"), &run.report)?;
    if outcomes {
        write_atomic(&dir.join("outcomes.csv"), |w| Ok(engine::write_outcomes_csv(w, trace, &run.outcomes)?))
            .map_err(data)?;
    }
    if profile {
        let rows = metrics::decision_intensity_profile(&run.outcomes, &d.sim.actions, &d.sim.timeline).map_err(data)?;
        write_atomic(&dir.join("profile.csv"), |w| Ok(metrics::write_profile_csv(w, &d.sim.actions, &rows)?))
            .map_err(data)?;
    }
    println!("{}", summary(&run.report));
    Ok(())
}

fn train_and_save(cfg: &RunConfig, d: &Data, sim: &SimConfig, dir: &Path) -> CliResult<TrainedModel> {
    let out = train(&d.split, &cfg.train, sim).map_err(agent_error)?;
    save_model(&out.model, &dir.join("model.json")).map_err(agent_error)?;
    let log_path = dir.join("training_log.csv");
    write_atomic(&log_path, |w| Ok(write_training_log(w, &out.log)?)).map_err(data)?;
    let best = &out.log[out.best_episode];
    log::info!("best validation reward {:.6} at episode {}", best.val_reward, out.best_episode);
    Ok(out.model)
}

fn cmd_train(mut cfg: RunConfig) -> CliResult<()> {
    resolve(&mut cfg)?;
    let d = load_data(&cfg)?;
    let dir = cfg.output.dir.clone();
    write_resolved(&cfg)?;
    train_and_save(&cfg, &d, &d.sim, &dir)?;
    println!("model written to {}", dir.join("model.json").display());
    Ok(())
}

fn compare(mut cfg: RunConfig, names: &[String]) -> CliResult<()> {
    resolve(&mut cfg)?;
    // every name is validated before any simulation starts
    let specs = names.iter().map(|n| parse_spec(n, cfg.policy.k)).collect::<CliResult<Vec<_>>>()?;
    let d = load_data(&cfg)?;
    let model = if specs.contains(&Spec::Rl) { Some(require_model(&cfg, &d.sim)?) } else { None };
    let mut seen = HashSet::new();
    for s in &specs {
        let name = build_policy(s, &cfg, &d.sim, model.as_ref())?.name();
        if !seen.insert(name.clone()) {
            return Err(usage(anyhow!("policy `{name}` listed twice")));
        }
    }
    let trace = d.slice(cfg.sim.slice)?;
    let reports = specs
        .par_iter()
        .map(|s| {
            let mut p = build_policy(s, &cfg, &d.sim, model.as_ref())?;
            let r = run_sim(trace, p.as_mut(), &d.sim)?.report;
            Ok((r.policy.clone(), r))
        })
        .collect::<CliResult<Vec<(String, SimReport)>>>()?;
    let rows = metrics::compare(&reports).map_err(data)?;
    write_resolved(&cfg)?;
    write_atomic(&cfg.output.dir.join("compare.csv"), |w| Ok(metrics::write_compare_csv(w, &rows)?)).map_err(data)?;
    println!("policy,cold_starts,keep_alive_g,weighted_cost,delta_cold_pct,delta_carbon_pct,distance,rank");
    for r in &rows {
        println!(
            "{},{},{:.6},{:.6},{:.2},{:.2},{:.2},{}",
            r.name, r.cold_start_count, r.keep_alive_carbon_g, r.weighted_cost, r.delta_cold_pct, r.delta_carbon_pct, r.distance, r.rank
        );
    }
    if let Some((_, oracle)) = reports.iter().find(|(n, _)| n == "oracle") {
        let beaten: Vec<&str> = reports
            .iter()
            .filter(|(_, r)| r.weighted_cost < oracle.weighted_cost)
            .map(|(n, _)| n.as_str())
            .collect();
        if beaten.is_empty() {
            println!("oracle dominance: holds (minimal weighted cost {:.6})", oracle.weighted_cost);
        } else {
            println!("oracle dominance: violated by {}", beaten.join(", "));
        }
    }
    Ok(())
}

fn sweep(mut cfg: RunConfig, grid: &[f64]) -> CliResult<()> {
    resolve(&mut cfg)?;
    let grid = metrics::normalize_grid(grid).map_err(usage)?;
    if let Some(l) = grid.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(usage(anyhow!("lambda {l} is outside [0, 1]")));
    }
    let spec = parse_spec(&cfg.policy.name, cfg.policy.k)?;
    let d = load_data(&cfg)?;
    let model = match (&spec, &cfg.policy.model) {
        (Spec::Rl, Some(_)) => Some(require_model(&cfg, &d.sim)?),
        _ => None,
    };
    let trace = d.slice(cfg.sim.slice)?;
    let dir = cfg.output.dir.clone();
    let reports = grid
        .par_iter()
        .map(|&lambda| {
            let mut sim = d.sim.clone();
            sim.lambda_carbon = lambda;
            let trained;
            let m = match (&spec, &model) {
                (Spec::Rl, None) => {
                    let sub = dir.join(format!("lambda_{lambda}"));
                    trained = train_and_save(&cfg, &d, &sim, &sub)?;
                    Some(&trained)
                }
                _ => model.as_ref(),
            };
            let mut p = build_policy(&spec, &cfg, &sim, m)?;
            Ok(run_sim(trace, p.as_mut(), &sim)?.report)
        })
        .collect::<CliResult<Vec<SimReport>>>()?;
    let rows: Vec<_> = grid.iter().zip(&reports).map(|(&l, r)| metrics::sweep_row(l, r)).collect();
    write_resolved(&cfg)?;
    write_atomic(&dir.join("sweep.csv"), |w| Ok(metrics::write_sweep_csv(w, &rows)?)).map_err(data)?;
    println!("lambda_carbon,cold_starts,keep_alive_g,total_g");
    for r in &rows {
        println!("{},{},{:.6},{:.6}", r.lambda_carbon, r.cold_start_count, r.keep_alive_carbon_g, r.total_carbon_g);
    }
    Ok(())
}

fn gap_pct(rl: f64, oracle: f64) -> Option<f64> {
    (oracle != 0.0).then(|| 100.0 * (rl - oracle) / oracle)
}

fn oracle_gap(mut cfg: RunConfig) -> CliResult<()> {
    resolve(&mut cfg)?;
    let d = load_data(&cfg)?;
    let dir = cfg.output.dir.clone();
    let model = match &cfg.policy.model {
        Some(_) => require_model(&cfg, &d.sim)?,
        None => train_and_save(&cfg, &d, &d.sim, &dir)?,
    };
    let trace = d.slice(cfg.sim.slice)?;
    let rl = run_sim(trace, &mut DqnPolicy::new(model), &d.sim)?.report;
    let oracle = run_sim(trace, &mut OraclePolicy, &d.sim)?.report;
    let rows = [
        ("cold_start_count", rl.cold_start_count as f64, oracle.cold_start_count as f64),
        ("keep_alive_carbon_g", rl.keep_alive_carbon_g, oracle.keep_alive_carbon_g),
        ("total_carbon_g", rl.total_carbon_g, oracle.total_carbon_g),
        ("mean_e2e_latency_s", rl.mean_e2e_latency_s, oracle.mean_e2e_latency_s),
        ("weighted_cost", rl.weighted_cost, oracle.weighted_cost),
    ];
    write_resolved(&cfg)?;
    write_report(&dir.join("rl_report.json"), &rl)?;
    write_report(&dir.join("oracle_report.json"), &oracle)?;
    write_atomic(&dir.join("oracle_gap.csv"), |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["metric", "rl", "oracle", "gap_pct"])?;
        for (m, a, b) in rows {
            let gap = gap_pct(a, b).map(|g| g.to_string()).unwrap_or_default();
            out.write_record([m.to_string(), a.to_string(), b.to_string(), gap])?;
        }
        out.flush()?;
        Ok(())
    })
    .map_err(data)?;
    println!("{:<22}{:>16}{:>16}{:>10}", "metric", "rl", "oracle", "gap");
    for (m, a, b) in rows {
        let gap = gap_pct(a, b).map_or("n/a".to_string(), |g| format!("{g:+.2}%"));
        println!("{m:<22}{a:>16.6}{b:>16.6}{gap:>10}");
    }
    Ok(())
}
