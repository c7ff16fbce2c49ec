mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aidplan::dynamics::{Coefficients, Meal, SimConfig, Trace};
use aidplan::estimator::{
    train_with, CoefficientSampler, EstimatorNetwork, TraceDataset, TrainingConfig,
};
use aidplan::llm::{
    evaluate_forward, generate_prompt_dataset, write_jsonl, ChatClient, ChatEndpointConfig,
    LocalOracle, PromptDatasetSpec, PromptKind, Responder,
};
use aidplan::planner::{ControllerConfig, MealEvent, PlanMode, UsagePlan};
use aidplan::provenance::config_hash;
use aidplan::safety::{
    forward_simulate, gate, run_pipeline, run_scenario_suite, with_insulin_on_board,
    CoefficientSource, PlanMapper, PlanRequest, SafetyCriterion, SuiteConfig, TracePredictor,
    VirtualPatient,
};
use aidplan::stl::StlFormula;
use aidplan_service::{AppState, ServiceConfig};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use config::{load_config, write_sidecar, write_text};

#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config or input data.
    Validation(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 3,
            Failure::Runtime(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

fn invalid(e: impl fmt::Display) -> Failure {
    Failure::Validation(e.to_string())
}

fn runtime(e: impl fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "aidplan",
    version,
    about = "Insulin usage planning with a forward-simulation safety gate"
)]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<PlanMode>,
    /// Base URL of a chat-completion endpoint.
    #[arg(long, global = true)]
    endpoint_url: Option<String>,
    #[arg(long, global = true)]
    horizon_min: Option<f64>,
    /// -v info, -vv debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DatasetKind {
    /// Prompt/response records (JSON lines).
    Prompt,
    /// IOB traces for the estimator.
    Traces,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the configured meal scenario and write the trace as CSV.
    Sim {
        /// Single bolus at the meal instead of the planner's plan.
        #[arg(long)]
        dose: Option<f64>,
    },
    /// Generate a prompt dataset or an estimator trace dataset.
    Dataset {
        #[arg(value_enum)]
        kind: DatasetKind,
        /// Fixed ground truth `k1,n,p1` for every trace.
        #[arg(long)]
        truth: Option<String>,
        #[arg(long)]
        count: Option<usize>,
        /// Forward prompts (coefficient to series) instead of inverse.
        #[arg(long)]
        forward: bool,
    },
    /// Train the coefficient estimator.
    Train {
        /// Trace dataset directory; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Estimate insulin coefficients from a trace CSV.
    Estimate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        trace: PathBuf,
    },
    /// Print the usage plan for the configured meal.
    Plan,
    /// Simulate a plan and print the safety verdict.
    Gate {
        /// UsagePlan JSON file.
        #[arg(long, conflicts_with = "dose")]
        plan: Option<PathBuf>,
        #[arg(long)]
        dose: Option<f64>,
        /// STL formula, e.g. `(G 0 360 (> cgm 70))`; default is the TBR criterion.
        #[arg(long)]
        formula: Option<String>,
    },
    /// Run the paired scenario suite across planner modes.
    Suite {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score forward answers of an endpoint (or the local oracle).
    EvalLlm {
        /// Environment variable holding the bearer token.
        #[arg(long)]
        auth_env: Option<String>,
        #[arg(long)]
        count: Option<usize>,
    },
}

fn parse_mode(s: &str) -> Result<PlanMode, String> {
    PlanMode::ALL
        .into_iter()
        .find(|m| m.as_str() == s)
        .ok_or_else(|| format!("expected one of exact, linear, faulty (got `{s}`)"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct ScenarioConfig {
    /// g
    carbs: f64,
    /// g/U
    cr: f64,
    /// U on board at the meal.
    iob: f64,
    meal_time: f64,
    horizon: f64,
    past_horizon: f64,
    mode: PlanMode,
    dose: Option<f64>,
    formula: Option<String>,
    patient: VirtualPatient,
    controller: ControllerConfig,
    sim: SimConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            carbs: 45.0,
            cr: 5.0,
            iob: 2.0,
            meal_time: 0.0,
            horizon: 360.0,
            past_horizon: 60.0,
            mode: PlanMode::Exact,
            dose: None,
            formula: None,
            patient: VirtualPatient::default(),
            controller: ControllerConfig::default(),
            sim: SimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct CliConfig {
    scenario: ScenarioConfig,
    training: TrainingConfig,
    prompts: PromptDatasetSpec,
    suite: SuiteConfig,
    endpoint: Option<ChatEndpointConfig>,
    service: ServiceConfig,
}

impl CliConfig {
    fn apply_flags(&mut self, cli: &Cli) {
        if let Some(s) = cli.seed {
            self.training.seed = s;
            self.prompts.seed = s;
            self.suite.seed = s;
        }
        if let Some(m) = cli.mode {
            self.scenario.mode = m;
        }
        if let Some(h) = cli.horizon_min {
            self.scenario.horizon = h;
            self.suite.horizon = h;
            self.service.horizon = h;
        }
        if let Some(url) = &cli.endpoint_url {
            let mut ep = self.endpoint.clone().unwrap_or_default();
            ep.base_url = url.trim_end_matches('/').to_string();
            self.endpoint = Some(ep);
        }
    }
}

fn criterion(sc: &ScenarioConfig) -> Result<SafetyCriterion, Failure> {
    match &sc.formula {
        Some(text) => Ok(SafetyCriterion::Formula {
            formula: StlFormula::parse(text).map_err(invalid)?,
        }),
        None => Ok(SafetyCriterion::default()),
    }
}

fn check_scenario(sc: &ScenarioConfig) -> Result<(), Failure> {
    for (name, v) in [("carbs", sc.carbs), ("iob", sc.iob)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(invalid(format!("scenario.{name} must be >= 0 (got {v})")));
        }
    }
    Ok(())
}

/// Plan for the scenario from the full pipeline (mode-selected planner,
/// fixed patient coefficients, local prediction).
fn pipeline_plan(sc: &ScenarioConfig) -> Result<UsagePlan, Failure> {
    check_scenario(sc)?;
    let meal = (sc.carbs > 0.0)
        .then(|| MealEvent::new(sc.meal_time, sc.carbs))
        .transpose()
        .map_err(invalid)?;
    let mut req = PlanRequest::at_rest(
        &sc.patient,
        sc.controller.with_cr(sc.cr),
        meal,
        sc.horizon,
        sc.past_horizon,
    )
    .map_err(invalid)?;
    req.iob_override = Some(sc.iob);
    req.criterion = criterion(sc)?;
    req.sim = sc.sim;
    let d = run_pipeline(
        &req,
        &sc.patient,
        CoefficientSource::Fixed,
        TracePredictor::Local,
        PlanMapper::RuleBased(sc.mode),
    )
    .map_err(|e| {
        if e.step.index() == 0 {
            invalid(e)
        } else {
            runtime(e)
        }
    })?;
    Ok(d.plan)
}

fn simulate_scenario(sc: &ScenarioConfig, plan: &UsagePlan) -> Result<Trace, Failure> {
    check_scenario(sc)?;
    let ctrl = sc.controller.with_cr(sc.cr);
    ctrl.validate().map_err(invalid)?;
    let plant = sc
        .patient
        .plant(ctrl.cr, ctrl.basal_rate)
        .map_err(invalid)?;
    let start = with_insulin_on_board(
        &sc.patient.rest_state(ctrl.basal_rate),
        &plant.coeffs,
        ctrl.basal_rate,
        sc.iob,
    );
    let meals: Vec<Meal> = (sc.carbs > 0.0)
        .then_some(Meal {
            time: sc.meal_time,
            carbs: sc.carbs,
        })
        .into_iter()
        .collect();
    forward_simulate(plan, &plant, &start, &ctrl, &meals, sc.horizon, &sc.sim).map_err(invalid)
}

fn scenario_plan(sc: &ScenarioConfig, dose: Option<f64>) -> Result<UsagePlan, Failure> {
    match dose.or(sc.dose) {
        Some(d) => Ok(UsagePlan::single_bolus(sc.meal_time, d)),
        None => pipeline_plan(sc),
    }
}

fn print_json(v: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("json"));
}

fn parse_truth(text: &str) -> Result<Coefficients, Failure> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| invalid(format!("--truth expects k1,n,p1: {e}")))?;
    let [k1, n, p1] = parts[..] else {
        return Err(invalid(format!(
            "--truth expects three values k1,n,p1 (got {})",
            parts.len()
        )));
    };
    let c = Coefficients {
        k1,
        n,
        p1,
        ..Coefficients::virtual_patient()
    };
    c.validate().map_err(invalid)?;
    Ok(c)
}

fn out_or(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn write_json_output(
    path: &Path,
    value: &impl Serialize,
    command: &str,
    hash: &str,
    seed: Option<u64>,
) -> Result<(), Failure> {
    write_text(path, &serde_json::to_string_pretty(value).expect("json"))?;
    write_sidecar(path, command, hash, seed)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let mut cfg: CliConfig = load_config(cli.config.as_deref())?;
    cfg.apply_flags(cli);
    match &cli.command {
        Command::Sim { dose } => {
            let sc = &cfg.scenario;
            let plan = scenario_plan(sc, *dose)?;
            let trace = simulate_scenario(sc, &plan)?;
            let out = out_or(cli, "sim.csv");
            write_text(&out, &trace.to_csv())?;
            write_sidecar(&out, "sim", &config_hash(&(sc, &plan)), None)?;
            println!("wrote {} ({} samples)", out.display(), trace.len());
        }
        Command::Dataset {
            kind: DatasetKind::Prompt,
            count,
            forward,
            truth,
        } => {
            if truth.is_some() {
                return Err(invalid("--truth applies to trace datasets"));
            }
            let mut spec = cfg.prompts;
            if let Some(c) = count {
                spec.count = *c;
            }
            if *forward {
                spec.kind = PromptKind::Forward;
            }
            let records = generate_prompt_dataset(&spec).map_err(invalid)?;
            let out = out_or(cli, "prompts.jsonl");
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(runtime)?;
            }
            write_jsonl(&out, &records).map_err(runtime)?;
            write_sidecar(&out, "dataset prompt", &config_hash(&spec), Some(spec.seed))?;
            println!("wrote {} ({} records)", out.display(), records.len());
        }
        Command::Dataset {
            kind: DatasetKind::Traces,
            count,
            truth,
            forward,
        } => {
            if *forward {
                return Err(invalid("--forward applies to prompt datasets"));
            }
            let mut spec = cfg.training.dataset_spec();
            if let Some(c) = count {
                spec.count = *c;
            }
            if let Some(t) = truth {
                spec.sampler = CoefficientSampler::fixed(&parse_truth(t)?);
            }
            let data = TraceDataset::generate(&spec).map_err(invalid)?;
            let out = out_or(cli, "traces");
            data.write_dir(&out).map_err(runtime)?;
            write_sidecar(&out, "dataset traces", &config_hash(&spec), Some(spec.seed))?;
            println!("wrote {} ({} traces)", out.display(), data.len());
        }
        Command::Train { data } => {
            let tc = &cfg.training;
            tc.validate().map_err(invalid)?;
            let dataset = match data {
                Some(dir) => TraceDataset::read_dir(dir).map_err(invalid)?,
                None => TraceDataset::generate(&tc.dataset_spec()).map_err(invalid)?,
            };
            let outcome = train_with(tc, &dataset, |epoch, loss| {
                log::info!("epoch {:>4}  rmse {loss:.6e}", epoch + 1)
            })
            .map_err(runtime)?;
            let out = out_or(cli, "checkpoint.json");
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(runtime)?;
            }
            outcome
                .network
                .save(&out, &outcome.config_hash)
                .map_err(runtime)?;
            let hash = config_hash(&(tc, &dataset.spec));
            write_sidecar(&out, "train", &hash, Some(tc.seed))?;
            let mut history = String::from("epoch,rmse\n");
            for (i, l) in outcome.loss_history.iter().enumerate() {
                history.push_str(&format!("{},{l:e}\n", i + 1));
            }
            let mut loss_path = out.clone().into_os_string();
            loss_path.push(".loss.csv");
            let loss_path = PathBuf::from(loss_path);
            write_text(&loss_path, &history)?;
            write_sidecar(&loss_path, "train", &hash, Some(tc.seed))?;
            println!(
                "wrote {} (final rmse {:.3e})",
                out.display(),
                outcome.loss_history.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Estimate { checkpoint, trace } => {
            let (net, _) = EstimatorNetwork::load(checkpoint).map_err(invalid)?;
            let trace = Trace::read_csv(trace).map_err(invalid)?;
            let c = net.estimate_coefficients(&trace, true).map_err(invalid)?;
            print_json(&json!({"k1": c.k1, "n": c.n, "p1": c.p1}));
        }
        Command::Plan => {
            let plan = pipeline_plan(&cfg.scenario)?;
            if let Some(out) = &cli.out {
                write_json_output(out, &plan, "plan", &config_hash(&cfg.scenario), None)?;
            }
            print_json(&plan);
        }
        Command::Gate {
            plan,
            dose,
            formula,
        } => {
            let mut sc = cfg.scenario.clone();
            if formula.is_some() {
                sc.formula = formula.clone();
            }
            let plan = match plan {
                Some(p) => {
                    let text = std::fs::read_to_string(p)
                        .map_err(|e| invalid(format!("cannot read plan {}: {e}", p.display())))?;
                    let origin = p.display().to_string();
                    let v = serde_json::from_str(&text)
                        .map_err(|e| invalid(format!("{origin}: malformed JSON: {e}")))?;
                    config::parse_value::<UsagePlan>(v, &origin)?
                }
                None => scenario_plan(&sc, *dose)?,
            };
            let trace = simulate_scenario(&sc, &plan)?;
            let outcome = gate(&trace, &criterion(&sc)?).map_err(runtime)?;
            let report = json!({
                "verdict": outcome.verdict,
                "rho": outcome.robustness.rho,
                "first_violation": outcome.first_violation,
                "feedback": outcome.feedback,
                "units": plan.total_units(),
                "min_glucose": trace.glucose().into_iter().fold(f64::INFINITY, f64::min),
            });
            if let Some(out) = &cli.out {
                write_json_output(out, &report, "gate", &config_hash(&(&sc, &plan)), None)?;
            }
            print_json(&report);
        }
        Command::Suite { count } => {
            let mut sc = cfg.suite.clone();
            if let Some(c) = count {
                sc.count = *c;
            }
            let report = run_scenario_suite(&sc, None).map_err(invalid)?;
            let dir = out_or(cli, "suite");
            let hash = config_hash(&sc);
            let csv = dir.join("suite.csv");
            write_text(&csv, &report.to_csv())?;
            write_sidecar(&csv, "suite", &hash, Some(sc.seed))?;
            let summary = report.summary_json();
            write_json_output(
                &dir.join("summary.json"),
                &summary,
                "suite",
                &hash,
                Some(sc.seed),
            )?;
            print_json(&summary);
            if report.has_failures() {
                return Err(runtime(format!(
                    "{} scenario runs failed; see summary.json",
                    report.failures.len()
                )));
            }
        }
        Command::Serve { bind, checkpoint } => {
            let mut config = cfg.service.clone();
            if let Some(b) = bind {
                config.bind = b.clone();
            }
            let network = match checkpoint {
                Some(p) => Some(EstimatorNetwork::load(p).map_err(invalid)?.0),
                None => None,
            };
            let rt = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .map_err(runtime)?;
            rt.block_on(aidplan_service::serve(AppState { config, network }))
                .map_err(runtime)?;
        }
        Command::EvalLlm { auth_env, count } => {
            let mut spec = cfg.prompts;
            if let Some(c) = count {
                spec.count = *c;
            }
            let responder: Box<dyn Responder> = match cfg.endpoint.clone() {
                Some(mut ep) => {
                    if auth_env.is_some() {
                        ep.auth_env = auth_env.clone();
                    }
                    Box::new(ChatClient::new(ep).map_err(invalid)?)
                }
                None if auth_env.is_some() => {
                    return Err(invalid("--auth-env needs --endpoint-url"));
                }
                None => Box::new(LocalOracle::new(spec.model, spec.series)),
            };
            let report = evaluate_forward(responder.as_ref(), &spec).map_err(invalid)?;
            if let Some(out) = &cli.out {
                let hash = config_hash(&(&spec, &cfg.endpoint));
                write_json_output(out, &report, "eval-llm", &hash, Some(spec.seed))?;
            }
            println!(
                "{}: scored {}/{}  rmse mean {:.4}%  std {:.4}%",
                report.responder,
                report.scored,
                report.count,
                report.mean_rmse.unwrap_or(f64::NAN),
                report.std_rmse.unwrap_or(f64::NAN)
            );
            if report.scored == 0 {
                return Err(runtime("no answer could be scored"));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    let result = match cli.workers {
        Some(n) => match rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
        {
            Ok(pool) => pool.install(|| run(&cli)),
            Err(e) => Err(runtime(format!("worker pool: {e}"))),
        },
        None => run(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
