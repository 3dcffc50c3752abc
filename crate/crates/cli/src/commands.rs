use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser};
use serde::Serialize;

use ceai_core::ceai::{
    classify, default_core_grid, evaluate, few_shot_sample, random_guess, scenario_score, search_selection,
    select_core_experts, Contrast, Metric, ScenarioLabel, SelectionFile,
};
use ceai_core::config::KvConfig;
use ceai_core::experiments::{
    contrast_ids, fit_rag_experts, gold_document_accuracy, rag_registry, steering_experiment, SteeringConfig,
    SteeringReport, SteeringRow, DEFAULT_TRAIN_QUESTIONS, RAG_METHODS,
};
use ceai_core::moe::{write_weights, ModelConfig, MODEL_CONFIG_KEYS};
use ceai_core::ragpipe::{
    build_balanceqa, compute_metrics, outcomes_jsonl, parse_outcomes_jsonl, results_csv, run_strategy, ResultRow,
};
use ceai_core::steering::SteeringPolicy;
use ceai_core::synthworld::{
    build_contrastive_sets_for, generate_world, plant_model, PlantedModel, Scenario, World, WorldConfig,
    WORLD_CONFIG_KEYS,
};
use ceai_core::trace::{trace_file_name, TraceSet};
use ceai_core::{Error, Result};

use crate::manifest::{Manifest, TOOL};
use crate::{Cli, Command, Global};

pub enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

/// Output sink for one run: writes into the output directory and remembers
/// what it wrote for the manifest.
struct Run {
    global: Global,
    kv: KvConfig,
    config_text: Option<String>,
    outputs: Vec<String>,
}

impl Run {
    fn new(global: Global) -> Result<Self> {
        let (kv, config_text) = match &global.config {
            None => (KvConfig::default(), None),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Data(format!("cannot read config {}: {e}", path.display())))?;
                (KvConfig::parse(&text)?, Some(text))
            }
        };
        std::fs::create_dir_all(&global.out_dir)
            .map_err(|e| Error::Data(format!("cannot create {}: {e}", global.out_dir.display())))?;
        Ok(Self {
            global,
            kv,
            config_text,
            outputs: Vec::new(),
        })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.global.out_dir.join(name)
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.out(name);
        std::fs::write(&path, contents).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)? + "\n";
        self.write(name, text)
    }

    fn default_path(&self, given: &Option<PathBuf>, name: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out(name))
    }

    fn finish(self, subcommand: &str, argv: Vec<String>) -> Result<()> {
        let manifest = Manifest {
            tool: TOOL.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            argv,
            seed: self.global.seed,
            config: self.config_text,
            outputs: self.outputs,
        };
        manifest.write(&self.global.out_dir)?;
        Ok(())
    }
}

pub fn run(cli: Cli, argv: Vec<String>) -> Outcome {
    if let Command::Rerun(args) = &cli.command {
        return rerun(&args.manifest);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.jobs)
        .build()
        .map_err(|e| Failure::Usage(format!("--jobs: {e}")))?;
    pool.install(|| dispatch(cli, argv))
}

fn dispatch(cli: Cli, argv: Vec<String>) -> Outcome {
    let mut run = Run::new(cli.global)?;
    let name = match &cli.command {
        Command::GenWorld(a) => {
            gen_world(&mut run, a)?;
            "gen-world"
        }
        Command::Trace(a) => {
            trace(&mut run, a)?;
            "trace"
        }
        Command::Inspect(a) => {
            inspect(&mut run, a)?;
            "inspect"
        }
        Command::Classify(a) => {
            classify_cmd(&mut run, a)?;
            "classify"
        }
        Command::Steer(a) => {
            steer(&mut run, a)?;
            "steer"
        }
        Command::RagRun(a) => {
            rag_run(&mut run, a)?;
            "rag-run"
        }
        Command::Report(a) => {
            report(&mut run, a)?;
            "report"
        }
        Command::Rerun(_) => unreachable!("handled before dispatch"),
    };
    run.finish(name, argv)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

fn rerun(path: &Path) -> Outcome {
    let manifest = Manifest::load(path)?;
    let mut full = vec![TOOL.to_string()];
    full.extend(manifest.argv.iter().cloned());
    let cli =
        Cli::try_parse_from(&full).map_err(|e| Failure::Usage(format!("recorded arguments no longer parse: {e}")))?;
    if let Some(config) = &cli.global.config {
        let now = std::fs::read_to_string(config)
            .map_err(|e| Error::Data(format!("cannot read config {}: {e}", config.display())))?;
        if Some(&now) != manifest.config.as_ref() {
            return Err(
                Error::Validation(format!("config {} changed since the recorded run", config.display())).into(),
            );
        }
    }
    run(cli, manifest.argv)
}

#[derive(Debug, Args)]
pub struct GenWorldArgs {
    /// Model profile: `mixtral` (8 experts, top-2) or `qwen` (60+4 shared, top-4).
    #[arg(long)]
    pub profile: Option<String>,
    /// Also write the planted model's weights (`model.moe`).
    #[arg(long)]
    pub dump_weights: bool,
}

fn gen_world(run: &mut Run, args: &GenWorldArgs) -> Result<()> {
    let known: Vec<&str> = WORLD_CONFIG_KEYS
        .iter()
        .chain(MODEL_CONFIG_KEYS)
        .copied()
        .chain(["profile"])
        .collect();
    run.kv.check_known(&known)?;
    let profile = match &args.profile {
        Some(p) => p.clone(),
        None => run.kv.get_or("profile", "mixtral".to_string())?,
    };
    let seed = run.global.seed;
    let mut model = ModelConfig::profile(&profile, 1, seed)?.with_overrides(&run.kv)?;
    let world_config = WorldConfig::for_model(&model).with_overrides(&run.kv)?;
    let world = generate_world(&world_config, seed)?;
    if run.kv.get::<usize>("vocab_size")?.is_none() {
        model.vocab_size = world.vocab.size();
    }
    let planted = plant_model(&world, &model)?;

    run.write("world.json", world.to_json()?)?;
    run.write("model.cfg", model.to_kv_text())?;
    if args.dump_weights {
        let mut bytes = Vec::new();
        write_weights(&planted.model, &mut bytes)?;
        run.write("model.moe", bytes)?;
    }
    let answerable = world.questions.iter().filter(|q| q.answerable).count();
    println!(
        "world: {} questions ({answerable} answerable), vocabulary {}, model {}x{} top-{}",
        world.questions.len(),
        world.vocab.size(),
        model.num_layers,
        model.experts_per_layer,
        model.top_k
    );
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct ModelInputs {
    /// World file (default: `<out-dir>/world.json`).
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// Model config file (default: `<out-dir>/model.cfg`).
    #[arg(long)]
    pub model: Option<PathBuf>,
}

fn load_planted(run: &Run, inputs: &ModelInputs) -> Result<(World, PlantedModel)> {
    let world = World::load(&run.default_path(&inputs.world, "world.json"))?;
    let kv = KvConfig::load(&run.default_path(&inputs.model, "model.cfg"))?;
    kv.check_known(MODEL_CONFIG_KEYS)?;
    for key in MODEL_CONFIG_KEYS {
        if kv.get::<String>(key)?.is_none() {
            return Err(Error::Data(format!("model config lacks `{key}`")));
        }
    }
    let config = ModelConfig::mixtral_like(1, 0).with_overrides(&kv)?;
    let model = plant_model(&world, &config)?;
    Ok((world, model))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Eval,
    All,
}

fn split_ids(world: &World, split: Split, train_questions: usize) -> Vec<usize> {
    let (train, eval) = world.split(train_questions);
    match split {
        Split::Train => train,
        Split::Eval => eval,
        Split::All => (0..world.questions.len()).collect(),
    }
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[command(flatten)]
    pub inputs: ModelInputs,
    /// Scenarios to trace (default: all four).
    #[arg(long, value_delimiter = ',')]
    pub scenario: Vec<String>,
    #[arg(long, value_enum, default_value = "train")]
    pub split: Split,
    #[arg(long, default_value_t = DEFAULT_TRAIN_QUESTIONS)]
    pub train_questions: usize,
    /// Records per side; the cognizant contrast is balanced on knowledge.
    #[arg(long)]
    pub per_side: Option<usize>,
    #[arg(long, default_value = "synth")]
    pub dataset: String,
    /// Steering policy applied to every traced pass.
    #[arg(long)]
    pub policy: Option<PathBuf>,
}

fn trace(run: &mut Run, args: &TraceArgs) -> Result<()> {
    let (world, model) = load_planted(run, &args.inputs)?;
    let scenarios: Vec<Scenario> = if args.scenario.is_empty() {
        Scenario::ALL.to_vec()
    } else {
        args.scenario.iter().map(|s| s.parse()).collect::<Result<_>>()?
    };
    let policy = load_policy(args.policy.as_deref(), &model)?;
    let pool = split_ids(&world, args.split, args.train_questions);
    for scenario in scenarios {
        let ids = match args.per_side {
            Some(n) => contrast_ids(&world, scenario, &pool, n)?,
            None => pool.clone(),
        };
        let (pos, neg) = build_contrastive_sets_for(&world, &model, scenario, &ids, policy.as_ref())?;
        for (side, set) in [("pos", &pos), ("neg", &neg)] {
            let name = trace_file_name(&args.dataset, &format!("{}-{side}", scenario.name().replace('_', "-")));
            let mut bytes = Vec::new();
            set.write(&mut bytes)?;
            run.write(&name, bytes)?;
        }
        println!("{}: {} pos, {} neg", scenario.name(), pos.len(), neg.len());
    }
    Ok(())
}

fn load_policy(path: Option<&Path>, model: &PlantedModel) -> Result<Option<SteeringPolicy>> {
    let Some(path) = path else { return Ok(None) };
    let policy = SteeringPolicy::load(path)?;
    policy.validate_for(&model.model.config)?;
    Ok(Some(policy))
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub pos: PathBuf,
    #[arg(long)]
    pub neg: PathBuf,
    /// Fixed number of top experts; requires --bottom. Without both, the
    /// counts and score mode are searched.
    #[arg(long, requires = "bottom")]
    pub top: Option<usize>,
    #[arg(long, requires = "top")]
    pub bottom: Option<usize>,
    #[arg(long, default_value = "delta_weighted")]
    pub mode: String,
    /// Metric the search maximises: f1_positive, accuracy or macro_f1.
    #[arg(long, default_value = "f1_positive")]
    pub metric: String,
    #[arg(long, default_value_t = 20)]
    pub grid_max: usize,
    /// Fit on this many records drawn from both sides.
    #[arg(long)]
    pub shots: Option<usize>,
    /// Output file prefix.
    #[arg(long, default_value = "inspect")]
    pub name: String,
}

fn inspect(run: &mut Run, args: &InspectArgs) -> Outcome {
    let pos = TraceSet::load(&args.pos)?;
    let neg = TraceSet::load(&args.neg)?;
    let contrast = Contrast::new(&pos, &neg);
    let profile = contrast.profile()?;
    let (selection, fitted) = match (args.top, args.bottom) {
        (Some(top), Some(bottom)) => (select_core_experts(&profile, top, bottom, args.mode.parse()?)?, None),
        (None, None) => {
            let metric: Metric = args.metric.parse()?;
            let grid = default_core_grid(args.grid_max);
            let outcome = match args.shots {
                None => search_selection(contrast, &grid, metric)?,
                Some(n) => {
                    let (p, q) = few_shot_sample(contrast, n, run.global.seed)?;
                    search_selection(Contrast::new(&p, &q), &grid, metric)?
                }
            };
            println!(
                "selected top {} / bottom {} ({}), train {:?} = {:.4}",
                outcome.point.top_k_pos,
                outcome.point.bottom_k_neg,
                outcome.point.mode.name(),
                metric,
                outcome.train_metric
            );
            (outcome.selection, Some(outcome.profile))
        }
        _ => return Err(Failure::Usage("--top and --bottom must be given together".into())),
    };
    // A few-shot fit scores with its own profile; the exported CSV is always
    // the full contrast.
    let scoring = fitted.unwrap_or_else(|| profile.clone());
    run.write(&format!("{}.profile.csv", args.name), profile.to_csv())?;
    run.write_json(
        &format!("{}.selection.json", args.name),
        &SelectionFile::new(&selection, &scoring),
    )?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    /// Trace files to score; records labelled `pos` / `neg` count toward metrics.
    #[arg(long, required = true)]
    pub trace: Vec<PathBuf>,
    #[arg(long)]
    pub selection: PathBuf,
    #[arg(long, default_value = "classify")]
    pub name: String,
}

#[derive(Debug, Serialize)]
struct ClassifyMetrics {
    records: usize,
    labelled: usize,
    f1_positive: Option<f64>,
    accuracy: Option<f64>,
    macro_f1: Option<f64>,
    random_guess_f1_positive: Option<f64>,
    random_guess_accuracy: Option<f64>,
}

fn classify_cmd(run: &mut Run, args: &ClassifyArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.selection)
        .map_err(|e| Error::Data(format!("cannot read selection {}: {e}", args.selection.display())))?;
    let file: SelectionFile = serde_json::from_str(&text)?;
    let (selection, profile) = file.into_parts()?;

    let mut csv = String::from("prompt_id,label,score,prediction\n");
    let (mut predictions, mut golds) = (Vec::new(), Vec::new());
    let mut records = 0;
    for path in &args.trace {
        let set = TraceSet::load(path)?;
        for r in &set.records {
            let score = scenario_score(r, &profile, &selection)?;
            let prediction = classify(score, selection.threshold);
            let _ = writeln!(
                csv,
                "{},{},{:.6},{}",
                r.prompt_id,
                r.scenario_label.as_deref().unwrap_or(""),
                score,
                prediction.trace_label()
            );
            if let Some(gold) = ScenarioLabel::from_trace_label(r.scenario_label.as_deref()) {
                predictions.push(prediction);
                golds.push(gold);
            }
            records += 1;
        }
    }
    let metric = |m: Metric| evaluate(&predictions, &golds, m).ok();
    let guess = |m: Metric| -> Option<f64> {
        let scores: Vec<f64> = (0..5)
            .filter_map(|s| evaluate(&random_guess(golds.len(), run.global.seed + s), &golds, m).ok())
            .collect();
        (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
    };
    let metrics = ClassifyMetrics {
        records,
        labelled: golds.len(),
        f1_positive: metric(Metric::F1Positive),
        accuracy: metric(Metric::Accuracy),
        macro_f1: metric(Metric::MacroF1),
        random_guess_f1_positive: guess(Metric::F1Positive),
        random_guess_accuracy: guess(Metric::Accuracy),
    };
    if let (Some(f1), Some(acc)) = (metrics.f1_positive, metrics.accuracy) {
        println!("{} labelled records: f1 {f1:.4}, accuracy {acc:.4}", metrics.labelled);
    }
    run.write(&format!("{}.predictions.csv", args.name), csv)?;
    run.write_json(&format!("{}.metrics.json", args.name), &metrics)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct SteerArgs {
    #[command(flatten)]
    pub inputs: ModelInputs,
    /// Evaluate only this policy against no adjustment.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TRAIN_QUESTIONS)]
    pub train_questions: usize,
    /// Steering set sizes to search (default scales with the model).
    #[arg(long, value_delimiter = ',')]
    pub grid: Vec<usize>,
}

fn steer(run: &mut Run, args: &SteerArgs) -> Result<()> {
    let (world, model) = load_planted(run, &args.inputs)?;
    let (train, eval) = world.split(args.train_questions);
    if let Some(policy) = load_policy(args.policy.as_deref(), &model)? {
        let rows = vec![
            SteeringRow {
                adjustment: "none".into(),
                experts: "none".into(),
                size: 0,
                accuracy: gold_document_accuracy(&world, &model, &eval, None)?,
            },
            SteeringRow {
                adjustment: "policy".into(),
                experts: "file".into(),
                size: policy.enhance.len() + policy.inhibit.len(),
                accuracy: gold_document_accuracy(&world, &model, &eval, Some(&policy))?,
            },
        ];
        let report = SteeringReport {
            rows,
            enhancement: policy.clone(),
            inhibition: SteeringPolicy::default(),
            general: BTreeSet::new(),
        };
        print!("{}", report.to_csv());
        run.write("steering.csv", report.to_csv())?;
        return Ok(());
    }
    let mut cfg = SteeringConfig::for_model(&model, run.global.seed);
    if !args.grid.is_empty() {
        cfg.grid = args.grid.clone();
    }
    let report = steering_experiment(&world, &model, &train, &eval, &cfg)?;
    print!("{}", report.to_csv());
    run.write("steering.csv", report.to_csv())?;
    run.write("steering.enhancement.json", report.enhancement.to_json() + "\n")?;
    run.write("steering.inhibition.json", report.inhibition.to_json() + "\n")?;
    run.write_json("steering.general.json", &report.general)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct RagRunArgs {
    #[command(flatten)]
    pub inputs: ModelInputs,
    /// Strategies to run, by registered name.
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<String>,
    /// Balanced set size (multiple of 4).
    #[arg(long, default_value_t = 400)]
    pub size: usize,
    #[arg(long, default_value = "balanceqa")]
    pub dataset: String,
    #[arg(long, default_value_t = DEFAULT_TRAIN_QUESTIONS)]
    pub train_questions: usize,
}

fn rag_run(run: &mut Run, args: &RagRunArgs) -> Result<()> {
    let (world, model) = load_planted(run, &args.inputs)?;
    let (train, eval) = world.split(args.train_questions);
    let experts = fit_rag_experts(&world, &model, &train)?;
    let registry = rag_registry(&experts, run.global.seed);
    let names: Vec<&str> = if args.methods.is_empty() {
        RAG_METHODS.to_vec()
    } else {
        args.methods.iter().map(String::as_str).collect()
    };
    let strategies = registry.select(&names)?;
    let instances = build_balanceqa(&world, &model, &eval, args.size, run.global.seed)?;

    let mut rows = Vec::new();
    for strategy in strategies {
        let outcomes = run_strategy(strategy, &instances, &model)?;
        run.write(
            &format!("{}.{}.outcomes.jsonl", args.dataset, strategy.name()),
            outcomes_jsonl(&outcomes)?,
        )?;
        rows.push(ResultRow {
            dataset: args.dataset.clone(),
            method: strategy.name().to_string(),
            report: compute_metrics(&outcomes)?,
        });
    }
    let table = results_csv(&rows);
    print!("{table}");
    run.write(&format!("{}.results.csv", args.dataset), table)?;
    run.write_json(
        &format!("{}.cognizant.selection.json", args.dataset),
        &SelectionFile::new(&experts.cognizant.selection, &experts.cognizant.profile),
    )?;
    run.write_json(
        &format!("{}.quality.selection.json", args.dataset),
        &SelectionFile::new(&experts.quality.selection, &experts.quality.profile),
    )?;
    run.write(
        &format!("{}.incontext.policy.json", args.dataset),
        experts.incontext.to_json() + "\n",
    )?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Files named `<dataset>.<method>.outcomes.jsonl`.
    #[arg(long, required = true)]
    pub outcomes: Vec<PathBuf>,
    #[arg(long, default_value = "report.csv")]
    pub output: String,
}

fn report(run: &mut Run, args: &ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for path in &args.outcomes {
        let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let stem = file_name.strip_suffix(".outcomes.jsonl").ok_or_else(|| {
            Error::Data(format!(
                "{}: expected a `<dataset>.<method>.outcomes.jsonl` file",
                path.display()
            ))
        })?;
        let (dataset, method) = stem
            .split_once('.')
            .ok_or_else(|| Error::Data(format!("{}: file name lacks a dataset prefix", path.display())))?;
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read outcomes {}: {e}", path.display())))?;
        let outcomes = parse_outcomes_jsonl(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        rows.push(ResultRow {
            dataset: dataset.to_string(),
            method: method.to_string(),
            report: compute_metrics(&outcomes)?,
        });
    }
    let table = results_csv(&rows);
    print!("{table}");
    run.write(&args.output, table)?;
    Ok(())
}
