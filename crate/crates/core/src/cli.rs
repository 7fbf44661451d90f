//! Command-line front end. Every command resolves a JSON config (file
//! values, then flag overrides), echoes it as `config.json` next to its
//! outputs and exits with 0 on success, 1 on usage errors, 2 on data or
//! configuration errors and 3 on numeric failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{
    load_folds, plan_folds, save_folds, test_records, training_records, Dataset, FoldPlan, GeneratorConfig,
    DEFAULT_SCALE, FOUR_CHANNEL_PROFILES, GENERATOR_FILE, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::evaluation::{compare_scenarios, evaluate_fold, load_report, merge_reports, save_report, Scenario};
use crate::gradcheck_suite::{composite_case, primitive_cases, render, run_cases, DEFAULT_EPSILON, DEFAULT_TOLERANCE};
use crate::network::{Checkpoint, ModelConfig};
use crate::sampling::{load_manifest, DiskSource, SliceSource};
use crate::seed;
use crate::task::Task;
use crate::train::{Mode, TrainConfig, Trainer};

pub const CONFIG_FILE: &str = "config.json";
pub const FOLDS_FILE: &str = "folds.json";

#[derive(Debug, Parser)]
#[command(
    name = "mixsup",
    version,
    about = "Segmentation training with mixed pixel-level and image-level supervision"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-channel volume dataset.
    GenData(GenDataArgs),
    /// Plan circular cross-validation folds.
    Folds(FoldsArgs),
    /// Train a model on one fold in standard or mixed mode.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test volumes of one fold.
    Eval(EvalArgs),
    /// Finite-difference check of every tape operation and the joint loss.
    Gradcheck(GradcheckArgs),
    /// Merge fold reports and tabulate standard against mixed Dice.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config; flags override its values.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// Root seed; the generator seed is derived from it.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub volumes: Option<usize>,
    #[arg(long)]
    pub tumor_fraction: Option<f64>,
    /// 2 (T1c-like, FLAIR-like) or 4 channels.
    #[arg(long)]
    pub channels: Option<usize>,
    /// Slices per volume.
    #[arg(long)]
    pub depth: Option<usize>,
    /// In-plane size (square).
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FoldsArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory; supplies the volume count.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub volumes: Option<usize>,
    /// Test volumes per fold (T).
    #[arg(long)]
    pub num_test: Option<usize>,
    /// Fully annotated training volumes per fold (F).
    #[arg(long)]
    pub num_fa: Option<usize>,
    #[arg(long)]
    pub num_folds: Option<usize>,
    /// Root seed for the volume permutation.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Cut folds from the identity order instead of a seeded permutation.
    #[arg(long)]
    pub identity: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub folds: Option<PathBuf>,
    /// 1-based fold id.
    #[arg(long)]
    pub fold: Option<usize>,
    /// standard or mixed.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    /// whole-tumor, tumor-core, enhancing-core or multiclass.
    #[arg(long, value_parser = parse_task)]
    pub task: Option<Task>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Root seed for initialisation and sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Batches averaged per parameter update.
    #[arg(long)]
    pub batches: Option<usize>,
    /// Fully annotated tumor slices per batch.
    #[arg(long)]
    pub k: Option<usize>,
    /// Negative slices per batch.
    #[arg(long)]
    pub m: Option<usize>,
    /// Weakly annotated tumor slices per batch.
    #[arg(long)]
    pub n: Option<usize>,
    /// Weight of the segmentation loss in the joint loss.
    #[arg(long)]
    pub a: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub keep_checkpoints: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub folds: Option<PathBuf>,
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Defaults to the task recorded next to the checkpoint.
    #[arg(long, value_parser = parse_task)]
    pub task: Option<Task>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Optional directory for `gradcheck.txt` and `config.json`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: Common,
    /// Scenario label for the reports given on the command line.
    #[arg(long, default_value = "scenario")]
    pub name: String,
    /// Standard-mode fold reports.
    #[arg(long, num_args = 1.., value_name = "FILE")]
    pub standard: Vec<PathBuf>,
    /// Mixed-mode fold reports, same folds.
    #[arg(long, num_args = 1.., value_name = "FILE")]
    pub mixed: Vec<PathBuf>,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    Mode::parse(s).map_err(|e| e.to_string())
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    Task::parse(s).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenDataConfig {
    pub seed: u64,
    /// Target of the non-zero median after normalization.
    pub scale: f64,
    pub generator: GeneratorConfig,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            seed: 0,
            scale: DEFAULT_SCALE,
            generator: GeneratorConfig::toy(20, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FoldsConfig {
    pub seed: u64,
    pub num_volumes: usize,
    pub num_test: usize,
    pub num_fa: usize,
    pub num_folds: usize,
    pub permute: bool,
}

impl Default for FoldsConfig {
    fn default() -> Self {
        FoldsConfig {
            seed: 0,
            num_volumes: 0,
            num_test: 4,
            num_fa: 4,
            num_folds: 5,
            permute: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRunConfig {
    pub data: Option<PathBuf>,
    pub folds: Option<PathBuf>,
    pub fold: Option<usize>,
    /// Filled from the dataset geometry when absent.
    pub train: Option<TrainConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub data: Option<PathBuf>,
    pub folds: Option<PathBuf>,
    pub fold: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub task: Option<Task>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub tolerance: f64,
    pub epsilon: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 1,
            tolerance: DEFAULT_TOLERANCE,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFiles {
    pub name: String,
    pub standard: Vec<PathBuf>,
    pub mixed: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareConfig {
    pub scenarios: Vec<ScenarioFiles>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Folds(a) => folds(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Compare(a) => compare(a),
    }
}

fn load_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    match path {
        None => Ok(C::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn echo_config<C: Serialize>(dir: &Path, config: &C) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut text = serde_json::to_string_pretty(config)?;
    text.push('\n');
    write_text(&dir.join(CONFIG_FILE), &text)
}

fn required<T: Clone>(value: &Option<T>, what: &str) -> Result<T> {
    value
        .clone()
        .ok_or_else(|| Error::config(format!("missing {what} (flag or config field)")))
}

fn read_generator(data: &Path) -> Result<GeneratorConfig> {
    let path = data.join(GENERATOR_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn find_fold(path: &Path, fold: usize) -> Result<FoldPlan> {
    load_folds(path)?
        .into_iter()
        .find(|f| f.fold_id == fold)
        .ok_or_else(|| Error::config(format!("fold {fold} not in {}", path.display())))
}

pub fn resolve_gen_data(args: &GenDataArgs) -> Result<GenDataConfig> {
    let mut c: GenDataConfig = load_config(args.common.config.as_deref())?;
    let g = &mut c.generator;
    if let Some(s) = args.seed {
        c.seed = s;
    }
    if let Some(v) = args.volumes {
        g.num_volumes = v;
    }
    if let Some(f) = args.tumor_fraction {
        g.tumor_fraction = f;
    }
    if let Some(ch) = args.channels {
        g.channels = ch;
        g.profiles = match ch {
            2 => vec![FOUR_CHANNEL_PROFILES[1], FOUR_CHANNEL_PROFILES[3]],
            4 => FOUR_CHANNEL_PROFILES.to_vec(),
            other => return Err(Error::config(format!("--channels must be 2 or 4, got {other}"))),
        };
    }
    if let Some(d) = args.depth {
        g.depth = d;
    }
    if let Some(s) = args.size {
        g.height = s;
        g.width = s;
    }
    if let Some(n) = args.noise {
        g.noise_sigma = n;
    }
    g.seed = seed::derive(c.seed, seed::DATA);
    Ok(c)
}

fn gen_data(args: GenDataArgs) -> Result<i32> {
    let c = resolve_gen_data(&args)?;
    let dataset = Dataset::generate(&c.generator, c.scale)?;
    let out = &args.common.out;
    dataset.write(out)?;
    echo_config(out, &c)?;
    let s = dataset.summary();
    println!(
        "volumes {} tumor_volumes {} negative_volumes {} tumor_slices {} negative_slices {}",
        s.volumes, s.tumor_volumes, s.negative_volumes, s.tumor_slices, s.negative_slices
    );
    Ok(0)
}

pub fn resolve_folds(args: &FoldsArgs) -> Result<FoldsConfig> {
    let mut c: FoldsConfig = load_config(args.common.config.as_deref())?;
    if let Some(d) = &args.data {
        c.num_volumes = read_generator(d)?.num_volumes;
    }
    if let Some(v) = args.volumes {
        c.num_volumes = v;
    }
    if let Some(t) = args.num_test {
        c.num_test = t;
    }
    if let Some(f) = args.num_fa {
        c.num_fa = f;
    }
    if let Some(k) = args.num_folds {
        c.num_folds = k;
    }
    if let Some(s) = args.seed {
        c.seed = s;
    }
    if args.identity {
        c.permute = false;
    }
    Ok(c)
}

fn folds(args: FoldsArgs) -> Result<i32> {
    let c = resolve_folds(&args)?;
    let plans = plan_folds(
        c.num_volumes,
        c.num_test,
        c.num_fa,
        c.num_folds,
        c.permute.then_some(c.seed),
    )?;
    let out = &args.common.out;
    echo_config(out, &c)?;
    save_folds(&out.join(FOLDS_FILE), &plans)?;
    for p in &plans {
        println!(
            "fold {} test {} fa {} wa {}",
            p.fold_id,
            p.test_ids.len(),
            p.fa_ids.len(),
            p.wa_ids.len()
        );
    }
    Ok(0)
}

/// Points a train config at a new task, keeping the architecture.
fn retask(t: &mut TrainConfig, task: Task) {
    if t.task != task {
        t.task = task;
        t.model.num_classes = task.num_classes();
        t.model.num_branches = ModelConfig::branches_for(task.num_classes());
        t.loss = task.default_loss();
    }
}

pub fn resolve_train(args: &TrainArgs) -> Result<TrainRunConfig> {
    let mut c: TrainRunConfig = load_config(args.common.config.as_deref())?;
    if args.data.is_some() {
        c.data = args.data.clone();
    }
    if args.folds.is_some() {
        c.folds = args.folds.clone();
    }
    if args.fold.is_some() {
        c.fold = args.fold;
    }
    c.fold.get_or_insert(1);
    let data = required(&c.data, "data directory")?;
    let mut t = match c.train.take() {
        Some(t) => t,
        None => {
            let g = read_generator(&data)?;
            let task = args.task.unwrap_or(Task::WholeTumor);
            let mut t = TrainConfig::toy(task, Mode::Mixed, 0);
            t.model = ModelConfig::toy(g.channels, g.height, task.num_classes());
            t.model.input_size = (g.height, g.width);
            t
        }
    };
    if let Some(task) = args.task {
        retask(&mut t, task);
    }
    if let Some(m) = args.mode {
        t.mode = m;
    }
    if let Some(i) = args.iterations {
        t.iterations = i;
    }
    if let Some(s) = args.seed {
        t.seed = s;
    }
    if let Some(lr) = args.lr {
        t.optimizer.learning_rate = lr;
    }
    if let Some(mu) = args.momentum {
        t.optimizer.momentum = mu;
    }
    if let Some(b) = args.batches {
        t.optimizer.batches_per_iteration = b;
    }
    if let Some(k) = args.k {
        t.composition.k = k;
    }
    if let Some(m) = args.m {
        t.composition.m = m;
    }
    if let Some(n) = args.n {
        t.composition.n = n;
    }
    if let Some(a) = args.a {
        t.loss.a = a;
    }
    if let Some(e) = args.checkpoint_every {
        t.checkpoint_every = e;
    }
    if let Some(k) = args.keep_checkpoints {
        t.keep_checkpoints = k;
    }
    t.validate()?;
    c.train = Some(t);
    Ok(c)
}

fn train(args: TrainArgs) -> Result<i32> {
    let c = resolve_train(&args)?;
    let data = required(&c.data, "data directory")?;
    let folds_path = required(&c.folds, "fold plan")?;
    let fold = find_fold(&folds_path, c.fold.unwrap_or(1))?;
    let t = c.train.clone().expect("resolved");
    let out = &args.common.out;
    echo_config(out, &c)?;
    let records = load_manifest(&data.join(MANIFEST_FILE))?;
    let source = DiskSource::new(&data);
    let records = training_records(&records, &fold, t.mode == Mode::Mixed);
    let mut trainer = Trainer::new(t, records, &source)?.with_output(out)?;
    trainer.run()?;
    trainer.save_final()?;
    let reads = source.reads();
    let last = trainer.log().last().map(|r| r.total).unwrap_or(f64::NAN);
    println!(
        "iterations {} final_loss {last:.6} reads_full {} reads_negative {} reads_weak {}",
        trainer.iteration(),
        reads.full,
        reads.negative,
        reads.weak
    );
    Ok(0)
}

/// The task recorded in a training run's echoed config, if any.
fn task_next_to(checkpoint: &Path) -> Option<Task> {
    let path = checkpoint.parent()?.join(CONFIG_FILE);
    let text = std::fs::read_to_string(path).ok()?;
    let run: TrainRunConfig = serde_json::from_str(&text).ok()?;
    run.train.map(|t| t.task)
}

pub fn resolve_eval(args: &EvalArgs) -> Result<EvalConfig> {
    let mut c: EvalConfig = load_config(args.common.config.as_deref())?;
    if args.data.is_some() {
        c.data = args.data.clone();
    }
    if args.folds.is_some() {
        c.folds = args.folds.clone();
    }
    if args.fold.is_some() {
        c.fold = args.fold;
    }
    if args.checkpoint.is_some() {
        c.checkpoint = args.checkpoint.clone();
    }
    if args.task.is_some() {
        c.task = args.task;
    }
    c.fold.get_or_insert(1);
    let ck = required(&c.checkpoint, "checkpoint")?;
    if c.task.is_none() {
        c.task = task_next_to(&ck);
    }
    Ok(c)
}

fn eval(args: EvalArgs) -> Result<i32> {
    let c = resolve_eval(&args)?;
    let data = required(&c.data, "data directory")?;
    let fold = find_fold(&required(&c.folds, "fold plan")?, c.fold.unwrap_or(1))?;
    let model = Checkpoint::load(&required(&c.checkpoint, "checkpoint")?)?.model()?;
    let task = match c.task {
        Some(t) => t,
        None if model.config().num_classes == 2 => Task::WholeTumor,
        None => Task::Multiclass,
    };
    let out = &args.common.out;
    echo_config(out, &EvalConfig { task: Some(task), ..c })?;
    let records = test_records(&load_manifest(&data.join(MANIFEST_FILE))?, &fold);
    let source = DiskSource::new(&data);
    let report = evaluate_fold(&model, fold.fold_id, &records, &source, task)?;
    save_report(&out.join("report.json"), &report)?;
    write_text(&out.join("report.csv"), &report.to_csv()?)?;
    let text = report.to_text();
    write_text(&out.join("report.txt"), &text)?;
    print!("{text}");
    if report.has_nan() {
        eprintln!("error: NaN in Dice report");
        return Ok(3);
    }
    Ok(0)
}

fn gradcheck(args: GradcheckArgs) -> Result<i32> {
    let mut c: GradcheckConfig = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        c.seed = s;
    }
    if let Some(t) = args.tolerance {
        c.tolerance = t;
    }
    if let Some(e) = args.epsilon {
        c.epsilon = e;
    }
    let mut cases = primitive_cases(c.seed);
    cases.push(composite_case(2, c.seed)?);
    cases.push(composite_case(4, c.seed)?);
    let entries = run_cases(&cases, c.epsilon, c.tolerance);
    let text = render(&entries);
    if let Some(out) = &args.out {
        echo_config(out, &c)?;
        write_text(&out.join("gradcheck.txt"), &text)?;
    }
    print!("{text}");
    Ok(if entries.iter().all(|e| e.report.pass) { 0 } else { 3 })
}

pub fn resolve_compare(args: &CompareArgs) -> Result<CompareConfig> {
    let mut c: CompareConfig = load_config(args.common.config.as_deref())?;
    if !args.standard.is_empty() || !args.mixed.is_empty() {
        c.scenarios.push(ScenarioFiles {
            name: args.name.clone(),
            standard: args.standard.clone(),
            mixed: args.mixed.clone(),
        });
    }
    if c.scenarios.is_empty() {
        return Err(Error::config("no reports to compare"));
    }
    Ok(c)
}

fn merged(paths: &[PathBuf]) -> Result<crate::evaluation::DiceReport> {
    let reports = paths.iter().map(|p| load_report(p)).collect::<Result<Vec<_>>>()?;
    merge_reports(&reports)
}

fn compare(args: CompareArgs) -> Result<i32> {
    let c = resolve_compare(&args)?;
    let scenarios = c
        .scenarios
        .iter()
        .map(|s| {
            Ok(Scenario {
                name: s.name.clone(),
                standard: merged(&s.standard)?,
                mixed: merged(&s.mixed)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let cmp = compare_scenarios(&scenarios)?;
    let out = &args.common.out;
    echo_config(out, &c)?;
    let text = cmp.to_text();
    write_text(&out.join("comparison.txt"), &text)?;
    write_text(&out.join("comparison.csv"), &cmp.to_csv()?)?;
    print!("{text}");
    if cmp.has_nan() {
        eprintln!("error: NaN in comparison");
        return Ok(3);
    }
    Ok(0)
}
