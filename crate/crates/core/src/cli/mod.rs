//! Command-line front end. Every command writes its outputs plus a
//! `manifest.json` into `--out`.

pub mod goldens;
mod manifest;
mod train_config;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use serde_json::json;

use crate::archspec::{cost_report, expand, ArchSpec, FlopConvention};
use crate::cotrain::{gradcheck, save_checkpoints, train, Precision, TrainOutcome};
use crate::datagen::{self, read_csv, read_raw, stream_rng, write_csv, write_raw, Dataset, Split};
use crate::divider::{divide_arch, WdKind, WdPolicy};
use crate::ensemble::{accuracy, combine, Combine, EnsembleRule};
use crate::numerics::{load_checkpoint, CheckpointMeta, MemberModel, Tensor};
use crate::parallel::{bench, Mode};
use crate::{Error, Result, Scalar};

pub use manifest::RunManifest;
pub use train_config::{DataSource, TrainRun};

pub const SEED_ENV: &str = "SPLITNET_SEED";

#[derive(Parser, Debug)]
#[command(name = "splitnet", version, about = "Divide one network into S members and co-train them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parameter and FLOP counts of an architecture.
    Cost(CostArgs),
    /// Split an architecture into S member specs.
    Divide(DivideArgs),
    /// Generate a toy dataset.
    Datagen(DatagenArgs),
    /// Co-train S members.
    Train(TrainArgs),
    /// Evaluate saved members and their ensemble.
    Eval(EvalArgs),
    /// Time sequential vs. concurrent member inference.
    Bench(BenchArgs),
    /// Compare analytic and finite-difference gradients of the joint loss.
    Gradcheck(GradcheckArgs),
    /// Check the published reference tables.
    Goldens(OutArgs),
}

#[derive(Args, Debug)]
struct OutArgs {
    /// Output directory.
    #[arg(long, default_value = "splitnet-out")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    #[value(name = "wrn-16-8")]
    Wrn16x8,
    #[value(name = "wrn-28-10")]
    Wrn28x10,
    #[value(name = "wrn-40-10")]
    Wrn40x10,
    #[value(name = "resnet-164")]
    Resnet164,
    #[value(name = "resnext-29-8x64d")]
    Resnext29,
}

impl Preset {
    fn spec(self) -> ArchSpec {
        match self {
            Preset::Wrn16x8 => ArchSpec::wrn(16, 8.0, 100),
            Preset::Wrn28x10 => ArchSpec::wrn(28, 10.0, 100),
            Preset::Wrn40x10 => ArchSpec::wrn(40, 10.0, 100),
            Preset::Resnet164 => ArchSpec::resnet_cifar(164, 100),
            Preset::Resnext29 => ArchSpec::resnext(29, 8, 64, 100),
        }
    }
}

#[derive(Args, Debug)]
struct CostArgs {
    /// ArchSpec JSON file.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// `mac` counts one multiply-accumulate as one FLOP; `eq3` counts the
    /// multiply and the add separately.
    #[arg(long, default_value = "mac")]
    convention: String,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct DivideArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    s: u32,
    #[arg(long = "wd-policy", default_value = "none")]
    wd_policy: String,
    /// Weight decay of the undivided network.
    #[arg(long, default_value_t = 5e-4)]
    wd: f64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum DataKind {
    Spirals,
    Blobs,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum DataFormat {
    Csv,
    Raw,
}

#[derive(Args, Debug)]
struct DatagenArgs {
    #[arg(long, value_enum)]
    kind: DataKind,
    /// Falls back to $SPLITNET_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 5000)]
    n: usize,
    #[arg(long = "n-train", default_value_t = 4000)]
    n_train: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 0.15)]
    noise: f64,
    /// Feature dimension (blobs only).
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, value_enum, default_value = "csv")]
    format: DataFormat,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON or TOML run configuration, or a manifest written by an earlier
    /// `train`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    s: Option<u32>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "lambda-cot")]
    lambda_cot: Option<f64>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long)]
    concurrent: bool,
    #[arg(long, value_parser = ["f32", "f64"])]
    precision: Option<String>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EnsembleArg {
    Avg,
    Max,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SoftmaxArg {
    Pre,
    None,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long = "ckpt-dir")]
    ckpt_dir: PathBuf,
    /// Test set: a CSV file or a raw-tensor JSON sidecar.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "avg")]
    ensemble: EnsembleArg,
    #[arg(long, value_enum, default_value = "none")]
    softmax: SoftmaxArg,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long = "ckpt-dir")]
    ckpt_dir: PathBuf,
    /// `seq` or `par`.
    #[arg(long, default_value = "par")]
    mode: String,
    #[arg(long, default_value_t = 100)]
    batch: usize,
    #[arg(long, default_value_t = 2)]
    workers: usize,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 3)]
    members: usize,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[command(flatten)]
    out: OutArgs,
}

/// Runs one command. Returns 0 on success, 1 for bad input or usage, 2 for
/// internal failures.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("splitnet: {e}");
            if e.is_user_error() {
                1
            } else {
                2
            }
        }
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::validation(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    Ok(flag.or(env_seed()?).unwrap_or(0))
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Cost(a) => cmd_cost(a),
        Command::Divide(a) => cmd_divide(a),
        Command::Datagen(a) => cmd_datagen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Goldens(a) => cmd_goldens(a),
    }
}

fn cmd_cost(a: CostArgs) -> Result<i32> {
    let mut m = RunManifest::start("cost");
    let spec = match (&a.spec, a.preset) {
        (Some(path), _) => {
            m.add_input(path)?;
            ArchSpec::from_json(&read_text(path)?)?
        }
        (None, Some(p)) => p.spec(),
        (None, None) => return Err(Error::validation("pass --spec or --preset")),
    };
    let convention: FlopConvention = a.convention.parse()?;
    let layers = expand(&spec)?;
    let report = cost_report(&spec, convention)?;
    prepare_out(&a.out.out)?;
    let table = report.to_table(&layers);
    let json_path = a.out.out.join("cost.json");
    write(&json_path, serde_json::to_string_pretty(&report)?)?;
    let table_path = a.out.out.join("cost.txt");
    write(&table_path, &table)?;
    print!("{table}");
    m.config = json!({ "spec": spec, "convention": convention });
    m.finish(&a.out.out, &[json_path, table_path])?;
    Ok(0)
}

fn cmd_divide(a: DivideArgs) -> Result<i32> {
    let mut m = RunManifest::start("divide");
    m.add_input(&a.spec)?;
    let spec = ArchSpec::from_json(&read_text(&a.spec)?)?;
    let kind: WdKind = a.wd_policy.parse()?;
    let policy = WdPolicy::new(kind, a.wd)?;
    let plan = divide_arch(&spec, a.s, &policy)?;
    prepare_out(&a.out.out)?;
    let mut outputs = Vec::new();
    for (i, member) in plan.members.iter().enumerate() {
        let p = a.out.out.join(format!("member_{i}.json"));
        write(&p, member.to_json())?;
        outputs.push(p);
    }
    let plan_path = a.out.out.join("plan.json");
    write(&plan_path, plan.to_json())?;
    outputs.push(plan_path);
    println!(
        "divided {} into {} members; adjusted wd = {}",
        spec.name, a.s, plan.adjusted_wd
    );
    m.config = json!({ "spec": spec, "s": a.s, "wd_policy": kind, "wd": a.wd });
    m.finish(&a.out.out, &outputs)?;
    Ok(0)
}

fn cmd_datagen(a: DatagenArgs) -> Result<i32> {
    let mut m = RunManifest::start("datagen");
    let seed = resolve_seed(a.seed)?;
    m.base_seed = Some(seed);
    if a.n_train >= a.n {
        return Err(Error::validation(format!("--n-train {} must be below --n {}", a.n_train, a.n)));
    }
    let data = match a.kind {
        DataKind::Spirals => datagen::spirals(a.n, a.classes, a.noise, seed)?,
        DataKind::Blobs => datagen::make_blobs(a.n, a.classes, a.dim, a.noise, seed)?,
    };
    let (train_set, test_set) = data.split_at(a.n_train)?;
    prepare_out(&a.out.out)?;
    let outputs = match a.format {
        DataFormat::Csv => {
            let (tr, te) = (a.out.out.join("train.csv"), a.out.out.join("test.csv"));
            write_csv(&tr, &train_set)?;
            write_csv(&te, &test_set)?;
            vec![tr, te]
        }
        DataFormat::Raw => vec![
            write_raw(&a.out.out, "train", &train_set)?,
            write_raw(&a.out.out, "test", &test_set)?,
        ],
    };
    println!("wrote {} train and {} test samples", train_set.len(), test_set.len());
    m.config = json!({
        "kind": a.kind, "seed": seed, "n": a.n, "n_train": a.n_train, "classes": a.classes,
        "noise": a.noise, "dim": a.dim, "format": a.format,
    });
    m.finish(&a.out.out, &outputs)?;
    Ok(0)
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let mut m = RunManifest::start("train");
    let mut run = match &a.config {
        Some(path) => {
            m.add_input(path)?;
            TrainRun::from_file(path)?
        }
        None => TrainRun::default(),
    };
    // flags override the file; the environment only fills a missing seed
    if let Some(seed) = a.seed {
        run.train.base_seed = seed;
    } else if !run.seed_given {
        if let Some(seed) = env_seed()? {
            run.train.base_seed = seed;
        }
    }
    if let Some(s) = a.s {
        run.train.s = s;
    }
    if let Some(e) = a.epochs {
        run.train.max_epoch = e;
        run.train.slow_epoch = run.train.slow_epoch.min(e.saturating_sub(1));
        run.train.cot_warm_epochs = run.train.cot_warm_epochs.min(e);
    }
    if let Some(l) = a.lambda_cot {
        run.train.lambda_cot = l;
    }
    if let Some(b) = a.batch_size {
        run.train.batch_size = b;
    }
    if a.concurrent {
        run.train.concurrent_members = true;
    }
    if let Some(p) = &a.precision {
        run.train.precision = if p == "f32" { Precision::F32 } else { Precision::F64 };
    }
    let resolved = run.resolve()?;
    for p in run.data.input_files() {
        m.add_input(&p)?;
    }
    prepare_out(&a.out.out)?;
    let outputs = match run.train.precision {
        Precision::F32 => train_and_save::<f32>(&resolved, &a.out.out)?,
        Precision::F64 => train_and_save::<f64>(&resolved, &a.out.out)?,
    };
    m.base_seed = Some(run.train.base_seed);
    m.config = run.snapshot()?;
    m.finish(&a.out.out, &outputs)?;
    Ok(0)
}

fn train_and_save<T: Scalar>(r: &train_config::Resolved, out: &Path) -> Result<Vec<PathBuf>> {
    let TrainOutcome { mut record, models } = train::<T>(&r.config, &r.members, &r.views, &r.train_set, &r.test_set)?;
    record.checkpoint_paths = save_checkpoints(out, &models, &r.members, r.config.max_epoch)?;
    let metrics = out.join("metrics.csv");
    write(&metrics, record.to_csv())?;
    if let Some(last) = record.last() {
        let accs: Vec<String> = last.acc.iter().map(|a| format!("{:.4}", a)).collect();
        println!(
            "epoch {}: member acc [{}], ensemble acc {:.4}",
            last.epoch + 1,
            accs.join(", "),
            last.acc_ensemble
        );
    }
    let mut outputs = vec![metrics];
    outputs.extend(record.checkpoint_paths);
    Ok(outputs)
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => read_raw(path),
        _ => read_csv(path, None, Split::Test),
    }
}

/// Loads every `*.ckpt` in `dir`, ordered by member index.
pub fn load_members(dir: &Path) -> Result<Vec<(CheckpointMeta, MemberModel<f64>)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    paths.sort();
    let mut members = paths.iter().map(|p| load_checkpoint::<f64>(p)).collect::<Result<Vec<_>>>()?;
    if members.is_empty() {
        return Err(Error::validation(format!("no .ckpt files in {}", dir.display())));
    }
    members.sort_by_key(|(meta, _)| meta.member_index);
    Ok(members)
}

#[derive(Serialize)]
struct EvalReport {
    rule: EnsembleRule,
    samples: usize,
    members: Vec<(usize, f64)>,
    ensemble: f64,
}

fn cmd_eval(a: EvalArgs) -> Result<i32> {
    let mut m = RunManifest::start("eval");
    let members = load_members(&a.ckpt_dir)?;
    for p in fs::read_dir(&a.ckpt_dir).map_err(|e| Error::io(&a.ckpt_dir, e))?.flatten() {
        if p.path().extension().is_some_and(|x| x == "ckpt") {
            m.add_input(&p.path())?;
        }
    }
    m.add_input(&a.data)?;
    let data = read_dataset(&a.data)?;
    let rule = EnsembleRule {
        combine: match a.ensemble {
            EnsembleArg::Avg => Combine::Average,
            EnsembleArg::Max => Combine::MaxConfidence,
        },
        apply_softmax_first: matches!(a.softmax, SoftmaxArg::Pre),
    };
    let x: Tensor<f64> = data.features.clone();
    let outs = members.iter().map(|(_, model)| model.infer(&x)).collect::<Result<Vec<_>>>()?;
    let combined = combine(rule, &outs)?;
    let report = EvalReport {
        rule,
        samples: data.len(),
        members: members
            .iter()
            .zip(&outs)
            .map(|((meta, _), o)| (meta.member_index, accuracy(&o.argmax_rows(), &data.labels)))
            .collect(),
        ensemble: accuracy(&combined.predictions, &data.labels),
    };
    println!("{:<10} {:>9}", "member", "accuracy");
    for (i, acc) in &report.members {
        println!("{i:<10} {acc:>9.4}");
    }
    println!("{:<10} {:>9.4}", "ensemble", report.ensemble);
    let json_text = serde_json::to_string_pretty(&report)?;
    println!("{json_text}");
    prepare_out(&a.out.out)?;
    let path = a.out.out.join("eval.json");
    write(&path, &json_text)?;
    m.config = json!({ "ckpt_dir": a.ckpt_dir, "data": a.data, "rule": rule });
    m.finish(&a.out.out, &[path])?;
    Ok(0)
}

fn cmd_bench(a: BenchArgs) -> Result<i32> {
    let mut m = RunManifest::start("bench");
    let mode: Mode = a.mode.parse()?;
    let seed = resolve_seed(a.seed)?;
    let members: Vec<MemberModel<f64>> = load_members(&a.ckpt_dir)?.into_iter().map(|(_, model)| model).collect();
    let shape = members[0].input_shape().to_vec();
    if members.iter().any(|mm| mm.input_shape() != shape.as_slice()) {
        return Err(Error::validation("members disagree on input shape"));
    }
    let per: usize = shape.iter().product();
    let mut rng = stream_rng(&[seed, 0xbe]);
    let mut dims = vec![a.batch];
    dims.extend(&shape);
    let x = Tensor::new(dims, (0..a.batch * per).map(|_| rng.sample(StandardNormal)).collect())?;
    let out = bench(&members, &x, mode, a.workers, a.reps, EnsembleRule::default())?;
    let text = serde_json::to_string_pretty(&out.report)?;
    println!("{text}");
    prepare_out(&a.out.out)?;
    let path = a.out.out.join("bench.json");
    write(&path, &text)?;
    m.base_seed = Some(seed);
    m.config = json!({
        "ckpt_dir": a.ckpt_dir, "mode": mode, "batch": a.batch, "workers": a.workers, "reps": a.reps,
    });
    m.finish(&a.out.out, &[path])?;
    if !out.report.outputs_identical {
        return Err(Error::Internal("sequential and concurrent outputs differ".into()));
    }
    Ok(0)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<i32> {
    let mut m = RunManifest::start("gradcheck");
    let seed = resolve_seed(a.seed)?;
    let report = gradcheck(seed, a.members, a.samples, a.lambda)?;
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    println!("max relative error {:.3e} over {} parameters", report.max_rel_error, report.checked);
    prepare_out(&a.out.out)?;
    let path = a.out.out.join("gradcheck.json");
    write(&path, &text)?;
    m.base_seed = Some(seed);
    m.config = json!({ "seed": seed, "members": a.members, "samples": a.samples, "lambda": a.lambda });
    m.finish(&a.out.out, &[path])?;
    if report.max_rel_error >= 1e-5 {
        eprintln!("splitnet: gradient check failed");
        return Ok(2);
    }
    Ok(0)
}

fn cmd_goldens(a: OutArgs) -> Result<i32> {
    let mut m = RunManifest::start("goldens");
    let checks = goldens::all_checks()?;
    print!("{}", goldens::render(&checks));
    prepare_out(&a.out)?;
    let path = a.out.join("goldens.json");
    write(&path, serde_json::to_string_pretty(&checks)?)?;
    m.config = json!({});
    m.finish(&a.out, &[path])?;
    Ok(if checks.iter().all(|c| c.passed()) { 0 } else { 2 })
}
