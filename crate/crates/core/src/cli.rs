//! `gcfs` command line: one subcommand per workflow, all artifacts under
//! `--out`, exit 0 on success, 1 on invalid input, 2 on runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataio::{synth, BlurKernel, DegradedPair, Image, Manifest, ManifestEntry};
use crate::diagnostics::{format_table, gradcheck_suite, Coverage};
use crate::error::{Error, Result};
use crate::gcfeat::GcStackConfig;
use crate::metrics::{psnr, ssim};
use crate::models::{describe, Model, ModelConfig, Task};
use crate::trainer::{ablate, evaluate, AblationGrid, Checkpoint, Loss, TrainConfig, Trainer};
use crate::wsgraph::{concentration_experiment, degree_stats, ws_generate};

#[derive(Debug, Parser)]
#[command(
    name = "gcfs",
    version,
    about = "Graph convolution across CNN channels for deblurring and super-resolution"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a Watts-Strogatz graph and write its edge list.
    GraphGen(GraphGenArgs),
    /// Degree concentration of many WS graphs across rewiring probabilities.
    TheoremCheck(TheoremArgs),
    /// Finite-difference audit of every differentiable op and the tiny models.
    Gradcheck(GradcheckArgs),
    /// Synthesize a deblurring or super-resolution dataset.
    MakeData(MakeDataArgs),
    /// Train a model; writes config.json, metrics.csv and checkpoint.gcfs.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset; writes metrics.csv.
    Eval(EvalArgs),
    /// Restore one image with a checkpoint.
    Infer(InferArgs),
    /// Degree x ResGCN-depth grid plus a no-GC control; writes ablation.csv.
    Ablate(AblateArgs),
}

#[derive(Debug, Args, Serialize)]
struct GraphGenArgs {
    #[arg(long, default_value_t = 96)]
    nodes: usize,
    #[arg(long, default_value_t = 4)]
    degree: usize,
    #[arg(long, default_value_t = 0.9)]
    rho: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Edge-list file to write; the resolved config goes to `<out>.config.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct TheoremArgs {
    #[arg(long, default_value_t = 96)]
    nodes: usize,
    #[arg(long, default_value_t = 4)]
    degree: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.1, 0.5, 0.9, 1.0])]
    rhos: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    graphs: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct GradcheckArgs {
    /// Five seeds with full coordinate coverage; otherwise one seed with the
    /// model checks sampled.
    #[arg(long)]
    all: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum TaskArg {
    Deblur,
    Sr,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Deblur => Task::Deblur,
            TaskArg::Sr => Task::Sr,
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct MakeDataArgs {
    #[arg(long, value_enum, default_value_t = TaskArg::Deblur)]
    task: TaskArg,
    #[arg(long, default_value_t = 64)]
    count: usize,
    /// Side of the sharp / high-resolution images.
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Blur kernel, e.g. `gaussian(1.5)`, `box(5)` or `delta`.
    #[arg(long, default_value = "gaussian(1.5)")]
    kernel: String,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 2)]
    scale: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Flags that override the model and training configuration.
#[derive(Debug, Args, Default, Serialize)]
struct OverrideArgs {
    /// JSON file with optional `model`, `train`, `data` and `val` keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    /// SR magnification: 1, 2, 4 or 8.
    #[arg(long)]
    scale: Option<usize>,
    /// Feature channels, which is also the graph node count.
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    enc_blocks: Option<usize>,
    #[arg(long)]
    dec_blocks: Option<usize>,
    #[arg(long)]
    sr_blocks: Option<usize>,
    /// Replace the GC stack by the identity.
    #[arg(long)]
    no_gc: bool,
    /// Even mean degree of the WS graph.
    #[arg(long)]
    degree: Option<usize>,
    /// ResGCN blocks in the GC stack.
    #[arg(long)]
    gc_blocks: Option<usize>,
    /// Graph feature width F inside the GC stack.
    #[arg(long)]
    features: Option<usize>,
    /// WS rewiring probability.
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    graph_seed: Option<u64>,
    /// Total optimizer steps; the learning rate decays linearly to 0 over them.
    #[arg(long)]
    steps: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, value_parser = ["mse", "l1"])]
    loss: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Validation interval in steps (0: only after the last step).
    #[arg(long)]
    eval_every: Option<usize>,
    /// Training patch side in input pixels (default 32 deblur, 24 SR).
    #[arg(long)]
    patch: Option<usize>,
    /// Disable random flips and transposes of training patches.
    #[arg(long)]
    no_augment: bool,
    /// Training manifest.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Validation manifest.
    #[arg(long)]
    val: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    o: OverrideArgs,
    /// Continue from a checkpoint; its stored configuration wins.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many completed steps.
    #[arg(long)]
    until: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Ground truth; adds a metrics stamp.
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct AblateArgs {
    #[command(flatten)]
    o: OverrideArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [2, 4])]
    degrees: Vec<usize>,
    #[arg(long = "block-counts", value_delimiter = ',', default_values_t = [0, 2])]
    block_counts: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3])]
    seeds: Vec<u64>,
    /// Run GC arms without the lift/project graph convolutions.
    #[arg(long)]
    no_lift_project: bool,
    #[arg(long)]
    out: PathBuf,
}

/// The resolved job, echoed as `config.json` and accepted by `--config`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
    data: Option<PathBuf>,
    val: Option<PathBuf>,
}

/// Overlays `patch` onto `base`, recursing into objects.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Defaults for the task, then the config file, then flags.
fn resolve(o: &OverrideArgs) -> Result<RunConfig> {
    let file = match &o.config {
        Some(p) => read_json(p)?,
        None => Value::Object(Default::default()),
    };
    let file_task = file
        .pointer("/model/task")
        .cloned()
        .map(serde_json::from_value::<Task>)
        .transpose()?;
    let task = o.task.map(Task::from).or(file_task).unwrap_or(Task::Deblur);
    let file_scale = file
        .pointer("/model/scale")
        .and_then(Value::as_u64)
        .map(|s| s as usize);
    let scale = o.scale.or(file_scale).unwrap_or(2);
    let model = match task {
        Task::Deblur => ModelConfig::mini_deblur(),
        Task::Sr => ModelConfig::mini_sr(scale),
    };
    let mut base = serde_json::to_value(RunConfig {
        model,
        train: TrainConfig::default(),
        data: None,
        val: None,
    })?;
    merge(&mut base, file);
    let mut rc: RunConfig = serde_json::from_value(base)
        .map_err(|e| Error::Config(format!("configuration file: {e}")))?;

    let m = &mut rc.model;
    m.task = task;
    if task == Task::Sr {
        m.scale = scale;
    }
    macro_rules! set {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src {
                $dst = v;
            }
        };
    }
    set!(m.channels, o.channels);
    set!(m.enc_blocks, o.enc_blocks);
    set!(m.dec_blocks, o.dec_blocks);
    set!(m.sr_blocks, o.sr_blocks);
    let gc_flags = o.degree.is_some()
        || o.gc_blocks.is_some()
        || o.features.is_some()
        || o.rho.is_some()
        || o.graph_seed.is_some();
    if o.no_gc {
        if gc_flags {
            return Err(Error::Config("--no-gc conflicts with graph flags".into()));
        }
        m.gc = None;
    } else if gc_flags {
        let gc = m.gc.get_or_insert_with(GcStackConfig::default);
        set!(gc.degree, o.degree);
        set!(gc.blocks, o.gc_blocks);
        set!(gc.f, o.features);
        set!(gc.rho, o.rho);
        set!(gc.graph_seed, o.graph_seed);
    }
    let t = &mut rc.train;
    set!(t.total_steps, o.steps);
    set!(t.lr0, o.lr);
    set!(t.batch, o.batch);
    set!(t.seed, o.seed);
    set!(t.eval_every, o.eval_every);
    if o.patch.is_some() {
        t.patch = o.patch;
    }
    if o.no_augment {
        t.augment = false;
    }
    if let Some(l) = &o.loss {
        t.loss = if l == "l1" { Loss::L1 } else { Loss::Mse };
    }
    if o.data.is_some() {
        rc.data = o.data.clone();
    }
    if o.val.is_some() {
        rc.val = o.val.clone();
    }
    rc.model.validate()?;
    rc.train.validate()?;
    Ok(rc)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn echo_config(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

fn load_pairs(manifest: &Path) -> Result<Vec<(String, DegradedPair)>> {
    let pairs = Manifest::load(manifest)?.read_pairs()?;
    if pairs.is_empty() {
        return Err(Error::Config(format!(
            "{}: manifest lists no pairs",
            manifest.display()
        )));
    }
    Ok(pairs)
}

fn image_ext(img: &Image) -> &'static str {
    if img.channels() == 1 {
        "pgm"
    } else {
        "ppm"
    }
}

fn graph_gen(a: &GraphGenArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let g = ws_generate(a.nodes, a.degree, a.rho, a.seed)?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    g.save(&a.out)?;
    let mut cfg = a.out.clone().into_os_string();
    cfg.push(".config.json");
    echo_config(Path::new(&cfg), a)?;
    let st = degree_stats(&g);
    writeln!(
        out,
        "{} nodes, {} edges, mean degree {}, degree variance {:.4} -> {}",
        g.n(),
        g.edges().len(),
        st.mean,
        st.variance,
        a.out.display()
    )
    .ok();
    Ok(())
}

fn theorem_check(a: &TheoremArgs, out: &mut dyn std::io::Write) -> Result<()> {
    create_dir(&a.out)?;
    echo_config(&a.out.join("config.json"), a)?;
    let report = concentration_experiment(a.nodes, a.degree, &a.rhos, a.graphs, a.seed)?;
    let table = report.to_table();
    write_file(&a.out.join("concentration.csv"), &table)?;
    let exact = report
        .rows
        .iter()
        .all(|r| r.graph_means.iter().all(|&m| m == a.degree as f64));
    write!(out, "{table}").ok();
    writeln!(
        out,
        "every graph has mean degree exactly {}: {}",
        a.degree,
        if exact { "yes" } else { "NO" }
    )
    .ok();
    if exact {
        Ok(())
    } else {
        Err(Error::Autodiff("mean degree drifted from k".into()))
    }
}

fn gradcheck(a: &GradcheckArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let (seeds, coverage): (&[u64], _) = if a.all {
        (&[1, 2, 3, 4, 5], Coverage::Full)
    } else {
        (&[1], Coverage::ModelProbes(8))
    };
    let results = gradcheck_suite(seeds, coverage)?;
    let table = format_table(&results);
    write!(out, "{table}").ok();
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        echo_config(&dir.join("config.json"), a)?;
        write_file(&dir.join("gradcheck.txt"), &table)?;
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Autodiff(format!(
            "gradient check failed for: {}",
            failed.join(", ")
        )))
    }
}

fn make_data(a: &MakeDataArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let kernel: BlurKernel = a.kernel.parse()?;
    let pairs = match a.task {
        TaskArg::Deblur => synth::deblur_pairs(a.count, a.size, kernel, a.noise, a.seed)?,
        TaskArg::Sr => synth::sr_pairs(a.count, a.size, a.scale, a.seed)?,
    };
    for sub in ["input", "target"] {
        create_dir(&a.out.join(sub))?;
    }
    echo_config(&a.out.join("config.json"), a)?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let input = PathBuf::from("input").join(format!("{i:04}.{}", image_ext(&p.input)));
        let target = PathBuf::from("target").join(format!("{i:04}.{}", image_ext(&p.target)));
        p.input.write(a.out.join(&input))?;
        p.target.write(a.out.join(&target))?;
        entries.push(ManifestEntry {
            input,
            target,
            meta: p.meta,
        });
    }
    let manifest = Manifest {
        seed: a.seed,
        entries,
    };
    manifest.save(a.out.join("manifest.tsv"))?;
    writeln!(
        out,
        "{} pairs -> {}",
        pairs.len(),
        a.out.join("manifest.tsv").display()
    )
    .ok();
    Ok(())
}

fn pairs_only(v: Vec<(String, DegradedPair)>) -> Vec<DegradedPair> {
    v.into_iter().map(|(_, p)| p).collect()
}

fn train(a: &TrainArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let (rc, trainer_from): (RunConfig, Option<Checkpoint>) = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let o = &a.o;
            let data = o.data.clone().or_else(|| {
                o.config
                    .as_ref()
                    .and_then(|c| read_json(c).ok())
                    .and_then(|v| v.get("data").cloned())
                    .and_then(|d| serde_json::from_value(d).ok())
            });
            let val = o.val.clone();
            let rc = RunConfig {
                model: ck.model.config().clone(),
                train: ck.train.clone(),
                data,
                val,
            };
            (rc, Some(ck))
        }
        None => (resolve(&a.o)?, None),
    };
    let data = rc.data.clone().ok_or_else(|| {
        Error::Config("no training data; pass --data or set `data` in --config".into())
    })?;
    let train_pairs = pairs_only(load_pairs(&data)?);
    let val_pairs = match &rc.val {
        Some(v) => pairs_only(load_pairs(v)?),
        None => Vec::new(),
    };
    create_dir(&a.out)?;
    echo_config(&a.out.join("config.json"), &rc)?;
    write_file(&a.out.join("model.txt"), describe(&rc.model)?)?;

    let mut trainer = match trainer_from {
        Some(ck) => Trainer::from_checkpoint(ck, train_pairs, val_pairs)?,
        None => {
            let model = Model::new(rc.model.clone(), rc.train.seed)?;
            Trainer::new(model, rc.train.clone(), train_pairs, val_pairs)?
        }
    };
    let until = a.until.unwrap_or(rc.train.total_steps);
    let result = trainer.run(until);
    // Keep the log and weights up to the failure point.
    write_file(&a.out.join("metrics.csv"), trainer.log_csv())?;
    result?;
    trainer.checkpoint().save(a.out.join("checkpoint.gcfs"))?;
    if let Some(last) = trainer.log().last() {
        let eval = last
            .eval_psnr
            .map_or_else(String::new, |p| format!(", val PSNR {p:.3} dB"));
        writeln!(out, "step {}: loss {:.6}{eval}", last.step, last.loss).ok();
    }
    Ok(())
}

fn eval(a: &EvalArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let pairs = load_pairs(&a.data)?;
    create_dir(&a.out)?;
    echo_config(&a.out.join("config.json"), a)?;
    let report = evaluate(&ck.model, &pairs)?;
    let csv = report.to_csv();
    write_file(&a.out.join("metrics.csv"), &csv)?;
    writeln!(
        out,
        "{} images: PSNR {:.4} dB (input {:.4}), SSIM {:.4} (input {:.4})",
        report.rows.len(),
        report.mean_psnr(),
        report.mean_input_psnr().unwrap_or(f64::NAN),
        report.mean_ssim(),
        report.mean_input_ssim().unwrap_or(f64::NAN)
    )
    .ok();
    Ok(())
}

fn infer(a: &InferArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let input = Image::read(&a.input)?;
    let target = a.target.as_ref().map(Image::read).transpose()?;
    create_dir(&a.out)?;
    echo_config(&a.out.join("config.json"), a)?;
    let (restored, padded) = ck.model.infer(&input)?;
    let name = format!("restored.{}", image_ext(&restored));
    restored.write(a.out.join(&name))?;
    let mut stamp = name.clone();
    if let Some(t) = target {
        let p = psnr(&restored, &t, 1.0)?;
        let s = ssim(&restored, &t)?;
        stamp = format!("{stamp} psnr_db={p:.6} ssim={:.6}", s.value);
        if s.global_fallback {
            stamp.push_str(" ssim_window=global");
        }
    }
    if padded {
        stamp.push_str(" padded=mirror");
    }
    stamp.push('\n');
    if a.target.is_some() {
        write_file(&a.out.join("metrics.txt"), &stamp)?;
    }
    write!(out, "{stamp}").ok();
    Ok(())
}

fn run_ablate(a: &AblateArgs, out: &mut dyn std::io::Write) -> Result<()> {
    if let Some(&d) = a.degrees.iter().find(|&&d| d % 2 == 1) {
        return Err(Error::OddDegree(d));
    }
    let rc = resolve(&a.o)?;
    let data = rc
        .data
        .clone()
        .ok_or_else(|| Error::Config("no training data; pass --data".into()))?;
    let val = rc
        .val
        .clone()
        .ok_or_else(|| Error::Config("ablation needs --val".into()))?;
    let train_pairs = pairs_only(load_pairs(&data)?);
    let val_pairs = pairs_only(load_pairs(&val)?);
    create_dir(&a.out)?;
    #[derive(Serialize)]
    struct Echo<'a> {
        run: &'a RunConfig,
        degrees: &'a [usize],
        block_counts: &'a [usize],
        seeds: &'a [u64],
        lift_project: bool,
    }
    echo_config(
        &a.out.join("config.json"),
        &Echo {
            run: &rc,
            degrees: &a.degrees,
            block_counts: &a.block_counts,
            seeds: &a.seeds,
            lift_project: !a.no_lift_project,
        },
    )?;
    let grid = AblationGrid {
        degrees: a.degrees.clone(),
        block_counts: a.block_counts.clone(),
        seeds: a.seeds.clone(),
        lift_project: !a.no_lift_project,
    };
    let report = ablate(&rc.model, &grid, &rc.train, &train_pairs, &val_pairs)?;
    let csv = report.to_csv();
    write_file(&a.out.join("ablation.csv"), &csv)?;
    write!(out, "{csv}").ok();
    Ok(())
}

/// Runs one subcommand; returns the process exit code. Normal output goes
/// to `out`, diagnostics to `err`.
pub fn dispatch_to<I, S>(argv: I, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                write!(out, "{text}").ok();
            } else {
                write!(err, "{text}").ok();
            }
            return code;
        }
    };
    let result = match &cli.command {
        Command::GraphGen(a) => graph_gen(a, out),
        Command::TheoremCheck(a) => theorem_check(a, out),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::MakeData(a) => make_data(a, out),
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Infer(a) => infer(a, out),
        Command::Ablate(a) => run_ablate(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            writeln!(err, "error: {e}").ok();
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

/// [`dispatch_to`] on the process's stdout and stderr.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    dispatch_to(argv, &mut std::io::stdout(), &mut std::io::stderr())
}
