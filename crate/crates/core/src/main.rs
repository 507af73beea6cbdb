//! `fusiondet` command line: dataset generation, training, inference,
//! evaluation and the two toy experiments.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fusiondet::gmta::{self, GradientMatrix};
use fusiondet::harness::{
    detect, detect_seed, experiment_branches, experiment_gmta, fuse_image, load_or_generate, train, RunConfig,
    ToyModel,
};
use fusiondet::metrics::{MetricsReport, Predictions};
use fusiondet::numerics::Tensor;
use fusiondet::optim::OptimizerConfig;
use fusiondet::synthdata::{self, Annotation, Scene, EVAL_SPLIT};
use fusiondet::{rng, Error, Result};

#[derive(Parser)]
#[command(name = "fusiondet", version, about = "Toy joint image fusion and box detection")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with train and eval splits.
    Gen(GenArgs),
    /// Train a model and write model.json, train_log.jsonl and run_config.json.
    Train(TrainArgs),
    /// Write `<id>.fused.pgm` for every scene of a split.
    Fuse(InferArgs),
    /// Write `<id>.pred.json` for every scene of a split.
    Detect(InferArgs),
    /// Score predictions (and optionally fused images) against a split.
    Eval(EvalArgs),
    /// Align a gradient matrix and print the report.
    GmtaDemo(DemoArgs),
    /// Train with and without alignment over several seeds.
    ExpGmta(ExpGmtaArgs),
    /// Train each branch set over several seeds.
    ExpBranches(ExpBranchesArgs),
}

/// Run configuration: a JSON file plus flag overrides.
#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset root with train/ and eval/ splits.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Learning rate of the configured optimizer.
    #[arg(long)]
    lr: Option<f64>,
    /// Enable gradient alignment.
    #[arg(long, conflicts_with = "no_gmta")]
    gmta: bool,
    /// Disable gradient alignment.
    #[arg(long)]
    no_gmta: bool,
    #[arg(long)]
    gmta_period: Option<usize>,
    /// Active fusion branches, e.g. `0,1,2,3`.
    #[arg(long, value_delimiter = ',')]
    branches: Option<Vec<usize>>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.data {
            cfg.data.root = Some(d.clone());
        }
        if let Some(n) = self.iterations {
            cfg.iterations = n;
        }
        if let Some(lr) = self.lr {
            cfg.optimizer = match cfg.optimizer {
                OptimizerConfig::Sgd { .. } => OptimizerConfig::Sgd { lr },
                OptimizerConfig::Adamw { beta1, beta2, eps, weight_decay, .. } => {
                    OptimizerConfig::Adamw { lr, beta1, beta2, eps, weight_decay }
                }
            };
        }
        if self.gmta {
            cfg.gmta.enabled = true;
        }
        if self.no_gmta {
            cfg.gmta.enabled = false;
        }
        if let Some(p) = self.gmta_period {
            cfg.gmta.period = p;
        }
        if let Some(b) = &self.branches {
            cfg.model.orppt.branches = b.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenArgs {
    /// Output dataset root.
    #[arg(long, default_value = "data")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training scenes.
    #[arg(long, default_value_t = 200)]
    scenes: usize,
    /// Held-out scenes; defaults to a quarter of `--scenes` (at least one).
    #[arg(long)]
    eval_scenes: Option<usize>,
    /// Scene size in pixels (square).
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Trained model.json.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = EVAL_SPLIT)]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset root.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = EVAL_SPLIT)]
    split: String,
    /// Directory of `<id>.pred.json` files.
    #[arg(long)]
    preds: PathBuf,
    /// Directory of `<id>.fused.pgm` files; fusion metrics are skipped without it.
    #[arg(long)]
    fused: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Accepted for uniformity; evaluation draws no random numbers.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DemoArgs {
    /// Row-major JSON matrix, one row per parameter and one column per task.
    #[arg(long)]
    matrix: Option<String>,
    /// Rows of the random matrix drawn when `--matrix` is absent.
    #[arg(long, default_value_t = 8)]
    rows: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExpGmtaArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Training seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[arg(long, default_value = "exp-gmta")]
    out: PathBuf,
}

#[derive(Args)]
struct ExpBranchesArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    /// Branch sets separated by `;`, branches by `,`.
    #[arg(long, default_value = "0;0,1;0,1,2;0,1,2,3")]
    sets: String,
    #[arg(long, default_value = "exp-branches")]
    out: PathBuf,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_text(path, &s)
}

fn split_scenes(cfg: &RunConfig, split: &str) -> Result<Vec<Scene>> {
    let root = cfg
        .data
        .root
        .as_ref()
        .ok_or_else(|| Error::Config("--data (or data.root in the config) is required".into()))?;
    let scenes = synthdata::read_split(root, split)?;
    if scenes.is_empty() {
        return Err(Error::Config(format!("split {split} under {} is empty", root.display())));
    }
    Ok(scenes)
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    if a.scenes == 0 {
        return Err(Error::Config("--scenes must be positive".into()));
    }
    let n_eval = a.eval_scenes.unwrap_or((a.scenes / 4).max(1));
    let spec = synthdata::SceneSpec { width: a.size, height: a.size, ..Default::default() };
    spec.validate()?;
    synthdata::generate_dataset(&a.out, &spec, a.seed, a.scenes, n_eval)?;
    println!("wrote {} train and {n_eval} eval scenes to {}", a.scenes, a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let data = load_or_generate(&cfg.data)?;
    let (model, log) = train(&cfg, &data.train)?;
    create_dir(&a.out)?;
    model.save(&a.out.join("model.json"))?;
    log.write_jsonl(&a.out.join("train_log.jsonl"))?;
    write_json(&a.out.join("run_config.json"), &cfg)?;
    if let Some(last) = log.records.last() {
        println!("step {}: L_u {:.6} L_d {:.6}", last.step, last.l_u, last.l_d);
    }
    println!("wrote model to {}", a.out.display());
    Ok(())
}

fn cmd_fuse(a: &InferArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let model = ToyModel::load(&a.model)?;
    let scenes = split_scenes(&cfg, &a.split)?;
    create_dir(&a.out)?;
    for s in &scenes {
        let u = fuse_image(&model, &s.visible, &s.infrared)?;
        synthdata::write_image(&a.out.join(format!("{}.fused.pgm", s.id)), &u)?;
    }
    println!("fused {} scenes into {}", scenes.len(), a.out.display());
    Ok(())
}

fn cmd_detect(a: &InferArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let model = ToyModel::load(&a.model)?;
    let scenes = split_scenes(&cfg, &a.split)?;
    create_dir(&a.out)?;
    for (i, s) in scenes.iter().enumerate() {
        let (boxes, scores) = detect(&model, &cfg, s, detect_seed(cfg.seed, i))?;
        let ann = Annotation { scores: Some(scores), ..Annotation::new(&s.id, &boxes) };
        synthdata::write_annotations(&a.out.join(format!("{}.pred.json", s.id)), &ann)?;
    }
    println!("detected on {} scenes into {}", scenes.len(), a.out.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let scenes = synthdata::read_split(&a.data, &a.split)?;
    if scenes.is_empty() {
        return Err(Error::Config(format!("split {} under {} is empty", a.split, a.data.display())));
    }
    let mut preds = Vec::with_capacity(scenes.len());
    let mut fused = Vec::with_capacity(scenes.len());
    for s in &scenes {
        let ann = synthdata::read_annotations(&a.preds.join(format!("{}.pred.json", s.id)))?;
        let scores = ann.scores.clone().unwrap_or_else(|| vec![1.0; ann.boxes.len()]);
        preds.push(Predictions::new(ann.box_set(), scores)?);
        fused.push(match &a.fused {
            Some(dir) => Some(synthdata::read_image(&dir.join(format!("{}.fused.pgm", s.id)))?),
            None => None,
        });
    }
    let report = MetricsReport::build(
        scenes
            .iter()
            .zip(&fused)
            .zip(&preds)
            .map(|((s, u), p)| (s.id.as_str(), u.as_ref(), &s.visible, &s.infrared, p, &s.boxes)),
    )?;
    create_dir(&a.out)?;
    write_json(&a.out.join("metrics.json"), &report)?;
    write_text(&a.out.join("metrics.csv"), &report.to_csv())?;
    if let Some(f) = &report.fusion {
        println!("EN {:.6} MI {:.6} VIF {:.6}", f.en, f.mi, f.vif);
    }
    println!("mAP50 {:.6} mAP50:95 {:.6}", report.detection.map50, report.detection.map5095);
    Ok(())
}

fn demo_matrix(a: &DemoArgs) -> Result<GradientMatrix> {
    match &a.matrix {
        Some(text) => {
            let rows: Vec<Vec<f64>> =
                serde_json::from_str(text).map_err(|e| Error::Config(format!("--matrix: {e}")))?;
            let t = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != t) {
                return Err(Error::Config("--matrix rows must have equal length".into()));
            }
            let data: Vec<f64> = rows.concat();
            GradientMatrix::from_tensor(&Tensor::new(vec![rows.len(), t], data)?)
                .map_err(|e| Error::Config(format!("--matrix: {e}")))
        }
        None => {
            let mut r = rng::stream(a.seed);
            GradientMatrix::from_tensor(&rng::normal_tensor(&mut r, &[a.rows, 2]))
        }
    }
}

/// Adding zero turns `-0` into `0` so printed matrices stay tidy.
fn tidy(v: f64) -> f64 {
    v + 0.0
}

fn cmd_gmta_demo(a: &DemoArgs) -> Result<()> {
    let g = demo_matrix(a)?;
    let (aligned, report) = gmta::align(&g)?;
    let t = aligned.to_tensor();
    let rows: Vec<Vec<f64>> = t.data().chunks(aligned.tasks()).map(|r| r.iter().map(|&v| tidy(v)).collect()).collect();
    println!("kappa_before {}", report.kappa_before);
    println!("kappa_after {}", report.kappa_after);
    println!("rank {}", report.rank);
    println!("aligned {}", serde_json::to_string(&rows)?);
    println!("report {}", serde_json::to_string(&report)?);
    Ok(())
}

fn cmd_exp_gmta(a: &ExpGmtaArgs) -> Result<()> {
    let base = a.config.resolve()?;
    let data = load_or_generate(&base.data)?;
    let on = base.with_gmta(true);
    let off = base.with_gmta(false);
    let cmp = experiment_gmta((&off, &on), &a.seeds, &data)?;
    create_dir(&a.out)?;
    write_json(&a.out.join("gmta_comparison.json"), &cmp)?;
    write_text(&a.out.join("gmta_comparison.csv"), &cmp.to_csv())?;
    for arm in &cmp.arms {
        let m = &arm.mean;
        println!(
            "{}: L_u+L_d {:.6} mAP50 {:.6} grad ratio {:.4}",
            arm.name, m.final_total, m.map50, m.mean_grad_ratio
        );
    }
    Ok(())
}

fn parse_sets(s: &str) -> Result<Vec<Vec<usize>>> {
    s.split(';')
        .map(|set| {
            set.split(',')
                .map(|v| v.trim().parse::<usize>().map_err(|e| Error::Config(format!("--sets {set:?}: {e}"))))
                .collect()
        })
        .collect()
}

fn cmd_exp_branches(a: &ExpBranchesArgs) -> Result<()> {
    let base = a.config.resolve()?;
    let sets = parse_sets(&a.sets)?;
    let data = load_or_generate(&base.data)?;
    let sweep = experiment_branches(&base, &sets, &a.seeds, &data)?;
    create_dir(&a.out)?;
    write_json(&a.out.join("branch_sweep.json"), &sweep)?;
    write_text(&a.out.join("branch_sweep.csv"), &sweep.to_csv())?;
    for row in &sweep.rows {
        let m = &row.mean;
        println!("{:?}: EN {:.6} MI {:.6} VIF {:.6} mAP50 {:.6}", row.branches, m.en, m.mi, m.vif, m.map50);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Fuse(a) => cmd_fuse(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Eval(a) => cmd_eval(a),
        Command::GmtaDemo(a) => cmd_gmta_demo(a),
        Command::ExpGmta(a) => cmd_exp_gmta(a),
        Command::ExpBranches(a) => cmd_exp_branches(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
