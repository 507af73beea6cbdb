use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::{self, Scene, EVAL_SPLIT, TRAIN_SPLIT};

use super::config::{DataConfig, RunConfig};
use super::model::ToyModel;
use super::train::{evaluate, held_out_losses, train, TrainLog};

/// Train and held-out scenes.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: Vec<Scene>,
    pub eval: Vec<Scene>,
}

/// Read the splits under `data.root`, or generate them in memory when no
/// root is configured.
pub fn load_or_generate(data: &DataConfig) -> Result<Datasets> {
    if let Some(root) = &data.root {
        let train = synthdata::read_split(root, TRAIN_SPLIT)?;
        let eval = synthdata::read_split(root, EVAL_SPLIT)?;
        if train.is_empty() || eval.is_empty() {
            return Err(Error::Config(format!("dataset at {} has an empty split", root.display())));
        }
        return Ok(Datasets { train, eval });
    }
    let gen = |split, n| -> Result<Vec<Scene>> {
        Ok(synthdata::generate_split(&data.scene, data.seed, split, n)?.into_iter().map(Scene::from).collect())
    };
    Ok(Datasets { train: gen(TRAIN_SPLIT, data.train_scenes)?, eval: gen(EVAL_SPLIT, data.eval_scenes)? })
}

/// Outcome of one seeded training run, measured on the held-out split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub initial_l_u: f64,
    pub initial_l_d: f64,
    pub final_l_u: f64,
    pub final_l_d: f64,
    pub en: f64,
    pub mi: f64,
    pub vif: f64,
    pub map50: f64,
    pub map5095: f64,
    /// Mean `|g_d| / |g_u|` over training steps.
    pub mean_grad_ratio: f64,
    /// Largest relative column-norm gap on aligned steps (0 without GMTA).
    pub max_aligned_norm_gap: f64,
}

/// Train with `cfg`, then measure losses and metrics on the held-out split.
pub fn run_once(cfg: &RunConfig, data: &Datasets) -> Result<(ToyModel, TrainLog, RunSummary)> {
    let initial = ToyModel::init(cfg.model.clone(), cfg.seed)?;
    let (init_u, init_d) = held_out_losses(&initial, cfg, &data.eval, cfg.seed)?;
    let (model, log) = train(cfg, &data.train)?;
    let (final_u, final_d) = held_out_losses(&model, cfg, &data.eval, cfg.seed)?;
    let report = evaluate(&model, cfg, &data.eval, cfg.seed)?;
    let fusion = report.fusion.expect("evaluate always fuses");
    let summary = RunSummary {
        seed: cfg.seed,
        initial_l_u: init_u,
        initial_l_d: init_d,
        final_l_u: final_u,
        final_l_d: final_d,
        en: fusion.en,
        mi: fusion.mi,
        vif: fusion.vif,
        map50: report.detection.map50,
        map5095: report.detection.map5095,
        mean_grad_ratio: log.mean_grad_ratio(),
        max_aligned_norm_gap: log.max_aligned_norm_gap(),
    };
    Ok((model, log, summary))
}

/// Means over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSummary {
    pub final_l_u: f64,
    pub final_l_d: f64,
    pub final_total: f64,
    pub en: f64,
    pub mi: f64,
    pub vif: f64,
    pub map50: f64,
    pub map5095: f64,
    pub mean_grad_ratio: f64,
}

impl MeanSummary {
    fn of(runs: &[RunSummary]) -> Self {
        let n = runs.len().max(1) as f64;
        let m = |f: fn(&RunSummary) -> f64| runs.iter().map(f).sum::<f64>() / n;
        Self {
            final_l_u: m(|r| r.final_l_u),
            final_l_d: m(|r| r.final_l_d),
            final_total: m(|r| r.final_l_u + r.final_l_d),
            en: m(|r| r.en),
            mi: m(|r| r.mi),
            vif: m(|r| r.vif),
            map50: m(|r| r.map50),
            map5095: m(|r| r.map5095),
            mean_grad_ratio: m(|r| r.mean_grad_ratio),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub name: String,
    pub gmta: bool,
    pub runs: Vec<RunSummary>,
    pub mean: MeanSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmtaComparison {
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmReport>,
}

const RUN_COLUMNS: &str = "seed,final_l_u,final_l_d,en,mi,vif,map50,map5095,mean_grad_ratio";

fn run_row(prefix: &str, r: &RunSummary) -> String {
    format!(
        "{prefix},{},{},{},{},{},{},{},{},{}\n",
        r.seed, r.final_l_u, r.final_l_d, r.en, r.mi, r.vif, r.map50, r.map5095, r.mean_grad_ratio
    )
}

fn mean_row(prefix: &str, m: &MeanSummary) -> String {
    format!(
        "{prefix},mean,{},{},{},{},{},{},{},{}\n",
        m.final_l_u, m.final_l_d, m.en, m.mi, m.vif, m.map50, m.map5095, m.mean_grad_ratio
    )
}

impl GmtaComparison {
    pub fn arm(&self, gmta: bool) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.gmta == gmta)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("arm,{RUN_COLUMNS}\n");
        for a in &self.arms {
            for r in &a.runs {
                out.push_str(&run_row(&a.name, r));
            }
            out.push_str(&mean_row(&a.name, &a.mean));
        }
        out
    }
}

fn arm_name(cfg: &RunConfig) -> String {
    if cfg.gmta.enabled {
        format!("gmta-period-{}", cfg.gmta.period)
    } else {
        "no-gmta".to_string()
    }
}

/// Train both configurations on every seed and compare held-out results.
pub fn experiment_gmta(pair: (&RunConfig, &RunConfig), seeds: &[u64], data: &Datasets) -> Result<GmtaComparison> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut arms = Vec::with_capacity(2);
    for cfg in [pair.0, pair.1] {
        let runs = seeds
            .iter()
            .map(|&s| run_once(&cfg.with_seed(s), data).map(|(_, _, r)| r))
            .collect::<Result<Vec<_>>>()?;
        arms.push(ArmReport { name: arm_name(cfg), gmta: cfg.gmta.enabled, mean: MeanSummary::of(&runs), runs });
    }
    Ok(GmtaComparison { seeds: seeds.to_vec(), arms })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchRow {
    pub branches: Vec<usize>,
    pub runs: Vec<RunSummary>,
    pub mean: MeanSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchSweep {
    pub seeds: Vec<u64>,
    pub rows: Vec<BranchRow>,
}

fn branch_label(b: &[usize]) -> String {
    b.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

impl BranchSweep {
    /// One row per branch set, then per-seed detail.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("branches,en,mi,vif,map50,map5095\n");
        for r in &self.rows {
            let m = &r.mean;
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                branch_label(&r.branches),
                m.en,
                m.mi,
                m.vif,
                m.map50,
                m.map5095
            ));
        }
        out.push_str(&format!("\nbranches,{RUN_COLUMNS}\n"));
        for r in &self.rows {
            for run in &r.runs {
                out.push_str(&run_row(&branch_label(&r.branches), run));
            }
        }
        out
    }

    pub fn row(&self, branches: &[usize]) -> Option<&BranchRow> {
        self.rows.iter().find(|r| r.branches == branches)
    }
}

/// One training run per branch set and seed, rows in the given order.
pub fn experiment_branches(base: &RunConfig, sets: &[Vec<usize>], seeds: &[u64], data: &Datasets) -> Result<BranchSweep> {
    if seeds.is_empty() || sets.is_empty() {
        return Err(Error::Config("branch sweep needs at least one set and one seed".into()));
    }
    for s in sets {
        base.with_branches(s.clone()).validate()?;
    }
    let mut rows = Vec::with_capacity(sets.len());
    for set in sets {
        let cfg = base.with_branches(set.clone());
        let runs = seeds
            .iter()
            .map(|&s| run_once(&cfg.with_seed(s), data).map(|(_, _, r)| r))
            .collect::<Result<Vec<_>>>()?;
        rows.push(BranchRow { branches: set.clone(), mean: MeanSummary::of(&runs), runs });
    }
    Ok(BranchSweep { seeds: seeds.to_vec(), rows })
}
