//! End-to-end runs: search, allocation, final training and comparison.
//!
//! Output layout under a run directory:
//! ```text
//! search/checkpoint/   search state, π*(T) included once complete
//! search/metrics.csv   one row per step and adapted module
//! plan.json            extracted allocation
//! final/checkpoint/    fine-tuned model
//! final/metrics.csv    per-epoch fine-tuning curve
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::checkpoint::{load_search, save_final, save_search, SearchCheckpoint};
use super::config::{AllocationSource, RunConfig};
use super::model::ToyTransformer;
use super::tasks::{generate_task, Example};
use super::train::{evaluate, finetune, EvalMetrics, FinetuneReport};
use crate::allocation::{
    mola_group_allocation, normal_plan, uniform_allocation, uniform_with_total_rank, AllocationPlan, PlanShape,
};
use crate::bilevel::{run_search, split_dataset, SearchObserver, SearchSnapshot, StepMetrics};
use crate::error::{Error, Result};
use crate::numerics::Scalar;

pub const SEARCH_DIR: &str = "search";
pub const FINAL_DIR: &str = "final";
pub const PLAN_FILE: &str = "plan.json";

pub fn search_checkpoint_dir(out: &Path) -> PathBuf {
    out.join(SEARCH_DIR).join("checkpoint")
}

pub fn final_checkpoint_dir(out: &Path) -> PathBuf {
    out.join(FINAL_DIR).join("checkpoint")
}

/// Train and eval sets of the configured task.
pub fn task_data(cfg: &RunConfig) -> Result<(Vec<Example>, Vec<Example>)> {
    generate_task(&cfg.task, cfg.model.vocab, cfg.model.max_seq)
}

#[derive(Debug, Serialize)]
struct SearchRow<'a> {
    step: usize,
    lr_model: f64,
    lr_gsv: f64,
    sft: f64,
    bal: f64,
    gsv_sft: f64,
    layer: usize,
    module: &'a str,
    n_star: usize,
    m_star: String,
}

/// Writes per-step metrics and, when a step fails, a checkpoint of the last
/// good state.
struct SearchRecorder<'a, S: Scalar> {
    csv: csv::Writer<fs::File>,
    config: &'a RunConfig,
    template: &'a ToyTransformer<S>,
    failure_dir: PathBuf,
    total_steps: usize,
    failure_saved: Option<Result<()>>,
}

impl<S: Scalar> SearchObserver<S> for SearchRecorder<'_, S> {
    fn on_step(&mut self, m: &StepMetrics, _snapshot: &dyn Fn() -> SearchSnapshot<S>) -> Result<()> {
        for sel in &m.selections {
            let ranks: Vec<String> = sel.m_star.iter().map(usize::to_string).collect();
            self.csv.serialize(SearchRow {
                step: m.step,
                lr_model: m.lr_model,
                lr_gsv: m.lr_gsv,
                sft: m.sft,
                bal: m.bal,
                gsv_sft: m.gsv_sft,
                layer: sel.layer,
                module: &sel.module,
                n_star: sel.n_star,
                m_star: ranks.join(" "),
            })?;
        }
        Ok(())
    }

    fn on_failure(&mut self, last_good: &SearchSnapshot<S>, _error: &Error) {
        let _ = self.csv.flush();
        self.failure_saved = Some(save_search(
            &self.failure_dir,
            self.config,
            self.template,
            last_good,
            self.total_steps,
            None,
        ));
    }
}

#[derive(Debug, Clone)]
pub struct SearchRun<S: Scalar> {
    pub plan: AllocationPlan,
    pub checkpoint: SearchCheckpoint<S>,
    pub steps: usize,
}

/// Runs the bilevel search for `cfg`, or continues the one checkpointed in
/// `resume`, and writes the checkpoint, metrics and plan under `out`.
pub fn search<S: Scalar>(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<SearchRun<S>> {
    cfg.validate()?;
    let (train, _) = task_data(cfg)?;
    let split = split_dataset(&train, cfg.bilevel.seed)?;
    let total_steps = cfg.bilevel.total_steps(split.d2.len());
    let (mut model, snapshot) = match resume {
        Some(dir) => {
            let ck = load_search::<S>(dir)?;
            if ck.manifest.config != *cfg {
                return Err(Error::Config(format!(
                    "checkpoint {} was written by a different config",
                    dir.display()
                )));
            }
            (ck.model, Some(ck.snapshot))
        }
        None => (
            ToyTransformer::for_search(&cfg.model, &cfg.moe_settings(), cfg.moe.c_b, cfg.bilevel.seed)?,
            None,
        ),
    };
    let template = model.clone();
    let search_dir = out.join(SEARCH_DIR);
    fs::create_dir_all(&search_dir)?;
    let metrics_path = search_dir.join("metrics.csv");
    let file = match resume {
        Some(_) => fs::OpenOptions::new().append(true).create(true).open(&metrics_path)?,
        None => fs::File::create(&metrics_path)?,
    };
    let has_header = resume.is_none() || file.metadata()?.len() == 0;
    let mut recorder = SearchRecorder {
        csv: csv::WriterBuilder::new().has_headers(has_header).from_writer(file),
        config: cfg,
        template: &template,
        failure_dir: search_dir.join("failure_checkpoint"),
        total_steps,
        failure_saved: None,
    };
    let result = run_search(&mut model, &split, &cfg.bilevel, total_steps, &mut recorder, snapshot.as_ref());
    recorder.csv.flush()?;
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            return Err(match recorder.failure_saved {
                Some(Err(save)) => Error::NonFinite(format!("{e}; saving the last good state also failed: {save}")),
                _ => e,
            })
        }
    };
    let snapshot = SearchSnapshot::capture(&model, &outcome.model_opt, &outcome.gsv_opt, total_steps);
    let ck_dir = search_checkpoint_dir(out);
    save_search(&ck_dir, cfg, &model, &snapshot, total_steps, Some(&outcome.pi_star))?;
    let plan = model.extract_plan(cfg.bilevel.seed)?;
    plan.save(&out.join(PLAN_FILE))?;
    Ok(SearchRun {
        plan,
        checkpoint: SearchCheckpoint {
            manifest: super::checkpoint::read_manifest(&ck_dir)?,
            model,
            snapshot,
            pi_star: Some(outcome.pi_star),
        },
        steps: outcome.steps,
    })
}

/// Plan from the final selection vectors of a search checkpoint.
pub fn allocate<S: Scalar>(checkpoint: &Path) -> Result<AllocationPlan> {
    let ck = load_search::<S>(checkpoint)?;
    ck.model.extract_plan(ck.manifest.config.bilevel.seed)
}

/// Resolves the configured allocation source. `searched` supplies the
/// plan for [`AllocationSource::Guilomo`] and the budget for
/// [`AllocationSource::UniformMatched`].
pub fn resolve_plan(cfg: &RunConfig, searched: Option<&AllocationPlan>) -> Result<AllocationPlan> {
    let shape = PlanShape::new(cfg.model.layers, &cfg.model.targets(), cfg.bilevel.e_max, cfg.bilevel.r_max)?;
    let need_search = || {
        searched.ok_or_else(|| Error::InvalidArgument(format!("{:?} allocation needs a searched plan", cfg.allocation)))
    };
    let mut plan = match &cfg.allocation {
        AllocationSource::Guilomo => need_search()?.clone(),
        AllocationSource::Uniform { experts, rank } => uniform_allocation(&shape, *experts, *rank)?,
        AllocationSource::UniformMatched => {
            let reference = need_search()?;
            let modules = reference.modules().count();
            let experts = (reference.total_experts() as f64 / modules as f64).round().max(1.0) as usize;
            uniform_with_total_rank(&shape, experts, reference.total_rank())?
        }
        AllocationSource::MolaGroup { groups, rank } => mola_group_allocation(&shape, *groups, *rank)?,
        AllocationSource::NormalER {
            expert_budget,
            rank_budget,
        } => normal_plan(&shape, *expert_budget, *rank_budget)?,
        AllocationSource::File { path } => AllocationPlan::load(path)?,
    };
    if !matches!(cfg.allocation, AllocationSource::Guilomo | AllocationSource::File { .. }) {
        plan.metadata.seed = cfg.bilevel.seed;
    }
    Ok(plan)
}

#[derive(Debug, Clone)]
pub struct TrainRun<S: Scalar> {
    pub model: ToyTransformer<S>,
    pub report: FinetuneReport,
}

/// Builds the final model for `plan` and fine-tunes it on the full training
/// set. With a search checkpoint the adapters start from `π*(T)` pruned to
/// the plan; otherwise they are freshly initialized from the run seed.
pub fn train<S: Scalar>(
    cfg: &RunConfig,
    plan: &AllocationPlan,
    search: Option<&SearchCheckpoint<S>>,
    out: Option<&Path>,
) -> Result<TrainRun<S>> {
    cfg.validate()?;
    let mut model = match search {
        Some(ck) => ck.warm_model()?.materialize(plan)?,
        None => ToyTransformer::from_plan(&cfg.model, plan, &cfg.moe_settings(), cfg.moe.c_b, cfg.bilevel.seed)?,
    };
    let (train, eval) = task_data(cfg)?;
    let report = finetune(&mut model, &train, &eval, &cfg.finetune, cfg.bilevel.seed)?;
    if let Some(out) = out {
        let dir = out.join(FINAL_DIR);
        fs::create_dir_all(&dir)?;
        let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
        for e in &report.epochs {
            w.serialize(e)?;
        }
        w.flush()?;
        save_final(&final_checkpoint_dir(out), cfg, &model, plan)?;
        plan.save(&dir.join(PLAN_FILE))?;
    }
    Ok(TrainRun { model, report })
}

/// Eval-set metrics of a model under the configured task.
pub fn evaluate_model<S: Scalar>(cfg: &RunConfig, model: &ToyTransformer<S>) -> Result<EvalMetrics> {
    let (_, eval) = task_data(cfg)?;
    evaluate(model, &eval, cfg.finetune.batch_size)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub name: String,
    pub seed: u64,
    pub total_rank: usize,
    pub total_experts: usize,
    pub trainable: usize,
    pub eval_sft: f64,
    pub eval_accuracy: f64,
}

/// For each seed: one search, then every named allocation source trained
/// from the same search checkpoint. Rows are written to `compare.csv` under
/// `out` when given.
pub fn compare<S: Scalar>(
    cfg: &RunConfig,
    sources: &[(String, AllocationSource)],
    seeds: &[u64],
    out: &Path,
) -> Result<Vec<CompareRow>> {
    if sources.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("compare needs at least one source and one seed".into()));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        let mut run_cfg = cfg.clone();
        run_cfg.bilevel.seed = seed;
        let seed_dir = out.join(format!("seed_{seed}"));
        let searched = search::<S>(&run_cfg, &seed_dir, None)?;
        for (name, source) in sources {
            let mut c = run_cfg.clone();
            c.allocation = source.clone();
            let plan = resolve_plan(&c, Some(&searched.plan))?;
            let run = train(&c, &plan, Some(&searched.checkpoint), Some(&seed_dir.join(name)))?;
            let last = evaluate_model(&c, &run.model)?;
            rows.push(CompareRow {
                name: name.clone(),
                seed,
                total_rank: plan.total_rank(),
                total_experts: plan.total_experts(),
                trainable: run.model.trainable_count(),
                eval_sft: last.sft,
                eval_accuracy: last.accuracy,
            });
        }
    }
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("compare.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}
