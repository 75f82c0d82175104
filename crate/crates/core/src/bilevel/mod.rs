//! Bilevel search over selection vectors and model weights.
//!
//! Each step `t` runs, in order:
//! 1. a lookahead `π*(t)` from `π(t)` on a `D2` batch, using a clone of the
//!    model optimizer so `π(t)` and its optimizer state stay untouched;
//! 2. a selection-vector update from the loss on a `D1` batch evaluated at
//!    `π*(t)`, with straight-through mask gradients (first order: `π*` is
//!    held constant with respect to the selection vectors);
//! 3. the committed model update from `π(t)` on the same `D2` batch under
//!    the updated selection vectors.

mod optim;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gsv::GuidedSelectionVector;
use crate::numerics::{Scalar, Tensor};

pub use optim::{AdamParams, Optimizer, OptimizerMode, Schedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BilevelConfig {
    /// Total steps `T`; derived from the dataset size when absent.
    pub steps: Option<usize>,
    pub search_epochs: f64,
    pub xi_theta: f64,
    pub xi_g: f64,
    pub optimizer_mode: OptimizerMode,
    pub model_adam: AdamParams,
    pub gsv_adam: AdamParams,
    pub schedule: Schedule,
    pub e_max: usize,
    pub r_max: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BilevelConfig {
    fn default() -> Self {
        BilevelConfig {
            steps: None,
            search_epochs: 3.0,
            xi_theta: 3e-4,
            xi_g: 3e-3,
            optimizer_mode: OptimizerMode::Adaptive,
            model_adam: AdamParams {
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
                weight_decay: 0.01,
            },
            gsv_adam: AdamParams {
                beta1: 0.5,
                beta2: 0.999,
                epsilon: 1e-8,
                weight_decay: 1e-3,
            },
            schedule: Schedule::Cosine,
            e_max: 8,
            r_max: 8,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl BilevelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == Some(0) {
            return Err(Error::Config("search steps T must be >= 1".into()));
        }
        if !(self.search_epochs > 0.0) {
            return Err(Error::Config("search_epochs must be positive".into()));
        }
        if !(self.xi_theta >= 0.0 && self.xi_g >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if self.e_max == 0 || self.r_max == 0 || self.batch_size == 0 {
            return Err(Error::Config("e_max, r_max and batch_size must be >= 1".into()));
        }
        self.model_adam.validate()?;
        self.gsv_adam.validate()
    }

    /// `T = ceil(|D| / batch_size · search_epochs)` unless set explicitly.
    pub fn total_steps(&self, dataset_len: usize) -> usize {
        self.steps.unwrap_or_else(|| {
            ((dataset_len as f64 / self.batch_size as f64) * self.search_epochs)
                .ceil()
                .max(1.0) as usize
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit<E> {
    pub d1: Vec<E>,
    pub d2: Vec<E>,
}

/// Seeded uniform partition into halves; `D1` takes the extra example of an
/// odd-sized set.
pub fn split_dataset<E: Clone>(data: &[E], seed: u64) -> Result<DataSplit<E>> {
    if data.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} examples into two non-empty halves",
            data.len()
        )));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let half = data.len().div_ceil(2);
    Ok(DataSplit {
        d1: idx[..half].iter().map(|&i| data[i].clone()).collect(),
        d2: idx[half..].iter().map(|&i| data[i].clone()).collect(),
    })
}

/// Indices of the batch used at step `t` of a split of `len` examples.
/// Each epoch visits a fresh seeded permutation; the result depends only on
/// the arguments, so an interrupted run can resume at any step.
pub fn batch_indices(len: usize, batch_size: usize, seed: u64, stream: u64, t: usize) -> Vec<usize> {
    let per_epoch = len.div_ceil(batch_size).max(1);
    let (epoch, within) = (t / per_epoch, t % per_epoch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 48) | epoch as u64);
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng);
    let start = within * batch_size;
    idx[start..(start + batch_size).min(len)].to_vec()
}

const STREAM_D1: u64 = 1;
const STREAM_D2: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossParts<S> {
    pub sft: S,
    pub bal: S,
}

impl<S: Scalar> LossParts<S> {
    pub fn total(&self) -> S {
        self.sft + self.bal
    }
}

/// Current discrete choice of one adapted module.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ModuleSelection {
    pub layer: usize,
    pub module: String,
    pub n_star: usize,
    pub m_star: Vec<usize>,
}

/// A model whose weights and selection vectors the search updates.
pub trait SearchProblem<S: Scalar> {
    type Example;

    fn params(&self) -> Vec<&Tensor<S>>;
    fn params_mut(&mut self) -> Vec<&mut Tensor<S>>;
    fn gsvs(&self) -> Vec<&GuidedSelectionVector<S>>;
    fn gsvs_mut(&mut self) -> Vec<&mut GuidedSelectionVector<S>>;

    /// Loss and its gradient with respect to [`SearchProblem::params`], with
    /// selection vectors held fixed.
    fn model_gradients(&self, batch: &[&Self::Example]) -> Result<(LossParts<S>, Vec<Array2<S>>)>;

    /// Loss and the straight-through gradient with respect to each selection
    /// vector's logits, with model weights held fixed.
    fn gsv_gradients(&self, batch: &[&Self::Example]) -> Result<(LossParts<S>, Vec<Array2<S>>)>;

    fn selections(&self) -> Vec<ModuleSelection> {
        Vec::new()
    }
}

/// Gradient evaluations issued so far, by kind and split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct EvalCounters {
    pub model_on_d1: usize,
    pub model_on_d2: usize,
    pub gsv_on_d1: usize,
    pub gsv_on_d2: usize,
}

fn check_loss<S: Scalar>(loss: &LossParts<S>, what: &str) -> Result<()> {
    if loss.sft.is_finite() && loss.bal.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} loss (sft {}, bal {})", loss.sft, loss.bal)))
    }
}

fn param_values<S: Scalar, P: SearchProblem<S>>(problem: &P) -> Vec<Array2<S>> {
    problem.params().iter().map(|t| t.value.clone()).collect()
}

fn set_param_values<S: Scalar, P: SearchProblem<S>>(problem: &mut P, values: &[Array2<S>]) {
    for (t, v) in problem.params_mut().into_iter().zip(values) {
        t.value.assign(v);
    }
}

/// `π*(t)`: one step of a clone of `opt` from the current weights. The
/// problem and `opt` are left unchanged.
pub fn inner_lookahead_step<S: Scalar, P: SearchProblem<S>>(
    problem: &P,
    batch: &[&P::Example],
    opt: &Optimizer<S>,
    lr: f64,
) -> Result<(LossParts<S>, Vec<Array2<S>>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty lookahead batch".into()));
    }
    let (loss, grads) = problem.model_gradients(batch)?;
    check_loss(&loss, "lookahead")?;
    let mut scratch: Vec<Tensor<S>> = problem.params().into_iter().cloned().collect();
    let mut refs: Vec<&mut Tensor<S>> = scratch.iter_mut().collect();
    opt.clone().step(&mut refs, &grads, lr)?;
    Ok((loss, scratch.into_iter().map(|t| t.value).collect()))
}

/// Evaluates the loss at `pi_star` and updates the selection vectors with
/// `gsv_opt`. Model weights are restored before returning.
pub fn gsv_step<S: Scalar, P: SearchProblem<S>>(
    problem: &mut P,
    pi_star: &[Array2<S>],
    batch: &[&P::Example],
    gsv_opt: &mut Optimizer<S>,
    lr: f64,
) -> Result<LossParts<S>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty selection-vector batch".into()));
    }
    let current = param_values(problem);
    set_param_values(problem, pi_star);
    let result = problem.gsv_gradients(batch);
    set_param_values(problem, &current);
    let (loss, grads) = result?;
    check_loss(&loss, "selection-vector")?;
    if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("selection-vector gradient".into()));
    }
    let mut logits: Vec<&mut Tensor<S>> = problem.gsvs_mut().into_iter().map(|g| &mut g.logits).collect();
    gsv_opt.step(&mut logits, &grads, lr)?;
    Ok(loss)
}

/// `π(t+1)` from `π(t)` under the current selection vectors.
pub fn committed_model_step<S: Scalar, P: SearchProblem<S>>(
    problem: &mut P,
    batch: &[&P::Example],
    opt: &mut Optimizer<S>,
    lr: f64,
) -> Result<LossParts<S>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty model batch".into()));
    }
    let (loss, grads) = problem.model_gradients(batch)?;
    check_loss(&loss, "model")?;
    opt.step(&mut problem.params_mut(), &grads, lr)?;
    Ok(loss)
}

/// Everything needed to continue a search from step `step`.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSnapshot<S: Scalar> {
    pub step: usize,
    pub params: Vec<Array2<S>>,
    pub gsv_logits: Vec<Array2<S>>,
    pub model_opt: Optimizer<S>,
    pub gsv_opt: Optimizer<S>,
}

impl<S: Scalar> SearchSnapshot<S> {
    pub fn capture<P: SearchProblem<S>>(problem: &P, model_opt: &Optimizer<S>, gsv_opt: &Optimizer<S>, step: usize) -> Self {
        SearchSnapshot {
            step,
            params: param_values(problem),
            gsv_logits: problem.gsvs().iter().map(|g| g.logits.value.clone()).collect(),
            model_opt: model_opt.clone(),
            gsv_opt: gsv_opt.clone(),
        }
    }

    pub fn restore<P: SearchProblem<S>>(&self, problem: &mut P) -> Result<()> {
        let shapes_ok = problem.params().len() == self.params.len()
            && problem.params().iter().zip(&self.params).all(|(t, v)| t.value.dim() == v.dim())
            && problem.gsvs().len() == self.gsv_logits.len()
            && problem.gsvs().iter().zip(&self.gsv_logits).all(|(g, v)| g.logits.value.dim() == v.dim());
        if !shapes_ok {
            return Err(Error::Checkpoint("snapshot does not match the model's tensors".into()));
        }
        set_param_values(problem, &self.params);
        for (g, v) in problem.gsvs_mut().into_iter().zip(&self.gsv_logits) {
            g.logits.value.assign(v);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr_model: f64,
    pub lr_gsv: f64,
    /// Committed-step loss on the `D2` batch.
    pub sft: f64,
    pub bal: f64,
    /// Selection-vector loss on the `D1` batch at `π*(t)`.
    pub gsv_sft: f64,
    pub selections: Vec<ModuleSelection>,
}

/// Receives per-step metrics and, on failure, the last good state.
pub trait SearchObserver<S: Scalar> {
    fn on_step(&mut self, _metrics: &StepMetrics, _snapshot: &dyn Fn() -> SearchSnapshot<S>) -> Result<()> {
        Ok(())
    }

    fn on_failure(&mut self, _last_good: &SearchSnapshot<S>, _error: &Error) {}
}

/// Observer that ignores everything.
pub struct NoObserver;

impl<S: Scalar> SearchObserver<S> for NoObserver {}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome<S: Scalar> {
    /// Lookahead weights `π*(T)` taken from the final `π(T)`.
    pub pi_star: Vec<Array2<S>>,
    pub steps: usize,
    pub counters: EvalCounters,
    pub model_opt: Optimizer<S>,
    pub gsv_opt: Optimizer<S>,
}

fn gather<'a, E>(data: &'a [E], idx: &[usize]) -> Vec<&'a E> {
    idx.iter().map(|&i| &data[i]).collect()
}

/// Runs steps `resume.step .. total_steps` (or `0 .. total_steps`). On a
/// failing step the problem is rolled back to the start of that step before
/// the error is returned and the observer notified.
pub fn run_search<S: Scalar, P: SearchProblem<S>>(
    problem: &mut P,
    split: &DataSplit<P::Example>,
    cfg: &BilevelConfig,
    total_steps: usize,
    observer: &mut dyn SearchObserver<S>,
    resume: Option<&SearchSnapshot<S>>,
) -> Result<SearchOutcome<S>> {
    cfg.validate()?;
    if split.d1.is_empty() || split.d2.is_empty() {
        return Err(Error::InvalidArgument("both data splits must be non-empty".into()));
    }
    let (mut model_opt, mut gsv_opt, start) = match resume {
        Some(snap) => {
            snap.restore(problem)?;
            (snap.model_opt.clone(), snap.gsv_opt.clone(), snap.step)
        }
        None => (
            Optimizer::new(cfg.optimizer_mode, cfg.model_adam),
            Optimizer::new(cfg.optimizer_mode, cfg.gsv_adam),
            0,
        ),
    };
    let mut counters = EvalCounters::default();
    let bs = cfg.batch_size;
    for t in start..total_steps {
        let last_good = SearchSnapshot::capture(problem, &model_opt, &gsv_opt, t);
        let lr_model = cfg.schedule.lr(cfg.xi_theta, t, total_steps);
        let lr_gsv = cfg.schedule.lr(cfg.xi_g, t, total_steps);
        let b1 = gather(&split.d1, &batch_indices(split.d1.len(), bs, cfg.seed, STREAM_D1, t));
        let b2 = gather(&split.d2, &batch_indices(split.d2.len(), bs, cfg.seed, STREAM_D2, t));
        let step = (|| -> Result<(LossParts<S>, LossParts<S>)> {
            let (_, pi_star) = inner_lookahead_step(problem, &b2, &model_opt, lr_model)?;
            counters.model_on_d2 += 1;
            let gsv_loss = gsv_step(problem, &pi_star, &b1, &mut gsv_opt, lr_gsv)?;
            counters.gsv_on_d1 += 1;
            let loss = committed_model_step(problem, &b2, &mut model_opt, lr_model)?;
            counters.model_on_d2 += 1;
            Ok((loss, gsv_loss))
        })();
        let (loss, gsv_loss) = match step {
            Ok(v) => v,
            Err(e) => {
                last_good.restore(problem)?;
                let e = tag_step(e, t);
                observer.on_failure(&last_good, &e);
                return Err(e);
            }
        };
        let metrics = StepMetrics {
            step: t,
            lr_model,
            lr_gsv,
            sft: num_traits::ToPrimitive::to_f64(&loss.sft).unwrap_or(f64::NAN),
            bal: num_traits::ToPrimitive::to_f64(&loss.bal).unwrap_or(f64::NAN),
            gsv_sft: num_traits::ToPrimitive::to_f64(&gsv_loss.sft).unwrap_or(f64::NAN),
            selections: problem.selections(),
        };
        let snap = || SearchSnapshot::capture(problem, &model_opt, &gsv_opt, t + 1);
        observer.on_step(&metrics, &snap)?;
    }
    let lr_final = cfg.schedule.lr(cfg.xi_theta, total_steps, total_steps);
    let b2 = gather(
        &split.d2,
        &batch_indices(split.d2.len(), bs, cfg.seed, STREAM_D2, total_steps),
    );
    let (_, pi_star) = inner_lookahead_step(problem, &b2, &model_opt, lr_final).map_err(|e| tag_step(e, total_steps))?;
    counters.model_on_d2 += 1;
    Ok(SearchOutcome {
        pi_star,
        steps: total_steps,
        counters,
        model_opt,
        gsv_opt,
    })
}

fn tag_step(e: Error, t: usize) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("search step {t}: {m}")),
        other => other,
    }
}
