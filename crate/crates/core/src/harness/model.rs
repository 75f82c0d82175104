//! Pre-norm decoder-only toy transformer with LoRA-MoE projections.
//!
//! Block: `x += o(attn(q(n(x)), k(n(x)), v(n(x))))`, then
//! `x += down(silu(gate(n(x))) ⊙ up(n(x)))`, with `n` an RMS norm without
//! gain. Embeddings, the output head and every base matrix are frozen random
//! weights drawn from `base_seed`; only adapters train.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::config::{hex, ToyTransformerConfig};
use super::tasks::Example;
use crate::allocation::{self, AllocationPlan, Target};
use crate::bilevel::{LossParts, ModuleSelection, SearchProblem};
use crate::error::{Error, Result};
use crate::gsv::GuidedSelectionVector;
use crate::lora_moe::{balance_loss_var, Binder, LoraMoeLayerState, MaterializedLayer, MoeSettings, RoutingStats};
use crate::numerics::{argmax, Graph, Scalar, Tensor, Var};

const NORM_EPS: f64 = 1e-6;

/// One projection matrix slot of a block.
#[derive(Debug, Clone, PartialEq)]
pub enum Projection<S: Scalar> {
    Frozen(Tensor<S>),
    Search(LoraMoeLayerState<S>),
    Final(MaterializedLayer<S>),
}

impl<S: Scalar> Projection<S> {
    pub fn w0(&self) -> &Tensor<S> {
        match self {
            Projection::Frozen(w) => w,
            Projection::Search(s) => &s.w0,
            Projection::Final(f) => &f.w0,
        }
    }

    fn forward(
        &self,
        g: &mut Graph<S>,
        x: Var,
        binder: &mut Binder<S>,
        name: &str,
    ) -> Result<(Var, Option<RoutingStats<S>>)> {
        match self {
            Projection::Frozen(w) => {
                let w = g.constant(w.value.clone());
                Ok((g.matmul_t(x, w)?, None))
            }
            Projection::Search(s) => s.forward(g, x, binder, name).map(|(v, st)| (v, Some(st))),
            Projection::Final(f) => f.forward(g, x, binder, name).map(|(v, st)| (v, Some(st))),
        }
    }

    fn trainables(&self) -> Vec<&Tensor<S>> {
        match self {
            Projection::Frozen(_) => Vec::new(),
            Projection::Search(s) => s.trainables(),
            Projection::Final(f) => f.trainables(),
        }
    }

    fn trainables_mut(&mut self) -> Vec<&mut Tensor<S>> {
        match self {
            Projection::Frozen(_) => Vec::new(),
            Projection::Search(s) => s.trainables_mut(),
            Projection::Final(f) => f.trainables_mut(),
        }
    }

    /// Names of [`Projection::trainables`] relative to the projection.
    fn trainable_names(&self) -> Vec<String> {
        let experts = match self {
            Projection::Frozen(_) => return Vec::new(),
            Projection::Search(s) => s.experts.len(),
            Projection::Final(f) => f.experts.len(),
        };
        let mut names = vec!["router".to_string()];
        for j in 0..experts {
            names.extend(["p", "lambda", "q"].map(|p| format!("experts.{j}.{p}")));
        }
        names
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<S: Scalar> {
    pub projections: BTreeMap<Target, Projection<S>>,
}

/// Output of one forward pass over a batch.
#[derive(Debug)]
pub struct ForwardOut {
    /// `answers x vocab` logits at the answer positions, in batch order.
    pub logits: Var,
    pub sft: Var,
    pub bal: Option<Var>,
    pub total: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTransformer<S: Scalar> {
    pub config: ToyTransformerConfig,
    pub token_emb: Tensor<S>,
    pub pos_emb: Tensor<S>,
    /// `vocab x d_model`.
    pub lm_head: Tensor<S>,
    pub blocks: Vec<Block<S>>,
    /// Balance-loss coefficient.
    pub c_b: f64,
}

fn gaussian<S: Scalar>(rng: &mut ChaCha8Rng, shape: (usize, usize), std: f64) -> Array2<S> {
    let n = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn(shape, || S::of(n.sample(rng)))
}

impl<S: Scalar> ToyTransformer<S> {
    /// The frozen base model with no adapters.
    pub fn base(config: &ToyTransformerConfig, c_b: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.base_seed);
        let d = config.d_model;
        let token_emb = Tensor::frozen(gaussian(&mut rng, (config.vocab, d), 1.0));
        let pos_emb = Tensor::frozen(gaussian(&mut rng, (config.max_seq, d), 1.0));
        let blocks = (0..config.layers)
            .map(|_| {
                let projections = Target::ALL
                    .iter()
                    .map(|&t| {
                        let (d1, d2) = t.dims(d, config.d_ff);
                        let w = gaussian(&mut rng, (d1, d2), (1.0 / d2 as f64).sqrt());
                        (t, Projection::Frozen(Tensor::frozen(w)))
                    })
                    .collect();
                Block { projections }
            })
            .collect();
        let lm_head = Tensor::frozen(gaussian(&mut rng, (config.vocab, d), (1.0 / d as f64).sqrt()));
        Ok(ToyTransformer {
            config: config.clone(),
            token_emb,
            pos_emb,
            lm_head,
            blocks,
            c_b,
        })
    }

    /// Base model with search-form adapters at `e_max`, `r_max` on every
    /// configured target. Adapter weights and selection vectors come from
    /// `seed`.
    pub fn for_search(config: &ToyTransformerConfig, settings: &MoeSettings, c_b: f64, seed: u64) -> Result<Self> {
        let mut model = Self::base(config, c_b)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets = config.targets();
        for block in &mut model.blocks {
            for t in &targets {
                let slot = block.projections.get_mut(t).expect("all targets present");
                let w0 = slot.w0().value.clone();
                *slot = Projection::Search(LoraMoeLayerState::init(w0, settings, &mut rng)?);
            }
        }
        Ok(model)
    }

    /// Base model with freshly initialized final-form adapters shaped by
    /// `plan`.
    pub fn from_plan(
        config: &ToyTransformerConfig,
        plan: &AllocationPlan,
        settings: &MoeSettings,
        c_b: f64,
        seed: u64,
    ) -> Result<Self> {
        plan.validate()?;
        let mut model = Self::base(config, c_b)?;
        model.check_plan_shape(plan)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (l, t, m) in plan.modules() {
            let slot = model.blocks[l].projections.get_mut(&t).expect("all targets present");
            let w0 = slot.w0().value.clone();
            *slot = Projection::Final(MaterializedLayer::init(w0, &m.ranks, settings, &mut rng)?);
        }
        Ok(model)
    }

    fn check_plan_shape(&self, plan: &AllocationPlan) -> Result<()> {
        let targets = self.config.targets();
        if plan.layers.len() != self.blocks.len() {
            return Err(Error::InvalidPlan(format!(
                "plan has {} layers, model has {}",
                plan.layers.len(),
                self.blocks.len()
            )));
        }
        for (l, layer) in plan.layers.iter().enumerate() {
            if !layer.keys().eq(targets.iter()) {
                return Err(Error::InvalidPlan(format!(
                    "layer {l} allocates {:?} but the model adapts {:?}",
                    layer.keys().collect::<Vec<_>>(),
                    targets
                )));
            }
        }
        Ok(())
    }

    /// Search-form projections per layer.
    pub fn search_layers(&self) -> Vec<BTreeMap<Target, &LoraMoeLayerState<S>>> {
        self.blocks
            .iter()
            .map(|b| {
                b.projections
                    .iter()
                    .filter_map(|(t, p)| match p {
                        Projection::Search(s) => Some((*t, s)),
                        _ => None,
                    })
                    .collect()
            })
            .collect()
    }

    pub fn is_search_form(&self) -> bool {
        self.blocks
            .iter()
            .flat_map(|b| b.projections.values())
            .any(|p| matches!(p, Projection::Search(_)))
    }

    /// Plan from the current selection-vector argmaxes.
    pub fn extract_plan(&self, seed: u64) -> Result<AllocationPlan> {
        if !self.is_search_form() {
            return Err(Error::InvalidArgument("model has no search-form adapters".into()));
        }
        allocation::extract_plan(&self.search_layers(), seed)
    }

    /// Final-form copy pruned to `plan`, keeping the current weights.
    pub fn materialize(&self, plan: &AllocationPlan) -> Result<Self> {
        self.check_plan_shape(plan)?;
        let layers = allocation::materialize(plan, &self.search_layers())?;
        let mut out = self.clone();
        for (block, layer) in out.blocks.iter_mut().zip(layers) {
            for (t, m) in layer {
                block.projections.insert(t, Projection::Final(m));
            }
        }
        Ok(out)
    }

    pub fn params(&self) -> Vec<&Tensor<S>> {
        self.blocks
            .iter()
            .flat_map(|b| b.projections.values())
            .flat_map(|p| p.trainables())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.projections.values_mut())
            .flat_map(|p| p.trainables_mut())
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(l, b)| {
                b.projections
                    .iter()
                    .flat_map(move |(t, p)| p.trainable_names().into_iter().map(move |n| format!("layers.{l}.{t}.{n}")))
            })
            .collect()
    }

    pub fn gsvs(&self) -> Vec<&GuidedSelectionVector<S>> {
        self.search_layers()
            .into_iter()
            .flat_map(|l| l.into_values().flat_map(|s| s.gsvs()))
            .collect()
    }

    pub fn gsvs_mut(&mut self) -> Vec<&mut GuidedSelectionVector<S>> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.projections.values_mut())
            .filter_map(|p| match p {
                Projection::Search(s) => Some(s),
                _ => None,
            })
            .flat_map(|s| s.gsvs_mut())
            .collect()
    }

    pub fn gsv_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (l, layer) in self.search_layers().into_iter().enumerate() {
            for (t, s) in layer {
                names.push(format!("layers.{l}.{t}.gsv.expert"));
                names.extend((0..s.rank_gsvs.len()).map(|j| format!("layers.{l}.{t}.gsv.rank.{j}")));
            }
        }
        names
    }

    /// Every frozen tensor with its name.
    pub fn frozen_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut v = vec![
            ("embed.token".to_string(), &self.token_emb),
            ("embed.pos".to_string(), &self.pos_emb),
            ("lm_head".to_string(), &self.lm_head),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            for (t, p) in &b.projections {
                v.push((format!("layers.{l}.{t}.w0"), p.w0()));
            }
        }
        v
    }

    /// SHA-256 over the bytes of every frozen tensor.
    pub fn base_hash(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (name, t) in self.frozen_tensors() {
            h.update(name.as_bytes());
            buf.clear();
            t.value.iter().for_each(|v| v.write_le(&mut buf));
            h.update(&buf);
        }
        hex(&h.finalize())
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn selections(&self) -> Vec<ModuleSelection> {
        self.search_layers()
            .into_iter()
            .enumerate()
            .flat_map(|(l, layer)| {
                layer.into_iter().map(move |(t, s)| {
                    let (n_star, m_star) = s.selections();
                    ModuleSelection {
                        layer: l,
                        module: t.to_string(),
                        n_star,
                        m_star,
                    }
                })
            })
            .collect()
    }

    /// Records the forward pass for `batch` on `g`. All examples must share
    /// one sequence length.
    pub fn forward(&self, g: &mut Graph<S>, batch: &[&Example], binder: &mut Binder<S>) -> Result<ForwardOut> {
        let first = batch
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let seq = first.tokens.len();
        let cfg = &self.config;
        if seq == 0 || seq > cfg.max_seq {
            return Err(Error::InvalidArgument(format!(
                "sequence length {seq} outside [1, {}]",
                cfg.max_seq
            )));
        }
        let mut tokens = Vec::with_capacity(batch.len() * seq);
        let mut answer_rows = Vec::new();
        let mut targets = Vec::new();
        for (b, ex) in batch.iter().enumerate() {
            if ex.tokens.len() != seq {
                return Err(Error::InvalidArgument("examples in a batch differ in length".into()));
            }
            if ex.answer_positions.is_empty() || ex.answer_positions.len() != ex.targets.len() {
                return Err(Error::InvalidArgument("example has an empty or inconsistent answer span".into()));
            }
            if let Some(&t) = ex.tokens.iter().chain(&ex.targets).find(|&&t| t >= cfg.vocab) {
                return Err(Error::InvalidArgument(format!("token {t} outside vocab {}", cfg.vocab)));
            }
            if let Some(&p) = ex.answer_positions.iter().find(|&&p| p >= seq) {
                return Err(Error::InvalidArgument(format!("answer position {p} beyond length {seq}")));
            }
            tokens.extend_from_slice(&ex.tokens);
            answer_rows.extend(ex.answer_positions.iter().map(|p| b * seq + p));
            targets.extend_from_slice(&ex.targets);
        }
        let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..seq).collect();

        let eps = S::of(NORM_EPS);
        let te = g.constant(self.token_emb.value.clone());
        let pe = g.constant(self.pos_emb.value.clone());
        let te = g.gather_rows(te, &tokens)?;
        let pe = g.gather_rows(pe, &positions)?;
        let mut x = g.add(te, pe)?;
        let mut stats = Vec::new();
        for (l, block) in self.blocks.iter().enumerate() {
            let mut proj = |g: &mut Graph<S>, t: Target, input: Var, binder: &mut Binder<S>| -> Result<Var> {
                let (out, st) = block.projections[&t].forward(g, input, binder, &format!("layer {l} {t}"))?;
                stats.extend(st);
                Ok(out)
            };
            let h = g.rms_norm(x, eps);
            let q = proj(g, Target::Q, h, binder)?;
            let k = proj(g, Target::K, h, binder)?;
            let v = proj(g, Target::V, h, binder)?;
            let a = g.causal_attention(q, k, v, batch.len(), seq, cfg.heads)?;
            let o = proj(g, Target::O, a, binder)?;
            x = g.add(x, o)?;
            let h = g.rms_norm(x, eps);
            let gate = proj(g, Target::Gate, h, binder)?;
            let up = proj(g, Target::Up, h, binder)?;
            let gate = g.silu(gate);
            let act = g.mul(gate, up)?;
            let down = proj(g, Target::Down, act, binder)?;
            x = g.add(x, down)?;
        }
        let h = g.rms_norm(x, eps);
        let rows = g.gather_rows(h, &answer_rows)?;
        let head = g.constant(self.lm_head.value.clone());
        let logits = g.matmul_t(rows, head)?;
        let sft = g.cross_entropy(logits, &targets)?;
        let bal = if stats.is_empty() || self.c_b == 0.0 {
            None
        } else {
            let mut terms = Vec::with_capacity(stats.len());
            for st in &stats {
                terms.push(balance_loss_var(g, st, S::of(self.c_b))?);
            }
            let mut sum = terms[0];
            for &t in &terms[1..] {
                sum = g.add(sum, t)?;
            }
            Some(g.scale(sum, S::of(1.0 / terms.len() as f64)))
        };
        let total = match bal {
            Some(b) => g.add(sft, b)?,
            None => sft,
        };
        Ok(ForwardOut { logits, sft, bal, total })
    }

    fn parts(g: &Graph<S>, out: &ForwardOut) -> LossParts<S> {
        LossParts {
            sft: g.scalar(out.sft),
            bal: out.bal.map_or(S::zero(), |b| g.scalar(b)),
        }
    }

    /// Loss without gradients.
    pub fn loss(&self, batch: &[&Example]) -> Result<LossParts<S>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, batch, &mut Binder::new(false, false))?;
        Ok(Self::parts(&g, &out))
    }

    /// Loss and gradients of the total loss with respect to [`Self::params`].
    pub fn param_gradients(&self, batch: &[&Example]) -> Result<(LossParts<S>, Vec<Array2<S>>)> {
        let mut g = Graph::new();
        let mut binder = Binder::new(true, false);
        let out = self.forward(&mut g, batch, &mut binder)?;
        g.backward(out.total)?;
        let grads = self.params().iter().map(|t| binder.grad_of(&g, t)).collect();
        Ok((Self::parts(&g, &out), grads))
    }

    /// Loss and straight-through gradients with respect to every selection
    /// vector's logits, in [`Self::gsvs`] order.
    pub fn gsv_logit_gradients(&self, batch: &[&Example]) -> Result<(LossParts<S>, Vec<Array2<S>>)> {
        let mut g = Graph::new();
        let mut binder = Binder::new(false, true);
        let out = self.forward(&mut g, batch, &mut binder)?;
        g.backward(out.total)?;
        let grads = self.gsvs().iter().map(|v| binder.grad_of(&g, &v.logits)).collect();
        Ok((Self::parts(&g, &out), grads))
    }

    /// Loss and the number of examples whose every answer position is
    /// predicted exactly.
    pub fn score(&self, batch: &[&Example]) -> Result<(LossParts<S>, usize)> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, batch, &mut Binder::new(false, false))?;
        let preds: Vec<usize> = g.value(out.logits).rows().into_iter().map(|r| argmax(&r.to_vec())).collect();
        let mut rows = preds.iter();
        let correct = batch
            .iter()
            .filter(|ex| {
                let hits = ex.targets.iter().zip(rows.by_ref()).filter(|(t, p)| t == p).count();
                hits == ex.targets.len()
            })
            .count();
        Ok((Self::parts(&g, &out), correct))
    }
}

impl<S: Scalar> SearchProblem<S> for ToyTransformer<S> {
    type Example = Example;

    fn params(&self) -> Vec<&Tensor<S>> {
        ToyTransformer::params(self)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        ToyTransformer::params_mut(self)
    }

    fn gsvs(&self) -> Vec<&GuidedSelectionVector<S>> {
        ToyTransformer::gsvs(self)
    }

    fn gsvs_mut(&mut self) -> Vec<&mut GuidedSelectionVector<S>> {
        ToyTransformer::gsvs_mut(self)
    }

    fn model_gradients(&self, batch: &[&Example]) -> Result<(LossParts<S>, Vec<Array2<S>>)> {
        self.param_gradients(batch)
    }

    fn gsv_gradients(&self, batch: &[&Example]) -> Result<(LossParts<S>, Vec<Array2<S>>)> {
        self.gsv_logit_gradients(batch)
    }

    fn selections(&self) -> Vec<ModuleSelection> {
        ToyTransformer::selections(self)
    }
}
