//! LoRA mixture-of-experts projections.
//!
//! Each adapted projection keeps a frozen base matrix `W0 (d1 x d2)`, a
//! router `W_r (d2 x N)` and `N` low-rank experts in SVD-like form
//! `P (d1 x r) · diag(Λ) · Q (r x d2)`. Activations are row-major, so a batch
//! of tokens `X (n x d2)` maps to `X W0ᵀ + Σ_i G_i ⊙ (X Qᵢᵀ diag(Λᵢ) Pᵢᵀ)`.
//!
//! Two forms exist:
//! * [`LoraMoeLayerState`], the search form, carries `e_max` experts of rank
//!   `r_max` gated by virtual-vector masks derived from selection vectors;
//! * [`MaterializedLayer`], the final form, carries exactly the allocated
//!   experts at their allocated ranks.

use std::collections::HashMap;

use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gsv::{build_rank_mask, GuidedSelectionVector, MaskForm, SelectionKind, VirtualVector};
use crate::numerics::{argmax, softmax, top_k_indices, Graph, Scalar, Tensor, Var};

const Q_INIT_STD: f64 = 0.02;
const ROUTER_INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// The plain `P (M ⊙ Λ ⊙ Qx)` product.
    Off,
    /// Multiplies the delta by `alpha / r` with `r` the active rank.
    #[default]
    AlphaOverR,
}

/// Shape and routing hyperparameters shared by every adapted projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoeSettings {
    pub e_max: usize,
    pub r_max: usize,
    pub routing_k: usize,
    pub scale_mode: ScaleMode,
    pub alpha: f64,
}

impl Default for MoeSettings {
    fn default() -> Self {
        MoeSettings {
            e_max: 8,
            r_max: 8,
            routing_k: 2,
            scale_mode: ScaleMode::AlphaOverR,
            alpha: 16.0,
        }
    }
}

impl MoeSettings {
    pub fn validate(&self) -> Result<()> {
        if self.e_max == 0 || self.r_max == 0 || self.routing_k == 0 {
            return Err(Error::Config(format!(
                "e_max, r_max and routing_k must be >= 1 (got {}, {}, {})",
                self.e_max, self.r_max, self.routing_k
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// One low-rank expert `P diag(Λ) Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraExpert<S: Scalar> {
    pub p: Tensor<S>,
    pub lambda: Tensor<S>,
    pub q: Tensor<S>,
    /// LoRA alpha.
    pub scale: S,
}

impl<S: Scalar> LoraExpert<S> {
    /// `P = 0`, `Λ = 1`, `Q ~ N(0, 0.02²)`: the initial delta is zero.
    pub fn init<R: Rng>(d1: usize, d2: usize, rank: usize, scale: S, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, Q_INIT_STD).expect("valid std");
        let q = Array2::from_shape_simple_fn((rank, d2), || S::of(normal.sample(rng)));
        LoraExpert {
            p: Tensor::trainable(Array2::zeros((d1, rank))),
            lambda: Tensor::trainable(Array2::ones((1, rank))),
            q: Tensor::trainable(q),
            scale,
        }
    }

    pub fn rank(&self) -> usize {
        self.lambda.value.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.p.value.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.q.value.ncols()
    }

    pub fn scale_factor(&self, mode: ScaleMode, active_rank: usize) -> S {
        match mode {
            ScaleMode::Off => S::one(),
            ScaleMode::AlphaOverR => self.scale / S::of(active_rank as f64),
        }
    }

    fn check(&self) -> Result<()> {
        let r = self.rank();
        if self.p.value.ncols() != r || self.q.value.nrows() != r || self.lambda.value.nrows() != 1 {
            return Err(Error::shape(
                "lora_expert",
                format!(
                    "P {:?}, Λ {:?}, Q {:?}",
                    self.p.value.dim(),
                    self.lambda.value.dim(),
                    self.q.value.dim()
                ),
            ));
        }
        Ok(())
    }

    fn trainables(&self) -> [&Tensor<S>; 3] {
        [&self.p, &self.lambda, &self.q]
    }

    fn trainables_mut(&mut self) -> [&mut Tensor<S>; 3] {
        [&mut self.p, &mut self.lambda, &mut self.q]
    }

    /// Records `scale · ((X Qᵀ) ⊙ coef) Pᵀ` on the graph where `coef` is the
    /// rank mask times Λ (or Λ alone).
    fn forward(
        &self,
        g: &mut Graph<S>,
        x: Var,
        rank_mask: Option<Var>,
        factor: S,
        binder: &mut Binder<S>,
    ) -> Result<Var> {
        let q = binder.param(g, &self.q);
        let p = binder.param(g, &self.p);
        let lam = binder.param(g, &self.lambda);
        let coef = match rank_mask {
            Some(m) => g.mul(m, lam)?,
            None => lam,
        };
        let coef = g.scale(coef, factor);
        let u = g.matmul_t(x, q)?;
        let u = g.mul_row(u, coef)?;
        g.matmul_t(u, p)
    }
}

/// Router weights `W_r (d2 x N)`; token logits are `x W_r`.
#[derive(Debug, Clone, PartialEq)]
pub struct Router<S: Scalar> {
    pub w_r: Tensor<S>,
}

impl<S: Scalar> Router<S> {
    pub fn init<R: Rng>(d2: usize, experts: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, ROUTER_INIT_STD).expect("valid std");
        Router {
            w_r: Tensor::trainable(Array2::from_shape_simple_fn((d2, experts), || {
                S::of(normal.sample(rng))
            })),
        }
    }

    pub fn experts(&self) -> usize {
        self.w_r.value.ncols()
    }
}

/// Binds model tensors to graph leaves for one forward pass and remembers
/// which leaf belongs to which tensor, so gradients can be read back.
#[derive(Debug, Default)]
pub struct Binder<S: Scalar> {
    train_params: bool,
    train_gsvs: bool,
    params: HashMap<usize, Var>,
    gsvs: HashMap<usize, Var>,
    _marker: std::marker::PhantomData<S>,
}

fn key<S: Scalar>(t: &Tensor<S>) -> usize {
    t as *const Tensor<S> as usize
}

impl<S: Scalar> Binder<S> {
    /// `train_params`: model tensors with `requires_grad` become gradient
    /// leaves. `train_gsvs`: selection-vector masks carry straight-through
    /// gradients to their logits.
    pub fn new(train_params: bool, train_gsvs: bool) -> Self {
        Binder {
            train_params,
            train_gsvs,
            params: HashMap::new(),
            gsvs: HashMap::new(),
            _marker: std::marker::PhantomData,
        }
    }

    pub fn param(&mut self, g: &mut Graph<S>, t: &Tensor<S>) -> Var {
        if self.train_params && t.requires_grad {
            let v = g.leaf(t.value.clone(), true);
            self.params.insert(key(t), v);
            v
        } else {
            g.constant(t.value.clone())
        }
    }

    pub fn gsv_mask(&mut self, g: &mut Graph<S>, gsv: &GuidedSelectionVector<S>) -> Result<Var> {
        let (mask, logits) = gsv.mask_var(g, self.train_gsvs)?;
        if let Some(l) = logits {
            self.gsvs.insert(key(&gsv.logits), l);
        }
        Ok(mask)
    }

    /// Gradient of a bound tensor after backward; zeros when the tensor
    /// did not take part in the forward pass.
    pub fn grad_of(&self, g: &Graph<S>, t: &Tensor<S>) -> Array2<S> {
        self.params
            .get(&key(t))
            .or_else(|| self.gsvs.get(&key(t)))
            .and_then(|v| g.grad(*v))
            .cloned()
            .unwrap_or_else(|| Array2::zeros(t.value.dim()))
    }
}

/// Per-projection routing statistics for the balance loss.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingStats<S: Scalar> {
    pub tokens: usize,
    /// Number of selectable experts (the `N` of the balance loss).
    pub active: usize,
    /// Fraction of tokens whose top-1 expert is `i`.
    pub top1_fraction: Vec<S>,
    /// Mean router probability of expert `i`.
    pub mean_prob: Vec<S>,
    /// Graph node holding `mean_prob` when produced by a forward pass.
    pub mean_prob_var: Option<Var>,
}

impl<S: Scalar> RoutingStats<S> {
    pub fn from_fractions(tokens: usize, top1_fraction: Vec<S>, mean_prob: Vec<S>) -> Result<Self> {
        if top1_fraction.len() != mean_prob.len() {
            return Err(Error::shape(
                "routing_stats",
                format!("{} fractions vs {} probabilities", top1_fraction.len(), mean_prob.len()),
            ));
        }
        Ok(RoutingStats {
            tokens,
            active: top1_fraction.len(),
            top1_fraction,
            mean_prob,
            mean_prob_var: None,
        })
    }

    fn from_probs(g: &mut Graph<S>, probs: Var, active: usize) -> Result<Self> {
        let pv = g.value(probs);
        let (n, experts) = pv.dim();
        let mut counts = vec![0usize; experts];
        let mut tag: u64 = 0x811c_9dc5;
        for row in pv.rows() {
            let vals: Vec<S> = row.to_vec();
            let best = argmax(&vals);
            counts[best] += 1;
            tag = (tag ^ best as u64).wrapping_mul(0x100_0000_01b3);
        }
        g.record_decision(tag);
        let denom = S::of(n as f64);
        let top1_fraction = counts.iter().map(|&c| S::of(c as f64) / denom).collect();
        let mean = g.mean_rows(probs)?;
        Ok(RoutingStats {
            tokens: n,
            active,
            top1_fraction,
            mean_prob: g.value(mean).iter().copied().collect(),
            mean_prob_var: Some(mean),
        })
    }
}

/// `c_B · N · Σ_i f_i P_i`.
pub fn balance_loss<S: Scalar>(stats: &RoutingStats<S>, c_b: S) -> Result<S> {
    if stats.tokens == 0 {
        return Err(Error::InvalidArgument("balance loss over an empty batch".into()));
    }
    let tol = S::of(1e-9);
    let fs: S = stats.top1_fraction.iter().copied().sum();
    let ps: S = stats.mean_prob.iter().copied().sum();
    if (fs - S::one()).abs() > tol || (ps - S::one()).abs() > tol {
        return Err(Error::InvalidArgument(format!(
            "routing fractions must sum to 1 (f: {fs}, P: {ps})"
        )));
    }
    let dot: S = stats
        .top1_fraction
        .iter()
        .zip(&stats.mean_prob)
        .map(|(&f, &p)| f * p)
        .sum();
    Ok(c_b * S::of(stats.active as f64) * dot)
}

/// Differentiable balance loss on a graph (gradient flows through `P`).
pub fn balance_loss_var<S: Scalar>(g: &mut Graph<S>, stats: &RoutingStats<S>, c_b: S) -> Result<Var> {
    if stats.tokens == 0 {
        return Err(Error::InvalidArgument("balance loss over an empty batch".into()));
    }
    let p = stats
        .mean_prob_var
        .ok_or_else(|| Error::InvalidArgument("routing stats carry no graph node".into()))?;
    let n = stats.top1_fraction.len();
    let f = g.constant(Array2::from_shape_vec((1, n), stats.top1_fraction.clone()).expect("row"));
    let prod = g.mul(p, f)?;
    let total = g.sum(prod);
    Ok(g.scale(total, c_b * S::of(stats.active as f64)))
}

/// Low-rank delta of one expert for a single input vector:
/// `factor · P (mask ⊙ Λ ⊙ Q x)`.
pub fn expert_delta<S: Scalar>(
    expert: &LoraExpert<S>,
    x: &[S],
    rank_mask: &VirtualVector<S>,
    mode: ScaleMode,
) -> Result<Vec<S>> {
    expert.check()?;
    if rank_mask.form != MaskForm::Multiplicative || rank_mask.size() != expert.rank() {
        return Err(Error::shape(
            "expert_delta",
            format!("rank mask of size {} for rank {}", rank_mask.size(), expert.rank()),
        ));
    }
    if x.len() != expert.in_dim() {
        return Err(Error::shape(
            "expert_delta",
            format!("input length {} for Q with {} columns", x.len(), expert.in_dim()),
        ));
    }
    let factor = expert.scale_factor(mode, rank_mask.selection);
    let qx: Vec<S> = expert
        .q
        .value
        .rows()
        .into_iter()
        .map(|row| row.iter().zip(x).map(|(&a, &b)| a * b).sum())
        .collect();
    let coef: Vec<S> = (0..expert.rank())
        .map(|j| rank_mask.entries[j] * expert.lambda.value[[0, j]] * qx[j])
        .collect();
    Ok(expert
        .p
        .value
        .rows()
        .into_iter()
        .map(|row| factor * row.iter().zip(&coef).map(|(&a, &b)| a * b).sum::<S>())
        .collect())
}

/// Routing weights for one token: softmax of `x W_r + mask`, keep the top
/// `min(k, selection)` entries, renormalize.
pub fn masked_routing<S: Scalar>(
    x: &[S],
    router: &Router<S>,
    expert_mask: &VirtualVector<S>,
    k: usize,
) -> Result<Vec<S>> {
    let w = &router.w_r.value;
    if x.len() != w.nrows() || expert_mask.size() != w.ncols() || expert_mask.form != MaskForm::Additive {
        return Err(Error::shape(
            "masked_routing",
            format!(
                "input {} / mask {} for router {:?}",
                x.len(),
                expert_mask.size(),
                w.dim()
            ),
        ));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("routing k must be >= 1".into()));
    }
    let logits: Vec<S> = (0..w.ncols())
        .map(|j| {
            x.iter().enumerate().map(|(i, &xi)| xi * w[[i, j]]).sum::<S>() + expert_mask.entries[j]
        })
        .collect();
    Ok(renormalized_top_k(&softmax(&logits), k.min(expert_mask.selection)))
}

fn renormalized_top_k<S: Scalar>(probs: &[S], k: usize) -> Vec<S> {
    let sel = top_k_indices(probs, k);
    let total: S = sel.iter().map(|&i| probs[i]).sum();
    let mut out = vec![S::zero(); probs.len()];
    for i in sel {
        out[i] = probs[i] / total;
    }
    out
}

fn check_finite<S: Scalar>(g: &Graph<S>, v: Var, layer: &str) -> Result<()> {
    if g.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("activations of {layer}")))
    }
}

/// Shared routing + expert mixing for both layer forms.
#[allow(clippy::too_many_arguments)]
fn mix_experts<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    w0: &Tensor<S>,
    router: &Router<S>,
    expert_mask: Option<Var>,
    active: usize,
    routing_k: usize,
    binder: &mut Binder<S>,
    mut expert_out: impl FnMut(&mut Graph<S>, usize, &mut Binder<S>) -> Result<Var>,
    layer: &str,
) -> Result<(Var, RoutingStats<S>)> {
    let base_w = g.constant(w0.value.clone());
    let mut out = g.matmul_t(x, base_w)?;
    let wr = binder.param(g, &router.w_r);
    let logits = g.matmul(x, wr)?;
    let logits = match expert_mask {
        Some(m) => g.add_row(logits, m)?,
        None => logits,
    };
    let probs = g.softmax_rows(logits);
    let gates = g.top_k_renorm(probs, routing_k.min(active))?;
    let stats = RoutingStats::from_probs(g, probs, active)?;
    for i in 0..router.experts() {
        // A column that is zero for every token contributes nothing, forward
        // or backward.
        if g.value(gates).column(i).iter().all(|w| *w == S::zero()) {
            continue;
        }
        let delta = expert_out(g, i, binder)?;
        let gate = g.column(gates, i)?;
        let weighted = g.mul_col(delta, gate)?;
        out = g.add(out, weighted)?;
    }
    check_finite(g, out, layer)?;
    Ok((out, stats))
}

/// Search-time state of one adapted projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraMoeLayerState<S: Scalar> {
    /// Frozen `d1 x d2` base weight.
    pub w0: Tensor<S>,
    pub router: Router<S>,
    pub experts: Vec<LoraExpert<S>>,
    pub expert_gsv: GuidedSelectionVector<S>,
    pub rank_gsvs: Vec<GuidedSelectionVector<S>>,
    pub routing_k: usize,
    pub scale_mode: ScaleMode,
}

impl<S: Scalar> LoraMoeLayerState<S> {
    pub fn init<R: Rng>(w0: Array2<S>, settings: &MoeSettings, rng: &mut R) -> Result<Self> {
        settings.validate()?;
        let (d1, d2) = w0.dim();
        let router = Router::init(d2, settings.e_max, rng);
        let experts = (0..settings.e_max)
            .map(|_| LoraExpert::init(d1, d2, settings.r_max, S::of(settings.alpha), rng))
            .collect();
        let expert_gsv = GuidedSelectionVector::init(settings.e_max, rng.random(), SelectionKind::Expert)?;
        let rank_gsvs = (0..settings.e_max)
            .map(|_| GuidedSelectionVector::init(settings.r_max, rng.random(), SelectionKind::Rank))
            .collect::<Result<Vec<_>>>()?;
        Ok(LoraMoeLayerState {
            w0: Tensor::frozen(w0),
            router,
            experts,
            expert_gsv,
            rank_gsvs,
            routing_k: settings.routing_k,
            scale_mode: settings.scale_mode,
        })
    }

    pub fn e_max(&self) -> usize {
        self.experts.len()
    }

    pub fn r_max(&self) -> usize {
        self.experts.first().map_or(0, |e| e.rank())
    }

    pub fn d1(&self) -> usize {
        self.w0.value.nrows()
    }

    pub fn d2(&self) -> usize {
        self.w0.value.ncols()
    }

    /// Current `(n★, [m★_1, …, m★_{e_max}])`.
    pub fn selections(&self) -> (usize, Vec<usize>) {
        (
            self.expert_gsv.selected_index(),
            self.rank_gsvs.iter().map(|g| g.selected_index()).collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.e_max();
        if e == 0
            || self.router.experts() != e
            || self.rank_gsvs.len() != e
            || self.expert_gsv.size() != e
            || self.expert_gsv.kind != SelectionKind::Expert
        {
            return Err(Error::shape(
                "lora_moe_layer",
                format!(
                    "{} experts, router {}, {} rank vectors, expert vector {}",
                    e,
                    self.router.experts(),
                    self.rank_gsvs.len(),
                    self.expert_gsv.size()
                ),
            ));
        }
        let r = self.r_max();
        for (j, ex) in self.experts.iter().enumerate() {
            ex.check()?;
            if ex.rank() != r
                || ex.out_dim() != self.d1()
                || ex.in_dim() != self.d2()
                || self.rank_gsvs[j].size() != r
                || self.rank_gsvs[j].kind != SelectionKind::Rank
            {
                return Err(Error::shape("lora_moe_layer", format!("expert {j} inconsistent")));
            }
        }
        Ok(())
    }

    /// Masked forward `h' = X W0ᵀ + Σ_i Ĝ_i · factor_i · P_i(M_R,i ⊙ Λ_i ⊙ Q_i x)`.
    /// Masks are rebuilt from the current selection-vector argmaxes.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        x: Var,
        binder: &mut Binder<S>,
        layer: &str,
    ) -> Result<(Var, RoutingStats<S>)> {
        let expert_mask = binder.gsv_mask(g, &self.expert_gsv)?;
        let active = self.expert_gsv.selected_index();
        mix_experts(
            g,
            x,
            &self.w0,
            &self.router,
            Some(expert_mask),
            active,
            self.routing_k,
            binder,
            |g, i, binder| {
                let gsv = &self.rank_gsvs[i];
                let mask = binder.gsv_mask(g, gsv)?;
                let expert = &self.experts[i];
                let factor = expert.scale_factor(self.scale_mode, gsv.selected_index());
                expert.forward(g, x, Some(mask), factor, binder)
            },
            layer,
        )
    }

    pub fn trainables(&self) -> Vec<&Tensor<S>> {
        let mut v = vec![&self.router.w_r];
        for e in &self.experts {
            v.extend(e.trainables());
        }
        v
    }

    pub fn trainables_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut v = vec![&mut self.router.w_r];
        for e in &mut self.experts {
            v.extend(e.trainables_mut());
        }
        v
    }

    pub fn gsvs(&self) -> Vec<&GuidedSelectionVector<S>> {
        std::iter::once(&self.expert_gsv).chain(self.rank_gsvs.iter()).collect()
    }

    pub fn gsvs_mut(&mut self) -> Vec<&mut GuidedSelectionVector<S>> {
        std::iter::once(&mut self.expert_gsv)
            .chain(self.rank_gsvs.iter_mut())
            .collect()
    }

    /// Keeps experts `1..=ranks.len()`, truncating expert `j` to its first
    /// `ranks[j]` rank channels, and the router's first `ranks.len()`
    /// columns. All retained values are copied.
    pub fn materialize(&self, ranks: &[usize]) -> Result<MaterializedLayer<S>> {
        let e = ranks.len();
        if e == 0 || e > self.e_max() {
            return Err(Error::InvalidPlan(format!(
                "expert count {e} outside [1, {}]",
                self.e_max()
            )));
        }
        if let Some(&r) = ranks.iter().find(|&&r| r == 0 || r > self.r_max()) {
            return Err(Error::InvalidPlan(format!(
                "rank {r} outside [1, {}]",
                self.r_max()
            )));
        }
        let experts = ranks
            .iter()
            .zip(&self.experts)
            .map(|(&r, ex)| LoraExpert {
                p: Tensor::trainable(ex.p.value.slice(s![.., ..r]).to_owned()),
                lambda: Tensor::trainable(ex.lambda.value.slice(s![.., ..r]).to_owned()),
                q: Tensor::trainable(ex.q.value.slice(s![..r, ..]).to_owned()),
                scale: ex.scale,
            })
            .collect();
        Ok(MaterializedLayer {
            w0: self.w0.clone(),
            router: Router {
                w_r: Tensor::trainable(self.router.w_r.value.slice(s![.., ..e]).to_owned()),
            },
            experts,
            routing_k: self.routing_k,
            scale_mode: self.scale_mode,
        })
    }
}

/// Final-form projection with exactly the allocated experts and ranks.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterializedLayer<S: Scalar> {
    pub w0: Tensor<S>,
    pub router: Router<S>,
    pub experts: Vec<LoraExpert<S>>,
    pub routing_k: usize,
    pub scale_mode: ScaleMode,
}

impl<S: Scalar> MaterializedLayer<S> {
    /// Fresh final-form layer (not warm-started from a search).
    pub fn init<R: Rng>(w0: Array2<S>, ranks: &[usize], settings: &MoeSettings, rng: &mut R) -> Result<Self> {
        settings.validate()?;
        if ranks.is_empty() || ranks.contains(&0) {
            return Err(Error::InvalidPlan(format!("invalid expert ranks {ranks:?}")));
        }
        let (d1, d2) = w0.dim();
        let router = Router::init(d2, ranks.len(), rng);
        let experts = ranks
            .iter()
            .map(|&r| LoraExpert::init(d1, d2, r, S::of(settings.alpha), rng))
            .collect();
        Ok(MaterializedLayer {
            w0: Tensor::frozen(w0),
            router,
            experts,
            routing_k: settings.routing_k,
            scale_mode: settings.scale_mode,
        })
    }

    pub fn expert_count(&self) -> usize {
        self.experts.len()
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.experts.iter().map(|e| e.rank()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.experts.is_empty() || self.router.experts() != self.experts.len() {
            return Err(Error::shape(
                "materialized_layer",
                format!("{} experts, router {}", self.experts.len(), self.router.experts()),
            ));
        }
        let (d1, d2) = self.w0.value.dim();
        for ex in &self.experts {
            ex.check()?;
            if ex.out_dim() != d1 || ex.in_dim() != d2 {
                return Err(Error::shape("materialized_layer", "expert dims differ from W0"));
            }
        }
        if self.router.w_r.value.nrows() != d2 {
            return Err(Error::shape("materialized_layer", "router input dim differs from W0"));
        }
        Ok(())
    }

    /// `h = X W0ᵀ + Σ_i G_i · (alpha/r_i) P_i diag(Λ_i) Q_i x` with top-k
    /// routing over the retained experts.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        x: Var,
        binder: &mut Binder<S>,
        layer: &str,
    ) -> Result<(Var, RoutingStats<S>)> {
        mix_experts(
            g,
            x,
            &self.w0,
            &self.router,
            None,
            self.expert_count(),
            self.routing_k,
            binder,
            |g, i, binder| {
                let expert = &self.experts[i];
                let factor = expert.scale_factor(self.scale_mode, expert.rank());
                expert.forward(g, x, None, factor, binder)
            },
            layer,
        )
    }

    /// Trainable count: `Σ_j (d1 + d2 + 1) r_j + d2 e`.
    pub fn trainable_count(&self) -> usize {
        self.trainables().iter().map(|t| t.len()).sum()
    }

    pub fn trainables(&self) -> Vec<&Tensor<S>> {
        let mut v = vec![&self.router.w_r];
        for e in &self.experts {
            v.extend(e.trainables());
        }
        v
    }

    pub fn trainables_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut v = vec![&mut self.router.w_r];
        for e in &mut self.experts {
            v.extend(e.trainables_mut());
        }
        v
    }
}

/// Output of a single token through a final-form layer, evaluated directly
/// without a graph.
pub fn layer_forward_final<S: Scalar>(x: &[S], layer: &MaterializedLayer<S>) -> Result<Vec<S>> {
    layer.validate()?;
    let (d1, d2) = layer.w0.value.dim();
    if x.len() != d2 {
        return Err(Error::shape("layer_forward_final", format!("input {} for d2={d2}", x.len())));
    }
    let e = layer.expert_count();
    let mask = crate::gsv::build_expert_mask::<S>(e, e)?;
    let gates = masked_routing(x, &layer.router, &mask, layer.routing_k)?;
    let mut h: Vec<S> = (0..d1)
        .map(|i| (0..d2).map(|j| layer.w0.value[[i, j]] * x[j]).sum())
        .collect();
    for (i, ex) in layer.experts.iter().enumerate() {
        if gates[i] == S::zero() {
            continue;
        }
        let full = build_rank_mask::<S>(ex.rank(), ex.rank())?;
        let delta = expert_delta(ex, x, &full, layer.scale_mode)?;
        for (hv, dv) in h.iter_mut().zip(delta) {
            *hv += gates[i] * dv;
        }
    }
    Ok(h)
}
