//! Guided selection vectors and the virtual-vector masks derived from them.
//!
//! A selection vector holds trainable logits over candidate counts (number of
//! experts, or rank of one expert). Its current choice is the 1-based argmax
//! of the softmax. The choice is turned into a mask that gates the forward
//! pass:
//!
//! * expert selection uses an additive mask (`0` on active slots, a large
//!   negative number elsewhere) added to router logits before the softmax;
//! * rank selection uses a multiplicative `1/0` mask on rank channels.
//!
//! Gradients reaching a mask are mapped back onto the logits by
//! [`stge_backward`] (a straight-through rule that places the summed
//! sensitivity of the active slots at the selected position) followed by the
//! softmax Jacobian.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, softmax, Graph, Scalar, Tensor, Var};

/// Stand-in for `-inf` in additive masks. Softmax still maps it to an exact
/// zero, and products with zero stay finite.
pub const NEG_LARGE: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionKind {
    Expert,
    Rank,
}

impl SelectionKind {
    pub fn mask_form(self) -> MaskForm {
        match self {
            SelectionKind::Expert => MaskForm::Additive,
            SelectionKind::Rank => MaskForm::Multiplicative,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskForm {
    Additive,
    Multiplicative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VirtualVector<S: Scalar> {
    pub form: MaskForm,
    pub entries: Vec<S>,
    /// 1-based number of active leading slots.
    pub selection: usize,
}

impl<S: Scalar> VirtualVector<S> {
    pub fn size(&self) -> usize {
        self.entries.len()
    }

    /// Counts the active prefix by inspecting the entries.
    pub fn active_count(&self) -> usize {
        let active = |v: S| match self.form {
            MaskForm::Additive => v == S::zero(),
            MaskForm::Multiplicative => v == S::one(),
        };
        self.entries.iter().take_while(|&&v| active(v)).count()
    }

    pub fn as_row(&self) -> Array2<S> {
        Array2::from_shape_vec((1, self.entries.len()), self.entries.clone())
            .expect("row shape")
    }
}

fn check_selection(what: &str, selection: usize, size: usize) -> Result<()> {
    if selection == 0 || selection > size {
        return Err(Error::InvalidArgument(format!(
            "{what} selection {selection} outside [1, {size}]"
        )));
    }
    Ok(())
}

/// Additive expert mask: `0` for slots `1..=n_star`, [`NEG_LARGE`] after.
pub fn build_expert_mask<S: Scalar>(n_star: usize, e_max: usize) -> Result<VirtualVector<S>> {
    check_selection("expert", n_star, e_max)?;
    let entries = (1..=e_max)
        .map(|i| if i <= n_star { S::zero() } else { S::of(NEG_LARGE) })
        .collect();
    Ok(VirtualVector {
        form: MaskForm::Additive,
        entries,
        selection: n_star,
    })
}

/// Multiplicative rank mask: `1` for channels `1..=m_star`, `0` after.
pub fn build_rank_mask<S: Scalar>(m_star: usize, r_max: usize) -> Result<VirtualVector<S>> {
    check_selection("rank", m_star, r_max)?;
    let entries = (1..=r_max)
        .map(|i| if i <= m_star { S::one() } else { S::zero() })
        .collect();
    Ok(VirtualVector {
        form: MaskForm::Multiplicative,
        entries,
        selection: m_star,
    })
}

pub fn build_mask<S: Scalar>(kind: SelectionKind, selection: usize, size: usize) -> Result<VirtualVector<S>> {
    match kind {
        SelectionKind::Expert => build_expert_mask(selection, size),
        SelectionKind::Rank => build_rank_mask(selection, size),
    }
}

/// Straight-through rule mapping a mask gradient to a gradient on the
/// selection probabilities.
///
/// The result is zero except at the selected position, which holds
/// `Σ_{i ≤ selection} s_i`. For multiplicative masks `s_i = m_i · ∂L/∂m_i`
/// (parameter times gradient). On an additive mask that product vanishes on
/// the active slots, so there `s_i = ∂L/∂m_i`.
pub fn stge_backward<S: Scalar>(mask_grad: &[S], mask: &VirtualVector<S>) -> Result<Vec<S>> {
    if mask_grad.len() != mask.size() {
        return Err(Error::shape(
            "stge_backward",
            format!("gradient length {} vs mask size {}", mask_grad.len(), mask.size()),
        ));
    }
    let active = mask.selection;
    let total: S = match mask.form {
        MaskForm::Multiplicative => mask_grad[..active]
            .iter()
            .zip(&mask.entries[..active])
            .map(|(&g, &m)| m * g)
            .sum(),
        MaskForm::Additive => mask_grad[..active].iter().copied().sum(),
    };
    let mut out = vec![S::zero(); mask.size()];
    out[active - 1] = total;
    Ok(out)
}

/// Vector-Jacobian product of softmax: `p ⊙ (u − ⟨p, u⟩)`.
pub fn softmax_vjp<S: Scalar>(probs: &[S], upstream: &[S]) -> Vec<S> {
    let dot: S = probs.iter().zip(upstream).map(|(&p, &u)| p * u).sum();
    probs
        .iter()
        .zip(upstream)
        .map(|(&p, &u)| p * (u - dot))
        .collect()
}

/// Trainable logits over `size` candidates plus the softmax/argmax views.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedSelectionVector<S: Scalar> {
    /// `1 x size` logits.
    pub logits: Tensor<S>,
    pub kind: SelectionKind,
}

impl<S: Scalar> GuidedSelectionVector<S> {
    /// Draws logits i.i.d. from a standard normal.
    pub fn init(size: usize, seed: u64, kind: SelectionKind) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidArgument("selection vector size must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<S> = (0..size)
            .map(|_| S::of(StandardNormal.sample(&mut rng)))
            .collect();
        Self::from_logits(logits, kind)
    }

    pub fn from_logits(logits: Vec<S>, kind: SelectionKind) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::InvalidArgument("selection vector size must be >= 1".into()));
        }
        let n = logits.len();
        Ok(GuidedSelectionVector {
            logits: Tensor::trainable(Array2::from_shape_vec((1, n), logits).expect("row")),
            kind,
        })
    }

    pub fn size(&self) -> usize {
        self.logits.value.ncols()
    }

    pub fn logit_values(&self) -> Vec<S> {
        self.logits.value.iter().copied().collect()
    }

    pub fn probabilities(&self) -> Vec<S> {
        softmax(&self.logit_values())
    }

    /// 1-based argmax of the probabilities, ties to the lowest index.
    pub fn selected_index(&self) -> usize {
        argmax(&self.logit_values()) + 1
    }

    pub fn mask(&self) -> VirtualVector<S> {
        build_mask(self.kind, self.selected_index(), self.size()).expect("argmax in range")
    }

    /// Gradient on the logits given the gradient reaching the mask.
    pub fn logit_gradient(&self, mask_grad: &[S]) -> Result<Vec<S>> {
        let h = stge_backward(mask_grad, &self.mask())?;
        Ok(softmax_vjp(&self.probabilities(), &h))
    }

    /// Records this vector's mask on `g`.
    ///
    /// With `trainable` the mask is a custom node fed by the logits (whose
    /// leaf is returned), so a backward sweep lands straight-through
    /// gradients on the logits. Otherwise the mask is a constant.
    pub fn mask_var(&self, g: &mut Graph<S>, trainable: bool) -> Result<(Var, Option<Var>)> {
        let mask = self.mask();
        g.record_decision(mask.selection as u64);
        if !trainable {
            return Ok((g.constant(mask.as_row()), None));
        }
        let logits = g.leaf(self.logits.value.clone(), true);
        let kind = self.kind;
        let out = g.custom(
            &[logits],
            &|inputs| {
                let vals: Vec<S> = inputs[0].iter().copied().collect();
                Ok(build_mask::<S>(kind, argmax(&vals) + 1, vals.len())?.as_row())
            },
            Box::new(move |upstream, inputs, _| {
                let vals: Vec<S> = inputs[0].iter().copied().collect();
                let mask = build_mask::<S>(kind, argmax(&vals) + 1, vals.len()).expect("argmax in range");
                let up: Vec<S> = upstream.iter().copied().collect();
                let h = stge_backward(&up, &mask).expect("mask-sized upstream");
                let grad = softmax_vjp(&softmax(&vals), &h);
                vec![Some(Array2::from_shape_vec((1, grad.len()), grad).expect("row"))]
            }),
        )?;
        Ok((out, Some(logits)))
    }
}
