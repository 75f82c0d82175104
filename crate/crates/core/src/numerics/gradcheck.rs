use super::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared on an absolute scale; central
/// differences cannot resolve them relative to the loss magnitude.
const SCALE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub param: usize,
    pub checked: usize,
    /// Coordinates whose perturbation changed a discrete choice (top-k
    /// selection or argmax) and therefore sit at a non-differentiable point.
    pub excluded: usize,
    pub max_rel_error: f64,
    /// Coordinate, autodiff value, finite-difference value of the worst entry.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn excluded(&self) -> usize {
        self.params.iter().map(|p| p.excluded).sum()
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

fn evaluate<S, F>(f: &mut F, params: &[Tensor<S>], want_grad: bool) -> Result<(Graph<S>, Vec<Var>, Var)>
where
    S: Scalar,
    F: FnMut(&mut Graph<S>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| g.leaf(p.value.clone(), want_grad))
        .collect();
    let loss = f(&mut g, &vars)?;
    let v = g.scalar(loss);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss {v} during gradient check")));
    }
    Ok((g, vars, loss))
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar loss from leaves bound to `params`. At most
/// `max_coords` coordinates per parameter are probed (evenly strided), or
/// all of them when `None`.
pub fn finite_difference_check<S, F>(
    mut f: F,
    params: &mut [Tensor<S>],
    step: f64,
    tol: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: FnMut(&mut Graph<S>, &[Var]) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let (mut g, vars, loss) = evaluate(&mut f, params, true)?;
    let base_decisions = g.decisions().to_vec();
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params.iter())
        .map(|(v, p)| match g.grad(*v) {
            Some(d) => d.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect(),
            None => vec![0.0; p.len()],
        })
        .collect();
    drop(g);

    let h = S::of(step);
    let mut report = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let n = params[pi].len();
        let stride = match max_coords {
            Some(m) if m > 0 && m < n => n.div_ceil(m),
            _ => 1,
        };
        let mut check = ParamCheck {
            param: pi,
            checked: 0,
            excluded: 0,
            max_rel_error: 0.0,
            worst: None,
        };
        for c in (0..n).step_by(stride) {
            let original = params[pi].value.as_slice().expect("standard layout")[c];
            let mut probe = |delta: S, params: &mut [Tensor<S>]| -> Result<(f64, bool)> {
                params[pi].value.as_slice_mut().expect("standard layout")[c] = original + delta;
                let (g, _, loss) = evaluate(&mut f, params, false)?;
                let same = g.decisions() == base_decisions.as_slice();
                Ok((g.scalar(loss).to_f64().unwrap_or(f64::NAN), same))
            };
            let (lp, same_p) = probe(h, params)?;
            let (lm, same_m) = probe(-h, params)?;
            params[pi].value.as_slice_mut().expect("standard layout")[c] = original;
            if !(same_p && same_m) {
                check.excluded += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * step);
            let auto = analytic[pi][c];
            let denom = auto.abs().max(numeric.abs()).max(SCALE_FLOOR);
            let rel = (auto - numeric).abs() / denom;
            check.checked += 1;
            if rel > check.max_rel_error || rel.is_nan() {
                check.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                check.worst = Some((c, auto, numeric));
            }
        }
        report.push(check);
    }
    let passed = report.iter().all(|p| p.max_rel_error <= tol);
    Ok(GradCheckReport {
        params: report,
        tol,
        passed,
    })
}
