use ndarray::{s, Array2};

use super::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct AttentionLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

/// Returns the attention output and the per-(sequence, head) probability
/// matrices in `b * heads + h` order.
pub(crate) fn forward<S: Scalar>(
    q: &Array2<S>,
    k: &Array2<S>,
    v: &Array2<S>,
    layout: AttentionLayout,
) -> (Array2<S>, Vec<Array2<S>>) {
    let AttentionLayout { batch, seq, heads } = layout;
    let dh = q.ncols() / heads;
    let scale = S::of(dh as f64).sqrt().recip();
    let mut out = Array2::zeros(q.dim());
    let mut probs = Vec::with_capacity(batch * heads);
    for b in 0..batch {
        let rows = b * seq..(b + 1) * seq;
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qs = q.slice(s![rows.clone(), cols.clone()]);
            let ks = k.slice(s![rows.clone(), cols.clone()]);
            let vs = v.slice(s![rows.clone(), cols.clone()]);
            let mut p = qs.dot(&ks.t()) * scale;
            for i in 0..seq {
                let mut row = p.row_mut(i);
                let max = (0..=i).map(|j| row[j]).fold(S::neg_infinity(), |m, x| if x > m { x } else { m });
                let mut total = S::zero();
                for j in 0..seq {
                    if j <= i {
                        row[j] = (row[j] - max).exp();
                        total += row[j];
                    } else {
                        row[j] = S::zero();
                    }
                }
                row.mapv_inplace(|x| x / total);
            }
            out.slice_mut(s![rows.clone(), cols]).assign(&p.dot(&vs));
            probs.push(p);
        }
    }
    (out, probs)
}

pub(crate) fn backward<S: Scalar>(
    g: &Array2<S>,
    q: &Array2<S>,
    k: &Array2<S>,
    v: &Array2<S>,
    probs: &[Array2<S>],
    layout: AttentionLayout,
) -> (Array2<S>, Array2<S>, Array2<S>) {
    let AttentionLayout { batch, seq, heads } = layout;
    let dh = q.ncols() / heads;
    let scale = S::of(dh as f64).sqrt().recip();
    let mut dq = Array2::zeros(q.dim());
    let mut dk = Array2::zeros(k.dim());
    let mut dv = Array2::zeros(v.dim());
    for b in 0..batch {
        let rows = b * seq..(b + 1) * seq;
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let p = &probs[b * heads + h];
            let go = g.slice(s![rows.clone(), cols.clone()]);
            let qs = q.slice(s![rows.clone(), cols.clone()]);
            let ks = k.slice(s![rows.clone(), cols.clone()]);
            let vs = v.slice(s![rows.clone(), cols.clone()]);
            dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&go));
            let dp = go.dot(&vs.t());
            let mut ds = &dp * p;
            for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                let dot = row.sum();
                row.zip_mut_with(&prow, |d, &pv| *d = (*d - pv * dot) * scale);
            }
            dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&ks));
            dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qs));
        }
    }
    (dq, dk, dv)
}
