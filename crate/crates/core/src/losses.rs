//! Generator objective terms and their weighted sum.
//!
//! Every function takes batched tensors and returns a scalar tensor averaged over the batch,
//! so the result can be back-propagated directly.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::ops::logsumexp_last;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub id: f64,
    pub con: f64,
    pub rec: f64,
    pub lm: f64,
    pub swap: f64,
    pub tau: f64,
    /// Adds the positive logit to the contrastive denominator (standard InfoNCE).
    pub con_denominator_includes_positive: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            id: 10.0,
            con: 5.0,
            rec: 1.0,
            lm: 100.0,
            swap: 1.0,
            tau: 0.07,
            con_denominator_includes_positive: false,
        }
    }
}

/// Scalar value of every term for one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub adv_g: f64,
    pub adv_v: f64,
    pub id: f64,
    pub con: f64,
    pub rec: f64,
    pub lm: f64,
    pub swap: f64,
    pub total: f64,
}

/// Unweighted generator terms as differentiable scalars.
#[derive(Debug, Clone)]
pub struct GeneratorTerms {
    pub adv_g: Tensor,
    pub id: Tensor,
    pub con: Tensor,
    pub rec: Tensor,
    pub lm: Tensor,
    pub swap: Tensor,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn half_mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(((a - b)?.sqr()?.mean_all()? * 0.5)?)
}

/// `1 - cos(e_swap, e_src)` averaged over the batch. Inputs are `(N, E)`.
pub fn id_loss(e_swap: &Tensor, e_src: &Tensor) -> Result<Tensor> {
    same_shape(e_swap, e_src, "identity embeddings")?;
    let na = e_swap.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nb = e_src.sqr()?.sum(D::Minus1)?.sqrt()?;
    let norms = crate::ops::to_f64_vec(&(&na * &nb)?)?;
    if norms.iter().any(|&v| v == 0.0 || !v.is_finite()) {
        return Err(Error::InvalidArgument("identity embedding with zero or non-finite norm".into()));
    }
    let cos = (e_swap * e_src)?.sum(D::Minus1)?.div(&(na * nb)?)?;
    Ok(cos.affine(-1.0, 1.0)?.mean_all()?)
}

/// For each sample, the source embeddings of every other sample `(N, N-1, E)`, or `None`
/// for a batch of one.
pub fn batch_negatives(e_src: &Tensor) -> Result<Option<Tensor>> {
    let (n, _) = e_src.dims2()?;
    if n < 2 {
        return Ok(None);
    }
    let rows = (0..n)
        .map(|i| {
            let idx: Vec<u32> = (0..n as u32).filter(|&j| j != i as u32).collect();
            let idx = Tensor::new(idx.as_slice(), e_src.device())?;
            Ok(e_src.index_select(&idx, 0)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(Tensor::stack(&rows, 0)?))
}

/// Contrastive identity objective with logits `S_x = e_swap . e_x / tau`:
/// `-log(exp(S_s) / (exp(S_t) + sum_n exp(S_n)))`. The positive logit joins the denominator
/// only when `include_positive` is set. `negatives` is `(N, M, E)`.
pub fn contrastive_id_loss(
    e_swap: &Tensor,
    e_src: &Tensor,
    e_tgt: &Tensor,
    negatives: Option<&Tensor>,
    tau: f64,
    include_positive: bool,
) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    same_shape(e_swap, e_src, "identity embeddings")?;
    same_shape(e_swap, e_tgt, "identity embeddings")?;
    let (n, e) = e_swap.dims2()?;
    let s_s = ((e_swap * e_src)?.sum_keepdim(1)? / tau)?;
    let s_t = ((e_swap * e_tgt)?.sum_keepdim(1)? / tau)?;
    let mut logits = vec![s_t];
    if let Some(neg) = negatives {
        let (nn, _, ne) = neg.dims3()?;
        if (nn, ne) != (n, e) {
            return Err(Error::shape(format!("negatives {:?} for embeddings ({n}, {e})", neg.dims())));
        }
        let s_n = (neg.broadcast_mul(&e_swap.unsqueeze(1)?)?.sum(2)? / tau)?;
        logits.push(s_n);
    }
    if include_positive {
        logits.push(s_s.clone());
    }
    let denom = logsumexp_last(&Tensor::cat(&logits, 1)?)?;
    Ok((denom - s_s.squeeze(1)?)?.mean_all()?)
}

/// `1/2 mean((output - target)^2)` over samples flagged `same`; other samples contribute
/// exactly zero. The result is averaged over the whole batch.
pub fn reconstruction_loss(output: &Tensor, target: &Tensor, same: &[bool]) -> Result<Tensor> {
    same_shape(output, target, "reconstruction")?;
    let n = output.dims()[0];
    if same.len() != n {
        return Err(Error::shape(format!("{} same-input flags for a batch of {n}", same.len())));
    }
    if !same.iter().any(|&s| s) {
        return Ok(Tensor::zeros((), output.dtype(), output.device())?);
    }
    let per_sample = (output - target)?.sqr()?.reshape((n, ()))?.mean(1)?;
    let mask: Vec<f64> = same.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect();
    let mask = Tensor::new(mask.as_slice(), output.device())?.to_dtype(output.dtype())?;
    Ok(((per_sample * mask)?.mean_all()? * 0.5)?)
}

/// `1/2 mean` of squared coordinate differences between `(N, K, 2)` landmark sets.
pub fn landmark_loss(lm_t: &Tensor, lm_swap: &Tensor) -> Result<Tensor> {
    same_shape(lm_t, lm_swap, "landmark sets")?;
    half_mse(lm_swap, lm_t)
}

/// The two reconstruction terms of the dual swap.
#[derive(Debug, Clone)]
pub struct DualSwap {
    /// `1/2 mean((gen(I_st, I_s) - I_s)^2)`.
    pub to_source: Tensor,
    /// `1/2 mean((gen(I_t, I_st) - I_t)^2)`.
    pub to_target: Tensor,
}

impl DualSwap {
    pub fn total(&self) -> Result<Tensor> {
        Ok((&self.to_source + &self.to_target)?)
    }
}

/// Swaps the already generated `i_st` back in both directions. `gen` takes
/// `(source, target)`; gradients flow through both passes.
pub fn dual_swap_loss<G>(mut gen: G, i_s: &Tensor, i_t: &Tensor, i_st: &Tensor) -> Result<DualSwap>
where
    G: FnMut(&Tensor, &Tensor) -> Result<Tensor>,
{
    same_shape(i_s, i_t, "swap inputs")?;
    same_shape(i_s, i_st, "swap inputs")?;
    let back_s = gen(i_st, i_s)?;
    let back_t = gen(i_t, i_st)?;
    Ok(DualSwap {
        to_source: half_mse(&back_s, i_s)?,
        to_target: half_mse(&back_t, i_t)?,
    })
}

/// Weighted sum of the generator terms. Fails naming the first non-finite term.
pub fn total_generator_loss(terms: &GeneratorTerms, w: &LossWeights) -> Result<(Tensor, LossReport)> {
    let named = [
        ("adv_g", &terms.adv_g, 1.0),
        ("id", &terms.id, w.id),
        ("con", &terms.con, w.con),
        ("rec", &terms.rec, w.rec),
        ("lm", &terms.lm, w.lm),
        ("swap", &terms.swap, w.swap),
    ];
    let mut values = [0.0; 6];
    let mut total: Option<Tensor> = None;
    for (i, (name, t, weight)) in named.into_iter().enumerate() {
        let v = crate::ops::mean_scalar(t)?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                term: name.to_string(),
                step: None,
            });
        }
        values[i] = v;
        let scaled = (t.reshape(())? * weight)?;
        total = Some(match total {
            Some(acc) => (acc + scaled)?,
            None => scaled,
        });
    }
    let total = total.expect("six terms");
    let report = LossReport {
        adv_g: values[0],
        adv_v: 0.0,
        id: values[1],
        con: values[2],
        rec: values[3],
        lm: values[4],
        swap: values[5],
        total: weighted_total(&values, w),
    };
    Ok((total, report))
}

fn weighted_total(v: &[f64; 6], w: &LossWeights) -> f64 {
    v[0] + w.id * v[1] + w.con * v[2] + w.rec * v[3] + w.lm * v[4] + w.swap * v[5]
}
