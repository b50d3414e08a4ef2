//! Style blending module.
//!
//! Stacked multi-head cross-attention layers exchange information between the source and
//! target style streams. The last layer's two attention outputs become per-cell blend
//! weights (a two-way softmax), which convexly mix the *input* codes:
//!
//! ```text
//! A_t = MHCA(q_s, k_t, v_t)      A_s = MHCA(q_t, k_s, v_s)
//! w_t = exp(A_t) / (exp(A_s) + exp(A_t))     w_s = exp(A_s) / (exp(A_s) + exp(A_t))
//! W'  = w_t * W_t + w_s * W_s
//! ```

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::ops::{self, layer_norm, leaky_relu, softmax_last};
use crate::params::{Linear, ParamInit};
use crate::types::StyleCode;
use crate::{Error, Result};

const NORM_EPS: f64 = 1e-5;

/// Per-cell blend weights `(N, L, D)`; `target + source == 1` everywhere.
#[derive(Debug, Clone)]
pub struct BlendWeights {
    pub target: Tensor,
    pub source: Tensor,
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl Norm {
    fn new(init: &mut ParamInit, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: init.constant(&format!("{name}/gain"), dim, 1.0)?,
            bias: init.constant(&format!("{name}/bias"), dim, 0.0)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.gain, &self.bias, NORM_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub norm: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = leaky_relu(&self.fc1.forward(&self.norm.forward(x)?)?, 0.2)?;
        self.fc2.forward(&h)
    }
}

/// One cross-attention layer. The q/k/v/output projections are shared by both streams.
#[derive(Debug, Clone)]
pub struct SbmLayer {
    /// Pre-normalization of the incoming streams; absent on the first layer, which reads
    /// the raw style codes.
    pub norm: Option<Norm>,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    /// Absent on the final layer, whose attention outputs feed the blend weights directly.
    pub ffn: Option<FeedForward>,
}

impl SbmLayer {
    fn new(init: &mut ParamInit, index: usize, dim: usize, last: bool) -> Result<Self> {
        let name = format!("layer{index}");
        let norm = if index > 0 {
            Some(Norm::new(init, &format!("{name}/norm"), dim)?)
        } else {
            None
        };
        let ffn = if last {
            None
        } else {
            Some(FeedForward {
                norm: Norm::new(init, &format!("{name}/ffn_norm"), dim)?,
                fc1: init.linear(&format!("{name}/ffn1"), dim, 2 * dim, true)?,
                fc2: init.linear(&format!("{name}/ffn2"), 2 * dim, dim, true)?,
            })
        };
        Ok(Self {
            norm,
            q: init.linear(&format!("{name}/q"), dim, dim, true)?,
            k: init.linear(&format!("{name}/k"), dim, dim, true)?,
            v: init.linear(&format!("{name}/v"), dim, dim, true)?,
            out: init.linear(&format!("{name}/out"), dim, dim, true)?,
            ffn,
        })
    }

    /// Returns `(A_t, A_s)` for the given source and target streams.
    pub fn attention(&self, source: &Tensor, target: &Tensor, heads: usize) -> Result<(Tensor, Tensor)> {
        let (s, t) = match &self.norm {
            Some(norm) => (norm.forward(source)?, norm.forward(target)?),
            None => (source.clone(), target.clone()),
        };
        let (qs, ks, vs) = (self.q.forward(&s)?, self.k.forward(&s)?, self.v.forward(&s)?);
        let (qt, kt, vt) = (self.q.forward(&t)?, self.k.forward(&t)?, self.v.forward(&t)?);
        let a_t = cross_attention(&qs, &kt, &vt, heads, &self.out)?;
        let a_s = cross_attention(&qt, &ks, &vs, heads, &self.out)?;
        Ok((a_t, a_s))
    }
}

/// Scaled dot-product attention per head, heads concatenated, before any output projection.
/// Inputs are `(N, L, D)`; `D` must be divisible by `heads`.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (n, lq, d) = q.dims3()?;
    let (nk, lk, dk) = k.dims3()?;
    if k.dims() != v.dims() || nk != n || dk != d {
        return Err(Error::shape(format!(
            "attention q {:?}, k {:?}, v {:?}",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape(format!("width {d} not divisible by {heads} heads")));
    }
    let hd = d / heads;
    let split = |x: &Tensor, l: usize| -> Result<Tensor> {
        Ok(x.reshape((n, l, heads, hd))?.transpose(1, 2)?.contiguous()?)
    };
    let (qh, kh, vh) = (split(q, lq)?, split(k, lk)?, split(v, lk)?);
    let scores = (qh.matmul(&kh.t()?.contiguous()?)? / (hd as f64).sqrt())?;
    let probs = softmax_last(&scores)?;
    let out = probs.matmul(&vh)?;
    Ok(out.transpose(1, 2)?.contiguous()?.reshape((n, lq, d))?)
}

/// Multi-head cross-attention: queries from one stream, keys and values from the other.
pub fn cross_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, out: &Linear) -> Result<Tensor> {
    out.forward(&attend(q, k, v, heads)?)
}

/// Two-way softmax across the target/source pair, per cell, shifted by the pairwise max.
pub fn blend_normalize(a_t: &Tensor, a_s: &Tensor) -> Result<BlendWeights> {
    if a_t.dims() != a_s.dims() {
        return Err(Error::shape(format!(
            "attention maps {:?} and {:?} differ",
            a_t.dims(),
            a_s.dims()
        )));
    }
    for (name, t) in [("A_t", a_t), ("A_s", a_s)] {
        if !ops::to_f64_vec(t)?.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                term: name.into(),
                step: None,
            });
        }
    }
    let max = a_t.maximum(a_s)?.detach();
    let e_t = a_t.sub(&max)?.exp()?;
    let e_s = a_s.sub(&max)?.exp()?;
    let denom = (&e_t + &e_s)?;
    Ok(BlendWeights {
        target: e_t.div(&denom)?,
        source: e_s.div(&denom)?,
    })
}

#[derive(Debug, Clone)]
pub struct Sbm {
    pub layers: Vec<SbmLayer>,
    pub heads: usize,
    pub style_count: usize,
    pub style_dim: usize,
}

impl Sbm {
    pub fn new(init: &mut ParamInit, cfg: &ModelConfig) -> Result<Self> {
        Self::with_shape(init, cfg.sbm_layers, cfg.style_count, cfg.style_dim, cfg.heads)
    }

    pub fn with_shape(
        init: &mut ParamInit,
        layers: usize,
        style_count: usize,
        style_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if layers == 0 || heads == 0 || style_dim % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "blending module needs >=1 layer and heads dividing {style_dim}"
            )));
        }
        let layers = (0..layers)
            .map(|i| SbmLayer::new(init, i, style_dim, i + 1 == layers))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            heads,
            style_count,
            style_dim,
        })
    }

    /// Final-layer attention outputs `(A_t, A_s)` after the residual stream updates.
    pub fn attention_maps(&self, w_s: &Tensor, w_t: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut s = w_s.clone();
        let mut t = w_t.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (a_t, a_s) = layer.attention(&s, &t, self.heads)?;
            if i == last {
                return Ok((a_t, a_s));
            }
            // Source positions receive the target attention and vice versa.
            s = (s + a_t)?;
            t = (t + a_s)?;
            if let Some(ffn) = &layer.ffn {
                s = (&s + ffn.forward(&s)?)?;
                t = (&t + ffn.forward(&t)?)?;
            }
        }
        unreachable!("a blending module always has at least one layer")
    }

    /// Blends a source and a target code into the swapped code.
    pub fn blend(&self, w_s: &StyleCode, w_t: &StyleCode) -> Result<(StyleCode, BlendWeights)> {
        let (ws, wt) = (w_s.tensor(), w_t.tensor());
        let (_, l, d) = ws.dims3()?;
        if ws.dims() != wt.dims() || (l, d) != (self.style_count, self.style_dim) {
            return Err(Error::shape(format!(
                "blend inputs {:?} and {:?}, module expects (N, {}, {})",
                ws.dims(),
                wt.dims(),
                self.style_count,
                self.style_dim
            )));
        }
        let (a_t, a_s) = self.attention_maps(ws, wt)?;
        let weights = blend_normalize(&a_t, &a_s)?;
        let blended = (weights.target.mul(wt)? + weights.source.mul(ws)?)?;
        Ok((StyleCode(blended), weights))
    }
}
