//! Float64 invariant and gradient checks on toy shapes.

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;

use crate::config::ModelConfig;
use crate::critic::{adv_loss_g, adv_loss_v};
use crate::decoder::{adain_with, adain_with_detached_std};
use crate::extractors::{extract_id, extract_landmarks};
use crate::gradcheck::{self, GradReport, COORDS};
use crate::losses;
use crate::model::FaceSwapModel;
use crate::ops::to_f64_vec;
use crate::params::{Linear, ParamGroup, ParamInit, ParamStore};
use crate::rng::{normal_tensor, seeded_rng, Stream};
use crate::sbm::{blend_normalize, Sbm, SbmLayer};
use crate::types::{FeaturePyramid, StyleCode};
use crate::Result;

const F64: DType = DType::F64;

/// Deliberate defects that the suite must detect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mutation {
    #[default]
    None,
    /// AdaIN whose backward pass treats the standard deviation as a constant.
    AdainDetachedStd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    /// Maximum deviation for invariants, maximum relative error for gradient checks.
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &'static str, value: f64, tolerance: f64) -> Self {
        Self {
            name,
            value,
            tolerance,
            passed: value.is_finite() && value < tolerance,
        }
    }

    fn grad(name: &'static str, r: GradReport) -> Self {
        Self::new(name, r.max_rel_error, gradcheck::TOLERANCE)
    }
}

fn normal(rng: &mut Stream, shape: &[usize], std: f64) -> Result<Tensor> {
    normal_tensor(rng, shape, std, F64, &Device::Cpu)
}

fn var(rng: &mut Stream, shape: &[usize], std: f64) -> Result<Var> {
    Ok(Var::from_tensor(&normal(rng, shape, std)?)?)
}

fn image_var(rng: &mut Stream, n: usize, side: usize) -> Result<Var> {
    Ok(Var::from_tensor(&normal(rng, &[n, 3, side, side], 0.5)?.tanh()?)?)
}

/// `sum(x * u)` for a fixed random `u` scaled so the result stays of order one.
fn projection(rng: &mut Stream, x: &Tensor) -> Result<Tensor> {
    let u = normal(rng, x.dims(), 1.0 / (x.elem_count() as f64).sqrt())?;
    Ok(u)
}

fn dot(x: &Tensor, u: &Tensor) -> Result<Tensor> {
    Ok((x * u)?.sum_all()?)
}

fn group_vars(store: &ParamStore, group: ParamGroup) -> Vec<Var> {
    store.group(group).map(|(_, v)| v.clone()).collect()
}

fn toy_model() -> Result<FaceSwapModel> {
    FaceSwapModel::new(&ModelConfig::toy(), F64)
}

/// Max `|w_t + w_s - 1|` over `samples` random `4 x 8` attention pairs with entries up to
/// +-100. Returns infinity if any weight is not finite.
pub fn partition_of_unity(samples: usize, seed: u64) -> Result<f64> {
    let mut rng = seeded_rng(seed, "selfcheck/partition");
    let n = samples * 32;
    let mut draw = || -> Result<Tensor> {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-100.0..=100.0)).collect();
        Ok(Tensor::from_vec(v, (samples, 4, 8), &Device::Cpu)?)
    };
    let (a_t, a_s) = (draw()?, draw()?);
    let w = blend_normalize(&a_t, &a_s)?;
    let sum = to_f64_vec(&(&w.target + &w.source)?)?;
    Ok(sum.iter().fold(0.0f64, |m, v| if v.is_finite() { m.max((v - 1.0).abs()) } else { f64::INFINITY }))
}

/// Max `|W' - W|` when both inputs equal `W`, over `trials` random desk-scale modules.
pub fn blend_fixed_point(trials: usize, seed: u64) -> Result<f64> {
    let cfg = ModelConfig::desk();
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let mut store = ParamStore::new(F64);
        let sbm = Sbm::new(&mut ParamInit::new(&mut store, "sbm", seed.wrapping_add(trial as u64)), &cfg)?;
        let mut rng = seeded_rng(seed, &format!("selfcheck/fixed-point/{trial}"));
        let w = StyleCode(normal(&mut rng, &[2, cfg.style_count, cfg.style_dim], 1.0)?);
        let (blended, _) = sbm.blend(&w, &w)?;
        let d = to_f64_vec(&(blended.tensor() - w.tensor())?.abs()?)?;
        worst = d.iter().fold(worst, |m, &v| if v.is_finite() { m.max(v) } else { f64::INFINITY });
    }
    Ok(worst)
}

fn identity_linear(d: usize) -> Result<Linear> {
    Ok(Linear {
        weight: Tensor::eye(d, F64, &Device::Cpu)?,
        bias: None,
    })
}

/// A one-layer, one-head module whose projections are all the identity.
pub fn identity_sbm(style_count: usize, style_dim: usize) -> Result<Sbm> {
    let layer = SbmLayer {
        norm: None,
        q: identity_linear(style_dim)?,
        k: identity_linear(style_dim)?,
        v: identity_linear(style_dim)?,
        out: identity_linear(style_dim)?,
        ffn: None,
    };
    Ok(Sbm {
        layers: vec![layer],
        heads: 1,
        style_count,
        style_dim,
    })
}

/// Scalar re-evaluation of a single identity-projection attention and blend.
fn blend_by_hand(ws: &[[f64; 2]; 2], wt: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let attend = |q: &[[f64; 2]; 2], kv: &[[f64; 2]; 2]| {
        let mut out = [[0.0; 2]; 2];
        for i in 0..2 {
            let s: Vec<f64> = (0..2)
                .map(|j| (q[i][0] * kv[j][0] + q[i][1] * kv[j][1]) / 2f64.sqrt())
                .collect();
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            for d in 0..2 {
                out[i][d] = (0..2).map(|j| s[j].exp() / z * kv[j][d]).sum();
            }
        }
        out
    };
    let a_t = attend(ws, wt);
    let a_s = attend(wt, ws);
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for d in 0..2 {
            let g = 1.0 / (1.0 + (a_s[i][d] - a_t[i][d]).exp());
            out[i][d] = g * wt[i][d] + (1.0 - g) * ws[i][d];
        }
    }
    out
}

/// Max difference between the identity-projection module and the scalar evaluation.
pub fn sbm_oracle_error() -> Result<f64> {
    let ws = [[0.3, -1.2], [0.8, 0.5]];
    let wt = [[-0.4, 0.9], [1.1, -0.7]];
    let flat = |m: &[[f64; 2]; 2]| -> Result<StyleCode> {
        Ok(StyleCode(Tensor::from_vec(
            m.iter().flatten().copied().collect::<Vec<_>>(),
            (1, 2, 2),
            &Device::Cpu,
        )?))
    };
    let (got, _) = identity_sbm(2, 2)?.blend(&flat(&ws)?, &flat(&wt)?)?;
    let want = blend_by_hand(&ws, &wt);
    Ok(to_f64_vec(got.tensor())?
        .iter()
        .zip(want.iter().flatten())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
}

/// Max deviation of post-AdaIN per-channel spatial mean and std from `(beta, gamma)`.
pub fn adain_moments(seed: u64) -> Result<f64> {
    let mut rng = seeded_rng(seed, "selfcheck/adain-moments");
    let (n, c, side) = (3, 4, 8);
    let x = (normal(&mut rng, &[n, c, side, side], 2.0)? + 0.7)?;
    let gamma: Vec<f64> = (0..n * c).map(|_| rng.random_range(0.5..2.0)).collect();
    let beta: Vec<f64> = (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g = Tensor::from_vec(gamma.clone(), (n, c), &Device::Cpu)?;
    let b = Tensor::from_vec(beta.clone(), (n, c), &Device::Cpu)?;
    let y = adain_with(&x, &g, &b, crate::decoder::ADAIN_EPS)?;
    let flat = y.reshape((n * c, side * side))?;
    let mean = to_f64_vec(&flat.mean(1)?)?;
    let var = to_f64_vec(&flat.broadcast_sub(&flat.mean_keepdim(1)?)?.sqr()?.mean(1)?)?;
    let mut worst = 0.0f64;
    for i in 0..n * c {
        worst = worst.max((mean[i] - beta[i]).abs()).max((var[i].sqrt() - gamma[i]).abs());
    }
    Ok(worst)
}

pub fn adain_grad(mutation: Mutation) -> Result<GradReport> {
    let mut rng = seeded_rng(0, "selfcheck/adain-grad");
    let x = var(&mut rng, &[2, 3, 4, 4], 1.0)?;
    let gamma = Var::from_tensor(&(normal(&mut rng, &[2, 3], 0.3)? + 1.0)?)?;
    let beta = var(&mut rng, &[2, 3], 0.3)?;
    let u = projection(&mut rng, x.as_tensor())?;
    let f = || {
        let (x, g, b) = (x.as_tensor(), gamma.as_tensor(), beta.as_tensor());
        let y = match mutation {
            Mutation::None => adain_with(x, g, b, crate::decoder::ADAIN_EPS)?,
            Mutation::AdainDetachedStd => adain_with_detached_std(x, g, b, crate::decoder::ADAIN_EPS)?,
        };
        dot(&y, &u)
    };
    gradcheck::check(f, &[x.clone(), gamma.clone(), beta.clone()], COORDS, 1)
}

pub fn encoder_grad() -> Result<GradReport> {
    let m = toy_model()?;
    let mut rng = seeded_rng(0, "selfcheck/encoder");
    let img = image_var(&mut rng, 1, m.cfg.image_size)?;
    let (code, pyr) = m.encoder.encode(img.as_tensor())?;
    let u_code = projection(&mut rng, code.tensor())?;
    let u_pyr = pyr.levels.iter().map(|l| projection(&mut rng, l)).collect::<Result<Vec<_>>>()?;
    let f = || {
        let (code, pyr) = m.encoder.encode(img.as_tensor())?;
        let mut acc = dot(code.tensor(), &u_code)?;
        for (l, u) in pyr.levels.iter().zip(&u_pyr) {
            acc = (acc + dot(l, u)?)?;
        }
        Ok(acc)
    };
    let mut vars = vec![img.clone()];
    vars.extend(group_vars(&m.store, ParamGroup::Encoder));
    gradcheck::check(f, &vars, COORDS, 2)
}

pub fn sbm_grad() -> Result<GradReport> {
    let mut store = ParamStore::new(F64);
    let sbm = Sbm::with_shape(&mut ParamInit::new(&mut store, "sbm", 5), 4, 4, 8, 2)?;
    let mut rng = seeded_rng(0, "selfcheck/sbm");
    let ws = var(&mut rng, &[1, 4, 8], 1.0)?;
    let wt = var(&mut rng, &[1, 4, 8], 1.0)?;
    let f = || {
        let (out, _) = sbm.blend(&StyleCode(ws.as_tensor().clone()), &StyleCode(wt.as_tensor().clone()))?;
        Ok(out.tensor().sqr()?.mean_all()?)
    };
    let mut vars = vec![ws.clone(), wt.clone()];
    vars.extend(group_vars(&store, ParamGroup::Sbm));
    gradcheck::check(f, &vars, COORDS, 3)
}

pub fn decoder_grad() -> Result<GradReport> {
    let m = toy_model()?;
    let cfg = m.cfg;
    let mut rng = seeded_rng(0, "selfcheck/decoder");
    let code = var(&mut rng, &[1, cfg.style_count, cfg.style_dim], 1.0)?;
    let levels = (0..cfg.pyramid_levels)
        .map(|p| {
            let s = cfg.pyramid_side(p);
            var(&mut rng, &[1, cfg.pyramid_channels(), s, s], 1.0)
        })
        .collect::<Result<Vec<_>>>()?;
    let f = || {
        let pyr = FeaturePyramid {
            levels: levels.iter().map(|v| v.as_tensor().clone()).collect(),
        };
        let out = m
            .decoder
            .decode(&StyleCode(code.as_tensor().clone()), &pyr, &mut seeded_rng(0, "selfcheck/noise"))?;
        Ok(out.sqr()?.mean_all()?)
    };
    let mut vars = vec![code.clone()];
    vars.extend(levels.iter().cloned());
    vars.extend(group_vars(&m.store, ParamGroup::Decoder));
    gradcheck::check(f, &vars, COORDS, 4)
}

pub fn id_extractor_grad() -> Result<GradReport> {
    let m = toy_model()?;
    let mut rng = seeded_rng(0, "selfcheck/id-extractor");
    let img = image_var(&mut rng, 1, m.cfg.image_size)?;
    let u = normal(&mut rng, &[1, m.cfg.id_dim], 1.0)?;
    let f = || dot(&extract_id(img.as_tensor(), &m.id)?.0, &u);
    gradcheck::check(f, &[img.clone()], COORDS, 5)
}

pub fn lm_extractor_grad() -> Result<GradReport> {
    let m = toy_model()?;
    let mut rng = seeded_rng(0, "selfcheck/lm-extractor");
    let img = image_var(&mut rng, 1, m.cfg.image_size)?;
    let u = normal(&mut rng, &[1, m.cfg.landmark_count, 2], 1.0)?;
    let f = || dot(&extract_landmarks(img.as_tensor(), &m.lm)?.0, &u);
    gradcheck::check(f, &[img.clone()], COORDS, 6)
}

pub fn adv_g_grad() -> Result<GradReport> {
    let m = toy_model()?;
    let mut rng = seeded_rng(0, "selfcheck/adv-g");
    let fake = image_var(&mut rng, 2, m.cfg.image_size)?;
    let f = || adv_loss_g(&m.critic.scores(fake.as_tensor())?);
    let mut vars = vec![fake.clone()];
    vars.extend(group_vars(&m.store, ParamGroup::Critic));
    gradcheck::check(f, &vars, COORDS, 7)
}

pub fn adv_v_grad() -> Result<GradReport> {
    let m = toy_model()?;
    let mut rng = seeded_rng(0, "selfcheck/adv-v");
    let real = image_var(&mut rng, 2, m.cfg.image_size)?;
    let fake = image_var(&mut rng, 2, m.cfg.image_size)?;
    let f = || adv_loss_v(&m.critic.scores(real.as_tensor())?, &m.critic.scores(fake.as_tensor())?);
    let mut vars = vec![real.clone(), fake.clone()];
    vars.extend(group_vars(&m.store, ParamGroup::Critic));
    gradcheck::check(f, &vars, COORDS, 8)
}

pub fn id_loss_grad() -> Result<GradReport> {
    let mut rng = seeded_rng(0, "selfcheck/id-loss");
    let a = var(&mut rng, &[3, 8], 1.0)?;
    let b = var(&mut rng, &[3, 8], 1.0)?;
    gradcheck::check(|| losses::id_loss(a.as_tensor(), b.as_tensor()), &[a.clone(), b.clone()], COORDS, 9)
}

pub fn con_loss_grad() -> Result<GradReport> {
    let mut rng = seeded_rng(0, "selfcheck/con-loss");
    let vars = (0..3).map(|_| var(&mut rng, &[3, 8], 0.3)).collect::<Result<Vec<_>>>()?;
    let neg = var(&mut rng, &[3, 2, 8], 0.3)?;
    let f = || {
        losses::contrastive_id_loss(
            vars[0].as_tensor(),
            vars[1].as_tensor(),
            vars[2].as_tensor(),
            Some(neg.as_tensor()),
            0.07,
            false,
        )
    };
    let mut all = vars.clone();
    all.push(neg.clone());
    gradcheck::check(f, &all, COORDS, 10)
}

pub fn rec_loss_grad() -> Result<GradReport> {
    let mut rng = seeded_rng(0, "selfcheck/rec-loss");
    let out = image_var(&mut rng, 2, 8)?;
    let tgt = image_var(&mut rng, 2, 8)?;
    let f = || losses::reconstruction_loss(out.as_tensor(), tgt.as_tensor(), &[true, false]);
    gradcheck::check(f, &[out.clone(), tgt.clone()], COORDS, 11)
}

pub fn lm_loss_grad() -> Result<GradReport> {
    let mut rng = seeded_rng(0, "selfcheck/lm-loss");
    let a = var(&mut rng, &[2, 4, 2], 0.3)?;
    let b = var(&mut rng, &[2, 4, 2], 0.3)?;
    gradcheck::check(|| losses::landmark_loss(a.as_tensor(), b.as_tensor()), &[a.clone(), b.clone()], COORDS, 12)
}

pub fn swap_loss_grad() -> Result<GradReport> {
    let m = toy_model()?;
    let mut rng = seeded_rng(0, "selfcheck/swap-loss");
    let i_s = image_var(&mut rng, 1, m.cfg.image_size)?;
    let i_t = image_var(&mut rng, 1, m.cfg.image_size)?;
    let f = || {
        let mut pass = 0;
        let mut gen = |s: &Tensor, t: &Tensor| {
            pass += 1;
            m.swap(s, t, &mut seeded_rng(0, &format!("selfcheck/swap{pass}")))
        };
        let i_st = gen(i_s.as_tensor(), i_t.as_tensor())?;
        losses::dual_swap_loss(gen, i_s.as_tensor(), i_t.as_tensor(), &i_st)?.total()
    };
    let mut vars = vec![i_s.clone(), i_t.clone()];
    vars.extend(group_vars(&m.store, ParamGroup::Sbm));
    gradcheck::check(f, &vars, COORDS, 13)
}

/// Names of every check, in execution order.
pub const CHECKS: [&str; 18] = [
    "partition-of-unity",
    "blend-fixed-point",
    "sbm-oracle",
    "adain-moments",
    "adain-grad",
    "encoder-grad",
    "sbm-grad",
    "decoder-grad",
    "id-extractor-grad",
    "lm-extractor-grad",
    "adv-g-grad",
    "adv-v-grad",
    "id-loss-grad",
    "con-loss-grad",
    "rec-loss-grad",
    "lm-loss-grad",
    "swap-loss-grad",
    "total-linearity",
];

/// Relative deviation of the reported total from the weighted sum of its terms.
pub fn total_linearity() -> Result<f64> {
    let w = losses::LossWeights::default();
    let s = |v: f64| Tensor::new(v, &Device::Cpu);
    let vals = [0.37, 0.12, -2.4, 0.9, 0.003, 0.25];
    let terms = losses::GeneratorTerms {
        adv_g: s(vals[0])?,
        id: s(vals[1])?,
        con: s(vals[2])?,
        rec: s(vals[3])?,
        lm: s(vals[4])?,
        swap: s(vals[5])?,
    };
    let (t, r) = losses::total_generator_loss(&terms, &w)?;
    let want = vals[0] + w.id * vals[1] + w.con * vals[2] + w.rec * vals[3] + w.lm * vals[4] + w.swap * vals[5];
    let got = t.to_scalar::<f64>()?;
    Ok(((got - want).abs().max((r.total - want).abs())) / want.abs())
}

pub fn run_check(name: &str, mutation: Mutation) -> Result<CheckResult> {
    let r = match name {
        "partition-of-unity" => CheckResult::new("partition-of-unity", partition_of_unity(1000, 0)?, 1e-6),
        "blend-fixed-point" => CheckResult::new("blend-fixed-point", blend_fixed_point(20, 0)?, 1e-5),
        "sbm-oracle" => CheckResult::new("sbm-oracle", sbm_oracle_error()?, 1e-10),
        "adain-moments" => CheckResult::new("adain-moments", adain_moments(0)?, 1e-3),
        "adain-grad" => CheckResult::grad("adain-grad", adain_grad(mutation)?),
        "encoder-grad" => CheckResult::grad("encoder-grad", encoder_grad()?),
        "sbm-grad" => CheckResult::grad("sbm-grad", sbm_grad()?),
        "decoder-grad" => CheckResult::grad("decoder-grad", decoder_grad()?),
        "id-extractor-grad" => CheckResult::grad("id-extractor-grad", id_extractor_grad()?),
        "lm-extractor-grad" => CheckResult::grad("lm-extractor-grad", lm_extractor_grad()?),
        "adv-g-grad" => CheckResult::grad("adv-g-grad", adv_g_grad()?),
        "adv-v-grad" => CheckResult::grad("adv-v-grad", adv_v_grad()?),
        "id-loss-grad" => CheckResult::grad("id-loss-grad", id_loss_grad()?),
        "con-loss-grad" => CheckResult::grad("con-loss-grad", con_loss_grad()?),
        "rec-loss-grad" => CheckResult::grad("rec-loss-grad", rec_loss_grad()?),
        "lm-loss-grad" => CheckResult::grad("lm-loss-grad", lm_loss_grad()?),
        "swap-loss-grad" => CheckResult::grad("swap-loss-grad", swap_loss_grad()?),
        "total-linearity" => CheckResult::new("total-linearity", total_linearity()?, 1e-6),
        other => {
            return Err(crate::Error::InvalidArgument(format!("unknown check {other:?}")));
        }
    };
    Ok(r)
}

/// Runs every check in order, calling `report` after each.
pub fn run_all(mutation: Mutation, mut report: impl FnMut(&CheckResult)) -> Result<Vec<CheckResult>> {
    CHECKS
        .iter()
        .map(|name| {
            let r = run_check(name, mutation)?;
            report(&r);
            Ok(r)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_helpers_agree_on_equal_codes() {
        let w = [[0.2, -0.3], [1.0, 0.4]];
        assert_eq!(blend_by_hand(&w, &w), w);
    }

    #[test]
    fn mutation_is_detected() {
        assert!(adain_grad(Mutation::None).unwrap().passed());
        assert!(!adain_grad(Mutation::AdainDetachedStd).unwrap().passed());
    }

    #[test]
    fn unknown_check_is_an_error() {
        assert!(run_check("nope", Mutation::None).is_err());
    }
}
