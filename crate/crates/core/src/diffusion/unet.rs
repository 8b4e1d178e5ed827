//! The U-shaped epsilon-predictor: forward/backward passes.
//!
//! Layout (width u, input channels C, image size S):
//!   enc0: 3x3 conv C -> u          (S x S)
//!   enc1: 3x3 conv u -> 2u, /2     (S/2 x S/2)
//!   mid:  3x3 conv 2u -> 2u, then + sigma/class embedding, SiLU
//!   bott: 3x3 conv 2u -> 2u        <- tap "bottleneck-pre-upsample"
//!   up:   nearest x2, concat enc0 skip
//!   dec0: 3x3 conv 3u -> u
//!   out:  3x3 conv u -> C          (epsilon prediction)
//!
//! Inputs are scaled by 1/sqrt(1+sigma^2) so activations stay bounded across
//! the whole sigma range; the predicted quantity is still the raw noise.

use ndarray::{s, Array1, Array2, Array4};
use serde::{Deserialize, Serialize};

use super::DiffusionModel;
use crate::error::{Error, Result};
use crate::nn::ops;
use crate::nn::{Images, ParamSet};
use crate::repr::Condition;
use crate::rng::{normal_array, Stream};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub width: usize,
    pub num_classes: usize,
    pub image_size: usize,
}

pub fn init_params(cfg: &UNetConfig, rng: &mut Stream) -> ParamSet {
    let (c, u, k) = (cfg.in_channels, cfg.width, cfg.num_classes);
    let he = |rng: &mut Stream, cout: usize, cin: usize| -> Array4<f64> {
        let std = (2.0 / (cin * 9) as f64).sqrt();
        normal_array(rng, (cout, cin, 3, 3)) * std
    };
    let mut p = ParamSet::new();
    p.insert("enc0.w", he(rng, u, c).into_dyn());
    p.insert("enc0.b", Array1::<f64>::zeros(u).into_dyn());
    p.insert("enc1.w", he(rng, 2 * u, u).into_dyn());
    p.insert("enc1.b", Array1::<f64>::zeros(2 * u).into_dyn());
    p.insert("mid.w", he(rng, 2 * u, 2 * u).into_dyn());
    p.insert("mid.b", Array1::<f64>::zeros(2 * u).into_dyn());
    // Sigma embedding: linear map of c_noise = ln(sigma)/4 to channel biases.
    p.insert(
        "semb.w",
        (normal_array::<ndarray::Ix2, _>(rng, (2 * u, 1)) * 0.2).into_dyn(),
    );
    p.insert("semb.b", Array1::<f64>::zeros(2 * u).into_dyn());
    // Class embedding rows; final row is the unconditional embedding. The
    // scale is deliberately large so conditioning engages early in training.
    p.insert(
        "cemb",
        normal_array::<ndarray::Ix2, _>(rng, (k + 1, 2 * u)).into_dyn(),
    );
    p.insert("bott.w", he(rng, 2 * u, 2 * u).into_dyn());
    p.insert("bott.b", Array1::<f64>::zeros(2 * u).into_dyn());
    p.insert("dec0.w", he(rng, u, 3 * u).into_dyn());
    p.insert("dec0.b", Array1::<f64>::zeros(u).into_dyn());
    p.insert("out.w", he(rng, c, u).into_dyn());
    p.insert("out.b", Array1::<f64>::zeros(c).into_dyn());
    p
}

fn conv_w(p: &ParamSet, name: &str) -> Array4<f64> {
    p.get(name)
        .view()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("conv rank")
        .to_owned()
}

fn vec_p(p: &ParamSet, name: &str) -> Array1<f64> {
    p.get(name)
        .view()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("bias rank")
        .to_owned()
}

fn mat_p(p: &ParamSet, name: &str) -> Array2<f64> {
    p.get(name)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("matrix rank")
        .to_owned()
}

fn cond_indices(cond: Condition<'_>, n: usize, num_classes: usize) -> Result<Vec<usize>> {
    match cond {
        Condition::Unconditional => Ok(vec![num_classes; n]),
        Condition::Labels(labels) => {
            if labels.len() != n {
                return Err(Error::argument("condition labels must match batch size"));
            }
            if labels.iter().any(|&y| y >= num_classes) {
                return Err(Error::argument("condition label out of range"));
            }
            Ok(labels.to_vec())
        }
    }
}

fn check_finite(stage: &str, t: &Images) -> Result<()> {
    if t.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(stage, "non-finite activation"))
    }
}

/// Shared encoder state up to and including the bottleneck.
struct EncoderState {
    c_in: Array1<f64>,
    c_noise: Array1<f64>,
    cond_idx: Vec<usize>,
    x_in: Images,
    z0: Images,
    e0: Images,
    z1: Images,
    e1: Images,
}

struct BottleneckState {
    madd: Images,
    ma: Images,
    zb: Images,
    b: Images,
}

fn forward_encoder(
    model: &DiffusionModel,
    x_t: &Images,
    sigmas: &Array1<f64>,
    cond: Condition<'_>,
) -> Result<EncoderState> {
    let n = x_t.dim().0;
    if sigmas.len() != n {
        return Err(Error::argument("sigma vector must match batch size"));
    }
    let p = &model.params;
    let cond_idx = cond_indices(cond, n, model.config.num_classes)?;
    let c_in = sigmas.mapv(|s| 1.0 / (1.0 + s * s).sqrt());
    // Floor keeps the log conditioning finite when the noisy-discriminative
    // trainer runs at sigma = 0.
    let c_noise = sigmas.mapv(|s| s.max(1e-3).ln() / 4.0);

    let mut x_in = x_t.clone();
    for i in 0..n {
        let scale = c_in[i];
        x_in.slice_mut(s![i, .., .., ..]).mapv_inplace(|v| v * scale);
    }

    let z0 = ops::conv2d_forward(&x_in, &conv_w(p, "enc0.w"), &vec_p(p, "enc0.b"), 1, 1);
    check_finite("enc0", &z0)?;
    let e0 = ops::silu(&z0);
    let z1 = ops::conv2d_forward(&e0, &conv_w(p, "enc1.w"), &vec_p(p, "enc1.b"), 2, 1);
    check_finite("enc1", &z1)?;
    let e1 = ops::silu(&z1);
    Ok(EncoderState {
        c_in,
        c_noise,
        cond_idx,
        x_in,
        z0,
        e0,
        z1,
        e1,
    })
}

fn forward_bottleneck(model: &DiffusionModel, enc: &EncoderState) -> Result<BottleneckState> {
    let p = &model.params;
    let n = enc.e1.dim().0;
    let zm = ops::conv2d_forward(&enc.e1, &conv_w(p, "mid.w"), &vec_p(p, "mid.b"), 1, 1);
    check_finite("mid", &zm)?;
    let semb_w = mat_p(p, "semb.w");
    let semb_b = vec_p(p, "semb.b");
    let cemb = mat_p(p, "cemb");
    let mut madd = zm;
    for i in 0..n {
        for ch in 0..madd.dim().1 {
            let bias = semb_w[[ch, 0]] * enc.c_noise[i] + semb_b[ch] + cemb[[enc.cond_idx[i], ch]];
            madd.slice_mut(s![i, ch, .., ..]).mapv_inplace(|v| v + bias);
        }
    }
    check_finite("cond-add", &madd)?;
    let ma = ops::silu(&madd);
    let zb = ops::conv2d_forward(&ma, &conv_w(p, "bott.w"), &vec_p(p, "bott.b"), 1, 1);
    check_finite("bottleneck", &zb)?;
    let b = ops::silu(&zb);
    Ok(BottleneckState { madd, ma, zb, b })
}

/// Backprop from d/d(e1) through the shared encoder tail; returns gradient
/// wrt x_t and fills enc0/enc1 parameter grads.
fn backward_encoder_tail(
    model: &DiffusionModel,
    enc: &EncoderState,
    g_e1: &Images,
    grads: &mut ParamSet,
) -> Images {
    let p = &model.params;
    let g_z1 = ops::silu_backward(&enc.z1, g_e1);
    let (g_e0, gw1, gb1) = ops::conv2d_backward(&enc.e0, &conv_w(p, "enc1.w"), 2, 1, &g_z1);
    grads
        .get_mut("enc1.w")
        .zip_mut_with(&gw1.into_dyn(), |a, &b| *a += b);
    grads
        .get_mut("enc1.b")
        .zip_mut_with(&gb1.into_dyn(), |a, &b| *a += b);
    backward_enc0(model, enc, &g_e0, grads)
}

fn backward_enc0(
    model: &DiffusionModel,
    enc: &EncoderState,
    g_e0: &Images,
    grads: &mut ParamSet,
) -> Images {
    let p = &model.params;
    let g_z0 = ops::silu_backward(&enc.z0, g_e0);
    let (g_xin, gw0, gb0) = ops::conv2d_backward(&enc.x_in, &conv_w(p, "enc0.w"), 1, 1, &g_z0);
    grads
        .get_mut("enc0.w")
        .zip_mut_with(&gw0.into_dyn(), |a, &b| *a += b);
    grads
        .get_mut("enc0.b")
        .zip_mut_with(&gb0.into_dyn(), |a, &b| *a += b);
    let mut g_xt = g_xin;
    for i in 0..g_xt.dim().0 {
        let scale = enc.c_in[i];
        g_xt.slice_mut(s![i, .., .., ..]).mapv_inplace(|v| v * scale);
    }
    g_xt
}

/// Backprop from d/d(madd) into the embedding tables and back to e1.
fn backward_bottleneck_head(
    model: &DiffusionModel,
    enc: &EncoderState,
    bot: &BottleneckState,
    g_b: &Images,
    grads: &mut ParamSet,
) -> Images {
    let p = &model.params;
    let g_zb = ops::silu_backward(&bot.zb, g_b);
    let (g_ma, gwb, gbb) = ops::conv2d_backward(&bot.ma, &conv_w(p, "bott.w"), 1, 1, &g_zb);
    grads
        .get_mut("bott.w")
        .zip_mut_with(&gwb.into_dyn(), |a, &b| *a += b);
    grads
        .get_mut("bott.b")
        .zip_mut_with(&gbb.into_dyn(), |a, &b| *a += b);
    let g_madd = ops::silu_backward(&bot.madd, &g_ma);

    // Embedding gradients: per-example channel sums over spatial positions.
    let (n, ch2, _, _) = g_madd.dim();
    for i in 0..n {
        let row = enc.cond_idx[i];
        for ch in 0..ch2 {
            let gsum: f64 = g_madd.slice(s![i, ch, .., ..]).sum();
            grads.get_mut("cemb")[[row, ch]] += gsum;
            grads.get_mut("semb.w")[[ch, 0]] += gsum * enc.c_noise[i];
            grads.get_mut("semb.b")[ch] += gsum;
        }
    }

    let (g_e1, gwm, gbm) = ops::conv2d_backward(&enc.e1, &conv_w(p, "mid.w"), 1, 1, &g_madd);
    grads
        .get_mut("mid.w")
        .zip_mut_with(&gwm.into_dyn(), |a, &b| *a += b);
    grads
        .get_mut("mid.b")
        .zip_mut_with(&gbm.into_dyn(), |a, &b| *a += b);
    g_e1
}

// ---------------------------------------------------------------------------
// Denoising pass
// ---------------------------------------------------------------------------

pub struct DenoiseCache {
    enc: EncoderState,
    bot: BottleneckState,
    cat: Images,
    zd: Images,
    d0: Images,
}

pub fn forward_denoise(
    model: &DiffusionModel,
    x_t: &Images,
    sigmas: &Array1<f64>,
    cond: Condition<'_>,
) -> Result<(Images, DenoiseCache)> {
    let p = &model.params;
    let enc = forward_encoder(model, x_t, sigmas, cond)?;
    let bot = forward_bottleneck(model, &enc)?;
    let up = ops::upsample2_forward(&bot.b);
    let cat = ops::concat_channels(&up, &enc.e0);
    let zd = ops::conv2d_forward(&cat, &conv_w(p, "dec0.w"), &vec_p(p, "dec0.b"), 1, 1);
    check_finite("dec0", &zd)?;
    let d0 = ops::silu(&zd);
    let eps = ops::conv2d_forward(&d0, &conv_w(p, "out.w"), &vec_p(p, "out.b"), 1, 1);
    check_finite("out", &eps)?;
    Ok((
        eps,
        DenoiseCache {
            enc,
            bot,
            cat,
            zd,
            d0,
        },
    ))
}

pub fn backward_denoise(
    model: &DiffusionModel,
    cache: &DenoiseCache,
    g_eps: &Images,
) -> (Images, ParamSet) {
    let p = &model.params;
    let mut grads = p.zeros_like();

    let (g_d0, gw_out, gb_out) = ops::conv2d_backward(&cache.d0, &conv_w(p, "out.w"), 1, 1, g_eps);
    *grads.get_mut("out.w") = gw_out.into_dyn();
    *grads.get_mut("out.b") = gb_out.into_dyn();
    let g_zd = ops::silu_backward(&cache.zd, &g_d0);
    let (g_cat, gw_dec, gb_dec) =
        ops::conv2d_backward(&cache.cat, &conv_w(p, "dec0.w"), 1, 1, &g_zd);
    *grads.get_mut("dec0.w") = gw_dec.into_dyn();
    *grads.get_mut("dec0.b") = gb_dec.into_dyn();

    let skip_channels = 2 * model.config.width;
    let (g_up, g_e0_skip) = ops::split_channels(&g_cat, skip_channels);
    let g_b = ops::upsample2_backward(&g_up);
    let g_e1 = backward_bottleneck_head(model, &cache.enc, &cache.bot, &g_b, &mut grads);

    // Encoder tail sees gradient from both the downsampling path and the skip.
    let g_z1 = ops::silu_backward(&cache.enc.z1, &g_e1);
    let (mut g_e0, gw1, gb1) =
        ops::conv2d_backward(&cache.enc.e0, &conv_w(p, "enc1.w"), 2, 1, &g_z1);
    grads
        .get_mut("enc1.w")
        .zip_mut_with(&gw1.into_dyn(), |a, &b| *a += b);
    grads
        .get_mut("enc1.b")
        .zip_mut_with(&gb1.into_dyn(), |a, &b| *a += b);
    g_e0 += &g_e0_skip;
    let g_xt = backward_enc0(model, &cache.enc, &g_e0, &mut grads);
    (g_xt, grads)
}

// ---------------------------------------------------------------------------
// Representation pass
// ---------------------------------------------------------------------------

pub struct ReprCache {
    enc: EncoderState,
    bot: Option<BottleneckState>,
    tap: Tap,
    raw_tap: Images,
    zeroed: Vec<usize>,
}

#[derive(Clone, Copy, PartialEq)]
enum Tap {
    Bottleneck,
    Encoder,
}

impl ReprCache {
    /// Tap activation before outlier zeroing; used by the channel scan.
    pub fn tap_activation(&self) -> &Images {
        &self.raw_tap
    }
}

pub fn forward_repr(
    model: &DiffusionModel,
    x_t: &Images,
    sigmas: &Array1<f64>,
    cond: Condition<'_>,
    tap_point: &str,
) -> Result<(Array2<f64>, ReprCache)> {
    let tap = match tap_point {
        super::TAP_BOTTLENECK => Tap::Bottleneck,
        super::TAP_ENCODER => Tap::Encoder,
        other => return Err(Error::config(format!("unknown tap point {other}"))),
    };
    let enc = forward_encoder(model, x_t, sigmas, cond)?;
    let (raw_tap, bot) = match tap {
        Tap::Encoder => (enc.e1.clone(), None),
        Tap::Bottleneck => {
            let bot = forward_bottleneck(model, &enc)?;
            (bot.b.clone(), Some(bot))
        }
    };
    let mut act = raw_tap.clone();
    for &ch in &model.outlier_channels {
        if ch < act.dim().1 {
            act.slice_mut(s![.., ch, .., ..]).fill(0.0);
        }
    }
    let pooled = ops::global_mean_pool(&act);
    Ok((
        pooled,
        ReprCache {
            enc,
            bot,
            tap,
            raw_tap,
            zeroed: model.outlier_channels.clone(),
        },
    ))
}

pub fn backward_repr(
    model: &DiffusionModel,
    cache: &ReprCache,
    g_pooled: &Array2<f64>,
) -> (Images, ParamSet) {
    let mut grads = model.params.zeros_like();
    // Zeroed channels contribute nothing upstream.
    let mut gp = g_pooled.clone();
    for &ch in &cache.zeroed {
        if ch < gp.ncols() {
            gp.slice_mut(s![.., ch]).fill(0.0);
        }
    }
    let g_act = ops::global_mean_pool_backward(cache.raw_tap.dim(), &gp);
    let g_e1 = match cache.tap {
        Tap::Encoder => g_act,
        Tap::Bottleneck => backward_bottleneck_head(
            model,
            &cache.enc,
            cache.bot.as_ref().expect("bottleneck cache"),
            &g_act,
            &mut grads,
        ),
    };
    let g_xt = backward_encoder_tail(model, &cache.enc, &g_e1, &mut grads);
    (g_xt, grads)
}
