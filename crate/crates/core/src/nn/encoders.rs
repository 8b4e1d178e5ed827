//! Classifier feature encoders.
//!
//! Two desk-scale architectures sit behind one interface: a small strided
//! conv net and a tiny single-head patch transformer. Both map
//! (n, c, s, s) images to (n, feature_dim) features and provide exact
//! gradients wrt input and parameters.

use ndarray::{s, Array1, Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use super::ops::{self, Images, InstanceNormCache, LayerNormCache};
use super::params::ParamSet;
use crate::rng::{normal_array, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EncoderArch {
    /// Five 3x3 conv stages with two stride-2 downsamples; feature dim 4*width.
    SmallConv { width: usize },
    /// 4x4 patch embedding plus one pre-norm attention/MLP block; feature dim = embed.
    PatchTransformer { embed: usize },
}

impl EncoderArch {
    pub fn feature_dim(&self) -> usize {
        match self {
            EncoderArch::SmallConv { width } => 4 * width,
            EncoderArch::PatchTransformer { embed } => *embed,
        }
    }
}

const PATCH: usize = 4;

pub struct ClassifierEncoder {
    pub arch: EncoderArch,
    pub in_channels: usize,
    pub image_size: usize,
    pub params: ParamSet,
}

pub enum EncoderCache {
    SmallConv(ConvCache),
    PatchTransformer(Box<TransformerCache>),
}

pub struct ConvCache {
    x: Images, // centered input
    pre: Vec<Images>,    // conv outputs
    norms: Vec<InstanceNormCache>,
    normed: Vec<Images>, // post-norm, pre-SiLU
    post: Vec<Images>,   // post-SiLU
}

pub struct TransformerCache {
    patches: Array3<f64>,
    ln1: LayerNormCache,
    l1: Array3<f64>,
    q: Array3<f64>,
    k: Array3<f64>,
    v: Array3<f64>,
    attn: Array3<f64>, // softmax rows, (n, t, t)
    heads: Array3<f64>,
    ln2: LayerNormCache,
    l2: Array3<f64>,
    m1: Array3<f64>,
    m1a: Array3<f64>,
    x2_ln: LayerNormCache,
    n_tokens: usize,
}

fn he_conv(rng: &mut Stream, cout: usize, cin: usize, k: usize) -> Array4<f64> {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    normal_array(rng, (cout, cin, k, k)) * std
}

fn he_linear(rng: &mut Stream, dout: usize, din: usize) -> Array2<f64> {
    let std = (2.0 / din as f64).sqrt();
    normal_array(rng, (dout, din)) * std
}

impl ClassifierEncoder {
    pub fn init(arch: EncoderArch, in_channels: usize, image_size: usize, rng: &mut Stream) -> Self {
        let mut p = ParamSet::new();
        match arch {
            EncoderArch::SmallConv { width } => {
                assert!(image_size % 4 == 0, "image size must be divisible by 4");
                let dims = conv_stage_dims(in_channels, width);
                for (i, &(cin, cout, _stride)) in dims.iter().enumerate() {
                    p.insert(&format!("c{i}.w"), he_conv(rng, cout, cin, 3).into_dyn());
                    p.insert(&format!("n{i}.g"), Array1::<f64>::ones(cout).into_dyn());
                    p.insert(&format!("n{i}.b"), Array1::<f64>::zeros(cout).into_dyn());
                }
            }
            EncoderArch::PatchTransformer { embed } => {
                assert!(image_size % PATCH == 0, "image size must be divisible by patch");
                let tokens = (image_size / PATCH) * (image_size / PATCH);
                let pdim = in_channels * PATCH * PATCH;
                p.insert("embed.w", he_linear(rng, embed, pdim).into_dyn());
                p.insert("embed.b", Array1::<f64>::zeros(embed).into_dyn());
                p.insert(
                    "pos",
                    (normal_array::<ndarray::Ix2, _>(rng, (tokens, embed)) * 0.02).into_dyn(),
                );
                for name in ["q", "k", "v", "o"] {
                    p.insert(
                        &format!("attn.{name}.w"),
                        he_linear(rng, embed, embed).into_dyn(),
                    );
                    p.insert(
                        &format!("attn.{name}.b"),
                        Array1::<f64>::zeros(embed).into_dyn(),
                    );
                }
                for i in 1..=3 {
                    p.insert(&format!("ln{i}.g"), Array1::<f64>::ones(embed).into_dyn());
                    p.insert(&format!("ln{i}.b"), Array1::<f64>::zeros(embed).into_dyn());
                }
                p.insert("mlp.0.w", he_linear(rng, 2 * embed, embed).into_dyn());
                p.insert("mlp.0.b", Array1::<f64>::zeros(2 * embed).into_dyn());
                p.insert("mlp.1.w", he_linear(rng, embed, 2 * embed).into_dyn());
                p.insert("mlp.1.b", Array1::<f64>::zeros(embed).into_dyn());
            }
        }
        ClassifierEncoder {
            arch,
            in_channels,
            image_size,
            params: p,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim()
    }

    pub fn forward(&self, x: &Images) -> (Array2<f64>, EncoderCache) {
        // Pixels live in [0,1]; center them so SiLU units start in their
        // active region instead of a seed-dependent saturation lottery.
        let x = x.mapv(|v| v - 0.5);
        match self.arch {
            EncoderArch::SmallConv { width } => {
                let dims = conv_stage_dims(self.in_channels, width);
                let mut pre = Vec::with_capacity(dims.len());
                let mut norms = Vec::with_capacity(dims.len());
                let mut normed = Vec::with_capacity(dims.len());
                let mut post = Vec::with_capacity(dims.len());
                let mut cur = x.clone();
                for (i, &(_cin, cout, stride)) in dims.iter().enumerate() {
                    let w4 = self.conv_w(i);
                    let zero_bias = Array1::<f64>::zeros(cout);
                    let z = ops::conv2d_forward(&cur, &w4, &zero_bias, stride, 1);
                    let (yn, ncache) = ops::instance_norm_forward(
                        &z,
                        &self.bias(&format!("n{i}.g")),
                        &self.bias(&format!("n{i}.b")),
                    );
                    let a = ops::silu(&yn);
                    pre.push(z);
                    norms.push(ncache);
                    normed.push(yn);
                    post.push(a.clone());
                    cur = a;
                }
                let feat = ops::global_mean_pool(&cur);
                (
                    feat,
                    EncoderCache::SmallConv(ConvCache {
                        x: x.clone(),
                        pre,
                        norms,
                        normed,
                        post,
                    }),
                )
            }
            EncoderArch::PatchTransformer { embed } => {
                let (feat, cache) = self.transformer_forward(&x, embed);
                (feat, EncoderCache::PatchTransformer(Box::new(cache)))
            }
        }
    }

    /// Gradients wrt the input and wrt all parameters, given d(loss)/d(features).
    pub fn backward(&self, cache: &EncoderCache, gfeat: &Array2<f64>) -> (Images, ParamSet) {
        match (self.arch, cache) {
            (EncoderArch::SmallConv { width }, EncoderCache::SmallConv(c)) => {
                let dims = conv_stage_dims(self.in_channels, width);
                let mut grads = self.params.zeros_like();
                let last = c.post.last().expect("nonempty conv stack");
                let mut g = ops::global_mean_pool_backward(last.dim(), gfeat);
                for i in (0..dims.len()).rev() {
                    let gyn = ops::silu_backward(&c.normed[i], &g);
                    let (gz, ggain, gbias) = ops::instance_norm_backward(
                        &c.norms[i],
                        &self.bias(&format!("n{i}.g")),
                        &gyn,
                    );
                    *grads.get_mut(&format!("n{i}.g")) = ggain.into_dyn();
                    *grads.get_mut(&format!("n{i}.b")) = gbias.into_dyn();
                    let input = if i == 0 { &c.x } else { &c.post[i - 1] };
                    let w4 = self.conv_w(i);
                    let (gx, gw, _gb) = ops::conv2d_backward(input, &w4, dims[i].2, 1, &gz);
                    *grads.get_mut(&format!("c{i}.w")) = gw.into_dyn();
                    g = gx;
                }
                (g, grads)
            }
            (EncoderArch::PatchTransformer { embed }, EncoderCache::PatchTransformer(c)) => {
                self.transformer_backward(c, gfeat, embed)
            }
            _ => panic!("cache does not match encoder architecture"),
        }
    }

    fn conv_w(&self, i: usize) -> Array4<f64> {
        self.params
            .get(&format!("c{i}.w"))
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("conv weight rank")
            .to_owned()
    }

    fn mat(&self, name: &str) -> Array2<f64> {
        self.params
            .get(name)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("matrix rank")
            .to_owned()
    }

    fn bias(&self, name: &str) -> Array1<f64> {
        self.params
            .get(name)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("bias rank")
            .to_owned()
    }

    fn transformer_forward(&self, x: &Images, embed: usize) -> (Array2<f64>, TransformerCache) {
        let n = x.dim().0;
        let patches = extract_patches(x, self.in_channels, self.image_size);
        let t = patches.dim().1;
        let we = self.mat("embed.w");
        let be = self.bias("embed.b");
        let pos = self.mat("pos");

        let mut x0 = Array3::<f64>::zeros((n, t, embed));
        for bi in 0..n {
            let p = patches.slice(s![bi, .., ..]);
            let mut e = p.dot(&we.t()) + &be;
            e += &pos;
            x0.slice_mut(s![bi, .., ..]).assign(&e);
        }

        let (l1, ln1) = ops::layer_norm_forward(&x0, &self.bias("ln1.g"), &self.bias("ln1.b"));
        let (wq, wk, wv, wo) = (
            self.mat("attn.q.w"),
            self.mat("attn.k.w"),
            self.mat("attn.v.w"),
            self.mat("attn.o.w"),
        );
        let (bq, bk, bv, bo) = (
            self.bias("attn.q.b"),
            self.bias("attn.k.b"),
            self.bias("attn.v.b"),
            self.bias("attn.o.b"),
        );
        let scale = 1.0 / (embed as f64).sqrt();
        let mut q = Array3::<f64>::zeros((n, t, embed));
        let mut k = Array3::<f64>::zeros((n, t, embed));
        let mut v = Array3::<f64>::zeros((n, t, embed));
        let mut attn = Array3::<f64>::zeros((n, t, t));
        let mut heads = Array3::<f64>::zeros((n, t, embed));
        let mut x1 = x0.clone();
        for bi in 0..n {
            let li = l1.slice(s![bi, .., ..]);
            let qi = li.dot(&wq.t()) + &bq;
            let ki = li.dot(&wk.t()) + &bk;
            let vi = li.dot(&wv.t()) + &bv;
            let scores = qi.dot(&ki.t()) * scale;
            let probs = ops::softmax(&scores);
            let hi = probs.dot(&vi);
            let oi = hi.dot(&wo.t()) + &bo;
            q.slice_mut(s![bi, .., ..]).assign(&qi);
            k.slice_mut(s![bi, .., ..]).assign(&ki);
            v.slice_mut(s![bi, .., ..]).assign(&vi);
            attn.slice_mut(s![bi, .., ..]).assign(&probs);
            heads.slice_mut(s![bi, .., ..]).assign(&hi);
            let mut x1i = x1.slice_mut(s![bi, .., ..]);
            x1i += &oi;
        }

        let (l2, ln2) = ops::layer_norm_forward(&x1, &self.bias("ln2.g"), &self.bias("ln2.b"));
        let (wm0, wm1) = (self.mat("mlp.0.w"), self.mat("mlp.1.w"));
        let (bm0, bm1) = (self.bias("mlp.0.b"), self.bias("mlp.1.b"));
        let mut m1 = Array3::<f64>::zeros((n, t, 2 * embed));
        let mut x2 = x1.clone();
        for bi in 0..n {
            let li = l2.slice(s![bi, .., ..]);
            let h = li.dot(&wm0.t()) + &bm0;
            m1.slice_mut(s![bi, .., ..]).assign(&h);
        }
        let m1a = ops::silu(&m1);
        for bi in 0..n {
            let h = m1a.slice(s![bi, .., ..]).dot(&wm1.t()) + &bm1;
            let mut x2i = x2.slice_mut(s![bi, .., ..]);
            x2i += &h;
        }

        let (l3, x2_ln) = ops::layer_norm_forward(&x2, &self.bias("ln3.g"), &self.bias("ln3.b"));
        let mut feat = Array2::<f64>::zeros((n, embed));
        for bi in 0..n {
            for di in 0..embed {
                feat[[bi, di]] = l3.slice(s![bi, .., di]).mean().unwrap();
            }
        }
        (
            feat,
            TransformerCache {
                patches,
                ln1,
                l1,
                q,
                k,
                v,
                attn,
                heads,
                ln2,
                l2,
                m1,
                m1a,
                x2_ln,
                n_tokens: t,
            },
        )
    }

    fn transformer_backward(
        &self,
        c: &TransformerCache,
        gfeat: &Array2<f64>,
        embed: usize,
    ) -> (Images, ParamSet) {
        let mut grads = self.params.zeros_like();
        let (n, t) = (gfeat.nrows(), c.n_tokens);
        let scale = 1.0 / (embed as f64).sqrt();

        // Token mean -> LN3.
        let mut gl3 = Array3::<f64>::zeros((n, t, embed));
        for bi in 0..n {
            for ti in 0..t {
                for di in 0..embed {
                    gl3[[bi, ti, di]] = gfeat[[bi, di]] / t as f64;
                }
            }
        }
        let (gx2, gg3, gb3) = ops::layer_norm_backward(&c.x2_ln, &self.bias("ln3.g"), &gl3);
        *grads.get_mut("ln3.g") = gg3.into_dyn();
        *grads.get_mut("ln3.b") = gb3.into_dyn();

        // MLP branch.
        let wm0 = self.mat("mlp.0.w");
        let wm1 = self.mat("mlp.1.w");
        let mut gx1 = gx2.clone();
        let mut gm1a = Array3::<f64>::zeros((n, t, 2 * embed));
        for bi in 0..n {
            let gout = gx2.slice(s![bi, .., ..]);
            let (gx, gw, gb) = ops::linear_backward(
                &c.m1a.slice(s![bi, .., ..]).to_owned(),
                &wm1,
                &gout.to_owned(),
            );
            grads
                .get_mut("mlp.1.w")
                .zip_mut_with(&gw.into_dyn(), |a, &b| *a += b);
            grads
                .get_mut("mlp.1.b")
                .zip_mut_with(&gb.into_dyn(), |a, &b| *a += b);
            gm1a.slice_mut(s![bi, .., ..]).assign(&gx);
        }
        let gm1 = ops::silu_backward(&c.m1, &gm1a);
        let mut gl2 = Array3::<f64>::zeros((n, t, embed));
        for bi in 0..n {
            let (gx, gw, gb) = ops::linear_backward(
                &c.l2.slice(s![bi, .., ..]).to_owned(),
                &wm0,
                &gm1.slice(s![bi, .., ..]).to_owned(),
            );
            grads
                .get_mut("mlp.0.w")
                .zip_mut_with(&gw.into_dyn(), |a, &b| *a += b);
            grads
                .get_mut("mlp.0.b")
                .zip_mut_with(&gb.into_dyn(), |a, &b| *a += b);
            gl2.slice_mut(s![bi, .., ..]).assign(&gx);
        }
        let (gx1_ln, gg2, gb2) = ops::layer_norm_backward(&c.ln2, &self.bias("ln2.g"), &gl2);
        *grads.get_mut("ln2.g") = gg2.into_dyn();
        *grads.get_mut("ln2.b") = gb2.into_dyn();
        gx1 += &gx1_ln;

        // Attention branch.
        let (wq, wk, wv, wo) = (
            self.mat("attn.q.w"),
            self.mat("attn.k.w"),
            self.mat("attn.v.w"),
            self.mat("attn.o.w"),
        );
        let mut gx0 = gx1.clone();
        let mut gl1 = Array3::<f64>::zeros((n, t, embed));
        for bi in 0..n {
            let go = gx1.slice(s![bi, .., ..]).to_owned();
            let (gh, gwo, gbo) = ops::linear_backward(&c.heads.slice(s![bi, .., ..]).to_owned(), &wo, &go);
            grads
                .get_mut("attn.o.w")
                .zip_mut_with(&gwo.into_dyn(), |a, &b| *a += b);
            grads
                .get_mut("attn.o.b")
                .zip_mut_with(&gbo.into_dyn(), |a, &b| *a += b);

            let probs = c.attn.slice(s![bi, .., ..]).to_owned();
            let vi = c.v.slice(s![bi, .., ..]).to_owned();
            let ga = gh.dot(&vi.t());
            let gv = probs.t().dot(&gh);
            // Row-wise softmax backward.
            let mut gs = Array2::<f64>::zeros((t, t));
            for r in 0..t {
                let dot: f64 = (0..t).map(|cidx| ga[[r, cidx]] * probs[[r, cidx]]).sum();
                for cidx in 0..t {
                    gs[[r, cidx]] = probs[[r, cidx]] * (ga[[r, cidx]] - dot);
                }
            }
            let qi = c.q.slice(s![bi, .., ..]).to_owned();
            let ki = c.k.slice(s![bi, .., ..]).to_owned();
            let gq = gs.dot(&ki) * scale;
            let gk = gs.t().dot(&qi) * scale;

            let l1i = c.l1.slice(s![bi, .., ..]).to_owned();
            let mut gl1i = Array2::<f64>::zeros((t, embed));
            for (gmat, w, wname, bname) in [
                (&gq, &wq, "attn.q.w", "attn.q.b"),
                (&gk, &wk, "attn.k.w", "attn.k.b"),
                (&gv, &wv, "attn.v.w", "attn.v.b"),
            ] {
                let (gx, gw, gb) = ops::linear_backward(&l1i, w, gmat);
                grads
                    .get_mut(wname)
                    .zip_mut_with(&gw.into_dyn(), |a, &b| *a += b);
                grads
                    .get_mut(bname)
                    .zip_mut_with(&gb.into_dyn(), |a, &b| *a += b);
                gl1i += &gx;
            }
            gl1.slice_mut(s![bi, .., ..]).assign(&gl1i);
        }
        let (gx0_ln, gg1, gb1) = ops::layer_norm_backward(&c.ln1, &self.bias("ln1.g"), &gl1);
        *grads.get_mut("ln1.g") = gg1.into_dyn();
        *grads.get_mut("ln1.b") = gb1.into_dyn();
        gx0 += &gx0_ln;

        // Patch embedding.
        let we = self.mat("embed.w");
        let grid = self.image_size / PATCH;
        let pdim = self.in_channels * PATCH * PATCH;
        let mut gx = Images::zeros((n, self.in_channels, self.image_size, self.image_size));
        for bi in 0..n {
            let g0 = gx0.slice(s![bi, .., ..]).to_owned();
            let (gp, gw, gb) =
                ops::linear_backward(&c.patches.slice(s![bi, .., ..]).to_owned(), &we, &g0);
            grads
                .get_mut("embed.w")
                .zip_mut_with(&gw.into_dyn(), |a, &b| *a += b);
            grads
                .get_mut("embed.b")
                .zip_mut_with(&gb.into_dyn(), |a, &b| *a += b);
            grads
                .get_mut("pos")
                .zip_mut_with(&g0.into_dyn(), |a, &b| *a += b);
            // Scatter patch gradients back to pixels.
            for ti in 0..c.n_tokens {
                let (pi, pj) = (ti / grid, ti % grid);
                for idx in 0..pdim {
                    let ci = idx / (PATCH * PATCH);
                    let rem = idx % (PATCH * PATCH);
                    let (ri, rj) = (rem / PATCH, rem % PATCH);
                    gx[[bi, ci, pi * PATCH + ri, pj * PATCH + rj]] += gp[[ti, idx]];
                }
            }
        }
        (gx, grads)
    }
}

fn conv_stage_dims(in_channels: usize, width: usize) -> Vec<(usize, usize, usize)> {
    vec![
        (in_channels, width, 1),
        (width, 2 * width, 2),
        (2 * width, 2 * width, 1),
        (2 * width, 4 * width, 2),
        (4 * width, 4 * width, 1),
    ]
}

/// (n, tokens, c*patch*patch), tokens in row-major grid order.
fn extract_patches(x: &Images, channels: usize, size: usize) -> Array3<f64> {
    let n = x.dim().0;
    let grid = size / PATCH;
    let tokens = grid * grid;
    let pdim = channels * PATCH * PATCH;
    let mut out = Array3::<f64>::zeros((n, tokens, pdim));
    for bi in 0..n {
        for ti in 0..tokens {
            let (pi, pj) = (ti / grid, ti % grid);
            for ci in 0..channels {
                for ri in 0..PATCH {
                    for rj in 0..PATCH {
                        out[[bi, ti, ci * PATCH * PATCH + ri * PATCH + rj]] =
                            x[[bi, ci, pi * PATCH + ri, pj * PATCH + rj]];
                    }
                }
            }
        }
    }
    out
}
