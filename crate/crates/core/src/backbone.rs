//! Frozen feature extractor: a captioning-style context head plus a small
//! latent-diffusion stack, tapped for intermediate features in one forward
//! pass (no iterative denoising).
//!
//! The pieces mirror the usual text-to-image layout at desk scale:
//!
//! ```text
//! context:   C, cls = attn(pool(proj(patchify(x))))            (image -> tokens)
//! encode:    f_E    = conv stack(x);  x_e = head(f_E)          (image -> latent)
//! noise:     x_t    = sqrt(ab_t) x_e + sqrt(1 - ab_t) eps
//! denoise:   f_U    = unet(x_t | [C; cls])                     (cross-attention)
//! decode:    f_D    = upconv stack(x_t)
//! features:  f      = resample-to-largest(f_E) || f_U || f_D   (channel concat)
//! ```
//!
//! Every tapped stream is the final hidden activation of its sub-network,
//! taken just before that network's output head. Construction is a pure
//! function of `(config, seed)`: parameters are drawn from per-name seeded
//! streams, so two builds agree bit-for-bit and archived weights reload
//! exactly.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::archive::{Dtype, TensorArchive};
use crate::error::{Error, Result};
use crate::nn;
use crate::schedule::{noisy_latent, NoiseSchedule};
use crate::util::derive_seed;

/// Minimum image side accepted anywhere in the pipeline.
pub const MIN_IMAGE_SIDE: usize = 8;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Patch stride of the context tokenizer.
    pub patch_size: usize,
    /// Patch token width.
    pub d_cv: usize,
    /// Number of pooled context tokens.
    pub t_ctx: usize,
    /// Context embedding width.
    pub d_ctx: usize,
    /// Attention blocks in the context head.
    pub i2c_depth: usize,
    /// Encoder / denoiser / decoder feature channels.
    pub c_e: usize,
    pub c_u: usize,
    pub c_d: usize,
    /// Latent channels produced by the encoder head.
    pub latent_dim: usize,
    /// Schedule length and kind.
    pub t_max: usize,
    pub schedule: String,
    /// Weight source: `toy:<seed>` or `archive:<path>`.
    pub provider: String,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            patch_size: 4,
            d_cv: 16,
            t_ctx: 8,
            d_ctx: 32,
            i2c_depth: 1,
            c_e: 8,
            c_u: 16,
            c_d: 8,
            latent_dim: 256,
            t_max: 1000,
            schedule: "linear(0.0001,0.02)".into(),
            provider: "toy:777".into(),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("patch_size", self.patch_size),
            ("d_cv", self.d_cv),
            ("t_ctx", self.t_ctx),
            ("d_ctx", self.d_ctx),
            ("c_e", self.c_e),
            ("c_u", self.c_u),
            ("c_d", self.c_d),
            ("latent_dim", self.latent_dim),
            ("t_max", self.t_max),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::config(format!("backbone.{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Channel count of the concatenated feature map `f`.
    pub fn output_channels(&self) -> usize {
        self.c_e + self.c_u + self.c_d
    }

    pub fn build_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::parse(&self.schedule, self.t_max)
    }
}

/// Weight source parsed from the config `provider` string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provider {
    Toy(u64),
    Archive(String),
}

pub fn parse_provider(s: &str) -> Result<Provider> {
    if let Some(seed) = s.strip_prefix("toy:") {
        let seed: u64 = seed
            .parse()
            .map_err(|_| Error::config(format!("provider '{s}': bad toy seed")))?;
        return Ok(Provider::Toy(seed));
    }
    if let Some(path) = s.strip_prefix("archive:") {
        if path.is_empty() {
            return Err(Error::config(format!("provider '{s}': empty archive path")));
        }
        return Ok(Provider::Archive(path.to_string()));
    }
    Err(Error::config(format!(
        "unknown provider '{s}' (expected toy:<seed> or archive:<path>)"
    )))
}

/// Image-conditioning tokens: pooled context `c` plus a summary `cls` vector.
#[derive(Debug, Clone)]
pub struct Context {
    pub c: Array2<f64>,
    pub cls: Array1<f64>,
}

/// Tapped feature streams and their channel concatenation.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    /// `[c_e + c_u + c_d, H', W']`, all streams resampled to the largest grid.
    pub f: Array3<f64>,
    pub f_e: Array3<f64>,
    pub f_u: Array3<f64>,
    pub f_d: Array3<f64>,
}

enum Kind {
    Weight,
    Bias,
    LnGamma,
    LnBeta,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    kind: Kind,
}

fn param_specs(cfg: &BackboneConfig) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    let mut w = |name: &str, shape: Vec<usize>| {
        v.push(ParamSpec { name: name.to_string(), shape, kind: Kind::Weight })
    };
    let p = cfg.patch_size;
    let (dc, tc, de, cu, cd, ce, lat) =
        (cfg.d_cv, cfg.d_ctx, cfg.d_ctx, cfg.c_u, cfg.c_d, cfg.c_e, cfg.latent_dim);
    let _ = tc;
    w("cv.patch.weight", vec![dc, 3, p, p]);
    w("i2c.proj.weight", vec![de, dc]);
    for l in 0..cfg.i2c_depth {
        for part in ["q", "k", "v", "o"] {
            w(&format!("i2c.block{l}.{part}.weight"), vec![de, de]);
        }
        w(&format!("i2c.block{l}.ffn1.weight"), vec![2 * de, de]);
        w(&format!("i2c.block{l}.ffn2.weight"), vec![de, 2 * de]);
    }
    w("i2c.cls.weight", vec![de, de]);
    w("enc.conv1.weight", vec![ce, 3, 3, 3]);
    w("enc.conv2.weight", vec![ce, ce, 3, 3]);
    w("enc.head.weight", vec![lat, ce, 1, 1]);
    w("unet.in.weight", vec![cu, lat, 3, 3]);
    w("unet.down.weight", vec![cu, cu, 3, 3]);
    w("unet.attn.q.weight", vec![cu, cu]);
    w("unet.attn.k.weight", vec![cu, de]);
    w("unet.attn.v.weight", vec![cu, de]);
    w("unet.attn.o.weight", vec![cu, cu]);
    w("unet.mid.weight", vec![cu, cu, 3, 3]);
    w("unet.up.weight", vec![cu, 2 * cu, 3, 3]);
    w("unet.head.weight", vec![lat, cu, 1, 1]);
    w("dec.conv1.weight", vec![cd, lat, 3, 3]);
    w("dec.conv2.weight", vec![cd, cd, 3, 3]);
    w("dec.head.weight", vec![3, cd, 1, 1]);

    // Companion bias for every weight above, named `<prefix>.bias`, sized by
    // the leading (output) dimension.
    let biases: Vec<ParamSpec> = v
        .iter()
        .map(|ps| ParamSpec {
            name: ps.name.replace(".weight", ".bias"),
            shape: vec![ps.shape[0]],
            kind: Kind::Bias,
        })
        .collect();
    v.extend(biases);

    for l in 0..cfg.i2c_depth {
        for ln in ["ln1", "ln2"] {
            v.push(ParamSpec {
                name: format!("i2c.block{l}.{ln}.gamma"),
                shape: vec![de],
                kind: Kind::LnGamma,
            });
            v.push(ParamSpec {
                name: format!("i2c.block{l}.{ln}.beta"),
                shape: vec![de],
                kind: Kind::LnBeta,
            });
        }
    }
    v.sort_by(|a, b| a.name.cmp(&b.name));
    v
}

/// The frozen backbone: config plus named parameters.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    params: BTreeMap<String, ArrayD<f64>>,
}

fn validate_image(image: &Array3<f64>) -> Result<()> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::shape(format!("image must be [3, H, W], got [{c}, {h}, {w}]")));
    }
    if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
        return Err(Error::data(format!(
            "image {h}x{w} is below the minimum side of {MIN_IMAGE_SIDE}"
        )));
    }
    if image.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
        return Err(Error::data("image values must be finite and within [0, 1]"));
    }
    Ok(())
}

impl Backbone {
    /// Deterministic random init: every parameter comes from its own
    /// name-derived ChaCha stream, so the result depends only on
    /// `(config, seed)`.
    pub fn toy(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = BTreeMap::new();
        for spec in param_specs(&cfg) {
            let n: usize = spec.shape.iter().product();
            let data = match spec.kind {
                Kind::Weight => {
                    // fan_in = everything but the leading output dim
                    let fan_in: usize = spec.shape[1..].iter().product::<usize>().max(1);
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &spec.name));
                    ArrayD::from_shape_vec(
                        spec.shape.clone(),
                        (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
                    )
                    .unwrap()
                }
                Kind::Bias | Kind::LnBeta => ArrayD::zeros(spec.shape.clone()),
                Kind::LnGamma => ArrayD::from_elem(spec.shape.clone(), 1.0),
            };
            params.insert(spec.name, data);
        }
        Ok(Backbone { cfg, params })
    }

    /// Load from an archive, checking that every expected tensor is present
    /// with the config-implied shape. Extra tensors (e.g. adapter factors
    /// kept beside the base weights) are ignored.
    pub fn from_archive(cfg: BackboneConfig, archive: &TensorArchive) -> Result<Self> {
        cfg.validate()?;
        let mut params = BTreeMap::new();
        for spec in param_specs(&cfg) {
            let entry = archive.get(&spec.name).ok_or_else(|| {
                Error::data(format!("backbone archive is missing tensor '{}'", spec.name))
            })?;
            if entry.data.shape() != spec.shape.as_slice() {
                return Err(Error::shape(format!(
                    "backbone tensor '{}': archive shape {:?} differs from config shape {:?}",
                    spec.name,
                    entry.data.shape(),
                    spec.shape
                )));
            }
            params.insert(spec.name, entry.data.clone());
        }
        Ok(Backbone { cfg, params })
    }

    /// Resolve the config's `provider` string (`toy:<seed>` draws weights,
    /// `archive:<path>` loads them; relative paths resolve against `base_dir`).
    pub fn from_provider(cfg: BackboneConfig, base_dir: Option<&std::path::Path>) -> Result<Self> {
        match parse_provider(&cfg.provider)? {
            Provider::Toy(seed) => Self::toy(cfg, seed),
            Provider::Archive(path) => {
                let p = std::path::PathBuf::from(&path);
                let p = match (p.is_relative(), base_dir) {
                    (true, Some(dir)) => dir.join(p),
                    _ => p,
                };
                let archive = TensorArchive::load(&p)?;
                Self::from_archive(cfg, &archive)
            }
        }
    }

    /// Export every parameter (f64 entries, exact round-trip).
    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        for (name, data) in &self.params {
            a.insert(name.clone(), data.clone(), Dtype::F64);
        }
        a.meta.insert(
            "backbone_config".into(),
            serde_json::to_value(&self.cfg).expect("config serializes"),
        );
        a
    }

    fn p1(&self, name: &str) -> Array1<f64> {
        self.params[name].clone().into_dimensionality().unwrap()
    }
    fn p2(&self, name: &str) -> Array2<f64> {
        self.params[name].clone().into_dimensionality().unwrap()
    }
    fn p4(&self, name: &str) -> Array4<f64> {
        self.params[name].clone().into_dimensionality().unwrap()
    }

    fn lin(&self, x: &Array2<f64>, prefix: &str) -> Array2<f64> {
        nn::linear(x, &self.p2(&format!("{prefix}.weight")), Some(&self.p1(&format!("{prefix}.bias"))))
    }

    fn conv(&self, x: &Array3<f64>, prefix: &str, stride: usize, pad: usize) -> Array3<f64> {
        nn::conv2d(
            x,
            &self.p4(&format!("{prefix}.weight")),
            Some(&self.p1(&format!("{prefix}.bias"))),
            stride,
            pad,
        )
    }

    /// Context head: patchify, project, pool to `t_ctx` tokens, run the
    /// attention blocks, and summarize into `cls`.
    ///
    /// Errors when the image yields fewer patch tokens than `t_ctx` (the
    /// backbone's minimum patch grid).
    pub fn compute_context(&self, image: &Array3<f64>) -> Result<Context> {
        validate_image(image)?;
        let p = self.cfg.patch_size;
        let patches = nn::relu3(&self.conv(image, "cv.patch", p, 0));
        let (dc, hp, wp) = patches.dim();
        let n_tokens = hp * wp;
        if n_tokens < self.cfg.t_ctx {
            return Err(Error::data(format!(
                "image patch grid {hp}x{wp} gives {n_tokens} tokens, below the backbone minimum of {}",
                self.cfg.t_ctx
            )));
        }
        // [T, d_cv] row-major over the patch grid.
        let mut tokens = Array2::<f64>::zeros((n_tokens, dc));
        for y in 0..hp {
            for x in 0..wp {
                for c in 0..dc {
                    tokens[[y * wp + x, c]] = patches[[c, y, x]];
                }
            }
        }
        let mut h = nn::adaptive_avg_pool_tokens(&self.lin(&tokens, "i2c.proj"), self.cfg.t_ctx);
        for l in 0..self.cfg.i2c_depth {
            let pre = format!("i2c.block{l}");
            let normed = nn::layer_norm_rows(
                &h,
                &self.p1(&format!("{pre}.ln1.gamma")),
                &self.p1(&format!("{pre}.ln1.beta")),
                1e-6,
            );
            let q = self.lin(&normed, &format!("{pre}.q"));
            let k = self.lin(&normed, &format!("{pre}.k"));
            let v = self.lin(&normed, &format!("{pre}.v"));
            let att = self.lin(&nn::attention(&q, &k, &v), &format!("{pre}.o"));
            h = &h + &att;
            let normed = nn::layer_norm_rows(
                &h,
                &self.p1(&format!("{pre}.ln2.gamma")),
                &self.p1(&format!("{pre}.ln2.beta")),
                1e-6,
            );
            let ff = self.lin(&normed, &format!("{pre}.ffn1")).mapv(|v| v.max(0.0));
            let ff = self.lin(&ff, &format!("{pre}.ffn2"));
            h = &h + &ff;
        }
        let mean = h.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
        let cls = self.lin(&mean, "i2c.cls").row(0).to_owned();
        Ok(Context { c: h, cls })
    }

    /// Image encoder: returns the tapped hidden `f_E` and the latent `x_e`.
    pub fn encode(&self, image: &Array3<f64>) -> Result<(Array3<f64>, Array3<f64>)> {
        validate_image(image)?;
        let h = nn::relu3(&self.conv(image, "enc.conv1", 2, 1));
        let f_e = nn::relu3(&self.conv(&h, "enc.conv2", 2, 1));
        let x_e = self.conv(&f_e, "enc.head", 1, 0);
        Ok((f_e, x_e))
    }

    /// Denoiser trunk: two-level UNet with cross-attention over `[C; cls]`.
    /// Returns the tapped hidden `f_U` (pre-head).
    pub fn denoise_features(&self, x_t: &Array3<f64>, ctx: &Context) -> Array3<f64> {
        let h0 = nn::relu3(&self.conv(x_t, "unet.in", 1, 1));
        let mut h1 = nn::relu3(&self.conv(&h0, "unet.down", 2, 1));
        // Cross-attention: spatial tokens attend to the context rows.
        let (cu, hh, ww) = h1.dim();
        let mut ctx_rows = Array2::<f64>::zeros((ctx.c.nrows() + 1, ctx.c.ncols()));
        ctx_rows.slice_mut(ndarray::s![..ctx.c.nrows(), ..]).assign(&ctx.c);
        ctx_rows.row_mut(ctx.c.nrows()).assign(&ctx.cls);
        let mut tokens = Array2::<f64>::zeros((hh * ww, cu));
        for y in 0..hh {
            for x in 0..ww {
                for c in 0..cu {
                    tokens[[y * ww + x, c]] = h1[[c, y, x]];
                }
            }
        }
        let q = self.lin(&tokens, "unet.attn.q");
        let k = self.lin(&ctx_rows, "unet.attn.k");
        let v = self.lin(&ctx_rows, "unet.attn.v");
        let att = self.lin(&nn::attention(&q, &k, &v), "unet.attn.o");
        for y in 0..hh {
            for x in 0..ww {
                for c in 0..cu {
                    h1[[c, y, x]] += att[[y * ww + x, c]];
                }
            }
        }
        let h1 = nn::relu3(&self.conv(&h1, "unet.mid", 1, 1));
        let up = nn::bilinear_resize(&h1, h0.dim().1, h0.dim().2);
        let cat = ndarray::concatenate(Axis(0), &[h0.view(), up.view()]).unwrap();
        nn::relu3(&self.conv(&cat, "unet.up", 1, 1))
    }

    /// Decoder trunk: upsampling conv stack; returns the tapped hidden `f_D`.
    pub fn decode_features(&self, x_t: &Array3<f64>) -> Array3<f64> {
        let h = nn::relu3(&self.conv(x_t, "dec.conv1", 1, 1));
        let up = nn::bilinear_resize(&h, h.dim().1 * 2, h.dim().2 * 2);
        nn::relu3(&self.conv(&up, "dec.conv2", 1, 1))
    }

    /// One-pass feature extraction at timestep `t`.
    ///
    /// `noise_seed` drives the Gaussian noise draw; at `t = 0` the clean
    /// latent is used directly, so the output does not depend on the seed.
    pub fn extract_features(
        &self,
        image: &Array3<f64>,
        schedule: &NoiseSchedule,
        t: usize,
        noise_seed: u64,
    ) -> Result<FeatureBundle> {
        let ctx = self.compute_context(image)?;
        let (f_e, x_e) = self.encode(image)?;
        let ab = schedule.alpha_bar(t)?;
        let x_t = if ab == 1.0 {
            x_e
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            let eps = ArrayD::from_shape_vec(
                x_e.shape().to_vec(),
                (0..x_e.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
            )
            .unwrap();
            noisy_latent(&x_e.clone().into_dyn(), &eps, ab)?
                .into_dimensionality()
                .unwrap()
        };
        let f_u = self.denoise_features(&x_t, &ctx);
        let f_d = self.decode_features(&x_t);
        // Resample everything to the largest grid, then concat channelwise.
        let grids = [f_e.dim(), f_u.dim(), f_d.dim()];
        let (th, tw) = grids
            .iter()
            .map(|&(_, h, w)| (h, w))
            .max_by_key(|&(h, w)| h * w)
            .unwrap();
        let fe_r = nn::bilinear_resize(&f_e, th, tw);
        let fu_r = nn::bilinear_resize(&f_u, th, tw);
        let fd_r = nn::bilinear_resize(&f_d, th, tw);
        let f = ndarray::concatenate(Axis(0), &[fe_r.view(), fu_r.view(), fd_r.view()]).unwrap();
        Ok(FeatureBundle { f, f_e, f_u, f_d })
    }
}
