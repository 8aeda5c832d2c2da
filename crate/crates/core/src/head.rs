//! Trainable mask head: pixel decoder + query transformer.
//!
//! The head consumes the frozen feature map `f` (shape `[c_f, Hf, Wf]`) and
//! produces, per decoder layer, a set of `n_queries` class-agnostic masks at
//! twice the feature resolution together with one embedding vector per mask.
//!
//! Structure:
//!
//! * a small FPN-style pixel decoder builds a three-level pyramid from `f`
//!   (strides 4/2/1 relative to the feature grid) and a per-pixel embedding
//!   map `f_pm` at stride 1/2 (which is image resolution when the backbone
//!   halves the input);
//! * learned queries run through decoder layers of cross-attention (levels
//!   visited round-robin, coarse to fine), self-attention, and a feed-forward
//!   block, all pre-norm;
//! * after every layer a shared head turns each query into mask logits
//!   (`⟨mask_embed, f_pm⟩` per pixel) and a pooled, projected embedding for
//!   prompt grounding.
//!
//! Cross-attention is unrestricted by default. With
//! [`HeadConfig::masked_attention`] enabled, layers after the first restrict
//! attention to the foreground of the previous layer's predicted masks; the
//! gates are built from detached values so no gradient flows through the
//! gating decision, and a query whose gate would block every key falls back
//! to unrestricted attention.

use crate::archive::{Dtype, TensorArchive};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::util::derive_seed;
use ndarray::{Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Denominator floor for masked average pooling.
pub const POOL_EPS: f64 = 1e-8;

/// Additive attention-logit penalty used to gate masked attention.
const GATE_PENALTY: f64 = -1e9;

/// Architecture of the mask head.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Channels of the frozen feature map this head is built for.
    pub c_f: usize,
    /// Channels inside the pixel decoder (and of `f_pm`).
    pub d_pd: usize,
    /// Query / transformer width.
    pub d_model: usize,
    /// Attention heads (`d_model` must divide evenly).
    pub n_heads: usize,
    /// Decoder layers.
    pub n_layers: usize,
    /// Feed-forward hidden width.
    pub d_ffn: usize,
    /// Number of learned queries (maximum detectable parts per image).
    pub n_queries: usize,
    /// Output embedding width; must match the text embedding width.
    pub d_emb: usize,
    /// Restrict cross-attention to the previous layer's mask foreground.
    pub masked_attention: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            c_f: 32,
            d_pd: 32,
            d_model: 64,
            n_heads: 4,
            n_layers: 3,
            d_ffn: 128,
            n_queries: 30,
            d_emb: 32,
            masked_attention: false,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("c_f", self.c_f),
            ("d_pd", self.d_pd),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ffn", self.d_ffn),
            ("n_queries", self.n_queries),
            ("d_emb", self.d_emb),
        ] {
            if v == 0 {
                return Err(Error::config(format!("head.{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "head.d_model ({}) must be divisible by head.n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 4 != 0 {
            return Err(Error::config(format!(
                "head.d_model ({}) must be a multiple of 4 for 2D positional embeddings",
                self.d_model
            )));
        }
        Ok(())
    }

    /// Named parameter shapes, sorted by name.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
        let mut w = |name: &str, shape: &[usize]| {
            specs.push((name.to_string(), shape.to_vec()));
        };
        let (cf, pd, dm, ffn, n, emb) = (
            self.c_f,
            self.d_pd,
            self.d_model,
            self.d_ffn,
            self.n_queries,
            self.d_emb,
        );
        // pixel decoder: 3x3 lateral at the coarsest level, 1x1 at finer ones
        w("head.pd.lat0.w", &[pd, cf, 3, 3]);
        w("head.pd.lat0.b", &[pd]);
        w("head.pd.lat1.w", &[pd, cf, 1, 1]);
        w("head.pd.lat1.b", &[pd]);
        w("head.pd.lat2.w", &[pd, cf, 1, 1]);
        w("head.pd.lat2.b", &[pd]);
        w("head.pd.out.w", &[pd, pd, 3, 3]);
        w("head.pd.out.b", &[pd]);
        // per-level key/value input projections
        for l in 0..3 {
            w(&format!("head.kv{l}.w"), &[dm, pd]);
            w(&format!("head.kv{l}.b"), &[dm]);
        }
        // queries
        w("head.q.embed", &[n, dm]);
        w("head.q.pos", &[n, dm]);
        // decoder layers
        for i in 0..self.n_layers {
            for block in ["cross", "self"] {
                for proj in ["q", "k", "v", "o"] {
                    w(&format!("head.dec{i}.{block}.{proj}.w"), &[dm, dm]);
                    w(&format!("head.dec{i}.{block}.{proj}.b"), &[dm]);
                }
            }
            for ln in ["ln1", "ln2", "ln3"] {
                w(&format!("head.dec{i}.{ln}.gamma"), &[dm]);
                w(&format!("head.dec{i}.{ln}.beta"), &[dm]);
            }
            w(&format!("head.dec{i}.ffn1.w"), &[ffn, dm]);
            w(&format!("head.dec{i}.ffn1.b"), &[ffn]);
            w(&format!("head.dec{i}.ffn2.w"), &[dm, ffn]);
            w(&format!("head.dec{i}.ffn2.b"), &[dm]);
        }
        // shared prediction heads
        w("head.out_ln.gamma", &[dm]);
        w("head.out_ln.beta", &[dm]);
        w("head.mask_mlp.l1.w", &[dm, dm]);
        w("head.mask_mlp.l1.b", &[dm]);
        w("head.mask_mlp.l2.w", &[pd, dm]);
        w("head.mask_mlp.l2.b", &[pd]);
        w("head.embed.w", &[emb, pd]);
        w("head.embed.b", &[emb]);
        specs.sort_by(|a, b| a.0.cmp(&b.0));
        specs
    }
}

/// Concrete parameter values, keyed by name.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub values: BTreeMap<String, ArrayD<f64>>,
}

impl HeadParams {
    /// Seeded initialization: weights `U(±1/√fan_in)`, biases and norm
    /// offsets zero, norm scales one. Each tensor draws from its own stream
    /// keyed by name, so adding parameters never reshuffles existing ones.
    pub fn init(cfg: &HeadConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut values = BTreeMap::new();
        for (name, shape) in cfg.param_specs() {
            let arr = if name.ends_with(".gamma") {
                ArrayD::from_elem(IxDyn(&shape), 1.0)
            } else if name.ends_with(".beta") || name.ends_with(".b") {
                ArrayD::zeros(IxDyn(&shape))
            } else {
                let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &name));
                ArrayD::from_shape_fn(IxDyn(&shape), |_| rng.gen_range(-bound..bound))
            };
            values.insert(name, arr);
        }
        Ok(HeadParams { values })
    }

    /// Load parameters from an archive, validating names and shapes.
    pub fn from_archive(cfg: &HeadConfig, archive: &TensorArchive) -> Result<Self> {
        cfg.validate()?;
        let mut values = BTreeMap::new();
        for (name, shape) in cfg.param_specs() {
            let entry = archive
                .get(&name)
                .ok_or_else(|| Error::data(format!("checkpoint is missing tensor {name}")))?;
            if entry.data.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "checkpoint tensor {name} has shape {:?}, expected {:?}",
                    entry.data.shape(),
                    shape
                )));
            }
            values.insert(name, entry.data.clone());
        }
        Ok(HeadParams { values })
    }

    /// Store parameters into an archive (f64 entries, bit-exact round trip).
    pub fn write_to(&self, archive: &mut TensorArchive) {
        for (name, value) in &self.values {
            archive.insert(name.clone(), value.clone(), Dtype::F64);
        }
    }

    /// Register every parameter as a tape leaf.
    pub fn tape_vars(&self, tape: &Tape) -> BTreeMap<String, Var> {
        self.values
            .iter()
            .map(|(name, value)| (name.clone(), tape.var(value.clone())))
            .collect()
    }
}

/// One prediction set: `logits` is `[n_queries, H_pm, W_pm]`, `embeds` is
/// `[n_queries, d_emb]`.
pub struct MaskSet {
    pub logits: Var,
    pub embeds: Var,
}

/// Per-layer prediction sets, final layer last, plus the shared pixel
/// embedding map `f_pm`.
pub struct HeadOutput {
    pub layers: Vec<MaskSet>,
    pub fpm: Var,
}

impl HeadOutput {
    pub fn final_set(&self) -> &MaskSet {
        self.layers.last().expect("head produced no layers")
    }
}

fn get(vars: &BTreeMap<String, Var>, name: &str) -> Var {
    *vars
        .get(name)
        .unwrap_or_else(|| panic!("missing head parameter {name}"))
}

/// `x @ w^T + b` for row-major token matrices.
fn linear(t: &Tape, x: Var, w: Var, b: Var) -> Var {
    t.add_row(t.matmul(x, t.transpose(w)), b)
}

/// Multi-head attention; `gate` is an additive constant on the attention
/// logits (shape `[queries, keys]`).
fn mha(t: &Tape, q: Var, k: Var, v: Var, n_heads: usize, gate: Option<&ArrayD<f64>>) -> Var {
    let dm = t.shape(q)[1];
    let dh = dm / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = t.slice_cols(q, lo, hi);
        let kh = t.slice_cols(k, lo, hi);
        let vh = t.slice_cols(v, lo, hi);
        let mut logits = t.affine(t.matmul(qh, t.transpose(kh)), scale, 0.0);
        if let Some(g) = gate {
            logits = t.add_const(logits, g);
        }
        let attn = t.softmax_axis(logits, 1);
        outs.push(t.matmul(attn, vh));
    }
    t.concat_cols(&outs)
}

/// Masked average pooling: `masks` is `[N, P]` of mask probabilities,
/// `feats` is `[P, C]`; returns `[N, C]`. A mask that is exactly zero
/// everywhere pools to the zero vector (the denominator is floored at
/// [`POOL_EPS`] while the numerator vanishes).
pub fn masked_pool(t: &Tape, masks: Var, feats: Var) -> Var {
    let num = t.matmul(masks, feats);
    let den = t.clamp_min(t.sum_rows(masks), POOL_EPS);
    t.div_rows(num, den)
}

/// Build the additive attention gate for one pyramid level from the previous
/// layer's mask logits (values only — the gate is not differentiated
/// through). Blocks keys whose resampled mask probability is below 1/2;
/// a row that would block everything is left unrestricted instead.
fn attention_gate(prev_logits: &ArrayD<f64>, lh: usize, lw: usize) -> ArrayD<f64> {
    let l3 = prev_logits
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap();
    let resized = crate::nn::bilinear_resize(&l3.to_owned(), lh, lw);
    let n = resized.shape()[0];
    let hw = lh * lw;
    let mut gate = ndarray::Array2::<f64>::zeros((n, hw));
    for i in 0..n {
        let mut blocked = 0;
        for y in 0..lh {
            for x in 0..lw {
                // sigmoid(l) < 0.5  <=>  l < 0
                if resized[[i, y, x]] < 0.0 {
                    gate[[i, y * lw + x]] = GATE_PENALTY;
                    blocked += 1;
                }
            }
        }
        if blocked == hw {
            gate.row_mut(i).fill(0.0);
        }
    }
    gate.into_dyn()
}

/// Run the head over a frozen feature map `f` (`[c_f, Hf, Wf]`).
///
/// `vars` must come from [`HeadParams::tape_vars`] on the same tape, which
/// keeps the forward differentiable with respect to every head parameter.
pub fn forward(
    t: &Tape,
    cfg: &HeadConfig,
    vars: &BTreeMap<String, Var>,
    f: &Array3<f64>,
) -> Result<HeadOutput> {
    let (c_f, hf, wf) = f.dim();
    if c_f != cfg.c_f {
        return Err(Error::shape(format!(
            "feature map has {c_f} channels, head was built for {}",
            cfg.c_f
        )));
    }
    if hf % 4 != 0 || wf % 4 != 0 || hf == 0 || wf == 0 {
        return Err(Error::shape(format!(
            "feature grid {hf}x{wf} must be divisible by 4 for the pixel decoder"
        )));
    }

    let f_var = t.var(f.clone().into_dyn());

    // --- pixel decoder ---
    let lat = |x: Var, idx: usize, pad: usize| -> Var {
        let w = get(vars, &format!("head.pd.lat{idx}.w"));
        let b = get(vars, &format!("head.pd.lat{idx}.b"));
        t.relu(t.conv2d(x, w, b, 1, pad))
    };
    let p0 = lat(t.avg_pool2d(f_var, 4), 0, 1);
    let p1 = {
        let fine = lat(t.avg_pool2d(f_var, 2), 1, 0);
        t.add(fine, t.bilinear_resize(p0, hf / 2, wf / 2))
    };
    let p2 = {
        let fine = lat(f_var, 2, 0);
        t.add(fine, t.bilinear_resize(p1, hf, wf))
    };
    let fpm = t.conv2d(
        t.bilinear_resize(p2, hf * 2, wf * 2),
        get(vars, "head.pd.out.w"),
        get(vars, "head.pd.out.b"),
        1,
        1,
    );
    let (hpm, wpm) = (hf * 2, wf * 2);
    let fpm_flat = t.reshape(fpm, vec![cfg.d_pd, hpm * wpm]); // [d_pd, HW]

    // per-level tokens projected to d_model, plus constant positional codes
    let levels = [p0, p1, p2];
    let level_dims = [(hf / 4, wf / 4), (hf / 2, wf / 2), (hf, wf)];
    let mut level_kv = Vec::with_capacity(3);
    let mut level_pos = Vec::with_capacity(3);
    for (l, (&p, &(lh, lw))) in levels.iter().zip(level_dims.iter()).enumerate() {
        let tokens = t.transpose(t.reshape(p, vec![cfg.d_pd, lh * lw])); // [hw, d_pd]
        let kv = linear(
            t,
            tokens,
            get(vars, &format!("head.kv{l}.w")),
            get(vars, &format!("head.kv{l}.b")),
        );
        level_kv.push(kv);
        level_pos.push(crate::nn::pos_embed_2d(lh, lw, cfg.d_model).into_dyn());
    }

    let qpos = get(vars, "head.q.pos");
    let mut x = get(vars, "head.q.embed");
    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut prev_logits_value: Option<ArrayD<f64>> = None;

    for i in 0..cfg.n_layers {
        let lvl = i % 3;
        let (lh, lw) = level_dims[lvl];
        let pfx = format!("head.dec{i}");
        let ln = |tag: &str, v: Var| -> Var {
            t.layer_norm(
                v,
                get(vars, &format!("{pfx}.{tag}.gamma")),
                get(vars, &format!("{pfx}.{tag}.beta")),
                1e-6,
            )
        };
        let proj = |block: &str, p: &str, v: Var| -> Var {
            linear(
                t,
                v,
                get(vars, &format!("{pfx}.{block}.{p}.w")),
                get(vars, &format!("{pfx}.{block}.{p}.b")),
            )
        };

        // cross-attention over the level's tokens
        let gate = match (&prev_logits_value, cfg.masked_attention) {
            (Some(prev), true) => Some(attention_gate(prev, lh, lw)),
            _ => None,
        };
        let xin = ln("ln1", x);
        let q = proj("cross", "q", t.add(xin, qpos));
        let k = proj("cross", "k", t.add_const(level_kv[lvl], &level_pos[lvl]));
        let v = proj("cross", "v", level_kv[lvl]);
        let attn = mha(t, q, k, v, cfg.n_heads, gate.as_ref());
        x = t.add(x, proj("cross", "o", attn));

        // self-attention among queries
        let xin = ln("ln2", x);
        let qs = proj("self", "q", t.add(xin, qpos));
        let ks = proj("self", "k", t.add(xin, qpos));
        let vs = proj("self", "v", xin);
        let attn = mha(t, qs, ks, vs, cfg.n_heads, None);
        x = t.add(x, proj("self", "o", attn));

        // feed-forward
        let xin = ln("ln3", x);
        let h = t.relu(linear(
            t,
            xin,
            get(vars, &format!("{pfx}.ffn1.w")),
            get(vars, &format!("{pfx}.ffn1.b")),
        ));
        let h = linear(
            t,
            h,
            get(vars, &format!("{pfx}.ffn2.w")),
            get(vars, &format!("{pfx}.ffn2.b")),
        );
        x = t.add(x, h);

        // shared prediction heads
        let y = t.layer_norm(
            x,
            get(vars, "head.out_ln.gamma"),
            get(vars, "head.out_ln.beta"),
            1e-6,
        );
        let h1 = t.relu(linear(
            t,
            y,
            get(vars, "head.mask_mlp.l1.w"),
            get(vars, "head.mask_mlp.l1.b"),
        ));
        let mask_embed = linear(
            t,
            h1,
            get(vars, "head.mask_mlp.l2.w"),
            get(vars, "head.mask_mlp.l2.b"),
        ); // [N, d_pd]
        let logits_flat = t.matmul(mask_embed, fpm_flat); // [N, HW]
        let logits = t.reshape(logits_flat, vec![cfg.n_queries, hpm, wpm]);

        let probs = t.sigmoid(logits_flat);
        let pooled = masked_pool(t, probs, t.transpose(fpm_flat)); // [N, d_pd]
        let embeds = linear(t, pooled, get(vars, "head.embed.w"), get(vars, "head.embed.b"));

        prev_logits_value = Some(t.value(logits));
        layers.push(MaskSet { logits, embeds });
    }

    Ok(HeadOutput { layers, fpm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{assert_grads_close, numeric_grad};
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> HeadConfig {
        HeadConfig {
            c_f: 3,
            d_pd: 4,
            d_model: 4,
            n_heads: 2,
            n_layers: 2,
            d_ffn: 8,
            n_queries: 2,
            d_emb: 3,
            masked_attention: false,
        }
    }

    fn rand_features(cfg: &HeadConfig, h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((cfg.c_f, h, w), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn output_shapes_and_layer_count() {
        let cfg = tiny_cfg();
        let params = HeadParams::init(&cfg, 9).unwrap();
        let f = rand_features(&cfg, 8, 12, 1);
        let t = Tape::new();
        let vars = params.tape_vars(&t);
        let out = forward(&t, &cfg, &vars, &f).unwrap();
        assert_eq!(out.layers.len(), cfg.n_layers);
        for set in &out.layers {
            assert_eq!(t.shape(set.logits), vec![cfg.n_queries, 16, 24]);
            assert_eq!(t.shape(set.embeds), vec![cfg.n_queries, cfg.d_emb]);
        }
        assert_eq!(t.shape(out.fpm), vec![cfg.d_pd, 16, 24]);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg();
        let params = HeadParams::init(&cfg, 5).unwrap();
        let params2 = HeadParams::init(&cfg, 5).unwrap();
        for (a, b) in params.values.values().zip(params2.values.values()) {
            assert_eq!(a, b);
        }
        let f = rand_features(&cfg, 4, 4, 2);
        let run = || {
            let t = Tape::new();
            let vars = params.tape_vars(&t);
            let out = forward(&t, &cfg, &vars, &f).unwrap();
            (t.value(out.final_set().logits), t.value(out.final_set().embeds))
        };
        let (l1, e1) = run();
        let (l2, e2) = run();
        assert_eq!(l1, l2);
        assert_eq!(e1, e2);
    }

    #[test]
    fn rejects_wrong_channel_count_and_grid() {
        let cfg = tiny_cfg();
        let params = HeadParams::init(&cfg, 5).unwrap();
        let t = Tape::new();
        let vars = params.tape_vars(&t);
        let bad_c = Array3::<f64>::zeros((cfg.c_f + 1, 4, 4));
        assert!(forward(&t, &cfg, &vars, &bad_c).is_err());
        let bad_grid = Array3::<f64>::zeros((cfg.c_f, 6, 4));
        assert!(forward(&t, &cfg, &vars, &bad_grid).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let cfg = tiny_cfg();
        let params = HeadParams::init(&cfg, 11).unwrap();
        let mut arch = TensorArchive::new();
        params.write_to(&mut arch);
        let bytes = arch.to_bytes();
        let arch2 = TensorArchive::from_bytes(&bytes).unwrap();
        let params2 = HeadParams::from_archive(&cfg, &arch2).unwrap();
        for (name, value) in &params.values {
            assert_eq!(value, &params2.values[name], "tensor {name}");
        }
    }

    #[test]
    fn masked_pool_of_zero_mask_is_zero_vector() {
        let t = Tape::new();
        let masks = t.var(
            ndarray::array![[0.0, 0.0, 0.0], [0.5, 0.25, 0.0]]
                .into_dyn(),
        );
        let feats = t.var(
            ndarray::array![[1.0, -2.0], [3.0, 4.0], [5.0, 6.0]]
                .into_dyn(),
        );
        let pooled = t.value(masked_pool(&t, masks, feats));
        assert_eq!(pooled[[0, 0]], 0.0);
        assert_eq!(pooled[[0, 1]], 0.0);
        // second row is an ordinary weighted average
        let num0 = 0.5 * 1.0 + 0.25 * 3.0;
        let num1 = 0.5 * -2.0 + 0.25 * 4.0;
        assert!((pooled[[1, 0]] - num0 / 0.75).abs() < 1e-12);
        assert!((pooled[[1, 1]] - num1 / 0.75).abs() < 1e-12);
    }

    /// Scalar probe loss touching both mask logits and embeddings.
    fn probe_loss(t: &Tape, cfg: &HeadConfig, out: &HeadOutput) -> Var {
        let set = out.final_set();
        let shape = t.shape(set.logits);
        let pattern = ArrayD::from_shape_fn(IxDyn(&shape), |ix| {
            ((ix[0] + 2 * ix[1] + 3 * ix[2]) % 5) as f64 * 0.25 - 0.5
        });
        let lmask = t.sum(t.mul_const(t.sigmoid(set.logits), &pattern));
        let lemb = t.sum(t.mul(set.embeds, set.embeds));
        let _ = cfg;
        t.add(lmask, t.affine(lemb, 0.5, 0.0))
    }

    fn loss_for(cfg: &HeadConfig, params: &HeadParams, f: &Array3<f64>) -> f64 {
        let t = Tape::new();
        let vars = params.tape_vars(&t);
        let out = forward(&t, cfg, &vars, f).unwrap();
        t.scalar_value(probe_loss(&t, cfg, &out))
    }

    fn check_all_param_grads(cfg: &HeadConfig, seed: u64) {
        let params = HeadParams::init(cfg, seed).unwrap();
        let f = rand_features(cfg, 4, 4, seed ^ 0xabc);
        let t = Tape::new();
        let vars = params.tape_vars(&t);
        let out = forward(&t, cfg, &vars, &f).unwrap();
        let loss = probe_loss(&t, cfg, &out);
        let grads = t.backward(loss);
        for (name, value) in &params.values {
            let analytic = grads.wrt(&t, vars[name]);
            let numeric = numeric_grad(
                &mut |perturbed| {
                    let mut p2 = params.clone();
                    p2.values.insert(name.clone(), perturbed.clone());
                    loss_for(cfg, &p2, &f)
                },
                value,
                1e-4,
            );
            assert_grads_close(&analytic, &numeric, 1e-4, 1e-7);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_all_param_grads(&tiny_cfg(), 21);
    }

    #[test]
    fn gradients_match_with_masked_attention() {
        let cfg = HeadConfig {
            masked_attention: true,
            n_layers: 3, // exercise a gated layer on every pyramid level
            ..tiny_cfg()
        };
        check_all_param_grads(&cfg, 22);
    }

    #[test]
    fn masked_attention_stays_finite_when_gates_block_everything() {
        let cfg = HeadConfig {
            masked_attention: true,
            ..tiny_cfg()
        };
        // push mask logits far negative so every gate would block every key
        let mut params = HeadParams::init(&cfg, 3).unwrap();
        let b = params.values.get_mut("head.mask_mlp.l2.b").unwrap();
        b.fill(-50.0);
        let f = rand_features(&cfg, 4, 4, 7);
        let t = Tape::new();
        let vars = params.tape_vars(&t);
        let out = forward(&t, &cfg, &vars, &f).unwrap();
        for set in &out.layers {
            assert!(t.value(set.logits).iter().all(|v| v.is_finite()));
            assert!(t.value(set.embeds).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn gate_blocks_background_and_keeps_foreground() {
        // one query with a half-positive mask, one fully negative
        let logits = ndarray::Array3::from_shape_fn((2, 4, 4), |(q, y, _)| {
            if q == 0 {
                if y < 2 {
                    5.0
                } else {
                    -5.0
                }
            } else {
                -3.0
            }
        })
        .into_dyn();
        let gate = attention_gate(&logits, 4, 4);
        // query 0: top half open, bottom half blocked
        assert_eq!(gate[[0, 0]], 0.0);
        assert_eq!(gate[[0, 15]], GATE_PENALTY);
        // query 1 would block everything -> fully open fallback
        for p in 0..16 {
            assert_eq!(gate[[1, p]], 0.0);
        }
    }
}
