//! Training loop for the parsing head.
//!
//! The feature extractor is frozen: every image's feature map is computed
//! once per (image, flip) combination and cached, and gradients flow only
//! into the head parameters and the grounding temperature. One step draws a
//! seeded batch, runs the head, matches predictions to ground truth, and
//! applies a decoupled-weight-decay Adam update:
//!
//! ```text
//! m <- b1 m + (1-b1) g        v <- b2 v + (1-b2) g^2
//! p <- p - lr ( m_hat / (sqrt(v_hat) + eps) + wd * p )
//! ```
//!
//! Weight decay touches only weight matrices (names ending in `.w`); biases,
//! norm parameters, query embeddings, and the temperature are not decayed.
//! Every random choice (batch composition, flips, sampled points, noise) is
//! derived from the run seed and the step counter, never from global state,
//! so resuming from a checkpoint replays the exact step stream.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayD};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::archive::{Dtype, TensorArchive};
use crate::backbone::Backbone;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::head::{self, HeadParams};
use crate::losses::{
    grounding_loss, matched_mask_loss, sample_points, theta_init, weighted_total, LossWeights,
};
use crate::nn::bilinear_resize;
use crate::prompts::{embed_prompts, extract_phrases, Lexicon, TextEmbedder};
use crate::sample::{Instance, LabeledSample};
use crate::schedule::NoiseSchedule;
use crate::tape::Tape;
use crate::util::derive_seed;

/// Archive key for the grounding temperature parameter (stored as `θ`,
/// with `τ = exp(θ)`).
pub const THETA_KEY: &str = "ground.theta";
const STEP_KEY: &str = "opt.step";

/// Flip an image tensor `[C, H, W]` horizontally and/or vertically.
pub fn flip_image(x: &Array3<f64>, h: bool, v: bool) -> Array3<f64> {
    let mut out = x.clone();
    if h {
        out = out.slice(s![.., .., ..;-1]).to_owned();
    }
    if v {
        out = out.slice(s![.., ..;-1, ..]).to_owned();
    }
    out
}

/// Flip a mask plane `[H, W]` horizontally and/or vertically.
pub fn flip_mask(x: &Array2<f64>, h: bool, v: bool) -> Array2<f64> {
    let mut out = x.clone();
    if h {
        out = out.slice(s![.., ..;-1]).to_owned();
    }
    if v {
        out = out.slice(s![..;-1, ..]).to_owned();
    }
    out
}

/// Resize a sample to a `target`×`target` square for training. Masks are
/// resized bilinearly and re-binarized at 0.5; instances whose masks vanish
/// at the new resolution are dropped.
pub fn resize_square(sample: &LabeledSample, target: usize) -> LabeledSample {
    let (h, w) = sample.plane();
    if h == target && w == target {
        return sample.clone();
    }
    let image = bilinear_resize(&sample.image, target, target);
    let mut instances = Vec::with_capacity(sample.instances.len());
    for inst in &sample.instances {
        let plane = inst
            .mask
            .clone()
            .insert_axis(ndarray::Axis(0));
        let resized = bilinear_resize(&plane, target, target);
        let mask = resized
            .index_axis(ndarray::Axis(0), 0)
            .mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        if mask.sum() > 0.0 {
            instances.push(Instance {
                mask,
                label: inst.label.clone(),
                person: inst.person,
            });
        }
    }
    LabeledSample {
        image,
        caption: sample.caption.clone(),
        instances,
    }
}

/// First and second Adam moments for every trainable tensor.
type Moments = BTreeMap<String, (ArrayD<f64>, ArrayD<f64>)>;

/// Owns the frozen extractor, the head parameters, the optimizer state, and
/// the training data. One `Trainer` equals one reproducible run.
pub struct Trainer {
    cfg: RunConfig,
    backbone: Backbone,
    schedule: NoiseSchedule,
    samples: Vec<LabeledSample>,
    /// Phrase embeddings per sample, fixed for the run.
    texts: Vec<Array2<f64>>,
    params: HeadParams,
    theta: f64,
    theta_m: f64,
    theta_v: f64,
    moments: Moments,
    step: usize,
    /// Feature maps keyed by (sample index, hflip, vflip).
    feature_cache: BTreeMap<(usize, bool, bool), Array3<f64>>,
}

impl Trainer {
    /// Build a fresh run: validated config, frozen backbone, seeded head
    /// init, zeroed optimizer state.
    pub fn new(
        cfg: &RunConfig,
        samples: &[LabeledSample],
        base_dir: Option<&Path>,
    ) -> Result<Trainer> {
        let params = HeadParams::init(&cfg.head, derive_seed(cfg.seed, "head/init"))?;
        Trainer::assemble(
            cfg,
            samples,
            base_dir,
            params,
            (theta_init(), 0.0, 0.0),
            Moments::new(),
            0,
        )
    }

    /// Resume a run from a checkpoint archive written by `save_checkpoint`.
    pub fn resume(
        cfg: &RunConfig,
        samples: &[LabeledSample],
        base_dir: Option<&Path>,
        checkpoint: &TensorArchive,
    ) -> Result<Trainer> {
        let params = HeadParams::from_archive(&cfg.head, checkpoint)?;
        let theta = read_scalar(checkpoint, THETA_KEY)?;
        let theta_m = read_scalar(checkpoint, &format!("opt.m.{THETA_KEY}"))?;
        let theta_v = read_scalar(checkpoint, &format!("opt.v.{THETA_KEY}"))?;
        let step = read_scalar(checkpoint, STEP_KEY)? as usize;
        let mut moments = Moments::new();
        for name in params.values.keys() {
            let m = read_tensor(checkpoint, &format!("opt.m.{name}"))?;
            let v = read_tensor(checkpoint, &format!("opt.v.{name}"))?;
            moments.insert(name.clone(), (m, v));
        }
        Trainer::assemble(
            cfg,
            samples,
            base_dir,
            params,
            (theta, theta_m, theta_v),
            moments,
            step,
        )
    }

    fn assemble(
        cfg: &RunConfig,
        samples: &[LabeledSample],
        base_dir: Option<&Path>,
        params: HeadParams,
        theta: (f64, f64, f64),
        mut moments: Moments,
        step: usize,
    ) -> Result<Trainer> {
        cfg.validate()?;
        if samples.is_empty() {
            return Err(Error::data("training needs at least one sample"));
        }
        if cfg.data.resize % 8 != 0 {
            return Err(Error::config(format!(
                "training resize ({}) must be a multiple of 8 so the mask grid \
                 matches the image resolution",
                cfg.data.resize
            )));
        }
        let backbone = Backbone::from_provider(cfg.backbone.clone(), base_dir)?;
        let schedule = cfg.backbone.build_schedule()?;
        let embedder = TextEmbedder::from_provider(
            &cfg.text.provider,
            cfg.text.d_txt,
            base_dir.unwrap_or_else(|| Path::new(".")),
        )?;
        let lexicon = Lexicon::builtin();

        let mut prepared = Vec::with_capacity(samples.len());
        let mut texts = Vec::with_capacity(samples.len());
        for (i, sample) in samples.iter().enumerate() {
            sample.validate()?;
            let resized = resize_square(sample, cfg.data.resize);
            if resized.instances.is_empty() {
                return Err(Error::data(format!(
                    "sample {i} has no instances left at {}px",
                    cfg.data.resize
                )));
            }
            if resized.instances.len() > cfg.head.n_queries {
                return Err(Error::data(format!(
                    "sample {i} has {} instances but the head only has {} queries",
                    resized.instances.len(),
                    cfg.head.n_queries
                )));
            }
            let mut phrases =
                extract_phrases(&resized.caption, cfg.text.k_phrases, &lexicon);
            if phrases.is_empty() {
                // Grounding needs at least one phrase per image; an empty or
                // unparseable caption grounds against the generic subject.
                phrases.push("person".to_string());
            }
            let set = embed_prompts(&phrases, &embedder, &cfg.text.template, &resized.caption)?;
            texts.push(set.embeddings);
            prepared.push(resized);
        }

        // Zeroed moments for anything the checkpoint did not carry.
        for name in params.values.keys() {
            moments.entry(name.clone()).or_insert_with(|| {
                (
                    zeros_like(&params.values[name]),
                    zeros_like(&params.values[name]),
                )
            });
        }

        Ok(Trainer {
            cfg: cfg.clone(),
            backbone,
            schedule,
            samples: prepared,
            texts,
            params,
            theta: theta.0,
            theta_m: theta.1,
            theta_v: theta.2,
            moments,
            step,
            feature_cache: BTreeMap::new(),
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Grounding temperature `τ = exp(θ)`.
    pub fn tau(&self) -> f64 {
        self.theta.exp()
    }

    pub fn params(&self) -> &HeadParams {
        &self.params
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    /// The training view of the data (resized, possibly with vanished
    /// instances dropped).
    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    /// Frozen feature map for sample `i` under the given flips, computed on
    /// first use and cached. The noise draw is keyed by sample and flips so
    /// revisiting an image reuses the same noisy latent.
    fn features(&mut self, i: usize, h: bool, v: bool) -> Result<&Array3<f64>> {
        if !self.feature_cache.contains_key(&(i, h, v)) {
            let image = flip_image(&self.samples[i].image, h, v);
            let noise_seed = derive_seed(
                self.cfg.seed,
                &format!("noise/{i}/{}{}", h as u8, v as u8),
            );
            let bundle = self.backbone.extract_features(
                &image,
                &self.schedule,
                self.cfg.infer.timestep,
                noise_seed,
            )?;
            self.feature_cache.insert((i, h, v), bundle.f);
        }
        Ok(&self.feature_cache[&(i, h, v)])
    }

    /// One optimizer step on a seeded batch. Returns the scalar loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let n = self.samples.len();
        let batch = self.cfg.optimizer.batch_size.min(n);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.cfg.seed,
            &format!("batch/{}", self.step),
        ));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order.truncate(batch);
        let flips: Vec<(bool, bool)> = order
            .iter()
            .map(|_| {
                let h = self.cfg.data.hflip && rng.gen_bool(0.5);
                let v = self.cfg.data.vflip && rng.gen_bool(0.5);
                (h, v)
            })
            .collect();
        let points = sample_points(
            self.cfg.loss.points,
            derive_seed(self.cfg.seed, &format!("points/{}", self.step)),
        );
        self.step_on(&order, &flips, &points)
    }

    /// Run `steps` consecutive steps, returning each step's loss.
    pub fn run(&mut self, steps: usize) -> Result<Vec<f64>> {
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            losses.push(self.train_step()?);
        }
        Ok(losses)
    }

    fn step_on(
        &mut self,
        batch: &[usize],
        flips: &[(bool, bool)],
        points: &[(f64, f64)],
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::data("training step needs a non-empty batch"));
        }
        // Fill the feature cache first; the tape section below only borrows.
        for (&i, &(h, v)) in batch.iter().zip(flips) {
            self.features(i, h, v)?;
        }

        let weights = LossWeights {
            bce: self.cfg.loss.bce,
            dice: self.cfg.loss.dice,
            grounding: self.cfg.loss.grounding,
        };
        let t = Tape::new();
        let vars = self.params.tape_vars(&t);
        let theta = t.scalar(self.theta);
        let tau = t.exp(theta);

        let n_layers = if self.cfg.loss.aux {
            self.cfg.head.n_layers
        } else {
            1
        };
        let mut bce = vec![Vec::new(); n_layers];
        let mut dice = vec![Vec::new(); n_layers];
        let mut embeds = vec![Vec::new(); n_layers];
        let mut texts = Vec::with_capacity(batch.len());

        for (&i, &(h, v)) in batch.iter().zip(flips) {
            let f = &self.feature_cache[&(i, h, v)];
            let out = head::forward(&t, &self.cfg.head, &vars, f)?;
            let sample = &self.samples[i];
            let logits_shape = t.shape(out.final_set().logits);
            let (gh, gw) = (logits_shape[1], logits_shape[2]);
            let gt = ground_truth_stack(sample, h, v, gh, gw);

            let sets: Vec<&head::MaskSet> = if self.cfg.loss.aux {
                out.layers.iter().collect()
            } else {
                vec![out.final_set()]
            };
            for (l, set) in sets.into_iter().enumerate() {
                let ml = matched_mask_loss(&t, set.logits, &gt, points, &weights)?;
                bce[l].push(ml.bce);
                dice[l].push(ml.dice);
                embeds[l].push(set.embeds);
            }
            texts.push(self.texts[i].clone());
        }

        let mut layer_losses = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let bce_l = t.mean(t.stack_scalars(&bce[l]));
            let dice_l = t.mean(t.stack_scalars(&dice[l]));
            let ground_l = grounding_loss(&t, &embeds[l], &texts, tau)?;
            layer_losses.push(weighted_total(&t, bce_l, dice_l, ground_l, &weights));
        }
        let total = t.mean(t.stack_scalars(&layer_losses));
        let loss = t.scalar_value(total);
        let grads = t.backward(total);

        // AdamW over head parameters plus θ.
        self.step += 1;
        let opt = &self.cfg.optimizer;
        let bias1 = 1.0 - opt.beta1.powi(self.step as i32);
        let bias2 = 1.0 - opt.beta2.powi(self.step as i32);
        for (name, var) in &vars {
            let g = grads
                .get(*var)
                .cloned()
                .unwrap_or_else(|| zeros_like(&self.params.values[name]));
            let (m, v) = self.moments.get_mut(name).expect("moments initialized");
            *m = &*m * opt.beta1 + &g * (1.0 - opt.beta1);
            *v = &*v * opt.beta2 + &g.mapv(|x| x * x) * (1.0 - opt.beta2);
            let p = self.params.values.get_mut(name).expect("known parameter");
            let decay = if name.ends_with(".w") { opt.weight_decay } else { 0.0 };
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let update = (m / bias1) / ((v / bias2).sqrt() + opt.eps);
                    *p -= opt.learning_rate * (update + decay * *p);
                });
        }
        let g_theta = grads.get(theta).map(|g| g.sum()).unwrap_or(0.0);
        self.theta_m = opt.beta1 * self.theta_m + (1.0 - opt.beta1) * g_theta;
        self.theta_v = opt.beta2 * self.theta_v + (1.0 - opt.beta2) * g_theta * g_theta;
        self.theta -= opt.learning_rate * (self.theta_m / bias1)
            / ((self.theta_v / bias2).sqrt() + opt.eps);
        Ok(loss)
    }

    /// Serialize parameters, temperature, and optimizer state into one
    /// archive. Loading it back with `resume` replays the exact run.
    pub fn checkpoint(&self) -> TensorArchive {
        let scalar = |v: f64| ndarray::arr1(&[v]).into_dyn();
        let mut archive = TensorArchive::new();
        self.params.write_to(&mut archive);
        archive.insert(THETA_KEY, scalar(self.theta), Dtype::F64);
        archive.insert(STEP_KEY, scalar(self.step as f64), Dtype::F64);
        archive.insert(format!("opt.m.{THETA_KEY}"), scalar(self.theta_m), Dtype::F64);
        archive.insert(format!("opt.v.{THETA_KEY}"), scalar(self.theta_v), Dtype::F64);
        for (name, (m, v)) in &self.moments {
            archive.insert(format!("opt.m.{name}"), m.clone(), Dtype::F64);
            archive.insert(format!("opt.v.{name}"), v.clone(), Dtype::F64);
        }
        archive
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        self.checkpoint().save(path)
    }
}

/// Stack a sample's masks (flipped to match the image) into `[M, gh, gw]`,
/// resizing if the prediction grid differs from the stored resolution.
fn ground_truth_stack(
    sample: &LabeledSample,
    h: bool,
    v: bool,
    gh: usize,
    gw: usize,
) -> Array3<f64> {
    let m = sample.instances.len();
    let mut gt = Array3::<f64>::zeros((m, gh, gw));
    for (k, inst) in sample.instances.iter().enumerate() {
        let flipped = flip_mask(&inst.mask, h, v);
        let plane = if flipped.dim() == (gh, gw) {
            flipped
        } else {
            let stacked = flipped.insert_axis(ndarray::Axis(0));
            bilinear_resize(&stacked, gh, gw)
                .index_axis(ndarray::Axis(0), 0)
                .mapv(|x| if x >= 0.5 { 1.0 } else { 0.0 })
        };
        gt.slice_mut(s![k, .., ..]).assign(&plane);
    }
    gt
}

fn zeros_like(x: &ArrayD<f64>) -> ArrayD<f64> {
    ArrayD::zeros(x.raw_dim())
}

fn read_tensor(archive: &TensorArchive, name: &str) -> Result<ArrayD<f64>> {
    archive
        .get(name)
        .map(|e| e.data.clone())
        .ok_or_else(|| Error::data(format!("checkpoint is missing tensor {name}")))
}

fn read_scalar(archive: &TensorArchive, name: &str) -> Result<f64> {
    let data = read_tensor(archive, name)?;
    data.iter()
        .next()
        .copied()
        .ok_or_else(|| Error::data(format!("checkpoint tensor {name} is empty")))
}
