//! Inference: run the trained head over frozen features, score mask
//! embeddings against a prompt universe, and reduce the query set to
//! per-image predictions.
//!
//! Label assignment is open-vocabulary: each prompt label expands through
//! the ensemble table, the score of a label is the maximum cosine
//! similarity over its expansion, and a mask takes the argmax label only if
//! that score clears the threshold. Unlabeled masks are dropped, mirroring
//! pipelines that ignore standalone garments and irrelevant objects.

use std::path::Path;

use ndarray::{Array2, Array3, Axis};

use crate::archive::TensorArchive;
use crate::backbone::Backbone;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{connected_components, ImagePrediction, PredInstance};
use crate::head::{self, HeadParams};
use crate::nn::bilinear_resize;
use crate::prompts::{ebp_labels, EnsembleTable, TextEmbedder};
use crate::sample::LabeledSample;
use crate::schedule::NoiseSchedule;
use crate::tape::Tape;
use crate::util::derive_seed;

/// Embedded prompt labels with their ensemble expansions, in a stable index
/// order that doubles as the tie-breaking order.
pub struct PromptUniverse {
    labels: Vec<String>,
    /// One row per expansion term, unit-norm.
    expansions: Vec<Array2<f64>>,
}

impl PromptUniverse {
    /// Embed `labels` plus the extended body-part list, expanding each label
    /// through `ensembles`. Duplicates keep their first (lowest) position.
    pub fn build(
        labels: &[String],
        ensembles: &EnsembleTable,
        embedder: &TextEmbedder,
        template: &str,
    ) -> Result<PromptUniverse> {
        let mut ordered: Vec<String> = Vec::new();
        for label in labels
            .iter()
            .map(String::as_str)
            .chain(ebp_labels().iter().copied())
        {
            let lower = label.to_lowercase();
            if !ordered.contains(&lower) {
                ordered.push(lower);
            }
        }
        if ordered.is_empty() {
            return Err(Error::data("label assignment needs a non-empty prompt set"));
        }
        let mut expansions = Vec::with_capacity(ordered.len());
        for label in &ordered {
            let terms = ensembles.expand(label);
            let mut rows = Array2::<f64>::zeros((terms.len(), embedder.d_txt()));
            for (i, term) in terms.iter().enumerate() {
                let prompt = template.replace("{}", term);
                rows.row_mut(i).assign(&embedder.embed(&prompt)?);
            }
            expansions.push(rows);
        }
        Ok(PromptUniverse {
            labels: ordered,
            expansions,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Cosine score of every (mask, label) pair: rows of `z` are normalized
/// once, and a label scores the maximum similarity over its ensemble
/// expansion. Output is `[n_masks, n_labels]`.
pub fn label_scores(z: &Array2<f64>, universe: &PromptUniverse) -> Result<Array2<f64>> {
    if universe.is_empty() {
        return Err(Error::data("label assignment needs a non-empty prompt set"));
    }
    let n = z.nrows();
    let mut scores = Array2::<f64>::zeros((n, universe.len()));
    for (i, row) in z.axis_iter(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt().max(1e-12);
        for (j, exp) in universe.expansions.iter().enumerate() {
            let mut best = f64::NEG_INFINITY;
            for term in exp.axis_iter(Axis(0)) {
                best = best.max(row.dot(&term) / norm);
            }
            scores[[i, j]] = best;
        }
    }
    Ok(scores)
}

/// Threshold + argmax over a score matrix. Ties pick the lowest label
/// index; masks whose best score is below `threshold` stay unlabeled.
pub fn assign_from_scores(scores: &Array2<f64>, threshold: f64) -> Vec<Option<usize>> {
    scores
        .axis_iter(Axis(0))
        .map(|row| {
            if row.is_empty() {
                return None;
            }
            let mut best = 0usize;
            for (j, &s) in row.iter().enumerate() {
                if s > row[best] {
                    best = j;
                }
            }
            (row[best] >= threshold).then_some(best)
        })
        .collect()
}

/// Assign a prompt label (or none) to every row of `z`.
pub fn assign_labels(
    z: &Array2<f64>,
    universe: &PromptUniverse,
    threshold: f64,
) -> Result<Vec<Option<usize>>> {
    Ok(assign_from_scores(&label_scores(z, universe)?, threshold))
}

/// Union the given masks and split the union into 4-connected person
/// components. No masks produce no persons; overlap is counted once.
pub fn merge_fpp(masks: &[Array2<bool>]) -> Vec<Array2<bool>> {
    let Some(first) = masks.first() else {
        return Vec::new();
    };
    let mut union = Array2::<bool>::from_elem(first.dim(), false);
    for mask in masks {
        ndarray::Zip::from(&mut union).and(mask).for_each(|u, &m| *u |= m);
    }
    connected_components(&union)
}

/// Evaluation-time resize: aspect ratio preserved, shorter edge at
/// `target`, both edges rounded to the nearest multiple of 8 (minimum 16)
/// so the feature grid stays decodable.
pub fn eval_dims(h: usize, w: usize, target: usize) -> (usize, usize) {
    let round8 = |v: f64| -> usize { (((v / 8.0).round() as usize) * 8).max(16) };
    let scale = target as f64 / h.min(w) as f64;
    (round8(h as f64 * scale), round8(w as f64 * scale))
}

/// A frozen backbone plus trained head parameters bound to a prompt
/// universe: everything needed to turn an image into an `ImagePrediction`.
pub struct InferenceEngine {
    cfg: RunConfig,
    backbone: Backbone,
    schedule: NoiseSchedule,
    params: HeadParams,
    universe: PromptUniverse,
}

impl InferenceEngine {
    pub fn new(
        cfg: &RunConfig,
        params: HeadParams,
        prompt_labels: &[String],
        base_dir: Option<&Path>,
    ) -> Result<InferenceEngine> {
        cfg.validate()?;
        let backbone = Backbone::from_provider(cfg.backbone.clone(), base_dir)?;
        let schedule = cfg.backbone.build_schedule()?;
        let embedder = TextEmbedder::from_provider(
            &cfg.text.provider,
            cfg.text.d_txt,
            base_dir.unwrap_or_else(|| Path::new(".")),
        )?;
        let universe = PromptUniverse::build(
            prompt_labels,
            &EnsembleTable::builtin(),
            &embedder,
            &cfg.text.template,
        )?;
        Ok(InferenceEngine {
            cfg: cfg.clone(),
            backbone,
            schedule,
            params,
            universe,
        })
    }

    /// Load head parameters from a checkpoint archive (optimizer state in
    /// the archive is ignored).
    pub fn from_checkpoint(
        cfg: &RunConfig,
        checkpoint: &TensorArchive,
        prompt_labels: &[String],
        base_dir: Option<&Path>,
    ) -> Result<InferenceEngine> {
        let params = HeadParams::from_archive(&cfg.head, checkpoint)?;
        InferenceEngine::new(cfg, params, prompt_labels, base_dir)
    }

    pub fn universe(&self) -> &PromptUniverse {
        &self.universe
    }

    /// Predict at a specific diffusion timestep (ablation hook); the
    /// regular path uses `cfg.infer.timestep`.
    pub fn predict_at(&self, image: &Array3<f64>, timestep: usize) -> Result<ImagePrediction> {
        let (_, h, w) = image.dim();
        let (rh, rw) = eval_dims(h, w, self.cfg.data.resize);
        let resized = if (rh, rw) == (h, w) {
            image.clone()
        } else {
            bilinear_resize(image, rh, rw)
        };
        let noise_seed = derive_seed(self.cfg.seed, "infer/noise");
        let bundle =
            self.backbone
                .extract_features(&resized, &self.schedule, timestep, noise_seed)?;

        let t = Tape::new();
        let vars = self.params.tape_vars(&t);
        let out = head::forward(&t, &self.cfg.head, &vars, &bundle.f)?;
        let set = out.final_set();
        let logits = t.value(set.logits);
        let logits = logits
            .into_dimensionality::<ndarray::Ix3>()
            .expect("mask logits are [N, H, W]");
        let embeds = t.value(set.embeds);
        let embeds = embeds
            .into_dimensionality::<ndarray::Ix2>()
            .expect("mask embeddings are [N, D]");

        let scores = label_scores(&embeds, &self.universe)?;
        let assigned = assign_from_scores(&scores, self.cfg.infer.threshold);

        // Probabilities at the original resolution.
        let probs = logits.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let probs = if probs.dim().1 == h && probs.dim().2 == w {
            probs
        } else {
            bilinear_resize(&probs, h, w)
        };

        let mut kept: Vec<(usize, String, f64)> = Vec::new(); // (query, label, score)
        for (q, label) in assigned.iter().enumerate() {
            if let Some(j) = label {
                kept.push((q, self.universe.labels[*j].clone(), scores[[q, *j]]));
            }
        }

        let mut instances = Vec::new();
        let mut semantic: std::collections::BTreeMap<String, Array2<bool>> =
            std::collections::BTreeMap::new();
        for &(q, ref label, score) in &kept {
            let mask = probs.index_axis(Axis(0), q).mapv(|p| p >= 0.5);
            if mask.iter().any(|&b| b) {
                instances.push(PredInstance {
                    mask,
                    label: label.clone(),
                    score,
                });
            }
        }
        // Semantic map: per-pixel argmax over the surviving masks, floored
        // at probability 0.5, so planes never overlap.
        for y in 0..h {
            for x in 0..w {
                let mut best: Option<(usize, f64)> = None;
                for &(q, _, _) in &kept {
                    let p = probs[[q, y, x]];
                    if p >= 0.5 && best.map_or(true, |(_, bp)| p > bp) {
                        best = Some((q, p));
                    }
                }
                if let Some((q, _)) = best {
                    let label = kept.iter().find(|(kq, _, _)| *kq == q).unwrap().1.clone();
                    semantic
                        .entry(label)
                        .or_insert_with(|| Array2::from_elem((h, w), false))[[y, x]] = true;
                }
            }
        }
        Ok(ImagePrediction {
            semantic,
            instances,
        })
    }

    pub fn predict(&self, image: &Array3<f64>) -> Result<ImagePrediction> {
        self.predict_at(image, self.cfg.infer.timestep)
    }

    /// Predict every sample, in order.
    pub fn predict_all(&self, samples: &[LabeledSample]) -> Result<Vec<ImagePrediction>> {
        samples.iter().map(|s| self.predict(&s.image)).collect()
    }
}
