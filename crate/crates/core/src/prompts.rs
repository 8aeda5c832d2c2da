//! Caption phrase extraction, prompt embedding, and label ensembles.
//!
//! Captions are mined for key phrases with a bundled lexicon tagger: tokens
//! are lowercased, stopwords are dropped, adjacent adjective runs fuse with
//! the following noun ("tan purse", "light blue jacket"), and anything
//! unknown that survives the stopword filter counts as a noun. Phrases keep
//! their order of first appearance, are deduplicated, and are truncated to
//! `K_phrase` (default 9) — a short caption simply yields fewer phrases.
//!
//! Each phrase is formatted into a template ("a photo of a {}") and embedded
//! to a unit-norm vector, either by a seeded hashed bag-of-words stand-in or
//! by lookup in a user-supplied embedding archive.
//!
//! Labels also carry ensembles: per-category lists of sub-categories,
//! synonyms, and plurals. Scoring a prediction against a label takes the
//! maximum similarity over the label's expansion, which is how novel terms
//! like "jumpsuit" land under "one-piece outfit".

use crate::error::{Error, Result};
use crate::util::derive_seed;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// Default maximum number of phrases mined from one caption.
pub const K_PHRASE: usize = 9;

/// Default prompt template.
pub const DEFAULT_TEMPLATE: &str = "a photo of a {}";

/// The canonical training label set (17 base categories).
pub const BASE_CATEGORIES: [&str; 17] = [
    "Face",
    "Hand_L",
    "Hand_R",
    "Hair",
    "Bags",
    "Special Clothings",
    "Tops",
    "Eyewear",
    "Leg_L",
    "Leg_R",
    "Hats",
    "Belts",
    "Shoe_L",
    "Shoe_R",
    "One-piece Outfits",
    "Scarf",
    "Bottoms",
];

/// The fixed extended body-part (EBP) prompt list, in stable order.
pub fn ebp_labels() -> &'static [&'static str] {
    &[
        "face",
        "faces",
        "hand",
        "hands",
        "hair",
        "hairs",
        "wavy",
        "ponytail",
        "bob",
        "bald",
        "curly",
        "afro-hair",
        "leg",
        "legs",
        "back",
        "chest",
        "belly",
        "stomach",
        "feet",
    ]
}

// ---------------------------------------------------------------------------
// lexicon + phrase extraction
// ---------------------------------------------------------------------------

/// Word lists for the tagger.
#[derive(Debug, Clone, Deserialize)]
pub struct Lexicon {
    stopwords: BTreeSet<String>,
    adjectives: BTreeSet<String>,
    nouns: BTreeSet<String>,
}

impl Lexicon {
    /// The bundled clothing/body-domain lexicon.
    pub fn builtin() -> Lexicon {
        serde_json::from_str(include_str!("../assets/lexicon.json"))
            .expect("bundled lexicon.json is well-formed")
    }

    pub fn from_file(path: &Path) -> Result<Lexicon> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("bad lexicon {}: {e}", path.display())))
    }

    fn is_stopword(&self, token: &str) -> bool {
        self.stopwords.contains(token)
    }

    fn is_adjective(&self, token: &str) -> bool {
        self.adjectives.contains(token)
    }

    fn is_noun(&self, token: &str) -> bool {
        // unknown non-stopword tokens fall back to nouns
        self.nouns.contains(token) || !self.is_adjective(token)
    }
}

/// Lowercase tokens, splitting on anything that is not alphanumeric or an
/// in-word hyphen.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for ch in lower.chars() {
        if ch.is_alphanumeric() || ch == '-' {
            cur.push(ch);
        } else if !cur.is_empty() {
            tokens.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    // strip hyphens that aren't joining two word parts
    tokens
        .into_iter()
        .map(|t| t.trim_matches('-').to_string())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Mine up to `k` key phrases from a caption.
///
/// Adjective runs attach to the next noun when nothing interrupts them; a
/// run cut off by a stopword or the caption end keeps each adjective as its
/// own phrase. Output is lowercased, deduplicated, in order of first
/// appearance.
pub fn extract_phrases(caption: &str, k: usize, lexicon: &Lexicon) -> Vec<String> {
    let tokens = tokenize(caption);
    let mut phrases: Vec<String> = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut adj_run: Vec<String> = Vec::new();

    let push = |phrase: String, phrases: &mut Vec<String>, seen: &mut BTreeSet<String>| {
        if seen.insert(phrase.clone()) {
            phrases.push(phrase);
        }
    };

    for token in tokens {
        if lexicon.is_stopword(&token) {
            // a stopword severs the run; pending adjectives stand alone
            for adj in adj_run.drain(..) {
                push(adj, &mut phrases, &mut seen);
            }
            continue;
        }
        if lexicon.is_adjective(&token) {
            adj_run.push(token);
        } else if lexicon.is_noun(&token) {
            let phrase = if adj_run.is_empty() {
                token
            } else {
                let mut parts = std::mem::take(&mut adj_run);
                parts.push(token);
                parts.join(" ")
            };
            push(phrase, &mut phrases, &mut seen);
        }
    }
    for adj in adj_run {
        push(adj, &mut phrases, &mut seen);
    }
    phrases.truncate(k);
    phrases
}

// ---------------------------------------------------------------------------
// text embedding
// ---------------------------------------------------------------------------

/// Deterministic prompt embedder.
#[derive(Debug, Clone)]
pub enum TextEmbedder {
    /// Hashed bag-of-words: every token maps to a fixed Gaussian vector
    /// drawn from a stream keyed by `(seed, token)`; token vectors are
    /// summed and the result L2-normalized.
    Toy { seed: u64, d_txt: usize },
    /// Lookup table of precomputed embeddings keyed by the full prompt.
    Archive {
        table: BTreeMap<String, Vec<f64>>,
        d_txt: usize,
    },
}

impl TextEmbedder {
    /// Parse a provider string: `toy:<seed>` or `archive:<path.json>`
    /// (relative paths resolve against `base_dir`).
    pub fn from_provider(provider: &str, d_txt: usize, base_dir: &Path) -> Result<TextEmbedder> {
        if d_txt == 0 {
            return Err(Error::config("text embedding width must be positive"));
        }
        if let Some(seed) = provider.strip_prefix("toy:") {
            let seed: u64 = seed
                .parse()
                .map_err(|_| Error::config(format!("bad toy text seed in {provider:?}")))?;
            return Ok(TextEmbedder::Toy { seed, d_txt });
        }
        if let Some(path) = provider.strip_prefix("archive:") {
            let path = base_dir.join(path);
            let text = std::fs::read_to_string(&path)?;
            let table: BTreeMap<String, Vec<f64>> = serde_json::from_str(&text)
                .map_err(|e| Error::data(format!("bad embedding table {}: {e}", path.display())))?;
            for (prompt, vec) in &table {
                if vec.len() != d_txt {
                    return Err(Error::data(format!(
                        "embedding for {prompt:?} has {} dims, expected {d_txt}",
                        vec.len()
                    )));
                }
            }
            return Ok(TextEmbedder::Archive { table, d_txt });
        }
        Err(Error::config(format!(
            "unknown text provider {provider:?} (expected toy:<seed> or archive:<path>)"
        )))
    }

    pub fn d_txt(&self) -> usize {
        match self {
            TextEmbedder::Toy { d_txt, .. } | TextEmbedder::Archive { d_txt, .. } => *d_txt,
        }
    }

    /// Embed one full prompt string to a unit-norm vector.
    pub fn embed(&self, prompt: &str) -> Result<Array1<f64>> {
        match self {
            TextEmbedder::Toy { seed, d_txt } => {
                let tokens = tokenize(prompt);
                if tokens.is_empty() {
                    return Err(Error::data(format!("cannot embed empty prompt {prompt:?}")));
                }
                let mut acc = Array1::<f64>::zeros(*d_txt);
                for token in &tokens {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(*seed, token));
                    for a in acc.iter_mut() {
                        let draw: f64 = StandardNormal.sample(&mut rng);
                        *a += draw;
                    }
                }
                normalize(acc, prompt)
            }
            TextEmbedder::Archive { table, d_txt } => {
                let vec = table.get(prompt).ok_or_else(|| {
                    Error::data(format!("no embedding for prompt {prompt:?} in archive"))
                })?;
                debug_assert_eq!(vec.len(), *d_txt);
                normalize(Array1::from_vec(vec.clone()), prompt)
            }
        }
    }
}

fn normalize(v: Array1<f64>, prompt: &str) -> Result<Array1<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::data(format!(
            "embedding for prompt {prompt:?} has zero norm"
        )));
    }
    Ok(v / norm)
}

/// A caption's phrases with their prompt embeddings (`[K, d_txt]`, rows
/// unit-norm).
#[derive(Debug, Clone)]
pub struct PromptSet {
    pub phrases: Vec<String>,
    pub embeddings: Array2<f64>,
    pub source: String,
}

/// Format each phrase into `template` and embed it.
///
/// The template must contain the placeholder `{}` exactly once; an empty
/// phrase list is an error (grounding needs at least one phrase).
pub fn embed_prompts(
    phrases: &[String],
    embedder: &TextEmbedder,
    template: &str,
    source: &str,
) -> Result<PromptSet> {
    if template.matches("{}").count() != 1 {
        return Err(Error::config(format!(
            "prompt template {template:?} must contain exactly one {{}} placeholder"
        )));
    }
    if phrases.is_empty() {
        return Err(Error::data(format!(
            "caption {source:?} produced no phrases to embed"
        )));
    }
    let d = embedder.d_txt();
    let mut embeddings = Array2::<f64>::zeros((phrases.len(), d));
    for (i, phrase) in phrases.iter().enumerate() {
        let prompt = template.replace("{}", phrase);
        let vec = embedder.embed(&prompt)?;
        embeddings.row_mut(i).assign(&vec);
    }
    Ok(PromptSet {
        phrases: phrases.to_vec(),
        embeddings,
        source: source.to_string(),
    })
}

// ---------------------------------------------------------------------------
// ensembles
// ---------------------------------------------------------------------------

/// Per-label lists of sub-categories, synonyms, and plurals.
#[derive(Debug, Clone)]
pub struct EnsembleTable {
    map: BTreeMap<String, Vec<String>>,
}

impl EnsembleTable {
    /// The bundled table (bottom / one-piece outfit / hat / special
    /// clothing); all other labels expand to themselves.
    pub fn builtin() -> EnsembleTable {
        Self::from_json_str(include_str!("../assets/ensembles.json"))
            .expect("bundled ensembles.json is well-formed")
    }

    pub fn from_json_str(text: &str) -> Result<EnsembleTable> {
        let raw: BTreeMap<String, Vec<String>> = serde_json::from_str(text)
            .map_err(|e| Error::data(format!("bad ensemble table: {e}")))?;
        let mut map = BTreeMap::new();
        for (label, mut list) in raw {
            let label = label.to_lowercase();
            for item in list.iter_mut() {
                *item = item.to_lowercase();
            }
            // every expansion carries its own base label
            if !list.contains(&label) {
                list.insert(0, label.clone());
            }
            map.insert(label, list);
        }
        Ok(EnsembleTable { map })
    }

    pub fn from_file(path: &Path) -> Result<EnsembleTable> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    /// The labels with explicit entries.
    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    /// Expansion of `label`: its table entry if present (tried verbatim,
    /// lowercased, and with a trailing plural-`s` stripped), otherwise just
    /// the label itself. The queried label is always element 0.
    pub fn expand(&self, label: &str) -> Vec<String> {
        let lower = label.to_lowercase();
        let keys = [lower.clone(), lower.trim_end_matches('s').to_string()];
        for key in &keys {
            if let Some(list) = self.map.get(key) {
                let mut out = vec![lower.clone()];
                out.extend(list.iter().filter(|s| **s != lower).cloned());
                return out;
            }
        }
        vec![lower]
    }
}
