//! Class descriptions: LLM prompt templates, raw description retrieval,
//! similarity-based filtering and semantic reference embeddings.

mod client;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::FrozenEncoder;
use crate::error::{Error, Result};
use crate::numeric::{self, Mat};
use crate::parallel;

pub use client::{
    cassette_to_records, read_cassette, CassetteEntry, CassetteKey, FixtureClient, HttpChatClient,
    LiveConfig, ReplayClient, ENV_API_KEY, ENV_MODEL, ENV_URL,
};

/// The five question templates sent to the LLM for every class.
pub const TEMPLATES: [&str; 5] = [
    "What does [CLASS] look like among all [CATEGORY]?",
    "What visual cue is unique to [CLASS] among all [CATEGORY]?",
    "What are the distinct features of [CLASS] for recognition among all [CATEGORY]?",
    "How can you identify [CLASS] in appearance among all [CATEGORY]?",
    "What are the differences between [CLASS] and other [CATEGORY] in appearance?",
];

pub const SYSTEM_PROMPT: &str = "You are an expert in visual feature analysis. \
Answer with one sentence of at most 20 words describing the visual features \
that distinguish the requested class.";

pub const MAX_WORDS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionRequest {
    pub class_name: String,
    pub category: String,
    pub templates: Vec<String>,
    pub max_words: usize,
    pub samples_per_template: usize,
}

impl DescriptionRequest {
    pub fn new(class_name: &str, category: &str, samples_per_template: usize) -> Self {
        Self {
            class_name: class_name.to_string(),
            category: category.to_string(),
            templates: TEMPLATES.iter().map(|t| t.to_string()).collect(),
            max_words: MAX_WORDS,
            samples_per_template,
        }
    }
}

/// Substitutes `[CLASS]` and `[CATEGORY]` into each template, in order.
pub fn instantiate_templates(req: &DescriptionRequest) -> Result<Vec<String>> {
    req.templates
        .iter()
        .map(|t| {
            for placeholder in ["[CLASS]", "[CATEGORY]"] {
                let count = t.matches(placeholder).count();
                if count != 1 {
                    return Err(Error::Template(format!(
                        "template {t:?} contains {placeholder} {count} times, expected once"
                    )));
                }
            }
            Ok(t.replace("[CLASS]", &req.class_name)
                .replace("[CATEGORY]", &req.category))
        })
        .collect()
}

/// Keeps the first `max_words` whitespace-separated words.
pub fn truncate_words(text: &str, max_words: usize) -> String {
    text.split_whitespace()
        .take(max_words)
        .collect::<Vec<_>>()
        .join(" ")
}

/// One LLM call: which class, which template, which repeat.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptionCall {
    pub class_name: String,
    pub category: String,
    pub template_index: usize,
    pub sample_index: usize,
    pub system: String,
    pub prompt: String,
}

/// Anything that can answer a [`DescriptionCall`]: a live endpoint, a
/// fixture file or a recorded cassette.
pub trait DescriptionClient: Sync {
    fn complete(&self, call: &DescriptionCall) -> Result<String>;
}

/// Returns `K = templates × samples_per_template` descriptions, template-major,
/// each cut to `max_words`.
pub fn fetch_descriptions(req: &DescriptionRequest, client: &dyn DescriptionClient) -> Result<Vec<String>> {
    let prompts = instantiate_templates(req)?;
    let mut out = Vec::with_capacity(prompts.len() * req.samples_per_template);
    for (template_index, prompt) in prompts.into_iter().enumerate() {
        for sample_index in 0..req.samples_per_template {
            let call = DescriptionCall {
                class_name: req.class_name.clone(),
                category: req.category.clone(),
                template_index,
                sample_index,
                system: SYSTEM_PROMPT.to_string(),
                prompt: prompt.clone(),
            };
            let text = truncate_words(client.complete(&call)?.trim(), req.max_words);
            if text.is_empty() {
                return Err(Error::EmptyResponse {
                    class: req.class_name.clone(),
                });
            }
            out.push(text);
        }
    }
    Ok(out)
}

/// Fetches several classes with at most `max_in_flight` concurrent workers.
pub fn fetch_all(
    reqs: &[DescriptionRequest],
    client: &dyn DescriptionClient,
    max_in_flight: usize,
) -> Result<Vec<Vec<String>>> {
    parallel::map_ordered(reqs, max_in_flight, |r| fetch_descriptions(r, client))
        .into_iter()
        .collect()
}

/// Result of similarity filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Indices into the raw list, best first.
    pub indices: Vec<usize>,
    /// Mean similarity of each raw description to the others.
    pub mean_sims: Vec<f64>,
}

/// Scores each item by its mean similarity to all others
/// (`s̄_i = Σ_{j≠i} s_ij / (K−1)`) and keeps the `min(k, K)` best, lower
/// index first on ties. With `K = 1` the single item is kept with score 0.
pub fn select_by_mean_similarity(sims: &Mat, k: usize) -> Selection {
    let n = sims.rows();
    let mean_sims: Vec<f64> = if n == 1 {
        vec![0.0]
    } else {
        (0..n)
            .map(|i| {
                let row = sims.row(i);
                let total: f64 = (0..n).filter(|&j| j != i).map(|j| row[j]).sum();
                total / (n - 1) as f64
            })
            .collect()
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| mean_sims[b].total_cmp(&mean_sims[a]));
    order.truncate(k.min(n));
    Selection {
        indices: order,
        mean_sims,
    }
}

/// Pairwise cosine similarity matrix of the given vectors.
pub fn similarity_matrix(embeddings: &[Vec<f64>]) -> Result<Mat> {
    let n = embeddings.len();
    let mut sims = Mat::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let s = numeric::cosine_sim(&embeddings[i], &embeddings[j])?;
            sims.as_mut_slice()[i * n + j] = s;
            sims.as_mut_slice()[j * n + i] = s;
        }
    }
    Ok(sims)
}

/// Filtering on precomputed embeddings.
pub fn filter_embeddings(embeddings: &[Vec<f64>], k: usize) -> Result<Selection> {
    if embeddings.is_empty() {
        return Err(Error::Empty("description list"));
    }
    Ok(select_by_mean_similarity(&similarity_matrix(embeddings)?, k))
}

/// Encodes every raw description and keeps the `k` most mutually similar.
pub fn filter_topk(raw: &[String], k: usize, encoder: &FrozenEncoder) -> Result<(Vec<String>, Vec<f64>)> {
    let embeddings = raw
        .iter()
        .map(|d| encoder.encode_string(d))
        .collect::<Result<Vec<_>>>()?;
    let sel = filter_embeddings(&embeddings, k)?;
    let selected = sel.indices.iter().map(|&i| raw[i].clone()).collect();
    Ok((selected, sel.mean_sims))
}

/// Mean of the (unit) description embeddings; not re-normalized.
pub fn semantic_reference(selected: &[String], encoder: &FrozenEncoder) -> Result<Vec<f64>> {
    if selected.is_empty() {
        return Err(Error::Empty("selected description set"));
    }
    let embeddings = selected
        .iter()
        .map(|d| encoder.encode_string(d))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_vector(&embeddings))
}

pub(crate) fn mean_vector(vs: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = vec![0.0; vs[0].len()];
    for v in vs {
        numeric::axpy(1.0, v, &mut acc);
    }
    let n = vs.len() as f64;
    acc.iter_mut().for_each(|x| *x /= n);
    acc
}

/// Embedding of a hand-written template such as `"a photo of {cls}"`.
pub fn handcrafted_reference(class_name: &str, template: &str, encoder: &FrozenEncoder) -> Result<Vec<f64>> {
    encoder.encode_string(&fill_class_template(template, class_name)?)
}

/// Replaces the single `{cls}` placeholder.
pub fn fill_class_template(template: &str, class_name: &str) -> Result<String> {
    if !template.contains("{cls}") {
        return Err(Error::Template(format!(
            "template {template:?} has no {{cls}} placeholder"
        )));
    }
    Ok(template.replace("{cls}", class_name))
}

/// One class in a description file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionRecord {
    pub class: String,
    pub category: String,
    pub raw: Vec<String>,
    #[serde(default)]
    pub selected: Vec<String>,
    #[serde(default)]
    pub mean_sims: Vec<f64>,
}

impl DescriptionRecord {
    /// Fills `selected` and `mean_sims` from `raw`.
    pub fn filtered(mut self, k: usize, encoder: &FrozenEncoder) -> Result<Self> {
        let (selected, mean_sims) = filter_topk(&self.raw, k, encoder)?;
        self.selected = selected;
        self.mean_sims = mean_sims;
        Ok(self)
    }
}

/// Filtered descriptions of one class plus their reference embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptionSet {
    pub class: String,
    pub raw: Vec<String>,
    pub selected: Vec<String>,
    pub mean_sims: Vec<f64>,
    pub w_sem: Vec<f64>,
}

impl DescriptionSet {
    /// Filters (when `record.selected` is empty) and embeds.
    pub fn build(record: &DescriptionRecord, k: usize, encoder: &FrozenEncoder) -> Result<Self> {
        let record = if record.selected.is_empty() {
            record.clone().filtered(k, encoder)?
        } else {
            record.clone()
        };
        let w_sem = semantic_reference(&record.selected, encoder)?;
        Ok(Self {
            class: record.class,
            raw: record.raw,
            selected: record.selected,
            mean_sims: record.mean_sims,
            w_sem,
        })
    }
}

pub fn load_records(path: &Path) -> Result<Vec<DescriptionRecord>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn records_to_json(records: &[DescriptionRecord]) -> Result<String> {
    Ok(serde_json::to_string_pretty(records)?)
}

pub fn save_records(path: &Path, records: &[DescriptionRecord]) -> Result<()> {
    std::fs::write(path, records_to_json(records)?).map_err(|e| Error::io(path, e))
}
