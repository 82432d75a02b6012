//! Synthetic base/novel benchmark, accuracy evaluation and the harmonic mean.
//!
//! Base classes are scored among base classes only and novel classes among
//! novel classes only, each with the same learned context vectors.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::descriptions::{fill_class_template, DescriptionRecord};
use crate::encoder::{self, FrozenEncoder};
use crate::error::{Error, Result};
use crate::numeric::{self, Mat};
use crate::parallel;
use crate::prompt::{self, ClassCatalog, ContextBank};
use crate::rng::{streams, SplitMix64};

pub const DATASET_FORMAT: &str = "msgcoop-dataset";
pub const DATASET_VERSION: u32 = 1;

/// Category string attached to synthetic description records.
pub const SYNTHETIC_CATEGORY: &str = "synthetic objects";

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// How class prototypes are placed in feature space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PrototypeMode {
    /// Independent Gaussian directions.
    Random,
    /// `θ(v* ++ c_i)`: the text embedding of a hidden context of `context_len`
    /// rows (entries `N(0, scale²)`) followed by the class-name tokens. A
    /// context exists that classifies perfectly, which makes the benchmark
    /// learnable through the frozen encoder. Requires `f == e`.
    Anchored { context_len: usize, scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub classes: usize,
    pub shots: usize,
    pub test_per_class: usize,
    pub sigma: f64,
    pub feature_dim: usize,
    pub seed: u64,
    pub prototypes: PrototypeMode,
    /// Words in each class's description pool.
    pub cue_words: usize,
    /// Distinct description sentences per class.
    pub sentences: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            shots: 16,
            test_per_class: 50,
            sigma: 0.15,
            feature_dim: 64,
            seed: 0,
            prototypes: PrototypeMode::Anchored {
                context_len: 4,
                scale: 0.5,
            },
            cue_words: 8,
            sentences: 8,
        }
    }
}

impl DatasetSpec {
    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.classes < 2 || !self.classes.is_multiple_of(2) {
            return bad(format!("classes must be even and >= 2, got {}", self.classes));
        }
        if self.shots == 0 || self.test_per_class == 0 {
            return bad("shots and test_per_class must be >= 1".into());
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma_data must be >= 0, got {}", self.sigma));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be >= 1".into());
        }
        if self.cue_words < 3 {
            return bad(format!("cue_words must be >= 3, got {}", self.cue_words));
        }
        if self.sentences == 0 {
            return bad("sentences must be >= 1".into());
        }
        if let PrototypeMode::Anchored { context_len, scale } = self.prototypes {
            if context_len == 0 || !(scale >= 0.0 && scale.is_finite()) {
                return bad("anchored prototypes need context_len >= 1 and scale >= 0".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Novel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassData {
    pub name: String,
    pub split: Split,
    #[serde(default)]
    pub prototype: Vec<f64>,
    pub train: Vec<Vec<f64>>,
    pub test: Vec<Vec<f64>>,
    #[serde(default)]
    pub descriptions: Vec<String>,
}

/// Labeled feature vectors per class. Also the on-disk dataset format, where
/// `prototype`, `descriptions`, `seed`, `sigma` and `generic_words` may be
/// omitted for externally produced features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub format: String,
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sigma: f64,
    pub feature_dim: usize,
    pub classes: Vec<ClassData>,
    #[serde(default)]
    pub generic_words: Vec<String>,
}

fn pronounceable(rng: &mut SplitMix64) -> String {
    let syllables = 2 + rng.below(2);
    let mut word = String::new();
    for _ in 0..syllables {
        word.push(CONSONANTS[rng.below(CONSONANTS.len() as u64) as usize] as char);
        word.push(VOWELS[rng.below(VOWELS.len() as u64) as usize] as char);
    }
    word
}

fn fresh_word(rng: &mut SplitMix64, used: &mut HashSet<String>) -> String {
    loop {
        let w = pronounceable(rng);
        if used.insert(w.clone()) {
            return w;
        }
    }
}

fn noisy_unit(rng: &mut SplitMix64, center: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if sigma == 0.0 {
        return Ok(center.to_vec());
    }
    let x: Vec<f64> = center.iter().map(|c| c + sigma * rng.gaussian()).collect();
    numeric::unit(&x)
}

/// Builds the benchmark. Everything is drawn from the data stream of
/// `spec.seed` (names and word pools, hidden context, prototypes, train
/// samples, test samples) except the description sentences, which come from
/// the description stream.
pub fn generate_dataset(spec: &DatasetSpec, encoder: &FrozenEncoder) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = SplitMix64::stream(spec.seed, streams::DATA);
    let mut used = HashSet::new();
    let names: Vec<String> = (0..spec.classes)
        .map(|_| format!("{} {}", fresh_word(&mut rng, &mut used), fresh_word(&mut rng, &mut used)))
        .collect();
    let pools: Vec<Vec<String>> = (0..spec.classes)
        .map(|_| (0..spec.cue_words).map(|_| fresh_word(&mut rng, &mut used)).collect())
        .collect();
    let generic_words: Vec<String> = (0..spec.cue_words)
        .map(|_| fresh_word(&mut rng, &mut used))
        .collect();

    let prototypes: Vec<Vec<f64>> = match spec.prototypes {
        PrototypeMode::Random => (0..spec.classes)
            .map(|_| {
                let g: Vec<f64> = (0..spec.feature_dim).map(|_| rng.gaussian()).collect();
                numeric::unit(&g)
            })
            .collect::<Result<_>>()?,
        PrototypeMode::Anchored { context_len, scale } => {
            if spec.feature_dim != encoder.embed_dim() {
                return Err(Error::DimensionMismatch {
                    context: "anchored prototypes need feature_dim == embed_dim",
                    expected: encoder.embed_dim(),
                    actual: spec.feature_dim,
                });
            }
            let d = encoder.token_dim();
            let hidden = Mat::from_fn(context_len, d, |_, _| scale * rng.gaussian());
            names
                .iter()
                .map(|name| {
                    let tokens = encoder.embed_text(name)?.embedded.expect("embedded");
                    encoder.encode_text(&hidden.vstack(&tokens)?)
                })
                .collect::<Result<_>>()?
        }
    };

    let mut train = Vec::with_capacity(spec.classes);
    for p in &prototypes {
        train.push(
            (0..spec.shots)
                .map(|_| noisy_unit(&mut rng, p, spec.sigma))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let mut test = Vec::with_capacity(spec.classes);
    for p in &prototypes {
        test.push(
            (0..spec.test_per_class)
                .map(|_| noisy_unit(&mut rng, p, spec.sigma))
                .collect::<Result<Vec<_>>>()?,
        );
    }

    let mut drng = SplitMix64::stream(spec.seed, streams::DESCRIPTIONS);
    let base = spec.classes.div_ceil(2);
    let classes = names
        .into_iter()
        .zip(pools)
        .zip(prototypes)
        .zip(train.into_iter().zip(test))
        .enumerate()
        .map(|(i, (((name, pool), prototype), (train, test)))| {
            let descriptions = cue_sentences(&mut drng, &name, &pool, spec.sentences);
            ClassData {
                name,
                split: if i < base { Split::Base } else { Split::Novel },
                prototype,
                train,
                test,
                descriptions,
            }
        })
        .collect();
    Ok(SyntheticDataset {
        format: DATASET_FORMAT.to_string(),
        version: DATASET_VERSION,
        seed: spec.seed,
        sigma: spec.sigma,
        feature_dim: spec.feature_dim,
        classes,
        generic_words,
    })
}

/// Distinct sentences of three pool words followed by the class name.
fn cue_sentences(rng: &mut SplitMix64, name: &str, pool: &[String], count: usize) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    // Three words out of at least three give at least one combination; the
    // cap keeps small pools from looping forever.
    let mut attempts = 0;
    while out.len() < count && attempts < count * 100 {
        attempts += 1;
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        rng.shuffle(&mut idx);
        let sentence = format!("{} {} {} {name}", pool[idx[0]], pool[idx[1]], pool[idx[2]]);
        if seen.insert(sentence.clone()) {
            out.push(sentence);
        }
    }
    out
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.classes.len())
            .filter(|&i| self.classes[i].split == split)
            .collect()
    }

    pub fn names(&self, split: Split) -> Vec<String> {
        self.indices(split)
            .into_iter()
            .map(|i| self.classes[i].name.clone())
            .collect()
    }

    /// Training pairs of the base classes, labels indexing the base subset.
    pub fn base_training(&self) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (label, i) in self.indices(Split::Base).into_iter().enumerate() {
            for x in &self.classes[i].train {
                xs.push(x.clone());
                ys.push(label);
            }
        }
        (xs, ys)
    }

    /// Checks format, dimensions, finiteness and unique names.
    pub fn validate(&self) -> Result<()> {
        if self.format != DATASET_FORMAT || self.version != DATASET_VERSION {
            return Err(Error::VersionMismatch {
                expected: format!("{DATASET_FORMAT}/{DATASET_VERSION}"),
                found: format!("{}/{}", self.format, self.version),
            });
        }
        if self.classes.len() < 2 {
            return Err(Error::InvalidConfig("dataset needs at least 2 classes".into()));
        }
        let mut names = HashSet::new();
        for c in &self.classes {
            if !names.insert(c.name.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate class name {:?}", c.name)));
            }
            for x in c.train.iter().chain(&c.test) {
                if x.len() != self.feature_dim {
                    return Err(Error::DimensionMismatch {
                        context: "dataset sample length",
                        expected: self.feature_dim,
                        actual: x.len(),
                    });
                }
                if !numeric::all_finite(x) {
                    return Err(Error::NonFinite {
                        context: format!("sample of class {:?}", c.name),
                        value: f64::NAN,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ds: Self = serde_json::from_slice(&bytes)?;
        ds.validate()?;
        Ok(ds)
    }

    /// FNV-1a of the serialized dataset.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(encoder::fingerprint(self.to_json()?.as_bytes()))
    }

    /// Offline description records shaped like an LLM response set of
    /// `5 × samples_per_template` entries per class, template-major. Every
    /// fifth entry is an off-topic sentence of generic words so that the
    /// top-k filter has something to reject.
    pub fn description_fixtures(&self, samples_per_template: usize) -> Result<Vec<DescriptionRecord>> {
        let total = crate::descriptions::TEMPLATES.len() * samples_per_template;
        let mut rng = SplitMix64::stream(self.seed ^ 0x5eed, streams::DESCRIPTIONS);
        self.classes
            .iter()
            .map(|c| {
                if c.descriptions.is_empty() {
                    return Err(Error::MissingReference(c.name.clone()));
                }
                let mut cue = 0;
                let raw = (0..total)
                    .map(|j| {
                        if j % 5 == 4 && self.generic_words.len() >= 4 {
                            let mut idx: Vec<usize> = (0..self.generic_words.len()).collect();
                            rng.shuffle(&mut idx);
                            idx[..4]
                                .iter()
                                .map(|&w| self.generic_words[w].as_str())
                                .collect::<Vec<_>>()
                                .join(" ")
                        } else {
                            cue += 1;
                            c.descriptions[(cue - 1) % c.descriptions.len()].clone()
                        }
                    })
                    .collect();
                Ok(DescriptionRecord {
                    class: c.name.clone(),
                    category: SYNTHETIC_CATEGORY.to_string(),
                    raw,
                    selected: vec![],
                    mean_sims: vec![],
                })
            })
            .collect()
    }
}

/// `2BN / (B + N)`, or 0 when `B + N = 0`.
pub fn harmonic_mean(base: f64, novel: f64) -> f64 {
    if base + novel > 0.0 {
        2.0 * base * novel / (base + novel)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub base: f64,
    pub novel: f64,
    pub hm: f64,
    pub per_class: BTreeMap<String, f64>,
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

impl EvalReport {
    fn from_parts(base: f64, novel: f64, per_class: BTreeMap<String, f64>) -> Self {
        Self {
            base,
            novel,
            hm: harmonic_mean(base, novel),
            per_class,
        }
    }

    /// Percentages rounded to two decimals.
    pub fn rounded(&self) -> Self {
        Self {
            base: round2(self.base),
            novel: round2(self.novel),
            hm: round2(self.hm),
            per_class: self.per_class.iter().map(|(k, v)| (k.clone(), round2(*v))).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.rounded())?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub const CSV_HEADER: &'static str = "label,base,novel,hm";

    pub fn csv_row(&self, label: &str) -> String {
        format!("{label},{:.2},{:.2},{:.2}", self.base, self.novel, self.hm)
    }
}

/// Accuracy (percent) of `score` over the test samples of `classes`, labels
/// indexing `classes`. Returns the overall accuracy and one per class.
fn split_accuracy<F>(
    dataset: &SyntheticDataset,
    encoder: &FrozenEncoder,
    classes: &[usize],
    threads: usize,
    score: F,
) -> Result<(f64, Vec<f64>)>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    let mut samples = Vec::new();
    for (label, &i) in classes.iter().enumerate() {
        for x in &dataset.classes[i].test {
            samples.push((label, x));
        }
    }
    if samples.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let hits = parallel::map_ordered(&samples, threads, |(label, x)| -> Result<bool> {
        let img = encoder.encode_image(x)?;
        Ok(prompt::predict(&score(&img)?) == *label)
    });
    let mut correct = vec![0usize; classes.len()];
    let mut count = vec![0usize; classes.len()];
    for ((label, _), hit) in samples.iter().zip(hits) {
        count[*label] += 1;
        if hit? {
            correct[*label] += 1;
        }
    }
    let total: usize = correct.iter().sum();
    let per = correct
        .iter()
        .zip(&count)
        .map(|(&c, &n)| if n == 0 { 0.0 } else { 100.0 * c as f64 / n as f64 })
        .collect();
    Ok((100.0 * total as f64 / samples.len() as f64, per))
}

fn split_classes(dataset: &SyntheticDataset) -> Result<[(Split, Vec<usize>); 2]> {
    let base = dataset.indices(Split::Base);
    let novel = dataset.indices(Split::Novel);
    for (what, idx) in [("base", &base), ("novel", &novel)] {
        if idx.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "{what} split has {} classes; classification needs at least 2",
                idx.len()
            )));
        }
    }
    Ok([(Split::Base, base), (Split::Novel, novel)])
}

/// Base accuracy among base classes, novel accuracy among novel classes,
/// both with the context vectors in `bank`.
pub fn evaluate(
    bank: &ContextBank,
    encoder: &FrozenEncoder,
    dataset: &SyntheticDataset,
    tau: f64,
    threads: usize,
) -> Result<EvalReport> {
    prompt::check_tau(tau)?;
    let mut acc = [0.0; 2];
    let mut per_class = BTreeMap::new();
    for (slot, (_, idx)) in split_classes(dataset)?.iter().enumerate() {
        let names: Vec<String> = idx.iter().map(|&i| dataset.classes[i].name.clone()).collect();
        let catalog = ClassCatalog::new(&names, encoder)?;
        let soft = prompt::encode_all_threaded(bank, &catalog, encoder, threads)?;
        let (overall, per) = split_accuracy(dataset, encoder, idx, threads, |img| {
            prompt::ensemble_logits(img, &soft, tau)
        })?;
        acc[slot] = overall;
        per_class.extend(names.into_iter().zip(per));
    }
    Ok(EvalReport::from_parts(acc[0], acc[1], per_class))
}

/// Hand-written template per class (e.g. `"a photo of a {cls}"`), no learned
/// context; same protocol as [`evaluate`].
pub fn zero_shot_baseline(
    encoder: &FrozenEncoder,
    dataset: &SyntheticDataset,
    template: &str,
    tau: f64,
    threads: usize,
) -> Result<EvalReport> {
    prompt::check_tau(tau)?;
    let mut acc = [0.0; 2];
    let mut per_class = BTreeMap::new();
    for (slot, (_, idx)) in split_classes(dataset)?.iter().enumerate() {
        let names: Vec<String> = idx.iter().map(|&i| dataset.classes[i].name.clone()).collect();
        let weights = names
            .iter()
            .map(|n| encoder.encode_string(&fill_class_template(template, n)?))
            .collect::<Result<Vec<_>>>()?;
        let (overall, per) = split_accuracy(dataset, encoder, idx, threads, |img| {
            prompt::single_prompt_logits(img, &weights, tau)
        })?;
        acc[slot] = overall;
        per_class.extend(names.into_iter().zip(per));
    }
    Ok(EvalReport::from_parts(acc[0], acc[1], per_class))
}
