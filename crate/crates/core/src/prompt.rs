//! Learnable multi-prompt machinery: the context bank, prompt assembly,
//! soft-prompt encoding and ensemble scoring.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::encoder::{FrozenEncoder, TextTrace};
use crate::error::{Error, Result};
use crate::numeric::{self, Mat};
use crate::parallel;
use crate::rng::{streams, SplitMix64};

/// The `N` learnable context matrices `v_n`, each `M × d`, stored flat in
/// prompt-major, row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextBank {
    prompts: usize,
    context_len: usize,
    dim: usize,
    data: Vec<f64>,
}

impl ContextBank {
    pub fn new(prompts: usize, context_len: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if prompts == 0 || context_len == 0 || dim == 0 {
            return Err(Error::InvalidConfig(
                "context bank needs N >= 1, M >= 1, d >= 1".into(),
            ));
        }
        if data.len() != prompts * context_len * dim {
            return Err(Error::DimensionMismatch {
                context: "ContextBank::new",
                expected: prompts * context_len * dim,
                actual: data.len(),
            });
        }
        Ok(Self {
            prompts,
            context_len,
            dim,
            data,
        })
    }

    /// Builds `N` copies of the template's token embeddings, each perturbed by
    /// `Gaussian(0, sigma)` noise. `templates` holds either one shared
    /// template or one per prompt, and each must tokenize to `context_len`
    /// words.
    ///
    /// Noise is drawn from `SplitMix64::stream(seed, streams::INIT)`, prompt
    /// by prompt, row-major within a prompt.
    pub fn from_templates(
        encoder: &FrozenEncoder,
        templates: &[String],
        prompts: usize,
        context_len: usize,
        sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        if templates.len() != 1 && templates.len() != prompts {
            return Err(Error::InvalidConfig(format!(
                "expected 1 or {prompts} init templates, got {}",
                templates.len()
            )));
        }
        if sigma < 0.0 || !sigma.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "sigma_init must be >= 0, got {sigma}"
            )));
        }
        let mut base = Vec::with_capacity(templates.len());
        for t in templates {
            let seq = encoder.tokenize(t)?;
            if seq.len() != context_len {
                return Err(Error::Template(format!(
                    "template {t:?} has {} tokens, context length is {context_len}",
                    seq.len()
                )));
            }
            base.push(encoder.embed_tokens(&seq));
        }
        let mut rng = SplitMix64::stream(seed, streams::INIT);
        let mut data = Vec::with_capacity(prompts * context_len * encoder.token_dim());
        for n in 0..prompts {
            let template = &base[if base.len() == 1 { 0 } else { n }];
            for &x in template.as_slice() {
                data.push(x + sigma * rng.gaussian());
            }
        }
        Self::new(prompts, context_len, encoder.token_dim(), data)
    }

    /// Seeded Gaussian context, used where no template is wanted.
    pub fn random(prompts: usize, context_len: usize, dim: usize, std: f64, seed: u64) -> Self {
        let mut rng = SplitMix64::stream(seed, streams::INIT);
        let data = (0..prompts * context_len * dim)
            .map(|_| rng.normal(0.0, std))
            .collect();
        Self {
            prompts,
            context_len,
            dim,
            data,
        }
    }

    pub fn prompts(&self) -> usize {
        self.prompts
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Same shape, new values.
    pub fn with_values(&self, data: &[f64]) -> Result<Self> {
        Self::new(self.prompts, self.context_len, self.dim, data.to_vec())
    }

    pub fn context(&self, n: usize) -> Result<Mat> {
        if n >= self.prompts {
            return Err(Error::IndexOutOfRange {
                what: "prompt",
                index: n,
                len: self.prompts,
            });
        }
        let block = self.context_len * self.dim;
        Mat::from_vec(
            self.context_len,
            self.dim,
            self.data[n * block..(n + 1) * block].to_vec(),
        )
    }

    pub fn zero_grad(&self) -> numeric::Grad {
        numeric::Grad::zeros(self.prompts, self.context_len, self.dim)
    }
}

/// Class names with their cached token embeddings `c_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCatalog {
    names: Vec<String>,
    tokens: Vec<Mat>,
}

impl ClassCatalog {
    pub fn new(names: &[String], encoder: &FrozenEncoder) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "a class catalog needs at least 2 classes, got {}",
                names.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in names {
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate class name {name:?}"
                )));
            }
        }
        let tokens = names
            .iter()
            .map(|n| Ok(encoder.embed_tokens(&encoder.tokenize(n)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            names: names.to_vec(),
            tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tokens(&self, i: usize) -> &Mat {
        &self.tokens[i]
    }
}

/// `p_{i,n} = [v_n ; c_i]`: context rows first, then the class tokens.
pub fn assemble_prompt(bank: &ContextBank, n: usize, class_tokens: &Mat) -> Result<Mat> {
    bank.context(n)?.vstack(class_tokens)
}

/// Per-class, per-prompt text embeddings and their per-class means.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftEmbeddings {
    classes: usize,
    prompts: usize,
    soft: Vec<Vec<f64>>,
    mean: Vec<Vec<f64>>,
}

impl SoftEmbeddings {
    /// Builds from `soft[i][n]`; the means are `Σ_n soft[i][n] / N`.
    pub fn from_nested(soft: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let classes = soft.len();
        let prompts = soft.first().map_or(0, Vec::len);
        if classes == 0 || prompts == 0 || soft.iter().any(|s| s.len() != prompts) {
            return Err(Error::InvalidConfig(
                "soft embeddings must be a non-empty rectangular class × prompt grid".into(),
            ));
        }
        let dim = soft[0][0].len();
        let mean = soft
            .iter()
            .map(|per_prompt| {
                let mut acc = vec![0.0; dim];
                for w in per_prompt {
                    numeric::axpy(1.0, w, &mut acc);
                }
                acc.iter_mut().for_each(|x| *x /= prompts as f64);
                acc
            })
            .collect();
        Ok(Self {
            classes,
            prompts,
            soft: soft.into_iter().flatten().collect(),
            mean,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn prompts(&self) -> usize {
        self.prompts
    }

    pub fn soft(&self, class: usize, prompt: usize) -> &[f64] {
        &self.soft[class * self.prompts + prompt]
    }

    pub fn mean(&self, class: usize) -> &[f64] {
        &self.mean[class]
    }
}

/// `w_soft[i][n] = θ(p_{i,n})` for every class and prompt.
pub fn encode_all(
    bank: &ContextBank,
    catalog: &ClassCatalog,
    encoder: &FrozenEncoder,
) -> Result<SoftEmbeddings> {
    encode_all_threaded(bank, catalog, encoder, 1)
}

pub fn encode_all_threaded(
    bank: &ContextBank,
    catalog: &ClassCatalog,
    encoder: &FrozenEncoder,
    threads: usize,
) -> Result<SoftEmbeddings> {
    let (soft, _) = encode_all_traced(bank, catalog, encoder, threads)?;
    Ok(soft)
}

/// Forward pass that also keeps the encoder traces, indexed `i * N + n`.
pub(crate) fn encode_all_traced(
    bank: &ContextBank,
    catalog: &ClassCatalog,
    encoder: &FrozenEncoder,
    threads: usize,
) -> Result<(SoftEmbeddings, Vec<TextTrace>)> {
    if bank.dim() != encoder.token_dim() {
        return Err(Error::DimensionMismatch {
            context: "context bank dim vs encoder token dim",
            expected: encoder.token_dim(),
            actual: bank.dim(),
        });
    }
    let classes: Vec<usize> = (0..catalog.len()).collect();
    let per_class = parallel::map_ordered(&classes, threads, |&i| {
        (0..bank.prompts())
            .map(|n| encoder.encode_text_traced(&assemble_prompt(bank, n, catalog.tokens(i))?))
            .collect::<Result<Vec<_>>>()
    });
    let mut traces = Vec::with_capacity(catalog.len() * bank.prompts());
    let mut nested = Vec::with_capacity(catalog.len());
    for class_traces in per_class {
        let class_traces = class_traces?;
        nested.push(class_traces.iter().map(|t| t.output.clone()).collect());
        traces.extend(class_traces);
    }
    Ok((SoftEmbeddings::from_nested(nested)?, traces))
}

/// `s_i = τ · (1/N) Σ_n cos(w_img, w_soft[i][n])`.
pub fn ensemble_logits(image: &[f64], soft: &SoftEmbeddings, tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    (0..soft.classes())
        .map(|i| {
            let mut sum = numeric::cosine_sim(image, soft.soft(i, 0))?;
            for n in 1..soft.prompts() {
                sum += numeric::cosine_sim(image, soft.soft(i, n))?;
            }
            Ok(tau * (sum / soft.prompts() as f64))
        })
        .collect()
}

/// Single-prompt scoring `τ · cos(w_img, w_i)` against one embedding per class.
pub fn single_prompt_logits(image: &[f64], class_embeddings: &[Vec<f64>], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    class_embeddings
        .iter()
        .map(|w| Ok(tau * numeric::cosine_sim(image, w)?))
        .collect()
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("tau must be > 0, got {tau}")))
    }
}

/// Ensemble scores for a batch: `scores` is `B × N_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix {
    pub scores: Mat,
    pub tau: f64,
}

impl LogitMatrix {
    pub fn compute(images: &[Vec<f64>], soft: &SoftEmbeddings, tau: f64) -> Result<Self> {
        let mut data = Vec::with_capacity(images.len() * soft.classes());
        for img in images {
            data.extend(ensemble_logits(img, soft, tau)?);
        }
        Ok(Self {
            scores: Mat::from_vec(images.len(), soft.classes(), data)?,
            tau,
        })
    }

    pub fn batch(&self) -> usize {
        self.scores.rows()
    }

    pub fn classes(&self) -> usize {
        self.scores.cols()
    }
}

/// Index of the largest logit; the lowest index wins ties.
pub fn predict(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in logits.iter().enumerate().skip(1) {
        if s > logits[best] {
            best = i;
        }
    }
    best
}
