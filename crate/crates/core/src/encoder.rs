//! The frozen dual encoder: hashing tokenizer, token-embedding table, a small
//! text network and a linear image projection.
//!
//! Text path: `l2_normalize(W2 · tanh(W1 · meanpool_rows(P) + b1) + b2)`.
//! Image path: `l2_normalize(W_img · x)`.
//!
//! Parameters are drawn once from [`SplitMix64::new(seed)`](crate::rng) in the
//! order `E, W1, b1, W2, b2, W_img`, row-major, each entry
//! `Gaussian(0, 1/√fan_in)` with fan-in 1 for the lookup table `E`, `d` for
//! `W1`/`b1`, `h` for `W2`/`b2` and `f` for `W_img`. With the identity image
//! encoder `W_img = I` and no draws are made for it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{self, Mat};
use crate::rng::SplitMix64;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over `bytes`, printed as 16 hex digits.
pub(crate) fn fingerprint(bytes: &[u8]) -> String {
    let hash = bytes.iter().fold(FNV_OFFSET, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME)
    });
    format!("{hash:016x}")
}

pub const DUMP_FORMAT: &str = "msgcoop-encoder";
pub const DUMP_VERSION: u32 = 1;

/// Whitespace tokenizer with hashed ids.
///
/// Text is lowercased and split on whitespace; each word maps to
/// `FNV-1a-64(seed as 8 little-endian bytes ++ word bytes) mod V`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub vocab_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub embedded: Option<Mat>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl Tokenizer {
    pub fn new(vocab_size: usize, seed: u64) -> Self {
        assert!(vocab_size > 0, "vocabulary must be non-empty");
        Self { vocab_size, seed }
    }

    pub fn token_id(&self, word: &str) -> usize {
        let mut hash = FNV_OFFSET;
        for byte in self.seed.to_le_bytes().iter().chain(word.as_bytes()) {
            hash ^= u64::from(*byte);
            hash = hash.wrapping_mul(FNV_PRIME);
        }
        (hash % self.vocab_size as u64) as usize
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSeq> {
        let lowered = text.to_lowercase();
        let ids: Vec<usize> = lowered
            .split_whitespace()
            .map(|w| self.token_id(w))
            .collect();
        if ids.is_empty() {
            return Err(Error::EmptyText);
        }
        Ok(TokenSeq {
            ids,
            embedded: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub token_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub feature_dim: usize,
    pub seed: u64,
    pub identity_image: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 4096,
            token_dim: 32,
            hidden_dim: 64,
            embed_dim: 64,
            feature_dim: 64,
            seed: 0,
            identity_image: false,
        }
    }
}

/// Intermediate values of one text forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct TextTrace {
    rows: usize,
    hidden: Vec<f64>,
    raw_norm: f64,
    pub output: Vec<f64>,
}

/// Frozen text encoder θ and image encoder φ. Nothing mutates it after
/// construction; every method takes `&self`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoder {
    config: EncoderConfig,
    tokenizer: Tokenizer,
    token_embedding: Mat,
    w1: Mat,
    b1: Vec<f64>,
    w2: Mat,
    b2: Vec<f64>,
    w_img: Mat,
}

fn gaussian_mat(rng: &mut SplitMix64, rows: usize, cols: usize, fan_in: usize) -> Mat {
    let std = 1.0 / (fan_in as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| rng.normal(0.0, std))
}

fn gaussian_vec(rng: &mut SplitMix64, len: usize, fan_in: usize) -> Vec<f64> {
    let std = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| rng.normal(0.0, std)).collect()
}

impl FrozenEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        let EncoderConfig {
            vocab_size: v,
            token_dim: d,
            hidden_dim: h,
            embed_dim: e,
            feature_dim: f,
            seed,
            identity_image,
        } = config;
        if v == 0 || d == 0 || h == 0 || e == 0 || f == 0 {
            return Err(Error::InvalidConfig(
                "encoder dimensions must all be positive".into(),
            ));
        }
        if identity_image && f != e {
            return Err(Error::InvalidConfig(format!(
                "identity image encoder needs feature_dim == embed_dim (got {f} and {e})"
            )));
        }
        let mut rng = SplitMix64::new(seed);
        let token_embedding = gaussian_mat(&mut rng, v, d, 1);
        let w1 = gaussian_mat(&mut rng, h, d, d);
        let b1 = gaussian_vec(&mut rng, h, d);
        let w2 = gaussian_mat(&mut rng, e, h, h);
        let b2 = gaussian_vec(&mut rng, e, h);
        let w_img = if identity_image {
            Mat::from_fn(e, f, |r, c| if r == c { 1.0 } else { 0.0 })
        } else {
            gaussian_mat(&mut rng, e, f, f)
        };
        Ok(Self {
            config,
            tokenizer: Tokenizer::new(v, seed),
            token_embedding,
            w1,
            b1,
            w2,
            b2,
            w_img,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn token_dim(&self) -> usize {
        self.config.token_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSeq> {
        self.tokenizer.tokenize(text)
    }

    /// Row `j` of the result is `E[ids[j]]`.
    pub fn embed_tokens(&self, seq: &TokenSeq) -> Mat {
        let d = self.token_dim();
        let mut out = Mat::zeros(seq.len(), d);
        for (j, &id) in seq.ids.iter().enumerate() {
            assert!(
                id < self.config.vocab_size,
                "token id {id} outside vocabulary"
            );
            out.row_mut(j)
                .copy_from_slice(self.token_embedding.row(id));
        }
        out
    }

    /// Tokenizes and embeds in one go, filling `TokenSeq::embedded`.
    pub fn embed_text(&self, text: &str) -> Result<TokenSeq> {
        let mut seq = self.tokenize(text)?;
        seq.embedded = Some(self.embed_tokens(&seq));
        Ok(seq)
    }

    pub fn encode_text(&self, prompt: &Mat) -> Result<Vec<f64>> {
        Ok(self.encode_text_traced(prompt)?.output)
    }

    /// Embeds and encodes a plain string.
    pub fn encode_string(&self, text: &str) -> Result<Vec<f64>> {
        let seq = self.tokenize(text)?;
        self.encode_text(&self.embed_tokens(&seq))
    }

    pub fn encode_text_traced(&self, prompt: &Mat) -> Result<TextTrace> {
        if prompt.cols() != self.token_dim() {
            return Err(Error::DimensionMismatch {
                context: "encode_text columns",
                expected: self.token_dim(),
                actual: prompt.cols(),
            });
        }
        if prompt.rows() == 0 {
            return Err(Error::Empty("prompt matrix"));
        }
        let pooled = prompt.mean_rows();
        let mut hidden = self.w1.matvec(&pooled)?;
        for (a, b) in hidden.iter_mut().zip(&self.b1) {
            *a = (*a + b).tanh();
        }
        let mut raw = self.w2.matvec(&hidden)?;
        numeric::axpy(1.0, &self.b2, &mut raw);
        let raw_norm = numeric::norm(&raw);
        let output = numeric::unit(&raw)?;
        Ok(TextTrace {
            rows: prompt.rows(),
            hidden,
            raw_norm,
            output,
        })
    }

    /// Given `∂L/∂output` for a traced pass, returns `∂L/∂row`, which is the
    /// same vector for every input row because of the mean pool.
    pub fn text_backward(&self, trace: &TextTrace, grad_output: &[f64]) -> Vec<f64> {
        let grad_raw = numeric::normalize_backward(&trace.output, trace.raw_norm, grad_output);
        let mut grad_pre = self
            .w2
            .matvec_t(&grad_raw)
            .expect("trace and encoder dims agree");
        for (g, z) in grad_pre.iter_mut().zip(&trace.hidden) {
            *g *= 1.0 - z * z;
        }
        let mut grad_pooled = self
            .w1
            .matvec_t(&grad_pre)
            .expect("trace and encoder dims agree");
        let inv_rows = 1.0 / trace.rows as f64;
        grad_pooled.iter_mut().for_each(|g| *g *= inv_rows);
        grad_pooled
    }

    pub fn encode_image(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.feature_dim() {
            return Err(Error::DimensionMismatch {
                context: "encode_image",
                expected: self.feature_dim(),
                actual: features.len(),
            });
        }
        numeric::unit(&self.w_img.matvec(features)?)
    }

    pub fn dump(&self) -> EncoderDump {
        EncoderDump {
            format: DUMP_FORMAT.to_string(),
            version: DUMP_VERSION,
            seed: self.config.seed,
            vocab_size: self.config.vocab_size,
            token_dim: self.config.token_dim,
            hidden_dim: self.config.hidden_dim,
            embed_dim: self.config.embed_dim,
            feature_dim: self.config.feature_dim,
            identity_image: self.config.identity_image,
            token_embedding: self.token_embedding.clone(),
            w1: self.w1.clone(),
            b1: self.b1.clone(),
            w2: self.w2.clone(),
            b2: self.b2.clone(),
            w_img: self.w_img.clone(),
        }
    }

    /// The parameter dump serialized as JSON bytes.
    pub fn dump_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(&self.dump()).expect("encoder dump serializes")
    }

    pub fn from_dump(dump: EncoderDump) -> Result<Self> {
        if dump.format != DUMP_FORMAT || dump.version != DUMP_VERSION {
            return Err(Error::VersionMismatch {
                expected: format!("{DUMP_FORMAT}/{DUMP_VERSION}"),
                found: format!("{}/{}", dump.format, dump.version),
            });
        }
        let config = EncoderConfig {
            vocab_size: dump.vocab_size,
            token_dim: dump.token_dim,
            hidden_dim: dump.hidden_dim,
            embed_dim: dump.embed_dim,
            feature_dim: dump.feature_dim,
            seed: dump.seed,
            identity_image: dump.identity_image,
        };
        let shapes = [
            ("token_embedding", &dump.token_embedding, config.vocab_size, config.token_dim),
            ("w1", &dump.w1, config.hidden_dim, config.token_dim),
            ("w2", &dump.w2, config.embed_dim, config.hidden_dim),
            ("w_img", &dump.w_img, config.embed_dim, config.feature_dim),
        ];
        for (name, m, rows, cols) in shapes {
            if m.rows() != rows || m.cols() != cols {
                return Err(Error::InvalidConfig(format!(
                    "{name} has shape {}x{}, expected {rows}x{cols}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        if dump.b1.len() != config.hidden_dim || dump.b2.len() != config.embed_dim {
            return Err(Error::InvalidConfig("bias length mismatch".into()));
        }
        Ok(Self {
            config,
            tokenizer: Tokenizer::new(config.vocab_size, config.seed),
            token_embedding: dump.token_embedding,
            w1: dump.w1,
            b1: dump.b1,
            w2: dump.w2,
            b2: dump.b2,
            w_img: dump.w_img,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.dump_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_dump(serde_json::from_slice(&bytes)?)
    }
}

/// On-disk encoder parameters. Fields serialize in declaration order;
/// matrices are `{rows, cols, data}` with row-major `data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderDump {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub vocab_size: usize,
    pub token_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub feature_dim: usize,
    pub identity_image: bool,
    pub token_embedding: Mat,
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
    pub w_img: Mat,
}
