//! Gradient descent on the context bank with everything else frozen,
//! checkpoints that resume bit-exactly, and ablation sweeps.

mod ablate;
mod config;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use ablate::{ablate, AblationAxis, AblationRow, AblationTable};
pub use config::{Guidance, Prototypes, Schedule, TrainConfig, KEYS};

use crate::descriptions::{handcrafted_reference, DescriptionRecord, DescriptionSet};
use crate::encoder::FrozenEncoder;
use crate::error::{Error, Result};
use crate::eval::{Split, SyntheticDataset};
use crate::objective::{total_loss, Batch, LossOptions};
use crate::prompt::{ClassCatalog, ContextBank};
use crate::rng::{streams, SplitMix64};

pub const CHECKPOINT_VERSION: &str = "msgcoop-checkpoint/1";
pub const METRICS_HEADER: &str = "epoch,l_ce,l_sg,l_div,l_total";

/// Batch-averaged losses of one epoch (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub l_ce: f64,
    pub l_sg: f64,
    pub l_div: f64,
    pub l_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub config: TrainConfig,
    pub config_fingerprint: String,
    pub dataset_fingerprint: String,
    /// Completed epochs.
    pub epoch: usize,
    pub bank: ContextBank,
    /// Momentum buffer; empty when momentum is 0.
    pub velocity: Vec<f64>,
    pub shuffle_rng: SplitMix64,
    pub history: Vec<EpochLosses>,
    pub diversity_disabled: bool,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_slice(&bytes)?;
        let found = value["version"].as_str().unwrap_or("").to_string();
        if found != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION.to_string(),
                found,
            });
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.history)
    }
}

pub fn metrics_csv(history: &[EpochLosses]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for h in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            h.epoch, h.l_ce, h.l_sg, h.l_div, h.l_total
        ));
    }
    out
}

/// Semantic references for `names` under the configured guidance source.
/// `None` means the guidance term is off.
pub fn guidance_refs(
    config: &TrainConfig,
    encoder: &FrozenEncoder,
    names: &[String],
    records: &[DescriptionRecord],
) -> Result<Option<Vec<Vec<f64>>>> {
    match config.guidance {
        Guidance::None => Ok(None),
        Guidance::Handcrafted => names
            .iter()
            .map(|n| handcrafted_reference(n, &config.handcrafted_template, encoder))
            .collect::<Result<Vec<_>>>()
            .map(Some),
        Guidance::Llm => names
            .iter()
            .map(|n| {
                let rec = records
                    .iter()
                    .find(|r| &r.class == n)
                    .ok_or_else(|| Error::MissingReference(n.clone()))?;
                Ok(DescriptionSet::build(rec, config.k, encoder)?.w_sem)
            })
            .collect::<Result<Vec<_>>>()
            .map(Some),
    }
}

/// Initial context: the init template repeated `N` times plus `σ_init` noise.
pub fn initial_bank(config: &TrainConfig, encoder: &FrozenEncoder) -> Result<ContextBank> {
    ContextBank::from_templates(
        encoder,
        std::slice::from_ref(&config.init_template),
        config.prompts,
        config.context_len,
        config.sigma_init,
        config.init_seed,
    )
}

fn check_encoder(config: &TrainConfig, encoder: &FrozenEncoder) -> Result<()> {
    if encoder.config() != &config.encoder_config() {
        return Err(Error::InvalidConfig(
            "encoder does not match the config's dimensions or seed".into(),
        ));
    }
    Ok(())
}

/// Trains from the initial bank for `config.epochs` epochs.
pub fn train(
    config: &TrainConfig,
    encoder: &FrozenEncoder,
    dataset: &SyntheticDataset,
    records: &[DescriptionRecord],
    threads: usize,
) -> Result<Checkpoint> {
    config.validate()?;
    check_encoder(config, encoder)?;
    let bank = initial_bank(config, encoder)?;
    let start = Checkpoint {
        version: CHECKPOINT_VERSION.to_string(),
        config: config.clone(),
        config_fingerprint: config.fingerprint(),
        dataset_fingerprint: dataset.fingerprint()?,
        epoch: 0,
        velocity: if config.momentum > 0.0 {
            vec![0.0; bank.as_slice().len()]
        } else {
            Vec::new()
        },
        bank,
        shuffle_rng: SplitMix64::stream(config.data_seed, streams::SHUFFLE),
        history: Vec::new(),
        diversity_disabled: config.prompts == 1,
    };
    run_epochs(start, encoder, dataset, records, threads)
}

/// Continues `checkpoint` up to `config.epochs`. Only `epochs` may differ
/// from the configuration the checkpoint was started with.
pub fn resume(
    checkpoint: &Checkpoint,
    config: &TrainConfig,
    encoder: &FrozenEncoder,
    dataset: &SyntheticDataset,
    records: &[DescriptionRecord],
    threads: usize,
) -> Result<Checkpoint> {
    if checkpoint.version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION.to_string(),
            found: checkpoint.version.clone(),
        });
    }
    config.validate()?;
    check_encoder(config, encoder)?;
    let fp = config.fingerprint();
    if fp != checkpoint.config_fingerprint {
        return Err(Error::FingerprintMismatch {
            what: "config",
            expected: checkpoint.config_fingerprint.clone(),
            actual: fp,
        });
    }
    let dfp = dataset.fingerprint()?;
    if dfp != checkpoint.dataset_fingerprint {
        return Err(Error::FingerprintMismatch {
            what: "dataset",
            expected: checkpoint.dataset_fingerprint.clone(),
            actual: dfp,
        });
    }
    if checkpoint.epoch >= config.epochs {
        return Ok(checkpoint.clone());
    }
    let mut state = checkpoint.clone();
    state.config = config.clone();
    run_epochs(state, encoder, dataset, records, threads)
}

fn run_epochs(
    mut state: Checkpoint,
    encoder: &FrozenEncoder,
    dataset: &SyntheticDataset,
    records: &[DescriptionRecord],
    threads: usize,
) -> Result<Checkpoint> {
    let config = state.config.clone();
    if dataset.feature_dim != encoder.feature_dim() {
        return Err(Error::DimensionMismatch {
            context: "dataset feature_dim vs encoder",
            expected: encoder.feature_dim(),
            actual: dataset.feature_dim,
        });
    }
    let names = dataset.names(Split::Base);
    let catalog = ClassCatalog::new(&names, encoder)?;
    let refs = guidance_refs(&config, encoder, &names, records)?;
    let weights = config.weights()?;
    let options = LossOptions {
        tau: config.tau,
        want_grad: true,
        threads,
    };
    let (features, labels) = dataset.base_training();
    if features.is_empty() {
        return Err(Error::Empty("base training set"));
    }
    let images = features
        .iter()
        .map(|x| encoder.encode_image(x))
        .collect::<Result<Vec<_>>>()?;
    let momentum = config.momentum;

    for epoch in state.epoch..config.epochs {
        let lr = config.lr_at(epoch);
        let mut order: Vec<usize> = (0..images.len()).collect();
        state.shuffle_rng.shuffle(&mut order);
        let mut sums = [0.0; 4];
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = Batch {
                images: chunk.iter().map(|&j| images[j].clone()).collect(),
                labels: chunk.iter().map(|&j| labels[j]).collect(),
            };
            let rep = total_loss(&state.bank, &catalog, encoder, &batch, refs.as_deref(), weights, options)?;
            if !rep.l_total.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("l_total at epoch {}, batch {b}", epoch + 1),
                    value: rep.l_total,
                });
            }
            let grad = rep.grad.as_ref().expect("gradient requested");
            let v = state.bank.as_mut_slice();
            if momentum > 0.0 {
                for ((x, m), g) in v.iter_mut().zip(&mut state.velocity).zip(grad.as_slice()) {
                    *m = momentum * *m + g;
                    *x -= lr * *m;
                }
            } else {
                for (x, g) in v.iter_mut().zip(grad.as_slice()) {
                    *x -= lr * g;
                }
            }
            sums[0] += rep.l_ce;
            sums[1] += rep.l_sg;
            sums[2] += rep.l_div;
            sums[3] += rep.l_total;
            batches += 1;
            state.diversity_disabled = rep.diversity_disabled;
        }
        let n = batches as f64;
        let losses = EpochLosses {
            epoch: epoch + 1,
            l_ce: sums[0] / n,
            l_sg: sums[1] / n,
            l_div: sums[2] / n,
            l_total: sums[3] / n,
        };
        log::info!(
            "epoch {}/{}: l_ce {:.4} l_sg {:.4} l_div {:.4} l_total {:.4}",
            losses.epoch,
            config.epochs,
            losses.l_ce,
            losses.l_sg,
            losses.l_div,
            losses.l_total
        );
        state.history.push(losses);
        state.epoch = epoch + 1;
    }
    Ok(state)
}
