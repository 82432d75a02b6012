//! Cross-entropy, semantic-guidance and diversity losses, their weighted sum,
//! and the analytic gradient of that sum with respect to the context bank.
//!
//! Gradients are accumulated per soft embedding `w_soft[i][n]` in a fixed
//! order (class, then prompt, then batch sample) and then pushed back through
//! the frozen text encoder into the context rows.

use serde::{Deserialize, Serialize};

use crate::encoder::FrozenEncoder;
use crate::error::{Error, Result};
use crate::numeric::{self, Grad};
use crate::parallel;
use crate::prompt::{self, ClassCatalog, ContextBank, LogitMatrix, SoftEmbeddings};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub sg: f64,
    pub div: f64,
}

impl LossWeights {
    pub fn new(sg: f64, div: f64) -> Result<Self> {
        for (name, v) in [("lambda_sg", sg), ("lambda_div", div)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(Self { sg, div })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { sg: 8.0, div: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub l_ce: f64,
    pub l_sg: f64,
    pub l_div: f64,
    pub l_total: f64,
    /// Set when `N = 1`; `l_div` is then reported as 0.
    pub diversity_disabled: bool,
    pub grad: Option<Grad>,
}

/// Image embeddings (unit vectors) and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::IndexOutOfRange {
            what: "label",
            index: bad,
            len: classes,
        });
    }
    Ok(())
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
}

/// `−(1/B) Σ_j log softmax(s_j)[y_j]`, with max-subtracted log-sum-exp.
pub fn cross_entropy(logits: &LogitMatrix, labels: &[usize]) -> Result<f64> {
    Ok(cross_entropy_with_grad(logits, labels)?.0)
}

/// Cross-entropy and `∂L/∂s`, a `B × N_c` row-major buffer.
fn cross_entropy_with_grad(logits: &LogitMatrix, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    check_labels(labels, logits.classes())?;
    if labels.len() != logits.batch() {
        return Err(Error::DimensionMismatch {
            context: "cross_entropy labels",
            expected: logits.batch(),
            actual: labels.len(),
        });
    }
    let b = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.batch() * logits.classes());
    for (j, &y) in labels.iter().enumerate() {
        let row = logits.scores.row(j);
        let lse = log_sum_exp(row);
        loss += lse - row[y];
        for (i, &s) in row.iter().enumerate() {
            let p = (s - lse).exp();
            grad.push((p - if i == y { 1.0 } else { 0.0 }) / b);
        }
    }
    Ok((loss / b, grad))
}

fn check_refs(soft: &SoftEmbeddings, refs: &[Vec<f64>]) -> Result<()> {
    if refs.len() < soft.classes() {
        return Err(Error::MissingReference(format!(
            "class index {}",
            refs.len()
        )));
    }
    Ok(())
}

/// `(1/N_c) Σ_i [1 − cos(w̄_i, w_sem_i)]`.
pub fn semantic_guidance(soft: &SoftEmbeddings, refs: &[Vec<f64>]) -> Result<f64> {
    check_refs(soft, refs)?;
    let mut total = 0.0;
    for (i, r) in refs.iter().enumerate().take(soft.classes()) {
        total += 1.0 - numeric::cosine_sim(soft.mean(i), r)?;
    }
    Ok(total / soft.classes() as f64)
}

/// `(1/N_c) Σ_i 1/(N(N−1)) Σ_m Σ_{n≠m} cos²(w_{i,m}, w_{i,n})` over ordered
/// pairs. Returns 0 when `N = 1`, where the term is disabled.
pub fn diversity(soft: &SoftEmbeddings) -> Result<f64> {
    let n = soft.prompts();
    if n < 2 {
        log::debug!("diversity disabled: single prompt");
        return Ok(0.0);
    }
    let pairs = (n * (n - 1)) as f64;
    let mut total = 0.0;
    for i in 0..soft.classes() {
        let mut acc = 0.0;
        for m in 0..n {
            for k in 0..n {
                if k != m {
                    let c = numeric::cosine_sim(soft.soft(i, m), soft.soft(i, k))?;
                    acc += c * c;
                }
            }
        }
        total += acc / pairs;
    }
    Ok(total / soft.classes() as f64)
}

/// Options for [`total_loss`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub tau: f64,
    pub want_grad: bool,
    pub threads: usize,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            tau: 30.0,
            want_grad: true,
            threads: 1,
        }
    }
}

/// Computes the three losses from one forward pass and, when requested,
/// `∂l_total/∂v` for every context coordinate. `refs = None` switches the
/// semantic-guidance term off (reported as 0).
pub fn total_loss(
    bank: &ContextBank,
    catalog: &ClassCatalog,
    encoder: &FrozenEncoder,
    batch: &Batch,
    refs: Option<&[Vec<f64>]>,
    weights: LossWeights,
    options: LossOptions,
) -> Result<LossReport> {
    prompt::check_tau(options.tau)?;
    check_labels(&batch.labels, catalog.len())?;
    let (soft, traces) = prompt::encode_all_traced(bank, catalog, encoder, options.threads)?;
    let logits = LogitMatrix::compute(&batch.images, &soft, options.tau)?;
    let (l_ce, dl_ds) = cross_entropy_with_grad(&logits, &batch.labels)?;
    let l_sg = match refs {
        Some(r) => semantic_guidance(&soft, r)?,
        None => 0.0,
    };
    let l_div = diversity(&soft)?;
    let l_total = l_ce + weights.sg * l_sg + weights.div * l_div;
    let diversity_disabled = soft.prompts() < 2;

    let grad = if options.want_grad {
        Some(backward(
            bank, encoder, batch, refs, weights, options, &soft, &traces, &dl_ds,
        )?)
    } else {
        None
    };
    Ok(LossReport {
        l_ce,
        l_sg,
        l_div,
        l_total,
        diversity_disabled,
        grad,
    })
}

#[allow(clippy::too_many_arguments)]
fn backward(
    bank: &ContextBank,
    encoder: &FrozenEncoder,
    batch: &Batch,
    refs: Option<&[Vec<f64>]>,
    weights: LossWeights,
    options: LossOptions,
    soft: &SoftEmbeddings,
    traces: &[crate::encoder::TextTrace],
    dl_ds: &[f64],
) -> Result<Grad> {
    let classes = soft.classes();
    let prompts = soft.prompts();
    let ce_scale = options.tau / prompts as f64;
    let sg_scale = weights.sg / (classes as f64 * prompts as f64);
    let div_scale = if prompts > 1 {
        4.0 * weights.div / (classes as f64 * (prompts * (prompts - 1)) as f64)
    } else {
        0.0
    };

    let class_ids: Vec<usize> = (0..classes).collect();
    let per_class = parallel::map_ordered(&class_ids, options.threads, |&i| -> Result<Vec<Vec<f64>>> {
        let sg_grad = match refs {
            Some(r) => Some(numeric::cosine_with_grads(soft.mean(i), &r[i])?.1),
            None => None,
        };
        let mut out = Vec::with_capacity(prompts);
        for n in 0..prompts {
            let w = soft.soft(i, n);
            let mut g = vec![0.0; w.len()];
            for (j, img) in batch.images.iter().enumerate() {
                let coeff = dl_ds[j * classes + i] * ce_scale;
                let (_, _, g_w) = numeric::cosine_with_grads(img, w)?;
                numeric::axpy(coeff, &g_w, &mut g);
            }
            if let Some(sg) = &sg_grad {
                numeric::axpy(-sg_scale, sg, &mut g);
            }
            if prompts > 1 {
                for k in 0..prompts {
                    if k != n {
                        let (c, g_w, _) = numeric::cosine_with_grads(w, soft.soft(i, k))?;
                        numeric::axpy(div_scale * c, &g_w, &mut g);
                    }
                }
            }
            out.push(encoder.text_backward(&traces[i * prompts + n], &g));
        }
        Ok(out)
    });

    let mut grad = bank.zero_grad();
    for class_grads in per_class {
        for (n, g) in class_grads?.iter().enumerate() {
            grad.add_to_rows(n, g);
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::numeric::{grad_check, Mat};
    use crate::rng::SplitMix64;

    fn unit_rand(rng: &mut SplitMix64, e: usize) -> Vec<f64> {
        numeric::unit(&(0..e).map(|_| rng.gaussian()).collect::<Vec<_>>()).unwrap()
    }

    fn logits(rows: usize, cols: usize, data: Vec<f64>) -> LogitMatrix {
        LogitMatrix {
            scores: Mat::from_vec(rows, cols, data).unwrap(),
            tau: 1.0,
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let l = cross_entropy(&logits(1, 2, vec![0.0, 0.0]), &[0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let l = cross_entropy(&logits(1, 2, vec![1000.0, -1000.0]), &[0]).unwrap();
        assert!(l.is_finite() && l.abs() < 1e-300);
        assert!(matches!(
            cross_entropy(&logits(1, 2, vec![0.0, 0.0]), &[2]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn cross_entropy_matches_naive_formula() {
        let mut rng = SplitMix64::new(5);
        let data: Vec<f64> = (0..12).map(|_| 3.0 * rng.gaussian()).collect();
        let labels = [2, 0, 3];
        let got = cross_entropy(&logits(3, 4, data.clone()), &labels).unwrap();
        let mut naive = 0.0;
        for j in 0..3 {
            let row = &data[j * 4..j * 4 + 4];
            let z: f64 = row.iter().map(|s| s.exp()).sum();
            naive -= (row[labels[j]].exp() / z).ln();
        }
        assert!((got - naive / 3.0).abs() < 1e-10);
    }

    #[test]
    fn semantic_guidance_examples() {
        let soft = SoftEmbeddings::from_nested(vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]]).unwrap();
        let same = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(semantic_guidance(&soft, &same).unwrap(), 0.0);
        let orth = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert_eq!(semantic_guidance(&soft, &orth).unwrap(), 1.0);
        let anti = vec![vec![-1.0, 0.0], vec![0.0, -2.0]];
        assert_eq!(semantic_guidance(&soft, &anti).unwrap(), 2.0);
        assert!(matches!(
            semantic_guidance(&soft, &same[..1]),
            Err(Error::MissingReference(_))
        ));
    }

    #[test]
    fn diversity_examples() {
        let orth = SoftEmbeddings::from_nested(vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]]).unwrap();
        assert_eq!(diversity(&orth).unwrap(), 0.0);
        let same = SoftEmbeddings::from_nested(vec![vec![vec![0.6, 0.8], vec![0.6, 0.8]]]).unwrap();
        assert_eq!(diversity(&same).unwrap(), 1.0);
        let single = SoftEmbeddings::from_nested(vec![vec![vec![0.6, 0.8]]]).unwrap();
        assert_eq!(diversity(&single).unwrap(), 0.0);
    }

    #[test]
    fn diversity_three_prompts_with_known_cosines() {
        // Unit vectors at 0°, 60°, 120°: pairwise cosines 0.5, -0.5, 0.5.
        // Three prompts with cosines (0.5, 0.0, -0.5) need a third axis.
        let a = vec![1.0, 0.0, 0.0];
        let b = vec![0.5, 0.75f64.sqrt(), 0.0];
        // c·a = 0, c·b = -0.5 and |c| = 1.
        let cy = -0.5 / 0.75f64.sqrt();
        let c = vec![0.0, cy, (1.0 - cy * cy).sqrt()];
        let soft = SoftEmbeddings::from_nested(vec![vec![a, b, c]]).unwrap();
        let d = diversity(&soft).unwrap();
        assert!((d - 1.0 / 6.0).abs() < 1e-15, "{d}");
    }

    #[test]
    fn diversity_gradient_passes_grad_check() {
        // Loss on two random prompts in d = 4 through the real encoder.
        let enc = FrozenEncoder::new(EncoderConfig {
            vocab_size: 32,
            token_dim: 4,
            hidden_dim: 6,
            embed_dim: 5,
            feature_dim: 5,
            seed: 1,
            identity_image: true,
        })
        .unwrap();
        let catalog = ClassCatalog::new(&["ab cd".to_string(), "ef".to_string()], &enc).unwrap();
        let bank = ContextBank::random(2, 2, 4, 1.0, 3);
        let batch = Batch {
            images: vec![vec![1.0, 0.0, 0.0, 0.0, 0.0]],
            labels: vec![0],
        };
        let weights = LossWeights::new(0.0, 1.0).unwrap();
        let opts = LossOptions::default();
        let rep = total_loss(&bank, &catalog, &enc, &batch, None, weights, opts).unwrap();
        // Isolate the diversity gradient by subtracting the CE-only gradient.
        let ce_only = total_loss(&bank, &catalog, &enc, &batch, None, LossWeights::new(0.0, 0.0).unwrap(), opts).unwrap();
        let g: Vec<f64> = rep
            .grad
            .unwrap()
            .data
            .iter()
            .zip(&ce_only.grad.unwrap().data)
            .map(|(a, b)| a - b)
            .collect();
        let r = grad_check(
            |x| {
                let b = bank.with_values(x)?;
                diversity(&prompt::encode_all(&b, &catalog, &enc)?)
            },
            bank.as_slice(),
            &g,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn total_loss_reductions_and_gradient() {
        let enc = FrozenEncoder::new(EncoderConfig {
            vocab_size: 128,
            token_dim: 8,
            hidden_dim: 16,
            embed_dim: 16,
            feature_dim: 16,
            seed: 2,
            identity_image: false,
        })
        .unwrap();
        let names: Vec<String> = ["red fox", "grey wolf", "snowy owl", "brown bear"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let catalog = ClassCatalog::new(&names, &enc).unwrap();
        let bank = ContextBank::random(3, 2, 8, 1.0, 7);
        let mut rng = SplitMix64::new(17);
        let batch = Batch {
            images: (0..6).map(|_| unit_rand(&mut rng, 16)).collect(),
            labels: vec![0, 1, 2, 3, 1, 0],
        };
        let refs: Vec<Vec<f64>> = (0..4).map(|_| unit_rand(&mut rng, 16)).collect();
        let opts = LossOptions::default();

        let zero = total_loss(&bank, &catalog, &enc, &batch, Some(&refs), LossWeights::new(0.0, 0.0).unwrap(), opts).unwrap();
        assert_eq!(zero.l_total, zero.l_ce);

        let w = LossWeights::new(8.0, 1.0).unwrap();
        let rep = total_loss(&bank, &catalog, &enc, &batch, Some(&refs), w, opts).unwrap();
        assert!((rep.l_total - (rep.l_ce + 8.0 * rep.l_sg + rep.l_div)).abs() < 1e-12);
        let r = grad_check(
            |x| {
                let b = bank.with_values(x)?;
                let no_grad = LossOptions { want_grad: false, ..opts };
                Ok(total_loss(&b, &catalog, &enc, &batch, Some(&refs), w, no_grad)?.l_total)
            },
            bank.as_slice(),
            rep.grad.as_ref().unwrap().as_slice(),
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");

        let threaded = total_loss(&bank, &catalog, &enc, &batch, Some(&refs), w, LossOptions { threads: 3, ..opts }).unwrap();
        assert_eq!(threaded, rep);

        let single = ContextBank::random(1, 2, 8, 1.0, 7);
        let rep1 = total_loss(&single, &catalog, &enc, &batch, Some(&refs), w, opts).unwrap();
        assert!(rep1.diversity_disabled);
        assert_eq!(rep1.l_div, 0.0);
        assert_eq!(rep1.l_total, rep1.l_ce + 8.0 * rep1.l_sg);
    }

    #[test]
    fn weights_reject_negative() {
        assert!(LossWeights::new(-1.0, 0.0).is_err());
        assert!(LossWeights::new(0.0, f64::NAN).is_err());
    }
}
