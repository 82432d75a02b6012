//! Self-contained numerical checks: the toy finite-difference gradient check
//! and the property suite run by `msgcoop selftest`.

use serde::Serialize;

use crate::descriptions::filter_embeddings;
use crate::encoder::{EncoderConfig, FrozenEncoder};
use crate::error::Result;
use crate::eval::{generate_dataset, harmonic_mean};
use crate::numeric::{self, grad_check, GradCheck};
use crate::objective::{self, total_loss, Batch, LossOptions, LossWeights};
use crate::prompt::{self, ClassCatalog, ContextBank};
use crate::rng::SplitMix64;
use crate::trainer::{resume, train, TrainConfig};

/// Shape of the toy gradient-check problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ToyShape {
    pub prompts: usize,
    pub classes: usize,
    pub context_len: usize,
    pub token_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub batch: usize,
    pub tau: f64,
    pub lambda_sg: f64,
    pub lambda_div: f64,
    pub step: f64,
}

impl Default for ToyShape {
    fn default() -> Self {
        Self {
            prompts: 3,
            classes: 4,
            context_len: 2,
            token_dim: 8,
            hidden_dim: 16,
            embed_dim: 16,
            batch: 6,
            tau: 30.0,
            lambda_sg: 8.0,
            lambda_div: 1.0,
            step: 1e-5,
        }
    }
}

/// A random toy problem: encoder, class names, bank, batch and references.
pub struct Toy {
    pub encoder: FrozenEncoder,
    pub catalog: ClassCatalog,
    pub bank: ContextBank,
    pub batch: Batch,
    pub refs: Vec<Vec<f64>>,
    pub weights: LossWeights,
    pub options: LossOptions,
}

fn random_unit(rng: &mut SplitMix64, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.gaussian()).collect();
    numeric::l2_normalize(&v).0
}

fn syllable_word(rng: &mut SplitMix64) -> String {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    (0..3)
        .flat_map(|_| {
            [
                C[rng.below(C.len() as u64) as usize] as char,
                V[rng.below(V.len() as u64) as usize] as char,
            ]
        })
        .collect()
}

impl Toy {
    pub fn new(shape: &ToyShape, seed: u64) -> Result<Self> {
        let encoder = FrozenEncoder::new(EncoderConfig {
            vocab_size: 256,
            token_dim: shape.token_dim,
            hidden_dim: shape.hidden_dim,
            embed_dim: shape.embed_dim,
            feature_dim: shape.embed_dim,
            seed,
            identity_image: true,
        })?;
        let mut rng = SplitMix64::new(seed ^ 0xd1a6);
        let mut names: Vec<String> = Vec::new();
        while names.len() < shape.classes {
            let n = format!("{} {}", syllable_word(&mut rng), syllable_word(&mut rng));
            if !names.contains(&n) {
                names.push(n);
            }
        }
        let catalog = ClassCatalog::new(&names, &encoder)?;
        let bank = ContextBank::random(shape.prompts, shape.context_len, shape.token_dim, 1.0, seed);
        let batch = Batch {
            images: (0..shape.batch).map(|_| random_unit(&mut rng, shape.embed_dim)).collect(),
            labels: (0..shape.batch)
                .map(|_| rng.below(shape.classes as u64) as usize)
                .collect(),
        };
        let refs = (0..shape.classes)
            .map(|_| {
                let a = random_unit(&mut rng, shape.embed_dim);
                let b = random_unit(&mut rng, shape.embed_dim);
                a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect()
            })
            .collect();
        Ok(Self {
            encoder,
            catalog,
            bank,
            batch,
            refs,
            weights: LossWeights::new(shape.lambda_sg, shape.lambda_div)?,
            options: LossOptions {
                tau: shape.tau,
                ..LossOptions::default()
            },
        })
    }

    pub fn loss(&self, bank: &ContextBank, want_grad: bool) -> Result<objective::LossReport> {
        total_loss(
            bank,
            &self.catalog,
            &self.encoder,
            &self.batch,
            Some(&self.refs),
            self.weights,
            LossOptions {
                want_grad,
                ..self.options
            },
        )
    }
}

/// Central differences on every context coordinate of the toy problem.
pub fn gradcheck(shape: &ToyShape, seed: u64) -> Result<GradCheck> {
    let toy = Toy::new(shape, seed)?;
    let report = toy.loss(&toy.bank, true)?;
    let grad = report.grad.expect("gradient requested");
    grad_check(
        |x| Ok(toy.loss(&toy.bank.with_values(x)?, false)?.l_total),
        toy.bank.as_slice(),
        grad.as_slice(),
        shape.step,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name, passed, detail }
}

/// Runs every property check; none needs files or network.
pub fn selftest(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();

    let gc = gradcheck(&ToyShape::default(), seed)?;
    out.push(check(
        "gradcheck",
        gc.max_rel_error < 1e-4,
        format!("max relative error {:.3e} over {} coordinates", gc.max_rel_error, gc.coordinates),
    ));

    let mut rng = SplitMix64::new(seed);
    let mut violations = 0;
    let trials = 200;
    for t in 0..trials {
        let shape = ToyShape {
            prompts: 1 + rng.below(4) as usize,
            classes: 2 + rng.below(4) as usize,
            context_len: 1 + rng.below(3) as usize,
            batch: 1 + rng.below(6) as usize,
            ..ToyShape::default()
        };
        let toy = Toy::new(&shape, seed.wrapping_add(t))?;
        let r = toy.loss(&toy.bank, false)?;
        if !(0.0..=1.0).contains(&r.l_div) || !(0.0..=2.0).contains(&r.l_sg) || r.l_ce < 0.0 {
            violations += 1;
        }
    }
    out.push(check(
        "loss-bounds",
        violations == 0,
        format!("{violations} violations in {trials} random problems"),
    ));

    let toy = Toy::new(&ToyShape { prompts: 1, ..ToyShape::default() }, seed)?;
    let soft = prompt::encode_all(&toy.bank, &toy.catalog, &toy.encoder)?;
    let singles: Vec<Vec<f64>> = (0..soft.classes()).map(|i| soft.soft(i, 0).to_vec()).collect();
    let mut bitwise = true;
    for img in &toy.batch.images {
        let a = prompt::ensemble_logits(img, &soft, 30.0)?;
        let b = prompt::single_prompt_logits(img, &singles, 30.0)?;
        bitwise &= a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    out.push(check("single-prompt-reduction", bitwise, "N=1 ensemble vs single-prompt logits".into()));

    let mut toy = Toy::new(&ToyShape::default(), seed)?;
    toy.weights = LossWeights::new(0.0, 0.0)?;
    let r = toy.loss(&toy.bank, false)?;
    out.push(check(
        "zero-weight-reduction",
        (r.l_total - r.l_ce).abs() <= 1e-12,
        format!("|l_total - l_ce| = {:.3e}", (r.l_total - r.l_ce).abs()),
    ));

    let toy = Toy::new(&ToyShape::default(), seed)?;
    let one = toy.bank.context(0)?;
    let collapsed = ContextBank::new(
        3,
        one.rows(),
        one.cols(),
        one.as_slice().repeat(3),
    )?;
    let r = toy.loss(&collapsed, false)?;
    out.push(check(
        "collapsed-diversity",
        r.l_div == 1.0,
        format!("l_div = {}", r.l_div),
    ));

    let mut mismatches = 0;
    for t in 0..200 {
        let big_k = 1 + rng.below(8) as usize;
        let k = 1 + rng.below(big_k as u64) as usize;
        let mut embs: Vec<Vec<f64>> = Vec::new();
        for _ in 0..big_k {
            if !embs.is_empty() && rng.below(3) == 0 {
                let j = rng.below(embs.len() as u64) as usize;
                embs.push(embs[j].clone());
            } else {
                embs.push(random_unit(&mut rng, 6));
            }
        }
        let sel = filter_embeddings(&embs, k)?;
        if sel.indices != brute_force_topk(&embs, k) {
            mismatches += 1;
            log::warn!("filter mismatch in trial {t}");
        }
    }
    out.push(check("filter-oracle", mismatches == 0, format!("{mismatches} mismatches in 200 sets")));

    let hm = harmonic_mean(81.40, 75.05);
    out.push(check(
        "harmonic-mean",
        (hm - 78.10).abs() <= 0.005 && harmonic_mean(0.0, 50.0) == 0.0,
        format!("HM(81.40, 75.05) = {hm:.4}"),
    ));

    let cfg = TrainConfig {
        prompts: 2,
        vocab_size: 512,
        token_dim: 8,
        hidden_dim: 16,
        embed_dim: 16,
        feature_dim: 16,
        classes: 4,
        shots: 3,
        test_per_class: 4,
        epochs: 4,
        batch_size: 4,
        encoder_seed: seed,
        data_seed: seed,
        init_seed: seed,
        ..TrainConfig::desk()
    };
    let enc = FrozenEncoder::new(cfg.encoder_config())?;
    let dump = enc.dump_bytes();
    let ds = generate_dataset(&cfg.dataset_spec(), &enc)?;
    let recs = ds.description_fixtures(cfg.samples_per_template)?;
    let a = train(&cfg, &enc, &ds, &recs, 1)?;
    let b = train(&cfg, &enc, &ds, &recs, 2)?;
    let half = train(&TrainConfig { epochs: 2, ..cfg.clone() }, &enc, &ds, &recs, 1)?;
    let resumed = resume(&half, &cfg, &enc, &ds, &recs, 1)?;
    out.push(check(
        "determinism",
        a.to_bytes()? == b.to_bytes()? && resumed.to_bytes()? == a.to_bytes()?,
        "repeat run and 2+2 resume against 4 epochs".into(),
    ));
    out.push(check(
        "frozen-encoder",
        enc.dump_bytes() == dump,
        "encoder dump before and after training".into(),
    ));
    Ok(out)
}

/// Exhaustive top-k: among all k-subsets take the one whose scores sorted
/// descending are lexicographically largest, then the lexicographically
/// smallest index set; report it best first, lower index first on ties.
pub fn brute_force_topk(embeddings: &[Vec<f64>], k: usize) -> Vec<usize> {
    let n = embeddings.len();
    let cos = |a: &[f64], b: &[f64]| {
        let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let aa: f64 = a.iter().map(|x| x * x).sum();
        let bb: f64 = b.iter().map(|x| x * x).sum();
        (ab / (aa * bb).sqrt()).clamp(-1.0, 1.0)
    };
    let score: Vec<f64> = (0..n)
        .map(|i| {
            if n == 1 {
                return 0.0;
            }
            let mut s = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                s += cos(&embeddings[i], &embeddings[j]);
            }
            s / (n - 1) as f64
        })
        .collect();
    let k = k.min(n);
    let order = |set: &[usize]| {
        let mut v = set.to_vec();
        v.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
        v
    };
    let mut best: Option<Vec<usize>> = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let set: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
        let cand = order(&set);
        best = Some(match best {
            None => cand,
            Some(cur) => {
                let sc = |v: &[usize]| v.iter().map(|&i| score[i]).collect::<Vec<f64>>();
                let (a, b) = (sc(&cand), sc(&cur));
                let cmp = a
                    .iter()
                    .zip(&b)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal);
                let mut cs = cand.clone();
                let mut us = cur.clone();
                cs.sort();
                us.sort();
                if cmp.is_gt() || (cmp.is_eq() && cs < us) {
                    cand
                } else {
                    cur
                }
            }
        });
    }
    best.unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_gradient_is_accurate() {
        for seed in [0, 7] {
            let r = gradcheck(&ToyShape::default(), seed).unwrap();
            assert_eq!(r.coordinates, 3 * 2 * 8);
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }

    #[test]
    fn selftest_passes() {
        for c in selftest(1).unwrap() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn brute_force_tie_rule() {
        let e = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(brute_force_topk(&e, 1), vec![0]);
        assert_eq!(brute_force_topk(&e, 3), vec![0, 1, 2]);
    }
}
