// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
// criterion fails. Runs without the libtest harness so the lines always show.

use std::time::{Duration, Instant};

use msgcoop::descriptions::{filter_embeddings, filter_topk};
use msgcoop::diagnostics::{Toy, ToyShape};
use msgcoop::encoder::{EncoderConfig, FrozenEncoder};
use msgcoop::eval::{evaluate, generate_dataset, harmonic_mean, DatasetSpec, PrototypeMode, Split};
use msgcoop::objective::LossWeights;
use msgcoop::prompt::{self, ClassCatalog, ContextBank, LogitMatrix};
use msgcoop::rng::SplitMix64;
use msgcoop::trainer::{ablate, resume, train, AblationAxis, TrainConfig};

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn unit(rng: &mut SplitMix64, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.gaussian()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    (ab / (aa * bb).sqrt()).clamp(-1.0, 1.0)
}

// 1. Central differences against the analytic gradient on the toy problem.
fn gradient_correctness() -> Check {
    let start = Instant::now();
    let shape = ToyShape::default();
    let mut worst = 0.0f64;
    let mut coords = 0;
    for seed in [0u64, 1, 2] {
        let toy = Toy::new(&shape, seed).map_err(err)?;
        let analytic = toy.loss(&toy.bank, true).map_err(err)?.grad.unwrap();
        let x0 = toy.bank.as_slice().to_vec();
        let h = 1e-5;
        for (j, g) in analytic.as_slice().iter().enumerate() {
            let mut x = x0.clone();
            x[j] = x0[j] + h;
            let plus = toy.loss(&toy.bank.with_values(&x).map_err(err)?, false).map_err(err)?.l_total;
            x[j] = x0[j] - h;
            let minus = toy.loss(&toy.bank.with_values(&x).map_err(err)?, false).map_err(err)?.l_total;
            let fd = (plus - minus) / (2.0 * h);
            worst = worst.max((g - fd).abs() / fd.abs().max(1.0));
            coords += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure(
        worst < 1e-4 && coords == 3 * 3 * 2 * 8 && elapsed < Duration::from_secs(60),
        format!("max rel error {worst:.2e} over {coords} coordinates (3 seeds) in {elapsed:.2?}"),
    )
}

// 2. Bounds over 1000 random problems.
fn loss_bounds() -> Check {
    let mut rng = SplitMix64::new(2024);
    let mut violations = 0;
    for t in 0..1000u64 {
        let shape = ToyShape {
            prompts: 1 + rng.below(6) as usize,
            classes: 2 + rng.below(6) as usize,
            context_len: 1 + rng.below(4) as usize,
            batch: 1 + rng.below(8) as usize,
            ..ToyShape::default()
        };
        let mut toy = Toy::new(&shape, t).map_err(err)?;
        let std = [1e-3, 0.1, 1.0, 10.0][rng.below(4) as usize];
        toy.bank = ContextBank::random(shape.prompts, shape.context_len, shape.token_dim, std, t);
        let r = toy.loss(&toy.bank, false).map_err(err)?;
        if !(0.0..=1.0).contains(&r.l_div) || !(0.0..=2.0).contains(&r.l_sg) || r.l_ce < 0.0 {
            violations += 1;
        }
    }
    ensure(violations == 0, format!("{violations} violations in 1000 configurations"))
}

// 3. Reductions.
fn reductions() -> Check {
    let toy = Toy::new(&ToyShape { prompts: 1, ..ToyShape::default() }, 3).map_err(err)?;
    let soft = prompt::encode_all(&toy.bank, &toy.catalog, &toy.encoder).map_err(err)?;
    let mut bitwise = true;
    for img in &toy.batch.images {
        let ens = prompt::ensemble_logits(img, &soft, 30.0).map_err(err)?;
        for (i, s) in ens.iter().enumerate() {
            let single = 30.0 * msgcoop::numeric::cosine_sim(img, soft.soft(i, 0)).map_err(err)?;
            bitwise &= s.to_bits() == single.to_bits();
        }
    }

    let mut toy = Toy::new(&ToyShape::default(), 4).map_err(err)?;
    toy.weights = LossWeights::new(0.0, 0.0).map_err(err)?;
    let r = toy.loss(&toy.bank, false).map_err(err)?;
    let gap = (r.l_total - r.l_ce).abs();

    let mut collapsed_ok = true;
    for n in 2..=6 {
        let enc = FrozenEncoder::new(EncoderConfig::default()).map_err(err)?;
        let bank = ContextBank::from_templates(&enc, &["a photo of a".to_string()], n, 4, 0.0, 1)
            .map_err(err)?;
        let names: Vec<String> = ["tabby cat", "grey wolf", "red fox"].iter().map(|s| s.to_string()).collect();
        let catalog = ClassCatalog::new(&names, &enc).map_err(err)?;
        let soft = prompt::encode_all(&bank, &catalog, &enc).map_err(err)?;
        collapsed_ok &= msgcoop::objective::diversity(&soft).map_err(err)? == 1.0;
    }
    ensure(
        bitwise && gap <= 1e-12 && collapsed_ok,
        format!("N=1 bitwise {bitwise}; |l_total - l_ce| {gap:.1e}; collapsed l_div == 1 for N=2..6 {collapsed_ok}"),
    )
}

/// Exhaustive oracle: every k-subset, best by descending score vector, then
/// smallest index set; reported best first, lower index first on ties.
fn oracle_topk(embs: &[Vec<f64>], k: usize) -> Vec<usize> {
    let n = embs.len();
    let score: Vec<f64> = (0..n)
        .map(|i| {
            if n == 1 {
                return 0.0;
            }
            let mut s = 0.0;
            for j in 0..n {
                if j != i {
                    s += cos(&embs[i], &embs[j]);
                }
            }
            s / (n - 1) as f64
        })
        .collect();
    let mut best: Option<(Vec<f64>, Vec<usize>)> = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k.min(n) {
            continue;
        }
        let set: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        let mut ranked = set.clone();
        ranked.sort_by(|&a, &b| score[b].partial_cmp(&score[a]).unwrap().then(a.cmp(&b)));
        let key: Vec<f64> = ranked.iter().map(|&i| score[i]).collect();
        let better = match &best {
            None => true,
            Some((bk, bset)) => {
                let mut sorted_bset = bset.clone();
                sorted_bset.sort();
                key > *bk || (key == *bk && set < sorted_bset)
            }
        };
        if better {
            best = Some((key, ranked));
        }
    }
    best.map(|b| b.1).unwrap_or_default()
}

// 4. Filtering against the exhaustive oracle, with forced ties.
fn filtering_oracle() -> Check {
    let mut rng = SplitMix64::new(99);
    let mut mismatches = 0;
    let mut ties = 0;
    for _ in 0..200 {
        let big_k = 1 + rng.below(8) as usize;
        let k = 1 + rng.below(big_k as u64) as usize;
        let mut embs: Vec<Vec<f64>> = Vec::new();
        for _ in 0..big_k {
            if !embs.is_empty() && rng.below(3) == 0 {
                let j = rng.below(embs.len() as u64) as usize;
                embs.push(embs[j].clone());
                ties += 1;
            } else {
                embs.push(unit(&mut rng, 8));
            }
        }
        let got = filter_embeddings(&embs, k).map_err(err)?.indices;
        if got != oracle_topk(&embs, k) {
            mismatches += 1;
        }
    }

    let enc = FrozenEncoder::new(EncoderConfig::default()).map_err(err)?;
    let words = ["long", "floppy", "ears", "striped", "tail", "short", "fur", "white"];
    let mut text_mismatches = 0;
    for _ in 0..200 {
        let big_k = 1 + rng.below(8) as usize;
        let k = 1 + rng.below(big_k as u64) as usize;
        let raw: Vec<String> = (0..big_k)
            .map(|_| {
                (0..1 + rng.below(3))
                    .map(|_| words[rng.below(words.len() as u64) as usize])
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let embs: Vec<Vec<f64>> = raw.iter().map(|d| enc.encode_string(d).unwrap()).collect();
        let expected: Vec<String> = oracle_topk(&embs, k).into_iter().map(|i| raw[i].clone()).collect();
        if filter_topk(&raw, k, &enc).map_err(err)?.0 != expected {
            text_mismatches += 1;
        }
    }
    ensure(
        mismatches == 0 && text_mismatches == 0,
        format!(
            "{mismatches} mismatches on 200 embedding sets ({ties} duplicated items), {text_mismatches} on 200 description sets"
        ),
    )
}

// 5. Harmonic mean, published value 78.10.
fn harmonic_mean_arithmetic() -> Check {
    let hm = harmonic_mean(81.40, 75.05);
    let degenerate = harmonic_mean(0.0, 75.05) == 0.0 && harmonic_mean(81.40, 0.0) == 0.0;
    ensure(
        (hm - 78.10).abs() <= 0.005 && degenerate,
        format!("HM(81.40, 75.05) = {hm:.4}; HM(0, x) = 0: {degenerate}"),
    )
}

fn desk_setup(config: &TrainConfig) -> Result<(FrozenEncoder, msgcoop::eval::SyntheticDataset, Vec<msgcoop::descriptions::DescriptionRecord>), String> {
    let enc = FrozenEncoder::new(config.encoder_config()).map_err(err)?;
    let ds = generate_dataset(&config.dataset_spec(), &enc).map_err(err)?;
    let recs = ds.description_fixtures(config.samples_per_template).map_err(err)?;
    Ok((enc, ds, recs))
}

// 6. Frozen encoder, byte-identical reruns, exact resume.
fn frozen_and_deterministic() -> Check {
    let config = TrainConfig { epochs: 10, ..TrainConfig::desk() };
    let (enc, ds, recs) = desk_setup(&config)?;
    let dump = enc.dump_bytes();
    let a = train(&config, &enc, &ds, &recs, 1).map_err(err)?;
    let frozen = enc.dump_bytes() == dump
        && FrozenEncoder::new(config.encoder_config()).map_err(err)?.dump_bytes() == dump;

    let (enc2, ds2, recs2) = desk_setup(&config)?;
    let b = train(&config, &enc2, &ds2, &recs2, 3).map_err(err)?;
    let same_ckpt = a.to_bytes().map_err(err)? == b.to_bytes().map_err(err)?;
    let ra = evaluate(&a.bank, &enc, &ds, config.tau, 1).map_err(err)?.to_json().map_err(err)?;
    let rb = evaluate(&b.bank, &enc2, &ds2, config.tau, 2).map_err(err)?.to_json().map_err(err)?;
    let same_report = ra == rb;

    let five = train(&TrainConfig { epochs: 5, ..config.clone() }, &enc, &ds, &recs, 1).map_err(err)?;
    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("five.json");
    five.save(&path).map_err(err)?;
    let loaded = msgcoop::trainer::Checkpoint::load(&path).map_err(err)?;
    let resumed = resume(&loaded, &config, &enc, &ds, &recs, 1).map_err(err)?;
    let exact_resume = resumed.to_bytes().map_err(err)? == a.to_bytes().map_err(err)?;
    ensure(
        frozen && same_ckpt && same_report && exact_resume,
        format!(
            "encoder dump unchanged {frozen}; checkpoints identical {same_ckpt}; reports identical {same_report}; 5+5 == 10 {exact_resume}"
        ),
    )
}

// 7. Desk-scale run.
fn desk_training() -> Check {
    let start = Instant::now();
    let config = TrainConfig::desk();
    let (enc, ds, recs) = desk_setup(&config)?;
    let ck = train(&config, &enc, &ds, &recs, 1).map_err(err)?;
    let first = ck.history.first().unwrap().l_total;
    let last = ck.history.last().unwrap().l_total;
    let report = evaluate(&ck.bank, &enc, &ds, config.tau, 1).map_err(err)?;
    let elapsed = start.elapsed();
    ensure(
        last <= 0.5 * first && report.base >= 90.0 && elapsed < Duration::from_secs(300),
        format!(
            "l_total {first:.4} -> {last:.4} (ratio {:.3}); base {:.2}% novel {:.2}% HM {:.2}%; {elapsed:.2?}",
            last / first,
            report.base,
            report.novel,
            report.hm
        ),
    )
}

// 8. Ablation sweeps produce tables and charts.
fn ablation_harness() -> Check {
    let config = TrainConfig::desk();
    let (enc, ds, recs) = desk_setup(&config)?;
    let dir = tempfile::tempdir().map_err(err)?;
    let sweeps: [(AblationAxis, &[&str]); 3] = [
        (AblationAxis::Prompts, &["1", "2", "3", "4", "5", "6"]),
        (AblationAxis::LambdaDiv, &["0", "0.5", "1", "2", "4", "6", "8"]),
        (AblationAxis::Guidance, &["handcrafted", "llm-fixture", "none"]),
    ];
    let mut notes = Vec::new();
    let mut ok = true;
    for (axis, values) in sweeps {
        let values: Vec<String> = values.iter().map(|s| s.to_string()).collect();
        let table = ablate(&config, axis, &values, &enc, &ds, &recs, 1).map_err(err)?;
        let csv = dir.path().join(format!("ablation_{}.csv", axis.name()));
        let svg = dir.path().join(format!("ablation_{}.svg", axis.name()));
        table.write_csv(&csv).map_err(err)?;
        table.write_svg(&svg).map_err(err)?;
        ok &= csv.exists() && svg.exists() && table.rows.len() == values.len();
        if axis == AblationAxis::Prompts {
            ok &= table.rows[0].diversity_disabled && table.rows[1..].iter().all(|r| !r.diversity_disabled);
        }
        let hms: Vec<String> = table.rows.iter().map(|r| format!("{}:{:.1}", r.value, r.hm)).collect();
        notes.push(format!("{} HM [{}]", axis.name(), hms.join(" ")));
    }
    ensure(ok, format!("16 runs written, N=1 flagged disabled; {}", notes.join("; ")))
}

// 9. Predictions do not depend on the temperature.
fn argmax_invariance() -> Check {
    let mut rng = SplitMix64::new(77);
    let mut differing = 0;
    let mut compared = 0;
    for t in 0..100u64 {
        let enc = FrozenEncoder::new(EncoderConfig {
            vocab_size: 512,
            token_dim: 8,
            hidden_dim: 16,
            embed_dim: 16,
            feature_dim: 16,
            seed: t,
            identity_image: true,
        })
        .map_err(err)?;
        let spec = DatasetSpec {
            classes: 4 + 2 * rng.below(3) as usize,
            shots: 1,
            test_per_class: 5,
            sigma: 0.5,
            feature_dim: 16,
            seed: t,
            prototypes: PrototypeMode::Random,
            ..DatasetSpec::default()
        };
        let ds = generate_dataset(&spec, &enc).map_err(err)?;
        let bank = ContextBank::random(1 + rng.below(4) as usize, 2, 8, 0.5, t);
        let tau = 0.1 + 50.0 * rng.next_f64();
        for split in [Split::Base, Split::Novel] {
            let idx = ds.indices(split);
            let names: Vec<String> = idx.iter().map(|&i| ds.classes[i].name.clone()).collect();
            let catalog = ClassCatalog::new(&names, &enc).map_err(err)?;
            let soft = prompt::encode_all(&bank, &catalog, &enc).map_err(err)?;
            let images: Vec<Vec<f64>> = idx
                .iter()
                .flat_map(|&i| ds.classes[i].test.iter().map(|x| enc.encode_image(x).unwrap()))
                .collect();
            let a = LogitMatrix::compute(&images, &soft, tau).map_err(err)?;
            let b = LogitMatrix::compute(&images, &soft, 2.0 * tau).map_err(err)?;
            for r in 0..a.batch() {
                compared += 1;
                if prompt::predict(a.scores.row(r)) != prompt::predict(b.scores.row(r)) {
                    differing += 1;
                }
            }
        }
        let ea = evaluate(&bank, &enc, &ds, tau, 1).map_err(err)?;
        let eb = evaluate(&bank, &enc, &ds, 2.0 * tau, 1).map_err(err)?;
        if ea != eb {
            differing += 1;
        }
    }
    ensure(differing == 0, format!("{differing} differing predictions out of {compared} (100 instances)"))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 9] = [
        ("gradient correctness", gradient_correctness),
        ("loss bounds", loss_bounds),
        ("reductions", reductions),
        ("filtering oracle", filtering_oracle),
        ("harmonic mean arithmetic", harmonic_mean_arithmetic),
        ("frozen parameters and determinism", frozen_and_deterministic),
        ("desk-scale training sanity", desk_training),
        ("ablation harness", ablation_harness),
        ("argmax invariance", argmax_invariance),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
