// Trains the desk preset on the synthetic benchmark with offline
// descriptions and compares it against the zero-shot template baseline.

use msgcoop::encoder::FrozenEncoder;
use msgcoop::eval::{evaluate, generate_dataset, zero_shot_baseline, EvalReport};
use msgcoop::trainer::{train, TrainConfig};

pub fn run_example() -> msgcoop::Result<(f64, EvalReport)> {
    let config = TrainConfig::desk();
    let encoder = FrozenEncoder::new(config.encoder_config())?;
    let dataset = generate_dataset(&config.dataset_spec(), &encoder)?;
    let descriptions = dataset.description_fixtures(config.samples_per_template)?;

    let zero_shot = zero_shot_baseline(&encoder, &dataset, &config.zero_shot_template, config.tau, 1)?;
    println!("zero-shot   {}", zero_shot.csv_row("template"));

    let checkpoint = train(&config, &encoder, &dataset, &descriptions, 1)?;
    let first = checkpoint.history.first().expect("epochs >= 1");
    let last = checkpoint.history.last().expect("epochs >= 1");
    let ratio = last.l_total / first.l_total;
    println!(
        "l_total {:.4} -> {:.4} (ratio {ratio:.3}) over {} epochs",
        first.l_total, last.l_total, checkpoint.epoch
    );

    let report = evaluate(&checkpoint.bank, &encoder, &dataset, config.tau, 1)?;
    println!("trained     {}", report.csv_row("msgcoop"));
    Ok((ratio, report))
}

#[allow(dead_code)]
fn main() -> msgcoop::Result<()> {
    env_logger::init();
    run_example().map(|_| ())
}
