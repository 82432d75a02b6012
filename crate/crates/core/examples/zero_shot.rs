// Scores the synthetic test sets with the hand-written template alone, no
// learned context, using the base-among-base and novel-among-novel protocol.

use msgcoop::encoder::FrozenEncoder;
use msgcoop::eval::{generate_dataset, zero_shot_baseline, EvalReport};
use msgcoop::trainer::TrainConfig;

pub fn run_example() -> msgcoop::Result<EvalReport> {
    let config = TrainConfig::desk();
    let encoder = FrozenEncoder::new(config.encoder_config())?;
    let dataset = generate_dataset(&config.dataset_spec(), &encoder)?;
    let report = zero_shot_baseline(&encoder, &dataset, &config.zero_shot_template, config.tau, 2)?;
    println!("{}", EvalReport::CSV_HEADER);
    println!("{}", report.csv_row(&config.zero_shot_template));
    println!("{}", report.to_json()?);
    Ok(report)
}

#[allow(dead_code)]
fn main() -> msgcoop::Result<()> {
    run_example().map(|_| ())
}
