// Sweeps the number of prompts on a shortened desk run and writes the CSV
// table and SVG chart to a temporary directory.

use msgcoop::encoder::FrozenEncoder;
use msgcoop::eval::generate_dataset;
use msgcoop::trainer::{ablate, AblationAxis, AblationTable, TrainConfig};

pub fn run_example() -> msgcoop::Result<AblationTable> {
    let config = TrainConfig {
        epochs: 10,
        ..TrainConfig::desk()
    };
    let encoder = FrozenEncoder::new(config.encoder_config())?;
    let dataset = generate_dataset(&config.dataset_spec(), &encoder)?;
    let descriptions = dataset.description_fixtures(config.samples_per_template)?;
    let values: Vec<String> = ["1", "2", "4"].iter().map(|s| s.to_string()).collect();

    let table = ablate(&config, AblationAxis::Prompts, &values, &encoder, &dataset, &descriptions, 1)?;
    print!("{}", table.to_csv());

    let dir = std::env::temp_dir();
    table.write_csv(&dir.join("msgcoop_ablation_N.csv"))?;
    table.write_svg(&dir.join("msgcoop_ablation_N.svg"))?;
    println!("wrote {}", dir.join("msgcoop_ablation_N.svg").display());
    Ok(table)
}

#[allow(dead_code)]
fn main() -> msgcoop::Result<()> {
    run_example().map(|_| ())
}
