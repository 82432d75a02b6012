// Trains for a few epochs, writes the checkpoint to disk, resumes it to the
// full epoch count and compares against an uninterrupted run.

use msgcoop::encoder::FrozenEncoder;
use msgcoop::eval::generate_dataset;
use msgcoop::trainer::{resume, train, Checkpoint, TrainConfig};

pub fn run_example() -> msgcoop::Result<bool> {
    let config = TrainConfig {
        epochs: 10,
        ..TrainConfig::desk()
    };
    let encoder = FrozenEncoder::new(config.encoder_config())?;
    let dataset = generate_dataset(&config.dataset_spec(), &encoder)?;
    let descriptions = dataset.description_fixtures(config.samples_per_template)?;

    let full = train(&config, &encoder, &dataset, &descriptions, 1)?;

    let dir = std::env::temp_dir().join(format!("msgcoop-resume-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| msgcoop::Error::Io { path: dir.clone(), source: e })?;
    let path = dir.join("half.json");
    let half = train(&TrainConfig { epochs: 5, ..config.clone() }, &encoder, &dataset, &descriptions, 1)?;
    half.save(&path)?;
    let resumed = resume(&Checkpoint::load(&path)?, &config, &encoder, &dataset, &descriptions, 1)?;
    let _ = std::fs::remove_dir_all(&dir);

    let identical = resumed.to_bytes()? == full.to_bytes()?;
    println!("5 + 5 epochs identical to 10 epochs: {identical}");
    print!("{}", resumed.metrics_csv());
    Ok(identical)
}

#[allow(dead_code)]
fn main() -> msgcoop::Result<()> {
    run_example().map(|_| ())
}
