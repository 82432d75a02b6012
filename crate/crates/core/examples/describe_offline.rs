// Collects descriptions for the synthetic classes from offline fixtures,
// keeps the four most mutually similar per class and builds the semantic
// reference embeddings used for guidance.

use msgcoop::descriptions::{fetch_all, DescriptionRequest, DescriptionSet, FixtureClient};
use msgcoop::encoder::FrozenEncoder;
use msgcoop::eval::{generate_dataset, SYNTHETIC_CATEGORY};
use msgcoop::trainer::TrainConfig;

pub fn run_example() -> msgcoop::Result<Vec<DescriptionSet>> {
    let config = TrainConfig::desk();
    let encoder = FrozenEncoder::new(config.encoder_config())?;
    let dataset = generate_dataset(&config.dataset_spec(), &encoder)?;

    let fixtures = dataset.description_fixtures(config.samples_per_template)?;
    let client = FixtureClient::new(&fixtures, config.samples_per_template);
    let requests: Vec<DescriptionRequest> = dataset
        .classes
        .iter()
        .map(|c| DescriptionRequest::new(&c.name, SYNTHETIC_CATEGORY, config.samples_per_template))
        .collect();
    let raw = fetch_all(&requests, &client, 4)?;

    let mut sets = Vec::new();
    for (req, raw) in requests.iter().zip(raw) {
        let record = msgcoop::descriptions::DescriptionRecord {
            class: req.class_name.clone(),
            category: req.category.clone(),
            raw,
            selected: vec![],
            mean_sims: vec![],
        };
        let set = DescriptionSet::build(&record, config.k, &encoder)?;
        println!("{}: kept {} of {}", set.class, set.selected.len(), set.raw.len());
        for s in &set.selected {
            println!("    {s}");
        }
        sets.push(set);
    }
    Ok(sets)
}

#[allow(dead_code)]
fn main() -> msgcoop::Result<()> {
    run_example().map(|_| ())
}
