// Central-difference check of the analytic context gradient on a toy problem
// (3 prompts, 4 classes, 2 context rows, d=8, h=16, e=16, batch 6).

use msgcoop::diagnostics::{gradcheck, ToyShape};
use msgcoop::numeric::GradCheck;

pub fn run_example() -> msgcoop::Result<GradCheck> {
    let shape = ToyShape::default();
    let result = gradcheck(&shape, 7)?;
    println!(
        "{} coordinates, max relative error {:.3e} at coordinate {}",
        result.coordinates, result.max_rel_error, result.worst_coordinate
    );
    Ok(result)
}

#[allow(dead_code)]
fn main() -> msgcoop::Result<()> {
    run_example().map(|_| ())
}
