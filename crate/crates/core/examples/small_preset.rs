//! Trains every method on the small preset and prints the test reports.
//!
//! cargo run --release -p deeplde --example small_preset -- [seed]

use std::time::Instant;

use deeplde::oracle::solve_dataset;
use deeplde::problems::{generate_dataset, generate_instance, ObjectiveKind, SplitKind};
use deeplde::reporting::evaluate;
use deeplde::training::{train_deeplde, train_ldf, train_supervised, TrainConfig};

fn main() -> deeplde::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let instance = generate_instance(50, 30, 20, ObjectiveKind::Quadratic, seed)?;
    let data = generate_dataset(instance, 2400, seed + 1)?;
    let t = Instant::now();
    let labels = solve_dataset(&data)?;
    println!("oracle: {:.1}s", t.elapsed().as_secs_f64());
    let oracle_mean = labels.objective_mean(data.split.test.clone());
    let cfg = TrainConfig { hidden_width: 64, seed, ..TrainConfig::default() };
    let test = data.part(SplitKind::Test);

    let t = Instant::now();
    let (m, _) = train_deeplde(&data, &cfg)?;
    let r = evaluate(&data.instance, test, &m, "deeplde", Some(oracle_mean), seed)?.report;
    println!("deeplde {:.1}s {}", t.elapsed().as_secs_f64(), serde_json::to_string(&r).unwrap());

    let t = Instant::now();
    let (m, _) = train_ldf(&data, &cfg)?;
    let r = evaluate(&data.instance, test, &m, "ldf", Some(oracle_mean), seed)?.report;
    println!("ldf {:.1}s {}", t.elapsed().as_secs_f64(), serde_json::to_string(&r).unwrap());

    let t = Instant::now();
    let (m, _) = train_supervised(&data, &labels.y_star, &cfg)?;
    let r = evaluate(&data.instance, test, &m, "sl", Some(oracle_mean), seed)?.report;
    println!("sl {:.1}s {}", t.elapsed().as_secs_f64(), serde_json::to_string(&r).unwrap());
    Ok(())
}
