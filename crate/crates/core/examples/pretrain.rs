//! Short pretraining run on synthetic optical/SAR pairs.
//!
//! `cargo run --release --example pretrain -- 50`

use std::time::Instant;

use heatlens::train::{TrainConfig, Trainer};

fn main() -> heatlens::Result<()> {
    let steps: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(20);
    let mut trainer = Trainer::new(TrainConfig::default(), 42)?;
    let start = Instant::now();
    for _ in 0..steps {
        let row = trainer.step()?;
        if row.step % 10 == 0 || row.step + 1 == steps {
            println!("{}", row.csv());
        }
    }
    let h = &trainer.state().history;
    println!(
        "initial {:.5} final {:.5} ratio {:.3} in {:.1?}",
        h[0].loss.total,
        h[h.len() - 1].loss.total,
        h[h.len() - 1].loss.total / h[0].loss.total,
        start.elapsed()
    );
    Ok(())
}
