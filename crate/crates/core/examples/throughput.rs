//! Measured forward throughput of the heat encoder against global attention.
//!
//! `cargo run --release --example throughput -- 64 128 256`

use heatlens::bench::{throughput_scan, ScanConfig, THROUGHPUT_HEADER};
use heatlens::model::ModelConfig;

fn main() -> heatlens::Result<()> {
    let mut sides: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    if sides.is_empty() {
        sides = vec![64, 128];
    }
    let rows = throughput_scan(&sides, &ModelConfig::desk(), &ScanConfig::default(), 0)?;
    println!("{THROUGHPUT_HEADER}");
    for r in &rows {
        println!("{}", r.csv());
    }
    Ok(())
}
