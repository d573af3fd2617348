//! Spectral heat solution against explicit Euler stepping.

use heatlens::bench::oracle_discrepancy;
use heatlens::rng::Xoshiro256pp;
use heatlens::Tensor;

fn main() -> heatlens::Result<()> {
    let mut rng = Xoshiro256pp::seed_from(3);
    let u0 = Tensor::uniform(&[16, 16], 0.0, 1.0, &mut rng);
    let mut prev: Option<f64> = None;
    for dt in [4e-4, 2e-4, 1e-4, 5e-5, 2.5e-5] {
        let e = oracle_discrepancy(&u0, 0.5, 0.1, dt)?;
        match prev {
            Some(p) => println!("dt {dt:.1e}: rel L2 {e:.3e} (x{:.2} smaller)", p / e),
            None => println!("dt {dt:.1e}: rel L2 {e:.3e}"),
        }
        prev = Some(e);
    }
    Ok(())
}
