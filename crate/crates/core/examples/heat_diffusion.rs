//! Diffuses a point source and prints how the peak spreads over time.

use std::sync::Arc;

use heatlens::heat::hco_apply_tensor;
use heatlens::spectral::{SpectralPlan, TransformPath};
use heatlens::Tensor;

fn main() -> heatlens::Result<()> {
    let side = 32;
    let mut u0 = Tensor::zeros(&[1, side, side]);
    let mut data = u0.data().to_vec();
    data[(side / 2) * side + side / 2] = 1.0;
    u0 = Tensor::new(&[1, side, side], data)?;
    let plan = Arc::new(SpectralPlan::new(side, side, TransformPath::Matmul)?);
    println!("t      peak      mean      energy");
    for t in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0] {
        let u = hco_apply_tensor(&plan, &u0, 1.0, t)?;
        println!(
            "{t:<6} {:.6}  {:.6}  {:.6}",
            u.max_abs(),
            u.mean(),
            u.norm_l2()
        );
    }
    Ok(())
}
