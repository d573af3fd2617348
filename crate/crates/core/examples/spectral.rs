//! Orthonormal 2-D DCT on both transform paths.

use heatlens::rng::Xoshiro256pp;
use heatlens::spectral::{SpectralPlan, TransformPath};
use heatlens::Tensor;

fn main() -> heatlens::Result<()> {
    let mut rng = Xoshiro256pp::seed_from(1);
    for side in [8, 33, 128] {
        let x = Tensor::randn(&[1, side, side], 1.0, &mut rng);
        let dense = SpectralPlan::new(side, side, TransformPath::Matmul)?;
        let fast = SpectralPlan::new(side, side, TransformPath::Fft)?;
        let a = dense.dct2(&x)?;
        let b = fast.dct2(&x)?;
        let round_trip = dense.idct2(&a)?.max_abs_diff(&x);
        let energy = (a.norm_l2() - x.norm_l2()).abs() / x.norm_l2();
        println!(
            "side {side:4}: paths differ by {:.1e}, round trip {round_trip:.1e}, energy {energy:.1e}",
            a.max_abs_diff(&b)
        );
    }
    Ok(())
}
