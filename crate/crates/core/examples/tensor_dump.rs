//! Writes a tensor in the RSVH dump format and reads it back.

use heatlens::rng::Xoshiro256pp;
use heatlens::tensor::{read_tensor, write_tensor};
use heatlens::{DType, Tensor};

fn main() -> heatlens::Result<()> {
    let mut rng = Xoshiro256pp::seed_from(5);
    for dtype in [DType::F64, DType::F32] {
        let t = Tensor::randn(&[2, 3, 4], 1.0, &mut rng).to_dtype(dtype);
        let mut bytes = Vec::new();
        write_tensor(&mut bytes, &t)?;
        let back = read_tensor(&mut bytes.as_slice())?;
        println!("{dtype}: {} bytes, identical = {}", bytes.len(), back == t);
    }
    Ok(())
}
