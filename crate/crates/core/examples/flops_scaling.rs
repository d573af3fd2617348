//! Analytic flop counts of the heat and attention token mixers.

use heatlens::bench::{flops_csv, scaling_fit};

fn main() -> heatlens::Result<()> {
    let sides = [32, 64, 128, 256, 512, 1024];
    print!("{}", flops_csv(&sides, 16, 1));
    let fit = scaling_fit(&sides, 16)?;
    println!(
        "mixer exponent in N: heat {:.3}, attention {:.3}",
        fit.hco_exponent, fit.attention_exponent
    );
    println!(
        "block exponent in N: heat {:.3}, attention {:.3}",
        fit.hco_block_exponent, fit.attention_block_exponent
    );
    println!("heat block cheaper from side {:?}", fit.crossover_side);
    Ok(())
}
