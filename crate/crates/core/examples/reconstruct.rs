//! One forward pass of the desk model: output shapes and loss terms.

use heatlens::model::{Model, ModelConfig};
use heatlens::train::{TrainConfig, Trainer};
use heatlens::Tape;

fn main() -> heatlens::Result<()> {
    let cfg = ModelConfig::desk();
    let model = Model::new(cfg.clone())?;
    let params = model.init_params(0);
    println!("{} parameters in {} tensors", params.numel(), params.len());

    let item = Trainer::new(TrainConfig::default(), 0)?.batch(0)?.remove(0);
    let tape = Tape::inference(cfg.dtype);
    let p = params.bind(&tape);
    let out = model.forward(&p, &item)?;
    for (m, o) in &out.per {
        println!(
            "{}: low {:?} high {:?} spatial {:?}",
            m.name(),
            o.recon_low.shape(),
            o.recon_high.shape(),
            o.spatial.shape()
        );
    }
    let terms = model.loss(&p, &item)?;
    println!("{:?}", terms.breakdown());
    Ok(())
}
