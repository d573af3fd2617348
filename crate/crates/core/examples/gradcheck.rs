//! Central-difference gradient checks, plus a deliberately broken case.

use heatlens::gradcheck::{run_scope, Scope};

fn main() -> heatlens::Result<()> {
    for scope in [Scope::Ops, Scope::Block] {
        println!("{}", run_scope(scope, 0, None)?);
    }
    let broken = run_scope(Scope::Block, 0, Some("hco_block".into()))?;
    println!("with injected fault: passed = {}", broken.passed());
    Ok(())
}
