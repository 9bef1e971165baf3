use speechmt::model::{Model, ModelConfig};

fn main() -> speechmt::Result<()> {
    let model = Model::new(&ModelConfig::paper_speech(&["st"]), 0)?;
    for (name, n) in model.param_breakdown() {
        println!("{name:<32}{n:>12}");
    }
    println!("{:<32}{:>12}", "total", model.num_params());
    Ok(())
}
