//! Saves a freshly initialized model and lists what the checkpoint holds.
use mocgvq::checkpoint;
use mocgvq::config::TrainConfig;
use mocgvq::model::MocModel;

fn main() -> mocgvq::Result<()> {
    let model = MocModel::init(&TrainConfig::default(), 32)?;
    let path = std::env::temp_dir().join("mocgvq-example.ckpt");
    let bytes = checkpoint::save(&model, &path)?;
    let info = checkpoint::inspect(&bytes)?;
    println!("format v{} sha256 {}", info.format_version, info.sha256);
    println!("step {} seed {} input dim {}", info.step, info.seed, info.input_dim);
    for t in &info.tensors {
        println!("  {:<28} {:>4} x {:<4} {}", t.name, t.rows, t.cols, if t.trainable { "" } else { "(buffer)" });
    }
    println!("{} trainable values", info.num_trainable_values);
    assert_eq!(checkpoint::to_bytes(&checkpoint::load(&path)?), bytes);
    Ok(())
}
