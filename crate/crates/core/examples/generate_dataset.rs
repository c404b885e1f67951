//! Generates a small seeded dataset, writes it as JSONL and reads it back.
//!
//! Usage: `cargo run --example generate_dataset -- [out.jsonl]`

use std::path::PathBuf;

use pmp::dataset::{fingerprint, generate, read_dataset, write_dataset, DatasetSpec};

fn main() -> pmp::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("pmp_example.jsonl"));

    let spec = DatasetSpec::in_distribution(42, 8);
    let data = generate(&spec)?;
    write_dataset(&data, &out)?;
    let back = read_dataset(&out)?;
    assert_eq!(back, data);

    let first = &data[0];
    println!("wrote {} rollouts to {}", data.len(), out.display());
    println!("sha256 {}", fingerprint(&data)?);
    println!("rollout 0: initial array {:?}", first.initial_array);
    for (t, op) in first.ops.iter().enumerate() {
        println!("  step {}: {op:?}", t + 1);
    }

    // the same seed and index always give the same rollout
    assert_eq!(generate(&spec)?[3], data[3]);
    Ok(())
}
