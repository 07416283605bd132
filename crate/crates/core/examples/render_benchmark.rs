//! Writes the synthetic benchmark to a directory: `render_benchmark <dir>`.

use promptkp_core::synth::{write_benchmark, BenchmarkConfig};

fn main() -> promptkp_core::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "benchmark".into());
    let ds = write_benchmark(std::path::Path::new(&dir), &BenchmarkConfig::default())?;
    println!("wrote {} instances to {dir}", ds.len());
    Ok(())
}
