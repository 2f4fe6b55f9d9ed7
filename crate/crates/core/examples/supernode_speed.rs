//! Times one forward+backward pass of the supernode kernels against the
//! per-tree reference loop.
//!
//! `cargo run --release --example supernode_speed -- [trees depth features batch]`

use softforest::oracle::{speed_comparison, BenchSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse()).collect::<Result<_, _>>()?;
    let mut spec = BenchSpec::default();
    if let [trees, depth, features, batch] = args[..] {
        spec = BenchSpec { trees, depth, features, batch, ..spec };
    }
    let r = speed_comparison(&spec)?;
    println!("m={} d={} p={} batch={}", spec.trees, spec.depth, spec.features, spec.batch);
    println!("supernode {:>8.3} ms", r.supernode.as_secs_f64() * 1e3);
    println!("per-tree  {:>8.3} ms", r.looped.as_secs_f64() * 1e3);
    println!("speedup   {:>8.2}x", r.speedup());
    println!("max |diff| {:.1e}", r.max_abs_diff);
    Ok(())
}
