//! Prints old-domain R@1 (image→text) per seed for pretrain, ct, modx and
//! joint on the default benchmark.
//!
//! Usage: `cargo run --release -p modx-core --example forgetting_oracle [seeds]`

use std::time::Instant;

use modx_core::experiment::{pretrain, run_continual, Benchmark, ExperimentConfig, Strategy, OLD_DOMAIN_NAME};

fn main() -> modx_core::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let started = Instant::now();
    println!("# image->text R@1 on the default benchmark; columns 1-4 old domain, 5-6 new domain");
    println!("# regenerate: cargo run --release -p modx-core --example forgetting_oracle > crates/cli/tests/data/forgetting_oracle.txt");
    println!("seed pretrain ct modx joint new_ct new_modx");
    for seed in 0..seeds {
        let base = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        let bench = Benchmark::generate(&base)?;
        let pre = pretrain(&base, &bench)?;
        let run = |strategy| {
            run_continual(
                &ExperimentConfig {
                    strategy,
                    ..base.clone()
                },
                &bench,
                Some(&pre),
            )
        };
        let ct = run(Strategy::Ct)?;
        let modx = run(Strategy::Modx)?;
        let joint = run(Strategy::Joint)?;
        let old = |r: &modx_core::experiment::PhaseRecord| r.r1(OLD_DOMAIN_NAME).map_or(f64::NAN, |x| x.0);
        let new = |r: &modx_core::experiment::PhaseRecord| r.r1("new").map_or(f64::NAN, |x| x.0);
        println!(
            "{seed} {:.4} {:.4} {:.4} {:.4} {:.4} {:.4}",
            old(&ct.records[0]),
            old(ct.last()),
            old(modx.last()),
            old(joint.last()),
            new(ct.last()),
            new(modx.last()),
        );
    }
    eprintln!("elapsed {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}
