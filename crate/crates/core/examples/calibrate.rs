//! Prints baseline, unified and distribution-aware results per seed.
//!
//! `cargo run --release -p oodprompt-core --example calibrate -- [seeds] [key=value ...]`

use oodprompt::pipeline::{simulate, RunConfig};
use oodprompt::Scheme;

fn main() {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(5);
    let overrides: Vec<(String, String)> = args
        .filter_map(|a| {
            a.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
        })
        .collect();
    let base = RunConfig::from_value_with_overrides(
        serde_json::to_value(RunConfig::default()).unwrap(),
        &overrides,
    )
    .expect("valid overrides");

    println!("| seed | baseline AUROC | baseline FPR95 | unified AUROC | unified FPR95 | DA AUROC | DA FPR95 |");
    println!("|---:|---:|---:|---:|---:|---:|---:|");
    let mut sums = [0.0f64; 6];
    for seed in 0..seeds {
        let run = |scheme| {
            simulate(&RunConfig {
                seed,
                scheme,
                ..base.clone()
            })
            .expect("simulation runs")
        };
        let da = run(Scheme::DistributionAware);
        let uni = run(Scheme::Unified);
        let row = [
            da.baseline.mean_auroc,
            da.baseline.mean_fpr95,
            uni.trained.mean_auroc,
            uni.trained.mean_fpr95,
            da.trained.mean_auroc,
            da.trained.mean_fpr95,
        ];
        sums.iter_mut().zip(row).for_each(|(s, x)| *s += x);
        println!(
            "| {seed} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |",
            row[0], row[1], row[2], row[3], row[4], row[5]
        );
    }
    let n = seeds as f64;
    println!(
        "| mean | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |",
        sums[0] / n,
        sums[1] / n,
        sums[2] / n,
        sums[3] / n,
        sums[4] / n,
        sums[5] / n
    );
}
