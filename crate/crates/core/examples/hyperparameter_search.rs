//! Two-phase random search over layout and clustering parameters on a
//! stream with five planted groups. A reduced budget keeps it quick; the
//! defaults are 100 coarse trials and 30 fine trials per anchor.
//!
//!     cargo run --release --example hyperparameter_search

use dialogue_srl::corpus::StreamKey;
use dialogue_srl::synthetic::planted_stream;
use dialogue_srl::tuner::{run_search, write_trials_csv, SearchConfig};

fn main() -> dialogue_srl::Result<()> {
    let (matrix, _) = planted_stream(150, 5, 32, 0.35, 21);
    let mut config = SearchConfig { n_trials: 30, per_config: 10, ..SearchConfig::default() };
    config.space.master_seed = 4;
    let report = run_search(StreamKey::PostR, &matrix, &config)?;

    let best = report.best_trial();
    println!(
        "{} coarse + {} fine trials, anchors {:?}",
        report.coarse_count, report.fine_count, report.anchors
    );
    println!(
        "best trial {}: n_neighbors {}, min_dist {:.3}, n_components {}, metric {}, k {} (composite {:.3})",
        best.trial_id,
        best.params.umap.n_neighbors,
        best.params.umap.min_dist,
        best.params.umap.n_components,
        best.params.umap.metric.as_str(),
        best.params.kmeans.k,
        best.composite.unwrap_or(f64::NAN)
    );

    let mut csv = Vec::new();
    write_trials_csv(&report, &mut csv)?;
    let text = String::from_utf8_lossy(&csv);
    println!("\nfirst rows of the trial log:");
    for line in text.lines().take(4) {
        println!("{line}");
    }
    Ok(())
}
