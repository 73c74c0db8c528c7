//! The inferential toolkit on small hand-made data: Spearman with
//! Benjamini-Hochberg, a median split with Mann-Whitney U, and Cohen's kappa.
//!
//!     cargo run --example srl_statistics

use std::collections::BTreeMap;

use dialogue_srl::analytics::{bh_fdr, cohen_kappa, mann_whitney_u, median_split, spearman, Group};

fn main() -> dialogue_srl::Result<()> {
    let alignment = [0.61, 0.55, 0.70, 0.48, 0.66, 0.52, 0.74, 0.45, 0.58, 0.69];
    let srl_total = [88.0, 75.0, 96.0, 70.0, 90.0, 79.0, 101.0, 64.0, 80.0, 85.0];
    let noise = [3.1, 2.2, 4.0, 3.3, 1.9, 2.8, 3.6, 2.5, 3.0, 2.1];

    let tests = [spearman(&alignment, &srl_total)?, spearman(&noise, &srl_total)?];
    let fdr = bh_fdr(&tests.iter().map(|t| t.p_raw).collect::<Vec<_>>(), 0.05)?;
    for (name, (t, (q, sig))) in ["alignment", "noise"].iter().zip(tests.iter().zip(fdr.p_adj.iter().zip(&fdr.reject))) {
        println!("{name:<10} rho {:+.3}  p {:.4}  p_adj {q:.4}  significant {sig}", t.rho, t.p_raw);
    }

    let totals: BTreeMap<String, f64> = srl_total.iter().enumerate().map(|(i, &t)| (format!("s{i}"), t)).collect();
    let split = median_split(&totals)?;
    let (mut high, mut low) = (Vec::new(), Vec::new());
    for (i, a) in alignment.iter().enumerate() {
        match split[&format!("s{i}")] {
            Group::High => high.push(*a),
            Group::Low => low.push(*a),
        }
    }
    let mw = mann_whitney_u(&high, &low)?;
    println!("\nhigh n = {}, low n = {}: U = {}, p = {:.4} ({:?})", high.len(), low.len(), mw.u, mw.p_raw, mw.method);

    let coder_a = ["proactive", "alert", "alert", "neutral", "proactive", "alert", "neutral", "proactive"];
    let coder_b = ["proactive", "alert", "neutral", "neutral", "proactive", "alert", "neutral", "alert"];
    println!("\ninter-coder kappa = {:.3}", cohen_kappa(&coder_a, &coder_b)?);
    Ok(())
}
