//! Metric helpers on hand-made inputs: calibration bins, the paired rank
//! test and the storage cost of full versus sequential feature sets.

use patchzoom::metrics::{compressibility, ece, wilcoxon_signed_rank, CompressibilityInputs, ModelKind};

fn main() -> patchzoom::Result<()> {
    let probs = [0.95, 0.9, 0.8, 0.7, 0.6, 0.4, 0.3, 0.2, 0.1, 0.55];
    let labels = [1, 1, 1, 0, 1, 0, 0, 1, 0, 0];
    let report = ece(&probs, &labels, 5)?;
    for (i, b) in report.bins.iter().enumerate().filter(|(_, b)| b.count > 0) {
        println!("bin {i}: n={} accuracy {:.2} confidence {:.2}", b.count, b.accuracy, b.confidence);
    }
    println!("ece {:.4}", report.ece);

    let agent = [0.9, 0.8, 1.0, 0.7, 0.85, 0.95, 0.6, 0.9];
    let random = [0.3, 0.2, 0.4, 0.1, 0.35, 0.5, 0.2, 0.25];
    let t = wilcoxon_signed_rank(&agent, &random)?;
    println!("signed-rank W+={} n={} p={:.4}", t.w_plus, t.n, t.p_value);

    let slide = |kind| CompressibilityInputs { width: 100_000, height: 80_000, n: 2000, k: 16, d: 384, kind };
    let full = compressibility(&slide(ModelKind::FullResolution))?;
    let seq = compressibility(&slide(ModelKind::Sequential))?;
    println!("compressibility: full {full:.1}x, sequential {seq:.1}x, ratio {:.0}", seq / full);
    Ok(())
}
