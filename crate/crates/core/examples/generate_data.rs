//! Writes a small synthetic dataset to disk and reports how much tumour
//! evidence survives at low resolution.
//!
//!     cargo run --release --example generate_data -- /tmp/slides

use patchzoom::datagen::{generate_dataset, resolution_separation, Dataset, Split, SplitFractions, SyntheticConfig};

fn main() -> patchzoom::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/example-data".into());
    let cfg = SyntheticConfig { seed: 11, ..Default::default() };
    let manifest = generate_dataset(&cfg, 20, 20, SplitFractions::default(), out.as_ref())?;
    println!("{} slides in {out}", manifest.entries.len());
    for split in Split::ALL {
        let entries: Vec<_> = manifest.split_entries(split).collect();
        let pos = entries.iter().filter(|e| e.label == 1).count();
        println!("  {:5} {:3} slides ({pos} positive)", split.as_str(), entries.len());
    }

    let ds = Dataset::open(out.as_ref())?;
    let train = ds.load_split(Split::Train)?;
    let positives: Vec<_> = train.iter().filter(|b| b.label == 1).collect();
    for bag in positives.iter().take(3) {
        println!("  {}: N={} tumour patches={}", bag.slide_id, bag.num_patches(), bag.tumor_count());
    }
    if let Some((hi, lo)) = resolution_separation(&positives) {
        println!("class separation: high-res {hi:.2}, low-res {lo:.2}");
    }
    Ok(())
}
