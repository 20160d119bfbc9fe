//! Evaluation quantities: classification scores, calibration, compression,
//! tumour hit ratio and attention overlap, plus a paired rank test and the
//! tab-separated metric record format.

use std::fmt;
use std::str::FromStr;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    pub f1: f64,
}

fn check_pairs(probs: &[f64], labels: &[u8]) -> Result<()> {
    if probs.len() != labels.len() {
        return Err(Error::dim("labels", probs.len(), labels.len()));
    }
    if probs.is_empty() {
        return Err(Error::Validation("no predictions".into()));
    }
    Ok(())
}

pub fn accuracy(probs: &[f64], labels: &[u8]) -> Result<f64> {
    check_pairs(probs, labels)?;
    let correct = probs
        .iter()
        .zip(labels)
        .filter(|(p, y)| (**p >= 0.5) == (**y == 1))
        .count();
    Ok(correct as f64 / probs.len() as f64)
}

/// F1 of the positive class at threshold 0.5; zero when there are no true
/// positives.
pub fn f1_score(probs: &[f64], labels: &[u8]) -> Result<f64> {
    check_pairs(probs, labels)?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (p, y) in probs.iter().zip(labels) {
        match (*p >= 0.5, *y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fneg) as f64)
}

/// Area under the ROC curve as the Mann-Whitney statistic with midranks.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_pairs(scores, labels)?;
    let n_pos = labels.iter().filter(|y| **y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    let ranks = midranks(scores);
    let pos_rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, y)| **y == 1).map(|(r, _)| r).sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// 1-based ranks with ties sharing their average rank.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|a, b| values[*a].total_cmp(&values[*b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn classification_metrics(probs: &[f64], labels: &[u8]) -> Result<ClassificationMetrics> {
    Ok(ClassificationMetrics {
        accuracy: accuracy(probs, labels)?,
        auc: match auc(probs, labels) {
            Ok(a) => Some(a),
            Err(Error::UndefinedAuc) => None,
            Err(e) => return Err(e),
        },
        f1: f1_score(probs, labels)?,
    })
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(probs: &[f64], labels: &[u8]) -> Result<f64> {
    check_pairs(probs, labels)?;
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, y)| {
            let p = p.clamp(1e-7, 1.0 - 1e-7);
            if *y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / probs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationBin {
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub bins: Vec<CalibrationBin>,
    pub ece: f64,
}

/// Expected calibration error over `num_bins` equal-width confidence bins.
/// Confidence is the larger of the two class probabilities.
pub fn ece(probs: &[f64], labels: &[u8], num_bins: usize) -> Result<CalibrationReport> {
    check_pairs(probs, labels)?;
    if num_bins == 0 {
        return Err(Error::config("bins", "need at least one bin"));
    }
    let mut count = vec![0usize; num_bins];
    let mut correct = vec![0usize; num_bins];
    let mut conf_sum = vec![0.0; num_bins];
    for (p, y) in probs.iter().zip(labels) {
        let conf = p.max(1.0 - p);
        let bin = ((conf * num_bins as f64).floor() as usize).min(num_bins - 1);
        count[bin] += 1;
        conf_sum[bin] += conf;
        if (*p >= 0.5) == (*y == 1) {
            correct[bin] += 1;
        }
    }
    let n = probs.len() as f64;
    let mut ece = 0.0;
    let bins = (0..num_bins)
        .map(|b| {
            if count[b] == 0 {
                return CalibrationBin {
                    count: 0,
                    accuracy: 0.0,
                    confidence: 0.0,
                };
            }
            let c = count[b] as f64;
            let bin = CalibrationBin {
                count: count[b],
                accuracy: correct[b] as f64 / c,
                confidence: conf_sum[b] / c,
            };
            ece += c / n * (bin.accuracy - bin.confidence).abs();
            bin
        })
        .collect();
    Ok(CalibrationReport { bins, ece })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    FullResolution,
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompressibilityInputs {
    pub width: u64,
    pub height: u64,
    pub n: u64,
    pub k: u64,
    pub d: u64,
    pub kind: ModelKind,
}

/// Raw RGB pixel count over stored feature count.
pub fn compressibility(inputs: &CompressibilityInputs) -> Result<f64> {
    let CompressibilityInputs { width, height, n, k, d, kind } = *inputs;
    if [width, height, n, k, d].contains(&0) {
        return Err(Error::config("compressibility", "all sizes must be positive"));
    }
    let pixels = (width * height * 3) as f64;
    Ok(match kind {
        ModelKind::FullResolution => pixels / (n * k * d) as f64,
        ModelKind::Sequential => pixels / (n * d) as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HitRatioSeries {
    pub values: Vec<f64>,
    pub budget: usize,
    pub tumor_count: usize,
    /// Set when the slide has no tumour; the series is then all zeros.
    pub no_tumor: bool,
}

impl HitRatioSeries {
    pub fn terminal(&self) -> f64 {
        self.values.last().copied().unwrap_or(0.0)
    }
}

/// Cumulative number of tumour patches visited by each step, over
/// `min(budget, tumour count)`.
pub fn hit_ratio_series(actions: &[usize], tumor_mask: &[bool], budget: usize) -> Result<HitRatioSeries> {
    if actions.len() != budget {
        return Err(Error::dim("trace length", budget, actions.len()));
    }
    let tumor_count = tumor_mask.iter().filter(|t| **t).count();
    if tumor_count == 0 {
        return Ok(HitRatioSeries {
            values: vec![0.0; budget],
            budget,
            tumor_count,
            no_tumor: true,
        });
    }
    let denom = budget.min(tumor_count) as f64;
    let mut hits = 0usize;
    let mut values = Vec::with_capacity(budget);
    for &a in actions {
        if *tumor_mask
            .get(a)
            .ok_or_else(|| Error::Validation(format!("action {a} outside 0..{}", tumor_mask.len())))?
        {
            hits += 1;
        }
        values.push(hits as f64 / denom);
    }
    Ok(HitRatioSeries {
        values,
        budget,
        tumor_count,
        no_tumor: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionOverlap {
    pub overlap: f64,
    pub mean_attention: f64,
}

/// Overlap of the visited set with the `top_count` highest-attention
/// patches, and the mean attention of the visited patches.
pub fn attention_overlap(actions: &[usize], alpha: &[f64], top_count: usize) -> Result<AttentionOverlap> {
    let n = alpha.len();
    if top_count == 0 || top_count > n {
        return Err(Error::config("top_count", format!("{top_count} outside 1..={n}")));
    }
    if actions.is_empty() {
        return Err(Error::Validation("no actions".into()));
    }
    if let Some(a) = actions.iter().find(|a| **a >= n) {
        return Err(Error::Validation(format!("action {a} outside 0..{n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| alpha[*b].total_cmp(&alpha[*a]).then(a.cmp(b)));
    let top = &order[..top_count];
    let hits = actions.iter().filter(|a| top.contains(a)).count();
    let mean_attention = actions.iter().map(|a| alpha[*a]).sum::<f64>() / actions.len() as f64;
    Ok(AttentionOverlap {
        overlap: hits as f64 / top_count as f64,
        mean_attention,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankTest {
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    /// Nonzero differences used.
    pub n: usize,
    pub z: f64,
    pub p_value: f64,
}

/// Two-sided Wilcoxon signed-rank test of `a - b` using the normal
/// approximation with tie and continuity corrections. Zero differences are
/// dropped.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<RankTest> {
    if a.len() != b.len() {
        return Err(Error::dim("paired samples", a.len(), b.len()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(RankTest {
            w_plus: 0.0,
            n: 0,
            z: 0.0,
            p_value: 1.0,
        });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = midranks(&abs);
    let w_plus: f64 = ranks.iter().zip(&diffs).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return Ok(RankTest {
            w_plus,
            n,
            z: 0.0,
            p_value: 1.0,
        });
    }
    let dev = w_plus - mean;
    let corrected = (dev.abs() - 0.5).max(0.0) * dev.signum();
    let z = corrected / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p_value = (2.0 * (1.0 - normal.cdf(z.abs()))).min(1.0);
    Ok(RankTest { w_plus, n, z, p_value })
}

/// One line of the metric log: `name<TAB>value<TAB>cohort<TAB>seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub name: String,
    pub value: f64,
    pub cohort: String,
    pub seed: u64,
}

impl MetricRecord {
    pub fn new(name: impl Into<String>, value: f64, cohort: impl Into<String>, seed: u64) -> Self {
        MetricRecord {
            name: name.into(),
            value,
            cohort: cohort.into(),
            seed,
        }
    }
}

impl fmt::Display for MetricRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{:?}\t{}\t{}", self.name, self.value, self.cohort, self.seed)
    }
}

impl FromStr for MetricRecord {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |reason: String| Error::Format {
            path: "<metric record>".into(),
            field: "record".into(),
            reason,
        };
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 tab-separated fields, got {}", fields.len())));
        }
        if fields[0].is_empty() || fields[2].is_empty() {
            return Err(bad("empty name or cohort".into()));
        }
        Ok(MetricRecord {
            name: fields[0].to_string(),
            value: fields[1].parse().map_err(|e| bad(format!("value: {e}")))?,
            cohort: fields[2].to_string(),
            seed: fields[3].parse().map_err(|e| bad(format!("seed: {e}")))?,
        })
    }
}

pub fn parse_records(text: &str) -> Result<Vec<MetricRecord>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(str::parse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut total = 0.0;
        let mut pairs = 0.0;
        for (i, si) in scores.iter().enumerate() {
            for (j, sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    total += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        total / pairs
    }

    #[test]
    fn perfect_separation() {
        let m = classification_metrics(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(m, ClassificationMetrics { accuracy: 1.0, auc: Some(1.0), f1: 1.0 });
    }

    #[test]
    fn constant_scorer_has_chance_auc() {
        assert_eq!(auc(&[0.5; 6], &[1, 0, 1, 0, 1, 0]).unwrap(), 0.5);
    }

    #[test]
    fn six_sample_case_matches_pairwise_oracle() {
        let s = [0.1, 0.4, 0.35, 0.8, 0.4, 0.65];
        let y = [0, 0, 1, 1, 1, 0];
        assert_abs_diff_eq!(auc(&s, &y).unwrap(), pairwise_auc(&s, &y), epsilon = 1e-12);
    }

    #[test]
    fn single_class_auc_is_undefined() {
        assert!(matches!(auc(&[0.2, 0.7], &[1, 1]), Err(Error::UndefinedAuc)));
        let m = classification_metrics(&[0.2, 0.7], &[1, 1]).unwrap();
        assert_eq!(m.auc, None);
        assert_eq!(m.accuracy, 0.5);
    }

    #[test]
    fn auc_matches_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n = rng.gen_range(2..15);
            let mut y: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            y[0] = 0;
            y[1] = 1;
            // coarse grid so ties are common
            let s: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64 / 5.0).collect();
            assert!((auc(&s, &y).unwrap() - pairwise_auc(&s, &y)).abs() <= 1e-10);
        }
    }

    fn ece_oracle(p: &[f64], y: &[u8], m: usize) -> f64 {
        let n = p.len() as f64;
        let mut total = 0.0;
        for b in 0..m {
            let lo = b as f64 / m as f64;
            let hi = (b + 1) as f64 / m as f64;
            let members: Vec<usize> = (0..p.len())
                .filter(|&i| {
                    let c = p[i].max(1.0 - p[i]);
                    (c >= lo && c < hi) || (b == m - 1 && c == 1.0)
                })
                .collect();
            if members.is_empty() {
                continue;
            }
            let acc = members.iter().filter(|&&i| (p[i] >= 0.5) == (y[i] == 1)).count() as f64 / members.len() as f64;
            let conf = members.iter().map(|&i| p[i].max(1.0 - p[i])).sum::<f64>() / members.len() as f64;
            total += members.len() as f64 / n * (acc - conf).abs();
        }
        total
    }

    #[test]
    fn confident_correct_predictions_are_calibrated() {
        assert_eq!(ece(&[1.0, 0.0, 1.0], &[1, 0, 1], 10).unwrap().ece, 0.0);
    }

    #[test]
    fn four_predictions_hand_binned() {
        let p = [0.95, 0.3, 0.62, 0.55];
        let y = [1, 1, 0, 1];
        // confidences 0.95 (bin 9, right), 0.7 (bin 7, wrong), 0.62 (bin 6, wrong), 0.55 (bin 5, right)
        let expected = 0.25 * 0.05 + 0.25 * 0.7 + 0.25 * 0.62 + 0.25 * 0.45;
        let report = ece(&p, &y, 10).unwrap();
        assert_abs_diff_eq!(report.ece, expected, epsilon = 1e-15);
        assert_eq!(report.ece, ece_oracle(&p, &y, 10));
        assert_eq!(report.bins.iter().map(|b| b.count).sum::<usize>(), 4);
    }

    #[test]
    fn single_bin_collapses() {
        let p = [0.9, 0.2, 0.6, 0.45, 0.7];
        let y = [1, 1, 0, 0, 1];
        let acc = accuracy(&p, &y).unwrap();
        let conf = p.iter().map(|v: &f64| v.max(1.0 - v)).sum::<f64>() / 5.0;
        assert_abs_diff_eq!(ece(&p, &y, 1).unwrap().ece, (acc - conf).abs(), epsilon = 1e-15);
    }

    #[test]
    fn ece_matches_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let n = rng.gen_range(1..20);
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0..=20) as f64 / 20.0).collect();
            let y: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            let m = rng.gen_range(1..12);
            assert!((ece(&p, &y, m).unwrap().ece - ece_oracle(&p, &y, m)).abs() <= 1e-10);
        }
    }

    #[test]
    fn compressibility_ratio_is_k() {
        let mut inputs = CompressibilityInputs {
            width: 100_000,
            height: 80_000,
            n: 800,
            k: 16,
            d: 384,
            kind: ModelKind::FullResolution,
        };
        let full = compressibility(&inputs).unwrap();
        inputs.kind = ModelKind::Sequential;
        let seq = compressibility(&inputs).unwrap();
        assert_eq!(seq / full, 16.0);
        inputs.k = 1;
        let seq1 = compressibility(&inputs).unwrap();
        inputs.kind = ModelKind::FullResolution;
        assert_eq!(seq1, compressibility(&inputs).unwrap());
    }

    #[test]
    fn hit_ratio_cases() {
        let mask = [false, true, false, true, true, true, true, false, false, false, false, false];
        let none = hit_ratio_series(&[0, 2, 7], &mask, 3).unwrap();
        assert_eq!(none.values, vec![0.0; 3]);
        let all: Vec<usize> = (0..10).collect();
        let s = hit_ratio_series(&all, &mask, 10).unwrap();
        assert_eq!(s.terminal(), 1.0);
        let neg = hit_ratio_series(&[0, 1], &[false; 4], 2).unwrap();
        assert!(neg.no_tumor);
        assert_eq!(neg.values, vec![0.0, 0.0]);
    }

    #[test]
    fn hit_ratio_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.gen_range(3..30);
            let mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
            let budget = rng.gen_range(1..=n);
            let mut idx: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
            let actions = &idx[..budget];
            let s = hit_ratio_series(actions, &mask, budget).unwrap();
            let total = mask.iter().filter(|m| **m).count();
            for t in 0..budget {
                let hits = actions[..=t].iter().filter(|a| mask[**a]).count();
                let expected = if total == 0 { 0.0 } else { hits as f64 / budget.min(total) as f64 };
                assert!((s.values[t] - expected).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn attention_overlap_cases() {
        let alpha = [0.05, 0.4, 0.1, 0.3, 0.15];
        let o = attention_overlap(&[1, 3], &alpha, 2).unwrap();
        assert_eq!(o.overlap, 1.0);
        assert_abs_diff_eq!(o.mean_attention, 0.35, epsilon = 1e-15);
        let uniform = [0.25; 4];
        assert_eq!(attention_overlap(&[0, 2, 3], &uniform, 2).unwrap().mean_attention, 0.25);
        assert!(matches!(attention_overlap(&[0], &uniform, 5), Err(Error::Config { .. })));
    }

    #[test]
    fn attention_overlap_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let n = rng.gen_range(2..20);
            let alpha: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let top = rng.gen_range(1..=n);
            let acts: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.4)).collect();
            if acts.is_empty() {
                continue;
            }
            let o = attention_overlap(&acts, &alpha, top).unwrap();
            let hits = acts
                .iter()
                .filter(|&&a| alpha.iter().filter(|&&x| x > alpha[a]).count() < top)
                .count();
            assert_eq!(o.overlap, hits as f64 / top as f64);
        }
    }

    #[test]
    fn wilcoxon_detects_consistent_shift() {
        let a: Vec<f64> = (0..25).map(|i| i as f64 * 0.1 + 1.0).collect();
        let b: Vec<f64> = (0..25).map(|i| i as f64 * 0.1).collect();
        let t = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(t.w_plus, 325.0);
        assert!(t.p_value < 1e-4);
        let same = wilcoxon_signed_rank(&a, &a).unwrap();
        assert_eq!(same.p_value, 1.0);
    }

    #[test]
    fn wilcoxon_symmetric_sample_is_not_significant() {
        let a = [1.0, -1.0, 2.0, -2.0, 3.0, -3.0];
        let t = wilcoxon_signed_rank(&a, &[0.0; 6]).unwrap();
        assert!(t.p_value > 0.9);
    }

    #[test]
    fn records_round_trip() {
        let r = MetricRecord::new("accuracy", 0.9375, "test", 3);
        assert_eq!(r.to_string(), "accuracy\t0.9375\ttest\t3");
        assert_eq!(r.to_string().parse::<MetricRecord>().unwrap(), r);
        assert!("accuracy\t0.9".parse::<MetricRecord>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn ece_bounded_and_permutation_invariant(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..30);
            let p: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let y: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            let e = ece(&p, &y, 10).unwrap().ece;
            prop_assert!((0.0..=1.0).contains(&e));
            let rp: Vec<f64> = p.iter().rev().copied().collect();
            let ry: Vec<u8> = y.iter().rev().copied().collect();
            prop_assert!((ece(&rp, &ry, 10).unwrap().ece - e).abs() < 1e-12);
        }

        #[test]
        fn auc_invariant_under_monotone_transform(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(2..25);
            let mut y: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            y[0] = 1;
            y[1] = 0;
            let s: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64).collect();
            let t: Vec<f64> = s.iter().map(|v| (v * 0.5).exp() + 3.0).collect();
            prop_assert_eq!(auc(&s, &y).unwrap(), auc(&t, &y).unwrap());
        }

        #[test]
        fn hit_ratio_steps_are_unit_increments(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(2..40);
            let mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.2)).collect();
            let budget = rng.gen_range(1..=n);
            let actions: Vec<usize> = (0..budget).collect();
            let s = hit_ratio_series(&actions, &mask, budget).unwrap();
            let total = mask.iter().filter(|m| **m).count();
            let mut prev = 0.0;
            for v in &s.values {
                prop_assert!(*v >= prev && *v <= 1.0);
                if total > 0 {
                    let step = (v - prev) * budget.min(total) as f64;
                    prop_assert!(step.abs() < 1e-9 || (step - 1.0).abs() < 1e-9);
                }
                prev = *v;
            }
        }
    }
}
