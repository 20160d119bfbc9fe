//! Synthetic feature bags standing in for preprocessed slides, and the
//! on-disk dataset layout (`manifest.txt` plus one `slides/<id>.bag` per
//! slide).
//!
//! Each slide has `N` patches. At high resolution a patch expands into `k`
//! sub-patches with `d` features each (`U`, `N × k × d`); the low resolution
//! view `Z` (`N × d`) is the noisy mean of a patch's sub-patches, so tumour
//! evidence carried by a few sub-patches is diluted in `Z`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, Array3, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BAG_MAGIC: &[u8; 4] = b"PZBG";
pub const BAG_VERSION: u16 = 1;
pub const MANIFEST_VERSION: u32 = 1;

const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    /// Inclusive range of patches per slide.
    pub n_min: usize,
    pub n_max: usize,
    /// Sub-patches per patch.
    pub k: usize,
    /// Feature dimension.
    pub d: usize,
    /// Fraction of patches carrying tumour, for positive slides.
    pub tumor_fraction_min: f64,
    pub tumor_fraction_max: f64,
    /// Inclusive range of tumour sub-patches inside a tumour patch.
    pub tumor_subpatch_min: usize,
    pub tumor_subpatch_max: usize,
    /// Most tumour runs (contiguous index blocks) per positive slide.
    pub max_runs: usize,
    /// Distance between each tumour prototype and its normal counterpart.
    pub class_separation: f64,
    /// Noise added when deriving `Z` from `U`.
    pub low_res_blur: f64,
    /// Norm of a fixed offset separating the low-resolution feature space
    /// from the high-resolution one.
    pub low_res_shift: f64,
    /// Blend between the identity (0) and a fixed random rotation (1)
    /// applied to low-resolution features.
    pub low_res_rotation: f64,
    /// Per-sub-patch feature noise.
    pub noise_sigma: f64,
    /// Offset shared by all sub-patches of one patch.
    pub patch_sigma: f64,
    /// Offset shared by all patches of one region.
    pub region_sigma: f64,
    /// Inclusive length range of the contiguous normal-tissue regions.
    pub region_min: usize,
    pub region_max: usize,
    /// Number of tissue prototypes.
    pub tissue_types: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_min: 48,
            n_max: 96,
            k: 16,
            d: 32,
            tumor_fraction_min: 0.01,
            tumor_fraction_max: 0.04,
            tumor_subpatch_min: 2,
            tumor_subpatch_max: 4,
            max_runs: 2,
            class_separation: 12.0,
            low_res_blur: 0.2,
            low_res_shift: 0.0,
            low_res_rotation: 1.0,
            noise_sigma: 1.0,
            patch_sigma: 0.2,
            region_sigma: 0.4,
            region_min: 3,
            region_max: 10,
            tissue_types: 1,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::config("k", "must be at least 1"));
        }
        if self.d < 2 {
            return Err(Error::config("d", "must be at least 2"));
        }
        if self.n_min > self.n_max {
            return Err(Error::config("n_min", "exceeds n_max"));
        }
        if self.n_min < self.k {
            return Err(Error::config("n_min", "must be at least k"));
        }
        let fr = self.tumor_fraction_min..=self.tumor_fraction_max;
        if !(*fr.start() > 0.0 && *fr.end() <= 1.0 && fr.start() <= fr.end()) {
            return Err(Error::config(
                "tumor_fraction_range",
                "must be a nonempty interval inside (0, 1]",
            ));
        }
        if self.tumor_subpatch_min < 1
            || self.tumor_subpatch_min > self.tumor_subpatch_max
            || self.tumor_subpatch_max > self.k
        {
            return Err(Error::config(
                "tumor_subpatch_range",
                "must be a nonempty interval inside [1, k]",
            ));
        }
        if self.max_runs < 1 {
            return Err(Error::config("max_runs", "must be at least 1"));
        }
        if self.region_min < 1 || self.region_min > self.region_max {
            return Err(Error::config("region_range", "must be a nonempty interval of positive lengths"));
        }
        if self.tissue_types < 1 {
            return Err(Error::config("tissue_types", "must be at least 1"));
        }
        for (name, v) in [
            ("class_separation", self.class_separation),
            ("low_res_blur", self.low_res_blur),
            ("low_res_shift", self.low_res_shift),
            ("low_res_rotation", self.low_res_rotation),
            ("noise_sigma", self.noise_sigma),
            ("patch_sigma", self.patch_sigma),
            ("region_sigma", self.region_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be a nonnegative finite number"));
            }
        }
        Ok(())
    }

    /// Weaker features: the stand-in for swapping the pretrained extractor.
    pub fn degraded(&self) -> SyntheticConfig {
        SyntheticConfig {
            class_separation: self.class_separation * 0.5,
            noise_sigma: self.noise_sigma * 1.5,
            ..self.clone()
        }
    }

    /// `key=value` pairs in a fixed order, used for manifests and
    /// checkpoint config echoes.
    pub fn echo(&self) -> Vec<(String, String)> {
        vec![
            ("n_min".into(), self.n_min.to_string()),
            ("n_max".into(), self.n_max.to_string()),
            ("k".into(), self.k.to_string()),
            ("d".into(), self.d.to_string()),
            ("tumor_fraction_min".into(), format!("{:?}", self.tumor_fraction_min)),
            ("tumor_fraction_max".into(), format!("{:?}", self.tumor_fraction_max)),
            ("tumor_subpatch_min".into(), self.tumor_subpatch_min.to_string()),
            ("tumor_subpatch_max".into(), self.tumor_subpatch_max.to_string()),
            ("max_runs".into(), self.max_runs.to_string()),
            ("class_separation".into(), format!("{:?}", self.class_separation)),
            ("low_res_blur".into(), format!("{:?}", self.low_res_blur)),
            ("low_res_shift".into(), format!("{:?}", self.low_res_shift)),
            ("low_res_rotation".into(), format!("{:?}", self.low_res_rotation)),
            ("noise_sigma".into(), format!("{:?}", self.noise_sigma)),
            ("patch_sigma".into(), format!("{:?}", self.patch_sigma)),
            ("region_sigma".into(), format!("{:?}", self.region_sigma)),
            ("region_min".into(), self.region_min.to_string()),
            ("region_max".into(), self.region_max.to_string()),
            ("tissue_types".into(), self.tissue_types.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }
}

/// One synthetic slide.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBag {
    pub slide_id: String,
    /// Low-resolution features, `N × d`.
    pub z: Array2<f64>,
    /// High-resolution features, `N × k × d`.
    pub u: Array3<f64>,
    pub label: u8,
    pub tumor_mask: Vec<bool>,
    /// `N × k`.
    pub sub_tumor_mask: Array2<bool>,
}

impl FeatureBag {
    pub fn num_patches(&self) -> usize {
        self.z.nrows()
    }

    pub fn k(&self) -> usize {
        self.u.dim().1
    }

    pub fn d(&self) -> usize {
        self.z.ncols()
    }

    pub fn sub_patches(&self, patch: usize) -> ArrayView2<'_, f64> {
        self.u.slice(s![patch, .., ..])
    }

    pub fn tumor_count(&self) -> usize {
        self.tumor_mask.iter().filter(|t| **t).count()
    }

    /// Checks shapes, finiteness and the label/mask consistency rules.
    pub fn validate(&self) -> Result<()> {
        let (n, k, d) = self.u.dim();
        if self.z.dim() != (n, d) {
            return Err(Error::dim("low-resolution features", format!("{n}x{d}"), format!("{:?}", self.z.dim())));
        }
        if self.tumor_mask.len() != n || self.sub_tumor_mask.dim() != (n, k) {
            return Err(Error::Validation(format!("{}: mask shape mismatch", self.slide_id)));
        }
        if n == 0 || k == 0 {
            return Err(Error::EmptyInstances(self.slide_id.clone()));
        }
        if self.label > 1 {
            return Err(Error::Validation(format!("{}: label {} not binary", self.slide_id, self.label)));
        }
        if !self.z.iter().chain(self.u.iter()).all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("features of {}", self.slide_id)));
        }
        for (i, row) in self.sub_tumor_mask.rows().into_iter().enumerate() {
            if row.iter().any(|t| *t) != self.tumor_mask[i] {
                return Err(Error::Validation(format!(
                    "{}: tumor mask of patch {i} disagrees with its sub-patches",
                    self.slide_id
                )));
            }
        }
        let positive = self.tumor_mask.iter().any(|t| *t);
        if positive != (self.label == 1) {
            return Err(Error::Validation(format!(
                "{}: label {} inconsistent with tumor mask",
                self.slide_id, self.label
            )));
        }
        Ok(())
    }
}

/// Anything that can hand out feature bags by position; disk datasets and
/// in-memory collections both qualify, as would real extracted features.
pub trait FeatureSource {
    fn len(&self) -> usize;

    fn bag(&self, index: usize) -> Result<FeatureBag>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl FeatureSource for [FeatureBag] {
    fn len(&self) -> usize {
        <[FeatureBag]>::len(self)
    }

    fn bag(&self, index: usize) -> Result<FeatureBag> {
        self.get(index)
            .cloned()
            .ok_or_else(|| Error::Validation(format!("no bag at index {index}")))
    }
}

/// Class prototypes shared by every slide of one dataset.
#[derive(Debug, Clone)]
pub struct Prototypes {
    pub normal: Vec<Array1<f64>>,
    pub tumor: Vec<Array1<f64>>,
    pub low_res_offset: Array1<f64>,
    /// Linear map from high- to low-resolution feature space (`d × d`).
    pub low_res_map: Array2<f64>,
}

impl Prototypes {
    pub fn draw(config: &SyntheticConfig) -> Prototypes {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "prototypes"));
        let d = config.d;
        let gaussian = |rng: &mut ChaCha8Rng| -> Array1<f64> {
            Array1::from_shape_fn(d, |_| StandardNormal.sample(rng))
        };
        let normal: Vec<Array1<f64>> = (0..config.tissue_types).map(|_| gaussian(&mut rng)).collect();
        let tumor = normal
            .iter()
            .map(|proto| {
                let dir = gaussian(&mut rng);
                let unit = &dir / dir.dot(&dir).sqrt();
                proto + &(unit * config.class_separation)
            })
            .collect();
        let dir = gaussian(&mut rng);
        let low_res_offset = &dir / dir.dot(&dir).sqrt() * config.low_res_shift;
        let rotation = random_rotation(&mut rng, d);
        let rho = config.low_res_rotation;
        let low_res_map = Array2::eye(d) * (1.0 - rho) + rotation * rho;
        Prototypes {
            normal,
            tumor,
            low_res_offset,
            low_res_map,
        }
    }
}

/// Orthogonal matrix from Gram-Schmidt on a Gaussian matrix.
fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> Array2<f64> {
    let mut q = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        let mut v = Array1::from_shape_fn(d, |_| StandardNormal.sample(rng));
        for j in 0..i {
            let proj = v.dot(&q.row(j));
            v.scaled_add(-proj, &q.row(j));
        }
        let norm = v.dot(&v).sqrt();
        q.row_mut(i).assign(&(v / norm));
    }
    q
}

/// Stable 64-bit stream seed for a named sub-stream of a dataset seed.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn gaussian_row(rng: &mut ChaCha8Rng, d: usize, sigma: f64) -> Array1<f64> {
    if sigma == 0.0 {
        return Array1::zeros(d);
    }
    Array1::from_shape_fn(d, |_| {
        let x: f64 = StandardNormal.sample(rng);
        sigma * x
    })
}

/// Places `count` tumour patches as at most `max_runs` contiguous,
/// non-overlapping index runs. Returns the run id of every patch.
fn place_runs(rng: &mut ChaCha8Rng, n: usize, count: usize, max_runs: usize) -> Vec<Option<usize>> {
    let mut owner = vec![None; n];
    if count == 0 {
        return owner;
    }
    let runs = rng.gen_range(1..=max_runs.min(count));
    // split `count` into `runs` positive lengths
    let mut cuts: Vec<usize> = (1..count).collect();
    cuts.shuffle(rng);
    let mut cuts: Vec<usize> = cuts.into_iter().take(runs - 1).collect();
    cuts.sort_unstable();
    let mut lengths = Vec::with_capacity(runs);
    let mut prev = 0;
    for c in cuts.into_iter().chain(std::iter::once(count)) {
        lengths.push(c - prev);
        prev = c;
    }
    // distribute the free patches into runs + 1 gaps, at least one between runs
    let free = n - count;
    let mandatory = runs - 1;
    let (mut gaps, extra) = if free >= mandatory {
        let mut g = vec![0usize; runs + 1];
        for gap in g.iter_mut().take(runs).skip(1) {
            *gap = 1;
        }
        (g, free - mandatory)
    } else {
        (vec![0usize; runs + 1], free)
    };
    for _ in 0..extra {
        let slot = rng.gen_range(0..=runs);
        gaps[slot] += 1;
    }
    let mut pos = 0;
    for (r, len) in lengths.iter().enumerate() {
        pos += gaps[r];
        for slot in owner.iter_mut().skip(pos).take(*len) {
            *slot = Some(r);
        }
        pos += len;
    }
    owner
}

/// Generates one slide. Prototypes come from `config.seed`; everything
/// slide-specific comes from `rng_seed`.
pub fn generate_slide(config: &SyntheticConfig, label: u8, rng_seed: u64) -> Result<FeatureBag> {
    let protos = Prototypes::draw(config);
    generate_slide_with(config, &protos, label, rng_seed, format!("slide-{rng_seed:016x}"))
}

pub fn generate_slide_with(
    config: &SyntheticConfig,
    protos: &Prototypes,
    label: u8,
    rng_seed: u64,
    slide_id: String,
) -> Result<FeatureBag> {
    config.validate()?;
    if label > 1 {
        return Err(Error::config("label", "must be 0 or 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (k, d) = (config.k, config.d);
    let n = rng.gen_range(config.n_min..=config.n_max);

    let tumor_count = if label == 1 {
        let frac = if config.tumor_fraction_min == config.tumor_fraction_max {
            config.tumor_fraction_min
        } else {
            rng.gen_range(config.tumor_fraction_min..=config.tumor_fraction_max)
        };
        ((frac * n as f64).round() as usize).clamp(1, n)
    } else {
        0
    };
    let owner = place_runs(&mut rng, n, tumor_count, config.max_runs);

    let mut u = Array3::zeros((n, k, d));
    let mut z = Array2::zeros((n, d));
    let mut sub_mask = Array2::from_elem((n, k), false);
    // Each tumour run is one region; normal stretches are cut into regions
    // of random length. Patches of a region share tissue type and offset.
    let mut tissue = 0;
    let mut region_offset = Array1::zeros(d);
    let mut region_left = 0usize;
    for i in 0..n {
        if i == 0 || owner[i] != owner[i - 1] || (owner[i].is_none() && region_left == 0) {
            tissue = rng.gen_range(0..config.tissue_types);
            region_offset = gaussian_row(&mut rng, d, config.region_sigma);
            region_left = rng.gen_range(config.region_min..=config.region_max);
        }
        region_left = region_left.saturating_sub(1);
        let patch_offset = &region_offset + &gaussian_row(&mut rng, d, config.patch_sigma);
        if owner[i].is_some() {
            let m = rng.gen_range(config.tumor_subpatch_min..=config.tumor_subpatch_max);
            let mut slots: Vec<usize> = (0..k).collect();
            slots.shuffle(&mut rng);
            for &s in slots.iter().take(m) {
                sub_mask[[i, s]] = true;
            }
        }
        for s in 0..k {
            let mut row = &patch_offset + &gaussian_row(&mut rng, d, config.noise_sigma);
            if sub_mask[[i, s]] {
                row += &protos.tumor[tissue];
            } else {
                row += &protos.normal[tissue];
            }
            u.slice_mut(s![i, s, ..]).assign(&row);
        }
        let mean = u.slice(s![i, .., ..]).mean_axis(ndarray::Axis(0)).expect("k >= 1");
        let blurred = protos.low_res_map.dot(&mean) + &protos.low_res_offset + gaussian_row(&mut rng, d, config.low_res_blur);
        z.row_mut(i).assign(&blurred);
    }
    let tumor_mask = owner.iter().map(Option::is_some).collect();
    let bag = FeatureBag {
        slide_id,
        z,
        u,
        label,
        tumor_mask,
        sub_tumor_mask: sub_mask,
    };
    bag.validate()?;
    Ok(bag)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(*p >= 0.0)) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::config("split_fracs", "must be nonnegative and sum to 1"));
        }
        Ok(())
    }

    /// Largest-remainder apportionment of `count` items.
    fn apportion(&self, count: usize) -> [usize; 3] {
        let fr = [self.train, self.val, self.test];
        let exact: Vec<f64> = fr.iter().map(|f| f * count as f64).collect();
        let mut out = [0usize; 3];
        for i in 0..3 {
            out[i] = exact[i].floor() as usize;
        }
        let mut left = count - out.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|a, b| {
            let ra = exact[*a] - exact[*a].floor();
            let rb = exact[*b] - exact[*b].floor();
            rb.partial_cmp(&ra).expect("finite").then(a.cmp(b))
        });
        for i in order {
            if left == 0 {
                break;
            }
            out[i] += 1;
            left -= 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub slide_id: String,
    /// Relative to the dataset directory.
    pub path: PathBuf,
    pub label: u8,
    pub num_patches: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
    pub fractions: SplitFractions,
    pub config: SyntheticConfig,
}

impl DatasetManifest {
    pub fn split_entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "patchzoom-manifest {}", self.version).unwrap();
        for (k, v) in self.config.echo() {
            writeln!(out, "config {k} {v}").unwrap();
        }
        writeln!(
            out,
            "split_fracs {:?} {:?} {:?}",
            self.fractions.train, self.fractions.val, self.fractions.test
        )
        .unwrap();
        for e in &self.entries {
            writeln!(
                out,
                "slide {} {} {} {} {}",
                e.slide_id,
                e.path.display(),
                e.label,
                e.num_patches,
                e.split.as_str()
            )
            .unwrap();
        }
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<DatasetManifest> {
        let bad = |field: &str, reason: String| Error::Format {
            path: origin.to_path_buf(),
            field: field.to_string(),
            reason,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("header", "empty manifest".into()))?;
        let version = header
            .strip_prefix("patchzoom-manifest ")
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| bad("header", format!("unrecognised header {header:?}")))?;
        if version != MANIFEST_VERSION {
            return Err(bad("version", format!("unsupported version {version}")));
        }
        let mut config_pairs = BTreeMap::new();
        let mut fractions = None;
        let mut entries = Vec::new();
        for line in lines {
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                [] => {}
                ["config", key, value] => {
                    config_pairs.insert(key.to_string(), value.to_string());
                }
                ["split_fracs", a, b, c] => {
                    let p = |s: &str| s.parse::<f64>().map_err(|e| bad("split_fracs", e.to_string()));
                    fractions = Some(SplitFractions {
                        train: p(a)?,
                        val: p(b)?,
                        test: p(c)?,
                    });
                }
                ["slide", id, path, label, n, split] => {
                    entries.push(ManifestEntry {
                        slide_id: id.to_string(),
                        path: PathBuf::from(path),
                        label: label.parse().map_err(|_| bad("slide.label", line.into()))?,
                        num_patches: n.parse().map_err(|_| bad("slide.N", line.into()))?,
                        split: Split::parse(split).ok_or_else(|| bad("slide.split", line.into()))?,
                    });
                }
                _ => return Err(bad("line", format!("unrecognised line {line:?}"))),
            }
        }
        let config = config_from_pairs(&config_pairs).map_err(|e| bad("config", e))?;
        let fractions = fractions.ok_or_else(|| bad("split_fracs", "missing".into()))?;
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(&e.slide_id) {
                return Err(bad("slide", format!("duplicate slide id {}", e.slide_id)));
            }
        }
        Ok(DatasetManifest {
            version,
            entries,
            fractions,
            config,
        })
    }
}

fn config_from_pairs(pairs: &BTreeMap<String, String>) -> std::result::Result<SyntheticConfig, String> {
    let get = |k: &str| pairs.get(k).ok_or_else(|| format!("missing config key {k}"));
    let int = |k: &str| -> std::result::Result<usize, String> { get(k)?.parse().map_err(|e| format!("{k}: {e}")) };
    let real = |k: &str| -> std::result::Result<f64, String> { get(k)?.parse().map_err(|e| format!("{k}: {e}")) };
    Ok(SyntheticConfig {
        n_min: int("n_min")?,
        n_max: int("n_max")?,
        k: int("k")?,
        d: int("d")?,
        tumor_fraction_min: real("tumor_fraction_min")?,
        tumor_fraction_max: real("tumor_fraction_max")?,
        tumor_subpatch_min: int("tumor_subpatch_min")?,
        tumor_subpatch_max: int("tumor_subpatch_max")?,
        max_runs: int("max_runs")?,
        class_separation: real("class_separation")?,
        low_res_blur: real("low_res_blur")?,
        low_res_shift: real("low_res_shift")?,
        low_res_rotation: real("low_res_rotation")?,
        noise_sigma: real("noise_sigma")?,
        patch_sigma: real("patch_sigma")?,
        region_sigma: real("region_sigma")?,
        region_min: int("region_min")?,
        region_max: int("region_max")?,
        tissue_types: int("tissue_types")?,
        seed: get("seed")?.parse().map_err(|e| format!("seed: {e}"))?,
    })
}

/// Labels, ids and split assignment for a dataset, without any features.
pub fn plan_dataset(
    config: &SyntheticConfig,
    n_pos: usize,
    n_neg: usize,
    fractions: SplitFractions,
) -> Result<DatasetManifest> {
    config.validate()?;
    fractions.validate()?;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::config("counts", "need at least one slide of each class"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "split"));
    let total = n_pos + n_neg;
    let mut labels: Vec<u8> = std::iter::repeat(1).take(n_pos).chain(std::iter::repeat(0).take(n_neg)).collect();
    labels.shuffle(&mut rng);

    let mut split_of = vec![Split::Train; total];
    for class in [0u8, 1u8] {
        let mut members: Vec<usize> = (0..total).filter(|i| labels[*i] == class).collect();
        members.shuffle(&mut rng);
        let counts = fractions.apportion(members.len());
        let mut it = members.into_iter();
        for (split, count) in Split::ALL.iter().zip(counts) {
            for idx in it.by_ref().take(count) {
                split_of[idx] = *split;
            }
        }
    }
    for split in Split::ALL {
        if !split_of.iter().any(|s| *s == split) {
            let frac = match split {
                Split::Train => fractions.train,
                Split::Val => fractions.val,
                Split::Test => fractions.test,
            };
            if frac > 0.0 {
                return Err(Error::config(
                    "split_fracs",
                    format!("{} split would be empty", split.as_str()),
                ));
            }
        }
    }

    let entries = (0..total)
        .map(|i| {
            let slide_id = format!("slide_{i:04}");
            let mut rng = ChaCha8Rng::seed_from_u64(slide_seed(config.seed, &slide_id));
            let num_patches = rng.gen_range(config.n_min..=config.n_max);
            ManifestEntry {
                path: PathBuf::from("slides").join(format!("{slide_id}.bag")),
                slide_id,
                label: labels[i],
                num_patches,
                split: split_of[i],
            }
        })
        .collect();
    Ok(DatasetManifest {
        version: MANIFEST_VERSION,
        entries,
        fractions,
        config: config.clone(),
    })
}

pub fn slide_seed(dataset_seed: u64, slide_id: &str) -> u64 {
    derive_seed(dataset_seed, slide_id)
}

/// Generates every bag of a planned dataset in memory.
pub fn generate_bags(manifest: &DatasetManifest) -> Result<Vec<FeatureBag>> {
    let protos = Prototypes::draw(&manifest.config);
    manifest
        .entries
        .iter()
        .map(|e| {
            let bag = generate_slide_with(
                &manifest.config,
                &protos,
                e.label,
                slide_seed(manifest.config.seed, &e.slide_id),
                e.slide_id.clone(),
            )?;
            debug_assert_eq!(bag.num_patches(), e.num_patches);
            Ok(bag)
        })
        .collect()
}

/// Generates a stratified dataset and writes it under `out_dir`.
pub fn generate_dataset(
    config: &SyntheticConfig,
    n_pos: usize,
    n_neg: usize,
    fractions: SplitFractions,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let manifest = plan_dataset(config, n_pos, n_neg, fractions)?;
    let slides = out_dir.join("slides");
    fs::create_dir_all(&slides).map_err(|e| Error::io(&slides, e))?;
    for (entry, bag) in manifest.entries.iter().zip(generate_bags(&manifest)?) {
        save_bag(&bag, &out_dir.join(&entry.path))?;
    }
    let path = out_dir.join("manifest.txt");
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn encode_bag(bag: &FeatureBag) -> Vec<u8> {
    let (n, k, d) = bag.u.dim();
    let mut out = Vec::with_capacity(32 + bag.slide_id.len() + n * k + 8 * (n * d + n * k * d));
    out.extend_from_slice(BAG_MAGIC);
    out.extend_from_slice(&BAG_VERSION.to_le_bytes());
    out.push(DTYPE_F64);
    out.push(bag.label);
    for v in [n, k, d] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(bag.slide_id.len() as u16).to_le_bytes());
    out.extend_from_slice(bag.slide_id.as_bytes());
    out.extend(bag.sub_tumor_mask.iter().map(|t| *t as u8));
    for v in bag.z.iter().chain(bag.u.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn save_bag(bag: &FeatureBag, path: &Path) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode_bag(bag)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                field: field.to_string(),
                reason: format!("truncated: need {len} bytes at offset {}", self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().expect("2")))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4")))
    }

    fn reals(&mut self, count: usize, dtype: u8, field: &str) -> Result<Vec<f64>> {
        let width = if dtype == DTYPE_F64 { 8 } else { 4 };
        let raw = self.take(count * width, field)?;
        Ok(if dtype == DTYPE_F64 {
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
                .collect()
        } else {
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64)
                .collect()
        })
    }
}

pub fn decode_bag(bytes: &[u8], path: &Path) -> Result<FeatureBag> {
    let fmt = |field: &str, reason: String| Error::Format {
        path: path.to_path_buf(),
        field: field.to_string(),
        reason,
    };
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != BAG_MAGIC {
        return Err(fmt("magic", "not a feature bag file".into()));
    }
    let version = r.u16("version")?;
    if version != BAG_VERSION {
        return Err(fmt("version", format!("unsupported version {version}")));
    }
    let dtype = r.u8("dtype")?;
    if dtype != DTYPE_F64 && dtype != DTYPE_F32 {
        return Err(fmt("dtype", format!("unknown dtype code {dtype}")));
    }
    let label = r.u8("label")?;
    let n = r.u32("N")? as usize;
    let k = r.u32("k")? as usize;
    let d = r.u32("d")? as usize;
    let id_len = r.u16("slide_id")? as usize;
    let slide_id = String::from_utf8(r.take(id_len, "slide_id")?.to_vec())
        .map_err(|e| fmt("slide_id", e.to_string()))?;
    let mask_bytes = r.take(n * k, "sub_tumor_mask")?;
    if mask_bytes.iter().any(|b| *b > 1) {
        return Err(fmt("sub_tumor_mask", "mask bytes must be 0 or 1".into()));
    }
    let sub_tumor_mask = Array2::from_shape_vec((n, k), mask_bytes.iter().map(|b| *b == 1).collect())
        .map_err(|e| fmt("sub_tumor_mask", e.to_string()))?;
    let z = Array2::from_shape_vec((n, d), r.reals(n * d, dtype, "Z")?)
        .map_err(|e| fmt("Z", e.to_string()))?;
    let u = Array3::from_shape_vec((n, k, d), r.reals(n * k * d, dtype, "U")?)
        .map_err(|e| fmt("U", e.to_string()))?;
    if r.pos != bytes.len() {
        return Err(fmt("payload", format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let tumor_mask = sub_tumor_mask.rows().into_iter().map(|row| row.iter().any(|t| *t)).collect();
    let bag = FeatureBag {
        slide_id,
        z,
        u,
        label,
        tumor_mask,
        sub_tumor_mask,
    };
    bag.validate()?;
    Ok(bag)
}

pub fn load_bag(path: &Path) -> Result<FeatureBag> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bag(&bytes, path)
}

/// A dataset directory opened through its manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Dataset> {
        let path = root.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest: DatasetManifest::parse(&text, &path)?,
        })
    }

    /// Loads one entry, checking it against the manifest.
    pub fn load_entry(&self, entry: &ManifestEntry) -> Result<FeatureBag> {
        let bag = load_bag(&self.root.join(&entry.path))?;
        if bag.num_patches() != entry.num_patches {
            return Err(Error::Validation(format!(
                "{}: manifest says N={} but file holds N={}",
                entry.slide_id,
                entry.num_patches,
                bag.num_patches()
            )));
        }
        if bag.slide_id != entry.slide_id || bag.label != entry.label {
            return Err(Error::Validation(format!(
                "{}: file identity or label disagrees with manifest",
                entry.slide_id
            )));
        }
        Ok(bag)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<FeatureBag>> {
        self.manifest
            .split_entries(split)
            .map(|e| self.load_entry(e))
            .collect()
    }
}

impl FeatureSource for Dataset {
    fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    fn bag(&self, index: usize) -> Result<FeatureBag> {
        let entry = self
            .manifest
            .entries
            .get(index)
            .ok_or_else(|| Error::Validation(format!("no entry at index {index}")))?;
        self.load_entry(entry)
    }
}

/// Separation of tumour from normal features: distance between class means
/// divided by the pooled per-coordinate standard deviation.
pub fn separation(tumor: &[Array1<f64>], normal: &[Array1<f64>]) -> f64 {
    let mean = |rows: &[Array1<f64>]| {
        let mut m = Array1::zeros(rows[0].len());
        for r in rows {
            m += r;
        }
        m / rows.len() as f64
    };
    let mt = mean(tumor);
    let mn = mean(normal);
    let ss = |rows: &[Array1<f64>], m: &Array1<f64>| -> f64 {
        rows.iter().map(|r| (r - m).mapv(|v| v * v).sum()).sum()
    };
    let dof = (tumor.len() + normal.len()).saturating_sub(2).max(1) as f64 * mt.len() as f64;
    let pooled = ((ss(tumor, &mt) + ss(normal, &mn)) / dof).sqrt();
    let diff = &mt - &mn;
    diff.dot(&diff).sqrt() / pooled
}

/// (separation in `U` between tumour and normal sub-patches, separation in
/// `Z` between tumour and normal patches), pooled over the given slides.
/// `None` when either class is missing at either resolution.
pub fn resolution_separation(bags: &[&FeatureBag]) -> Option<(f64, f64)> {
    let mut hi_t = Vec::new();
    let mut hi_n = Vec::new();
    let mut lo_t = Vec::new();
    let mut lo_n = Vec::new();
    for bag in bags {
        let (n, k, _) = bag.u.dim();
        for i in 0..n {
            for s in 0..k {
                let row = bag.u.slice(s![i, s, ..]).to_owned();
                if bag.sub_tumor_mask[[i, s]] {
                    hi_t.push(row);
                } else {
                    hi_n.push(row);
                }
            }
            let row = bag.z.row(i).to_owned();
            if bag.tumor_mask[i] {
                lo_t.push(row);
            } else {
                lo_n.push(row);
            }
        }
    }
    if hi_t.is_empty() || lo_t.is_empty() || lo_n.is_empty() {
        return None;
    }
    Some((separation(&hi_t, &hi_n), separation(&lo_t, &lo_n)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            n_min: 8,
            n_max: 12,
            k: 4,
            d: 5,
            tumor_subpatch_min: 1,
            tumor_subpatch_max: 2,
            ..Default::default()
        }
    }

    #[test]
    fn negative_slide_has_no_tumour() {
        for seed in 0..5 {
            let bag = generate_slide(&small(), 0, seed).unwrap();
            assert_eq!(bag.label, 0);
            assert!(bag.tumor_mask.iter().all(|t| !t));
            assert!(bag.sub_tumor_mask.iter().all(|t| !t));
        }
    }

    #[test]
    fn full_tumour_fraction_marks_every_patch() {
        let cfg = SyntheticConfig {
            tumor_fraction_min: 1.0,
            tumor_fraction_max: 1.0,
            ..small()
        };
        let bag = generate_slide(&cfg, 1, 3).unwrap();
        assert!(bag.tumor_mask.iter().all(|t| *t));
    }

    #[test]
    fn noiseless_single_subpatch_gives_identical_resolutions() {
        let cfg = SyntheticConfig {
            k: 1,
            n_min: 4,
            n_max: 6,
            tumor_subpatch_min: 1,
            tumor_subpatch_max: 1,
            low_res_blur: 0.0,
            low_res_rotation: 0.0,
            noise_sigma: 0.0,
            ..small()
        };
        let bag = generate_slide(&cfg, 1, 9).unwrap();
        let squeezed = bag.u.index_axis(ndarray::Axis(1), 0);
        assert_eq!(bag.z, squeezed);
    }

    #[test]
    fn rotated_low_res_preserves_norms_and_angles() {
        let cfg = SyntheticConfig {
            k: 1,
            n_min: 4,
            n_max: 6,
            tumor_subpatch_min: 1,
            tumor_subpatch_max: 1,
            low_res_blur: 0.0,
            low_res_rotation: 1.0,
            noise_sigma: 0.0,
            ..small()
        };
        let bag = generate_slide(&cfg, 1, 9).unwrap();
        let u = bag.u.index_axis(ndarray::Axis(1), 0);
        assert_ne!(bag.z, u);
        for i in 0..bag.num_patches() {
            for j in 0..bag.num_patches() {
                let hi = u.row(i).dot(&u.row(j));
                let lo = bag.z.row(i).dot(&bag.z.row(j));
                assert!((hi - lo).abs() < 1e-9 * (1.0 + hi.abs()));
            }
        }
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let cases: Vec<(SyntheticConfig, &str)> = vec![
            (SyntheticConfig { k: 0, ..small() }, "k"),
            (SyntheticConfig { d: 1, ..small() }, "d"),
            (SyntheticConfig { n_min: 2, n_max: 3, ..small() }, "n_min"),
            (SyntheticConfig { tumor_fraction_min: 0.0, ..small() }, "tumor_fraction_range"),
            (SyntheticConfig { tumor_fraction_max: 1.5, ..small() }, "tumor_fraction_range"),
            (SyntheticConfig { noise_sigma: -1.0, ..small() }, "noise_sigma"),
        ];
        for (cfg, field) in cases {
            match generate_slide(&cfg, 1, 0) {
                Err(Error::Config { field: f, .. }) => assert_eq!(f, field),
                other => panic!("expected config error for {field}, got {other:?}"),
            }
        }
    }

    #[test]
    fn tumour_patches_form_contiguous_runs() {
        let cfg = SyntheticConfig {
            max_runs: 1,
            tumor_fraction_min: 0.3,
            tumor_fraction_max: 0.3,
            ..small()
        };
        for seed in 0..10 {
            let bag = generate_slide(&cfg, 1, seed).unwrap();
            let idx: Vec<usize> = (0..bag.num_patches()).filter(|i| bag.tumor_mask[*i]).collect();
            assert!(idx.windows(2).all(|w| w[1] == w[0] + 1), "{idx:?}");
        }
    }

    #[test]
    fn stratified_split_counts() {
        let m = plan_dataset(&small(), 10, 10, SplitFractions::default()).unwrap();
        let count = |s: Split, y: u8| m.split_entries(s).filter(|e| e.label == y).count();
        assert_eq!(m.split_entries(Split::Train).count(), 12);
        assert_eq!(m.split_entries(Split::Val).count(), 4);
        assert_eq!(m.split_entries(Split::Test).count(), 4);
        for s in Split::ALL {
            assert!(count(s, 0) > 0 && count(s, 1) > 0);
        }
    }

    #[test]
    fn class_balance_within_one_slide_per_split() {
        let m = plan_dataset(&small(), 100, 100, SplitFractions::default()).unwrap();
        for s in Split::ALL {
            let pos = m.split_entries(s).filter(|e| e.label == 1).count() as i64;
            let neg = m.split_entries(s).filter(|e| e.label == 0).count() as i64;
            assert!((pos - neg).abs() <= 1, "{s:?}: {pos} vs {neg}");
        }
    }

    #[test]
    fn empty_split_is_an_error() {
        let fr = SplitFractions {
            train: 0.9,
            val: 0.05,
            test: 0.05,
        };
        assert!(matches!(
            plan_dataset(&small(), 2, 2, fr),
            Err(Error::Config { .. })
        ));
        assert!(plan_dataset(&small(), 0, 2, SplitFractions::default()).is_err());
    }

    #[test]
    fn manifest_text_round_trips() {
        let m = plan_dataset(&small(), 4, 5, SplitFractions::default()).unwrap();
        let parsed = DatasetManifest::parse(&m.to_text(), Path::new("m")).unwrap();
        assert_eq!(parsed, m);
    }

    #[test]
    fn truncated_bag_is_a_format_error() {
        let bag = generate_slide(&small(), 1, 4).unwrap();
        let bytes = encode_bag(&bag);
        for cut in [3, 10, 30, bytes.len() - 1] {
            assert!(matches!(
                decode_bag(&bytes[..cut], Path::new("x.bag")),
                Err(Error::Format { .. })
            ));
        }
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        match decode_bag(&wrong_version, Path::new("x.bag")) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "version"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn default_config_dilutes_tumour_evidence_at_low_resolution() {
        let cfg = SyntheticConfig::default();
        let protos = Prototypes::draw(&cfg);
        let bags: Vec<FeatureBag> = (0..20u64)
            .map(|seed| generate_slide_with(&cfg, &protos, 1, seed, format!("s{seed}")).unwrap())
            .collect();
        let refs: Vec<&FeatureBag> = bags.iter().collect();
        let (hi, lo) = resolution_separation(&refs).unwrap();
        assert!(hi > lo, "pooled: U separation {hi} <= Z separation {lo}");
        // single slides with one or two tumour patches give noisy estimates
        let holds = bags
            .iter()
            .filter(|b| {
                let (hi, lo) = resolution_separation(&[*b]).unwrap();
                hi > lo
            })
            .count();
        assert!(holds >= 16, "only {holds}/20 slides separate better in U");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn masks_consistent_for_any_seed(seed in any::<u64>(), label in 0u8..2) {
            let bag = generate_slide(&small(), label, seed).unwrap();
            for i in 0..bag.num_patches() {
                let any = bag.sub_tumor_mask.row(i).iter().any(|t| *t);
                prop_assert_eq!(any, bag.tumor_mask[i]);
            }
            prop_assert_eq!(bag.tumor_mask.iter().any(|t| *t), label == 1);
            prop_assert!(bag.z.iter().all(|v| v.is_finite()));
        }

        #[test]
        fn encode_decode_is_exact(seed in any::<u64>(), label in 0u8..2) {
            let bag = generate_slide(&small(), label, seed).unwrap();
            let back = decode_bag(&encode_bag(&bag), Path::new("p")).unwrap();
            prop_assert_eq!(back, bag);
        }
    }
}
