//! Image pairs: grayscale conversion, merging and same/different sampling.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{shape_err, Error, Result};
use crate::image::Image;
use crate::seed;

/// Luminance with ITU-R BT.601 weights. Single-channel input passes through.
pub fn to_grayscale(img: &Image) -> Result<Image> {
    match img.channels() {
        1 => Ok(img.clone()),
        3 => {
            let data = img
                .data()
                .chunks_exact(3)
                .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0))
                .collect();
            Image::gray(img.height(), img.width(), data)
        }
        c => Err(shape_err!("grayscale conversion needs 1 or 3 channels, got {c}")),
    }
}

/// How two images become one network input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MergeMode {
    /// Channel concatenation, `a` first.
    #[serde(rename = "stacked")]
    Stacked,
    /// Side by side, `a` on the left.
    #[serde(rename = "h-join")]
    HJoin,
    /// One above the other, `a` on top.
    #[serde(rename = "v-join")]
    VJoin,
}

impl MergeMode {
    pub fn name(self) -> &'static str {
        match self {
            MergeMode::Stacked => "stacked",
            MergeMode::HJoin => "h-join",
            MergeMode::VJoin => "v-join",
        }
    }

    /// Network input `[C, H, W]` for source images of shape `[H, W, C]`.
    pub fn input_shape(self, [h, w, c]: [usize; 3]) -> [usize; 3] {
        match self {
            MergeMode::Stacked => [2 * c, h, w],
            MergeMode::HJoin => [c, h, 2 * w],
            MergeMode::VJoin => [c, 2 * h, w],
        }
    }
}

impl fmt::Display for MergeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MergeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stacked" => Ok(MergeMode::Stacked),
            "h-join" => Ok(MergeMode::HJoin),
            "v-join" => Ok(MergeMode::VJoin),
            other => Err(Error::Config(format!(
                "unknown merge mode {other:?} (stacked, h-join, v-join)"
            ))),
        }
    }
}

/// A merged pair and the mode that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedImage {
    pub image: Image,
    pub mode: MergeMode,
}

/// Merges two equally shaped images.
///
/// Stacking accepts grayscale images and two-channel stereo images; color
/// input must be converted with [`to_grayscale`] first.
pub fn merge(a: &Image, b: &Image, mode: MergeMode) -> Result<MergedImage> {
    if a.shape() != b.shape() {
        return Err(shape_err!("cannot merge {:?} with {:?}", a.shape(), b.shape()));
    }
    let [h, w, c] = a.shape();
    let image = match mode {
        MergeMode::Stacked => {
            if c > 2 {
                return Err(shape_err!("stacking needs grayscale or stereo images, got {c} channels"));
            }
            Image::from_channels(&[a, b])?
        }
        MergeMode::HJoin => {
            let row = w * c;
            let mut data = Vec::with_capacity(2 * a.data().len());
            for y in 0..h {
                data.extend_from_slice(&a.data()[y * row..(y + 1) * row]);
                data.extend_from_slice(&b.data()[y * row..(y + 1) * row]);
            }
            Image::new(h, 2 * w, c, data)?
        }
        MergeMode::VJoin => {
            let mut data = a.data().to_vec();
            data.extend_from_slice(b.data());
            Image::new(2 * h, w, c, data)?
        }
    };
    Ok(MergedImage { image, mode })
}

/// Two dataset images and whether they show the same object (`label = 1`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PairSample {
    pub a: usize,
    pub b: usize,
    pub label: u8,
}

/// Draws `n_pairs` pairs of which `round(balance · n_pairs)` are same-class.
///
/// Same pairs pick a class with at least two images uniformly, then two
/// distinct images of it; different pairs pick two distinct classes, then
/// one image of each. The list is shuffled.
pub fn sample_pairs(dataset: &Dataset, n_pairs: usize, balance: f64, rng_seed: u64) -> Result<Vec<PairSample>> {
    if !(0.0..=1.0).contains(&balance) {
        return Err(Error::Config(format!("pair balance {balance} outside [0, 1]")));
    }
    let groups: Vec<Vec<usize>> = dataset.by_class().into_values().collect();
    sample_from_groups(&groups, n_pairs, balance, rng_seed)
}

/// [`sample_pairs`] restricted to the listed images. Indices stay global.
pub fn sample_pairs_within(
    dataset: &Dataset,
    indices: &[usize],
    n_pairs: usize,
    balance: f64,
    rng_seed: u64,
) -> Result<Vec<PairSample>> {
    if !(0.0..=1.0).contains(&balance) {
        return Err(Error::Config(format!("pair balance {balance} outside [0, 1]")));
    }
    let groups = group_indices(dataset, indices)?;
    sample_from_groups(&groups, n_pairs, balance, rng_seed)
}

fn group_indices(dataset: &Dataset, indices: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut map: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for &i in indices {
        if i >= dataset.len() {
            return Err(Error::Index(format!("image {i} outside 0..{}", dataset.len())));
        }
        map.entry(dataset.class_ids()[i]).or_default().push(i);
    }
    Ok(map.into_values().collect())
}

/// Pairs whose first image is a query and whose second comes from the
/// gallery. Same pairs need a gallery image of the query's class.
pub fn sample_query_pairs(
    dataset: &Dataset,
    queries: &[usize],
    gallery: &[usize],
    n_pairs: usize,
    balance: f64,
    rng_seed: u64,
) -> Result<Vec<PairSample>> {
    if !(0.0..=1.0).contains(&balance) {
        return Err(Error::Config(format!("pair balance {balance} outside [0, 1]")));
    }
    let n_same = (balance * n_pairs as f64).round() as usize;
    let n_diff = n_pairs - n_same;
    let gallery_groups = group_indices(dataset, gallery)?;
    let class_of = |i: usize| dataset.class_ids()[i];
    let matches = |q: usize, same: bool| -> Vec<usize> {
        gallery_groups
            .iter()
            .filter(|g| (class_of(g[0]) == class_of(q)) == same)
            .flatten()
            .copied()
            .filter(|&g| g != q)
            .collect()
    };
    let mut same_q = Vec::new();
    let mut diff_q = Vec::new();
    for &q in queries {
        if q >= dataset.len() {
            return Err(Error::Index(format!("image {q} outside 0..{}", dataset.len())));
        }
        let s = matches(q, true);
        if !s.is_empty() {
            same_q.push((q, s));
        }
        let d = matches(q, false);
        if !d.is_empty() {
            diff_q.push((q, d));
        }
    }
    if n_same > 0 && same_q.is_empty() {
        return Err(Error::Data("no query has a same-class gallery image".into()));
    }
    if n_diff > 0 && diff_q.is_empty() {
        return Err(Error::Data("no query has a different-class gallery image".into()));
    }
    let mut rng = seed::derived_rng(rng_seed, "query-pairs", 0);
    let mut pairs = Vec::with_capacity(n_pairs);
    for (count, pool, label) in [(n_same, &same_q, 1), (n_diff, &diff_q, 0)] {
        for _ in 0..count {
            let (q, cands) = &pool[rng.random_range(0..pool.len())];
            pairs.push(PairSample {
                a: *q,
                b: cands[rng.random_range(0..cands.len())],
                label,
            });
        }
    }
    pairs.shuffle(&mut rng);
    Ok(pairs)
}

fn sample_from_groups(groups: &[Vec<usize>], n_pairs: usize, balance: f64, rng_seed: u64) -> Result<Vec<PairSample>> {
    let n_same = (balance * n_pairs as f64).round() as usize;
    let n_diff = n_pairs - n_same;
    let multi: Vec<&Vec<usize>> = groups.iter().filter(|g| g.len() >= 2).collect();
    if n_same > 0 && multi.is_empty() {
        return Err(Error::Data("same pairs need a class with at least two images".into()));
    }
    if n_diff > 0 && groups.len() < 2 {
        return Err(Error::Data(format!(
            "different pairs need at least two classes, dataset has {}",
            groups.len()
        )));
    }
    let mut rng = seed::derived_rng(rng_seed, "pairs", 0);
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_same {
        let g = multi[rng.random_range(0..multi.len())];
        let i = rng.random_range(0..g.len());
        let mut j = rng.random_range(0..g.len() - 1);
        if j >= i {
            j += 1;
        }
        pairs.push(PairSample {
            a: g[i],
            b: g[j],
            label: 1,
        });
    }
    for _ in 0..n_diff {
        let ci = rng.random_range(0..groups.len());
        let mut cj = rng.random_range(0..groups.len() - 1);
        if cj >= ci {
            cj += 1;
        }
        let (gi, gj) = (&groups[ci], &groups[cj]);
        pairs.push(PairSample {
            a: gi[rng.random_range(0..gi.len())],
            b: gj[rng.random_range(0..gj.len())],
            label: 0,
        });
    }
    pairs.shuffle(&mut rng);
    Ok(pairs)
}

/// Every pair appended with its order-swapped counterpart.
pub fn with_swapped(pairs: &[PairSample]) -> Vec<PairSample> {
    pairs
        .iter()
        .flat_map(|p| [*p, PairSample { a: p.b, b: p.a, label: p.label }])
        .collect()
}

/// Partitions the dataset's classes into (training, held-out) lists, each
/// sorted. Held-out classes are drawn uniformly under the seed.
pub fn holdout_split(dataset: &Dataset, held_out_classes: usize, rng_seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut classes = dataset.classes();
    if held_out_classes >= classes.len() {
        return Err(Error::Config(format!(
            "cannot hold out {held_out_classes} of {} classes",
            classes.len()
        )));
    }
    classes.shuffle(&mut seed::derived_rng(rng_seed, "holdout", 0));
    let mut test = classes.split_off(classes.len() - held_out_classes);
    classes.sort_unstable();
    test.sort_unstable();
    Ok((classes, test))
}

/// Writes `origin_a\torigin_b\tlabel` lines.
pub fn write_pair_manifest(path: &Path, dataset: &Dataset, pairs: &[PairSample]) -> Result<()> {
    let mut out = Vec::new();
    for p in pairs {
        writeln!(out, "{}\t{}\t{}", dataset.origin(p.a), dataset.origin(p.b), p.label).expect("writing to a Vec");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// One manifest entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestPair {
    pub a: PathBuf,
    pub b: PathBuf,
    pub label: u8,
}

/// Reads a pair manifest; paths are resolved against the manifest directory
/// when relative.
pub fn read_pair_manifest(path: &Path) -> Result<Vec<ManifestPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [a, b, label] = fields[..] else {
            return Err(Error::Format(format!("{}:{}: expected 3 tab-separated fields", path.display(), n + 1)));
        };
        let label = match label.trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Format(format!("{}:{}: label {other:?} is not 0 or 1", path.display(), n + 1)))
            }
        };
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_relative() {
                base.join(p)
            } else {
                p
            }
        };
        out.push(ManifestPair {
            a: resolve(a),
            b: resolve(b),
            label,
        });
    }
    Ok(out)
}
