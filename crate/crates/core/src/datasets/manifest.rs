//! Tab-separated sample manifests and fold assignment.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
    Val,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Test, Split::Val];

    /// Relative fold sizes (60/20/20), in [`Split::ALL`] order.
    pub const WEIGHTS: [usize; 3] = [3, 1, 1];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Val => "val",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "val" => Ok(Split::Val),
            other => Err(invalid!("unknown split {other:?} (expected train, test or val)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
    /// `None` until assigned by [`split_manifest`].
    pub split: Option<Split>,
    pub gsd_cm_per_px: Option<f64>,
}

impl SampleRecord {
    pub fn new(image: impl Into<PathBuf>, mask: Option<PathBuf>) -> Self {
        SampleRecord { image: image.into(), mask, split: None, gsd_cm_per_px: None }
    }
}

/// A parsed manifest. Relative paths resolve against `root`.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
}

fn dash_or<T>(field: &str, f: impl FnOnce(&str) -> Result<T>) -> Result<Option<T>> {
    if field == "-" {
        Ok(None)
    } else {
        f(field).map(Some)
    }
}

impl Manifest {
    /// Parse `image<TAB>mask<TAB>split[<TAB>gsd]` lines; `-` marks an absent
    /// field. Every line must parse.
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let err = |m: String| Error::Data(format!("manifest line {lineno}: {m}"));
            let fields: Vec<&str> = line.split('\t').collect();
            if !(3..=4).contains(&fields.len()) {
                return Err(err(format!("expected 3 or 4 tab-separated fields, found {}", fields.len())));
            }
            if fields[0].is_empty() || fields[0] == "-" {
                return Err(err("missing image path".into()));
            }
            let split = dash_or(fields[2], Split::from_str).map_err(|e| err(e.to_string()))?;
            let gsd = match fields.get(3) {
                Some(f) => dash_or(f, |s| {
                    s.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite() && *v > 0.0)
                        .ok_or_else(|| invalid!("bad ground sample distance {s:?}"))
                })
                .map_err(|e| err(e.to_string()))?,
                None => None,
            };
            let mask = dash_or(fields[1], |s| Ok(PathBuf::from(s)))?;
            records.push(SampleRecord { image: fields[0].into(), mask, split, gsd_cm_per_px: gsd });
        }
        Ok(Manifest { root: root.into(), records })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let mask = r.mask.as_ref().map_or("-".into(), |m| m.display().to_string());
            let split = r.split.map_or("-", Split::as_str);
            s.push_str(&format!("{}\t{mask}\t{split}", r.image.display()));
            if let Some(g) = r.gsd_cm_per_px {
                s.push_str(&format!("\t{g}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn fold(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == Some(split))
    }
}

/// Largest-remainder apportionment of `total` in proportion to integer
/// `weights`; ties go to the earlier entry.
pub fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    let mut counts: Vec<usize> = weights.iter().map(|w| total * w / sum).collect();
    let mut left = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(total * weights[i] % sum));
    for &i in &order {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Assign 60/20/20 train/test/val folds, stratified by `positive`.
///
/// Fold sizes are apportioned over all records, positives over the
/// positive records, and negatives fill the remainder of each fold.
pub fn split_manifest(records: &mut [SampleRecord], positive: &[bool], seed: u64) -> Result<()> {
    let n = records.len();
    if n < 5 {
        return Err(invalid!("need at least 5 records to split, got {n}"));
    }
    if positive.len() != n {
        return Err(invalid!("{} positivity flags for {n} records", positive.len()));
    }
    let sizes = apportion(n, &Split::WEIGHTS);
    let n_pos = positive.iter().filter(|&&p| p).count();
    let mut pos_quota = apportion(n_pos, &Split::WEIGHTS);
    // Rounding can push a fold's positive quota past its size; hand the
    // excess to a fold with room.
    while let Some(f) = (0..3).find(|&f| pos_quota[f] > sizes[f]) {
        let to = (0..3).find(|&o| pos_quota[o] < sizes[o]).expect("quotas sum to at most n");
        pos_quota[f] -= 1;
        pos_quota[to] += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<usize> = (0..n).filter(|&i| positive[i]).collect();
    let mut neg: Vec<usize> = (0..n).filter(|&i| !positive[i]).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let (mut pi, mut ni) = (pos.into_iter(), neg.into_iter());
    for (f, split) in Split::ALL.into_iter().enumerate() {
        for _ in 0..pos_quota[f] {
            records[pi.next().expect("positive quota")].split = Some(split);
        }
        for _ in 0..sizes[f] - pos_quota[f] {
            records[ni.next().expect("negative quota")].split = Some(split);
        }
    }
    Ok(())
}
