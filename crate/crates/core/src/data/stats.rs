//! Split assignment and per-split dataset statistics.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::annotations::{AnnotationSet, FLIR_CLASSES};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Validation,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Test, Split::Validation];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Validation => "validation",
        }
    }
}

/// Default proportions for generated splits.
pub const DEFAULT_SPLIT_FRACTIONS: [f64; 3] = [0.70, 0.23, 0.07];

/// Published picture and instance counts of the nine-class thermal subset,
/// in [`Split::ALL`] order.
pub const REFERENCE_COUNTS: [(usize, usize); 3] = [(10_474, 167_640), (3_493, 60_515), (1_127, 16_463)];

/// Image ids per split.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<u64>,
    pub test: Vec<u64>,
    pub validation: Vec<u64>,
}

impl SplitAssignment {
    pub fn ids(&self, split: Split) -> &[u64] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
            Split::Validation => &self.validation,
        }
    }

    pub fn ids_mut(&mut self, split: Split) -> &mut Vec<u64> {
        match split {
            Split::Train => &mut self.train,
            Split::Test => &mut self.test,
            Split::Validation => &mut self.validation,
        }
    }

    /// Every id in one split only.
    pub fn single(split: Split, ids: Vec<u64>) -> Self {
        let mut s = SplitAssignment::default();
        *s.ids_mut(split) = ids;
        s
    }

    /// Split of each image; overlaps and unknown ids are errors.
    pub fn index(&self, set: &AnnotationSet) -> Result<HashMap<u64, Split>> {
        let mut out = HashMap::new();
        let mut overlap = Vec::new();
        for split in Split::ALL {
            for &id in self.ids(split) {
                if let Some(prev) = out.insert(id, split) {
                    overlap.push(format!("{id} ({} and {})", prev.name(), split.name()));
                }
            }
        }
        if !overlap.is_empty() {
            overlap.truncate(10);
            return Err(Error::validation(format!(
                "images assigned to more than one split: {}",
                overlap.join(", ")
            )));
        }
        let known: std::collections::HashSet<u64> = set.images.iter().map(|i| i.id).collect();
        let mut unknown: Vec<u64> = out.keys().filter(|id| !known.contains(id)).copied().collect();
        unknown.sort_unstable();
        if !unknown.is_empty() {
            unknown.truncate(10);
            return Err(Error::validation(format!("split lists unknown image ids: {unknown:?}")));
        }
        let mut missing: Vec<u64> = known.iter().filter(|id| !out.contains_key(id)).copied().collect();
        missing.sort_unstable();
        if !missing.is_empty() {
            missing.truncate(10);
            return Err(Error::validation(format!("images without a split: {missing:?}")));
        }
        Ok(out)
    }
}

/// Largest-remainder apportionment of `n` items to `fractions`.
pub fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let total: f64 = fractions.iter().sum();
    let exact: Vec<f64> = fractions.iter().map(|f| f / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let short = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle().take(short) {
        counts[i] += 1;
    }
    counts
}

/// Seeded shuffle of the image ids into train, test and validation.
pub fn random_split(set: &AnnotationSet, seed: u64, fractions: [f64; 3]) -> SplitAssignment {
    let mut ids: Vec<u64> = set.images.iter().map(|i| i.id).collect();
    ids.sort_unstable();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let counts = apportion(ids.len(), &fractions);
    let mut out = SplitAssignment::default();
    let mut it = ids.into_iter();
    for (split, n) in Split::ALL.into_iter().zip(counts) {
        let mut part: Vec<u64> = it.by_ref().take(n).collect();
        part.sort_unstable();
        *out.ids_mut(split) = part;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRow {
    pub split: Split,
    pub pictures: usize,
    /// Pictures with at least one active-class instance.
    pub pictures_with_instances: usize,
    pub instances: usize,
    pub picture_pct: f64,
    pub instance_pct: f64,
    /// Instances per active class.
    pub class_histogram: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub class_names: Vec<String>,
    pub rows: Vec<SplitRow>,
    pub total_pictures: usize,
    pub total_instances: usize,
    /// Instances outside the active classes; not counted in the rows.
    pub flagged_instances: usize,
    /// Differences from the published nine-class counts; empty when they
    /// match or when the class list is not the nine thermal classes. A split
    /// matches when either picture count equals the published one.
    pub discrepancies: Vec<String>,
}

fn pct(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        100.0 * part as f64 / whole as f64
    }
}

/// Counts pictures and active-class instances per split.
pub fn dataset_stats(set: &AnnotationSet, splits: &SplitAssignment) -> Result<DatasetStats> {
    let index = splits.index(set)?;
    let m = set.class_names.len();
    let mut pictures = [0usize; 3];
    let mut hist = vec![vec![0usize; m]; 3];
    let slot = |s: Split| Split::ALL.iter().position(|&x| x == s).unwrap();
    for img in &set.images {
        pictures[slot(index[&img.id])] += 1;
    }
    let mut positive = std::collections::HashSet::new();
    for a in &set.instances {
        if let Some(c) = a.class_id {
            hist[slot(index[&a.image_id])][c] += 1;
            positive.insert(a.image_id);
        }
    }
    let mut with_instances = [0usize; 3];
    for id in &positive {
        with_instances[slot(index[id])] += 1;
    }
    let instances: Vec<usize> = hist.iter().map(|h| h.iter().sum()).collect();
    let total_pictures: usize = pictures.iter().sum();
    let total_instances: usize = instances.iter().sum();
    let rows: Vec<SplitRow> = Split::ALL
        .iter()
        .enumerate()
        .map(|(k, &split)| SplitRow {
            split,
            pictures: pictures[k],
            pictures_with_instances: with_instances[k],
            instances: instances[k],
            picture_pct: pct(pictures[k], total_pictures),
            instance_pct: pct(instances[k], total_instances),
            class_histogram: hist[k].clone(),
        })
        .collect();
    let mut discrepancies = Vec::new();
    if set.class_names.iter().map(String::as_str).eq(FLIR_CLASSES) {
        for (row, &(p, i)) in rows.iter().zip(&REFERENCE_COUNTS) {
            let pictures_ok = row.pictures == p || row.pictures_with_instances == p;
            if !pictures_ok || row.instances != i {
                discrepancies.push(format!(
                    "{}: {} pictures ({} with instances) / {} instances, published {p} / {i}",
                    row.split.name(),
                    row.pictures,
                    row.pictures_with_instances,
                    row.instances
                ));
            }
        }
    }
    Ok(DatasetStats {
        class_names: set.class_names.clone(),
        rows,
        total_pictures,
        total_instances,
        flagged_instances: set.flagged(),
        discrepancies,
    })
}

impl DatasetStats {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:>10} {:>9} {:>11} {:>9} {:>14}",
            "Split", "Pictures", "%", "Instances", "%", "with objects"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<12} {:>10} {:>8.2}% {:>11} {:>8.2}% {:>14}",
                r.split.name(),
                r.pictures,
                r.picture_pct,
                r.instances,
                r.instance_pct,
                r.pictures_with_instances
            );
        }
        let _ = writeln!(out, "{:<12} {:>10} {:>9} {:>11}", "total", self.total_pictures, "", self.total_instances);
        let _ = writeln!(out);
        let width = self.class_names.iter().map(String::len).max().unwrap_or(5).max(5);
        let _ = write!(out, "{:<width$}", "Class");
        for s in Split::ALL {
            let _ = write!(out, " {:>11}", s.name());
        }
        let _ = writeln!(out, " {:>11}", "total");
        for (c, name) in self.class_names.iter().enumerate() {
            let _ = write!(out, "{name:<width$}");
            let mut total = 0;
            for r in &self.rows {
                total += r.class_histogram[c];
                let _ = write!(out, " {:>11}", r.class_histogram[c]);
            }
            let _ = writeln!(out, " {total:>11}");
        }
        if self.flagged_instances > 0 {
            let _ = writeln!(out, "{} instances outside the active classes", self.flagged_instances);
        }
        for d in &self.discrepancies {
            let _ = writeln!(out, "differs from published counts: {d}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::annotations::{Category, GroundTruthInstance, ImageInfo};

    fn set(n_images: u64) -> AnnotationSet {
        AnnotationSet {
            images: (0..n_images)
                .map(|id| ImageInfo {
                    id,
                    file_name: format!("{id}.pgm"),
                    width: 64,
                    height: 64,
                })
                .collect(),
            instances: (0..n_images)
                .map(|id| GroundTruthInstance {
                    id,
                    image_id: id,
                    category_id: 1,
                    class_id: Some(0),
                    xywh: [1.0, 1.0, 4.0, 4.0],
                })
                .collect(),
            categories: vec![Category {
                id: 1,
                name: "person".into(),
            }],
            class_names: vec!["person".into()],
        }
    }

    #[test]
    fn single_split_is_one_hundred_percent() {
        let s = set(4);
        let stats = dataset_stats(&s, &SplitAssignment::single(Split::Train, vec![0, 1, 2, 3])).unwrap();
        assert_eq!(stats.rows[0].picture_pct, 100.0);
        assert_eq!(stats.rows[0].instance_pct, 100.0);
        assert!(stats.discrepancies.is_empty());
    }

    #[test]
    fn fourteen_image_fixture() {
        let s = set(14);
        let splits = SplitAssignment {
            train: (0..10).collect(),
            test: (10..13).collect(),
            validation: vec![13],
        };
        let stats = dataset_stats(&s, &splits).unwrap();
        let p: Vec<f64> = stats.rows.iter().map(|r| (r.picture_pct * 10.0).round() / 10.0).collect();
        assert_eq!(p, vec![71.4, 21.4, 7.1]);
        let sum: f64 = stats.rows.iter().map(|r| r.picture_pct).sum();
        assert!((sum - 100.0).abs() < 1e-9);
    }

    #[test]
    fn overlaps_and_gaps_are_errors() {
        let s = set(3);
        let overlap = SplitAssignment {
            train: vec![0, 1],
            test: vec![1, 2],
            validation: vec![],
        };
        let err = dataset_stats(&s, &overlap).unwrap_err();
        assert!(err.to_string().contains("1 (train and test)"), "{err}");
        let gap = SplitAssignment::single(Split::Train, vec![0, 1]);
        assert!(dataset_stats(&s, &gap).is_err());
    }

    #[test]
    fn random_split_is_seeded_and_proportional() {
        let s = set(100);
        let a = random_split(&s, 3, DEFAULT_SPLIT_FRACTIONS);
        assert_eq!(a, random_split(&s, 3, DEFAULT_SPLIT_FRACTIONS));
        assert_ne!(a, random_split(&s, 4, DEFAULT_SPLIT_FRACTIONS));
        assert_eq!((a.train.len(), a.test.len(), a.validation.len()), (70, 23, 7));
        assert!(a.index(&s).is_ok());
    }

    #[test]
    fn apportion_sums_to_n() {
        assert_eq!(apportion(10, &[0.8, 0.15, 0.05]), vec![8, 2, 0]);
        assert_eq!(apportion(7, &[1.0, 1.0, 1.0]), vec![3, 2, 2]);
        for n in 0..50 {
            assert_eq!(apportion(n, &[0.3, 0.3, 0.4]).iter().sum::<usize>(), n);
        }
    }
}
