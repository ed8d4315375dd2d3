//! Partitioning the medication vocabulary into adapter groups.
//!
//! Features are L2-normalized co-prescription counts over the training
//! visits; clustering is seeded k-means with k-means++ initialization, a
//! fixed iteration cap, and deterministic tie-breaking, so the same corpus,
//! k and seed always give the same partition.

use crate::corpus::VisitRecord;
use crate::error::{Error, Result};
use crate::rng::Rng;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// Total assignment of the vocabulary to group ids in `[0, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MedicationGroupMap {
    pub k: usize,
    pub seed: u64,
    pub method: String,
    pub assignment: BTreeMap<String, usize>,
    /// Cluster centroids in feature space, kept for assigning medications
    /// that were never seen in training to their nearest group.
    pub centroids: Option<Vec<Vec<f64>>>,
}

/// Per-medication co-prescription features over the training split. Row
/// order follows `vocabulary`. The diagonal carries the medication's own
/// prescription count so a drug always co-prescribed with nothing still has
/// signal; rows are L2-normalized. Medications never prescribed in training
/// come back in the flagged list with zero rows.
pub fn build_cooccurrence(
    train_records: &[VisitRecord],
    vocabulary: &[String],
) -> (Vec<Vec<f64>>, Vec<String>) {
    assert!(!train_records.is_empty(), "training split must be non-empty");
    let index: BTreeMap<&str, usize> = vocabulary
        .iter()
        .enumerate()
        .map(|(i, m)| (m.as_str(), i))
        .collect();
    let n = vocabulary.len();
    let mut counts = vec![vec![0f64; n]; n];
    for record in train_records {
        let ids: Vec<usize> = record
            .discharge_medications
            .iter()
            .filter_map(|m| index.get(m.as_str()).copied())
            .collect();
        for &a in &ids {
            for &b in &ids {
                counts[a][b] += 1.0;
            }
        }
    }
    let mut never = Vec::new();
    for (i, row) in counts.iter_mut().enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            never.push(vocabulary[i].clone());
        } else {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    (counts, never)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid with deterministic ties (strictly smaller distance wins,
/// so equal distances keep the lowest index).
fn nearest(centroids: &[Vec<f64>], point: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(centroid, point);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Seeded k-means over the feature rows.
pub fn cluster_medications(
    features: &[Vec<f64>],
    vocabulary: &[String],
    k: usize,
    seed: u64,
) -> Result<MedicationGroupMap> {
    if k == 0 {
        return Err(Error::Grouping("k must be positive".into()));
    }
    if k > vocabulary.len() {
        return Err(Error::Grouping(format!(
            "k = {k} exceeds vocabulary size {}",
            vocabulary.len()
        )));
    }
    assert_eq!(features.len(), vocabulary.len());
    let n = vocabulary.len();
    let mut rng = Rng::new(seed);

    // k-means++ seeding.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(features[rng.below(n)].clone());
    while centroids.len() < k {
        let d2: Vec<f64> = features
            .iter()
            .map(|f| {
                centroids
                    .iter()
                    .map(|c| sq_dist(c, f))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            // All remaining points coincide with a centroid; take the lowest
            // index not yet chosen as a centroid value.
            let mut chosen = 0;
            for (i, f) in features.iter().enumerate() {
                if !centroids.contains(f) {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            let mut dart = rng.next_f64() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                dart -= w;
                if dart <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.push(features[pick].clone());
    }

    let mut assignment: Vec<usize> = features.iter().map(|f| nearest(&centroids, f)).collect();
    for _ in 0..100 {
        repair_empty_clusters(&mut assignment, features, &centroids, k);
        // Recompute centroids.
        let dim = features[0].len();
        let mut sums = vec![vec![0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, &g) in assignment.iter().enumerate() {
            counts[g] += 1;
            for (s, v) in sums[g].iter_mut().zip(features[i].iter()) {
                *s += v;
            }
        }
        for g in 0..k {
            if counts[g] > 0 {
                sums[g].iter_mut().for_each(|v| *v /= counts[g] as f64);
            }
        }
        centroids = sums;
        let next: Vec<usize> = features.iter().map(|f| nearest(&centroids, f)).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    repair_empty_clusters(&mut assignment, features, &centroids, k);

    Ok(MedicationGroupMap {
        k,
        seed,
        method: "cooccurrence-kmeans".into(),
        assignment: vocabulary
            .iter()
            .cloned()
            .zip(assignment.iter().copied())
            .collect(),
        centroids: Some(centroids),
    })
}

/// Moves the point farthest from its centroid out of the largest cluster
/// into each empty cluster. Ties resolve to the lowest medication index.
fn repair_empty_clusters(
    assignment: &mut [usize],
    features: &[Vec<f64>],
    centroids: &[Vec<f64>],
    k: usize,
) {
    loop {
        let mut sizes = vec![0usize; k];
        for &g in assignment.iter() {
            sizes[g] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let largest = (0..k).max_by_key(|&g| sizes[g]).unwrap();
        if sizes[largest] <= 1 {
            return;
        }
        let mut pick = usize::MAX;
        let mut pick_d = -1.0;
        for (i, &g) in assignment.iter().enumerate() {
            if g == largest {
                let d = sq_dist(&centroids[largest], &features[i]);
                if d > pick_d {
                    pick_d = d;
                    pick = i;
                }
            }
        }
        assignment[pick] = empty;
    }
}

/// External grouping from a `medication -> class` file, for corpora that
/// carry therapeutic classes. Classes become group ids in sorted order.
pub fn group_by_class_file(path: impl AsRef<Path>, vocabulary: &[String]) -> Result<MedicationGroupMap> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut class_of: BTreeMap<String, String> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (med, class) = line.split_once('\t').ok_or_else(|| Error::CorpusFormat {
            line: i + 1,
            reason: "expected medication<TAB>class".into(),
        })?;
        class_of.insert(med.to_string(), class.trim().to_string());
    }
    let mut classes: Vec<String> = class_of.values().cloned().collect();
    classes.sort();
    classes.dedup();
    let mut assignment = BTreeMap::new();
    for med in vocabulary {
        let class = class_of.get(med).ok_or_else(|| Error::Grouping(format!(
            "medication {med} missing from class file"
        )))?;
        let gid = classes.binary_search(class).unwrap();
        assignment.insert(med.clone(), gid);
    }
    Ok(MedicationGroupMap {
        k: classes.len(),
        seed: 0,
        method: "class-file".into(),
        assignment,
        centroids: None,
    })
}

impl MedicationGroupMap {
    /// Constant-time lookup; unknown medications report the closest known
    /// name to make typos obvious.
    pub fn assign_group(&self, medication: &str) -> Result<usize> {
        if let Some(&g) = self.assignment.get(medication) {
            return Ok(g);
        }
        let nearest = self
            .assignment
            .keys()
            .min_by_key(|known| levenshtein(medication, known))
            .cloned();
        Err(Error::UnknownMedication {
            name: medication.to_string(),
            hint: nearest.map(|n| format!("; nearest known is {n:?}")).unwrap_or_default(),
        })
    }

    /// Group of an out-of-vocabulary medication given its feature row.
    pub fn assign_nearest(&self, features: &[f64]) -> Result<usize> {
        let centroids = self
            .centroids
            .as_ref()
            .ok_or_else(|| Error::Grouping("group map carries no centroids".into()))?;
        Ok(nearest(centroids, features))
    }

    pub fn group_members(&self, group_id: usize) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|(_, &g)| g == group_id)
            .map(|(m, _)| m.clone())
            .collect()
    }

    /// Stable digest binding checkpoints to the partition they were trained
    /// against.
    pub fn digest(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        eat(&(self.k as u64).to_le_bytes());
        for (med, &g) in &self.assignment {
            eat(med.as_bytes());
            eat(&(g as u64).to_le_bytes());
        }
        h
    }

    /// `medication<TAB>group_id` lines under a header recording k, seed and
    /// method.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = format!("#k={}\tseed={}\tmethod={}\n", self.k, self.seed, self.method);
        for (med, g) in &self.assignment {
            out.push_str(&format!("{med}\t{g}\n"));
        }
        let mut f =
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(out.as_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Grouping("empty group map file".into()))?;
        let mut k = 0usize;
        let mut seed = 0u64;
        let mut method = String::new();
        for field in header.trim_start_matches('#').split('\t') {
            match field.split_once('=') {
                Some(("k", v)) => k = v.parse().map_err(|_| Error::Grouping("bad k".into()))?,
                Some(("seed", v)) => {
                    seed = v.parse().map_err(|_| Error::Grouping("bad seed".into()))?
                }
                Some(("method", v)) => method = v.to_string(),
                _ => {}
            }
        }
        let mut assignment = BTreeMap::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (med, g) = line.split_once('\t').ok_or_else(|| Error::CorpusFormat {
                line: i + 2,
                reason: "expected medication<TAB>group_id".into(),
            })?;
            assignment.insert(
                med.to_string(),
                g.trim().parse().map_err(|_| Error::CorpusFormat {
                    line: i + 2,
                    reason: format!("bad group id {g:?}"),
                })?,
            );
        }
        Ok(MedicationGroupMap {
            k,
            seed,
            method,
            assignment,
            centroids: None,
        })
    }
}

fn levenshtein(a: &str, b: &str) -> usize {
    let (a, b): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let cost = usize::from(ca != cb);
            cur[j + 1] = (prev[j] + cost).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ClinicalNoteFields, Gender};

    fn visit(meds: &[&str]) -> VisitRecord {
        VisitRecord {
            patient_id: "p".into(),
            visit_index: 0,
            age: 60,
            gender: Gender::Female,
            diagnoses: vec![],
            procedures: vec![],
            note: ClinicalNoteFields::default(),
            discharge_medications: meds.iter().map(|m| m.to_string()).collect(),
        }
    }

    #[test]
    fn coprescribed_rows_identical_lone_row_orthogonal() {
        let vocab: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let records = vec![visit(&["a", "b"]), visit(&["a", "b"]), visit(&["c"])];
        let (features, never) = build_cooccurrence(&records, &vocab);
        assert!(never.is_empty());
        assert_eq!(features[0], features[1]);
        let dot: f64 = features[0].iter().zip(features[2].iter()).map(|(x, y)| x * y).sum();
        assert_eq!(dot, 0.0);
    }

    #[test]
    fn single_visit_count_is_one_before_normalization() {
        let vocab: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let records = vec![visit(&["a", "b"])];
        // Raw counts: each pair co-occurs once; check via unnormalized
        // reconstruction (row norm of [1,1] is sqrt(2)).
        let (features, _) = build_cooccurrence(&records, &vocab);
        assert!((features[0][1] * 2f64.sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn three_visit_fixture_matches_hand_count() {
        let vocab: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let records = vec![visit(&["a", "b"]), visit(&["a", "c"]), visit(&["a"])];
        let (features, _) = build_cooccurrence(&records, &vocab);
        // Row a raw: [3, 1, 1]; norm sqrt(11).
        let n = 11f64.sqrt();
        assert!((features[0][0] - 3.0 / n).abs() < 1e-12);
        assert!((features[0][1] - 1.0 / n).abs() < 1e-12);
        assert!((features[0][2] - 1.0 / n).abs() < 1e-12);
    }

    #[test]
    fn never_prescribed_med_is_flagged() {
        let vocab: Vec<String> = ["a", "ghost"].iter().map(|s| s.to_string()).collect();
        let records = vec![visit(&["a"])];
        let (_, never) = build_cooccurrence(&records, &vocab);
        assert_eq!(never, vec!["ghost"]);
    }

    #[test]
    fn k_equals_n_gives_singletons() {
        let vocab: Vec<String> = (0..5).map(|i| format!("m{i}")).collect();
        let features: Vec<Vec<f64>> = (0..5)
            .map(|i| (0..5).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let map = cluster_medications(&features, &vocab, 5, 3).unwrap();
        let mut groups: Vec<usize> = map.assignment.values().copied().collect();
        groups.sort_unstable();
        groups.dedup();
        assert_eq!(groups.len(), 5);
    }

    #[test]
    fn separated_blobs_become_groups() {
        let vocab: Vec<String> = (0..6).map(|i| format!("m{i}")).collect();
        let mut features = Vec::new();
        for i in 0..6 {
            let base = if i < 3 { 0.0 } else { 10.0 };
            features.push(vec![base + (i % 3) as f64 * 0.01, base]);
        }
        let map = cluster_medications(&features, &vocab, 2, 11).unwrap();
        let g0 = map.assignment["m0"];
        assert_eq!(map.assignment["m1"], g0);
        assert_eq!(map.assignment["m2"], g0);
        let g1 = map.assignment["m3"];
        assert_ne!(g0, g1);
        assert_eq!(map.assignment["m4"], g1);
        assert_eq!(map.assignment["m5"], g1);
    }

    #[test]
    fn clustering_is_deterministic() {
        let vocab: Vec<String> = (0..12).map(|i| format!("m{i}")).collect();
        let features: Vec<Vec<f64>> = (0..12)
            .map(|i| vec![(i as f64 * 0.7).sin(), (i as f64 * 1.3).cos(), i as f64 % 3.0])
            .collect();
        for k in [5usize, 10] {
            let a = cluster_medications(&features, &vocab, k, 42).unwrap();
            let b = cluster_medications(&features, &vocab, k, 42).unwrap();
            assert_eq!(a.assignment, b.assignment);
            // Partition covers the vocabulary with non-empty groups.
            let mut sizes = vec![0usize; k];
            for &g in a.assignment.values() {
                sizes[g] += 1;
            }
            assert!(sizes.iter().all(|&s| s > 0), "k={k} sizes {sizes:?}");
        }
    }

    #[test]
    fn assign_group_errors_with_nearest_hint() {
        let vocab: Vec<String> = vec!["Velanmab".into(), "Toricnib".into()];
        let features = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let map = cluster_medications(&features, &vocab, 2, 1).unwrap();
        assert!(map.assign_group("Velanmab").is_ok());
        let err = map.assign_group("Velanmib").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("Velanmab"), "{msg}");
    }

    #[test]
    fn group_map_file_round_trip() {
        let vocab: Vec<String> = (0..4).map(|i| format!("m{i}")).collect();
        let features: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let map = cluster_medications(&features, &vocab, 2, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("groups.tsv");
        map.write(&path).unwrap();
        let loaded = MedicationGroupMap::read(&path).unwrap();
        assert_eq!(loaded.assignment, map.assignment);
        assert_eq!(loaded.k, map.k);
        assert_eq!(loaded.seed, map.seed);
        assert_eq!(loaded.digest(), map.digest());
    }

    #[test]
    fn ood_medication_assigned_to_nearest_centroid() {
        let vocab: Vec<String> = (0..6).map(|i| format!("m{i}")).collect();
        let mut features = Vec::new();
        for i in 0..6 {
            let base = if i < 3 { 0.0 } else { 10.0 };
            features.push(vec![base, base + (i % 3) as f64 * 0.01]);
        }
        let map = cluster_medications(&features, &vocab, 2, 7).unwrap();
        let g_low = map.assign_nearest(&[0.2, 0.1]).unwrap();
        assert_eq!(g_low, map.assignment["m0"]);
        let g_high = map.assign_nearest(&[9.8, 10.1]).unwrap();
        assert_eq!(g_high, map.assignment["m4"]);
    }
}
