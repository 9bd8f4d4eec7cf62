//! Patient-level, class-stratified train/validation/test assignment.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatasetError;
use crate::ingest::Label;

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.70, 0.15, 0.15];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SplitSet {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "val")]
    Validation,
    #[serde(rename = "test")]
    Test,
}

impl SplitSet {
    pub const ALL: [SplitSet; 3] = [SplitSet::Train, SplitSet::Validation, SplitSet::Test];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            SplitSet::Train => "train",
            SplitSet::Validation => "val",
            SplitSet::Test => "test",
        }
    }
}

impl fmt::Display for SplitSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub fractions: [f64; 3],
    pub assignment: BTreeMap<u32, SplitSet>,
}

impl SplitManifest {
    pub fn set_of(&self, patient_id: u32) -> Option<SplitSet> {
        self.assignment.get(&patient_id).copied()
    }

    /// Per-set `[non-malignant, malignant]` crop counts for labelled records.
    pub fn class_counts(&self, records: &[(u32, Label)]) -> [[usize; 2]; 3] {
        let mut out = [[0usize; 2]; 3];
        for &(pid, label) in records {
            if let (Some(set), Some(c)) = (self.set_of(pid), label.class_index()) {
                out[set.index()][c as usize] += 1;
            }
        }
        out
    }

    pub fn set_fractions(&self, records: &[(u32, Label)]) -> [f64; 3] {
        fractions_of(&self.class_counts(records))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

fn fractions_of(counts: &[[usize; 2]; 3]) -> [f64; 3] {
    let total: usize = counts.iter().map(|c| c[0] + c[1]).sum();
    let mut out = [0.0; 3];
    if total > 0 {
        for (o, c) in out.iter_mut().zip(counts) {
            *o = (c[0] + c[1]) as f64 / total as f64;
        }
    }
    out
}

/// Splits patients so that every patient lands in exactly one set.
///
/// `records` holds one `(patient_id, label)` entry per crop; unlabeled crops
/// are ignored. Patients are visited largest first (ties in seeded random
/// order) and each goes to the set where it least increases the summed
/// absolute deviation of set sizes and per-class counts from their targets
/// (in crops). Ties go to the earlier set.
pub fn stratified_patient_split(
    records: &[(u32, Label)],
    fractions: [f64; 3],
    seed: u64,
) -> Result<SplitManifest, DatasetError> {
    if fractions.iter().any(|&f| !(f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DatasetError::InvalidFractions(fractions));
    }
    let infeasible = |reason: String, achieved| Err(DatasetError::SplitInfeasible { reason, achieved });

    let mut per_patient: BTreeMap<u32, [usize; 2]> = BTreeMap::new();
    for &(pid, label) in records {
        if let Some(c) = label.class_index() {
            per_patient.entry(pid).or_default()[c as usize] += 1;
        }
    }
    let class_totals = per_patient.values().fold([0usize; 2], |acc, c| [acc[0] + c[0], acc[1] + c[1]]);
    let total = class_totals[0] + class_totals[1];
    if per_patient.len() < 3 {
        return infeasible(format!("need at least 3 patients, found {}", per_patient.len()), None);
    }
    if class_totals[0] == 0 || class_totals[1] == 0 {
        return infeasible("both classes must be present".into(), None);
    }
    let min_frac = fractions.iter().cloned().fold(f64::INFINITY, f64::min);
    let largest = per_patient.values().map(|c| c[0] + c[1]).max().unwrap_or(0);
    if largest as f64 / total as f64 > 1.0 - min_frac {
        let share = largest as f64 / total as f64;
        return infeasible(
            format!("one patient owns {:.1}% of crops", 100.0 * share),
            None,
        );
    }

    let mut order: Vec<(u32, [usize; 2])> = per_patient.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order.sort_by_key(|(_, c)| std::cmp::Reverse(c[0] + c[1]));

    let mut current = [[0usize; 2]; 3];
    let mut assignment = BTreeMap::new();
    let dev = |have: usize, add: usize, target: f64| (have + add) as f64 - target;
    for (pid, counts) in order {
        let n = counts[0] + counts[1];
        let mut best: Option<(usize, f64)> = None;
        for s in 0..3 {
            // Growth of the total absolute deviation from the targets.
            let size_target = fractions[s] * total as f64;
            let size_now = current[s][0] + current[s][1];
            let mut cost = dev(size_now, n, size_target).abs() - dev(size_now, 0, size_target).abs();
            for c in 0..2 {
                let target = fractions[s] * class_totals[c] as f64;
                cost += dev(current[s][c], counts[c], target).abs() - dev(current[s][c], 0, target).abs();
            }
            if best.map_or(true, |(_, b)| cost < b - 1e-12) {
                best = Some((s, cost));
            }
        }
        let s = best.expect("three candidate sets").0;
        current[s][0] += counts[0];
        current[s][1] += counts[1];
        assignment.insert(pid, SplitSet::ALL[s]);
    }
    let achieved = fractions_of(&current);
    if current.iter().any(|c| c[0] + c[1] == 0) {
        return infeasible("a set received no crops".into(), Some(achieved));
    }
    Ok(SplitManifest {
        seed,
        fractions,
        assignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn crops(pid: u32, n_non: usize, n_mal: usize) -> Vec<(u32, Label)> {
        let mut v = vec![(pid, Label::NonMalignant); n_non];
        v.extend(std::iter::repeat((pid, Label::Malignant)).take(n_mal));
        v
    }

    #[test]
    fn ten_single_crop_patients() {
        let records: Vec<_> = (1..=10)
            .map(|p| (p, if p % 2 == 0 { Label::Malignant } else { Label::NonMalignant }))
            .collect();
        for seed in 0..8 {
            let m = stratified_patient_split(&records, DEFAULT_FRACTIONS, seed).unwrap();
            let sizes: Vec<usize> = m.class_counts(&records).iter().map(|c| c[0] + c[1]).collect();
            assert!(sizes == vec![7, 2, 1] || sizes == vec![7, 1, 2], "{sizes:?}");
        }
    }

    #[test]
    fn infeasible_inputs() {
        let one = crops(1, 5, 5);
        assert!(matches!(
            stratified_patient_split(&one, DEFAULT_FRACTIONS, 0),
            Err(DatasetError::SplitInfeasible { .. })
        ));
        let mut dominant = crops(1, 90, 0);
        dominant.extend(crops(2, 0, 5));
        dominant.extend(crops(3, 0, 5));
        assert!(matches!(
            stratified_patient_split(&dominant, DEFAULT_FRACTIONS, 0),
            Err(DatasetError::SplitInfeasible { .. })
        ));
        let single_class: Vec<_> = (1..=5).flat_map(|p| crops(p, 2, 0)).collect();
        assert!(stratified_patient_split(&single_class, DEFAULT_FRACTIONS, 0).is_err());
        assert!(matches!(
            stratified_patient_split(&crops(1, 1, 1), [0.5, 0.5, 0.5], 0),
            Err(DatasetError::InvalidFractions(_))
        ));
    }

    #[test]
    fn unlabeled_records_are_ignored() {
        let mut records: Vec<_> = (1..=20).flat_map(|p| crops(p, (p % 3) as usize, 1)).collect();
        records.push((99, Label::Unlabeled));
        let m = stratified_patient_split(&records, DEFAULT_FRACTIONS, 5).unwrap();
        assert!(m.set_of(99).is_none());
        assert_eq!(m.assignment.len(), 20);
    }

    #[test]
    fn json_round_trip_uses_set_names() {
        let records: Vec<_> = (1..=12).flat_map(|p| crops(p, 1, (p % 2) as usize)).collect();
        let m = stratified_patient_split(&records, DEFAULT_FRACTIONS, 9).unwrap();
        let text = m.to_json();
        assert!(text.contains("\"train\""));
        assert!(text.contains("\"fractions\""));
        assert_eq!(SplitManifest::from_json(&text).unwrap(), m);
    }

    #[test]
    fn malignant_heavy_large_patients_stay_stratified() {
        // Big patients carry most malignant crops; small ones are all normal.
        let mut records = Vec::new();
        for p in 1..=300u32 {
            let (non, mal) = if p <= 120 { (1 + p as usize % 3, 3 + p as usize % 4) } else { (1 + p as usize % 2, 0) };
            records.extend(crops(p, non, mal));
        }
        let total = records.len() as f64;
        let global = records.iter().filter(|r| r.1 == Label::Malignant).count() as f64 / total;
        for seed in 0..4 {
            let m = stratified_patient_split(&records, DEFAULT_FRACTIONS, seed).unwrap();
            for (s, c) in m.class_counts(&records).iter().enumerate() {
                let n = (c[0] + c[1]) as f64;
                assert!((n / total - DEFAULT_FRACTIONS[s]).abs() < 0.03, "set {s} holds {n}");
                assert!((c[1] as f64 / n - global).abs() < 0.03, "set {s} proportion {c:?}");
            }
        }
    }

    #[test]
    fn deterministic_and_disjoint() {
        let records: Vec<_> = (1..=60)
            .flat_map(|p| crops(p, (p * 7 % 5) as usize, (p * 3 % 4) as usize))
            .collect();
        let a = stratified_patient_split(&records, DEFAULT_FRACTIONS, 3).unwrap();
        let b = stratified_patient_split(&records, DEFAULT_FRACTIONS, 3).unwrap();
        assert_eq!(a, b);
        let mut seen = BTreeSet::new();
        for (pid, _) in &a.assignment {
            assert!(seen.insert(*pid));
        }
    }
}
