//! Patient-grouped, label-stratified k-fold splitting.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{BiopsyLabel, RecordKey, StudyRecord};
use crate::error::{Error, Result};

/// Train, validation and test records for one fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train: BTreeSet<RecordKey>,
    pub val: BTreeSet<RecordKey>,
    pub test: BTreeSet<RecordKey>,
}

impl FoldSplit {
    /// Distinct patients in the test set, in sorted order.
    pub fn test_patients(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self.test.iter().map(|k| k.patient_id.as_str()).collect();
        set.into_iter().collect()
    }
}

#[derive(Default, Clone)]
struct Bin {
    patients: usize,
    records: usize,
    malignant: usize,
}

/// Deviation of a bin's malignant count from the global proportion after adding a group.
fn imbalance(bin: &Bin, add_records: usize, add_malignant: usize, global_frac: f64) -> f64 {
    let records = (bin.records + add_records) as f64;
    let malignant = (bin.malignant + add_malignant) as f64;
    let benign = records - malignant;
    (malignant - global_frac * records).abs() + (benign - (1.0 - global_frac) * records).abs()
}

/// Exchanges patients between bins while that lowers the total class
/// imbalance. Exchanges keep every bin's patient count, so the greedy pass's
/// size balance survives; the first best exchange is taken each round.
fn refine_by_swaps(groups: &[&Vec<&StudyRecord>], assigned: &mut [usize], bins: &mut [Bin], global_frac: f64) {
    let stats: Vec<(usize, usize)> = groups
        .iter()
        .map(|g| (g.len(), g.iter().filter(|r| r.label.is_positive()).count()))
        .collect();
    let shifted = |bin: &Bin, out: (usize, usize), inn: (usize, usize)| Bin {
        patients: bin.patients,
        records: bin.records - out.0 + inn.0,
        malignant: bin.malignant - out.1 + inn.1,
    };
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..groups.len() {
            for b in a + 1..groups.len() {
                let (ba, bb) = (assigned[a], assigned[b]);
                if ba == bb || stats[a] == stats[b] {
                    continue;
                }
                let before = imbalance(&bins[ba], 0, 0, global_frac) + imbalance(&bins[bb], 0, 0, global_frac);
                let after = imbalance(&shifted(&bins[ba], stats[a], stats[b]), 0, 0, global_frac)
                    + imbalance(&shifted(&bins[bb], stats[b], stats[a]), 0, 0, global_frac);
                let gain = before - after;
                if gain > 1e-9 && best.is_none_or(|(g, _, _)| gain > g + 1e-12) {
                    best = Some((gain, a, b));
                }
            }
        }
        let Some((_, a, b)) = best else { break };
        let (ba, bb) = (assigned[a], assigned[b]);
        bins[ba] = shifted(&bins[ba], stats[a], stats[b]);
        bins[bb] = shifted(&bins[bb], stats[b], stats[a]);
        assigned.swap(a, b);
    }
}

/// Assigns whole patients to `k` bins and derives the folds from them.
///
/// Patients are shuffled, then stably ordered by record count, largest first,
/// and by malignant record count within a size. Each patient goes to one of the bins currently holding the fewest patients,
/// choosing the bin whose malignant/benign split stays closest to the global
/// proportion; remaining ties are broken at random. Patient exchanges between
/// bins then polish the class balance. Fold `i` tests on bin `i`,
/// validates on bin `i + 1 (mod k)` and trains on the rest.
pub fn stratified_group_kfold<R: Rng + ?Sized>(
    records: &[&StudyRecord],
    k: usize,
    rng: &mut R,
) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("k must be at least 2, got {k}")));
    }
    let mut groups: BTreeMap<&str, Vec<&StudyRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.patient_id.as_str()).or_default().push(r);
    }
    for label in [BiopsyLabel::Malignant, BiopsyLabel::Benign] {
        let found = groups
            .values()
            .filter(|g| g.iter().any(|r| r.label == label))
            .count();
        if found < k {
            return Err(Error::TooFewPatients {
                class: label.as_str().to_owned(),
                found,
                needed: k,
            });
        }
    }

    let total_malignant = records.iter().filter(|r| r.label.is_positive()).count();
    let global_frac = total_malignant as f64 / records.len() as f64;

    let malignant_in = |g: &[&StudyRecord]| g.iter().filter(|r| r.label.is_positive()).count();
    let mut order: Vec<&Vec<&StudyRecord>> = groups.values().collect();
    order.shuffle(rng);
    // Within a size, dealing one class at a time spreads each class evenly
    // over the bins, since every round of k placements visits every bin.
    order.sort_by(|a, b| b.len().cmp(&a.len()).then(malignant_in(b).cmp(&malignant_in(a))));

    let mut bins = vec![Bin::default(); k];
    let mut assigned = vec![0usize; order.len()];
    for (gi, group) in order.iter().enumerate() {
        let add_records = group.len();
        let add_malignant = malignant_in(group);
        let fewest = bins.iter().map(|b| b.patients).min().unwrap_or(0);
        let costs: Vec<(usize, f64)> = bins
            .iter()
            .enumerate()
            .filter(|(_, b)| b.patients == fewest)
            .map(|(i, b)| (i, imbalance(b, add_records, add_malignant, global_frac)))
            .collect();
        let best = costs.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
        let tied: Vec<usize> = costs
            .iter()
            .filter(|c| c.1 <= best + 1e-9)
            .map(|c| c.0)
            .collect();
        let chosen = tied[rng.random_range(0..tied.len())];
        let bin = &mut bins[chosen];
        bin.patients += 1;
        bin.records += add_records;
        bin.malignant += add_malignant;
        assigned[gi] = chosen;
    }
    refine_by_swaps(&order, &mut assigned, &mut bins, global_frac);

    let mut members: Vec<Vec<RecordKey>> = vec![Vec::new(); k];
    for (group, &b) in order.iter().zip(&assigned) {
        members[b].extend(group.iter().map(|r| r.key()));
    }

    Ok((0..k)
        .map(|i| {
            let val_bin = (i + 1) % k;
            let mut train = BTreeSet::new();
            for (j, m) in members.iter().enumerate() {
                if j != i && j != val_bin {
                    train.extend(m.iter().cloned());
                }
            }
            FoldSplit {
                fold_index: i,
                train,
                val: members[val_bin].iter().cloned().collect(),
                test: members[i].iter().cloned().collect(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{AcrCategory, Laterality, Phase};
    use crate::seed::{derive_rng, SeedPath};

    fn record(pid: &str, lat: Laterality, label: BiopsyLabel) -> StudyRecord {
        StudyRecord {
            patient_id: pid.to_owned(),
            laterality: lat,
            label,
            acr: AcrCategory::B,
            phase: Phase::Early,
            images: BTreeMap::new(),
        }
    }

    fn symmetric(n_per_class: usize) -> Vec<StudyRecord> {
        (0..2 * n_per_class)
            .map(|i| {
                let label = if i < n_per_class { BiopsyLabel::Malignant } else { BiopsyLabel::Benign };
                record(&format!("p{i}"), Laterality::Right, label)
            })
            .collect()
    }

    #[test]
    fn symmetric_instance_gives_one_of_each_class_per_fold() {
        let recs = symmetric(5);
        let refs: Vec<&StudyRecord> = recs.iter().collect();
        for seed in 0..50 {
            let mut rng = derive_rng(&SeedPath::root(seed));
            let folds = stratified_group_kfold(&refs, 5, &mut rng).unwrap();
            for f in &folds {
                let labels: Vec<BiopsyLabel> = f
                    .test
                    .iter()
                    .map(|k| recs.iter().find(|r| r.key() == *k).unwrap().label)
                    .collect();
                assert_eq!(labels.len(), 2, "seed {seed}");
                assert!(labels.contains(&BiopsyLabel::Malignant));
                assert!(labels.contains(&BiopsyLabel::Benign));
            }
        }
    }

    #[test]
    fn patient_groups_stay_together() {
        let mut recs = symmetric(6);
        recs.push(record("p0", Laterality::Left, BiopsyLabel::Benign));
        let refs: Vec<&StudyRecord> = recs.iter().collect();
        let mut rng = derive_rng(&SeedPath::root(3));
        let folds = stratified_group_kfold(&refs, 5, &mut rng).unwrap();
        for f in &folds {
            let sides: Vec<&BTreeSet<RecordKey>> = vec![&f.train, &f.val, &f.test];
            let both: Vec<usize> = sides
                .iter()
                .map(|s| s.iter().filter(|k| k.patient_id == "p0").count())
                .collect();
            assert!(both.contains(&2), "{both:?}");
            assert_eq!(f.train.len() + f.val.len() + f.test.len(), recs.len());
        }
    }

    #[test]
    fn splits_are_deterministic() {
        let recs = symmetric(8);
        let refs: Vec<&StudyRecord> = recs.iter().collect();
        let a = stratified_group_kfold(&refs, 5, &mut derive_rng(&SeedPath::root(9))).unwrap();
        let b = stratified_group_kfold(&refs, 5, &mut derive_rng(&SeedPath::root(9))).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_patients_is_reported() {
        let recs = symmetric(3);
        let refs: Vec<&StudyRecord> = recs.iter().collect();
        let err = stratified_group_kfold(&refs, 5, &mut derive_rng(&SeedPath::root(0))).unwrap_err();
        assert!(matches!(err, Error::TooFewPatients { found: 3, needed: 5, .. }));
    }
}
