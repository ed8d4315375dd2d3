//! Patient-level corpus splitting.
//!
//! All visits of a patient land in the same split so a test patient's history
//! can never have been seen during training.

use super::{group_by_patient, VisitRecord};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    /// 4:1:1.
    fn default() -> Self {
        SplitRatios {
            train: 4.0 / 6.0,
            val: 1.0 / 6.0,
            test: 1.0 / 6.0,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let arr = [self.train, self.val, self.test];
        if arr.iter().any(|&r| r <= 0.0) || (arr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::BadSplitRatios(arr));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<VisitRecord>,
    pub val: Vec<VisitRecord>,
    pub test: Vec<VisitRecord>,
}

impl Splits {
    pub fn patient_counts(&self) -> (usize, usize, usize) {
        let count = |rs: &[VisitRecord]| {
            let mut ids: Vec<&str> = rs.iter().map(|r| r.patient_id.as_str()).collect();
            ids.sort_unstable();
            ids.dedup();
            ids.len()
        };
        (count(&self.train), count(&self.val), count(&self.test))
    }
}

/// Splits by patient with a seeded shuffle. Split sizes are the rounded
/// cumulative ratios, so each lands within one patient of exact proportion.
pub fn split_corpus(records: &[VisitRecord], ratios: SplitRatios, seed: u64) -> Result<Splits> {
    ratios.validate()?;
    let patients = group_by_patient(records);
    if patients.len() < 3 {
        return Err(Error::TooFewPatients {
            needed: 3,
            available: patients.len(),
        });
    }
    let mut order: Vec<usize> = (0..patients.len()).collect();
    Rng::new(seed).shuffle(&mut order);

    let n = patients.len() as f64;
    let train_end = (n * ratios.train).round() as usize;
    let val_end = (n * (ratios.train + ratios.val)).round() as usize;
    let (train_end, val_end) = (train_end.clamp(1, patients.len() - 2), val_end.clamp(2, patients.len() - 1));

    let mut splits = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (rank, &pi) in order.iter().enumerate() {
        let bucket = if rank < train_end {
            &mut splits.train
        } else if rank < val_end {
            &mut splits.val
        } else {
            &mut splits.test
        };
        bucket.extend(patients[pi].iter().cloned());
    }
    Ok(splits)
}
