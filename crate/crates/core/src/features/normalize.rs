use serde::{Deserialize, Serialize};

use super::{FeatureError, FeatureMask, FeatureVector, NUM_FEATURES};

/// Welford accumulator for one column.
#[derive(Debug, Clone, Copy, Default)]
pub struct StreamingMoments {
    n: u64,
    mean: f64,
    m2: f64,
}

impl StreamingMoments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.m2 / self.n as f64).sqrt()
        }
    }
}

/// Per-feature mean and population standard deviation of a training split.
///
/// Zero-variance columns are centered but not scaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a FeatureVector>) -> Result<Self, FeatureError> {
        let mut cols = [StreamingMoments::default(); NUM_FEATURES];
        let mut n = 0usize;
        for row in rows {
            n += 1;
            for (c, x) in cols.iter_mut().zip(row.0.iter()) {
                c.push(*x);
            }
        }
        if n == 0 {
            return Err(FeatureError::EmptySplit);
        }
        Ok(Self {
            mean: cols.iter().map(StreamingMoments::mean).collect(),
            std: cols.iter().map(StreamingMoments::std).collect(),
        })
    }

    /// Identity transform (mean 0, unit scale).
    pub fn identity() -> Self {
        Self {
            mean: vec![0.0; NUM_FEATURES],
            std: vec![1.0; NUM_FEATURES],
        }
    }

    pub fn is_zero_variance(&self, slot: usize) -> bool {
        self.std[slot] <= 0.0
    }

    fn check(&self) -> Result<(), FeatureError> {
        for len in [self.mean.len(), self.std.len()] {
            if len != NUM_FEATURES {
                return Err(FeatureError::DimensionMismatch {
                    expected: NUM_FEATURES,
                    found: len,
                });
            }
        }
        Ok(())
    }

    fn scale(&self, slot: usize) -> f64 {
        if self.is_zero_variance(slot) {
            1.0
        } else {
            self.std[slot]
        }
    }

    /// Z-scores the active features of `v`, in feature order.
    pub fn normalize(&self, v: &FeatureVector, mask: &FeatureMask) -> Result<Vec<f64>, FeatureError> {
        let mut out = Vec::with_capacity(mask.count());
        self.normalize_into(v, mask, &mut out)?;
        Ok(out)
    }

    pub fn normalize_into(&self, v: &FeatureVector, mask: &FeatureMask, out: &mut Vec<f64>) -> Result<(), FeatureError> {
        self.check()?;
        for f in mask.active() {
            let i = f.index();
            out.push((v.0[i] - self.mean[i]) / self.scale(i));
        }
        Ok(())
    }

    /// Inverse of [`normalize`](Self::normalize) on the active slots; inactive slots are left at 0.
    pub fn denormalize(&self, z: &[f64], mask: &FeatureMask) -> Result<FeatureVector, FeatureError> {
        self.check()?;
        if z.len() != mask.count() {
            return Err(FeatureError::DimensionMismatch {
                expected: mask.count(),
                found: z.len(),
            });
        }
        let mut v = FeatureVector::default();
        for (f, x) in mask.active().zip(z) {
            let i = f.index();
            v.0[i] = x * self.scale(i) + self.mean[i];
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Feature;
    use rand::{Rng, SeedableRng};

    fn column_rows(values: &[f64]) -> Vec<FeatureVector> {
        values
            .iter()
            .map(|&x| {
                let mut v = FeatureVector::default();
                v.0[0] = x;
                v
            })
            .collect()
    }

    #[test]
    fn empty_split_is_an_error() {
        assert_eq!(NormalizationStats::fit(&[]), Err(FeatureError::EmptySplit));
    }

    #[test]
    fn two_point_column() {
        let s = NormalizationStats::fit(&column_rows(&[0.0, 2.0])).unwrap();
        assert_eq!(s.mean[0], 1.0);
        assert_eq!(s.std[0], 1.0);
    }

    #[test]
    fn constant_column_passes_through_centered() {
        let s = NormalizationStats::fit(&column_rows(&[3.0, 3.0, 3.0])).unwrap();
        assert_eq!(s.mean[0], 3.0);
        assert!(s.is_zero_variance(0));
        let mut v = FeatureVector::default();
        v.0[0] = 5.0;
        let z = s.normalize(&v, &FeatureMask::from_features(&[Feature::IsNewFact])).unwrap();
        assert_eq!(z, vec![2.0]);
    }

    #[test]
    fn mean_maps_to_zero_and_mean_plus_std_to_one() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<FeatureVector> = (0..100)
            .map(|_| {
                let mut v = FeatureVector::default();
                for x in v.0.iter_mut() {
                    *x = rng.random_range(-5.0..5.0);
                }
                v
            })
            .collect();
        let s = NormalizationStats::fit(&rows).unwrap();
        let mean = FeatureVector(s.mean.clone().try_into().unwrap());
        let z = s.normalize(&mean, &FeatureMask::all()).unwrap();
        assert!(z.iter().all(|x| x.abs() < 1e-12));
        let mut plus = mean;
        for (i, x) in plus.0.iter_mut().enumerate() {
            *x += s.std[i];
        }
        let z = s.normalize(&plus, &FeatureMask::all()).unwrap();
        assert!(z.iter().all(|x| (x - 1.0).abs() < 1e-12));
        let nine = s.normalize(&plus, &FeatureMask::default()).unwrap();
        assert_eq!(nine.len(), 9);
    }

    #[test]
    fn mismatched_stats_are_rejected() {
        let s = NormalizationStats {
            mean: vec![0.0; 3],
            std: vec![1.0; 3],
        };
        assert!(matches!(
            s.normalize(&FeatureVector::default(), &FeatureMask::all()),
            Err(FeatureError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn streaming_matches_two_pass_batch() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<FeatureVector> = (0..1000)
            .map(|_| {
                let mut v = FeatureVector::default();
                for (i, x) in v.0.iter_mut().enumerate() {
                    *x = rng.random_range(0.0..1.0) * (i as f64 + 1.0) * 100.0 + 1e4;
                }
                v
            })
            .collect();
        let s = NormalizationStats::fit(&rows).unwrap();
        for i in 0..NUM_FEATURES {
            let n = rows.len() as f64;
            let mean = rows.iter().map(|r| r.0[i]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r.0[i] - mean).powi(2)).sum::<f64>() / n;
            assert!((s.mean[i] - mean).abs() < 1e-9, "mean slot {i}");
            assert!((s.std[i] - var.sqrt()).abs() < 1e-9, "std slot {i}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalization_inverts(rows in proptest::collection::vec(proptest::array::uniform25(-1e3f64..1e3), 2..20)) {
                let rows: Vec<FeatureVector> = rows.into_iter().map(FeatureVector).collect();
                let s = NormalizationStats::fit(&rows).unwrap();
                let mask = FeatureMask::all();
                for r in &rows {
                    let z = s.normalize(r, &mask).unwrap();
                    let back = s.denormalize(&z, &mask).unwrap();
                    for i in 0..NUM_FEATURES {
                        prop_assert!((back.0[i] - r.0[i]).abs() <= 1e-9 * (1.0 + r.0[i].abs()));
                    }
                }
            }
        }
    }
}
