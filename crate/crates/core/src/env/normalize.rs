//! Per-dimension Gaussian observation normalizer. Population standard
//! deviation, floored at 1e-6 so degenerate dimensions map to zero. Actions
//! are never normalized.

use super::dataset::OfflineDataset;
use crate::{CoreError, Result};

pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Fit on row-major data, `dim` values per row.
    pub fn fit_rows<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Result<Self> {
        let mut count = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sum_sq = vec![0.0; dim];
        for row in rows {
            if row.len() != dim {
                return Err(CoreError::shape(format!(
                    "normalizer: row has {} dims, expected {dim}",
                    row.len()
                )));
            }
            for (i, &v) in row.iter().enumerate() {
                sum[i] += v;
                sum_sq[i] += v * v;
            }
            count += 1;
        }
        if count == 0 {
            return Err(CoreError::empty("normalizer: no rows to fit"));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std: Vec<f64> = sum_sq
            .iter()
            .zip(&mean)
            .map(|(&sq, &m)| ((sq / n - m * m).max(0.0)).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Normalizer { mean, std })
    }

    /// Fit on the dataset's observed states.
    pub fn fit(dataset: &OfflineDataset) -> Result<Self> {
        Normalizer::fit_rows(dataset.transitions().iter().map(|t| t.s.as_slice()), 4)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&m, &sd))| (v - m) / sd)
            .collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&m, &sd))| v * sd + m)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::RngStream;

    #[test]
    fn hand_statistics_population_convention() {
        let rows: Vec<Vec<f64>> = vec![vec![1.0], vec![2.0], vec![3.0]];
        let n = Normalizer::fit_rows(rows.iter().map(|r| r.as_slice()), 1).unwrap();
        assert!((n.mean[0] - 2.0).abs() < 1e-15);
        assert!((n.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn constant_dimension_floors_std() {
        let rows: Vec<Vec<f64>> = vec![vec![5.0, 1.0], vec![5.0, 2.0], vec![5.0, 3.0]];
        let n = Normalizer::fit_rows(rows.iter().map(|r| r.as_slice()), 2).unwrap();
        assert_eq!(n.std[0], STD_FLOOR);
        assert_eq!(n.normalize(&[5.0, 2.0])[0], 0.0);
    }

    #[test]
    fn round_trip_identity() {
        let mut rng = RngStream::new(5, 0);
        let rows: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..4).map(|_| rng.normal() * 3.0 + 1.0).collect())
            .collect();
        let n = Normalizer::fit_rows(rows.iter().map(|r| r.as_slice()), 4).unwrap();
        for _ in 0..10_000 {
            let s: Vec<f64> = (0..4).map(|_| rng.normal() * 5.0).collect();
            let back = n.denormalize(&n.normalize(&s));
            for (a, b) in s.iter().zip(&back) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalized_fit_data_has_zero_mean_unit_std() {
        let mut rng = RngStream::new(6, 0);
        let rows: Vec<Vec<f64>> = (0..5000)
            .map(|_| (0..3).map(|_| rng.normal() * 2.5 - 4.0).collect())
            .collect();
        let n = Normalizer::fit_rows(rows.iter().map(|r| r.as_slice()), 3).unwrap();
        let normed: Vec<Vec<f64>> = rows.iter().map(|r| n.normalize(r)).collect();
        for d in 0..3 {
            let m: f64 = normed.iter().map(|r| r[d]).sum::<f64>() / normed.len() as f64;
            let v: f64 =
                normed.iter().map(|r| (r[d] - m) * (r[d] - m)).sum::<f64>() / normed.len() as f64;
            assert!(m.abs() < 1e-9, "mean {m}");
            assert!((v.sqrt() - 1.0).abs() < 1e-9, "std {}", v.sqrt());
        }
    }

    #[test]
    fn empty_fit_is_an_error() {
        let rows: Vec<Vec<f64>> = vec![];
        assert!(Normalizer::fit_rows(rows.iter().map(|r| r.as_slice()), 2).is_err());
    }
}
