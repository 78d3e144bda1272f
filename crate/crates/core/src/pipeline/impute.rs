use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{observed_columns, Dataset, FeatureStats};
use crate::error::{invalid, Result};

/// Fills absent entries of `rows` from the `k` nearest complete rows.
///
/// Distance is Euclidean over the z-scored columns the query observes.
/// Neighbours are ranked by `(distance, row position)`, so exact ties go to
/// the earlier row. With fewer than `k` donors all of them are used; with
/// none, the training mean is used. Returns the number of fallback fills.
pub fn knn_fill(rows: &mut [Vec<Option<f64>>], stats: &FeatureStats, k: usize) -> Result<usize> {
    if k == 0 {
        return Err(invalid!("k must be positive"));
    }
    let width = stats.mean.len();
    let donors: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].iter().all(Option::is_some)).collect();
    let donor_z: Vec<Vec<f64>> = donors
        .iter()
        .map(|&i| rows[i].iter().enumerate().map(|(j, v)| stats.z(j, v.unwrap())).collect())
        .collect();
    let mut fallbacks = 0;
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(donors.len());
    for i in 0..rows.len() {
        if rows[i].iter().all(Option::is_some) {
            continue;
        }
        if donors.is_empty() {
            for j in 0..width {
                if rows[i][j].is_none() {
                    rows[i][j] = Some(stats.mean[j]);
                    fallbacks += 1;
                }
            }
            continue;
        }
        let q: Vec<Option<f64>> = rows[i].iter().enumerate().map(|(j, v)| v.map(|x| stats.z(j, x))).collect();
        dist.clear();
        for (pos, dz) in donor_z.iter().enumerate() {
            let d2: f64 = q.iter().zip(dz).filter_map(|(a, &b)| a.map(|a| (a - b) * (a - b))).sum();
            dist.push((d2, pos));
        }
        let kk = k.min(dist.len());
        let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if kk < dist.len() {
            dist.select_nth_unstable_by(kk - 1, order);
        }
        let nearest = &dist[..kk];
        for j in 0..width {
            if rows[i][j].is_none() {
                let s: f64 = nearest.iter().map(|&(_, pos)| rows[donors[pos]][j].unwrap()).sum();
                rows[i][j] = Some(s / kk as f64);
            }
        }
    }
    if fallbacks > 0 {
        log::warn!("knn imputation: no complete donor rows, {fallbacks} values set to the training mean");
    }
    Ok(fallbacks)
}

/// kNN imputation over every window of the dataset. A complete dataset is
/// returned unchanged.
pub fn impute_knn(ds: &Dataset, k: usize) -> Result<Dataset> {
    if k == 0 {
        return Err(invalid!("k must be positive"));
    }
    if ds.absent_count() == 0 {
        return Ok(ds.clone());
    }
    let mut rows: Vec<Vec<Option<f64>>> = ds.windows().map(|w| w.features.clone()).collect();
    knn_fill(&mut rows, &ds.stats, k)?;
    let mut out = ds.clone();
    for (w, row) in out.series.values_mut().flatten().zip(rows) {
        w.features = row;
    }
    Ok(out)
}

/// Strategy that turns a dataset with absent values into a complete one.
pub trait Imputer {
    fn name(&self) -> &str;
    fn impute(&self, ds: &Dataset) -> Result<Dataset>;
}

#[derive(Clone, Copy, Debug)]
pub struct KnnImputer {
    pub k: usize,
}

impl Imputer for KnnImputer {
    fn name(&self) -> &str {
        "knn"
    }

    fn impute(&self, ds: &Dataset) -> Result<Dataset> {
        impute_knn(ds, self.k)
    }
}

/// Training-split column mean.
#[derive(Clone, Copy, Debug, Default)]
pub struct MeanImputer;

impl Imputer for MeanImputer {
    fn name(&self) -> &str {
        "mean"
    }

    fn impute(&self, ds: &Dataset) -> Result<Dataset> {
        let mut out = ds.clone();
        for w in out.series.values_mut().flatten() {
            for (j, v) in w.features.iter_mut().enumerate() {
                v.get_or_insert(ds.stats.mean[j]);
            }
        }
        Ok(out)
    }
}

/// Returns the hidden truth; used to validate the evaluation harness.
#[derive(Clone, Debug)]
pub struct OracleImputer {
    pub truth: Dataset,
}

impl Imputer for OracleImputer {
    fn name(&self) -> &str {
        "oracle"
    }

    fn impute(&self, ds: &Dataset) -> Result<Dataset> {
        let mut out = ds.clone();
        for (w, t) in out.series.values_mut().flatten().zip(self.truth.windows()) {
            for (v, tv) in w.features.iter_mut().zip(&t.features) {
                if v.is_none() {
                    *v = *tv;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ImputeErrors {
    pub mse: f64,
    pub mae: f64,
    pub rmse: f64,
    pub masked: usize,
}

/// Hides a seeded random share of observed values, imputes, and scores the
/// reconstruction on the hidden entries only (raw feature scale).
pub fn imputation_eval(ds: &Dataset, mask_fraction: f64, imputer: &dyn Imputer, seed: u64) -> Result<ImputeErrors> {
    if !(mask_fraction > 0.0 && mask_fraction <= 0.5) {
        return Err(invalid!("mask fraction {mask_fraction} outside (0, 0.5]"));
    }
    if ds.absent_count() != 0 {
        return Err(invalid!("evaluation needs a complete dataset"));
    }
    let cols = observed_columns();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = ds.clone();
    let mut hidden = Vec::new();
    for (wi, w) in masked.series.values_mut().flatten().enumerate() {
        for &j in &cols {
            if rng.random::<f64>() < mask_fraction {
                hidden.push((wi, j, w.features[j].unwrap()));
                w.features[j] = None;
            }
        }
    }
    if hidden.is_empty() {
        return Err(invalid!("mask selected no entries"));
    }
    let filled = imputer.impute(&masked)?;
    let flat: Vec<&Vec<Option<f64>>> = filled.windows().map(|w| &w.features).collect();
    let (mut se, mut ae) = (0.0, 0.0);
    for &(wi, j, truth) in &hidden {
        let v = flat[wi][j].ok_or_else(|| invalid!("imputer `{}` left an entry absent", imputer.name()))?;
        se += (v - truth).powi(2);
        ae += (v - truth).abs();
    }
    let n = hidden.len() as f64;
    Ok(ImputeErrors { mse: se / n, mae: ae / n, rmse: (se / n).sqrt(), masked: hidden.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(w: usize) -> FeatureStats {
        FeatureStats { mean: vec![0.0; w], std: vec![1.0; w] }
    }

    #[test]
    fn complete_rows_untouched() {
        let mut rows = vec![vec![Some(1.0), Some(2.0)], vec![Some(3.0), Some(4.0)]];
        let before = rows.clone();
        assert_eq!(knn_fill(&mut rows, &stats(2), 5).unwrap(), 0);
        assert_eq!(rows, before);
    }

    #[test]
    fn duplicate_donors_give_their_value() {
        let mut rows = vec![vec![Some(0.0), Some(7.0)]; 6];
        rows.push(vec![Some(0.5), None]);
        knn_fill(&mut rows, &stats(2), 5).unwrap();
        assert_eq!(rows[6][1], Some(7.0));
    }

    #[test]
    fn no_donor_falls_back_to_mean() {
        let mut rows = vec![vec![None, Some(1.0)], vec![Some(1.0), None]];
        let st = FeatureStats { mean: vec![4.0, 5.0], std: vec![1.0, 1.0] };
        assert_eq!(knn_fill(&mut rows, &st, 5).unwrap(), 2);
        assert_eq!(rows, vec![vec![Some(4.0), Some(1.0)], vec![Some(1.0), Some(5.0)]]);
    }

    #[test]
    fn ties_prefer_earlier_rows() {
        // all donors equidistant; k=2 takes the first two
        let mut rows = vec![
            vec![Some(1.0), Some(10.0)],
            vec![Some(-1.0), Some(20.0)],
            vec![Some(1.0), Some(30.0)],
            vec![Some(0.0), None],
        ];
        knn_fill(&mut rows, &stats(2), 2).unwrap();
        assert_eq!(rows[3][1], Some(15.0));
    }
}
