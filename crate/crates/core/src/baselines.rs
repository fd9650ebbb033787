//! Representative-day K-means and monthly per-hour averages.

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timeseries::{nearest_month, DataError, ForecastSeries, TimeSeriesDataset};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("k must be >= 1")]
    InvalidK,
    #[error("{n} profiles cannot be split into {k} clusters")]
    TooFewProfiles { k: usize, n: usize },
    #[error("profile {index} has {got} entries, expected {expected}")]
    Dimension { index: usize, expected: usize, got: usize },
    #[error("non-finite value in profile {0}")]
    NonFinite(usize),
    #[error("month {0} has no training data")]
    MonthUnseen(u32),
    #[error("month {month} hour {hour} has no training data")]
    SlotUnseen { month: u32, hour: u32 },
    #[error("inertia rose from {before} to {after} at iteration {iteration}")]
    InertiaIncreased { iteration: usize, before: f64, after: f64 },
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, BaselineError>;

/// What to do when a forecast is requested for a month the model never saw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MonthPolicy {
    #[default]
    Strict,
    /// Borrow the nearest trained month (circular distance, ties low).
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 10,
            seed: 0,
            max_iters: 300,
            tol: 1e-9,
        }
    }
}

/// Result of Lloyd's algorithm on arbitrary fixed-length vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after seeding and after every update step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn inertia_of(profiles: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    profiles
        .iter()
        .zip(assignments)
        .map(|(p, &j)| sq_dist(p, &centroids[j]))
        .sum()
}

fn seed_plus_plus(profiles: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![profiles[rng.gen_range(0..profiles.len())].clone()];
    let mut d2: Vec<f64> = profiles.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let pick = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // Every point already coincides with a centroid.
            Err(_) => rng.gen_range(0..profiles.len()),
        };
        centroids.push(profiles[pick].clone());
        let c = centroids.last().unwrap();
        for (d, p) in d2.iter_mut().zip(profiles) {
            *d = d.min(sq_dist(p, c));
        }
    }
    centroids
}

fn update_centroids(profiles: &[Vec<f64>], assignments: &[usize], centroids: &mut [Vec<f64>]) {
    let dim = profiles[0].len();
    let mut sums = vec![vec![0.0; dim]; centroids.len()];
    let mut counts = vec![0usize; centroids.len()];
    for (p, &j) in profiles.iter().zip(assignments) {
        counts[j] += 1;
        sums[j].iter_mut().zip(p).for_each(|(s, x)| *s += x);
    }
    for ((c, s), n) in centroids.iter_mut().zip(sums).zip(counts) {
        if n > 0 {
            *c = s.into_iter().map(|v| v / n as f64).collect();
        }
    }
}

/// Gives every empty cluster the point farthest from its own centroid,
/// taken from a cluster that keeps at least one member.
fn repair_empty(profiles: &[Vec<f64>], centroids: &mut [Vec<f64>], assignments: &mut [usize]) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        assignments.iter().for_each(|&j| counts[j] += 1);
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            return;
        };
        let far = (0..profiles.len())
            .filter(|&i| counts[assignments[i]] > 1)
            .max_by(|&a, &b| {
                let da = sq_dist(&profiles[a], &centroids[assignments[a]]);
                let db = sq_dist(&profiles[b], &centroids[assignments[b]]);
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("n >= k leaves a cluster with two members");
        assignments[far] = empty;
        centroids[empty] = profiles[far].clone();
    }
}

/// Lloyd's algorithm with k-means++ seeding. Stops on an assignment fixpoint,
/// an inertia improvement below `tol`, or after `max_iters` updates.
pub fn kmeans_fit(profiles: &[Vec<f64>], k: usize, seed: u64, max_iters: usize, tol: f64) -> Result<KMeansFit> {
    if k == 0 {
        return Err(BaselineError::InvalidK);
    }
    if profiles.len() < k {
        return Err(BaselineError::TooFewProfiles { k, n: profiles.len() });
    }
    let dim = profiles[0].len();
    for (index, p) in profiles.iter().enumerate() {
        if p.len() != dim {
            return Err(BaselineError::Dimension { index, expected: dim, got: p.len() });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(BaselineError::NonFinite(index));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(profiles, k, &mut rng);
    let mut assignments: Vec<usize> = profiles.iter().map(|p| nearest(p, &centroids).0).collect();
    repair_empty(profiles, &mut centroids, &mut assignments);
    let mut inertia = inertia_of(profiles, &centroids, &assignments);
    let mut history = vec![inertia];
    let mut iterations = 0;

    while iterations < max_iters {
        // Update then reassign; each half can only lower the inertia.
        update_centroids(profiles, &assignments, &mut centroids);
        iterations += 1;
        let next: Vec<usize> = profiles.iter().map(|p| nearest(p, &centroids).0).collect();
        let changed = next != assignments;
        assignments = next;
        repair_empty(profiles, &mut centroids, &mut assignments);
        let after = inertia_of(profiles, &centroids, &assignments);
        let slack = 1e-12 * inertia.abs().max(1.0);
        if after > inertia + slack {
            return Err(BaselineError::InertiaIncreased { iteration: iterations, before: inertia, after });
        }
        history.push(after);
        let improvement = inertia - after;
        inertia = after;
        if !changed || improvement < tol {
            break;
        }
    }
    Ok(KMeansFit {
        centroids,
        assignments,
        inertia,
        inertia_history: history,
        iterations,
    })
}

/// Complete 24-hour days of one feature, with their dates. Days with any
/// hour missing are skipped.
pub fn daily_profiles(ds: &TimeSeriesDataset, target: usize) -> Result<(Vec<Vec<f64>>, Vec<NaiveDate>)> {
    if target >= ds.num_features() {
        return Err(DataError::Window(format!("target feature {target} out of range")).into());
    }
    let mut profiles = Vec::new();
    let mut dates = Vec::new();
    let stamps = ds.timestamps();
    let mut r = 0;
    while r < stamps.len() {
        let date = stamps[r].date();
        let mut end = r;
        while end < stamps.len() && stamps[end].date() == date {
            end += 1;
        }
        if end - r == 24 && stamps[r].hour() == 0 {
            profiles.push((r..end).map(|i| ds.value(i, target)).collect());
            dates.push(date);
        }
        r = end;
    }
    Ok((profiles, dates))
}

/// Daily-profile clustering plus each month's most populated cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansModel {
    pub fit: KMeansFit,
    pub day_months: Vec<u32>,
    /// Indexed by month 0..12; `None` where no training day fell.
    pub modal: Vec<Option<usize>>,
}

impl KMeansModel {
    pub fn from_fit(fit: KMeansFit, day_months: Vec<u32>) -> Self {
        let k = fit.centroids.len();
        let mut counts = vec![vec![0usize; k]; 12];
        for (&m, &j) in day_months.iter().zip(&fit.assignments) {
            counts[(m - 1) as usize][j] += 1;
        }
        let modal = counts
            .iter()
            .map(|c| {
                let best = *c.iter().max().unwrap_or(&0);
                (best > 0).then(|| c.iter().position(|&n| n == best).unwrap())
            })
            .collect();
        Self { fit, day_months, modal }
    }

    pub fn fit(train: &TimeSeriesDataset, target: usize, cfg: &KMeansConfig) -> Result<Self> {
        let (profiles, dates) = daily_profiles(train, target)?;
        let fit = kmeans_fit(&profiles, cfg.k, cfg.seed, cfg.max_iters, cfg.tol)?;
        Ok(Self::from_fit(fit, dates.iter().map(|d| d.month()).collect()))
    }

    pub fn trained_months(&self) -> Vec<u32> {
        (1..=12).filter(|m| self.modal[(*m - 1) as usize].is_some()).collect()
    }

    pub fn forecast(&self, label: &str, timestamps: &[NaiveDateTime], policy: MonthPolicy) -> Result<ForecastSeries> {
        let months = self.trained_months();
        let values = timestamps
            .iter()
            .map(|ts| {
                let month = resolve_month(ts.month(), &months, policy)?;
                Ok(rep_day_forecast(self, month)?[ts.hour() as usize])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ForecastSeries::new(label, timestamps.to_vec(), values)?)
    }
}

fn resolve_month(month: u32, trained: &[u32], policy: MonthPolicy) -> Result<u32> {
    match policy {
        MonthPolicy::Strict => Ok(month),
        MonthPolicy::Nearest => nearest_month(month, trained).ok_or(BaselineError::MonthUnseen(month)),
    }
}

/// Centroid of `month`'s modal cluster; ties go to the lower cluster index.
pub fn rep_day_forecast(model: &KMeansModel, month: u32) -> Result<&[f64]> {
    if !(1..=12).contains(&month) {
        return Err(BaselineError::MonthUnseen(month));
    }
    let j = model.modal[(month - 1) as usize].ok_or(BaselineError::MonthUnseen(month))?;
    Ok(&model.fit.centroids[j])
}

/// 12 x 24 table of training means for one feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthlyHourModel {
    pub mean: Vec<Vec<f64>>,
    pub count: Vec<Vec<usize>>,
}

impl MonthlyHourModel {
    pub fn fit(train: &TimeSeriesDataset, target: usize) -> Result<Self> {
        if target >= train.num_features() {
            return Err(DataError::Window(format!("target feature {target} out of range")).into());
        }
        let mut sum = vec![vec![0.0; 24]; 12];
        let mut count = vec![vec![0usize; 24]; 12];
        for (r, ts) in train.timestamps().iter().enumerate() {
            let (m, h) = (ts.month0() as usize, ts.hour() as usize);
            sum[m][h] += train.value(r, target);
            count[m][h] += 1;
        }
        let mean = sum
            .iter()
            .zip(&count)
            .map(|(s, c)| s.iter().zip(c).map(|(v, &n)| if n > 0 { v / n as f64 } else { 0.0 }).collect())
            .collect();
        Ok(Self { mean, count })
    }

    pub fn trained_months(&self) -> Vec<u32> {
        (1..=12).filter(|m| self.count[(*m - 1) as usize].iter().any(|&n| n > 0)).collect()
    }

    pub fn forecast_at(&self, month: u32, hour: u32) -> Result<f64> {
        if !(1..=12).contains(&month) || hour > 23 {
            return Err(BaselineError::SlotUnseen { month, hour });
        }
        let (m, h) = ((month - 1) as usize, hour as usize);
        if self.count[m].iter().all(|&n| n == 0) {
            return Err(BaselineError::MonthUnseen(month));
        }
        if self.count[m][h] == 0 {
            return Err(BaselineError::SlotUnseen { month, hour });
        }
        Ok(self.mean[m][h])
    }

    pub fn forecast(&self, label: &str, timestamps: &[NaiveDateTime], policy: MonthPolicy) -> Result<ForecastSeries> {
        let months = self.trained_months();
        let values = timestamps
            .iter()
            .map(|ts| self.forecast_at(resolve_month(ts.month(), &months, policy)?, ts.hour()))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForecastSeries::new(label, timestamps.to_vec(), values)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeseries::parse_timestamp;

    fn random_profiles(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..dim).map(|_| rng.gen_range(0.0..10.0)).collect()).collect()
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let p = random_profiles(20, 24, 1);
        let fit = kmeans_fit(&p, 1, 0, 100, 0.0).unwrap();
        for h in 0..24 {
            let mean: f64 = p.iter().map(|v| v[h]).sum::<f64>() / 20.0;
            assert!((fit.centroids[0][h] - mean).abs() < 1e-9);
        }
        let total: f64 = p.iter().map(|v| sq_dist(v, &fit.centroids[0])).sum();
        assert!((fit.inertia - total).abs() < 1e-9);
    }

    #[test]
    fn separable_groups_are_recovered() {
        let a = vec![1.0; 24];
        let b = vec![7.0; 24];
        let p: Vec<Vec<f64>> = (0..10).map(|i| if i % 2 == 0 { a.clone() } else { b.clone() }).collect();
        let fit = kmeans_fit(&p, 2, 3, 100, 0.0).unwrap();
        assert_eq!(fit.inertia, 0.0);
        let mut c = fit.centroids.clone();
        c.sort_by(|x, y| x[0].total_cmp(&y[0]));
        assert_eq!(c, vec![a, b]);
    }

    #[test]
    fn duplicates_force_empty_cluster_repair() {
        let p = vec![vec![2.0; 3]; 5];
        let fit = kmeans_fit(&p, 3, 0, 50, 0.0).unwrap();
        let mut counts = [0; 3];
        fit.assignments.iter().for_each(|&j| counts[j] += 1);
        assert!(counts.iter().all(|&n| n > 0));
        assert_eq!(fit.inertia, 0.0);
    }

    #[test]
    fn errors() {
        let p = random_profiles(2, 4, 0);
        assert!(matches!(kmeans_fit(&p, 3, 0, 10, 0.0), Err(BaselineError::TooFewProfiles { .. })));
        assert!(matches!(kmeans_fit(&p, 0, 0, 10, 0.0), Err(BaselineError::InvalidK)));
        let ragged = vec![vec![1.0; 4], vec![1.0; 3]];
        assert!(matches!(kmeans_fit(&ragged, 1, 0, 10, 0.0), Err(BaselineError::Dimension { .. })));
    }

    #[test]
    fn seeded_fits_repeat() {
        let p = random_profiles(40, 24, 9);
        assert_eq!(kmeans_fit(&p, 4, 5, 100, 1e-9).unwrap(), kmeans_fit(&p, 4, 5, 100, 1e-9).unwrap());
    }

    fn fit_with(centroids: usize, assignments: Vec<usize>) -> KMeansFit {
        KMeansFit {
            centroids: (0..centroids).map(|j| vec![j as f64; 24]).collect(),
            assignments,
            inertia: 0.0,
            inertia_history: vec![0.0],
            iterations: 1,
        }
    }

    #[test]
    fn modal_cluster_and_ties() {
        // Three June days: two in cluster 2, one in cluster 0.
        let model = KMeansModel::from_fit(fit_with(3, vec![2, 0, 2]), vec![6, 6, 6]);
        assert_eq!(rep_day_forecast(&model, 6).unwrap()[0], 2.0);
        // One June day each in clusters 2 and 1: tie goes to cluster 1.
        let model = KMeansModel::from_fit(fit_with(3, vec![2, 1]), vec![6, 6]);
        assert_eq!(rep_day_forecast(&model, 6).unwrap()[0], 1.0);
        assert!(matches!(rep_day_forecast(&model, 2), Err(BaselineError::MonthUnseen(2))));
    }

    fn june_days(values: &[[f64; 24]]) -> TimeSeriesDataset {
        let start = parse_timestamp("2023-06-01T00").unwrap();
        let n = values.len() * 24;
        let stamps = (0..n).map(|k| start + chrono::Duration::hours(k as i64)).collect();
        let vals = values.iter().flatten().copied().collect();
        TimeSeriesDataset::new(stamps, vals, vec!["pv".into()]).unwrap()
    }

    #[test]
    fn monthly_means_and_unseen_months() {
        let mut d1 = [0.0; 24];
        let mut d2 = [0.0; 24];
        d1[12] = 2.0;
        d2[12] = 4.0;
        d1[11] = 5.0;
        d2[11] = 5.0;
        let model = MonthlyHourModel::fit(&june_days(&[d1, d2]), 0).unwrap();
        assert_eq!(model.forecast_at(6, 12).unwrap(), 3.0);
        assert_eq!(model.forecast_at(6, 11).unwrap(), 5.0);
        assert!(matches!(model.forecast_at(2, 12), Err(BaselineError::MonthUnseen(2))));

        let ts = vec![parse_timestamp("2023-08-01T12").unwrap()];
        assert!(model.forecast("pv", &ts, MonthPolicy::Strict).is_err());
        assert_eq!(model.forecast("pv", &ts, MonthPolicy::Nearest).unwrap().values, vec![3.0]);
    }

    #[test]
    fn kmeans_model_on_days() {
        let mut d = [0.0; 24];
        d[12] = 6.0;
        let ds = june_days(&[d, d, d]);
        let model = KMeansModel::fit(&ds, 0, &KMeansConfig { k: 1, ..Default::default() }).unwrap();
        assert_eq!(rep_day_forecast(&model, 6).unwrap(), &d[..]);
        let ts = vec![parse_timestamp("2023-06-05T12").unwrap()];
        assert_eq!(model.forecast("pv", &ts, MonthPolicy::Strict).unwrap().values, vec![6.0]);
    }

    #[test]
    fn partial_days_are_skipped() {
        let start = parse_timestamp("2023-06-01T05").unwrap();
        let stamps = (0..50).map(|k| start + chrono::Duration::hours(k)).collect();
        let ds = TimeSeriesDataset::new(stamps, vec![1.0; 50], vec!["pv".into()]).unwrap();
        let (profiles, dates) = daily_profiles(&ds, 0).unwrap();
        assert_eq!(profiles.len(), 1);
        assert_eq!(dates[0].day(), 2);
    }
}
