//! Non-compositional histogram baseline: per-description, per-channel mean of
//! blurred discretized training observations with add-one smoothing.

use crate::corpus::{normalize_description, ColorPoint, Observation};
use crate::discretize::{joint_probability, BinnedDistribution, DiscretizerConfig};
use crate::error::{Error, Result};
use crate::evaluate::ColorModel;
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct DescriptionEntry {
    pub(crate) count: usize,
    pub(crate) dists: [BinnedDistribution; 3],
}

/// Fitted baseline: one smoothed distribution triple per training description.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramModel {
    table: BTreeMap<String, DescriptionEntry>,
    config: DiscretizerConfig,
}

impl HistogramModel {
    pub fn config(&self) -> &DiscretizerConfig {
        &self.config
    }

    /// Observation count for a description, if seen in training.
    pub fn observation_count(&self, description: &str) -> Option<usize> {
        self.table
            .get(&normalize_description(description))
            .map(|e| e.count)
    }

    pub fn descriptions(&self) -> impl Iterator<Item = &str> {
        self.table.keys().map(String::as_str)
    }

    pub(crate) fn entries(&self) -> impl Iterator<Item = (&str, &DescriptionEntry)> {
        self.table.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn from_entries(
        config: DiscretizerConfig,
        entries: impl IntoIterator<Item = (String, usize, [BinnedDistribution; 3])>,
    ) -> Self {
        let table = entries
            .into_iter()
            .map(|(desc, count, dists)| (desc, DescriptionEntry { count, dists }))
            .collect();
        Self { table, config }
    }
}

/// Fits the baseline: per description t and channel c, bin i holds
/// (sum of blurred masses + 1) / (count + n).
pub fn fit_baseline(train: &[Observation], config: DiscretizerConfig) -> Result<HistogramModel> {
    if train.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let n = config.resolution;
    let mut sums: BTreeMap<&str, (usize, [Vec<f64>; 3])> = BTreeMap::new();
    for obs in train {
        let blurred = config.discretize_point(&obs.color)?;
        let entry = sums
            .entry(&obs.description)
            .or_insert_with(|| (0, [vec![0.0; n], vec![0.0; n], vec![0.0; n]]));
        entry.0 += 1;
        for (acc, dist) in entry.1.iter_mut().zip(&blurred) {
            for (a, m) in acc.iter_mut().zip(dist.masses()) {
                *a += m;
            }
        }
    }
    let mut table = BTreeMap::new();
    for (desc, (count, channel_sums)) in sums {
        let denom = (count + n) as f64;
        let dists = channel_sums.map(|sum| {
            BinnedDistribution::new(sum.iter().map(|s| (s + 1.0) / denom).collect())
                .expect("smoothed masses normalize")
        });
        table.insert(desc.to_string(), DescriptionEntry { count, dists });
    }
    Ok(HistogramModel { table, config })
}

/// Stored distributions for a description; unknown descriptions are an error
/// (the baseline cannot extrapolate).
pub fn query_baseline<'a>(
    model: &'a HistogramModel,
    description: &str,
) -> Result<&'a [BinnedDistribution; 3]> {
    let key = normalize_description(description);
    model
        .table
        .get(&key)
        .map(|e| &e.dists)
        .ok_or(Error::UnknownDescription(key))
}

impl ColorModel for HistogramModel {
    fn kind(&self) -> &str {
        "baseline"
    }

    fn resolution(&self) -> usize {
        self.config.resolution
    }

    fn probability(&self, description: &str, point: &ColorPoint) -> Result<f64> {
        let dists = query_baseline(self, description)?;
        joint_probability(&dists[0], &dists[1], &dists[2], point)
    }
}
