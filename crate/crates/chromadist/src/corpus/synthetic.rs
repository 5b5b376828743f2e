//! Synthetic compositional corpora with analytically known ground truth.
//!
//! Base tokens map to factorized channel distributions (wrapped Gaussian hue,
//! truncated Gaussian saturation/value); modifier tokens apply deterministic
//! parameter transforms. A designated subset of (modifier, base) pairs is held
//! out of training so compositional generalization can be measured against
//! the generator's own distribution table.

use super::{tokenize, ColorPoint, CorpusSplit, Observation, SplitLabel, Vocabulary};
use crate::discretize::{gaussian_bin_masses, joint_probability, BinnedDistribution, BlurMode};
use crate::error::{Error, Result};
use crate::evaluate::ColorModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

const BASE_WORDS: [&str; 12] = [
    "red", "blue", "green", "teal", "pink", "brown", "cyan", "gold", "plum", "coral", "amber",
    "violet",
];
const MODIFIER_WORDS: [&str; 8] = [
    "dark", "pale", "vivid", "deep", "faint", "mild", "cool", "warm",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelParams {
    pub mean: f64,
    pub sigma: f64,
}

/// Ground-truth factorized distribution for one description.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NameDistribution {
    pub hue: ChannelParams,
    pub saturation: ChannelParams,
    pub value: ChannelParams,
}

impl NameDistribution {
    /// Exact per-bin masses of the generating distribution at a resolution.
    pub fn discretize(&self, resolution: usize) -> [BinnedDistribution; 3] {
        let make = |p: &ChannelParams, mode| {
            BinnedDistribution::new(gaussian_bin_masses(p.mean, p.sigma, resolution, mode))
                .expect("generator masses normalize")
        };
        [
            make(&self.hue, BlurMode::Wrapped),
            make(&self.saturation, BlurMode::Truncated),
            make(&self.value, BlurMode::Truncated),
        ]
    }
}

/// Generator output: the full corpus (every name in every split), the
/// extrapolation variant (held-out pairs stripped from train/dev, identical
/// test rows), and the ground-truth table.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub full: CorpusSplit,
    pub extrapolation: CorpusSplit,
    pub ground_truth: BTreeMap<String, NameDistribution>,
    pub held_out: Vec<String>,
}

fn word(list: &[&str], prefix: &str, i: usize) -> String {
    list.get(i)
        .map(|w| w.to_string())
        .unwrap_or_else(|| format!("{prefix}{i}"))
}

/// Deterministic modifier semantics: darken/lighten value, shift saturation,
/// widen hue spread for every other modifier.
fn apply_modifier(base: &NameDistribution, j: usize) -> NameDistribution {
    let v_factor = [0.55, 1.35, 0.7, 1.2][j % 4];
    let s_shift = [-0.22, 0.15, -0.12, 0.1][j % 4] * (1.0 + 0.3 * (j / 4) as f64);
    let h_widen = 1.0 + 0.6 * ((j % 2) as f64);
    NameDistribution {
        hue: ChannelParams {
            mean: base.hue.mean,
            sigma: base.hue.sigma * h_widen,
        },
        saturation: ChannelParams {
            mean: (base.saturation.mean + s_shift).clamp(0.05, 0.95),
            sigma: base.saturation.sigma,
        },
        value: ChannelParams {
            mean: (base.value.mean * v_factor).clamp(0.05, 0.95),
            sigma: base.value.sigma,
        },
    }
}

fn sample_normal(rng: &mut ChaCha8Rng, mean: f64, sigma: f64) -> f64 {
    // Box-Muller, cosine branch only, for a fixed draw order.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    mean + sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn sample_point(rng: &mut ChaCha8Rng, dist: &NameDistribution) -> ColorPoint {
    let h = sample_normal(rng, dist.hue.mean, dist.hue.sigma).rem_euclid(1.0);
    let mut truncated = |p: &ChannelParams| loop {
        let x = sample_normal(rng, p.mean, p.sigma);
        if (0.0..=1.0).contains(&x) {
            return x;
        }
    };
    let s = truncated(&dist.saturation);
    let v = truncated(&dist.value);
    ColorPoint { h, s, v }
}

pub fn generate_synthetic(
    grammar_seed: u64,
    n_base: usize,
    n_modifiers: usize,
    samples_per_name: usize,
) -> Result<SyntheticCorpus> {
    if n_base < 2 || n_modifiers < 1 || samples_per_name < 1 {
        return Err(Error::Config(
            "need n_base >= 2, n_modifiers >= 1, samples_per_name >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(grammar_seed);

    // Base distributions: hues spread around the circle, moderate spreads.
    let mut bases = Vec::with_capacity(n_base);
    for i in 0..n_base {
        let jitter: f64 = rng.random::<f64>() - 0.5;
        bases.push(NameDistribution {
            hue: ChannelParams {
                mean: ((i as f64 + 0.5) / n_base as f64 + 0.04 * jitter).rem_euclid(1.0),
                sigma: 0.02 + 0.02 * rng.random::<f64>(),
            },
            saturation: ChannelParams {
                mean: 0.55 + 0.3 * rng.random::<f64>(),
                sigma: 0.03 + 0.03 * rng.random::<f64>(),
            },
            value: ChannelParams {
                mean: 0.55 + 0.3 * rng.random::<f64>(),
                sigma: 0.03 + 0.03 * rng.random::<f64>(),
            },
        });
    }

    // Name table in a fixed order: bases first, then modifier-base pairs.
    let mut ground_truth = BTreeMap::new();
    let mut names = Vec::new();
    let mut held_out = Vec::new();
    for (i, base) in bases.iter().enumerate() {
        let name = word(&BASE_WORDS, "shade", i);
        names.push(name.clone());
        ground_truth.insert(name, *base);
    }
    for j in 0..n_modifiers {
        for (i, base) in bases.iter().enumerate() {
            let name = format!("{} {}", word(&MODIFIER_WORDS, "mod", j), word(&BASE_WORDS, "shade", i));
            names.push(name.clone());
            ground_truth.insert(name.clone(), apply_modifier(base, j));
            if i == (j + 1) % n_base {
                held_out.push(name);
            }
        }
    }

    let n_dev = samples_per_name / 10;
    let n_test = samples_per_name / 10;
    let mut rows: Vec<(String, ColorPoint, SplitLabel)> = Vec::new();
    for name in &names {
        let dist = &ground_truth[name];
        for k in 0..samples_per_name {
            let label = if k < n_dev {
                SplitLabel::Dev
            } else if k < n_dev + n_test {
                SplitLabel::Test
            } else {
                SplitLabel::Train
            };
            rows.push((name.clone(), sample_point(&mut rng, dist), label));
        }
    }

    // Vocabulary from the extrapolation training set; it covers the full
    // corpus too since every token occurs in some non-held-out name.
    let vocabulary = Vocabulary::from_tokens(
        rows.iter()
            .filter(|(name, _, label)| {
                *label == SplitLabel::Train && !held_out.contains(name)
            })
            .flat_map(|(name, _, _)| tokenize(name).expect("synthetic names tokenize")),
    );

    let build = |skip_held_out_train: bool| -> Result<CorpusSplit> {
        let mut split = CorpusSplit {
            train: Vec::new(),
            dev: Vec::new(),
            test: Vec::new(),
            vocabulary: vocabulary.clone(),
        };
        for (name, color, label) in &rows {
            let excluded = skip_held_out_train
                && *label != SplitLabel::Test
                && held_out.contains(name);
            if excluded {
                continue;
            }
            let obs = Observation {
                description: name.clone(),
                tokens: vocabulary.indices(&tokenize(name)?)?,
                color: *color,
            };
            match label {
                SplitLabel::Train => split.train.push(obs),
                SplitLabel::Dev => split.dev.push(obs),
                SplitLabel::Test => split.test.push(obs),
            }
        }
        Ok(split)
    };

    Ok(SyntheticCorpus {
        full: build(false)?,
        extrapolation: build(true)?,
        ground_truth,
        held_out,
    })
}

/// Oracle model scoring points with the generator's exact discretized
/// distributions.
#[derive(Debug, Clone)]
pub struct GroundTruthModel {
    dists: BTreeMap<String, [BinnedDistribution; 3]>,
    resolution: usize,
}

impl GroundTruthModel {
    pub fn new(table: &BTreeMap<String, NameDistribution>, resolution: usize) -> Self {
        let dists = table
            .iter()
            .map(|(name, d)| (name.clone(), d.discretize(resolution)))
            .collect();
        Self { dists, resolution }
    }

    pub fn distributions(&self, description: &str) -> Option<&[BinnedDistribution; 3]> {
        self.dists.get(description)
    }
}

impl ColorModel for GroundTruthModel {
    fn kind(&self) -> &str {
        "ground-truth"
    }

    fn resolution(&self) -> usize {
        self.resolution
    }

    fn probability(&self, description: &str, point: &ColorPoint) -> Result<f64> {
        let dists = self
            .dists
            .get(description)
            .ok_or_else(|| Error::UnknownDescription(description.to_string()))?;
        joint_probability(&dists[0], &dists[1], &dists[2], point)
    }
}

/// Ground-truth TSV export: one row per description with channel parameters.
pub fn ground_truth_tsv(table: &BTreeMap<String, NameDistribution>) -> String {
    let mut out = String::from(
        "description\th_mean\th_sigma\ts_mean\ts_sigma\tv_mean\tv_sigma\n",
    );
    for (name, d) in table {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            name,
            d.hue.mean,
            d.hue.sigma,
            d.saturation.mean,
            d.saturation.sigma,
            d.value.mean,
            d.value.sigma
        ));
    }
    out
}
