//! Discretization of continuous color channels into probability mass vectors.
//!
//! A channel value in `[0, 1]` is mapped either to a one-hot bin vector or to
//! a blurred vector where each bin holds the probability that a Gaussian
//! centered on the value lands in that bin. Saturation and value use a
//! Gaussian truncated to `[0, 1]`; hue uses a circularly wrapped Gaussian.

use crate::corpus::ColorPoint;
use crate::error::{Error, Result};
use statrs::function::erf::erfc;

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Standard normal CDF.
fn phi(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

/// Which Gaussian family a channel uses when blurring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlurMode {
    /// Gaussian truncated to `[0, 1]` and renormalized.
    Truncated,
    /// Circularly wrapped Gaussian with period 1.
    Wrapped,
}

/// A probability mass vector over `n` equal-width bins of one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedDistribution {
    masses: Vec<f64>,
}

impl BinnedDistribution {
    /// Wraps a raw mass vector, checking non-negativity and normalization.
    pub fn new(masses: Vec<f64>) -> Result<Self> {
        if masses.len() < 2 {
            return Err(Error::Config("resolution must be at least 2".into()));
        }
        if masses.iter().any(|&m| m < 0.0 || !m.is_finite()) {
            return Err(Error::Config("bin masses must be finite and non-negative".into()));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("bin masses sum to {total}, expected 1")));
        }
        Ok(Self { masses })
    }

    pub fn uniform(resolution: usize) -> Self {
        Self {
            masses: vec![1.0 / resolution as f64; resolution],
        }
    }

    pub fn resolution(&self) -> usize {
        self.masses.len()
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    /// Mass of the 1-based bin `index`.
    pub fn mass_at(&self, index: usize) -> f64 {
        self.masses[index - 1]
    }

    /// Mass of the bin containing channel value `x`.
    pub fn mass_for(&self, x: f64) -> Result<f64> {
        Ok(self.mass_at(bin_index(x, self.resolution())?))
    }

    /// Total-variation distance to another distribution of the same resolution.
    pub fn tv_distance(&self, other: &Self) -> f64 {
        0.5 * self
            .masses
            .iter()
            .zip(&other.masses)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

/// Discretization settings shared by both models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscretizerConfig {
    pub resolution: usize,
    pub sigma: f64,
    pub hue_mode: BlurMode,
}

impl DiscretizerConfig {
    /// Default blur width for a given resolution: sigma = 1/(2n).
    pub fn default_sigma(resolution: usize) -> f64 {
        1.0 / (2.0 * resolution as f64)
    }

    pub fn new(resolution: usize, sigma: f64) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::Config("resolution must be at least 2".into()));
        }
        if sigma <= 0.0 || !sigma.is_finite() {
            return Err(Error::Config("sigma must be positive".into()));
        }
        Ok(Self {
            resolution,
            sigma,
            hue_mode: BlurMode::Wrapped,
        })
    }

    pub fn with_resolution(resolution: usize) -> Result<Self> {
        Self::new(resolution, Self::default_sigma(resolution))
    }

    /// Blurred binning of one channel value under the given mode.
    pub fn blur(&self, x: f64, mode: BlurMode) -> Result<BinnedDistribution> {
        check_unit(x)?;
        let masses = gaussian_bin_masses(x, self.sigma, self.resolution, mode);
        Ok(BinnedDistribution { masses })
    }

    pub fn blur_hue(&self, x: f64) -> Result<BinnedDistribution> {
        self.blur(x, self.hue_mode)
    }

    /// Blurs all three channels of a point (hue per `hue_mode`, s/v truncated).
    pub fn discretize_point(&self, point: &ColorPoint) -> Result<[BinnedDistribution; 3]> {
        Ok([
            self.blur_hue(point.h)?,
            self.blur(point.s, BlurMode::Truncated)?,
            self.blur(point.v, BlurMode::Truncated)?,
        ])
    }
}

fn check_unit(x: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&x) || !x.is_finite() {
        return Err(Error::DomainError(x));
    }
    Ok(())
}

/// 1-based index of the bin containing `x`: the `i` with (i-1)/n < x <= i/n.
/// `x = 0` is assigned to bin 1.
pub fn bin_index(x: f64, resolution: usize) -> Result<usize> {
    check_unit(x)?;
    let i = (x * resolution as f64).ceil() as usize;
    Ok(i.clamp(1, resolution))
}

/// All mass in the bin containing `x`.
pub fn one_hot(x: f64, resolution: usize) -> Result<BinnedDistribution> {
    let idx = bin_index(x, resolution)?;
    let mut masses = vec![0.0; resolution];
    masses[idx - 1] = 1.0;
    Ok(BinnedDistribution { masses })
}

/// Per-bin mass of a Gaussian with the given mean and standard deviation,
/// truncated to `[0, 1]` or wrapped with period 1.
///
/// This is also the exact discrete distribution of binned samples drawn from
/// that Gaussian, which is what the synthetic-corpus oracle relies on.
pub fn gaussian_bin_masses(mean: f64, sigma: f64, resolution: usize, mode: BlurMode) -> Vec<f64> {
    let n = resolution as f64;
    match mode {
        BlurMode::Truncated => {
            let denom = phi((1.0 - mean) / sigma) - phi((0.0 - mean) / sigma);
            (1..=resolution)
                .map(|i| {
                    let lo = (i - 1) as f64 / n;
                    let hi = i as f64 / n;
                    (phi((hi - mean) / sigma) - phi((lo - mean) / sigma)) / denom
                })
                .collect()
        }
        BlurMode::Wrapped => {
            // Image terms k in -K..=K; K sized so the omitted tail is < 1e-12.
            let k_max = ((6.0 * sigma).ceil() as i64).max(1);
            let mut masses: Vec<f64> = (1..=resolution)
                .map(|i| {
                    let lo = (i - 1) as f64 / n;
                    let hi = i as f64 / n;
                    let mut mass = 0.0;
                    for k in -k_max..=k_max {
                        let shift = k as f64;
                        mass += phi((hi + shift - mean) / sigma) - phi((lo + shift - mean) / sigma);
                    }
                    mass
                })
                .collect();
            let total: f64 = masses.iter().sum();
            for m in &mut masses {
                *m /= total;
            }
            masses
        }
    }
}

/// Factorized joint probability of a point: product over channels of the mass
/// in the bin containing the point's channel value.
pub fn joint_probability(
    hue: &BinnedDistribution,
    saturation: &BinnedDistribution,
    value: &BinnedDistribution,
    point: &ColorPoint,
) -> Result<f64> {
    let n = hue.resolution();
    if saturation.resolution() != n || value.resolution() != n {
        return Err(Error::Config(format!(
            "resolution mismatch: h={}, s={}, v={}",
            n,
            saturation.resolution(),
            value.resolution()
        )));
    }
    Ok(hue.mass_for(point.h)? * saturation.mass_for(point.s)? * value.mass_for(point.v)?)
}

/// Plot-export format: one CSV row per bin, `channel,bin_index,bin_low,bin_high,mass`.
pub fn export_csv(dists: &[(&str, &BinnedDistribution)]) -> String {
    let mut out = String::from("channel,bin_index,bin_low,bin_high,mass\n");
    for (channel, dist) in dists {
        let n = dist.resolution() as f64;
        for (i, mass) in dist.masses().iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                channel,
                i + 1,
                i as f64 / n,
                (i + 1) as f64 / n,
                mass
            ));
        }
    }
    out
}
