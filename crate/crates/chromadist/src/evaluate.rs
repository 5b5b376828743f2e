//! Perplexity and standardized perplexity over a test split, candidate
//! ranking, and the Spearman conditional-independence analysis.

use crate::corpus::{ColorPoint, Observation};
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Anything that assigns a probability to (description, color point).
pub trait ColorModel {
    fn kind(&self) -> &str;
    /// Per-channel bin resolution of the model's output distributions.
    fn resolution(&self) -> usize;
    fn probability(&self, description: &str, point: &ColorPoint) -> Result<f64>;
}

/// The uniform distribution at a resolution; scores every point at 1/n^3.
#[derive(Debug, Clone, Copy)]
pub struct UniformModel {
    pub resolution: usize,
}

impl ColorModel for UniformModel {
    fn kind(&self) -> &str {
        "uniform"
    }

    fn resolution(&self) -> usize {
        self.resolution
    }

    fn probability(&self, _description: &str, _point: &ColorPoint) -> Result<f64> {
        let n = self.resolution as f64;
        Ok(1.0 / (n * n * n))
    }
}

/// Wraps a model and scores unknown descriptions/tokens uniformly instead of
/// failing; this is the ceiling a non-compositional model reaches when forced
/// to extrapolate.
pub struct UniformFallback<'a, M: ColorModel + ?Sized> {
    pub inner: &'a M,
}

impl<M: ColorModel + ?Sized> ColorModel for UniformFallback<'_, M> {
    fn kind(&self) -> &str {
        "fallback-uniform"
    }

    fn resolution(&self) -> usize {
        self.inner.resolution()
    }

    fn probability(&self, description: &str, point: &ColorPoint) -> Result<f64> {
        match self.inner.probability(description, point) {
            Err(Error::UnknownDescription(_)) | Err(Error::UnknownTokens { .. }) => {
                let n = self.resolution() as f64;
                Ok(1.0 / (n * n * n))
            }
            other => other,
        }
    }
}

/// Perplexity of a model on one test split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub model: String,
    pub resolution: usize,
    pub observation_count: usize,
    pub perplexity: f64,
    /// perplexity / n^3; a uniform model scores exactly 1.
    pub standardized: f64,
}

impl EvalReport {
    pub fn tsv_header() -> &'static str {
        "model\tresolution\tperp\tperpstd"
    }

    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}",
            self.model, self.resolution, self.perplexity, self.standardized
        )
    }
}

/// PP = exp2 of the negative mean base-2 log probability over the test set.
/// Log terms accumulate with compensated summation.
pub fn perplexity(model: &dyn ColorModel, test: &[Observation]) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Evaluation("empty test set".into()));
    }
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for (i, obs) in test.iter().enumerate() {
        let p = model.probability(&obs.description, &obs.color)?;
        if p <= 0.0 || !p.is_finite() {
            return Err(Error::Evaluation(format!(
                "model {} returned probability {} for item {} ({:?})",
                model.kind(),
                p,
                i,
                obs.description
            )));
        }
        let term = p.log2();
        let y = term - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    let pp = (-sum / test.len() as f64).exp2();
    let n = model.resolution() as f64;
    Ok(EvalReport {
        model: model.kind().to_string(),
        resolution: model.resolution(),
        observation_count: test.len(),
        perplexity: pp,
        standardized: pp / (n * n * n),
    })
}

/// Ranks candidate points by descending model probability; stable, so ties
/// keep input order. Scores are returned for threshold decisions.
pub fn rank_candidates(
    model: &dyn ColorModel,
    description: &str,
    candidates: &[ColorPoint],
) -> Result<Vec<(ColorPoint, f64)>> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no candidates supplied".into()));
    }
    let mut scored: Vec<(ColorPoint, f64)> = candidates
        .iter()
        .map(|c| Ok((*c, model.probability(description, c)?)))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite scores"));
    Ok(scored)
}

/// Channel-pair labels in report order.
pub const CHANNEL_PAIRS: [&str; 3] = ["h-s", "h-v", "s-v"];

/// Per-description absolute Spearman correlations and the third quartile per
/// channel pair.
#[derive(Debug, Clone)]
pub struct CorrelationReport {
    /// (description, [|rho| for h-s, h-v, s-v])
    pub per_description: Vec<(String, [f64; 3])>,
    pub q3: [f64; 3],
}

impl CorrelationReport {
    pub fn tsv(&self) -> String {
        let mut out = String::from("pair\tq3\n");
        for (pair, q3) in CHANNEL_PAIRS.iter().zip(&self.q3) {
            out.push_str(&format!("{pair}\t{q3}\n"));
        }
        out
    }
}

/// Average ranks with ties sharing the mean of their positions.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average-rank tie handling.
/// Returns 0 when either side has zero rank variance.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

fn quartile3(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let pos = 0.75 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    values[lo] * (1.0 - frac) + values[hi] * frac
}

/// Groups observations by description (groups below `min_count` excluded) and
/// reports |rho| per channel pair plus each pair's third quartile.
pub fn spearman_independence(
    observations: &[Observation],
    min_count: usize,
) -> Result<CorrelationReport> {
    let mut groups: BTreeMap<&str, Vec<&ColorPoint>> = BTreeMap::new();
    for obs in observations {
        groups.entry(&obs.description).or_default().push(&obs.color);
    }
    let mut per_description = Vec::new();
    for (desc, points) in groups {
        if points.len() < min_count {
            continue;
        }
        let channel = |i: usize| -> Vec<f64> { points.iter().map(|p| p.channel(i)).collect() };
        let chans = [channel(0), channel(1), channel(2)];
        let rhos = [
            spearman(&chans[0], &chans[1]).abs(),
            spearman(&chans[0], &chans[2]).abs(),
            spearman(&chans[1], &chans[2]).abs(),
        ];
        per_description.push((desc.to_string(), rhos));
    }
    if per_description.is_empty() {
        return Err(Error::Evaluation(format!(
            "no description has at least {min_count} observations"
        )));
    }
    let mut q3 = [0.0; 3];
    for (i, slot) in q3.iter_mut().enumerate() {
        let mut vals: Vec<f64> = per_description.iter().map(|(_, r)| r[i]).collect();
        *slot = quartile3(&mut vals);
    }
    Ok(CorrelationReport {
        per_description,
        q3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn obs(desc: &str, h: f64, s: f64, v: f64) -> Observation {
        Observation {
            description: desc.to_string(),
            tokens: vec![],
            color: ColorPoint::new(h, s, v).unwrap(),
        }
    }

    struct FixedModel {
        probs: Vec<f64>,
        resolution: usize,
    }

    impl ColorModel for FixedModel {
        fn kind(&self) -> &str {
            "fixed"
        }
        fn resolution(&self) -> usize {
            self.resolution
        }
        fn probability(&self, description: &str, _point: &ColorPoint) -> Result<f64> {
            let idx: usize = description.parse().unwrap();
            Ok(self.probs[idx])
        }
    }

    #[test]
    fn uniform_model_standardized_is_one() {
        for n in [4usize, 64, 256] {
            let model = UniformModel { resolution: n };
            let test = vec![obs("x", 0.1, 0.2, 0.3), obs("y", 0.9, 0.8, 0.7)];
            let report = perplexity(&model, &test).unwrap();
            let n3 = (n * n * n) as f64;
            assert!((report.perplexity - n3).abs() < 1e-9 * n3);
            assert!((report.standardized - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn perplexity_hand_computed() {
        // probabilities 1/8 and 1/2 -> PP = exp2((3+1)/2) = 4
        let model = FixedModel {
            probs: vec![0.125, 0.5],
            resolution: 4,
        };
        let test = vec![obs("0", 0.1, 0.1, 0.1), obs("1", 0.2, 0.2, 0.2)];
        let report = perplexity(&model, &test).unwrap();
        assert!((report.perplexity - 4.0).abs() < 1e-12);

        // certainty -> PP = 1
        let model = FixedModel {
            probs: vec![1.0],
            resolution: 4,
        };
        let report = perplexity(&model, &[obs("0", 0.1, 0.1, 0.1)]).unwrap();
        assert!((report.perplexity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn perplexity_rejects_zero_probability() {
        let model = FixedModel {
            probs: vec![0.0],
            resolution: 4,
        };
        assert!(matches!(
            perplexity(&model, &[obs("0", 0.1, 0.1, 0.1)]),
            Err(Error::Evaluation(_))
        ));
    }

    #[test]
    fn perplexity_permutation_invariant() {
        let model = FixedModel {
            probs: vec![0.1, 0.02, 0.4, 0.07],
            resolution: 8,
        };
        let mut test: Vec<Observation> =
            (0..4).map(|i| obs(&i.to_string(), 0.5, 0.5, 0.5)).collect();
        let a = perplexity(&model, &test).unwrap();
        test.reverse();
        let b = perplexity(&model, &test).unwrap();
        assert!((a.perplexity - b.perplexity).abs() < 1e-12);
    }

    #[test]
    fn rank_candidates_stable_on_ties() {
        let model = UniformModel { resolution: 4 };
        let candidates = [
            ColorPoint::new(0.1, 0.1, 0.1).unwrap(),
            ColorPoint::new(0.9, 0.9, 0.9).unwrap(),
            ColorPoint::new(0.5, 0.5, 0.5).unwrap(),
        ];
        let ranked = rank_candidates(&model, "anything", &candidates).unwrap();
        let order: Vec<f64> = ranked.iter().map(|(c, _)| c.h).collect();
        assert_eq!(order, vec![0.1, 0.9, 0.5]);

        let single = rank_candidates(&model, "x", &candidates[..1]).unwrap();
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn spearman_perfect_monotone() {
        let x = [0.1, 0.4, 0.2, 0.9];
        let y = [1.0, 4.0, 2.0, 9.0];
        assert!((spearman(&x, &y) - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        assert!((spearman(&x, &neg) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_monotone_transform_invariant() {
        let x = [0.3, 0.1, 0.8, 0.5, 0.2];
        let y = [0.2, 0.9, 0.4, 0.1, 0.6];
        let rho = spearman(&x, &y);
        let fx: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        let fy: Vec<f64> = y.iter().map(|v| v.powi(3) + 2.0).collect();
        assert!((spearman(&fx, &fy) - rho).abs() < 1e-12);
    }

    #[test]
    fn spearman_ties_average_ranks() {
        // [1,2,2,3] ranks -> [1, 2.5, 2.5, 4]
        let ranks = average_ranks(&[1.0, 2.0, 2.0, 3.0]);
        assert_eq!(ranks, vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn independence_report_examples() {
        // one description where s == v exactly -> |rho(s,v)| = 1
        let mut observations: Vec<Observation> = (0..20)
            .map(|i| {
                let t = (i as f64 + 0.5) / 20.0;
                obs("mirror", t, t * 0.9, t * 0.9)
            })
            .collect();
        // independent channels, 1000 draws -> |rho| < 0.1 whp
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            observations.push(obs(
                "noise",
                rng.random(),
                rng.random(),
                rng.random(),
            ));
        }
        let report = spearman_independence(&observations, 20).unwrap();
        let mirror = report
            .per_description
            .iter()
            .find(|(d, _)| d == "mirror")
            .unwrap();
        assert!((mirror.1[2] - 1.0).abs() < 1e-12);
        let noise = report
            .per_description
            .iter()
            .find(|(d, _)| d == "noise")
            .unwrap();
        for rho in noise.1 {
            assert!(rho < 0.1, "rho = {rho}");
        }

        assert!(matches!(
            spearman_independence(&observations, 10_000),
            Err(Error::Evaluation(_))
        ));
    }
}
