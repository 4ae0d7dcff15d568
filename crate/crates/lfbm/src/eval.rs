//! Task metrics: per-pixel MSE (full and masked), step average precision
//! over the anomaly ranking, and an unbiased Gaussian-kernel MMD used as
//! the desk-scale generation-quality statistic.

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::inference::{sample_posterior, LangevinConfig};
use crate::model::{joint_log_prob, Generator};
use crate::tensor::Tensor;

/// Mean squared difference over the included coordinates. `include` holds
/// 0/1 bits per coordinate (callers pass the occluded-region complement
/// when scoring recovery); `None` includes everything.
pub fn mse(a: &[f64], b: &[f64], include: Option<&[f64]>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!("mse: length {} vs {}", a.len(), b.len())));
    }
    match include {
        None => {
            if a.is_empty() {
                return Err(Error::contract("mse over an empty set"));
            }
            Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
        }
        Some(bits) => {
            if bits.len() != a.len() {
                return Err(Error::contract("mse: include-mask length mismatch"));
            }
            let count = bits.iter().filter(|&&m| m == 1.0).count();
            if count == 0 {
                return Err(Error::contract("mse: empty inclusion set"));
            }
            let total: f64 = a
                .iter()
                .zip(b)
                .zip(bits)
                .filter(|&(_, &m)| m == 1.0)
                .map(|((x, y), _)| (x - y) * (x - y))
                .sum();
            Ok(total / count as f64)
        }
    }
}

/// Scores with parallel anomaly labels (1 = anomaly). Higher scores mean
/// more normal; ranking for the precision-recall sweep is by ascending
/// score.
#[derive(Clone, Debug)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<ScoredSet> {
        if scores.len() != labels.len() {
            return Err(Error::contract("scored set: length mismatch"));
        }
        Ok(ScoredSet { scores, labels })
    }
}

/// Step-function average precision over the ascending-score ranking, the
/// anomalous class being positive. Ties keep stable input order.
pub fn auprc(set: &ScoredSet) -> Result<f64> {
    let positives = set.labels.iter().filter(|&&l| l == 1).count();
    let negatives = set.labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::contract("auprc needs at least one positive and one negative label"));
    }
    let mut order: Vec<usize> = (0..set.scores.len()).collect();
    order.sort_by(|&a, &b| set.scores[a].partial_cmp(&set.scores[b]).unwrap());
    let mut tp = 0usize;
    let mut ap = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if set.labels[i] == 1 {
            tp += 1;
            let precision = tp as f64 / (rank + 1) as f64;
            ap += precision / positives as f64;
        }
    }
    Ok(ap)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Unbiased Gaussian-kernel MMD^2 estimate with a median-heuristic
/// bandwidth over the pooled sample, clipped at zero.
pub fn mmd(x: &[f64], y: &[f64], dim: usize) -> Result<f64> {
    if dim == 0 || x.len() % dim != 0 || y.len() % dim != 0 {
        return Err(Error::contract("mmd: buffers are not [n, dim]"));
    }
    let nx = x.len() / dim;
    let ny = y.len() / dim;
    if nx == 0 || ny == 0 {
        return Err(Error::contract("mmd: empty sample"));
    }
    fn row(buf: &[f64], i: usize, dim: usize) -> &[f64] {
        &buf[i * dim..(i + 1) * dim]
    }

    // pooled median of pairwise squared distances
    let total = nx + ny;
    let pooled_row = |i: usize| if i < nx { row(x, i, dim) } else { row(y, i - nx, dim) };
    let mut dists = Vec::with_capacity(total * (total - 1) / 2);
    for i in 0..total {
        for j in (i + 1)..total {
            dists.push(sq_dist(pooled_row(i), pooled_row(j)));
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if dists.is_empty() {
        1.0
    } else if dists.len() % 2 == 1 {
        dists[dists.len() / 2]
    } else {
        0.5 * (dists[dists.len() / 2 - 1] + dists[dists.len() / 2])
    };
    let bandwidth = if median > 1e-12 { median } else { 1.0 };
    let kernel = |a: &[f64], b: &[f64]| (-sq_dist(a, b) / bandwidth).exp();

    let mut kxx = 0.0;
    for i in 0..nx {
        for j in 0..nx {
            if i != j {
                kxx += kernel(row(x, i, dim), row(x, j, dim));
            }
        }
    }
    let mut kyy = 0.0;
    for i in 0..ny {
        for j in 0..ny {
            if i != j {
                kyy += kernel(row(y, i, dim), row(y, j, dim));
            }
        }
    }
    let mut kxy = 0.0;
    for i in 0..nx {
        for j in 0..ny {
            kxy += kernel(row(x, i, dim), row(y, j, dim));
        }
    }
    let est = if nx > 1 { kxx / (nx * (nx - 1)) as f64 } else { 0.0 }
        + if ny > 1 { kyy / (ny * (ny - 1)) as f64 } else { 0.0 }
        - 2.0 * kxy / (nx * ny) as f64;
    Ok(est.max(0.0))
}

/// Joint log-probability decision scores for a test batch: infer latents
/// with the short-run sampler, then score log p(x, z). Higher = more
/// normal.
pub fn anomaly_scores(
    prior: &FlowModel,
    gen: &Generator,
    x_test: &[f64],
    cfg: &LangevinConfig,
) -> Result<Vec<f64>> {
    let n = x_test.len() / gen.data_dim;
    let (z, _) = sample_posterior(prior, gen, x_test, cfg, None)?;
    let x_t = Tensor::from_values(&[n, gen.data_dim], x_test.to_vec())?;
    let z_t = Tensor::from_values(&[n, prior.dim], z)?;
    Ok(joint_log_prob(prior, gen, &x_t, &z_t)?.values())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::OutputActivation;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn mse_basics() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0], None).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 0.0], &[1.0, 1.0], None).unwrap(), 1.0);
        // include coords {0, 2}: (1 + 16) / 2
        let got = mse(&[0.0, 2.0, 4.0], &[1.0, 2.0, 0.0], Some(&[1.0, 0.0, 1.0])).unwrap();
        assert_eq!(got, 8.5);
    }

    #[test]
    fn mse_empty_inclusion_rejected() {
        assert!(mse(&[1.0], &[2.0], Some(&[0.0])).is_err());
    }

    #[test]
    fn auprc_perfect_separation() {
        // all anomalies score lower than all normals
        let set = ScoredSet::new(vec![-9.0, -8.0, -1.0, 0.0], vec![1, 1, 0, 0]).unwrap();
        assert_eq!(auprc(&set).unwrap(), 1.0);
    }

    #[test]
    fn auprc_one_normal_first() {
        // normal ranked most anomalous, single anomaly second
        let set = ScoredSet::new(vec![-10.0, -5.0], vec![0, 1]).unwrap();
        assert_eq!(auprc(&set).unwrap(), 0.5);
    }

    #[test]
    fn auprc_paired_example() {
        let set = ScoredSet::new(vec![-10.0, -1.0, -5.0, -0.5], vec![1, 0, 1, 0]).unwrap();
        assert_eq!(auprc(&set).unwrap(), 1.0);
    }

    #[test]
    fn auprc_single_class_rejected() {
        let set = ScoredSet::new(vec![1.0, 2.0], vec![1, 1]).unwrap();
        assert!(auprc(&set).is_err());
    }

    /// Brute-force oracle: enumerate every threshold, take the step AP.
    fn auprc_bruteforce(scores: &[f64], labels: &[u8]) -> f64 {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
        let p = labels.iter().filter(|&&l| l == 1).count() as f64;
        let mut tp = 0.0;
        let mut last_recall = 0.0;
        let mut ap = 0.0;
        for (rank, &i) in order.iter().enumerate() {
            if labels[i] == 1 {
                tp += 1.0;
            }
            let recall = tp / p;
            let precision = tp / (rank + 1) as f64;
            ap += (recall - last_recall) * precision;
            last_recall = recall;
        }
        ap
    }

    #[test]
    fn auprc_matches_bruteforce_on_all_small_sets() {
        // every label pattern of size <= 8 with one fixed score ranking
        for n in 2..=8usize {
            for pattern in 1..(1u32 << n) - 1 {
                let labels: Vec<u8> = (0..n).map(|i| ((pattern >> i) & 1) as u8).collect();
                let scores: Vec<f64> = (0..n).map(|i| i as f64 * 0.5 - 2.0).collect();
                let set = ScoredSet::new(scores.clone(), labels.clone()).unwrap();
                let got = auprc(&set).unwrap();
                let want = auprc_bruteforce(&scores, &labels);
                assert!((got - want).abs() < 1e-12, "n={n} pattern={pattern:b}: {got} vs {want}");
            }
        }
    }

    proptest! {
        #[test]
        fn auprc_invariant_under_monotone_transform(
            raw in proptest::collection::vec((-50.0f64..50.0, 0..2u8), 4..24)
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s).collect();
            let labels: Vec<u8> = raw.iter().map(|(_, l)| *l).collect();
            let pos = labels.iter().filter(|&&l| l == 1).count();
            prop_assume!(pos > 0 && pos < labels.len());
            // distinct scores keep the ranking identical under the transform
            let mut sorted = scores.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            prop_assume!(sorted.windows(2).all(|w| w[1] - w[0] > 1e-9));

            let base = auprc(&ScoredSet::new(scores.clone(), labels.clone()).unwrap()).unwrap();
            let transformed: Vec<f64> = scores.iter().map(|s| (0.3 * s).exp() + 2.0 * s).collect();
            let t = auprc(&ScoredSet::new(transformed, labels).unwrap()).unwrap();
            prop_assert!((base - t).abs() < 1e-12);
        }

        #[test]
        fn mse_symmetric(
            pairs in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..32)
        ) {
            let a: Vec<f64> = pairs.iter().map(|(x, _)| *x).collect();
            let b: Vec<f64> = pairs.iter().map(|(_, y)| *y).collect();
            let ab = mse(&a, &b, None).unwrap();
            let ba = mse(&b, &a, None).unwrap();
            prop_assert!((ab - ba).abs() < 1e-14);
            prop_assert!((mse(&a, &a, None).unwrap()).abs() < 1e-14);
        }
    }

    #[test]
    fn mmd_identical_sets_clip_to_zero() {
        let x = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        assert_eq!(mmd(&x, &x, 2).unwrap(), 0.0);
    }

    #[test]
    fn mmd_detects_shifted_distributions() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let n = 500;
        let x: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let y: Vec<f64> = (0..n).map(|_| 10.0 + rng.sample::<f64, _>(StandardNormal)).collect();
        let observed = mmd(&x, &y, 1).unwrap();

        // permutation null: shuffle the pooled sample, split, re-estimate
        let mut pooled: Vec<f64> = x.iter().chain(&y).copied().collect();
        let mut null = Vec::new();
        for _ in 0..100 {
            pooled.shuffle(&mut rng);
            null.push(mmd(&pooled[..n], &pooled[n..], 1).unwrap());
        }
        null.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let p99 = null[98];
        assert!(observed > p99, "observed {observed} below null 99th pct {p99}");
    }

    #[test]
    fn mmd_permutation_invariant() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let x: Vec<f64> = (0..60).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let y: Vec<f64> = (0..40).map(|_| 0.5 + rng.sample::<f64, _>(StandardNormal)).collect();
        let base = mmd(&x, &y, 2).unwrap();

        // shuffle rows of x
        let mut rows: Vec<&[f64]> = x.chunks(2).collect();
        rows.shuffle(&mut rng);
        let shuffled: Vec<f64> = rows.concat();
        assert!((mmd(&shuffled, &y, 2).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn anomaly_scores_separate_model_from_shifted_data() {
        let prior = FlowModel::identity(2, 1).unwrap();
        let gen = Generator::new(2, 3, &[8], OutputActivation::Tanh, 1.0, 9).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let n = 120;
        // in-model data: x = g(z) + sigma-noise scaled down for separation
        let mut x_in = Vec::with_capacity(n * 3);
        for _ in 0..n {
            let z: Vec<f64> = (0..2).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let g = gen.decode_values(&z).unwrap();
            for v in g {
                x_in.push(v + 0.1 * rng.sample::<f64, _>(StandardNormal));
            }
        }
        // shifted data
        let x_out: Vec<f64> = x_in.iter().map(|v| v + 3.0).collect();
        let cfg = LangevinConfig::new(30, 0.05, 3);
        let s_in = anomaly_scores(&prior, &gen, &x_in, &cfg).unwrap();
        let s_out = anomaly_scores(&prior, &gen, &x_out, &cfg).unwrap();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&s_in) > mean(&s_out),
            "in-model {} should beat shifted {}",
            mean(&s_in),
            mean(&s_out)
        );
    }

    #[test]
    fn duplicate_rows_equal_scores_in_noise_free_mode() {
        let prior = FlowModel::random(2, 2, 8, 15, 0.3).unwrap();
        let gen = Generator::new(2, 3, &[8], OutputActivation::Tanh, 1.0, 16).unwrap();
        let row = vec![0.3, -0.2, 0.5];
        let x: Vec<f64> = row.iter().chain(&row).copied().collect();
        let mut cfg = LangevinConfig::new(25, 0.05, 1);
        cfg.noise_enabled = false;
        let s = anomaly_scores(&prior, &gen, &x, &cfg).unwrap();
        assert_eq!(s[0], s[1]);
    }
}
