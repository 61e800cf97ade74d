//! Null-model significance filter for salient feature groups.
//!
//! Random saliency datasets make every feature salient independently with
//! probability `1 - t`. A real group is kept only if its observed frequency
//! is exceeded or matched in at most `alpha * K` of `K` random datasets.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::saliency::FeatureGroup;
use crate::seeds::{derive_seed, STREAM_NULL};

/// Distinct groups with their occurrence counts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureGroupSet {
    pub groups: BTreeMap<FeatureGroup, u64>,
    /// Number of saliency maps the groups were extracted from.
    pub maps_total: u64,
}

impl FeatureGroupSet {
    pub fn total_count(&self) -> u64 {
        self.groups.values().sum()
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Occurrences of each feature summed over groups, length `d`.
    pub fn feature_frequencies(&self, d: usize) -> Vec<u64> {
        let mut freq = vec![0u64; d];
        for (g, &c) in &self.groups {
            for &m in g.members() {
                freq[m] += c;
            }
        }
        freq
    }

    /// `members<TAB>count` per line, 1-based ids, most frequent first.
    pub fn write_report<W: Write>(&self, mut out: W) -> Result<()> {
        let mut rows: Vec<_> = self.groups.iter().collect();
        rows.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
        for (g, c) in rows {
            writeln!(out, "{}\t{}", g.to_one_based(), c)?;
        }
        Ok(())
    }

    /// Reads the format of [`FeatureGroupSet::write_report`] (extra columns
    /// are ignored). `maps_total` is not part of the report.
    pub fn read_report(text: &str, maps_total: u64) -> Result<Self> {
        let mut set = FeatureGroupSet {
            groups: BTreeMap::new(),
            maps_total,
        };
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            let members = cols.next().unwrap_or_default();
            let count = cols.next().ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: "expected members<TAB>count".into(),
            })?;
            let ids = members
                .split(',')
                .map(|m| match m.trim().parse::<usize>() {
                    Ok(id) if id >= 1 => Ok(id - 1),
                    _ => Err(Error::Parse {
                        line: i + 1,
                        msg: format!("bad feature id {m:?}"),
                    }),
                })
                .collect::<Result<Vec<_>>>()?;
            let count: u64 = count.trim().parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("bad count {count:?}"),
            })?;
            *set.groups.entry(FeatureGroup::new(ids)?).or_insert(0) += count;
        }
        Ok(set)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NullModelConfig {
    /// Number of random datasets.
    pub k: usize,
    pub t: f64,
    /// Largest tolerated fraction of datasets matching or beating a group.
    pub alpha: f64,
    pub seed: u64,
}

impl Default for NullModelConfig {
    fn default() -> Self {
        NullModelConfig {
            k: 5000,
            t: 0.95,
            alpha: 0.02,
            seed: 0,
        }
    }
}

impl NullModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("K must be positive".into()));
        }
        if !(self.t > 0.0 && self.t < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "threshold {} outside (0,1)",
                self.t
            )));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha {} outside (0,1]",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// How random datasets are simulated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NullSampling {
    /// Per-target binomial match counts.
    #[default]
    Binomial,
    /// Materializes every random map; slow, used for cross-checking.
    Literal,
}

/// Probability that a random map's salient set is exactly `group`.
pub fn exact_match_probability(group_size: usize, d: usize, t: f64) -> f64 {
    (1.0 - t).powi(group_size as i32) * t.powi((d - group_size) as i32)
}

/// Match counts `f_{g,k}` of every target in each of `k` random datasets.
///
/// Returns one vector of length `k` per target. Dataset `k` is seeded by
/// `(seed, k)`, so the result does not depend on scheduling.
pub fn random_group_frequencies(
    d: usize,
    maps_per_dataset: u64,
    k: usize,
    t: f64,
    seed: u64,
    targets: &[FeatureGroup],
    sampling: NullSampling,
) -> Result<Vec<Vec<u64>>> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("no target groups".into()));
    }
    if let Some(g) = targets.iter().find(|g| g.members().iter().any(|&m| m >= d)) {
        return Err(Error::InvalidArgument(format!(
            "group {} exceeds feature count {d}",
            g.to_one_based()
        )));
    }
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold {t} outside (0,1)"
        )));
    }
    let per_dataset: Vec<Vec<u64>> = match sampling {
        NullSampling::Binomial => {
            let dists = targets
                .iter()
                .map(|g| {
                    Binomial::new(maps_per_dataset, exact_match_probability(g.len(), d, t))
                        .map_err(|e| Error::Numerical(format!("binomial: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            (0..k)
                .into_par_iter()
                .map(|ki| {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_NULL, ki as u64));
                    dists.iter().map(|b| b.sample(&mut rng)).collect()
                })
                .collect()
        }
        NullSampling::Literal => {
            let index: HashMap<&[usize], usize> = targets
                .iter()
                .enumerate()
                .map(|(i, g)| (g.members(), i))
                .collect();
            (0..k)
                .into_par_iter()
                .map(|ki| {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_NULL, ki as u64));
                    let mut counts = vec![0u64; targets.len()];
                    let mut salient = Vec::with_capacity(d);
                    for _ in 0..maps_per_dataset {
                        salient.clear();
                        for j in 0..d {
                            if rng.random::<f64>() > t {
                                salient.push(j);
                            }
                        }
                        if let Some(&i) = index.get(salient.as_slice()) {
                            counts[i] += 1;
                        }
                    }
                    counts
                })
                .collect()
        }
    };
    Ok((0..targets.len())
        .map(|i| per_dataset.iter().map(|c| c[i]).collect())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupDecision {
    pub group: FeatureGroup,
    pub count: u64,
    /// Random datasets with `f_{g,k} >= f_g`.
    pub exceedances: usize,
    pub survived: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneReport {
    pub survivors: FeatureGroupSet,
    /// One entry per input group, in group order.
    pub decisions: Vec<GroupDecision>,
}

impl PruneReport {
    /// `members<TAB>count<TAB>exceedances` for surviving groups, 1-based ids.
    pub fn write_survivors<W: Write>(&self, mut out: W) -> Result<()> {
        let mut rows: Vec<&GroupDecision> = self.decisions.iter().filter(|d| d.survived).collect();
        rows.sort_by(|a, b| b.count.cmp(&a.count).then(a.group.cmp(&b.group)));
        for d in rows {
            writeln!(
                out,
                "{}\t{}\t{}",
                d.group.to_one_based(),
                d.count,
                d.exceedances
            )?;
        }
        Ok(())
    }
}

/// Drops groups whose frequency is matched or beaten by chance in more
/// than `alpha * K` random datasets.
pub fn prune(
    real: &FeatureGroupSet,
    d: usize,
    config: &NullModelConfig,
    sampling: NullSampling,
) -> Result<PruneReport> {
    config.validate()?;
    if real.maps_total == 0 {
        return Err(Error::InvalidArgument(
            "no saliency maps were processed".into(),
        ));
    }
    if real.is_empty() {
        return Ok(PruneReport {
            survivors: FeatureGroupSet {
                groups: BTreeMap::new(),
                maps_total: real.maps_total,
            },
            decisions: Vec::new(),
        });
    }
    let targets: Vec<FeatureGroup> = real.groups.keys().cloned().collect();
    let null = random_group_frequencies(
        d,
        real.maps_total,
        config.k,
        config.t,
        config.seed,
        &targets,
        sampling,
    )?;
    let limit = config.alpha * config.k as f64;
    let mut survivors = FeatureGroupSet {
        groups: BTreeMap::new(),
        maps_total: real.maps_total,
    };
    let mut decisions = Vec::with_capacity(targets.len());
    for (group, counts) in targets.into_iter().zip(null) {
        let observed = real.groups[&group];
        let exceedances = counts.iter().filter(|&&c| c >= observed).count();
        let survived = exceedances as f64 <= limit;
        if survived {
            survivors.groups.insert(group.clone(), observed);
        }
        decisions.push(GroupDecision {
            group,
            count: observed,
            exceedances,
            survived,
        });
    }
    Ok(PruneReport {
        survivors,
        decisions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group(m: &[usize]) -> FeatureGroup {
        FeatureGroup::new(m.to_vec()).unwrap()
    }

    #[test]
    fn singleton_probability() {
        let p = exact_match_probability(1, 10, 0.95);
        assert!((p - 0.05 * 0.95f64.powi(9)).abs() < 1e-15);
        assert!((p - 0.03151).abs() < 1e-5);
    }

    #[test]
    fn near_one_threshold_gives_no_matches() {
        let f = random_group_frequencies(
            10,
            1000,
            50,
            0.999999,
            1,
            &[group(&[0]), group(&[2, 3])],
            NullSampling::Binomial,
        )
        .unwrap();
        let total: u64 = f.iter().flatten().sum();
        assert!(total <= 1, "{total}");
    }

    #[test]
    fn singleton_mean_matches_binomial() {
        let k = 400;
        let f =
            random_group_frequencies(10, 1000, k, 0.95, 3, &[group(&[4])], NullSampling::Binomial)
                .unwrap();
        let mean = f[0].iter().sum::<u64>() as f64 / k as f64;
        // standard error of the mean: sqrt(np(1-p)/K)
        assert!(
            (mean - 31.51).abs() < 3.0 * (31.51f64 * 0.9685 / k as f64).sqrt() + 0.01,
            "{mean}"
        );
    }

    #[test]
    fn frequencies_are_seeded() {
        let t = [group(&[0, 1]), group(&[3])];
        for mode in [NullSampling::Binomial, NullSampling::Literal] {
            let a = random_group_frequencies(6, 300, 20, 0.9, 11, &t, mode).unwrap();
            let b = random_group_frequencies(6, 300, 20, 0.9, 11, &t, mode).unwrap();
            assert_eq!(a, b);
            let c = random_group_frequencies(6, 300, 20, 0.9, 12, &t, mode).unwrap();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn rejects_out_of_range_targets() {
        assert!(
            random_group_frequencies(3, 10, 2, 0.9, 0, &[group(&[3])], NullSampling::Binomial)
                .is_err()
        );
        assert!(random_group_frequencies(3, 10, 2, 0.9, 0, &[], NullSampling::Binomial).is_err());
    }

    fn real_set(entries: &[(&[usize], u64)], maps: u64) -> FeatureGroupSet {
        FeatureGroupSet {
            groups: entries.iter().map(|(m, c)| (group(m), *c)).collect(),
            maps_total: maps,
        }
    }

    #[test]
    fn frequent_group_survives_and_rare_one_is_pruned() {
        let real = real_set(&[(&[2], 400), (&[5], 1)], 1000);
        let cfg = NullModelConfig {
            k: 500,
            seed: 4,
            ..NullModelConfig::default()
        };
        let report = prune(&real, 10, &cfg, NullSampling::Binomial).unwrap();
        let frequent = &report
            .decisions
            .iter()
            .find(|d| d.group == group(&[2]))
            .unwrap();
        assert!(frequent.survived);
        assert_eq!(frequent.exceedances, 0);
        let rare = &report
            .decisions
            .iter()
            .find(|d| d.group == group(&[5]))
            .unwrap();
        assert!(!rare.survived);
        assert_eq!(rare.exceedances, 500);
        assert_eq!(report.survivors.groups.len(), 1);
        assert_eq!(report.survivors.groups[&group(&[2])], 400);
    }

    #[test]
    fn alpha_one_prunes_nothing() {
        let real = real_set(&[(&[2], 1), (&[5], 1), (&[1, 2], 2)], 1000);
        let cfg = NullModelConfig {
            k: 50,
            alpha: 1.0,
            ..NullModelConfig::default()
        };
        let report = prune(&real, 10, &cfg, NullSampling::Binomial).unwrap();
        assert_eq!(report.survivors.groups, real.groups);
    }

    #[test]
    fn survival_is_monotone_in_frequency() {
        let cfg = NullModelConfig {
            k: 300,
            seed: 9,
            ..NullModelConfig::default()
        };
        let mut last = false;
        for f in 1..80 {
            let real = real_set(&[(&[3], f)], 1000);
            let survived = prune(&real, 10, &cfg, NullSampling::Binomial)
                .unwrap()
                .decisions[0]
                .survived;
            assert!(
                survived || !last,
                "survived at lower frequency but not at {f}"
            );
            last = survived;
        }
        assert!(last);
    }

    #[test]
    fn report_roundtrip() {
        let real = real_set(&[(&[0, 4], 7), (&[2], 3)], 50);
        let mut buf = Vec::new();
        real.write_report(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "1,5\t7\n3\t3\n");
        assert_eq!(FeatureGroupSet::read_report(&text, 50).unwrap(), real);
    }

    #[test]
    fn feature_frequencies_sum_over_groups() {
        let real = real_set(&[(&[0, 1], 5), (&[0], 1)], 10);
        assert_eq!(real.feature_frequencies(3), vec![6, 5, 0]);
    }
}
