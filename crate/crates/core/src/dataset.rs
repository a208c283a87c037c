//! Offline trajectory datasets: loading, holdout splits, featurization, and
//! bin specifications.
//!
//! The on-disk format is JSON lines, one trajectory object per line with keys
//! `states`, `actions`, `rewards` and an optional `meta` map of strings.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

/// Action components must stay inside these bounds in every stored trajectory.
pub const ACTION_LOW: f64 = -1.0;
pub const ACTION_HIGH: f64 = 1.0;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("trajectory {index}: {message}")]
    Invariant { index: usize, message: String },
    #[error("holdout needs at least {needed} trajectories, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("feature dim {dim} out of range for state dim {state_dim}")]
    BadFeatureDim { dim: usize, state_dim: usize },
    #[error("learned feature requested but no encoder is bound")]
    NoEncoder,
    #[error("degenerate feature range in dim {dim}: min == max == {value}")]
    DegenerateRange { dim: usize, value: f64 },
    #[error("empty dataset")]
    Empty,
}

/// One offline episode: `T+1` states, `T` actions, `T` rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl Trajectory {
    /// Number of steps `T`.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, |s| s.len())
    }

    pub fn action_dim(&self) -> usize {
        self.actions.first().map_or(0, |a| a.len())
    }

    /// Undiscounted return, used for quality sorting.
    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// Checks the length and action-bound invariants.
    pub fn validate(&self, index: usize) -> Result<(), DatasetError> {
        let t = self.actions.len();
        if self.states.len() != t + 1 {
            return Err(DatasetError::Invariant {
                index,
                message: format!(
                    "len(states) = {} but len(actions) + 1 = {}",
                    self.states.len(),
                    t + 1
                ),
            });
        }
        if self.rewards.len() != t {
            return Err(DatasetError::Invariant {
                index,
                message: format!("len(rewards) = {} but len(actions) = {}", self.rewards.len(), t),
            });
        }
        let d_s = self.state_dim();
        if self.states.iter().any(|s| s.len() != d_s) {
            return Err(DatasetError::Invariant {
                index,
                message: "ragged state dimensions".into(),
            });
        }
        let d_a = self.action_dim();
        for (t_idx, a) in self.actions.iter().enumerate() {
            if a.len() != d_a {
                return Err(DatasetError::Invariant {
                    index,
                    message: format!("ragged action dimensions at step {t_idx}"),
                });
            }
            if a.iter().any(|&x| !(ACTION_LOW..=ACTION_HIGH).contains(&x)) {
                return Err(DatasetError::Invariant {
                    index,
                    message: format!("action at step {t_idx} outside [{ACTION_LOW}, {ACTION_HIGH}]"),
                });
            }
        }
        Ok(())
    }
}

/// Maps `(state, action)` pairs to the feature space the statistics live in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureSpec {
    /// The full state vector.
    Identity,
    /// A fixed slice of state dimensions (e.g. the velocity components).
    StateDims { dims: Vec<usize> },
    /// The scalar reward.
    Reward,
    /// A trained encoder, bound at call time.
    Learned { dim: usize },
}

impl FeatureSpec {
    pub fn output_dim(&self, state_dim: usize) -> usize {
        match self {
            FeatureSpec::Identity => state_dim,
            FeatureSpec::StateDims { dims } => dims.len(),
            FeatureSpec::Reward => 1,
            FeatureSpec::Learned { dim } => *dim,
        }
    }
}

/// Anything that can stand in for a learned feature function.
pub trait FeatureEncoder {
    fn encode(&self, state: &[f64]) -> Vec<f64>;
    fn latent_dim(&self) -> usize;
}

/// Per-dimension uniform discretization of the feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub dims: Vec<BinDim>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinDim {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl BinDim {
    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.bins as f64
    }

    /// Bin centers, strictly increasing and evenly spaced.
    pub fn representative(&self, index: usize) -> f64 {
        self.lo + (index as f64 + 0.5) * self.width()
    }

    /// Half-open bins `[lo, hi)` except the last, which is closed; values
    /// outside the fitted range clamp to the edge bins.
    pub fn index_of(&self, value: f64) -> usize {
        let raw = ((value - self.lo) / self.width()).floor();
        if raw < 0.0 {
            0
        } else {
            (raw as usize).min(self.bins - 1)
        }
    }
}

impl BinSpec {
    pub fn n_dims(&self) -> usize {
        self.dims.len()
    }

    /// Uniform spec with the same range in every dimension.
    pub fn uniform(n_dims: usize, lo: f64, hi: f64, bins: usize) -> Self {
        BinSpec {
            dims: vec![BinDim { lo, hi, bins }; n_dims],
        }
    }
}

/// Result of holding out test trajectories from an offline dataset.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
    pub rule: String,
}

/// Reads a JSON-lines trajectory file, preserving order; every record is
/// validated against the trajectory invariants.
pub fn load_dataset(path: &Path) -> Result<Vec<Trajectory>, DatasetError> {
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (line_idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let traj: Trajectory = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            line: line_idx + 1,
            message: e.to_string(),
        })?;
        traj.validate(out.len())?;
        out.push(traj);
    }
    Ok(out)
}

/// Writes trajectories as JSON lines; `load_dataset` reproduces them bit-exactly.
pub fn save_dataset(path: &Path, trajs: &[Trajectory]) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut writer = BufWriter::new(file);
    for traj in trajs {
        let line = serde_json::to_string(traj).expect("trajectory serializes");
        writeln!(writer, "{line}").map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    writer.flush().map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Holds out the `n_best` highest-return trajectories plus the `n_median`
/// trajectories whose sorted rank is closest to the 50th-percentile rank.
///
/// Sorting is by undiscounted return, ties broken by original index. Median
/// picks expand around `floor(len / 2)` in the ascending order, preferring the
/// lower rank on distance ties and skipping ranks already taken by the best
/// set, so the split is always a partition.
pub fn split_holdout(
    trajs: &[Trajectory],
    n_best: usize,
    n_median: usize,
) -> Result<DatasetSplit, DatasetError> {
    let n = trajs.len();
    if n < n_best + n_median {
        return Err(DatasetError::TooFew {
            needed: n_best + n_median,
            got: n,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        trajs[a]
            .total_reward()
            .partial_cmp(&trajs[b].total_reward())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut taken = vec![false; n];
    let mut best_ranks = Vec::new();
    for rank in (n - n_best..n).rev() {
        taken[rank] = true;
        best_ranks.push(rank);
    }

    let center = n / 2;
    let mut median_ranks = Vec::new();
    while median_ranks.len() < n_median {
        let pick = (0..n)
            .filter(|&r| !taken[r])
            .min_by_key(|&r| {
                let d = r.abs_diff(center);
                (d, r)
            })
            .expect("enough trajectories checked above");
        taken[pick] = true;
        median_ranks.push(pick);
    }

    let mut is_test = vec![None::<&str>; n];
    for &r in &best_ranks {
        is_test[order[r]] = Some("best");
    }
    for &r in &median_ranks {
        is_test[order[r]] = Some("median");
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (idx, traj) in trajs.iter().enumerate() {
        match is_test[idx] {
            Some(tag) => {
                let mut t = traj.clone();
                t.meta.insert("quality".into(), tag.into());
                t.meta.insert("source_index".into(), idx.to_string());
                test.push(t);
            }
            None => train.push(traj.clone()),
        }
    }
    Ok(DatasetSplit {
        train,
        test,
        rule: format!("best {n_best} + median {n_median} by undiscounted return"),
    })
}

/// Computes `phi_t = Phi(s_t, a_t)` for `t = 0..T`; the terminal state is
/// never featurized.
pub fn apply_feature(
    traj: &Trajectory,
    spec: &FeatureSpec,
    encoder: Option<&dyn FeatureEncoder>,
) -> Result<Vec<Vec<f64>>, DatasetError> {
    let t_len = traj.len();
    match spec {
        FeatureSpec::Identity => Ok(traj.states[..t_len].to_vec()),
        FeatureSpec::Reward => Ok(traj.rewards.iter().map(|&r| vec![r]).collect()),
        FeatureSpec::StateDims { dims } => {
            let d_s = traj.state_dim();
            if let Some(&bad) = dims.iter().find(|&&d| d >= d_s) {
                return Err(DatasetError::BadFeatureDim {
                    dim: bad,
                    state_dim: d_s,
                });
            }
            Ok(traj.states[..t_len]
                .iter()
                .map(|s| dims.iter().map(|&d| s[d]).collect())
                .collect())
        }
        FeatureSpec::Learned { .. } => {
            let enc = encoder.ok_or(DatasetError::NoEncoder)?;
            Ok(traj.states[..t_len].iter().map(|s| enc.encode(s)).collect())
        }
    }
}

/// Featurizes a bare sample sequence the same way rollout features are built:
/// `Identity` and `StateDims` read the vectors, `Reward` expects 1-D samples.
pub fn feature_of_states(states: &[Vec<f64>], spec: &FeatureSpec) -> Vec<Vec<f64>> {
    match spec {
        FeatureSpec::StateDims { dims } => states
            .iter()
            .map(|s| dims.iter().map(|&d| s[d]).collect())
            .collect(),
        _ => states.to_vec(),
    }
}

/// Fits per-dimension bin ranges to the dataset: `[min, max]` over every
/// featurized timestep of every trajectory, `bins` bins, centers as
/// representatives.
pub fn fit_bin_spec(
    trajs: &[Trajectory],
    spec: &FeatureSpec,
    bins: usize,
    encoder: Option<&dyn FeatureEncoder>,
) -> Result<BinSpec, DatasetError> {
    if trajs.is_empty() {
        return Err(DatasetError::Empty);
    }
    let n_dims = spec.output_dim(trajs[0].state_dim());
    let mut lo = vec![f64::INFINITY; n_dims];
    let mut hi = vec![f64::NEG_INFINITY; n_dims];
    for traj in trajs {
        for phi in apply_feature(traj, spec, encoder)? {
            for (d, &v) in phi.iter().enumerate() {
                lo[d] = lo[d].min(v);
                hi[d] = hi[d].max(v);
            }
        }
    }
    let mut dims = Vec::with_capacity(n_dims);
    for d in 0..n_dims {
        if lo[d] >= hi[d] {
            return Err(DatasetError::DegenerateRange {
                dim: d,
                value: lo[d],
            });
        }
        dims.push(BinDim {
            lo: lo[d],
            hi: hi[d],
            bins,
        });
    }
    Ok(BinSpec { dims })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traj(rewards: &[f64]) -> Trajectory {
        let t = rewards.len();
        Trajectory {
            states: vec![vec![0.0, 0.0]; t + 1],
            actions: vec![vec![0.0]; t],
            rewards: rewards.to_vec(),
            meta: BTreeMap::new(),
        }
    }

    #[test]
    fn load_single_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(
            &path,
            r#"{"states":[[0.0],[1.0],[2.0]],"actions":[[0.5],[-0.5]],"rewards":[1.0,2.0]}"#,
        )
        .unwrap();
        let trajs = load_dataset(&path).unwrap();
        assert_eq!(trajs.len(), 1);
        assert_eq!(trajs[0].states.len(), 3);
        assert_eq!(trajs[0].len(), 2);
    }

    #[test]
    fn load_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_dataset(&path).unwrap().is_empty());
    }

    #[test]
    fn load_rejects_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        // len(rewards) == len(actions) + 1 violates the length rule
        std::fs::write(
            &path,
            r#"{"states":[[0.0],[1.0]],"actions":[[0.0]],"rewards":[1.0,2.0]}"#,
        )
        .unwrap();
        match load_dataset(&path) {
            Err(DatasetError::Invariant { index: 0, .. }) => {}
            other => panic!("expected invariant error, got {other:?}"),
        }
    }

    #[test]
    fn load_names_bad_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad2.jsonl");
        std::fs::write(&path, "not json\n").unwrap();
        match load_dataset(&path) {
            Err(DatasetError::Parse { line: 1, .. }) => {}
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn holdout_best_and_median() {
        // returns 1..10: best 2 -> {10, 9}; median window around rank 5 -> {6, 5}
        let trajs: Vec<_> = (1..=10).map(|r| traj(&[r as f64])).collect();
        let split = split_holdout(&trajs, 2, 2).unwrap();
        let mut test_returns: Vec<f64> = split.test.iter().map(|t| t.total_reward()).collect();
        test_returns.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(test_returns, vec![5.0, 6.0, 9.0, 10.0]);
        assert_eq!(split.train.len(), 6);
    }

    #[test]
    fn holdout_empty_test() {
        let trajs: Vec<_> = (1..=4).map(|r| traj(&[r as f64])).collect();
        let split = split_holdout(&trajs, 0, 0).unwrap();
        assert!(split.test.is_empty());
        assert_eq!(split.train.len(), 4);
    }

    #[test]
    fn holdout_tie_order_is_stable() {
        let trajs: Vec<_> = (0..6).map(|_| traj(&[1.0])).collect();
        let split = split_holdout(&trajs, 2, 0).unwrap();
        // all returns equal: ties resolve by original index, so the last two
        // original indices rank highest
        let picked: Vec<&str> = split
            .test
            .iter()
            .map(|t| t.meta["source_index"].as_str())
            .collect();
        assert_eq!(picked, vec!["4", "5"]);
    }

    #[test]
    fn holdout_too_few() {
        let trajs: Vec<_> = (0..3).map(|_| traj(&[1.0])).collect();
        assert!(matches!(
            split_holdout(&trajs, 2, 2),
            Err(DatasetError::TooFew { needed: 4, got: 3 })
        ));
    }

    #[test]
    fn feature_reward() {
        let t = traj(&[1.0, 2.0, 3.0]);
        let phi = apply_feature(&t, &FeatureSpec::Reward, None).unwrap();
        assert_eq!(phi, vec![vec![1.0], vec![2.0], vec![3.0]]);
    }

    #[test]
    fn feature_state_dims_drops_terminal_state() {
        let t = Trajectory {
            states: vec![vec![0.0, 5.0], vec![1.0, 6.0], vec![2.0, 7.0]],
            actions: vec![vec![0.0], vec![0.0]],
            rewards: vec![0.0, 0.0],
            meta: BTreeMap::new(),
        };
        let phi = apply_feature(&t, &FeatureSpec::StateDims { dims: vec![0] }, None).unwrap();
        assert_eq!(phi, vec![vec![0.0], vec![1.0]]);
    }

    #[test]
    fn feature_identity() {
        let t = traj(&[0.0, 0.0]);
        let phi = apply_feature(&t, &FeatureSpec::Identity, None).unwrap();
        assert_eq!(phi.len(), 2);
        assert_eq!(phi[0], vec![0.0, 0.0]);
    }

    #[test]
    fn feature_learned_requires_encoder() {
        let t = traj(&[0.0]);
        assert!(matches!(
            apply_feature(&t, &FeatureSpec::Learned { dim: 4 }, None),
            Err(DatasetError::NoEncoder)
        ));
    }

    #[test]
    fn bin_spec_paper_default_width() {
        let mut t = traj(&[0.0, 0.0]);
        t.states = vec![vec![0.0, 0.0], vec![3.1, 0.0], vec![0.0, 0.0]];
        let spec =
            fit_bin_spec(&[t], &FeatureSpec::StateDims { dims: vec![0] }, 31, None).unwrap();
        assert!((spec.dims[0].width() - 0.1).abs() < 1e-12);
        assert!((spec.dims[0].representative(0) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn bin_spec_degenerate_range() {
        let t = traj(&[0.0, 0.0]);
        let err = fit_bin_spec(&[t], &FeatureSpec::StateDims { dims: vec![0] }, 8, None);
        assert!(matches!(err, Err(DatasetError::DegenerateRange { dim: 0, .. })));
    }

    #[test]
    fn bin_spec_per_dim_ranges() {
        let t = Trajectory {
            states: vec![vec![0.0, 10.0], vec![1.0, 20.0], vec![2.0, 30.0]],
            actions: vec![vec![0.0], vec![0.0]],
            rewards: vec![0.0, 0.0],
            meta: BTreeMap::new(),
        };
        let spec = fit_bin_spec(&[t], &FeatureSpec::Identity, 4, None).unwrap();
        assert_eq!(spec.dims[0].lo, 0.0);
        assert_eq!(spec.dims[0].hi, 1.0);
        assert_eq!(spec.dims[1].lo, 10.0);
        assert_eq!(spec.dims[1].hi, 20.0);
    }

    #[test]
    fn bin_index_edges() {
        let dim = BinDim { lo: 0.0, hi: 1.0, bins: 2 };
        assert_eq!(dim.index_of(0.05), 0);
        assert_eq!(dim.index_of(0.5), 1); // interior edge goes to the upper bin
        assert_eq!(dim.index_of(1.7), 1); // clamp above
        assert_eq!(dim.index_of(-0.3), 0); // clamp below
    }

    proptest! {
        #[test]
        fn save_load_round_trip(
            rewards in proptest::collection::vec(-10.0f64..10.0, 1..6),
            extra in 0.0f64..1.0,
        ) {
            let mut t = traj(&rewards);
            t.states[0][0] = extra;
            t.meta.insert("tag".into(), "x".into());
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rt.jsonl");
            save_dataset(&path, std::slice::from_ref(&t)).unwrap();
            let back = load_dataset(&path).unwrap();
            prop_assert_eq!(back, vec![t]);
        }

        #[test]
        fn holdout_is_partition(
            returns in proptest::collection::vec(-5.0f64..5.0, 4..20),
            n_best in 0usize..3,
            n_median in 0usize..3,
        ) {
            let trajs: Vec<_> = returns.iter().map(|&r| traj(&[r])).collect();
            prop_assume!(trajs.len() >= n_best + n_median);
            let split = split_holdout(&trajs, n_best, n_median).unwrap();
            prop_assert_eq!(split.train.len() + split.test.len(), trajs.len());
            prop_assert_eq!(split.test.len(), n_best + n_median);
        }

        #[test]
        fn fitted_bins_cover_fitting_set(
            vals in proptest::collection::vec(-3.0f64..3.0, 2..30),
        ) {
            prop_assume!(vals.iter().cloned().fold(f64::INFINITY, f64::min)
                < vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
            let t = Trajectory {
                states: (0..=vals.len()).map(|i| vec![*vals.get(i).unwrap_or(&0.0)]).collect(),
                actions: vec![vec![0.0]; vals.len()],
                rewards: vec![0.0; vals.len()],
                meta: BTreeMap::new(),
            };
            let spec = fit_bin_spec(
                std::slice::from_ref(&t),
                &FeatureSpec::StateDims { dims: vec![0] },
                8,
                None,
            ).unwrap();
            for &v in &vals {
                prop_assert!(v >= spec.dims[0].lo && v <= spec.dims[0].hi);
            }
        }
    }
}
