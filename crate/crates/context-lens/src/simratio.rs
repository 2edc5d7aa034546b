//! Cosine-similarity-ratio analysis: find candidate features near two group
//! embeddings and rank them by how discriminant they are between the groups.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::alacarte::GroupEmbedding;
use crate::vectorstore::{cosine, VectorStore, VectorStoreError};

#[derive(Debug, Error)]
pub enum SimRatioError {
    #[error(transparent)]
    Store(#[from] VectorStoreError),
    #[error("feature {0:?} is not in the vocabulary")]
    UnknownFeature(String),
    #[error("no valid features to rank")]
    NoValidFeatures,
}

/// A candidate feature with its cosine to each group embedding. The ratio
/// `sim_a / sim_b` is only meaningful when both similarities are strictly
/// positive; otherwise the sims are still reported but the ratio is absent.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRatio {
    pub feature: String,
    pub sim_a: f64,
    pub sim_b: f64,
    pub ratio: Option<f64>,
}

impl FeatureRatio {
    pub fn is_valid(&self) -> bool {
        self.ratio.is_some()
    }
}

/// Which group goes in the numerator when ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatioDirection {
    AOverB,
    BOverA,
}

/// Union of the `k_per_group` nearest vocabulary tokens to each group
/// embedding, minus `exclude` (callers pass the focal variants here).
pub fn candidate_features(
    group_a: &GroupEmbedding,
    group_b: &GroupEmbedding,
    store: &VectorStore,
    k_per_group: usize,
    exclude: &HashSet<String>,
) -> Result<Vec<String>, SimRatioError> {
    let k = k_per_group.min(store.len());
    let mut union: Vec<String> = Vec::new();
    let mut seen = HashSet::new();
    for group in [group_a, group_b] {
        for (token, _) in store.nearest(&group.vector, k, exclude)? {
            if seen.insert(token.clone()) {
                union.push(token);
            }
        }
    }
    union.sort();
    Ok(union)
}

/// Cosine of one feature against both group embeddings.
pub fn similarity_ratio(
    feature: &str,
    group_a: &GroupEmbedding,
    group_b: &GroupEmbedding,
    store: &VectorStore,
) -> Result<FeatureRatio, SimRatioError> {
    let vector = store
        .get(feature)
        .ok_or_else(|| SimRatioError::UnknownFeature(feature.to_string()))?;
    let sim_a = cosine(vector.values, &group_a.vector)?;
    let sim_b = cosine(vector.values, &group_b.vector)?;
    let ratio = (sim_a > 0.0 && sim_b > 0.0).then(|| sim_a / sim_b);
    Ok(FeatureRatio {
        feature: feature.to_string(),
        sim_a,
        sim_b,
        ratio,
    })
}

/// Rank features by descending ratio in the requested direction. Invalid
/// features sort last; ties break by token order. The returned rows keep
/// `ratio = sim_a / sim_b` regardless of direction.
pub fn rank_discriminant(
    features: &[String],
    group_a: &GroupEmbedding,
    group_b: &GroupEmbedding,
    store: &VectorStore,
    direction: RatioDirection,
) -> Result<Vec<FeatureRatio>, SimRatioError> {
    let mut rows = features
        .iter()
        .map(|f| similarity_ratio(f, group_a, group_b, store))
        .collect::<Result<Vec<_>, _>>()?;
    if rows.iter().all(|r| !r.is_valid()) {
        return Err(SimRatioError::NoValidFeatures);
    }
    let key = |row: &FeatureRatio| {
        row.ratio.map(|r| match direction {
            RatioDirection::AOverB => r,
            RatioDirection::BOverA => 1.0 / r,
        })
    };
    rows.sort_by(|a, b| match (key(a), key(b)) {
        (Some(x), Some(y)) => y
            .partial_cmp(&x)
            .expect("ratios are finite")
            .then_with(|| a.feature.cmp(&b.feature)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.feature.cmp(&b.feature),
    });
    Ok(rows)
}

/// Ratio CSV: a `#` metadata line naming the groups, then one row per
/// feature. This is the plot-ready data behind similarity-ratio charts.
pub fn write_ratio_csv(
    rows: &[FeatureRatio],
    group_a: &GroupEmbedding,
    group_b: &GroupEmbedding,
    path: &Path,
) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        "# group_a={} (n={}) group_b={} (n={})",
        group_a.label, group_a.n_instances, group_b.label, group_b.n_instances
    )?;
    writeln!(w, "feature,sim_group_a,sim_group_b,ratio,valid")?;
    for row in rows {
        let ratio = row.ratio.map(|r| r.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{}",
            row.feature,
            row.sim_a,
            row.sim_b,
            ratio,
            row.is_valid()
        )?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn group(label: &str, vector: Vec<f64>) -> GroupEmbedding {
        GroupEmbedding {
            label: label.into(),
            vector,
            n_instances: 1,
        }
    }

    fn toy_store() -> VectorStore {
        VectorStore::from_rows([
            ("hate", vec![1.0, 0.1]),
            ("love", vec![0.1, 1.0]),
            ("mild", vec![0.7, 0.7]),
        ])
        .unwrap()
    }

    #[test]
    fn identical_groups_coincide_and_union_is_small() {
        let store = toy_store();
        let g = group("a", vec![1.0, 0.0]);
        let features = candidate_features(&g, &g, &store, 2, &HashSet::new()).unwrap();
        assert!(features.len() <= 2);
    }

    #[test]
    fn token_nearest_only_one_group_still_in_union() {
        let store = toy_store();
        let ga = group("a", vec![1.0, 0.0]);
        let gb = group("b", vec![0.0, 1.0]);
        let features = candidate_features(&ga, &gb, &store, 1, &HashSet::new()).unwrap();
        assert!(features.contains(&"hate".to_string()));
        assert!(features.contains(&"love".to_string()));
    }

    #[test]
    fn full_k_union_is_vocabulary_minus_exclusions() {
        let store = toy_store();
        let ga = group("a", vec![1.0, 0.0]);
        let gb = group("b", vec![0.0, 1.0]);
        let exclude: HashSet<String> = ["mild".to_string()].into();
        let features = candidate_features(&ga, &gb, &store, 3, &exclude).unwrap();
        assert_eq!(features, vec!["hate".to_string(), "love".to_string()]);
    }

    #[test]
    fn identical_groups_give_ratio_exactly_one() {
        let store = toy_store();
        let g = group("same", vec![0.4, 0.6]);
        for feature in ["hate", "love", "mild"] {
            let row = similarity_ratio(feature, &g, &g, &store).unwrap();
            assert_eq!(row.ratio, Some(1.0));
        }
    }

    #[test]
    fn oov_feature_is_an_error() {
        let store = toy_store();
        let g = group("a", vec![1.0, 0.0]);
        assert!(matches!(
            similarity_ratio("missing", &g, &g, &store),
            Err(SimRatioError::UnknownFeature(_))
        ));
    }

    #[test]
    fn negative_similarity_invalidates_ratio_but_keeps_sims() {
        let store = VectorStore::from_rows([("x", vec![1.0, 0.0])]).unwrap();
        let ga = group("a", vec![1.0, 0.0]);
        let gb = group("b", vec![-1.0, 0.0]);
        let row = similarity_ratio("x", &ga, &gb, &store).unwrap();
        assert_eq!(row.sim_a, 1.0);
        assert_eq!(row.sim_b, -1.0);
        assert_eq!(row.ratio, None);
    }

    #[test]
    fn hand_computed_ratios_rank_in_order() {
        // Features engineered to hit ratios 2.0, 1.0, 0.5 exactly.
        let store = VectorStore::from_rows([
            ("two", vec![2.0, 1.0]),
            ("one", vec![1.0, 1.0]),
            ("half", vec![1.0, 2.0]),
        ])
        .unwrap();
        // Groups chosen so sim(feature, A) / sim(feature, B) is the label.
        let ga = group("a", vec![1.0, 0.0]);
        let gb = group("b", vec![0.0, 1.0]);
        let features: Vec<String> = ["half", "one", "two"].map(String::from).to_vec();
        let rows = rank_discriminant(&features, &ga, &gb, &store, RatioDirection::AOverB).unwrap();
        let order: Vec<&str> = rows.iter().map(|r| r.feature.as_str()).collect();
        assert_eq!(order, ["two", "one", "half"]);
        assert_relative_eq!(rows[0].ratio.unwrap(), 2.0, epsilon = 1e-12);
        assert_relative_eq!(rows[1].ratio.unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(rows[2].ratio.unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn flipping_direction_reverses_valid_ranking() {
        let store = VectorStore::from_rows([
            ("two", vec![2.0, 1.0]),
            ("one", vec![1.0, 1.0]),
            ("half", vec![1.0, 2.0]),
        ])
        .unwrap();
        let ga = group("a", vec![1.0, 0.0]);
        let gb = group("b", vec![0.0, 1.0]);
        let features: Vec<String> = ["half", "one", "two"].map(String::from).to_vec();
        let forward =
            rank_discriminant(&features, &ga, &gb, &store, RatioDirection::AOverB).unwrap();
        let backward =
            rank_discriminant(&features, &ga, &gb, &store, RatioDirection::BOverA).unwrap();
        let fwd: Vec<&str> = forward.iter().map(|r| r.feature.as_str()).collect();
        let mut bwd: Vec<&str> = backward.iter().map(|r| r.feature.as_str()).collect();
        bwd.reverse();
        assert_eq!(fwd, bwd);
    }

    #[test]
    fn single_feature_is_singleton() {
        let store = toy_store();
        let g = group("g", vec![1.0, 1.0]);
        let rows = rank_discriminant(
            &["mild".to_string()],
            &g,
            &g,
            &store,
            RatioDirection::AOverB,
        )
        .unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].feature, "mild");
    }

    #[test]
    fn reciprocality_of_swapped_groups() {
        let store = toy_store();
        let ga = group("a", vec![0.9, 0.2]);
        let gb = group("b", vec![0.3, 0.8]);
        for feature in ["hate", "love", "mild"] {
            let fwd = similarity_ratio(feature, &ga, &gb, &store).unwrap();
            let bwd = similarity_ratio(feature, &gb, &ga, &store).unwrap();
            let product = fwd.ratio.unwrap() * bwd.ratio.unwrap();
            assert_relative_eq!(product, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn ratio_ignores_group_rescaling() {
        let store = toy_store();
        let ga = group("a", vec![0.9, 0.2]);
        let gb = group("b", vec![0.3, 0.8]);
        let scaled_a = group("a", ga.vector.iter().map(|v| v * 37.5).collect());
        let scaled_b = group("b", gb.vector.iter().map(|v| v * 0.004).collect());
        for feature in ["hate", "love", "mild"] {
            let base = similarity_ratio(feature, &ga, &gb, &store).unwrap();
            let scaled = similarity_ratio(feature, &scaled_a, &scaled_b, &store).unwrap();
            assert_relative_eq!(base.ratio.unwrap(), scaled.ratio.unwrap(), epsilon = 1e-9);
        }
    }

    #[test]
    fn csv_has_metadata_line_and_schema() {
        let store = toy_store();
        let ga = group("hate-speech", vec![1.0, 0.0]);
        let gb = group("non-hate", vec![0.0, 1.0]);
        let rows = rank_discriminant(
            &["hate".to_string(), "love".to_string()],
            &ga,
            &gb,
            &store,
            RatioDirection::AOverB,
        )
        .unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_ratio_csv(&rows, &ga, &gb, f.path()).unwrap();
        let text = std::fs::read_to_string(f.path()).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("# group_a=hate-speech"));
        assert_eq!(
            lines.next().unwrap(),
            "feature,sim_group_a,sim_group_b,ratio,valid"
        );
    }
}
