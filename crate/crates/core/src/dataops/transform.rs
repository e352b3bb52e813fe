//! Conversion between single- and multi-question datasets, size accounting and
//! entities-per-text statistics.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use super::formats::{MqmrcRecord, SqmrcRecord};
use crate::error::{Error, Result};

/// Which single-question rows merge into one multi-question row.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Grouping {
    /// All rows with the same exact text, wherever they appear.
    #[default]
    ExactText,
    /// Only runs of adjacent rows with the same exact text.
    Consecutive,
}

impl fmt::Display for Grouping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Grouping::ExactText => "text",
            Grouping::Consecutive => "consecutive",
        })
    }
}

impl FromStr for Grouping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Grouping::ExactText),
            "consecutive" => Ok(Grouping::Consecutive),
            _ => Err(Error::Config(format!("unknown grouping `{s}`"))),
        }
    }
}

/// Groups rows by text in first-occurrence order. Repeated (text, entity) rows
/// merge by span-set union.
pub fn to_mqmrc(records: &[SqmrcRecord], grouping: Grouping) -> Vec<MqmrcRecord> {
    let mut out: Vec<MqmrcRecord> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for r in records {
        let slot = match grouping {
            Grouping::ExactText => index.get(r.text.as_str()).copied(),
            Grouping::Consecutive => out.len().checked_sub(1).filter(|&i| out[i].text == r.text),
        };
        let i = slot.unwrap_or_else(|| {
            out.push(MqmrcRecord {
                text: r.text.clone(),
                entities: BTreeMap::new(),
            });
            index.insert(&r.text, out.len() - 1);
            out.len() - 1
        });
        let spans = out[i].entities.entry(r.entity.clone()).or_default();
        spans.extend(&r.spans);
        spans.sort_unstable();
        spans.dedup();
    }
    out
}

/// One row per (text, entity), entities in name order.
pub fn to_sqmrc(records: &[MqmrcRecord]) -> Vec<SqmrcRecord> {
    records
        .iter()
        .flat_map(|r| {
            r.entities.iter().map(|(entity, spans)| SqmrcRecord {
                text: r.text.clone(),
                entity: entity.clone(),
                spans: spans.clone(),
            })
        })
        .collect()
}

/// Percentage of rows saved by grouping, rounded to two decimals.
pub fn reduction_pct(sqmrc_count: usize, mqmrc_count: usize) -> Result<f64> {
    if sqmrc_count == 0 || mqmrc_count > sqmrc_count {
        return Err(Error::Contract(format!(
            "need 0 < sqmrc count and mqmrc ≤ sqmrc, got ({sqmrc_count}, {mqmrc_count})"
        )));
    }
    let pct = 100.0 * (1.0 - mqmrc_count as f64 / sqmrc_count as f64);
    Ok((pct * 100.0).round() / 100.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EntityStats {
    pub records: usize,
    /// k → number of records asking about k entities.
    pub histogram: BTreeMap<usize, usize>,
    /// Lower median of k; `None` for an empty corpus.
    pub median: Option<usize>,
    /// Σk, which equals the single-question row count.
    pub total_questions: usize,
}

impl EntityStats {
    /// Σk / records as an exact fraction.
    pub fn mean_k(&self) -> (usize, usize) {
        (self.total_questions, self.records)
    }
}

pub fn entities_per_text_stats(records: &[MqmrcRecord]) -> EntityStats {
    let mut ks: Vec<usize> = records.iter().map(|r| r.entities.len()).collect();
    ks.sort_unstable();
    let mut histogram = BTreeMap::new();
    for &k in &ks {
        *histogram.entry(k).or_default() += 1;
    }
    EntityStats {
        records: ks.len(),
        median: (!ks.is_empty()).then(|| ks[(ks.len() - 1) / 2]),
        total_questions: ks.iter().sum(),
        histogram,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sq(text: &str, entity: &str, spans: &[(usize, usize)]) -> SqmrcRecord {
        SqmrcRecord {
            text: text.into(),
            entity: entity.into(),
            spans: spans.to_vec(),
        }
    }

    fn mq(k: usize) -> MqmrcRecord {
        MqmrcRecord {
            text: "t".into(),
            entities: (0..k).map(|i| (format!("e{i}"), vec![])).collect(),
        }
    }

    #[test]
    fn grouping_examples() {
        let rows = vec![sq("T", "color", &[(0, 0)]), sq("T", "material", &[(1, 1)])];
        let out = to_mqmrc(&rows, Grouping::ExactText);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].entities["color"], vec![(0, 0)]);
        assert_eq!(out[0].entities["material"], vec![(1, 1)]);
        assert_eq!(to_sqmrc(&out), rows);
    }

    #[test]
    fn duplicates_merge_by_union_and_order_is_first_occurrence() {
        let rows = vec![
            sq("B", "x", &[(1, 1)]),
            sq("A", "x", &[]),
            sq("B", "x", &[(0, 0), (1, 1)]),
        ];
        let out = to_mqmrc(&rows, Grouping::ExactText);
        assert_eq!(out.iter().map(|r| r.text.as_str()).collect::<Vec<_>>(), ["B", "A"]);
        assert_eq!(out[0].entities["x"], vec![(0, 0), (1, 1)]);

        let out = to_mqmrc(&rows, Grouping::Consecutive);
        assert_eq!(out.len(), 3);
    }

    #[test]
    fn reduction_rows() {
        let rows = [
            (981076, 290698, 70.37),
            (32062, 4967, 84.51),
            (88460, 39888, 54.91),
            (22005, 17393, 20.96),
            (11997, 3999, 66.67),
            (9768, 3256, 66.67),
        ];
        for (s, m, want) in rows {
            assert!((reduction_pct(s, m).unwrap() - want).abs() <= 0.01, "{s} {m}");
        }
        assert_eq!(reduction_pct(5, 5).unwrap(), 0.0);
        assert!(matches!(reduction_pct(0, 0), Err(Error::Contract(_))));
        assert!(reduction_pct(3, 4).is_err());
    }

    #[test]
    fn stats_examples() {
        let s = entities_per_text_stats(&[mq(1), mq(2), mq(3)]);
        assert_eq!(s.median, Some(2));
        let s = entities_per_text_stats(&[mq(2), mq(2), mq(4), mq(4)]);
        assert_eq!(s.median, Some(2));
        assert_eq!(s.histogram, BTreeMap::from([(2, 2), (4, 2)]));
        assert_eq!(s.mean_k(), (12, 4));
        assert_eq!(entities_per_text_stats(&[]).median, None);
    }

    fn canonical_corpus() -> impl Strategy<Value = Vec<MqmrcRecord>> {
        let entities = proptest::collection::btree_map(
            "[a-d]",
            proptest::collection::btree_set((0usize..3).prop_map(|i| (2 * i, 2 * i)), 0..3)
                .prop_map(|s| s.into_iter().collect::<Vec<_>>()),
            1..4,
        );
        proptest::collection::btree_map("[a-z]{1,4}", entities, 0..8).prop_map(|m| {
            m.into_iter()
                .map(|(word, entities)| MqmrcRecord {
                    text: format!("{word} w1 w2 w3 w4 w5"),
                    entities,
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(corpus in canonical_corpus()) {
            let sq = to_sqmrc(&corpus);
            prop_assert_eq!(to_mqmrc(&sq, Grouping::ExactText), corpus.clone());
            let stats = entities_per_text_stats(&corpus);
            prop_assert_eq!(stats.total_questions, sq.len());
            prop_assert_eq!(stats.histogram.values().sum::<usize>(), corpus.len());
        }

        #[test]
        fn reduction_is_bounded(s in 1usize..100_000, frac in 0.0f64..=1.0) {
            let m = ((s as f64) * frac) as usize;
            let r = reduction_pct(s, m).unwrap();
            prop_assert!((0.0..=100.0).contains(&r));
        }
    }
}
