//! Templated synthetic corpora with gold spans recorded by construction.
//!
//! Template syntax: whitespace-separated words; `{name}` inserts a value of
//! entity `name`; `[ … ]` marks an optional group that is dropped whenever an
//! entity inside it is omitted. Groups do not nest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::formats::MqmrcRecord;
use crate::error::{Error, Result};
use crate::tokenizer::tokenize;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    /// Entity → value pool. Values may span several tokens.
    pub pools: BTreeMap<String, Vec<String>>,
    pub templates: Vec<String>,
    /// Probability that each entity inside an optional group is omitted.
    pub omit_rate: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Four product attributes; color, material and audience are optional.
    Retail,
    /// Three attributes present in every text.
    K3,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Retail => "retail",
            Preset::K3 => "k3",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retail" => Ok(Preset::Retail),
            "k3" => Ok(Preset::K3),
            _ => Err(Error::Config(format!("unknown preset `{s}`"))),
        }
    }
}

fn pool(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| (*w).to_owned()).collect()
}

const COLORS: [&str; 10] = [
    "red", "blue", "green", "black", "white", "navy blue", "light grey", "olive", "maroon", "beige",
];
const MATERIALS: [&str; 8] = [
    "cotton", "wool", "silk", "denim", "faux leather", "linen", "polyester", "suede",
];
const PRODUCTS: [&str; 10] = [
    "shirt", "jacket", "scarf", "sneakers", "backpack", "dress", "hoodie", "wallet", "running shoes", "belt",
];
const AUDIENCES: [&str; 6] = ["men", "women", "kids", "boys", "girls", "toddlers"];
const SIZES: [&str; 6] = ["small", "medium", "large", "extra large", "xl", "petite"];

impl SyntheticSpec {
    pub fn preset(preset: Preset, n_samples: usize, seed: u64) -> Self {
        let (pools, templates, omit_rate) = match preset {
            Preset::Retail => (
                BTreeMap::from([
                    ("color".to_owned(), pool(&COLORS)),
                    ("material".to_owned(), pool(&MATERIALS)),
                    ("product".to_owned(), pool(&PRODUCTS)),
                    ("audience".to_owned(), pool(&AUDIENCES)),
                ]),
                vec![
                    "[{color}] [{material}] {product} [for {audience}]",
                    "{product} [in {color}] [made of {material}] [for {audience}]",
                    "new [{material}] {product} [for {audience}] [in {color}]",
                    "[{audience}] [{color}] {product} [crafted from {material}]",
                    "classic {product} [with {material} lining] [in {color}] [for {audience}]",
                ],
                0.3,
            ),
            Preset::K3 => (
                BTreeMap::from([
                    ("color".to_owned(), pool(&COLORS)),
                    ("product".to_owned(), pool(&PRODUCTS)),
                    ("size".to_owned(), pool(&SIZES)),
                ]),
                vec![
                    "{color} {product} size {size}",
                    "{product} in {color} , size {size}",
                    "size {size} {color} {product}",
                    "new {product} {color} edition in {size}",
                ],
                0.0,
            ),
        };
        Self {
            n_samples,
            pools,
            templates: templates.into_iter().map(str::to_owned).collect(),
            omit_rate,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Part {
    Word(String),
    Slot(String),
}

/// A template as a list of groups; a group with `optional = true` came from `[ … ]`.
#[derive(Clone, Debug, PartialEq)]
struct Group {
    optional: bool,
    parts: Vec<Part>,
}

fn parse_template(template: &str, pools: &BTreeMap<String, Vec<String>>) -> Result<Vec<Group>> {
    let bad = |msg: String| Error::Config(format!("template {template:?}: {msg}"));
    let mut groups = vec![Group {
        optional: false,
        parts: Vec::new(),
    }];
    let mut in_group = false;
    let mut seen = BTreeSet::new();
    for raw in template.split_whitespace() {
        let mut tok = raw;
        if let Some(rest) = tok.strip_prefix('[') {
            if in_group {
                return Err(bad("nested optional group".into()));
            }
            in_group = true;
            groups.push(Group {
                optional: true,
                parts: Vec::new(),
            });
            tok = rest;
        }
        let closes = tok.ends_with(']');
        tok = tok.strip_suffix(']').unwrap_or(tok);
        if tok.contains(['[', ']']) {
            return Err(bad(format!("misplaced bracket in {raw:?}")));
        }
        if !tok.is_empty() {
            let part = match tok.strip_prefix('{').and_then(|t| t.strip_suffix('}')) {
                Some(name) => {
                    if !pools.contains_key(name) {
                        return Err(bad(format!("unknown entity `{name}`")));
                    }
                    if !seen.insert(name.to_owned()) {
                        return Err(bad(format!("entity `{name}` used twice")));
                    }
                    Part::Slot(name.to_owned())
                }
                None if tok.contains(['{', '}']) => return Err(bad(format!("malformed slot {raw:?}"))),
                None => Part::Word(tok.to_owned()),
            };
            groups.last_mut().expect("non-empty").parts.push(part);
        }
        if closes {
            if !in_group {
                return Err(bad("unmatched `]`".into()));
            }
            in_group = false;
            groups.push(Group {
                optional: false,
                parts: Vec::new(),
            });
        }
    }
    if in_group {
        return Err(bad("unclosed `[`".into()));
    }
    Ok(groups)
}

/// Counts of what the generator decided, for checking omission rates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SyntheticStats {
    pub optional_slots: usize,
    pub omitted_slots: usize,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<MqmrcRecord>> {
    generate_with_stats(spec).map(|(r, _)| r)
}

pub fn generate_with_stats(spec: &SyntheticSpec) -> Result<(Vec<MqmrcRecord>, SyntheticStats)> {
    if !(0.0..=1.0).contains(&spec.omit_rate) {
        return Err(Error::Config(format!("omit rate {} outside [0, 1]", spec.omit_rate)));
    }
    if spec.templates.is_empty() {
        return Err(Error::Config("no templates".into()));
    }
    if let Some((name, _)) = spec.pools.iter().find(|(_, v)| v.iter().all(|s| tokenize(s).is_empty())) {
        return Err(Error::Config(format!("entity `{name}` has no usable values")));
    }
    let templates = spec
        .templates
        .iter()
        .map(|t| parse_template(t, &spec.pools))
        .collect::<Result<Vec<_>>>()?;
    let pools: BTreeMap<&str, Vec<Vec<String>>> = spec
        .pools
        .iter()
        .map(|(k, v)| (k.as_str(), v.iter().map(|s| tokenize(s)).filter(|t| !t.is_empty()).collect()))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut stats = SyntheticStats::default();
    let mut out = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        let template = templates.choose(&mut rng).expect("non-empty");
        let mut tokens: Vec<String> = Vec::new();
        let mut entities = BTreeMap::new();
        for group in template {
            if group.optional {
                let slots = group.parts.iter().filter(|p| matches!(p, Part::Slot(_))).count();
                let omitted = (0..slots).filter(|_| rng.random::<f64>() < spec.omit_rate).count();
                stats.optional_slots += slots;
                stats.omitted_slots += omitted;
                if omitted > 0 {
                    continue;
                }
            }
            for part in &group.parts {
                match part {
                    Part::Word(w) => tokens.push(w.clone()),
                    Part::Slot(name) => {
                        let value = pools[name.as_str()].choose(&mut rng).expect("non-empty pool");
                        let start = tokens.len();
                        tokens.extend(value.iter().cloned());
                        entities.insert(name.clone(), vec![(start, tokens.len() - 1)]);
                    }
                }
            }
        }
        if entities.is_empty() {
            return Err(Error::Config("a template produced a text with no entities".into()));
        }
        out.push(MqmrcRecord {
            text: tokens.join(" "),
            entities,
        });
    }
    Ok((out, stats))
}
