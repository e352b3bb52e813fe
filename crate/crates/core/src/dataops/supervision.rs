//! Distant supervision: gazetteers of frequent attribute values, cut at the
//! elbow, and token-level value matching with optional normalisation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::formats::MqmrcRecord;
use crate::error::{Error, Result};
use crate::packing::Span;
use crate::tokenizer::{decode_span, tokenize};

/// Attribute → (value, frequency) list, most frequent first.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Gazetteer {
    pub attributes: BTreeMap<String, Vec<(String, usize)>>,
}

impl Gazetteer {
    pub fn values(&self, attribute: &str) -> Vec<&str> {
        self.attributes
            .get(attribute)
            .map(|v| v.iter().map(|(s, _)| s.as_str()).collect())
            .unwrap_or_default()
    }

    /// Reads `attribute<TAB>value<TAB>count` lines as raw frequencies.
    pub fn parse_frequencies(text: &str, path: &Path) -> Result<ValueFrequencies> {
        let mut out = ValueFrequencies::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.into(),
                line: i + 1,
                message,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            let [attr, value, count] = fields[..] else {
                return Err(parse_err("expected attribute<TAB>value<TAB>count".into()));
            };
            let count: usize = count
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("bad count {count:?}: {e}")))?;
            *out.entry(attr.to_owned()).or_default().entry(value.to_owned()).or_default() += count;
        }
        Ok(out)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (attr, values) in &self.attributes {
            for (v, c) in values {
                out.push_str(&format!("{attr}\t{v}\t{c}\n"));
            }
        }
        out
    }
}

/// Attribute → value → count.
pub type ValueFrequencies = BTreeMap<String, BTreeMap<String, usize>>;

/// Counts gold span texts per entity over an annotated corpus.
pub fn value_frequencies(records: &[MqmrcRecord]) -> Result<ValueFrequencies> {
    let mut out = ValueFrequencies::new();
    for r in records {
        let tokens = tokenize(&r.text);
        for (entity, spans) in &r.entities {
            for &(s, e) in spans {
                let text = decode_span(&tokens, s, e)?;
                *out.entry(entity.clone()).or_default().entry(text).or_default() += 1;
            }
        }
    }
    Ok(out)
}

/// Keeps, per attribute, the values up to and including the largest drop
/// between consecutive frequencies (earliest drop on ties). Attributes with
/// fewer than two values keep everything.
pub fn build_gazetteer(freqs: &ValueFrequencies) -> Gazetteer {
    let attributes = freqs
        .iter()
        .map(|(attr, counts)| {
            let mut ranked: Vec<(String, usize)> = counts.iter().map(|(v, &c)| (v.clone(), c)).collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            if ranked.len() >= 2 {
                let mut cutoff = 0;
                for i in 1..ranked.len() - 1 {
                    if ranked[i].1 - ranked[i + 1].1 > ranked[cutoff].1 - ranked[cutoff + 1].1 {
                        cutoff = i;
                    }
                }
                ranked.truncate(cutoff + 1);
            }
            (attr.clone(), ranked)
        })
        .collect();
    Gazetteer { attributes }
}

/// Normalisations applied when matching values against text.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Heuristics {
    /// Compare case-insensitively.
    pub lowercase: bool,
    /// Last value token may gain or lose a trailing `s` or `'s`.
    pub plural: bool,
    /// Last value token may swap man/men, woman/women, foot/feet.
    pub irregular: bool,
}

impl Heuristics {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Self {
            lowercase: true,
            plural: true,
            irregular: true,
        }
    }
}

impl fmt::Display for Heuristics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let on: Vec<&str> = [
            (self.lowercase, "lowercase"),
            (self.plural, "plural"),
            (self.irregular, "irregular"),
        ]
        .into_iter()
        .filter_map(|(b, n)| b.then_some(n))
        .collect();
        f.write_str(if on.is_empty() { "none" } else { "" })?;
        f.write_str(&on.join(","))
    }
}

impl FromStr for Heuristics {
    type Err = Error;

    /// Comma-separated subset of `lowercase,plural,irregular`, or `none` / `all`.
    fn from_str(s: &str) -> Result<Self> {
        let mut h = Heuristics::none();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "none" => {}
                "all" => h = Heuristics::all(),
                "lowercase" => h.lowercase = true,
                "plural" => h.plural = true,
                "irregular" => h.irregular = true,
                _ => return Err(Error::Config(format!("unknown heuristic `{part}`"))),
            }
        }
        Ok(h)
    }
}

const IRREGULAR: [(&str, &str); 3] = [("man", "men"), ("woman", "women"), ("foot", "feet")];

fn word_variants(word: &str, h: Heuristics) -> BTreeSet<String> {
    let mut forms = BTreeSet::from([word.to_owned()]);
    if h.irregular {
        let lower = word.to_lowercase();
        for (a, b) in IRREGULAR {
            if lower == a {
                forms.insert(b.to_owned());
            } else if lower == b {
                forms.insert(a.to_owned());
            }
        }
    }
    if h.plural {
        for w in forms.clone() {
            if let Some(stem) = w.strip_suffix("'s") {
                forms.insert(stem.to_owned());
                continue;
            }
            forms.insert(format!("{w}'s"));
            match w.strip_suffix('s') {
                Some(stem) if !stem.is_empty() => forms.insert(stem.to_owned()),
                _ => forms.insert(format!("{w}s")),
            };
        }
    }
    if h.lowercase {
        forms = forms.into_iter().map(|f| f.to_lowercase()).collect();
    }
    forms
}

fn value_variants(value: &str, h: Heuristics) -> Vec<Vec<String>> {
    let mut tokens = tokenize(value);
    let Some(last) = tokens.pop() else {
        return Vec::new();
    };
    if h.lowercase {
        tokens.iter_mut().for_each(|t| *t = t.to_lowercase());
    }
    word_variants(&last, h)
        .into_iter()
        .map(|w| {
            let mut v = tokens.clone();
            v.push(w);
            v
        })
        .collect()
}

/// Non-overlapping token spans where any variant of any value occurs. At each
/// position the longest match wins; scanning resumes after it.
pub fn distant_supervise<S: AsRef<str>>(tokens: &[S], values: &[&str], h: Heuristics) -> Vec<Span> {
    let text: Vec<String> = tokens
        .iter()
        .map(|t| {
            if h.lowercase {
                t.as_ref().to_lowercase()
            } else {
                t.as_ref().to_owned()
            }
        })
        .collect();
    let mut variants: Vec<Vec<String>> = values.iter().flat_map(|v| value_variants(v, h)).collect();
    variants.sort_by_key(|v| std::cmp::Reverse(v.len()));
    let mut spans = Vec::new();
    let mut i = 0;
    while i < text.len() {
        match variants.iter().find(|v| text[i..].starts_with(v)) {
            Some(v) => {
                spans.push((i, i + v.len() - 1));
                i += v.len();
            }
            None => i += 1,
        }
    }
    spans
}

/// Annotates raw texts with every gazetteer attribute; attributes without a
/// match are recorded with no spans.
pub fn tag_texts(texts: &[String], gazetteer: &Gazetteer, h: Heuristics) -> Vec<MqmrcRecord> {
    texts
        .iter()
        .map(|text| {
            let tokens = tokenize(text);
            MqmrcRecord {
                text: tokens.join(" "),
                entities: gazetteer
                    .attributes
                    .keys()
                    .map(|attr| (attr.clone(), distant_supervise(&tokens, &gazetteer.values(attr), h)))
                    .collect(),
            }
        })
        .collect()
}
