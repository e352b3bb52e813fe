//! Encoder-ready input layouts.
//!
//! Multi-question layout: `[CLS] context [SEP] q1 [ENT] q2 [ENT] … qk [ENT] [SEP]`.
//! Single-question layout: `[CLS] context [SEP] q [SEP]`.
//!
//! Each `[ENT]` follows its own question, and its output embedding is later read
//! as that entity's vector. `[CLS]`, the context and the first `[SEP]` use
//! segment A; everything after uses segment B. Contexts that do not fit are cut
//! from the right; question tokens are never dropped.

use std::collections::{BTreeMap, HashSet};
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tokenizer::{self, Vocab, CLS_ID, ENT_ID, PAD_ID, SEP_ID};

/// Inclusive token span `(start, end)`.
pub type Span = (usize, usize);

pub const DEFAULT_MAX_SEQ_LEN: usize = 128;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EntityAnnotation {
    pub name: String,
    /// Empty for an entity with no mention in the context.
    pub spans: Vec<Span>,
}

impl EntityAnnotation {
    pub fn new(name: impl Into<String>, spans: Vec<Span>) -> Self {
        Self {
            name: name.into(),
            spans,
        }
    }
}

/// One context with its ordered entity questions and gold spans.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub context_tokens: Vec<String>,
    pub entities: Vec<EntityAnnotation>,
}

impl Sample {
    pub fn new(context_tokens: Vec<String>, entities: Vec<EntityAnnotation>) -> Result<Self> {
        let s = Self {
            context_tokens,
            entities,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.context_tokens.len();
        let mut seen = HashSet::new();
        for e in &self.entities {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Data(format!("entity `{}` listed twice", e.name)));
            }
            let mut spans = e.spans.clone();
            spans.sort_unstable();
            for &(s, t) in &spans {
                if s > t || t >= n {
                    return Err(Error::Data(format!(
                        "span ({s}, {t}) of `{}` outside a {n}-token context",
                        e.name
                    )));
                }
            }
            if spans.windows(2).any(|w| w[1].0 <= w[0].1) {
                return Err(Error::Data(format!("overlapping spans for `{}`", e.name)));
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.entities.len()
    }

    pub fn entity(&self, name: &str) -> Option<&EntityAnnotation> {
        self.entities.iter().find(|e| e.name == name)
    }

    pub fn entity_names(&self) -> impl Iterator<Item = &str> {
        self.entities.iter().map(|e| e.name.as_str())
    }
}

/// Entity name → natural-language question text.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct QueryMap {
    queries: BTreeMap<String, String>,
}

impl QueryMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, entity: impl Into<String>, query: impl Into<String>) {
        self.queries.insert(entity.into(), query.into());
    }

    pub fn get(&self, entity: &str) -> Option<&str> {
        self.queries.get(entity).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.queries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Parses `entity<TAB>query` lines. Blank lines are skipped.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut map = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (entity, query) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: path.into(),
                line: i + 1,
                message: "expected `entity<TAB>query`".into(),
            })?;
            if entity.is_empty() || query.trim().is_empty() {
                return Err(Error::Parse {
                    path: path.into(),
                    line: i + 1,
                    message: "empty entity or query".into(),
                });
            }
            map.insert(entity, query);
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_tsv(&self) -> String {
        self.queries
            .iter()
            .map(|(k, v)| format!("{k}\t{v}\n"))
            .collect()
    }

    /// Fails unless every entity in `entities` has a query.
    pub fn check_covers<'a>(&self, entities: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for e in entities {
            if !self.queries.contains_key(e) {
                return Err(Error::Config(format!("query map has no entry for `{e}`")));
            }
        }
        Ok(())
    }
}

/// Tokens asked for `entity`: its query when mapped, else the entity name itself.
pub fn question_tokens(entity: &str, query_map: Option<&QueryMap>) -> Vec<String> {
    let text = query_map.and_then(|q| q.get(entity)).unwrap_or(entity);
    tokenizer::tokenize(text)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    A,
    B,
}

impl Segment {
    pub fn index(self) -> usize {
        match self {
            Segment::A => 0,
            Segment::B => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedSequence {
    pub ids: Vec<usize>,
    pub segments: Vec<Segment>,
    /// Index of the `[ENT]` after each question, in question order. Empty for single-question packing.
    pub ent_positions: Vec<usize>,
    /// Positions of the (possibly truncated) context within `ids`.
    pub context: Range<usize>,
    /// The context tokens that survived truncation.
    pub context_tokens: Vec<String>,
    /// Entities answered by this packing, in question order.
    pub entity_order: Vec<String>,
}

impl PackedSequence {
    pub const CLS_INDEX: usize = 0;

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_ctx(&self) -> usize {
        self.context.len()
    }

    /// Positions scored by the heads: `[CLS]` followed by the context.
    pub fn answer_positions(&self) -> Vec<usize> {
        std::iter::once(Self::CLS_INDEX).chain(self.context.clone()).collect()
    }

    /// Appends `[PAD]` tokens (segment A) up to `len`.
    pub fn pad_to(&mut self, len: usize) {
        while self.ids.len() < len {
            self.ids.push(PAD_ID);
            self.segments.push(Segment::A);
        }
    }

    /// `true` for real tokens, `false` for padding.
    pub fn attention_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&id| id != PAD_ID).collect()
    }
}

fn capacity_error(question_len: usize, max_seq_len: usize) -> Error {
    Error::Capacity(format!(
        "question region needs {question_len} positions but max_seq_len is {max_seq_len}"
    ))
}

fn start_with_context(
    sample: &Sample,
    vocab: &Vocab,
    keep: usize,
    capacity: usize,
) -> PackedSequence {
    let kept = sample.context_tokens[..keep].to_vec();
    let mut ids = Vec::with_capacity(capacity);
    ids.push(CLS_ID);
    ids.extend(tokenizer::encode(&kept, vocab));
    ids.push(SEP_ID);
    PackedSequence {
        segments: vec![Segment::A; ids.len()],
        ids,
        ent_positions: Vec::new(),
        context: 1..1 + keep,
        context_tokens: kept,
        entity_order: Vec::new(),
    }
}

fn push_b(packed: &mut PackedSequence, id: usize) {
    packed.ids.push(id);
    packed.segments.push(Segment::B);
}

/// Packs a context with all of its entity questions into one sequence.
pub fn pack_mqmrc(
    sample: &Sample,
    vocab: &Vocab,
    query_map: Option<&QueryMap>,
    max_seq_len: usize,
) -> Result<PackedSequence> {
    if sample.entities.is_empty() {
        return Err(Error::Contract("a multi-question packing needs at least one entity".into()));
    }
    let questions: Vec<Vec<String>> = sample
        .entities
        .iter()
        .map(|e| question_tokens(&e.name, query_map))
        .collect();
    let question_len = 3 + questions.iter().map(|q| q.len() + 1).sum::<usize>();
    if question_len > max_seq_len {
        return Err(capacity_error(question_len, max_seq_len));
    }
    let keep = sample.context_tokens.len().min(max_seq_len - question_len);
    let mut packed = start_with_context(sample, vocab, keep, keep + question_len);
    for (e, q) in sample.entities.iter().zip(&questions) {
        for id in tokenizer::encode(q, vocab) {
            push_b(&mut packed, id);
        }
        packed.ent_positions.push(packed.ids.len());
        push_b(&mut packed, ENT_ID);
        packed.entity_order.push(e.name.clone());
    }
    push_b(&mut packed, SEP_ID);
    Ok(packed)
}

/// Packs a context with the single question for `entity`.
pub fn pack_sqmrc(
    sample: &Sample,
    entity: &str,
    vocab: &Vocab,
    query_map: Option<&QueryMap>,
    max_seq_len: usize,
) -> Result<PackedSequence> {
    if sample.entity(entity).is_none() {
        return Err(Error::Contract(format!("sample does not ask about `{entity}`")));
    }
    let question = question_tokens(entity, query_map);
    let question_len = 3 + question.len();
    if question_len > max_seq_len {
        return Err(capacity_error(question_len, max_seq_len));
    }
    let keep = sample.context_tokens.len().min(max_seq_len - question_len);
    let mut packed = start_with_context(sample, vocab, keep, keep + question_len);
    for id in tokenizer::encode(&question, vocab) {
        push_b(&mut packed, id);
    }
    push_b(&mut packed, SEP_ID);
    packed.entity_order.push(entity.to_owned());
    Ok(packed)
}

/// Reorders the entity questions: position `i` of the result holds entity `permutation[i]`.
pub fn permute_entities(sample: &Sample, permutation: &[usize]) -> Result<Sample> {
    let k = sample.entities.len();
    let mut seen = vec![false; k];
    if permutation.len() != k
        || permutation
            .iter()
            .any(|&p| p >= k || std::mem::replace(&mut seen[p], true))
    {
        return Err(Error::Contract(format!(
            "{permutation:?} is not a permutation of {k} entities"
        )));
    }
    Ok(Sample {
        context_tokens: sample.context_tokens.clone(),
        entities: permutation.iter().map(|&p| sample.entities[p].clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::build_vocab;
    use proptest::prelude::*;

    fn shirt() -> Sample {
        Sample::new(
            tokenizer::tokenize("red cotton shirt"),
            vec![
                EntityAnnotation::new("color", vec![(0, 0)]),
                EntityAnnotation::new("material", vec![(1, 1)]),
            ],
        )
        .unwrap()
    }

    fn vocab() -> Vocab {
        build_vocab(
            ["red cotton shirt color material the color of the item"],
            1,
            false,
        )
        .unwrap()
    }

    fn surface(p: &PackedSequence, v: &Vocab) -> Vec<String> {
        p.ids.iter().map(|&i| v.token(i).unwrap().to_owned()).collect()
    }

    #[test]
    fn figure_one_layout() {
        let v = vocab();
        let p = pack_mqmrc(&shirt(), &v, None, 128).unwrap();
        assert_eq!(
            surface(&p, &v),
            ["[CLS]", "red", "cotton", "shirt", "[SEP]", "color", "[ENT]", "material", "[ENT]", "[SEP]"]
        );
        assert_eq!(p.ent_positions, [6, 8]);
        assert_eq!(p.segments[..5], [Segment::A; 5]);
        assert_eq!(p.segments[5..], [Segment::B; 5]);
        assert_eq!(p.context, 1..4);
        assert_eq!(p.entity_order, ["color", "material"]);
    }

    #[test]
    fn single_entity_layout() {
        let v = vocab();
        let s = Sample::new(
            tokenizer::tokenize("red shirt"),
            vec![EntityAnnotation::new("color", vec![(0, 0)])],
        )
        .unwrap();
        let p = pack_mqmrc(&s, &v, None, 128).unwrap();
        assert_eq!(
            surface(&p, &v),
            ["[CLS]", "red", "shirt", "[SEP]", "color", "[ENT]", "[SEP]"]
        );
        let q = pack_sqmrc(&s, "color", &v, None, 128).unwrap();
        assert_eq!(surface(&q, &v), ["[CLS]", "red", "shirt", "[SEP]", "color", "[SEP]"]);
        assert!(q.ent_positions.is_empty());
    }

    #[test]
    fn truncation_drops_context_from_the_right() {
        let v = vocab();
        let p = pack_mqmrc(&shirt(), &v, None, 9).unwrap();
        assert_eq!(p.context, 1..3);
        assert_eq!(p.context_tokens, ["red", "cotton"]);
        assert_eq!(p.ent_positions, [5, 7]);
        assert_eq!(p.len(), 9);
        // Question region alone is 7 positions.
        assert!(pack_mqmrc(&shirt(), &v, None, 7).unwrap().context.is_empty());
        assert!(matches!(
            pack_mqmrc(&shirt(), &v, None, 6),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn query_map_substitutes_question_text() {
        let v = vocab();
        let mut qm = QueryMap::new();
        qm.insert("color", "the color of the item");
        let p = pack_sqmrc(&shirt(), "color", &v, Some(&qm), 128).unwrap();
        // [CLS] + 3 context + [SEP] + 5 question + [SEP]
        assert_eq!(p.len(), 11);
        assert_eq!(p.ids[5..10].iter().filter(|&&i| i != tokenizer::UNK_ID).count(), 5);
        assert!(qm.check_covers(["color"]).is_ok());
        assert!(qm.check_covers(["material"]).is_err());
    }

    #[test]
    fn sqmrc_needs_k_packings() {
        let v = vocab();
        let s = shirt();
        let packs: Vec<_> = s
            .entity_names()
            .map(|e| pack_sqmrc(&s, e, &v, None, 128).unwrap())
            .collect();
        assert_eq!(packs.len(), s.k());
        assert!(pack_sqmrc(&s, "size", &v, None, 128).is_err());
    }

    #[test]
    fn permutation_examples() {
        let s = shirt();
        assert_eq!(permute_entities(&s, &[0, 1]).unwrap(), s);
        let swapped = permute_entities(&s, &[1, 0]).unwrap();
        assert_eq!(swapped.entities[0].name, "material");
        assert_eq!(swapped.entities[0].spans, vec![(1, 1)]);
        let p = pack_mqmrc(&swapped, &vocab(), None, 128).unwrap();
        assert_eq!(p.entity_order, ["material", "color"]);
        assert!(permute_entities(&s, &[0, 0]).is_err());
        assert!(permute_entities(&s, &[0]).is_err());
        assert!(permute_entities(&s, &[0, 2]).is_err());
    }

    #[test]
    fn sample_validation() {
        let toks = tokenizer::tokenize("a b c");
        assert!(Sample::new(toks.clone(), vec![EntityAnnotation::new("x", vec![(0, 3)])]).is_err());
        assert!(Sample::new(toks.clone(), vec![EntityAnnotation::new("x", vec![(0, 1), (1, 2)])]).is_err());
        assert!(Sample::new(
            toks.clone(),
            vec![EntityAnnotation::new("x", vec![]), EntityAnnotation::new("x", vec![])]
        )
        .is_err());
        assert!(Sample::new(toks, vec![EntityAnnotation::new("x", vec![(2, 2), (0, 1)])]).is_ok());
    }

    #[test]
    fn query_map_file_format() {
        let path = Path::new("q.tsv");
        let qm = QueryMap::parse("PER\tPeople, persons, including fictional\n\nLOC\tPlaces\n", path).unwrap();
        assert_eq!(qm.get("PER"), Some("People, persons, including fictional"));
        assert_eq!(QueryMap::parse(&qm.to_tsv(), path).unwrap(), qm);
        assert!(QueryMap::parse("PER People", path).is_err());
    }

    #[test]
    fn padding_extends_with_masked_positions() {
        let mut p = pack_mqmrc(&shirt(), &vocab(), None, 128).unwrap();
        p.pad_to(12);
        assert_eq!(p.len(), 12);
        assert_eq!(p.attention_mask().iter().filter(|&&m| !m).count(), 2);
    }

    fn arb_sample() -> impl Strategy<Value = (Vec<String>, usize, usize)> {
        (
            proptest::collection::vec("[a-e]{1,3}", 0..12),
            1usize..5,
            8usize..30,
        )
    }

    proptest! {
        #[test]
        fn packing_invariants((ctx, k, max_len) in arb_sample(), seed in 0u64..1000) {
            let names: Vec<String> = (0..k).map(|i| format!("ent{i}")).collect();
            let sample = Sample::new(
                ctx.clone(),
                names.iter().map(|n| EntityAnnotation::new(n.clone(), vec![])).collect(),
            ).unwrap();
            let corpus: Vec<String> = ctx.iter().cloned().chain(names.clone()).collect();
            let v = build_vocab(corpus.iter().map(String::as_str), 1, false).unwrap();
            match pack_mqmrc(&sample, &v, None, max_len) {
                Err(Error::Capacity(_)) => prop_assert!(3 + 2 * k > max_len),
                Err(e) => prop_assert!(false, "{e}"),
                Ok(p) => {
                    prop_assert!(p.len() <= max_len);
                    prop_assert_eq!(p.ent_positions.len(), k);
                    let ents: Vec<usize> = (0..p.len()).filter(|&i| p.ids[i] == ENT_ID).collect();
                    prop_assert_eq!(&ents, &p.ent_positions);
                    let first_sep = p.ids.iter().position(|&i| i == SEP_ID).unwrap();
                    for (i, seg) in p.segments.iter().enumerate() {
                        prop_assert_eq!(*seg == Segment::A, i <= first_sep);
                    }
                    prop_assert_eq!(*p.ids.last().unwrap(), SEP_ID);
                    let decoded: Vec<&str> = p.ids[p.context.clone()].iter().map(|&i| v.token(i).unwrap()).collect();
                    prop_assert_eq!(decoded, ctx[..p.n_ctx()].iter().map(String::as_str).collect::<Vec<_>>());

                    // Permutation equivariance.
                    let mut perm: Vec<usize> = (0..k).collect();
                    perm.rotate_left((seed as usize) % k);
                    let q = pack_mqmrc(&permute_entities(&sample, &perm).unwrap(), &v, None, max_len).unwrap();
                    let expected: Vec<String> = perm.iter().map(|&i| p.entity_order[i].clone()).collect();
                    prop_assert_eq!(&q.entity_order, &expected);
                    for (i, &pos) in q.ent_positions.iter().enumerate() {
                        // The question token just before each [ENT] names the entity it represents.
                        prop_assert_eq!(v.token(q.ids[pos - 1]).unwrap(), q.entity_order[i].as_str());
                    }
                }
            }
        }
    }
}
