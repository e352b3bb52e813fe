//! Entity-specific token representations and the prediction heads.
//!
//! Every head scores the `[CLS]` slot plus the context positions ("answer
//! positions"). Question tokens carry neither predictions nor loss. A `B` on the
//! `[CLS]` slot means the entity has no mention in the context.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::encoder::{self, EncoderOutput, INIT_STD};
use crate::error::{Error, Result};
use crate::numerics::{BoundParams, ParamStore, Tape, Tensor, Var};
use crate::packing::{PackedSequence, Span};

pub const W1: &str = "interaction.w1";
pub const W2: &str = "interaction.w2";
pub const BIO: &str = "head.bio";
pub const SPAN_START: &str = "head.span.start";
pub const SPAN_END: &str = "head.span.end";

/// How an entity vector turns shared token embeddings into entity-specific ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InteractionKind {
    /// `W1(T) + W2(ent)`
    LayerSum,
    /// `T - ent`
    Difference,
    /// `relu(W1(T)) * relu(W2(ent))`
    LayerProductRelu,
    /// `tanh(W1(T)) * tanh(W2(ent))`
    LayerProductTanh,
    /// `max(T, ent)`
    Max,
    /// `T * ent`
    ElementwiseProduct,
    /// `W1(T) * W2(ent)`
    LayerProduct,
}

impl InteractionKind {
    pub const ALL: [InteractionKind; 7] = [
        InteractionKind::LayerSum,
        InteractionKind::Difference,
        InteractionKind::LayerProductRelu,
        InteractionKind::LayerProductTanh,
        InteractionKind::Max,
        InteractionKind::ElementwiseProduct,
        InteractionKind::LayerProduct,
    ];

    pub fn uses_weights(self) -> bool {
        matches!(
            self,
            InteractionKind::LayerSum
                | InteractionKind::LayerProductRelu
                | InteractionKind::LayerProductTanh
                | InteractionKind::LayerProduct
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            InteractionKind::LayerSum => "layer_sum",
            InteractionKind::Difference => "difference",
            InteractionKind::LayerProductRelu => "layer_product_relu",
            InteractionKind::LayerProductTanh => "layer_product_tanh",
            InteractionKind::Max => "max",
            InteractionKind::ElementwiseProduct => "product",
            InteractionKind::LayerProduct => "layer_product",
        }
    }
}

impl fmt::Display for InteractionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InteractionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elementwise_product" => Ok(InteractionKind::ElementwiseProduct),
            _ => InteractionKind::ALL
                .into_iter()
                .find(|k| k.name() == s)
                .ok_or_else(|| Error::Config(format!("unknown interaction op `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Bio,
    Span,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Bio => "bio",
            HeadKind::Span => "span",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bio" => Ok(HeadKind::Bio),
            "span" => Ok(HeadKind::Span),
            _ => Err(Error::Config(format!("unknown head `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BioLabel {
    O = 0,
    B = 1,
    I = 2,
}

impl BioLabel {
    pub fn index(self) -> usize {
        self as usize
    }

    fn from_index(i: usize) -> Self {
        match i {
            0 => BioLabel::O,
            1 => BioLabel::B,
            _ => BioLabel::I,
        }
    }
}

/// Adds head weights for `head` (and interaction weights when `interaction`
/// needs them) to `store`. Interaction matrices start as the identity.
pub fn init_params(
    store: &mut ParamStore,
    hidden_dim: usize,
    head: HeadKind,
    interaction: Option<InteractionKind>,
    seed: u64,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut normal = |shape: Vec<usize>| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| dist.sample(&mut rng)).collect())
    };
    match head {
        HeadKind::Bio => {
            store.insert(format!("{BIO}.weight"), normal(vec![hidden_dim, 3])?);
            store.insert(format!("{BIO}.bias"), Tensor::zeros(vec![3])?);
        }
        HeadKind::Span => {
            store.insert(SPAN_START, normal(vec![hidden_dim, 1])?);
            store.insert(SPAN_END, normal(vec![hidden_dim, 1])?);
        }
    }
    if interaction.is_some_and(InteractionKind::uses_weights) {
        store.insert(W1, Tensor::identity(hidden_dim)?);
        store.insert(W2, Tensor::identity(hidden_dim)?);
    }
    Ok(())
}

/// Entity-specific representations for all `k` entities at once.
///
/// `tokens` is `[n, d]`, `entities` is `[k, d]`; the result is `[k * n, d]` with
/// row `i * n + j` pairing entity `i` with token `j`.
pub fn entity_specific_all(
    tape: &mut Tape,
    params: &BoundParams,
    tokens: Var,
    entities: Var,
    kind: InteractionKind,
) -> Result<Var> {
    let (ts, es) = (tape.shape(tokens).to_vec(), tape.shape(entities).to_vec());
    if ts.len() != 2 || es.len() != 2 || ts[1] != es[1] {
        return Err(Error::Shape(format!(
            "token embeddings {ts:?} and entity embeddings {es:?}"
        )));
    }
    let (n, k) = (ts[0], es[0]);
    let (t, e) = if kind.uses_weights() {
        let t = tape.matmul(tokens, params.get(W1)?)?;
        let e = tape.matmul(entities, params.get(W2)?)?;
        match kind {
            InteractionKind::LayerProductRelu => (tape.relu(t), tape.relu(e)),
            InteractionKind::LayerProductTanh => (tape.tanh(t), tape.tanh(e)),
            _ => (t, e),
        }
    } else {
        (tokens, entities)
    };
    let token_rows: Vec<usize> = (0..k).flat_map(|_| 0..n).collect();
    let entity_rows: Vec<usize> = (0..k).flat_map(|i| std::iter::repeat_n(i, n)).collect();
    let t = tape.gather_rows(t, &token_rows)?;
    let e = tape.gather_rows(e, &entity_rows)?;
    match kind {
        InteractionKind::LayerSum => tape.add(t, e),
        InteractionKind::Difference => tape.sub(t, e),
        InteractionKind::Max => tape.maximum(t, e),
        InteractionKind::LayerProductRelu
        | InteractionKind::LayerProductTanh
        | InteractionKind::ElementwiseProduct
        | InteractionKind::LayerProduct => tape.mul(t, e),
    }
}

/// Entity-specific representation `[n, d]` for one entity vector `[d]`.
pub fn entity_specific(
    tape: &mut Tape,
    params: &BoundParams,
    tokens: Var,
    entity: Var,
    kind: InteractionKind,
) -> Result<Var> {
    let d = tape.shape(entity).to_vec();
    if d.len() != 1 {
        return Err(Error::Shape(format!("entity vector must be 1-D, got {d:?}")));
    }
    let row = tape.reshape(entity, vec![1, d[0]])?;
    entity_specific_all(tape, params, tokens, row, kind)
}

/// Token-level BIO logits `[rows, 3]` from representations `[rows, d]`.
pub fn bio_forward(tape: &mut Tape, params: &BoundParams, reps: Var) -> Result<Var> {
    encoder::linear(tape, params, BIO, reps)
}

/// Per-row argmax over `{O, B, I}`; ties go to the lowest index.
pub fn bio_predict(logits: &Tensor) -> Vec<BioLabel> {
    (0..logits.rows())
        .map(|r| BioLabel::from_index(argmax(logits.row(r))))
        .collect()
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Rows of the answer positions (`[CLS]` then context), `[n_ctx + 1, d]`.
pub fn answer_rows(tape: &mut Tape, enc: &EncoderOutput, packed: &PackedSequence) -> Result<Var> {
    if tape.shape(enc.token_embeddings)[0] != packed.len() {
        return Err(Error::Contract("encoder output does not match the packing".into()));
    }
    tape.gather_rows(enc.token_embeddings, &packed.answer_positions())
}

fn entity_rows(tape: &mut Tape, enc: &EncoderOutput, packed: &PackedSequence) -> Result<(Var, Var)> {
    let rows = answer_rows(tape, enc, packed)?;
    let ents = enc
        .entity_embeddings
        .filter(|&e| tape.shape(e)[0] == packed.ent_positions.len())
        .ok_or_else(|| Error::Contract("encoder output has no matching entity embeddings".into()))?;
    Ok((rows, ents))
}

/// BIO logits for every entity of a multi-question packing, `[k, n_ctx + 1, 3]`.
pub fn mqmrc_logits(
    tape: &mut Tape,
    params: &BoundParams,
    enc: &EncoderOutput,
    packed: &PackedSequence,
    kind: InteractionKind,
) -> Result<Var> {
    let (rows, ents) = entity_rows(tape, enc, packed)?;
    let reps = entity_specific_all(tape, params, rows, ents, kind)?;
    let logits = bio_forward(tape, params, reps)?;
    tape.reshape(logits, vec![packed.ent_positions.len(), packed.n_ctx() + 1, 3])
}

/// Predicted label matrix `[k, n_ctx + 1]`; column 0 is the `[CLS]` slot.
pub fn mqmrc_forward(
    tape: &mut Tape,
    params: &BoundParams,
    enc: &EncoderOutput,
    packed: &PackedSequence,
    kind: InteractionKind,
) -> Result<Vec<Vec<BioLabel>>> {
    let logits = mqmrc_logits(tape, params, enc, packed, kind)?;
    Ok(split_labels(tape.value(logits)))
}

/// Splits `[k, n, 3]` logits into per-entity label rows.
pub fn split_labels(logits: &Tensor) -> Vec<Vec<BioLabel>> {
    let shape = logits.shape();
    let (k, n) = (shape[0], shape[1]);
    let labels = bio_predict(logits);
    (0..k).map(|i| labels[i * n..(i + 1) * n].to_vec()).collect()
}

/// Start and end logits `[k, n_ctx + 1]` each, from representations `[k * (n_ctx + 1), d]`.
pub fn span_logits(tape: &mut Tape, params: &BoundParams, reps: Var, k: usize) -> Result<(Var, Var)> {
    let rows = tape.shape(reps)[0];
    let start = tape.matmul(reps, params.get(SPAN_START)?)?;
    let end = tape.matmul(reps, params.get(SPAN_END)?)?;
    let start = tape.reshape(start, vec![k, rows / k])?;
    let end = tape.reshape(end, vec![k, rows / k])?;
    Ok((start, end))
}

/// Span logits for every entity of a multi-question packing.
pub fn mqmrc_span_logits(
    tape: &mut Tape,
    params: &BoundParams,
    enc: &EncoderOutput,
    packed: &PackedSequence,
    kind: InteractionKind,
) -> Result<(Var, Var)> {
    let (rows, ents) = entity_rows(tape, enc, packed)?;
    let reps = entity_specific_all(tape, params, rows, ents, kind)?;
    span_logits(tape, params, reps, packed.ent_positions.len())
}

/// Decodes one entity's start/end logits over the answer positions into a
/// context span. `None` when start is the `[CLS]` slot or end precedes start.
pub fn decode_span_logits(start: &[f64], end: &[f64]) -> Option<Span> {
    let (s, e) = (argmax(start), argmax(end));
    if s == PackedSequence::CLS_INDEX || e < s {
        None
    } else {
        Some((s - 1, e - 1))
    }
}

/// Span prediction for one entity from its representations `[n_ctx + 1, d]`.
pub fn span_forward(tape: &mut Tape, params: &BoundParams, reps: Var) -> Result<Option<Span>> {
    let (start, end) = span_logits(tape, params, reps, 1)?;
    Ok(decode_span_logits(
        tape.value(start).data(),
        tape.value(end).data(),
    ))
}

/// Mean cross-entropy over every (entity, answer position) pair with equal weight.
pub fn mqmrc_loss(tape: &mut Tape, logits: Var, gold: &[Vec<BioLabel>]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let ok = shape.len() == 3
        && shape[2] == 3
        && shape[0] == gold.len()
        && gold.iter().all(|row| row.len() == shape[1]);
    if !ok {
        return Err(Error::Contract(format!(
            "logits {shape:?} do not match a {}-entity gold matrix",
            gold.len()
        )));
    }
    let flat = tape.reshape(logits, vec![shape[0] * shape[1], 3])?;
    let targets: Vec<usize> = gold.iter().flatten().map(|l| l.index()).collect();
    let losses = tape.cross_entropy_rows(flat, &targets)?;
    Ok(tape.mean(losses))
}

/// Mean of start and end cross-entropies over entities. Gold is the target
/// answer-position index pair per entity (`(0, 0)` for no answer).
pub fn span_loss(tape: &mut Tape, start: Var, end: Var, gold: &[(usize, usize)]) -> Result<Var> {
    let shape = tape.shape(start).to_vec();
    if shape.len() != 2 || shape[0] != gold.len() || tape.shape(end) != shape.as_slice() {
        return Err(Error::Contract(format!(
            "span logits {shape:?} do not match {} gold spans",
            gold.len()
        )));
    }
    let starts: Vec<usize> = gold.iter().map(|g| g.0).collect();
    let ends: Vec<usize> = gold.iter().map(|g| g.1).collect();
    let ls = tape.cross_entropy_rows(start, &starts)?;
    let le = tape.cross_entropy_rows(end, &ends)?;
    let both = tape.concat_last(&[ls, le])?;
    Ok(tape.mean(both))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn store_with(d: usize, kind: InteractionKind) -> ParamStore {
        let mut s = ParamStore::new();
        init_params(&mut s, d, HeadKind::Bio, Some(kind), 0).unwrap();
        s
    }

    fn apply(kind: InteractionKind, tokens: Tensor, ent: Tensor, params: &ParamStore) -> Tensor {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let tv = tape.constant(tokens);
        let ev = tape.constant(ent);
        let out = entity_specific(&mut tape, &bound, tv, ev, kind).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn operator_examples() {
        let p = store_with(2, InteractionKind::ElementwiseProduct);
        let out = apply(
            InteractionKind::ElementwiseProduct,
            t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]),
            t(&[2], &[2.0, 0.0]),
            &p,
        );
        assert_eq!(out.data(), &[2.0, 0.0, 6.0, 0.0]);

        let out = apply(InteractionKind::Difference, t(&[1, 2], &[5.0, 5.0]), t(&[2], &[2.0, 3.0]), &p);
        assert_eq!(out.data(), &[3.0, 2.0]);

        let out = apply(InteractionKind::Max, t(&[1, 2], &[1.0, 5.0]), t(&[2], &[3.0, 2.0]), &p);
        assert_eq!(out.data(), &[3.0, 5.0]);
    }

    #[test]
    fn identity_layer_product_equals_elementwise_product() {
        let p = store_with(4, InteractionKind::LayerProduct);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tokens: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ent: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = apply(InteractionKind::LayerProduct, t(&[3, 4], &tokens), t(&[4], &ent), &p);
        let b = apply(InteractionKind::ElementwiseProduct, t(&[3, 4], &tokens), t(&[4], &ent), &p);
        assert_eq!(a, b);
    }

    #[test]
    fn layer_kinds_need_weights() {
        let p = store_with(2, InteractionKind::ElementwiseProduct);
        assert!(!p.contains(W1));
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false);
        let tv = tape.constant(t(&[1, 2], &[1.0, 1.0]));
        let ev = tape.constant(t(&[2], &[1.0, 1.0]));
        for kind in InteractionKind::ALL.into_iter().filter(|k| k.uses_weights()) {
            assert!(matches!(
                entity_specific(&mut tape, &bound, tv, ev, kind),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn interaction_names_round_trip() {
        for k in InteractionKind::ALL {
            assert_eq!(k.name().parse::<InteractionKind>().unwrap(), k);
        }
        assert!("sum".parse::<InteractionKind>().is_err());
    }

    #[test]
    fn bio_head_hand_computed_example() {
        // d=2, t=[1,2], ent=[3,-1]: product [3,-2]; class weight rows [1,0],[0,1],[0,0].
        let mut s = ParamStore::new();
        s.insert("head.bio.weight", t(&[2, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]));
        s.insert("head.bio.bias", t(&[3], &[0.0; 3]));
        let mut tape = Tape::new();
        let bound = s.bind(&mut tape, false);
        let tv = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let ev = tape.constant(t(&[2], &[3.0, -1.0]));
        let p = entity_specific(&mut tape, &bound, tv, ev, InteractionKind::ElementwiseProduct).unwrap();
        let logits = bio_forward(&mut tape, &bound, p).unwrap();
        assert_eq!(tape.value(logits).data(), &[3.0, -2.0, 0.0]);
        assert_eq!(bio_predict(tape.value(logits)), vec![BioLabel::O]);
    }

    #[test]
    fn ties_and_zero_weights_predict_o() {
        assert_eq!(bio_predict(&t(&[1, 3], &[1.0, 1.0, 0.0])), vec![BioLabel::O]);
        assert_eq!(bio_predict(&t(&[2, 3], &[0.0; 6])), vec![BioLabel::O; 2]);
        assert_eq!(bio_predict(&t(&[1, 3], &[0.0, 0.0, 1.0])), vec![BioLabel::I]);
    }

    #[test]
    fn span_decoding_conventions() {
        let peak = |i: usize| {
            let mut v = vec![0.0; 5];
            v[i] = 1.0;
            v
        };
        assert_eq!(decode_span_logits(&peak(3), &peak(4)), Some((2, 3)));
        assert_eq!(decode_span_logits(&peak(0), &peak(0)), None);
        assert_eq!(decode_span_logits(&peak(3), &peak(2)), None);
        assert_eq!(decode_span_logits(&peak(2), &peak(2)), Some((1, 1)));
    }

    fn ce_logits(ce: f64) -> [f64; 3] {
        // Row [x, 0, 0] with target 0 has cross-entropy `ce` when e^x = 2e^-ce / (1 - e^-ce).
        let p = (-ce).exp();
        [(2.0 * p / (1.0 - p)).ln(), 0.0, 0.0]
    }

    #[test]
    fn loss_is_mean_of_cross_entropies() {
        let rows: Vec<f64> = [0.1, 0.3, 0.2, 0.4].iter().flat_map(|&c| ce_logits(c)).collect();
        let mut tape = Tape::new();
        let logits = tape.constant(t(&[2, 2, 3], &rows));
        let gold = vec![vec![BioLabel::O; 2]; 2];
        let loss = mqmrc_loss(&mut tape, logits, &gold).unwrap();
        assert!((tape.value(loss).data()[0] - 0.25).abs() < 1e-12);

        let confident = tape.constant(t(&[1, 2, 3], &[50.0, 0.0, 0.0, 0.0, 50.0, 0.0]));
        let gold = vec![vec![BioLabel::O, BioLabel::B]];
        let loss = mqmrc_loss(&mut tape, confident, &gold).unwrap();
        assert!(tape.value(loss).data()[0] < 1e-20);

        assert!(mqmrc_loss(&mut tape, confident, &[vec![BioLabel::O]]).is_err());
    }

    fn oracle_loss(logits: &[f64], k: usize, n: usize, gold: &[Vec<BioLabel>]) -> f64 {
        let mut total = 0.0;
        for i in 0..k {
            for j in 0..n {
                let row = &logits[(i * n + j) * 3..(i * n + j) * 3 + 3];
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                total += -(row[gold[i][j].index()].exp() / z).ln();
            }
        }
        total / (k * n) as f64
    }

    fn labels(k: usize, n: usize, seed: u64) -> Vec<Vec<BioLabel>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k)
            .map(|_| (0..n).map(|_| BioLabel::from_index(rng.random_range(0..3))).collect())
            .collect()
    }

    proptest! {
        #[test]
        fn loss_matches_double_loop(k in 1usize..5, n in 1usize..7, seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..k * n * 3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let gold = labels(k, n, seed + 1);
            let mut tape = Tape::new();
            let logits = tape.constant(t(&[k, n, 3], &data));
            let loss = mqmrc_loss(&mut tape, logits, &gold).unwrap();
            let got = tape.value(loss).data()[0];
            prop_assert!((got - oracle_loss(&data, k, n, &gold)).abs() < 1e-12);

            // Permuting entity rows of logits and gold together leaves the loss unchanged.
            let mut order: Vec<usize> = (0..k).collect();
            order.reverse();
            let permuted: Vec<f64> = order.iter().flat_map(|&i| data[i * n * 3..(i + 1) * n * 3].to_vec()).collect();
            let pgold: Vec<Vec<BioLabel>> = order.iter().map(|&i| gold[i].clone()).collect();
            let pl = tape.constant(t(&[k, n, 3], &permuted));
            let ploss = mqmrc_loss(&mut tape, pl, &pgold).unwrap();
            prop_assert!((tape.value(ploss).data()[0] - got).abs() < 1e-12);
        }

        #[test]
        fn argmax_ignores_softmax(z in proptest::collection::vec(-50.0f64..50.0, 3)) {
            let mut tape = Tape::new();
            let v = tape.constant(t(&[3], &z));
            let s = tape.softmax(v, 0).unwrap();
            prop_assert_eq!(argmax(tape.value(s).data()), argmax(&z));
        }

        #[test]
        fn entity_rows_permute_with_entities(k in 1usize..5, seed in 0u64..1000) {
            let d = 4;
            let n = 3;
            let p = store_with(d, InteractionKind::LayerProductTanh);
            let mut s = p.clone();
            init_params(&mut s, d, HeadKind::Bio, None, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tokens: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ents: Vec<f64> = (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let run = |ents: &[f64]| {
                let mut tape = Tape::new();
                let bound = s.bind(&mut tape, false);
                let tv = tape.constant(t(&[n, d], &tokens));
                let ev = tape.constant(t(&[k, d], ents));
                let reps = entity_specific_all(&mut tape, &bound, tv, ev, InteractionKind::LayerProductTanh).unwrap();
                let logits = bio_forward(&mut tape, &bound, reps).unwrap();
                let logits = tape.reshape(logits, vec![k, n, 3]).unwrap();
                split_labels(tape.value(logits))
            };
            let base = run(&ents);
            let mut order: Vec<usize> = (0..k).collect();
            order.rotate_left(seed as usize % k);
            let permuted: Vec<f64> = order.iter().flat_map(|&i| ents[i * d..(i + 1) * d].to_vec()).collect();
            let got = run(&permuted);
            for (row, &i) in got.iter().zip(&order) {
                prop_assert_eq!(row, &base[i]);
            }
        }
    }
}
