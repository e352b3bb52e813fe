//! Shared corpora for the throughput benches and their tests.

use mqner_core::dataops::{generate_synthetic, Preset, SyntheticSpec};
use mqner_core::tokenizer::build_vocab;
use mqner_core::training::entity_set;
use mqner_core::{Result, Sample, Vocab};

/// Synthetic corpus plus a vocabulary covering its texts and entity names.
pub fn corpus(preset: Preset, n: usize, seed: u64) -> Result<(Vec<Sample>, Vocab)> {
    let samples = generate_synthetic(&SyntheticSpec::preset(preset, n, seed))?
        .iter()
        .map(|r| r.to_sample())
        .collect::<Result<Vec<_>>>()?;
    let vocab = vocab_for(&samples)?;
    Ok((samples, vocab))
}

pub fn vocab_for(samples: &[Sample]) -> Result<Vocab> {
    let mut texts: Vec<String> = samples.iter().map(|s| s.context_tokens.join(" ")).collect();
    texts.extend(entity_set(samples));
    build_vocab(texts.iter().map(String::as_str), 1, false)
}

/// Keeps only the first entity question of every sample, so k = 1 throughout.
pub fn first_entity_only(samples: &[Sample]) -> Vec<Sample> {
    samples
        .iter()
        .map(|s| Sample {
            context_tokens: s.context_tokens.clone(),
            entities: s.entities.iter().take(1).cloned().collect(),
        })
        .collect()
}
