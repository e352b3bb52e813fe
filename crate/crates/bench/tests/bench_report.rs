use mqner_bench::{corpus, first_entity_only, vocab_for};
use mqner_core::bench::{run_bench, BenchConfig};
use mqner_core::dataops::Preset;
use mqner_core::EncoderConfig;

// Wall-clock parity within 10% is below the timing noise of a shared single-core
// host (observed 0.81x to 1.05x across runs); run with `--ignored` on a quiet machine.
#[test]
#[ignore = "wall-clock tolerance tighter than shared-host timing noise"]
fn single_entity_corpus_runs_at_parity() {
    let (samples, _) = corpus(Preset::Retail, 400, 3).unwrap();
    let samples = first_entity_only(&samples);
    let vocab = vocab_for(&samples).unwrap();
    let mut cfg = BenchConfig::new(EncoderConfig::desk(vocab.len(), 64));
    cfg.repetitions = 7;
    let r = run_bench(&samples, &vocab, None, &cfg).unwrap();
    println!("{}", r.to_table());
    assert_eq!(r.pass_ratio, 1.0);
    assert!(r.pass_identity_holds());
    // The multi-question packing adds one [ENT] token and the interaction op.
    assert!((r.speedup_train - 1.0).abs() <= 0.1, "train speedup {}", r.speedup_train);
    assert!((r.speedup_infer - 1.0).abs() <= 0.1, "inference speedup {}", r.speedup_infer);
}

#[test]
fn k3_corpus_is_faster_in_multi_question_mode() {
    let (samples, vocab) = corpus(Preset::K3, 96, 4).unwrap();
    let cfg = BenchConfig::new(EncoderConfig::desk(vocab.len(), 64));
    let r = run_bench(&samples, &vocab, None, &cfg).unwrap();
    println!("{}", r.to_table());
    assert_eq!(r.pass_ratio, 3.0);
    assert_eq!(r.mqmrc.forward_passes * 3, r.sqmrc.forward_passes);
    assert!(r.speedup_train > 1.0 && r.speedup_infer > 1.0);
    // Longer sequences make each multi-question pass dearer, so the gain is sublinear.
    assert!(r.speedup_train < 3.0 && r.speedup_infer < 3.0);
    assert!(r.mqmrc.peak_seq_len > r.sqmrc.peak_seq_len);
}
