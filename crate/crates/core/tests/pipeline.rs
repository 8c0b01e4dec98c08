use groundlab::checkpoint;
use groundlab::datagen::generate_corpus;
use groundlab::datagen::io::{read_corpus, write_corpus};
use groundlab::harness::{evaluate, train};
use groundlab::{GenConfig, RunConfig, Vocabulary};

fn small_config() -> RunConfig {
    RunConfig { d: 8, heads: 1, ffn_mult: 1, epochs: 1, batch_cap: 4, ..RunConfig::desk() }
}

#[test]
fn corpus_survives_a_disk_round_trip() {
    let vocab = Vocabulary::new();
    let corpus = generate_corpus(&GenConfig::default(), &vocab, 3, 10).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), &corpus, &vocab).unwrap();
    let (back, back_vocab) = read_corpus(dir.path()).unwrap();
    assert_eq!(back, corpus);
    assert_eq!(back_vocab, vocab);
}

#[test]
fn checkpointed_model_evaluates_identically() {
    let cfg = small_config();
    let vocab = Vocabulary::new();
    let corpus = generate_corpus(&GenConfig::default(), &vocab, 4, 12).unwrap();
    let out = train(&cfg, &corpus).unwrap();
    let schedule = cfg.radius_schedule().unwrap();
    let before = evaluate(&out.model, &schedule, &corpus).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let config_json = serde_json::to_value(&cfg).unwrap();
    checkpoint::save(&path, &out.model, &config_json).unwrap();
    let (model, stored) = checkpoint::load(&path).unwrap();
    assert_eq!(stored, config_json);
    let after = evaluate(&model, &schedule, &corpus).unwrap();
    assert_eq!(serde_json::to_string(&before).unwrap(), serde_json::to_string(&after).unwrap());
    assert_eq!(
        checkpoint::to_bytes(&model, &stored).unwrap(),
        std::fs::read(&path).unwrap()
    );
}
