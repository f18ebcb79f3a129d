use actkit::corpus::{read_episodes, sample_mixture, write_episodes, CorpusError, MixtureSpec};
use actkit::synth::synth_corpus;

#[test]
fn thousand_episodes_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    let episodes = synth_corpus(5, 1000, 15, 20, 7);
    write_episodes(&path, &episodes).unwrap();
    assert_eq!(read_episodes(&path).unwrap(), episodes);
}

#[test]
fn bad_line_is_located() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    let episodes = synth_corpus(6, 3, 15, 5, 3);
    write_episodes(&path, &episodes).unwrap();
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("{\"id\": 3}\n");
    std::fs::write(&path, text).unwrap();
    match read_episodes(&path).unwrap_err() {
        CorpusError::Line { line, .. } => assert_eq!(line, 4),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn mixture_frequencies_track_weights() {
    let spec = MixtureSpec::from_weights(&[30.0, 30.0, 30.0, 10.0 / 3.0, 10.0 / 3.0, 10.0 / 3.0]);
    let draws = sample_mixture(&spec, 9, 120_000).unwrap();
    let weights = spec.normalized_weights().unwrap();
    for (k, w) in weights.iter().enumerate() {
        let f = draws.iter().filter(|&&d| d == k).count() as f64 / draws.len() as f64;
        assert!((f - w).abs() < 0.006, "dataset {k}: {f} vs {w}");
    }
}
