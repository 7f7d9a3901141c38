use std::collections::HashSet;
use std::io::Write;

use proptest::prelude::*;
use ssmlab_core::corpus::{
    ingest_jsonl, ingest_reveal, pad_truncate, split_indices, synth_local, synth_longrange, ClassStats, Corpus,
    RawExample, SplitSpec, Vocab, PAD, UNK, UNK_TOKEN,
};
use ssmlab_core::numeric::Rng;
use ssmlab_core::Error;

fn labels_with(n: usize, pos: usize) -> Vec<u8> {
    let mut r = Rng::new(n as u64);
    let mut l: Vec<u8> = (0..n).map(|i| (i < pos) as u8).collect();
    r.shuffle(&mut l);
    l
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn splits_disjoint_and_exhaustive(n in 10usize..=10_000, frac in 0.0f64..1.0, seed in 0u64..1000, stratified: bool) {
        let labels = labels_with(n, (n as f64 * frac) as usize);
        let spec = SplitSpec { stratified, ..SplitSpec::standard(seed) };
        let (a, b, c) = split_indices(&labels, &spec).unwrap();
        prop_assert_eq!(a.len() + b.len() + c.len(), n);
        let all: HashSet<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        prop_assert_eq!(all.len(), n);
        prop_assert!(all.iter().all(|&i| i < n));
    }

    #[test]
    fn stratified_ratio_within_one(n in 10usize..=2000, frac in 0.05f64..0.95, seed in 0u64..1000) {
        let labels = labels_with(n, (n as f64 * frac) as usize);
        let global = labels.iter().filter(|&&l| l == 1).count() as f64 / n as f64;
        let (a, b, c) = split_indices(&labels, &SplitSpec::standard(seed)).unwrap();
        for part in [a, b, c] {
            let pos = part.iter().filter(|&&i| labels[i] == 1).count() as f64;
            prop_assert!((pos - global * part.len() as f64).abs() <= 1.0);
        }
    }

    #[test]
    fn padding_is_exact(ids in prop::collection::vec(2u32..100, 0..600), len in 1usize..400) {
        let out = pad_truncate(&ids, len);
        prop_assert_eq!(out.len(), len);
        let keep = ids.len().min(len);
        prop_assert_eq!(&out[..keep], &ids[..keep]);
        prop_assert!(out[keep..].iter().all(|&t| t == PAD));
    }
}

#[test]
fn split_sizes_for_hundred() {
    let labels = labels_with(100, 30);
    let (a, b, c) = split_indices(&labels, &SplitSpec::standard(0)).unwrap();
    assert_eq!((a.len(), b.len(), c.len()), (80, 10, 10));
}

#[test]
fn seeds_change_permutation() {
    let labels = labels_with(500, 250);
    let x = split_indices(&labels, &SplitSpec::standard(1)).unwrap();
    let y = split_indices(&labels, &SplitSpec::standard(2)).unwrap();
    assert_ne!(x.0, y.0);
    assert_eq!(x, split_indices(&labels, &SplitSpec::standard(1)).unwrap());
}

#[test]
fn vocabulary_comes_from_train_only() {
    let ex = |t: &[&str], l| RawExample {
        tokens: t.iter().map(|s| s.to_string()).collect(),
        label: l,
    };
    // Every example carries one token of its own.
    let names: Vec<String> = (0..100).map(|i| format!("id{i}")).collect();
    let examples: Vec<RawExample> = names
        .iter()
        .enumerate()
        .map(|(i, n)| ex(&[n.as_str(), "x", "=", "y"], (i % 2) as u8))
        .collect();
    let corpus = Corpus { examples, provenance: "jsonl".into() };
    let splits = corpus.split(&SplitSpec::standard(3)).unwrap();
    let vocab = splits.train.vocab();
    let train_tokens: HashSet<&String> = splits.train.examples.iter().flat_map(|e| &e.tokens).collect();
    for t in vocab.tokens().iter().skip(2) {
        assert!(train_tokens.contains(t), "{t} not in train");
    }
    assert_eq!(vocab.len(), 2 + 3 + 80);
    for part in [&splits.val, &splits.test] {
        let ds = part.encode(&vocab, 8);
        assert!(ds.examples.iter().all(|e| e.ids[0] == UNK));
        for (raw, enc) in part.examples.iter().zip(&ds.examples) {
            for (tok, &id) in raw.tokens.iter().zip(&enc.ids) {
                if !train_tokens.contains(tok) {
                    assert_eq!(id, UNK);
                    assert_eq!(vocab.token(id), UNK_TOKEN);
                }
            }
        }
    }
}

#[test]
fn vocab_is_deterministic() {
    let seqs: Vec<Vec<String>> = vec![
        vec!["b".into(), "a".into(), "b".into()],
        vec!["c".into(), "a".into(), "b".into()],
    ];
    let v = Vocab::build(seqs.iter().map(|s| s.as_slice()));
    assert_eq!(v.tokens(), &["<pad>", "<unk>", "b", "a", "c"]);
}

fn jsonl(lines: &[&str]) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    for l in lines {
        writeln!(f, "{l}").unwrap();
    }
    f
}

#[test]
fn two_line_file_stats() {
    let f = jsonl(&[
        r#"{"code": "int f(char *p) { strcpy(buf, p); }", "label": 1}"#,
        r#"{"code": "int g(void) { return 0; }", "label": 0}"#,
    ]);
    let c = ingest_reveal(f.path()).unwrap();
    assert_eq!(c.stats(), ClassStats { n_pos: 1, n_neg: 1 });
    assert_eq!(c.provenance, "reveal");
}

#[test]
fn truncated_line_reports_line_number() {
    let f = jsonl(&[
        r#"{"code": "a", "label": 0}"#,
        r#"{"code": "b", "label": 1}"#,
        r#"{"code": "c", "lab"#,
    ]);
    match ingest_jsonl(f.path()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn missing_fields_are_errors() {
    for (bad, line) in [(r#"{"label": 1}"#, 2), (r#"{"code": "x"}"#, 2), (r#"{"code": "x", "label": 2}"#, 2)] {
        let f = jsonl(&[r#"{"code": "ok", "label": 0}"#, bad]);
        match ingest_jsonl(f.path()) {
            Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{bad}"),
            other => panic!("{bad}: expected parse error, got {other:?}"),
        }
    }
}

#[test]
fn generators_reproducible_and_balanced() {
    for seed in 0..3 {
        let a = synth_longrange(2000, 256, 64, &mut Rng::new(seed)).unwrap();
        let b = synth_longrange(2000, 256, 64, &mut Rng::new(seed)).unwrap();
        assert_eq!(a, b);
        // 4σ binomial band around 1000.
        assert!((a.stats.n_pos as i64 - 1000).abs() <= 90, "{:?}", a.stats);
        let l = synth_local(2000, 256, &mut Rng::new(seed)).unwrap();
        assert_eq!(l, synth_local(2000, 256, &mut Rng::new(seed)).unwrap());
        assert!((l.stats.n_pos as i64 - 1000).abs() <= 90, "{:?}", l.stats);
    }
    let x = synth_longrange(50, 256, 64, &mut Rng::new(0)).unwrap();
    let y = synth_longrange(50, 256, 64, &mut Rng::new(1)).unwrap();
    assert_ne!(x, y);
}

#[test]
fn longrange_distance_bounds() {
    for d in [0, 1, 255, 300] {
        assert!(synth_longrange(10, 256, d, &mut Rng::new(0)).is_err(), "d={d}");
    }
    assert!(synth_longrange(10, 256, 64, &mut Rng::new(0)).is_ok());
}

#[test]
fn jsonl_round_trip() {
    let ds = synth_local(20, 32, &mut Rng::new(4)).unwrap();
    let corpus = ds.to_corpus();
    let f = tempfile::NamedTempFile::new().unwrap();
    corpus.write_jsonl(f.path()).unwrap();
    let back = ingest_jsonl(f.path()).unwrap();
    assert_eq!(back.examples, corpus.examples);
}
