use ssmlab_core::blocks::{self, Arch, BoundParams, FeatureBlockConfig, ModelParams, TokenBatch};
use ssmlab_core::numeric::{Rng, Tape, Tensor};
use ssmlab_core::train::{weighted_bce_logits, Trainer};

const VOCAB: usize = 12;

fn small(arch: Arch) -> FeatureBlockConfig {
    FeatureBlockConfig {
        embed_dim: 4,
        hidden: 4,
        state_size: 4,
        seq_len: 24,
        ..FeatureBlockConfig::new(arch)
    }
}

fn rows(r: &mut Rng, batch: usize, len: usize) -> Vec<Vec<u32>> {
    (0..batch).map(|_| (0..len).map(|_| r.below(VOCAB) as u32).collect()).collect()
}

fn batch(rows: &[Vec<u32>]) -> TokenBatch {
    TokenBatch::from_rows(rows.iter().map(|v| v.as_slice())).unwrap()
}

fn model(arch: Arch, seed: u64) -> (FeatureBlockConfig, ModelParams) {
    let cfg = small(arch);
    let p = blocks::build(&cfg, VOCAB, &mut Rng::new(seed)).unwrap();
    (cfg, p)
}

#[test]
fn same_seed_same_params() {
    for arch in Arch::ALL {
        assert_eq!(model(arch, 3).1, model(arch, 3).1, "{arch}");
        assert_ne!(model(arch, 3).1, model(arch, 4).1, "{arch}");
    }
}

#[test]
fn batch_permutation_permutes_logits() {
    for arch in Arch::ALL {
        let (cfg, p) = model(arch, 1);
        let mut r = Rng::new(2);
        let xs = rows(&mut r, 5, cfg.seq_len);
        let perm = [3, 0, 4, 1, 2];
        let permuted: Vec<Vec<u32>> = perm.iter().map(|&i| xs[i].clone()).collect();
        let a = blocks::predict_logits(&p, &cfg, &batch(&xs)).unwrap();
        let b = blocks::predict_logits(&p, &cfg, &batch(&permuted)).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert!((b[k] - a[i]).abs() < 1e-12, "{arch}");
        }
    }
}

#[test]
fn eval_forward_is_bitwise_deterministic() {
    for arch in Arch::ALL {
        let (cfg, p) = model(arch, 5);
        let xs = rows(&mut Rng::new(6), 3, cfg.seq_len);
        let a = blocks::predict_logits(&p, &cfg, &batch(&xs)).unwrap();
        let b = blocks::predict_logits(&p, &cfg, &batch(&xs)).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

fn ssm_input(p: &ModelParams, cfg: &FeatureBlockConfig, xs: &TokenBatch) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, p);
    let pass = blocks::forward(&mut tape, &bound, p, cfg, xs, false, &mut Rng::new(0)).unwrap();
    (tape.value(pass.ssm_inputs[0]).clone(), tape.value(pass.embeddings).clone())
}

#[test]
fn smr_unit_gate_passes_embeddings() {
    let (cfg, mut p) = model(Arch::SmrS4d, 7);
    let conv = p.branches[0].local.as_mut().unwrap();
    conv.weight = Tensor::zeros(conv.weight.shape());
    conv.bias = Tensor::vector(vec![1.0; cfg.embed_dim]);
    let xs = batch(&rows(&mut Rng::new(8), 2, cfg.seq_len));
    let (u, x) = ssm_input(&p, &cfg, &xs);
    assert_eq!(u, x);
}

#[test]
fn smr_zero_gate_annihilates() {
    let (cfg, mut p) = model(Arch::SmrS4d, 7);
    let conv = p.branches[0].local.as_mut().unwrap();
    conv.weight = Tensor::zeros(conv.weight.shape());
    conv.bias = Tensor::zeros(conv.bias.shape());
    let xs = batch(&rows(&mut Rng::new(8), 2, cfg.seq_len));
    let (u, _) = ssm_input(&p, &cfg, &xs);
    assert!(u.data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_conv_reports_channel_max() {
    let cfg = FeatureBlockConfig {
        embed_dim: 2,
        hidden: 2,
        kernel_sizes: vec![1],
        seq_len: 10,
        dropout: 0.0,
        ..FeatureBlockConfig::new(Arch::Conv1d)
    };
    let mut p = blocks::build(&cfg, VOCAB, &mut Rng::new(0)).unwrap();
    p.embedding = Tensor::new(&[VOCAB, 2], (0..2 * VOCAB).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let conv = p.branches[0].local.as_mut().unwrap();
    conv.weight = Tensor::new(&[2, 2, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    conv.bias = Tensor::zeros(&[2]);
    p.head.weight = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
    p.head.bias = Tensor::zeros(&[1]);
    let xs = rows(&mut Rng::new(1), 4, 10);
    let logits = blocks::predict_logits(&p, &cfg, &batch(&xs)).unwrap();
    for (row, z) in xs.iter().zip(logits) {
        let direct = row.iter().map(|&t| p.embedding.data()[t as usize * 2]).fold(0.0f64, f64::max);
        assert!((z - direct).abs() < 1e-15);
    }
}

#[test]
fn every_parameter_receives_gradient() {
    for arch in Arch::ALL {
        let (cfg, p) = model(arch, 9);
        let cfg = FeatureBlockConfig { dropout: 0.0, ..cfg };
        let mut r = Rng::new(10);
        let xs = batch(&rows(&mut r, 8, cfg.seq_len));
        let labels: Vec<f64> = (0..8).map(|i| (i % 2) as f64).collect();
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &p);
        let pass = blocks::forward(&mut tape, &bound, &p, &cfg, &xs, true, &mut r).unwrap();
        let loss = weighted_bce_logits(&mut tape, pass.logits, &labels, 1.0).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        for ((name, _), &leaf) in p.named().iter().zip(&bound.leaves) {
            let g = grads.take(leaf).unwrap_or_else(|| panic!("{arch} {name}: no gradient"));
            assert!(g.data().iter().any(|&v| v != 0.0), "{arch} {name}: zero gradient");
        }
    }
}

#[test]
fn one_step_changes_kernels() {
    for arch in Arch::ALL {
        let (cfg, p) = model(arch, 11);
        let before = blocks::extract_kernels(&p, &cfg).unwrap().unwrap();
        let mut r = Rng::new(12);
        let xs = batch(&rows(&mut r, 8, cfg.seq_len));
        let labels: Vec<f64> = (0..8).map(|i| (i % 2) as f64).collect();
        let mut t = Trainer::new(p, cfg.clone(), 1e-3, 1.0);
        t.step(&xs, &labels, &mut r).unwrap();
        let after = blocks::extract_kernels(&t.params, &cfg).unwrap().unwrap();
        assert_eq!(before.values.len(), after.values.len());
        assert_ne!(before.values, after.values, "{arch}");
    }
}
