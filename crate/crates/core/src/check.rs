//! Reference implementations and finite-difference checks.
//!
//! Everything here is deliberately naive: direct sums, step-by-step
//! recurrences and central differences. The fast paths are tested against it.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::blocks::{self, Arch, BoundParams, FeatureBlockConfig, TokenBatch};
use crate::numeric::{NodeId, Rng, Tape, Tensor};
use crate::s4d::{self, DiagonalSsmParams, SsmNodes};
use crate::train::weighted_bce_logits;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).expect("shape matches data")
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

/// One-sided DFT of `x` zero-padded to `padded`, by direct summation.
pub fn naive_dft(x: &[f64], padded: usize) -> Vec<Complex64> {
    (0..padded / 2 + 1)
        .map(|m| {
            x.iter()
                .enumerate()
                .map(|(t, &v)| Complex64::from_polar(v, -2.0 * PI * (m * t) as f64 / padded as f64))
                .sum()
        })
        .collect()
}

/// Steps `x ← Ā x + B̄ u`, `y = 2 Re(C x)` on an impulse, recomputing the
/// ZOH discretization from `A`, `B` and `Δ`.
pub fn recurrent_kernel(p: &DiagonalSsmParams, len: usize) -> Vec<f64> {
    let (h, n) = (p.channels(), p.state_size());
    let mut out = vec![0.0; h * len];
    for ch in 0..h {
        let dt = p.log_dt.data()[ch].exp();
        for m in 0..n {
            let i = ch * n + m;
            let a = Complex64::new(p.a_re.data()[i], p.a_im.data()[i]);
            let b = Complex64::new(p.b_re.data()[i], p.b_im.data()[i]);
            let c = Complex64::new(p.c_re.data()[i], p.c_im.data()[i]);
            let a_bar = (a * dt).exp();
            let b_bar = (a_bar - 1.0) / a * b;
            let mut state = b_bar;
            for l in 0..len {
                out[ch * len + l] += 2.0 * (c * state).re;
                state *= a_bar;
            }
        }
    }
    out
}

/// `y[b,h,t] = Σ_{j ≤ t} K[h,j]·u[b,h,t−j] + D[h]·u[b,h,t]`.
pub fn direct_causal(u: &Tensor, k: &[f64], d: &[f64]) -> Vec<f64> {
    let (batch, h, len) = (u.dim(0), u.dim(1), u.dim(2));
    let mut y = vec![0.0; u.len()];
    for b in 0..batch {
        for c in 0..h {
            let row = &u.data()[(b * h + c) * len..][..len];
            for t in 0..len {
                let mut acc = d[c] * row[t];
                for j in 0..=t {
                    acc += k[c * len + j] * row[t - j];
                }
                y[(b * h + c) * len + t] = acc;
            }
        }
    }
    y
}

/// Builds a graph from input values; returns the input leaves and the output node.
pub type Build<'a> = dyn Fn(&mut Tape, &[Tensor]) -> (Vec<NodeId>, NodeId) + 'a;

fn projected(build: &Build, inputs: &[Tensor], proj: &Tensor) -> (Tape, Vec<NodeId>, NodeId) {
    let mut tape = Tape::new();
    let (leaves, out) = build(&mut tape, inputs);
    let r = tape.leaf(proj.clone());
    let prod = tape.mul(out, r).expect("projection matches output shape");
    let loss = tape.sum(prod);
    (tape, leaves, loss)
}

/// Relative error of the analytic gradient against central differences,
/// one entry per input listed in `wrt`. The output is contracted with a
/// fixed random projection so non-scalar outputs are covered.
pub fn grad_check(inputs: &[Tensor], wrt: &[usize], seed: u64, build: &Build) -> Vec<f64> {
    let mut probe = Tape::new();
    let (_, out) = build(&mut probe, inputs);
    let shape = probe.value(out).shape().to_vec();
    let proj = randn(&mut Rng::new(seed ^ 0x5eed), &shape);

    let (tape, leaves, loss) = projected(build, inputs, &proj);
    let grads = tape.backward(loss).expect("backward runs");
    let eval = |xs: &[Tensor]| {
        let (t, _, l) = projected(build, xs, &proj);
        t.value(l).item()
    };
    wrt.iter()
        .map(|&i| {
            let analytic = grads
                .get(leaves[i])
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
            let mut numeric = vec![0.0; inputs[i].len()];
            let mut xs = inputs.to_vec();
            for (j, slot) in numeric.iter_mut().enumerate() {
                let orig = inputs[i].data()[j];
                xs[i].data_mut()[j] = orig + FD_STEP;
                let up = eval(&xs);
                xs[i].data_mut()[j] = orig - FD_STEP;
                let down = eval(&xs);
                xs[i].data_mut()[j] = orig;
                *slot = (up - down) / (2.0 * FD_STEP);
            }
            rel_err(&analytic, &numeric)
        })
        .collect()
}

fn leaves(tape: &mut Tape, xs: &[Tensor]) -> Vec<NodeId> {
    xs.iter().map(|x| tape.leaf(x.clone())).collect()
}

/// A gradient check at one random point; returns one error per checked input.
pub type GradCase = fn(&mut Rng) -> Vec<f64>;

fn random_ssm(r: &mut Rng, h: usize, n: usize) -> DiagonalSsmParams {
    let mut p = s4d::init_s4d(h, n, 1e-3, 1e-1, r).expect("valid init");
    p.d = randn(r, &[h]);
    p
}

/// Inputs are `[c_re, c_im, log_dt, d, extra...]`.
fn with_ssm(base: &DiagonalSsmParams, xs: &[Tensor]) -> DiagonalSsmParams {
    DiagonalSsmParams {
        c_re: xs[0].clone(),
        c_im: xs[1].clone(),
        log_dt: xs[2].clone(),
        d: xs[3].clone(),
        ..base.clone()
    }
}

fn ssm_inputs(p: &DiagonalSsmParams) -> Vec<Tensor> {
    vec![p.c_re.clone(), p.c_im.clone(), p.log_dt.clone(), p.d.clone()]
}

fn register(t: &mut Tape, p: &DiagonalSsmParams) -> (SsmNodes, Vec<NodeId>) {
    let nodes = SsmNodes::register(t, p);
    (nodes, vec![nodes.c_re, nodes.c_im, nodes.log_dt, nodes.d])
}

fn conv_case(r: &mut Rng, k: usize) -> Vec<f64> {
    let xs = [randn(r, &[2, 3, 9]), randn(r, &[4, 3, k]), randn(r, &[4])];
    grad_check(&xs, &[0, 1, 2], 5, &|t, xs| {
        let l = leaves(t, xs);
        (l.clone(), t.conv1d(l[0], l[1], Some(l[2])).unwrap())
    })
}

fn arch_case(arch: Arch, r: &mut Rng) -> Vec<f64> {
    let cfg = FeatureBlockConfig {
        embed_dim: 3,
        hidden: 3,
        kernel_sizes: vec![2, 3],
        state_size: 2,
        seq_len: 8,
        dropout: 0.0,
        ..FeatureBlockConfig::new(arch)
    };
    let mut params = blocks::build(&cfg, 6, r).unwrap();
    // Larger embeddings keep max-pool argmax positions well separated.
    params.embedding = params.embedding.scale(40.0);
    let rows: Vec<Vec<u32>> = (0..2).map(|_| (0..8).map(|_| r.below(6) as u32).collect()).collect();
    let tokens = TokenBatch::from_rows(rows.iter().map(|v| v.as_slice())).unwrap();
    let xs: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
    let frozen = params.clone();
    let wrt: Vec<usize> = (0..xs.len()).collect();
    grad_check(&xs, &wrt, 22, &|t, xs| {
        let mut p = frozen.clone();
        for (dst, src) in p.tensors_mut().into_iter().zip(xs) {
            *dst = src.clone();
        }
        let bound = BoundParams::bind(t, &p);
        let pass = blocks::forward(t, &bound, &p, &cfg, &tokens, false, &mut Rng::new(0)).unwrap();
        (bound.leaves.clone(), pass.logits)
    })
}

/// Every differentiable primitive and composite path, by name.
pub fn gradient_cases() -> Vec<(&'static str, GradCase)> {
    vec![
        ("add", |r| {
            let xs = [randn(r, &[3, 4]), randn(r, &[3, 4])];
            grad_check(&xs, &[0, 1], 1, &|t, xs| {
                let l = leaves(t, xs);
                (l.clone(), t.add(l[0], l[1]).unwrap())
            })
        }),
        ("mul", |r| {
            let xs = [randn(r, &[2, 5]), randn(r, &[2, 5])];
            grad_check(&xs, &[0, 1], 2, &|t, xs| {
                let l = leaves(t, xs);
                (l.clone(), t.mul(l[0], l[1]).unwrap())
            })
        }),
        ("matmul", |r| {
            let xs = [randn(r, &[3, 4]), randn(r, &[4, 2])];
            grad_check(&xs, &[0, 1], 3, &|t, xs| {
                let l = leaves(t, xs);
                (l.clone(), t.matmul(l[0], l[1]).unwrap())
            })
        }),
        ("affine", |r| {
            let xs = [randn(r, &[3, 5]), randn(r, &[2, 5]), randn(r, &[2])];
            grad_check(&xs, &[0, 1, 2], 4, &|t, xs| {
                let l = leaves(t, xs);
                (l.clone(), t.affine(l[0], l[1], l[2]).unwrap())
            })
        }),
        ("conv1d_k1", |r| conv_case(r, 1)),
        ("conv1d_k3", |r| conv_case(r, 3)),
        ("conv1d_k6", |r| conv_case(r, 6)),
        ("depthwise_conv1d", |r| {
            let xs = [randn(r, &[2, 3, 10]), randn(r, &[3, 6]), randn(r, &[3])];
            grad_check(&xs, &[0, 1, 2], 6, &|t, xs| {
                let l = leaves(t, xs);
                (l.clone(), t.depthwise_conv1d(l[0], l[1], Some(l[2])).unwrap())
            })
        }),
        ("relu", |r| {
            let xs = [randn(r, &[4, 6])];
            grad_check(&xs, &[0], 7, &|t, xs| {
                let l = leaves(t, xs);
                (l.clone(), t.relu(l[0]))
            })
        }),
        ("global_max_pool", |r| {
            let xs = [randn(r, &[2, 3, 8])];
            grad_check(&xs, &[0], 8, &|t, xs| {
                let l = leaves(t, xs);
                (l.clone(), t.global_max_pool(l[0]).unwrap())
            })
        }),
        ("concat", |r| {
            let xs = [randn(r, &[2, 3]), randn(r, &[2, 2])];
            grad_check(&xs, &[0, 1], 9, &|t, xs| {
                let l = leaves(t, xs);
                (l.clone(), t.concat(&l).unwrap())
            })
        }),
        ("reshape", |r| {
            let xs = [randn(r, &[2, 6])];
            grad_check(&xs, &[0], 10, &|t, xs| {
                let l = leaves(t, xs);
                (l.clone(), t.reshape(l[0], &[3, 4]).unwrap())
            })
        }),
        ("dropout", |r| {
            let xs = [randn(r, &[4, 8])];
            grad_check(&xs, &[0], 11, &|t, xs| {
                let l = leaves(t, xs);
                let mut mask_rng = Rng::new(77);
                (l.clone(), t.dropout(l[0], 0.5, true, &mut mask_rng).unwrap())
            })
        }),
        ("exp", |r| {
            let xs = [randn(r, &[5])];
            grad_check(&xs, &[0], 12, &|t, xs| {
                let l = leaves(t, xs);
                (l.clone(), t.exp(l[0]).unwrap())
            })
        }),
        ("log", |r| {
            let xs = [randn(r, &[5]).map(|v| v.abs() + 0.5)];
            grad_check(&xs, &[0], 13, &|t, xs| {
                let l = leaves(t, xs);
                (l.clone(), t.log(l[0]).unwrap())
            })
        }),
        ("sum_mean", |r| {
            let xs = [randn(r, &[3, 3])];
            grad_check(&xs, &[0], 14, &|t, xs| {
                let l = leaves(t, xs);
                let s = t.sum(l[0]);
                let m = t.mean(l[0]);
                (l.clone(), t.add(s, m).unwrap())
            })
        }),
        ("embedding", |r| {
            let ids: Vec<u32> = (0..10).map(|_| r.below(5) as u32).collect();
            let xs = [randn(r, &[5, 3])];
            grad_check(&xs, &[0], 15, &|t, xs| {
                let l = leaves(t, xs);
                (l.clone(), t.embedding(l[0], &ids, 2, 5).unwrap())
            })
        }),
        ("scale_channels", |r| {
            let xs = [randn(r, &[2, 3, 4]), randn(r, &[3])];
            grad_check(&xs, &[0, 1], 16, &|t, xs| {
                let l = leaves(t, xs);
                (l.clone(), t.scale_channels(l[0], l[1]).unwrap())
            })
        }),
        ("weighted_bce", |r| {
            let labels: Vec<f64> = (0..6).map(|_| r.bernoulli(0.5) as u8 as f64).collect();
            let w = 0.5 + 9.0 * r.uniform();
            let xs = [randn(r, &[6]).scale(3.0)];
            grad_check(&xs, &[0], 17, &|t, xs| {
                let l = leaves(t, xs);
                (l.clone(), weighted_bce_logits(t, l[0], &labels, w).unwrap())
            })
        }),
        ("kernel", |r| {
            let base = random_ssm(r, 3, 4);
            let xs = ssm_inputs(&base);
            grad_check(&xs, &[0, 1, 2], 18, &|t, xs| {
                let p = with_ssm(&base, xs);
                let (nodes, ids) = register(t, &p);
                (ids, s4d::kernel_node(t, &p, &nodes, 32).unwrap())
            })
        }),
        ("kernel_small_step", |r| {
            let mut base = random_ssm(r, 2, 2);
            // |ΔA| < 1e-8 on every mode. Im(B̄) is O(Δ²) here, below what a
            // difference quotient can resolve, so C_im is checked by `kernel`.
            base.log_dt = Tensor::vector(vec![-21.0, -20.5]);
            let xs = ssm_inputs(&base);
            grad_check(&xs, &[0, 2], 19, &|t, xs| {
                let p = with_ssm(&base, xs);
                let (nodes, ids) = register(t, &p);
                (ids, s4d::kernel_node(t, &p, &nodes, 8).unwrap())
            })
        }),
        ("causal_conv", |r| {
            let xs = [randn(r, &[2, 3, 12]), randn(r, &[3, 12])];
            grad_check(&xs, &[0, 1], 20, &|t, xs| {
                let l = leaves(t, xs);
                (l.clone(), s4d::causal_conv_node(t, l[0], l[1]).unwrap())
            })
        }),
        ("s4d_layer", |r| {
            let base = random_ssm(r, 3, 4);
            let mut xs = ssm_inputs(&base);
            xs.push(randn(r, &[2, 3, 16]));
            grad_check(&xs, &[0, 1, 2, 3, 4], 21, &|t, xs| {
                let p = with_ssm(&base, xs);
                let (nodes, mut ids) = register(t, &p);
                let u = t.leaf(xs[4].clone());
                ids.push(u);
                (ids, s4d::s4d_layer(t, &p, &nodes, u).unwrap())
            })
        }),
        ("arch_conv1d", |r| arch_case(Arch::Conv1d, r)),
        ("arch_dwsep", |r| arch_case(Arch::Dwsep, r)),
        ("arch_s4d", |r| arch_case(Arch::S4d, r)),
        ("arch_dwsep_s4d", |r| arch_case(Arch::DwsepS4d, r)),
        ("arch_conv_s4d", |r| arch_case(Arch::ConvS4d, r)),
        ("arch_smr_s4d", |r| arch_case(Arch::SmrS4d, r)),
    ]
}

/// Worst relative error of `case` over `points` random points.
pub fn sweep(name: &str, case: GradCase, points: u64) -> f64 {
    (0..points)
        .flat_map(|p| case(&mut Rng::new(1000 + p).split(name)))
        .fold(0.0, f64::max)
}
