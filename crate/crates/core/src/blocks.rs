//! The six feature-extraction blocks and the shared classification head.
//!
//! Every model is `embed → feature block → ReLU → global max pool → concat
//! → dropout → affine → logit`; only the feature block differs.
//!
//! Conv-bearing blocks run one branch per configured kernel size. The S4D
//! layer, when present, is a single parameter set shared by all branches.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::tape::{NodeId, Tape};
use crate::numeric::{rng, Rng, Tensor};
use crate::s4d::{self, DiagonalSsmParams, Kernel, SsmNodes};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Conv1d,
    Dwsep,
    S4d,
    DwsepS4d,
    ConvS4d,
    SmrS4d,
}

impl Arch {
    pub const ALL: [Arch; 6] = [
        Arch::Conv1d,
        Arch::Dwsep,
        Arch::S4d,
        Arch::DwsepS4d,
        Arch::ConvS4d,
        Arch::SmrS4d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Conv1d => "conv1d",
            Arch::Dwsep => "dwsep",
            Arch::S4d => "s4d",
            Arch::DwsepS4d => "dwsep_s4d",
            Arch::ConvS4d => "conv_s4d",
            Arch::SmrS4d => "smr_s4d",
        }
    }

    pub fn has_ssm(self) -> bool {
        matches!(self, Arch::S4d | Arch::DwsepS4d | Arch::ConvS4d | Arch::SmrS4d)
    }

    pub fn has_conv(self) -> bool {
        self != Arch::S4d
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    /// Accepts `smr_s4d` and `smr-s4d` spellings.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == norm)
            .ok_or_else(|| Error::UnknownArch(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureBlockConfig {
    pub arch: Arch,
    pub embed_dim: usize,
    /// Channel count `H` of conv outputs and of the S4D layer.
    pub hidden: usize,
    pub kernel_sizes: Vec<usize>,
    pub state_size: usize,
    pub dropout: f64,
    pub seq_len: usize,
    pub dt_min: f64,
    pub dt_max: f64,
    /// 1×1 projection in front of the S4D layer; required whenever its input
    /// channel count differs from `hidden`.
    pub input_adapter: bool,
}

impl FeatureBlockConfig {
    pub fn new(arch: Arch) -> Self {
        Self {
            arch,
            embed_dim: 64,
            hidden: 64,
            kernel_sizes: vec![6],
            state_size: 16,
            dropout: 0.5,
            seq_len: 256,
            dt_min: 1e-3,
            dt_max: 1e-1,
            input_adapter: false,
        }
    }

    /// Channel count entering the S4D layer before any adapter.
    fn ssm_input_channels(&self) -> usize {
        match self.arch {
            Arch::ConvS4d => self.hidden,
            _ => self.embed_dim,
        }
    }

    pub fn needs_adapter(&self) -> bool {
        self.arch.has_ssm() && self.ssm_input_channels() != self.hidden
    }

    pub fn branch_count(&self) -> usize {
        if self.arch.has_conv() {
            self.kernel_sizes.len()
        } else {
            1
        }
    }

    /// Width of the concatenated pooled features.
    pub fn concat_dim(&self) -> usize {
        self.branch_count() * self.hidden
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.embed_dim == 0 || self.hidden == 0 || self.seq_len == 0 {
            return bad("embed_dim, hidden and seq_len must be >= 1".into());
        }
        if self.arch.has_conv() {
            if self.kernel_sizes.is_empty() {
                return bad(format!("{} needs at least one kernel size", self.arch));
            }
            if let Some(&k) = self.kernel_sizes.iter().find(|&&k| k == 0 || k > self.seq_len) {
                return bad(format!("kernel size {k} outside 1..={}", self.seq_len));
            }
        }
        if self.arch.has_ssm() {
            if self.state_size == 0 {
                return bad(format!("{} needs state_size >= 1", self.arch));
            }
            if self.needs_adapter() && !self.input_adapter {
                return bad(format!(
                    "S4D input has {} channels but hidden = {}; enable input_adapter",
                    self.ssm_input_channels(),
                    self.hidden
                ));
            }
        }
        if self.input_adapter && !self.needs_adapter() {
            return bad("input_adapter set but channel counts already agree".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Weight and bias of a convolution or affine map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn uniform(shape: &[usize], fan_in: usize, out: usize, rng: &mut Rng) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let weight = Tensor::new(shape, (0..n).map(|_| rng.uniform_range(-bound, bound)).collect())?;
        let bias = Tensor::vector((0..out).map(|_| rng.uniform_range(-bound, bound)).collect());
        Ok(Self { weight, bias })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub kernel_size: usize,
    /// conv1d `[out, in, k]` or depthwise `[channels, k]` weights.
    pub local: Option<Linear>,
    /// 1×1 channel mix `[out, in, 1]`.
    pub pointwise: Option<Linear>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub embedding: Tensor,
    pub adapter: Option<Linear>,
    pub branches: Vec<Branch>,
    pub ssm: Option<DiagonalSsmParams>,
    /// `weight [1, concat_dim]`, `bias [1]`.
    pub head: Linear,
}

impl ModelParams {
    /// Trainable tensors with stable names; this order is the optimizer order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        if let Some(a) = &self.adapter {
            out.push(("adapter.weight".into(), &a.weight));
            out.push(("adapter.bias".into(), &a.bias));
        }
        for (i, b) in self.branches.iter().enumerate() {
            if let Some(l) = &b.local {
                out.push((format!("branch.{i}.local.weight"), &l.weight));
                out.push((format!("branch.{i}.local.bias"), &l.bias));
            }
            if let Some(p) = &b.pointwise {
                out.push((format!("branch.{i}.pointwise.weight"), &p.weight));
                out.push((format!("branch.{i}.pointwise.bias"), &p.bias));
            }
        }
        if let Some(s) = &self.ssm {
            for (name, t) in s.trainable() {
                out.push((format!("ssm.{name}"), t));
            }
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    /// Same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        if let Some(a) = &mut self.adapter {
            out.push(&mut a.weight);
            out.push(&mut a.bias);
        }
        for b in &mut self.branches {
            if let Some(l) = &mut b.local {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
            if let Some(p) = &mut b.pointwise {
                out.push(&mut p.weight);
                out.push(&mut p.bias);
            }
        }
        if let Some(s) = &mut self.ssm {
            for (_, t) in s.trainable_mut() {
                out.push(t);
            }
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    /// Stored tensors the optimizer never updates.
    pub fn frozen(&self) -> Vec<String> {
        match &self.ssm {
            Some(_) => ["a_re", "a_im", "b_re", "b_im"].map(|n| format!("ssm.{n}")).to_vec(),
            None => Vec::new(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.dim(0)
    }

    pub fn validate(&self, config: &FeatureBlockConfig) -> Result<()> {
        let reference = build_shapes(config, self.vocab_size())?;
        let ours: Vec<(String, Vec<usize>)> = self.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        if ours != reference {
            return Err(Error::Checkpoint(format!(
                "parameter layout does not match {} config",
                config.arch
            )));
        }
        if let Some(s) = &self.ssm {
            s.validate()?;
        }
        Ok(())
    }
}

fn build_shapes(config: &FeatureBlockConfig, vocab: usize) -> Result<Vec<(String, Vec<usize>)>> {
    let mut throwaway = Rng::new(0);
    let p = build(config, vocab, &mut throwaway)?;
    Ok(p.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect())
}

/// Fresh parameters: conv/affine uniform ±1/√fan_in, embedding N(0, 0.02²),
/// S4D per S4D-Lin.
pub fn build(config: &FeatureBlockConfig, vocab_size: usize, rng: &mut Rng) -> Result<ModelParams> {
    config.validate()?;
    if vocab_size < 2 {
        return Err(Error::InvalidConfig(format!("vocab_size {vocab_size} < 2")));
    }
    let (e, h) = (config.embed_dim, config.hidden);
    let embedding = Tensor::new(
        &[vocab_size, e],
        (0..vocab_size * e).map(|_| 0.02 * rng.normal()).collect(),
    )?;
    let adapter = if config.needs_adapter() {
        let cin = config.ssm_input_channels();
        Some(Linear::uniform(&[h, cin, 1], cin, h, rng)?)
    } else {
        None
    };
    let mut branches = Vec::new();
    for bi in 0..config.branch_count() {
        let k = if config.arch.has_conv() { config.kernel_sizes[bi] } else { 0 };
        let (local, pointwise) = match config.arch {
            Arch::Conv1d | Arch::ConvS4d => (Some(Linear::uniform(&[h, e, k], e * k, h, rng)?), None),
            Arch::Dwsep => (
                Some(Linear::uniform(&[e, k], k, e, rng)?),
                Some(Linear::uniform(&[h, e, 1], e, h, rng)?),
            ),
            Arch::DwsepS4d => (
                Some(Linear::uniform(&[e, k], k, e, rng)?),
                Some(Linear::uniform(&[h, h, 1], h, h, rng)?),
            ),
            Arch::SmrS4d => (Some(Linear::uniform(&[e, e, k], e * k, e, rng)?), None),
            Arch::S4d => (None, None),
        };
        branches.push(Branch {
            kernel_size: k,
            local,
            pointwise,
        });
    }
    let ssm = if config.arch.has_ssm() {
        Some(s4d::init_s4d(h, config.state_size, config.dt_min, config.dt_max, rng)?)
    } else {
        None
    };
    let d = config.concat_dim();
    let head = Linear::uniform(&[1, d], d, 1, rng)?;
    Ok(ModelParams {
        embedding,
        adapter,
        branches,
        ssm,
        head,
    })
}

/// Fixed-length token ids, row-major `[batch, len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub len: usize,
}

impl TokenBatch {
    pub fn from_rows<'a>(rows: impl IntoIterator<Item = &'a [u32]>) -> Result<Self> {
        let mut ids = Vec::new();
        let mut batch = 0;
        let mut len = None;
        for r in rows {
            match len {
                None => len = Some(r.len()),
                Some(l) if l != r.len() => {
                    return Err(Error::shape("token batch (rows must be padded)", &[l], &[r.len()]));
                }
                _ => {}
            }
            ids.extend_from_slice(r);
            batch += 1;
        }
        Ok(Self {
            ids,
            batch,
            len: len.unwrap_or(0),
        })
    }
}

struct LinearNodes {
    weight: NodeId,
    bias: NodeId,
}

struct BranchNodes {
    local: Option<LinearNodes>,
    pointwise: Option<LinearNodes>,
}

/// Parameters registered as tape leaves.
pub struct BoundParams {
    /// Leaf ids in [`ModelParams::named`] order.
    pub leaves: Vec<NodeId>,
    embedding: NodeId,
    adapter: Option<LinearNodes>,
    branches: Vec<BranchNodes>,
    ssm: Option<SsmNodes>,
    head: LinearNodes,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &ModelParams) -> Self {
        let leaves: Vec<NodeId> = params.named().into_iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        let mut it = leaves.iter().copied();
        let mut next = || it.next().expect("leaf count matches named()");
        let embedding = next();
        let mut linear = |present: bool| {
            present.then(|| LinearNodes {
                weight: next(),
                bias: next(),
            })
        };
        let adapter = linear(params.adapter.is_some());
        let branches = params
            .branches
            .iter()
            .map(|b| BranchNodes {
                local: linear(b.local.is_some()),
                pointwise: linear(b.pointwise.is_some()),
            })
            .collect();
        let ssm = params.ssm.as_ref().map(|_| SsmNodes {
            c_re: next(),
            c_im: next(),
            log_dt: next(),
            d: next(),
        });
        let head = LinearNodes {
            weight: next(),
            bias: next(),
        };
        Self {
            leaves,
            embedding,
            adapter,
            branches,
            ssm,
            head,
        }
    }
}

/// Node handles of one forward pass.
pub struct ForwardPass {
    /// `[batch]`
    pub logits: NodeId,
    pub embeddings: NodeId,
    /// Per branch: input of the S4D layer (after any adapter).
    pub ssm_inputs: Vec<NodeId>,
    /// Per branch: output of the feature block, before the head.
    pub features: Vec<NodeId>,
    /// Concatenated pooled features before dropout, `[batch, concat_dim]`.
    pub pooled: NodeId,
}

fn check_batch(config: &FeatureBlockConfig, vocab: usize, tokens: &TokenBatch) -> Result<()> {
    if tokens.batch == 0 {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    if tokens.len != config.seq_len || tokens.ids.len() != tokens.batch * tokens.len {
        return Err(Error::shape(
            "forward (inputs must be padded to seq_len)",
            &[tokens.batch, tokens.len],
            &[tokens.batch, config.seq_len],
        ));
    }
    if let Some(&bad) = tokens.ids.iter().find(|&&i| i as usize >= vocab) {
        return Err(Error::InvalidConfig(format!("token id {bad} >= vocab size {vocab}")));
    }
    Ok(())
}

/// Record one forward pass on `tape`.
pub fn forward(
    tape: &mut Tape,
    bound: &BoundParams,
    params: &ModelParams,
    config: &FeatureBlockConfig,
    tokens: &TokenBatch,
    train: bool,
    rng: &mut Rng,
) -> Result<ForwardPass> {
    check_batch(config, params.vocab_size(), tokens)?;
    let x = tape.embedding(bound.embedding, &tokens.ids, tokens.batch, tokens.len)?;

    let ssm = |tape: &mut Tape, u: NodeId, ssm_inputs: &mut Vec<NodeId>| -> Result<NodeId> {
        let u = match &bound.adapter {
            Some(a) => tape.conv1d(u, a.weight, Some(a.bias))?,
            None => u,
        };
        ssm_inputs.push(u);
        let p = params.ssm.as_ref().expect("S4D arch has ssm params");
        let nodes = bound.ssm.as_ref().expect("S4D arch has ssm nodes");
        s4d::s4d_layer(tape, p, nodes, u)
    };

    let mut ssm_inputs = Vec::new();
    let mut features = Vec::new();
    for b in &bound.branches {
        let local = b.local.as_ref();
        let feat = match config.arch {
            Arch::Conv1d => {
                let l = local.expect("conv branch");
                tape.conv1d(x, l.weight, Some(l.bias))?
            }
            Arch::Dwsep => {
                let l = local.expect("depthwise branch");
                let p = b.pointwise.as_ref().expect("pointwise");
                let dw = tape.depthwise_conv1d(x, l.weight, Some(l.bias))?;
                tape.conv1d(dw, p.weight, Some(p.bias))?
            }
            Arch::S4d => ssm(tape, x, &mut ssm_inputs)?,
            Arch::DwsepS4d => {
                let l = local.expect("depthwise branch");
                let p = b.pointwise.as_ref().expect("pointwise");
                let dw = tape.depthwise_conv1d(x, l.weight, Some(l.bias))?;
                let y = ssm(tape, dw, &mut ssm_inputs)?;
                tape.conv1d(y, p.weight, Some(p.bias))?
            }
            Arch::ConvS4d => {
                let l = local.expect("conv branch");
                let c = tape.conv1d(x, l.weight, Some(l.bias))?;
                ssm(tape, c, &mut ssm_inputs)?
            }
            Arch::SmrS4d => {
                let l = local.expect("conv branch");
                let s = tape.conv1d(x, l.weight, Some(l.bias))?;
                let fused = tape.mul(s, x)?;
                ssm(tape, fused, &mut ssm_inputs)?
            }
        };
        features.push(feat);
    }

    let mut pooled = Vec::with_capacity(features.len());
    for &f in &features {
        let r = tape.relu(f);
        pooled.push(tape.global_max_pool(r)?);
    }
    let cat = if pooled.len() == 1 { pooled[0] } else { tape.concat(&pooled)? };
    let dropped = tape.dropout(cat, config.dropout, train, rng)?;
    let z = tape.affine(dropped, bound.head.weight, bound.head.bias)?;
    let logits = tape.reshape(z, &[tokens.batch])?;
    Ok(ForwardPass {
        logits,
        embeddings: x,
        ssm_inputs,
        features,
        pooled: cat,
    })
}

/// Eval-mode logits.
pub fn predict_logits(params: &ModelParams, config: &FeatureBlockConfig, tokens: &TokenBatch) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let mut unused = Rng::new(0).split(rng::DROPOUT);
    let pass = forward(&mut tape, &bound, params, config, tokens, false, &mut unused)?;
    Ok(tape.value(pass.logits).data().to_vec())
}

/// Kernels for the analysis pipeline.
///
/// S4D-bearing models yield the materialized S4D kernel `[H, seq_len]`.
/// Conv1d yields one short kernel per output channel of the first branch,
/// summed over input channels. Depthwise yields its per-channel taps.
pub fn extract_kernels(params: &ModelParams, config: &FeatureBlockConfig) -> Result<Option<Kernel>> {
    if let Some(ssm) = &params.ssm {
        return s4d::materialize_kernel(ssm, config.seq_len).map(Some);
    }
    let Some(local) = params.branches.first().and_then(|b| b.local.as_ref()) else {
        return Ok(None);
    };
    let w = &local.weight;
    match w.rank() {
        3 => {
            let (out, cin, k) = (w.dim(0), w.dim(1), w.dim(2));
            let mut values = vec![0.0; out * k];
            for o in 0..out {
                for c in 0..cin {
                    for j in 0..k {
                        values[o * k + j] += w.data()[(o * cin + c) * k + j];
                    }
                }
            }
            Kernel::new(out, k, values).map(Some)
        }
        2 => Kernel::new(w.dim(0), w.dim(1), w.data().to_vec()).map(Some),
        _ => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(arch: Arch) -> FeatureBlockConfig {
        FeatureBlockConfig {
            embed_dim: 4,
            hidden: 4,
            state_size: 3,
            seq_len: 16,
            kernel_sizes: vec![3],
            ..FeatureBlockConfig::new(arch)
        }
    }

    #[test]
    fn parses_both_spellings() {
        assert_eq!("smr-s4d".parse::<Arch>().unwrap(), Arch::SmrS4d);
        assert_eq!("dwsep_s4d".parse::<Arch>().unwrap(), Arch::DwsepS4d);
        assert!(matches!("lstm".parse::<Arch>(), Err(Error::UnknownArch(_))));
    }

    #[test]
    fn multi_kernel_conv_has_three_branches() {
        let cfg = FeatureBlockConfig {
            kernel_sizes: vec![3, 4, 5],
            ..small(Arch::Conv1d)
        };
        let p = build(&cfg, 10, &mut Rng::new(0)).unwrap();
        assert_eq!(p.branches.len(), 3);
        assert_eq!(cfg.concat_dim(), 3 * cfg.hidden);
        assert_eq!(p.head.weight.shape(), &[1, 12]);
    }

    #[test]
    fn s4d_allocates_no_conv() {
        let p = build(&small(Arch::S4d), 10, &mut Rng::new(0)).unwrap();
        assert!(p.branches.iter().all(|b| b.local.is_none() && b.pointwise.is_none()));
        assert!(p.adapter.is_none());
        assert!(p.ssm.is_some());
    }

    #[test]
    fn mismatched_channels_need_declared_adapter() {
        let cfg = FeatureBlockConfig {
            hidden: 6,
            ..small(Arch::S4d)
        };
        assert!(cfg.validate().is_err());
        let cfg = FeatureBlockConfig {
            input_adapter: true,
            ..cfg
        };
        let p = build(&cfg, 10, &mut Rng::new(0)).unwrap();
        assert_eq!(p.adapter.as_ref().unwrap().weight.shape(), &[6, 4, 1]);
    }

    #[test]
    fn rejects_tiny_vocab_and_bad_kernel() {
        assert!(build(&small(Arch::Conv1d), 1, &mut Rng::new(0)).is_err());
        let cfg = FeatureBlockConfig {
            kernel_sizes: vec![17],
            ..small(Arch::Conv1d)
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn logits_have_batch_shape_for_every_arch() {
        for arch in Arch::ALL {
            let cfg = small(arch);
            let p = build(&cfg, 10, &mut Rng::new(1)).unwrap();
            let rows: Vec<Vec<u32>> = vec![vec![2; 16], vec![3; 16]];
            let tb = TokenBatch::from_rows(rows.iter().map(|r| r.as_slice())).unwrap();
            let z = predict_logits(&p, &cfg, &tb).unwrap();
            assert_eq!(z.len(), 2, "{arch}");
        }
    }

    #[test]
    fn unpadded_input_rejected() {
        let cfg = small(Arch::Conv1d);
        let p = build(&cfg, 10, &mut Rng::new(1)).unwrap();
        let tb = TokenBatch::from_rows([&[1u32, 2, 3][..]]).unwrap();
        assert!(predict_logits(&p, &cfg, &tb).is_err());
        assert!(TokenBatch::from_rows([&[1u32, 2][..], &[1u32][..]]).is_err());
    }

    #[test]
    fn kernel_shapes() {
        let cfg = small(Arch::S4d);
        let p = build(&cfg, 10, &mut Rng::new(0)).unwrap();
        let k = extract_kernels(&p, &cfg).unwrap().unwrap();
        assert_eq!((k.channels, k.len), (4, 16));

        let cfg = FeatureBlockConfig {
            kernel_sizes: vec![6],
            ..small(Arch::Conv1d)
        };
        let p = build(&cfg, 10, &mut Rng::new(0)).unwrap();
        let k = extract_kernels(&p, &cfg).unwrap().unwrap();
        assert_eq!((k.channels, k.len), (4, 6));
    }
}
