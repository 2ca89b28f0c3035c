//! Promptable mask decoder.
//!
//! Query features are projected to the prompt width, the dense prompt is
//! added, two residual conv blocks refine the grid, and one cross-attention
//! read of the sparse tokens gates the channels before a single-channel head.

use crate::cmpg::PromptVars;
use crate::encoders::BinaryMask;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderDims {
    /// Channels of the decoder input grid.
    pub in_channels: usize,
    pub prompt_dim: usize,
}

pub fn init_params(store: &mut ParamStore, seed: u64, d: &DecoderDims) {
    let dp = d.prompt_dim;
    store.init(seed, "decoder.proj.w", &[dp, d.in_channels, 1, 1], Init::Scaled { fan_in: d.in_channels, gain: 1.0 });
    store.init(seed, "decoder.proj.b", &[dp], Init::Zeros);
    for i in 1..=2 {
        store.init(seed, &format!("decoder.block{i}.w"), &[dp, dp, 3, 3], Init::Scaled { fan_in: dp * 9, gain: 0.5 });
        store.init(seed, &format!("decoder.block{i}.b"), &[dp], Init::Zeros);
    }
    for m in ["wq", "wk", "wv"] {
        store.init(seed, &format!("decoder.attn.{m}"), &[dp, dp], Init::Scaled { fan_in: dp, gain: 1.0 });
    }
    store.init(seed, "decoder.attn.wm", &[dp, dp], Init::Zeros);
    store.init(seed, "decoder.head.w", &[1, dp, 1, 1], Init::Scaled { fan_in: dp, gain: 1.0 });
    store.init(seed, "decoder.head.b", &[1], Init::Zeros);
}

/// Per-pixel mask logits at image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SegLogits {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SegLogits {
    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        assert!(s.len() == 3 && s[0] == 1, "logits must be 1×H×W");
        Self { height: s[1], width: s[2], values: t.data().to_vec() }
    }

    /// `sigmoid(logit) > 0.5`, i.e. strictly positive logits.
    pub fn to_mask(&self) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, |y, x| self.values[y * self.width + x] > 0.0)
    }
}

/// Decodes a `C_in×H×W` input grid to `1×out_h×out_w` logits. Without a prompt
/// the dense addition and channel gating are skipped.
pub fn decode(g: &mut Graph, store: &ParamStore, input: Var, prompt: Option<PromptVars>, out_h: usize, out_w: usize) -> Result<Var> {
    let s = g.value(input).shape().to_vec();
    let pw = g.param(store, "decoder.proj.w");
    let pws = g.value(pw).shape().to_vec();
    if s.len() != 3 || s[0] != pws[1] {
        return Err(Error::invalid(format!("decoder input {s:?} does not match projection {pws:?}")));
    }
    let dp = pws[0];
    let pb = g.param(store, "decoder.proj.b");
    let mut x = g.conv2d(input, pw, Some(pb), 1, 0);
    if let Some(p) = prompt {
        let ds = g.value(p.dense).shape();
        if ds != [dp, s[1], s[2]] {
            return Err(Error::invalid(format!("dense prompt {ds:?} does not match grid [{dp}, {}, {}]", s[1], s[2])));
        }
        let ss = g.value(p.sparse).shape();
        if ss.len() != 2 || ss[1] != dp {
            return Err(Error::invalid(format!("sparse prompt {ss:?} is not N×{dp}")));
        }
        x = g.add(x, p.dense);
    }
    for i in 1..=2 {
        let w = g.param(store, &format!("decoder.block{i}.w"));
        let b = g.param(store, &format!("decoder.block{i}.b"));
        let c = g.conv2d(x, w, Some(b), 1, 1);
        let c = g.relu(c);
        x = g.add(x, c);
    }
    if let Some(p) = prompt {
        let gain = cross_attention(g, store, x, p.sparse, dp);
        let gated = g.mul_channel(x, gain);
        x = g.add(x, gated);
    }
    let hw = g.param(store, "decoder.head.w");
    let hb = g.param(store, "decoder.head.b");
    let logits = g.conv2d(x, hw, Some(hb), 1, 0);
    Ok(g.resize_bilinear(logits, out_h, out_w))
}

/// Pooled grid query against the sparse tokens; returns a per-channel gain.
fn cross_attention(g: &mut Graph, store: &ParamStore, x: Var, sparse: Var, dp: usize) -> Var {
    let mut p = |n: &str| g.param(store, &format!("decoder.attn.{n}"));
    let (wq, wk, wv, wm) = (p("wq"), p("wk"), p("wv"), p("wm"));
    let pooled = g.spatial_mean(x);
    let row = g.reshape(pooled, &[1, dp]);
    let q = g.matmul(row, wq);
    let k = g.matmul(sparse, wk);
    let v = g.matmul(sparse, wv);
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt);
    let scores = g.scale(scores, 1.0 / (dp as f64).sqrt());
    let attn = g.softmax_rows(scores);
    let ctx = g.matmul(attn, v);
    let gain = g.matmul(ctx, wm);
    g.reshape(gain, &[dp])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const D: DecoderDims = DecoderDims { in_channels: 5, prompt_dim: 4 };

    fn setup() -> (ParamStore, Tensor, Tensor, Tensor) {
        let mut s = ParamStore::new();
        init_params(&mut s, 11, &D);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut r = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
        (s, r(&[5, 3, 3]), r(&[4, 3, 3]), r(&[2, 4]))
    }

    fn run(s: &ParamStore, input: &Tensor, prompt: Option<(&Tensor, &Tensor)>) -> Tensor {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let p = prompt.map(|(d, sp)| PromptVars { dense: g.constant(d.clone()), sparse: g.constant(sp.clone()) });
        let out = decode(&mut g, s, x, p, 12, 12).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn shape_and_determinism() {
        let (s, x, d, sp) = setup();
        let a = run(&s, &x, Some((&d, &sp)));
        assert_eq!(a.shape(), &[1, 12, 12]);
        assert_eq!(a, run(&s, &x, Some((&d, &sp))));
    }

    #[test]
    fn zero_prompt_matches_baseline() {
        let (s, x, _, sp) = setup();
        let zero = Tensor::zeros(&[4, 3, 3]);
        assert_eq!(run(&s, &x, Some((&zero, &sp))), run(&s, &x, None));
    }

    #[test]
    fn prompt_changes_logits() {
        let (mut s, x, d, sp) = setup();
        s.set("decoder.attn.wm", Tensor::full(&[4, 4], 0.3));
        let a = run(&s, &x, Some((&d, &sp)));
        let b = run(&s, &x, Some((&d.scale(-1.0), &sp.scale(2.0))));
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn mismatched_prompt_rejected() {
        let (s, x, _, sp) = setup();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let p = PromptVars { dense: g.constant(Tensor::zeros(&[4, 2, 2])), sparse: g.constant(sp) };
        assert!(matches!(decode(&mut g, &s, xv, Some(p), 12, 12), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn zero_logits_give_empty_mask() {
        let l = SegLogits { height: 2, width: 2, values: vec![0.0; 4] };
        assert_eq!(l.to_mask().count(), 0);
        let l = SegLogits { height: 1, width: 2, values: vec![1e-9, -1.0] };
        assert_eq!(l.to_mask().count(), 1);
    }
}
