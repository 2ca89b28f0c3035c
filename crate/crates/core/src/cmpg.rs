//! Meta-prompt generation: learnable tokens attend over prototypes, the
//! result becomes a semantic embedding, the spatial priors become a mask
//! embedding, and an alignment block fuses both with query features into
//! dense and sparse prompts.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamStore};
use crate::rct::{Polarity, SpatialPrior};
use crate::tensor::{resize_bilinear, Tensor};

/// Sizes shared by the prompt generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CmpgDims {
    /// Prototype (text/visual) width `D`.
    pub proto_dim: usize,
    /// Prompt width `D_p`.
    pub prompt_dim: usize,
    /// Channels of the query features fed to the alignment block.
    pub feature_dim: usize,
    pub mask_hidden: usize,
    pub sparse_tokens: usize,
}

impl Default for CmpgDims {
    fn default() -> Self {
        Self { proto_dim: 32, prompt_dim: 64, feature_dim: 16, mask_hidden: 16, sparse_tokens: 2 }
    }
}

pub const PRIOR_CHANNELS: usize = 4;

fn branch(p: Polarity) -> &'static str {
    match p {
        Polarity::Foreground => "fg",
        Polarity::Background => "bg",
    }
}

pub fn init_params(store: &mut ParamStore, seed: u64, d: &CmpgDims) {
    let (dd, dp) = (d.proto_dim, d.prompt_dim);
    for b in ["fg", "bg"] {
        store.init(seed, &format!("cmpg.token.{b}"), &[dd], Init::Scaled { fan_in: dd, gain: 1.0 });
        for m in ["wq", "wk", "wv"] {
            store.init(seed, &format!("cmpg.sa.{b}.{m}"), &[dd, dd], Init::NoisyIdentity { noise: 0.02 });
        }
    }
    store.init(seed, "cmpg.sem.w", &[2 * dd, dp], Init::Scaled { fan_in: 2 * dd, gain: 1.0 });
    store.init(seed, "cmpg.sem.b", &[dp], Init::Zeros);

    let h = d.mask_hidden;
    store.init(seed, "cmpg.mask.conv1.w", &[h, PRIOR_CHANNELS, 3, 3], Init::Scaled { fan_in: PRIOR_CHANNELS * 9, gain: 2f64.sqrt() });
    store.init(seed, "cmpg.mask.conv1.b", &[h], Init::Zeros);
    store.init(seed, "cmpg.mask.conv2.w", &[dp, h, 3, 3], Init::Scaled { fan_in: h * 9, gain: 1.0 });
    store.init(seed, "cmpg.mask.conv2.b", &[dp], Init::Zeros);
    store.init(seed, "cmpg.adapter.w", &[dp, PRIOR_CHANNELS, 3, 3], Init::Zeros);
    store.init(seed, "cmpg.adapter.b", &[dp], Init::Zeros);

    store.init(seed, "cmpg.align.proj.w", &[dp, d.feature_dim, 1, 1], Init::Scaled { fan_in: d.feature_dim, gain: 1.0 });
    store.init(seed, "cmpg.align.proj.b", &[dp], Init::Zeros);
    for i in 1..=2 {
        store.init(seed, &format!("cmpg.align.conv{i}.w"), &[dp, dp, 3, 3], Init::Scaled { fan_in: dp * 9, gain: 0.5 });
        store.init(seed, &format!("cmpg.align.conv{i}.b"), &[dp], Init::Zeros);
    }
    for j in 1..d.sparse_tokens {
        store.init(seed, &format!("cmpg.head{j}.w"), &[dp, dp], Init::Scaled { fan_in: dp, gain: 1.0 });
        store.init(seed, &format!("cmpg.head{j}.b"), &[dp], Init::Zeros);
    }
}

/// Foreground and background tokens as stored in a parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnableTokens {
    pub token_fg: Vec<f64>,
    pub token_bg: Vec<f64>,
}

impl LearnableTokens {
    pub fn from_store(store: &ParamStore) -> Option<Self> {
        Some(Self { token_fg: store.get("cmpg.token.fg")?.data().to_vec(), token_bg: store.get("cmpg.token.bg")?.data().to_vec() })
    }
}

/// Single-head attention over `[token, protos...]`, read out at the token.
pub fn enhance_prototypes(g: &mut Graph, store: &ParamStore, polarity: Polarity, protos: &[Var]) -> Result<Var> {
    if protos.is_empty() {
        return Err(Error::invalid("prototype set is empty"));
    }
    let b = branch(polarity);
    let token = g.param(store, &format!("cmpg.token.{b}"));
    let d = g.value(token).len();
    if let Some(p) = protos.iter().find(|p| g.value(**p).shape() != [d]) {
        return Err(Error::invalid(format!("prototype shape {:?}, expected [{d}]", g.value(*p).shape())));
    }
    let wq = g.param(store, &format!("cmpg.sa.{b}.wq"));
    let wk = g.param(store, &format!("cmpg.sa.{b}.wk"));
    let wv = g.param(store, &format!("cmpg.sa.{b}.wv"));
    let mut seq = vec![token];
    seq.extend_from_slice(protos);
    let x = g.concat(&seq);
    let x = g.reshape(x, &[seq.len(), d]);
    let t = g.reshape(token, &[1, d]);
    let q = g.matmul(t, wq);
    let k = g.matmul(x, wk);
    let v = g.matmul(x, wv);
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt);
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = g.softmax_rows(scores);
    let out = g.matmul(attn, v);
    Ok(g.reshape(out, &[d]))
}

/// `wᵀ[p_fg; p_bg] + b`.
pub fn compose_semantic(g: &mut Graph, store: &ParamStore, p_fg: Var, p_bg: Var) -> Result<Var> {
    let w = g.param(store, "cmpg.sem.w");
    let b = g.param(store, "cmpg.sem.b");
    let (fg, bg) = (g.value(p_fg).shape().to_vec(), g.value(p_bg).shape().to_vec());
    let ws = g.value(w).shape().to_vec();
    if fg.len() != 1 || fg != bg || ws[0] != 2 * fg[0] || g.value(b).shape() != [ws[1]] {
        return Err(Error::invalid(format!("semantic projection {ws:?} does not fit prototypes {fg:?}/{bg:?}")));
    }
    let cat = g.concat(&[p_fg, p_bg]);
    let row = g.reshape(cat, &[1, ws[0]]);
    let y = g.matmul(row, w);
    let y = g.reshape(y, &[ws[1]]);
    Ok(g.add(y, b))
}

/// Averages per-shot prior quads and resamples them to `out_h×out_w`,
/// giving the `4×out_h×out_w` mask-encoder input.
pub fn prior_stack(priors: &[[SpatialPrior; 4]], out_h: usize, out_w: usize) -> Result<Tensor> {
    let Some(first) = priors.first() else {
        return Err(Error::invalid("no prior maps"));
    };
    let (h, w) = (first[0].height, first[0].width);
    let mut avg = vec![0.0; PRIOR_CHANNELS * h * w];
    for shot in priors {
        for (c, p) in shot.iter().enumerate() {
            if p.height != h || p.width != w || p.values.len() != h * w {
                return Err(Error::invalid(format!("prior resolution {}×{} differs from {h}×{w}", p.height, p.width)));
            }
            for (a, v) in avg[c * h * w..(c + 1) * h * w].iter_mut().zip(&p.values) {
                *a += v;
            }
        }
    }
    let k = priors.len() as f64;
    avg.iter_mut().for_each(|v| *v /= k);
    Ok(Tensor::new(&[PRIOR_CHANNELS, out_h, out_w], resize_bilinear(&avg, PRIOR_CHANNELS, h, w, out_h, out_w)))
}

/// Strided two-layer encoder plus the zero-initialized adapter path.
/// `stack` is `4×(4·H_p)×(4·W_p)`.
pub fn encode_mask_prompt(g: &mut Graph, store: &ParamStore, stack: Tensor) -> Result<Var> {
    let s = stack.shape().to_vec();
    if s.len() != 3 || s[0] != PRIOR_CHANNELS || !s[1].is_multiple_of(4) || !s[2].is_multiple_of(4) {
        return Err(Error::invalid(format!("mask prompt input must be 4×4h×4w, got {s:?}")));
    }
    let x = g.constant(stack);
    let mut p = |n: &str| g.param(store, n);
    let (w1, b1, w2, b2, wa, ba) = (
        p("cmpg.mask.conv1.w"),
        p("cmpg.mask.conv1.b"),
        p("cmpg.mask.conv2.w"),
        p("cmpg.mask.conv2.b"),
        p("cmpg.adapter.w"),
        p("cmpg.adapter.b"),
    );
    let h = g.conv2d(x, w1, Some(b1), 2, 1);
    let h = g.relu(h);
    let enc = g.conv2d(h, w2, Some(b2), 2, 1);
    let pooled = g.avg_pool(x, 4);
    let adapter = g.conv2d(pooled, wa, Some(ba), 1, 1);
    Ok(g.add(enc, adapter))
}

/// Graph handles of a generated prompt.
#[derive(Clone, Copy, Debug)]
pub struct PromptVars {
    pub dense: Var,
    pub sparse: Var,
}

/// Materialized prompt values.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaPrompt {
    /// `D_p×H_p×W_p`
    pub dense: Tensor,
    /// `N_s×D_p`
    pub sparse: Tensor,
}

impl MetaPrompt {
    pub fn read(g: &Graph, v: PromptVars) -> Self {
        Self { dense: g.value(v.dense).clone(), sparse: g.value(v.sparse).clone() }
    }
}

pub fn align_prompts(g: &mut Graph, store: &ParamStore, d: &CmpgDims, sem: Var, mask_emb: Var, f_q: Var) -> Result<PromptVars> {
    let dp = d.prompt_dim;
    let ms = g.value(mask_emb).shape().to_vec();
    let fs = g.value(f_q).shape().to_vec();
    if g.value(sem).shape() != [dp] || ms.len() != 3 || ms[0] != dp || fs.len() != 3 || fs[0] != d.feature_dim || fs[1..] != ms[1..] {
        return Err(Error::invalid(format!(
            "prompt alignment inputs sem {:?}, mask {ms:?}, features {fs:?} are inconsistent",
            g.value(sem).shape()
        )));
    }
    let (h, w) = (ms[1], ms[2]);
    let pw = g.param(store, "cmpg.align.proj.w");
    let pb = g.param(store, "cmpg.align.proj.b");
    let proj = g.conv2d(f_q, pw, Some(pb), 1, 0);
    let sem_map = g.broadcast_channels(sem, h, w);
    let x0 = g.add(sem_map, mask_emb);
    let x0 = g.add(x0, proj);
    let mut hcur = x0;
    for i in 1..=2 {
        let cw = g.param(store, &format!("cmpg.align.conv{i}.w"));
        let cb = g.param(store, &format!("cmpg.align.conv{i}.b"));
        let c = g.conv2d(hcur, cw, Some(cb), 1, 1);
        hcur = g.relu(c);
    }
    let dense = g.add(x0, hcur);

    let pooled = g.spatial_mean(dense);
    let pooled_row = g.reshape(pooled, &[1, dp]);
    let mut rows = vec![g.reshape(sem, &[1, dp])];
    for j in 1..d.sparse_tokens {
        let hw = g.param(store, &format!("cmpg.head{j}.w"));
        let hb = g.param(store, &format!("cmpg.head{j}.b"));
        let y = g.matmul(pooled_row, hw);
        let y = g.reshape(y, &[dp]);
        let y = g.add(y, hb);
        rows.push(g.reshape(y, &[1, dp]));
    }
    let sparse = g.concat(&rows);
    Ok(PromptVars { dense, sparse })
}

/// Ablated generator: the mask embedding alone is the dense prompt and the
/// sparse tokens are zero.
pub fn prior_only_prompt(g: &mut Graph, d: &CmpgDims, mask_emb: Var) -> PromptVars {
    let sparse = g.constant(Tensor::zeros(&[d.sparse_tokens, d.prompt_dim]));
    PromptVars { dense: mask_emb, sparse }
}
