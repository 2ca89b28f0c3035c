//! Frequency-aware interaction.
//!
//! Cross-domain alignment retrieves source-domain amplitude statistics from a
//! memory bank through thresholded cosine similarity and refreshes the bank by
//! EMA. Support/query enhancement then mixes the two amplitude spectra with
//! per-channel affine maps. Phases are never edited.
//!
//! The free functions here are the reference (pure) forms; [`fai_graph`]
//! records the same computation on a [`Graph`] so `γ` and the mixing
//! parameters can be trained.

use std::rc::Rc;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::numerics::{self, cosine_unchecked, ComplexSpectrum, FeatureMap};
use crate::params::{named_rng, round_f32, Init, ParamStore};
use crate::tensor::Tensor;

pub const BANK_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BankInit {
    /// Fill slots with spatially averaged amplitude columns seen during training.
    Warmup,
    /// Non-negative random unit vectors.
    Random,
}

impl std::str::FromStr for BankInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warmup" => Ok(Self::Warmup),
            "random" => Ok(Self::Random),
            other => Err(Error::config("fai.bank_init", format!("expected warmup|random, got `{other}`"))),
        }
    }
}

/// Normalization applied to the amplitude being modulated in the enhancement step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SqfeNorm {
    Standardize,
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaiConfig {
    pub slots: usize,
    pub tau: f64,
    pub alpha: f64,
    pub gamma_init: f64,
    pub freeze_bank: bool,
    pub bank_init: BankInit,
    pub norm: SqfeNorm,
}

impl Default for FaiConfig {
    fn default() -> Self {
        Self {
            slots: 64,
            tau: 0.5,
            alpha: 0.99,
            gamma_init: 0.1,
            freeze_bank: false,
            bank_init: BankInit::Warmup,
            norm: SqfeNorm::Standardize,
        }
    }
}

/// Which halves of the module run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FaiSwitches {
    pub cdfa: bool,
    pub sqfe: bool,
}

impl Default for FaiSwitches {
    fn default() -> Self {
        Self { cdfa: true, sqfe: true }
    }
}

/// `T×C` source-domain amplitude statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    slots: Vec<f64>,
    t: usize,
    c: usize,
    pub alpha: f64,
    pub tau: f64,
    pub eps: f64,
    pub frozen: bool,
    filled: usize,
}

impl MemoryBank {
    pub fn new(t: usize, c: usize, alpha: f64, tau: f64) -> Result<Self> {
        if t == 0 || c == 0 {
            return Err(Error::config("fai.T", "memory bank needs at least one slot and channel"));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::config("fai.alpha", "momentum must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::config("fai.tau", "threshold must lie in [0, 1]"));
        }
        Ok(Self { slots: vec![0.0; t * c], t, c, alpha, tau, eps: BANK_EPS, frozen: false, filled: 0 })
    }

    /// A bank with explicit slot contents, marked fully filled.
    pub fn from_slots(t: usize, c: usize, slots: Vec<f64>, alpha: f64, tau: f64) -> Result<Self> {
        let mut bank = Self::new(t, c, alpha, tau)?;
        if slots.len() != t * c || slots.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("memory slots must be T×C finite values"));
        }
        bank.slots = slots.into_iter().map(round_f32).collect();
        bank.filled = t;
        Ok(bank)
    }

    pub fn from_config(cfg: &FaiConfig, channels: usize, seed: u64) -> Result<Self> {
        let mut bank = Self::new(cfg.slots, channels, cfg.alpha, cfg.tau)?;
        if cfg.bank_init == BankInit::Random {
            let mut rng = named_rng(seed, "fai.memory");
            let n = Normal::new(0.0, 1.0).expect("std");
            for row in bank.slots.chunks_mut(channels) {
                row.iter_mut().for_each(|v| *v = f64::abs(n.sample(&mut rng)));
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                row.iter_mut().for_each(|v| *v = round_f32(*v / norm));
            }
            bank.filled = bank.t;
        }
        Ok(bank)
    }

    pub fn num_slots(&self) -> usize {
        self.t
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn slots(&self) -> &[f64] {
        &self.slots
    }

    pub fn slot(&self, t: usize) -> &[f64] {
        &self.slots[t * self.c..(t + 1) * self.c]
    }

    /// Number of slots populated so far; EMA updates start once all are filled.
    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn restore(&mut self, slots: Vec<f64>, filled: usize) -> Result<()> {
        if slots.len() != self.slots.len() || filled > self.t {
            return Err(Error::Checkpoint("memory bank shape mismatch".into()));
        }
        self.slots = slots;
        self.filled = filled;
        Ok(())
    }

    /// Writes spatially averaged amplitude columns into empty slots.
    fn warm_fill(&mut self, amplitudes: &[&FeatureMap]) {
        for a in amplitudes {
            if self.filled == self.t {
                break;
            }
            let (c, h, w) = a.shape();
            let hw = (h * w) as f64;
            let row = &mut self.slots[self.filled * c..(self.filled + 1) * c];
            for (ch, r) in row.iter_mut().enumerate() {
                *r = round_f32(a.channel(ch).iter().sum::<f64>() / hw);
            }
            self.filled += 1;
        }
    }
}

/// Gated similarities `S[h,w,t]`, stored location-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityField {
    pub height: usize,
    pub width: usize,
    pub slots: usize,
    pub values: Vec<f64>,
}

impl SimilarityField {
    pub fn at(&self, y: usize, x: usize, t: usize) -> f64 {
        self.values[(y * self.width + x) * self.slots + t]
    }
}

pub fn memory_similarity(a: &FeatureMap, bank: &MemoryBank) -> Result<SimilarityField> {
    let (c, h, w) = a.shape();
    if c != bank.c {
        return Err(Error::invalid(format!("amplitude has {c} channels, bank has {}", bank.c)));
    }
    let mut values = Vec::with_capacity(h * w * bank.t);
    let mut column = vec![0.0; c];
    for l in 0..h * w {
        for (ch, v) in column.iter_mut().enumerate() {
            *v = a.values()[ch * h * w + l];
        }
        for t in 0..bank.t {
            let s = cosine_unchecked(&column, bank.slot(t));
            values.push(if s > bank.tau { s } else { 0.0 });
        }
    }
    Ok(SimilarityField { height: h, width: w, slots: bank.t, values })
}

/// EMA refresh from one or more `(S, A)` pairs aggregated jointly.
pub fn update_memory(bank: &MemoryBank, pairs: &[(&SimilarityField, &FeatureMap)]) -> Result<MemoryBank> {
    if bank.frozen {
        return Err(Error::State("memory bank is frozen".into()));
    }
    let c = bank.c;
    let mut out = bank.clone();
    for t in 0..bank.t {
        let mut weighted = vec![0.0; c];
        let mut total = 0.0;
        for (s, a) in pairs {
            let (ac, h, w) = a.shape();
            if ac != c || s.height != h || s.width != w || s.slots != bank.t {
                return Err(Error::invalid("similarity field and amplitude do not match the bank"));
            }
            for l in 0..h * w {
                let st = s.values[l * bank.t + t];
                if st == 0.0 {
                    continue;
                }
                total += st;
                for (ch, acc) in weighted.iter_mut().enumerate() {
                    *acc += st * a.values()[ch * h * w + l];
                }
            }
        }
        let denom = total + bank.eps;
        for (ch, acc) in weighted.iter().enumerate() {
            let i = t * c + ch;
            out.slots[i] = round_f32(bank.alpha * bank.slots[i] + (1.0 - bank.alpha) * acc / denom);
        }
    }
    Ok(out)
}

/// Per-location slot retrieval `Σ_t S·M[t] / (Σ_t S + ε)`, shaped `C×H×W`.
pub fn retrieve(s: &SimilarityField, bank: &MemoryBank) -> FeatureMap {
    let (h, w, c) = (s.height, s.width, bank.c);
    let mut out = vec![0.0; c * h * w];
    for l in 0..h * w {
        let row = &s.values[l * s.slots..(l + 1) * s.slots];
        let total: f64 = row.iter().sum();
        if total == 0.0 {
            continue;
        }
        let denom = total + bank.eps;
        for (t, &st) in row.iter().enumerate() {
            if st == 0.0 {
                continue;
            }
            for ch in 0..c {
                out[ch * h * w + l] += st * bank.slots[t * c + ch] / denom;
            }
        }
    }
    FeatureMap::new(c, h, w, out).expect("finite retrieval")
}

pub fn enhance_amplitude(a: &FeatureMap, s: &SimilarityField, bank: &MemoryBank, gamma: f64) -> FeatureMap {
    let r = retrieve(s, bank);
    let (c, h, w) = a.shape();
    let values = a.values().iter().zip(r.values()).map(|(x, y)| x + gamma * y).collect();
    FeatureMap::new(c, h, w, values).expect("finite amplitude")
}

/// Per-channel mixing parameters for both directions.
#[derive(Clone, Debug, PartialEq)]
pub struct SqfeParams {
    pub w_s1: Vec<f64>,
    pub w_s2: Vec<f64>,
    pub b_s1: Vec<f64>,
    pub b_s2: Vec<f64>,
    pub w_q1: Vec<f64>,
    pub w_q2: Vec<f64>,
    pub b_q1: Vec<f64>,
    pub b_q2: Vec<f64>,
}

pub const SQFE_NAMES: [&str; 8] = ["w_s1", "w_s2", "b_s1", "b_s2", "w_q1", "w_q2", "b_q1", "b_q2"];

impl SqfeParams {
    /// Multiplicative path passes the normalized amplitude through, additive
    /// path carries the other branch's amplitude.
    pub fn initial(c: usize) -> Self {
        Self::uniform(c, 0.0, 1.0, 1.0, 0.0)
    }

    pub fn uniform(c: usize, w1: f64, b1: f64, w2: f64, b2: f64) -> Self {
        Self {
            w_s1: vec![w1; c],
            w_s2: vec![w2; c],
            b_s1: vec![b1; c],
            b_s2: vec![b2; c],
            w_q1: vec![w1; c],
            w_q2: vec![w2; c],
            b_q1: vec![b1; c],
            b_q2: vec![b2; c],
        }
    }

    fn fields(&self) -> [&Vec<f64>; 8] {
        [&self.w_s1, &self.w_s2, &self.b_s1, &self.b_s2, &self.w_q1, &self.w_q2, &self.b_q1, &self.b_q2]
    }

    pub fn from_store(store: &ParamStore) -> Self {
        let get = |n: &str| store.get(&format!("fai.sqfe.{n}")).expect("sqfe parameter").data().to_vec();
        Self {
            w_s1: get("w_s1"),
            w_s2: get("w_s2"),
            b_s1: get("b_s1"),
            b_s2: get("b_s2"),
            w_q1: get("w_q1"),
            w_q2: get("w_q2"),
            b_q1: get("b_q1"),
            b_q2: get("b_q2"),
        }
    }

    pub fn write_to(&self, store: &mut ParamStore) {
        for (name, v) in SQFE_NAMES.iter().zip(self.fields()) {
            store.insert(&format!("fai.sqfe.{name}"), Tensor::new(&[v.len()], v.clone()));
        }
    }
}

fn apply_norm(a: &FeatureMap, norm: SqfeNorm) -> FeatureMap {
    match norm {
        SqfeNorm::Standardize => numerics::standardize(a),
        SqfeNorm::Identity => a.clone(),
    }
}

/// `norm(target)·(w1⊙source + b1) + (w2⊙source + b2)`, clamped at zero.
fn mix(target: &FeatureMap, source: &FeatureMap, w1: &[f64], b1: &[f64], w2: &[f64], b2: &[f64], norm: SqfeNorm) -> FeatureMap {
    let (c, h, w) = target.shape();
    let hw = h * w;
    let z = apply_norm(target, norm);
    let mut out = vec![0.0; c * hw];
    for ch in 0..c {
        for l in 0..hw {
            let i = ch * hw + l;
            let s = source.values()[i];
            out[i] = (z.values()[i] * (w1[ch] * s + b1[ch]) + (w2[ch] * s + b2[ch])).max(0.0);
        }
    }
    FeatureMap::new(c, h, w, out).expect("finite amplitude")
}

/// Bidirectional amplitude enhancement; returns `(Ã_s, Ã_q)`.
pub fn sqfe(a_s: &FeatureMap, a_q: &FeatureMap, p: &SqfeParams, norm: SqfeNorm) -> Result<(FeatureMap, FeatureMap)> {
    if a_s.shape() != a_q.shape() {
        return Err(Error::invalid("support and query amplitudes differ in shape"));
    }
    let c = a_s.channels();
    if p.fields().iter().any(|v| v.len() != c) {
        return Err(Error::invalid(format!("mixing parameters must have {c} entries")));
    }
    let q = mix(a_q, a_s, &p.w_s1, &p.b_s1, &p.w_s2, &p.b_s2, norm);
    let s = mix(a_s, a_q, &p.w_q1, &p.b_q1, &p.w_q2, &p.b_q2, norm);
    Ok((s, q))
}

fn amplitude_map(s: &ComplexSpectrum) -> FeatureMap {
    let (c, h, w) = s.shape();
    FeatureMap::new(c, h, w, s.amplitude().to_vec()).expect("finite amplitude")
}

/// Pure single-pair forward: returns `(f̃_s, f̃_q, bank')`.
#[allow(clippy::too_many_arguments)]
pub fn fai_forward(
    f_s: &FeatureMap,
    f_q: &FeatureMap,
    bank: &MemoryBank,
    params: &SqfeParams,
    gamma: f64,
    norm: SqfeNorm,
    training: bool,
) -> Result<(FeatureMap, FeatureMap, MemoryBank)> {
    if f_s.shape() != f_q.shape() {
        return Err(Error::invalid("support and query features differ in shape"));
    }
    let (spec_s, spec_q) = (numerics::fft2(f_s)?, numerics::fft2(f_q)?);
    let (a_s, a_q) = (amplitude_map(&spec_s), amplitude_map(&spec_q));
    let (s_s, s_q) = (memory_similarity(&a_s, bank)?, memory_similarity(&a_q, bank)?);
    let bank = refresh_bank(bank, &[(&s_s, &a_s), (&s_q, &a_q)], training)?;
    let hat_s = enhance_amplitude(&a_s, &s_s, &bank, gamma);
    let hat_q = enhance_amplitude(&a_q, &s_q, &bank, gamma);
    let (tilde_s, tilde_q) = sqfe(&hat_s, &hat_q, params, norm)?;
    let out_s = numerics::ifft2(&spec_s.with_amplitude(tilde_s.values().to_vec())?)?;
    let out_q = numerics::ifft2(&spec_q.with_amplitude(tilde_q.values().to_vec())?)?;
    Ok((out_s, out_q, bank))
}

/// Warm-up fill or EMA update during training; a no-op otherwise.
fn refresh_bank(bank: &MemoryBank, pairs: &[(&SimilarityField, &FeatureMap)], training: bool) -> Result<MemoryBank> {
    if !training || bank.frozen {
        return Ok(bank.clone());
    }
    if bank.filled < bank.t {
        let mut b = bank.clone();
        let amps: Vec<&FeatureMap> = pairs.iter().map(|(_, a)| *a).collect();
        b.warm_fill(&amps);
        return Ok(b);
    }
    update_memory(bank, pairs)
}

/// Registers `fai.gamma` and the eight `fai.sqfe.*` vectors.
pub fn init_params(store: &mut ParamStore, channels: usize, cfg: &FaiConfig) {
    store.init(0, "fai.gamma", &[1], Init::Constant(cfg.gamma_init));
    SqfeParams::initial(channels).write_to(store);
}

/// Cached spectrum of one encoder output.
#[derive(Clone, Debug)]
pub struct SpectrumCache {
    pub amplitude: FeatureMap,
    pub phase: Vec<f64>,
}

impl SpectrumCache {
    pub fn new(f: &FeatureMap) -> Result<Self> {
        let spec = numerics::fft2(f)?;
        Ok(Self { amplitude: amplitude_map(&spec), phase: spec.phase().to_vec() })
    }
}

/// Graph form over one query and `K` supports. Returns `(f̃_s per shot, f̃_q)`,
/// where the query output is averaged over the shot pairings. `bank` is
/// refreshed in place when `training`.
#[allow(clippy::too_many_arguments)]
pub fn fai_graph(
    g: &mut Graph,
    store: &ParamStore,
    supports: &[SpectrumCache],
    query: &SpectrumCache,
    bank: &mut MemoryBank,
    norm: SqfeNorm,
    switches: FaiSwitches,
    training: bool,
) -> Result<(Vec<Var>, Var)> {
    assert!(!supports.is_empty());
    let amp = |g: &mut Graph, a: &FeatureMap| g.constant(a.to_tensor());
    let (hat_s, hat_q): (Vec<Var>, Var) = if switches.cdfa {
        let sims_s = supports.iter().map(|s| memory_similarity(&s.amplitude, bank)).collect::<Result<Vec<_>>>()?;
        let sim_q = memory_similarity(&query.amplitude, bank)?;
        let mut pairs: Vec<(&SimilarityField, &FeatureMap)> = sims_s.iter().zip(supports).map(|(s, sp)| (s, &sp.amplitude)).collect();
        pairs.push((&sim_q, &query.amplitude));
        *bank = refresh_bank(bank, &pairs, training)?;
        let gamma = g.param(store, "fai.gamma");
        let enhance = |g: &mut Graph, a: &FeatureMap, s: &SimilarityField| {
            let base = amp(g, a);
            let r = g.constant(retrieve(s, bank).to_tensor());
            let scaled = g.mul_scalar(r, gamma);
            g.add(base, scaled)
        };
        let hs = supports.iter().zip(&sims_s).map(|(sp, s)| enhance(g, &sp.amplitude, s)).collect();
        let hq = enhance(g, &query.amplitude, &sim_q);
        (hs, hq)
    } else {
        (supports.iter().map(|s| amp(g, &s.amplitude)).collect(), amp(g, &query.amplitude))
    };

    let mut out_s = Vec::with_capacity(supports.len());
    let mut out_q = Vec::with_capacity(supports.len());
    for (sp, &hs) in supports.iter().zip(&hat_s) {
        let (ts, tq) = if switches.sqfe { sqfe_graph(g, store, hs, hat_q, norm) } else { (hs, hat_q) };
        out_s.push(g.polar_ifft(ts, Rc::new(sp.phase.clone()))?);
        out_q.push(g.polar_ifft(tq, Rc::new(query.phase.clone()))?);
    }
    let fq = g.mean(&out_q);
    Ok((out_s, fq))
}

fn sqfe_graph(g: &mut Graph, store: &ParamStore, hat_s: Var, hat_q: Var, norm: SqfeNorm) -> (Var, Var) {
    let p = |n: &str| g.param(store, &format!("fai.sqfe.{n}"));
    let names = SQFE_NAMES.map(p);
    let [w_s1, w_s2, b_s1, b_s2, w_q1, w_q2, b_q1, b_q2] = names;
    let q = mix_graph(g, hat_q, hat_s, [w_s1, b_s1, w_s2, b_s2], norm);
    let s = mix_graph(g, hat_s, hat_q, [w_q1, b_q1, w_q2, b_q2], norm);
    (s, q)
}

fn mix_graph(g: &mut Graph, target: Var, source: Var, [w1, b1, w2, b2]: [Var; 4], norm: SqfeNorm) -> Var {
    let z = match norm {
        SqfeNorm::Standardize => g.standardize(target),
        SqfeNorm::Identity => target,
    };
    let m1 = g.mul_channel(source, w1);
    let m1 = g.add_channel(m1, b1);
    let gated = g.mul(z, m1);
    let m2 = g.mul_channel(source, w2);
    let m2 = g.add_channel(m2, b2);
    let sum = g.add(gated, m2);
    g.relu(sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_map(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng, lo: f64) -> FeatureMap {
        FeatureMap::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(lo..1.0)).collect()).unwrap()
    }

    fn rand_bank(t: usize, c: usize, rng: &mut ChaCha8Rng, alpha: f64, tau: f64) -> MemoryBank {
        MemoryBank::from_slots(t, c, (0..t * c).map(|_| rng.random_range(-1.0..1.0)).collect(), alpha, tau).unwrap()
    }

    fn cos(u: &[f64], v: &[f64]) -> f64 {
        let d: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
        let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if nu == 0.0 || nv == 0.0 {
            0.0
        } else {
            d / (nu * nv + 1e-8)
        }
    }

    #[test]
    fn similarity_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_map(4, 2, 2, &mut rng, -1.0);
        let bank = rand_bank(3, 4, &mut rng, 0.9, 0.1);
        let s = memory_similarity(&a, &bank).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                for t in 0..3 {
                    let c = cos(&a.column(y, x), bank.slot(t));
                    let e = if c > 0.1 { c } else { 0.0 };
                    assert!((s.at(y, x, t) - e).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn similarity_self_and_gate() {
        let a = FeatureMap::new(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let bank = MemoryBank::from_slots(1, 2, vec![1.0, 0.0], 0.9, 0.5).unwrap();
        let s = memory_similarity(&a, &bank).unwrap();
        assert!((s.at(0, 0, 0) - 1.0).abs() < 1e-7);
        assert_eq!(s.at(0, 1, 0), 0.0);
    }

    #[test]
    fn update_fixed_point_and_decay() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_map(3, 2, 2, &mut rng, 0.0);
        let bank = rand_bank(2, 3, &mut rng, 1.0, 0.0);
        let s = memory_similarity(&a, &bank).unwrap();
        assert_eq!(update_memory(&bank, &[(&s, &a)]).unwrap().slots(), bank.slots());

        let mut decay = bank.clone();
        decay.alpha = 0.9;
        let zero = SimilarityField { height: 2, width: 2, slots: 2, values: vec![0.0; 8] };
        let next = update_memory(&decay, &[(&zero, &a)]).unwrap();
        for (n, o) in next.slots().iter().zip(bank.slots()) {
            assert!((n - 0.9 * o).abs() < 1e-6);
        }
    }

    #[test]
    fn update_single_location() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_map(3, 2, 2, &mut rng, 0.0);
        let mut bank = rand_bank(2, 3, &mut rng, 0.0, 0.0);
        bank.alpha = 0.0;
        let mut s = SimilarityField { height: 2, width: 2, slots: 2, values: vec![0.0; 8] };
        s.values[3 * 2 + 1] = 1.0; // location (1,1), slot 1
        let next = update_memory(&bank, &[(&s, &a)]).unwrap();
        for ch in 0..3 {
            assert!((next.slot(1)[ch] - a.at(ch, 1, 1)).abs() < 1e-6);
        }
        // slot 0 received nothing and alpha = 0
        assert!(next.slot(0).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn frozen_bank_rejects_update() {
        let mut bank = MemoryBank::new(2, 2, 0.9, 0.5).unwrap();
        bank.frozen = true;
        let a = FeatureMap::zeros(2, 1, 1);
        let s = SimilarityField { height: 1, width: 1, slots: 2, values: vec![0.0; 2] };
        assert!(matches!(update_memory(&bank, &[(&s, &a)]), Err(Error::State(_))));
    }

    #[test]
    fn enhance_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_map(3, 2, 2, &mut rng, 0.0);
        let bank = rand_bank(2, 3, &mut rng, 0.9, 0.0);
        let s = memory_similarity(&a, &bank).unwrap();
        assert_eq!(enhance_amplitude(&a, &s, &bank, 0.0), a);
        let zero = SimilarityField { height: 2, width: 2, slots: 2, values: vec![0.0; 8] };
        assert!(enhance_amplitude(&a, &zero, &bank, 5.0).max_abs_diff(&a) <= 1e-6);

        let mut one_hot = zero.clone();
        one_hot.values[2 * 2] = 1.0; // location (1,0), slot 0
        let e = enhance_amplitude(&a, &one_hot, &bank, 1.0);
        for ch in 0..3 {
            let expected = a.at(ch, 1, 0) + bank.slot(0)[ch] / (1.0 + BANK_EPS);
            assert!((e.at(ch, 1, 0) - expected).abs() <= 1e-6);
            assert!((e.at(ch, 1, 0) - (a.at(ch, 1, 0) + bank.slot(0)[ch])).abs() <= 1e-5);
        }
    }

    #[test]
    fn sqfe_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a_s, a_q) = (rand_map(2, 2, 2, &mut rng, 0.0), rand_map(2, 2, 2, &mut rng, 0.0));
        let p = SqfeParams::uniform(2, 0.0, 1.0, 0.0, 0.0);
        let (_, q) = sqfe(&a_s, &a_q, &p, SqfeNorm::Standardize).unwrap();
        let z = numerics::standardize(&a_q);
        for (v, e) in q.values().iter().zip(z.values()) {
            assert_eq!(*v, e.max(0.0));
        }
        let p = SqfeParams::uniform(2, 0.0, 0.0, 0.0, 0.7);
        let (s, q) = sqfe(&a_s, &a_q, &p, SqfeNorm::Standardize).unwrap();
        assert!(q.values().iter().chain(s.values()).all(|v| *v == 0.7));
        assert!(sqfe(&a_s, &FeatureMap::zeros(2, 1, 4), &p, SqfeNorm::Standardize).is_err());
    }

    #[test]
    fn sqfe_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (a_s, a_q) = (rand_map(2, 2, 2, &mut rng, 0.0), rand_map(2, 2, 2, &mut rng, 0.0));
        let mut v = || (0..2).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>();
        let p = SqfeParams { w_s1: v(), w_s2: v(), b_s1: v(), b_s2: v(), w_q1: v(), w_q2: v(), b_q1: v(), b_q2: v() };
        let (s, q) = sqfe(&a_s, &a_q, &p, SqfeNorm::Standardize).unwrap();
        let std = |m: &FeatureMap, ch: usize| {
            let xs = m.channel(ch);
            let mean = xs.iter().sum::<f64>() / 4.0;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
            xs.iter().map(|x| (x - mean) / (var + 1e-5).sqrt()).collect::<Vec<_>>()
        };
        for ch in 0..2 {
            let (zq, zs) = (std(&a_q, ch), std(&a_s, ch));
            for l in 0..4 {
                let (xs, xq) = (a_s.channel(ch)[l], a_q.channel(ch)[l]);
                let eq = (zq[l] * (p.w_s1[ch] * xs + p.b_s1[ch]) + p.w_s2[ch] * xs + p.b_s2[ch]).max(0.0);
                let es = (zs[l] * (p.w_q1[ch] * xq + p.b_q1[ch]) + p.w_q2[ch] * xq + p.b_q2[ch]).max(0.0);
                assert!((q.channel(ch)[l] - eq).abs() <= 1e-6);
                assert!((s.channel(ch)[l] - es).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn identity_path_recovers_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f_s = rand_map(3, 4, 4, &mut rng, -1.0);
        let f_q = rand_map(3, 4, 4, &mut rng, -1.0);
        let bank = rand_bank(4, 3, &mut rng, 0.9, 0.5);
        let p = SqfeParams::uniform(3, 0.0, 1.0, 0.0, 0.0);
        let (s, q, b) = fai_forward(&f_s, &f_q, &bank, &p, 0.0, SqfeNorm::Identity, false).unwrap();
        assert!(s.max_abs_diff(&f_s) <= 1e-5);
        assert!(q.max_abs_diff(&f_q) <= 1e-5);
        assert_eq!(b, bank);
    }

    #[test]
    fn eval_mode_keeps_bank() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f_s = rand_map(2, 2, 2, &mut rng, -1.0);
        let f_q = rand_map(2, 2, 2, &mut rng, -1.0);
        let bank = rand_bank(2, 2, &mut rng, 0.5, 0.0);
        let (_, _, b) = fai_forward(&f_s, &f_q, &bank, &SqfeParams::initial(2), 0.3, SqfeNorm::Standardize, false).unwrap();
        assert_eq!(b.slots(), bank.slots());
        let (_, _, trained) = fai_forward(&f_s, &f_q, &bank, &SqfeParams::initial(2), 0.3, SqfeNorm::Standardize, true).unwrap();
        assert_ne!(trained.slots(), bank.slots());
    }

    #[test]
    fn warmup_fills_before_ema() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bank = MemoryBank::new(3, 2, 0.9, 0.5).unwrap();
        let f_s = rand_map(2, 2, 2, &mut rng, -1.0);
        let f_q = rand_map(2, 2, 2, &mut rng, -1.0);
        let p = SqfeParams::initial(2);
        let (_, _, b1) = fai_forward(&f_s, &f_q, &bank, &p, 0.1, SqfeNorm::Standardize, true).unwrap();
        assert_eq!(b1.filled(), 2);
        let amp = amplitude_map(&numerics::fft2(&f_s).unwrap());
        for ch in 0..2 {
            let mean = amp.channel(ch).iter().sum::<f64>() / 4.0;
            assert_eq!(b1.slot(0)[ch], round_f32(mean));
        }
        let (_, _, b2) = fai_forward(&f_s, &f_q, &b1, &p, 0.1, SqfeNorm::Standardize, true).unwrap();
        assert_eq!(b2.filled(), 3);
        let (_, _, b3) = fai_forward(&f_s, &f_q, &b2, &p, 0.1, SqfeNorm::Standardize, true).unwrap();
        assert_eq!(b3.filled(), 3);
        assert_ne!(b3.slots(), b2.slots());
    }

    #[test]
    fn graph_matches_pure_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f_s = rand_map(3, 4, 4, &mut rng, -1.0);
        let f_q = rand_map(3, 4, 4, &mut rng, -1.0);
        let bank = MemoryBank::from_slots(4, 3, (0..12).map(|_| rng.random_range(0.0..1.0)).collect(), 0.8, 0.5).unwrap();
        let mut store = ParamStore::new();
        init_params(&mut store, 3, &FaiConfig::default());
        let params = SqfeParams::from_store(&store);
        let gamma = store.get("fai.gamma").unwrap().item();
        for training in [false, true] {
            let (ps, pq, pb) = fai_forward(&f_s, &f_q, &bank, &params, gamma, SqfeNorm::Standardize, training).unwrap();
            let mut g = Graph::new();
            let mut gb = bank.clone();
            let (gs, gq) = fai_graph(
                &mut g,
                &store,
                &[SpectrumCache::new(&f_s).unwrap()],
                &SpectrumCache::new(&f_q).unwrap(),
                &mut gb,
                SqfeNorm::Standardize,
                FaiSwitches::default(),
                training,
            )
            .unwrap();
            assert_eq!(gb, pb);
            assert!(FeatureMap::from_tensor(g.value(gs[0])).unwrap().max_abs_diff(&ps) < 1e-12);
            assert!(FeatureMap::from_tensor(g.value(gq)).unwrap().max_abs_diff(&pq) < 1e-12);
        }
    }
}
