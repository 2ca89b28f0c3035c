//! A small reverse-mode autodiff tape over [`Tensor`] values.
//!
//! Every op records its output value, its parents and a closure that maps the
//! upstream gradient to parent gradients. Nodes whose inputs are all constants
//! never store a backward closure.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics;
use crate::params::ParamStore;
use crate::tensor::{self, conv2d_from_cols, conv_geom, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// `(upstream grad, parent values, own value, which parents need grads)`.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    grad_enabled: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new(), grad_enabled: true }
    }

    /// A graph on which parameters are plain constants.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), backward: None, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that participates in differentiation.
    pub fn variable(&mut self, value: Tensor) -> Var {
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node { value, parents: Vec::new(), backward: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Looks up a named parameter, registering it on first use.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let value = store.get(name).unwrap_or_else(|| panic!("unknown parameter `{name}`")).clone();
        let v = self.variable(value);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Parameters touched by this graph.
    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Records a custom op.
    pub fn custom(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = &node.backward else { continue };
            let Some(g) = grads[idx].take() else { continue };
            let parent_vals: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            let pgrads = backward(&g, &parent_vals, &node.value, &needs);
            for ((&p, pg), need) in node.parents.iter().zip(pgrads).zip(needs) {
                if !need {
                    continue;
                }
                if let Some(pg) = pg {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    /// Gradients of every registered parameter, zero-filled where untouched.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()));
                (name.clone(), g)
            })
            .collect()
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.custom(value, &[a, b], Box::new(|g, _, _, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.custom(value, &[a, b], Box::new(|g, _, _, _| vec![Some(g.clone()), Some(g.scale(-1.0))]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.custom(
            value,
            &[a, b],
            Box::new(|g, p, _, need| vec![need[0].then(|| g.zip_map(p[1], |g, y| g * y)), need[1].then(|| g.zip_map(p[0], |g, x| g * x))]),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.custom(value, &[a], Box::new(move |g, _, _, _| vec![Some(g.scale(s))]))
    }

    /// Multiplies `a` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "mul_scalar expects a scalar");
        let sv = self.value(s).item();
        let value = self.value(a).scale(sv);
        self.custom(
            value,
            &[a, s],
            Box::new(|g, p, _, need| {
                vec![need[0].then(|| g.scale(p[1].item())), need[1].then(|| Tensor::new(p[1].shape(), vec![g.dot(p[0])]))]
            }),
        )
    }

    /// Elementwise mean of same-shaped vars.
    pub fn mean(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        if vars.len() == 1 {
            return vars[0];
        }
        let k = vars.len() as f64;
        let mut value = self.value(vars[0]).clone();
        for v in &vars[1..] {
            value.add_assign(self.value(*v));
        }
        let value = value.scale(1.0 / k);
        let n = vars.len();
        self.custom(value, vars, Box::new(move |g, _, _, _| vec![Some(g.scale(1.0 / k)); n]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.custom(value, &[a], Box::new(|g, p, _, _| vec![Some(g.zip_map(p[0], |g, x| if x > 0.0 { g } else { 0.0 }))]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.custom(value, &[a], Box::new(|g, _, out, _| vec![Some(g.zip_map(out, |g, s| g * s * (1.0 - s)))]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.custom(value, &[a], Box::new(|g, p, _, _| vec![Some(Tensor::full(p[0].shape(), g.item()))]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old = self.value(a).shape().to_vec();
        let value = self.value(a).clone().reshaped(shape);
        self.custom(value, &[a], Box::new(move |g, _, _, _| vec![Some(g.clone().reshaped(&old))]))
    }

    // ---- structural --------------------------------------------------------

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let tail = self.value(vars[0]).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(vars.len());
        for v in vars {
            let t = self.value(*v);
            assert_eq!(&t.shape()[1..], &tail[..], "concat trailing dims differ");
            lead += t.dim(0);
            sizes.push(t.len());
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(&shape, data);
        self.custom(
            value,
            vars,
            Box::new(move |g, p, _, need| {
                let mut offset = 0;
                sizes
                    .iter()
                    .zip(p)
                    .zip(need)
                    .map(|((&n, pv), &nd)| {
                        let part = nd.then(|| Tensor::new(pv.shape(), g.data()[offset..offset + n].to_vec()));
                        offset += n;
                        part
                    })
                    .collect()
            }),
        )
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        let row: usize = t.shape()[1..].iter().product();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let value = Tensor::new(&shape, t.data()[start * row..(start + len) * row].to_vec());
        self.custom(
            value,
            &[a],
            Box::new(move |g, p, _, _| {
                let mut full = Tensor::zeros(p[0].shape());
                full.data_mut()[start * row..(start + len) * row].copy_from_slice(g.data());
                vec![Some(full)]
            }),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.custom(value, &[a], Box::new(|g, _, _, _| vec![Some(g.transpose())]))
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = tensor::matmul(self.value(a), self.value(b));
        self.custom(
            value,
            &[a, b],
            Box::new(|g, p, _, need| {
                let (m, k, n) = (p[0].dim(0), p[0].dim(1), p[1].dim(1));
                let ga = need[0].then(|| {
                    let mut out = vec![0.0; m * k];
                    tensor::matmul_nt_acc(g.data(), p[1].data(), &mut out, m, n, k);
                    Tensor::new(&[m, k], out)
                });
                let gb = need[1].then(|| {
                    let mut out = vec![0.0; k * n];
                    tensor::matmul_tn_acc(p[0].data(), g.data(), &mut out, k, m, n);
                    Tensor::new(&[k, n], out)
                });
                vec![ga, gb]
            }),
        )
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.dim(0), t.dim(1));
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let value = Tensor::new(&[r, c], out);
        self.custom(
            value,
            &[a],
            Box::new(move |g, _, s, _| {
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    let sr = &s.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let dot: f64 = sr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        out[i * c + j] = sr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(Tensor::new(&[r, c], out))]
            }),
        )
    }

    // ---- spatial -----------------------------------------------------------

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let geom = conv_geom(self.value(x), self.value(weight), stride, pad);
        let cols = Rc::new(geom.im2col(self.value(x).data()));
        let value = conv2d_from_cols(&geom, &cols, self.value(weight), bias.map(|b| self.value(b)));
        let mut parents = vec![x, weight];
        parents.extend(bias);
        self.custom(
            value,
            &parents,
            Box::new(move |g, p, _, need| {
                let w = p[1];
                let o = w.dim(0);
                let rows = w.len() / o;
                let n = g.len() / o;
                let gx = need[0].then(|| {
                    let mut dcols = vec![0.0; rows * n];
                    tensor::matmul_tn_acc(w.data(), g.data(), &mut dcols, rows, o, n);
                    Tensor::new(p[0].shape(), geom.col2im(&dcols))
                });
                let gw = need[1].then(|| {
                    let mut dw = vec![0.0; o * rows];
                    tensor::matmul_nt_acc(g.data(), &cols, &mut dw, o, n, rows);
                    Tensor::new(w.shape(), dw)
                });
                let mut out = vec![gx, gw];
                if p.len() == 3 {
                    out.push(need[2].then(|| Tensor::new(&[o], g.data().chunks(n).map(|c| c.iter().sum()).collect())));
                }
                out
            }),
        )
    }

    /// `x[c,:,:] + v[c]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let (c, hw) = chw(self.value(x));
        assert_eq!(self.value(v).len(), c, "add_channel length mismatch");
        let mut value = self.value(x).clone();
        for (ch, plane) in value.data_mut().chunks_mut(hw).enumerate() {
            let b = self.value(v).data()[ch];
            plane.iter_mut().for_each(|e| *e += b);
        }
        self.custom(
            value,
            &[x, v],
            Box::new(move |g, p, _, need| {
                vec![Some(g.clone()), need[1].then(|| Tensor::new(p[1].shape(), g.data().chunks(hw).map(|c| c.iter().sum()).collect()))]
            }),
        )
    }

    /// `x[c,:,:] * v[c]`.
    pub fn mul_channel(&mut self, x: Var, v: Var) -> Var {
        let (c, hw) = chw(self.value(x));
        assert_eq!(self.value(v).len(), c, "mul_channel length mismatch");
        let mut value = self.value(x).clone();
        for (ch, plane) in value.data_mut().chunks_mut(hw).enumerate() {
            let s = self.value(v).data()[ch];
            plane.iter_mut().for_each(|e| *e *= s);
        }
        self.custom(
            value,
            &[x, v],
            Box::new(move |g, p, _, need| {
                let gx = need[0].then(|| {
                    let mut out = g.clone();
                    for (ch, plane) in out.data_mut().chunks_mut(hw).enumerate() {
                        let s = p[1].data()[ch];
                        plane.iter_mut().for_each(|e| *e *= s);
                    }
                    out
                });
                let gv = need[1].then(|| {
                    Tensor::new(
                        p[1].shape(),
                        g.data().chunks(hw).zip(p[0].data().chunks(hw)).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum()).collect(),
                    )
                });
                vec![gx, gv]
            }),
        )
    }

    /// Broadcasts a length-`C` vector to `C×h×w`.
    pub fn broadcast_channels(&mut self, v: Var, h: usize, w: usize) -> Var {
        let c = self.value(v).len();
        let hw = h * w;
        let mut data = Vec::with_capacity(c * hw);
        for &x in self.value(v).data() {
            data.extend(std::iter::repeat_n(x, hw));
        }
        let value = Tensor::new(&[c, h, w], data);
        self.custom(
            value,
            &[v],
            Box::new(move |g, p, _, _| vec![Some(Tensor::new(p[0].shape(), g.data().chunks(hw).map(|c| c.iter().sum()).collect()))]),
        )
    }

    /// Global average pool `C×H×W → C`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let (_, hw) = chw(self.value(x));
        let value =
            Tensor::new(&[self.value(x).dim(0)], self.value(x).data().chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect());
        self.custom(
            value,
            &[x],
            Box::new(move |g, p, _, _| {
                let mut out = Vec::with_capacity(p[0].len());
                for &gc in g.data() {
                    out.extend(std::iter::repeat_n(gc / hw as f64, hw));
                }
                vec![Some(Tensor::new(p[0].shape(), out))]
            }),
        )
    }

    /// Weighted spatial average `Σ_l w_l·x[:,l] / Σ_l w_l`; zero vector when the
    /// weights sum to zero.
    pub fn masked_mean(&mut self, x: Var, weights: &[f64]) -> Var {
        let (c, hw) = chw(self.value(x));
        assert_eq!(weights.len(), hw);
        let total: f64 = weights.iter().sum();
        let norm: Vec<f64> = if total > 0.0 { weights.iter().map(|w| w / total).collect() } else { vec![0.0; hw] };
        let value = Tensor::new(&[c], self.value(x).data().chunks(hw).map(|p| p.iter().zip(&norm).map(|(a, b)| a * b).sum()).collect());
        self.custom(
            value,
            &[x],
            Box::new(move |g, p, _, _| {
                let mut out = Vec::with_capacity(p[0].len());
                for &gc in g.data() {
                    out.extend(norm.iter().map(|w| gc * w));
                }
                vec![Some(Tensor::new(p[0].shape(), out))]
            }),
        )
    }

    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let t = self.value(x);
        let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
        let value = Tensor::new(&[c, oh, ow], tensor::resize_bilinear(t.data(), c, h, w, oh, ow));
        self.custom(
            value,
            &[x],
            Box::new(move |g, p, _, _| vec![Some(Tensor::new(p[0].shape(), tensor::resize_bilinear_adjoint(g.data(), c, h, w, oh, ow)))]),
        )
    }

    /// Non-overlapping `k×k` average pooling.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        let t = self.value(x);
        let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
        assert!(h % k == 0 && w % k == 0, "avg_pool needs divisible dims");
        let (oh, ow) = (h / k, w / k);
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[(ch * oh + y / k) * ow + xx / k] += t.data()[(ch * h + y) * w + xx] * inv;
                }
            }
        }
        let value = Tensor::new(&[c, oh, ow], out);
        self.custom(
            value,
            &[x],
            Box::new(move |g, p, _, _| {
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            gx[(ch * h + y) * w + xx] = g.data()[(ch * oh + y / k) * ow + xx / k] * inv;
                        }
                    }
                }
                vec![Some(Tensor::new(p[0].shape(), gx))]
            }),
        )
    }

    /// Per-channel spatial standardization, matching [`numerics::standardize`].
    pub fn standardize(&mut self, x: Var) -> Var {
        let (_, hw) = chw(self.value(x));
        let (out, inv_std) = numerics::standardize_planes(self.value(x).data(), hw);
        let value = Tensor::new(self.value(x).shape(), out);
        self.custom(
            value,
            &[x],
            Box::new(move |g, _, y, _| {
                let mut gx = vec![0.0; g.len()];
                let n = hw as f64;
                for (ch, inv) in inv_std.iter().enumerate() {
                    let gs = &g.data()[ch * hw..(ch + 1) * hw];
                    let ys = &y.data()[ch * hw..(ch + 1) * hw];
                    let mean_g = gs.iter().sum::<f64>() / n;
                    let mean_gy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / n;
                    for i in 0..hw {
                        gx[ch * hw + i] = inv * (gs[i] - mean_g - ys[i] * mean_gy);
                    }
                }
                vec![Some(Tensor::new(g.shape(), gx))]
            }),
        )
    }

    /// `Re(ifft2(amplitude · e^{i·phase}))` with a fixed phase.
    pub fn polar_ifft(&mut self, amplitude: Var, phase: Rc<Vec<f64>>) -> Result<Var> {
        let t = self.value(amplitude);
        let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
        let (real, residue) = numerics::polar_ifft2(t.data(), &phase, c, h, w);
        if residue >= numerics::IFFT_RESIDUE_LIMIT {
            return Err(Error::NumericalConsistency { residue, threshold: numerics::IFFT_RESIDUE_LIMIT });
        }
        let value = Tensor::new(&[c, h, w], real);
        Ok(self.custom(
            value,
            &[amplitude],
            Box::new(move |g, _, _, _| {
                vec![Some(Tensor::new(&[c, h, w], numerics::polar_ifft2_amplitude_adjoint(g.data(), &phase, c, h, w)))]
            }),
        ))
    }
}

fn chw(t: &Tensor) -> (usize, usize) {
    assert_eq!(t.shape().len(), 3, "expected C×H×W, got {:?}", t.shape());
    (t.dim(0), t.dim(1) * t.dim(2))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
