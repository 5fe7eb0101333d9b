//! Reverse-mode differentiation over a linear tape.
//!
//! Every operator evaluates eagerly and appends a node holding its value and
//! the indices of its inputs. `backward` walks the tape in reverse and
//! accumulates gradients for every node that depends on a trainable
//! parameter. Fake quantization nodes use the straight-through estimator for
//! the rounding and the learned-step-size rule for the scale.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Silu(usize),
    Sum(usize),
    Mean(usize),
    SqNorm(usize),
    Cosine(usize, usize),
    Concat(Vec<usize>),
    Clamp(usize, f64, f64),
    RoundSte(usize),
    FakeQuant {
        x: usize,
        scale: usize,
        zero: usize,
        levels: f64,
        axis: Option<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, usize>,
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.grads
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a trainable parameter. Registering the same name twice returns
    /// the first handle.
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        if let Some(&id) = self.params.get(name) {
            return Var(id);
        }
        let v = self.push(value, Op::Leaf, true);
        self.params.insert(name.to_string(), v.0);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let g = self.any_grad(&[a.0, b.0]);
        Ok(self.push(value, Op::MatMul(a.0, b.0), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let g = self.any_grad(&[a.0, b.0]);
        Ok(self.push(value, Op::Add(a.0, b.0), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let g = self.any_grad(&[a.0, b.0]);
        Ok(self.push(value, Op::Sub(a.0, b.0), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let g = self.any_grad(&[a.0, b.0]);
        Ok(self.push(value, Op::Mul(a.0, b.0), g))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        let g = self.any_grad(&[a.0]);
        self.push(value, Op::Scale(a.0, c), g)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).silu();
        let g = self.any_grad(&[a.0]);
        self.push(value, Op::Silu(a.0), g)
    }

    /// `x · w + b` with `w: [in, out]` and `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let g = self.any_grad(&[a.0]);
        self.push(value, Op::Sum(a.0), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        let g = self.any_grad(&[a.0]);
        self.push(value, Op::Mean(a.0), g)
    }

    pub fn sq_norm(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sq_norm());
        let g = self.any_grad(&[a.0]);
        self.push(value, Op::SqNorm(a.0), g)
    }

    /// Squared Frobenius distance `‖a − b‖²`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).check_same(self.value(b))?;
        let d = self.sub(a, b)?;
        Ok(self.sq_norm(d))
    }

    /// Cosine similarity of the two tensors viewed as flat vectors.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).check_same(self.value(b))?;
        let c = tensor::cosine(self.value(a).data(), self.value(b).data());
        let g = self.any_grad(&[a.0, b.0]);
        Ok(self.push(Tensor::scalar(c), Op::Cosine(a.0, b.0), g))
    }

    /// Concatenation along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor> = parts.iter().map(|p| self.value(*p).clone()).collect();
        let value = Tensor::concat(&values)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let g = self.any_grad(&ids);
        Ok(self.push(value, Op::Concat(ids), g))
    }

    /// Clamp with a pass-through gradient inside `[lo, hi]` and zero outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        let g = self.any_grad(&[a.0]);
        self.push(value, Op::Clamp(a.0, lo, hi), g)
    }

    /// Round half to even with a pass-through gradient.
    pub fn round_ste(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::round_ties_even);
        let g = self.any_grad(&[a.0]);
        self.push(value, Op::RoundSte(a.0), g)
    }

    /// Fake quantization `s · (clamp(round(x / s) + z, 0, 2^b − 1) − z)`.
    ///
    /// `scale` and `zero` hold one entry per channel along `axis`, or a single
    /// entry when `axis` is `None`. The zero offset may be non-integral while
    /// it is being optimized.
    pub fn fake_quant(
        &mut self,
        x: Var,
        scale: Var,
        zero: Var,
        bits: u32,
        axis: Option<usize>,
    ) -> Result<Var> {
        let xv = self.value(x);
        let sv = self.value(scale);
        let zv = self.value(zero);
        let layout = ChannelLayout::new(xv.shape(), axis)?;
        if sv.len() != layout.channels || zv.len() != layout.channels {
            return Err(Error::Shape(format!(
                "fake_quant expects {} scale/zero entries, got {}/{}",
                layout.channels,
                sv.len(),
                zv.len()
            )));
        }
        let levels = ((1u64 << bits) - 1) as f64;
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(e, &xe)| {
                let c = layout.channel(e);
                let (s, z) = (sv.data()[c], zv.data()[c]);
                let code = ((xe / s).round_ties_even() + z).clamp(0.0, levels);
                s * (code - z)
            })
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let g = self.any_grad(&[x.0, scale.0, zero.0]);
        Ok(self.push(
            value,
            Op::FakeQuant {
                x: x.0,
                scale: scale.0,
                zero: zero.0,
                levels,
                axis,
            },
            g,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every parameter that
    /// influences it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let contributions = self.local_grads(&node.op, &node.value, &g)?;
            for (target, contrib) in contributions {
                if !self.nodes[target].needs_grad {
                    continue;
                }
                accumulate(&mut grads[target], contrib)?;
            }
            grads[id] = Some(g);
        }

        let mut out = BTreeMap::new();
        for (name, &id) in &self.params {
            if id <= loss.0 {
                if let Some(g) = &grads[id] {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(Gradients { grads: out })
    }

    fn local_grads(&self, op: &Op, out: &Tensor, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let v = |i: usize| &self.nodes[i].value;
        let wants = |i: usize| self.nodes[i].needs_grad;
        Ok(match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let mut r = Vec::with_capacity(2);
                if wants(*a) {
                    r.push((*a, g.matmul_t(v(*b))?));
                }
                if wants(*b) {
                    r.push((*b, v(*a).t_matmul(g)?));
                }
                r
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.reduce_to(v(*b).shape()))],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.reduce_to(v(*b).shape()).scale(-1.0))],
            Op::Mul(a, b) => {
                let mut r = Vec::with_capacity(2);
                if wants(*a) {
                    r.push((*a, g.mul(v(*b))?));
                }
                if wants(*b) {
                    r.push((*b, g.mul(v(*a))?.reduce_to(v(*b).shape())));
                }
                r
            }
            Op::Scale(a, c) => vec![(*a, g.scale(*c))],
            Op::Silu(a) => {
                let x = v(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xi, &gi)| gi * tensor::silu_grad(xi))
                    .collect();
                vec![(*a, Tensor::new(x.shape().to_vec(), data)?)]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(v(*a).shape(), g.item()?))],
            Op::Mean(a) => {
                let n = v(*a).len().max(1) as f64;
                vec![(*a, Tensor::full(v(*a).shape(), g.item()? / n))]
            }
            Op::SqNorm(a) => vec![(*a, v(*a).scale(2.0 * g.item()?))],
            Op::Cosine(a, b) => {
                let (av, bv) = (v(*a), v(*b));
                let gs = g.item()?;
                let c = out.item()?;
                let na = av.sq_norm().sqrt();
                let nb = bv.sq_norm().sqrt();
                if na == 0.0 || nb == 0.0 {
                    vec![]
                } else {
                    let ga: Vec<f64> = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(&x, &y)| gs * (y / (na * nb) - c * x / (na * na)))
                        .collect();
                    let gb: Vec<f64> = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(&x, &y)| gs * (x / (na * nb) - c * y / (nb * nb)))
                        .collect();
                    vec![
                        (*a, Tensor::new(av.shape().to_vec(), ga)?),
                        (*b, Tensor::new(bv.shape().to_vec(), gb)?),
                    ]
                }
            }
            Op::Concat(ids) => {
                let mut r = Vec::with_capacity(ids.len());
                let mut offset = 0;
                for &i in ids {
                    let n = v(i).len();
                    let part = Tensor::new(v(i).shape().to_vec(), g.data()[offset..offset + n].to_vec())?;
                    offset += n;
                    r.push((i, part));
                }
                r
            }
            Op::Clamp(a, lo, hi) => {
                let x = v(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xi, &gi)| if xi >= *lo && xi <= *hi { gi } else { 0.0 })
                    .collect();
                vec![(*a, Tensor::new(x.shape().to_vec(), data)?)]
            }
            Op::RoundSte(a) => vec![(*a, g.clone())],
            Op::FakeQuant {
                x,
                scale,
                zero,
                levels,
                axis,
            } => {
                let (xv, sv, zv) = (v(*x), v(*scale), v(*zero));
                let layout = ChannelLayout::new(xv.shape(), *axis)?;
                let mut gx = vec![0.0; xv.len()];
                let mut gs = vec![0.0; sv.len()];
                let mut gz = vec![0.0; zv.len()];
                for (e, (&xe, &ge)) in xv.data().iter().zip(g.data()).enumerate() {
                    let c = layout.channel(e);
                    let (s, z) = (sv.data()[c], zv.data()[c]);
                    let ratio = xe / s;
                    let rounded = ratio.round_ties_even();
                    let q = rounded + z;
                    if q < 0.0 {
                        gs[c] += ge * (0.0 - z);
                        gz[c] -= ge * s;
                    } else if q > *levels {
                        gs[c] += ge * (*levels - z);
                        gz[c] -= ge * s;
                    } else {
                        gx[e] = ge;
                        gs[c] += ge * (rounded - ratio);
                    }
                }
                vec![
                    (*x, Tensor::new(xv.shape().to_vec(), gx)?),
                    (*scale, Tensor::new(sv.shape().to_vec(), gs)?),
                    (*zero, Tensor::new(zv.shape().to_vec(), gz)?),
                ]
            }
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, contrib: Tensor) -> Result<()> {
    match slot {
        Some(existing) => {
            existing.check_same(&contrib)?;
            for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                *e += c;
            }
        }
        None => *slot = Some(contrib),
    }
    Ok(())
}

/// Maps a flat element index to its channel along an axis.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ChannelLayout {
    pub channels: usize,
    stride: usize,
}

impl ChannelLayout {
    pub fn new(shape: &[usize], axis: Option<usize>) -> Result<Self> {
        match axis {
            None => Ok(Self {
                channels: 1,
                stride: 0,
            }),
            Some(a) if a < shape.len() => Ok(Self {
                channels: shape[a],
                stride: shape[a + 1..].iter().product(),
            }),
            Some(a) => Err(Error::Shape(format!(
                "channel axis {a} out of range for shape {shape:?}"
            ))),
        }
    }

    #[inline]
    pub fn channel(&self, flat: usize) -> usize {
        if self.stride == 0 {
            0
        } else {
            (flat / self.stride) % self.channels
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_sum_gradient_is_input() {
        let mut tape = Tape::new();
        let w = tape.param("w", t(&[3], &[0.5, -1.0, 2.0]));
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let p = tape.mul(w, x).unwrap();
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("w").unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn squared_norm_gradient_is_twice_weight() {
        let mut tape = Tape::new();
        let w = tape.param("w", t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]));
        let loss = tape.sq_norm(w);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("w").unwrap().data(), &[2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.param("w", t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn unknown_parameter_is_reported() {
        let mut tape = Tape::new();
        let w = tape.param("w", t(&[1], &[1.0]));
        let loss = tape.sum(w);
        let g = tape.backward(loss).unwrap();
        assert!(matches!(g.get("nope"), Err(Error::MissingParameter(n)) if n == "nope"));
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut tape = Tape::new();
        let w = tape.param("w", t(&[1], &[3.0]));
        let again = tape.param("w", t(&[1], &[99.0]));
        assert_eq!(w, again);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        assert_eq!(tape.backward(loss).unwrap().get("w").unwrap().data(), &[6.0]);
    }

    #[test]
    fn broadcast_bias_gradient_sums_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 2]));
        let b = tape.param("b", t(&[2], &[0.0, 0.0]));
        let y = tape.add(x, b).unwrap();
        let loss = tape.sum(y);
        assert_eq!(tape.backward(loss).unwrap().get("b").unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn fake_quant_ste_and_lsq_rules() {
        let mut tape = Tape::new();
        // codes: 0.26/0.5 -> 1 (inside), 10 -> clamp high, -3 -> clamp low
        let x = tape.param("x", t(&[3], &[0.26, 10.0, -3.0]));
        let s = tape.param("s", t(&[1], &[0.5]));
        let z = tape.param("z", t(&[1], &[1.0]));
        let q = tape.fake_quant(x, s, z, 2, None).unwrap();
        assert_eq!(tape.value(q).data(), &[0.5, 1.0, -0.5]);
        let loss = tape.sum(q);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("x").unwrap().data(), &[1.0, 0.0, 0.0]);
        let expect_s = (1.0 - 0.52) + (3.0 - 1.0) + (0.0 - 1.0);
        assert!((g.get("s").unwrap().data()[0] - expect_s).abs() < 1e-12);
        assert!((g.get("z").unwrap().data()[0] - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn round_ste_passes_gradient() {
        let mut tape = Tape::new();
        let x = tape.param("x", t(&[3], &[0.5, 1.5, -0.7]));
        let r = tape.round_ste(x);
        assert_eq!(tape.value(r).data(), &[0.0, 2.0, -1.0]);
        let loss = tape.sum(r);
        assert_eq!(tape.backward(loss).unwrap().get("x").unwrap().data(), &[1.0; 3]);
    }
}
