//! Reverse-mode gradients over exactly the operation set the pipeline uses.
//!
//! A [`Tape`] records forward operations as they run; [`Tape::backward`] walks
//! the record once and returns gradients for the trainable leaves only. Frozen
//! weights enter as plain leaves: gradients still flow *through* them to reach
//! trainable parameters upstream, but no gradient is ever reported for them.
//! Subgraphs that cannot reach a trainable leaf (the face reference streams
//! during fused training, for instance) are skipped entirely.

use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use crate::tensor::{Result, Tensor, TensorError};

/// Opaque identifier of a trainable parameter.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub String);

impl ParamId {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Gradient of one trainable parameter; shape always matches the parameter.
pub type GradMap = BTreeMap<ParamId, Tensor>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Element index map for gather-style data movement (im2col, upsampling,
/// broadcasts, reshapes). `idx[i]` is the flat source index feeding output
/// element `i`, or `NONE` for a zero fill. The backward pass is the
/// corresponding scatter-add.
#[derive(Debug)]
pub struct GatherMap {
    pub out_rows: usize,
    pub out_cols: usize,
    pub src_len: usize,
    pub idx: Vec<i64>,
}

impl GatherMap {
    pub const NONE: i64 = -1;

    pub fn new(out_rows: usize, out_cols: usize, src_len: usize, idx: Vec<i64>) -> Self {
        assert_eq!(idx.len(), out_rows * out_cols);
        debug_assert!(idx.iter().all(|&i| i == Self::NONE || (i as usize) < src_len));
        Self {
            out_rows,
            out_cols,
            src_len,
            idx,
        }
    }
}

enum Op {
    Leaf { param: Option<ParamId> },
    Matmul(Var, Var),
    MatmulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Ln(Var),
    MaskedSoftmaxRows { x: Var },
    ConcatRows(Vec<Var>),
    Gather { src: Var, map: Rc<GatherMap> },
    Mean(Var),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Forward recording plus one-shot reverse pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Constant input; gradients flow through it but are never reported.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf { param: None }, value, false)
    }

    /// Trainable input; [`Tape::backward`] reports its gradient under `id`.
    pub fn trainable(&mut self, value: Tensor, id: ParamId) -> Var {
        self.push(Op::Leaf { param: Some(id) }, value, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul(a, b), value, ng))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatmulNt(a, b), value, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), value, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), value, ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let ng = self.needs(a);
        self.push(Op::Scale(a, s), value, ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.needs(a);
        self.push(Op::Silu(a), value, ng)
    }

    /// Natural log, elementwise. Inputs must be strictly positive.
    pub fn ln(&mut self, a: Var) -> Var {
        debug_assert!(self.value(a).data().iter().all(|&v| v > 0.0));
        let value = self.value(a).map(f64::ln);
        let ng = self.needs(a);
        self.push(Op::Ln(a), value, ng)
    }

    /// Softmax over rows of `x + mask`; mask entries are 0 or the sentinel
    /// [`crate::tensor::MASK_NEG_INF`], so masked positions get exactly zero
    /// mass and zero gradient.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: Option<Rc<Tensor>>) -> Result<Var> {
        let scores = match &mask {
            Some(m) => self.value(x).add(m)?,
            None => self.value(x).clone(),
        };
        let value = scores.softmax_rows()?;
        let ng = self.needs(x);
        Ok(self.push(Op::MaskedSoftmaxRows { x }, value, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat_rows(&tensors)?;
        let ng = parts.iter().any(|&v| self.needs(v));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value, ng))
    }

    pub fn gather(&mut self, src: Var, map: Rc<GatherMap>) -> Var {
        let s = self.value(src);
        assert_eq!(s.len(), map.src_len, "gather map built for a different source size");
        let data: Vec<f64> = map
            .idx
            .iter()
            .map(|&i| if i == GatherMap::NONE { 0.0 } else { s.data()[i as usize] })
            .collect();
        let value = Tensor::new(map.out_rows, map.out_cols, data).expect("sized by map");
        let ng = self.needs(src);
        self.push(Op::Gather { src, map }, value, ng)
    }

    /// Mean over all elements, as a 1x1 tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::new(1, 1, vec![t.sum() / t.len() as f64]).unwrap();
        let ng = self.needs(a);
        self.push(Op::Mean(a), value, ng)
    }

    /// Gradients of the scalar at `root` for every trainable leaf that
    /// reaches it. Trainable leaves not on the path are absent from the map.
    pub fn backward(&self, root: Var) -> Result<GradMap> {
        let root_t = self.value(root);
        if root_t.shape() != (1, 1) {
            return Err(TensorError::ShapeMismatch {
                left_rows: root_t.rows(),
                left_cols: root_t.cols(),
                right_rows: 1,
                right_cols: 1,
                context: "backward root must be scalar",
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::new(1, 1, vec![1.0]).unwrap());

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf { .. } => {
                    grads[i] = Some(g);
                }
                Op::Matmul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.matmul_nt(self.value(*b))?;
                        accumulate(&mut grads[a.0], ga)?;
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).matmul_tn(&g)?;
                        accumulate(&mut grads[b.0], gb)?;
                    }
                }
                Op::MatmulNt(a, b) => {
                    if self.needs(*a) {
                        let ga = g.matmul(self.value(*b))?;
                        accumulate(&mut grads[a.0], ga)?;
                    }
                    if self.needs(*b) {
                        let gb = g.matmul_tn(self.value(*a))?;
                        accumulate(&mut grads[b.0], gb)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g.clone())?;
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], g)?;
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g.clone())?;
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], g.scale(-1.0))?;
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g.hadamard(self.value(*b))?)?;
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], g.hadamard(self.value(*a))?)?;
                    }
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads[a.0], g.scale(*s))?;
                }
                Op::Silu(a) => {
                    let x = self.value(*a);
                    let dx = x.map(|v| {
                        let s = sigmoid(v);
                        s * (1.0 + v * (1.0 - s))
                    });
                    accumulate(&mut grads[a.0], g.hadamard(&dx)?)?;
                }
                Op::Ln(a) => {
                    let dx = self.value(*a).map(|v| 1.0 / v);
                    accumulate(&mut grads[a.0], g.hadamard(&dx)?)?;
                }
                Op::MaskedSoftmaxRows { x, .. } => {
                    // dL/dz = s . (g - rowsum(g . s)); masked columns have
                    // s == 0 and therefore zero gradient.
                    let s = &self.nodes[i].value;
                    let gs = g.hadamard(s)?;
                    let mut gx = Tensor::zeros(s.rows(), s.cols());
                    for r in 0..s.rows() {
                        let dot: f64 = gs.row(r).iter().sum();
                        for c in 0..s.cols() {
                            gx.set(r, c, s.at(r, c) * (g.at(r, c) - dot));
                        }
                    }
                    accumulate(&mut grads[x.0], gx)?;
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        if self.needs(p) {
                            accumulate(&mut grads[p.0], g.slice_rows(start, rows))?;
                        }
                        start += rows;
                    }
                }
                Op::Gather { src, map } => {
                    let s = self.value(*src);
                    let mut gsrc = vec![0.0; map.src_len];
                    for (out_i, &src_i) in map.idx.iter().enumerate() {
                        if src_i != GatherMap::NONE {
                            gsrc[src_i as usize] += g.data()[out_i];
                        }
                    }
                    let gsrc = Tensor::new(s.rows(), s.cols(), gsrc).expect("sized by map");
                    accumulate(&mut grads[src.0], gsrc)?;
                }
                Op::Mean(a) => {
                    let t = self.value(*a);
                    let scale = g.at(0, 0) / t.len() as f64;
                    accumulate(&mut grads[a.0], Tensor::filled(t.rows(), t.cols(), scale))?;
                }
            }
        }

        let mut out = GradMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = &node.op {
                if let Some(g) = grads[i].take() {
                    out.insert(id.clone(), g);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(existing) => {
            *existing = existing.add(&g)?;
        }
        None => *slot = Some(g),
    }
    Ok(())
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{randn, MASK_NEG_INF};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn linear_loss_gradient_is_columnwise_input_sums() {
        // loss = sum(x * w) => dL/dw[p][q] = sum_i x[i][p]
        let mut tape = Tape::new();
        let x = Tensor::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = Tensor::zeros(2, 2);
        let xv = tape.leaf(x.clone());
        let wv = tape.trainable(w, ParamId::new("w"));
        let y = tape.matmul(xv, wv).unwrap();
        let n = tape.value(y).len() as f64;
        let loss = tape.mean(y);
        let loss = tape.scale(loss, n); // sum = mean * count
        let grads = tape.backward(loss).unwrap();
        let gw = &grads[&ParamId::new("w")];
        // column sums of x are (9, 12), replicated across w's output columns
        assert_eq!(gw.shape(), (2, 2));
        assert!((gw.at(0, 0) - 9.0).abs() < 1e-12);
        assert!((gw.at(0, 1) - 9.0).abs() < 1e-12);
        assert!((gw.at(1, 0) - 12.0).abs() < 1e-12);
        assert!((gw.at(1, 1) - 12.0).abs() < 1e-12);
    }

    #[test]
    fn frozen_leaves_never_appear_in_grad_map() {
        let mut tape = Tape::new();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let x = tape.leaf(randn(2, 3, 1.0, &mut rng));
        let frozen = tape.leaf(randn(3, 3, 1.0, &mut rng));
        let w = tape.trainable(randn(3, 2, 1.0, &mut rng), ParamId::new("w"));
        let h = tape.matmul(x, frozen).unwrap();
        let y = tape.matmul(h, w).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.mean(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.len(), 1);
        assert!(grads.contains_key(&ParamId::new("w")));
    }

    #[test]
    fn unreachable_trainable_leaf_absent_from_map() {
        let mut tape = Tape::new();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let x = tape.leaf(randn(2, 2, 1.0, &mut rng));
        let w = tape.trainable(randn(2, 2, 1.0, &mut rng), ParamId::new("w"));
        let _unused = tape.trainable(randn(2, 2, 1.0, &mut rng), ParamId::new("unused"));
        let y = tape.matmul(x, w).unwrap();
        let loss = tape.mean(y);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.contains_key(&ParamId::new("w")));
        assert!(!grads.contains_key(&ParamId::new("unused")));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..8 {
            finite_difference_case(seed);
        }
    }

    /// One graph through every op class; analytic vs central differences.
    fn finite_difference_case(seed: u64) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let x0 = randn(3, 4, 1.0, &mut rng);
        let w0_init = randn(4, 4, 0.7, &mut rng);
        let w1_init = randn(4, 3, 0.7, &mut rng);
        let keys = randn(6, 3, 0.8, &mut rng);
        let target = randn(6, 3, 1.0, &mut rng);
        let mask = {
            let mut m = Tensor::zeros(3, 6);
            m.set(0, 4, MASK_NEG_INF);
            m.set(2, 5, MASK_NEG_INF);
            Rc::new(m)
        };
        // nearest-neighbor 2x row upsample of a 3x3 block
        let upmap = Rc::new(GatherMap::new(
            6,
            3,
            9,
            (0..18).map(|i| (((i / 3) / 2) * 3 + i % 3) as i64).collect(),
        ));

        let run = |w0t: &Tensor, w1t: &Tensor, want_grads: bool| -> (f64, GradMap) {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone());
            let w0v = tape.trainable(w0t.clone(), ParamId::new("w0"));
            let w1v = tape.trainable(w1t.clone(), ParamId::new("w1"));
            let h = tape.matmul(x, w0v).unwrap();
            let h = tape.silu(h);
            let y = tape.matmul(h, w1v).unwrap();
            let kv = tape.leaf(keys.clone());
            let scores = tape.matmul_nt(y, kv).unwrap();
            let scores = tape.scale(scores, 0.5);
            let soft = tape.masked_softmax_rows(scores, Some(mask.clone())).unwrap();
            let mixed = tape.matmul(soft, kv).unwrap();
            let summed = tape.add(mixed, y).unwrap();
            let up = tape.gather(summed, upmap.clone());
            let tgt = tape.leaf(target.clone());
            let d = tape.sub(up, tgt).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let loss = tape.mean(sq);
            let loss_val = tape.value(loss).at(0, 0);
            let grads = if want_grads {
                tape.backward(loss).unwrap()
            } else {
                GradMap::new()
            };
            (loss_val, grads)
        };

        let (_, grads) = run(&w0_init, &w1_init, true);
        let step = 1e-5;
        for (name, init) in [("w0", &w0_init), ("w1", &w1_init)] {
            let analytic = &grads[&ParamId::new(name)];
            for e in 0..init.len() {
                let mut plus = init.clone();
                plus.data_mut()[e] += step;
                let mut minus = init.clone();
                minus.data_mut()[e] -= step;
                let (lp, _) = if name == "w0" {
                    run(&plus, &w1_init, false)
                } else {
                    run(&w0_init, &plus, false)
                };
                let (lm, _) = if name == "w0" {
                    run(&minus, &w1_init, false)
                } else {
                    run(&w0_init, &minus, false)
                };
                let fd = (lp - lm) / (2.0 * step);
                let a = analytic.data()[e];
                let denom = a.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((a - fd) / denom).abs() < 1e-5,
                    "seed {seed} {name}[{e}]: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let v = tape.trainable(Tensor::zeros(2, 2), ParamId::new("w"));
        assert!(tape.backward(v).is_err());
    }
}
