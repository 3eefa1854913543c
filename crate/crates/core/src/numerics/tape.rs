//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied to its variables in order.
//! [`Tape::backward`] replays the record once, last operation first,
//! accumulating adjoints into each input. Only nodes that (transitively)
//! depend on a trainable leaf receive gradients.
//!
//! The tape also folds every non-differentiable branch decision (ReLU sign
//! pattern, pooling argmax) into a signature so that the finite-difference
//! checker can tell when a perturbation crossed a kink.

use std::sync::Arc;

use super::conv::{check_kernel, convolve_backward, convolve_unchecked};
use super::tensor::{matmul_into, softmax_in_place, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    /// Time filter of an SVDF layer over zero-initialized history.
    SvdfTime {
        input: Var,
        weights: Var,
        rank: usize,
    },
    Column(Var, usize),
    Convolve(Var, Arc<[f64]>),
    Gather(Var, Vec<usize>),
    Log(Var),
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Single-writer; build one per utterance.
pub struct Tape {
    nodes: Vec<Node>,
    signature: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the output
    /// through any trainable path.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

const FNV_PRIME: u64 = 0x100_0000_01b3;

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            signature: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Hash of every branch decision recorded so far.
    pub fn branch_signature(&self) -> u64 {
        self.signature
    }

    /// Folds an externally made branch choice (e.g. an argmax) into the
    /// signature.
    pub fn note_branch(&mut self, choice: u64) {
        self.signature = (self.signature ^ choice).wrapping_mul(FNV_PRIME);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims {k} and {k2} differ"
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Adds a bias vector to every row of a matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        let b = self.value(bias);
        if b.len() != cols {
            return Err(Error::shape(format!(
                "bias of length {} for {cols} columns",
                b.len()
            )));
        }
        let mut out = self.value(x).data().to_vec();
        for r in 0..rows {
            for (o, bv) in out[r * cols..(r + 1) * cols].iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.needs(&[x, bias]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias(x, bias), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "add of {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|v| v.max(0.0)).collect();
        let mut sig = self.signature;
        for v in t.data() {
            sig = (sig ^ u64::from(*v > 0.0)).wrapping_mul(FNV_PRIME);
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.signature = sig;
        let rg = self.needs(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    /// Row-wise softmax of a matrix (or of a single vector).
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if !t.all_finite() {
            return Err(Error::numeric("softmax input is not finite"));
        }
        let (rows, cols) = t.dims2()?;
        let mut out = t.data().to_vec();
        for r in 0..rows {
            softmax_in_place(&mut out[r * cols..(r + 1) * cols]);
        }
        let shape = t.shape().to_vec();
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::SoftmaxRows(x), rg))
    }

    /// SVDF time filter.
    ///
    /// `input` is `frames × (nodes·rank)` feature-filter activations,
    /// `weights` is `(nodes·rank) × memory`. Output row `t`, node `n` is
    /// `Σ_r Σ_k w[n·R+r, k] · input[t − (memory − 1) + k, n·R+r]`, with rows
    /// before the first frame read as zero (an empty history buffer).
    pub fn svdf_time(&mut self, input: Var, weights: Var, rank: usize) -> Result<Var> {
        let (frames, width) = self.value(input).dims2()?;
        let (wrows, memory) = self.value(weights).dims2()?;
        if rank == 0 || width % rank != 0 || wrows != width || memory == 0 {
            return Err(Error::shape(format!(
                "svdf time filter: input width {width}, weights {wrows}x{memory}, rank {rank}"
            )));
        }
        let nodes = width / rank;
        let a = self.value(input).data();
        let w = self.value(weights).data();
        let mut out = vec![0.0; frames * nodes];
        for t in 0..frames {
            for k in 0..memory {
                let Some(src) = (t + k + 1).checked_sub(memory) else {
                    continue;
                };
                let arow = &a[src * width..(src + 1) * width];
                for n in 0..nodes {
                    let mut acc = 0.0;
                    for r in 0..rank {
                        let j = n * rank + r;
                        acc += w[j * memory + k] * arow[j];
                    }
                    out[t * nodes + n] += acc;
                }
            }
        }
        let rg = self.needs(&[input, weights]);
        Ok(self.push(
            Tensor::new(vec![frames, nodes], out)?,
            Op::SvdfTime {
                input,
                weights,
                rank,
            },
            rg,
        ))
    }

    /// Column `col` of a matrix as a vector.
    pub fn column(&mut self, x: Var, col: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = t.dims2()?;
        if col >= cols {
            return Err(Error::shape(format!("column {col} of {cols}")));
        }
        let out = (0..rows).map(|r| t.data()[r * cols + col]).collect();
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::vector(out), Op::Column(x, col), rg))
    }

    /// Same-length time convolution of a vector, zero-extended at the edges.
    pub fn convolve(&mut self, x: Var, kernel: Arc<[f64]>) -> Result<Var> {
        check_kernel(&kernel)?;
        let t = self.value(x);
        if t.shape().len() != 1 {
            return Err(Error::shape("convolve expects a vector"));
        }
        let out = convolve_unchecked(t.data(), &kernel);
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::vector(out), Op::Convolve(x, kernel), rg))
    }

    /// Picks flat indices out of any tensor into a vector.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        if let Some(bad) = indices.iter().find(|&&i| i >= t.len()) {
            return Err(Error::shape(format!("gather index {bad} of {}", t.len())));
        }
        let out = indices.iter().map(|&i| t.data()[i]).collect();
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::vector(out), Op::Gather(x, indices), rg))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v.ln()).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(value, Op::Log(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `−Σ log x[indices]`, the shared shape of every loss term here.
    pub fn neg_log_sum(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let picked = self.gather(x, indices)?;
        let logs = self.log(picked);
        let total = self.sum(logs);
        Ok(self.scale(total, -1.0))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::shape("backward needs a scalar output"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let (m, k) = ta.dims2().expect("recorded");
                let n = tb.cols();
                // dA = G · Bᵀ
                self.accumulate(grads, *a, |ga| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &tb.data()[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // dB = Aᵀ · G
                self.accumulate(grads, *b, |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                });
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, |gx| add_into(gx, g));
                let cols = self.value(*bias).len();
                self.accumulate(grads, *bias, |gb| {
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, |gx| {
                    for (o, v) in gx.iter_mut().zip(g) {
                        *o += c * v;
                    }
                });
            }
            Op::Relu(x) => {
                let input = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, v), xin) in gx.iter_mut().zip(g).zip(input) {
                        if *xin > 0.0 {
                            *o += v;
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let (rows, cols) = out.dims2().expect("recorded");
                let y = out.data();
                self.accumulate(grads, *x, |gx| {
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, yv), gv) in gx[span].iter_mut().zip(yr).zip(gr) {
                            *o += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::SvdfTime {
                input,
                weights,
                rank,
            } => {
                let a = self.value(*input);
                let w = self.value(*weights);
                let (frames, width) = a.dims2().expect("recorded");
                let memory = w.cols();
                let nodes = width / rank;
                self.accumulate(grads, *input, |ga| {
                    for t in 0..frames {
                        for k in 0..memory {
                            let Some(src) = (t + k + 1).checked_sub(memory) else {
                                continue;
                            };
                            for n in 0..nodes {
                                let gv = g[t * nodes + n];
                                for r in 0..*rank {
                                    let j = n * rank + r;
                                    ga[src * width + j] += gv * w.data()[j * memory + k];
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, *weights, |gw| {
                    for t in 0..frames {
                        for k in 0..memory {
                            let Some(src) = (t + k + 1).checked_sub(memory) else {
                                continue;
                            };
                            for n in 0..nodes {
                                let gv = g[t * nodes + n];
                                for r in 0..*rank {
                                    let j = n * rank + r;
                                    gw[j * memory + k] += gv * a.data()[src * width + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::Column(x, col) => {
                let cols = self.value(*x).cols();
                self.accumulate(grads, *x, |gx| {
                    for (r, gv) in g.iter().enumerate() {
                        gx[r * cols + col] += gv;
                    }
                });
            }
            Op::Convolve(x, kernel) => {
                let back = convolve_backward(g, kernel);
                self.accumulate(grads, *x, |gx| add_into(gx, &back));
            }
            Op::Gather(x, indices) => {
                self.accumulate(grads, *x, |gx| {
                    for (&i, gv) in indices.iter().zip(g) {
                        gx[i] += gv;
                    }
                });
            }
            Op::Log(x) => {
                let input = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, gv), v) in gx.iter_mut().zip(g).zip(input) {
                        *o += gv / v;
                    }
                });
            }
            Op::Sum(x) => {
                let s = g[0];
                self.accumulate(grads, *x, |gx| {
                    for o in gx.iter_mut() {
                        *o += s;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{grad_check, GradCheckConfig, Probe};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Checks `Σ wᵢ·f(x)ᵢ` for a random weighting, through the tape.
    fn check_primitive(
        shapes: &[Vec<usize>],
        seed: u64,
        build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    ) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes: Vec<usize> = shapes.iter().map(|s| s.iter().product()).collect();
        let x0 = random(&mut rng, sizes.iter().sum());
        let probe_seed = rng.random::<u64>();
        let f = |x: &[f64]| -> Result<Probe> {
            let mut tape = Tape::new();
            let mut off = 0;
            let mut vars = Vec::new();
            for (shape, n) in shapes.iter().zip(&sizes) {
                let t = Tensor::new(shape.clone(), x[off..off + n].to_vec())?;
                vars.push(tape.param(t));
                off += n;
            }
            let y = build(&mut tape, &vars)?;
            let n = tape.value(y).len();
            let mut r = ChaCha8Rng::seed_from_u64(probe_seed);
            let w = tape.constant(Tensor::new(vec![n, 1], random(&mut r, n))?);
            // a flat vector acts as a 1×n row in matmul
            let flat = tape.gather(y, (0..n).collect())?;
            let dot = tape.matmul(flat, w)?;
            let s = tape.sum(dot);
            let grads = tape.backward(s)?;
            let mut g = Vec::new();
            for v in &vars {
                match grads.get(*v) {
                    Some(gv) => g.extend_from_slice(gv),
                    None => g.extend(std::iter::repeat_n(0.0, tape.value(*v).len())),
                }
            }
            Ok(Probe {
                value: tape.value(s).data()[0],
                grad: g,
                signature: tape.branch_signature(),
            })
        };
        let report = grad_check(f, &x0, &GradCheckConfig::default()).unwrap();
        report.max_rel_error
    }

    #[test]
    fn primitives_pass_grad_check() {
        for seed in 0..5 {
            let e = check_primitive(&[vec![3, 4], vec![4, 2]], seed, |t, v| t.matmul(v[0], v[1]));
            assert!(e < 1e-6, "matmul {e}");
            let e = check_primitive(&[vec![3, 4], vec![4]], seed, |t, v| t.add_bias(v[0], v[1]));
            assert!(e < 1e-6, "add_bias {e}");
            let e = check_primitive(&[vec![5], vec![5]], seed, |t, v| t.add(v[0], v[1]));
            assert!(e < 1e-6, "add {e}");
            let e = check_primitive(&[vec![6]], seed, |t, v| Ok(t.scale(v[0], -2.5)));
            assert!(e < 1e-6, "scale {e}");
            let e = check_primitive(&[vec![3, 5]], seed, |t, v| Ok(t.relu(v[0])));
            assert!(e < 1e-6, "relu {e}");
            let e = check_primitive(&[vec![3, 5]], seed, |t, v| t.softmax_rows(v[0]));
            assert!(e < 1e-6, "softmax {e}");
            let e = check_primitive(&[vec![7, 6], vec![6, 4]], seed, |t, v| {
                t.svdf_time(v[0], v[1], 2)
            });
            assert!(e < 1e-6, "svdf_time {e}");
            let e = check_primitive(&[vec![4, 3]], seed, |t, v| t.column(v[0], 1));
            assert!(e < 1e-6, "column {e}");
            let e = check_primitive(&[vec![9]], seed, |t, v| {
                t.convolve(v[0], Arc::from(vec![0.2, 0.5, 0.3]))
            });
            assert!(e < 1e-6, "convolve {e}");
            let e = check_primitive(&[vec![6]], seed, |t, v| {
                let s = t.softmax_rows(v[0])?;
                Ok(t.log(s))
            });
            assert!(e < 1e-6, "log {e}");
            let e = check_primitive(&[vec![2, 3]], seed, |t, v| {
                let s = t.softmax_rows(v[0])?;
                t.neg_log_sum(s, vec![0, 4, 4])
            });
            assert!(e < 1e-6, "neg_log_sum {e}");
        }
    }

    #[test]
    fn backward_visits_in_reverse_and_skips_constants() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![2.0, 3.0]));
        let c = tape.constant(Tensor::vector(vec![5.0, 7.0]));
        let y = tape.add(x, c).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0]);
        assert!(g.get(c).is_none());
        assert_eq!(tape.len(), 4);
    }

    #[test]
    fn reused_variable_accumulates() {
        // f = Σ (x + x) → df/dx = 2
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, -4.0, 0.5]));
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn svdf_time_reads_zero_history() {
        // memory 3, one node, rank 1, weights [1, 10, 100]
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 10.0, 100.0]).unwrap());
        let y = tape.svdf_time(a, w, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[100.0, 210.0, 321.0, 432.0]);
    }

    #[test]
    fn relu_signature_tracks_sign_pattern() {
        let sig = |v: Vec<f64>| {
            let mut t = Tape::new();
            let x = t.constant(Tensor::vector(v));
            t.relu(x);
            t.branch_signature()
        };
        assert_eq!(sig(vec![1.0, -1.0]), sig(vec![2.0, -3.0]));
        assert_ne!(sig(vec![1.0, -1.0]), sig(vec![-1.0, 1.0]));
    }
}
