//! Reverse-mode autodiff over a flat operation tape.
//!
//! A [`Tape`] is an append-only arena of nodes; each node stores its operation,
//! its eagerly computed value, and whether gradients flow through it. Node ids
//! are indices, so parents always precede children and one reverse sweep over
//! the arena is a full backward pass.
//!
//! Tape math follows IEEE-754 semantics end to end: `ln(0) = -inf`,
//! `x/0 = inf`, and NaNs propagate. Divergence detection is the training
//! loop's job (it checks the loss and parameters for finiteness each step);
//! the tape never masks or repairs non-finite values. Shape mismatches at
//! graph construction are programming errors and panic immediately.
//!
//! Compute primitives: `matmul`, the elementwise suite (`add`, `sub`, `mul`,
//! `div`, `neg`, `exp`, `ln`, `sqrt`, `relu`) with trailing broadcasting,
//! reductions (`sum`, `mean`), and `softmax_cross_entropy`. Data movement:
//! `transpose`, `reshape`, `gather` (static index table with scatter-add
//! adjoint; im2col and layout permutes are gathers), and `max_pool2` (a
//! gather whose index table is the argmax of each 2x2 cell). Gaussian
//! log-density is composed from these primitives by [`gaussian_nll_graph`].

use crate::error::Error;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Relu(NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SoftmaxXent {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor,
    },
    /// out[i] = in[index[i]], with `usize::MAX` reading as 0.0 (padding).
    Gather {
        input: NodeId,
        index: Vec<usize>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    swept: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        assert!(
            !self.swept,
            "tape already swept by backward(); build a fresh tape before reusing"
        );
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b)).expect("add shapes");
        self.push(Op::Add(a, b), v, self.rg(a) || self.rg(b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b)).expect("sub shapes");
        self.push(Op::Sub(a, b), v, self.rg(a) || self.rg(b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).mul(self.value(b)).expect("mul shapes");
        self.push(Op::Mul(a, b), v, self.rg(a) || self.rg(b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip_unchecked(self.value(a), self.value(b), |x, y| x / y);
        self.push(Op::Div(a, b), v, self.rg(a) || self.rg(b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).neg();
        self.push(Op::Neg(a), v, self.rg(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).exp();
        self.push(Op::Exp(a), v, self.rg(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Ln(a), v, self.rg(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a), v, self.rg(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).relu();
        self.push(Op::Relu(a), v, self.rg(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b)).expect("matmul shapes");
        self.push(Op::Matmul(a, b), v, self.rg(a) || self.rg(b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v, self.rg(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self.value(a).reshape(shape).expect("reshape count");
        self.push(Op::Reshape(a), v, self.rg(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v, self.rg(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(Op::Mean(a), v, self.rg(a))
    }

    /// `c * x` with a scalar constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let s = self.scalar(c);
        self.mul(a, s)
    }

    /// `x + c` with a scalar constant.
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let s = self.scalar(c);
        self.add(a, s)
    }

    /// Sum of per-row cross-entropy between `softmax(logits)` and integer labels.
    /// Row losses use the log-sum-exp trick; the cached softmax feeds backward.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.shape().len(), 2, "logits must be [n, classes]");
        let (n, c) = (lv.shape()[0], lv.shape()[1]);
        assert_eq!(labels.len(), n, "one label per row");
        let mut probs = Tensor::zeros(&[n, c]);
        let mut loss = 0.0;
        for r in 0..n {
            assert!(labels[r] < c, "label {} out of range {}", labels[r], c);
            let row = &lv.data()[r * c..(r + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &x in row {
                z += (x - mx).exp();
            }
            let lse = mx + z.ln();
            loss += lse - row[labels[r]];
            for j in 0..c {
                probs.data_mut()[r * c + j] = (row[j] - mx).exp() / z;
            }
        }
        let rg = self.rg(logits);
        self.push(
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            rg,
        )
    }

    /// `out[i] = in[index[i]]`; `usize::MAX` entries read 0.0. The adjoint is
    /// scatter-add over the same table, so duplicated indices accumulate.
    pub fn gather(&mut self, input: NodeId, index: Vec<usize>, out_shape: &[usize]) -> NodeId {
        let iv = self.value(input);
        let numel: usize = out_shape.iter().product();
        assert_eq!(index.len(), numel, "index table must fill the output");
        let mut data = Vec::with_capacity(numel);
        for &src in &index {
            if src == usize::MAX {
                data.push(0.0);
            } else {
                data.push(iv.data()[src]);
            }
        }
        let value = Tensor::from_vec(out_shape.to_vec(), data).expect("gather shape");
        let rg = self.rg(input);
        self.push(Op::Gather { input, index }, value, rg)
    }

    /// 2x2 max pooling with stride 2 over `[n, c, h, w]` (h, w even).
    pub fn max_pool2(&mut self, input: NodeId) -> NodeId {
        let iv = self.value(input);
        let sh = iv.shape();
        assert_eq!(sh.len(), 4, "max_pool2 wants [n,c,h,w]");
        let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 wants even h, w");
        let (oh, ow) = (h / 2, w / 2);
        let mut index = Vec::with_capacity(n * c * oh * ow);
        for img in 0..n * c {
            let base = img * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + (2 * oy) * w + 2 * ox;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let cand = base + (2 * oy + dy) * w + (2 * ox + dx);
                            if iv.data()[cand] > iv.data()[best] {
                                best = cand;
                            }
                        }
                    }
                    index.push(best);
                }
            }
        }
        self.gather(input, index, &[n, c, oh, ow])
    }

    /// 2x2 average pooling with stride 2 over `[n, c, h, w]` (h, w even).
    /// Built from gather + matmul, so no dedicated op is needed.
    pub fn avg_pool2(&mut self, input: NodeId) -> NodeId {
        let sh = self.value(input).shape().to_vec();
        assert_eq!(sh.len(), 4, "avg_pool2 wants [n,c,h,w]");
        let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 wants even h, w");
        let (oh, ow) = (h / 2, w / 2);
        let mut index = Vec::with_capacity(n * c * oh * ow * 4);
        for img in 0..n * c {
            let base = img * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            index.push(base + (2 * oy + dy) * w + (2 * ox + dx));
                        }
                    }
                }
            }
        }
        let cells = self.gather(input, index, &[n * c * oh * ow, 4]);
        let quarter = self.constant(Tensor::full(&[4, 1], 0.25));
        let avg = self.matmul(cells, quarter);
        self.reshape(avg, &[n, c, oh, ow])
    }

    /// Reverse sweep from a scalar loss. Fills adjoints for every node that
    /// requires grad; errors on a non-scalar loss or a second sweep.
    pub fn backward(&mut self, loss: NodeId) -> Result<Adjoints, Error> {
        if self.swept {
            return Err(Error::Config(
                "tape already swept by backward(); rebuild the graph before differentiating again"
                    .into(),
            ));
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Config(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        self.swept = true;
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match adj[i].clone() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.acc(&mut adj, a, g.sum_to_shape(self.shape_of(a)));
                    self.acc(&mut adj, b, g.sum_to_shape(self.shape_of(b)));
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    self.acc(&mut adj, a, g.sum_to_shape(self.shape_of(a)));
                    self.acc(&mut adj, b, g.neg().sum_to_shape(self.shape_of(b)));
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = zip_unchecked(&g, self.value(b), |x, y| x * y);
                    let gb = zip_unchecked(&g, self.value(a), |x, y| x * y);
                    self.acc(&mut adj, a, ga.sum_to_shape(self.shape_of(a)));
                    self.acc(&mut adj, b, gb.sum_to_shape(self.shape_of(b)));
                }
                Op::Div(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = zip_unchecked(&g, self.value(b), |x, y| x / y);
                    let out = self.nodes[i].value.clone(); // a / b, cached
                    let gb0 = zip_unchecked(&g, &out, |x, o| x * o);
                    let gb = zip_unchecked(&gb0, self.value(b), |x, y| -x / y);
                    self.acc(&mut adj, a, ga.sum_to_shape(self.shape_of(a)));
                    self.acc(&mut adj, b, gb.sum_to_shape(self.shape_of(b)));
                }
                Op::Neg(a) => {
                    let a = *a;
                    self.acc(&mut adj, a, g.neg());
                }
                Op::Exp(a) => {
                    let a = *a;
                    let ga = zip_unchecked(&g, &self.nodes[i].value, |x, y| x * y);
                    self.acc(&mut adj, a, ga);
                }
                Op::Ln(a) => {
                    let a = *a;
                    let ga = zip_unchecked(&g, self.value(a), |x, y| x / y);
                    self.acc(&mut adj, a, ga);
                }
                Op::Sqrt(a) => {
                    let a = *a;
                    let ga = zip_unchecked(&g, &self.nodes[i].value, |x, y| 0.5 * x / y);
                    self.acc(&mut adj, a, ga);
                }
                Op::Relu(a) => {
                    let a = *a;
                    let ga = zip_unchecked(&g, self.value(a), |x, y| if y > 0.0 { x } else { 0.0 });
                    self.acc(&mut adj, a, ga);
                }
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = g.matmul(&self.value(b).transpose()).expect("dA");
                    let gb = self.value(a).transpose().matmul(&g).expect("dB");
                    self.acc(&mut adj, a, ga);
                    self.acc(&mut adj, b, gb);
                }
                Op::Transpose(a) => {
                    let a = *a;
                    self.acc(&mut adj, a, g.transpose());
                }
                Op::Reshape(a) => {
                    let a = *a;
                    let back = g.reshape(self.shape_of(a)).expect("reshape back");
                    self.acc(&mut adj, a, back);
                }
                Op::Sum(a) => {
                    let a = *a;
                    self.acc(&mut adj, a, Tensor::full(self.shape_of(a), g.item()));
                }
                Op::Mean(a) => {
                    let a = *a;
                    let n = self.value(a).numel() as f64;
                    self.acc(&mut adj, a, Tensor::full(self.shape_of(a), g.item() / n));
                }
                Op::SoftmaxXent {
                    logits,
                    labels,
                    probs,
                } => {
                    let logits = *logits;
                    let c = probs.shape()[1];
                    let mut ga = probs.clone();
                    for (r, &lbl) in labels.iter().enumerate() {
                        ga.data_mut()[r * c + lbl] -= 1.0;
                    }
                    let ga = ga.scale(g.item());
                    self.acc(&mut adj, logits, ga);
                }
                Op::Gather { input, index } => {
                    let input = *input;
                    let mut ga = Tensor::zeros(self.shape_of(input));
                    for (o, &src) in index.iter().enumerate() {
                        if src != usize::MAX {
                            ga.data_mut()[src] += g.data()[o];
                        }
                    }
                    self.acc(&mut adj, input, ga);
                }
            }
        }
        Ok(Adjoints { adj })
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn acc(&self, adj: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut adj[id.0] {
            Some(t) => {
                let sum = t.add(&delta).expect("adjoint accumulation shapes");
                *t = sum;
            }
            slot @ None => *slot = Some(delta),
        }
    }
}

/// Result of a backward sweep; index with the node ids used to build the graph.
pub struct Adjoints {
    adj: Vec<Option<Tensor>>,
}

impl Adjoints {
    /// Adjoint of `id`, if gradients flowed into it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.adj.get(id.0).and_then(|o| o.as_ref())
    }

    /// Adjoint of a parameter that must have received gradient.
    pub fn expect(&self, id: NodeId) -> &Tensor {
        self.get(id).expect("no adjoint; node unreachable from loss")
    }
}

/// Broadcasting zip with raw IEEE semantics (shapes were validated when the
/// forward node was built).
fn zip_unchecked(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_vec(a.shape().to_vec(), data).unwrap();
    }
    crate::tensor::zip_broadcast(a, b, f)
}

/// Builds `sum_r -log N(y_r | f_r, 1/exp(rho))` from compute primitives.
/// `pred` is `[n]` or `[n,1]`, `target` is a constant with the same element
/// count, `log_prec` is a scalar node (trainable when the likelihood variance
/// is learned).
pub fn gaussian_nll_graph(
    tape: &mut Tape,
    pred: NodeId,
    target: &Tensor,
    log_prec: NodeId,
) -> NodeId {
    let n = target.numel() as f64;
    let flat_shape = [target.numel()];
    let predf = tape.reshape(pred, &flat_shape);
    let y = tape.constant(target.reshape(&flat_shape).expect("target count"));
    let d = tape.sub(predf, y);
    let sq = tape.mul(d, d);
    let ssq = tape.sum(sq);
    let tau = tape.exp(log_prec);
    let quad = tape.mul(tau, ssq);
    let nrho = tape.scale(log_prec, n);
    let spread = tape.sub(quad, nrho);
    let half = tape.scale(spread, 0.5);
    tape.add_scalar(half, 0.5 * n * (2.0 * std::f64::consts::PI).ln())
}

/// Worst entry found by [`finite_difference_check`].
#[derive(Debug, Clone)]
pub struct GradCheckWorst {
    pub param: usize,
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckResult {
    /// Max over entries of relative error, falling back to absolute error
    /// where `|analytic| < 1e-8`.
    pub max_err: f64,
    pub worst: Option<GradCheckWorst>,
}

/// Central-difference gradient check. `f` re-evaluates the scalar objective at
/// perturbed parameter values (any stochastic parts must be frozen inside `f`);
/// `analytic` holds the gradients under test, aligned with `params`.
pub fn finite_difference_check(
    mut f: impl FnMut(&[Tensor]) -> f64,
    params: &[Tensor],
    analytic: &[Tensor],
    step: f64,
) -> GradCheckResult {
    assert_eq!(params.len(), analytic.len(), "one gradient per parameter");
    let mut work: Vec<Tensor> = params.to_vec();
    let mut result = GradCheckResult {
        max_err: 0.0,
        worst: None,
    };
    for p in 0..params.len() {
        assert_eq!(
            params[p].shape(),
            analytic[p].shape(),
            "gradient shape mismatch for parameter {p}"
        );
        for e in 0..params[p].numel() {
            let orig = params[p].data()[e];
            work[p].data_mut()[e] = orig + step;
            let up = f(&work);
            work[p].data_mut()[e] = orig - step;
            let down = f(&work);
            work[p].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * step);
            let an = analytic[p].data()[e];
            let err = if an.abs() < 1e-8 {
                (numeric - an).abs()
            } else {
                (numeric - an).abs() / an.abs().max(numeric.abs())
            };
            if err > result.max_err {
                result.max_err = err;
                result.worst = Some(GradCheckWorst {
                    param: p,
                    entry: e,
                    analytic: an,
                    numeric,
                });
            }
        }
    }
    result
}
