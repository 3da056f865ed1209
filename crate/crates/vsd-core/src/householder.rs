//! Orthogonal matrices as short products of Householder reflections.
//!
//! A reflection H_v = I − 2·v·vᵀ/‖v‖² is orthogonal and symmetric for any
//! nonzero v, and products of reflections stay exactly orthogonal in exact
//! arithmetic (and to ~K·ε in floats). A chain of T reflections
//! U = H_T · H_{T−1} ··· H_1 therefore parameterizes a rotation of the noise
//! space with O(T·K) parameters instead of K².
//!
//! Only v₁ is free; later vectors come from a shared learned map
//! v_t = FC(v_{t−1}), either a full K×K affine map or a low-rank
//! K → r → K map with a ReLU in the middle. T = 0 means U = I.
//!
//! Applying H_v never materializes the K×K reflection: H_v·X is computed as
//! X − v·(2/‖v‖²)·(vᵀX) in O(K·m). A vector with ‖v‖ < 1e-12 would make the
//! reflection numerically meaningless, so such vectors are replaced by e₁
//! (still a valid reflection); the replacement is a discrete guard, applied
//! identically on the pure and the tape paths.

use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// ‖v‖² below this means the direction is numerically undefined.
const GUARD_NORM_SQ: f64 = 1e-24;

/// Shared map producing v_t from v_{t−1}; vectors are rows `[1, K]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ChainMap {
    /// v_next = v·w + b, w is `[K, K]`.
    Full { w: Tensor, b: Tensor },
    /// v_next = relu(v·w1 + b1)·w2 + b2 with hidden width r << K.
    LowRank {
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HouseholderChain {
    /// Number of reflections T ≥ 0.
    pub reflections: usize,
    /// First Householder direction, `[1, K]`; unit norm at init.
    pub v1: Tensor,
    /// Map for t ≥ 2; `None` when T ≤ 1.
    pub map: Option<ChainMap>,
}

/// Tape handles for the chain parameters plus the materialized U node.
pub struct ChainNodes {
    pub v1: NodeId,
    pub map: Vec<NodeId>,
    pub u: NodeId,
}

impl HouseholderChain {
    /// Identity chain (T = 0) over dimension `k`.
    pub fn identity(k: usize) -> Self {
        HouseholderChain {
            reflections: 0,
            v1: unit_e1(k),
            map: None,
        }
    }

    /// Random init: v₁ uniform on the sphere; map weights N(0, 1/K) with a
    /// small positive bias on the low-rank hidden layer so ReLU units start
    /// alive.
    pub fn init(k: usize, reflections: usize, rank: Option<usize>, rng: &mut Rng) -> Self {
        assert!(k >= 1, "chain dimension must be positive");
        let mut v1 = rng.gaussian_tensor(&[1, k]);
        let norm = v1.frob_norm();
        if norm < 1e-12 {
            v1 = unit_e1(k);
        } else {
            v1 = v1.scale(1.0 / norm);
        }
        let map = if reflections >= 2 {
            Some(match rank {
                None => ChainMap::Full {
                    w: rng.gaussian_tensor(&[k, k]).scale(1.0 / (k as f64).sqrt()),
                    b: Tensor::zeros(&[1, k]),
                },
                Some(r) => {
                    assert!(r >= 1, "low-rank width must be positive");
                    ChainMap::LowRank {
                        w1: rng.gaussian_tensor(&[k, r]).scale(1.0 / (k as f64).sqrt()),
                        b1: Tensor::full(&[1, r], 0.1),
                        w2: rng.gaussian_tensor(&[r, k]).scale(1.0 / (r as f64).sqrt()),
                        b2: Tensor::zeros(&[1, k]),
                    }
                }
            })
        } else {
            None
        };
        HouseholderChain {
            reflections,
            v1,
            map,
        }
    }

    pub fn dim(&self) -> usize {
        self.v1.shape()[1]
    }

    /// The reflection directions v_1 .. v_T after applying the guard.
    pub fn vectors(&self) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(self.reflections);
        let mut v = guard(self.v1.clone());
        for t in 0..self.reflections {
            if t > 0 {
                v = guard(self.apply_map(&v));
            }
            out.push(v.clone());
        }
        out
    }

    fn apply_map(&self, v: &Tensor) -> Tensor {
        match self.map.as_ref().expect("chain with T >= 2 needs a map") {
            ChainMap::Full { w, b } => v.matmul(w).unwrap().add(b).unwrap(),
            ChainMap::LowRank { w1, b1, w2, b2 } => {
                let h = v.matmul(w1).unwrap().add(b1).unwrap().relu();
                h.matmul(w2).unwrap().add(b2).unwrap()
            }
        }
    }

    /// Materialize U = H_T ··· H_1 (identity for T = 0).
    pub fn matrix(&self) -> Tensor {
        let k = self.dim();
        let mut u = Tensor::eye(k);
        for v in self.vectors() {
            u = householder_apply(&v, &u);
        }
        u
    }

    /// Named parameter views, in registry order.
    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![("chain.v1", &self.v1)];
        match &self.map {
            None => {}
            Some(ChainMap::Full { w, b }) => {
                out.push(("chain.w", w));
                out.push(("chain.b", b));
            }
            Some(ChainMap::LowRank { w1, b1, w2, b2 }) => {
                out.push(("chain.w1", w1));
                out.push(("chain.b1", b1));
                out.push(("chain.w2", w2));
                out.push(("chain.b2", b2));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out: Vec<(&'static str, &mut Tensor)> = vec![("chain.v1", &mut self.v1)];
        match &mut self.map {
            None => {}
            Some(ChainMap::Full { w, b }) => {
                out.push(("chain.w", w));
                out.push(("chain.b", b));
            }
            Some(ChainMap::LowRank { w1, b1, w2, b2 }) => {
                out.push(("chain.w1", w1));
                out.push(("chain.b1", b1));
                out.push(("chain.w2", w2));
                out.push(("chain.b2", b2));
            }
        }
        out
    }

    /// Register chain parameters on the tape and build the U node once.
    /// The guard substitutes a constant e₁ leaf exactly as the pure path does.
    pub fn register(&self, tape: &mut Tape) -> ChainNodes {
        let k = self.dim();
        let v1 = tape.param(self.v1.clone());
        let map: Vec<NodeId> = match &self.map {
            None => vec![],
            Some(ChainMap::Full { w, b }) => {
                vec![tape.param(w.clone()), tape.param(b.clone())]
            }
            Some(ChainMap::LowRank { w1, b1, w2, b2 }) => vec![
                tape.param(w1.clone()),
                tape.param(b1.clone()),
                tape.param(w2.clone()),
                tape.param(b2.clone()),
            ],
        };
        let mut u = tape.constant(Tensor::eye(k));
        let mut v = guard_node(tape, v1);
        for t in 0..self.reflections {
            if t > 0 {
                let mapped = match &self.map {
                    Some(ChainMap::Full { .. }) => {
                        let vw = tape.matmul(v, map[0]);
                        tape.add(vw, map[1])
                    }
                    Some(ChainMap::LowRank { .. }) => {
                        let h0 = tape.matmul(v, map[0]);
                        let h1 = tape.add(h0, map[1]);
                        let h = tape.relu(h1);
                        let o = tape.matmul(h, map[2]);
                        tape.add(o, map[3])
                    }
                    None => unreachable!("T >= 2 requires a map"),
                };
                v = guard_node(tape, mapped);
            }
            u = householder_apply_graph(tape, v, u);
        }
        ChainNodes { v1, map, u }
    }

    /// (name, node) pairs aligned with [`HouseholderChain::params_mut`].
    pub fn bindings(&self, nodes: &ChainNodes) -> Vec<(&'static str, NodeId)> {
        let mut out = vec![("chain.v1", nodes.v1)];
        let names: &[&'static str] = match &self.map {
            None => &[],
            Some(ChainMap::Full { .. }) => &["chain.w", "chain.b"],
            Some(ChainMap::LowRank { .. }) => &["chain.w1", "chain.b1", "chain.w2", "chain.b2"],
        };
        for (name, id) in names.iter().zip(&nodes.map) {
            out.push((name, *id));
        }
        out
    }
}

fn unit_e1(k: usize) -> Tensor {
    let mut v = Tensor::zeros(&[1, k]);
    v.data_mut()[0] = 1.0;
    v
}

fn guard(v: Tensor) -> Tensor {
    let nsq: f64 = v.data().iter().map(|x| x * x).sum();
    if nsq < GUARD_NORM_SQ {
        unit_e1(v.numel())
    } else {
        v
    }
}

fn guard_node(tape: &mut Tape, v: NodeId) -> NodeId {
    let nsq: f64 = tape.value(v).data().iter().map(|x| x * x).sum();
    if nsq < GUARD_NORM_SQ {
        let k = tape.value(v).numel();
        tape.constant(unit_e1(k))
    } else {
        v
    }
}

/// H_v · X without materializing H: X − v·(2/‖v‖²)·(vᵀX).
/// `v` is `[K]` or `[1, K]`, `x` is `[K, m]`; near-zero `v` falls back to e₁.
pub fn householder_apply(v: &Tensor, x: &Tensor) -> Tensor {
    let k = x.shape()[0];
    assert_eq!(v.numel(), k, "direction length must match rows of x");
    let v = guard(v.reshape(&[1, k]).expect("row view"));
    let nsq: f64 = v.data().iter().map(|a| a * a).sum();
    let vx = v.matmul(x).expect("v x"); // [1, m]
    let outer = v.transpose().matmul(&vx.scale(2.0 / nsq)).expect("outer");
    x.sub(&outer).expect("same shape")
}

/// Tape twin of [`householder_apply`] (no guard: callers guard `v` first).
fn householder_apply_graph(tape: &mut Tape, v: NodeId, x: NodeId) -> NodeId {
    let vv = tape.mul(v, v);
    let nsq = tape.sum(vv);
    let two = tape.scalar(2.0);
    let coef = tape.div(two, nsq);
    let vx = tape.matmul(v, x);
    let scaled = tape.mul(vx, coef);
    let vt = tape.transpose(v);
    let outer = tape.matmul(vt, scaled);
    tape.sub(x, outer)
}

/// Multiplicative structured noise rows: ξ_i = 1 + U·(√α ⊙ ε_i), ε_i ~ N(0, I).
/// Returns `[n, K]`; covariance of ξ is U·diag(α)·Uᵀ by construction.
pub fn sample_structured_noise(u: &Tensor, alpha: &Tensor, n: usize, rng: &mut Rng) -> Tensor {
    let k = u.shape()[0];
    assert_eq!(u.shape(), &[k, k], "U must be square");
    assert_eq!(alpha.numel(), k, "one droprate per dimension");
    let sqrt_a = alpha.map(|a| {
        debug_assert!(a >= 0.0, "negative variance");
        a.sqrt()
    });
    let eps = rng.gaussian_tensor(&[n, k]);
    let scaled = eps
        .mul(&sqrt_a.reshape(&[1, k]).unwrap())
        .expect("row scale");
    let rotated = scaled.matmul(&u.transpose()).expect("rotate");
    rotated.add_scalar(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn materialize_reflection(v: &Tensor) -> Tensor {
        let k = v.numel();
        let nsq: f64 = v.data().iter().map(|a| a * a).sum();
        let mut h = Tensor::eye(k);
        for i in 0..k {
            for j in 0..k {
                let hij = h.at2(i, j) - 2.0 * v.data()[i] * v.data()[j] / nsq;
                h.set2(i, j, hij);
            }
        }
        h
    }

    #[test]
    fn apply_matches_materialized_reflection() {
        let mut rng = Rng::new(10);
        for _ in 0..10 {
            let k = 2 + (rng.next_u64_raw() % 8) as usize;
            let m = 1 + (rng.next_u64_raw() % 6) as usize;
            let v = rng.gaussian_tensor(&[k]);
            let x = rng.gaussian_tensor(&[k, m]);
            let fast = householder_apply(&v, &x);
            let slow = materialize_reflection(&v).matmul(&x).unwrap();
            for (f, s) in fast.data().iter().zip(slow.data()) {
                assert!((f - s).abs() < 1e-12, "{f} vs {s}");
            }
        }
    }

    #[test]
    fn reflection_geometry() {
        let mut rng = Rng::new(11);
        let k = 6;
        let v = rng.gaussian_tensor(&[k]);
        // H v = -v.
        let hv = householder_apply(&v, &v.reshape(&[k, 1]).unwrap());
        for (h, o) in hv.data().iter().zip(v.data()) {
            assert!((h + o).abs() < 1e-12);
        }
        // H w = w for w orthogonal to v.
        let mut w = rng.gaussian_tensor(&[k]);
        let dot: f64 = w.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
        let nsq: f64 = v.data().iter().map(|a| a * a).sum();
        let proj = v.scale(dot / nsq);
        w = w.sub(&proj).unwrap();
        let hw = householder_apply(&v, &w.reshape(&[k, 1]).unwrap());
        for (h, o) in hw.data().iter().zip(w.data()) {
            assert!((h - o).abs() < 1e-12);
        }
        // Applying twice is the identity.
        let x = rng.gaussian_tensor(&[k, 3]);
        let twice = householder_apply(&v, &householder_apply(&v, &x));
        for (t, o) in twice.data().iter().zip(x.data()) {
            assert!((t - o).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_direction_falls_back_to_e1() {
        let v = Tensor::zeros(&[4]);
        let x = Tensor::eye(4);
        let h = householder_apply(&v, &x);
        // H_{e1} = diag(-1, 1, 1, 1).
        let mut want = Tensor::eye(4);
        want.set2(0, 0, -1.0);
        assert_eq!(h, want);
    }

    #[test]
    fn identity_chain_is_identity() {
        let chain = HouseholderChain::identity(5);
        assert_eq!(chain.matrix(), Tensor::eye(5));
    }

    #[test]
    fn chain_matrix_is_orthogonal_all_configs() {
        let mut rng = Rng::new(12);
        for &t in &[1usize, 2, 3] {
            for rank in [None, Some(2), Some(5)] {
                let chain = HouseholderChain::init(16, t, rank, &mut rng);
                let u = chain.matrix();
                let gram = u.transpose().matmul(&u).unwrap();
                let err = gram.sub(&Tensor::eye(16)).unwrap().frob_norm();
                assert!(err < 1e-12, "T={t} rank={rank:?}: ||UtU - I|| = {err}");
            }
        }
    }

    #[test]
    fn k_equals_one_chain() {
        // In one dimension every reflection is multiplication by -1.
        let mut rng = Rng::new(13);
        for t in 0..4 {
            let chain = HouseholderChain::init(1, t, None, &mut rng);
            let u = chain.matrix();
            let want = if t % 2 == 0 { 1.0 } else { -1.0 };
            assert!((u.data()[0] - want).abs() < 1e-15, "T={t}");
        }
    }

    #[test]
    fn tape_matrix_matches_pure_matrix() {
        let mut rng = Rng::new(14);
        for &t in &[1usize, 2, 3] {
            for rank in [None, Some(3)] {
                let chain = HouseholderChain::init(7, t, rank, &mut rng);
                let mut tape = Tape::new();
                let nodes = chain.register(&mut tape);
                let pure = chain.matrix();
                let err = tape.value(nodes.u).sub(&pure).unwrap().max_abs();
                assert!(err < 1e-14, "T={t} rank={rank:?}: {err}");
            }
        }
    }

    #[test]
    fn chain_gradients_match_finite_differences() {
        use crate::tape::finite_difference_check;
        let mut rng = Rng::new(15);
        let k = 5;
        for rank in [None, Some(2)] {
            let chain = HouseholderChain::init(k, 3, rank, &mut rng);
            let m = rng.gaussian_tensor(&[k, k]);
            // Scalar probe: sum(U * M) exercises every entry of U.
            let mc = m.clone();
            let eval = |ch: &HouseholderChain| -> f64 {
                ch.matrix().mul(&mc).unwrap().sum()
            };
            let mut tape = Tape::new();
            let nodes = chain.register(&mut tape);
            let mnode = tape.constant(m.clone());
            let prod = tape.mul(nodes.u, mnode);
            let loss = tape.sum(prod);
            let adj = tape.backward(loss).unwrap();
            let params: Vec<Tensor> = chain.params().iter().map(|(_, t)| (*t).clone()).collect();
            let ids = chain.bindings(&nodes);
            let analytic: Vec<Tensor> = ids.iter().map(|(_, id)| adj.expect(*id).clone()).collect();
            let base = chain.clone();
            let res = finite_difference_check(
                |ps| {
                    let mut c = base.clone();
                    for (slot, p) in c.params_mut().into_iter().zip(ps) {
                        *slot.1 = p.clone();
                    }
                    eval(&c)
                },
                &params,
                &analytic,
                1e-6,
            );
            assert!(res.max_err < 1e-6, "rank {rank:?}: {:?}", res.worst);
        }
    }

    #[test]
    fn noise_rows_have_unit_mean_and_structured_covariance() {
        let mut rng = Rng::new(16);
        let k = 4;
        let chain = HouseholderChain::init(k, 2, None, &mut rng);
        let u = chain.matrix();
        let alpha = Tensor::from_vec(vec![k], vec![0.3, 0.8, 0.1, 0.5]).unwrap();
        let n = 200_000;
        let xi = sample_structured_noise(&u, &alpha, n, &mut rng);
        // Mean 1 per coordinate.
        let mean = xi.sum_cols().scale(1.0 / n as f64);
        for m in mean.data() {
            assert!((m - 1.0).abs() < 0.02, "mean {m}");
        }
        // Covariance U diag(alpha) Ut.
        let mut cov = Tensor::zeros(&[k, k]);
        for r in 0..n {
            for i in 0..k {
                for j in 0..k {
                    let d = (xi.at2(r, i) - 1.0) * (xi.at2(r, j) - 1.0);
                    cov.set2(i, j, cov.at2(i, j) + d / n as f64);
                }
            }
        }
        let alpha_diag = {
            let mut d = Tensor::zeros(&[k, k]);
            for i in 0..k {
                d.set2(i, i, alpha.data()[i]);
            }
            d
        };
        let want = u.matmul(&alpha_diag).unwrap().matmul(&u.transpose()).unwrap();
        let err = cov.sub(&want).unwrap().max_abs();
        assert!(err < 0.02, "covariance error {err}");
    }

    #[test]
    fn zero_alpha_gives_exactly_ones() {
        let mut rng = Rng::new(17);
        let chain = HouseholderChain::init(3, 1, None, &mut rng);
        let xi = sample_structured_noise(&chain.matrix(), &Tensor::zeros(&[3]), 10, &mut rng);
        assert!(xi.data().iter().all(|&v| v == 1.0));
    }
}
