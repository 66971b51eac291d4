//! Reverse-mode automatic differentiation over dynamic-dimensional f64 arrays.
//!
//! A [`Graph`] records every operation applied to [`Tensor`] handles on a tape.
//! Calling [`Graph::backward`] on a scalar output replays the tape in reverse
//! and accumulates gradients for every parameter leaf. All arithmetic is f64
//! and strictly sequential, so results are bit-reproducible across runs.

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn, Zip};
use std::cell::RefCell;
use std::collections::{BTreeMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

pub type Arr = ArrayD<f64>;

static NEXT_PARAM_UID: AtomicU64 = AtomicU64::new(1);

/// A trainable array with a process-unique identity.
#[derive(Debug, Clone)]
pub struct Param {
    uid: u64,
    pub value: Arr,
}

impl Param {
    pub fn new(value: Arr) -> Self {
        Param {
            uid: NEXT_PARAM_UID.fetch_add(1, Ordering::Relaxed),
            value,
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }
}

/// Which parameter leaves receive gradients on this graph.
#[derive(Debug, Clone)]
pub enum GradMode {
    /// All parameter leaves are trainable.
    All,
    /// Inference only: no tape closures are recorded.
    None,
    /// Only parameters whose uid is in the set are trainable.
    Only(HashSet<u64>),
}

struct Node {
    parents: Vec<usize>,
    backward: Option<Box<dyn Fn(&Arr) -> Vec<Arr>>>,
    requires_grad: bool,
}

struct GraphInner {
    nodes: RefCell<Vec<Node>>,
    leaves: RefCell<BTreeMap<u64, usize>>,
    mode: GradMode,
}

/// Tape of recorded operations. Cheap to clone (shared handle).
#[derive(Clone)]
pub struct Graph {
    inner: Rc<GraphInner>,
}

/// Gradients keyed by parameter uid, produced by [`Graph::backward`].
pub struct Gradients {
    by_uid: BTreeMap<u64, Arr>,
}

impl Gradients {
    pub fn get(&self, p: &Param) -> Option<&Arr> {
        self.by_uid.get(&p.uid)
    }

    pub fn take(&mut self, p: &Param) -> Option<Arr> {
        self.by_uid.remove(&p.uid)
    }
}

/// Handle to a node on the tape plus its forward value.
#[derive(Clone)]
pub struct Tensor {
    id: usize,
    value: Rc<Arr>,
    graph: Graph,
}

impl Graph {
    pub fn new(mode: GradMode) -> Self {
        Graph {
            inner: Rc::new(GraphInner {
                nodes: RefCell::new(Vec::new()),
                leaves: RefCell::new(BTreeMap::new()),
                mode,
            }),
        }
    }

    /// Inference graph: records values only, never gradients.
    pub fn inference() -> Self {
        Graph::new(GradMode::None)
    }

    fn push(&self, value: Arr, parents: &[&Tensor], backward: BackFn) -> Tensor {
        let requires_grad = !matches!(self.inner.mode, GradMode::None)
            && parents.iter().any(|p| self.node_requires_grad(p.id));
        let mut nodes = self.inner.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
        });
        Tensor {
            id,
            value: Rc::new(value),
            graph: self.clone(),
        }
    }

    fn push_leaf(&self, value: Arr, requires_grad: bool) -> Tensor {
        let mut nodes = self.inner.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Tensor {
            id,
            value: Rc::new(value),
            graph: self.clone(),
        }
    }

    fn node_requires_grad(&self, id: usize) -> bool {
        self.inner.nodes.borrow()[id].requires_grad
    }

    /// A non-trainable input.
    pub fn constant(&self, value: Arr) -> Tensor {
        self.push_leaf(value, false)
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.constant(Arr::from_elem(IxDyn(&[]), v))
    }

    /// Registers a parameter leaf. The same `Param` registered twice maps to
    /// one tape node, so its gradient accumulates across uses.
    pub fn param(&self, p: &Param) -> Tensor {
        if let Some(&id) = self.inner.leaves.borrow().get(&p.uid) {
            let nodes = self.inner.nodes.borrow();
            debug_assert!(id < nodes.len());
            drop(nodes);
            // Re-materialize a handle; value is identical by construction.
            return Tensor {
                id,
                value: Rc::new(p.value.clone()),
                graph: self.clone(),
            };
        }
        let trainable = match &self.inner.mode {
            GradMode::All => true,
            GradMode::None => false,
            GradMode::Only(set) => set.contains(&p.uid),
        };
        let t = self.push_leaf(p.value.clone(), trainable);
        self.inner.leaves.borrow_mut().insert(p.uid, t.id);
        t
    }

    /// Reverse pass from a scalar loss. Returns gradients for every trainable
    /// parameter leaf reachable from `loss`.
    pub fn backward(&self, loss: &Tensor) -> Gradients {
        assert!(
            loss.value.len() == 1,
            "backward requires a scalar loss, got shape {:?}",
            loss.value.shape()
        );
        let nodes = self.inner.nodes.borrow();
        let mut grads: Vec<Option<Arr>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Arr::from_elem(loss.value.raw_dim(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(back) = &node.backward else { continue };
            let Some(g) = grads[id].take() else { continue };
            let contribs = back(&g);
            debug_assert_eq!(contribs.len(), node.parents.len());
            for (pid, contrib) in node.parents.iter().zip(contribs) {
                if !nodes[*pid].requires_grad {
                    continue;
                }
                match &mut grads[*pid] {
                    Some(acc) => *acc += &contrib,
                    slot => *slot = Some(contrib),
                }
            }
        }
        let mut by_uid = BTreeMap::new();
        for (&uid, &id) in self.inner.leaves.borrow().iter() {
            if let Some(g) = grads[id].take() {
                by_uid.insert(uid, g);
            }
        }
        Gradients { by_uid }
    }
}

type BackFn = Box<dyn Fn(&Arr) -> Vec<Arr>>;

/// Sums `g` down to `shape`, undoing numpy-style broadcasting.
fn reduce_to_shape(g: &Arr, shape: &[usize]) -> Arr {
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (ax, (&have, &want)) in out.shape().to_vec().iter().zip(shape).enumerate() {
        if have != want {
            debug_assert_eq!(want, 1, "broadcast mismatch");
            let summed = out.sum_axis(Axis(ax));
            out = summed.insert_axis(Axis(ax));
        }
    }
    out
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast: {:?} vs {:?}",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

fn binary_broadcast(a: &Arr, b: &Arr, f: impl Fn(f64, f64) -> f64) -> Arr {
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("broadcast lhs");
    let bv = b.broadcast(IxDyn(&shape)).expect("broadcast rhs");
    let mut out = Arr::zeros(IxDyn(&shape));
    Zip::from(&mut out).and(&av).and(&bv).for_each(|o, &x, &y| *o = f(x, y));
    out
}

impl Tensor {
    pub fn value(&self) -> &Arr {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// Scalar extraction; panics unless the tensor holds exactly one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.value.len(), 1, "item() on non-scalar");
        *self.value.iter().next().unwrap()
    }

    /// A constant copy cut off from the tape.
    pub fn detach(&self) -> Tensor {
        self.graph.constant(self.value.as_ref().clone())
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        let out = binary_broadcast(&self.value, &other.value, |a, b| a + b);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        self.graph.push(
            out,
            &[self, other],
            Box::new(move |g| vec![reduce_to_shape(g, &sa), reduce_to_shape(g, &sb)]),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let out = binary_broadcast(&self.value, &other.value, |a, b| a - b);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        self.graph.push(
            out,
            &[self, other],
            Box::new(move |g| {
                vec![reduce_to_shape(g, &sa), reduce_to_shape(&g.mapv(|x| -x), &sb)]
            }),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let out = binary_broadcast(&self.value, &other.value, |a, b| a * b);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        let (va, vb) = (Rc::clone(&self.value), Rc::clone(&other.value));
        self.graph.push(
            out,
            &[self, other],
            Box::new(move |g| {
                let ga = binary_broadcast(g, &vb, |x, y| x * y);
                let gb = binary_broadcast(g, &va, |x, y| x * y);
                vec![reduce_to_shape(&ga, &sa), reduce_to_shape(&gb, &sb)]
            }),
        )
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        self.mul(&other.recip())
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out = self.value.mapv(|x| x * c);
        self.graph
            .push(out, &[self], Box::new(move |g| vec![g.mapv(|x| x * c)]))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out = self.value.mapv(|x| x + c);
        self.graph.push(out, &[self], Box::new(|g| vec![g.clone()]))
    }

    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64 + 'static) -> Tensor {
        let out = self.value.mapv(|x| f(x));
        let v = Rc::clone(&self.value);
        self.graph.push(
            out,
            &[self],
            Box::new(move |g| {
                let mut dx = g.clone();
                Zip::from(&mut dx).and(v.as_ref()).for_each(|d, &x| *d *= df(x));
                vec![dx]
            }),
        )
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, f64::exp)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(f64::ln, |x| 1.0 / x)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(f64::sqrt, |x| 0.5 / x.sqrt())
    }

    pub fn recip(&self) -> Tensor {
        self.unary(|x| 1.0 / x, |x| -1.0 / (x * x))
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, |x| 2.0 * x)
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(f64::tanh, |x| 1.0 - x.tanh() * x.tanh())
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(sigmoid, |x| {
            let s = sigmoid(x);
            s * (1.0 - s)
        })
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// x * sigmoid(x).
    pub fn silu(&self) -> Tensor {
        self.unary(
            |x| x * sigmoid(x),
            |x| {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            },
        )
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        self.unary(
            |x| 0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh()),
            |x| {
                let u = C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            },
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.value.len(), "reshape element count mismatch");
        let out = Arr::from_shape_vec(IxDyn(shape), self.value.iter().cloned().collect())
            .expect("reshape");
        let orig = self.shape().to_vec();
        self.graph.push(
            out,
            &[self],
            Box::new(move |g| {
                vec![Arr::from_shape_vec(IxDyn(&orig), g.iter().cloned().collect()).unwrap()]
            }),
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        let out = self
            .value
            .view()
            .permuted_axes(IxDyn(axes))
            .to_owned()
            .as_standard_layout()
            .to_owned();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.graph.push(
            out,
            &[self],
            Box::new(move |g| {
                vec![g
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .to_owned()
                    .as_standard_layout()
                    .to_owned()]
            }),
        )
    }

    /// 2D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let a = as2(&self.value);
        let b = as2(&other.value);
        let out = a.dot(&b).into_dyn();
        let (va, vb) = (Rc::clone(&self.value), Rc::clone(&other.value));
        self.graph.push(
            out,
            &[self, other],
            Box::new(move |g| {
                let g2 = as2(g);
                let a = as2(&va);
                let b = as2(&vb);
                vec![g2.dot(&b.t()).into_dyn(), a.t().dot(&g2).into_dyn()]
            }),
        )
    }

    /// Batched matmul: [B,M,K] x [B,K,N] -> [B,M,N].
    pub fn bmm(&self, other: &Tensor) -> Tensor {
        let (sa, sb) = (self.shape(), other.shape());
        assert_eq!(sa.len(), 3);
        assert_eq!(sb.len(), 3);
        assert_eq!(sa[0], sb[0], "bmm batch mismatch");
        assert_eq!(sa[2], sb[1], "bmm inner dim mismatch");
        let (bsz, m, _k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = Arr::zeros(IxDyn(&[bsz, m, n]));
        for i in 0..bsz {
            let a = slice3(&self.value, i);
            let b = slice3(&other.value, i);
            out.index_axis_mut(Axis(0), i).assign(&a.dot(&b));
        }
        let (va, vb) = (Rc::clone(&self.value), Rc::clone(&other.value));
        self.graph.push(
            out,
            &[self, other],
            Box::new(move |g| {
                let mut da = Arr::zeros(va.raw_dim());
                let mut db = Arr::zeros(vb.raw_dim());
                for i in 0..bsz {
                    let gi = slice3(g, i);
                    let a = slice3(&va, i);
                    let b = slice3(&vb, i);
                    da.index_axis_mut(Axis(0), i).assign(&gi.dot(&b.t()));
                    db.index_axis_mut(Axis(0), i).assign(&a.t().dot(&gi));
                }
                vec![da, db]
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let s = self.value.sum();
        let shape = self.shape().to_vec();
        self.graph.push(
            Arr::from_elem(IxDyn(&[]), s),
            &[self],
            Box::new(move |g| {
                let gv = *g.iter().next().unwrap();
                vec![Arr::from_elem(IxDyn(&shape), gv)]
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.value.len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize, keepdims: bool) -> Tensor {
        let mut out = self.value.sum_axis(Axis(axis));
        if keepdims {
            out = out.insert_axis(Axis(axis));
        }
        let shape = self.shape().to_vec();
        self.graph.push(
            out,
            &[self],
            Box::new(move |g| {
                let gk = if g.ndim() == shape.len() {
                    g.clone()
                } else {
                    g.clone().insert_axis(Axis(axis))
                };
                let expanded = gk.broadcast(IxDyn(&shape)).unwrap().to_owned();
                vec![expanded]
            }),
        )
    }

    pub fn mean_axis(&self, axis: usize, keepdims: bool) -> Tensor {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis, keepdims).scale(1.0 / n)
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&self) -> Tensor {
        let last = self.value.ndim() - 1;
        let mut out = self.value.as_ref().clone();
        for mut row in out.lanes_mut(Axis(last)) {
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
        let y = Rc::new(out.clone());
        self.graph.push(
            out,
            &[self],
            Box::new(move |g| {
                let mut dx = Arr::zeros(y.raw_dim());
                let last = y.ndim() - 1;
                Zip::from(dx.lanes_mut(Axis(last)))
                    .and(y.lanes(Axis(last)))
                    .and(g.lanes(Axis(last)))
                    .for_each(|mut dxr, yr, gr| {
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                        for ((d, &yi), &gi) in dxr.iter_mut().zip(yr.iter()).zip(gr.iter()) {
                            *d = yi * (gi - dot);
                        }
                    });
                vec![dx]
            }),
        )
    }

    /// log(sum(exp(x))) over the last axis with detached-max stabilization.
    pub fn logsumexp_lastaxis(&self, keepdims: bool) -> Tensor {
        let last = self.value.ndim() - 1;
        let maxes = self
            .value
            .map_axis(Axis(last), |row| {
                row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            })
            .insert_axis(Axis(last));
        let m = self.graph.constant(maxes);
        let shifted = self.sub(&m);
        let lse = shifted.exp().sum_axis(last, true).ln().add(&m);
        if keepdims {
            lse
        } else {
            let mut shape = lse.shape().to_vec();
            shape.remove(last);
            lse.reshape(&shape)
        }
    }

    /// Selects rows along axis 0. Duplicated indices accumulate gradient.
    pub fn index_select(&self, indices: &[usize]) -> Tensor {
        let shape = self.shape().to_vec();
        let mut out_shape = shape.clone();
        out_shape[0] = indices.len();
        let mut out = Arr::zeros(IxDyn(&out_shape));
        for (row, &idx) in indices.iter().enumerate() {
            out.index_axis_mut(Axis(0), row)
                .assign(&self.value.index_axis(Axis(0), idx));
        }
        let idx = indices.to_vec();
        self.graph.push(
            out,
            &[self],
            Box::new(move |g| {
                let mut dx = Arr::zeros(IxDyn(&shape));
                for (row, &i) in idx.iter().enumerate() {
                    let mut tgt = dx.index_axis_mut(Axis(0), i);
                    tgt += &g.index_axis(Axis(0), row);
                }
                vec![dx]
            }),
        )
    }

    /// Contiguous slice along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let out = self
            .value
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        let shape = self.shape().to_vec();
        self.graph.push(
            out,
            &[self],
            Box::new(move |g| {
                let mut dx = Arr::zeros(IxDyn(&shape));
                dx.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
                    .assign(g);
                vec![dx]
            }),
        )
    }

    /// Concatenation along `axis`.
    pub fn concat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|t| t.value.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let lens: Vec<usize> = parts.iter().map(|t| t.shape()[axis]).collect();
        let refs: Vec<&Tensor> = parts.iter().collect();
        parts[0].graph.push(
            out,
            &refs,
            Box::new(move |g| {
                let mut grads = Vec::with_capacity(lens.len());
                let mut offset = 0;
                for &l in &lens {
                    grads.push(
                        g.slice_axis(Axis(axis), ndarray::Slice::from(offset..offset + l))
                            .to_owned(),
                    );
                    offset += l;
                }
                grads
            }),
        )
    }

    /// 2D convolution over [B,C,H,W] with weight [O,C,kh,kw] and bias [O].
    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
        conv2d_op(self, weight, bias, stride, pad)
    }

    /// Nearest-neighbor 2x upsampling of [B,C,H,W].
    pub fn upsample2x(&self) -> Tensor {
        let s = self.shape();
        assert_eq!(s.len(), 4);
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = Arr::zeros(IxDyn(&[b, c, 2 * h, 2 * w]));
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let v = self.value[[bi, ci, i, j]];
                        out[[bi, ci, 2 * i, 2 * j]] = v;
                        out[[bi, ci, 2 * i, 2 * j + 1]] = v;
                        out[[bi, ci, 2 * i + 1, 2 * j]] = v;
                        out[[bi, ci, 2 * i + 1, 2 * j + 1]] = v;
                    }
                }
            }
        }
        self.graph.push(
            out,
            &[self],
            Box::new(move |g| {
                let mut dx = Arr::zeros(IxDyn(&[b, c, h, w]));
                for bi in 0..b {
                    for ci in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                dx[[bi, ci, i, j]] = g[[bi, ci, 2 * i, 2 * j]]
                                    + g[[bi, ci, 2 * i, 2 * j + 1]]
                                    + g[[bi, ci, 2 * i + 1, 2 * j]]
                                    + g[[bi, ci, 2 * i + 1, 2 * j + 1]];
                            }
                        }
                    }
                }
                vec![dx]
            }),
        )
    }

    /// Spatial mean of [B,C,H,W] -> [B,C].
    pub fn spatial_mean(&self) -> Tensor {
        let s = self.shape().to_vec();
        assert_eq!(s.len(), 4);
        self.reshape(&[s[0], s[1], s[2] * s[3]]).mean_axis(2, false)
    }

    /// Rowwise L2 normalization of the last axis with an epsilon floor.
    pub fn l2_normalize(&self, eps: f64) -> Tensor {
        let last = self.value.ndim() - 1;
        let norm = self.square().sum_axis(last, true).add_scalar(eps).sqrt();
        self.div(&norm)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn as2(a: &Arr) -> Array2<f64> {
    a.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("expected 2D tensor")
        .to_owned()
}

fn slice3(a: &Arr, i: usize) -> Array2<f64> {
    a.index_axis(Axis(0), i)
        .into_dimensionality::<ndarray::Ix2>()
        .expect("expected 3D tensor")
        .to_owned()
}

fn conv_out_len(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Unfolds one padded image [C,H,W] into a [C*kh*kw, oh*ow] patch matrix.
fn im2col(
    x: &ndarray::ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut cols = Array2::<f64>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        cols[[row, oi * ow + oj]] = x[[ci, ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a patch matrix back onto an image gradient.
fn col2im(
    cols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ndarray::Array3<f64> {
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut img = ndarray::Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        img[[ci, ii as usize, jj as usize]] += cols[[row, oi * ow + oj]];
                    }
                }
            }
        }
    }
    img
}

fn conv2d_op(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
    let xs = x.shape().to_vec();
    let ws = weight.shape().to_vec();
    assert_eq!(xs.len(), 4, "conv2d input must be [B,C,H,W]");
    assert_eq!(ws.len(), 4, "conv2d weight must be [O,C,kh,kw]");
    assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, kh, kw) = (ws[0], ws[2], ws[3]);
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let wmat = Array2::from_shape_vec((o, c * kh * kw), weight.value().iter().cloned().collect())
        .unwrap();
    let bvec = Array1::from_iter(bias.value().iter().cloned());
    let mut out = Arr::zeros(IxDyn(&[b, o, oh, ow]));
    for bi in 0..b {
        let xi = x
            .value()
            .index_axis(Axis(0), bi)
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let cols = im2col(&xi, kh, kw, stride, pad);
        let mut y = wmat.dot(&cols);
        for (mut row, &bv) in y.rows_mut().into_iter().zip(bvec.iter()) {
            row += bv;
        }
        out.index_axis_mut(Axis(0), bi).assign(
            &y.into_shape_with_order((o, oh, ow)).unwrap(),
        );
    }
    let vx = Rc::clone(&x.value);
    let vw = Rc::clone(&weight.value);
    x.graph.push(
        out,
        &[x, weight, bias],
        Box::new(move |g| {
            let wmat =
                Array2::from_shape_vec((o, c * kh * kw), vw.iter().cloned().collect()).unwrap();
            let mut dx = Arr::zeros(IxDyn(&[b, c, h, w]));
            let mut dw = Array2::<f64>::zeros((o, c * kh * kw));
            let mut db = Array1::<f64>::zeros(o);
            for bi in 0..b {
                let gi = Array2::from_shape_vec(
                    (o, oh * ow),
                    g.index_axis(Axis(0), bi).iter().cloned().collect(),
                )
                .unwrap();
                let xi = vx
                    .index_axis(Axis(0), bi)
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap();
                let cols = im2col(&xi, kh, kw, stride, pad);
                dw += &gi.dot(&cols.t());
                db += &gi.sum_axis(Axis(1));
                let dcols = wmat.t().dot(&gi);
                let dxi = col2im(&dcols, c, h, w, kh, kw, stride, pad);
                dx.index_axis_mut(Axis(0), bi).assign(&dxi);
            }
            vec![
                dx,
                dw.into_shape_with_order(IxDyn(&[o, c, kh, kw])).unwrap(),
                db.into_dyn(),
            ]
        }),
    )
}
