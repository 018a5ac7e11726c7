//! Reverse-mode tape over `ndarray` f64 tensors.
//!
//! A [`Var`] is an index into the tape. Each op pushes one node holding the
//! forward value plus a backward closure that maps the output gradient to
//! gradient contributions for its parents. With gradients disabled the tape
//! stores values only, and attention streams over query blocks instead of
//! materializing the score matrix.

use super::params::{ParamId, ParamStore};
use ndarray::{Array1, Array2, ArrayD, ArrayViewD, Axis, Ix1, Ix2, Ix3, IxDyn};

pub type ArrD = ArrayD<f64>;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackwardFn = Box<dyn Fn(&ArrD, &ArrD, &[&ArrD]) -> Vec<ArrD>>;

struct Node {
    value: ArrD,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    bindings: Vec<(usize, ParamId)>,
}

/// Gradients for every node of a graph, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<ArrD>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrD> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrD> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn softmax_rows_inplace(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        row.mapv_inplace(|x| x / sum);
    }
}

/// Precomputed source taps for one output coordinate of a 2x bilinear upsample.
fn bilinear2_taps(out_len: usize) -> Vec<(usize, usize, f64, f64)> {
    let n = out_len / 2;
    (0..out_len)
        .map(|i| {
            let s = (i as f64 + 0.5) / 2.0 - 0.5;
            let f = s.floor();
            let t = s - f;
            let i0 = (f.max(0.0) as usize).min(n - 1);
            let i1 = ((f + 1.0).max(0.0) as usize).min(n - 1);
            (i0, i1, 1.0 - t, t)
        })
        .collect()
}

impl Graph {
    pub fn new(grad_enabled: bool) -> Self {
        Graph { nodes: Vec::new(), grad_enabled, bindings: Vec::new() }
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

    pub fn value(&self, v: Var) -> &ArrD {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a 0-d node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.ndim(), 0, "scalar() on non-0-d node");
        *val.first().expect("empty tensor")
    }

    fn push(&mut self, value: ArrD, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var {
        let backward = if self.grad_enabled { backward } else { None };
        let parents = if self.grad_enabled { parents } else { Vec::new() };
        self.nodes.push(Node { value, parents, backward });
        Var(self.nodes.len() - 1)
    }

    /// Insert a value with no gradient history of its own (gradients still
    /// flow *to* it, which is how leaves are checked).
    pub fn constant(&mut self, value: ArrD) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), backward: None });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(ArrD::from_elem(IxDyn(&[]), v))
    }

    /// Insert a parameter from the store and remember the binding so its
    /// gradient can be collected after `backward`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.constant(store.value(id).clone());
        self.bindings.push((v.0, id));
        v
    }

    /// Collect `(param, gradient)` pairs for every bound parameter that
    /// received a gradient.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<(ParamId, ArrD)> {
        self.bindings
            .iter()
            .filter_map(|&(node, id)| grads.take(Var(node)).map(|g| (id, g)))
            .collect()
    }

    /// Reverse sweep from a 0-d loss node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert!(self.grad_enabled, "backward on a no-grad graph");
        assert_eq!(self.nodes[loss.0].value.ndim(), 0, "loss must be scalar");
        let mut grads: Vec<Option<ArrD>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrD::from_elem(IxDyn(&[]), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some(bw) = &node.backward {
                let pvals: Vec<&ArrD> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let contribs = bw(&g, &node.value, &pvals);
                debug_assert_eq!(contribs.len(), node.parents.len());
                for (&p, c) in node.parents.iter().zip(contribs) {
                    match &mut grads[p] {
                        Some(acc) => *acc += &c,
                        slot => *slot = Some(c),
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, vec![a.0, b.0], Some(Box::new(|g, _, _| vec![g.clone(), g.clone()])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(value, vec![a.0, b.0], Some(Box::new(|g, _, _| vec![g.clone(), -g.clone()])))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, _, pv| vec![g * pv[1], g * pv[0]])),
        )
    }

    pub fn div_elem(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "div shape mismatch");
        let value = &self.nodes[a.0].value / &self.nodes[b.0].value;
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, _, pv| {
                let da = g / pv[1];
                let db = -(g * pv[0]) / (pv[1] * pv[1]);
                vec![da, db]
            })),
        )
    }

    /// `k * a + c` with constant scalars.
    pub fn affine(&mut self, a: Var, k: f64, c: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| k * x + c);
        self.push(value, vec![a.0], Some(Box::new(move |g, _, _| vec![g.mapv(|x| k * x)])))
    }

    /// Multiply a tensor by a learnable 0-d scalar.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.nodes[s.0].value.ndim(), 0, "mul_scalar_var needs 0-d scale");
        let sv = *self.nodes[s.0].value.first().unwrap();
        let value = self.nodes[a.0].value.mapv(|x| sv * x);
        self.push(
            value,
            vec![a.0, s.0],
            Some(Box::new(move |g, _, pv| {
                let da = g.mapv(|x| sv * x);
                let ds = ArrD::from_elem(IxDyn(&[]), (g * pv[0]).sum());
                vec![da, ds]
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|g, _, pv| {
                let mut da = g.clone();
                ndarray::Zip::from(&mut da).and(pv[0]).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                });
                vec![da]
            })),
        )
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::ln);
        self.push(value, vec![a.0], Some(Box::new(|g, _, pv| vec![g / pv[0]])))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.clamp(lo, hi));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _, pv| {
                let mut da = g.clone();
                ndarray::Zip::from(&mut da).and(pv[0]).for_each(|d, &x| {
                    if x < lo || x > hi {
                        *d = 0.0;
                    }
                });
                vec![da]
            })),
        )
    }

    /// Elementwise `a^p` for constant `p`; inputs are assumed non-negative.
    pub fn powf_const(&mut self, a: Var, p: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.powf(p));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _, pv| {
                if p == 0.0 {
                    return vec![ArrD::zeros(pv[0].raw_dim())];
                }
                let da = g * &pv[0].mapv(|x| p * x.powf(p - 1.0));
                vec![da]
            })),
        )
    }

    // ---- shape plumbing ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        let orig: Vec<usize> = self.shape(a).to_vec();
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _, _| {
                vec![g.clone().into_shape_with_order(IxDyn(&orig)).unwrap()]
            })),
        )
    }

    pub fn transpose2(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.clone().reversed_axes().as_standard_layout().to_owned();
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|g, _, _| {
                vec![g.clone().reversed_axes().as_standard_layout().to_owned()]
            })),
        )
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let axis = av.ndim() - 1;
        let na = av.shape()[axis];
        let value = ndarray::concatenate(Axis(axis), &[av.view(), bv.view()]).unwrap();
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |g, _, _| {
                let axis = Axis(g.ndim() - 1);
                let ga = g.index_axis_range(axis, 0..na);
                let gb = g.index_axis_range(axis, na..g.len_of(axis));
                vec![ga, gb]
            })),
        )
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.ndim(), 2);
        let cols = av.shape()[1];
        assert!(c1 <= cols);
        let value = av.slice_axis(Axis(1), ndarray::Slice::from(c0..c1)).to_owned();
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _, pv| {
                let rows = pv[0].shape()[0];
                let mut da = ArrD::zeros(IxDyn(&[rows, cols]));
                da.slice_mut(ndarray::s![.., c0..c1])
                    .assign(&g.view().into_dimensionality::<Ix2>().unwrap());
                vec![da]
            })),
        )
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.ndim(), 2);
        let rows = av.shape()[0];
        let value = av.index_axis_range(Axis(0), r0..r1);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _, pv| {
                let cols = pv[0].shape()[1];
                let mut da = ArrD::zeros(IxDyn(&[rows, cols]));
                da.slice_mut(ndarray::s![r0..r1, ..]).assign(&g.view().into_dimensionality::<Ix2>().unwrap());
                vec![da]
            })),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().expect("matmul lhs 2-d");
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix2>().expect("matmul rhs 2-d");
        assert_eq!(av.shape()[1], bv.shape()[0], "matmul inner dim");
        let value = av.dot(&bv).into_dyn();
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, _, pv| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let a2 = pv[0].view().into_dimensionality::<Ix2>().unwrap();
                let b2 = pv[1].view().into_dimensionality::<Ix2>().unwrap();
                vec![g2.dot(&b2.t()).into_dyn(), a2.t().dot(&g2).into_dyn()]
            })),
        )
    }

    /// Bias over the last axis of an N-d tensor.
    pub fn add_bias_last(&mut self, a: Var, b: Var) -> Var {
        let c = *self.shape(a).last().unwrap();
        assert_eq!(self.shape(b), [c], "bias width mismatch");
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let mut value = self.nodes[a.0].value.clone();
        for mut lane in value.lanes_mut(Axis(value.ndim() - 1)) {
            lane += &bv;
        }
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |g, _, _| {
                let mut db = Array1::<f64>::zeros(c);
                for lane in g.lanes(Axis(g.ndim() - 1)) {
                    db += &lane;
                }
                vec![g.clone(), db.into_dyn()]
            })),
        )
    }

    /// Bias per row of a 2-d tensor, broadcast across columns.
    pub fn add_bias_rows(&mut self, a: Var, b: Var) -> Var {
        let (m, _n) = {
            let s = self.shape(a);
            assert_eq!(s.len(), 2);
            (s[0], s[1])
        };
        assert_eq!(self.shape(b), [m], "row bias length mismatch");
        let mut value = self.nodes[a.0].value.clone();
        let bv = &self.nodes[b.0].value;
        for (mut row, bi) in value.axis_iter_mut(Axis(0)).zip(bv.iter()) {
            row.mapv_inplace(|x| x + bi);
        }
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |g, _, _| {
                let db: Vec<f64> = g.axis_iter(Axis(0)).map(|r| r.sum()).collect();
                vec![g.clone(), Array1::from_vec(db).into_dyn()]
            })),
        )
    }

    /// Divide each row `i` of `a` by scalar `d[i]`.
    pub fn div_rows(&mut self, a: Var, d: Var) -> Var {
        let m = self.shape(a)[0];
        assert_eq!(self.shape(d), [m], "row divisor length mismatch");
        let mut value = self.nodes[a.0].value.clone();
        let dv = self.nodes[d.0].value.clone();
        for (mut row, di) in value.axis_iter_mut(Axis(0)).zip(dv.iter()) {
            row.mapv_inplace(|x| x / di);
        }
        self.push(
            value,
            vec![a.0, d.0],
            Some(Box::new(move |g, _, pv| {
                let a2 = pv[0];
                let d1 = pv[1];
                let mut da = g.clone();
                let mut dd = Array1::<f64>::zeros(g.shape()[0]);
                for (i, (mut row, di)) in da.axis_iter_mut(Axis(0)).zip(d1.iter()).enumerate() {
                    row.mapv_inplace(|x| x / di);
                    let num: f64 = g
                        .index_axis(Axis(0), i)
                        .iter()
                        .zip(a2.index_axis(Axis(0), i).iter())
                        .map(|(gi, ai)| gi * ai)
                        .sum();
                    dd[i] = -num / (di * di);
                }
                vec![da, dd.into_dyn()]
            })),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = ArrD::from_elem(IxDyn(&[]), self.nodes[a.0].value.sum());
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|g, _, pv| {
                let gs = *g.first().unwrap();
                vec![ArrD::from_elem(pv[0].raw_dim(), gs)]
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum_all(a);
        self.affine(s, 1.0 / n, 0.0)
    }

    /// Sum of a 2-d tensor over one axis.
    pub fn sum_axis2(&mut self, a: Var, axis: usize) -> Var {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().expect("sum_axis2 2-d");
        let value = av.sum_axis(Axis(axis)).into_dyn();
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _, pv| {
                let (m, n) = {
                    let s = pv[0].shape();
                    (s[0], s[1])
                };
                let mut da = ArrD::zeros(IxDyn(&[m, n]));
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                if axis == 0 {
                    for mut row in da.axis_iter_mut(Axis(0)) {
                        row.assign(&g1);
                    }
                } else {
                    for (mut row, gi) in da.axis_iter_mut(Axis(0)).zip(g1.iter()) {
                        row.fill(*gi);
                    }
                }
                vec![da]
            })),
        )
    }

    // ---- normalization & softmax ----

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let mut value = self.nodes[a.0].value.clone();
        for mut lane in value.lanes_mut(Axis(value.ndim() - 1)) {
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in lane.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            lane.mapv_inplace(|x| x / sum);
        }
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|g, out, _| {
                let mut da = g.clone();
                let axis = Axis(da.ndim() - 1);
                for (mut gl, pl) in da.lanes_mut(axis).into_iter().zip(out.lanes(axis)) {
                    let dot: f64 = gl.iter().zip(pl.iter()).map(|(gi, pi)| gi * pi).sum();
                    for (gi, pi) in gl.iter_mut().zip(pl.iter()) {
                        *gi = pi * (*gi - dot);
                    }
                }
                vec![da]
            })),
        )
    }

    pub fn log_softmax_last(&mut self, a: Var) -> Var {
        let mut value = self.nodes[a.0].value.clone();
        for mut lane in value.lanes_mut(Axis(value.ndim() - 1)) {
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = lane.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            lane.mapv_inplace(|x| x - lse);
        }
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|g, out, _| {
                let mut da = g.clone();
                let axis = Axis(da.ndim() - 1);
                for (mut gl, ol) in da.lanes_mut(axis).into_iter().zip(out.lanes(axis)) {
                    let gsum: f64 = gl.iter().sum();
                    for (gi, oi) in gl.iter_mut().zip(ol.iter()) {
                        *gi -= oi.exp() * gsum;
                    }
                }
                vec![da]
            })),
        )
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let c = *self.shape(a).last().unwrap();
        assert_eq!(self.shape(gamma), [c]);
        assert_eq!(self.shape(beta), [c]);
        let gv = self.nodes[gamma.0].value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let bv = self.nodes[beta.0].value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let mut value = self.nodes[a.0].value.clone();
        for mut lane in value.lanes_mut(Axis(value.ndim() - 1)) {
            let mean = lane.sum() / c as f64;
            let var = lane.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (x, (gi, bi)) in lane.iter_mut().zip(gv.iter().zip(bv.iter())) {
                *x = (*x - mean) * inv * gi + bi;
            }
        }
        self.push(
            value,
            vec![a.0, gamma.0, beta.0],
            Some(Box::new(move |g, _, pv| {
                let cn = c as f64;
                let x = pv[0];
                let gamma1 = pv[1].view().into_dimensionality::<Ix1>().unwrap();
                let axis = Axis(x.ndim() - 1);
                let mut dx = ArrD::zeros(x.raw_dim());
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                for ((xl, gl), mut dl) in x
                    .lanes(axis)
                    .into_iter()
                    .zip(g.lanes(axis))
                    .zip(dx.lanes_mut(axis))
                {
                    let mean = xl.sum() / cn;
                    let var = xl.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cn;
                    let inv = 1.0 / (var + eps).sqrt();
                    // xhat and dxhat for this lane
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    let xhat: Vec<f64> = xl.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = gl
                        .iter()
                        .zip(gamma1.iter())
                        .map(|(gi, ga)| gi * ga)
                        .collect();
                    for i in 0..c {
                        sum_dxhat += dxhat[i];
                        sum_dxhat_xhat += dxhat[i] * xhat[i];
                        dgamma[i] += gl[i] * xhat[i];
                        dbeta[i] += gl[i];
                    }
                    for i in 0..c {
                        dl[i] = inv * (dxhat[i] - sum_dxhat / cn - xhat[i] * sum_dxhat_xhat / cn);
                    }
                }
                vec![dx, dgamma.into_dyn(), dbeta.into_dyn()]
            })),
        )
    }

    /// Row-wise L2 normalization of a 2-d tensor.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().expect("2-d rows");
        let mut value = av.to_owned();
        for mut row in value.rows_mut() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            row.mapv_inplace(|x| x / norm);
        }
        self.push(
            value.into_dyn(),
            vec![a.0],
            Some(Box::new(|g, out, pv| {
                let x = pv[0].view().into_dimensionality::<Ix2>().unwrap();
                let y = out.view().into_dimensionality::<Ix2>().unwrap();
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array2::<f64>::zeros(x.raw_dim());
                for i in 0..x.shape()[0] {
                    let norm = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    let dot: f64 = g2.row(i).iter().zip(y.row(i).iter()).map(|(a, b)| a * b).sum();
                    for j in 0..x.shape()[1] {
                        dx[[i, j]] = (g2[[i, j]] - y[[i, j]] * dot) / norm;
                    }
                }
                vec![dx.into_dyn()]
            })),
        )
    }

    // ---- spatial ops (H, W, C layout) ----

    /// 3x3 same-padding convolution. `w` has shape `(9*c_in, c_out)` with row
    /// index `(ky*3 + kx)*c_in + ci`.
    pub fn conv3x3(&mut self, a: Var, w: Var) -> Var {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix3>().expect("conv input HWC");
        let (h, wd, cin) = av.dim();
        let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix2>().expect("conv weight 2-d");
        assert_eq!(wv.shape()[0], 9 * cin, "conv weight rows");
        let cout = wv.shape()[1];
        let cols = im2col3x3(&av.to_owned());
        let out2 = cols.dot(&wv);
        let value = out2.into_shape_with_order((h, wd, cout)).unwrap().into_dyn();
        self.push(
            value,
            vec![a.0, w.0],
            Some(Box::new(move |g, _, pv| {
                let x = pv[0].view().into_dimensionality::<Ix3>().unwrap().to_owned();
                let wm = pv[1].view().into_dimensionality::<Ix2>().unwrap();
                let (h, wd, cin) = x.dim();
                let cout = wm.shape()[1];
                let g2 = g
                    .view()
                    .into_dimensionality::<Ix3>()
                    .unwrap()
                    .to_owned()
                    .into_shape_with_order((h * wd, cout))
                    .unwrap();
                let cols = im2col3x3(&x);
                let dw = cols.t().dot(&g2);
                let dcols = g2.dot(&wm.t());
                let dx = col2im3x3(&dcols, h, wd, cin);
                vec![dx.into_dyn(), dw.into_dyn()]
            })),
        )
    }

    /// 2x2 average pooling; spatial dims must be even.
    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix3>().expect("pool input HWC");
        let (h, w, c) = av.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
        let mut out = ndarray::Array3::<f64>::zeros((h / 2, w / 2, c));
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                for k in 0..c {
                    out[[i, j, k]] = 0.25
                        * (av[[2 * i, 2 * j, k]]
                            + av[[2 * i + 1, 2 * j, k]]
                            + av[[2 * i, 2 * j + 1, k]]
                            + av[[2 * i + 1, 2 * j + 1, k]]);
                }
            }
        }
        self.push(
            out.into_dyn(),
            vec![a.0],
            Some(Box::new(move |g, _, _| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let (oh, ow, c) = g3.dim();
                let mut dx = ndarray::Array3::<f64>::zeros((oh * 2, ow * 2, c));
                for i in 0..oh {
                    for j in 0..ow {
                        for k in 0..c {
                            let v = 0.25 * g3[[i, j, k]];
                            dx[[2 * i, 2 * j, k]] = v;
                            dx[[2 * i + 1, 2 * j, k]] = v;
                            dx[[2 * i, 2 * j + 1, k]] = v;
                            dx[[2 * i + 1, 2 * j + 1, k]] = v;
                        }
                    }
                }
                vec![dx.into_dyn()]
            })),
        )
    }

    /// 2x bilinear upsampling with half-pixel centers.
    pub fn upsample2_bilinear(&mut self, a: Var) -> Var {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix3>().expect("upsample HWC");
        let (h, w, c) = av.dim();
        let ty = bilinear2_taps(2 * h);
        let tx = bilinear2_taps(2 * w);
        let mut out = ndarray::Array3::<f64>::zeros((2 * h, 2 * w, c));
        for (i, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (j, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                for k in 0..c {
                    out[[i, j, k]] = wy0 * wx0 * av[[y0, x0, k]]
                        + wy0 * wx1 * av[[y0, x1, k]]
                        + wy1 * wx0 * av[[y1, x0, k]]
                        + wy1 * wx1 * av[[y1, x1, k]];
                }
            }
        }
        self.push(
            out.into_dyn(),
            vec![a.0],
            Some(Box::new(move |g, _, pv| {
                let (h, w, c) = pv[0].view().into_dimensionality::<Ix3>().unwrap().dim();
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let ty = bilinear2_taps(2 * h);
                let tx = bilinear2_taps(2 * w);
                let mut dx = ndarray::Array3::<f64>::zeros((h, w, c));
                for (i, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    for (j, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        for k in 0..c {
                            let gv = g3[[i, j, k]];
                            dx[[y0, x0, k]] += wy0 * wx0 * gv;
                            dx[[y0, x1, k]] += wy0 * wx1 * gv;
                            dx[[y1, x0, k]] += wy1 * wx0 * gv;
                            dx[[y1, x1, k]] += wy1 * wx1 * gv;
                        }
                    }
                }
                vec![dx.into_dyn()]
            })),
        )
    }

    // ---- attention ----

    /// Fused multi-head scaled-dot-product attention on already-projected
    /// `q (Tq,C)`, `k (Tk,C)`, `v (Tk,C)`. Per-head score matrices are kept
    /// only while gradients are enabled; in inference mode rows stream in
    /// blocks so the `Tq x Tk` matrix is never materialized.
    pub fn multihead_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, scale: f64) -> Var {
        let qv = self.nodes[q.0].value.view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let kv = self.nodes[k.0].value.view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let vv = self.nodes[v.0].value.view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let (tq, c) = qv.dim();
        let tk = kv.shape()[0];
        assert_eq!(kv.shape()[1], c);
        assert_eq!(vv.dim(), (tk, c));
        assert!(c % heads == 0, "heads must divide channel width");
        let d = c / heads;

        let mut out = Array2::<f64>::zeros((tq, c));
        let mut probs: Vec<Array2<f64>> = Vec::new();
        for hidx in 0..heads {
            let cols = hidx * d..(hidx + 1) * d;
            let qh = qv.slice(ndarray::s![.., cols.clone()]);
            let kh = kv.slice(ndarray::s![.., cols.clone()]);
            let vh = vv.slice(ndarray::s![.., cols.clone()]);
            if self.grad_enabled {
                let mut s = qh.dot(&kh.t());
                s.mapv_inplace(|x| x * scale);
                softmax_rows_inplace(&mut s);
                let oh = s.dot(&vh);
                out.slice_mut(ndarray::s![.., cols]).assign(&oh);
                probs.push(s);
            } else {
                let block = 256usize;
                let mut r0 = 0;
                while r0 < tq {
                    let r1 = (r0 + block).min(tq);
                    let mut s = qh.slice(ndarray::s![r0..r1, ..]).dot(&kh.t());
                    s.mapv_inplace(|x| x * scale);
                    softmax_rows_inplace(&mut s);
                    let oh = s.dot(&vh);
                    out.slice_mut(ndarray::s![r0..r1, cols.clone()]).assign(&oh);
                    r0 = r1;
                }
            }
        }

        self.push(
            out.into_dyn(),
            vec![q.0, k.0, v.0],
            Some(Box::new(move |g, _, pv| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let qm = pv[0].view().into_dimensionality::<Ix2>().unwrap();
                let km = pv[1].view().into_dimensionality::<Ix2>().unwrap();
                let vm = pv[2].view().into_dimensionality::<Ix2>().unwrap();
                let (tq, c) = (qm.shape()[0], qm.shape()[1]);
                let tk = km.shape()[0];
                let d = c / heads;
                let mut dq = Array2::<f64>::zeros((tq, c));
                let mut dk = Array2::<f64>::zeros((tk, c));
                let mut dv = Array2::<f64>::zeros((tk, c));
                for hidx in 0..heads {
                    let cols = hidx * d..(hidx + 1) * d;
                    let p = &probs[hidx];
                    let go = g2.slice(ndarray::s![.., cols.clone()]);
                    let vh = vm.slice(ndarray::s![.., cols.clone()]);
                    let qh = qm.slice(ndarray::s![.., cols.clone()]);
                    let kh = km.slice(ndarray::s![.., cols.clone()]);
                    // dV = P^T dO
                    dv.slice_mut(ndarray::s![.., cols.clone()]).assign(&p.t().dot(&go));
                    // dP = dO V^T ; dS = P * (dP - rowsum(dP*P))
                    let mut ds = go.dot(&vh.t());
                    for (mut ds_row, p_row) in ds.rows_mut().into_iter().zip(p.rows()) {
                        let dot: f64 =
                            ds_row.iter().zip(p_row.iter()).map(|(a, b)| a * b).sum();
                        for (dsi, pi) in ds_row.iter_mut().zip(p_row.iter()) {
                            *dsi = pi * (*dsi - dot);
                        }
                    }
                    ds.mapv_inplace(|x| x * scale);
                    dq.slice_mut(ndarray::s![.., cols.clone()]).assign(&ds.dot(&kh));
                    dk.slice_mut(ndarray::s![.., cols]).assign(&ds.t().dot(&qh));
                }
                vec![dq.into_dyn(), dk.into_dyn(), dv.into_dyn()]
            })),
        )
    }
}

trait IndexAxisRange {
    fn index_axis_range(&self, axis: Axis, range: std::ops::Range<usize>) -> ArrD;
}

impl IndexAxisRange for ArrD {
    fn index_axis_range(&self, axis: Axis, range: std::ops::Range<usize>) -> ArrD {
        self.slice_axis(axis, ndarray::Slice::from(range)).to_owned()
    }
}

fn im2col3x3(x: &ndarray::Array3<f64>) -> Array2<f64> {
    let (h, w, cin) = x.dim();
    let mut cols = Array2::<f64>::zeros((h * w, 9 * cin));
    for y in 0..h {
        for xx in 0..w {
            let row = y * w + xx;
            for ky in 0..3usize {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3usize {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let base = (ky * 3 + kx) * cin;
                    for ci in 0..cin {
                        cols[[row, base + ci]] = x[[sy as usize, sx as usize, ci]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im3x3(dcols: &Array2<f64>, h: usize, w: usize, cin: usize) -> ndarray::Array3<f64> {
    let mut dx = ndarray::Array3::<f64>::zeros((h, w, cin));
    for y in 0..h {
        for xx in 0..w {
            let row = y * w + xx;
            for ky in 0..3usize {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3usize {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let base = (ky * 3 + kx) * cin;
                    for ci in 0..cin {
                        dx[[sy as usize, sx as usize, ci]] += dcols[[row, base + ci]];
                    }
                }
            }
        }
    }
    dx
}

/// Relative error with an absolute floor, for gradient checks.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[allow(dead_code)]
pub fn finite_diff<F: FnMut(&ArrD) -> f64>(x: &ArrD, mut f: F, eps: f64) -> ArrD {
    let mut g = ArrD::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let flat = x.as_slice().unwrap()[idx];
        xp.as_slice_mut().unwrap()[idx] = flat + eps;
        let fp = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = flat - eps;
        let fm = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = flat;
        g.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * eps);
    }
    g
}

#[allow(dead_code)]
pub fn arr_view_to_owned(v: ArrayViewD<f64>) -> ArrD {
    v.to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array, IxDyn};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrD {
        Array::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Check analytic gradients of `build` against central differences on
    /// every leaf, at a given tolerance.
    fn grad_check(
        shapes: &[&[usize]],
        build: impl Fn(&mut Graph, &[Var]) -> Var,
        tol: f64,
        seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leaves: Vec<ArrD> = shapes.iter().map(|s| randn(s, &mut rng)).collect();

        let mut g = Graph::new(true);
        let vars: Vec<Var> = leaves.iter().map(|l| g.constant(l.clone())).collect();
        let loss = build(&mut g, &vars);
        let mut grads = g.backward(loss);

        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.take(vars[li]).unwrap_or_else(|| ArrD::zeros(leaf.raw_dim()));
            let numeric = finite_diff(
                leaf,
                |x| {
                    let mut g2 = Graph::new(false);
                    let vars2: Vec<Var> = leaves
                        .iter()
                        .enumerate()
                        .map(|(j, l)| g2.constant(if j == li { x.clone() } else { l.clone() }))
                        .collect();
                    let l2 = build(&mut g2, &vars2);
                    g2.scalar(l2)
                },
                1e-6,
            );
            for (a, n) in analytic.iter().zip(numeric.iter()) {
                if a.abs() < 1e-7 && n.abs() < 1e-7 {
                    continue; // below finite-difference resolution
                }
                let e = rel_err(*a, *n, 1e-6);
                assert!(e < tol, "leaf {li}: analytic {a} vs numeric {n} (rel {e})");
            }
        }
    }

    #[test]
    fn elementwise_ops_gradients() {
        grad_check(
            &[&[3, 4], &[3, 4]],
            |g, v| {
                let s = g.add(v[0], v[1]);
                let m = g.mul(s, v[0]);
                let r = g.relu(m);
                let a = g.affine(r, 2.0, 0.3);
                g.mean_all(a)
            },
            1e-6,
            1,
        );
    }

    #[test]
    fn div_and_pow_gradients() {
        grad_check(
            &[&[5], &[5]],
            |g, v| {
                let shifted = g.affine(v[1], 0.25, 3.0); // keep divisor away from zero
                let d = g.div_elem(v[0], shifted);
                let c = g.clamp(d, -10.0, 10.0);
                let pos = g.affine(c, 0.2, 1.5);
                let sq = g.powf_const(pos, 2.0);
                g.sum_all(sq)
            },
            1e-6,
            2,
        );
    }

    #[test]
    fn matmul_and_bias_gradients() {
        grad_check(
            &[&[4, 3], &[3, 5], &[5], &[4]],
            |g, v| {
                let mm = g.matmul(v[0], v[1]);
                let b = g.add_bias_last(mm, v[2]);
                let r = g.add_bias_rows(b, v[3]);
                let t = g.transpose2(r);
                g.mean_all(t)
            },
            1e-6,
            3,
        );
    }

    #[test]
    fn softmax_and_logsoftmax_gradients() {
        grad_check(
            &[&[4, 6]],
            |g, v| {
                let p = g.softmax_last(v[0]);
                let lp = g.log_softmax_last(v[0]);
                let m = g.mul(p, lp);
                g.sum_all(m)
            },
            1e-5,
            4,
        );
    }

    #[test]
    fn layer_norm_gradient() {
        grad_check(
            &[&[3, 8], &[8], &[8]],
            |g, v| {
                let ln = g.layer_norm(v[0], v[1], v[2], 1e-5);
                let sq = g.mul(ln, ln);
                g.mean_all(sq)
            },
            1e-5,
            5,
        );
    }

    #[test]
    fn l2_normalize_gradient() {
        grad_check(
            &[&[3, 5]],
            |g, v| {
                let shifted = g.affine(v[0], 1.0, 0.7); // keep rows away from zero norm
                let n = g.l2_normalize_rows(shifted);
                let w = g.constant(Array::from_shape_fn(IxDyn(&[3, 5]), |ix| {
                    0.1 * (ix[0] as f64 + 1.0) + 0.3 * ix[1] as f64
                }));
                let m = g.mul(n, w);
                g.sum_all(m)
            },
            1e-5,
            6,
        );
    }

    #[test]
    fn conv_pool_upsample_gradients() {
        grad_check(
            &[&[4, 4, 2], &[18, 3]],
            |g, v| {
                let c = g.conv3x3(v[0], v[1]);
                let p = g.avg_pool2(c);
                let u = g.upsample2_bilinear(p);
                let sq = g.mul(u, u);
                g.mean_all(sq)
            },
            1e-5,
            7,
        );
    }

    #[test]
    fn attention_gradient() {
        grad_check(
            &[&[5, 8], &[7, 8], &[7, 8]],
            |g, v| {
                let o = g.multihead_attention(v[0], v[1], v[2], 2, 0.5);
                let sq = g.mul(o, o);
                g.mean_all(sq)
            },
            1e-5,
            8,
        );
    }

    #[test]
    fn attention_streaming_matches_recorded() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = randn(&[300, 8], &mut rng);
        let k = randn(&[300, 8], &mut rng);
        let v = randn(&[300, 8], &mut rng);
        let run = |grad: bool| {
            let mut g = Graph::new(grad);
            let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
            let o = g.multihead_attention(qv, kv, vv, 2, 0.3);
            g.value(o).clone()
        };
        let a = run(true);
        let b = run(false);
        let max_diff =
            a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0f64, f64::max);
        assert!(max_diff < 1e-12, "streaming attention diverged: {max_diff}");
    }

    #[test]
    fn attention_rows_sum_to_one_via_uniform_value() {
        // With V = all-ones, attention output must be exactly all-ones for
        // any scores, because softmax rows sum to 1.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let q = randn(&[6, 4], &mut rng);
        let k = randn(&[9, 4], &mut rng);
        let v = ArrD::from_elem(IxDyn(&[9, 4]), 1.0);
        let mut g = Graph::new(false);
        let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v));
        let o = g.multihead_attention(qv, kv, vv, 2, 1.0);
        for x in g.value(o).iter() {
            assert!((x - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn concat_slice_sum_gradients() {
        grad_check(
            &[&[3, 4], &[3, 2]],
            |g, v| {
                let c = g.concat_last(v[0], v[1]);
                let s = g.slice_rows(c, 1, 3);
                let sc = g.slice_cols(s, 1, 5);
                let sa = g.sum_axis2(sc, 0);
                let sq = g.mul(sa, sa);
                g.sum_all(sq)
            },
            1e-6,
            9,
        );
    }

    #[test]
    fn scalar_var_and_div_rows_gradients() {
        grad_check(
            &[&[4, 3], &[], &[4]],
            |g, v| {
                let scaled = g.mul_scalar_var(v[0], v[1]);
                let denom = g.affine(v[2], 0.3, 2.5);
                let d = g.div_rows(scaled, denom);
                let dsq = g.mul(d, d);
                let shifted = g.affine(dsq, 1.0, 0.5);
                let lg = g.log(shifted);
                g.mean_all(lg)
            },
            1e-5,
            10,
        );
    }

    #[test]
    fn backward_accumulates_shared_nodes() {
        // f = x*x + x  => df/dx = 2x + 1
        let mut g = Graph::new(true);
        let x = g.constant(ArrD::from_elem(IxDyn(&[2]), 1.5));
        let sq = g.mul(x, x);
        let s = g.add(sq, x);
        let loss = g.sum_all(s);
        let mut grads = g.backward(loss);
        let dx = grads.take(x).unwrap();
        for v in dx.iter() {
            assert!((v - 4.0).abs() < 1e-12);
        }
    }
}
