//! Minimal reverse-mode autodiff on `ndarray` tensors.
//!
//! A [`Tape`] records an eager compute graph; [`Tape::backward`] walks it in
//! reverse, accumulating gradients. Ops are monomorphic f64 kernels chosen
//! for this model family: dense matmul, 1-D strided convolution, recurrent
//! gate math, gather/scatter for contrastive candidate sets, and fused
//! stable cross-entropy heads.
//!
//! Nodes whose inputs are all constants skip gradient tracking entirely, so
//! data-only branches cost no backward work.

use ndarray::{s, Array1, Array2, Array3, ArrayD, Axis, Ix1, Ix2, Ix3};

use crate::error::{Error, Result};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn =
    Box<dyn Fn(&ArrayD<f64>, &[&ArrayD<f64>], &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>>>;

struct Node {
    value: ArrayD<f64>,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

/// Gradients indexed by [`Var`], produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, var: Var) -> &ArrayD<f64> {
        &self.nodes[var.0].value
    }

    pub fn scalar(&self, var: Var) -> f64 {
        let v = self.value(var);
        debug_assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        *v.iter().next().expect("non-empty")
    }

    fn push(&mut self, value: ArrayD<f64>, parents: Vec<Var>, backward: Option<BackwardFn>) -> Var {
        let needs_grad = backward.is_some() && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let node = Node {
            value,
            parents,
            backward: if needs_grad { backward } else { None },
            needs_grad,
        };
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Data input; no gradient tracked.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        let node = Node {
            value,
            parents: Vec::new(),
            backward: None,
            needs_grad: false,
        };
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; collects gradient.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        let node = Node {
            value,
            parents: Vec::new(),
            backward: None,
            needs_grad: true,
        };
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));
        for i in (0..=root.0).rev() {
            let Some(grad) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.backward {
                Some(f) => {
                    let parent_values: Vec<&ArrayD<f64>> =
                        node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                    let parent_grads = f(&grad, &parent_values, &node.value);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (parent, pg) in node.parents.iter().zip(parent_grads) {
                        if let Some(pg) = pg {
                            if self.nodes[parent.0].needs_grad {
                                match &mut grads[parent.0] {
                                    Some(acc) => *acc += &pg,
                                    slot @ None => *slot = Some(pg),
                                }
                            }
                        }
                    }
                }
                // Leaves keep their accumulated gradient.
                None => grads[i] = Some(grad),
            }
        }
        Gradients { grads }
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = self.value(a) + self.value(b);
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, _, _| {
                vec![Some(g.clone()), Some(g.clone())]
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = self.value(a) - self.value(b);
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, _, _| vec![Some(g.clone()), Some(-g)])),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = self.value(a) * self.value(b);
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, pv, _| {
                vec![Some(g * pv[1]), Some(g * pv[0])]
            })),
        )
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).mapv(|v| v * k);
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, _, _| vec![Some(g.mapv(|v| v * k))])),
        )
    }

    /// Elementwise product with a fixed mask (e.g. a threshold gate).
    pub fn mul_mask(&mut self, a: Var, mask: ArrayD<f64>) -> Var {
        debug_assert_eq!(self.value(a).shape(), mask.shape());
        let value = self.value(a) * &mask;
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, _, _| vec![Some(g * &mask)])),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v.max(0.0));
        self.push(
            value,
            vec![a],
            Some(Box::new(|g, pv, _| {
                let mut out = g.clone();
                out.zip_mut_with(pv[0], |gv, &x| {
                    if x <= 0.0 {
                        *gv = 0.0;
                    }
                });
                vec![Some(out)]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(
            value,
            vec![a],
            Some(Box::new(|g, _, out| {
                let mut dx = g.clone();
                dx.zip_mut_with(out, |gv, &y| *gv *= y * (1.0 - y));
                vec![Some(dx)]
            })),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(
            value,
            vec![a],
            Some(Box::new(|g, _, out| {
                let mut dx = g.clone();
                dx.zip_mut_with(out, |gv, &y| *gv *= 1.0 - y * y);
                vec![Some(dx)]
            })),
        )
    }

    /// Numerically stable `ln(1 + exp(x))`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus);
        self.push(
            value,
            vec![a],
            Some(Box::new(|g, pv, _| {
                let mut dx = g.clone();
                dx.zip_mut_with(pv[0], |gv, &x| *gv *= sigmoid(x));
                vec![Some(dx)]
            })),
        )
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = ndarray::arr0(self.value(a).sum()).into_dyn();
        let shape = self.value(a).raw_dim();
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, _, _| {
                let gv = g.iter().next().copied().unwrap_or(0.0);
                vec![Some(ArrayD::from_elem(shape.clone(), gv))]
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    // ---- linear algebra --------------------------------------------------

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        debug_assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims");
        let value = av.dot(&bv).into_dyn();
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, pv, _| {
                let gm = as2(g);
                let a = as2(pv[0]);
                let b = as2(pv[1]);
                let da = gm.dot(&b.t()).into_dyn();
                let db = a.t().dot(&gm).into_dyn();
                vec![Some(da), Some(db)]
            })),
        )
    }

    /// `[rows, cols] + [cols]` broadcast add.
    pub fn add_bias(&mut self, m: Var, bias: Var) -> Var {
        let mv = as2(self.value(m));
        let bv = as1(self.value(bias));
        debug_assert_eq!(mv.ncols(), bv.len());
        let value = (&mv + &bv).into_dyn();
        self.push(
            value,
            vec![m, bias],
            Some(Box::new(|g, _, _| {
                let gm = as2(g);
                let db = gm.sum_axis(Axis(0)).into_dyn();
                vec![Some(g.clone()), Some(db)]
            })),
        )
    }

    /// `[batch, channels, len] + [channels]` broadcast add.
    pub fn add_bias_channels(&mut self, x: Var, bias: Var) -> Var {
        let xv = as3(self.value(x));
        let bv = as1(self.value(bias));
        debug_assert_eq!(xv.dim().1, bv.len());
        let mut value = xv.to_owned();
        for c in 0..bv.len() {
            value.slice_mut(s![.., c, ..]).mapv_inplace(|v| v + bv[c]);
        }
        self.push(
            value.into_dyn(),
            vec![x, bias],
            Some(Box::new(|g, pv, _| {
                let gm = as3(g);
                let channels = as3(pv[0]).dim().1;
                let mut db = Array1::zeros(channels);
                for c in 0..channels {
                    db[c] = gm.slice(s![.., c, ..]).sum();
                }
                vec![Some(g.clone()), Some(db.into_dyn())]
            })),
        )
    }

    // ---- shape ops ---------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let orig = self.value(a).raw_dim();
        let value = self
            .value(a)
            .clone()
            .into_shape_with_order(shape)
            .expect("reshape length mismatch")
            .into_dyn();
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, _, _| {
                let back = g
                    .clone()
                    .into_shape_with_order(orig.clone())
                    .expect("reshape grad");
                vec![Some(back)]
            })),
        )
    }

    /// Permute a 3-D tensor's axes.
    pub fn permute3(&mut self, a: Var, axes: [usize; 3]) -> Var {
        let value = as3(self.value(a))
            .to_owned()
            .permuted_axes(axes)
            .as_standard_layout()
            .to_owned()
            .into_dyn();
        let mut inverse = [0usize; 3];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, _, _| {
                let back = as3(g)
                    .to_owned()
                    .permuted_axes(inverse)
                    .as_standard_layout()
                    .to_owned()
                    .into_dyn();
                vec![Some(back)]
            })),
        )
    }

    /// Column range of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = as2(self.value(a))
            .slice(s![.., start..start + len])
            .to_owned()
            .into_dyn();
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, pv, _| {
                let mut da = Array2::zeros(as2(pv[0]).dim());
                da.slice_mut(s![.., start..start + len]).assign(&as2(g));
                vec![Some(da.into_dyn())]
            })),
        )
    }

    /// Contiguous row range of a 2-D tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = as2(self.value(a))
            .slice(s![start..start + len, ..])
            .to_owned()
            .into_dyn();
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, pv, _| {
                let mut da = Array2::zeros(as2(pv[0]).dim());
                da.slice_mut(s![start..start + len, ..]).assign(&as2(g));
                vec![Some(da.into_dyn())]
            })),
        )
    }

    /// Time slice `[batch, features, time] -> [batch, features]`.
    pub fn slice_time(&mut self, a: Var, t: usize) -> Var {
        let value = as3(self.value(a))
            .index_axis(Axis(2), t)
            .to_owned()
            .into_dyn();
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, pv, _| {
                let mut da = Array3::zeros(as3(pv[0]).dim());
                da.index_axis_mut(Axis(2), t).assign(&as2(g));
                vec![Some(da.into_dyn())]
            })),
        )
    }

    /// Horizontal concatenation of two 2-D tensors.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        debug_assert_eq!(av.nrows(), bv.nrows());
        let ca = av.ncols();
        let value = ndarray::concatenate(Axis(1), &[av.view(), bv.view()])
            .expect("concat_cols")
            .into_dyn();
        self.push(
            value,
            vec![a, b],
            Some(Box::new(move |g, _, _| {
                let gm = as2(g);
                let da = gm.slice(s![.., ..ca]).to_owned().into_dyn();
                let db = gm.slice(s![.., ca..]).to_owned().into_dyn();
                vec![Some(da), Some(db)]
            })),
        )
    }

    /// Vertical concatenation of 2-D tensors.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<Array2<f64>> = parts.iter().map(|&p| as2(self.value(p))).collect();
        let view_refs: Vec<_> = views.iter().map(|v| v.view()).collect();
        let value = ndarray::concatenate(Axis(0), &view_refs)
            .expect("concat_rows")
            .into_dyn();
        let row_counts: Vec<usize> = views.iter().map(|v| v.nrows()).collect();
        self.push(
            value,
            parts.to_vec(),
            Some(Box::new(move |g, _, _| {
                let gm = as2(g);
                let mut out = Vec::with_capacity(row_counts.len());
                let mut offset = 0;
                for &rows in &row_counts {
                    out.push(Some(
                        gm.slice(s![offset..offset + rows, ..]).to_owned().into_dyn(),
                    ));
                    offset += rows;
                }
                out
            })),
        )
    }

    /// Row gather: `out[k] = src[idx[k]]`. Backward scatter-adds.
    pub fn gather_rows(&mut self, src: Var, idx: Vec<usize>) -> Var {
        let sv = as2(self.value(src));
        let cols = sv.ncols();
        let mut value = Array2::zeros((idx.len(), cols));
        for (k, &i) in idx.iter().enumerate() {
            value.row_mut(k).assign(&sv.row(i));
        }
        self.push(
            value.into_dyn(),
            vec![src],
            Some(Box::new(move |g, pv, _| {
                let gm = as2(g);
                let mut da = Array2::zeros(as2(pv[0]).dim());
                for (k, &i) in idx.iter().enumerate() {
                    let mut row = da.row_mut(i);
                    row += &gm.row(k);
                }
                vec![Some(da.into_dyn())]
            })),
        )
    }

    /// Candidate-set logits: `out[r, n] = dot(u[r], z[idx[r * n_cand + n]])`.
    pub fn gathered_dot(&mut self, u: Var, z: Var, idx: Vec<usize>, n_cand: usize) -> Var {
        let uv = as2(self.value(u));
        let zv = as2(self.value(z));
        let rows = uv.nrows();
        debug_assert_eq!(idx.len(), rows * n_cand);
        let mut value = Array2::zeros((rows, n_cand));
        for r in 0..rows {
            let ur = uv.row(r);
            for n in 0..n_cand {
                value[[r, n]] = ur.dot(&zv.row(idx[r * n_cand + n]));
            }
        }
        self.push(
            value.into_dyn(),
            vec![u, z],
            Some(Box::new(move |g, pv, _| {
                let gm = as2(g);
                let uv = as2(pv[0]);
                let zv = as2(pv[1]);
                let mut du = Array2::zeros(uv.dim());
                let mut dz = Array2::zeros(zv.dim());
                for r in 0..uv.nrows() {
                    for n in 0..n_cand {
                        let gv = gm[[r, n]];
                        if gv == 0.0 {
                            continue;
                        }
                        let i = idx[r * n_cand + n];
                        let mut du_r = du.row_mut(r);
                        du_r.scaled_add(gv, &zv.row(i));
                        let mut dz_i = dz.row_mut(i);
                        dz_i.scaled_add(gv, &uv.row(r));
                    }
                }
                vec![Some(du.into_dyn()), Some(dz.into_dyn())]
            })),
        )
    }

    /// Row-wise softmax (used by the attention block).
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = as2(self.value(a));
        let mut value = av.to_owned();
        for mut row in value.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        self.push(
            value.into_dyn(),
            vec![a],
            Some(Box::new(|g, _, out| {
                let gm = as2(g);
                let y = as2(out);
                let mut dx = &gm * &y;
                for (mut dr, yr) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f64 = dr.sum();
                    dr.zip_mut_with(&yr, |d, &yv| *d -= dot * yv);
                }
                vec![Some(dx.into_dyn())]
            })),
        )
    }

    /// Fused per-row softmax cross-entropy against an index target.
    pub fn softmax_xent_rows(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let lv = as2(self.value(logits));
        debug_assert_eq!(lv.nrows(), targets.len());
        let mut value = Array1::zeros(lv.nrows());
        for (r, row) in lv.rows().into_iter().enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            value[r] = lse - row[targets[r]];
        }
        self.push(
            value.into_dyn(),
            vec![logits],
            Some(Box::new(move |g, pv, _| {
                let gv = as1(g);
                let lv = as2(pv[0]);
                let mut dx = Array2::zeros(lv.dim());
                for (r, row) in lv.rows().into_iter().enumerate() {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for (n, &e) in exps.iter().enumerate() {
                        let p = e / sum;
                        dx[[r, n]] = gv[r] * (p - f64::from(u8::from(n == targets[r])));
                    }
                }
                vec![Some(dx.into_dyn())]
            })),
        )
    }

    /// Fused per-element binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, logits: Var, labels: Array1<f64>) -> Var {
        let lv = as1(self.value(logits));
        debug_assert_eq!(lv.len(), labels.len());
        let mut value = Array1::zeros(lv.len());
        for (k, (&x, &y)) in lv.iter().zip(labels.iter()).enumerate() {
            value[k] = x.max(0.0) - x * y + softplus(-x.abs());
        }
        self.push(
            value.into_dyn(),
            vec![logits],
            Some(Box::new(move |g, pv, _| {
                let gv = as1(g);
                let lv = as1(pv[0]);
                let mut dx = Array1::zeros(lv.len());
                for k in 0..lv.len() {
                    dx[k] = gv[k] * (sigmoid(lv[k]) - labels[k]);
                }
                vec![Some(dx.into_dyn())]
            })),
        )
    }

    /// Neighbor-normalized adjacency rows, self-weights excluded:
    /// `out[i, j] = w[i, j] / sum_j w[i, j]` with `w[i, j] = a[i, j]` for
    /// `j != i` and `w[i, i] = 0`. Rows with zero total stay all-zero.
    pub fn row_normalize_no_diag(&mut self, a: Var) -> Var {
        let av = as2(self.value(a));
        let n = av.nrows();
        debug_assert_eq!(n, av.ncols());
        let mut value = Array2::zeros((n, n));
        let mut sums = Array1::zeros(n);
        for i in 0..n {
            let s: f64 = (0..n).filter(|&j| j != i).map(|j| av[[i, j]]).sum();
            sums[i] = s;
            if s != 0.0 {
                for j in 0..n {
                    if j != i {
                        value[[i, j]] = av[[i, j]] / s;
                    }
                }
            }
        }
        self.push(
            value.into_dyn(),
            vec![a],
            Some(Box::new(move |g, pv, out| {
                let gm = as2(g);
                let av = as2(pv[0]);
                let y = as2(out);
                let n = av.nrows();
                let mut da = Array2::zeros((n, n));
                for i in 0..n {
                    let s = sums[i];
                    if s == 0.0 {
                        continue;
                    }
                    let dot: f64 = (0..n).filter(|&j| j != i).map(|j| gm[[i, j]] * y[[i, j]]).sum();
                    for j in 0..n {
                        if j != i {
                            da[[i, j]] = (gm[[i, j]] - dot) / s;
                        }
                    }
                }
                vec![Some(da.into_dyn())]
            })),
        )
    }

    /// 1-D convolution over `[batch, in_ch, len]` with
    /// `weight [out_ch, in_ch, kernel]`, zero padding `(pad_left, pad_right)`.
    pub fn conv1d(
        &mut self,
        x: Var,
        weight: Var,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Var {
        let xv = as3(self.value(x));
        let wv = as3(self.value(weight));
        let (batch, in_ch, len) = xv.dim();
        let (out_ch, w_in_ch, kernel) = wv.dim();
        assert_eq!(in_ch, w_in_ch, "conv1d channel mismatch");
        let padded = len + pad_left + pad_right;
        assert!(padded >= kernel, "conv1d input shorter than kernel");
        let out_len = (padded - kernel) / stride + 1;

        let cols = im2col(&xv, kernel, stride, pad_left, out_len);
        let wmat = wv
            .to_owned()
            .into_shape_with_order((out_ch, in_ch * kernel))
            .expect("conv weight reshape");
        // [batch * out_len, out_ch] -> [batch, out_ch, out_len]
        let flat = cols.dot(&wmat.t());
        let mut value = Array3::zeros((batch, out_ch, out_len));
        for b in 0..batch {
            for t in 0..out_len {
                let row = flat.row(b * out_len + t);
                for o in 0..out_ch {
                    value[[b, o, t]] = row[o];
                }
            }
        }
        self.push(
            value.into_dyn(),
            vec![x, weight],
            Some(Box::new(move |g, pv, _| {
                let gm = as3(g);
                let xv = as3(pv[0]);
                let wv = as3(pv[1]);
                let (batch, in_ch, len) = xv.dim();
                let (out_ch, _, kernel) = wv.dim();
                let out_len = gm.dim().2;

                // Flatten upstream grad to [batch * out_len, out_ch].
                let mut gflat = Array2::zeros((batch * out_len, out_ch));
                for b in 0..batch {
                    for t in 0..out_len {
                        for o in 0..out_ch {
                            gflat[[b * out_len + t, o]] = gm[[b, o, t]];
                        }
                    }
                }
                let cols = im2col(&xv, kernel, stride, pad_left, out_len);
                let wmat = wv
                    .to_owned()
                    .into_shape_with_order((out_ch, in_ch * kernel))
                    .expect("conv weight reshape");

                let dw_mat = gflat.t().dot(&cols);
                let dw = dw_mat
                    .into_shape_with_order((out_ch, in_ch, kernel))
                    .expect("conv dw reshape")
                    .into_dyn();

                let dcols = gflat.dot(&wmat);
                let mut dx = Array3::zeros((batch, in_ch, len));
                for b in 0..batch {
                    for t in 0..out_len {
                        let row = dcols.row(b * out_len + t);
                        for ic in 0..in_ch {
                            for k in 0..kernel {
                                let pos = t * stride + k;
                                if pos >= pad_left && pos - pad_left < len {
                                    dx[[b, ic, pos - pad_left]] += row[ic * kernel + k];
                                }
                            }
                        }
                    }
                }
                vec![Some(dx.into_dyn()), Some(dw)]
            })),
        )
    }
}

fn im2col(
    x: &Array3<f64>,
    kernel: usize,
    stride: usize,
    pad_left: usize,
    out_len: usize,
) -> Array2<f64> {
    let (batch, in_ch, len) = x.dim();
    let mut cols = Array2::zeros((batch * out_len, in_ch * kernel));
    for b in 0..batch {
        for t in 0..out_len {
            let row = b * out_len + t;
            for ic in 0..in_ch {
                for k in 0..kernel {
                    let pos = t * stride + k;
                    if pos >= pad_left && pos - pad_left < len {
                        cols[[row, ic * kernel + k]] = x[[b, ic, pos - pad_left]];
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn as1(a: &ArrayD<f64>) -> Array1<f64> {
    a.view()
        .into_dimensionality::<Ix1>()
        .expect("expected 1-D tensor")
        .to_owned()
}

fn as2(a: &ArrayD<f64>) -> Array2<f64> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("expected 2-D tensor")
        .to_owned()
}

fn as3(a: &ArrayD<f64>) -> Array3<f64> {
    a.view()
        .into_dimensionality::<Ix3>()
        .expect("expected 3-D tensor")
        .to_owned()
}

/// Check that a logit tensor is finite before it reaches a loss.
pub fn ensure_finite(tape: &Tape, var: Var, context: &str) -> Result<()> {
    if tape.value(var).iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: context.to_string(),
        })
    }
}
