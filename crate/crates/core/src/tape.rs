//! Minimal reverse-mode autodiff over `ndarray` values.
//!
//! The trainable head is small but structurally irregular (convs, attention,
//! point sampling, masked pooling, a contrastive loss over per-image scalar
//! grids), so instead of hand-deriving one giant backward pass the crate
//! records ops on a tape and replays them in reverse. Values are `f64`
//! throughout — central finite differences are used as the gradient oracle
//! in tests and need the headroom.
//!
//! Conventions:
//! * a [`Var`] is an index into the tape arena; leaves are created with
//!   [`Tape::var`] and everything else by op methods;
//! * scalars are 0-dim arrays (`shape []`);
//! * feature maps are `[C, H, W]`, token matrices `[T, D]`;
//! * bilinear resampling matches [`crate::nn`] (half-pixel centers, edge
//!   clamp), so frozen and trainable paths agree on geometry.

use ndarray::{ArrayD, IxDyn};
use std::cell::RefCell;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&ArrayD<f64>, &[&ArrayD<f64>], &ArrayD<f64>) -> Vec<ArrayD<f64>>>;

struct Node {
    value: ArrayD<f64>,
    parents: Vec<usize>,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Result of a backward pass: one gradient slot per tape node.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` if the loss does not
    /// depend on it.
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Like [`Gradients::get`] but materializes zeros for unused leaves.
    pub fn wrt(&self, tape: &Tape, v: Var) -> ArrayD<f64> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| ArrayD::zeros(tape.shape(v)))
    }
}

fn scalar(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Create a leaf node (parameter or constant — the caller keeps track of
    /// which leaves it wants gradients for).
    pub fn var(&self, value: ArrayD<f64>) -> Var {
        self.push(value, vec![], None)
    }

    /// Leaf scalar.
    pub fn scalar(&self, v: f64) -> Var {
        self.var(scalar(v))
    }

    pub fn value(&self, v: Var) -> ArrayD<f64> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Scalar value of a 0-dim/1-element node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let val = &nodes[v.0].value;
        assert!(val.len() == 1, "scalar_value on node of shape {:?}", val.shape());
        *val.iter().next().unwrap()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn push(&self, value: ArrayD<f64>, parents: Vec<usize>, back: Option<BackFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents, back });
        Var(nodes.len() - 1)
    }

    fn unary(
        &self,
        a: Var,
        f: impl Fn(&ArrayD<f64>) -> ArrayD<f64>,
        back: BackFn,
    ) -> Var {
        let value = f(&self.nodes.borrow()[a.0].value);
        self.push(value, vec![a.0], Some(back))
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        f: impl Fn(&ArrayD<f64>, &ArrayD<f64>) -> ArrayD<f64>,
        back: BackFn,
    ) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)
        };
        self.push(value, vec![a.0, b.0], Some(back))
    }

    // ---- elementwise ----

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| x + y,
            Box::new(|g, _, _| vec![g.clone(), g.clone()]),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| x - y,
            Box::new(|g, _, _| vec![g.clone(), -g]),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| x * y,
            Box::new(|g, p, _| vec![g * p[1], g * p[0]]),
        )
    }

    /// Elementwise division (same shapes).
    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| x / y,
            Box::new(|g, p, _| {
                let da = g / p[1];
                let db = -(g * p[0]) / (p[1] * p[1]);
                vec![da, db]
            }),
        )
    }

    /// `k * a + c` with constant `k`, `c`.
    pub fn affine(&self, a: Var, k: f64, c: f64) -> Var {
        self.unary(
            a,
            |x| x * k + c,
            Box::new(move |g, _, _| vec![g * k]),
        )
    }

    /// Add a constant array (e.g. positional embeddings, attention masks).
    pub fn add_const(&self, a: Var, c: &ArrayD<f64>) -> Var {
        let c = c.clone();
        self.unary(a, move |x| x + &c, Box::new(|g, _, _| vec![g.clone()]))
    }

    /// Elementwise multiply by a constant array (e.g. a fixed target).
    pub fn mul_const(&self, a: Var, c: &ArrayD<f64>) -> Var {
        let c2 = c.clone();
        let c3 = c.clone();
        self.unary(a, move |x| x * &c2, Box::new(move |g, _, _| vec![g * &c3]))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(f64::exp), Box::new(|g, _, out| vec![g * out]))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.mapv(f64::sqrt),
            Box::new(|g, _, out| vec![g * &out.mapv(|v| 0.5 / v)]),
        )
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(f64::ln), Box::new(|g, p, _| vec![g / p[0]]))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.mapv(|v| 1.0 / (1.0 + (-v).exp())),
            Box::new(|g, _, out| vec![g * &(out * &(1.0 - out))]),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.mapv(|v| v.max(0.0)),
            Box::new(|g, p, _| vec![g * &p[0].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 })]),
        )
    }

    /// Clamp into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(
            a,
            move |x| x.mapv(|v| v.clamp(lo, hi)),
            Box::new(move |g, p, _| {
                vec![g * &p[0].mapv(|v| if v > lo && v < hi { 1.0 } else { 0.0 })]
            }),
        )
    }

    /// Clamp from below; used for pooling denominators.
    pub fn clamp_min(&self, a: Var, lo: f64) -> Var {
        self.unary(
            a,
            move |x| x.mapv(|v| v.max(lo)),
            Box::new(move |g, p, _| {
                vec![g * &p[0].mapv(|v| if v > lo { 1.0 } else { 0.0 })]
            }),
        )
    }

    // ---- scalar broadcast ----

    /// Multiply every element of `a` by the 0-dim scalar `s`.
    pub fn mul_scalar(&self, a: Var, s: Var) -> Var {
        self.binary(
            a,
            s,
            |x, y| {
                let sv = *y.iter().next().unwrap();
                x * sv
            },
            Box::new(|g, p, _| {
                let sv = *p[1].iter().next().unwrap();
                let da = g * sv;
                let ds = scalar((g * p[0]).sum());
                vec![da, ds]
            }),
        )
    }

    /// Divide every element of `a` by the 0-dim scalar `s`.
    pub fn div_scalar(&self, a: Var, s: Var) -> Var {
        self.binary(
            a,
            s,
            |x, y| {
                let sv = *y.iter().next().unwrap();
                x / sv
            },
            Box::new(|g, p, _| {
                let sv = *p[1].iter().next().unwrap();
                let da = g / sv;
                let ds = scalar(-(g * p[0]).sum() / (sv * sv));
                vec![da, ds]
            }),
        )
    }

    // ---- shape ----

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Var {
        let old_shape = self.shape(a);
        self.unary(
            a,
            move |x| {
                // iterate in logical order so non-standard layouts reshape too
                ArrayD::from_shape_vec(IxDyn(&shape), x.iter().cloned().collect())
                    .expect("reshape: element count mismatch")
            },
            Box::new(move |g, _, _| {
                vec![ArrayD::from_shape_vec(IxDyn(&old_shape), g.iter().cloned().collect())
                    .expect("reshape backward")]
            }),
        )
    }

    /// 2D transpose.
    pub fn transpose(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.clone().into_dimensionality::<ndarray::Ix2>().unwrap().t().to_owned().into_dyn(),
            Box::new(|g, _, _| {
                vec![g.clone().into_dimensionality::<ndarray::Ix2>().unwrap().t().to_owned().into_dyn()]
            }),
        )
    }

    /// Column slice of a 2D matrix.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        let full = self.shape(a);
        self.unary(
            a,
            move |x| {
                x.clone()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
                    .slice(ndarray::s![.., start..end])
                    .to_owned()
                    .into_dyn()
            },
            Box::new(move |g, _, _| {
                let mut dx = ndarray::Array2::<f64>::zeros((full[0], full[1]));
                dx.slice_mut(ndarray::s![.., start..end])
                    .assign(&g.clone().into_dimensionality::<ndarray::Ix2>().unwrap());
                vec![dx.into_dyn()]
            }),
        )
    }

    /// Gather rows of a 2D matrix by index (repeats allowed); backward
    /// scatter-adds into the source rows.
    pub fn select_rows(&self, a: Var, indices: &[usize]) -> Var {
        let idx = indices.to_vec();
        let idx_b = indices.to_vec();
        self.unary(
            a,
            move |x| {
                let x2 = x.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let mut out = ndarray::Array2::<f64>::zeros((idx.len(), x2.ncols()));
                for (r, &i) in idx.iter().enumerate() {
                    out.row_mut(r).assign(&x2.row(i));
                }
                out.into_dyn()
            },
            Box::new(move |g, p, _| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let (rows, cols) = p[0]
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
                    .dim();
                let mut dx = ndarray::Array2::<f64>::zeros((rows, cols));
                for (r, &i) in idx_b.iter().enumerate() {
                    let mut row = dx.row_mut(i);
                    row += &g2.row(r);
                }
                vec![dx.into_dyn()]
            }),
        )
    }

    /// Concatenate along axis 0 (works for matrices and `[C, H, W]` maps).
    pub fn concat_axis0(&self, parts: &[Var]) -> Var {
        let (value, sizes) = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|v| nodes[v.0].value.view()).collect();
            let value = ndarray::concatenate(ndarray::Axis(0), &views).expect("concat_axis0");
            let sizes: Vec<usize> = parts.iter().map(|v| nodes[v.0].value.shape()[0]).collect();
            (value, sizes)
        };
        let parents: Vec<usize> = parts.iter().map(|v| v.0).collect();
        self.push(
            value,
            parents,
            Some(Box::new(move |g, _, _| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut offset = 0;
                for &s in &sizes {
                    let part = g
                        .slice_axis(ndarray::Axis(0), ndarray::Slice::from(offset..offset + s))
                        .to_owned();
                    out.push(part);
                    offset += s;
                }
                out
            })),
        )
    }

    /// Concatenate 2D matrices along columns.
    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let (value, sizes) = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|v| nodes[v.0].value.view()).collect();
            let value = ndarray::concatenate(ndarray::Axis(1), &views).expect("concat_cols");
            let sizes: Vec<usize> = parts.iter().map(|v| nodes[v.0].value.shape()[1]).collect();
            (value, sizes)
        };
        let parents: Vec<usize> = parts.iter().map(|v| v.0).collect();
        self.push(
            value,
            parents,
            Some(Box::new(move |g, _, _| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut offset = 0;
                for &s in &sizes {
                    let part = g
                        .slice_axis(ndarray::Axis(1), ndarray::Slice::from(offset..offset + s))
                        .to_owned();
                    out.push(part);
                    offset += s;
                }
                out
            })),
        )
    }

    /// Stack 0-dim scalars into a vector.
    pub fn stack_scalars(&self, parts: &[Var]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            ArrayD::from_shape_vec(
                IxDyn(&[parts.len()]),
                parts
                    .iter()
                    .map(|v| *nodes[v.0].value.iter().next().unwrap())
                    .collect(),
            )
            .unwrap()
        };
        let parents: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let n = parts.len();
        self.push(
            value,
            parents,
            Some(Box::new(move |g, _, _| {
                (0..n).map(|i| scalar(g[[i]])).collect()
            })),
        )
    }

    // ---- reductions ----

    pub fn sum(&self, a: Var) -> Var {
        let in_shape = self.shape(a);
        self.unary(
            a,
            |x| scalar(x.sum()),
            Box::new(move |g, _, _| {
                let gv = *g.iter().next().unwrap();
                vec![ArrayD::from_elem(IxDyn(&in_shape), gv)]
            }),
        )
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.len()
        };
        let s = self.sum(a);
        self.affine(s, 1.0 / n as f64, 0.0)
    }

    /// Row sums of a 2D matrix -> `[rows]`.
    pub fn sum_rows(&self, a: Var) -> Var {
        let cols = self.shape(a)[1];
        self.unary(
            a,
            |x| {
                x.clone()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
                    .sum_axis(ndarray::Axis(1))
                    .into_dyn()
            },
            Box::new(move |g, p, _| {
                let rows = p[0].shape()[0];
                let mut dx = ndarray::Array2::<f64>::zeros((rows, cols));
                for i in 0..rows {
                    let gi = g[[i]];
                    dx.row_mut(i).fill(gi);
                }
                vec![dx.into_dyn()]
            }),
        )
    }

    // ---- linear algebra ----

    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| {
                let x2 = x.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let y2 = y.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                x2.dot(&y2).into_dyn()
            },
            Box::new(|g, p, _| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let a2 = p[0].view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let b2 = p[1].view().into_dimensionality::<ndarray::Ix2>().unwrap();
                vec![g2.dot(&b2.t()).into_dyn(), a2.t().dot(&g2).into_dyn()]
            }),
        )
    }

    /// Add a `[D]` bias to every row of `[T, D]`.
    pub fn add_row(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| {
                let x2 = x.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let y1 = y.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                (&x2 + &y1).into_dyn()
            },
            Box::new(|g, _, _| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                vec![g.clone(), g2.sum_axis(ndarray::Axis(0)).into_dyn()]
            }),
        )
    }

    /// Divide each row `i` of `[N, C]` by element `i` of the `[N]` vector.
    pub fn div_rows(&self, a: Var, d: Var) -> Var {
        self.binary(
            a,
            d,
            |x, y| {
                let x2 = x.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let y1 = y.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut out = x2.to_owned();
                for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                    row.mapv_inplace(|v| v / y1[i]);
                }
                out.into_dyn()
            },
            Box::new(|g, p, _| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let a2 = p[0].view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let d1 = p[1].view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut da = g2.to_owned();
                let mut dd = ndarray::Array1::<f64>::zeros(d1.len());
                for i in 0..a2.nrows() {
                    let di = d1[i];
                    for j in 0..a2.ncols() {
                        da[[i, j]] /= di;
                        dd[i] -= g2[[i, j]] * a2[[i, j]] / (di * di);
                    }
                }
                vec![da.into_dyn(), dd.into_dyn()]
            }),
        )
    }

    /// Softmax over one axis of a 2D matrix (0 = down columns, 1 = along rows).
    pub fn softmax_axis(&self, a: Var, axis: usize) -> Var {
        assert!(axis < 2);
        self.unary(
            a,
            move |x| {
                let x2 = x.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let mut out = x2.to_owned();
                let lanes: Vec<_> = if axis == 1 {
                    out.rows_mut().into_iter().collect()
                } else {
                    out.columns_mut().into_iter().collect()
                };
                for mut lane in lanes {
                    let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    lane.mapv_inplace(|v| (v - m).exp());
                    let s: f64 = lane.sum();
                    lane.mapv_inplace(|v| v / s);
                }
                out.into_dyn()
            },
            Box::new(move |g, _, out| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let s2 = out.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let mut dx = ndarray::Array2::<f64>::zeros(g2.dim());
                let (rows, cols) = g2.dim();
                if axis == 1 {
                    for i in 0..rows {
                        let dot: f64 = (0..cols).map(|j| g2[[i, j]] * s2[[i, j]]).sum();
                        for j in 0..cols {
                            dx[[i, j]] = s2[[i, j]] * (g2[[i, j]] - dot);
                        }
                    }
                } else {
                    for j in 0..cols {
                        let dot: f64 = (0..rows).map(|i| g2[[i, j]] * s2[[i, j]]).sum();
                        for i in 0..rows {
                            dx[[i, j]] = s2[[i, j]] * (g2[[i, j]] - dot);
                        }
                    }
                }
                vec![dx.into_dyn()]
            }),
        )
    }

    /// Numerically safe log-sum-exp of a vector -> scalar.
    pub fn logsumexp(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| {
                let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                scalar(m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln())
            },
            Box::new(|g, p, out| {
                let gv = *g.iter().next().unwrap();
                let lse = *out.iter().next().unwrap();
                vec![p[0].mapv(|v| gv * (v - lse).exp())]
            }),
        )
    }

    /// Per-row layer norm of `[T, D]` with affine `gamma`, `beta` (`[D]`).
    pub fn layer_norm(&self, a: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let x = nodes[a.0].value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let gm = nodes[gamma.0].value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            let bt = nodes[beta.0].value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            let d = x.ncols() as f64;
            let mut out = x.to_owned();
            for mut row in out.rows_mut() {
                let mean = row.sum() / d;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                let inv = 1.0 / (var + eps).sqrt();
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - mean) * inv * gm[j] + bt[j];
                }
            }
            out.into_dyn()
        };
        self.push(
            value,
            vec![a.0, gamma.0, beta.0],
            Some(Box::new(move |g, p, _| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let x = p[0].view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let gm = p[1].view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let (t, d) = x.dim();
                let dn = d as f64;
                let mut dx = ndarray::Array2::<f64>::zeros((t, d));
                let mut dgamma = ndarray::Array1::<f64>::zeros(d);
                let mut dbeta = ndarray::Array1::<f64>::zeros(d);
                for i in 0..t {
                    let row = x.row(i);
                    let mean = row.sum() / dn;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dn;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    // d xhat
                    let dxh: Vec<f64> = (0..d).map(|j| g2[[i, j]] * gm[j]).collect();
                    let mean_dxh: f64 = dxh.iter().sum::<f64>() / dn;
                    let mean_dxh_xhat: f64 =
                        dxh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / dn;
                    for j in 0..d {
                        dgamma[j] += g2[[i, j]] * xhat[j];
                        dbeta[j] += g2[[i, j]];
                        dx[[i, j]] = inv * (dxh[j] - mean_dxh - xhat[j] * mean_dxh_xhat);
                    }
                }
                vec![dx.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn()]
            })),
        )
    }

    // ---- spatial ----

    /// Conv2d identical in convention to [`crate::nn::conv2d`].
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let x3 = nodes[x.0].value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let w4 = nodes[w.0].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let b1 = nodes[b.0].value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            crate::nn::conv2d(&x3.to_owned(), &w4.to_owned(), Some(&b1.to_owned()), stride, pad)
                .into_dyn()
        };
        self.push(
            value,
            vec![x.0, w.0, b.0],
            Some(Box::new(move |g, p, _| {
                let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let x3 = p[0].view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let w4 = p[1].view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let (ci, h, wd) = x3.dim();
                let (co, _, kh, kw) = w4.dim();
                let (_, oh, ow) = g3.dim();
                let gmat = g3
                    .to_owned()
                    .into_shape_with_order((co, oh * ow))
                    .expect("gradient reshapes to [Co, oh*ow]");
                let wmat = w4
                    .to_owned()
                    .into_shape_with_order((co, ci * kh * kw))
                    .expect("weight reshapes to a matrix");
                let cols = crate::nn::im2col(&x3.to_owned(), kh, kw, stride, pad, oh, ow);
                let dw = gmat
                    .dot(&cols.t())
                    .into_shape_with_order((co, ci, kh, kw))
                    .expect("weight gradient reshapes back");
                let dcols = wmat.t().dot(&gmat);
                let dx = crate::nn::col2im_add(&dcols, ci, h, wd, kh, kw, stride, pad, oh, ow);
                let db = gmat.sum_axis(ndarray::Axis(1));
                vec![dx.into_dyn(), dw.into_dyn(), db.into_dyn()]
            })),
        )
    }

    /// Bilinear resize of `[C, H, W]`, same convention as
    /// [`crate::nn::bilinear_resize`].
    pub fn bilinear_resize(&self, x: Var, oh: usize, ow: usize) -> Var {
        self.unary(
            x,
            move |v| {
                let v3 = v.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                crate::nn::bilinear_resize(&v3.to_owned(), oh, ow).into_dyn()
            },
            Box::new(move |g, p, _| {
                let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let (c, h, w) = p[0].view().into_dimensionality::<ndarray::Ix3>().unwrap().dim();
                let mut dx = ndarray::Array3::<f64>::zeros((c, h, w));
                if h == oh && w == ow {
                    dx.assign(&g3);
                    return vec![dx.into_dyn()];
                }
                let sy = h as f64 / oh as f64;
                let sx = w as f64 / ow as f64;
                for oy in 0..oh {
                    let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
                    let y0 = fy.floor() as usize;
                    let y1 = (y0 + 1).min(h - 1);
                    let wy = fy - y0 as f64;
                    for ox in 0..ow {
                        let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                        let x0 = fx.floor() as usize;
                        let x1 = (x0 + 1).min(w - 1);
                        let wx = fx - x0 as f64;
                        for ch in 0..c {
                            let gv = g3[[ch, oy, ox]];
                            dx[[ch, y0, x0]] += gv * (1.0 - wy) * (1.0 - wx);
                            dx[[ch, y0, x1]] += gv * (1.0 - wy) * wx;
                            dx[[ch, y1, x0]] += gv * wy * (1.0 - wx);
                            dx[[ch, y1, x1]] += gv * wy * wx;
                        }
                    }
                }
                vec![dx.into_dyn()]
            }),
        )
    }

    /// Average pooling by an integer factor over `[C, H, W]`.
    pub fn avg_pool2d(&self, x: Var, factor: usize) -> Var {
        assert!(factor >= 1);
        self.unary(
            x,
            move |v| {
                let v3 = v.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let (c, h, w) = v3.dim();
                let (oh, ow) = (h / factor, w / factor);
                let mut out = ndarray::Array3::<f64>::zeros((c, oh, ow));
                let norm = 1.0 / (factor * factor) as f64;
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0.0;
                            for dy in 0..factor {
                                for dxx in 0..factor {
                                    acc += v3[[ch, oy * factor + dy, ox * factor + dxx]];
                                }
                            }
                            out[[ch, oy, ox]] = acc * norm;
                        }
                    }
                }
                out.into_dyn()
            },
            Box::new(move |g, p, _| {
                let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let (c, h, w) = p[0].view().into_dimensionality::<ndarray::Ix3>().unwrap().dim();
                let mut dx = ndarray::Array3::<f64>::zeros((c, h, w));
                let norm = 1.0 / (factor * factor) as f64;
                let (_, oh, ow) = g3.dim();
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g3[[ch, oy, ox]] * norm;
                            for dy in 0..factor {
                                for dxx in 0..factor {
                                    dx[[ch, oy * factor + dy, ox * factor + dxx]] += gv;
                                }
                            }
                        }
                    }
                }
                vec![dx.into_dyn()]
            }),
        )
    }

    /// Sample `[C, H, W]` at continuous points (pixel coordinates of the
    /// map's own grid, integer coords = pixel centers, edge clamped)
    /// -> `[C, P]`.
    pub fn bilinear_sample(&self, x: Var, points: &[(f64, f64)]) -> Var {
        let pts = points.to_vec();
        let pts_b = points.to_vec();
        self.unary(
            x,
            move |v| {
                let v3 = v.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let (c, h, w) = v3.dim();
                let mut out = ndarray::Array2::<f64>::zeros((c, pts.len()));
                for (pi, &(py, px)) in pts.iter().enumerate() {
                    let fy = py.clamp(0.0, (h - 1) as f64);
                    let fx = px.clamp(0.0, (w - 1) as f64);
                    let y0 = fy.floor() as usize;
                    let y1 = (y0 + 1).min(h - 1);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(w - 1);
                    let wy = fy - y0 as f64;
                    let wx = fx - x0 as f64;
                    for ch in 0..c {
                        let top = v3[[ch, y0, x0]] * (1.0 - wx) + v3[[ch, y0, x1]] * wx;
                        let bot = v3[[ch, y1, x0]] * (1.0 - wx) + v3[[ch, y1, x1]] * wx;
                        out[[ch, pi]] = top * (1.0 - wy) + bot * wy;
                    }
                }
                out.into_dyn()
            },
            Box::new(move |g, p, _| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let (c, h, w) = p[0].view().into_dimensionality::<ndarray::Ix3>().unwrap().dim();
                let mut dx = ndarray::Array3::<f64>::zeros((c, h, w));
                for (pi, &(py, px)) in pts_b.iter().enumerate() {
                    let fy = py.clamp(0.0, (h - 1) as f64);
                    let fx = px.clamp(0.0, (w - 1) as f64);
                    let y0 = fy.floor() as usize;
                    let y1 = (y0 + 1).min(h - 1);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(w - 1);
                    let wy = fy - y0 as f64;
                    let wx = fx - x0 as f64;
                    for ch in 0..c {
                        let gv = g2[[ch, pi]];
                        dx[[ch, y0, x0]] += gv * (1.0 - wy) * (1.0 - wx);
                        dx[[ch, y0, x1]] += gv * (1.0 - wy) * wx;
                        dx[[ch, y1, x0]] += gv * wy * (1.0 - wx);
                        dx[[ch, y1, x1]] += gv * wy * wx;
                    }
                }
                vec![dx.into_dyn()]
            }),
        )
    }

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert!(
            nodes[loss.0].value.len() == 1,
            "backward from non-scalar node of shape {:?}",
            nodes[loss.0].value.shape()
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(nodes[loss.0].value.raw_dim(), 1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            if let Some(back) = &nodes[id].back {
                let parent_vals: Vec<&ArrayD<f64>> =
                    nodes[id].parents.iter().map(|&p| &nodes[p].value).collect();
                let parent_grads = back(&g, &parent_vals, &nodes[id].value);
                assert_eq!(parent_grads.len(), nodes[id].parents.len());
                for (p, pg) in nodes[id].parents.iter().zip(parent_grads) {
                    match &mut grads[*p] {
                        Some(existing) => *existing += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

/// Central finite-difference gradient of `f` at `x` (one perturbed element
/// at a time). The closure sees the full perturbed array.
pub fn numeric_grad(
    f: &mut dyn FnMut(&ArrayD<f64>) -> f64,
    x: &ArrayD<f64>,
    h: f64,
) -> ArrayD<f64> {
    let mut g = ArrayD::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let orig = x.as_slice().unwrap()[idx];
        xp.as_slice_mut().unwrap()[idx] = orig + h;
        let fp = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig - h;
        let fm = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig;
        g.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Assert elementwise agreement `|a - n| <= atol + rtol * max(|a|, |n|)`.
pub fn assert_grads_close(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>, rtol: f64, atol: f64) {
    assert_eq!(analytic.shape(), numeric.shape());
    for (i, (a, n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        let tol = atol + rtol * a.abs().max(n.abs());
        assert!(
            (a - n).abs() <= tol,
            "grad mismatch at flat index {i}: analytic {a} vs numeric {n} (tol {tol})"
        );
    }
}
