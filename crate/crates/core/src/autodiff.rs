//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! The graph is append-only and therefore already topologically ordered;
//! backward walks the node list in reverse, calling each node's recorded
//! backprop closure and accumulating gradient contributions into the
//! parents. Only the operations the detector needs are provided.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Probabilities are clamped to [EPS, 1 - EPS] before any logarithm.
pub const CLAMP_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Backprop closure: (all node values, own index, own output gradient)
/// -> gradient contributions for parent nodes.
type BackpropFn = Box<dyn Fn(&[Tensor], usize, &Tensor) -> Vec<(Var, Tensor)>>;

#[derive(Default)]
pub struct Graph {
    values: Vec<Tensor>,
    backprops: Vec<Option<BackpropFn>>,
}

pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    fn push(&mut self, value: Tensor, backprop: Option<BackpropFn>) -> Var {
        self.values.push(value);
        self.backprops.push(backprop);
        Var(self.values.len() - 1)
    }

    /// Insert an input node (no gradient flows past it, but its gradient
    /// is still accumulated and can be read back).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, None)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.push(Tensor::scalar(v), None)
    }

    /// Reverse sweep from `root` (must be scalar). Returns one gradient
    /// slot per node; untouched nodes have none.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        let mut seed = Tensor::zeros(self.values[root.0].shape.clone());
        assert_eq!(seed.len(), 1, "backward root must be scalar");
        seed.data[0] = 1.0;
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].clone() else { continue };
            let Some(bp) = &self.backprops[i] else { continue };
            for (parent, contrib) in bp(&self.values, i, &g) {
                debug_assert!(parent.0 < i, "graph must stay topological");
                match &mut grads[parent.0] {
                    Some(acc) => {
                        for (a, c) in acc.data.iter_mut().zip(contrib.data.iter()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Gradients(grads)
    }

    // ---- elementwise and scalar ops ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape, self.values[b.0].shape);
        let data = self.values[a.0]
            .data
            .iter()
            .zip(&self.values[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.values[a.0].shape.clone(), data);
        self.push(
            out,
            Some(Box::new(move |_vals, _i, g| {
                vec![(a, g.clone()), (b, g.clone())]
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.values[a.0].data.iter().map(|x| c * x).collect();
        let out = Tensor::new(self.values[a.0].shape.clone(), data);
        self.push(
            out,
            Some(Box::new(move |_vals, _i, g| {
                let gd = g.data.iter().map(|x| c * x).collect();
                vec![(a, Tensor::new(g.shape.clone(), gd))]
            })),
        )
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let v = terms
            .iter()
            .map(|(t, w)| w * self.values[t.0].item())
            .sum::<f64>();
        let terms: Vec<(Var, f64)> = terms.to_vec();
        self.push(
            Tensor::scalar(v),
            Some(Box::new(move |_vals, _i, g| {
                terms
                    .iter()
                    .map(|&(t, w)| (t, Tensor::scalar(w * g.item())))
                    .collect()
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.values[a.0].data.iter().map(|&x| x.max(0.0)).collect();
        let out = Tensor::new(self.values[a.0].shape.clone(), data);
        self.push(
            out,
            Some(Box::new(move |vals, i, g| {
                let gd = vals[i]
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&y, &gy)| if y > 0.0 { gy } else { 0.0 })
                    .collect();
                vec![(a, Tensor::new(g.shape.clone(), gd))]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.values[a.0]
            .data
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let out = Tensor::new(self.values[a.0].shape.clone(), data);
        self.push(
            out,
            Some(Box::new(move |vals, i, g| {
                let gd = vals[i]
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&y, &gy)| gy * y * (1.0 - y))
                    .collect();
                vec![(a, Tensor::new(g.shape.clone(), gd))]
            })),
        )
    }

    /// Row-wise softmax of an [N, D] matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let shape = self.values[a.0].shape.clone();
        assert_eq!(shape.len(), 2);
        let (n, d) = (shape[0], shape[1]);
        let mut data = vec![0.0; n * d];
        for r in 0..n {
            let row = &self.values[a.0].data[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..d {
                let e = (row[c] - m).exp();
                data[r * d + c] = e;
                z += e;
            }
            for c in 0..d {
                data[r * d + c] /= z;
            }
        }
        let out = Tensor::new(shape, data);
        self.push(
            out,
            Some(Box::new(move |vals, i, g| {
                let y = &vals[i];
                let (n, d) = (y.shape[0], y.shape[1]);
                let mut gd = vec![0.0; n * d];
                for r in 0..n {
                    let yr = &y.data[r * d..(r + 1) * d];
                    let gr = &g.data[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..d {
                        gd[r * d + c] = yr[c] * (gr[c] - dot);
                    }
                }
                vec![(a, Tensor::new(g.shape.clone(), gd))]
            })),
        )
    }

    // ---- linear algebra ----

    /// x [N, D] * w [D, M] + b [M] -> [N, M]
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xs, ws, bs) = (
            self.values[x.0].shape.clone(),
            self.values[w.0].shape.clone(),
            self.values[b.0].shape.clone(),
        );
        assert_eq!(xs.len(), 2);
        assert_eq!(ws.len(), 2);
        assert_eq!(xs[1], ws[0], "linear: inner dimension mismatch");
        assert_eq!(bs, vec![ws[1]]);
        let (n, d, m) = (xs[0], xs[1], ws[1]);
        let mut data = vec![0.0; n * m];
        {
            let xv = &self.values[x.0].data;
            let wv = &self.values[w.0].data;
            let bv = &self.values[b.0].data;
            for r in 0..n {
                for c in 0..m {
                    let mut acc = bv[c];
                    for k in 0..d {
                        acc += xv[r * d + k] * wv[k * m + c];
                    }
                    data[r * m + c] = acc;
                }
            }
        }
        let out = Tensor::new(vec![n, m], data);
        self.push(
            out,
            Some(Box::new(move |vals, _i, g| {
                let xv = &vals[x.0].data;
                let wv = &vals[w.0].data;
                let mut gx = vec![0.0; n * d];
                let mut gw = vec![0.0; d * m];
                let mut gb = vec![0.0; m];
                for r in 0..n {
                    for c in 0..m {
                        let gy = g.data[r * m + c];
                        gb[c] += gy;
                        for k in 0..d {
                            gx[r * d + k] += gy * wv[k * m + c];
                            gw[k * m + c] += gy * xv[r * d + k];
                        }
                    }
                }
                vec![
                    (x, Tensor::new(vec![n, d], gx)),
                    (w, Tensor::new(vec![d, m], gw)),
                    (b, Tensor::new(vec![m], gb)),
                ]
            })),
        )
    }

    /// 2-D convolution: x [C, H, W], w [O, C, K, K], b [O] -> [O, H', W'].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.values[x.0].shape.clone();
        let ws = self.values[w.0].shape.clone();
        assert_eq!(xs.len(), 3, "conv2d input must be [C, H, W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [O, C, K, K]");
        assert_eq!(xs[0], ws[1], "conv2d channel mismatch");
        let (c_in, h, wd) = (xs[0], xs[1], xs[2]);
        let (c_out, k) = (ws[0], ws[2]);
        assert_eq!(ws[2], ws[3]);
        assert_eq!(self.values[b.0].shape, vec![c_out]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut data = vec![0.0; c_out * ho * wo];
        {
            let xv = &self.values[x.0].data;
            let wv = &self.values[w.0].data;
            let bv = &self.values[b.0].data;
            for o in 0..c_out {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bv[o];
                        for ci in 0..c_in {
                            for ky in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += xv[(ci * h + iy as usize) * wd + ix as usize]
                                        * wv[((o * c_in + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        data[(o * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        let out = Tensor::new(vec![c_out, ho, wo], data);
        self.push(
            out,
            Some(Box::new(move |vals, _i, g| {
                let xv = &vals[x.0].data;
                let wv = &vals[w.0].data;
                let mut gx = vec![0.0; c_in * h * wd];
                let mut gw = vec![0.0; c_out * c_in * k * k];
                let mut gb = vec![0.0; c_out];
                for o in 0..c_out {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gy = g.data[(o * ho + oy) * wo + ox];
                            if gy == 0.0 {
                                continue;
                            }
                            gb[o] += gy;
                            for ci in 0..c_in {
                                for ky in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = (ci * h + iy as usize) * wd + ix as usize;
                                        let wi = ((o * c_in + ci) * k + ky) * k + kx;
                                        gx[xi] += gy * wv[wi];
                                        gw[wi] += gy * xv[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    (x, Tensor::new(vec![c_in, h, wd], gx)),
                    (w, Tensor::new(vec![c_out, c_in, k, k], gw)),
                    (b, Tensor::new(vec![c_out], gb)),
                ]
            })),
        )
    }

    // ---- indexing ----

    /// General gather: out flat element i takes input flat element
    /// `src_of[i]`. Duplicate sources accumulate in the backward pass.
    pub fn index_select(&mut self, x: Var, out_shape: Vec<usize>, src_of: Vec<usize>) -> Var {
        assert_eq!(out_shape.iter().product::<usize>(), src_of.len());
        let xv = &self.values[x.0];
        let data = src_of.iter().map(|&s| xv.data[s]).collect();
        let in_shape = xv.shape.clone();
        let out = Tensor::new(out_shape, data);
        self.push(
            out,
            Some(Box::new(move |_vals, _i, g| {
                let mut gx = Tensor::zeros(in_shape.clone());
                for (i, &s) in src_of.iter().enumerate() {
                    gx.data[s] += g.data[i];
                }
                vec![(x, gx)]
            })),
        )
    }

    /// Gather whole rows of an [N, D] matrix.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let shape = self.values[x.0].shape.clone();
        assert_eq!(shape.len(), 2);
        let d = shape[1];
        let src: Vec<usize> = rows
            .iter()
            .flat_map(|&r| (0..d).map(move |c| r * d + c))
            .collect();
        self.index_select(x, vec![rows.len(), d], src)
    }

    /// Reinterpret [C, H, W] output of a head convolution as one row per
    /// anchor in location-major order: out[(y * W + x) * (C / per) + a, j]
    /// = in[a * per + j, y, x].
    pub fn anchor_major(&mut self, x: Var, per_anchor: usize) -> Var {
        let shape = self.values[x.0].shape.clone();
        assert_eq!(shape.len(), 3);
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        assert_eq!(c % per_anchor, 0);
        let a_cnt = c / per_anchor;
        let mut src = Vec::with_capacity(c * h * w);
        for y in 0..h {
            for xx in 0..w {
                for a in 0..a_cnt {
                    for j in 0..per_anchor {
                        src.push(((a * per_anchor + j) * h + y) * w + xx);
                    }
                }
            }
        }
        self.index_select(x, vec![h * w * a_cnt, per_anchor], src)
    }

    /// Quantized max RoI pooling. Each RoI (in feature-map coordinates)
    /// is split into pool x pool bins; empty bins are snapped to at least
    /// one cell. Output is [R, C * pool * pool].
    pub fn roi_maxpool(&mut self, x: Var, rois: &[[f64; 4]], pool: usize) -> Var {
        let shape = self.values[x.0].shape.clone();
        assert_eq!(shape.len(), 3);
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let r_cnt = rois.len();
        let mut data = vec![0.0; r_cnt * c * pool * pool];
        let mut argmax = vec![0usize; r_cnt * c * pool * pool];
        let xv = &self.values[x.0].data;
        for (ri, roi) in rois.iter().enumerate() {
            let x0 = roi[0].clamp(0.0, w as f64);
            let y0 = roi[1].clamp(0.0, h as f64);
            let x1 = roi[2].clamp(0.0, w as f64).max(x0 + 1.0).min(w as f64);
            let y1 = roi[3].clamp(0.0, h as f64).max(y0 + 1.0).min(h as f64);
            // snapped to a 1-cell minimum so degenerate RoIs still pool
            let x0 = (x1 - 1.0).min(x0);
            let y0 = (y1 - 1.0).min(y0);
            let bw = (x1 - x0) / pool as f64;
            let bh = (y1 - y0) / pool as f64;
            for py in 0..pool {
                let cy0 = (y0 + py as f64 * bh).floor() as usize;
                let cy1 = ((y0 + (py + 1) as f64 * bh).ceil() as usize).min(h).max(cy0 + 1);
                for px in 0..pool {
                    let cx0 = (x0 + px as f64 * bw).floor() as usize;
                    let cx1 = ((x0 + (px + 1) as f64 * bw).ceil() as usize).min(w).max(cx0 + 1);
                    for ci in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = (ci * h + cy0) * w + cx0;
                        for yy in cy0..cy1.min(h) {
                            for xx in cx0..cx1.min(w) {
                                let v = xv[(ci * h + yy) * w + xx];
                                if v > best {
                                    best = v;
                                    best_idx = (ci * h + yy) * w + xx;
                                }
                            }
                        }
                        let oi = ((ri * c + ci) * pool + py) * pool + px;
                        data[oi] = best;
                        argmax[oi] = best_idx;
                    }
                }
            }
        }
        let out = Tensor::new(vec![r_cnt, c * pool * pool], data);
        let in_shape = shape;
        self.push(
            out,
            Some(Box::new(move |_vals, _i, g| {
                let mut gx = Tensor::zeros(in_shape.clone());
                for (oi, &src) in argmax.iter().enumerate() {
                    gx.data[src] += g.data[oi];
                }
                vec![(x, gx)]
            })),
        )
    }

    // ---- losses ----

    /// Mean binary cross entropy of probabilities `p` (flat) against
    /// fixed labels. Probabilities are clamped to [CLAMP_EPS, 1 - CLAMP_EPS];
    /// the gradient is zero where the clamp is active.
    pub fn bce_mean(&mut self, p: Var, labels: Vec<f64>) -> Var {
        let pv = &self.values[p.0];
        assert_eq!(pv.len(), labels.len());
        assert!(!labels.is_empty(), "bce_mean on empty input");
        let n = labels.len() as f64;
        let mut total = 0.0;
        for (&pi, &y) in pv.data.iter().zip(&labels) {
            let pc = pi.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
            total += -y * pc.ln() - (1.0 - y) * (1.0 - pc).ln();
        }
        let shape = pv.shape.clone();
        self.push(
            Tensor::scalar(total / n),
            Some(Box::new(move |vals, _i, g| {
                let gy = g.item();
                let gd = vals[p.0]
                    .data
                    .iter()
                    .zip(&labels)
                    .map(|(&pi, &y)| {
                        if pi <= CLAMP_EPS || pi >= 1.0 - CLAMP_EPS {
                            0.0
                        } else {
                            gy * (pi - y) / (pi * (1.0 - pi)) / n
                        }
                    })
                    .collect();
                vec![(p, Tensor::new(shape.clone(), gd))]
            })),
        )
    }

    /// Mean cross entropy of softmax rows [N, D] against integer labels.
    pub fn cross_entropy_rows(&mut self, probs: Var, labels: Vec<usize>) -> Var {
        let pv = &self.values[probs.0];
        let shape = pv.shape.clone();
        assert_eq!(shape.len(), 2);
        assert_eq!(shape[0], labels.len());
        assert!(!labels.is_empty(), "cross_entropy_rows on empty input");
        let d = shape[1];
        let n = labels.len() as f64;
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let p = pv.data[r * d + y].clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
            total += -p.ln();
        }
        self.push(
            Tensor::scalar(total / n),
            Some(Box::new(move |vals, _i, g| {
                let gy = g.item();
                let mut gd = vec![0.0; shape.iter().product()];
                for (r, &y) in labels.iter().enumerate() {
                    let p = vals[probs.0].data[r * d + y];
                    if p > CLAMP_EPS && p < 1.0 - CLAMP_EPS {
                        gd[r * d + y] = -gy / (p * n);
                    }
                }
                vec![(probs, Tensor::new(shape.clone(), gd))]
            })),
        )
    }

    /// Smooth-L1 (Huber with delta 1) of `pred` against fixed targets,
    /// summed over all elements.
    pub fn smooth_l1_sum(&mut self, pred: Var, target: Vec<f64>) -> Var {
        let pv = &self.values[pred.0];
        assert_eq!(pv.len(), target.len());
        let mut total = 0.0;
        for (&p, &t) in pv.data.iter().zip(&target) {
            let d = p - t;
            total += if d.abs() < 1.0 {
                0.5 * d * d
            } else {
                d.abs() - 0.5
            };
        }
        let shape = pv.shape.clone();
        self.push(
            Tensor::scalar(total),
            Some(Box::new(move |vals, _i, g| {
                let gy = g.item();
                let gd = vals[pred.0]
                    .data
                    .iter()
                    .zip(&target)
                    .map(|(&p, &t)| {
                        let d = p - t;
                        gy * if d.abs() < 1.0 { d } else { d.signum() }
                    })
                    .collect();
                vec![(pred, Tensor::new(shape.clone(), gd))]
            })),
        )
    }

    /// Mean cosine similarity of paired rows of two [K, D] matrices.
    pub fn cosine_pairs_mean(&mut self, x1: Var, x2: Var) -> Var {
        let s1 = self.values[x1.0].shape.clone();
        let s2 = self.values[x2.0].shape.clone();
        assert_eq!(s1, s2, "cosine_pairs_mean shape mismatch");
        assert_eq!(s1.len(), 2);
        let (kn, d) = (s1[0], s1[1]);
        assert!(kn > 0, "cosine_pairs_mean on empty input");
        let mut total = 0.0;
        {
            let a = &self.values[x1.0].data;
            let b = &self.values[x2.0].data;
            for r in 0..kn {
                let ar = &a[r * d..(r + 1) * d];
                let br = &b[r * d..(r + 1) * d];
                let dot: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
                let na = ar.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = br.iter().map(|x| x * x).sum::<f64>().sqrt();
                debug_assert!(na > 0.0 && nb > 0.0, "zero-norm vector in cosine");
                total += dot / (na * nb);
            }
        }
        let kf = kn as f64;
        self.push(
            Tensor::scalar(total / kf),
            Some(Box::new(move |vals, _i, g| {
                let gy = g.item();
                let a = &vals[x1.0].data;
                let b = &vals[x2.0].data;
                let mut g1 = vec![0.0; kn * d];
                let mut g2 = vec![0.0; kn * d];
                for r in 0..kn {
                    let ar = &a[r * d..(r + 1) * d];
                    let br = &b[r * d..(r + 1) * d];
                    let dot: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
                    let na = ar.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb = br.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let cos = dot / (na * nb);
                    for c in 0..d {
                        g1[r * d + c] =
                            gy / kf * (br[c] / (na * nb) - cos * ar[c] / (na * na));
                        g2[r * d + c] =
                            gy / kf * (ar[c] / (na * nb) - cos * br[c] / (nb * nb));
                    }
                }
                vec![
                    (x1, Tensor::new(vec![kn, d], g1)),
                    (x2, Tensor::new(vec![kn, d], g2)),
                ]
            })),
        )
    }
}

// ---- parameters and the optimizer ----

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Param {
    value: Tensor,
    m: Tensor,
    v: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameter tensors with Adam state. BTreeMap keeps iteration
/// order deterministic across runs and platforms.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    step: u64,
}

/// Parameter leaves bound into a graph for one forward/backward pass.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let m = Tensor::zeros(value.shape().to_vec());
        let v = Tensor::zeros(value.shape().to_vec());
        self.params.insert(name.into(), Param { value, m, v });
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), g.leaf(p.value.clone())))
            .collect();
        BoundParams { vars }
    }

    /// One Adam update from the gradients of a completed backward pass.
    /// `clip_norm` applies global gradient-norm clipping when set.
    pub fn adam_step(
        &mut self,
        bound: &BoundParams,
        grads: &Gradients,
        lr: f64,
        cfg: &AdamConfig,
        clip_norm: Option<f64>,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let mut scale = 1.0;
        if let Some(max_norm) = clip_norm {
            let mut sq = 0.0;
            for (name, _) in self.params.iter() {
                if let Some(g) = grads.get(bound.var(name)) {
                    sq += g.data().iter().map(|x| x * x).sum::<f64>();
                }
            }
            let norm = sq.sqrt();
            if norm > max_norm {
                scale = max_norm / norm;
            }
        }
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, p) in self.params.iter_mut() {
            let Some(g) = grads.get(bound.var(name)) else { continue };
            for i in 0..p.value.len() {
                let gi = g.data()[i] * scale;
                p.m.data_mut()[i] = cfg.beta1 * p.m.data()[i] + (1.0 - cfg.beta1) * gi;
                p.v.data_mut()[i] = cfg.beta2 * p.v.data()[i] + (1.0 - cfg.beta2) * gi * gi;
                let mhat = p.m.data()[i] / bc1;
                let vhat = p.v.data()[i] / bc2;
                p.value.data_mut()[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
    }
}
