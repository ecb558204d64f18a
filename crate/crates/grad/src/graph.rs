//! Reverse-mode tape over [`Tensor`] values.
//!
//! A [`Graph`] is rebuilt per evaluation (define-by-run). Leaves marked
//! trainable receive gradients; everything reachable only from constants is
//! pruned from the backward pass. Scalars are tensors of shape `[1]`.

use crate::tensor::Tensor;

pub type NodeId = usize;

type BackFn = Box<dyn Fn(&Graph, &Tensor) -> Vec<(NodeId, Tensor)>>;

struct Node {
    value: Tensor,
    grad_fn: Option<BackFn>,
    needs_grad: bool,
}

/// Gradients indexed by node id, produced by [`Graph::backward`].
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.0.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.0.get_mut(id).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, grad_fn: Option<BackFn>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { value, grad_fn: if needs_grad { grad_fn } else { None }, needs_grad });
        id
    }

    fn unary(
        &mut self,
        a: NodeId,
        value: Tensor,
        back: impl Fn(&Graph, NodeId, &Tensor) -> Tensor + 'static,
    ) -> NodeId {
        let ng = self.nodes[a].needs_grad;
        let id = self.push(value, ng, None);
        if ng {
            self.nodes[id].grad_fn =
                Some(Box::new(move |g, grad| vec![(a, back(g, id, grad))]));
        }
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, false, None)
    }

    pub fn constant_scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    /// Trainable leaf: receives a gradient slot.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, true, None)
    }

    /// Re-enter a value as a constant (blocks gradient flow).
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id].value.clone();
        self.constant(v)
    }

    /// Attach a custom operator with a hand-written backward.
    pub fn custom(
        &mut self,
        parents: &[NodeId],
        value: Tensor,
        back: impl Fn(&Graph, &Tensor) -> Vec<(NodeId, Tensor)> + 'static,
    ) -> NodeId {
        let ng = parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.push(value, ng, Some(Box::new(back)))
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.nodes[a].needs_grad || self.nodes[b].needs_grad;
        self.push(
            v,
            ng,
            Some(Box::new(move |_, grad| {
                vec![(a, grad.clone()), (b, grad.clone())]
            })),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.nodes[a].needs_grad || self.nodes[b].needs_grad;
        self.push(
            v,
            ng,
            Some(Box::new(move |_, grad| {
                vec![(a, grad.clone()), (b, grad.map(|x| -x))]
            })),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.nodes[a].needs_grad || self.nodes[b].needs_grad;
        self.push(
            v,
            ng,
            Some(Box::new(move |g, grad| {
                vec![
                    (a, grad.zip_map(g.value(b), |gr, y| gr * y)),
                    (b, grad.zip_map(g.value(a), |gr, x| gr * x)),
                ]
            })),
        )
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| -x);
        self.unary(a, v, move |_, _, grad| grad.map(|x| -x))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.unary(a, v, move |_, _, grad| grad.map(|x| x * c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.unary(a, v, move |_, _, grad| grad.clone())
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.unary(a, v, move |g, _, grad| {
            grad.zip_map(g.value(a), |gr, x| if x > 0.0 { gr } else { slope * gr })
        })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.unary(a, v, move |g, id, grad| {
            grad.zip_map(g.value(id), |gr, y| gr * y * (1.0 - y))
        })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.unary(a, v, move |g, id, grad| {
            grad.zip_map(g.value(id), |gr, y| gr * (1.0 - y * y))
        })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.unary(a, v, move |g, id, grad| grad.zip_map(g.value(id), |gr, y| gr * y))
    }

    /// Numerically stable ln(1 + e^x).
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(softplus);
        self.unary(a, v, move |g, _, grad| {
            grad.zip_map(g.value(a), |gr, x| gr * sigmoid(x))
        })
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::abs);
        self.unary(a, v, move |g, _, grad| {
            grad.zip_map(g.value(a), |gr, x| gr * sign(x))
        })
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        self.unary(a, v, move |g, _, grad| {
            grad.zip_map(g.value(a), |gr, x| 2.0 * x * gr)
        })
    }

    /// 1 / sqrt(x + eps)
    pub fn rsqrt_eps(&mut self, a: NodeId, eps: f64) -> NodeId {
        let v = self.value(a).map(|x| 1.0 / (x + eps).sqrt());
        self.unary(a, v, move |g, id, grad| {
            grad.zip_map(g.value(id), |gr, y| gr * (-0.5) * y * y * y)
        })
    }

    /// Clamp to [0,1]; gradient is zero where the input lies outside.
    pub fn clamp01(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.clamp(0.0, 1.0));
        self.unary(a, v, move |g, _, grad| {
            grad.zip_map(g.value(a), |gr, x| if (0.0..=1.0).contains(&x) { gr } else { 0.0 })
        })
    }

    // ---- broadcast helpers ------------------------------------------------

    /// (m,n) + (n,) broadcast over rows.
    pub fn add_bias_rows(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let x = self.value(a);
        let b = self.value(bias);
        let (m, n) = (x.shape()[0], x.shape()[1]);
        assert_eq!(b.shape(), &[n], "bias shape");
        let mut out = x.clone();
        for i in 0..m {
            for j in 0..n {
                out.data_mut()[i * n + j] += b.data()[j];
            }
        }
        let ng = self.nodes[a].needs_grad || self.nodes[bias].needs_grad;
        self.push(
            out,
            ng,
            Some(Box::new(move |_, grad| {
                let mut gb = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        gb[j] += grad.data()[i * n + j];
                    }
                }
                vec![(a, grad.clone()), (bias, Tensor::new(vec![n], gb))]
            })),
        )
    }

    /// (c,h,w) + (c,) broadcast over spatial dims.
    pub fn add_bias_chw(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let x = self.value(a);
        let b = self.value(bias);
        let (c, h, w) = dims3(x);
        assert_eq!(b.shape(), &[c], "bias shape");
        let hw = h * w;
        let mut out = x.clone();
        for ch in 0..c {
            let bv = b.data()[ch];
            for v in &mut out.data_mut()[ch * hw..(ch + 1) * hw] {
                *v += bv;
            }
        }
        let ng = self.nodes[a].needs_grad || self.nodes[bias].needs_grad;
        self.push(
            out,
            ng,
            Some(Box::new(move |_, grad| {
                let mut gb = vec![0.0; c];
                for ch in 0..c {
                    gb[ch] = grad.data()[ch * hw..(ch + 1) * hw].iter().sum();
                }
                vec![(a, grad.clone()), (bias, Tensor::new(vec![c], gb))]
            })),
        )
    }

    /// (c,h,w) * (c,) broadcast over spatial dims.
    pub fn mul_channels(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let x = self.value(a);
        let sv = self.value(s);
        let (c, h, w) = dims3(x);
        assert_eq!(sv.shape(), &[c], "scale shape");
        let hw = h * w;
        let mut out = x.clone();
        for ch in 0..c {
            let f = sv.data()[ch];
            for v in &mut out.data_mut()[ch * hw..(ch + 1) * hw] {
                *v *= f;
            }
        }
        let ng = self.nodes[a].needs_grad || self.nodes[s].needs_grad;
        self.push(
            out,
            ng,
            Some(Box::new(move |g, grad| {
                let x = g.value(a);
                let sv = g.value(s);
                let mut gx = grad.clone();
                let mut gs = vec![0.0; c];
                for ch in 0..c {
                    let f = sv.data()[ch];
                    let mut acc = 0.0;
                    for k in ch * hw..(ch + 1) * hw {
                        acc += grad.data()[k] * x.data()[k];
                        gx.data_mut()[k] *= f;
                    }
                    gs[ch] = acc;
                }
                vec![(a, gx), (s, Tensor::new(vec![c], gs))]
            })),
        )
    }

    /// (m,n) * (m,) broadcast over columns.
    pub fn mul_rows(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let x = self.value(a);
        let sv = self.value(s);
        let (m, n) = (x.shape()[0], x.shape()[1]);
        assert_eq!(sv.shape(), &[m], "row scale shape");
        let mut out = x.clone();
        for i in 0..m {
            let f = sv.data()[i];
            for v in &mut out.data_mut()[i * n..(i + 1) * n] {
                *v *= f;
            }
        }
        let ng = self.nodes[a].needs_grad || self.nodes[s].needs_grad;
        self.push(
            out,
            ng,
            Some(Box::new(move |g, grad| {
                let x = g.value(a);
                let sv = g.value(s);
                let mut gx = grad.clone();
                let mut gs = vec![0.0; m];
                for i in 0..m {
                    let f = sv.data()[i];
                    let mut acc = 0.0;
                    for k in i * n..(i + 1) * n {
                        acc += grad.data()[k] * x.data()[k];
                        gx.data_mut()[k] *= f;
                    }
                    gs[i] = acc;
                }
                vec![(a, gx), (s, Tensor::new(vec![m], gs))]
            })),
        )
    }

    /// (c,h,w) * (h,w) broadcast over channels.
    pub fn mul_hw(&mut self, a: NodeId, m: NodeId) -> NodeId {
        let x = self.value(a);
        let mv = self.value(m);
        let (c, h, w) = dims3(x);
        assert_eq!(mv.shape(), &[h, w], "spatial mask shape");
        let hw = h * w;
        let mut out = x.clone();
        for ch in 0..c {
            for k in 0..hw {
                out.data_mut()[ch * hw + k] *= mv.data()[k];
            }
        }
        let ng = self.nodes[a].needs_grad || self.nodes[m].needs_grad;
        self.push(
            out,
            ng,
            Some(Box::new(move |g, grad| {
                let x = g.value(a);
                let mv = g.value(m);
                let mut gx = grad.clone();
                let mut gm = vec![0.0; hw];
                for ch in 0..c {
                    for k in 0..hw {
                        let idx = ch * hw + k;
                        gm[k] += grad.data()[idx] * x.data()[idx];
                        gx.data_mut()[idx] *= mv.data()[k];
                    }
                }
                vec![(a, gx), (m, Tensor::new(vec![h, w], gm))]
            })),
        )
    }

    /// Sum of (c,h,w) over channels -> (h,w).
    pub fn sum_channels(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let (c, h, w) = dims3(x);
        let hw = h * w;
        let mut out = vec![0.0; hw];
        for ch in 0..c {
            for k in 0..hw {
                out[k] += x.data()[ch * hw + k];
            }
        }
        self.unary(a, Tensor::new(vec![h, w], out), move |_, _, grad| {
            let mut gx = vec![0.0; c * hw];
            for ch in 0..c {
                gx[ch * hw..(ch + 1) * hw].copy_from_slice(grad.data());
            }
            Tensor::new(vec![c, h, w], gx)
        })
    }

    /// Sum over all trailing axes, keeping the first `keep` axes.
    pub fn sum_trailing(&mut self, a: NodeId, keep: usize) -> NodeId {
        let x = self.value(a);
        assert!(keep < x.shape().len());
        let head: Vec<usize> = x.shape()[..keep].to_vec();
        let rows: usize = head.iter().product();
        let cols: usize = x.shape()[keep..].iter().product();
        let mut out = vec![0.0; rows];
        for (i, o) in out.iter_mut().enumerate() {
            *o = x.data()[i * cols..(i + 1) * cols].iter().sum();
        }
        let full_shape = x.shape().to_vec();
        self.unary(a, Tensor::new(head, out), move |_, _, grad| {
            let mut gx = vec![0.0; rows * cols];
            for i in 0..rows {
                let gv = grad.data()[i];
                for v in &mut gx[i * cols..(i + 1) * cols] {
                    *v = gv;
                }
            }
            Tensor::new(full_shape.clone(), gx)
        })
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let s: f64 = x.data().iter().sum();
        let shape = x.shape().to_vec();
        self.unary(a, Tensor::scalar(s), move |_, _, grad| {
            Tensor::full(&shape, grad.item())
        })
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    // ---- shape ops ---------------------------------------------------------

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self.value(a).reshape(shape);
        let old: Vec<usize> = self.value(a).shape().to_vec();
        self.unary(a, v, move |_, _, grad| grad.reshape(&old))
    }

    /// Concatenate along axis 0 (all trailing dims must match).
    pub fn concat_axis0(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let trailing: Vec<usize> = self.value(parts[0]).shape()[1..].to_vec();
        let tn: usize = trailing.iter().product();
        let mut rows = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(&v.shape()[1..], trailing.as_slice(), "concat_axis0 trailing dims");
            rows += v.shape()[0];
            sizes.push(v.shape()[0]);
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&trailing);
        let parts_vec: Vec<NodeId> = parts.to_vec();
        let ng = parts.iter().any(|&p| self.nodes[p].needs_grad);
        self.push(
            Tensor::new(shape, data),
            ng,
            Some(Box::new(move |_, grad| {
                let mut out = Vec::new();
                let mut offset = 0;
                for (&p, &rows_p) in parts_vec.iter().zip(&sizes) {
                    let len = rows_p * tn;
                    let mut shape = vec![rows_p];
                    shape.extend_from_slice(&trailing);
                    out.push((p, Tensor::new(shape, grad.data()[offset..offset + len].to_vec())));
                    offset += len;
                }
                out
            })),
        )
    }

    /// Concatenate 2-D tensors along axis 1.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).shape()[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let v = self.value(p);
                assert_eq!(v.shape()[0], m, "concat_cols row count");
                v.shape()[1]
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut col = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            for i in 0..m {
                data[i * n + col..i * n + col + w].copy_from_slice(&v.data()[i * w..(i + 1) * w]);
            }
            col += w;
        }
        let parts_vec: Vec<NodeId> = parts.to_vec();
        let ng = parts.iter().any(|&p| self.nodes[p].needs_grad);
        self.push(
            Tensor::new(vec![m, n], data),
            ng,
            Some(Box::new(move |_, grad| {
                let mut out = Vec::new();
                let mut col = 0;
                for (&p, &w) in parts_vec.iter().zip(&widths) {
                    let mut gd = vec![0.0; m * w];
                    for i in 0..m {
                        gd[i * w..(i + 1) * w]
                            .copy_from_slice(&grad.data()[i * n + col..i * n + col + w]);
                    }
                    out.push((p, Tensor::new(vec![m, w], gd)));
                    col += w;
                }
                out
            })),
        )
    }

    pub fn slice_axis0(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let x = self.value(a);
        let trailing: Vec<usize> = x.shape()[1..].to_vec();
        let tn: usize = trailing.iter().product();
        let rows = x.shape()[0];
        assert!(start + len <= rows, "slice_axis0 out of range");
        let mut shape = vec![len];
        shape.extend_from_slice(&trailing);
        let v = Tensor::new(shape, x.data()[start * tn..(start + len) * tn].to_vec());
        let full_shape = x.shape().to_vec();
        self.unary(a, v, move |_, _, grad| {
            let mut gx = Tensor::zeros(&full_shape);
            gx.data_mut()[start * tn..(start + len) * tn].copy_from_slice(grad.data());
            gx
        })
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let x = self.value(a);
        let (m, n) = (x.shape()[0], x.shape()[1]);
        assert!(start + len <= n, "slice_cols out of range");
        let mut data = vec![0.0; m * len];
        for i in 0..m {
            data[i * len..(i + 1) * len]
                .copy_from_slice(&x.data()[i * n + start..i * n + start + len]);
        }
        self.unary(a, Tensor::new(vec![m, len], data), move |_, _, grad| {
            let mut gx = Tensor::zeros(&[m, n]);
            for i in 0..m {
                gx.data_mut()[i * n + start..i * n + start + len]
                    .copy_from_slice(&grad.data()[i * len..(i + 1) * len]);
            }
            gx
        })
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.nodes[a].needs_grad || self.nodes[b].needs_grad;
        self.push(
            v,
            ng,
            Some(Box::new(move |g, grad| {
                vec![
                    (a, grad.matmul_nt(g.value(b))),
                    (b, g.value(a).matmul_tn(grad)),
                ]
            })),
        )
    }

    /// a (m,k) x b (n,k)^T -> (m,n)
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_nt(self.value(b));
        let ng = self.nodes[a].needs_grad || self.nodes[b].needs_grad;
        self.push(
            v,
            ng,
            Some(Box::new(move |g, grad| {
                vec![
                    (a, grad.matmul(g.value(b))),
                    (b, grad.matmul_tn(g.value(a))),
                ]
            })),
        )
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let (m, n) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x.data()[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                out[i * n + j] = e;
                z += e;
            }
            for v in &mut out[i * n..(i + 1) * n] {
                *v /= z;
            }
        }
        self.unary(a, Tensor::new(vec![m, n], out), move |g, id, grad| {
            let y = g.value(id);
            let mut gx = vec![0.0; m * n];
            for i in 0..m {
                let yr = &y.data()[i * n..(i + 1) * n];
                let gr = &grad.data()[i * n..(i + 1) * n];
                let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for j in 0..n {
                    gx[i * n + j] = yr[j] * (gr[j] - dot);
                }
            }
            Tensor::new(vec![m, n], gx)
        })
    }

    // ---- convolution & spatial ops ------------------------------------------

    /// 2-D convolution, x (c_in,h,w), weight (c_out,c_in,kh,kw), zero padding.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let xv = self.value(x);
        let wv = self.value(w);
        let (cin, h, win) = dims3(xv);
        assert_eq!(wv.shape().len(), 4, "conv weight must be 4-D");
        let (cout, wcin, kh, kw) =
            (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(cin, wcin, "conv channel mismatch");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (win + 2 * pad - kw) / stride + 1;
        let cols = im2col(xv, kh, kw, stride, pad, ho, wo);
        let wmat = wv.reshape(&[cout, cin * kh * kw]);
        let y = wmat.matmul(&cols).reshape(&[cout, ho, wo]);
        let ng = self.nodes[x].needs_grad || self.nodes[w].needs_grad;
        self.push(
            y,
            ng,
            Some(Box::new(move |g, grad| {
                let xv = g.value(x);
                let wv = g.value(w);
                let gmat = grad.reshape(&[cout, ho * wo]);
                let cols = im2col(xv, kh, kw, stride, pad, ho, wo);
                let gw = gmat.matmul_nt(&cols).reshape(&[cout, cin, kh, kw]);
                let wmat = wv.reshape(&[cout, cin * kh * kw]);
                let gcols = wmat.matmul_tn(&gmat);
                let gx = col2im(&gcols, cin, h, win, kh, kw, stride, pad, ho, wo);
                vec![(x, gx), (w, gw)]
            })),
        )
    }

    /// Nearest-neighbour 2x upsampling of (c,h,w).
    pub fn upsample2x(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let (c, h, w) = dims3(x);
        let (h2, w2) = (h * 2, w * 2);
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for i in 0..h2 {
                for j in 0..w2 {
                    out[ch * h2 * w2 + i * w2 + j] = x.data()[ch * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        self.unary(a, Tensor::new(vec![c, h2, w2], out), move |_, _, grad| {
            let mut gx = vec![0.0; c * h * w];
            for ch in 0..c {
                for i in 0..h2 {
                    for j in 0..w2 {
                        gx[ch * h * w + (i / 2) * w + j / 2] +=
                            grad.data()[ch * h2 * w2 + i * w2 + j];
                    }
                }
            }
            Tensor::new(vec![c, h, w], gx)
        })
    }

    /// Bilinear lookup into img (c,h,w) at coords (m,2) of (row,col) fractions
    /// in [0,1] with align-corners semantics: fraction f maps to index f*(n-1).
    /// Differentiable in both the image and the coordinates; at the clamped
    /// border the coordinate gradient vanishes.
    pub fn grid_sample(&mut self, img: NodeId, coords: NodeId) -> NodeId {
        let iv = self.value(img);
        let cv = self.value(coords);
        let (c, h, w) = dims3(iv);
        assert_eq!(cv.shape().len(), 2);
        assert_eq!(cv.shape()[1], 2, "coords must be (m,2)");
        let m = cv.shape()[0];
        let mut out = vec![0.0; m * c];
        for q in 0..m {
            let (i0, i1, fi, j0, j1, fj) = bilinear_cell(cv.data()[q * 2], cv.data()[q * 2 + 1], h, w);
            for ch in 0..c {
                let base = ch * h * w;
                let v00 = iv.data()[base + i0 * w + j0];
                let v01 = iv.data()[base + i0 * w + j1];
                let v10 = iv.data()[base + i1 * w + j0];
                let v11 = iv.data()[base + i1 * w + j1];
                out[q * c + ch] = v00 * (1.0 - fi) * (1.0 - fj)
                    + v01 * (1.0 - fi) * fj
                    + v10 * fi * (1.0 - fj)
                    + v11 * fi * fj;
            }
        }
        let ng = self.nodes[img].needs_grad || self.nodes[coords].needs_grad;
        self.push(
            Tensor::new(vec![m, c], out),
            ng,
            Some(Box::new(move |g, grad| {
                let iv = g.value(img);
                let cv = g.value(coords);
                let mut gimg = Tensor::zeros(&[c, h, w]);
                let mut gco = vec![0.0; m * 2];
                for q in 0..m {
                    let (i0, i1, fi, j0, j1, fj) =
                        bilinear_cell(cv.data()[q * 2], cv.data()[q * 2 + 1], h, w);
                    let mut d_fi = 0.0;
                    let mut d_fj = 0.0;
                    for ch in 0..c {
                        let gq = grad.data()[q * c + ch];
                        let base = ch * h * w;
                        let v00 = iv.data()[base + i0 * w + j0];
                        let v01 = iv.data()[base + i0 * w + j1];
                        let v10 = iv.data()[base + i1 * w + j0];
                        let v11 = iv.data()[base + i1 * w + j1];
                        gimg.data_mut()[base + i0 * w + j0] += gq * (1.0 - fi) * (1.0 - fj);
                        gimg.data_mut()[base + i0 * w + j1] += gq * (1.0 - fi) * fj;
                        gimg.data_mut()[base + i1 * w + j0] += gq * fi * (1.0 - fj);
                        gimg.data_mut()[base + i1 * w + j1] += gq * fi * fj;
                        d_fi += gq * ((v10 - v00) * (1.0 - fj) + (v11 - v01) * fj);
                        d_fj += gq * ((v01 - v00) * (1.0 - fi) + (v11 - v10) * fi);
                    }
                    // chain through index = fraction * (n-1); clamped coords
                    // have i0 == i1 so the difference terms are already zero
                    gco[q * 2] = d_fi * (h.max(2) - 1) as f64;
                    gco[q * 2 + 1] = d_fj * (w.max(2) - 1) as f64;
                }
                vec![(img, gimg), (coords, Tensor::new(vec![m, 2], gco))]
            })),
        )
    }

    /// Translate (c,h,w) by integer (dy,dx) with zero fill.
    pub fn shift2d(&mut self, a: NodeId, dy: i64, dx: i64) -> NodeId {
        let x = self.value(a);
        let (c, h, w) = dims3(x);
        let v = shift_tensor(x, c, h, w, dy, dx);
        self.unary(a, v, move |_, _, grad| {
            shift_tensor(grad, c, h, w, -dy, -dx)
        })
    }

    /// Mirror (c,h,w) along the width axis.
    pub fn flip_w(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let (c, h, w) = dims3(x);
        let v = flip_tensor(x, c, h, w);
        self.unary(a, v, move |_, _, grad| flip_tensor(grad, c, h, w))
    }

    /// Normalize each row of (m,4) to unit length; zero rows map to
    /// (1,0,0,0) and receive no gradient.
    pub fn normalize_rows4(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let m = x.shape()[0];
        assert_eq!(x.shape()[1], 4);
        let mut out = vec![0.0; m * 4];
        for i in 0..m {
            let r = &x.data()[i * 4..(i + 1) * 4];
            let n = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2] + r[3] * r[3]).sqrt();
            if n == 0.0 {
                out[i * 4] = 1.0;
            } else {
                for k in 0..4 {
                    out[i * 4 + k] = r[k] / n;
                }
            }
        }
        self.unary(a, Tensor::new(vec![m, 4], out), move |g, id, grad| {
            let x = g.value(a);
            let y = g.value(id);
            let mut gx = vec![0.0; m * 4];
            for i in 0..m {
                let r = &x.data()[i * 4..(i + 1) * 4];
                let n = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2] + r[3] * r[3]).sqrt();
                if n == 0.0 {
                    continue;
                }
                let yr = &y.data()[i * 4..(i + 1) * 4];
                let gr = &grad.data()[i * 4..(i + 1) * 4];
                let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for k in 0..4 {
                    gx[i * 4 + k] = (gr[k] - yr[k] * dot) / n;
                }
            }
            Tensor::new(vec![m, 4], gx)
        })
    }

    // ---- backward ------------------------------------------------------------

    /// Reverse pass from a scalar root. Node ids are created in topological
    /// order, so a simple reverse sweep suffices.
    pub fn backward(&self, root: NodeId) -> Grads {
        assert_eq!(self.value(root).numel(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::scalar(1.0));
        for id in (0..=root).rev() {
            if grads[id].is_none() {
                continue;
            }
            if let Some(f) = &self.nodes[id].grad_fn {
                let grad = grads[id].take().unwrap();
                for (pid, contrib) in f(self, &grad) {
                    if !self.nodes[pid].needs_grad {
                        continue;
                    }
                    match &mut grads[pid] {
                        Some(t) => t.add_assign(&contrib),
                        slot => *slot = Some(contrib),
                    }
                }
                grads[id] = Some(grad);
            }
        }
        Grads(grads)
    }
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    assert_eq!(t.shape().len(), 3, "expected 3-D tensor, got {:?}", t.shape());
    (t.shape()[0], t.shape()[1], t.shape()[2])
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        (1.0 + x.exp()).ln()
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn bilinear_cell(fi: f64, fj: f64, h: usize, w: usize) -> (usize, usize, f64, usize, usize, f64) {
    let yi = (fi * (h - 1) as f64).clamp(0.0, (h - 1) as f64);
    let xj = (fj * (w - 1) as f64).clamp(0.0, (w - 1) as f64);
    let i0 = yi.floor() as usize;
    let j0 = xj.floor() as usize;
    let i1 = (i0 + 1).min(h - 1);
    let j1 = (j0 + 1).min(w - 1);
    (i0, i1, yi - i0 as f64, j0, j1, xj - j0 as f64)
}

fn im2col(x: &Tensor, kh: usize, kw: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Tensor {
    let (c, h, w) = dims3(x);
    let rows = c * kh * kw;
    let cols = ho * wo;
    let mut out = vec![0.0; rows * cols];
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let r = (ch * kh + ki) * kw + kj;
                let dst = &mut out[r * cols..(r + 1) * cols];
                for oi in 0..ho {
                    let ii = oi * stride + ki;
                    if ii < pad || ii >= h + pad {
                        continue;
                    }
                    let ii = ii - pad;
                    let src_row = &x.data()[(ch * h + ii) * w..(ch * h + ii + 1) * w];
                    for oj in 0..wo {
                        let jj = oj * stride + kj;
                        if jj < pad || jj >= w + pad {
                            continue;
                        }
                        dst[oi * wo + oj] = src_row[jj - pad];
                    }
                }
            }
        }
    }
    Tensor::new(vec![rows, cols], out)
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    gcols: &Tensor,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Tensor {
    let cols = ho * wo;
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let r = (ch * kh + ki) * kw + kj;
                let src = &gcols.data()[r * cols..(r + 1) * cols];
                for oi in 0..ho {
                    let ii = oi * stride + ki;
                    if ii < pad || ii >= h + pad {
                        continue;
                    }
                    let ii = ii - pad;
                    for oj in 0..wo {
                        let jj = oj * stride + kj;
                        if jj < pad || jj >= w + pad {
                            continue;
                        }
                        gx[(ch * h + ii) * w + jj - pad] += src[oi * wo + oj];
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], gx)
}

fn shift_tensor(x: &Tensor, c: usize, h: usize, w: usize, dy: i64, dx: i64) -> Tensor {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h as i64 {
            let si = i - dy;
            if si < 0 || si >= h as i64 {
                continue;
            }
            for j in 0..w as i64 {
                let sj = j - dx;
                if sj < 0 || sj >= w as i64 {
                    continue;
                }
                out[(ch * h + i as usize) * w + j as usize] =
                    x.data()[(ch * h + si as usize) * w + sj as usize];
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

fn flip_tensor(x: &Tensor, c: usize, h: usize, w: usize) -> Tensor {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[(ch * h + i) * w + j] = x.data()[(ch * h + i) * w + (w - 1 - j)];
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}
