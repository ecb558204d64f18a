//! Central finite-difference verification of tape gradients.

use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Relative error between analytic and numerical derivatives with an
/// absolute floor so near-zero gradients compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Element-wise relative error with a floor tied to the largest gradient in
/// the check, so zero-gradient elements are judged on the scale of the
/// finite-difference noise rather than an arbitrary absolute constant.
fn scaled_rel_err(a: f64, fd: f64, gmax: f64) -> f64 {
    (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3 * gmax + 1e-12)
}

/// Evaluate a scalar-producing builder once.
pub fn eval_scalar<F>(build: &F, inputs: &[Tensor]) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = build(&mut g, &ids);
    g.value(root).item()
}

/// Compare analytic gradients of `build` against central finite differences
/// for every element of every input. Returns the max relative error.
///
/// The graph is rebuilt per perturbation, so keep instances small.
pub fn finite_diff_check<F>(build: &F, inputs: &[Tensor], eps: f64) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = build(&mut g, &ids);
    assert_eq!(g.value(root).numel(), 1, "gradient check root must be scalar");
    let grads = g.backward(root);

    let mut pairs: Vec<(f64, f64)> = Vec::new();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(ids[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for j in 0..input.numel() {
            let x = input.data()[j];
            let h = eps * x.abs().max(1.0);
            work[i].data_mut()[j] = x + h;
            let f_plus = eval_scalar(build, &work);
            work[i].data_mut()[j] = x - h;
            let f_minus = eval_scalar(build, &work);
            work[i].data_mut()[j] = x;
            let fd = (f_plus - f_minus) / (2.0 * h);
            pairs.push((analytic.data()[j], fd));
        }
    }
    let gmax = pairs.iter().fold(0.0f64, |m, &(a, b)| m.max(a.abs()).max(b.abs()));
    pairs.iter().fold(0.0f64, |w, &(a, fd)| w.max(scaled_rel_err(a, fd, gmax)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], f: impl FnMut(usize) -> f64) -> Tensor {
        Tensor::from_fn(shape, f)
    }

    #[test]
    fn quadratic_grad_is_exact() {
        let x = t(&[3], |i| i as f64 + 0.5);
        let err = finite_diff_check(
            &|g, ids| {
                let sq = g.square(ids[0]);
                g.sum_all(sq)
            },
            &[x],
            1e-6,
        );
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn matmul_softmax_chain() {
        let a = t(&[3, 4], |i| ((i * 7 % 11) as f64 - 5.0) * 0.3);
        let b = t(&[4, 2], |i| ((i * 5 % 7) as f64 - 3.0) * 0.4);
        let err = finite_diff_check(
            &|g, ids| {
                let mm = g.matmul(ids[0], ids[1]);
                let sm = g.softmax_rows(mm);
                let sg = g.sigmoid(sm);
                g.mean_all(sg)
            },
            &[a, b],
            1e-5,
        );
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn conv_upsample_chain() {
        let x = t(&[2, 4, 4], |i| ((i * 13 % 17) as f64 - 8.0) * 0.2);
        let w = t(&[3, 2, 3, 3], |i| ((i * 11 % 13) as f64 - 6.0) * 0.15);
        let err = finite_diff_check(
            &|g, ids| {
                let y = g.conv2d(ids[0], ids[1], 1, 1);
                let u = g.upsample2x(y);
                let r = g.leaky_relu(u, 0.2);
                g.mean_all(r)
            },
            &[x, w],
            1e-5,
        );
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn strided_conv() {
        let x = t(&[2, 6, 6], |i| ((i * 3 % 19) as f64 - 9.0) * 0.1);
        let w = t(&[4, 2, 3, 3], |i| ((i * 7 % 23) as f64 - 11.0) * 0.1);
        let err = finite_diff_check(
            &|g, ids| {
                let y = g.conv2d(ids[0], ids[1], 2, 1);
                g.sum_all(y)
            },
            &[x, w],
            1e-5,
        );
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn grid_sample_image_and_coords() {
        let img = t(&[2, 5, 5], |i| ((i * 7 % 31) as f64) * 0.1);
        // interior coords away from cell boundaries
        let coords = Tensor::new(vec![3, 2], vec![0.31, 0.47, 0.62, 0.18, 0.11, 0.83]);
        let err = finite_diff_check(
            &|g, ids| {
                let s = g.grid_sample(ids[0], ids[1]);
                let sq = g.square(s);
                g.sum_all(sq)
            },
            &[img, coords],
            1e-6,
        );
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn broadcast_ops() {
        let x = t(&[3, 4, 4], |i| (i as f64 * 0.07).sin());
        let b = t(&[3], |i| i as f64 * 0.3 - 0.2);
        let m = t(&[4, 4], |i| (i as f64 * 0.13).cos());
        let err = finite_diff_check(
            &|g, ids| {
                let y = g.add_bias_chw(ids[0], ids[1]);
                let z = g.mul_channels(y, ids[1]);
                let q = g.mul_hw(z, ids[2]);
                let s = g.sum_channels(q);
                let t = g.tanh(s);
                g.mean_all(t)
            },
            &[x, b, m],
            1e-5,
        );
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn normalize_rows_and_slices() {
        let q = t(&[3, 4], |i| ((i * 5 % 9) as f64 - 4.0) * 0.4 + 0.1);
        let err = finite_diff_check(
            &|g, ids| {
                let n = g.normalize_rows4(ids[0]);
                let s = g.slice_cols(n, 1, 2);
                let e = g.exp(s);
                g.sum_all(e)
            },
            &[q],
            1e-6,
        );
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn disconnected_input_gets_no_gradient() {
        let a = t(&[2], |i| i as f64 + 1.0);
        let b = t(&[2], |i| i as f64 + 2.0);
        let mut g = Graph::new();
        let ia = g.leaf(a);
        let ib = g.leaf(b);
        let s = g.sum_all(ia);
        let grads = g.backward(s);
        assert!(grads.get(ia).is_some());
        assert!(grads.get(ib).is_none());
    }
}
