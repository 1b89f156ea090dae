//! Central finite-difference validation of the analytic gradients.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{BatchNormStats, Graph, Mode, NodeId};
use super::tensor::Tensor;
use super::NumericsError;

/// Worst observed disagreement between analytic and numeric gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// max over elements of |analytic - numeric| / max(1, |analytic|):
    /// relative error for large gradients, absolute error below unit scale
    /// (where a ratio would amplify finite-difference noise meaninglessly).
    pub max_rel_err: f64,
    /// Which parameter tensor held the worst element.
    pub worst_param: usize,
    /// Flat index of the worst element within that parameter.
    pub worst_index: usize,
    /// Total elements checked.
    pub checked: usize,
}

/// Compare reverse-mode gradients of a scalar-valued graph against central
/// finite differences with step `h`, densely over every parameter element.
///
/// `build` receives a fresh graph plus node ids for `params` (inserted in
/// order) and returns the loss node. It is called once for the analytic
/// pass and twice per parameter element for the numeric pass, so keep the
/// graphs small. Functions with kinks (ReLU at zero, the cross-entropy
/// clamp) must be probed away from them; finite differences are meaningless
/// across a non-differentiable point.
pub fn grad_check<F>(
    params: &[Tensor],
    h: f64,
    mut build: F,
) -> Result<GradCheckReport, NumericsError>
where
    F: FnMut(&mut Graph, &[NodeId]) -> Result<NodeId, NumericsError>,
{
    assert!(h.is_finite() && h > 0.0, "grad_check: h must be positive");

    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p)).collect();
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| g.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    drop(g);

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport { max_rel_err: 0.0, worst_param: 0, worst_index: 0, checked: 0 };
    for pi in 0..work.len() {
        for ei in 0..work[pi].numel() {
            let orig = work[pi].data[ei];
            work[pi].data[ei] = orig + h;
            let fp = eval_scalar(&work, &mut build)?;
            work[pi].data[ei] = orig - h;
            let fm = eval_scalar(&work, &mut build)?;
            work[pi].data[ei] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[pi][ei];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = pi;
                report.worst_index = ei;
            }
        }
    }
    Ok(report)
}

fn eval_scalar<F>(params: &[Tensor], build: &mut F) -> Result<f64, NumericsError>
where
    F: FnMut(&mut Graph, &[NodeId]) -> Result<NodeId, NumericsError>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p)).collect();
    let loss = build(&mut g, &ids)?;
    let v = g.value(loss);
    if v.numel() != 1 {
        return Err(NumericsError::NonScalarOutput { shape: v.shape().to_vec() });
    }
    Ok(v.data()[0])
}

/// Named gradient checks covering every differentiable op in the graph,
/// with inputs drawn from the given seed. Used by unit tests here and by
/// the acceptance suite across many seeds.
pub fn op_gradient_suite(seed: u64) -> Vec<(&'static str, GradCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-3;
    // Keep ReLU inputs clear of the kink at 0 by at least several h.
    let away = |t: &mut Tensor| {
        for v in t.data.iter_mut() {
            if v.abs() < 0.05 {
                *v += 0.1 * if *v < 0.0 { -1.0 } else { 1.0 };
            }
        }
    };
    let randn = |shape: Vec<usize>, rng: &mut ChaCha8Rng| Tensor::randn(shape, 1.0, rng);

    let mut out = Vec::new();

    // Affine chain into the loss: linear -> sigmoid -> cross-entropy.
    {
        let x = randn(vec![4, 3], &mut rng);
        let w = randn(vec![3, 1], &mut rng);
        let b = randn(vec![1], &mut rng);
        let r = grad_check(&[x, w, b], h, |g, ids| {
            let y = g.linear(ids[0], ids[1], ids[2])?;
            let p = g.sigmoid(y);
            g.bce_loss(p, &[1.0, 0.0, 1.0, 0.0])
        })
        .expect("linear_sigmoid_bce");
        out.push(("linear_sigmoid_bce", r));
    }

    // Batch normalization with batch statistics, all three operands.
    {
        let x = randn(vec![6, 4], &mut rng);
        let gamma = randn(vec![4], &mut rng);
        let beta = randn(vec![4], &mut rng);
        let r = grad_check(&[x, gamma, beta], h, |g, ids| {
            let mut stats = BatchNormStats::new(4);
            let y = g.batch_norm(ids[0], ids[1], ids[2], &mut stats, Mode::Train)?;
            let s = g.sigmoid(y);
            Ok(g.sum_all(s))
        })
        .expect("batch_norm_train");
        out.push(("batch_norm_train", r));
    }

    // Batch normalization with frozen statistics.
    {
        let x = randn(vec![3, 4], &mut rng);
        let gamma = randn(vec![4], &mut rng);
        let beta = randn(vec![4], &mut rng);
        let r = grad_check(&[x, gamma, beta], h, |g, ids| {
            let mut stats = BatchNormStats {
                mean: vec![0.3, -0.1, 0.0, 0.7],
                var: vec![2.0, 0.5, 1.0, 1.5],
            };
            let y = g.batch_norm(ids[0], ids[1], ids[2], &mut stats, Mode::Eval)?;
            Ok(g.sum_all(y))
        })
        .expect("batch_norm_eval");
        out.push(("batch_norm_eval", r));
    }

    // A miniature conditioned residual block: gate from a condition matrix,
    // broadcast over per-block rows, ReLU, affine, skip connection.
    {
        let mut x = randn(vec![6, 4], &mut rng);
        away(&mut x);
        let c = randn(vec![2, 3], &mut rng);
        let wg = randn(vec![3, 4], &mut rng);
        let w = randn(vec![4, 4], &mut rng);
        let b = randn(vec![4], &mut rng);
        let r = grad_check(&[x, c, wg, w, b], h, |g, ids| {
            let z = g.matmul(ids[1], ids[2])?;
            let sz = g.sigmoid(z);
            let e = g.scale(sz, 2.0);
            let gated = g.block_row_scale(ids[0], e)?;
            let a = g.relu(gated);
            let y = g.linear(a, ids[3], ids[4])?;
            let res = g.add(ids[0], y)?;
            Ok(g.sum_all(res))
        })
        .expect("gated_residual_block");
        out.push(("gated_residual_block", r));
    }

    // Per-block additive broadcast.
    {
        let x = randn(vec![6, 3], &mut rng);
        let e = randn(vec![3, 3], &mut rng);
        let r = grad_check(&[x, e], h, |g, ids| {
            let y = g.block_row_add(ids[0], ids[1])?;
            let s = g.sigmoid(y);
            Ok(g.sum_all(s))
        })
        .expect("block_row_add");
        out.push(("block_row_add", r));
    }

    // Strided convolution stack with pooling, as in the patch encoder.
    {
        let x = randn(vec![1, 6, 6], &mut rng);
        let w1 = randn(vec![2, 1, 3, 3], &mut rng);
        let b1 = randn(vec![2], &mut rng);
        let w2 = randn(vec![3, 2, 3, 3], &mut rng);
        let b2 = randn(vec![3], &mut rng);
        let wf = randn(vec![3, 2], &mut rng);
        let bf = randn(vec![2], &mut rng);
        let r = grad_check(&[x, w1, b1, w2, b2, wf, bf], h, |g, ids| {
            let c1 = g.conv2d_s2(ids[0], ids[1], ids[2])?;
            let s1 = g.sigmoid(c1);
            let c2 = g.conv2d_s2(s1, ids[3], ids[4])?;
            let p = g.global_avg_pool(c2)?;
            let y = g.linear(p, ids[5], ids[6])?;
            let s = g.sigmoid(y);
            Ok(g.sum_all(s))
        })
        .expect("conv_pool_chain");
        out.push(("conv_pool_chain", r));
    }

    // Embedding rows concatenated and mixed elementwise.
    {
        let table = randn(vec![3, 4], &mut rng);
        let x = randn(vec![2, 4], &mut rng);
        let r = grad_check(&[table, x], h, |g, ids| {
            let r0 = g.embed_row(ids[0], 0)?;
            let r2 = g.embed_row(ids[0], 2)?;
            let c = g.concat_rows(&[r0, r2])?;
            let m = g.elem_mul(c, ids[1])?;
            let s = g.sigmoid(m);
            Ok(g.sum_all(s))
        })
        .expect("embed_concat_mul");
        out.push(("embed_concat_mul", r));
    }

    // Cross-entropy probed directly, well inside the clamp.
    {
        let p = Tensor::new(
            vec![5, 1],
            (0..5).map(|_| 0.1 + 0.8 * rng.gen::<f64>()).collect(),
        )
        .unwrap();
        let r = grad_check(&[p], h * 0.01, |g, ids| g.bce_loss(ids[0], &[1.0, 0.0, 1.0, 1.0, 0.0]))
            .expect("bce_direct");
        out.push(("bce_direct", r));
    }

    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact_to_fd_accuracy() {
        let x = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let r = grad_check(&[x], 1e-3, |g, ids| {
            let sq = g.elem_mul(ids[0], ids[0])?;
            Ok(g.sum_all(sq))
        })
        .unwrap();
        assert_eq!(r.checked, 4);
        assert!(r.max_rel_err < 1e-8, "rel err {}", r.max_rel_err);
    }

    #[test]
    fn op_suite_passes_for_a_fixed_seed() {
        for (name, r) in op_gradient_suite(0) {
            assert!(r.max_rel_err < 1e-4, "{name}: rel err {} at param {} index {}",
                r.max_rel_err, r.worst_param, r.worst_index);
            assert!(r.checked > 0, "{name}: nothing checked");
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // d/dx of sum(2x) is 2 everywhere; lie about the constant by
        // checking sum(2x) against an analytic pass built with 3x.
        let x = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let mut flip = false;
        let r = grad_check(&[x], 1e-3, move |g, ids| {
            let c = if flip { 2.0 } else { 3.0 };
            flip = true;
            let y = g.scale(ids[0], c);
            Ok(g.sum_all(y))
        });
        // First build (analytic) used 3x, numeric used 2x: mismatch must be
        // loud, proving the checker can fail.
        let r = r.unwrap();
        assert!(r.max_rel_err > 0.1, "rel err {}", r.max_rel_err);
    }
}
