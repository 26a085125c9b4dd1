//! Central-difference validation of analytic gradients.

use std::collections::BTreeMap;

use super::graph::{Bindings, Graph, NodeId};
use super::{AutodiffError, Precision, Real, Tensor};

/// Default perturbation step.
pub const FD_STEP: f64 = 1e-5;
/// Default relative tolerance.
pub const FD_REL_TOL: f64 = 1e-4;
/// Gradient magnitudes below this floor are compared absolutely, keeping
/// central-difference noise on near-zero gradients from raising alarms.
const FD_DENOM_FLOOR: f64 = 1e-5;

/// Outcome of a finite-difference check on one input tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub input: String,
    pub coords_checked: usize,
    pub max_abs_diff: f64,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Compare the analytic gradient of `loss` with central differences for
/// every coordinate of the named input. Requires double precision: the
/// difference quotient at f32 has too little headroom to certify anything.
/// Non-differentiable kinks and discontinuities surface as failures by
/// construction, which is the desired behavior.
pub fn finite_difference_check<T: Real>(
    graph: &Graph<T>,
    bindings: &Bindings<'_, T>,
    loss: NodeId,
    input: &str,
    step: f64,
    rel_tol: f64,
) -> Result<FdReport, AutodiffError> {
    if T::PRECISION != Precision::Double {
        return Err(AutodiffError::DoublePrecisionRequired);
    }

    // Owned copy of the bindings with requires_grad forced on the probed
    // input, so the analytic gradient is always produced.
    let mut owned: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for (name, tensor) in bindings {
        let mut t = (*tensor).clone();
        if name == input {
            t.set_requires_grad(true);
        }
        owned.insert(name.clone(), t);
    }
    if !owned.contains_key(input) {
        return Err(AutodiffError::MissingBinding(input.to_string()));
    }

    fn as_bindings<T: Real>(m: &BTreeMap<String, Tensor<T>>) -> Bindings<'_, T> {
        m.iter().map(|(k, v)| (k.clone(), v)).collect()
    }

    let eval = graph.eval(&as_bindings(&owned))?;
    let grads = graph.backward(&eval, loss)?;
    let analytic = grads.get(input).expect("requires_grad was set").clone();

    let n = analytic.numel();
    let h = T::from_f64(step);
    let mut max_abs_diff = 0.0f64;
    let mut max_rel_err = 0.0f64;
    for i in 0..n {
        let base = owned[input].data()[i];
        let loss_at = |v: T, owned: &mut BTreeMap<String, Tensor<T>>| -> Result<f64, AutodiffError> {
            owned.get_mut(input).unwrap().data_mut()[i] = v;
            let e = graph.eval(&as_bindings(owned))?;
            Ok(e.value(loss).item().to_f64())
        };
        let plus = loss_at(base + h, &mut owned)?;
        let minus = loss_at(base - h, &mut owned)?;
        owned.get_mut(input).unwrap().data_mut()[i] = base;
        let fd = (plus - minus) / (2.0 * step);
        let an = analytic.data()[i].to_f64();
        let abs_diff = (fd - an).abs();
        let rel = abs_diff / fd.abs().max(an.abs()).max(FD_DENOM_FLOOR);
        max_abs_diff = max_abs_diff.max(abs_diff);
        max_rel_err = max_rel_err.max(rel);
    }
    Ok(FdReport {
        input: input.to_string(),
        coords_checked: n,
        max_abs_diff,
        max_rel_err,
        pass: max_rel_err <= rel_tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::GraphBuilder;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Case {
        name: &'static str,
        graph: Graph<f64>,
        tensors: BTreeMap<String, Tensor<f64>>,
        loss: NodeId,
        inputs: Vec<&'static str>,
    }

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::randn(shape, 0.0, 1.0, rng)
    }

    fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let t = randn(shape, rng);
        let data = t.data().iter().map(|v| v.abs() + 0.5).collect();
        Tensor::new(shape, data).unwrap()
    }

    fn cases() -> Vec<Case> {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut out = Vec::new();

        // matmul, all three layouts, batched with shared rhs.
        {
            let mut gb = GraphBuilder::<f64>::new();
            let a = gb.input("a", &[2, 3, 4]).unwrap();
            let b = gb.input("b", &[4, 5]).unwrap();
            let c = gb.matmul(a, b).unwrap();
            let loss = gb.sum_all(c).unwrap();
            let tensors = BTreeMap::from([
                ("a".to_string(), randn(&[2, 3, 4], &mut rng)),
                ("b".to_string(), randn(&[4, 5], &mut rng)),
            ]);
            out.push(Case { name: "matmul_nn_shared", graph: gb.finish(), tensors, loss, inputs: vec!["a", "b"] });
        }
        {
            let mut gb = GraphBuilder::<f64>::new();
            let a = gb.input("a", &[2, 3, 4]).unwrap();
            let b = gb.input("b", &[2, 5, 4]).unwrap();
            let c = gb.matmul_nt(a, b).unwrap();
            let loss = gb.frob_sq(c).unwrap();
            let tensors = BTreeMap::from([
                ("a".to_string(), randn(&[2, 3, 4], &mut rng)),
                ("b".to_string(), randn(&[2, 5, 4], &mut rng)),
            ]);
            out.push(Case { name: "matmul_nt_frobsq", graph: gb.finish(), tensors, loss, inputs: vec!["a", "b"] });
        }
        {
            let mut gb = GraphBuilder::<f64>::new();
            let a = gb.input("a", &[4, 3]).unwrap();
            let b = gb.input("b", &[4, 5]).unwrap();
            let c = gb.matmul_tn(a, b).unwrap();
            let loss = gb.sum_all(c).unwrap();
            let tensors = BTreeMap::from([
                ("a".to_string(), randn(&[4, 3], &mut rng)),
                ("b".to_string(), randn(&[4, 5], &mut rng)),
            ]);
            out.push(Case { name: "matmul_tn", graph: gb.finish(), tensors, loss, inputs: vec!["a", "b"] });
        }
        // swap_axes + reshape + concat + slice chain.
        {
            let mut gb = GraphBuilder::<f64>::new();
            let x = gb.input("x", &[2, 3, 2, 2]).unwrap();
            let y = gb.swap_axes(x, 1, 2).unwrap();
            let r = gb.reshape(y, &[2, 2, 6]).unwrap();
            let s1 = gb.slice_axis(r, 2, 0, 2).unwrap();
            let s2 = gb.slice_axis(r, 2, 2, 4).unwrap();
            let cat = gb.concat(&[s2, s1], 2).unwrap();
            let sq = gb.mul(cat, cat).unwrap();
            let loss = gb.sum_all(sq).unwrap();
            let tensors =
                BTreeMap::from([("x".to_string(), randn(&[2, 3, 2, 2], &mut rng))]);
            out.push(Case { name: "reshuffle_chain", graph: gb.finish(), tensors, loss, inputs: vec!["x"] });
        }
        // gather table gradient.
        {
            let mut gb = GraphBuilder::<f64>::new();
            let table = gb.input("table", &[5, 3]).unwrap();
            let ids = gb.input("ids", &[4]).unwrap();
            let rows = gb.gather(table, ids).unwrap();
            let sq = gb.mul(rows, rows).unwrap();
            let loss = gb.mean_all(sq).unwrap();
            let tensors = BTreeMap::from([
                ("table".to_string(), randn(&[5, 3], &mut rng)),
                ("ids".to_string(), Tensor::from_f64s(&[4], &[0.0, 2.0, 2.0, 4.0]).unwrap()),
            ]);
            out.push(Case { name: "gather", graph: gb.finish(), tensors, loss, inputs: vec!["table"] });
        }
        // add/sub/mul with both broadcast directions.
        {
            let mut gb = GraphBuilder::<f64>::new();
            let x = gb.input("x", &[3, 4]).unwrap();
            let b = gb.input("b", &[4]).unwrap();
            let s = gb.add(x, b).unwrap();
            let d = gb.sub(b, x).unwrap();
            let m = gb.mul(s, d).unwrap();
            let sc = gb.scale(m, 0.7).unwrap();
            let sh = gb.add_scalar(sc, -0.3).unwrap();
            let loss = gb.frob_sq(sh).unwrap();
            let tensors = BTreeMap::from([
                ("x".to_string(), randn(&[3, 4], &mut rng)),
                ("b".to_string(), randn(&[4], &mut rng)),
            ]);
            out.push(Case { name: "elementwise_broadcast", graph: gb.finish(), tensors, loss, inputs: vec!["x", "b"] });
        }
        // exp/log/powf/silu on positive inputs.
        {
            let mut gb = GraphBuilder::<f64>::new();
            let x = gb.input("x", &[6]).unwrap();
            let e = gb.exp(x).unwrap();
            let l = gb.log(e).unwrap();
            let p = gb.powf(e, -0.5).unwrap();
            let si = gb.silu(l).unwrap();
            let both = gb.mul(p, si).unwrap();
            let loss = gb.sum_all(both).unwrap();
            let tensors = BTreeMap::from([("x".to_string(), positive(&[6], &mut rng))]);
            out.push(Case { name: "scalar_functions", graph: gb.finish(), tensors, loss, inputs: vec!["x"] });
        }
        // softmax + rms_norm + mean_axis.
        {
            let mut gb = GraphBuilder::<f64>::new();
            let x = gb.input("x", &[2, 3, 5]).unwrap();
            let n = gb.rms_norm(x, 1e-5).unwrap();
            let s = gb.softmax(n).unwrap();
            let m = gb.mean_axis(s, 1).unwrap();
            let loss = gb.frob_sq(m).unwrap();
            let tensors = BTreeMap::from([("x".to_string(), randn(&[2, 3, 5], &mut rng))]);
            out.push(Case { name: "softmax_rmsnorm", graph: gb.finish(), tensors, loss, inputs: vec!["x"] });
        }
        // cross entropy through nll rows.
        {
            let mut gb = GraphBuilder::<f64>::new();
            let logits = gb.input("logits", &[3, 7]).unwrap();
            let targets = gb.input("targets", &[3]).unwrap();
            let loss = gb.cross_entropy(logits, targets).unwrap();
            let tensors = BTreeMap::from([
                ("logits".to_string(), randn(&[3, 7], &mut rng)),
                ("targets".to_string(), Tensor::from_f64s(&[3], &[6.0, 0.0, 3.0]).unwrap()),
            ]);
            out.push(Case { name: "cross_entropy", graph: gb.finish(), tensors, loss, inputs: vec!["logits"] });
        }
        // per-sample nll -> mean over positions -> exp score.
        {
            let mut gb = GraphBuilder::<f64>::new();
            let logits = gb.input("logits", &[2, 3, 5]).unwrap();
            let targets = gb.input("targets", &[2, 3]).unwrap();
            let nll = gb.nll_rows(logits, targets).unwrap();
            let per = gb.mean_axis(nll, 1).unwrap();
            let neg = gb.scale(per, -1.0).unwrap();
            let score = gb.exp(neg).unwrap();
            let loss = gb.sum_all(score).unwrap();
            let tensors = BTreeMap::from([
                ("logits".to_string(), randn(&[2, 3, 5], &mut rng)),
                (
                    "targets".to_string(),
                    Tensor::from_f64s(&[2, 3], &[0.0, 4.0, 2.0, 1.0, 1.0, 3.0]).unwrap(),
                ),
            ]);
            out.push(Case { name: "sequence_scores", graph: gb.finish(), tensors, loss, inputs: vec!["logits"] });
        }
        // broadcast_last + expand_leading + mean_all.
        {
            let mut gb = GraphBuilder::<f64>::new();
            let alpha = gb.input("alpha", &[2, 3, 1]).unwrap();
            let h = gb.input("h", &[2, 3, 4]).unwrap();
            let wide = gb.broadcast_last(alpha, 4).unwrap();
            let weighted = gb.mul(wide, h).unwrap();
            let small = gb.input("small", &[3, 4]).unwrap();
            let big = gb.expand_leading(small, &[2]).unwrap();
            let sum = gb.add(weighted, big).unwrap();
            let loss = gb.mean_all(sum).unwrap();
            let tensors = BTreeMap::from([
                ("alpha".to_string(), randn(&[2, 3, 1], &mut rng)),
                ("h".to_string(), randn(&[2, 3, 4], &mut rng)),
                ("small".to_string(), randn(&[3, 4], &mut rng)),
            ]);
            out.push(Case {
                name: "broadcast_expand",
                graph: gb.finish(),
                tensors,
                loss,
                inputs: vec!["alpha", "h", "small"],
            });
        }
        out
    }

    #[test]
    fn every_differentiable_op_passes_fd_check() {
        for case in cases() {
            let bindings: Bindings<'_, f64> =
                case.tensors.iter().map(|(k, v)| (k.clone(), v)).collect();
            for input in &case.inputs {
                let report = finite_difference_check(
                    &case.graph,
                    &bindings,
                    case.loss,
                    input,
                    FD_STEP,
                    FD_REL_TOL,
                )
                .unwrap();
                assert!(
                    report.pass,
                    "case {} input {input}: rel err {} abs diff {}",
                    case.name, report.max_rel_err, report.max_abs_diff
                );
            }
        }
    }

    #[test]
    fn discontinuous_op_is_flagged() {
        // sign() has zero analytic gradient, but a coordinate within the
        // step of the jump produces a huge difference quotient.
        let mut gb = GraphBuilder::<f64>::new();
        let x = gb.input("x", &[3]).unwrap();
        let s = gb.sign(x).unwrap();
        let y = gb.mul(s, x).unwrap();
        let loss = gb.sum_all(y).unwrap();
        let g = gb.finish();
        let t = Tensor::from_f64s(&[3], &[0.9, -0.7, 1e-7]).unwrap();
        let bindings: Bindings<'_, f64> = BTreeMap::from([("x".to_string(), &t)]);
        let report =
            finite_difference_check(&g, &bindings, loss, "x", FD_STEP, FD_REL_TOL).unwrap();
        assert!(!report.pass, "discontinuity must be flagged: {report:?}");
        assert!(report.max_rel_err > 0.5);
    }

    #[test]
    fn single_precision_is_rejected() {
        let mut gb = GraphBuilder::<f32>::new();
        let x = gb.input("x", &[2]).unwrap();
        let loss = gb.sum_all(x).unwrap();
        let g = gb.finish();
        let t = Tensor::<f32>::zeros(&[2]);
        let bindings: Bindings<'_, f32> = BTreeMap::from([("x".to_string(), &t)]);
        let err =
            finite_difference_check(&g, &bindings, loss, "x", FD_STEP, FD_REL_TOL).unwrap_err();
        assert!(matches!(err, AutodiffError::DoublePrecisionRequired));
    }

    #[test]
    fn off_path_input_passes_with_zero_gradients() {
        let mut gb = GraphBuilder::<f64>::new();
        let x = gb.input("x", &[2]).unwrap();
        let dead = gb.input("dead", &[2]).unwrap();
        let _ = dead;
        let loss = gb.frob_sq(x).unwrap();
        let g = gb.finish();
        let tx = Tensor::from_f64s(&[2], &[1.0, -2.0]).unwrap();
        let td = Tensor::from_f64s(&[2], &[3.0, 4.0]).unwrap();
        let bindings: Bindings<'_, f64> =
            BTreeMap::from([("x".to_string(), &tx), ("dead".to_string(), &td)]);
        let report =
            finite_difference_check(&g, &bindings, loss, "dead", FD_STEP, FD_REL_TOL).unwrap();
        assert!(report.pass);
        assert_eq!(report.max_abs_diff, 0.0);
    }
}
