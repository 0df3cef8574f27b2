//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] lives for one forward pass. Parameters and inputs enter as leaves
//! (optionally requiring grad); every op appends a node. Gradients flow to the
//! input sample exactly as they flow to parameters, which is what the attack
//! relies on.

mod fd;
mod tape;
mod tensor;

pub use fd::{fd_gradient, relative_error};
pub use tape::{logsumexp, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn log_softmax_of_zeros_is_minus_ln2() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = tape.log_softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v + std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn logsumexp_of_single_element_is_identity() {
        for a in [-3.5, 0.0, 7.25, 1e3] {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::vector(vec![a]));
            let y = tape.logsumexp(x, 0).unwrap();
            assert_eq!(tape.value(y).item(), a);
        }
    }

    #[test]
    fn logsumexp_is_overflow_safe() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1000.0, 1000.0]));
        let y = tape.logsumexp(x, 0).unwrap();
        let v = tape.value(y).item();
        assert!(v.is_finite());
        assert!((v - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);
    }

    #[test]
    fn identity_matmul_preserves_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = rand_tensor(&mut rng, vec![3, 3]);
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(3));
        let mv = tape.constant(m.clone());
        let out = tape.matmul(i, mv).unwrap();
        assert_eq!(tape.value(out), &m);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 8.0]);
        tape.zero_grad(&[x]);
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn constant_loss_backward_is_noop() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(4.0));
        tape.backward(c).unwrap();
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn untracked_inputs_record_nothing() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.tanh(x).unwrap();
        let _ = tape.sum(y).unwrap();
        assert_eq!(tape.recorded_ops(), 0);
    }

    #[test]
    fn log_of_zero_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0]), true);
        assert!(matches!(tape.log(x), Err(crate::Error::NonFinite { op: "log" })));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2]));
        assert!(tape.add(a, b).is_err());
        assert!(tape.matmul(a, a).is_err());
    }

    #[test]
    fn fd_gradient_basic_cases() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let g = fd_gradient(|t| Ok(t.data().iter().sum()), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
        let x = Tensor::scalar(3.0);
        let g = fd_gradient(|t| Ok(t.item() * t.item()), &x, 1e-5).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-8);
    }

    /// Three tanh layers ending in a scalar, differentiated w.r.t. input and
    /// every weight.
    #[test]
    fn three_layer_tanh_network_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, vec![2, 4]);
        let ws: Vec<Tensor> = [(4, 5), (5, 3), (3, 1)]
            .iter()
            .map(|&(a, b)| rand_tensor(&mut rng, vec![a, b]))
            .collect();
        let bias = rand_tensor(&mut rng, vec![5]);

        let forward = |x: &Tensor, ws: &[Tensor], grad: bool| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), grad);
            let wv: Vec<Var> = ws.iter().map(|w| tape.leaf(w.clone(), grad)).collect();
            let bv = tape.constant(bias.clone());
            let mut h = tape.matmul(xv, wv[0]).unwrap();
            h = tape.add(h, bv).unwrap();
            h = tape.tanh(h).unwrap();
            h = tape.matmul(h, wv[1]).unwrap();
            h = tape.tanh(h).unwrap();
            h = tape.matmul(h, wv[2]).unwrap();
            h = tape.tanh(h).unwrap();
            let loss = tape.sum(h).unwrap();
            (tape, xv, wv, loss)
        };

        let (mut tape, xv, wv, loss) = forward(&x, &ws, true);
        tape.backward(loss).unwrap();

        let fx = fd_gradient(|t| Ok(tape_value(forward(t, &ws, false))), &x, 1e-5).unwrap();
        assert!(relative_error(tape.grad(xv).unwrap().data(), fx.data()) < 1e-6);
        for k in 0..3 {
            let fw = fd_gradient(
                |t| {
                    let mut w2 = ws.clone();
                    w2[k] = t.clone();
                    Ok(tape_value(forward(&x, &w2, false)))
                },
                &ws[k],
                1e-5,
            )
            .unwrap();
            assert!(relative_error(tape.grad(wv[k]).unwrap().data(), fw.data()) < 1e-6);
        }
    }

    fn tape_value((tape, _, _, loss): (Tape, Var, Vec<Var>, Var)) -> f64 {
        tape.value(loss).item()
    }

    /// Exercise every op's backward rule against central differences.
    #[test]
    fn every_op_passes_gradient_check() {
        type Build = fn(&mut Tape, Var, Var) -> crate::Result<Var>;
        let cases: Vec<(&str, Vec<usize>, Build)> = vec![
            ("add_bcast", vec![3, 4], |t, x, b| t.add(x, b)),
            ("sub_bcast", vec![3, 4], |t, x, b| t.sub(x, b)),
            ("mul_bcast", vec![3, 4], |t, x, b| t.mul(x, b)),
            ("scale", vec![3, 4], |t, x, _| t.scale(x, -1.7)),
            ("matmul", vec![3, 4], |t, x, b| {
                let b = t.reshape(b, vec![4, 1])?;
                t.matmul(x, b)
            }),
            ("tanh", vec![3, 4], |t, x, _| t.tanh(x)),
            ("relu", vec![3, 4], |t, x, _| t.relu(x)),
            ("exp", vec![3, 4], |t, x, _| t.exp(x)),
            ("log", vec![3, 4], |t, x, _| {
                let e = t.exp(x)?;
                t.log(e)
            }),
            ("neg", vec![3, 4], |t, x, _| t.neg(x)),
            ("mean", vec![3, 4], |t, x, _| t.mean(x)),
            ("concat", vec![3, 4], |t, x, _| {
                let a = t.slice(x, 0, 1)?;
                let b = t.slice(x, 2, 1)?;
                t.concat(&[b, x, a])
            }),
            ("stack_row", vec![3, 4], |t, x, b| {
                let r = t.row(x, 1)?;
                t.stack(&[r, b, r])
            }),
            ("gather", vec![3, 4], |t, x, _| t.gather(x, &[3, 0, 0, 2])),
            ("embedding", vec![3, 4], |t, x, _| t.embedding(x, &[2, 0, 2])),
            ("log_softmax0", vec![3, 4], |t, x, _| t.log_softmax(x, 0)),
            ("log_softmax1", vec![3, 4], |t, x, _| t.log_softmax(x, 1)),
            ("logsumexp0", vec![3, 4], |t, x, _| t.logsumexp(x, 0)),
            ("logsumexp1", vec![3, 4], |t, x, _| t.logsumexp(x, 1)),
            ("l2_norm", vec![3, 4], |t, x, _| t.l2_norm(x)),
            ("tanh_rnn", vec![3, 4], |t, x, b| {
                let c = t.reshape(b, vec![4, 1])?;
                let r = t.reshape(b, vec![1, 4])?;
                let w = t.matmul(c, r)?;
                t.tanh_rnn(x, w, false)
            }),
            ("tanh_rnn_rev", vec![5, 4], |t, x, b| {
                let s = t.stack(&[b, b, b, b])?;
                let w = t.scale(s, 0.5)?;
                let w = t.mul(w, b)?;
                t.tanh_rnn(x, w, true)
            }),
            ("additive_scores", vec![3, 4], |t, x, b| {
                let q = t.scale(b, -0.6)?;
                t.additive_scores(x, q, b)
            }),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (name, shape, build) in cases {
            let x0 = rand_tensor(&mut rng, shape);
            let b0 = rand_tensor(&mut rng, vec![4]);
            let w = rand_tensor(&mut rng, vec![64]);
            // Random linear functional of the op output, so every output entry matters.
            let eval = |x: &Tensor, b: &Tensor, grad: bool| {
                let mut tape = Tape::new();
                let xv = tape.leaf(x.clone(), grad);
                let bv = tape.leaf(b.clone(), grad);
                let y = build(&mut tape, xv, bv).unwrap();
                let n = tape.value(y).len();
                let wv = tape.constant(Tensor::new(tape.shape(y).to_vec(), w.data()[..n].to_vec()).unwrap());
                let p = tape.mul(y, wv).unwrap();
                let loss = tape.sum(p).unwrap();
                (tape, xv, bv, loss)
            };
            let (mut tape, xv, bv, loss) = eval(&x0, &b0, true);
            tape.backward(loss).unwrap();
            let fx = fd_gradient(
                |t| {
                    let (tp, _, _, l) = eval(t, &b0, false);
                    Ok(tp.value(l).item())
                },
                &x0,
                1e-5,
            )
            .unwrap();
            let fb = fd_gradient(
                |t| {
                    let (tp, _, _, l) = eval(&x0, t, false);
                    Ok(tp.value(l).item())
                },
                &b0,
                1e-5,
            )
            .unwrap();
            let ex = relative_error(tape.grad(xv).unwrap().data(), fx.data());
            let zeros = Tensor::zeros(vec![4]);
            let eb = relative_error(tape.grad(bv).unwrap_or(&zeros).data(), fb.data());
            assert!(ex < 1e-6, "{name}: x rel err {ex}");
            assert!(eb < 1e-6, "{name}: b rel err {eb}");
        }
    }

    #[test]
    fn tanh_matches_the_library_routine() {
        for i in -40_000..=40_000 {
            let x = i as f64 * 1e-3 + 1.234e-7;
            let (a, b) = (tape::tanh(x), x.tanh());
            assert!((a - b).abs() <= 1e-14 * b.abs().max(1e-300), "{x}: {a} vs {b}");
        }
        assert_eq!(tape::tanh(f64::INFINITY), 1.0);
        assert_eq!(tape::tanh(f64::NEG_INFINITY), -1.0);
        assert_eq!(tape::tanh(800.0), 1.0);
        assert!(tape::tanh(f64::NAN).is_nan());
        assert_eq!(tape::tanh(-0.0).to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn fused_recurrence_matches_unrolled_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x0 = rand_tensor(&mut rng, vec![5, 3]);
        let w0 = rand_tensor(&mut rng, vec![3, 3]);
        let g0 = rand_tensor(&mut rng, vec![5, 3]);
        for reverse in [false, true] {
            let run = |fused: bool| {
                let mut tape = Tape::new();
                let x = tape.leaf(x0.clone(), true);
                let w = tape.leaf(w0.clone(), true);
                let h = if fused {
                    tape.tanh_rnn(x, w, reverse).unwrap()
                } else {
                    let order: Vec<usize> = if reverse {
                        (0..5).rev().collect()
                    } else {
                        (0..5).collect()
                    };
                    let mut states = vec![None; 5];
                    let mut prev = None;
                    for t in order {
                        let mut pre = tape.slice(x, t, 1).unwrap();
                        if let Some(p) = prev {
                            let rec = tape.matmul(p, w).unwrap();
                            pre = tape.add(pre, rec).unwrap();
                        }
                        let s = tape.tanh(pre).unwrap();
                        states[t] = Some(s);
                        prev = Some(s);
                    }
                    let states: Vec<Var> = states.into_iter().map(Option::unwrap).collect();
                    tape.concat(&states).unwrap()
                };
                let g = tape.constant(g0.clone());
                let p = tape.mul(h, g).unwrap();
                let l = tape.sum(p).unwrap();
                tape.backward(l).unwrap();
                (
                    tape.value(h).clone(),
                    tape.grad(x).unwrap().clone(),
                    tape.grad(w).unwrap().clone(),
                )
            };
            let (a, b) = (run(true), run(false));
            assert_eq!(a.0, b.0);
            assert!(relative_error(a.1.data(), b.1.data()) < 1e-12);
            assert!(relative_error(a.2.data(), b.2.data()) < 1e-12);
        }
    }

    #[test]
    fn identical_tapes_are_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let x = rand_tensor(&mut rng, vec![4, 4]);
            let mut tape = Tape::new();
            let xv = tape.leaf(x, true);
            let y = tape.matmul(xv, xv).unwrap();
            let y = tape.log_softmax(y, 1).unwrap();
            let l = tape.sum(y).unwrap();
            tape.backward(l).unwrap();
            (tape.value(l).item().to_bits(), tape.grad(xv).unwrap().clone())
        };
        assert_eq!(run(), run());
    }
}
