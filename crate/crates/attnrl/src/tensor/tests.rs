use super::*;
use crate::gradcheck::{check_grads, max_rel_err};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (&x, &y)) in a.iter().zip(b.iter()).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

#[test]
fn matmul_identity() {
    let i = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
    let b = Tensor::from_vec(vec![3.0, 4.0, 5.0, 6.0], &[2, 2]).unwrap();
    let y = i.matmul(&b).unwrap();
    assert_eq!(y.to_vec(), vec![3.0, 4.0, 5.0, 6.0]);
}

#[test]
fn matmul_hand_dot() {
    let a = Tensor::from_vec(vec![1.0, 2.0], &[1, 2]).unwrap();
    let b = Tensor::from_vec(vec![3.0, 4.0], &[2, 1]).unwrap();
    let y = a.matmul(&b).unwrap();
    assert_eq!(y.to_vec(), vec![11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[4, 2]);
    let err = a.matmul(&b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut r = rng(1);
    let a = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut r).with_grad();
    let b = Tensor::rand_uniform(&[4, 2], -1.0, 1.0, &mut r).with_grad();
    let f = {
        let (a, b) = (a.clone(), b.clone());
        move || Ok(a.matmul(&b)?.sum())
    };
    check_grads(&[("a", &a), ("b", &b)], &f, 1e-6, 1e-6).unwrap();
}

#[test]
fn softmax_symmetry_and_stability() {
    let x = Tensor::from_vec(vec![0.0, 0.0, 0.0], &[3]).unwrap();
    let y = x.softmax(0).unwrap();
    assert_close(&y.to_vec(), &[1.0 / 3.0; 3], 1e-15);

    let x = Tensor::from_vec(vec![1000.0, 0.0, 0.0], &[3]).unwrap();
    let y = x.softmax(0).unwrap();
    assert_close(&y.to_vec(), &[1.0, 0.0, 0.0], 1e-12);
}

#[test]
fn softmax_jacobian_matches_finite_differences() {
    let mut r = rng(2);
    let x = Tensor::rand_uniform(&[5], -2.0, 2.0, &mut r).with_grad();
    // weighted sum probes a full row of the Jacobian
    let w = Tensor::rand_uniform(&[5], -1.0, 1.0, &mut r);
    let f = {
        let (x, w) = (x.clone(), w.clone());
        move || Ok(x.softmax(0)?.mul(&w)?.sum())
    };
    check_grads(&[("x", &x)], &f, 1e-6, 1e-6).unwrap();
}

#[test]
fn layer_norm_constant_slice_collapses_to_bias() {
    let x = Tensor::from_vec(vec![5.0, 5.0, 5.0], &[3]).unwrap();
    let gain = Tensor::ones(&[3]);
    let bias = Tensor::zeros(&[3]);
    let y = x.layer_norm(&gain, &bias, 0, 1e-5).unwrap();
    assert_close(&y.to_vec(), &[0.0, 0.0, 0.0], 1e-12);
}

#[test]
fn layer_norm_standardizes() {
    let x = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3]).unwrap();
    let y = x
        .layer_norm(&Tensor::ones(&[3]), &Tensor::zeros(&[3]), 0, 1e-12)
        .unwrap();
    let v = y.to_vec();
    let mean: f64 = v.iter().sum::<f64>() / 3.0;
    let var: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 3.0;
    assert!(mean.abs() < 1e-7);
    assert!((var - 1.0).abs() < 1e-7);
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let mut r = rng(3);
    let x = Tensor::rand_uniform(&[2, 4], -1.0, 1.0, &mut r).with_grad();
    let gain = Tensor::rand_uniform(&[4], 0.5, 1.5, &mut r).with_grad();
    let bias = Tensor::rand_uniform(&[4], -0.5, 0.5, &mut r).with_grad();
    let w = Tensor::rand_uniform(&[2, 4], -1.0, 1.0, &mut r);
    let f = {
        let (x, gain, bias, w) = (x.clone(), gain.clone(), bias.clone(), w.clone());
        move || Ok(x.layer_norm(&gain, &bias, 1, 1e-5)?.mul(&w)?.sum())
    };
    check_grads(&[("x", &x), ("gain", &gain), ("bias", &bias)], &f, 1e-6, 1e-5).unwrap();
}

#[test]
fn conv2d_scalar_kernel_doubles() {
    let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 2, 2]).unwrap();
    let k = Tensor::from_vec(vec![2.0], &[1, 1, 1, 1]).unwrap();
    let y = x.conv2d(&k, 1, 0).unwrap();
    assert_eq!(y.to_vec(), vec![2.0, 4.0, 6.0, 8.0]);
}

#[test]
fn conv2d_patch_sum() {
    let x = Tensor::ones(&[1, 4, 4]);
    let k = Tensor::ones(&[1, 1, 2, 2]);
    let y = x.conv2d(&k, 2, 0).unwrap();
    assert_eq!(y.shape(), &[1, 2, 2]);
    assert_eq!(y.to_vec(), vec![4.0; 4]);
}

#[test]
fn conv2d_non_integral_output_rejected() {
    let x = Tensor::zeros(&[1, 5, 5]);
    let k = Tensor::zeros(&[1, 1, 2, 2]);
    let err = x.conv2d(&k, 2, 0).unwrap_err().to_string();
    assert!(err.contains("not integral"), "{err}");
}

#[test]
fn conv2d_gradient_matches_finite_differences() {
    let mut r = rng(4);
    let x = Tensor::rand_uniform(&[2, 5, 5], -1.0, 1.0, &mut r).with_grad();
    let k = Tensor::rand_uniform(&[3, 2, 3, 3], -0.5, 0.5, &mut r).with_grad();
    let f = {
        let (x, k) = (x.clone(), k.clone());
        move || Ok(x.conv2d(&k, 1, 1)?.sum())
    };
    check_grads(&[("x", &x), ("k", &k)], &f, 1e-6, 1e-5).unwrap();
}

#[test]
fn gelu_values() {
    let x = Tensor::from_vec(vec![0.0, 10.0], &[2]).unwrap();
    let y = x.gelu();
    assert!(y.to_vec()[0].abs() < 1e-15);
    assert!((y.to_vec()[1] - 10.0).abs() < 1e-6);
}

#[test]
fn activation_gradients_match_finite_differences() {
    use Activation::*;
    let mut r = rng(5);
    for kind in [Relu, Gelu, Sigmoid, Tanh, Exp, Log] {
        // keep relu away from the kink and log strictly positive
        let (lo, hi) = if kind == Log { (0.2, 2.0) } else { (0.1, 1.5) };
        let x = Tensor::rand_uniform(&[6], lo, hi, &mut r).with_grad();
        let w = Tensor::rand_uniform(&[6], -1.0, 1.0, &mut r);
        let f = {
            let (x, w) = (x.clone(), w.clone());
            move || Ok(x.activation(kind)?.mul(&w)?.sum())
        };
        check_grads(&[("x", &x)], &f, 1e-6, 1e-6)
            .unwrap_or_else(|e| panic!("{kind:?}: {e}"));
    }
}

#[test]
fn log_rejects_non_positive() {
    let x = Tensor::from_vec(vec![1.0, -1.0], &[2]).unwrap();
    assert!(x.activation(Activation::Log).is_err());
}

#[test]
fn backward_sum_gives_ones() {
    let x = Tensor::zeros(&[2, 3]).with_grad();
    tape::reset();
    x.sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
}

#[test]
fn backward_accumulates_across_uses() {
    let x = Tensor::ones(&[4]).with_grad();
    tape::reset();
    x.add(&x).unwrap().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0; 4]);
}

#[test]
fn backward_rejects_non_scalar() {
    let x = Tensor::ones(&[2]).with_grad();
    tape::reset();
    let y = x.mul_scalar(2.0);
    assert!(y.backward().is_err());
}

#[test]
fn backward_composite_pipeline_matches_finite_differences() {
    let mut r = rng(6);
    let a = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut r).with_grad();
    let b = Tensor::rand_uniform(&[4, 3], -1.0, 1.0, &mut r).with_grad();
    let w = Tensor::rand_uniform(&[3, 3], -1.0, 1.0, &mut r);
    let f = {
        let (a, b, w) = (a.clone(), b.clone(), w.clone());
        move || Ok(a.matmul(&b)?.softmax(1)?.mul(&w)?.sum())
    };
    check_grads(&[("a", &a), ("b", &b)], &f, 1e-6, 1e-5).unwrap();
}

#[test]
fn detach_blocks_gradient_flow() {
    let x = Tensor::ones(&[3]).with_grad();
    tape::reset();
    let y = x.mul_scalar(2.0);
    let z = y.detach().mul_scalar(3.0);
    // only path to x crosses the detach
    z.sum().backward().unwrap();
    assert!(x.grad().is_none(), "gradient crossed a detach barrier");
}

#[test]
fn no_grad_disables_recording() {
    let x = Tensor::ones(&[3]).with_grad();
    tape::reset();
    let y = tape::no_grad(|| x.mul_scalar(2.0));
    assert!(!y.requires_grad());
    assert_eq!(tape::len(), 0);
}

#[test]
fn narrow_concat_permute_round_trips() {
    let mut r = rng(7);
    let x = Tensor::rand_uniform(&[2, 3, 4], -1.0, 1.0, &mut r);
    let left = x.narrow(2, 0, 2).unwrap();
    let right = x.narrow(2, 2, 2).unwrap();
    let back = Tensor::concat(&[left, right], 2).unwrap();
    assert_eq!(back.to_vec(), x.to_vec());

    let p = x.permute(&[2, 0, 1]).unwrap();
    let q = p.permute(&[1, 2, 0]).unwrap();
    assert_eq!(q.to_vec(), x.to_vec());
    assert_eq!(p.shape(), &[4, 2, 3]);
}

#[test]
fn narrow_and_concat_gradients() {
    let mut r = rng(8);
    let x = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut r).with_grad();
    let y = Tensor::rand_uniform(&[3, 2], -1.0, 1.0, &mut r).with_grad();
    let w = Tensor::rand_uniform(&[3, 6], -1.0, 1.0, &mut r);
    let f = {
        let (x, y, w) = (x.clone(), y.clone(), w.clone());
        move || {
            let part = x.narrow(1, 1, 2)?;
            let cat = Tensor::concat(&[part, y.clone(), x.narrow(1, 0, 2)?], 1)?;
            Ok(cat.mul(&w)?.sum())
        }
    };
    check_grads(&[("x", &x), ("y", &y)], &f, 1e-6, 1e-6).unwrap();
}

#[test]
fn gather_and_masked_fill_gradients() {
    let mut r = rng(9);
    let x = Tensor::rand_uniform(&[4, 3], -1.0, 1.0, &mut r).with_grad();
    let mask: Vec<bool> = (0..12).map(|i| i % 3 != 2).collect();
    let f = {
        let (x, mask) = (x.clone(), mask.clone());
        move || {
            let filled = x.masked_fill(&mask, -1e30)?;
            Ok(filled.softmax(1)?.gather_rows(&[0, 1, 0, 1])?.sum())
        }
    };
    // masked entries get exactly zero probability
    let probs = x.masked_fill(&mask, -1e30).unwrap().softmax(1).unwrap();
    for (i, &p) in probs.to_vec().iter().enumerate() {
        if !mask[i] {
            assert_eq!(p, 0.0);
        }
    }
    check_grads(&[("x", &x)], &f, 1e-6, 1e-5).unwrap();
}

#[test]
fn max_pool_forward_and_gradient() {
    let x = Tensor::from_vec(
        vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0, 13.0, 14.0, 15.0, 16.0],
        &[1, 4, 4],
    )
    .unwrap();
    let y = x.max_pool2d(2).unwrap();
    assert_eq!(y.to_vec(), vec![6.0, 8.0, 14.0, 16.0]);

    let mut r = rng(10);
    let x = Tensor::rand_uniform(&[2, 4, 4], -1.0, 1.0, &mut r).with_grad();
    let f = {
        let x = x.clone();
        move || Ok(x.max_pool2d(2)?.sum())
    };
    check_grads(&[("x", &x)], &f, 1e-7, 1e-5).unwrap();
}

#[test]
fn softmax_shift_invariance_property() {
    let mut r = rng(11);
    for _ in 0..50 {
        let x = Tensor::rand_uniform(&[7], -5.0, 5.0, &mut r);
        let shifted = x.add_scalar(3.25);
        let a = x.softmax(0).unwrap().to_vec();
        let b = shifted.softmax(0).unwrap().to_vec();
        assert!(a.iter().sum::<f64>() - 1.0 <= 1e-9);
        for (p, q) in a.iter().zip(b.iter()) {
            assert!((p - q).abs() <= 1e-12);
        }
    }
}

#[test]
fn random_op_gradients_on_small_shapes() {
    // randomized shapes <= 64 elements across the differentiable op set
    let mut r = rng(12);
    for trial in 0..10 {
        let m = 1 + (trial % 4);
        let n = 2 + (trial % 3);
        let k = 1 + (trial % 5);
        let a = Tensor::rand_uniform(&[m, k], -1.0, 1.0, &mut r).with_grad();
        let b = Tensor::rand_uniform(&[k, n], -1.0, 1.0, &mut r).with_grad();
        let c = Tensor::rand_uniform(&[m, n], -1.0, 1.0, &mut r).with_grad();
        let frozen = c.detach();
        let f = {
            let (a, b, c) = (a.clone(), b.clone(), c.clone());
            move || {
                let y = a.matmul(&b)?.add(&c)?.tanh_act();
                Ok(y.softmax(1)?.mul(&frozen)?.sum())
            }
        };
        check_grads(&[("a", &a), ("b", &b), ("c", &c)], &f, 1e-6, 1e-5).unwrap();
    }
}

#[test]
fn track_attention_matches_per_track_sdpa_composition() {
    // oracle: slice each track and run the composed softmax/matmul path
    let mut r = rng(13);
    let (n, f, d) = (3, 4, 5);
    let q = Tensor::rand_uniform(&[n, d], -1.0, 1.0, &mut r);
    let k = Tensor::rand_uniform(&[f * n, d], -1.0, 1.0, &mut r);
    let v = Tensor::rand_uniform(&[f * n, d], -1.0, 1.0, &mut r);
    let (y, a) = Tensor::track_attention(&q, &k, &v, n, f).unwrap();
    let (qd, kd, vd) = (q.to_vec(), k.to_vec(), v.to_vec());
    let scale = 1.0 / (d as f64).sqrt();
    for p in 0..n {
        let mut scores = vec![0.0; f];
        for fi in 0..f {
            scores[fi] = scale
                * (0..d).map(|i| qd[p * d + i] * kd[(fi * n + p) * d + i]).sum::<f64>();
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        for fi in 0..f {
            let w = (scores[fi] - max).exp() / total;
            assert!((a.to_vec()[p * f + fi] - w).abs() <= 1e-12);
        }
        for i in 0..d {
            let expect: f64 = (0..f)
                .map(|fi| a.to_vec()[p * f + fi] * vd[(fi * n + p) * d + i])
                .sum();
            assert!((y.to_vec()[p * d + i] - expect).abs() <= 1e-12);
        }
    }
}

#[test]
fn track_attention_gradient_matches_finite_differences() {
    let mut r = rng(14);
    let (n, f, d) = (3, 4, 4);
    let q = Tensor::rand_uniform(&[n, d], -1.0, 1.0, &mut r).with_grad();
    let k = Tensor::rand_uniform(&[f * n, d], -1.0, 1.0, &mut r).with_grad();
    let v = Tensor::rand_uniform(&[f * n, d], -1.0, 1.0, &mut r).with_grad();
    let w_y = Tensor::rand_uniform(&[n, d], -1.0, 1.0, &mut r);
    let w_a = Tensor::rand_uniform(&[n, f], -1.0, 1.0, &mut r);
    let f_loss = {
        let (q, k, v, w_y, w_a) = (q.clone(), k.clone(), v.clone(), w_y.clone(), w_a.clone());
        move || {
            let (y, a) = Tensor::track_attention(&q, &k, &v, n, f)?;
            // probe both outputs so the probability gradient path is covered
            Ok(y.mul(&w_y)?.sum().add(&a.mul(&w_a)?.sum())?)
        }
    };
    check_grads(&[("q", &q), ("k", &k), ("v", &v)], &f_loss, 1e-6, 1e-5).unwrap();
}

#[test]
fn rel_err_helper_sane() {
    assert!(max_rel_err(&[1.0, 2.0], &[1.0, 2.0]) == 0.0);
    assert!(max_rel_err(&[1.0], &[1.1]) > 0.05);
}
