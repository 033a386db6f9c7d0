//! Reverse-mode automatic differentiation over dense `f64` tensors.

pub mod checkpoint;
mod kernels;
mod linear_map;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, Entry, EntryData};
pub use linear_map::LinearMap;
pub use tape::{argmax_first, broadcast_shape, BinaryKind, Tape, UnaryKind, Var};
pub use tensor::Tensor;

pub(crate) use tape::{sigmoid, softmax_into};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / na.max(nb).max(1e-8)
    }

    fn analytic_grad(x: &Tensor, f: &dyn Fn(&mut Tape, Var) -> Var) -> Vec<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone().with_requires_grad(true));
        let out = f(&mut tape, v);
        tape.backward(out).unwrap();
        tape.grad(v).unwrap().to_vec()
    }

    fn eval(x: &Tensor, f: &dyn Fn(&mut Tape, Var) -> Var) -> f64 {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let out = f(&mut tape, v);
        tape.scalar(out)
    }

    #[test]
    fn exp_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![0.0]).with_requires_grad(true));
        let y = tape.exp(x).unwrap();
        assert_eq!(tape.value(y), &[1.0]);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0]);
    }

    #[test]
    fn log_inverts_exp() {
        for v in [-2.0, 0.5, 3.0] {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::from_vec(vec![v]));
            let e = tape.exp(x).unwrap();
            let l = tape.log(e).unwrap();
            assert!((tape.scalar(l) - v).abs() < 1e-15);
        }
    }

    #[test]
    fn tanh_derivative_matches_finite_difference() {
        let x = Tensor::from_vec(vec![0.3]);
        let f = |tp: &mut Tape, v: Var| tp.tanh(v).unwrap();
        let a = analytic_grad(&x, &f)[0];
        let n = numeric_grad(&x, &|x| eval(x, &f))[0];
        assert!((a - 0.915137).abs() < 1e-6, "{a}");
        assert!((a - n).abs() / a.abs() < 1e-6);
    }

    #[test]
    fn log_of_nonpositive_is_domain_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(Error::Domain { .. })));
        let y = tape.constant(Tensor::from_vec(vec![1.0, 0.0]));
        assert!(matches!(tape.div(x, y), Err(Error::Domain { .. })));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        assert!(matches!(tape.add(a, b), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(tape.matmul(a, a), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_identity_and_hand_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eye = t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let mut tape = Tape::new();
        let i = tape.constant(eye);
        let mv = tape.constant(t(&[3, 3], &m));
        let p = tape.matmul(i, mv).unwrap();
        assert_eq!(tape.value(p), &m[..]);

        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2, 1], &[1., 1.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1]);
        assert_eq!(tape.value(c), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = t(&[3, 4], &(0..12).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
        let b = t(&[4, 2], &(0..8).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
        let bc = b.clone();
        let fa = move |tp: &mut Tape, v: Var| {
            let bv = tp.constant(bc.clone());
            let p = tp.matmul(v, bv).unwrap();
            let sq = tp.mul(p, p).unwrap();
            tp.sum(sq).unwrap()
        };
        assert!(rel_err(&analytic_grad(&a, &fa), &numeric_grad(&a, &|x| eval(x, &fa))) < 1e-5);
        let ac = a.clone();
        let fb = move |tp: &mut Tape, v: Var| {
            let av = tp.constant(ac.clone());
            let p = tp.matmul(av, v).unwrap();
            tp.sum(p).unwrap()
        };
        assert!(rel_err(&analytic_grad(&b, &fb), &numeric_grad(&b, &|x| eval(x, &fb))) < 1e-5);
    }

    #[test]
    fn conv_identity_and_box_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img: Vec<f64> = (0..25).map(|_| rng.random()).collect();
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 5, 5], &img));
        let k = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.value(y), &img[..]);

        let c = tape.constant(Tensor::full(&[1, 1, 5, 5], 0.7));
        let k3 = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(c, k3, None, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
        for v in tape.value(y) {
            assert!((v - 6.3).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_kernel_larger_than_input_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let k = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(tape.conv2d(x, k, None, 1, 0).is_err());
        assert!(tape.conv2d(x, k, None, 1, 1).is_ok());
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = t(&[1, 1, 5, 5], &(0..25).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
        let k = t(&[2, 1, 3, 3], &(0..18).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
        let kc = k.clone();
        let fx = move |tp: &mut Tape, v: Var| {
            let kv = tp.constant(kc.clone());
            let y = tp.conv2d(v, kv, None, 1, 1).unwrap();
            let sq = tp.mul(y, y).unwrap();
            tp.sum(sq).unwrap()
        };
        assert!(rel_err(&analytic_grad(&x, &fx), &numeric_grad(&x, &|z| eval(z, &fx))) < 1e-4);
        let xc = x.clone();
        let fk = move |tp: &mut Tape, v: Var| {
            let xv = tp.constant(xc.clone());
            let y = tp.conv2d(xv, v, None, 2, 1).unwrap();
            let sq = tp.tanh(y).unwrap();
            tp.sum(sq).unwrap()
        };
        assert!(rel_err(&analytic_grad(&k, &fk), &numeric_grad(&k, &|z| eval(z, &fk))) < 1e-4);
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]).with_requires_grad(true));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![3.0]).with_requires_grad(true));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_on_non_scalar_fails() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]).with_requires_grad(true));
        let y = tape.exp(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn two_backward_passes_accumulate() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![0.4, -1.3]).with_requires_grad(true));
        let y = tape.tanh(x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        let once = tape.grad(x).unwrap().to_vec();
        tape.backward(s).unwrap();
        let twice = tape.grad(x).unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
        tape.reset();
        assert!(tape.is_empty());
    }

    #[test]
    fn broadcast_gradient_reduces_over_broadcast_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let av = tape.leaf(t(&[2, 3], &a).with_requires_grad(true));
        let bv = tape.leaf(t(&[3], &b).with_requires_grad(true));
        let p = tape.mul(av, bv).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        // loop oracle: d/db_j sum_i a_ij b_j = sum_i a_ij
        let gb = tape.grad(bv).unwrap();
        for j in 0..3 {
            let expect = a[j] + a[3 + j];
            assert!((gb[j] - expect).abs() < 1e-15);
        }
        let ga = tape.grad(av).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(ga[i * 3 + j], b[j]);
            }
        }
    }

    #[test]
    fn no_grad_leaves_receive_nothing() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::from_vec(vec![2.0]));
        let x = tape.leaf(Tensor::from_vec(vec![1.0]).with_requires_grad(true));
        let y = tape.mul(c, x).unwrap();
        tape.backward(y).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn max_last_and_pick() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1., 5., 5., 0., -1., 2.]).with_requires_grad(true));
        let m = tape.max_last(x).unwrap();
        assert_eq!(tape.value(m), &[5.0, 2.0]);
        let p = tape.pick(x, &[0, 1]).unwrap();
        assert_eq!(tape.value(p), &[1.0, -1.0]);
        let s1 = tape.sum(m).unwrap();
        tape.backward(s1).unwrap();
        // tie at indices 1 and 2 resolves to the lower one
        assert_eq!(tape.grad(x).unwrap(), &[0., 1., 0., 0., 0., 1.]);
    }
}
