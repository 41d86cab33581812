use normdid::tensor::{conv2d, leaky_relu, upsample_nearest, weighted_residual, ConvKernel, Tensor};
use proptest::prelude::*;

fn ones_kernel() -> ConvKernel {
    ConvKernel::new(1, 1, vec![1.0; 9], vec![0.0]).unwrap()
}

#[test]
fn ones_kernel_counts_neighbors() {
    let out = conv2d(&Tensor::full(1, 3, 3, 1.0), &ones_kernel()).unwrap();
    assert_eq!(out.get(0, 1, 1), 9.0);
    for (y, x) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
        assert_eq!(out.get(0, y, x), 4.0);
    }
    assert_eq!(out.get(0, 0, 1), 6.0);
}

#[test]
fn bias_is_added_once_per_output() {
    let mut k = ConvKernel::zeros(2, 1);
    k.set_bias(1, 0.5);
    let out = conv2d(&Tensor::full(1, 2, 2, 3.0), &k).unwrap();
    assert!(out.channel(0).iter().all(|&v| v == 0.0));
    assert!(out.channel(1).iter().all(|&v| v == 0.5));
}

#[test]
fn upsample_replicates_blocks() {
    let t = Tensor::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let u = upsample_nearest(&t, 2).unwrap();
    assert_eq!(u.shape(), (1, 4, 4));
    assert_eq!(
        u.data(),
        &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
    );
    assert!(upsample_nearest(&t, 0).is_err());
    assert_eq!(upsample_nearest(&t, 1).unwrap(), t);
}

#[test]
fn residual_arithmetic() {
    let a = Tensor::from_vec(1, 1, 2, vec![1.0, -2.0]).unwrap();
    let b = Tensor::from_vec(1, 1, 2, vec![10.0, 4.0]).unwrap();
    assert_eq!(weighted_residual(&a, &b, 0.3).unwrap().data(), &[1.0 + 0.3 * 10.0, -2.0 + 0.3 * 4.0]);
    assert!(weighted_residual(&a, &Tensor::zeros(1, 2, 1), 1.0).is_err());
}

#[test]
fn leaky_relu_slopes() {
    let t = Tensor::from_vec(1, 1, 3, vec![-2.0, 0.0, 3.0]).unwrap();
    assert_eq!(leaky_relu(&t, 0.2).unwrap().data(), &[-0.4, 0.0, 3.0]);
    assert_eq!(leaky_relu(&t, 1.0).unwrap(), t);
    assert!(leaky_relu(&t, 1.5).is_err());
}

fn tensor(c: usize, h: usize, w: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-4.0f32..4.0, c * h * w).prop_map(move |v| Tensor::from_vec(c, h, w, v).unwrap())
}

proptest! {
    #[test]
    fn conv_is_linear_without_bias(
        x in tensor(2, 5, 4),
        y in tensor(2, 5, 4),
        wts in prop::collection::vec(-1.0f32..1.0, 3 * 2 * 9),
        s in -2.0f32..2.0,
    ) {
        let k = ConvKernel::new(3, 2, wts, vec![0.0; 3]).unwrap();
        let mut comb = x.clone();
        for (c, v) in comb.data_mut().iter_mut().zip(y.data()) {
            *c = s * *c + v;
        }
        let lhs = conv2d(&comb, &k).unwrap();
        let (cx, cy) = (conv2d(&x, &k).unwrap(), conv2d(&y, &k).unwrap());
        for i in 0..lhs.data().len() {
            let rhs = s * cx.data()[i] + cy.data()[i];
            prop_assert!((lhs.data()[i] - rhs).abs() < 1e-4, "{} vs {}", lhs.data()[i], rhs);
        }
    }

    #[test]
    fn upsample_preserves_channel_mean(x in tensor(3, 3, 5), f in 1usize..4) {
        let u = upsample_nearest(&x, f).unwrap();
        prop_assert_eq!(u.shape(), (3, 3 * f, 5 * f));
        for c in 0..3 {
            let m0: f64 = x.channel(c).iter().map(|&v| v as f64).sum::<f64>() / 15.0;
            let m1: f64 = u.channel(c).iter().map(|&v| v as f64).sum::<f64>() / (15 * f * f) as f64;
            prop_assert!((m0 - m1).abs() < 1e-5);
        }
    }

    #[test]
    fn identity_kernel_is_identity(x in tensor(4, 3, 3)) {
        prop_assert_eq!(conv2d(&x, &ConvKernel::identity(4)).unwrap(), x);
    }
}
