use super::gradcheck::finite_diff_check;
use super::Tensor;
use crate::error::Error;
use crate::rng::SplitMix64;

fn vec_t(v: &[f64]) -> Tensor {
    Tensor::new(&[v.len()], v.to_vec()).unwrap()
}

fn random_t(shape: &[usize], rng: &mut SplitMix64, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(lo, hi)).collect();
    Tensor::new(shape, data).unwrap()
}

fn assert_close(got: &[f64], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() <= tol, "got {got:?}, want {want:?}");
    }
}

// ── relu ────────────────────────────────────────────────────────────

#[test]
fn relu_values() {
    let t = vec_t(&[-1.0, 0.0, 2.0]);
    assert_eq!(t.relu().unwrap().data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn relu_all_negative_is_zero() {
    let t = vec_t(&[-3.0, -0.5, -1e-9]);
    assert_eq!(t.relu().unwrap().data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn relu_subgradient() {
    let t = vec_t(&[-1.0, 2.0]).with_grad();
    let grads = t.relu().unwrap().sum().unwrap().backward(false).unwrap();
    assert_eq!(grads.grad(&t).unwrap().data(), &[0.0, 1.0]);
}

// ── sigmoid ─────────────────────────────────────────────────────────

#[test]
fn sigmoid_values() {
    assert_eq!(Tensor::scalar(0.0).sigmoid().unwrap().value(), 0.5);
    let v = Tensor::scalar(-5.0).sigmoid().unwrap().value();
    assert!((v - 0.0066929).abs() < 1e-6);
}

#[test]
fn sigmoid_gradient_at_zero() {
    let t = Tensor::scalar(0.0).with_grad();
    let grads = t.sigmoid().unwrap().sum().unwrap().backward(false).unwrap();
    assert_eq!(grads.grad(&t).unwrap().value(), 0.25);
}

#[test]
fn sigmoid_extreme_inputs_stay_finite() {
    let t = vec_t(&[-1e6, 1e6]);
    let y = t.sigmoid().unwrap();
    assert_eq!(y.data(), &[0.0, 1.0]);
}

// ── l2_normalize ────────────────────────────────────────────────────

#[test]
fn l2_normalize_values() {
    let y = vec_t(&[3.0, 4.0]).l2_normalize().unwrap();
    assert_close(y.data(), &[0.6, 0.8], 1e-9);
}

#[test]
fn l2_normalize_zero_vector() {
    let y = vec_t(&[0.0, 0.0]).l2_normalize().unwrap();
    assert_eq!(y.data(), &[0.0, 0.0]);
}

#[test]
fn l2_normalize_gradient_matches_fd() {
    let mut rng = SplitMix64::new(11);
    let p = random_t(&[6], &mut rng, -1.0, 1.0);
    let w = random_t(&[6], &mut rng, -1.0, 1.0);
    let err = finite_diff_check(|x| x.l2_normalize()?.dot(&w), &p, 1e-5).unwrap();
    assert!(err < 1e-6, "l2_normalize fd error {err}");
}

// ── conv2d ──────────────────────────────────────────────────────────

#[test]
fn conv2d_all_ones() {
    let input = Tensor::ones(&[3, 3, 1]);
    let kernel = Tensor::ones(&[3, 3, 1, 1]);
    let out = input.conv2d(&kernel, 1, 0).unwrap();
    assert_eq!(out.shape(), &[1, 1, 1]);
    assert_eq!(out.data(), &[9.0]);
}

#[test]
fn conv2d_identity_kernel() {
    let mut rng = SplitMix64::new(3);
    let input = random_t(&[4, 5, 1], &mut rng, 0.0, 1.0);
    let kernel = Tensor::ones(&[1, 1, 1, 1]);
    let out = input.conv2d(&kernel, 1, 0).unwrap();
    assert_eq!(out.data(), input.data());
}

#[test]
fn conv2d_shape_mismatch() {
    let input = Tensor::ones(&[4, 4, 2]);
    let kernel = Tensor::ones(&[3, 3, 3, 1]);
    assert!(matches!(
        input.conv2d(&kernel, 1, 0),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn conv2d_bad_geometry() {
    let input = Tensor::ones(&[4, 4, 1]);
    let kernel = Tensor::ones(&[3, 3, 1, 1]);
    // (4 - 3) is not divisible by stride 2.
    assert!(input.conv2d(&kernel, 2, 0).is_err());
}

#[test]
fn conv2d_gradients_match_fd() {
    let mut rng = SplitMix64::new(5);
    let input = random_t(&[5, 5, 2], &mut rng, -1.0, 1.0);
    let kernel = random_t(&[3, 3, 2, 3], &mut rng, -0.5, 0.5);

    let err = finite_diff_check(|x| x.conv2d(&kernel, 1, 0)?.sum(), &input, 1e-5).unwrap();
    assert!(err < 1e-4, "conv2d input fd error {err}");

    let err = finite_diff_check(|k| input.conv2d(k, 1, 0)?.sum(), &kernel, 1e-5).unwrap();
    assert!(err < 1e-4, "conv2d kernel fd error {err}");

    // Strided, padded variant.
    let err = finite_diff_check(|x| x.conv2d(&kernel, 2, 1)?.sum(), &input, 1e-5).unwrap();
    assert!(err < 1e-4, "strided conv2d fd error {err}");
}

// ── global_average_pool ─────────────────────────────────────────────

#[test]
fn gap_2d() {
    let t = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(t.global_average_pool().unwrap().value(), 2.5);
}

#[test]
fn gap_constant_map() {
    let t = Tensor::full(&[3, 5], 0.7);
    assert!((t.global_average_pool().unwrap().value() - 0.7).abs() < 1e-15);
}

#[test]
fn gap_gradient_is_uniform() {
    let t = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
        .unwrap()
        .with_grad();
    let grads = t.global_average_pool().unwrap().backward(false).unwrap();
    assert_eq!(grads.grad(&t).unwrap().data(), &[1.0 / 6.0; 6]);
}

#[test]
fn gap_channelwise() {
    let t = Tensor::new(&[1, 2, 2], vec![1.0, 10.0, 3.0, 30.0]).unwrap();
    assert_eq!(t.global_average_pool().unwrap().data(), &[2.0, 20.0]);
}

// ── elementwise ─────────────────────────────────────────────────────

#[test]
fn abs_of_difference() {
    let a = vec_t(&[0.80]);
    let b = vec_t(&[0.78]);
    let d = a.sub(&b).unwrap().abs().unwrap();
    assert!((d.value() - 0.02).abs() < 1e-12);
}

#[test]
fn mul_values() {
    let out = vec_t(&[1.0, 1.0]).mul(&vec_t(&[0.6, 0.8])).unwrap();
    assert_eq!(out.data(), &[0.6, 0.8]);
}

#[test]
fn abs_gradient_at_zero_is_zero() {
    let t = vec_t(&[0.0, -2.0, 3.0]).with_grad();
    let grads = t.abs().unwrap().sum().unwrap().backward(false).unwrap();
    assert_eq!(grads.grad(&t).unwrap().data(), &[0.0, -1.0, 1.0]);
}

#[test]
fn elementwise_shape_mismatch() {
    let a = vec_t(&[1.0, 2.0]);
    let b = vec_t(&[1.0, 2.0, 3.0]);
    assert!(matches!(a.add(&b), Err(Error::ShapeMismatch { .. })));
    assert!(matches!(a.mul(&b), Err(Error::ShapeMismatch { .. })));
}

// ── dot ─────────────────────────────────────────────────────────────

#[test]
fn dot_values() {
    assert_eq!(vec_t(&[1.0, 2.0]).dot(&vec_t(&[3.0, 4.0])).unwrap().value(), 11.0);
    let ones = Tensor::ones(&[2]);
    assert!((ones.dot(&vec_t(&[0.6, 0.8])).unwrap().value() - 1.4).abs() < 1e-15);
}

#[test]
fn dot_length_mismatch() {
    assert!(vec_t(&[1.0]).dot(&vec_t(&[1.0, 2.0])).is_err());
}

#[test]
fn dot_gradient_is_other_side() {
    let a = vec_t(&[1.0, -1.0, 2.0]).with_grad();
    let b = vec_t(&[3.0, 4.0, 5.0]);
    let grads = a.dot(&b).unwrap().backward(false).unwrap();
    assert_eq!(grads.grad(&a).unwrap().data(), b.data());
}

// ── euclidean_norm ──────────────────────────────────────────────────

#[test]
fn norm_345() {
    let n = vec_t(&[3.0, 4.0]).euclidean_norm().unwrap().value();
    assert!((n - 5.0).abs() < 1e-12);
}

#[test]
fn norm_zero_vector() {
    // The stability epsilon inside the sqrt leaves sqrt(1e-12) at the origin.
    let n = vec_t(&[0.0, 0.0, 0.0]).euclidean_norm().unwrap().value();
    assert!(n.abs() < 1e-5);
}

#[test]
fn norm_gradient_matches_fd() {
    let mut rng = SplitMix64::new(17);
    let p = random_t(&[5], &mut rng, 0.2, 1.5);
    let err = finite_diff_check(|x| x.euclidean_norm(), &p, 1e-5).unwrap();
    assert!(err < 1e-5, "euclidean_norm fd error {err}");
}

// ── max_pool2 ───────────────────────────────────────────────────────

#[test]
fn max_pool_values() {
    let t = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let out = t.max_pool2().unwrap();
    assert_eq!(out.shape(), &[1, 1]);
    assert_eq!(out.data(), &[4.0]);
}

#[test]
fn max_pool_tie_routes_to_first() {
    let t = Tensor::full(&[2, 4], 1.0).with_grad();
    let out = t.max_pool2().unwrap();
    assert_eq!(out.data(), &[1.0, 1.0]);
    let grads = out.sum().unwrap().backward(false).unwrap();
    // First element of each 2x2 window (row-major scan) takes the gradient.
    assert_eq!(
        grads.grad(&t).unwrap().data(),
        &[1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]
    );
}

#[test]
fn max_pool_rejects_odd_dims() {
    let t = Tensor::ones(&[3, 4]);
    assert!(t.max_pool2().is_err());
}

#[test]
fn max_pool_gradient_matches_fd() {
    let mut rng = SplitMix64::new(23);
    let p = random_t(&[4, 4], &mut rng, -1.0, 1.0);
    let err = finite_diff_check(|x| x.max_pool2()?.sum(), &p, 1e-5).unwrap();
    assert!(err < 1e-5, "max_pool fd error {err}");
}

// ── upsample_bilinear ───────────────────────────────────────────────

#[test]
fn upsample_constant_map() {
    let t = Tensor::new(&[1, 1], vec![0.37]).unwrap();
    let out = t.upsample_bilinear(4, 6).unwrap();
    assert_eq!(out.shape(), &[4, 6]);
    assert!(out.data().iter().all(|&v| v == 0.37));
}

#[test]
fn upsample_linear_interpolation() {
    let t = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
    let out = t.upsample_bilinear(1, 3).unwrap();
    assert_close(out.data(), &[0.0, 0.5, 1.0], 1e-15);
}

#[test]
fn upsample_gradient_matches_fd() {
    let mut rng = SplitMix64::new(29);
    let p = random_t(&[2, 2], &mut rng, -1.0, 1.0);
    let w = random_t(&[16], &mut rng, -1.0, 1.0);
    let err = finite_diff_check(
        |x| x.upsample_bilinear(4, 4)?.reshape(&[16])?.dot(&w),
        &p,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "upsample fd error {err}");
}

#[test]
fn upsample_rejects_downscale() {
    let t = Tensor::ones(&[4, 4]);
    assert!(t.upsample_bilinear(2, 8).is_err());
}

// ── matvec / structure ──────────────────────────────────────────────

#[test]
fn matvec_gradients_match_fd() {
    let mut rng = SplitMix64::new(31);
    let w = random_t(&[3, 4], &mut rng, -1.0, 1.0);
    let x = random_t(&[4], &mut rng, -1.0, 1.0);
    let err = finite_diff_check(|m| m.matvec(&x)?.sum(), &w, 1e-5).unwrap();
    assert!(err < 1e-6, "matvec weight fd error {err}");
    let err = finite_diff_check(|v| w.matvec(v)?.sum(), &x, 1e-5).unwrap();
    assert!(err < 1e-6, "matvec input fd error {err}");
}

#[test]
fn channel_and_spatial_ops_match_fd() {
    let mut rng = SplitMix64::new(37);
    let t = random_t(&[3, 2, 4], &mut rng, -1.0, 1.0);
    let err = finite_diff_check(
        |x| x.channel_sum()?.reshape(&[6])?.mul(&x.channel_sum()?.reshape(&[6])?)?.sum(),
        &t,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "channel_sum fd error {err}");

    let v = random_t(&[4], &mut rng, -1.0, 1.0);
    let err = finite_diff_check(
        |x| x.spatial_broadcast(2, 3)?.mul(&x.spatial_broadcast(2, 3)?)?.sum(),
        &v,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "spatial_broadcast fd error {err}");
}

#[test]
fn minmax_normalize_range_and_constant_case() {
    let t = vec_t(&[2.0, 4.0, 3.0]).reshape(&[1, 3]).unwrap();
    let out = t.minmax_normalize().unwrap();
    assert_close(out.data(), &[0.0, 1.0, 0.5], 1e-15);

    let flat = Tensor::full(&[2, 2], 0.9).minmax_normalize().unwrap();
    assert_eq!(flat.data(), &[0.0; 4]);
}

// ── non-finite guard ────────────────────────────────────────────────

#[test]
fn division_by_zero_is_an_error() {
    let a = vec_t(&[1.0]);
    let b = vec_t(&[0.0]);
    assert!(matches!(a.div(&b), Err(Error::NonFinite { .. })));
}

#[test]
fn constructor_rejects_nan() {
    assert!(Tensor::new(&[1], vec![f64::NAN]).is_err());
}

#[test]
fn sqrt_of_negative_is_an_error() {
    assert!(matches!(
        vec_t(&[-1.0]).sqrt(),
        Err(Error::NonFinite { .. })
    ));
}

// ── second-order invariant ──────────────────────────────────────────

#[test]
fn second_backward_matches_fd_of_first_gradients() {
    // z(x) = sum_i g_i(x)^2 with g = d/dx sum(sigmoid(x) * x); checking z's
    // gradient against finite differences exercises d(g)/dx.
    let z_of = |x: &Tensor| -> crate::Result<Tensor> {
        let leaf = if x.requires_grad() { x.clone() } else { x.with_grad() };
        let f = leaf.sigmoid()?.mul(&leaf)?.sum()?;
        let g = f
            .backward(true)?
            .grad(&leaf)
            .expect("leaf gradient")
            .clone();
        g.mul(&g)?.sum()
    };
    let mut rng = SplitMix64::new(41);
    let p = random_t(&[4], &mut rng, -1.0, 1.0);
    let err = finite_diff_check(z_of, &p, 1e-5).unwrap();
    assert!(err < 1e-3, "second-order fd error {err}");
}
