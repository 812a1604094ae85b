//! Forward and backward kernels shared by the encoder and the prediction head.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;

use super::Float;

pub(crate) fn cst<A: Float>(x: f64) -> A {
    A::from_f64(x).unwrap()
}

/// `x · w + b` with `b` broadcast over rows.
pub(crate) fn linear<A: Float>(x: ArrayView2<A>, w: ArrayView2<A>, b: ArrayView1<A>) -> Array2<A> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

#[derive(Debug, Clone)]
pub(crate) struct NormCache<A> {
    pub xhat: Array2<A>,
    /// Per row (layer norm) or per column (batch norm).
    pub inv_std: Array1<A>,
}

pub(crate) const LN_EPS: f64 = 1e-5;
pub(crate) const BN_EPS: f64 = 1e-5;

/// Row-wise layer normalization.
pub(crate) fn layer_norm<A: Float>(
    x: ArrayView2<A>,
    gain: ArrayView1<A>,
    bias: ArrayView1<A>,
) -> (Array2<A>, NormCache<A>) {
    let d = cst::<A>(x.ncols() as f64);
    let eps = cst::<A>(LN_EPS);
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.outer_iter_mut().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.fold(A::zero(), |acc, &v| acc + v * v) / d;
        let is = A::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| v * is);
        *s = is;
    }
    let mut y = &xhat * &gain;
    y += &bias;
    (y, NormCache { xhat, inv_std })
}

/// Returns `(dx, d_gain, d_bias)`.
pub(crate) fn layer_norm_backward<A: Float>(
    dy: ArrayView2<A>,
    cache: &NormCache<A>,
    gain: ArrayView1<A>,
) -> (Array2<A>, Array1<A>, Array1<A>) {
    let d_gain = (&dy * &cache.xhat).sum_axis(Axis(0));
    let d_bias = dy.sum_axis(Axis(0));
    let d = cst::<A>(dy.ncols() as f64);
    let mut dx = &dy * &gain;
    for ((mut row, xhat), &is) in dx
        .outer_iter_mut()
        .zip(cache.xhat.outer_iter())
        .zip(cache.inv_std.iter())
    {
        let mean_g = row.sum() / d;
        let mean_gx = row.dot(&xhat) / d;
        Zip::from(&mut row)
            .and(&xhat)
            .for_each(|g, &xh| *g = (*g - mean_g - xh * mean_gx) * is);
    }
    (dx, d_gain, d_bias)
}

/// Column-wise normalization with batch statistics (biased variance).
/// Returns the output, the cache and the batch mean and variance.
pub(crate) fn batch_norm_train<A: Float>(
    x: ArrayView2<A>,
    gain: ArrayView1<A>,
    bias: ArrayView1<A>,
) -> (Array2<A>, NormCache<A>, Array1<A>, Array1<A>) {
    let m = cst::<A>(x.nrows() as f64);
    let mean = x.sum_axis(Axis(0)) / m;
    let centered = &x - &mean;
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / m;
    let inv_std = var.mapv(|v| A::one() / (v + cst(BN_EPS)).sqrt());
    let xhat = &centered * &inv_std;
    let mut y = &xhat * &gain;
    y += &bias;
    (y, NormCache { xhat, inv_std }, mean, var)
}

pub(crate) fn batch_norm_infer<A: Float>(
    x: ArrayView2<A>,
    gain: ArrayView1<A>,
    bias: ArrayView1<A>,
    mean: ArrayView1<A>,
    var: ArrayView1<A>,
) -> Array2<A> {
    let inv_std = var.mapv(|v| A::one() / (v + cst(BN_EPS)).sqrt());
    let mut y = &x - &mean;
    y *= &inv_std;
    y *= &gain;
    y += &bias;
    y
}

/// Backward of [`batch_norm_train`]; returns `(dx, d_gain, d_bias)`.
pub(crate) fn batch_norm_backward<A: Float>(
    dy: ArrayView2<A>,
    cache: &NormCache<A>,
    gain: ArrayView1<A>,
) -> (Array2<A>, Array1<A>, Array1<A>) {
    let m = cst::<A>(dy.nrows() as f64);
    let d_gain = (&dy * &cache.xhat).sum_axis(Axis(0));
    let d_bias = dy.sum_axis(Axis(0));
    let mean_dy = &d_bias / m;
    let mean_dy_xhat = &d_gain / m;
    let mut dx = &dy - &mean_dy;
    dx -= &(&cache.xhat * &mean_dy_xhat);
    dx *= &(&cache.inv_std * &gain);
    (dx, d_gain, d_bias)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// GELU, tanh approximation.
pub(crate) fn gelu<A: Float>(z: &Array2<A>) -> Array2<A> {
    let c = cst::<A>(GELU_C);
    let k = cst::<A>(GELU_K);
    let half = cst::<A>(0.5);
    z.mapv(|x| half * x * (A::one() + (c * (x + k * x * x * x)).tanh()))
}

pub(crate) fn gelu_backward<A: Float>(z: &Array2<A>, dy: &Array2<A>) -> Array2<A> {
    let c = cst::<A>(GELU_C);
    let k = cst::<A>(GELU_K);
    let half = cst::<A>(0.5);
    let three = cst::<A>(3.0);
    let mut out = dy.clone();
    Zip::from(&mut out).and(z).for_each(|g, &x| {
        let t = (c * (x + k * x * x * x)).tanh();
        let dt = c * (A::one() + three * k * x * x) * (A::one() - t * t);
        *g = *g * (half * (A::one() + t) + half * x * dt);
    });
    out
}

/// Inverted-dropout mask: entries are 0 or `1 / (1 - p)`.
pub(crate) fn dropout_mask<A: Float, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    p: f64,
    rng: &mut R,
) -> Array2<A> {
    let keep = cst::<A>(1.0 / (1.0 - p));
    Array2::from_shape_simple_fn((rows, cols), || {
        if rng.random::<f64>() < p {
            A::zero()
        } else {
            keep
        }
    })
}

/// Row softmax of `scores` where columns with `key_mask[j] == false` get weight 0.
/// Rows whose keys are all masked come out all-zero.
pub(crate) fn masked_softmax_rows<A: Float>(scores: &mut Array2<A>, key_mask: &[bool]) {
    for mut row in scores.outer_iter_mut() {
        let mut max = A::neg_infinity();
        for (v, &keep) in row.iter().zip(key_mask) {
            if keep && *v > max {
                max = *v;
            }
        }
        if max == A::neg_infinity() {
            row.fill(A::zero());
            continue;
        }
        let mut sum = A::zero();
        for (v, &keep) in row.iter_mut().zip(key_mask) {
            *v = if keep { (*v - max).exp() } else { A::zero() };
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
}
