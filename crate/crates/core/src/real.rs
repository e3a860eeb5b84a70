//! Scalar trait shared by the network code, plus row normalization.

use ndarray::{Array2, ArrayView2, Axis, NdFloat};

/// Floating point type the network can run in: `f32` for training, `f64` for
/// gradient checks.
pub trait Real: NdFloat + std::iter::Sum + Default {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-wise L2 normalization, dividing by `max(‖x‖, eps)`. Returns the unit
/// rows and the norms used.
pub fn normalize_rows<T: Real>(raw: ArrayView2<T>, eps: T) -> (Array2<T>, Vec<T>) {
    let mut z = raw.to_owned();
    let mut norms = Vec::with_capacity(z.nrows());
    for mut r in z.axis_iter_mut(Axis(0)) {
        let n = r.dot(&r).sqrt().max(eps);
        r.mapv_inplace(|v| v / n);
        norms.push(n);
    }
    (z, norms)
}

/// Backward of [`normalize_rows`]: `dx = (dz - z (z·dz)) / ‖x‖`.
pub fn normalize_rows_backward<T: Real>(z: ArrayView2<T>, norms: &[T], dz: ArrayView2<T>) -> Array2<T> {
    let mut dx = dz.to_owned();
    for ((mut g, zr), &n) in dx.axis_iter_mut(Axis(0)).zip(z.axis_iter(Axis(0))).zip(norms) {
        let proj = zr.dot(&g);
        g.scaled_add(-proj, &zr);
        g.mapv_inplace(|v| v / n);
    }
    dx
}
