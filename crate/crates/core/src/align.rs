//! Least-squares similarity alignment between corresponding point sets.

use nalgebra::{Matrix3, Vector3};

/// `y = scale * rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x * self.scale + self.translation
    }
}

/// Umeyama's closed-form similarity mapping `src` onto `dst`.
///
/// Returns `None` when fewer than two points are given or `src` collapses to
/// a single point.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Option<Similarity> {
    let n = src.len();
    if n < 2 || dst.len() != n {
        return None;
    }
    let mean = |pts: &[Vector3<f64>]| pts.iter().sum::<Vector3<f64>>() / n as f64;
    let (mu_x, mu_y) = (mean(src), mean(dst));
    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for (x, y) in src.iter().zip(dst) {
        let (dx, dy) = (x - mu_x, y - mu_y);
        cov += dy * dx.transpose();
        var_x += dx.norm_squared();
    }
    cov /= n as f64;
    var_x /= n as f64;
    if var_x <= 0.0 {
        return None;
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut d = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        // flip the axis of the smallest singular value
        let k = svd.singular_values.imin();
        d[(k, k)] = -1.0;
    }
    let rotation = u * d * v_t;
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * d[(i, i)]).sum();
    let scale = trace / var_x;
    let translation = mu_y - rotation * mu_x * scale;
    Some(Similarity {
        scale,
        rotation,
        translation,
    })
}

/// Root-mean-square distance between `dst` and `src` mapped through `sim`.
pub fn aligned_rmse(sim: &Similarity, src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> f64 {
    let sum: f64 = src
        .iter()
        .zip(dst)
        .map(|(x, y)| (sim.apply(x) - y).norm_squared())
        .sum();
    (sum / src.len() as f64).sqrt()
}
