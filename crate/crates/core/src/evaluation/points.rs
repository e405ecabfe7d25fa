use nalgebra::Vector3;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;

use super::EvalError;
use crate::scene::{rotation_matrix, GaussianCloud};

pub type PointCloud = Vec<Vector3<f64>>;

/// Draws `n` points, choosing a Gaussian with probability proportional to
/// `opacity·s₀·s₁·s₂` and then sampling its density.
pub fn sample_points(
    cloud: &GaussianCloud,
    n: usize,
    rng: &mut impl Rng,
) -> Result<PointCloud, EvalError> {
    if cloud.is_empty() {
        return Err(EvalError::InvalidInput(
            "cannot sample an empty cloud".into(),
        ));
    }
    let weights: Vec<f64> = (0..cloud.len())
        .map(|i| {
            let s = cloud.scale(i);
            cloud.opacity(i) * s.x * s.y * s.z
        })
        .collect();
    let dist = WeightedIndex::new(&weights)
        .map_err(|e| EvalError::InvalidInput(format!("no sampling mass in cloud: {e}")))?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let i = dist.sample(rng);
        let z = Vector3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        let r = rotation_matrix(&cloud.rotation(i));
        out.push(cloud.positions()[i] + r * cloud.scale(i).component_mul(&z));
    }
    Ok(out)
}

/// Maps `pred` so that its bounding box coincides with the bounding box of
/// `gt`: per-axis scale about the box centers, then translation. Axes along
/// which both boxes are flat are only translated.
pub fn align_normalize(
    pred: &[Vector3<f64>],
    gt: &[Vector3<f64>],
) -> Result<PointCloud, EvalError> {
    let (plo, phi) =
        bounds(pred).ok_or_else(|| EvalError::InvalidInput("empty point cloud".into()))?;
    let (glo, ghi) =
        bounds(gt).ok_or_else(|| EvalError::InvalidInput("empty point cloud".into()))?;
    if (plo, phi) == (glo, ghi) {
        return Ok(pred.to_vec());
    }
    let (pe, ge) = (phi - plo, ghi - glo);
    if pe.max() <= 0.0 || ge.max() <= 0.0 {
        return Err(EvalError::InvalidInput("zero-extent point cloud".into()));
    }
    let mut scale = Vector3::zeros();
    for k in 0..3 {
        scale[k] = match (pe[k] > 0.0, ge[k] > 0.0) {
            (true, _) => ge[k] / pe[k],
            (false, false) => 1.0,
            (false, true) => {
                return Err(EvalError::InvalidInput(format!(
                    "prediction is flat along axis {k}"
                )));
            }
        };
    }
    let (pc, gc) = ((plo + phi) / 2.0, (glo + ghi) / 2.0);
    Ok(pred
        .iter()
        .map(|p| gc + (p - pc).component_mul(&scale))
        .collect())
}

/// Centers a cloud's bounding box at the origin and scales it uniformly so
/// its longest side is 1.
pub fn normalize_unit_box(points: &[Vector3<f64>]) -> Result<PointCloud, EvalError> {
    let (lo, hi) =
        bounds(points).ok_or_else(|| EvalError::InvalidInput("empty point cloud".into()))?;
    let extent = (hi - lo).max();
    if extent <= 0.0 {
        return Err(EvalError::InvalidInput("zero-extent point cloud".into()));
    }
    let center = (lo + hi) / 2.0;
    Ok(points.iter().map(|p| (p - center) / extent).collect())
}

fn bounds(points: &[Vector3<f64>]) -> Option<(Vector3<f64>, Vector3<f64>)> {
    let first = *points.first()?;
    Some(
        points
            .iter()
            .fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p))),
    )
}

/// Uniform grid over a point set answering exact nearest-neighbour queries.
pub struct GridIndex<'a> {
    points: &'a [Vector3<f64>],
    origin: Vector3<f64>,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> GridIndex<'a> {
    pub fn new(points: &'a [Vector3<f64>]) -> Result<Self, EvalError> {
        let (lo, hi) =
            bounds(points).ok_or_else(|| EvalError::InvalidInput("empty point cloud".into()))?;
        let ext = hi - lo;
        let longest = ext.max();
        let per_axis = (points.len() as f64).cbrt().ceil().max(1.0);
        let cell = if longest > 0.0 {
            longest / per_axis
        } else {
            1.0
        };
        let dims = [0, 1, 2].map(|k| (ext[k] / cell).floor() as usize + 1);
        let mut grid = Self {
            points,
            origin: lo,
            cell,
            dims,
            starts: vec![0; dims[0] * dims[1] * dims[2] + 1],
            order: Vec::with_capacity(points.len()),
        };
        let keys: Vec<usize> = points.iter().map(|p| grid.key(grid.cell_of(p))).collect();
        for &k in &keys {
            grid.starts[k + 1] += 1;
        }
        for i in 1..grid.starts.len() {
            grid.starts[i] += grid.starts[i - 1];
        }
        let mut fill = grid.starts.clone();
        grid.order = vec![0; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            grid.order[fill[k]] = i;
            fill[k] += 1;
        }
        Ok(grid)
    }

    fn cell_of(&self, p: &Vector3<f64>) -> [i64; 3] {
        [0, 1, 2].map(|k| {
            let c = ((p[k] - self.origin[k]) / self.cell).floor() as i64;
            c.clamp(0, self.dims[k] as i64 - 1)
        })
    }

    fn key(&self, c: [i64; 3]) -> usize {
        (c[2] as usize * self.dims[1] + c[1] as usize) * self.dims[0] + c[0] as usize
    }

    /// Distance to the nearest indexed point.
    pub fn nearest_distance(&self, q: &Vector3<f64>) -> f64 {
        let home = self.cell_of(q);
        let max_ring = self.dims.iter().copied().max().unwrap_or(1) as i64;
        let mut best = f64::INFINITY;
        for ring in 0..=max_ring {
            // Every cell on shell `ring` is at least `ring − 1` cells away
            // along one axis, whether or not `q` lies inside the grid.
            if (ring as f64 - 1.0) * self.cell > best {
                break;
            }
            self.visit_ring(home, ring, |i| {
                let d = (self.points[i] - q).norm();
                if d < best {
                    best = d;
                }
            });
        }
        best
    }

    fn visit_ring(&self, home: [i64; 3], ring: i64, mut f: impl FnMut(usize)) {
        let lo = [0, 1, 2].map(|k| (home[k] - ring).max(0));
        let hi = [0, 1, 2].map(|k| (home[k] + ring).min(self.dims[k] as i64 - 1));
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let on_shell = (x - home[0]).abs() == ring
                        || (y - home[1]).abs() == ring
                        || (z - home[2]).abs() == ring;
                    if !on_shell {
                        continue;
                    }
                    let k = self.key([x, y, z]);
                    for &i in &self.order[self.starts[k]..self.starts[k + 1]] {
                        f(i);
                    }
                }
            }
        }
    }
}

fn nn_distances(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> Result<Vec<f64>, EvalError> {
    let grid = GridIndex::new(to)?;
    Ok(from.iter().map(|p| grid.nearest_distance(p)).collect())
}

fn nn_distances_brute(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> Vec<f64> {
    from.iter()
        .map(|p| {
            to.iter()
                .map(|q| (p - q).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn nonempty(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<(), EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::InvalidInput("empty point cloud".into()));
    }
    Ok(())
}

fn chamfer_from(ab: &[f64], ba: &[f64]) -> f64 {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    0.5 * (mean(ab) + mean(ba))
}

fn f_score_from(ab: &[f64], ba: &[f64], threshold: f64) -> f64 {
    let frac = |v: &[f64]| v.iter().filter(|d| **d < threshold).count() as f64 / v.len() as f64;
    let (precision, recall) = (frac(ab), frac(ba));
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Symmetric Chamfer distance: the mean of the two mean nearest-neighbour
/// Euclidean distances.
pub fn chamfer(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<f64, EvalError> {
    nonempty(a, b)?;
    Ok(chamfer_from(&nn_distances(a, b)?, &nn_distances(b, a)?))
}

pub fn chamfer_brute(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<f64, EvalError> {
    nonempty(a, b)?;
    Ok(chamfer_from(
        &nn_distances_brute(a, b),
        &nn_distances_brute(b, a),
    ))
}

/// Harmonic mean of precision (`pred` points within `threshold` of `gt`) and
/// recall (`gt` points within `threshold` of `pred`). Distances must be
/// strictly below the threshold.
pub fn f_score(
    pred: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    threshold: f64,
) -> Result<f64, EvalError> {
    nonempty(pred, gt)?;
    Ok(f_score_from(
        &nn_distances(pred, gt)?,
        &nn_distances(gt, pred)?,
        threshold,
    ))
}

pub fn f_score_brute(
    pred: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    threshold: f64,
) -> Result<f64, EvalError> {
    nonempty(pred, gt)?;
    Ok(f_score_from(
        &nn_distances_brute(pred, gt),
        &nn_distances_brute(gt, pred),
        threshold,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Gaussian;
    use nalgebra::Vector4;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud_strategy() -> impl Strategy<Value = Vec<Vector3<f64>>> {
        prop::collection::vec((-3.0..3.0f64, -3.0..3.0f64, -0.5..0.5f64), 1..60).prop_map(|v| {
            v.into_iter()
                .map(|(x, y, z)| Vector3::new(x, y, z))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn grid_matches_brute_force(a in cloud_strategy(), b in cloud_strategy()) {
            prop_assert_eq!(nn_distances(&a, &b).unwrap(), nn_distances_brute(&a, &b));
        }

        #[test]
        fn far_queries_match_brute_force(a in cloud_strategy(), shift in 5.0..50.0f64) {
            let q: Vec<_> = a.iter().map(|p| p * 2.0 + Vector3::new(shift, -shift, 0.3 * shift)).collect();
            prop_assert_eq!(nn_distances(&q, &a).unwrap(), nn_distances_brute(&q, &a));
        }
    }

    #[test]
    fn identical_clouds() {
        let a: Vec<_> = (0..20)
            .map(|i| Vector3::new(i as f64, (i * i) as f64 * 0.1, 0.0))
            .collect();
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert_eq!(f_score(&a, &a, 0.2).unwrap(), 1.0);
    }

    #[test]
    fn threshold_is_strict() {
        let a = vec![Vector3::new(0.0, 0.0, 0.0)];
        let b = vec![Vector3::new(0.5, 0.0, 0.0)];
        assert_eq!(f_score(&a, &b, 0.5).unwrap(), 0.0);
        assert_eq!(f_score(&a, &b, 0.50001).unwrap(), 1.0);
    }

    #[test]
    fn alignment_inverts_affine_map() {
        let gt: Vec<_> = (0..30)
            .map(|i| Vector3::new((i as f64).sin(), (i as f64 * 0.7).cos(), i as f64 * 0.01))
            .collect();
        let pred: Vec<_> = gt
            .iter()
            .map(|p| 2.0 * p + Vector3::new(1.0, 0.0, 0.0))
            .collect();
        let aligned = align_normalize(&pred, &gt).unwrap();
        for (a, g) in aligned.iter().zip(&gt) {
            assert!((a - g).norm() < 1e-12);
        }
        for (a, g) in align_normalize(&gt, &gt).unwrap().iter().zip(&gt) {
            assert!((a - g).norm() < 1e-12);
        }
        let flat = vec![Vector3::zeros(); 3];
        assert!(align_normalize(&flat, &gt).is_err());
    }

    #[test]
    fn unit_box_normalization() {
        let a = vec![Vector3::new(1.0, 2.0, 3.0), Vector3::new(5.0, 3.0, 3.5)];
        let n = normalize_unit_box(&a).unwrap();
        assert_eq!(n[0], Vector3::new(-0.5, -0.125, -0.0625));
        assert_eq!(n[1], Vector3::new(0.5, 0.125, 0.0625));
    }

    #[test]
    fn single_pair_distance() {
        let a = vec![Vector3::new(0.0, 0.0, 0.0)];
        let b = vec![Vector3::new(0.0, 0.0, 1.0)];
        assert_eq!(chamfer(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn transparent_cloud_cannot_be_sampled() {
        let mut cloud = GaussianCloud::new();
        cloud.push_raw(
            Vector3::zeros(),
            Vector3::zeros(),
            Vector4::new(1.0, 0.0, 0.0, 0.0),
            Vector3::zeros(),
            -1e9,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_points(&cloud, 10, &mut rng).is_err());
    }

    #[test]
    fn samples_follow_gaussian_weights() {
        let mut cloud = GaussianCloud::new();
        for (x, s) in [(-10.0, 0.1), (10.0, 0.2)] {
            cloud
                .push(Gaussian {
                    position: Vector3::new(x, 0.0, 0.0),
                    scale: Vector3::new(s, s, s),
                    rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
                    color: Vector3::zeros(),
                    opacity: 0.5,
                })
                .unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = sample_points(&cloud, 4000, &mut rng).unwrap();
        let right = pts.iter().filter(|p| p.x > 0.0).count() as f64 / 4000.0;
        // Volumes 0.001 and 0.008: expect 8/9 on the right.
        assert!((right - 8.0 / 9.0).abs() < 0.03, "{right}");
    }
}
