use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::fusion::FusedCloud;
use crate::geometry::{mat_vec, rotation_z, Point3};
use crate::labelgen::PseudoLabels;
use crate::rng::{self, Rng};
use crate::scene::Scene;

/// A scene with its pseudo labels and fused features, row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub scene: Scene,
    pub labels: PseudoLabels,
    pub fused: FusedCloud,
}

impl Example {
    pub fn select(&self, indices: &[usize]) -> Example {
        let mut labels = self.labels.clone();
        labels.pointwise = self.labels.pointwise.select(indices);
        Example {
            scene: self.scene.select(indices),
            labels,
            fused: self.fused.select(indices),
        }
    }
}

/// `n` row indices out of `n_available`: without replacement when there are
/// enough rows, otherwise every row once plus uniform draws with replacement.
/// The result is shuffled.
pub fn subsample_indices(n_available: usize, n: usize, rng: &mut Rng) -> Vec<usize> {
    if n_available >= n {
        return index::sample(rng, n_available, n).into_vec();
    }
    let mut out: Vec<usize> = (0..n_available).collect();
    out.extend((n_available..n).map(|_| rng.random_range(0..n_available)));
    out.shuffle(rng);
    out
}

pub fn subsample_cloud(scene: &Scene, n: usize, seed: u64) -> Result<Scene> {
    if scene.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if n == 0 {
        return Err(Error::config("subsample size must be at least 1"));
    }
    let mut rng = rng::stream(seed, "subsample", 0);
    Ok(scene.select(&subsample_indices(scene.len(), n, &mut rng)))
}

/// Rotates the cloud, the pseudo 3D labels and any ground-truth joints about
/// the vertical axis through the cloud centroid. Pixels, depths and pointwise
/// labels are left as they were.
pub fn augment_rotation(scene: &Scene, labels: &PseudoLabels, angle: f64) -> (Scene, PseudoLabels) {
    let Some(c) = scene.centroid() else {
        return (scene.clone(), labels.clone());
    };
    let r = rotation_z(angle);
    let turn = |p: Point3| c.add(mat_vec(&r, p.sub(c)));
    let mut out = scene.clone();
    for p in &mut out.points {
        p.position = turn(p.position);
    }
    if let Some(gt) = out.keypoints_3d_gt.as_mut() {
        for j in gt.iter_mut() {
            *j = turn(*j);
        }
    }
    let mut l = labels.clone();
    for y in &mut l.y_tilde {
        *y = turn(*y);
    }
    (out, l)
}

/// Network input rows `[position - origin, camera features]`.
pub fn network_input(scene: &Scene, fused: &FusedCloud, origin: Point3) -> Array2<f64> {
    let mut x = fused.matrix().clone();
    for (mut row, p) in x.outer_iter_mut().zip(scene.positions()) {
        let q = p.sub(origin);
        row[0] = q.x;
        row[1] = q.y;
        row[2] = q.z;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraModel;
    use crate::keypoints::NUM_KEYPOINTS;
    use crate::labelgen::PointwiseLabels;
    use crate::scene::Keypoint2d;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn scene(n: usize) -> Scene {
        let cam =
            CameraModel::with_identity_extrinsics(100.0, 100.0, 64.0, 64.0, 128, 128).unwrap();
        let pts: Vec<Point3> = (0..n)
            .map(|i| Point3::new(i as f64 * 0.1, (i % 3) as f64 * 0.2, 5.0 + i as f64 * 0.01))
            .collect();
        Scene::new("s", cam, &pts, [Keypoint2d::default(); NUM_KEYPOINTS], None).unwrap()
    }

    fn labels(n: usize) -> PseudoLabels {
        let mut y_tilde = [Point3::ZERO; NUM_KEYPOINTS];
        for (k, y) in y_tilde.iter_mut().enumerate() {
            *y = Point3::new(k as f64 * 0.05, -0.3, 5.2);
        }
        PseudoLabels {
            y_tilde,
            reliability: [1.0; NUM_KEYPOINTS],
            pointwise: PointwiseLabels::zeros(n),
            visibility: [true; NUM_KEYPOINTS],
        }
    }

    #[test]
    fn full_size_subsample_is_a_permutation() {
        let s = scene(20);
        let sub = subsample_cloud(&s, 20, 4).unwrap();
        let mut a: Vec<u64> = s.positions().map(|p| p.x.to_bits()).collect();
        let mut b: Vec<u64> = sub.positions().map(|p| p.x.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn subsample_is_deterministic() {
        let s = scene(40);
        assert_eq!(
            subsample_cloud(&s, 20, 9).unwrap(),
            subsample_cloud(&s, 20, 9).unwrap()
        );
        assert!(matches!(
            subsample_cloud(&scene(0), 4, 0),
            Err(Error::EmptyCloud)
        ));
    }

    #[test]
    fn upsampling_covers_every_point_evenly() {
        // n = 2N: each row appears once plus Binomial(N, 1/N) extra draws,
        // so its mean multiplicity is 2 over many seeds.
        let (n_avail, n, trials) = (16usize, 32usize, 1000u64);
        let mut counts = vec![0usize; n_avail];
        for seed in 0..trials {
            let mut rng = rng::from_seed(seed);
            let idx = subsample_indices(n_avail, n, &mut rng);
            assert_eq!(idx.len(), n);
            let mut seen = vec![false; n_avail];
            for &i in &idx {
                counts[i] += 1;
                seen[i] = true;
            }
            assert!(seen.iter().all(|&s| s));
        }
        let expected = trials as f64 * n as f64 / n_avail as f64;
        let extra = trials as f64 * (n - n_avail) as f64 / n_avail as f64;
        let var = extra * (1.0 - 1.0 / n_avail as f64);
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / var)
            .sum();
        // 15 degrees of freedom; 99.9th percentile is 37.7.
        assert!(chi2 < 37.7, "chi2 {chi2}");
    }

    #[test]
    fn rotation_examples() {
        let s = scene(7);
        let l = labels(7);
        let (s0, l0) = augment_rotation(&s, &l, 0.0);
        for (p, q) in s.positions().zip(s0.positions()) {
            assert!(p.distance(q) < 1e-12);
        }
        assert!((0..NUM_KEYPOINTS).all(|k| l.y_tilde[k].distance(l0.y_tilde[k]) < 1e-12));

        let (a, la) = augment_rotation(&s, &l, PI);
        let (b, lb) = augment_rotation(&a, &la, PI);
        for (p, q) in s.positions().zip(b.positions()) {
            assert!(p.distance(q) < 1e-12);
        }
        for k in 0..NUM_KEYPOINTS {
            assert!(l.y_tilde[k].distance(lb.y_tilde[k]) < 1e-12);
        }

        let c = s.centroid().unwrap();
        let (q, lq) = augment_rotation(&s, &l, FRAC_PI_2);
        for (p, r) in s.points.iter().zip(&q.points) {
            let d = p.position.sub(c);
            let expect = Point3::new(c.x - d.y, c.y + d.x, p.position.z);
            assert!(r.position.distance(expect) < 1e-12);
            assert_eq!(r.pixel, p.pixel);
            assert_eq!(r.depth, p.depth);
        }
        let d = l.y_tilde[3].sub(c);
        assert!(lq.y_tilde[3].distance(Point3::new(c.x - d.y, c.y + d.x, l.y_tilde[3].z)) < 1e-12);
        assert_eq!(lq.pointwise, l.pointwise);
    }

    #[test]
    fn network_input_centers_positions_and_keeps_camera_columns() {
        let s = scene(3);
        let mut m = Array2::from_elem((3, crate::fusion::FUSED_WIDTH), 0.25);
        for (mut row, p) in m.outer_iter_mut().zip(s.positions()) {
            row[0] = p.x;
            row[1] = p.y;
            row[2] = p.z;
        }
        let fused = FusedCloud::new(m).unwrap();
        let origin = s.centroid().unwrap();
        let x = network_input(&s, &fused, origin);
        let mean: f64 = x.column(0).sum() / 3.0;
        assert!(mean.abs() < 1e-12);
        assert!(x.column(5).iter().all(|&v| v == 0.25));
    }
}
