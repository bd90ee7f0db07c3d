//! Training-time augmentations: random rotation/scale/downsampling, Mix3D
//! scene concatenation and PointCutMix patch swapping.

use std::f64::consts::FRAC_PI_2;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{ClassId, Point, PointCloud};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Yaw range, radians.
    pub rotation_bounds: [f64; 2],
    pub scale_bounds: [f64; 2],
    /// Fraction of points kept by random downsampling.
    pub keep_fraction: f64,
    /// Cube side used by PointCutMix, meters.
    pub patch_extent: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_bounds: [-FRAC_PI_2, FRAC_PI_2],
            scale_bounds: [0.95, 1.05],
            keep_fraction: 0.8,
            patch_extent: 10.0,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            rotation_bounds: [0.0, 0.0],
            scale_bounds: [1.0, 1.0],
            keep_fraction: 1.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [r0, r1] = self.rotation_bounds;
        let [s0, s1] = self.scale_bounds;
        if !(r0 <= r1) || !(s0 <= s1) || !(s0 > 0.0) {
            return Err(Error::validation("augmentation bounds must be ordered, scale positive"));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::validation(format!(
                "keep_fraction {} outside (0, 1]",
                self.keep_fraction
            )));
        }
        if !(self.patch_extent > 0.0) {
            return Err(Error::validation("patch_extent must be positive"));
        }
        Ok(())
    }
}

fn draw(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Counter-clockwise yaw about +y as seen from above: `(1, 0, 0)` rotated by
/// π/2 becomes `(0, 0, -1)`.
pub fn rotate_yaw(p: Point, theta: f64) -> Point {
    let (s, c) = theta.sin_cos();
    Point {
        x: c * p.x + s * p.z,
        y: p.y,
        z: -s * p.x + c * p.z,
        intensity: p.intensity,
    }
}

/// Rotate, scale about the origin, then keep `⌈keep_fraction · N⌉` points
/// (original order preserved). Labels travel with their points.
pub fn random_transform(cloud: &PointCloud, cfg: &AugmentConfig, rng: &mut impl Rng) -> PointCloud {
    let theta = draw(rng, cfg.rotation_bounds);
    let scale = draw(rng, cfg.scale_bounds);
    let n = cloud.len();
    let keep = ((cfg.keep_fraction * n as f64).ceil() as usize).min(n);
    let mut kept: Vec<usize> = if keep == n {
        (0..n).collect()
    } else {
        index::sample(rng, n, keep).into_vec()
    };
    kept.sort_unstable();

    let points = kept
        .iter()
        .map(|&i| {
            let mut p = rotate_yaw(cloud.points[i], theta);
            p.x *= scale;
            p.y *= scale;
            p.z *= scale;
            p
        })
        .collect();
    PointCloud {
        points,
        labels: cloud
            .labels
            .as_ref()
            .map(|l| kept.iter().map(|&i| l[i]).collect()),
        frame_id: cloud.frame_id.clone(),
    }
}

fn labels_or_ignore(c: &PointCloud) -> Vec<ClassId> {
    c.labels.clone().unwrap_or_else(|| vec![ClassId::IGNORE; c.len()])
}

/// Concatenate two scenes, points and labels alike.
pub fn mix3d(a: &PointCloud, b: &PointCloud) -> PointCloud {
    let mut points = a.points.clone();
    points.extend_from_slice(&b.points);
    let labels = if a.labels.is_none() && b.labels.is_none() {
        None
    } else {
        let mut l = labels_or_ignore(a);
        l.extend(labels_or_ignore(b));
        Some(l)
    };
    PointCloud {
        points,
        labels,
        frame_id: a.frame_id.clone(),
    }
}

fn in_cube(p: &Point, center: &Point, half: f64) -> bool {
    (p.x - center.x).abs() <= half && (p.y - center.y).abs() <= half && (p.z - center.z).abs() <= half
}

/// Replace the points of `a` inside a cube of side `patch_extent` (centred on
/// a random point of `a`) with the points of `b` inside the same cube.
pub fn point_cut_mix(
    a: &PointCloud,
    b: &PointCloud,
    patch_extent: f64,
    rng: &mut impl Rng,
) -> PointCloud {
    if a.is_empty() {
        return a.clone();
    }
    let center = a.points[rng.random_range(0..a.len())];
    let half = patch_extent / 2.0;
    let (la, lb) = (labels_or_ignore(a), labels_or_ignore(b));
    let mut points = Vec::with_capacity(a.len());
    let mut labels = Vec::with_capacity(a.len());
    for (p, l) in a.points.iter().zip(&la) {
        if !in_cube(p, &center, half) {
            points.push(*p);
            labels.push(*l);
        }
    }
    for (p, l) in b.points.iter().zip(&lb) {
        if in_cube(p, &center, half) {
            points.push(*p);
            labels.push(*l);
        }
    }
    PointCloud {
        points,
        labels: (a.labels.is_some() || b.labels.is_some()).then_some(labels),
        frame_id: a.frame_id.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;

    fn line(n: usize, class: u16) -> PointCloud {
        PointCloud::labeled(
            (0..n).map(|i| Point::new(i as f64, 0.5, -(i as f64))).collect(),
            vec![ClassId(class); n],
        )
        .unwrap()
    }

    #[test]
    fn identity_transform() {
        let c = line(10, 2);
        let mut rng = seed::rng(1, "t");
        assert_eq!(random_transform(&c, &AugmentConfig::identity(), &mut rng), c);
    }

    #[test]
    fn keep_fraction_cardinality() {
        let c = PointCloud::labeled(
            (0..10).map(|i| Point::new(i as f64, 0.0, 0.0)).collect(),
            (0..10).map(ClassId).collect(),
        )
        .unwrap();
        let cfg = AugmentConfig {
            keep_fraction: 0.8,
            ..AugmentConfig::identity()
        };
        let out = random_transform(&c, &cfg, &mut seed::rng(3, "t"));
        assert_eq!(out.len(), 8);
        for (p, l) in out.points.iter().zip(out.labels.as_ref().unwrap()) {
            assert_eq!(p.x, l.0 as f64);
        }
    }

    #[test]
    fn quarter_turn() {
        let p = rotate_yaw(Point::new(1.0, 0.0, 0.0), FRAC_PI_2);
        approx::assert_abs_diff_eq!(p.x, 0.0, epsilon = 1e-15);
        assert_eq!(p.y, 0.0);
        approx::assert_abs_diff_eq!(p.z, -1.0, epsilon = 1e-15);
        let cfg = AugmentConfig {
            rotation_bounds: [FRAC_PI_2, FRAC_PI_2],
            ..AugmentConfig::identity()
        };
        let out = random_transform(&line(2, 0), &cfg, &mut seed::rng(0, "t"));
        approx::assert_abs_diff_eq!(out.points[1].z, -1.0, epsilon = 1e-15);
    }

    #[test]
    fn mix3d_concatenates() {
        let (a, b) = (line(3, 0), line(2, 1));
        let m = mix3d(&a, &b);
        assert_eq!(m.len(), 5);
        assert_eq!(m.labels.as_ref().unwrap()[3..], [ClassId(1), ClassId(1)]);
        assert_eq!(mix3d(&a, &PointCloud::default()), a);
    }

    #[test]
    fn cut_mix_edge_cases() {
        let a = line(20, 0);
        let out = point_cut_mix(&a, &PointCloud::default(), 4.0, &mut seed::rng(5, "t"));
        assert!(out.len() < a.len());
        assert!(out.points.iter().all(|p| a.points.contains(p)));

        // b lives far away and the patch only holds its own centre point
        let mut far = line(5, 1);
        for p in &mut far.points {
            p.y += 1000.0;
        }
        let out = point_cut_mix(&a, &far, 0.5, &mut seed::rng(5, "t"));
        assert_eq!(out.len(), a.len() - 1);
        assert!(out.points.iter().all(|p| a.points.contains(p)));
        assert!(out.labels.as_ref().unwrap().iter().all(|&l| l == ClassId(0)));

        let again = point_cut_mix(&a, &line(20, 1), 4.0, &mut seed::rng(9, "t"));
        assert_eq!(again, point_cut_mix(&a, &line(20, 1), 4.0, &mut seed::rng(9, "t")));
        assert!(again.labels.as_ref().unwrap().contains(&ClassId(1)));
    }

    fn arb_cloud() -> impl Strategy<Value = PointCloud> {
        prop::collection::vec(((-20.0..20.0f64), (-3.0..3.0f64), (-20.0..20.0f64), 0u16..7), 0..40)
            .prop_map(|v| {
                PointCloud::labeled(
                    v.iter().map(|&(x, y, z, _)| Point::new(x, y, z)).collect(),
                    v.iter().map(|&(.., l)| ClassId(l)).collect(),
                )
                .unwrap()
            })
    }

    fn dist(a: &Point, b: &Point) -> f64 {
        ((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2)).sqrt()
    }

    proptest! {
        #[test]
        fn transforms_keep_alignment(a in arb_cloud(), b in arb_cloud(), s in any::<u64>()) {
            let mut rng = seed::rng(s, "p");
            for out in [
                random_transform(&a, &AugmentConfig::default(), &mut rng),
                mix3d(&a, &b),
                point_cut_mix(&a, &b, 10.0, &mut rng),
            ] {
                prop_assert_eq!(out.labels.as_ref().map(|l| l.len()), Some(out.len()));
            }
        }

        #[test]
        fn similarity_preserves_distance_ratios(a in arb_cloud(), s in any::<u64>()) {
            let cfg = AugmentConfig { keep_fraction: 1.0, ..Default::default() };
            let out = random_transform(&a, &cfg, &mut seed::rng(s, "p"));
            let n = a.len();
            for i in 0..n.saturating_sub(2) {
                let (d0, d1) = (dist(&a.points[i], &a.points[i + 1]), dist(&a.points[i], &a.points[i + 2]));
                let (e0, e1) = (dist(&out.points[i], &out.points[i + 1]), dist(&out.points[i], &out.points[i + 2]));
                if d0 > 1e-6 && d1 > 1e-6 {
                    prop_assert!((e0 / d0 - e1 / d1).abs() < 1e-9);
                    prop_assert!((0.95 - 1e-12..=1.05 + 1e-12).contains(&(e0 / d0)));
                }
            }
        }

        #[test]
        fn mix3d_associative_on_label_multisets(a in arb_cloud(), b in arb_cloud(), c in arb_cloud()) {
            let mut l = mix3d(&mix3d(&a, &b), &c).labels.unwrap();
            let mut r = mix3d(&a, &mix3d(&b, &c)).labels.unwrap();
            l.sort();
            r.sort();
            prop_assert_eq!(l, r);
        }
    }
}
