use graf::geometry::*;
use graf::image::Image;
use graf::rng::seeded;
use nalgebra::{Matrix3, Rotation3};
use proptest::prelude::*;
use rand::Rng;

fn hemisphere(radius: (f64, f64)) -> PoseDistribution {
    PoseDistribution {
        azimuth: (0.0, std::f64::consts::TAU),
        polar_cos: (0.0, 1.0),
        radius,
        up: Vec3::z(),
    }
}

/// Direct four-neighbour weighted sum.
fn bilinear_oracle(img: &Image, x: f64, y: f64) -> [f64; 3] {
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let mut out = [0.0; 3];
    for (px, py, w) in [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x1, y0, fx * (1.0 - fy)),
        (x0, y1, (1.0 - fx) * fy),
        (x1, y1, fx * fy),
    ] {
        let p = img.pixel(px, py);
        for c in 0..3 {
            out[c] += w * p[c];
        }
    }
    out
}

fn random_image(rng: &mut impl Rng, w: usize, h: usize) -> Image {
    Image::new(w, h, (0..w * h * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
}

#[test]
fn pole_distribution_gives_pole_camera() {
    let dist = PoseDistribution {
        polar_cos: (1.0, 1.0),
        ..hemisphere((2.0, 2.0))
    };
    let pose = sample_pose(&mut seeded(1), &dist).unwrap();
    let c = pose.center();
    assert!((c - Vec3::new(0.0, 0.0, 2.0)).norm() < 1e-3);
    assert!((pose.forward() - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-3);
}

#[test]
fn sampled_poses_look_at_origin_and_stay_on_hemisphere() {
    let mut rng = seeded(2);
    let dist = hemisphere((2.0, 2.0));
    let intr = Intrinsics::new(30.0, 32, 32).unwrap();
    let n = 100_000;
    let mut sum_tz = 0.0;
    for i in 0..n {
        let pose = sample_pose(&mut rng, &dist).unwrap();
        let c = pose.center();
        assert!(c.z >= 0.0);
        sum_tz += c.z;
        if i % 100 == 0 {
            assert!((pose.forward() - (-c / c.norm())).norm() < 1e-9);
            let (px, py) = pose.project(&intr, &Vec3::zeros()).unwrap();
            assert!((px - intr.cx).abs() < 1e-6 && (py - intr.cy).abs() < 1e-6);
        }
    }
    let mean = sum_tz / n as f64;
    assert!((0.995..=1.005).contains(&mean), "mean t_z {mean}");
}

#[test]
fn hand_pinhole_direction() {
    let pose = CameraPose {
        rotation: Matrix3::identity(),
        translation: Vec3::zeros(),
    };
    let intr = Intrinsics::new(20.0, 64, 48).unwrap();
    let rays = generate_rays(&intr, &pose, &[(intr.cx + 20.0, intr.cy)]);
    let want = Vec3::new(1.0, 0.0, 1.0).normalize();
    assert!((rays[0].direction - want).norm() < 1e-12);
}

#[test]
fn patch_coord_examples() {
    let p = PatchPattern {
        center: (0.0, 0.0),
        scale: 1.0,
        size: 2,
    };
    assert_eq!(
        patch_coords(&p),
        vec![(-1.0, -1.0), (0.0, -1.0), (-1.0, 0.0), (0.0, 0.0)]
    );
    let p = PatchPattern {
        center: (10.0, 10.0),
        scale: 2.0,
        size: 4,
    };
    for row in patch_coords(&p).chunks(4) {
        let xs: Vec<f64> = row.iter().map(|c| c.0).collect();
        assert_eq!(xs, vec![6.0, 8.0, 10.0, 12.0]);
    }
}

#[test]
fn max_scale_boundary_is_contained() {
    assert_eq!(max_scale(64, 64, 16), 4.0);
    let mut rng = seeded(3);
    for _ in 0..1000 {
        let p = sample_pattern(&mut rng, 64, 64, 16, 4.0).unwrap();
        assert_eq!(p.scale, 4.0);
        for (x, y) in patch_coords(&p) {
            assert!((0.0..=63.0).contains(&x) && (0.0..=63.0).contains(&y));
        }
    }
}

#[test]
fn anneal_examples() {
    let s = AnnealSchedule {
        max_scale: 4.0,
        iters: 1000,
    };
    assert_eq!(anneal_scale_lower_bound(0, &s), 4.0);
    assert_eq!(anneal_scale_lower_bound(500, &s), 2.5);
    assert_eq!(anneal_scale_lower_bound(1000, &s), 1.0);
    assert_eq!(anneal_scale_lower_bound(5000, &s), 1.0);
}

#[test]
fn bilinear_matches_oracle_and_rejects_outside() {
    let mut rng = seeded(4);
    let img = random_image(&mut rng, 8, 8);
    let coords: Vec<(f64, f64)> = (0..500)
        .map(|_| (rng.random_range(0.0..=7.0), rng.random_range(0.0..=7.0)))
        .collect();
    let got = bilinear_extract(&img, &coords).unwrap();
    for (i, &(x, y)) in coords.iter().enumerate() {
        let want = bilinear_oracle(&img, x, y);
        for c in 0..3 {
            assert!((got[3 * i + c] - want[c]).abs() < 1e-12);
        }
    }
    assert!(bilinear_extract(&img, &[(7.5, 1.0)]).is_err());
    assert!(bilinear_extract(&img, &[(1.0, -0.5)]).is_err());
}

#[test]
fn unit_scale_integer_center_is_a_crop() {
    let mut rng = seeded(5);
    let img = random_image(&mut rng, 12, 10);
    let p = PatchPattern {
        center: (6.0, 5.0),
        scale: 1.0,
        size: 4,
    };
    let got = bilinear_extract(&img, &patch_coords(&p)).unwrap();
    let mut i = 0;
    for y in 3..7 {
        for x in 4..8 {
            assert_eq!(&got[3 * i..3 * i + 3], &img.pixel(x, y));
            i += 1;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn patterns_stay_in_domain(seed in any::<u64>(), w in 8usize..80, h in 8usize..80, half in 1usize..5, frac in 0.0f64..=1.0) {
        let k = 2 * half;
        prop_assume!(k <= w.min(h));
        let s_max = max_scale(w, h, k);
        let s_lo = 1.0 + frac * (s_max - 1.0);
        let mut rng = seeded(seed);
        for _ in 0..50 {
            let p = sample_pattern(&mut rng, w, h, k, s_lo).unwrap();
            prop_assert!(p.scale >= s_lo - 1e-12 && p.scale <= s_max + 1e-12);
            for (x, y) in patch_coords(&p) {
                prop_assert!(x >= -1e-9 && x <= (w - 1) as f64 + 1e-9);
                prop_assert!(y >= -1e-9 && y <= (h - 1) as f64 + 1e-9);
            }
        }
    }

    #[test]
    fn patch_coords_are_affine(cx in -50.0f64..50.0, cy in -50.0f64..50.0, s in 0.1f64..8.0, half in 1usize..6) {
        let k = 2 * half;
        let base = patch_coords(&PatchPattern { center: (0.0, 0.0), scale: 1.0, size: k });
        let got = patch_coords(&PatchPattern { center: (cx, cy), scale: s, size: k });
        for (b, g) in base.iter().zip(&got) {
            prop_assert!((s * b.0 + cx - g.0).abs() < 1e-12 && (s * b.1 + cy - g.1).abs() < 1e-12);
        }
    }

    #[test]
    fn anneal_is_monotone_and_bounded(s in 1.0f64..10.0, t in 1u64..5000, a in 0u64..10_000, b in 0u64..10_000) {
        let sched = AnnealSchedule { max_scale: s, iters: t };
        let (lo, hi) = (a.min(b), a.max(b));
        let (x, y) = (anneal_scale_lower_bound(lo, &sched), anneal_scale_lower_bound(hi, &sched));
        prop_assert!(y <= x && (1.0..=s).contains(&x) && (1.0..=s).contains(&y));
    }

    #[test]
    fn rays_are_unit_and_rotation_equivariant(seed in any::<u64>(), rx in -3.0f64..3.0, ry in -3.0f64..3.0, rz in -3.0f64..3.0) {
        let mut rng = seeded(seed);
        let pose = sample_pose(&mut rng, &hemisphere((1.5, 4.0))).unwrap();
        let intr = Intrinsics::new(25.0, 16, 16).unwrap();
        let coords = intr.pixel_grid();
        let rays = generate_rays(&intr, &pose, &coords);
        let rot = Rotation3::from_euler_angles(rx, ry, rz).into_inner();
        let moved = CameraPose { rotation: rot * pose.rotation, translation: rot * pose.translation };
        for (a, b) in rays.iter().zip(generate_rays(&intr, &moved, &coords)) {
            prop_assert!((a.direction.norm() - 1.0).abs() < 1e-9);
            prop_assert!((rot * a.direction - b.direction).norm() < 1e-9);
            prop_assert!((rot * a.origin - b.origin).norm() < 1e-9);
        }
    }

    #[test]
    fn bilinear_is_exact_on_lattice(seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let img = random_image(&mut rng, 6, 5);
        let coords: Vec<(f64, f64)> = (0..5).flat_map(|y| (0..6).map(move |x| (x as f64, y as f64))).collect();
        prop_assert_eq!(bilinear_extract(&img, &coords).unwrap(), img.data.clone());
    }
}
