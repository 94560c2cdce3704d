use mgaze_core::geometry::{
    focal_from_fov, pseudo_gaze_labels, relative_direction_3d, spatial_encoding, CameraIntrinsics,
};
use mgaze_core::{HeadBox, ImageDims};
use proptest::prelude::*;

fn dims() -> impl Strategy<Value = ImageDims> {
    (64u32..2000, 64u32..2000).prop_map(|(w, h)| ImageDims::new(w, h).unwrap())
}

fn head(d: ImageDims) -> impl Strategy<Value = HeadBox> {
    let (w, h) = (f64::from(d.width), f64::from(d.height));
    (0.0..w, 0.0..h, 4.0..w / 2.0, 4.0..h / 2.0)
        .prop_map(|(cx, cy, bw, bh)| HeadBox::new(cx, cy, bw, bh).unwrap())
}

fn scene() -> impl Strategy<Value = (ImageDims, HeadBox, HeadBox, f64)> {
    dims().prop_flat_map(|d| (Just(d), head(d), head(d), 20.0..120.0f64))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn direction_is_unit_and_antisymmetric((d, b1, b2, fov) in scene()) {
        let cam = focal_from_fov(d, fov).unwrap();
        if let Ok(v) = relative_direction_3d(&b1, &b2, d, &cam) {
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            prop_assert!((n - 1.0).abs() <= 1e-9);
            let u = relative_direction_3d(&b2, &b1, d, &cam).unwrap();
            for k in 0..3 {
                prop_assert!((u[k] + v[k]).abs() <= 1e-12);
            }
            let p = pseudo_gaze_labels(&v).unwrap();
            for k in 0..3 {
                prop_assert_eq!(p.g1[k] + p.g2[k], 0.0);
            }
        }
    }

    #[test]
    fn flip_negates_horizontal_component((d, b1, b2, fov) in scene()) {
        let cam = focal_from_fov(d, fov).unwrap();
        if let Ok(v) = relative_direction_3d(&b1, &b2, d, &cam) {
            let f = relative_direction_3d(&b1.flipped(d), &b2.flipped(d), d, &cam).unwrap();
            prop_assert!((f[0] + v[0]).abs() <= 1e-9);
            prop_assert!((f[1] - v[1]).abs() <= 1e-9);
            prop_assert!((f[2] - v[2]).abs() <= 1e-9);
        }
    }

    #[test]
    fn joint_scaling_leaves_direction_unchanged(
        (d, b1, b2, fov) in scene(),
        num in 1u32..8,
        den in 1u32..8,
    ) {
        let cam = focal_from_fov(d, fov).unwrap();
        if let Ok(v) = relative_direction_3d(&b1, &b2, d, &cam) {
            // Integer image sizes: scale by num/den with both dims multiples of den.
            let d = ImageDims::new(d.width * den, d.height * den).unwrap();
            let up = |b: &HeadBox| HeadBox::new(b.cx * f64::from(den), b.cy * f64::from(den), b.w * f64::from(den), b.h * f64::from(den)).unwrap();
            let (b1, b2) = (up(&b1), up(&b2));
            let cam = CameraIntrinsics::from_focal(d, cam.focal_px * f64::from(den)).unwrap();
            let v2 = relative_direction_3d(&b1, &b2, d, &cam).unwrap();
            for k in 0..3 {
                prop_assert!((v2[k] - v[k]).abs() <= 1e-9);
            }
            let ds = ImageDims::new(d.width / den * num, d.height / den * num).unwrap();
            let s = f64::from(num) / f64::from(den);
            let sc = |b: &HeadBox| HeadBox::new(b.cx * s, b.cy * s, b.w * s, b.h * s).unwrap();
            let cs = CameraIntrinsics::from_focal(ds, cam.focal_px * s).unwrap();
            let u = relative_direction_3d(&sc(&b1), &sc(&b2), ds, &cs).unwrap();
            for k in 0..3 {
                prop_assert!((u[k] - v[k]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn larger_second_box_on_the_same_ray_is_nearer(
        d in dims(),
        side in 8.0..100.0f64,
        grow in 1.05..4.0f64,
        rx in -0.5..0.5f64,
        ry in -0.5..0.5f64,
        fov in 20.0..120.0f64,
    ) {
        let (ox, oy) = (f64::from(d.width) / 2.0, f64::from(d.height) / 2.0);
        let b1 = HeadBox::new(ox + rx * side, oy + ry * side, side, side).unwrap();
        let s2 = side * grow;
        let b2 = HeadBox::new(ox + rx * s2, oy + ry * s2, s2, s2).unwrap();
        let cam = focal_from_fov(d, fov).unwrap();
        let v = relative_direction_3d(&b1, &b2, d, &cam).unwrap();
        prop_assert!(v[2] < 0.0);
        prop_assert!((v[2] + 1.0).abs() <= 1e-9);
        prop_assert!(v[0].abs() <= 1e-6 && v[1].abs() <= 1e-6);
    }
}

#[test]
fn hand_computed_example() {
    let d = ImageDims::new(200, 100).unwrap();
    let cam = CameraIntrinsics::from_focal(d, 200.0).unwrap();
    let b1 = HeadBox::new(50.0, 50.0, 20.0, 20.0).unwrap();
    let b2 = HeadBox::new(150.0, 50.0, 20.0, 20.0).unwrap();
    let v = relative_direction_3d(&b1, &b2, d, &cam).unwrap();
    for (a, b) in v.iter().zip([1.0, 0.0, 0.0]) {
        assert!((a - b).abs() <= 1e-12);
    }
    let e = spatial_encoding(&b1, &b2, d, &cam).unwrap();
    assert_eq!(e.to_vec().len(), 11);
    assert_eq!(e.enc2d, [0.25, 0.25, 0.1, 0.1, 0.75, 0.25, 0.1, 0.1]);
    assert!(relative_direction_3d(&b1, &b1, d, &cam).is_err());
}
