//! Parser fuzzing and frame-transform round trips.

use std::f64::consts::PI;

use bev_erpn_core::bev::{Point, PointCloud};
use bev_erpn_core::class::ObjectClass;
use bev_erpn_core::erpn::{Detection, Detection3d};
use bev_erpn_core::geometry::{angle_diff, OrientedBox};
use bev_erpn_core::kitti::{
    box_to_label, format_calibration, label_to_velo, parse_calibration_str, parse_labels, parse_labels_str,
    read_velodyne, write_detections, write_velodyne, Box3d, Calibration, ImageSize, KittiError, LabelClass,
};
use bev_erpn_core::loss::GroundTruthBox;
use nalgebra::{Matrix3, Matrix3x4, Rotation3, Vector3};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FIXTURE: &str = "\
Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59
Pedestrian 0.00 0 -0.20 712.40 143.00 810.73 307.92 1.89 0.48 1.20 1.84 1.47 8.41 0.01
DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10
Cyclist 0.12 1 1.94 330.60 176.09 355.61 213.60 1.72 0.50 1.95 -12.63 1.88 34.09 1.54
Van 0.50 2 -2.10 100.00 150.00 200.00 220.00 2.20 1.90 5.10 -20.00 1.75 30.00 -2.70
";

fn mutate(line: &str, rng: &mut ChaCha8Rng) -> String {
    let mut f: Vec<String> = line.split_whitespace().map(String::from).collect();
    let dont_care = f[0] == "DontCare";
    loop {
        match rng.random_range(0..8) {
            0 => {
                f.remove(rng.random_range(0..f.len()));
            }
            1 => {
                let at = rng.random_range(1..f.len());
                f.insert(at, "0.5".into());
                f.insert(at, "1.5".into());
            }
            2 => {
                let i = rng.random_range(1..f.len());
                f[i] = ["x", "1.0.0", "nan", "inf", "--2", "1e"]
                    .choose(rng)
                    .unwrap()
                    .to_string();
            }
            3 => f[0] = ["Bus", "car", "Dontcare", "Truk"].choose(rng).unwrap().to_string(),
            4 if !dont_care => {
                let i = rng.random_range(8..11);
                f[i] = format!("-{}", f[i]);
            }
            5 => f.swap(4, 6),
            6 => f[2] = "7".into(),
            7 => f[1] = "1.5".into(),
            _ => continue,
        }
        return f.join(" ");
    }
}

#[test]
fn fixture_parses() {
    let labels = parse_labels_str(FIXTURE).unwrap();
    assert_eq!(labels.len(), 5);
    assert_eq!(labels[0].class, LabelClass::Object(ObjectClass::Car));
    assert_eq!(labels[0].location, [-0.65, 1.71, 46.70]);
    assert_eq!(labels[0].dims, [1.65, 1.67, 3.64]);
    assert!(labels[2].is_dont_care());
    assert!(parse_labels_str("").unwrap().is_empty());
}

#[test]
fn every_mutation_is_rejected_with_its_line() {
    let lines: Vec<&str> = FIXTURE.lines().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..100 {
        let target = rng.random_range(0..lines.len());
        let mutated = mutate(lines[target], &mut rng);
        let text: Vec<String> = lines
            .iter()
            .enumerate()
            .map(|(i, l)| if i == target { mutated.clone() } else { l.to_string() })
            .collect();
        match parse_labels_str(&text.join("\n")) {
            Err(KittiError::Label { line, .. }) => assert_eq!(line, target + 1, "{mutated}"),
            other => panic!("`{mutated}` gave {other:?}"),
        }
    }
}

fn random_calibration(rng: &mut ChaCha8Rng) -> Calibration {
    let mut angle = || rng.random_range(-PI..PI);
    let r0 = Rotation3::from_euler_angles(angle() * 0.01, angle() * 0.01, angle() * 0.01);
    let base = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
    let tilt = Rotation3::from_euler_angles(angle() * 0.05, angle() * 0.05, angle() * 0.05);
    let mut tr = Matrix3x4::zeros();
    tr.fixed_view_mut::<3, 3>(0, 0).copy_from(&(base * tilt.matrix()));
    tr.set_column(
        3,
        &Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ),
    );
    Calibration::new(Calibration::canonical().p2, *r0.matrix(), tr).unwrap()
}

fn random_box(rng: &mut ChaCha8Rng) -> Box3d {
    Box3d {
        bev: GroundTruthBox::new(
            OrientedBox::new(
                rng.random_range(2.0..40.0),
                rng.random_range(-20.0..20.0),
                rng.random_range(0.5..2.5),
                rng.random_range(0.5..5.0),
                rng.random_range(-PI..PI),
            ),
            ObjectClass::from_index(rng.random_range(0..8)).unwrap(),
        ),
        z_center: rng.random_range(-1.5..0.5),
        height: rng.random_range(1.0..3.0),
    }
}

#[test]
fn box_label_box_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let calib = random_calibration(&mut rng);
        let b = random_box(&mut rng);
        let label = box_to_label(&b, &calib, None, ImageSize::default()).unwrap();
        let back = label_to_velo(&label, &calib).unwrap();
        let (p, q) = (b.bev.bbox, back.bev.bbox);
        for (x, y) in [
            (p.cx, q.cx),
            (p.cy, q.cy),
            (p.w, q.w),
            (p.l, q.l),
            (b.z_center, back.z_center),
            (b.height, back.height),
        ] {
            assert!((x - y).abs() < 1e-6, "{b:?} vs {back:?}");
        }
        assert!(angle_diff(p.phi, q.phi).abs() < 1e-9);
        assert_eq!(back.bev.class, b.bev.class);
    }
}

#[test]
fn calibration_text_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let calib = random_calibration(&mut rng);
    let back = parse_calibration_str(&format_calibration(&calib)).unwrap();
    assert!((back.velo_to_rect() - calib.velo_to_rect()).amax() < 1e-9);
}

#[test]
fn written_detections_parse_back() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let calib = random_calibration(&mut rng);
    let dets: Vec<Detection3d> = (0..20)
        .map(|_| {
            let b = random_box(&mut rng);
            let score = rng.random_range(0.0..1.0);
            Detection3d {
                det: Detection {
                    bbox: b.bev.bbox,
                    p0: score,
                    class_probs: [0.125; 8],
                    class: b.bev.class,
                    score,
                },
                z_center: b.z_center,
                height: b.height,
            }
        })
        .collect();
    let path = dir.path().join("000000.txt");
    write_detections(&path, &dets, &calib, ImageSize::default()).unwrap();
    let labels = parse_labels(&path).unwrap();
    assert_eq!(labels.len(), dets.len());
    for (d, l) in dets.iter().zip(&labels) {
        let want = box_to_label(
            &bev_erpn_core::kitti::detection_to_box(d),
            &calib,
            None,
            ImageSize::default(),
        )
        .unwrap();
        assert_eq!(l.class, LabelClass::Object(d.det.class));
        for (a, b) in l
            .dims
            .iter()
            .zip(&want.dims)
            .chain(l.location.iter().zip(&want.location))
        {
            assert!((a - b).abs() < 1e-4);
        }
        assert!((l.score.unwrap() - d.det.score).abs() < 1e-4);
        assert_eq!((l.truncation, l.occlusion), (-1.0, -1));
    }
    let empty = dir.path().join("empty.txt");
    write_detections(&empty, &[], &calib, ImageSize::default()).unwrap();
    assert_eq!(std::fs::metadata(&empty).unwrap().len(), 0);
}

#[test]
fn velodyne_file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cloud = PointCloud::new(
        (0..1000)
            .map(|_| {
                Point::new(
                    rng.random(),
                    rng.random::<f32>() * -3.0,
                    f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff),
                    rng.random(),
                )
            })
            .collect(),
    );
    let path = dir.path().join("000000.bin");
    write_velodyne(&path, &cloud).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 16_000);
    let back = read_velodyne(&path).unwrap();
    assert_eq!(back.points.len(), cloud.points.len());
    for (a, b) in cloud.points.iter().zip(&back.points) {
        assert_eq!(
            [a.x, a.y, a.z, a.intensity].map(f32::to_bits),
            [b.x, b.y, b.z, b.intensity].map(f32::to_bits)
        );
    }
    std::fs::write(&path, [0u8; 17]).unwrap();
    assert!(matches!(read_velodyne(&path), Err(KittiError::Velodyne { len: 17 })));
}
