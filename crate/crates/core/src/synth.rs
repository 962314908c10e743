//! Synthetic KITTI-style frames: labelled boxes in front of the sensor and a
//! point cloud sampled on their surfaces and on the ground.

use std::fs;

use rand::Rng;

use crate::bev::{GridSpec, Point, PointCloud};
use crate::class::ObjectClass;
use crate::erpn::{ClassStats, BOX_FEATURES, T_O};
use crate::geometry::OrientedBox;
use crate::kitti::{self, Box3d, Calibration, Dataset, ImageSize, KittiError, KittiLabel};
use crate::loss::GroundTruthBox;
use crate::network::{infer_shapes, Activation, BatchNorm, ConvWeights, LayerSpec, NetworkError, Shape, Weights};

/// Height of the ground plane below the sensor.
pub const GROUND_Z: f64 = -1.73;

#[derive(Debug, Clone)]
pub struct SynthFrame {
    pub boxes: Vec<Box3d>,
    pub labels: Vec<KittiLabel>,
    pub calib: Calibration,
    pub cloud: PointCloud,
}

const CLASSES: [(ObjectClass, f64); 4] = [
    (ObjectClass::Car, 0.6),
    (ObjectClass::Pedestrian, 0.2),
    (ObjectClass::Cyclist, 0.15),
    (ObjectClass::Van, 0.05),
];

fn pick_class<R: Rng>(rng: &mut R) -> ObjectClass {
    let mut u: f64 = rng.random();
    for (c, p) in CLASSES {
        if u < p {
            return c;
        }
        u -= p;
    }
    ObjectClass::Car
}

/// A box standing on the ground, inside `roi` and inside the canonical
/// camera's field of view.
pub fn random_box<R: Rng>(rng: &mut R, roi: &GridSpec, stats: &ClassStats) -> Box3d {
    let class = pick_class(rng);
    let s = stats.get(class).expect("builtin statistics cover every class");
    let mut jitter = || rng.random_range(0.9..1.1);
    let (w, l, h) = (s.width * jitter(), s.length * jitter(), s.height * jitter());
    let x = rng.random_range(roi.x_range.0 + 6.0..roi.x_range.1 - 3.0);
    let y = rng
        .random_range(-0.6 * x..0.6 * x)
        .clamp(roi.y_range.0 + 3.0, roi.y_range.1 - 3.0);
    let phi = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    Box3d {
        bev: GroundTruthBox::new(OrientedBox::new(x, y, w, l, phi), class),
        z_center: GROUND_Z + h / 2.0,
        height: h,
    }
}

/// Up to `objects` non-overlapping boxes and a matching cloud; labels are
/// fully visible (truncation 0, occlusion 0).
pub fn synth_frame<R: Rng>(rng: &mut R, objects: usize) -> SynthFrame {
    let roi = GridSpec::default();
    let stats = ClassStats::builtin();
    let calib = Calibration::canonical();
    let mut boxes: Vec<Box3d> = Vec::new();
    let mut tries = 0;
    while boxes.len() < objects && tries < 100 * objects {
        tries += 1;
        let b = random_box(rng, &roi, &stats);
        let clear = boxes.iter().all(|o| {
            let (p, q) = (b.bev.bbox, o.bev.bbox);
            (p.cx - q.cx).hypot(p.cy - q.cy) > p.circumradius() + q.circumradius() + 0.5
        });
        if clear && kitti::in_image_plane(&b, &calib, ImageSize::default()) {
            boxes.push(b);
        }
    }
    let labels = boxes
        .iter()
        .map(|b| {
            let mut l =
                kitti::box_to_label(b, &calib, None, ImageSize::default()).expect("canonical calibration inverts");
            l.truncation = 0.0;
            l.occlusion = 0;
            l
        })
        .collect();

    let mut points = Vec::new();
    for _ in 0..4000 {
        let x = rng.random_range(roi.x_range.0..roi.x_range.1);
        let y = rng.random_range(roi.y_range.0..roi.y_range.1);
        points.push(Point::new(
            x as f32,
            y as f32,
            GROUND_Z as f32,
            rng.random_range(0.0..0.3),
        ));
    }
    for b in &boxes {
        let ob = b.bev.bbox;
        let (s, c) = ob.phi.sin_cos();
        let n = (ob.w * ob.l * 60.0) as usize + 50;
        let reflect = rng.random_range(0.3..1.0);
        for _ in 0..n {
            let along = rng.random_range(-0.5..0.5) * ob.l;
            let across = rng.random_range(-0.5..0.5) * ob.w;
            let z = b.z_center + rng.random_range(-0.5..0.5) * b.height;
            points.push(Point::new(
                (ob.cx + c * along - s * across) as f32,
                (ob.cy + s * along + c * across) as f32,
                z as f32,
                reflect as f32,
            ));
        }
    }
    SynthFrame {
        boxes,
        labels,
        calib,
        cloud: PointCloud::new(points),
    }
}

/// Writes the frame under the standard layout of `ds`.
pub fn write_frame(ds: &Dataset, id: &str, frame: &SynthFrame) -> Result<(), KittiError> {
    for sub in ["velodyne", "label_2", "calib"] {
        let dir = ds.root.join(sub);
        fs::create_dir_all(&dir).map_err(|source| KittiError::Io { path: dir, source })?;
    }
    kitti::write_velodyne(&ds.velodyne_path(id), &frame.cloud)?;
    let text: String = frame.labels.iter().map(|l| l.to_line() + "\n").collect();
    let path = ds.label_path(id);
    fs::write(&path, text).map_err(|source| KittiError::Io { path, source })?;
    let path = ds.calib_path(id);
    fs::write(&path, kitti::format_calibration(&frame.calib)).map_err(|source| KittiError::Io { path, source })
}

/// Weights that carry one input channel through center taps down to the
/// head. The first convolution subtracts `threshold` from the height channel,
/// leaky units and max-pools pass the positive part, and the head emits `raw`
/// for `anchor` with objectness logit `raw[T_O] + gain * s`, where `s` is the
/// carried signal: positive exactly where the receptive field holds a point
/// whose normalized height exceeds `threshold`. Other anchors never fire.
pub fn beacon_weights(
    specs: &[LayerSpec],
    input: Shape,
    anchor: usize,
    raw: &[f64; BOX_FEATURES],
    threshold: f32,
    gain: f32,
) -> Result<Weights, NetworkError> {
    let shapes = infer_shapes(specs, input)?;
    let mut signal = Vec::with_capacity(specs.len());
    let mut convs = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let prev = if i == 0 { 1 } else { signal[i - 1] };
        let channels = if i == 0 { input.channels } else { shapes[i - 1].channels };
        match spec {
            LayerSpec::Conv(c) => {
                let kk = c.kernel * c.kernel;
                let centre = kk / 2;
                let mut kernel_data = vec![0.0; c.filters * channels * kk];
                let mut bias = vec![0.0; c.filters];
                if c.activation == Activation::Linear {
                    if c.filters < (anchor + 1) * BOX_FEATURES {
                        return Err(NetworkError::Weights {
                            layer: i,
                            reason: format!("head has {} filters, anchor {anchor} needs more", c.filters),
                        });
                    }
                    for f in (T_O..c.filters).step_by(BOX_FEATURES) {
                        bias[f] = -30.0;
                    }
                    for (k, &v) in raw.iter().enumerate() {
                        bias[anchor * BOX_FEATURES + k] = v as f32;
                    }
                    let f = anchor * BOX_FEATURES + T_O;
                    kernel_data[(f * channels + prev) * kk + centre] = gain;
                } else {
                    kernel_data[prev * kk + centre] = 1.0;
                    if i == 0 {
                        bias[0] = -threshold;
                    }
                }
                let batch_norm = c.batch_norm.then(|| BatchNorm {
                    gamma: vec![1.0; c.filters],
                    mean: vec![0.0; c.filters],
                    variance: vec![1.0 - 1e-5; c.filters],
                });
                convs.push(Some(ConvWeights {
                    filters: c.filters,
                    channels,
                    kernel: c.kernel,
                    kernel_data,
                    bias,
                    batch_norm,
                }));
                signal.push(0);
            }
            LayerSpec::MaxPool | LayerSpec::Reorg => {
                convs.push(None);
                signal.push(prev);
            }
            LayerSpec::Route(src) => {
                let (last, before) = src.split_last().expect("validated by infer_shapes");
                let offset: usize = before.iter().map(|&s| shapes[s].channels).sum();
                convs.push(None);
                signal.push(offset + signal[*last]);
            }
        }
    }
    Ok(Weights { convs })
}
