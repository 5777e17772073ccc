//! Synthetic KITTI trees shared by the integration tests.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stereo3d_core::geometry::{project_box, Box2D, Box3D};
use stereo3d_core::kitti_io::{parse_calib_file, serialize_labels, ObjectLabel};

pub const IMAGE_W: u32 = 320;
pub const IMAGE_H: u32 = 96;
pub const FOCAL: f64 = 200.0;
pub const BASELINE: f64 = 0.54;
/// Horizontal shift between the left and right fixture images.
pub const SHIFT: u32 = 5;

pub fn calib_text() -> String {
    let (cx, cy) = (IMAGE_W as f64 / 2.0, IMAGE_H as f64 / 2.0);
    let row = |tx: f64| format!("{FOCAL} 0 {cx} {tx} 0 {FOCAL} {cy} 0 0 0 1 0");
    format!(
        "P0: {}\nP1: {}\nP2: {}\nP3: {}\nR0_rect: 1 0 0 0 1 0 0 0 1\n",
        row(0.0),
        row(-FOCAL * BASELINE),
        row(0.0),
        row(-FOCAL * BASELINE)
    )
}

/// Car whose 2D box is the projection of its 3D box.
pub fn projected_car(x: f64, z: f64, yaw: f64) -> ObjectLabel {
    let calib = parse_calib_file(&calib_text()).unwrap();
    let dims = [1.5, 1.6, 3.9];
    let loc = [x, 1.65, z];
    let mut label = ObjectLabel::car(Box2D::new(0.0, 0.0, 1.0, 1.0), dims, loc, yaw);
    let b = project_box(&calib, &Box3D::from_label(&label)).unwrap();
    let r2 = |v: f64| (v * 100.0).round() / 100.0;
    label.box2d = Box2D::new(r2(b.x1), r2(b.y1), r2(b.x2), r2(b.y2));
    label
}

/// Random texture; the right view is the left shifted by [`SHIFT`] pixels.
pub fn stereo_pair(seed: u64) -> (RgbImage, RgbImage) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let left = RgbImage::from_fn(IMAGE_W, IMAGE_H, |_, _| {
        let g: u8 = rng.gen();
        Rgb([g, g.wrapping_add(40), g.wrapping_mul(3)])
    });
    let right = RgbImage::from_fn(IMAGE_W, IMAGE_H, |x, y| *left.get_pixel((x + SHIFT).min(IMAGE_W - 1), y));
    (left, right)
}

fn write(path: &Path, text: &str) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(path, text).unwrap();
}

pub fn frame_id(i: usize) -> String {
    format!("{i:06}")
}

/// `n` frames with two or three cars each, the nearer one partly covering
/// the farther.
pub fn write_kitti_tree(root: &Path, n: usize) -> Vec<String> {
    let mut ids = Vec::new();
    for i in 0..n {
        let id = frame_id(i);
        let (left, right) = stereo_pair(i as u64);
        for (dir, img) in [("image_2", &left), ("image_3", &right)] {
            let path = root.join(dir).join(format!("{id}.png"));
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            img.save(&path).unwrap();
        }
        let mut labels = vec![projected_car(-1.0, 14.0 + i as f64, 0.3), projected_car(0.5, 8.0, -0.2)];
        if i % 2 == 1 {
            labels.push(projected_car(4.0, 20.0, 1.2));
        }
        write(&root.join("label_2").join(format!("{id}.txt")), &serialize_labels(&labels));
        write(&root.join("calib").join(format!("{id}.txt")), &calib_text());
        ids.push(id);
    }
    ids
}

pub fn write_split(path: &Path, ids: &[&str]) {
    let mut text = ids.join("\n");
    text.push('\n');
    write(path, &text);
}

/// Car with an arbitrary but consistent 2D and 3D box.
fn car(x1: f64, x: f64, z: f64) -> ObjectLabel {
    ObjectLabel::car(Box2D::new(x1, 100.0, x1 + 60.0, 160.0), [1.5, 1.6, 3.9], [x, 1.65, z], 0.0)
}

fn with_score(mut l: ObjectLabel, score: f64) -> ObjectLabel {
    l.score = Some(score);
    l
}

fn relabel(mut l: ObjectLabel, class: &str) -> ObjectLabel {
    l.class_name = class.into();
    l
}

/// Five frames of ground truth and scored predictions.
///
/// Car, Easy and Moderate (6 objects): scores .9 T, .8 F, .7 T, .6 T, .5 F,
/// .4 F, .3 F, .2 T, .15 F. Precision envelope: 1 for k = 1..6, 3/4 for
/// k = 7..20, 1/2 for k = 21..26, 0 above, so AP = 100 * 19.5 / 40 = 48.75.
///
/// Car, Hard adds one heavily occluded object hit at .1 (7 objects, 5 hits):
/// 1 for k = 1..5, 3/4 for k = 6..17, 1/2 for k = 18..28, giving
/// 100 * (5 + 9 + 5.5) / 40 = 48.75.
///
/// A detection in a DontCare region and one on a Van are neutral. The only
/// pedestrian is never detected, so its AP is 0; Cyclist has no ground truth.
pub fn planted_eval_fixture() -> Vec<(String, Vec<ObjectLabel>, Option<Vec<ObjectLabel>>)> {
    let (a, b) = (car(10.0, -8.0, 20.0), car(200.0, 0.0, 20.0));
    let c = car(400.0, 5.0, 30.0);
    let d = car(10.0, -6.0, 25.0);
    let mut g = car(600.0, 10.0, 35.0);
    g.occlusion = 2;
    let (e, f) = (car(10.0, -3.0, 15.0), car(300.0, 3.0, 15.0));
    let far = |x1: f64| car(x1, 30.0, 60.0);
    let van = relabel(car(100.0, -2.0, 40.0), "Van");
    let mut dont_care = relabel(car(700.0, 0.0, 0.0), "DontCare");
    dont_care.box2d = Box2D::new(700.0, 80.0, 900.0, 200.0);
    dont_care.dims_hwl = [-1.0; 3];
    dont_care.location_xyz = [-1000.0, -1000.0, -1000.0];
    let mut ped = relabel(car(800.0, 12.0, 18.0), "Pedestrian");
    ped.dims_hwl = [1.7, 0.6, 0.8];

    let mut in_dont_care = car(720.0, -20.0, 50.0);
    in_dont_care.box2d = Box2D::new(720.0, 100.0, 780.0, 160.0);
    vec![
        (
            frame_id(0),
            vec![a.clone(), b.clone(), dont_care],
            Some(vec![with_score(a, 0.9), with_score(far(900.0), 0.8), with_score(in_dont_care, 0.95)]),
        ),
        (
            frame_id(1),
            vec![c.clone(), ped, g.clone()],
            Some(vec![with_score(c, 0.7), with_score(g, 0.1)]),
        ),
        (frame_id(2), vec![d], None),
        (
            frame_id(3),
            vec![e.clone(), f.clone()],
            Some(vec![with_score(e.clone(), 0.6), with_score(e, 0.5), with_score(f, 0.2)]),
        ),
        (
            frame_id(4),
            vec![van.clone()],
            Some(vec![
                with_score(far(500.0), 0.4),
                with_score(far(650.0), 0.3),
                with_score(relabel(van, "Car"), 0.35),
                with_score(far(950.0), 0.15),
            ]),
        ),
    ]
}

/// Writes the planted fixture as `gt/` and `pred/` directories under `dir`.
/// Frame 2 gets no prediction file at all.
pub fn write_eval_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let (gt_dir, pred_dir) = (dir.join("gt"), dir.join("pred"));
    std::fs::create_dir_all(&pred_dir).unwrap();
    for (id, gt, pred) in planted_eval_fixture() {
        write(&gt_dir.join(format!("{id}.txt")), &serialize_labels(&gt));
        if let Some(pred) = pred {
            write(&pred_dir.join(format!("{id}.txt")), &serialize_labels(&pred));
        }
    }
    (gt_dir, pred_dir)
}

pub fn stereo3d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stereo3d"))
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .expect("running stereo3d")
}

/// Relative path and contents of every file below `dir`, sorted.
pub fn tree_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
