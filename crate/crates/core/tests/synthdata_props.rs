//! Scene generator invariants and PGM / annotation round trips.

mod common;

use proptest::prelude::*;

use common::*;
use fusiondet::cfdp::{BBox, BoxSet};
use fusiondet::metrics::iou;
use fusiondet::numerics::Tensor;
use fusiondet::rng;
use fusiondet::synthdata::{
    decode_pgm, encode_pgm, generate_dataset, generate_scene, generate_split, read_annotations, read_image, read_split,
    scene_paths, write_annotations, write_image, Annotation, Scene, ScenePair, SceneSpec, EVAL_SPLIT, TRAIN_SPLIT,
};

fn spec_strategy() -> impl Strategy<Value = SceneSpec> {
    (any::<u64>(), 32usize..80, 32usize..80, 0usize..3, 0usize..2, 0.08f64..0.2, 0.0f64..0.1, 0.0f64..0.5, 0.2f64..1.0)
        .prop_map(|(seed, width, height, min_objects, extra, min_size, grow, texture_amplitude, hotspot_contrast)| {
            SceneSpec {
                seed,
                width,
                height,
                min_objects,
                max_objects: min_objects + extra,
                min_size,
                max_size: min_size + grow,
                texture_amplitude,
                hotspot_contrast,
            }
        })
}

/// Mean infrared level of pixels whose centre lies inside / outside every box.
fn inside_outside_means(scene: &ScenePair) -> (f64, f64) {
    let (h, w) = (scene.spec.height, scene.spec.width);
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..h {
        for j in 0..w {
            let (px, py) = ((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64);
            let inside = scene.boxes.iter().any(|b| {
                let (x0, y0, x1, y1) = b.corners();
                px >= x0 && px <= x1 && py >= y0 && py <= y1
            });
            let v = scene.infrared.at(&[i, j]);
            if inside {
                si += v;
                ni += 1;
            } else {
                so += v;
                no += 1;
            }
        }
    }
    (si / ni.max(1) as f64, so / no.max(1) as f64)
}

fn in_unit(v: f64) -> bool {
    (0.0..=1.0).contains(&v)
}

proptest! {
    #![proptest_config(pt_config(100))]

    #[test]
    fn scenes_respect_their_spec(spec in spec_strategy()) {
        let scene = generate_scene(&spec).unwrap();
        prop_assert_eq!(&scene, &generate_scene(&spec).unwrap());
        prop_assert_eq!(scene.visible.shape(), &[spec.height, spec.width]);
        prop_assert_eq!(scene.infrared.shape(), &[spec.height, spec.width]);
        prop_assert!(scene.visible.data().iter().chain(scene.infrared.data()).all(|&v| in_unit(v)));

        let n = scene.boxes.len();
        prop_assert!(n >= spec.min_objects && n <= spec.max_objects);
        for (k, b) in scene.boxes.iter().enumerate() {
            let (x0, y0, x1, y1) = b.corners();
            prop_assert!(x0 >= -1e-12 && y0 >= -1e-12 && x1 <= 1.0 + 1e-12 && y1 <= 1.0 + 1e-12);
            prop_assert!(b.w >= spec.min_size && b.w <= spec.max_size);
            prop_assert!(b.h >= spec.min_size && b.h <= spec.max_size);
            for o in &scene.boxes.boxes()[..k] {
                prop_assert!(iou(o, b) <= 0.05);
            }
        }
        if n > 0 {
            let (inside, outside) = inside_outside_means(&scene);
            prop_assert!(inside > outside, "inside {inside} vs outside {outside}");
        }
    }

    #[test]
    fn different_seeds_give_different_scenes(seed in any::<u64>()) {
        let a = generate_scene(&SceneSpec { seed, ..Default::default() }).unwrap();
        let b = generate_scene(&SceneSpec { seed: seed.wrapping_add(1), ..Default::default() }).unwrap();
        prop_assert_ne!(a.visible, b.visible);
    }

    #[test]
    fn pgm_round_trips_within_one_level(seed in any::<u64>(), h in 1usize..40, w in 1usize..40) {
        let img = uniform(&mut rng::stream(seed), &[h, w], 0.0, 1.0);
        let bytes = encode_pgm(&img).unwrap();
        let back = decode_pgm(&bytes).unwrap();
        prop_assert_eq!(back.shape(), img.shape());
        prop_assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-12);
        prop_assert_eq!(encode_pgm(&back).unwrap(), bytes);
    }

    #[test]
    fn pgm_bytes_round_trip_exactly(h in 1usize..16, w in 1usize..16, payload in prop::collection::vec(any::<u8>(), 256)) {
        let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
        bytes.extend(payload.iter().cycle().take(h * w));
        prop_assert_eq!(encode_pgm(&decode_pgm(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn truncated_pgm_reports_an_offset(h in 1usize..16, w in 1usize..16, cut in 1usize..16) {
        let bytes = encode_pgm(&Tensor::full(&[h, w], 0.5)).unwrap();
        let cut = cut.min(h * w);
        let (offset, msg) = decode_pgm(&bytes[..bytes.len() - cut]).unwrap_err();
        prop_assert_eq!(offset, bytes.len() - cut);
        prop_assert!(msg.contains("truncated"));
    }

    #[test]
    fn annotations_round_trip_exactly(seed in any::<u64>(), n in 0usize..6, with_scores in any::<bool>()) {
        let mut r = rng::stream(seed);
        let boxes: Vec<BBox> = (0..n)
            .map(|_| {
                let v = uniform(&mut r, &[4], 1e-6, 1.0);
                BBox::new(v.data()[0], v.data()[1], v.data()[2], v.data()[3])
            })
            .collect();
        let mut ann = Annotation::new("scene-x", &BoxSet::new(boxes));
        if with_scores {
            ann.scores = Some(uniform(&mut r, &[n], 0.0, 1.0).into_data());
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        write_annotations(&path, &ann).unwrap();
        let back = read_annotations(&path).unwrap();
        prop_assert_eq!(&back, &ann);
        let first = std::fs::read(&path).unwrap();
        write_annotations(&path, &back).unwrap();
        prop_assert_eq!(std::fs::read(&path).unwrap(), first);
    }
}

#[test]
fn hotspots_are_brighter_on_one_hundred_seeds() {
    for seed in 0..100 {
        let scene = generate_scene(&SceneSpec { seed, ..Default::default() }).unwrap();
        let (inside, outside) = inside_outside_means(&scene);
        assert!(inside > outside, "seed {seed}: inside {inside} vs outside {outside}");
    }
}

#[test]
fn zero_objects_give_empty_boxes() {
    let spec = SceneSpec { min_objects: 0, max_objects: 0, ..Default::default() };
    for seed in 0..10 {
        assert!(generate_scene(&spec.with_seed(seed)).unwrap().boxes.is_empty());
    }
}

#[test]
fn header_comments_are_skipped_and_bad_headers_located() {
    let img = decode_pgm(b"P5\n# made by hand\n2 1\n# max\n255\n\x00\xff").unwrap();
    assert_eq!(img.data(), &[0.0, 1.0]);
    assert_eq!(decode_pgm(b"P2\n1 1\n255\n0").unwrap_err().0, 0);
    let (offset, _) = decode_pgm(b"P5\n1 1\n255\n\x00\x00").unwrap_err();
    assert_eq!(offset, 12);
    let (offset, _) = decode_pgm(b"P5\nx 1\n255\n\x00").unwrap_err();
    assert_eq!(offset, 3);
}

#[test]
fn images_and_datasets_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec::default();
    let img = generate_scene(&spec).unwrap().visible;
    let path = dir.path().join("nested/img.pgm");
    write_image(&path, &img).unwrap();
    assert!(read_image(&path).unwrap().max_abs_diff(&img) <= 0.5 / 255.0 + 1e-12);

    generate_dataset(dir.path(), &spec, 9, 3, 2).unwrap();
    for (split, n) in [(TRAIN_SPLIT, 3), (EVAL_SPLIT, 2)] {
        let read = read_split(dir.path(), split).unwrap();
        let made: Vec<Scene> = generate_split(&spec, 9, split, n).unwrap().into_iter().map(Scene::from).collect();
        assert_eq!(read.len(), n);
        for (a, b) in read.iter().zip(&made) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.boxes, b.boxes);
            assert!(a.visible.max_abs_diff(&b.visible) <= 0.5 / 255.0 + 1e-12);
            assert!(a.infrared.max_abs_diff(&b.infrared) <= 0.5 / 255.0 + 1e-12);
            assert!(scene_paths(dir.path(), split, &a.id).visible.exists());
        }
    }
    // splits draw from disjoint seed streams
    let train = generate_split(&spec, 9, TRAIN_SPLIT, 1).unwrap();
    let eval = generate_split(&spec, 9, EVAL_SPLIT, 1).unwrap();
    assert_ne!(train[0].visible, eval[0].visible);
}
