use freecustom::concepts::{
    binarize_mask, build_mask_pyramid, copy_paste_context, synth_scene, threshold_segment, AccessorySpec, Color,
    SceneSpec, ShapeKind, ShapeSpec, CANVAS,
};
use freecustom::numerics::{gaussian_sample, nn_resize, PrngStream, Tensor};
use proptest::prelude::*;

const COLORS: [Color; 7] = [
    Color::Black,
    Color::Red,
    Color::Green,
    Color::Blue,
    Color::Yellow,
    Color::Magenta,
    Color::Cyan,
];
const KINDS: [ShapeKind; 4] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Bar];
const ANCHORS: [&str; 5] = ["top", "bottom", "left", "right", "center"];

fn random_mask(h: usize, w: usize, seed: u64, density: f32) -> Tensor {
    let (u, _) = PrngStream::new(seed, 1).uniform(h * w);
    Tensor::new(vec![h, w], u.iter().map(|&x| (x < density) as u8 as f32).collect()).unwrap()
}

prop_compose! {
    fn scene_spec()(
        kind in 0usize..4, color in 0usize..7, cx in 24.0f32..40.0, cy in 24.0f32..40.0, size in 16.0f32..30.0,
        acc in proptest::collection::vec((0usize..4, 1usize..7, 0usize..5, 6.0f32..16.0), 0..3),
        jitter in 0u32..3,
    ) -> SceneSpec {
        let subject_color = COLORS[color];
        let mut used = vec![subject_color];
        let accessories = acc
            .into_iter()
            .enumerate()
            .filter_map(|(i, (k, c, a, s))| {
                let c = COLORS[(color + c) % 7];
                if used.contains(&c) {
                    return None;
                }
                used.push(c);
                Some(AccessorySpec {
                    kind: KINDS[k],
                    color: c,
                    anchor: ANCHORS[a].into(),
                    size: s,
                    name: format!("acc{i}"),
                })
            })
            .collect();
        SceneSpec {
            subject: ShapeSpec { kind: KINDS[kind], color: subject_color, center: [cx, cy], size, name: "subject".into() },
            accessories,
            jitter,
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pyramid_levels_are_resizes_of_the_base(h in 1usize..65, seed in any::<u64>(), res in proptest::collection::vec(1usize..33, 1..4)) {
        let base = random_mask(h, h, seed, 0.4);
        let p = build_mask_pyramid(&base, &res).unwrap();
        for &r in &res {
            prop_assert_eq!(p.level(r).unwrap(), &nn_resize(&base, r, r).unwrap());
        }
    }

    #[test]
    fn copy_paste_only_touches_the_shifted_mask(seed in any::<u64>(), dx in -8i64..9, dy in -8i64..9) {
        let (h, w) = (24, 24);
        let base = gaussian_sample(&[3, h, w], PrngStream::new(seed, 2)).0;
        let concept = gaussian_sample(&[3, h, w], PrngStream::new(seed, 3)).0;
        // concept pixels stay in the central 8..16 box so any offset fits
        let mut cmask = random_mask(h, w, seed, 0.5);
        for y in 0..h {
            for x in 0..w {
                if !(8..16).contains(&y) || !(8..16).contains(&x) {
                    cmask.data_mut()[y * w + x] = 0.0;
                }
            }
        }
        let bmask = random_mask(h, w, seed ^ 5, 0.5);
        let (out, shifted) = copy_paste_context(&base, &bmask, &concept, &cmask, (dx, dy)).unwrap();
        prop_assert_eq!(shifted.data().iter().sum::<f32>(), cmask.data().iter().sum::<f32>());
        for y in 0..h {
            for x in 0..w {
                for k in 0..3 {
                    let i = k * h * w + y * w + x;
                    if shifted.data()[y * w + x] == 0.0 {
                        prop_assert_eq!(out.data()[i], base.data()[i]);
                    } else {
                        let (sy, sx) = ((y as i64 - dy) as usize, (x as i64 - dx) as usize);
                        prop_assert_eq!(out.data()[i], concept.data()[k * h * w + sy * w + sx]);
                    }
                }
            }
        }
    }

    #[test]
    fn segmenting_a_synthetic_scene_recovers_its_masks(spec in scene_spec(), seed in any::<u64>()) {
        let scene = synth_scene(&spec, PrngStream::new(seed, 0)).unwrap();
        prop_assert_eq!(scene.image.dims(), &[3, CANVAS, CANVAS]);
        let colors: Vec<Color> = std::iter::once(spec.subject.color)
            .chain(spec.accessories.iter().map(|a| a.color))
            .collect();
        let ranges: Vec<_> = colors.iter().map(|c| c.range()).collect();
        let segs = threshold_segment(&scene.image, &ranges).unwrap();
        for ((name, mask), seg) in scene.masks.iter().zip(&segs) {
            prop_assert_eq!(mask, seg, "mask {} differs from its segmentation", name);
        }
        // masks are disjoint
        let mut cover = vec![0.0f32; CANVAS * CANVAS];
        for (_, m) in &scene.masks {
            for (c, v) in cover.iter_mut().zip(m.data()) {
                *c += v;
            }
        }
        prop_assert!(cover.iter().all(|&c| c <= 1.0));
    }

    #[test]
    fn binarize_is_idempotent(h in 1usize..20, seed in any::<u64>(), thr in 0.0f32..1.0) {
        let g = gaussian_sample(&[h, h], PrngStream::new(seed, 0)).0.map(|v| v.abs().min(1.0));
        let once = binarize_mask(&g, thr);
        prop_assert_eq!(binarize_mask(&once, 0.5), once.clone());
        prop_assert!(once.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

#[test]
fn same_seed_same_scene() {
    let spec = SceneSpec {
        subject: ShapeSpec {
            kind: ShapeKind::Circle,
            color: Color::Blue,
            center: [32.0, 32.0],
            size: 24.0,
            name: "subject".into(),
        },
        accessories: vec![],
        jitter: 2,
    };
    let a = synth_scene(&spec, PrngStream::new(3, 0)).unwrap();
    let b = synth_scene(&spec, PrngStream::new(3, 0)).unwrap();
    assert_eq!(a.image, b.image);
    assert_eq!(a.masks, b.masks);
}
