//! Shared fixtures: three synthetic concept scenes, a hat-on-dog copy-paste
//! context, and a seeded network.

#![allow(dead_code)]

use std::sync::OnceLock;

use freecustom::codec::{embed_prompt, Codec, DEFAULT_VOCAB_SEED};
use freecustom::concepts::{
    copy_paste_context, synth_scene, AccessorySpec, Color, ConceptRef, Scene, SceneSpec, ShapeKind, ShapeSpec,
};
use freecustom::denoiser::{init_weights, Denoiser, UNetConfig};
use freecustom::diffusion::ScheduleConfig;
use freecustom::numerics::{PrngStream, Tensor};
use freecustom::pipeline::{Pipeline, RunConfig, RunOptions, DEFAULT_WEIGHT_SEED};

pub const TARGET_PROMPT: &str = "a photo of the dog wearing the hat and sunglasses";

/// Offset that seats the hat of `hat_scene` on the head of `dog_scene`.
pub const HAT_OFFSET: (i64, i64) = (2, -9);

fn shape(kind: ShapeKind, color: Color, center: [f32; 2], size: f32, name: &str) -> ShapeSpec {
    ShapeSpec {
        kind,
        color,
        center,
        size,
        name: name.into(),
    }
}

fn accessory(kind: ShapeKind, color: Color, anchor: &str, size: f32, name: &str) -> AccessorySpec {
    AccessorySpec {
        kind,
        color,
        anchor: anchor.into(),
        size,
        name: name.into(),
    }
}

fn render(subject: ShapeSpec, accessories: Vec<AccessorySpec>) -> Scene {
    let spec = SceneSpec {
        subject,
        accessories,
        jitter: 0,
    };
    synth_scene(&spec, PrngStream::new(0, 0)).unwrap()
}

pub fn dog_scene() -> Scene {
    render(shape(ShapeKind::Circle, Color::Blue, [32.0, 36.0], 30.0, "dog"), vec![])
}

/// A red hat worn by a green square.
pub fn hat_scene() -> Scene {
    render(
        shape(ShapeKind::Square, Color::Green, [30.0, 44.0], 26.0, "wearer"),
        vec![accessory(ShapeKind::Triangle, Color::Red, "top", 28.0, "hat")],
    )
}

/// Black sunglasses worn by a magenta circle.
pub fn glasses_scene() -> Scene {
    render(
        shape(ShapeKind::Circle, Color::Magenta, [34.0, 32.0], 30.0, "wearer"),
        vec![accessory(ShapeKind::Bar, Color::Black, "center", 24.0, "sunglasses")],
    )
}

/// The dog with the hat pasted on its head, and the pasted hat's mask.
pub fn hat_on_dog() -> (Tensor, Tensor) {
    let (dog, hat) = (dog_scene(), hat_scene());
    copy_paste_context(
        &dog.image,
        dog.mask("dog").unwrap(),
        &hat.image,
        hat.mask("hat").unwrap(),
        HAT_OFFSET,
    )
    .unwrap()
}

pub fn concept(scene: &Scene, name: &str, weight: f32, prompt: &str) -> ConceptRef {
    let p = embed_prompt(prompt, DEFAULT_VOCAB_SEED).unwrap();
    ConceptRef::new(name, scene.image.clone(), scene.mask(name).unwrap(), weight, p, &Codec::default()).unwrap()
}

pub fn dog_ref(weight: f32) -> ConceptRef {
    concept(&dog_scene(), "dog", weight, "a photo of the dog")
}

pub fn hat_ref(weight: f32) -> ConceptRef {
    concept(&hat_scene(), "hat", weight, "a red hat")
}

pub fn glasses_ref(weight: f32) -> ConceptRef {
    concept(&glasses_scene(), "sunglasses", weight, "black sunglasses")
}

pub fn three_refs(weight: f32) -> Vec<ConceptRef> {
    vec![dog_ref(weight), hat_ref(weight), glasses_ref(weight)]
}

pub fn denoiser() -> &'static Denoiser {
    static NET: OnceLock<Denoiser> = OnceLock::new();
    NET.get_or_init(|| Denoiser::new(init_weights(DEFAULT_WEIGHT_SEED, &UNetConfig::default()).unwrap()).unwrap())
}

pub fn pipeline(refs: Vec<ConceptRef>, steps: usize, seed: u64) -> Pipeline {
    let mut options = RunOptions::from_config(&RunConfig::new(TARGET_PROMPT));
    options.steps = steps;
    options.seed = seed;
    Pipeline {
        denoiser: denoiser().clone(),
        schedule: ScheduleConfig::default().build().unwrap(),
        codec: Codec::default(),
        refs,
        target_prompt: embed_prompt(TARGET_PROMPT, DEFAULT_VOCAB_SEED).unwrap(),
        options,
    }
}

/// Random `rows×cols` tensor.
pub fn rand(rows: usize, cols: usize, seed: u64, stream: u64) -> Tensor {
    freecustom::numerics::gaussian_sample(&[rows, cols], PrngStream::new(seed, stream)).0
}
