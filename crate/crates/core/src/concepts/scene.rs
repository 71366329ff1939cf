use serde::{Deserialize, Serialize};

use super::mask::ColorRange;
use crate::error::{Error, Result};
use crate::numerics::{PrngStream, Tensor};

pub const CANVAS: usize = 64;

/// Every word the scene fixtures and default prompts use.
pub const SYNTH_VOCABULARY: &[&str] = &[
    "a", "photo", "of", "the", "wearing", "and", "with", "on", "dog", "cat", "hat", "sunglasses",
    "scarf", "ball", "subject", "circle", "square", "triangle", "bar", "red", "green", "blue",
    "yellow", "cyan", "magenta", "black",
];

/// The eight corners of the RGB cube. White is the background.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Black,
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    White,
}

impl Color {
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Black => [0.0, 0.0, 0.0],
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Cyan => [0.0, 1.0, 1.0],
            Color::Magenta => [1.0, 0.0, 1.0],
            Color::White => [1.0, 1.0, 1.0],
        }
    }

    pub fn range(self) -> ColorRange {
        ColorRange::around(self.rgb(), 0.25)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    /// Apex up.
    Triangle,
    /// Three times wider than tall.
    Bar,
}

impl ShapeKind {
    fn covers(self, dx: f32, dy: f32, size: f32) -> bool {
        let r = size / 2.0;
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
            ShapeKind::Bar => dx.abs() <= r && dy.abs() <= size / 6.0,
        }
    }

    /// A point on the shape's boundary, relative to its center.
    fn anchor_offset(self, anchor: Anchor, size: f32) -> (f32, f32) {
        let r = size / 2.0;
        let (half_w, top, bottom) = match self {
            ShapeKind::Circle | ShapeKind::Square => (r, -r, r),
            ShapeKind::Triangle => (r / 2.0, -r, r),
            ShapeKind::Bar => (r, -size / 6.0, size / 6.0),
        };
        match anchor {
            Anchor::Top => (0.0, top),
            Anchor::Bottom => (0.0, bottom),
            Anchor::Left => (-half_w, 0.0),
            Anchor::Right => (half_w, 0.0),
            Anchor::Center => (0.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Anchor {
    Top,
    Bottom,
    Left,
    Right,
    Center,
}

impl Anchor {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "top" => Anchor::Top,
            "bottom" => Anchor::Bottom,
            "left" => Anchor::Left,
            "right" => Anchor::Right,
            "center" => Anchor::Center,
            other => {
                return Err(Error::Spec(format!(
                    "unknown anchor {other:?}; expected top, bottom, left, right or center"
                )))
            }
        })
    }

    fn outward(self) -> (f32, f32) {
        match self {
            Anchor::Top => (0.0, -1.0),
            Anchor::Bottom => (0.0, 1.0),
            Anchor::Left => (-1.0, 0.0),
            Anchor::Right => (1.0, 0.0),
            Anchor::Center => (0.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub color: Color,
    /// Pixel coordinates `[x, y]`.
    pub center: [f32; 2],
    pub size: f32,
    #[serde(default = "default_subject_name")]
    pub name: String,
}

fn default_subject_name() -> String {
    "subject".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccessorySpec {
    pub kind: ShapeKind,
    pub color: Color,
    pub anchor: String,
    pub size: f32,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub subject: ShapeSpec,
    #[serde(default)]
    pub accessories: Vec<AccessorySpec>,
    /// Maximum whole-pixel displacement of the subject drawn from the stream.
    #[serde(default)]
    pub jitter: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Tensor,
    /// Visible-pixel masks, subject first, then accessories in spec order.
    pub masks: Vec<(String, Tensor)>,
}

impl Scene {
    pub fn mask(&self, name: &str) -> Option<&Tensor> {
        self.masks.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }
}

/// Rasterizes the subject, then each accessory on top, onto a white 64×64
/// canvas. Accessories are centred a quarter of their size outward from
/// their anchor on the subject, so each one overlaps the subject.
pub fn synth_scene(spec: &SceneSpec, stream: PrngStream) -> Result<Scene> {
    let s = &spec.subject;
    let mut colors = vec![s.color];
    for a in &spec.accessories {
        if colors.contains(&a.color) {
            return Err(Error::Spec(format!("color {:?} used twice", a.color)));
        }
        colors.push(a.color);
    }
    if colors.contains(&Color::White) {
        return Err(Error::Spec("white is reserved for the background".into()));
    }
    let sizes = std::iter::once(s.size).chain(spec.accessories.iter().map(|a| a.size));
    if sizes.clone().any(|v| !(v > 0.0 && v <= CANVAS as f32)) {
        return Err(Error::Spec(format!("shape sizes must be in (0, {CANVAS}]")));
    }
    let (mut cx, mut cy) = (s.center[0], s.center[1]);
    if spec.jitter > 0 {
        let (u, _) = stream.uniform(2);
        let span = 2 * spec.jitter + 1;
        cx += ((u[0] * span as f32) as u32).min(span - 1) as f32 - spec.jitter as f32;
        cy += ((u[1] * span as f32) as u32).min(span - 1) as f32 - spec.jitter as f32;
    }
    if !(0.0..CANVAS as f32).contains(&cx) || !(0.0..CANVAS as f32).contains(&cy) {
        return Err(Error::Spec(format!("subject center ({cx}, {cy}) is off the canvas")));
    }

    let mut shapes = vec![(s.name.clone(), s.kind, s.color, cx, cy, s.size)];
    for a in &spec.accessories {
        let anchor = Anchor::parse(&a.anchor)?;
        let (ox, oy) = s.kind.anchor_offset(anchor, s.size);
        let (ux, uy) = anchor.outward();
        let q = a.size / 4.0;
        shapes.push((a.name.clone(), a.kind, a.color, cx + ox + ux * q, cy + oy + uy * q, a.size));
    }

    let n = CANVAS * CANVAS;
    let mut owner = vec![usize::MAX; n];
    for (idx, &(_, kind, _, sx, sy, size)) in shapes.iter().enumerate() {
        for y in 0..CANVAS {
            for x in 0..CANVAS {
                if kind.covers(x as f32 + 0.5 - sx, y as f32 + 0.5 - sy, size) {
                    owner[y * CANVAS + x] = idx;
                }
            }
        }
    }
    let mut image = Tensor::ones(&[3, CANVAS, CANVAS]);
    let mut masks: Vec<(String, Tensor)> = shapes
        .iter()
        .map(|(name, ..)| (name.clone(), Tensor::zeros(&[CANVAS, CANVAS])))
        .collect();
    for (i, &o) in owner.iter().enumerate() {
        if o == usize::MAX {
            continue;
        }
        let rgb = shapes[o].2.rgb();
        for (k, c) in rgb.iter().enumerate() {
            image.data_mut()[k * n + i] = *c;
        }
        masks[o].1.data_mut()[i] = 1.0;
    }
    Ok(Scene { image, masks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concepts::threshold_segment;
    use crate::io::encode_rgb_png;

    fn dog_with(accessories: Vec<AccessorySpec>) -> SceneSpec {
        SceneSpec {
            subject: ShapeSpec {
                kind: ShapeKind::Circle,
                color: Color::Blue,
                center: [32.0, 36.0],
                size: 28.0,
                name: "dog".into(),
            },
            accessories,
            jitter: 0,
        }
    }

    fn acc(kind: ShapeKind, color: Color, anchor: &str, size: f32, name: &str) -> AccessorySpec {
        AccessorySpec {
            kind,
            color,
            anchor: anchor.into(),
            size,
            name: name.into(),
        }
    }

    fn bbox(m: &Tensor) -> (usize, usize, usize, usize) {
        let mut b = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..CANVAS {
            for x in 0..CANVAS {
                if m.data()[y * CANVAS + x] == 1.0 {
                    b = (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y));
                }
            }
        }
        b
    }

    #[test]
    fn hat_crosses_subject_top_edge() {
        let spec = dog_with(vec![acc(ShapeKind::Triangle, Color::Red, "top", 16.0, "hat")]);
        let scene = synth_scene(&spec, PrngStream::new(0, 0)).unwrap();
        let (_, top, _, _) = bbox(scene.mask("dog").unwrap());
        let (_, hy0, _, hy1) = bbox(scene.mask("hat").unwrap());
        // subject's own top edge before occlusion is y = 22
        assert!(hy0 < 22 && hy1 >= 22, "hat rows {hy0}..={hy1}, dog top {top}");
    }

    #[test]
    fn deterministic_png_bytes() {
        let spec = SceneSpec {
            jitter: 3,
            ..dog_with(vec![acc(ShapeKind::Bar, Color::Black, "center", 18.0, "sunglasses")])
        };
        let a = synth_scene(&spec, PrngStream::new(11, 2)).unwrap();
        let b = synth_scene(&spec, PrngStream::new(11, 2)).unwrap();
        assert_eq!(encode_rgb_png(&a.image).unwrap(), encode_rgb_png(&b.image).unwrap());
    }

    #[test]
    fn masks_are_disjoint_and_segmentation_recovers_them() {
        let spec = dog_with(vec![
            acc(ShapeKind::Triangle, Color::Red, "top", 16.0, "hat"),
            acc(ShapeKind::Bar, Color::Black, "center", 16.0, "sunglasses"),
            acc(ShapeKind::Square, Color::Green, "bottom", 10.0, "scarf"),
        ]);
        let scene = synth_scene(&spec, PrngStream::new(0, 0)).unwrap();
        // pixel-set oracle: every covered pixel belongs to exactly one mask
        for i in 0..CANVAS * CANVAS {
            let owners = scene.masks.iter().filter(|(_, m)| m.data()[i] == 1.0).count();
            let background = (0..3).all(|k| scene.image.data()[k * CANVAS * CANVAS + i] == 1.0);
            assert_eq!(owners, usize::from(!background));
        }
        let colors = [Color::Blue, Color::Red, Color::Black, Color::Green];
        let ranges: Vec<_> = colors.iter().map(|c| c.range()).collect();
        let seg = threshold_segment(&scene.image, &ranges).unwrap();
        for ((_, truth), got) in scene.masks.iter().zip(&seg) {
            assert_eq!(truth, got);
        }
    }

    #[test]
    fn spec_errors() {
        let bad = dog_with(vec![acc(ShapeKind::Square, Color::Red, "above", 8.0, "hat")]);
        assert!(matches!(synth_scene(&bad, PrngStream::new(0, 0)), Err(Error::Spec(_))));
        let dup = dog_with(vec![acc(ShapeKind::Square, Color::Blue, "top", 8.0, "hat")]);
        assert!(synth_scene(&dup, PrngStream::new(0, 0)).is_err());
        let white = dog_with(vec![acc(ShapeKind::Square, Color::White, "top", 8.0, "hat")]);
        assert!(synth_scene(&white, PrngStream::new(0, 0)).is_err());
    }

    #[test]
    fn parses_scene_json() {
        let json = r#"{"subject":{"kind":"circle","color":"blue","center":[32,36],"size":28},
            "accessories":[{"kind":"triangle","color":"red","anchor":"top","size":16,"name":"hat"}]}"#;
        let spec: SceneSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.subject.name, "subject");
        assert_eq!(spec.accessories[0].name, "hat");
    }
}
