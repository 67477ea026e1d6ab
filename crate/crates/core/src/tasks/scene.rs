use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            Shape::Circle => "circles",
            Shape::Square => "squares",
            Shape::Triangle => "triangles",
            Shape::Cross => "crosses",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).unwrap_or(0)
    }

    /// Whether the pixel at unit-square coordinates `(u, v)` lies inside the shape.
    /// `v` grows downwards.
    fn covers(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Square => true,
            Shape::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            Shape::Triangle => (u - 0.5).abs() <= v / 2.0,
            Shape::Cross => (u - 0.5).abs() <= 1.0 / 6.0 || (v - 0.5).abs() <= 1.0 / 6.0,
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).unwrap_or(0)
    }

    /// Red and yellow are warm; green and blue are cool.
    pub fn is_warm(self) -> bool {
        matches!(self, Color::Red | Color::Yellow)
    }

    fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.8, 0.15],
            Color::Blue => [0.15, 0.2, 0.9],
            Color::Yellow => [0.9, 0.85, 0.1],
        }
    }
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [SizeClass::Small, SizeClass::Medium, SizeClass::Large];

    /// Side length in pixels for an image of side `image_size`.
    pub fn extent(self, image_size: usize) -> usize {
        let frac = match self {
            SizeClass::Small => 0.2,
            SizeClass::Medium => 0.28,
            SizeClass::Large => 0.36,
        };
        ((image_size as f64 * frac).round() as usize).max(3)
    }
}

macro_rules! named_enum {
    ($t:ty) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $t {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|x| x.name() == s)
                    .ok_or_else(|| config_err(format!("unknown {} `{s}`", stringify!($t).to_lowercase())))
            }
        }
    };
}

named_enum!(Shape);
named_enum!(Color);
named_enum!(SizeClass);

impl SizeClass {
    pub fn name(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Medium => "medium",
            SizeClass::Large => "large",
        }
    }
}

/// Pixel rectangle `[x_min, x_max) × [y_min, y_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.x_max.saturating_sub(self.x_min)
    }

    pub fn height(&self) -> usize {
        self.y_max.saturating_sub(self.y_min)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    /// Twice the horizontal centre, kept integral.
    pub fn center_x2(&self) -> usize {
        self.x_min + self.x_max
    }

    /// Whether the boxes share a pixel or touch edges.
    pub fn touches(&self, other: &BBox) -> bool {
        self.x_min <= other.x_max && other.x_min <= self.x_max && self.y_min <= other.y_max && other.y_min <= self.y_max
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub size: SizeClass,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    /// Generation index, unique across the splits of one dataset.
    pub id: usize,
    pub image_size: usize,
    pub objects: Vec<SceneObject>,
}

/// Background level and noise amplitudes used by [`render`].
const BACKGROUND: f64 = 0.15;
const PIXEL_JITTER: f64 = 0.04;

impl Scene {
    /// Place up to `count` objects with the given size classes without touching each other.
    /// Objects that cannot be placed after a bounded number of attempts are dropped.
    pub fn place<R: Rng + ?Sized>(
        id: usize,
        image_size: usize,
        specs: &[(Shape, Color, SizeClass)],
        rng: &mut R,
    ) -> Self {
        let mut objects: Vec<SceneObject> = Vec::new();
        for &(shape, color, size) in specs {
            let e = size.extent(image_size);
            if e > image_size {
                continue;
            }
            for _ in 0..200 {
                let x = rng.gen_range(0..=image_size - e);
                let y = rng.gen_range(0..=image_size - e);
                let bbox = BBox { x_min: x, y_min: y, x_max: x + e, y_max: y + e };
                if objects.iter().all(|o| !o.bbox.touches(&bbox)) {
                    objects.push(SceneObject { shape, color, size, bbox });
                    break;
                }
            }
        }
        Self { id, image_size, objects }
    }

    /// Uniformly random attributes for `1..=max_objects` objects.
    pub fn random<R: Rng + ?Sized>(id: usize, image_size: usize, max_objects: usize, rng: &mut R) -> Self {
        let n = rng.gen_range(1..=max_objects.max(1));
        let specs: Vec<_> = (0..n)
            .map(|_| {
                (
                    *Shape::ALL.choose(rng).unwrap_or(&Shape::Circle),
                    *Color::ALL.choose(rng).unwrap_or(&Color::Red),
                    *SizeClass::ALL.choose(rng).unwrap_or(&SizeClass::Small),
                )
            })
            .collect();
        Self::place(id, image_size, &specs, rng)
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() || self.objects.len() > 4 {
            return Err(Error::Validation(format!("scene {} has {} objects", self.id, self.objects.len())));
        }
        for (i, o) in self.objects.iter().enumerate() {
            let b = o.bbox;
            if b.x_max > self.image_size || b.y_max > self.image_size || b.area() == 0 {
                return Err(Error::Validation(format!("scene {} object {i} has bbox {b:?}", self.id)));
            }
            for p in &self.objects[..i] {
                if p.bbox == b {
                    return Err(Error::Validation(format!("scene {} objects overlap completely", self.id)));
                }
            }
        }
        Ok(())
    }
}

/// Rasterize a scene into a `[3, S, S]` image with values in `[0, 1]`.
pub fn render<R: Rng + ?Sized>(scene: &Scene, rng: &mut R) -> Tensor<f64> {
    let s = scene.image_size;
    let mut data = vec![0.0; 3 * s * s];
    for v in data.iter_mut() {
        *v = BACKGROUND;
    }
    for o in &scene.objects {
        let gain: f64 = rng.gen_range(0.85..=1.0);
        let rgb = o.color.rgb();
        let b = o.bbox;
        let (w, h) = (b.width() as f64, b.height() as f64);
        for y in b.y_min..b.y_max {
            for x in b.x_min..b.x_max {
                let u = (x - b.x_min) as f64 / w + 0.5 / w;
                let v = (y - b.y_min) as f64 / h + 0.5 / h;
                if o.shape.covers(u, v) {
                    for (c, &level) in rgb.iter().enumerate() {
                        data[(c * s + y) * s + x] = level * gain;
                    }
                }
            }
        }
    }
    for v in data.iter_mut() {
        *v = (*v + rng.gen_range(-PIXEL_JITTER..=PIXEL_JITTER)).clamp(0.0, 1.0);
    }
    Tensor::from_fn(&[3, s, s], |i| data[i])
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn names_round_trip() {
        for s in Shape::ALL {
            assert_eq!(s.name().parse::<Shape>().unwrap(), s);
        }
        for c in Color::ALL {
            assert_eq!(c.to_string().parse::<Color>().unwrap(), c);
        }
        assert!("octagon".parse::<Shape>().is_err());
    }

    #[test]
    fn placed_objects_stay_in_bounds_and_apart() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for id in 0..200 {
            let scene = Scene::random(id, 32, 4, &mut rng);
            scene.validate().unwrap();
            for (i, a) in scene.objects.iter().enumerate() {
                for b in &scene.objects[..i] {
                    assert!(!a.bbox.touches(&b.bbox));
                }
            }
        }
    }

    #[test]
    fn rendering_paints_object_colour() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scene = Scene::place(0, 32, &[(Shape::Square, Color::Blue, SizeClass::Large)], &mut rng);
        let img = render(&scene, &mut rng);
        let b = scene.objects[0].bbox;
        let (cx, cy) = ((b.x_min + b.x_max) / 2, (b.y_min + b.y_max) / 2);
        let px = |c: usize| img.data()[(c * 32 + cy) * 32 + cx];
        assert!(px(2) > 0.6 && px(0) < 0.3);
        assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
