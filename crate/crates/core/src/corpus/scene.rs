use serde::{Deserialize, Serialize};

use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tensor};

pub const GRID: usize = 4;
pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const CELL_PIXELS: usize = IMAGE_SIZE / GRID;
pub const MAX_OBJECTS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    White,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Size {
    Small,
    Large,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];
}

impl Color {
    pub const ALL: [Color; 5] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::White,
    ];

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::White => [1.0, 1.0, 1.0],
        }
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    pub fn flip(self) -> Size {
        match self {
            Size::Small => Size::Large,
            Size::Large => Size::Small,
        }
    }
}

/// Grid cell as `(row, col)` on the 4×4 layout.
pub type Cell = (u8, u8);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub cell: Cell,
}

/// Axis-aligned predicates stored on a scene; `right-of` and `below` are
/// their converses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Predicate {
    LeftOf,
    Above,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialRelation {
    pub subject: usize,
    pub predicate: Predicate,
    pub object: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub objects: Vec<SceneObject>,
    pub relations: Vec<SpatialRelation>,
}

fn derive_relations(objects: &[SceneObject]) -> Vec<SpatialRelation> {
    let mut rels = Vec::new();
    for (i, a) in objects.iter().enumerate() {
        for (j, b) in objects.iter().enumerate() {
            if i == j {
                continue;
            }
            if a.cell.1 < b.cell.1 {
                rels.push(SpatialRelation {
                    subject: i,
                    predicate: Predicate::LeftOf,
                    object: j,
                });
            }
            if a.cell.0 < b.cell.0 {
                rels.push(SpatialRelation {
                    subject: i,
                    predicate: Predicate::Above,
                    object: j,
                });
            }
        }
    }
    rels
}

impl Scene {
    pub fn from_objects(id: u64, objects: Vec<SceneObject>) -> Self {
        let relations = derive_relations(&objects);
        Self {
            id,
            objects,
            relations,
        }
    }

    pub fn holds(&self, subject: usize, predicate: Predicate, object: usize) -> bool {
        self.relations
            .iter()
            .any(|r| r.subject == subject && r.predicate == predicate && r.object == object)
    }

    /// True when no two objects share a shape.
    pub fn has_distinct_shapes(&self) -> bool {
        let mut seen = [false; 4];
        self.objects
            .iter()
            .all(|o| !std::mem::replace(&mut seen[o.shape as usize], true))
    }
}

/// Deterministic scene for a 64-bit seed: 1–3 objects, uniform attributes, and
/// distinct cells drawn by a partial Fisher–Yates shuffle of the 16 cells.
pub fn generate_scene(seed: u64) -> Scene {
    let mut rng = SplitMix64::derive(seed, &[0x5CE4E]);
    let count = 1 + rng.below_usize(MAX_OBJECTS);
    let mut cells: Vec<usize> = (0..GRID * GRID).collect();
    let objects = (0..count)
        .map(|i| {
            let j = i + rng.below_usize(cells.len() - i);
            cells.swap(i, j);
            let c = cells[i];
            SceneObject {
                shape: Shape::ALL[rng.below_usize(4)],
                color: Color::ALL[rng.below_usize(5)],
                size: Size::ALL[rng.below_usize(2)],
                cell: ((c / GRID) as u8, (c % GRID) as u8),
            }
        })
        .collect();
    Scene::from_objects(seed, objects)
}

/// A scene from a world with attribute co-occurrence statistics. With
/// probability `bias` each object takes its shape's typical color, size and
/// grid half (circles red, small, top; squares green, large, bottom;
/// triangles blue, small, left; crosses yellow, large, right); otherwise the
/// attribute is uniform. `bias = 0` gives the same distribution as
/// [`generate_scene`], though not the same scenes.
pub fn generate_biased_scene(seed: u64, bias: f64) -> Scene {
    let mut rng = SplitMix64::derive(seed, &[0xB1A5]);
    let count = 1 + rng.below_usize(MAX_OBJECTS);
    let mut free: Vec<usize> = (0..GRID * GRID).collect();
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let s = rng.below_usize(4);
        let color = if rng.bernoulli(bias) { s } else { rng.below_usize(5) };
        let size = if rng.bernoulli(bias) { [0, 1, 0, 1][s] } else { rng.below_usize(2) };
        let region = |c: usize| {
            let (y, x) = (c / GRID, c % GRID);
            match s {
                0 => y < GRID / 2,
                1 => y >= GRID / 2,
                2 => x < GRID / 2,
                _ => x >= GRID / 2,
            }
        };
        let preferred: Vec<usize> = free.iter().copied().filter(|&c| region(c)).collect();
        let pool = if !preferred.is_empty() && rng.bernoulli(bias) { preferred } else { free.clone() };
        let c = pool[rng.below_usize(pool.len())];
        free.retain(|&x| x != c);
        objects.push(SceneObject {
            shape: Shape::ALL[s],
            color: Color::ALL[color],
            size: Size::ALL[size],
            cell: ((c / GRID) as u8, (c % GRID) as u8),
        });
    }
    Scene::from_objects(seed, objects)
}

/// Whether pixel `(y, x)` inside a cell is covered by a shape. Coordinates are
/// pixel centres mapped to `[-1, 1]`; small objects are drawn at 0.65 scale.
fn covers(shape: Shape, size: Size, y: usize, x: usize) -> bool {
    let half = CELL_PIXELS as f32 / 2.0;
    let scale = match size {
        Size::Large => 1.0,
        Size::Small => 0.65,
    };
    let u = ((x as f32 + 0.5) - half) / half / scale;
    let v = ((y as f32 + 0.5) - half) / half / scale;
    if u.abs() > 1.0 || v.abs() > 1.0 {
        return false;
    }
    match shape {
        Shape::Circle => u * u + v * v <= 1.0,
        Shape::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
        // apex at the top, base at the bottom
        Shape::Triangle => v >= -0.9 && u.abs() <= (v + 0.9) / 1.9,
        Shape::Cross => u.abs() <= 0.3 || v.abs() <= 0.3,
    }
}

/// Renders a scene as a `[3×32×32]` image in `[0, 1]` with a black background.
pub fn render_image<T: Scalar>(scene: &Scene) -> Tensor<T> {
    let mut data = vec![T::zero(); CHANNELS * IMAGE_SIZE * IMAGE_SIZE];
    for obj in &scene.objects {
        let rgb = obj.color.rgb();
        let (r0, c0) = (
            obj.cell.0 as usize * CELL_PIXELS,
            obj.cell.1 as usize * CELL_PIXELS,
        );
        for y in 0..CELL_PIXELS {
            for x in 0..CELL_PIXELS {
                if !covers(obj.shape, obj.size, y, x) {
                    continue;
                }
                for (ch, &val) in rgb.iter().enumerate() {
                    data[ch * IMAGE_SIZE * IMAGE_SIZE + (r0 + y) * IMAGE_SIZE + c0 + x] =
                        T::lit(val as f64);
                }
            }
        }
    }
    Tensor::new(vec![CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data).expect("image shape")
}
