//! Seeded synthetic datasets used by the examples and tests.

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::pipeline::image::encode_png;
use crate::table::{Cell, Column, MultimodalTable};

const FILLER: [&str; 8] = [
    "soft", "plain", "photo", "item", "good", "new", "small", "daily",
];
const CATEGORIES: [&str; 4] = ["a", "b", "c", "d"];
const CLASSES: [&str; 3] = ["low", "mid", "high"];

/// PNG-encoded square with a flat base color plus per-pixel noise.
pub fn noisy_png<R: Rng + ?Sized>(rng: &mut R, size: u32, base: [u8; 3], noise: u8) -> Vec<u8> {
    let img = RgbImage::from_fn(size, size, |_, _| {
        let px = base.map(|c| {
            let n = if noise == 0 {
                0
            } else {
                rng.random_range(0..=2 * noise as i32) - noise as i32
            };
            (c as i32 + n).clamp(0, 255) as u8
        });
        Rgb(px)
    });
    encode_png(&img)
}

fn filler_text<R: Rng + ?Sized>(rng: &mut R, words: usize) -> String {
    (0..words)
        .map(|_| FILLER[rng.random_range(0..FILLER.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

/// Class index of the overfit fixture: category rank plus twice the
/// brightness bit, bucketed into three ordered classes.
pub fn overfit_class(category: usize, bright: bool) -> usize {
    let score = category + if bright { 2 } else { 0 };
    match score {
        0 | 1 => 0,
        2 | 3 => 1,
        _ => 2,
    }
}

/// Multimodal classification table whose label depends only on the
/// categorical column `kind` and the brightness of image column `photo`.
/// Also carries an uninformative text column and a noise numeric column.
/// Rows cycle through every (kind, brightness) combination.
pub fn overfit_table(n_rows: usize, seed: u64) -> MultimodalTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kind = Vec::with_capacity(n_rows);
    let mut photo = Vec::with_capacity(n_rows);
    let mut note = Vec::with_capacity(n_rows);
    let mut noise = Vec::with_capacity(n_rows);
    let mut label = Vec::with_capacity(n_rows);
    for i in 0..n_rows {
        let cat = i % CATEGORIES.len();
        let bright = (i / CATEGORIES.len()) % 2 == 1;
        kind.push(Cell::from(CATEGORIES[cat]));
        let level = if bright { 210 } else { 45 };
        photo.push(Cell::Bytes(noisy_png(&mut rng, 16, [level; 3], 20)));
        note.push(Cell::from(filler_text(&mut rng, 4)));
        noise.push(Cell::Number(rng.random_range(-1.0..1.0)));
        label.push(Cell::from(CLASSES[overfit_class(cat, bright)]));
    }
    MultimodalTable::new(vec![
        Column::new("kind", kind),
        Column::new("photo", photo),
        Column::new("note", note),
        Column::new("noise", noise),
        Column::new("label", label),
    ])
    .expect("columns have equal length")
}

/// Text classification table: the sentiment word decides the label.
pub fn text_table(n_rows: usize, seed: u64) -> MultimodalTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = Vec::with_capacity(n_rows);
    let mut label = Vec::with_capacity(n_rows);
    for i in 0..n_rows {
        let pos = i % 2 == 0;
        let word = if pos { "great" } else { "awful" };
        text.push(Cell::from(format!(
            "{} {word} {}",
            filler_text(&mut rng, 3),
            filler_text(&mut rng, 2)
        )));
        label.push(Cell::from(if pos { "positive" } else { "negative" }));
    }
    MultimodalTable::new(vec![
        Column::new("review", text),
        Column::new("sentiment", label),
    ])
    .expect("columns have equal length")
}

/// Regression table with `y = 3 x1 - 2 x2 + 0.5 + noise`.
pub fn regression_table(n_rows: usize, seed: u64) -> MultimodalTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut x1, mut x2, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n_rows {
        let a: f64 = rng.random_range(-1.0..1.0);
        let b: f64 = rng.random_range(-1.0..1.0);
        x1.push(Cell::Number(a));
        x2.push(Cell::Number(b));
        y.push(Cell::Number(
            3.0 * a - 2.0 * b + 0.5 + rng.random_range(-0.05..0.05),
        ));
    }
    MultimodalTable::new(vec![
        Column::new("x1", x1),
        Column::new("x2", x2),
        Column::new("y", y),
    ])
    .expect("columns have equal length")
}

/// Distinct, well-separated base colors for cluster fixtures.
fn cluster_color(k: usize) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 8] = [
        [220, 40, 40],
        [40, 200, 60],
        [50, 60, 220],
        [230, 210, 40],
        [200, 60, 200],
        [40, 200, 210],
        [240, 140, 30],
        [120, 120, 120],
    ];
    PALETTE[k % PALETTE.len()]
}

/// Labeled image-image pairs. Each image is a noisy rendering of one of
/// `n_clusters` base colors; a pair is positive iff both sides come from the
/// same cluster. Positives and negatives alternate.
pub fn iim_pairs(n_pairs: usize, n_clusters: usize, seed: u64) -> MultimodalTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut left, mut right, mut label) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..n_pairs {
        let a = rng.random_range(0..n_clusters);
        let positive = i % 2 == 0;
        let b = if positive {
            a
        } else {
            (a + rng.random_range(1..n_clusters)) % n_clusters
        };
        left.push(Cell::Bytes(noisy_png(&mut rng, 16, cluster_color(a), 40)));
        right.push(Cell::Bytes(noisy_png(&mut rng, 16, cluster_color(b), 40)));
        label.push(Cell::Number(if positive { 1.0 } else { 0.0 }));
    }
    MultimodalTable::new(vec![
        Column::new("left", left),
        Column::new("right", right),
        Column::new("match", label),
    ])
    .expect("columns have equal length")
}

pub const ITM_COLORS: [&str; 8] = [
    "red", "green", "blue", "yellow", "purple", "cyan", "orange", "gray",
];
pub const ITM_SHAPES: [&str; 8] = [
    "square", "circle", "cross", "ring", "bar", "column", "corner", "dot",
];

fn shape_mask(shape: usize, x: u32, y: u32, size: u32) -> bool {
    let (cx, cy) = (
        x as f64 - (size as f64 - 1.0) / 2.0,
        y as f64 - (size as f64 - 1.0) / 2.0,
    );
    let r = (cx * cx + cy * cy).sqrt() / size as f64;
    let (ax, ay) = (cx.abs() / size as f64, cy.abs() / size as f64);
    match shape {
        0 => ax < 0.3 && ay < 0.3,
        1 => r < 0.3,
        2 => ax < 0.08 || ay < 0.08,
        3 => (0.2..0.35).contains(&r),
        4 => ay < 0.12,
        5 => ax < 0.12,
        6 => x < size / 2 && y < size / 2,
        _ => r < 0.12,
    }
}

/// Renders `shape` in `color` on a dark background with mild noise.
pub fn itm_image<R: Rng + ?Sized>(rng: &mut R, color: usize, shape: usize, size: u32) -> Vec<u8> {
    let fg = cluster_color(color);
    let img = RgbImage::from_fn(size, size, |x, y| {
        let base = if shape_mask(shape, x, y, size) {
            fg
        } else {
            [15, 15, 15]
        };
        Rgb(base.map(|c| (c as i32 + rng.random_range(-8..=8)).clamp(0, 255) as u8))
    });
    encode_png(&img)
}

/// Positive-only image-text pairs, one per (color, shape) combination in a
/// seeded order: the caption names exactly the drawn color and shape, so
/// every other pair is a distractor differing in at least one attribute.
pub fn itm_pairs(n_pairs: usize, seed: u64) -> MultimodalTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut combos: Vec<(usize, usize)> = (0..ITM_COLORS.len())
        .flat_map(|c| (0..ITM_SHAPES.len()).map(move |s| (c, s)))
        .collect();
    combos.shuffle(&mut rng);
    let (mut images, mut captions) = (Vec::new(), Vec::new());
    for i in 0..n_pairs {
        let (c, s) = combos[i % combos.len()];
        images.push(Cell::Bytes(itm_image(&mut rng, c, s, 16)));
        captions.push(Cell::from(format!("a {} {}", ITM_COLORS[c], ITM_SHAPES[s])));
    }
    MultimodalTable::new(vec![
        Column::new("image", images),
        Column::new("caption", captions),
    ])
    .expect("columns have equal length")
}

/// The bundled toy table: a multiclass label driven by a categorical
/// column, image color and a numeric column, plus a descriptive text
/// column. Images are base64 PNG so the table round-trips through CSV.
pub fn toy_multimodal_table(n_rows: usize, seed: u64) -> MultimodalTable {
    use base64::Engine;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let species = ["cat", "dog", "bird"];
    let tones = [[200, 60, 60], [60, 180, 60], [60, 60, 200]];
    let (mut animal, mut color, mut weight, mut desc, mut img, mut label) = (
        Vec::new(),
        Vec::new(),
        Vec::new(),
        Vec::new(),
        Vec::new(),
        Vec::new(),
    );
    for i in 0..n_rows {
        let k = i % 3;
        let hue = (k + usize::from(rng.random_bool(0.15))) % 3;
        animal.push(Cell::from(species[k]));
        color.push(Cell::from(["red", "green", "blue"][hue]));
        let w: f64 = (k as f64 + 1.0) * 2.0 + rng.random_range(-0.8..0.8);
        weight.push(Cell::Number((w * 10.0).round() / 10.0));
        desc.push(Cell::from(format!(
            "{} {} pet",
            filler_text(&mut rng, 2),
            species[k]
        )));
        let png = noisy_png(&mut rng, 16, tones[hue], 25);
        img.push(Cell::from(
            base64::engine::general_purpose::STANDARD.encode(png),
        ));
        label.push(Cell::from(["adopt", "foster", "sponsor"][k]));
    }
    MultimodalTable::new(vec![
        Column::new("animal", animal),
        Column::new("color", color),
        Column::new("weight", weight),
        Column::new("description", desc),
        Column::new("image", img),
        Column::new("outcome", label),
    ])
    .expect("columns have equal length")
}
