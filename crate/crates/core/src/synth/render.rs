use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::depth_16_to_8;
use crate::data_model::{Frame, Lighting, Modality, NormBox};

pub const MOTION_PATTERNS: usize = 11;

/// Displacement of the moving blob at five evenly spaced knots of an interval.
pub(crate) struct MotionPattern {
    pub knots: [(f64, f64); 5],
}

pub(crate) fn motion(id: u32) -> MotionPattern {
    let z = (0.0, 0.0);
    let knots = match id {
        // idle
        0 => [z, (0.01, 0.0), z, (-0.01, 0.0), z],
        // lift towards the face
        1 => [z, (-0.05, -0.18), (-0.08, -0.28), (-0.05, -0.18), z],
        // hold in front
        2 => [z, (0.0, -0.08), (0.04, -0.08), (0.0, -0.08), z],
        // pick up from the side
        3 => [z, (-0.08, 0.0), (-0.16, -0.05), (-0.22, -0.1), (-0.22, -0.1)],
        // small loop
        4 => [z, (0.06, 0.0), (0.0, 0.06), (-0.06, 0.0), z],
        // look left/right
        5 => [z, (-0.08, 0.0), z, (0.08, 0.0), z],
        // stretch up
        6 => [z, (0.0, -0.08), (0.0, -0.12), (0.0, -0.08), z],
        // put down to the side
        7 => [z, (0.08, 0.04), (0.16, 0.08), (0.22, 0.1), (0.22, 0.1)],
        // turn right
        8 => [z, (0.06, 0.0), (0.1, 0.02), (0.06, 0.0), z],
        // nod
        9 => [z, (0.0, -0.05), z, (0.0, -0.05), z],
        // jitter
        10 => [z, (0.04, -0.03), (-0.04, -0.03), (0.04, -0.03), z],
        _ => panic!("motion pattern {id} not defined"),
    };
    MotionPattern { knots }
}

const PALETTE: [[u8; 3]; 15] = [
    [214, 170, 140],
    [40, 40, 220],
    [30, 200, 60],
    [230, 230, 40],
    [240, 120, 20],
    [250, 250, 250],
    [180, 60, 200],
    [240, 60, 140],
    [120, 70, 30],
    [20, 200, 200],
    [110, 110, 110],
    [100, 160, 255],
    [200, 20, 20],
    [20, 90, 60],
    [255, 190, 220],
];

pub fn class_color(class_index: usize) -> [u8; 3] {
    PALETTE[class_index % PALETTE.len()]
}

/// Per-participant appearance: seat position and colors.
pub(crate) struct ParticipantLook {
    pub driver_box: NormBox,
    pub driver_color: [u8; 3],
    pub background: [u8; 3],
}

impl ParticipantLook {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cx = rng.gen_range(0.42..0.52);
        let w = rng.gen_range(0.26..0.32);
        let top = rng.gen_range(0.12..0.2);
        let jitter = |rng: &mut ChaCha8Rng, v: u8| (v as i32 + rng.gen_range(-20..=20)).clamp(0, 255) as u8;
        let skin = class_color(0);
        let driver_color = [jitter(&mut rng, skin[0]), jitter(&mut rng, skin[1]), jitter(&mut rng, skin[2])];
        let background = [jitter(&mut rng, 60), jitter(&mut rng, 64), jitter(&mut rng, 72)];
        Self { driver_box: NormBox::new(cx - w / 2.0, top, cx + w / 2.0, 0.95), driver_color, background }
    }
}

/// Anchor centers for `count` blobs of edge `edge`, pairwise separated.
pub(crate) fn sample_anchors(rng: &mut ChaCha8Rng, count: usize, edge: f64) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(count);
    let sep = edge * 1.2;
    for _ in 0..count {
        let mut best = (0.5, 0.5);
        for _attempt in 0..64 {
            let c = (rng.gen_range(0.18..0.82), rng.gen_range(0.35..0.8));
            best = c;
            if out.iter().all(|o| (o.0 - c.0).abs() > sep || (o.1 - c.1).abs() > sep) {
                break;
            }
        }
        out.push(best);
    }
    out
}

pub(crate) fn box_at(center: (f64, f64), edge: f64, dx: f64, dy: f64) -> NormBox {
    let h = edge / 2.0;
    let cx = (center.0 + dx).clamp(h, 1.0 - h);
    let cy = (center.1 + dy).clamp(h, 1.0 - h);
    NormBox::new(cx - h, cy - h, cx + h, cy + h)
}

pub(crate) fn shift_box(b: &NormBox, dx: f64, dy: f64) -> NormBox {
    let dx = dx.clamp(-b.x1, 1.0 - b.x2);
    let dy = dy.clamp(-b.y1, 1.0 - b.y2);
    NormBox::new(b.x1 + dx, b.y1 + dy, b.x2 + dx, b.y2 + dy)
}

struct Item {
    boxes: Vec<Option<NormBox>>,
    color: [u8; 3],
    depth: u16,
}

pub(crate) struct Scene {
    size: (usize, usize),
    background: [u8; 3],
    brightness: f64,
    items: Vec<Item>,
}

impl Scene {
    pub fn new(size: (usize, usize), look: &ParticipantLook, lighting: Lighting) -> Self {
        let brightness = match lighting {
            Lighting::Day => 1.0,
            Lighting::Cloudy => 0.8,
            Lighting::Rain => 0.7,
            Lighting::Night => 0.4,
        };
        Self { size, background: look.background, brightness, items: Vec::new() }
    }

    pub fn push(&mut self, boxes: Vec<Option<NormBox>>, color: [u8; 3], depth: u16) {
        self.items.push(Item { boxes, color, depth });
    }

    /// Painter's algorithm over items in push order. Pixel centers inside a
    /// box take the item's color; IR is the undimmed luma (active
    /// illumination), depth is one constant plane per item.
    pub fn render(&self, modality: Modality, frame: usize) -> Frame {
        let (w, h) = self.size;
        let mut color = vec![self.background; w * h];
        let mut depth = vec![40_000u16; w * h];
        for item in &self.items {
            let Some(b) = item.boxes[frame] else { continue };
            let x0 = ((b.x1 * w as f64 - 0.5).ceil().max(0.0)) as usize;
            let y0 = ((b.y1 * h as f64 - 0.5).ceil().max(0.0)) as usize;
            for y in y0..h {
                let cy = (y as f64 + 0.5) / h as f64;
                if cy >= b.y2 {
                    break;
                }
                if cy < b.y1 {
                    continue;
                }
                for x in x0..w {
                    let cx = (x as f64 + 0.5) / w as f64;
                    if cx >= b.x2 {
                        break;
                    }
                    if cx < b.x1 {
                        continue;
                    }
                    color[y * w + x] = item.color;
                    depth[y * w + x] = item.depth;
                }
            }
        }
        let mut out = Frame::new(w, h, modality.channels());
        for i in 0..w * h {
            match modality {
                Modality::Rgb => {
                    for c in 0..3 {
                        out.data[i * 3 + c] = (color[i][c] as f64 * self.brightness).round() as u8;
                    }
                }
                Modality::Ir => {
                    let [r, g, b] = color[i];
                    out.data[i] = (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64).round() as u8;
                }
                Modality::Depth => out.data[i] = depth_16_to_8(depth[i]),
            }
        }
        out
    }
}
