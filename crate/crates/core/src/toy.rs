//! Synthetic stick-figure corpus with solid-color garments.
//!
//! Every figure is drawn on black: a skin-colored head, a garment-colored
//! torso, skin-colored limbs. Torso rectangles sit on the 4-pixel latent grid
//! so the garment region survives encoding exactly and its mask is known.
//! The human image shows the figure in a neutral gray shirt and the motion
//! depends only on identity, so the garment color can only be learned from
//! the garment image.

use serde::{Deserialize, Serialize};

use crate::conditioning::{Keypoint, PoseSequence, SourceTag, TripletSample, VideoTensor};
use crate::error::{ensure, Result};

pub const TOY_SIZE: usize = 32;
pub const TOY_FRAMES: usize = 4;

pub const SKIN_TONES: [[f32; 3]; 3] = [[0.95, 0.8, 0.65], [0.6, 0.42, 0.3], [0.75, 0.75, 0.95]];
pub const GARMENT_COLORS: [[f32; 3]; 3] = [[0.9, 0.1, 0.1], [0.1, 0.8, 0.2], [0.15, 0.3, 0.95]];
pub const GARMENT_NAMES: [&str; 3] = ["red", "green", "blue"];
/// Shirt worn in every human image; not one of the garment colors.
pub const NEUTRAL_SHIRT: [f32; 3] = [0.5, 0.5, 0.5];

const TORSO_W: usize = 8;
const TORSO_TOP: usize = 8;
const TORSO_BOTTOM: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Motion {
    WalkRight,
    WalkLeft,
    Wave,
}

impl Motion {
    pub const ALL: [Motion; 3] = [Motion::WalkRight, Motion::WalkLeft, Motion::Wave];

    /// Torso left edge (a multiple of 4) and whether the arms are raised.
    fn frame(self, f: usize) -> (usize, bool) {
        match self {
            Motion::WalkRight => (4 + 4 * f, false),
            Motion::WalkLeft => (20 - 4 * f, false),
            Motion::Wave => (12, f % 2 == 1),
        }
    }

    fn prompt(self) -> &'static str {
        match self {
            Motion::WalkRight => "a person walks right",
            Motion::WalkLeft => "a person walks left",
            Motion::Wave => "a person waves arms",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Figure {
    pub identity: usize,
    pub garment: usize,
    pub motion: Motion,
}

struct Layout {
    ox: usize,
    arms_up: bool,
}

impl Layout {
    fn joints(&self) -> [(f32, f32); 14] {
        let ox = self.ox as f32;
        let (hand_y, elbow_y) = if self.arms_up { (2.0, 5.0) } else { (18.0, 14.0) };
        [
            (ox + 3.5, 5.5),
            (ox + 3.5, 8.0),
            (ox - 1.0, 9.0),
            (ox - 2.0, elbow_y),
            (ox - 2.0, hand_y),
            (ox + 8.0, 9.0),
            (ox + 9.0, elbow_y),
            (ox + 9.0, hand_y),
            (ox + 1.5, 20.0),
            (ox + 1.5, 24.0),
            (ox + 1.5, 28.0),
            (ox + 5.5, 20.0),
            (ox + 5.5, 24.0),
            (ox + 5.5, 28.0),
        ]
    }
}

fn fill(v: &mut VideoTensor, f: usize, x0: i64, y0: i64, x1: i64, y1: i64, rgb: [f32; 3]) {
    for y in y0.max(0)..y1.min(v.height() as i64) {
        for x in x0.max(0)..x1.min(v.width() as i64) {
            v.set_rgb(f, y as usize, x as usize, rgb);
        }
    }
}

fn draw(v: &mut VideoTensor, f: usize, lay: &Layout, skin: [f32; 3], garment: [f32; 3]) {
    let ox = lay.ox as i64;
    fill(v, f, ox + 2, 4, ox + 6, 8, skin);
    fill(v, f, ox, TORSO_TOP as i64, ox + TORSO_W as i64, TORSO_BOTTOM as i64, garment);
    fill(v, f, ox + 1, 20, ox + 3, 29, skin);
    fill(v, f, ox + 5, 20, ox + 7, 29, skin);
    let (y0, y1) = if lay.arms_up { (2, 10) } else { (9, 19) };
    fill(v, f, ox - 2, y0, ox - 1, y1, skin);
    fill(v, f, ox + 9, y0, ox + 10, y1, skin);
}

fn keypoints(lay: &Layout) -> Vec<Keypoint> {
    let s = (TOY_SIZE - 1) as f32;
    lay.joints()
        .iter()
        .map(|&(x, y)| Keypoint { x: (x / s).clamp(0.0, 1.0), y: (y / s).clamp(0.0, 1.0), confidence: 1.0 })
        .collect()
}

impl Figure {
    fn layouts(&self) -> Vec<Layout> {
        (0..TOY_FRAMES)
            .map(|f| {
                let (ox, arms_up) = self.motion.frame(f);
                Layout { ox, arms_up }
            })
            .collect()
    }

    /// The figure performing its motion in its garment.
    pub fn video(&self) -> VideoTensor {
        self.render(GARMENT_COLORS[self.garment])
    }

    fn render(&self, garment: [f32; 3]) -> VideoTensor {
        let mut v = VideoTensor::filled(TOY_FRAMES, TOY_SIZE, TOY_SIZE, [0.0; 3]);
        for (f, lay) in self.layouts().iter().enumerate() {
            draw(&mut v, f, lay, SKIN_TONES[self.identity], garment);
        }
        v
    }

    /// First-frame pose in the neutral shirt.
    pub fn human_image(&self) -> VideoTensor {
        let full = self.render(NEUTRAL_SHIRT);
        full.frame(0).expect("frame 0 exists")
    }

    pub fn pose(&self) -> PoseSequence {
        PoseSequence::new(self.layouts().iter().map(keypoints).collect()).expect("valid toy pose")
    }

    /// Per-frame garment masks, row-major `[F][H·W]`.
    pub fn garment_mask(&self) -> Vec<Vec<bool>> {
        self.layouts()
            .iter()
            .map(|lay| {
                let mut m = vec![false; TOY_SIZE * TOY_SIZE];
                for y in TORSO_TOP..TORSO_BOTTOM {
                    for x in lay.ox..lay.ox + TORSO_W {
                        m[y * TOY_SIZE + x] = true;
                    }
                }
                m
            })
            .collect()
    }

    pub fn triplet(&self, id: impl Into<String>) -> TripletSample {
        TripletSample {
            id: id.into(),
            human: self.human_image(),
            garments: vec![garment_image(self.garment)],
            pose: self.pose(),
            prompt: self.motion.prompt().to_string(),
            truth: self.video(),
            source: SourceTag::SyntheticToy,
        }
    }
}

/// Torso-shaped garment centered on a white canvas.
pub fn garment_image(garment: usize) -> VideoTensor {
    let mut v = VideoTensor::filled(1, TOY_SIZE, TOY_SIZE, [1.0; 3]);
    let x0 = (TOY_SIZE - TORSO_W) as i64 / 2;
    fill(&mut v, 0, x0, TORSO_TOP as i64, x0 + TORSO_W as i64, TORSO_BOTTOM as i64, GARMENT_COLORS[garment]);
    v
}

/// Learning rate for overfitting the toy corpus with the toy model config.
pub const TOY_LR: f32 = 3e-3;

/// Identity/garment pair kept out of [`toy_corpus`].
pub const HELD_OUT: (usize, usize) = (2, 2);

pub fn figure(identity: usize, garment: usize) -> Figure {
    Figure { identity, garment, motion: Motion::ALL[identity % Motion::ALL.len()] }
}

/// All identity × garment combinations except [`HELD_OUT`], truncated to `n`.
pub fn toy_corpus(n: usize) -> Result<Vec<(Figure, TripletSample)>> {
    let combos: Vec<(usize, usize)> = (0..SKIN_TONES.len())
        .flat_map(|i| (0..GARMENT_COLORS.len()).map(move |g| (i, g)))
        .filter(|&c| c != HELD_OUT)
        .collect();
    ensure!(n >= 1 && n <= combos.len(), Invalid, "toy corpus holds 1..={} triplets, asked for {n}", combos.len());
    Ok(combos[..n]
        .iter()
        .map(|&(i, g)| {
            let fig = figure(i, g);
            (fig, fig.triplet(format!("toy-{i}-{}", GARMENT_NAMES[g])))
        })
        .collect())
}

/// Mean RGB of `video` over the masked pixels of every frame.
pub fn region_mean(video: &VideoTensor, masks: &[Vec<bool>]) -> [f64; 3] {
    let mut acc = [0.0f64; 3];
    let mut n = 0usize;
    for (f, m) in masks.iter().enumerate() {
        for (i, &on) in m.iter().enumerate() {
            if on {
                let rgb = video.rgb(f, i / video.width(), i % video.width());
                for c in 0..3 {
                    acc[c] += rgb[c] as f64;
                }
                n += 1;
            }
        }
    }
    acc.map(|a| a / n.max(1) as f64)
}
