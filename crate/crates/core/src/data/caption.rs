//! Deterministic caption grammar over a closed vocabulary.
//!
//! Token layout: count word first, then one (color, kind, position)
//! triple per shape in nearest-first order, PAD-filled to
//! [`CAPTION_LEN`]. The all-EMPTY sequence serves as the negative
//! prompt.

use super::scene::{Scene, COLOR_NAMES};
use crate::error::{Error, Result};

pub const CAPTION_LEN: usize = 16;

pub const TOKEN_PAD: usize = 0;
pub const TOKEN_EMPTY: usize = 1;
const TOKEN_COUNT_BASE: usize = 2; // one..four -> 2..=5
const TOKEN_COLOR_BASE: usize = 6; // 8 colors -> 6..=13
const TOKEN_KIND_BASE: usize = 14; // circle, square, triangle -> 14..=16
const TOKEN_POS_BASE: usize = 17; // 3x3 grid -> 17..=25

pub const VOCAB_SIZE: usize = 26;

const COUNT_WORDS: [&str; 4] = ["one", "two", "three", "four"];
const KIND_WORDS: [&str; 3] = ["circle", "square", "triangle"];
const POS_WORDS: [&str; 9] = [
    "top-left",
    "top-center",
    "top-right",
    "middle-left",
    "center",
    "middle-right",
    "bottom-left",
    "bottom-center",
    "bottom-right",
];

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CaptionTokens {
    pub tokens: Vec<usize>,
}

impl CaptionTokens {
    pub fn from_tokens(tokens: Vec<usize>) -> Result<Self> {
        if tokens.len() != CAPTION_LEN {
            return Err(Error::format(format!(
                "caption length {} != {CAPTION_LEN}",
                tokens.len()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= VOCAB_SIZE) {
            return Err(Error::format(format!("caption token {bad} outside vocabulary")));
        }
        Ok(CaptionTokens { tokens })
    }

    pub fn words(&self) -> Vec<&'static str> {
        self.tokens.iter().map(|&t| vocab_word(t)).collect()
    }
}

pub fn vocab_word(token: usize) -> &'static str {
    match token {
        TOKEN_PAD => "PAD",
        TOKEN_EMPTY => "EMPTY",
        t if (TOKEN_COUNT_BASE..TOKEN_COLOR_BASE).contains(&t) => COUNT_WORDS[t - TOKEN_COUNT_BASE],
        t if (TOKEN_COLOR_BASE..TOKEN_KIND_BASE).contains(&t) => COLOR_NAMES[t - TOKEN_COLOR_BASE],
        t if (TOKEN_KIND_BASE..TOKEN_POS_BASE).contains(&t) => KIND_WORDS[t - TOKEN_KIND_BASE],
        t if (TOKEN_POS_BASE..VOCAB_SIZE).contains(&t) => POS_WORDS[t - TOKEN_POS_BASE],
        _ => "<invalid>",
    }
}

fn position_token(cx: f32, cy: f32) -> usize {
    let col = ((cx * 3.0) as usize).min(2);
    let row = ((cy * 3.0) as usize).min(2);
    TOKEN_POS_BASE + row * 3 + col
}

/// Caption for a scene: deterministic, nearest shape first.
pub fn caption(scene: &Scene) -> CaptionTokens {
    let mut order: Vec<usize> = (0..scene.shapes.len()).collect();
    order.sort_by_key(|&i| scene.shapes[i].rank);
    let mut tokens = Vec::with_capacity(CAPTION_LEN);
    tokens.push(TOKEN_COUNT_BASE + scene.shapes.len() - 1);
    for &i in &order {
        let s = &scene.shapes[i];
        tokens.push(TOKEN_COLOR_BASE + s.color);
        tokens.push(TOKEN_KIND_BASE + s.kind.code());
        tokens.push(position_token(s.cx, s.cy));
    }
    tokens.resize(CAPTION_LEN, TOKEN_PAD);
    CaptionTokens { tokens }
}

/// The negative-prompt caption: every slot is EMPTY.
pub fn empty_caption() -> CaptionTokens {
    CaptionTokens { tokens: vec![TOKEN_EMPTY; CAPTION_LEN] }
}

#[cfg(test)]
mod tests {
    use super::super::scene::{Shape, ShapeKind};
    use super::*;

    fn scene_with(shapes: Vec<Shape>) -> Scene {
        Scene { bg_top: [0.1; 3], bg_bottom: [0.2; 3], shapes }
    }

    #[test]
    fn one_red_circle_at_center() {
        let s = scene_with(vec![Shape {
            kind: ShapeKind::Circle,
            color: 0,
            cx: 0.5,
            cy: 0.5,
            radius: 0.2,
            rank: 0,
        }]);
        let c = caption(&s);
        let mut expect = vec!["one", "red", "circle", "center"];
        expect.resize(CAPTION_LEN, "PAD");
        assert_eq!(c.words(), expect);
    }

    #[test]
    fn empty_caption_is_all_empty() {
        let c = empty_caption();
        assert!(c.tokens.iter().all(|&t| t == TOKEN_EMPTY));
        assert_eq!(c.tokens.len(), CAPTION_LEN);
    }

    #[test]
    fn shapes_listed_nearest_first() {
        let s = scene_with(vec![
            Shape { kind: ShapeKind::Square, color: 3, cx: 0.2, cy: 0.2, radius: 0.1, rank: 1 },
            Shape { kind: ShapeKind::Triangle, color: 5, cx: 0.8, cy: 0.8, radius: 0.1, rank: 0 },
        ]);
        let w = caption(&s).words();
        assert_eq!(&w[..7], &["two", "cyan", "triangle", "bottom-right", "yellow", "square", "top-left"]);
    }

    #[test]
    fn caption_separates_every_color_pair_at_fixed_geometry() {
        for a in 0..8usize {
            for b in 0..8usize {
                if a == b {
                    continue;
                }
                let mk = |color| {
                    scene_with(vec![Shape {
                        kind: ShapeKind::Circle,
                        color,
                        cx: 0.4,
                        cy: 0.6,
                        radius: 0.15,
                        rank: 0,
                    }])
                };
                assert_ne!(caption(&mk(a)), caption(&mk(b)), "colors {a} vs {b}");
            }
        }
    }

    #[test]
    fn max_scene_fits_caption_budget() {
        // 1 count word + 4 shapes x 3 words = 13 <= 16.
        let shapes: Vec<Shape> = (0..4)
            .map(|i| Shape {
                kind: ShapeKind::Circle,
                color: i,
                cx: 0.5,
                cy: 0.5,
                radius: 0.1,
                rank: i,
            })
            .collect();
        let c = caption(&scene_with(shapes));
        assert_eq!(c.tokens.len(), CAPTION_LEN);
        assert_eq!(c.tokens[13..], [TOKEN_PAD; 3]);
    }

    #[test]
    fn every_vocab_slot_has_a_word() {
        let mut seen = std::collections::HashSet::new();
        for t in 0..VOCAB_SIZE {
            let w = vocab_word(t);
            assert_ne!(w, "<invalid>");
            assert!(seen.insert(w), "duplicate word {w}");
        }
    }
}
