use rand::Rng;

use crate::random::Span;

pub const CELL: f64 = 0.1;
const X_MIN: f64 = -10.0;
const NX: usize = 200;
const Y_MIN: f64 = -0.5;
const NY: usize = 10;

/// Piecewise-constant height field on a square grid; points outside the
/// grid take the nearest edge cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Terrain {
    heights: Vec<f64>,
}

impl Terrain {
    pub fn flat() -> Self {
        Self {
            heights: vec![0.0; NX * NY],
        }
    }

    pub fn random(span: Span, rng: &mut impl Rng) -> Self {
        if span.0 == span.1 && span.0 == 0.0 {
            return Self::flat();
        }
        Self {
            heights: (0..NX * NY).map(|_| span.sample(rng)).collect(),
        }
    }

    pub fn height(&self, x: f64, y: f64) -> f64 {
        let ix = (((x - X_MIN) / CELL).floor().max(0.0) as usize).min(NX - 1);
        let iy = (((y - Y_MIN) / CELL).floor().max(0.0) as usize).min(NY - 1);
        self.heights[iy * NX + ix]
    }

    pub fn max_height(&self) -> f64 {
        self.heights.iter().copied().fold(0.0, f64::max)
    }
}
