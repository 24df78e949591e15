//! Hypergrid environment.
//!
//! Tokens `0..dims` each increment one coordinate (saturating at the grid
//! boundary); the final token is stop. A walk ends on stop or at
//! `max_len = dims * (side - 1) + 1`. Reward depends only on the final cell
//! `x` through the normalized offsets `u_d = |x_d / (side - 1) - 0.5|`:
//!
//! ```text
//! R(x) = r0 + r1 * all_d(0.25 < u_d <= 0.5) + r2 * all_d(0.3 < u_d < 0.4)
//! ```
//!
//! which yields `2^dims` banded peaks near the corners. Declared modes are
//! the canonical paths (dimension-ordered increments, then stop) to the
//! inner-band cell nearest each corner.

use super::{EnvKind, Environment, Mode};
use crate::error::{Error, Result};
use crate::policy::{Prompt, TokenSpace};

#[derive(Debug, Clone)]
pub struct HypergridConfig {
    pub dims: usize,
    pub side: usize,
    /// Base reward (the floor).
    pub r0: f64,
    /// Outer-band bonus.
    pub r1: f64,
    /// Inner-band bonus.
    pub r2: f64,
    pub radius: usize,
}

/// Final cell of a token walk: increment counts clamped to the boundary.
pub(crate) fn final_cell(tokens: &[u16], dims: usize, side: usize) -> Vec<usize> {
    let mut cell = vec![0usize; dims];
    for &t in tokens {
        let d = t as usize;
        if d < dims {
            cell[d] = (cell[d] + 1).min(side - 1);
        }
    }
    cell
}

fn normalized_offset(x: usize, side: usize) -> f64 {
    (x as f64 / (side - 1) as f64 - 0.5).abs()
}

pub(crate) fn reward(tokens: &[u16], dims: usize, side: usize, r0: f64, r1: f64, r2: f64) -> f64 {
    let cell = final_cell(tokens, dims, side);
    let outer = cell.iter().all(|&x| {
        let u = normalized_offset(x, side);
        u > 0.25 && u <= 0.5
    });
    let inner = cell.iter().all(|&x| {
        let u = normalized_offset(x, side);
        u > 0.3 && u < 0.4
    });
    r0 + if outer { r1 } else { 0.0 } + if inner { r2 } else { 0.0 }
}

impl HypergridConfig {
    pub fn build(&self) -> Result<Environment> {
        if self.dims == 0 || self.side < 2 {
            return Err(Error::Config(format!(
                "hypergrid needs dims >= 1 and side >= 2, got dims {} side {}",
                self.dims, self.side
            )));
        }
        if !self.r0.is_finite() || self.r0 <= 0.0 {
            return Err(Error::Config(format!(
                "base reward r0 must be positive, got {}",
                self.r0
            )));
        }
        let max_len = self.dims * (self.side - 1) + 1;
        let space = TokenSpace::variable(self.dims + 1, max_len);

        // Inner-band coordinates, if the grid is fine enough to have any.
        let low = (0..self.side).find(|&x| {
            let u = normalized_offset(x, self.side);
            u > 0.3 && u < 0.4
        });
        let high = (0..self.side).rev().find(|&x| {
            let u = normalized_offset(x, self.side);
            u > 0.3 && u < 0.4
        });
        let mut modes = Vec::new();
        if let (Some(lo), Some(hi)) = (low, high) {
            for corner in 0..(1usize << self.dims) {
                let mut tokens: Vec<u16> = Vec::new();
                for d in 0..self.dims {
                    let x = if corner >> d & 1 == 1 { hi } else { lo };
                    tokens.extend(std::iter::repeat_n(d as u16, x));
                }
                tokens.push(space.eos.unwrap());
                modes.push(Mode {
                    tokens,
                    radius: self.radius,
                });
            }
        }

        Ok(Environment {
            family: "hypergrid".to_string(),
            space,
            prompts: vec![Prompt::one_hot(0, 1)],
            modes: vec![modes],
            kind: EnvKind::Hypergrid {
                dims: self.dims,
                side: self.side,
                r0: self.r0,
                r1: self.r1,
                r2: self.r2,
            },
        })
    }
}
