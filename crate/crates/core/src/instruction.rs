//! Geometric edit instructions and their difficulty bands.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AffineParams, Axis, Rotation3DParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Move,
    Resize,
    Rotate2d,
    Rotate3d,
    /// Leaves the object in place; used for replay checks.
    Identity,
}

impl Op {
    pub const EDITS: [Op; 4] = [Op::Move, Op::Resize, Op::Rotate2d, Op::Rotate3d];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    N,
    Ne,
    E,
    Se,
    S,
    Sw,
    W,
    Nw,
    Cw,
    Ccw,
    Enlarge,
    Shrink,
    X,
    Y,
    Z,
    None,
}

impl Direction {
    pub const COMPASS: [Direction; 8] = [
        Direction::N,
        Direction::Ne,
        Direction::E,
        Direction::Se,
        Direction::S,
        Direction::Sw,
        Direction::W,
        Direction::Nw,
    ];

    /// Unit screen vector `(dx, dy)` of a compass direction (y down).
    pub fn unit(self) -> Option<(f64, f64)> {
        let d = std::f64::consts::FRAC_1_SQRT_2;
        Some(match self {
            Direction::N => (0.0, -1.0),
            Direction::Ne => (d, -d),
            Direction::E => (1.0, 0.0),
            Direction::Se => (d, d),
            Direction::S => (0.0, 1.0),
            Direction::Sw => (-d, d),
            Direction::W => (-1.0, 0.0),
            Direction::Nw => (-d, -d),
            _ => return None,
        })
    }

    fn allowed_for(self, op: Op) -> bool {
        match op {
            Op::Move => self.unit().is_some(),
            Op::Resize => matches!(self, Direction::Enlarge | Direction::Shrink),
            Op::Rotate2d => matches!(self, Direction::Cw | Direction::Ccw),
            Op::Rotate3d => matches!(self, Direction::X | Direction::Y | Direction::Z),
            Op::Identity => self == Direction::None,
        }
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "n" | "north" | "up" => Direction::N,
            "ne" | "northeast" | "up-right" => Direction::Ne,
            "e" | "east" | "right" => Direction::E,
            "se" | "southeast" | "down-right" => Direction::Se,
            "s" | "south" | "down" => Direction::S,
            "sw" | "southwest" | "down-left" => Direction::Sw,
            "w" | "west" | "left" => Direction::W,
            "nw" | "northwest" | "up-left" => Direction::Nw,
            "cw" | "clockwise" => Direction::Cw,
            "ccw" | "counterclockwise" => Direction::Ccw,
            "enlarge" | "grow" => Direction::Enlarge,
            "shrink" => Direction::Shrink,
            "x" => Direction::X,
            "y" => Direction::Y,
            "z" => Direction::Z,
            "none" | "" => Direction::None,
            other => return Err(Error::invalid(format!("unknown direction {other:?}"))),
        })
    }
}

impl FromStr for Op {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "move" => Op::Move,
            "resize" => Op::Resize,
            "rotate2d" | "rotate" => Op::Rotate2d,
            "rotate3d" => Op::Rotate3d,
            "identity" => Op::Identity,
            other => return Err(Error::invalid(format!("unknown operation {other:?}"))),
        })
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Op::Move => "move",
            Op::Resize => "resize",
            Op::Rotate2d => "rotate2d",
            Op::Rotate3d => "rotate3d",
            Op::Identity => "identity",
        })
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        })
    }
}

/// Magnitude band `[lo, hi]` for an operation at a difficulty. Move is a
/// fraction of the image size, resize a scale factor, rotations degrees.
pub fn band(op: Op, direction: Direction, difficulty: Difficulty) -> Option<(f64, f64)> {
    use Difficulty::*;
    let b = match (op, difficulty) {
        (Op::Move, Easy) => (0.05, 0.1),
        (Op::Move, Medium) => (0.1, 0.2),
        (Op::Move, Hard) => (0.2, 0.4),
        (Op::Rotate2d, Easy) => (5.0, 10.0),
        (Op::Rotate2d, Medium) => (10.0, 20.0),
        (Op::Rotate2d, Hard) => (20.0, 40.0),
        (Op::Rotate3d, Easy) => (5.0, 10.0),
        (Op::Rotate3d, Medium) => (15.0, 20.0),
        (Op::Rotate3d, Hard) => (25.0, 40.0),
        (Op::Resize, d) => match (direction, d) {
            (Direction::Enlarge, Easy) => (1.1, 1.3),
            (Direction::Enlarge, Medium) => (1.3, 1.5),
            (Direction::Enlarge, Hard) => (1.5, 3.0),
            (Direction::Shrink, Easy) => (0.8, 0.9),
            (Direction::Shrink, Medium) => (0.6, 0.8),
            (Direction::Shrink, Hard) => (0.4, 0.6),
            _ => return None,
        },
        (Op::Identity, _) => return None,
    };
    Some(b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditInstruction {
    pub op: Op,
    pub direction: Direction,
    pub magnitude: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<Difficulty>,
    #[serde(default)]
    pub requires_completion: bool,
    /// Path of a completion mask, relative to the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_mask: Option<String>,
}

/// What Step 1 should do for an instruction.
#[derive(Debug, Clone, PartialEq)]
pub enum Step1Transform {
    Identity,
    Planar(AffineParams),
    Depth(Rotation3DParams),
}

impl EditInstruction {
    pub fn new(op: Op, direction: Direction, magnitude: f64) -> Self {
        Self {
            op,
            direction,
            magnitude,
            difficulty: None,
            requires_completion: false,
            completion_mask: None,
        }
    }

    pub fn identity() -> Self {
        Self::new(Op::Identity, Direction::None, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.direction.allowed_for(self.op) {
            return Err(Error::invalid(format!("direction {:?} does not apply to {}", self.direction, self.op)));
        }
        if !self.magnitude.is_finite() {
            return Err(Error::invalid("magnitude must be finite"));
        }
        match self.op {
            Op::Move if self.magnitude <= 0.0 => return Err(Error::invalid("move distance must be positive")),
            Op::Resize if self.magnitude <= 0.0 => return Err(Error::invalid("scale factor must be positive")),
            _ => {}
        }
        if let Some(d) = self.difficulty {
            if let Some((lo, hi)) = band(self.op, self.direction, d) {
                if self.magnitude < lo || self.magnitude > hi {
                    return Err(Error::invalid(format!(
                        "{} magnitude {} outside the {d} band [{lo}, {hi}]",
                        self.op, self.magnitude
                    )));
                }
            }
        }
        Ok(())
    }

    /// Transform parameters for an image of `h × w` pixels. Moves scale each
    /// axis by the image extent along it, so a diagonal move of `m` shifts by
    /// `m·w/√2` horizontally and `m·h/√2` vertically.
    pub fn to_transform(&self, h: usize, w: usize) -> Result<Step1Transform> {
        self.validate()?;
        Ok(match self.op {
            Op::Identity => Step1Transform::Identity,
            Op::Move => {
                let (dx, dy) = self.direction.unit().expect("validated compass direction");
                Step1Transform::Planar(AffineParams::translation(self.magnitude * dx * w as f64, self.magnitude * dy * h as f64))
            }
            Op::Resize => Step1Transform::Planar(AffineParams::scale(self.magnitude)),
            Op::Rotate2d => {
                // positive phi is clockwise on screen
                let phi = if self.direction == Direction::Cw { self.magnitude } else { -self.magnitude };
                Step1Transform::Planar(AffineParams::rotation(phi))
            }
            Op::Rotate3d => Step1Transform::Depth(Rotation3DParams {
                axis: match self.direction {
                    Direction::X => Axis::X,
                    Direction::Y => Axis::Y,
                    _ => Axis::Z,
                },
                angle: self.magnitude,
                pivot: None,
            }),
        })
    }
}
