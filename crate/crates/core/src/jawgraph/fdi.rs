use std::fmt;

use serde::{Deserialize, Serialize};

use super::JawSide;

/// Number of FDI tooth categories (four quadrants of eight positions).
pub const NUM_CATEGORIES: usize = 32;

/// Two-digit FDI tooth code: quadrant digit followed by position digit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ToothId(pub u8);

impl ToothId {
    pub fn quadrant(self) -> u8 {
        self.0 / 10
    }

    pub fn position(self) -> u8 {
        self.0 % 10
    }

    /// True for codes 11..=18, 21..=28, 31..=38, 41..=48.
    pub fn is_valid(self) -> bool {
        (1..=4).contains(&self.quadrant()) && (1..=8).contains(&self.position())
    }

    pub fn side(self) -> Option<JawSide> {
        match self.quadrant() {
            1 | 2 => Some(JawSide::Upper),
            3 | 4 => Some(JawSide::Lower),
            _ => None,
        }
    }

    pub fn is_valid_for(self, side: JawSide) -> bool {
        self.is_valid() && self.side() == Some(side)
    }

    /// Dense category index in `0..NUM_CATEGORIES`.
    pub fn category(self) -> Option<usize> {
        self.is_valid()
            .then(|| (self.quadrant() as usize - 1) * 8 + self.position() as usize - 1)
    }

    /// Position along the arch, 0 at the patient's right-most third molar and
    /// 15 at the left-most one. Centrals sit at ranks 7 and 8.
    pub fn arch_rank(self) -> Option<usize> {
        if !self.is_valid() {
            return None;
        }
        let p = self.position() as usize;
        Some(match self.quadrant() {
            1 | 4 => 8 - p,
            _ => 7 + p,
        })
    }

    /// Contralateral tooth (11 <-> 21, 36 <-> 46, ...).
    pub fn mirror(self) -> Option<ToothId> {
        let q = match self.quadrant() {
            1 => 2,
            2 => 1,
            3 => 4,
            4 => 3,
            _ => return None,
        };
        self.is_valid().then(|| ToothId(q * 10 + self.position()))
    }

    /// True for teeth on the patient's left (quadrants 2 and 3).
    pub fn is_left(self) -> bool {
        matches!(self.quadrant(), 2 | 3)
    }

    /// Full permanent arch without third molars, in arch order.
    pub fn arch(side: JawSide, with_third_molars: bool) -> Vec<ToothId> {
        let last = if with_third_molars { 8 } else { 7 };
        let (right, left) = match side {
            JawSide::Upper => (1, 2),
            JawSide::Lower => (4, 3),
        };
        (1..=last)
            .rev()
            .map(|p| ToothId(right * 10 + p))
            .chain((1..=last).map(|p| ToothId(left * 10 + p)))
            .collect()
    }
}

impl fmt::Display for ToothId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}
