//! Geometric spatial predicates over axis-aligned boxes.
//!
//! Left/right are taken in the fixed scene frame (+x is right). Comparative
//! predicates (closest, farthest, nearest corner) compare the subject against
//! the other same-category objects passed as `competitors`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Box3;

const Z_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    ClosestTo,
    FarthestFrom,
    LeftOf,
    RightOf,
    Between,
    OnTopOf,
    Below,
    NearestCornerOf,
}

impl Predicate {
    pub const ALL: [Predicate; 8] = [
        Predicate::ClosestTo,
        Predicate::FarthestFrom,
        Predicate::LeftOf,
        Predicate::RightOf,
        Predicate::Between,
        Predicate::OnTopOf,
        Predicate::Below,
        Predicate::NearestCornerOf,
    ];

    /// Number of arguments including the subject.
    pub fn arity(self) -> usize {
        match self {
            Predicate::Between => 3,
            _ => 2,
        }
    }

    pub fn is_comparative(self) -> bool {
        matches!(self, Predicate::ClosestTo | Predicate::FarthestFrom | Predicate::NearestCornerOf)
    }

    pub fn name(self) -> &'static str {
        match self {
            Predicate::ClosestTo => "closest_to",
            Predicate::FarthestFrom => "farthest_from",
            Predicate::LeftOf => "left_of",
            Predicate::RightOf => "right_of",
            Predicate::Between => "between",
            Predicate::OnTopOf => "on_top_of",
            Predicate::Below => "below",
            Predicate::NearestCornerOf => "nearest_corner_of",
        }
    }

    /// English phrase placed before the (first) anchor noun phrase.
    pub fn phrase(self) -> &'static str {
        match self {
            Predicate::ClosestTo => "closest to",
            Predicate::FarthestFrom => "farthest from",
            Predicate::LeftOf => "to the left of",
            Predicate::RightOf => "to the right of",
            Predicate::Between => "between",
            Predicate::OnTopOf => "on top of",
            Predicate::Below => "below",
            Predicate::NearestCornerOf => "at the nearest corner of",
        }
    }

    pub fn from_phrase(phrase: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.phrase() == phrase)
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn horizontal_corner_distance(subject: &Box3, anchor: &Box3) -> f64 {
    let (lo, hi) = (anchor.min(), anchor.max());
    let mut best = f64::INFINITY;
    for x in [lo[0], hi[0]] {
        for y in [lo[1], hi[1]] {
            best = best.min(((subject.center[0] - x).powi(2) + (subject.center[1] - y).powi(2)).sqrt());
        }
    }
    best
}

/// Truth value of `pred(subject, anchors…)`.
pub fn evaluate_predicate(pred: Predicate, subject: &Box3, anchors: &[Box3], competitors: &[Box3]) -> Result<bool> {
    if anchors.len() + 1 != pred.arity() {
        return Err(Error::Input(format!(
            "{pred} takes {} anchor(s), got {}",
            pred.arity() - 1,
            anchors.len()
        )));
    }
    let a = &anchors[0];
    Ok(match pred {
        Predicate::ClosestTo => {
            let d = subject.center_distance(a);
            competitors.iter().all(|c| d < c.center_distance(a))
        }
        Predicate::FarthestFrom => {
            let d = subject.center_distance(a);
            competitors.iter().all(|c| d > c.center_distance(a))
        }
        Predicate::NearestCornerOf => {
            let d = horizontal_corner_distance(subject, a);
            competitors.iter().all(|c| d < horizontal_corner_distance(c, a))
        }
        Predicate::LeftOf => subject.center[0] < a.center[0],
        Predicate::RightOf => subject.center[0] > a.center[0],
        Predicate::OnTopOf => subject.overlaps_xy(a) && subject.min()[2] >= a.max()[2] - Z_TOLERANCE,
        Predicate::Below => subject.overlaps_xy(a) && subject.max()[2] <= a.min()[2] + Z_TOLERANCE,
        Predicate::Between => {
            // Slab between the planes through each anchor perpendicular to the
            // anchor-anchor segment (xy only), at most half the span off-axis.
            let b = &anchors[1];
            let (ax, ay) = (a.center[0], a.center[1]);
            let (dx, dy) = (b.center[0] - ax, b.center[1] - ay);
            let len2 = dx * dx + dy * dy;
            if len2 <= 0.0 {
                return Ok(false);
            }
            let (sx, sy) = (subject.center[0] - ax, subject.center[1] - ay);
            let t = (sx * dx + sy * dy) / len2;
            let cross = (sx * dy - sy * dx).abs() / len2.sqrt();
            t > 0.0 && t < 1.0 && cross <= 0.5 * len2.sqrt()
        }
    })
}
