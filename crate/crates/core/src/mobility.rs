//! Device positions, piecewise-linear movement and range predicates.

use crate::model::SimTime;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Where a device is over time. Before the first waypoint the device sits at
/// `start`; between waypoints it moves linearly; after the last it stays put.
#[derive(Debug, Clone, PartialEq)]
pub struct Position {
    pub start: Point,
    pub waypoints: Vec<(SimTime, Point)>,
}

impl Position {
    pub fn fixed(x: f64, y: f64) -> Self {
        Position { start: Point::new(x, y), waypoints: Vec::new() }
    }

    pub fn at(&self, t: SimTime) -> Point {
        let mut prev_t = SimTime::ZERO;
        let mut prev = self.start;
        for &(wt, wp) in &self.waypoints {
            if t < wt {
                let span = (wt - prev_t).as_micros();
                if span == 0 {
                    return wp;
                }
                let frac = (t.saturating_sub(prev_t)).as_micros() as f64 / span as f64;
                return Point::new(prev.x + (wp.x - prev.x) * frac, prev.y + (wp.y - prev.y) * frac);
            }
            prev_t = wt;
            prev = wp;
        }
        prev
    }
}

/// Range predicate with an inclusive boundary.
pub fn within_range(a: Point, b: Point, range_m: f64) -> bool {
    a.distance(b) <= range_m
}
