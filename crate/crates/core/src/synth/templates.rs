//! Map templates: lane centerlines plus the routes vehicles drive along.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::lanes::LanePolyline;

pub const LANE_WIDTH: f64 = 3.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Straight,
    Curved,
    Intersection,
}

impl Template {
    pub const ALL: [Template; 3] = [Template::Straight, Template::Curved, Template::Intersection];

    pub fn name(self) -> &'static str {
        match self {
            Template::Straight => "straight",
            Template::Curved => "curved",
            Template::Intersection => "intersection",
        }
    }
}

/// A drivable path through one or more lanes, parameterized by arc length.
#[derive(Debug, Clone)]
pub struct Route {
    pts: Vec<[f64; 2]>,
    cum: Vec<f64>,
    /// Arc length of a stop line on this route.
    pub stop_at: Option<f64>,
    /// Lateral offsets that land on a neighbouring same-direction lane.
    pub lane_change_offsets: Vec<f64>,
    /// Whether the route changes heading by a large angle (a turn).
    pub turning: bool,
}

impl Route {
    pub fn new(pts: Vec<[f64; 2]>) -> Self {
        let mut cum = vec![0.0];
        for w in pts.windows(2) {
            let d = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
            cum.push(cum.last().unwrap() + d);
        }
        Self {
            pts,
            cum,
            stop_at: None,
            lane_change_offsets: Vec::new(),
            turning: false,
        }
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    /// Position at arc length `s`, clamped to the route.
    pub fn point(&self, s: f64) -> [f64; 2] {
        let s = s.clamp(0.0, self.length());
        let i = match self.cum.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => return self.pts[i],
            Err(i) => i.clamp(1, self.pts.len() - 1) - 1,
        };
        let seg = self.cum[i + 1] - self.cum[i];
        let u = if seg > 0.0 { (s - self.cum[i]) / seg } else { 0.0 };
        let (a, b) = (self.pts[i], self.pts[i + 1]);
        [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])]
    }

    /// Tangent heading at `s`, from a centered 1 m chord.
    pub fn heading(&self, s: f64) -> f64 {
        let a = self.point(s - 0.5);
        let b = self.point(s + 0.5);
        (b[1] - a[1]).atan2(b[0] - a[0])
    }
}

#[derive(Debug, Clone)]
pub struct MapTemplate {
    pub lanes: Vec<LanePolyline>,
    pub routes: Vec<Route>,
}

impl MapTemplate {
    pub fn build(t: Template) -> Self {
        match t {
            Template::Straight => parallel_road(|u| [u - 120.0, 0.0], 240.0),
            Template::Curved => parallel_road(|u| [u - 120.0, 12.0 * (2.0 * PI * u / 160.0).sin()], 240.0),
            Template::Intersection => intersection(),
        }
    }

    pub fn total_lane_length(&self) -> f64 {
        self.lanes.iter().map(|l| l.length()).sum()
    }
}

/// Four-lane two-way road along a reference curve `c(u)`, `u in [0, len]`.
fn parallel_road(c: impl Fn(f64) -> [f64; 2], len: f64) -> MapTemplate {
    let step = 2.0;
    let n = (len / step) as usize;
    let us: Vec<f64> = (0..=n).map(|i| i as f64 * step).collect();
    let normal = |u: f64| {
        let a = c(u - 0.01);
        let b = c(u + 0.01);
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let m = dx.hypot(dy);
        [-dy / m, dx / m]
    };
    let offset_line = |off: f64| -> Vec<[f64; 2]> {
        us.iter()
            .map(|&u| {
                let p = c(u);
                let nn = normal(u);
                [p[0] + off * nn[0], p[1] + off * nn[1]]
            })
            .collect()
    };
    let half = LANE_WIDTH / 2.0;
    // forward lanes on the right of the reference, reverse lanes on the left
    let specs: [(f64, bool, f64); 4] = [
        (-3.0 * half, true, LANE_WIDTH),
        (-half, true, -LANE_WIDTH),
        (half, false, LANE_WIDTH),
        (3.0 * half, false, -LANE_WIDTH),
    ];
    let mut lanes = Vec::new();
    let mut routes = Vec::new();
    for (off, forward, change) in specs {
        let mut pts = offset_line(off);
        if !forward {
            pts.reverse();
        }
        lanes.push(LanePolyline::new(pts.clone()));
        let mut r = Route::new(pts);
        // the lateral offset is measured along the route's left normal
        r.lane_change_offsets = vec![if forward { change } else { -change }];
        routes.push(r);
    }
    MapTemplate { lanes, routes }
}

const ARM_LEN: f64 = 80.0;
const BOX_HALF: f64 = 10.0;
const STOP_BEFORE_END: f64 = 4.0;

fn intersection() -> MapTemplate {
    let half = LANE_WIDTH / 2.0;
    let dirs: [[f64; 2]; 4] = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];
    let right = |d: [f64; 2]| [d[1], -d[0]];
    let at = |e: [f64; 2], r: f64, side: [f64; 2]| [e[0] * r + side[0] * half, e[1] * r + side[1] * half];

    let mut lanes: Vec<LanePolyline> = Vec::new();
    let mut incoming = Vec::new();
    let mut outgoing = Vec::new();
    for e in dirs {
        let inward = [-e[0], -e[1]];
        let side_in = right(inward);
        let a = at(e, ARM_LEN, side_in);
        let b = at(e, BOX_HALF, side_in);
        let mut lane = LanePolyline::new(vec![a, b]);
        let l = ARM_LEN - BOX_HALF;
        lane.stop_line = Some(l - STOP_BEFORE_END);
        lane.crosswalks = vec![(l - 3.0, l)];
        incoming.push(lanes.len());
        lanes.push(lane);

        let side_out = right(e);
        let mut lane = LanePolyline::new(vec![at(e, BOX_HALF, side_out), at(e, ARM_LEN, side_out)]);
        lane.crosswalks = vec![(0.0, 3.0)];
        outgoing.push(lanes.len());
        lanes.push(lane);
    }

    let mut routes = Vec::new();
    for i in 0..4 {
        for j in 0..4 {
            if i == j {
                continue;
            }
            let p0 = lanes[incoming[i]].points[1];
            let p3 = lanes[outgoing[j]].points[0];
            let d0 = [-dirs[i][0], -dirs[i][1]];
            let d3 = dirs[j];
            let k = 0.45 * (p3[0] - p0[0]).hypot(p3[1] - p0[1]);
            let p1 = [p0[0] + k * d0[0], p0[1] + k * d0[1]];
            let p2 = [p3[0] - k * d3[0], p3[1] - k * d3[1]];
            let pts: Vec<[f64; 2]> = (0..=24)
                .map(|n| {
                    let t = n as f64 / 24.0;
                    let m = 1.0 - t;
                    let w = [m * m * m, 3.0 * m * m * t, 3.0 * m * t * t, t * t * t];
                    [
                        w[0] * p0[0] + w[1] * p1[0] + w[2] * p2[0] + w[3] * p3[0],
                        w[0] * p0[1] + w[1] * p1[1] + w[2] * p2[1] + w[3] * p3[1],
                    ]
                })
                .collect();
            let conn = lanes.len();
            lanes[incoming[i]].successors.push(conn);
            let mut c = LanePolyline::new(pts.clone());
            c.successors = vec![outgoing[j]];
            lanes.push(c);

            let mut full = lanes[incoming[i]].points.clone();
            full.extend_from_slice(&pts[1..]);
            full.extend_from_slice(&lanes[outgoing[j]].points[1..]);
            let mut r = Route::new(full);
            r.stop_at = lanes[incoming[i]].stop_line;
            r.turning = (i + 2) % 4 != j;
            routes.push(r);
        }
    }
    MapTemplate { lanes, routes }
}
