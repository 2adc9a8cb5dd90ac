//! Vectorized lane map: centerline polylines resampled at 1 m and split
//! into lanelets of at most 20 m.

use serde::{Deserialize, Serialize};

use crate::geometry::{to_local, wrap, Pose2D};
use crate::spatial::GridIndex;

pub const LANELET_MAX_LENGTH: f64 = 20.0;
pub const POSE_SPACING: f64 = 1.0;
pub const LANE_FEATURE_WIDTH: usize = 8;

/// A lane centerline with its semantic flags, as produced by a map source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanePolyline {
    pub points: Vec<[f64; 2]>,
    /// Arc length (from the first point) where a stop line crosses the lane.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_line: Option<f64>,
    /// Arc-length intervals covered by crosswalks.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub crosswalks: Vec<(f64, f64)>,
    /// Indices of lanes that continue this one.
    #[serde(default)]
    pub successors: Vec<usize>,
}

impl LanePolyline {
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        Self {
            points,
            stop_line: None,
            crosswalks: Vec::new(),
            successors: Vec::new(),
        }
    }

    pub fn length(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LanePose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    /// Last pose of the lane.
    pub end: bool,
    pub on_stop_line: bool,
    pub on_crosswalk: bool,
}

impl LanePose {
    /// `[x, y, theta, cos, sin, D, stop_line, crosswalk]` in `origin`'s frame.
    pub fn features(&self, origin: &Pose2D) -> [f64; LANE_FEATURE_WIDTH] {
        let p = to_local(&Pose2D::new(self.x, self.y, self.theta), origin);
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        [
            p.x,
            p.y,
            p.theta,
            p.theta.cos(),
            p.theta.sin(),
            flag(self.end),
            flag(self.on_stop_line),
            flag(self.on_crosswalk),
        ]
    }

    pub fn xy(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lanelet {
    pub id: usize,
    /// Index of the source lane polyline.
    pub lane: usize,
    pub poses: Vec<LanePose>,
    /// Arc length along the source lane covered by this lanelet.
    pub length: f64,
    pub successors: Vec<usize>,
    pub predecessors: Vec<usize>,
}

/// Padded `N_lane x l x 8` node features with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneFeatureBlock {
    pub n_lane: usize,
    pub l: usize,
    pub data: Vec<f64>,
    pub mask: Vec<bool>,
}

impl LaneFeatureBlock {
    pub fn pose(&self, lane: usize, k: usize) -> &[f64] {
        let o = (lane * self.l + k) * LANE_FEATURE_WIDTH;
        &self.data[o..o + LANE_FEATURE_WIDTH]
    }

    pub fn lengths(&self) -> Vec<usize> {
        (0..self.n_lane)
            .map(|i| self.mask[i * self.l..(i + 1) * self.l].iter().filter(|&&m| m).count())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<LanePolyline>", into = "Vec<LanePolyline>")]
pub struct LaneGraph {
    pub lanelets: Vec<Lanelet>,
    /// Degenerate input polylines that were dropped.
    pub skipped: usize,
    source: Vec<LanePolyline>,
}

impl From<Vec<LanePolyline>> for LaneGraph {
    fn from(v: Vec<LanePolyline>) -> Self {
        build_lane_graph(&v)
    }
}

impl From<LaneGraph> for Vec<LanePolyline> {
    fn from(g: LaneGraph) -> Self {
        g.source
    }
}

impl Default for LaneGraph {
    fn default() -> Self {
        build_lane_graph(&[])
    }
}

impl LaneGraph {
    pub fn n_lane(&self) -> usize {
        self.lanelets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lanelets.is_empty()
    }

    pub fn polylines(&self) -> &[LanePolyline] {
        &self.source
    }

    /// Maximum number of poses in any lanelet.
    pub fn max_poses(&self) -> usize {
        self.lanelets.iter().map(|l| l.poses.len()).max().unwrap_or(0)
    }

    /// Feature block for the given lanelets (all when `subset` is `None`),
    /// expressed in `origin`'s frame.
    pub fn feature_block(&self, origin: &Pose2D, subset: Option<&[usize]>) -> LaneFeatureBlock {
        let all: Vec<usize>;
        let ids = match subset {
            Some(s) => s,
            None => {
                all = (0..self.lanelets.len()).collect();
                &all
            }
        };
        let l = ids
            .iter()
            .map(|&i| self.lanelets[i].poses.len())
            .max()
            .unwrap_or(0);
        let mut data = vec![0.0; ids.len() * l * LANE_FEATURE_WIDTH];
        let mut mask = vec![false; ids.len() * l];
        for (row, &i) in ids.iter().enumerate() {
            for (k, p) in self.lanelets[i].poses.iter().enumerate() {
                let o = (row * l + k) * LANE_FEATURE_WIDTH;
                data[o..o + LANE_FEATURE_WIDTH].copy_from_slice(&p.features(origin));
                mask[row * l + k] = true;
            }
        }
        LaneFeatureBlock {
            n_lane: ids.len(),
            l,
            data,
            mask,
        }
    }

    /// Lanelets with at least one pose strictly within `radius` of any query
    /// point, in ascending id order.
    pub fn lanelets_near(&self, points: &[[f64; 2]], radius: f64) -> Vec<usize> {
        let (xy, owner) = self.pose_points();
        let index = GridIndex::new(&xy, radius.max(1.0));
        let mut keep = vec![false; self.lanelets.len()];
        for q in points {
            for i in index.within(*q, radius) {
                keep[owner[i]] = true;
            }
        }
        keep.iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
            .collect()
    }

    /// Flattened pose positions and the lanelet each belongs to.
    pub fn pose_points(&self) -> (Vec<[f64; 2]>, Vec<usize>) {
        let mut xy = Vec::new();
        let mut owner = Vec::new();
        for (i, ll) in self.lanelets.iter().enumerate() {
            for p in &ll.poses {
                xy.push(p.xy());
                owner.push(i);
            }
        }
        (xy, owner)
    }

    /// Lanelets `ids`, re-indexed from 0 and re-expressed in `origin`'s
    /// frame. Links leaving the subset are dropped. The result has no source
    /// polylines, so it serializes as an empty map.
    pub fn local_subgraph(&self, ids: &[usize], origin: &Pose2D) -> LaneGraph {
        self.map_subgraph(ids, |p| to_local(&p, origin))
    }

    /// Every lanelet rotated about the frame origin by `angle`.
    pub fn rotated(&self, angle: f64) -> LaneGraph {
        let ids: Vec<usize> = (0..self.lanelets.len()).collect();
        let (s, c) = angle.sin_cos();
        self.map_subgraph(&ids, |p| {
            Pose2D::new(c * p.x - s * p.y, s * p.x + c * p.y, wrap(p.theta + angle))
        })
    }

    fn map_subgraph(&self, ids: &[usize], f: impl Fn(Pose2D) -> Pose2D) -> LaneGraph {
        let mut remap = vec![usize::MAX; self.lanelets.len()];
        for (new, &old) in ids.iter().enumerate() {
            remap[old] = new;
        }
        let relink = |v: &[usize]| -> Vec<usize> {
            v.iter().map(|&o| remap[o]).filter(|&n| n != usize::MAX).collect()
        };
        let lanelets = ids
            .iter()
            .enumerate()
            .map(|(new, &old)| {
                let src = &self.lanelets[old];
                Lanelet {
                    id: new,
                    lane: src.lane,
                    poses: src
                        .poses
                        .iter()
                        .map(|p| {
                            let q = f(Pose2D::new(p.x, p.y, p.theta));
                            LanePose { x: q.x, y: q.y, theta: q.theta, ..*p }
                        })
                        .collect(),
                    length: src.length,
                    successors: relink(&src.successors),
                    predecessors: relink(&src.predecessors),
                }
            })
            .collect();
        LaneGraph {
            lanelets,
            skipped: 0,
            source: Vec::new(),
        }
    }
}

struct Resampled {
    poses: Vec<LanePose>,
    spacing: f64,
}

fn resample(lane: &LanePolyline) -> Option<Resampled> {
    if lane.points.len() < 2 {
        return None;
    }
    let mut cum = vec![0.0];
    for w in lane.points.windows(2) {
        let d = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
        cum.push(cum.last().unwrap() + d);
    }
    let total = *cum.last().unwrap();
    if !(total > 1e-6) || !total.is_finite() {
        return None;
    }
    let n_seg = ((total / POSE_SPACING).round() as usize).max(1);
    let spacing = total / n_seg as f64;
    let mut poses = Vec::with_capacity(n_seg + 1);
    let mut seg = 0;
    for k in 0..=n_seg {
        let s = if k == n_seg { total } else { k as f64 * spacing };
        while seg + 2 < cum.len() && cum[seg + 1] < s {
            seg += 1;
        }
        // skip zero-length segments for the tangent
        let mut tseg = seg;
        while tseg + 2 < cum.len() && cum[tseg + 1] - cum[tseg] < 1e-9 {
            tseg += 1;
        }
        let (a, b) = (lane.points[tseg], lane.points[tseg + 1]);
        let seg_len = cum[tseg + 1] - cum[tseg];
        let u = if seg_len > 0.0 {
            ((s - cum[tseg]) / seg_len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let theta = wrap((b[1] - a[1]).atan2(b[0] - a[0]));
        poses.push(LanePose {
            x: a[0] + u * (b[0] - a[0]),
            y: a[1] + u * (b[1] - a[1]),
            theta,
            end: k == n_seg,
            on_stop_line: lane
                .stop_line
                .is_some_and(|sl| (s - sl).abs() <= 0.5 * spacing),
            on_crosswalk: lane.crosswalks.iter().any(|&(lo, hi)| s >= lo && s <= hi),
        });
    }
    Some(Resampled { poses, spacing })
}

/// Resamples every lane at ~1 m arc-length spacing and cuts it into
/// lanelets no longer than 20 m. Zero-length or single-point polylines are
/// skipped and counted in [`LaneGraph::skipped`].
pub fn build_lane_graph(lanes: &[LanePolyline]) -> LaneGraph {
    let mut lanelets: Vec<Lanelet> = Vec::new();
    let mut lane_span: Vec<Option<(usize, usize)>> = vec![None; lanes.len()];
    let mut skipped = 0;

    for (li, lane) in lanes.iter().enumerate() {
        let Some(r) = resample(lane) else {
            skipped += 1;
            continue;
        };
        let per = ((LANELET_MAX_LENGTH / r.spacing + 1e-9).floor() as usize).max(1);
        let n_seg = r.poses.len() - 1;
        let first = lanelets.len();
        let mut start = 0;
        while start < n_seg {
            let end = (start + per).min(n_seg);
            let id = lanelets.len();
            let mut poses = r.poses[start..=end].to_vec();
            for p in poses.iter_mut().take(end - start) {
                p.end = false;
            }
            lanelets.push(Lanelet {
                id,
                lane: li,
                poses,
                length: (end - start) as f64 * r.spacing,
                successors: Vec::new(),
                predecessors: Vec::new(),
            });
            if id > first {
                lanelets[id - 1].successors.push(id);
                lanelets[id].predecessors.push(id - 1);
            }
            start = end;
        }
        lane_span[li] = Some((first, lanelets.len() - 1));
    }

    for (li, lane) in lanes.iter().enumerate() {
        let Some((_, last)) = lane_span[li] else {
            continue;
        };
        for &succ in &lane.successors {
            if let Some(Some((first, _))) = lane_span.get(succ) {
                lanelets[last].successors.push(*first);
                lanelets[*first].predecessors.push(last);
            }
        }
    }

    if skipped > 0 {
        tracing::warn!(skipped, "degenerate lane polylines skipped");
    }

    LaneGraph {
        lanelets,
        skipped,
        source: lanes.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn straight(len: f64) -> LanePolyline {
        LanePolyline::new(vec![[0.0, 0.0], [len, 0.0]])
    }

    #[test]
    fn fifty_meter_lane_splits_20_20_10() {
        let g = build_lane_graph(&[straight(50.0)]);
        let lens: Vec<f64> = g.lanelets.iter().map(|l| l.length).collect();
        assert_eq!(lens, vec![20.0, 20.0, 10.0]);
        assert_eq!(g.lanelets[0].poses.len(), 21);
        assert_eq!(g.lanelets[2].poses.len(), 11);
        assert_eq!(g.lanelets[0].successors, vec![1]);
        assert_eq!(g.lanelets[2].predecessors, vec![1]);
        // D marks only the end of the lane
        let ends: Vec<bool> = g
            .lanelets
            .iter()
            .map(|l| l.poses.iter().any(|p| p.end))
            .collect();
        assert_eq!(ends, vec![false, false, true]);
        assert!(g.lanelets[2].poses.last().unwrap().end);
    }

    #[test]
    fn five_meter_lane_has_six_poses() {
        let g = build_lane_graph(&[straight(5.0)]);
        assert_eq!(g.n_lane(), 1);
        assert_eq!(g.lanelets[0].poses.len(), 6);
    }

    #[test]
    fn empty_and_degenerate_inputs() {
        let g = build_lane_graph(&[]);
        assert_eq!(g.n_lane(), 0);
        let g = build_lane_graph(&[
            LanePolyline::new(vec![[1.0, 1.0], [1.0, 1.0]]),
            LanePolyline::new(vec![[0.0, 0.0]]),
            straight(3.0),
        ]);
        assert_eq!(g.skipped, 2);
        assert_eq!(g.n_lane(), 1);
        assert_eq!(g.lanelets[0].lane, 2);
    }

    #[test]
    fn flags_and_successors() {
        let mut a = straight(30.0);
        a.stop_line = Some(29.0);
        a.crosswalks = vec![(25.0, 27.0)];
        a.successors = vec![1];
        let b = LanePolyline::new(vec![[30.0, 0.0], [30.0, 10.0]]);
        let g = build_lane_graph(&[a, b]);
        assert_eq!(g.n_lane(), 3);
        assert_eq!(g.lanelets[1].successors, vec![2]);
        assert_eq!(g.lanelets[2].predecessors, vec![1]);
        let p = &g.lanelets[1].poses;
        let stops: Vec<usize> = (0..p.len()).filter(|&k| p[k].on_stop_line).collect();
        assert_eq!(stops, vec![9]);
        let cross = p.iter().filter(|p| p.on_crosswalk).count();
        assert_eq!(cross, 3);
        assert!((g.lanelets[2].poses[0].theta - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn feature_block_is_padded_with_mask() {
        let g = build_lane_graph(&[straight(50.0)]);
        let block = g.feature_block(&Pose2D::ORIGIN, None);
        assert_eq!((block.n_lane, block.l), (3, 21));
        assert_eq!(block.lengths(), vec![21, 21, 11]);
        assert!(block.pose(2, 15).iter().all(|&v| v == 0.0));
        assert!(!block.mask[2 * 21 + 15]);
        let f = block.pose(0, 3);
        assert_eq!(f, &[3.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn local_subgraph_relinks_and_transforms() {
        let g = build_lane_graph(&[straight(50.0)]);
        let origin = Pose2D::new(20.0, 0.0, std::f64::consts::FRAC_PI_2);
        let sub = g.local_subgraph(&[1, 2], &origin);
        assert_eq!(sub.n_lane(), 2);
        assert_eq!(sub.lanelets[0].successors, vec![1]);
        assert!(sub.lanelets[0].predecessors.is_empty());
        let p = sub.lanelets[0].poses[5];
        assert!((p.x - 0.0).abs() < 1e-12 && (p.y + 5.0).abs() < 1e-12);
        assert!((p.theta + std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        let r = sub.rotated(std::f64::consts::FRAC_PI_2);
        let q = r.lanelets[0].poses[5];
        assert!((q.x - 5.0).abs() < 1e-12 && q.y.abs() < 1e-12 && q.theta.abs() < 1e-12);
    }

    #[test]
    fn serde_round_trip_rebuilds_graph() {
        let mut a = straight(42.0);
        a.successors = vec![1];
        let g = build_lane_graph(&[a, straight(7.0)]);
        let s = serde_json::to_string(&g).unwrap();
        let back: LaneGraph = serde_json::from_str(&s).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn lanelets_near_query() {
        let g = build_lane_graph(&[straight(50.0)]);
        assert_eq!(g.lanelets_near(&[[5.0, 3.0]], 4.0), vec![0]);
        assert_eq!(g.lanelets_near(&[[20.0, 0.5]], 1.0), vec![0, 1]);
        assert!(g.lanelets_near(&[[0.0, 100.0]], 10.0).is_empty());
    }

    proptest! {
        #[test]
        fn arc_length_is_conserved(
            pts in prop::collection::vec((-80.0f64..80.0, -80.0f64..80.0), 2..8),
        ) {
            let lane = LanePolyline::new(pts.into_iter().map(|(x, y)| [x, y]).collect());
            let total = lane.length();
            prop_assume!(total > 1.0);
            let g = build_lane_graph(&[lane]);
            let sum: f64 = g.lanelets.iter().map(|l| l.length).sum();
            prop_assert!((sum - total).abs() <= 0.01 * total);
            for ll in &g.lanelets {
                prop_assert!(ll.length <= LANELET_MAX_LENGTH + 1e-9);
                let n_end = ll.poses.iter().filter(|p| p.end).count();
                prop_assert!(n_end <= 1);
                if n_end == 1 {
                    prop_assert!(ll.poses.last().unwrap().end);
                }
            }
        }

        #[test]
        fn arc_spacing_is_one_meter(radius in 15.0f64..200.0, sweep in 0.3f64..3.0) {
            let n = 200;
            let pts: Vec<[f64; 2]> = (0..=n)
                .map(|i| {
                    let a = sweep * i as f64 / n as f64;
                    [radius * a.cos(), radius * a.sin()]
                })
                .collect();
            let g = build_lane_graph(&[LanePolyline::new(pts)]);
            for ll in &g.lanelets {
                for w in ll.poses.windows(2) {
                    let d = (w[1].x - w[0].x).hypot(w[1].y - w[0].y);
                    prop_assert!((d - 1.0).abs() <= 0.1, "spacing {}", d);
                }
            }
        }
    }
}
