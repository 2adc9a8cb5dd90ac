//! Gap-completion network: time-query decoding of the hidden segment and
//! an optional lane-aware refinement stage.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angle_diff, from_local, to_local, wrap, Pose2D};
use crate::lanes::{LaneGraph, LANE_FEATURE_WIDTH};
use crate::nn::losses::{coord_loss_var, yaw_loss_var, COORD_WEIGHT, YAW_WEIGHT};
use crate::nn::{
    radius_edges, Activation, AttentionBlock, Bound, Checkpoint, GruCell, Linear, Mlp, ParamStore, SpatialAttention,
    Tape, Tensor, Ugru, Var,
};
use crate::reid::input::{crop_head, crop_tail, scaled_features, LaneInput, POS_SCALE, TIME_SCALE};
use crate::tracklet::{tracklet_in_frame, Tracklet, FEATURE_WIDTH_NO_VELOCITY};

/// Query for one missing timestamp: `t` seconds after the history ends,
/// `t_norm = t / T` with `T` the full gap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeQuery {
    pub t: f64,
    pub t_norm: f64,
}

/// One query per missing sample time of a `gap`-second gap at `rate` Hz.
pub fn make_time_queries(gap: f64, rate: f64) -> Vec<TimeQuery> {
    if !(gap > 0.0 && rate > 0.0) {
        return Vec::new();
    }
    let n = (gap * rate).round() as i64 - 1;
    (1..=n.max(0))
        .map(|k| {
            let t = k as f64 / rate;
            TimeQuery { t, t_norm: t / gap }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Decoder only.
    Motion,
    /// Decoder followed by lane-aware refinement.
    MotionMap,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Motion => "motion",
            Variant::MotionMap => "motion_map",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompletionConfig {
    pub hidden: usize,
    pub lane_hidden: usize,
    /// Lane-to-trajectory attention radius, meters.
    pub radius: f64,
    pub history_window: f64,
    pub future_window: f64,
    /// Lanelets within this distance of the straight-line gap or the
    /// endpoint tracklets are used for refinement.
    pub lane_crop_radius: f64,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            lane_hidden: 16,
            radius: 10.0,
            history_window: 2.0,
            future_window: 2.0,
            lane_crop_radius: 15.0,
        }
    }
}

/// Prepared decoder and refiner inputs in the gap frame: origin at the
/// midpoint of the two gap endpoints, x axis from the history end towards
/// the future start.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionInput {
    /// Gap frame expressed in the input coordinates.
    pub frame: Pose2D,
    pub history: Tensor,
    pub future: Tensor,
    pub queries: Vec<TimeQuery>,
    /// Linear interpolation of the gap, in the gap frame.
    pub anchor: Vec<Pose2D>,
    pub lanes: Option<LaneInput>,
}

impl CompletionInput {
    pub fn new(
        history: &Tracklet,
        future: &Tracklet,
        graph: Option<&LaneGraph>,
        rate: f64,
        cfg: &CompletionConfig,
    ) -> Result<Self> {
        if history.obs.is_empty() || future.obs.is_empty() {
            return Err(Error::Empty("completion endpoints".into()));
        }
        let (a, b) = (history.last(), future.first());
        let gap = b.t - a.t;
        if gap <= 0.0 {
            return Err(Error::Invalid(format!(
                "future {} starts at {} before history {} ends at {}",
                future.id, b.t, history.id, a.t
            )));
        }
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        let heading = if dx.hypot(dy) > 1e-6 { dy.atan2(dx) } else { a.theta };
        let frame = Pose2D::new(0.5 * (a.x + b.x), 0.5 * (a.y + b.y), heading);

        let h = crop_tail(history, cfg.history_window);
        let f = crop_head(future, cfg.future_window);
        let lanes = match graph {
            Some(g) => {
                let mut pts: Vec<[f64; 2]> = h.obs.iter().chain(&f.obs).map(|o| [o.x, o.y]).collect();
                let n = (dx.hypot(dy) / 2.0).ceil() as usize + 1;
                pts.extend((0..=n).map(|k| {
                    let u = k as f64 / n as f64;
                    [a.x + u * dx, a.y + u * dy]
                }));
                let ids = g.lanelets_near(&pts, cfg.lane_crop_radius);
                LaneInput::new(&g.local_subgraph(&ids, &frame))
            }
            None => None,
        };
        let h = tracklet_in_frame(&h, &frame);
        let f = tracklet_in_frame(&f, &frame);
        let (pa, pb) = (h.last().pose(), f.first().pose());
        let queries = make_time_queries(gap, rate);
        let dth = angle_diff(pb.theta, pa.theta);
        let anchor = queries
            .iter()
            .map(|q| {
                let u = q.t_norm;
                Pose2D::new(pa.x + u * (pb.x - pa.x), pa.y + u * (pb.y - pa.y), wrap(pa.theta + u * dth))
            })
            .collect();
        Ok(Self {
            frame,
            history: scaled_features(&h, a.t, false)?,
            future: scaled_features(&f, a.t, false)?,
            queries,
            anchor,
            lanes,
        })
    }

    /// Converts gap-frame poses back to the input coordinates.
    pub fn to_input_frame(&self, poses: &[Pose2D]) -> Vec<Pose2D> {
        poses.iter().map(|p| from_local(p, &self.frame)).collect()
    }

    /// Converts input-coordinate poses into the gap frame.
    pub fn to_gap_frame(&self, poses: &[Pose2D]) -> Vec<Pose2D> {
        poses.iter().map(|p| to_local(p, &self.frame)).collect()
    }
}

/// Decoder output on the tape: positions (`n x 2`, meters) and yaw
/// (`n x 1`) in the gap frame, plus per-query features for refinement.
#[derive(Debug, Clone, Copy)]
pub struct Trajectory {
    pub xy: Var,
    pub yaw: Var,
    pub features: Var,
}

#[derive(Debug, Clone)]
struct Refiner {
    point_in: Linear,
    pose_in: Linear,
    lane_mlp: Mlp,
    lane_to_point: SpatialAttention,
    self_attn: AttentionBlock,
    fwd: GruCell,
    bwd: GruCell,
    delta: Mlp,
}

#[derive(Debug, Clone)]
pub struct CompletionNet {
    pub variant: Variant,
    pub cfg: CompletionConfig,
    pub store: ParamStore,
    hist_gru: GruCell,
    fut_gru: GruCell,
    hist_ugru: Ugru,
    fut_ugru: Ugru,
    query_mlp: Mlp,
    cross: AttentionBlock,
    xy_head: Mlp,
    yaw_head: Mlp,
    refiner: Option<Refiner>,
}

/// Meters per unit of refinement offset.
const DELTA_SCALE: f64 = 5.0;

impl CompletionNet {
    pub fn new(variant: Variant, cfg: CompletionConfig, seed: u64) -> Result<Self> {
        if cfg.hidden == 0 || cfg.lane_hidden == 0 || !(cfg.radius >= 0.0) {
            return Err(Error::Invalid("completion widths must be positive and radius non-negative".into()));
        }
        let (h, lh) = (cfg.hidden, cfg.lane_hidden);
        let w = FEATURE_WIDTH_NO_VELOCITY;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let r = &mut rng;
        let hist_gru = GruCell::new(&mut s, "hist_gru", w, h, r)?;
        let fut_gru = GruCell::new(&mut s, "fut_gru", w, h, r)?;
        let hist_ugru = Ugru::new(&mut s, "hist_ugru", w, h, r)?;
        let fut_ugru = Ugru::new(&mut s, "fut_ugru", w, h, r)?;
        let query_mlp = Mlp::new(&mut s, "query_mlp", &[2, h, h], Activation::Relu, Activation::Identity, r)?;
        let cross = AttentionBlock::new(&mut s, "cross", h, h, h, r)?;
        let xy_head = Mlp::new(&mut s, "xy_head", &[4 * h, h, 2], Activation::Relu, Activation::Identity, r)?;
        let yaw_head = Mlp::new(&mut s, "yaw_head", &[4 * h, h, 1], Activation::Relu, Activation::Identity, r)?;
        let refiner = match variant {
            Variant::Motion => None,
            Variant::MotionMap => Some(Refiner {
                point_in: Linear::new(&mut s, "refine.point_in", 4 * h, h, true, r)?,
                pose_in: Linear::new(&mut s, "refine.pose_in", 3, h, false, r)?,
                lane_mlp: Mlp::new(&mut s, "refine.lane_mlp", &[LANE_FEATURE_WIDTH, lh, lh], Activation::Relu, Activation::Relu, r)?,
                lane_to_point: SpatialAttention::new(&mut s, "refine.l2p", h, lh, h, cfg.radius, r)?,
                self_attn: AttentionBlock::new(&mut s, "refine.self", h, h, h, r)?,
                fwd: GruCell::new(&mut s, "refine.gru_fwd", h, h, r)?,
                bwd: GruCell::new(&mut s, "refine.gru_bwd", h, h, r)?,
                delta: Mlp::new(&mut s, "refine.delta", &[2 * h, h, 3], Activation::Relu, Activation::Identity, r)?,
            }),
        };
        Ok(Self {
            variant,
            cfg,
            store: s,
            hist_gru,
            fut_gru,
            hist_ugru,
            fut_ugru,
            query_mlp,
            cross,
            xy_head,
            yaw_head,
            refiner,
        })
    }

    fn rows(t: &mut Tape, m: &Tensor) -> Vec<Var> {
        (0..m.rows()).map(|i| t.constant(Tensor::row_vector(m.row(i)))).collect()
    }

    /// Initial trajectory for the queries of `inp`. `None` when there are no
    /// queries.
    pub fn decode(&self, t: &mut Tape, p: &Bound, inp: &CompletionInput) -> Option<Trajectory> {
        let n = inp.queries.len();
        if n == 0 {
            return None;
        }
        let h = self.cfg.hidden;
        let z = t.constant(Tensor::zeros(1, h));
        let hx = Self::rows(t, &inp.history);
        let fx = Self::rows(t, &inp.future);
        let g_h = *self.hist_gru.run(t, p, &hx, z, None, false).last().expect("history rows");
        let g_f = *self.fut_gru.run(t, p, &fx, z, None, false).last().expect("future rows");
        // each side's UGRU starts from the other side's GRU summary
        let (s_h, u_h) = self.hist_ugru.encode(t, p, &hx, g_f, None);
        let (s_f, u_f) = self.fut_ugru.encode(t, p, &fx, g_h, None);
        let keys: Vec<Var> = s_h.into_iter().chain(s_f).collect();
        let keys = t.concat_rows(&keys);

        let qf = Tensor::from_vec(
            n,
            2,
            inp.queries.iter().flat_map(|q| [q.t / TIME_SCALE, q.t_norm]).collect(),
        )
        .expect("two columns");
        let qf = t.constant(qf);
        let q = self.query_mlp.forward(t, p, qf);
        let a = self.cross.forward(t, p, q, keys, None);
        let ctx = t.concat_cols(&[u_h, u_f]);
        let ctx = t.broadcast_row(ctx, n);
        let feat = t.concat_cols(&[a, q, ctx]);

        let anchor_xy = t.constant(
            Tensor::from_vec(n, 2, inp.anchor.iter().flat_map(|p| [p.x, p.y]).collect()).expect("two columns"),
        );
        let anchor_yaw =
            t.constant(Tensor::from_vec(n, 1, inp.anchor.iter().map(|p| p.theta).collect()).expect("one column"));
        let dxy = self.xy_head.forward(t, p, feat);
        let dxy = t.scale(dxy, POS_SCALE);
        let xy = t.add(anchor_xy, dxy);
        let dyaw = self.yaw_head.forward(t, p, feat);
        let yaw = t.add(anchor_yaw, dyaw);
        Some(Trajectory { xy, yaw, features: feat })
    }

    /// Lane-aware refinement of a decoded trajectory. Returns the input
    /// unchanged, with the flag set, when there are no lanes or no
    /// refinement layers.
    pub fn refine(&self, t: &mut Tape, p: &Bound, init: Trajectory, inp: &CompletionInput) -> (Trajectory, bool) {
        let (Some(r), Some(lanes)) = (&self.refiner, &inp.lanes) else {
            return (init, true);
        };
        let n = t.shape(init.xy).0;
        let xy_s = t.scale(init.xy, 1.0 / POS_SCALE);
        let pose = t.concat_cols(&[xy_s, init.yaw]);
        let a = r.point_in.forward(t, p, init.features);
        let b = r.pose_in.forward(t, p, pose);
        let pts = t.add(a, b);

        let lf = t.constant(lanes.pose_features.clone());
        let lane = r.lane_mlp.forward(t, p, lf);
        let pos: Vec<[f64; 2]> = t.value(init.xy).data().chunks(2).map(|c| [c[0], c[1]]).collect();
        let edges = radius_edges(&pos, &lanes.pose_pos, self.cfg.radius);
        let pts = r.lane_to_point.forward_moving(t, p, pts, init.xy, lane, &lanes.pose_pos, &edges);
        let pts = r.self_attn.forward(t, p, pts, pts, None);

        let xs: Vec<Var> = (0..n).map(|i| t.row(pts, i)).collect();
        let z = t.constant(Tensor::zeros(1, self.cfg.hidden));
        let f = r.fwd.run(t, p, &xs, z, None, false);
        let bw = r.bwd.run(t, p, &xs, z, None, true);
        let f = t.concat_rows(&f);
        let bw = t.concat_rows(&bw);
        let seq = t.concat_cols(&[f, bw]);
        let d = r.delta.forward(t, p, seq);
        let dxy = t.slice_cols(d, 0, 2);
        let dxy = t.scale(dxy, DELTA_SCALE);
        let dyaw = t.slice_cols(d, 2, 1);
        (
            Trajectory {
                xy: t.add(init.xy, dxy),
                yaw: t.add(init.yaw, dyaw),
                features: seq,
            },
            false,
        )
    }

    /// Both heads' outputs: the decoded trajectory and, for the map variant,
    /// the refined one.
    pub fn forward(&self, t: &mut Tape, p: &Bound, inp: &CompletionInput) -> Option<(Trajectory, Option<Trajectory>)> {
        let init = self.decode(t, p, inp)?;
        let refined = match self.variant {
            Variant::Motion => None,
            Variant::MotionMap => Some(self.refine(t, p, init, inp).0),
        };
        Some((init, refined))
    }

    /// Final poses in the gap frame and whether refinement was skipped
    /// because no lanes were available.
    pub fn predict(&self, inp: &CompletionInput) -> (Vec<Pose2D>, bool) {
        let mut t = Tape::new();
        let p = self.store.bind_frozen(&mut t);
        let Some(init) = self.decode(&mut t, &p, inp) else {
            return (Vec::new(), false);
        };
        let (out, skipped) = match self.variant {
            Variant::Motion => (init, false),
            Variant::MotionMap => self.refine(&mut t, &p, init, inp),
        };
        (poses_of(&t, out), skipped)
    }

    pub fn checkpoint(&self, mut metadata: BTreeMap<String, serde_json::Value>) -> Result<Checkpoint> {
        metadata.insert("model".into(), format!("completion-{}", self.variant.name()).into());
        metadata.insert("completion_config".into(), serde_json::to_value(&self.cfg)?);
        Ok(self.store.to_checkpoint(metadata))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let variant = match ckpt.meta_str("model") {
            Some("completion-motion") => Variant::Motion,
            Some("completion-motion_map") => Variant::MotionMap,
            other => return Err(Error::Schema(format!("checkpoint model {other:?} is not a completion network"))),
        };
        let cfg: CompletionConfig = match ckpt.metadata.get("completion_config") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => return Err(Error::Schema("checkpoint lacks completion_config".into())),
        };
        let mut net = Self::new(variant, cfg, 0)?;
        net.store.load_checkpoint(ckpt)?;
        Ok(net)
    }
}

fn poses_of(t: &Tape, tr: Trajectory) -> Vec<Pose2D> {
    let xy = t.value(tr.xy);
    let yaw = t.value(tr.yaw);
    (0..xy.rows())
        .map(|i| Pose2D::new(xy.get(i, 0), xy.get(i, 1), wrap(yaw.get(i, 0))))
        .collect()
}

/// Initial trajectory in the input coordinates of `history` and `future`.
pub fn decode_initial_trajectory(
    net: &CompletionNet,
    history: &Tracklet,
    future: &Tracklet,
    rate: f64,
) -> Result<Vec<Pose2D>> {
    let inp = CompletionInput::new(history, future, None, rate, &net.cfg)?;
    let mut t = Tape::new();
    let p = net.store.bind_frozen(&mut t);
    Ok(match net.decode(&mut t, &p, &inp) {
        Some(tr) => inp.to_input_frame(&poses_of(&t, tr)),
        None => Vec::new(),
    })
}

/// Refinement of `initial` (input coordinates) against `graph`. Returns the
/// poses and a flag that is set when the graph offered no lanes, in which
/// case the initial poses come back unchanged.
pub fn refine_trajectory(
    net: &CompletionNet,
    history: &Tracklet,
    future: &Tracklet,
    initial: &[Pose2D],
    graph: &LaneGraph,
    rate: f64,
) -> Result<(Vec<Pose2D>, bool)> {
    let inp = CompletionInput::new(history, future, Some(graph), rate, &net.cfg)?;
    if initial.len() != inp.queries.len() {
        return Err(Error::Shape {
            op: "refine_trajectory",
            lhs: (initial.len(), 3),
            rhs: (inp.queries.len(), 3),
        });
    }
    if net.refiner.is_none() || inp.lanes.is_none() {
        return Ok((initial.to_vec(), true));
    }
    let mut t = Tape::new();
    let p = net.store.bind_frozen(&mut t);
    let init = net.decode(&mut t, &p, &inp).expect("queries checked above");
    // replace the decoded poses by the given ones, keeping query features
    let local = inp.to_gap_frame(initial);
    let n = local.len();
    let xy = t.constant(Tensor::from_vec(n, 2, local.iter().flat_map(|q| [q.x, q.y]).collect())?);
    let yaw = t.constant(Tensor::from_vec(n, 1, local.iter().map(|q| q.theta).collect())?);
    let (out, skipped) = net.refine(&mut t, &p, Trajectory { xy, yaw, ..init }, &inp);
    Ok((inp.to_input_frame(&poses_of(&t, out)), skipped))
}

/// Weighted coordinate and yaw loss of one head against gap-frame truth.
pub fn head_loss(t: &mut Tape, tr: Trajectory, gt: &[Pose2D]) -> Var {
    let xy: Vec<[f64; 2]> = gt.iter().map(|p| [p.x, p.y]).collect();
    let yaw: Vec<f64> = gt.iter().map(|p| p.theta).collect();
    let c = coord_loss_var(t, tr.xy, &xy);
    let y = yaw_loss_var(t, tr.yaw, &yaw);
    let c = t.scale(c, COORD_WEIGHT);
    let y = t.scale(y, YAW_WEIGHT);
    t.add(c, y)
}

/// Training loss: the sum of [`head_loss`] over every head the network
/// has. `gt` is in the gap frame.
pub fn completion_loss_var(
    net: &CompletionNet,
    t: &mut Tape,
    p: &Bound,
    inp: &CompletionInput,
    gt: &[Pose2D],
) -> Result<Var> {
    if gt.len() != inp.queries.len() {
        return Err(Error::Shape {
            op: "completion_loss",
            lhs: (inp.queries.len(), 3),
            rhs: (gt.len(), 3),
        });
    }
    let (init, refined) = net
        .forward(t, p, inp)
        .ok_or_else(|| Error::Empty("completion queries".into()))?;
    let mut l = head_loss(t, init, gt);
    if let Some(r) = refined {
        let lr = head_loss(t, r, gt);
        l = t.add(l, lr);
    }
    Ok(l)
}

/// Scalar loss over any number of prediction heads against the same truth.
pub fn completion_loss(preds: &[&[Pose2D]], gt: &[Pose2D]) -> Result<f64> {
    use crate::nn::losses::{coord_loss, yaw_loss};
    let gxy: Vec<[f64; 2]> = gt.iter().map(|p| [p.x, p.y]).collect();
    let gyaw: Vec<f64> = gt.iter().map(|p| p.theta).collect();
    let mut total = 0.0;
    for pred in preds {
        let pxy: Vec<[f64; 2]> = pred.iter().map(|p| [p.x, p.y]).collect();
        let pyaw: Vec<f64> = pred.iter().map(|p| p.theta).collect();
        total += COORD_WEIGHT * coord_loss(&pxy, &gxy)? + YAW_WEIGHT * yaw_loss(&pyaw, &gyaw)?;
    }
    Ok(total)
}
