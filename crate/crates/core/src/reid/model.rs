//! Motion and map affinity networks.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::input::{InputConfig, ReidInput};
use crate::error::{Error, Result};
use crate::geometry::Pose2D;
use crate::lanes::{LaneGraph, LANE_FEATURE_WIDTH};
use crate::nn::{
    radius_edges, Activation, AttentionBlock, Bound, Checkpoint, GruCell, Mlp, ParamStore, SpatialAttention, Tape,
    Tensor, Ugru, Var,
};
use crate::tracklet::{Tracklet, FEATURE_WIDTH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Motion,
    Map,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Motion => "motion",
            Branch::Map => "map",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReidConfig {
    pub hidden: usize,
    /// Width of the lane-side layers of the map branch.
    pub lane_hidden: usize,
    /// Radius of the agent/lane spatial attention layers, meters.
    pub radius: f64,
    pub input: InputConfig,
}

impl Default for ReidConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            lane_hidden: 16,
            radius: 10.0,
            input: InputConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
struct MapLayers {
    lane_mlp: Mlp,
    agent_to_lane: SpatialAttention,
    lane_fwd: GruCell,
    lane_bwd: GruCell,
    lane_top: GruCell,
    global: AttentionBlock,
    lane_to_agent: SpatialAttention,
}

/// One Re-ID branch with its parameters.
#[derive(Debug, Clone)]
pub struct ReidNet {
    pub branch: Branch,
    pub cfg: ReidConfig,
    pub store: ParamStore,
    history_enc: GruCell,
    future_enc: Ugru,
    head: Mlp,
    map: Option<MapLayers>,
}

/// Scores for the candidates of one history. `fallback` is set when the map
/// branch had no lanes and ran on tracklet encodings alone.
#[derive(Debug, Clone, PartialEq)]
pub struct Affinities {
    pub scores: Vec<f64>,
    pub fallback: bool,
}

impl ReidNet {
    pub fn new(branch: Branch, cfg: ReidConfig, seed: u64) -> Result<Self> {
        if cfg.hidden == 0 || cfg.lane_hidden == 0 || !(cfg.radius >= 0.0) {
            return Err(Error::Invalid("reid hidden size must be positive and radius non-negative".into()));
        }
        let h = cfg.hidden;
        let lh = cfg.lane_hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let history_enc = GruCell::new(&mut s, "history", FEATURE_WIDTH, h, &mut rng)?;
        let future_enc = Ugru::new(&mut s, "future", FEATURE_WIDTH, h, &mut rng)?;
        let map = match branch {
            Branch::Motion => None,
            Branch::Map => Some(MapLayers {
                lane_mlp: Mlp::new(&mut s, "lane_mlp", &[LANE_FEATURE_WIDTH, lh, lh], Activation::Relu, Activation::Relu, &mut rng)?,
                agent_to_lane: SpatialAttention::new(&mut s, "a2l", lh, h, lh, cfg.radius, &mut rng)?,
                lane_fwd: GruCell::new(&mut s, "lane_gru.fwd", lh, lh, &mut rng)?,
                lane_bwd: GruCell::new(&mut s, "lane_gru.bwd", lh, lh, &mut rng)?,
                lane_top: GruCell::new(&mut s, "lane_gru.top", 2 * lh, lh, &mut rng)?,
                global: AttentionBlock::new(&mut s, "global", lh, lh, lh, &mut rng)?,
                lane_to_agent: SpatialAttention::new(&mut s, "l2a", h, lh, h, cfg.radius, &mut rng)?,
            }),
        };
        let head = Mlp::new(&mut s, "head", &[2 * h, h, 1], Activation::Relu, Activation::Identity, &mut rng)?;
        Ok(Self {
            branch,
            cfg,
            store: s,
            history_enc,
            future_enc,
            head,
            map,
        })
    }

    /// Candidate affinities in `[0, 1]` as a `B x 1` variable, plus the
    /// fallback flag.
    pub fn forward(&self, t: &mut Tape, p: &Bound, inp: &ReidInput) -> (Var, bool) {
        let (z, fallback) = self.logits(t, p, inp);
        (t.sigmoid(z), fallback)
    }

    /// Pre-sigmoid affinities, `B x 1`.
    pub fn logits(&self, t: &mut Tape, p: &Bound, inp: &ReidInput) -> (Var, bool) {
        let h = self.cfg.hidden;
        let b = inp.n_candidates();
        let h0 = t.constant(Tensor::zeros(1, h));
        let hx: Vec<Var> = (0..inp.history.rows())
            .map(|i| t.constant(Tensor::row_vector(inp.history.row(i))))
            .collect();
        let hist_states = self.history_enc.run(t, p, &hx, h0, None, false);
        let h_hist = *hist_states.last().expect("history is non-empty");
        if b == 0 {
            return (t.constant(Tensor::zeros(0, 1)), false);
        }
        let xs: Vec<Var> = inp.candidates.steps.iter().map(|s| t.constant(s.clone())).collect();
        let h_init = t.broadcast_row(h_hist, b);
        let (fut_states, fut_final) = self.future_enc.encode(t, p, &xs, h_init, Some(&inp.candidates.masks));

        let (hist_enc, cand_enc, fallback) = match (&self.map, &inp.lanes) {
            (None, _) => (h_hist, fut_final, false),
            (Some(_), None) => (h_hist, fut_final, true),
            (Some(m), Some(lanes)) => {
                let agents = self.map_context(t, p, m, inp, lanes, (&hist_states, h_hist), (&fut_states, fut_final));
                let hist = t.row(agents, 0);
                let cands = t.gather_rows(agents, (1..=b).map(Some).collect());
                (hist, cands, false)
            }
        };
        let hb = t.broadcast_row(hist_enc, b);
        let feat = t.concat_cols(&[hb, cand_enc]);
        (self.head.forward(t, p, feat), fallback)
    }

    /// Map pipeline: agent poses inform lane poses, lanelets are summarized
    /// by a GRU stack and a global attention pass, and the result flows back
    /// onto the tracklet encodings. Returns `(1 + B) x H` agent encodings.
    #[allow(clippy::too_many_arguments)]
    fn map_context(
        &self,
        t: &mut Tape,
        p: &Bound,
        m: &MapLayers,
        inp: &ReidInput,
        lanes: &super::input::LaneInput,
        hist: (&[Var], Var),
        fut: (&[Var], Var),
    ) -> Var {
        let lh = self.cfg.lane_hidden;
        let b = inp.n_candidates();
        // per-pose agent nodes: every history state and every valid candidate step
        let mut agent_rows = vec![t.concat_rows(hist.0)];
        let mut agent_pos = inp.history_pos.clone();
        for (k, s) in fut.0.iter().enumerate() {
            let mask = &inp.candidates.masks[k];
            let idx: Vec<Option<usize>> = mask.iter().enumerate().filter_map(|(i, &v)| v.then_some(Some(i))).collect();
            if idx.len() == b {
                agent_rows.push(*s);
            } else {
                agent_rows.push(t.gather_rows(*s, idx));
            }
            agent_pos.extend_from_slice(&inp.candidates.pos[k]);
        }
        let agents = t.concat_rows(&agent_rows);

        let lf = t.constant(lanes.pose_features.clone());
        let lane_poses = m.lane_mlp.forward(t, p, lf);
        let edges = radius_edges(&lanes.pose_pos, &agent_pos, self.cfg.radius);
        let lane_poses = m.agent_to_lane.forward(t, p, lane_poses, agents, &edges);

        let xs: Vec<Var> = lanes.seq_index.iter().map(|idx| t.gather_rows(lane_poses, idx.clone())).collect();
        let z = t.constant(Tensor::zeros(lanes.n_lane, lh));
        let f = m.lane_fwd.run(t, p, &xs, z, Some(&lanes.seq_masks), false);
        let r = m.lane_bwd.run(t, p, &xs, z, Some(&lanes.seq_masks), true);
        let both: Vec<Var> = f.iter().zip(&r).map(|(&a, &c)| t.concat_cols(&[a, c])).collect();
        let top = m.lane_top.run(t, p, &both, z, Some(&lanes.seq_masks), false);
        let lanelets = *top.last().expect("lanelets have poses");
        let lanelets = m.global.forward(t, p, lanelets, lanelets, None);

        let src = t.gather_rows(lanelets, lanes.owner.iter().map(|&o| Some(o)).collect());
        let dst = {
            let cands = fut.1;
            t.concat_rows(&[hist.1, cands])
        };
        let mut dst_pos = vec![*inp.history_pos.last().expect("history is non-empty")];
        dst_pos.extend_from_slice(&inp.candidates.pos[0]);
        let edges = radius_edges(&dst_pos, &lanes.pose_pos, self.cfg.radius);
        m.lane_to_agent.forward(t, p, dst, src, &edges)
    }

    /// Inference on prepared inputs with frozen parameters.
    pub fn affinities(&self, inp: &ReidInput) -> Affinities {
        let mut t = Tape::new();
        let p = self.store.bind_frozen(&mut t);
        let (out, fallback) = self.forward(&mut t, &p, inp);
        Affinities {
            scores: t.value(out).data().to_vec(),
            fallback,
        }
    }

    /// Prepares inputs in the frame of the history's last observation and
    /// scores every candidate.
    pub fn score(&self, history: &Tracklet, futures: &[&Tracklet], graph: Option<&LaneGraph>) -> Result<Affinities> {
        let origin: Pose2D = history
            .obs
            .last()
            .ok_or_else(|| Error::Empty(format!("history {}", history.id)))?
            .pose();
        let graph = if self.branch == Branch::Map { graph } else { None };
        let inp = ReidInput::new(history, futures, graph, &origin, &self.cfg.input)?;
        Ok(self.affinities(&inp))
    }

    pub fn checkpoint(&self, mut metadata: BTreeMap<String, serde_json::Value>) -> Result<Checkpoint> {
        metadata.insert("model".into(), format!("reid-{}", self.branch.name()).into());
        metadata.insert("reid_config".into(), serde_json::to_value(&self.cfg)?);
        Ok(self.store.to_checkpoint(metadata))
    }

    /// Rebuilds a network from a checkpoint written by [`ReidNet::checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let branch = match ckpt.meta_str("model") {
            Some("reid-motion") => Branch::Motion,
            Some("reid-map") => Branch::Map,
            other => return Err(Error::Schema(format!("checkpoint model {other:?} is not a Re-ID branch"))),
        };
        let cfg: ReidConfig = match ckpt.metadata.get("reid_config") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => return Err(Error::Schema("checkpoint lacks reid_config".into())),
        };
        let mut net = Self::new(branch, cfg, 0)?;
        net.store.load_checkpoint(ckpt)?;
        Ok(net)
    }
}

/// Motion-branch affinities of `futures` for `history`. Tracklets may be in
/// any common frame; they are re-expressed relative to the history's end.
pub fn motion_affinity(net: &ReidNet, history: &Tracklet, futures: &[&Tracklet]) -> Result<Vec<f64>> {
    if net.branch != Branch::Motion {
        return Err(Error::Invalid("motion_affinity needs a motion-branch network".into()));
    }
    Ok(net.score(history, futures, None)?.scores)
}

/// Map-branch affinities. An empty graph yields scores from the tracklet
/// encoders alone with `fallback` set.
pub fn map_affinity(net: &ReidNet, history: &Tracklet, futures: &[&Tracklet], graph: &LaneGraph) -> Result<Affinities> {
    if net.branch != Branch::Map {
        return Err(Error::Invalid("map_affinity needs a map-branch network".into()));
    }
    net.score(history, futures, Some(graph))
}
