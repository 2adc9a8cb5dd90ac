//! Scene-level inference: association of fragments, chaining and gap
//! completion.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::completion::{complete_track, CompletionNet, GapPolicy};
use crate::error::Result;
use crate::lanes::LaneGraph;
use crate::reid::{build_score_matrix, greedy_match, AssociationConfig, ReidNet};
use crate::tracklet::{PoseSource, TrackId, Tracklet};

/// Trained networks used by inference.
pub struct Models<'a> {
    pub motion: &'a ReidNet,
    pub map: &'a ReidNet,
    /// `None` fills every gap linearly.
    pub completion: Option<&'a CompletionNet>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferStats {
    pub tracklets_in: usize,
    pub tracks_out: usize,
    pub matches: usize,
    pub model_gaps: usize,
    pub linear_gaps: usize,
    pub recovered_poses: usize,
}

impl InferStats {
    pub fn add(&mut self, o: &InferStats) {
        self.tracklets_in += o.tracklets_in;
        self.tracks_out += o.tracks_out;
        self.matches += o.matches;
        self.model_gaps += o.model_gaps;
        self.linear_gaps += o.linear_gaps;
        self.recovered_poses += o.recovered_poses;
    }
}

/// Associates and completes the tracklets of one scene. Matched chains
/// take the id of their first tracklet; observed poses are flagged
/// `Observed` and recovered ones by their source. Output is sorted by id.
pub fn infer_scene(
    tracklets: &[Tracklet],
    graph: &LaneGraph,
    rate: f64,
    models: &Models,
    assoc: &AssociationConfig,
    gap: &GapPolicy,
) -> Result<(Vec<Tracklet>, InferStats)> {
    let mut input: Vec<Tracklet> = tracklets.to_vec();
    input.sort_by_key(|t| t.id);
    for t in &mut input {
        for o in &mut t.obs {
            o.source.get_or_insert(PoseSource::Observed);
        }
    }
    let scores = build_score_matrix(&input, &input, graph, models.motion, models.map, assoc)?;
    let pairs = greedy_match(&scores);
    let next: BTreeMap<TrackId, TrackId> = pairs.iter().copied().collect();
    let is_future: std::collections::BTreeSet<TrackId> = pairs.iter().map(|p| p.1).collect();
    let by_id: BTreeMap<TrackId, &Tracklet> = input.iter().map(|t| (t.id, t)).collect();

    let mut stats = InferStats {
        tracklets_in: input.len(),
        matches: pairs.len(),
        ..InferStats::default()
    };
    let mut out = Vec::new();
    for start in input.iter().filter(|t| !is_future.contains(&t.id)) {
        let mut merged = start.clone();
        let mut cur = start.id;
        while let Some(&nid) = next.get(&cur) {
            let fut = by_id[&nid];
            let c = complete_track(&merged, fut, Some(graph), models.completion, gap, rate)?;
            match c.source {
                PoseSource::Model => stats.model_gaps += 1,
                _ => stats.linear_gaps += 1,
            }
            stats.recovered_poses += c.obs.len();
            merged = c.merge(&merged, fut)?;
            cur = nid;
        }
        out.push(merged);
    }
    stats.tracks_out = out.len();
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reid::{Branch, ReidConfig};
    use crate::tracklet::test_util::straight;

    #[test]
    fn unmatched_tracklets_pass_through() {
        let motion = ReidNet::new(Branch::Motion, ReidConfig { hidden: 4, ..Default::default() }, 0).unwrap();
        let map = ReidNet::new(Branch::Map, ReidConfig { hidden: 4, lane_hidden: 3, ..Default::default() }, 0).unwrap();
        let models = Models { motion: &motion, map: &map, completion: None };
        let a = straight(2, 0.0, 6, 0.0, 5.0);
        let b = straight(1, 0.0, 6, 0.0, 5.0);
        // threshold above any probability: nothing is associated
        let assoc = AssociationConfig { threshold: 1.1, ..Default::default() };
        let (out, st) = infer_scene(&[a.clone(), b.clone()], &LaneGraph::default(), 2.0, &models, &assoc, &GapPolicy::default()).unwrap();
        assert_eq!(st.matches, 0);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].id, TrackId(1));
        assert_eq!(out[1].obs.len(), a.obs.len());
        assert!(out.iter().flat_map(|t| &t.obs).all(|o| o.source == Some(PoseSource::Observed)));
    }

    #[test]
    fn matched_pair_is_joined_and_filled() {
        let motion = ReidNet::new(Branch::Motion, ReidConfig { hidden: 4, ..Default::default() }, 0).unwrap();
        let map = ReidNet::new(Branch::Map, ReidConfig { hidden: 4, lane_hidden: 3, ..Default::default() }, 0).unwrap();
        let models = Models { motion: &motion, map: &map, completion: None };
        let full = straight(3, 0.0, 14, 0.0, 6.0);
        let h = Tracklet { obs: full.obs[..4].to_vec(), ..full.clone() };
        let f = Tracklet { id: TrackId(9), obs: full.obs[9..].to_vec(), ..full.clone() };
        // every valid pair is accepted
        let assoc = AssociationConfig { threshold: 0.0, ..Default::default() };
        let (out, st) = infer_scene(&[f, h], &LaneGraph::default(), 2.0, &models, &assoc, &GapPolicy::default()).unwrap();
        assert_eq!((st.matches, st.linear_gaps, st.recovered_poses), (1, 1, 5));
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].id, TrackId(3));
        assert_eq!(out[0].obs.len(), 14);
        for (o, g) in out[0].obs.iter().zip(&full.obs) {
            assert!((o.x - g.x).abs() < 1e-9 && (o.t - g.t).abs() < 1e-12);
        }
        assert_eq!(out[0].obs[5].source, Some(PoseSource::Linear));
    }
}
