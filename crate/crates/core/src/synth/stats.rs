//! Summary histograms of a pseudo-occlusion sample set.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::occlusion::PseudoOcclusionSample;

/// Width of the occlusion-duration and history-length bins, in seconds.
pub const DURATION_BIN: f64 = 0.5;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub n_samples: usize,
    /// Candidate count -> number of samples.
    pub candidate_counts: BTreeMap<usize, usize>,
    /// Lower bin edge (milliseconds) -> number of samples.
    pub occlusion_duration_ms: BTreeMap<u64, usize>,
    pub history_length_ms: BTreeMap<u64, usize>,
    pub min_candidates: usize,
    pub max_candidates: usize,
}

fn bin_ms(v: f64) -> u64 {
    ((v / DURATION_BIN).floor() * DURATION_BIN * 1000.0).round() as u64
}

impl SampleStats {
    pub fn add(&mut self, s: &PseudoOcclusionSample) {
        let n = s.future_candidates.len();
        if self.n_samples == 0 {
            self.min_candidates = n;
            self.max_candidates = n;
        }
        self.min_candidates = self.min_candidates.min(n);
        self.max_candidates = self.max_candidates.max(n);
        self.n_samples += 1;
        *self.candidate_counts.entry(n).or_default() += 1;
        *self.occlusion_duration_ms.entry(bin_ms(s.occlusion_duration)).or_default() += 1;
        *self.history_length_ms.entry(bin_ms(s.history_length() - 1e-9)).or_default() += 1;
    }

    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a PseudoOcclusionSample>) -> Self {
        let mut s = Self::default();
        for x in samples {
            s.add(x);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, scene_samples, GeneratorConfig, MaskConfig};

    #[test]
    fn histograms_sum_to_sample_count() {
        let sc = generate_scene(1, &GeneratorConfig::default()).unwrap();
        let samples = scene_samples(&sc, 0, &MaskConfig::default());
        let st = SampleStats::from_samples(&samples);
        assert_eq!(st.n_samples, samples.len());
        assert_eq!(st.candidate_counts.values().sum::<usize>(), samples.len());
        assert_eq!(st.occlusion_duration_ms.values().sum::<usize>(), samples.len());
        assert_eq!(st.history_length_ms.values().sum::<usize>(), samples.len());
        assert!(st.min_candidates <= st.max_candidates);
    }
}
