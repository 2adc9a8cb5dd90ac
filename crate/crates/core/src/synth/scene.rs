//! Scene generation: vehicles driving template routes, sampled on a fixed
//! grid with Gaussian observation noise.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::templates::{MapTemplate, Route, Template};
use crate::error::{Error, Result};
use crate::geometry::wrap;
use crate::lanes::{build_lane_graph, LaneGraph};
use crate::tracklet::{Observation, TrackId, Tracklet};

pub const SCENE_SCHEMA_VERSION: u32 = 1;
pub const MAX_SPEED: f64 = 15.0;
/// Minimum lane length per vehicle used by the capacity check.
pub const METERS_PER_VEHICLE: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub xy: f64,
    pub theta: f64,
    pub v: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            xy: 0.15,
            theta: 0.02,
            v: 0.3,
        }
    }
}

impl NoiseConfig {
    pub const ZERO: NoiseConfig = NoiseConfig { xy: 0.0, theta: 0.0, v: 0.0 };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub template: Template,
    pub n_vehicles: usize,
    /// Scene length in seconds.
    pub duration: f64,
    /// Hz.
    pub sample_rate: f64,
    pub noise: NoiseConfig,
    /// Fraction of vehicles performing a lane change or leaving the lane.
    pub off_lane_fraction: f64,
    pub initial_speed: (f64, f64),
    pub accel: (f64, f64),
    /// Probability that a vehicle on a route with a stop line halts there.
    pub stop_probability: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            template: Template::Intersection,
            n_vehicles: 14,
            duration: 20.0,
            sample_rate: 2.0,
            noise: NoiseConfig::default(),
            off_lane_fraction: 0.15,
            initial_speed: (3.0, 13.0),
            accel: (-3.0, 2.0),
            stop_probability: 0.5,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.to_string()));
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return bad("sample_rate must be positive");
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad("duration must be positive");
        }
        let n = self.noise;
        if !(n.xy >= 0.0 && n.theta >= 0.0 && n.v >= 0.0) {
            return bad("noise standard deviations must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.off_lane_fraction) || !(0.0..=1.0).contains(&self.stop_probability) {
            return bad("fractions must lie in [0, 1]");
        }
        let (v0, v1) = self.initial_speed;
        if !(0.0 <= v0 && v0 <= v1 && v1 <= MAX_SPEED) {
            return bad("initial_speed must satisfy 0 <= lo <= hi <= 15");
        }
        if !(self.accel.0 <= self.accel.1) {
            return bad("accel range is empty");
        }
        Ok(())
    }
}

/// One generated scene. Serialized as a single JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub schema_version: u32,
    pub scene_id: u64,
    pub template: Template,
    pub sample_rate: f64,
    pub duration: f64,
    pub lane_graph: LaneGraph,
    pub gt_tracks: Vec<Tracklet>,
}

impl SceneRecord {
    pub fn track(&self, id: TrackId) -> Option<&Tracklet> {
        self.gt_tracks.iter().find(|t| t.id == id)
    }
}

/// Smoothstep lateral offset applied over a time window.
#[derive(Debug, Clone, Copy)]
struct Lateral {
    start: f64,
    dur: f64,
    offset: f64,
}

impl Lateral {
    /// Offset and its time derivative at `t`.
    fn at(&self, t: f64) -> (f64, f64) {
        let u = ((t - self.start) / self.dur).clamp(0.0, 1.0);
        let d = self.offset * u * u * (3.0 - 2.0 * u);
        let dd = if u > 0.0 && u < 1.0 {
            self.offset * 6.0 * u * (1.0 - u) / self.dur
        } else {
            0.0
        };
        (d, dd)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum StopPhase {
    None,
    Approach,
    Wait(f64),
    Go(f64),
}

struct Vehicle<'a> {
    route: &'a Route,
    s: f64,
    v: f64,
    accel: f64,
    next_change: f64,
    random_accel: bool,
    stop: StopPhase,
    lateral: Option<Lateral>,
    size: (f64, f64, f64),
}

/// Truth state at one sample time: `(t, x, y, theta, vx, vy)`.
type Truth = (f64, f64, f64, f64, f64, f64);

impl Vehicle<'_> {
    fn truth(&self, t: f64) -> Truth {
        let p = self.route.point(self.s);
        let h = self.route.heading(self.s);
        let n = [-h.sin(), h.cos()];
        let (d, dd) = self.lateral.map_or((0.0, 0.0), |l| l.at(t));
        let vx = self.v * h.cos() + dd * n[0];
        let vy = self.v * h.sin() + dd * n[1];
        let theta = if vx.hypot(vy) > 0.5 { vy.atan2(vx) } else { h };
        (t, p[0] + d * n[0], p[1] + d * n[1], wrap(theta), vx, vy)
    }

    fn control(&mut self, t: f64, cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> f64 {
        let (lo, hi) = cfg.accel;
        match self.stop {
            StopPhase::Approach => {
                let stop = self.route.stop_at.unwrap_or(f64::INFINITY) - 1.0;
                let d = stop - self.s;
                if (d <= 0.5 || self.v < 0.05) && self.v < 0.3 {
                    self.v = 0.0;
                    self.stop = StopPhase::Wait(t + rng.random_range(1.0..4.0));
                    return 0.0;
                }
                let need = self.v * self.v / (2.0 * d.max(0.1));
                if need > 0.8 {
                    return -need.min(3.0);
                }
            }
            StopPhase::Wait(until) => {
                if t < until {
                    return 0.0;
                }
                self.stop = StopPhase::Go(rng.random_range(6.0..12.0));
                return hi.max(0.0).min(1.5);
            }
            StopPhase::Go(target) => {
                if self.v < target {
                    return hi.max(0.0).min(1.5);
                }
                self.stop = StopPhase::None;
            }
            StopPhase::None => {}
        }
        if self.random_accel && t >= self.next_change {
            let (lo, hi) = if self.v < 3.0 { (0.0f64.max(lo).min(hi), hi) } else { (lo, hi) };
            self.accel = if hi > lo { rng.random_range(lo..hi) } else { lo };
            self.next_change = t + rng.random_range(1.0..4.0);
        }
        self.accel
    }
}

/// Generates one scene. The result is a pure function of `(seed, cfg)`.
pub fn generate_scene(seed: u64, cfg: &GeneratorConfig) -> Result<SceneRecord> {
    cfg.validate()?;
    let map = MapTemplate::build(cfg.template);
    let capacity = map.total_lane_length() / METERS_PER_VEHICLE;
    if cfg.n_vehicles as f64 > capacity {
        return Err(Error::Infeasible(format!(
            "{} vehicles exceed lane capacity {:.0}",
            cfg.n_vehicles, capacity
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = |sd: f64| Normal::new(0.0, sd).expect("non-negative std");
    let (nxy, nth, nv) = (noise(cfg.noise.xy), noise(cfg.noise.theta), noise(cfg.noise.v));
    let period = 1.0 / cfg.sample_rate;
    let substeps = 10;
    let h = period / substeps as f64;
    let n_grid = (cfg.duration * cfg.sample_rate + 1e-9).floor() as usize;

    let mut tracks = Vec::new();
    for i in 0..cfg.n_vehicles {
        let forced_turn = cfg.template == Template::Intersection && i == 0;
        let route = if forced_turn {
            map.routes.iter().find(|r| r.turning).unwrap()
        } else {
            &map.routes[rng.random_range(0..map.routes.len())]
        };
        let len = route.length();
        let late = i >= cfg.n_vehicles.div_ceil(2);
        let k0 = if late {
            rng.random_range(0..=(n_grid / 2).max(1))
        } else {
            0
        };
        let s0 = if forced_turn {
            route.stop_at.unwrap_or(len / 2.0) - 30.0
        } else if late {
            rng.random_range(0.0..0.2 * len)
        } else {
            rng.random_range(0.0..0.7 * len)
        };
        let (v_lo, v_hi) = cfg.initial_speed;
        let v0 = if forced_turn {
            8.0f64.clamp(v_lo, v_hi.max(v_lo))
        } else if v_hi > v_lo {
            rng.random_range(v_lo..v_hi)
        } else {
            v_lo
        };
        let stops = !forced_turn
            && route.stop_at.is_some_and(|sa| s0 < sa - 10.0)
            && rng.random_bool(cfg.stop_probability);
        let t_start = k0 as f64 * period;
        let lifetime = cfg.duration - t_start;
        let lateral = if !forced_turn && lifetime > 4.0 && rng.random_bool(cfg.off_lane_fraction) {
            let dur = rng.random_range(3.0..6.0);
            let start = t_start + rng.random_range(0.0..(lifetime - dur).max(0.5));
            let offset = if !route.lane_change_offsets.is_empty() && rng.random_bool(0.5) {
                route.lane_change_offsets[rng.random_range(0..route.lane_change_offsets.len())]
            } else {
                let m = rng.random_range(1.5..3.0);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            };
            Some(Lateral { start, dur, offset })
        } else {
            None
        };
        let size = (
            rng.random_range(3.9..5.2),
            rng.random_range(1.7..2.1),
            rng.random_range(1.4..2.0),
        );
        let mut veh = Vehicle {
            route,
            s: s0,
            v: v0,
            accel: 0.0,
            next_change: t_start,
            random_accel: !forced_turn,
            stop: if stops { StopPhase::Approach } else { StopPhase::None },
            lateral,
            size,
        };

        let mut truth = Vec::new();
        for k in k0..=n_grid {
            let t = k as f64 * period;
            if veh.s >= len - 0.5 {
                break;
            }
            truth.push(veh.truth(t));
            for sub in 0..substeps {
                let ts = t + sub as f64 * h;
                let a = veh.control(ts, cfg, &mut rng);
                let v_new = (veh.v + a * h).clamp(0.0, MAX_SPEED);
                veh.s += 0.5 * (veh.v + v_new) * h;
                veh.v = v_new;
            }
        }
        let obs: Vec<Observation> = truth
            .into_iter()
            .map(|(t, x, y, th, vx, vy)| Observation {
                t,
                x: x + nxy.sample(&mut rng),
                y: y + nxy.sample(&mut rng),
                theta: wrap(th + nth.sample(&mut rng)),
                l: veh.size.0,
                w: veh.size.1,
                h: veh.size.2,
                s: rng.random_range(0.5..=1.0),
                vx: vx + nv.sample(&mut rng),
                vy: vy + nv.sample(&mut rng),
                source: None,
            })
            .collect();
        if !obs.is_empty() {
            tracks.push(Tracklet {
                id: TrackId(i as u64),
                class: "car".into(),
                obs,
            });
        }
    }

    Ok(SceneRecord {
        schema_version: SCENE_SCHEMA_VERSION,
        scene_id: seed,
        template: cfg.template,
        sample_rate: cfg.sample_rate,
        duration: cfg.duration,
        lane_graph: build_lane_graph(&map.lanes),
        gt_tracks: tracks,
    })
}

/// Seed of the `index`-th item derived from a base seed (splitmix64).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn scene_to_line(scene: &SceneRecord) -> Result<String> {
    Ok(serde_json::to_string(scene)?)
}

pub fn scene_from_line(line: &str) -> Result<SceneRecord> {
    let scene: SceneRecord = serde_json::from_str(line)?;
    if scene.schema_version != SCENE_SCHEMA_VERSION {
        return Err(Error::Schema(format!(
            "scene schema {} (expected {SCENE_SCHEMA_VERSION})",
            scene.schema_version
        )));
    }
    for t in &scene.gt_tracks {
        t.validate()?;
    }
    Ok(scene)
}

pub fn write_scenes(path: impl AsRef<Path>, scenes: &[SceneRecord]) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for s in scenes {
        writeln!(w, "{}", scene_to_line(s)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scenes(path: impl AsRef<Path>) -> Result<Vec<SceneRecord>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(scene_from_line(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_byte_identical() {
        let cfg = GeneratorConfig::default();
        let a = scene_to_line(&generate_scene(11, &cfg).unwrap()).unwrap();
        let b = scene_to_line(&generate_scene(11, &cfg).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = scene_to_line(&generate_scene(12, &cfg).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_constant_speed_spacing() {
        let cfg = GeneratorConfig {
            template: Template::Straight,
            n_vehicles: 4,
            noise: NoiseConfig::ZERO,
            off_lane_fraction: 0.0,
            initial_speed: (10.0, 10.0),
            accel: (0.0, 0.0),
            ..GeneratorConfig::default()
        };
        let s = generate_scene(3, &cfg).unwrap();
        for t in &s.gt_tracks {
            for w in t.obs.windows(2) {
                let d = (w[1].x - w[0].x).hypot(w[1].y - w[0].y);
                assert!((d - 5.0).abs() < 1e-9, "{d}");
                assert!((w[1].t - w[0].t - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn intersection_has_a_turning_track() {
        let s = generate_scene(5, &GeneratorConfig::default()).unwrap();
        let turned = s.gt_tracks.iter().any(|t| {
            wrap(t.last().theta - t.first().theta).abs() >= 60f64.to_radians()
        });
        assert!(turned);
    }

    #[test]
    fn infeasible_vehicle_count() {
        let cfg = GeneratorConfig {
            n_vehicles: 10_000,
            ..GeneratorConfig::default()
        };
        assert!(matches!(generate_scene(0, &cfg), Err(Error::Infeasible(_))));
    }

    #[test]
    fn observations_valid_and_on_grid() {
        for (k, t) in Template::ALL.iter().enumerate() {
            let cfg = GeneratorConfig {
                template: *t,
                ..GeneratorConfig::default()
            };
            let s = generate_scene(k as u64, &cfg).unwrap();
            assert!(!s.gt_tracks.is_empty());
            let mut ids: Vec<u64> = s.gt_tracks.iter().map(|t| t.id.0).collect();
            ids.dedup();
            assert_eq!(ids.len(), s.gt_tracks.len());
            for trk in &s.gt_tracks {
                trk.validate().unwrap();
                for o in &trk.obs {
                    let k = o.t * s.sample_rate;
                    assert!((k - k.round()).abs() < 1e-9);
                    assert!((0.5..=1.0).contains(&o.s));
                    assert!(o.vx.hypot(o.vy) < MAX_SPEED + 3.0);
                }
            }
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let scenes: Vec<SceneRecord> = (0..3)
            .map(|i| generate_scene(i, &GeneratorConfig::default()).unwrap())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scenes.jsonl");
        write_scenes(&p, &scenes).unwrap();
        let back = read_scenes(&p).unwrap();
        assert_eq!(scenes.len(), back.len());
        for (a, b) in scenes.iter().zip(&back) {
            assert_eq!(scene_to_line(a).unwrap(), scene_to_line(b).unwrap());
        }
    }

    #[test]
    fn derived_seeds_differ() {
        let v: std::collections::BTreeSet<u64> = (0..1000).map(|i| derive_seed(7, i)).collect();
        assert_eq!(v.len(), 1000);
    }
}
