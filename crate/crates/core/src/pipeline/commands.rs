//! The batch commands behind the command-line tool. Every JSON artifact
//! carries the schema version and the hash of the run configuration.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tracing::info;

use super::benchmark::{completion_report, cvm_report, linear_report, reid_benchmark, ReidBenchmark};
use super::config::RunConfig;
use super::data::{fragment_scenes, generate_scenes, samples_of, split_scenes};
use super::infer::{infer_scene, InferStats, Models};
use crate::completion::{completion_eval_loss, train_completion, CompletionNet};
use crate::error::{Error, Result};
use crate::eval::{ids_and_recall, recovered_segments, EvalReport, IdentityMetrics};
use crate::nn::{Checkpoint, ParamStore};
use crate::par;
use crate::reid::{reid_eval_loss, train_reid, Branch, ReidNet};
use crate::synth::{derive_seed, read_scenes, write_scenes, SampleStats, SceneRecord};
use crate::train::EpochLog;

pub const ARTIFACT_SCHEMA_VERSION: u32 = 1;

const INIT_STREAM: u64 = 10;
const SHUFFLE_STREAM: u64 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    ReidMotion,
    ReidMap,
    Completion,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::ReidMotion, ModelKind::ReidMap, ModelKind::Completion];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::ReidMotion => "reid-motion",
            ModelKind::ReidMap => "reid-map",
            ModelKind::Completion => "completion",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown model {s:?} (reid-motion, reid-map, completion)")))
    }

    fn index(self) -> u64 {
        self as u64
    }
}

/// JSON envelope of every report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub schema_version: u32,
    pub kind: String,
    pub config_hash: String,
    pub body: T,
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => fs::create_dir_all(d).map_err(|e| Error::io(d, e)),
        _ => Ok(()),
    }
}

pub fn write_artifact<T: Serialize>(path: &Path, kind: &str, cfg: &RunConfig, body: T) -> Result<()> {
    ensure_parent(path)?;
    let a = Artifact {
        schema_version: ARTIFACT_SCHEMA_VERSION,
        kind: kind.to_string(),
        config_hash: cfg.hash(),
        body,
    };
    let mut text = serde_json::to_string_pretty(&a)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_artifact<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Artifact<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let a: Artifact<T> = serde_json::from_str(&text)?;
    if a.schema_version != ARTIFACT_SCHEMA_VERSION {
        return Err(Error::Schema(format!("{}: artifact schema {}", path.display(), a.schema_version)));
    }
    Ok(a)
}

pub fn stats_path(scenes: &Path) -> PathBuf {
    scenes.with_extension("stats.json")
}

pub fn checkpoint_path(cfg: &RunConfig, model: ModelKind) -> PathBuf {
    cfg.paths.checkpoints.join(format!("{}.json", model.name()))
}

pub fn last_checkpoint_path(cfg: &RunConfig, model: ModelKind) -> PathBuf {
    cfg.paths.checkpoints.join(format!("{}.last.json", model.name()))
}

pub fn train_log_path(cfg: &RunConfig, model: ModelKind) -> PathBuf {
    cfg.paths.reports.join(format!("train_{}.jsonl", model.name()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub n_scenes: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub train_samples: SampleStats,
    pub test_samples: SampleStats,
    pub fragmented_tracks: usize,
}

/// Writes all scenes, the fragmented test scenes and a statistics sidecar.
pub fn cmd_generate(cfg: &RunConfig) -> Result<GenerateSummary> {
    cfg.validate()?;
    let scenes = generate_scenes(cfg)?;
    let split = split_scenes(cfg, &scenes);
    let train_n = split.fit.len() + split.val.len();
    let train_samples = SampleStats::from_samples(&samples_of(cfg, &scenes[..train_n], &cfg.data.mask));
    let test_samples = SampleStats::from_samples(&samples_of(cfg, split.test, &cfg.data.mask));
    let fragments = fragment_scenes(cfg, split.test);
    let fragmented_tracks = fragments
        .iter()
        .flat_map(|s| &s.gt_tracks)
        .filter(|t| t.id.0 & crate::synth::FRAGMENT_ID_BIT != 0)
        .count();
    for p in [&cfg.paths.scenes, &cfg.paths.fragments] {
        ensure_parent(p)?;
    }
    write_scenes(&cfg.paths.scenes, &scenes)?;
    write_scenes(&cfg.paths.fragments, &fragments)?;
    let summary = GenerateSummary {
        n_scenes: scenes.len(),
        train_scenes: train_n,
        test_scenes: split.test.len(),
        train_samples,
        test_samples,
        fragmented_tracks,
    };
    write_artifact(&stats_path(&cfg.paths.scenes), "scene-stats", cfg, &summary)?;
    info!(scenes = summary.n_scenes, path = %cfg.paths.scenes.display(), "generated");
    Ok(summary)
}

fn load_run_scenes(cfg: &RunConfig) -> Result<Vec<SceneRecord>> {
    let scenes = read_scenes(&cfg.paths.scenes)?;
    let need = cfg.data.train_scenes + cfg.data.test_scenes;
    if scenes.len() != need {
        return Err(Error::Schema(format!(
            "{} holds {} scenes, the config expects {need}",
            cfg.paths.scenes.display(),
            scenes.len()
        )));
    }
    Ok(scenes)
}

/// Either network kind, for shared checkpoint handling.
#[derive(Clone)]
enum Net {
    Reid(ReidNet),
    Completion(CompletionNet),
}

impl Net {
    fn new(cfg: &RunConfig, model: ModelKind) -> Result<Self> {
        let seed = derive_seed(derive_seed(cfg.seed, INIT_STREAM), model.index());
        Ok(match model {
            ModelKind::ReidMotion => Net::Reid(ReidNet::new(Branch::Motion, cfg.reid.clone(), seed)?),
            ModelKind::ReidMap => Net::Reid(ReidNet::new(Branch::Map, cfg.reid.clone(), seed)?),
            ModelKind::Completion => {
                Net::Completion(CompletionNet::new(cfg.completion_variant, cfg.completion.clone(), seed)?)
            }
        })
    }

    fn from_checkpoint(model: ModelKind, ck: &Checkpoint) -> Result<Self> {
        match model {
            ModelKind::Completion => Ok(Net::Completion(CompletionNet::from_checkpoint(ck)?)),
            _ => Ok(Net::Reid(ReidNet::from_checkpoint(ck)?)),
        }
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Net::Reid(n) => &mut n.store,
            Net::Completion(n) => &mut n.store,
        }
    }

    fn checkpoint_with(&self, store: &ParamStore, meta: BTreeMap<String, serde_json::Value>) -> Result<Checkpoint> {
        let mut n = self.clone();
        *n.store_mut() = store.clone();
        match &n {
            Net::Reid(r) => r.checkpoint(meta),
            Net::Completion(c) => c.checkpoint(meta),
        }
    }
}

fn meta(cfg: &RunConfig, log: &EpochLog) -> BTreeMap<String, serde_json::Value> {
    let mut m = BTreeMap::new();
    m.insert("config_hash".into(), cfg.hash().into());
    m.insert("seed".into(), cfg.seed.into());
    m.insert("epoch".into(), log.epoch.into());
    m.insert("train_loss".into(), log.train_loss.into());
    m.insert("val_loss".into(), log.val_loss.into());
    m
}

/// Loads a checkpoint and checks that it was produced under `cfg`.
pub fn load_checked(cfg: &RunConfig, path: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    let want = cfg.hash();
    match ck.meta_str("config_hash") {
        Some(h) if h == want => Ok(ck),
        other => Err(Error::Schema(format!(
            "{} was trained under config {} but the current config hashes to {want}",
            path.display(),
            other.unwrap_or("<none>")
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub model: ModelKind,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub checkpoint: PathBuf,
}

#[derive(Serialize)]
struct LogLine<'a> {
    schema_version: u32,
    config_hash: &'a str,
    model: &'a str,
    #[serde(flatten)]
    log: &'a EpochLog,
}

/// Trains one network. Every epoch appends a log line and refreshes the
/// `last` checkpoint; the main checkpoint holds the lowest validation loss.
/// With `resume`, training continues from the `last` checkpoint.
pub fn cmd_train(cfg: &RunConfig, model: ModelKind, resume: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    let scenes = load_run_scenes(cfg)?;
    let split = split_scenes(cfg, &scenes);
    let fit_set = samples_of(cfg, split.fit, &cfg.data.mask);
    let val_set = samples_of(cfg, split.val, &cfg.data.mask);
    let (best_path, last_path, log_path) =
        (checkpoint_path(cfg, model), last_checkpoint_path(cfg, model), train_log_path(cfg, model));
    ensure_parent(&best_path)?;
    ensure_parent(&log_path)?;

    let (mut net, first_epoch, mut best) = if resume {
        let last = load_checked(cfg, &last_path)?;
        let best = load_checked(cfg, &best_path)?;
        let epoch = last.metadata.get("epoch").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        let best_epoch = best.metadata.get("epoch").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        let best_val = best.metadata.get("val_loss").and_then(|v| v.as_f64()).unwrap_or(f64::INFINITY);
        (Net::from_checkpoint(model, &last)?, epoch, Some((best_epoch, best_val)))
    } else {
        fs::write(&log_path, "").map_err(|e| Error::io(&log_path, e))?;
        (Net::new(cfg, model)?, 0, None)
    };
    let hash = cfg.hash();
    let mut log_file = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let shape = net.clone();
    let mut io_err: Option<Error> = None;
    let mut epochs_run = 0;
    let mut on_epoch = |log: &EpochLog, store: &ParamStore| {
        epochs_run += 1;
        info!(model = model.name(), epoch = log.epoch, train = log.train_loss, val = log.val_loss, "epoch");
        let mut step = || -> Result<()> {
            let line = serde_json::to_string(&LogLine { schema_version: ARTIFACT_SCHEMA_VERSION, config_hash: &hash, model: model.name(), log })?;
            writeln!(log_file, "{line}").map_err(|e| Error::io(&log_path, e))?;
            let ck = shape.checkpoint_with(store, meta(cfg, log))?;
            ck.save(&last_path)?;
            if best.is_none_or(|(_, v)| log.val_loss < v) {
                best = Some((log.epoch, log.val_loss));
                ck.save(&best_path)?;
            }
            Ok(())
        };
        if let Err(e) = step() {
            io_err.get_or_insert(e);
        }
    };
    let shuffle = derive_seed(derive_seed(cfg.seed, SHUFFLE_STREAM), model.index());
    match &mut net {
        Net::Reid(r) => {
            train_reid(r, &fit_set, &val_set, &cfg.reid_schedule, &cfg.augment, first_epoch, shuffle, &mut on_epoch)?;
        }
        Net::Completion(c) => {
            train_completion(c, &fit_set, &val_set, &cfg.completion_schedule, &cfg.augment, first_epoch, shuffle, &mut on_epoch)?;
        }
    }
    if let Some(e) = io_err {
        return Err(e);
    }
    let (best_epoch, best_val_loss) = best.ok_or_else(|| Error::Invalid("no epochs to run".into()))?;
    Ok(TrainSummary {
        model,
        epochs_run,
        best_epoch,
        best_val_loss,
        checkpoint: best_path,
    })
}

/// Validation loss of a saved checkpoint, recomputed from the scenes.
pub fn checkpoint_val_loss(cfg: &RunConfig, model: ModelKind) -> Result<f64> {
    let scenes = load_run_scenes(cfg)?;
    let val_set = samples_of(cfg, split_scenes(cfg, &scenes).val, &cfg.data.mask);
    let ck = load_checked(cfg, &checkpoint_path(cfg, model))?;
    match Net::from_checkpoint(model, &ck)? {
        Net::Reid(r) => reid_eval_loss(&r, &val_set),
        Net::Completion(c) => completion_eval_loss(&c, &val_set),
    }
}

pub struct LoadedModels {
    pub motion: ReidNet,
    pub map: ReidNet,
    pub completion: CompletionNet,
}

impl LoadedModels {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let reid = |m: ModelKind, b: Branch| -> Result<ReidNet> {
            let n = ReidNet::from_checkpoint(&load_checked(cfg, &checkpoint_path(cfg, m))?)?;
            if n.branch != b {
                return Err(Error::Schema(format!("{} holds the {} branch", m.name(), n.branch.name())));
            }
            Ok(n)
        };
        Ok(Self {
            motion: reid(ModelKind::ReidMotion, Branch::Motion)?,
            map: reid(ModelKind::ReidMap, Branch::Map)?,
            completion: CompletionNet::from_checkpoint(&load_checked(cfg, &checkpoint_path(cfg, ModelKind::Completion))?)?,
        })
    }

    pub fn models(&self) -> Models<'_> {
        Models {
            motion: &self.motion,
            map: &self.map,
            completion: Some(&self.completion),
        }
    }
}

/// Associates and completes the tracklets of every scene in `input`.
pub fn infer_scenes(cfg: &RunConfig, models: &Models, input: &[SceneRecord]) -> Result<(Vec<SceneRecord>, InferStats)> {
    let results = par::map(input, |s| {
        infer_scene(&s.gt_tracks, &s.lane_graph, s.sample_rate, models, &cfg.association, &cfg.gap)
    });
    let mut stats = InferStats::default();
    let mut out = Vec::with_capacity(input.len());
    for (s, r) in input.iter().zip(results) {
        let (tracks, st) = r?;
        stats.add(&st);
        out.push(SceneRecord { gt_tracks: tracks, ..s.clone() });
    }
    Ok((out, stats))
}

/// Runs the full pipeline on `input` (default: the fragmented test scenes)
/// and writes the completed scenes to `out`.
pub fn cmd_infer(cfg: &RunConfig, input: Option<&Path>, out: &Path) -> Result<InferStats> {
    cfg.validate()?;
    let models = LoadedModels::load(cfg)?;
    let scenes = read_scenes(input.unwrap_or(&cfg.paths.fragments))?;
    let (done, stats) = infer_scenes(cfg, &models.models(), &scenes)?;
    ensure_parent(out)?;
    write_scenes(out, &done)?;
    write_artifact(&out.with_extension("stats.json"), "infer-stats", cfg, stats)?;
    info!(matches = stats.matches, out = %out.display(), "inferred");
    Ok(stats)
}

/// Track-level evaluation of `pred` against `gt`, paired by scene id.
pub fn evaluate_tracks(cfg: &RunConfig, pred: &[SceneRecord], gt: &[SceneRecord]) -> Result<EvalReport> {
    let by_id: BTreeMap<u64, &SceneRecord> = gt.iter().map(|s| (s.scene_id, s)).collect();
    let mut total = IdentityMetrics { ids: 0, recall: 0.0, matched: 0, total: 0 };
    let (mut ps, mut gs) = (Vec::new(), Vec::new());
    for p in pred {
        let g = by_id
            .get(&p.scene_id)
            .ok_or_else(|| Error::Schema(format!("scene {} has no ground truth", p.scene_id)))?;
        let m = ids_and_recall(&p.gt_tracks, &g.gt_tracks, cfg.eval.match_radius);
        total.ids += m.ids;
        total.matched += m.matched;
        total.total += m.total;
        let (a, b) = recovered_segments(&p.gt_tracks, &g.gt_tracks, cfg.eval.match_radius);
        ps.extend(a);
        gs.extend(b);
    }
    total.recall = if total.total == 0 { 1.0 } else { total.matched as f64 / total.total as f64 };
    let mut r = EvalReport::empty(pred.len()).with_identity(&total);
    if !ps.is_empty() {
        r = r.with_trajectories(&ps, &gs, cfg.eval.miss_threshold)?;
    }
    Ok(r)
}

pub fn cmd_eval_tracks(cfg: &RunConfig, pred: &Path, gt: Option<&Path>, out: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let p = read_scenes(pred)?;
    let g = read_scenes(gt.unwrap_or(&cfg.paths.scenes))?;
    let r = evaluate_tracks(cfg, &p, &g)?;
    write_artifact(out, "track-eval", cfg, &r)?;
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    /// Re-ID samples with at least this many candidates.
    pub min_candidates: usize,
    pub cvm: EvalReport,
    pub reid: ReidBenchmark,
    pub linear: EvalReport,
    pub completion: EvalReport,
}

pub const BENCHMARK_MIN_CANDIDATES: usize = 5;

/// Held-out pseudo-occlusion benchmark of the trained models.
pub fn cmd_eval_benchmark(cfg: &RunConfig, out: &Path) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let models = LoadedModels::load(cfg)?;
    let scenes = load_run_scenes(cfg)?;
    let test = split_scenes(cfg, &scenes).test;
    let reid_set = super::benchmark::with_min_candidates(&samples_of(cfg, test, &cfg.data.mask), BENCHMARK_MIN_CANDIDATES);
    let comp_set = samples_of(cfg, test, &cfg.data.completion_mask);
    let r = BenchmarkReport {
        min_candidates: BENCHMARK_MIN_CANDIDATES,
        cvm: cvm_report(&reid_set, cfg.association.tau)?,
        reid: reid_benchmark(&reid_set, &models.motion, &models.map, cfg.association.w)?,
        linear: linear_report(&comp_set, cfg.eval.miss_threshold)?,
        completion: completion_report(&comp_set, &models.completion, cfg.eval.miss_threshold)?,
    };
    write_artifact(out, "benchmark", cfg, &r)?;
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub min_candidates: usize,
    pub cvm: EvalReport,
    pub linear: EvalReport,
}

/// Non-learned references on the held-out benchmark.
pub fn cmd_baseline(cfg: &RunConfig, out: &Path) -> Result<BaselineReport> {
    cfg.validate()?;
    let scenes = load_run_scenes(cfg)?;
    let test = split_scenes(cfg, &scenes).test;
    let reid_set = super::benchmark::with_min_candidates(&samples_of(cfg, test, &cfg.data.mask), BENCHMARK_MIN_CANDIDATES);
    let comp_set = samples_of(cfg, test, &cfg.data.completion_mask);
    let r = BaselineReport {
        min_candidates: BENCHMARK_MIN_CANDIDATES,
        cvm: cvm_report(&reid_set, cfg.association.tau)?,
        linear: linear_report(&comp_set, cfg.eval.miss_threshold)?,
    };
    write_artifact(out, "baseline", cfg, &r)?;
    Ok(r)
}
