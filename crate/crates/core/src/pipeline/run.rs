//! Run directories: sequential stages with checkpoints, a hash-stamped
//! manifest, and resume from any completed stage.
//!
//! Each stage carries a fingerprint chained from the run seed and the
//! config sections it (and every earlier stage) depends on. A stage is
//! reused on resume only when its fingerprint matches and every output file
//! still has its recorded hash.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::DenoiserCheckpoint;
use crate::downstream::{Classifier, EvalReport};
use crate::error::{Error, Result};
use crate::numerics::Mlp;
use crate::rl::RlStatus;
use crate::world::{FeatureExtractor, IdentityWorld, LabeledSample};

use super::artifacts as art;
use super::config::PipelineConfig;
use super::stages::{
    build_world_stage, stage_coldstart, stage_eval, stage_pretrain, stage_rl, stage_synth,
    stage_train, stage_world, WorldStage,
};

pub const MANIFEST_FORMAT: &str = "idsynth-run";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    World,
    Pretrain,
    Coldstart,
    Rl,
    Synth,
    Train,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::World,
        Stage::Pretrain,
        Stage::Coldstart,
        Stage::Rl,
        Stage::Synth,
        Stage::Train,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::World => "world",
            Stage::Pretrain => "pretrain",
            Stage::Coldstart => "coldstart",
            Stage::Rl => "rl",
            Stage::Synth => "synth",
            Stage::Train => "train",
            Stage::Eval => "eval",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    pub fingerprint: String,
    pub wall_clock_secs: f64,
    /// Output file name → sha256 of its contents.
    pub outputs: BTreeMap<String, String>,
    /// Scalar summaries (losses, accuracies).
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub run_id: String,
    pub code_version: String,
    pub seed: u64,
    pub config: PipelineConfig,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(art::MANIFEST);
        if !path.exists() {
            return Err(Error::MissingInput(format!(
                "no run manifest at {}",
                path.display()
            )));
        }
        let m: RunManifest = art::read_json(dir, art::MANIFEST)?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(Error::Report {
                file: art::MANIFEST.into(),
                reason: format!("unsupported manifest {} v{}", m.format, m.version),
            });
        }
        Ok(m)
    }

    pub fn record(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == stage)
    }

    /// Checks every referenced output exists with its recorded hash.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for rec in &self.stages {
            verify_outputs(dir, rec)?;
        }
        Ok(())
    }

    fn save(&self, dir: &Path) -> Result<()> {
        art::write_bytes(dir, art::MANIFEST, &art::to_json_bytes(self)?)?;
        Ok(())
    }
}

fn verify_outputs(dir: &Path, rec: &StageRecord) -> Result<()> {
    for (name, hash) in &rec.outputs {
        let actual = art::file_hash(dir, name)?;
        if &actual != hash {
            return Err(Error::Report {
                file: name.clone(),
                reason: "content hash differs from manifest".into(),
            });
        }
    }
    Ok(())
}

/// Chained per-stage fingerprints for `(config, seed)`.
pub fn stage_fingerprints(config: &PipelineConfig, seed: u64) -> Result<[String; 7]> {
    let sections: [serde_json::Value; 7] = [
        serde_json::json!({
            "seed": seed,
            "world": config.world,
            "data": config.data,
            "generic": config.generic,
            "extractor": config.extractor,
            "eval": config.eval,
        }),
        serde_json::json!({ "denoiser": config.denoiser, "pretrain": config.pretrain }),
        serde_json::json!({ "coldstart": config.coldstart }),
        serde_json::json!({
            "rewards": config.rewards,
            "rl": config.rl,
            "stages": config.stages,
        }),
        serde_json::json!({ "synth": config.synth }),
        serde_json::json!({ "downstream": config.downstream }),
        serde_json::json!({}),
    ];
    let mut prev = String::new();
    let mut out: [String; 7] = Default::default();
    for (i, section) in sections.iter().enumerate() {
        let mut h = Sha256::new();
        h.update(prev.as_bytes());
        h.update(Stage::ALL[i].name().as_bytes());
        h.update(serde_json::to_vec(section)?);
        prev = hex::encode(h.finalize());
        out[i] = prev.clone();
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Stop after this stage (inclusive).
    pub stop_after: Option<Stage>,
    /// Reuse matching completed stages found in the directory.
    pub resume: bool,
    /// Require every stage before `stop_after` to be reusable; checked
    /// before anything is written.
    pub require_previous: bool,
}

#[derive(Default)]
struct Context {
    ws: Option<WorldStage>,
    theta_pre: Option<Mlp>,
    theta0: Option<Mlp>,
    policy: Option<Mlp>,
    pool: Option<Vec<LabeledSample>>,
    model: Option<Classifier>,
}

impl Context {
    fn ws(&self) -> &WorldStage {
        self.ws.as_ref().expect("world stage runs first")
    }
}

struct StageOutput {
    status: StageStatus,
    files: Vec<(&'static str, Vec<u8>)>,
    metrics: BTreeMap<String, f64>,
    note: Option<String>,
}

impl StageOutput {
    fn completed(files: Vec<(&'static str, Vec<u8>)>) -> Self {
        StageOutput {
            status: StageStatus::Completed,
            files,
            metrics: BTreeMap::new(),
            note: None,
        }
    }

    fn skipped(note: &str) -> Self {
        StageOutput {
            status: StageStatus::Skipped,
            files: Vec::new(),
            metrics: BTreeMap::new(),
            note: Some(note.into()),
        }
    }

    fn metric(mut self, key: &str, v: f64) -> Self {
        self.metrics.insert(key.into(), v);
        self
    }
}

/// Executes the full pipeline into `dir`.
pub fn run_full(config: &PipelineConfig, seed: u64, dir: &Path) -> Result<RunManifest> {
    run_pipeline(
        config,
        seed,
        dir,
        RunOptions {
            resume: true,
            ..RunOptions::default()
        },
    )
}

/// Stages reusable from `previous` for `(config, seed)`, in order, up to
/// the first one that is not.
fn reusable_prefix(previous: Option<&RunManifest>, fps: &[String; 7], dir: &Path) -> usize {
    let Some(m) = previous else { return 0 };
    Stage::ALL
        .iter()
        .take_while(|&&s| {
            m.record(s).is_some_and(|r| {
                r.status != StageStatus::Failed
                    && r.fingerprint == fps[s.index()]
                    && verify_outputs(dir, r).is_ok()
            })
        })
        .count()
}

pub fn run_pipeline(
    config: &PipelineConfig,
    seed: u64,
    dir: &Path,
    opts: RunOptions,
) -> Result<RunManifest> {
    config.validate()?;
    let fps = stage_fingerprints(config, seed)?;
    let previous = if opts.resume && dir.join(art::MANIFEST).exists() {
        Some(RunManifest::load(dir)?)
    } else {
        None
    };
    let reusable = reusable_prefix(previous.as_ref(), &fps, dir);
    let last = opts.stop_after.unwrap_or(Stage::Eval);
    if opts.require_previous && reusable < last.index() {
        let missing = Stage::ALL[reusable];
        return Err(Error::MissingInput(format!(
            "stage `{last}` needs a completed `{missing}` stage for this config and seed in {}",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut manifest = RunManifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        run_id: format!("seed{seed}-{}", &fps[Stage::Eval.index()][..12]),
        code_version: env!("CARGO_PKG_VERSION").into(),
        seed,
        config: config.clone(),
        stages: Vec::new(),
    };
    let mut ctx = Context::default();
    for stage in Stage::ALL {
        let i = stage.index();
        if i < reusable {
            let rec = previous
                .as_ref()
                .and_then(|m| m.record(stage))
                .expect("reusable stage has a record")
                .clone();
            load_stage(stage, &rec, config, seed, dir, &mut ctx)?;
            log::info!("stage {stage}: reused");
            manifest.stages.push(rec);
        } else {
            let started = Instant::now();
            let result = execute_stage(stage, config, seed, &mut ctx);
            let secs = started.elapsed().as_secs_f64();
            let rec = match result {
                Ok(out) => {
                    let mut outputs = BTreeMap::new();
                    for (name, bytes) in &out.files {
                        outputs.insert(name.to_string(), art::write_bytes(dir, name, bytes)?);
                    }
                    StageRecord {
                        stage,
                        status: out.status,
                        fingerprint: fps[i].clone(),
                        wall_clock_secs: secs,
                        outputs,
                        metrics: out.metrics,
                        note: out.note,
                    }
                }
                Err((e, partial)) => {
                    let mut outputs = BTreeMap::new();
                    for (name, bytes) in &partial {
                        outputs.insert(name.to_string(), art::write_bytes(dir, name, bytes)?);
                    }
                    manifest.stages.push(StageRecord {
                        stage,
                        status: StageStatus::Failed,
                        fingerprint: fps[i].clone(),
                        wall_clock_secs: secs,
                        outputs,
                        metrics: BTreeMap::new(),
                        note: Some(e.to_string()),
                    });
                    manifest.save(dir)?;
                    return Err(e);
                }
            };
            log::info!("stage {stage}: {:?} in {secs:.2}s", rec.status);
            manifest.stages.push(rec);
        }
        manifest.save(dir)?;
        if stage == last {
            break;
        }
    }
    Ok(manifest)
}

type StageResult = std::result::Result<StageOutput, (Error, Vec<(&'static str, Vec<u8>)>)>;

fn execute_stage(stage: Stage, config: &PipelineConfig, seed: u64, ctx: &mut Context) -> StageResult {
    let plain = |e: Error| (e, Vec::new());
    match stage {
        Stage::World => {
            let ws = stage_world(config, seed).map_err(plain)?;
            let files = vec![
                (art::WORLD, ws.world.to_json().map_err(plain)?.into_bytes()),
                (art::EXTRACTOR, art::to_json_bytes(&ws.extractor).map_err(plain)?),
            ];
            let out = StageOutput::completed(files)
                .metric("trained_identities", ws.split.seen.len() as f64)
                .metric("novel_identities", ws.split.novel.len() as f64);
            ctx.ws = Some(ws);
            Ok(out)
        }
        Stage::Pretrain => {
            let trained = stage_pretrain(config, ctx.ws(), seed).map_err(plain)?;
            let out = denoiser_output(config, &trained.params, art::PRETRAIN, art::PRETRAIN_LOSS, &trained.curve)
                .map_err(plain)?
                .metric("initial_loss", trained.initial_loss)
                .metric("final_loss", trained.final_loss);
            ctx.theta_pre = Some(trained.params);
            Ok(out)
        }
        Stage::Coldstart => {
            let theta_pre = ctx.theta_pre.as_ref().expect("pretrain precedes coldstart");
            let trained = stage_coldstart(config, ctx.ws(), theta_pre, seed).map_err(plain)?;
            let out = denoiser_output(config, &trained.params, art::COLDSTART, art::COLDSTART_LOSS, &trained.curve)
                .map_err(plain)?
                .metric("initial_loss", trained.initial_loss)
                .metric("final_loss", trained.final_loss);
            ctx.theta0 = Some(trained.params);
            Ok(out)
        }
        Stage::Rl => {
            let theta0 = ctx.theta0.clone().expect("coldstart precedes rl");
            if !config.rl_enabled() {
                ctx.policy = Some(theta0);
                return Ok(StageOutput::skipped("reward fine-tuning disabled"));
            }
            let run = stage_rl(config, ctx.ws(), &theta0, seed).map_err(plain)?;
            let history = art::rl_history_csv(&run.history).map_err(plain)?;
            let rewards = art::rewards_csv(&run.rewards).map_err(plain)?;
            if let RlStatus::Aborted { step, reason } = &run.status {
                return Err((
                    Error::Training(format!("rl step {step}: {reason}")),
                    vec![(art::RL_HISTORY, history), (art::REWARDS, rewards)],
                ));
            }
            let schedule = config.denoiser.schedule().map_err(plain)?;
            let ck = DenoiserCheckpoint::new(run.params.clone(), &schedule)
                .to_json()
                .map_err(plain)?;
            let n = run.history.len();
            let k = (n / 10).max(1).min(n);
            let mean = |s: &[crate::rl::PolicyGradientReport]| {
                s.iter().map(|r| r.mean_r_norm).sum::<f64>() / s.len().max(1) as f64
            };
            let out = StageOutput::completed(vec![
                (art::RL, ck.into_bytes()),
                (art::RL_HISTORY, history),
                (art::REWARDS, rewards),
            ])
            .metric("steps", n as f64)
            .metric("r_norm_first_decile", mean(&run.history[..k]))
            .metric("r_norm_last_decile", mean(&run.history[n - k..]));
            ctx.policy = Some(run.params);
            Ok(out)
        }
        Stage::Synth => {
            if !config.stages.use_synthetic {
                ctx.pool = Some(Vec::new());
                return Ok(StageOutput::skipped("synthetic data disabled"));
            }
            let policy = ctx.policy.as_ref().expect("rl precedes synth");
            let pool = stage_synth(config, ctx.ws(), policy, seed).map_err(plain)?;
            let out = StageOutput::completed(vec![(art::POOL, art::pool_csv(&pool).map_err(plain)?)])
                .metric("pool_size", pool.len() as f64);
            ctx.pool = Some(pool);
            Ok(out)
        }
        Stage::Train => {
            let pool = ctx.pool.as_deref().unwrap_or(&[]);
            let (model, curves) = stage_train(config, ctx.ws(), pool, seed).map_err(plain)?;
            let out = StageOutput::completed(vec![
                (art::CLASSIFIER, art::to_json_bytes(&model).map_err(plain)?),
                (art::TRAIN_CURVES, art::curves_csv(&curves.points).map_err(plain)?),
                (art::SELECTION, art::selection_csv(&curves.selection).map_err(plain)?),
            ])
            .metric("initial_loss", curves.initial_loss)
            .metric("final_loss", curves.final_loss);
            ctx.model = Some(model);
            Ok(out)
        }
        Stage::Eval => {
            let model = ctx.model.as_ref().expect("train precedes eval");
            let report = stage_eval(ctx.ws(), model).map_err(plain)?;
            let mut out = StageOutput::completed(vec![(
                art::EVAL,
                art::to_json_bytes(&report).map_err(plain)?,
            )])
            .metric("closed_set_accuracy", report.closed_set_accuracy);
            if let Some(v) = report.novel_accuracy {
                out = out.metric("novel_accuracy", v);
            }
            Ok(out)
        }
    }
}

fn denoiser_output(
    config: &PipelineConfig,
    params: &Mlp,
    ck_name: &'static str,
    loss_name: &'static str,
    curve: &[crate::diffusion::training::LossPoint],
) -> Result<StageOutput> {
    let schedule = config.denoiser.schedule()?;
    let ck = DenoiserCheckpoint::new(params.clone(), &schedule).to_json()?;
    Ok(StageOutput::completed(vec![
        (ck_name, ck.into_bytes()),
        (loss_name, art::loss_csv(curve)?),
    ]))
}

fn load_checkpoint(dir: &Path, name: &str) -> Result<Mlp> {
    let text = String::from_utf8(art::read_bytes(dir, name)?).map_err(|e| Error::Report {
        file: name.into(),
        reason: e.to_string(),
    })?;
    Ok(DenoiserCheckpoint::from_json(&text)?.params)
}

fn load_stage(
    stage: Stage,
    rec: &StageRecord,
    config: &PipelineConfig,
    seed: u64,
    dir: &Path,
    ctx: &mut Context,
) -> Result<()> {
    let skipped = rec.status == StageStatus::Skipped;
    match stage {
        Stage::World => {
            let text = String::from_utf8(art::read_bytes(dir, art::WORLD)?).map_err(|e| {
                Error::Report {
                    file: art::WORLD.into(),
                    reason: e.to_string(),
                }
            })?;
            let world = IdentityWorld::from_json(&text)?;
            let extractor: FeatureExtractor = art::read_json(dir, art::EXTRACTOR)?;
            ctx.ws = Some(build_world_stage(config, world, Some(extractor), seed)?);
        }
        Stage::Pretrain => ctx.theta_pre = Some(load_checkpoint(dir, art::PRETRAIN)?),
        Stage::Coldstart => ctx.theta0 = Some(load_checkpoint(dir, art::COLDSTART)?),
        Stage::Rl => {
            ctx.policy = Some(if skipped {
                ctx.theta0.clone().expect("coldstart precedes rl")
            } else {
                load_checkpoint(dir, art::RL)?
            });
        }
        Stage::Synth => {
            ctx.pool = Some(if skipped {
                Vec::new()
            } else {
                art::parse_pool_csv(&art::read_bytes(dir, art::POOL)?)?
            });
        }
        Stage::Train => ctx.model = Some(art::read_json(dir, art::CLASSIFIER)?),
        Stage::Eval => {
            let _: EvalReport = art::read_json(dir, art::EVAL)?;
        }
    }
    Ok(())
}

