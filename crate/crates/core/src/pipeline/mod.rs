//! End-to-end orchestration: configuration, stages, run directories and
//! ablation sweeps.

pub mod ablation;
pub mod artifacts;
pub mod config;
pub mod report;
pub mod run;
pub mod stages;

pub use config::{DataConfig, EvalConfig, PipelineConfig, StageFlags, SynthConfig};
pub use run::{
    run_full, run_pipeline, stage_fingerprints, RunManifest, RunOptions, Stage, StageRecord,
    StageStatus,
};
pub use stages::{
    build_world_stage, reward_bank, stage_coldstart, stage_downstream, stage_eval, stage_pretrain,
    stage_rl, stage_synth, stage_train, stage_world, DownstreamResult, WorldStage,
};
pub use ablation::{
    run_ablation, AblationSpec, AblationTable, CellResult, LadderStep, TableRow, Toggles, Variant,
};
pub use report::{build_report, write_report, ReportFiles, SvgOptions};
