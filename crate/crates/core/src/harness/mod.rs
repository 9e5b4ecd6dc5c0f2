//! Experiment orchestration: pretraining, transfer settings and ablations.

pub mod config;
pub mod plan;
pub mod pretrain;
pub mod settings;

pub use config::{canonical, config_hash, KvConfig};
pub use pretrain::{evaluate_bleu, run_pretrain, train_translation, PretrainConfig, Pretrained};
pub use settings::{
    audit, check_languages, majority_tag_baseline, run_ablation, run_setting, setting_data, AblationGrid, AblationResult, FewShot,
    Setting, SettingResult, TaskConfig, TaskSource,
};
pub use plan::{plan_ablate, plan_evaluate, plan_finetune, plan_pretrain, ExperimentPlan, TransferSource};
