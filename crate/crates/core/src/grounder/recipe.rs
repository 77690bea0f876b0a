//! Reference training recipe: pretrain a host on one acquisition style,
//! then adapt it to a shifted style by full fine-tuning and by LoRA.

use serde::{Deserialize, Serialize};

use super::data::{gen_synthetic, ImageSample, SyntheticStyle};
use super::train::{evaluate_iou, train, TrainConfig, TrainMode, TrainReport};
use super::{GrounderError, GrounderModel};
use crate::lora::LoraConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub model_seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub data_seed: u64,
    pub source_style: SyntheticStyle,
    pub target_style: SyntheticStyle,
    pub pretrain: TrainConfig,
    pub full_finetune: TrainConfig,
    pub lora: TrainConfig,
}

impl Default for Recipe {
    fn default() -> Self {
        Self {
            model_seed: 0,
            n_train: 512,
            n_val: 128,
            data_seed: 1,
            source_style: SyntheticStyle::default(),
            target_style: SyntheticStyle {
                background: 0.35,
                contrast: 0.6,
                noise: 0.08,
            },
            pretrain: TrainConfig {
                lr: 1e-2,
                seed: 1,
                ..TrainConfig::default()
            },
            full_finetune: TrainConfig {
                epochs: 60,
                seed: 2,
                ..TrainConfig::default()
            },
            lora: TrainConfig {
                lr: 2e-3,
                epochs: 60,
                mode: TrainMode::Lora,
                lora: Some(LoraConfig::new(8, 7)),
                seed: 2,
                ..TrainConfig::default()
            },
        }
    }
}

/// Datasets of a recipe; each split has its own seed offset.
pub struct RecipeData {
    pub source_train: Vec<ImageSample>,
    pub source_val: Vec<ImageSample>,
    pub target_train: Vec<ImageSample>,
    pub target_val: Vec<ImageSample>,
}

impl Recipe {
    pub fn data(&self) -> RecipeData {
        let s = self.data_seed;
        RecipeData {
            source_train: gen_synthetic(self.n_train, s, &self.source_style, "src_"),
            source_val: gen_synthetic(self.n_val, s + 1, &self.source_style, "srcval_"),
            target_train: gen_synthetic(self.n_train, s + 2, &self.target_style, "tgt_"),
            target_val: gen_synthetic(self.n_val, s + 3, &self.target_style, "tgtval_"),
        }
    }
}

pub struct StageResult {
    pub model: GrounderModel,
    pub report: TrainReport,
    /// Mean box IoU on the validation split of the stage's domain.
    pub val_iou: f64,
}

pub struct RecipeOutcome {
    pub pretrain: StageResult,
    /// Host IoU on the target validation split before adaptation.
    pub host_target_iou: f64,
    pub full_finetune: StageResult,
    pub lora: StageResult,
    pub data: RecipeData,
}

impl RecipeOutcome {
    pub fn lora_to_full_ratio(&self) -> f64 {
        self.lora.val_iou / self.full_finetune.val_iou
    }
}

fn stage(
    mut model: GrounderModel,
    train_set: &[ImageSample],
    val: &[ImageSample],
    cfg: &TrainConfig,
) -> Result<StageResult, GrounderError> {
    let report = train(&mut model, train_set, cfg)?;
    let val_iou = evaluate_iou(&model, val)?;
    Ok(StageResult { model, report, val_iou })
}

pub fn run_recipe(recipe: &Recipe) -> Result<RecipeOutcome, GrounderError> {
    let data = recipe.data();
    let host = GrounderModel::new(recipe.model_seed)?;
    let pretrain = stage(host, &data.source_train, &data.source_val, &recipe.pretrain)?;
    let host_target_iou = evaluate_iou(&pretrain.model, &data.target_val)?;
    let full_finetune = stage(
        pretrain.model.clone(),
        &data.target_train,
        &data.target_val,
        &recipe.full_finetune,
    )?;
    let lora = stage(
        pretrain.model.clone(),
        &data.target_train,
        &data.target_val,
        &recipe.lora,
    )?;
    Ok(RecipeOutcome {
        pretrain,
        host_target_iou,
        full_finetune,
        lora,
        data,
    })
}
