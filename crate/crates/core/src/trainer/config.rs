use alloc::format;

use serde::{Deserialize, Serialize};

use super::augment::AugmentPolicy;
use super::lars::LarsConfig;
use crate::distill::LossConfig;
use crate::error::{Error, Result};
use crate::model::{BackboneSpec, HeadConfig, MhsaConfig, StageSpec, StudentSpec, TeacherHeadMode, TeacherSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub num_images: usize,
    pub image_size: usize,
    /// Training resolution of the augmented views.
    pub input_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub epochs: f64,
    pub warmup_epochs: f64,
    /// Overrides the epoch budget; warmup keeps its share.
    pub max_steps: Option<u64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub trust_coefficient: f64,
    pub exclude_from_adaptation: bool,
}

impl OptimConfig {
    pub fn lars(&self) -> LarsConfig {
        LarsConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            trust_coefficient: self.trust_coefficient,
            exclude_from_adaptation: self.exclude_from_adaptation,
        }
    }

    fn validate(&self, path: &str) -> Result<()> {
        let bad = |field: &str, reason: alloc::string::String| Error::Config {
            path: format!("{path}.{field}"),
            reason,
        };
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(bad("base_lr", format!("must be positive, got {}", self.base_lr)));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be positive".into()));
        }
        if !(self.epochs > 0.0) || !self.epochs.is_finite() {
            return Err(bad("epochs", format!("must be positive, got {}", self.epochs)));
        }
        if !(self.warmup_epochs >= 0.0) || self.warmup_epochs >= self.epochs {
            return Err(bad("warmup_epochs", format!("need 0 <= warmup_epochs < epochs, got {}", self.warmup_epochs)));
        }
        if self.max_steps == Some(0) {
            return Err(bad("max_steps", "must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(bad("momentum", format!("must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(bad("weight_decay", format!("must be non-negative, got {}", self.weight_decay)));
        }
        if !(self.trust_coefficient > 0.0) || !self.trust_coefficient.is_finite() {
            return Err(bad("trust_coefficient", format!("must be positive, got {}", self.trust_coefficient)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub optim: OptimConfig,
    pub tau: f64,
    /// Skip training and save the randomly initialized teacher.
    pub frozen_random: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueueConfig {
    pub capacity: usize,
    /// Fill the queue with teacher features before the first step.
    pub prefill: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    pub drop_last_bn: bool,
    pub trials: usize,
    pub tol: f64,
    pub teacher_head: TeacherHeadMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportConfig {
    pub norm_rescale: bool,
    pub anchor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErfConfig {
    pub input_size: usize,
    pub samples: usize,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub teacher: TeacherSpec,
    pub student: StudentSpec,
    pub pretrain: PretrainConfig,
    /// Distillation optimizer.
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub queue: QueueConfig,
    pub augment: AugmentPolicy,
    pub adapt: AdaptConfig,
    pub export: ExportConfig,
    pub erf: ErfConfig,
}

fn stages(s: &[(usize, usize, usize)]) -> alloc::vec::Vec<StageSpec> {
    s.iter()
        .map(|&(blocks, channels, stride)| StageSpec { blocks, channels, stride })
        .collect()
}

impl Default for Config {
    fn default() -> Self {
        Config::desk()
    }
}

impl Config {
    /// Desk-scale defaults: runs in minutes on one CPU core.
    pub fn desk() -> Self {
        let optim = OptimConfig {
            base_lr: 0.1,
            batch_size: 64,
            epochs: 5.0,
            warmup_epochs: 0.5,
            max_steps: None,
            momentum: 0.9,
            weight_decay: 1e-5,
            trust_coefficient: 1.0,
            exclude_from_adaptation: true,
        };
        Config {
            seed: 0,
            data: DataConfig {
                num_images: 2048,
                image_size: 32,
                input_size: 24,
            },
            teacher: TeacherSpec {
                backbone: BackboneSpec {
                    in_channels: 3,
                    stem_channels: 16,
                    stages: stages(&[(1, 16, 1), (2, 32, 2), (2, 64, 2)]),
                },
                head_hidden: 128,
                head_dim: 32,
            },
            student: StudentSpec {
                backbone: BackboneSpec {
                    in_channels: 3,
                    stem_channels: 8,
                    stages: stages(&[(1, 8, 1), (1, 16, 2), (1, 32, 2)]),
                },
                head: HeadConfig {
                    hidden: 64,
                    dim: 32,
                    blocks: 2,
                },
                mhsa: Some(MhsaConfig { heads: 2, head_dim: 16 }),
            },
            pretrain: PretrainConfig {
                optim: OptimConfig { base_lr: 0.02, ..optim },
                tau: 0.2,
                frozen_random: false,
            },
            optim,
            loss: LossConfig::default(),
            queue: QueueConfig {
                capacity: 4096,
                prefill: true,
            },
            augment: AugmentPolicy::default(),
            adapt: AdaptConfig {
                drop_last_bn: false,
                trials: 64,
                tol: 1e-5,
                teacher_head: TeacherHeadMode::Adapted,
            },
            export: ExportConfig {
                norm_rescale: true,
                anchor: 0.25,
            },
            erf: ErfConfig {
                input_size: 48,
                samples: 64,
                mass: 0.95,
            },
        }
    }

    /// Full-scale training recipe: batch 1024, 100 epochs with
    /// 10 warmup epochs to a peak lr of 4.0, queue 65536, τ = 0.2.
    pub fn full_scale() -> Self {
        let mut c = Config::desk();
        let optim = OptimConfig {
            base_lr: 1.0,
            batch_size: 1024,
            epochs: 100.0,
            warmup_epochs: 10.0,
            max_steps: None,
            momentum: 0.9,
            weight_decay: 1e-5,
            trust_coefficient: 1e-3,
            exclude_from_adaptation: true,
        };
        c.data = DataConfig {
            num_images: 1_281_167,
            image_size: 256,
            input_size: 224,
        };
        c.teacher = TeacherSpec {
            backbone: BackboneSpec {
                in_channels: 3,
                stem_channels: 64,
                stages: stages(&[(3, 64, 1), (4, 128, 2), (6, 256, 2), (3, 512, 2)]),
            },
            head_hidden: 4096,
            head_dim: 256,
        };
        c.student = StudentSpec {
            backbone: BackboneSpec {
                in_channels: 3,
                stem_channels: 64,
                stages: stages(&[(2, 64, 1), (2, 128, 2), (2, 256, 2), (2, 512, 2)]),
            },
            head: HeadConfig {
                hidden: 2048,
                dim: 256,
                blocks: 2,
            },
            mhsa: Some(MhsaConfig { heads: 8, head_dim: 64 }),
        };
        c.pretrain.optim = optim;
        c.optim = optim;
        c.queue.capacity = 65536;
        c.adapt.drop_last_bn = true;
        c.erf.input_size = 224;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, reason: alloc::string::String| Error::Config { path: path.into(), reason };
        if self.data.image_size < super::data::MIN_IMAGE_SIZE {
            return Err(bad("data.image_size", format!("must be at least {}", super::data::MIN_IMAGE_SIZE)));
        }
        self.teacher.backbone.validate().map_err(|e| bad("teacher.backbone", format!("{e}")))?;
        self.student.validate().map_err(|e| bad("student", format!("{e}")))?;
        if self.teacher.head_hidden == 0 || self.teacher.head_dim == 0 {
            return Err(bad("teacher.head_dim", "head sizes must be positive".into()));
        }
        for (path, spec) in [("teacher.backbone", &self.teacher.backbone), ("student.backbone", &self.student.backbone)] {
            if spec.in_channels != 3 {
                return Err(bad(&format!("{path}.in_channels"), "images are RGB; must be 3".into()));
            }
            spec.output_size(self.data.input_size, self.data.input_size)
                .map_err(|e| bad("data.input_size", format!("{e}")))?;
        }
        let teacher_dim = match self.adapt.teacher_head {
            TeacherHeadMode::Adapted => self.teacher.head_dim,
            TeacherHeadMode::BackboneOnly => self.teacher.backbone.out_channels(),
        };
        if teacher_dim != self.student.head.dim {
            return Err(bad(
                "student.head.dim",
                format!("must equal the teacher output dim {teacher_dim}, got {}", self.student.head.dim),
            ));
        }
        self.pretrain.optim.validate("pretrain.optim")?;
        if !(self.pretrain.tau > 0.0) || !self.pretrain.tau.is_finite() {
            return Err(bad("pretrain.tau", format!("must be a positive number, got {}", self.pretrain.tau)));
        }
        self.optim.validate("optim")?;
        self.loss.validate()?;
        self.augment.validate()?;
        if self.adapt.trials == 0 {
            return Err(bad("adapt.trials", "must be positive".into()));
        }
        if !(self.adapt.tol > 0.0) {
            return Err(bad("adapt.tol", format!("must be positive, got {}", self.adapt.tol)));
        }
        if !(self.export.anchor > 0.0) || !self.export.anchor.is_finite() {
            return Err(bad("export.anchor", format!("must be a positive number, got {}", self.export.anchor)));
        }
        if self.erf.input_size == 0 || self.erf.samples == 0 {
            return Err(bad("erf.samples", "input size and sample count must be positive".into()));
        }
        if !(self.erf.mass > 0.0 && self.erf.mass <= 1.0) {
            return Err(bad("erf.mass", format!("must lie in (0, 1], got {}", self.erf.mass)));
        }
        Ok(())
    }
}
