//! Tiny model and dataset shared by the training-level tests.
#![allow(dead_code)]

use migs_core::discriminators::DiscriminatorConfig;
use migs_core::generators::{CrnConfig, GeneratorConfig, SpadeConfig};
use migs_core::graphnet::GcnConfig;
use migs_core::meta::ScenePool;
use migs_core::model::{DecoderKind, ModelConfig, Pipeline, Profile};
use migs_core::synthdata::{Dataset, DatasetConfig, TaskData};

pub const SIZE: usize = 16;

pub fn tiny_model(decoder: DecoderKind) -> ModelConfig {
    let generator = match decoder {
        DecoderKind::Crn => GeneratorConfig::Crn(CrnConfig {
            num_blocks: 2,
            channels: vec![6, 4],
            ..CrnConfig::desk()
        }),
        DecoderKind::Spade => GeneratorConfig::Spade(SpadeConfig {
            num_blocks: 2,
            channels: vec![6, 4],
            modulation_width: 4,
            latent_dim: 4,
            ..SpadeConfig::desk()
        }),
    };
    ModelConfig {
        gcn: GcnConfig {
            embed_dim: 6,
            num_layers: 1,
            propagation_hidden: 8,
            update_hidden: 8,
            box_head_hidden: 6,
            mask_size: 4,
        },
        generator,
        discriminator: DiscriminatorConfig {
            global_channels: vec![4, 4],
            object_channels: vec![4, 4],
            crop_size: 8,
        },
        ..ModelConfig::for_profile(Profile::Desk, decoder)
    }
}

pub fn tiny_data() -> Dataset {
    Dataset::generate(&DatasetConfig {
        num_tasks: 3,
        num_test_tasks: 1,
        scenes_per_task: 12,
        test_scenes_per_task: 4,
        max_shots: 5,
        image_height: SIZE,
        image_width: SIZE,
        ..DatasetConfig::default()
    })
    .unwrap()
}

pub fn pipeline(cfg: ModelConfig, data: &Dataset, batch: usize) -> Pipeline {
    Pipeline::new(cfg, data.vocabulary().clone(), SIZE, SIZE, batch).unwrap()
}

pub fn pool(task: &TaskData) -> ScenePool {
    ScenePool::new(task.train.iter().cloned().enumerate().collect())
}
