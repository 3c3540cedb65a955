//! Shared fixtures for the pipeline and acceptance tests.

use dmrigen::pipeline::PipelineConfig;

/// A seconds-scale configuration exercising every stage.
pub const TINY: &str = "
data.subjects = 6
data.paired = 2
data.test_fraction = 0.34
phantom.source_dims = 8
phantom.target_dims = 10
phantom.source_voxel = 1.25
phantom.target_voxel = 1.0
phantom.source_directions = 20
phantom.target_directions = 24
phantom.mask_radius = 4
vq.base_channels = 4
vq.embedding_dim = 6
vq.num_embeddings = 16
vq.epochs = 2
finetune.epochs = 2
scratch.epochs = 2
ldm.steps = 100
ldm.channels = 8,16
ldm.blocks = 1
ldm.attention_levels = 1
ldm.heads = 2
ldm.context_tokens = 2
ldm.context_dim = 8
ldm.time_dim = 16
ldm.epochs = 2
sampler.t_enc = 20,40,60
sr.width = 4
sr.blocks = 1
sr.epochs = 2
";

pub fn tiny() -> PipelineConfig {
    PipelineConfig::parse(TINY).unwrap()
}

#[allow(dead_code)]
pub fn tiny_with(overrides: &[(&str, &str)]) -> PipelineConfig {
    let mut c = tiny();
    for (k, v) in overrides {
        c.set(k, v).unwrap();
    }
    c.validate().unwrap();
    c
}
