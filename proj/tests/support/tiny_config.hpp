#pragma once

#include "m3face/pipeline.hpp"

namespace m3face::fixtures {

// Seconds-scale config: 16 px corpus, 4x4 token grid, pixel-space diffusion.
inline nlohmann::json tiny_config_json() {
    pipeline::RunConfig c;
    c.data.seed = 3;
    c.data.root = "corpus";
    c.data.count = 10;
    c.data.raw_size = 64;
    c.data.size = 16;
    c.vq.seed = 5;
    c.vq.steps = 12;
    c.vq.checkpoint_every = 5;
    c.vq.model.image_size = 16;
    c.vq.model.codebook_size = 16;
    c.vq.model.embed_dim = 8;
    c.vq.model.channels = {8, 8, 8};
    c.muse.seed = 7;
    c.muse.steps = 12;
    c.muse.checkpoint_every = 5;
    c.muse.decode_steps = 4;
    c.muse.model.layers = 1;
    c.muse.model.model_dim = 16;
    c.muse.model.mlp_dim = 32;
    c.muse.model.codebook_size = 16;
    c.muse.model.grid_height = 4;
    c.muse.model.grid_width = 4;
    c.muse.model.context_dim = 16;
    c.controlnet.seed = 9;
    c.controlnet.first_stage = false;
    c.controlnet.backbone_steps = 6;
    c.controlnet.recipe.epochs = 1;
    c.controlnet.recipe.batch_size = 10;
    c.controlnet.recipe.grad_accumulation = 1;
    c.controlnet.model.latent_channels = 3;
    c.controlnet.model.latent_size = 16;
    c.controlnet.model.condition_size = 16;
    c.controlnet.model.base_channels = 8;
    c.controlnet.model.mid_channels = 8;
    c.controlnet.model.time_dim = 8;
    c.controlnet.model.context_dim = 16;
    c.controlnet.model.hint_channels = 4;
    c.controlnet.sample.steps = 3;
    c.edit.seed = 11;
    c.edit.optimize_steps = 2;
    c.edit.probes = 1;
    c.edit.finetune_steps = 2;
    c.eval.seed = 13;
    c.eval.feature_dim = 4;
    return c.to_json();
}

}  // namespace m3face::fixtures
