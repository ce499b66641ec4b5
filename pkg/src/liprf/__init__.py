"""Voxel radiance fields with Lipschitz-constrained photorealistic stylization."""

from .field import VoxelField, eval_color, eval_sh_basis, map_sh, sample_field
from .lipnet import (LipLayer, LipschitzNet, build_net, effective_weight, forward,
                     lip_reg_loss, lipschitz_constant, power_iter_norm, squareplus)
from .render import (Ray, RenderCache, generate_ray, render_color, render_depth,
                     render_view, render_weights, vrr)
from .scene_io import (Camera, Checkpoint, SceneDataset, load_checkpoint, load_scene,
                       read_image, save_checkpoint, write_image)
from .train import (TrainConfig, bake_field, cosine_lr, interpolate_fields,
                    train_liprf, train_reconstruction)

__version__ = "0.1.0"
