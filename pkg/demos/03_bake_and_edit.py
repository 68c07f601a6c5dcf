# %% [markdown]
# # Stage II: baking into attribute maps, then editing them
#
# The prefilter network turns fixed noise into an 11-channel UV map. Each
# stage-I splat reads its scale, rotation, color, opacity and offset back by
# bilinear lookup at its anchor. Once baked, the maps are plain textures that
# can be exported, painted on and imported again.

# %%
import tempfile
from pathlib import Path

import numpy as np

from uvsplat.baking import (BakeConfig, apply_sticker, bake_train, direct_map_train, export_texture,
                            save_baked, total_variation)
from uvsplat.imageio import write_image
from uvsplat.raster import render
from uvsplat.synth import SceneConfig, synth
from uvsplat.train import TrainConfig, Trainer, evaluate, frame_state

root = Path(tempfile.mkdtemp(prefix="uvsplat_demo03_"))
scene = synth(SceneConfig(num_frames=10, width=48, height=48, focal=52.0, texture_res=128, supersample=2),
              seed=0, out_dir=root / "scene")
stage1 = Trainer(scene, TrainConfig(num_splats=1500, iterations=300, densify_interval=100,
                                    densify_count=100, prune_interval=80, opacity_reset_interval=250)).run()
print("stage I: %.2f dB" % evaluate(stage1.splats, stage1.delta_pose, stage1.delta_expr, scene).mean_psnr)

# %% [markdown]
# A small bake (64x64 maps, two pooling levels) keeps this demo quick.

# %%
cfg = BakeConfig(resolution=64, base_width=8, depth=2, iterations=150)
parts = (stage1.splats, stage1.delta_pose, stage1.delta_expr)
baked = bake_train(parts, scene, cfg)
psnr = evaluate(baked.maps.splats(baked.anchors, scene.mesh), baked.delta_pose, baked.delta_expr, scene).mean_psnr
print("baked: %.2f dB" % psnr)
save_baked(root / "baked.uvgs", baked)

# %% [markdown]
# Per-texel optimization only updates texels that some splat samples, so the
# rest keep their noise. The prefilter's shared weights give a smoother map.

# %%
direct = direct_map_train(parts, scene, cfg)
print("color TV: baked %.0f, direct %.0f" % (total_variation(baked.maps.maps[6:9]),
                                             total_variation(direct.maps.maps[6:9])))

# %% [markdown]
# Paste a red square into the color map and render a held-out view.

# %%
edited, mask = apply_sticker(baked.maps, np.broadcast_to([1.0, 0.1, 0.1], (8, 8, 3)), (0.55, 0.35, 0.8, 0.6))
print(int(mask.sum()), "texels edited")
export_texture(edited, "color", root / "color.ppm")
frame = scene.split("test")[0]
splats = edited.splats(baked.anchors, scene.mesh)
img = render(splats, frame_state(scene.mesh, frame, baked.delta_pose, baked.delta_expr), frame.camera,
             scene.background).image
write_image(root / "sticker.ppm", img)
print("outputs in", root)
