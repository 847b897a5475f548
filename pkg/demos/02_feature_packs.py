"""Feature packs: the on-disk format and the synthetic generator.

Run:  python demos/02_feature_packs.py
"""

import os
import tempfile

import numpy as np

from mivhead import episodes
from mivhead.episodes import SampleParams, SynthConfig
from mivhead.fmpack import read_pack

workdir = tempfile.mkdtemp(prefix="fmpack-demo-")

# A pack holds per-image, per-block patch feature maps from a frozen
# backbone. The synthetic generator emulates one: each class is a mixture of
# a few latent modes, every patch is a linear map of the image latent, and a
# per-image share of patch positions is replaced by draws from a background
# pool common to all classes. That varying share is the point: the relevance
# of any one patch (or any one support image) to its class label is unknown.
cfg = SynthConfig(
    n_classes=10, images_per_class=10,
    blocks=[(-2, 6, 6, 32), (-1, 4, 4, 32)],
    modes_per_class=3, latent_dim=12,
    distractor_fraction=0.5, bg_scale=2.0,
    patch_noise=0.15, mode_noise=0.4,
    pseudo_per_image=15,  # augmented twins for low-shot training
    seed=42,
)
pack = episodes.synth_generate(cfg, os.path.join(workdir, "pack"))
print("pack at", pack.path)
print("family", pack.backbone_family, "| blocks",
      {b: pack.block_shape(b) for b in pack.block_ids})
print("records:", len(pack.image_ids()),
      "(pseudo:", len(pack.image_ids(role="pseudo_query")), ")")

rec = pack.record("c0_i0")
print("c0_i0 block -1 patches:", rec.blocks[1].patches.shape)

# Tasks are sampled from the pack: varying ways, log-uniform shots, disjoint
# support/query, and pseudo-query slots bound per the max(1, floor(T/S)) rule.
tasks = episodes.sample_tasks(
    pack, 5, "varying",
    SampleParams(max_ways=6, max_shots=4, queries_per_class=5,
                 aug_threshold=15),
    seed=1)
for t in tasks[:3]:
    shots = {c: len(v) for c, v in t.support.items()}
    print(f"{t.task_id}: ways={len(t.class_ids)} shots={shots} "
          f"queries={len(t.queries)} pseudo={len(t.pseudo_queries)}")

# Round trip is bit-exact: float32 on disk, widened to float64 in memory.
again = read_pack(pack.path)
same = np.array_equal(again.record("c0_i0").blocks[0].patches,
                      rec.blocks[0].patches)
print("re-read identical:", same)
