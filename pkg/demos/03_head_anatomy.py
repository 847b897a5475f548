"""Anatomy of the head on one episode: pooling, prototypes, logits.

Run:  python demos/03_head_anatomy.py
"""

import os
import tempfile

import numpy as np

from mivhead import episodes, head
from mivhead.episodes import SynthConfig
from mivhead.head import BlockHead, HeadConfig

pack = episodes.synth_generate(
    SynthConfig(n_classes=6, images_per_class=8,
                blocks=[(-2, 6, 6, 32), (-1, 4, 4, 32)],
                modes_per_class=3, latent_dim=12,
                distractor_fraction=0.5, bg_scale=2.0,
                patch_noise=0.15, mode_noise=0.4, seed=9),
    os.path.join(tempfile.mkdtemp(prefix="head-demo-"), "pack"))

cfg = HeadConfig(
    backbone_family="cnn", tau=60.0,
    blocks=(BlockHead(-2, shapes=((3, 3), (4, 4), (6, 6)), heads=1),
            BlockHead(-1, shapes=((2, 2), (3, 3), (4, 4)), heads=1)))
shapes = {b: pack.block_shape(b) for b in pack.block_ids}
params = head.init_params(cfg, shapes)

# Stage 1 on one record: candidates compete to represent the image. At the
# zero init both attention stages are exact average pooling.
rec = pack.record("c0_i0")
cands = head.build_candidates(rec.block(-2), cfg.blocks[0], "cnn")
print("candidate patch counts:", [c.shape[0] for c in cands])
pooled = [head.pool_candidate(c, params["b-2.theta"], cfg.resolved_tau, "cnn")
          for c in cands]
m = head.pool_image(pooled, None, params["b-2.mu"], cfg.resolved_tau, "cnn")
gap = np.mean([c.mean(axis=0) for c in cands], axis=0)
print("zero-init image vector == candidate/patch mean:",
      np.allclose(m[0], gap, atol=1e-12))

# Stage 2: a class bag and a query meet in cross-attention pooling. The bag
# attention is an L1-distance z-score: instances whose keys sit close to the
# query's key take more of the prototype.
support = {l: [pack.record(f"c{l}_i{k}") for k in range(3)] for l in range(3)}
query = pack.record("c1_i5")
c_dba, s_dba = head.dba_constants(32)
print(f"distance z-score constants for d=32: c={c_dba:.3f} s={s_dba:.3f}")

bag = np.stack([head.pool_image(
    [head.pool_candidate(c, params["b-1.theta"], 60.0, "cnn")
     for c in head.build_candidates(r.block(-1), cfg.blocks[1], "cnn")],
    None, params["b-1.mu"], 60.0, "cnn")[0] for r in support[1]])
qm = head.pool_image(
    [head.pool_candidate(c, params["b-1.theta"], 60.0, "cnn")
     for c in head.build_candidates(query.block(-1), cfg.blocks[1], "cnn")],
    None, params["b-1.mu"], 60.0, "cnn")
v_p, v_q = head.cap_forward(bag, qm, params, cfg, -1)
print("prototype and transformed query:", v_p.shape, v_q.shape)

# Stage 3: centered cosine per block, then a smooth max across blocks.
logits = head.head_forward(support, query, params, cfg)
print("episode logits:", np.round(logits, 3), "-> predicted class",
      sorted(support)[int(np.argmax(logits))], "(true 1)")
