"""A small end-to-end benchmark: suite runs, ablation toggles, the report.

Run:  python demos/05_benchmark_and_report.py      (about a minute)

The same flow is scriptable through the CLI:

    mivhead synth --config suite.json --out data
    mivhead run --pack data/pack --tasks data/tasks.jsonl --method miv \
        --out miv.results.jsonl
    mivhead run --pack data/pack --tasks data/tasks.jsonl --method ncc \
        --out ncc.results.jsonl
    mivhead report --inputs miv.results.jsonl ncc.results.jsonl \
        --pair miv:ncc --out report
"""

import os
import tempfile

from mivhead import adapt, episodes, stats
from mivhead.episodes import SampleParams, SynthConfig
from mivhead.head import BlockHead, HeadConfig, TrainConfig

workdir = tempfile.mkdtemp(prefix="bench-demo-")
pack = episodes.synth_generate(
    SynthConfig(n_classes=12, images_per_class=12,
                blocks=[(-2, 6, 6, 32), (-1, 4, 4, 32)],
                modes_per_class=3, latent_dim=12,
                distractor_fraction=0.5, bg_scale=2.0,
                block_bg_gain=[1.8, 1.0],
                patch_noise=0.15, mode_noise=0.4,
                pseudo_per_image=15, seed=7),
    os.path.join(workdir, "pack"))
tasks = episodes.sample_tasks(
    pack, 12, "varying",
    SampleParams(max_ways=6, max_shots=4, queries_per_class=5,
                 aug_threshold=15),
    seed=303)

full = HeadConfig(
    backbone_family="cnn", tau=60.0,
    blocks=(BlockHead(-2, shapes=((3, 3), (4, 4), (6, 6)), heads=1),
            BlockHead(-1, shapes=((2, 2), (3, 3), (4, 4)), heads=1)))

# Ablation toggles are plain config edits: swap cross-attention pooling for
# bag averaging, swap attention pooling for GAP, or drop to a single block.
variants = {
    "miv-full": full,
    "miv-avgpool-protos": HeadConfig(**{**full.__dict__, "use_cap": False}),
    "miv-gap": HeadConfig(**{**full.__dict__, "use_pooling_attention": False}),
    "miv-last-block": HeadConfig(**{**full.__dict__,
                                    "blocks": full.blocks[-1:]}),
}

series = []
for label, cfg in variants.items():
    rows = adapt.run_suite(pack.path, tasks, {"name": "miv"}, cfg,
                           workers=2, seed=0)
    series.append(stats.MethodSeries.from_rows(rows, method=label))
rows = adapt.run_suite(pack.path, tasks, {"name": "ncc"}, workers=2)
series.append(stats.MethodSeries.from_rows(rows, method="ncc"))

text, payload = stats.render_report(
    series,
    pairings=[("miv-full", "ncc"), ("miv-full", "miv-avgpool-protos"),
              ("miv-full", "miv-gap")])
print(text)
