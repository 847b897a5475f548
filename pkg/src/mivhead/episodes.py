"""Few-shot task sampling and the synthetic frozen-backbone generator.

Tasks are sampled from a pack in one of two modes:

* ``varying`` — ways uniform on {5..max_ways}, shots log-uniform in
  [1, max_shots], a fixed query budget per class (reduced when a class is
  short on images).
* ``five_way_one_shot`` — the classic 5-way 1-shot schema.

Support and query sets are disjoint within a task. Classes whose shot count
falls below the augmentation threshold T get pseudo-query slots,
max(1, floor(T / S)) per class; slots bind to the pack's pseudo-query
records when it has them (synthetic packs) and otherwise stay unbound as a
demand list for an exporter.

The generator builds packs whose bags have unknown-relevance structure:
multi-modal classes (class = a few latent modes), and a fraction of patch
positions per image replaced by background draws shared across classes.
Both the sampler and the generator are pure functions of (inputs, seed);
sub-streams are derived with numpy's SeedSequence spawning.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from .fmpack import BlockFeatures, ImageRecord, Pack, read_pack, write_pack


class SamplingError(ValueError):
    """Pack cannot support the requested task schema."""


def pseudo_query_count(shots: int, threshold: int) -> int:
    """Pseudo-query slots for a class with `shots` support images."""
    if threshold <= 0 or shots >= threshold:
        return 0
    return max(1, threshold // shots)


@dataclass
class TaskSpec:
    task_id: str
    class_ids: list[int]
    support: dict[int, list[str]]
    queries: list[tuple[str, int]]
    pseudo_queries: list[tuple[str | None, str, int]]  # (image_id, source_id, label)

    def to_json(self) -> str:
        return json.dumps({
            "task_id": self.task_id,
            "class_ids": self.class_ids,
            "support": {str(k): v for k, v in self.support.items()},
            "queries": [[i, l] for i, l in self.queries],
            "pseudo_queries": [[i, s, l] for i, s, l in self.pseudo_queries],
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "TaskSpec":
        raw = json.loads(line)
        return cls(
            task_id=raw["task_id"],
            class_ids=list(raw["class_ids"]),
            support={int(k): list(v) for k, v in raw["support"].items()},
            queries=[(i, int(l)) for i, l in raw["queries"]],
            pseudo_queries=[(i, s, int(l)) for i, s, l in raw["pseudo_queries"]],
        )


def write_tasks(tasks: list[TaskSpec], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in tasks:
            fh.write(t.to_json() + "\n")


def read_tasks(path: str) -> list[TaskSpec]:
    with open(path, encoding="utf-8") as fh:
        return [TaskSpec.from_json(line) for line in fh if line.strip()]


@dataclass
class SampleParams:
    max_ways: int = 20
    max_shots: int = 30
    queries_per_class: int = 10
    aug_threshold: int = 15  # T; 0 disables pseudo-queries


def _bind_pseudo(pack: Pack, support_ids: list[str], count: int,
                 label: int) -> list[tuple[str | None, str, int]]:
    """Assign pseudo slots round-robin over the class's support images."""
    pack_has_pseudo = bool(pack.image_ids(role="pseudo_query"))
    out = []
    for i in range(count):
        source = support_ids[i % len(support_ids)]
        redraw = i // len(support_ids)
        if not pack_has_pseudo:
            out.append((None, source, label))
            continue
        avail = pack.pseudo_ids_by_source(source)
        if redraw >= len(avail):
            raise SamplingError(
                f"pack has pseudo-query records but too few for source "
                f"{source!r} (need {redraw + 1}, have {len(avail)})")
        out.append((avail[redraw], source, label))
    return out


def sample_tasks(pack: Pack, n_tasks: int, mode: str,
                 params: SampleParams | None = None,
                 seed: int = 0) -> list[TaskSpec]:
    params = params or SampleParams()
    if mode not in ("varying", "five_way_one_shot"):
        raise SamplingError(f"unknown sampling mode {mode!r}")
    if params.max_ways < 5:
        raise SamplingError("max_ways must be at least 5")
    by_class = {c: pack.ids_by_class(c) for c in pack.class_ids()}
    eligible = sorted(c for c, ids in by_class.items() if len(ids) >= 2)
    if len(eligible) < 5:
        raise SamplingError(
            f"need at least 5 classes with >= 2 images, have {len(eligible)}")

    streams = np.random.SeedSequence(seed).spawn(n_tasks)
    tasks = []
    for t_idx in range(n_tasks):
        rng = np.random.default_rng(streams[t_idx])
        if mode == "five_way_one_shot":
            ways = 5
        else:
            hi = min(params.max_ways, len(eligible))
            ways = int(rng.integers(5, hi + 1))
        class_ids = [int(c) for c in rng.choice(eligible, size=ways, replace=False)]
        support: dict[int, list[str]] = {}
        queries: list[tuple[str, int]] = []
        pseudo: list[tuple[str | None, str, int]] = []
        for label in class_ids:
            ids = by_class[label]
            if mode == "five_way_one_shot":
                shots = 1
            else:
                shots = int(math.exp(rng.uniform(0.0, math.log(params.max_shots))))
                shots = max(1, min(shots, len(ids) - 1))
            n_q = min(params.queries_per_class, len(ids) - shots)
            perm = rng.permutation(len(ids))
            support[label] = [ids[i] for i in perm[:shots]]
            queries.extend((ids[i], label) for i in perm[shots:shots + n_q])
            count = pseudo_query_count(shots, params.aug_threshold)
            if count:
                pseudo.extend(_bind_pseudo(pack, support[label], count, label))
        tasks.append(TaskSpec(
            task_id=f"task{t_idx:04d}",
            class_ids=class_ids,
            support=support,
            queries=queries,
            pseudo_queries=pseudo,
        ))
    return tasks


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    n_classes: int
    images_per_class: int
    blocks: list[tuple[int, int, int, int]]  # (block_id, h, w, c)
    modes_per_class: int = 3
    latent_dim: int = 16
    map_seed: int = 0
    distractor_fraction: float = 0.5
    bg_modes: int = 4  # shared background pool (class-independent latents)
    bg_scale: float = 1.0  # latent scale of background draws
    block_bg_gain: list[float] | None = None  # per-block distractor multiplier
    patch_noise: float = 0.1
    mode_noise: float = 0.1
    cls_noise: float | None = None  # not None => vit pack with a cls row
    pseudo_per_image: int = 0
    seed: int = 0

    @property
    def backbone_family(self) -> str:
        return "vit" if self.cls_noise is not None else "cnn"

    def validate(self) -> None:
        if self.n_classes < 1 or self.images_per_class < 1:
            raise ValueError("n_classes and images_per_class must be positive")
        if not self.blocks:
            raise ValueError("at least one block is required")
        if not (0.0 <= self.distractor_fraction < 1.0):
            raise ValueError("distractor_fraction must be in [0, 1)")
        for s in (self.patch_noise, self.mode_noise, self.cls_noise or 0.0):
            if s < 0:
                raise ValueError("noise scales must be non-negative")
        if self.modes_per_class < 1 or self.latent_dim < 1:
            raise ValueError("modes_per_class and latent_dim must be positive")
        if self.bg_modes < 1:
            raise ValueError("bg_modes must be positive")
        if self.bg_scale < 0:
            raise ValueError("bg_scale must be non-negative")
        if self.block_bg_gain is not None:
            if len(self.block_bg_gain) != len(self.blocks):
                raise ValueError("block_bg_gain must match the block list")
            if any(g < 0 for g in self.block_bg_gain):
                raise ValueError("block_bg_gain must be non-negative")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _draw_blocks(cfg: SynthConfig, maps, z, bg_pool, frac, rng
                 ) -> list[BlockFeatures]:
    blocks = []
    gains = cfg.block_bg_gain or [1.0] * len(cfg.blocks)
    for (bid, h, w, c), w_map, gain in zip(cfg.blocks, maps, gains):
        n_patch = h * w
        rows = np.tile(z @ w_map, (n_patch, 1))
        n_bg = round(min(frac * gain, 0.97) * n_patch)
        if n_bg:
            pos = rng.choice(n_patch, size=n_bg, replace=False)
            picks = rng.integers(cfg.bg_modes, size=n_bg)
            rows[pos] = bg_pool[picks] @ w_map
        rows = rows + cfg.patch_noise * rng.standard_normal((n_patch, c))
        cls = None
        if cfg.backbone_family == "vit":
            cls = z @ w_map + cfg.cls_noise * rng.standard_normal(c)
        blocks.append(BlockFeatures(block_id=bid, patches=rows.reshape(h, w, c),
                                    cls=cls))
    return blocks


def _image_bg_fraction(cfg: SynthConfig, rng) -> float:
    """Per-image distractor share: uniform with mean `distractor_fraction`,
    capped below 1 so at least some patches stay relevant. The varying share
    is what makes instance relevance unknown."""
    if cfg.distractor_fraction == 0.0:
        return 0.0
    return float(rng.uniform(0.0, min(2.0 * cfg.distractor_fraction, 0.97)))


def synth_records(cfg: SynthConfig) -> list[ImageRecord]:
    """Materialize all records of the configured pack, deterministically."""
    cfg.validate()
    map_rng = np.random.default_rng(np.random.SeedSequence(cfg.map_seed))
    maps = [map_rng.standard_normal((cfg.latent_dim, c)) / math.sqrt(cfg.latent_dim)
            for (_, _, _, c) in cfg.blocks]
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    bg_pool = cfg.bg_scale * rng.standard_normal((cfg.bg_modes, cfg.latent_dim))

    latents: dict[str, np.ndarray] = {}
    records = []
    for label in range(cfg.n_classes):
        modes = rng.standard_normal((cfg.modes_per_class, cfg.latent_dim))
        for i in range(cfg.images_per_class):
            mode = modes[rng.integers(cfg.modes_per_class)]
            z = mode + cfg.mode_noise * rng.standard_normal(cfg.latent_dim)
            image_id = f"c{label}_i{i}"
            latents[image_id] = z
            frac = _image_bg_fraction(cfg, rng)
            records.append(ImageRecord(
                image_id=image_id, class_label=label, role="support",
                blocks=_draw_blocks(cfg, maps, z, bg_pool, frac, rng)))
    for label in range(cfg.n_classes):
        for i in range(cfg.images_per_class):
            source = f"c{label}_i{i}"
            z = latents[source]
            for k in range(cfg.pseudo_per_image):
                frac = _image_bg_fraction(cfg, rng)
                records.append(ImageRecord(
                    image_id=f"{source}_pq{k}", class_label=label,
                    role="pseudo_query", source_id=source,
                    blocks=_draw_blocks(cfg, maps, z, bg_pool, frac, rng)))
    return records


def synth_generate(cfg: SynthConfig, out_dir: str) -> Pack:
    records = synth_records(cfg)
    write_pack(records, cfg.backbone_family, out_dir, provenance=cfg.to_json())
    return read_pack(out_dir)
