"""Feature-map extraction, support-set augmentation, pack writing.

The exporter performs no pooling or head math: the boundary is the raw
per-block feature map exactly as the backbone produces it. Packs are written
with an independent implementation of the FMPack layout (manifest.json +
little-endian float32 tensors.bin) so that the consumer side can cross-check
byte-exact conformance.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image
from torchvision import transforms

from .registry import get_entry, tokens_to_grid

FORMAT_VERSION = 1


class ExportError(RuntimeError):
    pass


def pseudo_view_count(shots: int, threshold: int) -> int:
    """Augmented views for a class with `shots` images (0 when shots >= T)."""
    if threshold <= 0 or shots >= threshold:
        return 0
    return max(1, threshold // shots)


@dataclass
class ExportSpec:
    backbone: str
    blocks: list[int]               # negative ids, e.g. [-2, -1]
    resolution: int                 # 224 or 84
    images: list[tuple[str, str, int]]  # (image_id, path, class_label)
    weights: str | None = "default"  # "default" | "none" | checkpoint path
    augment: bool = False
    threshold: int = 15
    randaugment_ops: int = 2
    randaugment_magnitude: int = 9
    seed: int = 0
    provenance: str = ""


def read_labels_csv(images_dir: str, labels_csv: str) -> list[tuple[str, str, int]]:
    """Rows of (image_id, path, label) from a `filename,label` csv."""
    out = []
    with open(labels_csv, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            name, label = row[0].strip(), int(row[1])
            image_id = os.path.splitext(name)[0]
            out.append((image_id, os.path.join(images_dir, name), label))
    if not out:
        raise ExportError(f"no image rows in {labels_csv!r}")
    return out


def _preprocess(entry, resolution: int):
    return transforms.Compose([
        transforms.Resize((resolution, resolution)),
        transforms.ToTensor(),
        transforms.Normalize(entry.normalize_mean, entry.normalize_std),
    ])


def _augmenter(spec: ExportSpec):
    return transforms.Compose([
        transforms.RandAugment(num_ops=spec.randaugment_ops,
                               magnitude=spec.randaugment_magnitude),
        transforms.RandomGrayscale(p=0.2),
        transforms.RandomHorizontalFlip(p=0.5),
    ])


class _FeatureTap:
    """Forward hooks on the selected block modules."""

    def __init__(self, model, block_modules, selected_ids: list[int]):
        self.outputs: dict[int, torch.Tensor] = {}
        self.handles = []
        n = len(block_modules)
        for bid in selected_ids:
            idx = bid + n if bid < 0 else bid
            if not (0 <= idx < n):
                raise ExportError(f"block id {bid} outside backbone with {n} blocks")
            module = block_modules[idx]
            self.handles.append(module.register_forward_hook(
                self._hook_for(bid)))

    def _hook_for(self, bid):
        def hook(_module, _inputs, output):
            self.outputs[bid] = output.detach()
        return hook

    def close(self):
        for h in self.handles:
            h.remove()


def _features_for(model, tap, entry, tensor) -> dict[int, dict]:
    tap.outputs.clear()
    with torch.no_grad():
        model(tensor.unsqueeze(0))
    blocks = {}
    for bid, raw in tap.outputs.items():
        if entry.family == "cnn":
            if raw.dim() != 4 or raw.shape[0] != 1:
                raise ExportError(f"unexpected cnn block shape {tuple(raw.shape)}")
            grid = raw[0].permute(1, 2, 0).contiguous()  # (h, w, c)
            blocks[bid] = {"patches": grid.numpy().astype("<f4"), "cls": None}
        else:
            grid, cls = tokens_to_grid(raw)
            blocks[bid] = {"patches": grid.numpy().astype("<f4"),
                           "cls": cls.numpy().astype("<f4")}
    return blocks


@dataclass
class _Record:
    image_id: str
    class_label: int
    role: str
    source_id: str | None
    blocks: dict[int, dict]


def _plan_views(spec: ExportSpec) -> list[tuple[str, str, int, int]]:
    """(view_id, source_id, label, per-image view index) for every pseudo view;
    the per-class total is max(1, floor(T / S)), round-robin over images."""
    by_class: dict[int, list[str]] = {}
    for image_id, _, label in spec.images:
        by_class.setdefault(label, []).append(image_id)
    views = []
    for label in sorted(by_class):
        ids = by_class[label]
        count = pseudo_view_count(len(ids), spec.threshold)
        for i in range(count):
            source = ids[i % len(ids)]
            views.append((f"{source}_pq{i // len(ids)}", source, label,
                          i // len(ids)))
    return views


def export_pack(spec: ExportSpec, out_dir: str) -> dict:
    """Run the backbone over all images (and augmented views), write the pack.

    Returns the manifest dict. Augmented views are deterministic in
    (spec.seed, view_id).
    """
    entry = get_entry(spec.backbone)
    if spec.weights in (None, "none"):
        # random init must still be a pure function of the spec seed
        torch.manual_seed(_view_seed(spec.seed, "__weights__"))
    model = entry.build(spec.weights)
    model.eval()
    block_modules = entry.blocks(model)
    tap = _FeatureTap(model, block_modules, spec.blocks)
    pre = _preprocess(entry, spec.resolution)
    augment = _augmenter(spec)

    paths = {image_id: path for image_id, path, _ in spec.images}
    records: list[_Record] = []
    try:
        for image_id, path, label in spec.images:
            with Image.open(path) as raw:
                img = raw.convert("RGB")
            records.append(_Record(image_id, label, "support", None,
                                   _features_for(model, tap, entry, pre(img))))
        if spec.augment:
            for view_id, source, label, _k in _plan_views(spec):
                with Image.open(paths[source]) as raw:
                    img = raw.convert("RGB")
                torch.manual_seed(_view_seed(spec.seed, view_id))
                distorted = augment(img)
                records.append(_Record(
                    view_id, label, "pseudo_query", source,
                    _features_for(model, tap, entry, pre(distorted))))
    finally:
        tap.close()
    return _write_pack(records, entry.family, spec, out_dir)


def _view_seed(seed: int, view_id: str) -> int:
    import hashlib
    digest = hashlib.sha256(f"{seed}/{view_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2 ** 63)


def _write_pack(records: list[_Record], family: str, spec: ExportSpec,
                out_dir: str) -> dict:
    if not records:
        raise ExportError("nothing to export")
    layout = [(bid,) + records[0].blocks[bid]["patches"].shape
              for bid in spec.blocks]
    for rec in records:
        got = [(bid,) + rec.blocks[bid]["patches"].shape for bid in spec.blocks]
        if got != layout:
            raise ExportError(
                f"shape drift at record {rec.image_id!r}: {got} != {layout}")

    parent = os.path.dirname(os.path.abspath(out_dir)) or "."
    os.makedirs(parent, exist_ok=True)
    staging = tempfile.mkdtemp(prefix=".export-", dir=parent)
    try:
        index = []
        offset = 0
        with open(os.path.join(staging, "tensors.bin"), "wb") as fh:
            for rec in records:
                index.append({
                    "image_id": rec.image_id,
                    "offset": offset,
                    "role": rec.role,
                    "class_label": rec.class_label,
                    "source_id": rec.source_id,
                })
                for bid in spec.blocks:
                    blk = rec.blocks[bid]
                    buf = np.ascontiguousarray(blk["patches"],
                                               dtype="<f4").tobytes()
                    fh.write(buf)
                    offset += len(buf)
                    if family == "vit":
                        buf = np.ascontiguousarray(blk["cls"],
                                                   dtype="<f4").tobytes()
                        fh.write(buf)
                        offset += len(buf)
        manifest = {
            "format_version": FORMAT_VERSION,
            "backbone_family": family,
            "blocks": [list(b) for b in layout],
            "records": index,
            "provenance": spec.provenance or json.dumps({
                "backbone": spec.backbone, "weights": spec.weights,
                "resolution": spec.resolution, "augment": spec.augment,
                "threshold": spec.threshold, "seed": spec.seed,
            }, sort_keys=True),
        }
        with open(os.path.join(staging, "manifest.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")
        if os.path.exists(out_dir):
            raise ExportError(f"output directory {out_dir!r} already exists")
        os.rename(staging, out_dir)
    finally:
        import shutil
        shutil.rmtree(staging, ignore_errors=True)
    return manifest


# ---------------------------------------------------------------------------
# verification (independent reader)
# ---------------------------------------------------------------------------

def verify_pack(path: str) -> list[str]:
    """Re-read a pack and list every consistency violation (empty = clean)."""
    problems: list[str] = []
    manifest_path = os.path.join(path, "manifest.json")
    tensors_path = os.path.join(path, "tensors.bin")
    if not os.path.isfile(manifest_path) or not os.path.isfile(tensors_path):
        return [f"{path!r} is not a pack directory"]
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        problems.append(f"format_version {manifest.get('format_version')!r}")
    family = manifest.get("backbone_family")
    if family not in ("cnn", "vit"):
        problems.append(f"backbone_family {family!r}")
    per_record = 0
    for bid, h, w, c in manifest["blocks"]:
        if min(h, w, c) < 1:
            problems.append(f"block {bid}: bad shape ({h},{w},{c})")
        per_record += h * w * c + (c if family == "vit" else 0)
    per_record *= 4

    seen = set()
    expected_offset = 0
    for entry in manifest["records"]:
        rid = entry["image_id"]
        if rid in seen:
            problems.append(f"duplicate record {rid!r}")
        seen.add(rid)
        if entry["offset"] != expected_offset:
            problems.append(f"record {rid!r}: offset {entry['offset']} != "
                            f"expected {expected_offset}")
        expected_offset = entry["offset"] + per_record
        if entry["role"] == "pseudo_query":
            if not entry.get("source_id"):
                problems.append(f"pseudo_query {rid!r} lacks source_id")
        elif entry["role"] not in ("support", "query"):
            problems.append(f"record {rid!r}: unknown role {entry['role']!r}")
    for entry in manifest["records"]:
        src = entry.get("source_id")
        if entry["role"] == "pseudo_query" and src and src not in seen:
            problems.append(f"pseudo_query {entry['image_id']!r}: "
                            f"source {src!r} missing")
    actual = os.path.getsize(tensors_path)
    if actual != expected_offset:
        broken = next((e["image_id"] for e in manifest["records"]
                       if e["offset"] + per_record > actual), "?")
        problems.append(f"tensors.bin has {actual} bytes, expected "
                        f"{expected_offset}; first broken record {broken!r}")
    return problems


# ---------------------------------------------------------------------------
# sanity classifier (exporter-side NCC for cross-checking)
# ---------------------------------------------------------------------------

def sanity_ncc(path: str, block_id: int, support_ids: dict[int, list[str]],
               queries: list[tuple[str, int]]) -> float:
    """Nearest-centroid cosine accuracy computed by the exporter itself."""
    with open(os.path.join(path, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    family = manifest["backbone_family"]
    blocks = [tuple(b) for b in manifest["blocks"]]
    per_record = sum(h * w * c + (c if family == "vit" else 0)
                     for _, h, w, c in blocks) * 4
    offsets = {e["image_id"]: e["offset"] for e in manifest["records"]}

    def embedding(image_id: str) -> np.ndarray:
        with open(os.path.join(path, "tensors.bin"), "rb") as fh:
            fh.seek(offsets[image_id])
            flat = np.frombuffer(fh.read(per_record), dtype="<f4").astype(
                np.float64)
        pos = 0
        for bid, h, w, c in blocks:
            n = h * w * c
            if bid == block_id:
                if family == "vit":
                    return flat[pos + n:pos + n + c]
                return flat[pos:pos + n].reshape(h * w, c).mean(axis=0)
            pos += n + (c if family == "vit" else 0)
        raise ExportError(f"block {block_id} not in pack")

    def norm(x):
        return x / (np.linalg.norm(x) + 1e-12)

    labels = sorted(support_ids)
    protos = np.stack([
        norm(np.mean([norm(embedding(i)) for i in support_ids[l]], axis=0))
        for l in labels])
    correct = 0
    for qid, label in queries:
        sims = protos @ norm(embedding(qid))
        correct += labels[int(np.argmax(sims))] == label
    return correct / len(queries)
