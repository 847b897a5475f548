"""On-disk format for frozen multi-block patch-level feature maps.

A pack is a directory with two files:

* ``manifest.json`` — format version, backbone family, block descriptors,
  and a byte-offset index over records.
* ``tensors.bin`` — raw little-endian float32, one contiguous span per
  record: for each declared block in order, the (h, w, c) patch grid
  row-major, followed by the 1 x c [CLS] row when the family is ``vit``.

Values are stored in float32 (matching exporter precision) and widened to
float64 on read. Packs are immutable after writing; the reader is safe for
concurrent random access.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

FORMAT_VERSION = 1
ROLES = ("support", "query", "pseudo_query")


class PackError(ValueError):
    """Malformed pack contents or inconsistent write input."""


@dataclass
class BlockFeatures:
    """One block's feature map for one image.

    ``block_id`` follows python-style negative indexing from the backbone
    end (-1 = last block). ``patches`` is (h, w, c); ``cls`` is a (c,) row
    present exactly when the pack's family is ``vit``.
    """

    block_id: int
    patches: np.ndarray
    cls: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.patches.shape)


@dataclass
class ImageRecord:
    image_id: str
    class_label: int
    role: str
    blocks: list[BlockFeatures]
    source_id: str | None = None

    def block(self, block_id: int) -> BlockFeatures:
        for b in self.blocks:
            if b.block_id == block_id:
                return b
        raise PackError(f"record {self.image_id!r} has no block {block_id}")


@dataclass
class PackManifest:
    format_version: int
    backbone_family: str
    blocks: list[tuple[int, int, int, int]]  # (block_id, h, w, c)
    index: list[dict]  # image_id, offset, role, class_label, source_id
    provenance: str = ""

    @property
    def record_nbytes(self) -> int:
        per = 0
        for _, h, w, c in self.blocks:
            per += h * w * c
            if self.backbone_family == "vit":
                per += c
        return per * 4


def _validate_records(records, backbone_family):
    if not records:
        raise PackError("cannot write an empty pack")
    layout = [(b.block_id,) + b.shape for b in records[0].blocks]
    labels = {r.image_id: r.class_label for r in records}
    seen = set()
    for rec in records:
        if rec.image_id in seen:
            raise PackError(f"duplicate image_id {rec.image_id!r}")
        seen.add(rec.image_id)
        if rec.role not in ROLES:
            raise PackError(f"record {rec.image_id!r}: unknown role {rec.role!r}")
        if rec.role == "pseudo_query":
            if not rec.source_id:
                raise PackError(f"pseudo_query {rec.image_id!r} lacks source_id")
            src_label = labels.get(rec.source_id)
            if src_label is not None and src_label != rec.class_label:
                raise PackError(
                    f"pseudo_query {rec.image_id!r}: label {rec.class_label} "
                    f"differs from source {rec.source_id!r} ({src_label})")
        got = [(b.block_id,) + b.shape for b in rec.blocks]
        if got != layout:
            raise PackError(
                f"record {rec.image_id!r}: block layout {got} != {layout}")
        for b in rec.blocks:
            has_cls = b.cls is not None
            if has_cls != (backbone_family == "vit"):
                raise PackError(
                    f"record {rec.image_id!r}: cls row present={has_cls} "
                    f"but family is {backbone_family!r}")
            if has_cls and b.cls.shape != (b.shape[2],):
                raise PackError(f"record {rec.image_id!r}: cls shape mismatch")
    return layout


def write_pack(records: list[ImageRecord], backbone_family: str, out_dir: str,
               provenance: str = "") -> None:
    """Write a pack directory atomically (temp dir + rename)."""
    if backbone_family not in ("cnn", "vit"):
        raise PackError(f"unknown backbone_family {backbone_family!r}")
    layout = _validate_records(records, backbone_family)
    parent = os.path.dirname(os.path.abspath(out_dir)) or "."
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".pack-", dir=parent)
    try:
        index = []
        offset = 0
        with open(os.path.join(tmp, "tensors.bin"), "wb") as fh:
            for rec in records:
                index.append({
                    "image_id": rec.image_id,
                    "offset": offset,
                    "role": rec.role,
                    "class_label": int(rec.class_label),
                    "source_id": rec.source_id,
                })
                for blk in rec.blocks:
                    buf = np.ascontiguousarray(blk.patches, dtype="<f4").tobytes()
                    fh.write(buf)
                    offset += len(buf)
                    if blk.cls is not None:
                        buf = np.ascontiguousarray(blk.cls, dtype="<f4").tobytes()
                        fh.write(buf)
                        offset += len(buf)
        manifest = {
            "format_version": FORMAT_VERSION,
            "backbone_family": backbone_family,
            "blocks": [list(b) for b in layout],
            "records": index,
            "provenance": provenance,
        }
        with open(os.path.join(tmp, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")
        if os.path.exists(out_dir):
            raise PackError(f"output directory {out_dir!r} already exists")
        os.rename(tmp, out_dir)
    finally:
        if os.path.isdir(tmp):
            import shutil
            shutil.rmtree(tmp)


class Pack:
    """Read-only random access to a written pack (values widened to float64)."""

    def __init__(self, path: str):
        self.path = path
        with open(os.path.join(path, "manifest.json"), encoding="utf-8") as fh:
            raw = json.load(fh)
        if raw.get("format_version") != FORMAT_VERSION:
            raise PackError(
                f"unsupported format_version {raw.get('format_version')!r}")
        self.manifest = PackManifest(
            format_version=raw["format_version"],
            backbone_family=raw["backbone_family"],
            blocks=[tuple(b) for b in raw["blocks"]],
            index=raw["records"],
            provenance=raw.get("provenance", ""),
        )
        self._by_id = {}
        size = self.manifest.record_nbytes
        prev_end = 0
        for entry in self.manifest.index:
            if entry["image_id"] in self._by_id:
                raise PackError(f"duplicate index entry {entry['image_id']!r}")
            if entry["offset"] < prev_end:
                raise PackError(
                    f"record {entry['image_id']!r}: offset overlaps previous record")
            if entry["offset"] != prev_end:
                raise PackError(
                    f"record {entry['image_id']!r}: index gap before offset")
            prev_end = entry["offset"] + size
            self._by_id[entry["image_id"]] = entry
        self._tensor_path = os.path.join(path, "tensors.bin")
        actual = os.path.getsize(self._tensor_path)
        if actual != prev_end:
            short = next((e["image_id"] for e in self.manifest.index
                          if e["offset"] + size > actual), "?")
            raise PackError(
                f"tensors.bin has {actual} bytes, expected {prev_end} "
                f"(first affected record: {short!r})")

    # -- index queries ------------------------------------------------

    @property
    def backbone_family(self) -> str:
        return self.manifest.backbone_family

    @property
    def block_ids(self) -> list[int]:
        return [b[0] for b in self.manifest.blocks]

    def block_shape(self, block_id: int) -> tuple[int, int, int]:
        for bid, h, w, c in self.manifest.blocks:
            if bid == block_id:
                return (h, w, c)
        raise PackError(f"pack has no block {block_id}")

    def image_ids(self, role: str | None = None) -> list[str]:
        return [e["image_id"] for e in self.manifest.index
                if role is None or e["role"] == role]

    def entry(self, image_id: str) -> dict:
        try:
            return self._by_id[image_id]
        except KeyError:
            raise PackError(f"image_id {image_id!r} not found in pack") from None

    def class_ids(self) -> list[int]:
        return sorted({e["class_label"] for e in self.manifest.index
                       if e["role"] != "pseudo_query"})

    def ids_by_class(self, class_label: int) -> list[str]:
        """Ordinary (non pseudo-query) records of one class, in index order."""
        return [e["image_id"] for e in self.manifest.index
                if e["class_label"] == class_label and e["role"] != "pseudo_query"]

    def pseudo_ids_by_source(self, source_id: str) -> list[str]:
        return [e["image_id"] for e in self.manifest.index
                if e["role"] == "pseudo_query" and e["source_id"] == source_id]

    # -- record access ------------------------------------------------

    def record(self, image_id: str) -> ImageRecord:
        entry = self.entry(image_id)
        nbytes = self.manifest.record_nbytes
        with open(self._tensor_path, "rb") as fh:
            fh.seek(entry["offset"])
            buf = fh.read(nbytes)
        if len(buf) != nbytes:
            raise PackError(f"record {image_id!r}: tensors.bin truncated")
        flat = np.frombuffer(buf, dtype="<f4").astype(np.float64)
        blocks = []
        pos = 0
        for bid, h, w, c in self.manifest.blocks:
            n = h * w * c
            patches = flat[pos:pos + n].reshape(h, w, c)
            pos += n
            cls = None
            if self.backbone_family == "vit":
                cls = flat[pos:pos + c]
                pos += c
            blocks.append(BlockFeatures(block_id=bid, patches=patches, cls=cls))
        return ImageRecord(
            image_id=image_id,
            class_label=entry["class_label"],
            role=entry["role"],
            source_id=entry.get("source_id"),
            blocks=blocks,
        )


def read_pack(path: str) -> Pack:
    return Pack(path)
