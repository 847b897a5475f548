"""Exporter conformance: shapes, counts, reproducibility, cross-checks.

The heavyweight backbone runs use random weights ('none'): block geometry,
format conformance, augmentation counting and the NCC cross-oracle are all
weight-independent.
"""

import json
import os
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()

from fmpack_exporter.export import (ExportSpec, export_pack, pseudo_view_count,
                                    read_labels_csv, sanity_ncc, verify_pack)


def make_images(root, n_classes=5, per_class=4, size=96, seed=0):
    """Class-coded images: colored background plus a class-positioned square."""
    rng = np.random.default_rng(seed)
    os.makedirs(root, exist_ok=True)
    rows = []
    palette = (rng.integers(40, 215, size=(n_classes, 3))).astype(np.uint8)
    for label in range(n_classes):
        for i in range(per_class):
            arr = np.tile(palette[label], (size, size, 1))
            arr = arr + rng.integers(-25, 26, size=arr.shape)
            x = 10 + 12 * label
            arr[20:50, x:x + 20] = 255 - palette[label]
            arr = np.clip(arr, 0, 255).astype(np.uint8)
            name = f"c{label}_i{i}.png"
            Image.fromarray(arr).save(os.path.join(root, name))
            rows.append((name, label))
    csv_path = os.path.join(root, "labels.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        for name, label in rows:
            fh.write(f"{name},{label}\n")
    return csv_path


def test_pseudo_view_count_rule():
    t = 15
    for shots in range(1, 31):
        expected = 0 if shots >= t else max(1, t // shots)
        assert pseudo_view_count(shots, t) == expected


@pytest.fixture(scope="module")
def resnet_pack(tmp_path_factory):
    root = tmp_path_factory.mktemp("imgs")
    csv_path = make_images(str(root))
    spec = ExportSpec(
        backbone="resnet50", blocks=[-2, -1], resolution=224,
        images=read_labels_csv(str(root), csv_path), weights="none",
        augment=False, seed=3)
    out = str(tmp_path_factory.mktemp("packs") / "rn50")
    manifest = export_pack(spec, out)
    return out, manifest, str(root), csv_path


def test_resnet50_block_geometry(resnet_pack):
    _, manifest, _, _ = resnet_pack
    assert manifest["blocks"] == [[-2, 14, 14, 1024], [-1, 7, 7, 2048]]
    assert manifest["backbone_family"] == "cnn"
    assert len(manifest["records"]) == 20


def test_exported_pack_verifies_clean(resnet_pack):
    out, _, _, _ = resnet_pack
    assert verify_pack(out) == []


def test_primary_reader_round_trips_exported_pack(resnet_pack):
    out, manifest, _, _ = resnet_pack
    from mivhead.fmpack import read_pack

    pack = read_pack(out)
    assert pack.block_shape(-2) == (14, 14, 1024)
    assert pack.block_shape(-1) == (7, 7, 2048)
    rec = pack.record(manifest["records"][0]["image_id"])
    assert rec.blocks[0].patches.shape == (14, 14, 1024)
    assert rec.blocks[0].cls is None
    assert np.isfinite(rec.blocks[1].patches).all()


def test_truncation_is_detected(resnet_pack, tmp_path):
    out, _, _, _ = resnet_pack
    import shutil
    clone = str(tmp_path / "broken")
    shutil.copytree(out, clone)
    path = os.path.join(clone, "tensors.bin")
    with open(path, "r+b") as fh:
        fh.truncate(os.path.getsize(path) - 100)
    problems = verify_pack(clone)
    assert problems
    assert any("tensors.bin" in p for p in problems)


@pytest.fixture(scope="module")
def augmented_pack(tmp_path_factory):
    root = tmp_path_factory.mktemp("aug_imgs")
    csv_path = make_images(str(root), n_classes=3, per_class=4)
    spec = ExportSpec(
        backbone="resnet18", blocks=[-1], resolution=224,
        images=read_labels_csv(str(root), csv_path), weights="none",
        augment=True, threshold=15, seed=11)
    out = str(tmp_path_factory.mktemp("packs") / "aug")
    export_pack(spec, out)
    return out, spec, tmp_path_factory


def test_augmented_views_counts_and_sources(augmented_pack):
    out, spec, _ = augmented_pack
    manifest = read_json(os.path.join(out, "manifest.json"))
    pseudo = [e for e in manifest["records"] if e["role"] == "pseudo_query"]
    # 4 images per class, T=15 -> max(1, 15 // 4) = 3 views per class
    assert len(pseudo) == 3 * 3
    ids = {e["image_id"] for e in manifest["records"]}
    per_class = {}
    for e in pseudo:
        assert e["source_id"] in ids
        per_class[e["class_label"]] = per_class.get(e["class_label"], 0) + 1
    assert per_class == {0: 3, 1: 3, 2: 3}
    assert verify_pack(out) == []


def test_augmentation_reproducible_from_seed(augmented_pack):
    out, spec, factory = augmented_pack
    again = str(factory.mktemp("packs") / "aug2")
    export_pack(spec, again)
    a = read_bytes(os.path.join(out, "tensors.bin"))
    b = read_bytes(os.path.join(again, "tensors.bin"))
    assert a == b

    other = ExportSpec(**{**spec.__dict__, "seed": spec.seed + 1})
    diff_dir = str(factory.mktemp("packs") / "aug3")
    export_pack(other, diff_dir)
    c = read_bytes(os.path.join(diff_dir, "tensors.bin"))
    assert a != c


def test_augmentation_off_means_no_pseudo(resnet_pack):
    _, manifest, _, _ = resnet_pack
    assert all(e["role"] != "pseudo_query" for e in manifest["records"])


def test_vit_export_has_cls(tmp_path):
    root = tmp_path / "vit_imgs"
    csv_path = make_images(str(root), n_classes=2, per_class=2)
    spec = ExportSpec(
        backbone="vit_b_16", blocks=[-1], resolution=224,
        images=read_labels_csv(str(root), csv_path), weights="none")
    out = str(tmp_path / "vitpack")
    manifest = export_pack(spec, out)
    assert manifest["backbone_family"] == "vit"
    assert manifest["blocks"] == [[-1, 14, 14, 768]]
    from mivhead.fmpack import read_pack

    rec = read_pack(out).record(manifest["records"][0]["image_id"])
    assert rec.blocks[0].cls.shape == (768,)


def test_cross_component_ncc_oracle(resnet_pack, tmp_path):
    """Primary-side NCC (via the mivhead CLI) matches the exporter's own
    sanity NCC on the same 5-way split to < 0.1 accuracy points."""
    out, manifest, _, _ = resnet_pack
    by_class = {}
    for e in manifest["records"]:
        by_class.setdefault(e["class_label"], []).append(e["image_id"])
    support = {label: ids[:2] for label, ids in by_class.items()}
    queries = [(i, label) for label, ids in by_class.items() for i in ids[2:]]

    own = sanity_ncc(out, -1, support, queries)

    from mivhead.episodes import TaskSpec, write_tasks

    task = TaskSpec(task_id="task0000", class_ids=sorted(by_class),
                    support=support, queries=queries, pseudo_queries=[])
    tasks_path = str(tmp_path / "tasks.jsonl")
    write_tasks([task], tasks_path)
    res_path = str(tmp_path / "ncc.results.jsonl")
    proc = subprocess.run(
        [sys.executable, "-m", "mivhead.cli", "run", "--pack", out,
         "--tasks", tasks_path, "--method", "ncc", "--block-id", "-1",
         "--out", res_path],
        capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    with open(res_path, encoding="utf-8") as fh:
        rows = [json.loads(line) for line in fh]
    assert abs(rows[0]["accuracy"] - own) < 0.001
