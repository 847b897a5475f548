"""Round-trip and error-path tests for the pack format."""

import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mivhead import fmpack


def _make_records(n, family="cnn", blocks=((-1, 2, 2, 4),), seed=0, label_of=None):
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        blks = []
        for bid, h, w, c in blocks:
            blks.append(fmpack.BlockFeatures(
                block_id=bid,
                patches=rng.normal(size=(h, w, c)),
                cls=rng.normal(size=c) if family == "vit" else None,
            ))
        records.append(fmpack.ImageRecord(
            image_id=f"img{i}",
            class_label=label_of(i) if label_of else i % 3,
            role="support",
            blocks=blks,
        ))
    return records


def test_round_trip_three_records(tmp_path):
    records = _make_records(3, family="vit", blocks=((-2, 3, 3, 8), (-1, 2, 2, 8)))
    out = str(tmp_path / "pack")
    fmpack.write_pack(records, "vit", out)
    pack = fmpack.read_pack(out)
    assert pack.block_ids == [-2, -1]
    for rec in records:
        got = pack.record(rec.image_id)
        assert got.class_label == rec.class_label
        assert got.role == rec.role
        for b_in, b_out in zip(rec.blocks, got.blocks):
            # float32 on disk: exact for float32-representable inputs
            np.testing.assert_array_equal(
                b_out.patches, b_in.patches.astype(np.float32).astype(np.float64))
            np.testing.assert_array_equal(
                b_out.cls, b_in.cls.astype(np.float32).astype(np.float64))


def test_single_record_byte_size(tmp_path):
    # one cnn record, one block of 2x2x4 -> 16 float32 values = 64 bytes
    records = _make_records(1, blocks=((-1, 2, 2, 4),))
    out = str(tmp_path / "pack")
    fmpack.write_pack(records, "cnn", out)
    assert os.path.getsize(os.path.join(out, "tensors.bin")) == 64


def test_duplicate_image_id_rejected_nothing_written(tmp_path):
    records = _make_records(2)
    records[1].image_id = records[0].image_id
    out = str(tmp_path / "pack")
    with pytest.raises(fmpack.PackError, match="duplicate"):
        fmpack.write_pack(records, "cnn", out)
    assert not os.path.exists(out)


def test_heterogeneous_block_shapes_rejected(tmp_path):
    records = _make_records(2)
    records[1].blocks[0].patches = np.zeros((3, 2, 4))
    with pytest.raises(fmpack.PackError, match="layout"):
        fmpack.write_pack(records, "cnn", str(tmp_path / "pack"))


def test_truncated_tensors_names_record(tmp_path):
    records = _make_records(3)
    out = str(tmp_path / "pack")
    fmpack.write_pack(records, "cnn", out)
    path = os.path.join(out, "tensors.bin")
    with open(path, "r+b") as fh:
        fh.truncate(os.path.getsize(path) - 10)
    with pytest.raises(fmpack.PackError, match="img2"):
        fmpack.read_pack(out)


def test_unknown_image_id(tmp_path):
    out = str(tmp_path / "pack")
    fmpack.write_pack(_make_records(1), "cnn", out)
    pack = fmpack.read_pack(out)
    with pytest.raises(fmpack.PackError, match="not found"):
        pack.record("nope")


def test_version_mismatch(tmp_path):
    out = str(tmp_path / "pack")
    fmpack.write_pack(_make_records(1), "cnn", out)
    manifest = os.path.join(out, "manifest.json")
    with open(manifest) as fh:
        text = fh.read().replace('"format_version": 1', '"format_version": 99')
    with open(manifest, "w") as fh:
        fh.write(text)
    with pytest.raises(fmpack.PackError, match="format_version"):
        fmpack.read_pack(out)


def test_cls_row_requires_vit(tmp_path):
    records = _make_records(1, family="vit")
    with pytest.raises(fmpack.PackError, match="cls"):
        fmpack.write_pack(records, "cnn", str(tmp_path / "pack"))


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 5),
    h=st.integers(1, 4),
    w=st.integers(1, 4),
    c=st.integers(1, 6),
    vit=st.booleans(),
    seed=st.integers(0, 10_000),
)
def test_round_trip_is_identity_property(tmp_path_factory, n, h, w, c, vit, seed):
    family = "vit" if vit else "cnn"
    records = _make_records(n, family=family, blocks=((-1, h, w, c),), seed=seed)
    # write float32-exact values so the round trip is bit-identical
    for rec in records:
        for blk in rec.blocks:
            blk.patches = blk.patches.astype(np.float32).astype(np.float64)
            if blk.cls is not None:
                blk.cls = blk.cls.astype(np.float32).astype(np.float64)
    out = str(tmp_path_factory.mktemp("packs") / f"p{seed}")
    fmpack.write_pack(records, family, out)
    pack = fmpack.read_pack(out)
    assert pack.image_ids() == [r.image_id for r in records]
    for rec in records:
        got = pack.record(rec.image_id)
        np.testing.assert_array_equal(got.blocks[0].patches, rec.blocks[0].patches)
        if vit:
            np.testing.assert_array_equal(got.blocks[0].cls, rec.blocks[0].cls)
        else:
            assert got.blocks[0].cls is None


def test_pseudo_label_must_match_source(tmp_path):
    records = _make_records(2)
    records[1].image_id = "img0_pq0"
    records[1].role = "pseudo_query"
    records[1].source_id = "img0"
    records[1].class_label = records[0].class_label + 1
    with pytest.raises(fmpack.PackError, match="differs from source"):
        fmpack.write_pack(records, "cnn", str(tmp_path / "pack"))


def test_concurrent_readers_observe_identical_data(tmp_path):
    from concurrent.futures import ThreadPoolExecutor

    records = _make_records(4, blocks=((-1, 3, 3, 5),))
    out = str(tmp_path / "pack")
    fmpack.write_pack(records, "cnn", out)
    pack = fmpack.read_pack(out)
    reference = pack.record("img2").blocks[0].patches

    def read(_):
        return fmpack.read_pack(out).record("img2").blocks[0].patches

    with ThreadPoolExecutor(max_workers=8) as pool:
        results = list(pool.map(read, range(16)))
    for got in results:
        np.testing.assert_array_equal(got, reference)
