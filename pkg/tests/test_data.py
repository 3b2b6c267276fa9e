import numpy as np
import pytest

from dimino.data import (
    BLOB_MAGIC,
    Dataset,
    DatasetFormatError,
    Grid,
    Sample,
    dataset_hash,
    load_dataset,
    save_dataset,
)
from dimino.solvers import generate_dataset


def test_grid_validates_power_of_two_points():
    with pytest.raises(ValueError):
        Grid((48,), (1.0,))
    with pytest.raises(ValueError):
        Grid((64,), (-1.0,))
    g = Grid((64, 32), (1.0, 2.0))
    assert g.rank == 2
    axes = g.axes()
    assert axes[1][1] == pytest.approx(2.0 / 32)


def test_sample_validates_shapes_and_time():
    grid = Grid((16,), (1.0,))
    with pytest.raises(ValueError):
        Sample("burgers1d", grid, {"u": np.zeros(8)}, {}, 1.0)
    with pytest.raises(ValueError):
        Sample("burgers1d", grid, {"u": np.zeros(16)}, {}, 0.0)


def test_dataset_round_trip_bit_exact(tmp_path):
    ds = generate_dataset("ns-vorticity2d", {}, 3, 5, Grid((16, 16), (1.0, 1.0)), 0.5)
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.system == ds.system
    assert back.grid == ds.grid
    for sa, sb in zip(ds.split("train"), back.split("train")):
        for name in sa.fields:
            np.testing.assert_array_equal(sa.fields[name], sb.fields[name])
        for name in sa.targets:
            np.testing.assert_array_equal(sa.targets[name], sb.targets[name])
        assert sa.constants["nu"].value == sb.constants["nu"].value
        assert sa.constants["nu"].dim == sb.constants["nu"].dim
        assert sa.t_final == sb.t_final
    assert back.meta["seed"] == 5


def test_blob_magic_is_checked(tmp_path):
    ds = generate_dataset("burgers1d", {}, 2, 0, Grid((16,), (1.0,)), 0.5)
    save_dataset(ds, tmp_path / "d")
    blob = tmp_path / "d" / "train.bin"
    raw = bytearray(blob.read_bytes())
    assert raw[:8] == BLOB_MAGIC
    raw[0] ^= 0xFF
    blob.write_bytes(bytes(raw))
    with pytest.raises(DatasetFormatError):
        load_dataset(tmp_path / "d")


def test_manifest_format_is_checked(tmp_path):
    ds = generate_dataset("burgers1d", {}, 2, 0, Grid((16,), (1.0,)), 0.5)
    save_dataset(ds, tmp_path / "d")
    manifest = tmp_path / "d" / "manifest.json"
    manifest.write_text(manifest.read_text().replace("dimino-dataset-v1", "v0"))
    with pytest.raises(DatasetFormatError):
        load_dataset(tmp_path / "d")


def test_dataset_hash_tracks_content(tmp_path):
    a = generate_dataset("burgers1d", {}, 2, 0, Grid((16,), (1.0,)), 0.5)
    b = generate_dataset("burgers1d", {}, 2, 1, Grid((16,), (1.0,)), 0.5)
    save_dataset(a, tmp_path / "a")
    save_dataset(a, tmp_path / "a2")
    save_dataset(b, tmp_path / "b")
    assert dataset_hash(tmp_path / "a") == dataset_hash(tmp_path / "a2")
    assert dataset_hash(tmp_path / "a") != dataset_hash(tmp_path / "b")


def test_float32_storage_round_trips(tmp_path):
    ds = generate_dataset("burgers1d", {}, 2, 0, Grid((16,), (1.0,)), 0.5)
    save_dataset(ds, tmp_path / "d", dtype="float32")
    back = load_dataset(tmp_path / "d")
    orig = ds.split("train")[0].fields["u"]
    got = back.split("train")[0].fields["u"]
    np.testing.assert_allclose(got, orig, atol=1e-6)


def test_missing_split_raises():
    ds = Dataset("burgers1d", Grid((16,), (1.0,)), {"train": []})
    with pytest.raises(KeyError):
        ds.split("test")
