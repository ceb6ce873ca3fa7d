import numpy as np
import pytest
from PIL import Image

from kdesc.data import (LabeledPatchSet, Nuisance, generate_synthetic_set, load_hp_set, load_patch_stack,
                        load_pt_set, make_eval_pairs, parse_pair_file, read_descriptors, read_gray8, to_uint8,
                        warp_bilinear, write_descriptors, write_hp_set, write_patch_stack, write_pt_set)
from kdesc.descriptor import Kind
from kdesc.exceptions import FormatError, LoadError
from kdesc.patch import Patch


def _grid(rng, n_cells=256):
    grid = np.zeros((1024, 1024), dtype=np.uint8)
    cells = []
    for k in range(n_cells):
        cell = rng.integers(0, 256, (64, 64), dtype=np.uint8)
        r, c = divmod(k, 16)
        grid[r * 64:(r + 1) * 64, c * 64:(c + 1) * 64] = cell
        cells.append(cell)
    return grid, cells


def _write_info(path, ids):
    path.write_text("".join(f"{i} 0\n" for i in ids))


def test_single_full_grid(tmp_path, rng):
    grid, cells = _grid(rng)
    Image.fromarray(grid).save(tmp_path / "patches0000.bmp")
    _write_info(tmp_path / "info.txt", range(256))
    ds = load_pt_set(tmp_path)
    assert len(ds) == 256 and ds.patches[0].width == 64
    assert np.array_equal(to_uint8(ds.patches[17]), cells[17])
    assert ds.pairs is None


def test_short_info_file_drops_padding(tmp_path, rng):
    grid, cells = _grid(rng, 100)
    Image.fromarray(grid).save(tmp_path / "patches0000.bmp")
    _write_info(tmp_path / "info.txt", [5] * 100)
    ds = load_pt_set(tmp_path)
    assert len(ds) == 100
    assert np.array_equal(to_uint8(ds.patches[99]), cells[99])


def test_pt_load_errors(tmp_path, rng):
    Image.fromarray(np.zeros((512, 512), dtype=np.uint8)).save(tmp_path / "patches0000.bmp")
    _write_info(tmp_path / "info.txt", range(10))
    with pytest.raises(LoadError, match="patches0000.bmp"):
        load_pt_set(tmp_path)
    _write_info(tmp_path / "info.txt", range(300))
    with pytest.raises(LoadError, match="info.txt"):
        load_pt_set(tmp_path)
    (tmp_path / "patches0000.bmp").write_bytes(b"not an image")
    with pytest.raises(LoadError):
        read_gray8(tmp_path / "patches0000.bmp")


def test_pair_file(tmp_path):
    p = tmp_path / "m50_1000_1000_0.txt"
    p.write_text("0 100 0 1 100 0\n2 7 0 3 9 0\n")
    pairs = parse_pair_file(p, 4)
    assert pairs.positives.tolist() == [[0, 1]]
    assert pairs.negatives.tolist() == [[2, 3]]
    p.write_text("0 100 0 1 100\n")
    with pytest.raises(LoadError):
        parse_pair_file(p, 4)


def test_pt_round_trip(tmp_path):
    ds = generate_synthetic_set(3, 10, 3, 64, Nuisance(0.1, 1.0, 0.01))
    ds.pairs = make_eval_pairs(ds.labels, 20, 0)
    write_pt_set(ds, tmp_path)
    back = load_pt_set(tmp_path)
    assert np.array_equal(back.labels, ds.labels)
    assert np.array_equal(back.pairs.positives, ds.pairs.positives)
    assert all(np.array_equal(to_uint8(a), to_uint8(b)) for a, b in zip(back.patches, ds.patches))


def test_patch_stack(tmp_path, rng):
    img = rng.integers(0, 256, (390, 65), dtype=np.uint8)
    Image.fromarray(img).save(tmp_path / "s.png")
    stack = load_patch_stack(tmp_path / "s.png", 65)
    assert len(stack) == 6
    assert len(load_patch_stack(_save(tmp_path / "one.png", img[:65]), 65)) == 1
    with pytest.raises(LoadError):
        load_patch_stack(_save(tmp_path / "bad.png", img[:100]), 65)
    write_patch_stack(tmp_path / "t.png", stack)
    again = load_patch_stack(tmp_path / "t.png", 65)
    assert all(np.array_equal(a.pixels, b.pixels) for a, b in zip(stack, again))


def _save(path, arr):
    Image.fromarray(arr).save(path)
    return path


def test_colour_images_use_channel_mean(tmp_path):
    rgb = np.zeros((4, 4, 3), dtype=np.uint8)
    rgb[..., 0], rgb[..., 1], rgb[..., 2] = 30, 60, 120
    Image.fromarray(rgb).save(tmp_path / "c.png")
    assert np.all(read_gray8(tmp_path / "c.png") == 70.0)


def test_hp_round_trip(tmp_path):
    ds = generate_synthetic_set(1, 4, 3, 17, Nuisance(0.1, 0.5))
    write_hp_set(ds, tmp_path)
    back = load_hp_set(tmp_path, 17)
    assert len(back) == len(ds)
    assert back.sequences[0] == ("c00000", "ref")
    # one patch per view, so labels give the class
    assert np.array_equal(back.labels, ds.labels)


def test_hp_view_count_mismatch(tmp_path, rng):
    seq = tmp_path / "s1"
    seq.mkdir()
    _save(seq / "ref.png", rng.integers(0, 256, (26, 13), dtype=np.uint8))
    _save(seq / "e1.png", rng.integers(0, 256, (13, 13), dtype=np.uint8))
    with pytest.raises(LoadError):
        load_hp_set(tmp_path, 13)


# -- synthetic ---------------------------------------------------------------------

def test_zero_nuisance_views_identical():
    ds = generate_synthetic_set(5, 3, 4, 21)
    for k in range(3):
        views = [p.pixels for p, lab in zip(ds.patches, ds.labels) if lab == k]
        assert all(np.array_equal(v, views[0]) for v in views)


def test_synthetic_determinism():
    a = generate_synthetic_set(9, 5, 3, 33, Nuisance(0.2, 1.0, 0.05))
    b = generate_synthetic_set(9, 5, 3, 33, Nuisance(0.2, 1.0, 0.05))
    assert all(np.array_equal(p.pixels, q.pixels) for p, q in zip(a.patches, b.patches))
    c = generate_synthetic_set(10, 5, 3, 33, Nuisance(0.2, 1.0, 0.05))
    assert not np.array_equal(a.patches[0].pixels, c.patches[0].pixels)


def test_labels_and_nuisance_statistics():
    sigma = np.pi / 16
    ds = generate_synthetic_set(2, 100, 4, 17, Nuisance(sigma, 2.0))
    assert np.array_equal(ds.labels, np.repeat(np.arange(100), 4))
    rots = ds.meta["rotations"]
    assert abs(rots.mean()) <= 3 * sigma / np.sqrt(len(rots))
    assert np.std(rots) == pytest.approx(sigma, rel=0.15)
    shifts = ds.meta["translations"]
    assert np.all(np.abs(shifts.mean(axis=0)) <= 3 * 2.0 / np.sqrt(len(shifts)))


def test_warp_identity_and_shift():
    img = np.random.default_rng(0).uniform(size=(9, 9))
    assert np.allclose(warp_bilinear(img, 0.0, (0.0, 0.0)), img)
    shifted = warp_bilinear(img, 0.0, (1.0, 0.0))
    assert np.allclose(shifted[:, 1:], img[:, :-1])
    assert np.allclose(shifted[:, 0], img[:, 0])  # edge clamp
    quarter = warp_bilinear(img, np.pi / 2, (0.0, 0.0))
    assert np.allclose(quarter, np.rot90(img, -1), atol=1e-12)


def test_nuisance_validation():
    with pytest.raises(ValueError):
        Nuisance(-0.1)
    with pytest.raises(ValueError):
        LabeledPatchSet([Patch(np.zeros((3, 3)))], [-1])


def test_eval_pairs_balanced():
    labels = np.repeat(np.arange(20), 3)
    pairs = make_eval_pairs(labels, 30, 1)
    assert len(pairs.positives) == len(pairs.negatives) == 30
    pairs.validate(labels)


# -- descriptor files --------------------------------------------------------------

def test_descriptor_file_round_trip(tmp_path, rng):
    X = rng.normal(size=(10, 238))
    write_descriptors(tmp_path / "d.kpds", X, Kind.COMBINED)
    Y, kind = read_descriptors(tmp_path / "d.kpds")
    assert kind is Kind.COMBINED
    assert np.array_equal(Y, X.astype(np.float32).astype(np.float64))
    assert np.max(np.abs(Y - X)) <= np.max(np.abs(X)) * 2 ** -24


def test_empty_descriptor_file(tmp_path):
    write_descriptors(tmp_path / "e.kpds", np.zeros((0, 63)), Kind.CARTESIAN)
    data = (tmp_path / "e.kpds").read_bytes()
    assert len(data) == 4 + 4 + 8 + 4 + 1
    Y, _ = read_descriptors(tmp_path / "e.kpds")
    assert Y.shape == (0, 63)


def test_descriptor_file_corruption(tmp_path):
    path = tmp_path / "d.kpds"
    write_descriptors(path, np.ones((2, 3)), Kind.POLAR)
    good = path.read_bytes()
    for bad in (b"KPDX" + good[4:], good[:-1], good[:8]):
        path.write_bytes(bad)
        with pytest.raises(FormatError):
            read_descriptors(path)
