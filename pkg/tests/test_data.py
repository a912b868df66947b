import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from matssl.data import (ImageRecord, ParseError, PatchDataset, PatchEntry, SyntheticSpec, build_patch_dataset,
                         carve_validation, crop, decode_netpbm, dominant_phase, encode_netpbm, generate_synthetic,
                         load_directory, load_image, mask_name, materialize, patch_stride, patchify, save_image,
                         split_dataset)


def blank(w, h, name="img_0000", channels=1):
    return ImageRecord(name, np.zeros((h, w, channels), np.uint8))


# --- patchify -------------------------------------------------------------------

@pytest.mark.parametrize("overlap,count,origins", [
    (0.0, 4, [0, 256]),
    (0.5, 9, [0, 128, 256]),
    (0.6, 16, [0, 102, 204, 256]),
])
def test_patchify_512(overlap, count, origins):
    wins = patchify(blank(512, 512), 256, overlap)
    assert len(wins) == count
    assert sorted({w.x for w in wins}) == origins and sorted({w.y for w in wins}) == origins


def test_patchify_row_major():
    wins = patchify(blank(8, 6), 4, 0.5)
    assert [(w.x, w.y) for w in wins] == [(0, 0), (2, 0), (4, 0), (0, 2), (2, 2), (4, 2)]


def test_patchify_stride_rule():
    assert patch_stride(256, 0.6) == 102
    assert patch_stride(256, 0.7) == 76
    assert patch_stride(10, 0.9) == 1
    assert patch_stride(4, 0.99) == 1


def test_patchify_errors_name_axis():
    with pytest.raises(ValueError, match="x axis"):
        patchify(blank(10, 40), 20, 0.0)
    with pytest.raises(ValueError, match="y axis"):
        patchify(blank(40, 10), 20, 0.0)
    with pytest.raises(ValueError):
        patchify(blank(40, 40), 20, 1.0)


@given(w=st.integers(1, 80), h=st.integers(1, 80), p=st.integers(1, 80), overlap=st.floats(0.0, 0.95))
def test_patchify_in_bounds_and_covering(w, h, p, overlap):
    if p > min(w, h):
        return
    wins = patchify(blank(w, h), p, overlap)
    hits = np.zeros((h, w), int)
    for win in wins:
        assert 0 <= win.x and win.x + p <= w and 0 <= win.y and win.y + p <= h
        hits[win.y:win.y + p, win.x:win.x + p] += 1
    assert hits.min() >= 1
    assert len(set(wins)) == len(wins)
    assert wins == patchify(blank(w, h), p, overlap)


# --- splits -------------------------------------------------------------------------

def test_split_ten_images_eight_two():
    images = [blank(4, 4, f"img_{i:04d}") for i in range(10)]
    a = split_dataset(images, 0.8, seed=0)
    assert sorted(a.values()).count("train") == 8 and list(a.values()).count("test") == 2
    assert a == split_dataset(images, 0.8, seed=0)


@given(st.permutations(list(range(12))), st.integers(0, 1000))
def test_split_ignores_input_order(order, seed):
    images = [blank(4, 4, f"img_{i:04d}") for i in range(12)]
    assert split_dataset([images[i] for i in order], 0.75, seed) == split_dataset(images, 0.75, seed)


def test_split_errors():
    with pytest.raises(ValueError):
        split_dataset([], 0.8, 0)
    with pytest.raises(ValueError):
        split_dataset([blank(4, 4)], 1.0, 0)


def test_no_test_window_lands_in_train():
    images = [blank(32, 32, f"img_{i:04d}") for i in range(6)]
    assignment = split_dataset(images, 0.5, seed=3)
    ds = build_patch_dataset(images, 16, 0.6, assignment)
    for e in ds.entries:
        assert e.split == assignment[e.image_id]


def test_carve_validation_moves_only_train_images():
    assignment = {f"img_{i}": ("train" if i < 8 else "test") for i in range(10)}
    carved = carve_validation(assignment, 0.25, seed=0)
    assert list(carved.values()).count("val") == 2 and list(carved.values()).count("test") == 2
    assert all(assignment[k] == "train" for k, v in carved.items() if v == "val")


# --- dataset manifest -------------------------------------------------------------------

def test_manifest_round_trip(tmp_path):
    ds = build_patch_dataset([blank(20, 20)], 10, 0.5, "unlabeled")
    path = tmp_path / "m.tsv"
    ds.write(path)
    back = PatchDataset.read(path)
    assert back.entries == ds.entries
    assert path.read_bytes() == ds.to_manifest().encode()
    assert path.read_bytes().splitlines()[0] == b"img_0000\t0\t0\t10\tunlabeled"


def test_dataset_rejects_duplicates_and_unknown_splits():
    e = PatchEntry("a", 0, 0, 4, "train")
    with pytest.raises(ValueError):
        PatchDataset([e, PatchEntry("a", 0, 0, 4, "test")], 4)
    with pytest.raises(ValueError):
        PatchDataset([PatchEntry("a", 0, 0, 4, "holdout")], 4)


def test_manifest_parse_error_names_line():
    with pytest.raises(ParseError) as err:
        PatchDataset.from_manifest("a\t0\t0\t4\ttrain\nb\t0\tzero\t4\ttrain\n")
    assert err.value.offset == 2


def test_check_bounds():
    ds = PatchDataset([PatchEntry("img_0000", 8, 0, 4, "train")], 4)
    with pytest.raises(ValueError):
        ds.check_bounds({"img_0000": blank(10, 10)})


def test_materialize_crops_requested_splits():
    img = generate_synthetic(SyntheticSpec(seed=1), 16, 16, 1)[0]
    ds = PatchDataset([PatchEntry(img.id, 0, 0, 8, "train"), PatchEntry(img.id, 8, 8, 8, "test")], 8)
    (patch,) = materialize(ds, [img], ["test"])
    np.testing.assert_array_equal(patch.pixels, img.pixels[8:, 8:])
    np.testing.assert_array_equal(patch.mask, img.mask[8:, 8:])
    with pytest.raises(ValueError):
        crop(img, (12, 0, 8))


# --- netpbm ---------------------------------------------------------------------------------

def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    rec = ImageRecord("img_0001", rng.integers(0, 256, (64, 64), dtype=np.uint8),
                      rng.integers(0, 3, (64, 64), dtype=np.uint8), 3)
    save_image(rec, tmp_path / "img_0001.pgm", tmp_path / "mask_0001.pgm")
    back = load_image(tmp_path / "img_0001.pgm", tmp_path / "mask_0001.pgm")
    assert back.channels == 1
    assert back.pixels.tobytes() == rec.pixels.tobytes() and back.mask.tobytes() == rec.mask.tobytes()


def test_color_round_trip():
    px = np.random.default_rng(1).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    buf = encode_netpbm(px)
    assert buf.startswith(b"P6")
    np.testing.assert_array_equal(decode_netpbm(buf), px)


def test_header_comments_are_skipped():
    px = decode_netpbm(b"P5\n# made by hand\n2 1\n255\n\x01\x02")
    assert px.shape == (1, 2, 1) and px.ravel().tolist() == [1, 2]


def test_truncated_payload_reports_offset():
    header = b"P5\n64 64\n255\n"
    with pytest.raises(ParseError, match="4096") as err:
        decode_netpbm(header + bytes(4000))
    assert err.value.offset == len(header) + 4000


@pytest.mark.parametrize("buf", [b"P2\n1 1\n255\n\x00", b"P5\n1 1\n65535\n\x00\x00", b"P5\nx 1\n255\n\x00",
                                 b"P5\n1"])
def test_malformed_headers(buf):
    with pytest.raises(ParseError):
        decode_netpbm(buf)


def test_mask_naming_and_directory_loading(tmp_path):
    assert mask_name("img_0007") == "mask_0007"
    for rec in generate_synthetic(SyntheticSpec(seed=0), 8, 8, 3):
        save_image(rec, tmp_path / f"{rec.id}.pgm", tmp_path / f"{mask_name(rec.id)}.pgm")
    loaded = load_directory(tmp_path)
    assert [r.id for r in loaded] == ["img_0000", "img_0001", "img_0002"]
    assert all(r.mask is not None for r in loaded)


def test_record_validates_mask():
    with pytest.raises(ValueError):
        ImageRecord("a", np.zeros((4, 4), np.uint8), np.full((4, 4), 3), num_classes=3)
    with pytest.raises(ValueError):
        ImageRecord("a", np.zeros((4, 4), np.uint8), np.zeros((4, 3)))


# --- synthetic generator -------------------------------------------------------------------------

def test_noise_free_intensities():
    spec = SyntheticSpec(seed=0, grain_count=10, phase_count=2, noise_std=0.0, stripe_phase=1)
    allowed = set(spec.base_intensities()) | {spec.stripe_intensity()}
    for rec in generate_synthetic(spec, 48, 48, 5):
        assert set(np.unique(rec.pixels).tolist()) <= allowed


def test_generation_is_deterministic_and_index_addressable():
    spec = SyntheticSpec(seed=4, noise_std=5.0, stripe_phase=0)
    a = generate_synthetic(spec, 32, 24, 4)
    b = generate_synthetic(spec, 32, 24, 2, start=2)
    assert a[2].pixels.tobytes() == b[0].pixels.tobytes() and a[3].mask.tobytes() == b[1].mask.tobytes()
    assert [r.pixels.tobytes() for r in a] == [r.pixels.tobytes() for r in generate_synthetic(spec, 32, 24, 4)]


@pytest.mark.parametrize("phases", [2, 3, 4])
def test_all_phases_present(phases):
    for seed in range(20):
        rec = generate_synthetic(SyntheticSpec(seed=seed, grain_count=4 * phases, phase_count=phases), 128, 128, 1)[0]
        assert set(np.unique(rec.mask).tolist()) == set(range(phases))


@given(st.integers(0, 10_000), st.integers(2, 4))
def test_noise_free_boundaries_follow_mask(seed, phases):
    spec = SyntheticSpec(seed=seed, grain_count=3 * phases, phase_count=phases, noise_std=0.0, stripe_phase=0)
    rec = generate_synthetic(spec, 24, 24, 1)[0]
    img, mask = rec.pixels[:, :, 0].astype(int), rec.mask.astype(int)
    for axis in (0, 1):
        d_img = np.diff(img, axis=axis) != 0
        d_mask = np.diff(mask, axis=axis) != 0
        assert np.all(d_img[d_mask])  # every phase boundary is visible
        both_striped = (np.delete(mask, 0, axis) == 0) & (np.delete(mask, -1, axis) == 0)
        assert np.all(both_striped[d_img & ~d_mask])  # other edges are stripes inside the stripe phase


@pytest.mark.parametrize("kwargs", [dict(phase_count=1), dict(grain_count=1, phase_count=2),
                                    dict(stripe_phase=5), dict(noise_std=-1.0), dict(stripe_period=1),
                                    dict(intensities=(100, 100))])
def test_spec_validation(kwargs):
    with pytest.raises(ValueError):
        SyntheticSpec(**kwargs)


def test_dominant_phase():
    assert dominant_phase(np.array([[0, 1], [1, 1]])) == 1
