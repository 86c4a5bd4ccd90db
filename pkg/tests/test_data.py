import numpy as np
import pytest
from PIL import Image

from homwarp import data as D
from homwarp import geometry as geo
from homwarp.errors import CorruptDataset, EmptyCorpus, ResampleExhausted, UnreadableImage
from homwarp.imageio import quantize, read_image, read_pgm, to_u8, write_pgm

DESK = D.DataConfig.desk()


@pytest.fixture(scope="module")
def small_ds():
    images = D.synthetic_corpus(4, 11, DESK)
    return D.generate_dataset(images, 3, 5, DESK)


def test_splitmix64_reference_values():
    # first outputs of the reference generator seeded with 0
    assert D.splitmix64(0) == 0xE220A8397B1DCDAF
    assert D.splitmix64(0x9E3779B97F4A7C15) == 0x6E789E6AA1B965F4


def test_presets():
    assert D.DataConfig.for_patch(128) == D.DataConfig.full()
    assert D.DataConfig.for_patch(32) == DESK


def naive_resize(img, ow, oh):
    h, w = img.shape
    out = np.zeros((oh, ow))
    for i in range(oh):
        for j in range(ow):
            y = min(max((i + 0.5) * h / oh - 0.5, 0), h - 1)
            x = min(max((j + 0.5) * w / ow - 0.5, 0), w - 1)
            y0, x0 = int(y), int(x)
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = y - y0, x - x0
            out[i, j] = ((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1])
                         + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1]))
    return out


@pytest.mark.parametrize("shape,out", [((13, 17), (8, 6)), ((5, 7), (20, 11))])
def test_resize_matches_naive(shape, out):
    img = np.random.default_rng(0).random(shape)
    np.testing.assert_allclose(D.resize_bilinear(img, *out), naive_resize(img, *out), atol=1e-12)


def test_gray_conversion():
    rgb = np.zeros((2, 2, 3))
    rgb[..., 1] = 1.0
    np.testing.assert_allclose(D.to_gray(rgb), 0.587)
    with pytest.raises(UnreadableImage):
        D.to_gray(np.zeros((2, 2, 2, 2)))


def test_texture_is_seeded_and_normalized():
    a = D.synth_texture(1, 40, 30)
    assert a.min() == 0.0 and a.max() == 1.0 and a.shape == (30, 40)
    np.testing.assert_array_equal(a, D.synth_texture(1, 40, 30))


def test_geometry_draws_stay_legal():
    rng = np.random.default_rng(0)
    for _ in range(200):
        x0, y0, off = D.draw_geometry(rng, DESK)
        assert DESK.margin <= x0 <= DESK.image_w - DESK.margin - DESK.patch
        assert DESK.margin <= y0 <= DESK.image_h - DESK.margin - DESK.patch
        assert np.all(np.abs(off) <= DESK.max_offset)


def test_impossible_area_floor_exhausts():
    cfg = D.DataConfig(**{**DESK.__dict__, "min_area": 1e9})
    with pytest.raises(ResampleExhausted):
        D.draw_geometry(np.random.default_rng(0), cfg)


def test_sample_contents():
    img = D.synth_texture(2, DESK.image_w, DESK.image_h)
    rec = D.generate_sample(img, np.random.default_rng(3), DESK)
    x0, y0 = rec.rect
    np.testing.assert_array_equal(rec.patch_a, quantize(img)[y0:y0 + 32, x0:x0 + 32])
    np.testing.assert_allclose(rec.hbar, D.hbar_from_offsets(rec.offsets, 32))
    # the normalized target moves the normalized corners onto the perturbed ones
    h = geo.denormalize_matrix(geo.free_to_matrix(rec.hbar), 32, 32)
    c = geo.patch_corners(32, 32)
    np.testing.assert_allclose(geo.apply_points(h, c), c + rec.offsets.reshape(4, 2), atol=1e-9)
    for p in (rec.patch_a, rec.patch_b, rec.patch_a_t):
        np.testing.assert_array_equal(p, quantize(p))


def test_forced_offsets():
    img = D.synth_texture(2, DESK.image_w, DESK.image_h)
    rec = D.generate_sample(img, np.random.default_rng(0), DESK, offsets=np.zeros(8))
    np.testing.assert_allclose(rec.hbar, geo.IDENTITY_FREE, atol=1e-12)
    np.testing.assert_array_equal(rec.patch_b, rec.patch_a)
    with pytest.raises(ValueError):
        D.generate_sample(np.zeros((10, 10)), np.random.default_rng(0), DESK)


def test_dataset_round_trip(tmp_path, small_ds):
    path = tmp_path / "d.hstn"
    D.write_dataset(path, small_ds)
    back = D.read_dataset(path)
    for f in ("patch_a", "patch_b", "patch_a_t", "hbar", "offsets", "rect", "image_index"):
        np.testing.assert_array_equal(getattr(back, f), getattr(small_ds, f))
    assert D.dataset_bytes(back) == path.read_bytes()
    assert len(small_ds) == 12 and list(small_ds.image_index[:4]) == [0, 0, 0, 1]


def test_dataset_corruption(small_ds):
    blob = D.dataset_bytes(small_ds)
    for bad in (b"NOPE" + blob[4:], blob[:-1], blob[:8], blob[:4] + b"\x09" + blob[5:]):
        with pytest.raises(CorruptDataset):
            D.dataset_from_bytes(bad)


def test_threads_do_not_change_output():
    images = D.synthetic_corpus(5, 1, DESK)
    seq = D.generate_dataset(images, 2, 9, DESK, threads=1)
    par = D.generate_dataset(images, 2, 9, DESK, threads=4)
    assert D.dataset_bytes(seq) == D.dataset_bytes(par)


def test_empty_corpus(tmp_path):
    with pytest.raises(EmptyCorpus):
        D.generate_dataset([], 3, 0, DESK)
    with pytest.raises(EmptyCorpus):
        D.load_image_dir(tmp_path)


def test_subset_and_float_patches(small_ds):
    sub = small_ds.subset([1, 3])
    assert len(sub) == 2
    a, b, at = sub.float_patches(None, np.float64)
    np.testing.assert_allclose(a[1], small_ds.patch_a[3] / 255.0)
    assert sub.has_target().all()


def test_stats(small_ds):
    stats = D.dataset_stats(small_ds)
    np.testing.assert_allclose(stats.mean, small_ds.hbar.mean(axis=0))
    np.testing.assert_allclose(stats.std, small_ds.hbar.std(axis=0))
    assert stats.counts.shape == (8, 64) and (stats.counts.sum(axis=1) == 12).all()
    csv = D.stats_csv(stats).splitlines()
    assert csv[0] == "element,bin_lo,bin_hi,count" and len(csv) == 1 + 8 * 64
    assert D.stats_svg(stats).startswith("<svg")
    flat = D.dataset_stats(np.tile(geo.IDENTITY_FREE, (5, 1)))
    assert (flat.counts[:, 0] == 5).all() and (flat.std == 0).all()


def test_identity_baseline_agrees_with_oracle(hbar_oracle):
    analytic = D.identity_baseline(32.0)
    assert abs(analytic - hbar_oracle["identity_baseline_px"]) < 3 * hbar_oracle["identity_baseline_se_px"]


def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(0).random((7, 5))
    write_pgm(tmp_path / "a.pgm", img)
    back = read_pgm(tmp_path / "a.pgm")
    np.testing.assert_array_equal(to_u8(back), to_u8(img))


def test_pgm_sixteen_bit_and_comments(tmp_path):
    body = np.array([[0, 65535], [1000, 30000]], ">u2").tobytes()
    (tmp_path / "b.pgm").write_bytes(b"P5\n# made by hand\n2 2\n65535\n" + body)
    np.testing.assert_allclose(read_pgm(tmp_path / "b.pgm"), [[0, 1], [1000 / 65535, 30000 / 65535]])
    (tmp_path / "c.pgm").write_bytes(b"P5\n4 4\n255\n" + bytes(3))
    with pytest.raises(UnreadableImage):
        read_pgm(tmp_path / "c.pgm")
    (tmp_path / "d.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(UnreadableImage):
        read_pgm(tmp_path / "d.pgm")


def test_image_dir_with_png(tmp_path):
    rgb = (np.random.default_rng(0).random((30, 40, 3)) * 255).astype(np.uint8)
    Image.fromarray(rgb).save(tmp_path / "x.png")
    write_pgm(tmp_path / "y.pgm", np.full((16, 16), 0.5))
    (tmp_path / "notes.txt").write_text("ignored")
    imgs = D.load_image_dir(tmp_path, 20, 15)
    assert len(imgs) == 2 and all(i.shape == (15, 20) for i in imgs)
    np.testing.assert_allclose(imgs[1], 128 / 255)
    assert read_image(tmp_path / "x.png").shape == (30, 40, 3)
    (tmp_path / "z.png").write_bytes(b"not a png")
    with pytest.raises(UnreadableImage):
        D.load_image_dir(tmp_path, 20, 15)
