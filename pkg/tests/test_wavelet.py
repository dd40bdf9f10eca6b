import numpy as np
import PIL.Image
import pytest

from stagefuse.errors import InvalidInput
from stagefuse.imagecore import Image
from stagefuse.synthetic import synthetic_image, synthetic_images
from stagefuse.wavelet import (
    dwt2_haar,
    extract_batch,
    feature_image,
    idwt2_haar,
    save_feature_image,
    subbands,
    wavelet_feature_image,
)

from .util import tmp_path


def test_constant_block():
    A, H, V, D = dwt2_haar([[4, 4], [4, 4]])
    np.testing.assert_allclose(A, [[8]])
    np.testing.assert_allclose([H, V, D], 0, atol=1e-12)


def test_vertical_edge_lands_in_horizontal_band():
    A, H, V, D = dwt2_haar([[0, 1], [0, 1]])
    np.testing.assert_allclose(A, [[1]])
    np.testing.assert_allclose(H, [[1]])
    np.testing.assert_allclose([V, D], 0, atol=1e-12)


def test_horizontal_edge_lands_in_vertical_band():
    A, H, V, D = dwt2_haar([[0, 0], [1, 1]])
    np.testing.assert_allclose(V, [[1]])
    np.testing.assert_allclose([H, D], 0, atol=1e-12)


def test_checkerboard_lands_in_diagonal_band():
    A, H, V, D = dwt2_haar([[1, 0], [0, 1]])
    np.testing.assert_allclose(A, [[1]])
    np.testing.assert_allclose(D, [[1]])
    np.testing.assert_allclose([H, V], 0, atol=1e-12)


def test_single_pixel_pads_symmetrically():
    A, H, V, D = dwt2_haar([[3.0]])
    np.testing.assert_allclose(A, [[6.0]])
    np.testing.assert_allclose([H, V, D], 0, atol=1e-12)


@pytest.mark.parametrize("shape", [(8, 8), (7, 9), (1, 5), (224, 224)])
def test_perfect_reconstruction(shape):
    matrix = np.random.default_rng(sum(shape)).random(shape)
    A, H, V, D = dwt2_haar(matrix)
    assert A.shape == (-(-shape[0] // 2), -(-shape[1] // 2))
    restored = idwt2_haar(A, H, V, D, shape)
    assert np.abs(restored - matrix).max() < 1e-9


def test_energy_is_preserved_for_even_inputs():
    img = Image(np.random.default_rng(4).random((16, 12, 3)))
    energy = float(np.sum(np.square(img.pixels, dtype=np.float64)))
    assert subbands(img).energy() == pytest.approx(energy, rel=1e-6)


def test_two_by_two_by_hand():
    A, H, V, D = dwt2_haar([[1, 2], [3, 4]])
    # A = (a+b+c+d)/2, H = (b+d-a-c)/2, V = (c+d-a-b)/2, D = (a-b-c+d)/2
    assert (A.item(), H.item(), V.item(), D.item()) \
        == pytest.approx((5, 1, 2, 0), abs=1e-12)


def random_even_matrices(count, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        rows, cols = 2 * rng.integers(1, 17, 2)
        yield rng.normal(0, rng.uniform(0.1, 100), (rows, cols))


def test_parseval_and_round_trip_on_random_matrices():
    for matrix in random_even_matrices(1000):
        bands = dwt2_haar(matrix)
        energy = sum(np.sum(band ** 2) for band in bands)
        assert energy == pytest.approx(np.sum(matrix ** 2), rel=1e-8)
        assert np.abs(idwt2_haar(*bands) - matrix).max() < 1e-10


def test_transform_is_linear():
    rng = np.random.default_rng(1)
    x, y = rng.random((2, 10, 14))
    combined = dwt2_haar(3 * x - 0.5 * y)
    for band, bx, by in zip(combined, dwt2_haar(x), dwt2_haar(y)):
        np.testing.assert_allclose(band, 3 * bx - 0.5 * by, atol=1e-12)


def test_transpose_swaps_horizontal_and_vertical():
    matrix = np.random.default_rng(2).random((6, 10))
    A, H, V, D = dwt2_haar(matrix)
    At, Ht, Vt, Dt = dwt2_haar(matrix.T)
    np.testing.assert_allclose(At, A.T, atol=1e-12)
    np.testing.assert_allclose(Ht, V.T, atol=1e-12)
    np.testing.assert_allclose(Vt, H.T, atol=1e-12)
    np.testing.assert_allclose(Dt, D.T, atol=1e-12)
    assert np.sum(Ht ** 2) == pytest.approx(np.sum(V ** 2))
    assert np.sum(Vt ** 2) == pytest.approx(np.sum(H ** 2))


def test_bad_matrices():
    with pytest.raises(InvalidInput, match="empty"):
        dwt2_haar(np.zeros((0, 4)))
    with pytest.raises(InvalidInput, match="non-finite"):
        dwt2_haar([[0.0, np.nan]])
    with pytest.raises(InvalidInput, match="2-D"):
        dwt2_haar(np.zeros(4))
    with pytest.raises(InvalidInput, match="shapes differ"):
        idwt2_haar(np.zeros((2, 2)), np.zeros((2, 2)),
                   np.zeros((2, 2)), np.zeros((2, 3)))


def test_feature_image_layout():
    rows = np.zeros((8, 8, 3))
    rows[:, 1::2] = 1.0
    features = feature_image(Image(rows))
    assert features.pixels.shape == (8, 8, 3)
    assert features.pixels.dtype == np.uint8
    # every band is constant here
    assert (features.pixels == 0).all()


def test_feature_image_scales_each_band():
    pixels = np.random.default_rng(7).random((10, 10, 3))
    features = feature_image(Image(pixels)).pixels
    for c in range(3):
        for quadrant in (features[:5, :5, c], features[:5, 5:, c],
                         features[5:, :5, c], features[5:, 5:, c]):
            assert quadrant.min() == 0
            assert quadrant.max() == 255


def test_feature_image_needs_rgb():
    with pytest.raises(InvalidInput, match="RGB"):
        feature_image(Image(np.zeros((4, 4, 1))))


def test_wavelet_feature_image_size():
    img = Image(np.random.default_rng(1).random((224, 224, 3)), id="x")
    out = wavelet_feature_image(img)
    assert out.pixels.shape == (296, 296, 3)
    assert out.id == "x"


def test_fake_artifact_shows_up_in_the_diagonal_band():
    real = synthetic_image(0, 64, np.random.default_rng(3))
    fake = synthetic_image(1, 64, np.random.default_rng(3))
    real_d = np.abs(subbands(real).D).mean()
    fake_d = np.abs(subbands(fake).D).mean()
    assert fake_d > 1.5 * real_d


def test_extract_batch_preserves_order():
    images = [img for img, _ in synthetic_images(3, 3, size=16, seed=0)]
    batch = extract_batch(images, target_size=24, workers=4)
    assert [out.id for out in batch] == [img.id for img in images]
    expected = wavelet_feature_image(images[4], 24)
    assert np.array_equal(batch[4].pixels, expected.pixels)


def test_save_feature_image():
    img = Image(np.random.default_rng(2).random((12, 12, 3)))
    features = feature_image(img)
    path = save_feature_image(features, tmp_path() / "sub" / "f.png")
    with PIL.Image.open(path) as saved:
        assert np.array_equal(np.asarray(saved), features.pixels)
