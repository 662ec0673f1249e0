import numpy as np
import pytest

from i2idit import tensor as T
from i2idit.errors import ContractError, DimensionError
from i2idit.gradcheck import check_gradients
from i2idit.rng import Rng
from i2idit.semantic import SemanticEncoder, cosine_similarity
from i2idit.tensor import Tensor


@pytest.fixture(scope="module")
def enc():
    return SemanticEncoder()


def test_unit_norm_embeddings(enc):
    imgs = Rng(0).uniform((5, 3, 32, 32), -1, 1)
    e = enc.encode(imgs).data
    assert e.shape == (5, 64)
    np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-10)
    single = enc(imgs[0]).data
    np.testing.assert_allclose(single, e[0], atol=1e-12)


def test_identical_images_have_cosine_one(enc):
    img = Rng(1).uniform((3, 16, 16), -1, 1)
    assert abs(cosine_similarity(enc(img), enc(img.copy())).item() - 1.0) < 1e-12


def test_blank_image_embedding_is_defined(enc):
    e = enc(np.ones((3, 32, 32))).data
    assert np.all(np.isfinite(e)) and abs(np.linalg.norm(e) - 1) < 1e-10


def test_weights_reproducible_and_frozen(enc):
    other = SemanticEncoder()
    for (n, a), (_, b) in zip(enc.weights().items(), other.weights().items()):
        np.testing.assert_array_equal(a.data, b.data, err_msg=n)
        assert not a.requires_grad
    assert enc.frozen and enc.parameters() == []


def test_gradient_reaches_image_but_not_weights(enc):
    img = Tensor(Rng(2).uniform((3, 8, 8), -1, 1), requires_grad=True)
    ref = enc(Rng(3).uniform((3, 8, 8), -1, 1)).data
    err = check_gradients(lambda: T.sum(enc(img) * ref), [img])
    assert err < 1e-4
    assert all(w.grad is None for w in enc.weights().values())


def test_shape_errors(enc):
    with pytest.raises(DimensionError):
        enc(np.zeros((1, 16, 16)))
    with pytest.raises(DimensionError):
        enc(np.zeros((3, 10, 10)))


def test_cosine_similarity_contract():
    a = Tensor([1.0, 0.0])
    assert cosine_similarity(a, Tensor([0.0, 2.0])).item() == 0.0
    assert abs(cosine_similarity(a, Tensor([-3.0, 0.0])).item() + 1.0) < 1e-15
    with pytest.raises(ContractError):
        cosine_similarity(a, Tensor([0.0, 0.0]))
    with pytest.raises(DimensionError):
        cosine_similarity(a, Tensor([1.0, 0.0, 0.0]))


def test_cosine_gradient():
    rng = Rng(4)
    a, b = Tensor(rng.normal(6), requires_grad=True), Tensor(rng.normal(6), requires_grad=True)
    assert check_gradients(lambda: cosine_similarity(a, b), [a, b]) < 1e-6
