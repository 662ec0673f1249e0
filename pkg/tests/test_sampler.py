import math

import numpy as np
import pytest

from i2idit import sampler
from i2idit.codec import IdentityCodec
from i2idit.data import DatasetManifest, decode_ppm, generate_dataset, generate_pair
from i2idit.dit import DiTConfig, DiTModel
from i2idit.errors import DimensionError, ParameterError
from i2idit.rng import Rng
from i2idit.sampler import (
    EvalReport,
    emit_grid,
    evaluate,
    grid_image,
    psnr,
    sample_full,
    sample_partial,
    score,
    semantic_cosine,
)
from i2idit.schedule import make_linear_schedule
from i2idit.semantic import SemanticEncoder
from i2idit.tensor import Tensor
from i2idit.train import TrainConfig, build, make_checkpoint
from i2idit.optim import AdamWState

SCHED = make_linear_schedule()
CODEC = IdentityCodec(2)


@pytest.fixture(scope="module")
def enc():
    return SemanticEncoder(embed_dim=8)


def _model():
    cfg = DiTConfig(input_size=8, in_channels=12, patch_size=2, hidden_size=16, depth=1, num_heads=2,
                    cond_dim=8, time_embed_dim=8, mlp_ratio=2)
    return DiTModel(cfg, seed=0)


class Oracle:
    """Returns the exact noise that separates z_t from a planted clean latent."""

    def __init__(self, clean_images):
        self.z0 = CODEC.encode(clean_images).data

    def __call__(self, z, t, cond):
        t = np.asarray(t)[:, None, None, None]
        z = z.data if isinstance(z, Tensor) else z
        return Tensor((z - SCHED.sqrt_alpha_bar[t] * self.z0) / SCHED.sqrt_one_minus_alpha_bar[t])


class FirstLatent:
    """Zero predictor that remembers the latent it was first called with."""

    def __init__(self):
        self.first = None

    def __call__(self, z, t, cond):
        z = z.data if isinstance(z, Tensor) else z
        if self.first is None:
            self.first = np.array(z)
        return Tensor(np.zeros_like(z))


def test_zero_init_sampling_is_deterministic(enc):
    src = generate_pair(0, 1, S=16).source
    a = sample_full(_model(), CODEC, enc, SCHED, src, Rng(4))
    b = sample_full(_model(), CODEC, enc, SCHED, src, Rng(4))
    assert a.shape == (3, 16, 16) and a.tobytes() == b.tobytes()
    assert a.min() >= -1.0 and a.max() <= 1.0
    c = sample_partial(_model(), CODEC, enc, SCHED, src, 50, Rng(4))
    assert c.tobytes() == sample_partial(_model(), CODEC, enc, SCHED, src, 50, Rng(4)).tobytes()
    assert a.tobytes() != sample_full(_model(), CODEC, enc, SCHED, src, Rng(5)).tobytes()


def test_batched_sampling_shapes(enc):
    src = np.stack([generate_pair(0, i, S=16).source for i in range(3)])
    out = sample_full(_model(), CODEC, enc, SCHED, src, Rng(0))
    assert out.shape == (3, 3, 16, 16)


def test_oracle_full_chain_recovers_target(enc):
    p = generate_pair(3, 2, S=16)
    out = sample_full(Oracle(p.target[None]), CODEC, enc, SCHED, p.source, Rng(1))
    assert np.max(np.abs(out - p.target)) < 0.05


def test_oracle_short_partial_chain_is_near_identity(enc):
    p = generate_pair(3, 4, S=16)
    out = sample_partial(Oracle(p.source[None]), CODEC, enc, SCHED, p.source, 1, Rng(2))
    assert np.max(np.abs(out - CODEC.decode(CODEC.encode(p.source)).data)) < 0.05


def test_oracle_partial_chain_reaches_target_from_any_start(enc):
    p = generate_pair(3, 5, S=16)
    for t_start in (10, 150, 199):
        out = sample_partial(Oracle(p.target[None]), CODEC, enc, SCHED, p.source, t_start, Rng(t_start))
        assert np.max(np.abs(out - p.target)) < 0.05


def test_partial_start_range(enc):
    src = generate_pair(0, 0, S=16).source
    for bad in (0, 200, -3):
        with pytest.raises(ParameterError):
            sample_partial(_model(), CODEC, enc, SCHED, src, bad, Rng(0))


def test_initial_noise_energy_grows_with_t_start(enc):
    src = generate_pair(1, 1, S=16).source
    z0 = CODEC.encode(src).data
    draws, starts = 100, (1, 20, 60, 120, 199)
    means = []
    for t_start in starts:
        energies = []
        for k in range(draws):
            rec = FirstLatent()
            sampler.sample_partial(rec, CODEC, enc, SCHED, src, t_start, Rng(k))
            energies.append(np.sum((rec.first - z0) ** 2))
        means.append(np.mean(energies))
        # closed form: (1 - sqrt(ab))^2 |z0|^2 + (1 - ab) n
        ab = SCHED.alpha_bar[t_start]
        expected = (1 - math.sqrt(ab)) ** 2 * np.sum(z0 ** 2) + (1 - ab) * z0.size
        assert abs(means[-1] - expected) < 0.1 * expected + 1.0
    assert all(a <= b for a, b in zip(means, means[1:]))


def test_full_and_partial_share_the_denoising_loop(enc, monkeypatch):
    calls = []
    real = sampler.denoise

    def spy(model, z, t_from, cond, sched, rng, clip=True):
        calls.append(int(t_from))
        return real(model, z, t_from, cond, sched, rng, clip)

    monkeypatch.setattr(sampler, "denoise", spy)
    src = generate_pair(0, 0, S=16).source
    sampler.sample_full(FirstLatent(), CODEC, enc, SCHED, src, Rng(0))
    sampler.sample_partial(FirstLatent(), CODEC, enc, SCHED, src, SCHED.T - 1, Rng(0))
    assert calls == [SCHED.T - 1, SCHED.T - 1]


def test_psnr_examples():
    target = np.where((np.add.outer(np.arange(8), np.arange(8)) % 2) == 0, 1.0, -1.0)
    assert abs(psnr(np.zeros((8, 8)), target) - 20 * math.log10(2.0)) < 1e-12
    assert psnr(target, target) == 99.0


def _scalar_psnr(x, y):
    xs, ys = list(np.ravel(x)), list(np.ravel(y))
    mse = sum((a - b) ** 2 for a, b in zip(xs, ys)) / len(xs)
    return 20 * math.log10(2.0 / math.sqrt(mse))


def _scalar_cos(u, v):
    dot = sum(a * b for a, b in zip(u, v))
    return dot / math.sqrt(sum(a * a for a in u)) / math.sqrt(sum(b * b for b in v))


def test_metrics_match_scalar_reimplementations(enc):
    rng = Rng(9)
    for k in range(5):
        x, y = rng.uniform((3, 16, 16), -1, 1), rng.uniform((3, 16, 16), -1, 1)
        assert abs(psnr(x, y) - _scalar_psnr(x, y)) < 1e-10
        l1 = sum(abs(a - b) for a, b in zip(x.ravel(), y.ravel())) / x.size
        assert abs(sampler.l1(x, y) - l1) < 1e-10
        ex, ey = enc(x).data.tolist(), enc(y).data.tolist()
        assert abs(semantic_cosine(enc, x, y) - _scalar_cos(ex, ey)) < 1e-10


def test_perfect_match_conventions(enc):
    p = generate_pair(0, 0, S=16)
    rep = score(enc, [p.target], [p.source], [p.target], [0])
    row = rep.rows[0]
    assert row["psnr_db"] == 99.0 and row["l1"] == 0.0 and abs(row["cos_tgt"] - 1.0) < 1e-12


def test_report_means_and_csv():
    rep = EvalReport(rows=[dict(sample_id=i, psnr_db=10.0 + i, l1=0.1 * i, cos_src=0.5, cos_tgt=0.25 * i)
                           for i in range(4)])
    assert rep.count == 4
    for k in EvalReport.METRICS:
        assert abs(rep.mean[k] - sum(r[k] for r in rep.rows) / 4) < 1e-10
    lines = rep.to_csv().splitlines()
    assert lines[0] == "sample_id,psnr_db,l1,cos_src,cos_tgt"
    assert len(lines) == 6 and lines[-1].startswith("MEAN,")


def test_grid_layout_and_errors(tmp_path):
    a, b, c = -np.ones((3, 32, 32)), np.zeros((3, 32, 32)), np.ones((3, 32, 32))
    grid = grid_image([(a, b, c)])
    assert grid.shape == (3, 32, 100)
    np.testing.assert_array_equal(grid[:, :, 32:34], 1.0)
    assert grid_image([(a, b, c)] * 2).shape == (3, 66, 100)
    with pytest.raises(DimensionError):
        grid_image([])
    with pytest.raises(DimensionError):
        grid_image([(a, b, np.ones((3, 16, 16)))])
    emit_grid([(a, b, c)], tmp_path / "g1.ppm")
    emit_grid([(a, b, c)], tmp_path / "g2.ppm")
    raw = (tmp_path / "g1.ppm").read_bytes()
    assert raw == (tmp_path / "g2.ppm").read_bytes()
    assert decode_ppm(raw).shape == (3, 32, 100)


def _tiny_checkpoint():
    model = dict(input_size=8, in_channels=12, patch_size=2, hidden_size=16, depth=1, num_heads=2,
                 cond_dim=8, time_embed_dim=8, mlp_ratio=2)
    config = TrainConfig(iterations=1, image_size=16, model=model)
    comp = build(config)
    return make_checkpoint(config, comp, AdamWState(), 0, Rng(0))


def test_evaluate_writes_report_and_grid(tmp_path):
    generate_dataset(5, 1, 2, 16, tmp_path / "d")
    ckpt = _tiny_checkpoint()
    rep = evaluate(tmp_path / "d" / "test.manifest", ckpt, mode="partial", t_start=20, out_dir=tmp_path / "e")
    assert rep.count == 2
    text = (tmp_path / "e" / "eval.csv").read_text()
    assert len(text.splitlines()) == 4
    evaluate(tmp_path / "d" / "test.manifest", ckpt, mode="partial", t_start=20, out_dir=tmp_path / "f")
    assert (tmp_path / "f" / "eval.csv").read_text() == text
    assert (tmp_path / "f" / "grid.ppm").read_bytes() == (tmp_path / "e" / "grid.ppm").read_bytes()


def test_evaluate_rejects_empty_manifest_and_bad_mode(tmp_path):
    empty = DatasetManifest(seed=0, image_size=16, split="test", entries=[])
    with pytest.raises(ParameterError):
        evaluate(empty, _tiny_checkpoint())
    generate_dataset(5, 1, 1, 16, tmp_path)
    with pytest.raises(ParameterError):
        evaluate(tmp_path / "test.manifest", _tiny_checkpoint(), mode="sideways")


def test_condition_override(enc):
    model = _model()
    for name, p in model.named_parameters():
        p.data[...] = Rng(11).split(name).normal(p.shape) * 0.2
    a, b = generate_pair(0, 0, S=16).source, generate_pair(0, 1, S=16).source
    own = sample_partial(model, CODEC, enc, SCHED, a, 30, Rng(1))
    same = sample_partial(model, CODEC, enc, SCHED, a, 30, Rng(1), cond_img=a)
    swapped = sample_partial(model, CODEC, enc, SCHED, a, 30, Rng(1), cond_img=b)
    assert own.tobytes() == same.tobytes() and own.tobytes() != swapped.tobytes()
    with pytest.raises(DimensionError):
        sample_full(model, CODEC, enc, SCHED, a, Rng(1), cond_img=np.ones((3, 8, 8)))
