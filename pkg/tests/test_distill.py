import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feddgm import autodiff as ad
from feddgm import datasets as dst
from feddgm import distill as dl
from feddgm import generator as gn
from feddgm import models as md


SPEC282 = md.ModelSpec("mlp", 2, 8, (1, 1, 2), 2)


@pytest.fixture(scope="module")
def blob_world():
    blobs = dst.gauss_blobs(classes=2, n=200, seed=0)
    gen = gn.pretrain_decoder(blobs, gn.GeneratorConfig(
        style_dim=6, width=10, blocks=4, epochs=150, map_epochs=200, seed=3))
    shards = dst.dirichlet_partition(blobs, 2, 0.5, seed=1)
    return blobs, gen, shards


def _vec(values):
    arr = np.asarray(values, dtype=np.float64)
    return md.ParamVector(arr, (("w", arr.shape),))


# --- matching loss ------------------------------------------------------------

def test_mtt_loss_anchors():
    rng = np.random.default_rng(0)
    for _ in range(100):
        tm = _vec(rng.normal(size=17))
        tg = _vec(rng.normal(size=17))
        assert dl.mtt_loss(tm, tm, tg) == 0.0
        assert dl.mtt_loss(tg, tm, tg) == 1.0


def test_mtt_loss_norm_ratio():
    assert dl.mtt_loss(_vec([1, 0]), _vec([0, 0]), _vec([2, 0])) == 0.25


def test_mtt_loss_zero_denominator():
    v = _vec([1.0, 2.0])
    with pytest.raises(dl.ClientDidNotMoveError):
        dl.mtt_loss(_vec([0.0, 0.0]), v, _vec([1.0, 2.0]))


def test_mtt_loss_length_mismatch():
    with pytest.raises(ValueError, match="length"):
        dl.mtt_loss(_vec([1.0]), _vec([1.0, 2.0]), _vec([0.0, 0.0]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mtt_loss_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    hat, m, g = (rng.normal(size=12) for _ in range(3))
    perm = rng.permutation(12)
    a = dl.mtt_loss(_vec(hat), _vec(m), _vec(g))
    b = dl.mtt_loss(_vec(hat[perm]), _vec(m[perm]), _vec(g[perm]))
    assert a == pytest.approx(b, rel=1e-12)


def test_mtt_loss_nonnegative_random():
    rng = np.random.default_rng(5)
    for _ in range(50):
        vals = [_vec(rng.normal(size=9)) for _ in range(3)]
        assert dl.mtt_loss(*vals) >= 0.0


# --- client update ------------------------------------------------------------

def test_client_update_zero_lr_is_identity(blob_world):
    blobs, _, shards = blob_world
    cfg = dl.DistillConfig(local_epochs=3, student_steps=1, distill_iters=0,
                           lr_local=0.0, lr_student=0.1, lr_latent=0.1,
                           ipc=1, batch_local=16)
    theta_g = md.model_new(SPEC282, 4)
    theta_m, _ = dl.client_update(theta_g, SPEC282, blobs, shards[0], cfg, seed=0)
    np.testing.assert_array_equal(theta_m.values, theta_g.values)


def test_client_update_deterministic(blob_world):
    blobs, _, shards = blob_world
    cfg = dl.DistillConfig(local_epochs=4, student_steps=1, distill_iters=0,
                           lr_local=0.2, lr_student=0.1, lr_latent=0.1,
                           ipc=1, batch_local=16)
    theta_g = md.model_new(SPEC282, 4)
    a, la = dl.client_update(theta_g, SPEC282, blobs, shards[1], cfg, seed=9)
    b, lb = dl.client_update(theta_g, SPEC282, blobs, shards[1], cfg, seed=9)
    assert a.values.tobytes() == b.values.tobytes()
    assert la == lb


def test_client_update_interpolates_single_sample(blob_world):
    blobs, _, _ = blob_world
    one = dst.make_shard(0, [3], blobs)
    cfg = dl.DistillConfig(local_epochs=1500, student_steps=1, distill_iters=0,
                           lr_local=1.0, lr_student=0.1, lr_latent=0.1,
                           ipc=1, batch_local=1)
    theta_g = md.model_new(SPEC282, 1)
    _, loss = dl.client_update(theta_g, SPEC282, blobs, one, cfg, seed=0)
    assert loss <= 1e-4


def test_client_update_rejects_empty_shard(blob_world):
    blobs, _, _ = blob_world
    empty = dst.ClientShard(0, np.array([], dtype=np.int64), np.zeros(2))
    cfg = dl.DistillConfig()
    with pytest.raises(ValueError, match="empty"):
        dl.client_update(md.model_new(SPEC282, 0), SPEC282, blobs, empty, cfg, seed=0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_sgd_divergence_reported(blob_world):
    # lr * mu > 2 makes the proximal pull geometrically divergent
    blobs, _, shards = blob_world
    theta_g = md.model_new(SPEC282, 0)
    with pytest.raises(dl.DivergenceError):
        dl.train_sgd(theta_g, SPEC282, blobs.images, blobs.labels,
                     epochs=60, lr=3.0, batch=64, seed=0,
                     prox=(2.0, md.model_new(SPEC282, 1)), dtype=np.float32)


def test_distill_config_defaults_match_reference_settings():
    cfg = dl.DistillConfig()
    assert cfg.local_epochs == 20
    assert cfg.student_steps == 20
    assert cfg.distill_iters == 100
    assert cfg.ipc == 10


def test_distill_config_validation():
    with pytest.raises(ValueError):
        dl.DistillConfig(local_epochs=0)
    with pytest.raises(ValueError):
        dl.DistillConfig(distill_iters=-1)
    with pytest.raises(ValueError):
        dl.DistillConfig(lr_latent=-0.5)
    with pytest.raises(ValueError):
        dl.DistillConfig(latent_optimizer="lbfgs")


# --- distillation -------------------------------------------------------------

def _blob_cfg(**overrides):
    base = dict(local_epochs=5, student_steps=3, distill_iters=50,
                lr_local=0.3, lr_student=1.0, lr_latent=200.0,
                ipc=4, layer=2, batch_local=32)
    base.update(overrides)
    return dl.DistillConfig(**base)


def test_distill_client_zero_iters_noop(blob_world):
    blobs, gen, shards = blob_world
    cfg = _blob_cfg(distill_iters=0)
    theta_g = md.model_new(SPEC282, 0)
    theta_m, _ = dl.client_update(theta_g, SPEC282, blobs, shards[0], cfg, seed=1)
    z0 = gn.init_latents(gen, 2, ipc=4, classes=2, seed=2, client_id=0)
    z, trace = dl.distill_client(theta_g, theta_m, gen, z0, SPEC282, cfg)
    assert trace.size == 0
    np.testing.assert_array_equal(z.codes, z0.codes)
    assert z.codes is not z0.codes


def test_distill_client_improves_loss_over_seeds(blob_world):
    """Final matching loss beats the first iteration in >= 90% of 20 runs."""
    blobs, gen, shards = blob_world
    cfg = _blob_cfg()
    wins = 0
    for seed in range(20):
        theta_g = md.model_new(SPEC282, seed)
        theta_m, _ = dl.client_update(theta_g, SPEC282, blobs,
                                      shards[seed % 2], cfg, seed=100 + seed)
        z0 = gn.init_latents(gen, 2, ipc=4, classes=2, seed=seed, client_id=0)
        _, trace = dl.distill_client(theta_g, theta_m, gen, z0, SPEC282, cfg)
        assert trace.shape == (50,)
        wins += trace[-1] < trace[0]
    assert wins >= 18, f"improved in only {wins}/20 runs"


def test_distill_client_does_not_mutate_inputs(blob_world):
    blobs, gen, shards = blob_world
    cfg = _blob_cfg(distill_iters=10)
    theta_g = md.model_new(SPEC282, 3)
    theta_m, _ = dl.client_update(theta_g, SPEC282, blobs, shards[0], cfg, seed=4)
    z0 = gn.init_latents(gen, 2, ipc=4, classes=2, seed=5, client_id=0)
    before = (theta_g.values.tobytes(), theta_m.values.tobytes(),
              gen.param_bytes(), z0.codes.tobytes())
    dl.distill_client(theta_g, theta_m, gen, z0, SPEC282, cfg)
    after = (theta_g.values.tobytes(), theta_m.values.tobytes(),
             gen.param_bytes(), z0.codes.tobytes())
    assert before == after


def test_distill_client_zero_denominator(blob_world):
    blobs, gen, _ = blob_world
    theta_g = md.model_new(SPEC282, 0)
    z0 = gn.init_latents(gen, 2, ipc=2, classes=2, seed=0, client_id=0)
    with pytest.raises(dl.ClientDidNotMoveError):
        dl.distill_client(theta_g, theta_g.copy(), gen, z0, SPEC282, _blob_cfg())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_distill_client_reports_blowup_iteration(blob_world):
    blobs, gen, shards = blob_world
    cfg = _blob_cfg(lr_student=1e20, lr_latent=1e9, distill_iters=30)
    theta_g = md.model_new(SPEC282, 0)
    theta_m, _ = dl.client_update(theta_g, SPEC282, blobs, shards[0], cfg, seed=1)
    z0 = gn.init_latents(gen, 2, ipc=4, classes=2, seed=1, client_id=0)
    with pytest.raises(dl.MetaGradientError) as err:
        dl.distill_client(theta_g, theta_m, gen, z0, SPEC282, cfg,
                          dtype=np.float32)
    assert err.value.iteration >= 0


def test_meta_gradient_matches_finite_differences(blob_world):
    """d(matching loss)/d(codes) via double backprop vs central differences,
    64-bit, T_s=3: at least 95% of sampled coordinates within 1e-3."""
    blobs, gen, shards = blob_world
    cfg = _blob_cfg(student_steps=3)
    theta_g = md.model_new(SPEC282, 7)
    theta_m, _ = dl.client_update(theta_g, SPEC282, blobs, shards[0], cfg, seed=8)
    z0 = gn.init_latents(gen, 2, ipc=4, classes=2, seed=9, client_id=0)
    codes = ad.leaf("codes", z0.codes.shape)
    loss = dl.build_student_unroll(gen, 2, codes, z0.labels, SPEC282,
                                   theta_g, theta_m, 3, cfg.lr_student)
    (gz,) = ad.grad(loss, [codes])
    exact = ad.evaluate(gz, {codes: z0.codes})
    graph = ad.Graph(loss)
    rng = np.random.default_rng(0)
    coords = list(np.ndindex(z0.codes.shape))
    sample = [coords[i] for i in rng.choice(len(coords), 60, replace=False)]
    ok = 0
    work = z0.codes.copy()
    for idx in sample:
        orig = work[idx]
        work[idx] = orig + 1e-5
        hi = float(graph.eval({codes: work}))
        work[idx] = orig - 1e-5
        lo = float(graph.eval({codes: work}))
        work[idx] = orig
        fd = (hi - lo) / 2e-5
        denom = max(abs(fd), abs(exact[idx]), 1e-8)
        ok += abs(fd - exact[idx]) / denom <= 1e-3
    assert ok >= 0.95 * len(sample)


def test_distill_client_deterministic(blob_world):
    blobs, gen, shards = blob_world
    cfg = _blob_cfg(distill_iters=15)
    theta_g = md.model_new(SPEC282, 2)
    theta_m, _ = dl.client_update(theta_g, SPEC282, blobs, shards[1], cfg, seed=3)
    z0 = gn.init_latents(gen, 2, ipc=4, classes=2, seed=4, client_id=1)
    z1, t1 = dl.distill_client(theta_g, theta_m, gen, z0, SPEC282, cfg)
    z2, t2 = dl.distill_client(theta_g, theta_m, gen, z0, SPEC282, cfg)
    assert z1.codes.tobytes() == z2.codes.tobytes()
    np.testing.assert_array_equal(t1, t2)
