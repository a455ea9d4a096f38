import math

import numpy as np
import pytest

from feddgm import datasets as dst
from feddgm import distill as dl
from feddgm import federation as fed
from feddgm import generator as gn
from feddgm import models as md


SPEC = md.ModelSpec("mlp", 2, 8, (1, 1, 2), 2)


@pytest.fixture(scope="module")
def blob_world():
    blobs = dst.gauss_blobs(classes=2, n=240, seed=0)
    test = dst.gauss_blobs(classes=2, n=120, seed=99)
    gen = gn.pretrain_decoder(blobs, gn.GeneratorConfig(
        style_dim=6, width=10, blocks=4, epochs=120, map_epochs=150, seed=3))
    return blobs, test, gen


def _cfg(method="fedavg", **kw):
    dcfg = kw.pop("distill", dl.DistillConfig(
        local_epochs=4, student_steps=3, distill_iters=10, lr_local=0.3,
        lr_student=1.0, lr_latent=200.0, ipc=4, layer=2, batch_local=40))
    base = dict(clients=4, rounds=2, method=method, alpha=0.5, surrogate=SPEC,
                distill=dcfg, global_epochs=10, lr_global=0.2, batch_global=32,
                seed=7, precision="f64")
    base.update(kw)
    return fed.FedConfig(**base)


def _vec(values):
    arr = np.asarray(values, dtype=np.float64)
    return md.ParamVector(arr, (("w", arr.shape),))


# --- aggregation primitive -----------------------------------------------------

def test_aggregate_identical_inputs_idempotent(rng):
    v = rng.normal(size=10)
    out = fed.aggregate_weighted([_vec(v), _vec(v), _vec(v)], [1, 2, 3])
    np.testing.assert_allclose(out.values, v, rtol=1e-15)


def test_aggregate_selects_with_zero_weight():
    a, b = _vec([1.0, 1.0]), _vec([9.0, 9.0])
    out = fed.aggregate_weighted([a, b], [1.0, 0.0])
    np.testing.assert_array_equal(out.values, a.values)


def test_aggregate_midpoint():
    out = fed.aggregate_weighted([_vec([1.0]), _vec([3.0])], [0.5, 0.5])
    np.testing.assert_array_equal(out.values, [2.0])


def test_aggregate_validation():
    with pytest.raises(ValueError):
        fed.aggregate_weighted([_vec([1.0])], [1.0, 2.0])
    with pytest.raises(ValueError):
        fed.aggregate_weighted([_vec([1.0]), _vec([1.0, 2.0])], [1, 1])
    with pytest.raises(ValueError):
        fed.aggregate_weighted([_vec([1.0]), _vec([2.0])], [0.0, 0.0])


# --- baselines ------------------------------------------------------------------

def test_fedprox_zero_mu_equals_fedavg(blob_world):
    blobs, test, _ = blob_world
    shards = dst.dirichlet_partition(blobs, 4, 0.5, seed=1)
    a = fed.run_baseline("fedavg", _cfg("fedavg"), blobs, shards, test)
    b = fed.run_baseline("fedprox", _cfg("fedprox", prox_mu=0.0), blobs, shards, test)
    assert [r.global_acc for r in a] == [r.global_acc for r in b]
    assert [r.local_loss for r in a] == [r.local_loss for r in b]


def test_fednova_equal_steps_equals_fedavg(blob_world):
    """With full-batch local training every client runs the same step count,
    and the normalized update collapses to the weighted average."""
    blobs, test, _ = blob_world
    shards = dst.dirichlet_partition(blobs, 4, 100.0, seed=2)
    dcfg = dl.DistillConfig(local_epochs=4, student_steps=3, distill_iters=10,
                            lr_local=0.3, lr_student=1.0, lr_latent=200.0,
                            ipc=4, layer=2, batch_local=10**6)
    a = fed.run_baseline("fedavg", _cfg("fedavg", distill=dcfg), blobs, shards, test)
    b = fed.run_baseline("fednova", _cfg("fednova", distill=dcfg), blobs, shards, test)
    for ra, rb in zip(a, b):
        assert abs(ra.global_acc - rb.global_acc) <= 1e-6


def test_single_client_is_centralized(blob_world):
    """M=K=1: every aggregation method reduces to SGD on the single shard."""
    blobs, test, _ = blob_world
    shards = dst.dirichlet_partition(blobs, 1, 0.5, seed=3)
    accs = {}
    for method in ("fedavg", "fedprox", "fednova"):
        cfg = _cfg(method, clients=1, rounds=1)
        accs[method] = fed.run_baseline(method, cfg, blobs, shards, test)[0].global_acc
    assert len(set(accs.values())) == 1
    # the aggregate of one client IS that client's SGD run (same seed stream)
    cfg = _cfg("fedavg", clients=1, rounds=1)
    w0 = md.model_new(cfg.global_model, fed._derive_seed(cfg.seed, 0x91054A))
    params, _ = dl.train_sgd(w0, cfg.global_model,
                             blobs.images[shards[0].indices],
                             blobs.labels[shards[0].indices],
                             cfg.distill.local_epochs, cfg.distill.lr_local,
                             cfg.distill.batch_local,
                             seed=fed._derive_seed(cfg.seed, 0, 0, 1))
    central = md.evaluate(params, cfg.global_model, test.images, test.labels)
    assert accs["fedavg"] == pytest.approx(central, abs=1e-12)


def test_metrics_series_length_and_fields(blob_world):
    blobs, test, _ = blob_world
    shards = dst.dirichlet_partition(blobs, 4, 0.5, seed=4)
    for rounds in (1, 3):
        series = fed.run_baseline("fedavg", _cfg(rounds=rounds), blobs, shards, test)
        assert len(series) == rounds
        for r in series:
            assert 0.0 <= r.global_acc <= 1.0
            assert math.isnan(r.surrogate_acc)
            assert len(r.local_loss) == 4


def test_end_to_end_determinism_feddgm(blob_world):
    blobs, test, gen = blob_world
    shards = dst.dirichlet_partition(blobs, 4, 0.5, seed=5)
    cfg = _cfg("feddgm", rounds=2)
    a = fed.run_feddgm(cfg, blobs, shards, gen, test)
    b = fed.run_feddgm(cfg, blobs, shards, gen, test)
    assert [r.global_acc for r in a] == [r.global_acc for r in b]
    assert [r.surrogate_acc for r in a] == [r.surrogate_acc for r in b]
    assert [r.mtt_final for r in a] == [r.mtt_final for r in b]


def test_feddgm_transport_is_params_only(blob_world):
    blobs, test, gen = blob_world
    shards = dst.dirichlet_partition(blobs, 4, 0.5, seed=5)
    audit = fed.TransportAudit()
    cfg = _cfg("feddgm", rounds=2)
    fed.run_feddgm(cfg, blobs, shards, gen, test, audit)
    audit.assert_only("params")
    per_round = audit.uploads(kind="params", round_index=0)
    assert len(per_round) == 4
    expected = md.param_count(SPEC) * cfg.float_width
    assert all(r.nbytes == expected for r in per_round)


def test_feddgm_upload_smaller_than_fedavg(blob_world):
    """Surrogate uploads must undercut global-architecture uploads."""
    blobs, test, gen = blob_world
    shards = dst.dirichlet_partition(blobs, 4, 0.5, seed=5)
    a1, a2 = fed.TransportAudit(), fed.TransportAudit()
    fed.run_feddgm(_cfg("feddgm", rounds=1), blobs, shards, gen, test, a1)
    fed.run_baseline("fedavg", _cfg("fedavg", rounds=1), blobs, shards, test, a2)
    assert a1.total_bytes("params") < a2.total_bytes("params")


def test_feddm_lite_transport_and_accounting(blob_world):
    blobs, test, _ = blob_world
    shards = dst.dirichlet_partition(blobs, 4, 0.5, seed=6)
    audit = fed.TransportAudit()
    dcfg = dl.DistillConfig(local_epochs=2, student_steps=1, distill_iters=15,
                            lr_local=0.3, lr_student=0.5, lr_latent=0.05,
                            latent_optimizer="adam", ipc=3, batch_local=32)
    cfg = _cfg("feddm-lite", distill=dcfg, rounds=2)
    series = fed.run_feddm_lite(cfg, blobs, shards, test, audit)
    audit.assert_only("images")
    for t in range(2):
        ups = audit.uploads(round_index=t)
        assert len(ups) == 4
        assert all(r.count == dcfg.ipc * blobs.classes for r in ups)
    assert len(series) == 2


def test_feddm_lite_matching_loss_zero_when_copying(blob_world):
    """With synthetic := real class samples the class means coincide."""
    blobs, _, _ = blob_world
    feat = md.model_new(SPEC, 0)
    idx = np.concatenate([blobs.class_indices(0)[:3], blobs.class_indices(1)[:3]])
    imgs = blobs.images[idx]
    labels = blobs.labels[idx]
    loss = fed.matching_loss_value(feat, SPEC, imgs, labels, imgs, labels, 2)
    assert loss <= 1e-18


def test_feddm_lite_final_accuracy_beats_chance():
    """10-class tiny-digits: final accuracy above the 0.1 random baseline."""
    train = dst.tiny_digits(n=600, seed=0)
    test = dst.tiny_digits(n=200, seed=7)
    spec = md.ModelSpec("convnet", 2, 6, (8, 8, 1), 10)
    shards = dst.dirichlet_partition(train, 4, 0.5, seed=0)
    accs = []
    for seed in range(3):
        dcfg = dl.DistillConfig(local_epochs=2, student_steps=1, distill_iters=20,
                                lr_local=0.2, lr_student=0.5, lr_latent=0.05,
                                latent_optimizer="adam", ipc=5, batch_local=32)
        cfg = fed.FedConfig(clients=4, rounds=2, method="feddm-lite", alpha=0.5,
                            surrogate=spec, distill=dcfg, global_epochs=40,
                            lr_global=0.1, batch_global=64, seed=seed)
        series = fed.run_feddm_lite(cfg, train, shards, test)
        accs.append(series[-1].global_acc)
    assert float(np.mean(accs)) > 0.1


def test_feddgm_requires_generator(blob_world):
    blobs, test, _ = blob_world
    shards = dst.dirichlet_partition(blobs, 4, 0.5, seed=5)
    with pytest.raises(ValueError, match="generator"):
        fed.run_feddgm(_cfg("feddgm"), blobs, shards, None, test)


def test_fedavg_iid_tracks_centralized(blob_world):
    """Sanity anchor: near-iid fedavg lands within 5 points of centralized
    training with an equal pass budget (3 seeds)."""
    blobs, test, _ = blob_world
    shards = dst.dirichlet_partition(blobs, 4, 1e6, seed=8)
    gaps = []
    for seed in (0, 1, 2):
        cfg = _cfg("fedavg", rounds=3, seed=seed)
        series = fed.run_baseline("fedavg", cfg, blobs, shards, test)
        central = fed.centralized_run(
            cfg.global_model, blobs, test,
            epochs=cfg.rounds * cfg.distill.local_epochs,
            lr=cfg.distill.lr_local, batch=cfg.distill.batch_local, seed=seed)
        gaps.append(abs(series[-1].global_acc - central))
    assert float(np.mean(gaps)) <= 0.05


def test_metrics_csv_layout(tmp_path, blob_world):
    blobs, test, gen = blob_world
    shards = dst.dirichlet_partition(blobs, 4, 0.5, seed=5)
    series = fed.run_feddgm(_cfg("feddgm", rounds=1), blobs, shards, gen, test)
    path = tmp_path / "metrics.csv"
    fed.write_metrics_csv(path, series)
    rows = fed.read_metrics_csv(path)
    assert list(rows[0].keys()) == list(fed.METRICS_COLUMNS)
    global_rows = [r for r in rows if r["client_id_or_GLOBAL"] == "GLOBAL"]
    client_rows = [r for r in rows if r["client_id_or_GLOBAL"] != "GLOBAL"]
    assert len(global_rows) == 1 and len(client_rows) == 4
    assert global_rows[0]["global_acc"] != ""
    assert client_rows[0]["mtt_loss_final"] != ""
    tr_path = tmp_path / "traces.csv"
    fed.write_traces_csv(tr_path, series)
    assert len(fed.read_metrics_csv(tr_path)) == 4 * 10  # clients x T_d
