"""Communication-round orchestration: the generative-latent distillation
method plus aggregation baselines (fedavg, fedprox, fednova) and a
simplified client-side distribution-matching baseline (feddm-lite).

In the distillation method, clients train and upload small surrogate
models; the server distills per-client synthetic data from those uploads
and trains both a larger global model and the next round's surrogate on
the union. Aggregation baselines train the global architecture on-device
and upload it. feddm-lite is the privacy mirror image: clients upload
synthetic images, never parameters.

A ``TransportAudit`` records every client->server payload so tests can
assert what actually crossed the wire.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import models as md
from .datasets import ClientShard, LabeledDataset
from .distill import (ClientDidNotMoveError, DistillConfig, client_update,
                      distill_client, train_sgd)
from .generator import Generator, dump_synthetic, init_latents
from . import autodiff as ad

log = logging.getLogger("feddgm")

METHODS = ("feddgm", "fedavg", "fedprox", "fednova", "feddm-lite")

METRICS_COLUMNS = ("round", "method", "alpha", "seed", "client_id_or_GLOBAL",
                   "local_loss", "mtt_loss_final", "global_acc",
                   "surrogate_acc", "wall_s")


class AllClientsSkippedError(RuntimeError):
    """Every participant was skipped (zero matching denominator)."""


@dataclass
class FedConfig:
    clients: int = 10
    participants: int | None = None      # K; None -> all clients
    rounds: int = 5
    method: str = "feddgm"
    alpha: float = 0.5
    surrogate: md.ModelSpec = None
    global_model: md.ModelSpec = None    # None -> scaled_up(surrogate)
    distill: DistillConfig = field(default_factory=DistillConfig)
    global_epochs: int = 100             # T_g, scaled down from the reference 1000
    lr_global: float = 0.1
    batch_global: int = 64
    prox_mu: float = 0.0
    seed: int = 0
    accumulate_synth: bool = False
    precision: str = "f32"

    def __post_init__(self):
        if self.surrogate is None:
            raise ValueError("surrogate ModelSpec is required")
        if self.global_model is None:
            self.global_model = md.scaled_up(self.surrogate)
        if self.participants is None:
            self.participants = self.clients
        if not 1 <= self.participants <= self.clients:
            raise ValueError("need 1 <= participants <= clients")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.prox_mu < 0:
            raise ValueError("prox_mu must be >= 0")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be f32 or f64")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    @property
    def float_width(self) -> int:
        return 4 if self.precision == "f32" else 8


@dataclass
class RoundMetrics:
    round_index: int
    method: str
    alpha: float
    seed: int
    local_loss: dict[int, float]
    mtt_final: dict[int, float]
    global_acc: float
    surrogate_acc: float
    wall_s: float
    traces: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for acc in (self.global_acc, self.surrogate_acc):
            if not math.isnan(acc) and not 0.0 <= acc <= 1.0:
                raise ValueError(f"accuracy {acc} outside [0, 1]")


@dataclass
class UploadRecord:
    round_index: int
    client_id: int
    kind: str     # "params" | "images"
    count: int
    nbytes: int


class TransportAudit:
    """Log of client->server payloads, for the transport invariants."""

    def __init__(self):
        self.records: list[UploadRecord] = []

    def record_upload(self, round_index, client_id, kind, count, nbytes):
        if kind not in ("params", "images"):
            raise ValueError(f"unknown payload kind {kind!r}")
        self.records.append(UploadRecord(round_index, client_id, kind,
                                         int(count), int(nbytes)))

    def uploads(self, kind: str | None = None, round_index: int | None = None):
        out = self.records
        if kind is not None:
            out = [r for r in out if r.kind == kind]
        if round_index is not None:
            out = [r for r in out if r.round_index == round_index]
        return out

    def total_bytes(self, kind: str) -> int:
        return sum(r.nbytes for r in self.uploads(kind))

    def assert_only(self, kind: str) -> None:
        other = [r for r in self.records if r.kind != kind]
        if other:
            raise AssertionError(
                f"transport audit: expected only {kind!r} uploads, found {other[:3]}")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["round", "client_id", "kind", "count", "nbytes"])
            for r in self.records:
                w.writerow([r.round_index, r.client_id, r.kind, r.count, r.nbytes])


def _derive_seed(*keys) -> int:
    ss = np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys])
    return int(ss.generate_state(1)[0])


def _sample_participants(cfg: FedConfig, round_index: int) -> list[int]:
    rng = np.random.default_rng(
        np.random.SeedSequence([cfg.seed, round_index, 0x5E1EC7]))
    picked = rng.choice(cfg.clients, size=cfg.participants, replace=False)
    return sorted(int(c) for c in picked)


def aggregate_weighted(params: list[md.ParamVector],
                       weights: list[float]) -> md.ParamVector:
    """Convex combination of parameter vectors with normalized weights."""
    if len(params) != len(weights) or not params:
        raise ValueError("need one weight per parameter vector")
    length = len(params[0])
    if any(len(p) != length for p in params):
        raise ValueError("parameter vectors differ in length")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    total = w.sum()
    if total <= 0:
        raise ValueError("weight sum must be positive")
    w = w / total
    out = np.zeros(length)
    for wi, p in zip(w, params):
        out += wi * p.values
    return md.ParamVector(out, params[0].layout)


def _evaluate(params, spec, ds: LabeledDataset, dtype) -> float:
    return md.evaluate(params, spec, ds.images, ds.labels, dtype=dtype)


def run_feddgm(cfg: FedConfig, train: LabeledDataset, shards: list[ClientShard],
               gen: Generator, test: LabeledDataset,
               audit: TransportAudit | None = None,
               dump_dir=None) -> list[RoundMetrics]:
    """The full per-round pipeline: broadcast surrogate, local training,
    per-client latent distillation, then server training of the global
    model and next surrogate on this round's synthetic union."""
    if gen is None:
        raise ValueError("feddgm needs a pretrained generator")
    audit = audit if audit is not None else TransportAudit()
    dcfg = cfg.distill
    layer = dcfg.layer if dcfg.layer is not None else gen.default_layer
    surrogate_len = md.param_count(cfg.surrogate)
    theta_g = md.model_new(cfg.surrogate, _derive_seed(cfg.seed, 0x517A7A))
    w_g = md.model_new(cfg.global_model, _derive_seed(cfg.seed, 0x91054A))
    pool_images, pool_labels = [], []
    series = []
    for t in range(cfg.rounds):
        tic = time.perf_counter()
        participants = _sample_participants(cfg, t)
        local_loss, mtt_final, traces = {}, {}, {}
        synth_images, synth_labels = [], []
        for m in participants:
            theta_m, lloss = client_update(
                theta_g, cfg.surrogate, train, shards[m], dcfg,
                seed=_derive_seed(cfg.seed, t, m, 1), dtype=cfg.dtype)
            audit.record_upload(t, m, "params", surrogate_len,
                                surrogate_len * cfg.float_width)
            local_loss[m] = lloss
            z0 = init_latents(gen, layer, dcfg.ipc, train.classes,
                              seed=_derive_seed(cfg.seed, t, m, 2), client_id=m)
            try:
                z, trace = distill_client(theta_g, theta_m, gen, z0,
                                          cfg.surrogate, dcfg, dtype=cfg.dtype)
            except ClientDidNotMoveError:
                log.warning("round %d: client %d did not move; skipping", t, m)
                continue
            mtt_final[m] = float(trace[-1]) if trace.size else math.nan
            traces[m] = trace
            from .generator import decode
            synth_images.append(decode(gen, z, dtype=cfg.dtype))
            synth_labels.append(z.labels)
        if not synth_images:
            raise AllClientsSkippedError(
                f"round {t}: every participant had a zero matching denominator")
        images = np.concatenate(synth_images).astype(np.float64)
        labels = np.concatenate(synth_labels)
        if cfg.accumulate_synth:
            pool_images.append(images)
            pool_labels.append(labels)
            images = np.concatenate(pool_images)
            labels = np.concatenate(pool_labels)
        if dump_dir is not None:
            dump_synthetic(f"{dump_dir}/round_{t:03d}", images, labels)
        w_g, _ = train_sgd(w_g, cfg.global_model, images, labels,
                           cfg.global_epochs, cfg.lr_global, cfg.batch_global,
                           seed=_derive_seed(cfg.seed, t, 3), dtype=cfg.dtype)
        theta_g, _ = train_sgd(theta_g, cfg.surrogate, images, labels,
                               cfg.global_epochs, cfg.lr_global, cfg.batch_global,
                               seed=_derive_seed(cfg.seed, t, 4), dtype=cfg.dtype)
        series.append(RoundMetrics(
            t, "feddgm", cfg.alpha, cfg.seed, local_loss, mtt_final,
            _evaluate(w_g, cfg.global_model, test, cfg.dtype),
            _evaluate(theta_g, cfg.surrogate, test, cfg.dtype),
            time.perf_counter() - tic, traces))
    audit.assert_only("params")
    return series


def _local_steps(n: int, epochs: int, batch: int) -> int:
    return epochs * math.ceil(n / min(batch, n))


def run_baseline(method: str, cfg: FedConfig, train: LabeledDataset,
                 shards: list[ClientShard], test: LabeledDataset,
                 audit: TransportAudit | None = None) -> list[RoundMetrics]:
    """Aggregation baselines. Clients train the global architecture.

    fedavg: sample-count-weighted average of locally trained parameters.
    fedprox: fedavg plus a local proximal term (mu/2)||theta - w_g||^2.
    fednova: update by normalized local directions (theta_g - theta_m)/tau_m,
    weighted by sample counts and rescaled by the effective step count.
    """
    if method not in ("fedavg", "fedprox", "fednova"):
        raise ValueError(f"not an aggregation baseline: {method!r}")
    audit = audit if audit is not None else TransportAudit()
    dcfg = cfg.distill
    spec = cfg.global_model
    w_g = md.model_new(spec, _derive_seed(cfg.seed, 0x91054A))
    glen = md.param_count(spec)
    series = []
    for t in range(cfg.rounds):
        tic = time.perf_counter()
        participants = _sample_participants(cfg, t)
        local_loss = {}
        thetas, sizes, steps = [], [], []
        for m in participants:
            prox = (cfg.prox_mu, w_g) if method == "fedprox" else None
            images = train.images[shards[m].indices]
            labels = train.labels[shards[m].indices]
            theta_m, lloss = train_sgd(
                w_g, spec, images, labels, dcfg.local_epochs, dcfg.lr_local,
                dcfg.batch_local, seed=_derive_seed(cfg.seed, t, m, 1),
                prox=prox, dtype=cfg.dtype)
            audit.record_upload(t, m, "params", glen, glen * cfg.float_width)
            local_loss[m] = lloss
            thetas.append(theta_m)
            sizes.append(len(shards[m]))
            steps.append(_local_steps(len(shards[m]), dcfg.local_epochs,
                                      dcfg.batch_local))
        if method in ("fedavg", "fedprox"):
            w_g = aggregate_weighted(thetas, sizes)
        else:  # fednova
            p = np.asarray(sizes, dtype=np.float64)
            p = p / p.sum()
            tau_eff = float(np.sum(p * np.asarray(steps, dtype=np.float64)))
            direction = np.zeros(glen)
            for pi, tau, theta_m in zip(p, steps, thetas):
                direction += pi * (w_g.values - theta_m.values) / tau
            w_g = md.ParamVector(w_g.values - tau_eff * direction, w_g.layout)
        series.append(RoundMetrics(
            t, method, cfg.alpha, cfg.seed, local_loss, {},
            _evaluate(w_g, spec, test, cfg.dtype), math.nan,
            time.perf_counter() - tic))
    audit.assert_only("params")
    return series


def build_matching_loss(feat_params: md.ParamVector, spec: md.ModelSpec,
                        synth: ad.Tensor, synth_labels: np.ndarray,
                        real_means: np.ndarray, present: np.ndarray):
    """Distribution-matching loss node: squared distance between per-class
    mean features of the synthetic batch and the client's real data, summed
    over the classes the client actually holds."""
    classes = real_means.shape[0]
    _, feats = md.build_forward(spec, [ad.const(p) for p in feat_params.tensors()],
                                synth, with_features=True)
    counts = np.bincount(synth_labels, minlength=classes).astype(np.float64)
    sel = md.onehot(synth_labels, classes).T / np.maximum(counts, 1)[:, None]
    mean_feats = ad.matmul(ad.const(sel), feats)
    mask = present.astype(np.float64)[:, None]
    diff = ad.mul(ad.const(mask), ad.sub(mean_feats, ad.const(real_means)))
    return ad.norm_sq(diff)


def matching_loss_value(feat_params: md.ParamVector, spec: md.ModelSpec,
                        synth_images: np.ndarray, synth_labels: np.ndarray,
                        real_images: np.ndarray, real_labels: np.ndarray,
                        classes: int) -> float:
    """Numeric distribution-matching loss for given synthetic images."""
    real_means, present = _class_mean_features(feat_params, spec, real_images,
                                               real_labels, classes)
    x = ad.leaf("x", synth_images.shape)
    loss = build_matching_loss(feat_params, spec, x, synth_labels,
                               real_means, present)
    return float(ad.evaluate(loss, {x: synth_images}))


def _class_mean_features(feat_params, spec, images, labels, classes):
    x = ad.leaf("x", images.shape)
    _, feats = md.build_forward(spec, [ad.const(p) for p in feat_params.tensors()],
                                x, with_features=True)
    fv = ad.evaluate(feats, {x: images})
    means = np.zeros((classes, fv.shape[1]))
    present = np.zeros(classes, dtype=bool)
    for c in range(classes):
        rows = fv[labels == c]
        if rows.shape[0]:
            means[c] = rows.mean(axis=0)
            present[c] = True
    return means, present


def run_feddm_lite(cfg: FedConfig, train: LabeledDataset,
                   shards: list[ClientShard], test: LabeledDataset,
                   audit: TransportAudit | None = None,
                   dump_dir=None) -> list[RoundMetrics]:
    """Simplified client-side distillation baseline: each client optimizes
    pixel-space synthetic images to match per-class mean embeddings of a
    shared random frozen feature extractor, then uploads the images; the
    server trains the global model on the union."""
    audit = audit if audit is not None else TransportAudit()
    dcfg = cfg.distill
    spec = cfg.surrogate
    feat_params = md.model_new(spec, _derive_seed(cfg.seed, 0xFEA7))
    w_g = md.model_new(cfg.global_model, _derive_seed(cfg.seed, 0x91054A))
    classes = train.classes
    h, wd, c = train.image_shape
    n_synth = dcfg.ipc * classes
    series = []
    for t in range(cfg.rounds):
        tic = time.perf_counter()
        participants = _sample_participants(cfg, t)
        local_loss = {}
        synth_images, synth_labels = [], []
        for m in participants:
            rng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, t, m, 0xDD]))
            images_m = train.images[shards[m].indices]
            labels_m = train.labels[shards[m].indices]
            real_means, present = _class_mean_features(
                feat_params, spec, images_m, labels_m, classes)
            labels_s = np.repeat(np.arange(classes), dcfg.ipc)
            init = np.empty((n_synth, h, wd, c))
            for cls in range(classes):
                rows = np.flatnonzero(labels_s == cls)
                have = np.flatnonzero(labels_m == cls)
                if have.size:
                    pick = rng.choice(have, size=dcfg.ipc, replace=True)
                    init[rows] = images_m[pick] + rng.normal(0, 0.01, (dcfg.ipc, h, wd, c))
                else:
                    init[rows] = rng.uniform(0.25, 0.75, (dcfg.ipc, h, wd, c))
            u = np.log(np.clip(init, 1e-3, 1 - 1e-3) /
                       (1 - np.clip(init, 1e-3, 1 - 1e-3)))
            uleaf = ad.leaf("u", u.shape)
            imgs_node = ad.sigmoid(uleaf)
            loss_node = build_matching_loss(feat_params, spec, imgs_node,
                                            labels_s, real_means, present)
            (gu,) = ad.grad(loss_node, [uleaf])
            prog = ad.Graph([loss_node, imgs_node, gu])
            mbuf = np.zeros_like(u)
            vbuf = np.zeros_like(u)
            final_loss, final_imgs = math.nan, None
            for it in range(dcfg.distill_iters):
                lv, iv, gv = prog.eval({uleaf: u}, dtype=cfg.dtype)
                final_loss, final_imgs = float(lv), np.asarray(iv, np.float64)
                gv = np.asarray(gv, np.float64)
                if dcfg.latent_optimizer == "adam":
                    mbuf = 0.9 * mbuf + 0.1 * gv
                    vbuf = 0.999 * vbuf + 0.001 * gv * gv
                    u = u - dcfg.lr_latent * (mbuf / (1 - 0.9 ** (it + 1))) / \
                        (np.sqrt(vbuf / (1 - 0.999 ** (it + 1))) + 1e-8)
                else:
                    u = u - dcfg.lr_latent * gv
            if final_imgs is None:
                _, iv = ad.Graph([loss_node, imgs_node]).eval({uleaf: u},
                                                              dtype=cfg.dtype)[:2]
                final_imgs = np.asarray(iv, np.float64)
            local_loss[m] = final_loss
            audit.record_upload(t, m, "images", n_synth,
                                n_synth * h * wd * c * cfg.float_width)
            synth_images.append(final_imgs)
            synth_labels.append(labels_s)
        images = np.concatenate(synth_images)
        labels = np.concatenate(synth_labels)
        if dump_dir is not None:
            dump_synthetic(f"{dump_dir}/round_{t:03d}", images, labels)
        w_g, _ = train_sgd(w_g, cfg.global_model, images, labels,
                           cfg.global_epochs, cfg.lr_global, cfg.batch_global,
                           seed=_derive_seed(cfg.seed, t, 3), dtype=cfg.dtype)
        series.append(RoundMetrics(
            t, "feddm-lite", cfg.alpha, cfg.seed, local_loss, {},
            _evaluate(w_g, cfg.global_model, test, cfg.dtype), math.nan,
            time.perf_counter() - tic))
    audit.assert_only("images")
    return series


def run_method(cfg: FedConfig, train: LabeledDataset, shards: list[ClientShard],
               test: LabeledDataset, gen: Generator | None = None,
               audit: TransportAudit | None = None,
               dump_dir=None) -> list[RoundMetrics]:
    """Dispatch on cfg.method."""
    if cfg.method == "feddgm":
        return run_feddgm(cfg, train, shards, gen, test, audit, dump_dir)
    if cfg.method == "feddm-lite":
        return run_feddm_lite(cfg, train, shards, test, audit, dump_dir)
    return run_baseline(cfg.method, cfg, train, shards, test, audit)


def centralized_run(spec: md.ModelSpec, train: LabeledDataset,
                    test: LabeledDataset, epochs: int, lr: float, batch: int,
                    seed: int, dtype=np.float64) -> float:
    """Plain SGD on the pooled dataset; the unreachable benchmark."""
    params = md.model_new(spec, _derive_seed(seed, 0x91054A))
    params, _ = train_sgd(params, spec, train.images, train.labels,
                          epochs, lr, batch, seed=_derive_seed(seed, 0xCE), dtype=dtype)
    return _evaluate(params, spec, test, dtype)


# --- metrics CSV ---------------------------------------------------------------

def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, float):
        return f"{x:.10g}"
    return str(x)


def write_metrics_csv(path, series: list[RoundMetrics]) -> None:
    """One row per client per round plus one GLOBAL row per round, in the
    fixed column order."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRICS_COLUMNS)
        for rm in series:
            for cid in sorted(set(rm.local_loss) | set(rm.mtt_final)):
                w.writerow([rm.round_index, rm.method, _fmt(rm.alpha), rm.seed,
                            cid, _fmt(rm.local_loss.get(cid)),
                            _fmt(rm.mtt_final.get(cid)), "", "", ""])
            w.writerow([rm.round_index, rm.method, _fmt(rm.alpha), rm.seed,
                        "GLOBAL", "", "", _fmt(rm.global_acc),
                        _fmt(rm.surrogate_acc), _fmt(rm.wall_s)])


def write_traces_csv(path, series: list[RoundMetrics]) -> None:
    """Full per-iteration matching-loss traces (distillation methods)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["round", "client_id", "iteration", "mtt_loss"])
        for rm in series:
            for cid in sorted(rm.traces):
                for i, v in enumerate(rm.traces[cid]):
                    w.writerow([rm.round_index, cid, i, _fmt(float(v))])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def canonical_metrics_bytes(path) -> bytes:
    """Metrics CSV content with the wall_s column masked.

    Wall-clock timing is inherently non-reproducible; every other cell must
    be byte-identical across reruns of the same manifest.
    """
    wall_idx = METRICS_COLUMNS.index("wall_s")
    out_lines = []
    with open(path, newline="") as f:
        for row in csv.reader(f):
            if len(row) == len(METRICS_COLUMNS):
                row = list(row)
                row[wall_idx] = "*"
            out_lines.append(",".join(row))
    return "\n".join(out_lines).encode()
