"""Server-side trajectory-matching distillation and client local training.

Per communication round, each client runs plain SGD from the broadcast
surrogate parameters. The server then optimizes that client's latent codes
so that a throwaway student, trained for a fixed number of differentiable
SGD steps on the decoded synthetic batch, lands close to the client's
uploaded parameters. The matching loss is the squared distance between the
student endpoint and the client endpoint, normalized by the squared
distance the client actually travelled.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import models as md
from .datasets import ClientShard, LabeledDataset
from .generator import Generator, LatentSet


class ClientDidNotMoveError(ValueError):
    """Matching loss is undefined when local training left the surrogate
    exactly at the broadcast parameters (zero denominator)."""


class DivergenceError(RuntimeError):
    """Local or global SGD produced a non-finite loss."""


class MetaGradientError(RuntimeError):
    """Non-finite meta-gradient during latent optimization."""

    def __init__(self, iteration: int, message: str):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass
class DistillConfig:
    """Knobs for local training, the student unroll, and latent updates."""
    local_epochs: int = 20       # T_l
    student_steps: int = 20      # T_s
    distill_iters: int = 100     # T_d (0 = no-op, returns codes unchanged)
    lr_local: float = 0.05
    lr_student: float = 0.05
    lr_latent: float = 1.0
    ipc: int = 10
    layer: int | None = None     # None -> generator mid-network default
    batch_local: int = 32
    latent_optimizer: str = "sgd"   # "sgd" (optionally with momentum) or "adam"
    latent_momentum: float = 0.0
    prox_mu: float = 0.0         # optional proximal pull toward broadcast params

    def __post_init__(self):
        if self.local_epochs < 1 or self.student_steps < 1:
            raise ValueError("epoch/step counts must be >= 1")
        if self.distill_iters < 0:
            raise ValueError("distill iteration count must be >= 0")
        for name in ("lr_local", "lr_student", "lr_latent"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.ipc < 1:
            raise ValueError("ipc must be >= 1")
        if self.latent_optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown latent optimizer {self.latent_optimizer!r}")
        if not 0.0 <= self.latent_momentum < 1.0:
            raise ValueError("latent momentum must be in [0, 1)")
        if self.prox_mu < 0:
            raise ValueError("prox_mu must be >= 0")


_PROGRAM_CACHE: dict = {}


def _training_program(spec: md.ModelSpec, batch_size: int, prox: bool):
    """Cached loss+gradient graph for one SGD step on a batch."""
    key = (spec, batch_size, prox)
    hit = _PROGRAM_CACHE.get(key)
    if hit is not None:
        return hit
    leaves = md.param_leaves(spec)
    x = ad.leaf("x", (batch_size, *spec.input_shape))
    y = ad.leaf("y", (batch_size, spec.classes))
    logits = md.build_forward(spec, leaves, x)
    loss = ad.softmax_cross_entropy(logits, y)
    total = loss
    if prox:
        refs = [ad.leaf(f"ref:{name}", shape) for name, shape in md.layer_shapes(spec)]
        mu = ad.leaf("mu", ())
        penalty = None
        for p, r in zip(leaves, refs):
            term = ad.norm_sq(ad.sub(p, r))
            penalty = term if penalty is None else ad.add(penalty, term)
        total = ad.add(loss, ad.mul(ad.mul(mu, ad.const(0.5)), penalty))
    else:
        refs, mu = None, None
    grads = ad.grad(total, leaves)
    prog = ad.Graph([loss, *grads])
    entry = (prog, leaves, x, y, refs, mu)
    _PROGRAM_CACHE[key] = entry
    return entry


def train_sgd(params: md.ParamVector, spec: md.ModelSpec, images: np.ndarray,
              labels: np.ndarray, epochs: int, lr: float, batch: int, seed: int,
              prox: tuple[float, md.ParamVector] | None = None,
              dtype=np.float64) -> tuple[md.ParamVector, float]:
    """Mini-batch SGD on softmax cross-entropy; returns (params, last-epoch
    mean loss). Deterministic given the seed; raises DivergenceError on a
    non-finite loss. ``prox=(mu, ref)`` adds (mu/2)||theta - ref||^2."""
    n = images.shape[0]
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    batch = min(batch, n)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0x59D]))
    onehot_all = md.onehot(labels, spec.classes)
    tensors = params.tensors()
    use_prox = prox is not None and prox[0] > 0
    epoch_loss = np.nan
    for epoch in range(epochs):
        perm = rng.permutation(n)
        losses = []
        pos = 0
        while pos < n:
            idx = perm[pos:pos + batch]
            pos += batch
            prog, leaves, x, y, refs, mu = _training_program(spec, idx.size, use_prox)
            bind = dict(zip(leaves, tensors))
            bind[x] = images[idx]
            bind[y] = onehot_all[idx]
            if use_prox:
                bind.update(zip(refs, prox[1].tensors()))
                bind[mu] = np.asarray(prox[0])
            try:
                out = prog.eval(bind, dtype=dtype)
            except ad.EvalError as e:
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, sample offset {pos}: {e}") from e
            losses.append(float(out[0]))
            tensors = [t - lr * g for t, g in zip(tensors, out[1:])]
        epoch_loss = float(np.mean(losses))
    if not np.isfinite(epoch_loss):
        raise DivergenceError(f"non-finite epoch loss {epoch_loss}")
    return md.flatten_tensors(tensors, params.layout), epoch_loss


def client_update(theta_g: md.ParamVector, spec: md.ModelSpec, ds: LabeledDataset,
                  shard: ClientShard, cfg: DistillConfig, seed: int,
                  dtype=np.float64) -> tuple[md.ParamVector, float]:
    """Local training: T_l epochs of mini-batch SGD from the broadcast
    parameters on the client's shard. Returns (theta_m, last-epoch loss)."""
    if len(shard) == 0:
        raise ValueError(f"client {shard.client_id} has an empty shard")
    images = ds.images[shard.indices]
    labels = ds.labels[shard.indices]
    prox = (cfg.prox_mu, theta_g) if cfg.prox_mu > 0 else None
    return train_sgd(theta_g, spec, images, labels, cfg.local_epochs,
                     cfg.lr_local, cfg.batch_local, seed, prox=prox, dtype=dtype)


def mtt_loss(theta_hat: md.ParamVector, theta_m: md.ParamVector,
             theta_g: md.ParamVector) -> float:
    """Normalized squared parameter distance
    ||theta_hat - theta_m||^2 / ||theta_g - theta_m||^2."""
    if not len(theta_hat) == len(theta_m) == len(theta_g):
        raise ValueError("parameter vectors differ in length")
    den = float(np.sum((theta_g.values - theta_m.values) ** 2))
    if den == 0.0:
        raise ClientDidNotMoveError(
            "local training did not move the surrogate (zero denominator)")
    num = float(np.sum((theta_hat.values - theta_m.values) ** 2))
    return num / den


def build_student_unroll(gen: Generator, layer: int, codes: ad.Tensor,
                         labels: np.ndarray, spec: md.ModelSpec,
                         theta_g: md.ParamVector, theta_m: md.ParamVector,
                         student_steps: int, lr_student: float) -> ad.Tensor:
    """Matching-loss node: decode codes, train a student from theta_g for
    ``student_steps`` differentiable full-batch SGD steps on the decoded
    set, and compare the endpoint against theta_m (normalized).

    theta_g and theta_m enter as constants; only the codes leaf carries
    gradient. The denominator is constant, so it is folded in as a scale.
    """
    den = float(np.sum((theta_g.values - theta_m.values) ** 2))
    if den == 0.0:
        raise ClientDidNotMoveError(
            "local training did not move the surrogate (zero denominator)")
    synth = gen.build_synthesis(codes, layer)
    targets = ad.const(md.onehot(labels, spec.classes))
    student = [ad.const(t) for t in theta_g.tensors()]
    for _ in range(student_steps):
        logits = md.build_forward(spec, student, synth)
        step_loss = ad.softmax_cross_entropy(logits, targets)
        student = ad.sgd_step(student, step_loss, lr_student)
    num = None
    for p, m in zip(student, theta_m.tensors()):
        term = ad.norm_sq(ad.sub(p, ad.const(m)))
        num = term if num is None else ad.add(num, term)
    return ad.mul(num, ad.const(1.0 / den))


def distill_client(theta_g: md.ParamVector, theta_m: md.ParamVector,
                   gen: Generator, z0: LatentSet, spec: md.ModelSpec,
                   cfg: DistillConfig,
                   dtype=np.float64) -> tuple[LatentSet, np.ndarray]:
    """Latent optimization loop: T_d gradient steps on the matching loss.

    Returns the optimized latent set and the loss trace (value before each
    update; length T_d). Never mutates theta_g, theta_m, the generator, or
    z0.
    """
    if cfg.distill_iters == 0:
        return dataclasses.replace(z0, codes=z0.codes.copy()), np.zeros(0)
    codes = ad.leaf("codes", z0.codes.shape)
    loss = build_student_unroll(gen, z0.layer, codes, z0.labels, spec,
                                theta_g, theta_m, cfg.student_steps,
                                cfg.lr_student)
    (gz,) = ad.grad(loss, [codes])
    prog = ad.Graph([loss, gz])
    cur = z0.codes.copy()
    velocity = np.zeros_like(cur)
    second = np.zeros_like(cur)
    trace = np.zeros(cfg.distill_iters)
    for t in range(cfg.distill_iters):
        try:
            lv, gv = prog.eval({codes: cur}, dtype=dtype)
        except ad.EvalError as e:
            raise MetaGradientError(t, str(e)) from e
        trace[t] = float(lv)
        gv = np.asarray(gv, dtype=np.float64)
        if cfg.latent_optimizer == "adam":
            velocity = 0.9 * velocity + 0.1 * gv
            second = 0.999 * second + 0.001 * gv * gv
            mh = velocity / (1 - 0.9 ** (t + 1))
            vh = second / (1 - 0.999 ** (t + 1))
            cur = cur - cfg.lr_latent * mh / (np.sqrt(vh) + 1e-8)
        elif cfg.latent_momentum > 0:
            velocity = cfg.latent_momentum * velocity + gv
            cur = cur - cfg.lr_latent * velocity
        else:
            cur = cur - cfg.lr_latent * gv
    return dataclasses.replace(z0, codes=cur), trace
