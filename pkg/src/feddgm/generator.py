"""Class-conditional generative decoder with layered latent spaces.

Stands in for a large pretrained synthesis network: a small mapping MLP
turns (noise, class embedding) into a style vector, and a stack of K
synthesis blocks decodes it into an image. Each block boundary defines a
latent space; distillation can optimize codes at any of them. Earlier
layers lean harder on the pretrained prior, later layers are more
expressive.

The decoder is pretrained as the decoder half of a class-conditional
autoencoder on a public proxy split, then the mapping net is regressed
onto whitened encoder styles so that fresh noise draws land on plausible,
class-consistent styles. After pretraining the generator is frozen.
"""

from __future__ import annotations

import hashlib
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .datasets import LabeledDataset
from .models import onehot

_MAGIC = b"FDGM"
_GEN_KIND = 1
_CKPT_VERSION = 1
_TENSOR_MAGIC = b"FDTN"


@dataclass(frozen=True)
class GeneratorConfig:
    style_dim: int = 16
    width: int = 16          # synthesis channels / hidden units
    blocks: int = 4          # K synthesis blocks, >= 2
    embed_dim: int = 8
    map_hidden: int = 32
    enc_hidden: int = 64
    epochs: int = 300        # autoencoder epochs (minibatch Adam)
    batch: int = 64
    map_epochs: int = 500
    lr: float = 3e-3
    map_lr: float = 0.01
    target_mse: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.blocks < 2:
            raise ValueError("need at least 2 synthesis blocks")


def _synthesis_plan(image_shape, cfg: GeneratorConfig):
    """Block descriptors from style vector to image.

    Spatial targets get one dense block to a small grid, upsampling conv
    blocks until the target resolution, then a conv output block. 1x1
    targets (vector datasets) use dense blocks throughout.
    """
    h, w, c = image_shape
    k, ch = cfg.blocks, cfg.width
    plan = []
    if h == 1 and w == 1:
        dims = [cfg.style_dim] + [ch] * (k - 1)
        for i in range(k - 1):
            plan.append({"kind": "dense", "in": dims[i], "out": dims[i + 1],
                         "reshape": None, "act": "relu"})
        plan.append({"kind": "dense", "in": dims[-1], "out": c,
                     "reshape": (1, 1, c), "act": "sigmoid"})
        return plan
    ups = 0
    while (ups < k - 2 and h % (2 ** (ups + 1)) == 0 and w % (2 ** (ups + 1)) == 0):
        ups += 1
    h0, w0 = h // (2 ** ups), w // (2 ** ups)
    plan.append({"kind": "dense", "in": cfg.style_dim, "out": h0 * w0 * ch,
                 "reshape": (h0, w0, ch), "act": "relu"})
    for i in range(k - 2):
        plan.append({"kind": "conv", "cin": ch, "cout": ch,
                     "upsample": i < ups, "act": "relu"})
    plan.append({"kind": "conv", "cin": ch, "cout": c,
                 "upsample": False, "act": "sigmoid"})
    return plan


def _plan_latent_shapes(plan, style_dim):
    """Shape of the code consumed when decoding from each layer index."""
    shapes = [(style_dim,)]
    cur = None
    for block in plan[:-1]:
        if block["kind"] == "dense":
            cur = block["reshape"] or (block["out"],)
        else:
            mul = 2 if block["upsample"] else 1
            cur = (cur[0] * mul, cur[1] * mul, block["cout"])
        shapes.append(tuple(cur))
    return tuple(shapes)


def _synthesis_param_shapes(plan):
    shapes = []
    for i, block in enumerate(plan):
        if block["kind"] == "dense":
            shapes.append((f"syn{i}_w", (block["in"], block["out"])))
            shapes.append((f"syn{i}_b", (block["out"],)))
        else:
            shapes.append((f"syn{i}_w", (3, 3, block["cin"], block["cout"])))
            shapes.append((f"syn{i}_b", (block["cout"],)))
    return shapes


def _mapping_param_shapes(cfg: GeneratorConfig, classes: int):
    # MLP over noise + class embedding, then a class-conditional affine
    # output (per-class style mean/spread tables) so fresh noise lands on
    # in-distribution styles for the requested class.
    return [
        ("embed", (classes, cfg.embed_dim)),
        ("map_w_noise", (cfg.style_dim, cfg.map_hidden)),
        ("map_w_embed", (cfg.embed_dim, cfg.map_hidden)),
        ("map_b0", (cfg.map_hidden,)),
        ("map_w1", (cfg.map_hidden, cfg.style_dim)),
        ("map_b1", (cfg.style_dim,)),
        ("style_mu", (classes, cfg.style_dim)),
        ("style_sd", (classes, cfg.style_dim)),
    ]


@dataclass
class Generator:
    """Frozen mapping network + synthesis decoder."""
    image_shape: tuple[int, int, int]
    classes: int
    cfg: GeneratorConfig
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.plan = _synthesis_plan(self.image_shape, self.cfg)
        self.latent_shapes = _plan_latent_shapes(self.plan, self.cfg.style_dim)

    @property
    def n_layers(self) -> int:
        return len(self.plan)

    @property
    def default_layer(self) -> int:
        """Mid-network space; observed to generalize best across architectures."""
        return self.n_layers - 2

    def param_bytes(self) -> bytes:
        return b"".join(self.params[k].tobytes() for k in sorted(self.params))

    def build_synthesis(self, codes: ad.Tensor, from_layer: int) -> ad.Tensor:
        """Graph from layer-``from_layer`` codes to images; params are constants."""
        if not 0 <= from_layer < self.n_layers:
            raise ValueError(f"layer must be in [0, {self.n_layers}), got {from_layer}")
        want = (codes.shape[0],) + self.latent_shapes[from_layer]
        if codes.shape != want:
            raise ad.GraphError(f"codes shaped {codes.shape}, layer needs {want}")
        x = codes
        n = codes.shape[0]
        for i in range(from_layer, self.n_layers):
            block = self.plan[i]
            w = ad.const(self.params[f"syn{i}_w"])
            b = ad.const(self.params[f"syn{i}_b"])
            if block["kind"] == "dense":
                if len(x.shape) > 2:
                    x = ad.reshape(x, (n, int(np.prod(x.shape[1:]))))
                x = ad.add(ad.matmul(x, w), b)
                if block["reshape"]:
                    x = ad.reshape(x, (n, *block["reshape"]))
            else:
                if block["upsample"]:
                    x = ad.upsample2(x)
                x = ad.conv2d(x, w, b)
            x = ad.sigmoid(x) if block["act"] == "sigmoid" else ad.relu(x)
        return x

    def map_styles(self, eps: np.ndarray, labels: np.ndarray) -> np.ndarray:
        """Numeric mapping network: (noise, class) -> style vectors."""
        p = self.params
        labels = np.asarray(labels, dtype=np.int64)
        emb = onehot(labels, self.classes) @ p["embed"]
        h = np.maximum(eps @ p["map_w_noise"] + emb @ p["map_w_embed"] + p["map_b0"], 0.0)
        out = h @ p["map_w1"] + p["map_b1"]
        return p["style_mu"][labels] + p["style_sd"][labels] * out

    def forward_to_layer(self, styles: np.ndarray, layer: int) -> np.ndarray:
        """Numeric styles -> layer-``layer`` codes (identity at layer 0)."""
        if layer == 0:
            return styles
        codes = ad.leaf("styles", styles.shape)
        upto = _PartialSynthesis(self, layer)
        node = upto.build(codes)
        return ad.evaluate(node, {codes: styles})


class _PartialSynthesis:
    """Blocks [0, stop) of the synthesis stack, for latent initialization."""

    def __init__(self, gen: Generator, stop: int):
        self.gen = gen
        self.stop = stop

    def build(self, x: ad.Tensor) -> ad.Tensor:
        n = x.shape[0]
        for i in range(self.stop):
            block = self.gen.plan[i]
            w = ad.const(self.gen.params[f"syn{i}_w"])
            b = ad.const(self.gen.params[f"syn{i}_b"])
            if block["kind"] == "dense":
                if len(x.shape) > 2:
                    x = ad.reshape(x, (n, int(np.prod(x.shape[1:]))))
                x = ad.add(ad.matmul(x, w), b)
                if block["reshape"]:
                    x = ad.reshape(x, (n, *block["reshape"]))
            else:
                if block["upsample"]:
                    x = ad.upsample2(x)
                x = ad.conv2d(x, w, b)
            x = ad.sigmoid(x) if block["act"] == "sigmoid" else ad.relu(x)
        return x


@dataclass
class LatentSet:
    """Per-client optimizable codes with fixed, balanced class labels."""
    client_id: int
    layer: int
    codes: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.codes.shape[0] != self.labels.shape[0]:
            raise ValueError("codes/labels count mismatch")
        counts = np.bincount(self.labels)
        if counts.size and not np.all(counts[counts > 0] == counts.max()):
            raise ValueError("labels must be balanced (same count per class)")

    @property
    def ipc(self) -> int:
        return int(np.bincount(self.labels).max())


# --- pretraining -------------------------------------------------------------

def _init_params(shapes, rng):
    out = {}
    for name, shape in shapes:
        fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else int(shape[0])
        bound = 1.0 / np.sqrt(max(fan_in, 1))
        out[name] = rng.uniform(-bound, bound, size=shape)
    return out


class _Adam:
    def __init__(self, names, lr, clip: float = 5.0):
        self.lr = lr
        self.clip = clip
        self.t = 0
        self.m = {n: None for n in names}
        self.v = {n: None for n in names}

    def step(self, params, grads):
        if self.clip:
            gnorm = np.sqrt(sum(float((np.asarray(g, dtype=np.float64) ** 2).sum())
                                for g in grads.values()))
            if gnorm > self.clip:
                grads = {k: v * (self.clip / gnorm) for k, v in grads.items()}
        self.t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        for name, g in grads.items():
            if self.m[name] is None:
                self.m[name] = np.zeros_like(g, dtype=np.float64)
                self.v[name] = np.zeros_like(g, dtype=np.float64)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mh = self.m[name] / (1 - b1 ** self.t)
            vh = self.v[name] / (1 - b2 ** self.t)
            params[name] = params[name] - self.lr * mh / (np.sqrt(vh) + eps)


def _proxy_hash(proxy: LabeledDataset) -> str:
    h = hashlib.sha256()
    h.update(proxy.images.tobytes())
    h.update(proxy.labels.tobytes())
    return h.hexdigest()[:16]


def pretrain_decoder(proxy: LabeledDataset, cfg: GeneratorConfig) -> Generator:
    """Train the decoder on the proxy split, then fit the mapping network.

    Phase 1 trains encoder+decoder with full-batch Adam on reconstruction
    MSE until ``cfg.target_mse`` or ``cfg.epochs``. Phase 2 whitens encoder
    styles per class and regresses the mapping net onto them, so that
    standard-normal noise plus a class label lands on in-distribution
    styles. Deterministic given ``cfg.seed``; never converging is a warning.
    """
    if len(proxy) == 0:
        raise ValueError("proxy dataset is empty")
    present = np.unique(proxy.labels)
    if len(present) != proxy.classes:
        missing = sorted(set(range(proxy.classes)) - set(present.tolist()))
        raise ValueError(f"proxy is missing classes {missing}")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x6E47]))
    image_shape = proxy.image_shape
    plan = _synthesis_plan(image_shape, cfg)
    d_img = int(np.prod(image_shape))

    enc_shapes = [("enc_w0", (d_img, cfg.enc_hidden)), ("enc_b0", (cfg.enc_hidden,)),
                  ("enc_w1", (cfg.enc_hidden, cfg.style_dim)), ("enc_b1", (cfg.style_dim,))]
    syn_shapes = _synthesis_param_shapes(plan)
    params = _init_params(enc_shapes + syn_shapes, rng)
    # start the output block at the mean pixel level; skips the initial
    # saturation-recovery phase
    mean_px = float(np.clip(proxy.images.mean(), 0.01, 0.99))
    params[f"syn{cfg.blocks - 1}_b"][:] = np.log(mean_px / (1.0 - mean_px))

    n = len(proxy)
    batch = min(cfg.batch, n)
    gen_stub = Generator(image_shape, proxy.classes, cfg, params)

    def _recon_program(b):
        leaves = {name: ad.leaf(name, shape) for name, shape in enc_shapes + syn_shapes}
        xb = ad.leaf("xb", (b, *image_shape))
        xf = ad.reshape(xb, (b, d_img))
        h = ad.relu(ad.add(ad.matmul(xf, leaves["enc_w0"]), leaves["enc_b0"]))
        styles_node = ad.add(ad.matmul(h, leaves["enc_w1"]), leaves["enc_b1"])
        recon = _build_with_leaves(gen_stub, styles_node, leaves, 0)
        loss = ad.mul(ad.norm_sq(ad.sub(recon, xb)), ad.const(1.0 / (b * d_img)))
        return leaves, xb, styles_node, loss

    leaves, xb, _, loss = _recon_program(batch)
    names = list(leaves)
    gnodes = ad.grad(loss, [leaves[nm] for nm in names])
    prog = ad.Graph([loss, *gnodes])

    opt = _Adam(names, cfg.lr)
    shuffler = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5F1E]))
    epochs_run = 0
    stopped_early = False
    for epoch in range(cfg.epochs):
        perm = shuffler.permutation(n)
        losses = []
        for s in range(max(n // batch, 1)):
            idx = perm[s * batch:(s + 1) * batch]
            if idx.size < batch:
                break
            bind = {leaves[nm]: params[nm] for nm in names}
            bind[xb] = proxy.images[idx]
            out = prog.eval(bind, dtype=np.float32)
            losses.append(float(out[0]))
            opt.step(params, dict(zip(names, out[1:])))
        epochs_run = epoch + 1
        if float(np.mean(losses)) <= cfg.target_mse:
            stopped_early = True
            break

    # final full-proxy reconstruction error and styles for the mapping phase
    fleaves, fxb, fstyles, floss = _recon_program(n)
    fbind = {fleaves[nm]: params[nm] for nm in names}
    fbind[fxb] = proxy.images
    floss_v, styles = ad.Graph([floss, fstyles]).eval(fbind, dtype=np.float32)
    mse = float(floss_v)
    styles = np.asarray(styles, dtype=np.float64)
    if not stopped_early and mse > cfg.target_mse:
        warnings.warn(
            f"decoder pretraining stopped at MSE {mse:.3g} after "
            f"{epochs_run} epochs (target {cfg.target_mse:g})")

    # Phase 2: whiten styles per class and regress the mapping net onto
    # them. Each sample's noise is its own whitened residual, so the net
    # learns a smooth noise -> style map covering real class variation.
    mu = np.zeros((proxy.classes, cfg.style_dim))
    sd = np.ones((proxy.classes, cfg.style_dim))
    for c in range(proxy.classes):
        sc = styles[proxy.labels == c]
        mu[c] = sc.mean(axis=0)
        sd[c] = np.maximum(sc.std(axis=0), 1e-3)
    eps_data = (styles - mu[proxy.labels]) / sd[proxy.labels]

    map_shapes = _mapping_param_shapes(cfg, proxy.classes)
    map_params = _init_params(map_shapes, rng)
    map_params["style_mu"] = mu.copy()
    map_params["style_sd"] = sd.copy()
    mleaves = {name: ad.leaf(name, shape) for name, shape in map_shapes}
    eps_c = ad.const(eps_data)
    oh_c = ad.const(onehot(proxy.labels, proxy.classes))
    target_c = ad.const(styles)
    emb = ad.matmul(oh_c, mleaves["embed"])
    mh = ad.relu(ad.add(ad.add(ad.matmul(eps_c, mleaves["map_w_noise"]),
                               ad.matmul(emb, mleaves["map_w_embed"])),
                        mleaves["map_b0"]))
    mlp_out = ad.add(ad.matmul(mh, mleaves["map_w1"]), mleaves["map_b1"])
    pred = ad.add(ad.matmul(oh_c, mleaves["style_mu"]),
                  ad.mul(ad.matmul(oh_c, mleaves["style_sd"]), mlp_out))
    map_loss = ad.mul(ad.norm_sq(ad.sub(pred, target_c)),
                      ad.const(1.0 / styles.size))
    mnames = list(mleaves)
    mgrads = ad.grad(map_loss, [mleaves[nm] for nm in mnames])
    mprog = ad.Graph([map_loss, *mgrads])
    mopt = _Adam(mnames, cfg.map_lr)
    map_mse = np.inf
    for _ in range(cfg.map_epochs):
        out = mprog.eval({mleaves[nm]: map_params[nm] for nm in mnames})
        map_mse = float(out[0])
        mopt.step(map_params, dict(zip(mnames, out[1:])))

    final = {name: params[name] for name, _ in syn_shapes}
    final.update(map_params)
    meta = {"proxy_hash": _proxy_hash(proxy), "epochs": epochs_run,
            "final_mse": mse, "map_mse": map_mse, "seed": cfg.seed}
    return Generator(image_shape, proxy.classes, cfg, final, meta)


def _build_with_leaves(gen: Generator, x: ad.Tensor, leaves: dict, from_layer: int):
    """Synthesis stack with parameters as graph leaves (pretraining only)."""
    n = x.shape[0]
    for i in range(from_layer, gen.n_layers):
        block = gen.plan[i]
        w, b = leaves[f"syn{i}_w"], leaves[f"syn{i}_b"]
        if block["kind"] == "dense":
            if len(x.shape) > 2:
                x = ad.reshape(x, (n, int(np.prod(x.shape[1:]))))
            x = ad.add(ad.matmul(x, w), b)
            if block["reshape"]:
                x = ad.reshape(x, (n, *block["reshape"]))
        else:
            if block["upsample"]:
                x = ad.upsample2(x)
            x = ad.conv2d(x, w, b)
        x = ad.sigmoid(x) if block["act"] == "sigmoid" else ad.relu(x)
    return x


# --- latent initialization and decoding --------------------------------------

def init_latents(gen: Generator, layer: int, ipc: int, classes: int,
                 seed: int, client_id: int = -1) -> LatentSet:
    """Fresh codes: standard-normal noise through the mapping network and
    the first ``layer`` synthesis blocks, ``ipc`` codes per class."""
    if not 0 <= layer < gen.n_layers:
        raise ValueError(f"layer must be in [0, {gen.n_layers}), got {layer}")
    if ipc < 1:
        raise ValueError("ipc must be >= 1")
    if classes != gen.classes:
        raise ValueError(f"generator is conditioned on {gen.classes} classes")
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0x1A7E]))
    labels = np.repeat(np.arange(classes), ipc)
    eps = rng.standard_normal((ipc * classes, gen.cfg.style_dim))
    styles = gen.map_styles(eps, labels)
    codes = gen.forward_to_layer(styles, layer)
    return LatentSet(client_id, layer, codes, labels)


def decode(gen: Generator, z: LatentSet, dtype=np.float64) -> np.ndarray:
    """Numeric decode of a latent set into images (no sampling; deterministic)."""
    codes = ad.leaf("codes", z.codes.shape)
    node = gen.build_synthesis(codes, z.layer)
    return ad.evaluate(node, {codes: z.codes}, dtype=dtype)


# --- portable tensor dumps and checkpoints ------------------------------------

def write_tensor(path, arr: np.ndarray) -> None:
    """FDTN file: magic, u8 dtype code (4|8 bytes), u8 rank, u32 LE extents,
    little-endian float payload."""
    arr = np.asarray(arr)
    code = 4 if arr.dtype == np.float32 else 8
    with open(path, "wb") as f:
        f.write(_TENSOR_MAGIC)
        f.write(struct.pack("<BB", code, arr.ndim))
        for s in arr.shape:
            f.write(struct.pack("<I", s))
        f.write(arr.astype(f"<f{code}").tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.read(4) != _TENSOR_MAGIC:
            raise ValueError("bad tensor magic")
        code, rank = struct.unpack("<BB", f.read(2))
        shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(rank))
        return np.frombuffer(f.read(), dtype=f"<f{code}").reshape(shape).copy()


def dump_synthetic(dirpath, images: np.ndarray, labels: np.ndarray) -> None:
    """Per-round dump: images.fdtn plus a labels text file."""
    from pathlib import Path
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(d / "images.fdtn", images)
    with open(d / "labels.txt", "w") as f:
        for y in np.asarray(labels).ravel():
            f.write(f"{int(y)}\n")


def save_generator(path, gen: Generator) -> None:
    cfg = gen.cfg
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IB", _CKPT_VERSION, _GEN_KIND))
        f.write(struct.pack("<HHBHH", cfg.style_dim, cfg.width, cfg.blocks,
                            cfg.embed_dim, gen.classes))
        f.write(struct.pack("<HHH", cfg.map_hidden, cfg.enc_hidden, 0))
        for s in gen.image_shape:
            f.write(struct.pack("<I", s))
        f.write(struct.pack("<B", len(gen.latent_shapes)))
        for shape in gen.latent_shapes:
            f.write(struct.pack("<B", len(shape)))
            for s in shape:
                f.write(struct.pack("<I", s))
        f.write(struct.pack("<H", len(gen.params)))
        for name in sorted(gen.params):
            arr = gen.params[name]
            nb = name.encode()
            f.write(struct.pack("<B", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for s in arr.shape:
                f.write(struct.pack("<I", s))
            f.write(arr.astype("<f8").tobytes())


def load_generator(path) -> Generator:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError("bad checkpoint magic")
        version, kind = struct.unpack("<IB", f.read(5))
        if version != _CKPT_VERSION or kind != _GEN_KIND:
            raise ValueError("not a generator checkpoint")
        style_dim, width, blocks, embed_dim, classes = struct.unpack("<HHBHH", f.read(9))
        map_hidden, enc_hidden, _ = struct.unpack("<HHH", f.read(6))
        image_shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(3))
        (n_shapes,) = struct.unpack("<B", f.read(1))
        latent_shapes = []
        for _ in range(n_shapes):
            (rank,) = struct.unpack("<B", f.read(1))
            latent_shapes.append(tuple(struct.unpack("<I", f.read(4))[0]
                                       for _ in range(rank)))
        (n_params,) = struct.unpack("<H", f.read(2))
        params = {}
        for _ in range(n_params):
            (ln,) = struct.unpack("<B", f.read(1))
            name = f.read(ln).decode()
            (rank,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(rank))
            count = int(np.prod(shape)) if shape else 1
            params[name] = np.frombuffer(f.read(count * 8), dtype="<f8").reshape(shape).copy()
    cfg = GeneratorConfig(style_dim=style_dim, width=width, blocks=blocks,
                          embed_dim=embed_dim, map_hidden=map_hidden,
                          enc_hidden=enc_hidden)
    gen = Generator(image_shape, classes, cfg, params)
    if gen.latent_shapes != tuple(latent_shapes):
        raise ValueError("latent shape table does not match the reconstructed plan")
    return gen
