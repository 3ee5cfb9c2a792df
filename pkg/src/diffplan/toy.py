"""Deterministic toy diffusion transformer, cosine noise schedule and DDIM.

The model is untrained: weights come from a seeded normal(0, 0.02) draw, so a
given seed always yields bit-identical parameters. Everything is float64
numpy; there is no autograd.

Latents have shape (4, 8, 8). ``forward`` also accepts a leading batch axis.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidArgument, NumericFailure

COSINE_OFFSET = 0.008
ALPHA_FLOOR = 1e-5
LATENT_SHAPE = (4, 8, 8)
CHECKPOINT_FORMAT = "diffplan-checkpoint"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# noise schedule / sampler
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    alphas_cumprod: np.ndarray

    @property
    def T(self) -> int:
        return len(self.alphas_cumprod)

    def alpha_bar(self, t: int) -> float:
        """ᾱ at index ``t``; ``t == -1`` is the clean endpoint (ᾱ = 1)."""
        if t == -1:
            return 1.0
        if not 0 <= t < self.T:
            raise InvalidArgument(f"timestep {t} outside [0, {self.T})")
        return float(self.alphas_cumprod[t])


def cosine_schedule(T: int = 100, s: float = COSINE_OFFSET) -> NoiseSchedule:
    if T < 2:
        raise InvalidArgument(f"cosine schedule needs T >= 2, got {T}")
    t = np.arange(T, dtype=np.float64)
    f = np.cos(((t / T + s) / (1.0 + s)) * np.pi / 2.0) ** 2
    f0 = math.cos((s / (1.0 + s)) * math.pi / 2.0) ** 2
    abar = np.clip(f / f0, ALPHA_FLOOR, 1.0)
    abar.setflags(write=False)
    return NoiseSchedule(abar)


def add_noise(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    if not 0 <= t < sched.T:
        raise InvalidArgument(f"timestep {t} outside [0, {sched.T})")
    a = sched.alpha_bar(t)
    return math.sqrt(a) * x0 + math.sqrt(1.0 - a) * eps


def ddim_step(x_t, eps_hat, t: int, t_prev: int, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) DDIM update from ``t`` to ``t_prev``.

    ``t_prev = -1`` denoises fully (ᾱ = 1), returning the x0 estimate.
    """
    if t_prev >= t:
        raise InvalidArgument(f"t_prev ({t_prev}) must be < t ({t})")
    a_t = sched.alpha_bar(t)
    if a_t < ALPHA_FLOOR:
        raise NumericFailure(f"alpha_bar[{t}]={a_t} below floor {ALPHA_FLOOR}", t=t)
    a_prev = sched.alpha_bar(t_prev)
    x0_hat = (x_t - math.sqrt(1.0 - a_t) * eps_hat) / math.sqrt(a_t)
    return math.sqrt(a_prev) * x0_hat + math.sqrt(1.0 - a_prev) * eps_hat


def latent_pool(n: int, seed: int = 0, scale: float = 1.5) -> np.ndarray:
    """Stand-in for VAE latents: smooth low-frequency structure plus detail."""
    rng = np.random.default_rng(seed)
    coarse = rng.standard_normal((n, 4, 4, 4))
    coarse = np.repeat(np.repeat(coarse, 2, axis=2), 2, axis=3)
    fine = rng.standard_normal((n,) + LATENT_SHAPE)
    return scale * (0.9 * coarse + 0.3 * fine)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiTConfig:
    channels: int = 4
    size: int = 8
    patch: int = 2
    hidden: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    n_classes: int = 10
    T: int = 100
    init_std: float = 0.02
    pos_scale: float = 0.1

    @property
    def tokens(self) -> int:
        return (self.size // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch * self.patch


def layer_shapes(cfg: DiTConfig) -> dict[str, tuple[int, int]]:
    """Ordered ``layer_id -> (out_features, in_features)`` for every quantizable linear."""
    d = cfg.hidden
    shapes = {
        "patch_embed": (d, cfg.patch_dim),
        "time_mlp.0": (d, d),
        "time_mlp.1": (d, d),
    }
    for i in range(cfg.depth):
        shapes[f"blocks.{i}.qkv"] = (3 * d, d)
        shapes[f"blocks.{i}.attn_proj"] = (d, d)
        shapes[f"blocks.{i}.mlp_fc1"] = (cfg.mlp_ratio * d, d)
        shapes[f"blocks.{i}.mlp_fc2"] = (d, cfg.mlp_ratio * d)
    shapes["final_proj"] = (cfg.patch_dim, d)
    return shapes


def layer_rows_per_sample(cfg: DiTConfig, layer_id: str) -> int:
    """How many input rows one sample feeds this layer per forward."""
    return 1 if layer_id.startswith("time_mlp") else cfg.tokens


def timestep_embedding(t, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.atleast_1d(np.asarray(t, dtype=np.float64))[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


def _pos_embedding(n_tokens: int, dim: int, scale: float) -> np.ndarray:
    pos = np.arange(n_tokens, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(100.0) * np.arange(half) / half)
    args = pos[:, None] * freqs[None, :]
    return scale * np.concatenate([np.sin(args), np.cos(args)], axis=-1)


def layer_norm(x, gamma, beta, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def silu(x):
    return x / (1.0 + np.exp(-x))


def softmax(x, axis=-1):
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=axis, keepdims=True)


class TinyDiT:
    """Four-block DiT with 20 quantizable linears; layer norms stay float.

    Subclasses change how linears execute by overriding :meth:`linear`.
    """

    def __init__(self, config: DiTConfig | None = None, seed: int = 42):
        self.config = cfg = config or DiTConfig()
        self.seed = seed
        self.shapes = layer_shapes(cfg)
        rng = np.random.default_rng(seed)
        self.weights: dict[str, np.ndarray] = {}
        self.biases: dict[str, np.ndarray] = {}
        for lid, (out_f, in_f) in self.shapes.items():
            self.weights[lid] = rng.normal(0.0, cfg.init_std, size=(out_f, in_f))
            self.biases[lid] = np.zeros(out_f)
        self.class_embed = rng.normal(0.0, cfg.init_std, size=(cfg.n_classes, cfg.hidden))
        self.norms: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        for i in range(cfg.depth):
            self.norms[f"blocks.{i}.norm1"] = (np.ones(cfg.hidden), np.zeros(cfg.hidden))
            self.norms[f"blocks.{i}.norm2"] = (np.ones(cfg.hidden), np.zeros(cfg.hidden))
        self.norms["final_norm"] = (np.ones(cfg.hidden), np.zeros(cfg.hidden))
        self.pos_embed = _pos_embedding(cfg.tokens, cfg.hidden, cfg.pos_scale)
        self._hooks: dict[str, list] = {}

    # -- structure -----------------------------------------------------------

    @property
    def layer_ids(self) -> list[str]:
        return list(self.shapes)

    def aux_param_count(self) -> int:
        """Parameters outside the quantizable weight matrices (biases, norms, class table)."""
        n = sum(b.size for b in self.biases.values())
        n += sum(g.size + b.size for g, b in self.norms.values())
        return n + self.class_embed.size

    def total_params(self) -> int:
        return sum(w.size for w in self.weights.values()) + self.aux_param_count()

    # -- execution -----------------------------------------------------------

    def linear(self, layer_id: str, x: np.ndarray, t: int, ctx: dict | None) -> np.ndarray:
        return x @ self.weights[layer_id].T + self.biases[layer_id]

    def _run_linear(self, layer_id, x, t, ctx):
        for hook in self._hooks.get(layer_id, ()):
            if hook.what == "inputs":
                hook.record(x, t)
        y = self.linear(layer_id, x, t, ctx)
        if not np.all(np.isfinite(y)):
            raise NumericFailure(f"non-finite output in layer {layer_id} at t={t}", layer_id=layer_id, t=t)
        for hook in self._hooks.get(layer_id, ()):
            if hook.what == "outputs":
                hook.record(y, t)
        return y

    def patchify(self, x: np.ndarray) -> np.ndarray:
        cfg = self.config
        b = x.shape[0]
        g = cfg.size // cfg.patch
        x = x.reshape(b, cfg.channels, g, cfg.patch, g, cfg.patch)
        x = x.transpose(0, 2, 4, 1, 3, 5)
        return x.reshape(b, g * g, cfg.patch_dim)

    def unpatchify(self, tokens: np.ndarray) -> np.ndarray:
        cfg = self.config
        b = tokens.shape[0]
        g = cfg.size // cfg.patch
        x = tokens.reshape(b, g, g, cfg.channels, cfg.patch, cfg.patch)
        x = x.transpose(0, 3, 1, 4, 2, 5)
        return x.reshape(b, cfg.channels, cfg.size, cfg.size)

    def forward(self, x_t, t: int, labels, ctx: dict | None = None) -> np.ndarray:
        """Noise prediction for ``x_t`` at integer timestep ``t`` (shared across the batch).

        ``ctx`` is an optional per-call scratch dict that subclasses may write
        traces into; the teacher ignores it.
        """
        cfg = self.config
        t = int(t)
        if not 0 <= t < cfg.T:
            raise InvalidArgument(f"timestep {t} outside [0, {cfg.T})")
        x_t = np.asarray(x_t, dtype=np.float64)
        single = x_t.ndim == 3
        if single:
            x_t = x_t[None]
        if x_t.shape[1:] != (cfg.channels, cfg.size, cfg.size):
            raise InvalidArgument(f"latent shape {x_t.shape[1:]} != {(cfg.channels, cfg.size, cfg.size)}")
        b = x_t.shape[0]
        labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (b,))
        if labels.min() < 0 or labels.max() >= cfg.n_classes:
            raise InvalidArgument(f"labels must lie in [0, {cfg.n_classes})")

        n_tok, d = cfg.tokens, cfg.hidden
        temb = np.repeat(timestep_embedding(t, d), b, axis=0)
        c = self._run_linear("time_mlp.0", temb, t, ctx)
        c = self._run_linear("time_mlp.1", silu(c), t, ctx)
        c = c + self.class_embed[labels]

        tokens = self.patchify(x_t).reshape(b * n_tok, cfg.patch_dim)
        h = self._run_linear("patch_embed", tokens, t, ctx).reshape(b, n_tok, d)
        h = h + self.pos_embed[None] + c[:, None, :]

        heads, hd = cfg.heads, d // cfg.heads
        for i in range(cfg.depth):
            g1, b1 = self.norms[f"blocks.{i}.norm1"]
            a = layer_norm(h + c[:, None, :], g1, b1).reshape(b * n_tok, d)
            qkv = self._run_linear(f"blocks.{i}.qkv", a, t, ctx)
            qkv = qkv.reshape(b, n_tok, 3, heads, hd).transpose(2, 0, 3, 1, 4)
            q, k, v = qkv[0], qkv[1], qkv[2]
            att = softmax(q @ k.transpose(0, 1, 3, 2) / math.sqrt(hd))
            o = (att @ v).transpose(0, 2, 1, 3).reshape(b * n_tok, d)
            h = h + self._run_linear(f"blocks.{i}.attn_proj", o, t, ctx).reshape(b, n_tok, d)
            g2, b2 = self.norms[f"blocks.{i}.norm2"]
            m = layer_norm(h, g2, b2).reshape(b * n_tok, d)
            m = gelu(self._run_linear(f"blocks.{i}.mlp_fc1", m, t, ctx))
            h = h + self._run_linear(f"blocks.{i}.mlp_fc2", m, t, ctx).reshape(b, n_tok, d)

        gf, bf = self.norms["final_norm"]
        out = layer_norm(h, gf, bf).reshape(b * n_tok, d)
        out = self._run_linear("final_proj", out, t, ctx).reshape(b, n_tok, cfg.patch_dim)
        eps = self.unpatchify(out)
        return eps[0] if single else eps

    __call__ = forward

    # -- identity ------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"{k}.weight": v for k, v in self.weights.items()}
        state.update({f"{k}.bias": v for k, v in self.biases.items()})
        for k, (g, b) in self.norms.items():
            state[f"{k}.gamma"] = g
            state[f"{k}.beta"] = b
        state["class_embed"] = self.class_embed
        return state

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.state_dict().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype=np.float64).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# hooks
# ---------------------------------------------------------------------------

@dataclass
class CaptureHook:
    """Per-layer recorder: running Σx², group envelopes, per-t moments, row reservoir."""

    layer_id: str
    width: int
    what: str = "inputs"
    reservoir_cap: int = 2048
    group_size: int = 128
    seed: int = 0
    n_seen: int = 0
    sum_sq: np.ndarray = field(default=None, repr=False)
    group_min: np.ndarray = field(default=None, repr=False)
    group_max: np.ndarray = field(default=None, repr=False)
    per_t: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.what not in ("inputs", "outputs"):
            raise InvalidArgument(f"hook target must be 'inputs' or 'outputs', got {self.what!r}")
        self._rng = np.random.default_rng(self.seed)
        self._reservoir = np.empty((self.reservoir_cap, self.width))
        self.sum_sq = np.zeros(self.width)
        n_groups = math.ceil(self.width / self.group_size)
        self.group_min = np.full(n_groups, np.inf)
        self.group_max = np.full(n_groups, -np.inf)

    @property
    def reservoir(self) -> np.ndarray:
        return self._reservoir[: min(self.n_seen, self.reservoir_cap)]

    def record(self, x: np.ndarray, t: int) -> None:
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.width)
        m = x.shape[0]
        self.sum_sq += np.einsum("ij,ij->j", x, x)
        for k in range(len(self.group_min)):
            blk = x[:, k * self.group_size:(k + 1) * self.group_size]
            self.group_min[k] = min(self.group_min[k], blk.min())
            self.group_max[k] = max(self.group_max[k], blk.max())
        cnt, s, ss = self.per_t.get(t, (0, 0.0, 0.0))
        self.per_t[t] = (cnt + x.size, s + float(x.sum()), ss + float(np.sum(x * x)))

        # Algorithm R, one draw per row past the fill point
        n0, cap = self.n_seen, self.reservoir_cap
        fill = max(0, min(cap - n0, m))
        self._reservoir[n0:n0 + fill] = x[:fill]
        if fill < m:
            idx = np.arange(n0 + fill, n0 + m)
            js = self._rng.integers(0, idx + 1)
            for row, j in zip(range(fill, m), js):
                if j < cap:
                    self._reservoir[j] = x[row]
        self.n_seen += m

    def std_by_t(self) -> dict[int, float]:
        out = {}
        for t, (cnt, s, ss) in sorted(self.per_t.items()):
            mean = s / cnt
            out[t] = math.sqrt(max(ss / cnt - mean * mean, 0.0))
        return out


class HookSet(dict):
    """``layer_id -> CaptureHook`` for hooks installed on one model."""

    def __init__(self, model, hooks):
        super().__init__(hooks)
        self._model = model

    def remove(self) -> None:
        for lid, hook in self.items():
            lst = self._model._hooks.get(lid, [])
            if hook in lst:
                lst.remove(hook)
            if not lst:
                self._model._hooks.pop(lid, None)


def register_hooks(model: TinyDiT, layer_ids=None, caps: int | dict = 2048, seed: int = 0,
                   what: str = "inputs", group_size: int = 128) -> HookSet:
    layer_ids = list(model.layer_ids if layer_ids is None else layer_ids)
    unknown = [lid for lid in layer_ids if lid not in model.shapes]
    if unknown:
        raise InvalidArgument(f"unknown layer ids: {unknown}")
    hooks = {}
    for i, lid in enumerate(layer_ids):
        out_f, in_f = model.shapes[lid]
        cap = caps[lid] if isinstance(caps, dict) else caps
        hook = CaptureHook(lid, in_f if what == "inputs" else out_f, what=what,
                           reservoir_cap=cap, group_size=group_size, seed=seed + i)
        model._hooks.setdefault(lid, []).append(hook)
        hooks[lid] = hook
    return HookSet(model, hooks)


# ---------------------------------------------------------------------------
# checkpoint io
# ---------------------------------------------------------------------------

def save_checkpoint(model: TinyDiT, path) -> None:
    """JSON checkpoint: tensors as row-major flat lists plus shape, config and seed.

    Layout (version 1)::

        {"format": "diffplan-checkpoint", "version": 1, "seed": int,
         "config": {DiTConfig fields},
         "tensors": {name: {"shape": [...], "data": [float, ...]}}}

    Tensor names are ``<layer_id>.weight``/``.bias``, ``<norm>.gamma``/``.beta``
    and ``class_embed``. Floats are written with ``repr`` precision so a load
    reproduces the model bit for bit.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seed": model.seed,
        "config": asdict(model.config),
        "tensors": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                    for k, v in model.state_dict().items()},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_checkpoint(path) -> TinyDiT:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise InvalidArgument(f"{path}: not a version {CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} file")
    model = TinyDiT(DiTConfig(**doc["config"]), seed=doc["seed"])
    tensors = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
               for k, v in doc["tensors"].items()}
    for lid in model.layer_ids:
        model.weights[lid] = tensors[f"{lid}.weight"]
        model.biases[lid] = tensors[f"{lid}.bias"]
    for k in model.norms:
        model.norms[k] = (tensors[f"{k}.gamma"], tensors[f"{k}.beta"])
    model.class_embed = tensors["class_embed"]
    return model
