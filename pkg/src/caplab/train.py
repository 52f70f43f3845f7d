"""Optimizer, learning-rate schedule, training loop, checkpoints.

The optimizer is an adaptive-moment update with decoupled weight decay
(norm scales, biases, and the contrastive temperature are excluded from
decay) standing in for the factored-second-moment variant used at scale;
factoring only saves memory, which is irrelevant on a desk. Gradients are
clipped to global norm `grad_clip` for toy-scale stability.

All randomness derives from one seed: batch indices from (seed, 7, step),
mode draws from (seed, 11, step, i), reversal draws from (seed, 13, step,
i), initialization from (seed, 3, name). A checkpoint therefore resumes
bitwise from (seed, step) alone plus the tensor state.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from . import model as M
from . import objective as O
from . import tok
from .errors import ConfigError, FormatError, VersionError
from .tensor import Tensor

STREAM_DATA = 7

FREEZE_MODES = ("none", "encoder", "decoder_except_xattn",
                "encoder_and_decoder_except_xattn")

ADAM_B1 = 0.9
ADAM_B2 = 0.999
ADAM_EPS = 1e-8

CKPT_MAGIC = b"CAPC"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    steps: int
    batch: int = 64
    base_lr: float = 1e-3
    weight_decay: float = 1e-4
    warmup_steps: int | None = None  # default: 2% of steps
    seed: int = 0
    freeze_mode: str = "none"
    reinit_xattn: bool = False
    grad_clip: float = 1.0
    batch_level_mixing: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if self.warmup_steps is None:
            self.warmup_steps = max(1, self.steps // 50)
        if not 0 < self.warmup_steps < self.steps:
            raise ConfigError("need 0 < warmup_steps < steps")
        if self.freeze_mode not in FREEZE_MODES:
            raise ConfigError(f"freeze_mode must be one of {FREEZE_MODES}")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to base_lr, then cosine decay to zero at `steps`."""
    if step <= cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / (cfg.steps - cfg.warmup_steps)
    return cfg.base_lr * 0.5 * (1.0 + float(np.cos(np.pi * frac)))


# -- optimizer -----------------------------------------------------------------


@dataclass
class OptState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def init_opt_state(params: dict[str, Tensor]) -> OptState:
    return OptState(m={k: np.zeros_like(p.data) for k, p in params.items()},
                    v={k: np.zeros_like(p.data) for k, p in params.items()})


def _decay_applies(name: str) -> bool:
    return not (name.endswith("/scale") or name.endswith("/b")
                or name == "temp/log")


def optimizer_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
                   state: OptState, lr: float, wd: float,
                   frozen: frozenset[str] = frozenset()) -> None:
    """First/second-moment update with bias correction and decoupled decay.

    Frozen names keep their parameters and moments untouched; their
    gradients are simply never consumed.
    """
    state.t += 1
    bc1 = 1.0 - ADAM_B1 ** state.t
    bc2 = 1.0 - ADAM_B2 ** state.t
    for name, p in params.items():
        if name in frozen:
            continue
        g = grads[name]
        if g.shape != p.data.shape:
            raise ConfigError(f"gradient shape mismatch for {name}")
        m, v = state.m[name], state.v[name]
        m *= ADAM_B1
        m += (1.0 - ADAM_B1) * g
        v *= ADAM_B2
        v += (1.0 - ADAM_B2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        if wd and _decay_applies(name):
            update += wd * p.data
        p.data = p.data - np.float32(lr) * update


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most `max_norm`."""
    sq = 0.0
    for g in grads.values():
        flat = g.ravel()
        sq += float(np.dot(flat, flat))
    norm = float(np.sqrt(sq))
    if max_norm > 0 and norm > max_norm:
        factor = np.float32(max_norm / norm)
        for name in grads:
            grads[name] = grads[name] * factor
    return norm


def frozen_names(cfg: M.ModelConfig, params: dict[str, Tensor],
                 freeze_mode: str) -> frozenset[str]:
    frozen = set()
    if freeze_mode in ("encoder", "encoder_and_decoder_except_xattn"):
        frozen |= {n for n in params if n.startswith("enc/")}
    if freeze_mode in ("decoder_except_xattn",
                       "encoder_and_decoder_except_xattn"):
        frozen |= {n for n in params
                   if n.startswith("dec/") and "/xattn/" not in n}
    return frozenset(frozen)


# -- training loop ----------------------------------------------------------


@dataclass
class MetricsRow:
    step: int
    lr: float
    loss: float
    loss_causal: float
    loss_parallel: float


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    metrics: list[MetricsRow]
    opt_state: OptState
    model_cfg: M.ModelConfig
    seed: int
    step: int
    vocab: tok.Vocab


def _fmt(x: float) -> str:
    return "" if np.isnan(x) else repr(float(x))


def metrics_to_csv(rows: list[MetricsRow]) -> str:
    lines = ["step,lr,loss,loss_causal,loss_parallel"]
    for r in rows:
        lines.append(f"{r.step},{_fmt(r.lr)},{_fmt(r.loss)},"
                     f"{_fmt(r.loss_causal)},{_fmt(r.loss_parallel)}")
    return "\n".join(lines) + "\n"


def train(model_cfg: M.ModelConfig, train_cfg: TrainConfig, dataset,
          vocab: tok.Vocab | None = None,
          resume: "Checkpoint | None" = None,
          stop_at: int | None = None) -> TrainResult:
    """Run the training loop; deterministic given the config seeds.

    Freezing suppresses parameter updates (gradients are still computed);
    `reinit_xattn` redraws cross-attention weights before training, which
    with `decoder_except_xattn` freezing reproduces the frozen-decoder
    transfer recipe on our own pretrained decoders. `stop_at` interrupts
    after that step without altering the schedule, for checkpoint-resume
    runs that must match an uninterrupted run bitwise.
    """
    if not dataset:
        raise ConfigError("dataset is empty")
    if vocab is None:
        vocab = tok.build_vocab([ex.caption for ex in dataset])
    if model_cfg.vocab != vocab.size:
        raise ConfigError(f"config vocab {model_cfg.vocab} != "
                          f"tokenizer vocab {vocab.size}")
    if resume is not None:
        params = {k: Tensor(a.copy(), requires_grad=True)
                  for k, a in resume.params.items()}
        state = OptState(m={k: a.copy() for k, a in resume.opt_m.items()},
                         v={k: a.copy() for k, a in resume.opt_v.items()},
                         t=resume.opt_t)
        start = resume.step
    else:
        params = M.init_params(model_cfg, train_cfg.seed)
        state = init_opt_state(params)
        start = 0
    if train_cfg.reinit_xattn:
        M.reinit_cross_attention(model_cfg, params, train_cfg.seed)
        for name, p in params.items():
            if "/xattn/" in name:
                state.m[name] = np.zeros_like(p.data)
                state.v[name] = np.zeros_like(p.data)
    frozen = frozen_names(model_cfg, params, train_cfg.freeze_mode)

    metrics: list[MetricsRow] = []
    n = len(dataset)
    last = train_cfg.steps if stop_at is None else min(stop_at, train_cfg.steps)
    for step in range(start + 1, last + 1):
        idx = np.random.default_rng(
            [train_cfg.seed, STREAM_DATA, step]).integers(0, n, train_cfg.batch)
        batch = O.make_batch([dataset[i] for i in idx], vocab, model_cfg,
                             train_cfg.seed, step,
                             train_cfg.batch_level_mixing)
        if model_cfg.objective == "clip":
            loss_t = O.clip_loss(model_cfg, params, batch)
            lc = lp = float("nan")
        else:
            out = O.caption_loss(model_cfg, params, batch)
            loss_t, lc, lp = out.loss, out.causal_ce, out.parallel_ce
        loss = float(loss_t.data)
        if not np.isfinite(loss):
            raise FloatingPointError(f"loss diverged at step {step}: {loss}")
        for p in params.values():
            p.grad = None
        loss_t.backward()
        grads = {name: (p.grad if p.grad is not None
                        else np.zeros_like(p.data))
                 for name, p in params.items() if name not in frozen}
        clip_global_norm(grads, train_cfg.grad_clip)
        lr = lr_at(step, train_cfg)
        optimizer_step(params, grads, state, lr, train_cfg.weight_decay,
                       frozen)
        metrics.append(MetricsRow(step, lr, loss, lc, lp))
    return TrainResult(params=params, metrics=metrics, opt_state=state,
                       model_cfg=model_cfg, seed=train_cfg.seed,
                       step=last, vocab=vocab)


# -- checkpoints -----------------------------------------------------------------


@dataclass
class Checkpoint:
    model_cfg: M.ModelConfig
    params: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: dict[str, np.ndarray] = field(default_factory=dict)
    opt_t: int = 0
    step: int = 0
    seed: int = 0


def checkpoint_from_result(res: TrainResult) -> Checkpoint:
    return Checkpoint(
        model_cfg=res.model_cfg,
        params={k: p.data.copy() for k, p in res.params.items()},
        opt_m={k: a.copy() for k, a in res.opt_state.m.items()},
        opt_v={k: a.copy() for k, a in res.opt_state.v.items()},
        opt_t=res.opt_state.t, step=res.step, seed=res.seed)


def _write_tensor(f: BinaryIO, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    f.write(struct.pack("<I", len(nb)))
    f.write(nb)
    f.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<I", d))
    f.write(arr.astype("<f4", copy=False).tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError("checkpoint truncated")
    return buf


def _read_tensor(f: BinaryIO) -> tuple[str, np.ndarray]:
    (nlen,) = struct.unpack("<I", _read_exact(f, 4))
    name = _read_exact(f, nlen).decode("utf-8")
    (ndim,) = struct.unpack("<I", _read_exact(f, 4))
    shape = tuple(struct.unpack("<I", _read_exact(f, 4))[0]
                  for _ in range(ndim))
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    data = np.frombuffer(_read_exact(f, 4 * count), dtype="<f4")
    return name, data.reshape(shape).copy()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """CAPC container: config as key=value text, then a named f32 table."""
    cfg_lines = [f"{k}={v}" for k, v in M.config_to_dict(ckpt.model_cfg).items()]
    cfg_lines += [f"step={ckpt.step}", f"seed={ckpt.seed}",
                  f"opt_t={ckpt.opt_t}"]
    blob = "\n".join(cfg_lines).encode("utf-8")
    entries = ([("p/" + k, a) for k, a in sorted(ckpt.params.items())]
               + [("m/" + k, a) for k, a in sorted(ckpt.opt_m.items())]
               + [("v/" + k, a) for k, a in sorted(ckpt.opt_v.items())])
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            _write_tensor(f, name, arr)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != CKPT_MAGIC:
            raise FormatError(f"{path} is not a CAPC checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != CKPT_VERSION:
            raise VersionError(f"unsupported checkpoint version {version}")
        (blen,) = struct.unpack("<I", _read_exact(f, 4))
        kv = {}
        for line in _read_exact(f, blen).decode("utf-8").splitlines():
            key, _, value = line.partition("=")
            kv[key] = value
        step = int(kv.pop("step"))
        seed = int(kv.pop("seed"))
        opt_t = int(kv.pop("opt_t"))
        model_cfg = M.config_from_dict(kv)
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        params, opt_m, opt_v = {}, {}, {}
        for _ in range(count):
            name, arr = _read_tensor(f)
            kind, _, base = name.partition("/")
            {"p": params, "m": opt_m, "v": opt_v}[kind][base] = arr
        if f.read(1):
            raise FormatError("trailing bytes after checkpoint payload")
    return Checkpoint(model_cfg=model_cfg, params=params, opt_m=opt_m,
                      opt_v=opt_v, opt_t=opt_t, step=step, seed=seed)
