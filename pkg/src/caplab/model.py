"""Architectures: ViT image encoder, text decoder with cross-attention and
switchable causal masking, contrastive text tower, pooling heads.

All blocks are pre-norm with scale-only LayerNorm, GELU MLPs, and no bias
terms (decoder biases can be restored via a config flag to reproduce the
bias ablation axis). The decoder's input and output embeddings are
separate unless `share_dec_embeddings` is set.

Forward functions come in two flavors: `*_batch` operates on leading-batch
tensors and is what training uses; the singular forms take one example and
match the documented contracts.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

OBJECTIVES = ("cap", "cappa", "clip")
INIT_STD = 0.02

# derived-stream tags; every RNG in the package is keyed off one seed
STREAM_INIT = 3
STREAM_REINIT = 5


@dataclass
class ModelConfig:
    """Architecture plus objective description.

    `max_len` is the tokenized caption length L (BOS..EOS..PAD); the
    decoder consumes the L-1 shifted inputs. `parallel_fraction` defaults
    to 0.75 for the cappa objective and 0 otherwise.
    """

    vocab: int
    patch_size: int = 4
    image_res: int = 32
    width: int = 128
    enc_layers: int = 4
    dec_layers: int | None = None
    heads: int = 4
    mlp_dim: int = 512
    max_len: int = 16
    objective: str = "cap"
    parallel_fraction: float | None = None
    share_dec_embeddings: bool = False
    dec_biases: bool = False
    reverse_prob: float = 0.0
    blind: bool = False

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}")
        if self.width % self.heads != 0:
            raise ConfigError("width must be divisible by heads")
        if self.image_res % self.patch_size != 0:
            raise ConfigError("image_res must be divisible by patch_size")
        if self.dec_layers is None:
            self.dec_layers = self.enc_layers // 2
        if self.parallel_fraction is None:
            self.parallel_fraction = 0.75 if self.objective == "cappa" else 0.0
        if not 0.0 <= self.parallel_fraction <= 1.0:
            raise ConfigError("parallel_fraction must lie in [0, 1]")
        if not 0.0 <= self.reverse_prob <= 1.0:
            raise ConfigError("reverse_prob must lie in [0, 1]")
        if self.max_len < 2:
            raise ConfigError("max_len must allow at least BOS and EOS")

    @property
    def num_patches(self) -> int:
        return (self.image_res // self.patch_size) ** 2

    @property
    def dec_len(self) -> int:
        """Decoder sequence length: shifted inputs drop one position."""
        return self.max_len - 1

    @property
    def effective_parallel_fraction(self) -> float:
        return self.parallel_fraction if self.objective == "cappa" else 0.0


@dataclass
class EncoderOut:
    """Patch-token sequence after the final norm: [M, D]."""

    seq: Tensor


@dataclass
class MapHead:
    """Single-query multihead attention pooling with output projection."""

    query: Tensor  # [1, D]
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int

    def params(self, prefix: str = "map") -> dict[str, Tensor]:
        return {f"{prefix}/query": self.query, f"{prefix}/wq": self.wq,
                f"{prefix}/wk": self.wk, f"{prefix}/wv": self.wv,
                f"{prefix}/wo": self.wo}


# -- initialization ----------------------------------------------------------


def _name_rng(seed: int, stream: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, stream, zlib.crc32(name.encode())])


def _trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(np.float32)


def _init_tensor(name: str, shape, seed: int, stream: int = STREAM_INIT) -> Tensor:
    if name.endswith("/scale"):
        data = np.ones(shape, dtype=np.float32)
    elif name.endswith("/bias") or name.endswith("/b"):
        data = np.zeros(shape, dtype=np.float32)
    else:
        data = _trunc_normal(_name_rng(seed, stream, name), shape)
    return Tensor(data, requires_grad=True)


def _encoder_param_shapes(cfg: ModelConfig, prefix: str, seq_len: int,
                          in_dim: int | None) -> list[tuple[str, tuple]]:
    d, f = cfg.width, cfg.mlp_dim
    shapes: list[tuple[str, tuple]] = []
    if in_dim is not None:
        shapes.append((f"{prefix}/patch_emb/w", (in_dim, d)))
    else:
        shapes.append((f"{prefix}/tok_emb", (cfg.vocab, d)))
    shapes.append((f"{prefix}/pos_emb", (seq_len, d)))
    for i in range(cfg.enc_layers):
        b = f"{prefix}/block{i}"
        shapes += [(f"{b}/ln1/scale", (d,)),
                   (f"{b}/attn/wq", (d, d)), (f"{b}/attn/wk", (d, d)),
                   (f"{b}/attn/wv", (d, d)), (f"{b}/attn/wo", (d, d)),
                   (f"{b}/ln2/scale", (d,)),
                   (f"{b}/mlp/w1", (d, f)), (f"{b}/mlp/w2", (f, d))]
    shapes.append((f"{prefix}/ln_f/scale", (d,)))
    return shapes


def _decoder_param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    d, f, v = cfg.width, cfg.mlp_dim, cfg.vocab
    shapes: list[tuple[str, tuple]] = [
        ("dec/tok_emb", (v, d)), ("dec/pos_emb", (cfg.dec_len, d))]
    for i in range(cfg.dec_layers):
        b = f"dec/block{i}"
        shapes += [(f"{b}/ln1/scale", (d,)),
                   (f"{b}/self/wq", (d, d)), (f"{b}/self/wk", (d, d)),
                   (f"{b}/self/wv", (d, d)), (f"{b}/self/wo", (d, d)),
                   (f"{b}/ln2/scale", (d,)),
                   (f"{b}/xattn/wq", (d, d)), (f"{b}/xattn/wk", (d, d)),
                   (f"{b}/xattn/wv", (d, d)), (f"{b}/xattn/wo", (d, d)),
                   (f"{b}/ln3/scale", (d,)),
                   (f"{b}/mlp/w1", (d, f)), (f"{b}/mlp/w2", (f, d))]
        if cfg.dec_biases:
            shapes += [(f"{b}/self/{n}/b", (d,)) for n in ("wq", "wk", "wv", "wo")]
            shapes += [(f"{b}/xattn/{n}/b", (d,)) for n in ("wq", "wk", "wv", "wo")]
            shapes += [(f"{b}/mlp/w1/b", (f,)), (f"{b}/mlp/w2/b", (d,))]
    shapes.append(("dec/ln_f/scale", (d,)))
    if not cfg.share_dec_embeddings:
        shapes.append(("dec/out_proj/w", (d, v)))
    if cfg.dec_biases:
        shapes.append(("dec/out_proj/b", (v,)))
    return shapes


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    """Names and shapes of every learned tensor for this config."""
    patch_dim = 3 * cfg.patch_size ** 2
    shapes = _encoder_param_shapes(cfg, "enc", cfg.num_patches, patch_dim)
    if cfg.objective in ("cap", "cappa"):
        shapes += _decoder_param_shapes(cfg)
    else:
        shapes += [("img_proj/w", (cfg.width, cfg.width))]
        shapes += _encoder_param_shapes(cfg, "txt", cfg.max_len, None)
        shapes += [("txt_proj/w", (cfg.width, cfg.width)),
                   ("temp/log", ())]
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Seed-deterministic initialization; each tensor has its own stream
    keyed by (seed, name) so insertion order never matters."""
    params = {}
    for name, shape in param_shapes(cfg):
        params[name] = _init_tensor(name, shape, seed)
    if "temp/log" in params:
        # temperature 0.07, stored as log
        params["temp/log"] = Tensor(
            np.array(np.log(0.07), dtype=np.float32), requires_grad=True)
    return params


def init_decoder_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Fresh decoder-only parameters (for transfer onto a frozen encoder)."""
    return {name: _init_tensor(name, shape, seed)
            for name, shape in _decoder_param_shapes(cfg)}


def init_text_tower_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Text tower + projection + temperature (for LiT-style alignment)."""
    shapes = _encoder_param_shapes(cfg, "txt", cfg.max_len, None)
    shapes += [("txt_proj/w", (cfg.width, cfg.width)), ("temp/log", ())]
    params = {name: _init_tensor(name, shape, seed) for name, shape in shapes}
    params["temp/log"] = Tensor(np.array(np.log(0.07), dtype=np.float32),
                                requires_grad=True)
    return params


def reinit_cross_attention(cfg: ModelConfig, params: dict[str, Tensor],
                           seed: int) -> None:
    """Fresh draws for all cross-attention weights (frozen-decoder recipe)."""
    for name, t in params.items():
        if "/xattn/" in name and not name.endswith("/b"):
            params[name] = Tensor(
                _trunc_normal(_name_rng(seed, STREAM_REINIT, name), t.shape),
                requires_grad=True)


def init_map_head(width: int, heads: int, seed: int,
                  prefix: str = "map") -> MapHead:
    names = [f"{prefix}/query", f"{prefix}/wq", f"{prefix}/wk",
             f"{prefix}/wv", f"{prefix}/wo"]
    shapes = [(1, width)] + [(width, width)] * 4
    t = [_init_tensor(n, s, seed) for n, s in zip(names, shapes)]
    return MapHead(query=t[0], wq=t[1], wk=t[2], wv=t[3], wo=t[4], heads=heads)


# -- patch extraction --------------------------------------------------------


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """[3, R, R] -> [M, 3*patch^2]; row i is the i-th patch in row-major
    order, flattened channel-first."""
    c, r, r2 = image.shape
    if r != r2 or r % patch != 0:
        raise ShapeError(f"image {image.shape} not divisible into {patch}-patches")
    g = r // patch
    x = image.reshape(c, g, patch, g, patch)
    x = x.transpose(1, 3, 0, 2, 4)
    return x.reshape(g * g, c * patch * patch)


def unpatchify(patches: np.ndarray, patch: int, resolution: int) -> np.ndarray:
    g = resolution // patch
    x = patches.reshape(g, g, 3, patch, patch)
    x = x.transpose(2, 0, 3, 1, 4)
    return x.reshape(3, resolution, resolution)


def patchify_batch(images: np.ndarray, patch: int) -> np.ndarray:
    b, c, r, _ = images.shape
    g = r // patch
    x = images.reshape(b, c, g, patch, g, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, g * g, c * patch * patch)


# -- shared transformer pieces ----------------------------------------------

_MASK_CACHE: dict[tuple, np.ndarray] = {}


def causal_mask(n: int, dtype=np.float32) -> Tensor:
    key = (n, np.dtype(dtype).str)
    if key not in _MASK_CACHE:
        m = np.triu(np.full((n, n), T.NEG_INF, dtype=dtype), k=1)
        _MASK_CACHE[key] = m
    return Tensor(_MASK_CACHE[key])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def _proj(x: Tensor, params: dict, name: str) -> Tensor:
    out = T.matmul(x, params[name])
    bias = params.get(f"{name}/b")
    if bias is not None:
        out = T.add(out, bias)
    return out


def _mha(x_q: Tensor, x_kv: Tensor, params: dict, prefix: str, heads: int,
         mask: Tensor | None = None) -> Tensor:
    q = _split_heads(_proj(x_q, params, f"{prefix}/wq"), heads)
    k = _split_heads(_proj(x_kv, params, f"{prefix}/wk"), heads)
    v = _split_heads(_proj(x_kv, params, f"{prefix}/wv"), heads)
    out = _merge_heads(T.attention(q, k, v, mask))
    return _proj(out, params, f"{prefix}/wo")


def _mlp(x: Tensor, params: dict, prefix: str) -> Tensor:
    return _proj(T.gelu(_proj(x, params, f"{prefix}/w1")), params, f"{prefix}/w2")


def _encoder_stack(x: Tensor, params: dict, prefix: str, layers: int,
                   heads: int, mask: Tensor | None = None) -> Tensor:
    for i in range(layers):
        b = f"{prefix}/block{i}"
        h = T.layer_norm(x, params[f"{b}/ln1/scale"])
        x = T.add(x, _mha(h, h, params, f"{b}/attn", heads, mask))
        x = T.add(x, _mlp(T.layer_norm(x, params[f"{b}/ln2/scale"]), params,
                          f"{b}/mlp"))
    return T.layer_norm(x, params[f"{prefix}/ln_f/scale"])


# -- image encoder -----------------------------------------------------------


def encode_image_batch(cfg: ModelConfig, params: dict,
                       images: np.ndarray) -> Tensor:
    """[B, 3, R, R] pixel array -> [B, M, D] patch-token sequence."""
    if images.shape[1:] != (3, cfg.image_res, cfg.image_res):
        raise ShapeError(f"images {images.shape} do not match config "
                         f"resolution {cfg.image_res}")
    if images.dtype not in (np.float32, np.float64):
        images = images.astype(np.float32)
    patches = patchify_batch(images, cfg.patch_size)
    x = T.matmul(Tensor(patches), params["enc/patch_emb/w"])
    x = T.add(x, params["enc/pos_emb"])
    return _encoder_stack(x, params, "enc", cfg.enc_layers, cfg.heads)


def encode_image(cfg: ModelConfig, params: dict, image: np.ndarray) -> EncoderOut:
    if image.shape != (3, cfg.image_res, cfg.image_res):
        raise ShapeError(f"image {image.shape} does not match config")
    seq = encode_image_batch(cfg, params, image[None])
    return EncoderOut(seq=T.reshape(seq, seq.shape[1:]))


# -- text decoder ------------------------------------------------------------


def decode_text_batch(cfg: ModelConfig, params: dict, enc: Tensor,
                      input_ids: np.ndarray, mode: str) -> Tensor:
    """[B, N] shifted input ids -> [B, N, V] logits (N = cfg.dec_len).

    `mode`: 'causal' applies the lower-triangular self-attention mask;
    'parallel' applies none (callers pass all-MASK inputs).
    """
    if mode not in ("causal", "parallel"):
        raise ShapeError(f"unknown decode mode {mode!r}")
    input_ids = np.asarray(input_ids)
    b, n = input_ids.shape
    if n != cfg.dec_len:
        raise ShapeError(f"decoder inputs length {n} != {cfg.dec_len}")
    if enc.shape != (b, cfg.num_patches, cfg.width):
        raise ShapeError(f"encoder sequence {enc.shape} does not match")
    x = T.embedding_lookup(params["dec/tok_emb"], input_ids)
    x = T.add(x, params["dec/pos_emb"])
    mask = causal_mask(n, x.dtype) if mode == "causal" else None
    for i in range(cfg.dec_layers):
        blk = f"dec/block{i}"
        h = T.layer_norm(x, params[f"{blk}/ln1/scale"])
        x = T.add(x, _mha(h, h, params, f"{blk}/self", cfg.heads, mask))
        h = T.layer_norm(x, params[f"{blk}/ln2/scale"])
        x = T.add(x, _mha(h, enc, params, f"{blk}/xattn", cfg.heads))
        x = T.add(x, _mlp(T.layer_norm(x, params[f"{blk}/ln3/scale"]),
                          params, f"{blk}/mlp"))
    x = T.layer_norm(x, params["dec/ln_f/scale"])
    if cfg.share_dec_embeddings:
        logits = T.matmul(x, T.swap_last2(params["dec/tok_emb"]))
    else:
        logits = T.matmul(x, params["dec/out_proj/w"])
    bias = params.get("dec/out_proj/b")
    if bias is not None:
        logits = T.add(logits, bias)
    return logits


def decode_text(cfg: ModelConfig, params: dict, enc: EncoderOut,
                inputs: np.ndarray, mode: str) -> Tensor:
    """Single-example decode: inputs int[N] -> logits [N, V]."""
    seq = T.reshape(enc.seq, (1,) + tuple(enc.seq.shape))
    logits = decode_text_batch(cfg, params, seq, np.asarray(inputs)[None], mode)
    return T.reshape(logits, logits.shape[1:])


# -- contrastive text tower ---------------------------------------------------


def encode_text_tower_batch(cfg: ModelConfig, params: dict, ids: np.ndarray,
                            valid: np.ndarray) -> Tensor:
    """[B, L] token ids (+validity) -> [B, D] pooled text embedding.

    Attention masks PAD keys and the GAP averages valid positions only, so
    the embedding is invariant to whatever sits in the PAD region.
    """
    ids = np.asarray(ids)
    valid = np.asarray(valid)
    b, L = ids.shape
    if L != cfg.max_len:
        raise ShapeError(f"text tower expects length {cfg.max_len}, got {L}")
    x = T.embedding_lookup(params["txt/tok_emb"], ids)
    x = T.add(x, params["txt/pos_emb"])
    dt = x.dtype
    key_mask = np.where(valid[:, None, None, :] > 0, 0.0, T.NEG_INF)
    key_mask = np.broadcast_to(key_mask.astype(dt), (b, cfg.heads, L, L))
    x = _encoder_stack(x, params, "txt", cfg.enc_layers, cfg.heads,
                       Tensor(key_mask))
    vmask = np.broadcast_to(valid[:, :, None].astype(dt), (b, L, cfg.width))
    summed = T.sum_(T.mul(x, Tensor(vmask)), axis=1)
    inv = (1.0 / valid.sum(axis=1, keepdims=True)).astype(dt)
    pooled = T.mul(summed, Tensor(np.broadcast_to(inv, (b, cfg.width))))
    return T.matmul(pooled, params["txt_proj/w"])


def encode_text_tower(cfg: ModelConfig, params: dict, seq) -> Tensor:
    out = encode_text_tower_batch(cfg, params, seq.ids[None], seq.valid[None])
    return T.reshape(out, (cfg.width,))


# -- pooling -----------------------------------------------------------------


def pool_gap(enc) -> Tensor:
    """Arithmetic mean over the token axis ([M, D] -> [D])."""
    seq = enc.seq if isinstance(enc, EncoderOut) else enc
    return T.mean(seq, axis=0)


def pool_gap_batch(seq: Tensor) -> Tensor:
    return T.mean(seq, axis=1)


def pool_map_batch(head: MapHead, seq: Tensor) -> Tensor:
    """[B, M, D] -> [B, D] via single-query multihead attention pooling."""
    b, m, d = seq.shape
    dh = d // head.heads
    q = T.transpose(T.reshape(T.matmul(head.query, head.wq),
                              (1, head.heads, dh)), (1, 0, 2))
    k = _split_heads(T.matmul(seq, head.wk), head.heads)
    v = _split_heads(T.matmul(seq, head.wv), head.heads)
    out = T.reshape(_merge_heads(T.attention(q, k, v)), (b, d))
    return T.matmul(out, head.wo)


def pool_map(head: MapHead, enc) -> Tensor:
    seq = enc.seq if isinstance(enc, EncoderOut) else enc
    out = pool_map_batch(head, T.reshape(seq, (1,) + tuple(seq.shape)))
    return T.reshape(out, (out.shape[-1],))


def image_embedding_batch(cfg: ModelConfig, params: dict,
                          images: np.ndarray) -> Tensor:
    """Contrastive image representation: GAP then linear projection."""
    seq = encode_image_batch(cfg, params, images)
    return T.matmul(pool_gap_batch(seq), params["img_proj/w"])


# -- parameter counting --------------------------------------------------------


def count_params(cfg: ModelConfig) -> int:
    """Exact learned-parameter count from the per-layer shape table."""
    return sum(int(np.prod(shape, dtype=np.int64)) if shape else 1
               for _, shape in param_shapes(cfg))


def config_to_dict(cfg: ModelConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def config_from_dict(d: dict) -> ModelConfig:
    kwargs = {}
    for f in fields(ModelConfig):
        if f.name not in d:
            continue
        v = d[f.name]
        if isinstance(v, str):
            if f.name in ("objective",):
                pass
            elif v == "None":
                v = None
            elif v in ("True", "False"):
                v = v == "True"
            elif f.name in ("parallel_fraction", "reverse_prob"):
                v = float(v)
            else:
                v = int(v)
        kwargs[f.name] = v
    return ModelConfig(**kwargs)
