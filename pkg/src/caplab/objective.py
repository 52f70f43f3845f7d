"""Training losses (captioning, contrastive) and log-likelihood scoring.

Captioning draws a prediction mode per example: causal teacher forcing
([BOS, t1..] inputs, lower-triangular mask) or parallel prediction
(all-[MASK] inputs, no self-attention mask). The loss itself never
changes: cross-entropy averaged over the valid target positions of the
whole batch. Mode and reversal draws are keyed by (seed, step, example)
so that a parallel fraction of zero reproduces plain captioning bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M
from . import tensor as T
from . import tok
from .errors import BatchTooSmall, ConfigError
from .tensor import Tensor

# derived-stream tags (single master seed; see cli docs)
STREAM_MODE = 11
STREAM_REVERSE = 13


@dataclass
class Batch:
    """One training batch with its per-example mode and reversal draws."""

    images: np.ndarray    # [B, 3, R, R]
    ids: np.ndarray       # [B, L]
    valid: np.ndarray     # [B, L]
    parallel: np.ndarray  # bool [B]
    reverse: np.ndarray   # bool [B]

    @property
    def size(self) -> int:
        return self.images.shape[0]


@dataclass
class CaptionLossOut:
    loss: Tensor
    causal_ce: float      # nan when the branch saw no examples
    parallel_ce: float
    causal_tokens: int
    parallel_tokens: int
    n_causal: int
    n_parallel: int


def make_batch(examples, vocab: tok.Vocab, cfg: M.ModelConfig, seed: int,
               step: int, batch_level_mixing: bool = False) -> Batch:
    """Assemble tensors and draw modes for the given examples.

    Per-example draws come from streams keyed (seed, step, index); with
    `batch_level_mixing` one draw per step decides the whole batch,
    reproducing the alternating-batches training setup.
    """
    b = len(examples)
    images = np.stack([ex.image for ex in examples])
    seqs = [tok.encode(ex.caption, vocab, cfg.max_len, truncate=True)
            for ex in examples]
    ids = np.stack([s.ids for s in seqs])
    valid = np.stack([s.valid for s in seqs])
    p = cfg.effective_parallel_fraction
    if batch_level_mixing:
        flip = np.random.default_rng([seed, STREAM_MODE, step]).random() < p
        parallel = np.full(b, flip)
    else:
        parallel = np.array([
            np.random.default_rng([seed, STREAM_MODE, step, i]).random() < p
            for i in range(b)])
    reverse = np.array([
        np.random.default_rng([seed, STREAM_REVERSE, step, i]).random()
        < cfg.reverse_prob for i in range(b)])
    return Batch(images=images, ids=ids, valid=valid,
                 parallel=parallel, reverse=reverse)


def _apply_reversal(batch: Batch) -> np.ndarray:
    ids = batch.ids.copy()
    for i in np.flatnonzero(batch.reverse):
        n = int(batch.valid[i].sum())
        ids[i, 1: n - 1] = ids[i, 1: n - 1][::-1]
    return ids


def _encoder_for(cfg: M.ModelConfig, params: dict,
                 images: np.ndarray) -> Tensor:
    """Blind models replace the encoder output with zeros."""
    if cfg.blind:
        return Tensor(np.zeros(
            (images.shape[0], cfg.num_patches, cfg.width), dtype=np.float32))
    return M.encode_image_batch(cfg, params, images)


def _branch_ce(cfg, params, enc: Tensor, inputs: np.ndarray,
               targets: np.ndarray, weights: np.ndarray, mode: str):
    logits = M.decode_text_batch(cfg, params, enc, inputs, mode)
    flat = T.reshape(logits, (-1, cfg.vocab))
    ce = T.cross_entropy(flat, targets.reshape(-1), weights.reshape(-1))
    return ce, int(weights.sum())


def caption_loss(cfg: M.ModelConfig, params: dict,
                 batch: Batch) -> CaptionLossOut:
    """Next-token cross-entropy over both prediction modes.

    Causal examples see shifted ground-truth inputs under a causal mask;
    parallel examples see all-[MASK] inputs with no mask. The scalar loss
    averages over every valid target position in the batch.
    """
    if cfg.objective not in ("cap", "cappa"):
        raise ConfigError("caption_loss needs a cap or cappa objective")
    ids = _apply_reversal(batch) if cfg.reverse_prob > 0 else batch.ids
    inputs = ids[:, :-1]
    targets = ids[:, 1:]
    weights = batch.valid[:, 1:]
    ci = np.flatnonzero(~batch.parallel)
    pi = np.flatnonzero(batch.parallel)
    ce_c = ce_p = None
    n_c = n_p = 0
    if ci.size:
        enc = _encoder_for(cfg, params, batch.images[ci])
        ce_c, n_c = _branch_ce(cfg, params, enc, inputs[ci], targets[ci],
                               weights[ci], "causal")
    if pi.size:
        enc = _encoder_for(cfg, params, batch.images[pi])
        masked = np.full((pi.size, cfg.dec_len), tok.MASK)
        ce_p, n_p = _branch_ce(cfg, params, enc, masked, targets[pi],
                               weights[pi], "parallel")
    total = n_c + n_p
    if ce_c is not None and ce_p is not None:
        loss = T.add(T.mul(ce_c, Tensor(np.float32(n_c / total))),
                     T.mul(ce_p, Tensor(np.float32(n_p / total))))
    else:
        loss = ce_c if ce_c is not None else ce_p
    return CaptionLossOut(
        loss=loss,
        causal_ce=float(ce_c.data) if ce_c is not None else float("nan"),
        parallel_ce=float(ce_p.data) if ce_p is not None else float("nan"),
        causal_tokens=n_c, parallel_tokens=n_p,
        n_causal=int(ci.size), n_parallel=int(pi.size))


def contrastive_loss(img_emb: Tensor, txt_emb: Tensor,
                     log_temp: Tensor) -> Tensor:
    """Symmetric InfoNCE with diagonal targets and learnable temperature.

    Both embedding sets are L2-normalized here; similarities are divided
    by temp = exp(log_temp).
    """
    b = img_emb.shape[0]
    if b < 2:
        raise BatchTooSmall("contrastive loss needs a batch of >= 2")
    if img_emb.shape != txt_emb.shape:
        raise ConfigError(f"embedding shapes differ: {img_emb.shape} vs "
                          f"{txt_emb.shape}")
    sim = T.matmul(T.l2_normalize(img_emb), T.swap_last2(T.l2_normalize(txt_emb)))
    scaled = T.mul(sim, T.exp(T.neg(log_temp)))
    diag = np.arange(b)
    ones = np.ones(b)
    rows = T.cross_entropy(scaled, diag, ones)
    cols = T.cross_entropy(T.swap_last2(scaled), diag, ones)
    return T.mul(T.add(rows, cols), Tensor(np.float32(0.5)))


def clip_loss(cfg: M.ModelConfig, params: dict, batch: Batch) -> Tensor:
    if cfg.objective != "clip":
        raise ConfigError("clip_loss needs the clip objective")
    img = M.image_embedding_batch(cfg, params, batch.images)
    txt = M.encode_text_tower_batch(cfg, params, batch.ids, batch.valid)
    return contrastive_loss(img, txt, params["temp/log"])


# -- scoring -------------------------------------------------------------------


def _log_softmax(rows: np.ndarray) -> np.ndarray:
    m = rows.max(axis=-1, keepdims=True)
    z = np.exp(rows - m).sum(axis=-1, keepdims=True)
    return rows - m - np.log(z)


def _sequence_logprob(logits: np.ndarray, targets: np.ndarray,
                      weights: np.ndarray) -> float:
    logp = _log_softmax(logits)
    score = 0.0
    for i in np.flatnonzero(weights):
        score += float(logp[i, targets[i]])
    return score


def _decode_logits(cfg, params, enc: Tensor, inputs: np.ndarray,
                   mode: str) -> np.ndarray:
    with T.no_grad():
        return M.decode_text_batch(cfg, params, enc, inputs, mode).data


def score_captions_batch(cfg: M.ModelConfig, params: dict, vocab: tok.Vocab,
                         image: np.ndarray | None, captions: list[str],
                         mode: str = "causal",
                         blind: bool = False) -> np.ndarray:
    """Log-likelihood of each candidate caption for one image.

    All candidates share a single encoder pass (the per-image scoring
    cost the captioner pays for zero-shot transfer), then decode as one
    batch. `blind` replaces the encoder output with zeros.
    """
    c = len(captions)
    seqs = [tok.encode(cap, vocab, cfg.max_len) for cap in captions]
    if blind or cfg.blind:
        enc = Tensor(np.zeros((c, cfg.num_patches, cfg.width), dtype=np.float32))
    else:
        with T.no_grad():
            one = M.encode_image_batch(cfg, params, image[None])
        enc = Tensor(np.repeat(one.data, c, axis=0))
    if mode == "parallel":
        inputs = np.full((c, cfg.dec_len), tok.MASK)
    else:
        inputs = np.stack([s.ids[:-1] for s in seqs])
    logits = _decode_logits(cfg, params, enc, inputs, mode)
    return np.array([
        _sequence_logprob(logits[i], seqs[i].ids[1:], seqs[i].valid[1:])
        for i in range(c)])


def score_caption(cfg: M.ModelConfig, params: dict, vocab: tok.Vocab,
                  image: np.ndarray, caption: str,
                  mode: str = "causal") -> float:
    """Sum of log softmax(logits)[target] over the caption's valid targets."""
    return float(score_captions_batch(cfg, params, vocab, image,
                                      [caption], mode)[0])


def score_caption_stepwise(cfg: M.ModelConfig, params: dict, vocab: tok.Vocab,
                           image: np.ndarray, caption: str) -> float:
    """One decoder pass per position, feeding only the true prefix.

    By the teacher-forcing identity this must match `score_caption` in
    causal mode up to accumulation order.
    """
    seq = tok.encode(caption, vocab, cfg.max_len)
    with T.no_grad():
        enc = M.encode_image_batch(cfg, params, image[None])
    targets, weights = seq.ids[1:], seq.valid[1:]
    score = 0.0
    for i in np.flatnonzero(weights):
        inputs = np.full(cfg.dec_len, tok.PAD)
        inputs[: i + 1] = seq.ids[: i + 1]
        logits = _decode_logits(cfg, params, enc, inputs[None], "causal")[0]
        score += float(_log_softmax(logits[i: i + 1])[0, targets[i]])
    return score


def blind_score(cfg: M.ModelConfig, params: dict, vocab: tok.Vocab,
                caption: str, mode: str = "causal") -> float:
    """score_caption with the encoder output replaced by zeros."""
    return float(score_captions_batch(cfg, params, vocab, None, [caption],
                                      mode, blind=True)[0])


def embed_texts_clip(cfg: M.ModelConfig, params: dict, vocab: tok.Vocab,
                     captions: list[str]) -> np.ndarray:
    seqs = [tok.encode(c, vocab, cfg.max_len) for c in captions]
    ids = np.stack([s.ids for s in seqs])
    valid = np.stack([s.valid for s in seqs])
    with T.no_grad():
        return M.encode_text_tower_batch(cfg, params, ids, valid).data


def zero_shot_classify(cfg: M.ModelConfig, params: dict, vocab: tok.Vocab,
                       image: np.ndarray, class_captions: list[str],
                       mode: str = "causal") -> int:
    """Index of the best-scoring candidate; ties go to the lowest index.

    cap/cappa models score candidates by log-likelihood; clip models by
    cosine similarity in the shared embedding space.
    """
    if len(class_captions) < 2:
        raise ConfigError("zero-shot classification needs >= 2 candidates")
    if cfg.objective == "clip":
        with T.no_grad():
            img = M.image_embedding_batch(cfg, params, image[None]).data[0]
        txt = embed_texts_clip(cfg, params, vocab, class_captions)
        img = img / np.linalg.norm(img)
        txt = txt / np.linalg.norm(txt, axis=1, keepdims=True)
        scores = txt @ img
    else:
        scores = score_captions_batch(cfg, params, vocab, image,
                                      class_captions, mode)
    return int(np.argmax(scores))
