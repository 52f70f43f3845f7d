"""Evaluation protocols over frozen representations.

Probes train a small head on frozen features (the encoder is never
touched); LiT alignment trains a text tower plus a vision MAP head
against a frozen encoder; fresh-decoder transfer trains a new decoder on
a frozen encoder for captioning and classification-as-text; the
perturbation benchmark scores true captions against scene-false edits.

Tie handling is uniformly conservative: a tied score counts against the
model, both in retrieval and in the perturbation benchmark.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import datagen as dg
from . import model as M
from . import objective as O
from . import tensor as T
from . import tok
from . import train as TR
from .errors import ConfigError, InsufficientShots, ShapeError, VocabError
from .tensor import Tensor

STREAM_PROBE = 17
STREAM_TASK = 23

PROBE_KINDS = ("linear", "mlp", "map")
PROBE_SWEEP_LRS = (1e-2, 1e-3)
PROBE_SWEEP_WDS = (1e-4, 0.0)
PROBE_STEPS = 120
PROBE_REPEATS = 3


# -- feature extraction --------------------------------------------------------


def _batched(n: int, size: int = 64):
    for lo in range(0, n, size):
        yield lo, min(lo + size, n)


def extract_sequences(cfg: M.ModelConfig, params: dict,
                      images: np.ndarray) -> np.ndarray:
    """Frozen [K, M, D] encoder sequences (no gradients)."""
    out = []
    with T.no_grad():
        for lo, hi in _batched(images.shape[0]):
            out.append(M.encode_image_batch(cfg, params, images[lo:hi]).data)
    return np.concatenate(out, axis=0)


def extract_features(cfg: M.ModelConfig, params: dict, images: np.ndarray,
                     mode: str = "gap") -> np.ndarray:
    """Frozen [K, D] features: 'gap' pools the encoder sequence; 'prelogits'
    adds the contrastive projection (clip models only)."""
    if mode not in ("gap", "prelogits"):
        raise ConfigError(f"unknown feature mode {mode!r}")
    out = []
    with T.no_grad():
        for lo, hi in _batched(images.shape[0]):
            seq = M.encode_image_batch(cfg, params, images[lo:hi])
            pooled = M.pool_gap_batch(seq)
            if mode == "prelogits":
                if "img_proj/w" not in params:
                    raise ConfigError("prelogits features need a clip model")
                pooled = T.matmul(pooled, params["img_proj/w"])
            out.append(pooled.data)
    return np.concatenate(out, axis=0)


# -- k-shot probes ---------------------------------------------------------------


@dataclass
class ProbeResult:
    accuracy: float
    per_class: dict[int, float]
    kind: str
    shots: int


@dataclass
class _ProbeHead:
    kind: str
    tensors: dict[str, Tensor]
    heads: int = 2

    def logits(self, feats: np.ndarray) -> Tensor:
        t = self.tensors
        if self.kind == "linear":
            return T.add(T.matmul(Tensor(feats), t["w"]), t["b"])
        if self.kind == "mlp":
            h = T.gelu(T.add(T.matmul(Tensor(feats), t["w1"]), t["b1"]))
            return T.add(T.matmul(h, t["w2"]), t["b2"])
        head = M.MapHead(query=t["query"], wq=t["wq"], wk=t["wk"],
                         wv=t["wv"], wo=t["wo"], heads=self.heads)
        pooled = M.pool_map_batch(head, Tensor(feats))
        return T.add(T.matmul(pooled, t["w"]), t["b"])


def _init_probe(kind: str, dim: int, classes: int, seed: int) -> _ProbeHead:
    rng = np.random.default_rng([seed, STREAM_PROBE])

    def tn(shape):
        return Tensor(M._trunc_normal(rng, shape), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)

    if kind == "linear":
        tensors = {"w": zeros((dim, classes)), "b": zeros((classes,))}
    elif kind == "mlp":
        hidden = 2 * dim
        tensors = {"w1": tn((dim, hidden)), "b1": zeros((hidden,)),
                   "w2": zeros((hidden, classes)), "b2": zeros((classes,))}
    elif kind == "map":
        tensors = {"query": tn((1, dim)), "wq": tn((dim, dim)),
                   "wk": tn((dim, dim)), "wv": tn((dim, dim)),
                   "wo": tn((dim, dim)), "w": zeros((dim, classes)),
                   "b": zeros((classes,))}
    else:
        raise ConfigError(f"unknown probe kind {kind!r}")
    return _ProbeHead(kind=kind, tensors=tensors)


def _train_probe(kind, feats, labels, classes, lr, wd, seed) -> _ProbeHead:
    head = _init_probe(kind, feats.shape[-1], classes, seed)
    sched = TR.TrainConfig(steps=PROBE_STEPS, batch=1, base_lr=lr,
                           weight_decay=wd,
                           warmup_steps=max(1, PROBE_STEPS // 20), seed=seed)
    state = TR.init_opt_state(head.tensors)
    ones = np.ones(len(labels))
    for step in range(1, PROBE_STEPS + 1):
        for p in head.tensors.values():
            p.grad = None
        loss = T.cross_entropy(head.logits(feats), labels, ones)
        loss.backward()
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in head.tensors.items()}
        TR.clip_global_norm(grads, 1.0)
        TR.optimizer_step(head.tensors, grads, state, TR.lr_at(step, sched), wd)
    return head


def _probe_accuracy(head: _ProbeHead, feats, labels) -> float:
    with T.no_grad():
        pred = head.logits(feats).data.argmax(axis=1)
    return float((pred == labels).mean())


def kshot_probe(features: np.ndarray, labels: np.ndarray, k: int,
                probe_kind: str = "linear", seed: int = 0) -> ProbeResult:
    """Train a head on k examples per class over frozen features.

    Features are [K, D] for linear/mlp probes and the un-pooled [K, M, D]
    sequence for the map probe. Each of the three repeats draws its own
    shot split; a small lr/wd sweep is selected on one held-out shot per
    class (falling back to training loss at k=1), then the winner is
    retrained on all k shots and scored on the disjoint eval split.
    """
    labels = np.asarray(labels)
    if probe_kind == "map" and features.ndim != 3:
        raise ConfigError("map probe needs [K, M, D] sequence features")
    if probe_kind in ("linear", "mlp") and features.ndim != 2:
        raise ConfigError(f"{probe_kind} probe needs [K, D] features")
    classes = int(labels.max()) + 1
    for c in range(classes):
        have = int((labels == c).sum())
        if have < k + 1:
            raise InsufficientShots(
                f"class {c} has {have} examples; k={k} needs >= {k + 1}")

    accs, per_class_runs = [], []
    for rep in range(PROBE_REPEATS):
        rng = np.random.default_rng([seed + rep, STREAM_PROBE, 1])
        train_idx, val_idx, eval_idx = [], [], []
        for c in range(classes):
            idx = rng.permutation(np.flatnonzero(labels == c))
            shots = idx[:k]
            train_idx.append(shots)
            val_idx.append(shots[-1:])
            eval_idx.append(idx[k:])
        train_idx = np.concatenate(train_idx)
        eval_idx = np.concatenate(eval_idx)
        val_idx = np.concatenate(val_idx)
        inner_idx = np.array([i for i in train_idx if i not in set(val_idx)])

        best, best_score = None, -1.0
        for lr in PROBE_SWEEP_LRS:
            for wd in PROBE_SWEEP_WDS:
                if k >= 2:
                    head = _train_probe(probe_kind, features[inner_idx],
                                        labels[inner_idx], classes, lr, wd,
                                        seed + rep)
                    score = _probe_accuracy(head, features[val_idx],
                                            labels[val_idx])
                else:
                    head = _train_probe(probe_kind, features[train_idx],
                                        labels[train_idx], classes, lr, wd,
                                        seed + rep)
                    with T.no_grad():
                        score = -float(T.cross_entropy(
                            head.logits(features[train_idx]),
                            labels[train_idx],
                            np.ones(len(train_idx))).data)
                if score > best_score:
                    best, best_score = (lr, wd), score
        head = _train_probe(probe_kind, features[train_idx], labels[train_idx],
                            classes, best[0], best[1], seed + rep)
        with T.no_grad():
            pred = head.logits(features[eval_idx]).data.argmax(axis=1)
        truth = labels[eval_idx]
        accs.append(float((pred == truth).mean()))
        per_class_runs.append({c: float((pred[truth == c] == c).mean())
                               for c in range(classes)})
    per_class = {c: float(np.mean([r[c] for r in per_class_runs]))
                 for c in range(classes)}
    return ProbeResult(accuracy=float(np.mean(accs)), per_class=per_class,
                       kind=probe_kind, shots=k)


# -- LiT alignment ----------------------------------------------------------------


@dataclass
class LitAligned:
    text_cfg: M.ModelConfig
    map_head: M.MapHead
    params: dict[str, Tensor]  # txt tower + projection + temperature
    losses: list[float] = field(default_factory=list)


def lit_align(enc_cfg: M.ModelConfig, enc_params: dict, dataset, vocab,
              steps: int, batch: int = 32, base_lr: float = 1e-3,
              seed: int = 0) -> LitAligned:
    """Contrastively align a fresh text tower + vision MAP head to a
    frozen image encoder. Only the new components receive updates."""
    text_cfg = M.ModelConfig(
        vocab=vocab.size, patch_size=enc_cfg.patch_size,
        image_res=enc_cfg.image_res, width=enc_cfg.width,
        enc_layers=enc_cfg.enc_layers, heads=enc_cfg.heads,
        mlp_dim=enc_cfg.mlp_dim, max_len=enc_cfg.max_len, objective="clip")
    params = M.init_text_tower_params(text_cfg, seed)
    map_head = M.init_map_head(enc_cfg.width, enc_cfg.heads, seed, prefix="lit")
    trainable = dict(params)
    trainable.update(map_head.params("lit"))
    sched = TR.TrainConfig(steps=steps, batch=batch, base_lr=base_lr,
                           seed=seed)
    state = TR.init_opt_state(trainable)
    losses = []
    n = len(dataset)
    for step in range(1, steps + 1):
        idx = np.random.default_rng(
            [seed, TR.STREAM_DATA, step]).integers(0, n, batch)
        bx = O.make_batch([dataset[i] for i in idx], vocab, text_cfg,
                          seed, step)
        with T.no_grad():
            seq = M.encode_image_batch(enc_cfg, enc_params, bx.images)
        img_emb = M.pool_map_batch(map_head, Tensor(seq.data))
        txt_emb = M.encode_text_tower_batch(text_cfg, params, bx.ids, bx.valid)
        loss = O.contrastive_loss(img_emb, txt_emb, params["temp/log"])
        losses.append(float(loss.data))
        for p in trainable.values():
            p.grad = None
        loss.backward()
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in trainable.items()}
        TR.clip_global_norm(grads, sched.grad_clip)
        TR.optimizer_step(trainable, grads, state, TR.lr_at(step, sched),
                          sched.weight_decay)
    return LitAligned(text_cfg=text_cfg, map_head=map_head, params=params,
                      losses=losses)


def lit_embed_images(aligned: LitAligned, enc_cfg, enc_params,
                     images: np.ndarray) -> np.ndarray:
    out = []
    with T.no_grad():
        for lo, hi in _batched(images.shape[0]):
            seq = M.encode_image_batch(enc_cfg, enc_params, images[lo:hi])
            out.append(M.pool_map_batch(aligned.map_head, seq).data)
    return np.concatenate(out, axis=0)


def lit_embed_texts(aligned: LitAligned, vocab, captions: list[str]) -> np.ndarray:
    seqs = [tok.encode(c, vocab, aligned.text_cfg.max_len) for c in captions]
    ids = np.stack([s.ids for s in seqs])
    valid = np.stack([s.valid for s in seqs])
    out = []
    with T.no_grad():
        for lo, hi in _batched(len(captions)):
            out.append(M.encode_text_tower_batch(
                aligned.text_cfg, aligned.params, ids[lo:hi],
                valid[lo:hi]).data)
    return np.concatenate(out, axis=0)


# -- fresh-decoder transfer ---------------------------------------------------------


CLASS_PREFIX = "class:"


def label_to_text(scene: dg.Scene) -> str:
    return f"{CLASS_PREFIX} {dg.class_names()[dg.class_label(scene)]}"


def text_to_label(text: str) -> int | None:
    words = text.split()
    if len(words) != 3 or words[0] != CLASS_PREFIX:
        return None
    name = " ".join(words[1:])
    names = dg.class_names()
    return names.index(name) if name in names else None


def build_task_vocab(dataset) -> tok.Vocab:
    corpus = [ex.caption for ex in dataset]
    corpus += [label_to_text(ex.scene) for ex in dataset]
    return tok.build_vocab(corpus)


@dataclass
class FreshDecoderResult:
    dec_cfg: M.ModelConfig
    dec_params: dict[str, Tensor]
    task_vocab: tok.Vocab
    cls_accuracy: float
    caption_ce: float
    losses: list[float]


def _greedy_decode(dec_cfg, dec_params, enc_row: Tensor, prefix_ids,
                   vocab_size: int) -> list[int]:
    """Argmax decoding from a forced prefix until EOS or length."""
    n = dec_cfg.dec_len
    ids = np.full(n, tok.PAD)
    ids[: len(prefix_ids)] = prefix_ids
    pos = len(prefix_ids)
    out = list(prefix_ids)
    with T.no_grad():
        while pos < n:
            logits = M.decode_text_batch(dec_cfg, dec_params, enc_row,
                                         ids[None], "causal").data[0]
            nxt = int(logits[pos - 1].argmax())
            out.append(nxt)
            if nxt == tok.EOS:
                break
            if pos < n:
                ids[pos] = nxt
            pos += 1
    return out


def fresh_decoder_transfer(enc_cfg: M.ModelConfig, enc_params: dict,
                           dec_cfg: M.ModelConfig, train_set, eval_set,
                           steps: int, batch: int = 32,
                           seed: int = 0) -> FreshDecoderResult:
    """Train a decoder from scratch on a frozen encoder, multitasking
    captioning with classification rendered as text ("class: red circle").

    Reports exact-match accuracy for the classification task (greedy
    decode after the forced "class:" prefix) and causal caption CE, both
    on the eval set.
    """
    if dec_cfg.width != enc_cfg.width:
        raise ConfigError("decoder width must match the frozen encoder")
    task_vocab = build_task_vocab(list(train_set) + list(eval_set))
    if dec_cfg.vocab != task_vocab.size:
        raise ConfigError(f"dec_cfg.vocab must equal task vocab size "
                          f"{task_vocab.size}")
    dec_params = M.init_decoder_params(dec_cfg, seed)
    sched = TR.TrainConfig(steps=steps, batch=batch, seed=seed)
    state = TR.init_opt_state(dec_params)
    losses = []
    n = len(train_set)
    for step in range(1, steps + 1):
        idx = np.random.default_rng(
            [seed, TR.STREAM_DATA, step]).integers(0, n, batch)
        examples = [train_set[i] for i in idx]
        pick_cls = [np.random.default_rng(
            [seed, STREAM_TASK, step, i]).random() < 0.5
            for i in range(batch)]
        texts = [label_to_text(ex.scene) if c else ex.caption
                 for ex, c in zip(examples, pick_cls)]
        seqs = [tok.encode(t, task_vocab, dec_cfg.max_len, truncate=True)
                for t in texts]
        ids = np.stack([s.ids for s in seqs])
        valid = np.stack([s.valid for s in seqs])
        images = np.stack([ex.image for ex in examples])
        with T.no_grad():
            enc = M.encode_image_batch(enc_cfg, enc_params, images)
        logits = M.decode_text_batch(dec_cfg, dec_params, Tensor(enc.data),
                                     ids[:, :-1], "causal")
        loss = T.cross_entropy(T.reshape(logits, (-1, dec_cfg.vocab)),
                               ids[:, 1:].reshape(-1),
                               valid[:, 1:].reshape(-1))
        losses.append(float(loss.data))
        for p in dec_params.values():
            p.grad = None
        loss.backward()
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in dec_params.items()}
        TR.clip_global_norm(grads, sched.grad_clip)
        TR.optimizer_step(dec_params, grads, state, TR.lr_at(step, sched),
                          sched.weight_decay)

    # eval: classification exact match via greedy decode from the prefix
    prefix = [tok.BOS, task_vocab.id_of(CLASS_PREFIX)]
    hits = 0
    with T.no_grad():
        enc_eval = extract_sequences(enc_cfg, enc_params,
                                     np.stack([ex.image for ex in eval_set]))
    for i, ex in enumerate(eval_set):
        row = Tensor(enc_eval[i][None])
        out_ids = _greedy_decode(dec_cfg, dec_params, row, prefix,
                                 task_vocab.size)
        try:
            text = tok.decode(tok.TokenSeq(
                np.array(out_ids + [tok.PAD] * (dec_cfg.max_len - len(out_ids)),
                         dtype=np.int32)[:dec_cfg.max_len],
                np.ones(dec_cfg.max_len, dtype=np.int8)), task_vocab)
        except VocabError:
            text = ""
        hits += int(text_to_label(text) == dg.class_label(ex.scene))
    cls_acc = hits / len(eval_set)

    cap_ce = dataset_caption_ce(dec_cfg, {**dec_params}, task_vocab, eval_set,
                                mode="causal", enc_cfg=enc_cfg,
                                enc_params=enc_params)
    return FreshDecoderResult(dec_cfg=dec_cfg, dec_params=dec_params,
                              task_vocab=task_vocab, cls_accuracy=cls_acc,
                              caption_ce=cap_ce, losses=losses)


# -- shared eval helpers ------------------------------------------------------------


def dataset_caption_ce(cfg: M.ModelConfig, params: dict, vocab, examples,
                       mode: str = "causal", enc_cfg=None,
                       enc_params=None) -> float:
    """Weighted per-token CE over a dataset (one pass, no gradients).

    When `enc_cfg`/`enc_params` are given the encoder comes from them
    (frozen-transfer setups); otherwise `params` holds the full model.
    """
    e_cfg = enc_cfg if enc_cfg is not None else cfg
    e_params = enc_params if enc_params is not None else params
    total, weight = 0.0, 0
    with T.no_grad():
        for lo, hi in _batched(len(examples)):
            chunk = examples[lo:hi]
            seqs = [tok.encode(ex.caption, vocab, cfg.max_len, truncate=True)
                    for ex in chunk]
            ids = np.stack([s.ids for s in seqs])
            valid = np.stack([s.valid for s in seqs])
            images = np.stack([ex.image for ex in chunk])
            if cfg.blind:
                enc = Tensor(np.zeros((len(chunk), cfg.num_patches, cfg.width),
                                      dtype=np.float32))
            else:
                enc = M.encode_image_batch(e_cfg, e_params, images)
                enc = Tensor(enc.data)
            if mode == "parallel":
                inputs = np.full((len(chunk), cfg.dec_len), tok.MASK)
            else:
                inputs = ids[:, :-1]
            logits = M.decode_text_batch(cfg, params, enc, inputs, mode)
            w = valid[:, 1:].reshape(-1)
            ce = T.cross_entropy(T.reshape(logits, (-1, cfg.vocab)),
                                 ids[:, 1:].reshape(-1), w)
            total += float(ce.data) * int(w.sum())
            weight += int(w.sum())
    return total / weight


# -- retrieval -----------------------------------------------------------------------


def retrieval_eval(img_emb: np.ndarray, txt_emb: np.ndarray) -> tuple[float, float]:
    """Cosine nearest-neighbor recall@1 in both directions; ties fail."""
    if img_emb.shape != txt_emb.shape:
        raise ShapeError(f"embedding counts differ: {img_emb.shape} vs "
                         f"{txt_emb.shape}")
    ni = img_emb / np.linalg.norm(img_emb, axis=1, keepdims=True)
    nt = txt_emb / np.linalg.norm(txt_emb, axis=1, keepdims=True)
    sims = ni @ nt.T
    k = sims.shape[0]
    i2t = t2i = 0
    for i in range(k):
        row = sims[i]
        if row[i] > np.max(np.delete(row, i)):
            i2t += 1
        col = sims[:, i]
        if col[i] > np.max(np.delete(col, i)):
            t2i += 1
    return i2t / k, t2i / k


# -- perturbation benchmark -----------------------------------------------------------


Scorer = Callable[[np.ndarray, list[str]], np.ndarray]


def make_caption_scorer(cfg, params, vocab, mode: str = "causal") -> Scorer:
    def scorer(image, captions):
        return O.score_captions_batch(cfg, params, vocab, image, captions,
                                      mode)
    return scorer


def make_blind_scorer(cfg, params, vocab, mode: str = "causal") -> Scorer:
    def scorer(image, captions):
        return O.score_captions_batch(cfg, params, vocab, None, captions,
                                      mode, blind=True)
    return scorer


def make_clip_scorer(cfg, params, vocab) -> Scorer:
    def scorer(image, captions):
        with T.no_grad():
            img = M.image_embedding_batch(cfg, params, image[None]).data[0]
        txt = O.embed_texts_clip(cfg, params, vocab, captions)
        img = img / np.linalg.norm(img)
        txt = txt / np.linalg.norm(txt, axis=1, keepdims=True)
        return txt @ img
    return scorer


@dataclass
class PerturbReport:
    accuracy: dict[str, dict[str, float]]  # scorer -> kind -> win rate
    pairs: dict[str, int]                  # kind -> pair count

    def to_csv(self) -> str:
        lines = ["scorer,kind,accuracy,pairs"]
        for scorer in sorted(self.accuracy):
            for kind in sorted(self.accuracy[scorer]):
                lines.append(f"{scorer},{kind},"
                             f"{self.accuracy[scorer][kind]:.6f},"
                             f"{self.pairs[kind]}")
        return "\n".join(lines) + "\n"


def collect_pairs(dataset, kind: str, seed: int,
                  limit: int | None = None) -> list[tuple[int, dg.PerturbedPair]]:
    """(example index, pair) for every example the kind applies to."""
    out = []
    for i, ex in enumerate(dataset):
        try:
            out.append((i, dg.perturb(ex, kind, seed=seed + i)))
        except dg.PerturbError:
            continue
        if limit is not None and len(out) >= limit:
            break
    return out


def perturbation_benchmark(scorers: dict[str, Scorer], dataset,
                           kinds=dg.PERTURB_KINDS, seed: int = 0,
                           limit: int | None = None) -> PerturbReport:
    """Win rate of each scorer on true-vs-perturbed caption pairs.

    A win requires strictly greater score for the true caption; ties and
    losses count the same way, so a constant scorer lands at exactly 0.
    """
    accuracy = {name: {} for name in scorers}
    pairs_per_kind = {}
    for kind in kinds:
        pairs = collect_pairs(dataset, kind, seed, limit)
        pairs_per_kind[kind] = len(pairs)
        wins = {name: 0 for name in scorers}
        for i, pair in pairs:
            image = dataset[i].image
            for name, scorer in scorers.items():
                s = scorer(image, [pair.positive, pair.negative])
                wins[name] += int(s[0] > s[1])
        for name in scorers:
            accuracy[name][kind] = (wins[name] / len(pairs)) if pairs else float("nan")
    return PerturbReport(accuracy=accuracy, pairs=pairs_per_kind)
