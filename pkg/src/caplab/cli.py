"""Command-line surface: data generation, training, evaluation, scoring.

Config values come from (lowest to highest precedence) built-in defaults,
a plain-text key=value config file (`--config`, `#` comments), and
explicit flags. Every command prints an effective-config header with all
values materialized, so a run is reproducible from its log alone.

Exit codes: 0 success, 1 internal error, 2 missing artifact, 3 bad input.

All randomness funnels through --seed; derived streams are keyed
(seed, tag, ...) with tags: 3 init, 5 xattn reinit, 7 batch sampling,
11 mode draws, 13 caption reversal, 17 probes, 23 multitask draws.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import datagen as dg
from . import evalsuite as E
from . import model as M
from . import objective as O
from . import tensor as T
from . import tok
from . import train as TR
from .errors import (CapLabError, ConfigError, FormatError, InsufficientShots,
                     LengthError, OOVError, PerturbError, VersionError,
                     VocabError)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_MISSING = 2
EXIT_BAD_INPUT = 3

MODEL_KEYS = ("patch_size", "image_res", "width", "enc_layers", "dec_layers",
              "heads", "mlp_dim", "max_len", "objective", "parallel_fraction",
              "share_dec_embeddings", "dec_biases", "reverse_prob", "blind")
TRAIN_KEYS = ("steps", "batch", "base_lr", "weight_decay", "warmup_steps",
              "seed", "freeze_mode", "reinit_xattn", "grad_clip",
              "batch_level_mixing")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def read_config_file(path) -> dict[str, str]:
    """key=value lines; '#' comments; unknown keys rejected by the caller."""
    out = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line is not key=value: {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _coerce(value: str):
    if value in ("True", "true"):
        return True
    if value in ("False", "false"):
        return False
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        return value


def _effective_header(sections: dict[str, dict]) -> str:
    lines = []
    for section, kv in sections.items():
        for key, value in kv.items():
            lines.append(f"# {section}.{key}={value}")
    return "\n".join(lines)


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


# -- commands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    if args.objects_min < 1 or args.objects_max > 3 \
            or args.objects_min > args.objects_max:
        raise ConfigError("need 1 <= objects-min <= objects-max <= 3")
    header = _effective_header({"gen": {
        "n": args.n, "seed": args.seed, "resolution": args.resolution,
        "objects_min": args.objects_min, "objects_max": args.objects_max,
        "noise": args.noise, "out": args.out}})
    print(header)
    examples = dg.gen_dataset(args.n, args.seed, args.resolution,
                              objects=(args.objects_min, args.objects_max),
                              noise=args.noise)
    dg.write_dataset(args.out, examples)
    vocab = tok.build_vocab([ex.caption for ex in examples])
    labels = {dg.class_label(ex.scene) for ex in examples}
    print(f"wrote {len(examples)} examples to {args.out}")
    print(f"vocab size {vocab.size} (incl 4 specials); "
          f"{len(labels)} distinct classes")
    return EXIT_OK


def _merged_settings(args) -> dict[str, str]:
    merged = {}
    if args.config:
        file_kv = read_config_file(_require_file(args.config, "config file"))
        known = set(MODEL_KEYS) | set(TRAIN_KEYS)
        for key in file_kv:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
        merged.update(file_kv)
    return merged


def cmd_train(args) -> int:
    data_path = _require_file(args.data, "dataset")
    examples = dg.read_dataset(data_path)
    if not examples:
        raise ConfigError("dataset is empty")
    vocab = tok.build_vocab([ex.caption for ex in examples])

    merged = _merged_settings(args)
    model_kw = {"vocab": vocab.size,
                "image_res": examples[0].image.shape[-1]}
    for key in MODEL_KEYS:
        if key in merged:
            model_kw[key] = _coerce(merged[key])
    flag_map = {"objective": args.objective, "parallel_fraction": args.parallel_fraction,
                "reverse_prob": args.reverse_prob, "dec_layers": args.dec_layers,
                "share_dec_embeddings": args.share_embeddings or None,
                "dec_biases": args.dec_biases or None, "blind": args.blind or None,
                "width": args.width, "enc_layers": args.enc_layers,
                "heads": args.heads, "mlp_dim": args.mlp_dim,
                "patch_size": args.patch_size, "max_len": args.max_len}
    for key, value in flag_map.items():
        if value is not None:
            model_kw[key] = value
    model_cfg = M.ModelConfig(**model_kw)

    train_kw = {}
    for key in TRAIN_KEYS:
        if key in merged:
            train_kw[key] = _coerce(merged[key])
    for key, value in (("steps", args.steps), ("batch", args.batch),
                       ("base_lr", args.lr), ("weight_decay", args.wd),
                       ("warmup_steps", args.warmup), ("seed", args.seed),
                       ("freeze_mode", args.freeze),
                       ("reinit_xattn", args.reinit_xattn or None),
                       ("grad_clip", args.grad_clip),
                       ("batch_level_mixing", args.batch_level_mixing or None)):
        if value is not None:
            train_kw[key] = value
    if "steps" not in train_kw:
        raise ConfigError("--steps is required (flag or config file)")
    train_cfg = TR.TrainConfig(**train_kw)

    print(_effective_header({
        "model": M.config_to_dict(model_cfg),
        "train": {k: getattr(train_cfg, k) for k in TRAIN_KEYS},
        "paths": {"data": args.data, "out_ckpt": args.out_ckpt,
                  "metrics": args.metrics, "vocab_out": args.vocab_out}}))

    resume = None
    if args.resume:
        resume = TR.load_checkpoint(_require_file(args.resume, "checkpoint"))
    result = TR.train(model_cfg, train_cfg, examples, vocab=vocab,
                      resume=resume)
    TR.save_checkpoint(args.out_ckpt, TR.checkpoint_from_result(result))
    tok.save_vocab(args.vocab_out, vocab)
    Path(args.metrics).write_text(TR.metrics_to_csv(result.metrics),
                                  encoding="utf-8")
    print(f"trained {len(result.metrics)} steps; "
          f"final loss {result.metrics[-1].loss:.6f}")
    print(f"checkpoint -> {args.out_ckpt}; vocab -> {args.vocab_out}; "
          f"metrics -> {args.metrics}")
    return EXIT_OK


def _load_ckpt_and_vocab(ckpt_path, vocab_path):
    ckpt = TR.load_checkpoint(_require_file(ckpt_path, "checkpoint"))
    vocab = tok.load_vocab(_require_file(vocab_path, "vocab file"))
    if vocab.size != ckpt.model_cfg.vocab:
        raise ConfigError(f"vocab size {vocab.size} does not match "
                          f"checkpoint vocab {ckpt.model_cfg.vocab}")
    params = {k: T.Tensor(a) for k, a in ckpt.params.items()}
    return ckpt, vocab, params


def cmd_eval(args) -> int:
    ckpt, vocab, params = _load_ckpt_and_vocab(args.ckpt, args.vocab)
    examples = dg.read_dataset(_require_file(args.data, "dataset"))
    kinds = tuple(args.kinds.split(",")) if args.kinds else dg.PERTURB_KINDS
    for kind in kinds:
        if kind not in dg.PERTURB_KINDS:
            raise ConfigError(f"unknown perturbation kind {kind!r}")
    cfg = ckpt.model_cfg
    print(_effective_header({"eval": {
        "ckpt": args.ckpt, "data": args.data, "kinds": ",".join(kinds),
        "seed": args.seed, "limit": args.limit, "out": args.out}}))
    if cfg.objective == "clip":
        scorers = {"contrastive": E.make_clip_scorer(cfg, params, vocab)}
    else:
        scorers = {
            f"{cfg.objective}-causal":
                E.make_caption_scorer(cfg, params, vocab, "causal"),
            f"{cfg.objective}-parallel":
                E.make_caption_scorer(cfg, params, vocab, "parallel"),
            "blind": E.make_blind_scorer(cfg, params, vocab),
        }
    report = E.perturbation_benchmark(scorers, examples, kinds=kinds,
                                      seed=args.seed, limit=args.limit)
    csv = report.to_csv()
    Path(args.out).write_text(csv, encoding="utf-8")
    print(csv, end="")
    print(f"report -> {args.out}")
    return EXIT_OK


def cmd_probe(args) -> int:
    ckpt, _, params = _load_ckpt_and_vocab(args.ckpt, args.vocab)
    examples = dg.read_dataset(_require_file(args.data, "dataset"))
    cfg = ckpt.model_cfg
    print(_effective_header({"probe": {
        "ckpt": args.ckpt, "data": args.data, "k": args.k,
        "probe": args.probe, "seed": args.seed, "out": args.out}}))
    images = np.stack([ex.image for ex in examples])
    labels = np.array([dg.class_label(ex.scene) for ex in examples])
    if args.probe == "map":
        feats = E.extract_sequences(cfg, params, images)
    else:
        mode = "prelogits" if cfg.objective == "clip" else "gap"
        feats = E.extract_features(cfg, params, images, mode=mode)
    result = E.kshot_probe(feats, labels, args.k, args.probe, args.seed)
    lines = ["metric,value", f"accuracy,{result.accuracy:.6f}"]
    for c in sorted(result.per_class):
        lines.append(f"class_{c}_accuracy,{result.per_class[c]:.6f}")
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"{args.probe} {args.k}-shot accuracy: {result.accuracy:.4f}")
    print(f"report -> {args.out}")
    return EXIT_OK


def cmd_score(args) -> int:
    ckpt, vocab, params = _load_ckpt_and_vocab(args.ckpt, args.vocab)
    cfg = ckpt.model_cfg
    if len(args.captions) < 1:
        raise ConfigError("at least one candidate caption is required")
    examples = dg.read_dataset(_require_file(args.data, "dataset"))
    if not 0 <= args.image_index < len(examples):
        raise ConfigError(f"--image-index {args.image_index} outside dataset "
                          f"of {len(examples)} examples")
    image = examples[args.image_index].image
    print(_effective_header({"score": {
        "ckpt": args.ckpt, "data": args.data, "image_index": args.image_index,
        "mode": args.mode, "candidates": len(args.captions)}}))
    if cfg.objective == "clip":
        with T.no_grad():
            img = M.image_embedding_batch(cfg, params, image[None]).data[0]
        txt = O.embed_texts_clip(cfg, params, vocab, list(args.captions))
        img = img / np.linalg.norm(img)
        txt = txt / np.linalg.norm(txt, axis=1, keepdims=True)
        scores = txt @ img
    else:
        scores = O.score_captions_batch(cfg, params, vocab, image,
                                        list(args.captions), args.mode)
    for caption, score in zip(args.captions, scores):
        print(f"{score:.6f}\t{caption}")
    best = int(np.argmax(scores))
    print(f"best: [{best}] {args.captions[best]}")
    return EXIT_OK


# -- wiring ------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="caplab",
                     description="captioning-vs-contrastive pretraining lab")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--resolution", type=int, default=32)
    g.add_argument("--objects-min", type=int, default=1)
    g.add_argument("--objects-max", type=int, default=3)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train cap/cappa/clip on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--objective", choices=M.OBJECTIVES, default=None)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--batch", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--wd", type=float, default=None)
    t.add_argument("--warmup", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--grad-clip", type=float, default=None)
    t.add_argument("--freeze", choices=TR.FREEZE_MODES, default=None)
    t.add_argument("--reinit-xattn", action="store_true")
    t.add_argument("--batch-level-mixing", action="store_true")
    t.add_argument("--parallel-fraction", type=float, default=None)
    t.add_argument("--reverse-prob", type=float, default=None)
    t.add_argument("--dec-layers", type=int, default=None)
    t.add_argument("--share-embeddings", action="store_true")
    t.add_argument("--dec-biases", action="store_true")
    t.add_argument("--blind", action="store_true")
    t.add_argument("--width", type=int, default=None)
    t.add_argument("--enc-layers", type=int, default=None)
    t.add_argument("--heads", type=int, default=None)
    t.add_argument("--mlp-dim", type=int, default=None)
    t.add_argument("--patch-size", type=int, default=None)
    t.add_argument("--max-len", type=int, default=None)
    t.add_argument("--resume", default=None)
    t.add_argument("--out-ckpt", required=True)
    t.add_argument("--vocab-out", required=True)
    t.add_argument("--metrics", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="perturbation benchmark on a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--vocab", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--kinds", default=None)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--limit", type=int, default=None)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    p = sub.add_parser("probe", help="k-shot probe on frozen features")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--probe", choices=E.PROBE_KINDS, default="linear")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_probe)

    s = sub.add_parser("score", help="log-likelihood scores for candidates")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--image-index", type=int, default=0)
    s.add_argument("--mode", choices=("causal", "parallel"), default="causal")
    s.add_argument("captions", nargs="+")
    s.set_defaults(fn=cmd_score)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, OOVError, LengthError, VocabError, PerturbError,
            FormatError, VersionError, InsufficientShots, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except CapLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
