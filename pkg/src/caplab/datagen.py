"""Synthetic compositional image-caption generator.

Scenes place 1-3 flat-colored shapes on a 2x2 grid; a fixed grammar maps
each scene to one caption, so word order carries meaning (swapping two
object phrases yields a caption that is false for the scene). An
independent scene-semantics checker (`scene_satisfies`) validates every
perturbation rather than trusting string edits.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from .errors import FormatError, PerturbError, VersionError

SHAPES = ("circle", "cross", "square", "triangle")
COLORS = ("blue", "green", "red", "yellow")
COLOR_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
GRID = 2  # cells per side; cell index is row-major in [0, 4)

PERTURB_KINDS = ("order-swap", "attribute-swap", "relation-swap",
                 "object-replace", "add-attribute")

MAGIC = b"CAPD"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: int  # row-major cell on the 2x2 grid

    @property
    def row(self) -> int:
        return self.cell // GRID

    @property
    def col(self) -> int:
        return self.cell % GRID

    @property
    def phrase(self) -> str:
        return f"{self.color} {self.shape}"


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]

    def __post_init__(self):
        cells = [o.cell for o in self.objects]
        if not 1 <= len(cells) <= 3:
            raise ValueError("scene needs 1-3 objects")
        if len(set(cells)) != len(cells):
            raise ValueError("objects share a cell")

    def sorted_objects(self) -> tuple[SceneObject, ...]:
        """Canonical mention order: by (color, shape), ties by cell."""
        return tuple(sorted(self.objects, key=lambda o: (o.color, o.shape, o.cell)))


@dataclass(eq=False)
class Example:
    image: np.ndarray  # f32 [3, R, R] in [0, 1]
    caption: str
    scene: Scene

    def __eq__(self, other):
        return (isinstance(other, Example)
                and np.array_equal(self.image, other.image)
                and self.image.dtype == other.image.dtype
                and self.caption == other.caption
                and self.scene == other.scene)


@dataclass(frozen=True)
class PerturbedPair:
    positive: str
    negative: str
    kind: str


# -- grammar ---------------------------------------------------------------


def _relation_words(a: SceneObject, b: SceneObject) -> str:
    if a.row == b.row:
        return "left of" if a.col < b.col else "right of"
    return "above" if a.row < b.row else "below"


def caption_for_scene(scene: Scene) -> str:
    """The unique caption the grammar assigns to a scene (<= 9 words)."""
    objs = scene.sorted_objects()
    if len(objs) == 1:
        return objs[0].phrase
    head = f"{objs[0].phrase} {_relation_words(objs[0], objs[1])} {objs[1].phrase}"
    if len(objs) == 2:
        return head
    return f"{head} and {objs[2].phrase}"


def grammar_terminals() -> tuple[str, ...]:
    """All words any generated caption can contain."""
    return tuple(sorted(set(SHAPES) | set(COLORS)
                        | {"left", "right", "of", "above", "below", "and"}))


@dataclass(frozen=True)
class ParsedCaption:
    claims: tuple[tuple[str, str], ...]  # (color, shape) per mentioned object
    relation: str | None                 # between claims[0] and claims[1]


def parse_caption(caption: str) -> ParsedCaption | None:
    """Parse against the grammar; None when the string is not a production."""
    toks = caption.split()

    def obj_at(i):
        if i + 1 < len(toks) and toks[i] in COLORS and toks[i + 1] in SHAPES:
            return toks[i], toks[i + 1]
        return None

    first = obj_at(0)
    if first is None:
        return None
    if len(toks) == 2:
        return ParsedCaption((first,), None)
    i = 2
    if toks[i] in ("above", "below"):
        rel, i = toks[i], i + 1
    elif toks[i] in ("left", "right") and i + 1 < len(toks) and toks[i + 1] == "of":
        rel, i = f"{toks[i]} of", i + 2
    else:
        return None
    second = obj_at(i)
    if second is None:
        return None
    i += 2
    if i == len(toks):
        return ParsedCaption((first, second), rel)
    if toks[i] != "and":
        return None
    third = obj_at(i + 1)
    if third is None or i + 3 != len(toks):
        return None
    return ParsedCaption((first, second, third), rel)


def is_grammatical(caption: str) -> bool:
    return parse_caption(caption) is not None


def _relation_holds(rel: str, a: SceneObject, b: SceneObject) -> bool:
    if rel == "left of":
        return a.row == b.row and a.col < b.col
    if rel == "right of":
        return a.row == b.row and a.col > b.col
    if rel == "above":
        return a.row < b.row
    if rel == "below":
        return a.row > b.row
    raise ValueError(f"unknown relation {rel!r}")


def scene_satisfies(scene: Scene, caption: str) -> bool:
    """Existential semantics over injective object assignments.

    True iff the claimed objects can be matched one-to-one to distinct
    scene objects with matching color and shape, such that the relation
    (if any) holds between the first two matches. Unparseable captions
    are never satisfied.
    """
    parsed = parse_caption(caption)
    if parsed is None:
        return False
    objs = scene.objects
    if len(parsed.claims) > len(objs):
        return False
    # brute force over injective assignments (<= 3 claims, <= 3 objects)
    for perm in itertools.permutations(range(len(objs)), len(parsed.claims)):
        ok = all(objs[oi].color == c and objs[oi].shape == s
                 for oi, (c, s) in zip(perm, parsed.claims))
        if not ok:
            continue
        if parsed.relation is not None and not _relation_holds(
                parsed.relation, objs[perm[0]], objs[perm[1]]):
            continue
        return True
    return False


# -- rendering ---------------------------------------------------------------


def _shape_mask(shape: str, c: int) -> np.ndarray:
    y, x = np.mgrid[0:c, 0:c].astype(np.float64)
    ctr = (c - 1) / 2.0
    r = 0.35 * c
    if shape == "circle":
        return (y - ctr) ** 2 + (x - ctr) ** 2 <= r * r
    if shape == "square":
        return np.maximum(np.abs(y - ctr), np.abs(x - ctr)) <= 0.30 * c
    if shape == "triangle":
        top = ctr - r
        return (y >= top) & (y <= ctr + r) & (np.abs(x - ctr) <= 0.55 * (y - top))
    if shape == "cross":
        w = 0.12 * c
        arm = (np.abs(x - ctr) <= w) & (np.abs(y - ctr) <= r)
        return arm | ((np.abs(y - ctr) <= w) & (np.abs(x - ctr) <= r))
    raise ValueError(f"unknown shape {shape!r}")


def render_scene(scene: Scene, resolution: int = 32) -> np.ndarray:
    """Flat-colored shapes on a zero background; f32 [3, R, R]."""
    if resolution % GRID != 0:
        raise ValueError("resolution must be divisible by the grid size")
    c = resolution // GRID
    img = np.zeros((3, resolution, resolution), dtype=np.float32)
    for obj in scene.objects:
        mask = _shape_mask(obj.shape, c)
        rgb = COLOR_RGB[obj.color]
        r0, c0 = obj.row * c, obj.col * c
        for ch in range(3):
            img[ch, r0:r0 + c, c0:c0 + c][mask] = rgb[ch]
    return img


# -- generation ---------------------------------------------------------------


def _example_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def gen_dataset(n: int, seed: int, resolution: int = 32,
                objects: tuple[int, int] = (1, 3),
                noise: float = 0.0) -> list[Example]:
    """Deterministic dataset of `n` scene/image/caption examples.

    Each example draws from its own RNG stream keyed by (seed, index),
    so generation can be sharded by index without changing results.
    `noise` adds seeded uniform pixel noise for robustness experiments.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    lo, hi = objects
    out = []
    for i in range(n):
        rng = _example_rng(seed, i)
        k = int(rng.integers(lo, hi + 1))
        cells = rng.choice(GRID * GRID, size=k, replace=False)
        objs = tuple(SceneObject(shape=SHAPES[int(rng.integers(len(SHAPES)))],
                                 color=COLORS[int(rng.integers(len(COLORS)))],
                                 cell=int(cell))
                     for cell in cells)
        scene = Scene(objs)
        img = render_scene(scene, resolution)
        if noise > 0.0:
            img = np.clip(
                img + rng.uniform(-noise, noise, img.shape).astype(np.float32),
                0.0, 1.0)
        out.append(Example(image=img, caption=caption_for_scene(scene), scene=scene))
    return out


def class_label(scene: Scene) -> int:
    """color x shape class of the first canonical object (16 classes)."""
    obj = scene.sorted_objects()[0]
    return COLORS.index(obj.color) * len(SHAPES) + SHAPES.index(obj.shape)


def class_names() -> list[str]:
    return [f"{c} {s}" for c in COLORS for s in SHAPES]


# -- perturbations ---------------------------------------------------------


def _assemble(claims, relation) -> str:
    parts = [f"{claims[0][0]} {claims[0][1]}"]
    if len(claims) > 1:
        parts += [relation, f"{claims[1][0]} {claims[1][1]}"]
    if len(claims) > 2:
        parts += ["and", f"{claims[2][0]} {claims[2][1]}"]
    return " ".join(parts)


_INVERSE_REL = {"left of": "right of", "right of": "left of",
                "above": "below", "below": "above"}


def perturb(ex: Example, kind: str, seed: int) -> PerturbedPair:
    """Build a (true, false) caption pair of the requested kind.

    The negative is validated against the scene semantics; if the edit
    does not produce a false caption (or the kind does not apply to this
    example) PerturbError is raised.
    """
    if kind not in PERTURB_KINDS:
        raise PerturbError(f"unknown perturbation kind {kind!r}")
    parsed = parse_caption(ex.caption)
    if parsed is None:
        raise PerturbError("caption does not parse")
    claims = list(parsed.claims)
    rng = np.random.default_rng([seed, PERTURB_KINDS.index(kind)])

    if kind == "order-swap":
        if len(claims) < 2:
            raise PerturbError("order-swap needs two mentioned objects")
        if claims[0] == claims[1]:
            raise PerturbError("order-swap needs distinct object phrases")
        claims[0], claims[1] = claims[1], claims[0]
        negative = _assemble(claims, parsed.relation)
    elif kind == "attribute-swap":
        if len(claims) < 2:
            raise PerturbError("attribute-swap needs two mentioned objects")
        (c0, s0), (c1, s1) = claims[0], claims[1]
        if c0 == c1:
            raise PerturbError("attribute-swap needs distinct colors")
        claims[0], claims[1] = (c1, s0), (c0, s1)
        negative = _assemble(claims, parsed.relation)
    elif kind == "relation-swap":
        if parsed.relation is None:
            raise PerturbError("relation-swap needs a relation")
        negative = _assemble(claims, _INVERSE_REL[parsed.relation])
    elif kind == "object-replace":
        color, shape = claims[0]
        present = {(o.color, o.shape) for o in ex.scene.objects}
        options = [s for s in SHAPES if s != shape and (color, s) not in present]
        if not options:
            raise PerturbError("no absent shape available for replacement")
        claims[0] = (color, options[int(rng.integers(len(options)))])
        negative = _assemble(claims, parsed.relation)
    else:  # add-attribute
        if len(claims) != 2:
            raise PerturbError("add-attribute needs exactly two mentioned objects")
        present = {(o.color, o.shape) for o in ex.scene.objects}
        options = [(c, s) for c in COLORS for s in SHAPES if (c, s) not in present]
        extra = options[int(rng.integers(len(options)))]
        negative = _assemble(claims + [extra], parsed.relation)

    if negative == ex.caption:
        raise PerturbError("perturbation left the caption unchanged")
    if scene_satisfies(ex.scene, negative):
        raise PerturbError(f"{kind} produced a caption that is true for the scene")
    return PerturbedPair(positive=ex.caption, negative=negative, kind=kind)


def shuffle_ungrammatical(caption: str, rng: np.random.Generator,
                          max_tries: int = 64) -> str:
    """Random word permutation that is not a grammar production."""
    words = caption.split()
    for _ in range(max_tries):
        perm = list(rng.permutation(len(words)))
        shuffled = " ".join(words[i] for i in perm)
        if shuffled != caption and not is_grammatical(shuffled):
            return shuffled
    raise PerturbError("could not find an ungrammatical shuffle")


# -- file format -------------------------------------------------------------


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError("dataset file truncated")
    return buf


def write_dataset(path, examples: list[Example]) -> None:
    """CAPD container: little-endian, images as raw f32, scenes by index."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(examples)))
        for ex in examples:
            r = ex.image.shape[-1]
            f.write(struct.pack("<I", r))
            f.write(ex.image.astype("<f4", copy=False).tobytes())
            cap = ex.caption.encode("utf-8")
            f.write(struct.pack("<I", len(cap)))
            f.write(cap)
            f.write(struct.pack("<I", len(ex.scene.objects)))
            for obj in ex.scene.objects:
                f.write(struct.pack("<BBB", SHAPES.index(obj.shape),
                                    COLORS.index(obj.color), obj.cell))


def read_dataset(path) -> list[Example]:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != MAGIC:
            raise FormatError(f"{path} is not a CAPD dataset (bad magic)")
        version, count = struct.unpack("<II", _read_exact(f, 8))
        if version != FORMAT_VERSION:
            raise VersionError(f"unsupported dataset version {version}")
        out = []
        for _ in range(count):
            (r,) = struct.unpack("<I", _read_exact(f, 4))
            img = np.frombuffer(_read_exact(f, 3 * r * r * 4), dtype="<f4")
            img = img.reshape(3, r, r).copy()
            (clen,) = struct.unpack("<I", _read_exact(f, 4))
            caption = _read_exact(f, clen).decode("utf-8")
            (nobj,) = struct.unpack("<I", _read_exact(f, 4))
            objs = []
            for _ in range(nobj):
                si, ci, cell = struct.unpack("<BBB", _read_exact(f, 3))
                objs.append(SceneObject(SHAPES[si], COLORS[ci], cell))
            out.append(Example(image=img, caption=caption, scene=Scene(tuple(objs))))
        if f.read(1):
            raise FormatError("trailing bytes after dataset payload")
    return out
