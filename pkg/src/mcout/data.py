"""Procedural multimodal question-answering data.

A scene is a ``grid_size x grid_size`` board; each occupied cell holds one
colored shape rendered into a ``cell_size x cell_size`` pixel block. The
question is templated from the scene description and the answer is computed
by :func:`oracle_answer` from that description alone, never from pixels.

Task kinds
----------
count           "how many red squares are there ?"                 -> "3"
spatial         "is the red square left of the blue circle ?"      -> "yes"
attribute       "what color is the triangle ?"                     -> "green"
multihop        "how many red objects are left of the blue circle ?" -> "2"

``multihop`` composes a relation lookup with a count.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ContractError

TASKS = ("count", "spatial", "attribute", "multihop")
RELATIONS = ("left of", "right of", "above", "below")
CHOICE_LETTERS = "abcde"

PALETTE = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
    "magenta": (255, 0, 255),
    "cyan": (0, 255, 255),
    "white": (255, 255, 255),
    "orange": (255, 128, 0),
}

SHAPES = {
    "square": ["1111", "1111", "1111", "1111"],
    "circle": ["0110", "1111", "1111", "0110"],
    "triangle": ["1000", "1100", "1110", "1111"],
    "cross": ["1001", "0110", "0110", "1001"],
    "bar": ["0000", "1111", "1111", "0000"],
}
PLURALS = {"square": "squares", "circle": "circles", "triangle": "triangles", "cross": "crosses", "bar": "bars"}


# ---------------------------------------------------------------- tokenizer
SPECIAL_TOKENS = ("<pad>", "<eos>", "<unk>")
PAD_ID, EOS_ID, UNK_ID = 0, 1, 2
_WORDS = (
    "how many are there is the what color shape object objects left right of above below "
    "yes no options ? :"
).split()


def _build_vocab():
    words = list(SPECIAL_TOKENS) + _WORDS
    words += [str(i) for i in range(26)]
    words += list(PALETTE) + list(SHAPES) + list(PLURALS.values())
    words += list(CHOICE_LETTERS)
    seen, vocab = set(), []
    for w in words:
        if w not in seen:
            seen.add(w)
            vocab.append(w)
    return vocab


class Tokenizer:
    """Word-level tokenizer over the fixed task vocabulary."""

    _split = re.compile(r"[a-z0-9<>]+|[^\sa-z0-9]")

    def __init__(self):
        self.vocab = _build_vocab()
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.pad_id, self.eos_id, self.unk_id = PAD_ID, EOS_ID, UNK_ID

    def __len__(self):
        return len(self.vocab)

    def tokenize(self, text):
        return self._split.findall(text.lower())

    def encode(self, text):
        return [self.index.get(w, self.unk_id) for w in self.tokenize(text)]

    def decode(self, ids):
        return " ".join(self.vocab[i] if 0 <= i < len(self.vocab) else "<unk>" for i in ids
                        if i not in (self.pad_id, self.eos_id))


# ---------------------------------------------------------------- generation
@dataclass
class DatasetSpec:
    task: str = "count"
    grid_size: int = 4
    cell_size: int = 4
    n_samples: int = 1000
    seed: int = 0
    answer_mode: str = "open"
    n_choices: int = 4
    max_objects: int = 8
    max_count: int = 4
    colors: tuple = ("red", "green", "blue", "yellow")
    shapes: tuple = ("square", "circle", "triangle", "cross")

    def __post_init__(self):
        self.colors = tuple(self.colors)
        self.shapes = tuple(self.shapes)
        self.validate()

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.answer_mode not in ("open", "choice"):
            raise ConfigError(f"answer_mode must be 'open' or 'choice', got {self.answer_mode!r}")
        if self.cell_size < 4 or self.cell_size % 4:
            raise ConfigError(f"cell_size must be a positive multiple of 4, got {self.cell_size}")
        unknown = [c for c in self.colors if c not in PALETTE] + [s for s in self.shapes if s not in SHAPES]
        if unknown:
            raise ConfigError(f"unknown colors/shapes: {unknown}")
        if len(self.colors) < 2 or len(self.shapes) < 2:
            raise ConfigError("need at least two colors and two shapes")
        cells = self.grid_size * self.grid_size
        if self.max_objects > cells:
            raise ConfigError(f"grid {self.grid_size}x{self.grid_size} too small for {self.max_objects} objects")
        if self.task == "count" and self.max_count > self.max_objects:
            raise ConfigError(f"max_count {self.max_count} exceeds max_objects {self.max_objects}")
        if self.task in ("spatial", "multihop") and self.max_objects < 2:
            raise ConfigError(f"task {self.task!r} needs max_objects >= 2")
        if not 2 <= self.n_choices <= len(CHOICE_LETTERS):
            raise ConfigError(f"n_choices must be in [2, {len(CHOICE_LETTERS)}]")
        if self.n_samples < 0:
            raise ConfigError("n_samples must be >= 0")

    @property
    def image_size(self):
        return self.grid_size * self.cell_size

    def to_dict(self):
        d = asdict(self)
        d["colors"], d["shapes"] = list(self.colors), list(self.shapes)
        return d


@dataclass
class SyntheticSample:
    id: int
    image: np.ndarray
    question: str
    answer: str
    meta: dict
    choices: list = None

    def to_record(self):
        rec = {"id": self.id, "image": self.image.tolist(), "question": self.question, "answer": self.answer}
        if self.choices is not None:
            rec["choices"] = list(self.choices)
        rec["meta"] = self.meta
        return rec

    @classmethod
    def from_record(cls, rec):
        image = np.asarray(rec["image"], dtype=np.uint8)
        return cls(rec["id"], image, rec["question"], rec["answer"], rec["meta"], rec.get("choices"))


def render(meta):
    """Pixels (H x W x 3, uint8) as a pure function of the scene description."""
    g, c = meta["grid_size"], meta["cell_size"]
    img = np.zeros((g * c, g * c, 3), dtype=np.uint8)
    rep = c // 4
    for obj in meta["objects"]:
        pattern = np.array([[ch == "1" for ch in row] for row in SHAPES[obj["shape"]]])
        pattern = np.kron(pattern, np.ones((rep, rep), dtype=bool))
        block = img[obj["row"] * c:(obj["row"] + 1) * c, obj["col"] * c:(obj["col"] + 1) * c]
        block[pattern] = PALETTE[obj["color"]]
    return img


def _holds(rel, a, b):
    if rel == "left of":
        return a["col"] < b["col"]
    if rel == "right of":
        return a["col"] > b["col"]
    if rel == "above":
        return a["row"] < b["row"]
    if rel == "below":
        return a["row"] > b["row"]
    raise ContractError(f"unknown relation {rel!r}")


def _find(objects, color, shape):
    hits = [o for o in objects if o["color"] == color and o["shape"] == shape]
    if len(hits) != 1:
        raise ContractError(f"reference to the {color} {shape} is not unique ({len(hits)} matches)")
    return hits[0]


def raw_answer(meta):
    """Ground truth for the scene/question, before multiple-choice lettering."""
    task, q, objects = meta["task"], meta["query"], meta["objects"]
    if task == "count":
        return str(sum(o["color"] == q["color"] and o["shape"] == q["shape"] for o in objects))
    if task == "spatial":
        a = _find(objects, q["color_a"], q["shape_a"])
        b = _find(objects, q["color_b"], q["shape_b"])
        return "yes" if _holds(q["relation"], a, b) else "no"
    if task == "attribute":
        if q["ask"] == "color":
            hits = [o for o in objects if o["shape"] == q["shape"]]
            key = "color"
        else:
            hits = [o for o in objects if o["color"] == q["color"]]
            key = "shape"
        if len(hits) != 1:
            raise ContractError("attribute query does not identify a unique object")
        return hits[0][key]
    if task == "multihop":
        anchor = _find(objects, q["anchor_color"], q["anchor_shape"])
        return str(sum(
            o is not anchor and o["color"] == q["color"] and _holds(q["relation"], o, anchor)
            for o in objects
        ))
    raise ContractError(f"unknown task kind {task!r}")


def oracle_answer(meta):
    """Recompute the stored answer from the scene description."""
    ans = raw_answer(meta)
    if meta.get("choices") is not None:
        return CHOICE_LETTERS[meta["choices"].index(ans)]
    return ans


def question_text(meta):
    task, q = meta["task"], meta["query"]
    if task == "count":
        text = f"how many {q['color']} {PLURALS[q['shape']]} are there ?"
    elif task == "spatial":
        text = f"is the {q['color_a']} {q['shape_a']} {q['relation']} the {q['color_b']} {q['shape_b']} ?"
    elif task == "attribute":
        if q["ask"] == "color":
            text = f"what color is the {q['shape']} ?"
        else:
            text = f"what shape is the {q['color']} object ?"
    else:
        text = f"how many {q['color']} objects are {q['relation']} the {q['anchor_color']} {q['anchor_shape']} ?"
    if meta.get("choices") is not None:
        opts = " ".join(f"{CHOICE_LETTERS[i]} {c}" for i, c in enumerate(meta["choices"]))
        text += f" options : {opts}"
    return text


def answer_domain(spec: DatasetSpec):
    if spec.task == "count":
        return [str(i) for i in range(spec.max_count + 1)]
    if spec.task == "multihop":
        return [str(i) for i in range(spec.max_objects)]
    if spec.task == "spatial":
        return ["yes", "no"]
    return None  # attribute: depends on what is asked


def _pick(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def _scene(spec, rng):
    cells = spec.grid_size * spec.grid_size
    order = rng.permutation(cells)
    slots = iter((int(i) // spec.grid_size, int(i) % spec.grid_size) for i in order)
    objects = []

    def place(color, shape):
        r, c = next(slots)
        objects.append({"row": r, "col": c, "color": color, "shape": shape})

    pairs = [(c, s) for c in spec.colors for s in spec.shapes]
    if spec.task == "count":
        color, shape = _pick(rng, spec.colors), _pick(rng, spec.shapes)
        n_target = int(rng.integers(spec.max_count + 1))
        n_other = int(rng.integers(spec.max_objects - n_target + 1))
        for _ in range(n_target):
            place(color, shape)
        others = [p for p in pairs if p != (color, shape)]
        for _ in range(n_other):
            place(*_pick(rng, others))
        query = {"color": color, "shape": shape}
    elif spec.task == "spatial":
        ia, ib = rng.choice(len(pairs), size=2, replace=False)
        a, b = pairs[int(ia)], pairs[int(ib)]
        place(*a)
        place(*b)
        others = [p for p in pairs if p not in (a, b)]
        for _ in range(int(rng.integers(spec.max_objects - 1))):
            place(*_pick(rng, others))
        query = {"color_a": a[0], "shape_a": a[1], "relation": _pick(rng, RELATIONS),
                 "color_b": b[0], "shape_b": b[1]}
    elif spec.task == "attribute":
        color, shape = _pick(rng, spec.colors), _pick(rng, spec.shapes)
        place(color, shape)
        if rng.random() < 0.5:
            query = {"ask": "color", "shape": shape}
            others = [p for p in pairs if p[1] != shape]
        else:
            query = {"ask": "shape", "color": color}
            others = [p for p in pairs if p[0] != color]
        for _ in range(int(rng.integers(spec.max_objects))):
            place(*_pick(rng, others))
    else:  # multihop
        anchor = pairs[int(rng.integers(len(pairs)))]
        place(*anchor)
        color = _pick(rng, [c for c in spec.colors if c != anchor[0]])
        others = [p for p in pairs if p != anchor]
        for _ in range(int(rng.integers(1, spec.max_objects))):
            place(*_pick(rng, others))
        query = {"color": color, "relation": _pick(rng, RELATIONS),
                 "anchor_color": anchor[0], "anchor_shape": anchor[1]}
    return objects, query


def generate_sample(spec: DatasetSpec, index):
    """Sample ``index`` of the dataset; depends only on ``(spec, index)``."""
    rng = np.random.default_rng([spec.seed, index])
    objects, query = _scene(spec, rng)
    meta = {
        "task": spec.task,
        "grid_size": spec.grid_size,
        "cell_size": spec.cell_size,
        "objects": objects,
        "query": query,
        "seed": [spec.seed, index],
    }
    choices = None
    if spec.answer_mode == "choice":
        correct = raw_answer(meta)
        domain = answer_domain(spec)
        if domain is None:
            domain = list(spec.colors) if query["ask"] == "color" else list(spec.shapes)
        k = min(spec.n_choices, len(domain))
        pool = [d for d in domain if d != correct]
        distractors = [pool[int(i)] for i in rng.choice(len(pool), size=k - 1, replace=False)]
        choices = distractors + [correct]
        choices = [choices[int(i)] for i in rng.permutation(k)]
        meta["choices"] = choices
    return SyntheticSample(index, render(meta), question_text(meta), oracle_answer(meta), meta, choices)


def generate_dataset(spec: DatasetSpec):
    spec.validate()
    return [generate_sample(spec, i) for i in range(spec.n_samples)]


# ---------------------------------------------------------------- JSON lines
def save_jsonl(samples, path):
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record(), separators=(",", ":")))
            fh.write("\n")


def load_jsonl(path):
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                samples.append(SyntheticSample.from_record(json.loads(line)))
            except (KeyError, ValueError) as exc:
                raise ContractError(f"{path}:{lineno}: malformed sample record ({exc})") from exc
    return samples


def images_as_floats(samples):
    return np.stack([s.image for s in samples]).astype(np.float64) / 255.0
