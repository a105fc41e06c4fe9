"""Key-value retrieval sequence generators and dataset plumbing.

Both tasks build sequences from K/2 letter keys paired with digit values,
then a two-character ``??`` separator and a query key; the target is the
digit paired with the query. The interleaved layout puts each value right
after its key (``a1b2c3d4??b`` -> ``2``); the blocked layout presents all
keys first and then all values in the same order (``abcd1234??b`` -> ``2``),
which stretches both the association and retrieval distances with K.

Keys are drawn without replacement (a repeated key would make the answer
ambiguous); values are drawn with replacement. Split files are plain text:
a ``#task=... k=... seed=... split=...`` header line, then one
``<input>\t<target>`` line per example, UTF-8 with LF endings.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from fastweights.seeding import derive_seed

__all__ = [
    "DESK_SIZES",
    "FULL_SIZES",
    "Dataset",
    "Example",
    "SPLIT_NAMES",
    "TASK_KINDS",
    "Vocabulary",
    "VOCAB",
    "build_dataset",
    "decode",
    "encode",
    "encode_examples",
    "generate_example",
    "generate_examples",
    "layout_example",
    "load_dataset",
    "load_split",
    "save_dataset",
    "split_text",
]

TASK_KINDS = ("art", "mart")
SPLIT_NAMES = ("train", "validation", "test")

# desk-scale preset for one-hour runs; full preset mirrors the classic splits
DESK_SIZES = (20_000, 2_000, 2_000)
FULL_SIZES = (100_000, 10_000, 20_000)

_LETTERS = "abcdefghijklmnopqrstuvwxyz"
_DIGITS = "0123456789"
_QUERY = "?"


@dataclass(frozen=True)
class Vocabulary:
    """Fixed 37-symbol alphabet: letters 0-25, digits 26-35, '?' at 36."""

    symbols: str = _LETTERS + _DIGITS + _QUERY

    def __post_init__(self):
        if len(self.symbols) != len(set(self.symbols)):
            raise ValueError("vocabulary symbols must be unique")

    def __len__(self) -> int:
        return len(self.symbols)

    def index(self, symbol: str) -> int:
        i = self.symbols.find(symbol)
        if i < 0:
            raise KeyError(f"symbol {symbol!r} not in vocabulary")
        return i

    def symbol(self, index: int) -> str:
        return self.symbols[index]


VOCAB = Vocabulary()


@dataclass(frozen=True)
class Example:
    """One retrieval problem: the raw symbol sequence and its answer digit."""

    input: str
    target: str


@dataclass
class Dataset:
    task_kind: str
    k: int
    seed: int
    train: list[Example]
    validation: list[Example]
    test: list[Example]

    def split(self, name: str) -> list[Example]:
        if name not in SPLIT_NAMES:
            raise KeyError(f"unknown split {name!r}; expected one of {SPLIT_NAMES}")
        return getattr(self, "train" if name == "train" else name)

    @property
    def sizes(self) -> tuple[int, int, int]:
        return (len(self.train), len(self.validation), len(self.test))


def _check_task(kind: str, k: int) -> None:
    if kind not in TASK_KINDS:
        raise ValueError(f"unknown task kind {kind!r}; expected one of {TASK_KINDS}")
    if k % 2 != 0 or not 2 <= k <= 52:
        raise ValueError(f"K must be an even integer in [2, 52], got {k}")


def layout_example(kind: str, keys: Sequence[int], values: Sequence[int], query_index: int) -> Example:
    """Format drawn keys (letter indices 0-25), values (digits 0-9) and the
    queried pair position into a task string. Pure; the randomness lives in
    `generate_example`."""
    if len(keys) != len(values) or not keys:
        raise ValueError("keys and values must be non-empty and equal-length")
    key_chars = [_LETTERS[k] for k in keys]
    value_chars = [_DIGITS[v] for v in values]
    if kind == "art":
        body = "".join(k + v for k, v in zip(key_chars, value_chars))
    elif kind == "mart":
        body = "".join(key_chars) + "".join(value_chars)
    else:
        raise ValueError(f"unknown task kind {kind!r}")
    return Example(input=body + "??" + key_chars[query_index], target=value_chars[query_index])


def generate_example(kind: str, k: int, rng: np.random.Generator) -> Example:
    """Draw one example: K/2 distinct keys, K/2 digit values with
    replacement, and a uniformly chosen query pair."""
    _check_task(kind, k)
    pairs = k // 2
    keys = rng.choice(len(_LETTERS), size=pairs, replace=False)
    values = rng.integers(0, len(_DIGITS), size=pairs)
    query_index = int(rng.integers(0, pairs))
    return layout_example(kind, keys, values, query_index)


def generate_examples(kind: str, k: int, count: int, rng: np.random.Generator) -> list[Example]:
    return [generate_example(kind, k, rng) for _ in range(count)]


def build_dataset(kind: str, k: int, sizes: Sequence[int], seed: int) -> Dataset:
    """Three splits from independent sub-streams of `seed`; regenerating any
    split in isolation reproduces it byte-for-byte."""
    _check_task(kind, k)
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) != 3 or any(s <= 0 for s in sizes):
        raise ValueError(f"sizes must be three positive counts, got {sizes}")
    splits = {}
    for name, count in zip(SPLIT_NAMES, sizes):
        rng = np.random.default_rng(derive_seed(seed, f"split.{name}"))
        splits[name] = generate_examples(kind, k, count, rng)
    return Dataset(task_kind=kind, k=k, seed=seed,
                   train=splits["train"], validation=splits["validation"], test=splits["test"])


# -- encoding -----------------------------------------------------------


def encode(example: Example, vocab: Vocabulary = VOCAB) -> tuple[list[int], int]:
    """Symbol indices for the input plus the target index; raises on any
    symbol outside the vocabulary, naming its position."""
    indices = []
    for pos, ch in enumerate(example.input):
        try:
            indices.append(vocab.index(ch))
        except KeyError:
            raise KeyError(f"unknown symbol {ch!r} at position {pos}") from None
    if len(example.target) != 1:
        raise ValueError(f"target must be a single symbol, got {example.target!r}")
    return indices, vocab.index(example.target)


def decode(indices: Iterable[int], target_index: int, vocab: Vocabulary = VOCAB) -> Example:
    return Example(
        input="".join(vocab.symbol(i) for i in indices),
        target=vocab.symbol(target_index),
    )


def encode_examples(examples: Sequence[Example], vocab: Vocabulary = VOCAB):
    """Encode equal-length examples into an (n, L) int array plus targets."""
    if not examples:
        raise ValueError("cannot encode an empty split")
    lengths = {len(e.input) for e in examples}
    if len(lengths) != 1:
        raise ValueError(f"examples have mixed lengths {sorted(lengths)}")
    inputs = np.empty((len(examples), lengths.pop()), dtype=np.int64)
    targets = np.empty(len(examples), dtype=np.int64)
    for row, example in enumerate(examples):
        idx, t = encode(example, vocab)
        inputs[row] = idx
        targets[row] = t
    return inputs, targets


# -- text format ----------------------------------------------------------


def split_text(examples: Sequence[Example], kind: str, k: int, seed: int, split_name: str) -> str:
    header = f"#task={kind} k={k} seed={seed} split={split_name}\n"
    return header + "".join(f"{e.input}\t{e.target}\n" for e in examples)


def save_dataset(dataset: Dataset, out_dir) -> dict[str, Path]:
    """Write train/validation/test `.tsv` files into `out_dir`."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name in SPLIT_NAMES:
        path = out / f"{name}.tsv"
        text = split_text(dataset.split(name), dataset.task_kind, dataset.k, dataset.seed, name)
        path.write_text(text, encoding="utf-8", newline="\n")
        paths[name] = path
    return paths


def _parse_header(line: str, path) -> dict:
    if not line.startswith("#"):
        raise ValueError(f"{path}: missing header line")
    fields = dict(part.split("=", 1) for part in line[1:].split())
    missing = {"task", "k", "seed", "split"} - fields.keys()
    if missing:
        raise ValueError(f"{path}: header missing fields {sorted(missing)}")
    fields["k"] = int(fields["k"])
    fields["seed"] = int(fields["seed"])
    return fields


def load_split(path) -> tuple[list[Example], dict]:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"{path}: empty split file")
    header = _parse_header(lines[0], path)
    examples = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        try:
            text, target = line.split("\t")
        except ValueError:
            raise ValueError(f"{path}:{lineno}: expected '<input>\\t<target>'") from None
        examples.append(Example(input=text, target=target))
    return examples, header


def load_dataset(data_dir) -> Dataset:
    data_dir = Path(data_dir)
    splits, headers = {}, {}
    for name in SPLIT_NAMES:
        path = data_dir / f"{name}.tsv"
        if not path.exists():
            raise FileNotFoundError(f"missing split file {path}")
        splits[name], headers[name] = load_split(path)
    first = headers["train"]
    for name in SPLIT_NAMES:
        if (headers[name]["task"], headers[name]["k"]) != (first["task"], first["k"]):
            raise ValueError(f"{data_dir}: split headers disagree on task/k")
    return Dataset(task_kind=first["task"], k=first["k"], seed=first["seed"],
                   train=splits["train"], validation=splits["validation"], test=splits["test"])
