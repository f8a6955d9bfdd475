"""Synthetic benchmark with seen and out-of-distribution classes.

Each class is an isotropic Gaussian cluster in raw space. Seen class names
are in the frozen vocabulary, with token vectors placed so that their prompts
land near the class's visual direction (a stand-in for pretraining).
OOD class names are built from syllables that never appear in the
vocabulary, so every OOD prompt collapses to the same all-UNK text embedding.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .encoders import FrozenTextEncoder, FrozenVisualEncoder, PretrainedVocab, PromptTemplate, tokenize

FORMAT_VERSION = 1
ALLOWED_SHOTS = (1, 2, 4, 8, 16)
MIN_TEST_PER_CLASS = 20

EVAL_TEMPLATE = "a photo of {}"

# Template owned by each OOD concept, in concept order (cycled if needed).
TEMPLATE_BANK = (
    "a photo of {}",
    "a painting of the {}",
    "a rough sketch of a {}",
    "a satellite image of {}",
    "a blurry close up of the {}",
    "an embroidered {}",
    "a low resolution rendering of a {}",
    "a tattoo of the {}",
    "a cartoon {}",
    "an origami {}",
    "a sculpture of a {}",
    "a pixelated image of the {}",
)

SEEN_NAMES = (
    "dog", "cat", "car", "tree", "house", "bird", "boat", "chair",
    "apple", "horse", "bridge", "clock", "lamp", "river", "guitar", "train",
    "flower", "shoe", "cup", "mountain", "bicycle", "book", "fish", "window",
)

_SYLLABLES = (
    "zor", "vex", "quil", "thra", "mok", "pry", "lun", "drax", "vel", "kesh",
    "yum", "brin", "ovo", "glim", "frak", "sul", "tez", "wirn", "jop", "nax",
)


class Tag(str, Enum):
    SEEN = "SEEN"
    OOD = "OOD"


class BenchmarkError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


class VersionError(DatasetFormatError):
    pass


class ChecksumError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class BenchmarkConfig:
    n_seen: int = 8
    n_ood: int = 8
    samples_per_class: int = 60
    d_raw: int = 32
    d_embed: int = 16
    d_tok: int | None = None
    mean_scale: float = 1.0
    spread: float = 0.7
    spread_jitter: float = 0.15
    separation: float = 2.0
    visual_gain: float = 0.9
    template_token_norm: float = 0.5
    unk_norm: float = 0.5
    seen_name_norm: float = 2.0
    alignment_noise: float = 0.15
    ood_name_tokens: int = 2

    @property
    def token_dim(self) -> int:
        return self.d_tok or self.d_embed

    def validate(self) -> None:
        if self.n_seen < 2 or self.n_ood < 2:
            raise BenchmarkError("need at least 2 seen and 2 OOD classes")
        if self.d_raw < 4:
            raise BenchmarkError("d_raw must be >= 4")
        if self.samples_per_class < ALLOWED_SHOTS[-1] + MIN_TEST_PER_CLASS:
            raise BenchmarkError("samples_per_class must be >= 36")
        if self.spread <= 0 or not 0 <= self.spread_jitter < 1:
            raise BenchmarkError("spread must be positive and jitter in [0, 1)")
        if self.ood_name_tokens < 1:
            raise BenchmarkError("ood_name_tokens must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkConfig":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class ClassSpec:
    name: str
    tag: Tag
    mean: np.ndarray
    spread: float
    n_samples: int
    template: str = EVAL_TEMPLATE

    def __eq__(self, other):
        if not isinstance(other, ClassSpec):
            return NotImplemented
        return (
            (self.name, self.tag, self.spread, self.n_samples, self.template)
            == (other.name, other.tag, other.spread, other.n_samples, other.template)
            and np.array_equal(self.mean, other.mean)
        )


@dataclass(eq=False)
class Benchmark:
    config: BenchmarkConfig
    seed: int
    classes: list[ClassSpec]
    samples: np.ndarray  # (n, d_raw)
    labels: np.ndarray  # (n,) class index
    visual: FrozenVisualEncoder
    text: FrozenTextEncoder
    vocab: PretrainedVocab

    @property
    def d_raw(self) -> int:
        return self.config.d_raw

    @property
    def d_embed(self) -> int:
        return self.config.d_embed

    @property
    def seen_indices(self) -> list[int]:
        return [i for i, c in enumerate(self.classes) if c.tag is Tag.SEEN]

    @property
    def ood_indices(self) -> list[int]:
        return [i for i, c in enumerate(self.classes) if c.tag is Tag.OOD]

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]

    def __eq__(self, other):
        if not isinstance(other, Benchmark):
            return NotImplemented
        return (
            self.config == other.config
            and self.seed == other.seed
            and self.classes == other.classes
            and np.array_equal(self.samples, other.samples)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.visual.weight, other.visual.weight)
            and np.array_equal(self.text.weight, other.text.weight)
            and self.vocab == other.vocab
        )


@dataclass(frozen=True)
class DatasetSplit:
    K: int
    train: tuple[tuple[int, int], ...]  # (sample_id, class index), OOD only
    test: tuple[tuple[int, int], ...]
    seed: int

    @property
    def train_ids(self) -> np.ndarray:
        return np.array([s for s, _ in self.train], dtype=np.int64)

    @property
    def test_ids(self) -> np.ndarray:
        return np.array([s for s, _ in self.test], dtype=np.int64)


def _f32(a: np.ndarray) -> np.ndarray:
    # everything persisted as float32 is rounded at birth so round trips are exact
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _random_direction(rng: np.random.Generator, d: int) -> np.ndarray:
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def _ood_names(rng: np.random.Generator, n: int, n_tokens: int, vocab_tokens: set[str]) -> list[str]:
    names: list[str] = []
    while len(names) < n:
        words = []
        for _ in range(n_tokens):
            k = int(rng.integers(2, 4))
            words.append("".join(_SYLLABLES[int(i)] for i in rng.integers(0, len(_SYLLABLES), size=k)))
        name = " ".join(words)
        if name not in names and not any(w in vocab_tokens for w in words):
            names.append(name)
    return names


def template_for(ood_rank: int) -> str:
    return TEMPLATE_BANK[ood_rank % len(TEMPLATE_BANK)]


def generate_benchmark(config: BenchmarkConfig | None = None, seed: int = 0) -> Benchmark:
    config = config or BenchmarkConfig()
    config.validate()
    rng = np.random.default_rng(seed)
    d_raw, d_embed, d_tok = config.d_raw, config.d_embed, config.token_dim
    n_cls = config.n_seen + config.n_ood

    w_v = _f32(rng.standard_normal((d_embed, d_raw)) * config.visual_gain / np.sqrt(d_raw))
    if d_tok == d_embed:
        q, r = np.linalg.qr(rng.standard_normal((d_embed, d_embed)))
        w_t = q * np.sign(np.diag(r))
    else:
        w_t = rng.standard_normal((d_embed, d_tok)) / np.sqrt(d_tok)
    w_t = _f32(w_t)

    spreads = config.spread * (1.0 + config.spread_jitter * rng.uniform(-1.0, 1.0, size=n_cls))
    spreads = _f32(spreads)
    min_sep = config.separation * float(spreads.max())
    for _ in range(1000):
        means = rng.standard_normal((n_cls, d_raw)) * config.mean_scale
        diff = means[:, None, :] - means[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        dist[np.diag_indices(n_cls)] = np.inf
        if dist.min() > min_sep:
            break
    else:
        raise BenchmarkError(
            f"could not place {n_cls} class means with separation > {min_sep:.3g} in 1000 attempts"
        )
    means = _f32(means)

    n_per = config.samples_per_class
    samples = np.concatenate(
        [means[c] + spreads[c] * rng.standard_normal((n_per, d_raw)) for c in range(n_cls)]
    )
    samples = _f32(samples)
    labels = np.repeat(np.arange(n_cls), n_per)

    # frozen vocabulary: template words, then seen names aligned to their clusters
    visual = FrozenVisualEncoder(w_v)
    text = FrozenTextEncoder(w_t)
    words: list[str] = []
    for t in (EVAL_TEMPLATE, *TEMPLATE_BANK):
        for w in tokenize(t.replace("{}", "")):
            if w not in words:
                words.append(w)
    tokens: dict[str, np.ndarray] = {}
    for w in words:
        tokens[w] = _f32(_random_direction(rng, d_tok) * config.template_token_norm)
    unk = _f32(_random_direction(rng, d_tok) * config.unk_norm)

    seen_names = [SEEN_NAMES[i % len(SEEN_NAMES)] + ("" if i < len(SEEN_NAMES) else str(i // len(SEEN_NAMES)))
                  for i in range(config.n_seen)]
    pinv_t = np.linalg.pinv(w_t)
    for c, name in enumerate(seen_names):
        corpus = means[c] + spreads[c] * rng.standard_normal((200, d_raw))
        u = visual.encode_batch(corpus).mean(axis=0)
        u = u / np.linalg.norm(u) + config.alignment_noise * rng.standard_normal(d_embed) / np.sqrt(d_embed)
        u = u / np.linalg.norm(u)
        tokens[name] = _f32(pinv_t @ (config.seen_name_norm * u))
    for v in tokens.values():
        v.setflags(write=False)
    unk.setflags(write=False)
    vocab = PretrainedVocab(tokens, unk, seed)

    ood_names = _ood_names(rng, config.n_ood, config.ood_name_tokens, set(tokens))
    classes = [
        ClassSpec(name, Tag.SEEN, means[c], float(spreads[c]), n_per, EVAL_TEMPLATE)
        for c, name in enumerate(seen_names)
    ]
    for k, name in enumerate(ood_names):
        c = config.n_seen + k
        classes.append(ClassSpec(name, Tag.OOD, means[c], float(spreads[c]), n_per, template_for(k)))
    for c in classes:
        c.mean.setflags(write=False)
    samples.setflags(write=False)
    labels.setflags(write=False)
    return Benchmark(config, seed, classes, samples, labels, visual, text, vocab)


def make_split(benchmark: Benchmark, K: int, seed: int) -> DatasetSplit:
    """K training samples per OOD class; everything else is test.

    Train sets for different K under the same seed are nested.
    """
    if K not in ALLOWED_SHOTS:
        raise ValueError(f"K must be one of {ALLOWED_SHOTS}, got {K}")
    rng = np.random.default_rng([seed, benchmark.seed])
    train: list[tuple[int, int]] = []
    held: set[int] = set()
    for c in benchmark.ood_indices:
        ids = np.flatnonzero(benchmark.labels == c)
        if len(ids) < K + MIN_TEST_PER_CLASS:
            raise ValueError(f"class {benchmark.classes[c].name!r} has too few samples for K={K}")
        picked = rng.permutation(ids)[:K]
        train.extend((int(s), c) for s in picked)
        held.update(int(s) for s in picked)
    test = tuple((int(s), int(benchmark.labels[s])) for s in range(len(benchmark.labels)) if s not in held)
    return DatasetSplit(K, tuple(train), test, seed)


# ---------------------------------------------------------------- persistence

def _sha(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def _canonical(d: dict) -> bytes:
    return json.dumps(d, sort_keys=True, separators=(",", ":")).encode()


def _sealed(d: dict) -> dict:
    out = dict(d)
    out["checksum"] = _sha(_canonical(d))
    return out


def _unseal(d: dict, what: str) -> dict:
    if d.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"{what}: unsupported format_version {d.get('format_version')!r}")
    body = {k: v for k, v in d.items() if k != "checksum"}
    if d.get("checksum") != _sha(_canonical(body)):
        raise ChecksumError(f"{what}: checksum mismatch")
    return body


def _encoder_blocks(b: Benchmark) -> list[tuple[str, np.ndarray]]:
    blocks = [("W_v", b.visual.weight), ("W_t", b.text.weight), ("unk", b.vocab.unk)]
    blocks += [(f"tok:{t}", v) for t, v in b.vocab.tokens.items()]
    return blocks


def split_filename(K: int, seed: int) -> str:
    return f"split_K{K}_s{seed}.json"


def save_split(split: DatasetSplit, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    body = {
        "format_version": FORMAT_VERSION,
        "K": split.K,
        "seed": split.seed,
        "train": [list(p) for p in split.train],
        "test": [list(p) for p in split.test],
    }
    out = path / split_filename(split.K, split.seed)
    out.write_text(json.dumps(_sealed(body)))
    return out


def load_split(file: str | Path) -> DatasetSplit:
    body = _unseal(json.loads(Path(file).read_text()), str(file))
    return DatasetSplit(
        body["K"],
        tuple((int(s), int(c)) for s, c in body["train"]),
        tuple((int(s), int(c)) for s, c in body["test"]),
        body["seed"],
    )


def save_benchmark(benchmark: Benchmark, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    sample_bytes = np.ascontiguousarray(benchmark.samples, dtype="<f4").tobytes()
    layout, chunks, offset = [], [], 0
    for name, arr in _encoder_blocks(benchmark):
        a = np.ascontiguousarray(arr, dtype="<f4")
        layout.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.size
    enc_bytes = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": benchmark.seed,
        "config": asdict(benchmark.config),
        "classes": [
            {
                "name": c.name,
                "tag": c.tag.value,
                "mean": [float(x) for x in c.mean],
                "spread": c.spread,
                "n_samples": c.n_samples,
                "template": c.template,
            }
            for c in benchmark.classes
        ],
        "labels": [int(x) for x in benchmark.labels],
        "samples": {"file": "samples.f32", "shape": list(benchmark.samples.shape), "sha256": _sha(sample_bytes)},
        "encoders": {"file": "encoders.f32", "layout": layout, "sha256": _sha(enc_bytes), "vocab_seed": benchmark.vocab.seed},
    }
    (path / "samples.f32").write_bytes(sample_bytes)
    (path / "encoders.f32").write_bytes(enc_bytes)
    (path / "manifest.json").write_text(json.dumps(_sealed(manifest), indent=1))


def load_benchmark(path: str | Path) -> Benchmark:
    path = Path(path)
    m = _unseal(json.loads((path / "manifest.json").read_text()), "manifest.json")
    sample_bytes = (path / m["samples"]["file"]).read_bytes()
    if _sha(sample_bytes) != m["samples"]["sha256"]:
        raise ChecksumError("samples.f32: checksum mismatch")
    enc_bytes = (path / m["encoders"]["file"]).read_bytes()
    if _sha(enc_bytes) != m["encoders"]["sha256"]:
        raise ChecksumError("encoders.f32: checksum mismatch")

    samples = np.frombuffer(sample_bytes, dtype="<f4").reshape(m["samples"]["shape"]).astype(np.float64)
    flat = np.frombuffer(enc_bytes, dtype="<f4")
    blocks: dict[str, np.ndarray] = {}
    for entry in m["encoders"]["layout"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        blocks[entry["name"]] = flat[entry["offset"]: entry["offset"] + n].reshape(entry["shape"]).astype(np.float64)
    for a in blocks.values():
        a.setflags(write=False)
    tokens = {k[4:]: v for k, v in blocks.items() if k.startswith("tok:")}
    vocab = PretrainedVocab(tokens, blocks["unk"], m["encoders"]["vocab_seed"])
    classes = []
    for c in m["classes"]:
        mean = np.array(c["mean"], dtype=np.float64)
        mean.setflags(write=False)
        classes.append(ClassSpec(c["name"], Tag(c["tag"]), mean, c["spread"], c["n_samples"], c["template"]))
    labels = np.array(m["labels"], dtype=np.int64)
    samples.setflags(write=False)
    labels.setflags(write=False)
    return Benchmark(
        BenchmarkConfig.from_dict(m["config"]),
        m["seed"],
        classes,
        samples,
        labels,
        FrozenVisualEncoder(blocks["W_v"]),
        FrozenTextEncoder(blocks["W_t"]),
        vocab,
    )


def save_dataset(benchmark: Benchmark, split: DatasetSplit | None, path: str | Path) -> None:
    save_benchmark(benchmark, path)
    if split is not None:
        save_split(split, path)


def load_dataset(path: str | Path, K: int | None = None, seed: int | None = None) -> tuple[Benchmark, DatasetSplit | None]:
    """Load a dataset directory and one of its splits.

    With no ``K``/``seed`` the directory must hold at most one split file.
    """
    path = Path(path)
    benchmark = load_benchmark(path)
    if K is not None and seed is not None:
        f = path / split_filename(K, seed)
        return benchmark, load_split(f) if f.exists() else None
    found = sorted(path.glob("split_K*_s*.json"))
    if K is not None:
        found = [f for f in found if f.name.startswith(f"split_K{K}_")]
    if not found:
        return benchmark, None
    if len(found) > 1:
        raise DatasetFormatError(f"{len(found)} split files in {path}; pass K and seed")
    return benchmark, load_split(found[0])
