"""Zero-shot evaluation over OOD-only or composite (seen + OOD) vocabularies."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .agents import LinguisticContextUnit, gc_temperature
from .datagen import EVAL_TEMPLATE, Benchmark, DatasetSplit, Tag
from .encoders import backbone_hash, render_prompt, tokenize
from .objectives import normalize_rows, zero_shot_probs
from .params import Ablation, AdapterParams


class VocabularyMode(str, Enum):
    OOD_ONLY = "OOD_ONLY"
    COMPOSITE = "COMPOSITE"


@dataclass
class EvalReport:
    mode: str
    per_class: dict[str, float]
    ood_top1: float
    sc_top1: float | None
    composite_top1: float | None
    n_test: int
    backbone_hash: str
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for v in (self.ood_top1, self.sc_top1, self.composite_top1, *self.per_class.values()):
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"accuracy {v} outside [0, 1]")

    def to_json(self) -> dict:
        return asdict(self)


ScoreFn = Callable[[np.ndarray, list[int]], np.ndarray]


def class_prompts(benchmark: Benchmark, classes: Sequence[int], params: AdapterParams | None):
    """Evaluation prompts ``(template, name, name_embedding|None, concept)`` for ``classes``."""
    out = []
    for c in classes:
        spec = benchmark.classes[c]
        emb, concept = None, -1
        if spec.tag is Tag.OOD and params is not None and Ablation.NO_NOM not in params.flags:
            concept = params.names.index(spec.name)
            emb = params.names.name_embedding(spec.name)
        out.append((EVAL_TEMPLATE, spec.name, emb, concept))
    return out


def text_embeddings(benchmark: Benchmark, classes: Sequence[int], params: AdapterParams | None) -> np.ndarray:
    prompts = class_prompts(benchmark, classes, params)
    if params is None:
        seqs = [benchmark.vocab.embed(_tokens(t, n)) for t, n, _, _ in prompts]
        return benchmark.text.forward(seqs)[0]
    ood = [benchmark.classes[i].name for i in benchmark.ood_indices]
    unit = LinguisticContextUnit(params, benchmark.text, benchmark.vocab, ood,
                                 [benchmark.classes[i].template for i in benchmark.ood_indices])
    return unit.encode(prompts, params.context)[0]


def _tokens(template: str, name: str) -> list[str]:
    return tokenize(render_prompt(template, name))


def predict(features: np.ndarray, text: np.ndarray, kappa: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Argmax (first index on ties) of the zero-shot softmax; returns (pred, probs).

    Identical text rows get bit-identical scores, so collapsed prompts tie exactly.
    """
    if len(text) == 0:
        raise ValueError("empty vocabulary")
    uniq, inverse = np.unique(text, axis=0, return_inverse=True)
    s = np.clip(normalize_rows(features) @ normalize_rows(uniq).T, -1.0, 1.0)[:, inverse.reshape(-1)]
    probs = zero_shot_probs(s, kappa)
    return np.argmax(s, axis=1), probs


def evaluate(benchmark: Benchmark, split: DatasetSplit, params: AdapterParams | None = None,
             mode: VocabularyMode | str = VocabularyMode.OOD_ONLY, config: dict | None = None,
             scores: ScoreFn | None = None) -> EvalReport:
    """Top-1 zero-shot accuracy on the split's test set.

    ``params=None`` evaluates the bare frozen backbone. ``scores`` replaces the
    model with an arbitrary (samples, classes) -> score matrix function.
    """
    mode = VocabularyMode(mode)
    ood = list(benchmark.ood_indices)
    vocab = ood if mode is VocabularyMode.OOD_ONLY else list(benchmark.seen_indices) + ood
    if not vocab:
        raise ValueError("empty vocabulary")
    ids = split.test_ids
    labels = np.array([c for _, c in split.test])
    keep = np.isin(labels, vocab)
    ids, labels = ids[keep], labels[keep]

    if scores is not None:
        s = np.asarray(scores(ids, vocab), dtype=np.float64)
        pred = np.argmax(s, axis=1)
    else:
        feats = benchmark.visual.encode_batch(benchmark.samples[ids])
        text = text_embeddings(benchmark, vocab, params)
        kappa = 1.0 if params is None or Ablation.NO_COORD in params.flags else gc_temperature(params.coordinator.kappa_param)
        pred, _ = predict(feats, text, kappa)
    correct = np.asarray(vocab)[pred] == labels

    per_class = {}
    for c in vocab:
        m = labels == c
        if m.any():
            per_class[benchmark.classes[c].name] = float(correct[m].mean())
    is_ood = np.isin(labels, ood)
    ood_acc = float(correct[is_ood].mean())
    sc_acc = comp = None
    if mode is VocabularyMode.COMPOSITE:
        sc_acc = float(correct[~is_ood].mean())
        comp = float(correct.mean())
    return EvalReport(mode.value, per_class, ood_acc, sc_acc, comp, int(len(ids)),
                      backbone_hash(benchmark.visual, benchmark.text, benchmark.vocab), dict(config or {}))


def aggregate(reports: Sequence[EvalReport]) -> dict[str, dict[str, float] | None]:
    """Mean and (population) std of each accuracy field across seeds."""
    out: dict[str, dict[str, float] | None] = {}
    for key in ("ood_top1", "sc_top1", "composite_top1"):
        vals = [getattr(r, key) for r in reports]
        if any(v is None for v in vals):
            out[key] = None
            continue
        a = np.asarray(vals, dtype=np.float64)
        out[key] = {"mean": float(a.mean()), "std": float(a.std()), "n": len(a)}
    return out
