"""Ablation table, shot curve and embedding dumps."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .datagen import ALLOWED_SHOTS, Benchmark, make_split
from .evaluation import VocabularyMode, evaluate, text_embeddings
from .params import Ablation, parse_flags
from .training import TrainConfig, train_few_shot

# (label, flags) in the order the table is reported
VARIANTS: tuple[tuple[str, tuple[Ablation, ...]], ...] = (
    ("Full SynerNet", ()),
    ("w/o Visual Unit", (Ablation.NO_VISUAL,)),
    ("w/o Linguistic Unit", (Ablation.NO_LING,)),
    ("w/o Nominal Unit", (Ablation.NO_NOM,)),
    ("w/o Coordinator", (Ablation.NO_COORD,)),
    ("w/o Context Exchange", (Ablation.NO_CTX_EXCH,)),
    ("Simple Concatenation", (Ablation.SIMPLE_CONCAT,)),
    ("w/o Difficulty Est.", (Ablation.NO_DIFF,)),
    ("w/o Dyn. Bal.", (Ablation.NO_DYNBAL,)),
)
AGENT_REMOVALS = ("w/o Visual Unit", "w/o Linguistic Unit", "w/o Nominal Unit", "w/o Coordinator")


@dataclass
class AblationRow:
    variant: str
    flags: tuple[str, ...]
    mean: float
    std: float
    drop: float
    ood_mean: float
    sc_mean: float
    per_seed: tuple[float, ...]

    def csv_row(self) -> dict:
        return {
            "variant": self.variant,
            "flags": "+".join(self.flags) or "-",
            "composite_mean": f"{self.mean:.6f}",
            "composite_std": f"{self.std:.6f}",
            "drop": f"{self.drop:.6f}",
            "ood_mean": f"{self.ood_mean:.6f}",
            "sc_mean": f"{self.sc_mean:.6f}",
            "per_seed": " ".join(f"{x:.6f}" for x in self.per_seed),
        }


def _run_one(args) -> tuple[float, float, float]:
    benchmark, K, seed, base, flags = args
    split = make_split(benchmark, K, seed)
    cfg = replace(base, K=K, seed=seed, ablation_flags=flags)
    result = train_few_shot(benchmark, split, cfg, trace_rounds="none")
    r = evaluate(benchmark, split, result.params, VocabularyMode.COMPOSITE)
    return r.composite_top1, r.ood_top1, r.sc_top1


def run_ablation(benchmark: Benchmark, K: int = 16, seeds: Sequence[int] = range(5),
                 base: TrainConfig | None = None, workers: int = 1,
                 variants: Sequence[tuple[str, Sequence]] = VARIANTS) -> list[AblationRow]:
    """Composite accuracy of every variant over ``seeds`` (split seed = train seed)."""
    base = base or TrainConfig(K=K)
    seeds = list(seeds)
    variants = [(name, parse_flags(f)) for name, f in variants]
    jobs = [(benchmark, K, s, base, flags) for _, flags in variants for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]

    rows = []
    n = len(seeds)
    for v, (name, flags) in enumerate(variants):
        res = np.asarray(results[v * n:(v + 1) * n])
        rows.append(AblationRow(name, tuple(sorted(f.value for f in flags)), float(res[:, 0].mean()),
                                float(res[:, 0].std()), 0.0, float(res[:, 1].mean()), float(res[:, 2].mean()),
                                tuple(float(x) for x in res[:, 0])))
    full = rows[0].mean
    for r in rows:
        r.drop = full - r.mean
    return rows


def write_ablation_csv(rows: Sequence[AblationRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].csv_row()))
        w.writeheader()
        for r in rows:
            w.writerow(r.csv_row())


def shots_curve(benchmark: Benchmark, seeds: Sequence[int] = (0, 1, 2), shots: Sequence[int] = ALLOWED_SHOTS,
                base: TrainConfig | None = None) -> list[dict]:
    """OOD_ONLY accuracy against K, one row per K with mean and std over seeds."""
    base = base or TrainConfig()
    rows = []
    for K in shots:
        accs = []
        for s in seeds:
            split = make_split(benchmark, K, s)
            res = train_few_shot(benchmark, split, replace(base, K=K, seed=s), trace_rounds="none")
            accs.append(evaluate(benchmark, split, res.params, VocabularyMode.OOD_ONLY).ood_top1)
        a = np.asarray(accs)
        rows.append({"K": K, "ood_mean": float(a.mean()), "ood_std": float(a.std()),
                     "per_seed": [float(x) for x in a]})
    return rows


def write_shots_csv(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["K", "ood_mean", "ood_std", "per_seed"])
        for r in rows:
            w.writerow([r["K"], f"{r['ood_mean']:.6f}", f"{r['ood_std']:.6f}",
                        " ".join(f"{x:.6f}" for x in r["per_seed"])])


def dump_embeddings(benchmark: Benchmark, split, params, directory: str | Path) -> Path:
    """Write test image embeddings and class text embeddings (before and after adaptation).

    ``embeddings_dump.f32`` holds the rows back to back; ``embeddings_dump.json``
    indexes them by block with shapes, labels and class names.
    """
    directory = Path(directory)
    classes = list(benchmark.seen_indices) + list(benchmark.ood_indices)
    ids = split.test_ids
    blocks = [
        ("image", benchmark.visual.encode_batch(benchmark.samples[ids]), [int(c) for _, c in split.test]),
        ("text_untrained", text_embeddings(benchmark, classes, None), classes),
    ]
    if params is not None:
        blocks.append(("text_trained", text_embeddings(benchmark, classes, params), classes))
    index, chunks, off = [], [], 0
    for name, arr, labels in blocks:
        a = np.ascontiguousarray(arr, dtype="<f4")
        index.append({"block": name, "offset": off, "shape": list(a.shape), "labels": labels})
        chunks.append(a.tobytes())
        off += a.size
    (directory / "embeddings_dump.f32").write_bytes(b"".join(chunks))
    meta = {"classes": [{"index": c, "name": benchmark.classes[c].name, "tag": benchmark.classes[c].tag.value}
                        for c in classes], "blocks": index}
    (directory / "embeddings_dump.json").write_text(json.dumps(meta, indent=1))
    return directory / "embeddings_dump.f32"
