"""Trainable adapter parameters, ablation flags and their on-disk format."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator

import numpy as np

from .encoders import PromptTemplate

ADAPTER_FORMAT_VERSION = 1


class Ablation(str, Enum):
    NO_VISUAL = "NO_VISUAL"
    NO_LING = "NO_LING"
    NO_NOM = "NO_NOM"
    NO_COORD = "NO_COORD"
    NO_CTX_EXCH = "NO_CTX_EXCH"
    SIMPLE_CONCAT = "SIMPLE_CONCAT"
    NO_DIFF = "NO_DIFF"
    NO_DYNBAL = "NO_DYNBAL"


def parse_flags(flags) -> frozenset[Ablation]:
    out = set()
    for f in flags or ():
        if isinstance(f, Ablation):
            out.add(f)
            continue
        try:
            out.add(Ablation(str(f).upper()))
        except ValueError:
            raise ValueError(f"unknown ablation flag {f!r}") from None
    return frozenset(out)


@dataclass
class VisualUnitParams:
    theta1: np.ndarray  # (hidden, d_embed)
    b1: np.ndarray  # (hidden,)
    theta2: np.ndarray  # (1, hidden)
    b2: np.ndarray  # (1,)
    beta: float = 0.5
    tau_lo: float = 0.33
    tau_hi: float = 0.66

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if not 0.0 < self.tau_lo < self.tau_hi < 1.0:
            raise ValueError("thresholds must satisfy 0 < tau_lo < tau_hi < 1")


@dataclass
class LinguisticUnitParams:
    theta3: np.ndarray  # (hidden, 2 d_embed)
    b3: np.ndarray
    theta4: np.ndarray  # (d_embed, hidden)
    b4: np.ndarray
    lam: float = 0.7
    # SIMPLE_CONCAT replacement for the two-layer fusion: a single linear map
    concat_w: np.ndarray | None = None  # (d_embed, 2 d_embed)
    concat_b: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")


@dataclass
class NameTable:
    concepts: list[str]
    vectors: np.ndarray  # (n_concepts, n_c, d_tok)
    templates: list[PromptTemplate]

    def __post_init__(self):
        if len(set(self.concepts)) != len(self.concepts):
            raise ValueError("duplicate concept names")
        if self.vectors.ndim != 3 or self.vectors.shape[0] != len(self.concepts) or self.vectors.shape[1] < 1:
            raise ValueError("vectors must be (n_concepts, n_c >= 1, d_tok)")

    @property
    def n_c(self) -> int:
        return self.vectors.shape[1]

    def index(self, concept: str) -> int:
        try:
            return self.concepts.index(concept)
        except ValueError:
            raise KeyError(f"concept {concept!r} not in name table") from None

    def name_embedding(self, concept: str) -> np.ndarray:
        return self.vectors[self.index(concept)].mean(axis=0)


@dataclass
class CoordinatorParams:
    kappa_param: np.ndarray  # (1,)
    w_con_param: np.ndarray  # (1,)
    w_cls_param: np.ndarray  # (1,)


@dataclass
class AdapterParams:
    visual: VisualUnitParams
    linguistic: LinguisticUnitParams
    names: NameTable
    coordinator: CoordinatorParams
    theta_cls: np.ndarray  # (n_ood, d_embed)
    flags: frozenset[Ablation] = frozenset()
    # visual context held by the linguistic unit after the last training round
    context: np.ndarray | None = None
    per_sample_difficulty: bool = False

    def trainable(self) -> Iterator[tuple[str, np.ndarray]]:
        """Named views of every trainable array; updates must be in place."""
        v, l, c = self.visual, self.linguistic, self.coordinator
        yield "vpu.theta1", v.theta1
        yield "vpu.b1", v.b1
        yield "vpu.theta2", v.theta2
        yield "vpu.b2", v.b2
        if Ablation.SIMPLE_CONCAT in self.flags:
            yield "lcu.concat_w", l.concat_w
            yield "lcu.concat_b", l.concat_b
        else:
            yield "lcu.theta3", l.theta3
            yield "lcu.b3", l.b3
            yield "lcu.theta4", l.theta4
            yield "lcu.b4", l.b4
        yield "neu.names", self.names.vectors
        yield "coord.kappa_param", c.kappa_param
        yield "coord.w_con_param", c.w_con_param
        yield "coord.w_cls_param", c.w_cls_param
        yield "head.theta_cls", self.theta_cls

    def arrays(self) -> dict[str, np.ndarray]:
        return dict(self.trainable())

    def copy(self) -> "AdapterParams":
        l = self.linguistic
        return AdapterParams(
            VisualUnitParams(
                self.visual.theta1.copy(), self.visual.b1.copy(), self.visual.theta2.copy(), self.visual.b2.copy(),
                self.visual.beta, self.visual.tau_lo, self.visual.tau_hi,
            ),
            LinguisticUnitParams(
                l.theta3.copy(), l.b3.copy(), l.theta4.copy(), l.b4.copy(), l.lam,
                None if l.concat_w is None else l.concat_w.copy(),
                None if l.concat_b is None else l.concat_b.copy(),
            ),
            NameTable(list(self.names.concepts), self.names.vectors.copy(), list(self.names.templates)),
            CoordinatorParams(
                self.coordinator.kappa_param.copy(),
                self.coordinator.w_con_param.copy(),
                self.coordinator.w_cls_param.copy(),
            ),
            self.theta_cls.copy(),
            self.flags,
            None if self.context is None else self.context.copy(),
            self.per_sample_difficulty,
        )

    def round_to_f32(self) -> None:
        for _, a in self.trainable():
            a[...] = a.astype(np.float32)
        if self.context is not None:
            self.context = self.context.astype(np.float32).astype(np.float64)

    def _blocks(self) -> list[tuple[str, np.ndarray]]:
        blocks = list(self.trainable())
        if self.context is not None:
            blocks.append(("state.context", self.context))
        return blocks

    def _meta(self) -> dict:
        return {
            "flags": sorted(f.value for f in self.flags),
            "beta": self.visual.beta,
            "tau_lo": self.visual.tau_lo,
            "tau_hi": self.visual.tau_hi,
            "lambda": self.linguistic.lam,
            "per_sample_difficulty": self.per_sample_difficulty,
            "concepts": list(self.names.concepts),
            "templates": [[t.text, t.owner_concept] for t in self.names.templates],
            "hidden": int(self.visual.theta1.shape[0]),
        }

    def content_hash(self) -> str:
        h = hashlib.sha256(json.dumps(self._meta(), sort_keys=True).encode())
        for name, a in self._blocks():
            h.update(name.encode())
            h.update(np.ascontiguousarray(a, dtype="<f4").tobytes())
        return h.hexdigest()

    def save(self, directory: str | Path, backbone_hash: str) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        layout, chunks, off = [], [], 0
        for name, a in self._blocks():
            a32 = np.ascontiguousarray(a, dtype="<f4")
            layout.append({"name": name, "shape": list(a.shape), "offset": off})
            chunks.append(a32.tobytes())
            off += a32.size
        blob = b"".join(chunks)
        (directory / "adapter.f32").write_bytes(blob)
        meta = {
            "format_version": ADAPTER_FORMAT_VERSION,
            **self._meta(),
            "layout": layout,
            "sha256": hashlib.sha256(blob).hexdigest(),
            "content_hash": self.content_hash(),
            "backbone_hash": backbone_hash,
        }
        (directory / "adapter.json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, directory: str | Path) -> tuple["AdapterParams", str]:
        """Returns (params, stored backbone hash)."""
        directory = Path(directory)
        meta = json.loads((directory / "adapter.json").read_text())
        if meta.get("format_version") != ADAPTER_FORMAT_VERSION:
            raise ValueError(f"unsupported adapter format_version {meta.get('format_version')!r}")
        blob = (directory / "adapter.f32").read_bytes()
        if hashlib.sha256(blob).hexdigest() != meta["sha256"]:
            raise ValueError("adapter.f32: checksum mismatch")
        flat = np.frombuffer(blob, dtype="<f4")
        arr = {}
        for e in meta["layout"]:
            n = int(np.prod(e["shape"])) if e["shape"] else 1
            arr[e["name"]] = flat[e["offset"]: e["offset"] + n].reshape(e["shape"]).astype(np.float64)
        flags = parse_flags(meta["flags"])
        p = cls(
            VisualUnitParams(arr["vpu.theta1"], arr["vpu.b1"], arr["vpu.theta2"], arr["vpu.b2"],
                             meta["beta"], meta["tau_lo"], meta["tau_hi"]),
            LinguisticUnitParams(
                arr.get("lcu.theta3", np.zeros((0, 0))), arr.get("lcu.b3", np.zeros(0)),
                arr.get("lcu.theta4", np.zeros((0, 0))), arr.get("lcu.b4", np.zeros(0)),
                meta["lambda"], arr.get("lcu.concat_w"), arr.get("lcu.concat_b"),
            ),
            NameTable(meta["concepts"], arr["neu.names"], [PromptTemplate(t, o) for t, o in meta["templates"]]),
            CoordinatorParams(arr["coord.kappa_param"], arr["coord.w_con_param"], arr["coord.w_cls_param"]),
            arr["head.theta_cls"],
            flags,
            arr.get("state.context"),
            meta["per_sample_difficulty"],
        )
        if p.content_hash() != meta["content_hash"]:
            raise ValueError("adapter content hash mismatch")
        return p, meta["backbone_hash"]


@dataclass(frozen=True)
class AdapterConfig:
    hidden: int | None = None  # defaults to d_embed
    n_c: int = 2
    beta: float = 0.5
    lam: float = 0.7
    tau_lo: float = 0.33
    tau_hi: float = 0.66
    difficulty_prior: float = 0.8
    name_init_scale: float = 0.02
    per_sample_difficulty: bool = False
    kappa_init: float = 1.0
    w_con_init: float = 0.75
    w_cls_init: float = 0.75


def init_adapter(
    concepts: list[str],
    templates: list[PromptTemplate],
    unk: np.ndarray,
    d_embed: int,
    config: AdapterConfig,
    seed: int,
    flags=(),
) -> AdapterParams:
    from .agents import neu_init_concepts  # late import: agents depends on this module

    flags = parse_flags(flags)
    rng = np.random.default_rng([seed, 0x5E])
    h = config.hidden or d_embed
    prior = config.difficulty_prior
    visual = VisualUnitParams(
        rng.standard_normal((h, d_embed)) / np.sqrt(d_embed),
        np.zeros(h),
        rng.standard_normal((1, h)) * 0.1 / np.sqrt(h),
        np.array([np.log(prior / (1.0 - prior))]),
        config.beta,
        config.tau_lo,
        config.tau_hi,
    )
    ling = LinguisticUnitParams(
        rng.standard_normal((h, 2 * d_embed)) / np.sqrt(2 * d_embed),
        np.zeros(h),
        rng.standard_normal((d_embed, h)) * 0.1 / np.sqrt(h),
        np.zeros(d_embed),
        config.lam,
    )
    if Ablation.SIMPLE_CONCAT in flags:
        ling.concat_w = rng.standard_normal((d_embed, 2 * d_embed)) * 0.1 / np.sqrt(2 * d_embed)
        ling.concat_b = np.zeros(d_embed)
    names = neu_init_concepts(concepts, config.n_c, int(rng.integers(2**31)), unk=unk,
                              scale=config.name_init_scale, templates=templates)
    coord = CoordinatorParams(np.array([config.kappa_init]), np.array([config.w_con_init]), np.array([config.w_cls_init]))
    theta_cls = np.zeros((len(concepts), d_embed))
    return AdapterParams(visual, ling, names, coord, theta_cls, flags,
                         per_sample_difficulty=config.per_sample_difficulty)
