"""The four cooperating agents and the operations they are built from.

Every agent is a pure step function ``(inputs, state) -> (outputs, state')``.
Agents never mutate parameters; the training loop does that between rounds.
Gradients are hand-derived: only the linguistic path (fusion MLP, text
encoder, injected name vectors) and the coordinator scalars carry them.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Mapping, Sequence

import numpy as np

from .encoders import (
    Embedding,
    FrozenTextEncoder,
    FrozenVisualEncoder,
    Modality,
    PretrainedVocab,
    PromptTemplate,
    TextCache,
    render_prompt,
    tokenize,
)
from .messaging import (
    AgentId,
    Context,
    Features,
    Message,
    MessageBus,
    Metadata,
    ProtocolError,
    Strategy,
)
from .objectives import balance_weights
from .params import (
    Ablation,
    AdapterParams,
    CoordinatorParams,
    LinguisticUnitParams,
    NameTable,
    VisualUnitParams,
)

KAPPA_BOUNDS = (0.5, 2.0)


class DegenerateFeatureError(ValueError):
    pass


class EncodingStrategy(str, Enum):
    STANDARD = "STANDARD"
    ROBUST = "ROBUST"
    ROBUST_AUGMENTED = "ROBUST_AUGMENTED"


class TextMode(str, Enum):
    STANDARD = "STANDARD"
    CONTEXTUAL = "CONTEXTUAL"


@dataclass(frozen=True)
class AgentState:
    agent_id: AgentId
    step_counter: int = 0
    memory: Mapping[str, Any] = field(default_factory=dict)

    def advanced(self, **memory) -> "AgentState":
        return AgentState(self.agent_id, self.step_counter + 1, {**self.memory, **memory})


# ------------------------------------------------------------ visual unit

def robust_features(e: np.ndarray, beta: float) -> np.ndarray:
    """Row-wise ``e/||e|| + beta * detach(e)``."""
    e = np.asarray(e, dtype=np.float64)
    norms = np.linalg.norm(e, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateFeatureError("zero-norm visual feature cannot be robustly encoded")
    return e / norms + beta * e


def robust_jacobian(e: np.ndarray) -> np.ndarray:
    """d robust_features / d e for one vector; the residual is detached."""
    e = np.asarray(e, dtype=np.float64)
    n = np.linalg.norm(e)
    if n == 0.0:
        raise DegenerateFeatureError("zero-norm visual feature cannot be robustly encoded")
    u = e / n
    return (np.eye(len(e)) - np.outer(u, u)) / n


def vpu_encode(z: np.ndarray, mode: EncodingStrategy | str, params: VisualUnitParams,
               encoder: FrozenVisualEncoder) -> Embedding:
    e = encoder.encode_image(z).values
    mode = EncodingStrategy(mode)
    if mode is EncodingStrategy.STANDARD:
        return Embedding(e, Modality.VISUAL)
    return Embedding(robust_features(e, params.beta), Modality.VISUAL)


def estimate_difficulty(batch_features, params: VisualUnitParams, per_sample: bool = False) -> np.ndarray:
    """Difficulty score per sample, ``sigmoid(Θ2 relu(Θ1 x + b1) + b2)``.

    In the default (literal) mode ``x`` is the batch-mean feature and the
    single score is broadcast; ``per_sample`` scores each row separately.
    """
    feats = np.asarray(
        [f.values if isinstance(f, Embedding) else f for f in batch_features], dtype=np.float64
    )
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise ValueError("difficulty needs a non-empty batch of features")
    x = feats if per_sample else feats.mean(axis=0, keepdims=True)
    hidden = np.maximum(x @ params.theta1.T + params.b1, 0.0)
    logit = (hidden @ params.theta2.T).ravel() + params.b2[0]
    delta = 1.0 / (1.0 + np.exp(-logit))
    return delta if per_sample else np.full(feats.shape[0], delta[0])


def select_strategy(delta: float, tau_lo: float = 0.33, tau_hi: float = 0.66) -> EncodingStrategy:
    if delta < tau_lo:
        return EncodingStrategy.STANDARD
    if delta < tau_hi:
        return EncodingStrategy.ROBUST
    return EncodingStrategy.ROBUST_AUGMENTED


# -------------------------------------------------------- linguistic unit

def ctx_integrate(h: np.ndarray, params: LinguisticUnitParams) -> np.ndarray:
    """``Θ4 relu(Θ3 h + b3) + b4``, row-wise for a batch of ``h``."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != params.theta3.shape[1]:
        raise ValueError(f"h must have dimension {params.theta3.shape[1]}, got {h.shape[-1]}")
    a = np.maximum(h @ params.theta3.T + params.b3, 0.0)
    return a @ params.theta4.T + params.b4


def ctx_integrate_backward(h: np.ndarray, params: LinguisticUnitParams, d_out: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of ``sum(d_out * ctx_integrate(h))`` for a batch of rows."""
    h2 = np.atleast_2d(h)
    d2 = np.atleast_2d(d_out)
    z = h2 @ params.theta3.T + params.b3
    a = np.maximum(z, 0.0)
    dz = (d2 @ params.theta4) * (z > 0.0)
    dh = dz @ params.theta3
    return {
        "theta4": d2.T @ a,
        "b4": d2.sum(axis=0),
        "theta3": dz.T @ h2,
        "b3": dz.sum(axis=0),
        "h": dh.reshape(np.shape(h)),
    }


def _fuse(h: np.ndarray, params: LinguisticUnitParams, simple_concat: bool) -> np.ndarray:
    if simple_concat:
        return h @ params.concat_w.T + params.concat_b
    return ctx_integrate(h, params)


def lcu_encode(token_vectors: np.ndarray, mode: TextMode | str, context: Embedding | np.ndarray | None,
               params: LinguisticUnitParams, encoder: FrozenTextEncoder, simple_concat: bool = False) -> Embedding:
    psi = encoder.encode_text(token_vectors)
    mode = TextMode(mode)
    if mode is TextMode.STANDARD:
        return psi
    if context is None:
        raise ProtocolError("contextual encoding requires a CONTEXT message from the visual unit")
    c = context.values if isinstance(context, Embedding) else np.asarray(context, dtype=np.float64)
    if params.lam == 1.0:
        return Embedding(psi.values.copy(), Modality.TEXT, normalized=True)
    g = _fuse(np.concatenate([psi.values, c]), params, simple_concat)
    return Embedding(params.lam * psi.values + (1.0 - params.lam) * g, Modality.TEXT)


# ---------------------------------------------------------- nominal unit

def neu_init_concepts(ood_names: Sequence[str], n_c: int, seed: int, unk: np.ndarray | None = None,
                      scale: float = 0.02, templates: Sequence[PromptTemplate] = (), d_tok: int | None = None) -> NameTable:
    """``n_c`` vectors per concept, each UNK plus N(0, scale^2) noise."""
    if n_c < 1:
        raise ValueError("n_c must be >= 1")
    if len(set(ood_names)) != len(ood_names):
        raise ValueError("duplicate concept names")
    if unk is None:
        if d_tok is None:
            raise ValueError("need unk or d_tok")
        unk = np.zeros(d_tok)
    rng = np.random.default_rng(seed)
    vectors = unk[None, None, :] + scale * rng.standard_normal((len(ood_names), n_c, len(unk)))
    return NameTable(list(ood_names), vectors, list(templates))


def name_span(template: PromptTemplate | str, name: str) -> tuple[int, int]:
    """Token positions [start, stop) occupied by ``name`` in the rendered prompt."""
    text = template.text if isinstance(template, PromptTemplate) else template
    prefix = text.split("{}", 1)[0]
    start = len(tokenize(prefix))
    return start, start + len(tokenize(name))


def build_sequence(template: PromptTemplate | str, name: str, vocab: PretrainedVocab,
                   name_embedding: np.ndarray | None = None) -> tuple[np.ndarray, int]:
    """Token vectors for ``template(name)``; returns (vectors, #injected positions)."""
    tokens = tokenize(render_prompt(template, name))
    seq = vocab.embed(tokens).copy()
    if name_embedding is None:
        return seq, 0
    start, stop = name_span(template, name)
    seq[start:stop] = name_embedding
    return seq, stop - start


def neu_generate_prompt(concept: str, table: NameTable, template: PromptTemplate | str,
                        vocab: PretrainedVocab) -> np.ndarray:
    seq, _ = build_sequence(template, concept, vocab, table.name_embedding(concept))
    return seq


def _bank_by_concept(concepts: Sequence[str], template_bank) -> dict[str, list[str]]:
    if isinstance(template_bank, Mapping):
        bank = {c: [t.text if isinstance(t, PromptTemplate) else t for t in
                    (ts if isinstance(ts, (list, tuple)) else [ts])] for c, ts in template_bank.items()}
    else:
        bank = {}
        for t in template_bank:
            if not isinstance(t, PromptTemplate) or t.owner_concept is None:
                raise ValueError("template bank entries need an owner concept")
            bank.setdefault(t.owner_concept, []).append(t.text)
    if not bank:
        raise ValueError("empty template bank")
    for c in concepts:
        if not bank.get(c):
            raise ValueError(f"no template for concept {c!r}")
    return bank


def neu_context_exchange(concepts: Sequence[str], template_bank) -> list[tuple[str, str]]:
    """Standard descriptions plus every template of every other concept applied to each concept."""
    bank = _bank_by_concept(concepts, template_bank)
    out: list[tuple[str, str]] = []
    for c in concepts:
        out.extend((c, render_prompt(t, c)) for t in bank[c])
        for other in concepts:
            if other != c:
                out.extend((c, render_prompt(t, c)) for t in bank[other])
    return out


# ------------------------------------------------------------ coordinator

def gc_temperature(kappa_param) -> float:
    lo, hi = KAPPA_BOUNDS
    return float(np.clip(np.asarray(kappa_param, dtype=np.float64).reshape(-1)[0], lo, hi))


def clip_grad(x: float, lo: float, hi: float) -> float:
    return 1.0 if lo < x < hi else 0.0


# ------------------------------------------------------------ agents

@dataclass(frozen=True)
class Description:
    concept: int
    template: str
    group: int


@dataclass
class AgentOutput:
    messages: list[Message]
    values: dict[str, Any]


@dataclass(frozen=True)
class Batch:
    raw: np.ndarray  # (n, d_raw)
    concepts: np.ndarray  # (n,) index into the concept list


class VisualPerceptionUnit:
    agent_id = AgentId.VISUAL

    def __init__(self, params: AdapterParams, encoder: FrozenVisualEncoder):
        self.params = params
        self.encoder = encoder

    def step(self, inputs: tuple[np.ndarray, int], state: AgentState) -> tuple[AgentOutput, AgentState]:
        raw, step_index = inputs
        p = self.params
        flags = p.flags
        e = self.encoder.encode_batch(raw)
        if Ablation.NO_VISUAL in flags:
            msgs = [Message(AgentId.VISUAL, AgentId.COORDINATOR,
                            Features(tuple(Embedding(r, Modality.VISUAL) for r in e)), step_index)]
            out = AgentOutput(msgs, {"features": e, "phi": e, "strategy": EncodingStrategy.STANDARD,
                                     "delta": None, "context": None})
            return out, state.advanced()

        if Ablation.NO_DIFF in flags:
            delta = np.full(len(e), np.nan)
            tiers = [EncodingStrategy.ROBUST] * len(e)
        else:
            delta = estimate_difficulty(e, p.visual, per_sample=p.per_sample_difficulty)
            tiers = [select_strategy(d, p.visual.tau_lo, p.visual.tau_hi) for d in delta]
        phi = np.array(e, copy=True)
        robust = np.array([t is not EncodingStrategy.STANDARD for t in tiers])
        if robust.any():
            phi[robust] = robust_features(e[robust], p.visual.beta)
        strategy = max(tiers, key=lambda t: list(EncodingStrategy).index(t))
        unit = phi / np.linalg.norm(phi, axis=1, keepdims=True)
        context = unit.mean(axis=0)
        batch_delta = float(np.nan if Ablation.NO_DIFF in flags else delta.max())

        feats = Features(tuple(Embedding(r, Modality.VISUAL) for r in phi))
        strat = Strategy(strategy.value, batch_delta)
        msgs = [
            Message(AgentId.VISUAL, AgentId.LINGUISTIC, Context(Embedding(context, Modality.VISUAL)), step_index),
            Message(AgentId.VISUAL, AgentId.NOMINAL, strat, step_index),
            Message(AgentId.VISUAL, AgentId.COORDINATOR, strat, step_index),
            Message(AgentId.VISUAL, AgentId.COORDINATOR, feats, step_index),
        ]
        prev = state.memory.get("feature_mean")
        n_prev = state.memory.get("n_batches", 0)
        bmean = e.mean(axis=0)
        running = bmean if prev is None else (prev * n_prev + bmean) / (n_prev + 1)
        out = AgentOutput(msgs, {"features": e, "phi": phi, "strategy": strategy, "delta": delta, "context": context})
        return out, state.advanced(feature_mean=running, n_batches=n_prev + 1)


class NominalEmbeddingUnit:
    agent_id = AgentId.NOMINAL

    def __init__(self, params: AdapterParams, own_templates: Sequence[str], zero_shot: bool = False):
        self.params = params
        self.own_templates = list(own_templates)
        self.zero_shot = zero_shot

    def descriptions(self, strategy: EncodingStrategy) -> list[Description]:
        concepts = self.params.names.concepts
        exchange = (strategy is EncodingStrategy.ROBUST_AUGMENTED
                    and Ablation.NO_CTX_EXCH not in self.params.flags) or self.zero_shot
        if not exchange:
            return [Description(i, self.own_templates[i], 0) for i in range(len(concepts))]
        # same set as neu_context_exchange, grouped by template so each group
        # holds every concept once; zero-shot drops the standard descriptions
        return [
            Description(i, t, g)
            for g, t in enumerate(self.own_templates)
            for i in range(len(concepts))
            if not (self.zero_shot and g == i)
        ]

    def step(self, inputs: tuple[list[Message], int], state: AgentState) -> tuple[AgentOutput, AgentState]:
        inbound, step_index = inputs
        strategy = EncodingStrategy.STANDARD
        for m in inbound:
            if isinstance(m.payload, Strategy):
                strategy = EncodingStrategy(m.payload.tag)
        descs = self.descriptions(strategy)
        names = self.params.names
        name_embs = names.vectors.mean(axis=1)
        meta = Metadata(
            tuple((f"concept:{i}", c) for i, c in enumerate(names.concepts))
            + tuple((f"desc:{k}", f"{d.concept}\t{d.group}\t{d.template}") for k, d in enumerate(descs))
        )
        feats = Features(tuple(Embedding(v, Modality.TEXT) for v in name_embs))
        msgs = [
            Message(AgentId.NOMINAL, AgentId.LINGUISTIC, meta, step_index),
            Message(AgentId.NOMINAL, AgentId.LINGUISTIC, feats, step_index),
            Message(AgentId.NOMINAL, AgentId.COORDINATOR, meta, step_index),
        ]
        out = AgentOutput(msgs, {"descriptions": descs, "exchange": any(d.group for d in descs) or self.zero_shot})
        return out, state.advanced(last_strategy=strategy.value)


def parse_descriptions(meta: Metadata) -> tuple[list[str], list[Description]]:
    d = meta.as_dict()
    concepts = [d[k] for k in sorted((k for k in d if k.startswith("concept:")), key=lambda k: int(k.split(":")[1]))]
    descs = []
    for k in sorted((k for k in d if k.startswith("desc:")), key=lambda k: int(k.split(":")[1])):
        c, g, t = d[k].split("\t", 2)
        descs.append(Description(int(c), t, int(g)))
    return concepts, descs


@dataclass
class LinguisticCache:
    text: TextCache
    concept_of: np.ndarray  # (P,) concept index or -1 for non-injected prompts
    n_injected: np.ndarray  # (P,) name positions per prompt
    contextual: bool
    h: np.ndarray | None
    n_concepts: int


class LinguisticContextUnit:
    agent_id = AgentId.LINGUISTIC

    def __init__(self, params: AdapterParams, encoder: FrozenTextEncoder, vocab: PretrainedVocab,
                 concepts: Sequence[str], own_templates: Sequence[str]):
        self.params = params
        self.encoder = encoder
        self.vocab = vocab
        self.concepts = list(concepts)
        self.own_templates = list(own_templates)

    @property
    def simple_concat(self) -> bool:
        return Ablation.SIMPLE_CONCAT in self.params.flags

    def encode(self, prompts: Sequence[tuple[str, str, np.ndarray | None, int]],
               context: np.ndarray | None) -> tuple[np.ndarray, LinguisticCache]:
        """Encode ``(template, name, name_embedding|None, concept_idx)`` prompts.

        Contextual fusion is used when ``context`` is given and the unit is
        not ablated; otherwise plain frozen-encoder outputs are returned.
        """
        seqs, counts, owners = [], [], []
        for template, name, emb, concept in prompts:
            seq, n = build_sequence(template, name, self.vocab, emb)
            seqs.append(seq)
            counts.append(n)
            owners.append(concept if emb is not None else -1)
        psi, tcache = self.encoder.forward(seqs)
        contextual = context is not None and Ablation.NO_LING not in self.params.flags
        h = None
        out = psi
        lam = self.params.linguistic.lam
        if contextual:
            h = np.concatenate([psi, np.broadcast_to(context, psi.shape)], axis=1)
            g = _fuse(h, self.params.linguistic, self.simple_concat)
            out = lam * psi + (1.0 - lam) * g
        cache = LinguisticCache(tcache, np.array(owners), np.array(counts, dtype=np.float64), contextual, h,
                                len(self.concepts))
        return out, cache

    def backward(self, cache: LinguisticCache, d_out: np.ndarray) -> dict[str, np.ndarray]:
        lp = self.params.linguistic
        grads: dict[str, np.ndarray] = {}
        d_psi = d_out
        if cache.contextual:
            d_g = (1.0 - lp.lam) * d_out
            d_psi = lp.lam * d_out
            if self.simple_concat:
                grads["lcu.concat_w"] = d_g.T @ cache.h
                grads["lcu.concat_b"] = d_g.sum(axis=0)
                dh = d_g @ lp.concat_w
            else:
                g = ctx_integrate_backward(cache.h, lp, d_g)
                grads.update({f"lcu.{k}": v for k, v in g.items() if k != "h"})
                dh = g["h"]
            d_psi = d_psi + dh[:, : d_out.shape[1]]
        per_token = self.encoder.backward(cache.text, d_psi)
        d_emb = np.zeros((cache.n_concepts, per_token.shape[1]))
        mask = cache.concept_of >= 0
        np.add.at(d_emb, cache.concept_of[mask], per_token[mask] * cache.n_injected[mask, None])
        grads["name_embeddings"] = d_emb
        return grads

    def step(self, inputs: tuple[list[Message], int], state: AgentState) -> tuple[AgentOutput, AgentState]:
        inbound, step_index = inputs
        context = None
        meta = None
        name_feats = None
        for m in inbound:
            if isinstance(m.payload, Context):
                context = m.payload.embedding.values
            elif isinstance(m.payload, Metadata) and m.sender is AgentId.NOMINAL:
                meta = m.payload
            elif isinstance(m.payload, Features) and m.sender is AgentId.NOMINAL:
                name_feats = m.payload
        flags = self.params.flags
        if Ablation.NO_NOM in flags:
            descs = [Description(i, t, 0) for i, t in enumerate(self.own_templates)]
            prompts = [(d.template, self.concepts[d.concept], None, d.concept) for d in descs]
        else:
            if meta is None or name_feats is None:
                raise ProtocolError("missing N->L prompt messages")
            concepts, descs = parse_descriptions(meta)
            embs = [e.values for e in name_feats.embeddings]
            prompts = [(d.template, concepts[d.concept], embs[d.concept], d.concept) for d in descs]
        if Ablation.NO_VISUAL not in flags and Ablation.NO_LING not in flags and context is None:
            raise ProtocolError("missing V->L context message")
        out, cache = self.encode(prompts, context)
        normalized = not cache.contextual
        feats = Features(tuple(Embedding(r, Modality.TEXT, normalized=normalized) for r in out))
        msgs = [Message(AgentId.LINGUISTIC, AgentId.COORDINATOR, feats, step_index)]
        mem = {} if context is None else {"last_context": context}
        return AgentOutput(msgs, {"text": out, "cache": cache, "descriptions": descs, "context": context}), state.advanced(**mem)


class GlobalCoordinator:
    agent_id = AgentId.COORDINATOR

    def __init__(self, params: AdapterParams, default_descriptions: Sequence[Description]):
        self.params = params
        self.default_descriptions = list(default_descriptions)

    def temperature(self) -> float:
        if Ablation.NO_COORD in self.params.flags:
            return 1.0
        return gc_temperature(self.params.coordinator.kappa_param)

    def weights(self) -> tuple[float, float]:
        f = self.params.flags
        if Ablation.NO_COORD in f or Ablation.NO_DYNBAL in f:
            return 0.5, 0.5
        c = self.params.coordinator
        return balance_weights(float(c.w_con_param[0]), float(c.w_cls_param[0]))

    def step(self, inputs: tuple[list[Message], np.ndarray, int], state: AgentState) -> tuple[AgentOutput, AgentState]:
        inbound, concepts, step_index = inputs
        image = text = strategy = meta = None
        for m in inbound:
            p = m.payload
            if isinstance(p, Features) and m.sender is AgentId.VISUAL:
                image = p
            elif isinstance(p, Features) and m.sender is AgentId.LINGUISTIC:
                text = p
            elif isinstance(p, Strategy):
                strategy = p
            elif isinstance(p, Metadata) and m.sender is AgentId.NOMINAL:
                meta = p
        if image is None:
            raise ProtocolError("missing V->C feature message")
        if text is None:
            raise ProtocolError("missing L->C feature message")
        if Ablation.NO_NOM in self.params.flags:
            descs = self.default_descriptions
        elif meta is None:
            raise ProtocolError("missing N->C metadata message")
        else:
            descs = parse_descriptions(meta)[1]
        phi = np.stack([e.values for e in image.embeddings])
        txt = np.stack([e.values for e in text.embeddings])
        kappa = self.temperature()
        w_con, w_cls = self.weights()
        values = {
            "phi": phi,
            "text": txt,
            "descriptions": descs,
            "blocks": contrastive_blocks(descs, np.asarray(concepts)),
            "kappa": kappa,
            "w_con": w_con,
            "w_cls": w_cls,
            "strategy": None if strategy is None else strategy.tag,
        }
        return AgentOutput([], values), state.advanced(last_kappa=kappa)


def contrastive_blocks(descs: Sequence[Description], concepts: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Square (image, prompt) index blocks with positives on the diagonal.

    One block per (shot, description group): row ``j`` is the shot's image of
    the group's ``j``-th concept, column ``j`` that concept's prompt in the
    group. Blocks of equal size are stacked; returns ``[(img_idx, txt_idx)]``
    with each array shaped (n_blocks, n).
    """
    by_concept: dict[int, list[int]] = {}
    for i, c in enumerate(concepts):
        by_concept.setdefault(int(c), []).append(i)
    shots = min(len(v) for v in by_concept.values())
    groups: dict[int, list[tuple[int, int]]] = {}
    for p, d in enumerate(descs):
        groups.setdefault(d.group, []).append((d.concept, p))
    stacks: dict[int, tuple[list, list]] = {}
    for g in sorted(groups):
        members = sorted(groups[g])
        for k in range(shots):
            img = [by_concept[c][k] for c, _ in members]
            txt = [p for _, p in members]
            s = stacks.setdefault(len(members), ([], []))
            s[0].append(img)
            s[1].append(txt)
    return [(np.array(i), np.array(t)) for n, (i, t) in sorted(stacks.items())]


@dataclass
class StepOutputs:
    features: np.ndarray  # frozen E_v of the batch
    phi: np.ndarray  # visual unit output
    text: np.ndarray  # linguistic unit output, one row per description
    descriptions: list[Description]
    blocks: list[tuple[np.ndarray, np.ndarray]]
    kappa: float
    w_con: float
    w_cls: float
    strategy: str | None
    delta: np.ndarray | None
    context: np.ndarray | None
    text_cache: LinguisticCache
    states: dict[AgentId, AgentState]


@dataclass
class AgentTeam:
    visual: VisualPerceptionUnit
    linguistic: LinguisticContextUnit
    nominal: NominalEmbeddingUnit
    coordinator: GlobalCoordinator

    def __iter__(self):
        return iter((self.visual, self.linguistic, self.nominal, self.coordinator))

    def initial_states(self) -> dict[AgentId, AgentState]:
        return {a.agent_id: AgentState(a.agent_id) for a in self}


def agent_step(agent, inputs, state: AgentState):
    if state.agent_id != agent.agent_id:
        raise ValueError(f"state of {state.agent_id.value} passed to agent {agent.agent_id.value}")
    return agent.step(inputs, state)


def gc_coordinate(bus: MessageBus, team: AgentTeam, batch: Batch, states: dict[AgentId, AgentState],
                  step_index: int = 0) -> StepOutputs:
    """One coordination round: V, then N, then L, then C."""
    missing = {a.agent_id for a in team} - bus.registered
    if missing:
        raise ProtocolError(f"agents not registered: {sorted(m.value for m in missing)}")
    flags = team.visual.params.flags
    states = dict(states)

    out_v, states[AgentId.VISUAL] = agent_step(team.visual, (batch.raw, step_index), states[AgentId.VISUAL])
    for m in out_v.messages:
        bus.post(m)

    if Ablation.NO_NOM not in flags:
        inbound = bus.drain(AgentId.NOMINAL)
        out_n, states[AgentId.NOMINAL] = agent_step(team.nominal, (inbound, step_index), states[AgentId.NOMINAL])
        for m in out_n.messages:
            bus.post(m)
    else:
        bus.drain(AgentId.NOMINAL)

    inbound = bus.drain(AgentId.LINGUISTIC)
    out_l, states[AgentId.LINGUISTIC] = agent_step(team.linguistic, (inbound, step_index), states[AgentId.LINGUISTIC])
    for m in out_l.messages:
        bus.post(m)

    inbound = bus.drain(AgentId.COORDINATOR)
    out_c, states[AgentId.COORDINATOR] = agent_step(
        team.coordinator, (inbound, batch.concepts, step_index), states[AgentId.COORDINATOR]
    )
    cv = out_c.values
    return StepOutputs(
        features=out_v.values["features"],
        phi=cv["phi"],
        text=cv["text"],
        descriptions=cv["descriptions"],
        blocks=cv["blocks"],
        kappa=cv["kappa"],
        w_con=cv["w_con"],
        w_cls=cv["w_cls"],
        strategy=cv["strategy"],
        delta=out_v.values["delta"],
        context=out_v.values["context"],
        text_cache=out_l.values["cache"],
        states=states,
    )
