import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from synernet.agents import (
    AgentState,
    DegenerateFeatureError,
    Description,
    EncodingStrategy,
    TextMode,
    agent_step,
    build_sequence,
    contrastive_blocks,
    ctx_integrate,
    ctx_integrate_backward,
    estimate_difficulty,
    gc_coordinate,
    lcu_encode,
    neu_context_exchange,
    neu_generate_prompt,
    neu_init_concepts,
    robust_features,
    robust_jacobian,
    select_strategy,
    vpu_encode,
)
from synernet.encoders import PromptTemplate, tokenize
from synernet.messaging import AgentId, MessageBus, ProtocolError
from synernet.params import Ablation, LinguisticUnitParams
from synernet.training import TrainConfig, new_bus

from conftest import fd_grad


# ---------------------------------------------------------------- visual

def test_robust_forward_and_direction():
    e = np.array([3.0, 4.0])
    np.testing.assert_allclose(robust_features(e[None], 0.5)[0], [0.6 + 1.5, 0.8 + 2.0])
    r = robust_features(e[None], 0.5)[0]
    assert np.dot(r, e) / np.linalg.norm(r) / np.linalg.norm(e) == pytest.approx(1.0)


def test_robust_zero_vector_is_an_error():
    with pytest.raises(DegenerateFeatureError):
        robust_features(np.zeros((1, 3)), 0.5)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=3, max_size=6).filter(lambda v: np.linalg.norm(v) > 0.1))
def test_detach_gradient_equals_normalization_gradient(v):
    e = np.array(v)
    num = np.stack([fd_grad(lambda: (e / np.linalg.norm(e))[i], e) for i in range(len(e))])
    np.testing.assert_allclose(robust_jacobian(e), num, atol=1e-6)


def test_vpu_encode_modes(bench, params):
    z = bench.samples[0]
    std = vpu_encode(z, "STANDARD", params.visual, bench.visual).values
    rob = vpu_encode(z, EncodingStrategy.ROBUST, params.visual, bench.visual).values
    np.testing.assert_array_equal(std, bench.visual.encode_image(z).values)
    np.testing.assert_allclose(rob, std / np.linalg.norm(std) + 0.5 * std)


def test_difficulty_modes(bench, params):
    feats = bench.visual.encode_batch(bench.samples[:5])
    d = estimate_difficulty(feats, params.visual)
    assert np.all(d == d[0]) and 0 < d[0] < 1
    per = estimate_difficulty(feats, params.visual, per_sample=True)
    assert per.shape == (5,) and not np.all(per == per[0])
    with pytest.raises(ValueError):
        estimate_difficulty(np.zeros((0, 16)), params.visual)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-9, 1 - 1e-9))
def test_strategy_partition(delta):
    s = select_strategy(delta)
    expected = (EncodingStrategy.STANDARD if delta < 0.33 else
                EncodingStrategy.ROBUST if delta < 0.66 else EncodingStrategy.ROBUST_AUGMENTED)
    assert s is expected


# ---------------------------------------------------------------- linguistic

def _ling(rng, d=4, h=5):
    return LinguisticUnitParams(rng.standard_normal((h, 2 * d)), rng.standard_normal(h),
                                rng.standard_normal((d, h)), rng.standard_normal(d), lam=0.7)


def test_ctx_integrate_backward_matches_finite_differences():
    rng = np.random.default_rng(0)
    p = _ling(rng)
    h = rng.standard_normal((3, 8))
    w = rng.standard_normal((3, 4))
    g = ctx_integrate_backward(h, p, w)
    f = lambda: float(np.sum(w * ctx_integrate(h, p)))
    for name in ("theta3", "b3", "theta4", "b4"):
        np.testing.assert_allclose(g[name], fd_grad(f, getattr(p, name)), atol=1e-7)
    np.testing.assert_allclose(g["h"], fd_grad(f, h), atol=1e-7)


def test_ctx_integrate_dimension_check():
    p = _ling(np.random.default_rng(1))
    with pytest.raises(ValueError):
        ctx_integrate(np.zeros(5), p)


def test_lambda_one_is_bit_identical_to_standard(bench):
    rng = np.random.default_rng(2)
    p = _ling(rng, d=16, h=16)
    p.lam = 1.0
    tv = bench.vocab.embed(tokenize("a photo of dog"))
    c = rng.standard_normal(16)
    a = lcu_encode(tv, TextMode.CONTEXTUAL, c, p, bench.text)
    b = lcu_encode(tv, TextMode.STANDARD, None, p, bench.text)
    assert a.values.tobytes() == b.values.tobytes()


def test_contextual_needs_context(bench):
    p = _ling(np.random.default_rng(3), d=16, h=16)
    with pytest.raises(ProtocolError):
        lcu_encode(bench.vocab.embed(["a"]), "CONTEXTUAL", None, p, bench.text)


# ---------------------------------------------------------------- nominal

def test_name_injection_with_bare_template(bench):
    table = neu_init_concepts(["zor vex"], 2, 0, unk=bench.vocab.unk)
    seq = neu_generate_prompt("zor vex", table, PromptTemplate("{}"), bench.vocab)
    assert seq.shape[0] == 2
    for row in seq:
        np.testing.assert_array_equal(row, table.vectors[0].mean(axis=0))


def test_two_concepts_differ_only_at_name_positions(bench):
    table = neu_init_concepts(["zor vex", "mok pry"], 2, 1, unk=bench.vocab.unk)
    t = "a painting of the {}"
    a = neu_generate_prompt("zor vex", table, t, bench.vocab)
    b = neu_generate_prompt("mok pry", table, t, bench.vocab)
    differs = np.any(a != b, axis=1)
    assert list(np.flatnonzero(differs)) == [4, 5]


def test_missing_concept(bench):
    table = neu_init_concepts(["zor vex"], 2, 0, unk=bench.vocab.unk)
    with pytest.raises(KeyError):
        neu_generate_prompt("nope", table, "{}", bench.vocab)


def test_name_vectors_reach_the_text_embedding(bench):
    table = neu_init_concepts(["zor vex"], 2, 0, unk=bench.vocab.unk)
    v = table.vectors

    def f():
        seq, _ = build_sequence("a photo of {}", "zor vex", bench.vocab, table.name_embedding("zor vex"))
        return bench.text.encode_text(seq).values[0]

    assert np.abs(fd_grad(f, v)).max() > 1e-3


def test_injection_breaks_collapse(bench, params):
    embs = []
    for c in params.names.concepts:
        seq, _ = build_sequence("a photo of {}", c, bench.vocab, params.names.name_embedding(c))
        embs.append(bench.text.encode_text(seq).values)
    embs = np.array(embs)
    assert len(np.unique(embs, axis=0)) == len(embs)


def test_init_concepts_rules():
    t = neu_init_concepts(["a", "b"], 3, 0, d_tok=4, scale=0.0)
    assert t.vectors.shape == (2, 3, 4) and np.all(t.vectors == 0)
    with pytest.raises(ValueError):
        neu_init_concepts(["a"], 0, 0, d_tok=4)
    with pytest.raises(ValueError):
        neu_init_concepts(["a", "a"], 1, 0, d_tok=4)


def test_context_exchange_example():
    out = neu_context_exchange(["dog", "mural"], {"dog": "a photo of {}", "mural": "a painting of {}"})
    assert ("dog", "a painting of dog") in out
    assert ("mural", "a photo of mural") in out
    assert len(out) == 4


def test_context_exchange_single_concept():
    assert neu_context_exchange(["dog"], [PromptTemplate("a photo of {}", "dog")]) == [("dog", "a photo of dog")]


def test_context_exchange_counts():
    bank = {"a": "x {}", "b": "y {}", "c": "z {}"}
    out = neu_context_exchange(list(bank), bank)
    swapped = [(c, d) for c, d in out if not d.startswith(bank[c][:2])]
    assert len(out) == 9 and len(swapped) == 6 and len(set(out)) == 9


def test_context_exchange_errors():
    with pytest.raises(ValueError):
        neu_context_exchange(["a"], {})
    with pytest.raises(ValueError):
        neu_context_exchange(["a", "b"], {"a": "x {}"})


def test_descriptions_follow_strategy(task, params):
    unit = task.team(params).nominal
    plain = unit.descriptions(EncodingStrategy.ROBUST)
    assert len(plain) == 8 and all(d.group == 0 for d in plain)
    full = unit.descriptions(EncodingStrategy.ROBUST_AUGMENTED)
    assert len(full) == 64
    zs = task.team(params, zero_shot=True).nominal.descriptions(EncodingStrategy.STANDARD)
    assert len(zs) == 56 and all(d.group != d.concept for d in zs)
    params.flags = frozenset({Ablation.NO_CTX_EXCH})
    assert len(task.team(params).nominal.descriptions(EncodingStrategy.ROBUST_AUGMENTED)) == 8


def test_blocks_put_positives_on_the_diagonal():
    descs = [Description(c, "t", g) for g in range(2) for c in range(3)]
    concepts = np.array([0, 1, 2, 0, 1, 2])
    blocks = contrastive_blocks(descs, concepts)
    (img, txt), = blocks
    assert img.shape == (4, 3)
    for bi in range(4):
        for j in range(3):
            assert concepts[img[bi, j]] == descs[txt[bi, j]].concept


# ---------------------------------------------------------------- coordination

def test_round_covers_edges_and_is_deterministic(task, params, small_batch):
    team = task.team(params)
    bus1, bus2 = new_bus(), new_bus()
    out1 = gc_coordinate(bus1, team, small_batch, team.initial_states())
    gc_coordinate(bus2, team, small_batch, team.initial_states())
    edges = {m.edge for m in bus1.trace}
    assert {"V->L", "V->C", "N->L", "L->C"} <= edges
    assert len(bus1.trace) >= 4
    assert [m.to_json() for m in bus1.trace] == [m.to_json() for m in bus2.trace]
    assert out1.strategy == "ROBUST_AUGMENTED"
    assert bus1.pending() == 0


def test_states_advance(task, params, small_batch):
    team = task.team(params)
    out = gc_coordinate(new_bus(), team, small_batch, team.initial_states())
    assert all(s.step_counter == 1 for s in out.states.values())


def test_no_ling_falls_back_to_standard(task, params, small_batch, bench):
    params.flags = frozenset({Ablation.NO_LING})
    team = task.team(params)
    out = gc_coordinate(new_bus(), team, small_batch, team.initial_states())
    assert not out.text_cache.contextual
    np.testing.assert_allclose(np.linalg.norm(out.text, axis=1), 1.0)


@pytest.mark.parametrize("flag", list(Ablation))
def test_every_ablation_completes_a_round(task, small_batch, flag):
    p = task.init_params(TrainConfig(ablation_flags=[flag]))
    team = task.team(p)
    out = gc_coordinate(new_bus(), team, small_batch, team.initial_states())
    assert out.text.shape[1] == 16


def test_unregistered_agent(task, params, small_batch):
    team = task.team(params)
    with pytest.raises(ProtocolError, match="N"):
        gc_coordinate(MessageBus([AgentId.VISUAL, AgentId.LINGUISTIC, AgentId.COORDINATOR]), team, small_batch,
                      team.initial_states())


def test_missing_message_names_the_edge(task, params):
    team = task.team(params)
    with pytest.raises(ProtocolError, match="N->L"):
        team.linguistic.step(([], 0), AgentState(AgentId.LINGUISTIC))
    with pytest.raises(ProtocolError, match="V->C"):
        team.coordinator.step(([], np.zeros(0), 0), AgentState(AgentId.COORDINATOR))


def test_agent_step_checks_state_owner(task, params):
    with pytest.raises(ValueError):
        agent_step(task.team(params).visual, (None, 0), AgentState(AgentId.NOMINAL))
