import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskpost import tokenizer as tok
from deskpost.env import (MALFORMED, MAX_TURNS, TOO_MANY_CALLS, TOOLS_UNAVAILABLE,
                          TRUNCATION_MARKER, UNKNOWN_DOC, AgenticSource, DocumentStore, Episode,
                          HashingEmbedder, ScriptedPolicy, ToolCall, collect_trajectory, cosine,
                          evaluate_agent, export_traces, make_retrieval_items, oracle_script,
                          parse_tool_call, read, run_episodes, search)
from deskpost.model import ModelConfig, SamplingParams, TinyLM

EMB = HashingEmbedder()


def brute_force(store, query, k=3):
    q = EMB(query)
    scored = [(-cosine(EMB(t), q), d) for d, t in store.documents]
    return [d for _, d in sorted(scored)[:k]]


# -- embedding ---------------------------------------------------------------------------

def test_embedding_deterministic_and_normalised():
    a, b = EMB("alpha beta"), EMB("alpha beta")
    assert a.tobytes() == b.tobytes()
    assert abs(np.linalg.norm(a) - 1.0) < 1e-9
    assert cosine(a, EMB("alpha beta gamma")) > cosine(a, EMB("zzz qqq"))
    with pytest.raises(ValueError):
        EMB("")


# -- search ------------------------------------------------------------------------------

def test_search_single_document_and_self_retrieval():
    one = DocumentStore([("x", "only doc")])
    assert [d for d, _ in search(one, "something else entirely")] == ["x"]
    store = DocumentStore([("a", "the cat sat"), ("b", "dogs bark loudly"), ("c", "rain falls"),
                           ("d", "the cat ran")])
    hits = search(store, "dogs bark loudly")
    assert hits[0][0] == "b" and hits[0][1] == pytest.approx(1.0)
    assert len(hits) == 3


def test_search_ties_broken_by_doc_id():
    store = DocumentStore([("z", "same text"), ("a", "same text"), ("m", "same text")])
    assert [d for d, _ in search(store, "same text")] == ["a", "m", "z"]


def test_store_validation_and_jsonl(tmp_path):
    with pytest.raises(ValueError):
        DocumentStore([("a", "x"), ("a", "y")])
    with pytest.raises(ValueError):
        search(DocumentStore([]), "q")
    p = tmp_path / "docs.jsonl"
    p.write_text(json.dumps({"doc_id": "d1", "text": "hello"}) + "\n" + "{bad\n")
    with pytest.raises(ValueError, match="docs.jsonl:2"):
        DocumentStore.from_jsonl(p)
    p.write_text(json.dumps({"doc_id": "d1", "text": "hello"}) + "\n")
    store = DocumentStore.from_jsonl(p)
    assert len(store) == 1 and store.embeddings.shape == (1, EMB.dim)


words = st.text(alphabet="abcde ", min_size=1, max_size=12).filter(str.strip)


@settings(max_examples=60, deadline=None)
@given(st.lists(words, min_size=1, max_size=30), words)
def test_search_matches_brute_force(texts, query):
    store = DocumentStore([(f"d{i:03d}", t) for i, t in enumerate(texts)])
    got = [d for d, _ in search(store, query)]
    want = brute_force(store, query)
    # brute force in floating point can only disagree on exact ties
    if got != want:
        q = EMB(query)
        gs = [cosine(EMB(store.text(d)), q) for d in got]
        ws = [cosine(EMB(store.text(d)), q) for d in want]
        np.testing.assert_allclose(gs, ws, atol=1e-12)


# -- read ------------------------------------------------------------------------------

def test_read_valid_unknown_and_truncated():
    store = DocumentStore([("a", "short"), ("long", "x" * 2000)])
    assert read(store, "a") == "short"
    assert read(store, " a ") == "short"
    assert read(store, "nope") == UNKNOWN_DOC
    out = read(store, "long")
    assert out == "x" * 1024 + TRUNCATION_MARKER
    assert len(tok.encode(out)) == 1024 + len(TRUNCATION_MARKER)


# -- tool-call grammar --------------------------------------------------------------------

@pytest.mark.parametrize("text,expected", [
    ("the answer is AB", None),
    ("<<search: cats>>", ToolCall("search", "cats")),
    ("thinking... << read : d07 >>", ToolCall("read", "d07")),
    ("<<search: a>> <<read: b>>", TOO_MANY_CALLS),
    ("<<search: >>", MALFORMED),
    ("<<delete: x>>", MALFORMED),
    ("<<search: x", MALFORMED),
])
def test_parse_tool_call(text, expected):
    assert parse_tool_call(text) == expected


def test_tool_call_validation():
    with pytest.raises(ValueError):
        ToolCall("write", "x")
    with pytest.raises(ValueError):
        ToolCall("read", " ")


# -- episodes ----------------------------------------------------------------------------

STORE = DocumentStore([("d01", "abcd = XY"), ("d02", "wxyz = QR"), ("d03", "mnop = ST"),
                       ("d04", "ijkl = UV")])


def test_immediate_answer_is_one_turn():
    traj, answer = collect_trajectory(ScriptedPolicy(lambda e: "XY"), STORE, "abcd?")
    assert answer == "XY" and traj.turn_count == 1 and traj.terminal
    assistant = [t for t in traj.turns if t.role == "assistant"]
    assert len(assistant) == 1
    assert traj.mask.sum() == len(assistant[0].tokens) - 1


def test_terminal_episode_rejects_steps():
    ep = Episode(STORE, "q")
    ep.step(tok.encode("done"))
    with pytest.raises(RuntimeError):
        ep.step(tok.encode("again"))


def test_search_read_answer_mask_audit():
    script = oracle_script(lambda e: "abcd")
    traj, answer = collect_trajectory(ScriptedPolicy(script), STORE, "abcd?", system="be brief")
    assert answer == "XY"
    roles = [t.role for t in traj.turns]
    assert roles == ["system", "user", "assistant", "tool", "assistant", "tool", "assistant"]
    search_obs = tok.decode(traj.turns[3].tokens)
    lines = search_obs.splitlines()
    assert len(lines) == 3 and lines[0].startswith("d01 ")
    for t in traj.turns:
        if t.role != "assistant":
            assert not t.mask.any()
        else:
            assert t.mask[0] == 0 and t.mask[1:].all()
    assert traj.unmasked_tool_tokens() == 0
    assert len(traj.tokens) == sum(len(t.tokens) for t in traj.turns)


def test_turn_budget_forces_terminal():
    traj, answer = collect_trajectory(ScriptedPolicy(lambda e: "<<search: abcd>>"), STORE, "q")
    assert traj.turn_count == MAX_TURNS and traj.terminal
    assert [t.role for t in traj.turns].count("tool") == MAX_TURNS - 1
    assert answer == "<<search: abcd>>"


def test_malformed_call_consumes_turn_and_tools_disabled():
    ep = Episode(STORE, "q")
    assert ep.step(tok.encode("<<search: a>><<read: b>>")) == TOO_MANY_CALLS
    assert ep.trajectory.turn_count == 1 and not ep.terminal
    off = Episode(STORE, "q", tools_enabled=False)
    assert off.step(tok.encode("<<read: d01>>")) == TOOLS_UNAVAILABLE


def test_empty_policy_output_gives_empty_answer():
    traj, answer = collect_trajectory(ScriptedPolicy(lambda e: ""), STORE, "q")
    assert answer == "" and traj.terminal


def test_context_exhaustion_aborts():
    ep = Episode(STORE, "q" * 30)
    (traj,) = run_episodes(ScriptedPolicy(lambda e: "x"), [ep], context_len=16)
    assert traj.terminal and traj.final_answer == "" and traj.turn_count == 0


def test_scripted_trajectories_are_byte_identical(tmp_path):
    script = oracle_script(lambda e: "wxyz")
    t1, _ = collect_trajectory(ScriptedPolicy(script), STORE, "wxyz?")
    t2, _ = collect_trajectory(ScriptedPolicy(script), STORE, "wxyz?")
    export_traces(tmp_path / "a.json", [t1])
    export_traces(tmp_path / "b.json", [t2])
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert json.loads((tmp_path / "a.json").read_text())[0]["final_answer"] == "QR"


# -- retrieval task -------------------------------------------------------------------------

def test_retrieval_items_and_oracle_accuracy():
    items = make_retrieval_items(20, seed=1)
    assert all(len(it.store) == 16 for it in items)
    assert make_retrieval_items(20, seed=1)[3].question == items[3].question
    correct = 0
    for it in items:
        _, ans = collect_trajectory(ScriptedPolicy(oracle_script(lambda e, k=it.key: k)),
                                    it.store, it.question)
        correct += ans == it.reference
    assert correct == 20


def test_agentic_source_masks_and_accounting():
    model = TinyLM(ModelConfig(vocab_size=256, layers=1, model_dim=16, heads=2, context_len=48))
    items = make_retrieval_items(2, n_docs=4, seed=0)
    src = AgenticSource(SamplingParams(temperature=1.0, max_new_tokens=8), max_turns=3)
    rngs = [[np.random.default_rng([i, k]) for k in range(3)] for i in range(2)]
    groups = src.collect(model, items, 3, rngs)
    assert [len(g) for g in groups] == [3, 3]
    for g in groups:
        for r in g:
            assert r.info["unmasked_tool_tokens"] == 0
            assert r.info["turns"] <= 3
            assert not r.mask[:r.info["prompt_len"]].any()
            assert r.reward in (0.0, 0.5, 1.0)
    acc, trajs, scores = evaluate_agent(model, items, max_new_tokens=8, max_turns=3)
    assert 0.0 <= acc <= 1.0 and len(trajs) == len(scores) == 2


def test_observations_fit_the_token_budget():
    store = DocumentStore([("d01", "abcd = " + "Z" * 200)])
    ep = Episode(store, "abcd?", max_tokens=40)
    (traj,) = run_episodes(ScriptedPolicy(lambda e: "<<read: d01>>"), [ep], context_len=40)
    assert len(traj.tokens) <= 40
    assert traj.terminal
