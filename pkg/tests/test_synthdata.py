"""Ground-truth grammars, exact oracles, dataset round trips, quaternions."""
import numpy as np
import pytest

from agg.errors import ParameterError, ParseError, ResourceError
from agg.synthdata import (GroundTruthGrammar, build_preset_grammar,
                           compose_deltas, exact_future_distribution,
                           load_dataset, load_grammar, make_continuous_dataset,
                           qconj, qmul, quaternion_embedding, sample_dataset,
                           sample_sequence, save_dataset, save_grammar,
                           step_marginals)


def test_presets_well_formed():
    for name in ("walk_stop_run", "bimodal", "recipe", "random"):
        g = build_preset_grammar(name)
        by_state = {}
        for st, _, _, p in g.rules:
            by_state[st] = by_state.get(st, 0.0) + p
        for s in g.states:
            assert abs(by_state[s] - 1.0) < 1e-9
    with pytest.raises(ParameterError):
        build_preset_grammar("nope")


def test_walk_stop_run_probs():
    g = build_preset_grammar("walk_stop_run", branch_probs=(0.8, 0.1, 0.1))
    start_rules = [(tok, p) for st, tok, _, p in g.rules if st == "W"]
    assert dict(start_rules) == {"walking": 0.8, "stopping": 0.1, "running": 0.1}
    with pytest.raises(ParameterError):
        build_preset_grammar("walk_stop_run", branch_probs=(0.8, 0.3, 0.1))


def test_random_preset_trivial_and_deterministic():
    g1 = build_preset_grammar("random", seed=5, n_states=1, n_tokens=1)
    assert g1.rules == [("S0", "t0", "S0", 1.0)]
    a = build_preset_grammar("random", seed=9)
    b = build_preset_grammar("random", seed=9)
    assert a.rules == b.rules


def test_grammar_validation():
    with pytest.raises(ParameterError):   # probs don't sum to 1
        GroundTruthGrammar(["A"], ["a"], "A", [("A", "a", "A", 0.5)])
    with pytest.raises(ParameterError):   # unknown next state
        GroundTruthGrammar(["A"], ["a"], "A", [("A", "a", "B", 1.0)])
    with pytest.raises(ParameterError):   # unreachable state
        GroundTruthGrammar(["A", "B"], ["a"], "A",
                           [("A", "a", "A", 1.0), ("B", "a", "B", 1.0)])
    with pytest.raises(ParameterError):   # negative probability
        GroundTruthGrammar(["A"], ["a", "b"], "A",
                           [("A", "a", "A", 1.5), ("A", "b", "A", -0.5)])


def test_sample_deterministic_grammar():
    g = GroundTruthGrammar(["A", "B"], ["x", "y"], "A",
                           [("A", "x", "B", 1.0), ("B", "y", "A", 1.0)])
    seq = sample_sequence(g, 6, np.random.default_rng(0))
    assert seq.tolist() == [0, 1, 0, 1, 0, 1]


def test_sample_first_token_frequencies():
    g = build_preset_grammar("walk_stop_run", branch_probs=(0.8, 0.1, 0.1))
    rng = np.random.default_rng(0)
    n = 10**4
    firsts = np.array([sample_sequence(g, 1, rng)[0] for _ in range(n)])
    for tok, p in ((0, 0.8), (1, 0.1), (2, 0.1)):
        freq = float(np.mean(firsts == tok))
        sigma = np.sqrt(p * (1 - p) / n)
        assert abs(freq - p) < 3 * sigma + 1e-9


def test_sampling_reproducible():
    g = build_preset_grammar("recipe")
    a = sample_dataset(g, 20, 8, seed=3)
    b = sample_dataset(g, 20, 8, seed=3)
    assert all(np.array_equal(x, y) for x, y in zip(a.records, b.records))


def test_exact_future_hand_case():
    # {W -> aW 0.7, W -> bU 0.3, U -> bU 1.0}, h=2 -> {aa: .49, ab: .21, bb: .30}
    g = GroundTruthGrammar(["W", "U"], ["a", "b"], "W",
                           [("W", "a", "W", 0.7), ("W", "b", "U", 0.3),
                            ("U", "b", "U", 1.0)])
    d = exact_future_distribution(g, horizon=2)
    assert abs(d[(0, 0)] - 0.49) < 1e-12
    assert abs(d[(0, 1)] - 0.21) < 1e-12
    assert abs(d[(1, 1)] - 0.30) < 1e-12
    assert (1, 0) not in d


def test_exact_future_h1_is_rule_distribution():
    g = build_preset_grammar("recipe")
    d = exact_future_distribution(g, horizon=1)
    assert abs(d[(0,)] - 1.0) < 1e-12


def test_exact_future_total_mass():
    # horizons capped so |tokens|^h stays inside the default budget
    for name, hs in (("walk_stop_run", (1, 4, 8, 12)),
                     ("bimodal", (1, 4, 8, 12)),
                     ("recipe", (1, 4, 7))):
        g = build_preset_grammar(name)
        for h in hs:
            d = exact_future_distribution(g, horizon=h)
            assert abs(sum(d.values()) - 1.0) < 1e-12


def test_exact_future_budget():
    g = build_preset_grammar("recipe")
    with pytest.raises(ResourceError):
        exact_future_distribution(g, horizon=12, budget=10)


def test_marginal_dp_matches_enumeration():
    g = build_preset_grammar("recipe")
    marg = step_marginals(g, horizon=3)
    full = exact_future_distribution(g, horizon=3)
    brute = np.zeros((3, g.num_tokens))
    for gram, p in full.items():
        for j, tok in enumerate(gram):
            brute[j, tok] += p
    assert np.allclose(marg, brute, atol=1e-12)


def test_empirical_matches_marginals():
    g = build_preset_grammar("bimodal")
    rng = np.random.default_rng(1)
    n = 10**4
    seqs = np.stack([sample_sequence(g, 4, rng) for _ in range(n)])
    marg = step_marginals(g, horizon=4)
    for j in range(4):
        for tok in range(g.num_tokens):
            p = marg[j, tok]
            freq = float(np.mean(seqs[:, j] == tok))
            sigma = np.sqrt(max(p * (1 - p), 1e-12) / n)
            assert abs(freq - p) < 3 * sigma + 1e-3


def test_dataset_roundtrip(tmp_path):
    g = build_preset_grammar("recipe")
    ds = sample_dataset(g, 30, 7, seed=0)
    path = tmp_path / "d.jsonl"
    save_dataset(path, ds)
    back = load_dataset(path)
    assert back.kind == "discrete" and back.length == 7
    assert all(np.array_equal(a, b) for a, b in zip(ds.records, back.records))


def test_continuous_roundtrip(tmp_path):
    g = build_preset_grammar("bimodal")
    emb = np.random.default_rng(0).normal(size=(3, 5))
    ds = make_continuous_dataset(g, 10, 6, emb, noise_std=0.1, seed=2)
    path = tmp_path / "c.jsonl"
    save_dataset(path, ds)
    back = load_dataset(path)
    assert back.kind == "continuous" and back.feature_width == 5
    for a, b in zip(ds.records, back.records):
        assert np.abs(a - b).max() < 1e-12


def test_empty_file_is_empty_dataset(tmp_path):
    path = tmp_path / "e.jsonl"
    path.write_text("")
    assert len(load_dataset(path)) == 0


def test_parse_errors_name_lines(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"tokens": [0, 1]}\nnot json\n')
    with pytest.raises(ParseError, match="line 2"):
        load_dataset(path)
    path.write_text('{"tokens": [0, 5]}\n')
    with pytest.raises(ParseError, match="line 1"):
        load_dataset(path, alphabet_size=3)
    path.write_text('{"tokens": [0, 1]}\n{"tokens": [0]}\n')
    with pytest.raises(ParseError, match="line 2"):
        load_dataset(path)
    path.write_text('{"other": 1}\n')
    with pytest.raises(ParseError, match="line 1"):
        load_dataset(path)


def test_grammar_file_roundtrip(tmp_path):
    g = build_preset_grammar("bimodal")
    path = tmp_path / "g.json"
    save_grammar(path, g)
    back = load_grammar(path)
    assert back.states == g.states and back.rules == g.rules


def test_quaternion_embedding_unit_blocks():
    q = quaternion_embedding(5, num_blocks=2, seed=0)
    assert q.shape == (5, 8)
    norms = np.linalg.norm(q.reshape(5, 2, 4), axis=-1)
    assert np.abs(norms - 1.0).max() < 1e-9


def test_noise_free_embedding_exact():
    g = build_preset_grammar("bimodal")
    emb = np.arange(12.0).reshape(3, 4)
    ds = make_continuous_dataset(g, 5, 4, emb, noise_std=0.0, seed=0)
    toks = sample_dataset(g, 5, 4, seed=0)
    for r, t in zip(ds.records, toks.records):
        assert np.array_equal(r, emb[t])


def test_quaternion_delta_roundtrip():
    g = build_preset_grammar("recipe")
    emb = quaternion_embedding(g.num_tokens, num_blocks=3, seed=1)
    ds = make_continuous_dataset(g, 4, 6, emb, seed=5, quaternion_deltas=True)
    toks = sample_dataset(g, 4, 6, seed=5)
    for deltas, t in zip(ds.records, toks.records):
        absolute = compose_deltas(deltas)
        want = emb[t].reshape(6, 3, 4)
        got = absolute.reshape(6, 3, 4)
        assert np.abs(got - want).max() < 1e-9


def test_qmul_identity_and_conj():
    rng = np.random.default_rng(0)
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    e = np.array([1.0, 0.0, 0.0, 0.0])
    assert np.allclose(qmul(e, q), q)
    assert np.allclose(qmul(q, qconj(q)), e, atol=1e-12)
