import json
from pathlib import Path

import numpy as np
import pytest

from helpers import (SCENARIO_CLASSES, SCENARIO_DRAFT, SCENARIO_TARGET, ConstantStream, ScriptedClassifier,
                     empirical_tv, scenario_policy, word_pair)
from specbranch import analytic, engines, hrad, toylm
from specbranch.engines import (DRAFTING, VERIFICATION, RunResult, metrics, run_adaedl, run_autoregressive,
                                run_pearl, run_sps, run_specbranch)
from specbranch.hrad import PolicyConfig

GOLDEN = Path(__file__).parent / "data" / "scripted_scenario.jsonl"


def iid_pair(alpha, c=4.0):
    """Order-0 pair with acceptance exactly alpha on every drafted token."""
    q = np.array([1.0, 0.0])
    p = np.array([alpha, 1.0 - alpha])
    return toylm.ToyModelPair(toylm.ToyModel(2, 0, {(): p}, p), toylm.ToyModel(2, 0, {(): q}, q), c, alpha)


def same_pair(V=4, seed=0, c=4.0):
    base = toylm.make_pair(V, 1, 0.5, c, seed)
    return toylm.ToyModelPair(base.target, base.target, c, 0.99)


def forced_sb(k_max=1, s=1, eps=0.0, gamma_max=3):
    return PolicyConfig(epsilon=eps, gamma_max=gamma_max, policy_kind="oracle", forced_class=s)


def all_engines(pair, prompt, max_len, seed):
    rng = lambda: np.random.default_rng(seed)  # noqa: E731
    ent = PolicyConfig(epsilon=0.2, lam=1.0, gamma_max=4, policy_kind="entropy")
    orc = PolicyConfig(epsilon=0.2, gamma_max=4, policy_kind="oracle")
    return {
        "ar": run_autoregressive(pair, prompt, max_len, rng()),
        "sps": run_sps(pair, prompt, max_len, 4, rng()),
        "adaedl": run_adaedl(pair, prompt, max_len, ent, rng()),
        "pearl": run_pearl(pair, prompt, max_len, 4, rng()),
        "specbranch": run_specbranch(pair, prompt, max_len, orc, None, 6, rng()),
        "specbranch_apriori": run_specbranch(pair, prompt, max_len, orc, None, 6, rng(), "apriori"),
    }


# -- autoregressive -------------------------------------------------------------

def test_ar_first_token_law():
    pair = toylm.make_pair(4, 1, 0.5, 4.0, 0)
    n = 100_000
    root = np.random.SeedSequence(1)
    counts = np.zeros(4)
    for child in root.spawn(n):
        counts[run_autoregressive(pair, [2], 2, np.random.default_rng(child)).output[1]] += 1
    p = toylm.next_dist(pair.target, [2])
    assert 0.5 * np.abs(counts / n - p).sum() < 0.01


def test_empty_generation_every_engine():
    pair = toylm.make_pair(4, 1, 0.5, 4.0, 0)
    for name, res in all_engines(pair, [1, 2], 2, 0).items():
        assert res.output == [1, 2] and res.totals["total_committed"] == 0, name


def test_deterministic_model_deterministic_output():
    V = 3
    rows = {(t,): np.eye(V)[(t + 1) % V] for t in range(V)}
    m = toylm.ToyModel(V, 1, rows, toylm.uniform(V))
    pair = toylm.ToyModelPair(m, m, 3.0, 0.99)
    outs = {tuple(r.output) for s in range(5) for r in all_engines(pair, [0], 12, s).values()}
    assert outs == {tuple([0] + [(i % 3) for i in range(1, 12)])}


# -- SpS / AdaEDL ---------------------------------------------------------------

def test_sps_q_equals_p_commits_gamma_plus_one():
    res = run_sps(same_pair(), [0], 1 + 5 * 10, 4, np.random.default_rng(0))
    assert all(len(t.committed) == 5 and t.verified_n == 4 for t in res.traces)
    assert metrics(res)["RB"] == 0.0


def test_sps_accepted_length_matches_lemma():
    alpha, gamma = 0.7, 4
    rng = np.random.default_rng(0)
    rounds = []
    while len(rounds) < 10_000:
        r = run_sps(iid_pair(alpha), [0], 1 + 200, gamma, rng)
        rounds += [t.verified_n for t in r.traces[:-1]]
    assert abs(np.mean(rounds) / analytic.expected_accept_len(alpha, gamma) - 1) < 0.05


def test_sps_histogram_matches_trunc_geom():
    alpha, gamma = 0.6, 4
    rng = np.random.default_rng(7)
    counts = np.zeros(gamma + 1)
    n = 0
    while n < 100_000:
        r = run_sps(iid_pair(alpha), [0], 1 + 5000, gamma, rng)
        for t in r.traces[:-1]:
            counts[t.verified_n] += 1
            n += 1
    tv = 0.5 * np.abs(counts / n - analytic.trunc_geom_pmf(alpha, gamma)).sum()
    assert tv < 0.02


def test_sps_m_matches_lemma():
    # M counts draft tokens per target sample; with gamma large enough that
    # full acceptance is rare it tracks E[X]
    alpha, gamma = 0.5, 8
    ms = []
    rng = np.random.default_rng(3)
    for _ in range(40):
        ms.append(metrics(run_sps(iid_pair(alpha), [0], 1 + 600, gamma, rng))["M"])
    assert abs(np.mean(ms) / analytic.expected_accept_len(alpha, gamma) - 1) < 0.05


def test_adaedl_point_mass_never_stops_early():
    V = 3
    rows = {(t,): np.eye(V)[(t + 1) % V] for t in range(V)}
    m = toylm.ToyModel(V, 1, rows, toylm.uniform(V))
    pair = toylm.ToyModelPair(m, m, 3.0, 0.99)
    pol = PolicyConfig(epsilon=0.2, lam=1.0, gamma_max=5, policy_kind="entropy")
    res = run_adaedl(pair, [0], 1 + 6 * 4, pol, np.random.default_rng(0))
    assert all(len(t.drafted) == 5 for t in res.traces)


def test_adaedl_uniform_drafts_length_one():
    u = toylm.uniform(4)
    pair = toylm.ToyModelPair(toylm.ToyModel(4, 0, {}, u), toylm.ToyModel(4, 0, {}, u), 2.0, 0.99)
    pol = PolicyConfig(epsilon=0.2, lam=1.0, gamma_max=5, policy_kind="entropy")
    res = run_adaedl(pair, [0], 30, pol, np.random.default_rng(0))
    assert all(len(t.drafted) == 1 for t in res.traces)


def test_adaedl_requires_entropy_policy():
    with pytest.raises(hrad.PolicyConfigError):
        run_adaedl(same_pair(), [0], 5, PolicyConfig(policy_kind="hybrid"), np.random.default_rng(0))


def test_serial_engines_lossless_short_sequences():
    # reduced-size version of the full losslessness check (vocab 3, length 2)
    pair = toylm.make_pair(3, 1, 0.5, 4.0, 4)
    ent = PolicyConfig(epsilon=0.5, lam=1.0, gamma_max=3, policy_kind="entropy")
    fns = {
        "sps": lambda rng: run_sps(pair, [0], 3, 2, rng).output,
        "adaedl": lambda rng: run_adaedl(pair, [0], 3, ent, rng).output,
        "specbranch": lambda rng: run_specbranch(pair, [0], 3, forced_sb(), None, 1, rng).output,
    }
    for name, fn in fns.items():
        assert empirical_tv(fn, pair, [0], 2, 30_000, 11) < 0.02, name


# -- PEARL ---------------------------------------------------------------------

def test_pearl_q_equals_p_no_rollback():
    pair = same_pair(c=4.0)
    res = run_pearl(pair, [0], 200, 4, np.random.default_rng(0))
    assert metrics(res)["RB"] == 0.0
    # after the first pre-verify round every round commits a full chunk
    assert all(len(t.committed) == 4 for t in res.traces[1:-1])


def test_pearl_low_alpha_rollback_regime():
    pair = toylm.make_pair(8, 1, 0.35, 8.0, 2)
    rbs = [metrics(run_pearl(pair, [0], 120, 8, np.random.default_rng(s)))["RB"] for s in range(10)]
    assert np.median(rbs) > 0.5


def test_pearl_pre_verify_rejection_commits_nothing_drafted():
    # draft always proposes 0, target never emits 0: first token always rejected
    q = np.array([1.0, 0.0])
    p = np.array([0.0, 1.0])
    pair = toylm.ToyModelPair(toylm.ToyModel(2, 0, {}, p), toylm.ToyModel(2, 0, {}, q), 4.0, 0.5)
    res = run_pearl(pair, [1], 11, 3, np.random.default_rng(0))
    for t in res.traces:
        assert t.verified_n == 0 and t.committed == [1] and t.rollback_count == 4
    assert res.totals["draft_committed"] == 0


# -- SpecBranch ------------------------------------------------------------------

def _scenario(draft=SCENARIO_DRAFT, target=SCENARIO_TARGET, classes=SCENARIO_CLASSES):
    vocab, pair = word_pair(draft, target)
    clf = ScriptedClassifier(classes)
    res = run_specbranch(pair, vocab.ids("the only"), 64, scenario_policy(), clf, 4, ConstantStream(),
                         max_steps=7)
    return vocab, res


def test_scripted_scenario_transitions():
    vocab, res = _scenario()
    tr = res.traces
    names = lambda ids: vocab.words(ids)  # noqa: E731
    assert [t.mode for t in tr] == [DRAFTING] + [VERIFICATION] * 5 + [DRAFTING]
    assert [t.decision["s"] if t.decision else None for t in tr] == [1, 2, 0, 1, 2, None, 2]

    # 1: confidence stop at the low-confidence token, which becomes the branch point
    assert names(d[0] for d in tr[0].drafted) == "way to be"
    # 2: the sampled branch loses to an alternative; the whole winning continuation is retained
    assert names(tr[1].branch_record["branch_tokens"]) == "be do"
    assert tr[1].branch_record["accepted"] == [False, True] and tr[1].branch_record["selected"] == 1
    assert names(tr[1].committed) == "way to do" and tr[1].rollback_count == 0
    assert len(tr[1].retained_confidences) == 4
    # 3: branch at the first token of the round; nothing retained afterwards
    assert tr[2].verified_n == 4 and names(tr[2].committed) == "great work is to love"
    assert names(tr[2].branch_record["branch_tokens"]) == "word love stay"
    assert tr[2].retained_confidences == []
    # 4: the empty-retention round branches at its first token
    assert tr[3].verified_n == 0 and names(tr[3].branch_record["branch_tokens"]) == "what the"
    assert names(tr[3].committed) == "the" and len(tr[3].retained_confidences) == 2
    # 5: confidence-filtered block accepted, winning branch fully retained
    assert names(tr[4].committed) == "efforts you put" and len(tr[4].retained_confidences) == 4
    # 6: a pending token is rejected; everything in flight rolls back
    assert tr[5].verified_n == 3 and names(tr[5].committed) == "into your whole research"
    assert tr[5].rollback_count == 5 and tr[5].decision is None
    # 7: back to drafting
    assert tr[6].mode == DRAFTING
    assert names(res.output) == ("the only way to do great work is to love the efforts you put "
                                 "into your whole research")


def test_scripted_scenario_byte_stable():
    _, a = _scenario()
    _, b = _scenario()
    assert a.to_jsonl() == b.to_jsonl() == GOLDEN.read_text()


def test_branch_point_no_match_rolls_back():
    target = dict(SCENARIO_TARGET)
    target["way to"] = {"research": 0.95, "be": 0.05}
    vocab, res = _scenario(target=target, classes=(1,) + (2,) * 6)
    st = res.traces[1]
    assert st.branch_record["accepted"] == [False, False] and st.branch_record["selected"] is None
    assert st.branch_record["residual_against"] == "shared_branch_point_q"
    assert vocab.words(st.committed) == "way to research"
    assert st.rollback_count == 5 and res.traces[2].mode == DRAFTING


def test_specbranch_q_equals_p_no_rollback():
    pair = same_pair(c=4.0)
    for mode in ("posterior", "apriori"):
        res = run_specbranch(pair, [0], 80, PolicyConfig(policy_kind="fixed", gamma_max=4), None, 6,
                             np.random.default_rng(0), mode)
        assert metrics(res)["RB"] == 0.0 and res.totals["total_committed"] == 79


def test_posterior_confidence_rule_respected():
    pair = toylm.make_pair(8, 1, 0.6, 4.0, 3)
    pol = PolicyConfig(epsilon=0.2, gamma_max=4, policy_kind="confidence")
    for seed in range(5):
        res = run_specbranch(pair, [0], 80, pol, None, 6, np.random.default_rng(seed))
        for t in res.traces:
            if t.retained_confidences is not None and t.decision and t.decision["s"] == 1:
                assert all(c > 0.2 for c in t.retained_confidences)


def test_apriori_differs_from_posterior():
    pair = toylm.make_pair(8, 1, 0.6, 4.0, 3)
    pol = PolicyConfig(epsilon=0.2, gamma_max=4, policy_kind="oracle")
    a = run_specbranch(pair, [0], 100, pol, None, 6, np.random.default_rng(1), "posterior")
    b = run_specbranch(pair, [0], 100, pol, None, 6, np.random.default_rng(1), "apriori")
    assert a.to_jsonl() != b.to_jsonl()
    for res in (a, b):
        assert res.output[:1] == [0] and len(res.output) == 100


def test_specbranch_config_errors():
    pair = same_pair()
    with pytest.raises(hrad.PolicyConfigError):
        run_specbranch(pair, [0], 10, PolicyConfig(policy_kind="hybrid"), None, 6, np.random.default_rng(0))
    with pytest.raises(hrad.PolicyConfigError):
        run_specbranch(pair, [0], 10, PolicyConfig(policy_kind="entropy"), None, 6, np.random.default_rng(0))
    with pytest.raises(ValueError):
        run_specbranch(pair, [0], 10, PolicyConfig(policy_kind="fixed"), None, 6, np.random.default_rng(0),
                       "sideways")


def test_hybrid_needs_fewer_confidence_evaluations():
    pair = toylm.make_pair(16, 1, 0.5, 4.0, 1, sharpness=12, easy_fraction=0.25)
    ex = hrad.generate_examples(pair, 60, 4, np.random.default_rng(0))
    clf = hrad.train_mlp(ex, epochs=5, seed=0)
    hyb = PolicyConfig(epsilon=0.2, gamma_max=4, policy_kind="hybrid")
    conf = PolicyConfig(epsilon=0.2, gamma_max=4, policy_kind="confidence")
    for seed in range(10):
        a = run_specbranch(pair, [0], 60, hyb, clf, 6, np.random.default_rng(seed))
        b = run_specbranch(pair, [0], 60, conf, None, 6, np.random.default_rng(seed))
        ra = a.totals["confidence_evals"] / a.totals["total_committed"]
        rb = b.totals["confidence_evals"] / b.totals["total_committed"]
        assert ra <= rb


# -- shared invariants -------------------------------------------------------------

@pytest.mark.parametrize("seed", range(4))
def test_prefix_consistency_and_totals(seed):
    pair = toylm.make_pair(6, 1, 0.5, 4.0, seed)
    for name, res in all_engines(pair, [0, 1], 70, seed).items():
        seq = list(res.prompt)
        for t in res.traces:
            seq += t.committed
            assert res.output[:len(seq)] == seq, name
            assert t.rollback_count <= res.totals["total_drafted"]
        assert seq == res.output
        tot = res.totals
        assert tot["total_committed"] == len(res.output) - len(res.prompt)
        assert tot["total_rolled_back"] == sum(t.rollback_count for t in res.traces)
        assert tot["total_committed"] == tot["draft_committed"] + tot["target_sampled"]
        assert 0.0 <= metrics(res)["RB"] <= 1.0


def test_determinism_bytes_every_engine():
    pair = toylm.make_pair(6, 1, 0.5, 4.0, 9)
    a = {k: v.to_jsonl() for k, v in all_engines(pair, [0], 50, 5).items()}
    b = {k: v.to_jsonl() for k, v in all_engines(pair, [0], 50, 5).items()}
    assert a == b


def test_metrics_definitions():
    totals = dict.fromkeys(engines.TOTAL_KEYS, 0)
    totals.update(total_drafted=10, total_rolled_back=4, draft_committed=6, draft_runs=3,
                  total_committed=9, target_forwards=3)
    m = metrics(RunResult("sps", [0], [0] * 10, [], totals))
    assert m["RB"] == 0.4 and m["M"] == 2.0 and m["target_forwards"] == 3
    totals.update(total_drafted=0, total_rolled_back=0, draft_runs=0)
    assert metrics(RunResult("ar", [0], [0], [], totals))["RB"] == 0.0


def test_trace_jsonl_schema():
    res = run_sps(same_pair(), [0], 10, 3, np.random.default_rng(0))
    lines = res.to_jsonl().splitlines()
    head = json.loads(lines[0])
    assert head["schema"] == engines.TRACE_SCHEMA and head["engine"] == "sps"
    assert len(lines) == 1 + len(res.traces)
    assert set(json.loads(lines[1])) >= {"mode", "drafted", "verified_n", "rollback_count", "committed",
                                         "event_costs", "branch_record", "decision"}
