"""Decoding engines over a toy draft/target pair.

All engines emit the same per-step trace. Every drafted token carries its
own verification variate (see :class:`branching.DraftToken`), and the
residual or bonus token is drawn from the same stream afterwards, so one seed
fixes a whole run.

Token bookkeeping: a drafted token ends up accepted, rolled back (discarded
because verification rejected it or something before it) or pruned
(discarded by branch selection or the retained-token rule without being
rejected). ``RB = rolled_back / (accepted + rolled_back)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import branching, hrad, toylm
from .branching import ARGMAX_P, Branch, draft_one
from .speccore import BRANCH_POINT_CHECK, residual_dist, verify_sequence

DRAFTING = "DRAFTING"
VERIFICATION = "VERIFICATION"
TRACE_SCHEMA = "specbranch-trace/v1"
ENGINES = ("ar", "sps", "adaedl", "pearl", "specbranch")


@dataclass
class StepTrace:
    mode: str
    drafted: list = field(default_factory=list)  # [token, confidence] pairs
    verified_n: int | None = None
    rollback_count: int = 0
    pruned_count: int = 0
    branch_record: dict | None = None
    decision: dict | None = None
    committed: list = field(default_factory=list)
    target_sampled: int = 0
    # (kind, units, phase): kinds draft/verify/predict; same-phase events overlap
    event_costs: list = field(default_factory=list)
    retained_confidences: list | None = None

    def to_dict(self) -> dict:
        d = {
            "mode": self.mode,
            "drafted": self.drafted,
            "verified_n": self.verified_n,
            "rollback_count": self.rollback_count,
            "pruned_count": self.pruned_count,
            "branch_record": self.branch_record,
            "decision": self.decision,
            "committed": self.committed,
            "target_sampled": self.target_sampled,
            "event_costs": [list(e) for e in self.event_costs],
        }
        if self.retained_confidences is not None:
            d["retained_confidences"] = self.retained_confidences
        return d


TOTAL_KEYS = (
    "total_drafted", "total_accepted", "total_rolled_back", "total_pruned",
    "total_committed", "draft_committed", "target_sampled", "draft_forwards",
    "draft_passes", "target_forwards", "predict_calls", "confidence_evals", "unresolved",
    "draft_runs",
)


@dataclass
class RunResult:
    engine: str
    prompt: list
    output: list
    traces: list
    totals: dict

    def to_jsonl(self) -> str:
        head = {"schema": TRACE_SCHEMA, "engine": self.engine, "prompt": self.prompt,
                "output": self.output, "totals": self.totals}
        lines = [json.dumps(head, sort_keys=True)]
        lines += [json.dumps(t.to_dict(), sort_keys=True) for t in self.traces]
        return "\n".join(lines) + "\n"


class _Run:
    """Mutable run state shared by the engines."""

    def __init__(self, engine, prompt, max_len):
        if max_len < len(prompt):
            raise ValueError("max_len must be >= prompt length")
        self.engine = engine
        self.prompt = list(prompt)
        self.seq = list(prompt)
        self.max_len = max_len
        self.traces = []
        self.t = dict.fromkeys(TOTAL_KEYS, 0)
        self.open_run = False

    @property
    def done(self):
        return len(self.seq) >= self.max_len

    def commit(self, trace, drafts, sampled=None):
        """Append draft-sourced tokens, then an optional target-sampled one, up to max_len."""
        room = max(self.max_len - len(self.seq), 0)
        drafts = [int(x) for x in drafts[:room]]
        self.seq += drafts
        trace.committed += drafts
        self.t["draft_committed"] += len(drafts)
        if drafts:
            self.open_run = True
        if sampled is not None and room > len(drafts):
            self.seq.append(int(sampled))
            trace.committed.append(int(sampled))
            trace.target_sampled += 1
            self.t["target_sampled"] += 1
            self.open_run = False

    def count(self, trace, *, accepted=0, rolled_back=0, pruned=0):
        self.t["total_accepted"] += accepted
        self.t["total_rolled_back"] += rolled_back
        self.t["total_pruned"] += pruned
        trace.rollback_count += rolled_back
        trace.pruned_count += pruned

    def result(self) -> RunResult:
        t = self.t
        t["total_drafted"] = t["total_accepted"] + t["total_rolled_back"]
        t["total_committed"] = len(self.seq) - len(self.prompt)
        # runs of draft tokens closed by a target sample, plus a trailing open run
        t["draft_runs"] = t["target_sampled"] + (1 if self.open_run else 0)
        return RunResult(self.engine, self.prompt, list(self.seq), self.traces, dict(t))


def _target_dists(pair, seq, tokens):
    """Target distributions at each drafted position plus the one after."""
    ctx = list(seq)
    out = [pair.target.lookup(ctx)[0]]
    for tok in tokens:
        ctx.append(tok)
        out.append(pair.target.lookup(ctx)[0])
    return out


def _draft_run(pair, seq, n, rng):
    ctx = list(seq)
    out = []
    for _ in range(n):
        d = draft_one(pair, ctx, rng)
        out.append(d)
        ctx.append(d.token)
    return out


def _verify(pair, seq, drafts, full_action="bonus_token"):
    toks = [d.token for d in drafts]
    ps = _target_dists(pair, seq, toks)
    out = verify_sequence(toks, [d.q for d in drafts], ps[:-1], r=[d.r for d in drafts],
                          full_action=full_action)
    return out, ps


# -- baselines --------------------------------------------------------------

def run_autoregressive(pair, prompt, max_len, rng) -> RunResult:
    run = _Run("ar", prompt, max_len)
    while not run.done:
        tr = StepTrace(VERIFICATION, event_costs=[("verify", 1, 0)])
        p, cdf = pair.target.lookup(run.seq)
        run.commit(tr, [], toylm.sample_from(p, rng, cdf))
        run.t["target_forwards"] += 1
        run.traces.append(tr)
    return run.result()


def _sd_round(run, pair, drafts, rng, trace):
    """Verify one serial draft block, commit, and account for it."""
    out, ps = _verify(pair, run.seq, drafts)
    n = out.n_accepted
    trace.verified_n = n
    if out.residual is not None:
        extra = toylm.sample_from(out.residual, rng)
    else:
        extra = toylm.sample_from(ps[-1], rng)
    run.commit(trace, [d.token for d in drafts[:n]], extra)
    run.count(trace, accepted=n, rolled_back=len(drafts) - n)
    run.t["target_forwards"] += 1
    run.t["draft_forwards"] += len(drafts)
    run.t["draft_passes"] += len(drafts)
    trace.event_costs = [("draft", len(drafts), 0), ("verify", 1, 1)]
    trace.drafted = [[d.token, d.conf] for d in drafts]
    run.traces.append(trace)


def run_sps(pair, prompt, max_len, gamma, rng) -> RunResult:
    """Serial speculative sampling: draft gamma, verify, residual or bonus token."""
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    run = _Run("sps", prompt, max_len)
    while not run.done:
        drafts = _draft_run(pair, run.seq, gamma, rng)
        _sd_round(run, pair, drafts, rng, StepTrace(VERIFICATION))
    return run.result()


def run_adaedl(pair, prompt, max_len, policy: hrad.PolicyConfig, rng) -> RunResult:
    """Serial SD whose block ends at the first token failing the entropy test."""
    if policy.policy_kind != "entropy":
        raise hrad.PolicyConfigError("run_adaedl needs policy_kind='entropy'")
    if not policy.lam > 0:
        raise hrad.PolicyConfigError("lambda must be > 0")
    run = _Run("adaedl", prompt, max_len)
    while not run.done:
        ctx = list(run.seq)
        drafts = []
        for _ in range(policy.gamma_max):
            d = draft_one(pair, ctx, rng)
            drafts.append(d)
            ctx.append(d.token)
            if hrad.entropy_score(d.q, policy.lam) < policy.epsilon:
                break
        _sd_round(run, pair, drafts, rng, StepTrace(VERIFICATION))
    return run.result()


def run_pearl(pair, prompt, max_len, gamma, rng) -> RunResult:
    """Parallel SD with pre-verify and post-verify.

    Pre-verify: the target checks the first drafted token while the draft
    writes a gamma-token chunk after it. Post-verify: the target checks the
    pending chunk while the draft writes the next one. A rejection discards
    everything in flight.
    """
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    run = _Run("pearl", prompt, max_len)
    pending = []
    while not run.done:
        tr = StepTrace(VERIFICATION)
        if not pending:
            first = draft_one(pair, run.seq, rng)
            chunk = _draft_run(pair, run.seq + [first.token], gamma, rng)
            out, ps = _verify(pair, run.seq, [first])
            tr.drafted = [[d.token, d.conf] for d in [first] + chunk]
            tr.event_costs = [("draft", 1, 0), ("verify", 1, 1), ("draft", gamma, 1)]
            run.t["draft_forwards"] += 1 + gamma
            run.t["draft_passes"] += 1 + gamma
            run.t["target_forwards"] += 1
            tr.verified_n = out.n_accepted
            if out.n_accepted == 0:
                run.commit(tr, [], toylm.sample_from(out.residual, rng))
                run.count(tr, rolled_back=1 + gamma)
            else:
                run.commit(tr, [first.token])
                run.count(tr, accepted=1)
                pending = chunk
        else:
            chunk = _draft_run(pair, run.seq + [d.token for d in pending], gamma, rng)
            out, ps = _verify(pair, run.seq, pending)
            n = out.n_accepted
            tr.drafted = [[d.token, d.conf] for d in chunk]
            tr.event_costs = [("verify", 1, 0), ("draft", gamma, 0)]
            run.t["draft_forwards"] += gamma
            run.t["draft_passes"] += gamma
            run.t["target_forwards"] += 1
            tr.verified_n = n
            if n == len(pending):
                run.commit(tr, [d.token for d in pending])
                run.count(tr, accepted=n)
                pending = chunk
            else:
                y = toylm.sample_from(out.residual, rng)
                run.commit(tr, [d.token for d in pending[:n]], y)
                run.count(tr, accepted=n, rolled_back=len(pending) - n + len(chunk))
                pending = []
        run.traces.append(tr)
    if pending:
        # drafted but never resolved; kept out of RB
        run.t["unresolved"] = len(pending)
    return run.result()


# -- SpecBranch ----------------------------------------------------------------

POSTERIOR, APRIORI = "posterior", "apriori"


class SpecBranchEngine:
    """Two-mode state machine: a drafting stage, then repeated branch stages.

    State between branch stages is the pending verification block ``V``
    (drafted, not yet checked), the branch point ``bp`` after it (drafted,
    or ``None`` when it is the first token of the next stage) and
    ``seed``, already-drafted tokens following ``bp`` on its own path.
    """

    def __init__(self, pair, prompt, max_len, policy: hrad.PolicyConfig, classifier,
                 k_max: int, rng, mode: str = POSTERIOR, *, rule: str = ARGMAX_P,
                 K: int = toylm.FEATURE_K):
        if policy.policy_kind not in ("hybrid", "oracle", "confidence", "fixed"):
            raise hrad.PolicyConfigError(
                f"SpecBranch supports hybrid/oracle/confidence/fixed policies, not {policy.policy_kind!r}")
        if policy.policy_kind == "hybrid" and classifier is None and policy.forced_class is None:
            raise hrad.PolicyConfigError("hybrid policy needs a trained classifier")
        if mode not in (POSTERIOR, APRIORI):
            raise ValueError(f"unknown mode {mode!r}")
        if not prompt:
            raise ValueError("SpecBranch needs a non-empty prompt")
        self.pair = pair
        self.policy = policy
        self.classifier = classifier
        self.k_max = k_max
        self.rng = rng
        self.mode = mode
        self.rule = rule
        self.K = K
        self.budget = math.ceil(pair.speed_ratio_c)
        self.run = _Run("specbranch", prompt, max_len)
        self.state = DRAFTING
        self.V, self.bp, self.seed = [], None, []

    # decisions

    def _features(self, seq):
        return toylm.features(self.pair, seq[:-1], seq[-1], self.K)

    def _decide(self, seq, trace, rollout=None):
        self.run.t["predict_calls"] += 1
        z = None
        if self.policy.policy_kind == "hybrid" and self.policy.forced_class is None:
            z = self._features(seq)
        dec = hrad.decide(self.policy, self.classifier, z, rollout)
        trace.decision = dec.to_dict()
        return dec

    def _oracle_rollout(self, seq, drafts):
        out, _ = _verify(self.pair, seq, drafts)
        return out.n_accepted, len(drafts)

    # stages

    def _drafting(self):
        run, pol, tr = self.run, self.policy, StepTrace(DRAFTING)
        buf, rollout = [], None
        if pol.policy_kind == "oracle" and pol.forced_class is None:
            buf = _draft_run(self.pair, run.seq, pol.gamma_max, self.rng)
            rollout = self._oracle_rollout(run.seq, buf)
        dec = self._decide(run.seq, tr, rollout)
        ctx = list(run.seq)
        V, bp = [], None

        def nxt(i):
            if i < len(buf):
                return buf[i]
            return draft_one(self.pair, ctx, self.rng)

        if dec.s == hrad.ALL_REJECT:
            bp = nxt(0)
            used = 1
        elif dec.s == hrad.CONFIDENCE:
            used = 0
            for i in range(pol.gamma_max):
                d = nxt(i)
                used += 1
                run.t["confidence_evals"] += 1
                if d.conf <= pol.epsilon:
                    bp = d
                    break
                V.append(d)
                ctx.append(d.token)
        else:
            for i in range(pol.gamma_max):
                d = nxt(i)
                V.append(d)
                ctx.append(d.token)
            used = pol.gamma_max
        self.V, self.bp, self.seed = V, bp, (buf[used:] if bp is not None else [])
        drafted = V + ([bp] if bp is not None else [])
        tr.drafted = [[d.token, d.conf] for d in drafted]
        tr.event_costs = [("predict", 1, 0), ("draft", len(drafted), 1)]
        run.t["draft_forwards"] += len(drafted)
        run.t["draft_passes"] += len(drafted)
        self.state = VERIFICATION
        run.traces.append(tr)

    def _extend(self, branch, prefix, cap, seed, stop_below, rng):
        """Extend one branch; returns the number of freshly drafted tokens."""
        ctx = list(prefix) + [branch.branch_token]
        cont = []
        fresh = 0
        for i in range(cap):
            if i < len(seed):
                d = seed[i]
            else:
                d = draft_one(self.pair, ctx, rng)
                fresh += 1
            cont.append(d)
            ctx.append(d.token)
            if stop_below is not None and d.conf <= stop_below:
                break
        branch.continuation = cont
        branch.masked_positions = branching.mask_positions([d.conf for d in cont], self.policy.epsilon)
        return fresh, len(seed) - min(len(seed), len(cont))

    def _branch_stage(self):
        run, pol, pair = self.run, self.policy, self.pair
        tr = StepTrace(VERIFICATION)
        events = [("verify", 1, 0)]
        V = self.V
        prefix = run.seq + [d.token for d in V]
        depth = 0
        drafted_now = []
        bp = self.bp
        if bp is None:
            bp = draft_one(pair, prefix, self.rng)
            depth = 1
            drafted_now.append(bp)

        pre = None
        cap, stop_below = self.budget - depth, None
        if self.mode == APRIORI:
            rollout = None
            if pol.policy_kind == "oracle" and pol.forced_class is None:
                look = self.seed[:cap]
                rollout = self._oracle_rollout(prefix + [bp.token], look) if look else (0, 0)
            pre = self._decide(run.seq, tr, rollout)
            events.append(("predict", 1, 0))
            if pre.s == hrad.ALL_REJECT:
                cap = min(cap, 1)
            elif pre.s == hrad.CONFIDENCE:
                stop_below = pol.epsilon

        k = branching.adaptive_k(bp.conf, self.k_max)
        tokens = branching.spawn_branches(bp.q, k, include=bp.token)
        rngs = [self.rng] + (list(self.rng.spawn(len(tokens) - 1)) if len(tokens) > 1 else [])
        branches = []
        fresh_max, fresh_total, dropped_seed = 0, 0, 0
        for i, tok in enumerate(tokens):
            b = Branch(tok, float(bp.q[tok]), head=bp if i == 0 else None)
            seed = self.seed if i == 0 else []
            fresh, dropped = self._extend(b, prefix, cap, seed, stop_below, rngs[i])
            if i == 0:
                dropped_seed = dropped
            fresh_max = max(fresh_max, fresh)
            fresh_total += fresh
            branches.append(b)
            drafted_now += b.continuation[len(seed):] if i == 0 else b.continuation
        depth += fresh_max
        events.append(("draft", depth, 0))
        run.t["draft_forwards"] += (1 if self.bp is None else 0) + fresh_total
        run.t["draft_passes"] += depth
        run.t["target_forwards"] += 1
        tr.drafted = [[d.token, d.conf] for d in drafted_now]
        bset = branching.BranchSet(tuple(prefix), branches, max(self.k_max, 1))
        tr.branch_record = bset.summary()

        primary = branches[0]
        others = sum(len(b) for b in branches[1:])
        out, ps = _verify(pair, run.seq, V, full_action=BRANCH_POINT_CHECK)
        n = out.n_accepted
        tr.verified_n = n
        if n < len(V):
            y = toylm.sample_from(out.residual, self.rng)
            run.commit(tr, [d.token for d in V[:n]], y)
            run.count(tr, accepted=n, rolled_back=len(V) - n + len(primary) + dropped_seed,
                      pruned=others)
            self._to_drafting(tr)
        else:
            run.commit(tr, [d.token for d in V])
            run.count(tr, accepted=len(V))
            p_b = ps[-1]
            r = [bp.r] + [float(g.random()) for g in rngs[1:]]
            res = branching.verify_branch_point(branches, p_b, bp.q, rule=self.rule, r=r)
            tr.branch_record["accepted"] = list(res.accepted)
            tr.branch_record["selected"] = res.selected
            if res.rejected:
                y = toylm.sample_from(residual_dist(p_b, bp.q), self.rng)
                run.commit(tr, [], y)
                run.count(tr, rolled_back=len(primary) + dropped_seed, pruned=others)
                tr.branch_record["residual_against"] = "shared_branch_point_q"
                self._to_drafting(tr)
            else:
                sel = branches[res.selected]
                run.commit(tr, [sel.branch_token])
                run.count(tr, accepted=1)
                # losing alternatives, the sampled path included, are pruned:
                # the target never rejected them
                if res.selected == 0:
                    run.count(tr, pruned=others + dropped_seed)
                else:
                    run.count(tr, pruned=len(primary) + dropped_seed + others - len(sel))
                if pre is None:
                    rollout = None
                    if pol.policy_kind == "oracle" and pol.forced_class is None:
                        rollout = (self._oracle_rollout(run.seq, sel.continuation)
                                   if sel.continuation else (0, 0))
                    dec = self._decide(run.seq, tr, rollout)
                    events.append(("predict", 1, 1))
                else:
                    dec = pre
                cont = sel.continuation
                keep = branching.retained_count(dec, [d.conf for d in cont], pol.epsilon)
                if dec.s == hrad.CONFIDENCE:
                    run.t["confidence_evals"] += min(keep + 1, len(cont))
                tr.retained_confidences = [d.conf for d in cont[:keep]]
                self.V = cont[:keep]
                if keep < len(cont):
                    self.bp, self.seed = cont[keep], cont[keep + 1:]
                else:
                    self.bp, self.seed = None, []
        tr.event_costs = events
        run.traces.append(tr)

    def _to_drafting(self, trace):
        self.V, self.bp, self.seed = [], None, []
        self.state = DRAFTING

    def step(self):
        if self.state == DRAFTING:
            self._drafting()
        else:
            self._branch_stage()

    def finish(self) -> RunResult:
        leftover = len(self.V) + (1 if self.bp is not None else 0) + len(self.seed)
        if leftover:
            self.run.t["unresolved"] = leftover
        return self.run.result()


def run_specbranch(pair, prompt, max_len, policy, classifier, k_max, rng, mode=POSTERIOR,
                   *, rule=ARGMAX_P, max_steps=None, K=toylm.FEATURE_K) -> RunResult:
    eng = SpecBranchEngine(pair, prompt, max_len, policy, classifier, k_max, rng, mode,
                           rule=rule, K=K)
    steps = 0
    while not eng.run.done and (max_steps is None or steps < max_steps):
        eng.step()
        steps += 1
    return eng.finish()


# -- metrics ------------------------------------------------------------------

def metrics(result: RunResult) -> dict:
    t = result.totals
    drafted = t["total_drafted"]
    return {
        "M": t["draft_committed"] / t["draft_runs"] if t["draft_runs"] else 0.0,
        "RB": t["total_rolled_back"] / drafted if drafted else 0.0,
        "tokens_committed": t["total_committed"],
        "target_forwards": t["target_forwards"],
    }
