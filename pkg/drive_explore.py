"""Throwaway driver for the explorer against the CR corpus."""
import time

from anproc.explore import (
    AttackerModel,
    ExplorationBounds,
    KnowledgeState,
    attacker_closure,
    enumerate_runs,
    observation_implication,
    semantic_validate,
)
from anproc.specfmt import load_corpus
from anproc.terms import App, Const, OperatorDecl, TermTheory, Tup

doc = load_corpus("cr_sig")
proc = doc.procedures["cr"]
proof = doc.proofs["cr_proof"]
theory = doc.theory

impl = observation_implication(proof.observations, proof.goal.formula)
print("implication premise/conclusion built")

# 1 session, 0 attacker events: exactly the honest run.
runs = list(
    enumerate_runs(
        proc,
        AttackerModel(),
        ExplorationBounds(max_sessions=1, max_attacker_events=0, max_term_depth=4),
        theory,
    )
)
print(f"1 session / 0 attacker events: {len(runs)} run(s)")
for r in runs:
    print("  flows:", sorted((f.writer, f.channel.id, f.reader) for f in r.flows()))

bounds = ExplorationBounds(max_sessions=2, max_attacker_events=2, max_term_depth=4)

t0 = time.perf_counter()
outcome = semantic_validate(impl, proc, AttackerModel(), bounds, theory)
t1 = time.perf_counter()
print(
    f"no capabilities: verdict={outcome.verdict} "
    f"examined={outcome.runs_examined} premise-matched={outcome.runs_matching_premise} "
    f"({t1 - t0:.2f}s)"
)

sig = theory.operator("sig")
forger = AttackerModel(capabilities=frozenset({sig}))
t0 = time.perf_counter()
outcome2 = semantic_validate(impl, proc, forger, bounds, theory)
t1 = time.perf_counter()
print(f"with sig capability: verdict={outcome2.verdict} ({t1 - t0:.2f}s)")
if outcome2.counterexample is not None:
    r = outcome2.counterexample
    print("  counterexample flows:")
    for f in r.flows():
        print(f"    {f.writer} -{f.channel.id}-> {f.reader}")
    for ev in r.process.iter_events():
        if ev.location == "ATK":
            print(f"    attacker event {ev!r} kind={ev.kind!r}")

# closure spot checks
a, b = Const("a"), Const("b")
st = attacker_closure(KnowledgeState("atk", frozenset({Tup((a, b))})), theory, 3)
print("closure of {(a,b)}:", sorted(str(t) for t in st.known))
