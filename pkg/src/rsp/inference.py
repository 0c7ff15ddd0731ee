"""Value-guided decoding strategies.

All strategies return an InferenceReport. Step-level beam search keeps the
best B1 partial solutions, extending each with B2 sampled proposals and
scoring extensions with the value model. Tree decoding first builds a
search tree (model-only evaluation: no reward peeking at inference time),
then sweeps it top-down by stored edge values.
"""

from __future__ import annotations

import random
import time
from dataclasses import dataclass

from .core import (
    Answer,
    ContractViolation,
    ReasoningState,
    answers_equivalent,
    apply_step,
    extract_answer,
    is_terminal,
)
from .datagen import SolutionPath
from .mcts import (
    EvaluationMode,
    SearchConfig,
    SearchNode,
    SearchTree,
    build_tree,
)
from .policy import DETERMINISTIC_TEMPERATURE, PolicyValueBackend, ProposalRequest


@dataclass(frozen=True)
class BeamCandidate:
    """A partial or finished solution plus its current value score."""

    state: ReasoningState
    score: float
    terminal: bool


@dataclass(frozen=True)
class InferenceReport:
    """Outcome of one decode; ``answer`` is None when no path answered."""

    answer: Answer | None
    path: SolutionPath
    elapsed_seconds: float
    steps_taken: int
    candidates_returned: int


def _report_path(state: ReasoningState, answer: Answer | None, seed: int | None) -> SolutionPath:
    return SolutionPath(
        question_id=state.question_id,
        question_text=state.question_text,
        steps=state.steps,
        predicted_answer=answer,
        seed=seed,
    )


def _finish(
    state: ReasoningState,
    started: float,
    candidates_returned: int,
    seed: int | None,
) -> InferenceReport:
    answer = extract_answer(state.steps[-1]) if state.has_answer else None
    return InferenceReport(
        answer=answer,
        path=_report_path(state, answer, seed),
        elapsed_seconds=time.perf_counter() - started,
        steps_taken=len(state.steps),
        candidates_returned=candidates_returned,
    )


def sbs_search(
    question: ReasoningState,
    backend: PolicyValueBackend,
    beam_width: int,
    expansion_width: int,
    max_depth: int = 8,
    temperature: float = 1.0,
    seed: int = 0,
) -> tuple[list[BeamCandidate], list[list[BeamCandidate]]]:
    """Step-level beam search; returns the final beam and per-step history.

    Every live candidate is extended by up to ``expansion_width`` sampled
    steps, each extension scored by the value model; the pooled extensions
    (plus finished candidates, whose scores are frozen) are cut back to the
    best ``beam_width`` by score, ties resolved by insertion order. Stops
    when every candidate is finished, the depth budget runs out, or all
    live candidates dead-end.
    """
    if beam_width < 1 or expansion_width < 1:
        raise ContractViolation("beam_width and expansion_width must be >= 1")
    if is_terminal(question, max_depth):
        raise ContractViolation("cannot decode from a terminal state")
    rng = random.Random(seed)
    beam = [BeamCandidate(state=question, score=0.0, terminal=False)] * beam_width
    history: list[list[BeamCandidate]] = []
    steps_taken = 0
    while steps_taken < max_depth and any(not c.terminal for c in beam):
        pool: list[BeamCandidate] = []
        for candidate in beam:
            if candidate.terminal:
                pool.append(candidate)
                continue
            proposals = backend.propose_steps(
                ProposalRequest(
                    state=candidate.state,
                    n_samples=expansion_width,
                    temperature=temperature,
                    seed=rng.randrange(2**63),
                )
            )
            for proposal in proposals:
                extended = apply_step(candidate.state, proposal.step, max_depth)
                score = backend.predict_value(extended).value
                pool.append(
                    BeamCandidate(
                        state=extended,
                        score=score,
                        terminal=is_terminal(extended, max_depth),
                    )
                )
        if not pool:
            break  # every live candidate dead-ended and nothing had finished
        pool.sort(key=lambda c: -c.score)  # stable: ties keep insertion order
        beam = pool[:beam_width]
        history.append(beam)
        steps_taken += 1
    return beam, history


def sbs_decode(
    question: ReasoningState,
    backend: PolicyValueBackend,
    beam_width: int = 1,
    expansion_width: int = 5,
    max_depth: int = 8,
    temperature: float = 1.0,
    seed: int = 0,
) -> InferenceReport:
    """Step-level beam search decode; returns the top-scored candidate."""
    started = time.perf_counter()
    beam, _ = sbs_search(
        question, backend, beam_width, expansion_width, max_depth, temperature, seed
    )
    best = beam[0]
    return _finish(best.state, started, len(beam), seed)


def greedy_decode(
    question: ReasoningState,
    backend: PolicyValueBackend,
    max_depth: int = 8,
) -> InferenceReport:
    """Follow the backend's single most likely step until termination."""
    return sbs_decode(
        question,
        backend,
        beam_width=1,
        expansion_width=1,
        max_depth=max_depth,
        temperature=DETERMINISTIC_TEMPERATURE,
        seed=0,
    )


def q_sweep(
    root: SearchNode, beam_width: int, q_init: float = 0.0
) -> tuple[SearchNode, list[list[SearchNode]]]:
    """Top-down sweep of a built tree by stored edge values.

    From the current candidate set, pool every child of the unfinished
    candidates (finished ones carry forward at their stored value), rank by
    edge value with insertion-order ties, and keep the best ``beam_width``.
    Returns the final best node and the retained set per level.
    """
    if beam_width < 1:
        raise ContractViolation("beam_width must be >= 1")
    candidates = [root]
    history: list[list[SearchNode]] = []
    while any(not n.terminal for n in candidates):
        pool: list[SearchNode] = []
        for node in candidates:
            if node.terminal:
                pool.append(node)
            else:
                pool.extend(node.children)
        if not pool:
            # Every unfinished candidate is an unexpanded leaf: the tree has
            # no deeper information, so settle for the current best.
            break
        pool.sort(key=lambda n: -n.stats.q(q_init))
        candidates = pool[:beam_width]
        history.append(candidates)
    best = max(candidates, key=lambda n: n.stats.q(q_init))
    return best, history


def inference_search_config(**overrides) -> SearchConfig:
    """Search settings for decode-time trees: model-only evaluation and the
    lower sampling temperature used when building inference trees."""
    settings = {"evaluation": EvaluationMode.MODEL_ONLY, "temperature": 0.6}
    settings.update(overrides)
    return SearchConfig(**settings)


def count_terminal_nodes(tree: SearchTree) -> int:
    total = 0
    stack = [tree.root]
    while stack:
        node = stack.pop()
        stack.extend(node.children)
        if node.terminal:
            total += 1
    return total


def decode_tree(tree: SearchTree, beam_width: int = 1, started: float | None = None) -> InferenceReport:
    """Sweep an already-built tree and report its best path."""
    started = time.perf_counter() if started is None else started
    best, _ = q_sweep(tree.root, beam_width, tree.config.q_init)
    report = _finish(best.state, started, count_terminal_nodes(tree), tree.seed)
    return report


def mcts_decode(
    question: ReasoningState,
    backend: PolicyValueBackend,
    config: SearchConfig | None = None,
    beam_width: int = 1,
    seed: int = 0,
) -> InferenceReport:
    """Build a model-only-evaluation tree, then decode it by edge values."""
    config = config or inference_search_config()
    if config.evaluation is not EvaluationMode.MODEL_ONLY:
        raise ContractViolation(
            "decode-time trees must use model-only evaluation; rewards are "
            "unobservable at inference"
        )
    started = time.perf_counter()
    tree = build_tree(question, None, backend, config, seed)
    return decode_tree(tree, beam_width, started)


def _sample_path(
    question: ReasoningState,
    backend: PolicyValueBackend,
    temperature: float,
    max_depth: int,
    rng: random.Random,
) -> ReasoningState:
    state = question
    while not is_terminal(state, max_depth):
        proposals = backend.propose_steps(
            ProposalRequest(
                state=state,
                n_samples=1,
                temperature=temperature,
                seed=rng.randrange(2**63),
            )
        )
        if not proposals:
            break  # dead end: return the unanswered partial path
        state = apply_step(state, proposals[0].step, max_depth)
    return state


def majority_vote(
    question: ReasoningState,
    backend: PolicyValueBackend,
    k: int = 5,
    temperature: float = 1.0,
    max_depth: int = 8,
    seed: int = 0,
) -> InferenceReport:
    """Sample k full paths and return the most common answer.

    Answers are grouped by equivalence; the largest group wins, with ties
    going to the group whose first member finished earliest. Paths without
    an answer do not vote.
    """
    if k < 1:
        raise ContractViolation("k must be >= 1")
    started = time.perf_counter()
    rng = random.Random(seed)
    finals: list[ReasoningState] = [
        _sample_path(question, backend, temperature, max_depth, rng) for _ in range(k)
    ]
    groups: list[dict] = []  # {"answer": Answer, "count": int, "first": int}
    for index, state in enumerate(finals):
        answer = extract_answer(state.steps[-1]) if state.has_answer else None
        if answer is None:
            continue
        for group in groups:
            if answers_equivalent(group["answer"], answer):
                group["count"] += 1
                break
        else:
            groups.append({"answer": answer, "count": 1, "first": index})
    if not groups:
        return _finish(finals[0], started, k, seed)
    winner = max(groups, key=lambda g: (g["count"], -g["first"]))
    state = finals[winner["first"]]
    report = _finish(state, started, k, seed)
    return report
