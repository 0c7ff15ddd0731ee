"""Finite toy environment with an exact value oracle.

Problems are small integer puzzles: starting from a known value, apply a
fixed number of additive operations (one per step), then state the result.
The first move selects a branch: exactly one "golden" first operation leads
to the target no matter how the remaining operations are ordered, while
every "trap" first operation shifts the sum permanently off target. All
later levels apply the remaining operation multiset in any order, so every
non-root subtree has a single outcome. That makes edge values exactly
enumerable while leaving a real search problem (and a greedy trap) at the
root.

The whole state graph is enumerable, so expected rewards under the base
policy can be computed by backward induction and used as a stand-in for a
trained value model.
"""

from __future__ import annotations

import itertools
import math
import random
import re
from dataclasses import dataclass, field
from enum import Enum

from .core import (
    ContractViolation,
    ReasoningState,
    Step,
    StepKind,
    answers_equivalent,
    extract_answer_text,
    normalize_answer,
)
from .policy import (
    PolicyValueBackend,
    Proposal,
    ProposalRequest,
    ValuePrediction,
)

# Below this, temperature is treated as the deterministic (mode-seeking) limit.
_DETERMINISTIC_TEMPERATURE_CUTOFF = 1e-6

_ERROR_OUTPUT = "NameError: name 'value' is not defined"

_OP_LABEL_RE = re.compile(r"\nApply (.+?)\.\n")
_QUESTION_ID_RE = re.compile(r'<question id="([^"]+)">')
_STEP_BLOCK_RE = re.compile(r"<step>.*?</step>", re.S)


class ActionKind(Enum):
    OP = "op"
    ANSWER = "answer"


@dataclass(frozen=True)
class ToyAction:
    """One legal move: an arithmetic operation or stating the answer."""

    label: str
    kind: ActionKind
    prob: float
    value_before: int
    value_after: int
    errored: bool = False
    answer_text: str | None = None


class ToyProblem:
    """Base class: a finite, enumerable single-question environment.

    Subclasses implement ``actions_at(history)`` where ``history`` is the
    tuple of operation labels applied so far. Probabilities at each state
    sum to 1 and every reachable terminal states an answer.
    """

    id: str
    question_text: str
    gold_answer: str
    start_value: int
    horizon: int
    branching: int
    operand_pool: tuple[int, ...]
    greedy_trap: bool

    def __init__(self) -> None:
        self._step_cache: dict[tuple[str, int, float], Step] = {}
        self._value_memo: dict[tuple[str, ...], float] = {}

    def actions_at(self, history: tuple[str, ...]) -> list[ToyAction]:
        raise NotImplementedError

    def step_for(self, action: ToyAction) -> Step:
        """Rendered step for an action; cached because rollouts revisit states."""
        # prob is part of the key: the same operation can be offered with a
        # different remaining-set probability on different paths.
        key = (action.label, action.value_before, action.prob)
        step = self._step_cache.get(key)
        if step is not None:
            return step
        log_prob = math.log(action.prob) if action.prob < 1.0 else 0.0
        if action.kind is ActionKind.ANSWER:
            step = Step.answer_step(
                analysis=f"The value is now {action.value_before}.",
                answer=f" ${action.answer_text}$",
                mean_log_prob=log_prob,
            )
        else:
            delta = action.value_after - action.value_before
            expr = (
                f"value = {action.value_before} + {delta}"
                if delta >= 0
                else f"value = {action.value_before} - {-delta}"
            )
            output = _ERROR_OUTPUT if action.errored else str(action.value_after)
            step = Step.code_step(
                analysis=f"Apply {action.label}.",
                code=f"{expr}\nprint(value)",
                output=output,
                mean_log_prob=log_prob,
                errored=action.errored,
            )
        self._step_cache[key] = step
        return step

    def root_state(self) -> ReasoningState:
        return ReasoningState(question_id=self.id, question_text=self.question_text)


class OpChainProblem(ToyProblem):
    """Generated additive-operation puzzle with a golden/trap root split."""

    def __init__(
        self,
        problem_id: str,
        start_value: int,
        root_ops: list[tuple[str, int, float, bool]],
        golden_label: str,
        rest_ops: list[tuple[str, int, bool]],
        greedy_trap: bool,
    ) -> None:
        super().__init__()
        self.id = problem_id
        self.start_value = start_value
        self.root_ops = root_ops  # (label, delta, prob, errored)
        self.golden_label = golden_label
        self.rest_ops = rest_ops  # (label, delta, errored)
        self.greedy_trap = greedy_trap
        self.horizon = 1 + len(rest_ops)
        # trap subtrees offer the remaining ops plus an early answer action
        self.branching = max(len(root_ops), len(rest_ops) + 1, 1)
        golden_delta = next(d for l, d, _, _ in root_ops if l == golden_label)
        self.target = start_value + golden_delta + sum(d for _, d, _ in rest_ops)
        self.gold_answer = str(self.target)
        self.operand_pool = tuple(
            sorted({d for _, d, _, _ in root_ops} | {d for _, d, _ in rest_ops})
        )
        ops_desc = ", ".join(f"{l}" for l, _, _ in rest_ops)
        self.question_text = (
            f'<question id="{self.id}">\n'
            f"Start with {start_value}. Choose one opening operation, then apply "
            f"each of the remaining operations ({ops_desc}) exactly once, one per "
            f"step, and state the final value.\n"
            f"</question>\n"
        )

    def actions_at(self, history: tuple[str, ...]) -> list[ToyAction]:
        value = self.start_value
        if not history:
            return [
                ToyAction(
                    label=label,
                    kind=ActionKind.OP,
                    prob=prob,
                    value_before=value,
                    value_after=value + delta,
                    errored=errored,
                )
                for label, delta, prob, errored in self.root_ops
            ]
        first, rest_used = history[0], history[1:]
        root = {label: delta for label, delta, _, _ in self.root_ops}
        if first not in root:
            raise ContractViolation(f"{self.id}: unknown opening operation {first!r}")
        value += root[first]
        remaining = {label: (delta, errored) for label, delta, errored in self.rest_ops}
        for label in rest_used:
            if label not in remaining:
                raise ContractViolation(f"{self.id}: illegal operation {label!r}")
            value += remaining.pop(label)[0]
        if remaining:
            # After a wrong opening move any answer is wrong, so the puzzle
            # tolerates answering before the operations run out. That keeps
            # incorrect answered paths shallow enough for a small search
            # budget to harvest while never touching correct-path structure:
            # after the golden opening the only legal answer comes once
            # every operation has been applied.
            early_answer = first != self.golden_label
            weight = len(remaining) + (0.5 if early_answer else 0.0)
            prob = 1.0 / weight
            actions = [
                ToyAction(
                    label=label,
                    kind=ActionKind.OP,
                    prob=prob,
                    value_before=value,
                    value_after=value + delta,
                    errored=errored,
                )
                for label, (delta, errored) in remaining.items()
            ]
            if early_answer:
                actions.append(
                    ToyAction(
                        label="answer",
                        kind=ActionKind.ANSWER,
                        prob=0.5 / weight,
                        value_before=value,
                        value_after=value,
                        answer_text=str(value),
                    )
                )
            return actions
        return [
            ToyAction(
                label="answer",
                kind=ActionKind.ANSWER,
                prob=1.0,
                value_before=value,
                value_after=value,
                answer_text=str(value),
            )
        ]


class TableProblem(ToyProblem):
    """Hand-built environment from an explicit history -> actions table."""

    def __init__(
        self,
        problem_id: str,
        gold_answer: str,
        table: dict[tuple[str, ...], list[ToyAction]],
        start_value: int = 0,
        question_text: str | None = None,
    ) -> None:
        super().__init__()
        self.id = problem_id
        self.gold_answer = gold_answer
        self.table = table
        self.start_value = start_value
        self.greedy_trap = False
        self.horizon = max((len(h) for h in table), default=0) + 1
        self.branching = max((len(a) for a in table.values()), default=1)
        self.operand_pool = ()
        self.question_text = question_text or (
            f'<question id="{self.id}">\nReach the value {gold_answer}.\n</question>\n'
        )

    def actions_at(self, history: tuple[str, ...]) -> list[ToyAction]:
        try:
            return self.table[history]
        except KeyError:
            raise ContractViolation(f"{self.id}: no actions for history {history!r}")


def toy_true_value(problem: ToyProblem, history: tuple[str, ...] = ()) -> float:
    """Exact expected terminal reward under the base policy, by backward
    induction over the finite state graph."""
    cached = problem._value_memo.get(history)
    if cached is not None:
        return cached
    gold = normalize_answer(problem.gold_answer)
    total = 0.0
    for action in problem.actions_at(history):
        if action.kind is ActionKind.ANSWER:
            predicted = normalize_answer(action.answer_text or "")
            outcome = 1.0 if answers_equivalent(predicted, gold) else -1.0
        else:
            outcome = toy_true_value(problem, history + (action.label,))
        total += action.prob * outcome
    problem._value_memo[history] = total
    return total


def generate_problem(problem_seed: int) -> OpChainProblem:
    """Deterministically build one puzzle from a single integer seed."""
    rng = random.Random(problem_seed)
    # Capped at 3 so a default 40-simulation tree always reaches an answer:
    # inside the winning subtree every continuation is equally good, so
    # selection spreads breadth-first and the frontier needs about
    # sum(3!/(3-k)!) ~ 16 expansions to hit the deepest answer node.
    n_rest = rng.randint(2, 3)  # operations after the opening move
    n_traps = rng.randint(2, 4)
    rest_deltas = rng.sample(range(1, 10), n_rest)
    golden_delta = rng.randint(1, 9)
    # A trap opening may answer early, so no trap delta may let any subset
    # of the remaining operations reach the target: exclude every value of
    # golden_delta + sum(subset of rest_deltas). This keeps trap subtrees
    # uniformly incorrect.
    forbidden = {
        golden_delta + sum(combo)
        for size in range(n_rest + 1)
        for combo in itertools.combinations(rest_deltas, size)
    }
    trap_deltas = rng.sample(
        [d for d in range(1, 26) if d not in forbidden], n_traps
    )
    start_value = rng.randint(1, 9)
    greedy_trap = rng.random() < 0.4

    # Trap weights sit just under the golden weight: greedy still picks the
    # golden op on non-trap puzzles, but a cold (untrained-value) search
    # spends enough visits inside trap subtrees to harvest incorrect
    # answered paths, keeping generated training data roughly balanced.
    golden_weight = 3.0 if not greedy_trap else 1.0
    weights = [golden_weight] + [
        (3.0 if greedy_trap and i == 0 else rng.uniform(1.5, 2.5))
        for i in range(n_traps)
    ]
    labels = [f"add {golden_delta} first"] + [
        f"add {d} instead" for d in trap_deltas
    ]
    deltas = [golden_delta] + trap_deltas
    errored = [rng.random() < 0.15 for _ in range(1 + n_traps)]
    total = sum(weights)
    root_ops = [
        (labels[i], deltas[i], weights[i] / total, errored[i])
        for i in range(1 + n_traps)
    ]
    order = list(range(len(root_ops)))
    rng.shuffle(order)
    root_ops = [root_ops[i] for i in order]

    rest_ops = [
        (f"add {d}", d, rng.random() < 0.15) for d in rest_deltas
    ]
    return OpChainProblem(
        problem_id=f"toy-{problem_seed:010d}",
        start_value=start_value,
        root_ops=root_ops,
        golden_label=labels[0],
        rest_ops=rest_ops,
        greedy_trap=greedy_trap,
    )


def problem_from_id(problem_id: str) -> OpChainProblem:
    """Rebuild a generated problem from its self-describing id."""
    m = re.fullmatch(r"toy-(\d+)", problem_id)
    if not m:
        raise ContractViolation(f"not a generated toy problem id: {problem_id!r}")
    return generate_problem(int(m.group(1)))


def toy_corpus(n: int, seed: int) -> list[OpChainProblem]:
    """Deterministic corpus of ``n`` problems; always contains at least one
    problem whose highest-probability (greedy) path is incorrect."""
    rng = random.Random(seed)
    problems: list[OpChainProblem] = []
    ids: set[str] = set()
    while len(problems) < n:
        problem = generate_problem(rng.randrange(2**31))
        if problem.id in ids:
            continue
        ids.add(problem.id)
        problems.append(problem)
    while not any(p.greedy_trap for p in problems):
        problem = generate_problem(rng.randrange(2**31))
        if problem.greedy_trap:
            problems[-1] = problem
    return problems


def corpus_to_records(problems: list[ToyProblem]) -> list[dict]:
    return [
        {"id": p.id, "question": p.question_text, "gold_answer": p.gold_answer}
        for p in problems
    ]


class Mode(Enum):
    COLD = "cold"      # value model before any training: predicts 0
    ORACLE = "oracle"  # exact expected reward, a perfectly trained model


@dataclass
class ToyBackend(PolicyValueBackend):
    """Policy/value provider over toy problems.

    The proposal distribution applies temperature to the per-state action
    table (p ** (1/t), renormalized) and samples without replacement, so a
    request for n >= branching distinct steps returns every legal move.
    Referentially transparent given (state, seed). Safe for concurrent use:
    all caches are per-problem dictionaries with idempotent values.
    """

    problems: dict[str, ToyProblem] = field(default_factory=dict)
    mode: Mode = Mode.COLD

    @classmethod
    def for_corpus(cls, corpus: list[ToyProblem], mode: Mode = Mode.COLD) -> "ToyBackend":
        return cls(problems={p.id: p for p in corpus}, mode=mode)

    def problem_for(self, question_id: str) -> ToyProblem:
        problem = self.problems.get(question_id)
        if problem is None:
            problem = problem_from_id(question_id)
            self.problems[question_id] = problem
        return problem

    def decode_state(self, state: ReasoningState) -> tuple[ToyProblem, tuple[str, ...], str | None]:
        """Map a state to (problem, op-label history, answer or None)."""
        problem = self.problem_for(state.question_id)
        labels: list[str] = []
        answered: str | None = None
        for step in state.steps:
            if step.kind is StepKind.ANSWER:
                answered = step.extracted_answer
            else:
                m = _OP_LABEL_RE.search(step.text)
                if not m:
                    raise ContractViolation("step text does not name an operation")
                labels.append(m.group(1))
        return problem, tuple(labels), answered

    def propose_steps(self, request: ProposalRequest) -> list[Proposal]:
        problem, history, answered = self.decode_state(request.state)
        if answered is not None:
            raise ContractViolation("cannot propose steps for an answered state")
        actions = problem.actions_at(history)
        chosen = _sample_actions(
            actions, request.n_samples, request.temperature, request.seed
        )
        return [Proposal(step=problem.step_for(action)) for action in chosen]

    def predict_value(self, state: ReasoningState) -> ValuePrediction:
        if self.mode is Mode.COLD:
            return ValuePrediction(value=0.0)
        problem, history, answered = self.decode_state(state)
        if answered is not None:
            gold = normalize_answer(problem.gold_answer)
            correct = answers_equivalent(normalize_answer(answered), gold)
            return ValuePrediction(value=1.0 if correct else -1.0)
        return ValuePrediction(value=toy_true_value(problem, history))

    def true_value(self, state: ReasoningState) -> float:
        """Exact expected reward of a state, independent of ``mode``."""
        problem, history, answered = self.decode_state(state)
        if answered is not None:
            gold = normalize_answer(problem.gold_answer)
            return 1.0 if answers_equivalent(normalize_answer(answered), gold) else -1.0
        return toy_true_value(problem, history)


def _sample_actions(
    actions: list[ToyAction], n: int, temperature: float, seed: int | None
) -> list[ToyAction]:
    n = min(n, len(actions))
    if temperature < _DETERMINISTIC_TEMPERATURE_CUTOFF:
        ranked = sorted(
            range(len(actions)), key=lambda i: (-actions[i].prob, i)
        )
        return [actions[i] for i in ranked[:n]]
    # Temperature-adjusted weights computed in log space for small t.
    logs = [math.log(a.prob) / temperature for a in actions]
    peak = max(logs)
    weights = [math.exp(l - peak) for l in logs]
    rng = random.Random(seed) if seed is not None else random.Random()
    picked: list[ToyAction] = []
    alive = list(range(len(actions)))
    for _ in range(n):
        total = sum(weights[i] for i in alive)
        mark = rng.random() * total
        acc = 0.0
        chosen = alive[-1]
        for i in alive:
            acc += weights[i]
            if mark < acc:
                chosen = i
                break
        picked.append(actions[chosen])
        alive.remove(chosen)
    return picked


def toy_state_decoder(backend: ToyBackend):
    """Decoder mapping rendered state text back to a ReasoningState.

    Used to serve a toy backend over the wire protocol: the question id is
    embedded in the question tag, and step metadata is rebuilt from the
    rendered blocks (generation log-probs are not recoverable from text and
    are irrelevant to the toy backend's semantics).
    """

    def decode(rendered: str) -> ReasoningState:
        m = _QUESTION_ID_RE.search(rendered)
        if not m:
            raise ContractViolation("rendered state lacks a question id")
        problem = backend.problem_for(m.group(1))
        steps = []
        for block in _STEP_BLOCK_RE.findall(rendered):
            if "Final Answer:" in block:
                steps.append(
                    Step(
                        kind=StepKind.ANSWER,
                        text=block,
                        mean_log_prob=0.0,
                        extracted_answer=extract_answer_text(block).normalized,
                    )
                )
            else:
                steps.append(
                    Step(
                        kind=StepKind.CODE,
                        text=block,
                        mean_log_prob=0.0,
                        contains_code="<code>" in block,
                    )
                )
        return ReasoningState(
            question_id=problem.id,
            question_text=problem.question_text,
            steps=tuple(steps),
        )

    return decode
