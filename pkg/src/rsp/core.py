"""Domain types shared by every other module.

A reasoning attempt is a question followed by a sequence of rendered steps.
Each step is either a code step (analysis + code + execution output) or an
answer step (analysis + final answer). States are immutable; the transition
is plain text concatenation.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction


class EngineError(Exception):
    """Base class for errors raised by this package."""


class ContractViolation(EngineError):
    """A caller or a backend broke a documented precondition."""


class MalformedStepError(EngineError):
    """An answer step does not carry a recognizable final answer."""


STEP_OPEN = "<step>"
STEP_CLOSE = "</step>"
FINAL_ANSWER_MARKER = "Final Answer:"

# Forced-termination depth when the caller supplies no explicit budget.
DEFAULT_MAX_DEPTH = 8


class StepKind(Enum):
    CODE = "c"
    ANSWER = "a"


def render_code_step(analysis: str, code: str, output: str) -> str:
    """Render a code step in the canonical XML block layout."""
    return (
        f"{STEP_OPEN}\n<p>\n{analysis}\n</p>\n"
        f"<code>\n{code}\n</code>\n"
        f"<p>\n{output}\n</p>\n{STEP_CLOSE}"
    )


def render_answer_step(analysis: str, answer: str) -> str:
    """Render an answer step; ``answer`` is placed verbatim after the marker."""
    return (
        f"{STEP_OPEN}\n<p>\n{analysis}\n</p>\n"
        f"<p>\n{FINAL_ANSWER_MARKER}{answer}\n</p>\n{STEP_CLOSE}"
    )


@dataclass(frozen=True)
class Step:
    """One rendered reasoning step plus generation metadata.

    ``mean_log_prob`` is the mean per-token log-probability the generator
    assigned to the step text; it must be <= 0 so that the derived prior
    exp(mean_log_prob) lands in (0, 1].
    """

    kind: StepKind
    text: str
    mean_log_prob: float
    contains_code: bool = False
    code_errored: bool = False
    code_output: str | None = None
    extracted_answer: str | None = None

    def __post_init__(self) -> None:
        if not self.text:
            raise ContractViolation("step text must be non-empty")
        if not self.text.startswith(STEP_OPEN) or not self.text.endswith(STEP_CLOSE):
            raise ContractViolation(
                f"step text must be delimited by {STEP_OPEN}...{STEP_CLOSE}"
            )
        if self.mean_log_prob > 0.0:
            raise ContractViolation("mean_log_prob must be <= 0")
        if self.kind is StepKind.ANSWER:
            if self.extracted_answer is None:
                raise ContractViolation("answer step requires extracted_answer")
            if self.contains_code:
                raise ContractViolation("answer step cannot contain code")
        elif self.extracted_answer is not None:
            raise ContractViolation("only answer steps carry extracted_answer")

    @property
    def prior(self) -> float:
        return math.exp(self.mean_log_prob)

    @classmethod
    def code_step(
        cls,
        analysis: str,
        code: str,
        output: str,
        mean_log_prob: float,
        errored: bool = False,
    ) -> "Step":
        return cls(
            kind=StepKind.CODE,
            text=render_code_step(analysis, code, output),
            mean_log_prob=mean_log_prob,
            contains_code=True,
            code_errored=errored,
            code_output=output,
        )

    @classmethod
    def answer_step(cls, analysis: str, answer: str, mean_log_prob: float) -> "Step":
        return cls(
            kind=StepKind.ANSWER,
            text=render_answer_step(analysis, answer),
            mean_log_prob=mean_log_prob,
            extracted_answer=normalize_answer(answer).normalized,
        )


@dataclass(frozen=True)
class ReasoningState:
    """A question plus the steps taken so far.

    At most one answer step may be present and it must be last.
    """

    question_id: str
    question_text: str
    steps: tuple[Step, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        for i, step in enumerate(self.steps):
            if step.kind is StepKind.ANSWER and i != len(self.steps) - 1:
                raise ContractViolation("answer step must be the last step")

    @property
    def depth(self) -> int:
        return len(self.steps)

    @property
    def has_answer(self) -> bool:
        return bool(self.steps) and self.steps[-1].kind is StepKind.ANSWER

    def render(self) -> str:
        """Question text followed by each step's text, concatenated in order."""
        return self.question_text + "".join(step.text for step in self.steps)


@dataclass(frozen=True)
class Answer:
    """A final answer in raw and normalized form.

    ``numeric`` holds an exact rational when the normalized text parses as
    one, a float for other finite reals, and None for non-numeric answers.
    """

    raw: str
    normalized: str
    numeric: Fraction | float | None = None


@dataclass(frozen=True)
class Reward:
    """Terminal rewards are +/-1; non-terminal steps earn 0."""

    value: float

    def __post_init__(self) -> None:
        if self.value not in (-1.0, 0.0, 1.0):
            raise ContractViolation("reward must be one of -1, 0, +1")


_INTERVAL_RE = re.compile(
    r"^([\[(])\s*([^,\s][^,]*?)\s*,\s*([^,\s][^,]*?)\s*([\])])$"
)


def _strip_math_delimiters(text: str) -> str:
    prev = None
    while prev != text:
        prev = text
        text = text.strip()
        if len(text) >= 4 and text.startswith("\\(") and text.endswith("\\)"):
            text = text[2:-2]
            continue
        if len(text) >= 2 and text.startswith("$") and text.endswith("$"):
            text = text[1:-1]
    return text


def _parse_numeric(text: str) -> Fraction | float | None:
    try:
        return Fraction(text)
    except (ValueError, ZeroDivisionError):
        pass
    try:
        value = float(text)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def normalize_answer(raw: str) -> Answer:
    """Normalize an answer string for comparison.

    Strips surrounding whitespace, TeX math delimiters and trailing periods,
    lowercases the text, canonicalizes simple interval notation, and parses
    a numeric form when one exists. Idempotent: normalizing the normalized
    text yields the same result.
    """
    text = _strip_math_delimiters(raw)
    text = text.rstrip(".").strip()
    text = text.lower()
    interval = _INTERVAL_RE.match(text)
    if interval:
        left, lo, hi, right = interval.groups()
        text = f"{left}{lo},{hi}{right}"
        return Answer(raw=raw, normalized=text, numeric=None)
    return Answer(raw=raw, normalized=text, numeric=_parse_numeric(text))


def answers_equivalent(a: Answer, b: Answer) -> bool:
    """True when two normalized answers denote the same value.

    Numeric answers compare exactly as rationals; if either side parsed only
    as a float the comparison allows 1e-9 relative tolerance. Non-numeric
    answers compare by normalized text, so interval bracket types matter.
    """
    if a.numeric is not None and b.numeric is not None:
        if isinstance(a.numeric, Fraction) and isinstance(b.numeric, Fraction):
            return a.numeric == b.numeric
        return math.isclose(
            float(a.numeric), float(b.numeric), rel_tol=1e-9, abs_tol=1e-12
        )
    return a.normalized == b.normalized


def extract_answer_text(text: str) -> Answer:
    """Parse the final answer out of rendered answer-step text.

    Raises MalformedStepError when the final-answer marker is absent,
    surfacing generator bugs early.
    """
    idx = text.find(FINAL_ANSWER_MARKER)
    if idx < 0:
        raise MalformedStepError("answer step without final-answer marker")
    tail = text[idx + len(FINAL_ANSWER_MARKER):]
    end = tail.find("\n</p>")
    if end >= 0:
        tail = tail[:end]
    return normalize_answer(tail)


def extract_answer(step: Step) -> Answer | None:
    """Pull the normalized final answer out of an answer step; None for code steps."""
    if step.kind is not StepKind.ANSWER:
        return None
    return extract_answer_text(step.text)


def is_terminal(state: ReasoningState, max_depth: int = DEFAULT_MAX_DEPTH) -> bool:
    """A state is terminal once it answers or exhausts the depth budget."""
    return state.has_answer or state.depth >= max_depth


def apply_step(
    state: ReasoningState, step: Step, max_depth: int = DEFAULT_MAX_DEPTH
) -> ReasoningState:
    """Append one step, enforcing that the source state could still act."""
    if state.has_answer:
        raise ContractViolation("cannot extend a state that already answered")
    if state.depth >= max_depth:
        raise ContractViolation("cannot extend a state at the depth budget")
    return ReasoningState(
        question_id=state.question_id,
        question_text=state.question_text,
        steps=state.steps + (step,),
    )


def derive_seed(*parts: int) -> int:
    """Mix integers into a stable derived seed (FNV-1a over the parts)."""
    acc = 0xCBF29CE484222325
    for part in parts:
        for byte in int(part).to_bytes(8, "little", signed=True):
            acc ^= byte
            acc = (acc * 0x100000001B3) % (1 << 64)
    return acc
