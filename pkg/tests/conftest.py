"""Shared test helpers: step factories, a scripted backend, and the
acceptance-criteria summary printer."""

from __future__ import annotations

import sys

from rsp.core import ReasoningState, Step
from rsp.policy import PolicyValueBackend, Proposal, ProposalRequest, ValuePrediction


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion, after the normal report."""
    module = sys.modules.get("test_acceptance")
    if module is None or not getattr(module, "RESULTS", None):
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for number in sorted(module.CRITERIA):
        outcome = module.RESULTS.get(number)
        label = "PASS" if outcome else ("FAIL" if outcome is False else "SKIP")
        terminalreporter.write_line(
            f"{label}  criterion {number:2d}: {module.CRITERIA[number]}"
        )


def code_step(
    analysis: str = "work",
    code: str = "x = 1",
    output: str = "1",
    mean_log_prob: float = -0.5,
    errored: bool = False,
) -> Step:
    return Step.code_step(
        analysis=analysis,
        code=code,
        output=output,
        mean_log_prob=mean_log_prob,
        errored=errored,
    )


def answer_step(
    answer: str = "42",
    analysis: str = "done",
    mean_log_prob: float = -0.1,
) -> Step:
    return Step.answer_step(analysis=analysis, answer=f" ${answer}$", mean_log_prob=mean_log_prob)


def make_state(
    question_id: str = "q-1",
    question_text: str = "<question>\nwhat\n</question>\n",
    steps: tuple[Step, ...] = (),
) -> ReasoningState:
    return ReasoningState(
        question_id=question_id, question_text=question_text, steps=steps
    )


class ScriptedBackend(PolicyValueBackend):
    """Backend driven by explicit tables keyed on rendered state text.

    proposals: rendered text -> list of Step (returned up to n_samples, in
    table order; missing key means dead end). values: rendered text -> float
    (missing key defaults to 0.0). Calls are recorded for assertions.
    """

    def __init__(self, proposals: dict[str, list[Step]], values: dict[str, float] | None = None):
        self.proposals = proposals
        self.values = values or {}
        self.propose_calls: list[str] = []
        self.value_calls: list[str] = []

    def propose_steps(self, request: ProposalRequest) -> list[Proposal]:
        rendered = request.state.render()
        self.propose_calls.append(rendered)
        steps = self.proposals.get(rendered, [])
        return [Proposal(step=s) for s in steps[: request.n_samples]]

    def predict_value(self, state: ReasoningState) -> ValuePrediction:
        rendered = state.render()
        self.value_calls.append(rendered)
        return ValuePrediction(value=self.values.get(rendered, 0.0))
