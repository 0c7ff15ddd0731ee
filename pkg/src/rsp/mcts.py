"""PUCT tree search over reasoning steps.

Each simulation selects a leaf by maximizing the PUCT score, expands it by
sampling candidate next steps from the backend, evaluates every new child,
and backs each child's value up its root path as a running average. Edge
values double as training targets for a value model and as the ranking key
for tree-based decoding.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from enum import Enum

from .core import (
    Answer,
    ContractViolation,
    EngineError,
    ReasoningState,
    Reward,
    Step,
    StepKind,
    answers_equivalent,
    apply_step,
    extract_answer_text,
    is_terminal,
    normalize_answer,
)
from .policy import PolicyValueBackend, ProposalRequest

SNAPSHOT_SCHEMA = "rsp-tree/1"


class SnapshotError(EngineError):
    """A tree snapshot is missing, malformed, or from another schema version."""


class EvaluationMode(Enum):
    """How a selected or newly created node is scored before backup."""

    # Terminal nodes contribute their reward, everything else the model value.
    # This is the training-time setting: verified outcomes anchor the search.
    TERMINAL_REWARD = "terminal_reward"
    # Every node is scored by the value model; used at inference time, when
    # answer correctness cannot be observed.
    MODEL_ONLY = "model_only"


@dataclass(frozen=True)
class SearchConfig:
    c_puct: float = 1.25
    n_simulations: int = 40
    expansion_width: int = 5
    max_depth: int = 8
    temperature: float = 1.0
    evaluation: EvaluationMode = EvaluationMode.TERMINAL_REWARD
    q_init: float = 0.0

    def __post_init__(self) -> None:
        if self.c_puct <= 0:
            raise ContractViolation("c_puct must be > 0")
        if self.n_simulations < 1:
            raise ContractViolation("n_simulations must be >= 1")
        if self.expansion_width < 1:
            raise ContractViolation("expansion_width must be >= 1")
        if self.max_depth < 1:
            raise ContractViolation("max_depth must be >= 1")
        if not self.temperature > 0:
            raise ContractViolation("temperature must be > 0")


@dataclass
class NodeStats:
    """Visit statistics for the edge leading into a node."""

    prior: float
    visits: int = 0
    total_value: float = 0.0
    model_value: float | None = None

    def __post_init__(self) -> None:
        if not 0.0 < self.prior <= 1.0:
            raise ContractViolation("prior must lie in (0, 1]")

    def q(self, q_init: float = 0.0) -> float:
        return self.total_value / self.visits if self.visits else q_init


@dataclass(eq=False)
class SearchNode:
    """One state in the tree; ``step`` is None only at the root."""

    state: ReasoningState
    stats: NodeStats
    step: Step | None = None
    children: list["SearchNode"] = field(default_factory=list)
    depth: int = 0
    terminal: bool = False
    reward: Reward | None = None
    # True once no simulation can reach an unexpanded, non-terminal leaf here.
    exhausted: bool = False


@dataclass(eq=False)
class SearchTree:
    root: SearchNode
    question: ReasoningState
    config: SearchConfig
    seed: int
    gold_answer: Answer | None
    simulations_run: int = 0
    total_backups: int = 0
    total_evaluations: int = 0
    rng: random.Random = field(default_factory=random.Random, repr=False)


def prior_from_logprob(mean_log_prob: float) -> float:
    """exp(mean per-token log-prob); log-probs must be <= 0."""
    if mean_log_prob > 0:
        raise ContractViolation("mean log-prob must be <= 0")
    return math.exp(mean_log_prob)


def puct_score(
    child: NodeStats, parent_visits: int, c_puct: float, q_init: float = 0.0
) -> float:
    """Exploitation (edge value) plus prior-weighted exploration bonus."""
    exploration = c_puct * child.prior * math.sqrt(parent_visits) / (1 + child.visits)
    return child.q(q_init) + exploration


def select(tree: SearchTree) -> list[SearchNode]:
    """Descend from the root by argmax PUCT; ties go to the earliest child.

    Returns the root-to-leaf path; the leaf has no children (it is either
    terminal or not yet expanded).
    """
    node = tree.root
    path = [node]
    cfg = tree.config
    while node.children:
        node = max(
            node.children,
            key=lambda c: puct_score(c.stats, node.stats.visits, cfg.c_puct, cfg.q_init),
        )
        path.append(node)
    return path


def expand(tree: SearchTree, leaf: SearchNode, backend: PolicyValueBackend) -> list[SearchNode]:
    """Create children for a non-terminal leaf from backend proposals.

    Terminal children are flagged at creation: an answer step ends the path
    (reward from gold-answer correctness when a gold answer is known), and a
    child at the depth budget without an answer terminates with reward -1.
    A backend returning no proposals turns the leaf itself into a terminal
    dead end with reward -1.
    """
    if leaf.terminal:
        raise ContractViolation("cannot expand a terminal node")
    if leaf.children:
        raise ContractViolation("node is already expanded")
    cfg = tree.config
    request = ProposalRequest(
        state=leaf.state,
        n_samples=cfg.expansion_width,
        temperature=cfg.temperature,
        seed=tree.rng.randrange(2**63),
    )
    proposals = backend.propose_steps(request)
    if not proposals:
        leaf.terminal = True
        leaf.reward = Reward(-1.0)
        return []
    for proposal in proposals:
        step = proposal.step
        child_state = apply_step(leaf.state, step, cfg.max_depth)
        terminal = False
        reward: Reward | None = None
        if step.kind is StepKind.ANSWER:
            terminal = True
            if tree.gold_answer is not None:
                predicted = normalize_answer(step.extracted_answer or "")
                correct = answers_equivalent(predicted, tree.gold_answer)
                reward = Reward(1.0 if correct else -1.0)
        elif child_state.depth >= cfg.max_depth:
            terminal = True
            reward = Reward(-1.0)
        child = SearchNode(
            state=child_state,
            stats=NodeStats(prior=prior_from_logprob(step.mean_log_prob)),
            step=step,
            depth=child_state.depth,
            terminal=terminal,
            reward=reward,
            exhausted=terminal,
        )
        leaf.children.append(child)
    return leaf.children


def evaluate(node: SearchNode, backend: PolicyValueBackend, config: SearchConfig) -> float:
    """Score a node for backup according to the evaluation mode."""
    if config.evaluation is EvaluationMode.TERMINAL_REWARD and node.terminal:
        if node.reward is None:
            raise ContractViolation(
                "terminal node has no reward; training-mode search needs a gold answer"
            )
        return node.reward.value
    prediction = backend.predict_value(node.state)
    node.stats.model_value = prediction.value
    return prediction.value


def backup(path: list[SearchNode], value: float) -> None:
    """Fold one evaluation into the running averages along a root path."""
    for node in path:
        node.stats.visits += 1
        node.stats.total_value += value


def _refresh_exhausted(path: list[SearchNode]) -> None:
    for node in reversed(path):
        node.exhausted = node.terminal or (
            bool(node.children) and all(c.exhausted for c in node.children)
        )


def run_simulation(tree: SearchTree, backend: PolicyValueBackend) -> None:
    """One select/expand/evaluate/backup cycle.

    When selection ends at an already-terminal leaf, that leaf is re-scored
    per the evaluation mode and backed up again. Otherwise the leaf is
    expanded and every new child is evaluated and backed up its own path.
    """
    path = select(tree)
    leaf = path[-1]
    if leaf.terminal:
        value = evaluate(leaf, backend, tree.config)
        tree.total_evaluations += 1
        backup(path, value)
        tree.total_backups += 1
    else:
        children = expand(tree, leaf, backend)
        if not children:
            # Dead end: the leaf just became terminal with reward -1.
            value = evaluate(leaf, backend, tree.config)
            tree.total_evaluations += 1
            backup(path, value)
            tree.total_backups += 1
        else:
            for child in children:
                value = evaluate(child, backend, tree.config)
                tree.total_evaluations += 1
                backup(path + [child], value)
                tree.total_backups += 1
    _refresh_exhausted(path)
    tree.simulations_run += 1


def build_tree(
    question: ReasoningState,
    gold_answer: str | Answer | None,
    backend: PolicyValueBackend,
    config: SearchConfig | None = None,
    seed: int = 0,
) -> SearchTree:
    """Run up to n_simulations simulations from the question state.

    Stops early once every reachable leaf is terminal (the finite subtree is
    fully explored, so further simulations would only repeat backups).
    """
    config = config or SearchConfig()
    if is_terminal(question, config.max_depth):
        raise ContractViolation("cannot search from a terminal state")
    gold: Answer | None
    if gold_answer is None:
        gold = None
    elif isinstance(gold_answer, Answer):
        gold = gold_answer
    else:
        gold = normalize_answer(gold_answer)
    if config.evaluation is EvaluationMode.TERMINAL_REWARD and gold is None:
        raise ContractViolation("training-mode search requires a gold answer")
    root = SearchNode(
        state=question,
        stats=NodeStats(prior=1.0),
        depth=question.depth,
    )
    tree = SearchTree(
        root=root,
        question=question,
        config=config,
        seed=seed,
        gold_answer=gold,
        rng=random.Random(seed),
    )
    for _ in range(config.n_simulations):
        if tree.root.exhausted:
            break
        run_simulation(tree, backend)
    return tree


def mc_rollout_estimate(
    state: ReasoningState,
    gold_answer: str | Answer,
    backend: PolicyValueBackend,
    n_rollouts: int,
    seed: int = 0,
    max_depth: int = 8,
) -> float:
    """Average terminal reward over independent base-policy rollouts.

    Each rollout samples one step at a time at temperature 1 until the path
    answers, dead-ends, or hits the depth budget; unanswered terminations
    count as reward -1.
    """
    if n_rollouts < 1:
        raise ContractViolation("n_rollouts must be >= 1")
    gold = gold_answer if isinstance(gold_answer, Answer) else normalize_answer(gold_answer)
    rng = random.Random(seed)
    total = 0.0
    for _ in range(n_rollouts):
        current = state
        reward: float | None = None
        while reward is None:
            if is_terminal(current, max_depth):
                if current.has_answer:
                    predicted = normalize_answer(current.steps[-1].extracted_answer or "")
                    reward = 1.0 if answers_equivalent(predicted, gold) else -1.0
                else:
                    reward = -1.0
                break
            request = ProposalRequest(
                state=current,
                n_samples=1,
                temperature=1.0,
                seed=rng.randrange(2**63),
            )
            proposals = backend.propose_steps(request)
            if not proposals:
                reward = -1.0
                break
            current = apply_step(current, proposals[0].step, max_depth)
        total += reward
    return total / n_rollouts


def q_targets(tree: SearchTree) -> dict[SearchNode, float]:
    """Per-node value-regression targets.

    Visited non-terminal nodes regress to the running average of the edge
    that reaches them; visited terminal nodes to their reward. Unvisited
    nodes (and terminal nodes without a recorded reward) are excluded.
    """
    targets: dict[SearchNode, float] = {}
    stack = list(tree.root.children)
    while stack:
        node = stack.pop()
        stack.extend(node.children)
        if node.stats.visits == 0:
            continue
        if node.terminal:
            if node.reward is not None:
                targets[node] = node.reward.value
        else:
            targets[node] = node.stats.q(tree.config.q_init)
    return targets


def tree_to_snapshot(tree: SearchTree) -> dict:
    """Self-describing JSON document for a built tree (nodes in preorder)."""
    nodes: list[dict] = []

    def visit(node: SearchNode, parent_id: int | None) -> None:
        node_id = len(nodes)
        nodes.append(
            {
                "id": node_id,
                "parent_id": parent_id,
                "step_kind": node.step.kind.value if node.step else None,
                "step_text": node.step.text if node.step else None,
                "prior": node.stats.prior,
                "visits": node.stats.visits,
                "total_value": node.stats.total_value,
                "q": node.stats.q(tree.config.q_init) if node.stats.visits else None,
                "model_value": node.stats.model_value,
                "terminal": node.terminal,
                "reward": node.reward.value if node.reward else None,
                "depth": node.depth,
            }
        )
        for child in node.children:
            visit(child, node_id)

    visit(tree.root, None)
    return {
        "schema": SNAPSHOT_SCHEMA,
        "question_id": tree.question.question_id,
        "question_text": tree.question.question_text,
        "gold_answer": tree.gold_answer.raw if tree.gold_answer else None,
        "seed": tree.seed,
        "simulations_run": tree.simulations_run,
        "total_backups": tree.total_backups,
        "config": {
            "c_puct": tree.config.c_puct,
            "n_simulations": tree.config.n_simulations,
            "expansion_width": tree.config.expansion_width,
            "max_depth": tree.config.max_depth,
            "temperature": tree.config.temperature,
            "evaluation": tree.config.evaluation.value,
            "q_init": tree.config.q_init,
        },
        "nodes": nodes,
    }


def _step_from_snapshot(kind: str, text: str, prior: float) -> Step:
    mean_log_prob = math.log(prior) if prior < 1.0 else 0.0
    if kind == "a":
        return Step(
            kind=StepKind.ANSWER,
            text=text,
            mean_log_prob=mean_log_prob,
            extracted_answer=extract_answer_text(text).normalized,
        )
    return Step(
        kind=StepKind.CODE,
        text=text,
        mean_log_prob=mean_log_prob,
        contains_code="<code>" in text,
    )


def snapshot_to_tree(doc: dict) -> SearchTree:
    """Rebuild a SearchTree from a snapshot document.

    Generation metadata that the snapshot does not carry (code outputs,
    error flags) is not restored; ranking state (visits, totals, rewards,
    terminal flags, child order) is.
    """
    schema = doc.get("schema")
    if schema != SNAPSHOT_SCHEMA:
        raise SnapshotError(
            f"unsupported snapshot schema {schema!r}; this build reads {SNAPSHOT_SCHEMA!r}"
        )
    try:
        config_doc = doc["config"]
        config = SearchConfig(
            c_puct=config_doc["c_puct"],
            n_simulations=config_doc["n_simulations"],
            expansion_width=config_doc["expansion_width"],
            max_depth=config_doc["max_depth"],
            temperature=config_doc["temperature"],
            evaluation=EvaluationMode(config_doc["evaluation"]),
            q_init=config_doc.get("q_init", 0.0),
        )
        question = ReasoningState(
            question_id=doc["question_id"], question_text=doc["question_text"]
        )
        by_id: dict[int, SearchNode] = {}
        root: SearchNode | None = None
        for entry in doc["nodes"]:
            parent = by_id.get(entry["parent_id"]) if entry["parent_id"] is not None else None
            if entry["step_text"] is None:
                step = None
                state = question
            else:
                if parent is None:
                    raise SnapshotError("non-root node without a parent")
                step = _step_from_snapshot(
                    entry["step_kind"], entry["step_text"], entry["prior"]
                )
                state = ReasoningState(
                    question_id=question.question_id,
                    question_text=question.question_text,
                    steps=parent.state.steps + (step,),
                )
            node = SearchNode(
                state=state,
                stats=NodeStats(
                    prior=entry["prior"],
                    visits=entry["visits"],
                    total_value=entry["total_value"],
                    model_value=entry.get("model_value"),
                ),
                step=step,
                depth=entry["depth"],
                terminal=entry["terminal"],
                reward=Reward(entry["reward"]) if entry["reward"] is not None else None,
            )
            by_id[entry["id"]] = node
            if parent is None:
                root = node
            else:
                parent.children.append(node)
        if root is None:
            raise SnapshotError("snapshot has no root node")
    except (KeyError, TypeError, ValueError) as exc:
        raise SnapshotError(f"malformed snapshot: {exc}") from exc
    gold = doc.get("gold_answer")
    return SearchTree(
        root=root,
        question=question,
        config=config,
        seed=doc.get("seed", 0),
        gold_answer=normalize_answer(gold) if gold is not None else None,
        simulations_run=doc.get("simulations_run", 0),
        total_backups=doc.get("total_backups", 0),
    )
