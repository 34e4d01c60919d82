"""Synthetic verifiable tasks and outcome scoring.

Two task kinds stand in for visual math and chart questions:

* ``arithmetic-chain`` -- the scene holds a flat integer expression with
  ``difficulty`` binary operators; the answer is its value.
* ``table-qa`` -- the scene holds a ``difficulty x difficulty`` table; the
  question addresses one cell.

Ground truth is computed at generation time and never rendered to the policy.
``oracle_solve`` re-derives it through Python's ``ast`` module so it shares no
code with the calculator tool.
"""

from __future__ import annotations

import ast
import json
import operator
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable

import numpy as np

from .trajectory import TaskInstance, ToolCall

ARITHMETIC = "arithmetic-chain"
TABLE_QA = "table-qa"
TASK_KINDS = (ARITHMETIC, TABLE_QA)

_COLUMNS = ["revenue", "cost", "units", "margin", "growth", "share", "price", "volume"]


@dataclass(frozen=True)
class EnvConfig:
    kind: str = ARITHMETIC
    difficulty: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.difficulty < 1:
            raise ValueError("difficulty must be >= 1")


@dataclass(frozen=True)
class LabeledTask:
    instance: TaskInstance
    ground_truth: str
    difficulty: int
    seed: int

    @property
    def id(self) -> str:
        return self.instance.id

    @property
    def kind(self) -> str:
        return self.instance.kind


def _rng(cfg: EnvConfig) -> np.random.Generator:
    kind_tag = TASK_KINDS.index(cfg.kind)
    return np.random.default_rng([cfg.seed, cfg.difficulty, kind_tag, 0x5E5C])


def _chain_value(operands: list[int], ops: list[str]) -> int:
    # multiplication first, then left-to-right addition/subtraction
    terms, signs = [operands[0]], []
    for op, x in zip(ops, operands[1:]):
        if op == "*":
            terms[-1] *= x
        else:
            signs.append(op)
            terms.append(x)
    value = terms[0]
    for op, x in zip(signs, terms[1:]):
        value = value + x if op == "+" else value - x
    return value


def _arithmetic(cfg: EnvConfig) -> LabeledTask:
    rng = _rng(cfg)
    n = cfg.difficulty
    operands = [int(x) for x in rng.integers(1, 10, size=n + 1)]
    ops = [str(rng.choice(["+", "-", "*"])) for _ in range(n)]
    expr = str(operands[0]) + "".join(op + str(x) for op, x in zip(ops, operands[1:]))
    instance = TaskInstance(
        id=f"{ARITHMETIC}-d{n}-s{cfg.seed}",
        question="What is the value of the expression shown in the scene?",
        scene={"expression": expr},
        answer_spec="integer",
        kind=ARITHMETIC,
    )
    return LabeledTask(instance, str(_chain_value(operands, ops)), n, cfg.seed)


def _table(cfg: EnvConfig) -> LabeledTask:
    rng = _rng(cfg)
    n = cfg.difficulty
    base_year = int(rng.integers(1990, 2030 - n))
    rows = [str(base_year + i) for i in range(n)]
    columns = _COLUMNS[:n] + [f"metric_{i}" for i in range(len(_COLUMNS), n)]
    cells = [[f"{rng.integers(0, 1000) / 10:.1f}" for _ in columns] for _ in rows]
    r, c = int(rng.integers(n)), int(rng.integers(n))
    instance = TaskInstance(
        id=f"{TABLE_QA}-d{n}-s{cfg.seed}",
        question=f"What is the {columns[c]} value for {rows[r]}?",
        scene={"table": {"rows": rows, "columns": columns, "cells": cells}, "query": {"row_key": rows[r], "column_key": columns[c]}},
        answer_spec="decimal",
        kind=TABLE_QA,
    )
    return LabeledTask(instance, cells[r][c], n, cfg.seed)


def generate_task(cfg: EnvConfig) -> tuple[TaskInstance, str]:
    """Deterministic in (kind, difficulty, seed)."""
    labeled = generate_labeled(cfg)
    return labeled.instance, labeled.ground_truth


def generate_labeled(cfg: EnvConfig) -> LabeledTask:
    return _arithmetic(cfg) if cfg.kind == ARITHMETIC else _table(cfg)


def generate_tasks(kind: str, difficulty: int, seeds: Iterable[int]) -> list[LabeledTask]:
    return [generate_labeled(EnvConfig(kind, difficulty, int(s))) for s in seeds]


# -- scoring --------------------------------------------------------------------


def canonical_answer(text: str):
    """Exact rational for numeric answers, stripped text otherwise."""
    text = text.strip().rstrip(".").strip()
    try:
        return Fraction(text)
    except (ValueError, ZeroDivisionError):
        return text


def outcome_reward(task: LabeledTask, final_answer: str) -> float:
    truth = canonical_answer(task.ground_truth)
    answer = canonical_answer(final_answer)
    if isinstance(truth, Fraction) != isinstance(answer, Fraction):
        return 0.0
    return 1.0 if answer == truth else 0.0


def revalidate(trajectory, task: LabeledTask) -> bool:
    """True if the stored outcome reward matches a fresh scoring of the final answer."""
    expected = 0.0 if trajectory.truncated else outcome_reward(task, trajectory.final_answer)
    return trajectory.outcome_reward == expected


_AST_OPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul}


def _ast_eval(node) -> Fraction:
    if isinstance(node, ast.Expression):
        return _ast_eval(node.body)
    if isinstance(node, ast.BinOp) and type(node.op) in _AST_OPS:
        return _AST_OPS[type(node.op)](_ast_eval(node.left), _ast_eval(node.right))
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
        return -_ast_eval(node.operand)
    if isinstance(node, ast.Constant) and isinstance(node.value, int):
        return Fraction(node.value)
    raise ValueError(f"unsupported node {type(node).__name__}")


def oracle_solve(task: LabeledTask | TaskInstance) -> str:
    instance = task.instance if isinstance(task, LabeledTask) else task
    if instance.kind == ARITHMETIC:
        value = _ast_eval(ast.parse(instance.scene["expression"], mode="eval"))
        return str(value.numerator) if value.denominator == 1 else str(float(value))
    table = instance.scene["table"]
    q = instance.scene["query"]
    return table["cells"][table["rows"].index(q["row_key"])][table["columns"].index(q["column_key"])]


# -- tool-facing helpers used by scripted and toy policies ------------------------


def correct_call(task: TaskInstance) -> ToolCall:
    if task.kind == ARITHMETIC:
        return ToolCall("calculator", {"expr": task.scene["expression"]})
    return ToolCall("table_lookup", dict(task.scene["query"]))


def corrupted_call(task: TaskInstance, rng: np.random.Generator) -> ToolCall:
    """A plausible but wrong call: one operand digit changed, or the wrong cell."""
    if task.kind == ARITHMETIC:
        expr = task.scene["expression"]
        digit_positions = [i for i, ch in enumerate(expr) if ch.isdigit()]
        pos = digit_positions[int(rng.integers(len(digit_positions)))]
        old = int(expr[pos])
        new = (old + int(rng.integers(1, 9))) % 9 + 1
        if new == old:
            new = old % 9 + 1
        return ToolCall("calculator", {"expr": expr[:pos] + str(new) + expr[pos + 1 :]})
    table = task.scene["table"]
    q = task.scene["query"]
    rows = table["rows"]
    if len(rows) == 1:
        return ToolCall("table_lookup", {"row_key": str(int(rows[0]) + 1), "column_key": q["column_key"]})
    others = [r for r in rows if r != q["row_key"]]
    return ToolCall("table_lookup", {"row_key": others[int(rng.integers(len(others)))], "column_key": q["column_key"]})


def guess_answer(task: TaskInstance, rng: np.random.Generator) -> str:
    if task.kind == ARITHMETIC:
        return str(int(rng.integers(-20, 100)))
    return f"{rng.integers(0, 1000) / 10:.1f}"


# -- corpus I/O -------------------------------------------------------------------


def task_to_record(task: LabeledTask) -> dict:
    inst = task.instance
    return {
        "id": inst.id,
        "kind": inst.kind,
        "difficulty": task.difficulty,
        "seed": task.seed,
        "question": inst.question,
        "scene": inst.scene,
        "ground_truth": task.ground_truth,
    }


def task_from_record(rec: dict) -> LabeledTask:
    kind = rec["kind"]
    instance = TaskInstance(
        id=rec["id"],
        question=rec["question"],
        scene=rec["scene"],
        answer_spec="integer" if kind == ARITHMETIC else "decimal",
        kind=kind,
    )
    return LabeledTask(instance, rec["ground_truth"], rec["difficulty"], rec["seed"])


def write_corpus(path, tasks: Iterable[LabeledTask]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in tasks:
            fh.write(json.dumps(task_to_record(t), separators=(",", ":")) + "\n")


def read_corpus(path) -> list[LabeledTask]:
    with open(path, encoding="utf-8") as fh:
        return [task_from_record(json.loads(line)) for line in fh if line.strip()]
