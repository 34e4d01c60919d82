import numpy as np
import pytest

from serc.envs import EnvConfig, correct_call, generate_labeled
from serc.errors import PatchOutOfRange, SchemaError, UnknownRepairAction
from serc.policy.scripted import ScriptedPolicy
from serc.policy.toy import PolicyParameters, ToyPolicy
from serc.repair import NO_CHANGE, PATCH, RepairConfig, RepairDecision, apply_patch, parse_repair_decision, run_repair_cycle
from serc.runner import propose_step, verify_step
from serc.tools import ToolLimits, default_registry
from serc.trajectory import TEXT_STEP, Action, SolverContext, Step, ToolCall

PATCH_LINE = '{"action":"PATCH","target_step":2,"patch_type":"text","new_content":"use 12 not 21","justification":"digit swap"}'
NO_CHANGE_LINE = '{"action":"NO_CHANGE","target_step":2,"reason":"evidence insufficient"}'


def test_parse_patch():
    d = parse_repair_decision(PATCH_LINE)
    assert (d.action, d.target_step, d.patch_type, d.new_content) == (PATCH, 2, "text", "use 12 not 21")


def test_parse_no_change():
    d = parse_repair_decision("I looked.\n" + NO_CHANGE_LINE)
    assert (d.action, d.reason) == (NO_CHANGE, "evidence insufficient")


def test_unknown_action():
    with pytest.raises(UnknownRepairAction):
        parse_repair_decision('{"action":"REWRITE_ALL"}')


@pytest.mark.parametrize(
    "text",
    [
        '{"action":"PATCH","target_step":2,"patch_type":"text","justification":"x"}',
        '{"action":"PATCH","target_step":2,"patch_type":"poem","new_content":"a","justification":"x"}',
        '{"action":"NO_CHANGE","target_step":"2","reason":"x"}',
        '{"action":"NO_CHANGE","target_step":2}',
        "no json",
    ],
)
def test_schema_errors(text):
    with pytest.raises(SchemaError):
        parse_repair_decision(text)


def _prefix(n):
    return [Step(i, f"d{i}", Action(TEXT_STEP, f"step {i}")) for i in range(1, n + 1)]


def test_apply_patch():
    prefix = _prefix(4)
    out = apply_patch(prefix, RepairDecision(PATCH, 2, "text", "fixed"))
    assert len(out) == 2
    assert out[0] == prefix[0]
    assert out[1].action.content == "fixed" and out[1].repaired


def test_apply_no_change():
    prefix = _prefix(4)
    assert apply_patch(prefix, RepairDecision(NO_CHANGE, 2, reason="fine")) == prefix


def test_apply_out_of_range():
    with pytest.raises(PatchOutOfRange):
        apply_patch(_prefix(4), RepairDecision(PATCH, 9, "text", "x"))
    with pytest.raises(PatchOutOfRange):
        apply_patch(_prefix(4), RepairDecision(PATCH, 0, "text", "x"))


@pytest.mark.parametrize("t", [1, 2, 3, 4])
def test_apply_never_touches_earlier_steps(t):
    prefix = _prefix(4)
    out = apply_patch(prefix, RepairDecision(PATCH, t, "text", "x"))
    assert out[: t - 1] == prefix[: t - 1]


# -- repair cycle -----------------------------------------------------------------


@pytest.fixture
def slip():
    """A tool-call step with an operand slip, verified by the deterministic toy verifier."""
    task = generate_labeled(EnvConfig("arithmetic-chain", 2, 3))
    expr = task.instance.scene["expression"]
    wrong = ToolCall("calculator", {"expr": expr + "+1"})
    solver = ScriptedPolicy(solver=["<think>q</think>\n" + wrong.to_json()])
    ctx = SolverContext(task.instance)
    reg, lim = default_registry(), ToolLimits()
    rng = np.random.default_rng(0)
    step = propose_step(solver, ctx, rng, reg, lim)
    verifier = ToyPolicy(_verifier_params())
    v = verify_step(verifier, ctx, step, rng, reg, lim)
    return task, ctx, step, v, verifier, reg, lim


def _verifier_params():
    p = PolicyParameters.zeros(embed_dim=2)
    p.shared[:] = 0.0
    # confidence bias only: contradicted steps get low confidence, others high
    p.shared[7, 0] = 2.0  # F_CONTRADICT drives the first embedding unit
    p.verifier_head[0, 1] = -4.0
    p.verifier_head[-1, 1] = 2.0
    return p


def _regenerate(policy, ctx, reg, lim):
    def regen(pctx, rng):
        step = propose_step(policy, pctx, rng, reg, lim)
        return step, verify_step(policy, ctx, step, rng, reg, lim)

    return regen


def test_cycle_fixes_slip(slip):
    task, ctx, step, v, verifier, reg, lim = slip
    assert v.tool_result == -1 and v.conf < 0.7
    out = run_repair_cycle(verifier, ctx, step, v, RepairConfig(), _regenerate(verifier, ctx, reg, lim), np.random.default_rng(1))
    assert out.applied and out.attempts == 1
    assert out.repaired_step.action.tool_call == correct_call(task.instance)
    assert out.repaired_step.repaired
    assert out.re_verification.tool_result == 1
    assert out.re_verification.conf >= v.conf


def test_cycle_no_change(slip):
    _, ctx, step, v, _, reg, lim = slip
    policy = ScriptedPolicy(self_repair=[NO_CHANGE_LINE.replace('"target_step":2', f'"target_step":{step.index}')])
    out = run_repair_cycle(policy, ctx, step, v, RepairConfig(), _regenerate(policy, ctx, reg, lim), np.random.default_rng(1))
    assert not out.applied and out.attempts == 1 and out.repaired_step is None


def test_cycle_malformed_counts_as_attempt(slip):
    _, ctx, step, v, _, reg, lim = slip
    policy = ScriptedPolicy(self_repair=["garbage", "more garbage"])
    out = run_repair_cycle(policy, ctx, step, v, RepairConfig(max_repairs_per_step=1), _regenerate(policy, ctx, reg, lim), np.random.default_rng(1))
    assert not out.applied and out.attempts == 1
    assert policy.calls.count(policy.calls[0]) == 1


def test_cycle_wrong_target_is_failed_attempt(slip):
    _, ctx, step, v, _, reg, lim = slip
    policy = ScriptedPolicy(self_repair=[PATCH_LINE.replace('"target_step":2', f'"target_step":{step.index + 5}')])
    out = run_repair_cycle(policy, ctx, step, v, RepairConfig(max_repairs_per_step=3), _regenerate(policy, ctx, reg, lim), np.random.default_rng(1))
    assert not out.applied and out.attempts == 3


def test_budget_respected(slip):
    _, ctx, step, v, verifier, reg, lim = slip
    for budget in range(4):
        out = run_repair_cycle(ScriptedPolicy(self_repair=["x"]), ctx, step, v, RepairConfig(max_repairs_per_step=budget),
                               _regenerate(verifier, ctx, reg, lim), np.random.default_rng(1))
        assert out.attempts <= budget


def test_outcome_invariant():
    from serc.repair import RepairOutcome

    with pytest.raises(ValueError):
        RepairOutcome(True, _prefix(1)[0], None, None, 1)
