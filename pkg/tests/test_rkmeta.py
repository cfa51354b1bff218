import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from mamlrk import diffengine as ad
from mamlrk.models import MlpSpec, forward, init_params, mse_loss
from mamlrk.rkmeta import (
    DEFAULT_STEPS,
    FIELDS,
    PRESET_NAMES,
    RK2_NAMES,
    ButcherTableau,
    ConfigurationError,
    GraphField,
    StageGradMode,
    StageSlopes,
    TaskData,
    classical_rk4,
    classification_binding,
    compute_stages,
    generic_rk2,
    inner_update,
    meta_direction,
    meta_gradient,
    meta_step,
    one_step,
    order_check,
    parse_tableau,
    preset,
    regression_binding,
    sum_rows,
    swapped_generic_rk2,
    validate,
)

SMALL = MlpSpec(1, (8, 8), 1)


def small_tasks(rng, n, K=5, first_id=0):
    out = []
    for i in range(n):
        amp, ph = rng.uniform(0.1, 5.0), rng.uniform(0, np.pi)
        xs, xq = rng.uniform(-5, 5, (K, 1)), rng.uniform(-5, 5, (K, 1))
        out.append(TaskData(first_id + i, xs, amp * np.sin(xs - ph), xq, amp * np.sin(xq - ph)))
    return out


# -- tableaus ---------------------------------------------------------------


@pytest.mark.parametrize("name", PRESET_NAMES)
def test_presets_are_valid(name):
    assert validate(preset(name)) == []


def test_named_coefficients():
    mid, heun, ral, itb = (preset(n) for n in RK2_NAMES)
    assert (mid.a, mid.q21) == ((0.0, 1.0), 0.5)
    assert (heun.a, heun.q21) == ((0.5, 0.5), 1.0)
    assert ral.a == pytest.approx((1 / 3, 2 / 3)) and ral.q21 == 0.75
    assert itb.a == pytest.approx((2 / 3, 1 / 3)) and itb.q21 == 1.5
    assert preset("euler").N == 1


@given(st.floats(-50, 50, allow_nan=False).filter(lambda x: abs(x) > 1e-3))
def test_generic_family_is_valid(x):
    tab = generic_rk2(x)
    assert validate(tab, tol=1e-10) == []
    assert tab.q21 == tab.p[1] == x


@given(st.floats(0.05, 20).filter(lambda x: abs(x - 1.0) > 1e-6))
def test_swapped_generic_row_fails(x):
    problems = validate(swapped_generic_rk2(x))
    assert "a2*q21 != 1/2" in problems


def test_swapped_generic_row_at_one_coincides_with_heun():
    assert validate(swapped_generic_rk2(1.0)) == []


@pytest.mark.parametrize("x", [0.5, 2 / 3, 1.0])
def test_generic_reproduces_presets(x):
    tab = generic_rk2(x)
    match = {0.5: "midpoint", 2 / 3: None, 1.0: "heun"}[x]
    if match:
        assert tab.a == pytest.approx(preset(match).a)


def test_broken_tableaus_are_reported():
    bad = ButcherTableau("bad", (0.6, 0.6), (0.1, 0.5), ((0, 0), (0.4, 0)))
    problems = validate(bad)
    assert any("sum(a)" in p for p in problems)
    assert "p1 != 0" in problems
    assert "sum_j q2j != p2" in problems
    upper = ButcherTableau("upper", (0.0, 1.0), (0.0, 0.5), ((0, 0.1), (0.5, 0)))
    assert "q is not strictly lower triangular" in validate(upper)


def test_rk4_is_valid_fourth_order():
    assert validate(classical_rk4()) == []


@pytest.mark.parametrize(
    "text,name",
    [("midpoint", "midpoint"), ("Heun", "heun"), ("generic:0.75", "generic:0.75"), ("generic:3/4", "generic:0.75"), ("rk4", "rk4")],
)
def test_parse_tableau(text, name):
    assert parse_tableau(text).name == name


@pytest.mark.parametrize("text", ["rk9", "generic", "generic:0", "generic:abc", "generic:1/0"])
def test_parse_tableau_errors(text):
    with pytest.raises(ConfigurationError):
        parse_tableau(text)


# -- stages -----------------------------------------------------------------


def test_differentiate_mode_rejects_more_than_two_stages():
    with pytest.raises(ConfigurationError):
        compute_stages(FIELDS["linear"], np.ones(1), 0.1, classical_rk4(), "differentiate")


def test_non_positive_step_rejected():
    with pytest.raises(ConfigurationError):
        compute_stages(FIELDS["linear"], np.ones(1), 0.0, preset("heun"))
    with pytest.raises(ConfigurationError):
        inner_update(np.ones(2), np.ones(2), -1.0, 0.5)


def test_evaluate_mode_stage_points():
    tab = preset("ralston")
    theta, h = np.array([2.0]), 0.1
    st_ = compute_stages(FIELDS["nonlinear"], theta, h, tab)
    k1 = -(theta**2)
    np.testing.assert_allclose(st_.eval_points[1], theta + h * 0.75 * k1)
    np.testing.assert_allclose(st_.k[1], -((theta + h * 0.75 * k1) ** 2))
    np.testing.assert_allclose(meta_gradient(st_, tab), k1 / 3 + 2 * st_.k[1] / 3)


def test_meta_gradient_skips_zero_weights():
    st_ = StageSlopes([np.array([np.nan]), np.array([3.0])], [None, None])
    assert meta_gradient(st_, preset("midpoint"))[0] == 3.0
    with pytest.raises(ConfigurationError):
        meta_gradient(StageSlopes([np.ones(1)], [None]), preset("heun"))


def test_inner_update_formula():
    np.testing.assert_allclose(inner_update(np.array([1.0, 2.0]), np.array([4.0, -2.0]), 0.1, 0.5), [0.8, 2.1])
    pv = init_params(SMALL, 0)
    assert inner_update(pv, np.zeros(len(pv)), 0.1, 0.5).layout == pv.layout


# -- equivalence with MAML ---------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_midpoint_differentiate_equals_maml(seed):
    oracles = pytest.importorskip("oracles")
    rng = np.random.default_rng(seed)
    theta = init_params(SMALL, seed).values
    tasks = small_tasks(rng, 3)
    h = 0.05
    ours = meta_step(theta, tasks, preset("midpoint"), h, "differentiate", regression_binding(SMALL))
    ref = oracles.maml_step(
        SMALL.widths, theta, [(t.support_x, t.support_y, t.query_x, t.query_y) for t in tasks], h / 2, h
    )
    np.testing.assert_allclose(ours, ref, rtol=0, atol=1e-12)


def test_inner_h_decouples_the_inner_rate():
    oracles = pytest.importorskip("oracles")
    rng = np.random.default_rng(9)
    theta = init_params(SMALL, 9).values
    tasks = small_tasks(rng, 2)
    ours = meta_step(theta, tasks, preset("midpoint"), 0.01, "differentiate", regression_binding(SMALL), inner_h=0.2)
    ref = oracles.maml_step(SMALL.widths, theta, [(t.support_x, t.support_y, t.query_x, t.query_y) for t in tasks], 0.1, 0.01)
    np.testing.assert_allclose(ours, ref, rtol=0, atol=1e-12)


def test_heun_differentiate_mixes_query_gradient_and_maml_term():
    oracles = pytest.importorskip("oracles")
    rng = np.random.default_rng(3)
    theta = init_params(SMALL, 3).values
    (task,) = small_tasks(rng, 1)
    h = 0.04
    d = meta_direction(theta, [task], preset("heun"), h, "differentiate", regression_binding(SMALL))
    jax = oracles.jax
    gq = np.asarray(jax.grad(oracles.mse, argnums=1)(SMALL.widths, theta, task.query_x, task.query_y))
    # maml_step returns theta - beta * grad; recover the through-gradient with beta = 1
    through = theta - oracles.maml_step(SMALL.widths, theta, [(task.support_x, task.support_y, task.query_x, task.query_y)], h, 1.0)
    np.testing.assert_allclose(d, -0.5 * gq - 0.5 * through, rtol=1e-10, atol=1e-12)


def test_euler_is_joint_query_gradient(rng):
    theta = init_params(SMALL, 1).values
    tasks = small_tasks(rng, 4)
    b = regression_binding(SMALL)
    d = meta_direction(theta, tasks, preset("euler"), 0.1, "differentiate", b)
    expected = -sum(b.grad(theta[None], t.query_x[None], t.query_y[None])[0] for t in tasks)
    np.testing.assert_allclose(d, expected, rtol=1e-12, atol=1e-13)


@pytest.mark.parametrize("name", RK2_NAMES)
def test_evaluate_mode_on_graph_field_matches_manual_stages(name, rng):
    g = ad.trace(lambda p, x, y: mse_loss(forward(SMALL, p, x), y, task_axes=1), (1, SMALL.n_params), x=(1, 6, 1), y=(1, 6, 1))
    x, y = rng.normal(size=(1, 6, 1)), rng.normal(size=(1, 6, 1))
    theta = init_params(SMALL, 2).values[None]
    tab, h = preset(name), 0.1
    fld = GraphField(g, {"x": x, "y": y})
    d = meta_gradient(compute_stages(fld, theta, h, tab, "evaluate"), tab)
    k1 = -ad.gradient(g, theta, {"x": x, "y": y}).gradient
    k2 = -ad.gradient(g, theta + h * tab.q21 * k1, {"x": x, "y": y}).gradient
    np.testing.assert_allclose(d, tab.a[0] * k1 + tab.a[1] * k2, rtol=1e-13, atol=1e-15)


def test_vectorised_batch_equals_sum_of_single_tasks(rng):
    theta = init_params(SMALL, 0).values
    tasks = small_tasks(rng, 5)
    b = regression_binding(SMALL)
    tab = preset("ralston")
    joint = meta_direction(theta, tasks, tab, 0.05, "differentiate", b)
    single = sum(meta_direction(theta, [t], tab, 0.05, "differentiate", b) for t in tasks)
    np.testing.assert_allclose(joint, single, rtol=1e-11, atol=1e-12)


@given(st.permutations(list(range(6))), st.sampled_from(RK2_NAMES + ("euler",)))
def test_task_order_does_not_change_the_update(perm, name):
    rng = np.random.default_rng(42)
    theta = init_params(SMALL, 0).values
    tasks = small_tasks(rng, 6)
    b = regression_binding(SMALL)
    ref = meta_step(theta, tasks, preset(name), 0.01, "differentiate", b)
    shuffled = meta_step(theta, [tasks[i] for i in perm], preset(name), 0.01, "differentiate", b)
    np.testing.assert_array_equal(ref, shuffled)


def test_sum_rows_is_ordered():
    rows = np.array([[1e16], [1.0], [-1e16]])
    assert sum_rows(rows)[0] == (1e16 + 1.0) - 1e16


def test_meta_step_keeps_parameter_vector_and_flags_overflow(rng):
    pv = init_params(SMALL, 0)
    tasks = small_tasks(rng, 2)
    out = meta_step(pv, tasks, preset("heun"), 0.01, "differentiate", regression_binding(SMALL))
    assert out.layout == pv.layout
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(FloatingPointError):
            meta_step(pv, tasks, preset("heun"), 1e200, "differentiate", regression_binding(SMALL))


def test_empty_batch_and_missing_binding(rng):
    theta = init_params(SMALL, 0).values
    with pytest.raises(ValueError):
        meta_direction(theta, [], preset("heun"), 0.1)
    with pytest.raises(ValueError):
        meta_direction(theta, small_tasks(rng, 1), preset("heun"), 0.1)


def test_classification_binding_gradient(rng):
    spec = MlpSpec(4, (6,), 3)
    b = classification_binding(spec)
    P = rng.normal(size=(2, spec.n_params)) * 0.3
    x = rng.normal(size=(2, 5, 4))
    y = rng.integers(0, 3, size=(2, 5))
    g = b.grad(P, x, y)
    fd = ad.finite_diff_gradient(lambda q: b.loss(q, x, y), P)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


@given(st.sampled_from(RK2_NAMES), st.floats(0.001, 0.05))
def test_modes_agree_to_first_order(name, h):
    # both modes share k1; the stage-2 slopes differ by O(h)
    rng = np.random.default_rng(0)
    theta = init_params(SMALL, 0).values
    tasks = small_tasks(rng, 2)
    b = regression_binding(SMALL)
    ev = meta_direction(theta, tasks, preset(name), h, "evaluate", b)
    df = meta_direction(theta, tasks, preset(name), h, "differentiate", b)
    scale = np.linalg.norm(ev)
    assert np.linalg.norm(ev - df) <= 200 * h * scale


# -- order of accuracy --------------------------------------------------------


@pytest.mark.parametrize(
    "name,lo,hi",
    [("euler", 1.8, 2.2), ("midpoint", 2.7, 3.3), ("heun", 2.7, 3.3), ("ralston", 2.7, 3.3),
     ("itb", 2.7, 3.3), ("generic:0.3", 2.7, 3.3), ("generic:2.0", 2.7, 3.3), ("rk4", 4.6, 5.4)],
)
@pytest.mark.parametrize("field_name", ["linear", "nonlinear", "forced"])
def test_local_error_order(name, lo, hi, field_name):
    if field_name == "nonlinear" and name == "generic:2.0":
        # on y' = -y^2 the h^3 coefficient of generic(x) is y^4 (x/2 - 1), zero at x = 2
        lo, hi = 3.7, 4.3
    res = order_check(FIELDS[field_name], np.array([0.8]), parse_tableau(name), DEFAULT_STEPS)
    assert lo <= res.order <= hi


def test_one_step_linear_midpoint_is_taylor_polynomial():
    h = 0.1
    np.testing.assert_allclose(one_step(FIELDS["linear"], np.array([1.0]), h, preset("midpoint")), [1 - h + h * h / 2], rtol=1e-15)


def test_order_check_input_validation():
    with pytest.raises(ValueError):
        order_check(FIELDS["linear"], np.ones(1), preset("heun"), [0.1, 0.05, 0.02])
    with pytest.raises(ValueError):
        order_check(FIELDS["linear"], np.ones(1), preset("heun"), [0.1, 0.08, 0.06, 0.05])


def test_errors_below_floor_are_excluded():
    res = order_check(FIELDS["linear"], np.ones(1), classical_rk4(), np.logspace(-1, -4, 7))
    assert res.excluded and all(e >= 1e-13 for e in res.errors)
    assert 4.6 <= res.order <= 5.4
