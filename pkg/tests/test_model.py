import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import perturbed_params, small_trigraph
from strgode import diffcore as dc
from strgode.diffcore import Tensor
from strgode.graphs import RelationGraph, TriGraph, build_physical
from strgode.model import (
    LatentState, ModelConfig, ModelParams, decode, encode, forecast, gode_dynamics, gru_cell, gru_gates,
    load_checkpoint, loss_graph, output_layer, param_shapes, params_digest, save_checkpoint,
    transform_block,
)
from strgode.ode import SolverConfig

CFG = ModelConfig(d=4, solver=SolverConfig("rk4", 2))


def zero_params(d, **overrides):
    p = ModelParams.zeros(d)
    p.values.update(overrides)
    return p


def random_obs(rng, T=4, n=4, batch=()):
    return rng.normal(size=batch + (T, n, 2))


# -- dynamics -----------------------------------------------------------------

def test_dynamics_origin_fixed_point(trigraph):
    out = gode_dynamics(Tensor(np.zeros((4, 5))), perturbed_params(5, 0), trigraph)
    np.testing.assert_array_equal(out.data, 0.0)


def test_isolated_station_uses_self_term_only():
    empty = lambda kind: RelationGraph(1, (), kind)
    graphs = TriGraph(empty("physical"), empty("similarity"), empty("correlation"))
    p = perturbed_params(3, 1)
    z = np.array([[0.5, -1.0, 2.0]])
    out = gode_dynamics(Tensor(z), p, graphs)
    np.testing.assert_allclose(out.data, np.maximum(z @ p.values["theta0"], 0.0), rtol=0, atol=1e-15)


def test_dynamics_neighbour_average(trigraph):
    p = perturbed_params(3, 2)
    z = np.random.default_rng(0).normal(size=(4, 3))
    expect = z @ p.values["theta0"]
    for g in trigraph:
        expect = expect + g.mean_operator() @ z @ p.values[f"theta_{g.kind}"]
    out = gode_dynamics(Tensor(z), p, trigraph).data
    np.testing.assert_allclose(out, np.maximum(expect, 0), rtol=0, atol=1e-13)


def test_dynamics_dimension_mismatch(trigraph):
    with pytest.raises(ValueError):
        gode_dynamics(Tensor(np.zeros((3, 5))), perturbed_params(5, 0), trigraph)


# -- gru cell -----------------------------------------------------------------

def test_zero_weight_cell():
    rng = np.random.default_rng(0)
    Z, h, x = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 2))
    p = ModelParams.zeros(4)
    r, u = gru_gates(Z, h, x, p)
    np.testing.assert_array_equal(r, 0.5)
    np.testing.assert_array_equal(u, 0.5)
    Z1, h1 = gru_cell(Tensor(Z), Tensor(h), x, p)
    np.testing.assert_array_equal(h1.data, 0.5 * h)
    np.testing.assert_array_equal(Z1.data, 0.5 * Z)


def test_saturated_update_gate_keeps_state():
    rng = np.random.default_rng(1)
    p = perturbed_params(4, 3, scale=0.1)
    p.values["gru_bz"] = p.values["gru_bz"] + 20.0
    Z, h, x = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (3, 2))
    Z1, h1 = gru_cell(Tensor(Z), Tensor(h), x, p)
    np.testing.assert_allclose(h1.data, h, rtol=0, atol=1e-8)
    np.testing.assert_allclose(Z1.data, Z, rtol=0, atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_gate_range(seed):
    rng = np.random.default_rng(seed)
    p = perturbed_params(3, seed % 50, scale=1.0)
    r, u = gru_gates(rng.normal(size=(2, 3)), rng.normal(size=(2, 3)), rng.normal(size=(2, 2)), p)
    for g in (r, u):
        assert np.all((g > 0) & (g < 1))


def test_gru_shape_mismatch():
    with pytest.raises(ValueError):
        gru_cell(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 4))), np.zeros((3, 3)), ModelParams.zeros(4))


def test_gru_gradcheck():
    rng = np.random.default_rng(2)
    Z, h, x = rng.normal(size=(3, 3)), rng.normal(size=(3, 3)), rng.normal(size=(3, 2))

    def build(b):
        Zn, hn = gru_cell(Tensor(Z), Tensor(h), x, b)
        return {"loss": dc.total(dc.add(dc.mul(Zn, Zn), dc.tanh(hn)))}

    names = ["gru_Wr", "gru_br", "gru_Wz", "gru_bz", "gru_WN", "gru_bN"]
    p = perturbed_params(3, 4, scale=0.5)
    graph = dc.CompGraph(build, names)
    assert dc.grad_check(graph, {k: p.values[k] for k in names}) < 1e-4


# -- transform / output ------------------------------------------------------

def test_transform_zero():
    x = Tensor(np.ones((2, 3)))
    Z0, hid = transform_block(x, x, ModelParams.zeros(3))
    np.testing.assert_array_equal(Z0.data, 0.0)
    np.testing.assert_array_equal(hid.data, 0.0)


def test_transform_identity_layers_apply_tanh_once():
    d = 3
    eye = np.eye(d)
    p = zero_params(d, tz_W1=eye, tz_W2=eye, th_W1=eye, th_W2=eye)
    x = np.random.default_rng(0).uniform(-1, 1, (4, d))
    Z0, hid = transform_block(Tensor(x), Tensor(x), p)
    np.testing.assert_allclose(Z0.data, np.tanh(x), rtol=0, atol=1e-15)
    np.testing.assert_allclose(hid.data, np.tanh(x), rtol=0, atol=1e-15)
    _, untouched = transform_block(Tensor(x), Tensor(x), p, transform_hidden=False)
    np.testing.assert_array_equal(untouched.data, x)


def test_transform_gradcheck():
    rng = np.random.default_rng(3)
    h0, hid = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    names = [f"{b}_{w}" for b in ("tz", "th") for w in ("W1", "b1", "W2", "b2")]

    def build(b):
        Z0, h1 = transform_block(Tensor(h0), Tensor(hid), b)
        return {"loss": dc.total(dc.mul(Z0, h1))}

    p = perturbed_params(3, 5, scale=0.5)
    assert dc.grad_check(dc.CompGraph(build, names), {k: p.values[k] for k in names}) < 1e-4


def test_output_layer():
    Z = Tensor(np.random.default_rng(0).normal(size=(5, 2)))
    p = zero_params(2, out_b=np.array([3.0, -1.0]))
    np.testing.assert_array_equal(output_layer(Z, p).data, np.tile([3.0, -1.0], (5, 1)))
    p = zero_params(2, out_W=np.eye(2))
    np.testing.assert_array_equal(output_layer(Z, p).data, Z.data)
    with pytest.raises(ValueError):
        output_layer(Tensor(np.zeros((5, 3))), p)


# -- encode / decode ---------------------------------------------------------

def test_encode_single_observation(trigraph):
    p = perturbed_params(4, 0)
    x = np.random.default_rng(1).normal(size=(1, 4, 2))
    state = encode(np.array([2.0]), x, p, trigraph, CFG)
    zero = Tensor(np.zeros((4, 4)))
    Z, h = gru_cell(zero, zero, x[0], p)
    Z0, h0 = transform_block(Z, h, p)
    np.testing.assert_array_equal(state.Z.data, Z0.data)
    np.testing.assert_array_equal(state.hidden.data, h0.data)
    assert state.t == 2.0


def test_encode_zero_dynamics_is_two_gru_steps(trigraph):
    p = perturbed_params(4, 1)
    for k in ("theta0", "theta_physical", "theta_similarity", "theta_correlation"):
        p.values[k] = np.zeros((4, 4))
    x = np.random.default_rng(2).normal(size=(2, 4, 2))
    state = encode(np.array([0.0, 3.0]), x, p, trigraph, CFG)
    zero = Tensor(np.zeros((4, 4)))
    Z, h = gru_cell(zero, zero, x[1], p)
    Z, h = gru_cell(Z, h, x[0], p)
    Z0, h0 = transform_block(Z, h, p)
    np.testing.assert_array_equal(state.Z.data, Z0.data)
    np.testing.assert_array_equal(state.hidden.data, h0.data)


@settings(max_examples=10, deadline=None)
@given(st.floats(-50, 50).filter(lambda s: abs(s) > 1e-3))
def test_encode_time_translation(shift):
    graphs = small_trigraph()
    p = perturbed_params(4, 2)
    x = np.random.default_rng(3).normal(size=(3, 4, 2))
    times = np.array([0.0, 1.0, 2.5])
    a = encode(times, x, p, graphs, CFG).Z.data
    b = encode(times + shift, x, p, graphs, CFG).Z.data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_encode_rejects_unsorted(trigraph):
    x = np.zeros((2, 4, 2))
    for times in ([1.0, 0.0], [1.0, 1.0]):
        with pytest.raises(ValueError):
            encode(np.array(times), x, ModelParams.zeros(4), trigraph, CFG)


def test_decode_rejects_target_before_anchor(trigraph):
    init = LatentState(Tensor(np.zeros((4, 4))), Tensor(np.zeros((4, 4))), 5.0)
    with pytest.raises(ValueError):
        decode(init, np.array([4.0, 6.0]), ModelParams.zeros(4), trigraph, CFG)


def test_decode_causality(trigraph):
    rng = np.random.default_rng(4)
    p = perturbed_params(4, 3)
    state = encode(np.arange(4.0), random_obs(rng), p, trigraph, CFG)
    times = np.arange(4.0, 8.0)
    ref = [y.data for y in decode(state, times, p, trigraph, CFG, {})]
    for i in range(4):
        pert = [y.data for y in decode(state, times, p, trigraph, CFG, {i: 5 * rng.normal(size=(4, 2))})]
        for j in range(i + 1):
            assert np.array_equal(pert[j], ref[j])
        if i < 3:
            assert not np.array_equal(pert[i + 1], ref[i + 1])


def test_decode_frozen_state():
    graphs = small_trigraph()
    p = perturbed_params(4, 4, scale=0.1)
    for k in ("theta0", "theta_physical", "theta_similarity", "theta_correlation"):
        p.values[k] = np.zeros((4, 4))
    p.values["gru_bz"] = np.full(4, 40.0)
    Z0 = Tensor(np.random.default_rng(5).uniform(-1, 1, (4, 4)))
    init = LatentState(Z0, Tensor(np.zeros((4, 4))), 0.0)
    ys = decode(init, np.array([1.0, 2.0, 3.5]), p, graphs, CFG)
    expect = output_layer(Z0, p).data
    for y in ys:
        np.testing.assert_allclose(y.data, expect, rtol=0, atol=1e-12)


def test_pure_rollout_deterministic(trigraph):
    rng = np.random.default_rng(6)
    p = perturbed_params(4, 6)
    x = random_obs(rng)
    a = forecast(np.arange(4.0), x, np.arange(4.0, 8.0), p, trigraph, CFG)
    b = forecast(np.arange(4.0), x, np.arange(4.0, 8.0), p, trigraph, CFG)
    assert a.tobytes() == b.tobytes()


def test_forecast_shapes():
    graphs = small_trigraph(3)
    p = perturbed_params(4, 0)
    x = np.random.default_rng(0).normal(size=(4, 3, 2))
    assert forecast(np.arange(4.0), x, np.arange(4.0, 8.0), p, graphs, CFG).shape == (4, 3, 2)
    assert forecast(np.arange(4.0), x, np.array([]), p, graphs, CFG).shape == (0, 3, 2)
    xb = np.stack([x, x + 1])
    tb = np.tile(np.arange(4.0), (2, 1))
    assert forecast(tb, xb, tb + 4, p, graphs, CFG).shape == (2, 4, 3, 2)


def test_batched_forecast_matches_single(trigraph):
    rng = np.random.default_rng(7)
    p = perturbed_params(4, 7)
    xb = random_obs(rng, batch=(3,))
    tb = np.array([[0.0, 1, 2, 3], [0, 2, 3, 7], [1, 2, 4, 5]])
    hb = tb[:, -1:] + np.array([[1.0, 2.0], [0.5, 3.0], [2.0, 2.5]])
    batched = forecast(tb, xb, hb, p, trigraph, CFG)
    for b in range(3):
        single = forecast(tb[b], xb[b], hb[b], p, trigraph, CFG)
        np.testing.assert_allclose(batched[b], single, rtol=0, atol=1e-12)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000))
def test_zero_parameters_output_bias(seed):
    graphs = small_trigraph()
    p = zero_params(4, out_b=np.array([0.7, -0.2]))
    x = np.random.default_rng(seed).normal(size=(4, 4, 2)) * 10
    y = forecast(np.arange(4.0), x, np.arange(4.0, 8.0), p, graphs, CFG)
    np.testing.assert_array_equal(y, np.broadcast_to([0.7, -0.2], y.shape))


@settings(max_examples=8, deadline=None)
@given(st.permutations(range(4)), st.integers(0, 1000))
def test_permutation_equivariance(perm, seed):
    graphs = small_trigraph(seed=seed % 7)
    p = perturbed_params(4, seed % 11)
    x = np.random.default_rng(seed).normal(size=(3, 4, 2))
    inv = np.argsort(perm)
    base = forecast(np.arange(3.0), x, np.arange(3.0, 6.0), p, graphs, CFG)
    moved = forecast(np.arange(3.0), x[:, inv], np.arange(3.0, 6.0), p, graphs.permuted(list(perm)), CFG)
    np.testing.assert_allclose(moved, base[:, inv], rtol=0, atol=1e-12)


@pytest.mark.parametrize("anchor,transform_hidden", [("last", True), ("first", False)])
def test_loss_gradcheck_small(anchor, transform_hidden):
    graphs = small_trigraph(3, seed=1)
    d = 3
    cfg = ModelConfig(d, SolverConfig("rk4", 1), anchor, transform_hidden)
    rng = np.random.default_rng(8)
    graph = loss_graph(np.array([0.0, 1.0]), rng.normal(size=(2, 3, 2)), np.array([2.0, 3.0]),
                       rng.normal(size=(2, 3, 2)), graphs, cfg)
    assert dc.grad_check(graph, perturbed_params(d, 1).values) < 1e-4


# -- params / checkpoint ------------------------------------------------------

def test_param_init_bounds_and_seed():
    p = ModelParams.init(9, 3)
    assert set(p.values) == set(param_shapes(9))
    for k, v in p.values.items():
        if v.ndim == 1:
            assert not v.any()
        else:
            assert np.abs(v).max() <= 1 / 3
    assert params_digest(p) == params_digest(ModelParams.init(9, 3))
    assert params_digest(p) != params_digest(ModelParams.init(9, 4))


def test_checkpoint_round_trip(tmp_path):
    p = ModelParams.init(3, 0)
    arrays = dict(p.values, scale=np.array(2.5))
    save_checkpoint(tmp_path / "m.ckpt", arrays, {"digest": "abc"})
    loaded, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"digest": "abc"}
    assert list(loaded) == list(arrays)
    for k in arrays:
        assert loaded[k].tobytes() == np.asarray(arrays[k]).tobytes()
    assert (tmp_path / "m.ckpt").read_bytes().startswith(b"strgode-ckpt v1\n")


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"hello")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.ckpt")
    save_checkpoint(tmp_path / "t.ckpt", {"w": np.ones(3)})
    (tmp_path / "t.ckpt").write_bytes((tmp_path / "t.ckpt").read_bytes()[:-4])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(tmp_path / "t.ckpt")


def test_validate_detects_shape_errors():
    p = ModelParams.init(3)
    p.values["out_b"] = np.zeros(3)
    with pytest.raises(ValueError):
        p.validate()


def test_weighted_aggregation_differs_from_mean():
    graphs = TriGraph(build_physical([(0, 1), (0, 2)], 3),
                      RelationGraph(3, ((0, 1, 0.9), (0, 2, 0.1)), "similarity"),
                      RelationGraph(3, (), "correlation"))
    p = perturbed_params(3, 0)
    z = Tensor(np.random.default_rng(0).normal(size=(3, 3)))
    mean = gode_dynamics(z, p, graphs, "mean").data
    weighted = gode_dynamics(z, p, graphs, "weighted").data
    assert not np.allclose(mean, weighted)
