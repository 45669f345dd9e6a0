import numpy as np
import pytest

from arcta import diffengine as de
from arcta.diffengine import (
    Bound,
    ParamStore,
    ShapeMismatch,
    Tape,
    backward,
    forward,
    jvp,
    load_checkpoint,
    replay_forward,
    restore_into,
    save_checkpoint,
    time_derivative,
)
from arcta.models import MlpSpec, mlp_apply, mlp_init

from .oracles import ad_grad, fd_grad, max_rel_err


def test_forward_square():
    store = ParamStore()
    store.add("x", 3.0)
    val, _ = forward(lambda tape, b: de.square(b["x"]), store)
    assert val == 9.0


def test_forward_tanh_zero():
    store = ParamStore()
    store.add("x", 0.0)
    val, _ = forward(lambda tape, b: de.tanh(b["x"]), store)
    assert val == 0.0


def test_forward_sum_matvec():
    store = ParamStore()
    store.add("W", np.eye(2))
    val, _ = forward(
        lambda tape, b, x: de.sum_(de.matmul(b["W"], x)), store, np.array([[1.0], [2.0]])
    )
    assert val == 3.0


def test_shape_mismatch_names_primitive():
    store = ParamStore()
    store.add("a", np.zeros(3))
    store.add("b", np.zeros((2, 2)))
    with pytest.raises(ShapeMismatch, match="add"):
        forward(lambda tape, b: de.add(b["a"], b["b"]), store)
    with pytest.raises(ShapeMismatch, match="matmul"):
        forward(lambda tape, b: de.matmul(b["b"], b["b"][0:1, :][..., 0:1]), store)


def test_backward_square():
    store = ParamStore()
    store.add("x", 3.0)
    _, tape = forward(lambda tape, b: de.square(b["x"]), store)
    backward(tape)
    assert store.grad("x") == pytest.approx(6.0)


def test_backward_exp_at_zero():
    store = ParamStore()
    store.add("x", 0.0)
    _, tape = forward(lambda tape, b: de.exp(b["x"]), store)
    backward(tape)
    assert store.grad("x") == pytest.approx(1.0)


def test_backward_requires_scalar():
    store = ParamStore()
    store.add("x", np.ones(3))
    _, tape = forward(lambda tape, b: de.square(b["x"]), store)
    with pytest.raises(de.DiffEngineError, match="scalar"):
        backward(tape)


def test_mlp_gradient_matches_finite_differences():
    spec = MlpSpec((3, 16, 16, 2), "relu")
    store = ParamStore()
    mlp_init(store, "net", spec, seed=11)
    x = np.linspace(-1.0, 1.0, 12).reshape(4, 3)
    y = np.cos(np.arange(8.0)).reshape(4, 2)

    def loss(tape, b, xin):
        out = mlp_apply(b, "net", spec, xin)
        return de.sum_(de.square(de.sub(out, tape.const(y))))

    assert max_rel_err(ad_grad(loss, store, x), fd_grad(loss, store, x)) < 1e-6


def test_gradient_accumulation_is_linear():
    store = ParamStore()
    store.add("x", 1.5)
    _, tape = forward(lambda tape, b: de.square(b["x"]), store)
    backward(tape)
    once = store.grad("x").copy()
    backward(tape)
    assert store.grad("x") == pytest.approx(2.0 * once)
    store.zero_grads()
    assert store.grad("x") == 0.0


@pytest.mark.parametrize(
    "name,build",
    [
        ("add", lambda b, x: de.add(b["p"], x)),
        ("add_bias", lambda b, x: de.add(x, b["v"])),
        ("sub", lambda b, x: de.sub(b["p"], x)),
        ("mul", lambda b, x: de.mul(b["p"], x)),
        ("mul_row", lambda b, x: de.mul(x, b["v"])),
        ("div", lambda b, x: de.div(b["p"], de.shift(de.square(x), 0.5))),
        ("div_row", lambda b, x: de.div(x, de.shift(de.square(b["v"]), 0.5))),
        ("neg", lambda b, x: de.neg(b["p"])),
        ("scale", lambda b, x: de.scale(b["p"], -2.5)),
        ("shift", lambda b, x: de.shift(b["p"], 0.7)),
        ("cmul", lambda b, x: de.cmul(b["p"], np.arange(1.0, 7.0).reshape(2, 3))),
        ("exp", lambda b, x: de.exp(b["p"])),
        ("log", lambda b, x: de.log(de.shift(de.square(b["p"]), 1.0))),
        ("tanh", lambda b, x: de.tanh(b["p"])),
        ("relu", lambda b, x: de.relu(b["p"])),
        ("softplus", lambda b, x: de.softplus(b["p"])),
        ("square", lambda b, x: de.square(b["p"])),
        ("sqrt", lambda b, x: de.sqrt(de.shift(de.square(b["p"]), 1.0))),
        ("clamp", lambda b, x: de.clamp_min(b["p"], 0.1)),
        ("matmul", lambda b, x: de.matmul(b["p"], x)),
        ("matmul_T", lambda b, x: de.matmul(x, de.mT(b["p"]))),
        ("sum_axis", lambda b, x: de.sum_(de.mul(b["p"], x), axis=0)),
        ("concat", lambda b, x: de.concat([b["p"], x], axis=1)),
        ("slice", lambda b, x: b["p"][0:1, 1:3]),
        ("reshape", lambda b, x: de.reshape(b["p"], (3, 2))),
        ("addouter", lambda b, x: de.addouter(b["v"], b["v"])),
        ("psolve", lambda b, x: de.psolve(de.add(de.matmul(b["p"], de.mT(b["p"])), b["eye"]), x)),
    ],
)
def test_primitive_gradients_match_fd(name, build):
    rng = np.random.default_rng(hash(name) % 2**31)
    store = ParamStore()
    store.add("p", rng.normal(size=(2, 3)) + (0.5 if name == "clamp" else 0.0))
    store.add("v", rng.normal(size=3))
    store.add("eye", 3.0 * np.eye(2))
    x_shapes = {"matmul": (3, 2), "psolve": (2, 4)}
    x = rng.normal(size=x_shapes.get(name, (2, 3)))

    def loss(tape, b, xin):
        return de.sum_(de.square(build(b, xin)))

    assert max_rel_err(ad_grad(loss, store, x), fd_grad(loss, store, x)) < 1e-6


def test_time_derivative_polynomial():
    store = ParamStore()
    assert time_derivative(lambda tape, b, t: de.square(t), store, 2.0) == pytest.approx(4.0)


def test_time_derivative_constant():
    store = ParamStore()
    store.add("c", 5.0)
    assert time_derivative(lambda tape, b, t: b["c"], store, 1.3) == pytest.approx(0.0)


def test_jvp_matches_fd_through_mlp():
    spec = MlpSpec((1, 8, 8, 2), "tanh")
    store = ParamStore()
    mlp_init(store, "net", spec, seed=5)
    t0 = np.array([[0.37]])

    def f_np(t):
        from arcta.models import mlp_apply_np

        return mlp_apply_np(store, "net", spec, t)

    d_fd = (f_np(t0 + 1e-6) - f_np(t0 - 1e-6)) / 2e-6
    tape = Tape()
    bound = Bound(tape, store)
    tv = tape.const(t0)
    out = mlp_apply(bound, "net", spec, tv)
    (dout,) = jvp(tape, [out], tv, np.ones_like(t0))
    assert max_rel_err(dout.value, d_fd) < 1e-8


def test_gradient_of_time_derivative_matches_fd():
    # params enter the loss only through d(out)/dt: mixed partials
    spec = MlpSpec((1, 6, 3), "tanh")
    store = ParamStore()
    mlp_init(store, "net", spec, seed=9)
    tq = np.array([[0.1], [0.9]])

    def loss(tape, b, t):
        out = mlp_apply(b, "net", spec, t)
        (dout,) = jvp(tape, [out], t, np.ones_like(t.value))
        return de.sum_(de.square(dout))

    assert max_rel_err(ad_grad(loss, store, tq), fd_grad(loss, store, tq, h=1e-6)) < 1e-6


def test_tape_replay_is_bit_identical():
    spec = MlpSpec((2, 8, 2), "relu")
    store = ParamStore()
    mlp_init(store, "net", spec, seed=2)
    x = np.random.default_rng(0).normal(size=(5, 2))

    def f(tape, b, xin):
        out = mlp_apply(b, "net", spec, xin)
        return de.sum_(de.square(out))

    val, tape = forward(f, store, x)
    assert replay_forward(tape).tobytes() == np.asarray(val).tobytes()


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    store = ParamStore()
    rng = np.random.default_rng(7)
    store.add("a.w", rng.normal(size=(3, 4)) * 1e-7)
    store.add("b", rng.normal(size=5) * 1e12)
    store.add("scalar", np.pi)
    base = str(tmp_path / "ckpt")
    save_checkpoint(store, base, step=42, rng={"seed": 1, "step": 42})
    entries, manifest = load_checkpoint(base)
    assert manifest["step"] == 42
    for name in store.names():
        assert entries[name].tobytes() == store.value(name).tobytes()
    other = ParamStore()
    restore_into(other, entries)
    assert other.value("a.w").tobytes() == store.value("a.w").tobytes()


def test_checkpoint_manifest_mismatch_rejected(tmp_path):
    store = ParamStore()
    store.add("a", np.ones(3))
    base = str(tmp_path / "ckpt")
    save_checkpoint(store, base)
    import json

    with open(base + ".json") as f:
        manifest = json.load(f)
    manifest["entries"][0]["shape"] = [4]
    with open(base + ".json", "w") as f:
        json.dump(manifest, f)
    with pytest.raises(de.DiffEngineError):
        load_checkpoint(base)


def test_float32_option():
    de.set_default_dtype("float32")
    try:
        store = ParamStore()
        store.add("x", 2.0)
        assert store.value("x").dtype == np.float32
        val, tape = forward(lambda tape, b: de.square(b["x"]), store)
        assert val.dtype == np.float32
        backward(tape)
    finally:
        de.set_default_dtype("float64")
