import os

import numpy as np
import pytest

from actbench import activations as act
from actbench import tensor
from actbench import verify
from actbench.activations import ActivationKind, FixedHyper
from actbench.task import model_check_inputs
from tests.utils import get_output


def numeric_grad(loss, array: np.ndarray, h: float) -> np.ndarray:
    """ Central differences of `loss()` with respect to every entry of `array`, perturbed in place """
    out = np.zeros_like(array)
    flat, grad = array.reshape(-1), out.reshape(-1)
    for index in range(flat.size):
        original = flat[index]
        flat[index] = original + h
        plus = loss()
        flat[index] = original - h
        minus = loss()
        flat[index] = original
        grad[index] = (plus - minus) / (2 * h)
    return out


def max_rel_err(analytic, numeric, floor: float = 1e-8) -> float:
    return float(np.max(verify.relative_error(analytic, numeric, floor)))


def test_linear():
    assert tensor.linear_fwd(np.array([1.0, 0.0]), np.eye(2)).tolist() == [1.0, 0.0]
    dx, dW = tensor.linear_bwd(np.array([1.0, 2.0]), np.zeros((2, 1)), np.array([3.0]))
    assert dW.tolist() == [[3.0], [6.0]]
    with pytest.raises(ValueError):
        tensor.linear_fwd(np.ones((2, 3)), np.ones((2, 3)))


def test_linear_gradcheck():
    rng = np.random.default_rng(0)
    x, W, r = rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(3, 5))
    dx, dW = tensor.linear_bwd(x, W, r)

    def loss():
        return float(np.sum(tensor.linear_fwd(x, W) * r))

    assert max_rel_err(dx, numeric_grad(loss, x, 1e-4)) < 1e-6
    assert max_rel_err(dW, numeric_grad(loss, W, 1e-4)) < 1e-6


def test_rmsnorm_values():
    ones = np.ones((2, 6))
    assert np.max(np.abs(tensor.rmsnorm_fwd(ones, np.ones(6)) - 1.0)) < 1e-6
    x = np.random.default_rng(1).normal(size=(3, 6))
    gain = np.linspace(0.5, 1.5, 6)
    assert np.allclose(tensor.rmsnorm_fwd(10 * x, gain, eps=0.0), tensor.rmsnorm_fwd(x, gain, eps=0.0),
                       rtol=0, atol=1e-12)
    assert np.allclose(tensor.rmsnorm_fwd(10 * x, gain), tensor.rmsnorm_fwd(x, gain), rtol=0, atol=1e-5)
    with pytest.raises(ValueError):
        tensor.rmsnorm_fwd(np.ones((2, 0)), np.ones(0))


def test_rmsnorm_gradcheck():
    rng = np.random.default_rng(2)
    x, gain, r = rng.normal(size=(3, 5)), rng.normal(1.0, 0.2, size=5), rng.normal(size=(3, 5))
    dx, dgain = tensor.rmsnorm_bwd(x, gain, r)

    def loss():
        return float(np.sum(tensor.rmsnorm_fwd(x, gain) * r))

    assert max_rel_err(dx, numeric_grad(loss, x, 1e-5)) < 1e-5
    assert max_rel_err(dgain, numeric_grad(loss, gain, 1e-5)) < 1e-5


def test_block_widths():
    rng = np.random.default_rng(0)
    standard = tensor.MlpBlock.create(8, ActivationKind.XIelu, rng)
    gated = tensor.GatedMlpBlock.create(8, rng)
    assert standard.w_up.shape == (8, 48)
    assert gated.w_up.shape == (8, 32)
    # Compute-matched: same number of weights
    assert sum(v.size for k, v in standard.parameters().items() if k != "act_raw") == \
        sum(v.size for v in gated.parameters().values())


@pytest.mark.parametrize("kind", list(ActivationKind))
def test_mlp_gradcheck(kind):
    rng = np.random.default_rng(4)
    block = tensor.MlpBlock.create(3, kind, rng, d_hidden=4, std=0.7)
    x, r = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    grads = tensor.mlp_bwd(block, x, r)

    def loss():
        return float(np.sum(tensor.mlp_fwd(block, x) * r))

    assert max_rel_err(grads.dx, numeric_grad(loss, x, 1e-5), floor=1e-6) < 1e-5
    assert max_rel_err(grads.dw_up, numeric_grad(loss, block.w_up, 1e-5), floor=1e-6) < 1e-5
    assert max_rel_err(grads.dw_down, numeric_grad(loss, block.w_down, 1e-5), floor=1e-6) < 1e-5
    dalpha = numeric_grad(loss, block.act_raw, 1e-5)
    if kind.trainable:
        assert max_rel_err(np.array([grads.dalpha_raw_p, grads.dalpha_raw_n]), dalpha, floor=1e-6) < 1e-5
    else:
        assert grads.dalpha_raw_p == grads.dalpha_raw_n == 0.0
        assert np.all(dalpha == 0.0)


@pytest.mark.parametrize("kind", [ActivationKind.XIelu, ActivationKind.XIPRelu])
def test_mlp_trained_beta_gradcheck(kind):
    rng = np.random.default_rng(9)
    block = tensor.MlpBlock.create(3, kind, rng, hyper=FixedHyper(trainable_beta=True), d_hidden=4, std=0.7)
    assert block.act_raw.size == 3
    assert block.params.beta == 0.5
    block.act_raw[2] = 0.3
    x, r = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    grads = tensor.mlp_bwd(block, x, r)

    def loss():
        return float(np.sum(tensor.mlp_fwd(block, x) * r))

    assert grads.dbeta is not None
    assert max_rel_err(grads.dact_raw, numeric_grad(loss, block.act_raw, 1e-5), floor=1e-6) < 1e-5


def test_mlp_properties():
    rng = np.random.default_rng(6)
    for kind in (ActivationKind.XIelu, ActivationKind.XIPRelu, ActivationKind.Relu2):
        block = tensor.MlpBlock.create(4, kind, rng, std=0.5)
        assert np.all(tensor.mlp_fwd(block, np.zeros((3, 4))) == 0.0)

    block = tensor.MlpBlock.create(4, ActivationKind.XIelu, rng, std=0.5)
    x, dy = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    single = tensor.mlp_bwd(block, x, dy)
    double = tensor.mlp_bwd(block, np.concatenate([x, x]), np.concatenate([dy, dy]))
    assert double.dalpha_raw_p == pytest.approx(2 * single.dalpha_raw_p, rel=1e-12)
    assert double.dalpha_raw_n == pytest.approx(2 * single.dalpha_raw_n, rel=1e-12)

    pre = tensor.linear_fwd(rng.normal(size=(64, 4)), block.w_up)
    assert np.any(act.forward(ActivationKind.XIelu, pre, block.params, block.hyper) < 0)
    assert np.all(act.forward(ActivationKind.Relu2, pre, None, block.hyper) >= 0)


def test_swiglu():
    rng = np.random.default_rng(8)
    block = tensor.GatedMlpBlock.create(3, rng, d_hidden=4, std=0.7)
    assert np.all(tensor.swiglu_fwd(block, np.zeros((2, 3))) == 0.0)
    x, r = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    grads = tensor.swiglu_bwd(block, x, r)

    def loss():
        return float(np.sum(tensor.swiglu_fwd(block, x) * r))

    assert max_rel_err(grads.dx, numeric_grad(loss, x, 1e-5), floor=1e-6) < 1e-5
    assert max_rel_err(grads.dw_gate, numeric_grad(loss, block.w_gate, 1e-5), floor=1e-6) < 1e-5
    assert max_rel_err(grads.dw_up, numeric_grad(loss, block.w_up, 1e-5), floor=1e-6) < 1e-5
    assert max_rel_err(grads.dw_down, numeric_grad(loss, block.w_down, 1e-5), floor=1e-6) < 1e-5


def test_swiglu_saturated_gate_is_linear():
    rng = np.random.default_rng(9)
    block = tensor.GatedMlpBlock.create(3, rng, d_hidden=4)
    block.w_gate[...] = 50.0 + rng.uniform(size=block.w_gate.shape)
    x = np.ones((1, 3))
    direct = ((x @ block.w_gate) * (x @ block.w_up)) @ block.w_down
    assert np.allclose(tensor.swiglu_fwd(block, x), direct, rtol=1e-12, atol=0)


def test_cross_entropy():
    loss, dlogits = tensor.cross_entropy(np.zeros(27), 3)
    assert loss == pytest.approx(np.log(27), abs=1e-12)
    assert abs(dlogits.sum()) < 1e-15
    loss, _ = tensor.cross_entropy(np.array([1000.0, 0.0, 0.0]), 0)
    assert loss == pytest.approx(0.0, abs=1e-12)
    loss, dlogits = tensor.cross_entropy(np.random.default_rng(0).normal(size=(4, 6)), np.array([0, 1, 2, 3]))
    assert np.allclose(dlogits.sum(axis=1), 0.0, atol=1e-15)
    with pytest.raises(ValueError):
        tensor.cross_entropy(np.zeros((2, 3)), np.array([0]))


def _tiny(activation="xielu", **kwargs):
    config = tensor.ModelConfig(vocab_size=5, d_model=4, n_layers=1, context_length=2, activation=activation,
                                **kwargs)
    return tensor.ToyLm.create(config, seed=1)


def test_toylm_loss():
    model = _tiny()
    loss, _ = tensor.toylm_fwd(model, np.array([[0, 1], [2, 3]]), np.array([4, 0]))
    assert np.isfinite(loss) and loss > 0
    assert len(model.alphas()) == 1
    deep = tensor.ToyLm.create(tensor.ModelConfig(vocab_size=5, d_model=4, n_layers=3, context_length=2))
    assert len(deep.alphas()) == 3
    assert deep.alphas()[0].alpha_p == pytest.approx(0.8, abs=1e-12)
    assert deep.alphas()[2].alpha_n == pytest.approx(0.8, abs=1e-12)
    assert _tiny("swiglu").alphas() == []
    assert _tiny("relu2").alphas() == []


def test_toylm_errors():
    model = _tiny()
    with pytest.raises(ValueError, match="Vocabulary overflow"):
        tensor.toylm_fwd(model, np.array([[0, 5]]), np.array([1]))
    with pytest.raises(ValueError, match="Vocabulary overflow"):
        tensor.toylm_fwd(model, np.array([[0, 1]]), np.array([-1]))
    with pytest.raises(ValueError):
        tensor.toylm_fwd(model, np.array([[0, 1, 2]]), np.array([1]))
    with pytest.raises(ValueError):
        tensor.ModelConfig(vocab_size=5, activation="xielu", alpha_n_init=0.4)
    with pytest.raises(ValueError):
        tensor.ModelConfig(vocab_size=5, activation="tanh")
    for activation in ("relu2", "swiglu", "xsilu"):
        with pytest.raises(ValueError, match="beta can only be trained"):
            tensor.ModelConfig(vocab_size=5, activation=activation, hyper=FixedHyper(trainable_beta=True))


def test_toylm_debug_guard():
    model = _tiny()
    model.debug = True
    model.embedding[0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        tensor.toylm_fwd(model, np.array([[0, 1]]), np.array([1]))


def test_parameters_are_shared():
    model = _tiny(tie_word_embeddings=False)
    params = model.parameters()
    assert list(params) == [
        "embedding", "w_in", "layers.0.norm", "layers.0.w_up", "layers.0.w_down", "layers.0.act_raw",
        "final_norm", "w_out"
    ]
    params["layers.0.act_raw"][0] = 0.0
    assert model.alphas()[0].alpha_p == pytest.approx(np.log(2.0), abs=1e-15)
    assert model.num_parameters() == sum(v.size for v in params.values())


@pytest.mark.parametrize("activation", [kind.value for kind in ActivationKind] + ["swiglu"])
def test_toylm_gradcheck(activation):
    model, tokens, targets = model_check_inputs(activation, seed=2)
    report = verify.gradcheck_model(model, tokens, targets)
    assert report.passed, report.describe()


def test_toylm_gradcheck_without_layers():
    config = tensor.ModelConfig(vocab_size=5, d_model=4, n_layers=0, context_length=2, init_std=0.5)
    model = tensor.ToyLm.create(config, seed=3)
    assert model.alphas() == []
    report = verify.gradcheck_model(model, np.array([[0, 1], [4, 2]]), np.array([3, 3]))
    assert report.passed, report.describe()


def test_toylm_gradcheck_with_zero_tolerance():
    model, tokens, targets = model_check_inputs("xielu", seed=2)
    report = verify.gradcheck_model(model, tokens, targets, tol=0.0)
    assert not report.passed


@pytest.mark.parametrize("activation", ["xielu", "xiprelu"])
def test_toylm_trained_beta(activation):
    model, tokens, targets = model_check_inputs(activation, seed=2, hyper=FixedHyper(trainable_beta=True))
    assert model.betas() == [0.5]
    model.parameters()["layers.0.act_raw"][2] = 0.7
    report = verify.gradcheck_model(model, tokens, targets)
    assert report.passed, report.describe()

    os.makedirs(get_output(""), exist_ok=True)
    loaded = tensor.load_checkpoint(tensor.save_checkpoint(model, get_output("beta-checkpoint.txt")))
    assert loaded.config.hyper.trainable_beta
    assert loaded.betas() == [0.7]


def test_untied_gradcheck():
    config = tensor.ModelConfig(vocab_size=5, d_model=4, n_layers=2, context_length=2, init_std=0.5,
                                tie_word_embeddings=False)
    model = tensor.ToyLm.create(config, seed=3)
    report = verify.gradcheck_model(model, np.array([[0, 1], [4, 2]]), np.array([3, 3]))
    assert report.passed, report.describe()


def test_checkpoint():
    os.makedirs(get_output(""), exist_ok=True)
    model = _tiny(hyper=FixedHyper(beta_n=0.25, clamp=True))
    model.parameters()["layers.0.act_raw"][1] = 1.234
    path = tensor.save_checkpoint(model, get_output("checkpoint.txt"))
    loaded = tensor.load_checkpoint(path)
    assert loaded.config == model.config
    for name, value in model.parameters().items():
        assert np.array_equal(loaded.parameters()[name], value)
    tokens, targets = np.array([[0, 1], [3, 2]]), np.array([4, 1])
    assert tensor.toylm_fwd(loaded, tokens, targets)[0] == tensor.toylm_fwd(model, tokens, targets)[0]


def test_checkpoint_rejects_other_files():
    os.makedirs(get_output(""), exist_ok=True)
    with open(get_output("not-a-checkpoint.txt"), "w") as f:
        f.write("step,lr,loss\n")
    with pytest.raises(ValueError):
        tensor.load_checkpoint(get_output("not-a-checkpoint.txt"))
