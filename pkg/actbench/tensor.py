# Std lib
import dataclasses
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Tuple, Union
# Non std lib
import numpy as np
# Local
from actbench import activations as act
from actbench import utils
from actbench.activations import ActivationKind, ConstrainedParams, FixedHyper, RawParams


# Dense row-major array, the carrier of every model computation
Tensor = np.ndarray

NORM_EPS: float = 1e-6
STANDARD_RATIO: int = 6
GATED_RATIO: int = 4
GATED_ACTIVATION = "swiglu"
CHECKPOINT_MAGIC = "actbench-checkpoint"
CHECKPOINT_VERSION = 1


def check_finite(name: str, value: Tensor) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"Non finite values in `{name}`")
    return value


# ---------------------------------------------------------------------------
# Linear and RMSNorm
# ---------------------------------------------------------------------------


def linear_fwd(x: Tensor, W: Tensor) -> Tensor:
    """ Biasless projection y = xW

    >>> linear_fwd(np.array([1.0, 0.0]), np.eye(2)).tolist()
    [1.0, 0.0]
    """
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"Shape mismatch: cannot multiply {x.shape} by {W.shape}")
    return x @ W


def linear_bwd(x: Tensor, W: Tensor, dy: Tensor) -> Tuple[Tensor, Tensor]:
    """ Returns (dx, dW) with dx = dy Wᵀ and dW = xᵀ dy

    >>> linear_bwd(np.array([1.0, 2.0]), np.zeros((2, 1)), np.array([3.0]))[1].tolist()
    [[3.0], [6.0]]
    """
    if x.shape[-1] != W.shape[0] or dy.shape[-1] != W.shape[1]:
        raise ValueError(f"Shape mismatch: x {x.shape}, W {W.shape}, dy {dy.shape}")
    dx = dy @ W.T
    dW = x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    return dx, dW


def rmsnorm_fwd(x: Tensor, gain: Tensor, eps: float = NORM_EPS) -> Tensor:
    if x.shape[-1] == 0:
        raise ValueError("RMSNorm needs a non empty feature dimension")
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return gain * (x / rms)


def rmsnorm_bwd(x: Tensor, gain: Tensor, dy: Tensor, eps: float = NORM_EPS) -> Tuple[Tensor, Tensor]:
    """ Returns (dx, dgain) """
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    scaled = dy * gain
    dx = scaled / rms - x * np.mean(scaled * x, axis=-1, keepdims=True) / rms ** 3
    dgain = (dy * (x / rms)).reshape(-1, x.shape[-1]).sum(axis=0)
    return dx, dgain


# ---------------------------------------------------------------------------
# MLP blocks
# ---------------------------------------------------------------------------


@dataclass
class MlpBlock:
    """ Standard MLP block, W_down · act(W_up · x)

    `act_raw` holds [alpha_p_raw, alpha_n_raw] as an array so that optimizers update it in place, followed by beta
    when the hyper-parameters train it. :attr:`raw` exposes it as :class:`RawParams`.
    """
    w_up: Tensor
    w_down: Tensor
    act_kind: ActivationKind
    act_raw: Tensor
    hyper: FixedHyper = field(default_factory=FixedHyper)

    @classmethod
    def create(cls, d_model: int, kind: ActivationKind, rng: np.random.Generator,
               hyper: Optional[FixedHyper] = None, d_hidden: Optional[int] = None, std: float = 0.02,
               down_std: Optional[float] = None, alpha_p_init: float = 0.8, alpha_n_init: float = 0.8
               ) -> "MlpBlock":
        hyper = hyper or FixedHyper()
        d_hidden = d_hidden or STANDARD_RATIO * d_model
        raw = act.init_raw(kind, hyper, alpha_p_init, alpha_n_init) if kind.trainable else RawParams(0.0, 0.0)
        values = [raw.alpha_p_raw, raw.alpha_n_raw] + ([] if raw.beta is None else [raw.beta])
        return cls(
            w_up=rng.normal(0.0, std, size=(d_model, d_hidden)),
            w_down=rng.normal(0.0, std if down_std is None else down_std, size=(d_hidden, d_model)),
            act_kind=kind,
            act_raw=np.array(values, dtype=float),
            hyper=hyper,
        )

    @property
    def raw(self) -> RawParams:
        beta = float(self.act_raw[2]) if self.act_raw.size > 2 else None
        return RawParams(float(self.act_raw[0]), float(self.act_raw[1]), beta=beta)

    @property
    def params(self) -> ConstrainedParams:
        return act.constrain(self.raw, self.hyper, self.act_kind)

    def parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        out = {f"{prefix}w_up": self.w_up, f"{prefix}w_down": self.w_down}
        if self.act_kind.trainable:
            out[f"{prefix}act_raw"] = self.act_raw
        return out


@dataclass
class GatedMlpBlock:
    """ SwiGLU block, W_down · (SiLU(x W_gate) ⊙ (x W_up)) """
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor

    @classmethod
    def create(cls, d_model: int, rng: np.random.Generator, d_hidden: Optional[int] = None, std: float = 0.02,
               down_std: Optional[float] = None) -> "GatedMlpBlock":
        d_hidden = d_hidden or GATED_RATIO * d_model
        return cls(
            w_gate=rng.normal(0.0, std, size=(d_model, d_hidden)),
            w_up=rng.normal(0.0, std, size=(d_model, d_hidden)),
            w_down=rng.normal(0.0, std if down_std is None else down_std, size=(d_hidden, d_model)),
        )

    def parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        return {f"{prefix}w_gate": self.w_gate, f"{prefix}w_up": self.w_up, f"{prefix}w_down": self.w_down}


class MlpCache(NamedTuple):
    x: Tensor
    pre: Tensor
    hidden: Tensor


class GatedCache(NamedTuple):
    x: Tensor
    gate: Tensor
    up: Tensor
    hidden: Tensor


class MlpGrads(NamedTuple):
    dx: Tensor
    dw_up: Tensor
    dw_down: Tensor
    dalpha_raw_p: float
    dalpha_raw_n: float
    dbeta: Optional[float] = None

    @property
    def dact_raw(self) -> Tensor:
        """ Gradient laid out like :attr:`MlpBlock.act_raw` """
        return np.array([self.dalpha_raw_p, self.dalpha_raw_n] + ([] if self.dbeta is None else [self.dbeta]))


class GatedGrads(NamedTuple):
    dx: Tensor
    dw_gate: Tensor
    dw_up: Tensor
    dw_down: Tensor


def _mlp_forward(block: MlpBlock, x: Tensor) -> Tuple[Tensor, MlpCache]:
    pre = linear_fwd(x, block.w_up)
    hidden = act.forward(block.act_kind, pre, block.params, block.hyper)
    return linear_fwd(hidden, block.w_down), MlpCache(x, pre, hidden)


def mlp_fwd(block: MlpBlock, x: Tensor) -> Tensor:
    return _mlp_forward(block, x)[0]


def mlp_bwd(block: MlpBlock, x: Tensor, dy: Tensor, cache: Optional[MlpCache] = None) -> MlpGrads:
    """ Backward of :func:`mlp_fwd`. Alpha gradients are summed over every element and chained through the
    softplus constraint (d softplus / d raw = sigmoid(raw)). A trained beta is unconstrained, its gradient also
    collects the alpha_n term of the shifted constraint. """
    if cache is None:
        cache = _mlp_forward(block, x)[1]
    params = block.params
    dhidden, dw_down = linear_bwd(cache.hidden, block.w_down, dy)
    dpre = dhidden * act.grad_input(block.act_kind, cache.pre, params, block.hyper)
    dx, dw_up = linear_bwd(cache.x, block.w_up, dpre)
    dalpha_raw_p = dalpha_raw_n = 0.0
    dbeta = None
    if block.act_kind.trainable:
        d_alpha_p, d_alpha_n = act.grad_params(block.act_kind, cache.pre, params, block.hyper)
        dalpha_n = float(np.sum(dhidden * d_alpha_n))
        dalpha_raw_p = float(np.sum(dhidden * d_alpha_p)) * act.sigmoid(block.act_raw[0])
        dalpha_raw_n = dalpha_n * act.sigmoid(block.act_raw[1])
        if params.beta is not None:
            d_beta = act.grad_beta(block.act_kind, cache.pre, params, block.hyper)
            dbeta = float(np.sum(dhidden * d_beta)) + dalpha_n * act.dalpha_n_dbeta(block.act_kind)
    return MlpGrads(dx, dw_up, dw_down, dalpha_raw_p, dalpha_raw_n, dbeta)


def _swiglu_forward(block: GatedMlpBlock, x: Tensor) -> Tuple[Tensor, GatedCache]:
    gate = linear_fwd(x, block.w_gate)
    up = linear_fwd(x, block.w_up)
    hidden = act.silu(gate) * up
    return linear_fwd(hidden, block.w_down), GatedCache(x, gate, up, hidden)


def swiglu_fwd(block: GatedMlpBlock, x: Tensor) -> Tensor:
    return _swiglu_forward(block, x)[0]


def swiglu_bwd(block: GatedMlpBlock, x: Tensor, dy: Tensor, cache: Optional[GatedCache] = None) -> GatedGrads:
    if cache is None:
        cache = _swiglu_forward(block, x)[1]
    dhidden, dw_down = linear_bwd(cache.hidden, block.w_down, dy)
    dgate = dhidden * cache.up * act.baseline_dx(ActivationKind.Silu, cache.gate)
    dup = dhidden * act.silu(cache.gate)
    dx_gate, dw_gate = linear_bwd(cache.x, block.w_gate, dgate)
    dx_up, dw_up = linear_bwd(cache.x, block.w_up, dup)
    return GatedGrads(dx_gate + dx_up, dw_gate, dw_up, dw_down)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, target: Union[int, Tensor]) -> Tuple[float, Tensor]:
    """ -log softmax(logits)[target], averaged over rows for a batch. Returns (loss, dlogits).

    >>> loss, dlogits = cross_entropy(np.zeros(27), 3)
    >>> round(loss, 7), abs(float(dlogits.sum())) < 1e-15
    (3.2958369, True)
    """
    logits = np.asarray(logits, dtype=float)
    single = logits.ndim == 1
    logits2 = logits.reshape(-1, logits.shape[-1])
    targets = np.atleast_1d(np.asarray(target, dtype=int))
    if targets.shape[0] != logits2.shape[0]:
        raise ValueError(f"Expected {logits2.shape[0]} targets, got {targets.shape[0]}")
    shifted = logits2 - logits2.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    rows = np.arange(logits2.shape[0])
    loss = float(-log_probs[rows, targets].mean())
    dlogits = np.exp(log_probs)
    dlogits[rows, targets] -= 1.0
    dlogits /= logits2.shape[0]
    return loss, dlogits.reshape(logits.shape) if single else dlogits


# ---------------------------------------------------------------------------
# Toy language model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    """ Shape of the toy LM: a residual MLP over the concatenated embeddings of the previous `context_length` tokens

    :param activation: An :class:`ActivationKind` value, or `swiglu` for gated blocks
    :param mlp_ratio: Hidden size over d_model, 0 applies the compute-matched rule (6 standard, 4 gated)
    """
    vocab_size: int
    d_model: int = 64
    n_layers: int = 4
    context_length: int = 8
    activation: str = "xielu"
    mlp_ratio: int = 0
    tie_word_embeddings: bool = True
    init_std: float = 0.02
    alpha_p_init: float = 0.8
    alpha_n_init: float = 0.8
    hyper: FixedHyper = field(default_factory=FixedHyper)

    def __post_init__(self):
        if self.vocab_size < 1 or self.d_model < 1 or self.context_length < 1 or self.n_layers < 0:
            raise ValueError(f"Invalid model shape {self}")
        kind = self.kind
        if self.hyper.trainable_beta and (kind is None or not kind.has_beta):
            raise ValueError(f"beta can only be trained with xielu or xiprelu, not {self.activation}")
        if kind is not None and kind.trainable:
            act.init_raw(kind, self.hyper, self.alpha_p_init, self.alpha_n_init)

    @property
    def gated(self) -> bool:
        return self.activation.lower() == GATED_ACTIVATION

    @property
    def kind(self) -> Optional[ActivationKind]:
        return None if self.gated else ActivationKind.from_name(self.activation)

    @property
    def d_hidden(self) -> int:
        ratio = self.mlp_ratio or (GATED_RATIO if self.gated else STANDARD_RATIO)
        return ratio * self.d_model


@dataclass
class ResidualBlock:
    """ Pre-norm residual block, h + mlp(RMSNorm(h)) """
    norm: Tensor
    mlp: Union[MlpBlock, GatedMlpBlock]

    def parameters(self, prefix: str) -> Dict[str, Tensor]:
        return {f"{prefix}norm": self.norm, **self.mlp.parameters(prefix)}


class ToyLmCache(NamedTuple):
    tokens: Tensor
    targets: Tensor
    inputs: Tensor
    blocks: List[Tuple[Tensor, Tensor, Union[MlpCache, GatedCache]]]
    final: Tensor
    normed: Tensor


class ToyLm:
    def __init__(self, config: ModelConfig, embedding: Tensor, w_in: Tensor, blocks: List[ResidualBlock],
                 final_norm: Tensor, w_out: Optional[Tensor] = None, debug: bool = False):
        """

        :param embedding: [vocab x d_model] table, also the output projection when embeddings are tied
        :param w_in: [context_length * d_model x d_model] projection of the concatenated embeddings
        :param debug: Check every intermediate for NaN/inf
        """
        self.config: ModelConfig = config
        self.embedding: Tensor = embedding
        self.w_in: Tensor = w_in
        self.blocks: List[ResidualBlock] = blocks
        self.final_norm: Tensor = final_norm
        self.w_out: Optional[Tensor] = w_out
        self.debug: bool = debug
        if not config.tie_word_embeddings and w_out is None:
            raise ValueError("Untied models need an output projection")

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0, debug: bool = False) -> "ToyLm":
        """ Gaussian init with `init_std`, down projections scaled by 1/sqrt(2 n_layers), unit norm gains """
        rng = np.random.default_rng(seed)
        d, std = config.d_model, config.init_std
        down_std = std / np.sqrt(2.0 * max(config.n_layers, 1))
        embedding = rng.normal(0.0, std, size=(config.vocab_size, d))
        w_in = rng.normal(0.0, std, size=(config.context_length * d, d))
        blocks = []
        for _ in range(config.n_layers):
            if config.gated:
                mlp = GatedMlpBlock.create(d, rng, d_hidden=config.d_hidden, std=std, down_std=down_std)
            else:
                mlp = MlpBlock.create(
                    d, config.kind, rng, hyper=config.hyper, d_hidden=config.d_hidden, std=std, down_std=down_std,
                    alpha_p_init=config.alpha_p_init, alpha_n_init=config.alpha_n_init
                )
            blocks.append(ResidualBlock(norm=np.ones(d), mlp=mlp))
        w_out = None if config.tie_word_embeddings else rng.normal(0.0, std, size=(d, config.vocab_size))
        return cls(config, embedding, w_in, blocks, np.ones(d), w_out=w_out, debug=debug)

    def parameters(self) -> Dict[str, Tensor]:
        """ Every trainable array, by name. Arrays are shared with the model, updating them updates the model. """
        out = {"embedding": self.embedding, "w_in": self.w_in}
        for index, block in enumerate(self.blocks):
            out.update(block.parameters(f"layers.{index}."))
        out["final_norm"] = self.final_norm
        if self.w_out is not None:
            out["w_out"] = self.w_out
        return out

    def num_parameters(self) -> int:
        return sum(int(p.size) for p in self.parameters().values())

    def alphas(self) -> List[ConstrainedParams]:
        """ Constrained activation parameters of every layer, empty for kinds without trainables """
        return [
            block.mlp.params for block in self.blocks
            if isinstance(block.mlp, MlpBlock) and block.mlp.act_kind.trainable
        ]

    def betas(self) -> List[float]:
        """ Trained beta of every layer, empty when beta is fixed """
        return [p.beta for p in self.alphas() if p.beta is not None]

    @property
    def head(self) -> Tensor:
        return self.embedding.T if self.config.tie_word_embeddings else self.w_out

    def _guard(self, name: str, value: Tensor) -> Tensor:
        return check_finite(name, value) if self.debug else value


def _check_tokens(model: ToyLm, tokens: Tensor, targets: Tensor) -> Tuple[Tensor, Tensor]:
    tokens = np.asarray(tokens, dtype=int)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    targets = np.atleast_1d(np.asarray(targets, dtype=int))
    vocab = model.config.vocab_size
    for name, ids in (("tokens", tokens), ("targets", targets)):
        if ids.size and (ids.min() < 0 or ids.max() >= vocab):
            raise ValueError(f"Vocabulary overflow: {name} must lie in [0, {vocab}), got [{ids.min()}, {ids.max()}]")
    if tokens.shape[1] != model.config.context_length:
        raise ValueError(f"Expected windows of {model.config.context_length} tokens, got {tokens.shape[1]}")
    if tokens.shape[0] != targets.shape[0]:
        raise ValueError(f"{tokens.shape[0]} windows for {targets.shape[0]} targets")
    return tokens, targets


def toylm_fwd(model: ToyLm, tokens: Tensor, targets: Tensor) -> Tuple[float, ToyLmCache]:
    """ Mean next-token cross entropy of a batch of windows [batch x context_length] """
    tokens, targets = _check_tokens(model, tokens, targets)
    batch = tokens.shape[0]
    inputs = model.embedding[tokens].reshape(batch, -1)
    h = model._guard("w_in", linear_fwd(inputs, model.w_in))
    block_caches = []
    for index, block in enumerate(model.blocks):
        normed = rmsnorm_fwd(h, block.norm)
        if isinstance(block.mlp, GatedMlpBlock):
            out, cache = _swiglu_forward(block.mlp, normed)
        else:
            out, cache = _mlp_forward(block.mlp, normed)
        block_caches.append((h, normed, cache))
        h = model._guard(f"layers.{index}", h + out)
    final = rmsnorm_fwd(h, model.final_norm)
    logits = model._guard("logits", linear_fwd(final, model.head))
    loss, _ = cross_entropy(logits, targets)
    return loss, ToyLmCache(tokens, targets, inputs, block_caches, h, final)


def toylm_bwd(model: ToyLm, cache: ToyLmCache) -> Dict[str, Tensor]:
    """ Gradients of the mean loss for every entry of :meth:`ToyLm.parameters` """
    grads: Dict[str, Tensor] = {}
    logits = linear_fwd(cache.normed, model.head)
    _, dlogits = cross_entropy(logits, cache.targets)
    dfinal, dhead = linear_bwd(cache.normed, model.head, dlogits)
    dh, grads["final_norm"] = rmsnorm_bwd(cache.final, model.final_norm, dfinal)

    for index in range(len(model.blocks) - 1, -1, -1):
        block = model.blocks[index]
        h, normed, block_cache = cache.blocks[index]
        prefix = f"layers.{index}."
        if isinstance(block.mlp, GatedMlpBlock):
            gated = swiglu_bwd(block.mlp, normed, dh, block_cache)
            dnormed = gated.dx
            grads[prefix + "w_gate"], grads[prefix + "w_up"], grads[prefix + "w_down"] = (
                gated.dw_gate, gated.dw_up, gated.dw_down)
        else:
            mlp = mlp_bwd(block.mlp, normed, dh, block_cache)
            dnormed = mlp.dx
            grads[prefix + "w_up"], grads[prefix + "w_down"] = mlp.dw_up, mlp.dw_down
            if block.mlp.act_kind.trainable:
                grads[prefix + "act_raw"] = mlp.dact_raw
        dh_norm, grads[prefix + "norm"] = rmsnorm_bwd(h, block.norm, dnormed)
        dh = dh + dh_norm

    dinputs, grads["w_in"] = linear_bwd(cache.inputs, model.w_in, dh)
    dembedding = np.zeros_like(model.embedding)
    np.add.at(dembedding, cache.tokens, dinputs.reshape(cache.tokens.shape + (model.config.d_model,)))
    if model.config.tie_word_embeddings:
        dembedding += dhead.T
    else:
        grads["w_out"] = dhead
    grads["embedding"] = dembedding
    return {name: model._guard(f"d{name}", grads[name]) for name in model.parameters()}


def loss_and_grads(model: ToyLm, tokens: Tensor, targets: Tensor) -> Tuple[float, Dict[str, Tensor]]:
    loss, cache = toylm_fwd(model, tokens, targets)
    return loss, toylm_bwd(model, cache)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _meta(config: ModelConfig) -> List[Tuple[str, object]]:
    out = [(f.name, getattr(config, f.name)) for f in dataclasses.fields(config) if f.name != "hyper"]
    out.extend((f"hyper.{f.name}", getattr(config.hyper, f.name)) for f in dataclasses.fields(config.hyper))
    return out


def save_checkpoint(model: ToyLm, path: str) -> str:
    """ Versioned plain-text checkpoint: `meta` lines for the config, then one `tensor` header per parameter
    followed by its row-major values on a single line """
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}"]
    for key, value in _meta(model.config):
        lines.append(f"meta {key} {utils.format_value(value)}")
    for name, value in model.parameters().items():
        lines.append(f"tensor {name} {value.ndim} {' '.join(str(extent) for extent in value.shape)}".rstrip())
        lines.append(" ".join(utils.format_real(v) for v in value.ravel()))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    return path


def load_checkpoint(path: str) -> ToyLm:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0].split()[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not an actbench checkpoint")
    version = int(lines[0].split()[1])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"Unsupported checkpoint version {version}")

    config_values, hyper_values, tensors = {}, {}, {}
    config_types = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
    hyper_types = {f.name: f.type for f in dataclasses.fields(FixedHyper)}
    position = 1
    while position < len(lines):
        tokens = lines[position].split(" ")
        if tokens[0] == "meta":
            key, value = tokens[1], " ".join(tokens[2:])
            if key.startswith("hyper."):
                hyper_values[key[6:]] = utils.coerce_value(value, hyper_types[key[6:]])
            else:
                config_values[key] = utils.coerce_value(value, config_types[key])
            position += 1
        elif tokens[0] == "tensor":
            name, ndim = tokens[1], int(tokens[2])
            shape = tuple(int(extent) for extent in tokens[3:3 + ndim])
            values = np.array([float(v) for v in lines[position + 1].split()], dtype=float)
            tensors[name] = values.reshape(shape)
            position += 2
        else:
            raise ValueError(f"Unexpected line {position + 1} in {path}: `{lines[position]}`")

    config = ModelConfig(hyper=FixedHyper(**hyper_values), **config_values)
    model = ToyLm.create(config, seed=0)
    for name, target in model.parameters().items():
        if name not in tensors:
            raise ValueError(f"Checkpoint {path} misses tensor `{name}`")
        if tensors[name].shape != target.shape:
            raise ValueError(f"Tensor `{name}` has shape {tensors[name].shape}, expected {target.shape}")
        target[...] = tensors[name]
    return model
