""" Desk-scale training of the toy language model

The loop is sequential and bit-reproducible for a given (seed, config): the model and the data stream each get a
child seed of the root one, and batches are drawn in a fixed order even when they are prepared ahead of time on a
worker thread.
"""
# Std lib
import csv
import dataclasses
import enum
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, TextIO, Tuple
# Non std lib
import numpy as np
import tqdm
import yaml
# Local
from actbench import tensor
from actbench.activations import FixedHyper
from actbench.tensor import ModelConfig, Tensor, ToyLm
from actbench.utils import coerce_value, format_real, format_value


BUNDLED_CORPUS = os.path.join(os.path.dirname(__file__), "data", "corpus.txt")
VOCABULARIES = ("char", "byte")
REQUIRED_KEYS = ("seed", "steps", "activation")
SMOOTHING_WINDOW = 50


class ConfigError(ValueError):
    """ Missing, unknown or invalid training configuration keys """


class NonFiniteGradientError(FloatingPointError):
    """ A gradient holds NaN or inf, the optimizer refuses to step """


# ---------------------------------------------------------------------------
# Learning rate
# ---------------------------------------------------------------------------


class ScheduleVariant(enum.Enum):
    Wsd = "wsd"  # warmup, constant, 1-sqrt cooldown
    Cosine = "cosine"

    @classmethod
    def from_name(cls, name: str) -> "ScheduleVariant":
        key = name.strip().lower()
        for variant in cls:
            if variant.value == key:
                return variant
        raise ValueError(f"Unknown cooldown style `{name}`, expected wsd or cosine")


@dataclass(frozen=True)
class LrSchedule:
    variant: ScheduleVariant = ScheduleVariant.Wsd
    max_lr: float = 2e-3
    min_lr: float = 2e-4
    warmup_steps: int = 100
    constant_steps: int = 1500
    cooldown_steps: int = 400

    def __post_init__(self):
        if min(self.warmup_steps, self.constant_steps, self.cooldown_steps) < 0:
            raise ValueError(f"Schedule step counts must be non negative, got {self}")
        if not self.max_lr >= self.min_lr >= 0:
            raise ValueError(f"Expected max_lr >= min_lr >= 0, got {self.max_lr} and {self.min_lr}")

    @property
    def total_steps(self) -> int:
        return self.warmup_steps + self.constant_steps + self.cooldown_steps


def lr_at(s: LrSchedule, step: int) -> float:
    """ Learning rate at `step`, steps past the end keep the final value

    >>> schedule = LrSchedule(max_lr=1.0, min_lr=0.0, warmup_steps=10, constant_steps=10, cooldown_steps=20)
    >>> lr_at(schedule, 0), lr_at(schedule, 10), lr_at(schedule, 25), lr_at(schedule, 1000)
    (0.0, 1.0, 0.5, 0.0)
    """
    if step < 0:
        raise ValueError(f"Steps start at 0, got {step}")
    if step < s.warmup_steps:
        return s.max_lr * step / s.warmup_steps
    step -= s.warmup_steps
    if step < s.constant_steps or s.cooldown_steps == 0:
        return s.max_lr
    tau = min((step - s.constant_steps) / s.cooldown_steps, 1.0)
    if s.variant is ScheduleVariant.Cosine:
        return s.min_lr + 0.5 * (s.max_lr - s.min_lr) * (1.0 + math.cos(math.pi * tau))
    root = math.sqrt(tau)
    return s.max_lr * (1.0 - root) + s.min_lr * root


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamWHyper:
    beta1: float = 0.9
    beta2: float = 0.95
    epsilon: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float = 1.0


@dataclass
class AdamWState:
    """ First and second moments by parameter name """
    m: Dict[str, Tensor]
    v: Dict[str, Tensor]
    step: int = 0

    @classmethod
    def zeros(cls, params: Dict[str, Tensor]) -> "AdamWState":
        return cls(
            m={name: np.zeros_like(value) for name, value in params.items()},
            v={name: np.zeros_like(value) for name, value in params.items()},
        )


def decays(value: Tensor) -> bool:
    """ Weight decay only applies to matrices, activation parameters and norm gains are left alone """
    return value.ndim >= 2


def global_norm(grads: Dict[str, Tensor]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: Dict[str, Tensor], max_norm: float) -> Tuple[Dict[str, Tensor], float]:
    """ Rescale `grads` so that their global norm does not exceed `max_norm`, returns the norm before clipping

    >>> clipped, norm = clip_gradients({"w": np.array([2.0, 0.0])}, 1.0)
    >>> clipped["w"].tolist(), norm
    ([1.0, 0.0], 2.0)
    """
    norm = global_norm(grads)
    if max_norm <= 0 or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm


def adamw_step(params: Dict[str, Tensor], grads: Dict[str, Tensor], state: AdamWState, lr: float,
               hyper: AdamWHyper) -> Tuple[Dict[str, Tensor], AdamWState]:
    """ Decoupled AdamW update, applied in place after global-norm clipping """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(
                f"Non finite gradient for `{name}` at optimizer step {state.step + 1}, aborting")
    if set(grads) != set(params):
        raise ValueError(f"Gradients do not match parameters: {sorted(set(grads) ^ set(params))}")
    grads, _ = clip_gradients(grads, hyper.grad_clip)
    state.step += 1
    correction1 = 1.0 - hyper.beta1 ** state.step
    correction2 = 1.0 - hyper.beta2 ** state.step
    for name, value in params.items():
        g = grads[name]
        if g.shape != value.shape:
            raise ValueError(f"Gradient of `{name}` has shape {g.shape}, expected {value.shape}")
        m, v = state.m[name], state.v[name]
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * g * g
        update = (m / correction1) / (np.sqrt(v / correction2) + hyper.epsilon)
        if decays(value):
            update = update + hyper.weight_decay * value
        value -= lr * update
    return params, state


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """ Flat training configuration, defaults are the desk config """
    seed: int = 0
    steps: int = 2000
    log_every: int = 50
    batch_size: int = 64
    context_length: int = 8
    d_model: int = 64
    n_layers: int = 4
    mlp_ratio: int = 0
    activation: str = "xielu"
    alpha_p_init: float = 0.8
    alpha_n_init: float = 0.8
    beta: float = 0.5
    beta_n: Optional[float] = None
    eps: float = -1e-6
    expm1_clamp: bool = False
    positive_component: str = "quadratic"
    negative_component: str = "exp"
    trainable_beta: bool = False
    max_lr: float = 2e-3
    min_lr: float = 2e-4
    warmup_steps: int = 100
    constant_steps: int = 1500
    cooldown_steps: int = 400
    cooldown_style: str = "wsd"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_epsilon: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    tie_word_embeddings: bool = True
    init_std: float = 0.02
    vocab: str = "char"
    corpus: str = ""
    prefetch: bool = True

    def __post_init__(self):
        if self.steps < 1 or self.log_every < 1 or self.batch_size < 1:
            raise ConfigError("steps, log_every and batch_size must be positive")
        if self.vocab not in VOCABULARIES:
            raise ConfigError(f"Unknown vocab `{self.vocab}`, expected one of {', '.join(VOCABULARIES)}")
        try:
            ScheduleVariant.from_name(self.cooldown_style)
            self.hyper()
            self.schedule()
            self.model_config(1)
        except ValueError as error:
            raise ConfigError(str(error)) from error

    def hyper(self) -> FixedHyper:
        return FixedHyper(
            beta=self.beta, eps=self.eps, beta_n=self.beta_n, clamp=self.expm1_clamp,
            positive_component=self.positive_component, negative_component=self.negative_component,
            trainable_beta=self.trainable_beta
        )

    def schedule(self) -> LrSchedule:
        return LrSchedule(
            variant=ScheduleVariant.from_name(self.cooldown_style), max_lr=self.max_lr, min_lr=self.min_lr,
            warmup_steps=self.warmup_steps, constant_steps=self.constant_steps, cooldown_steps=self.cooldown_steps
        )

    def adamw_hyper(self) -> AdamWHyper:
        return AdamWHyper(
            beta1=self.adam_beta1, beta2=self.adam_beta2, epsilon=self.adam_epsilon,
            weight_decay=self.weight_decay, grad_clip=self.grad_clip
        )

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size, d_model=self.d_model, n_layers=self.n_layers,
            context_length=self.context_length, activation=self.activation, mlp_ratio=self.mlp_ratio,
            tie_word_embeddings=self.tie_word_embeddings, init_std=self.init_std,
            alpha_p_init=self.alpha_p_init, alpha_n_init=self.alpha_n_init, hyper=self.hyper()
        )


def config_from_mapping(values: Dict[str, object]) -> TrainConfig:
    """ Build a config from raw values, every problem with the keys is reported at once

    >>> config_from_mapping({"seed": "1", "steps": "10", "activation": "relu2"}).steps
    10
    >>> config_from_mapping({"steps": "10", "colour": "red"})
    Traceback (most recent call last):
    actbench.trainer.ConfigError: Missing keys: seed, activation; unknown keys: colour
    """
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    missing = [key for key in REQUIRED_KEYS if key not in values]
    unknown = [key for key in values if key not in types]
    problems = []
    if missing:
        problems.append(f"Missing keys: {', '.join(missing)}")
    if unknown:
        problems.append(f"unknown keys: {', '.join(unknown)}" if missing else f"Unknown keys: {', '.join(unknown)}")
    if problems:
        raise ConfigError("; ".join(problems))
    coerced = {}
    for key, value in values.items():
        try:
            coerced[key] = coerce_value(value, types[key])
        except (TypeError, ValueError) as error:
            raise ConfigError(f"Invalid value for `{key}`: {error}") from error
    return TrainConfig(**coerced)


def parse_config(text: str) -> TrainConfig:
    """ Parse `key=value` lines, `#` starts a comment """
    values = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"Line {number}: expected `key=value`, got `{line}`")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return config_from_mapping(values)


def load_config(path: str) -> TrainConfig:
    """ Read a key=value file, or a flat YAML mapping when the file ends in .yml or .yaml """
    with open(path) as f:
        text = f.read()
    if path.endswith((".yml", ".yaml")):
        values = yaml.safe_load(text) or {}
        if not isinstance(values, dict):
            raise ConfigError(f"{path} must hold a flat mapping")
        return config_from_mapping(values)
    return parse_config(text)


def dump_config(config: TrainConfig) -> str:
    return "".join(f"{f.name}={format_value(getattr(config, f.name))}\n" for f in dataclasses.fields(config))


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Corpus:
    """ Token ids of a text with their vocabulary (characters, or the 256 byte values) """
    tokens: np.ndarray
    vocabulary: Tuple[str, ...]
    kind: str = "char"

    @classmethod
    def from_text(cls, text: str, vocab: str = "char") -> "Corpus":
        """
        >>> corpus = Corpus.from_text("abba")
        >>> corpus.tokens.tolist(), corpus.vocab_size
        ([0, 1, 1, 0], 2)
        """
        if vocab == "byte":
            tokens = np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)
            return cls(tokens=tokens, vocabulary=tuple(chr(i) for i in range(256)), kind="byte")
        if vocab != "char":
            raise ValueError(f"Unknown vocab `{vocab}`")
        vocabulary = tuple(sorted(set(text)))
        index = {char: position for position, char in enumerate(vocabulary)}
        return cls(tokens=np.array([index[char] for char in text], dtype=np.int64), vocabulary=vocabulary)

    @property
    def vocab_size(self) -> int:
        return len(self.vocabulary)

    def decode(self, ids) -> str:
        if self.kind == "byte":
            return bytes(int(i) for i in ids).decode("utf-8", errors="replace")
        return "".join(self.vocabulary[int(i)] for i in ids)


def load_corpus(path: Optional[str] = None, vocab: str = "char") -> Corpus:
    with open(path or BUNDLED_CORPUS, encoding="utf-8") as f:
        return Corpus.from_text(f.read(), vocab)


def sample_batch(tokens: np.ndarray, rng: np.random.Generator, batch_size: int, context_length: int
                 ) -> Tuple[np.ndarray, np.ndarray]:
    """ `batch_size` random windows of `context_length` tokens and the token following each """
    windows = len(tokens) - context_length
    if windows < batch_size:
        raise ValueError(
            f"Corpus of {len(tokens)} tokens is smaller than one batch "
            f"({batch_size} windows of {context_length} + 1 tokens)")
    starts = rng.integers(0, windows, size=batch_size)
    return tokens[starts[:, None] + np.arange(context_length)], tokens[starts + context_length]


def batches(tokens: np.ndarray, rng: np.random.Generator, batch_size: int, context_length: int, steps: int,
            prefetch: bool = True) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """ Yield `steps` batches. With `prefetch`, the next batch is drawn on a single worker thread while the current
    one is consumed; the generator is only ever used by one draw at a time so the order stays seed-fixed. """
    if not prefetch:
        for _ in range(steps):
            yield sample_batch(tokens, rng, batch_size, context_length)
        return
    with ThreadPoolExecutor(max_workers=1) as executor:
        pending = executor.submit(sample_batch, tokens, rng, batch_size, context_length)
        for step in range(steps):
            batch = pending.result()
            if step + 1 < steps:
                pending = executor.submit(sample_batch, tokens, rng, batch_size, context_length)
            yield batch


# ---------------------------------------------------------------------------
# Run log
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunRow:
    step: int
    lr: float
    loss: float
    alpha_p: Tuple[float, ...] = ()
    alpha_n: Tuple[float, ...] = ()
    beta: Tuple[float, ...] = ()


@dataclass
class RunLog:
    """ Logged rows plus every step's loss (the latter is not part of the CSV). Trained betas get their own
    columns after the alphas. """
    n_layers: int = 0
    trainable_beta: bool = False
    rows: List[RunRow] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)

    def record(self, row: RunRow) -> None:
        if self.rows and row.step <= self.rows[-1].step:
            raise ValueError(f"Steps must be strictly increasing, got {row.step} after {self.rows[-1].step}")
        if len(row.alpha_p) != self.n_layers or len(row.alpha_n) != self.n_layers:
            raise ValueError(f"Expected {self.n_layers} alpha values per side")
        if len(row.beta) != (self.n_layers if self.trainable_beta else 0):
            raise ValueError(f"Expected {self.n_layers if self.trainable_beta else 0} beta values")
        self.rows.append(row)

    @property
    def header(self) -> List[str]:
        return ["step", "lr", "loss"] + [f"alpha_p_{i}" for i in range(self.n_layers)] + \
               [f"alpha_n_{i}" for i in range(self.n_layers)] + \
               [f"beta_{i}" for i in range(self.n_layers if self.trainable_beta else 0)]

    def smoothed_loss(self, window: int = SMOOTHING_WINDOW) -> np.ndarray:
        """ Trailing mean of the per-step losses over `window` steps (fewer at the start)

        >>> RunLog(losses=[4.0, 2.0, 0.0]).smoothed_loss(2).tolist()
        [4.0, 3.0, 1.0]
        """
        losses = np.asarray(self.losses if self.losses else [row.loss for row in self.rows], dtype=float)
        cumulative = np.concatenate([[0.0], np.cumsum(losses)])
        ends = np.arange(1, len(losses) + 1)
        starts = np.maximum(ends - window, 0)
        return (cumulative[ends] - cumulative[starts]) / (ends - starts)

    def write_csv(self, handle: TextIO) -> None:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(self.header)
        for row in self.rows:
            writer.writerow(
                [str(row.step), format_real(row.lr), format_real(row.loss)] +
                [format_real(a) for a in row.alpha_p] + [format_real(a) for a in row.alpha_n] +
                [format_real(b) for b in row.beta]
            )

    @classmethod
    def read_csv(cls, handle: TextIO) -> "RunLog":
        reader = csv.reader(handle)
        header = next(reader, None)
        if not header or header[:3] != ["step", "lr", "loss"]:
            raise ValueError("Not a run log: expected a `step,lr,loss,...` header")
        n_layers = sum(1 for name in header if name.startswith("alpha_p_"))
        trainable_beta = any(name.startswith("beta_") for name in header)
        log = cls(n_layers=n_layers, trainable_beta=trainable_beta)
        for values in reader:
            if not values:
                continue
            reals = [float(v) for v in values[1:]]
            log.record(RunRow(
                step=int(values[0]), lr=reals[0], loss=reals[1],
                alpha_p=tuple(reals[2:2 + n_layers]), alpha_n=tuple(reals[2 + n_layers:2 + 2 * n_layers]),
                beta=tuple(reals[2 + 2 * n_layers:])
            ))
        return log


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------


def run_seeds(seed: int) -> Tuple[int, int]:
    """ (model seed, data seed) derived from the root seed """
    model_seq, data_seq = np.random.SeedSequence(seed).spawn(2)
    return int(model_seq.generate_state(1)[0]), int(data_seq.generate_state(1)[0])


def build_model(config: TrainConfig, corpus: Corpus) -> ToyLm:
    return ToyLm.create(config.model_config(corpus.vocab_size), seed=run_seeds(config.seed)[0])


def _alpha_row(model: ToyLm) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
    alphas = model.alphas()
    return tuple(p.alpha_p for p in alphas), tuple(p.alpha_n for p in alphas)


def train(config: TrainConfig, model: Optional[ToyLm] = None, corpus: Optional[Corpus] = None,
          out_dir: Optional[str] = None, progress: bool = True) -> RunLog:
    """ Train `model` (built from `config` when not given) for `config.steps` steps

    :param out_dir: When set, receives `runlog.csv`, `checkpoint.txt` and the resolved `config.cfg`
    :returns: The run log, rows every `log_every` steps plus the last step, alphas logged before the update
    """
    corpus = corpus or load_corpus(config.corpus or None, config.vocab)
    model = model or build_model(config, corpus)
    if model.config.vocab_size < corpus.vocab_size:
        raise ValueError(f"Model vocabulary ({model.config.vocab_size}) is smaller than the corpus one "
                         f"({corpus.vocab_size})")
    if len(corpus.tokens) - model.config.context_length < config.batch_size:
        raise ValueError(
            f"Corpus of {len(corpus.tokens)} tokens is smaller than one batch "
            f"({config.batch_size} windows of {model.config.context_length} + 1 tokens)")

    schedule, hyper = config.schedule(), config.adamw_hyper()
    params = model.parameters()
    state = AdamWState.zeros(params)
    log = RunLog(n_layers=len(model.alphas()), trainable_beta=bool(model.betas()))
    data = batches(
        corpus.tokens, np.random.default_rng(run_seeds(config.seed)[1]), config.batch_size,
        model.config.context_length, config.steps, prefetch=config.prefetch
    )

    bar = tqdm.tqdm(data, total=config.steps, desc=f"[Subtask] Training {model.config.activation}",
                    disable=not progress)
    for step, (windows, targets) in enumerate(bar):
        loss, grads = tensor.loss_and_grads(model, windows, targets)
        lr = lr_at(schedule, step)
        log.losses.append(loss)
        if step % config.log_every == 0 or step == config.steps - 1:
            alpha_p, alpha_n = _alpha_row(model)
            log.record(RunRow(step=step, lr=lr, loss=loss, alpha_p=alpha_p, alpha_n=alpha_n,
                              beta=tuple(model.betas())))
            bar.set_postfix(loss=f"{loss:.4f}")
        adamw_step(params, grads, state, lr, hyper)

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "runlog.csv"), "w") as f:
            log.write_csv(f)
        with open(os.path.join(out_dir, "config.cfg"), "w") as f:
            f.write(dump_config(config))
        tensor.save_checkpoint(model, os.path.join(out_dir, "checkpoint.txt"))
    return log
