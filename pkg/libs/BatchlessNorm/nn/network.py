"""Layer composition, the spiral MLP and CIFAR CNN architectures, dropout and the total loss."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Any, Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np

from BatchlessNorm.core import ops
from BatchlessNorm.core.tape import Tensor, parameter
from BatchlessNorm.nn.checkpoint import Checkpoint, LayerRecord
from BatchlessNorm.nn.optimizers import is_norm_param
from BatchlessNorm.nn.normalization import (
    BATCHLESS_MODES,
    NORM_KINDS,
    BatchNormState,
    NormLayerState,
    Phase,
    Sharing,
    SigmaMode,
    batchless_forward,
    batchnorm_forward,
    batchrenorm_forward,
)
from BatchlessNorm.utils.errors import ConfigError, ContractError, DimensionError, MalformedCheckpointError

LAYER_KINDS = ("dense", "conv", "norm", "activation", "dropout", "pool", "flatten", "softmax-output")
INIT_WIDTHS = ("full", "half")

NormState = Union[NormLayerState, BatchNormState]


@dataclass
class LayerSpec:
    """One entry of a declarative layer list."""

    kind: str
    name: str
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"Unknown layer kind '{self.kind}' for layer '{self.name}'.")

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, data: dict) -> "LayerSpec":
        return cls(kind=data["kind"], name=data["name"], params=dict(data.get("params", {})))


class ForwardResult(NamedTuple):
    logits: Tensor
    nll_losses: list[Tensor]
    gauged_metrics: dict[str, float]


class LossBreakdown(NamedTuple):
    total: Tensor
    task: float
    nll: float
    decay: float


def dropout_mask(shape: Sequence[int], rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout multipliers: 0 with probability ``rate``, else 1 / (1 - rate)."""
    return (rng.random(tuple(shape)) >= rate) / (1.0 - rate)


def dropout(
    x: Tensor,
    rate: float,
    phase: Union[Phase, str],
    rng: Optional[np.random.Generator],
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Inverted dropout: zero units with probability ``rate`` and rescale survivors in training.

    Args:
        x: Layer input.
        rate: Drop probability in [0, 1).
        phase: Eval phase returns ``x`` unchanged.
        rng: Generator the mask is drawn from when ``mask`` is not given.
        mask: Precomputed multipliers of the same shape as ``x``.

    Returns:
        Tensor: ``x`` times the mask.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"Dropout rate must lie in [0, 1), got {rate}.")
    if Phase(phase) is Phase.EVAL or rate == 0.0:
        return x
    if mask is None:
        if rng is None:
            raise ContractError("Training-phase dropout needs a random generator.")
        mask = dropout_mask(x.shape, rate, rng)
    elif mask.shape != x.shape:
        raise DimensionError(f"Dropout mask shape {mask.shape} does not match input {x.shape}.")
    return ops.mul(x, mask)


def total_loss(
    logits: Tensor,
    labels: np.ndarray,
    nll_losses: Sequence[Tensor],
    decay_terms: Sequence[tuple[Tensor, float]] = (),
) -> LossBreakdown:
    """Cross-entropy plus the per-layer NLL means plus decay * 1/2 ||W||^2.

    ``task`` is the cross-entropy alone, the value used for convergence detection.

    Args:
        logits: Pre-softmax outputs, N x classes.
        labels: Integer class labels of length N.
        nll_losses: Scaled NLL terms of the batchless layers.
        decay_terms: (weight, strength) pairs; zero strengths are skipped.

    Returns:
        LossBreakdown with the differentiable total and the float value of each part.
    """
    task = ops.softmax_cross_entropy(logits, labels)
    total = task
    nll_value = 0.0
    for nll in nll_losses:
        total = ops.add(total, nll)
        nll_value += nll.item()
    decay_value = 0.0
    for weight, strength in decay_terms:
        if strength == 0.0:
            continue
        term = ops.scale(ops.sum_all(ops.square(weight)), 0.5 * strength)
        total = ops.add(total, term)
        decay_value += term.item()
    return LossBreakdown(total, task.item(), nll_value, decay_value)


def _uniform_init(
    rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int, width: str
) -> np.ndarray:
    w = np.sqrt(2.0 / (fan_in + fan_out))
    bound = w / 2.0 if width == "full" else w
    return rng.uniform(-bound, bound, size=shape)


class Model:
    """Ordered layer specs plus the parameter store, norm states and decay map they build."""

    def __init__(
        self,
        specs: Sequence[LayerSpec],
        input_shape: Sequence[int],
        seed: int,
        *,
        architecture: str = "custom",
        norm_kind: str = "none",
        decay: Optional[dict[str, float]] = None,
        norm_slots: Optional[list[dict]] = None,
        init_width: str = "full",
        metadata: Optional[dict] = None,
    ) -> None:
        if init_width not in INIT_WIDTHS:
            raise ConfigError(f"init_width must be one of {INIT_WIDTHS}, got '{init_width}'.")
        self.specs = [copy.deepcopy(s) for s in specs]
        self.input_shape = tuple(int(d) for d in input_shape)
        self.seed = int(seed)
        self.architecture = architecture
        self.norm_kind = norm_kind
        self.decay = dict(decay or {})
        self.norm_slots = list(norm_slots or [])
        self.init_width = init_width
        self.metadata = dict(metadata or {})

        self.params: dict[str, np.ndarray] = {}
        self.norm_states: dict[str, NormState] = {}
        self.shapes: list[tuple[int, ...]] = []
        self._build()

        unknown = set(self.decay) - set(self.params)
        if unknown:
            raise ConfigError(f"Decay map names unknown parameters: {sorted(unknown)}.")

    # Construction ---------------------------------------------------------

    def _build(self) -> None:
        names = [s.name for s in self.specs]
        if len(set(names)) != len(names):
            raise ConfigError("Layer names must be unique.")
        rng = np.random.default_rng(self.seed)
        shape = self.input_shape
        for index, spec in enumerate(self.specs):
            self.shapes.append(shape)
            shape = self._build_layer(spec, shape, rng, last=index == len(self.specs) - 1)
        self.output_shape = shape

    def _build_layer(self, spec: LayerSpec, shape: tuple[int, ...], rng: np.random.Generator, last: bool):
        p = spec.params
        if spec.kind == "dense":
            if len(shape) != 1:
                raise DimensionError(f"Dense layer '{spec.name}' needs a flat input, got {shape}.")
            units = int(p["units"])
            self.params[f"{spec.name}.weight"] = _uniform_init(rng, (shape[0], units), shape[0], units, self.init_width)
            self.params[f"{spec.name}.bias"] = np.zeros(units)
            return (units,)

        if spec.kind == "conv":
            if len(shape) != 3:
                raise DimensionError(f"Conv layer '{spec.name}' needs a C x H x W input, got {shape}.")
            channels, k = int(p["channels"]), int(p["kernel"])
            if k % 2 == 0:
                raise DimensionError(f"Conv layer '{spec.name}' needs an odd kernel, got {k}.")
            fan_in, fan_out = shape[0] * k * k, channels * k * k
            self.params[f"{spec.name}.weight"] = _uniform_init(
                rng, (channels, shape[0], k, k), fan_in, fan_out, self.init_width
            )
            self.params[f"{spec.name}.bias"] = np.zeros(channels)
            return (channels, shape[1], shape[2])

        if spec.kind == "norm":
            self._build_norm(spec, shape)
            return shape

        if spec.kind == "activation":
            if p.get("function") not in ("isrlu", "leaky_relu"):
                raise ConfigError(f"Activation layer '{spec.name}' has unknown function {p.get('function')!r}.")
            return shape

        if spec.kind == "dropout":
            rate = float(p.get("rate", 0.0))
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"Dropout layer '{spec.name}' rate must lie in [0, 1), got {rate}.")
            return shape

        if spec.kind == "pool":
            if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
                raise DimensionError(f"Pool layer '{spec.name}' needs C x H x W with H, W >= 2, got {shape}.")
            return (shape[0], shape[1] // 2, shape[2] // 2)

        if spec.kind == "flatten":
            return (int(np.prod(shape)),)

        # softmax-output
        if not last or len(shape) != 1:
            raise DimensionError(f"Output layer '{spec.name}' must be last and receive flat logits.")
        return shape

    def _build_norm(self, spec: LayerSpec, shape: tuple[int, ...]) -> None:
        p = spec.params
        kind = p.get("norm_kind")
        if kind not in NORM_KINDS or kind == "none":
            raise ConfigError(f"Norm layer '{spec.name}' has invalid norm kind {kind!r}.")
        sharing = Sharing.PER_CHANNEL if len(shape) == 3 else Sharing.PER_FEATURE
        if "sharing" in p and Sharing(p["sharing"]) is not sharing:
            raise DimensionError(f"Norm layer '{spec.name}' sharing {p['sharing']} does not fit input {shape}.")
        p["sharing"] = sharing.value
        units = shape[0]

        if kind in BATCHLESS_MODES:
            mode = SigmaMode(p.get("sigma_mode", BATCHLESS_MODES[kind].value))
            p["sigma_mode"] = mode.value
            state = NormLayerState.default(
                spec.name,
                units,
                mode=mode,
                lam=float(p.get("lam", 0.1)),
                sharing=sharing,
                lambda_in_loss=bool(p.get("lambda_in_loss", True)),
            )
        else:
            state = BatchNormState.default(
                spec.name,
                units,
                sharing=sharing,
                renorm=kind == "brn",
                epsilon=float(p.get("epsilon", 1e-5)),
                momentum=float(p.get("momentum", 0.99)),
                r_max=float(p.get("r_max", 3.0)),
                d_max=float(p.get("d_max", 5.0)),
            )
        self.norm_states[spec.name] = state
        self.params.update(state.arrays())

    # Introspection ---------------------------------------------------------

    def num_parameters(self) -> int:
        return int(sum(a.size for a in self.params.values()))

    def layer_index(self, name: str) -> int:
        for index, spec in enumerate(self.specs):
            if spec.name == name:
                return index
        raise KeyError(name)

    def norm_layers(self, kinds: Optional[Sequence[str]] = None) -> list[tuple[int, LayerSpec]]:
        """(index, spec) of norm layers in topological order, optionally filtered by norm kind."""
        return [
            (i, s)
            for i, s in enumerate(self.specs)
            if s.kind == "norm" and (kinds is None or s.params["norm_kind"] in kinds)
        ]

    def batchless_states(self) -> list[NormLayerState]:
        return [s for s in self.norm_states.values() if isinstance(s, NormLayerState)]

    def batchnorm_states(self) -> list[BatchNormState]:
        return [s for s in self.norm_states.values() if isinstance(s, BatchNormState)]

    def decay_terms(self) -> list[tuple[Tensor, float]]:
        return [
            (parameter(self.params[name], name), strength)
            for name, strength in self.decay.items()
            if not is_norm_param(name)
        ]

    def lr_multipliers(self) -> dict[str, float]:
        """Per-parameter learning-rate multipliers for layers that apply lambda outside the loss."""
        multipliers = {}
        for state in self.batchless_states():
            if not state.lambda_in_loss:
                multipliers[f"{state.name}.mu"] = state.lam
                multipliers[f"{state.name}.sigma"] = state.lam
        return multipliers

    def check_norm_states(self) -> None:
        for state in self.batchless_states():
            state.check_sigma_floor()

    def set_lambda(self, lam: float) -> None:
        for state in self.batchless_states():
            state.lam = float(lam)

    # Checkpoints -----------------------------------------------------------

    def _array_slots(self, spec: LayerSpec) -> dict[str, np.ndarray]:
        """Arrays a checkpoint must carry for one layer, keyed by their short name."""
        if spec.kind in ("dense", "conv"):
            return {"weight": self.params[f"{spec.name}.weight"], "bias": self.params[f"{spec.name}.bias"]}
        if spec.kind != "norm":
            return {}
        state = self.norm_states[spec.name]
        if isinstance(state, NormLayerState):
            return {"mu": state.mu, "sigma": state.sigma_param, "gamma": state.gamma, "beta": state.beta}
        return {
            "gamma": state.gamma,
            "beta": state.beta,
            "moving_mu": state.moving_mu,
            "moving_var": state.moving_var,
        }

    def to_checkpoint(self) -> Checkpoint:
        layers = []
        for spec in self.specs:
            arrays = {key: array.copy() for key, array in self._array_slots(spec).items()}
            state = self.norm_states.get(spec.name)
            if isinstance(state, BatchNormState) and state.finalized:
                arrays["population_mu"] = state.population_mu.copy()
                arrays["population_var"] = state.population_var.copy()
            layers.append(LayerRecord(spec.name, spec.kind, copy.deepcopy(spec.params), arrays))
        return Checkpoint(
            architecture=self.architecture,
            norm_kind=self.norm_kind,
            seed=self.seed,
            input_shape=self.input_shape,
            layers=layers,
            decay=dict(self.decay),
            norm_slots=copy.deepcopy(self.norm_slots),
            init_width=self.init_width,
            metadata=copy.deepcopy(self.metadata),
        )

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint) -> "Model":
        """Rebuild the model and overwrite every array with the checkpoint's values."""
        try:
            specs = [LayerSpec(r.kind, r.name, copy.deepcopy(r.params)) for r in checkpoint.layers]
            model = cls(
                specs,
                checkpoint.input_shape,
                checkpoint.seed,
                architecture=checkpoint.architecture,
                norm_kind=checkpoint.norm_kind,
                decay=checkpoint.decay,
                norm_slots=checkpoint.norm_slots,
                init_width=checkpoint.init_width,
                metadata=checkpoint.metadata,
            )
        except (ConfigError, DimensionError, KeyError) as exc:
            raise MalformedCheckpointError(f"Checkpoint layers do not describe a valid model: {exc}") from exc

        for spec, record in zip(model.specs, checkpoint.layers):
            for key, target in model._array_slots(spec).items():
                if key not in record.arrays:
                    raise MalformedCheckpointError(f"Layer '{spec.name}' is missing array '{key}'.")
                source = record.arrays[key]
                if source.shape != target.shape:
                    raise MalformedCheckpointError(
                        f"Array '{spec.name}.{key}' has shape {source.shape}, expected {target.shape}."
                    )
                target[...] = source
            state = model.norm_states.get(spec.name)
            if isinstance(state, BatchNormState) and "population_mu" in record.arrays:
                state.population_mu = record.arrays["population_mu"].copy()
                state.population_var = record.arrays["population_var"].copy()
        return model

    # Forward ---------------------------------------------------------------

    def forward(
        self,
        inputs: np.ndarray,
        phase: Union[Phase, str] = Phase.EVAL,
        rng: Optional[np.random.Generator] = None,
        masks: Optional[Mapping[str, np.ndarray]] = None,
    ) -> ForwardResult:
        """Run every layer on ``inputs``.

        Args:
            inputs: Batch of shape ``(N, *input_shape)``.
            phase: ``train`` applies dropout and batch statistics; ``eval`` does not.
            rng: Dropout generator, needed in the training phase unless ``masks`` covers
                every dropout layer.
            masks: Dropout multipliers per layer name, as from :meth:`dropout_masks`.

        Returns:
            ForwardResult: Logits, the NLL loss of each batchless layer and its gauged metric.
        """
        x, nll_losses, metrics = self._run(inputs, Phase(phase), rng, len(self.specs), masks=masks)
        return ForwardResult(x, nll_losses, metrics)

    def dropout_masks(self, batch_size: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        """Draw a training-phase mask for every active dropout layer, in layer order.

        The draws consume ``rng`` exactly as a full-batch training forward does, so row
        ``i`` of each mask is what instance ``i`` receives in that pass.
        """
        masks = {}
        for index, spec in enumerate(self.specs):
            rate = float(spec.params.get("rate", 0.0))
            if spec.kind == "dropout" and rate > 0.0:
                masks[spec.name] = dropout_mask((batch_size, *self.shapes[index]), rate, rng)
        return masks

    def layer_input(self, index: int, inputs: np.ndarray) -> np.ndarray:
        """Eval-phase input of layer ``index`` for ``inputs``."""
        x, _, _ = self._run(inputs, Phase.EVAL, None, index)
        return x.data

    def layer_inputs(self, indices: Sequence[int], inputs: np.ndarray) -> dict[int, np.ndarray]:
        """Eval-phase inputs of several layers, captured in a single forward pass."""
        captured: dict[int, np.ndarray] = {index: None for index in indices}
        self._run(inputs, Phase.EVAL, None, max(indices, default=0), captured)
        return captured

    def predict_proba(self, inputs: np.ndarray, chunk: int = 1000) -> np.ndarray:
        """Eval-phase output distributions, computed in chunks."""
        outputs = []
        for start in range(0, len(inputs), chunk):
            logits = self.forward(inputs[start : start + chunk], Phase.EVAL).logits
            outputs.append(ops.softmax(logits).data)
        return np.concatenate(outputs, axis=0)

    def _run(self, inputs, phase: Phase, rng, until: int, capture: Optional[dict] = None, masks=None):
        inputs = np.asarray(inputs, dtype=np.float64)
        if inputs.shape[1:] != self.input_shape:
            raise DimensionError(f"Batch shape {inputs.shape[1:]} does not match model input {self.input_shape}.")
        x = Tensor(inputs)
        nll_losses: list[Tensor] = []
        metrics: dict[str, float] = {}
        for index, spec in enumerate(self.specs[:until]):
            if capture is not None and index in capture:
                capture[index] = x.data
            x = self._apply(spec, x, phase, rng, nll_losses, metrics, masks)
        if capture is not None and until in capture:
            capture[until] = x.data
        return x, nll_losses, metrics

    def _apply(self, spec: LayerSpec, x: Tensor, phase: Phase, rng, nll_losses, metrics, masks=None) -> Tensor:
        p = spec.params
        if spec.kind == "dense":
            weight = parameter(self.params[f"{spec.name}.weight"], f"{spec.name}.weight")
            bias = parameter(self.params[f"{spec.name}.bias"], f"{spec.name}.bias")
            return ops.add(ops.matmul(x, weight), bias)
        if spec.kind == "conv":
            kernel = parameter(self.params[f"{spec.name}.weight"], f"{spec.name}.weight")
            bias = parameter(self.params[f"{spec.name}.bias"], f"{spec.name}.bias")
            return ops.add(ops.conv2d(x, kernel), ops.reshape(bias, (1, -1, 1, 1)))
        if spec.kind == "norm":
            state = self.norm_states[spec.name]
            if isinstance(state, NormLayerState):
                result = batchless_forward(x, state)
                nll_losses.append(result.nll_loss)
                metrics[spec.name] = result.gauged_metric
                return result.a_out
            if state.renorm:
                return batchrenorm_forward(x, state, phase)
            return batchnorm_forward(x, state, phase)
        if spec.kind == "activation":
            if p["function"] == "isrlu":
                return ops.isrlu(x, float(p.get("alpha", 4.0)))
            return ops.leaky_relu(x, float(p.get("slope", 0.3)))
        if spec.kind == "dropout":
            mask = masks.get(spec.name) if masks is not None else None
            return dropout(x, float(p.get("rate", 0.0)), phase, rng, mask)
        if spec.kind == "pool":
            return ops.maxpool2d(x)
        if spec.kind == "flatten":
            return ops.reshape(x, (x.shape[0], -1))
        return x


def forward(
    model: Model,
    inputs: np.ndarray,
    phase: Union[Phase, str] = Phase.EVAL,
    rng: Optional[np.random.Generator] = None,
) -> ForwardResult:
    return model.forward(inputs, phase, rng)


def _norm_spec(name: str, norm_kind: str, lam: float, lambda_in_loss: bool) -> LayerSpec:
    params: dict[str, Any] = {"norm_kind": norm_kind}
    if norm_kind in BATCHLESS_MODES:
        params.update(lam=lam, lambda_in_loss=lambda_in_loss)
    return LayerSpec("norm", name, params)


def _check_norm_kind(norm_kind: str, allowed: Sequence[str]) -> None:
    if norm_kind not in allowed:
        raise ConfigError(f"Norm kind '{norm_kind}' is not one of {tuple(allowed)}.")


def build_spiral_mlp(
    norm_kind: str,
    seed: int,
    *,
    lam: float = 0.1,
    lambda_in_loss: bool = True,
    dropout_rate: float = 0.1,
    weight_decay: float = 1e-6,
    init_width: str = "full",
) -> Model:
    """dense 50 -> [norm] -> ISRLU -> dropout, twice {dense 40 -> [norm] -> ISRLU -> dropout}, dense 3, softmax.

    Args:
        norm_kind: One of NORM_KINDS; "none" leaves the norm positions out.
        seed: Seed of the weight initialization.
        lam: Lambda of batchless layers.
        lambda_in_loss: Scale the NLL by lambda, or use lambda as a learning-rate multiplier.
        dropout_rate: Rate of every dropout layer.
        weight_decay: L2 strength on the dense weights.
        init_width: "full" or "half" uniform initialization range.

    Returns:
        A freshly initialized Model for 2-d inputs and 3 classes.
    """
    _check_norm_kind(norm_kind, NORM_KINDS)
    specs: list[LayerSpec] = []
    slots = []
    for i, units in enumerate((50, 40, 40)):
        specs.append(LayerSpec("dense", f"dense{i}", {"units": units}))
        if norm_kind != "none":
            specs.append(_norm_spec(f"norm{i}", norm_kind, lam, lambda_in_loss))
        slots.append({"before": f"act{i}", "sharing": Sharing.PER_FEATURE.value})
        specs.append(LayerSpec("activation", f"act{i}", {"function": "isrlu", "alpha": 4.0}))
        specs.append(LayerSpec("dropout", f"drop{i}", {"rate": dropout_rate}))
    specs.append(LayerSpec("dense", "dense3", {"units": 3}))
    specs.append(LayerSpec("softmax-output", "output"))

    decay = {f"dense{i}.weight": weight_decay for i in range(4)} if weight_decay else {}
    return Model(
        specs,
        (2,),
        seed,
        architecture="spiral_mlp",
        norm_kind=norm_kind,
        decay=decay,
        norm_slots=slots,
        init_width=init_width,
        metadata={"dropout_rate": dropout_rate, "dense_biases": True},
    )


def build_cifar_cnn(
    norm_kind: str,
    seed: int,
    *,
    lam: float = 0.1,
    lambda_in_loss: bool = True,
    dropout_rate: float = 0.25,
    weight_decay: float = 0.0,
    init_width: str = "full",
) -> Model:
    """[norm] -> three {conv, leaky ReLU, [norm], dropout, 2x2 pool} -> flatten -> dense 50, 50, 10.

    Takes the same arguments as build_spiral_mlp, except that "brn" is rejected. The
    leading norm layer normalizes the raw image channels.
    """
    _check_norm_kind(norm_kind, ("none", "bn", "bin", "binlog", "bininv"))
    specs: list[LayerSpec] = []
    slots = [{"before": "conv0", "sharing": Sharing.PER_CHANNEL.value}]
    if norm_kind != "none":
        specs.append(_norm_spec("norm_in", norm_kind, lam, lambda_in_loss))
    for i, kernel in enumerate((7, 5, 3)):
        specs.append(LayerSpec("conv", f"conv{i}", {"channels": 64, "kernel": kernel}))
        specs.append(LayerSpec("activation", f"act{i}", {"function": "leaky_relu", "slope": 0.3}))
        if norm_kind != "none":
            specs.append(_norm_spec(f"norm{i}", norm_kind, lam, lambda_in_loss))
        slots.append({"before": f"drop{i}", "sharing": Sharing.PER_CHANNEL.value})
        specs.append(LayerSpec("dropout", f"drop{i}", {"rate": dropout_rate}))
        specs.append(LayerSpec("pool", f"pool{i}"))
    specs.append(LayerSpec("flatten", "flatten"))
    for i in range(2):
        j = i + 3
        specs.append(LayerSpec("dense", f"dense{i}", {"units": 50}))
        specs.append(LayerSpec("activation", f"act{j}", {"function": "leaky_relu", "slope": 0.3}))
        if norm_kind != "none":
            specs.append(_norm_spec(f"norm{j}", norm_kind, lam, lambda_in_loss))
        slots.append({"before": f"drop{j}", "sharing": Sharing.PER_FEATURE.value})
        specs.append(LayerSpec("dropout", f"drop{j}", {"rate": dropout_rate}))
    specs.append(LayerSpec("dense", "dense2", {"units": 10}))
    specs.append(LayerSpec("softmax-output", "output"))

    weights = [f"conv{i}.weight" for i in range(3)] + [f"dense{i}.weight" for i in range(3)]
    decay = {name: weight_decay for name in weights} if weight_decay else {}
    return Model(
        specs,
        (3, 32, 32),
        seed,
        architecture="cifar_cnn",
        norm_kind=norm_kind,
        decay=decay,
        norm_slots=slots,
        init_width=init_width,
        metadata={"dropout_rate": dropout_rate},
    )
