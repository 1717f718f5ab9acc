"""MLP measurement estimator plus detection and mitigation rules.

The estimator maps the previous control step's clean measurement vector and
the trusted substation head flows to an estimate of the current measurement
vector. Detection flags a DoS source when its RTU utilization exceeds 60%
and an FDI quantity when the received value deviates from the estimate by
more than 10% relative; mitigation substitutes the estimate for flagged or
missing quantities so the controller always sees a complete vector.

The network is a plain feedforward MLP (tanh hidden layers, linear output)
trained by full-batch gradient descent on normalized features. Everything
is deterministic under a fixed seed and serializes to byte-stable JSON.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

from .cybernet import MeasurementPacket
from .grid_model import NetworkModel, Phase, PHASES

FDI_THRESHOLD = 0.10
DOS_THRESHOLD = 0.60
DEVIATION_FLOOR = 0.01    # pu, keeps near-zero estimates from self-flagging
DIVERGENCE_LIMIT = 1e6
DEFAULT_EPOCHS = 5000
DEFAULT_STEP_SIZE = 1e-2
DEFAULT_NOISE_SIGMA = 0.05
DEFAULT_FACTORS = tuple(round(0.5 + 0.1 * i, 1) for i in range(11))
DETECTIONS_HEADER = (
    "time",
    "kind",
    "bus",
    "phase",
    "quantity",
    "received",
    "estimate",
    "action",
)

QUANTITIES = ("p", "q")


class TrainingError(RuntimeError):
    """Training failed (divergence or malformed inputs)."""


class DivergenceError(TrainingError):
    """Loss exceeded the divergence limit; carries the partial loss curve."""

    def __init__(self, epoch: int, curve: list[float]):
        super().__init__(f"training diverged at epoch {epoch}: loss {curve[-1]!r}")
        self.epoch = epoch
        self.curve = curve


class MeasurementLayout:
    """Fixed ordering of the telemetry vector for one network model.

    Slots are (bus, phase) pairs over every non-substation bus in document
    order, phases ascending; each slot contributes a P entry (even index)
    and a Q entry (odd index), in pu on the phase base.
    """

    def __init__(self, slots: tuple[tuple[str, Phase], ...], phase_base_kva: float):
        self.slots = slots
        self.phase_base_kva = phase_base_kva
        self._slot_pos = {slot: k for k, slot in enumerate(slots)}

    @property
    def n_slots(self) -> int:
        return len(self.slots)

    @property
    def size(self) -> int:
        """Length of the measurement vector (two quantities per slot)."""
        return 2 * len(self.slots)

    @property
    def feature_size(self) -> int:
        """Measurement vector plus trusted head P and Q per phase."""
        return self.size + 6

    @property
    def buses(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for bus, _ in self.slots:
            seen.setdefault(bus)
        return tuple(seen)

    def index(self, bus: str, phase: Phase, quantity: str) -> int:
        if quantity not in QUANTITIES:
            raise KeyError(f"unknown quantity {quantity!r}")
        return 2 * self._slot_pos[(bus, phase)] + (quantity == "q")

    def nominal_vector(self, model: NetworkModel) -> np.ndarray:
        """The model's own loads as a measurement vector, pu."""
        vec = np.zeros(self.size)
        for k, (bus, phase) in enumerate(self.slots):
            b = model.bus_by_id[bus]
            vec[2 * k] = b.load_p.get(phase, 0.0) / self.phase_base_kva
            vec[2 * k + 1] = b.load_q.get(phase, 0.0) / self.phase_base_kva
        return vec

    def phase_projection(self) -> np.ndarray:
        """(3, n_slots) 0/1 matrix summing slot quantities per phase."""
        proj = np.zeros((3, self.n_slots))
        for k, (_, phase) in enumerate(self.slots):
            proj[int(phase), k] = 1.0
        return proj

    def updates_from_packets(
        self, packets: list[MeasurementPacket]
    ) -> dict[tuple[str, Phase], tuple[float, float]]:
        """Per-slot (P, Q) pu updates from delivered measurement packets."""
        updates: dict[tuple[str, Phase], tuple[float, float]] = {}
        for packet in packets:
            if packet.kind != "measurement" or packet.payload is None:
                continue
            for phase, (p_kw, q_kvar) in packet.payload.items():
                if (packet.source, phase) not in self._slot_pos:
                    continue
                updates[(packet.source, phase)] = (
                    p_kw / self.phase_base_kva,
                    q_kvar / self.phase_base_kva,
                )
        return updates

    def loads_from_vector(
        self, vec: np.ndarray
    ) -> dict[str, tuple[dict[Phase, float], dict[Phase, float]]]:
        """Measurement vector back to per-bus (P map, Q map) in kW/kVAr."""
        loads: dict[str, tuple[dict[Phase, float], dict[Phase, float]]] = {}
        for k, (bus, phase) in enumerate(self.slots):
            p_map, q_map = loads.setdefault(bus, ({}, {}))
            p_map[phase] = float(vec[2 * k]) * self.phase_base_kva
            q_map[phase] = float(vec[2 * k + 1]) * self.phase_base_kva
        return loads


def measurement_layout(model: NetworkModel) -> MeasurementLayout:
    slots = []
    for bus in model.buses:
        if bus.id == model.substation:
            continue
        for phase in sorted(bus.phases):
            slots.append((bus.id, phase))
    return MeasurementLayout(tuple(slots), model.phase_base_kva)


@dataclass(frozen=True)
class AffineNorm:
    """Per-feature affine normalizer: normalize(x) = (x - shift) / scale."""

    shift: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        if np.any(self.scale == 0) or not (
            np.all(np.isfinite(self.shift)) and np.all(np.isfinite(self.scale))
        ):
            raise ValueError("normalizer scale must be finite and nonzero")

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.shift) / self.scale

    def denormalize(self, y: np.ndarray) -> np.ndarray:
        return y * self.scale + self.shift


def identity_norm(size: int) -> AffineNorm:
    return AffineNorm(np.zeros(size), np.ones(size))


def fit_norm(rows: np.ndarray) -> AffineNorm:
    """Mean/std normalizer; constant features keep scale 1 so they map to 0."""
    shift = rows.mean(axis=0)
    scale = rows.std(axis=0)
    scale = np.where(scale < 1e-12, 1.0, scale)
    return AffineNorm(shift, scale)


@dataclass(frozen=True, eq=False)
class MlpModel:
    layer_sizes: tuple[int, ...]
    weights: tuple[np.ndarray, ...]      # per layer, (fan_in, fan_out)
    biases: tuple[np.ndarray, ...]       # per layer, (fan_out,)
    input_norm: AffineNorm
    output_norm: AffineNorm
    hidden_activation: str = "tanh"

    def __post_init__(self):
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least input and output layers")
        if self.hidden_activation != "tanh":
            raise ValueError(f"unsupported activation {self.hidden_activation!r}")
        n_layers = len(self.layer_sizes) - 1
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise ValueError("one weight and bias set per layer required")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_sizes[i], self.layer_sizes[i + 1]):
                raise ValueError(f"layer {i} weight shape {w.shape} mismatch")
            if b.shape != (self.layer_sizes[i + 1],):
                raise ValueError(f"layer {i} bias shape {b.shape} mismatch")
        if self.input_norm.shift.shape != (self.layer_sizes[0],):
            raise ValueError("input normalizer size mismatch")
        if self.output_norm.shift.shape != (self.layer_sizes[-1],):
            raise ValueError("output normalizer size mismatch")


def init_model(layer_sizes: tuple[int, ...], seed: int = 0) -> MlpModel:
    """Glorot-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases."""
    rng = np.random.default_rng(seed)
    weights = []
    biases = []
    for fan_in, fan_out in zip(layer_sizes, layer_sizes[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, (fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(
        layer_sizes=tuple(layer_sizes),
        weights=tuple(weights),
        biases=tuple(biases),
        input_norm=identity_norm(layer_sizes[0]),
        output_norm=identity_norm(layer_sizes[-1]),
    )


def _forward_normalized(
    model: MlpModel, xn: np.ndarray
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward pass in normalized space; returns output and per-layer activations."""
    acts = [xn]
    h = xn
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        h = z if i == last else np.tanh(z)
        acts.append(h)
    return h, acts


def mlp_forward(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Estimate vector(s) for one input row or a batch of rows."""
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    rows = np.atleast_2d(arr)
    if rows.shape[1] != model.layer_sizes[0]:
        raise ValueError(
            f"input width {rows.shape[1]} != model input {model.layer_sizes[0]}"
        )
    yn, _ = _forward_normalized(model, model.input_norm.normalize(rows))
    y = model.output_norm.denormalize(yn)
    return y[0] if single else y


def mlp_loss_and_grad(
    model: MlpModel, xn: np.ndarray, yn: np.ndarray
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Mean-squared error over all normalized entries plus its gradients."""
    pred, acts = _forward_normalized(model, xn)
    resid = pred - yn
    n = resid.size
    loss = float((resid * resid).sum() / n)
    grad_w: list[np.ndarray] = [np.empty(0)] * len(model.weights)
    grad_b: list[np.ndarray] = [np.empty(0)] * len(model.weights)
    delta = 2.0 * resid / n
    for i in range(len(model.weights) - 1, -1, -1):
        grad_w[i] = acts[i].T @ delta
        grad_b[i] = delta.sum(axis=0)
        if i > 0:
            # tanh'(z) = 1 - tanh(z)^2 and acts[i] already holds tanh(z)
            delta = (delta @ model.weights[i].T) * (1.0 - acts[i] ** 2)
    return loss, grad_w, grad_b


@dataclass(frozen=True)
class TrainingSet:
    inputs: np.ndarray    # (rows, features)
    targets: np.ndarray   # (rows, outputs), pu

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.targets.ndim != 2:
            raise ValueError("inputs and targets must be 2-D")
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("inputs and targets must have equal row counts")
        if self.inputs.shape[0] == 0:
            raise ValueError("training set is empty")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))):
            raise ValueError("training set contains non-finite entries")


def mlp_train(
    model: MlpModel,
    training_set: TrainingSet,
    epochs: int = DEFAULT_EPOCHS,
    step_size: float = DEFAULT_STEP_SIZE,
    seed: int | None = None,
) -> tuple[MlpModel, list[float]]:
    """Full-batch gradient descent; returns the trained model and loss curve.

    The loss curve holds the normalized-space MSE evaluated before each
    update, so curve[0] is the initial loss. Normalizers are refit from the
    training set. Zero epochs returns the model untouched. Passing a seed
    reinitializes the weights first.
    """
    if epochs < 0:
        raise ValueError("epochs must be nonnegative")
    if epochs == 0:
        return model, []
    if seed is not None:
        model = init_model(model.layer_sizes, seed)
    if training_set.inputs.shape[1] != model.layer_sizes[0]:
        raise TrainingError("training inputs do not match model input size")
    if training_set.targets.shape[1] != model.layer_sizes[-1]:
        raise TrainingError("training targets do not match model output size")
    in_norm = fit_norm(training_set.inputs)
    out_norm = fit_norm(training_set.targets)
    xn = in_norm.normalize(training_set.inputs)
    yn = out_norm.normalize(training_set.targets)
    weights = [w.copy() for w in model.weights]
    biases = [b.copy() for b in model.biases]
    work = replace(model, weights=tuple(weights), biases=tuple(biases),
                   input_norm=in_norm, output_norm=out_norm)
    curve: list[float] = []
    for epoch in range(epochs):
        loss, grad_w, grad_b = mlp_loss_and_grad(work, xn, yn)
        curve.append(loss)
        if not math.isfinite(loss) or loss > DIVERGENCE_LIMIT:
            raise DivergenceError(epoch, curve)
        for i in range(len(weights)):
            weights[i] -= step_size * grad_w[i]
            biases[i] -= step_size * grad_b[i]
    return work, curve


def generate_training_set(
    model: NetworkModel,
    factors: tuple[float, ...] = DEFAULT_FACTORS,
    noise_sigma: float = DEFAULT_NOISE_SIGMA,
    samples_per_factor: int = 100,
    seed: int = 0,
) -> TrainingSet:
    """Loading-factor sweep dataset for the estimator.

    Each row pairs an input (previous-step measurement vector plus the head
    P, Q per phase implied by the current targets) with the current target
    vector. Previous and current vectors are independent draws: the nominal
    loads scaled by the factor, each quantity perturbed by multiplicative
    Gaussian noise of the given sigma.
    """
    if not factors:
        raise ValueError("factors must be nonempty")
    if samples_per_factor <= 0:
        raise ValueError("samples_per_factor must be positive")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be nonnegative")
    layout = measurement_layout(model)
    nominal = layout.nominal_vector(model)
    proj = layout.phase_projection()
    rng = np.random.default_rng(seed)
    inputs = []
    targets = []
    for factor in factors:
        if factor <= 0:
            raise ValueError("loading factors must be positive")
        base = factor * nominal
        prev = base * (1.0 + noise_sigma * rng.standard_normal(
            (samples_per_factor, layout.size)))
        curr = base * (1.0 + noise_sigma * rng.standard_normal(
            (samples_per_factor, layout.size)))
        head_p = curr[:, 0::2] @ proj.T
        head_q = curr[:, 1::2] @ proj.T
        inputs.append(np.hstack([prev, head_p, head_q]))
        targets.append(curr)
    return TrainingSet(np.vstack(inputs), np.vstack(targets))


def evaluate_mape(pred: np.ndarray, true: np.ndarray) -> float:
    """Mean absolute percentage error over entries whose true value is nonzero."""
    pred = np.atleast_2d(pred)
    true = np.atleast_2d(true)
    mask = np.abs(true) > 1e-12
    if not mask.any():
        raise ValueError("no nonzero true entries to score")
    return float(
        100.0 * (np.abs(pred[mask] - true[mask]) / np.abs(true[mask])).mean()
    )


# --- detection and mitigation ---


@dataclass(frozen=True)
class FdiFlag:
    bus: str
    phase: Phase
    quantity: str
    received: float
    estimate: float
    deviation: float


@dataclass(frozen=True)
class DosFlag:
    source: str
    utilization: float


@dataclass(frozen=True)
class LossFill:
    bus: str
    phase: Phase
    quantity: str
    estimate: float


@dataclass(frozen=True)
class DetectionReport:
    fdi: tuple[FdiFlag, ...]
    dos: tuple[DosFlag, ...]
    fills: tuple[LossFill, ...]

    @property
    def empty(self) -> bool:
        return not (self.fdi or self.dos or self.fills)

    def rows(self, time: float) -> list[tuple[str, ...]]:
        """CSV rows matching DETECTIONS_HEADER, deterministic order."""
        out = []
        for d in self.dos:
            out.append((repr(time), "dos", d.source, "", "",
                        repr(d.utilization), "", "disconnect"))
        for f in self.fdi:
            out.append((repr(time), "fdi", f.bus, f.phase.name, f.quantity,
                        repr(f.received), repr(f.estimate), "substitute"))
        for f in self.fills:
            out.append((repr(time), "loss-fill", f.bus, f.phase.name,
                        f.quantity, "", repr(f.estimate), "fill"))
        return out


@dataclass(frozen=True, eq=False)
class Detector:
    """Estimator plus thresholds, bound to one measurement layout."""

    model: MlpModel
    layout: MeasurementLayout
    fdi_threshold: float = FDI_THRESHOLD
    dos_threshold: float = DOS_THRESHOLD
    deviation_floor: float = DEVIATION_FLOOR

    def estimate(
        self, prev_clean: np.ndarray, head_p: np.ndarray, head_q: np.ndarray
    ) -> np.ndarray:
        features = np.concatenate([prev_clean, head_p, head_q])
        return mlp_forward(self.model, features)


def detect_and_mitigate(
    detector: Detector,
    packets: list[MeasurementPacket],
    expected_sources: tuple[str, ...],
    queue_util: dict[str, float],
    prev_clean: np.ndarray,
    head_p: np.ndarray,
    head_q: np.ndarray,
) -> tuple[np.ndarray, DetectionReport, tuple[str, ...]]:
    """One defense pass over a step's delivered telemetry.

    Returns the clean measurement vector (received values that passed,
    estimates elsewhere), the detection report, and the sources whose
    utilization crossed the DoS threshold (to be disconnected).
    """
    layout = detector.layout
    if prev_clean.shape != (layout.size,):
        raise ValueError(
            f"prev_clean shape {prev_clean.shape} != ({layout.size},)"
        )
    estimate = detector.estimate(prev_clean, head_p, head_q)

    dos_flags = tuple(
        DosFlag(source, util)
        for source, util in sorted(queue_util.items())
        if util > detector.dos_threshold
    )
    disconnects = tuple(d.source for d in dos_flags)

    updates = layout.updates_from_packets(packets)
    expected = set(expected_sources)
    clean = estimate.copy()
    fdi_flags: list[FdiFlag] = []
    fills: list[LossFill] = []
    for k, (bus, phase) in enumerate(layout.slots):
        got = updates.get((bus, phase))
        for quantity in QUANTITIES:
            idx = 2 * k + (quantity == "q")
            est = float(estimate[idx])
            if got is None:
                if bus in expected:
                    fills.append(LossFill(bus, phase, quantity, est))
                continue
            received = float(got[0] if quantity == "p" else got[1])
            deviation = abs(received - est) / max(abs(est), detector.deviation_floor)
            if deviation > detector.fdi_threshold:
                fdi_flags.append(
                    FdiFlag(bus, phase, quantity, received, est, deviation)
                )
            else:
                clean[idx] = received
    report = DetectionReport(tuple(fdi_flags), dos_flags, tuple(fills))
    return clean, report, disconnects


# --- serialization ---

_FORMAT = "voltvarsim-mlp-v1"


def _norm_to_obj(norm: AffineNorm) -> dict:
    return {"shift": norm.shift.tolist(), "scale": norm.scale.tolist()}


def _norm_from_obj(obj: dict) -> AffineNorm:
    return AffineNorm(np.array(obj["shift"], dtype=float),
                      np.array(obj["scale"], dtype=float))


def model_to_json(model: MlpModel) -> str:
    """Byte-stable JSON for an MlpModel (sorted keys, repr floats)."""
    obj = {
        "format": _FORMAT,
        "layer_sizes": list(model.layer_sizes),
        "hidden_activation": model.hidden_activation,
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "input_norm": _norm_to_obj(model.input_norm),
        "output_norm": _norm_to_obj(model.output_norm),
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def model_from_json(text: str) -> MlpModel:
    obj = json.loads(text)
    if obj.get("format") != _FORMAT:
        raise ValueError(f"unsupported model format {obj.get('format')!r}")
    return MlpModel(
        layer_sizes=tuple(obj["layer_sizes"]),
        weights=tuple(np.array(w, dtype=float) for w in obj["weights"]),
        biases=tuple(np.array(b, dtype=float) for b in obj["biases"]),
        input_norm=_norm_from_obj(obj["input_norm"]),
        output_norm=_norm_from_obj(obj["output_norm"]),
        hidden_activation=obj["hidden_activation"],
    )


def clamp_constant_outputs(model: MlpModel, targets: np.ndarray) -> MlpModel:
    """Pin outputs whose training target never varies to that constant.

    For a constant target column the unconditional constant is the exact
    least-squares optimum; gradient descent only approaches it, and the
    leftover drift on zero-load buses would otherwise eat into the
    relative-deviation floor. Zeroing the column's final-layer weights makes
    the normalized output identically zero, which denormalizes to the
    training constant.
    """
    const = targets.std(axis=0) < 1e-12
    if not const.any():
        return model
    weights = [w.copy() for w in model.weights]
    biases = [b.copy() for b in model.biases]
    weights[-1][:, const] = 0.0
    biases[-1][const] = 0.0
    return replace(model, weights=tuple(weights), biases=tuple(biases))


def train_detector(
    model: NetworkModel,
    seed: int = 0,
    epochs: int = DEFAULT_EPOCHS,
    hidden: tuple[int, ...] = (64, 64),
    samples_per_factor: int = 100,
    noise_sigma: float = DEFAULT_NOISE_SIGMA,
) -> tuple[Detector, list[float]]:
    """Generate the loading sweep, train the estimator, bundle a Detector."""
    layout = measurement_layout(model)
    training = generate_training_set(
        model,
        noise_sigma=noise_sigma,
        samples_per_factor=samples_per_factor,
        seed=seed,
    )
    sizes = (layout.feature_size, *hidden, layout.size)
    trained, curve = mlp_train(
        init_model(sizes, seed), training, epochs=epochs, seed=None
    )
    trained = clamp_constant_outputs(trained, training.targets)
    return Detector(trained, layout), curve
