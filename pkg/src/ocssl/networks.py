"""MLP learner, SimSiam predictor, alignment projector, EMA twin and SGD.

The learner ``theta`` is an encoder MLP followed by a projector MLP; its
output ``z`` is the space where SSL and alignment losses operate. The
encoder output (pre-projector) is what linear probes consume.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from . import container
from .autodiff import Tensor
from .errors import ProtocolError

CHECKPOINT_MAGIC = b"OCKP"


@dataclass(frozen=True)
class MlpSpec:
    """Widths ``[in, h1, ..., out]``; one batch-norm flag per linear layer.

    Hidden layers always use relu; ``final_activation`` controls the last one.
    """

    layer_widths: tuple[int, ...]
    batch_norm: tuple[bool, ...] = ()
    final_activation: str = "none"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ValueError(f"MlpSpec needs >= 1 layer of positive widths, got {widths}")
        bn = tuple(bool(b) for b in self.batch_norm) or (False,) * (len(widths) - 1)
        if len(bn) != len(widths) - 1:
            raise ValueError("batch_norm needs one flag per linear layer")
        if self.final_activation not in ("none", "relu"):
            raise ValueError(f"final_activation must be 'none' or 'relu', got {self.final_activation!r}")
        object.__setattr__(self, "layer_widths", widths)
        object.__setattr__(self, "batch_norm", bn)

    @property
    def in_width(self) -> int:
        return self.layer_widths[0]

    @property
    def out_width(self) -> int:
        return self.layer_widths[-1]

    def to_dict(self) -> dict:
        return {"layer_widths": list(self.layer_widths), "batch_norm": list(self.batch_norm),
                "final_activation": self.final_activation}

    @classmethod
    def from_dict(cls, d: dict) -> MlpSpec:
        return cls(tuple(d["layer_widths"]), tuple(d["batch_norm"]), d["final_activation"])


class Mlp:
    """Linear -> [batch norm] -> relu stack with named parameters."""

    def __init__(self, spec: MlpSpec, rng: np.random.Generator | None = None, trainable: bool = True):
        self.spec = spec
        self.params: dict[str, Tensor] = {}
        self.stats: dict[str, np.ndarray] = {}
        rng = rng if rng is not None else np.random.default_rng(0)
        widths = spec.layer_widths
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            bound = np.sqrt(6.0 / fan_in)
            self.params[f"l{i}.weight"] = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), trainable)
            self.params[f"l{i}.bias"] = Tensor(np.zeros(fan_out), trainable)
            if spec.batch_norm[i]:
                self.params[f"l{i}.bn.gamma"] = Tensor(np.ones(fan_out), trainable)
                self.params[f"l{i}.bn.beta"] = Tensor(np.zeros(fan_out), trainable)
                self.stats[f"l{i}.bn.mean"] = np.zeros(fan_out)
                self.stats[f"l{i}.bn.var"] = np.ones(fan_out)

    def __call__(self, x: Tensor, training: bool = True, track: bool = True) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.spec.in_width:
            raise ad.ShapeError(f"Mlp expects (b, {self.spec.in_width}) input, got {x.shape}")
        h = x
        n = len(self.spec.layer_widths) - 1
        for i in range(n):
            h = ad.add_bias(ad.matmul(h, self.params[f"l{i}.weight"]), self.params[f"l{i}.bias"])
            if self.spec.batch_norm[i]:
                h = ad.batch_norm(
                    h, self.params[f"l{i}.bn.gamma"], self.params[f"l{i}.bn.beta"], training,
                    self.stats[f"l{i}.bn.mean"], self.stats[f"l{i}.bn.var"], track=track,
                )
            if i < n - 1 or self.spec.final_activation == "relu":
                h = ad.relu(h)
        return h

    def copy(self, trainable: bool | None = None) -> Mlp:
        out = Mlp.__new__(Mlp)
        out.spec = self.spec
        out.params = {
            k: Tensor(p.data, p.requires_grad if trainable is None else trainable)
            for k, p in self.params.items()
        }
        out.stats = {k: v.copy() for k, v in self.stats.items()}
        return out


class Learner:
    """Encoder followed by projector: ``theta(x) = projector(encoder(x))``."""

    def __init__(self, encoder: Mlp, projector: Mlp):
        if encoder.spec.out_width != projector.spec.in_width:
            raise ValueError("encoder output width must equal projector input width")
        self.encoder = encoder
        self.projector = projector

    def __call__(self, x: Tensor, training: bool = True, track: bool = True) -> Tensor:
        return self.projector(self.encoder(x, training, track), training, track)

    def encode(self, x: Tensor, training: bool = False) -> Tensor:
        return self.encoder(x, training, track=training)

    def named_params(self) -> Iterator[tuple[str, Tensor]]:
        for k, p in self.encoder.params.items():
            yield f"encoder/{k}", p
        for k, p in self.projector.params.items():
            yield f"projector/{k}", p

    def named_stats(self) -> Iterator[tuple[str, np.ndarray]]:
        for k, v in self.encoder.stats.items():
            yield f"encoder/{k}", v
        for k, v in self.projector.stats.items():
            yield f"projector/{k}", v

    def copy(self, trainable: bool | None = None) -> Learner:
        return Learner(self.encoder.copy(trainable), self.projector.copy(trainable))

    @property
    def feature_width(self) -> int:
        return self.projector.spec.out_width


def forward_features(theta: Learner, x) -> Tensor:
    """Projector output ``z`` for a batch ``x`` (training-mode batch norm)."""
    return theta(ad.as_tensor(x))


@dataclass
class NetworkSet:
    """Everything a strategy trains or aligns against.

    ``ema_theta`` and ``frozen_theta`` hold constant (non-trainable) copies of
    ``theta``. ``align_proj`` maps the feature space to itself.
    """

    theta: Learner
    predictor: Mlp | None = None
    align_proj: Mlp | None = None
    ema_theta: Learner | None = None
    frozen_theta: Learner | None = None

    def __post_init__(self):
        f = self.theta.feature_width
        if self.align_proj is not None and (
            self.align_proj.spec.in_width != f or self.align_proj.spec.out_width != f
        ):
            raise ValueError("align_proj must map the feature space to itself")
        if self.predictor is not None and (
            self.predictor.spec.in_width != f or self.predictor.spec.out_width != f
        ):
            raise ValueError("predictor must map the feature space to itself")

    def trainable(self) -> dict[str, Tensor]:
        """Named trainable parameters (theta, predictor, align_proj)."""
        out = dict((f"theta/{k}", p) for k, p in self.theta.named_params())
        if self.predictor is not None:
            out.update((f"predictor/{k}", p) for k, p in self.predictor.params.items())
        if self.align_proj is not None:
            out.update((f"align/{k}", p) for k, p in self.align_proj.params.items())
        return out

    def constant_params(self) -> dict[str, Tensor]:
        out = {}
        if self.ema_theta is not None:
            out.update((f"ema/{k}", p) for k, p in self.ema_theta.named_params())
        if self.frozen_theta is not None:
            out.update((f"frozen/{k}", p) for k, p in self.frozen_theta.named_params())
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        """Every parameter and running statistic, keyed by a stable name."""
        out = {k: p.data for k, p in self.trainable().items()}
        out.update((k, p.data) for k, p in self.constant_params().items())
        for prefix, learner in (("theta", self.theta), ("ema", self.ema_theta), ("frozen", self.frozen_theta)):
            if learner is not None:
                out.update((f"{prefix}/{k}", v) for k, v in learner.named_stats())
        for prefix, mlp in (("predictor", self.predictor), ("align", self.align_proj)):
            if mlp is not None:
                out.update((f"{prefix}/{k}", v) for k, v in mlp.stats.items())
        return out

    def specs(self) -> dict:
        d = {"encoder": self.theta.encoder.spec.to_dict(), "projector": self.theta.projector.spec.to_dict()}
        if self.predictor is not None:
            d["predictor"] = self.predictor.spec.to_dict()
        if self.align_proj is not None:
            d["align"] = self.align_proj.spec.to_dict()
        d["has_ema"] = self.ema_theta is not None
        d["has_frozen"] = self.frozen_theta is not None
        return d


def default_specs(input_dim: int) -> dict[str, MlpSpec]:
    """Desk-scale architecture: encoder [d,128,128], projector [128,64], predictor [64,32,64], a_phi [64,64,64]."""
    return {
        "encoder": MlpSpec((input_dim, 128, 128), (True, True), "relu"),
        "projector": MlpSpec((128, 64)),
        "predictor": MlpSpec((64, 32, 64), (True, False)),
        "align": MlpSpec((64, 64, 64)),
    }


def build_network_set(
    input_dim: int,
    seed: int,
    *,
    predictor: bool = True,
    align: bool = True,
    ema: bool = False,
    specs: dict[str, MlpSpec] | None = None,
) -> NetworkSet:
    specs = specs or default_specs(input_dim)
    rng = np.random.default_rng(seed)
    theta = Learner(Mlp(specs["encoder"], rng), Mlp(specs["projector"], rng))
    nets = NetworkSet(
        theta=theta,
        predictor=Mlp(specs["predictor"], rng) if predictor else None,
        align_proj=Mlp(specs["align"], rng) if align else None,
    )
    if ema:
        nets.ema_theta = theta.copy(trainable=False)
    return nets


def ema_update(theta: Learner, ema_theta: Learner, tau: float) -> Learner:
    """In place ``p' <- tau * p' + (1 - tau) * p`` for every parameter pair."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    src = dict(theta.named_params())
    dst = dict(ema_theta.named_params())
    if src.keys() != dst.keys() or any(src[k].shape != dst[k].shape for k in src):
        raise ad.ShapeError("EMA twin is not shape-congruent with theta")
    for k, q in dst.items():
        # fresh arrays: graphs built earlier keep the values they saw
        q.data = tau * q.data + (1.0 - tau) * src[k].data
    return ema_theta


class MissingGradientError(RuntimeError):
    """A parameter expected to be trained has no gradient."""


@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


def sgd_step(params: dict[str, Tensor], state: SgdState, skip_missing: bool = False):
    """Momentum SGD with coupled weight decay, then clear gradients.

    ``v <- momentum * v + grad + weight_decay * p``;  ``p <- p - lr * v``.
    Parameters without a gradient raise unless ``skip_missing`` is set, in
    which case they are left untouched.
    """
    for name, p in params.items():
        if p.grad is None:
            if skip_missing:
                continue
            raise MissingGradientError(f"no gradient for trainable parameter {name}")
        g = p.grad + state.weight_decay * p.data if state.weight_decay else p.grad
        v = state.velocity.get(name)
        v = g.copy() if v is None else state.momentum * v + g
        if v.shape != p.shape:
            raise ad.ShapeError(f"velocity for {name} has shape {v.shape}, parameter {p.shape}")
        state.velocity[name] = v
        p.data = p.data - state.learning_rate * v
        p.grad = None


def zero_grads(params):
    for p in params.values() if isinstance(params, dict) else params:
        p.grad = None


def snapshot_frozen(theta: Learner, boundaries_visible: bool) -> Learner:
    """Constant deep copy of ``theta`` taken at an exposed task boundary."""
    if not boundaries_visible:
        raise ProtocolError("snapshot_frozen needs a boundary-visible stream")
    return theta.copy(trainable=False)


# -- checkpoints -------------------------------------------------------------------------


@dataclass
class Checkpoint:
    nets: NetworkSet
    sgd: SgdState | None
    meta: dict
    extras: dict[str, np.ndarray]


def save_checkpoint(
    nets: NetworkSet,
    path,
    sgd: SgdState | None = None,
    meta: dict | None = None,
    extras: dict[str, np.ndarray] | None = None,
):
    arrays = {f"net/{k}": v for k, v in nets.arrays().items()}
    if sgd is not None:
        arrays.update((f"opt/{k}", v) for k, v in sgd.velocity.items())
    for k, v in (extras or {}).items():
        arrays[f"extra/{k}"] = v
    header = {
        "specs": nets.specs(),
        "sgd": None if sgd is None else {
            "learning_rate": sgd.learning_rate, "momentum": sgd.momentum, "weight_decay": sgd.weight_decay,
        },
        "meta": meta or {},
    }
    container.save(path, CHECKPOINT_MAGIC, arrays, header)


def load_checkpoint(path) -> Checkpoint:
    arrays, header = container.load(path, CHECKPOINT_MAGIC)
    specs = {k: MlpSpec.from_dict(v) for k, v in header["specs"].items() if isinstance(v, dict)}
    nets = build_network_set(
        specs["encoder"].in_width, 0,
        predictor="predictor" in specs, align="align" in specs,
        ema=header["specs"]["has_ema"], specs=specs,
    )
    if header["specs"]["has_frozen"]:
        nets.frozen_theta = nets.theta.copy(trainable=False)
    _restore(nets, {k[4:]: v for k, v in arrays.items() if k.startswith("net/")})
    sgd = None
    if header["sgd"] is not None:
        sgd = SgdState(**header["sgd"])
        sgd.velocity = {k[4:]: v.copy() for k, v in arrays.items() if k.startswith("opt/")}
    extras = {k[6:]: v for k, v in arrays.items() if k.startswith("extra/")}
    return Checkpoint(nets, sgd, header["meta"], extras)


def _restore(nets: NetworkSet, arrays: dict[str, np.ndarray]):
    params = nets.trainable() | nets.constant_params()
    stats = {}
    for prefix, learner in (("theta", nets.theta), ("ema", nets.ema_theta), ("frozen", nets.frozen_theta)):
        if learner is not None:
            for sub, mlp in (("encoder", learner.encoder), ("projector", learner.projector)):
                stats.update((f"{prefix}/{sub}/{k}", (mlp, k)) for k in mlp.stats)
    for prefix, mlp in (("predictor", nets.predictor), ("align", nets.align_proj)):
        if mlp is not None:
            stats.update((f"{prefix}/{k}", (mlp, k)) for k in mlp.stats)
    expected = set(params) | set(stats)
    if expected != set(arrays):
        missing, extra = expected - set(arrays), set(arrays) - expected
        raise ValueError(
            f"checkpoint does not match architecture: missing={sorted(missing)[:3]} extra={sorted(extra)[:3]}")
    for k, p in params.items():
        if arrays[k].shape != p.shape:
            raise ad.ShapeError(f"checkpoint {k}: shape {arrays[k].shape} != {p.shape}")
        p.data = arrays[k].copy()
    for k, (mlp, key) in stats.items():
        mlp.stats[key] = arrays[k].copy()


def clone_network_set(nets: NetworkSet) -> NetworkSet:
    return copy.deepcopy(nets)
