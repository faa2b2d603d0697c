"""Per-minibatch training loops for every strategy.

A strategy only ever receives raw stream minibatches through
:meth:`Strategy.observe`. Boundary-aware baselines (CaSSLe, CaSSLe-R) are
additionally notified through :meth:`Strategy.on_boundary`, which the
harness only calls on boundary-visible streams.

Each call to ``observe`` runs ``n_p`` passes over the same minibatch; every
pass is one backward call charged to the budget ledger as ``n_v * b``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import alignment as al
from . import autodiff as ad
from .autodiff import Tensor
from .budget import BudgetLedger, BudgetSpec
from .errors import ProtocolError
from .networks import (
    NetworkSet,
    SgdState,
    build_network_set,
    ema_update,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    snapshot_frozen,
)
from .replay import Buffer, ReplayBatch
from .ssl_objectives import DEFAULT_TEMPERATURE, ViewPair, ssl_loss
from .stream import AugmentationPolicy, make_views

logger = logging.getLogger(__name__)

N_VIEWS = 2

# name -> (minibatch composition, uses a replay buffer, alignment variant)
REGISTRY = {
    "finetune": ("b_s", False, "none"),
    "er": ("b_s+b_r", True, "none"),
    "lump": ("b_s", True, "none"),
    "cla_b": ("b_s", False, "cla_b"),
    "cla_e": ("b_s+b_r", True, "cla_e"),
    "cla_r": ("b_s+b_r", True, "cla_r"),
    "cassle": ("b_s", False, "cassle"),
    "cassle_r": ("b_s+b_r", True, "cassle_r"),
}

DEFAULT_OMEGA = {"cla_e": 0.3, "cla_r": 1.0, "cla_b": 0.1, "cassle": 1.0, "cassle_r": 1.0}
DEFAULT_POLICY = {"lump": "reservoir"}


@dataclass
class StrategyConfig:
    name: str
    ssl_objective: str = "simsiam"
    omega: float | None = None
    buffer_policy: str | None = None
    buffer_capacity: int = 2000
    b_r: int | None = None
    b_s: int = 10
    n_p: int = 1
    tau: float = 0.999
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    temperature: float = DEFAULT_TEMPERATURE
    lump_alpha: float = 0.4
    lump_lambda: float | None = None
    seed: int = 0
    label: str = ""

    def __post_init__(self):
        if self.name not in REGISTRY:
            raise ValueError(f"unknown strategy {self.name!r}; choose from {sorted(REGISTRY)}")
        if self.ssl_objective not in ("simsiam", "simclr"):
            raise ValueError(f"unknown ssl_objective {self.ssl_objective!r}")
        composition, uses_buffer, variant = REGISTRY[self.name]
        if self.omega is None:
            self.omega = DEFAULT_OMEGA.get(self.name, 0.0)
        if variant in ("cassle", "cassle_r"):
            self.omega = 1.0
        if self.buffer_policy is None:
            self.buffer_policy = DEFAULT_POLICY.get(self.name, "fifo")
        if self.b_r is None:
            self.b_r = self.b_s if self.name == "lump" else (128 if composition == "b_s+b_r" else 0)
        if composition == "b_s" and self.name != "lump":
            self.b_r = 0
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.n_p < 1 or self.b_s < 1:
            raise ValueError("n_p and b_s must be positive")
        if not self.label:
            self.label = self.name if not uses_buffer or self.name == "lump" else f"{self.name}_{self.buffer_policy}"

    @property
    def composition(self) -> str:
        return REGISTRY[self.name][0]

    @property
    def variant(self) -> str:
        return REGISTRY[self.name][2]

    @property
    def b(self) -> int:
        return self.b_s + self.b_r if self.composition == "b_s+b_r" else self.b_s

    def budget_spec(self, N: int) -> BudgetSpec:
        return BudgetSpec(n_v=N_VIEWS, b=self.b, b_s=self.b_s, n_p=self.n_p, N=N, b_r=self.b_r,
                          composition=self.composition, label=self.label)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepTrace:
    step: int
    loss_total: float
    loss_ssl: float
    loss_reg: float
    cbp_so_far: int
    experience: int | None = None

    def finite(self) -> bool:
        return all(np.isfinite([self.loss_total, self.loss_ssl, self.loss_reg]))


@dataclass
class _PassResult:
    z1: np.ndarray
    z2: np.ndarray
    n_stream: int
    replay: ReplayBatch | None = None


_EMPTY = ReplayBatch(np.zeros((0, 0)), None, [])


class Strategy:
    """Shared machinery: networks, optimizer, ledger, random streams.

    Three independent generators drive views, replay sampling and mixing
    coefficients so that strategies that differ only in their regularizer
    consume identical random sequences.
    """

    def __init__(self, config: StrategyConfig, input_dim: int, augment: AugmentationPolicy | None = None,
                 ledger: BudgetLedger | None = None, nets: NetworkSet | None = None):
        self.config = config
        self.augment = augment or AugmentationPolicy()
        self.ledger = ledger if ledger is not None else BudgetLedger()
        _, uses_buffer, variant = REGISTRY[config.name]
        self.variant = variant
        if nets is None:
            nets = build_network_set(
                input_dim, config.seed,
                predictor=config.ssl_objective == "simsiam",
                align=variant != "none",
                ema=variant in ("cla_b", "cla_e"),
            )
        self.nets = nets
        self.sgd = SgdState(config.learning_rate, config.momentum, config.weight_decay)
        self.buffer = None
        if uses_buffer:
            self.buffer = Buffer(config.buffer_capacity, config.buffer_policy,
                                 store_features=variant == "cla_r", seed=config.seed + 1)
        self.view_rng = np.random.default_rng([config.seed, 11])
        self.replay_rng = np.random.default_rng([config.seed, 12])
        self.mix_rng = np.random.default_rng([config.seed, 13])
        self.step = 0
        self.boundaries_seen = 0
        self.align_loss = al.resolve_align_loss(
            "ssl_loss" if variant in ("cassle", "cassle_r") else "neg_cosine",
            config.ssl_objective, config.temperature)

    # -- hooks ---------------------------------------------------------------------

    @property
    def needs_boundaries(self) -> bool:
        return self.variant in ("cassle", "cassle_r")

    def on_boundary(self):
        """Task-boundary notification; only boundary-aware baselines accept it."""
        raise ProtocolError(f"{self.config.name} runs on hidden-boundary streams and takes no boundary events")

    def observe(self, x) -> list[StepTrace]:
        """Train on one stream minibatch: ``n_p`` passes, then memory updates."""
        x = np.asarray(x, dtype=np.float64)
        traces, last = [], None
        for _ in range(self.config.n_p):
            trace, last = self._pass(x)
            traces.append(trace)
        self._after_minibatch(x, last)
        return traces

    def _pass(self, x: np.ndarray) -> tuple[StepTrace, _PassResult]:
        raise NotImplementedError

    def _after_minibatch(self, x: np.ndarray, last: _PassResult):
        pass

    # -- shared pieces -----------------------------------------------------------------

    def _ssl(self, z1: Tensor, z2: Tensor) -> Tensor:
        return ssl_loss(self.config.ssl_objective, ViewPair(z1, z2), self.nets.predictor, self.config.temperature)

    def _backprop_and_step(self, ssl: Tensor, reg: Tensor, batch: int, declared: int | None = None) -> StepTrace:
        loss = al.total_loss(ssl, reg, self.config.omega)
        self.ledger.record(N_VIEWS, batch, batch if declared is None else declared)
        loss.backward()
        params = self.nets.trainable()
        if not reg.requires_grad:
            params = {k: p for k, p in params.items() if not k.startswith("align/")}
        sgd_step(params, self.sgd)
        trace = StepTrace(self.step, loss.item(), ssl.item(), reg.item(), self.ledger.backward_examples)
        self.step += 1
        return trace

    def _sample_replay(self, n: int) -> ReplayBatch:
        if self.buffer is None or len(self.buffer) == 0 or n == 0:
            return _EMPTY
        return self.buffer.sample(n, self.replay_rng)

    def _views_and_features(self, xs: np.ndarray):
        x1, x2 = make_views(xs, self.augment, self.view_rng)
        theta = self.nets.theta
        return x1, x2, theta(Tensor(x1)), theta(Tensor(x2))

    # -- diagnostics ---------------------------------------------------------------------

    def audit_stop_gradient(self) -> bool:
        """True when no gradient has reached the EMA twin, snapshots or stored features."""
        for p in self.nets.constant_params().values():
            if p.requires_grad or p.grad is not None:
                return False
        if self.buffer is not None:
            for e in self.buffer.entries:
                for arr in (e.sample, e.feature):
                    if arr is not None and (isinstance(arr, Tensor) or arr.flags.writeable):
                        return False
        return True

    # -- persistence ---------------------------------------------------------------------

    def save(self, path, meta: dict | None = None):
        extras = {}
        state = {
            "config": self.config.to_dict(),
            "augment": self.augment.to_dict(),
            "ledger": self.ledger.to_dict(),
            "step": self.step,
            "boundaries_seen": self.boundaries_seen,
            "rng": {k: getattr(self, k).bit_generator.state for k in ("view_rng", "replay_rng", "mix_rng")},
            "buffer": None,
            "user": meta or {},
        }
        if self.buffer is not None:
            arrays, bmeta = self.buffer.to_arrays()
            extras.update((f"buffer/{k}", v) for k, v in arrays.items())
            state["buffer"] = bmeta
        save_checkpoint(self.nets, path, self.sgd, state, extras)

    @classmethod
    def load(cls, path) -> Strategy:
        ckpt = load_checkpoint(path)
        state = ckpt.meta
        config = StrategyConfig(**state["config"])
        aug = state["augment"]
        augment = AugmentationPolicy(aug["noise_sigma"], aug["mask_fraction"], tuple(aug["scale_jitter"]))
        strat = make_strategy(config, ckpt.nets.theta.encoder.spec.in_width, augment,
                              BudgetLedger.from_dict(state["ledger"]), nets=ckpt.nets)
        if ckpt.sgd is not None:
            strat.sgd = ckpt.sgd
        strat.step = state["step"]
        strat.boundaries_seen = state["boundaries_seen"]
        for k, s in state["rng"].items():
            getattr(strat, k).bit_generator.state = s
        if state["buffer"] is not None:
            arrays = {k[7:]: v for k, v in ckpt.extras.items() if k.startswith("buffer/")}
            strat.buffer = Buffer.from_arrays(arrays, state["buffer"])
        strat.user_meta = state.get("user", {})
        return strat


class Finetune(Strategy):
    """Plain SSL on the stream minibatch."""

    def _pass(self, x):
        _, _, z1, z2 = self._views_and_features(x)
        trace = self._backprop_and_step(self._ssl(z1, z2), Tensor(0.0), x.shape[0])
        return trace, _PassResult(z1.data, z2.data, x.shape[0])


class ClaB(Strategy):
    """CLA-b: align stream features to an EMA twin, no replay."""

    def _pass(self, x):
        x1, x2, z1, z2 = self._views_and_features(x)
        ema_update(self.nets.theta, self.nets.ema_theta, self.config.tau)
        reg = al.cla_b_reg(z1, z2, self.nets.align_proj, self.nets.ema_theta, x1, x2)
        trace = self._backprop_and_step(self._ssl(z1, z2), reg, x.shape[0])
        return trace, _PassResult(z1.data, z2.data, x.shape[0])


class Cassle(Strategy):
    """CaSSLe: align stream features to the snapshot taken at the last exposed boundary."""

    def on_boundary(self):
        self.nets.frozen_theta = snapshot_frozen(self.nets.theta, boundaries_visible=True)
        self.boundaries_seen += 1

    def _pass(self, x):
        x1, x2, z1, z2 = self._views_and_features(x)
        reg = al.cassle_reg(z1, z2, self.nets.align_proj, self.nets.frozen_theta, x1, x2, self.align_loss)
        trace = self._backprop_and_step(self._ssl(z1, z2), reg, x.shape[0])
        return trace, _PassResult(z1.data, z2.data, x.shape[0])


class ReplayStrategy(Strategy):
    """Stream rows concatenated with ``b_r`` replay rows (ER, CLA-E, CLA-R, CaSSLe-R).

    The SSL loss uses all rows; the regularizer only the replay rows. With an
    empty buffer the pass falls back to stream rows only and the missing
    replay rows are recorded as ledger shortfall.
    """

    def _regularizer(self, z_r1, z_r2, x_r1, x_r2, replay: ReplayBatch) -> Tensor:
        return Tensor(0.0)

    def _pass(self, x):
        replay = self._sample_replay(self.config.b_r)
        n = x.shape[0]
        xs = np.concatenate([x, replay.samples]) if len(replay) else x
        x1, x2, z1, z2 = self._views_and_features(xs)
        reg = Tensor(0.0)
        if len(replay):
            m = xs.shape[0]
            reg = self._regularizer(ad.rows(z1, n, m), ad.rows(z2, n, m), x1[n:], x2[n:], replay)
        # replay rows missing during warm-up are charged as shortfall; a short stream batch is not
        trace = self._backprop_and_step(self._ssl(z1, z2), reg, xs.shape[0], declared=n + self.config.b_r)
        return trace, _PassResult(z1.data, z2.data, n, replay)

    def _after_minibatch(self, x, last: _PassResult):
        n = last.n_stream
        feats = 0.5 * (last.z1[:n] + last.z2[:n]) if self.buffer.store_features else None
        self.buffer.insert_batch(x, feats)


class ExperienceReplay(ReplayStrategy):
    pass


class ClaReplay(ReplayStrategy):
    """CLA-E (EMA targets) and CLA-R (stored-feature targets) on replay rows."""

    def _regularizer(self, z_r1, z_r2, x_r1, x_r2, replay):
        if self.variant == "cla_e":
            ema_update(self.nets.theta, self.nets.ema_theta, self.config.tau)
            return al.cla_e_reg(z_r1, z_r2, self.nets.align_proj, self.nets.ema_theta, x_r1, x_r2)
        return al.cla_r_reg(z_r1, z_r2, self.nets.align_proj, replay.features)

    def _pass(self, x):
        if self.variant == "cla_e" and (self.buffer is None or len(self.buffer) == 0):
            # the twin keeps tracking theta through the cold start
            ema_update(self.nets.theta, self.nets.ema_theta, self.config.tau)
        return super()._pass(x)

    def _after_minibatch(self, x, last):
        super()._after_minibatch(x, last)
        if self.variant == "cla_r" and last.replay is not None and len(last.replay):
            n = last.n_stream
            self.buffer.update_features(last.replay.handles, last.z1[n:], last.z2[n:])


class CassleReplay(ReplayStrategy):
    """CaSSLe-R: snapshot targets on replay views, replay rows only."""

    def on_boundary(self):
        self.nets.frozen_theta = snapshot_frozen(self.nets.theta, boundaries_visible=True)
        self.boundaries_seen += 1

    def _regularizer(self, z_r1, z_r2, x_r1, x_r2, replay):
        return al.cassle_r_reg(z_r1, z_r2, self.nets.align_proj, self.nets.frozen_theta, x_r1, x_r2,
                               self.align_loss)


class Lump(Strategy):
    """Mixup of each stream sample with a replayed exemplar, ``b = b_s``."""

    def _pass(self, x):
        replay = self._sample_replay(x.shape[0])
        lam = float(self.mix_rng.beta(self.config.lump_alpha, self.config.lump_alpha))
        if self.config.lump_lambda is not None:
            lam = float(self.config.lump_lambda)
        mixed = lam * x + (1.0 - lam) * replay.samples if len(replay) else x
        _, _, z1, z2 = self._views_and_features(mixed)
        trace = self._backprop_and_step(self._ssl(z1, z2), Tensor(0.0), x.shape[0])
        return trace, _PassResult(z1.data, z2.data, x.shape[0])

    def _after_minibatch(self, x, last):
        feats = 0.5 * (last.z1 + last.z2) if self.buffer.store_features else None
        self.buffer.insert_batch(x, feats)


_CLASSES = {
    "finetune": Finetune,
    "er": ExperienceReplay,
    "lump": Lump,
    "cla_b": ClaB,
    "cla_e": ClaReplay,
    "cla_r": ClaReplay,
    "cassle": Cassle,
    "cassle_r": CassleReplay,
}


def make_strategy(config: StrategyConfig, input_dim: int, augment: AugmentationPolicy | None = None,
                  ledger: BudgetLedger | None = None, nets: NetworkSet | None = None) -> Strategy:
    return _CLASSES[config.name](config, input_dim, augment, ledger, nets)


@dataclass
class IidResult:
    traces: list[StepTrace] = field(default_factory=list)
    epochs_started: int = 0


def train_iid(strategy: Strategy, inputs: np.ndarray, b: int, target_cbp: int,
              rng: np.random.Generator, n_epochs: int | None = None, on_step=None) -> IidResult:
    """Plain SSL on reshuffled i.i.d. minibatches of ``b`` rows until the budget is spent.

    Steps are taken while one more step fits in ``target_cbp``, so the
    strategy's ledger ends within one step (``n_v * b``) below the target.
    ``n_epochs`` caps the schedule; by default it runs as many epochs as the
    budget needs.
    """
    from .stream import iid_schedule

    result = IidResult()
    granule = N_VIEWS * b
    spent = strategy.ledger.backward_examples
    start = spent
    per_epoch = inputs.shape[0] // b
    for i, xb in enumerate(iid_schedule(inputs, b, n_epochs, rng)):
        if spent - start + granule > target_cbp:
            break
        if i % per_epoch == 0:
            result.epochs_started += 1
        _, _, z1, z2 = strategy._views_and_features(xb)
        trace = strategy._backprop_and_step(strategy._ssl(z1, z2), Tensor(0.0), b, declared=b)
        spent = strategy.ledger.backward_examples
        result.traces.append(trace)
        if on_step is not None:
            on_step(trace)
    return result
