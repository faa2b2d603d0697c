"""Cumulative-backward-pass (CBP) budget arithmetic and the runtime ledger.

CBP counts examples entering backward: ``n_v`` views times the minibatch
size ``b`` for every training step, with ``n_p * N / b_s`` steps over a
one-pass stream. All arithmetic here is exact integer arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import BudgetBreach, ParityViolation

COMPOSITIONS = ("b_s", "b_r", "b_s+b_r")


@dataclass(frozen=True)
class BudgetSpec:
    n_v: int
    b: int
    b_s: int
    n_p: int
    N: int
    b_r: int = 0
    composition: str = "b_s"
    label: str = ""

    def __post_init__(self):
        for name in ("n_v", "b", "b_s", "n_p", "N"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.b_r < 0:
            raise ValueError("b_r must be non-negative")
        if self.composition not in COMPOSITIONS:
            raise ValueError(f"unknown composition {self.composition!r}")
        declared = {"b_s": self.b_s, "b_r": self.b_r, "b_s+b_r": self.b_s + self.b_r}[self.composition]
        if declared != self.b:
            raise ValueError(f"b={self.b} does not match composition {self.composition} (= {declared})")

    @property
    def granule(self) -> int:
        """Backward examples of one training step: ``n_v * b``."""
        return self.n_v * self.b

    @property
    def divisible(self) -> bool:
        return self.N % self.b_s == 0


def n_steps(spec: BudgetSpec) -> int:
    """``n_p * N / b_s``, floored when ``b_s`` does not divide ``N``."""
    return spec.n_p * (spec.N // spec.b_s)


def cbp(spec: BudgetSpec) -> int:
    return spec.n_v * n_steps(spec) * spec.b


def iid_epochs(spec: BudgetSpec) -> int:
    """``ceil(n_p * b / b_s)`` epochs give an i.i.d. run at least the stream's CBP."""
    return -(-spec.n_p * spec.b // spec.b_s)


def iid_slack(spec: BudgetSpec) -> int:
    """Examples by which ``iid_epochs * N * n_v`` exceeds the CBP (ceiling slack)."""
    return iid_epochs(spec) * spec.N * spec.n_v - spec.n_v * spec.n_p * spec.N * spec.b // spec.b_s


@dataclass
class ParityReport:
    rows: list[dict]
    ok: bool

    def __str__(self):
        lines = [f"{'label':<20} {'composition':<10} {'n_v':>4} {'b':>5} {'n_p':>4} {'cbp':>12}"]
        for r in self.rows:
            lines.append(f"{r['label']:<20} {r['composition']:<10} {r['n_v']:>4} {r['b']:>5} {r['n_p']:>4} "
                         f"{r['cbp']:>12}")
        lines.append("parity: " + ("ok" if self.ok else "VIOLATED"))
        return "\n".join(lines)


def parity_report(specs: list[BudgetSpec]) -> ParityReport:
    rows = [{"label": s.label or f"spec{i}", "composition": s.composition, "n_v": s.n_v, "b": s.b,
             "n_p": s.n_p, "cbp": cbp(s)} for i, s in enumerate(specs)]
    return ParityReport(rows, len({r["cbp"] for r in rows}) <= 1)


def assert_parity(specs: list[BudgetSpec]) -> ParityReport:
    """Raise :class:`ParityViolation` unless every spec has the same CBP."""
    if len(specs) < 2:
        raise ValueError("parity needs at least two specs")
    report = parity_report(specs)
    if not report.ok:
        values = [r["cbp"] for r in report.rows]
        majority = max(set(values), key=values.count)
        offenders = [r["label"] for r in report.rows if r["cbp"] != majority]
        raise ParityViolation(f"CBP differs across strategies: {values}", offenders)
    return report


@dataclass
class BudgetLedger:
    """Running count of examples that entered backward.

    ``shortfall`` accumulates declared-but-unavailable rows (replay rows
    requested from an empty or missing buffer), so that
    ``backward_examples + shortfall`` tracks the declared schedule exactly.
    When ``target_cbp`` is set, exceeding it by more than ``slack`` raises
    immediately.
    """

    target_cbp: int | None = None
    slack: int = 0
    backward_examples: int = 0
    shortfall: int = 0
    calls: int = 0
    history: list[int] = field(default_factory=list, repr=False)

    def record(self, n_v: int, batch: int, declared: int | None = None):
        if n_v <= 0 or batch < 0:
            raise ValueError("n_v must be positive and batch non-negative")
        self.backward_examples += n_v * batch
        if declared is not None and declared > batch:
            self.shortfall += n_v * (declared - batch)
        self.calls += 1
        self.history.append(self.backward_examples)
        if self.target_cbp is not None and self.backward_examples > self.target_cbp + self.slack:
            raise BudgetBreach(
                f"backward examples {self.backward_examples} exceed budget {self.target_cbp} (+{self.slack})")

    @property
    def accounted(self) -> int:
        return self.backward_examples + self.shortfall

    def to_dict(self) -> dict:
        return {"target_cbp": self.target_cbp, "slack": self.slack, "backward_examples": self.backward_examples,
                "shortfall": self.shortfall, "calls": self.calls}

    @classmethod
    def from_dict(cls, d: dict) -> BudgetLedger:
        return cls(d["target_cbp"], d["slack"], d["backward_examples"], d["shortfall"], d["calls"])


def stream_slack(spec: BudgetSpec, short_minibatches: int | None = None) -> int:
    """Extra backward work that kept short stream minibatches may add beyond the floored CBP.

    Each short minibatch is one more training step than ``N // b_s`` accounts
    for. Without an explicit count, a single short final minibatch is assumed
    whenever ``b_s`` does not divide ``N``.
    """
    if short_minibatches is None:
        short_minibatches = 0 if spec.divisible else 1
    return short_minibatches * spec.n_p * spec.granule


@dataclass
class LedgerVerdict:
    ok: bool
    declared: int
    counted: int
    accounted: int
    tolerance: int
    message: str


def ledger_check(ledger: BudgetLedger, spec: BudgetSpec, tolerance: int | None = None,
                 short_minibatches: int | None = None) -> LedgerVerdict:
    """Compare a finished run's ledger with ``cbp(spec)``.

    Counted work above the budget is a breach and raises. Otherwise the run
    passes when counted work plus any recorded shortfall equals the budget:
    exactly when every stream minibatch is full, else within one step per
    short minibatch (see :func:`stream_slack`). An explicit ``tolerance``
    overrides that default.
    """
    declared = cbp(spec)
    tol = stream_slack(spec, short_minibatches) if tolerance is None else tolerance
    over = ledger.backward_examples - declared
    if over > tol:
        raise BudgetBreach(f"counted {ledger.backward_examples} backward examples, declared budget {declared}")
    gap = abs(ledger.accounted - declared)
    ok = gap <= tol
    msg = "ok" if ok else f"accounted {ledger.accounted} differs from declared {declared} by {gap} > {tol}"
    return LedgerVerdict(ok, declared, ledger.backward_examples, ledger.accounted, tol, msg)
