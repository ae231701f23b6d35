"""k-search threshold construction and the online charge/discharge policy.

Implements static reservation-price schedules, time-dependent thresholds that
fold in previously activated thresholds plus remaining worst-case bounds,
feasibility-aware thresholds conditioned on the current state of charge,
mid-horizon budget reduction with its two-stage benchmark, and the
perfect-foresight offline optimum used in competitive checks.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

from .market_data import DayPrices, PriceBounds

log = logging.getLogger(__name__)

RATIO_TOL = 1e-10
FEAS_EPS = 1e-9

CHARGE = 1
IDLE = 0
DISCHARGE = -1


@dataclass(frozen=True)
class BatteryParams:
    """Capacity limits, fixed step rate, initial charge, and horizon."""

    e_min: float
    e_max: float
    rate: float
    e0: float
    horizon: int

    def __post_init__(self):
        if self.e_max <= self.e_min:
            raise ValueError("e_max must exceed e_min")
        if not self.e_min <= self.e0 <= self.e_max:
            raise ValueError(f"e0={self.e0} outside [{self.e_min}, {self.e_max}]")
        if self.rate <= 0:
            raise ValueError("rate must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")

    def max_discharges(self, e: float) -> int:
        """How many discharge steps fit between e and e_min."""
        return max(0, math.floor((e - self.e_min) / self.rate + FEAS_EPS))

    def max_charges(self, e: float) -> int:
        """How many charge steps fit between e and e_max."""
        return max(0, math.floor((self.e_max - e) / self.rate + FEAS_EPS))


@dataclass(frozen=True)
class ThresholdSchedule:
    """Static buy (charge) and sell (discharge) reservation prices."""

    charge: tuple[float, ...]
    discharge: tuple[float, ...]
    alpha: float
    omega: float

    def __post_init__(self):
        if self.alpha < 1.0 or self.omega < 1.0:
            raise ValueError("competitive ratios must be >= 1")
        # strictly monotone for ratios above 1; flat schedules are the
        # degenerate alpha == 1 / omega == 1 case
        strict_ch = self.alpha > 1.0
        if any(
            (self.charge[i] <= self.charge[i + 1]) if strict_ch
            else (self.charge[i] < self.charge[i + 1])
            for i in range(len(self.charge) - 1)
        ):
            raise ValueError("charge thresholds must be decreasing")
        strict_dis = self.omega > 1.0
        if any(
            (self.discharge[i] >= self.discharge[i + 1]) if strict_dis
            else (self.discharge[i] > self.discharge[i + 1])
            for i in range(len(self.discharge) - 1)
        ):
            raise ValueError("discharge thresholds must be increasing")
        # overlapping books (u_1 >= l_1) are structural for ratio-derived
        # schedules with k >= 2; charging wins the overlap by policy order
        if self.charge and self.discharge and self.charge[0] >= self.discharge[0]:
            log.debug(
                "threshold overlap: u_1=%.4g >= l_1=%.4g; charging wins the overlap",
                self.charge[0],
                self.discharge[0],
            )


@dataclass(frozen=True)
class PolicyState:
    """Full state of the online policy: counters, budgets, SoC, activations.

    ``activated_ch`` / ``activated_dis`` hold (threshold value, time) pairs in
    activation order.  ``retired_*`` keep pre-reduction history for reporting
    after :func:`reduce_k` restarts a side as a fresh search.
    """

    t: int
    e: float
    j_next: int
    i_next: int
    k_ch: int
    k_dis: int
    activated_ch: tuple[tuple[float, int], ...] = ()
    activated_dis: tuple[tuple[float, int], ...] = ()
    retired_ch: tuple[tuple[float, int], ...] = ()
    retired_dis: tuple[tuple[float, int], ...] = ()

    def __post_init__(self):
        if not 1 <= self.j_next <= self.k_ch + 1:
            raise ValueError("j_next outside 1..k_ch+1")
        if not 1 <= self.i_next <= self.k_dis + 1:
            raise ValueError("i_next outside 1..k_dis+1")
        if len(self.activated_ch) != self.j_next - 1:
            raise ValueError("activated_ch length must equal j_next-1")
        if len(self.activated_dis) != self.i_next - 1:
            raise ValueError("activated_dis length must equal i_next-1")

    @property
    def charges_executed(self) -> int:
        return self.j_next - 1

    @property
    def discharges_executed(self) -> int:
        return self.i_next - 1


def initial_state(params: BatteryParams, k_ch: int, k_dis: int) -> PolicyState:
    return PolicyState(t=1, e=params.e0, j_next=1, i_next=1, k_ch=k_ch, k_dis=k_dis)


@dataclass(frozen=True)
class Trajectory:
    """Realized actions, SoC path (including e0), and cash flows.

    Cash flows are signed so discharge revenue is positive and charge cost is
    negative; ``profit`` is their sum.
    """

    actions: tuple[int, ...]
    soc_path: tuple[float, ...]
    cash_flows: tuple[float, ...]
    profit: float

    @property
    def charges(self) -> int:
        return sum(1 for a in self.actions if a == CHARGE)

    @property
    def discharges(self) -> int:
        return sum(1 for a in self.actions if a == DISCHARGE)


def competitive_ratio(
    lambda_min: float,
    lambda_max: float,
    k: int,
    side: str,
    override: float | None = None,
) -> float:
    """Optimal k-search competitive ratio for the given price envelope.

    ``max-search`` solves (M-1)/(r-1) = (1 + r/k)^k and ``min-search`` solves
    (r-1)((1 + 1/(rk))^k - 1) = (M-r)/M for their unique roots r >= 1, with
    M = lambda_max/lambda_min, by bisection to 1e-10.  ``override`` short-cuts
    the equation with a user-supplied ratio.
    """
    if override is not None:
        if override < 1.0:
            raise ValueError("ratio override must be >= 1")
        return float(override)
    if not (math.isfinite(lambda_min) and math.isfinite(lambda_max)):
        raise ValueError("price bounds must be finite")
    if lambda_min <= 0:
        raise ValueError("lambda_min must be positive")
    if lambda_max < lambda_min:
        raise ValueError("lambda_max must be >= lambda_min")
    if k < 1:
        raise ValueError("k must be a positive integer")
    big_m = lambda_max / lambda_min
    if big_m <= 1.0 + 1e-15:
        return 1.0

    if side == "max-search":
        def excess(r: float) -> float:
            return (r - 1.0) * (1.0 + r / k) ** k - (big_m - 1.0)
    elif side == "min-search":
        def excess(r: float) -> float:
            return (r - 1.0) * ((1.0 + 1.0 / (r * k)) ** k - 1.0) - (big_m - r) / big_m
    else:
        raise ValueError(f"unknown side {side!r}")

    lo, hi = 1.0, big_m
    while hi - lo > RATIO_TOL:
        mid = 0.5 * (lo + hi)
        if excess(mid) > 0.0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def static_charge_thresholds(lambda_max: float, alpha: float, k_ch: int) -> list[float]:
    """u_j = lambda_max * [1 - (1 - 1/alpha)(1 + 1/(alpha*k))^(j-1)], j = 1..k."""
    if alpha < 1.0:
        raise ValueError("alpha must be >= 1")
    if k_ch < 1:
        raise ValueError("k_ch must be >= 1")
    if lambda_max <= 0:
        raise ValueError("lambda_max must be positive")
    shrink = 1.0 - 1.0 / alpha
    growth = 1.0 + 1.0 / (alpha * k_ch)
    return [lambda_max * (1.0 - shrink * growth ** (j - 1)) for j in range(1, k_ch + 1)]


def static_discharge_thresholds(lambda_min: float, omega: float, k_dis: int) -> list[float]:
    """l_i = lambda_min * [1 + (omega - 1)(1 + omega/k)^(i-1)], i = 1..k."""
    if omega < 1.0:
        raise ValueError("omega must be >= 1")
    if k_dis < 1:
        raise ValueError("k_dis must be >= 1")
    if lambda_min <= 0:
        raise ValueError("lambda_min must be positive")
    growth = 1.0 + omega / k_dis
    return [lambda_min * (1.0 + (omega - 1.0) * growth ** (i - 1)) for i in range(1, k_dis + 1)]


def build_schedule(
    bounds: PriceBounds,
    k_ch: int,
    k_dis: int,
    alpha: float | None = None,
    omega: float | None = None,
) -> ThresholdSchedule:
    """Static schedule for both sides from a price envelope."""
    alpha = alpha if alpha is not None else (
        competitive_ratio(bounds.lambda_min, bounds.lambda_max, k_ch, "min-search")
        if k_ch >= 1
        else 1.0
    )
    omega = omega if omega is not None else (
        competitive_ratio(bounds.lambda_min, bounds.lambda_max, k_dis, "max-search")
        if k_dis >= 1
        else 1.0
    )
    u = static_charge_thresholds(bounds.lambda_max, alpha, k_ch) if k_ch >= 1 else []
    l = static_discharge_thresholds(bounds.lambda_min, omega, k_dis) if k_dis >= 1 else []
    return ThresholdSchedule(tuple(u), tuple(l), alpha, omega)


def _timedep_side(
    activated_sum: float,
    n_needed: int,
    z_sorted: list[float],
    pad_value: float | None,
) -> float:
    if len(z_sorted) < n_needed:
        if pad_value is None:
            raise ValueError(
                f"insufficient bound entries: need {n_needed}, have {len(z_sorted)}"
            )
        z_sorted = z_sorted + [pad_value] * (n_needed - len(z_sorted))
    return activated_sum + sum(z_sorted[:n_needed])


def timedep_thresholds(
    state: PolicyState,
    bounds: PriceBounds,
    alpha: float,
    omega: float,
    pad: bool = False,
) -> tuple[float | None, float | None]:
    """Time-dependent next thresholds from activations plus remaining bounds.

    u_next = (1/(alpha*k_ch)) * (sum of activated u* + top k_ch-(j-1) remaining
    upper bounds); l_next = (omega/k_dis) * (sum of activated l* + bottom
    k_dis-(i-1) remaining lower bounds).  A side with exhausted budget is
    inactive (None).  With ``pad`` the bound lists are extended with the
    global scalar envelope when the remaining horizon is shorter than the
    remaining budget (the no-prediction fallback); otherwise that raises.
    """
    z_min_sorted, z_max_sorted = bounds.remaining(state.t)
    u_next = None
    l_next = None
    if state.k_ch >= 1 and state.j_next <= state.k_ch:
        total = _timedep_side(
            sum(v for v, _ in state.activated_ch),
            state.k_ch - (state.j_next - 1),
            z_max_sorted,
            bounds.lambda_max if pad else None,
        )
        u_next = total / (alpha * state.k_ch)
    if state.k_dis >= 1 and state.i_next <= state.k_dis:
        total = _timedep_side(
            sum(v for v, _ in state.activated_dis),
            state.k_dis - (state.i_next - 1),
            z_min_sorted,
            bounds.lambda_min if pad else None,
        )
        l_next = omega * total / state.k_dis
    return u_next, l_next


def feasible_discharge_count(params: BatteryParams, e: float) -> int:
    """Maximum discharge actions feasible from SoC e: floor((e - e_min)/P)."""
    if not params.e_min - FEAS_EPS <= e <= params.e_max + FEAS_EPS:
        raise ValueError(f"SoC {e} outside capacity")
    return params.max_discharges(e)


def feasible_charge_count(params: BatteryParams, e: float) -> int:
    """Mirror of :func:`feasible_discharge_count`: floor((e_max - e)/P)."""
    if not params.e_min - FEAS_EPS <= e <= params.e_max + FEAS_EPS:
        raise ValueError(f"SoC {e} outside capacity")
    return params.max_charges(e)


def feasibility_aware_thresholds(
    state: PolicyState,
    params: BatteryParams,
    bounds: PriceBounds,
    alpha: float,
    omega: float,
) -> tuple[float | None, float | None]:
    """Thresholds restricted to feasible SoC trajectories from (t, e).

    The effective budget on each side becomes K_rem = min(remaining budget,
    capacity-limited action count, remaining horizon) and the bound lists keep
    only slots that admit at least one feasible action of that type on some
    feasible path.  K_rem = 0 marks the side inactive.
    """
    t, e = state.t, state.e
    slots_left = params.horizon - t + 1
    down = params.max_discharges(e)
    up = params.max_charges(e)

    u_next = None
    l_next = None

    if state.k_ch >= 1 and state.j_next <= state.k_ch:
        k_rem = min(state.k_ch - (state.j_next - 1), up, max(slots_left, 0))
        if k_rem >= 1:
            feas_upper = [
                bounds.slot(tau)[1]
                for tau in range(t, params.horizon + 1)
                if up + min(tau - t, down) >= 1
            ]
            feas_upper.sort(reverse=True)
            if len(feas_upper) < k_rem:
                raise ValueError("insufficient feasible bound entries on charge side")
            total = sum(v for v, _ in state.activated_ch) + sum(feas_upper[:k_rem])
            u_next = total / (alpha * k_rem)

    if state.k_dis >= 1 and state.i_next <= state.k_dis:
        k_rem = min(state.k_dis - (state.i_next - 1), down, max(slots_left, 0))
        if k_rem >= 1:
            feas_lower = [
                bounds.slot(tau)[0]
                for tau in range(t, params.horizon + 1)
                if down + min(tau - t, up) >= 1
            ]
            feas_lower.sort()
            if len(feas_lower) < k_rem:
                raise ValueError("insufficient feasible bound entries on discharge side")
            total = sum(v for v, _ in state.activated_dis) + sum(feas_lower[:k_rem])
            l_next = omega * total / k_rem
    return u_next, l_next


def step_policy(
    state: PolicyState,
    params: BatteryParams,
    lambda_t: float,
    u_next: float | None,
    l_next: float | None,
) -> tuple[int, PolicyState]:
    """One policy step on the revealed price; charge is checked first.

    Ties at exact threshold equality trigger the action.  A crossed threshold
    whose capacity check fails is treated as idle and the counter is not
    advanced.
    """
    can_charge = (
        state.j_next <= state.k_ch
        and u_next is not None
        and lambda_t <= u_next
        and state.e + params.rate <= params.e_max + FEAS_EPS
    )
    if can_charge:
        new = replace(
            state,
            t=state.t + 1,
            e=min(state.e + params.rate, params.e_max),
            j_next=state.j_next + 1,
            activated_ch=state.activated_ch + ((u_next, state.t),),
        )
        return CHARGE, new
    can_discharge = (
        state.i_next <= state.k_dis
        and l_next is not None
        and lambda_t >= l_next
        and state.e - params.rate >= params.e_min - FEAS_EPS
    )
    if can_discharge:
        new = replace(
            state,
            t=state.t + 1,
            e=max(state.e - params.rate, params.e_min),
            i_next=state.i_next + 1,
            activated_dis=state.activated_dis + ((l_next, state.t),),
        )
        return DISCHARGE, new
    return IDLE, replace(state, t=state.t + 1)


def _thresholds_for(
    state: PolicyState,
    params: BatteryParams,
    mode: str,
    bounds: PriceBounds,
    schedule: ThresholdSchedule | None,
    alpha: float,
    omega: float,
) -> tuple[float | None, float | None]:
    if mode == "static":
        u = schedule.charge[state.j_next - 1] if state.j_next <= state.k_ch else None
        l = schedule.discharge[state.i_next - 1] if state.i_next <= state.k_dis else None
        return u, l
    if mode == "timedep":
        return timedep_thresholds(state, bounds, alpha, omega, pad=True)
    if mode == "feasibility":
        return feasibility_aware_thresholds(state, params, bounds, alpha, omega)
    raise ValueError(f"unknown threshold mode {mode!r}")


def run_policy(
    day: DayPrices,
    params: BatteryParams,
    k_ch: int,
    k_dis: int,
    threshold_mode: str,
    bounds: PriceBounds,
    alpha: float | None = None,
    omega: float | None = None,
) -> Trajectory:
    """Execute the online policy on one realized price day.

    Ratios default to the k-search equations on the envelope in ``bounds``;
    pass ``alpha``/``omega`` to override.  The trajectory never forces trades;
    end-of-horizon behavior belongs to the reachability layer.
    """
    if len(day.values) != params.horizon:
        raise ValueError(
            f"day has {len(day.values)} slots but params.horizon={params.horizon}"
        )
    if k_ch < 0 or k_dis < 0:
        raise ValueError("budgets must be non-negative")
    if threshold_mode in ("timedep", "feasibility") and (
        bounds.t_start > 1 or bounds.horizon < params.horizon
    ):
        raise ValueError(
            f"bounds cover slots {bounds.t_start}..{bounds.horizon} but the day "
            f"spans 1..{params.horizon}"
        )
    alpha = alpha if alpha is not None else (
        competitive_ratio(bounds.lambda_min, bounds.lambda_max, k_ch, "min-search")
        if k_ch >= 1
        else 1.0
    )
    omega = omega if omega is not None else (
        competitive_ratio(bounds.lambda_min, bounds.lambda_max, k_dis, "max-search")
        if k_dis >= 1
        else 1.0
    )
    schedule = None
    if threshold_mode == "static":
        schedule = build_schedule(bounds, k_ch, k_dis, alpha, omega)

    state = initial_state(params, k_ch, k_dis)
    actions: list[int] = []
    soc = [params.e0]
    cash: list[float] = []
    for lam in day.values:
        u, l = _thresholds_for(state, params, threshold_mode, bounds, schedule, alpha, omega)
        action, state = step_policy(state, params, lam, u, l)
        actions.append(action)
        soc.append(state.e)
        cash.append(-action * lam * params.rate)
    return Trajectory(tuple(actions), tuple(soc), tuple(cash), math.fsum(cash))


def reduce_k(state: PolicyState, new_k: int, side: str) -> PolicyState:
    """Shrink one side's budget mid-horizon.

    ``new_k`` equal to the current budget is the identity.  A strict reduction
    restarts that side as a fresh k-search with budget new_k minus the
    activations already executed; executed activations move to the retired
    history for reporting.
    """
    if side not in ("charge", "discharge"):
        raise ValueError(f"unknown side {side!r}")
    executed = state.charges_executed if side == "charge" else state.discharges_executed
    old_k = state.k_ch if side == "charge" else state.k_dis
    if new_k > old_k:
        raise ValueError(f"new_k={new_k} exceeds current budget {old_k}")
    if new_k < executed:
        raise ValueError(f"new_k={new_k} below {executed} already-executed actions")
    if new_k == old_k:
        return state
    k_rem = new_k - executed
    if side == "charge":
        return replace(
            state,
            k_ch=k_rem,
            j_next=1,
            activated_ch=(),
            retired_ch=state.retired_ch + state.activated_ch,
        )
    return replace(
        state,
        k_dis=k_rem,
        i_next=1,
        activated_dis=(),
        retired_dis=state.retired_dis + state.activated_dis,
    )


def offline_opt(
    day: DayPrices,
    params: BatteryParams,
    fixed_k: tuple[int, int] | None = None,
    terminal: str = "cyclic",
) -> tuple[float, Trajectory]:
    """Perfect-foresight optimum by dynamic programming over the SoC lattice.

    Maximizes total profit (discharge revenue positive); with ``fixed_k`` the
    action counts are capped at (k_ch, k_dis).  Ties break toward fewer
    actions, then earlier discharges.

    ``terminal`` picks the benchmark convention: ``cyclic`` (default) requires
    the schedule to end at the initial SoC, so profit measures captured spread
    rather than liquidation of stored energy; ``free`` leaves the terminal SoC
    unconstrained, which is the one-sided k-search benchmark.
    """
    if terminal not in ("cyclic", "free"):
        raise ValueError(f"unknown terminal convention {terminal!r}")
    horizon = len(day.values)
    rate = params.rate
    m_lo = -params.max_discharges(params.e0)
    m_hi = params.max_charges(params.e0)
    k_ch = fixed_k[0] if fixed_k else horizon
    k_dis = fixed_k[1] if fixed_k else horizon

    def moves(state, lam, table):
        """Candidate (value, action) pairs from ``state`` against ``table``.

        Values are (profit, -actions) tuples compared lexicographically; the
        same float expressions are reused in reconstruction so equality is
        exact.
        """
        m, c, d = state
        yield table[(m, c, d)], IDLE
        if d < k_dis and m - 1 >= m_lo:
            down = table[(m - 1, c, d + 1)]
            yield (down[0] + lam * rate, down[1] - 1), DISCHARGE
        if c < k_ch and m + 1 <= m_hi:
            up = table[(m + 1, c + 1, d)]
            yield (up[0] - lam * rate, up[1] - 1), CHARGE

    infeasible = (-math.inf, 0)
    terminal_table = {
        (m, c, d): (0.0, 0) if (terminal == "free" or m == 0) else infeasible
        for m in range(m_lo, m_hi + 1)
        for c in range(k_ch + 1)
        for d in range(k_dis + 1)
    }
    tables = [terminal_table]
    for t in range(horizon - 1, -1, -1):
        lam = day.values[t]
        nxt = tables[-1]
        tables.append({s: max(v for v, _ in moves(s, lam, nxt)) for s in nxt})
    tables.reverse()  # tables[t] = value-to-go before acting at step t (0-based)

    # forward reconstruction; prefer discharge, then idle, then charge
    m, c, d = 0, 0, 0
    actions = []
    soc = [params.e0]
    cash = []
    for t in range(horizon):
        lam = day.values[t]
        target = tables[t][(m, c, d)]
        ranked = sorted(moves((m, c, d), lam, tables[t + 1]), key=lambda va: va[1])
        chosen = next(a for v, a in ranked if v == target)
        if chosen == DISCHARGE:
            m, d = m - 1, d + 1
        elif chosen == CHARGE:
            m, c = m + 1, c + 1
        actions.append(chosen)
        soc.append(params.e0 + m * rate)
        cash.append(-chosen * lam * rate)
    profit = math.fsum(cash)
    return profit, Trajectory(tuple(actions), tuple(soc), tuple(cash), profit)


def compulsory_value(
    traj: Trajectory,
    k_ch: int,
    k_dis: int,
    lambda_min: float,
    lambda_max: float,
    rate: float,
) -> float:
    """Trajectory value under the k-search compulsory-trade convention.

    Unexecuted discharge budget is force-sold at lambda_min and unexecuted
    charge budget force-bought at lambda_max.
    """
    value = traj.profit
    value += (k_dis - traj.discharges) * lambda_min * rate
    value -= (k_ch - traj.charges) * lambda_max * rate
    return value


def competitive_check(
    alg_value: float | Trajectory,
    opt_value: float,
    ratio: float,
    *,
    compulsory: bool = False,
    k_ch: int = 0,
    k_dis: int = 0,
    lambda_min: float | None = None,
    lambda_max: float | None = None,
    rate: float = 1.0,
    side: str = "max",
    tol: float = 1e-9,
) -> tuple[bool, float]:
    """Does the online value satisfy its competitive guarantee against OPT?

    ``max`` side checks revenue >= opt/ratio; ``min`` side checks cost <=
    ratio*opt.  Returns (holds, achieved ratio) where the achieved ratio is
    opt/value for max and value/opt for min, so holds iff achieved <= ratio
    within tolerance.
    """
    if isinstance(alg_value, Trajectory):
        if compulsory:
            if lambda_min is None or lambda_max is None:
                raise ValueError("compulsory trades need lambda_min and lambda_max")
            value = compulsory_value(alg_value, k_ch, k_dis, lambda_min, lambda_max, rate)
        else:
            value = alg_value.profit
        if side == "min":
            value = -value
    else:
        value = float(alg_value)
    if side == "max":
        holds = value >= opt_value / ratio - tol
        achieved = opt_value / value if value > 0 else math.inf
    elif side == "min":
        holds = value <= ratio * opt_value + tol
        achieved = value / opt_value if opt_value > 0 else math.inf
    else:
        raise ValueError(f"unknown side {side!r}")
    return holds, achieved


@dataclass(frozen=True)
class TwoStageResult:
    """Outcome of a mid-horizon discharge-budget reduction run."""

    trajectory: Trajectory
    revenue: float
    benchmark: float
    stage2_ratio: float
    stage1_revenue: float
    executed_stage1: int
    k_rem: int


def run_with_discharge_reduction(
    day: DayPrices,
    params: BatteryParams,
    k_dis: int,
    t_bar: int,
    k_bar: int,
    bounds: PriceBounds,
) -> TwoStageResult:
    """Run the sell-side policy, reducing the budget to ``k_bar`` at ``t_bar``.

    Stage 1 runs the k_dis-search through step t_bar - 1; the reduced search
    restarts fresh with budget k_bar minus executed sales.  The benchmark
    matches stage-1 decisions and takes the offline optimum of the reduced
    subproblem on the remaining steps, with compulsory sales at lambda_min.
    Revenue times the stage-2 ratio must cover the benchmark.
    """
    if not 1 <= t_bar <= params.horizon:
        raise ValueError("t_bar outside horizon")
    omega = competitive_ratio(bounds.lambda_min, bounds.lambda_max, k_dis, "max-search")
    schedule = static_discharge_thresholds(bounds.lambda_min, omega, k_dis)
    state = initial_state(params, 0, k_dis)
    actions: list[int] = []
    cash: list[float] = []
    soc = [params.e0]
    for t in range(1, t_bar):
        lam = day.values[t - 1]
        l = schedule[state.i_next - 1] if state.i_next <= state.k_dis else None
        action, state = step_policy(state, params, lam, None, l)
        actions.append(action)
        soc.append(state.e)
        cash.append(-action * lam * params.rate)
    stage1_revenue = math.fsum(cash)
    executed = state.discharges_executed

    state = reduce_k(state, k_bar, "discharge")
    if k_bar == k_dis:
        # identity reduction: the original search continues untouched
        k_rem = k_dis - executed
        omega2 = omega
        schedule2 = schedule
    else:
        k_rem = state.k_dis
        omega2 = (
            competitive_ratio(bounds.lambda_min, bounds.lambda_max, k_rem, "max-search")
            if k_rem >= 1
            else 1.0
        )
        schedule2 = (
            static_discharge_thresholds(bounds.lambda_min, omega2, k_rem) if k_rem >= 1 else []
        )
    for t in range(t_bar, params.horizon + 1):
        lam = day.values[t - 1]
        l = schedule2[state.i_next - 1] if state.i_next <= state.k_dis else None
        action, state = step_policy(state, params, lam, None, l)
        actions.append(action)
        soc.append(state.e)
        cash.append(-action * lam * params.rate)

    stage2_executed = state.discharges_executed - (executed if k_bar == k_dis else 0)
    traj = Trajectory(tuple(actions), tuple(soc), tuple(cash), math.fsum(cash))
    revenue = traj.profit + (k_rem - stage2_executed) * bounds.lambda_min * params.rate

    remaining = sorted(day.values[t_bar - 1 :], reverse=True)[:k_rem]
    bench_stage2 = (
        math.fsum(remaining) + max(0, k_rem - len(remaining)) * bounds.lambda_min
    ) * params.rate
    benchmark = stage1_revenue + bench_stage2
    return TwoStageResult(
        trajectory=traj,
        revenue=revenue,
        benchmark=benchmark,
        stage2_ratio=omega2,
        stage1_revenue=stage1_revenue,
        executed_stage1=executed,
        k_rem=k_rem,
    )
