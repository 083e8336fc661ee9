"""Exact finite-MDP machinery for cross-task value-difference bounds.

Everything here is computed to linear-solver precision: policy evaluation via
a direct solve of the Bellman system, total-variation / KL distances by direct
summation, and the bound scalars d and M by exhaustive sups over states.
The bound checks are soundness tests: the inequalities are theorems, so any
`satisfied == False` report signals an implementation bug, not a bad instance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError, PreconditionError
from .numkit import seeded_rng

Array = np.ndarray

DIST_TOL = 1e-12
EQUIV_TOL = 1e-9  # gaps below this count as exact equivalence
BOUND_SLACK = 1e-9


@dataclass(frozen=True)
class FiniteMdp:
    """Tabular MDP: transition[s, a, s'], reward[s, a, s'], discount, initial dist."""

    transition: Array
    reward: Array
    gamma: float
    rho0: Array

    def __post_init__(self):
        p = np.asarray(self.transition, dtype=np.float64)
        r = np.asarray(self.reward, dtype=np.float64)
        rho = np.asarray(self.rho0, dtype=np.float64)
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "rho0", rho)
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise DimensionError(f"transition must be [S, A, S], got {p.shape}")
        if r.shape != p.shape:
            raise DimensionError(f"reward shape {r.shape} != transition shape {p.shape}")
        if rho.shape != (p.shape[0],):
            raise DimensionError(f"rho0 shape {rho.shape} != ({p.shape[0]},)")
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if (p < 0).any() or np.abs(p.sum(axis=2) - 1.0).max() > DIST_TOL:
            raise ValueError("each transition row must be a distribution")
        if (rho < 0).any() or abs(rho.sum() - 1.0) > DIST_TOL:
            raise ValueError("rho0 must be a distribution")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def expected_reward(self) -> Array:
        """r(s, a) = sum_s' p(s'|s,a) r(s,a,s')."""
        return np.einsum("sat,sat->sa", self.transition, self.reward)


@dataclass(frozen=True)
class DetPolicy:
    """Deterministic policy: one action index per state."""

    action_of: Array

    def __post_init__(self):
        object.__setattr__(self, "action_of", np.asarray(self.action_of, dtype=np.int64))
        if self.action_of.ndim != 1:
            raise DimensionError("action_of must be a vector indexed by state")

    def __len__(self) -> int:
        return len(self.action_of)


@dataclass(frozen=True)
class StateBijection:
    """Permutation of state indices with its inverse."""

    forward: Array

    def __post_init__(self):
        fwd = np.asarray(self.forward, dtype=np.int64)
        object.__setattr__(self, "forward", fwd)
        if sorted(fwd.tolist()) != list(range(len(fwd))):
            raise ValueError("forward must be a permutation of 0..S-1")
        inv = np.empty_like(fwd)
        inv[fwd] = np.arange(len(fwd))
        object.__setattr__(self, "inverse", inv)

    @classmethod
    def identity(cls, n_states: int) -> "StateBijection":
        return cls(np.arange(n_states))


@dataclass(frozen=True)
class BoundReport:
    d: float
    M: float
    bound: float  # d / (1 - gamma)
    max_observed_gap: float
    satisfied: bool


def _check_policy(mdp: FiniteMdp, pi: DetPolicy) -> None:
    if len(pi) != mdp.n_states:
        raise DimensionError(f"policy covers {len(pi)} states, MDP has {mdp.n_states}")
    if (pi.action_of < 0).any() or (pi.action_of >= mdp.n_actions).any():
        raise DimensionError("policy selects an out-of-range action")


def policy_value(mdp: FiniteMdp, pi: DetPolicy) -> Array:
    """Exact V^pi via the linear solve of V = r_pi + gamma P_pi V."""
    _check_policy(mdp, pi)
    idx = np.arange(mdp.n_states)
    p_pi = mdp.transition[idx, pi.action_of, :]
    r_pi = np.einsum("st,st->s", p_pi, mdp.reward[idx, pi.action_of, :])
    v = np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * p_pi, r_pi)
    return v


def value_iteration(mdp: FiniteMdp, tol: float = 1e-10) -> tuple[Array, DetPolicy]:
    """Optimal values to Bellman residual < tol and the greedy policy
    (ties break to the lowest action index)."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    v = np.zeros(mdp.n_states)
    while True:
        q = np.einsum("sat,sat->sa", mdp.transition, mdp.reward) + mdp.gamma * np.einsum(
            "sat,t->sa", mdp.transition, v
        )
        v_new = q.max(axis=1)
        if np.abs(v_new - v).max() < tol:
            v = v_new
            break
        v = v_new
    q = np.einsum("sat,sat->sa", mdp.transition, mdp.reward) + mdp.gamma * np.einsum("sat,t->sa", mdp.transition, v)
    return v, DetPolicy(q.argmax(axis=1))


def total_variation(p: Array, q: Array) -> float:
    """D_TV for countable supports: half the L1 distance."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError(f"distribution lengths differ: {p.shape} vs {q.shape}")
    return 0.5 * float(np.abs(p - q).sum())


def kl_divergence(p: Array, q: Array) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError(f"distribution lengths differ: {p.shape} vs {q.shape}")
    support = p > 0
    if (q[support] <= 0).any():
        raise DomainError("kl_divergence requires q > 0 wherever p > 0")
    return float(np.sum(p[support] * np.log(p[support] / q[support])))


def _pair_check(mdp_i: FiniteMdp, mdp_j: FiniteMdp) -> None:
    if mdp_i.transition.shape != mdp_j.transition.shape:
        raise DimensionError("the two MDPs must share state and action spaces")
    if mdp_i.gamma != mdp_j.gamma:
        raise PreconditionError("the two MDPs must share gamma")


def theorem1_d(mdp_i: FiniteMdp, mdp_j: FiniteMdp, pi_i: DetPolicy, pi_j: DetPolicy) -> BoundReport:
    """Value-difference bound for general r(s, a) rewards.

    d = sup_s [ |r_j(s, pi_j(s)) - r_i(s, pi_i(s))|
                + 2 gamma M D_TV(p_j(.|s, pi_j(s)), p_i(.|s, pi_i(s))) ]
    with M = sup_s |V^{pi_j}(s)|; the gap |V^{pi_i} - V^{pi_j}| is bounded by
    d / (1 - gamma) at every state.
    """
    _pair_check(mdp_i, mdp_j)
    _check_policy(mdp_i, pi_i)
    _check_policy(mdp_j, pi_j)
    idx = np.arange(mdp_i.n_states)
    v_i = policy_value(mdp_i, pi_i)
    v_j = policy_value(mdp_j, pi_j)
    m = float(np.abs(v_j).max())
    r_i = mdp_i.expected_reward()[idx, pi_i.action_of]
    r_j = mdp_j.expected_reward()[idx, pi_j.action_of]
    p_i = mdp_i.transition[idx, pi_i.action_of, :]
    p_j = mdp_j.transition[idx, pi_j.action_of, :]
    tv = 0.5 * np.abs(p_j - p_i).sum(axis=1)
    d = float((np.abs(r_j - r_i) + 2.0 * mdp_i.gamma * m * tv).max())
    bound = d / (1.0 - mdp_i.gamma)
    gap = float(np.abs(v_i - v_j).max())
    return BoundReport(d=d, M=m, bound=bound, max_observed_gap=gap, satisfied=gap <= bound + BOUND_SLACK)


def _state_state_reward(mdp: FiniteMdp) -> Array:
    """Collapse r[s, a, s'] to r[s, s'], checking action-independence."""
    r = mdp.reward
    if np.abs(r - r[:, :1, :]).max() > EQUIV_TOL:
        raise PreconditionError("reward depends on the action; r(s, s') form required")
    return r[:, 0, :]


def _prop_bound(
    mdp_i: FiniteMdp,
    mdp_j: FiniteMdp,
    pi_i: DetPolicy,
    pi_j: DetPolicy,
    g: StateBijection,
) -> BoundReport:
    """Shared core of the r(s, s') bounds, stated through a state bijection G.

    M = sup_{s, s'} |r_j(s, s') + gamma V^{pi_j}(s')| on the source task,
    d = sup_s 2 M D_TV(p_i(.|s, pi_i(s)), p_j(G(.)|G(s), pi_j(G(s)))), and the
    bound covers |V^{pi_i}(s) - V^{pi_j}(G(s))| at every state. With G the
    identity this is exactly the same-state-space special case.
    """
    idx = np.arange(mdp_i.n_states)
    r_i = _state_state_reward(mdp_i)
    r_j = _state_state_reward(mdp_j)
    if np.abs(r_i - r_j[np.ix_(g.forward, g.forward)]).max() > EQUIV_TOL:
        raise PreconditionError("rewards are not consistent under the state bijection")
    v_i = policy_value(mdp_i, pi_i)
    v_j = policy_value(mdp_j, pi_j)
    m = float(np.abs(r_j + mdp_j.gamma * v_j[np.newaxis, :]).max())
    p_i = mdp_i.transition[idx, pi_i.action_of, :]
    gs = g.forward
    p_j_rows = mdp_j.transition[gs, pi_j.action_of[gs], :]  # row s: p_j(.|G(s), pi_j(G(s)))
    p_j_mapped = p_j_rows[:, gs]  # column s': p_j(G(s')|...)
    tv = 0.5 * np.abs(p_i - p_j_mapped).sum(axis=1)
    d = float((2.0 * m * tv).max())
    bound = d / (1.0 - mdp_i.gamma)
    gap = float(np.abs(v_i - v_j[gs]).max())
    return BoundReport(d=d, M=m, bound=bound, max_observed_gap=gap, satisfied=gap <= bound + BOUND_SLACK)


def prop1_d(mdp_i: FiniteMdp, mdp_j: FiniteMdp, pi_i: DetPolicy, pi_j: DetPolicy) -> BoundReport:
    """Bound for the r(s, s') special case: d = sup_s 2 M D_TV of the two
    next-state rows, M = sup |r(s, s') + gamma V^{pi_j}(s')|."""
    _pair_check(mdp_i, mdp_j)
    _check_policy(mdp_i, pi_i)
    _check_policy(mdp_j, pi_j)
    return _prop_bound(mdp_i, mdp_j, pi_i, pi_j, StateBijection.identity(mdp_i.n_states))


def prop2_verify(
    mdp_i: FiniteMdp,
    mdp_j: FiniteMdp,
    pi_i: DetPolicy,
    pi_j: DetPolicy,
    g: StateBijection,
) -> BoundReport:
    """r(s, s') bound across a state bijection; degenerates to prop1_d when g
    is the identity (bit-exactly: both run the same core)."""
    _pair_check(mdp_i, mdp_j)
    _check_policy(mdp_i, pi_i)
    _check_policy(mdp_j, pi_j)
    if len(g.forward) != mdp_i.n_states:
        raise DimensionError("bijection size does not match the state space")
    return _prop_bound(mdp_i, mdp_j, pi_i, pi_j, g)


def _equivalent_action_mapped(
    mdp_i: FiniteMdp, mdp_j: FiniteMdp, s_i: int, a_j: int, g: StateBijection
) -> tuple[int, float, float]:
    """Search over mdp_i's actions at s_i for the best match to (G(s_i), a_j)
    on mdp_j, comparing next-state rows through the bijection."""
    s_j = int(g.forward[s_i])
    r_i = mdp_i.expected_reward()[s_i]
    r_j = float(mdp_j.expected_reward()[s_j, a_j])
    p_j_mapped = mdp_j.transition[s_j, a_j, g.forward]  # entry s': p_j(G(s')|G(s), a_j)
    best_a, best_score, best_rgap, best_tv = 0, np.inf, 0.0, 0.0
    for a in range(mdp_i.n_actions):
        rgap = abs(float(r_i[a]) - r_j)
        tv = total_variation(mdp_i.transition[s_i, a, :], p_j_mapped)
        score = max(rgap, tv)
        if score < best_score:
            best_a, best_score, best_rgap, best_tv = a, score, rgap, tv
    return best_a, best_rgap, best_tv


def find_equivalent_action(
    mdp_i: FiniteMdp, mdp_j: FiniteMdp, s: int, a_j: int
) -> tuple[int, float, float]:
    """Exhaustive search for the action on mdp_i closest to (s, a_j) on mdp_j.

    Minimizes max(|reward gap|, TV gap); ties break to the lowest action
    index. Zero gaps mean an exactly equivalent action exists.
    """
    _pair_check(mdp_i, mdp_j)
    return _equivalent_action_mapped(mdp_i, mdp_j, s, a_j, StateBijection.identity(mdp_i.n_states))


def brute_force_translate_policy(mdp_i: FiniteMdp, mdp_j: FiniteMdp, pi_j: DetPolicy) -> DetPolicy:
    """Per-state best-equivalent-action transfer of pi_j onto mdp_i."""
    return translate_policy_under_bijection(mdp_i, mdp_j, pi_j, StateBijection.identity(mdp_i.n_states))


def translate_policy_under_bijection(
    mdp_i: FiniteMdp, mdp_j: FiniteMdp, pi_j: DetPolicy, g: StateBijection
) -> DetPolicy:
    """Transfer pi_j onto mdp_i through a state bijection: the action at s_i
    best matches pi_j's action at the corresponding state G(s_i)."""
    _pair_check(mdp_i, mdp_j)
    _check_policy(mdp_j, pi_j)
    actions = [
        _equivalent_action_mapped(mdp_i, mdp_j, s, int(pi_j.action_of[g.forward[s]]), g)[0]
        for s in range(mdp_i.n_states)
    ]
    return DetPolicy(np.array(actions))


def _normalize_rows(p: Array) -> Array:
    return p / p.sum(axis=-1, keepdims=True)


def random_mdp(
    rng: np.random.Generator,
    n_states: int,
    n_actions: int,
    gamma: float = 0.95,
    reward_form: str = "ss",
) -> FiniteMdp:
    """Random dense MDP with Dirichlet(1, ..., 1) transition rows.

    reward_form "ss" draws r(s, s') (replicated over actions); "sas" draws a
    full r(s, a, s') tensor.
    """
    p = _normalize_rows(rng.dirichlet(np.ones(n_states), size=(n_states, n_actions)))
    if reward_form == "ss":
        r_ss = rng.uniform(-1.0, 1.0, size=(n_states, n_states))
        r = np.repeat(r_ss[:, np.newaxis, :], n_actions, axis=1)
    elif reward_form == "sas":
        r = rng.uniform(-1.0, 1.0, size=(n_states, n_actions, n_states))
    else:
        raise ValueError(f"unknown reward_form {reward_form!r}")
    rho0 = rng.dirichlet(np.ones(n_states))
    rho0 = rho0 / rho0.sum()
    return FiniteMdp(transition=p, reward=r, gamma=gamma, rho0=rho0)


def random_mdp_pair(
    seed: int,
    n_states: int,
    n_actions: int,
    perturbation: float,
    gamma: float = 0.95,
    reward_form: str = "ss",
) -> tuple[FiniteMdp, FiniteMdp]:
    """A random MDP and a dynamics-perturbed twin sharing the reward tensor.

    The twin's transition rows are (1 - w) p + w q with q freshly
    Dirichlet-resampled and w = perturbation; perturbation 0 gives a
    bit-identical pair, perturbation 1 gives independent rows.
    """
    if perturbation < 0:
        raise ValueError("perturbation must be non-negative")
    rng = seeded_rng(seed, stream=101)
    base = random_mdp(rng, n_states, n_actions, gamma=gamma, reward_form=reward_form)
    fresh = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    if perturbation == 0.0:
        p2 = base.transition.copy()
    else:
        p2 = _normalize_rows((1.0 - perturbation) * base.transition + perturbation * fresh)
    twin = FiniteMdp(transition=p2, reward=base.reward.copy(), gamma=gamma, rho0=base.rho0.copy())
    return base, twin


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int) -> DetPolicy:
    return DetPolicy(rng.integers(0, n_actions, size=n_states))


def relabel_states(mdp: FiniteMdp, g: StateBijection) -> FiniteMdp:
    """Relabel every state s as G(s); the result is the same MDP up to naming."""
    fwd = g.forward
    p = np.empty_like(mdp.transition)
    r = np.empty_like(mdp.reward)
    p[np.ix_(fwd, np.arange(mdp.n_actions), fwd)] = mdp.transition
    r[np.ix_(fwd, np.arange(mdp.n_actions), fwd)] = mdp.reward
    rho = np.empty_like(mdp.rho0)
    rho[fwd] = mdp.rho0
    return FiniteMdp(transition=p, reward=r, gamma=mdp.gamma, rho0=rho)


def relabel_actions(mdp: FiniteMdp, perm: Array) -> FiniteMdp:
    """Relabel action a as perm[a] everywhere."""
    perm = np.asarray(perm, dtype=np.int64)
    p = np.empty_like(mdp.transition)
    r = np.empty_like(mdp.reward)
    p[:, perm, :] = mdp.transition
    r[:, perm, :] = mdp.reward
    return FiniteMdp(transition=p, reward=r, gamma=mdp.gamma, rho0=mdp.rho0.copy())
