"""Mass-eps particle engines for the super-OU process.

Two engines produce trajectories whose law is the eps-Poissonization of the
superprocess (a Poisson cloud of intensity ``X_t / eps`` with atoms of mass
``eps``):

* :func:`simulate_direct` discretizes ``psi`` itself;
* :func:`simulate_backbone` builds ``Lambda = X~ + I`` from an immortal
  branching OU backbone dressed with subcritical (``psi*``) mass.

Motion is exact: positions are only advanced at a particle's own events and
at snapshot times, by sampling the OU transition kernel.  Events are
processed in synchronized sweeps: every pending particle draws its next
clock ring; particles whose ring falls after the next snapshot are moved to
the snapshot instead (the exponential clock is memoryless, so a fresh clock
is drawn afterwards).  This is the event-driven dynamics with the priority
queue replaced by array sweeps; the sweep count per snapshot interval is the
largest number of events along a single lineage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .branching import (
    DerivedMechanism,
    OffspringLaw,
    ParticleRule,
    backbone_offspring_law,
    discretize,
)
from .moments import AtomicMeasure
from .spectral import MultiIndex, OUParams, SpectralFunction, ou_transition_sample

DEFAULT_CAP = 10_000_000

# particle origin tags
ORIGIN_INITIAL = 0      # initial mass (X in the direct engine, X~ in the backbone engine)
ORIGIN_CONTINUOUS = 1   # grafted at rate 2 beta / eps along the backbone
ORIGIN_JUMP = 2         # discontinuous immigration of mass x_i
ORIGIN_BRANCH = 3       # branch-point immigration
ORIGIN_NAMES = ("initial", "continuous", "jump", "branch")


class PopulationCapError(RuntimeError):
    """The particle count exceeded the configured cap."""

    def __init__(self, t: float, count: int, cap: int, replicate: int | None = None):
        where = "" if replicate is None else f" in replicate {replicate}"
        super().__init__(f"population cap {cap} exceeded ({count} particles){where} before t={t:g}")
        self.t, self.count, self.cap, self.replicate = t, count, cap, replicate


@dataclass(frozen=True)
class Snapshot:
    """Atomic measure at one time: atoms of mass ``eps`` at ``points``."""

    t: float
    points: np.ndarray
    eps: float
    origin: np.ndarray
    n_backbone: int = 0

    @property
    def n_particles(self) -> int:
        return self.points.shape[0]

    @property
    def total_mass(self) -> float:
        return self.eps * self.points.shape[0]

    def measure(self) -> AtomicMeasure:
        return AtomicMeasure(self.points, np.full(self.n_particles, self.eps))

    def select(self, origins: Sequence[int]) -> "Snapshot":
        keep = np.isin(self.origin, origins)
        return Snapshot(self.t, self.points[keep], self.eps, self.origin[keep], self.n_backbone)


@dataclass
class Trajectory:
    t_grid: np.ndarray
    snapshots: list[Snapshot]
    eps: float
    engine: str
    counters: dict = field(default_factory=dict)
    extinct_at: float | None = None
    stopped_at: float | None = None

    @property
    def extinct(self) -> bool:
        return self.extinct_at is not None


def evaluate_functional(snapshot: Snapshot, f: SpectralFunction) -> float:
    """``<f, X_t> = eps * sum_i f(x_i)`` over the snapshot's particles."""
    if snapshot.n_particles == 0:
        return 0.0
    return snapshot.eps * float(np.sum(f(snapshot.points)))


def martingale_track(traj: Trajectory, p, alpha: float, params: OUParams) -> np.ndarray:
    """``H_t^p = e^{-(alpha - |p| b) t} <phi_p, X_t>`` at each snapshot; shape (n, 2)."""
    p = MultiIndex(p)
    phi = SpectralFunction.basis(params, p)
    rate = float(alpha) - p.order * float(params.b)
    return np.array([(s.t, math.exp(-rate * s.t) * evaluate_functional(s, phi)) for s in traj.snapshots])


def init_population(mu: AtomicMeasure, eps: float, rng: np.random.Generator,
                    backbone_rate: float | None = None):
    """Poisson(m_j / eps) particles at each atom; optionally Poisson(lambda* m_j) backbone ones.

    Returns ``(mass_points, backbone_points)``; the second is ``None`` unless
    ``backbone_rate`` (lambda*) is given.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    counts = rng.poisson(mu.masses / eps)
    pts = np.repeat(mu.points, counts, axis=0)
    if backbone_rate is None:
        return pts, None
    bcounts = rng.poisson(backbone_rate * mu.masses)
    return pts, np.repeat(mu.points, bcounts, axis=0)


class _Sweeper:
    """Shared sweep loop.  Kind 0 particles carry mass, kind 1 are backbone."""

    def __init__(self, params: OUParams, rule: ParticleRule, rng: np.random.Generator, cap: int,
                 backbone: "_BackboneEvents | None" = None):
        self.params, self.rule, self.rng, self.cap = params, rule, rng, cap
        self.backbone = backbone
        self.counters = {"sweeps": 0, "mass_events": 0, "backbone_branch": 0,
                         "continuous_immigration": 0, "jump_immigration": 0, "branch_immigration": 0}
        self._no_atoms = not rule.offspring.theta and rule.offspring.k0 == 0

    def _mass_offspring(self, n: int) -> np.ndarray:
        off = self.rule.offspring
        if self._no_atoms:
            p2 = off.w2 / (off.w0 + off.w2)
            return np.where(self.rng.random(n) < p2, 2, 0)
        return off.sample(self.rng, n)

    def advance(self, pos, origin, bpos, t_start: float, t_end: float):
        """Run from ``t_start`` (all positions known there) to ``t_end``."""
        rng, params = self.rng, self.params
        d = params.d
        rate = self.rule.rate
        t0 = np.full(pos.shape[0], t_start)
        out_pos, out_org = [], []
        bt0 = np.full(bpos.shape[0], t_start) if bpos is not None else None
        out_b = []
        while pos.shape[0] or (bpos is not None and bpos.shape[0]):
            self.counters["sweeps"] += 1
            if pos.shape[0]:
                tev = t0 + rng.exponential(1.0 / rate, pos.shape[0])
                fire = tev < t_end
                stay = ~fire
                if stay.any():
                    out_pos.append(ou_transition_sample(pos[stay], t_end - t0[stay], params, rng))
                    out_org.append(origin[stay])
                if fire.any():
                    tf = tev[fire]
                    pf = ou_transition_sample(pos[fire], tf - t0[fire], params, rng)
                    k = self._mass_offspring(tf.size)
                    self.counters["mass_events"] += tf.size
                    pos = np.repeat(pf, k, axis=0)
                    t0 = np.repeat(tf, k)
                    origin = np.repeat(origin[fire], k)
                else:
                    pos, t0, origin = pos[:0], t0[:0], origin[:0]
            if bpos is not None and bpos.shape[0]:
                bpos, bt0, new = self.backbone.sweep(bpos, bt0, t_end, out_b)
                if new is not None:
                    npos, nt0, norg = new
                    pos = np.concatenate([pos, npos])
                    t0 = np.concatenate([t0, nt0])
                    origin = np.concatenate([origin, norg])
            live = pos.shape[0] + sum(a.shape[0] for a in out_pos)
            if live > self.cap:
                raise PopulationCapError(t_end, live, self.cap)
        pos = np.concatenate(out_pos) if out_pos else np.zeros((0, d))
        origin = np.concatenate(out_org) if out_org else np.zeros(0, dtype=np.int8)
        if bpos is not None:
            bpos = np.concatenate(out_b) if out_b else np.zeros((0, d))
        return pos, origin, bpos


class _BackboneEvents:
    """Events of immortal backbone particles: branching and the three immigrations."""

    def __init__(self, dm: DerivedMechanism, params: OUParams, eps: float, law: OffspringLaw,
                 rng: np.random.Generator, counters_owner):
        m = dm.mechanism
        self.params, self.eps, self.law, self.rng = params, eps, law, rng
        self.owner = counters_owner
        self.atom_x = np.array([x for x, _ in m.atoms])
        # per-event-type rates: branching, continuous, one per atom
        rates = [dm.alpha_star, 2.0 * m.beta / eps] + [c * x * math.exp(-dm.lambda_star * x) for x, c in m.atoms]
        self.rates = np.array(rates)
        self.total = float(self.rates.sum())
        self.probs = self.rates / self.total

    def sweep(self, bpos, bt0, t_end, out_b):
        rng, params, eps = self.rng, self.params, self.eps
        counters = self.owner.counters
        tev = bt0 + rng.exponential(1.0 / self.total, bpos.shape[0])
        fire = tev < t_end
        stay = ~fire
        if stay.any():
            out_b.append(ou_transition_sample(bpos[stay], t_end - bt0[stay], params, rng))
        if not fire.any():
            return bpos[:0], bt0[:0], None
        tf = tev[fire]
        pf = ou_transition_sample(bpos[fire], tf - bt0[fire], params, rng)
        kind = rng.choice(self.probs.size, size=tf.size, p=self.probs)
        new_pos, new_t, new_org = [], [], []
        keep = kind != 0  # immigration events leave the backbone particle in place
        br = np.flatnonzero(kind == 0)
        # branching: k daughters plus Poisson(Y / eps) grafted mass particles
        if br.size:
            counters["backbone_branch"] += br.size
            k, y = self.law.sample_with_mass(rng, br.size)
            daughters_pos = np.repeat(pf[br], k, axis=0)
            daughters_t = np.repeat(tf[br], k)
            graft = rng.poisson(y / eps) if np.any(y > 0) else np.zeros(br.size, dtype=np.int64)
            if graft.any():
                counters["branch_immigration"] += int(np.count_nonzero(graft))
                new_pos.append(np.repeat(pf[br], graft, axis=0))
                new_t.append(np.repeat(tf[br], graft))
                new_org.append(np.full(int(graft.sum()), ORIGIN_BRANCH, dtype=np.int8))
        else:
            daughters_pos, daughters_t = pf[:0], tf[:0]
        cont = np.flatnonzero(kind == 1)
        if cont.size:
            counters["continuous_immigration"] += cont.size
            new_pos.append(pf[cont])
            new_t.append(tf[cont])
            new_org.append(np.full(cont.size, ORIGIN_CONTINUOUS, dtype=np.int8))
        jump = np.flatnonzero(kind >= 2)
        if jump.size:
            counters["jump_immigration"] += jump.size
            graft = rng.poisson(self.atom_x[kind[jump] - 2] / eps)
            new_pos.append(np.repeat(pf[jump], graft, axis=0))
            new_t.append(np.repeat(tf[jump], graft))
            new_org.append(np.full(int(graft.sum()), ORIGIN_JUMP, dtype=np.int8))
        bpos = np.concatenate([pf[keep], daughters_pos])
        bt0 = np.concatenate([tf[keep], daughters_t])
        if not new_pos:
            return bpos, bt0, None
        return bpos, bt0, (np.concatenate(new_pos), np.concatenate(new_t), np.concatenate(new_org))


def _check_grid(t_grid) -> np.ndarray:
    t_grid = np.asarray(t_grid, dtype=float).reshape(-1)
    if t_grid.size == 0 or np.any(t_grid < 0) or np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be a nonempty increasing sequence of nonnegative times")
    return t_grid


def _run(sweeper: _Sweeper, pos, bpos, t_grid, eps, engine, stop_mass=None) -> Trajectory:
    origin = np.full(pos.shape[0], ORIGIN_INITIAL, dtype=np.int8)
    snaps, t_now, extinct_at = [], 0.0, None
    d = sweeper.params.d
    for t in t_grid:
        if extinct_at is None and t > t_now:
            pos, origin, bpos = sweeper.advance(pos, origin, bpos, t_now, t)
            t_now = t
        nb = 0 if bpos is None else bpos.shape[0]
        if extinct_at is None and pos.shape[0] == 0 and nb == 0:
            extinct_at = float(t)
        snaps.append(Snapshot(float(t), pos if pos.shape[0] else np.zeros((0, d)), eps, origin, nb))
        if stop_mass is not None and eps * pos.shape[0] > stop_mass:
            return Trajectory(t_grid[:len(snaps)], snaps, eps, engine, dict(sweeper.counters), None, float(t))
    return Trajectory(t_grid, snaps, eps, engine, dict(sweeper.counters), extinct_at)


def simulate_direct(dm: DerivedMechanism, params: OUParams, mu: AtomicMeasure, eps: float, t_grid,
                    rng: np.random.Generator, cap: int = DEFAULT_CAP, stop_mass: float | None = None) -> Trajectory:
    """Mass-eps particles branching by the discretization of ``psi``.

    ``extinct_at`` records the first grid time at which the population was
    found empty (the population is empty from then on).  With ``stop_mass``
    the run ends at the first grid time whose total mass exceeds it
    (``stopped_at``); later extinction then has probability of order
    ``exp(-lambda* stop_mass)``.
    """
    t_grid = _check_grid(t_grid)
    rule = discretize(dm.mechanism, eps)
    pos, _ = init_population(mu, eps, rng)
    return _run(_Sweeper(params, rule, rng, cap), pos, None, t_grid, eps, "direct", stop_mass)


def simulate_backbone(dm: DerivedMechanism, params: OUParams, mu: AtomicMeasure, eps: float, t_grid,
                      rng: np.random.Generator, cap: int = DEFAULT_CAP,
                      offspring_law: OffspringLaw | None = None) -> Trajectory:
    """Backbone decomposition: ``psi*`` mass particles dressing an immortal backbone.

    ``offspring_law`` replaces the backbone law ``p_n`` (used for mutation
    tests); by default it is :func:`backbone_offspring_law`.
    """
    t_grid = _check_grid(t_grid)
    rule = discretize(dm.dual, eps)
    law = offspring_law if offspring_law is not None else backbone_offspring_law(dm)
    pos, bpos = init_population(mu, eps, rng, backbone_rate=dm.lambda_star)
    sweeper = _Sweeper(params, rule, rng, cap)
    sweeper.backbone = _BackboneEvents(dm, params, eps, law, rng, sweeper)
    return _run(sweeper, pos, bpos, t_grid, eps, "backbone")
