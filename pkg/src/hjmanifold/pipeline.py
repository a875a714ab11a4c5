"""Run configuration and the staged computation behind the CLI."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np

from .controller import draw_samples, fit_polynomial, simulate_many
from .exceptions import UsageError
from .extension import extend_manifold, iteration_manifold, negative_time_iteration, project_domain
from .integrators import IntegratorConfig, integrate_many
from .linear import SeparatedSystem
from .picard import GridConfig, build_local_manifold, certify, sample_sphere
from .problems import get_control_problem, get_problem


@dataclass
class RunConfig:
    """Parameters of one pipeline run. ``radius=None`` uses the certified
    radius; ``xi`` (a list of vectors) overrides sphere sampling."""

    problem: str = "exp2d"
    k: int = 3
    xi_count: int = 200
    radius: Optional[float] = 0.12
    xi: Optional[list] = None
    sphere: str = "random"
    T_horizon: Optional[float] = None
    dt: float = 0.01
    h: float = -0.005
    fine_h: float = -1e-3
    delta: float = 1e-4
    t_min: float = -3.8
    domain_t_min: float = -3.5
    comparator_delta: float = 1e-3
    rk45_tol: float = 1e-8
    k_neg: int = 50
    t_neg: float = -3.5
    t_neg_blowup: float = -3.8
    degree: int = 5
    per_curve: int = 10
    constrain_origin: bool = True
    x0: list = field(default_factory=lambda: [[4.0, 3.6], [-5.0, 4.0]])
    t_final: float = 10.0
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        for name in ("k", "k_neg"):
            if getattr(self, name) < 0:
                raise UsageError(f"{name} must be non-negative")
        for name in ("xi_count", "per_curve", "degree", "threads"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be at least 1")
        for name in ("dt", "delta", "comparator_delta", "rk45_tol", "t_final"):
            if not getattr(self, name) > 0:
                raise UsageError(f"{name} must be positive")
        if self.radius is not None and not self.radius >= 0:
            raise UsageError("radius must be non-negative")
        for name in ("h", "fine_h"):
            if not getattr(self, name) < 0:
                raise UsageError(f"{name} must be negative (backward extension)")
        for name in ("t_min", "domain_t_min", "t_neg", "t_neg_blowup"):
            if getattr(self, name) > 0:
                raise UsageError(f"{name} must be <= 0")
        if self.sphere not in ("random", "equispaced"):
            raise UsageError("sphere must be 'random' or 'equispaced'")

    @classmethod
    def from_sources(cls, path=None, **overrides) -> "RunConfig":
        """Defaults, then the JSON file at ``path``, then non-None overrides."""
        data = {}
        if path is not None:
            try:
                data = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise UsageError(f"cannot read config {path}: {exc}") from exc
            if not isinstance(data, dict):
                raise UsageError("config file must hold a JSON object")
        data.update({k: v for k, v in overrides.items() if v is not None})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {unknown}")
        return cls(**data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class Pipeline:
    """Stages computed lazily and cached, all randomness from one generator
    seeded by ``config.seed`` (xi sampling first, then sample times)."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.rng = np.random.default_rng(config.seed)

    @cached_property
    def control_problem(self):
        return get_control_problem(self.config.problem)

    @cached_property
    def problem(self):
        return get_problem(self.config.problem)

    @cached_property
    def separated(self):
        return SeparatedSystem.from_problem(self.problem)

    @property
    def grid(self):
        return GridConfig(dt=self.config.dt, T_horizon=self.config.T_horizon)

    @cached_property
    def certificate(self):
        prob = self.problem
        if prob.lipschitz is None or prob.decay is None:
            return None
        a, b = prob.decay
        base = certify(a, b, prob.lipschitz)
        radius = base.rho if self.config.radius is None else self.config.radius
        return certify(a, b, prob.lipschitz, None, radius)

    @cached_property
    def xis(self):
        cfg = self.config
        if cfg.xi is not None:
            xis = np.atleast_2d(np.asarray(cfg.xi, float))
            if xis.shape[1] != self.problem.d:
                raise UsageError(f"xi must have dimension {self.problem.d}")
            return xis
        radius = cfg.radius if cfg.radius is not None else self.certificate.rho
        return sample_sphere(cfg.xi_count, radius, self.problem.d, self.rng, cfg.sphere)

    @cached_property
    def local(self):
        return build_local_manifold(self.separated, self.xis, self.config.k, self.grid, self.certificate,
                                    threads=self.config.threads)

    def analyze(self) -> dict:
        out = {"problem": self.problem.name, "transform": self.separated.transform.to_dict()}
        if self.certificate is not None:
            out["certificate"] = self.certificate.to_dict()
        return out

    def extend(self, h=None, t_min=None, method="sv_control", delta=None):
        cfg = self.config
        config = IntegratorConfig(h=cfg.h if h is None else h, ham_check_delta=cfg.delta if delta is None else delta,
                                  rk45_rtol=cfg.rk45_tol, rk45_atol=cfg.rk45_tol)
        return extend_manifold(self.problem, self.local, config, cfg.t_min if t_min is None else t_min, method,
                               threads=cfg.threads)

    @cached_property
    def extended(self):
        return self.extend()

    @cached_property
    def fine_manifold(self):
        """SV extension used for the domain and the fit."""
        return self.extend(self.config.fine_h, self.config.domain_t_min)

    # -- comparisons --------------------------------------------------------

    def fig1(self, xi=None) -> dict:
        """Hamiltonian along one curve for the three extension methods.

        Extensions run without the Hamiltonian check so the full series is
        recorded.
        """
        cfg = self.config
        prob, sep = self.problem, self.separated
        if xi is None:
            radius = cfg.radius if cfg.radius is not None else self.certificate.rho
            xi = radius * np.ones(prob.d) / np.sqrt(prob.d)
        xi = np.asarray(xi, float)
        local = build_local_manifold(sep, xi[None, :], cfg.k, self.grid, self.certificate)
        curve = local.curves[0]
        z0 = curve.boundary_point
        n = int(round(cfg.t_min / cfg.h))
        config = IntegratorConfig(h=cfg.h, ham_check_delta=cfg.delta, rk45_rtol=cfg.rk45_tol,
                                  rk45_atol=cfg.rk45_tol)
        sv, rk = (integrate_many(prob, z0[None, :], config, n, m, reference=0.0, check=False)[0]
                  for m in ("sv_control", "rk45"))
        it_short, it_long = (negative_time_iteration(sep, xi[None, :], cfg.k_neg, t, self.grid)[0]
                             for t in (cfg.t_neg, cfg.t_neg_blowup))
        i0 = int(np.searchsorted(curve.t, 0.0))
        series = {}
        for name, tr in (("sv", sv), ("rk45", rk)):
            t = np.concatenate([tr.times[1:][::-1], curve.t[i0:]])
            x = np.concatenate([tr.x[1:][::-1], curve.x[i0:]])
            p = np.concatenate([tr.p[1:][::-1], curve.p[i0:]])
            H = np.concatenate([tr.H_values[1:][::-1], curve.H[i0:]])
            series[name] = (t, x, p, H)
        for name, c in (("iteration", it_short), ("iteration_long", it_long)):
            series[name] = (c.t, c.x, c.p, c.H)
        back = {name: np.abs(s[3][s[0] <= 0]) for name, s in series.items()}
        summary = {
            "xi": xi,
            "sv_max_abs_H": float(np.nanmax(np.abs(series["sv"][3]))),
            "sv_endpoint_abs_H": float(abs(sv.H_values[-1])),
            "sv_steps": n,
            "rk45_endpoint_abs_H": float(abs(rk.H_values[-1])),
            "rk45_max_abs_H": float(np.nanmax(back["rk45"])),
            "rk45_nfev": rk.nfev,
            "rk45_tol": cfg.rk45_tol,
            "iteration_t_neg": cfg.t_neg,
            "iteration_max_abs_H": _nanmax(back["iteration"]),
            "iteration_blowup_time": it_short.blowup_time,
            "iteration_long_t_neg": cfg.t_neg_blowup,
            "iteration_long_max_abs_H": _nanmax(back["iteration_long"]),
            "iteration_long_blowup_time": it_long.blowup_time,
        }
        return {"series": series, "summary": summary}

    def domains(self) -> dict:
        """Projection domains: SV at ``delta``, comparators at ``comparator_delta``."""
        cfg = self.config
        sv = self.fine_manifold
        rk = self.extend(cfg.fine_h, cfg.domain_t_min, "rk45", cfg.comparator_delta)
        it = iteration_manifold(self.separated, self.xis, cfg.k_neg, cfg.domain_t_min, cfg.comparator_delta,
                                self.grid, threads=cfg.threads)
        manifolds = {"sv": sv, "rk45": rk, "iteration": it}
        doms = {name: project_domain(m) for name, m in manifolds.items()}
        return {"manifolds": manifolds, "domains": doms}

    # -- controller ---------------------------------------------------------

    @cached_property
    def samples(self):
        return draw_samples(self.fine_manifold, self.config.per_curve, (self.config.domain_t_min, 0.0), self.rng)

    @cached_property
    def controller(self):
        return fit_polynomial(self.samples, self.config.degree, self.config.constrain_origin)

    def simulate(self, ctrl=None, x0=None):
        cfg = self.config
        ctrl = self.controller if ctrl is None else ctrl
        X0 = np.atleast_2d(np.asarray(cfg.x0 if x0 is None else x0, float))
        return simulate_many(self.control_problem, ctrl, X0, cfg.t_final, threads=cfg.threads)


def _nanmax(a):
    a = np.asarray(a, float)
    if a.size == 0:
        return None
    with np.errstate(invalid="ignore"):
        return float(np.max(np.where(np.isnan(a), np.inf, a)))
