"""Command line driver: tensors, Bloch bands, propagation checks, eps studies.

Every command reads a JSON config (``--config``), writes its outputs into
``--out`` (or ``$STOKES_BLOCH_OUT``) and exits with status 1 when an invariant
exceeds its tolerance, 2 on invalid input.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bloch import (
    FitResult,
    _fit,
    branches_to_csv,
    default_ladder,
    fit_derivatives,
    records_from_csv,
    track_branches,
)
from .cell import DEFAULT_TOLERANCES, check_tensor, homogenized_tensor, solve_cell_problems
from .epsilon import FORCINGS, convergence_study
from .fourier import EllipticityError, ViscosityModel, make_grid, sample_viscosity
from .operators import KINDS, SolverError
from .tensors import (
    PropagationRecord,
    decompose_difference,
    decompose_difference_sym,
    kernel_basis_by_enumeration,
    propagation_residual,
    random_directions,
    reconstruct_from_bloch,
)

log = logging.getLogger("stokes_bloch")

SCHEMA_VERSION = 1

TOLERANCES = dict(
    DEFAULT_TOLERANCES,
    propagation=1e-5,
    reconstruction=1e-5,
    first_derivative=1e-6,
    transverse=1e-9,
    q0_imag=1e-9,
    orthonormality=1e-8,
    slope_min=0.9,
)


@dataclass(frozen=True)
class RunConfig:
    """Validated run configuration.

    JSON keys: ``schema_version`` (must be 1), ``viscosity`` (a viscosity
    model object), ``dimension``, ``resolution``, ``kind``, ``directions``
    (list of vectors) or ``direction_count``, ``delta_ladder`` (list) or
    ``delta0``/``delta_levels``, ``fit_degree``, ``eps_ladder``, ``n_cell``,
    ``forcing`` and ``tolerances``.
    """

    model: ViscosityModel
    dimension: int = 2
    resolution: int = 32
    kind: str = "full_gradient"
    directions: tuple | None = None
    direction_count: int = 16
    delta_ladder: tuple = tuple(default_ladder())
    fit_degree: int = 5
    eps_ladder: tuple = (0.5, 0.25, 0.125, 0.0625)
    n_cell: int = 16
    forcing: str = "mixed"
    tolerances: dict = field(default_factory=lambda: dict(TOLERANCES))

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        version = raw.pop("schema_version", None)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
        known = {
            "viscosity", "dimension", "resolution", "kind", "directions", "direction_count",
            "delta_ladder", "delta0", "delta_levels", "fit_degree", "eps_ladder", "n_cell",
            "forcing", "tolerances",
        }
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = int(raw.get("dimension", 2))
        model = ViscosityModel.from_dict(raw["viscosity"])
        kind = raw.get("kind", "full_gradient")
        if kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        dirs = raw.get("directions")
        if dirs is not None:
            arr = np.asarray(dirs, dtype=float)
            if arr.ndim != 2 or arr.shape[1] != d:
                raise ValueError("directions must be a list of d-vectors")
            norms = np.linalg.norm(arr, axis=1)
            if np.any(norms == 0):
                raise ValueError("zero direction vector")
            dirs = tuple(tuple(float(x) for x in v / n) for v, n in zip(arr, norms))
        if "delta_ladder" in raw:
            ladder = tuple(float(x) for x in raw["delta_ladder"])
        else:
            ladder = tuple(default_ladder(float(raw.get("delta0", 0.1)), int(raw.get("delta_levels", 6))))
        tol = dict(TOLERANCES)
        for k, v in raw.get("tolerances", {}).items():
            if k not in TOLERANCES:
                raise ValueError(f"unknown tolerance {k!r}")
            if not float(v) > 0:
                raise ValueError(f"tolerance {k!r} must be positive")
            tol[k] = float(v)
        forcing = raw.get("forcing", "mixed")
        if forcing not in FORCINGS:
            raise ValueError(f"forcing must be one of {sorted(FORCINGS)}")
        return cls(
            model=model,
            dimension=d,
            resolution=int(raw.get("resolution", 32)),
            kind=kind,
            directions=dirs,
            direction_count=int(raw.get("direction_count", 16)),
            delta_ladder=ladder,
            fit_degree=int(raw.get("fit_degree", 5)),
            eps_ladder=tuple(float(x) for x in raw.get("eps_ladder", (0.5, 0.25, 0.125, 0.0625))),
            n_cell=int(raw.get("n_cell", 16)),
            forcing=forcing,
            tolerances=tol,
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def direction_list(self, seed: int) -> np.ndarray:
        if self.directions is not None:
            return np.asarray(self.directions)
        return random_directions(self.dimension, self.direction_count, seed)

    def echo(self) -> dict:
        return {
            "viscosity": self.model.to_dict(),
            "dimension": self.dimension,
            "resolution": self.resolution,
            "kind": self.kind,
            "delta_ladder": list(self.delta_ladder),
            "fit_degree": self.fit_degree,
            "eps_ladder": list(self.eps_ladder),
            "n_cell": self.n_cell,
            "forcing": self.forcing,
        }


# --------------------------------------------------------------------------
# output helpers
# --------------------------------------------------------------------------


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if np.isfinite(x) else str(x)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(_clean(data), indent=2, sort_keys=True) + "\n")


def _summary(out: Path, command: str, cfg: RunConfig, seed: int, checks: dict, extra: dict) -> int:
    failures = sorted(k for k, v in checks.items() if not v["ok"])
    write_json(
        out / "summary.json",
        {
            "command": command,
            "config": cfg.echo(),
            "seed": seed,
            "tolerances": cfg.tolerances,
            "checks": checks,
            "failures": failures,
            "ok": not failures,
            **extra,
        },
    )
    for name in failures:
        print(f"FAIL {name}: {checks[name]}", file=sys.stderr)
    return 1 if failures else 0


def _check(value, limit, kind="max") -> dict:
    ok = value <= limit if kind == "max" else value >= limit
    return {"value": value, "limit": limit, "ok": bool(ok)}


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def _mu(cfg: RunConfig):
    return sample_viscosity(cfg.model, make_grid(cfg.dimension, cfg.resolution))


def cmd_tensor(cfg: RunConfig, out: Path, jobs: int, seed: int) -> int:
    mu = _mu(cfg)
    sol = solve_cell_problems(mu, cfg.kind, jobs=jobs)
    A = homogenized_tensor(mu, cfg.kind, solution=sol)
    rep = check_tensor(A, sol, cfg.model.mu0, cfg.tolerances, seed=seed)
    data = A.to_json_dict()
    data["report"] = rep.to_json_dict()
    write_json(out / "tensor.json", data)
    t = cfg.tolerances
    checks = {
        "simple_symmetry": _check(rep.simple_symmetry, t["symmetry"]),
        "weak_energy_gap": _check(rep.weak_energy_gap, t["weak_energy"]),
        "divergence": _check(rep.max_divergence, t["divergence"]),
        "legendre_hadamard": _check(rep.lh_margin, rep.lh_bound * (1 - t["lh_relative"]), "min"),
    }
    if rep.full_symmetry is not None:
        checks["full_symmetry"] = _check(rep.full_symmetry, t["symmetry"])
    if rep.trace_identity is not None:
        checks["trace_identity"] = _check(rep.trace_identity, t["trace_identity"])
    return _summary(out, "tensor", cfg, seed, checks, {})


def _compute_branches(cfg: RunConfig, mu, jobs: int, seed: int):
    out = []
    for e in cfg.direction_list(seed):
        br = track_branches(mu, e, cfg.delta_ladder, cfg.kind, jobs=jobs)
        out.append(fit_derivatives(br, cfg.fit_degree))
    return out


def _branch_checks(cfg: RunConfig, branches) -> dict:
    t = cfg.tolerances
    first = max(abs(f.first) / max(abs(f.half_second), 1e-300) for b in branches for f in b.lambda_fits)
    ortho = 0.0
    for b in branches:
        F = np.vstack([b.phi0, np.asarray(b.direction)[None]])
        ortho = max(ortho, float(np.max(np.abs(F @ F.T - np.eye(len(F))))))
    return {
        "first_derivative": _check(first, t["first_derivative"]),
        "transverse_residual": _check(max(float(b.transverse.max()) for b in branches), t["transverse"]),
        "q0_imaginary": _check(max(b.max_q0_imag for b in branches), t["q0_imag"]),
        "phi0_orthonormality": _check(ortho, t["orthonormality"]),
    }


def cmd_bands(cfg: RunConfig, out: Path, jobs: int, seed: int) -> int:
    mu = _mu(cfg)
    branches = _compute_branches(cfg, mu, jobs, seed)
    (out / "branches.csv").write_text(branches_to_csv(branches))
    for b in branches:
        if b.degenerate:
            print(f"WARN degenerate or crossing branches along direction {list(b.direction)}", file=sys.stderr)
    fits = [
        {
            "direction": list(b.direction),
            "m": m + 1,
            "lambda_fit": list(b.lambda_fits[m].coefficients),
            "q0_fit": list(b.q0_fits[m].coefficients),
            "fit_condition": b.lambda_fits[m].condition,
            "fit_residual": b.lambda_fits[m].residual,
            "degenerate": b.degenerate,
        }
        for b in branches
        for m in range(b.count)
    ]
    return _summary(out, "bands", cfg, seed, _branch_checks(cfg, branches), {"fits": fits})


def _records_from_tables(tables, degree: int) -> list[PropagationRecord]:
    recs = []
    for t in tables:
        lf: FitResult = _fit(t.deltas, t.eigenvalues, degree, "relative")
        qf: FitResult = _fit(t.deltas, t.q0.real, degree, "relative")
        recs.append(PropagationRecord(t.direction, t.m, tuple(t.phi0), lf.half_second, qf.half_second))
    return recs


def cmd_propagation(cfg: RunConfig, out: Path, jobs: int, seed: int, branches_csv: Path | None = None) -> int:
    mu = _mu(cfg)
    A = homogenized_tensor(mu, cfg.kind, jobs=jobs)
    if branches_csv is not None:
        text = Path(branches_csv).read_text()
    else:
        text = branches_to_csv(_compute_branches(cfg, mu, jobs, seed))
        (out / "branches.csv").write_text(text)
    records = _records_from_tables(records_from_csv(text), cfg.fit_degree)
    checks_per = [propagation_residual(r, A) for r in records]
    rec = reconstruct_from_bloch(records, cfg.dimension, cfg.kind)
    if cfg.kind == "symmetrized":
        c, resid = decompose_difference_sym(A, rec.tensor.entries, tol=cfg.tolerances["reconstruction"])
        equiv = {"c": c, "residual": resid, "equivalent": resid <= cfg.tolerances["reconstruction"]}
        expected = 1
    else:
        dec = decompose_difference(A, rec.tensor, tol=cfg.tolerances["reconstruction"])
        equiv = dec.to_json_dict()
        expected = kernel_basis_by_enumeration(cfg.dimension).shape[1]
    t = cfg.tolerances
    worst = max(c.worst for c in checks_per)
    report = {
        "records": [
            {
                "direction": list(r.direction),
                "m": r.m,
                "phi0": list(r.phi0),
                "half_lambda2": r.half_lambda2,
                "half_q02": r.half_q02,
                "m_phi": list(r.m_phi),
                "residual": c.residual,
                "eigen_identity": c.eigen_identity,
                "multiplier_identity": c.multiplier_identity,
            }
            for r, c in zip(records, checks_per)
        ],
        "max_residual": worst,
        "reconstruction": {
            "kernel_dim": rec.kernel_dim,
            "expected_kernel_dim": expected,
            "least_squares_residual": rec.residual,
            "equivalence": equiv,
        },
        "tolerances": t,
    }
    write_json(out / "propagation.json", report)
    checks = {
        "propagation": _check(worst, t["propagation"]),
        "kernel_dimension": {"value": rec.kernel_dim, "limit": expected, "ok": rec.kernel_dim == expected},
        "reconstruction_equivalence": _check(float(equiv["residual"]), t["reconstruction"]),
    }
    return _summary(out, "propagation", cfg, seed, checks, {})


def cmd_converge(cfg: RunConfig, out: Path, jobs: int, seed: int) -> int:
    mu = sample_viscosity(cfg.model, make_grid(cfg.dimension, cfg.resolution))
    A = homogenized_tensor(mu, cfg.kind, jobs=jobs)
    rep = convergence_study(
        cfg.model, A, cfg.eps_ladder, d=cfg.dimension, n_cell=cfg.n_cell, kind=cfg.kind,
        forcing=FORCINGS[cfg.forcing], jobs=jobs,
    )
    (out / "converge.csv").write_text(rep.to_csv())
    checks = {
        "monotone": {"value": rep.monotone, "limit": True, "ok": rep.monotone},
        "slope": _check(rep.slope, cfg.tolerances["slope_min"], "min"),
        "uniform_bound": {"value": rep.bounded, "limit": True, "ok": rep.bounded},
    }
    if not rep.monotone:
        print("WARN non-monotone error ladder; the fine resolution may be insufficient", file=sys.stderr)
    return _summary(out, "converge", cfg, seed, checks, {"report": rep.to_json_dict()})


COMMANDS = {"tensor": cmd_tensor, "bands": cmd_bands, "propagation": cmd_propagation, "converge": cmd_converge}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stokes-bloch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--out", type=Path, default=None, help="output directory (default $STOKES_BLOCH_OUT or .)")
        p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "propagation":
            p.add_argument("--branches", type=Path, default=None, help="reuse a branches.csv from `bands`")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if not 0 <= args.seed < 2**64:
        print("error: seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    if args.jobs < 1:
        print("error: --jobs must be positive", file=sys.stderr)
        return 2
    out = args.out or Path(os.environ.get("STOKES_BLOCH_OUT", "."))
    out.mkdir(parents=True, exist_ok=True)
    try:
        cfg = RunConfig.load(args.config)
        kwargs = {"branches_csv": args.branches} if args.command == "propagation" else {}
        return COMMANDS[args.command](cfg, out, args.jobs, args.seed, **kwargs)
    except EllipticityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return 2
    except SolverError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
