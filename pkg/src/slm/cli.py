"""Batch front end: one experiment per invocation, CSV out, one summary line.

Exit codes: 0 success (whatever the verdict), 1 argument or I/O error,
2 numerical diagnostics error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from typing import Sequence

import numpy as np

from slm import analytics, experiments, htransform, kelvin
from slm.core import DiagnosticsError, RandomSource, grid_from_times, joint_z, mc_reduce
from slm.sde import Family, ProcessModel

Z_CRIT = 3.0


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------
# output


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def emit_csv(rows: Sequence[Sequence], header: Sequence[str], path=None) -> str:
    """Write header plus rows with 17 significant digits and LF endings.

    ``path=None`` returns the text without writing it.
    """
    width = len(header)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        if len(r) != width:
            raise ValueError("rows must match the header width")
        w.writerow([_fmt(v) for v in r])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(text)
    return text


def _verdict(ok: bool) -> str:
    return "PASS" if ok else "FAIL"


# --------------------------------------------------------------------------
# parsing helpers


def parse_times(spec: str) -> np.ndarray:
    """``a,b,c`` or ``lin:a:b:n`` or ``log:a:b:n``."""
    spec = str(spec).strip()
    try:
        if spec.startswith(("lin:", "log:")):
            kind, a, b, n = spec.split(":")
            a, b, n = float(a), float(b), int(n)
            if n < 1 or not b > a:
                raise ValueError
            if kind == "log":
                if a <= 0:
                    raise ValueError
                return np.logspace(math.log10(a), math.log10(b), n)
            return np.linspace(a, b, n)
        vals = np.array([float(p) for p in spec.split(",") if p.strip()])
    except ValueError:
        raise UsageError(f"bad time specification {spec!r}") from None
    if vals.size == 0:
        raise UsageError("empty time specification")
    return vals


def _floats(spec) -> list[float]:
    if isinstance(spec, (list, tuple)):
        return [float(v) for v in spec]
    try:
        return [float(p) for p in str(spec).split(",") if p.strip()]
    except ValueError:
        raise UsageError(f"bad number list {spec!r}") from None


def _model(a) -> ProcessModel:
    fam = Family(a.model)
    if fam is Family.DYSON or fam is Family.BM_FREE:
        return ProcessModel(fam, start=tuple(_floats(a.start)))
    if fam is Family.BESQ:
        d = _floats(a.delta)
        return ProcessModel.besq(d[0] if len(d) == 1 else d, a.x0)
    return ProcessModel(fam, x0=a.x0, sigma=a.sigma)


def _src(a) -> RandomSource:
    if a.seed is None:
        raise UsageError("--seed is required")
    return RandomSource(a.seed)


def _payoff(a):
    k = a.strike
    table = {
        "call": lambda: htransform.call(k),
        "put": lambda: htransform.put(k),
        "sqrt": lambda: htransform.sqrt_payoff,
        "cap": lambda: htransform.capped(k),
        "identity": lambda: (lambda x: np.asarray(x, dtype=float)),
    }
    if a.payoff not in table:
        raise UsageError(f"unknown payoff {a.payoff!r}")
    return table[a.payoff]()


# --------------------------------------------------------------------------
# commands; each returns (header, rows, summary)


def cmd_simulate(a):
    model = _model(a)
    ts = parse_times(a.t)
    ts = ts[ts > 0]
    grid_pts = list(ts)
    if model.family is Family.SPLICED_BUBBLE and ts.max() < 2.0:
        grid_pts.append(2.0)
    batch = model.simulate(grid_from_times(grid_pts), _src(a), a.paths, observe=ts,
                           workers=a.workers)
    rows = []
    for t in ts:
        x = batch.at(t)
        absorbed = mc_reduce(batch.absorbed_by(t), a.seed)
        for c in range(x.shape[1]):
            e = mc_reduce(x[:, c], a.seed)
            rows.append((t, c, e.mean, e.stderr, absorbed.mean))
    last = rows[-x.shape[1]]
    summary = (f"simulate {model.family.value}: E[X(t={last[0]:g})] = "
               f"{last[2]:.6g} ± {last[3]:.2g} (n={a.paths})")
    return ["t", "coord", "mean", "stderr", "absorbed_fraction"], rows, summary


def cmd_defect(a):
    if a.model == "inverse-bes3":
        pair = htransform.inverse_bessel_pair(a.x0)

        def closed(t):
            return 2.0 * analytics.normal_cdf(-a.x0 / math.sqrt(t))
    elif a.model == "gbm":
        pair = htransform.gbm_pair(a.x0, a.sigma)

        def closed(t):
            return 0.0
    else:
        raise UsageError("defect supports --model inverse-bes3 or gbm")
    ts = parse_times(a.t)
    res = htransform.martingale_defect(pair, ts, a.paths, _src(a), a.workers)
    rows = [(t, e.mean, e.stderr, closed(t)) for t, e in res]
    ok = all(abs(joint_z(e, closed(t))) < Z_CRIT for t, e in res)
    t_last, e_last = res[-1]
    summary = (f"defect {a.model}: Q(tau0<=t={t_last:g}) = {e_last.mean:.6g} ± "
               f"{e_last.stderr:.2g} ({htransform.classify_defect(e_last)}); "
               f"closed form within 3 stderr at all t: {_verdict(ok)}")
    return ["t", "defect", "stderr", "closed_form"], rows, summary


def cmd_price(a):
    model = _model(a)
    src = _src(a)
    if a.barriers:
        ts = parse_times(a.t)
        if ts.size != 1:
            raise UsageError("Madan-Yor pricing takes a single --t")
        T = float(ts[0])
        seq = htransform.madan_yor_price(model, a.strike, T, _floats(a.barriers), a.paths,
                                         src.batch(0), a.n_steps, a.workers)
        plain = htransform.european_prices(model, a.strike, [T], "call", a.paths, src.batch(1),
                                           a.workers)[0][1]
        rows = [(b, e.mean, e.stderr) for b, e in seq]
        mono = all(joint_z(seq[i][1], seq[i + 1][1]) < Z_CRIT for i in range(len(seq) - 1))
        gap = joint_z(seq[-1][1], plain)
        summary = (f"madan-yor {model.family.value} K={a.strike:g} T={T:g}: top barrier "
                   f"{seq[-1][1].mean:.6g} ± {seq[-1][1].stderr:.2g}, plain call {plain.mean:.6g}"
                   f" ± {plain.stderr:.2g} (z={gap:.2f}); nondecreasing: {_verdict(mono)}")
        return ["barrier", "price", "stderr"], rows, summary
    ts = parse_times(a.t)
    res = htransform.european_prices(model, a.strike, ts, a.kind, a.paths, src, a.workers)
    rows = [(t, e.mean, e.stderr) for t, e in res]
    drops = [joint_z(res[i][1], res[i + 1][1]) for i in range(len(res) - 1)]
    if a.kind == "put":
        ok = all(z < Z_CRIT for z in drops)
        verdict = f"put nondecreasing in maturity: {_verdict(ok)}"
    else:
        z = joint_z(res[0][1], res[-1][1])
        verdict = f"call at first vs last maturity z={z:.2f}; decreases: {_verdict(z > Z_CRIT)}"
    summary = (f"price {a.kind} {model.family.value} K={a.strike:g}: "
               + ", ".join(f"t={t:g} {e.mean:.6g} ± {e.stderr:.2g}" for t, e in res)
               + f"; {verdict}")
    return ["t", "price", "stderr"], rows, summary


def cmd_term_structure(a):
    ts = parse_times(a.t_grid)
    ts = ts[ts > 0]
    cts = analytics.call_term_structure(a.strike, grid_from_times(ts, include_zero=False))
    rows = list(zip(cts.t_grid.times, cts.values, cts.derivative))
    if cts.threshold is None:
        ok = bool(np.all(cts.derivative < 0))
        summary = (f"term-structure K={a.strike:g}: no threshold (K <= 1/2); "
                   f"h decreasing on grid: {_verdict(ok)}")
    else:
        tail = cts.t_grid.times >= cts.threshold
        ok = bool(np.all(cts.derivative[tail] < 0))
        summary = (f"term-structure K={a.strike:g}: threshold {cts.threshold:.4f}; "
                   f"h decreasing beyond threshold on grid: {_verdict(ok)}")
    return ["t", "h", "dh_dt"], rows, summary


def cmd_verify(a):
    src = _src(a)
    if a.check == "duality":
        tr = htransform.payoff_transform(_payoff(a))
        pair = htransform.inverse_bessel_pair(a.x0)
        rows, ok = [], True
        for j, t in enumerate(parse_times(a.t)):
            r = htransform.dual_expectation(pair, tr, t, a.paths, src.batch(j), a.workers)
            z = joint_z(r.lhs, r.rhs)
            ok &= abs(z) < Z_CRIT
            rows.append((t, r.lhs.mean, r.lhs.stderr, r.rhs.mean, r.rhs.stderr, abs(z)))
        t, lm, _, rm, _, z = rows[-1]
        summary = (f"verify duality {a.payoff} eta={tr.eta:g}: lhs={lm:.6g} rhs={rm:.6g} "
                   f"|lhs-rhs|/se={z:.2f} at t={t:g}: {_verdict(ok)}")
        return ["t", "lhs", "lhs_stderr", "rhs", "rhs_stderr", "abs_z"], rows, summary
    if a.check == "scaling":
        ts = parse_times(a.t)
        t = float(ts[0])
        sc = analytics.bes3_from_zero_scaling_check(t, a.u, a.strike, a.paths, src, a.workers)
        z_id = joint_z(sc.lhs, sc.rhs)
        z_mono = joint_z(sc.earlier, sc.lhs)
        ok = abs(z_id) < Z_CRIT and z_mono > Z_CRIT
        rows = [("lhs_u", sc.lhs.mean, sc.lhs.stderr), ("rhs_scaled_t", sc.rhs.mean, sc.rhs.stderr),
                ("same_strike_t", sc.earlier.mean, sc.earlier.stderr)]
        summary = (f"verify scaling t={t:g} u={a.u:g} K={a.strike:g}: identity "
                   f"z={z_id:.2f}, decrease z={z_mono:.2f}: {_verdict(ok)}")
        return ["quantity", "mean", "stderr"], rows, summary
    raise UsageError(f"unknown check {a.check!r}")


def cmd_examples(a):
    src = _src(a)
    ts = parse_times(a.t)
    if a.which in ("size-biased", "ratio"):
        cfg = experiments.SizeBiasedConfig(a.n, a.x0, ts)
        if a.which == "ratio":
            res = experiments.ratio_martingale_check(cfg, a.paths, src, a.workers)
            rows = [(t, e.mean, e.stderr) for t, e in res]
            ok = all(abs(joint_z(e, 1.0 / a.n)) < Z_CRIT for _, e in res)
            return (["t", "mean", "stderr"], rows,
                    f"examples ratio n={a.n}: constant at 1/n: {_verdict(ok)}")
        res = experiments.size_biased_expectations(cfg, a.paths, src, a.workers)
        rows = [(r.t, r.N.mean, r.N.stderr, r.U.mean, r.U.stderr, r.V.mean, r.V.stderr,
                 r.M.mean, r.M.stderr) for r in res]
        m_ok = all(abs(joint_z(res[i].M, res[i + 1].M)) < Z_CRIT for i in range(len(res) - 1))
        dec = all(joint_z(getattr(res[i], f), getattr(res[i + 1], f)) > Z_CRIT
                  for f in "NUV" for i in range(len(res) - 1))
        return (["t", "N", "N_stderr", "U", "U_stderr", "V", "V_stderr", "M", "M_stderr"], rows,
                f"examples size-biased n={a.n}: M constant {_verdict(m_ok)}; N,U,V strictly "
                f"decreasing {_verdict(dec)}")
    if a.which in ("dyson", "dyson-control"):
        start = _floats(a.start)
        if a.which == "dyson":
            res = experiments.dyson_ratio_expectation(a.m, len(start), start, ts, a.paths, src,
                                                      a.workers)
            ok = all(joint_z(res[i][1], res[i + 1][1]) > Z_CRIT for i in range(len(res) - 1))
            msg = f"examples dyson m={a.m} n={len(start)}: strictly decreasing {_verdict(ok)}"
        else:
            res = experiments.vandermonde_bm_control(start, ts, a.paths, src, a.workers)
            d0 = experiments.vandermonde(start)
            ok = all(abs(joint_z(e, d0)) < Z_CRIT for _, e in res)
            msg = f"examples dyson-control: constant at {d0:.6g} {_verdict(ok)}"
        return ["t", "mean", "stderr"], [(t, e.mean, e.stderr) for t, e in res], msg
    if a.which == "disc-harmonic":
        arc = experiments.DiscArc(a.arc_lo, a.arc_hi)
        x0 = _floats(a.point)
        quad = experiments.disc_harmonic_measure(x0, arc)
        e = experiments.disc_exit_frequencies(x0, [arc], a.paths, src, workers=a.workers)[0]
        z = joint_z(e, quad)
        return (["quadrature", "mc", "mc_stderr"], [(quad, e.mean, e.stderr)],
                f"examples disc-harmonic: quad {quad:.6g} vs MC {e.mean:.6g} ± {e.stderr:.2g} "
                f"(z={z:.2f}): {_verdict(abs(z) < Z_CRIT)}")
    if a.which == "conditioned-exit":
        b1 = experiments.DiscArc(a.arc_lo, a.arc_hi)
        ua = experiments.DiscArc(a.u_lo, a.u_hi)
        res = experiments.conditioned_exit_curve(_floats(a.point), b1, ua, ts, a.paths, src,
                                                 workers=a.workers)
        rows = [(r.t, r.via_rejection.mean, r.via_rejection.stderr, r.via_ptoq.mean,
                 r.via_ptoq.stderr) for r in res]
        agree = all(abs(joint_z(r.via_rejection, r.via_ptoq)) < Z_CRIT for r in res)
        return (["t", "rejection", "rejection_stderr", "ptoq", "ptoq_stderr"], rows,
                f"examples conditioned-exit: estimators agree {_verdict(agree)}")
    raise UsageError(f"unknown example {a.which!r}")


def _unit_fields(d=3):
    f = kelvin.ScalarField
    return {
        "1": f(lambda x: np.ones(x.shape[:-1]), d),
        "x1": f(lambda x: x[..., 0], d),
        "x1x2": f(lambda x: x[..., 0] * x[..., 1], d),
        "r2": f(lambda x: np.sum(x * x, axis=-1), d),
        "r4": f(lambda x: np.sum(x * x, axis=-1) ** 2, d),
    }


def cmd_kelvin(a):
    if a.which == "commutation":
        y = np.array(_floats(a.y))
        hs = [1e-2, 5e-3, 2.5e-3]
        rows, ok = [], True
        for name, u in _unit_fields(y.size).items():
            res = [kelvin.laplacian_commutation_residual(u, y, h) for h in hs]
            order = kelvin.observed_order(res, hs)
            ok &= order >= 1.9
            rows.append((name, *res, order))
        return (["field", "res_h1e-2", "res_h5e-3", "res_h2.5e-3", "order"], rows,
                f"kelvin commutation: observed order >= 1.9 for all fields: {_verdict(ok)}")
    src = _src(a)
    x0 = _floats(a.point)
    if a.which == "inversion":
        cap = a.cap

        def U(x):
            return np.minimum(np.linalg.norm(x, axis=-1), cap)
        ts = parse_times(a.t)
        res = kelvin.conformal_inversion_check(a.radius, x0, U, float(ts[0]), a.paths, src,
                                               workers=a.workers)
        z = joint_z(res.lhs, res.rhs)
        zw = joint_z(res.weight, 1.0)
        rows = [("lhs", res.lhs.mean, res.lhs.stderr), ("rhs", res.rhs.mean, res.rhs.stderr),
                ("weight", res.weight.mean, res.weight.stderr)]
        ok = abs(z) < Z_CRIT and abs(zw) < Z_CRIT
        return (["quantity", "mean", "stderr"], rows,
                f"kelvin inversion: lhs={res.lhs.mean:.6g} rhs={res.rhs.mean:.6g} (z={z:.2f}), "
                f"E[phi]={res.weight.mean:.6g} (z={zw:.2f}): {_verdict(ok)}")
    if a.which == "martingale":
        res = kelvin.inverted_coordinate_means(a.radius, x0, parse_times(a.t), a.paths, src,
                                               workers=a.workers)
        y0 = kelvin.invert_point(np.array(x0))
        rows, ok = [], True
        for t, es in res:
            for i, e in enumerate(es):
                ok &= abs(joint_z(e, y0[i])) < Z_CRIT
                rows.append((t, i, e.mean, e.stderr, y0[i]))
        return (["t", "coord", "mean", "stderr", "start"], rows,
                f"kelvin martingale: reweighted inverted coordinates constant: {_verdict(ok)}")
    raise UsageError(f"unknown kelvin check {a.which!r}")


COMMANDS = {
    "simulate": cmd_simulate,
    "defect": cmd_defect,
    "price": cmd_price,
    "term-structure": cmd_term_structure,
    "verify": cmd_verify,
    "examples": cmd_examples,
    "kelvin": cmd_kelvin,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat JSON file of option values; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--paths", type=int, default=100000)
    common.add_argument("--workers", type=int)
    common.add_argument("--out", help="CSV path (default: standard output)")
    common.add_argument("--t", default="1")
    common.add_argument("--x0", type=float, default=1.0)
    common.add_argument("--sigma", type=float, default=1.0)
    common.add_argument("--strike", type=float, default=0.5)

    p = _Parser(prog="slm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p.commands = sub.choices

    s = sub.add_parser("simulate", parents=[common])
    s.add_argument("--model", default="inverse-bes3", choices=[f.value for f in Family])
    s.add_argument("--delta", default="0")
    s.add_argument("--start", default="-1,0,1")

    s = sub.add_parser("defect", parents=[common])
    s.add_argument("--model", default="inverse-bes3", choices=["inverse-bes3", "gbm"])

    s = sub.add_parser("price", parents=[common])
    s.add_argument("--model", default="inverse-bes3", choices=["inverse-bes3", "gbm", "spliced"])
    s.add_argument("--kind", default="call", choices=["call", "put"])
    s.add_argument("--barriers", help="comma list; switches to barrier-stopped call prices")
    s.add_argument("--n-steps", type=int, default=64)

    s = sub.add_parser("term-structure", parents=[common])
    s.add_argument("--t-grid", default="log:0.01:10:50")

    s = sub.add_parser("verify", parents=[common])
    s.add_argument("check", choices=["duality", "scaling"])
    s.add_argument("--payoff", default="call", choices=["call", "put", "sqrt", "cap", "identity"])
    s.add_argument("--u", type=float, default=4.0)

    s = sub.add_parser("examples", parents=[common])
    s.add_argument("which", choices=["size-biased", "ratio", "dyson", "dyson-control",
                                     "disc-harmonic", "conditioned-exit"])
    s.add_argument("--n", type=int, default=2)
    s.add_argument("--m", type=int, default=2)
    s.add_argument("--start", default="-1,0,1")
    s.add_argument("--point", default="0,0")
    s.add_argument("--arc-lo", type=float, default=0.0)
    s.add_argument("--arc-hi", type=float, default=math.pi)
    s.add_argument("--u-lo", type=float, default=math.pi + 0.2)
    s.add_argument("--u-hi", type=float, default=2 * math.pi - 0.2)

    s = sub.add_parser("kelvin", parents=[common])
    s.add_argument("which", choices=["commutation", "inversion", "martingale"])
    s.add_argument("--point", default="1,0,0")
    s.add_argument("--y", default="0.7,-0.4,0.9", help="evaluation point for commutation")
    s.add_argument("--radius", type=float, default=0.5)
    s.add_argument("--cap", type=float, default=5.0)
    return p


def _parse(argv: Sequence[str]) -> argparse.Namespace:
    pre = _Parser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    argv = list(argv)
    if known.config:
        try:
            with open(known.config, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config must be a flat JSON object")
        cfg = {str(k).replace("-", "_"): v for k, v in cfg.items()}
        positional = [cfg.pop("command", None), cfg.pop("check", None) or cfg.pop("which", None)]
        if not any(tok in COMMANDS for tok in argv):
            argv = [tok for tok in positional if tok is not None] + argv
        parser = build_parser()
        first = parser.parse_args(argv)
        unknown = set(cfg) - set(vars(first))
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        sub = parser.commands[first.command]
        for k, v in cfg.items():
            if isinstance(v, list):
                cfg[k] = ",".join(str(x) for x in v)
        sub.set_defaults(**cfg)
        return parser.parse_args(argv)
    return build_parser().parse_args(argv)


def run(argv: Sequence[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        a = _parse(argv)
        if a.workers is not None and a.workers < 1:
            raise UsageError("--workers must be >= 1")
        if a.paths < 1:
            raise UsageError("--paths must be positive")
        header, rows, summary = COMMANDS[a.command](a)
        text = emit_csv(rows, header, a.out)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DiagnosticsError, FloatingPointError) as exc:
        print(f"numerical diagnostics: {exc}", file=sys.stderr)
        return 2
    except (ValueError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if a.out is None:
        sys.stdout.write(text)
    print(summary)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
