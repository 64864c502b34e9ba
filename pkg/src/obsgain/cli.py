"""``obsgain`` command line: compile -> solve -> select -> validate.

Exit codes: 0 success, 2 configuration/input error, 3 solver not optimal,
4 containment violations.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import warnings


from .certificate import Certificate
from .config import ConfigError, build_problem, load_config, resolved_json
from .gains import GridSpec, export_levelsets, select_gains
from .sdp import solve
from .sdpa import SdpaFormatError, export_sdpa, import_sdpa
from .sos import CertificateError, DualProgramLayout, compile_dual, recover_certificate
from .validate import FingerprintMismatch, ValidationGrids, containment_check, ground_truth

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_CONTAINMENT = 0, 2, 3, 4

SDPA_FILE = "dual.dat-s"
LAYOUT_FILE = "layout.json"
CERT_FILE = "certificate.json"
SOLVER_LOG = "solver.log"
RESOLVED_FILE = "resolved_config.json"

log = logging.getLogger("obsgain")


class InputError(RuntimeError):
    pass


def _dump(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _setup(args):
    cfg = load_config(args.config)
    if getattr(args, "degree", None) is not None:
        cfg["relaxation"]["degree"] = args.degree
    if getattr(args, "k", None) is not None:
        cfg["selector"]["k"] = args.k
    if getattr(args, "grid_e", None) is not None:
        cfg["selector"]["grid_e"] = args.grid_e
    if getattr(args, "grid_l", None) is not None:
        cfg["selector"]["grid_l"] = args.grid_l
    if getattr(args, "threads", None) is not None:
        cfg["selector"]["threads"] = args.threads
    if getattr(args, "steps", None) is not None:
        cfg["validator"]["steps"] = args.steps
    if getattr(args, "seed", None) is not None:
        cfg["validator"]["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        cfg["output"]["dir"] = args.out
    d = cfg["relaxation"]["degree"]
    if d % 2:
        warnings.warn(f"relaxation degree {d} is odd; rounded to {d + 1}", stacklevel=2)
        print(f"warning: degree {d} rounded to {d + 1}", file=sys.stderr)
        cfg["relaxation"]["degree"] = d + 1
    problem = build_problem(cfg)
    out = cfg["output"]["dir"]
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, RESOLVED_FILE), "w") as fh:
        fh.write(resolved_json(cfg))
    return cfg, problem, out


# -- commands --------------------------------------------------------------------
def cmd_compile(args) -> int:
    cfg, problem, out = _setup(args)
    sdp, layout = compile_dual(problem, cfg["relaxation"]["degree"])
    text = export_sdpa(sdp)
    layout.sdpa_sha256 = hashlib.sha256(text.encode()).hexdigest()
    with open(os.path.join(out, SDPA_FILE), "w") as fh:
        fh.write(text)
    manifest = layout.to_manifest()
    manifest["manifest_sha256"] = _digest(manifest)
    _dump(os.path.join(out, LAYOUT_FILE), manifest)
    print(f"degree {layout.degree} (C3 budget {layout.degree_c3}); "
          f"free variables {sdp.num_free} (v {len(layout.v_basis)}, w {len(layout.w_basis)}); "
          f"PSD blocks {len(sdp.blocks)} (largest {max(sdp.blocks)}); "
          f"equality constraints {sdp.num_constraints}")
    for t in layout.templates:
        print(f"  {t.name}: budget {t.budget}, rows {len(t.rows)}, blocks {t.block_sizes}")
    return EXIT_OK


def _load_compiled(out, problem):
    try:
        with open(os.path.join(out, LAYOUT_FILE)) as fh:
            manifest = json.load(fh)
        with open(os.path.join(out, SDPA_FILE)) as fh:
            text = fh.read()
    except OSError as exc:
        raise InputError(f"compiled artifacts missing in {out}: {exc.strerror}; run compile first")
    except json.JSONDecodeError as exc:
        raise InputError(f"checksum error: layout manifest is not valid JSON ({exc})")
    stored = manifest.pop("manifest_sha256", None)
    if stored != _digest(manifest):
        raise InputError("checksum error: layout manifest was modified or corrupted")
    if hashlib.sha256(text.encode()).hexdigest() != manifest.get("sdpa_sha256"):
        raise InputError("checksum error: SDPA file does not match the layout manifest")
    if manifest["fingerprint"] != problem.fingerprint():
        raise InputError("compiled artifacts belong to a different problem (fingerprint mismatch)")
    try:
        sdp = import_sdpa(text)
    except SdpaFormatError as exc:
        raise InputError(f"SDPA file: {exc}")
    return sdp, DualProgramLayout.from_manifest(manifest)


def _write_solver_log(path, sol):
    with open(path, "w") as fh:
        fh.write("iter pobj dobj gap rel_gap primal_eq dual\n")
        for r in sol.log:
            fh.write(" ".join([str(r["iter"])] + [format(r[k], ".6e") for k in
                                                   ("pobj", "dobj", "gap", "rel_gap",
                                                    "primal_eq", "dual")]) + "\n")
        fh.write(f"status {sol.status} iterations {sol.iterations}\n")
        if sol.message:
            fh.write(f"message {sol.message}\n")
        for k in sorted(sol.residuals):
            fh.write(f"residual {k} {sol.residuals[k]:.6e}\n")


def cmd_solve(args) -> int:
    cfg, problem, out = _setup(args)
    sdp, layout = _load_compiled(out, problem)
    sol = solve(sdp, tol=cfg["solver"]["tol"], max_iter=cfg["solver"]["max_iter"])
    _write_solver_log(os.path.join(out, SOLVER_LOG), sol)
    print(f"solver status {sol.status} after {sol.iterations} iterations")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cert = recover_certificate(layout, sol)
    except CertificateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    cert.save(os.path.join(out, CERT_FILE))
    print(f"objective {cert.objective:.12g}; reconstruction residuals "
          + ", ".join(f"{k} {v:.2e}" for k, v in sorted(cert.residuals.items())
                      if not k.endswith("_rel")))
    if sol.status != "optimal":
        print(f"error: solver status {sol.status}: {sol.message}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def _load_cert(path, problem) -> Certificate:
    try:
        cert = Certificate.load(path)
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"cannot read certificate {path}: {exc}")
    if cert.fingerprint != problem.fingerprint():
        raise InputError(f"certificate fingerprint {cert.fingerprint} does not match "
                         f"the configured problem ({problem.fingerprint()})")
    return cert


def cmd_select(args) -> int:
    cfg, problem, out = _setup(args)
    cert = _load_cert(args.certificate or os.path.join(out, CERT_FILE), problem)
    sel = cfg["selector"]
    egrid = GridSpec.over(problem.E, sel["grid_e"])
    lgrid = GridSpec.over(problem.L, sel["grid_l"])
    ranking = select_gains(cert, lgrid, egrid, sel["k"], threads=sel["threads"])
    ranking.to_csv(os.path.join(out, "gains.csv"))
    summary = ranking.summary()
    summary["fingerprint"] = cert.fingerprint
    summary["degree"] = cert.degree
    _dump(os.path.join(out, "selection.json"), summary)
    lstar = dict(zip(problem.l_vars, ranking.selected))
    ecenter = (egrid.lower + egrid.upper) / 2
    export_levelsets(cert, {
        "levelset_e": GridSpec(problem.e_vars, egrid.lower, egrid.upper, egrid.counts,
                               egrid.mask, lstar),
        "levelset_l": GridSpec(problem.l_vars, lgrid.lower, lgrid.upper, lgrid.counts,
                               lgrid.mask, dict(zip(problem.e_vars, ecenter))),
    }, out, egrid, sel["k"])
    print("l* = " + ", ".join(f"{k} = {v:.17g}" for k, v in lstar.items())
          + f"   beta = {summary['selected_beta']:.12g} (argmax set {summary['argmax_count']} points)")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg, problem, out = _setup(args)
    v = cfg["validator"]
    grids = ValidationGrids(v["e_count"], v["l_count"], v["x0_count"], v["steps"],
                            None if v["polar"] == "auto" else v["polar"], v["extra_x0"])
    report = ground_truth(problem, grids, seed=v["seed"])
    report.save(os.path.join(out, "validation.csv"), os.path.join(out, "validation.json"))
    s = report.summary()
    print(f"admissible pairs {s['admissible_pairs']} of {s['e0_samples'] * s['l_samples']}; "
          f"best gain count {s['max_count']} ({s['optimal_gain_count']} gains)")
    cert_path = args.certificate
    if cert_path is None and getattr(args, "use_default_certificate", False):
        cert_path = os.path.join(out, CERT_FILE)
    if cert_path is None:
        return EXIT_OK
    cert = _load_cert(cert_path, problem)
    violations = containment_check(cert, report)
    _dump(os.path.join(out, "containment.json"), {
        "violations": len(violations),
        "tolerance": 1e-6,
        "samples": [{"e0": [float(x) for x in e], "l": [float(x) for x in l], "w": w}
                    for e, l, w in violations[:1000]],
    })
    if violations:
        print(f"containment FAILED: {len(violations)} admissible samples with w_d < 1 - 1e-6")
        return EXIT_CONTAINMENT
    print("containment passed: every admissible sample has w_d >= 1 - 1e-6")
    return EXIT_OK


def cmd_run(args) -> int:
    for step in (cmd_compile, cmd_solve, cmd_select):
        code = step(args)
        if code != EXIT_OK:
            return code
    args.use_default_certificate = True
    return cmd_validate(args)


# -- parser --------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="obsgain", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", help="problem configuration (TOML)")
        sp.add_argument("--out", help="output directory (overrides [output] dir)")
        sp.add_argument("--threads", type=int, help="worker threads for beta evaluation")

    c = sub.add_parser("compile", help="build the SDP and its layout manifest")
    common(c)
    c.add_argument("--degree", type=int)

    s = sub.add_parser("solve", help="solve a compiled SDP and write the certificate")
    common(s)

    sel = sub.add_parser("select", help="rank gains by beta and pick l*")
    common(sel)
    sel.add_argument("--certificate")
    sel.add_argument("--k", type=int)
    sel.add_argument("--grid-e", type=int)
    sel.add_argument("--grid-l", type=int)

    v = sub.add_parser("validate", help="trajectory ground truth and containment check")
    common(v)
    v.add_argument("--certificate")
    v.add_argument("--steps", type=int)
    v.add_argument("--seed", type=int)

    r = sub.add_parser("run", help="compile, solve, select and validate")
    common(r)
    r.add_argument("--degree", type=int)
    r.add_argument("--k", type=int)
    r.add_argument("--grid-e", type=int)
    r.add_argument("--grid-l", type=int)
    r.add_argument("--steps", type=int)
    r.add_argument("--seed", type=int)
    r.set_defaults(certificate=None)
    return p


COMMANDS = {"compile": cmd_compile, "solve": cmd_solve, "select": cmd_select,
            "validate": cmd_validate, "run": cmd_run}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, FingerprintMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
