"""``deltaproj`` command line: gen-fixtures, project, sweep, verify."""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import dltn
from .config import ProjectorConfig, config_for_budget, parse_kv
from .cost import LlmConfig, Workload, cost_report
from .errors import ConfigError, DeltaProjError
from .numerics import make_rng
from .pipeline import Projector, VisionFeatures, synth_features
from .verify import SUITES, run_suite

DEFAULT_BUDGETS = (576, 144, 64, 36, 16, 4, 1)
CSV_COLUMNS = ("V", "f_vision", "f_proj", "f_prefill", "f_decode", "f_total", "tps_est")
DECODE_SPREAD_MAX = 0.15


class UsageError(Exception):
    pass


def _projector_config(args) -> ProjectorConfig:
    if getattr(args, "config", None):
        return ProjectorConfig.load(args.config)
    return ProjectorConfig.preset(args.preset)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# ---------------------------------------------------------------------------
# gen-fixtures
# ---------------------------------------------------------------------------

def cmd_gen_fixtures(args) -> int:
    cfg = _projector_config(args)
    feats, groups = synth_features(cfg, make_rng(args.seed))
    out = Path(args.out)
    feats.save(out)
    dltn.save(out / "partition.dltn", groups.astype(np.float64))
    _write_text(out / "config.txt", cfg.to_text())
    print(f"wrote fixtures for {cfg.grid_h0}x{cfg.grid_w0}x{cfg.feat_dim} grid, "
          f"{cfg.mem_tokens} summary rows to {out}")
    return 0


# ---------------------------------------------------------------------------
# project
# ---------------------------------------------------------------------------

def sidecar_path(out: Path) -> Path:
    return out.with_suffix(".json")


def cmd_project(args) -> int:
    cfg = _projector_config(args)
    feats = VisionFeatures.load(args.features)
    t0 = time.perf_counter()
    result = Projector(cfg).project(feats)
    wall = {**result.wall_ms, "command": round((time.perf_counter() - t0) * 1e3, 3)}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dltn.save(out, result.tokens)
    meta = result.sidecar()
    meta["wall_ms"] = wall
    _write_text(sidecar_path(out), json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote {result.token_count} tokens x {result.tokens.shape[1]} to {out}")
    return 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def parse_budget_list(text: str) -> list[int]:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise UsageError("empty sweep list")
    try:
        return [int(t) for t in items]
    except ValueError:
        raise UsageError(f"sweep entries must be integers, got {text!r}") from None


def load_sweep_spec(args) -> dict:
    """Merge a spec file (``key = value``) with command-line overrides.

    Recognised keys: budgets, scales, preset, llm_preset, generated,
    text_tokens.  Every budget is checked for reachability here.
    """
    spec = {"preset": "full", "llm_preset": "llm-7b", "generated": "30"}
    if args.spec:
        path = Path(args.spec)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read sweep spec {path}: {exc}") from exc
        kv = parse_kv(text, str(path))
        unknown = sorted(set(kv) - {"budgets", "scales", "preset", "llm_preset", "generated", "text_tokens"})
        if unknown:
            raise ConfigError(f"{path}: unknown sweep keys {unknown}")
        spec.update(kv)
    for key in ("preset", "llm_preset", "budgets", "scales"):
        val = getattr(args, key, None)
        if val is not None:
            spec[key] = val
    if args.config:
        base = ProjectorConfig.load(args.config)
    else:
        base = ProjectorConfig.preset(spec["preset"])
    if "scales" in spec and "budgets" not in spec:
        scales = parse_budget_list(spec["scales"])
        budgets = []
        for s in scales:
            if s < 1 or base.grid_h0 % s or base.grid_w0 % s:
                raise ConfigError(f"scale {s} does not divide the {base.grid_h0}x{base.grid_w0} patch grid")
            budgets.append((base.grid_h0 // s) * (base.grid_w0 // s))
    else:
        budgets = parse_budget_list(spec.get("budgets", ",".join(map(str, DEFAULT_BUDGETS))))
    configs = [config_for_budget(base, v) for v in budgets]
    try:
        generated = int(spec["generated"])
        text_tokens = float(spec["text_tokens"]) if "text_tokens" in spec else None
    except ValueError:
        raise ConfigError("sweep spec: generated/text_tokens must be numeric") from None
    return {
        "configs": configs,
        "llm": LlmConfig.preset(spec["llm_preset"]),
        "preset": spec["preset"] if not args.config else str(args.config),
        "llm_preset": spec["llm_preset"],
        "generated": generated,
        "text_tokens": text_tokens,
    }


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def sweep_rows(spec: dict, strict: bool) -> list[dict]:
    llm = spec["llm"]
    t = llm.prompt_tokens if spec["text_tokens"] is None else spec["text_tokens"]
    rows = []
    for cfg in spec["configs"]:
        w = Workload(t, cfg.num_queries, spec["generated"], cfg.img_h, cfg.img_w, cfg.patch)
        rows.append(cost_report(llm, cfg, w, strict=strict).row())
    rows.sort(key=lambda r: -r["V"])
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow([_fmt(r[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def self_consistency(csv_text: str, check_linear: bool = True) -> list[str]:
    """Re-parse a sweep CSV and check projector linearity and decode near-constancy.

    Strict projector counts include quadratic attention, so linearity is only
    checked for headline numbers.
    """
    problems = []
    parsed = list(csv.DictReader(io.StringIO(csv_text)))
    if not parsed or tuple(parsed[0].keys()) != CSV_COLUMNS:
        return ["CSV header or body missing"]
    v = np.array([float(r["V"]) for r in parsed])
    proj = np.array([float(r["f_proj"]) for r in parsed])
    dec = np.array([float(r["f_decode"]) for r in parsed])
    per_token = proj / v
    if check_linear and np.ptp(per_token) > 1e-9 * np.abs(per_token).max():
        problems.append("f_proj is not linear in V")
    if dec.min() > 0 and (dec.max() - dec.min()) / dec.min() >= DECODE_SPREAD_MAX:
        problems.append("f_decode varies by 15% or more across the sweep")
    return problems


def cmd_sweep(args) -> int:
    spec = load_sweep_spec(args)
    strict = args.strict_flops
    rows = sweep_rows(spec, strict)
    csv_text = rows_to_csv(rows)
    problems = self_consistency(csv_text, check_linear=not strict)
    meta = {
        "version": 1,
        "projector_preset": spec["preset"],
        "llm_preset": spec["llm_preset"],
        "generated": spec["generated"],
        "strict_flops": strict,
        "points": [
            {"V": c.num_queries, "scale": c.scale, "window": c.window, "config_hash": c.config_hash}
            for c in sorted(spec["configs"], key=lambda c: -c.num_queries)
        ],
        "self_consistency": problems or "ok",
    }
    if args.time_projector:
        wall = {}
        for cfg in spec["configs"]:
            desk = config_for_budget(ProjectorConfig.preset("desk"), cfg.num_queries)
            feats, _ = synth_features(desk, make_rng(0))
            t0 = time.perf_counter()
            Projector(desk).project(feats, trace=False)
            wall[str(cfg.num_queries)] = round((time.perf_counter() - t0) * 1e3, 3)
        meta["wall_ms"] = {"label": "desk-scale, indicative", "projector_forward": wall}
    body = csv_text if args.format == "csv" else json.dumps(rows, indent=2) + "\n"
    if args.out:
        out = Path(args.out)
        _write_text(out, body)
        _write_text(out.with_name(out.stem + ".meta.json"), json.dumps(meta, indent=2, sort_keys=True) + "\n")
    else:
        sys.stdout.write(body)
    for p in problems:
        print(f"self-consistency: {p}", file=sys.stderr)
    return 1 if problems else 0


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def cmd_verify(args) -> int:
    report = run_suite(args.suite, args.seed)
    text = report.text()
    sys.stdout.write(text)
    if args.out:
        _write_text(Path(args.out), text)
    if args.json:
        _write_text(Path(args.json), report.to_json())
    return report.exit_code


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deltaproj", description="Low-rank visual projector toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-fixtures", help="write synthetic vision features")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--preset", default="desk")
    g.add_argument("--config", help="projector config file (overrides --preset)")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_fixtures)

    pr = sub.add_parser("project", help="run the projector on a feature fixture")
    pr.add_argument("--config", help="projector config file")
    pr.add_argument("--preset", default="desk")
    pr.add_argument("--features", required=True, help="fixture directory")
    pr.add_argument("--out", required=True, help="output tokens (.dltn); sidecar gets .json")
    pr.set_defaults(func=cmd_project)

    s = sub.add_parser("sweep", help="cost-model sweep over token budgets")
    s.add_argument("--spec", help="sweep spec file")
    s.add_argument("--config", help="projector config file (overrides preset)")
    s.add_argument("--preset", help="projector preset (default full)")
    s.add_argument("--llm-preset", dest="llm_preset")
    s.add_argument("--budgets", help="comma-separated visual token budgets")
    s.add_argument("--scales", help="comma-separated scale factors")
    s.add_argument("--out", help="output file; metadata goes next to it as <stem>.meta.json")
    s.add_argument("--format", choices=("csv", "json"), default="csv")
    s.add_argument("--strict-flops", action="store_true", help="count softmax/norm work and exact projector MACs")
    s.add_argument("--time-projector", action="store_true", help="record desk-scale forward wall time")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("verify", help="run invariant suites")
    v.add_argument("--suite", choices=SUITES + ("all",), default="all")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", help="write the text report here")
    v.add_argument("--json", help="write the JSON report (with runtimes) here")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (DeltaProjError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
