"""Command-line interface: ingest score files, sketch, certify, select,
evaluate, and run repeated experiments.

File formats
------------
Samples: JSON Lines with keys client, y, a, score (one record per sample),
or CSV with the fixed column order client,y,a,score (an optional header
row with exactly those names is skipped).

Every output embeds a provenance header (tool version, config hash, seed):
JSON files in a "provenance" key, JSONL files as their first record, CSV
files as a leading "# provenance: ..." comment line.  Outputs are written
atomically (temp file, then rename) and are byte-identical across reruns
with the same inputs and seed.

Exit status: 0 success, 2 advisory (empty candidate set), 1 failure.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import sys
import tempfile
from pathlib import Path

import click

from . import __version__
from .certify import RankCandidate, SearchStrategy, build_candidate_set
from .domain import (ClientBundle, FairnessSpec, Notion, ScoredSample,
                     StratumKey, build_bundles, estimate_group_probs,
                     estimate_mixture_weights)
from .errors import ConfigError, FedFairError, NoCertifiedClassifierError
from .fedsim import (SamplePool, TrialConfig, evaluate_classifier,
                     reference_model, run_experiment, _needed_strata)
from .orderstat import RngStream
from .selection import LabelShiftTarget, select_optimal

ADVISORY_EXIT = 2


# ---------------------------------------------------------------------------
# i/o helpers


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def provenance(config: dict, seed: int) -> dict:
    digest = hashlib.sha256(canonical_json(config).encode()).hexdigest()
    return {"tool": "fedfair", "version": __version__,
            "config_hash": digest, "seed": seed}


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_samples(path: Path) -> list[ScoredSample]:
    samples = []
    text = path.read_text()
    if path.suffix.lower() == ".csv":
        rows = list(csv.reader(io.StringIO(text)))
        if rows and [c.strip() for c in rows[0]] == ["client", "y", "a", "score"]:
            rows = rows[1:]
        for lineno, row in enumerate(rows, start=1):
            if not row:
                continue
            if len(row) != 4:
                raise ConfigError(f"{path}:{lineno}: expected 4 columns client,y,a,score")
            try:
                samples.append(ScoredSample(int(row[0]), int(row[1]),
                                            int(row[2]), float(row[3])))
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from exc
        return samples
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            samples.append(ScoredSample(int(rec["client"]), int(rec["y"]),
                                        int(rec["a"]), float(rec["score"])))
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from exc
    return samples


def read_bundles(paths) -> list[ClientBundle]:
    bundles = []
    for p in paths:
        payload = json.loads(Path(p).read_text())
        bundles.append(ClientBundle.from_dict(payload.get("bundle", payload)))
    bundles.sort(key=lambda b: b.client)
    params = {(sk.universe_bits, sk.compression)
              for b in bundles for sk in b.sketches.values()}
    if len(params) > 1:
        raise ConfigError(f"bundles mix sketch parameters: {sorted(params)}")
    return bundles


def _bundle_paths(bundle_args) -> list[Path]:
    paths = []
    for arg in bundle_args:
        p = Path(arg)
        if p.is_dir():
            paths.extend(sorted(p.glob("bundle_*.json")))
        else:
            paths.append(p)
    if not paths:
        raise ConfigError("no bundle files given")
    return paths


def _spec_from_options(notion: str, alpha, beta: float, mc: int) -> FairnessSpec:
    return FairnessSpec(Notion(notion), tuple(alpha), beta, mc)


def _fail(exc: BaseException) -> None:
    code = getattr(exc, "code", "error")
    click.echo(f"error [{code}]: {exc}", err=True)
    sys.exit(1)


# ---------------------------------------------------------------------------
# commands


@click.group()
def main():
    """Group-fairness certified thresholds for federated classifier scores."""


@main.command("sketch")
@click.option("--input", "input_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--universe-bits", default=7, show_default=True)
@click.option("--compression", default=300, show_default=True)
@click.option("--mode", type=click.Choice(["exact", "sketch"]), default="exact",
              show_default=True, help="exact keeps sorted scores in the bundles")
def cmd_sketch(input_path, out_dir, universe_bits, compression, mode):
    """Build one bundle file per client from a samples file."""
    try:
        samples = read_samples(input_path)
        bundles = build_bundles(samples, universe_bits, compression,
                                keep_sorted=(mode == "exact"))
        config = {"command": "sketch", "input": str(input_path),
                  "universe_bits": universe_bits, "compression": compression,
                  "mode": mode}
        prov = provenance(config, seed=0)
        for b in bundles:
            payload = {"provenance": prov, "bundle": b.to_dict()}
            atomic_write(out_dir / f"bundle_{b.client}.json",
                         canonical_json(payload) + "\n")
        click.echo(f"wrote {len(bundles)} bundle(s) to {out_dir}")
    except (FedFairError, ValueError) as exc:
        _fail(exc)


def _candidate_record(cand: RankCandidate, mc: int) -> dict:
    se = [math.sqrt(h * (1.0 - h) / mc) for h in cand.h_terms]
    return {
        "global_ranks": {str(a): k for a, k in sorted(cand.global_ranks.items())},
        "local_ranks": [[c, k.y, k.a, r] for (c, k), r in sorted(
            cand.local_ranks.items(),
            key=lambda item: (item[0][0], -1 if item[0][1].y is None else item[0][1].y,
                              item[0][1].a))],
        "L": cand.L_value,
        "h_terms": list(cand.h_terms),
        "h_se": se,
    }


def _candidate_from_record(rec: dict) -> RankCandidate:
    local = {(c, StratumKey(y, a)): r for c, y, a, r in rec["local_ranks"]}
    return RankCandidate({int(a): int(k) for a, k in rec["global_ranks"].items()},
                         local, float(rec["L"]), tuple(rec["h_terms"]))


@main.command("certify")
@click.option("--bundles", "bundle_args", required=True, multiple=True,
              type=click.Path(exists=True))
@click.option("--notion", type=click.Choice([n.value for n in Notion]), default="deoo",
              show_default=True)
@click.option("--alpha", multiple=True, type=float, default=(0.1,), show_default=True)
@click.option("--beta", default=0.95, show_default=True)
@click.option("--mc", default=1000, show_default=True)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--mode", type=click.Choice(["exact", "sketch"]), default="exact",
              show_default=True)
@click.option("--search", type=click.Choice([s.value for s in SearchStrategy]),
              default="full_grid", show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(path_type=Path))
def cmd_certify(bundle_args, notion, alpha, beta, mc, seed, mode, search, out_path):
    """Construct the certified candidate set and write it as JSON Lines."""
    try:
        bundles = read_bundles(_bundle_paths(bundle_args))
        spec = _spec_from_options(notion, alpha, beta, mc)
        n_groups = max(k.a for b in bundles for k in b.counts) + 1
        weights = estimate_mixture_weights(bundles, strata=_needed_strata(spec, n_groups))
        candidates = build_candidate_set(bundles, weights, spec,
                                         SearchStrategy(search), RngStream(seed), mode)
        config = {"command": "certify", "notion": notion, "alpha": list(alpha),
                  "beta": beta, "mc": mc, "mode": mode, "search": search}
        lines = [canonical_json({"provenance": provenance(config, seed),
                                 "notion": notion, "alpha": list(alpha), "beta": beta,
                                 "mc": mc, "mode": mode, "seed": seed})]
        for cand in sorted(candidates,
                           key=lambda c: (c.L_value,
                                          tuple(c.global_ranks[a]
                                                for a in sorted(c.global_ranks, reverse=True)))):
            lines.append(canonical_json(_candidate_record(cand, mc)))
        atomic_write(out_path, "\n".join(lines) + "\n")
        if not candidates:
            click.echo("empty candidate set (advisory)", err=True)
            sys.exit(ADVISORY_EXIT)
        click.echo(f"wrote {len(candidates)} candidate(s) to {out_path}")
    except (FedFairError, ValueError) as exc:
        _fail(exc)


@main.command("select")
@click.option("--candidates", "cand_path", required=True,
              type=click.Path(exists=True, path_type=Path))
@click.option("--bundles", "bundle_args", required=True, multiple=True,
              type=click.Path(exists=True))
@click.option("--shift-target", "shift_path", type=click.Path(exists=True, path_type=Path),
              default=None, help="JSON file with p_a_target and p_Y_a_target arrays")
@click.option("--out", "out_path", required=True, type=click.Path(path_type=Path))
def cmd_select(cand_path, bundle_args, shift_path, out_path):
    """Pick the accuracy-optimal candidate and write a selection report."""
    try:
        lines = [ln for ln in cand_path.read_text().splitlines() if ln.strip()]
        if not lines:
            raise NoCertifiedClassifierError("candidates file is empty")
        header = json.loads(lines[0])
        records = [json.loads(ln) for ln in lines[1:]]
        if not records:
            click.echo("error [no-certified-classifier]: empty candidate set", err=True)
            sys.exit(ADVISORY_EXIT)
        candidates = [_candidate_from_record(r) for r in records]
        spec = _spec_from_options(header["notion"], header["alpha"],
                                  header["beta"], header["mc"])
        mode = header.get("mode", "exact")
        bundles = read_bundles(_bundle_paths(bundle_args))
        n_groups = max(k.a for b in bundles for k in b.counts) + 1
        weights = estimate_mixture_weights(bundles, strata=_needed_strata(spec, n_groups))
        probs = estimate_group_probs(bundles, allow_empty=True)
        shift = None
        if shift_path is not None:
            payload = json.loads(shift_path.read_text())
            shift = LabelShiftTarget(tuple(payload["p_a_target"]),
                                     tuple(payload["p_Y_a_target"]))
        sel = select_optimal(candidates, bundles, weights, probs, spec, mode, shift)
        config = {"command": "select", "candidates": str(cand_path),
                  "shift": None if shift is None else
                  {"p_a_target": list(shift.p_a_target),
                   "p_Y_a_target": list(shift.p_Y_a_target)}}
        from .certify import effective_epsilon
        bits = next((sk.universe_bits for b in bundles for sk in b.sketches.values()), None)
        report = {
            "provenance": provenance(config, header.get("seed", 0)),
            "notion": header["notion"],
            "mode": mode,
            "mc": header["mc"],
            "epsilon": effective_epsilon(bundles, 0.0, mode),
            "quantization_bucket_width": (None if bits is None else 2.0 ** -bits),
            "thresholds": {str(a): t for a, t in sorted(sel.thresholds.items())},
            "global_ranks": {str(a): k for a, k in sorted(sel.chosen.global_ranks.items())},
            "est_error": sel.est_error,
            "theta": sel.theta,
            "L": sel.chosen.L_value,
            "h_terms": list(sel.chosen.h_terms),
            "cross_ranks": [[c, k.y, k.a, r] for (c, k), r in sorted(
                sel.cross_ranks.items(), key=lambda item: (item[0][0], item[0][1].a))],
            "candidate_count": sel.candidate_count,
        }
        atomic_write(out_path, canonical_json(report) + "\n")
        click.echo(f"selected ranks {report['global_ranks']} -> {out_path}")
    except NoCertifiedClassifierError:
        click.echo("error [no-certified-classifier]: empty candidate set", err=True)
        sys.exit(ADVISORY_EXIT)
    except (FedFairError, ValueError) as exc:
        _fail(exc)


@main.command("evaluate")
@click.option("--selection", "sel_path", required=True,
              type=click.Path(exists=True, path_type=Path))
@click.option("--test", "test_path", required=True,
              type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_path", required=True, type=click.Path(path_type=Path))
def cmd_evaluate(sel_path, test_path, out_path):
    """Measure the selected thresholds on a test samples file."""
    try:
        report = json.loads(sel_path.read_text())
        thresholds = {int(a): float(t) for a, t in report["thresholds"].items()}
        pool = SamplePool.from_samples(read_samples(test_path))
        metrics = evaluate_classifier(thresholds, pool)
        config = {"command": "evaluate", "selection": str(sel_path),
                  "test": str(test_path)}
        payload = {
            "provenance": provenance(config, report["provenance"]["seed"]),
            "accuracy": metrics["accuracy"],
            "disparity": metrics["disparity"],
            "undefined": metrics["undefined"],
            "n_test": len(pool),
        }
        atomic_write(out_path, canonical_json(payload) + "\n")
        disp = metrics["disparity"]
        csv_path = out_path.with_suffix(".csv")
        header = "accuracy,deoo,deo_tpr,deo_fpr,ddp,dpe,dea,deoom,n_test"
        deo = disp.get("deo") or (None, None)
        row = [metrics["accuracy"], disp.get("deoo"), deo[0], deo[1],
               disp.get("ddp"), disp.get("dpe"), disp.get("dea"),
               disp.get("deoom"), len(pool)]
        prov_line = "# provenance: " + canonical_json(payload["provenance"])
        atomic_write(csv_path, "\n".join([
            prov_line, header,
            ",".join("" if v is None else repr(v) if isinstance(v, float) else str(v)
                     for v in row)]) + "\n")
        click.echo(f"metrics -> {out_path} (+ {csv_path.name})")
    except (FedFairError, ValueError) as exc:
        _fail(exc)


# ---------------------------------------------------------------------------
# experiment runner


_EXPERIMENT_KEYS = {
    "notion": str, "alpha": list, "beta": float, "mc": int,
    "mode": str, "universe_bits": int, "compression": int,
    "num_clients": int, "num_groups": int, "stratum_size_range": list,
    "test_size": int, "repetitions": int, "seed": int, "model": str,
    "sweep": dict, "shift_positive_rate": float, "search": str,
}

_EXPERIMENT_DEFAULTS = {
    "notion": "deoo", "alpha": [0.1], "beta": 0.95, "mc": 1000,
    "mode": "exact", "universe_bits": 7, "compression": 300,
    "num_clients": 5, "num_groups": 2, "stratum_size_range": [30, 120],
    "test_size": 8000, "repetitions": 10, "seed": 0, "model": "reference",
    "sweep": None, "shift_positive_rate": None, "search": "full_grid",
}


def validate_experiment_config(raw: dict) -> dict:
    problems = []
    unknown = sorted(set(raw) - set(_EXPERIMENT_KEYS))
    if unknown:
        problems.append(f"unknown key(s): {', '.join(unknown)}")
    config = dict(_EXPERIMENT_DEFAULTS)
    for key, value in raw.items():
        if key in _EXPERIMENT_KEYS:
            config[key] = value
    if config["model"] != "reference":
        problems.append("model must be 'reference'")
    if config["notion"] not in {n.value for n in Notion}:
        problems.append(f"unknown notion {config['notion']}")
    if config["sweep"] is not None:
        sweep = config["sweep"]
        if (not isinstance(sweep, dict) or set(sweep) != {"parameter", "values"}
                or sweep["parameter"] not in ("alpha", "beta")):
            problems.append("sweep must be {parameter: alpha|beta, values: [..]}")
    if not (isinstance(config["repetitions"], int) and config["repetitions"] >= 1):
        problems.append("repetitions must be a positive integer")
    if (not isinstance(config["stratum_size_range"], (list, tuple))
            or len(config["stratum_size_range"]) != 2):
        problems.append("stratum_size_range must be [lo, hi]")
    try:
        FairnessSpec(Notion(config["notion"]), tuple(config["alpha"]),
                     config["beta"], config["mc"])
    except (ValueError, KeyError) as exc:
        problems.append(str(exc))
    if problems:
        raise ConfigError("; ".join(problems))
    return config


def _trial_config(config: dict) -> TrialConfig:
    spec = FairnessSpec(Notion(config["notion"]), tuple(config["alpha"]),
                        config["beta"], config["mc"])
    return TrialConfig(
        model=reference_model(num_groups=config["num_groups"],
                              num_clients=config["num_clients"]),
        spec=spec, stratum_size_range=tuple(config["stratum_size_range"]),
        mode=config["mode"], universe_bits=config["universe_bits"],
        compression=config["compression"],
        search=SearchStrategy(config["search"]),
        test_size=config["test_size"], seed=config["seed"],
        shift_positive_rate=config["shift_positive_rate"])


def _sweep_points(config: dict):
    if config["sweep"] is None:
        param = "alpha"
        yield param, config["alpha"][0], config
        return
    param = config["sweep"]["parameter"]
    for value in config["sweep"]["values"]:
        point = dict(config)
        if param == "alpha":
            point["alpha"] = [value] * len(config["alpha"])
        else:
            point["beta"] = value
        yield param, value, point


@main.command("experiment")
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, path_type=Path))
@click.option("--seed", type=int, default=None, help="overrides the config seed")
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
def cmd_experiment(config_path, seed, out_dir):
    """Run repeated seeded trials (optionally sweeping alpha or beta)."""
    try:
        raw = json.loads(config_path.read_text())
        config = validate_experiment_config(raw)
        if seed is not None:
            config["seed"] = seed
        prov = provenance(config, config["seed"])
        trial_lines = [canonical_json({"provenance": prov})]
        summary_rows = []
        plot_rows = []
        notion = config["notion"]
        for param, value, point in _sweep_points(config):
            reports, summary = run_experiment(_trial_config(point),
                                              point["repetitions"],
                                              master_seed=point["seed"])
            for i, rep in enumerate(reports):
                rec = {"sweep_parameter": param, "sweep_value": value, "trial": i}
                rec.update(rep.to_dict())
                trial_lines.append(canonical_json(rec))
            s = summary.to_dict()
            disp_key = notion if notion != "deo" else "deo1"
            summary_rows.append({
                "parameter": param, "value": value,
                "repetitions": s["repetitions"],
                "certified_count": s["certified_count"],
                "mean_acc": s["mean"].get("accuracy"),
                "mean_disp": s["mean"].get(disp_key),
                "std_disp": s["std"].get(disp_key),
                "q95_disp": s["q95"].get(disp_key),
                "coverage": s["coverage"],
                "violation_rate": s["violation_rate"],
            })
            plot_rows.append((value, s["mean"].get("accuracy"),
                              s["mean"].get(disp_key), s["q95"].get(disp_key)))
        atomic_write(out_dir / "trials.jsonl", "\n".join(trial_lines) + "\n")
        prov_line = "# provenance: " + canonical_json(prov)
        cols = list(summary_rows[0])
        lines = [prov_line, ",".join(cols)]
        for row in summary_rows:
            lines.append(",".join("" if row[c] is None else
                                  repr(row[c]) if isinstance(row[c], float) else str(row[c])
                                  for c in cols))
        atomic_write(out_dir / "summary.csv", "\n".join(lines) + "\n")
        param = "alpha" if config["sweep"] is None else config["sweep"]["parameter"]
        lines = [prov_line, f"{param},mean_acc,mean_disp,q95_disp"]
        for value, acc, disp, q in plot_rows:
            cells = [value, acc, disp, q]
            lines.append(",".join("" if c is None else
                                  repr(c) if isinstance(c, float) else str(c)
                                  for c in cells))
        atomic_write(out_dir / "plot.csv", "\n".join(lines) + "\n")
        click.echo(f"experiment outputs in {out_dir}")
    except (FedFairError, ValueError) as exc:
        _fail(exc)


if __name__ == "__main__":
    main()
