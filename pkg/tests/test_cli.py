import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from fedfair import BetaRankSpec, exact_h_oracle
from fedfair.cli import main, read_samples, validate_experiment_config
from fedfair.errors import ConfigError

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def runner():
    return CliRunner()


def write_samples(path, rows):
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")


def synthetic_rows(rng, n, clients=2):
    rows = []
    for _ in range(n):
        y = int(rng.integers(0, 2))
        a = int(rng.integers(0, 2))
        rows.append({"client": int(rng.integers(0, clients)), "y": y, "a": a,
                     "score": round(float(np.clip(rng.normal(0.35 + 0.3 * y - 0.05 * a, 0.17),
                                                  0.001, 0.999)), 6)})
    return rows


class TestReadSamples:
    def test_malformed_line_reports_number(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text('{"client": 0, "y": 1, "a": 0, "score": 0.5}\nnot json\n')
        with pytest.raises(ConfigError) as exc:
            read_samples(p)
        assert ":2:" in str(exc.value)

    def test_out_of_range_score_rejected(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text('{"client": 0, "y": 1, "a": 0, "score": 1.5}\n')
        with pytest.raises(ConfigError) as exc:
            read_samples(p)
        assert ":1:" in str(exc.value)

    def test_csv_import(self, tmp_path):
        p = tmp_path / "samples.csv"
        p.write_text("client,y,a,score\n0,1,0,0.25\n1,0,1,0.75\n")
        samples = read_samples(p)
        assert len(samples) == 2
        assert samples[1].score == 0.75


class TestSketchCommand:
    def test_three_line_file(self, runner, tmp_path):
        p = tmp_path / "s.jsonl"
        write_samples(p, [{"client": 0, "y": 1, "a": 0, "score": 0.3},
                          {"client": 0, "y": 1, "a": 0, "score": 0.6},
                          {"client": 0, "y": 0, "a": 1, "score": 0.2}])
        res = runner.invoke(main, ["sketch", "--input", str(p), "--out", str(tmp_path / "b")])
        assert res.exit_code == 0, res.output
        payload = json.loads((tmp_path / "b" / "bundle_0.json").read_text())
        counts = {(c["y"], c["a"]): c["n"] for c in payload["bundle"]["counts"]}
        assert counts == {(1, 0): 2, (0, 1): 1}

    def test_rejects_bad_score_with_line(self, runner, tmp_path):
        p = tmp_path / "s.jsonl"
        p.write_text('{"client": 0, "y": 1, "a": 0, "score": 1.5}\n')
        res = runner.invoke(main, ["sketch", "--input", str(p), "--out", str(tmp_path / "b")])
        assert res.exit_code == 1
        assert ":1:" in res.output

    def test_large_file_counts(self, runner, tmp_path, rng):
        rows = synthetic_rows(rng, 100_000, clients=3)
        p = tmp_path / "big.jsonl"
        write_samples(p, rows)
        res = runner.invoke(main, ["sketch", "--input", str(p), "--out", str(tmp_path / "b"),
                                   "--mode", "sketch"])
        assert res.exit_code == 0
        total = 0
        for c in range(3):
            payload = json.loads((tmp_path / "b" / f"bundle_{c}.json").read_text())
            counts = {(r["y"], r["a"]): r["n"] for r in payload["bundle"]["counts"]}
            expected = {}
            for row in rows:
                if row["client"] == c:
                    key = (row["y"], row["a"])
                    expected[key] = expected.get(key, 0) + 1
            assert counts == expected
            total += sum(counts.values())
        assert total == 100_000


class TestCertifyCommand:
    def test_golden_fixture_byte_identical(self, runner, tmp_path):
        out = tmp_path / "cands.jsonl"
        res = runner.invoke(main, [
            "certify", "--bundles", str(FIXTURES / "bundles"),
            "--notion", "deoo", "--alpha", "0.45", "--beta", "0.7",
            "--mc", "800", "--seed", "424242", "--out", str(out)])
        assert res.exit_code == 0, res.output
        assert out.read_bytes() == (FIXTURES / "reference_candidates.jsonl").read_bytes()

    def test_golden_fixture_against_exact_oracle(self):
        # the fixture federation has a single client, so every candidate's
        # h-terms can be cross-checked by deterministic quadrature
        lines = (FIXTURES / "reference_candidates.jsonl").read_text().splitlines()
        header = json.loads(lines[0])
        n = 8
        alpha, mc = header["alpha"][0], header["mc"]
        for line in lines[1:]:
            rec = json.loads(line)
            k0, k1 = rec["global_ranks"]["0"], rec["global_ranks"]["1"]
            h0 = exact_h_oracle(BetaRankSpec((min(k0 + 1, n + 1),), (n,), (1.0,)),
                                BetaRankSpec((k1,), (n,), (1.0,)), alpha)
            h1 = exact_h_oracle(BetaRankSpec((min(k1 + 1, n + 1),), (n,), (1.0,)),
                                BetaRankSpec((k0,), (n,), (1.0,)), alpha)
            for got, want in zip(rec["h_terms"], (h0, h1)):
                assert abs(got - want) <= 4 * np.sqrt(max(want * (1 - want), 1e-4) / mc) + 1e-4
            assert rec["L"] < 1 - header["beta"]

    def test_vacuous_alpha_full_grid_count(self, runner, tmp_path, rng):
        rows = synthetic_rows(rng, 120, clients=1)
        p = tmp_path / "s.jsonl"
        write_samples(p, rows)
        runner.invoke(main, ["sketch", "--input", str(p), "--out", str(tmp_path / "b")])
        out = tmp_path / "cands.jsonl"
        res = runner.invoke(main, [
            "certify", "--bundles", str(tmp_path / "b"), "--alpha", "0.999",
            "--beta", "0.5", "--mc", "400", "--out", str(out)])
        assert res.exit_code == 0, res.output
        n1 = {a: sum(1 for r in rows if r["y"] == 1 and r["a"] == a) for a in (0, 1)}
        assert len(out.read_text().splitlines()) - 1 == n1[0] * n1[1]

    def test_empty_set_advisory_exit(self, runner, tmp_path, rng):
        rows = ([{"client": 0, "y": 1, "a": a, "score": round(float(s), 4)}
                 for a in (0, 1) for s in rng.random(2)]
                + [{"client": 0, "y": 0, "a": a, "score": round(float(s), 4)}
                   for a in (0, 1) for s in rng.random(3)])
        p = tmp_path / "s.jsonl"
        write_samples(p, rows)
        runner.invoke(main, ["sketch", "--input", str(p), "--out", str(tmp_path / "b")])
        out = tmp_path / "cands.jsonl"
        res = runner.invoke(main, [
            "certify", "--bundles", str(tmp_path / "b"), "--alpha", "0.05",
            "--beta", "0.95", "--mc", "500", "--out", str(out)])
        assert res.exit_code == 2
        assert len(out.read_text().splitlines()) == 1  # provenance only


class TestSelectEvaluate:
    def _pipeline(self, runner, tmp_path, rng, alpha="0.35", beta="0.8"):
        rows = synthetic_rows(rng, 400)
        p = tmp_path / "s.jsonl"
        write_samples(p, rows)
        runner.invoke(main, ["sketch", "--input", str(p), "--out", str(tmp_path / "b")])
        res = runner.invoke(main, [
            "certify", "--bundles", str(tmp_path / "b"), "--alpha", alpha,
            "--beta", beta, "--mc", "400", "--seed", "5", "--out",
            str(tmp_path / "cands.jsonl")])
        assert res.exit_code == 0, res.output
        return tmp_path / "b", tmp_path / "cands.jsonl"

    def test_select_and_evaluate_roundtrip(self, runner, tmp_path, rng):
        bundles, cands = self._pipeline(runner, tmp_path, rng)
        sel = tmp_path / "sel.json"
        res = runner.invoke(main, ["select", "--candidates", str(cands),
                                   "--bundles", str(bundles), "--out", str(sel)])
        assert res.exit_code == 0, res.output
        report = json.loads(sel.read_text())
        assert set(report["thresholds"]) == {"0", "1"}
        assert 0.0 <= report["est_error"] <= 1.0 + report["theta"]

        test_rows = synthetic_rows(np.random.default_rng(9), 500)
        test_path = tmp_path / "test.jsonl"
        write_samples(test_path, test_rows)
        res = runner.invoke(main, ["evaluate", "--selection", str(sel),
                                   "--test", str(test_path),
                                   "--out", str(tmp_path / "m.json")])
        assert res.exit_code == 0, res.output
        metrics = json.loads((tmp_path / "m.json").read_text())
        assert 0 <= metrics["accuracy"] <= 1
        csv_lines = (tmp_path / "m.csv").read_text().splitlines()
        assert csv_lines[0].startswith("# provenance:")
        assert csv_lines[1].split(",")[0] == "accuracy"

    def test_single_candidate_selected(self, runner, tmp_path, rng):
        bundles, cands = self._pipeline(runner, tmp_path, rng)
        lines = cands.read_text().splitlines()
        trimmed = tmp_path / "one.jsonl"
        trimmed.write_text("\n".join(lines[:2]) + "\n")
        res = runner.invoke(main, ["select", "--candidates", str(trimmed),
                                   "--bundles", str(bundles),
                                   "--out", str(tmp_path / "sel.json")])
        assert res.exit_code == 0
        report = json.loads((tmp_path / "sel.json").read_text())
        expected = json.loads(lines[1])["global_ranks"]
        assert report["global_ranks"] == expected

    def test_identity_shift_target_identical_choice(self, runner, tmp_path, rng):
        bundles, cands = self._pipeline(runner, tmp_path, rng)
        res = runner.invoke(main, ["select", "--candidates", str(cands),
                                   "--bundles", str(bundles),
                                   "--out", str(tmp_path / "plain.json")])
        assert res.exit_code == 0
        # identity target: training-mixture rates computed from the bundles
        from fedfair.cli import read_bundles, _bundle_paths
        from fedfair import estimate_group_probs, estimate_mixture_weights
        bs = read_bundles(_bundle_paths([str(bundles)]))
        probs = estimate_group_probs(bs, allow_empty=True)
        weights = estimate_mixture_weights(bs)
        p_a, p_y = probs.aggregate(weights.pi)
        (tmp_path / "shift.json").write_text(json.dumps(
            {"p_a_target": list(p_a), "p_Y_a_target": list(p_y)}))
        res = runner.invoke(main, ["select", "--candidates", str(cands),
                                   "--bundles", str(bundles),
                                   "--shift-target", str(tmp_path / "shift.json"),
                                   "--out", str(tmp_path / "shifted.json")])
        assert res.exit_code == 0
        plain = json.loads((tmp_path / "plain.json").read_text())
        shifted = json.loads((tmp_path / "shifted.json").read_text())
        assert plain["global_ranks"] == shifted["global_ranks"]
        assert plain["est_error"] == shifted["est_error"]

    def test_empty_candidates_exit(self, runner, tmp_path, rng):
        bundles, cands = self._pipeline(runner, tmp_path, rng)
        only_header = tmp_path / "empty.jsonl"
        only_header.write_text(cands.read_text().splitlines()[0] + "\n")
        res = runner.invoke(main, ["select", "--candidates", str(only_header),
                                   "--bundles", str(bundles),
                                   "--out", str(tmp_path / "sel.json")])
        assert res.exit_code == 2
        assert "no-certified-classifier" in res.output

    def test_idempotent_bytes(self, runner, tmp_path, rng):
        bundles, cands = self._pipeline(runner, tmp_path, rng)
        out1, out2 = tmp_path / "a.json", tmp_path / "b.json"
        for out in (out1, out2):
            res = runner.invoke(main, ["select", "--candidates", str(cands),
                                       "--bundles", str(bundles), "--out", str(out)])
            assert res.exit_code == 0
        j1, j2 = json.loads(out1.read_text()), json.loads(out2.read_text())
        j1["provenance"].pop("config_hash"), j2["provenance"].pop("config_hash")
        assert j1 == j2


class TestExperimentCommand:
    def _config(self, tmp_path, **overrides):
        cfg = {"notion": "deoo", "alpha": [0.3], "beta": 0.9, "mc": 150,
               "num_clients": 3, "stratum_size_range": [10, 20],
               "test_size": 600, "repetitions": 2, "seed": 11}
        cfg.update(overrides)
        p = tmp_path / "config.json"
        p.write_text(json.dumps(cfg))
        return p

    def test_unknown_key_rejected(self, runner, tmp_path):
        p = self._config(tmp_path)
        raw = json.loads(p.read_text())
        raw["boguskey"] = 1
        p.write_text(json.dumps(raw))
        res = runner.invoke(main, ["experiment", "--config", str(p),
                                   "--out", str(tmp_path / "out")])
        assert res.exit_code == 1
        assert "boguskey" in res.output

    def test_single_repetition_single_record(self, runner, tmp_path):
        p = self._config(tmp_path, repetitions=1)
        res = runner.invoke(main, ["experiment", "--config", str(p),
                                   "--out", str(tmp_path / "out")])
        assert res.exit_code == 0, res.output
        lines = (tmp_path / "out" / "trials.jsonl").read_text().splitlines()
        assert len(lines) == 2  # provenance + one trial

    def test_alpha_sweep_plot_rows(self, runner, tmp_path):
        p = self._config(tmp_path, sweep={"parameter": "alpha",
                                          "values": [0.2, 0.3, 0.4]})
        res = runner.invoke(main, ["experiment", "--config", str(p),
                                   "--out", str(tmp_path / "out")])
        assert res.exit_code == 0, res.output
        plot = (tmp_path / "out" / "plot.csv").read_text().splitlines()
        assert plot[1] == "alpha,mean_acc,mean_disp,q95_disp"
        assert len(plot) == 5

    def test_beta_sweep_candidate_counts_nonincreasing(self, runner, tmp_path):
        p = self._config(tmp_path, repetitions=1,
                         sweep={"parameter": "beta", "values": [0.8, 0.9, 0.95]})
        res = runner.invoke(main, ["experiment", "--config", str(p),
                                   "--out", str(tmp_path / "out")])
        assert res.exit_code == 0, res.output
        lines = (tmp_path / "out" / "trials.jsonl").read_text().splitlines()[1:]
        counts = [json.loads(l)["candidate_count"] for l in lines]
        assert counts == sorted(counts, reverse=True)

    def test_byte_identical_reruns(self, runner, tmp_path):
        p = self._config(tmp_path)
        for d in ("o1", "o2"):
            res = runner.invoke(main, ["experiment", "--config", str(p),
                                       "--out", str(tmp_path / d)])
            assert res.exit_code == 0
        for name in ("trials.jsonl", "summary.csv", "plot.csv"):
            assert (tmp_path / "o1" / name).read_bytes() == \
                (tmp_path / "o2" / name).read_bytes()

    def test_validate_rejects_bad_sweep(self):
        with pytest.raises(ConfigError):
            validate_experiment_config({"sweep": {"parameter": "gamma", "values": [1]}})
