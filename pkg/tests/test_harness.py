import json
import math

import numpy as np
import pytest
from scipy import stats

from irmemory.asymptotics import McSpec
from irmemory.harness import (
    BatchFailure,
    ScenarioConfig,
    estimate_file,
    export_density,
    format_checks,
    run_scenario,
    summarize,
    validate_asymptotics,
)
from irmemory.numerics import RngStream
from irmemory.processes import SpectralModel, generate, write_csv

YAML = """\
version: 1
name: smoke
model: {kind: fgn}
n: 600
d_values: [0.0, 0.2]
p: 4
replicates: 3
seed: 11
"""


def _config(tmp_path, **kw):
    f = tmp_path / "s.yaml"
    f.write_text(YAML)
    cfg = ScenarioConfig.load(f)
    raw = cfg.to_dict()
    raw.update(kw)
    return ScenarioConfig.from_dict(raw)


class TestScenarioConfig:
    def test_load(self, tmp_path):
        cfg = _config(tmp_path)
        assert cfg.n == 600 and cfg.d_values == (0.0, 0.2) and cfg.p == 4
        assert cfg.model_for(0.2).d == 0.2

    def test_round_trip(self, tmp_path):
        cfg = _config(tmp_path)
        assert ScenarioConfig.from_dict(cfg.to_dict()) == cfg

    def test_version_required(self, tmp_path):
        raw = _config(tmp_path).to_dict()
        raw.pop("version")
        with pytest.raises(ValueError, match="version"):
            ScenarioConfig.from_dict(raw)

    def test_unknown_field(self, tmp_path):
        with pytest.raises(ValueError, match="unknown"):
            _config(tmp_path, colour="red")

    @pytest.mark.parametrize("kw", [{"d_values": [0.6]}, {"p": 2}, {"replicates": 0}, {"d_values": []}])
    def test_invalid(self, tmp_path, kw):
        with pytest.raises(ValueError):
            _config(tmp_path, **kw)


class TestRunScenario:
    def test_byte_identical_reruns(self, tmp_path, small_table_path):
        outs = []
        for k in range(2):
            o = {"summary": str(tmp_path / f"s{k}.csv"), "records": str(tmp_path / f"r{k}.csv")}
            run_scenario(_config(tmp_path, replicates=1, outputs=o), table=small_table_path)
            outs.append((tmp_path / f"s{k}.csv").read_bytes() + (tmp_path / f"r{k}.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_stream_ids(self, tmp_path, small_table_path):
        res = run_scenario(_config(tmp_path), table=small_table_path)
        assert [r.stream_id for r in res.records] == [0, 1, 2, 1_000_000, 1_000_001, 1_000_002]
        assert all(r.ok for r in res.records)
        assert [c.n_ok for c in res.cells] == [3, 3] and res.pooled.n_ok == 6

    def test_replicate_matches_direct_estimate(self, tmp_path, small_table, small_table_path):
        from irmemory.estimator import estimate
        res = run_scenario(_config(tmp_path), table=small_table_path)
        rec = res.records[4]
        x = generate(SpectralModel.fgn(0.7), 600, RngStream(11, rec.stream_id))
        assert rec.d_ir == estimate(x, p=4, table=small_table).d_ir

    def test_worker_invariance(self, tmp_path, small_table_path):
        cfg = _config(tmp_path)
        a = run_scenario(cfg, table=small_table_path, workers=1)
        b = run_scenario(cfg, table=small_table_path, workers=2)
        assert a.records_csv() == b.records_csv()

    def test_summarize_is_pure(self, tmp_path, small_table_path):
        cfg = _config(tmp_path)
        res = run_scenario(cfg, table=small_table_path)
        again = summarize(cfg, res.records)
        assert again.cells_csv() == res.cells_csv()
        errs = np.array([r.d_ir - r.d for r in res.records if r.d_index == 1])
        assert res.cells[1].sqrt_mse == pytest.approx(math.sqrt(np.mean(errs ** 2)), rel=1e-14)

    def test_garma_truth_is_zero(self, tmp_path, small_table_path):
        cfg = _config(tmp_path, model={"kind": "garma0"}, d_values=[0.2], replicates=2)
        res = run_scenario(cfg, table=small_table_path)
        assert all(r.d == 0.0 for r in res.records)

    def test_batch_failure_writes_outputs(self, tmp_path):
        o = {"records": str(tmp_path / "r.csv")}
        with pytest.raises(BatchFailure, match="6/6"):
            run_scenario(_config(tmp_path, outputs=o), table=str(tmp_path / "missing.npz"))
        assert (tmp_path / "r.csv").read_text().count("\n") == 7


class TestEstimateFile:
    def test_recovers_d(self, tmp_path, small_table):
        f = tmp_path / "x.csv"
        write_csv(generate(SpectralModel.fgn(0.8), 5000, RngStream(31, 0)), f)
        rep, text, js = estimate_file(f, p=6, table=small_table)
        assert abs(rep.d_ir - 0.3) < 4 * rep.asymptotic_sd
        assert "d_IR" in text and "grid:" not in text
        assert json.loads(js)["d_ir"] == rep.d_ir

    def test_diagnostics(self, tmp_path, small_table):
        f = tmp_path / "x.csv"
        write_csv(generate(SpectralModel.fgn(0.5), 2000, RngStream(31, 1)), f)
        _, text, js = estimate_file(f, p=5, table=small_table, diagnostics=True)
        assert "grid:" in text
        assert len(json.loads(js)["grid"]) >= 2

    def test_too_short(self, tmp_path, small_table):
        f = tmp_path / "x.csv"
        f.write_text("\n".join(str(v) for v in range(20)) + "\n")
        with pytest.raises(ValueError, match="at least 28 needed"):
            estimate_file(f, p=6, table=small_table)


class TestDensity:
    def test_normal_overlay(self):
        z = np.random.default_rng(0).standard_normal(4000)
        out = export_density(z)
        assert out.x.size == out.overlay.size == 200
        assert np.max(np.abs(out.kde - stats.norm.pdf(out.x))) < 0.05

    def test_chi2_overlay(self):
        t = np.random.default_rng(1).chisquare(9, 500)
        out = export_density(t, "chi2:9")
        assert out.overlay_x[0] >= 0
        assert stats.chi2(9).pdf(0.0) == 0.0
        assert out.label == "chi2(9)"

    def test_csv_rows(self):
        out = export_density(np.random.default_rng(2).standard_normal(100), "normal:0,1")
        lines = out.to_csv().splitlines()
        assert len(lines) == 2 * (200 + 2)

    def test_validation(self):
        with pytest.raises(ValueError):
            export_density(np.ones(10))
        with pytest.raises(ValueError):
            export_density(np.arange(30.0), "gamma:2")


class TestValidate:
    @pytest.fixture(scope="class")
    @classmethod
    def checks(cls):
        return validate_asymptotics(McSpec(mc_samples=2 ** 14), d_values=(0.0,))

    def test_expansion_checks_pass(self, checks):
        by = {c.name: c for c in checks}
        for name in ("J4(0,1) = pi/2", "J6(0,1) = 3pi/8", "rate slope FARIMA(0, 0.2, 0)"):
            assert by[name].passed

    def test_reference_constant_differs(self, checks):
        c = next(c for c in checks if c.name == "C'42")
        assert not c.passed and c.value == pytest.approx(3.0590, abs=1e-4)

    def test_variance_routes(self, checks):
        assert checks[-1].name.startswith("sigma_11(0.0)") and checks[-1].passed

    def test_format(self, checks):
        lines = format_checks(checks).splitlines()
        assert len(lines) == len(checks)
        assert all(l.startswith(("PASS", "FAIL")) for l in lines)
