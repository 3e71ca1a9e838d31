import json
from dataclasses import replace

import numpy as np
import pytest

from sonogen import dataset as ds
from sonogen import harness as hn
from sonogen.errors import InsufficientPool, NoRows


def phantom_pairs(n, seed=0, size=64, provenance=ds.Provenance.real, prefix="p"):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        t = list(ds.Trimester)[i % 3]
        pair = ds.generate_phantom(ds.random_phantom_spec(rng, t, height=size, width=size))
        out.append(replace(pair, provenance=provenance, id=f"{prefix}{i:04d}"))
    return out


class TestExperimentConfig:
    def test_validation(self):
        cfg = hn.ExperimentConfig(da_method="SYN", n_real=5, total_budget=500,
                                  seeds=(0, 1, 2))
        assert cfg.repeats == 3
        with pytest.raises(ValueError):
            hn.ExperimentConfig(da_method="magic", n_real=5)
        with pytest.raises(ValueError):
            hn.ExperimentConfig(da_method="SYN", n_real=600, total_budget=500)


class TestBuildHybrid:
    def setup_method(self):
        self.real = phantom_pairs(60, seed=0)
        self.pool = phantom_pairs(600, seed=1, provenance=ds.Provenance.synthetic_curated,
                                  prefix="s")

    @pytest.mark.parametrize("n_real,expected_synth", [(50, 450), (5, 495), (500, 0)])
    def test_budget_rule(self, n_real, expected_synth):
        real = self.real if n_real <= 60 else phantom_pairs(500, seed=2)
        out = hn.build_hybrid(real, self.pool, n_real, total=500, seed=0)
        assert len(out) == 500
        n_synth = sum(1 for p in out if p.provenance == ds.Provenance.synthetic_curated)
        assert n_synth == expected_synth

    def test_raw_synthetic_not_admitted(self):
        raw_pool = phantom_pairs(600, seed=3, provenance=ds.Provenance.synthetic_raw,
                                 prefix="r")
        with pytest.raises(InsufficientPool):
            hn.build_hybrid(self.real, raw_pool, 5, total=500, seed=0)

    def test_insufficient_pool(self):
        with pytest.raises(InsufficientPool):
            hn.build_hybrid(self.real, self.pool[:100], 5, total=500, seed=0)

    def test_deterministic_given_seed(self):
        a = hn.build_hybrid(self.real, self.pool, 10, total=100, seed=7)
        b = hn.build_hybrid(self.real, self.pool, 10, total=100, seed=7)
        assert [p.id for p in a] == [p.id for p in b]


class TestSweep:
    def make_data(self):
        return hn.SweepData(
            real_train=phantom_pairs(12, seed=4),
            val=phantom_pairs(3, seed=5, prefix="v"),
            test=phantom_pairs(4, seed=6, prefix="t"),
            synth_pool=phantom_pairs(40, seed=7,
                                     provenance=ds.Provenance.synthetic_curated,
                                     prefix="s"),
        )

    def grid(self, **kw):
        defaults = dict(methods=("baseline", "SYN"), n_real_values=(5,),
                        seeds=(0, 1), total_budget=20, epochs=1, batch_size=5,
                        learning_rate=1e-3)
        defaults.update(kw)
        return hn.SweepGrid(**defaults)

    def test_counts_and_rows(self, tmp_path):
        rows = hn.run_sweep(self.grid(), self.make_data(), tmp_path)
        assert len(rows) == 2
        journal = json.loads((tmp_path / "journal.json").read_text())
        assert len(journal) == 4  # 2 methods x 1 n_real x 2 seeds
        for row in rows:
            assert set(row.per_seed) == {0, 1}

    def test_journal_makes_rerun_idempotent(self, tmp_path):
        data = self.make_data()
        rows1 = hn.run_sweep(self.grid(), data, tmp_path)
        journal_before = (tmp_path / "journal.json").read_text()
        rows2 = hn.run_sweep(self.grid(), data, tmp_path)
        assert (tmp_path / "journal.json").read_text() == journal_before
        assert {(r.da_method, r.n_real): r.per_seed for r in rows1} \
            == {(r.da_method, r.n_real): r.per_seed for r in rows2}

    def test_sweep_sizes_follow_method(self, tmp_path):
        rows = hn.run_sweep(self.grid(methods=("baseline", "WA", "SA", "SYN"),
                                      seeds=(0,)), self.make_data(), tmp_path)
        journal = json.loads((tmp_path / "journal.json").read_text())
        for key, cell in journal.items():
            method, n_real, _ = key.split("|")
            if method == "SYN":
                assert cell["train_size"] == 20
                assert cell["n_synth"] == 20 - int(n_real)
            else:
                assert cell["train_size"] == int(n_real)
                assert cell["n_synth"] == 0

    def test_failed_cell_marked_not_fatal(self, tmp_path):
        data = self.make_data()
        data.synth_pool = []  # SYN cells cannot be built
        rows = hn.run_sweep(self.grid(), data, tmp_path)
        journal = json.loads((tmp_path / "journal.json").read_text())
        assert all("error" in journal[f"SYN|5|{s}"] for s in (0, 1))
        assert [r.da_method for r in rows] == ["baseline"]

    def test_identical_config_reproduces_per_seed_scores(self, tmp_path):
        data = self.make_data()
        rows1 = hn.run_sweep(self.grid(), data, tmp_path / "a")
        rows2 = hn.run_sweep(self.grid(), data, tmp_path / "b")
        key = lambda rows: {(r.da_method, r.n_real): r.per_seed for r in rows}
        assert key(rows1) == key(rows2)

    def test_aggregates_match_recomputation(self, tmp_path):
        rows = hn.run_sweep(self.grid(), self.make_data(), tmp_path)
        for r in rows:
            vals = np.array(list(r.per_seed.values()))
            assert abs(r.mean_dsc - vals.mean()) <= 1e-9
            assert abs(r.std_dsc - vals.std(ddof=0)) <= 1e-9


class TestReports:
    def rows(self):
        return [
            hn.ResultRow.from_scores("baseline", 5, {0: 0.80, 1: 0.82}, 1.0),
            hn.ResultRow.from_scores("SYN", 5, {0: 0.90, 1: 0.88}, 1.0),
            hn.ResultRow.from_scores("baseline", 10, {0: 0.85, 1: 0.85}, 1.0),
            hn.ResultRow.from_scores("SYN", 10, {0: 0.85, 1: 0.85}, 1.0),
        ]

    def test_no_rows(self, tmp_path):
        with pytest.raises(NoRows):
            hn.emit_reports([], tmp_path)

    def test_single_row(self, tmp_path):
        paths = hn.emit_reports([hn.ResultRow.from_scores("SYN", 5, {0: 0.9}, 1.0)],
                                tmp_path)
        lines = paths["csv"].read_text().splitlines()
        assert lines[0].startswith("#")
        assert len(lines) == 3  # comment + header + one row
        assert "SYN" in lines[2]

    def test_bold_best_and_ties(self, tmp_path):
        paths = hn.emit_reports(self.rows(), tmp_path)
        md = paths["markdown"].read_text()
        lines = md.splitlines()
        syn_line = next(l for l in lines if l.startswith("| SYN"))
        base_line = next(l for l in lines if l.startswith("| baseline"))
        syn_cells = [c.strip() for c in syn_line.split("|")[2:-1]]
        base_cells = [c.strip() for c in base_line.split("|")[2:-1]]
        assert syn_cells[0].startswith("**")      # SYN wins n=5
        assert not base_cells[0].startswith("**")
        assert syn_cells[1].startswith("**") and base_cells[1].startswith("**")  # tie

    def test_csv_aggregates_recompute(self, tmp_path):
        paths = hn.emit_reports(self.rows(), tmp_path)
        lines = [l for l in paths["csv"].read_text().splitlines() if not l.startswith("#")]
        header = lines[0].split(",")
        for line in lines[1:]:
            cells = line.split(",")
            per_seed = [float(c) for c in cells[4:] if c]
            assert abs(float(cells[2]) - np.mean(per_seed)) <= 1e-9
            assert abs(float(cells[3]) - np.std(per_seed, ddof=0)) <= 1e-9

    def test_plot_json_series(self, tmp_path):
        paths = hn.emit_reports(self.rows(), tmp_path)
        data = json.loads(paths["plot"].read_text())
        by_method = {s["method"]: s for s in data["series"]}
        assert set(by_method) == {"baseline", "SYN"}
        assert by_method["SYN"]["n_real"] == [5, 10]
        assert len(by_method["SYN"]["mean_dsc"]) == 2
