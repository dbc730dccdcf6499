"""End-to-end tests for the purifycert command line."""

import csv
import json
import shutil
from pathlib import Path

import pytest

from purifycert.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, main, run_subcommand
from tests.conftest import CONFIG_DIR

SMALL_CERTIFY = [
    "--set", "smoothing.n0=10",
    "--set", "smoothing.n=20",
    "--set", "smoothing.K=2",
    "--set", "points.sample=3",
    "--set", "reverse.mode=one-shot",
]


def _read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


class TestValidate:
    """
    Tests the validate subcommand.

    This suite verifies that:
    - Shipped configs print an empty error list and exit 0
    - Broken configs print their errors and exit 2
    - Missing files exit 4
    """

    def test_valid(self, capsys):
        """demo.json is valid."""
        assert main(["validate", "--config", str(CONFIG_DIR / "demo.json")]) == EXIT_OK
        assert json.loads(capsys.readouterr().out) == []

    def test_invalid_override(self, capsys):
        """An override can break a valid config."""
        code = main(["validate", "--config", str(CONFIG_DIR / "demo.json"), "--set", "smoothing.alpha=0.7"])
        assert code == EXIT_CONFIG
        errors = json.loads(capsys.readouterr().out)
        assert [e["invariant"] for e in errors] == ["smoothing"]

    def test_missing_config(self, tmp_path):
        """A config that does not exist is a file system failure."""
        assert main(["validate", "--config", str(tmp_path / "absent.json")]) == EXIT_IO

    def test_unknown_subcommand(self):
        """argparse rejects unknown subcommands with status 2."""
        with pytest.raises(SystemExit) as info:
            main(["purify", "--config", str(CONFIG_DIR / "demo.json")])
        assert info.value.code == 2


class TestSubcommands:
    """
    Tests the computing subcommands on the shipped configs.

    This suite verifies that:
    - Each subcommand writes its files and a manifest
    - certify is reproducible byte for byte
    - sweep writes one curve per cell plus the merged table
    - Invalid configs exit 2 before any output is written
    """

    def test_posterior(self, tmp_path):
        """posterior.csv has the documented header and weights summing to one."""
        code = main(["posterior", "--config", str(CONFIG_DIR / "demo.json"), "--out", str(tmp_path)])
        assert code == EXIT_OK
        with open(tmp_path / "posterior.csv") as f:
            assert f.readline().strip() == "index,label,weight,x0,x1"
        rows = _read_csv(tmp_path / "posterior.csv")
        assert sum(float(r["weight"]) for r in rows) == pytest.approx(1.0)
        mode = json.loads((tmp_path / "mode.json").read_text())
        assert mode["argmax_label"] in (0, 1)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["outputs"]["posterior"] == ["posterior.csv", "mode.json"]

    def test_region(self, tmp_path):
        """The union reaches further than the sub-region of x0."""
        code = main(["region", "--config", str(CONFIG_DIR / "union.json"), "--out", str(tmp_path)])
        assert code == EXIT_OK
        radii = json.loads((tmp_path / "radii.json").read_text())
        assert radii["sub_region_radius"]["0"] == pytest.approx(1.5)
        assert radii["union_radius"] > radii["sub_region_radius"]["0"]
        assert len(_read_csv(tmp_path / "half_spaces.csv")) == 2
        assert len(_read_csv(tmp_path / "membership_grid.csv")) == 200 * 200

    def test_certify_reproducible(self, tmp_path):
        """Two runs with the same seed write identical records."""
        outputs = []
        for name in ("first", "second"):
            out = tmp_path / name
            code = main(["certify", "--config", str(CONFIG_DIR / "demo.json"), "--out", str(out), *SMALL_CERTIFY])
            assert code == EXIT_OK
            outputs.append((out / "certify.jsonl").read_bytes())
        assert outputs[0] == outputs[1]
        records = [json.loads(line) for line in outputs[0].decode().splitlines()]
        assert len(records) == 3

    def test_certify_seed(self, tmp_path):
        """run_subcommand with a different seed still succeeds and records its hash."""
        code = run_subcommand(
            "certify", str(CONFIG_DIR / "demo.json"), SMALL_CERTIFY[1::2], seed=5, out=str(tmp_path)
        )
        assert code == EXIT_OK
        curve = _read_csv(tmp_path / "curve.csv")
        assert curve[0]["epsilon"] == "0.0"

    def test_sweep(self, tmp_path):
        """sigma in {0.25} times K in {1, 5, 40} gives three cells."""
        code = main(
            [
                "sweep",
                "--config", str(CONFIG_DIR / "demo.json"),
                "--out", str(tmp_path),
                *SMALL_CERTIFY,
                "--set", "sweep.sigma=[0.25]",
                "--set", "sweep.K=[1,5,40]",
            ]
        )
        assert code == EXIT_OK
        curves = sorted(p.name for p in tmp_path.glob("curve_*.csv"))
        assert curves == [
            "curve_sigma=0.25_K=1_b=10.csv",
            "curve_sigma=0.25_K=40_b=10.csv",
            "curve_sigma=0.25_K=5_b=10.csv",
        ]
        merged = _read_csv(tmp_path / "sweep.csv")
        assert {r["K"] for r in merged} == {"1", "5", "40"}

    def test_invalid_config_writes_nothing(self, tmp_path):
        """Validation failures exit 2 and leave the output directory alone."""
        out = tmp_path / "out"
        code = main(["certify", "--config", str(CONFIG_DIR / "demo.json"), "--out", str(out), "--set", "smoothing.K=0"])
        assert code == EXIT_CONFIG
        assert not out.exists()

    def test_unwritable_output(self, tmp_path):
        """An output path that is a file is a file system failure."""
        blocker = tmp_path / "blocker"
        blocker.write_text("")
        code = main(["posterior", "--config", str(CONFIG_DIR / "demo.json"), "--out", str(blocker / "run")])
        assert code == EXIT_IO

    def test_sample_trace(self, tmp_path):
        """sample --trace adds a trajectory and reports the divergence."""
        code = main(
            [
                "sample",
                "--config", str(CONFIG_DIR / "demo.json"),
                "--out", str(tmp_path),
                "--set", "posterior.runs=200",
                "--set", "reverse.mode=one-shot",
                "--trace",
            ]
        )
        assert code == EXIT_OK
        assert len(_read_csv(tmp_path / "endpoints.csv")) == 200
        divergence = json.loads((tmp_path / "divergence.json").read_text())
        assert 0.0 <= divergence["tv"] <= 1.0
        assert (tmp_path / "trajectory.jsonl").read_text().strip()


SMALL_SAMPLE = ["--set", "posterior.runs=200", "--set", "smoothing.b=5"]
SMALL_SCOREGAP = [
    "--set", "scoregap.magnitudes=[0.0,0.5]",
    "--set", "scoregap.mc_samples=1000",
]
SMALL_SWEEP = [*SMALL_CERTIFY, "--set", "sweep.sigma=[0.25,0.5]", "--set", "sweep.K=[1,5]"]

RUN_CASES = [
    ("posterior", "demo.json", []),
    ("posterior", "mixture.json", []),
    ("posterior", "union.json", []),
    ("region", "demo.json", []),
    ("region", "union.json", []),
    ("certify", "demo.json", SMALL_CERTIFY),
    ("certify", "mixture.json", SMALL_CERTIFY),
    ("certify", "union.json", SMALL_CERTIFY),
    ("sample", "demo.json", SMALL_SAMPLE),
    ("sample", "mixture.json", SMALL_SAMPLE),
    pytest.param("scoregap", "demo.json", SMALL_SCOREGAP, marks=pytest.mark.slow),
    pytest.param("scoregap", "mixture.json", SMALL_SCOREGAP, marks=pytest.mark.slow),
    ("sweep", "demo.json", SMALL_SWEEP),
]


def _outputs(out_dir):
    """Every produced file except the timestamped manifest, by name."""
    return {p.name: p.read_bytes() for p in sorted(out_dir.iterdir()) if p.name != "manifest.json"}


def _run(subcommand, config_name, overrides, out_dir, workers=1):
    argv = [subcommand, "--config", str(CONFIG_DIR / config_name), "--out", str(out_dir), "--workers", str(workers)]
    assert main([*argv, *overrides]) == EXIT_OK
    return _outputs(out_dir)


class TestDeterminism:
    """
    Tests reproducibility of every subcommand.

    This suite verifies that:
    - Two runs with the same seed write identical files
    - One worker and four workers write identical files
    """

    @pytest.mark.parametrize("subcommand, config_name, overrides", RUN_CASES)
    def test_runs_and_workers(self, tmp_path, subcommand, config_name, overrides):
        """Outputs other than manifest.json match byte for byte."""
        first = _run(subcommand, config_name, overrides, tmp_path / "first")
        second = _run(subcommand, config_name, overrides, tmp_path / "second")
        threaded = _run(subcommand, config_name, overrides, tmp_path / "threaded", workers=4)
        assert first
        assert first == second
        assert first == threaded


GOLDEN_DIR = Path(__file__).resolve().parent / "golden"

GOLDEN_CASES = [
    ("posterior", "demo.json", []),
    ("posterior", "mixture.json", []),
    ("region", "union.json", ["--set", "region.grid_resolution=50"]),
    ("region", "demo.json", ["--set", "region.grid_resolution=50"]),
    ("certify", "demo.json", SMALL_CERTIFY),
    ("certify", "union.json", SMALL_CERTIFY),
    ("sample", "demo.json", SMALL_SAMPLE),
]


class TestGoldenOutputs:
    """
    Tests the shipped configs against recorded outputs.

    This suite verifies that:
    - Every file a run writes, except manifest.json, equals its recorded copy
    - No file appears or disappears relative to the recording

    Recordings live in tests/experiment/golden/<subcommand>_<config>/ and
    are rewritten by `pytest --update-golden`.
    """

    @pytest.mark.parametrize("subcommand, config_name, overrides", GOLDEN_CASES)
    def test_matches_recording(self, tmp_path, update_golden, subcommand, config_name, overrides):
        """Byte-for-byte comparison with the recording."""
        produced = _run(subcommand, config_name, overrides, tmp_path)
        golden = GOLDEN_DIR / f"{subcommand}_{Path(config_name).stem}"
        if update_golden:
            if golden.exists():
                shutil.rmtree(golden)
            golden.mkdir(parents=True)
            for name, data in produced.items():
                (golden / name).write_bytes(data)
        if not golden.is_dir():
            pytest.skip(f"no recording at {golden}; run pytest --update-golden")
        assert produced == _outputs(golden)
