import json
from pathlib import Path

import numpy as np
import pytest

from xmcl.cli import main
from xmcl.data import load_task


def write_config(path: Path, **overrides) -> Path:
    payload = {
        "tasks": [
            {
                "task_id": 0,
                "latent_dim": 6,
                "feature_dim": 16,
                "num_train_ids": 12,
                "num_test_ids": 6,
                "sketches_per_id": 3,
                "photos_per_id": 3,
                "modality_gap": 1.4,
                "task_shift": 0.0,
                "noise_sigma": 0.2,
                "seed": 0,
            },
            {
                "task_id": 1,
                "latent_dim": 6,
                "feature_dim": 16,
                "num_train_ids": 12,
                "num_test_ids": 6,
                "sketches_per_id": 3,
                "photos_per_id": 3,
                "modality_gap": 1.4,
                "task_shift": 1.5,
                "noise_sigma": 0.2,
                "seed": 0,
            },
        ],
        "schedule": {
            "epochs_first_task": 10,
            "epochs_later_tasks": 6,
            "warmup_epochs": 2,
            "base_lr": 1e-2,
            "warmup_start_lr": 1e-3,
            "decay_epochs": [8],
        },
        "encoder": {"hidden_dims": [16, 16], "embedding_dim": 8},
        "pk": {"p": 4, "k": 2},
        "arms": ["full", "no_mpm"],
        "seed": 0,
        "seeds": 1,
    }
    payload.update(overrides)
    path.write_text(json.dumps(payload))
    return path


SPEC_PAYLOAD = {
    "task_id": 0,
    "latent_dim": 4,
    "feature_dim": 8,
    "num_train_ids": 6,
    "num_test_ids": 3,
    "seed": 5,
}


class TestGenData:
    def test_valid_spec_round_trips(self, tmp_path):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps(SPEC_PAYLOAD))
        out = tmp_path / "task.jsonl"
        assert main(["gen-data", "--spec", str(spec), "--out", str(out)]) == 0
        ds = load_task(out)
        assert len(ds.train_identities) == 6

    def test_byte_identical_regeneration(self, tmp_path):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps(SPEC_PAYLOAD))
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        main(["gen-data", "--spec", str(spec), "--out", str(a)])
        main(["gen-data", "--spec", str(spec), "--out", str(b)])
        assert a.read_bytes() == b.read_bytes()

    def test_zero_identities_exit_2(self, tmp_path, capsys):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({**SPEC_PAYLOAD, "num_train_ids": 0}))
        code = main(["gen-data", "--spec", str(spec), "--out", str(tmp_path / "x.jsonl")])
        assert code == 2
        assert "num_train_ids" in capsys.readouterr().err


class TestRun:
    def test_arms_write_expected_files(self, tmp_path):
        config = write_config(tmp_path / "config.json")
        out = tmp_path / "runs"
        assert main(["run", "--config", str(config), "--out", str(out)]) == 0
        for arm in ("full", "no_mpm"):
            run_dir = out / arm / "seed_0"
            assert (run_dir / "report.json").exists()
            assert (run_dir / "metrics.csv").exists()
            assert (run_dir / "banks.jsonl").exists()
        report = json.loads((out / "full" / "seed_0" / "report.json").read_text())
        assert [s["step"] for s in report["steps"]] == [1, 2, 3, 4, 5]
        # the anti-forgetting comparison is a diff of the two arms' files
        full_csv = (out / "full" / "seed_0" / "metrics.csv").read_text()
        ablation_csv = (out / "no_mpm" / "seed_0" / "metrics.csv").read_text()
        assert full_csv.split("\n")[0] == ablation_csv.split("\n")[0]
        # no_mpm stores nothing in the banks
        assert (out / "no_mpm" / "seed_0" / "banks.jsonl").read_text() == ""

    def test_byte_identical_reruns(self, tmp_path):
        config = write_config(tmp_path / "config.json")
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        main(["run", "--config", str(config), "--out", str(out1), "--arm", "full"])
        main(["run", "--config", str(config), "--out", str(out2), "--arm", "full"])
        for name in ("report.json", "metrics.csv", "banks.jsonl"):
            assert (out1 / "full/seed_0" / name).read_bytes() == (
                out2 / "full/seed_0" / name
            ).read_bytes()

    def test_reverse_order_same_schema(self, tmp_path):
        config = write_config(tmp_path / "config.json", arms=["full"])
        out = tmp_path / "runs"
        assert (
            main(["run", "--config", str(config), "--out", str(out), "--reverse-order"]) == 0
        )
        report = json.loads((out / "full" / "seed_0" / "report.json").read_text())
        assert report["task_ids"] == [1, 0]
        assert [s["step"] for s in report["steps"]] == [1, 2, 3, 4, 5]

    def test_missing_key_exit_2(self, tmp_path, capsys):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"schedule": {}}))
        code = main(["run", "--config", str(config), "--out", str(tmp_path / "runs")])
        assert code == 2
        assert "tasks" in capsys.readouterr().err

    def test_unknown_arm_exit_2(self, tmp_path):
        config = write_config(tmp_path / "config.json", arms=["bogus"])
        assert main(["run", "--config", str(config), "--out", str(tmp_path / "runs")]) == 2


class TestScore:
    def test_hand_case(self, tmp_path, capsys):
        inp = tmp_path / "pi.jsonl"
        inp.write_text("[0.6,0.3,0.1]\n")
        assert main(["score", "--input", str(inp)]) == 0
        row = json.loads(capsys.readouterr().out.strip())
        assert row["set_size"] == 3
        assert np.isclose(row["conf"], 0.5)
        assert np.isclose(row["unc"], 3.5)
        assert row["members"] == [0, 1, 2]

    def test_uniform_hundred(self, tmp_path, capsys):
        inp = tmp_path / "pi.jsonl"
        inp.write_text(json.dumps([0.01] * 100) + "\n")
        main(["score", "--input", str(inp)])
        row = json.loads(capsys.readouterr().out.strip())
        assert row["set_size"] == 25
        assert row["unc"] == 25.0

    def test_object_rows_and_file_output(self, tmp_path):
        inp = tmp_path / "pi.jsonl"
        inp.write_text('{"pi":[0.9,0.05,0.05]}\n')
        out = tmp_path / "scored.jsonl"
        assert main(["score", "--input", str(inp), "--out", str(out), "--tau", "0.92"]) == 0
        row = json.loads(out.read_text().strip())
        assert row["set_size"] == 1
        assert row["unc"] == 1.0

    def test_invalid_simplex_exit_2(self, tmp_path, capsys):
        inp = tmp_path / "pi.jsonl"
        inp.write_text("[0.9,0.9]\n")
        assert main(["score", "--input", str(inp)]) == 2
        assert "line 1" in capsys.readouterr().err


class TestReport:
    def run_once(self, tmp_path, arms=("full", "no_mpm")):
        config = write_config(tmp_path / "config.json", arms=list(arms))
        out = tmp_path / "runs"
        main(["run", "--config", str(config), "--out", str(out)])
        return out

    def test_summary_table(self, tmp_path, capsys):
        out = self.run_once(tmp_path)
        assert main(["report", str(out)]) == 0
        text = capsys.readouterr().out
        assert "full" in text and "no_mpm" in text
        assert "avg" in text
        assert (out / "summary.csv").exists()
        lines = (out / "summary.csv").read_text().strip().split("\n")
        assert lines[0] == "arm,step,task_id,mAP,r1"
        # 2 arms x 5 steps x (2 tasks + avg)
        assert len(lines) == 1 + 2 * 5 * 3

    def test_partial_run_warns(self, tmp_path, capsys):
        out = self.run_once(tmp_path, arms=("full",))
        # simulate an interrupted second arm: directory with no metrics
        (out / "no_mpm" / "seed_0").mkdir(parents=True)
        assert main(["report", str(out)]) == 0
        text = capsys.readouterr().out
        assert "full" in text

    def test_diff_table(self, tmp_path, capsys):
        out = self.run_once(tmp_path, arms=("full",))
        out2 = tmp_path / "runs2"
        config = write_config(tmp_path / "config2.json", arms=["full"], seed=1)
        main(["run", "--config", str(config), "--out", str(out2)])
        assert main(["report", str(out), "--diff", str(out2)]) == 0
        text = capsys.readouterr().out
        assert "diff vs" in text
        assert "dmAP" in text

    def test_self_diff_is_all_zero(self, tmp_path, capsys):
        out = self.run_once(tmp_path, arms=("full",))
        main(["report", str(out), "--diff", str(out)])
        text = capsys.readouterr().out
        diff_section = text.split("diff vs")[1]
        deltas = [
            float(v)
            for line in diff_section.strip().split("\n")[2:]
            if not line.startswith(("warning", "wrote"))
            for v in line.split()[-2:]
        ]
        assert deltas and all(d == 0.0 for d in deltas)

    def test_empty_dir_exit_2(self, tmp_path):
        empty = tmp_path / "nothing"
        empty.mkdir()
        assert main(["report", str(empty)]) == 2
