import json

import pytest

from repshift_export import ExportError, TaskSpec, train_toy_model
from repshift_export.engine_cli import run_engine
from repshift_export.cli import main


class TestTrainToyModel:
    def test_default_spec_trains_and_engine_agrees(self, tmp_path):
        summary = train_toy_model(0, TaskSpec(), tmp_path / "toy")
        assert summary["train_accuracy"] >= 0.95
        assert summary["probe_max_error"] < 1e-3

        # the engine must reach >= 0.9 on the exported task data
        config = tmp_path / "eval.yaml"
        config.write_text(
            "run: {mode: baseline, attn_impl: fused}\n"
            f"model: {{bundle: '{summary['container']}'}}\n"
            f"fixture: {{path: '{summary['task_data']}'}}\n"
        )
        report_path = tmp_path / "report.json"
        run_engine(["run", "--config", str(config), "--out", str(report_path)])
        report = json.loads(report_path.read_text())
        assert report["accuracy"] >= 0.9

    def test_seeded_training_is_reproducible(self, tmp_path):
        spec = TaskSpec(steps=40, target_accuracy=0.0)
        a = train_toy_model(7, spec, tmp_path / "a")
        b = train_toy_model(7, spec, tmp_path / "b")
        assert a["digest"] == b["digest"]
        bytes_a = (tmp_path / "a" / "model.rswc").read_bytes()
        bytes_b = (tmp_path / "b" / "model.rswc").read_bytes()
        assert bytes_a == bytes_b

    def test_zero_classes_rejected(self):
        with pytest.raises(ExportError):
            TaskSpec(n_classes=0)

    def test_convergence_failure_reported(self, tmp_path):
        spec = TaskSpec(steps=1, target_accuracy=0.99)
        with pytest.raises(ExportError) as exc:
            train_toy_model(0, spec, tmp_path / "fail")
        assert "convergence failure" in str(exc.value)


class TestCli:
    def test_train_subcommand(self, tmp_path, capsys):
        code = main(["train", "--out", str(tmp_path / "out"), "--seed", "1",
                     "--steps", "150"])
        assert code == 0
        assert (tmp_path / "out" / "model.rswc").exists()
        assert (tmp_path / "out" / "task.npz").exists()
        assert "accuracy" in capsys.readouterr().out

    def test_export_subcommand(self, tmp_path, capsys):
        import torch
        from repshift_export import ReferenceVit, RefVitConfig, save_checkpoint
        torch.manual_seed(3)
        model = ReferenceVit(RefVitConfig())
        ckpt = tmp_path / "m.pt"
        save_checkpoint(model, ckpt)
        out = tmp_path / "m.rswc"
        code = main(["export", str(ckpt), "--out", str(out)])
        assert code == 0
        assert out.exists()
        assert "digest" in capsys.readouterr().out

    def test_export_missing_checkpoint(self, tmp_path, capsys):
        code = main(["export", str(tmp_path / "nope.pt"), "--out",
                     str(tmp_path / "x.rswc")])
        assert code == 1
        err = json.loads(capsys.readouterr().err)
        assert err["error"]["category"] == "FileNotFound"
