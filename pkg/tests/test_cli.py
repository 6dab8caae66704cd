import json
import os
import re
from pathlib import Path

import numpy as np
import pytest

from ricekit.cli import main
from ricekit.config import load_run_config, schema
from ricekit.errors import ConfigError

MICRO_INI = """
[run]
workers = 1

[cohort]
n_train_recurrence = 6
n_train_rice = 6
n_test_recurrence = 2
n_test_rice = 1

[phantom]
grid_shape = 20 20 20
brain_semi_axes_vox = 7.5 7.0 6.5
cavity_radius_vox = 1.2 1.8
lesion_radius_vox = 1.0 1.6
lesion_annulus_vox = 1.5
dose_sigma_vox = 4.5 5.5
dose_anisotropy = 0.9 1.15
texture_grid_vox = 5

[preprocess]
crop_shape = 20 20 20

[model]
base_width = 2
stem_kernel = 3

[train]
epochs = 2
batch_size = 4
"""


@pytest.fixture(scope="module")
def micro_ini(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "micro.ini"
    path.write_text(MICRO_INI)
    return str(path)


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory, micro_ini):
    """generate + preprocess once for the read-only CLI tests."""
    work = str(tmp_path_factory.mktemp("cli_ws"))
    assert main(["--config", micro_ini, "--workdir", work, "--seed", "4", "generate"]) == 0
    assert main(["--config", micro_ini, "--workdir", work, "--seed", "4", "preprocess"]) == 0
    return {"work": work, "ini": micro_ini}


class TestConfig:
    def test_empty_config_gives_defaults(self, tmp_path):
        empty = tmp_path / "empty.ini"
        empty.write_text("")
        cfg = load_run_config(str(empty))
        assert cfg.train.epochs == 60
        assert cfg.model.base_width == 8
        assert cfg.phantom.grid_shape == (64, 64, 64)
        assert cfg.occlusion.cube_size_vox == 8

    def test_no_config_gives_defaults(self):
        cfg = load_run_config(None)
        assert cfg.preprocess.normalize_mode == "masked"

    def test_unknown_key_rejected_with_field_name(self, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[train]\nlearning_rte = 0.1\n")
        with pytest.raises(ConfigError, match="learning_rte"):
            load_run_config(str(bad))

    def test_unknown_section_rejected(self, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[trainer]\nepochs = 2\n")
        with pytest.raises(ConfigError, match="trainer"):
            load_run_config(str(bad))

    def test_type_error_names_the_key(self, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[train]\nepochs = soon\n")
        with pytest.raises(ConfigError, match=r"\[train\] epochs"):
            load_run_config(str(bad))

    def test_seed_propagates(self, micro_ini):
        cfg = load_run_config(micro_ini, seed=9)
        assert cfg.phantom.seed == 9 and cfg.train.seed == 9


class TestExitCodes:
    def test_config_error_exit_2(self, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[train]\nepochs = zero\n")
        assert main(["--config", str(bad), "--workdir", str(tmp_path), "generate"]) == 2

    def test_missing_config_file_exit_2(self, tmp_path):
        assert main(["--config", str(tmp_path / "nope.ini"),
                     "--workdir", str(tmp_path), "generate"]) == 2

    def test_infeasible_generation_exit_3(self, tmp_path):
        bad = tmp_path / "infeasible.ini"
        # cavity radius swallows the high-dose shell: RICE placement must fail
        bad.write_text("\n".join([
            "[cohort]", "n_train_recurrence = 1", "n_train_rice = 6",
            "n_test_recurrence = 0", "n_test_rice = 0",
            "[phantom]", "grid_shape = 20 20 20",
            "brain_semi_axes_vox = 7.5 7.0 6.5",
            "cavity_radius_vox = 5.0 5.5", "dose_sigma_vox = 2.0 2.4",
            "lesion_radius_vox = 1.0 1.4", "texture_grid_vox = 5",
        ]) + "\n")
        assert main(["--config", str(bad), "--workdir", str(tmp_path), "generate"]) == 3

    def test_missing_results_exit_3(self, tmp_path):
        assert main(["--workdir", str(tmp_path), "report"]) == 3


class TestHelpDocDrift:
    def test_help_lists_every_config_key_with_default(self, capsys):
        with pytest.raises(SystemExit):
            main(["--help"])
        text = capsys.readouterr().out
        for section, keys in schema().items():
            assert f"[{section}]" in text, section
            for key, default in keys.items():
                shown = " ".join(str(v) for v in default) if isinstance(default, tuple) else default
                assert f"{key} = {shown}" in text, f"{section}.{key}"


class TestPipelineCommands:
    def test_generate_writes_manifest_and_truth(self, cli_workspace):
        work = cli_workspace["work"]
        manifest = json.loads(Path(work, "cohort", "manifest.json").read_text())
        assert len(manifest["subjects"]) == 15
        assert os.path.exists(os.path.join(work, "cohort", "sub-000", "truth.json"))
        assert os.path.exists(os.path.join(work, "config_snapshot.ini"))

    def test_generate_deterministic_across_directories(self, micro_ini, tmp_path):
        for sub in ("g1", "g2"):
            assert main(["--config", micro_ini, "--workdir", str(tmp_path / sub),
                         "--seed", "7", "generate"]) == 0
        a = (tmp_path / "g1" / "cohort" / "sub-002" / "post_op.raw").read_bytes()
        b = (tmp_path / "g2" / "cohort" / "sub-002" / "post_op.raw").read_bytes()
        assert a == b

    def test_preprocess_then_train_and_report_flow(self, cli_workspace):
        work = cli_workspace["work"]
        ini = cli_workspace["ini"]
        assert main(["--config", ini, "--workdir", work, "--seed", "4",
                     "train", "--combo", "3", "--fold", "0"]) == 0
        assert os.path.exists(os.path.join(work, "train", "combo3_fold0_best.json"))
        assert os.path.exists(os.path.join(work, "folds.json"))

        assert main(["--config", ini, "--workdir", work, "--seed", "4",
                     "ablate", "--combos", "3"]) == 0
        results_path = os.path.join(work, "ablation", "ablation_results.json")
        results = json.loads(Path(results_path).read_text())
        assert len(results["combos"]) == 1
        assert results["combos"][0]["combo_index"] == 3

        assert main(["--config", ini, "--workdir", work, "report",
                     "--results", results_path]) == 0
        svg = Path(work, "figure2.svg").read_text()
        assert len(re.findall(r'id="bar-(?:val|test)-\d+"', svg)) == 2

    def test_evaluate_checkpoints(self, cli_workspace):
        work = cli_workspace["work"]
        ini = cli_workspace["ini"]
        ck = os.path.join(work, "train", "combo3_fold0_best")
        assert main(["--config", ini, "--workdir", work, "evaluate",
                     "--checkpoint", ck]) == 0
        doc = json.loads(Path(work, "evaluation.json").read_text())
        assert "ensemble_test_macro_f1" in doc
        assert len(doc["subjects"]) == 3

    def test_evaluate_even_checkpoint_count_uses_probability_tiebreak(self, cli_workspace):
        work = cli_workspace["work"]
        ini = cli_workspace["ini"]
        cks = [os.path.join(work, "ablation", f"combo3_fold{f}_best") for f in (0, 1)]
        assert main(["--config", ini, "--workdir", work, "evaluate",
                     "--checkpoint", cks[0], cks[1],
                     "--out", os.path.join(work, "evaluation_pair.json")]) == 0
        doc = json.loads(Path(work, "evaluation_pair.json").read_text())
        assert len(doc["models"]) == 2
        assert set(doc["subjects"].values()) <= {0, 1}

    def test_occlude_writes_map_and_three_overlays(self, cli_workspace):
        work = cli_workspace["work"]
        ini = cli_workspace["ini"]
        manifest = json.loads(Path(work, "preprocessed", "manifest.json").read_text())
        test_subject = next(s["subject_id"] for s in manifest["subjects"]
                            if s["split"] == "TEST")
        ck = os.path.join(work, "train", "combo3_fold0_best")
        assert main(["--config", ini, "--workdir", work, "occlude",
                     "--subject", test_subject, "--checkpoint", ck,
                     "--cube", "6", "--stride", "6"]) == 0
        occ = os.path.join(work, "occlusion")
        assert os.path.exists(os.path.join(occ, f"{test_subject}_map.raw"))
        assert os.path.exists(os.path.join(occ, f"{test_subject}_map.meta.json"))
        pngs = [f for f in os.listdir(occ) if f.endswith(".png")]
        assert len(pngs) == 3

    def test_report_reproduces_bundled_reference(self, tmp_path):
        import matplotlib

        repo = Path(__file__).resolve().parent.parent
        sample = repo / "assets" / "sample_report"
        assert main(["--workdir", str(tmp_path), "report",
                     "--results", str(sample / "ablation_results.json"),
                     "--out-csv", str(tmp_path / "out.csv"),
                     "--out-svg", str(tmp_path / "out.svg"),
                     "--paper-reference"]) == 0
        # rendering is deterministic within one environment
        assert main(["--workdir", str(tmp_path), "report",
                     "--results", str(sample / "ablation_results.json"),
                     "--out-csv", str(tmp_path / "out2.csv"),
                     "--out-svg", str(tmp_path / "out2.svg"),
                     "--paper-reference"]) == 0
        assert (tmp_path / "out.svg").read_bytes() == (tmp_path / "out2.svg").read_bytes()
        assert (tmp_path / "out.csv").read_bytes() == (sample / "ablation_results.csv").read_bytes()
        meta = json.loads((sample / "meta.json").read_text())
        if matplotlib.__version__ == meta["matplotlib_version"]:
            assert (tmp_path / "out.svg").read_bytes() == (sample / "figure2.svg").read_bytes()
        else:
            pytest.skip(f"reference SVG rendered with matplotlib {meta['matplotlib_version']}")

    def test_ablate_reuses_existing_folds(self, cli_workspace):
        work = cli_workspace["work"]
        folds_before = Path(work, "folds.json").read_bytes()
        assert main(["--config", cli_workspace["ini"], "--workdir", work, "--seed", "4",
                     "ablate", "--combos", "2"]) == 0
        assert Path(work, "folds.json").read_bytes() == folds_before
