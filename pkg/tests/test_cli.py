import json

import numpy as np
import pytest

from planflow import cli
from planflow.config import write_config, Config

from test_harness import TINY_OVERRIDES


SMOKE_OVERRIDES = dict(TINY_OVERRIDES)
SMOKE_OVERRIDES.update({
    "data.cases_per_stage": "60",
    "data.eval_cases": "4",
    "stage.I.steps": "4",
})


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cliws")
    cfg_path = root / "tiny.cfg"
    write_config(cfg_path, Config(dict(SMOKE_OVERRIDES)))
    return root


@pytest.fixture(scope="module")
def generated(workdir):
    data_dir = workdir / "data"
    rc = cli.main(["gen-data", "--config", str(workdir / "tiny.cfg"), "--stage", "I",
                   "--out", str(data_dir), "--seed", "0"])
    assert rc == 0
    rc = cli.main(["gen-data", "--config", str(workdir / "tiny.cfg"), "--stage", "eval",
                   "--out", str(data_dir), "--seed", "0"])
    assert rc == 0
    return data_dir


@pytest.fixture(scope="module")
def trained_ckpt(workdir, generated):
    out = workdir / "runs"
    rc = cli.main(["train", "--stage", "I", "--data", str(generated / "stage_I"),
                   "--config", str(workdir / "tiny.cfg"), "--out", str(out),
                   "--seed", "0", "--log-every", "0"])
    assert rc == 0
    ckpt = out / "stage_I_final.ckpt"
    assert ckpt.exists()
    return ckpt


class TestUsage:
    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["transmogrify"])
        assert exc.value.code == 2

    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["check", "--frobnicate"])
        assert exc.value.code == 2

    def test_check_green_path(self, capsys):
        assert cli.main(["check"]) == 0
        out = capsys.readouterr().out
        assert "invariants hold" in out


class TestGenData:
    def test_dataset_layout(self, generated):
        manifest = json.loads((generated / "stage_I" / "manifest.json").read_text())
        assert manifest["total"] == sum(manifest["counts"].values())
        assert (generated / "stage_I" / "records.jsonl").exists()
        assert (generated / "eval" / "cases" / "case_00000.json").exists()


class TestTrainErrors:
    def test_stage_three_without_prereqs_exits_1(self, workdir, generated):
        rc = cli.main(["train", "--stage", "III", "--data", str(generated / "stage_I"),
                       "--config", str(workdir / "tiny.cfg"), "--out", str(workdir / "x"),
                       "--seed", "0"])
        assert rc == 1


class TestEditDeterminism:
    def test_edit_twice_byte_identical(self, workdir, generated, trained_ckpt):
        case = str(generated / "eval" / "cases" / "case_00000.json")
        outs = []
        for name in ("e1", "e2"):
            out = workdir / name
            rc = cli.main(["edit", "--task", "v2v", "--case", case, "--seed", "7",
                           "--ckpt", str(trained_ckpt), "--config", str(workdir / "tiny.cfg"),
                           "--out", str(out)])
            assert rc == 0
            outs.append((out / "frames.pft").read_bytes() + (out / "report.txt").read_bytes())
        assert outs[0] == outs[1]

    def test_edit_task_mismatch(self, workdir, generated, trained_ckpt):
        case = str(generated / "eval" / "cases" / "case_00000.json")
        rc = cli.main(["edit", "--task", "t2i", "--case", case, "--seed", "7",
                       "--ckpt", str(trained_ckpt), "--config", str(workdir / "tiny.cfg"),
                       "--out", str(workdir / "em")])
        assert rc == 1

    def test_case_by_jsonl_index(self, workdir, generated, trained_ckpt):
        records = str(generated / "eval" / "records.jsonl") + ":0"
        rc = cli.main(["edit", "--case", records, "--seed", "3",
                       "--ckpt", str(trained_ckpt), "--config", str(workdir / "tiny.cfg"),
                       "--out", str(workdir / "e3")])
        assert rc == 0


class TestPlanRenderEval:
    def test_plan_outputs(self, workdir, generated, trained_ckpt):
        case = str(generated / "eval" / "cases" / "case_00000.json")
        out = workdir / "p1"
        rc = cli.main(["plan", "--case", case, "--ckpt", str(trained_ckpt),
                       "--config", str(workdir / "tiny.cfg"), "--seed", "1", "--out", str(out)])
        assert rc == 0
        from planflow import tensorio

        emb = tensorio.read_tensor(out / "embeddings.pft")
        assert emb.shape[0] > 0 and np.isfinite(emb).all()
        assert (out / "plan_report.txt").exists()

    def test_render_outputs(self, workdir, generated, trained_ckpt):
        case = str(generated / "eval" / "cases" / "case_00000.json")
        out = workdir / "r1"
        rc = cli.main(["render", "--case", case, "--ckpt", str(trained_ckpt),
                       "--config", str(workdir / "tiny.cfg"), "--seed", "1", "--out", str(out)])
        assert rc == 0
        from planflow import tensorio

        frames = tensorio.read_tensor(out / "frames.pft")
        assert frames.min() >= 0 and frames.max() <= 5

    def test_eval_writes_reports(self, workdir, generated, trained_ckpt):
        out = workdir / "ev1"
        rc = cli.main(["eval", "--data", str(generated / "eval"), "--ckpt", str(trained_ckpt),
                       "--config", str(workdir / "tiny.cfg"), "--seed", "1",
                       "--out", str(out), "--max-cases", "2"])
        assert rc == 0
        report = json.loads((out / "report.json").read_text())
        assert "per_task_success" in report and "runtime_seconds" in report
        assert (out / "report.txt").read_text().startswith("success.")
