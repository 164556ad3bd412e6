import filecmp
from pathlib import Path

import numpy as np
import pytest

from moeleak import cli, harness
from moeleak.moe import ConfigError, build_model, preset

PIA = """
[experiment]
name = pia-small
seed = 5

[attack]
kind = pia
attribute = gender

[corpus]
n_train = 120
n_test = 30

[channel]
names = l1l2, perf

[train]
epochs = 2
hidden = 32,16
"""

RRA = """
[experiment]
name = rra-small
seed = 2

[attack]
kind = rra

[corpus]
max_pairs = 150

[channel]
names = pageout, tlb
"""


def tree(root: Path):
    return sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file())


def same_tree(a: Path, b: Path):
    files = tree(a)
    assert files == tree(b)
    _, mismatch, errors = filecmp.cmpfiles(a, b, [str(f) for f in files], shallow=False)
    return not mismatch and not errors


# -- config -------------------------------------------------------------------------------


def test_parse_config_fields_and_overrides(tmp_path):
    cfg = harness.parse_config(PIA, out=tmp_path, seed=9, contention=2, workers=3)
    assert cfg.name == "pia-small" and cfg.seed == 9 and cfg.pia.seed == 9
    assert cfg.out == tmp_path and cfg.contention == 2 and cfg.workers == 3
    assert cfg.channels == ("l1l2", "perf") and cfg.pia.hidden == (32, 16) and cfg.n_test == 30
    assert cfg.noise.tlb.flip_prob > harness.ch.NoiseModel().tlb.flip_prob


def test_default_out_uses_name():
    assert harness.parse_config(PIA).out == Path("runs/pia-small")


def test_template_ranges():
    cfg = harness.parse_config("[corpus]\ntrain_templates = 0-2,7\ntest_templates = all\n")
    assert cfg.train_templates == (0, 1, 2, 7) and cfg.test_templates is None


@pytest.mark.parametrize("text", [
    "[model]\npreset = giant\n",
    "[attack]\nkind = via\n",
    "[attack]\nattribute = height\n",
    "[channel]\nnames = tlb\n",              # pia needs a load channel
    "[attack]\nkind = rra\n[channel]\nnames = perf\n",
    "[channel]\ncontention = 7\n",
    "[corpus]\nn_train = zero\n",
    "[corpus]\ndomains = legal\n",
    "[corpus]\ntrain_fraction = 1.5\n",
    "[corpus]\nunstructured = maybe\n",
    "not an ini file",
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        harness.parse_config(text)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        harness.load_config(tmp_path / "nope.ini")


# -- pipeline ----------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def pia_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("pia")
    cfg = harness.parse_config(PIA, out=out)
    return cfg, harness.run_pipeline(cfg)


@pytest.fixture(scope="module")
def rra_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("rra")
    cfg = harness.parse_config(RRA, out=out)
    return cfg, harness.run_pipeline(cfg)


def test_pia_pipeline_artifacts(pia_run):
    cfg, rep = pia_run
    for rel in ("corpus/train.tsv", "corpus/vocab.tsv", "profile/test.fp", "traces/l1l2.mtrc", "traces/perf.mtrc",
                "translated/l1l2.fp", "models/pia.model", "attack/direct.tsv", "reports/evaluate.csv"):
        assert (cfg.out / rel).exists(), rel
    assert {r.experiment for r in rep.rows} == {"pia-small:direct", "pia-small:l1l2", "pia-small:perf"}
    assert rep.get("pia-small:perf", "load_corr") > 0.95
    assert 0 <= rep.get("pia-small:direct", "gender_top1") <= 1
    assert harness.Report.read(cfg.out / "reports" / "evaluate.csv").rows == rep.rows


def test_rra_pipeline_metrics(rra_run):
    cfg, rep = rra_run
    assert rep.get("rra-small:pageout", "seq_accuracy") >= 0.99
    assert rep.get("rra-small:direct", "asr") >= 0.9
    assert (cfg.out / "corpus" / "train_pairs.tsv").exists()
    n_test = len(harness.io.read_pairs(cfg.out / "corpus" / "test_pairs.tsv"))
    n_train = len(harness.io.read_pairs(cfg.out / "corpus" / "train_pairs.tsv"))
    assert n_train == 135 and n_test == 15


def test_report_csv_header(rra_run):
    cfg, _ = rra_run
    lines = (cfg.out / "reports" / "evaluate.csv").read_text().splitlines()
    assert lines[0] == "experiment,metric,value,n,seed"


def test_replay_is_byte_identical(pia_run, tmp_path):
    cfg, _ = pia_run
    again = harness.parse_config(PIA, out=tmp_path)
    harness.run_pipeline(again)
    assert same_tree(cfg.out, tmp_path)


def test_stages_compose_and_workers_do_not_matter(rra_run, tmp_path):
    cfg, _ = rra_run
    staged = harness.parse_config(RRA, out=tmp_path, workers=2)
    for stage in harness.STAGES:
        harness.run_stage(staged, stage)
    assert same_tree(cfg.out, tmp_path)


def test_different_seed_changes_traces(rra_run, tmp_path):
    cfg, _ = rra_run
    other = harness.parse_config(RRA, out=tmp_path, seed=3)
    for stage in ("generate-corpus", "profile", "simulate"):
        harness.run_stage(other, stage)
    assert (tmp_path / "traces" / "tlb.mtrc").read_bytes() != (cfg.out / "traces" / "tlb.mtrc").read_bytes()


def test_cross_domain_split(tmp_path):
    cfg = harness.parse_config(RRA + "domains = general\ntest_domains = medical\n", out=tmp_path)
    harness.run_stage(cfg, "generate-corpus")
    train = harness.io.read_pairs(tmp_path / "corpus" / "train_pairs.tsv")
    test = harness.io.read_pairs(tmp_path / "corpus" / "test_pairs.tsv")
    assert len(train) == 135 and len(test) == 15


def test_missing_inputs_tagged(tmp_path):
    cfg = harness.parse_config(PIA, out=tmp_path)
    with pytest.raises(harness.StageError) as err:
        harness.run_stage(cfg, "translate")
    assert err.value.stage == "translate" and "missing input" in str(err.value)


def test_ttest_stage(tmp_path):
    cfg = harness.parse_config(PIA + "\n[ttest]\nn = 20\n", out=tmp_path)
    rep = harness.run_stage(cfg, "ttest")
    ab = rep.get("pia-small:ttest", "leaky_count[illness 0 vs 1]")
    ctrl = rep.get("pia-small:ttest", "leaky_count[illness 0 split]")
    assert ab > ctrl
    lines = (tmp_path / "ttest" / "ttest.csv").read_text().splitlines()
    assert lines[0] == "layer,expert,t" and len(lines) == 1 + 4 * 16


def test_illness_ttest_groups_differ():
    model = build_model(preset("toy"))
    ab, ctrl = harness.illness_ttest(model, 100, 97, 73, seed=0)
    assert ab.leaky_count > ctrl.leaky_count


def test_report_aggregates_runs(pia_run, rra_run, tmp_path):
    rep = harness.aggregate_reports(pia_run[0].out.parent)
    names = {r.experiment.split(":")[0] for r in rep.rows}
    assert {"pia-small", "rra-small"} <= names


# -- CLI ------------------------------------------------------------------------------------


def write(tmp_path, text):
    p = tmp_path / "c.ini"
    p.write_text(text)
    return str(p)


def test_cli_run_and_report(tmp_path, capsys):
    cfg = write(tmp_path, RRA)
    out = tmp_path / "run"
    assert cli.main(["run", "--config", cfg, "--out", str(out)]) == 0
    assert "rra-small:pageout,seq_accuracy" in capsys.readouterr().out
    assert cli.main(["report", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "summary.csv").read_text().startswith("experiment,metric,value,n,seed\n")


def test_cli_single_stages_and_channel_flag(tmp_path):
    cfg = write(tmp_path, RRA)
    out = str(tmp_path / "run")
    for stage in ("generate-corpus", "profile", "simulate"):
        assert cli.main([stage, "--config", cfg, "--out", out, "--channel", "tlb", "--contention", "3",
                         "--seed", "4", "--workers", "2"]) == 0
    assert sorted(p.name for p in (tmp_path / "run" / "traces").iterdir()) == ["tlb.mtrc"]


def test_cli_exit_codes(tmp_path, capsys):
    cfg = write(tmp_path, PIA)
    assert cli.main(["simulate", "--config", cfg, "--channel", "tlb", "--out", str(tmp_path)]) == 2
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "empty")]) == 3
    assert cli.main(["profile", "--config", str(tmp_path / "missing.ini")]) == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["simulate", "--contention", "9"])
    assert exc.value.code == 2
    err = capsys.readouterr().err
    assert "config error" in err and "stage 'train' failed" in err
