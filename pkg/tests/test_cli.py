import csv
import json

import numpy as np
import pytest

from ldlreid.cli import main
from ldlreid.experiment import ConfigError, load_config, validate_doc
from ldlreid.ldl_engine import load_matrix, mass_law_residual

TINY = """\
# small enough to train in well under a second per run
domain_count = 4
classes_per_domain = 4
samples_per_class = 8
latent_dim = 4
input_dim = 8
total_epochs = 3
decay_epochs = 1, 2
ids_per_domain = 2
images_per_id = 4
hidden_dim = 16
feature_dim = 8
"""


@pytest.fixture
def workdir(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY)
    return tmp_path, ["--config", str(cfg), "--out", str(tmp_path / "out")]


def without_meta(doc):
    return {k: v for k, v in doc.items() if k != "meta"}


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_generate_writes_manifest_and_refuses_overwrite(workdir):
    tmp, common = workdir
    assert main(["generate", *common]) == 0
    ddir = tmp / "out" / "data"
    manifest = json.loads((ddir / "manifest.json").read_text())
    validate_doc(manifest, "manifest")
    assert manifest["source_classes_per_domain"] == [4, 4, 4]
    assert manifest["target_class_count"] == 4
    first = {p.name: p.read_bytes() for p in ddir.glob("*.csv")}
    assert main(["generate", *common]) == 1
    assert main(["generate", *common, "--force"]) == 0
    assert {p.name: p.read_bytes() for p in ddir.glob("*.csv")} == first
    assert without_meta(json.loads((ddir / "manifest.json").read_text())) == without_meta(manifest)


def test_train_eval_pipeline(workdir):
    tmp, common = workdir
    assert main(["generate", *common]) == 0
    assert main(["train", *common, "--variant", "baseline", "--variant", "LDL-3"]) == 0
    runs = tmp / "out" / "runs"
    base = json.loads((runs / "baseline" / "seed-0" / "history.json").read_text())
    ldl3 = json.loads((runs / "LDL-3" / "seed-0" / "history.json").read_text())
    for doc in (base, ldl3):
        validate_doc(doc, "history")
        assert len(doc["epochs"]) == 3
    assert all(e["ldl"] == {} for e in base["epochs"])
    assert all(e["ldl"]["mass_law_residual"] < 1e-9 for e in ldl3["epochs"])
    ml, layout, meta = load_matrix(runs / "LDL-3" / "seed-0" / "label_dist.csv")
    assert meta["epoch"] == "3"
    assert mass_law_residual(ml, layout) < 1e-9

    assert main(["train", *common, "--variant", "LDL-3"]) == 1
    assert main(["eval", *common, "--variant", "LDL-3", "--source-eval"]) == 0
    rdir = runs / "LDL-3" / "seed-0"
    reports = sorted(p.name for p in rdir.glob("report_*.json"))
    assert reports == ["report_source-0.json", "report_source-1.json", "report_source-2.json", "report_target.json"]
    for name in reports:
        doc = json.loads((rdir / name).read_text())
        validate_doc(doc, "eval_report")
        assert doc["context"]["variant"] == "LDL-3"
    src_ids = {r["class_id"] for r in read_csv(tmp / "out" / "data" / "source.csv")}
    tgt_ids = {r["class_id"] for r in read_csv(tmp / "out" / "data" / "target.csv")}
    assert src_ids.isdisjoint(tgt_ids)

    first = without_meta(json.loads((rdir / "report_target.json").read_text()))
    assert main(["train", *common, "--variant", "LDL-3", "--force"]) == 0
    assert main(["eval", *common, "--variant", "LDL-3"]) == 0
    assert without_meta(json.loads((rdir / "report_target.json").read_text())) == first

    assert main(["report", *common, "--matrix", str(rdir / "tracking.csv")]) == 0


def test_ablate_outputs(workdir, capsys):
    tmp, common = workdir
    args = ["ablate", *common, "--variant", "baseline", "--variant", "LDL-3", "--variant", "onehot-compare",
            "--set", "repeats=2", "--set", "sweep_m=0.1,0.5"]
    assert main(args) == 0
    adir = tmp / "out" / "ablation"
    rows = read_csv(adir / "results.csv")
    per_run = [r for r in rows if r["seed"] not in ("mean", "std")]
    assert sorted((r["variant"], r["seed"]) for r in per_run) == sorted(
        (v, s) for v in ("baseline", "LDL-3", "onehot", "pinned") for s in ("0", "1"))
    assert {(r["variant"], r["seed"]) for r in rows if r["seed"] in ("mean", "std")} == {
        (v, s) for v in ("baseline", "LDL-3", "onehot", "pinned") for s in ("mean", "std")}
    sim = read_csv(adir / "similarity.csv")
    assert set(sim[0]) >= {"OD-1", "OD-2", "diff"}
    assert {r["variant"] for r in sim} == {"baseline", "LDL-3"}
    sweep = read_csv(adir / "sweep.csv")
    assert len(sweep) == 4 and {r["param"] for r in sweep} == {"m"}
    doc = json.loads((adir / "results.json").read_text())
    validate_doc(doc, "ablation")
    assert doc["config"]["train"]["ids_per_domain_per_batch"] == 2
    assert "mAP" in capsys.readouterr().out

    csv_bytes = (adir / "results.csv").read_bytes()
    assert main(args) == 1
    assert main(args + ["--force"]) == 0
    assert (adir / "results.csv").read_bytes() == csv_bytes
    assert without_meta(json.loads((adir / "results.json").read_text())) == without_meta(doc)
    assert main(["report", *common]) == 0


def test_ablate_needs_two_variants(workdir):
    _, common = workdir
    assert main(["ablate", *common, "--variant", "LDL-3"]) == 1


def test_exit_codes(workdir, capsys):
    tmp, common = workdir
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["train", "--seed", "notanint"])
    assert exc.value.code == 1
    assert main(["generate", *common, "--set", "no_such_key=1"]) == 1
    assert main(["generate", *common, "--variant", "LDL-7"]) == 1
    assert main(["eval", *common]) == 2
    assert main(["report", *common]) == 2


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("seed = 3\nmomentum_m = 0.5\nlambda = 2\nclasses_per_domain = 5, 6, 7\ndomain_count = 3\n")
    base = load_config(cfg)
    assert base.seed == 3 and base.train.seed == 3 and base.spec.seed == 3
    assert base.train.momentum_m == 0.5 and base.train.lam == 2.0
    assert base.spec.classes_per_domain == (5, 6, 7)
    over = load_config(cfg, {"momentum_m": "0.1"})
    assert over.train.momentum_m == 0.1 and over.train.lam == 2.0
    defaults = load_config()
    assert defaults.train.momentum_m == 0.2 and defaults.train.lam == 1.0
    assert defaults.train.ids_per_domain_per_batch == 16 and defaults.train.images_per_id == 4


@pytest.mark.parametrize("text", ["bogus = 1", "no equals sign", "repeats = 0", "metric = chebyshev",
                                  "source_eval = maybe", "momentum_m = x"])
def test_config_errors(tmp_path, text):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(text + "\n")
    with pytest.raises(ConfigError):
        load_config(cfg)


def test_seeds_are_paired(workdir):
    tmp, common = workdir
    assert main(["ablate", *common, "--variant", "baseline", "--variant", "LDL-1", "--seed", "5"]) == 0
    rows = read_csv(tmp / "out" / "ablation" / "results.csv")
    seeds = {r["variant"]: r["seed"] for r in rows if r["seed"] not in ("mean", "std")}
    assert seeds == {"baseline": "5", "LDL-1": "5"}
    assert np.isfinite(float(rows[0]["map"]))
