import pytest

from mkgc.cli import EXIT_INVARIANT, EXIT_IO, EXIT_OK, EXIT_USAGE, main, read_config, resolve
from mkgc.metrics import MetricsReport

FAST = ["--set", "d_model=8", "--set", "n_heads=2", "--set", "d_ff=16", "--set", "epochs=2", "--set",
        "entity_epochs=1", "--set", "n_fusion_layers=1"]


@pytest.fixture(scope="module")
def datasets(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    for task in ("link", "re", "ner"):
        assert main(["generate", "--task", task, "--out", str(root / task)]) == EXIT_OK
    return root


def test_generate_writes_config(datasets):
    cfg = read_config(datasets / "link" / "toy.cfg")
    assert cfg["task"] == "link" and cfg["eval_split"] == "train"
    assert (datasets / "link" / "entities.tsv").exists()


def test_train_link_smoke(datasets, tmp_path):
    out = tmp_path / "run"
    rc = main(["train", "--task", "link", "--config", str(datasets / "link" / "toy.cfg"), "--out", str(out), *FAST])
    assert rc == EXIT_OK
    for name in ("manifest.cfg", "model.mkgc", "report.txt"):
        assert (out / name).exists()
    rep = MetricsReport.from_text((out / "report.txt").read_text())
    assert rep.protocol == "filtered" and rep.count == 200


def test_manifest_reproduces_report(datasets, tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", str(datasets / "re" / "toy.cfg"), "--out", str(first), *FAST]) == EXIT_OK
    assert main(["train", "--config", str(first / "manifest.cfg"), "--out", str(second)]) == EXIT_OK
    assert (first / "report.txt").read_bytes() == (second / "report.txt").read_bytes()
    manifest = read_config(first / "manifest.cfg")
    assert manifest["command"] == "train" and manifest["d_model"] == "8" and "timestamp" in manifest


def test_k_shot_averages_over_seeds(datasets, tmp_path):
    out = tmp_path / "k"
    rc = main(["train", "--config", str(datasets / "re" / "toy.cfg"), "--out", str(out), "--k-shot", "5",
               "--seeds", "5", *FAST])
    assert rc == EXIT_OK
    assert sorted(p.name for p in out.glob("seed*")) == [f"seed{i}" for i in range(5)]
    rep = MetricsReport.from_text((out / "report.txt").read_text())
    assert rep.meta["runs"] == "5"


def test_layer_and_ablation_sweeps(datasets, tmp_path):
    out = tmp_path / "lm"
    assert main(["train", "--config", str(datasets / "ner" / "toy.cfg"), "--out", str(out), "--lm-layers", "1", "2",
                 *FAST]) == EXIT_OK
    rows = (out / "sweep.tsv").read_text().splitlines()
    assert rows[0].split("\t") == ["variable", "value", "precision", "recall", "f1", "count"]
    assert [r.split("\t")[1] for r in rows[1:]] == ["1", "2"]
    out = tmp_path / "ab"
    assert main(["train", "--config", str(datasets / "ner" / "toy.cfg"), "--out", str(out), "--ablate", "none",
                 "no_pgi", "no_caf", "independent", *FAST]) == EXIT_OK
    rows = (out / "sweep.tsv").read_text().splitlines()
    assert [r.split("\t")[1] for r in rows[1:]] == ["none", "no_pgi", "no_caf", "independent"]


def test_eval_and_inspect(datasets, tmp_path, capsys):
    out = tmp_path / "run"
    main(["train", "--config", str(datasets / "link" / "toy.cfg"), "--out", str(out), *FAST])
    trained = (out / "report.txt").read_text()
    capsys.readouterr()
    rc = main(["eval", "--config", str(out / "manifest.cfg"), "--checkpoint", str(out / "model.mkgc"),
               "--out", str(tmp_path / "ev")])
    assert rc == EXIT_OK
    evaluated = (tmp_path / "ev" / "report.txt").read_text()
    assert evaluated.splitlines()[:7] == trained.splitlines()[:7]
    capsys.readouterr()
    rc = main(["inspect", "--trace", "--config", str(out / "manifest.cfg"), "--checkpoint", str(out / "model.mkgc")])
    text = capsys.readouterr().out
    assert rc == EXIT_OK and text.startswith("layer 0\nlambda head=0 qrow=0 value=")
    assert "\nS\n" in text and "\nAgg\n" in text


def test_output_dir_from_environment(datasets, tmp_path, monkeypatch):
    monkeypatch.setenv("MKG_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["train", "--config", str(datasets / "re" / "toy.cfg"), *FAST]) == EXIT_OK
    assert (tmp_path / "env" / "manifest.cfg").exists()


def test_default_depth_is_three():
    mcfg, _, _ = resolve({})
    assert mcfg.n_fusion_layers == 3


def test_exit_statuses(tmp_path, datasets, capsys):
    assert main(["train", "--bogus"]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["train", "--config", str(tmp_path / "missing.cfg")]) == EXIT_IO
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour = blue\n")
    assert main(["train", "--config", str(bad)]) == EXIT_USAGE
    bad.write_text("no equals sign\n")
    assert main(["train", "--config", str(bad)]) == EXIT_IO
    assert main(["train", "--task", "re"]) == EXIT_USAGE  # no dataset
    assert main(["train", "--data", str(tmp_path / "nowhere"), "--task", "re", "--out", str(tmp_path / "o")]) == EXIT_IO
    assert main(["train", "--config", str(datasets / "re" / "toy.cfg"), "--ablate", "nonsense", *FAST,
                 "--out", str(tmp_path / "x")]) == EXIT_USAGE
    assert main(["verify", "--only", "no-such-suite"]) == EXIT_USAGE


def test_verify_filtering(capsys):
    assert main(["verify", "--only", "pgi-identity"]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith("PASS pgi-identity")


def test_verify_mutation_fails_gradient(capsys):
    assert main(["verify", "--only", "gradient", "--mutate"]) == EXIT_INVARIANT
    out = capsys.readouterr().out
    assert "FAIL gradient" in out and "w3" in out
