import numpy as np
import pytest

from contrastive_fairness.classify import train_plain
from contrastive_fairness.cli import main
from contrastive_fairness.contrastive import load_contrastives
from contrastive_fairness.data import load_dataset, save_dataset, split
from contrastive_fairness.errors import ContractViolation
from contrastive_fairness.experiments import (ExperimentConfig, assert_train_only, cmd_benchmark, cmd_sweep,
                                              parse_overrides, read_config, read_rows, summarize, trend,
                                              write_config)
from contrastive_fairness.stargan import GanConfig

from .helpers import toy_dataset, toy_schema

ROW = "39, State-gov, 77516, Bachelors, 13, Never-married, Adm-clerical, Not-in-family, White, {sex}, 2174, 0, {h}, United-States, {y}"


def synthetic(n=400, dims=8, seed=0):
    rng = np.random.default_rng(seed)
    s = (rng.uniform(size=n) < 0.4).astype(int)
    X = rng.normal(size=(n, dims)) + 0.5 * s[:, None]
    y = (X[:, 0] + 0.5 * X[:, 1] + rng.normal(size=n) > 0.3).astype(int)
    return toy_dataset(X, y, s, toy_schema(dims))


SMALL = dict(test_n=100, folds=3, grid=(10.0, 1.0, 0.1), seeds=(0,),
             gan=GanConfig(epochs=1, batch_size=32, base_channels=2, n_res=1, d_hidden=(8, 8)))


@pytest.fixture
def prepared(tmp_path):
    save_dataset(synthetic(), tmp_path / "ds")
    return tmp_path / "ds"


def test_overrides_and_config_round_trip(tmp_path):
    cfg = parse_overrides({"seeds": "0, 1", "harden": "true", "gan.epochs": "3", "gan.d_hidden": "32 16",
                           "alpha": "0.05", "gan.max_steps": "none"})
    assert cfg.seeds == (0, 1) and cfg.harden and cfg.gan.epochs == 3 and cfg.gan.d_hidden == (32, 16)
    assert cfg.alpha == 0.05
    path = write_config(cfg, tmp_path / "c.txt")
    again = parse_overrides(read_config(path))
    assert again == cfg and again.hash() == cfg.hash()
    with pytest.raises(ContractViolation):
        parse_overrides({"bogus": "1"})
    with pytest.raises(ContractViolation):
        parse_overrides({"gan.bogus": "1"})
    with pytest.raises(ContractViolation):
        parse_overrides({"methods": "real, magic"})


def test_config_file_comments(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# experiment\nseeds = 3 4  # two repeats\ngan.lr_g = 0.001\n")
    cfg = parse_overrides(read_config(p))
    assert cfg.seeds == (3, 4) and cfg.gan.lr_g == 0.001


def test_prepare_is_byte_identical(tmp_path):
    raw = tmp_path / "adult.data"
    raw.write_text("\n".join(ROW.format(sex=sx, h=h, y=y) for sx, h, y in
                             [("Male", 40, "<=50K"), ("Female", 20, ">50K"), ("Male", 60, ">50K")]) + "\n")
    assert main(["prepare", "--raw", str(raw), "--out", str(tmp_path / "a")]) == 0
    assert main(["prepare", "--raw", str(raw), "--out", str(tmp_path / "b")]) == 0
    for name in ("dataset.csv", "schema.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert len(load_dataset(tmp_path / "a")) == 3


def test_exit_code_two_on_contract_violation(tmp_path, capsys):
    assert main(["prepare", "--raw", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2
    empty = tmp_path / "empty.data"
    empty.write_text("")
    assert main(["prepare", "--raw", str(empty), "--out", str(tmp_path / "o")]) == 2
    assert main(["benchmark", "--data", str(tmp_path), "--set", "nonsense=1"]) == 2
    assert "error:" in capsys.readouterr().err


def test_exit_code_three_on_divergence(tmp_path):
    ds = synthetic(64)
    X = ds.X.copy()
    X[3, 1] = np.inf
    save_dataset(toy_dataset(X, ds.y, ds.s, ds.schema), tmp_path / "bad")
    args = ["train-gan", "--data", str(tmp_path / "bad"), "--checkpoint", str(tmp_path / "g.json"),
            "--set", "test_n=0", "--set", "gan.epochs=1", "--set", "gan.batch_size=8", "--set", "gan.base_channels=2"]
    with np.errstate(all="ignore"):
        assert main(args) == 3


def test_benchmark_one_seed_all_methods(prepared, tmp_path):
    cfg = ExperimentConfig(data=str(prepared), out=str(tmp_path / "run"), **SMALL)
    rows, summary = cmd_benchmark(cfg)
    assert [r["method"] for r in rows] == list(cfg.methods)
    assert all(r["status"] == "ok" for r in rows)
    assert all(s["accuracy_std"] == 0.0 and s["tpr_gap_std"] == 0.0 for s in summary)
    csv_rows = read_rows(tmp_path / "run" / "results.csv")
    assert len(csv_rows) == 5
    head = (tmp_path / "run" / "results.csv").read_text().splitlines()[:3]
    assert head[0].startswith("# tool_version=") and head[1] == f"# config_hash={cfg.hash()}"
    cons = next(r for r in rows if r["method"] == "real+gan+consistency")
    assert 0 <= cons["coverage"] <= 1


def test_benchmark_rerun_is_identical(prepared, tmp_path):
    base = dict(data=str(prepared), methods=("real", "reweigh", "real+nn"), **SMALL)
    cmd_benchmark(ExperimentConfig(out=str(tmp_path / "a"), **base))
    cmd_benchmark(ExperimentConfig(out=str(tmp_path / "b"), **base))
    body = [[ln for ln in (tmp_path / d / "results.csv").read_text().splitlines() if not ln.startswith("#")]
            for d in "ab"]
    assert body[0] == body[1] and len(body[0]) == 4
    # the config snapshot reproduces the run
    snap = parse_overrides(read_config(tmp_path / "a" / "config.txt"))
    assert snap.hash() == ExperimentConfig(out=str(tmp_path / "a"), **base).hash()


def test_summary_of_single_seed_has_zero_std():
    rows = [{"method": "real", "seed": 0, "accuracy": 80.0, "tpr_gap": 3.0, "fpr_gap": 1.0, "ar_gap": 2.0,
             "ppv_gap": None, "npv_gap": 1.0, "coverage": 1.0, "status": "ok"},
            {"method": "real+gan", "seed": 0, "status": "failed: diverged"}]
    s = summarize(rows)
    assert s[0]["accuracy_std"] == 0.0 and s[0]["ppv_gap_mean"] is None
    assert s[1]["n_seeds"] == 0 and s[1]["accuracy_mean"] is None


def test_cli_benchmark_prints_summary(prepared, tmp_path, capsys):
    args = ["benchmark", "--data", str(prepared), "--out", str(tmp_path / "r"), "--methods", "real,reweigh",
            "--seeds", "0", "--set", "test_n=100", "--set", "folds=3", "--set", "grid=1, 0.1"]
    assert main(args) == 0
    out = capsys.readouterr().out
    assert "reweigh" in out and (tmp_path / "r" / "summary.csv").exists()


def test_sweep_at_full_size_equals_plain_training(prepared, tmp_path):
    ds = load_dataset(prepared)
    cfg = ExperimentConfig(data=str(prepared), out=str(tmp_path / "s"), **SMALL)
    train, test = split(ds, cfg.test_n, 0, repeat=0)
    sizes = np.bincount(train.s)
    cfg = ExperimentConfig(**{**cfg.__dict__, "majority": int(sizes.max())})
    rows = cmd_sweep(cfg, counts=(int(sizes.min()),))
    model, _ = train_plain(train, cfg.classifier(0))
    acc = 100 * np.mean(model.predict(test.X) == test.y)
    assert rows[0]["accuracy"] == pytest.approx(acc, abs=1e-9)
    assert (tmp_path / "s" / "sweep.csv").exists()


def test_sweep_counts_must_ascend(prepared, tmp_path):
    cfg = ExperimentConfig(data=str(prepared), out=str(tmp_path / "s"), **SMALL)
    with pytest.raises(ContractViolation):
        cmd_sweep(cfg, counts=(50, 20))


def test_trend_sign():
    rows = [{"minority_count": c, "g": 10 - c} for c in range(5)]
    assert trend(rows, "g") == pytest.approx(-1.0)


def test_gen_contrastive_and_mmd_commands(prepared, tmp_path, capsys):
    common = ["--data", str(prepared), "--set", "test_n=100"]
    out = tmp_path / "nn.csv"
    assert main(["gen-contrastive", "--mode", "nn", "--output", str(out)] + common) == 0
    ds = load_dataset(prepared)
    train, _ = split(ds, 100, 0)
    cs = load_contrastives(out, train.schema)
    assert len(cs) == len(train) and cs.meta["mode"] == "nn" and "config_hash" in cs.meta
    ck = tmp_path / "g.json"
    gan = ["--set", "gan.epochs=1", "--set", "gan.batch_size=32", "--set", "gan.base_channels=2",
           "--set", "gan.n_res=1", "--set", "gan.d_hidden=8 8"]
    assert main(["train-gan", "--checkpoint", str(ck)] + common + gan) == 0
    out_g = tmp_path / "gan.csv"
    assert main(["gen-contrastive", "--mode", "gan", "--checkpoint", str(ck), "--harden", "--part", "test",
                 "--output", str(out_g)] + common) == 0
    assert main(["gen-contrastive", "--mode", "gan", "--output", str(out_g)] + common) == 2  # no checkpoint
    mmd = tmp_path / "mmd.csv"
    assert main(["mmd", "--contrastive", str(out), "--output", str(mmd), "--set", "n_perm=99",
                 "--set", "mmd_samples=60"] + common) == 0
    text = mmd.read_text()
    assert text.startswith("# tool_version=") and "group,statistic,p,reject" in text


def test_leakage_guard():
    ds = synthetic(60)
    tr, te = split(ds, 20, 0)
    assert_train_only(tr, te, {"gan": tr.fingerprint()})
    with pytest.raises(ContractViolation, match="gan"):
        assert_train_only(tr, te, {"gan": te.fingerprint()})
