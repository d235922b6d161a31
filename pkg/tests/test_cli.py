import numpy as np
import pytest

from pydmobilenet import cli
from pydmobilenet.checkpoint import load_checkpoint
from pydmobilenet.data import write_cifar_split
from pydmobilenet.tensor import make_rng
from pydmobilenet.train import TrainConfig

SHORT = ["--model", "MobileNet-11-0.25", "--dataset", "synthetic", "--synthetic-size", "32",
         "--batch-size", "16", "--epochs", "2", "--lr-drops", "1", "--no-timing"]


def test_analyze_one_model(capsys):
    assert cli.main(["analyze", "PydMobileNet-Add-29-0.5"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("model: PydMobileNet-Add-29-0.5") and "FLOPs (MACs)" in out


def test_analyze_grid_csv(capsys, tmp_path):
    assert cli.main(["analyze", "--all-grid", "--format", "csv"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "model,depth,params,flops" and len(lines) == 23
    assert cli.main(["analyze", "--all-grid", "--format", "csv", "--flops-convention", "2macs",
                     "-o", str(tmp_path / "g.csv")]) == 0
    doubled = (tmp_path / "g.csv").read_text().strip().splitlines()
    a, b = lines[1].split(","), doubled[1].split(",")
    assert int(b[3]) == 2 * int(a[3]) and a[2] == b[2]


def test_analyze_csv_per_layer(capsys):
    assert cli.main(["analyze", "MobileNet-29-1", "--format", "csv", "--classes", "100"]) == 0
    rows = capsys.readouterr().out.strip().splitlines()
    assert rows[0] == "layer,out_shape,params,macs" and rows[-2].startswith("classifier,100,12900,")


def test_bad_name_is_a_clean_error(capsys):
    assert cli.main(["analyze", "NotANet-29-1"]) != 0
    err = capsys.readouterr().err
    assert "malformed model name" in err and "usage" in err


def test_default_run_config_is_reference_recipe():
    tc = cli.RunConfig().train_config()
    assert tc == TrainConfig()


def test_config_file_and_flag_precedence(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("# comment\nepochs = 7\nseed=3\naugment=false\nlr_drops=2,4\n")
    cfg = cli.resolve_run_config(cfg_file, {"epochs": 9, "seed": None})
    assert (cfg.epochs, cfg.seed, cfg.augment) == (9, 3, False)
    assert cfg.train_config().lr_drops == (2, 4)
    cfg_file.write_text("epochs=7\ncolour=blue\n")
    with pytest.raises(cli.UsageError, match="unknown key 'colour'"):
        cli.resolve_run_config(cfg_file)
    cfg_file.write_text("augment=maybe\n")
    with pytest.raises(cli.UsageError):
        cli.resolve_run_config(cfg_file)


def test_every_config_key_is_documented():
    for key in cli.RunConfig.__dataclass_fields__:
        assert key in cli.__doc__


def test_data_dir_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("PYDNET_DATA_DIR", str(tmp_path))
    assert cli.resolve_run_config().data_dir == str(tmp_path)
    monkeypatch.delenv("PYDNET_DATA_DIR")
    assert cli.resolve_run_config().data_dir == ""


def test_missing_dataset_is_an_error(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("PYDNET_DATA_DIR", raising=False)
    assert cli.main(["train", "--dataset", "cifar10", "--out", str(tmp_path)]) == 2
    assert "PYDNET_DATA_DIR" in capsys.readouterr().err
    assert cli.main(["train", "--data-dir", str(tmp_path), "--out", str(tmp_path)]) == 2
    assert "missing CIFAR file" in capsys.readouterr().err


def test_train_eval_resume(tmp_path, capsys):
    full, part = tmp_path / "full", tmp_path / "part"
    assert cli.main(["train", *SHORT, "--out", str(full)]) == 0
    ck = load_checkpoint(full / "final.pydn")
    assert ck.epoch == 2 and ck.tensors["meta/normalization"].shape == (6,)
    args = [a if a != "2" else "1" for a in SHORT]
    args[args.index("--lr-drops") + 1] = ""
    assert cli.main(["train", *args, "--out", str(part)]) == 0
    assert cli.main(["train", *SHORT, "--out", str(part), "--resume", str(part / "last.pydn")]) == 0
    assert (full / "metrics.csv").read_bytes() == (part / "metrics.csv").read_bytes()
    capsys.readouterr()
    assert cli.main(["eval", str(full / "final.pydn"), "--dataset", "synthetic", "--synthetic-size", "32"]) == 0
    assert "top-1 error" in capsys.readouterr().out
    assert cli.main(["eval", str(full / "final.pydn"), "--dataset", "cifar100", "--data-dir", str(tmp_path)]) == 2


def test_train_on_cifar_layout(tmp_path, capsys):
    rng = make_rng(0)
    for split, n in (("train", 50_000), ("test", 10_000)):
        px = np.zeros((n, 3, 32, 32), np.uint8)
        px[:, :, :4] = rng.integers(0, 256, (n, 3, 4, 32), dtype=np.uint8)
        write_cifar_split(tmp_path / "data", px, rng.integers(0, 10, n), split=split)
    code = cli.main(["train", "--model", "MobileNet-11-0.25", "--data-dir", str(tmp_path / "data"),
                     "--train-limit", "32", "--batch-size", "16", "--epochs", "1", "--lr-drops", "",
                     "--out", str(tmp_path / "run"), "--no-timing"])
    assert code == 0
    assert "(32 images)" in capsys.readouterr().out
    assert (tmp_path / "run" / "normalization_cifar10.txt").is_file()


def test_bench(capsys):
    times = cli.bench("MobileNet-11-0.25", batch_size=2, repeat=1, warmup=0)
    assert len(times) == 1 and times[0] >= 0
    assert cli.main(["bench", "MobileNet-11-0.25", "--batch-size", "2", "--repeat", "2"]) == 0
    assert "mean" in capsys.readouterr().out
    assert cli.build_parser().parse_args(["bench", "MobileNet-29-1"]).batch_size == 128
    with pytest.raises(cli.UsageError):
        cli.bench("MobileNet-11-0.25", repeat=0)
