import csv
import json

import numpy as np
import pytest

from cacl import cli, med
from cacl import tensor as T
from cacl.config import RunConfig
from conftest import TINY


def tiny_args(**changes):
    values = {**TINY, **changes}
    return [f"{k}={','.join(map(str, v)) if isinstance(v, tuple) else v}" for k, v in values.items()]


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_help_lists_every_key_with_default_and_origin(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for name, value in RunConfig().to_dict().items():
        assert f"  {name} = " in text
    assert "[training recipe]" in text and "[contrastive learning]" in text


def test_degrees_command(tmp_path):
    assert cli.main(["degrees", "--n", "8", "--draws", "400", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "degrees.csv")
    assert rows[0] == ["degree", "count", "frequency", "uniform_frequency"]
    assert [int(r[0]) for r in rows[1:]] == list(med.feasible_degrees(8))
    assert sum(int(r[1]) for r in rows[1:]) == 400
    assert (tmp_path / "degrees.png").stat().st_size > 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["command"] == "degrees" and manifest["inputs"]["n"] == "8"


def test_train_then_evaluate(tmp_path):
    run = tmp_path / "run"
    assert cli.main(["train", "--out", str(run), *tiny_args()]) == 0
    assert (run / "metrics.csv").exists() and (run / "training_curves.png").exists()
    ckpt = str(run / "checkpoint.ckpt")

    assert cli.main(["retrieve", "--checkpoint", ckpt, "--out", str(tmp_path / "r")]) == 0
    rows = read_csv(tmp_path / "r" / "retrieval.csv")
    assert [r[0] for r in rows[1:]] == ["1", "5"] and rows[1][2] == "trunk_max_pool"
    assert (tmp_path / "r" / "retrieval.png").exists()

    assert cli.main(["probe", "--checkpoint", ckpt, "--out", str(tmp_path / "p")]) == 0
    rows = read_csv(tmp_path / "p" / "probes.csv")
    assert [r[0] for r in rows[1:]] == ["sdp", "linear"]
    assert float(rows[1][2]) == pytest.approx(1 / 8)

    assert cli.main(["attention", "--checkpoint", ckpt, "--out", str(tmp_path / "a")]) == 0
    raw = np.loadtxt(tmp_path / "a" / "attention_raw.csv", delimiter=",")
    assert raw.shape == (17, 17)
    np.testing.assert_allclose(raw.sum(axis=1), 1.0, atol=1e-9)
    stats = dict(read_csv(tmp_path / "a" / "attention_stats.csv")[1:])
    assert "clip_edge_mean" in stats


def test_gen_data_and_pretrain(tmp_path):
    assert cli.main(["gen-data", "--out", str(tmp_path), *tiny_args()]) == 0
    rows = read_csv(tmp_path / "classes.csv")
    assert len(rows) == 9 and sum(int(r[2]) + int(r[3]) for r in rows[1:]) == 24
    assert cli.main(["pretrain-frames", "--out", str(tmp_path), *tiny_args()]) == 0
    assert len(read_csv(tmp_path / "pretrain_loss.csv")) == 2
    # the saved extractor is reused by a later run
    assert cli.main(["train", "--out", str(tmp_path / "t"), *tiny_args(epochs=1),
                     f"extractor_path={tmp_path / 'extractor.ckpt'}"]) == 0


def test_ablate_command(tmp_path):
    args = ["ablate", "--seeds", "0", "--arms", "random_init,vmoco", "--out", str(tmp_path), *tiny_args(epochs=1)]
    assert cli.main(args) == 0
    summary = read_csv(tmp_path / "ablation_summary.csv")
    assert [r[0] for r in summary[1:]] == ["random_init", "vmoco"]
    assert (tmp_path / "ablation_r1.png").exists()


@pytest.mark.parametrize("argv", [
    ["train", "epochs=lots"],
    ["train", "nonsense"],
    ["ablate", "--arms", "bogus"],
    ["train", "enable_nce=false", "enable_sdp=false"],
])
def test_config_errors_exit_2(tmp_path, argv, capsys):
    assert cli.main([*argv, "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert capsys.readouterr().err.startswith("error: ")


def test_missing_checkpoint_exits_3(tmp_path):
    assert cli.main(["retrieve", "--checkpoint", str(tmp_path / "none.ckpt"), "--out", str(tmp_path)]) == cli.EXIT_DATA


def test_numeric_fault_exits_4_and_dumps(tmp_path, monkeypatch):
    from cacl import train

    def explode(self, batch):
        raise T.NumericFault("non-finite value in relu")

    monkeypatch.setattr(train.Trainer, "compute_loss", explode)
    assert cli.main(["train", "--out", str(tmp_path), *tiny_args()]) == cli.EXIT_NUMERIC
    dump = json.loads((tmp_path / "fault_dump.json").read_text())
    assert dump["video_ids"]


def test_failed_degree_recheck_exits_5(tmp_path, monkeypatch):
    real = med.ShuffleSampler.sample

    def wrong(self):
        s = real(self)
        return med.ShuffleSample(s.perm, s.degree + 1, s.label)

    monkeypatch.setattr(med.ShuffleSampler, "sample", wrong)
    assert cli.main(["degrees", "--n", "6", "--draws", "5", "--out", str(tmp_path)]) == cli.EXIT_VERIFY
