import csv
import json

import pytest

from selfroll.cli import main


@pytest.fixture
def tiny_cfg(tmp_path, tiny_run):
    path = tmp_path / "tiny.txt"
    tiny_run.save(path)
    return path


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_train_generate_eval(tmp_path, tiny_cfg, capsys):
    run = tmp_path / "run"
    assert main(["train", "--config", str(tiny_cfg), "--out-dir", str(run)]) == 0
    assert (run / "checkpoint.ckpt").exists() and (run / "config.txt").exists()
    ck = str(run / "checkpoint.ckpt")
    assert main(["generate", "--checkpoint", ck, "--out-dir", str(tmp_path / "g"), "--frames", "6"]) == 0
    seq = _rows(tmp_path / "g/sequence.csv")
    assert seq[0] == ["frame_index", "dim_0", "dim_1"] and len(seq) == 7
    assert _rows(tmp_path / "g/trace.csv")[0] == ["frame_index", "wall_ms", "attn_flops", "cumulative_ms"]
    assert main(["eval-drift", "--checkpoint", ck, "--out-dir", str(tmp_path / "d"), "--n-samples", "100",
                 "--null-boot", "5"]) == 0
    summary = json.loads((tmp_path / "d/drift_summary.json").read_text())
    assert set(summary["0"]) >= {"slope", "mean_mmd2", "null_band_99"}
    assert _rows(tmp_path / "d/drift_c0.csv")[0] == ["frame_index", "mmd2", "n_samples"]


def test_seed_override_changes_run(tmp_path, tiny_cfg):
    main(["train", "--config", str(tiny_cfg), "--out-dir", str(tmp_path / "a"), "--seed", "1"])
    main(["train", "--config", str(tiny_cfg), "--out-dir", str(tmp_path / "b"), "--seed", "2"])
    a, b = _rows(tmp_path / "a/metrics.csv"), _rows(tmp_path / "b/metrics.csv")
    assert [r[3] for r in a] != [r[3] for r in b]
    assert "seed = 1" in (tmp_path / "a/config.txt").read_text()


def test_bench_cache(tmp_path, tiny_cfg):
    out = tmp_path / "bench"
    assert main(["bench-cache", "--config", str(tiny_cfg), "--out-dir", str(out), "--m-list", "4,8",
                 "--window", "4", "--strides", "2", "--repeats", "1"]) == 0
    rows = _rows(out / "complexity.csv")
    assert rows[0] == ["strategy", "stride", "M", "frame_index", "attn_flops", "wall_ms"]
    assert {r[0] for r in rows[1:]} == {"rolling", "no-cache", "recompute-window"}
    assert len(rows) == 1 + 3 * (4 + 8)


def test_errors_exit_with_status_2(tmp_path, tiny_cfg, capsys):
    assert main(["generate", "--out-dir", str(tmp_path)]) == 2
    assert main(["train", "--config", str(tmp_path / "nope.txt"), "--out-dir", str(tmp_path)]) == 2
    bad = tmp_path / "bad.txt"
    bad.write_text("train.wrong = 1\n")
    assert main(["train", "--config", str(bad), "--out-dir", str(tmp_path)]) == 2
    assert "unknown config key" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["fly"])


def test_eval_drift_needs_enough_samples(tmp_path, tiny_cfg):
    main(["train", "--config", str(tiny_cfg), "--out-dir", str(tmp_path)])
    assert main(["eval-drift", "--checkpoint", str(tmp_path / "checkpoint.ckpt"), "--out-dir", str(tmp_path),
                 "--n-samples", "20"]) == 2


def test_threads_env(monkeypatch, tmp_path, tiny_cfg):
    monkeypatch.setenv("SELFROLL_THREADS", "2")
    assert main(["train", "--config", str(tiny_cfg), "--out-dir", str(tmp_path)]) == 0
