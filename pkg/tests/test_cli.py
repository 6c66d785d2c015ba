import csv
import subprocess
import sys

import numpy as np
import pytest

from mdistmult.cli import main, parse_args
from mdistmult.kg import build_filter_index, load_triples, read_vocab
from mdistmult.model import ModelConfig, init_parameters, load_checkpoint, score_all
from mdistmult.synthetic import ToySpec, write_splits

from conftest import toy_triples

FAST = ["--lr", "0.01", "--dropout", "0", "--batch-size", "64"]


@pytest.fixture
def raw_toy(tmp_path):
    raw = tmp_path / "raw"
    raw.mkdir()
    names = {0: "next", 1: "skip"}
    lines = [f"e{h}\t{names[r]}\te{t}\n" for h, r, t in toy_triples()]
    (raw / "train.tsv").write_text("".join(lines))
    (raw / "valid.tsv").write_text(lines[3])
    (raw / "test.tsv").write_text("".join(lines[:5]))
    return raw


@pytest.fixture
def prepared(raw_toy, tmp_path, capsys):
    out = tmp_path / "data"
    assert main(["prepare", "--train", str(raw_toy / "train.tsv"), "--valid", str(raw_toy / "valid.tsv"),
                 "--test", str(raw_toy / "test.tsv"), "--out", str(out)]) == 0
    capsys.readouterr()
    return out


def split_args(d, *names):
    args = []
    for name in names or ("train", "valid", "test"):
        args += [f"--{name}", str(d / f"{name}.tsv")]
    return args


@pytest.fixture
def memorized(prepared, tmp_path, capsys):
    ckpt = tmp_path / "toy.ckpt"
    code = main(["train", *split_args(prepared, "train"), "--dim", "16", "--n-modules", "2", "--epochs", "200",
                 *FAST, "--checkpoint", str(ckpt), "--out", str(tmp_path / "run")])
    assert code == 0
    capsys.readouterr()
    return ckpt


def test_prepare_reports_counts_and_writes_files(raw_toy, tmp_path, capsys):
    out = tmp_path / "data"
    code = main(["prepare", *split_args(raw_toy), "--out", str(out)])
    assert code == 0
    report = dict(line.split("\t") for line in capsys.readouterr().out.splitlines())
    assert report == {"entities": "10", "relations": "4", "train_triples": "40", "valid_triples": "2", "test_triples": "10"}
    vocab = read_vocab(out)
    assert vocab.id_to_relation == ("next", "skip", "next_reverse", "skip_reverse")
    train = load_triples(out / "train.tsv", vocab, "train")
    assert train.augmented and len(train) == 40


def test_prepare_twice_refuses(prepared, raw_toy, capsys):
    code = main(["prepare", *split_args(raw_toy), "--out", str(prepared)])
    assert code == 2
    assert "refusing" in capsys.readouterr().err


def test_prepare_refuses_augmented_input(prepared, tmp_path, capsys):
    code = main(["prepare", *split_args(prepared), "--out", str(tmp_path / "again")])
    assert code == 2
    assert "reverse" in capsys.readouterr().err


def test_prepare_missing_file(tmp_path, capsys):
    missing = tmp_path / "nope.tsv"
    assert main(["prepare", "--train", str(missing), "--out", str(tmp_path / "o")]) != 0
    assert str(missing) in capsys.readouterr().err


def test_train_converges_on_toy(memorized, tmp_path):
    with open(tmp_path / "run" / "train_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 200
    first, last = float(rows[0]["mean_loss"]), float(rows[-1]["mean_loss"])
    assert last < 0.1 * first


def test_train_zero_epochs_checkpoint_is_init(prepared, tmp_path):
    ckpt = tmp_path / "zero.ckpt"
    assert main(["train", *split_args(prepared, "train"), "--dim", "8", "--n-modules", "3", "--epochs", "0",
                 "--seed", "5", "--checkpoint", str(ckpt), "--out", str(tmp_path)]) == 0
    params, header = load_checkpoint(ckpt)
    assert params.equals(init_parameters(ModelConfig(8, 3, 10, 4, seed=5)))
    assert header["seed"] == 5


def test_train_single_module_is_aliased(prepared, tmp_path):
    ckpt = tmp_path / "one.ckpt"
    assert main(["train", *split_args(prepared, "train"), "--dim", "4", "--n-modules", "1", "--epochs", "2",
                 "--checkpoint", str(ckpt), "--out", str(tmp_path)]) == 0
    params, header = load_checkpoint(ckpt)
    assert header["aliased"] == 1 and params.aliased


def test_train_requires_epochs(prepared, capsys):
    assert main(["train", *split_args(prepared, "train"), "--dim", "4"]) == 1
    assert "--epochs" in capsys.readouterr().err


def test_train_bad_flag_is_usage_error(prepared):
    with pytest.raises(SystemExit) as info:
        main(["train", *split_args(prepared, "train"), "--dim", "four"])
    assert info.value.code == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_code(prepared, tmp_path, capsys):
    ckpt = tmp_path / "bad.ckpt"
    code = main(["train", *split_args(prepared, "train"), "--dim", "4", "--epochs", "3", "--init-scale", "1e300",
                 "--checkpoint", str(ckpt), "--out", str(tmp_path)])
    assert code == 3
    assert ckpt.exists()
    assert "diverged" in capsys.readouterr().err


def test_train_deterministic_checkpoint(prepared, tmp_path):
    blobs = []
    for k in range(2):
        ckpt = tmp_path / f"{k}.ckpt"
        main(["train", *split_args(prepared, "train"), "--dim", "8", "--n-modules", "2", "--epochs", "3",
              "--batch-size", "16", "--seed", "7", "--checkpoint", str(ckpt), "--out", str(tmp_path / str(k))])
        blobs.append(ckpt.read_bytes())
    assert blobs[0] == blobs[1]


def test_train_valid_every_logs_mrr(prepared, tmp_path):
    assert main(["train", *split_args(prepared), "--dim", "8", "--n-modules", "2", "--epochs", "4", *FAST,
                 "--valid-every", "2", "--out", str(tmp_path / "v")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "v" / "train_log.csv")))
    assert rows[0]["valid_mrr"] == "" and rows[1]["valid_mrr"] != ""


def parse_report(text):
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)


def test_evaluate_memorized_toy(memorized, prepared, tmp_path, capsys):
    out_csv = tmp_path / "metrics.csv"
    argv = ["evaluate", *split_args(prepared), "--checkpoint", str(memorized), "--out", str(out_csv)]
    assert main(argv) == 0
    first = capsys.readouterr().out
    report = parse_report(first)
    assert report["mode"] == "filtered"
    assert float(report["mrr"]) == 1.0
    assert main(argv) == 0
    assert capsys.readouterr().out == first
    rows = list(csv.reader(open(out_csv)))
    assert rows[0] == ["dim", "N", "mode", "mr", "mrr", "h1", "h3", "h10", "count"]
    assert rows[1][:3] == ["16", "2", "filtered"] and rows[1] == rows[2]


def test_evaluate_raw_and_filter_splits(memorized, prepared, capsys):
    base = ["evaluate", *split_args(prepared), "--checkpoint", str(memorized)]
    assert main(base + ["--mode", "raw"]) == 0
    raw = parse_report(capsys.readouterr().out)
    assert raw["mode"] == "raw"
    assert main(base + ["--filter-splits", "train,valid"]) == 0
    assert "mrr" in parse_report(capsys.readouterr().out)
    assert main(base + ["--filter-splits", "train,bogus"]) == 1


def test_evaluate_checkpoint_vocab_mismatch(prepared, tmp_path, capsys):
    from mdistmult.model import save_checkpoint

    ckpt = tmp_path / "wrong.ckpt"
    save_checkpoint(ckpt, init_parameters(ModelConfig(4, 2, 11, 4)))
    assert main(["evaluate", *split_args(prepared), "--checkpoint", str(ckpt)]) == 2
    assert "11 entities" in capsys.readouterr().err


def test_evaluate_matches_brute_force(tmp_path, capsys):
    raw = tmp_path / "raw"
    write_splits(raw, ToySpec(50, "random_er", 300 / 2450, seed=1))
    data = tmp_path / "data"
    assert main(["prepare", *split_args(raw), "--out", str(data)]) == 0
    ckpt = tmp_path / "m.ckpt"
    assert main(["train", *split_args(data, "train"), "--dim", "8", "--n-modules", "2", "--epochs", "3",
                 "--checkpoint", str(ckpt), "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    assert main(["evaluate", *split_args(data), "--checkpoint", str(ckpt)]) == 0
    report = parse_report(capsys.readouterr().out)

    vocab = read_vocab(data)
    sets = [load_triples(data / f"{s}.tsv", vocab, s) for s in ("train", "valid", "test")]
    known = {tuple(t) for s in sets for t in s}
    params, _ = load_checkpoint(ckpt)
    recips = []
    for h, r, t in sets[2]:
        target = score_all(params, h, r, t)
        others = [score_all(params, h, r, e) for e in range(vocab.entity_count) if e != t and (h, r, e) not in known]
        rank = 1 + sum(s > target for s in others) + sum(s == target for s in others) / 2
        recips.append(1 / rank)
    assert float(report["mrr"]) == pytest.approx(np.mean(recips), abs=1e-6)
    assert int(report["count"]) == len(sets[2])


def test_predict_top_answer(memorized, prepared, capsys):
    assert main(["predict", "--vocab", str(prepared), "--checkpoint", str(memorized),
                 "--head", "e0", "--relation", "next", "--topk", "3"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 3
    assert lines[0].split("\t")[0] == "e1"
    scores = [float(line.split("\t")[1]) for line in lines]
    assert scores == sorted(scores, reverse=True)


def test_predict_filter_and_truncation(memorized, prepared, capsys, caplog):
    assert main(["predict", *split_args(prepared), "--checkpoint", str(memorized),
                 "--head", "e0", "--relation", "next", "--topk", "50", "--filter"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 9
    assert "e1" not in [line.split("\t")[0] for line in lines]
    assert "truncating" in caplog.text


def test_predict_unknown_head(memorized, prepared, capsys):
    code = main(["predict", "--vocab", str(prepared), "--checkpoint", str(memorized),
                 "--head", "e1x", "--relation", "next"])
    assert code == 2
    err = capsys.readouterr().err
    assert "unknown entity 'e1x'" in err and "e1" in err


def test_sweep_rows(prepared, tmp_path, caplog):
    out = tmp_path / "sweep"
    code = main(["sweep", *split_args(prepared), "--dims", "16,32,64,32", "--n-modules", "2", "--epochs", "2",
                 "--out", str(out)])
    assert code == 0
    rows = list(csv.DictReader(open(out / "sweep.csv")))
    assert [r["dim"] for r in rows] == ["16", "32", "64"]
    assert all(r["mrr"] and not r["error"] for r in rows)
    assert "duplicate dims" in caplog.text
    assert (out / "ckpt_d64_n2.ckpt").exists()


def test_sweep_records_failed_cell(prepared, tmp_path):
    out = tmp_path / "sweep"
    assert main(["sweep", *split_args(prepared), "--dims", "0,4", "--n-modules", "1", "--epochs", "1",
                 "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "sweep.csv")))
    assert rows[0]["error"].startswith("ValueError") and rows[0]["mrr"] == ""
    assert rows[1]["mrr"] and not rows[1]["error"]


def test_sweep_parallel_matches_serial(prepared, tmp_path):
    common = [*split_args(prepared), "--dims", "4,8", "--n-modules", "1,2", "--epochs", "2"]
    main(["sweep", *common, "--out", str(tmp_path / "a")])
    main(["sweep", *common, "--out", str(tmp_path / "b"), "--jobs", "2"])
    serial = sorted(map(tuple, csv.reader(open(tmp_path / "a" / "sweep.csv"))))
    parallel = sorted(map(tuple, csv.reader(open(tmp_path / "b" / "sweep.csv"))))
    assert serial == parallel and len(serial) == 5


def test_config_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# overrides\ndim = 8\nn-modules = 2\n--lr = 0.01\n")
    base = ["train", "--train", "x.tsv", "--epochs", "1"]
    assert parse_args(base).dim == 2000
    layered = parse_args(["--config", str(cfg), *base])
    assert (layered.dim, layered.n_modules, layered.lr) == (8, 2, 0.01)
    flagged = parse_args(["--config", str(cfg), *base, "--dim", "4"])
    assert (flagged.dim, flagged.n_modules) == (4, 2)


def test_config_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("dimension = 8\n")
    assert main(["--config", str(cfg), "train", "--train", "x.tsv", "--epochs", "1"]) == 1
    assert "dimension" in capsys.readouterr().err


def test_module_entry_point(prepared, tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "mdistmult", "train", *split_args(prepared, "train"), "--dim", "4", "--epochs", "1",
         "--out", str(tmp_path / "sub")],
        capture_output=True, text=True, env={"KGE_LOG": "debug", "PATH": ""},
    )
    assert proc.returncode == 0, proc.stderr
    assert "checkpoint" in proc.stdout
    assert "epoch 1 loss" in proc.stderr
