import json
import subprocess
import sys

import pytest

from sarcexp import cli
from synthetic import CAPTIONS, EXPLANATIONS

SUBCOMMANDS = ("ingest", "pretrain", "train", "generate", "evaluate", "analyze-pos", "rater-agreement")
TINY = """seed = 7
[model]
d_model = 16
n_heads = 2
n_decoder_layers = 1
max_token_length = 16
n_regions = 4
image_dim = 8
[train]
epochs = 2
batch_size = 8
lr_encoder = 0.001
lr_lm_head = 0.001
lr_other = 0.001
[generation]
max_decode_len = 12
"""


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    for name in list(__import__("os").environ):
        if name.startswith("MUSE_"):
            monkeypatch.delenv(name)
    rows = []
    for i in range(20):
        rows.append({
            "id": f"p{i:02d}", "image": f"img/{i}.jpg", "caption": CAPTIONS[i % 8] + f" number {i}",
            "explanation": EXPLANATIONS[i % 8], "ocr_text": "sale" if i % 3 == 0 else None, "label": i % 2,
        })
    (tmp_path / "d.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))
    (tmp_path / "c.toml").write_text(TINY)
    monkeypatch.chdir(tmp_path)
    return tmp_path


def run(*argv):
    return cli.dispatch([str(a) for a in argv])


def test_every_subcommand_has_help(capsys):
    for name in SUBCOMMANDS:
        with pytest.raises(SystemExit) as exc:
            cli.build_parser().parse_args([name, "--help"])
        assert exc.value.code == 0
        assert "usage" in capsys.readouterr().out


def test_ingest_outputs(workdir, capsys):
    assert run("ingest", "--data", "d.jsonl", "--stats-out", "s.json", "--table-out", "s.txt",
               "--split-out", "split.jsonl", "--exclusions-out", "ex.json") == 0
    stats = json.loads((workdir / "s.json").read_text())
    assert stats["total"]["count"] == 20
    assert [stats[k]["count"] for k in ("train", "val", "test")] == [17, 1, 2]
    assert stats["total"]["ocr_count"] == 7
    assert "# Posts" in capsys.readouterr().out
    tagged = [json.loads(l)["split"] for l in (workdir / "split.jsonl").read_text().splitlines()]
    assert sorted(set(tagged)) == ["test", "train", "val"]
    assert isinstance(json.loads((workdir / "ex.json").read_text()), dict)


def test_train_generate_evaluate_pipeline_is_deterministic(workdir):
    for out in ("a", "b"):
        assert run("train", "--config", "c.toml", "--data", "d.jsonl", "--out-dir", out) == 0
        assert run("generate", "--config", "c.toml", "--data", "d.jsonl", "--checkpoint", f"{out}/model.ckpt",
                   "--split", "all", "--out", f"{out}/g.jsonl") == 0
        assert run("evaluate", "--gens", f"{out}/g.jsonl", "--data", "d.jsonl", "--report", f"{out}/r.json",
                   "--table", f"{out}/r.txt") == 0
    for name in ("model.ckpt", "last.ckpt", "config.json", "vocab.txt", "history.json", "g.jsonl", "r.json", "r.txt"):
        assert (workdir / "a" / name).read_bytes() == (workdir / "b" / name).read_bytes(), name
    assert len(json.loads((workdir / "a/history.json").read_text())) == 2
    assert len((workdir / "a/g.jsonl").read_text().splitlines()) == 20
    assert json.loads((workdir / "a/config.json").read_text())["seed"] == 7


def test_seed_flag_changes_checkpoint(workdir):
    run("train", "--config", "c.toml", "--data", "d.jsonl", "--out-dir", "a")
    run("train", "--config", "c.toml", "--data", "d.jsonl", "--out-dir", "b", "--seed", "8")
    assert (workdir / "a/model.ckpt").read_bytes() != (workdir / "b/model.ckpt").read_bytes()


def test_pretrain_then_train_with_init_and_resume(workdir):
    assert run("pretrain", "--config", "c.toml", "--data", "d.jsonl", "--out-dir", "pre") == 0
    assert run("train", "--config", "c.toml", "--data", "d.jsonl", "--out-dir", "ft", "--init", "pre/model.ckpt") == 0
    # resuming a finished 2-epoch run with epochs=3 equals a straight 3-epoch run
    assert run("train", "--config", "c.toml", "--data", "d.jsonl", "--out-dir", "full", "--set", "train.epochs=3") == 0
    assert run("train", "--config", "c.toml", "--data", "d.jsonl", "--out-dir", "plain") == 0
    assert run("train", "--config", "c.toml", "--data", "d.jsonl", "--out-dir", "res", "--set", "train.epochs=3",
               "--resume", "plain/last.ckpt") == 0
    assert (workdir / "res/model.ckpt").read_bytes() == (workdir / "full/model.ckpt").read_bytes()
    # a fine-tuning checkpoint cannot resume pretraining
    assert run("pretrain", "--config", "c.toml", "--data", "d.jsonl", "--out-dir", "x", "--resume", "plain/last.ckpt") == 1


def test_evaluate_identity(workdir):
    rows = [json.loads(l) for l in (workdir / "d.jsonl").read_text().splitlines()]
    (workdir / "g.jsonl").write_text("".join(json.dumps({"id": r["id"], "generation": r["explanation"]}) + "\n"
                                             for r in rows))
    assert run("evaluate", "--gens", "g.jsonl", "--data", "d.jsonl", "--report", "r.json") == 0
    report = json.loads((workdir / "r.json").read_text())
    for row in report["slices"].values():
        for key in ("B1", "B2", "B3", "B4", "R1", "R2", "RL", "emb_P", "emb_R", "emb_F1", "sent_cosine"):
            assert row[key] == pytest.approx(1.0, abs=1e-12), key
        assert 0.9 < row["METEOR"] < 1.0


def test_analyze_pos_and_rater_agreement(workdir):
    rows = [json.loads(l) for l in (workdir / "d.jsonl").read_text().splitlines()]
    (workdir / "g.jsonl").write_text("".join(json.dumps({"id": r["id"], "generation": "a red car"}) + "\n"
                                             for r in rows[:6]))
    assert run("analyze-pos", "--gens", "g.jsonl", "--data", "d.jsonl", "--out", "p.json", "--table", "p.txt") == 0
    pos = json.loads((workdir / "p.json").read_text())
    assert set(pos["cells"]) == {"overall", "ocr", "non_ocr"} and pos["counts"]["overall"] == 6
    ratings = [{"sample_id": f"s{i}", "rater_id": f"r{j}", "adequacy": ["justify", "nri"][(i + (j == 2)) % 2],
                "fluency": 0.5} for i in range(4) for j in range(3)]
    (workdir / "h.jsonl").write_text("".join(json.dumps(r) + "\n" for r in ratings))
    assert run("rater-agreement", "--ratings", "h.jsonl", "--out", "h.json", "--table", "h.txt") == 0
    summary = json.loads((workdir / "h.json").read_text())
    assert summary["n_ratings"] == 12 and summary["kappa_adequacy"] is not None


def test_exit_codes(workdir, monkeypatch):
    assert run("bogus") == 1
    assert run("ingest", "--data", "d.jsonl") == 1  # missing --stats-out
    assert run("ingest", "--data", "missing.jsonl", "--stats-out", "s.json") == 1
    (workdir / "bad.jsonl").write_text('{"id": "x"}\n')
    assert run("ingest", "--data", "bad.jsonl", "--stats-out", "s.json") == 1
    assert run("ingest", "--data", "d.jsonl", "--stats-out", "s.json", "--set", "train.nope=1") == 1
    assert run("train", "--data", "d.jsonl", "--out-dir", "o", "--set", "model.d_model=30") == 1
    monkeypatch.setenv("MUSE_TRAIN_EPOCHZ", "3")
    assert run("ingest", "--data", "d.jsonl", "--stats-out", "s.json") == 1
    monkeypatch.delenv("MUSE_TRAIN_EPOCHZ")
    (workdir / "g.jsonl").write_text('{"id": "unknown", "generation": "x"}\n')
    assert run("evaluate", "--gens", "g.jsonl", "--data", "d.jsonl", "--report", "r.json") == 1

    def boom(args):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(cli, "compute_stats", boom)
    assert run("ingest", "--data", "d.jsonl", "--stats-out", "s.json") == 2


def test_env_overrides_apply(workdir, monkeypatch):
    monkeypatch.setenv("MUSE_DATA_SPLIT_RATIOS", "[0.5, 0.25, 0.25]")
    assert run("ingest", "--data", "d.jsonl", "--stats-out", "s.json") == 0
    stats = json.loads((workdir / "s.json").read_text())
    assert [stats[k]["count"] for k in ("train", "val", "test")] == [10, 5, 5]


def test_console_entry_point(workdir):
    proc = subprocess.run([sys.executable, "-m", "sarcexp.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "ingest" in proc.stdout
