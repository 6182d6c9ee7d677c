import hashlib
import json

import numpy as np
import pytest

import hybridpatch.cli as cli
from hybridpatch.cli import DEFAULTS, EXIT_ARTIFACT, EXIT_DIVERGED, EXIT_OK, EXIT_USAGE, main
from hybridpatch.data import MATCH, NONMATCH, load_container, write_pgm
from hybridpatch.evaluator import DescriptorSet, EvalReport
from hybridpatch.trainer import DivergenceError

QUICK = ["--arch", "siamese", "--epochs", "1", "--batch-size", "4", "--init-scheme", "he"]


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A small synthetic container and a checkpoint trained on it for one epoch."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "d.hpmd"
    assert main(["synth", "--n", "16", "--seed", "2", "--out", str(data)]) == EXIT_OK
    assert main(["train", "--data", str(data), "--out", str(root / "run"), *QUICK]) == EXIT_OK
    return root, data, root / "run" / "checkpoint.hybn"


class TestSynth:
    def test_deterministic(self, tmp_path, capsys):
        for name in ("a", "b"):
            assert main(["synth", "--n", "30", "--seed", "7", "--out", str(tmp_path / name)]) == EXIT_OK
        assert sha(tmp_path / "a") == sha(tmp_path / "b")
        out = capsys.readouterr().out
        assert "wrote 60 pairs" in out and "correlation" in out

    def test_single_pair_rejected(self, tmp_path, capsys):
        assert main(["synth", "--n", "1", "--out", str(tmp_path / "x")]) == EXIT_USAGE
        assert "--n" in capsys.readouterr().err
        assert not (tmp_path / "x").exists()

    def test_sidecar_records_severity(self, tmp_path):
        main(["synth", "--n", "4", "--out", str(tmp_path / "s.hpmd")])
        meta = json.loads((tmp_path / "s.hpmd.json").read_text())
        assert meta["severity"] == 1.0 and meta["seed"] == 0
        assert sorted(meta["split"]["train"] + meta["split"]["validation"] + meta["split"]["test"]) == [0, 1, 2, 3]

    def test_unwritable_path(self, tmp_path):
        assert main(["synth", "--n", "4", "--out", str(tmp_path / "missing" / "dir" / "x")]) == EXIT_USAGE


class TestExtract:
    def write_pair(self, root, name, shape_x, shape_y=None):
        rng = np.random.default_rng(len(name))
        write_pgm(root / f"{name}_x.pgm", rng.integers(0, 256, shape_x, dtype=np.uint8))
        write_pgm(root / f"{name}_y.pgm", rng.integers(0, 256, shape_y or shape_x, dtype=np.uint8))
        return f"{name}_x.pgm,{name}_y.pgm\n"

    def test_one_256_pair(self, tmp_path, capsys):
        (tmp_path / "m.csv").write_text("image_x_path,image_y_path\n" + self.write_pair(tmp_path, "a", (256, 256)))
        out = tmp_path / "e.hpmd"
        assert main(["extract", "--manifest", str(tmp_path / "m.csv"), "--grid-step", "32", "--out", str(out)]) == EXIT_OK
        labels = [p.label for p in load_container(out)]
        assert labels.count(MATCH) == 49 and labels.count(NONMATCH) == 49
        split = json.loads((tmp_path / "e.hpmd.json").read_text())["split"]
        assert (len(split["train"]), len(split["validation"]), len(split["test"])) == (34, 5, 10)

    def test_mismatched_pair_skipped(self, tmp_path, capsys):
        rows = self.write_pair(tmp_path, "good", (128, 128)) + self.write_pair(tmp_path, "bad", (128, 128), (128, 130))
        (tmp_path / "m.csv").write_text(rows)
        assert main(["extract", "--manifest", str(tmp_path / "m.csv"), "--grid-step", "64", "--out", str(tmp_path / "e")]) == EXIT_OK
        assert "skipping" in capsys.readouterr().err
        assert len(load_container(tmp_path / "e")) == 8

    def test_empty_manifest(self, tmp_path):
        (tmp_path / "m.csv").write_text("image_x_path,image_y_path\n")
        assert main(["extract", "--manifest", str(tmp_path / "m.csv"), "--out", str(tmp_path / "e")]) == EXIT_USAGE

    def test_all_unreadable(self, tmp_path):
        (tmp_path / "m.csv").write_text("nope_x.pgm,nope_y.pgm\n")
        assert main(["extract", "--manifest", str(tmp_path / "m.csv"), "--out", str(tmp_path / "e")]) == EXIT_USAGE


class TestConfig:
    def test_print_defaults(self, capsys):
        assert main(["--print-config"]) == EXIT_OK
        text = capsys.readouterr().out
        assert "lr = 0.01\n" in text and "momentum = 0.9\n" in text and "lr_drop_epochs = 75,95\n" in text
        assert "h_m = 0.8\n" in text and "batch_size = 128\n" in text and "weight_decay = 0.0005\n" in text

    def test_three_layer_precedence(self, tmp_path, capsys):
        conf = tmp_path / "run.cfg"
        conf.write_text("# file layer\nlr = 0.05\nbatch_size = 64\nh_m = 0.5\n")
        assert main(["train", "--config", str(conf), "--lr", "0.2", "--print-config"]) == EXIT_OK
        resolved = dict(line.split(" = ") for line in capsys.readouterr().out.splitlines())
        assert resolved["lr"] == "0.2"  # flag beats file
        assert resolved["batch_size"] == "64" and resolved["h_m"] == "0.5"  # file beats default
        assert resolved["momentum"] == "0.9"  # default survives

    def test_set_override(self, capsys):
        assert main(["train", "--set", "lr_drop_epochs=3,4", "--set", "hm=false", "--print-config"]) == EXIT_OK
        text = capsys.readouterr().out
        assert "lr_drop_epochs = 3,4\n" in text and "hm = false\n" in text

    def test_no_aux_selects_plain_hybrid(self, capsys):
        main(["train", "--no-aux", "--no-hm", "--variant", "softmax", "--print-config"])
        resolved = dict(line.split(" = ") for line in capsys.readouterr().out.splitlines())
        assert resolved["arch"] == "hybrid" and resolved["aux_weight_siam"] == "0.0" and resolved["hm"] == "false"
        assert resolved["variant"] == "softmax"

    @pytest.mark.parametrize("text", ["bogus = 1\n", "lr\n", "lr = fast\n"])
    def test_bad_config_file(self, tmp_path, text):
        (tmp_path / "c").write_text(text)
        assert main(["train", "--config", str(tmp_path / "c"), "--print-config"]) == EXIT_USAGE

    def test_defaults_cover_every_train_field(self):
        cfg = cli.train_config(dict(DEFAULTS))
        assert cfg.lr == 0.01 and cfg.mining.h_m == 0.8 and cfg.loss.margin == 1.0


class TestTrainEval:
    def test_outputs(self, workspace):
        root, _, ckpt = workspace
        run = root / "run"
        assert ckpt.read_bytes()[:4] == b"HYBN"
        lines = (run / "train_log.jsonl").read_text().splitlines()
        assert len(lines) == 1 and json.loads(lines[0])["epoch"] == 0
        assert "arch = siamese" in (run / "config.txt").read_text()

    def test_same_invocation_same_bytes(self, workspace, tmp_path):
        _, data, ckpt = workspace
        assert main(["train", "--data", str(data), "--out", str(tmp_path / "again"), *QUICK]) == EXIT_OK
        assert sha(tmp_path / "again" / "checkpoint.hybn") == sha(ckpt)
        assert (tmp_path / "again" / "train_log.jsonl").read_bytes() == (ckpt.parent / "train_log.jsonl").read_bytes()

    def test_divergence_exit_keeps_checkpoint(self, workspace, tmp_path, monkeypatch):
        _, data, _ = workspace

        def diverge(net, data, cfg, on_epoch):
            raise DivergenceError(0, 1, float("nan"))

        monkeypatch.setattr(cli, "train", diverge)
        out = tmp_path / "div"
        assert main(["train", "--data", str(data), "--out", str(out), *QUICK]) == EXIT_DIVERGED
        assert (out / "checkpoint.hybn").exists()

    def test_missing_data(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o"), *QUICK]) == EXIT_USAGE

    def test_eval_prints_decimal_and_writes_report(self, workspace, tmp_path, capsys):
        _, data, ckpt = workspace
        rep = tmp_path / "r.json"
        assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--report", str(rep), "--arch", "siamese"]) == EXIT_OK
        value = float(capsys.readouterr().out.strip())
        report = EvalReport.from_json(rep.read_text())
        assert report.fpr95 == pytest.approx(value, abs=1e-6)
        assert 0.0 <= value <= 1.0
        # re-evaluation is byte-identical
        main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--report", str(tmp_path / "r2.json"), "--arch", "siamese"])
        assert (tmp_path / "r2.json").read_bytes() == rep.read_bytes()

    def test_eval_without_report_writes_nothing(self, workspace, tmp_path, capsys, monkeypatch):
        _, data, ckpt = workspace
        monkeypatch.chdir(tmp_path)
        assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--arch", "siamese"]) == EXIT_OK
        assert list(tmp_path.iterdir()) == []

    def test_missing_checkpoint(self, workspace, tmp_path, capsys):
        _, data, _ = workspace
        missing = tmp_path / "nothing.hybn"
        assert main(["eval", "--checkpoint", str(missing), "--data", str(data)]) == EXIT_ARTIFACT
        assert str(missing) in capsys.readouterr().err

    def test_variant_mismatch(self, workspace):
        _, data, ckpt = workspace
        assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--variant", "softmax"]) == EXIT_ARTIFACT

    def test_corrupt_checkpoint(self, workspace, tmp_path):
        _, data, ckpt = workspace
        bad = tmp_path / "bad.hybn"
        bad.write_bytes(ckpt.read_bytes()[:100])
        assert main(["eval", "--checkpoint", str(bad), "--data", str(data)]) == EXIT_ARTIFACT


class TestMatch:
    def test_table_rows_and_self_match(self, workspace, tmp_path, capsys):
        _, data, ckpt = workspace
        ex, ey = tmp_path / "x.hdsc", tmp_path / "y.hdsc"
        args = ["match", "--checkpoint", str(ckpt), "--set-x", str(data), "--set-y", str(data), "--k", "3", "--arch", "siamese"]
        assert main([*args, "--export-x", str(ex), "--export-y", str(ey)]) == EXIT_OK
        captured = capsys.readouterr()
        rows = captured.out.splitlines()
        assert rows[0] == "query\trank\tref\tdistance"
        assert len(rows) - 1 == 16 * 3
        assert "top-1 accuracy" in captured.err
        # identical descriptor sets match themselves at distance zero
        assert main(["match", "--checkpoint", str(ckpt), "--set-x", str(ex), "--set-y", str(ex), "--k", "1"]) == EXIT_OK
        table = [line.split("\t") for line in capsys.readouterr().out.splitlines()[1:]]
        assert all(q == ref and float(d) == 0.0 for q, _, ref, d in table)
        assert len(DescriptorSet.load(ey)) == 16

    def test_k_larger_than_reference(self, workspace):
        _, data, ckpt = workspace
        assert main(["match", "--checkpoint", str(ckpt), "--set-x", str(data), "--set-y", str(data), "--k", "17", "--arch", "siamese"]) == EXIT_USAGE


class TestUsage:
    def test_no_command(self):
        assert main([]) == EXIT_USAGE

    def test_unknown_flag(self):
        assert main(["synth", "--bogus"]) == EXIT_USAGE

    def test_exit_codes_distinct(self):
        assert len({EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_ARTIFACT}) == 4

    def test_thread_cap_must_be_integer(self, monkeypatch, tmp_path):
        monkeypatch.setenv("HPN_THREADS", "many")
        assert main(["synth", "--n", "4", "--out", str(tmp_path / "x")]) == EXIT_USAGE
