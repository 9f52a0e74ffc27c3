import os

import numpy as np
import pytest

from fmts.cli import main
from fmts.data import SeriesBatch, read_csv_table, read_windows_long, write_table, write_windows_long
from fmts.model import init_params
from fmts.persistence import load_checkpoint, parse_config_text
from fmts import tensor as T

CONFIG = """seed = 5
dataset.kind = ar1
dataset.n = 40
dataset.length = 8
dataset.channels = 2
model.model_dim = 8
model.num_heads = 2
model.encoder_layers = 1
model.decoder_layers = 1
model.feedforward_dim = 16
model.register_count = 1
model.time_embed_dim = 4
train.batch_size = 8
train.total_steps = {steps}
train.checkpoint_every = 2
output.dir = {out}
"""


def write_config(tmp_path, name="run", steps=3, extra=""):
    out = tmp_path / name
    path = tmp_path / f"{name}.cfg"
    path.write_text(CONFIG.format(steps=steps, out=out) + extra)
    return str(path), out


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg, out = write_config(tmp)
    assert main(["train", cfg]) == 0
    return tmp, out


class TestTrain:
    def test_outputs(self, trained):
        _, out = trained
        names = sorted(os.listdir(out))
        assert names == ["final.ckpt", "loss.tsv", "step_0000002.ckpt", "test_windows.csv"]
        lines = (out / "loss.tsv").read_text().splitlines()
        assert lines[0] == "step\tloss\twall_ms" and len(lines) == 4
        assert load_checkpoint(out / "final.ckpt").step == 3

    def test_rerun_is_byte_identical(self, trained, tmp_path):
        _, out = trained
        cfg, again = write_config(tmp_path, "again")
        assert main(["train", cfg]) == 0
        for name in ("final.ckpt", "step_0000002.ckpt", "test_windows.csv"):
            assert (again / name).read_bytes() == (out / name).read_bytes()

    def test_zero_steps_saves_initialisation(self, tmp_path):
        cfg, out = write_config(tmp_path, steps=0)
        assert main(["train", cfg]) == 0
        ck = load_checkpoint(out / "final.ckpt")
        run = parse_config_text(open(cfg).read())
        init = init_params(run.model, T.make_rng([5, 3])).astype(np.float32)
        assert ck.step == 0
        assert all(ck.params[k].data.tobytes() == init[k].data.tobytes() for k in init)

    def test_missing_dataset_file(self, tmp_path):
        cfg, out = write_config(tmp_path)
        text = open(cfg).read().replace("dataset.kind = ar1", f"dataset.kind = csv\ndataset.path = {tmp_path}/no.csv")
        open(cfg, "w").write(text)
        assert main(["train", cfg]) == 2
        assert not (out / "final.ckpt").exists()

    def test_bad_config_exit_code(self, tmp_path, capsys):
        cfg, _ = write_config(tmp_path, extra="model.num_heads = 3\n")
        assert main(["train", cfg]) == 1
        assert "duplicate key 'model.num_heads'" in capsys.readouterr().err

    def test_divergence_exit_code(self, tmp_path):
        write_table(tmp_path / "huge.csv", ["a", "b"], np.random.default_rng(0).standard_normal((30, 2)))
        cfg, out = write_config(tmp_path)
        text = open(cfg).read().replace("dataset.kind = ar1",
                                        f"dataset.kind = csv\ndataset.path = {tmp_path}/huge.csv")
        text = text.replace("train.total_steps = 3", "train.total_steps = 6\noptimizer.lr = 1e30")
        open(cfg, "w").write(text + "optimizer.clip_norm = none\noptimizer.warmup_steps = 0\n")
        code = main(["train", cfg])
        assert code == 3
        assert (out / "loss.tsv").exists()


class TestGenerate:
    def test_csv_and_determinism(self, trained):
        tmp, out = trained
        a, b = str(tmp / "a.csv"), str(tmp / "b.csv")
        assert main(["generate", str(out / "final.ckpt"), "--n", "5", "--out", a, "--seed", "9"]) == 0
        assert main(["generate", str(out / "final.ckpt"), "--n", "5", "--out", b, "--seed", "9"]) == 0
        assert open(a, "rb").read() == open(b, "rb").read()
        batch = read_windows_long(a)
        assert batch.values.shape == (5, 8, 2)
        norm = load_checkpoint(out / "final.ckpt").normalization
        assert np.all(batch.values >= norm.minimum - 1e-9) and np.all(batch.values <= norm.maximum + 1e-9)

    def test_zero_windows_writes_header(self, trained):
        tmp, out = trained
        path = tmp / "empty.csv"
        assert main(["generate", str(out / "final.ckpt"), "--n", "0", "--out", str(path)]) == 0
        assert path.read_text().splitlines() == ["window,step,ch0,ch1"]

    def test_split_format(self, trained):
        tmp, out = trained
        assert main(["generate", str(out / "final.ckpt"), "--n", "2", "--format", "split",
                     "--out", str(tmp / "split")]) == 0
        assert len(os.listdir(tmp / "split")) == 2

    def test_shape_mismatch(self, trained):
        tmp, out = trained
        assert main(["generate", str(out / "final.ckpt"), "--length", "9", "--out", str(tmp / "x.csv")]) == 4

    def test_defaults_in_help(self, capsys):
        assert main(["generate", "--help"]) == 0
        text = capsys.readouterr().out
        assert "default: 32" in text and "default: 3.0" in text
        assert main(["impute", "--help"]) == 0
        assert "default: 0.0625" in capsys.readouterr().out

    def test_version_mismatch_fails(self, trained, tmp_path):
        _, out = trained
        blob = bytearray((out / "final.ckpt").read_bytes())
        blob[8] += 1
        (tmp_path / "v.ckpt").write_bytes(bytes(blob))
        assert main(["generate", str(tmp_path / "v.ckpt"), "--out", str(tmp_path / "v.csv")]) == 4


class TestConditional:
    def test_impute_keeps_observed(self, trained, tmp_path):
        _, out = trained
        truth = str(out / "test_windows.csv")
        dest = str(tmp_path / "imp.csv")
        assert main(["impute", str(out / "final.ckpt"), truth, "--mask", "missing:0.5:1", "--out", dest,
                     "--truth", truth, "--steps", "4"]) == 0
        got, real = read_windows_long(dest).values, read_windows_long(truth).values
        mask = T.make_rng(1).random(real.shape) >= 0.5
        assert np.all(np.abs(got[mask] - real[mask]) <= 1e-5 * np.maximum(1, np.abs(real[mask])))
        rows = open(dest + ".mse.tsv").read().splitlines()
        assert rows[0] == "window\tmissing_cells\tmse" and rows[-1].startswith("all\t")

    def test_mask_file(self, trained, tmp_path):
        _, out = trained
        truth = str(out / "test_windows.csv")
        mask = np.zeros((8, 2))
        mask[:3] = 1
        write_table(tmp_path / "mask.csv", ["a", "b"], mask)
        dest = str(tmp_path / "m.csv")
        assert main(["impute", str(out / "final.ckpt"), truth, "--mask", str(tmp_path / "mask.csv"),
                     "--out", dest, "--steps", "2"]) == 0
        got, real = read_windows_long(dest).values, read_windows_long(truth).values
        assert np.allclose(got[:, :3], real[:, :3], atol=1e-5)

    def test_inconsistent_mask(self, trained, tmp_path):
        _, out = trained
        write_table(tmp_path / "mask.csv", ["a"], np.ones((8, 1)))
        assert main(["impute", str(out / "final.ckpt"), str(out / "test_windows.csv"),
                     "--mask", str(tmp_path / "mask.csv"), "--out", str(tmp_path / "o.csv")]) == 4
        assert main(["impute", str(out / "final.ckpt"), str(out / "test_windows.csv"),
                     "--mask", "forecast:8", "--out", str(tmp_path / "o.csv")]) == 4

    def test_forecast_history_only(self, trained, tmp_path):
        _, out = trained
        hist = np.random.default_rng(0).standard_normal((5, 2))
        write_table(tmp_path / "hist.csv", ["ch0", "ch1"], hist)
        dest = str(tmp_path / "f.csv")
        assert main(["forecast", str(out / "final.ckpt"), str(tmp_path / "hist.csv"), "--m", "5", "--horizon", "3",
                     "--out", dest, "--steps", "3"]) == 0
        got = read_windows_long(dest).values
        assert got.shape == (1, 8, 2) and np.allclose(got[0, :5], hist, atol=1e-5)

    def test_forecast_length_check(self, trained, tmp_path):
        _, out = trained
        assert main(["forecast", str(out / "final.ckpt"), str(out / "test_windows.csv"), "--m", "168",
                     "--horizon", "24", "--out", str(tmp_path / "f.csv")]) == 4


class TestTools:
    def test_schedule_dump(self, tmp_path):
        path = tmp_path / "s.csv"
        assert main(["schedule-dump", "-N", "4", "--alpha", "1", "--out", str(path)]) == 0
        names, table = read_csv_table(str(path))
        assert names == ["index", "t_uniform", "t_shifted", "t_power"]
        assert np.array_equal(table[:, 1], table[:, 2])
        assert main(["schedule-dump", "-N", "2", "--alpha", "3", "--out", str(path)]) == 0
        assert read_csv_table(str(path))[1][1, 2] == 0.25

    def test_output_dir_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("FMTS_OUTPUT_DIR", str(tmp_path / "envdir"))
        assert main(["schedule-dump", "-N", "2"]) == 0
        assert (tmp_path / "envdir" / "schedule.csv").exists()

    def test_eval_and_pca(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        a = SeriesBatch(rng.standard_normal((70, 6, 2)))
        b = SeriesBatch(rng.standard_normal((70, 6, 3)))
        write_windows_long(tmp_path / "a.csv", a)
        write_windows_long(tmp_path / "b.csv", b)
        assert main(["eval", str(tmp_path / "a.csv"), str(tmp_path / "a.csv"), "--repeats", "1",
                     "--metrics", "correlational,feature_fid", "--out", str(tmp_path / "t.tsv")]) == 0
        rows = (tmp_path / "t.tsv").read_text().splitlines()
        assert rows[0] == "metric\tmean\tstd\trepeats\tseeds"
        assert [r.split("\t")[0] for r in rows[1:]] == ["correlational", "feature_fid"]
        assert all(float(r.split("\t")[1]) < 1e-6 for r in rows[1:])
        assert main(["eval", str(tmp_path / "a.csv"), str(tmp_path / "b.csv")]) == 4
        assert main(["eval", "nonsense", str(tmp_path / "a.csv")]) == 1
        assert main(["pca-export", str(tmp_path / "a.csv"), str(tmp_path / "a.csv"),
                     "--out", str(tmp_path / "p.csv")]) == 0
        lines = (tmp_path / "p.csv").read_text().splitlines()
        assert lines[0] == "set,window,pc1,pc2" and len(lines) == 141

    def test_usage_errors(self):
        assert main([]) == 1
        assert main(["train"]) == 1
        assert main(["no-such-command"]) == 1
        assert main(["schedule-dump", "-N", "0"]) == 4
