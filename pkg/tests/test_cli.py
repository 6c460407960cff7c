import numpy as np
import pytest

from conftest import load_golden
from skadapter.cli import main
from skadapter.config import ConfigError, RunConfig, parse_config_text, resolve_config
from skadapter.evaluate import read_report
from skadapter.data import load_dataset, read_occupancy, write_occupancy
from skadapter.model_io import load_backbone, load_model
from skadapter.nn_core import load_checkpoint
from skadapter.skeleton import sample_random_tree, write_skeleton

TINY = """# tiny toy run
feature_dim=16
n_backbone_blocks=2
n_heads=2
voxel_res=8
radius=1.0
pretrain_epochs=2
epochs=2
batch_size=8
steps=3
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """A trained tiny model shared by the CLI tests."""
    d = tmp_path_factory.mktemp("cli")
    conf = d / "run.cfg"
    conf.write_text(TINY + f"dataset={d / 'train.tms'}\nheldout={d / 'held.tms'}\n"
                    f"backbone_ckpt={d / 'bb.skck'}\nmodel_ckpt={d / 'model.skck'}\nreport={d / 'report.tsv'}\n")
    c = str(conf)
    assert main(["gen-data", "--config", c, "--n", "16", "--out", str(d / "train.tms")]) == 0
    assert main(["gen-data", "--config", c, "--n", "4", "--seed", "9", "--out", str(d / "held.tms")]) == 0
    assert main(["pretrain", "--config", c]) == 0
    assert main(["train-adapter", "--config", c]) == 0
    skel = d / "a.skel"
    write_skeleton(skel, sample_random_tree(3, 7, "random"))
    return d, c, skel


def run(capsys, argv):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


class TestGenData:
    def test_summary_and_determinism(self, tmp_path, capsys):
        code, out, _ = run(capsys, ["gen-data", "--n", "6", "--seed", "1", "--out", str(tmp_path / "a.tms")])
        assert code == 0
        assert "n_samples=6" in out and "families=" in out and "mean_occupancy=" in out
        run(capsys, ["gen-data", "--n", "6", "--seed", "1", "--out", str(tmp_path / "b.tms")])
        assert (tmp_path / "a.tms").read_bytes() == (tmp_path / "b.tms").read_bytes()
        assert load_dataset(tmp_path / "a.tms")[0].n_samples == 6

    def test_zero_samples_is_usage_error(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as info:
            main(["gen-data", "--n", "0", "--out", str(tmp_path / "a.tms")])
        assert info.value.code == 2

    def test_unwritable_output_is_runtime_error(self, tmp_path, capsys):
        code, _, err = run(capsys, ["gen-data", "--n", "1", "--out", str(tmp_path / "missing" / "a.tms")])
        assert code == 1 and "error=" in err


class TestConfig:
    def test_unknown_key_is_usage_error(self, tmp_path, capsys):
        conf = tmp_path / "bad.cfg"
        conf.write_text("feature_dim=16\nwarp_speed=9\n")
        code, _, err = run(capsys, ["gen-data", "--config", str(conf), "--n", "1", "--out", str(tmp_path / "x")])
        assert code == 2 and "warp_speed" in err and "bad.cfg:2" in err

    def test_precedence(self, tmp_path):
        conf = tmp_path / "c.cfg"
        conf.write_text("steps=7\nseed=3\n")
        cfg = resolve_config(str(conf), {"seed": 5, "lr": None})
        assert (cfg.steps, cfg.seed, cfg.lr) == (7, 5, RunConfig().lr)

    def test_parse_errors(self):
        with pytest.raises(ConfigError):
            parse_config_text("steps\n", "x")
        with pytest.raises(ConfigError):
            parse_config_text("steps=many\n", "x")
        assert parse_config_text("# only a comment\n\n", "x") == {}

    def test_round_trip(self):
        cfg = RunConfig(steps=11, lr=0.5)
        assert resolve_config(None, parse_config_text(cfg.to_text(), "x")) == cfg


class TestTraining:
    def test_backbone_frozen_in_checkpoint(self, work):
        d, _, _ = work
        ck = load_checkpoint(d / "bb.skck")
        assert ck.tensors and all(frozen for _, frozen in ck.tensors.values())
        load_backbone(d / "bb.skck")

    def test_model_trainable_set(self, work):
        d, _, _ = work
        ck = load_checkpoint(d / "model.skck")
        trainable = {n for n, (_, frozen) in ck.tensors.items() if not frozen}
        assert trainable and all(n.startswith(("encoder.", "adapter.")) for n in trainable)
        assert all(frozen for n, (_, frozen) in ck.tensors.items() if n.startswith("backbone."))

    def test_pretrain_deterministic(self, work, tmp_path):
        d, c, _ = work
        assert main(["pretrain", "--config", c, "--out", str(tmp_path / "again.skck")]) == 0
        assert (tmp_path / "again.skck").read_bytes() == (d / "bb.skck").read_bytes()

    def test_adapter_changes_weights(self, work):
        d, _, _ = work
        model = load_model(d / "model.skck")
        assert any(p.abs().sum() > 0 for n, p in model.adapter.named_parameters() if ".zero." in n)


class TestSample:
    def test_deterministic_with_points(self, work, tmp_path, capsys):
        d, c, skel = work
        for name in ("a", "b"):
            code, out, _ = run(capsys, ["sample", "--config", c, "--skeleton", str(skel), "--seed", "4",
                                        "--out", str(tmp_path / f"{name}.occ"), "--points", str(tmp_path / f"{name}.obj")])
            assert code == 0 and "occupied=" in out
        assert (tmp_path / "a.occ").read_bytes() == (tmp_path / "b.occ").read_bytes()
        assert (tmp_path / "a.obj").read_text() == (tmp_path / "b.obj").read_text()
        assert read_occupancy(tmp_path / "a.occ").shape == (8, 8, 8)

    def test_single_step(self, work, tmp_path, capsys):
        _, c, skel = work
        code, _, _ = run(capsys, ["sample", "--config", c, "--skeleton", str(skel), "--steps", "1",
                                  "--out", str(tmp_path / "s.occ")])
        assert code == 0 and read_occupancy(tmp_path / "s.occ").shape == (8, 8, 8)

    def test_malformed_skeleton_names_line(self, work, tmp_path, capsys):
        _, c, _ = work
        bad = tmp_path / "bad.skel"
        bad.write_text("2\n0 0 0 -1\n0 0 oops 0\n")
        code, _, err = run(capsys, ["sample", "--config", c, "--skeleton", str(bad), "--out", str(tmp_path / "x")])
        assert code == 1 and "line 3" in err

    def test_bad_label(self, work, tmp_path, capsys):
        _, c, skel = work
        code, _, _ = run(capsys, ["sample", "--config", c, "--skeleton", str(skel), "--label", "9",
                                  "--out", str(tmp_path / "x")])
        assert code == 1

    def test_missing_checkpoint(self, work, tmp_path, capsys):
        _, c, skel = work
        code, _, _ = run(capsys, ["sample", "--config", c, "--model", str(tmp_path / "none.skck"),
                                  "--skeleton", str(skel), "--out", str(tmp_path / "x")])
        assert code == 1


class TestEdit:
    @pytest.fixture
    def grid(self, work, tmp_path):
        d, _, _ = work
        path = tmp_path / "in.occ"
        write_occupancy(path, load_dataset(d / "held.tms")[1][0].occupancy)
        return path

    def edit(self, work, grid, tmp_path, box, seed=2):
        _, c, skel = work
        out = tmp_path / "out.occ"
        assert main(["edit", "--config", c, "--input", str(grid), "--skeleton", str(skel), "--seed", str(seed),
                     "--mask", *map(str, box), "--out", str(out)]) == 0
        return read_occupancy(out)

    def test_empty_mask_is_identity(self, work, grid, tmp_path):
        assert np.array_equal(self.edit(work, grid, tmp_path, (2, 2, 2, 2, 2, 2)), read_occupancy(grid))

    def test_outside_mask_untouched(self, work, grid, tmp_path):
        out = self.edit(work, grid, tmp_path, (0, 0, 0, 4, 8, 8))
        assert np.array_equal(out[4:], read_occupancy(grid)[4:])

    def test_full_mask_equals_sample(self, work, grid, tmp_path):
        _, c, skel = work
        out = self.edit(work, grid, tmp_path, (0, 0, 0, 8, 8, 8), seed=6)
        assert main(["sample", "--config", c, "--skeleton", str(skel), "--seed", "6",
                     "--out", str(tmp_path / "s.occ")]) == 0
        assert np.array_equal(out, read_occupancy(tmp_path / "s.occ"))

    def test_mask_out_of_bounds(self, work, grid, tmp_path, capsys):
        _, c, skel = work
        code, _, err = run(capsys, ["edit", "--config", c, "--input", str(grid), "--skeleton", str(skel),
                                    "--mask", "0", "0", "0", "9", "8", "8", "--out", str(tmp_path / "o.occ")])
        assert code == 1 and "MaskOutOfBounds" in err


class TestEvalAndCount:
    def test_eval_report(self, work, capsys):
        d, c, _ = work
        code, out, _ = run(capsys, ["eval", "--config", c])
        assert code == 0 and "mode=conditional" in out and "mode=unconditional" in out
        rows, means = read_report(d / "report.tsv")
        assert sum(r["mode"] == "conditional" for r in rows) == 4
        assert {(m["mode"], m["family"]) for m in means} >= {("conditional", "overall"), ("unconditional", "overall")}

    @pytest.mark.parametrize("golden,f,l", [
        ("param_accounting_f1024_l24.json", 1024, 24),
        ("param_accounting_f64_l4.json", 64, 4),
    ])
    def test_count_params(self, capsys, golden, f, l):
        ref = load_golden(golden)
        code, out, _ = run(capsys, ["count-params", "--F", str(f), "--L", str(l)])
        assert code == 0
        assert f"{ref['total']:,}" in out
        assert f"{ref['rows']['Zero-Initialized Linear']['per_unit']:,}" in out

    def test_count_params_bad_int(self):
        with pytest.raises(SystemExit) as info:
            main(["count-params", "--F", "zero"])
        assert info.value.code == 2
