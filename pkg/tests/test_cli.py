import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from foldrare import cli
from foldrare.config import ConfigError, PipelineConfig, apply_overrides, load_config

TINY = [
    "splits.n_labeled=6", "splits.n_train=12", "splits.n_val=6", "splits.n_test=12",
    "splits.n_interrupted=4", "splits.n_asymmetry=6", "model.epochs=1", "detect.k_folds=2",
    "detect.repeats=2", "detect.n_trees=10", "explore.steps=3",
]


def run(tmp_path, *args, overrides=TINY):
    argv = [*args, "-q", "--set", f"workdir={tmp_path / 'w'}"]
    for o in overrides:
        argv += ["--set", o]
    return cli.main(argv)


class TestConfig:
    def test_round_trip(self):
        cfg = PipelineConfig()
        again = PipelineConfig.from_dict(json.loads(cfg.dumps()))
        assert again.dumps() == cfg.dumps()

    def test_overrides(self):
        cfg = load_config(overrides=["model.beta=4", "generator.dims=[48,48,64]", "benchmark.left_overrides.knob_position=0.6"])
        assert cfg.model.beta == 4
        assert cfg.generator.dims == (48, 48, 64)
        assert cfg.benchmark.left_overrides["knob_position"] == 0.6

    def test_seed_flag(self):
        assert load_config(seed=99).seed == 99

    @pytest.mark.parametrize("bad", [
        ["nonsense=1"], ["model.nonsense=1"], ["splits.n_train=0"], ["model.input_dims=[30,32,40]"],
        ["schema_version=2"], ["region=cingulate"], ["no_equals_sign"],
    ])
    def test_violations(self, bad):
        with pytest.raises(ConfigError):
            load_config(overrides=bad)

    def test_file(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"seed": 3, "model": {"beta": 1.0}}))
        cfg = load_config(p)
        assert cfg.seed == 3 and cfg.model.beta == 1.0 and cfg.model.latent_dim == 16

    @given(st.floats(0.1, 10), st.integers(1, 64), st.integers(0, 2**40))
    @settings(max_examples=20)
    def test_parse_serialize_parse(self, beta, latent, seed):
        d = apply_overrides(PipelineConfig().to_dict(), [f"model.beta={beta!r}", f"model.latent_dim={latent}", f"seed={seed}"])
        once = PipelineConfig.from_dict(d)
        twice = PipelineConfig.from_dict(json.loads(once.dumps()))
        assert once.dumps() == twice.dumps()


class TestExitCodes:
    def test_config_error(self, tmp_path):
        assert run(tmp_path, "synth", overrides=["model.beta=-1"]) == 4

    def test_bad_config_file(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{not json")
        assert cli.main(["synth", "-q", "--config", str(p)]) == 4
        assert cli.main(["synth", "-q", "--config", str(tmp_path / "missing.json")]) == 2

    def test_bad_dims(self, tmp_path):
        assert run(tmp_path, "synth", overrides=[*TINY, "generator.dims=[16,16,16]"]) == 2

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert cli.main(["synth", "-q", "--set", f"workdir={blocker / 'w'}", *sum((["--set", o] for o in TINY), [])]) == 2

    def test_missing_upstream(self, tmp_path):
        assert run(tmp_path, "detect") == 3
        assert run(tmp_path, "preprocess") == 3

    def test_lock(self, tmp_path):
        (tmp_path / "w").mkdir()
        (tmp_path / "w" / ".lock").write_text("1")
        assert run(tmp_path, "synth") == 2


def test_synth_manifest_reproducible(tmp_path):
    assert run(tmp_path / "a", "synth", "--seed", "7") == 0
    assert run(tmp_path / "b", "synth", "--seed", "7") == 0
    ma = (tmp_path / "a" / "w" / "synth" / "train.json").read_bytes()
    mb = (tmp_path / "b" / "w" / "synth" / "train.json").read_bytes()
    assert ma == mb
    assert len(json.loads(ma)) == 12


def test_dump_config(capsys):
    assert cli.main(["synth", "--dump-config", "--set", "seed=5"]) == 0
    assert json.loads(capsys.readouterr().out)["seed"] == 5
