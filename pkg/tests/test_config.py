import pytest

from inett.config import Config, ConfigError, load, loads


def test_defaults_round_trip():
    cfg = Config()
    again = loads(cfg.dumps())
    assert again == cfg
    assert cfg.solver.tau == 1.01 and cfg.solver.n_max == 30
    assert cfg.training.batch_size == 10 and cfg.unet.a == 1e-3


def test_partial_file_overrides_only_named_keys(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("[training]\nepochs = 7\nlr = 0.01\n\n[geometry]\nn_views = 60\n")
    cfg = load(path)
    assert cfg.training.epochs == 7 and isinstance(cfg.training.epochs, int)
    assert cfg.training.lr == 0.01
    assert cfg.geometry.n_views == 60 and cfg.geometry.n == 64
    assert loads(cfg.dumps()) == cfg


@pytest.mark.parametrize("text,needle", [
    ("[training]\nepochz = 3\n", "epochz"),
    ("[optimizer]\nlr = 1\n", "optimizer"),
    ("[training]\nepochs = many\n", "epochs"),
    ("epochs = 3\n", "section"),
])
def test_bad_files_are_rejected(text, needle):
    with pytest.raises(ConfigError) as exc:
        loads(text)
    assert needle in str(exc.value).lower()
    assert isinstance(exc.value, ValueError)
