import pytest
from hypothesis import given, settings, strategies as st

from ddifuse.config import ExperimentConfig, load_config
from ddifuse.exceptions import ConfigError


def test_defaults():
    cfg = load_config(text="")
    assert cfg == ExperimentConfig()
    assert cfg.synthetic and cfg.seed_list == (0, 1, 2)
    assert cfg.teacher.lr == 0.001 and cfg.teacher.epochs == 10 and cfg.teacher.batch_size == 1024
    assert cfg.student.alpha == 0.5 and cfg.student.tau == 1.0 and cfg.student.weight_decay == 1e-4
    assert cfg.eval.target_tpr == 0.9
    edge = load_config(text="[split]\nregime = edge\n")
    assert edge.seed_list == (0,)


def test_parse_types(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[student]\nlr = 0.5\nnormalize = no\n[run]\nseeds = 4, 5\noutput_dir = out\n"
                   "[eval]\nmodels = teacher, student\n")
    cfg = load_config(ini)
    assert cfg.student.lr == 0.5 and cfg.student.normalize is False
    assert cfg.run.seeds == (4, 5) and cfg.eval.models == ("teacher", "student")
    assert cfg.run.output_dir == str(tmp_path / "out")


@pytest.mark.parametrize("text, match", [
    ("[bogus]\nx = 1\n", "unknown config section"),
    ("[student]\nlearning_rate = 1\n", "unknown key"),
    ("[student]\nlr = fast\n", "cannot parse"),
    ("[student]\nnormalize = maybe\n", "cannot parse"),
    ("[student]\nalpha = 1.5\n", "alpha"),
    ("[student]\ntau = 0\n", "tau"),
    ("[split]\nregime = random\n", "regime"),
    ("[split]\ntrain_frac = 0.95\n", "exceeds"),
    ("[negatives]\nk_test = 0\n", "k_test"),
    ("[eval]\nmodels = teacher, gnn\n", "unknown model"),
    ("[eval]\nmodels = student\n", "needs the teacher"),
    ("[eval]\nmodels = concat_mlp\n", "concat_mlp"),
    ("[run]\nseeds = 1, 1\n", "duplicates"),
    ("[eval]\ndetector = svm\n", "detector"),
    ("[teacher]\nfreeze_entities = true\n", "freeze_entities"),
    ("[data]\ntriples = nope.tsv\nfeatures = f.txt\n", "not found"),
    ("[world]\nnum_relations = 1\n", "world"),
    ("no header line\n", "malformed"),
])
def test_validation_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        load_config(text=text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.ini")


def test_hash_ignores_output_dir_only():
    a = ExperimentConfig()
    assert a.config_hash() == a.with_overrides(run={"output_dir": "/elsewhere"}).config_hash()
    assert a.config_hash() != a.with_overrides(student={"lr": 0.2}).config_hash()
    assert len(a.config_hash()) == 64


def test_with_overrides_rejects_unknown():
    with pytest.raises(ConfigError):
        ExperimentConfig().with_overrides(nope={"x": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig().with_overrides(student={"nope": 1})


@settings(max_examples=30, deadline=None)
@given(lr=st.floats(1e-4, 10.0), alpha=st.floats(0.0, 1.0), seeds=st.lists(st.integers(0, 99),
       min_size=1, max_size=4, unique=True), normalize=st.booleans())
def test_ini_roundtrip(lr, alpha, seeds, normalize):
    cfg = ExperimentConfig().with_overrides(student={"lr": lr, "alpha": alpha, "normalize": normalize},
                                            run={"seeds": tuple(seeds)})
    back = load_config(text=cfg.to_ini())
    assert back == cfg and back.config_hash() == cfg.config_hash()


def test_shipped_config_loads():
    from pathlib import Path
    cfg = load_config(Path(__file__).parents[1] / "configs" / "synthetic_node.ini")
    assert cfg.seed_list == (0, 1, 2) and cfg.world.edge_threshold == 10.0
