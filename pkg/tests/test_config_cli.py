import csv
import io
import json

import pytest

from coopsched import cli
from coopsched.config import RunConfig, default_document, parse_override
from coopsched.errors import ConfigError
from coopsched.netsim import FRAME_REPORT_SCHEMA, SWEEP_COLUMNS
from coopsched.scene import Scenario

SMALL = ["--override", "grid.h=12", "--override", "grid.w=24", "--override", "grid.c=8",
         "--override", "agents.sensing_radius=10", "--override", "scene.n_objects=4"]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_defaults_match_shipped_file():
    with open("configs/default.json") as fh:
        assert json.load(fh) == default_document()


def test_override_parsing():
    assert parse_override("train.lambda=0.5") == ("train.lambda", 0.5)
    assert parse_override("params.path=foo.json") == ("params.path", "foo.json")
    assert parse_override("sweep.agents=[2,4]") == ("sweep.agents", [2, 4])
    with pytest.raises(ConfigError):
        parse_override("novalue")


@pytest.mark.parametrize("override,key", [
    ("agents.count=0", "agents.count"),
    ("grid.c=1", "grid.c"),
    ("sched.top_k=3", "sched.top_k"),
    ("budget.fps=-1", "budget.fps"),
    ("sweep.agents=[4,2]", "sweep.agents"),
    ("bogus.key=1", "bogus.key"),
    ("agents.count=true", "agents.count"),
    ("sim.ego=5", "sim.ego"),
])
def test_validation_names_the_key(override, key):
    with pytest.raises(ConfigError) as exc:
        RunConfig.load(None, [override])
    assert exc.value.key == key


def test_missing_seed(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"agents": {"count": 2}}))
    with pytest.raises(ConfigError) as exc:
        RunConfig.load(path)
    assert exc.value.key == "seed"
    assert RunConfig.load(path, seed=3)["seed"] == 3


def test_dotted_and_nested_keys_agree(tmp_path):
    a = RunConfig.from_dict({"seed": 1, "agents": {"count": 3}})
    b = RunConfig.from_dict({"seed": 1, "agents.count": 3})
    assert a == b


def test_gen_round_trip(tmp_path, capsys):
    out = tmp_path / "scene.json"
    code, _, _ = run(capsys, "gen", "--out", str(out), *SMALL)
    assert code == 0
    scenario = Scenario.from_dict(json.loads(out.read_text()))
    assert scenario == RunConfig.load(None, [a for a in SMALL if a != "--override"]).scene().build()
    assert json.loads(out.read_text())["seed"] == 7


def test_gen_errors_exit_with_config_code(tmp_path, capsys):
    code, _, err = run(capsys, "gen", "--override", "agents.count=0")
    assert code == cli.EXIT_CONFIG and "agents.count" in err
    path = tmp_path / "c.json"
    path.write_text("{}")
    code, _, err = run(capsys, "gen", "--config", str(path))
    assert code == cli.EXIT_CONFIG and "seed" in err
    code, _, err = run(capsys, "gen", "--override", "scene.n_objects=100000", *SMALL[:6])
    assert code == cli.EXIT_CONFIG


def test_train_outputs(tmp_path, capsys):
    out = tmp_path / "p.json"
    args = ["train", "--out", str(out), *SMALL, "--override", "train.lambda=0.25"]
    code, echo, _ = run(capsys, *args)
    assert code == 0
    doc = json.loads(echo)
    assert doc["config"]["train"]["lambda"] == 0.25
    rows = list(csv.DictReader(io.StringIO((tmp_path / "p.csv").read_text())))
    assert len(rows) == 30
    first = (tmp_path / "p.csv").read_bytes()
    run(capsys, *args)
    assert (tmp_path / "p.csv").read_bytes() == first
    assert json.loads(out.read_text())["enc.lambda"] == 0.25


def test_train_divergence_exit_code(tmp_path, capsys):
    with pytest.warns(RuntimeWarning):
        code, _, err = run(capsys, "train", "--out", str(tmp_path / "p.json"), *SMALL,
                           "--override", "train.lr=1e300")
    assert code == cli.EXIT_TRAINING and "epoch" in err


def test_verify_report(capsys):
    code, out, _ = run(capsys, "verify", "--trials", "200", "--seed", "3")
    assert code == 0 and out.count("PASS") == 3
    code2, out2, _ = run(capsys, "verify", "--trials", "200", "--seed", "3")
    strip = lambda text: [line.split(" (")[0] for line in text.splitlines()]
    assert strip(out) == strip(out2)


def test_verify_negative_control(capsys):
    code, out, _ = run(capsys, "verify", "--trials", "50", "--inject-fault")
    assert code == cli.EXIT_VERIFY
    assert "FAIL singleton_optimality" in out and "counterexample" in out


def test_verify_single_trial_json(capsys):
    code, out, _ = run(capsys, "verify", "--trials", "1", "--seed", "9", "--json")
    doc = json.loads(out)
    assert code == 0 and [c["name"] for c in doc["checks"]] == [
        "singleton_optimality", "greedy_optimality", "relaxation_consistency"]


def test_sim_report_matches_schema(tmp_path, capsys):
    jsonschema = pytest.importorskip("jsonschema")
    dump_path = tmp_path / "frame.bin"
    code, out, _ = run(capsys, "sim", *SMALL, "--override", "agents.count=3", "--baseline",
                       "--dump-messages", str(dump_path))
    assert code == 0
    doc = json.loads(out)
    jsonschema.validate(doc, FRAME_REPORT_SCHEMA)
    jsonschema.validate(doc["baseline"], FRAME_REPORT_SCHEMA)
    assert doc["total_bytes"] <= doc["baseline"]["total_bytes"]
    code, text, _ = run(capsys, "dump", str(dump_path), "--max-entries", "1")
    assert code == 0 and text.count("utility agent=") == 3


def test_dump_truncated_file(tmp_path, capsys):
    data_path = tmp_path / "frame.bin"
    run(capsys, "sim", *SMALL, "--dump-messages", str(data_path))
    data = data_path.read_bytes()
    data_path.write_bytes(data[:15])
    code, _, err = run(capsys, "dump", str(data_path))
    assert code == cli.EXIT_DECODE
    assert "'h'" in err or "'frame_id'" in err or "field" in err


def test_sweep_csv_shape(capsys):
    code, out, _ = run(capsys, "sweep", *SMALL, "--agents", "2,4,8,16", "--seeds", "2")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert len(rows) == 8
    assert tuple(rows[0]) == SWEEP_COLUMNS


def test_sweep_plot_data_and_json(capsys):
    code, out, _ = run(capsys, "sweep", *SMALL, "--agents", "1,2", "--seeds", "1", "--plot-data")
    assert code == 0 and out.splitlines()[0] == "N,seed,metric,value"
    code, out, _ = run(capsys, "sweep", *SMALL, "--agents", "1,2", "--seeds", "1", "--json")
    assert [r["N"] for r in json.loads(out)["summary"]] == [1, 2]


def test_sim_uses_trained_params(tmp_path, capsys):
    params = tmp_path / "p.json"
    run(capsys, "train", "--out", str(params), *SMALL, "--override", "train.epochs=3")
    code, out, _ = run(capsys, "sim", *SMALL, "--override", f"params.path={params}")
    assert code == 0
    code, _, err = run(capsys, "sim", "--override", f"params.path={params}")
    assert code == cli.EXIT_CONFIG and "params.path" in err
