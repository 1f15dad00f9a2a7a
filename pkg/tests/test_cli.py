import json
import re

import numpy as np
import pytest

from macnet import cli
from macnet.percept import embedding_distances, load_matrix_csv, save_matrix_csv

TINY_SYNTH = {"train_count": 8, "val_count": 4, "test_count": 4, "annotators": 10}
TINY_NET = ["--channels", "2,3", "--hidden", "6", "--batch-size", "8", "--max-epochs", "1"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "s.json"
    cfg.write_text(json.dumps(TINY_SYNTH))
    assert cli.main(["synth", "--config", str(cfg), "--out", str(root / "corpus")]) == 0
    assert cli.main(["distances", "--judgments", str(root / "corpus" / "judgments.json"),
                     "--out", str(root / "D.csv")]) == 0
    assert cli.main(["embed", "--distances", str(root / "D.csv"), "--attributes", "3", "--restarts", "2",
                     "--iterations", "200", "--out", str(root / "A.csv")]) == 0
    return root


def test_synth_rerun_byte_identical(tmp_path, capsys):
    cfg = tmp_path / "s.json"
    cfg.write_text(json.dumps(TINY_SYNTH))
    for name in ("a", "b"):
        code, _, _ = run(capsys, "synth", "--config", cfg, "--out", tmp_path / name, "--threads", 1)
        assert code == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    a.pop("config.json"), b.pop("config.json")  # records its own output path
    assert a == b
    assert "manifest.json" in a and "judgments.json" in a


def test_embed_planted_reports_small_objective(tmp_path, capsys):
    A = np.random.default_rng(0).uniform(size=(4, 3))
    save_matrix_csv(tmp_path / "D.csv", embedding_distances(A))
    code, out, _ = run(capsys, "embed", "--distances", tmp_path / "D.csv", "--attributes", 3,
                       "--prior-weight", 0, "--out", tmp_path / "A.csv")
    assert code == 0
    assert json.loads(out)["objective"] < 1e-3
    assert load_matrix_csv(tmp_path / "A.csv").shape == (4, 3)
    assert json.loads((tmp_path / "A.report.json").read_text())["objective"] < 1e-3


def test_train_contract(corpus, tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--corpus", corpus / "corpus", "--attr-matrix", corpus / "A.csv",
                       "--out", tmp_path / "run1", *TINY_NET)
    assert code == 0
    for name in ("config.json", "metrics.jsonl", "best.ckpt"):
        assert (tmp_path / "run1" / name).exists()
    resolved = json.loads((tmp_path / "run1" / "config.json").read_text())
    assert resolved["hidden"] == 6 and resolved["subcommand"] == "train"


def test_downstream_subcommands(corpus, tmp_path, capsys):
    run_dir = tmp_path / "run"
    assert run(capsys, "train", "--corpus", corpus / "corpus", "--attr-matrix", corpus / "A.csv",
               "--out", run_dir, *TINY_NET)[0] == 0
    ckpt = run_dir / "best.ckpt"
    code, out, _ = run(capsys, "eval", "--corpus", corpus / "corpus", "--checkpoint", ckpt,
                       "--attr-matrix", corpus / "A.csv", "--out", tmp_path / "ev")
    assert code == 0
    rep = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert {"accuracy", "u_final_per_attribute", "distribution_kl", "attribute_silhouette"} <= set(rep)
    code, _, _ = run(capsys, "maps", "--corpus", corpus / "corpus", "--checkpoint", ckpt, "--size", 64,
                     "--stride", 16, "--out", tmp_path / "maps")
    assert code == 0
    names = {p.name for p in (tmp_path / "maps").iterdir()}
    assert {"attribute_00.png", "attribute_02.csv", "material_07.png", "consistency.json"} <= names
    code, _, _ = run(capsys, "traits", "--corpus", corpus / "corpus", "--checkpoint", ckpt,
                     "--n-proposals", 200, "--out", tmp_path / "tr")
    assert code == 0
    assert "mean_test_accuracy" in json.loads((tmp_path / "tr" / "traits.json").read_text())


def test_nshot_outputs(corpus, tmp_path, capsys):
    assert run(capsys, "embed", "--distances", corpus / "D.csv", "--attributes", 3, "--restarts", 1,
               "--iterations", 50, "--remove-category", 0, "--out", tmp_path / "A7.csv")[0] == 0
    assert run(capsys, "train", "--corpus", corpus / "corpus", "--attr-matrix", tmp_path / "A7.csv",
               "--exclude-category", 0, "--out", tmp_path / "r7", "--channels", "2,3", "--hidden", 6,
               "--batch-size", 7, "--max-epochs", 1)[0] == 0
    code, _, _ = run(capsys, "nshot", "--corpus", corpus / "corpus", "--checkpoint", tmp_path / "r7" / "best.ckpt",
                     "--shots", "1,2", "--pool-images", 2, "--negative-images", 1, "--test-images", 1,
                     "--svm-epochs", 3, "--out", tmp_path / "ns")
    assert code == 0
    lines = (tmp_path / "ns" / "curve.csv").read_text().splitlines()
    assert lines[0] == "N,feature_set,mean,std" and len(lines) == 7


def test_heatmap_uses_fixed_table():
    table = cli.load_colormap()
    assert table.shape == (256, 3)
    rgb = cli.heatmap(np.array([[0.0, 1.0]]), table)
    assert np.array_equal(rgb[0, 0], table[0]) and np.array_equal(rgb[0, 1], table[255])


# configuration handling ---------------------------------------------------------------

def one_json_line(err):
    lines = err.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


def test_unknown_key_exit_2(tmp_path, capsys):
    (tmp_path / "c.json").write_text('{"train_count": 1, "bogus": 3}')
    code, _, err = run(capsys, "synth", "--config", tmp_path / "c.json", "--out", tmp_path / "o")
    assert code == 2
    diag = one_json_line(err)
    assert diag["error"] == "config" and "bogus" in diag["message"]


@pytest.mark.parametrize("argv", [
    ["synth", "--out", "x", "--train-count", "many"],
    ["embed", "--out", "x.csv"],
    ["frobnicate"],
    [],
    ["train", "--corpus", "c", "--out", "o", "--threads", "0"],
])
def test_config_errors_exit_2(argv, capsys):
    code, _, err = run(capsys, *argv)
    assert code == 2
    assert one_json_line(err)["error"] == "config"


def test_bad_json_exit_2(tmp_path, capsys):
    (tmp_path / "c.json").write_text("{not json")
    code, _, err = run(capsys, "synth", "--config", tmp_path / "c.json", "--out", tmp_path / "o")
    assert code == 2 and "JSON" in one_json_line(err)["message"]


def test_data_errors_exit_3(tmp_path, capsys):
    code, _, err = run(capsys, "distances", "--judgments", tmp_path / "missing.json", "--out", tmp_path / "D.csv")
    assert code == 3 and one_json_line(err)["error"] == "data"
    (tmp_path / "D.csv").write_text("# K=2 M=2\n0,0.5\n0.4,0\n")
    code, _, err = run(capsys, "embed", "--distances", tmp_path / "D.csv", "--out", tmp_path / "A.csv")
    assert code == 3 and "symmetric" in one_json_line(err)["message"]


def test_seed_precedence(tmp_path):
    (tmp_path / "c.json").write_text('{"seed": 5}')
    parser = cli.build_parser()

    def seed(argv, env):
        args = parser.parse_args(argv)
        return cli.resolve_config(args.subcommand, args, env)["seed"]

    base = ["synth", "--out", "o", "--config", str(tmp_path / "c.json")]
    assert seed(base, {}) == 5
    assert seed(base, {"MACNET_SEED": "9"}) == 9
    assert seed(base + ["--seed", "11"], {"MACNET_SEED": "9"}) == 11
    assert seed(["synth", "--out", "o"], {}) == 0


@pytest.mark.parametrize("sub", sorted(cli.SUBCOMMANDS))
def test_help_lists_every_key(sub, capsys):
    with pytest.raises(SystemExit) as info:
        cli.main([sub, "--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    listed = set(re.findall(r"^  (\w+)\s+(?:int|float|str|bool|ints|path)\s", text, flags=re.M))
    assert listed == {k.name for k in cli.keys_for(sub)}
    for k in cli.keys_for(sub):
        assert "--" + k.name.replace("_", "-") in text
