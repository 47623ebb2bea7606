import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from hatesage.cli import build_parser, run
from hatesage.evaluation import auc, confusion, parse_keyvalue, prf
from hatesage.synthetic import planted_partition
from hatesage.training import read_predictions

SUBCOMMANDS = ["ingest", "sample", "train", "evaluate", "fairness", "demography", "gradcheck"]


def only_child(parent: Path) -> Path:
    (d,) = [p for p in parent.iterdir() if p.is_dir()]
    return d


def write_fairness_preds(path, fp, neg=128):
    lines = ["node_id,label,group,score"]
    nid = 0
    for i in range(neg):
        lines.append(f"{nid},0,AA,{0.9 if i < fp else 0.1}")
        nid += 1
    for _ in range(8):
        lines.append(f"{nid},1,AA,0.8")
        nid += 1
    for i in range(40):
        lines.append(f"{nid},0,other,{0.7 if i < 4 else 0.3}")
        nid += 1
    path.write_text("\n".join(lines) + "\n")


@pytest.fixture(scope="module")
def store(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    graph, table = planted_partition(block_size=20, seed=3)
    src, dst = [], []
    for v in range(graph.node_count):
        for u in graph.indices[graph.indptr[v] : graph.indptr[v + 1]]:
            src.append(v)
            dst.append(int(u))
    # sparse original ids, one self-loop and one duplicate for the report
    ids = 1000 + 7 * np.arange(graph.node_count)
    rows = [f"{ids[a]},{ids[b]}" for a, b in zip(src, dst)] + [f"{ids[0]},{ids[0]}", f"{ids[src[0]]},{ids[dst[0]]}"]
    (d / "edges.csv").write_text("src,dst\n" + "\n".join(rows) + "\n")
    names = ",".join(table.feature_names)
    lines = [f"user_id,hate,{names}"]
    for i in range(graph.node_count):
        lab = "hateful" if table.labels[i] == 1 else "normal"
        lines.append(f"{ids[i]},{lab}," + ",".join(repr(float(x)) for x in table.features[i]))
    (d / "nodes.csv").write_text("\n".join(lines) + "\n")
    (d / "groups.csv").write_text("node_id,group\n" + "".join(f"{ids[i]},{'AA' if i % 4 == 0 else 'other'}\n" for i in range(graph.node_count)))
    out = d / "store"
    assert run(["ingest", "--edges", str(d / "edges.csv"), "--nodes", str(d / "nodes.csv"), "--out", str(out), "--text-cols", "f*"]) == 0
    return d


class TestHelp:
    @pytest.mark.parametrize("cmd", SUBCOMMANDS)
    def test_help(self, cmd, capsys):
        assert run([cmd, "--help"]) == 0
        text = capsys.readouterr().out
        sub = build_parser()._subparsers._group_actions[0].choices[cmd]
        for action in sub._actions:
            for opt in action.option_strings:
                assert opt in text

    def test_top_level_help(self, capsys):
        assert run(["--help"]) == 0
        out = capsys.readouterr().out
        assert all(c in out for c in SUBCOMMANDS)

    def test_console_script(self):
        r = subprocess.run([sys.executable, "-m", "hatesage.cli", "--help"], capture_output=True, text=True)
        assert r.returncode == 0 and "gradcheck" in r.stdout


class TestUsage:
    def test_unknown_flag(self, capsys):
        assert run(["evaluate", "--pred", "x.csv", "--bogus"]) == 1
        assert "--bogus" in capsys.readouterr().err

    def test_unknown_subcommand(self):
        assert run(["frobnicate"]) == 1

    def test_missing_required(self):
        assert run(["fairness", "--pred", "x.csv"]) == 1


class TestErrors:
    def test_empty_predictions(self, tmp_path, capsys):
        p = tmp_path / "empty_preds.csv"
        p.write_text("")
        code = run(["evaluate", "--pred", str(p)])
        err = capsys.readouterr().err
        assert code == 2
        assert "empty_preds.csv" in err and len(err.strip().splitlines()) == 1

    def test_missing_file(self, tmp_path, capsys):
        assert run(["evaluate", "--pred", str(tmp_path / "nope.csv")]) == 2
        assert "nope.csv" in capsys.readouterr().err

    def test_malformed_edge_list(self, tmp_path, capsys):
        (tmp_path / "e.csv").write_text("1,2\n3,x\n")
        (tmp_path / "n.csv").write_text("user_id,hate\n1,1\n")
        code = run(["ingest", "--edges", str(tmp_path / "e.csv"), "--nodes", str(tmp_path / "n.csv"), "--out", str(tmp_path / "s")])
        assert code == 2
        assert "e.csv:2" in capsys.readouterr().err


class TestFairness:
    @pytest.mark.parametrize("fp,pct", [(26, "20.3%"), (13, "10.2%"), (0, "0.0%")])
    def test_crafted(self, tmp_path, fp, pct, capsys):
        pred = tmp_path / "preds.csv"
        write_fairness_preds(pred, fp)
        groups = tmp_path / "groups.csv"
        groups.write_text("node_id,group\n" + "".join(f"{i},{'AA' if i < 136 else 'other'}\n" for i in range(176)))
        rep = tmp_path / "fair"
        assert run(["fairness", "--pred", str(pred), "--groups", str(groups), "--protected", "AA", "--report", str(rep)]) == 0
        assert pct in capsys.readouterr().out
        kv = parse_keyvalue((tmp_path / "fair.kv").read_text())
        assert kv["fpr_protected"] == fp / 128 and kv["protected_fp"] == fp
        assert kv["fpr_rest"] == 0.1

    def test_absent_group(self, tmp_path, capsys):
        pred = tmp_path / "preds.csv"
        write_fairness_preds(pred, 3)
        assert run(["fairness", "--pred", str(pred), "--protected", "ZZ"]) == 2


class TestGradcheck:
    def test_sage_mean_seed7(self, capsys):
        assert run(["gradcheck", "--model", "sage-mean", "--seed", "7"]) == 0
        out = capsys.readouterr().out
        err = float(out.split("max_rel_error=")[1])
        assert err < 1e-4


class TestDemography:
    def test_groups_file(self, tmp_path, capsys):
        post = tmp_path / "post.csv"
        post.write_text(
            "user_id,message_id,p_white,p_black,p_hispanic,p_asian\n"
            "1,a,0.05,0.9,0.05,0\n1,b,0.2,0.7,0.1,0\n2,a,0.1,0.85,0.05,0\n3,a,0.7,0.2,0.1,0\n"
        )
        ov = tmp_path / "ov.txt"
        ov.write_text("[removals]\n2\n[additions]\n")
        out = tmp_path / "groups.csv"
        assert run(["demography", "--posteriors", str(post), "--overrides", str(ov), "--out", str(out)]) == 0
        assert "model_labeled=1 removed=1 added=0 protected=0" in capsys.readouterr().out
        assert out.read_text().splitlines()[1:] == ["1,other,model", "2,other,override-removed", "3,other,model"]

    def test_bad_probability_row(self, tmp_path, capsys):
        post = tmp_path / "post.csv"
        post.write_text("user_id,message_id,p_white,p_black,p_hispanic,p_asian\n1,a,0.5,0.9,0,0\n")
        assert run(["demography", "--posteriors", str(post), "--out", str(tmp_path / "g.csv")]) == 2
        assert "post.csv:2" in capsys.readouterr().err


class TestPipeline:
    def test_ingest_report(self, store):
        rep = (store / "store" / "ingest_report.txt").read_text()
        assert "self_loops=1" in rep and "duplicates=1" in rep and "nodes=40" in rep
        assert (store / "store" / "run_config.txt").exists()

    def test_ingest_refuses_overwrite(self, store):
        code = run(["ingest", "--edges", str(store / "edges.csv"), "--nodes", str(store / "nodes.csv"), "--out", str(store / "store"), "--text-cols", "f*"])
        assert code == 2

    @pytest.mark.parametrize("model", ["lr", "sage-maxpool"])
    def test_train_reproducible(self, store, tmp_path, model):
        cfg = tmp_path / "cfg.txt"
        cfg.write_text(f"model={model}\nhidden_dim=8\nepochs=3\nlr=0.01\nbatch_size=16\nk=2\n" + ("fanouts=4,4\n" if "sage" in model else ""))
        outs = []
        for rep in range(2):
            base = tmp_path / f"run{rep}"
            args = ["--threads", "1", "train", "--store", str(store / "store"), "--config", str(cfg), "--out", str(base), "--seed", "5", "--groups", str(store / "groups.csv")]
            assert run(args) == 0
            outs.append(only_child(base))
        a, b = outs
        assert a.name.endswith("-seed5")
        assert (a / "predictions.csv").read_bytes() == (b / "predictions.csv").read_bytes()
        for f in ("fold0/predictions.csv", "fold1/predictions.csv", "fold0/loss.txt"):
            assert (a / f).read_bytes() == (b / f).read_bytes()
        conf = (a / "run_config.txt").read_text()
        assert f"model.kind={'lr' if model == 'lr' else 'sage'}" in conf and "train.seed=5" in conf
        assert (a / "fold0" / "checkpoint" / "manifest.txt").exists()
        pooled = read_predictions(a / "predictions.csv")
        assert len(pooled["node_id"]) == 40 and len(set(pooled["node_id"].tolist())) == 40
        assert set(pooled["group"].tolist()) == {"AA", "other"}

    def test_never_overwrites(self, store, tmp_path):
        cfg = tmp_path / "cfg.txt"
        cfg.write_text("model=lr\nepochs=1\nk=2\n")
        for _ in range(2):
            assert run(["train", "--store", str(store / "store"), "--config", str(cfg), "--out", str(tmp_path / "runs"), "--seed", "1"]) == 0
        assert len([p for p in (tmp_path / "runs").iterdir()]) == 2

    def test_evaluate_matches_recount(self, store, tmp_path):
        cfg = tmp_path / "cfg.txt"
        cfg.write_text("model=sage-mean\nhidden_dim=8\nfanouts=5,5\nepochs=5\nlr=0.01\nk=2\n")
        assert run(["train", "--store", str(store / "store"), "--config", str(cfg), "--out", str(tmp_path / "r"), "--seed", "0"]) == 0
        d = only_child(tmp_path / "r")
        folds = [str(d / f"fold{i}" / "predictions.csv") for i in range(2)]
        assert run(["evaluate", "--pred", *folds, "--report", str(tmp_path / "m"), "--name", "sage-mean", "--sweep", "0.3,0.5"]) == 0
        kv = parse_keyvalue((tmp_path / "m.kv").read_text())
        preds = [read_predictions(f) for f in folds]
        s = np.concatenate([p["score"] for p in preds])
        y = np.concatenate([p["label"] for p in preds])
        expected = prf(confusion(s, y))
        for k, v in expected.items():
            assert kv[k] == v
        assert kv["auc"] == auc(s, y)
        assert "foldmean_auc" in kv
        text = (tmp_path / "m.txt").read_text()
        assert "sage-mean" in text and "AUC" in text

    def test_sample_commands(self, store, tmp_path):
        st = str(store / "store")
        assert run(["sample", "durw", "--store", st, "--out", str(tmp_path / "w"), "--seed", "2", "--budget", "10", "--jump-weight", "0.5"]) == 0
        walk = (only_child(tmp_path / "w") / "sample.txt").read_text().split()
        assert len(walk) == 10 and len(set(walk)) == 10
        seeds = tmp_path / "seeds.csv"
        seeds.write_text("node_id,score\n1000,1.0\n1007,0.5\n")
        args = ["sample", "diffusion", "--store", st, "--out", str(tmp_path / "d"), "--seed-scores", str(seeds), "--per-stratum", "2"]
        assert run(args) == 0
        picks = (only_child(tmp_path / "d") / "sample.txt").read_text().split()
        assert len(picks) == 8
