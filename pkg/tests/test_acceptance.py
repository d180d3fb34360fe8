"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The summary lines are printed at the end of the session (see ``conftest.py``).
Desk runs use MNIST when ``TARC_DATA_DIR`` points at the IDX files and the
synthetic digits otherwise.
"""

import contextlib
import dataclasses
import json
import math
import time

import numpy as np
import pytest

from tarc import tensor as T
from tarc.buffer import ReplayBuffer
from tarc.cli import main as cli_main
from tarc.config import config_from_dict
from tarc.losses import cross_entropy, multi_objective, ntxent, supcon
from tarc.metrics import (
    backward_transfer,
    corruption_scores,
    ece,
    flat_minima_probe,
    forward_transfer,
    noisy_label_probe,
)
from tarc.model import MultiHeadNet, NetworkConfig, load_checkpoint, save_checkpoint
from tarc.runner import _union as union
from tarc.runner import build_scenario, compare, network_config, run
from tarc.streams import find_mnist, load_idx, write_idx
from tarc.tensor import Tape, Tensor, gradient_check
from tarc.trainers import Learner, Method, TrainConfig, run_experiment

from conftest import ACCEPTANCE, unit_rows
from oracles import composite_instances

DATASET = "mnist" if find_mnist() else "synthetic"

DESK_CLASS_IL = {
    "scenario": {"kind": "class_il", "dataset": DATASET, "num_classes": 10, "train_per_class": 200,
                 "test_per_class": 100, "classes_per_task": 2},
    "train": {"flip": False},
    "metrics": {"ece": False},
}

DESK_ROTATED = {
    "scenario": {"kind": "domain_il", "dataset": DATASET, "num_classes": 10, "train_per_class": 200,
                 "test_per_class": 100, "n_tasks": 10, "samples_per_task": 500, "test_per_task": 300},
    "network": {"hidden_dims": [100, 100]},
    "train": {"flip": False},
    "metrics": {"ece": False},
}

FIVE_SEEDS = [0, 1, 2, 3, 4]
_shared = {}


@contextlib.contextmanager
def criterion(key, title):
    """Record PASS/FAIL for one criterion; ``details`` collects the numbers shown."""
    details = {}
    start = time.perf_counter()
    try:
        yield details
    except BaseException as exc:
        details["time"] = f"{time.perf_counter() - start:.1f}s"
        ACCEPTANCE.append((key, "FAIL", title, details, f"{type(exc).__name__}: {str(exc).splitlines()[0][:160]}"))
        raise
    details["time"] = f"{time.perf_counter() - start:.1f}s"
    ACCEPTANCE.append((key, "PASS", title, details, ""))


def _desk(base, **overrides):
    data = json.loads(json.dumps(base))
    for section, values in overrides.items():
        if isinstance(values, dict):
            data.setdefault(section, {}).update(values)
        else:
            data[section] = values
    return config_from_dict(data)


def _aggregate(reports_dir, method, key="avg_acc"):
    slug = method.replace("+", "_")
    rep = json.loads((reports_dir / f"report_{slug}.json").read_text())
    return rep["aggregate"][key]["mean"], [r[key] for r in rep["runs"]]


# 1 --------------------------------------------------------------------------


def test_criterion_01_gradient_correctness():
    with criterion("1", "gradient_check on every loss and the full network composite") as d:
        rng = np.random.default_rng(2024)
        start = time.perf_counter()
        worst = {}

        def record(name, value):
            worst[name] = max(worst.get(name, 0.0), value)

        for _ in range(100):
            y = rng.integers(0, 4, 5)
            record("cross_entropy", gradient_check(Tape(lambda x: cross_entropy(x, y)), {"x": rng.normal(size=(5, 4))}))
            tau = float(rng.uniform(0.1, 1.0))
            record("ntxent", gradient_check(Tape(lambda x: ntxent(T.l2_normalize(x), tau)), {"x": rng.normal(size=(6, 3))}))
            labels = np.repeat(rng.integers(0, 2, 4), 2)
            record("supcon", gradient_check(Tape(lambda x: supcon(T.l2_normalize(x), labels, tau)),
                                            {"x": rng.normal(size=(8, 3))}))
            yb, yr = rng.integers(0, 3, 2), rng.integers(0, 4, 6)
            alpha, beta = rng.uniform(0.1, 2.0, 2)
            mo = Tape(lambda a, r, b: multi_objective(a, y % 3, r, yr, alpha, beta, b, yb))
            record("multi_objective", gradient_check(mo, {"a": rng.normal(size=(5, 3)), "r": rng.normal(size=(6, 4)),
                                                          "b": rng.normal(size=(2, 3))}))
            record("replay_ce", gradient_check(Tape(lambda a, b: T.add(cross_entropy(a, y), cross_entropy(b, yb % 4))),
                                               {"a": rng.normal(size=(5, 4)), "b": rng.normal(size=(2, 4))}))
        stats = {}
        for tape, leaves in composite_instances(100, training=False, stats=stats):
            record("network", gradient_check(tape, leaves, eps=1e-5))
        elapsed = time.perf_counter() - start
        d.update({k: f"{v:.1e}" for k, v in worst.items()})
        d["network_instances_drawn"] = stats["drawn"]
        assert max(worst.values()) <= 1e-5, worst
        assert elapsed < 60.0, f"runtime {elapsed:.1f}s"


# 2 --------------------------------------------------------------------------


def test_criterion_02_closed_form_identities():
    with criterion("2", "closed-form loss identities") as d:
        errs = {}
        errs["ce_uniform"] = max(abs(cross_entropy(Tensor(np.zeros((3, C))), [0, 1, C - 1]).item() - math.log(C))
                                 for C in (2, 4, 10, 100))
        eq = []
        for two_n in (2, 4, 8, 32):
            Z = Tensor(np.tile(unit_rows(np.random.default_rng(two_n), 1, 5), (two_n, 1)))
            eq.append(abs(ntxent(Z, 0.3).item() - math.log(two_n - 1)))
            eq.append(abs(supcon(Z, np.zeros(two_n, int), 0.3).item() - math.log(two_n - 1)))
        errs["equal_similarity"] = max(eq)
        rng = np.random.default_rng(0)
        single = []
        for _ in range(100):
            Z = Tensor(unit_rows(rng, 12, 4))
            single.append(abs(supcon(Z, np.repeat(rng.permutation(100)[:6], 2), 0.07).item() - ntxent(Z, 0.07).item()))
        errs["supcon_vs_ntxent"] = max(single)
        mo = []
        for _ in range(100):
            logits, y = rng.normal(size=(6, 5)), rng.integers(0, 5, 6)
            alpha = float(rng.uniform(0.1, 3.0))
            value = multi_objective(Tensor(logits), y, Tensor(rng.normal(size=(6, 4))), y % 4, alpha, 0.0).item()
            mo.append(abs(value - alpha * cross_entropy(Tensor(logits), y).item()))
        errs["multi_objective"] = max(mo)
        d.update({k: f"{v:.1e}" for k, v in errs.items()})
        assert errs["ce_uniform"] <= 1e-10
        assert errs["equal_similarity"] <= 1e-9
        assert errs["supcon_vs_ntxent"] <= 1e-12
        assert errs["multi_objective"] <= 1e-12


# 3 --------------------------------------------------------------------------


def test_criterion_03_reservoir_inclusion():
    with criterion("3", "reservoir inclusion frequency") as d:
        start = time.perf_counter()
        hits = np.zeros(1000)
        images, stream = np.zeros((1000, 1, 1)), np.arange(1000)
        for trial in range(5000):
            buf = ReplayBuffer(20, seed=trial)
            buf.insert_batch(images, stream)
            hits[buf.contents()[1]] += 1
        elapsed = time.perf_counter() - start
        freq = hits / 5000
        d.update(min=f"{freq.min():.4f}", max=f"{freq.max():.4f}")
        assert np.all(np.abs(freq - 0.02) <= 0.01)
        assert elapsed < 30.0


# 4 --------------------------------------------------------------------------


def test_criterion_04_metric_definitions():
    with criterion("4", "metric definitional suite") as d:
        fwt = forward_transfer([[0.9, 0.15], [0.7, 0.8]], [0.1, 0.1])
        bwt = backward_transfer([[0.9, 0.1], [0.7, 0.8]])
        e1 = ece(np.full(10, 0.8), np.arange(10) < 6)[0]
        e2 = ece(np.r_[np.full(5, 0.6), np.full(5, 0.9)], np.r_[np.arange(5) < 3, np.ones(5, bool)])[0]
        table = {"gaussian_noise": [0.1, 0.2, 0.3, 0.4, 0.5], "contrast": [0.3] * 5}
        mce, _ = corruption_scores(table, table, 0.05, 0.05)
        rng = np.random.default_rng(0)
        worst_bwt = max(backward_transfer(rng.uniform(size=(t, t))) for t in rng.integers(2, 10, 1000))
        d.update({k: f"{v:.4f}" for k, v in dict(fwt=fwt, bwt=bwt, ece_single=e1, ece_two=e2, mce=mce,
                                                   max_random_bwt=worst_bwt).items()})
        assert abs(fwt - 0.05) <= 1e-12 and abs(bwt + 0.2) <= 1e-12
        assert abs(e1 - 0.2) <= 1e-12 and abs(e2 - 0.05) <= 1e-12
        assert mce == 100.0
        assert worst_bwt <= 0.0


# 5 --------------------------------------------------------------------------


def _snap(net, prefix):
    return {n: p.data.tobytes() for n, p in net.params.items() if n.startswith(prefix)}


def test_criterion_05_phase_invariants():
    with criterion("5", "two-phase structural invariants on a 2-task micro-run") as d:
        start = time.perf_counter()
        cfg = config_from_dict({"scenario": {"kind": "class_il", "num_classes": 4, "train_per_class": 20,
                                             "test_per_class": 5, "image_size": 12, "classes_per_task": 2}})
        scenario = build_scenario(cfg, 0)
        learner = Learner(Method.parse("er+tarc"), NetworkConfig(144, [32, 32], 4, 16),
                          TrainConfig(budget_epochs=4, batch_size=8, buffer_capacity=16, flip=False))
        log = []
        learner.step_hook = lambda lrn, phase, step: log.append(
            (phase, _snap(lrn.net, "cls."), _snap(lrn.net, "rot."), _snap(lrn.net, "ssl."), lrn.buffer.seen_count))
        problems = []
        for t in range(2):
            log.clear()
            before = (_snap(learner.net, "cls."), _snap(learner.net, "rot."), learner.buffer.seen_count)
            stats = learner.train_task(t, *scenario.task_data(t))
            S = stats.total_steps
            if (stats.agnostic_steps, stats.specific_steps) != (math.floor(0.9 * S), S - math.floor(0.9 * S)):
                problems.append(f"task {t}: step split {stats.agnostic_steps}/{stats.specific_steps} of {S}")
            agn = [e for e in log if e[0] == "agnostic"]
            specific = [e for e in log if e[0] == "specific"]
            if any(e[1] != before[0] or e[2] != before[1] for e in agn):
                problems.append(f"task {t}: cls/rot moved in phase 1")
            if any(e[4] != before[2] for e in agn):
                problems.append(f"task {t}: buffer written in phase 1")
            if any(e[3] != agn[-1][3] for e in specific):
                problems.append(f"task {t}: ssl moved in phase 2")
            offered = stats.buffer_seen_after - stats.buffer_seen_after_agnostic
            if offered != stats.specific_steps * 8:
                problems.append(f"task {t}: buffer offered {offered} samples in phase 2")
            d[f"task{t}"] = f"{stats.agnostic_steps}/{stats.specific_steps}"
        elapsed = time.perf_counter() - start
        assert not problems, problems
        assert elapsed < 60.0


# 6 --------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_06_desk_ordering(tmp_path):
    with criterion("6", "Joint > ER(500) > SGD on desk Class-IL, B=5") as d:
        start = time.perf_counter()
        cfg = _desk(DESK_CLASS_IL, methods=["joint", "er", "sgd"], seeds=[0, 1, 2],
                    train={"budget_epochs": 5, "buffer_capacity": 500})
        run(cfg, tmp_path)
        joint, er, sgd = (_aggregate(tmp_path, m)[0] for m in ("joint", "er", "sgd"))
        elapsed = time.perf_counter() - start
        d.update(joint=f"{joint:.3f}", er=f"{er:.3f}", sgd=f"{sgd:.3f}", data=DATASET)
        assert joint > er > sgd
        assert joint - sgd >= 0.25
        assert elapsed < 600.0


# 7 --------------------------------------------------------------------------

# Shared training settings for the TARC comparisons (see README, "Acceptance suite").
CLASS_IL_TARC = {"budget_epochs": 50, "buffer_capacity": 200, "learning_rate": 1e-3}


def _class_il_tarc(tmp_path):
    if "7a" not in _shared:
        cfg = _desk(DESK_CLASS_IL, methods=["er", "er+tarc"], seeds=FIVE_SEEDS, train=CLASS_IL_TARC)
        start = time.perf_counter()
        run(cfg, tmp_path)
        _shared["7a"] = {
            "er": _aggregate(tmp_path, "er"),
            "er+tarc": _aggregate(tmp_path, "er+tarc"),
            "elapsed": time.perf_counter() - start,
            "dir": tmp_path,
        }
    return _shared["7a"]


@pytest.mark.slow
def test_criterion_07a_tarc_gain_class_il(tmp_path):
    with criterion("7a", "ER+TARC - ER >= 0 on desk Class-IL, buffer 200, 5 seeds") as d:
        res = _class_il_tarc(tmp_path)
        er, tarc = res["er"][0], res["er+tarc"][0]
        d.update(er=f"{er:.4f}", er_tarc=f"{tarc:.4f}", gain=f"{tarc - er:+.4f}")
        assert tarc - er >= 0.0
        assert res["elapsed"] < 900.0


@pytest.mark.slow
def test_criterion_07b_tarc_transfer_rotated(tmp_path):
    with criterion("7b", "FwT and BwT of ER+TARC exceed ER on desk R-MNIST, B=2, 5 seeds") as d:
        start = time.perf_counter()
        cfg = _desk(DESK_ROTATED, methods=["er", "er+tarc"], seeds=FIVE_SEEDS,
                    train={"budget_epochs": 2, "buffer_capacity": 200})
        run(cfg, tmp_path)
        elapsed = time.perf_counter() - start
        fwt = {m: _aggregate(tmp_path, m, "fwt")[0] for m in ("er", "er+tarc")}
        bwt = {m: _aggregate(tmp_path, m, "bwt")[0] for m in ("er", "er+tarc")}
        d.update(fwt_er=f"{fwt['er']:.4f}", fwt_tarc=f"{fwt['er+tarc']:.4f}",
                 bwt_er=f"{bwt['er']:.4f}", bwt_tarc=f"{bwt['er+tarc']:.4f}")
        assert bwt["er+tarc"] > bwt["er"]
        assert fwt["er+tarc"] > fwt["er"]
        assert elapsed < 900.0


@pytest.mark.slow
def test_criterion_07c_tarc_gain_oewc(tmp_path):
    with criterion("7c", "oEWC+TARC >= oEWC on desk R-MNIST, 5 seeds") as d:
        start = time.perf_counter()
        cfg = _desk(DESK_ROTATED, methods=["oewc", "oewc+tarc"], seeds=FIVE_SEEDS)
        run(cfg, tmp_path)
        elapsed = time.perf_counter() - start
        base, tarc = _aggregate(tmp_path, "oewc")[0], _aggregate(tmp_path, "oewc+tarc")[0]
        d.update(oewc=f"{base:.4f}", oewc_tarc=f"{tarc:.4f}")
        assert tarc >= base
        assert elapsed < 900.0


# 8 --------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_08_probe_sanity():
    with criterion("8", "flat-minima and noisy-label probe sanity") as d:
        cfg = _desk(DESK_CLASS_IL, train={"budget_epochs": 5, "buffer_capacity": 500})
        curves = []
        for seed in (0, 1, 2):
            scenario = build_scenario(cfg, seed)
            train_cfg = dataclasses.replace(cfg.train, seed=seed)
            net = run_experiment("er", scenario, train_cfg, network_config(cfg, scenario)).net
            train, test = union(scenario, "train"), union(scenario, "test")
            if seed == 0:
                net.eval()
                acc = float(np.mean(np.argmax(net.predict_logits(train.images), axis=1) == train.labels))
                flat = flat_minima_probe(net, train.images, train.labels, [0.0, 1.0], trials=3, seed=0)
                d.update(acc=f"{acc:.4f}", sigma0=f"{flat[0]:.4f}", sigma1=f"{flat[1]:.4f}")
                assert flat[0] == acc
                assert flat[1] <= 0.1 + 0.05
            curves.append(noisy_label_probe(net, train, test, [0.0, 0.2, 0.4, 0.6, 0.8], seed=seed))
        mean = np.mean(curves, axis=0)
        d["noisy_curve"] = "/".join(f"{v:.3f}" for v in mean)
        assert np.all(np.diff(mean) <= 0.02)


# 9 --------------------------------------------------------------------------


def test_criterion_09_determinism_and_formats(tmp_path, capsys):
    with criterion("9", "byte-identical reports, IDX round trip, checkpoint restore") as d:
        config = {
            "scenario": {"kind": "class_il", "num_classes": 4, "train_per_class": 10, "test_per_class": 5,
                         "image_size": 10, "classes_per_task": 2},
            "methods": ["er", "er+tarc", "oewc"],
            "train": {"budget_epochs": 2, "reg_budget_epochs": 1, "batch_size": 8, "buffer_capacity": 8},
            "network": {"hidden_dims": [16, 16], "ssl_proj_dim": 8},
            "metrics": {"flatness": True, "bias": True, "sigma_grid": [0.0, 0.1], "flatness_trials": 1},
            "seeds": [0, 1],
        }
        (tmp_path / "c.json").write_text(json.dumps(config))
        texts = []
        for name in ("a", "b"):
            assert cli_main(["run", str(tmp_path / "c.json"), "--output-dir", str(tmp_path / name)]) == 0
            texts.append({f.name: "\n".join(l for l in f.read_text().splitlines() if "wall_clock" not in l)
                          for f in sorted((tmp_path / name).glob("*")) if f.suffix in (".json", ".csv")})
        capsys.readouterr()
        assert texts[0] == texts[1]
        d["files_compared"] = len(texts[0])

        rng = np.random.default_rng(0)
        raw, labels = rng.integers(0, 256, (50, 28, 28), dtype=np.uint8), rng.integers(0, 10, 50)
        write_idx(tmp_path / "img", tmp_path / "lab", raw, labels)
        ds = load_idx(tmp_path / "img", tmp_path / "lab")
        write_idx(tmp_path / "img2", tmp_path / "lab2", ds.images, ds.labels)
        assert (tmp_path / "img").read_bytes() == (tmp_path / "img2").read_bytes()
        assert (tmp_path / "lab").read_bytes() == (tmp_path / "lab2").read_bytes()
        assert np.array_equal(np.rint(ds.images * 255).astype(np.uint8), raw)

        net = MultiHeadNet(NetworkConfig(784, [100, 100], 10), seed=5)
        net.train()
        net.forward_head(net.forward_backbone(rng.uniform(size=(8, 784))), "ssl")
        buf = ReplayBuffer(10, seed=2)
        buf.insert_batch(ds.images[:20], ds.labels[:20])
        save_checkpoint(tmp_path / "net.ckpt", net, buf)
        net2, buf2, _ = load_checkpoint(tmp_path / "net.ckpt")
        x = ds.images
        assert net.eval().predict_logits(x).tobytes() == net2.eval().predict_logits(x).tobytes()
        z = [n.forward_head(n.forward_backbone(x[:8]), "ssl").data.tobytes() for n in (net, net2)]
        assert z[0] == z[1]
        assert buf.contents()[0].tobytes() == buf2.contents()[0].tobytes()


# 10 -------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_10_ablation_harness(tmp_path):
    with criterion("10", "ablation methods run and tabulate; full method passes 7a") as d:
        methods = ["er", "er+agnostic", "er+aux", "er+tarc"]
        cfg = _desk(DESK_CLASS_IL, methods=methods, seeds=[0], train=CLASS_IL_TARC)
        written = run(cfg, tmp_path / "ablation")
        paths = [written[m] for m in methods]
        table = compare(paths, str(tmp_path / "ablation" / "ablation.csv"))
        lines = table["markdown"].read_text().splitlines()
        d.update({m: f"{_aggregate(tmp_path / 'ablation', m)[0]:.3f}" for m in methods})
        assert len(lines) == 2 + len(methods)
        res = _class_il_tarc(tmp_path / "class_il")
        d["7a_gain"] = f"{res['er+tarc'][0] - res['er'][0]:+.4f}"
        assert res["er+tarc"][0] - res["er"][0] >= 0.0
