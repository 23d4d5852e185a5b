"""Acceptance gate: one test per criterion, printed as PASS lines.

The ablation, weighting, and memory-size experiments share one set of
training runs through a session fixture. Setting
``DRIVERINTENT_ACCEPT_CACHE=1`` caches those runs on disk between local
iterations; by default everything is computed fresh.
"""

import hashlib
import json
import math
import os
import pickle
import time
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np
import pytest

import driverintent.kernel as K
from driverintent.checkpoint import load_checkpoint, save_checkpoint
from driverintent.cli import main as cli_main
from driverintent.embed import MultiViewFrame, PatchConfig, ViewGeometry, patchify
from driverintent.episodes import GenConfig, generate_dataset
from driverintent.losses import cc_loss, cross_entropy, joint_loss, step_weights
from driverintent.metrics import anticipation_time, macro_f1
from driverintent.model import IntentModel, desk_model_config
from driverintent.rules import (
    CLASS_NAMES,
    all_contexts,
    empty_ruleset,
    load_default_rules,
    matches,
)
from driverintent.runtime import InferenceSession
from driverintent.train import (
    TrainConfig,
    evaluate,
    model_config_for,
    train_model,
)

from conftest import make_frames, record_acceptance

RULES = load_default_rules()
TRAIN_N, TEST_N = 500, 100
EPOCHS = 30
SEEDS = (0, 1, 2)
DATA_SEED_TRAIN, DATA_SEED_TEST = 100, 999

VARIANTS = {
    "full": dict(n_mem=4, cc=True, weighting="exponential"),
    "em_only": dict(n_mem=4, cc=False, weighting="exponential"),
    "cc_only": dict(n_mem=0, cc=True, weighting="exponential"),
    "neither": dict(n_mem=0, cc=False, weighting="exponential"),
    "uniform": dict(n_mem=4, cc=True, weighting="uniform"),
    "k2": dict(n_mem=2, cc=True, weighting="exponential"),
    "k8": dict(n_mem=8, cc=True, weighting="exponential"),
}
ABLATION_TAGS = ("full", "em_only", "cc_only", "neither")  # the timed budget
RUN_PLAN = [(tag, seed) for tag in
            ("full", "em_only", "cc_only", "neither", "uniform")
            for seed in SEEDS] + [("k2", 0), ("k8", 0)]

_CACHE_SALT = "accept-v1"


def _passline(n, name):
    line = f"ACCEPTANCE {n} ({name}): PASS"
    print(line)
    record_acceptance(line)


@dataclass
class RunResult:
    tag: str
    seed: int
    accuracy: float
    f1: float
    contra_final: float
    contra_stepwise: float
    anticipation_mean: float
    anticipation_undefined: int
    seconds: float
    history_tail: float = 0.0


@dataclass
class Experiments:
    gen: GenConfig
    runs: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)
    train_eps: list = field(default_factory=list)
    test_eps: list = field(default_factory=list)


def _train_config(tag: str, seed: int) -> TrainConfig:
    spec = VARIANTS[tag]
    return TrainConfig(epochs=EPOCHS, seed=seed, n_mem=spec["n_mem"],
                       time_weighting=spec["weighting"])


def _cache_path(tag: str, seed: int) -> Path:
    key = json.dumps([_CACHE_SALT, tag, seed, TRAIN_N, TEST_N, EPOCHS,
                      DATA_SEED_TRAIN, DATA_SEED_TEST], sort_keys=True)
    digest = hashlib.sha1(key.encode()).hexdigest()[:16]
    root = Path("/tmp/driverintent_accept_cache")
    root.mkdir(exist_ok=True)
    return root / f"{tag}_{seed}_{digest}.pkl"


def _execute_run(tag, seed, gen, train_eps, test_eps):
    cfg = _train_config(tag, seed)
    spec = VARIANTS[tag]
    ruleset = RULES if spec["cc"] else empty_ruleset()
    model = IntentModel.create(
        model_config_for(cfg, gen.views, gen.class_names), seed=seed
    )
    start = time.perf_counter()
    history = train_model(model, train_eps, cfg, ruleset)
    seconds = time.perf_counter() - start
    res = evaluate(model, test_eps, cfg.t_steps)
    anticipations = []
    undefined = 0
    for steps, label in zip(res.step_preds, res.labels):
        a = anticipation_time(steps, label, cfg.t_steps)
        if a is None:
            undefined += 1
        else:
            anticipations.append(a)
    result = RunResult(
        tag=tag,
        seed=seed,
        accuracy=float(np.mean([p == y for p, y in
                                zip(res.final_preds, res.labels)])),
        f1=macro_f1(res.final_preds, res.labels, 5),
        contra_final=res.metrics(RULES, 5).contradiction_rate,
        contra_stepwise=res.stepwise_contradiction_rate(RULES),
        anticipation_mean=float(np.mean(anticipations)) if anticipations else 0.0,
        anticipation_undefined=undefined,
        seconds=seconds,
        history_tail=history[-1].joint,
    )
    return result, model


@pytest.fixture(scope="session")
def experiments():
    gen = GenConfig()
    exp = Experiments(gen=gen)
    exp.train_eps = generate_dataset(TRAIN_N, gen, RULES,
                                     base_seed=DATA_SEED_TRAIN)
    exp.test_eps = generate_dataset(TEST_N, gen, RULES,
                                    base_seed=DATA_SEED_TEST)
    use_cache = os.environ.get("DRIVERINTENT_ACCEPT_CACHE") == "1"
    kept_models = {("full", 0), ("neither", 0)}
    for tag, seed in RUN_PLAN:
        cache = _cache_path(tag, seed)
        keep_model = (tag, seed) in kept_models
        model = None
        if use_cache and cache.exists():
            result, weights = pickle.loads(cache.read_bytes())
            if keep_model and weights is not None:
                cfg = _train_config(tag, seed)
                model = IntentModel.create(
                    model_config_for(cfg, gen.views, gen.class_names), seed=seed
                )
                for name, values in weights.items():
                    model.params[name].values = values
        else:
            result, model = _execute_run(tag, seed, gen, exp.train_eps,
                                         exp.test_eps)
            if use_cache:
                weights = ({n: p.values for n, p in model.params.items()}
                           if keep_model else None)
                cache.write_bytes(pickle.dumps((result, weights)))
        exp.runs[(tag, seed)] = result
        if keep_model:
            if model is None:
                result, model = _execute_run(tag, seed, gen, exp.train_eps,
                                             exp.test_eps)
            exp.models[f"{tag}_{seed}"] = model
        print(f"[run] {tag} seed={seed}: acc={result.accuracy:.3f} "
              f"f1={result.f1:.3f} contra={result.contra_stepwise:.3f} "
              f"antic={result.anticipation_mean:.2f} ({result.seconds:.0f}s)",
              flush=True)
    return exp


def _means(exp, tag, attr):
    return float(np.mean([getattr(exp.runs[(tag, s)], attr) for s in SEEDS]))


# ----------------------------------------------------------- criterion 1


def test_criterion_1_gradient_oracle():
    """End-to-end finite differences on the tiny config, under 60 s."""
    config = desk_model_config(n_mem=2, n_layers=1, dim=16, n_heads=2,
                               patch_size=8, n_views=1, side=16)
    model = IntentModel.create(config, seed=0)
    gen = GenConfig(n_frames=3, height=16, width=16, n_views=1)
    episode = generate_dataset(1, gen, RULES, base_seed=5)[0]
    frames = episode.frames
    label, context = episode.label, episode.context

    def run(tape=None):
        ps, _ = model.roll(tape, frames)
        per_step = [
            (cross_entropy(tape, p, label), cc_loss(tape, p, context, RULES))
            for p in ps
        ]
        return joint_loss(tape, per_step).total_tensor

    start = time.perf_counter()
    tape = K.Tape()
    K.backward(run(tape), tape)
    assert model.params["memory.init"].grad is not None
    report = K.finite_diff_grad_check(
        lambda: run().item(), model.parameters(), h=1e-5, tol=1e-4
    )
    elapsed = time.perf_counter() - start
    assert report.passed, f"max rel err {report.max_rel_err:.3e}"
    assert report.max_rel_err < 1e-4
    assert elapsed < 60.0, f"gradient oracle took {elapsed:.1f}s"
    _passline(1, f"gradient oracle, max rel err {report.max_rel_err:.2e} "
                 f"in {elapsed:.1f}s")


# ----------------------------------------------------------- criterion 2


def test_criterion_2_causality_suite(experiments):
    """Later-frame perturbations never move earlier outputs (bitwise)."""
    model = experiments.models["full_0"]
    t_steps = 5
    rng = np.random.default_rng(7)
    episodes = generate_dataset(20, experiments.gen, RULES, base_seed=777)
    for ep in episodes:
        frames = [ep.frames[i] for i in (1, 3, 5, 7, 9)]
        _, base = model.roll(None, frames)
        for t_perturb in range(1, t_steps):
            tampered = list(frames)
            donor = episodes[int(rng.integers(len(episodes)))]
            tampered[t_perturb] = donor.frames[int(rng.integers(10))]
            _, out = model.roll(None, tampered)
            for t in range(t_perturb):
                assert np.array_equal(base[t].probs, out[t].probs), (
                    f"episode {ep.episode_id}: perturbing step {t_perturb + 1} "
                    f"changed step {t + 1}"
                )
    # K=0: each step depends on its own frame only.
    memless = experiments.models["neither_0"]
    for ep in episodes[:5]:
        frames = [ep.frames[i] for i in (1, 3, 5, 7, 9)]
        _, base = memless.roll(None, frames)
        for t in range(t_steps):
            donor = episodes[int(rng.integers(len(episodes)))]
            tampered = [donor.frames[i] for i in (0, 2, 4, 6, 8)]
            tampered[t] = frames[t]
            _, out = memless.roll(None, tampered)
            assert np.array_equal(base[t].probs, out[t].probs)
    _passline(2, "causality: 20 episodes, all prefixes bitwise stable")


# ----------------------------------------------------------- criterion 3


def test_criterion_3_loss_correctness():
    """cc matches brute force everywhere; weights analytic; CE reduction."""
    # all 8 contexts x 5 focus classes x the 6-rule set, exact equality
    for context in all_contexts(3):
        for focus in range(5):
            p_vals = np.full(5, 0.08)
            p_vals[focus] = 0.68
            p = K.Tensor(p_vals.reshape(1, 5))
            expected = 0.0
            for rule in RULES.rules:
                if matches(rule.pattern, context):
                    expected -= math.log(1.0 - p_vals[rule.class_index])
            assert cc_loss(None, p, context, RULES).item() == pytest.approx(
                expected, rel=1e-14, abs=1e-15
            )
    for n_steps in (1, 3, 5, 8):
        weights = step_weights(n_steps)
        assert weights == [math.exp(-(n_steps - t))
                           for t in range(1, n_steps + 1)]
        assert weights[-1] == 1.0
    # empty ruleset: joint reduces to the weighted cross-entropy, bitwise
    rng = np.random.default_rng(3)
    for _ in range(25):
        logits = rng.normal(size=5) * 3
        p_vals = np.exp(logits - logits.max())
        p_vals /= p_vals.sum()
        p = K.Tensor(p_vals.reshape(1, 5))
        label = int(rng.integers(5))
        context = tuple(int(b) for b in rng.integers(0, 2, size=3))
        per_step = [
            (cross_entropy(None, p, label),
             cc_loss(None, p, context, empty_ruleset()))
            for _ in range(4)
        ]
        total = joint_loss(None, per_step).total
        ce_val = cross_entropy(None, p, label).item()
        expected = 0.0
        for w in step_weights(4):
            expected += w * (ce_val + 0.0)
        assert total == expected
    _passline(3, "loss correctness: brute-force cc, analytic weights, "
                 "bitwise CE reduction")


# ----------------------------------------------------------- criterion 4


def test_criterion_4_ruleset_fidelity():
    assert len(RULES) == 6
    expected_sets = {
        ("left_lane_change", "1**"),
        ("right_lane_change", "*1*"),
        ("left_turn", "01*"),
        ("right_turn", "10*"),
        ("left_turn", "**0"),
        ("right_turn", "**0"),
    }
    assert {(r.maneuver, r.pattern) for r in RULES.rules} == expected_sets
    # left_turn is contradicted exactly on {(0,1,.)} union {(.,.,0)}
    lt = CLASS_NAMES.index("left_turn")
    expected = {c for c in product((0, 1), repeat=3)
                if (c[0] == 0 and c[1] == 1) or c[2] == 0}
    got = {c for c in all_contexts(3) if RULES.contradicts(lt, c)}
    assert got == expected
    # every rule's matched set equals brute-force enumeration
    for rule in RULES.rules:
        brute = {c for c in all_contexts(3)
                 if all(s == "*" or s == str(b)
                        for s, b in zip(rule.pattern, c))}
        got = {c for c in all_contexts(3) if matches(rule.pattern, c)}
        assert got == brute
    _passline(4, "ruleset fidelity: 6 rules, matched sets by enumeration")


# ----------------------------------------------------------- criterion 5


def test_criterion_5_ablation_ordering(experiments):
    full = _means(experiments, "full", "f1")
    em = _means(experiments, "em_only", "f1")
    cc = _means(experiments, "cc_only", "f1")
    neither = _means(experiments, "neither", "f1")
    budget = sum(experiments.runs[(tag, s)].seconds
                 for tag in ABLATION_TAGS for s in SEEDS)
    print(f"[ablation] full={full:.4f} em_only={em:.4f} cc_only={cc:.4f} "
          f"neither={neither:.4f} budget={budget:.0f}s")
    assert full > em, (full, em)
    assert full > cc, (full, cc)
    assert cc > neither, (cc, neither)
    assert full - neither >= 0.05, (full, neither)
    assert _means(experiments, "full", "accuracy") >= 0.90
    assert budget <= 1800.0, f"ablation budget {budget:.0f}s > 30 min"
    _passline(5, f"ablation ordering: F1 {full:.3f} > {em:.3f}, > {cc:.3f} "
                 f"> {neither:.3f}; budget {budget:.0f}s")


# ----------------------------------------------------------- criterion 6


def test_criterion_6_cc_behavioral_effect(experiments):
    with_cc = [experiments.runs[("full", s)].contra_stepwise for s in SEEDS]
    without = [experiments.runs[("em_only", s)].contra_stepwise for s in SEEDS]
    assert float(np.mean(with_cc)) <= float(np.mean(without)), (with_cc, without)
    strict = sum(1 for a, b in zip(with_cc, without) if a < b)
    assert strict >= 2, f"strict on only {strict} of 3 seeds: {with_cc} vs {without}"
    _passline(6, f"context-consistency lowers contradiction rate "
                 f"({np.mean(with_cc):.3f} vs {np.mean(without):.3f}, "
                 f"strict on {strict}/3 seeds)")


# ----------------------------------------------------------- criterion 7


def test_criterion_7_memory_size_sweep(experiments):
    rows = [
        ("0", _means(experiments, "cc_only", "accuracy"),
         _means(experiments, "cc_only", "f1")),
        ("2", experiments.runs[("k2", 0)].accuracy,
         experiments.runs[("k2", 0)].f1),
        ("4", _means(experiments, "full", "accuracy"),
         _means(experiments, "full", "f1")),
        ("8", experiments.runs[("k8", 0)].accuracy,
         experiments.runs[("k8", 0)].f1),
    ]
    print("memory tokens | accuracy | macro-F1")
    for k, acc, f1 in rows:
        print(f"{k:>13} | {acc:.4f}   | {f1:.4f}")
    gap = _means(experiments, "full", "f1") - _means(experiments, "cc_only", "f1")
    assert gap >= 0.05, f"K=4 beats K=0 by only {gap:.4f} F1"
    _passline(7, f"memory-size sweep emitted; K=0 trails K=4 by {gap:.3f} F1")


# ----------------------------------------------------------- criterion 8


def test_criterion_8_geometry_checks():
    full_patch = PatchConfig(16)
    geom = ViewGeometry(3, 224, 224)
    assert full_patch.n_patches(geom) == 196
    img = np.zeros((3, 224, 224))
    assert patchify(img, full_patch).shape[0] == 196
    assert 2 * full_patch.n_patches(geom) == 392

    one = desk_model_config(n_views=1)
    two = desk_model_config(n_views=2)
    m1 = IntentModel.create(one, seed=0)
    m2 = IntentModel.create(two, seed=0)
    delta = m2.param_count() - m1.param_count()
    embedder = m2.embedders[1]
    assert delta == embedder.param_count()
    assert delta == embedder.proj.size + embedder.pos.size
    _passline(8, f"geometry: 196/392 patches; second view adds exactly "
                 f"{delta} parameters")


# ----------------------------------------------------------- criterion 9


def test_criterion_9_streaming_equivalence(experiments, tmp_path):
    model_seeds = (11, 22, 33, 44, 55, 66, 77, 88, 99)
    checkpoints = [experiments.models["full_0"]]
    for s in model_seeds:
        checkpoints.append(IntentModel.create(desk_model_config(), seed=s))
    # round-trip one through the container to cover stored checkpoints too
    path = tmp_path / "stream.ckpt"
    save_checkpoint(checkpoints[1], path)
    checkpoints[1] = load_checkpoint(path)
    episodes = generate_dataset(5, experiments.gen, RULES, base_seed=4242)
    pairs = 0
    for model in checkpoints:
        for ep in episodes:
            frames = [ep.frames[i] for i in (1, 3, 5, 7, 9)]
            _, offline = model.roll(None, frames)
            session = InferenceSession(model)
            for t, frame in enumerate(frames):
                probs, label = session.feed(frame)
                assert np.array_equal(probs, offline[t].probs)
                assert label == offline[t].label
            pairs += 1
    assert pairs == 50
    _passline(9, "streaming equals offline bitwise on 50 pairs")


# ----------------------------------------------------------- criterion 10


def test_criterion_10_early_anticipation(experiments):
    exp_mean = _means(experiments, "full", "anticipation_mean")
    uni_mean = _means(experiments, "uniform", "anticipation_mean")
    assert exp_mean >= uni_mean, (exp_mean, uni_mean)
    _passline(10, f"late-weighted training anticipates at {exp_mean:.2f} "
                  f">= uniform {uni_mean:.2f} steps before the end")


# ----------------------------------------------------------- criterion 11


def test_criterion_11_full_run_determinism(tmp_path):
    data_dir = tmp_path / "data"
    assert cli_main(["gen", "--n", "40", "--t", "10", "--seed", "9",
                     "--out", str(data_dir)]) == 0
    cfg = {"epochs": 3, "seed": 5}
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    outputs = []
    for run_dir in ("runA", "runB"):
        out = tmp_path / run_dir
        assert cli_main(["train", "--data", str(data_dir), "--config",
                         str(cfg_path), "--out", str(out)]) == 0
        outputs.append(out)
    ckpt_a = (outputs[0] / "model.ckpt").read_bytes()
    ckpt_b = (outputs[1] / "model.ckpt").read_bytes()
    assert ckpt_a == ckpt_b, "checkpoints differ between identical runs"
    report_a = (outputs[0] / "report.txt").read_text()
    report_b = (outputs[1] / "report.txt").read_text()
    assert report_a == report_b
    log_a = (outputs[0] / "train.log").read_text()
    log_b = (outputs[1] / "train.log").read_text()
    assert log_a == log_b
    _passline(11, "same-seed training runs are bitwise identical")
