"""Acceptance suite: one test per criterion, each reporting a single PASS/FAIL line.

The summary lines are printed at the end of the pytest run (see conftest).
"""
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from hollowconv import io as lio
from hollowconv.blocks import temporal_conv
from hollowconv.configs import ConvLSTMSpec, TemporalConvSpec
from hollowconv.experiment import load_config
from hollowconv.gradcheck import check_gradients
from hollowconv.losses import ClassWeights, combined_loss, dice_loss
from hollowconv.networks import BiConvLSTM
from hollowconv.ops import ConvSpec, conv2d
from hollowconv.synth import HollowObjectParams, gen_hollow_object, kernel_scale_study
from hollowconv.tensor import Tensor, precision
from hollowconv.train import evaluate, load_dataset, train
from conftest import SMALL
from oracles import (
    GRADIENT_CASES, GRADIENT_SAMPLING, conv2d_loops, random_conv2d_case, random_temporal_case,
    temporal_conv_loops,
)
from test_configs import golden_mismatches
from test_losses import np_dice, np_wbce, random_instance
from test_networks import reversal_check


def test_criterion_01_gradient_oracles(criterion):
    start = time.process_time()
    worst = {}
    with precision(np.float64):
        for name, build in sorted(GRADIENT_CASES.items()):
            errs = []
            for i in range(20):
                f, inputs = build(np.random.default_rng([7, i]))
                errs.append(check_gradients(f, inputs, max_entries=GRADIENT_SAMPLING.get(name), seed=i))
            worst[name] = max(errs)
    cpu = time.process_time() - start
    name, err = max(worst.items(), key=lambda kv: kv[1])
    criterion("1", err < 1e-4 and cpu < 300,
              f"{len(worst)} op groups x 20 instances, worst rel err {err:.1e} ({name}) < 1e-4, {cpu:.0f} s CPU < 300 s")


def test_criterion_02_hollow_weights_stay_zero(small_data, criterion):
    start = time.process_time()
    stray, checked = [], 0
    for model in ("A2-1.1", "A2-2.1", "A2-2.3"):
        cfg = load_config(None, SMALL + [f"model={model}", "iterations=1000"])
        result = train(cfg, data=small_data, write=False)
        for layer, (w, mask) in result.net.hollow_weights().items():
            off = np.broadcast_to(~mask.astype(bool), w.shape)
            bits = w[off].view(np.uint32 if w.dtype == np.float32 else np.uint64)
            checked += bits.size
            if np.any(bits != 0):
                stray.append(f"{model}:{layer}")
    cpu = time.process_time() - start
    criterion("2", not stray and checked > 0 and cpu < 300,
              f"A2-1.1/2.1/2.3 after 1000 masked-Adam steps: {checked} off-mask weights, "
              f"{len(stray)} layers with nonzero bits, {cpu:.0f} s CPU < 300 s")


def test_criterion_03_convolution_oracles(criterion):
    start = time.process_time()
    rng = np.random.default_rng(3)
    conv_err = 0.0
    for _ in range(100):
        x, w, b, stride, dilation, padding = (a.astype(np.float32) if isinstance(a, np.ndarray) else a
                                              for a in random_conv2d_case(rng))
        y = conv2d(Tensor(x), Tensor(w), Tensor(b), ConvSpec(stride, dilation, padding))
        conv_err = max(conv_err, float(np.abs(y.data - conv2d_loops(x, w, b, stride, dilation, padding)).max()))
    temp_err = 0.0
    for _ in range(100):
        x, w, b = (a.astype(np.float32) for a in random_temporal_case(rng))
        y = temporal_conv(Tensor(x), Tensor(w), Tensor(b))
        temp_err = max(temp_err, float(np.abs(y.data - temporal_conv_loops(x, w, b)).max()))
    cpu = time.process_time() - start
    criterion("3", conv_err < 1e-6 and temp_err < 1e-6 and cpu < 60,
              f"float32 max |d| conv2d {conv_err:.1e}, temporal_conv {temp_err:.1e} over 100 cases each, "
              f"{cpu:.1f} s CPU < 60 s")


def test_criterion_04_layer_table(criterion):
    bad = golden_mismatches()
    criterion("4", not bad, f"10 configs x 6 layers x 5 fields, {len(bad)} mismatches {bad[:3]}")


def test_criterion_05_kernel_scale_study(criterion):
    start = time.process_time()
    obj = gen_hollow_object(HollowObjectParams(wall=5))
    study = kernel_scale_study(obj, (3, 10, 20, 40))
    best = study.best
    ratio = study.score(best) / study.score(3)
    scores = ", ".join(f"K={k}: {s:.2f}" for k, s in zip(study.kernel_sizes, study.scores))
    criterion("5", best != 3 and ratio >= 1.5,
              f"W_wall=5 ring, argmax K={best}, score ratio to K=3 {ratio:.2f} (need K != 3 and >= 1.5); "
              f"{scores}; {time.process_time() - start:.1f} s")


def test_criterion_06_loss_arithmetic(criterion):
    rng = np.random.default_rng(6)
    cw = ClassWeights()
    worst = 0.0
    with precision(np.float64):
        for _ in range(100):
            y, p = random_instance(rng)
            expected = 0.1 * np_wbce(y, p, cw.class_weights, cw.pos_weights) + 0.9 * np_dice(y, p)
            worst = max(worst, abs(combined_loss(y, Tensor(p), cw).item() - expected))
        mask = np.zeros((1, 1, 20, 20))
        mask[0, 0, 5:15, 5:15] = 1
        n = mask.sum()
        other = np.zeros_like(mask)
        other[0, 0, :, 15:] = 1
        same = dice_loss(mask, Tensor(mask)).item()
        disjoint = dice_loss(mask, Tensor(other)).item()
    limits = 0 <= same <= 1 / (2 * n + 1) and abs(disjoint - (1 - 1 / (2 * n + 1))) < 1e-15
    criterion("6", worst < 1e-6 and limits,
              f"alpha=0.1 combined loss max |d| {worst:.1e} < 1e-6 on 100 instances; "
              f"identity {same:.2e}, disjoint {disjoint:.6f} within smoothing bounds")


def test_criterion_07_lr_schedule(criterion):
    cfg = load_config(None, ["preset=full"])
    got = [cfg.lr_at(i) for i in (0, 14999, 15000, 30000)]
    criterion("7", got == [1e-3, 1e-3, 1e-4, 1e-5], f"full preset lr at 0/14999/15000/30000 = {got}")


def test_criterion_09_bilstm_and_temporal_shape(criterion):
    rng = np.random.default_rng(9)
    exact = True
    for layers in (1, 2):
        block = BiConvLSTM(ConvLSTMSpec(hidden=4, layers=layers), 6, rng)
        feats = Tensor(rng.normal(size=(12, 6, 8, 8)).astype(np.float32))
        a, b = reversal_check(block, feats)
        exact &= a.tobytes() == b.tobytes()
    shapes = set()
    x = Tensor(rng.normal(size=(1, 12, 2, 8, 8)).astype(np.float32))
    for k1 in (5, 7, 9):
        for k2 in (1, 3, 5):
            spec = TemporalConvSpec(kernel=(k1, k2, k2), c_out=3)
            w = Tensor(rng.normal(size=(3, 2, k1, k2, k2)).astype(np.float32))
            shapes.add(temporal_conv(x, w, spec=spec).shape)
    criterion("9", exact and shapes == {(1, 12, 3, 8, 8)},
              f"Bi-LSTM reversal bitwise exact: {exact}; temporal_conv output shapes over 9 kernels {sorted(shapes)}")


def test_criterion_10_determinism_and_checkpoints(small_data, tmp_path, criterion):
    csvs = []
    with threadpool_limits(1):
        for run in ("a", "b"):
            cfg = load_config(None, SMALL + ["model=A2-2.1", "iterations=4", "eval_every=2", f"out={tmp_path / run}"])
            result = train(cfg, data=small_data)
            csvs.append(b"".join((tmp_path / run / f).read_bytes() for f in ("metrics.csv", "loss.csv")))
        cfg = load_config(None, SMALL + ["model=A1-1.1-L3", "iterations=4", f"out={tmp_path / 'c'}"])
        straight = train(cfg, data=small_data)
        half = train(load_config(None, SMALL + ["model=A1-1.1-L3", "iterations=4", f"out={tmp_path / 'd'}"]),
                     data=small_data, stop_at=2)
        resumed = train(load_config(None, SMALL + ["model=A1-1.1-L3", "iterations=4", f"out={tmp_path / 'd'}"]),
                        data=small_data, resume=half.checkpoint)
    a, b = lio.load_bundle(straight.checkpoint), lio.load_bundle(resumed.checkpoint)
    bit_exact = a.keys() == b.keys() and all(a[k].tobytes() == b[k].tobytes() for k in a)
    same_csv = csvs[0] == csvs[1] and len(csvs[0]) > 0
    criterion("10", same_csv and bit_exact,
              f"single-thread reruns byte-identical CSVs: {same_csv}; checkpoint resume bit-exact: {bit_exact} "
              f"({len(a)} arrays)")


# criterion 8: the desk experiment, shared by three report lines
DESK_MODELS = ("UNet", "UNetDilated", "A1-1.1", "A2-1.1", "A2-2.1", "A2-2.2", "A2-2.3", "A2-3.1")
DESK_SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def desk_runs():
    data = load_dataset(load_config(None, []))
    start = time.process_time()
    dice = {}
    with threadpool_limits(1):
        for model in DESK_MODELS:
            for seed in DESK_SEEDS:
                cfg = load_config(None, [f"model={model}", f"seed={seed}"])
                net = train(cfg, data=data, write=False).net
                dice[model, seed] = evaluate(net, data).mean
    return dice, time.process_time() - start


@pytest.mark.slow
def test_criterion_08a_outer_wall_dice(desk_runs, criterion):
    dice, _ = desk_runs
    means = {m: float(np.mean([dice[m, s][0] for s in DESK_SEEDS])) for m in DESK_MODELS}
    low = {m: round(v, 3) for m, v in means.items() if v < 0.85}
    listing = ", ".join(f"{m} {v:.3f}" for m, v in means.items())
    criterion("8a", not low, f"outer-wall test Dice (mean of 3 seeds) >= 0.85 for all 8 configs: {listing}")


@pytest.mark.slow
def test_criterion_08b_hollow_dilated_tumor(desk_runs, criterion):
    dice, _ = desk_runs
    hollow = float(np.median([dice["A2-2.1", s][2] for s in DESK_SEEDS]))
    plain = float(np.median([dice["UNetDilated", s][2] for s in DESK_SEEDS]))
    criterion("8b", hollow >= plain,
              f"median tumor Dice A2-2.1 {hollow:.3f} >= UNetDilated {plain:.3f}")


@pytest.mark.slow
def test_criterion_08c_desk_runtime(desk_runs, criterion):
    _, cpu = desk_runs
    criterion("8c", cpu < 1800, f"desk experiment 8 configs x 3 seeds x 2000 iterations: {cpu:.0f} s CPU < 1800 s")
