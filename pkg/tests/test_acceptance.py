"""End-to-end acceptance checks, one test per criterion.

Each test records a ``CRITERION n PASS|FAIL`` line that is printed in the terminal
summary, and asserts the criterion at its stated tolerance.
"""

import itertools
import json
import math
import time

import numpy as np
import pytest
import torch

from csifall.augment import inject_noise, scale_amplitude, simulate_nlos, time_shift
from csifall.cli import run_command
from csifall.dvg import gate_forward, init_gate, local_variance
from csifall.ingest import CsiFrame, apply_perm
from csifall.model import DvgConfig, FallDetector, ModelConfig, TemporalHead, stage_shapes
from csifall.preprocess import (
    CsiTensor, DatasetIndex, Stage, channel_destandardize, channel_standardize, instance_normalize,
    preprocess_window, reorganize, segment_stream,
)
from csifall.stream import AlertState, LiveRunner, RingBuffer, SmootherConfig, live_preprocess, update_alert
from csifall.synth import EventKind, SynthSpec, generate_dataset, generate_event, make_environment
from csifall.training import TrainConfig, focal_loss, focal_loss_logits, run_loeo

DESK_TRAIN = dict(epochs=10, batch_size=8)


def record(log, n, ok, detail, elapsed=None):
    status = "PASS" if ok else "FAIL"
    timing = f" [{elapsed:.1f} s]" if elapsed is not None else ""
    line = f"CRITERION {n} {status}: {detail}{timing}"
    log.append(line)
    print(line)
    assert ok, line


def naive_variance(x, window=15, eps=1e-6):
    x = np.asarray(x, dtype=np.float64)
    c, t, s = x.shape
    half = window // 2
    idx = np.clip(np.arange(t)[:, None] + np.arange(-half, half + 1)[None, :], 0, t - 1)
    out = np.empty_like(x)
    for ci in range(c):
        for si in range(s):
            col = x[ci, :, si]
            for ti in range(t):
                w = col[idx[ti]]
                out[ci, ti, si] = np.sum((w - np.sum(w) / window) ** 2) / window + eps
    return out


def test_criterion_01_static_gate(acceptance_log):
    t0 = time.perf_counter()
    raw = np.broadcast_to(np.random.default_rng(0).uniform(0, 1, (3, 1, 30)), (3, 625, 30)).astype(np.float32)
    x = channel_standardize(CsiTensor(raw, Stage.instance_normalized)).data
    _, mask = gate_forward(x, init_gate(100.0))
    target = 1 / (1 + math.exp(3.0))
    err = float(np.abs(mask - target).max())
    elapsed = time.perf_counter() - t0
    record(acceptance_log, 1, err <= 1e-3 and elapsed < 1.0, f"max |mask - sigma(-3)| = {err:.2e}", elapsed)


def test_criterion_02_variance_oracle(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for i in range(20):
        shape = (3, 31, 5) if i % 2 == 0 else (3, 625, 30)
        x = rng.normal(size=shape).astype(np.float32) * rng.uniform(0.1, 3)
        v = local_variance(torch.from_numpy(x)).numpy()
        worst = max(worst, float(np.abs(v - naive_variance(x)).max()))
    elapsed = time.perf_counter() - t0
    record(acceptance_log, 2, worst <= 1e-5 and elapsed < 30, f"max elementwise error {worst:.2e} over 20 tensors",
           elapsed)


BACKBONE_STAGES = [(32, 313, 15), (16, 313, 15), (24, 157, 8), (40, 79, 4), (80, 40, 2), (112, 40, 2),
           (192, 20, 1), (320, 20, 1), (1280, 20, 1)]


def test_criterion_03_shape_ledger(acceptance_log):
    t0 = time.perf_counter()
    torch.manual_seed(0)
    model = FallDetector(ModelConfig()).eval()
    x = torch.randn(1, 3, 625, 30)
    shapes = stage_shapes(model.backbone, x)
    with torch.no_grad():
        f = model.backbone(x)
        seq = model.head.embed(model.cbam(f)[0])
        logits = model(x)
    ok = shapes == BACKBONE_STAGES and tuple(seq.shape) == (1, 20, 512) and tuple(logits.shape) == (1, 2)
    elapsed = time.perf_counter() - t0
    record(acceptance_log, 3, ok and elapsed < 60, f"stages {shapes[-1]} ... sequence {tuple(seq.shape)}", elapsed)


def _fd(loss_fn, p, i, eps=1e-6):
    flat = p.data.view(-1)
    old = flat[i].item()
    flat[i] = old + eps
    hi = loss_fn().item()
    flat[i] = old - eps
    lo = loss_fn().item()
    flat[i] = old
    return (hi - lo) / (2 * eps)


def test_criterion_04_gradients(acceptance_log):
    t0 = time.perf_counter()
    # Train-mode batch norm and real windows keep every parameter group well above
    # finite-difference roundoff; at init in eval mode the upstream gradients are ~1e-12.
    spec = SynthSpec()
    env = make_environment(spec.environments[0], spec)
    windows = [channel_standardize(preprocess_window(generate_event(k, env, np.random.default_rng(4), spec)[0])).data
               for k in (EventKind.fall_front, EventKind.still)]
    torch.manual_seed(4)
    cfg = ModelConfig(backbone="tiny_cnn", dropout=0.0, encoder_dropout=0.0, dvg=DvgConfig(learnable_alpha=True))
    model = FallDetector(cfg).double().train()
    x = torch.from_numpy(np.stack(windows)).double()
    y = torch.tensor([1, 0])

    def loss():
        return focal_loss_logits(model(x), y)

    model.zero_grad()
    loss().backward()
    plan = [(model.gate.kernel, 10), (model.gate.bias, 1), (model.gate.alpha, 1),
            (model.cbam.channel.mlp[0].weight, 10), (model.cbam.channel.mlp[2].weight, 8),
            (model.head.layers[0].attn.in_proj_weight, 10), (model.head.classifier[0].weight, 10)]
    rng = np.random.default_rng(0)
    errors = []
    with torch.no_grad():
        for p, k in plan:
            for i in rng.choice(p.numel(), size=k, replace=False):
                a = p.grad.view(-1)[int(i)].item()
                n = _fd(loss, p, int(i))
                errors.append(abs(a - n) / max(abs(a), abs(n), 1e-10))
    frac = float(np.mean(np.array(errors) <= 1e-2))
    elapsed = time.perf_counter() - t0
    record(acceptance_log, 4, len(errors) == 50 and frac >= 0.95 and elapsed < 300,
           f"{frac:.0%} of 50 coordinates within 1e-2 relative error", elapsed)


def test_criterion_05_focal_analytics(acceptance_log):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        p = rng.dirichlet([1.0, 1.0])
        label = int(rng.integers(2))
        worst = max(worst, abs(focal_loss(p, label, gamma=0.0, alpha=1.0) - (-math.log(p[label]))))
    example = focal_loss((0.5, 0.5), "fall", gamma=2.0, alpha=3.0)
    ok = worst <= 1e-9 and abs(example - 0.519860) <= 1e-6
    record(acceptance_log, 5, ok, f"CE gap {worst:.1e}; fall example {example:.6f}")


def test_criterion_06_permutation_contract(acceptance_log):
    t0 = time.perf_counter()
    torch.manual_seed(6)
    head = TemporalHead(1280, ModelConfig(positional_encoding=False)).eval()
    head_pe = TemporalHead(1280, ModelConfig(positional_encoding=True)).eval()
    head_pe.load_state_dict(head.state_dict())
    e = torch.randn(2, 20, 512)
    gen = torch.Generator().manual_seed(6)
    invariant_gap, pe_gap = 0.0, 0.0
    with torch.no_grad():
        base = torch.softmax(head.forward_sequence(e), -1)
        base_pe = torch.softmax(head_pe.forward_sequence(e), -1)
        for _ in range(10):
            perm = torch.randperm(20, generator=gen)
            invariant_gap = max(invariant_gap, (torch.softmax(head.forward_sequence(e[:, perm]), -1) - base)
                                .abs().max().item())
            pe_gap = max(pe_gap, (torch.softmax(head_pe.forward_sequence(e[:, perm]), -1) - base_pe)
                         .abs().max().item())
    elapsed = time.perf_counter() - t0
    record(acceptance_log, 6, invariant_gap <= 1e-5 and pe_gap > 1e-4 and elapsed < 60,
           f"no-PE change {invariant_gap:.1e}, PE change {pe_gap:.1e}", elapsed)


def test_criterion_07_preprocessing(acceptance_log):
    rng = np.random.default_rng(7)
    in_range = True
    for _ in range(50):
        x = (rng.normal(size=(3, 625, 30)) * rng.uniform(1e-3, 1e3) + rng.normal() * 100).astype(np.float32)
        out = instance_normalize(CsiTensor(x)).data
        in_range &= bool(out.min() >= 0.0 and out.max() < 1.0)
    zeros = bool(np.all(instance_normalize(CsiTensor(np.full((3, 625, 30), 7.5, np.float32))).data == 0))
    u = CsiTensor(rng.uniform(0, 1, (3, 625, 30)).astype(np.float32), Stage.instance_normalized)
    rt = float(np.abs(channel_destandardize(channel_standardize(u)).data - u.data).max())
    m = rng.normal(size=(625, 90)).astype(np.float32)
    multiset = bool(np.array_equal(np.sort(reorganize(m).data.ravel()), np.sort(m.ravel())))
    record(acceptance_log, 7, in_range and zeros and rt < 1e-6 and multiset,
           f"range ok={in_range}, constant->0 ok={zeros}, round-trip {rt:.1e}, multiset ok={multiset}")


def test_criterion_08_augmentation(acceptance_log):
    rng = np.random.default_rng(8)
    t = CsiTensor(rng.uniform(0, 1, (3, 625, 30)).astype(np.float32), Stage.instance_normalized)
    shift_ok = all(np.array_equal(time_shift(time_shift(t, d), -d).data, t.data) for d in range(-50, 51))
    scaled, lam = scale_amplitude(t, np.random.default_rng(1))
    scale_ok = all(np.array_equal(scaled.data[c], (t.data[c] * np.float32(lam[c])).astype(np.float32))
                   for c in range(3))
    def top_half(arr):
        spec = np.abs(np.fft.rfft(arr.astype(np.float64), axis=1)) ** 2
        return spec[:, spec.shape[1] // 2:].sum()

    before = after = 0.0
    for _ in range(100):
        x = CsiTensor(rng.normal(size=(3, 625, 30)).astype(np.float32), Stage.instance_normalized)
        before += top_half(x.data)
        after += top_half(simulate_nlos(x).data)
    reduction = 1 - after / before
    diff = inject_noise(t, 0.02, np.random.default_rng(3)).data.astype(np.float64) - t.data
    std_ratio = diff.std() / 0.02
    ok = shift_ok and scale_ok and reduction >= 0.5 and abs(std_ratio - 1) <= 0.05
    record(acceptance_log, 8, ok, f"shift ok={shift_ok}, scale ok={scale_ok}, NLoS top-band reduction "
           f"{reduction:.0%}, noise std ratio {std_ratio:.3f}")


def test_criterion_09_streaming(acceptance_log):
    rng = np.random.default_rng(9)
    frames = [CsiFrame(i * 1000, tuple(int(v) for v in rng.permutation(3)), rng.uniform(5, 15, (3, 30)))
              for i in range(10000)]
    buf = RingBuffer(5000, 500)
    emitted, windows = [], []
    for i, f in enumerate(frames):
        w = buf.push(apply_perm(f))
        if w is not None:
            emitted.append(i + 1)
            windows.append(w)
    positions_ok = emitted == [5000 + 500 * k for k in range(11)]
    cfg = SmootherConfig()
    offline = [channel_standardize(preprocess_window(w, lowpass=True, causal=True))
               for w in segment_stream(frames, 5000, 500)]
    identical = len(offline) == len(windows) and all(
        np.array_equal(live_preprocess(w, cfg).data, o.data) for w, o in zip(windows, offline))
    torch.manual_seed(0)
    records = list(LiveRunner(FallDetector(ModelConfig(backbone="tiny_cnn", tiny_channels=8, d_model=16,
                                                       n_heads=2))).run(frames))
    record(acceptance_log, 9, positions_ok and identical and len(records) == 11,
           f"{len(records)} windows at frames {emitted[0]}..{emitted[-1]} step 500, live==offline {identical}")


def _contract_trace(flags, h):
    states, run = [], 0
    for f in flags:
        run = run + 1 if f else 0
        states.append("Normal" if run == 0 else ("Alert" if run >= h else "Wait"))
    return states


def test_criterion_10_alert_machine(acceptance_log):
    checked, bad = 0, []
    for h in (1, 2, 3):
        cfg = SmootherConfig(history_size=h)
        for n in range(1, 7):
            for flags in itertools.product((False, True), repeat=n):
                state, got = AlertState(), []
                for f in flags:
                    state = update_alert(state, 0.9 if f else 0.1, cfg)
                    got.append(state.state.value)
                checked += 1
                if got != _contract_trace(flags, h):
                    bad.append((h, flags))
    state, example = AlertState(), []
    for p in (0.6, 0.7, 0.8):
        state = update_alert(state, p, SmootherConfig(history_size=3))
        example.append(state.state.value)
    ok = not bad and example == ["Wait", "Wait", "Alert"]
    record(acceptance_log, 10, ok, f"{checked} traces, {len(bad)} mismatches; H=3 example {example}")


# --- synthetic end-to-end -------------------------------------------------------

def _loeo(tmp, seed, background_scale, dvg, run_name):
    data = tmp / f"data_bg{background_scale}_s{seed}"
    index_path = data / "index.json"
    if index_path.exists():
        index = DatasetIndex.read(index_path)
    else:
        index = generate_dataset(SynthSpec.balanced(4, 40, 40, nlos=(3,), seed=seed,
                                                    background_scale=background_scale), data)
    model_cfg = ModelConfig(backbone="tiny_cnn", dvg=DvgConfig(enabled=dvg))
    return run_loeo(index, TrainConfig(seed=seed, **DESK_TRAIN), model_cfg, tmp / run_name), index


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    report, index = _loeo(tmp, 0, 1.0, True, "loeo")
    return tmp, report, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_11_synthetic_loeo(acceptance_log, desk_run):
    _, report, elapsed = desk_run
    mean_acc = report["aggregate"]["mean_accuracy"]
    nlos = [f for f in report["folds"] if f["nlos"]]
    recall = nlos[0]["metrics"]["recall"]
    per_fold = ", ".join(f"{f['environment_id']}={f['metrics']['accuracy']:.3f}" for f in report["folds"])
    ok = mean_acc >= 0.90 and recall is not None and recall >= 0.90 and elapsed <= 15 * 60
    record(acceptance_log, 11, ok, f"mean held-out accuracy {mean_acc:.3f} ({per_fold}); NLoS fall recall {recall}",
           elapsed)


@pytest.mark.slow
def test_criterion_12_dvg_ablation(acceptance_log, tmp_path_factory):
    tmp = tmp_path_factory.mktemp("ablation")
    t0 = time.perf_counter()
    gains = []
    for seed in (0, 1, 2):
        on, _ = _loeo(tmp, seed, 5.0, True, f"on_{seed}")
        off, _ = _loeo(tmp, seed, 5.0, False, f"off_{seed}")
        gains.append(on["aggregate"]["mean_accuracy"] - off["aggregate"]["mean_accuracy"])
        print(f"seed {seed}: DVG on {on['aggregate']['mean_accuracy']:.4f} "
              f"off {off['aggregate']['mean_accuracy']:.4f}")
    elapsed = time.perf_counter() - t0
    gain = float(np.mean(gains))
    record(acceptance_log, 12, gain >= 0.03 and elapsed <= 45 * 60,
           f"mean DVG gain {100 * gain:+.2f} pp (per seed {', '.join(f'{100 * g:+.2f}' for g in gains)})", elapsed)


@pytest.mark.slow
def test_criterion_13_stream_demo(acceptance_log, desk_run, capsys):
    tmp, _, _ = desk_run
    t0 = time.perf_counter()
    # fold checkpoint that never saw environment A, replayed on recordings from A
    ckpt = tmp / "loeo" / "checkpoint_A.ckpt"
    results = {}
    for kind in ("fall_front", "still"):
        replay = tmp / f"{kind}.csir"
        assert run_command(["synth", "--recording", kind, "--env", "A", "--duration", "12", "--onset", "6",
                            "--out", str(replay), "--run-dir", str(tmp / f"synth_{kind}")]) == 0
        burst = json.loads(capsys.readouterr().out)["burst_s"]
        assert run_command(["stream", "--checkpoint", str(ckpt), "--replay", str(replay),
                            "--run-dir", str(tmp / f"stream_{kind}")]) == 0
        records = [json.loads(x) for x in capsys.readouterr().out.strip().splitlines()]
        alerts = [r for r in records if r["state"] == "Alert"]
        overlapping = [r for r in alerts if burst and r["t_end_us"] / 1e6 - 5.0 < burst[1]
                       and r["t_end_us"] / 1e6 >= burst[0]]
        results[kind] = (len(records), len(alerts), len(overlapping), [round(r["p_fall"], 2) for r in records])
    elapsed = time.perf_counter() - t0
    ok = results["fall_front"][2] >= 1 and results["still"][1] == 0 and elapsed < 120
    record(acceptance_log, 13, ok, f"fall: {results['fall_front'][1]} alerts ({results['fall_front'][2]} overlapping "
           f"burst) p={results['fall_front'][3]}; still: {results['still'][1]} alerts", elapsed)
