"""Acceptance criteria 1-8, each at its stated tolerance and runtime budget.

Every criterion prints one PASS/FAIL line; the lines are also collected into
the terminal summary so they appear in a plain ``pytest -v`` log.
"""

import csv
import json
import math
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

import waterline.tensor as T
from waterline import cli
from waterline.detector import DetectorConfig, connect_marks, scan_frame, scan_positions
from waterline.metrics import (GroundTruth, evaluate_map, f1, fp_count, irrelevance, precision,
                               rasterize_ground_truth, recall, stability)
from waterline.netbuilder import (GanSpec, NetworkSpec, build_wldetectnet, build_wlgeneratenet,
                                  count_conv_layers, count_flops, count_params)
from waterline.synth import OracleClassifier, SceneParams, random_scene_params, synth_scene
from waterline.training import (accuracy, batch_gradient, discriminator_accuracy, energy,
                                gan_alternating_step, gan_value, toy_waterline_images)
from conftest import ACCEPTANCE_LINES
from oracles import (ReluRecorder, conv2d_loop, coverage_bf, f1_bf, fc_loop, fp_bf, gap_loop,
                     network_grad_check, precision_bf, recall_bf, scale_loop, shuffle_loop,
                     skew_bf, square_meets_boundary_bf, stability_bf)


@contextmanager
def criterion(number, title, budget=None):
    """Time the body, enforce the runtime budget and record one PASS/FAIL line."""
    notes = []
    start = time.perf_counter()
    try:
        yield notes
        elapsed = time.perf_counter() - start
        if budget is not None:
            assert elapsed < budget, f"took {elapsed:.1f}s, budget {budget}s"
    except BaseException as exc:
        elapsed = time.perf_counter() - start
        line = f"criterion {number} FAIL  {title} ({elapsed:.1f}s): {exc}".splitlines()[0]
        print(line)
        ACCEPTANCE_LINES.append(line)
        raise
    detail = "; ".join(notes)
    line = f"criterion {number} PASS  {title} ({elapsed:.1f}s){': ' + detail if detail else ''}"
    print(line)
    ACCEPTANCE_LINES.append(line)


def proj_sum(rng, shape):
    p = rng.standard_normal(shape)
    return p, lambda y: float(np.sum(p * y))


# --- 1. gradients ---------------------------------------------------------------

def tensor_op_checks(rng):
    """Yield ``(name, worst relative error)`` for every op and operand."""
    for stride, groups, padding in [(1, 1, "same"), (2, 1, "same"), (1, 2, "valid"),
                                    (1, 4, "same"), (2, 4, "valid")]:
        x = rng.standard_normal((4, 7, 6))
        w = rng.standard_normal((8, 4 // groups, 3, 3))
        b = rng.standard_normal(8)
        y = T.conv2d(x, w, b, stride, groups, padding)
        p, loss = proj_sum(rng, y.shape)
        g = T.conv2d_vjp(x, w, b, stride, groups, padding, p)
        tag = f"conv2d s{stride} g{groups} {padding}"
        yield tag + " input", T.finite_diff_check(
            lambda v: loss(T.conv2d(v, w, b, stride, groups, padding)), x, g["input"])
        yield tag + " kernel", T.finite_diff_check(
            lambda v: loss(T.conv2d(x, v, b, stride, groups, padding)), w, g["kernel"])
        yield tag + " bias", T.finite_diff_check(
            lambda v: loss(T.conv2d(x, w, v, stride, groups, padding)), b, g["bias"])
    # depthwise
    x = rng.standard_normal((6, 5, 5))
    w = rng.standard_normal((6, 1, 3, 3))
    p, loss = proj_sum(rng, (6, 5, 5))
    g = T.conv2d_vjp(x, w, None, 1, 6, "same", p)
    yield "conv2d depthwise input", T.finite_diff_check(
        lambda v: loss(T.conv2d(v, w, None, 1, 6)), x, g["input"])
    yield "conv2d depthwise kernel", T.finite_diff_check(
        lambda v: loss(T.conv2d(x, v, None, 1, 6)), w, g["kernel"])

    x = rng.standard_normal((8, 3, 3))
    p, loss = proj_sum(rng, x.shape)
    yield "channel_shuffle", T.finite_diff_check(
        lambda v: loss(T.channel_shuffle(v, 4)), x, T.channel_shuffle_vjp(4, p)["input"])
    p, loss = proj_sum(rng, (8, 1, 1))
    yield "global_avg_pool", T.finite_diff_check(
        lambda v: loss(T.global_avg_pool(v)), x, T.global_avg_pool_vjp(x.shape, p)["input"])

    v_in = rng.standard_normal(9)
    w = rng.standard_normal((5, 9))
    b = rng.standard_normal(5)
    p, loss = proj_sum(rng, 5)
    g = T.fully_connected_vjp(v_in, w, b, p)
    yield "fully_connected input", T.finite_diff_check(
        lambda v: loss(T.fully_connected(v, w, b)), v_in, g["input"])
    yield "fully_connected weight", T.finite_diff_check(
        lambda v: loss(T.fully_connected(v_in, v, b)), w, g["weight"])
    yield "fully_connected bias", T.finite_diff_check(
        lambda v: loss(T.fully_connected(v_in, w, v)), b, g["bias"])

    # keep relu operands away from the kink so central differences are valid
    x = rng.standard_normal((3, 4, 4))
    x += np.sign(x) * 0.1
    p, loss = proj_sum(rng, x.shape)
    yield "relu", T.finite_diff_check(lambda v: loss(T.relu(v)), x, T.relu_vjp(x, p)["input"])
    yield "sigmoid", T.finite_diff_check(lambda v: loss(T.sigmoid(v)), x,
                                         T.sigmoid_vjp(T.sigmoid(x), p)["input"])
    z = rng.standard_normal(6)
    p, loss = proj_sum(rng, 6)
    yield "softmax", T.finite_diff_check(lambda v: loss(T.softmax(v)), z,
                                         T.softmax_vjp(T.softmax(z), p)["input"])

    s = rng.standard_normal(3)
    p, loss = proj_sum(rng, x.shape)
    g = T.scale_channels_vjp(x, s, p)
    yield "scale_channels input", T.finite_diff_check(
        lambda v: loss(T.scale_channels(v, s)), x, g["input"])
    yield "scale_channels scales", T.finite_diff_check(
        lambda v: loss(T.scale_channels(x, v)), s, g["scales"])

    other = rng.standard_normal(x.shape)
    g = T.residual_add_vjp(p)
    yield "residual_add a", T.finite_diff_check(lambda v: loss(T.residual_add(v, other)), x,
                                                g["a"])
    yield "residual_add b", T.finite_diff_check(lambda v: loss(T.residual_add(other, v)), x,
                                                g["b"])
    p, loss = proj_sum(rng, (3, 8, 8))
    yield "upsample_nearest", T.finite_diff_check(
        lambda v: loss(T.upsample_nearest(v, 2)), x, T.upsample_nearest_vjp(2, p)["input"])


def test_criterion_1_gradients(monkeypatch):
    with criterion(1, "finite-difference gradients < 1e-4", budget=120) as notes:
        rng = np.random.default_rng(2024)
        results = list(tensor_op_checks(rng))
        worst_op = max(results, key=lambda t: t[1])
        assert worst_op[1] < 1e-4, f"{worst_op[0]}: {worst_op[1]:.3g}"
        notes.append(f"{len(results)} op operands, worst {worst_op[1]:.2e}")

        net_worst, total_checked, total_skipped = 0.0, 0, 0
        for seed in (0, 1):
            net = build_wldetectnet(NetworkSpec.desk(), seed)
            r = np.random.default_rng(seed)
            for k in net.params:
                if k.endswith(".bias"):
                    net.params[k] = 0.1 * r.standard_normal(net.params[k].shape)
            x = r.random((3, 16, 16))
            _, _, grads = batch_gradient(net, [x], [1])
            rec = ReluRecorder(monkeypatch)
            worst, checked, skipped = network_grad_check(
                net, lambda: energy([net(x)[1]], [1]), grads, rec, r)
            monkeypatch.undo()
            net_worst = max(net_worst, worst)
            total_checked += checked
            total_skipped += skipped
            assert checked >= 4 * len(net.params) * 0.9

            out, tape = net.forward_tape(x)
            proj = np.array([0.3, -0.7])
            gx, _ = net.backward(tape, proj)
            idx = r.choice(x.size, 30, replace=False)
            net_worst = max(net_worst, T.finite_diff_check(lambda v: proj @ net(v), x, gx,
                                                           indices=idx))
        assert net_worst < 1e-4, f"scaled network: {net_worst:.3g}"
        notes.append(f"scaled net {total_checked} parameter elements, worst {net_worst:.2e} "
                     f"({total_skipped} kink-straddling draws redrawn)")


# --- 2. operator oracles --------------------------------------------------------

def test_criterion_2_operator_oracles():
    with criterion(2, "operator oracles on >= 100 instances each", budget=60) as notes:
        rng = np.random.default_rng(7)
        worst = {"conv2d": 0.0, "gap": 0.0, "fc": 0.0, "scale": 0.0}
        group_kinds = set()
        for i in range(120):
            c = int(rng.choice([2, 4, 6, 8]))
            kind = ("standard", "grouped", "depthwise")[i % 3]
            groups = {"standard": 1, "grouped": 2, "depthwise": c}[kind]
            group_kinds.add(kind)
            cout = c if kind == "depthwise" else groups * int(rng.integers(1, 4))
            k = int(rng.choice([1, 3]))
            stride = int(rng.integers(1, 3))
            padding = str(rng.choice(["same", "valid"]))
            h, w = int(rng.integers(k, 8)), int(rng.integers(k, 8))
            x = rng.standard_normal((c, h, w))
            wt = rng.standard_normal((cout, c // groups, k, k))
            b = rng.standard_normal(cout)
            got = T.conv2d(x, wt, b, stride, groups, padding)
            ref = conv2d_loop(x, wt, b, stride, groups, padding)
            assert got.shape == ref.shape
            worst["conv2d"] = max(worst["conv2d"], float(np.abs(got - ref).max()))
        assert group_kinds == {"standard", "grouped", "depthwise"}

        for _ in range(120):
            groups = int(rng.choice([1, 2, 3, 4]))
            c = groups * int(rng.integers(1, 5))
            x = rng.integers(-1000, 1000, (c, 2, 3)).astype(float)
            assert np.array_equal(T.channel_shuffle(x, groups), shuffle_loop(x, groups))
            labels = np.arange(c, dtype=float)[:, None, None]
            perm = T.channel_shuffle(labels, groups).ravel().astype(int)
            assert sorted(perm) == list(range(c))

        for _ in range(120):
            x = rng.standard_normal((int(rng.integers(1, 6)), int(rng.integers(1, 6)),
                                     int(rng.integers(1, 6))))
            worst["gap"] = max(worst["gap"], float(np.abs(T.global_avg_pool(x) - gap_loop(x)).max()))
            s = rng.standard_normal(x.shape[0])
            worst["scale"] = max(worst["scale"],
                                 float(np.abs(T.scale_channels(x, s) - scale_loop(x, s)).max()))
            nin, nout = int(rng.integers(1, 12)), int(rng.integers(1, 12))
            v = rng.standard_normal(nin)
            wt = rng.standard_normal((nout, nin))
            b = rng.standard_normal(nout)
            worst["fc"] = max(worst["fc"],
                              float(np.abs(T.fully_connected(v, wt, b) - fc_loop(v, wt, b)).max()))
        for name, err in worst.items():
            assert err <= 1e-12, f"{name}: {err:.3g}"
        notes.append("120 each; shuffle exact; float max abs err "
                     + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


# --- 3. architecture accounting ------------------------------------------------

def test_criterion_3_architecture(tmp_path, capsys):
    with criterion(3, "default architecture accounting", budget=60) as notes:
        net = build_wldetectnet(NetworkSpec(), seed=0)
        y = net(np.random.default_rng(0).random((3, 64, 64)))
        assert y.shape == (2,) and np.all(y >= 0) and abs(y.sum() - 1) <= 1e-12
        assert count_conv_layers(net) == 52
        assert count_conv_layers(net, include_fc=True) == 84
        rep = count_flops(net)
        assert len(rep.rows) == len(net.layers())
        assert all(r.name for r in rep.rows)
        assert sum(r.macs for r in rep.rows
                   if rep.category(r.kind) in ("conv", "fc", "se")) == rep.total_macs
        capsys.readouterr()
        assert cli.main(["report", "--out", str(tmp_path)]) == 0
        out = capsys.readouterr().out
        assert "published figure of about 3.12 MFLOPs" in out
        rows = list(csv.DictReader(open(tmp_path / "layers.csv")))
        assert len(rows) == len(rep.rows)
        notes.append(f"52 / 84 conv layers, {count_params(net):,} params, "
                     f"{rep.total_flops / 1e6:.1f} MFLOPs counted vs 3.12 published (flagged)")


# --- 4. detector geometry -------------------------------------------------------

def test_criterion_4_detector_geometry():
    with criterion(4, "oracle detector marks and Hausdorff bound", budget=60) as notes:
        rng = np.random.default_rng(11)
        compared = ambiguous = 0
        worst_ratio = 0.0
        configs = [(16, 8, 4, 128, 64), (24, 12, 6, 160, 96), (60, 30, 30, 320, 240)]
        for r, s, h, width, height in configs:
            for k in range(8):
                if k < 2:
                    p = SceneParams(width=width, height=height, level=float(height // 2 + k),
                                    margin=(r + s) // 2 + 1)
                else:
                    p = random_scene_params(rng, width, height, (r + s) // 2 + 1)
                assert p.noise == 0
                cfg = DetectorConfig(r=r, s=s, h=h)
                marks = scan_frame(synth_scene(p).image, cfg, OracleClassifier([p], r, s))
                expected = set()
                for cx, cy in scan_positions(height, width, r, h):
                    ys = p.boundary_y(np.linspace(cx - s / 2, cx + s / 2, 4001))
                    near = min(abs(ys.max() - (cy - s / 2)), abs(ys.min() - (cy + s / 2))) < 1e-3
                    if near and p.boundary != "horizontal":
                        ambiguous += 1
                        if (cx, cy) in marks:
                            expected.add((cx, cy))
                        continue
                    compared += 1
                    if square_meets_boundary_bf(p, cx, cy, s):
                        expected.add((cx, cy))
                assert set(marks) == expected, f"scene {k} r={r}"

                m = connect_marks(marks)
                line = np.array(m.pixels, dtype=float)
                xs = np.linspace(0, width - 1, 8 * width)
                curve = np.stack([xs, p.boundary_y(xs)], axis=1)
                verts = np.array(m.vertices, dtype=float)
                span = curve[(curve[:, 0] >= verts[0, 0]) & (curve[:, 0] <= verts[-1, 0])]
                d1 = max(np.hypot(*(curve - q).T).min() for q in line)
                d2 = max(np.hypot(*(line - q).T).min() for q in span)
                haus = max(d1, d2)
                assert haus <= s / 2 + h, f"Hausdorff {haus:.2f} > {s / 2 + h} (r={r})"
                worst_ratio = max(worst_ratio, haus / (s / 2 + h))
        notes.append(f"{compared} windows vs brute force ({ambiguous} tangent cases skipped); "
                     f"worst Hausdorff {worst_ratio:.2f} of the bound")


# --- 5. metric oracles ----------------------------------------------------------

def test_criterion_5_metric_oracles():
    with criterion(5, "metric oracles on >= 500 instances", budget=60) as notes:
        rng = np.random.default_rng(5)
        n = 600
        for _ in range(n):
            anchors = [(int(x), int(rng.integers(0, 60))) for x in
                       sorted(rng.choice(100, int(rng.integers(1, 8)), replace=False))]
            est = [tuple(int(v) for v in q)
                   for q in rng.integers(-10, 110, (int(rng.integers(1, 40)), 2))]
            lam = float(rng.choice([1.0, 2.5, 5.0, 10.0, 30.0]))
            gt = rasterize_ground_truth(anchors)
            p = precision(est, anchors, lam)
            assert p == pytest.approx(precision_bf(est, anchors, lam), abs=1e-12)
            rl = recall(est, anchors, gt, lam)
            assert rl == pytest.approx(recall_bf(est, anchors, gt, lam), abs=1e-12)
            assert recall(est, anchors, gt, lam, "coverage") == pytest.approx(
                coverage_bf(est, gt, lam), abs=1e-12)
            nfp, dist = fp_count(est, anchors, lam)
            ref_d = fp_bf(est, anchors, lam)
            assert nfp == len(ref_d)
            sk, ref_sk = irrelevance(dist), skew_bf(ref_d)
            assert (sk is None) == (ref_sk is None)
            if sk is not None:
                assert sk == pytest.approx(ref_sk, rel=1e-9, abs=1e-9)
            assert f1(p, rl) == pytest.approx(f1_bf(p, rl), abs=1e-12)
            samples = rng.standard_normal(int(rng.integers(2, 12)))
            assert stability(samples) == pytest.approx(stability_bf(list(samples)), abs=1e-9)

        truth = GroundTruth.from_anchors([(0, 20), (16, 24), (32, 30), (48, 28), (64, 25)])
        rep = evaluate_map(truth.pixels, truth, 10)
        assert (rep.precision, rep.recall, rep.f1, rep.fp) == (1.0, 1.0, 1.0, 0)
        assert stability([3.5] * 6) == 0.0
        assert irrelevance([1, 2, 3]) == pytest.approx(0.0, abs=1e-12)
        notes.append(f"{n} random instances; identities hold")


# --- 6. end-to-end desk pipeline ------------------------------------------------

def test_criterion_6_pipeline(tmp_path):
    with criterion(6, "end-to-end desk pipeline") as notes:
        data, model, det = tmp_path / "data", tmp_path / "model", tmp_path / "det"
        assert cli.main(["synth", "--preset", "desk", "--seed", "0", "--out", str(data)]) == 0
        manifest = json.loads((data / "manifest.json").read_text())
        assert all(sc["noise"] == 0 for sc in manifest["scenes"])

        start = time.perf_counter()
        assert cli.main(["train", "--preset", "desk", "--data", str(data), "--seed", "0",
                         "--out", str(model)]) == 0
        train_time = time.perf_counter() - start
        assert train_time <= 600, f"training took {train_time:.0f}s"

        rows = list(csv.DictReader(open(model / "loss.csv")))
        stage1 = [float(r["mean_loss"]) for r in rows if r["stage"] == "1"]
        half = len(stage1) // 2
        assert stage1[-1] < stage1[0] and np.mean(stage1[half:]) < np.mean(stage1[:half]), stage1
        monotone = all(b < a for a, b in zip(stage1, stage1[1:]))

        net = cli.load_detector(cli.parse_args(["detect", "--preset", "desk", "--frames", "x",
                                                "--weights", str(model / "weights.wldn")]),
                                NetworkSpec.desk())
        train_sets = [cli.load_dataset(data, manifest["datasets"][k]) for k in ("stage1", "stage2")]
        acc = min(accuracy(net, d) for d in train_sets)
        assert acc >= 0.95, f"training accuracy {acc:.3f}"

        assert cli.main(["detect", "--preset", "desk", "--frames", str(data), "--weights",
                         str(model / "weights.wldn"), "--out", str(det)]) == 0
        scores = {}
        for mode in ("literal", "coverage"):
            reports, missing = cli.evaluate_files(det / "marks.csv", data / "anchors.csv", 10.0,
                                                  recall_mode=mode)
            assert not missing
            scores[mode] = [r.f1 for r in reports]
            assert all(v is not None and v >= 0.9 for v in scores[mode]), (mode, scores[mode])
        notes.append(f"train {train_time:.0f}s, stage-1 loss {stage1[0]:.3f} -> {stage1[-1]:.3f}"
                     f"{' (every epoch lower)' if monotone else ''}, train acc {acc:.3f}, "
                     f"held-out F1 min {min(scores['literal']):.3f} literal / "
                     f"{min(scores['coverage']):.3f} coverage")


# --- 7. GAN sanity --------------------------------------------------------------

TOY_GAN = GanSpec(noise_dim=4, image_shape=(1, 4, 4), base_channels=8, upsamples=1, hidden=8)


def gan_trace(seed, steps=300, every=30):
    G, D = build_wlgeneratenet(TOY_GAN, seed)
    rng, data_rng = np.random.default_rng(seed), np.random.default_rng(1000 + seed)
    held_real = toy_waterline_images(np.random.default_rng(99 + seed), 128)
    held_noise = np.random.default_rng(77 + seed).standard_normal((128, 4))
    accs, values = [], []
    for step in range(1, steps + 1):
        values.append(gan_alternating_step(G, D, toy_waterline_images(data_rng, 16), rng,
                                           0.05, 0.05))
        if step % every == 0:
            accs.append(discriminator_accuracy(D, G, held_real, held_noise))
    return accs, values, G, D


def test_criterion_7_gan():
    with criterion(7, "GAN value and toy training trend", budget=180) as notes:
        G, D = build_wlgeneratenet(TOY_GAN, 0)
        for v in D.params.values():
            v[...] = 0.0
        rng = np.random.default_rng(0)
        v = gan_value(D, G, toy_waterline_images(rng, 8), rng.standard_normal((8, 4)))
        assert v == pytest.approx(-2 * math.log(2), abs=1e-12)

        a1, v1, G1, D1 = gan_trace(0, steps=60)
        a2, v2, G2, D2 = gan_trace(0, steps=60)
        assert v1 == v2 and a1 == a2
        assert all(G1.params[k].tobytes() == G2.params[k].tobytes() for k in G1.params)
        assert all(D1.params[k].tobytes() == D2.params[k].tobytes() for k in D1.params)

        early, late, toward = [], [], 0
        for seed in range(5):
            accs, _, _, _ = gan_trace(seed)
            e = float(np.mean([abs(a - 0.5) for a in accs[:3]]))
            lt = float(np.mean([abs(a - 0.5) for a in accs[-3:]]))
            early.append(e)
            late.append(lt)
            toward += lt < e
        assert np.mean(late) < np.mean(early), (early, late)
        assert toward >= 3, f"only {toward} of 5 seeds moved toward 0.5"
        notes.append(f"value at D=0.5 is -2 ln 2; mean |acc-0.5| {np.mean(early):.3f} -> "
                     f"{np.mean(late):.3f}, {toward}/5 seeds toward 0.5; bit-reproducible")


# --- 8. determinism -------------------------------------------------------------

def run_all(root: Path):
    data, model, det, ev, rep = (root / n for n in ("data", "model", "det", "eval", "report"))
    steps = [
        ["synth", "--preset", "desk", "--seed", "1", "--frames", "3", "--train-scenes", "2",
         "--n-pos", "16", "--n-neg", "16", "--n-pos2", "16", "--n-neg2", "16", "--n-hard", "4",
         "--noise", "3", "--texture", "--out", str(data)],
        ["train", "--preset", "desk", "--seed", "1", "--data", str(data), "--epochs", "2,1",
         "--batch-size", "8", "--checkpoint-every", "1", "--gan-samples", "4", "--gan-steps", "5",
         "--out", str(model)],
        ["detect", "--preset", "desk", "--frames", str(data), "--weights",
         str(model / "weights.wldn"), "--out", str(det)],
        ["eval", "--preset", "desk", "--marks", str(det / "marks.csv"), "--anchors",
         str(data / "anchors.csv"), "--out", str(ev)],
        ["report", "--preset", "desk", "--out", str(rep)],
    ]
    for argv in steps:
        assert cli.main(argv) == 0, argv
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file()}


def test_criterion_8_determinism(tmp_path):
    with criterion(8, "byte-identical reruns of every subcommand") as notes:
        a = run_all(tmp_path / "a")
        b = run_all(tmp_path / "b")
        assert sorted(a) == sorted(b)
        differing = [k for k in a if a[k] != b[k]]
        assert not differing, f"differing outputs: {differing}"
        kinds = sorted({Path(k).suffix for k in a})
        notes.append(f"{len(a)} files identical ({', '.join(kinds)})")
