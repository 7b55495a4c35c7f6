"""Acceptance suite: one test per release criterion.

Each test prints one [PASS]/[FAIL] line (with measured error magnitudes
and runtimes) straight to the terminal, bypassing capture, so the
verdict is visible in any pytest run.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from auverify.geometry import (AuBoxConfig, BoundingBox, PAIN_AUS,
                               au_bounding_box, box_mask, validate_landmarks)
from auverify.lrp import (BasicRule, RelevanceMap, explain, get_preset,
                          lrp_conv, lrp_global_avgpool, lrp_input_zb,
                          lrp_linear_alphabeta, lrp_linear_basic,
                          lrp_linear_epsilon, lrp_residual_add, relevance_flow)
from auverify.metrics import (MuRecord, aggregate, confusion_counts, f1_score,
                              make_mu_record, mu, mu_weighted)
from auverify.model import (LayerSpec, ModelSpec, classify, forward,
                            save_model)
from auverify.pipeline import Report, RunConfig, emit_report, run_verification
from auverify.tensor import Tensor, conv2d_output_shape

from helpers import (conv_lrp_oracle, mu_double_loop, random_zero_bias_model,
                     wt)

FIXTURES = Path(__file__).parent / "fixtures"


def check(capfd, name, body):
    """Run one criterion body; print a single PASS/FAIL line for it."""
    try:
        detail = body()
    except BaseException:
        with capfd.disabled():
            print(f"\n[FAIL] {name}")
        raise
    with capfd.disabled():
        print(f"\n[PASS] {name}" + (f" ({detail})" if detail else ""))


def test_criterion_conservation_suite(capfd):
    def body():
        started = time.perf_counter()
        rng = np.random.default_rng(20240817)
        preset = get_preset("basic")
        worst_end = worst_layer = 0.0
        for _ in range(100):
            model, image = random_zero_bias_model(rng)
            trace = forward(model, image)
            logits = np.asarray(trace.logits, dtype=np.float64)
            au = model.output_labels[int(rng.integers(len(model.output_labels)))]
            logit = float(logits[model.label_index(au)])

            rmap = explain(model, trace, au, preset)
            total = float(np.asarray(rmap.pixel_values, dtype=np.float64).sum())
            end_err = abs(total - logit)
            assert end_err <= 1e-3 * abs(logit), \
                f"end-to-end leak {end_err:.3g} on |logit| {abs(logit):.3g}"
            worst_end = max(worst_end, end_err / abs(logit))

            flow = relevance_flow(model, trace, au, preset)
            for (_, a), (_, b) in zip(flow, flow[1:]):
                rel = abs(a - b) / max(abs(a), abs(b))
                assert rel <= 1e-5, f"layer transition leak {rel:.3g}"
                worst_layer = max(worst_layer, rel)
        elapsed = time.perf_counter() - started
        assert elapsed < 30.0, f"took {elapsed:.1f}s"
        return (f"100 models, worst end-to-end {worst_end:.2e} of limit 1e-3, "
                f"worst transition {worst_layer:.2e} of limit 1e-5, {elapsed:.2f}s")

    check(capfd, "conservation suite", body)


def test_criterion_linear_rule_hand_oracle(capfd):
    def body():
        tol = 1e-6

        def close(got, want):
            assert np.max(np.abs(np.asarray(got, dtype=np.float64)
                                 - np.asarray(want))) <= tol, (got, want)

        # basic rule
        close(lrp_linear_basic([1.0, 3.0], [[1.0], [1.0]], [4.0]), [1.0, 3.0])
        close(lrp_linear_basic([1.0, 3.0], [[1.0], [1.0]], [0.0]), [0.0, 0.0])
        close(lrp_linear_basic([2.0], [[1.0]], [5.0]), [5.0])
        # epsilon rule
        rng = np.random.default_rng(3)
        x, w, r = rng.random(3), rng.standard_normal((3, 2)), rng.random(2)
        assert np.array_equal(lrp_linear_epsilon(x, w, r, 0.0),
                              lrp_linear_basic(x, w, r))
        degenerate = lrp_linear_epsilon([1.0, 1.0], [[1.0], [-1.0]], [2.0], 0.5)
        assert np.all(np.isfinite(degenerate))
        close(lrp_linear_epsilon([1.0, 3.0], [[1.0], [1.0]], [4.0], 4.0),
              [0.5, 1.5])
        # alpha-beta rule
        close(lrp_linear_alphabeta([1.0, 3.0], [[1.0], [1.0]], [4.0], 1.0, 0.0),
              lrp_linear_basic([1.0, 3.0], [[1.0], [1.0]], [4.0]))
        close(lrp_linear_alphabeta([1.0, 1.0], [[2.0], [-1.0]], [3.0], 1.0, 0.0),
              [3.0, 0.0])
        close(lrp_linear_alphabeta([1.0, 1.0], [[2.0], [-1.0]], [3.0], 2.0, 1.0),
              [6.0, -3.0])
        # bounded-input rule
        close(lrp_input_zb(x, w, r, 0.0, 0.0), lrp_linear_basic(x, w, r))
        close(lrp_input_zb([0.5], [[2.0]], [1.0], 0.0, 1.0), [1.0])
        # structural splits
        main, skip = lrp_residual_add(np.array([3.0]), np.array([1.0]),
                                      np.array([8.0]))
        close(main, [6.0])
        close(skip, [2.0])
        close(lrp_global_avgpool(np.array([[[1.0, 3.0]]]), np.array([4.0])),
              [[[1.0, 3.0]]])
        return "14 hand-computed examples within 1e-6"

    check(capfd, "linear-rule hand oracle", body)


def test_criterion_conv_unrolling_oracle(capfd):
    rules = [
        ("basic", BasicRule(), {}),
        ("epsilon", None, {"epsilon": 0.25}),
        ("alphabeta10", None, {"alpha": 1.0, "beta": 0.0}),
        ("alphabeta21", None, {"alpha": 2.0, "beta": 1.0}),
        ("zb", None, {"low": 0.0, "high": 1.0}),
        ("flat", None, {}),
    ]

    def body():
        from auverify.lrp import (AlphaBetaRule, EpsilonRule, FlatRule,
                                  ZBoundsRule)
        engine_rules = {
            "basic": BasicRule(), "epsilon": EpsilonRule(0.25),
            "alphabeta10": AlphaBetaRule(1.0, 0.0),
            "alphabeta21": AlphaBetaRule(2.0, 1.0),
            "zb": ZBoundsRule(0.0, 1.0), "flat": FlatRule(),
        }
        oracle_names = {"alphabeta10": "alphabeta", "alphabeta21": "alphabeta"}
        started = time.perf_counter()
        rng = np.random.default_rng(555)
        worst = 0.0
        for rule_key, _, params in rules:
            rule = engine_rules[rule_key]
            oracle_rule = oracle_names.get(rule_key, rule_key)
            done = 0
            while done < 200:
                c = int(rng.integers(1, 3))
                h, w = int(rng.integers(2, 9)), int(rng.integers(2, 9))
                kh = int(rng.integers(1, min(3, h) + 1))
                kw = int(rng.integers(1, min(3, w) + 1))
                o = int(rng.integers(1, 4))
                stride = int(rng.integers(1, 3))
                padding = int(rng.integers(0, 2))
                try:
                    conv2d_output_shape((c, h, w), (o, c, kh, kw), stride, padding)
                except Exception:
                    continue
                _, oh, ow = conv2d_output_shape((c, h, w), (o, c, kh, kw),
                                                stride, padding)
                x = rng.uniform(0.0, 1.0, (c, h, w))
                k = rng.standard_normal((o, c, kh, kw))
                bias = None if rule_key == "zb" else rng.standard_normal(o)
                r = rng.standard_normal((o, oh, ow))
                got = lrp_conv(x, k, bias, stride, padding, r, rule)
                want = conv_lrp_oracle(x, k, bias, stride, padding, r,
                                       oracle_rule, **params)
                err = float(np.max(np.abs(got - want)))
                assert err <= 1e-5, f"{rule_key}: error {err:.3g}"
                worst = max(worst, err)
                done += 1
        elapsed = time.perf_counter() - started
        assert elapsed < 60.0, f"took {elapsed:.1f}s"
        return (f"200 instances x {len(rules)} rules, worst error "
                f"{worst:.2e} of limit 1e-5, {elapsed:.2f}s")

    check(capfd, "conv-unrolling oracle", body)


def test_criterion_mu_suite(capfd):
    def body():
        started = time.perf_counter()
        rng = np.random.default_rng(777)
        for _ in range(1000):
            h, w = int(rng.integers(2, 33)), int(rng.integers(2, 33))
            grid = rng.normal(size=(h, w))
            rmap = RelevanceMap.from_values("AU04", grid[None], float(grid.sum()))
            x0, y0 = int(rng.integers(0, w)), int(rng.integers(0, h))
            x1, y1 = int(rng.integers(x0, w)), int(rng.integers(y0, h))
            box = BoundingBox(x0, y0, x1, y1)
            value, inside, total = mu(rmap, box_mask(box, (h, w)))
            if value is None:
                assert total == 0.0
                continue
            assert 0.0 <= value <= 1.0
            # full-image box recovers everything
            full, _, _ = mu(rmap, box_mask(BoundingBox(0, 0, w - 1, h - 1), (h, w)))
            assert full == 1.0
            # positive scaling leaves mu unchanged (same stored precision)
            scaled = RelevanceMap.from_values(
                "AU04", np.asarray(rmap.values, dtype=np.float64) * 16.0, 0.0)
            v2, _, _ = mu(scaled, box_mask(box, (h, w)))
            assert v2 == pytest.approx(value, rel=1e-6)
            # growing the box never loses relevance
            grown = BoundingBox(max(0, x0 - 1), max(0, y0 - 1),
                                min(w - 1, x1 + 1), min(h - 1, y1 + 1))
            v3, _, _ = mu(rmap, box_mask(grown, (h, w)))
            assert v3 >= value - 1e-12

        worst = 0.0
        for _ in range(5):
            grid = rng.normal(size=(112, 112)).astype(np.float32)
            rmap = RelevanceMap.from_values("AU04", grid[None], 0.0)
            box = BoundingBox(20, 25, 80, 90)
            value, inside, total = mu(rmap, box_mask(box, (112, 112)))
            want, w_inside, w_total = mu_double_loop(
                np.asarray(rmap.pixel_values), box)
            err = abs(value - want)
            assert err <= 1e-6, f"double-loop mismatch {err:.3g}"
            worst = max(worst, err)
        elapsed = time.perf_counter() - started
        assert elapsed < 30.0, f"took {elapsed:.1f}s"
        return (f"1000 random maps + 5 double-loop 112x112 checks, worst "
                f"oracle gap {worst:.2e} of limit 1e-6, {elapsed:.2f}s")

    check(capfd, "mu suite", body)


def test_criterion_mu_weighted_consistency(capfd):
    def body():
        entry = json.loads((FIXTURES / "manifest.jsonl").read_text()
                           .splitlines()[0])
        landmarks = validate_landmarks(np.asarray(entry["landmarks"]), (112, 112))
        config = AuBoxConfig.default()
        rng = np.random.default_rng(31)
        for au in PAIN_AUS:
            box = au_bounding_box(landmarks, au, config, (112, 112))
            fraction = box.area_fraction((112, 112))
            grid = rng.uniform(0.0, 1.0, (112, 112))
            rmap = RelevanceMap.from_values(au, grid[None], float(grid.sum()))
            rec = make_mu_record("img", au, rmap, box_mask(box, (112, 112)),
                                 fraction)
            assert rec.mu_w == pytest.approx(rec.mu / fraction, rel=1e-12)
        published_mu, published_mu_w = 0.504, 0.969
        implied_fraction = published_mu / published_mu_w
        round_trip = mu_weighted(published_mu, implied_fraction)
        gap = abs(round_trip - published_mu_w)
        assert gap <= 1e-3, f"round-trip gap {gap:.3g}"
        return (f"mu_w = mu/area over all {len(PAIN_AUS)} default regions; "
                f"0.504/0.969 row round-trips with gap {gap:.2e} of limit 1e-3")

    check(capfd, "mu_w consistency", body)


def test_criterion_pipeline_determinism(capfd, tmp_path):
    def run(sub, jobs):
        config = RunConfig(model_path=FIXTURES / "face_model.json",
                           manifest_path=FIXTURES / "manifest.jsonl",
                           out_dir=tmp_path / sub, jobs=jobs,
                           variants=("standard", "top25"))
        emit_report(run_verification(config), tmp_path / sub)
        return tmp_path / sub

    def compare(dir_a, dir_b, ignore_jobs):
        names = sorted(p.name for p in dir_a.iterdir())
        assert names == sorted(p.name for p in dir_b.iterdir())
        identical = 0
        for name in names:
            a_bytes = (dir_a / name).read_bytes()
            b_bytes = (dir_b / name).read_bytes()
            if name == "summary.json":
                a, b = json.loads(a_bytes), json.loads(b_bytes)
                a.pop("wall_time_s"), b.pop("wall_time_s")
                if ignore_jobs:
                    a["config"].pop("jobs"), b["config"].pop("jobs")
                assert a == b, "summary content diverged"
            else:
                assert a_bytes == b_bytes, f"{name} differs"
                identical += 1
        return identical

    def body():
        serial = run("serial", jobs=1)
        threaded = run("threaded", jobs=8)
        rerun = run("rerun", jobs=1)
        n = compare(serial, threaded, ignore_jobs=True)
        compare(serial, rerun, ignore_jobs=False)
        return (f"jobs 1 vs 8 and re-run byte-identical across {n} report "
                "files (summary.json compared minus wall time)")

    check(capfd, "pipeline determinism", body)


def test_criterion_table_shape_fidelity(capfd, tmp_path):
    published = [("AU04", 0.50, 11249), ("AU09", 0.36, 3363),
                 ("AU25", 0.47, 13497)]

    def body():
        records = []
        for au, mu_value, n in published:
            records.extend(MuRecord(
                image_id=f"{au}_{i}", au=au, variant="standard", mu=mu_value,
                mu_w=mu_value / 0.5, inside=mu_value, total=1.0,
                box_area_fraction=0.5) for i in range(n))
        rows, notices = aggregate(records, "studyA")
        assert notices == []
        total = sum(n for _, _, n in published)
        report = Report(rows=rows, f1_rows=[], records={"standard": records},
                        notices=[], manifest_lines=total, processed=total,
                        skipped=0, failed=0, config={}, wall_time_s=0.0)
        out = tmp_path / "replay"
        emit_report(report, out)

        csv_rows = (out / "report.csv").read_text().splitlines()[1:]
        read_back = {}
        for line in csv_rows:
            dataset, au, variant, mean_mu, _, n, _ = line.split(",")
            assert (dataset, variant) == ("studyA", "standard")
            read_back[au] = (float(mean_mu), int(n))
        for au, mu_value, n in published:
            assert read_back[au] == (mu_value, n), \
                f"{au}: read {read_back[au]}, published {(mu_value, n)}"
        json_rows = json.loads((out / "report.json").read_text())["rows"]
        for row, (au, mu_value, n) in zip(json_rows, published):
            assert (row["au"], row["mean_mu"], row["n"]) == (au, mu_value, n)
        return ("published (au, mean_mu, n) triples read back exactly: "
                + ", ".join(f"{au}/{v}/{n}" for au, v, n in published))

    check(capfd, "table-shape fidelity", body)


def boundary_model(logits):
    """Zero-weight classifier whose probabilities are sigmoid(bias)."""
    n = len(logits)
    return ModelSpec(
        name="boundary", input_shape=(1, 1, 1),
        layers=[LayerSpec(kind="flatten"),
                LayerSpec(kind="dense", weights=wt(np.zeros((1, n))),
                          bias=wt(np.asarray(logits, dtype=np.float32))),
                LayerSpec(kind="sigmoid")],
        output_labels=[f"AU{i + 1:02d}" for i in range(n)])


def test_criterion_classification_contract(capfd):
    def body():
        # probabilities exactly 0.5 (logit 0) are inclusive at the default
        # threshold; slightly off-boundary logits fall on the right sides
        model = boundary_model([0.0, 0.01, -0.01])
        trace = forward(model, Tensor(np.zeros((1, 1, 1), dtype=np.float32)))
        probs = np.asarray(trace.probabilities, dtype=np.float64)
        assert probs[0] == 0.5
        assert classify(trace, threshold=0.5) == {"AU01", "AU02"}
        assert classify(trace, threshold=0.49) == {"AU01", "AU02", "AU03"}
        assert classify(trace, threshold=0.51) == set()

        datasets = [
            # (predictions, truths, expected tp/fp/fn, expected f1) for AU04
            ([{"AU04"}, {"AU04"}, set()], [{"AU04"}, {"AU04"}, set()],
             (2, 0, 0), 1.0),
            ([set(), set()], [{"AU04"}, {"AU04"}], (0, 0, 2), 0.0),
            ([{"AU04"}, {"AU04"}, {"AU04"}, set()],
             [{"AU04"}, {"AU04"}, set(), {"AU04"}], (2, 1, 1), 2 * 2 / 6),
            ([set(), set()], [set(), set()], (0, 0, 0), 0.0),
            ([{"AU04", "AU06"}, {"AU06"}, {"AU04"}, set()],
             [{"AU04"}, {"AU04", "AU06"}, set(), {"AU04"}], (1, 1, 2), 0.4),
        ]
        for i, (preds, truths, counts, want) in enumerate(datasets, start=1):
            assert confusion_counts(preds, truths, "AU04") == counts, f"set {i}"
            got = f1_score(preds, truths, "AU04")
            assert got == pytest.approx(want, abs=1e-9), f"set {i}"
        assert round(f1_score(*datasets[2][:2], "AU04"), 3) == 0.667
        return ("inclusive 0.5 boundary verified; 5 scripted mini-datasets "
                "match hand confusion counts")

    check(capfd, "classification contract", body)


def test_criterion_geometry_suite(capfd):
    def body():
        started = time.perf_counter()
        rng = np.random.default_rng(424242)
        config = AuBoxConfig.default()
        dims = (112, 112)
        aus = list(PAIN_AUS)
        for i in range(1000):
            pts = rng.uniform(35.0, 75.0, size=(68, 2))
            lm = validate_landmarks(pts, dims)
            au = aus[i % len(aus)]
            box = au_bounding_box(lm, au, config, dims)

            dx, dy = int(rng.integers(-5, 6)), int(rng.integers(-5, 6))
            moved = au_bounding_box(lm.translated(dx, dy), au, config, dims)
            assert (moved.x_min - box.x_min, moved.y_min - box.y_min,
                    moved.x_max - box.x_max, moved.y_max - box.y_max) \
                == (dx, dy, dx, dy), "translation equivariance"

            region = config.region(au)
            from auverify.geometry import AuRegion
            grown_config = AuBoxConfig(regions={au: AuRegion(
                landmarks=region.landmarks,
                margin=region.margin + int(rng.integers(1, 6)),
                extend_down_frac=region.extend_down_frac)})
            grown = au_bounding_box(lm, au, grown_config, dims)
            assert (grown.x_min <= box.x_min and grown.y_min <= box.y_min
                    and grown.x_max >= box.x_max and grown.y_max >= box.y_max), \
                "margin monotonicity"

            mask = np.asarray(box_mask(box, dims))
            assert int(mask.sum()) == box.area, "mask-area identity"
        elapsed = time.perf_counter() - started
        return f"1000 landmark sets, all three properties, {elapsed:.2f}s"

    check(capfd, "geometry suite", body)
