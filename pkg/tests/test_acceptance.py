"""Acceptance run: one PASS/FAIL line per criterion, printed to the terminal.

Criterion 6 trains on 60 five-minute episodes and takes a while on one core;
it is marked ``slow`` so ``-m "not slow"`` gives a quick pass over the rest.
"""

import time

import numpy as np
import pytest

from neoact import tensor as ops
from neoact.data import LABELS, AnnotationTrack, ArrayFrames, Episode, extract_clips, group_split, merge_intervals
from neoact.evaluation import PredictionSet, check_exclusion, evaluate_method, format_score, rewindow, stitch_timeline
from neoact.fusion import FusionConfig, FusionModel, LoraAdapter, lora_apply, lora_merge
from neoact.gradcheck import grad_check
from neoact.hpo import MedianPruner, Study, TrialRecord, Uniform, random_search, run_study, should_prune
from neoact.metrics import f1_scores, macro_f1, round_half_up
from neoact.pipeline import clip_arrays, synthetic_episodes
from neoact.spacetime import PatchConfig, SpaceTimeConfig, SpaceTimeModel
from neoact.synthetic import sample_script
from neoact.training import TrainConfig, train, wbce_loss
from neoact.zeroshot import (ClipRef, CoParse, MockBackend, ParseFailure, TranscriptWriter, load_prompt_spec,
                             parse_co, parse_judge, parse_yes_no, read_transcript, rederive, run_corpus, run_zsc_j)

from oracles import ZS_B_COUNTS, frame_count_labels, prediction_fixture


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail
    return emit


def _randomize(params, rng, scale):
    for p in params.values():
        p.data[...] = rng.normal(size=p.shape) * scale


# 1 ----------------------------------------------------------------------------------------

def test_criterion_1_metric_fixtures(report):
    a = round_half_up(macro_f1([0.99, 0.51, 0.71, 0.57]))
    b = round_half_up(macro_f1([0.996, 0.92, 0.79, 0.94]))
    zsb = evaluate_method("ZS-B", prediction_fixture(ZS_B_COUNTS))
    c = format_score(zsb.macro_f1)
    report(1, (a, b, c) == (0.70, 0.91, "0.54"), f"macro-F1 {a:.2f}, {b:.2f}, ZS-B row {c}")


# 2 ----------------------------------------------------------------------------------------

def test_criterion_2_gradient_checks(report):
    t0 = time.perf_counter()
    ep = synthetic_episodes(1, 3.0, seed=1, h=32, w=32)
    clip = clip_arrays(ep, 2, (16, 16)).x[:1].astype(np.float64)
    y = np.array([[1.0, 0.0, 0.0, 1.0]])

    st = SpaceTimeModel(SpaceTimeConfig(PatchConfig(P=8, d=8, H=16, W=16, T=2), depth=1, n_heads=2), seed=3)
    _randomize(st.params, np.random.default_rng(3), 0.2)
    r1 = grad_check(lambda: wbce_loss(st(clip), y, [2.0, 1.0, 3.0, 1.0]), st.trainable())

    cfg = FusionConfig(d=8, n_heads=2, n_blocks=1, frames=2, H=16, W=16, P=8, lora_rank=2, lora_alpha=4.0,
                       max_prompt_len=8)
    fu = FusionModel(cfg, mode="ft-c-lora", seed=4)
    rng = np.random.default_rng(4)
    for a in fu.adapters.values():
        a.B.data[...] = rng.normal(size=a.B.shape) * 0.3
    x = fu.cache_inputs(clip).astype(np.float64)
    r2 = grad_check(lambda: wbce_loss(fu(x), y, [1.0, 2.0, 1.0, 3.0]), fu.trainable())

    ok = (r1.n_checked == st.n_params and r2.n_checked == sum(p.size for p in fu.trainable().values())
          and max(r1.max_rel_error, r2.max_rel_error) <= 1e-4)
    report(2, ok, f"spacetime {r1.n_checked} params max rel {r1.max_rel_error:.1e}; "
                  f"ft-c-lora {r2.n_checked} params max rel {r2.max_rel_error:.1e}; "
                  f"{time.perf_counter() - t0:.1f} s")


# 3 ----------------------------------------------------------------------------------------

def test_criterion_3_lora_contracts(report):
    cfg = FusionConfig(d=16, n_heads=2, n_blocks=1, frames=2, H=16, W=16, P=8, lora_rank=2, lora_alpha=4.0,
                       max_prompt_len=8)
    frames = np.random.default_rng(0).random((3, 2, 16, 16, 3))
    with ops.no_grad():
        a = FusionModel(cfg, mode="ft-c-lora", seed=1).forward_frames(frames).data
        b = FusionModel(cfg, mode="ft-lc", seed=1).forward_frames(frames).data
    zero_delta = a.tobytes() == b.tobytes()

    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        d, k = rng.integers(1, 9, size=2)
        ad = LoraAdapter("t", d, k, r=int(rng.integers(1, min(d, k) + 1)), alpha=float(rng.uniform(0.5, 16)),
                         rng=rng)
        ad.B.data[...] = rng.normal(size=ad.B.shape)
        w0 = rng.normal(size=(d, k))
        xx = rng.normal(size=(5, k))
        worst = max(worst, float(np.max(np.abs(lora_apply(xx, w0, ad).data - xx @ lora_merge(w0, ad).T))))

    model = FusionModel(cfg, mode="ft-c-lora", seed=2)
    frozen = {k: v.data.copy() for k, v in model.backbone_params().items()}
    y = (np.random.default_rng(2).random((8, 4)) < 0.5).astype(float)
    x = model.cache_inputs(np.random.default_rng(3).random((8, 2, 16, 16, 3)))
    res = train(model, x, y, TrainConfig(mode="ft-c-lora", epochs=50, batch_size=8, lr_head=1e-2,
                                         lr_backbone=1e-2, w_plus=(1, 1, 1, 1), val_fraction=0.0))
    same = all(v.data.tobytes() == frozen[k].tobytes() for k, v in model.backbone_params().items())
    moved = any(np.any(ad.B.data) for ad in model.adapters.values())
    ok = zero_delta and worst <= 1e-10 and res.steps == 50 and same and moved
    report(3, ok, f"zero-delta bit-identical {zero_delta}; merge max err {worst:.1e} over 100 cases; "
                  f"W0 unchanged after {res.steps} steps {same}")


# 4 ----------------------------------------------------------------------------------------

def test_criterion_4_head_bias_prior(report):
    priors = (0.1, 0.2, 0.3, 0.4)
    model = SpaceTimeModel(seed=0, priors=priors, zero_head=True)
    cfg = model.cfg.patch
    rng = np.random.default_rng(0)
    worst = 0.0
    for scale in (0.0, 1.0, 100.0):
        x = rng.normal(size=(3, cfg.T, cfg.H, cfg.W, 3)) * scale
        worst = max(worst, float(np.max(np.abs(model.predict(x) - np.array(priors)))))
    report(4, worst <= 1e-9, f"max |p - prior| {worst:.1e}")


# 5 ----------------------------------------------------------------------------------------

def _random_tracks(rng, duration):
    # boundaries sit on the 25 fps frame grid, as a frame-accurate annotator would place them
    n = int(duration * 25)
    tracks = []
    for lab in ("stimulation", "baby_on_table"):
        iv = []
        for _ in range(rng.integers(0, 6)):
            s = int(rng.integers(0, n)) * 40
            iv.append((s, s + int(rng.integers(1, 200)) * 40))
        if iv:
            tracks.append(AnnotationTrack(lab, merge_intervals(iv)))
    # ventilation and suction share a boundary, sometimes overlapping it
    cut = int(rng.integers(1, n)) * 40
    overlap = int(rng.integers(0, 50)) * 40 if rng.random() < 0.5 else 0
    tracks.append(AnnotationTrack("ventilation", [(0, cut + overlap)]))
    tracks.append(AnnotationTrack("suction", [(cut, int(duration * 1000) + 1000)]))
    return tracks


def test_criterion_5_data_model_oracle(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    n_clips = mismatches = cooc = bad_conflicts = 0
    for i in range(1000):
        duration = float(rng.integers(3, 90))
        if i % 2:
            tracks = _random_tracks(rng, duration)
        else:
            tracks = sample_script(duration, seed=int(rng.integers(2 ** 31))).tracks()
        frames = ArrayFrames(np.zeros((int(round(duration * 25)), 1, 1, 3)), 25)
        clips = extract_clips(Episode(f"ep{i}", frames, duration), tracks)
        for clip, y in clips:
            n_clips += 1
            mismatches += y.y != frame_count_labels(tracks, clip.start_time)
            cooc += bool(y.y[0] and y.y[2])
        for c in clips.conflicts:
            ref = frame_count_labels(tracks, c.start_time)
            bad_conflicts += not (ref[0] and ref[2])
    ok = mismatches == 0 and cooc == 0 and bad_conflicts == 0 and n_clips > 0
    report(5, ok, f"{n_clips} clips from 1000 episodes, {mismatches} label mismatches, {cooc} vent+suct "
                  f"co-occurrences, {bad_conflicts} spurious conflicts; {time.perf_counter() - t0:.1f} s")


# 6 ----------------------------------------------------------------------------------------

FUSION = FusionConfig(d=32, n_heads=4, n_blocks=2, frames=8)
FUSION_STEPS = 600
FUSION_LR = 3e-3


@pytest.fixture(scope="module")
def synthetic_dataset():
    data = clip_arrays(synthetic_episodes(60, 300.0, seed=0), 8)
    test = group_split(data.source_ids, 0.2, seed=0)
    return data.subset(~test), data.subset(test)


def _spacetime_run(tr, te):
    model = SpaceTimeModel(seed=0, priors=np.clip(tr.y.mean(axis=0), 0.01, 0.99))
    cfg = TrainConfig(epochs=12, batch_size=32, lr_head=1e-3, lr_backbone=1e-3, seed=0, patience=5)
    train(model, tr.x, tr.y, cfg, groups=tr.source_ids)
    return macro_f1(f1_scores(model.predict(te.x), te.y))


def _fusion_run(tr, te, mode, seed):
    model = FusionModel(FUSION, mode=mode, seed=seed)
    xtr, xte = model.cache_inputs(tr.x), model.cache_inputs(te.x)
    cfg = TrainConfig(epochs=100, batch_size=32, lr_head=FUSION_LR, lr_backbone=FUSION_LR, seed=seed,
                      patience=100, mode=mode, max_steps=FUSION_STEPS)
    train(model, xtr, tr.y, cfg, groups=tr.source_ids)
    return macro_f1(f1_scores(model.predict(xte), te.y))


@pytest.mark.slow
def test_criterion_6_synthetic_end_to_end(report, synthetic_dataset):
    tr, te = synthetic_dataset
    t0 = time.perf_counter()
    st = _spacetime_run(tr, te)
    t_st = time.perf_counter() - t0
    pairs = [(_fusion_run(tr, te, "ft-lc", s), _fusion_run(tr, te, "ft-c-lora", s)) for s in range(5)]
    wins = sum(lora > lc for lc, lora in pairs)
    t_all = time.perf_counter() - t0
    detail = (f"spacetime test macro-F1 {st:.3f} ({t_st:.0f} s); ft-c-lora > ft-lc in {wins}/5 seeds "
              f"[{', '.join(f'{lora:.3f}>{lc:.3f}' for lc, lora in pairs)}]; {t_all:.0f} s total")
    report(6, st >= 0.90 and wins >= 4, detail)


# 7 ----------------------------------------------------------------------------------------

def test_criterion_7_tpe_beats_random(report):
    t0 = time.perf_counter()
    quad = {"x": Uniform(0.0, 1.0)}

    def f(cfg):
        return -(cfg["x"] - 0.3) ** 2

    tpe, rnd, xs = [], [], []
    for seed in range(20):
        s = run_study(f, quad, 60, Study(seed=seed))
        tpe.append(s.best_trial.value)
        xs.append(s.best_trial.params["x"])
        rnd.append(random_search(f, quad, 60, seed=seed).best_trial.value)
    same = all(run_study(f, quad, 25, Study(seed=s, n_startup=25)).transcript()
               == random_search(f, quad, 25, seed=s).transcript() for s in range(5))
    ok = np.median(tpe) >= np.median(rnd) and abs(np.median(xs) - 0.3) <= 0.05 and same
    report(7, ok, f"median best TPE {np.median(tpe):.2e} vs random {np.median(rnd):.2e}, "
                  f"median x {np.median(xs):.4f}, startup=budget transcript equal {same}; "
                  f"{time.perf_counter() - t0:.1f} s")


# 8 ----------------------------------------------------------------------------------------

def test_criterion_8_pruner_fixture(report):
    def decide(value):
        study = Study(pruner=MedianPruner(n_warmup=1, n_min=3))
        for i, v in enumerate((0.2, 0.4, 0.5, 0.6, 0.7)):
            study.trials.append(TrialRecord(i, {}, {1: v, 2: v, 3: v}, v, "complete"))
        t = TrialRecord(5, {})
        study.trials.append(t)
        t.report(3, value)
        return should_prune(t, study, 3)

    low, at = decide(0.3), decide(0.5)
    report(8, low and not at, f"0.3 at step 3 pruned {low}; 0.5 (the median) pruned {at}")


# 9 ----------------------------------------------------------------------------------------

def _corpus(rng, n=100):
    clips, script = [], {}
    for i in range(n):
        cid = f"ep{i // 10}@{(i % 10) * 3000:08d}"
        clips.append(ClipRef(cid, rng.random((2, 4, 4, 3))))
        ans = ["Yes" if rng.random() < 0.4 else "No" for _ in LABELS]
        jud = [("1" if a == "Yes" else "0") for a in ans]
        if rng.random() < 0.2:
            jud[1] = "Probably"
            script[f"{cid}::judge-retry:stimulation"] = "0"
        script[f"{cid}::caption"] = f"caption {i}"
        for lab, a, j in zip(LABELS, ans, jud):
            script[f"{cid}::question:{lab}"] = a
            script[f"{cid}::judge:{lab}"] = j
    return clips, script


def test_criterion_9_protocol_robustness(report, tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    crashes = unclassified = 0
    for parser in (parse_co, parse_yes_no, parse_judge):
        for _ in range(10_000):
            raw = rng.integers(0, 256, size=int(rng.integers(0, 65)), dtype=np.uint8).tobytes()
            try:
                out = parser(raw)
            except Exception:
                crashes += 1
                continue
            unclassified += not isinstance(out, (ParseFailure, CoParse, bool, int))

    clips, script = _corpus(rng)
    counts_ok, replay_ok, rederive_ok = True, True, True
    for protocol in ("ZS-B", "ZSC-J"):
        spec = load_prompt_spec(protocol)
        blobs = []
        for run, jobs in enumerate((1, 4)):
            path = tmp_path / f"{protocol}-{run}.jsonl"
            b = MockBackend(script, seed=7)
            run_corpus(protocol, clips, spec, b, b, max_in_flight=jobs, writer=TranscriptWriter(path))
            blobs.append(path.read_bytes())
            per = {}
            for c in b.calls:
                if c.purpose.startswith(("question", "judge:")):
                    per[c.clip_id] = per.get(c.clip_id, 0) + 1
            counts_ok &= set(per.values()) == {4} and len(per) == 100
        replay_ok &= blobs[0] == blobs[1]
        pairs = rederive(read_transcript(tmp_path / f"{protocol}-0.jsonl"))
        rederive_ok &= all(list(a.y.y) == s["y"] and list(a.flags) == s["flags"] for s, a in pairs)

    zsj = load_prompt_spec("ZSC-J")
    cid = "retry@00000000"
    s = {f"{cid}::caption": "c", f"{cid}::judge:ventilation": "Yes",
         f"{cid}::judge-retry:ventilation": "nope", f"{cid}::judge:stimulation": "1",
         f"{cid}::judge:suction": "0", f"{cid}::judge:baby_on_table": "1"}
    llm = MockBackend(s)
    res = run_zsc_j(ClipRef(cid), MockBackend(s), llm, zsj)
    retry_ok = ({"judge_retry:ventilation", "judge_failure:ventilation"} <= set(res.flags)
                and res.y.y == (0, 1, 0, 1) and len(llm.calls) == 5)

    ok = crashes == 0 and unclassified == 0 and counts_ok and replay_ok and rederive_ok and retry_ok
    report(9, ok, f"3x10000 fuzzed inputs: {crashes} crashes, {unclassified} unclassified; replay identical "
                  f"{replay_ok}; 4 calls per clip {counts_ok}; retry-then-flag {retry_ok}; "
                  f"{time.perf_counter() - t0:.1f} s")


# 10 ---------------------------------------------------------------------------------------

def test_criterion_10_timeline_round_trip(report):
    rng = np.random.default_rng(10)
    mismatches = overlaps = violations = 0
    for _ in range(200):
        ids, probs, spans, sids = [], [], [], []
        for e in range(int(rng.integers(1, 4))):
            t = 0.0
            for _ in range(int(rng.integers(1, 40))):
                if rng.random() < 0.1:
                    t += 3.0
                ids.append(f"e{e}@{int(t * 1000):08d}")
                probs.append(rng.random(4))
                spans.append((t, t + 3.0))
                sids.append(f"e{e}")
                t += 3.0
        preds = PredictionSet(ids, np.array(probs), np.zeros((len(ids), 4), int), np.array(spans), sids)
        tl = stitch_timeline(preds, 0.5, 0.0)
        overlaps += len(check_exclusion(tl.segments))
        flagged = {v.clip_id for v in tl.violations}
        violations += len(flagged)
        back, hard = rewindow(tl.segments, preds), preds.hard(0.5)
        mismatches += sum(not np.array_equal(back[i], hard[i]) for i, c in enumerate(ids) if c not in flagged)
    report(10, mismatches == 0 and overlaps == 0,
           f"200 sets, {mismatches} mismatches outside {violations} logged violation windows, "
           f"{overlaps} vent/suct overlaps")
