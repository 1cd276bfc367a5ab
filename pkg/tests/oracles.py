"""Independent reference implementations used by the tests."""

import numpy as np

from neoact.data import LABELS


def frame_count_labels(tracks, start_s, window_s=3.0, fps=25):
    """Count frames whose centre lies inside an annotated interval; flag at >= half the frames."""
    n_f = int(round(window_s * fps))
    first = int(round(start_s * fps))
    by = {t.label: t.intervals for t in tracks}
    flags = []
    for lab in LABELS:
        count = 0
        for k in range(first, first + n_f):
            centre_ms = (k + 0.5) * 1000.0 / fps
            if any(s <= centre_ms < e for s, e in by.get(lab, ())):
                count += 1
        flags.append(1 if 2 * count >= n_f else 0)
    return tuple(flags)


def brute_f1(pred, truth):
    """F1 per column by enumerating every clip."""
    out = []
    for c in range(truth.shape[1]):
        tp = fp = fn = 0
        for i in range(truth.shape[0]):
            p, t = bool(pred[i, c]), bool(truth[i, c])
            tp += p and t
            fp += p and not t
            fn += t and not p
        out.append(1.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
    return np.array(out)


def naive_layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def naive_mhsa(x, p, n_heads, mask=None):
    """Pre-norm attention with residual, one query/key pair at a time."""
    n, d = x.shape
    dh = d // n_heads
    h = naive_layer_norm(x, p["ln.g"], p["ln.b"])
    q = h @ p["q.w"].T + p["q.b"]
    k = h @ p["k.w"].T + p["k.b"]
    v = h @ p["v.w"].T + p["v.b"]
    ctx = np.zeros((n, d))
    for head in range(n_heads):
        sl = slice(head * dh, (head + 1) * dh)
        for i in range(n):
            keys = [j for j in range(n) if mask is None or mask[i, j]]
            scores = np.array([sum(q[i, sl][c] * k[j, sl][c] for c in range(dh)) / np.sqrt(dh) for j in keys])
            e = np.exp(scores - scores.max())
            a = e / e.sum()
            for w, j in zip(a, keys):
                ctx[i, sl] += w * v[j, sl]
    return x + ctx @ p["o.w"].T + p["o.b"]


def naive_ffn(x, p):
    h = naive_layer_norm(x, p["ln.g"], p["ln.b"]) @ p["fc1.w"].T + p["fc1.b"]
    h = 0.5 * h * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (h + 0.044715 * h ** 3)))
    return x + h @ p["fc2.w"].T + p["fc2.b"]


def naive_divided_block(x, p, T, n_p, n_heads):
    """Spatial attention frame by frame, temporal attention patch by patch, then the FFN."""
    d = x.shape[-1]
    grid = x.reshape(T, n_p, d).copy()
    sp = {k[len("space."):]: v for k, v in p.items() if k.startswith("space.")}
    tp = {k[len("time."):]: v for k, v in p.items() if k.startswith("time.")}
    fp = {k[len("ffn."):]: v for k, v in p.items() if k.startswith("ffn.")}
    for t in range(T):
        grid[t] = naive_mhsa(grid[t], sp, n_heads)
    for j in range(n_p):
        grid[:, j] = naive_mhsa(grid[:, j], tp, n_heads)
    out = grid.reshape(T * n_p, d)
    return np.stack([naive_ffn(row[None], fp)[0] for row in out])


def prediction_fixture(counts, source_id="fx"):
    """Hard-label prediction set with the given ``(tp, fp, fn)`` per class, columns built independently."""
    from neoact.evaluation import PredictionSet

    n = max(tp + fp + fn for tp, fp, fn in counts) + 1
    pred = np.zeros((n, len(counts)), dtype=int)
    truth = np.zeros((n, len(counts)), dtype=int)
    for c, (tp, fp, fn) in enumerate(counts):
        pred[:tp + fp, c] = 1
        truth[:tp, c] = 1
        truth[tp + fp:tp + fp + fn, c] = 1
    spans = np.c_[np.arange(n) * 3.0, np.arange(n) * 3.0 + 3.0]
    return PredictionSet([f"{source_id}@{i:08d}" for i in range(n)], pred.astype(float), truth, spans,
                         [source_id] * n)


# (tp, fp, fn) per class in LABELS order: ventilation, stimulation, suction, baby_on_table
TIMESFORMER_COUNTS = [(51, 49, 49), (71, 29, 29), (57, 43, 43), (99, 1, 1)]
FT_C_LORA_COUNTS = [(23, 2, 2), (79, 21, 21), (47, 3, 3), (249, 1, 1)]
ZS_B_COUNTS = [(23, 27, 27), (25, 25, 25), (19, 81, 81), (99, 1, 1)]
