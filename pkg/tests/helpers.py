"""Independent oracles shared by the test modules."""
import numpy as np


def central_difference(f, arrays, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of each array (perturbed in place)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        for i in np.ndindex(a.shape):
            old = a[i]
            a[i] = old + h
            fp = f()
            a[i] = old - h
            fm = f()
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def max_rel_error(analytic, numeric, floor=1e-6):
    """Largest entrywise |a - n| / max(|a|, |n|, floor)."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        if a.size:
            denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def naive_matmul(a, b):
    n, k = len(a), len(a[0])
    m = len(b[0])
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i][t] * b[t][j]
            out[i][j] = acc
    return np.array(out)


def naive_softmax_rows(x):
    """Row-wise softmax by explicit loops (no max subtraction, small inputs only)."""
    out = np.zeros_like(x)
    for i in range(x.shape[0]):
        e = [np.exp(v) for v in x[i]]
        s = sum(e)
        out[i] = [v / s for v in e]
    return out


def small_model_case(seed, fusion=None, **switches):
    """A random tiny model plus a labelled batch, for exhaustive gradient checks."""
    from agentfuse.attention import FUSION_MODES, AgentFusionModel, Batch, ModelConfig
    from agentfuse.streams import StreamShapes

    rng = np.random.default_rng(seed)
    n_tokens = int(rng.choice([2, 3, 4]))
    heads = int(rng.choice([1, 2]))
    dim = int(rng.choice([2, 4])) * heads
    cfg = ModelConfig(
        n_tokens=n_tokens, dim=dim, heads=heads, n_agents=int(rng.integers(1, min(2, n_tokens) + 1)),
        n_classes=int(rng.integers(2, 4)), ffn_mult=2, head_hidden=3,
        fusion=fusion or str(rng.choice(FUSION_MODES)),
        caaf=switches.get("caaf", bool(rng.random() < 0.8)),
        catf=switches.get("catf", bool(rng.random() < 0.8)),
        lsas=switches.get("lsas", bool(rng.random() < 0.8)),
        alpha=float(rng.uniform(0.1, 1.0)),
    )
    shapes = StreamShapes(n_vt=3, d_vt=3, n_rt=2, d_rt=2, max_objects=2, d_cat=2)
    b = 2
    mask = np.ones((b, 2))
    mask[1, 1] = 0.0
    batch = Batch(vt=rng.standard_normal((b, 3, 3)), rt=rng.standard_normal((b, 2, 2)),
                  ls=rng.standard_normal((b, 2, 6)) * mask[..., None], ls_mask=mask,
                  labels=(rng.random((b, cfg.n_classes)) < 0.5).astype(float),
                  boxes=np.array([[0.1, 0.2, 0.5, 0.7], [0.3, 0.1, 0.9, 0.4]]))
    return AgentFusionModel(cfg, shapes, seed=seed), batch


def model_gradient_error(model, batch, h=1e-5):
    """Max relative error between backprop and central differences over every parameter entry."""
    from agentfuse import numerics

    params = model.parameters()
    analytic = numerics.grad(model.loss(batch), params)
    with numerics.no_grad():
        numeric = central_difference(lambda: model.loss(batch).item(), [p.data for p in params], h)
    return max_rel_error(analytic, numeric)


def _random_box(rng):
    xs, ys = np.sort(rng.random(2)), np.sort(rng.random(2))
    return np.array([xs[0], ys[0], xs[1], ys[1]])


def random_records(rng, n=None, n_classes=None, ties=None):
    """A random prediction set with optional score ties, empty classes and degenerate boxes."""
    from agentfuse.metrics import PredictionRecord

    n = int(rng.integers(1, 25)) if n is None else n
    n_classes = int(rng.integers(1, 6)) if n_classes is None else n_classes
    ties = bool(rng.random() < 0.5) if ties is None else ties
    records = []
    for i in rng.permutation(n):
        scores = rng.random(n_classes)
        if ties:
            scores = np.round(scores * 4) / 4
        labels = (rng.random(n_classes) < rng.uniform(0.1, 0.7)).astype(float)
        gt, pred = _random_box(rng), _random_box(rng)
        if rng.random() < 0.05:
            pred[2] = pred[0]  # zero width
        records.append(PredictionRecord(f"r{i:03d}", scores, pred, labels, gt))
    return records
