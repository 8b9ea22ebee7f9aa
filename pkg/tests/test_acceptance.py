"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 6 to 10 share one desk-scale training run (an anchor plus three
derivations). It is cached in pytest's cache directory, keyed on the
package source, so repeated runs reuse it; ``pytest --cache-clear`` forces
a fresh run. Timings reported for cached runs are those measured when the
models were trained.

Run with ``pytest tests/test_acceptance.py -v``; the summary lines appear
in the "acceptance criteria" section at the end of the report.
"""

from __future__ import annotations

import hashlib
import json
import math
from fractions import Fraction
import time
from pathlib import Path

import numpy as np
import pytest

import _corpus
from conftest import ACCEPTANCE_LINES
from svrc import annealing, codec, entropy, model_io
from svrc import config as cfg
from svrc import eval as ev
from svrc import model as mdl
from svrc import numerics as nx
from svrc import quantizer as qz
from svrc.numerics import Tensor
from svrc.rangecoder import FLUSH_BYTES, range_decode, range_encode
from svrc.train import PatchDataset, refine_derivation, train_anchor

SRC = Path(mdl.__file__).parent

# desk-scale schedule (see README): anchor at lambda 0.01, derivations chained
# towards lower rates
ANCHOR_LAMBDA = 0.01
DERIVATION_LAMBDAS = (0.001, 0.0003, 0.0001)
ANCHOR_MINUTES = 30.0
DERIVATION_MINUTES = 3.0


def report(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


# ------------------------------------------------------------ helpers


def random_layer(rng: np.random.Generator, L: int) -> qz.StanhLayer:
    w = np.exp(rng.normal(0.0, 0.7, L - 1)) * rng.uniform(0.2, 3.0)
    levels = -0.5 * w.sum() + np.concatenate([[0.0], np.cumsum(w)])
    b = levels[:-1] + rng.uniform(0.05, 0.95, L - 1) * w
    return qz.StanhLayer(w, b)


def brute_force_index(value: float, boundaries: np.ndarray) -> int:
    """Index of the interval [b_{i-1}, b_i) holding value, by linear scan."""
    for i, edge in enumerate(boundaries):
        if value < edge:
            return i
    return len(boundaries)


def gradient_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst error as a fraction of the tolerance 1e-4 |numeric| + 1e-6."""
    tol = 1e-4 * np.abs(numeric) + 1e-6
    return float(np.max(np.abs(analytic - numeric) / tol, initial=0.0))


def check_function(fn, inputs: list[np.ndarray], rng: np.random.Generator, h: float = 1e-6) -> float:
    """Autodiff vs central differences for sum(R * fn(*inputs)), every input."""
    tensors = [Tensor(v.copy(), requires_grad=True) for v in inputs]
    out = fn(*tensors)
    weights = rng.normal(size=out.shape)
    nx.backward(nx.sum(out * Tensor(weights)))
    worst = 0.0
    for k, t in enumerate(tensors):

        def scalar(v, k=k):
            args = [Tensor(a) for a in inputs]
            args[k] = Tensor(v)
            with nx.no_grad():
                return float(np.sum(fn(*args).data * weights))

        numeric = nx.finite_difference_gradient(scalar, inputs[k], h)
        analytic = t.grad if t.grad is not None else np.zeros_like(inputs[k])
        worst = max(worst, gradient_error(analytic, numeric))
    return worst


def _away_from(x: np.ndarray, points, margin: float) -> np.ndarray:
    for p in points:
        near = np.abs(x - p) < margin
        x = np.where(near, p + np.sign(x - p + 1e-300) * margin * 2, x)
    return x


def primitive_cases(rng: np.random.Generator):
    """One random (function, inputs) case per primitive."""
    r = rng
    shape = tuple(int(s) for s in r.integers(1, 4, size=r.integers(1, 4)))

    def normal(*s):
        return r.normal(size=s)

    bshape = shape[-1:] if r.random() < 0.5 else (1,) * (len(shape) - 1) + shape[-1:]
    cases = {
        "add": (nx.add, [normal(*shape), normal(*bshape)]),
        "subtract": (nx.sub, [normal(*shape), normal(*bshape)]),
        "multiply": (nx.mul, [normal(*shape), normal(*bshape)]),
        "divide": (nx.div, [normal(*shape), np.sign(normal(*bshape)) * r.uniform(0.5, 2.0, bshape)]),
        "scalar_multiply": (lambda a, c=float(r.normal()): nx.scale(a, c), [normal(*shape)]),
        "tanh": (nx.tanh, [normal(*shape) * 2]),
        "exp": (nx.exp, [r.uniform(-2, 2, shape)]),
        "log": (nx.log, [r.uniform(0.2, 3.0, shape)]),
        "square": (nx.square, [normal(*shape)]),
        "sigmoid": (nx.sigmoid, [normal(*shape) * 3]),
        "softplus": (nx.softplus, [normal(*shape) * 3]),
        "normal_cdf": (nx.normal_cdf, [normal(*shape) * 2]),
        "leaky_relu": (lambda a: nx.leaky_relu(a, 0.01), [_away_from(normal(*shape), [0.0], 1e-3)]),
    }
    axis = int(r.integers(0, len(shape))) if r.random() < 0.7 else None
    keep = bool(r.random() < 0.5)
    cases["sum"] = (lambda a: nx.sum(a, axis=axis, keepdims=keep), [normal(*shape)])
    cases["mean"] = (lambda a: nx.mean(a, axis=axis, keepdims=keep), [normal(*shape)])

    lo, hi = -0.5, 0.7
    cases["clamp"] = (lambda a: nx.clamp(a, lo, hi), [_away_from(normal(*shape), [lo, hi], 1e-3)])
    # below the bound the upstream weight is what decides the gradient; the
    # checker draws weights of both signs, so only points above it are used
    bound = -0.3
    cases["lower_bound"] = (
        lambda a: nx.lower_bound(a, bound),
        [bound + 1e-3 + np.abs(normal(*shape))],
    )
    mask = r.random(shape) < 0.5
    cases["where"] = (lambda a, b: nx.where(mask, a, b), [normal(*shape), normal(*shape)])
    n = int(r.integers(2, 8))
    idx = r.integers(0, n, size=int(r.integers(1, 12)))
    cases["take"] = (lambda a: nx.take(a, idx), [normal(n)])
    sl = tuple(slice(int(r.integers(0, s)), None) for s in shape)
    cases["getitem"] = (lambda a: nx.getitem(a, sl), [normal(*shape)])
    cat_axis = int(r.integers(0, len(shape)))
    other = list(shape)
    other[cat_axis] = int(r.integers(1, 4))
    cases["concat"] = (lambda a, b: nx.concat([a, b], axis=cat_axis), [normal(*shape), normal(*other)])
    cases["cumsum"] = (nx.cumsum, [normal(int(r.integers(1, 10)))])
    new_shape = (-1,) if r.random() < 0.5 else (1, -1)
    cases["reshape"] = (lambda a: nx.reshape(a, new_shape), [normal(*shape)])
    perm = tuple(int(i) for i in r.permutation(len(shape)))
    cases["transpose"] = (lambda a: nx.transpose(a, perm), [normal(*shape)])
    m, k, p = (int(v) for v in r.integers(1, 5, 3))
    batch = (int(r.integers(1, 3)),) if r.random() < 0.5 else ()
    cases["matmul"] = (nx.matmul, [normal(*batch, m, k), normal(k, p)])

    ks = int(r.choice([1, 3, 5]))
    stride = int(r.integers(1, 3))
    pad = int(r.integers(0, ks // 2 + 1))
    cin, cout = (int(v) for v in r.integers(1, 4, 2))
    size = int(r.integers(ks, ks + 5))
    cases["conv2d"] = (
        lambda x, w, b: nx.conv2d(x, w, b, stride=stride, padding=pad),
        [normal(int(r.integers(1, 3)), cin, size, size + 1), normal(cout, cin, ks, ks), normal(cout)],
    )
    out_pad = int(r.integers(0, stride))
    hs = int(r.integers(1, 5))
    cases["conv_transpose2d"] = (
        lambda x, w, b: nx.conv_transpose2d(x, w, b, stride, pad, out_pad),
        [normal(int(r.integers(1, 3)), cin, hs, hs + 1), normal(cin, cout, ks, ks), normal(cout)],
    )
    return cases


def tiny_loss_case(rng: np.random.Generator):
    """A small codec with a random image; returns (state, loss_fn).

    Central differences only agree with the gradient at smooth points. The
    sigma and probability floors use a gradient surrogate when active, and
    leaky ReLU has a kink at zero, so each case is checked and redrawn when a
    floor is active or an activation input lies within 10 steps of its kink.
    """
    model = mdl.new_anchor(M=2, N=2, levels_main=8, levels_hyper=6, init_range=4.0, seed=int(rng.integers(2**31)))
    params = {k: v.copy() for k, v in model.params.items()}
    params["h_s.1.bias"][model.M :] += 3.0
    raw = {}
    for name, layer in (("main", model.stanh_main), ("hyper", model.stanh_hyper)):
        raw[f"{name}.raw_w"], raw[f"{name}.raw_f"] = layer.to_raw()
    state = {**{f"p.{k}": v for k, v in params.items()}, **{f"f.{k}": v for k, v in model.factorized.params.items()}, **raw}
    x = rng.random((1, 3, 64, 64))
    beta_m, beta_h = rng.uniform(1.0, 10.0, 2)
    lam = 0.01 * mdl.PIXEL_SCALE2

    def forward(tensors):
        p = {k[2:]: t for k, t in tensors.items() if k.startswith("p.")}
        f = {k[2:]: t for k, t in tensors.items() if k.startswith("f.")}
        layers = (
            qz.layer_tensors(tensors["main.raw_w"], tensors["main.raw_f"]),
            qz.layer_tensors(tensors["hyper.raw_w"], tensors["hyper.raw_f"]),
        )
        res = mdl.forward_train(x, model, beta_m, beta_h, p, f, layers)
        return res, layers, p, f

    def smooth_point(tensors, margin: float = 1e-5) -> bool:
        """True when no floor is active and no activation input is near its kink."""
        inputs = []
        relu = nx.leaky_relu

        def recording(a, slope=mdl.LEAKY_SLOPE):
            inputs.append(float(np.min(np.abs(a.data))))
            return relu(a, slope)

        nx.leaky_relu = recording
        try:
            with nx.no_grad():
                res, layers, _, f = forward(tensors)
        finally:
            nx.leaky_relu = relu
        with nx.no_grad():
            _, left_m, right_m = qz.bound_tensors(*layers[0])
            edges = entropy.interval_edges(res.y_soft, res.y_idx, left_m, right_m)
            p_y = entropy.gaussian_likelihood(edges, res.mu, res.sigma).data
            _, left_h, right_h = qz.bound_tensors(*layers[1])
            zc = entropy.channels_first(res.z_soft)
            idx = np.moveaxis(res.z_idx, 1, 0).reshape(model.N, -1)
            p_z = model.factorized.likelihood(entropy.interval_edges(zc, idx, left_h, right_h), f).data
        floors_off = res.sigma.data.min() > 1.01 * entropy.SIGMA_LOWER_BOUND and min(p_y.min(), p_z.min()) > 2 * entropy.P_MIN
        return bool(floors_off and min(inputs) > margin)

    def loss(tensors):
        res, _, _, _ = forward(tensors)
        return mdl.rd_loss(x, res.x_hat, res.rate_z, res.rate_y, lam)

    return state, loss, smooth_point


# ------------------------------------------------------------ 1 to 5


def test_criterion_1_quantizer_exactness():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    pairs = mismatches = soft_checked = 0
    soft_worst = 0.0
    for _ in range(100):
        layer = random_layer(rng, int(rng.integers(2, 81)))
        levels = layer.levels
        span = levels[-1] - levels[0] + 2.0
        y = rng.uniform(levels[0] - span * 0.1, levels[-1] + span * 0.1, 100)
        y[:5] = layer.b[rng.integers(0, layer.b.size, 5)]  # exact boundary hits
        values, idx = qz.hard_quantize(y, layer)
        oracle = np.array([brute_force_index(v, layer.b) for v in y])
        mismatches += int(np.sum(idx != oracle)) + int(np.sum(values != levels[oracle]))
        pairs += y.size
        far = np.min(np.abs(y[:, None] - layer.b[None, :]), axis=1) >= 0.05
        soft = qz.soft_quantize(Tensor(y), layer, 1e4).data
        soft_checked += int(far.sum())
        soft_worst = max(soft_worst, float(np.max(np.abs(soft - values)[far], initial=0.0)))
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and soft_worst <= 1e-6 and elapsed < 5.0 and pairs == 10_000
    report(
        1, ok,
        f"{pairs} pairs, {mismatches} hard mismatches; soft-hard max {soft_worst:.1e} over {soft_checked} points; "
        f"{elapsed:.2f} s",
    )
    assert ok


def test_criterion_2_gradient_suite():
    rng = np.random.default_rng(202)
    start = time.perf_counter()
    worst: dict[str, float] = {}
    cases = 100

    for _ in range(cases):
        for name, (fn, inputs) in primitive_cases(rng).items():
            worst[name] = max(worst.get(name, 0.0), check_function(fn, inputs, rng))

    # STanH forward: analytic gradients for y, w and b
    for _ in range(cases):
        layer = random_layer(rng, int(rng.integers(2, 30)))
        beta = float(rng.uniform(0.5, 20.0))
        y = rng.uniform(layer.levels[0] - 1, layer.levels[-1] + 1, 20)
        upstream = rng.normal(size=y.shape)
        gy, gw, gb = qz.stanh_gradients(y, layer, beta, upstream)

        def f(y_, w_, b_):
            return float(np.sum(upstream * qz.stanh_forward(y_, w_, b_, beta)))

        w, b = layer.w.copy(), layer.b.copy()
        num = [
            nx.finite_difference_gradient(lambda v: f(v, w, b), y, 1e-6),
            nx.finite_difference_gradient(lambda v: f(y, v, b), w, 1e-6),
            nx.finite_difference_gradient(lambda v: f(y, w, v), b, 1e-6),
        ]
        err = max(gradient_error(a, n) for a, n in zip((gy, gw, gb), num))
        worst["stanh (y, w, b)"] = max(worst.get("stanh (y, w, b)", 0.0), err)

    # Gaussian interval rate: values, mu, sigma and the layer's w and b
    done = 0
    while done < cases:
        layer = random_layer(rng, int(rng.integers(3, 16)))
        n = 12
        idx = rng.integers(0, layer.L, n)
        values = layer.levels[idx] + rng.normal(0, 0.05, n)
        mu = rng.normal(0, 2, n)
        sigma = rng.uniform(0.5, 3.0, n)
        grid = qz.interval_bounds(layer)
        if np.any(entropy.gaussian_interval_rate(values, mu, sigma, grid.left_bounds[idx], grid.right_bounds[idx]) < 1e-3):
            continue  # keep the probability floor inactive

        def rate(v, m, s, w, b):
            _, left, right = qz.bound_tensors(w, b)
            return entropy.gaussian_rate(v, m, s, idx, left, right)

        err = check_function(rate, [values, mu, sigma, layer.w.copy(), layer.b.copy()], rng)
        worst["gaussian rate"] = max(worst.get("gaussian rate", 0.0), err)
        done += 1

    # full RD objective through a small codec, on random coordinates
    done = resampled = 0
    while done < cases:
        state, loss_fn, smooth_point = tiny_loss_case(rng)
        tensors = {k: Tensor(v, requires_grad=True) for k, v in state.items()}
        if not smooth_point(tensors):
            resampled += 1
            continue
        nx.backward(loss_fn(tensors))
        names = sorted(state)
        picks = [(names[i], int(rng.integers(state[names[i]].size))) for i in rng.integers(0, len(names), 6)]
        analytic = np.array([tensors[k].grad.reshape(-1)[j] for k, j in picks])
        numeric = np.empty(len(picks))
        for i, (k, j) in enumerate(picks):

            def scalar(v, k=k, j=j):
                trial = {kk: Tensor(vv) for kk, vv in state.items()}
                arr = state[k].copy().reshape(-1)
                arr[j] = v[0]
                trial[k] = Tensor(arr.reshape(state[k].shape))
                with nx.no_grad():
                    return float(loss_fn(trial).data)

            numeric[i] = nx.finite_difference_gradient(scalar, np.array([state[k].reshape(-1)[j]]), 1e-6)[0]
        worst["rd objective"] = max(worst.get("rd objective", 0.0), gradient_error(analytic, numeric))
        done += 1

    elapsed = time.perf_counter() - start
    missing = set(nx.primitive_set()) - set(worst)
    bad = sorted(k for k, v in worst.items() if v > 1.0)
    ok = not bad and not missing and elapsed < 60.0
    report(
        2, ok,
        f"{len(worst)} gradient families x {cases} cases, worst error {max(worst.values()):.3f} of tolerance "
        f"(1e-4 rel + 1e-6 abs); failing: {bad or 'none'}; untested primitives: {sorted(missing) or 'none'}; "
        f"{resampled} objective cases redrawn as non-smooth; {elapsed:.1f} s",
    )
    assert ok


def test_criterion_3_level_algebra():
    rng = np.random.default_rng(303)
    example = qz.reconstruction_levels(qz.StanhLayer([1.0, 2.0, 1.0], [-1.5, 0.0, 1.5]))
    ok_example = example.tolist() == [-2.0, -1.0, 1.0, 2.0]
    # oracle: the recursion in exact rational arithmetic; every computed level
    # must sit within two roundings of the ladder's scale
    worst_ulps = 0.0
    for _ in range(1000):
        w = np.exp(rng.normal(size=int(rng.integers(1, 100))))
        level = -sum(Fraction(v) for v in w) / 2
        expected = [level]
        for v in w:
            level += Fraction(v)
            expected.append(level)
        got = qz.reconstruction_levels(qz.StanhLayer(w, np.zeros_like(w)))
        scale = np.spacing(0.5 * float(np.sum(w)))
        err = max(abs(Fraction(g) - e) for g, e in zip(got.tolist(), expected))
        worst_ulps = max(worst_ulps, float(err) / scale)
    exact = worst_ulps <= 2.0
    uni = qz.init_uniform(60, -30.0, 30.0)
    lv = qz.reconstruction_levels(uni)
    endpoints = abs(lv[0] + 30.0) <= np.spacing(30.0) and abs(lv[-1] - 30.0) <= np.spacing(30.0)
    ok = ok_example and exact and endpoints and uni.L == 60
    report(
        3, ok,
        f"(1,2,1) -> {example.tolist()}; 1000 random ladders vs exact rationals: worst {worst_ulps:.2f} ulp; "
        f"init_uniform(60,-30,30) endpoints {lv[0]!r}, {lv[-1]!r}",
    )
    assert ok


def test_criterion_4_annealing():
    rng = np.random.default_rng(404)
    # dyadic gaps keep every partial sum exact, so equality is exact
    exact = True
    for _ in range(200):
        n = int(rng.integers(2, 400))
        gaps = rng.integers(0, 4096, n) / 1024.0
        state = annealing.AnnealingState(seed=int(rng.integers(2**31)))
        for g in gaps:
            state.step(float(g))
        exact &= state.beta_max == 1.0 + annealing.DEFAULT_K * float(np.sum(gaps[1:]))
    # arbitrary real gaps agree with the closed form to rounding
    close = True
    for _ in range(200):
        gaps = rng.exponential(0.3, int(rng.integers(2, 400)))
        state = annealing.AnnealingState(K=float(rng.uniform(1, 30)), seed=1)
        for g in gaps:
            state.step(float(g))
        close &= math.isclose(state.beta_max, 1.0 + state.K * math.fsum(gaps[1:]), rel_tol=1e-12)
    first = annealing.AnnealingState(seed=5)
    beta_1 = first.step(3.7)
    k_default = annealing.DEFAULT_K == 15 and annealing.AnnealingState().K == 15
    k_default &= cfg.train_config(cfg.resolve()).K == 15
    # 10^6 draws under a growing ceiling
    state = annealing.AnnealingState(seed=9)
    gaps = rng.exponential(1e-5, 1_000_000)
    lo_ok = hi_ok = True
    for g in gaps.tolist():
        beta = state.step(g)
        lo_ok &= beta >= 1.0
        hi_ok &= beta <= state.beta_max
    ok = exact and close and beta_1 == 1.0 and first.beta_max == 1.0 and k_default and lo_ok and hi_ok
    report(
        4, ok,
        f"exact closed form (dyadic): {exact}; real gaps within 1e-12: {close}; beta_1 = {beta_1}; "
        f"K default 15: {k_default}; 10^6 draws in [1, beta_max]: {lo_ok and hi_ok} (final beta_max {state.beta_max:.2f})",
    )
    assert ok


def test_criterion_5_coding():
    rng = np.random.default_rng(505)
    failures = length_violations = 0
    worst_excess = -np.inf
    for trial in range(1000):
        L = int(rng.integers(1, 65)) if trial else 1
        precision = int(rng.integers(max(8, math.ceil(math.log2(max(L, 2)))), 17))
        n = int(rng.integers(0, 600))
        if rng.random() < 0.5:
            probs = rng.dirichlet(np.full(L, rng.uniform(0.1, 3.0)), size=1)
            counts = np.repeat(entropy.quantize_pmfs(probs, precision), n, axis=0)
        else:
            probs = rng.dirichlet(np.full(L, rng.uniform(0.1, 3.0)), size=max(n, 1))[:n]
            counts = entropy.quantize_pmfs(probs, precision) if n else np.zeros((0, L), dtype=np.int64)
        cum = np.cumsum(counts, axis=1) / float(1 << precision)
        symbols = (
            np.array([int(np.searchsorted(c, u, side="right")) for c, u in zip(cum, rng.random(n))])
            if n
            else np.zeros(0, dtype=int)
        )
        symbols = np.minimum(symbols, L - 1)
        data = range_encode(symbols, (counts, precision))
        decoded = range_decode(data, (counts, precision), n)
        failures += decoded != symbols.tolist()
        ideal = entropy.table_code_length(symbols, counts, precision) if n else 0.0
        excess = 8 * len(data) - ideal
        worst_excess = max(worst_excess, excess - 0.01 * ideal)
        length_violations += abs(excess) > 0.01 * ideal + 8 * FLUSH_BYTES
    pmf_worst = 0.0
    for _ in range(1000):
        layer = random_layer(rng, int(rng.integers(2, 80)))
        grid = qz.interval_bounds(layer)
        mu = rng.normal(0, 10, 4)
        sigma = np.exp(rng.uniform(np.log(0.05), np.log(50), 4))
        pmf = entropy.gaussian_pmf(mu, sigma, grid)
        pmf_worst = max(pmf_worst, float(np.max(np.abs(pmf.sum(axis=1) - 1.0))))
    ok = failures == 0 and length_violations == 0 and pmf_worst <= 1e-6
    report(
        5, ok,
        f"1000 round trips, {failures} failures; {length_violations} length violations "
        f"(worst excess over 1% of ideal: {worst_excess:.1f} bits, allowance {8 * FLUSH_BYTES}); "
        f"Gaussian PMF sum error max {pmf_worst:.1e}",
    )
    assert ok


# ------------------------------------------------------------ 6 to 10


def _source_key() -> str:
    h = hashlib.sha256()
    for path in sorted(SRC.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    h.update(repr((ANCHOR_LAMBDA, DERIVATION_LAMBDAS)).encode())
    h.update(Path(_corpus.__file__).read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="session")
def desk(request, tmp_path_factory):
    """Anchor plus three derivations trained at desk scale (cached)."""
    cache = Path(request.config.cache.mkdir("svrc-acceptance"))
    key = _source_key()
    registry = model_io.Registry(cache / "registry")
    record_path = cache / "record.json"
    record = json.loads(record_path.read_text()) if record_path.is_file() else {}
    ids = [f"D{i + 1}" for i in range(len(DERIVATION_LAMBDAS))]
    if record.get("key") != key:
        data_dir = tmp_path_factory.mktemp("train")
        _corpus.write_directory(_corpus.training_images(), data_dir)
        values = cfg.resolve(flags={"lambda": ANCHOR_LAMBDA})
        dataset = PatchDataset.from_directory(data_dir)
        t0 = time.perf_counter()
        anchor = train_anchor(dataset, cfg.train_config(values, anchor_id="A1"))
        anchor_seconds = time.perf_counter() - t0
        digest_before = anchor.weights_digest()
        registry.save_anchor(anchor)
        seconds, start = [], None
        for i, (did, lam) in enumerate(zip(ids, DERIVATION_LAMBDAS)):
            t0 = time.perf_counter()
            d = refine_derivation(anchor, lam, dataset, cfg.train_config(values, refine=True, seed=i), did, start=start)
            seconds.append(time.perf_counter() - t0)
            start = (d.stanh_main, d.stanh_hyper)
            registry.save_derivation(d)
        record = {
            "key": key,
            "anchor_seconds": anchor_seconds,
            "derivation_seconds": seconds,
            "digest_before": digest_before,
            "digest_after": anchor.weights_digest(),
            "cached": False,
        }
        record_path.write_text(json.dumps(record))
    else:
        record["cached"] = True
    anchor = registry.load_anchor("A1")
    derivations = [registry.load_derivation("A1", d) for d in ids]
    heldout = [(name, _corpus.to_float(im)) for name, im in _corpus.heldout_images()]
    return {"anchor": anchor, "derivations": derivations, "registry": registry, "record": record, "heldout": heldout}


def test_criterion_6_rate_fidelity(desk):
    anchor = desk["anchor"]
    rows = []
    for name, x in desk["heldout"]:
        result = codec.encode_image(x, anchor, return_details=True)
        bits_z, bits_y = mdl.estimate_bits(anchor, result.hard)
        pixels = x.shape[1] * x.shape[2]
        measured = ev.bpp(result.stream, x.shape[2], x.shape[1])
        estimate = (bits_z + bits_y) / pixels
        rows.append((name, measured, estimate, measured / estimate - 1.0))
    worst = max(abs(r[3]) for r in rows)
    ok = len(rows) == 5 and worst <= 0.03
    detail = ", ".join(f"{n} {m:.3f}/{e:.3f}" for n, m, e, _ in rows)
    report(6, ok, f"measured/estimated bpp: {detail}; worst deviation {100 * worst:.2f}% (limit 3%)")
    assert ok


def test_criterion_7_variable_rate(desk):
    anchor, derivations, record = desk["anchor"], desk["derivations"], desk["record"]
    name, x = desk["heldout"][0]
    models = [("A1", anchor, None, None)] + [
        (d.derivation_id, anchor, (d.stanh_main, d.stanh_hyper), codec.LayerRef.derivation(d.derivation_id))
        for d in derivations
    ]
    points = [ev.evaluate(a, [x], label, layers, ref) for label, a, layers, ref in models]
    rates = [p.bpp for p in points]
    quality = [p.psnr for p in points]
    rate_order = all(a > b for a, b in zip(rates, rates[1:]))
    psnr_order = all(a > b for a, b in zip(quality, quality[1:]))
    # live freeze check: a short refinement must leave the weights untouched
    digest = anchor.weights_digest()
    probe = PatchDataset([x])
    refine_derivation(anchor, 0.002, probe, cfg.train_config(cfg.resolve(), refine=True, steps=5, batch=1))
    frozen = digest == anchor.weights_digest() == record["digest_before"] == record["digest_after"]
    lambdas_ok = all(d.lam < anchor.lam for d in derivations) and all(
        a.lam > b.lam for a, b in zip(derivations, derivations[1:])
    )
    timing_ok = record["anchor_seconds"] < 60 * ANCHOR_MINUTES and all(
        s < 60 * DERIVATION_MINUTES for s in record["derivation_seconds"]
    )
    setup_ok = anchor.M == 32 and anchor.lam == ANCHOR_LAMBDA and anchor.meta["steps"] == 2000
    ok = rate_order and psnr_order and frozen and lambdas_ok and timing_ok and setup_ok
    pts = "; ".join(f"{p.label} {p.bpp:.4f} bpp {p.psnr:.2f} dB" for p in points)
    times = ", ".join(f"{s:.0f}" for s in record["derivation_seconds"])
    report(
        7, ok,
        f"on {name}: {pts}; strict bpp order {rate_order}, PSNR order {psnr_order}; anchor weights frozen {frozen}; "
        f"anchor {record['anchor_seconds'] / 60:.1f} min, derivations {times} s"
        + (" (timings from cached run)" if record["cached"] else ""),
    )
    assert ok


def test_criterion_8_interpolation(desk, tmp_path):
    anchor, (d1, d2, _) = desk["anchor"], desk["derivations"]
    registry = desk["registry"]
    name, x = desk["heldout"][0]
    ends = [
        ev.evaluate(anchor, [x], d.derivation_id, (d.stanh_main, d.stanh_hyper), codec.LayerRef.derivation(d.derivation_id))
        for d in (d1, d2)
    ]
    r1, r2 = ends[0].bpp, ends[1].bpp
    eps = 0.05 * abs(r1 - r2)
    lo, hi = min(r1, r2) - eps, max(r1, r2) + eps
    rows, decoded_ok = [], True
    for rho in np.linspace(0.1, 0.9, 9):
        ref = codec.LayerRef.interpolation(d1.derivation_id, d2.derivation_id, float(rho))
        layers = (
            qz.interpolate(d1.stanh_main, d2.stanh_main, ref.rho),
            qz.interpolate(d1.stanh_hyper, d2.stanh_hyper, ref.rho),
        )
        result = codec.encode_image(x, anchor, layers, ref, return_details=True)
        try:
            x_dec = codec.decode_image(result.stream.to_bytes(), registry)
            decoded_ok &= bool(np.array_equal(x_dec, result.x_hat))
        except Exception:  # any decode failure fails the criterion
            decoded_ok = False
        rows.append((float(rho), ev.bpp(result.stream, x.shape[2], x.shape[1])))
    inside = all(lo <= b <= hi for _, b in rows)
    ok = inside and decoded_ok and len(rows) == 9
    sweep = ", ".join(f"{b:.4f}" for _, b in rows)
    report(
        8, ok,
        f"{d1.derivation_id} {r1:.4f} -> {d2.derivation_id} {r2:.4f} bpp, band [{lo:.4f}, {hi:.4f}]; "
        f"rho 0.1..0.9: {sweep}; all inside {inside}; all decoded bitwise {decoded_ok}",
    )
    assert ok


def test_criterion_9_interval_analysis(desk):
    anchor, derivations = desk["anchor"], desk["derivations"]
    lowest = min(derivations, key=lambda d: d.lam)
    main = ev.interval_report({"anchor": anchor.stanh_main, "lowest": lowest.stanh_main}, 1)
    hyper = ev.interval_report({"anchor": anchor.stanh_hyper, "lowest": lowest.stanh_hyper}, 1)
    a, d = main.central_width("anchor"), main.central_width("lowest")
    ok = d >= a
    report(
        9, ok,
        f"main latent central width: anchor {a:.4f}, {lowest.derivation_id} (lambda {lowest.lam}) {d:.4f}; "
        f"hyper latent for reference: {hyper.central_width('anchor'):.4f} vs {hyper.central_width('lowest'):.4f}",
    )
    assert ok


def test_criterion_10_storage(desk):
    registry, anchor = desk["registry"], desk["anchor"]
    d = desk["derivations"][0]
    dpath = registry.derivation_path("A1", d.derivation_id)
    apath = registry.anchor_path("A1")
    data = dpath.read_bytes()
    loaded = model_io.derivation_from_bytes(data)
    Lm, Lh = anchor.stanh_main.L, anchor.stanh_hyper.L
    expected_params = 2 * (Lm - 1) + 2 * (Lh - 1)
    stored = loaded.stanh_main.w.size + loaded.stanh_main.b.size + loaded.stanh_hyper.w.size + loaded.stanh_hyper.b.size
    manifest_len = int.from_bytes(data[5:9], "little")
    exact_size = len(data) == 9 + manifest_len + qz.record_size(Lm) + qz.record_size(Lh)
    anchor_size = apath.stat().st_size
    a_manifest = int.from_bytes(apath.read_bytes()[5:9], "little")
    anchor_formula = anchor_size == 9 + a_manifest + 8 * mdl.parameter_count(anchor.M, anchor.N) + qz.record_size(Lm) + qz.record_size(Lh)
    kb_scale = 1000 <= len(data) <= 10_000
    ok = stored == expected_params and exact_size and kb_scale and anchor_formula and anchor_size > 100 * len(data)
    report(
        10, ok,
        f"derivation stores {stored} values = 2({Lm}-1) + 2({Lh}-1) = {expected_params}; file {len(data)} bytes "
        f"({len(data) / 1000:.2f} kB) vs anchor {anchor_size / 1e6:.2f} MB (x{anchor_size / len(data):.0f}); "
        f"size formulas exact: {exact_size and anchor_formula}",
    )
    assert ok
