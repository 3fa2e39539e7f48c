"""Central-difference gradient checking shared by the test modules."""

import numpy as np

from recmem import numerics as nx

H = 1e-6


def numeric_grad(f, arrays, i):
    """d f / d arrays[i] by central differences; ``f`` maps arrays -> float."""
    base = [a.copy() for a in arrays]
    g = np.zeros_like(base[i])
    it = np.nditer(base[i], flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        plus = [a.copy() for a in base]
        minus = [a.copy() for a in base]
        plus[i][idx] += H
        minus[i][idx] -= H
        g[idx] = (f(plus) - f(minus)) / (2 * H)
    return g


def tape_grads(build, arrays):
    params = [nx.Tensor(a, requires_grad=True) for a in arrays]
    with nx.Tape() as tape:
        loss = build(params)
    return tape.backward(loss, params)


def max_rel_error(build, arrays):
    """Worst relative error over all inputs of a scalar-valued ``build``."""
    def f(arrs):
        return float(build([nx.Tensor(a) for a in arrs]).data)

    worst = 0.0
    for i, g in enumerate(tape_grads(build, arrays)):
        num = numeric_grad(f, arrays, i)
        denom = np.maximum(np.abs(num) + np.abs(g), 1e-6)
        worst = max(worst, float(np.max(np.abs(num - g) / denom)))
    return worst


def _weighted(out, rng):
    w = rng.uniform(-1, 1, size=out.shape)
    return nx.sum(nx.mul(out, w))


def op_cases():
    """(name, shapes, builder(params, rng) -> scalar tensor, input sampler)."""
    idx = np.array([2, 0, 2, 1])
    mask = np.tril(np.ones((4, 4), dtype=bool))
    tg = np.array([1, 0, 3])
    u = lambda rng, s: rng.uniform(-2, 2, size=s)  # noqa: E731
    pos = lambda rng, s: rng.uniform(0.1, 2, size=s)  # noqa: E731
    return [
        ("add", [(3, 4), (4,)], lambda p, r: _weighted(nx.add(*p), r), u),
        ("sub", [(3, 4), (3, 1)], lambda p, r: _weighted(nx.sub(*p), r), u),
        ("mul", [(3, 4), (3, 4)], lambda p, r: _weighted(nx.mul(*p), r), u),
        ("matmul", [(3, 4), (4, 2)], lambda p, r: _weighted(nx.matmul(*p), r), u),
        ("matmul_batched", [(2, 3, 4), (2, 4, 3)], lambda p, r: _weighted(nx.matmul(*p), r), u),
        ("matmul_shared_weight", [(2, 3, 4), (4, 5)], lambda p, r: _weighted(nx.matmul(*p), r), u),
        ("relu", [(4, 5)], lambda p, r: _weighted(nx.relu(p[0]), r), u),
        ("exp", [(4, 3)], lambda p, r: _weighted(nx.exp(p[0]), r), u),
        ("log", [(4, 3)], lambda p, r: _weighted(nx.log(p[0]), r), pos),
        ("reshape", [(2, 6)], lambda p, r: _weighted(nx.reshape(p[0], (3, 4)), r), u),
        ("transpose", [(2, 3, 4)], lambda p, r: _weighted(nx.transpose(p[0], (2, 0, 1)), r), u),
        ("take", [(3, 4)], lambda p, r: _weighted(nx.take(p[0], idx), r), u),
        ("concat", [(2, 3), (1, 3)], lambda p, r: _weighted(nx.concat(p, axis=0), r), u),
        ("embedding", [(5, 3)], lambda p, r: _weighted(nx.embedding(p[0], idx), r), u),
        ("sum", [(3, 4)], lambda p, r: _weighted(nx.sum(p[0], axis=1), r), u),
        ("mean", [(3, 4)], lambda p, r: _weighted(nx.mean(p[0], axis=0), r), u),
        ("softmax", [(3, 5)], lambda p, r: _weighted(nx.softmax(p[0], temperature=0.7), r), u),
        ("softmax_masked", [(2, 4, 4)], lambda p, r: _weighted(nx.softmax(p[0], mask=mask), r), u),
        ("log_softmax", [(3, 5)], lambda p, r: _weighted(nx.log_softmax(p[0]), r), u),
        ("layer_norm", [(3, 6), (6,), (6,)], lambda p, r: _weighted(nx.layer_norm(*p), r), u),
        ("kl_div", [(2, 5), (2, 5)],
         lambda p, r: nx.kl_div(nx.softmax(p[0]), nx.softmax(p[1])), u),
        ("cross_entropy_nll", [(3, 4)], lambda p, r: nx.cross_entropy_nll(p[0], tg), u),
    ]


def check_op(case, n_cases=20, seed=0):
    name, shapes, build, sample = case
    worst = 0.0
    for k in range(n_cases):
        rng = np.random.default_rng([seed, k])
        arrays = [sample(rng, s) for s in shapes]
        wseed = int(rng.integers(1 << 31))
        worst = max(worst, max_rel_error(lambda p: build(p, np.random.default_rng(wseed)), arrays))
    return worst
