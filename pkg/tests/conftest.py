import numpy as np
import pytest

from planrank import plan_ir


def explain_node(node_type, cost=1.0, rows=1.0, children=(), relation=None, index=None):
    """Build one node of an EXPLAIN-style JSON document."""
    obj = {"Node Type": node_type, "Total Cost": cost, "Plan Rows": rows}
    if relation is not None:
        obj["Relation Name"] = relation
    if index is not None:
        obj["Index Name"] = index
    if children:
        obj["Plans"] = list(children)
    return obj


def explain_doc(node):
    """Wrap a node the way EXPLAIN (FORMAT JSON) does."""
    return [{"Plan": node}]


OP_POOL = list(plan_ir.ONEHOT_OPERATORS) + ["Sort", "Aggregate", "Materialize", "Hash"]


def random_plan_doc(rng: np.random.Generator, max_nodes: int = 12) -> dict:
    """A random EXPLAIN-style node with arity <= 2 and plausible stats."""
    budget = int(rng.integers(1, max_nodes + 1))

    def grow(remaining: int):
        op = OP_POOL[int(rng.integers(0, len(OP_POOL)))]
        cost = float(np.round(rng.uniform(0, 1e5), 3))
        rows = float(rng.integers(0, 10**6))
        children = []
        if remaining > 1:
            arity = int(rng.integers(0, 3))
            arity = min(arity, remaining - 1)
            if arity == 1:
                children = [grow(remaining - 1)]
            elif arity == 2:
                split = int(rng.integers(1, remaining - 1)) if remaining > 2 else 1
                children = [grow(split), grow(remaining - 1 - split)]
        relation = f"rel_{rng.integers(0, 5)}" if "Scan" in op else None
        index = f"idx_{rng.integers(0, 3)}" if "Index" in op else None
        return explain_node(op, cost, rows, children, relation, index)

    return grow(budget)


def exact_plan_doc(rng: np.random.Generator, n: int) -> dict:
    """A random EXPLAIN-style node with exactly n nodes."""

    def grow(budget: int):
        op = OP_POOL[int(rng.integers(0, len(OP_POOL)))]
        cost = float(rng.uniform(0, 1e5))
        rows = float(rng.integers(0, 10**6))
        children = []
        remaining = budget - 1
        if remaining == 1:
            children = [grow(1)]
        elif remaining >= 2:
            if rng.integers(0, 2):
                children = [grow(remaining)]
            else:
                lsize = int(rng.integers(1, remaining))
                children = [grow(lsize), grow(remaining - lsize)]
        relation = f"rel_{rng.integers(0, 5)}" if "Scan" in op else None
        return explain_node(op, cost, rows, children, relation)

    return grow(n)


def standard_pairs(num_trees: int) -> list[tuple[int, int]]:
    """Comparison pairs used by the composed gradient checks."""
    pairs = [(i, i + 1) for i in range(num_trees - 1)]
    if num_trees > 2:
        pairs.append((0, num_trees - 1))
    return pairs


def composed_loss_fns(params, forest):
    """loss_and_grad closures for the scorer composed with each loss."""
    from planrank import ltr, scorer

    pairs = standard_pairs(forest.num_trees)
    targets = np.linspace(0.1, 0.9, forest.num_trees)

    def pairwise(_flat=None):
        scores, cache = scorer.forward_batch(params, forest)
        loss, dscores = ltr.pairwise_loss_and_grad(pairs, scores)
        return loss, scorer.backward_batch(params, cache, dscores)

    def listwise(_flat=None):
        scores, cache = scorer.forward_batch(params, forest)
        loss, dscores = ltr.listwise_loss_and_grad(scores)
        return loss, scorer.backward_batch(params, cache, dscores)

    def regression(_flat=None):
        scores, cache = scorer.forward_batch(params, forest)
        loss, dscores = ltr.regression_loss_and_grad(targets, scores)
        return loss, scorer.backward_batch(params, cache, dscores)

    return {"pairwise": pairwise, "listwise": listwise, "regression": regression}


def gradcheck_setup(rng, sizes, dims, min_margin=1e-3, step=1e-5, seeds=range(500)):
    """Params + packed forest on which central differences are trustworthy.

    Two float artifacts can spoil an otherwise correct check at step 1e-5:
    a rectifier pre-activation or pooling top-2 margin within the step's
    reach (the difference quotient then blends subgradients), and entries
    whose analytic gradient is (near) zero, e.g. biases that shift every
    score equally under a translation-invariant loss; there the quotient
    is rounding noise amplified by 1/(2*step) against the checker's 1e-8
    floor. The fixture retries init seeds until margins clear min_margin
    and every near-zero entry passes the checker's own error formula. A
    wrong analytic gradient fails at every seed, so bugs still surface.
    """
    from planrank import nn, plan_ir, scorer

    trees = [
        plan_ir.parse_explain(explain_doc(exact_plan_doc(rng, n))) for n in sizes
    ]
    scaler = plan_ir.fit_scaler(trees)
    encoded = [plan_ir.encode(plan_ir.binarize(t), scaler) for t in trees]
    forest = nn.pack_forest([scorer.to_tensor(e) for e in encoded])

    for seed in seeds:
        params = scorer.init_params(seed, scaler=scaler, dims=dims)
        _, cache = scorer.forward_batch(params, forest)
        kink = min(
            min(np.abs(pre).min() for pre in cache.conv_pre),
            np.abs(cache.fc1_pre).min(),
        )
        post = nn.leaky_relu(cache.conv_pre[-1])
        pool_margin = np.inf
        segs = forest.segments
        for s, e in zip(segs[:-1], segs[1:]):
            if e - s >= 2:
                top2 = np.sort(post[s:e], axis=0)[-2:]
                pool_margin = min(pool_margin, (top2[1] - top2[0]).min())
        if kink <= min_margin or pool_margin <= min_margin:
            continue
        if _small_gradients_quiet(params, forest, step):
            return params, forest
    raise RuntimeError("no init seed gave trustworthy finite differences")


def _small_gradients_quiet(params, forest, step, small=1e-5, gate=1e-4):
    flat_params = params.params_dict()
    for loss_and_grad in composed_loss_fns(params, forest).values():
        _, analytic = loss_and_grad()
        for name, arr in flat_params.items():
            a = analytic[name].reshape(-1)
            flat = arr.reshape(-1)
            for i in np.where(np.abs(a) < small)[0]:
                orig = flat[i]
                flat[i] = orig + step
                up, _ = loss_and_grad()
                flat[i] = orig - step
                down, _ = loss_and_grad()
                flat[i] = orig
                numeric = (up - down) / (2.0 * step)
                err = abs(a[i] - numeric) / max(1e-8, abs(a[i]) + abs(numeric))
                if err >= gate:
                    return False
    return True


@pytest.fixture
def rng():
    return np.random.default_rng(42)
