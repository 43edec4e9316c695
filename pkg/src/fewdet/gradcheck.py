"""Gradient checking: reverse-mode gradients of every differentiable
primitive, and of the full training loss on a micro model, against central
finite differences. This is the numeric gate the CLI `gradcheck` verb runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .episodes import BenchmarkSpec, generate_episode
from .model import ModelConfig, compute_loss, init_model_state
from .tensor import Tensor, finite_diff_gradient

# Test hook: set to a primitive name to flip the sign of its checked
# reverse-mode gradient, proving the harness catches a wrong derivative.
_INJECT_FAULT: str | None = None


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= self.tolerance


def _relative_error(analytic: np.ndarray, numeric: np.ndarray,
                    floor: float = 1e-2) -> float:
    """max |a - n| / (|n| + floor): with floor = atol/rtol this is the
    combined |a - n| <= atol + rtol |n| criterion expressed as a ratio."""
    denom = np.abs(numeric) + floor
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def _check(name: str, build, x: np.ndarray, rtol: float = 1e-5,
           h: float = 1e-6) -> CheckResult:
    """Compare d(sum of f)/dx between reverse mode and finite differences."""
    t = Tensor(x, requires_grad=True)
    out = build(t)
    loss = T.tsum(out) if out.size > 1 else out
    loss.backward()
    analytic = t.grad.copy()
    if _INJECT_FAULT == name:
        analytic = -analytic
    numeric = finite_diff_gradient(lambda v: T.tsum(build(v)), Tensor(x), h=h)
    return CheckResult(name, _relative_error(analytic, numeric), rtol)


def primitive_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(4, 5))
    b = rng.normal(size=(4, 5))
    m = rng.normal(size=(5, 3))
    results = [
        _check("add", lambda t: t + Tensor(b), a),
        _check("sub", lambda t: t - Tensor(b), a),
        _check("mul", lambda t: t * Tensor(b), a),
        _check("div", lambda t: t / Tensor(np.abs(b) + 1.0), a),
        _check("matmul", lambda t: T.matmul(t, Tensor(m)), a),
        _check("transpose", lambda t: T.transpose(t), a),
        _check("sum_axis", lambda t: T.tsum(t, axis=1), a),
        _check("mean", lambda t: T.tmean(t), a),
        _check("exp", lambda t: T.exp(t), a),
        _check("log", lambda t: T.log(t), np.abs(a) + 0.5),
        _check("sqrt", lambda t: T.sqrt(t), np.abs(a) + 0.5),
        _check("abs", lambda t: T.tabs(t), a + 0.37),
        _check("relu", lambda t: T.relu(t), a + 0.37),
        _check("sigmoid", lambda t: T.sigmoid(t), 3.0 * a),
        _check("softplus", lambda t: T.softplus(t), 3.0 * a),
        _check("silu", lambda t: T.silu(t), 3.0 * a),
        _check("maximum", lambda t: T.maximum(t, Tensor(b)), a),
        _check("minimum", lambda t: T.minimum(t, Tensor(b)), a),
        _check("softmax_rows", lambda t: T.softmax_rows(t) * Tensor(b), a),
        _check("concat_channels",
               lambda t: T.concat_channels(t, Tensor(b)) * 1.7, a),
        _check("concat_rows",
               lambda t: T.concat_rows([t, Tensor(b)]) * 1.3, a),
        _check("slice_rows", lambda t: T.slice_rows(t, 1, 3), a),
        _check("slice_cols", lambda t: T.slice_cols(t, 1, 4), a),
        _check("take_rows", lambda t: T.take_rows(t, [0, 2, 2, 3]), a),
    ]
    mixer = rng.normal(size=(2, 10))
    conv_bias = rng.normal(size=3)
    results.append(_check("reshape",
                          lambda t: T.reshape(t, (2, 10)) * Tensor(mixer), a))
    results.append(_check("pointwise_conv1d",
                          lambda t: T.pointwise_conv1d(t, Tensor(m), Tensor(conv_bias)),
                          a))
    w1 = rng.normal(size=(5, 7))
    b1 = rng.normal(size=7)
    w2 = rng.normal(size=(7, 5))
    b2 = rng.normal(size=5)
    results.append(_check(
        "ffn_apply",
        lambda t: T.ffn_apply(t, T.FfnParams(Tensor(w1), Tensor(b1),
                                             Tensor(w2), Tensor(b2))),
        a))
    return results


def micro_setup(seed: int = 0) -> tuple:
    """Tiny episode + model used for the full-loss gradient check."""
    spec = BenchmarkSpec(class_count=2, shots=2, capacity=3, grid_rows=2,
                         grid_cols=2, feature_dim=8, objects_min=1,
                         objects_max=1, bg_overlap=0.3, class_overlap=0.3,
                         seed=seed)
    cfg = ModelConfig(d=8, heads=2, encoder_layers=1, decoder_layers=1,
                      num_object_queries=3, n_max=3, input_dim=8,
                      num_class_embeddings=4, seed=seed)
    episode = generate_episode(spec, 0, "train")
    state = init_model_state(cfg)
    return episode, state, cfg


def full_loss_check(seed: int = 0, rtol: float = 1e-4,
                    h: float = 1e-6) -> list[CheckResult]:
    """Reverse-mode gradient of the complete training objective versus finite
    differences, for every parameter of a micro model. The bipartite matching
    is frozen at the base point (the loss is piecewise w.r.t. the matching)."""
    episode, state, cfg = micro_setup(seed)

    loss, _, diag = compute_loss(episode, state, cfg)
    loss.backward()
    match = diag["match"]
    seq_ids = diag["sequence"].class_ids

    from .set_head import GroundTruth, set_loss
    from .model import forward
    from .ood import infonce_loss

    def loss_at(name: str, values: Tensor) -> float:
        original = state.params[name]
        state.params[name] = Tensor(values.data)
        try:
            out, feats, d2 = forward(episode, state, cfg)
            gt = GroundTruth(boxes=episode.boxes, labels=episode.labels)
            total, _ = set_loss(out, gt, d2["sequence"], match, cfg.weights)
            if cfg.ood_weight > 0:
                total = total + cfg.ood_weight * infonce_loss(
                    feats, state.class_space(), seq_ids)
            return total.item()
        finally:
            state.params[name] = original

    results = []
    for name in state.names():
        param = state.params[name]
        analytic = param.grad if param.grad is not None else np.zeros_like(param.data)
        if _INJECT_FAULT == f"loss/{name}":
            analytic = -analytic
        numeric = finite_diff_gradient(lambda v, n=name: loss_at(n, v),
                                       Tensor(param.data), h=h)
        results.append(CheckResult(f"loss/{name}",
                                   _relative_error(analytic, numeric),
                                   rtol))
    return results


def run_gradcheck(seed: int = 0) -> tuple[list[CheckResult], bool]:
    results = primitive_checks(seed) + full_loss_check(seed)
    return results, all(r.ok for r in results)
