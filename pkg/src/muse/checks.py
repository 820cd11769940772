"""Finite-difference verification suite for every differentiable op and loss.

Each op gets 100 random instances; analytic gradients must match central
differences (h = 1e-5, float64) within relative error 1e-4. The composite
checks cover the full generative loss (codes frozen, since the detach is
part of the graph's contract) and the DDPG critic loss.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor, gradcheck
from .data import make_synthetic_bars
from .model import ModalitySpec, MuseModel
from .rl import DdpgAgent, DdpgConfig
from .rng import make_rng

__all__ = ["CheckResult", "run_suite", "check_op"]

DEFAULT_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def _unary(op, positive=False, small=False):
    def build(rng, ps):
        scale = 0.5 if small else 2.0
        val = rng.normal(scale=scale, size=(3, 4))
        if positive:
            val = np.abs(val) + 0.5
        ps.create("x", val)
        return lambda p: ad.sum_(op(p["x"]))
    return build


def _binary(op):
    def build(rng, ps):
        ps.create("a", rng.normal(size=(3, 4)))
        ps.create("b", np.abs(rng.normal(size=(3, 4))) + 0.5)
        return lambda p: ad.sum_(op(p["a"], p["b"]))
    return build


def _build_matmul(rng, ps):
    ps.create("a", rng.normal(size=(3, 4)))
    ps.create("b", rng.normal(size=(4, 2)))
    return lambda p: ad.sum_(ad.matmul(p["a"], p["b"]))


def _build_bias_add(rng, ps):
    ps.create("x", rng.normal(size=(5, 3)))
    ps.create("b", rng.normal(size=(1, 3)))
    return lambda p: ad.sum_(ad.square(p["x"] + p["b"]))


def _build_concat(rng, ps):
    ps.create("a", rng.normal(size=(2, 3)))
    ps.create("b", rng.normal(size=(2, 2)))
    return lambda p: ad.sum_(ad.square(ad.concat([p["a"], p["b"]], axis=-1)))


def _build_slice(rng, ps):
    ps.create("x", rng.normal(size=(3, 6)))
    return lambda p: ad.sum_(ad.square(ad.slice_last(p["x"], 1, 4)))


def _build_logsumexp(rng, ps):
    ps.create("x", rng.normal(scale=3.0, size=(4, 5)))
    return lambda p: ad.sum_(ad.logsumexp(p["x"]))


def _build_log_softmax(rng, ps):
    ps.create("x", rng.normal(scale=2.0, size=(4, 5)))
    w = rng.normal(size=(4, 5))
    return lambda p: ad.sum_(Tensor(w) * ad.log_softmax(p["x"]))


def _build_mean_axis(rng, ps):
    ps.create("x", rng.normal(size=(4, 5)))
    return lambda p: ad.sum_(ad.square(ad.mean_(p["x"], axis=0)))


def _build_sum_axis(rng, ps):
    ps.create("x", rng.normal(size=(4, 5)))
    return lambda p: ad.sum_(ad.square(ad.sum_(p["x"], axis=-1)))


def _check_stop_gradient(n_instances: int, tol: float, seed: int) -> CheckResult:
    """Structural check: central differences see through the detach, so the
    op is verified against its contract instead. d/dx sum(sg(x) * x) must
    equal sg(x)'s value exactly, and sum(sg(x)) must yield zero gradients."""
    worst = 0.0
    for i in range(n_instances):
        rng = make_rng(seed, 0xC4EC, zlib.crc32(b"stop_gradient") & 0xFFFF, i)
        ps = ParamStore()
        ps.create("x", rng.normal(size=(3,)) + 2.0)
        bound = ps.bind()
        ad.sum_(ad.stop_gradient(bound["x"]) * bound["x"]).backward()
        err = np.abs(bound["x"].grad - bound["x"].value).max() \
            / max(np.abs(bound["x"].value).max(), 1.0)
        worst = max(worst, float(err))
        bound = ps.bind()
        ad.sum_(ad.stop_gradient(bound["x"])).backward()
        grad = bound["x"].grad
        if grad is not None and np.any(grad != 0.0):
            worst = max(worst, float(np.abs(grad).max()))
    return CheckResult("op:stop_gradient", worst, tol)


OPS = {
    "add": _binary(lambda a, b: a + b),
    "subtract": _binary(lambda a, b: a - b),
    "multiply": _binary(lambda a, b: a * b),
    "divide": _binary(lambda a, b: a / b),
    "negate": _unary(lambda x: -x),
    "exp": _unary(ad.exp, small=True),
    "log": _unary(ad.log, positive=True),
    "square": _unary(ad.square),
    "sigmoid": _unary(ad.sigmoid),
    "relu": _unary(ad.relu),
    "swish": _unary(ad.swish),
    "softplus": _unary(ad.softplus),
    "tanh": _unary(ad.tanh),
    "matmul": _build_matmul,
    "bias_broadcast_add": _build_bias_add,
    "concat": _build_concat,
    "slice": _build_slice,
    "sum_axis": _build_sum_axis,
    "mean_axis": _build_mean_axis,
    "logsumexp": _build_logsumexp,
    "log_softmax": _build_log_softmax,
}


def check_op(name: str, n_instances: int = 100, tol: float = DEFAULT_TOL,
             seed: int = 0) -> CheckResult:
    if name == "stop_gradient":
        return _check_stop_gradient(n_instances, tol, seed)
    builder = OPS[name]
    worst = 0.0
    for i in range(n_instances):
        rng = make_rng(seed, 0xC4EC, zlib.crc32(name.encode()) & 0xFFFF, i)
        ps = ParamStore()
        fn = builder(rng, ps)
        report = gradcheck(fn, ps, rng=np.random.default_rng(i), max_coords=3)
        worst = max(worst, report.max_rel_error)
    return CheckResult(f"op:{name}", worst, tol)


def check_muse_losses(tol: float = DEFAULT_TOL, seed: int = 0) -> list[CheckResult]:
    specs = [
        ModalitySpec("image", 64, "bernoulli", latent_dim=6,
                     enc_widths=(24,), dec_widths=(24,)),
        ModalitySpec("angle", 2, "gaussian", latent_dim=3,
                     enc_widths=(12,), dec_widths=(12,), lam=50.0),
    ]
    model = MuseModel(specs, top_latent_dim=4, seed=seed, top_widths=(24,))
    ds = make_synthetic_bars(2, image_size=8, seed=seed)
    batch = dict(ds.modalities)
    codes = model.sample_codes(batch, make_rng(seed, 0xC0))
    out = []
    for term in ("bottom", "top", "alma", "total"):
        def fn(bound, term=term):
            return model.loss_terms(batch, make_rng(seed, 0xC0),
                                    bound=bound, frozen_codes=codes)[term]
        rep = gradcheck(fn, model.params, rng=np.random.default_rng(seed),
                        max_coords=2)
        out.append(CheckResult(f"loss:{term}", rep.max_rel_error, tol))
    return out


def check_mlp_bernoulli(tol: float = DEFAULT_TOL, seed: int = 0) -> CheckResult:
    rng = make_rng(seed, 0x2F)
    ps = ParamStore()
    ps.create("W1", rng.normal(scale=0.5, size=(5, 16)))
    ps.create("b1", rng.normal(scale=0.1, size=(1, 16)))
    ps.create("W2", rng.normal(scale=0.5, size=(16, 3)))
    ps.create("b2", rng.normal(scale=0.1, size=(1, 3)))
    x = rng.normal(size=(6, 5))
    t = rng.uniform(0.05, 0.95, size=(6, 3))

    def fn(p):
        h = ad.swish(ad.matmul(Tensor(x), p["W1"]) + p["b1"])
        logits = ad.matmul(h, p["W2"]) + p["b2"]
        return ad.mean_(ad.sum_(ad.softplus(logits) - logits * Tensor(t), axis=-1))

    rep = gradcheck(fn, ps, rng=np.random.default_rng(seed), max_coords=4)
    return CheckResult("loss:swish_mlp_bernoulli", rep.max_rel_error, tol)


def check_ddpg_critic(tol: float = DEFAULT_TOL, seed: int = 0) -> CheckResult:
    cfg = DdpgConfig(hidden=(16, 16), seed=seed)
    agent = DdpgAgent(obs_dim=5, act_dim=1, cfg=cfg)
    rng = make_rng(seed, 0xCC)
    obs = rng.normal(size=(4, 5))
    act = rng.normal(size=(4, 1))
    targets = rng.normal(size=4)
    rep = gradcheck(lambda b: agent.critic_loss(b, obs, act, targets),
                    agent.critic, rng=np.random.default_rng(seed), max_coords=3)
    return CheckResult("loss:ddpg_critic", rep.max_rel_error, tol)


def run_suite(seed: int = 0, n_instances: int = 100) -> list[CheckResult]:
    names = list(OPS) + ["stop_gradient"]
    results = [check_op(name, n_instances=n_instances, seed=seed) for name in names]
    results.extend(check_muse_losses(seed=seed))
    results.append(check_mlp_bernoulli(seed=seed))
    results.append(check_ddpg_critic(seed=seed))
    return results
