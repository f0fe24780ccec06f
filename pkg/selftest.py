"""
Self-test Suites
================

Two suites run by `cli selftest`:

- gradcheck: central finite differences against the tape for every
  differentiable block, on several seeds.
- oracle: tensor ops, attention and metrics against naive loop
  implementations, and the factorised posterior against exact enumeration
  for a single agent.
"""

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd

from config import ModelConfig
from decoder import GaussianSeq, gaussian_head, squash
from evaluation import EXACT_HIT, ade, fde, rf
from map_encoder import augment_channels, conv_stack, init_map_encoder
from model import LatentFormer
from nn_blocks import (AttentionMask, attn, init_multi_head_attn, init_tdl_c, init_tdl_d, init_te_block,
                       multi_head_attn, tdl_c, tdl_d, te_block)
from scene_data import generate_intersection, intersection_mask
from tensor import ParamStore, Tensor, conv2d, gradcheck, make_rng, matmul, softmax
from training import bivariate_nll, em_loss, posterior_exact, posterior_factorized

logger = logging.getLogger(__name__)

GRAD_TOLERANCE = 1e-5
ORACLE_TOLERANCE = 1e-12
SUITES = ("gradcheck", "oracle")
GRAD_BLOCKS = ("attn", "multi_head_attn", "te_block", "tdl_d", "tdl_c", "conv_stack", "gaussian_head",
               "bivariate_nll", "em_loss")

Case = Tuple[Callable[[], Tensor], Dict[str, Tensor]]


def tiny_config(**overrides) -> ModelConfig:
    """Smallest model that still exercises every code path."""
    values = dict(d_m=8, heads=2, ffn_mult=2, encoder_blocks=1, map_blocks=1, prior_layers=1,
                  decoder_layers=1, modes=3, head_layers=2, tau=2, horizon=3, max_agents=3,
                  map_size=8, map_extent=50.0, patch_size=2, patch_stride=2, map_mode="none")
    values.update(overrides)
    return ModelConfig(**values).validate()


def tiny_scene(seed: int, n_agents: int = 2, cfg: ModelConfig = None):
    cfg = cfg or tiny_config()
    return generate_intersection(seed, n_agents, max_agents=cfg.max_agents, tau=cfg.tau, horizon=cfg.horizon)


@dataclass
class CheckResult:
    suite: str
    name: str
    seed: int
    passed: bool
    error: float
    detail: str = ""


@dataclass
class SelftestReport:
    results: List[CheckResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.results) and all(r.passed for r in self.results)

    @property
    def failures(self) -> List[CheckResult]:
        return [r for r in self.results if not r.passed]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.results])

    def to_text(self) -> str:
        frame = self.to_frame()
        table = frame.to_string(index=False, float_format=lambda v: f"{v:.2e}") if len(frame) else "(no checks)"
        verdict = "PASS" if self.passed else f"FAIL ({len(self.failures)} of {len(self.results)})"
        return f"{table}\n\nselftest {verdict} in {self.seconds:.1f}s\n"


# --------------------------------------------------------------------------
# Gradient checks
# --------------------------------------------------------------------------

def _leaf(rng: np.random.Generator, *shape, scale: float = 1.0) -> Tensor:
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def _attention_case(name: str, rng: np.random.Generator) -> Case:
    cfg = tiny_config().block_config()
    store = ParamStore()
    X, ctx, map_tokens = _leaf(rng, 4, cfg.d_m), _leaf(rng, 5, cfg.d_m), _leaf(rng, 3, cfg.d_m)
    causal = AttentionMask(np.tril(np.ones((4, 4), dtype=bool)))
    if name == "attn":
        allowed = rng.random((4, 5)) < 0.6
        allowed[:, 0] = True
        Q, K, V = _leaf(rng, 4, 3), _leaf(rng, 5, 3), _leaf(rng, 5, 2)
        mask = AttentionMask(allowed)
        return (lambda: attn(Q, K, V, mask)), {"Q": Q, "K": K, "V": V}
    if name == "multi_head_attn":
        init_multi_head_attn(store.scope("mha"), cfg, rng)
        p = store.scope("mha")
        return (lambda: multi_head_attn(X, ctx, ctx, None, p, cfg)), {"X": X, "ctx": ctx, "w_q": p["w_q"]}
    if name == "te_block":
        init_te_block(store.scope("te"), cfg, rng)
        p = store.scope("te")
        return (lambda: te_block(X, p, cfg, causal)), {"X": X, "w_v": p["attn.w_v"], "w1": p["ffn.w1"]}
    if name == "tdl_d":
        init_tdl_d(store.scope("d"), cfg, rng, with_map=True)
        p = store.scope("d")
        return (lambda: tdl_d(X, ctx, map_tokens, p, cfg, causal)), {"X": X, "ctx": ctx, "map": map_tokens,
                                                                      "gain": p["ln_ctx.gain"]}
    init_tdl_c(store.scope("c"), cfg, rng, with_map=True)
    p = store.scope("c")
    return (lambda: tdl_c(X, ctx, map_tokens, p, cfg, causal)), {"X": X, "ctx": ctx, "map": map_tokens,
                                                                  "w2": p["ffn.w2"]}


def _model_case(name: str, seed: int, rng: np.random.Generator) -> Case:
    if name == "conv_stack":
        cfg = tiny_config(map_mode="cnn")
        store = ParamStore()
        init_map_encoder(store.scope("map"), cfg, rng)
        p = store.scope("map")
        x = Tensor(augment_channels(intersection_mask(size=cfg.map_size)).data.copy(), requires_grad=True)
        tensors = {"x": x, "kernel0": p["conv0.kernel"], "kernel2": p["conv2.kernel"], "bias1": p["conv1.bias"]}
        return (lambda: conv_stack(x, p, cfg)), tensors
    if name == "gaussian_head":
        cfg = tiny_config()
        p = LatentFormer(cfg, seed=seed).params.scope("decoder")
        h = _leaf(rng, 2, cfg.horizon * 2, cfg.d_m)
        return (lambda: gaussian_head(h, p, cfg, agents=2).params), {"h": h, "w0": p["head.l0.w"],
                                                                    "w1": p["head.l1.w"]}
    if name == "bivariate_nll":
        raw = _leaf(rng, 2, 2, 3, 5, scale=0.5)
        target = rng.standard_normal((2, 3, 2))
        return (lambda: bivariate_nll(GaussianSeq(squash(raw)), target)), {"raw": raw}
    cfg = tiny_config()
    model = LatentFormer(cfg, seed=seed)
    scene = tiny_scene(seed, 2, cfg)
    q = posterior_factorized(model, scene)
    tensors = {key: model.params[key] for key in ("encoder.embed.w", "intent.readout.w2",
                                                   "decoder.embed.w", "decoder.head.l1.w")}
    return (lambda: em_loss(model, scene, q)), tensors


def grad_case(name: str, seed: int) -> Case:
    """(closure, leaf tensors) for one differentiable block under one seed."""
    if name not in GRAD_BLOCKS:
        raise KeyError(f"no gradient check named {name!r}")
    rng = make_rng(seed)
    if name in ("attn", "multi_head_attn", "te_block", "tdl_d", "tdl_c"):
        return _attention_case(name, rng)
    return _model_case(name, seed, rng)


def run_gradchecks(seeds: Sequence[int] = (0, 1, 2), max_entries: int = 12) -> List[CheckResult]:
    results = []
    for name in GRAD_BLOCKS:
        for seed in seeds:
            fn, tensors = grad_case(name, seed)
            outcome = gradcheck(fn, tensors, h=1e-5, max_entries=max_entries, seed=seed)
            results.append(CheckResult(suite="gradcheck", name=name, seed=seed,
                                       passed=outcome.passed(GRAD_TOLERANCE), error=outcome.max_rel_error,
                                       detail=f"checked={outcome.checked} skipped={outcome.skipped}"))
    return results


# --------------------------------------------------------------------------
# Naive oracles
# --------------------------------------------------------------------------

def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def naive_softmax(x: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    for i in range(x.shape[0]):
        top = max(x[i, j] for j in range(x.shape[1]) if allowed[i, j])
        total = sum(np.exp(x[i, j] - top) for j in range(x.shape[1]) if allowed[i, j])
        for j in range(x.shape[1]):
            out[i, j] = np.exp(x[i, j] - top) / total if allowed[i, j] else 0.0
    return out


def naive_conv2d(x: np.ndarray, kernels: np.ndarray, stride: int) -> np.ndarray:
    """'same' cross-correlation with explicit zero padding."""
    _, h, w = x.shape
    c_out, c_in, kh, kw = kernels.shape
    oh, ow = -(-h // stride), -(-w // stride)
    pad_h = max((oh - 1) * stride + kh - h, 0)
    pad_w = max((ow - 1) * stride + kw - w, 0)
    top, left = pad_h // 2, pad_w // 2
    out = np.zeros((c_out, oh, ow))
    for o in range(c_out):
        for r in range(oh):
            for c in range(ow):
                total = 0.0
                for i in range(c_in):
                    for u in range(kh):
                        for v in range(kw):
                            y, z = r * stride + u - top, c * stride + v - left
                            if 0 <= y < h and 0 <= z < w:
                                total += kernels[o, i, u, v] * x[i, y, z]
                out[o, r, c] = total
    return out


def naive_attn(q: np.ndarray, k: np.ndarray, v: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    scores = np.zeros((q.shape[0], k.shape[0]))
    for i in range(q.shape[0]):
        for j in range(k.shape[0]):
            scores[i, j] = sum(q[i, d] * k[j, d] for d in range(q.shape[1])) / np.sqrt(q.shape[1])
    return naive_matmul(naive_softmax(scores, allowed), v)


def _relative(actual: np.ndarray, expected: np.ndarray) -> float:
    actual, expected = np.asarray(actual, dtype=float), np.asarray(expected, dtype=float)
    return float(np.max(np.abs(actual - expected)) / max(1.0, float(np.max(np.abs(expected)))))


def _oracle(name: str, seed: int, error: float, tolerance: float = ORACLE_TOLERANCE, detail: str = "") -> CheckResult:
    return CheckResult(suite="oracle", name=name, seed=seed, passed=error <= tolerance, error=error, detail=detail)


def run_oracles(seeds: Sequence[int] = (0, 1, 2)) -> List[CheckResult]:
    results = []
    for seed in seeds:
        rng = make_rng(seed)
        a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
        results.append(_oracle("matmul", seed, _relative(matmul(a, b).data, naive_matmul(a, b))))

        logits = rng.standard_normal((4, 6))
        allowed = rng.random((4, 6)) < 0.5
        allowed[:, -1] = True
        results.append(_oracle("softmax", seed, _relative(softmax(logits, -1, allowed).data,
                                                          naive_softmax(logits, allowed))))

        x, kernels = rng.standard_normal((2, 7, 6)), rng.standard_normal((3, 2, 3, 3))
        for stride in (1, 2):
            results.append(_oracle(f"conv2d/stride{stride}", seed,
                                   _relative(conv2d(x, kernels, stride=stride).data,
                                             naive_conv2d(x, kernels, stride))))

        q, k, v = rng.standard_normal((3, 4)), rng.standard_normal((5, 4)), rng.standard_normal((5, 2))
        allowed = rng.random((3, 5)) < 0.5
        allowed[:, 0] = True
        got = attn(Tensor(q), Tensor(k), Tensor(v), AttentionMask(allowed)).data
        results.append(_oracle("attn", seed, _relative(got, naive_attn(q, k, v, allowed))))

        pred, gt = rng.standard_normal((6, 2)), rng.standard_normal((6, 2))
        steps = [np.sqrt((pred[t, 0] - gt[t, 0]) ** 2 + (pred[t, 1] - gt[t, 1]) ** 2) for t in range(6)]
        results.append(_oracle("ade", seed, abs(ade(pred, gt) - sum(steps) / len(steps))))
        results.append(_oracle("fde", seed, abs(fde(pred, gt) - steps[-1])))

        model = LatentFormer(tiny_config(), seed=seed)
        scene = tiny_scene(seed, n_agents=1)
        factorized = posterior_factorized(model, scene).q
        exact = posterior_exact(model, scene).marginals()
        identical = bool(np.array_equal(factorized, exact))
        results.append(CheckResult(suite="oracle", name="posterior/single-agent", seed=seed, passed=identical,
                                   error=float(np.max(np.abs(factorized - exact)))))

    results.append(_oracle("rf/cross-check", 0, abs(round(rf(1.81, 0.72), 2) - 2.51)))
    results.append(CheckResult(suite="oracle", name="rf/exact-hit", seed=0, passed=rf(1.0, 0.0) == EXACT_HIT,
                               error=0.0))
    return results


def run_selftest(suites: Sequence[str] = SUITES, seeds: Sequence[int] = (0, 1, 2)) -> SelftestReport:
    unknown = sorted(set(suites) - set(SUITES))
    if unknown:
        raise KeyError(f"unknown selftest suites: {', '.join(unknown)}")
    started = time.perf_counter()
    report = SelftestReport()
    if "gradcheck" in suites:
        report.results.extend(run_gradchecks(seeds))
    if "oracle" in suites:
        report.results.extend(run_oracles(seeds))
    report.seconds = time.perf_counter() - started
    for failure in report.failures:
        logger.warning(f"selftest {failure.suite}/{failure.name} seed {failure.seed} failed: "
                       f"error={failure.error:.3e} {failure.detail}")
    return report
