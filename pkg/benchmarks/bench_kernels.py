"""Compare the compiled kernels against the pure-numpy fallback.

Times the four hot kernels on training-shaped inputs plus one end-to-end
training step per backend. Run from the repo root:

    python3 benchmarks/bench_kernels.py [--repeats 50]

The pure path is selected with PPMA_PURE_PYTHON=1 in a subprocess, so both
backends run in one invocation regardless of what this process imported.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

_CHILD_FLAG = "--emit-json"


def _bench(fn, repeats: int) -> float:
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def run_backend(repeats: int) -> dict:
    from ppma import BACKEND
    from ppma.backend import kernels
    from ppma.model import VideoViT, VitConfig, patchify
    from ppma.pretrain import (MaeConfig, _batched_forward, _batched_loss,
                               normalize_targets, replicate_batch)
    from ppma import autodiff as ad
    from ppma.optim import AdamW

    rng = np.random.default_rng(0)
    results = {"backend": BACKEND}

    x = rng.standard_normal((128, 64, 64)).astype(np.float32)
    g = rng.standard_normal(x.shape).astype(np.float32)
    flat = np.ascontiguousarray(x.reshape(-1))
    gflat = np.ascontiguousarray(g.reshape(-1))
    out, cdf = kernels.gelu_forward(flat)
    results["gelu_fwd_ms"] = 1e3 * _bench(lambda: kernels.gelu_forward(flat), repeats)
    results["gelu_bwd_ms"] = 1e3 * _bench(
        lambda: kernels.gelu_backward(gflat, flat, cdf), repeats)

    x2 = np.ascontiguousarray(x.reshape(-1, 64))
    gam = np.ones(64, dtype=np.float32)
    bet = np.zeros(64, dtype=np.float32)
    _, xhat, inv_std = kernels.layer_norm_forward(x2, gam, bet, 1e-6)
    g2 = np.ascontiguousarray(g.reshape(-1, 64))
    results["ln_fwd_ms"] = 1e3 * _bench(
        lambda: kernels.layer_norm_forward(x2, gam, bet, 1e-6), repeats)
    results["ln_bwd_ms"] = 1e3 * _bench(
        lambda: kernels.layer_norm_backward(g2, xhat, inv_std, gam), repeats)

    logits = np.ascontiguousarray(rng.standard_normal((8192, 64)).astype(np.float32))
    probs = kernels.softmax_forward(logits)
    results["softmax_fwd_ms"] = 1e3 * _bench(
        lambda: kernels.softmax_forward(logits), repeats)

    p = np.ascontiguousarray(rng.standard_normal(265_000).astype(np.float64))
    grad = np.ascontiguousarray(rng.standard_normal(p.size).astype(np.float64))
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    results["adamw_ms"] = 1e3 * _bench(
        lambda: kernels.adamw_update(p, grad, m, v, 1, 1e-3, 0.9, 0.95, 1e-8, 0.05),
        repeats)

    # one reconstruction training step at desk shape (8 clips x 4 mask replicas)
    vit = VitConfig()
    model = VideoViT(vit, np.random.default_rng(0), with_decoder=True)
    opt = AdamW(model.param_list(), no_decay=model.no_decay_list())
    videos = rng.random((8, vit.frames, vit.height, vit.width, vit.channels)).astype(np.float32)
    patches = patchify(videos, vit).astype(np.float32)
    targets = normalize_targets(patches)
    cfg = MaeConfig(replicas=4)
    plans = replicate_batch(list(range(8)), cfg.replicas, np.random.default_rng(1),
                            vit.n_tokens, cfg.mask_ratio)
    row_ids = np.array([vid for vid, _ in plans])
    vis_idx = np.stack([p.visible for _, p in plans])
    mask_idx = np.stack([p.masked for _, p in plans])
    restore_idx = np.stack([p.restore_order() for _, p in plans])
    patch_rows = patches[row_ids]
    target_rows = targets[row_ids]

    def step():
        with ad.finite_checks(False):
            pred = _batched_forward(model, patch_rows, vis_idx, restore_idx)
            loss = _batched_loss(pred, target_rows, mask_idx)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()

    results["train_step_ms"] = 1e3 * _bench(step, max(3, repeats // 10))
    return results


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=50)
    parser.add_argument(_CHILD_FLAG, action="store_true", dest="emit_json",
                        help=argparse.SUPPRESS)
    args = parser.parse_args()

    if args.emit_json:
        print(json.dumps(run_backend(args.repeats)))
        return 0

    rows = []
    for pure in (0, 1):
        env = dict(os.environ, PPMA_PURE_PYTHON=str(pure))
        proc = subprocess.run(
            [sys.executable, os.path.abspath(__file__),
             "--repeats", str(args.repeats), _CHILD_FLAG],
            capture_output=True, text=True, env=env, check=True)
        rows.append(json.loads(proc.stdout.strip().splitlines()[-1]))

    keys = [k for k in rows[0] if k != "backend"]
    width = max(len(k) for k in keys)
    print(f"{'kernel':<{width}}  {rows[0]['backend']:>10}  {rows[1]['backend']:>10}  speedup")
    for k in keys:
        a, b = rows[0][k], rows[1][k]
        print(f"{k:<{width}}  {a:>8.3f}ms  {b:>8.3f}ms  {b / a:6.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
