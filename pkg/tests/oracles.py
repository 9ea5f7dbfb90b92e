"""Independent reference computations shared by the test modules."""

import dataclasses

import numpy as np

from rachpred.nn.model import model_step
from rachpred.nn.train import mse_loss, forward_train
from rachpred.predict import run_stream


def loss_of(params, X, Y, state=None, mask_seed=None):
    rng = None if mask_seed is None else np.random.default_rng(mask_seed)
    out, _, _ = forward_train(X, params, state, mask_seed is not None, rng)
    return mse_loss(out, Y)


def closed_loop_loss(params, X, Y, F, state, weight):
    """Teacher-forced loss plus a rollout fed back one ``model_step`` at a time."""
    outs, s = [], state.copy()
    for x in X:
        o, s = model_step(x, params, s)
        outs.append(o)
    loss = mse_loss(np.array(outs), Y)
    free, u = [], outs[-1]
    for _ in range(len(F)):
        u, s = model_step(u, params, s)
        free.append(u)
    return loss + weight * mse_loss(np.array(free), F)


def fd_gradients(params, X, Y, state=None, eps=1e-5, mask_seed=None, loss=None):
    """Central finite differences over every parameter entry.

    ``mask_seed`` replays the same dropout masks in every evaluation;
    ``loss(params)`` replaces the teacher-forced loss when given.
    """
    if loss is None:
        loss = lambda m: loss_of(m, X, Y, state, mask_seed)
    grads = {}
    for name, arr in params.named_arrays().items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            up = loss(params)
            flat[i] = keep - eps
            down = loss(params)
            flat[i] = keep
            gflat[i] = (up - down) / (2 * eps)
        grads[name] = g
    return grads


def block_rel_error(g, fd):
    scale = max(np.linalg.norm(g), np.linalg.norm(fd))
    return 0.0 if scale == 0 else float(np.linalg.norm(g - fd) / scale)


def brute_force_lead_mse(model, feats, cfg, driver, lead_time, max_value=54.0):
    """Re-run the driver with l_p = lead and align every emitted row by slot."""
    L = cfg.slots(lead_time)
    sub = dataclasses.replace(cfg, l_p=L, allow_equal=True)
    sess = run_stream(model, feats, sub, driver, max_value)
    err, n = 0.0, 0
    for k, block in enumerate(sess.output):
        last = cfg.l_hist + (k + 1) * cfg.l_f - 1
        for j in range(cfg.l_f):
            slot = last + (L - cfg.l_f + 2) + j
            if slot < len(feats):
                d = block[j] - feats[slot]
                err += float(np.sum(d * d))
                n += d.size
    return err / n
