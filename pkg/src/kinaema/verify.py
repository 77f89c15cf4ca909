"""Finite-difference gradient checks for every parameterized block of a model family."""
from __future__ import annotations

import numpy as np

from kinaema.decoders import loss_mim, loss_rpe, sample_mim_mask
from kinaema.engine import tensor as T
from kinaema.engine.gradcheck import GradCheckReport, grad_check, module_params
from kinaema.engine.tensor import Tensor, precision
from kinaema.errors import ConfigError
from kinaema.memory import ODOMETRY_EMBED, FAMILIES, ModelSpec
from kinaema.model import build_model


def small_spec(family: str, seed: int = 0) -> ModelSpec:
    return ModelSpec(family=family, n_mem=4, mem_dim=16, n_read=8, read_dim=8, retina_dim=16, vis_dim=8,
                     vis_hidden=12, update_layers=1, gating_layers=2, gru_hidden=8, gru_layers=2,
                     gru_read_hidden=6, ema_size=64, t_trunc=4, query_chunks=4, decoder_blocks=2,
                     decoder_chains=2, head_hidden=8, seed=seed)


def gradient_suite(family: str, seed: int = 0, max_entries: int = 32) -> dict[str, GradCheckReport]:
    """Reports for encoders, memory update, pose decoder, masked decoder and both losses."""
    if family not in FAMILIES:
        raise ConfigError(f"unknown family {family!r}; expected one of {sorted(FAMILIES)}")
    spec = small_spec(family, seed)
    rng = np.random.default_rng(seed)
    reports: dict[str, GradCheckReport] = {}
    with precision(np.float64):
        model = build_model(spec).astype(np.float64)
        retina = Tensor(rng.normal(size=(2, spec.retina_dim)))
        odo = Tensor(rng.normal(size=(2, 4)))
        enc = model.encoder
        reports["encoders"] = grad_check(
            lambda: (enc.encode_obs(retina) ** 2).sum() + T.tanh(enc.encode_odo(odo)).sum(),
            {"retina": retina, "odometry": odo, **module_params(enc, "encoder")}, max_entries=max_entries)

        xs = [Tensor(rng.normal(size=(2, spec.vis_dim))) for _ in range(2)]
        us = [Tensor(rng.normal(size=(2, ODOMETRY_EMBED))) for _ in range(2)]
        y_shape = (2, spec.n_read if family != "trunc_hist" else spec.t_trunc, spec.token_dim)
        w = rng.normal(size=y_shape)

        def memory_loss():
            state = model.memory.init_state(2)
            for x, u in zip(xs, us):
                state = model.memory.update(state, x, u)
            return (model.memory.read(state) * w).sum()

        inputs = {"x0": xs[0], "x1": xs[1], "u0": us[0], "u1": us[1]}
        reports["memory_update"] = grad_check(memory_loss, {**inputs, **module_params(model.memory, "memory")},
                                              max_entries=max_entries)

        y = Tensor(rng.normal(size=y_shape))
        queries = Tensor(rng.normal(size=(2, 3, spec.retina_dim)))
        wp = rng.normal(size=(2, 3, 5))
        reports["rpe_decoder"] = grad_check(
            lambda: (model.predict(y, queries) * wp).sum(),
            {"y": y, "queries": queries, **module_params(model.rpe, "rpe"),
             **module_params(model.query_encoder, "query")}, max_entries=max_entries)

        mask = sample_mim_mask(rng, (2, 3), spec.query_chunks, 0.5)
        target = rng.normal(size=(2, 3, spec.query_chunks, spec.retina_dim // spec.query_chunks))
        reports["mim_decoder"] = grad_check(
            lambda: loss_mim(model.reconstruct(y, queries, mask), target, mask),
            {"y": y, "queries": queries, **module_params(model.mim, "mim"),
             **module_params(model.query_encoder, "query")}, max_entries=max_entries)

        preds = Tensor(rng.normal(size=(4, 5)))
        # keep every residual well away from the L1 kink
        targets = preds.data + rng.choice([-1.0, 1.0], size=(4, 5)) * rng.uniform(0.1, 1.0, size=(4, 5))
        reports["loss_rpe"] = grad_check(lambda: loss_rpe(preds, targets), {"preds": preds},
                                         max_entries=max_entries)
    return reports
