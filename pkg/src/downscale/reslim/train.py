"""One optimisation step over a batch of (input, truth) pairs."""

from __future__ import annotations

import math

import numpy as np

from ..numerics import ops
from ..numerics.flops import flop_scope
from ..numerics.optim import AdamState, adam_step, zero_grads
from ..numerics.tensor import NonFiniteError, as_tensor, backward, debug_enabled, no_grad, set_debug
from .loss import LatWeights, TvPrior, bayesian_loss
from .model import ReslimModel, normalize_input, normalize_target, reslim_forward


class NonFiniteLoss(FloatingPointError):
    """Raised when a step produces NaN/inf; carries max |activation| per stage."""

    def __init__(self, message: str, activations: dict):
        super().__init__(message)
        self.activations = activations

    def diagnostics(self) -> str:
        rows = [f"  {name:<12} {value:.6g}" for name, value in self.activations.items()]
        return "max |activation| per stage:\n" + "\n".join(rows)


def prior_for(cfg) -> TvPrior:
    return TvPrior(cfg.tv_weight, cfg.huber_delta)


def prepare_pair(inp, truth, cfg):
    """Normalised input/target arrays plus latitude weights for the target rows."""
    return normalize_input(inp, cfg), normalize_target(truth, cfg), LatWeights.for_grid(truth)


def sample_loss(x, y, latw: LatWeights, model: ReslimModel, probe: dict = None, terms: dict = None):
    pred, _ = reslim_forward(x, model, probe)
    return bayesian_loss(pred, as_tensor(y), latw, prior_for(model.cfg), terms)


def _probe_failure(batch, model):
    probe = {}
    try:
        with np.errstate(all="ignore"):
            was = debug_enabled()
            set_debug(False)
            try:
                with no_grad():
                    x, _, _ = prepare_pair(*batch[0], model.cfg)
                    reslim_forward(x, model, probe)
            finally:
                set_debug(was)
    except Exception:  # diagnostics are best effort
        pass
    return probe


def train_step(batch, model: ReslimModel, optimizer: AdamState):
    """Backpropagate the batch-mean loss and apply one Adam update.

    Returns ``(loss, flops)``. A non-finite loss raises :class:`NonFiniteLoss`
    before any parameter is touched.
    """
    if not batch:
        raise ValueError("empty batch")
    with flop_scope() as ledger:
        try:
            total = None
            for inp, truth in batch:
                x, y, latw = prepare_pair(inp, truth, model.cfg)
                loss = sample_loss(x, y, latw, model)
                total = loss if total is None else ops.add(total, loss)
            total = ops.mul(total, 1.0 / len(batch))
        except NonFiniteError as exc:
            zero_grads(model.params)
            raise NonFiniteLoss(f"non-finite value during forward pass: {exc}",
                                _probe_failure(batch, model)) from exc
        value = float(total.data)
        if not math.isfinite(value):
            zero_grads(model.params)
            raise NonFiniteLoss(f"non-finite loss {value}", _probe_failure(batch, model))
        backward(total)
        adam_step(model.params, optimizer)
    return value, ledger


def evaluate_loss(batch, model: ReslimModel) -> float:
    with no_grad():
        vals = [float(sample_loss(*prepare_pair(i, t, model.cfg), model).data) for i, t in batch]
    return float(np.mean(vals))

