"""Local-global balance: three-branch forward pass and the dual optimiser."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import diffengine as de
from .diffengine import Tape, Tensor
from .segmodel import (BalanceNet, ParamVector, SegNet, balance_forward, bind, decode,
                       encode, unflatten)


@dataclass(frozen=True)
class LogoState:
    local: ParamVector
    global_params: ParamVector  # frozen for the whole local update; only its encoder is used
    balance: ParamVector  # personal, never uploaded
    lr_local: float = 0.001
    lr_balance: float = 0.01
    pin: tuple[float, float] | None = None  # fixed (K_l, K_g) instead of the balancing net

    def global_net(self) -> SegNet:
        return unflatten(self.global_params, self.global_params.layout)

    def bind(self) -> "Binding":
        """Fresh differentiable leaves for the trainable parameter groups."""
        lflat = Tensor(self.local.values, requires_grad=True)
        bflat = Tensor(self.balance.values, requires_grad=True)
        return Binding(lflat, bflat, bind(lflat, self.local.layout),
                       bind(bflat, self.balance.layout), self.global_net())


@dataclass(frozen=True)
class Binding:
    local_flat: Tensor
    balance_flat: Tensor
    local: SegNet
    balance: BalanceNet
    global_net: SegNet


@dataclass(frozen=True)
class LogoOutput:
    r_local: Tensor
    r_global: Tensor
    coeffs: Tensor
    local_logits: Tensor
    blended_logits: Tensor


def blend(r_local: Tensor, r_global: Tensor, coeffs) -> Tensor:
    """``K_l * R_l + K_g * R_g`` with per-image coefficients.

    ``coeffs`` is an ``(N, 2)`` tensor, or a plain ``(K_l, K_g)`` pair applied
    to every image.
    """
    if r_local.shape != r_global.shape:
        raise de.ShapeError("blend", r_local.shape, r_global.shape)
    n = r_local.shape[0]
    if not isinstance(coeffs, Tensor):
        coeffs = Tensor(np.tile(np.asarray(coeffs, dtype=np.float64), (n, 1)))
    if coeffs.shape != (n, 2):
        raise de.ShapeError("blend", r_local.shape, coeffs.shape)
    bshape = (n,) + (1,) * (len(r_local.shape) - 1)
    k_l = de.reshape(de.pick(coeffs, np.zeros(n, np.int64)), bshape)
    k_g = de.reshape(de.pick(coeffs, np.ones(n, np.int64)), bshape)
    return de.add(de.mul(k_l, r_local), de.mul(k_g, r_global))


def coefficients(balance: BalanceNet, images, pin=None) -> Tensor:
    if pin is not None:
        n = images.shape[0]
        return Tensor(np.tile(np.asarray(pin, dtype=np.float64), (n, 1)))
    return balance_forward(balance, images)


def logo_forward(local: SegNet, global_net: SegNet, balance: BalanceNet, images,
                 pin=None) -> LogoOutput:
    """Local, frozen-global and balancing branches.

    The blended representation goes through the local decoder. It is built
    from a detached copy of R_l, so the balancing loss never reaches the local
    encoder.
    """
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.data.ndim == 3:
        x = Tensor(x.data[None])
    r_l = encode(local, x)
    r_g = de.detach(encode(global_net, x))
    k = coefficients(balance, x.data, pin)
    local_logits = decode(local, r_l)
    blended = decode(local, blend(de.detach(r_l), r_g, k))
    return LogoOutput(r_l, r_g, k, local_logits, blended)


def state_forward(state: LogoState, images) -> LogoOutput:
    return logo_forward(unflatten(state.local, state.local.layout), state.global_net(),
                        unflatten(state.balance, state.balance.layout), images, state.pin)


def _grad(tape: Tape, loss: Tensor, leaf: Tensor) -> np.ndarray:
    if loss._tape is not tape or loss.node_id is None:
        return np.zeros(leaf.shape)
    de.backward(tape, loss)
    return tape.grad(leaf)


def dual_gradients(tape: Tape, binding: Binding, loss_local: Tensor,
                   loss_balance: Tensor) -> tuple[np.ndarray, np.ndarray]:
    """``(dL_i/d local, dL_b/d balance)``; cross terms are never formed."""
    return (_grad(tape, loss_local, binding.local_flat),
            _grad(tape, loss_balance, binding.balance_flat))


def apply_dual(state: LogoState, grad_local, grad_balance) -> LogoState:
    local, balance = state.local, state.balance
    if state.lr_local > 0:
        local = local.replace(de.sgd_step(local.values, grad_local, state.lr_local))
    if state.lr_balance > 0:
        balance = balance.replace(de.sgd_step(balance.values, grad_balance, state.lr_balance))
    return replace(state, local=local, balance=balance)


def dual_update(state: LogoState, tape: Tape, binding: Binding, loss_local: Tensor,
                loss_balance: Tensor) -> LogoState:
    """Local net steps on ``grad L_i`` only, balancing net on ``grad L_b`` only.

    The global parameters are carried over untouched.
    """
    gl, gb = dual_gradients(tape, binding, loss_local, loss_balance)
    return apply_dual(state, gl, gb)
