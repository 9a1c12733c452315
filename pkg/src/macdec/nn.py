"""Recurrent Q-network with hand-written backpropagation through time.

Architecture::

    x -> FF(in, H) -> LeakyReLU -> FF(H, H) -> LeakyReLU
      -> LSTM(H, L)
      -> FF(L, H) -> LeakyReLU -> FF(H, n_out)

Sequences are time-major ``(T, B, features)``.  A boolean ``hold`` array of
shape ``(T, B)`` freezes the recurrent state at selected steps: the LSTM
output at a held step repeats the previous one.  This lets one agent's
history stay aligned with joint boundaries while its hidden state only
advances when it actually receives a new macro-observation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

LEAKY_SLOPE = 0.01
PARAM_NAMES = ("W1", "b1", "W2", "b2", "Wx", "Wh", "bl", "W3", "b3", "W4", "b4")

CHECKPOINT_MAGIC = b"MDRQ"
CHECKPOINT_VERSION = 1


def _leaky(z):
    return np.where(z > 0, z, LEAKY_SLOPE * z)


def _leaky_grad(z):
    return np.where(z > 0, 1.0, LEAKY_SLOPE)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@njit(cache=True)
def _lstm_backward(dH, gates, tcs, c_prev, hold, WhT):
    """Gradients w.r.t. the gate pre-activations; held steps pass state gradients through."""
    T, B, L = dH.shape
    dgx = np.zeros((T, B, 4 * L))
    dh_next = np.zeros((B, L))
    dc_next = np.zeros((B, L))
    for t in range(T - 1, -1, -1):
        carry = np.zeros((B, L))
        for b in range(B):
            if hold[t, b]:
                for j in range(L):
                    carry[b, j] = dH[t, b, j] + dh_next[b, j]
                continue
            for j in range(L):
                ig = gates[t, b, j]
                fg = gates[t, b, L + j]
                cg = gates[t, b, 2 * L + j]
                og = gates[t, b, 3 * L + j]
                tc = tcs[t, b, j]
                dh = dH[t, b, j] + dh_next[b, j]
                dc = dc_next[b, j] + dh * og * (1.0 - tc * tc)
                dgx[t, b, j] = dc * cg * ig * (1.0 - ig)
                dgx[t, b, L + j] = dc * c_prev[t, b, j] * fg * (1.0 - fg)
                dgx[t, b, 2 * L + j] = dc * ig * (1.0 - cg * cg)
                dgx[t, b, 3 * L + j] = dh * tc * og * (1.0 - og)
                dc_next[b, j] = dc * fg
        dh_next = dgx[t] @ WhT + carry
    return dgx


@dataclass(frozen=True)
class Arch:
    n_in: int
    hidden: int
    lstm: int
    n_out: int

    def shapes(self) -> dict[str, tuple[int, ...]]:
        H, L = self.hidden, self.lstm
        return {
            "W1": (self.n_in, H),
            "b1": (H,),
            "W2": (H, H),
            "b2": (H,),
            "Wx": (H, 4 * L),
            "Wh": (L, 4 * L),
            "bl": (4 * L,),
            "W3": (L, H),
            "b3": (H,),
            "W4": (H, self.n_out),
            "b4": (self.n_out,),
        }


class RecurrentQNet:
    """MLP -> LSTM -> MLP value network over macro-action histories."""

    def __init__(self, n_in: int, n_out: int, hidden: int = 32, lstm: int = 32,
                 rng: np.random.Generator | int | None = None):
        self.arch = Arch(n_in, hidden, lstm, n_out)
        rng = np.random.default_rng(rng)
        fan_in = {"W1": n_in, "b1": n_in, "W2": hidden, "b2": hidden,
                  "Wx": hidden, "Wh": lstm, "bl": lstm,
                  "W3": lstm, "b3": lstm, "W4": hidden, "b4": hidden}
        self.params: dict[str, np.ndarray] = {}
        for name, shape in self.arch.shapes().items():
            bound = 1.0 / np.sqrt(fan_in[name])
            self.params[name] = rng.uniform(-bound, bound, size=shape)
        self.params["bl"][lstm:2 * lstm] += 1.0  # forget gate
        self._cache = None

    # -- construction helpers --------------------------------------------

    @classmethod
    def from_arch(cls, arch: Arch) -> "RecurrentQNet":
        net = cls.__new__(cls)
        net.arch = arch
        net.params = {k: np.zeros(s) for k, s in arch.shapes().items()}
        net._cache = None
        return net

    def clone(self) -> "RecurrentQNet":
        net = RecurrentQNet.from_arch(self.arch)
        net.copy_from(self)
        return net

    def copy_from(self, other: "RecurrentQNet") -> None:
        if other.arch != self.arch:
            raise ValueError(f"architecture mismatch: {other.arch} vs {self.arch}")
        for k in PARAM_NAMES:
            np.copyto(self.params[k], other.params[k])

    def zero_state(self, batch: int = 1) -> tuple[np.ndarray, np.ndarray]:
        L = self.arch.lstm
        return np.zeros((batch, L)), np.zeros((batch, L))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in PARAM_NAMES])

    def load_flat(self, vec: np.ndarray) -> None:
        offset = 0
        for k in PARAM_NAMES:
            p = self.params[k]
            p[...] = vec[offset:offset + p.size].reshape(p.shape)
            offset += p.size
        if offset != vec.size:
            raise ValueError(f"expected {offset} parameters, got {vec.size}")

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- forward ---------------------------------------------------------

    def forward(self, x: np.ndarray, state=None, hold: np.ndarray | None = None,
                keep_cache: bool = True):
        """Evaluate a ``(T, B, n_in)`` sequence; returns ``(q, (h, c))``.

        ``hold[t, b]`` keeps sequence ``b``'s recurrent state unchanged at step
        ``t``.  With ``keep_cache=False`` any earlier cache is left untouched.
        """
        p = self.params
        if x.ndim != 3 or x.shape[2] != self.arch.n_in:
            raise ValueError(f"expected (T, B, {self.arch.n_in}) inputs, got {x.shape}")
        T, B, _ = x.shape
        L = self.arch.lstm
        if state is None:
            state = self.zero_state(B)
        h, c = state
        if h.shape != (B, L) or c.shape != (B, L):
            raise ValueError(f"hidden state must be ({B}, {L})")
        if hold is not None:
            hold = np.asarray(hold, dtype=bool)
            if hold.shape != (T, B):
                raise ValueError(f"hold must be ({T}, {B}), got {hold.shape}")

        X = x.reshape(T * B, -1)
        z1 = X @ p["W1"] + p["b1"]
        a1 = _leaky(z1)
        z2 = a1 @ p["W2"] + p["b2"]
        a2 = _leaky(z2)
        gx = (a2 @ p["Wx"] + p["bl"]).reshape(T, B, 4 * L)

        Wh = p["Wh"]
        gates = np.empty((T, B, 4 * L))
        tcs = np.empty((T, B, L))
        hs = np.empty((T, B, L))
        h_prev = np.empty((T, B, L))
        c_prev = np.empty((T, B, L))
        for t in range(T):
            h_prev[t] = h
            c_prev[t] = c
            a = gx[t] + h @ Wh
            g = gates[t]
            g[:, :2 * L] = _sigmoid(a[:, :2 * L])
            g[:, 2 * L:3 * L] = np.tanh(a[:, 2 * L:3 * L])
            g[:, 3 * L:] = _sigmoid(a[:, 3 * L:])
            c_new = g[:, L:2 * L] * c + g[:, :L] * g[:, 2 * L:3 * L]
            tc = np.tanh(c_new)
            h_new = g[:, 3 * L:] * tc
            if hold is not None and hold[t].any():
                keep = hold[t][:, None]
                c_new = np.where(keep, c, c_new)
                h_new = np.where(keep, h, h_new)
            tcs[t] = tc
            hs[t] = h_new
            h, c = h_new, c_new

        Hf = hs.reshape(T * B, L)
        z3 = Hf @ p["W3"] + p["b3"]
        a3 = _leaky(z3)
        q = (a3 @ p["W4"] + p["b4"]).reshape(T, B, -1)
        if keep_cache:
            self._cache = dict(X=X, z1=z1, a1=a1, z2=z2, a2=a2, gates=gates, tcs=tcs,
                               h_prev=h_prev, c_prev=c_prev, Hf=Hf, z3=z3, a3=a3,
                               hold=hold, shape=(T, B))
        return q, (h, c)

    def step(self, x: np.ndarray, state):
        """One time step for a single ``(n_in,)`` input; returns ``(q, state)``."""
        p = self.params
        L = self.arch.lstm
        h, c = state
        a1 = _leaky(x @ p["W1"] + p["b1"])
        a2 = _leaky(a1 @ p["W2"] + p["b2"])
        a = a2 @ p["Wx"] + p["bl"] + h @ p["Wh"]
        s = _sigmoid(a)
        c = s[..., L:2 * L] * c + s[..., :L] * np.tanh(a[..., 2 * L:3 * L])
        h = s[..., 3 * L:] * np.tanh(c)
        q = _leaky(h @ p["W3"] + p["b3"]) @ p["W4"] + p["b4"]
        return q.reshape(-1), (h, c)

    # -- backward --------------------------------------------------------

    def backward(self, dq: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of ``sum(dq * q)`` for the cached forward pass."""
        if self._cache is None:
            raise RuntimeError("backward() needs a cached forward pass")
        cache = self._cache
        p = self.params
        T, B = cache["shape"]
        L = self.arch.lstm
        if dq.shape != (T, B, self.arch.n_out):
            raise ValueError(f"upstream gradient must be {(T, B, self.arch.n_out)}, got {dq.shape}")

        grads = {}
        D = dq.reshape(T * B, -1)
        grads["W4"] = cache["a3"].T @ D
        grads["b4"] = D.sum(0)
        dz3 = (D @ p["W4"].T) * _leaky_grad(cache["z3"])
        grads["W3"] = cache["Hf"].T @ dz3
        grads["b3"] = dz3.sum(0)
        dH = (dz3 @ p["W3"].T).reshape(T, B, L)

        hold = cache["hold"]
        if hold is None:
            hold = np.zeros((T, B), dtype=np.bool_)
        dgx = _lstm_backward(np.ascontiguousarray(dH), cache["gates"], cache["tcs"],
                             cache["c_prev"], np.ascontiguousarray(hold),
                             np.ascontiguousarray(p["Wh"].T))

        DG = dgx.reshape(T * B, 4 * L)
        grads["Wh"] = cache["h_prev"].reshape(T * B, L).T @ DG
        grads["Wx"] = cache["a2"].T @ DG
        grads["bl"] = DG.sum(0)
        dz2 = (DG @ p["Wx"].T) * _leaky_grad(cache["z2"])
        grads["W2"] = cache["a1"].T @ dz2
        grads["b2"] = dz2.sum(0)
        dz1 = (dz2 @ p["W2"].T) * _leaky_grad(cache["z1"])
        grads["W1"] = cache["X"].T @ dz1
        grads["b1"] = dz1.sum(0)
        return grads


def forward_sequence(net: RecurrentQNet, inputs: np.ndarray, h0=None,
                     mask: np.ndarray | None = None, hold: np.ndarray | None = None):
    """Forward a sequence; padded steps (``mask`` False) are fed zero input."""
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != inputs.shape[:2]:
            raise ValueError(f"mask shape {mask.shape} does not match inputs {inputs.shape[:2]}")
        inputs = inputs * mask[..., None]
    return net.forward(inputs, h0, hold=hold)


def backward_sequence(net: RecurrentQNet, upstream: np.ndarray) -> dict[str, np.ndarray]:
    return net.backward(upstream)


class Adam:
    """Adaptive-moment optimizer bound to one network's parameters."""

    def __init__(self, net: RecurrentQNet, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.net = net
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in net.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in net.params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None,
             scale: float = 1.0) -> None:
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
                raise FloatingPointError(f"non-finite gradient in {k}: {bad} bad entries")
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        step_size = lr * scale / (1.0 - b1 ** self.t)
        bc2 = 1.0 - b2 ** self.t
        for k, p in self.net.params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= step_size * m / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}


def optimizer_step(opt: Adam, grads: dict[str, np.ndarray], lr: float | None = None,
                   hysteresis_scale: float = 1.0) -> RecurrentQNet:
    if not 0.0 < hysteresis_scale <= 1.0:
        raise ValueError(f"hysteresis_scale must be in (0, 1], got {hysteresis_scale}")
    opt.step(grads, lr=lr, scale=hysteresis_scale)
    return opt.net


def copy_into_target(net: RecurrentQNet, target: RecurrentQNet) -> RecurrentQNet:
    target.copy_from(net)
    return target


# -- checkpoints ---------------------------------------------------------

_HEADER = struct.Struct("<4sI5I")


def save_checkpoint(net: RecurrentQNet, path: str | Path, meta: dict | None = None) -> Path:
    """Binary parameter blob plus a JSON sidecar (``<path>.json``)."""
    path = Path(path)
    a = net.arch
    flat = net.flat().astype("<f8")
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                          a.n_in, a.hidden, a.lstm, a.n_out, flat.size)
    path.write_bytes(header + flat.tobytes())
    sidecar = {"arch": {"n_in": a.n_in, "hidden": a.hidden, "lstm": a.lstm, "n_out": a.n_out},
               "leaky_slope": LEAKY_SLOPE, "version": CHECKPOINT_VERSION}
    if meta:
        sidecar["meta"] = meta
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def load_checkpoint(path: str | Path) -> RecurrentQNet:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint")
    magic, version, n_in, hidden, lstm, n_out, count = _HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    flat = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size)
    if flat.size != count:
        raise ValueError(f"{path}: expected {count} parameters, found {flat.size}")
    net = RecurrentQNet.from_arch(Arch(n_in, hidden, lstm, n_out))
    net.load_flat(flat.astype(np.float64))
    return net
