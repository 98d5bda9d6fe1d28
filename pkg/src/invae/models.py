"""Encoder/decoder architectures and checkpoint IO.

Three trainable families: a bias-free linear autoencoder, the MLP encoder
paired with a polynomial decoder (stage 1 of the polynomial pipeline), and
the bias-on stage-2 MLP autoencoder. ``OracleAutoencoder`` inverts a known
mixing exactly and serves as the feasibility witness in tests.

All forward passes are built on the autodiff tape; the ndarray-in,
ndarray-out methods wrap the same graph builders with constant leaves.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import mixing as mixing_mod
from .numcore import Node, Tape

__all__ = [
    "LinearAutoencoder",
    "MlpEncoder",
    "PolynomialDecoder",
    "PolynomialAutoencoder",
    "Stage2Autoencoder",
    "OracleAutoencoder",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
]


class CheckpointError(ValueError):
    """Checkpoint file is unreadable or inconsistent with its declared arch."""


def _init_layers(layers, seed: int) -> dict[str, np.ndarray]:
    """Uniform[-1/sqrt(fan_in), +1/sqrt(fan_in)] init, one draw per layer in order."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape, fan_in in layers:
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
    return params


class _Model:
    arch: str

    @property
    def hyper(self) -> dict:
        raise NotImplementedError

    @property
    def params(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def encode_node(self, tape: Tape, x: Node, p: dict[str, Node]) -> Node:
        raise NotImplementedError

    def decode_node(self, tape: Tape, z: Node, p: dict[str, Node]) -> Node:
        raise NotImplementedError

    def reconstruct_node(self, tape: Tape, x: Node, p: dict[str, Node]) -> Node:
        return self.decode_node(tape, self.encode_node(tape, x, p), p)

    def bind(self, tape: Tape) -> dict[str, Node]:
        return {name: tape.param(value) for name, value in self.params.items()}

    def _bind_const(self, tape: Tape) -> dict[str, Node]:
        return {name: tape.constant(value) for name, value in self.params.items()}

    def encode(self, X: np.ndarray) -> np.ndarray:
        tape = Tape()
        return self.encode_node(tape, tape.constant(X), self._bind_const(tape)).value

    def decode(self, Z: np.ndarray) -> np.ndarray:
        tape = Tape()
        return self.decode_node(tape, tape.constant(Z), self._bind_const(tape)).value

    def reconstruct(self, X: np.ndarray) -> np.ndarray:
        tape = Tape()
        return self.reconstruct_node(
            tape, tape.constant(X), self._bind_const(tape)
        ).value

    def param_count(self) -> int:
        return sum(v.size for v in self.params.values())

    def flat_params(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.params.values()])

    def set_flat_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.param_count():
            raise ValueError(
                f"flat vector of {flat.size} entries != {self.param_count()} params"
            )
        off = 0
        for v in self.params.values():
            np.copyto(v, flat[off : off + v.size].reshape(v.shape))
            off += v.size


class LinearAutoencoder(_Model):
    """Bias-free linear pair: z = x We, x_hat = z Wd."""

    arch = "linear_ae"

    def __init__(self, n: int, d: int, seed: int = 0):
        self.n = n
        self.d = d
        self._params = _init_layers(
            [("enc.W", (n, d), n), ("dec.W", (d, n), d)], seed
        )

    @property
    def hyper(self):
        return {"n": self.n, "d": self.d}

    @property
    def params(self):
        return self._params

    def encode_node(self, tape, x, p):
        return tape.matmul(x, p["enc.W"])

    def decode_node(self, tape, z, p):
        return tape.matmul(z, p["dec.W"])


class MlpEncoder(_Model):
    """Bias-free MLP n -> n/2 -> n/2 -> d with LeakyReLU(0.5) on hidden layers."""

    arch = "mlp_encoder"
    slope = 0.5

    def __init__(self, n: int, d: int, seed: int = 0):
        if n < 2:
            raise ValueError("MlpEncoder: n must be >= 2")
        self.n = n
        self.d = d
        h = n // 2
        self.h = h
        self._params = _init_layers(
            [("W1", (n, h), n), ("W2", (h, h), h), ("W3", (h, d), h)], seed
        )

    @property
    def hyper(self):
        return {"n": self.n, "d": self.d}

    @property
    def params(self):
        return self._params

    def encode_node(self, tape, x, p):
        h1 = tape.leaky_relu(tape.matmul(x, p["W1"]), self.slope)
        h2 = tape.leaky_relu(tape.matmul(h1, p["W2"]), self.slope)
        return tape.matmul(h2, p["W3"])

    def decode_node(self, tape, z, p):
        raise NotImplementedError("MlpEncoder has no decoder half")


class PolynomialDecoder(_Model):
    """x_hat = H phi(z) over the shared monomial basis; H has shape (n, D)."""

    arch = "poly_decoder"

    def __init__(self, d: int, n: int, degree: int, seed: int = 0):
        self.d = d
        self.n = n
        self.degree = degree
        self.basis = mixing_mod.get_basis(d, degree)
        D = self.basis.dim
        self._params = _init_layers([("H", (n, D), D)], seed)

    @property
    def hyper(self):
        return {"d": self.d, "n": self.n, "degree": self.degree}

    @property
    def params(self):
        return self._params

    @property
    def H(self) -> np.ndarray:
        return self._params["H"]

    def encode_node(self, tape, x, p):
        raise NotImplementedError("PolynomialDecoder has no encoder half")

    def decode_node(self, tape, z, p):
        feats = tape.monomial_map(z, self.basis)
        return tape.matmul(feats, tape.transpose(p["H"]))


class PolynomialAutoencoder(_Model):
    """Stage-1 pair for polynomial mixing: MLP encoder + polynomial decoder."""

    arch = "poly_ae"

    def __init__(self, n: int, d: int, degree: int, seed: int = 0):
        ss = np.random.SeedSequence(seed).spawn(2)
        self.encoder = MlpEncoder(n, d, seed=ss[0].generate_state(1)[0])
        self.decoder = PolynomialDecoder(d, n, degree, seed=ss[1].generate_state(1)[0])
        self.n = n
        self.d = d
        self.degree = degree

    @property
    def hyper(self):
        return {"n": self.n, "d": self.d, "degree": self.degree}

    @property
    def params(self):
        merged = {f"enc.{k}": v for k, v in self.encoder.params.items()}
        merged.update({f"dec.{k}": v for k, v in self.decoder.params.items()})
        return merged

    def encode_node(self, tape, x, p):
        sub = {k[len("enc.") :]: v for k, v in p.items() if k.startswith("enc.")}
        return self.encoder.encode_node(tape, x, sub)

    def decode_node(self, tape, z, p):
        sub = {k[len("dec.") :]: v for k, v in p.items() if k.startswith("dec.")}
        return self.decoder.decode_node(tape, z, sub)


class Stage2Autoencoder(_Model):
    """Stage-2 MLP autoencoder: d_in -> 200 -> 200 -> 200 -> d_in and a mirrored
    decoder, LeakyReLU(0.2), biases on."""

    arch = "stage2_mlp"
    slope = 0.2

    def __init__(self, d_in: int, width: int = 200, seed: int = 0):
        self.d_in = d_in
        self.width = width
        dims = [d_in, width, width, width, d_in]
        layers = []
        for half in ("enc", "dec"):
            for i in range(4):
                fan_in = dims[i]
                layers.append((f"{half}.W{i + 1}", (dims[i], dims[i + 1]), fan_in))
                layers.append((f"{half}.b{i + 1}", (dims[i + 1],), fan_in))
        self._params = _init_layers(layers, seed)

    @property
    def hyper(self):
        return {"d_in": self.d_in, "width": self.width}

    @property
    def params(self):
        return self._params

    def _half(self, tape, x, p, half):
        out = x
        for i in range(1, 5):
            out = tape.add_bias(
                tape.matmul(out, p[f"{half}.W{i}"]), p[f"{half}.b{i}"]
            )
            if i < 4:
                out = tape.leaky_relu(out, self.slope)
        return out

    def encode_node(self, tape, x, p):
        return self._half(tape, x, p, "enc")

    def decode_node(self, tape, z, p):
        return self._half(tape, z, p, "dec")


class OracleAutoencoder:
    """Exact inverse of a known polynomial mixing.

    The encoder solves the mixing's feature system in the least-squares
    sense and reads off the degree-1 block; the decoder is the mixing
    itself (H = G). On data generated by that mixing this reconstructs
    exactly and recovers the true latents.
    """

    def __init__(self, mix: mixing_mod.PolynomialMixing):
        self.mix = mix
        self._pinv = np.linalg.pinv(mix.G)

    def encode(self, X: np.ndarray) -> np.ndarray:
        feats = np.asarray(X, dtype=np.float64) @ self._pinv.T
        return feats[:, 1 : self.mix.d + 1]

    def decode(self, Z: np.ndarray) -> np.ndarray:
        return mixing_mod.apply_mixing(self.mix, Z)

    def reconstruct(self, X: np.ndarray) -> np.ndarray:
        return self.decode(self.encode(X))


_ARCHES = {
    "linear_ae": lambda h: LinearAutoencoder(h["n"], h["d"]),
    "mlp_encoder": lambda h: MlpEncoder(h["n"], h["d"]),
    "poly_decoder": lambda h: PolynomialDecoder(h["d"], h["n"], h["degree"]),
    "poly_ae": lambda h: PolynomialAutoencoder(h["n"], h["d"], h["degree"]),
    "stage2_mlp": lambda h: Stage2Autoencoder(h["d_in"], h["width"]),
}


def save_checkpoint(model: _Model, path, meta: dict | None = None) -> Path:
    """JSON checkpoint: arch tag, hyperparameters, full-precision parameters."""
    path = Path(path)
    payload = {
        "arch": model.arch,
        "hyper": model.hyper,
        "meta": meta or {},
        "params": {
            name: {"shape": list(value.shape), "values": value.ravel().tolist()}
            for name, value in model.params.items()
        },
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload))
    return path


def load_checkpoint(path) -> tuple[_Model, dict]:
    """Rebuild (model, meta) from a checkpoint written by ``save_checkpoint``."""
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise CheckpointError(
            f"checkpoint parse error at offset {err.pos}: {err.msg}"
        ) from err
    arch = payload.get("arch")
    if arch not in _ARCHES:
        raise CheckpointError(f"unknown architecture tag {arch!r}")
    try:
        model = _ARCHES[arch](payload["hyper"])
        stored = payload["params"]
        if set(stored) != set(model.params):
            raise CheckpointError(
                f"parameter names {sorted(stored)} do not match arch {arch!r}"
            )
        for name, value in model.params.items():
            entry = stored[name]
            if tuple(entry["shape"]) != value.shape:
                raise CheckpointError(
                    f"shape {entry['shape']} for {name} != expected {value.shape}"
                )
            np.copyto(value, np.asarray(entry["values"]).reshape(value.shape))
    except KeyError as err:
        raise CheckpointError(f"checkpoint missing field {err}") from err
    return model, payload.get("meta", {})
