"""Encoder, decoder, mapping, fine-tune map and classifier, plus checkpoint I/O."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .ndcore import MLP, ShapeError, make_rng, sample_standard_normal

CHECKPOINT_MAGIC = b"CFZM"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def reparameterize(mu: np.ndarray, log_variance: np.ndarray, epsilon: np.ndarray) -> np.ndarray:
    if not (mu.shape == log_variance.shape == epsilon.shape):
        raise ShapeError(f"mu {mu.shape}, log_variance {log_variance.shape}, epsilon {epsilon.shape}")
    return mu + np.exp(0.5 * log_variance) * epsilon


class ZslModel:
    """All learnable parameters of the feature generator and its helpers.

    The latent width equals the attribute width. With ``use_projection`` off
    the mapping is bypassed and the decoder reconstructs fine-tuned raw
    features, so ``d_p == d_f``.
    """

    NETWORKS = ("encoder", "decoder", "mapping", "finetune", "classifier")

    def __init__(self, d_f: int, d_a: int, d_p: int, seen_classes, hidden: int = 4096,
                 use_projection: bool = True, decoder_output: str = "relu", seed: int = 0):
        if not use_projection:
            d_p = d_f
        self.d_f, self.d_a, self.d_z, self.d_p = int(d_f), int(d_a), int(d_a), int(d_p)
        self.hidden = int(hidden)
        self.seen_classes = np.asarray(seen_classes, dtype=np.int64)
        self.use_projection = bool(use_projection)
        self.decoder_output = decoder_output
        self.finetune_enabled = False
        rng = make_rng(seed)
        self.encoder = MLP([d_f, hidden, 2 * self.d_z], ["leaky-relu", "linear"], rng)
        self.decoder = MLP([self.d_z + d_a, hidden, self.d_p], ["leaky-relu", decoder_output], rng)
        self.mapping = MLP([d_f, self.d_p], ["sigmoid"], rng)
        self.finetune_map = MLP([d_f, d_f], ["linear"])
        self.finetune_map.weights[0] = np.eye(d_f)
        self.classifier = MLP([self.d_p, self.k_seen], ["linear"], rng)
        # class matrix of the Gaussian-similarity loss, one column per seen class
        self.gauss_weights = np.zeros((d_f, self.k_seen))

    @property
    def k_seen(self) -> int:
        return int(self.seen_classes.size)

    def net(self, name: str) -> MLP:
        return self.finetune_map if name == "finetune" else getattr(self, name)

    def _check_width(self, x: np.ndarray, width: int, what: str) -> None:
        if x.ndim != 2 or x.shape[1] != width:
            raise ShapeError(f"{what} expects {width} columns, got shape {x.shape}")

    def split_latent(self, enc_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return enc_out[:, :self.d_z], enc_out[:, self.d_z:]

    def finetune(self, x: np.ndarray) -> np.ndarray:
        self._check_width(x, self.d_f, "fine-tune map")
        if not self.finetune_enabled:
            return x
        return self.finetune_map(x)

    def encode(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and log-variance for already fine-tuned features."""
        self._check_width(x, self.d_f, "encoder")
        return self.split_latent(self.encoder(x))

    def decode(self, z: np.ndarray, attributes: np.ndarray) -> np.ndarray:
        self._check_width(z, self.d_z, "decoder latent")
        self._check_width(attributes, self.d_a, "decoder attributes")
        if z.shape[0] != attributes.shape[0]:
            raise ShapeError(f"latent rows {z.shape[0]} != attribute rows {attributes.shape[0]}")
        return self.decoder(np.hstack([z, attributes]))

    def project(self, x: np.ndarray) -> np.ndarray:
        self._check_width(x, self.d_f, "mapping")
        return self.mapping(x)

    def embed(self, x: np.ndarray) -> np.ndarray:
        """Test-time path: fine-tune map, then mapping when projection is on."""
        h = self.finetune(x)
        return self.project(h) if self.use_projection else h

    def synthesize_features(self, attribute: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
        if n < 1:
            raise ValueError(f"need at least one sample, got {n}")
        attribute = np.asarray(attribute, dtype=np.float64).reshape(1, -1)
        z = sample_standard_normal(rng, n, self.d_z)
        return self.decode(z, np.repeat(attribute, n, axis=0))

    # -- checkpoint ----------------------------------------------------------------

    def blocks(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name in self.NETWORKS:
            for i, p in enumerate(self.net(name).params()):
                out.append((f"{name}.{'W' if i % 2 == 0 else 'b'}{i // 2}", p))
        out.append(("gauss_weights", self.gauss_weights))
        return out

    def manifest(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "dims": {"d_f": self.d_f, "d_p": self.d_p, "d_z": self.d_z, "d_a": self.d_a,
                     "k_seen": self.k_seen, "hidden": self.hidden},
            "use_projection": self.use_projection,
            "finetune_enabled": self.finetune_enabled,
            "decoder_output": self.decoder_output,
            "seen_classes": self.seen_classes.tolist(),
            "blocks": [{"name": n, "shape": list(p.shape)} for n, p in self.blocks()],
        }

    def to_bytes(self) -> bytes:
        head = json.dumps(self.manifest(), sort_keys=True, separators=(",", ":")).encode()
        parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(head)), head]
        parts += [np.ascontiguousarray(p, dtype="<f8").tobytes() for _, p in self.blocks()]
        return b"".join(parts)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ZslModel":
        if raw[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
        if len(raw) < 12:
            raise CheckpointError("truncated checkpoint header")
        version, head_len = struct.unpack("<II", raw[4:12])
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        try:
            man = json.loads(raw[12:12 + head_len].decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable checkpoint manifest: {exc}") from None
        dims = man["dims"]
        model = cls(dims["d_f"], dims["d_a"], dims["d_p"], man["seen_classes"], hidden=dims["hidden"],
                    use_projection=man["use_projection"], decoder_output=man["decoder_output"])
        model.finetune_enabled = man["finetune_enabled"]
        expected = model.blocks()
        if [b["name"] for b in man["blocks"]] != [n for n, _ in expected]:
            raise CheckpointError("checkpoint block list does not match the model layout")
        offset = 12 + head_len
        for spec, (name, arr) in zip(man["blocks"], expected):
            if tuple(spec["shape"]) != arr.shape:
                raise CheckpointError(f"block {name} has shape {spec['shape']}, expected {list(arr.shape)}")
            nbytes = arr.size * 8
            if offset + nbytes > len(raw):
                raise CheckpointError(f"truncated checkpoint payload at block {name}")
            arr[...] = np.frombuffer(raw, dtype="<f8", count=arr.size, offset=offset).reshape(arr.shape)
            offset += nbytes
        if offset != len(raw):
            raise CheckpointError(f"{len(raw) - offset} trailing bytes after last block")
        return model

    @classmethod
    def load(cls, path) -> "ZslModel":
        return cls.from_bytes(Path(path).read_bytes())
