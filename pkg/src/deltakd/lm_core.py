"""Tiny autoregressive language models supplying the four role distributions.

Two model families share one forward contract (position t's logit row
depends only on tokens <= t):

* ``TabularLM`` — an add-1-smoothed bigram table; exact, closed-form, the
  oracle companion for distillation fixed-point tests.  A trainable
  logit-table twin (``TrainableTabularLM``) exists for those tests.
* ``NeuralLM`` — a small pre-LN causal transformer on the autodiff tape;
  realistic gradient paths at desk scale.

Snapshot byte layout (little-endian throughout):

    offset  size  field
    0       8     magic  b"DKDSNAP1"
    8       2     format version (u16) = 1
    10      1     stage tag: 1=raw, 2=ft, 3=distilled
    11      1     model kind: 1=neural, 2=tabular
    12      32    vocab fingerprint (sha256 of the inventory string)
    44      4     config JSON length (u32)
    48      n     config JSON (UTF-8, sorted keys; includes the inventory)
    48+n    8     parameter count (u64)
    56+n    4*k   parameters as float32, concatenated in sorted name order
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from deltakd import autodiff as ad
from deltakd.autodiff import Tensor

PAD_ID, BOS_ID, EOS_ID, SEP_ID = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<sep>")

SNAPSHOT_MAGIC = b"DKDSNAP1"
SNAPSHOT_VERSION = 1
STAGE_TAGS = {"raw": 1, "ft": 2, "distilled": 3}
STAGE_NAMES = {v: k for k, v in STAGE_TAGS.items()}
_KIND_CODES = {"neural": 1, "tabular": 2}


class Vocab:
    """Character vocabulary with reserved PAD/BOS/EOS/SEP ids below the chars."""

    def __init__(self, inventory: str):
        if len(set(inventory)) != len(inventory):
            raise ValueError("vocabulary inventory has duplicate characters")
        self.inventory = inventory
        self.size = len(RESERVED_TOKENS) + len(inventory)
        self._char_to_id = {
            ch: len(RESERVED_TOKENS) + i for i, ch in enumerate(inventory)
        }
        self._id_to_char = {v: k for k, v in self._char_to_id.items()}

    @property
    def fingerprint(self) -> bytes:
        return hashlib.sha256(self.inventory.encode("utf-8")).digest()

    def char_id(self, ch: str) -> int:
        try:
            return self._char_to_id[ch]
        except KeyError:
            raise ValueError(f"character {ch!r} not in vocabulary") from None

    def char_of(self, token_id: int) -> str:
        try:
            return self._id_to_char[token_id]
        except KeyError:
            raise ValueError(f"token id {token_id} is reserved or out of range") from None

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and other.inventory == self.inventory


@dataclass(frozen=True)
class TokenSeq:
    """A tokenized prompt+response; prompt_len counts the conditioning prefix."""

    tokens: np.ndarray
    prompt_len: int

    def __post_init__(self):
        if self.tokens.ndim != 1:
            raise ValueError("TokenSeq.tokens must be one-dimensional")
        if not 0 <= self.prompt_len <= len(self.tokens):
            raise ValueError(
                f"prompt_len {self.prompt_len} outside [0, {len(self.tokens)}]"
            )

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class NeuralLMConfig:
    vocab_size: int
    embed_dim: int = 32
    num_layers: int = 1
    num_heads: int = 2
    context_limit: int = 64
    feedforward_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")


def _check_ids(ids: np.ndarray, vocab_size: int, context_limit: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ValueError(f"expected (batch, time) token ids, got shape {ids.shape}")
    if ids.shape[1] < 1:
        raise ValueError("empty sequence")
    if ids.shape[1] > context_limit:
        raise ValueError(
            f"sequence length {ids.shape[1]} exceeds context limit {context_limit}"
        )
    if ids.min() < 0 or ids.max() >= vocab_size:
        raise ValueError("token id out of range")
    return ids


class NeuralLM:
    """Pre-LN causal transformer; params live on the autodiff tape."""

    kind = "neural"

    def __init__(self, config: NeuralLMConfig, trainable: bool = False):
        self.config = config
        self.vocab_size = config.vocab_size
        self.context_limit = config.context_limit
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(config.seed)
        d, f, v, c = (
            config.embed_dim,
            config.feedforward_dim,
            config.vocab_size,
            config.context_limit,
        )

        def normal(shape, std):
            return Tensor(rng.normal(0.0, std, size=shape))

        self.params["tok_emb"] = normal((v, d), 0.1)
        self.params["pos_emb"] = normal((c, d), 0.1)
        for i in range(config.num_layers):
            p = f"l{i}."
            self.params[p + "ln1.g"] = Tensor(np.ones(d))
            self.params[p + "ln1.b"] = Tensor(np.zeros(d))
            for w in ("wq", "wk", "wv", "wo"):
                self.params[p + w] = normal((d, d), d**-0.5)
            for b in ("bq", "bk", "bv", "bo"):
                self.params[p + b] = Tensor(np.zeros(d))
            self.params[p + "ln2.g"] = Tensor(np.ones(d))
            self.params[p + "ln2.b"] = Tensor(np.zeros(d))
            self.params[p + "w1"] = normal((d, f), d**-0.5)
            self.params[p + "b1"] = Tensor(np.zeros(f))
            self.params[p + "w2"] = normal((f, d), f**-0.5)
            self.params[p + "b2"] = Tensor(np.zeros(d))
        self.params["lnf.g"] = Tensor(np.ones(d))
        self.params["lnf.b"] = Tensor(np.zeros(d))
        self.params["w_out"] = normal((d, v), d**-0.5)
        self.params["b_out"] = Tensor(np.zeros(v))
        self.set_trainable(trainable)

    def set_trainable(self, trainable: bool) -> None:
        self.trainable = trainable
        for p in self.params.values():
            p.requires_grad = trainable
            p.grad = None

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def forward(self, ids: np.ndarray) -> Tensor:
        cfg = self.config
        ids = _check_ids(ids, cfg.vocab_size, cfg.context_limit)
        batch, time = ids.shape
        heads = cfg.num_heads
        head_dim = cfg.embed_dim // heads
        x = ad.add(
            ad.take_rows(self.params["tok_emb"], ids),
            ad.take_rows(self.params["pos_emb"], np.arange(time)),
        )
        causal_bias = np.triu(np.full((time, time), -1e30), k=1)
        for i in range(cfg.num_layers):
            p = f"l{i}."
            h = ad.layer_norm(x, self.params[p + "ln1.g"], self.params[p + "ln1.b"])

            def split_heads(t: Tensor) -> Tensor:
                t = ad.reshape(t, (batch, time, heads, head_dim))
                return ad.transpose(t, (0, 2, 1, 3))

            q = split_heads(h @ self.params[p + "wq"] + self.params[p + "bq"])
            k = split_heads(h @ self.params[p + "wk"] + self.params[p + "bk"])
            v = split_heads(h @ self.params[p + "wv"] + self.params[p + "bv"])
            scores = ad.mul(q @ ad.transpose(k, (0, 1, 3, 2)), head_dim**-0.5)
            att = ad.softmax_last(scores + Tensor(causal_bias))
            ctx = ad.transpose(att @ v, (0, 2, 1, 3))
            ctx = ad.reshape(ctx, (batch, time, cfg.embed_dim))
            x = x + (ctx @ self.params[p + "wo"] + self.params[p + "bo"])
            h2 = ad.layer_norm(x, self.params[p + "ln2.g"], self.params[p + "ln2.b"])
            h2 = ad.gelu(h2 @ self.params[p + "w1"] + self.params[p + "b1"])
            x = x + (h2 @ self.params[p + "w2"] + self.params[p + "b2"])
        x = ad.layer_norm(x, self.params["lnf.g"], self.params["lnf.b"])
        return x @ self.params["w_out"] + self.params["b_out"]

    def config_dict(self, vocab: Vocab) -> dict:
        cfg = asdict(self.config)
        cfg["kind"] = "neural"
        cfg["vocab_inventory"] = vocab.inventory
        return cfg


class TabularLM:
    """Frozen bigram model: probability table of next-token given current token."""

    kind = "tabular"

    def __init__(self, table: np.ndarray, context_limit: int = 1 << 16):
        table = np.asarray(table, dtype=np.float64)
        if table.ndim != 2 or table.shape[0] != table.shape[1]:
            raise ValueError("tabular model needs a square (V, V) table")
        self.table = table
        self.log_table = np.log(table)
        self.vocab_size = table.shape[0]
        self.context_limit = context_limit
        self.params: dict[str, Tensor] = {}
        self.trainable = False

    def set_trainable(self, trainable: bool) -> None:
        if trainable:
            raise ValueError("count-table model is frozen; use TrainableTabularLM")

    def forward(self, ids: np.ndarray) -> Tensor:
        ids = _check_ids(ids, self.vocab_size, self.context_limit)
        return Tensor(self.log_table[ids])

    def config_dict(self, vocab: Vocab) -> dict:
        return {
            "kind": "tabular",
            "vocab_size": self.vocab_size,
            "vocab_inventory": vocab.inventory,
        }


class TrainableTabularLM:
    """Bigram student with a free logit table; full capacity over contexts."""

    kind = "tabular"

    def __init__(self, vocab_size: int, context_limit: int = 1 << 16):
        self.vocab_size = vocab_size
        self.context_limit = context_limit
        self.params = {"table": Tensor(np.zeros((vocab_size, vocab_size)), requires_grad=True)}
        self.trainable = True

    def set_trainable(self, trainable: bool) -> None:
        self.trainable = trainable
        self.params["table"].requires_grad = trainable

    def param_count(self) -> int:
        return self.vocab_size * self.vocab_size

    def forward(self, ids: np.ndarray) -> Tensor:
        ids = _check_ids(ids, self.vocab_size, self.context_limit)
        return ad.take_rows(self.params["table"], ids)


def fit_tabular(sequences, vocab_size: int) -> TabularLM:
    """Add-1-smoothed bigram conditionals from consecutive token pairs."""
    counts = np.zeros((vocab_size, vocab_size), dtype=np.float64)
    n_seq = 0
    for seq in sequences:
        seq = np.asarray(seq, dtype=np.int64)
        n_seq += 1
        np.add.at(counts, (seq[:-1], seq[1:]), 1.0)
    if n_seq == 0:
        raise ValueError("fit_tabular on an empty corpus")
    table = (counts + 1.0) / (counts.sum(axis=1, keepdims=True) + vocab_size)
    return TabularLM(table)


class TrainingDivergedError(RuntimeError):
    """Loss went non-finite; carries a diagnostic dump."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(f"{message}; diagnostics: {json.dumps(diagnostics, sort_keys=True)}")
        self.diagnostics = diagnostics


def train_step(model, batch, loss_fn, optimizer: ad.Adam, clip_norm: float = 1.0):
    """One optimizer step; mutates the model, returns (breakdown, grad_norm).

    loss_fn(model, batch) must return (scalar Tensor, LossBreakdown).
    """
    optimizer.zero_grad()
    total, breakdown = loss_fn(model, batch)
    value = total.item()
    if not np.isfinite(value):
        raise TrainingDivergedError(
            "non-finite loss",
            {
                "loss": repr(value),
                "step": optimizer.step_count,
                "param_norm": float(
                    np.sqrt(sum(float((p.data**2).sum()) for p in model.params.values()))
                ),
            },
        )
    total.backward()
    grad_norm = ad.clip_grads_(model.params, clip_norm)
    optimizer.step()
    return breakdown, grad_norm


def greedy_decode(model, prompt: np.ndarray, max_new: int, eos_id: int = EOS_ID) -> np.ndarray:
    """Append argmax tokens (ties break to the lowest id) until EOS or max_new."""
    seq = list(np.asarray(prompt, dtype=np.int64))
    for _ in range(max_new):
        if len(seq) >= model.context_limit:
            break
        logits = model.forward(np.asarray(seq, dtype=np.int64)[None, :]).data[0, -1]
        nxt = int(np.argmax(logits))
        seq.append(nxt)
        if nxt == eos_id:
            break
    return np.asarray(seq, dtype=np.int64)


def greedy_decode_batch(
    model, prompts: list[np.ndarray], max_new: int, eos_id: int = EOS_ID
) -> list[np.ndarray]:
    """Lockstep greedy decode; equivalent to per-prompt greedy_decode.

    Prompts are bucketed by length so each bucket shares one growing prefix
    tensor; finished rows keep padding that cannot influence other rows.
    """
    results: dict[int, np.ndarray] = {}
    by_len: dict[int, list[int]] = {}
    for idx, p in enumerate(prompts):
        by_len.setdefault(len(p), []).append(idx)
    for plen, idxs in sorted(by_len.items()):
        block = np.stack([np.asarray(prompts[i], dtype=np.int64) for i in idxs])
        done = np.zeros(len(idxs), dtype=bool)
        lengths = np.full(len(idxs), plen)
        for _ in range(max_new):
            if done.all() or block.shape[1] >= model.context_limit:
                break
            logits = model.forward(block).data[:, -1, :]
            nxt = logits.argmax(axis=1).astype(np.int64)
            nxt[done] = PAD_ID
            block = np.concatenate([block, nxt[:, None]], axis=1)
            lengths[~done] += 1
            done |= nxt == eos_id
        for row, idx in enumerate(idxs):
            results[idx] = block[row, : lengths[row]]
    return [results[i] for i in range(len(prompts))]


def _param_blob(model) -> np.ndarray:
    parts = [model.params[k].data.astype("<f4").ravel() for k in sorted(model.params)]
    if model.kind == "tabular" and not model.params:
        parts = [model.table.astype("<f4").ravel()]
    return np.concatenate(parts) if parts else np.zeros(0, dtype="<f4")


def snapshot_bytes(model, stage: str, vocab: Vocab) -> bytes:
    if stage not in STAGE_TAGS:
        raise ValueError(f"unknown stage tag {stage!r}")
    config = model.config_dict(vocab)
    config_json = json.dumps(config, sort_keys=True).encode("utf-8")
    blob = _param_blob(model)
    head = SNAPSHOT_MAGIC
    head += struct.pack("<H", SNAPSHOT_VERSION)
    head += struct.pack("<BB", STAGE_TAGS[stage], _KIND_CODES[model.kind])
    head += vocab.fingerprint
    head += struct.pack("<I", len(config_json))
    head += config_json
    head += struct.pack("<Q", blob.size)
    return head + blob.tobytes()


def save_snapshot(path, model, stage: str, vocab: Vocab) -> None:
    with open(path, "wb") as fh:
        fh.write(snapshot_bytes(model, stage, vocab))


def load_snapshot(path):
    """Read a snapshot; returns (model, stage, vocab)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != SNAPSHOT_MAGIC:
        raise ValueError("bad snapshot magic")
    version = struct.unpack_from("<H", data, 8)[0]
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    stage_code, kind_code = struct.unpack_from("<BB", data, 10)
    fingerprint = data[12:44]
    (config_len,) = struct.unpack_from("<I", data, 44)
    config = json.loads(data[48 : 48 + config_len].decode("utf-8"))
    offset = 48 + config_len
    (count,) = struct.unpack_from("<Q", data, offset)
    offset += 8
    blob = np.frombuffer(data, dtype="<f4", count=count, offset=offset).astype(np.float64)
    vocab = Vocab(config["vocab_inventory"])
    if vocab.fingerprint != fingerprint:
        raise ValueError("snapshot vocab fingerprint does not match its inventory")
    if kind_code == _KIND_CODES["tabular"]:
        v = config["vocab_size"]
        model = TabularLM(blob.reshape(v, v))
    else:
        cfg = NeuralLMConfig(
            **{k: config[k] for k in (
                "vocab_size", "embed_dim", "num_layers", "num_heads",
                "context_limit", "feedforward_dim", "seed",
            )}
        )
        model = NeuralLM(cfg)
        pos = 0
        for k in sorted(model.params):
            size = model.params[k].data.size
            model.params[k].data = blob[pos : pos + size].reshape(model.params[k].data.shape)
            pos += size
        if pos != count:
            raise ValueError("parameter blob length does not match the config")
    return model, STAGE_NAMES[stage_code], vocab
